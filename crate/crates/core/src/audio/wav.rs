//! Mono 16-bit PCM WAV files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mono 16-bit PCM audio.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WavClip {
    pub sample_rate: u32,
    pub samples: Vec<i16>,
}

impl WavClip {
    /// Samples divided by 32768, so `-32768` maps to exactly `-1.0`.
    pub fn to_signal(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| s as f64 / 32768.0).collect()
    }

    /// `(1, 1, T)` tensor of [`WavClip::to_signal`].
    pub fn to_tensor(&self) -> Tensor {
        let s = self.to_signal();
        Tensor::from_fn(&[1, 1, s.len()], |i| s[i])
    }

    /// Quantizes a signal, hard-clipping to `[-1, 1]` first.
    /// Returns the clip and how many samples were clipped.
    pub fn from_signal(signal: &[f64], sample_rate: u32) -> (Self, usize) {
        let mut clipped = 0;
        let samples = signal
            .iter()
            .map(|&v| {
                let v = if v.is_nan() { 0.0 } else { v };
                if v.abs() > 1.0 {
                    clipped += 1;
                }
                (v.clamp(-1.0, 1.0) * 32768.0)
                    .round()
                    .clamp(-32768.0, 32767.0) as i16
            })
            .collect();
        (
            WavClip {
                sample_rate,
                samples,
            },
            clipped,
        )
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<WavClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Audio(format!(
            "{}: only mono is supported, file has {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Audio(format!(
            "{}: only 16-bit integer PCM is supported, file is {}-bit {:?}",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    Ok(WavClip {
        sample_rate: spec.sample_rate,
        samples,
    })
}

pub fn write_wav(clip: &WavClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let audio_err = |e: hound::Error| Error::Audio(format!("{}: {e}", path.display()));
    let mut writer = hound::WavWriter::create(path, spec).map_err(audio_err)?;
    for &s in &clip.samples {
        writer.write_sample(s).map_err(audio_err)?;
    }
    writer.finalize().map_err(audio_err)
}
