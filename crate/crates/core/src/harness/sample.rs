//! Waveform generation from a trained checkpoint.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::audio::mel::{
    condition_for_signal, normalize_condition, read_mel_cache, upsample_condition,
};
use crate::audio::{load_wav, write_wav, WavClip};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::harness::train::{load_flow, load_student, load_teacher, stored_config};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub checkpoint: PathBuf,
    /// A WAV file, or a `.mel` cache of raw log-mel frames.
    pub input: PathBuf,
    pub out: PathBuf,
    /// Falls back to the checkpoint's configured temperature.
    pub temperature: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleReport {
    pub kind: String,
    pub samples: usize,
    pub sample_rate: u32,
    pub temperature: Option<f64>,
    /// Original condition length when it had to be trimmed.
    pub trimmed_from: Option<usize>,
    /// Variance of the generated signal before clipping to [-1, 1].
    pub variance: f64,
    pub clipped: usize,
    pub wall_secs: f64,
}

/// The upsampled, normalized condition `(1, n_mels, T)` for a WAV or
/// `.mel` input.
pub fn load_condition(path: &Path, mel: &crate::audio::MelConfig) -> Result<Tensor> {
    if path.extension().is_some_and(|e| e == "mel") {
        let frames = read_mel_cache(path)?;
        let (_, n_mels, n) = frames.dims3()?;
        if n_mels != mel.n_mels {
            return Err(Error::config(
                "mel.n_mels",
                format!(
                    "{} holds {n_mels} bands, the model expects {}",
                    path.display(),
                    mel.n_mels
                ),
            ));
        }
        upsample_condition(&normalize_condition(&frames, mel), mel.hop, n * mel.hop)
    } else {
        let wav = load_wav(path)?;
        if wav.sample_rate != mel.sample_rate {
            return Err(Error::Audio(format!(
                "{} is {} Hz, the model was trained at {} Hz",
                path.display(),
                wav.sample_rate,
                mel.sample_rate
            )));
        }
        condition_for_signal(&wav.to_signal(), mel)
    }
}

/// Keeps the first `t - t % divisor` time steps.
fn trim_time(c: &Tensor, divisor: usize) -> Result<Tensor> {
    let (_, ch, t) = c.dims3()?;
    let keep = t - t % divisor;
    if keep == 0 {
        return Err(Error::Shape(format!(
            "condition of {t} samples is shorter than {divisor}"
        )));
    }
    let mut data = Vec::with_capacity(ch * keep);
    for row in c.data().chunks(t) {
        data.extend_from_slice(&row[..keep]);
    }
    Tensor::new(&[1, ch, keep], data)
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Generates audio for the input's condition and writes it as PCM-16.
pub fn cmd_sample(req: &SampleRequest) -> Result<SampleReport> {
    let header = Checkpoint::load(&req.checkpoint)?;
    let kind = header.header.get_str("kind").unwrap_or("").to_string();
    let cfg = stored_config(&header)?;
    let mut c = load_condition(&req.input, &cfg.mel)?;
    let clock = Instant::now();
    let mut trimmed_from = None;
    let mut temperature = None;
    let signal = match kind.as_str() {
        "flow" => {
            let (model, _) = load_flow(&req.checkpoint)?;
            let t = c.dims3()?.2;
            let divisor = model.config().time_divisor();
            if t % divisor != 0 {
                c = trim_time(&c, divisor)?;
                trimmed_from = Some(t);
                log::warn!(
                    "condition length {t} is not divisible by {divisor}; trimmed to {}",
                    c.dims3()?.2
                );
            }
            let temp = req.temperature.unwrap_or(model.config().temperature);
            temperature = Some(temp);
            model.sample(&c, temp, req.seed)?
        }
        "iaf" => load_student(&req.checkpoint)?.0.sample(&c, req.seed)?,
        "ar" => {
            load_teacher(&req.checkpoint)?
                .0
                .sample(&c, req.seed)?
                .signal
        }
        other => return Err(Error::Checkpoint(format!("unknown model kind `{other}`"))),
    };
    if temperature.is_none() && req.temperature.is_some() {
        log::warn!("temperature only applies to flow checkpoints; ignored for `{kind}`");
    }
    let wall_secs = clock.elapsed().as_secs_f64();
    let data = signal.data();
    let (wav, clipped) = WavClip::from_signal(data, cfg.mel.sample_rate);
    if clipped > 0 {
        log::warn!("{clipped} of {} samples clipped to [-1, 1]", data.len());
    }
    if let Some(dir) = req.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_wav(&wav, &req.out)?;
    Ok(SampleReport {
        kind,
        samples: data.len(),
        sample_rate: cfg.mel.sample_rate,
        temperature,
        trimmed_from,
        variance: variance(data),
        clipped,
        wall_secs,
    })
}
