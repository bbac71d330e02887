//! Log-mel spectrogram conditioning features.
//!
//! STFT with a periodic Hann window and reflect padding of `n_fft / 2` on
//! both sides, power spectrum, triangular HTK-mel filterbank, then
//! `log(max(power, floor))`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// `None` means Nyquist.
    pub fmax: Option<f64>,
    pub log_floor: f64,
}

impl MelConfig {
    /// 4 kHz audio, 20 bands.
    pub fn desk() -> Self {
        MelConfig {
            sample_rate: 4000,
            n_fft: 256,
            hop: 64,
            n_mels: 20,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-5,
        }
    }

    /// 22.05 kHz audio, 80 bands.
    pub fn paper() -> Self {
        MelConfig {
            sample_rate: 22050,
            n_fft: 1024,
            hop: 256,
            n_mels: 80,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-5,
        }
    }

    pub fn fmax_hz(&self) -> f64 {
        self.fmax.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.sample_rate == 0 {
            return Err(Error::config("mel.sample_rate", "must be positive"));
        }
        if self.n_fft < 2 {
            return Err(Error::config("mel.n_fft", "must be at least 2"));
        }
        if self.hop == 0 {
            return Err(Error::config("mel.hop", "must be positive"));
        }
        if self.n_mels == 0 {
            return Err(Error::config("mel.n_mels", "need at least one band"));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("mel.log_floor", "must be positive"));
        }
        let fmax = self.fmax_hz();
        if !(self.fmin >= 0.0 && self.fmin < fmax && fmax <= nyquist) {
            return Err(Error::config(
                "mel.fmax",
                format!(
                    "need 0 <= fmin < fmax <= {nyquist}, got {}..{fmax}",
                    self.fmin
                ),
            ));
        }
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "mel.sample_rate",
        "mel.n_fft",
        "mel.hop",
        "mel.n_mels",
        "mel.fmin",
        "mel.fmax",
        "mel.log_floor",
    ];

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("mel.sample_rate", self.sample_rate);
        kv.set("mel.n_fft", self.n_fft);
        kv.set("mel.hop", self.hop);
        kv.set("mel.n_mels", self.n_mels);
        kv.set("mel.fmin", self.fmin);
        if let Some(fmax) = self.fmax {
            kv.set("mel.fmax", fmax);
        }
        kv.set("mel.log_floor", self.log_floor);
    }

    /// Missing keys keep the value from `base`.
    pub fn from_kv(kv: &KeyValues, base: &MelConfig) -> Result<Self> {
        let cfg = MelConfig {
            sample_rate: kv.get("mel.sample_rate")?.unwrap_or(base.sample_rate),
            n_fft: kv.get("mel.n_fft")?.unwrap_or(base.n_fft),
            hop: kv.get("mel.hop")?.unwrap_or(base.hop),
            n_mels: kv.get("mel.n_mels")?.unwrap_or(base.n_mels),
            fmin: kv.get("mel.fmin")?.unwrap_or(base.fmin),
            fmax: kv.get("mel.fmax")?.or(base.fmax),
            log_floor: kv.get("mel.log_floor")?.unwrap_or(base.log_floor),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Band edges in Hz: `n_mels + 2` points equally spaced on the mel scale.
fn band_edges(cfg: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax_hz());
    let n = cfg.n_mels + 1;
    (0..=n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
        .collect()
}

fn triangle(edges: &[f64], band: usize, hz: f64) -> f64 {
    let (l, c, r) = (edges[band], edges[band + 1], edges[band + 2]);
    if hz <= l || hz >= r {
        0.0
    } else if hz <= c {
        (hz - l) / (c - l)
    } else {
        (r - hz) / (r - c)
    }
}

/// Weight of each band at a frequency.
pub fn band_weights(cfg: &MelConfig, hz: f64) -> Vec<f64> {
    let edges = band_edges(cfg);
    (0..cfg.n_mels).map(|b| triangle(&edges, b, hz)).collect()
}

/// The band whose triangle peaks closest to `hz`'s position, i.e. the
/// band with the largest weight there. `None` outside `fmin..fmax`.
pub fn band_of_frequency(cfg: &MelConfig, hz: f64) -> Option<usize> {
    let w = band_weights(cfg, hz);
    let (best, &wmax) = w.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1))?;
    (wmax > 0.0).then_some(best)
}

/// `(n_mels, n_fft / 2 + 1)` filterbank matrix, row-major.
pub fn filterbank(cfg: &MelConfig) -> Vec<f64> {
    let bins = cfg.n_fft / 2 + 1;
    let edges = band_edges(cfg);
    let mut fb = vec![0.0; cfg.n_mels * bins];
    for b in 0..cfg.n_mels {
        for k in 0..bins {
            let hz = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
            fb[b * bins + k] = triangle(&edges, b, hz);
        }
    }
    fb
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Number of frames for `t` samples.
pub fn frame_count(t: usize, hop: usize) -> usize {
    t.div_ceil(hop)
}

fn reflect_pad(signal: &[f64], pad: usize) -> Vec<f64> {
    let n = signal.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| signal[i]));
    out.extend_from_slice(signal);
    out.extend((0..pad).map(|i| signal[n - 2 - i]));
    out
}

/// Power spectrogram, `(frames, n_fft / 2 + 1)` row-major.
pub fn power_spectrogram(signal: &[f64], n_fft: usize, hop: usize) -> Result<Vec<f64>> {
    if signal.len() < n_fft {
        return Err(Error::InvalidArgument(format!(
            "signal of length {} is shorter than the FFT size {n_fft}",
            signal.len()
        )));
    }
    let padded = reflect_pad(signal, n_fft / 2);
    let window = hann(n_fft);
    let frames = frame_count(signal.len(), hop);
    let bins = n_fft / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let start = f * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf[..bins].iter().map(|z| z.norm_sqr()));
    }
    Ok(out)
}

/// `(1, n_mels, frames)` log-mel features.
pub fn mel_spectrogram(signal: &[f64], cfg: &MelConfig) -> Result<Tensor> {
    cfg.validate()?;
    let power = power_spectrogram(signal, cfg.n_fft, cfg.hop)?;
    let bins = cfg.n_fft / 2 + 1;
    let frames = power.len() / bins;
    let fb = filterbank(cfg);
    let mut data = vec![0.0; cfg.n_mels * frames];
    for b in 0..cfg.n_mels {
        let row = &fb[b * bins..(b + 1) * bins];
        for f in 0..frames {
            let spec = &power[f * bins..(f + 1) * bins];
            let e: f64 = row.iter().zip(spec).map(|(w, p)| w * p).sum();
            data[b * frames + f] = e.max(cfg.log_floor).ln();
        }
    }
    Tensor::new(&[1, cfg.n_mels, frames], data)
}

/// Fixed rescaling fed to the networks: `log_mel / |log floor|`, so the
/// floor maps to -1 and unit power to 0.
pub fn normalize_condition(mel: &Tensor, cfg: &MelConfig) -> Tensor {
    let k = 1.0 / cfg.log_floor.ln().abs().max(1e-12);
    mel.scale(k)
}

/// Repeats each frame `hop` times and trims to `target_t`.
///
/// Trimming may only drop part of the final frame: `frames * hop` must lie
/// in `target_t..target_t + hop`.
pub fn upsample_condition(mel: &Tensor, hop: usize, target_t: usize) -> Result<Tensor> {
    let (b, c, frames) = mel.dims3()?;
    if hop == 0 {
        return Err(Error::InvalidArgument("hop must be positive".into()));
    }
    let full = frames * hop;
    if full < target_t || full - target_t >= hop {
        return Err(Error::Shape(format!(
            "{frames} frames at hop {hop} cover {full} samples, which does not trim to {target_t}"
        )));
    }
    let src = mel.data();
    let mut data = Vec::with_capacity(b * c * target_t);
    for row in 0..b * c {
        let base = row * frames;
        data.extend((0..target_t).map(|t| src[base + t / hop]));
    }
    Tensor::new(&[b, c, target_t], data)
}

/// Mel features for a time-aligned signal: log-mel, normalized, upsampled.
pub fn condition_for_signal(signal: &[f64], cfg: &MelConfig) -> Result<Tensor> {
    let mel = mel_spectrogram(signal, cfg)?;
    upsample_condition(&normalize_condition(&mel, cfg), cfg.hop, signal.len())
}

const CACHE_MAGIC: &[u8; 8] = b"FWAVMEL1";

/// Cache layout: magic, `n_mels` and `frames` as u32 LE, then row-major
/// f32 LE values.
pub fn encode_mel_cache(mel: &Tensor) -> Result<Vec<u8>> {
    let (b, c, f) = mel.dims3()?;
    if b != 1 {
        return Err(Error::Shape(format!(
            "mel cache holds one clip, got batch {b}"
        )));
    }
    let mut out = Vec::with_capacity(16 + 4 * c * f);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    for &v in mel.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_mel_cache(bytes: &[u8]) -> Result<Tensor> {
    let bad = |why: &str| Error::Audio(format!("mel cache: {why}"));
    if bytes.len() < 16 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (c, f) = (word(8), word(12));
    let body = &bytes[16..];
    if body.len() != 4 * c * f {
        return Err(bad(&format!(
            "expected {} value bytes, found {}",
            4 * c * f,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(&[1, c, f], data)
}

pub fn write_mel_cache(mel: &Tensor, path: impl AsRef<std::path::Path>) -> Result<()> {
    std::fs::write(path, encode_mel_cache(mel)?)?;
    Ok(())
}

pub fn read_mel_cache(path: impl AsRef<std::path::Path>) -> Result<Tensor> {
    decode_mel_cache(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(hz: f64, sr: u32, n: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * PI * hz * i as f64 / sr as f64).sin())
            .collect()
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = MelConfig::desk();
        let mel = mel_spectrogram(&vec![0.0; 1000], &cfg).unwrap();
        assert!(mel.data().iter().all(|&v| v == cfg.log_floor.ln()));
    }

    #[test]
    fn frame_count_matches_ceil() {
        let cfg = MelConfig {
            hop: 256,
            n_fft: 1024,
            sample_rate: 16000,
            ..MelConfig::desk()
        };
        let mel = mel_spectrogram(&vec![0.1; 16000], &cfg).unwrap();
        assert_eq!(mel.shape()[2], 63);
    }

    #[test]
    fn sine_peaks_in_its_band() {
        let cfg = MelConfig {
            sample_rate: 16000,
            n_fft: 1024,
            hop: 256,
            n_mels: 40,
            ..MelConfig::desk()
        };
        let mel = mel_spectrogram(&sine(440.0, 16000, 8000, 0.5), &cfg).unwrap();
        let frames = mel.shape()[2];
        let mid = frames / 2;
        let argmax = (0..cfg.n_mels)
            .max_by(|&a, &b| mel.at3(0, a, mid).total_cmp(&mel.at3(0, b, mid)))
            .unwrap();
        // Oracle: evaluate the triangle formulas directly at 440 Hz.
        let edges: Vec<f64> = {
            let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(8000.0));
            (0..=cfg.n_mels + 1)
                .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
                .collect()
        };
        let containing = (0..cfg.n_mels)
            .filter(|&b| edges[b] < 440.0 && 440.0 < edges[b + 2])
            .min_by(|&a, &b| {
                (edges[a + 1] - 440.0)
                    .abs()
                    .total_cmp(&(edges[b + 1] - 440.0).abs())
            })
            .unwrap();
        assert_eq!(argmax, containing);
        assert_eq!(band_of_frequency(&cfg, 440.0), Some(containing));
    }

    #[test]
    fn short_signal_is_rejected() {
        assert!(mel_spectrogram(&[0.0; 100], &MelConfig::desk()).is_err());
    }

    #[test]
    fn upsample_repeats_frames() {
        let mel = Tensor::new(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample_condition(&mel, 2, 8).unwrap();
        assert_eq!(up.data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
        let strided: Vec<f64> = up.data().iter().step_by(2).copied().collect();
        assert_eq!(strided, mel.to_vec());
        let trimmed = upsample_condition(&mel, 3, 10).unwrap();
        for t in 0..10 {
            assert_eq!(trimmed.data()[t], mel.data()[t / 3]);
        }
        assert!(upsample_condition(&mel, 2, 9).is_err());
        assert!(upsample_condition(&mel, 2, 6).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let mel = Tensor::from_fn(&[1, 3, 5], |i| i as f64 * 0.25 - 1.0);
        let bytes = encode_mel_cache(&mel).unwrap();
        assert_eq!(&bytes[..8], b"FWAVMEL1");
        assert_eq!(decode_mel_cache(&bytes).unwrap(), mel);
        assert!(decode_mel_cache(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = MelConfig {
            fmax: Some(9000.0),
            ..MelConfig::desk()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("mel.fmax"), "{err}");
    }
}
