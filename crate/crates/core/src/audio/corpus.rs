//! Synthetic sinusoid corpus, WAV-directory loading and random chunking.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mel::{condition_for_signal, mel_spectrogram, write_mel_cache, MelConfig};
use super::wav::{load_wav, write_wav, WavClip};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Peak amplitude bound of every synthetic clip.
pub const MAX_AMPLITUDE: f64 = 0.95;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sinusoid {
    pub freq: f64,
    pub amp: f64,
    pub phase: f64,
}

/// Slow amplitude modulation `1 - depth * (0.5 + 0.5 sin(2 pi rate t + phase))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Envelope {
    pub rate: f64,
    pub depth: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub name: String,
    pub wav: WavClip,
    /// Network-ready condition, `(1, n_mels, T)`.
    pub condition: Tensor,
    /// Generator components; empty for loaded audio.
    pub components: Vec<Sinusoid>,
}

impl Clip {
    pub fn from_wav(name: impl Into<String>, wav: WavClip, mel: &MelConfig) -> Result<Self> {
        let name = name.into();
        if wav.sample_rate != mel.sample_rate {
            return Err(Error::Audio(format!(
                "{name}: sample rate {} does not match the mel config's {}",
                wav.sample_rate, mel.sample_rate
            )));
        }
        let condition = condition_for_signal(&wav.to_signal(), mel)?;
        Ok(Clip {
            name,
            wav,
            condition,
            components: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.wav.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wav.samples.is_empty()
    }

    /// `(x, c)` for `len` samples starting at `start`.
    pub fn chunk(&self, start: usize, len: usize) -> Result<(Tensor, Tensor)> {
        if start + len > self.len() {
            return Err(Error::InvalidArgument(format!(
                "chunk {start}..{} exceeds clip `{}` of length {}",
                start + len,
                self.name,
                self.len()
            )));
        }
        let x = Tensor::from_fn(&[1, 1, len], |i| {
            self.wav.samples[start + i] as f64 / 32768.0
        });
        Ok((x, self.condition.slice_time(start, len)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub n_clips: usize,
    pub clip_len: usize,
    pub test_clips: usize,
    pub seed: u64,
    pub min_freq: f64,
    pub max_freq: f64,
}

impl CorpusSpec {
    pub fn desk(seed: u64) -> Self {
        CorpusSpec {
            n_clips: 48,
            clip_len: 16384,
            test_clips: 2,
            seed,
            min_freq: 80.0,
            max_freq: 1200.0,
        }
    }

    pub fn validate(&self, mel: &MelConfig) -> Result<()> {
        if self.test_clips == 0 || self.test_clips >= self.n_clips {
            return Err(Error::config(
                "corpus.test_clips",
                format!(
                    "need 1..{} held-out clips, got {}",
                    self.n_clips, self.test_clips
                ),
            ));
        }
        if self.clip_len < mel.n_fft {
            return Err(Error::config(
                "corpus.clip_len",
                "shorter than the FFT size",
            ));
        }
        let nyquist = mel.sample_rate as f64 / 2.0;
        if !(0.0 < self.min_freq && self.min_freq < self.max_freq && self.max_freq < nyquist) {
            return Err(Error::config(
                "corpus.max_freq",
                format!("need 0 < min < max < {nyquist}"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Clip>,
    pub test: Vec<Clip>,
}

fn synth_signal(components: &[Sinusoid], env: &Envelope, sr: f64, len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let gain = 1.0 - env.depth * (0.5 + 0.5 * (2.0 * PI * env.rate * t + env.phase).sin());
            let tone: f64 = components
                .iter()
                .map(|s| s.amp * (2.0 * PI * s.freq * t + s.phase).sin())
                .sum();
            gain * tone
        })
        .collect()
}

/// Mixtures of 2 to 4 amplitude-modulated sinusoids. The last
/// `spec.test_clips` clips form the held-out split.
pub fn synth_corpus(spec: &CorpusSpec, mel: &MelConfig) -> Result<Corpus> {
    spec.validate(mel)?;
    mel.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut clips = Vec::with_capacity(spec.n_clips);
    for i in 0..spec.n_clips {
        let n = rng.gen_range(2..=4);
        let raw: Vec<(f64, f64, f64)> = (0..n)
            .map(|_| {
                (
                    rng.gen_range(spec.min_freq..spec.max_freq),
                    rng.gen_range(0.2..1.0),
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect();
        // Amplitudes sum to at most MAX_AMPLITUDE, so |x| <= MAX_AMPLITUDE.
        let peak = MAX_AMPLITUDE * rng.gen_range(0.5..1.0);
        let total: f64 = raw.iter().map(|r| r.1).sum();
        let components: Vec<Sinusoid> = raw
            .iter()
            .map(|&(freq, a, phase)| Sinusoid {
                freq,
                amp: peak * a / total,
                phase,
            })
            .collect();
        let env = Envelope {
            rate: rng.gen_range(0.5..3.0),
            depth: rng.gen_range(0.0..0.5),
            phase: rng.gen_range(0.0..2.0 * PI),
        };
        let signal = synth_signal(&components, &env, mel.sample_rate as f64, spec.clip_len);
        let (wav, _) = WavClip::from_signal(&signal, mel.sample_rate);
        let mut clip = Clip::from_wav(format!("synth_{i:03}.wav"), wav, mel)?;
        clip.components = components;
        clips.push(clip);
    }
    let test = clips.split_off(spec.n_clips - spec.test_clips);
    Ok(Corpus { train: clips, test })
}

/// Writes every clip as WAV plus a `.mel` cache, and a manifest listing the
/// WAV files relative to `dir`.
pub fn write_corpus(clips: &[Clip], mel: &MelConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for clip in clips {
        write_wav(&clip.wav, dir.join(&clip.name))?;
        let features = mel_spectrogram(&clip.wav.to_signal(), mel)?;
        write_mel_cache(&features, dir.join(&clip.name).with_extension("mel"))?;
        manifest.push_str(&clip.name);
        manifest.push('\n');
    }
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(dir.as_ref().join(MANIFEST))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Loads the WAV files listed in `dir/manifest.txt`.
pub fn load_wav_dir(dir: impl AsRef<Path>, mel: &MelConfig) -> Result<Vec<Clip>> {
    let dir = dir.as_ref();
    read_manifest(dir)?
        .into_iter()
        .map(|name| {
            let wav = load_wav(dir.join(&name))?;
            Clip::from_wav(name, wav, mel)
        })
        .collect()
}

/// Draws a batch of random `len`-sample chunks, each lying fully inside its
/// clip. Returns `(x, c)` with shapes `(B, 1, len)` and `(B, n_mels, len)`.
pub fn random_chunks<R: Rng + ?Sized>(
    clips: &[Clip],
    len: usize,
    batch: usize,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let eligible: Vec<&Clip> = clips.iter().filter(|c| c.len() >= len).collect();
    if eligible.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no clip holds a {len}-sample chunk"
        )));
    }
    let mut xs = Vec::with_capacity(batch);
    let mut cs = Vec::with_capacity(batch);
    for _ in 0..batch {
        let clip = eligible[rng.gen_range(0..eligible.len())];
        let start = rng.gen_range(0..=clip.len() - len);
        let (x, c) = clip.chunk(start, len)?;
        xs.push(x);
        cs.push(c);
    }
    Ok((Tensor::stack_batch(&xs)?, Tensor::stack_batch(&cs)?))
}

/// Non-overlapping chunks from the start of each clip, up to `per_clip` each.
/// Deterministic, for held-out evaluation.
pub fn fixed_chunks(clips: &[Clip], len: usize, per_clip: usize) -> Result<Vec<(Tensor, Tensor)>> {
    let mut out = Vec::new();
    for clip in clips {
        for k in 0..per_clip.min(clip.len() / len) {
            out.push(clip.chunk(k * len, len)?);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no clip holds a {len}-sample chunk"
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::mel::{band_of_frequency, mel_spectrogram};

    fn small() -> (CorpusSpec, MelConfig) {
        let spec = CorpusSpec {
            n_clips: 4,
            clip_len: 4096,
            test_clips: 1,
            ..CorpusSpec::desk(3)
        };
        (spec, MelConfig::desk())
    }

    #[test]
    fn same_seed_same_bytes() {
        let (spec, mel) = small();
        let a = synth_corpus(&spec, &mel).unwrap();
        let b = synth_corpus(&spec, &mel).unwrap();
        assert_eq!(a, b);
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_corpus(&a.train, &mel, da.path()).unwrap();
        write_corpus(&b.train, &mel, db.path()).unwrap();
        for name in read_manifest(da.path()).unwrap() {
            assert_eq!(
                std::fs::read(da.path().join(&name)).unwrap(),
                std::fs::read(db.path().join(&name)).unwrap()
            );
        }
        let other = synth_corpus(&CorpusSpec { seed: 4, ..spec }, &mel).unwrap();
        assert_ne!(other.train[0].wav, a.train[0].wav);
    }

    #[test]
    fn amplitude_bound_and_split() {
        let (spec, mel) = small();
        let corpus = synth_corpus(&spec, &mel).unwrap();
        assert_eq!((corpus.train.len(), corpus.test.len()), (3, 1));
        for clip in corpus.train.iter().chain(&corpus.test) {
            assert!((2..=4).contains(&clip.components.len()));
            assert!(clip
                .wav
                .to_signal()
                .iter()
                .all(|v| v.abs() <= MAX_AMPLITUDE));
        }
    }

    #[test]
    fn mel_peak_matches_a_generator_frequency() {
        let (spec, mel) = small();
        let corpus = synth_corpus(&spec, &mel).unwrap();
        for clip in corpus.train.iter().chain(&corpus.test) {
            let m = mel_spectrogram(&clip.wav.to_signal(), &mel).unwrap();
            let frames = m.shape()[2];
            let energy: Vec<f64> = (0..mel.n_mels)
                .map(|b| (0..frames).map(|f| m.at3(0, b, f).exp()).sum())
                .collect();
            let peak = (0..mel.n_mels)
                .max_by(|&a, &b| energy[a].total_cmp(&energy[b]))
                .unwrap();
            let near = clip.components.iter().any(|s| {
                let band = band_of_frequency(&mel, s.freq).unwrap();
                band.abs_diff(peak) <= 1
            });
            assert!(
                near,
                "{}: peak band {peak}, components {:?}",
                clip.name, clip.components
            );
        }
    }

    #[test]
    fn wav_dir_round_trip() {
        let (spec, mel) = small();
        let corpus = synth_corpus(&spec, &mel).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&corpus.train, &mel, dir.path()).unwrap();
        let loaded = load_wav_dir(dir.path(), &mel).unwrap();
        assert_eq!(loaded.len(), corpus.train.len());
        for (a, b) in loaded.iter().zip(&corpus.train) {
            assert_eq!(a.wav, b.wav);
            assert_eq!(a.condition, b.condition);
        }
    }

    #[test]
    fn chunks_stay_inside_clips() {
        let (spec, mel) = small();
        let corpus = synth_corpus(&spec, &mel).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let (x, c) = random_chunks(&corpus.train, 1024, 2, &mut rng).unwrap();
            assert_eq!(x.shape(), &[2, 1, 1024]);
            assert_eq!(c.shape(), &[2, mel.n_mels, 1024]);
        }
        assert!(random_chunks(&corpus.train, 8192, 1, &mut rng).is_err());
        assert_eq!(fixed_chunks(&corpus.test, 1024, 2).unwrap().len(), 2);
    }
}
