//! Audio files, mel conditioning and the training corpus.

pub mod corpus;
pub mod mel;
pub mod wav;

pub use corpus::{synth_corpus, Clip, Corpus, CorpusSpec};
pub use mel::{mel_spectrogram, upsample_condition, MelConfig};
pub use wav::{load_wav, write_wav, WavClip};
