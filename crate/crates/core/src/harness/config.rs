//! Run configuration: one flat `key = value` file covering every knob.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::audio::{CorpusSpec, MelConfig};
use crate::baselines::{DistillLossConfig, DistillMode, GaussianArConfig, IafConfig};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Maximum likelihood for the flow.
    Flow,
    /// Teacher-forced maximum likelihood for the autoregressive teacher.
    Ar,
    /// Student distillation from a frozen teacher.
    Distill,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            TrainMode::Flow => "flow",
            TrainMode::Ar => "ar",
            TrainMode::Distill => "distill",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(TrainMode::Flow),
            "ar" => Ok(TrainMode::Ar),
            "distill" => Ok(TrainMode::Distill),
            other => Err(Error::config(
                "mode",
                format!("expected flow, ar or distill, got `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub steps: u64,
    pub batch: usize,
    /// Training chunk length in samples.
    pub chunk: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_interval: u64,
    /// Checkpoint cadence in steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Held-out evaluation cadence in steps; 0 evaluates only at the ends.
    pub eval_every: u64,
    /// Held-out chunks taken from each test clip.
    pub eval_chunks: usize,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub teacher_checkpoint: Option<PathBuf>,
    /// Directory with `manifest.txt`; the synthetic corpus is used when absent.
    pub data_dir: Option<PathBuf>,
    pub corpus: CorpusSpec,
    pub mel: MelConfig,
    pub model: ModelConfig,
    pub teacher: GaussianArConfig,
    pub student: IafConfig,
    pub distill: DistillLossConfig,
}

const RUN_KEYS: &[&str] = &[
    "mode",
    "seed",
    "steps",
    "batch",
    "chunk",
    "lr",
    "lr_decay",
    "lr_decay_interval",
    "checkpoint_every",
    "eval_every",
    "eval_chunks",
    "checkpoint",
    "log",
    "resume",
    "teacher_checkpoint",
    "data_dir",
    "corpus.n_clips",
    "corpus.clip_len",
    "corpus.test_clips",
    "corpus.seed",
    "corpus.min_freq",
    "corpus.max_freq",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl RunConfig {
    pub fn desk(seed: u64) -> Self {
        RunConfig {
            mode: TrainMode::Flow,
            seed,
            steps: 2000,
            batch: 2,
            chunk: 4096,
            lr: 1e-3,
            lr_decay: 0.5,
            lr_decay_interval: 200_000,
            checkpoint_every: 500,
            eval_every: 250,
            eval_chunks: 2,
            checkpoint: None,
            log: None,
            resume: None,
            teacher_checkpoint: None,
            data_dir: None,
            corpus: CorpusSpec::desk(seed),
            mel: MelConfig::desk(),
            model: ModelConfig::desk(),
            teacher: GaussianArConfig::desk(),
            student: IafConfig::desk(),
            distill: DistillLossConfig::new(DistillMode::Both),
        }
    }

    /// A seconds-long configuration with tiny models, for tests and dry runs.
    pub fn smoke(seed: u64) -> Self {
        let mut cfg = Self::desk(seed);
        cfg.steps = 4;
        cfg.batch = 1;
        cfg.chunk = 256;
        cfg.checkpoint_every = 2;
        cfg.eval_every = 2;
        cfg.eval_chunks = 1;
        cfg.corpus.n_clips = 3;
        cfg.corpus.clip_len = 1024;
        cfg.corpus.test_clips = 1;
        cfg.model.n_blocks = 2;
        cfg.model.n_flows = 2;
        cfg.model.factor_after = 1;
        cfg.model.residual_channels = 8;
        cfg.model.gate_channels = 8;
        cfg.model.skip_channels = 8;
        cfg.teacher.n_layers = 4;
        cfg.teacher.dilation_cycle = 4;
        cfg.teacher.residual_channels = 8;
        cfg.teacher.gate_channels = 8;
        cfg.teacher.skip_channels = 8;
        cfg.student.layers_per_stack = 2;
        cfg.student.residual_channels = 8;
        cfg.student.gate_channels = 8;
        cfg.student.skip_channels = 8;
        cfg
    }

    /// Every key a config file may contain.
    pub fn allowed_keys() -> Vec<String> {
        let mut keys: Vec<String> = RUN_KEYS.iter().map(|k| k.to_string()).collect();
        keys.extend(ModelConfig::KEYS.iter().map(|k| format!("model.{k}")));
        for list in [
            MelConfig::KEYS,
            GaussianArConfig::KEYS,
            IafConfig::KEYS,
            DistillLossConfig::KEYS,
        ] {
            keys.extend(list.iter().map(|k| k.to_string()));
        }
        keys
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    /// Keys not present keep their desk defaults; unknown keys are rejected.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let allowed = Self::allowed_keys();
        let allowed: Vec<&str> = allowed.iter().map(String::as_str).collect();
        kv.reject_unknown(&allowed)?;
        let seed = kv.get("seed")?.unwrap_or(0);
        let d = Self::desk(seed);
        let path = |key: &str| kv.get_str(key).filter(|s| !s.is_empty()).map(PathBuf::from);
        let cfg = RunConfig {
            mode: kv
                .get_str("mode")
                .map(str::parse)
                .transpose()?
                .unwrap_or(d.mode),
            seed,
            steps: kv.get("steps")?.unwrap_or(d.steps),
            batch: kv.get("batch")?.unwrap_or(d.batch),
            chunk: kv.get("chunk")?.unwrap_or(d.chunk),
            lr: kv.get("lr")?.unwrap_or(d.lr),
            lr_decay: kv.get("lr_decay")?.unwrap_or(d.lr_decay),
            lr_decay_interval: kv.get("lr_decay_interval")?.unwrap_or(d.lr_decay_interval),
            checkpoint_every: kv.get("checkpoint_every")?.unwrap_or(d.checkpoint_every),
            eval_every: kv.get("eval_every")?.unwrap_or(d.eval_every),
            eval_chunks: kv.get("eval_chunks")?.unwrap_or(d.eval_chunks),
            checkpoint: path("checkpoint"),
            log: path("log"),
            resume: path("resume"),
            teacher_checkpoint: path("teacher_checkpoint"),
            data_dir: path("data_dir"),
            corpus: CorpusSpec {
                n_clips: kv.get("corpus.n_clips")?.unwrap_or(d.corpus.n_clips),
                clip_len: kv.get("corpus.clip_len")?.unwrap_or(d.corpus.clip_len),
                test_clips: kv.get("corpus.test_clips")?.unwrap_or(d.corpus.test_clips),
                seed: kv.get("corpus.seed")?.unwrap_or(seed),
                min_freq: kv.get("corpus.min_freq")?.unwrap_or(d.corpus.min_freq),
                max_freq: kv.get("corpus.max_freq")?.unwrap_or(d.corpus.max_freq),
            },
            mel: MelConfig::from_kv(kv, &d.mel)?,
            model: ModelConfig::from_kv(&kv.section("model."))?,
            teacher: GaussianArConfig::from_kv(kv, &d.teacher)?,
            student: IafConfig::from_kv(kv, &d.student)?,
            distill: DistillLossConfig::from_kv(kv)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("mode", self.mode);
        kv.set("seed", self.seed);
        kv.set("steps", self.steps);
        kv.set("batch", self.batch);
        kv.set("chunk", self.chunk);
        kv.set("lr", self.lr);
        kv.set("lr_decay", self.lr_decay);
        kv.set("lr_decay_interval", self.lr_decay_interval);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("eval_every", self.eval_every);
        kv.set("eval_chunks", self.eval_chunks);
        let paths = [
            ("checkpoint", &self.checkpoint),
            ("log", &self.log),
            ("resume", &self.resume),
            ("teacher_checkpoint", &self.teacher_checkpoint),
            ("data_dir", &self.data_dir),
        ];
        for (key, p) in paths {
            if let Some(p) = p {
                kv.set(key, p.display());
            }
        }
        kv.set("corpus.n_clips", self.corpus.n_clips);
        kv.set("corpus.clip_len", self.corpus.clip_len);
        kv.set("corpus.test_clips", self.corpus.test_clips);
        kv.set("corpus.seed", self.corpus.seed);
        kv.set("corpus.min_freq", self.corpus.min_freq);
        kv.set("corpus.max_freq", self.corpus.max_freq);
        self.mel.write_kv(&mut kv);
        let mut model = KeyValues::new();
        self.model.write_kv(&mut model);
        kv.insert_section("model.", &model);
        self.teacher.write_kv(&mut kv);
        self.student.write_kv(&mut kv);
        self.distill.write_kv(&mut kv);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch", "must be positive"));
        }
        if self.chunk == 0 || self.chunk % self.mel.hop != 0 {
            return Err(Error::config(
                "chunk",
                format!("must be a positive multiple of mel.hop ({})", self.mel.hop),
            ));
        }
        if self.mode == TrainMode::Flow && self.chunk % self.model.time_divisor() != 0 {
            return Err(Error::config(
                "chunk",
                format!(
                    "must be divisible by 2^n_blocks = {}",
                    self.model.time_divisor()
                ),
            ));
        }
        if self.data_dir.is_none() && self.chunk > self.corpus.clip_len {
            return Err(Error::config("chunk", "longer than corpus.clip_len"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::config("lr", "must be non-negative"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay", "must lie in (0, 1]"));
        }
        if self.eval_chunks == 0 {
            return Err(Error::config("eval_chunks", "must be positive"));
        }
        let n_mels = self.mel.n_mels;
        let conds = [
            ("model.cond_channels", self.model.cond_channels),
            ("teacher.cond_channels", self.teacher.cond_channels),
            ("student.cond_channels", self.student.cond_channels),
        ];
        for (field, c) in conds {
            if c != n_mels {
                return Err(Error::config(
                    field,
                    format!("is {c} but mel.n_mels is {n_mels}"),
                ));
            }
        }
        if self.mode == TrainMode::Distill && self.teacher_checkpoint.is_none() {
            return Err(Error::config(
                "teacher_checkpoint",
                "distillation needs a trained teacher checkpoint",
            ));
        }
        if self.data_dir.is_none() {
            self.corpus.validate(&self.mel)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut cfg = RunConfig::desk(7);
        cfg.checkpoint = Some("out/flow.ckpt".into());
        cfg.model.temperature = 0.6;
        let back = RunConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::parse("chunk = 1000").unwrap_err();
        assert!(err.to_string().contains("`chunk`"), "{err}");
        let err = RunConfig::parse("bogus = 1").unwrap_err();
        assert!(err.to_string().contains("`bogus`"), "{err}");
        let err = RunConfig::parse("mode = distill").unwrap_err();
        assert!(err.to_string().contains("teacher_checkpoint"), "{err}");
        let err = RunConfig::parse("mel.n_mels = 10").unwrap_err();
        assert!(err.to_string().contains("cond_channels"), "{err}");
        let err = RunConfig::parse("loss = l1").unwrap_err();
        assert!(err.to_string().contains("`loss`"), "{err}");
    }
}
