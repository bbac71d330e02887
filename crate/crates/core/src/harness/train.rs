//! Training runs for the flow, the autoregressive teacher and the
//! distilled student, with checkpointing and bit-compatible resume.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{RunConfig, TrainMode};
use super::metrics::{MetricLog, MetricRow};
use crate::audio::corpus::{fixed_chunks, load_wav_dir, random_chunks, synth_corpus, Clip};
use crate::baselines::distill::distill_loss;
use crate::baselines::{GaussianAr, GaussianIaf};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Param, Parameterized, Var};
use crate::kv::KeyValues;
use crate::model::FloWaveNet;
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub struct Dataset {
    pub train: Vec<Clip>,
    pub test: Vec<Clip>,
}

/// The synthetic corpus, or the WAV directory when one is configured. For
/// a directory the last `corpus.test_clips` manifest entries are held out.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        None => {
            let corpus = synth_corpus(&cfg.corpus, &cfg.mel)?;
            Ok(Dataset {
                train: corpus.train,
                test: corpus.test,
            })
        }
        Some(dir) => {
            let mut train = load_wav_dir(dir, &cfg.mel)?;
            let held = cfg.corpus.test_clips;
            if held == 0 || held >= train.len() {
                return Err(Error::config(
                    "corpus.test_clips",
                    format!("{} clips cannot be split with {held} held out", train.len()),
                ));
            }
            let test = train.split_off(train.len() - held);
            Ok(Dataset { train, test })
        }
    }
}

/// Independent, reproducible randomness for every step of a run.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Seed used for the evaluation noise of held-out chunk `i`.
fn eval_seed(seed: u64, i: usize) -> u64 {
    step_rng(seed, u64::MAX - i as u64).gen()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// The held-out value of the training objective.
    pub loss: f64,
    pub nats_per_dim: Option<f64>,
    pub extra: BTreeMap<String, f64>,
}

impl Evaluation {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.extra.get(key).copied()
    }
}

/// A model being trained, together with anything it needs read-only.
#[derive(Clone, Debug)]
pub enum Learner {
    Flow(FloWaveNet),
    Ar(GaussianAr),
    Distill {
        student: GaussianIaf,
        teacher: GaussianAr,
    },
}

impl Learner {
    pub fn kind(&self) -> &'static str {
        match self {
            Learner::Flow(_) => "flow",
            Learner::Ar(_) => "ar",
            Learner::Distill { .. } => "iaf",
        }
    }

    fn expected_kind(mode: TrainMode) -> &'static str {
        match mode {
            TrainMode::Flow => "flow",
            TrainMode::Ar => "ar",
            TrainMode::Distill => "iaf",
        }
    }

    /// Freshly initialized weights for `cfg.mode`, seeded by `cfg.seed`.
    pub fn fresh(cfg: &RunConfig) -> Result<Self> {
        Ok(match cfg.mode {
            TrainMode::Flow => Learner::Flow(FloWaveNet::new(cfg.model.clone(), cfg.seed)?),
            TrainMode::Ar => Learner::Ar(GaussianAr::new(cfg.teacher.clone(), cfg.seed)?),
            TrainMode::Distill => {
                let path = cfg
                    .teacher_checkpoint
                    .as_ref()
                    .ok_or_else(|| Error::config("teacher_checkpoint", "missing"))?;
                let (teacher, _) = load_teacher(path)?;
                if teacher.config().cond_channels != cfg.student.cond_channels {
                    return Err(Error::config(
                        "teacher_checkpoint",
                        "teacher condition channels differ from the student's",
                    ));
                }
                Learner::Distill {
                    student: GaussianIaf::new(cfg.student.clone(), cfg.seed)?,
                    teacher,
                }
            }
        })
    }

    /// The parameters updated by the optimizer.
    pub fn trainable_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Learner::Flow(m) => m.params_mut(),
            Learner::Ar(m) => m.params_mut(),
            Learner::Distill { student, .. } => student.params_mut(),
        }
    }

    fn trainable(&self) -> Vec<&Param> {
        match self {
            Learner::Flow(m) => m.params(),
            Learner::Ar(m) => m.params(),
            Learner::Distill { student, .. } => student.params(),
        }
    }

    /// Training loss on one batch, its nats per dimension where meaningful,
    /// and extra diagnostics.
    fn batch_loss(
        &self,
        g: &Graph,
        x: &Tensor,
        c: &Tensor,
        noise_seed: u64,
        cfg: &RunConfig,
        trainable: bool,
    ) -> Result<(Var, Option<f64>, BTreeMap<String, f64>)> {
        let mut extra = BTreeMap::new();
        match self {
            Learner::Flow(m) => {
                let out = m.forward(g, &g.constant(x.clone()), c, trainable)?;
                let loss = out.loss(g);
                Ok((loss, Some(out.nats_per_dim()), extra))
            }
            Learner::Ar(m) => {
                let (loss, floored) =
                    m.loss(g, &g.constant(x.clone()), &g.constant(c.clone()), trainable)?;
                extra.insert("sigma_floored".into(), floored as f64);
                let nats = -loss.item();
                Ok((loss, Some(nats), extra))
            }
            Learner::Distill { student, teacher } => {
                let (loss, stats) = distill_loss(
                    g,
                    student,
                    teacher,
                    x,
                    c,
                    &cfg.distill,
                    noise_seed,
                    trainable,
                )?;
                extra.insert("kl".into(), stats.kl);
                extra.insert("frame".into(), stats.frame);
                Ok((loss, None, extra))
            }
        }
    }

    /// Held-out evaluation over fixed chunks, one chunk at a time.
    pub fn evaluate(&self, chunks: &[(Tensor, Tensor)], cfg: &RunConfig) -> Result<Evaluation> {
        let n = chunks.len() as f64;
        let mut loss = 0.0;
        let mut nats = 0.0;
        let mut extra: BTreeMap<String, f64> = BTreeMap::new();
        for (i, (x, c)) in chunks.iter().enumerate() {
            let g = Graph::inference();
            let (l, nd, ex) = self.batch_loss(&g, x, c, eval_seed(cfg.seed, i), cfg, false)?;
            loss += l.item() / n;
            nats += nd.unwrap_or(0.0) / n;
            for (k, v) in ex {
                *extra.entry(k).or_default() += v / n;
            }
        }
        let has_nats = !matches!(self, Learner::Distill { .. });
        let mut out = BTreeMap::new();
        match self {
            Learner::Distill { .. } => {
                out.insert("test_kl".into(), extra["kl"]);
                out.insert("test_frame".into(), extra["frame"]);
            }
            _ => {
                out.insert("heldout_nats_per_dim".into(), nats);
            }
        }
        Ok(Evaluation {
            loss,
            nats_per_dim: has_nats.then_some(nats),
            extra: out,
        })
    }

    fn after_step(&mut self) {
        if let Learner::Flow(m) = self {
            m.enforce_scale_floors();
        }
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig, adam: &AdamState, step: u64) -> Checkpoint {
        let mut header = KeyValues::new();
        header.set("kind", self.kind());
        header.set("step", step);
        if let Learner::Flow(m) = self {
            header.set("flow_initialized", m.is_initialized());
        }
        header.insert_section("run.", &cfg.to_kv());
        let mut ck = Checkpoint::new(header);
        match self {
            Learner::Flow(m) => ck.put_params(m),
            Learner::Ar(m) => ck.put_params(m),
            Learner::Distill { student, .. } => ck.put_params(student),
        }
        ck.put_optimizer(adam);
        ck
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        match self {
            Learner::Flow(m) => {
                ck.restore_params(m)?;
                if ck.header.get::<bool>("flow_initialized")?.unwrap_or(false) {
                    m.mark_initialized();
                }
            }
            Learner::Ar(m) => ck.restore_params(m)?,
            Learner::Distill { student, .. } => ck.restore_params(student)?,
        }
        Ok(())
    }
}

fn check_kind(ck: &Checkpoint, expected: &str, path: &Path) -> Result<()> {
    let kind = ck.header.get_str("kind").unwrap_or("");
    if kind != expected {
        return Err(Error::Checkpoint(format!(
            "{} holds a `{kind}` model, expected `{expected}`",
            path.display()
        )));
    }
    Ok(())
}

/// The run configuration stored in a checkpoint.
pub fn stored_config(ck: &Checkpoint) -> Result<RunConfig> {
    RunConfig::from_kv(&ck.header.section("run."))
}

pub fn load_flow(path: impl AsRef<Path>) -> Result<(FloWaveNet, RunConfig)> {
    let path = path.as_ref();
    let ck = Checkpoint::load(path)?;
    check_kind(&ck, "flow", path)?;
    let cfg = stored_config(&ck)?;
    let mut learner = Learner::Flow(FloWaveNet::new(cfg.model.clone(), cfg.seed)?);
    learner.restore(&ck)?;
    match learner {
        Learner::Flow(m) => Ok((m, cfg)),
        _ => unreachable!(),
    }
}

pub fn load_teacher(path: impl AsRef<Path>) -> Result<(GaussianAr, RunConfig)> {
    let path = path.as_ref();
    let ck = Checkpoint::load(path)?;
    check_kind(&ck, "ar", path)?;
    let cfg = stored_config(&ck)?;
    let mut teacher = GaussianAr::new(cfg.teacher.clone(), cfg.seed)?;
    ck.restore_params(&mut teacher)?;
    Ok((teacher, cfg))
}

pub fn load_student(path: impl AsRef<Path>) -> Result<(GaussianIaf, RunConfig)> {
    let path = path.as_ref();
    let ck = Checkpoint::load(path)?;
    check_kind(&ck, "iaf", path)?;
    let cfg = stored_config(&ck)?;
    let mut student = GaussianIaf::new(cfg.student.clone(), cfg.seed)?;
    ck.restore_params(&mut student)?;
    Ok((student, cfg))
}

pub struct TrainOutcome {
    pub learner: Learner,
    pub optimizer: AdamState,
    pub steps: u64,
    /// Evaluation at step 0, or at the resume point.
    pub initial: Evaluation,
    pub last: Evaluation,
    pub rows: Vec<MetricRow>,
    pub checkpoint: Option<PathBuf>,
}

fn save(
    path: &Path,
    learner: &Learner,
    cfg: &RunConfig,
    adam: &AdamState,
    step: u64,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    learner.to_checkpoint(cfg, adam, step).save(path)?;
    log::info!("step {step}: checkpoint written to {}", path.display());
    Ok(())
}

/// Runs (or resumes) the configured training and returns the final state.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let mut learner = Learner::fresh(cfg)?;
    let mut adam = AdamState::new(cfg.lr, cfg.lr_decay, cfg.lr_decay_interval);
    let mut start = 0;
    if let Some(path) = &cfg.resume {
        let ck = Checkpoint::load(path)?;
        check_kind(&ck, Learner::expected_kind(cfg.mode), path)?;
        learner.restore(&ck)?;
        adam = ck.optimizer()?;
        start = ck.header.require("step")?;
        if start > cfg.steps {
            return Err(Error::config(
                "steps",
                format!(
                    "checkpoint is already at step {start}, beyond {}",
                    cfg.steps
                ),
            ));
        }
        log::info!("resuming {} from step {start}", learner.kind());
    }
    train_learner(cfg, learner, adam, start, &data)
}

/// The training loop proper, from `start` to `cfg.steps`.
pub fn train_learner(
    cfg: &RunConfig,
    mut learner: Learner,
    mut adam: AdamState,
    start: u64,
    data: &Dataset,
) -> Result<TrainOutcome> {
    let clock = Instant::now();
    let eval_chunks = fixed_chunks(&data.test, cfg.chunk, cfg.eval_chunks)?;
    let mut log = match (&cfg.log, start) {
        (None, _) => MetricLog::in_memory(),
        (Some(p), 0) => MetricLog::create(p)?,
        (Some(p), s) => MetricLog::resume(p, s)?,
    };
    log::info!(
        "training {} for steps {start}..{} (batch {}, chunk {}, lr {}, no gradient clipping)",
        learner.kind(),
        cfg.steps,
        cfg.batch,
        cfg.chunk,
        cfg.lr
    );

    if let Learner::Flow(m) = &mut learner {
        if !m.is_initialized() {
            let (x, c) = random_chunks(
                &data.train,
                cfg.chunk,
                cfg.batch,
                &mut step_rng(cfg.seed, 0),
            )?;
            m.initialize(&x, &c)?;
        }
    }
    let initial = learner.evaluate(&eval_chunks, cfg)?;
    if start == 0 {
        log.push(MetricRow {
            step: 0,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            loss: initial.loss,
            nats_per_dim: initial.nats_per_dim,
            lr: adam.effective_lr(),
            extra: initial.extra.clone(),
        })?;
    }
    let mut last = initial.clone();
    for step in start..cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let (x, c) = random_chunks(&data.train, cfg.chunk, cfg.batch, &mut rng)?;
        let noise_seed: u64 = rng.gen();
        let g = Graph::new();
        let (loss, nats, mut extra) = learner.batch_loss(&g, &x, &c, noise_seed, cfg, true)?;
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {}",
                step + 1
            )));
        }
        let grads = g.backward(&loss)?;
        let lr = adam.step(&mut learner.trainable_mut(), &grads)?;
        learner.after_step();
        let done = step + 1;
        let eval_now = done == cfg.steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        if eval_now {
            last = learner.evaluate(&eval_chunks, cfg)?;
            extra.extend(last.extra.clone());
            log::info!(
                "step {done}: loss {loss_value:.5}, held-out {:?}",
                last.extra
            );
        }
        log.push(MetricRow {
            step: done,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            loss: loss_value,
            nats_per_dim: nats,
            lr,
            extra,
        })?;
        if let Some(path) = &cfg.checkpoint {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.steps {
                save(path, &learner, cfg, &adam, done)?;
            }
        }
    }
    if let Some(path) = &cfg.checkpoint {
        save(path, &learner, cfg, &adam, cfg.steps)?;
    }
    Ok(TrainOutcome {
        learner,
        optimizer: adam,
        steps: cfg.steps,
        initial,
        last,
        rows: log.rows().to_vec(),
        checkpoint: cfg.checkpoint.clone(),
    })
}

impl Learner {
    /// Names and values of the trained parameters, for comparisons.
    pub fn parameter_snapshot(&self) -> Vec<(String, Tensor)> {
        self.trainable()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(cfg: &RunConfig) -> TrainOutcome {
        cmd_train(cfg).unwrap()
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut full = RunConfig::smoke(3);
        full.log = Some(dir.path().join("full.csv"));
        let whole = run(&full);

        let mut first = full.clone();
        first.steps = 2;
        first.checkpoint = Some(dir.path().join("half.ckpt"));
        first.log = Some(dir.path().join("split.csv"));
        run(&first);
        let mut second = full.clone();
        second.resume = first.checkpoint.clone();
        second.log = first.log.clone();
        let resumed = run(&second);

        assert_eq!(
            resumed.learner.parameter_snapshot(),
            whole.learner.parameter_snapshot()
        );
        assert_eq!(resumed.optimizer, whole.optimizer);
        assert_eq!(resumed.last, whole.last);
        let a = MetricLog::read(full.log.as_ref().unwrap()).unwrap();
        let b = MetricLog::read(second.log.as_ref().unwrap()).unwrap();
        let strip = |rows: Vec<MetricRow>| {
            rows.into_iter()
                .map(|mut r| {
                    r.wall_ms = 0.0;
                    r
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(a), strip(b));
    }

    #[test]
    fn each_mode_trains_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let mut ar = RunConfig::smoke(1);
        ar.mode = TrainMode::Ar;
        ar.checkpoint = Some(dir.path().join("teacher.ckpt"));
        let out = run(&ar);
        assert_eq!(out.rows.len(), 5);
        assert!(out.rows.iter().all(|r| r.nats_per_dim.is_some()));
        let (teacher, stored) = load_teacher(dir.path().join("teacher.ckpt")).unwrap();
        assert_eq!(stored, ar);
        assert!(matches!(&out.learner, Learner::Ar(t) if *t == teacher));
        assert!(load_flow(dir.path().join("teacher.ckpt")).is_err());

        let mut distill = RunConfig::smoke(1);
        distill.mode = TrainMode::Distill;
        distill.teacher_checkpoint = ar.checkpoint.clone();
        distill.checkpoint = Some(dir.path().join("student.ckpt"));
        let out = run(&distill);
        assert!(out.rows.iter().all(|r| r.nats_per_dim.is_none()));
        assert!(out.last.get("test_kl").unwrap().is_finite());
        load_student(dir.path().join("student.ckpt")).unwrap();

        let mut flow = RunConfig::smoke(1);
        flow.checkpoint = Some(dir.path().join("flow.ckpt"));
        run(&flow);
        let (model, _) = load_flow(dir.path().join("flow.ckpt")).unwrap();
        assert!(model.is_initialized());
    }

    #[test]
    fn wrong_kind_cannot_be_resumed() {
        let dir = tempfile::tempdir().unwrap();
        let mut flow = RunConfig::smoke(2);
        flow.steps = 1;
        flow.checkpoint = Some(dir.path().join("f.ckpt"));
        run(&flow);
        let mut ar = RunConfig::smoke(2);
        ar.mode = TrainMode::Ar;
        ar.resume = flow.checkpoint.clone();
        let err = cmd_train(&ar).err().unwrap();
        assert!(err.to_string().contains("`flow`"), "{err}");
    }
}
