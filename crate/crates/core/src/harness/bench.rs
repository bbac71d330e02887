//! Throughput of parallel flow sampling against ancestral AR sampling,
//! plus training iterations per second.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::GaussianAr;
use crate::error::{Error, Result};
use crate::graph::{Graph, Parameterized};
use crate::model::{FloWaveNet, SequentialPasses};
use crate::optim::AdamState;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct BenchRequest {
    /// Samples generated per run.
    pub t: usize,
    pub repeats: usize,
    /// AR runs usually take minutes, so they get their own count.
    pub ar_repeats: usize,
    /// Batch and chunk of the timed training steps; 0 steps skips them.
    pub train_steps: usize,
    pub train_batch: usize,
    pub train_chunk: usize,
    pub seed: u64,
}

impl BenchRequest {
    pub fn new(t: usize, repeats: usize) -> Self {
        BenchRequest {
            t,
            repeats,
            ar_repeats: 1,
            train_steps: 3,
            train_batch: 2,
            train_chunk: 4096,
            seed: 0,
        }
    }
}

/// One timed run.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub task: &'static str,
    pub repeat: usize,
    pub seconds: f64,
    /// Samples per second for sampling, iterations per second for training.
    pub rate: f64,
    pub sequential_passes: usize,
}

impl BenchRow {
    pub const HEADER: &'static str = "task,repeat,seconds,rate,sequential_passes";
}

impl fmt::Display for BenchRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{:.6},{:.3},{}",
            self.task, self.repeat, self.seconds, self.rate, self.sequential_passes
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub task: &'static str,
    pub median: f64,
    /// `max - min` over repeats.
    pub spread: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub t: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn summary(&self, task: &str) -> Option<Summary> {
        let mut rates: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.task == task)
            .map(|r| r.rate)
            .collect();
        let first = self.rows.iter().find(|r| r.task == task)?;
        rates.sort_by(f64::total_cmp);
        let n = rates.len();
        let median = if n % 2 == 1 {
            rates[n / 2]
        } else {
            0.5 * (rates[n / 2 - 1] + rates[n / 2])
        };
        Some(Summary {
            task: first.task,
            median,
            spread: rates[n - 1] - rates[0],
            runs: n,
        })
    }

    pub fn passes(&self, task: &str) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.task == task)
            .map(|r| r.sequential_passes)
    }

    /// Median flow throughput over median AR throughput.
    pub fn speedup(&self) -> Option<f64> {
        Some(self.summary(FLOW_SAMPLE)?.median / self.summary(AR_SAMPLE)?.median)
    }
}

pub const FLOW_SAMPLE: &str = "flow_sample";
pub const AR_SAMPLE: &str = "ar_sample";
pub const FLOW_TRAIN: &str = "flow_train";

fn condition(channels: usize, t: usize, seed: u64) -> Tensor {
    Tensor::randn(&[1, channels, t], &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Times every task in `req`. Each row is logged as soon as it is
/// measured, so partial results survive a later failure.
pub fn cmd_benchmark(
    flow: &FloWaveNet,
    teacher: &GaussianAr,
    req: &BenchRequest,
) -> Result<BenchReport> {
    let t = req.t;
    let divisor = flow.config().time_divisor();
    if t == 0 || t % divisor != 0 {
        return Err(Error::config(
            "t",
            format!("must be a positive multiple of {divisor}"),
        ));
    }
    let mut report = BenchReport {
        t,
        rows: Vec::new(),
    };
    let mut push = |row: BenchRow| {
        log::info!("{row}");
        report.rows.push(row);
    };

    let c = condition(flow.config().cond_channels, t, req.seed);
    for repeat in 0..req.repeats {
        let clock = Instant::now();
        let x = flow.sample(&c, flow.config().temperature, req.seed + repeat as u64)?;
        let seconds = clock.elapsed().as_secs_f64();
        push(BenchRow {
            task: FLOW_SAMPLE,
            repeat,
            seconds,
            rate: x.len() as f64 / seconds,
            sequential_passes: flow.sequential_passes(t),
        });
    }

    let c = condition(teacher.config().cond_channels, t, req.seed);
    for repeat in 0..req.ar_repeats {
        let clock = Instant::now();
        let out = teacher.sample(&c, req.seed + repeat as u64)?;
        let seconds = clock.elapsed().as_secs_f64();
        push(BenchRow {
            task: AR_SAMPLE,
            repeat,
            seconds,
            rate: out.signal.len() as f64 / seconds,
            sequential_passes: out.evaluations,
        });
    }

    if req.train_steps > 0 {
        let mut model = flow.clone();
        let mut adam = AdamState::new(1e-4, 1.0, u64::MAX);
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        let shape = [req.train_batch, flow.config().in_channels, req.train_chunk];
        let x = Tensor::randn(&shape, &mut rng).scale(0.3);
        let c = Tensor::randn(
            &[
                req.train_batch,
                flow.config().cond_channels,
                req.train_chunk,
            ],
            &mut rng,
        );
        if !model.is_initialized() {
            model.initialize(&x, &c)?;
        }
        for repeat in 0..req.train_steps {
            let clock = Instant::now();
            let g = Graph::new();
            let loss = model
                .forward(&g, &g.constant(x.clone()), &c, true)?
                .loss(&g);
            let grads = g.backward(&loss)?;
            adam.step(&mut model.params_mut(), &grads)?;
            let seconds = clock.elapsed().as_secs_f64();
            push(BenchRow {
                task: FLOW_TRAIN,
                repeat,
                seconds,
                rate: 1.0 / seconds,
                sequential_passes: 1,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::GaussianArConfig;
    use crate::model::ModelConfig;

    #[test]
    fn reports_passes_median_and_spread() {
        let mut cfg = ModelConfig::desk();
        cfg.residual_channels = 4;
        cfg.gate_channels = 4;
        cfg.skip_channels = 4;
        let mut flow = FloWaveNet::new(cfg, 0).unwrap();
        flow.mark_initialized();
        let mut tcfg = GaussianArConfig::desk();
        tcfg.n_layers = 2;
        tcfg.dilation_cycle = 2;
        let teacher = GaussianAr::new(tcfg, 0).unwrap();
        let mut req = BenchRequest::new(64, 5);
        req.ar_repeats = 2;
        req.train_steps = 1;
        req.train_chunk = 64;
        let report = cmd_benchmark(&flow, &teacher, &req).unwrap();
        assert_eq!(report.passes(FLOW_SAMPLE), Some(16));
        assert_eq!(report.passes(AR_SAMPLE), Some(64));
        let s = report.summary(FLOW_SAMPLE).unwrap();
        assert_eq!(s.runs, 5);
        assert!(s.median > 0.0 && s.spread >= 0.0);
        assert_eq!(report.summary(AR_SAMPLE).unwrap().runs, 2);
        assert!(report.speedup().unwrap() > 0.0);
        assert!(cmd_benchmark(&flow, &teacher, &BenchRequest::new(100, 1)).is_err());
    }
}
