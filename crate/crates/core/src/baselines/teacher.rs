//! Gaussian autoregressive WaveNet.
//!
//! The network sees the signal shifted right by one sample, so its
//! `(μ_t, log σ_t)` depend on `x_<t` only. Training is teacher-forced in
//! one parallel pass; sampling is ancestral, one network evaluation per
//! sample.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gaussian_log_prob, shift_right, GaussianParams};
use crate::error::{Error, Result};
use crate::flow::wavenet::{WaveNet, WaveNetConfig};
use crate::graph::{Graph, Param, Parameterized, Var};
use crate::kv::KeyValues;
use crate::model::SequentialPasses;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianArConfig {
    pub cond_channels: usize,
    pub n_layers: usize,
    /// Dilations run `1, 2, 4, …` and restart after this many layers.
    pub dilation_cycle: usize,
    pub residual_channels: usize,
    pub gate_channels: usize,
    pub skip_channels: usize,
    pub kernel_size: usize,
    pub sigma_floor: f64,
}

impl GaussianArConfig {
    /// Two cycles of dilations 1 to 128.
    pub fn desk() -> Self {
        GaussianArConfig {
            cond_channels: 20,
            n_layers: 16,
            dilation_cycle: 8,
            residual_channels: 32,
            gate_channels: 32,
            skip_channels: 32,
            kernel_size: 2,
            sigma_floor: 1e-5,
        }
    }

    pub fn dilations(&self) -> Vec<usize> {
        (0..self.n_layers)
            .map(|i| 1 << (i % self.dilation_cycle.max(1)))
            .collect()
    }

    pub fn wavenet(&self) -> WaveNetConfig {
        WaveNetConfig {
            in_channels: 1,
            out_channels: 2,
            cond_channels: self.cond_channels,
            residual_channels: self.residual_channels,
            gate_channels: self.gate_channels,
            skip_channels: self.skip_channels,
            kernel_size: self.kernel_size,
            dilations: self.dilations(),
            causal: true,
            zero_init_output: true,
        }
    }

    /// Past samples that can influence one prediction.
    pub fn receptive_field(&self) -> usize {
        self.wavenet().receptive_field()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("teacher.n_layers", self.n_layers),
            ("teacher.dilation_cycle", self.dilation_cycle),
            ("teacher.residual_channels", self.residual_channels),
            ("teacher.gate_channels", self.gate_channels),
            ("teacher.skip_channels", self.skip_channels),
            ("teacher.kernel_size", self.kernel_size),
        ];
        if let Some((field, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*field, "must be positive"));
        }
        if self.dilation_cycle > 20 {
            return Err(Error::config("teacher.dilation_cycle", "at most 20"));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::config("teacher.sigma_floor", "must be positive"));
        }
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "teacher.cond_channels",
        "teacher.n_layers",
        "teacher.dilation_cycle",
        "teacher.residual_channels",
        "teacher.gate_channels",
        "teacher.skip_channels",
        "teacher.kernel_size",
        "teacher.sigma_floor",
    ];

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("teacher.cond_channels", self.cond_channels);
        kv.set("teacher.n_layers", self.n_layers);
        kv.set("teacher.dilation_cycle", self.dilation_cycle);
        kv.set("teacher.residual_channels", self.residual_channels);
        kv.set("teacher.gate_channels", self.gate_channels);
        kv.set("teacher.skip_channels", self.skip_channels);
        kv.set("teacher.kernel_size", self.kernel_size);
        kv.set("teacher.sigma_floor", self.sigma_floor);
    }

    /// Missing keys keep the value from `base`.
    pub fn from_kv(kv: &KeyValues, base: &Self) -> Result<Self> {
        let cfg = GaussianArConfig {
            cond_channels: kv
                .get("teacher.cond_channels")?
                .unwrap_or(base.cond_channels),
            n_layers: kv.get("teacher.n_layers")?.unwrap_or(base.n_layers),
            dilation_cycle: kv
                .get("teacher.dilation_cycle")?
                .unwrap_or(base.dilation_cycle),
            residual_channels: kv
                .get("teacher.residual_channels")?
                .unwrap_or(base.residual_channels),
            gate_channels: kv
                .get("teacher.gate_channels")?
                .unwrap_or(base.gate_channels),
            skip_channels: kv
                .get("teacher.skip_channels")?
                .unwrap_or(base.skip_channels),
            kernel_size: kv.get("teacher.kernel_size")?.unwrap_or(base.kernel_size),
            sigma_floor: kv.get("teacher.sigma_floor")?.unwrap_or(base.sigma_floor),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Teacher predictions plus how many `σ_t` were raised to the floor.
pub struct ArPrediction {
    pub params: GaussianParams,
    pub floored: usize,
}

pub struct ArSample {
    /// `(B, 1, T)`.
    pub signal: Tensor,
    /// Sequential network evaluations performed.
    pub evaluations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianAr {
    config: GaussianArConfig,
    pub net: WaveNet,
}

impl GaussianAr {
    pub fn new(config: GaussianArConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = WaveNet::new("teacher", config.wavenet(), &mut rng)?;
        Ok(GaussianAr { config, net })
    }

    pub fn config(&self) -> &GaussianArConfig {
        &self.config
    }

    /// `(μ_t, log σ_t)` for every `t` from `x_<t`, in one parallel pass.
    pub fn predict(&self, g: &Graph, x: &Var, c: &Var, trainable: bool) -> Result<ArPrediction> {
        let (_, ch, _) = x.value().dims3()?;
        if ch != 1 {
            return Err(Error::Shape(format!(
                "teacher expects a mono signal, got {ch} channels"
            )));
        }
        let out = self
            .net
            .forward(g, &shift_right(g, x)?, Some(c), trainable)?;
        let mu = g.slice_channels(&out, 0, 1)?;
        let raw = g.slice_channels(&out, 1, 1)?;
        let floor = self.config.sigma_floor.ln();
        let floored = raw.value().data().iter().filter(|&&v| v < floor).count();
        let log_sigma = g.clamp(&raw, floor, f64::INFINITY);
        Ok(ArPrediction {
            params: GaussianParams { mu, log_sigma },
            floored,
        })
    }

    /// Negative mean log-likelihood per sample, the training objective.
    pub fn loss(&self, g: &Graph, x: &Var, c: &Var, trainable: bool) -> Result<(Var, usize)> {
        let pred = self.predict(g, x, c, trainable)?;
        let lp = gaussian_log_prob(g, x, &pred.params)?;
        Ok((g.scale(&g.mean(&lp), -1.0), pred.floored))
    }

    /// Mean of `log N(x_t; μ_t, σ_t²)` in nats per sample, and the number of
    /// floored `σ_t`.
    pub fn log_likelihood(&self, x: &Tensor, c: &Tensor) -> Result<(f64, usize)> {
        let g = Graph::inference();
        let (loss, floored) =
            self.loss(&g, &g.constant(x.clone()), &g.constant(c.clone()), false)?;
        Ok((-loss.item(), floored))
    }

    /// Ancestral sampling, one network evaluation per time step.
    ///
    /// Each evaluation covers the receptive field ending at the current step,
    /// so the result matches a teacher-forced pass over the generated signal.
    pub fn sample(&self, c: &Tensor, seed: u64) -> Result<ArSample> {
        let (b, cc, t) = c.dims3()?;
        if cc != self.config.cond_channels {
            return Err(Error::Shape(format!(
                "teacher expects {} condition channels, got {cc}",
                self.config.cond_channels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Tensor::randn(&[b, 1, t], &mut rng);
        // One extra sample so the shifted input at the window's first
        // influential position is still real data.
        let window = self.config.receptive_field() + 1;
        let mut x = vec![0.0; b * t];
        let mut evaluations = 0;
        for step in 0..t {
            let start = (step + 1).saturating_sub(window);
            let len = step + 1 - start;
            let xw = Tensor::from_fn(&[b, 1, len], |i| x[(i / len) * t + start + i % len]);
            let cw = c.slice_time(start, len)?;
            let g = Graph::inference();
            let pred = self.predict(&g, &g.constant(xw), &g.constant(cw), false)?;
            evaluations += 1;
            for bi in 0..b {
                let at = bi * len + len - 1;
                let mu = pred.params.mu.value().data()[at];
                let sigma = pred.params.log_sigma.value().data()[at].exp();
                x[bi * t + step] = mu + sigma * noise.data()[bi * t + step];
            }
        }
        Ok(ArSample {
            signal: Tensor::new(&[b, 1, t], x)?,
            evaluations,
        })
    }
}

impl SequentialPasses for GaussianAr {
    fn sequential_passes(&self, t: usize) -> usize {
        t
    }
}

impl Parameterized for GaussianAr {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.net.collect_params(out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.net.collect_params_mut(out);
    }
}
