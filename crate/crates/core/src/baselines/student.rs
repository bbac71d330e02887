//! Gaussian inverse autoregressive flow student.
//!
//! Each stack reads the previous stack's output shifted right by one step,
//! predicts `(μ_k, log σ_k)` and applies `z ← z·σ_k + μ_k`. Stacking keeps
//! the output Gaussian given the input noise, with
//! `μ ← μ·σ_k + μ_k` and `log σ ← log σ + log σ_k`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{shift_right, GaussianParams};
use crate::error::{Error, Result};
use crate::flow::coupling::LOG_SCALE_LIMIT;
use crate::flow::wavenet::{WaveNet, WaveNetConfig};
use crate::graph::{Graph, Param, Parameterized, Var};
use crate::kv::KeyValues;
use crate::model::SequentialPasses;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct IafConfig {
    pub cond_channels: usize,
    pub stacks: usize,
    pub layers_per_stack: usize,
    pub residual_channels: usize,
    pub gate_channels: usize,
    pub skip_channels: usize,
    pub kernel_size: usize,
}

impl IafConfig {
    /// Two stacks of four layers.
    pub fn desk() -> Self {
        IafConfig {
            cond_channels: 20,
            stacks: 2,
            layers_per_stack: 4,
            residual_channels: 32,
            gate_channels: 32,
            skip_channels: 32,
            kernel_size: 2,
        }
    }

    fn wavenet(&self) -> WaveNetConfig {
        WaveNetConfig {
            in_channels: 1,
            out_channels: 2,
            cond_channels: self.cond_channels,
            residual_channels: self.residual_channels,
            gate_channels: self.gate_channels,
            skip_channels: self.skip_channels,
            kernel_size: self.kernel_size,
            dilations: (0..self.layers_per_stack).map(|i| 1 << i).collect(),
            causal: true,
            zero_init_output: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("student.stacks", self.stacks),
            ("student.layers_per_stack", self.layers_per_stack),
            ("student.residual_channels", self.residual_channels),
            ("student.gate_channels", self.gate_channels),
            ("student.skip_channels", self.skip_channels),
            ("student.kernel_size", self.kernel_size),
        ];
        if let Some((field, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*field, "must be positive"));
        }
        if self.layers_per_stack > 20 {
            return Err(Error::config("student.layers_per_stack", "at most 20"));
        }
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "student.cond_channels",
        "student.stacks",
        "student.layers_per_stack",
        "student.residual_channels",
        "student.gate_channels",
        "student.skip_channels",
        "student.kernel_size",
    ];

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("student.cond_channels", self.cond_channels);
        kv.set("student.stacks", self.stacks);
        kv.set("student.layers_per_stack", self.layers_per_stack);
        kv.set("student.residual_channels", self.residual_channels);
        kv.set("student.gate_channels", self.gate_channels);
        kv.set("student.skip_channels", self.skip_channels);
        kv.set("student.kernel_size", self.kernel_size);
    }

    /// Missing keys keep the value from `base`.
    pub fn from_kv(kv: &KeyValues, base: &Self) -> Result<Self> {
        let cfg = IafConfig {
            cond_channels: kv
                .get("student.cond_channels")?
                .unwrap_or(base.cond_channels),
            stacks: kv.get("student.stacks")?.unwrap_or(base.stacks),
            layers_per_stack: kv
                .get("student.layers_per_stack")?
                .unwrap_or(base.layers_per_stack),
            residual_channels: kv
                .get("student.residual_channels")?
                .unwrap_or(base.residual_channels),
            gate_channels: kv
                .get("student.gate_channels")?
                .unwrap_or(base.gate_channels),
            skip_channels: kv
                .get("student.skip_channels")?
                .unwrap_or(base.skip_channels),
            kernel_size: kv.get("student.kernel_size")?.unwrap_or(base.kernel_size),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub struct StudentOutput {
    /// Generated signal, `(B, 1, T)`.
    pub x: Var,
    /// Output distribution of each `x_t` given the noise before `t`.
    pub params: GaussianParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianIaf {
    config: IafConfig,
    pub stacks: Vec<WaveNet>,
}

impl GaussianIaf {
    /// Zero-initialized outputs make a fresh student the identity on noise.
    pub fn new(config: IafConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stacks = (0..config.stacks)
            .map(|k| WaveNet::new(&format!("student.stack{k}"), config.wavenet(), &mut rng))
            .collect::<Result<_>>()?;
        Ok(GaussianIaf { config, stacks })
    }

    pub fn config(&self) -> &IafConfig {
        &self.config
    }

    /// Transforms noise `(B, 1, T)` in one parallel pass per stack.
    pub fn forward(
        &self,
        g: &Graph,
        noise: &Var,
        c: &Var,
        trainable: bool,
    ) -> Result<StudentOutput> {
        let (_, ch, _) = noise.value().dims3()?;
        if ch != 1 {
            return Err(Error::Shape(format!(
                "student expects mono noise, got {ch} channels"
            )));
        }
        let mut z = noise.clone();
        let mut acc: Option<GaussianParams> = None;
        for net in &self.stacks {
            let out = net.forward(g, &shift_right(g, &z)?, Some(c), trainable)?;
            let mu = g.slice_channels(&out, 0, 1)?;
            let log_sigma = g.clamp(
                &g.slice_channels(&out, 1, 1)?,
                -LOG_SCALE_LIMIT,
                LOG_SCALE_LIMIT,
            );
            let sigma = g.exp(&log_sigma);
            z = g.add(&g.mul(&z, &sigma)?, &mu)?;
            acc = Some(match acc {
                None => GaussianParams { mu, log_sigma },
                Some(prev) => GaussianParams {
                    mu: g.add(&g.mul(&prev.mu, &sigma)?, &mu)?,
                    log_sigma: g.add(&prev.log_sigma, &log_sigma)?,
                },
            });
        }
        let params = acc.expect("at least one stack");
        if !z.value().all_finite() {
            return Err(Error::NonFinite("student output".into()));
        }
        Ok(StudentOutput { x: z, params })
    }

    /// Draws unit noise from `seed` and transforms it.
    pub fn sample(&self, c: &Tensor, seed: u64) -> Result<Tensor> {
        let (b, _, t) = c.dims3()?;
        let noise = Tensor::randn(&[b, 1, t], &mut ChaCha8Rng::seed_from_u64(seed));
        let g = Graph::inference();
        Ok(self
            .forward(&g, &g.constant(noise), &g.constant(c.clone()), false)?
            .x
            .value()
            .clone())
    }
}

impl SequentialPasses for GaussianIaf {
    fn sequential_passes(&self, _t: usize) -> usize {
        self.stacks.len()
    }
}

impl Parameterized for GaussianIaf {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        for s in &self.stacks {
            s.collect_params(out);
        }
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for s in &mut self.stacks {
            s.collect_params_mut(out);
        }
    }
}
