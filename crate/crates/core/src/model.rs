//! The full flow: context blocks of (squeeze, M flow steps), one optional
//! factor-out point, and a unit-Gaussian prior on what is left.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::factor::half_log_two_pi;
use crate::flow::{permute, CouplingNetShape, FactorOutGaussian, FactorOutput, FlowStep};
use crate::graph::{Graph, Param, Parameterized, Var};
use crate::kv::KeyValues;
use crate::tensor::Tensor;

/// Number of strictly sequential network passes needed to generate `t` samples.
pub trait SequentialPasses {
    fn sequential_passes(&self, t: usize) -> usize;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub cond_channels: usize,
    pub n_blocks: usize,
    pub n_flows: usize,
    pub n_layers: usize,
    pub residual_channels: usize,
    pub gate_channels: usize,
    pub skip_channels: usize,
    pub kernel_size: usize,
    /// Factor out half the channels after this many blocks; 0 disables.
    pub factor_after: usize,
    pub causal: bool,
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Laptop-scale configuration.
    pub fn desk() -> Self {
        ModelConfig {
            in_channels: 1,
            cond_channels: 20,
            n_blocks: 4,
            n_flows: 4,
            n_layers: 2,
            residual_channels: 32,
            gate_channels: 32,
            skip_channels: 32,
            kernel_size: 3,
            factor_after: 2,
            causal: false,
            temperature: 0.8,
        }
    }

    /// The published full-scale configuration (8 blocks × 6 flows, 256 channels).
    pub fn paper() -> Self {
        ModelConfig {
            in_channels: 1,
            cond_channels: 80,
            n_blocks: 8,
            n_flows: 6,
            n_layers: 2,
            residual_channels: 256,
            gate_channels: 256,
            skip_channels: 256,
            kernel_size: 3,
            factor_after: 4,
            causal: false,
            temperature: 0.8,
        }
    }

    pub fn total_flows(&self) -> usize {
        self.n_blocks * self.n_flows
    }

    /// Input lengths must be multiples of this.
    pub fn time_divisor(&self) -> usize {
        1 << self.n_blocks
    }

    pub(crate) fn net_shape(&self) -> CouplingNetShape {
        CouplingNetShape {
            residual_channels: self.residual_channels,
            gate_channels: self.gate_channels,
            skip_channels: self.skip_channels,
            kernel_size: self.kernel_size,
            n_layers: self.n_layers,
            causal: self.causal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("n_blocks", self.n_blocks),
            ("n_flows", self.n_flows),
            ("n_layers", self.n_layers),
            ("residual_channels", self.residual_channels),
            ("gate_channels", self.gate_channels),
            ("skip_channels", self.skip_channels),
            ("kernel_size", self.kernel_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.causal && self.kernel_size % 2 == 0 {
            return Err(Error::config(
                "kernel_size",
                "non-causal coupling needs an odd kernel",
            ));
        }
        if self.factor_after >= self.n_blocks {
            return Err(Error::config(
                "factor_after",
                format!(
                    "must be below n_blocks ({}), or 0 to disable",
                    self.n_blocks
                ),
            ));
        }
        if self.n_blocks > 20 {
            return Err(Error::config("n_blocks", "at most 20"));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::config("temperature", "must be non-negative"));
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 12] = [
        "in_channels",
        "cond_channels",
        "n_blocks",
        "n_flows",
        "n_layers",
        "residual_channels",
        "gate_channels",
        "skip_channels",
        "kernel_size",
        "factor_after",
        "causal",
        "temperature",
    ];

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("in_channels", self.in_channels);
        kv.set("cond_channels", self.cond_channels);
        kv.set("n_blocks", self.n_blocks);
        kv.set("n_flows", self.n_flows);
        kv.set("n_layers", self.n_layers);
        kv.set("residual_channels", self.residual_channels);
        kv.set("gate_channels", self.gate_channels);
        kv.set("skip_channels", self.skip_channels);
        kv.set("kernel_size", self.kernel_size);
        kv.set("factor_after", self.factor_after);
        kv.set("causal", self.causal);
        kv.set("temperature", self.temperature);
    }

    /// Reads any keys present over the desk defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::desk();
        let cfg = ModelConfig {
            in_channels: kv.get("in_channels")?.unwrap_or(d.in_channels),
            cond_channels: kv.get("cond_channels")?.unwrap_or(d.cond_channels),
            n_blocks: kv.get("n_blocks")?.unwrap_or(d.n_blocks),
            n_flows: kv.get("n_flows")?.unwrap_or(d.n_flows),
            n_layers: kv.get("n_layers")?.unwrap_or(d.n_layers),
            residual_channels: kv.get("residual_channels")?.unwrap_or(d.residual_channels),
            gate_channels: kv.get("gate_channels")?.unwrap_or(d.gate_channels),
            skip_channels: kv.get("skip_channels")?.unwrap_or(d.skip_channels),
            kernel_size: kv.get("kernel_size")?.unwrap_or(d.kernel_size),
            factor_after: kv.get("factor_after")?.unwrap_or(d.factor_after),
            causal: kv.get("causal")?.unwrap_or(d.causal),
            temperature: kv.get("temperature")?.unwrap_or(d.temperature),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Latent variables of one forward pass or one sampling draw.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    /// Final latent, `(B, C_N, T / 2^N)`.
    pub z: Tensor,
    /// Whitened noise of the factored-out half, when factor-out is enabled.
    pub factored_noise: Option<Tensor>,
}

impl Latents {
    pub fn norm(&self) -> f64 {
        let extra = self.factored_noise.as_ref().map_or(0.0, Tensor::sum_sq);
        (self.z.sum_sq() + extra).sqrt()
    }

    /// Unit-Gaussian log-density summed over every latent element.
    pub fn unit_gaussian_log_density(&self) -> f64 {
        let tensors = std::iter::once(&self.z).chain(self.factored_noise.as_ref());
        tensors
            .map(|t| -0.5 * t.sum_sq() - half_log_two_pi() * t.len() as f64)
            .sum()
    }

    pub fn max_abs_diff(&self, other: &Latents) -> f64 {
        let base = self.z.max_abs_diff(&other.z);
        match (&self.factored_noise, &other.factored_noise) {
            (Some(a), Some(b)) => base.max(a.max_abs_diff(b)),
            _ => base,
        }
    }
}

pub struct FlowOutput {
    pub z: Var,
    pub factored: Option<FactorOutput>,
    /// Unit-Gaussian log-density of `z`, per batch element.
    pub prior_log_prob: Var,
    /// One log-det per flow step in evaluation order, each per batch element.
    pub flow_logdets: Vec<Var>,
    /// Sum of `flow_logdets`, accumulated in order.
    pub total_logdet: Var,
    /// Total log-likelihood over the batch, in nats.
    pub log_likelihood: Var,
    pub dims: usize,
}

impl FlowOutput {
    pub fn nats_per_dim(&self) -> f64 {
        self.log_likelihood.item() / self.dims as f64
    }

    /// Negative log-likelihood per dimension, the training objective.
    pub fn loss(&self, g: &Graph) -> Var {
        g.scale(&self.log_likelihood, -1.0 / self.dims as f64)
    }

    pub fn latents(&self) -> Latents {
        Latents {
            z: self.z.value().clone(),
            factored_noise: self.factored.as_ref().map(|f| f.whitened.value().clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FloWaveNet {
    config: ModelConfig,
    blocks: Vec<Vec<FlowStep>>,
    factor: Option<FactorOutGaussian>,
}

impl FloWaveNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = config.net_shape();
        let mut channels = config.in_channels;
        let mut cond = config.cond_channels;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        let mut factor = None;
        for b in 0..config.n_blocks {
            channels *= 2;
            cond *= 2;
            let flows = (0..config.n_flows)
                .map(|f| {
                    FlowStep::new(
                        &format!("block{b}.flow{f}"),
                        channels,
                        cond,
                        &shape,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.push(flows);
            if b + 1 == config.factor_after {
                factor = Some(FactorOutGaussian::new(
                    "factor", channels, cond, &shape, &mut rng,
                )?);
                channels /= 2;
            }
        }
        Ok(FloWaveNet {
            config,
            blocks,
            factor,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn flow_steps(&self) -> impl Iterator<Item = &FlowStep> {
        self.blocks.iter().flatten()
    }

    pub fn flow_steps_mut(&mut self) -> impl Iterator<Item = &mut FlowStep> {
        self.blocks.iter_mut().flatten()
    }

    pub fn factor(&self) -> Option<&FactorOutGaussian> {
        self.factor.as_ref()
    }

    pub fn factor_mut(&mut self) -> Option<&mut FactorOutGaussian> {
        self.factor.as_mut()
    }

    pub fn is_initialized(&self) -> bool {
        self.flow_steps().all(|f| f.actnorm.is_initialized())
    }

    /// Treats the current ActNorm parameters as final (identity when fresh).
    pub fn mark_initialized(&mut self) {
        for f in self.flow_steps_mut() {
            f.actnorm.mark_initialized();
        }
    }

    pub fn enforce_scale_floors(&mut self) {
        for f in self.flow_steps_mut() {
            f.actnorm.enforce_scale_floor();
        }
    }

    fn check_input(&self, x: &Tensor, c: &Tensor) -> Result<()> {
        let (b, ch, t) = x.dims3()?;
        if ch != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {ch}",
                self.config.in_channels
            )));
        }
        self.check_condition(c, b, t)
    }

    fn check_condition(&self, c: &Tensor, b: usize, t: usize) -> Result<()> {
        let (cb, cc, ct) = c.dims3()?;
        if cb != b || cc != self.config.cond_channels || ct != t {
            return Err(Error::Shape(format!(
                "condition {:?} does not match batch {b}, {} channels, length {t}",
                c.shape(),
                self.config.cond_channels
            )));
        }
        let div = self.config.time_divisor();
        if t % div != 0 {
            return Err(Error::Shape(format!(
                "time length {t} is not divisible by 2^{} = {div}",
                self.config.n_blocks
            )));
        }
        Ok(())
    }

    /// Condition after each block's squeeze.
    fn squeezed_conditions(&self, g: &Graph, c: &Tensor) -> Result<Vec<Option<Var>>> {
        let mut out = Vec::with_capacity(self.config.n_blocks);
        let mut cur = c.clone();
        for _ in 0..self.config.n_blocks {
            cur = permute::squeeze_tensor(&cur)?;
            out.push((self.config.cond_channels > 0).then(|| g.constant(cur.clone())));
        }
        Ok(out)
    }

    /// Data-dependent ActNorm initialisation from one batch, layer by layer.
    pub fn initialize(&mut self, x: &Tensor, c: &Tensor) -> Result<()> {
        self.check_input(x, c)?;
        let g = Graph::inference();
        let conds = self.squeezed_conditions(&g, c)?;
        let factor_after = self.config.factor_after;
        let mut h = g.constant(x.clone());
        for (bi, flows) in self.blocks.iter_mut().enumerate() {
            h = permute::squeeze(&g, &h)?;
            for flow in flows.iter_mut() {
                if !flow.actnorm.is_initialized() {
                    flow.actnorm.data_init(h.value())?;
                }
                h = flow.forward(&g, &h, conds[bi].as_ref(), false)?.0;
            }
            if bi + 1 == factor_after {
                let half = h.shape()[1] / 2;
                h = g.slice_channels(&h, 0, half)?;
            }
        }
        Ok(())
    }

    /// Maps `x` to latents and accumulates the exact log-likelihood.
    pub fn forward(&self, g: &Graph, x: &Var, c: &Tensor, trainable: bool) -> Result<FlowOutput> {
        self.check_input(x.value(), c)?;
        let (batch, _, _) = x.value().dims3()?;
        let conds = self.squeezed_conditions(g, c)?;
        let mut h = x.clone();
        let mut flow_logdets = Vec::with_capacity(self.config.total_flows());
        let mut factored = None;
        let mut flow_index = 0;
        for (bi, flows) in self.blocks.iter().enumerate() {
            h = permute::squeeze(g, &h)?;
            for flow in flows {
                let (y, ld) = flow.forward(g, &h, conds[bi].as_ref(), trainable)?;
                if !y.value().all_finite() || !ld.value().all_finite() {
                    return Err(Error::NonFinite(format!(
                        "flow {flow_index} (block {bi}) produced a non-finite value"
                    )));
                }
                h = y;
                flow_logdets.push(ld);
                flow_index += 1;
            }
            if bi + 1 == self.config.factor_after {
                let factor = self.factor.as_ref().expect("factor layer exists");
                let out = factor.forward(g, &h, conds[bi].as_ref(), trainable)?;
                if !out.log_prob.value().all_finite() {
                    return Err(Error::NonFinite(format!("factor-out after block {bi}")));
                }
                h = out.retained.clone();
                factored = Some(out);
            }
        }
        let density = g.scale(&g.square(&h), 0.5);
        let z_elems = h.value().len() / batch;
        let prior_log_prob = g.add_scalar(
            &g.scale(&g.sum_batch(&density), -1.0),
            -half_log_two_pi() * z_elems as f64,
        );
        let mut total_logdet = flow_logdets[0].clone();
        for ld in &flow_logdets[1..] {
            total_logdet = g.add(&total_logdet, ld)?;
        }
        let mut per_sample = g.add(&prior_log_prob, &total_logdet)?;
        if let Some(f) = factored.as_ref() {
            per_sample = g.add(&per_sample, &f.log_prob)?;
        }
        let log_likelihood = g.sum(&per_sample);
        if !log_likelihood.value().all_finite() {
            return Err(Error::NonFinite("log-likelihood".into()));
        }
        Ok(FlowOutput {
            z: h,
            factored,
            prior_log_prob,
            flow_logdets,
            total_logdet,
            log_likelihood,
            dims: x.value().len(),
        })
    }

    /// Nats per dimension and latents, without recording gradients.
    pub fn log_likelihood(&self, x: &Tensor, c: &Tensor) -> Result<(f64, Latents)> {
        let g = Graph::inference();
        let out = self.forward(&g, &g.constant(x.clone()), c, false)?;
        Ok((out.nats_per_dim(), out.latents()))
    }

    /// Shapes `(z, factored noise)` for a signal of `batch × t`.
    pub fn latent_shapes(&self, batch: usize, t: usize) -> (Vec<usize>, Option<Vec<usize>>) {
        let mut channels = self.config.in_channels;
        let mut len = t;
        let mut factored = None;
        for b in 0..self.config.n_blocks {
            channels *= 2;
            len /= 2;
            if b + 1 == self.config.factor_after {
                factored = Some(vec![batch, channels / 2, len]);
                channels /= 2;
            }
        }
        (vec![batch, channels, len], factored)
    }

    /// Draws `ẑ = temperature · ε`, ε ~ N(0, I), for every latent.
    pub fn draw_latents(
        &self,
        batch: usize,
        t: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Latents> {
        if !(temperature >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be non-negative, got {temperature}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (zs, fs) = self.latent_shapes(batch, t);
        let z = Tensor::randn(&zs, &mut rng).scale(temperature);
        let factored_noise = fs.map(|s| Tensor::randn(&s, &mut rng).scale(temperature));
        Ok(Latents { z, factored_noise })
    }

    /// Inverse pass: latents back to a signal in one parallel sweep.
    pub fn inverse(&self, g: &Graph, latents: &Latents, c: &Tensor) -> Result<Var> {
        let (zb, _, zt) = latents.z.dims3()?;
        let t = zt << self.config.n_blocks;
        self.check_condition(c, zb, t)?;
        let (zs, fs) = self.latent_shapes(zb, t);
        if latents.z.shape() != zs.as_slice() {
            return Err(Error::Shape(format!(
                "latent z has shape {:?}, expected {zs:?}",
                latents.z.shape()
            )));
        }
        let conds = self.squeezed_conditions(g, c)?;
        let mut h = g.constant(latents.z.clone());
        for (bi, flows) in self.blocks.iter().enumerate().rev() {
            if bi + 1 == self.config.factor_after {
                let noise = match (&latents.factored_noise, &fs) {
                    (Some(n), Some(s)) if n.shape() == s.as_slice() => n,
                    _ => {
                        return Err(Error::Shape(format!(
                            "factored latent missing or mis-shaped, expected {fs:?}"
                        )))
                    }
                };
                let factor = self.factor.as_ref().expect("factor layer exists");
                h = factor.inverse(g, &h, &g.constant(noise.clone()), conds[bi].as_ref())?;
            }
            for flow in flows.iter().rev() {
                h = flow.inverse(g, &h, conds[bi].as_ref())?;
            }
            h = permute::unsqueeze(g, &h)?;
        }
        if !h.value().all_finite() {
            return Err(Error::NonFinite("inverse pass output".into()));
        }
        Ok(h)
    }

    /// Temperature-controlled parallel sampling given an upsampled condition.
    pub fn sample(&self, c: &Tensor, temperature: f64, seed: u64) -> Result<Tensor> {
        Ok(self.sample_with_latents(c, temperature, seed)?.0)
    }

    pub fn sample_with_latents(
        &self,
        c: &Tensor,
        temperature: f64,
        seed: u64,
    ) -> Result<(Tensor, Latents)> {
        let (b, _, t) = c.dims3()?;
        let latents = self.draw_latents(b, t, temperature, seed)?;
        let g = Graph::inference();
        let x = self.inverse(&g, &latents, c)?;
        Ok((x.value().clone(), latents))
    }
}

impl SequentialPasses for FloWaveNet {
    /// One inversion per flow step, whatever the length.
    fn sequential_passes(&self, _t: usize) -> usize {
        self.config.total_flows()
    }
}

impl Parameterized for FloWaveNet {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        for f in self.blocks.iter().flatten() {
            f.collect_params(out);
        }
        if let Some(f) = self.factor.as_ref() {
            f.collect_params(out);
        }
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for f in self.blocks.iter_mut().flatten() {
            f.collect_params_mut(out);
        }
        if let Some(f) = self.factor.as_mut() {
            f.collect_params_mut(out);
        }
    }
}
