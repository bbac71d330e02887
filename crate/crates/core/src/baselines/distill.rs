//! Distillation losses: closed-form Gaussian KL, its log-σ regularized
//! form, and a log-magnitude spectrogram frame loss.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::student::GaussianIaf;
use super::teacher::GaussianAr;
use super::GaussianParams;
use crate::error::{Error, Result};
use crate::graph::{Graph, Parameterized, Var};
use crate::kv::KeyValues;
use crate::optim::AdamState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DistillMode {
    KlOnly,
    FrameOnly,
    Both,
}

impl DistillMode {
    pub const ALL: [DistillMode; 3] = [
        DistillMode::KlOnly,
        DistillMode::Both,
        DistillMode::FrameOnly,
    ];

    pub fn uses_kl(self) -> bool {
        self != DistillMode::FrameOnly
    }

    pub fn uses_frame(self) -> bool {
        self != DistillMode::KlOnly
    }
}

impl fmt::Display for DistillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            DistillMode::KlOnly => "kl_only",
            DistillMode::FrameOnly => "frame_only",
            DistillMode::Both => "both",
        })
    }
}

impl FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl_only" => Ok(DistillMode::KlOnly),
            "frame_only" => Ok(DistillMode::FrameOnly),
            "both" => Ok(DistillMode::Both),
            other => Err(Error::config(
                "loss",
                format!(
                    "unknown distillation mode `{other}`, expected kl_only, frame_only or both"
                ),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameLossConfig {
    pub n_fft: usize,
    pub hop: usize,
    /// Magnitudes below this are raised to it before the log.
    pub floor: f64,
}

impl Default for FrameLossConfig {
    fn default() -> Self {
        FrameLossConfig {
            n_fft: 256,
            hop: 64,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillLossConfig {
    pub mode: DistillMode,
    /// Weight of `(log σ_T − log σ_S)²`.
    pub lambda: f64,
    pub frame: FrameLossConfig,
}

impl DistillLossConfig {
    pub fn new(mode: DistillMode) -> Self {
        DistillLossConfig {
            mode,
            lambda: 4.0,
            frame: FrameLossConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config("distill.lambda", "must be non-negative"));
        }
        if self.frame.n_fft < 2 || self.frame.hop == 0 {
            return Err(Error::config(
                "distill.frame_n_fft",
                "need n_fft >= 2 and hop >= 1",
            ));
        }
        if !(self.frame.floor > 0.0) {
            return Err(Error::config("distill.frame_floor", "must be positive"));
        }
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "loss",
        "distill.lambda",
        "distill.frame_n_fft",
        "distill.frame_hop",
        "distill.frame_floor",
    ];

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("loss", self.mode);
        kv.set("distill.lambda", self.lambda);
        kv.set("distill.frame_n_fft", self.frame.n_fft);
        kv.set("distill.frame_hop", self.frame.hop);
        kv.set("distill.frame_floor", self.frame.floor);
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let base = DistillLossConfig::new(DistillMode::Both);
        let cfg = DistillLossConfig {
            mode: match kv.get_str("loss") {
                Some(s) => s.parse()?,
                None => base.mode,
            },
            lambda: kv.get("distill.lambda")?.unwrap_or(base.lambda),
            frame: FrameLossConfig {
                n_fft: kv.get("distill.frame_n_fft")?.unwrap_or(base.frame.n_fft),
                hop: kv.get("distill.frame_hop")?.unwrap_or(base.frame.hop),
                floor: kv.get("distill.frame_floor")?.unwrap_or(base.frame.floor),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_sigmas(tensors: [&Tensor; 4]) -> Result<()> {
    let n = tensors[0].len();
    if tensors.iter().any(|t| t.len() != n) {
        return Err(Error::Shape("KL arguments differ in length".into()));
    }
    for (name, t) in [("sigma_t", tensors[1]), ("sigma_s", tensors[3])] {
        if let Some(v) = t.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "{name} must be positive, got {v}"
            )));
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("KL of empty tensors".into()));
    }
    Ok(())
}

/// `KL(N(μ_S, σ_S²) ‖ N(μ_T, σ_T²))`, averaged over all elements:
/// `log(σ_T/σ_S) + (σ_S² − σ_T² + (μ_T − μ_S)²) / (2σ_T²)`.
pub fn kl_gaussian(
    mu_t: &Tensor,
    sigma_t: &Tensor,
    mu_s: &Tensor,
    sigma_s: &Tensor,
) -> Result<f64> {
    check_sigmas([mu_t, sigma_t, mu_s, sigma_s])?;
    let n = mu_t.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mt, st, ms, ss) = (
                mu_t.data()[i],
                sigma_t.data()[i],
                mu_s.data()[i],
                sigma_s.data()[i],
            );
            (st / ss).ln() + (ss * ss - st * st + (mt - ms) * (mt - ms)) / (2.0 * st * st)
        })
        .sum();
    Ok(total / n as f64)
}

/// The same expression with the log ratio inverted, `log(σ_S/σ_T)`. Kept
/// for comparison only; it is not a divergence (it goes negative and is
/// unbounded below as `σ_S → 0`).
pub fn kl_gaussian_inverted_log(
    mu_t: &Tensor,
    sigma_t: &Tensor,
    mu_s: &Tensor,
    sigma_s: &Tensor,
) -> Result<f64> {
    check_sigmas([mu_t, sigma_t, mu_s, sigma_s])?;
    let log_term: f64 = (0..mu_t.len())
        .map(|i| 2.0 * (sigma_s.data()[i] / sigma_t.data()[i]).ln())
        .sum::<f64>()
        / mu_t.len() as f64;
    Ok(kl_gaussian(mu_t, sigma_t, mu_s, sigma_s)? + log_term)
}

/// `kl_gaussian + λ · mean((log σ_T − log σ_S)²)`.
pub fn kl_regularized(
    mu_t: &Tensor,
    sigma_t: &Tensor,
    mu_s: &Tensor,
    sigma_s: &Tensor,
    lambda: f64,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let kl = kl_gaussian(mu_t, sigma_t, mu_s, sigma_s)?;
    let n = mu_t.len();
    let penalty: f64 = (0..n)
        .map(|i| (sigma_t.data()[i].ln() - sigma_s.data()[i].ln()).powi(2))
        .sum();
    Ok(kl + lambda * penalty / n as f64)
}

/// Elementwise KL in log-σ form, on the graph.
pub fn kl_elementwise(
    g: &Graph,
    teacher: &GaussianParams,
    student: &GaussianParams,
) -> Result<Var> {
    let log_ratio = g.sub(&teacher.log_sigma, &student.log_sigma)?;
    let var_s = g.exp(&g.scale(&student.log_sigma, 2.0));
    let dmu2 = g.square(&g.sub(&teacher.mu, &student.mu)?);
    let inv_2var_t = g.scale(&g.exp(&g.scale(&teacher.log_sigma, -2.0)), 0.5);
    let quad = g.mul(&g.add(&var_s, &dmu2)?, &inv_2var_t)?;
    Ok(g.add_scalar(&g.add(&log_ratio, &quad)?, -0.5))
}

/// `mean(KL) + λ · mean((log σ_T − log σ_S)²)` and the plain mean KL.
pub fn kl_regularized_var(
    g: &Graph,
    teacher: &GaussianParams,
    student: &GaussianParams,
    lambda: f64,
) -> Result<(Var, Var)> {
    let kl = g.mean(&kl_elementwise(g, teacher, student)?);
    let penalty = g.mean(&g.square(&g.sub(&teacher.log_sigma, &student.log_sigma)?));
    Ok((g.add(&kl, &g.scale(&penalty, lambda))?, kl))
}

/// Unpadded STFT frames as `(B·F, n_fft)` via a gather.
fn frames(g: &Graph, x: &Var, cfg: &FrameLossConfig) -> Result<Var> {
    let (b, ch, t) = x.value().dims3()?;
    if ch != 1 || t < cfg.n_fft {
        return Err(Error::Shape(format!(
            "frame loss needs mono signals of at least {} samples, got {:?}",
            cfg.n_fft,
            x.shape()
        )));
    }
    let f = 1 + (t - cfg.n_fft) / cfg.hop;
    let index: Arc<[u32]> = (0..b)
        .flat_map(|bi| {
            (0..f)
                .flat_map(move |fi| (0..cfg.n_fft).map(move |n| (bi * t + fi * cfg.hop + n) as u32))
        })
        .collect();
    g.gather(x, &[b * f, cfg.n_fft], index)
}

/// Hann-windowed real and imaginary DFT matrices, `(n_fft, n_fft/2 + 1)`.
fn dft_matrices(n_fft: usize) -> (Tensor, Tensor) {
    let bins = n_fft / 2 + 1;
    let window = crate::audio::mel::hann(n_fft);
    let angle = |i: usize| {
        let (n, k) = (i / bins, i % bins);
        2.0 * std::f64::consts::PI * ((n * k) % n_fft) as f64 / n_fft as f64
    };
    let re = Tensor::from_fn(&[n_fft, bins], |i| window[i / bins] * angle(i).cos());
    let im = Tensor::from_fn(&[n_fft, bins], |i| -window[i / bins] * angle(i).sin());
    (re, im)
}

fn log_magnitude(g: &Graph, x: &Var, cfg: &FrameLossConfig) -> Result<Var> {
    let fr = frames(g, x, cfg)?;
    let (re, im) = dft_matrices(cfg.n_fft);
    let re = g.matmul(&fr, &g.constant(re))?;
    let im = g.matmul(&fr, &g.constant(im))?;
    let power = g.add(&g.square(&re), &g.square(&im))?;
    let floored = g.clamp(&power, cfg.floor * cfg.floor, f64::INFINITY);
    Ok(g.scale(&g.log(&floored), 0.5))
}

/// Mean squared difference of log-magnitude STFT frames.
pub fn frame_loss(g: &Graph, x_hat: &Var, x_ref: &Var, cfg: &FrameLossConfig) -> Result<Var> {
    if x_hat.shape() != x_ref.shape() {
        return Err(Error::Shape(format!(
            "frame loss needs equal shapes, got {:?} and {:?}",
            x_hat.shape(),
            x_ref.shape()
        )));
    }
    let diff = g.sub(
        &log_magnitude(g, x_hat, cfg)?,
        &log_magnitude(g, x_ref, cfg)?,
    )?;
    Ok(g.mean(&g.square(&diff)))
}

pub fn frame_loss_value(x_hat: &Tensor, x_ref: &Tensor, cfg: &FrameLossConfig) -> Result<f64> {
    let g = Graph::inference();
    Ok(frame_loss(
        &g,
        &g.constant(x_hat.clone()),
        &g.constant(x_ref.clone()),
        cfg,
    )?
    .item())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DistillStats {
    /// The optimized objective for the configured mode.
    pub loss: f64,
    /// Plain mean KL, without the log-σ penalty.
    pub kl: f64,
    pub frame: f64,
}

/// Student pass on noise drawn from `seed`, teacher scoring of the
/// student's own sample, and the loss combination for `cfg.mode`.
pub fn distill_loss(
    g: &Graph,
    student: &GaussianIaf,
    teacher: &GaussianAr,
    x_ref: &Tensor,
    c: &Tensor,
    cfg: &DistillLossConfig,
    seed: u64,
    trainable: bool,
) -> Result<(Var, DistillStats)> {
    let (b, _, t) = x_ref.dims3()?;
    let noise = Tensor::randn(&[b, 1, t], &mut ChaCha8Rng::seed_from_u64(seed));
    let c = g.constant(c.clone());
    let out = student.forward(g, &g.constant(noise), &c, trainable)?;
    // The teacher is frozen; gradients still flow through its input.
    let pred = teacher.predict(g, &out.x, &c, false)?;
    let (kl_reg, kl) = kl_regularized_var(g, &pred.params, &out.params, cfg.lambda)?;
    let frame = frame_loss(g, &out.x, &g.constant(x_ref.clone()), &cfg.frame)?;
    let loss = match cfg.mode {
        DistillMode::KlOnly => kl_reg,
        DistillMode::FrameOnly => frame.clone(),
        DistillMode::Both => g.add(&kl_reg, &frame)?,
    };
    let stats = DistillStats {
        loss: loss.item(),
        kl: kl.item(),
        frame: frame.item(),
    };
    Ok((loss, stats))
}

/// One optimizer update of the student. The teacher is only read.
pub fn distill_step(
    student: &mut GaussianIaf,
    teacher: &GaussianAr,
    x_ref: &Tensor,
    c: &Tensor,
    cfg: &DistillLossConfig,
    optimizer: &mut AdamState,
    seed: u64,
) -> Result<DistillStats> {
    cfg.validate()?;
    let g = Graph::new();
    let (loss, stats) = distill_loss(&g, student, teacher, x_ref, c, cfg, seed, true)?;
    if !stats.loss.is_finite() {
        return Err(Error::NonFinite(format!("{} distillation loss", cfg.mode)));
    }
    let grads = g.backward(&loss)?;
    optimizer.step(&mut student.params_mut(), &grads)?;
    Ok(stats)
}
