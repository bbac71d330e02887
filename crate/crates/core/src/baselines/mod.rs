//! Autoregressive and distillation baselines: a Gaussian WaveNet teacher, a
//! Gaussian IAF student, and the losses that connect them.

pub mod distill;
pub mod student;
pub mod teacher;

use std::sync::Arc;

pub use distill::{DistillLossConfig, DistillMode, DistillStats, FrameLossConfig};
pub use student::{GaussianIaf, IafConfig, StudentOutput};
pub use teacher::{ArSample, GaussianAr, GaussianArConfig};

use crate::error::Result;
use crate::flow::factor::half_log_two_pi;
use crate::graph::{Graph, Var, GATHER_ZERO};

/// Per-timestep Gaussian parameters, each `(B, 1, T)`.
pub struct GaussianParams {
    pub mu: Var,
    pub log_sigma: Var,
}

/// `y[t] = x[t - 1]`, `y[0] = 0`, per channel.
pub(crate) fn shift_right(g: &Graph, x: &Var) -> Result<Var> {
    let (b, c, t) = x.value().dims3()?;
    let index: Arc<[u32]> = (0..b * c)
        .flat_map(|row| {
            (0..t).map(move |ti| {
                if ti == 0 {
                    GATHER_ZERO
                } else {
                    (row * t + ti - 1) as u32
                }
            })
        })
        .collect();
    g.gather(x, &[b, c, t], index)
}

/// Elementwise `log N(x; μ, σ²)`.
pub fn gaussian_log_prob(g: &Graph, x: &Var, p: &GaussianParams) -> Result<Var> {
    let z = g.mul(&g.sub(x, &p.mu)?, &g.exp(&g.scale(&p.log_sigma, -1.0)))?;
    let lp = g.sub(&g.scale(&g.square(&z), -0.5), &p.log_sigma)?;
    Ok(g.add_scalar(&lp, -half_log_two_pi()))
}
