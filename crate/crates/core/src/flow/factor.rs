//! Multi-scale factor-out: half the channels leave the flow and are scored
//! under a Gaussian whose mean and log-std are predicted from the other half.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::coupling::{CouplingNetShape, LOG_SCALE_LIMIT};
use crate::flow::wavenet::WaveNet;
use crate::graph::{Graph, Param, Parameterized, Var};

pub(crate) fn half_log_two_pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorOutGaussian {
    channels: usize,
    pub net: WaveNet,
}

/// Result of scoring the factored half.
pub struct FactorOutput {
    pub retained: Var,
    pub factored: Var,
    /// `(z_f − μ) / σ`, the whitened factored latent.
    pub whitened: Var,
    /// Log-density per batch element.
    pub log_prob: Var,
}

impl FactorOutGaussian {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        channels: usize,
        cond_channels: usize,
        shape: &CouplingNetShape,
        rng: &mut R,
    ) -> Result<Self> {
        if channels % 2 != 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "{prefix}: factor-out needs an even channel count, got {channels}"
            )));
        }
        let net = WaveNet::new(
            &format!("{prefix}.net"),
            shape.wavenet(channels / 2, channels, cond_channels),
            rng,
        )?;
        Ok(FactorOutGaussian { channels, net })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(μ, log σ)` for the factored half given the retained half.
    pub fn predict(
        &self,
        g: &Graph,
        retained: &Var,
        c: Option<&Var>,
        trainable: bool,
    ) -> Result<(Var, Var)> {
        let half = self.channels / 2;
        let out = self.net.forward(g, retained, c, trainable)?;
        let mu = g.slice_channels(&out, 0, half)?;
        let log_sigma = g.clamp(
            &g.slice_channels(&out, half, half)?,
            -LOG_SCALE_LIMIT,
            LOG_SCALE_LIMIT,
        );
        Ok((mu, log_sigma))
    }

    pub fn forward(
        &self,
        g: &Graph,
        h: &Var,
        c: Option<&Var>,
        trainable: bool,
    ) -> Result<FactorOutput> {
        let (_, ch, t) = h.value().dims3()?;
        if ch != self.channels {
            return Err(Error::Shape(format!(
                "factor-out over {} channels received {ch}",
                self.channels
            )));
        }
        let half = ch / 2;
        let retained = g.slice_channels(h, 0, half)?;
        let factored = g.slice_channels(h, half, half)?;
        let (mu, log_sigma) = self.predict(g, &retained, c, trainable)?;
        let whitened = g.mul(&g.sub(&factored, &mu)?, &g.exp(&g.scale(&log_sigma, -1.0)))?;
        let density = g.add(&g.scale(&g.square(&whitened), 0.5), &log_sigma)?;
        let log_prob = g.add_scalar(
            &g.scale(&g.sum_batch(&density), -1.0),
            -half_log_two_pi() * (half * t) as f64,
        );
        Ok(FactorOutput {
            retained,
            factored,
            whitened,
            log_prob,
        })
    }

    /// Rebuilds the full tensor from the retained half and whitened noise:
    /// `z_f = μ + σ · noise`.
    pub fn inverse(&self, g: &Graph, retained: &Var, noise: &Var, c: Option<&Var>) -> Result<Var> {
        let (mu, log_sigma) = self.predict(g, retained, c, false)?;
        let factored = g.add(&mu, &g.mul(noise, &g.exp(&log_sigma))?)?;
        g.concat_channels(retained, &factored)
    }
}

impl Parameterized for FactorOutGaussian {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.net.collect_params(out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.net.collect_params_mut(out);
    }
}
