//! WaveNet affine coupling.
//!
//! The first channel half passes through unchanged and conditions a WaveNet
//! that predicts a shift `m` and log-scale `s` for the second half:
//! `y_b = (x_b − m) · exp(−s)`, with log-det `−Σ s`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::wavenet::{WaveNet, WaveNetConfig};
use crate::graph::{Graph, Param, Parameterized, Var};

/// Bounds applied to the predicted log-scale before exponentiation.
pub const LOG_SCALE_LIMIT: f64 = 7.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AffineCoupling {
    channels: usize,
    pub net: WaveNet,
}

/// Hyper-parameters shared by the coupling and factor-out networks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CouplingNetShape {
    pub residual_channels: usize,
    pub gate_channels: usize,
    pub skip_channels: usize,
    pub kernel_size: usize,
    pub n_layers: usize,
    pub causal: bool,
}

impl CouplingNetShape {
    pub(crate) fn wavenet(
        &self,
        in_channels: usize,
        out_channels: usize,
        cond_channels: usize,
    ) -> WaveNetConfig {
        WaveNetConfig {
            in_channels,
            out_channels,
            cond_channels,
            residual_channels: self.residual_channels,
            gate_channels: self.gate_channels,
            skip_channels: self.skip_channels,
            kernel_size: self.kernel_size,
            dilations: (0..self.n_layers).map(|i| 1 << i).collect(),
            causal: self.causal,
            zero_init_output: true,
        }
    }
}

impl AffineCoupling {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        channels: usize,
        cond_channels: usize,
        shape: &CouplingNetShape,
        rng: &mut R,
    ) -> Result<Self> {
        if channels % 2 != 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "{prefix}: coupling needs an even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        let net = WaveNet::new(
            &format!("{prefix}.net"),
            shape.wavenet(half, channels, cond_channels),
            rng,
        )?;
        Ok(AffineCoupling { channels, net })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(m, s)` predicted from the pass-through half.
    fn shift_and_log_scale(
        &self,
        g: &Graph,
        pass: &Var,
        c: Option<&Var>,
        trainable: bool,
    ) -> Result<(Var, Var)> {
        let half = self.channels / 2;
        let out = self.net.forward(g, pass, c, trainable)?;
        let m = g.slice_channels(&out, 0, half)?;
        let s = g.slice_channels(&out, half, half)?;
        Ok((m, g.clamp(&s, -LOG_SCALE_LIMIT, LOG_SCALE_LIMIT)))
    }

    fn split(&self, g: &Graph, x: &Var) -> Result<(Var, Var)> {
        let (_, c, _) = x.value().dims3()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "coupling over {} channels received {c}",
                self.channels
            )));
        }
        let half = c / 2;
        Ok((
            g.slice_channels(x, 0, half)?,
            g.slice_channels(x, half, half)?,
        ))
    }

    /// Returns `y` and the per-batch-element log-det.
    pub fn forward(
        &self,
        g: &Graph,
        x: &Var,
        c: Option<&Var>,
        trainable: bool,
    ) -> Result<(Var, Var)> {
        let (pass, moved) = self.split(g, x)?;
        let (m, s) = self.shift_and_log_scale(g, &pass, c, trainable)?;
        let scaled = g.mul(&g.sub(&moved, &m)?, &g.exp(&g.scale(&s, -1.0)))?;
        let y = g.concat_channels(&pass, &scaled)?;
        let logdet = g.scale(&g.sum_batch(&s), -1.0);
        Ok((y, logdet))
    }

    pub fn inverse(&self, g: &Graph, y: &Var, c: Option<&Var>) -> Result<Var> {
        let (pass, moved) = self.split(g, y)?;
        let (m, s) = self.shift_and_log_scale(g, &pass, c, false)?;
        let restored = g.add(&g.mul(&moved, &g.exp(&s))?, &m)?;
        g.concat_channels(&pass, &restored)
    }
}

impl Parameterized for AffineCoupling {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.net.collect_params(out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.net.collect_params_mut(out);
    }
}
