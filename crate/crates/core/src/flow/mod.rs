//! Invertible building blocks. Every layer maps data towards the latent
//! side in `forward` (returning a log-det per batch element) and back in
//! `inverse`.

pub mod actnorm;
pub mod coupling;
pub mod factor;
pub mod permute;
pub mod wavenet;

use rand::Rng;

pub use actnorm::ActNorm;
pub use coupling::{AffineCoupling, CouplingNetShape};
pub use factor::{FactorOutGaussian, FactorOutput};
pub use wavenet::{WaveNet, WaveNetConfig};

use crate::error::Result;
use crate::graph::{Graph, Param, Parameterized, Var};

/// ActNorm, then affine coupling, then change-order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowStep {
    pub actnorm: ActNorm,
    pub coupling: AffineCoupling,
}

impl FlowStep {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        channels: usize,
        cond_channels: usize,
        shape: &CouplingNetShape,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FlowStep {
            actnorm: ActNorm::new(&format!("{prefix}.actnorm"), channels),
            coupling: AffineCoupling::new(
                &format!("{prefix}.coupling"),
                channels,
                cond_channels,
                shape,
                rng,
            )?,
        })
    }

    /// Returns the output and its log-det per batch element.
    pub fn forward(
        &self,
        g: &Graph,
        x: &Var,
        c: Option<&Var>,
        trainable: bool,
    ) -> Result<(Var, Var)> {
        let (h, ld_an) = self.actnorm.forward(g, x, trainable)?;
        let (h, ld_cp) = self.coupling.forward(g, &h, c, trainable)?;
        let y = permute::change_order(g, &h)?;
        Ok((y, g.add(&ld_an, &ld_cp)?))
    }

    pub fn inverse(&self, g: &Graph, y: &Var, c: Option<&Var>) -> Result<Var> {
        let h = permute::change_order(g, y)?;
        let h = self.coupling.inverse(g, &h, c)?;
        self.actnorm.inverse(g, &h)
    }
}

impl Parameterized for FlowStep {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.actnorm.collect_params(out);
        self.coupling.collect_params(out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.actnorm.collect_params_mut(out);
        self.coupling.collect_params_mut(out);
    }
}
