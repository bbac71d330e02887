//! Per-channel affine normalisation with data-dependent initialisation.

use crate::error::{Error, Result};
use crate::graph::{Graph, Param, Parameterized, Var};
use crate::tensor::Tensor;

/// Smallest permitted `|scale|`.
pub const MIN_SCALE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct ActNorm {
    pub scale: Param,
    pub bias: Param,
    initialized: bool,
}

impl ActNorm {
    /// Identity parameters, waiting for data-dependent initialisation.
    pub fn new(prefix: &str, channels: usize) -> Self {
        ActNorm {
            scale: Param::new(format!("{prefix}.scale"), Tensor::full(&[channels], 1.0)),
            bias: Param::new(format!("{prefix}.bias"), Tensor::zeros(&[channels])),
            initialized: false,
        }
    }

    pub fn with_params(prefix: &str, scale: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let c = scale.len();
        let mut layer = ActNorm {
            scale: Param::new(format!("{prefix}.scale"), Tensor::new(&[c], scale)?),
            bias: Param::new(format!("{prefix}.bias"), Tensor::new(&[c], bias)?),
            initialized: true,
        };
        layer.enforce_scale_floor();
        Ok(layer)
    }

    pub fn channels(&self) -> usize {
        self.scale.value.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Marks the current parameters as final without looking at data.
    pub fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    /// Sets scale and bias so `x` maps to zero mean and unit variance per
    /// channel (statistics over batch and time). Fails on a second call.
    pub fn data_init(&mut self, x: &Tensor) -> Result<()> {
        if self.initialized {
            return Err(Error::InvalidArgument(format!(
                "{} is already initialized",
                self.scale.name
            )));
        }
        let (b, c, t) = x.dims3()?;
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "{} has {} channels, init batch has {c}",
                self.scale.name,
                self.channels()
            )));
        }
        let n = (b * t) as f64;
        let mut scale = vec![0.0; c];
        let mut bias = vec![0.0; c];
        for ci in 0..c {
            let values = (0..b).flat_map(|bi| {
                let row = (bi * c + ci) * t;
                x.data()[row..row + t].iter().copied()
            });
            let mean = values.clone().sum::<f64>() / n;
            let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            if !(std > 0.0) || !std.is_finite() {
                return Err(Error::Degenerate(format!(
                    "{}: channel {ci} has zero variance in the init batch",
                    self.scale.name
                )));
            }
            scale[ci] = 1.0 / std;
            bias[ci] = -mean / std;
        }
        self.scale.value = Tensor::new(&[c], scale)?;
        self.bias.value = Tensor::new(&[c], bias)?;
        self.enforce_scale_floor();
        self.initialized = true;
        Ok(())
    }

    /// Pushes any scale with `|s| < MIN_SCALE` out to `±MIN_SCALE`.
    pub fn enforce_scale_floor(&mut self) {
        if self.scale.value.data().iter().any(|s| s.abs() < MIN_SCALE) {
            self.scale.value = self.scale.value.map(|s| {
                if s.abs() >= MIN_SCALE {
                    s
                } else if s < 0.0 {
                    -MIN_SCALE
                } else {
                    MIN_SCALE
                }
            });
        }
    }

    fn require_init(&self) -> Result<()> {
        if self.initialized {
            Ok(())
        } else {
            Err(Error::Uninitialized(self.scale.name.clone()))
        }
    }

    /// `y = x·s + b`; log-det per batch element `T · Σ log|s|`.
    pub fn forward(&self, g: &Graph, x: &Var, trainable: bool) -> Result<(Var, Var)> {
        self.require_init()?;
        let (b, _, t) = x.value().dims3()?;
        let s = g.bind(&self.scale, trainable);
        let bias = g.bind(&self.bias, trainable);
        let y = g.channel_affine(x, &s, &bias)?;
        let per_sample = g.scale(&g.sum(&g.log(&g.abs(&s))), t as f64);
        let logdet = g.broadcast_scalar(&per_sample, b)?;
        Ok((y, logdet))
    }

    /// Initialises from `x` when needed, then applies the forward map.
    pub fn forward_init(&mut self, g: &Graph, x: &Var, trainable: bool) -> Result<(Var, Var)> {
        if !self.initialized {
            self.data_init(x.value())?;
        }
        self.forward(g, x, trainable)
    }

    /// `x = (y − b) / s`.
    pub fn inverse(&self, g: &Graph, y: &Var) -> Result<Var> {
        self.require_init()?;
        let inv_s = self.scale.value.map(|s| 1.0 / s);
        let shift = self.bias.value.zip_map(&self.scale.value, |b, s| -b / s)?;
        g.channel_affine(y, &g.constant(inv_s), &g.constant(shift))
    }
}

impl Parameterized for ActNorm {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.scale);
        out.push(&self.bias);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.scale);
        out.push(&mut self.bias);
    }
}
