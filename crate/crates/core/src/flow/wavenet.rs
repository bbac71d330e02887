//! Gated-tanh WaveNet used as the conditioner network everywhere: affine
//! coupling, the factored-out Gaussian, the autoregressive teacher and the
//! IAF student.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::graph::{Graph, Param, Parameterized, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct WaveNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Zero disables conditioning.
    pub cond_channels: usize,
    pub residual_channels: usize,
    pub gate_channels: usize,
    pub skip_channels: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub causal: bool,
    /// Final projection starts at zero so the network initially outputs zeros.
    pub zero_init_output: bool,
}

impl WaveNetConfig {
    /// Samples (inclusive of the current one) that can influence an output.
    pub fn receptive_field(&self) -> usize {
        let k = self.kernel_size - 1;
        1 + k + self.dilations.iter().map(|d| k * d).sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct GatedLayer {
    dilated_w: Param,
    dilated_b: Param,
    cond_w: Option<Param>,
    res_w: Option<Param>,
    res_b: Option<Param>,
    skip_w: Param,
    skip_b: Param,
    dilation: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaveNet {
    config: WaveNetConfig,
    front_w: Param,
    front_b: Param,
    layers: Vec<GatedLayer>,
    end_w1: Param,
    end_b1: Param,
    pub(crate) end_w2: Param,
    pub(crate) end_b2: Param,
}

fn init_weight<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

impl WaveNet {
    pub fn new<R: Rng + ?Sized>(prefix: &str, config: WaveNetConfig, rng: &mut R) -> Result<Self> {
        if config.in_channels == 0 || config.out_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "{prefix}: wavenet needs positive input/output channels"
            )));
        }
        ConvGeometry::new(config.kernel_size, 1, config.causal)?;
        let (r, gch, s, k) = (
            config.residual_channels,
            config.gate_channels,
            config.skip_channels,
            config.kernel_size,
        );
        let front_w = Param::new(
            format!("{prefix}.front.weight"),
            init_weight(&[r, config.in_channels, k], config.in_channels * k, rng),
        );
        let front_b = Param::new(format!("{prefix}.front.bias"), Tensor::zeros(&[r]));
        let n_layers = config.dilations.len();
        let mut layers = Vec::with_capacity(n_layers);
        for (i, &dilation) in config.dilations.iter().enumerate() {
            let p = format!("{prefix}.layer{i}");
            let last = i + 1 == n_layers;
            layers.push(GatedLayer {
                dilated_w: Param::new(
                    format!("{p}.dilated.weight"),
                    init_weight(&[2 * gch, r, k], r * k, rng),
                ),
                dilated_b: Param::new(format!("{p}.dilated.bias"), Tensor::zeros(&[2 * gch])),
                cond_w: (config.cond_channels > 0).then(|| {
                    Param::new(
                        format!("{p}.cond.weight"),
                        init_weight(
                            &[2 * gch, config.cond_channels, 1],
                            config.cond_channels,
                            rng,
                        ),
                    )
                }),
                // The last layer only feeds the skip path.
                res_w: (!last).then(|| {
                    Param::new(
                        format!("{p}.res.weight"),
                        init_weight(&[r, gch, 1], gch, rng),
                    )
                }),
                res_b: (!last).then(|| Param::new(format!("{p}.res.bias"), Tensor::zeros(&[r]))),
                skip_w: Param::new(
                    format!("{p}.skip.weight"),
                    init_weight(&[s, gch, 1], gch, rng),
                ),
                skip_b: Param::new(format!("{p}.skip.bias"), Tensor::zeros(&[s])),
                dilation,
            });
        }
        let end_w1 = Param::new(
            format!("{prefix}.end1.weight"),
            init_weight(&[s, s, 1], s, rng),
        );
        let end_b1 = Param::new(format!("{prefix}.end1.bias"), Tensor::zeros(&[s]));
        let end_w2 = Param::new(
            format!("{prefix}.end2.weight"),
            if config.zero_init_output {
                Tensor::zeros(&[config.out_channels, s, 1])
            } else {
                init_weight(&[config.out_channels, s, 1], s, rng)
            },
        );
        let end_b2 = Param::new(
            format!("{prefix}.end2.bias"),
            Tensor::zeros(&[config.out_channels]),
        );
        Ok(WaveNet {
            config,
            front_w,
            front_b,
            layers,
            end_w1,
            end_b1,
            end_w2,
            end_b2,
        })
    }

    pub fn config(&self) -> &WaveNetConfig {
        &self.config
    }

    /// Overrides the final projection so the output is the constant `bias`
    /// per channel, for hand-checkable tests.
    pub fn force_constant_output(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.config.out_channels {
            return Err(Error::Shape(format!(
                "constant output needs {} values, got {}",
                self.config.out_channels,
                bias.len()
            )));
        }
        self.end_w2.value = Tensor::zeros(self.end_w2.value.shape());
        self.end_b2.value = Tensor::new(&[bias.len()], bias.to_vec())?;
        Ok(())
    }

    /// Runs the network on `x` (and optional condition `c` of equal length).
    pub fn forward(&self, g: &Graph, x: &Var, c: Option<&Var>, trainable: bool) -> Result<Var> {
        let cfg = &self.config;
        let (_, cin, t) = x.value().dims3()?;
        if cin != cfg.in_channels {
            return Err(Error::Shape(format!(
                "wavenet expects {} input channels, got {cin}",
                cfg.in_channels
            )));
        }
        let cond = match (c, cfg.cond_channels) {
            (_, 0) => None,
            (None, n) => {
                return Err(Error::Shape(format!(
                    "wavenet expects a {n}-channel condition"
                )));
            }
            (Some(c), n) => {
                let (_, cc, ct) = c.value().dims3()?;
                if cc != n || ct != t {
                    return Err(Error::Shape(format!(
                        "condition shape {:?} does not match {n} channels × {t} steps",
                        c.shape()
                    )));
                }
                Some(c)
            }
        };
        let pointwise = ConvGeometry::new(1, 1, cfg.causal)?;
        let front = ConvGeometry::new(cfg.kernel_size, 1, cfg.causal)?;
        let gch = cfg.gate_channels;

        let fw = g.bind(&self.front_w, trainable);
        let fb = g.bind(&self.front_b, trainable);
        let mut h = g.relu(&g.conv1d(x, &fw, Some(&fb), front)?);
        let mut skip: Option<Var> = None;
        for layer in &self.layers {
            let geom = ConvGeometry::new(cfg.kernel_size, layer.dilation, cfg.causal)?;
            let w = g.bind(&layer.dilated_w, trainable);
            let b = g.bind(&layer.dilated_b, trainable);
            let mut pre = g.conv1d(&h, &w, Some(&b), geom)?;
            if let (Some(c), Some(cw)) = (cond, layer.cond_w.as_ref()) {
                let cw = g.bind(cw, trainable);
                pre = g.add(&pre, &g.conv1d(c, &cw, None, pointwise)?)?;
            }
            let filter = g.tanh(&g.slice_channels(&pre, 0, gch)?);
            let gate = g.sigmoid(&g.slice_channels(&pre, gch, gch)?);
            let z = g.mul(&filter, &gate)?;
            let sw = g.bind(&layer.skip_w, trainable);
            let sb = g.bind(&layer.skip_b, trainable);
            let s = g.conv1d(&z, &sw, Some(&sb), pointwise)?;
            skip = Some(match skip {
                None => s,
                Some(acc) => g.add(&acc, &s)?,
            });
            if let (Some(rw), Some(rb)) = (layer.res_w.as_ref(), layer.res_b.as_ref()) {
                let rw = g.bind(rw, trainable);
                let rb = g.bind(rb, trainable);
                h = g.add(&h, &g.conv1d(&z, &rw, Some(&rb), pointwise)?)?;
            }
        }
        let skip = match skip {
            Some(s) => s,
            None => h,
        };
        let w1 = g.bind(&self.end_w1, trainable);
        let b1 = g.bind(&self.end_b1, trainable);
        let w2 = g.bind(&self.end_w2, trainable);
        let b2 = g.bind(&self.end_b2, trainable);
        let e = g.relu(&g.conv1d(&g.relu(&skip), &w1, Some(&b1), pointwise)?);
        g.conv1d(&e, &w2, Some(&b2), pointwise)
    }
}

impl Parameterized for WaveNet {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.front_w);
        out.push(&self.front_b);
        for l in &self.layers {
            out.push(&l.dilated_w);
            out.push(&l.dilated_b);
            out.extend(l.cond_w.as_ref());
            out.extend(l.res_w.as_ref());
            out.extend(l.res_b.as_ref());
            out.push(&l.skip_w);
            out.push(&l.skip_b);
        }
        out.extend([&self.end_w1, &self.end_b1, &self.end_w2, &self.end_b2]);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.front_w);
        out.push(&mut self.front_b);
        for l in &mut self.layers {
            out.push(&mut l.dilated_w);
            out.push(&mut l.dilated_b);
            out.extend(l.cond_w.as_mut());
            out.extend(l.res_w.as_mut());
            out.extend(l.res_b.as_mut());
            out.push(&mut l.skip_w);
            out.push(&mut l.skip_b);
        }
        out.push(&mut self.end_w1);
        out.push(&mut self.end_b1);
        out.push(&mut self.end_w2);
        out.push(&mut self.end_b2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(causal: bool) -> WaveNetConfig {
        WaveNetConfig {
            in_channels: 2,
            out_channels: 4,
            cond_channels: 3,
            residual_channels: 5,
            gate_channels: 4,
            skip_channels: 6,
            kernel_size: if causal { 2 } else { 3 },
            dilations: vec![1, 2],
            causal,
            zero_init_output: false,
        }
    }

    #[test]
    fn causal_output_ignores_the_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = WaveNet::new("n", config(true), &mut rng).unwrap();
        let x = Tensor::randn(&[1, 2, 20], &mut rng);
        let c = Tensor::randn(&[1, 3, 20], &mut rng);
        let g = Graph::inference();
        let base = net
            .forward(
                &g,
                &g.constant(x.clone()),
                Some(&g.constant(c.clone())),
                false,
            )
            .unwrap();
        let mut xd = x.to_vec();
        xd[10] += 1.0;
        xd[20 + 12] -= 2.0;
        let mut cd = c.to_vec();
        cd[15] += 3.0;
        let out = net
            .forward(
                &g,
                &g.constant(Tensor::new(&[1, 2, 20], xd).unwrap()),
                Some(&g.constant(Tensor::new(&[1, 3, 20], cd).unwrap())),
                false,
            )
            .unwrap();
        for ch in 0..4 {
            for t in 0..10 {
                assert_eq!(out.value().at3(0, ch, t), base.value().at3(0, ch, t));
            }
        }
        assert!(out.value().max_abs_diff(base.value()) > 0.0);
    }

    #[test]
    fn zero_init_output_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cfg = config(false);
        cfg.zero_init_output = true;
        let net = WaveNet::new("n", cfg, &mut rng).unwrap();
        let g = Graph::inference();
        let x = g.constant(Tensor::randn(&[2, 2, 8], &mut rng));
        let c = g.constant(Tensor::randn(&[2, 3, 8], &mut rng));
        let y = net.forward(&g, &x, Some(&c), false).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn receptive_field_counts_every_tap() {
        assert_eq!(config(false).receptive_field(), 1 + 2 + 2 + 4);
        assert_eq!(config(true).receptive_field(), 1 + 1 + 1 + 2);
    }
}
