//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to tracked [`Var`]s. Node
//! indices are assigned in evaluation order, so walking them backwards is a
//! reverse topological traversal and each node is visited exactly once.
//! A graph built with [`Graph::inference`] records nothing and lets
//! intermediate values drop as soon as they go out of scope.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Marker for an output position with no source element in [`Graph::gather`].
pub const GATHER_ZERO: u32 = u32::MAX;

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }
}

/// Anything that owns parameters.
pub trait Parameterized {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>);
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>);

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.collect_params(&mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        self.collect_params_mut(&mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Var {
    value: Tensor,
    id: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
    param: Option<String>,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records operations for [`Graph::backward`].
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A graph that never records; every result is a constant.
    pub fn inference() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor, param: Option<String>) -> Var {
        if !self.recording {
            return Var { value, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: Vec::new(),
            backward: None,
            param,
        });
        Var {
            value,
            id: Some(nodes.len() - 1),
        }
    }

    pub fn constant(&self, value: Tensor) -> Var {
        Var { value, id: None }
    }

    /// Tracked leaf without a name, for gradients with respect to inputs.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_leaf(value, None)
    }

    /// Tracked trainable parameter; gradients are reported under its name.
    pub fn param(&self, p: &Param) -> Var {
        self.push_leaf(p.value.clone(), Some(p.name.clone()))
    }

    /// Binds a parameter as trainable or as a frozen constant.
    pub fn bind(&self, p: &Param, trainable: bool) -> Var {
        if trainable {
            self.param(p)
        } else {
            self.constant(p.value.clone())
        }
    }

    fn record(
        &self,
        value: Tensor,
        inputs: &[&Var],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        if !self.recording || inputs.iter().all(|v| v.id.is_none()) {
            return Var { value, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: Some(Box::new(backward)),
            param: None,
        });
        Var {
            value,
            id: Some(nodes.len() - 1),
        }
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let Some(root) = loss.id else {
            return Ok(Gradients {
                by_node: grads,
                by_name: HashMap::new(),
            });
        };
        grads[root] = Some(Tensor::from_parts(loss.value.shape().to_vec(), vec![1.0]));
        for idx in (0..=root).rev() {
            let node = &nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g_out) = grads[idx].take() else {
                continue;
            };
            let want: Vec<bool> = node.inputs.iter().map(|i| i.is_some()).collect();
            let input_grads = backward(&g_out, &want);
            for (slot, g_in) in node.inputs.iter().zip(input_grads) {
                if let (Some(i), Some(g_in)) = (slot, g_in) {
                    grads[*i] = Some(match grads[*i].take() {
                        None => g_in,
                        Some(acc) => add_tensors(&acc, &g_in),
                    });
                }
            }
        }
        let mut by_name: HashMap<String, Tensor> = HashMap::new();
        for (idx, node) in nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (node.param.as_ref(), grads[idx].as_ref()) {
                let entry = by_name.remove(name);
                by_name.insert(
                    name.clone(),
                    match entry {
                        None => g.clone(),
                        Some(acc) => add_tensors(&acc, g),
                    },
                );
            }
        }
        Ok(Gradients {
            by_node: grads,
            by_name,
        })
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value.zip_map(&b.value, |x, y| x + y)?;
        Ok(self.record(value, &[a, b], |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value.zip_map(&b.value, |x, y| x - y)?;
        Ok(self.record(value, &[a, b], |g, _| {
            vec![Some(g.clone()), Some(g.scale(-1.0))]
        }))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value.zip_map(&b.value, |x, y| x * y)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(value, &[a, b], move |g, want| {
            vec![
                want[0].then(|| mul_tensors(g, &bv)),
                want[1].then(|| mul_tensors(g, &av)),
            ]
        }))
    }

    pub fn div(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value.zip_map(&b.value, |x, y| x / y)?;
        let (bv, out) = (b.value.clone(), value.clone());
        Ok(self.record(value, &[a, b], move |g, want| {
            let inv = bv.map(|v| 1.0 / v);
            vec![
                want[0].then(|| mul_tensors(g, &inv)),
                want[1].then(|| {
                    let q = mul_tensors(&out, &inv);
                    mul_tensors(g, &q).scale(-1.0)
                }),
            ]
        }))
    }

    pub fn scale(&self, a: &Var, k: f64) -> Var {
        self.record(a.value.scale(k), &[a], move |g, _| vec![Some(g.scale(k))])
    }

    pub fn add_scalar(&self, a: &Var, k: f64) -> Var {
        self.record(a.value.map(|v| v + k), &[a], |g, _| vec![Some(g.clone())])
    }

    pub fn exp(&self, a: &Var) -> Var {
        let out = a.value.map(f64::exp);
        let saved = out.clone();
        self.record(out, &[a], move |g, _| vec![Some(mul_tensors(g, &saved))])
    }

    pub fn log(&self, a: &Var) -> Var {
        let saved = a.value.clone();
        self.record(a.value.map(f64::ln), &[a], move |g, _| {
            vec![Some(g.zip_map(&saved, |gv, x| gv / x).expect("same shape"))]
        })
    }

    pub fn tanh(&self, a: &Var) -> Var {
        let out = a.value.map(f64::tanh);
        let saved = out.clone();
        self.record(out, &[a], move |g, _| {
            vec![Some(
                g.zip_map(&saved, |gv, y| gv * (1.0 - y * y))
                    .expect("same shape"),
            )]
        })
    }

    pub fn sigmoid(&self, a: &Var) -> Var {
        let out = a.value.map(sigmoid);
        let saved = out.clone();
        self.record(out, &[a], move |g, _| {
            vec![Some(
                g.zip_map(&saved, |gv, y| gv * y * (1.0 - y))
                    .expect("same shape"),
            )]
        })
    }

    pub fn relu(&self, a: &Var) -> Var {
        let saved = a.value.clone();
        self.record(a.value.map(|v| v.max(0.0)), &[a], move |g, _| {
            vec![Some(
                g.zip_map(&saved, |gv, x| if x > 0.0 { gv } else { 0.0 })
                    .expect("same shape"),
            )]
        })
    }

    pub fn square(&self, a: &Var) -> Var {
        let saved = a.value.clone();
        self.record(a.value.map(|v| v * v), &[a], move |g, _| {
            vec![Some(
                g.zip_map(&saved, |gv, x| 2.0 * gv * x).expect("same shape"),
            )]
        })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&self, a: &Var, lo: f64, hi: f64) -> Var {
        let saved = a.value.clone();
        self.record(a.value.map(|v| v.clamp(lo, hi)), &[a], move |g, _| {
            vec![Some(
                g.zip_map(&saved, |gv, x| if x < lo || x > hi { 0.0 } else { gv })
                    .expect("same shape"),
            )]
        })
    }

    pub fn sum(&self, a: &Var) -> Var {
        let shape = a.value.shape().to_vec();
        self.record(Tensor::scalar(a.value.sum()), &[a], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn abs(&self, a: &Var) -> Var {
        let saved = a.value.clone();
        self.record(a.value.map(f64::abs), &[a], move |g, _| {
            vec![Some(
                g.zip_map(&saved, |gv, x| gv * x.signum())
                    .expect("same shape"),
            )]
        })
    }

    /// Sums everything but the leading (batch) axis, giving shape `[B]`.
    pub fn sum_batch(&self, a: &Var) -> Var {
        let shape = a.value.shape().to_vec();
        let b = shape[0];
        let per = a.value.len() / b.max(1);
        let sums: Vec<f64> = a
            .value
            .data()
            .chunks(per.max(1))
            .map(|c| c.iter().sum())
            .collect();
        self.record(Tensor::from_parts(vec![b], sums), &[a], move |g, _| {
            let gd = g.data();
            vec![Some(Tensor::from_fn(&shape, |i| gd[i / per]))]
        })
    }

    /// Repeats a one-element tensor into shape `[n]`.
    pub fn broadcast_scalar(&self, a: &Var, n: usize) -> Result<Var> {
        self.gather(a, &[n], vec![0u32; n].into())
    }

    pub fn mean(&self, a: &Var) -> Var {
        let n = a.value.len() as f64;
        let s = self.sum(a);
        self.scale(&s, 1.0 / n)
    }

    // ---- structural --------------------------------------------------

    /// `y[b,c,t] = x[b,c,t]·scale[c] + bias[c]`.
    pub fn channel_affine(&self, x: &Var, scale: &Var, bias: &Var) -> Result<Var> {
        let (b, c, t) = x.value.dims3()?;
        if scale.value.len() != c || bias.value.len() != c {
            return Err(Error::Shape(format!(
                "per-channel affine over {c} channels got scale {:?} and bias {:?}",
                scale.value.shape(),
                bias.value.shape()
            )));
        }
        let (xd, sd, bd) = (x.value.data(), scale.value.data(), bias.value.data());
        let mut out = vec![0.0; b * c * t];
        for bi in 0..b {
            for ci in 0..c {
                let row = (bi * c + ci) * t;
                for ti in 0..t {
                    out[row + ti] = xd[row + ti] * sd[ci] + bd[ci];
                }
            }
        }
        let (xv, sv) = (x.value.clone(), scale.value.clone());
        Ok(self.record(
            Tensor::from_parts(vec![b, c, t], out),
            &[x, scale, bias],
            move |g, want| {
                let gd = g.data();
                let dx = want[0].then(|| {
                    let sd = sv.data();
                    Tensor::from_fn(&[b, c, t], |i| gd[i] * sd[(i / t) % c])
                });
                let mut ds = vec![0.0; c];
                let mut db = vec![0.0; c];
                let xd = xv.data();
                for bi in 0..b {
                    for ci in 0..c {
                        let row = (bi * c + ci) * t;
                        for ti in 0..t {
                            ds[ci] += gd[row + ti] * xd[row + ti];
                            db[ci] += gd[row + ti];
                        }
                    }
                }
                vec![
                    dx,
                    want[1].then(|| Tensor::from_parts(vec![c], ds)),
                    want[2].then(|| Tensor::from_parts(vec![c], db)),
                ]
            },
        ))
    }

    pub fn conv1d(&self, x: &Var, w: &Var, bias: Option<&Var>, geom: ConvGeometry) -> Result<Var> {
        let value = conv::conv1d_forward(&x.value, &w.value, bias.map(|b| &b.value), &geom)?;
        if !value.all_finite() {
            return Err(Error::NonFinite(format!(
                "convolution output (weights {:?})",
                w.value.shape()
            )));
        }
        let (xv, wv) = (x.value.clone(), w.value.clone());
        let backward = move |g: &Tensor, want: &[bool]| {
            let grads = conv::conv1d_backward(
                &xv,
                &wv,
                g,
                &geom,
                [want[0], want[1], want.get(2).copied().unwrap_or(false)],
            )
            .expect("shapes validated in forward");
            let mut out = vec![grads.input, grads.weight];
            if want.len() == 3 {
                out.push(grads.bias);
            }
            out
        };
        Ok(match bias {
            Some(b) => self.record(value, &[x, w, b], backward),
            None => self.record(value, &[x, w], backward),
        })
    }

    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = conv::matmul(&a.value, &b.value)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(value, &[a, b], move |g, want| {
            let (da, db) = conv::matmul_backward(&av, &bv, g, [want[0], want[1]]);
            vec![da, db]
        }))
    }

    pub fn slice_channels(&self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let value = x.value.slice_channels(start, len)?;
        let (b, c, t) = x.value.dims3()?;
        Ok(self.record(value, &[x], move |g, _| {
            let mut out = vec![0.0; b * c * t];
            for bi in 0..b {
                let dst = (bi * c + start) * t;
                out[dst..dst + len * t]
                    .copy_from_slice(&g.data()[bi * len * t..(bi + 1) * len * t]);
            }
            vec![Some(Tensor::from_parts(vec![b, c, t], out))]
        }))
    }

    pub fn concat_channels(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = Tensor::concat_channels(&[&a.value, &b.value])?;
        let (ca, cb) = (a.value.shape()[1], b.value.shape()[1]);
        Ok(self.record(value, &[a, b], move |g, want| {
            vec![
                want[0].then(|| g.slice_channels(0, ca).expect("valid slice")),
                want[1].then(|| g.slice_channels(ca, cb).expect("valid slice")),
            ]
        }))
    }

    pub fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let value = x.value.reshape(shape)?;
        let orig = x.value.shape().to_vec();
        Ok(self.record(value, &[x], move |g, _| {
            vec![Some(g.reshape(&orig).expect("same element count"))]
        }))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    ///
    /// Covers every permutation, shift and framing operation; the backward
    /// pass scatter-adds into the source positions.
    pub fn gather(&self, x: &Var, shape: &[usize], index: Arc<[u32]>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::Shape(format!(
                "gather index has {} entries for output shape {shape:?}",
                index.len()
            )));
        }
        let src = x.value.data();
        if let Some(bad) = index
            .iter()
            .find(|&&i| i != GATHER_ZERO && i as usize >= src.len())
        {
            return Err(Error::Shape(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let out: Vec<f64> = index
            .iter()
            .map(|&i| {
                if i == GATHER_ZERO {
                    0.0
                } else {
                    src[i as usize]
                }
            })
            .collect();
        let in_shape = x.value.shape().to_vec();
        let n_in = src.len();
        Ok(self.record(
            Tensor::from_parts(shape.to_vec(), out),
            &[x],
            move |g, _| {
                let mut dx = vec![0.0; n_in];
                for (&i, &gv) in index.iter().zip(g.data()) {
                    if i != GATHER_ZERO {
                        dx[i as usize] += gv;
                    }
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
            },
        ))
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    by_name: HashMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a tracked leaf.
    pub fn wrt(&self, v: &Var) -> Option<&Tensor> {
        v.id.and_then(|i| self.by_node.get(i))
            .and_then(|g| g.as_ref())
    }

    /// Gradient of a named parameter; zero when it did not reach the loss.
    pub fn param(&self, p: &Param) -> Tensor {
        self.by_name
            .get(&p.name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn add_tensors(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| x + y).expect("gradient shapes agree")
}

fn mul_tensors(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| x * y).expect("gradient shapes agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(g.backward(&x).is_err());
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let g = Graph::new();
        let used = Param::new("used", Tensor::full(&[2], 1.5));
        let unused = Param::new("unused", Tensor::full(&[3], 2.0));
        let u = g.param(&used);
        let _ = g.param(&unused);
        let loss = g.sum(&g.square(&u));
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.param(&unused), Tensor::zeros(&[3]));
        assert_eq!(grads.param(&used).data(), &[3.0, 3.0]);
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let g = Graph::new();
        let p = Param::new("p", Tensor::full(&[1], 2.0));
        let a = g.param(&p);
        let b = g.param(&p);
        let loss = g.sum(&g.mul(&a, &b).unwrap());
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.param(&p).data(), &[4.0]);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let g = Graph::inference();
        let p = Param::new("p", Tensor::full(&[4], 1.0));
        let v = g.param(&p);
        let y = g.exp(&v);
        assert!(!y.is_tracked());
        assert!(g.is_empty());
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut r = rng();
        let a = Tensor::uniform(&[2, 3, 5], 0.2, 1.5, &mut r);
        let b = Tensor::uniform(&[2, 3, 5], 0.2, 1.5, &mut r);
        let reports = check_gradients(
            &["a", "b"],
            &[a, b],
            |g, v| {
                let t = g.tanh(&g.mul(&v[0], &v[1])?);
                let s = g.sigmoid(&g.sub(&v[0], &v[1])?);
                let q = g.div(&g.exp(&v[1]), &g.add_scalar(&g.square(&v[0]), 1.0))?;
                let l = g.log(&g.add(&q, &g.relu(&v[1]))?);
                let c = g.clamp(&g.scale(&v[0], 3.0), -10.0, 3.0);
                let all = g.add(&g.add(&t, &s)?, &g.add(&l, &c)?)?;
                Ok(g.mean(&g.square(&all)))
            },
            1e-5,
        )
        .unwrap();
        for r in reports {
            assert!(r.max_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 4, 6], &mut r);
        let w = Tensor::randn(&[3, 2, 3], &mut r);
        let bias = Tensor::randn(&[3], &mut r);
        let s = Tensor::uniform(&[4], 0.5, 2.0, &mut r);
        let sb = Tensor::randn(&[4], &mut r);
        let m = Tensor::randn(&[6, 5], &mut r);
        let geom = ConvGeometry::new(3, 2, false).unwrap();
        let index: Arc<[u32]> = (0..48u32)
            .map(|i| {
                if i % 7 == 3 {
                    GATHER_ZERO
                } else {
                    (i * 5) % 48
                }
            })
            .collect();
        let reports = check_gradients(
            &["x", "w", "bias", "scale", "shift", "m"],
            &[x, w, bias, s, sb, m],
            |g, v| {
                let a = g.channel_affine(&v[0], &v[3], &v[4])?;
                let lo = g.slice_channels(&a, 0, 2)?;
                let hi = g.slice_channels(&a, 2, 2)?;
                let conv = g.conv1d(&lo, &v[1], Some(&v[2]), geom)?;
                let cat = g.concat_channels(&conv, &hi)?;
                let perm = g.gather(&cat, &[2, 4, 6], Arc::clone(&index))?;
                let mat = g.reshape(&perm, &[8, 6])?;
                let prod = g.matmul(&mat, &v[5])?;
                Ok(g.sum(&g.tanh(&prod)))
            },
            1e-5,
        )
        .unwrap();
        for r in reports {
            assert!(r.max_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn causal_conv_gradients_match_finite_differences() {
        let mut r = rng();
        let x = Tensor::randn(&[1, 2, 16], &mut r);
        let w = Tensor::randn(&[4, 2, 2], &mut r);
        let geom = ConvGeometry::new(2, 4, true).unwrap();
        let reports = check_gradients(
            &["x", "w"],
            &[x, w],
            |g, v| {
                let y = g.conv1d(&v[0], &v[1], None, geom)?;
                Ok(g.sum(&g.square(&y)))
            },
            1e-5,
        )
        .unwrap();
        for r in reports {
            assert!(r.max_error < 1e-4, "{r:?}");
        }
    }
}
