//! Finite-difference oracles: gradient checks and dense Jacobian log-determinants.
//!
//! These only ever evaluate forward values, so they stay independent of the
//! reverse pass and of the closed-form log-det terms they are used to check.

use crate::error::Result;
use crate::graph::{Graph, Parameterized, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const RELATIVE_FLOOR: f64 = 1e-2;

/// One-sided slopes that disagree by more than this (relatively) mark a
/// point where the function is not differentiable, such as a ReLU hinge
/// within `h` of the probe. Those entries are skipped rather than scored.
pub const KINK_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub label: String,
    pub checked: usize,
    /// Entries skipped because a kink lies within the probe interval.
    pub kinks: usize,
    pub max_error: f64,
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Accumulates central-difference comparisons for one tensor.
struct Probe {
    checked: usize,
    kinks: usize,
    max_error: f64,
}

impl Probe {
    fn new() -> Self {
        Probe {
            checked: 0,
            kinks: 0,
            max_error: 0.0,
        }
    }

    fn record(&mut self, analytic: f64, up: f64, centre: f64, down: f64, h: f64) {
        let forward = (up - centre) / h;
        let backward = (centre - down) / h;
        if relative_error(forward, backward) > KINK_THRESHOLD {
            self.kinks += 1;
            return;
        }
        self.checked += 1;
        self.max_error = self
            .max_error
            .max(relative_error(analytic, (up - down) / (2.0 * h)));
    }

    fn finish(self, label: String) -> GradCheck {
        GradCheck {
            label,
            checked: self.checked,
            kinks: self.kinks,
            max_error: self.max_error,
        }
    }
}

/// Compares reverse-mode gradients of a scalar function with central differences.
///
/// `f` receives one tracked leaf per input tensor and returns a scalar.
pub fn check_gradients<F>(
    labels: &[&str],
    inputs: &[Tensor],
    f: F,
    h: f64,
) -> Result<Vec<GradCheck>>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let loss = f(&graph, &vars)?;
    let grads = graph.backward(&loss)?;
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let g = Graph::inference();
        let vs: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vs)?.item())
    };
    let centre = eval(inputs)?;
    let mut reports = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(&vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut probe = Probe::new();
        for j in 0..input.len() {
            let mut perturbed: Vec<Tensor> = inputs.to_vec();
            let mut data = input.to_vec();
            data[j] = input.data()[j] + h;
            perturbed[i] = Tensor::new(input.shape(), data.clone())?;
            let up = eval(&perturbed)?;
            data[j] = input.data()[j] - h;
            perturbed[i] = Tensor::new(input.shape(), data)?;
            let down = eval(&perturbed)?;
            probe.record(analytic.data()[j], up, centre, down, h);
        }
        let label = labels
            .get(i)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("input{i}"));
        reports.push(probe.finish(label));
    }
    Ok(reports)
}

/// Central-difference check of every parameter of `model`.
///
/// `f` builds the scalar loss, binding parameters as trainable when asked.
/// At most `max_per_param` evenly spaced entries of each parameter are
/// probed, which bounds the cost on wide layers.
pub fn check_param_gradients<M, F>(
    model: &mut M,
    f: F,
    h: f64,
    max_per_param: usize,
) -> Result<Vec<GradCheck>>
where
    M: Parameterized,
    F: Fn(&Graph, &M, bool) -> Result<Var>,
{
    let graph = Graph::new();
    let loss = f(&graph, model, true)?;
    let grads = graph.backward(&loss)?;
    let analytic: Vec<Tensor> = model.params().iter().map(|p| grads.param(p)).collect();
    let eval = |m: &M| -> Result<f64> { Ok(f(&Graph::inference(), m, false)?.item()) };
    let centre = eval(model)?;
    let mut reports = Vec::new();
    for (pi, grad) in analytic.iter().enumerate() {
        let (label, original) = {
            let p = model.params()[pi];
            (p.name.clone(), p.value.clone())
        };
        let n = original.len();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        let mut probe = Probe::new();
        for j in (0..n).step_by(stride) {
            let mut data = original.to_vec();
            data[j] += h;
            model.params_mut()[pi].value = Tensor::new(original.shape(), data.clone())?;
            let up = eval(model)?;
            data[j] -= 2.0 * h;
            model.params_mut()[pi].value = Tensor::new(original.shape(), data)?;
            let down = eval(model)?;
            probe.record(grad.data()[j], up, centre, down, h);
        }
        model.params_mut()[pi].value = original;
        reports.push(probe.finish(label));
    }
    Ok(reports)
}

/// Dense Jacobian `J[i][j] = ∂f_i/∂x_j` by central differences.
pub fn jacobian<F>(x: &Tensor, f: F, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let n = x.len();
    let mut jac = vec![vec![0.0; n]; f(x)?.len()];
    for j in 0..n {
        let mut data = x.to_vec();
        data[j] += h;
        let up = f(&Tensor::new(x.shape(), data.clone())?)?;
        data[j] -= 2.0 * h;
        let down = f(&Tensor::new(x.shape(), data)?)?;
        for (i, row) in jac.iter_mut().enumerate() {
            row[j] = (up.data()[i] - down.data()[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// `log |det A|` by LU decomposition with partial pivoting.
pub fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty column");
        if a[pivot][col] == 0.0 {
            return f64::NEG_INFINITY;
        }
        a.swap(col, pivot);
        acc += a[col][col].abs().ln();
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor != 0.0 {
                for k in col..n {
                    a[row][k] -= factor * a[col][k];
                }
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let a = Tensor::new(&[1], vec![2.0]).unwrap();
        let b = Tensor::new(&[1], vec![3.0]).unwrap();
        let g = Graph::new();
        let (av, bv) = (g.leaf(a), g.leaf(b));
        let loss = g.sum(&g.mul(&av, &bv).unwrap());
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&av).unwrap().data(), &[3.0]);
        assert_eq!(grads.wrt(&bv).unwrap().data(), &[2.0]);
    }

    #[test]
    fn log_det_of_known_matrices() {
        let diag = vec![vec![2.0, 0.0], vec![0.0, 0.5]];
        assert!(log_abs_det(diag).abs() < 1e-15);
        let m = vec![
            vec![0.0, 3.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, -2.0],
        ];
        assert!((log_abs_det(m) - 6f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn kinks_are_skipped_not_scored() {
        // relu(x) probed exactly at its hinge, next to a smooth entry.
        let x = Tensor::new(&[2], vec![0.0, 0.7]).unwrap();
        let r = check_gradients(&["x"], &[x], |g, v| Ok(g.sum(&g.relu(&v[0]))), 1e-6).unwrap();
        assert_eq!((r[0].checked, r[0].kinks), (1, 1));
        assert!(r[0].max_error < 1e-9);
    }

    #[test]
    fn wrong_gradients_are_caught() {
        // x² is smooth at 0.5; a gradient off by a factor of two must show up.
        let x = Tensor::new(&[1], vec![0.5]).unwrap();
        let r = check_gradients(
            &["x"],
            &[x],
            |g, v| Ok(g.sum(&g.scale(&g.square(&v[0]), 1.0))),
            1e-6,
        )
        .unwrap();
        assert!(r[0].max_error < 1e-8);
        let r = check_gradients(
            &["x"],
            &[Tensor::new(&[1], vec![0.5]).unwrap()],
            |g, v| {
                // Value x², gradient that of 2x² via a detached rescale.
                let sq = g.square(&v[0]);
                Ok(g.sum(&g.add(&sq, &g.sub(&sq, &g.constant(sq.value().clone()))?)?))
            },
            1e-6,
        )
        .unwrap();
        assert!(r[0].max_error > 0.3, "{}", r[0].max_error);
    }
}
