//! Value-preserving reshuffles: squeeze, unsqueeze and change-order.
//!
//! Squeeze deinterleaves time: even time indices fill the first `C` output
//! channels and odd indices the last `C`, so `(B, C, T) -> (B, 2C, T/2)`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

fn squeeze_index(b: usize, c: usize, t: usize) -> Arc<[u32]> {
    let half = t / 2;
    let mut idx = Vec::with_capacity(b * c * t);
    for bi in 0..b {
        for phase in 0..2 {
            for ci in 0..c {
                let row = (bi * c + ci) * t;
                idx.extend((0..half).map(|j| (row + 2 * j + phase) as u32));
            }
        }
    }
    idx.into()
}

fn unsqueeze_index(b: usize, c2: usize, half: usize) -> Arc<[u32]> {
    let c = c2 / 2;
    let t = half * 2;
    let mut idx = Vec::with_capacity(b * c2 * half);
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t {
                let phase = ti % 2;
                idx.push((((bi * c2) + phase * c + ci) * half + ti / 2) as u32);
            }
        }
    }
    idx.into()
}

pub fn squeeze(g: &Graph, x: &Var) -> Result<Var> {
    let (b, c, t) = x.value().dims3()?;
    if t % 2 != 0 {
        return Err(Error::Shape(format!(
            "squeeze needs an even time length, got {t}"
        )));
    }
    g.gather(x, &[b, 2 * c, t / 2], squeeze_index(b, c, t))
}

pub fn unsqueeze(g: &Graph, x: &Var) -> Result<Var> {
    let (b, c2, half) = x.value().dims3()?;
    if c2 % 2 != 0 {
        return Err(Error::Shape(format!(
            "unsqueeze needs an even channel count, got {c2}"
        )));
    }
    g.gather(x, &[b, c2 / 2, half * 2], unsqueeze_index(b, c2, half))
}

pub fn squeeze_tensor(x: &Tensor) -> Result<Tensor> {
    let g = Graph::inference();
    Ok(squeeze(&g, &g.constant(x.clone()))?.value().clone())
}

pub fn unsqueeze_tensor(x: &Tensor) -> Result<Tensor> {
    let g = Graph::inference();
    Ok(unsqueeze(&g, &g.constant(x.clone()))?.value().clone())
}

/// Swaps the first and second channel halves. An involution.
pub fn change_order(g: &Graph, x: &Var) -> Result<Var> {
    let (_, c, _) = x.value().dims3()?;
    if c % 2 != 0 {
        return Err(Error::Shape(format!(
            "change_order needs an even channel count, got {c}"
        )));
    }
    let lo = g.slice_channels(x, 0, c / 2)?;
    let hi = g.slice_channels(x, c / 2, c / 2)?;
    g.concat_channels(&hi, &lo)
}
