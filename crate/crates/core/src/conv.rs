//! Dilated 1-D convolution kernels over `(batch, channels, time)` tensors.
//!
//! Each kernel tap is one strided GEMM over the valid time range; edges are
//! zero padded so the output keeps the input's time length. In causal mode
//! all taps look backwards (`t - (K-1)·d ..= t`); otherwise the window is
//! centred on `t` with half-width `(K-1)/2 · d`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a dilated convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub dilation: usize,
    pub causal: bool,
}

impl ConvGeometry {
    pub fn new(kernel: usize, dilation: usize, causal: bool) -> Result<Self> {
        if kernel == 0 {
            return Err(Error::InvalidArgument(
                "kernel size must be positive".into(),
            ));
        }
        if dilation == 0 {
            return Err(Error::InvalidArgument("dilation must be at least 1".into()));
        }
        if !causal && kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "non-causal convolution needs an odd kernel size, got {kernel}"
            )));
        }
        Ok(ConvGeometry {
            kernel,
            dilation,
            causal,
        })
    }

    /// Input offset (relative to the output index) read by tap `k`.
    pub fn tap_offset(&self, k: usize) -> isize {
        let anchor = if self.causal {
            self.kernel - 1
        } else {
            (self.kernel - 1) / 2
        };
        (k as isize - anchor as isize) * self.dilation as isize
    }

    /// Number of past samples (inclusive of `t`) an output can see.
    pub fn receptive_field(&self) -> usize {
        (self.kernel - 1) * self.dilation + 1
    }

    /// Output index range whose tap `k` stays inside `[0, t_len)`.
    fn valid_range(&self, k: usize, t_len: usize) -> Option<(usize, usize, isize)> {
        let off = self.tap_offset(k);
        let lo = (-off).max(0) as usize;
        let hi = (t_len as isize - off).min(t_len as isize);
        if hi <= lo as isize {
            None
        } else {
            Some((lo, hi as usize, off))
        }
    }
}

/// `C[m×n] += A[m×k] · B[k×n]` over arbitrary strides.
///
/// Safety: every pointer/stride combination must address memory inside the
/// respective buffer and `c` must not alias `a` or `b`.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: *const f64,
    rsa: isize,
    csa: isize,
    b: *const f64,
    rsb: isize,
    csb: isize,
    c: *mut f64,
    rsc: isize,
    csc: isize,
) {
    matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 1.0, c, rsc, csc);
}

fn check_shapes(
    x: &Tensor,
    w: &Tensor,
    geom: &ConvGeometry,
) -> Result<(usize, usize, usize, usize)> {
    let (b, cin, t) = x.dims3()?;
    let (cout, wcin, k) = match w.shape()[..] {
        [o, i, k] => (o, i, k),
        _ => {
            return Err(Error::Shape(format!(
                "conv weights must be (out, in, kernel), got {:?}",
                w.shape()
            )))
        }
    };
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv input has {cin} channels but weights expect {wcin}"
        )));
    }
    if k != geom.kernel {
        return Err(Error::Shape(format!(
            "conv weights have kernel {k} but geometry says {}",
            geom.kernel
        )));
    }
    Ok((b, cin, cout, t))
}

pub fn conv1d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    geom: &ConvGeometry,
) -> Result<Tensor> {
    let (b, cin, cout, t) = check_shapes(x, w, geom)?;
    if let Some(bias) = bias {
        if bias.len() != cout {
            return Err(Error::Shape(format!(
                "conv bias has {} entries for {cout} output channels",
                bias.len()
            )));
        }
    }
    let k_size = geom.kernel;
    let mut out = vec![0.0; b * cout * t];
    if let Some(bias) = bias {
        for bi in 0..b {
            for (co, &bv) in bias.data().iter().enumerate() {
                out[(bi * cout + co) * t..(bi * cout + co + 1) * t].fill(bv);
            }
        }
    }
    let xd = x.data();
    let wd = w.data();
    for bi in 0..b {
        for k in 0..k_size {
            let Some((lo, hi, off)) = geom.valid_range(k, t) else {
                continue;
            };
            let n = hi - lo;
            // SAFETY: rows/cols stay within the (b, c, t) blocks; out is distinct.
            unsafe {
                gemm_acc(
                    cout,
                    cin,
                    n,
                    wd.as_ptr().add(k),
                    (cin * k_size) as isize,
                    k_size as isize,
                    xd.as_ptr().add(bi * cin * t + (lo as isize + off) as usize),
                    t as isize,
                    1,
                    out.as_mut_ptr().add(bi * cout * t + lo),
                    t as isize,
                    1,
                );
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, cout, t], out))
}

/// Gradients of a convolution with respect to its input, weights and bias.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    geom: &ConvGeometry,
    want: [bool; 3],
) -> Result<ConvGrads> {
    let (b, cin, cout, t) = check_shapes(x, w, geom)?;
    let k_size = geom.kernel;
    let xd = x.data();
    let wd = w.data();
    let gd = grad_out.data();
    let mut dx = want[0].then(|| vec![0.0; b * cin * t]);
    let mut dw = want[1].then(|| vec![0.0; cout * cin * k_size]);
    for bi in 0..b {
        for k in 0..k_size {
            let Some((lo, hi, off)) = geom.valid_range(k, t) else {
                continue;
            };
            let n = hi - lo;
            let x_start = (lo as isize + off) as usize;
            if let Some(dx) = dx.as_mut() {
                // dX[:, lo+off..hi+off] += W_kᵀ · dY[:, lo..hi]
                unsafe {
                    gemm_acc(
                        cin,
                        cout,
                        n,
                        wd.as_ptr().add(k),
                        k_size as isize,
                        (cin * k_size) as isize,
                        gd.as_ptr().add(bi * cout * t + lo),
                        t as isize,
                        1,
                        dx.as_mut_ptr().add(bi * cin * t + x_start),
                        t as isize,
                        1,
                    );
                }
            }
            if let Some(dw) = dw.as_mut() {
                // dW_k += dY[:, lo..hi] · X[:, lo+off..hi+off]ᵀ
                unsafe {
                    gemm_acc(
                        cout,
                        n,
                        cin,
                        gd.as_ptr().add(bi * cout * t + lo),
                        t as isize,
                        1,
                        xd.as_ptr().add(bi * cin * t + x_start),
                        1,
                        t as isize,
                        dw.as_mut_ptr().add(k),
                        (cin * k_size) as isize,
                        k_size as isize,
                    );
                }
            }
        }
    }
    let db = want[2].then(|| {
        let mut db = vec![0.0; cout];
        for bi in 0..b {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += gd[(bi * cout + co) * t..(bi * cout + co + 1) * t]
                    .iter()
                    .sum::<f64>();
            }
        }
        Tensor::from_parts(vec![cout], db)
    });
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::from_parts(vec![b, cin, t], d)),
        weight: dw.map(|d| Tensor::from_parts(vec![cout, cin, k_size], d)),
        bias: db,
    })
}

/// `A[m×k] · B[k×n]` for row-major 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a)?;
    let (k2, n) = dims2(b)?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {:?} · {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    unsafe {
        gemm_acc(
            m,
            k,
            n,
            a.data().as_ptr(),
            k as isize,
            1,
            b.data().as_ptr(),
            n as isize,
            1,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Gradients of `A·B` given `dC`: `(dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    grad: &Tensor,
    want: [bool; 2],
) -> (Option<Tensor>, Option<Tensor>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let da = want[0].then(|| {
        let mut da = vec![0.0; m * k];
        unsafe {
            gemm_acc(
                m,
                n,
                k,
                grad.data().as_ptr(),
                n as isize,
                1,
                b.data().as_ptr(),
                1,
                n as isize,
                da.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        Tensor::from_parts(vec![m, k], da)
    });
    let db = want[1].then(|| {
        let mut db = vec![0.0; k * n];
        unsafe {
            gemm_acc(
                k,
                m,
                n,
                a.data().as_ptr(),
                1,
                k as isize,
                grad.data().as_ptr(),
                n as isize,
                1,
                db.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Tensor::from_parts(vec![k, n], db)
    });
    (da, db)
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape()[..] {
        [m, n] => Ok((m, n)),
        _ => Err(Error::Shape(format!(
            "expected a matrix, got {:?}",
            t.shape()
        ))),
    }
}
