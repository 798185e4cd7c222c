//! Independent, deliberately slow reference implementations.
//!
//! Nothing here calls into the graph kernels: every routine is plain loops
//! over slices so a bug in the optimized path cannot hide in its own check.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn phi(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// Dense cross-attention restricted to the selected reference pixels.
///
/// `q` is [N, C] (already projected), `k` and `v` are [N_ref, C], and
/// `selected[i]` lists the reference rows query `i` attends to (repeats
/// count with multiplicity). The full N × N_ref weight row φ(q_i)·φ(k_j) is
/// built for every query, masked to the selection, renormalized and applied
/// to all of `v`.
pub fn dense_masked_attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor, selected: &[Vec<usize>]) -> Tensor {
    let (n, c) = (q.shape()[0], q.shape()[1]);
    let nr = k.shape()[0];
    let qd: Vec<f64> = q.data().iter().map(|&x| phi(x)).collect();
    let kd: Vec<f64> = k.data().iter().map(|&x| phi(x)).collect();
    let vd = v.data();
    let mut out = vec![0.0; n * c];
    let mut row = vec![0.0; nr];
    let mut mask = vec![0.0; nr];
    for i in 0..n {
        for j in 0..nr {
            let mut s = 0.0;
            for ch in 0..c {
                s += qd[i * c + ch] * kd[j * c + ch];
            }
            row[j] = s;
        }
        mask.iter_mut().for_each(|m| *m = 0.0);
        for &j in &selected[i] {
            mask[j] += 1.0;
        }
        let mut total = 0.0;
        for j in 0..nr {
            row[j] *= mask[j];
            total += row[j];
        }
        for j in 0..nr {
            let wgt = row[j] / total;
            for ch in 0..c {
                out[i * c + ch] += wgt * vd[j * c + ch];
            }
        }
    }
    Tensor::new(&[n, c], out).unwrap()
}

/// Dense kernelized (φ = elu + 1) self- or cross-attention with the full
/// N × N_ref weight matrix: O_i = Σ_j (φ(q_i)·φ(k_j)) v_j / Σ_j φ(q_i)·φ(k_j).
pub fn dense_kernelized_attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let (n, c) = (q.shape()[0], q.shape()[1]);
    let nr = k.shape()[0];
    let qd: Vec<f64> = q.data().iter().map(|&x| phi(x)).collect();
    let kd: Vec<f64> = k.data().iter().map(|&x| phi(x)).collect();
    let vd = v.data();
    let mut out = vec![0.0; n * c];
    let mut row = vec![0.0; nr];
    for i in 0..n {
        let mut total = 0.0;
        for j in 0..nr {
            let mut s = 0.0;
            for ch in 0..c {
                s += qd[i * c + ch] * kd[j * c + ch];
            }
            row[j] = s;
            total += s;
        }
        for j in 0..nr {
            let wgt = row[j] / total;
            for ch in 0..c {
                out[i * c + ch] += wgt * vd[j * c + ch];
            }
        }
    }
    Tensor::new(&[n, c], out).unwrap()
}

/// Central differences (f(x + h·e_i) − f(x − h·e_i)) / 2h for every coordinate.
pub fn finite_diff_gradient(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}: {fp}, {fm}")));
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// max |a − b| / max(max |a|, max |b|, 1e-8).
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / a.max_abs().max(b.max_abs()).max(1e-8)
}

/// Predicted cost of each component in multiply-accumulate units.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct FlopModel {
    /// Static aggregation over the three frames: 3(NDC + NC²).
    pub ssea: u128,
    /// Two-stage dynamic aggregation: 3NDC + 4NPC².
    pub dssa: u128,
    /// 6NDC + 3NC² + 4NPC².
    pub total: u128,
    /// Vanilla cross-frame transformer: 3N³C³.
    pub dense_transformer: u128,
}

pub fn flop_model(n: u64, c: u64, p: u64, d: u64) -> FlopModel {
    let (n, c, p, d) = (n as u128, c as u128, p as u128, d as u128);
    let ssea = 3 * (n * d * c + n * c * c);
    let dssa = 3 * n * d * c + 4 * n * p * c * c;
    FlopModel {
        ssea,
        dssa,
        total: 6 * n * d * c + 3 * n * c * c + 4 * n * p * c * c,
        dense_transformer: 3 * n.pow(3) * c.pow(3),
    }
}

/// Padding rule for [`conv2d_reference`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Out-of-range reads take the nearest border pixel.
    Replicate,
}

/// Direct six-loop convolution: x [H, W, Cin], k [k, k, Cin, Cout].
pub fn conv2d_reference(x: &Tensor, k: &Tensor, stride: (usize, usize), pad: (usize, usize), mode: Padding) -> Tensor {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ks, cout) = (k.shape()[0], k.shape()[3]);
    let ho = (h + 2 * pad.0 - ks) / stride.0 + 1;
    let wo = (w + 2 * pad.1 - ks) / stride.1 + 1;
    let mut out = Tensor::zeros(&[ho, wo, cout]);
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = 0.0;
                for ky in 0..ks {
                    for kx in 0..ks {
                        for ci in 0..cin {
                            let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                            let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                            let inside = iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize;
                            let xv = match (inside, mode) {
                                (true, _) => x.at(&[iy as usize, ix as usize, ci]),
                                (false, Padding::Zero) => 0.0,
                                (false, Padding::Replicate) => {
                                    let cy = iy.clamp(0, h as isize - 1) as usize;
                                    let cx = ix.clamp(0, w as isize - 1) as usize;
                                    x.at(&[cy, cx, ci])
                                }
                            };
                            acc += xv * k.at(&[ky, kx, ci, co]);
                        }
                    }
                }
                out.set(&[oy, ox, co], acc);
            }
        }
    }
    out
}

/// Triple-loop [n, k] · [k, m].
pub fn matmul_reference(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a.at(&[i, t]) * b.at(&[t, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

/// Scalar bilinear read of channel `ch` at fractional (r, c), border clamped.
pub fn bilinear_reference(x: &Tensor, r: f64, c: f64, ch: usize) -> f64 {
    let (h, w) = (x.shape()[0] as isize, x.shape()[1] as isize);
    let read = |i: isize, j: isize| x.at(&[i.clamp(0, h - 1) as usize, j.clamp(0, w - 1) as usize, ch]);
    let (r0, c0) = (r.floor(), c.floor());
    let (a, b) = (r - r0, c - c0);
    let (i, j) = (r0 as isize, c0 as isize);
    (1.0 - a) * (1.0 - b) * read(i, j) + (1.0 - a) * b * read(i, j + 1) + a * (1.0 - b) * read(i + 1, j) + a * b * read(i + 1, j + 1)
}
