//! Gather and per-window contraction primitives for sparse cross-attention.

use super::{Graph, Op, Var};
use crate::error::{shape_err, Result};
use crate::flops;
use crate::tensor::Tensor;

impl Graph {
    /// Rows of `x` [R, C] at `idx`, giving [idx.len(), C].
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let [r, c] = tx.shape()[..] else {
            return Err(shape_err("gather_rows", "rank", "[rows, C]", tx.shape()));
        };
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", "row index (axis 0)", format!("< {r}"), bad));
        }
        let xd = tx.data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(&[idx.len(), c], out)?;
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    pub(super) fn bw_gather_rows(&self, x: Var, idx: &[usize], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let shape = self.shape(x);
        let c = shape[1];
        let mut dx = Tensor::zeros(shape);
        let d = dx.data_mut();
        for (gr, &i) in g.data().chunks_exact(c).zip(idx) {
            for (a, b) in d[i * c..(i + 1) * c].iter_mut().zip(gr) {
                *a += b;
            }
        }
        self.accumulate(grads, x, dx);
    }

    fn window_dims(&self, q: Var, k: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let (sq, sk) = (self.shape(q), self.shape(k));
        let [n, c] = sq[..] else {
            return Err(shape_err(op, "rank of lhs", "[N, C]", sq));
        };
        let [n2, p, c2] = sk[..] else {
            return Err(shape_err(op, "rank of rhs", "[N, P, C]", sk));
        };
        if n != n2 {
            return Err(shape_err(op, "window count (axis 0)", n, n2));
        }
        if c != c2 {
            return Err(shape_err(op, "channels (last axis)", c, c2));
        }
        Ok((n, p, c))
    }

    /// Per-window channel contraction: `q` [N, C], `k` [N, P, C] → [N, P]
    /// with out[n, p] = Σ_c q[n, c]·k[n, p, c].
    pub fn window_dot(&mut self, q: Var, k: Var) -> Result<Var> {
        let (n, p, c) = self.window_dims(q, k, "window_dot")?;
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let qi = &qd[i * c..(i + 1) * c];
            for j in 0..p {
                let kj = &kd[(i * p + j) * c..(i * p + j + 1) * c];
                out[i * p + j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
            }
        }
        flops::add((n * p * c) as u64);
        let t = Tensor::new(&[n, p], out)?;
        Ok(self.push(t, Op::WindowDot { q, k }, &[q, k]))
    }

    pub(super) fn bw_window_dot(&self, q: Var, k: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (n, p, c) = self.window_dims(q, k, "window_dot").unwrap();
        let (qd, kd, gd) = (self.value(q).data(), self.value(k).data(), g.data());
        if self.requires_grad(q) {
            let mut dq = vec![0.0; n * c];
            for i in 0..n {
                let dqi = &mut dq[i * c..(i + 1) * c];
                for j in 0..p {
                    let gv = gd[i * p + j];
                    for (a, b) in dqi.iter_mut().zip(&kd[(i * p + j) * c..(i * p + j + 1) * c]) {
                        *a += gv * b;
                    }
                }
            }
            self.accumulate(grads, q, Tensor::new(&[n, c], dq).unwrap());
        }
        if self.requires_grad(k) {
            let mut dk = vec![0.0; n * p * c];
            for i in 0..n {
                let qi = &qd[i * c..(i + 1) * c];
                for j in 0..p {
                    let gv = gd[i * p + j];
                    for (a, b) in dk[(i * p + j) * c..(i * p + j + 1) * c].iter_mut().zip(qi) {
                        *a = gv * b;
                    }
                }
            }
            self.accumulate(grads, k, Tensor::new(&[n, p, c], dk).unwrap());
        }
    }

    /// Divides each last-axis row by its sum, guarded below by `floor`:
    /// y = w / max(Σ w, floor).
    pub fn normalize_last(&mut self, w: Var, floor: f64) -> Result<Var> {
        let tw = self.value(w);
        let p = *tw.shape().last().ok_or_else(|| shape_err("normalize_last", "rank", ">= 1", 0))?;
        let mut out = tw.clone();
        for row in out.data_mut().chunks_exact_mut(p) {
            let s: f64 = row.iter().sum();
            let inv = 1.0 / s.max(floor);
            row.iter_mut().for_each(|v| *v *= inv);
        }
        flops::add(2 * out.len() as u64);
        Ok(self.push(out, Op::NormalizeLast { w, floor }, &[w]))
    }

    pub(super) fn bw_normalize_last(&self, w: Var, floor: f64, y: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let tw = self.value(w);
        let p = *tw.shape().last().unwrap();
        let mut dw = Vec::with_capacity(tw.len());
        for ((wr, yr), gr) in tw.data().chunks_exact(p).zip(y.data().chunks_exact(p)).zip(g.data().chunks_exact(p)) {
            let s: f64 = wr.iter().sum();
            if s > floor {
                let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                dw.extend(gr.iter().map(|gv| (gv - gy) / s));
            } else {
                dw.extend(gr.iter().map(|gv| gv / floor));
            }
        }
        self.accumulate(grads, w, Tensor::new(tw.shape(), dw).unwrap());
    }

    /// Weighted window sum: `w` [N, P], `v` [N, P, C] → [N, C].
    pub fn window_combine(&mut self, w: Var, v: Var) -> Result<Var> {
        let (sw, sv) = (self.shape(w).to_vec(), self.shape(v).to_vec());
        let [n, p] = sw[..] else {
            return Err(shape_err("window_combine", "rank of weights", "[N, P]", &sw));
        };
        let [n2, p2, c] = sv[..] else {
            return Err(shape_err("window_combine", "rank of values", "[N, P, C]", &sv));
        };
        if n != n2 {
            return Err(shape_err("window_combine", "window count (axis 0)", n, n2));
        }
        if p != p2 {
            return Err(shape_err("window_combine", "points per window (axis 1)", p, p2));
        }
        let (wd, vd) = (self.value(w).data(), self.value(v).data());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let oi = &mut out[i * c..(i + 1) * c];
            for j in 0..p {
                let wv = wd[i * p + j];
                for (o, x) in oi.iter_mut().zip(&vd[(i * p + j) * c..(i * p + j + 1) * c]) {
                    *o += wv * x;
                }
            }
        }
        flops::add((n * p * c) as u64);
        let t = Tensor::new(&[n, c], out)?;
        Ok(self.push(t, Op::WindowCombine { w, v }, &[w, v]))
    }

    pub(super) fn bw_window_combine(&self, w: Var, v: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let sv = self.shape(v);
        let (n, p, c) = (sv[0], sv[1], sv[2]);
        let (wd, vd, gd) = (self.value(w).data(), self.value(v).data(), g.data());
        if self.requires_grad(w) {
            let mut dw = vec![0.0; n * p];
            for i in 0..n {
                let gi = &gd[i * c..(i + 1) * c];
                for j in 0..p {
                    dw[i * p + j] = gi.iter().zip(&vd[(i * p + j) * c..(i * p + j + 1) * c]).map(|(a, b)| a * b).sum();
                }
            }
            self.accumulate(grads, w, Tensor::new(&[n, p], dw).unwrap());
        }
        if self.requires_grad(v) {
            let mut dv = vec![0.0; n * p * c];
            for i in 0..n {
                let gi = &gd[i * c..(i + 1) * c];
                for j in 0..p {
                    let wv = wd[i * p + j];
                    for (a, b) in dv[(i * p + j) * c..(i * p + j + 1) * c].iter_mut().zip(gi) {
                        *a = wv * b;
                    }
                }
            }
            self.accumulate(grads, v, Tensor::new(&[n, p, c], dv).unwrap());
        }
    }
}
