use super::{Graph, Op, Var};
use crate::error::{shape_err, Result};
use crate::flops;
use crate::tensor::Tensor;

/// Splits a shape into (outer, axis extent, inner) around `axis`.
fn split_at(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let k = *tx.shape().last().ok_or_else(|| shape_err("softmax", "rank", ">= 1", 0))?;
        let mut out = tx.clone();
        if k > 0 {
            for row in out.data_mut().chunks_exact_mut(k) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                let inv = 1.0 / s;
                row.iter_mut().for_each(|v| *v *= inv);
            }
        }
        flops::add(3 * out.len() as u64);
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub(super) fn bw_softmax(&self, x: Var, y: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let k = *y.shape().last().unwrap();
        let mut dx = Vec::with_capacity(y.len());
        for (yr, gr) in y.data().chunks_exact(k).zip(g.data().chunks_exact(k)) {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
        }
        self.accumulate(grads, x, Tensor::new(y.shape(), dx).unwrap());
    }

    /// Sum over the listed axes (dropped from the result shape).
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let rank = tx.rank();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&a) = axes.iter().find(|&&a| a >= rank) {
            return Err(shape_err("sum_axes", format!("axis {a}"), format!("< {rank}"), a));
        }
        let out_shape: Vec<usize> = (0..rank).filter(|i| !axes.contains(i)).map(|i| tx.shape()[i]).collect();
        let mut out = Tensor::zeros(&out_shape);
        let map = reduce_map(tx.shape(), &axes);
        {
            let od = out.data_mut();
            for (v, &o) in tx.data().iter().zip(&map) {
                od[o] += v;
            }
        }
        flops::add(tx.len() as u64);
        Ok(self.push(out, Op::Sum { x, axes }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.sum_axes(x, &axes)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        let s = self.sum_axes(x, axes)?;
        self.scale(s, 1.0 / count.max(1) as f64)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.mean_axes(x, &axes)
    }

    pub(super) fn bw_sum(&self, x: Var, axes: &[usize], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let tx = self.value(x);
        let map = reduce_map(tx.shape(), axes);
        let gd = g.data();
        let dx = Tensor::new(tx.shape(), map.iter().map(|&o| gd[o]).collect()).unwrap();
        self.accumulate(grads, x, dx);
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", "axis", format!("< {}", first.len()), axis));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() {
                return Err(shape_err("concat", "rank", first.len(), s.len()));
            }
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                if i != axis && a != b {
                    return Err(shape_err("concat", format!("axis {i}"), b, a));
                }
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_at(&first, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    pub(super) fn bw_concat(&self, xs: &[Var], axis: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (outer, _, inner) = split_at(g.shape(), axis);
        let total = g.shape()[axis] * inner;
        let mut base = 0;
        for &v in xs {
            let shape = self.shape(v).to_vec();
            let chunk = shape[axis] * inner;
            if self.requires_grad(v) {
                let mut d = Vec::with_capacity(outer * chunk);
                for o in 0..outer {
                    d.extend_from_slice(&g.data()[o * total + base..o * total + base + chunk]);
                }
                self.accumulate(grads, v, Tensor::new(&shape, d).unwrap());
            }
            base += chunk;
        }
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = *tx.shape().last().unwrap_or(&0);
        if start + len > c {
            return Err(shape_err("slice_last", "last axis range", format!("end <= {c}"), start + len));
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let mut out = Vec::with_capacity(tx.len() / c.max(1) * len);
        for row in tx.data().chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::SliceLast { x, start }, &[x]))
    }

    pub(super) fn bw_slice_last(&self, x: Var, start: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let tx = self.value(x);
        let c = *tx.shape().last().unwrap();
        let len = *g.shape().last().unwrap();
        let mut d = Tensor::zeros(tx.shape());
        for (row, gr) in d.data_mut().chunks_exact_mut(c).zip(g.data().chunks_exact(len)) {
            row[start..start + len].copy_from_slice(gr);
        }
        self.accumulate(grads, x, d);
    }
}

/// For every input element, the flat index of its reduced output element.
fn reduce_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut out_strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        if !axes.contains(&i) {
            out_strides[i] = s;
            s *= shape[i];
        }
    }
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(idx.iter().zip(&out_strides).map(|(a, b)| a * b).sum());
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    map
}
