//! Row normalization, segment means and the picked negative log-likelihood
//! used by the segmentation and prototype losses.

use super::{Graph, Op, Var};
use crate::error::{shape_err, Result};
use crate::flops;
use crate::tensor::Tensor;

fn rows(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, "rank", "[rows, C]", s)),
    }
}

impl Graph {
    /// Unit-L2 rows; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = rows(self.value(x), "l2_normalize_rows")?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        flops::add(2 * out.len() as u64);
        Ok(self.push(out, Op::L2NormalizeRows(x), &[x]))
    }

    pub(super) fn bw_l2_normalize_rows(&self, x: Var, y: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let tx = self.value(x);
        let c = tx.shape()[1];
        let mut dx = Vec::with_capacity(tx.len());
        for ((xr, yr), gr) in tx.data().chunks_exact(c).zip(y.data().chunks_exact(c)).zip(g.data().chunks_exact(c)) {
            let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                dx.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * yg) / n));
            } else {
                dx.extend(std::iter::repeat_n(0.0, c));
            }
        }
        self.accumulate(grads, x, Tensor::new(tx.shape(), dx).unwrap());
    }

    /// Mean of the rows of `x` [R, C] assigned to each of `n_segments`
    /// segments; rows with `None` are ignored and empty segments are zero.
    pub fn segment_mean(&mut self, x: Var, seg: &[Option<usize>], n_segments: usize) -> Result<Var> {
        let (r, c) = rows(self.value(x), "segment_mean")?;
        if seg.len() != r {
            return Err(shape_err("segment_mean", "segment labels vs rows (axis 0)", r, seg.len()));
        }
        if let Some(bad) = seg.iter().flatten().find(|&&s| s >= n_segments) {
            return Err(shape_err("segment_mean", "segment id", format!("< {n_segments}"), bad));
        }
        let mut counts = vec![0usize; n_segments];
        let mut out = vec![0.0; n_segments * c];
        for (row, s) in self.value(x).data().chunks_exact(c).zip(seg) {
            if let Some(s) = *s {
                counts[s] += 1;
                for (a, b) in out[s * c..(s + 1) * c].iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        for (s, &n) in counts.iter().enumerate() {
            if n > 0 {
                out[s * c..(s + 1) * c].iter_mut().for_each(|v| *v /= n as f64);
            }
        }
        flops::add((r * c) as u64);
        let t = Tensor::new(&[n_segments, c], out)?;
        Ok(self.push(
            t,
            Op::SegmentMean {
                x,
                seg: seg.to_vec(),
                counts,
            },
            &[x],
        ))
    }

    pub(super) fn bw_segment_mean(
        &self,
        x: Var,
        seg: &[Option<usize>],
        counts: &[usize],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let tx = self.value(x);
        let c = tx.shape()[1];
        let gd = g.data();
        let mut dx = vec![0.0; tx.len()];
        for (row, s) in dx.chunks_exact_mut(c).zip(seg) {
            if let Some(s) = *s {
                let inv = 1.0 / counts[s] as f64;
                for (a, b) in row.iter_mut().zip(&gd[s * c..(s + 1) * c]) {
                    *a = b * inv;
                }
            }
        }
        self.accumulate(grads, x, Tensor::new(tx.shape(), dx).unwrap());
    }

    /// Σ over rows with a target of −ln(max(p[row, target], floor)), divided
    /// by `denom`. `probs` is [R, K].
    pub fn nll_pick(&mut self, probs: Var, targets: &[Option<usize>], floor: f64, denom: f64) -> Result<Var> {
        let (r, k) = rows(self.value(probs), "nll_pick")?;
        if targets.len() != r {
            return Err(shape_err("nll_pick", "targets vs rows (axis 0)", r, targets.len()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= k) {
            return Err(shape_err("nll_pick", "target class", format!("< {k}"), bad));
        }
        let pd = self.value(probs).data();
        let total: f64 = targets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|t| -pd[i * k + t].max(floor).ln()))
            .sum();
        flops::add(r as u64);
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::NllPick {
                probs,
                targets: targets.to_vec(),
                floor,
                denom,
            },
            &[probs],
        ))
    }

    pub(super) fn bw_nll_pick(
        &self,
        probs: Var,
        targets: &[Option<usize>],
        floor: f64,
        denom: f64,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let tp = self.value(probs);
        let k = tp.shape()[1];
        let gv = g.data()[0];
        let mut d = Tensor::zeros(tp.shape());
        {
            let dd = d.data_mut();
            for (i, t) in targets.iter().enumerate() {
                if let Some(t) = *t {
                    let p = tp.data()[i * k + t];
                    if p > floor {
                        dd[i * k + t] = -gv / (p * denom);
                    }
                }
            }
        }
        self.accumulate(grads, probs, d);
    }
}
