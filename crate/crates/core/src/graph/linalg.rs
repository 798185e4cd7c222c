use super::{Graph, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::flops;
use crate::tensor::Tensor;

/// `c = op(a) · op(b) + beta · c` with `op(a)` of shape [m, k] and `op(b)`
/// of shape [k, n]; `a_t`/`b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents and strides describe slices checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, "rank", "[rows, cols]", s)),
    }
}

impl Graph {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// [n, k] · [k, m] → [n, m].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, m) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", "axis 1 of lhs vs axis 0 of rhs", k, k2));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        flops::add((n * k * m) as u64);
        let t = Tensor::new(&[n, m], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub(super) fn bw_matmul(&self, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = (ta.shape()[0], ta.shape()[1]);
        let m = tb.shape()[1];
        if self.requires_grad(a) {
            let mut da = vec![0.0; n * k];
            gemm(n, m, k, g.data(), false, tb.data(), true, 0.0, &mut da);
            self.accumulate(grads, a, Tensor::new(&[n, k], da).unwrap());
        }
        if self.requires_grad(b) {
            let mut db = vec![0.0; k * m];
            gemm(k, n, m, ta.data(), true, g.data(), false, 0.0, &mut db);
            self.accumulate(grads, b, Tensor::new(&[k, m], db).unwrap());
        }
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = matrix_dims(tx, "transpose")?;
        let d = tx.data();
        let out = Tensor::from_fn(&[c, r], |i| d[(i % r) * c + i / r]);
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub(super) fn bw_transpose(&self, x: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (c, r) = (g.shape()[0], g.shape()[1]);
        let d = g.data();
        let t = Tensor::from_fn(&[r, c], |i| d[(i % c) * r + i / c]);
        self.accumulate(grads, x, t);
    }

    /// Adds `b` (length C) to every length-C row along the last axis of `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = *tx.shape().last().unwrap_or(&0);
        if tb.rank() != 1 || tb.len() != c {
            return Err(shape_err("add_row_bias", "bias length vs last axis", c, tb.shape()));
        }
        let bd = tb.data();
        let mut out = tx.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, bv) in row.iter_mut().zip(bd) {
                *o += bv;
            }
        }
        flops::add(out.len() as u64);
        Ok(self.push(out, Op::AddRowBias(x, b), &[x, b]))
    }

    pub(super) fn bw_add_row_bias(&self, x: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        if self.requires_grad(x) {
            self.accumulate(grads, x, g.clone());
        }
        if self.requires_grad(b) {
            let c = self.value(b).len();
            let mut db = vec![0.0; c];
            for row in g.data().chunks_exact(c) {
                for (d, gv) in db.iter_mut().zip(row) {
                    *d += gv;
                }
            }
            self.accumulate(grads, b, Tensor::new(&[c], db).unwrap());
        }
    }

    /// Divides each row of `x` [R, C] by the matching entry of `d` (R values).
    pub fn div_rows(&mut self, x: Var, d: Var) -> Result<Var> {
        let (tx, td) = (self.value(x), self.value(d));
        let (r, c) = matrix_dims(tx, "div_rows")?;
        if td.len() != r {
            return Err(shape_err("div_rows", "divisor length vs axis 0", r, td.shape()));
        }
        if let Some(z) = td.data().iter().position(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div_rows",
                msg: format!("zero divisor at row {z}"),
            });
        }
        let mut out = tx.clone();
        for (row, &dv) in out.data_mut().chunks_exact_mut(c).zip(td.data()) {
            let inv = 1.0 / dv;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        flops::add(out.len() as u64);
        Ok(self.push(out, Op::DivRows(x, d), &[x, d]))
    }

    pub(super) fn bw_div_rows(&self, x: Var, d: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (tx, td) = (self.value(x), self.value(d));
        let c = tx.shape()[1];
        if self.requires_grad(x) {
            let mut dx = g.clone();
            for (row, &dv) in dx.data_mut().chunks_exact_mut(c).zip(td.data()) {
                row.iter_mut().for_each(|v| *v /= dv);
            }
            self.accumulate(grads, x, dx);
        }
        if self.requires_grad(d) {
            let dd: Vec<f64> = g
                .data()
                .chunks_exact(c)
                .zip(tx.data().chunks_exact(c))
                .zip(td.data())
                .map(|((gr, xr), &dv)| {
                    -gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / (dv * dv)
                })
                .collect();
            self.accumulate(grads, d, Tensor::new(td.shape(), dd).unwrap());
        }
    }
}
