use super::{Graph, Op, Unary, Var};
use crate::error::{shape_err, Error, Result};
use crate::flops;
use crate::tensor::Tensor;

pub(crate) fn elu_plus_one(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

impl Graph {
    /// Shapes must match, or one side must hold a single element.
    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if tb.len() == 1 && tb.rank() == 0 {
            let y = tb.data()[0];
            ta.data().iter().map(|&x| f(x, y)).collect()
        } else if ta.len() == 1 && ta.rank() == 0 {
            let x = ta.data()[0];
            tb.data().iter().map(|&y| f(x, y)).collect()
        } else {
            return Err(shape_err(op, "operand shapes", ta.shape(), tb.shape()));
        };
        let shape = if ta.rank() == 0 { tb.shape() } else { ta.shape() };
        flops::add(data.len() as u64);
        Tensor::new(shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    fn unary(&mut self, u: Unary, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if u == Unary::Log {
            if let Some(bad) = tx.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain {
                    op: "log",
                    msg: format!("non-positive input {bad}"),
                });
            }
        }
        let t = match u {
            Unary::Relu => tx.map(|v| v.max(0.0)),
            Unary::EluPlusOne => tx.map(elu_plus_one),
            Unary::Tanh => tx.map(f64::tanh),
            Unary::Exp => tx.map(f64::exp),
            Unary::Log => tx.map(f64::ln),
            Unary::Scale(s) => tx.map(|v| v * s),
            Unary::AddScalar(s) => tx.map(|v| v + s),
        };
        flops::add(t.len() as u64);
        Ok(self.push(t, Op::Unary(u, x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    /// φ(x) = elu(x) + 1, strictly positive.
    pub fn elu_plus_one(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::EluPlusOne, x)
    }

    /// elu(x) = φ(x) − 1; zero at zero.
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let y = self.unary(Unary::EluPlusOne, x)?;
        self.unary(Unary::AddScalar(-1.0), y)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(Unary::Scale(s), x)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(s), x)
    }

    fn reduce_to(&self, target: Var, g: Tensor) -> Tensor {
        let shape = self.shape(target);
        if g.shape() == shape {
            g
        } else {
            // broadcast scalar operand
            Tensor::full(shape, g.data().iter().sum())
        }
    }

    pub(super) fn bw_add(&self, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>], sign: f64) {
        if self.requires_grad(a) {
            let ga = self.reduce_to(a, g.clone());
            self.accumulate(grads, a, ga);
        }
        if self.requires_grad(b) {
            let gb = self.reduce_to(b, if sign == 1.0 { g.clone() } else { g.map(|v| -v) });
            self.accumulate(grads, b, gb);
        }
    }

    pub(super) fn bw_mul(&self, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let expand = |t: &Tensor| -> Vec<f64> {
            if t.shape() == g.shape() {
                t.data().to_vec()
            } else {
                vec![t.data()[0]; g.len()]
            }
        };
        if self.requires_grad(a) {
            let other = expand(tb);
            let d: Vec<f64> = g.data().iter().zip(&other).map(|(x, y)| x * y).collect();
            let ga = self.reduce_to(a, Tensor::new(g.shape(), d).unwrap());
            self.accumulate(grads, a, ga);
        }
        if self.requires_grad(b) {
            let other = expand(ta);
            let d: Vec<f64> = g.data().iter().zip(&other).map(|(x, y)| x * y).collect();
            let gb = self.reduce_to(b, Tensor::new(g.shape(), d).unwrap());
            self.accumulate(grads, b, gb);
        }
    }

    pub(super) fn bw_unary(&self, u: Unary, x: Var, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let tx = self.value(x);
        let d: Vec<f64> = match u {
            Unary::Relu => tx
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                .collect(),
            Unary::EluPlusOne => tx
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&v, &y), &gv)| if v > 0.0 { gv } else { gv * y })
                .collect(),
            Unary::Tanh => out.data().iter().zip(g.data()).map(|(&y, &gv)| gv * (1.0 - y * y)).collect(),
            Unary::Exp => out.data().iter().zip(g.data()).map(|(&y, &gv)| gv * y).collect(),
            Unary::Log => tx.data().iter().zip(g.data()).map(|(&v, &gv)| gv / v).collect(),
            Unary::Scale(s) => g.data().iter().map(|&gv| gv * s).collect(),
            Unary::AddScalar(_) => g.data().to_vec(),
        };
        self.accumulate(grads, x, Tensor::new(tx.shape(), d).unwrap());
    }
}
