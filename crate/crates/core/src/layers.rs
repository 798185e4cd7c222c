//! Parameterized building blocks shared by the model components.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Square convolution with bias; kernel layout [k, k, Cin, Cout].
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub size: usize,
}

impl Conv {
    /// He-normal weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, size: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (size * size * cin) as f64).sqrt();
        Self::with_std(store, name, size, cin, cout, std, rng)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        size: usize,
        cin: usize,
        cout: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let kernel = if std == 0.0 {
            store.add(format!("{name}.kernel"), Tensor::zeros(&[size, size, cin, cout]), true)
        } else {
            store.add_normal(format!("{name}.kernel"), &[size, size, cin, cout], std, rng)
        };
        let bias = store.add_bias(format!("{name}.bias"), cout);
        Self { kernel, bias, size }
    }

    /// Same-size output for stride 1.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_strided(g, x, (1, 1))
    }

    pub fn forward_strided(&self, g: &mut Graph, x: Var, stride: (usize, usize)) -> Result<Var> {
        let pad = self.size / 2;
        let k = g.param(self.kernel);
        let y = g.conv2d_strided(x, k, stride, (pad, pad))?;
        let b = g.param(self.bias);
        g.add_row_bias(y, b)
    }
}

/// Affine map along the last axis: [.., Cin] → [.., Cout].
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    /// Weights drawn from N(0, 1/Cin).
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[cin, cout], (1.0 / cin as f64).sqrt(), rng);
        let bias = store.add_bias(format!("{name}.bias"), cout);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let cin = *shape.last().unwrap_or(&0);
        let rows = shape.iter().product::<usize>() / cin.max(1);
        let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, cin])? };
        let w = g.param(self.weight);
        let y = g.matmul(flat, w)?;
        let b = g.param(self.bias);
        let y = g.add_row_bias(y, b)?;
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = g.shape(y)[1];
        g.reshape(y, &out_shape)
    }
}
