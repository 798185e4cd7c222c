//! Static semantic aggregation: S = LA(DCN(fuse(F1..F4))).
//!
//! Fusion projects F1, F3 and F4 with 1×1 convolutions, brings them to F2's
//! extents (F1 pooled, F3 and F4 upsampled), concatenates with F2 and
//! projects to C channels. The deformable block and the linear-attention
//! block are each wrapped in a residual connection.

use rand::Rng;

use crate::backbone::FeaturePyramid;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Affine, Conv};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SseaConfig {
    /// Output channels C.
    pub c: usize,
    /// Deformable sampling points; a perfect square.
    pub d: usize,
    /// Width of the 1×1 projections applied to F1, F3 and F4.
    pub proj: usize,
}

/// Integer square root when `n` is a perfect square.
pub fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n && n > 0).then_some(r)
}

#[derive(Clone, Debug)]
pub struct Deformable {
    pub offset: Conv,
    pub kernel: ParamId,
    pub bias: ParamId,
    pub side: usize,
}

impl Deformable {
    /// Zero-initialized offset head and He-normal main kernel [√D, √D, C, C].
    pub fn new(store: &mut ParamStore, name: &str, c: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let side = exact_sqrt(d).ok_or_else(|| Error::Config(format!("D = {d} is not a perfect square")))?;
        let offset = Conv::with_std(store, &format!("{name}.offset"), side, c, 2 * d, 0.0, rng);
        let std = (2.0 / (d * c) as f64).sqrt();
        let kernel = store.add_normal(format!("{name}.kernel"), &[side, side, c, c], std, rng);
        let bias = store.add_bias(format!("{name}.bias"), c);
        Ok(Self {
            offset,
            kernel,
            bias,
            side,
        })
    }

    /// Sampling-point offsets of the base lattice, row-major over (ky, kx).
    pub fn base_grid(side: usize) -> Vec<(f64, f64)> {
        let r = (side / 2) as f64;
        (0..side * side)
            .map(|i| ((i / side) as f64 - r, (i % side) as f64 - r))
            .collect()
    }

    /// Deformable convolution of `x` [H, W, C] without the residual.
    pub fn core(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let off = self.offset.forward(g, x)?;
        let k = g.param(self.kernel);
        let b = g.param(self.bias);
        deformable_sample_conv(g, x, off, k, b, self.side)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.core(g, x)?;
        g.add(x, y)
    }
}

/// Samples `x` [H, W, C] at the side × side lattice around each pixel shifted by
/// `off` [H, W, 2·side²], then applies `kernel` [side, side, C, C] and `bias` [C].
pub fn deformable_sample_conv(g: &mut Graph, x: Var, off: Var, kernel: Var, bias: Var, side: usize) -> Result<Var> {
    let (h, w, c) = g.value(x).hwc("deformable_conv")?;
    let d = side * side;
    let off = g.reshape(off, &[h, w, d, 2])?;
    let grid = Deformable::base_grid(side);
    let base = Tensor::from_fn(&[h, w, d, 2], |i| {
        let (pix, rest) = (i / (2 * d), i % (2 * d));
        let (p, axis) = (rest / 2, rest % 2);
        if axis == 0 {
            (pix / w) as f64 + grid[p].0
        } else {
            (pix % w) as f64 + grid[p].1
        }
    });
    let base = g.constant(base);
    let coords = g.add(base, off)?;
    let patches = g.bilinear_sample(x, coords)?;
    let patches = g.reshape(patches, &[h * w, d * c])?;
    let k = g.reshape(kernel, &[d * c, c])?;
    let y = g.matmul(patches, k)?;
    let y = g.add_row_bias(y, bias)?;
    g.reshape(y, &[h, w, c])
}

#[derive(Clone, Debug)]
pub struct LinearAttention {
    pub q: Affine,
    pub k: Affine,
    pub v: Affine,
}

/// Output of [`LinearAttention::core`].
pub struct LinearAttentionParts {
    pub out: Var,
    /// φ(q_i)·Σ_j φ(k_j) per pixel, shape [N].
    pub denominator: Var,
}

impl LinearAttention {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Affine::new(store, &format!("{name}.q"), c, c, rng),
            k: Affine::new(store, &format!("{name}.k"), c, c, rng),
            v: Affine::new(store, &format!("{name}.v"), c, c, rng),
        }
    }

    /// Kernelized attention over the rows of `x` [N, C] in O(N·C²).
    pub fn core(&self, g: &mut Graph, x: Var) -> Result<LinearAttentionParts> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        kernelized_attention(g, q, k, v)
    }

    /// Residual linear attention over a [H, W, C] map.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (h, w, c) = g.value(x).hwc("linear_attention")?;
        let flat = g.reshape(x, &[h * w, c])?;
        let parts = self.core(g, flat)?;
        let y = g.reshape(parts.out, &[h, w, c])?;
        g.add(x, y)
    }
}

/// φ(q)·(φ(k)ᵀ v) / (φ(q)·Σ_j φ(k_j)) with φ = elu + 1, for `q` [N, C] and
/// `k`, `v` [N_ref, C]; never forms the N × N_ref weights.
pub fn kernelized_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<LinearAttentionParts> {
    let c = g.shape(k)[1];
    let fq = g.elu_plus_one(q)?;
    let fk = g.elu_plus_one(k)?;
    let fkt = g.transpose(fk)?;
    let kv = g.matmul(fkt, v)?;
    let z = g.sum_axes(fk, &[0])?;
    let z = g.reshape(z, &[c, 1])?;
    let num = g.matmul(fq, kv)?;
    let den = g.matmul(fq, z)?;
    let n = g.shape(den)[0];
    let den = g.reshape(den, &[n])?;
    let out = g.div_rows(num, den)?;
    Ok(LinearAttentionParts { out, denominator: den })
}

#[derive(Clone, Debug)]
pub struct Ssea {
    pub cfg: SseaConfig,
    pub proj1: Conv,
    pub proj3: Conv,
    pub proj4: Conv,
    pub fuse: Conv,
    pub dcn: Deformable,
    pub la: LinearAttention,
    widths: [usize; 4],
}

impl Ssea {
    /// `widths` are the channel counts of F1..F4.
    pub fn new(store: &mut ParamStore, cfg: SseaConfig, widths: [usize; 4], rng: &mut impl Rng) -> Result<Self> {
        let proj1 = Conv::new(store, "ssea.proj1", 1, widths[0], cfg.proj, rng);
        let proj3 = Conv::new(store, "ssea.proj3", 1, widths[2], cfg.proj, rng);
        let proj4 = Conv::new(store, "ssea.proj4", 1, widths[3], cfg.proj, rng);
        let fuse = Conv::new(store, "ssea.fuse", 1, widths[1] + 3 * cfg.proj, cfg.c, rng);
        let dcn = Deformable::new(store, "ssea.dcn", cfg.c, cfg.d, rng)?;
        let la = LinearAttention::new(store, "ssea.la", cfg.c, rng);
        Ok(Self {
            cfg,
            proj1,
            proj3,
            proj4,
            fuse,
            dcn,
            la,
            widths,
        })
    }

    /// Projected, resampled and concatenated pyramid mapped to C channels.
    pub fn fuse_pyramid(&self, g: &mut Graph, p: &FeaturePyramid) -> Result<Var> {
        let (h2, w2, _) = g.value(p.f2).hwc("fuse_pyramid")?;
        let expect = [(2 * h2, 2 * w2), (h2, w2), (h2 / 2, w2 / 2), (h2 / 4, w2 / 4)];
        for (lvl, (v, (eh, ew))) in p.levels().iter().zip(expect).enumerate() {
            let (h, w, c) = g.value(*v).hwc("fuse_pyramid")?;
            if (h, w) != (eh, ew) {
                return Err(shape_err("fuse_pyramid", format!("extent of F{}", lvl + 1), (eh, ew), (h, w)));
            }
            if c != self.widths[lvl] {
                return Err(shape_err("fuse_pyramid", format!("channels of F{}", lvl + 1), self.widths[lvl], c));
            }
        }
        let a = g.avgpool2(p.f1)?;
        let a = self.proj1.forward(g, a)?;
        let b = self.proj3.forward(g, p.f3)?;
        let b = g.upsample_bilinear(b, 2)?;
        let d = self.proj4.forward(g, p.f4)?;
        let d = g.upsample_bilinear(d, 4)?;
        let cat = g.concat(&[a, p.f2, b, d], 2)?;
        self.fuse.forward(g, cat)
    }

    pub fn deformable_conv(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.dcn.forward(g, x)
    }

    pub fn linear_attention(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.la.forward(g, x)
    }

    /// Fusion only, skipping the deformable and attention refinements.
    pub fn fuse_only(&self, g: &mut Graph, p: &FeaturePyramid) -> Result<Var> {
        self.fuse_pyramid(g, p)
    }

    pub fn forward(&self, g: &mut Graph, p: &FeaturePyramid) -> Result<Var> {
        let f = self.fuse_pyramid(g, p)?;
        let d = self.deformable_conv(g, f)?;
        self.linear_attention(g, d)
    }
}
