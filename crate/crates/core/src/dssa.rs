//! Dynamic semantic aggregation: two-stage cross-frame attention over P
//! selected reference pixels per query.
//!
//! A coordinate head turns a pair of feature maps into real offsets
//! [H, W, 2P]; they are decoded to integer reference coordinates around a
//! √P × √P lattice centered on the query pixel. Windowed cross-attention
//! then attends from each query pixel to its P gathered reference pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Affine, Conv};
use crate::params::ParamStore;
use crate::ssea::exact_sqrt;

/// Guard on the per-window weight sum.
pub const WINDOW_FLOOR: f64 = 1e-9;

/// Pairing used by the refinement stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage2Mode {
    /// Refine D_coarse against D^{t−1} once.
    #[default]
    OneHop,
    /// First refine D^{t−1} against S^{t−2}, then D_coarse against the result.
    TwoHop,
}

#[derive(Clone, Debug)]
pub struct DssaConfig {
    pub c: usize,
    /// Points per window; a perfect square.
    pub p: usize,
    pub hidden: usize,
    /// Largest learned displacement in pixels.
    pub max_disp: f64,
    pub stage2: Stage2Mode,
}

/// P integer reference coordinates per query pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoordMap {
    pub h: usize,
    pub w: usize,
    pub p: usize,
    /// (row, col) for query `i` and point `k` at `i * p + k`.
    pub coords: Vec<(usize, usize)>,
}

impl CoordMap {
    /// Row-major reference indices, one per (query, point).
    pub fn flat_indices(&self) -> Vec<usize> {
        self.coords.iter().map(|&(r, c)| r * self.w + c).collect()
    }

    /// Reference indices selected by query `i`.
    pub fn selected(&self, i: usize) -> Vec<usize> {
        self.coords[i * self.p..(i + 1) * self.p]
            .iter()
            .map(|&(r, c)| r * self.w + c)
            .collect()
    }

    pub fn in_bounds(&self) -> bool {
        self.coords.len() == self.h * self.w * self.p && self.coords.iter().all(|&(r, c)| r < self.h && c < self.w)
    }

    /// Query-centered lattice offsets for `p` points: side s, offsets j − ⌊(s−1)/2⌋.
    pub fn base_offsets(p: usize) -> Result<Vec<(i64, i64)>> {
        let s = exact_sqrt(p).ok_or_else(|| Error::Config(format!("P = {p} is not a perfect square")))?;
        let lo = ((s - 1) / 2) as i64;
        Ok((0..p).map(|i| ((i / s) as i64 - lo, (i % s) as i64 - lo)).collect())
    }

    /// Decodes a raw head output [H, W, 2P]:
    /// clamp(round(query + base + max_disp·tanh(raw))).
    pub fn decode(raw: &crate::Tensor, p: usize, max_disp: f64) -> Result<Self> {
        let (h, w, k) = raw.hwc("decode_coords")?;
        if k != 2 * p {
            return Err(shape_err("decode_coords", "channels (axis 2)", 2 * p, k));
        }
        let base = Self::base_offsets(p)?;
        let d = raw.data();
        let mut coords = Vec::with_capacity(h * w * p);
        for i in 0..h {
            for j in 0..w {
                let o = (i * w + j) * k;
                for (pt, &(by, bx)) in base.iter().enumerate() {
                    let r = i as f64 + by as f64 + max_disp * d[o + 2 * pt].tanh();
                    let c = j as f64 + bx as f64 + max_disp * d[o + 2 * pt + 1].tanh();
                    coords.push((clamp_round(r, h), clamp_round(c, w)));
                }
            }
        }
        Ok(Self { h, w, p, coords })
    }
}

fn clamp_round(x: f64, ext: usize) -> usize {
    x.round().clamp(0.0, (ext - 1) as f64) as usize
}

/// Row interleave: output row 2i is a's row i, row 2i+1 is b's row i.
pub fn interleave_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (h, w, c) = g.value(a).hwc("interleave_rows")?;
    let sb = g.value(b).hwc("interleave_rows")?;
    if sb != (h, w, c) {
        return Err(shape_err("interleave_rows", "operand shapes", (h, w, c), sb));
    }
    let a3 = g.reshape(a, &[h, 1, w * c])?;
    let b3 = g.reshape(b, &[h, 1, w * c])?;
    let cat = g.concat(&[a3, b3], 1)?;
    g.reshape(cat, &[2 * h, w, c])
}

/// Two convolutions producing raw offsets [H, W, 2P].
#[derive(Clone, Debug)]
pub struct CoordHead {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl CoordHead {
    /// The output convolution starts at zero, so fresh heads select the base lattice.
    pub fn new(store: &mut ParamStore, name: &str, c: usize, hidden: usize, p: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv::new(store, &format!("{name}.conv1"), 3, c, hidden, rng),
            conv2: Conv::with_std(store, &format!("{name}.conv2"), 3, hidden, 2 * p, 0.0, rng),
        }
    }

    fn raw(&self, g: &mut Graph, x: Var, stride: (usize, usize)) -> Result<Var> {
        let h = self.conv1.forward_strided(g, x, stride)?;
        let h = g.relu(h)?;
        self.conv2.forward(g, h)
    }
}

/// Coordinates from the row-interleaved pair (a, b); the first convolution
/// uses stride (2, 1) to return to a's height.
pub fn coord_map_interleaved(g: &mut Graph, head: &CoordHead, a: Var, b: Var, p: usize, max_disp: f64) -> Result<CoordMap> {
    CoordMap::base_offsets(p)?;
    let x = interleave_rows(g, a, b)?;
    let raw = head.raw(g, x, (2, 1))?;
    CoordMap::decode(g.value(raw), p, max_disp)
}

/// Coordinates from the difference map target − reference.
pub fn coord_map_difference(
    g: &mut Graph,
    head: &CoordHead,
    target: Var,
    reference: Var,
    p: usize,
    max_disp: f64,
) -> Result<CoordMap> {
    CoordMap::base_offsets(p)?;
    let ts = g.value(target).hwc("coord_map_difference")?;
    let rs = g.value(reference).hwc("coord_map_difference")?;
    if ts != rs {
        return Err(shape_err("coord_map_difference", "operand shapes", ts, rs));
    }
    let x = g.sub(target, reference)?;
    let raw = head.raw(g, x, (1, 1))?;
    CoordMap::decode(g.value(raw), p, max_disp)
}

/// Per-window attention on projected rows: `q` [N, C], `k` and `v`
/// [N_ref, C]. Returns the aggregated [N, C] rows and the normalized weights [N, P].
pub fn window_attention_core(g: &mut Graph, q: Var, k: Var, v: Var, cmap: &CoordMap) -> Result<(Var, Var)> {
    let n = g.shape(q)[0];
    let nr = g.shape(k)[0];
    if nr != cmap.h * cmap.w {
        return Err(shape_err("windowed_cross_attention", "reference pixels vs coordinate map", cmap.h * cmap.w, nr));
    }
    if cmap.coords.len() != n * cmap.p {
        return Err(shape_err("windowed_cross_attention", "queries vs coordinate map", cmap.coords.len() / cmap.p.max(1), n));
    }
    let fq = g.elu_plus_one(q)?;
    let fk = g.elu_plus_one(k)?;
    window_stage(g, fq, fk, v, cmap)
}

/// Gather, weight, normalize and combine over the P selected points, given
/// feature-mapped rows φ(q) and φ(k).
pub fn window_stage(g: &mut Graph, fq: Var, fk: Var, v: Var, cmap: &CoordMap) -> Result<(Var, Var)> {
    let n = g.shape(fq)[0];
    let c = g.shape(fk)[1];
    let idx = cmap.flat_indices();
    let kw = g.gather_rows(fk, &idx)?;
    let kw = g.reshape(kw, &[n, cmap.p, c])?;
    let vw = g.gather_rows(v, &idx)?;
    let vw = g.reshape(vw, &[n, cmap.p, c])?;
    let w = g.window_dot(fq, kw)?;
    let w = g.normalize_last(w, WINDOW_FLOOR)?;
    let o = g.window_combine(w, vw)?;
    Ok((o, w))
}

/// Query, key and value maps of one cross-attention.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Affine,
    pub k: Affine,
    pub v: Affine,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Affine::new(store, &format!("{name}.q"), c, c, rng),
            k: Affine::new(store, &format!("{name}.k"), c, c, rng),
            v: Affine::new(store, &format!("{name}.v"), c, c, rng),
        }
    }

    /// query_src + O, where O attends from each query pixel to its P
    /// selected reference pixels. Both maps are [H, W, C].
    pub fn forward(&self, g: &mut Graph, query_src: Var, reference: Var, cmap: &CoordMap) -> Result<Var> {
        let (h, w, c) = g.value(query_src).hwc("windowed_cross_attention")?;
        let (hr, wr, cr) = g.value(reference).hwc("windowed_cross_attention")?;
        if cr != c {
            return Err(shape_err("windowed_cross_attention", "channels (axis 2)", c, cr));
        }
        if (cmap.h, cmap.w) != (hr, wr) {
            return Err(shape_err("windowed_cross_attention", "coordinate map extents", (hr, wr), (cmap.h, cmap.w)));
        }
        let qs = g.reshape(query_src, &[h * w, c])?;
        let rs = g.reshape(reference, &[hr * wr, c])?;
        let q = self.q.forward(g, qs)?;
        let k = self.k.forward(g, rs)?;
        let v = self.v.forward(g, rs)?;
        let (o, _) = window_attention_core(g, q, k, v, cmap)?;
        let o = g.reshape(o, &[h, w, c])?;
        g.add(query_src, o)
    }
}

/// Intermediate results of [`Dssa::forward`].
#[derive(Clone, Debug)]
pub struct DssaTrace {
    pub d_prev: Var,
    pub d_coarse: Var,
    pub d_fine: Var,
    pub cmaps: Vec<CoordMap>,
}

#[derive(Clone, Debug)]
pub struct Dssa {
    pub cfg: DssaConfig,
    pub head_prev: CoordHead,
    pub attn_prev: CrossAttention,
    pub head_coarse: CoordHead,
    pub attn_coarse: CrossAttention,
    pub head_fine: CoordHead,
    pub attn_fine: CrossAttention,
    /// Extra refinement of D^{t−1} used by [`Stage2Mode::TwoHop`].
    pub two_hop: Option<(CoordHead, CrossAttention)>,
}

impl Dssa {
    pub fn new(store: &mut ParamStore, cfg: DssaConfig, rng: &mut impl Rng) -> Result<Self> {
        CoordMap::base_offsets(cfg.p)?;
        let (c, hid, p) = (cfg.c, cfg.hidden, cfg.p);
        let head_prev = CoordHead::new(store, "dssa.head_prev", c, hid, p, rng);
        let attn_prev = CrossAttention::new(store, "dssa.attn_prev", c, rng);
        let head_coarse = CoordHead::new(store, "dssa.head_coarse", c, hid, p, rng);
        let attn_coarse = CrossAttention::new(store, "dssa.attn_coarse", c, rng);
        let head_fine = CoordHead::new(store, "dssa.head_fine", c, hid, p, rng);
        let attn_fine = CrossAttention::new(store, "dssa.attn_fine", c, rng);
        let two_hop = (cfg.stage2 == Stage2Mode::TwoHop).then(|| {
            (
                CoordHead::new(store, "dssa.head_hop", c, hid, p, rng),
                CrossAttention::new(store, "dssa.attn_hop", c, rng),
            )
        });
        Ok(Self {
            cfg,
            head_prev,
            attn_prev,
            head_coarse,
            attn_coarse,
            head_fine,
            attn_fine,
            two_hop,
        })
    }

    /// D_fine^t from S^t, S^{t−1} and S^{t−2} (the nearer and farther references).
    pub fn forward(&self, g: &mut Graph, s_t: Var, s_t1: Var, s_t2: Var) -> Result<DssaTrace> {
        let (p, md) = (self.cfg.p, self.cfg.max_disp);
        let cm1 = coord_map_interleaved(g, &self.head_prev, s_t1, s_t2, p, md)?;
        let d_prev = self.attn_prev.forward(g, s_t1, s_t2, &cm1)?;
        let cm2 = coord_map_interleaved(g, &self.head_coarse, s_t, d_prev, p, md)?;
        let d_coarse = self.attn_coarse.forward(g, s_t, d_prev, &cm2)?;
        let mut cmaps = vec![cm1, cm2];
        let reference = match &self.two_hop {
            None => d_prev,
            Some((head, attn)) => {
                let cm = coord_map_difference(g, head, d_prev, s_t2, p, md)?;
                let r = attn.forward(g, d_prev, s_t2, &cm)?;
                cmaps.push(cm);
                r
            }
        };
        let cm3 = coord_map_difference(g, &self.head_fine, d_coarse, reference, p, md)?;
        let d_fine = self.attn_fine.forward(g, d_coarse, reference, &cm3)?;
        cmaps.push(cm3);
        Ok(DssaTrace {
            d_prev,
            d_coarse,
            d_fine,
            cmaps,
        })
    }
}
