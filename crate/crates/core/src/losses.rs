//! Multivariate class prototypes and the segmentation objectives:
//! cross-entropy, prototype contrast, variate similarity and their weighted sum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Affine;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Probability floor applied before the logarithm in the pixel loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    /// Dot products of L2-normalized features and prototypes.
    #[default]
    Cosine,
    /// Raw dot products of features with the prototypes.
    Dot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub ce_reduction: Reduction,
    pub similarity: Similarity,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda1: 0.5,
            lambda2: 0.01,
            ce_reduction: Reduction::Mean,
            similarity: Similarity::Cosine,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Projected feature [N, C] whose M variates are consecutive channel blocks of C/M.
#[derive(Clone, Copy, Debug)]
pub struct MultivariateFeature {
    pub var: Var,
    pub m: usize,
    pub h: usize,
    pub w: usize,
    pub width: usize,
}

impl MultivariateFeature {
    /// Variate `i` as an [N, C/M] graph value.
    pub fn variate(&self, g: &mut Graph, i: usize) -> Result<Var> {
        g.slice_last(self.var, i * self.width, self.width)
    }

    /// Copy laid out as [M, H, W, C/M].
    pub fn to_tensor(&self, g: &Graph) -> Tensor {
        let d = g.value(self.var).data();
        let (n, c, wd) = (self.h * self.w, self.m * self.width, self.width);
        Tensor::from_fn(&[self.m, self.h, self.w, wd], |i| {
            let (m, rest) = (i / (n * wd), i % (n * wd));
            let (pix, ch) = (rest / wd, rest % wd);
            d[pix * c + m * wd + ch]
        })
    }
}

/// Affine C → C projection followed by per-variate classifiers.
#[derive(Clone, Debug)]
pub struct MultivariateHead {
    pub proj: Affine,
    pub heads: Vec<Affine>,
    pub m: usize,
    pub cls: usize,
}

impl MultivariateHead {
    pub fn new(store: &mut ParamStore, c: usize, m: usize, cls: usize, rng: &mut impl Rng) -> Result<Self> {
        if m == 0 || c % m != 0 {
            return Err(Error::Config(format!("M = {m} must divide C = {c}")));
        }
        let proj = Affine::new(store, "head.proj", c, c, rng);
        let heads = (0..m)
            .map(|i| Affine::new(store, &format!("head.variate{i}"), c / m, cls, rng))
            .collect();
        Ok(Self { proj, heads, m, cls })
    }

    pub fn project_multivariate(&self, g: &mut Graph, d: Var) -> Result<MultivariateFeature> {
        let (h, w, c) = g.value(d).hwc("project_multivariate")?;
        let flat = g.reshape(d, &[h * w, c])?;
        let var = self.proj.forward(g, flat)?;
        Ok(MultivariateFeature {
            var,
            m: self.m,
            h,
            w,
            width: c / self.m,
        })
    }

    /// Mean of the per-variate logits, [H2, W2, CLS].
    pub fn joint_logits(&self, g: &mut Graph, mf: &MultivariateFeature) -> Result<Var> {
        let mut acc = None;
        for (i, head) in self.heads.iter().enumerate() {
            let x = mf.variate(g, i)?;
            let l = head.forward(g, x)?;
            acc = Some(match acc {
                None => l,
                Some(a) => g.add(a, l)?,
            });
        }
        let mean = g.scale(acc.expect("at least one variate"), 1.0 / self.m as f64)?;
        g.reshape(mean, &[mf.h, mf.w, self.cls])
    }
}

/// Softmax of the logits upsampled by `factor`, [H, W, CLS].
pub fn upsampled_probs(g: &mut Graph, logits: Var, factor: usize) -> Result<Var> {
    let up = g.upsample_bilinear(logits, factor)?;
    g.softmax(up)
}

/// Mean (or sum) over labelled pixels of −ln max(p_true, 1e-12). `None` labels are ignored.
pub fn ce_loss(g: &mut Graph, probs: Var, gt: &[Option<usize>], reduction: Reduction) -> Result<Var> {
    let (h, w, k) = g.value(probs).hwc("ce_loss")?;
    let flat = g.reshape(probs, &[h * w, k])?;
    let denom = match reduction {
        Reduction::Mean => gt.iter().flatten().count().max(1) as f64,
        Reduction::Sum => 1.0,
    };
    g.nll_pick(flat, gt, PROB_FLOOR, denom)
}

/// Per-pixel argmax over the last axis of [H, W, K].
pub fn argmax_labels(t: &Tensor) -> Vec<usize> {
    let k = *t.shape().last().unwrap();
    t.data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Nearest-neighbour label downsampling by an integer factor: out[i, j] = gt[f·i, f·j].
pub fn downsample_labels(gt: &[usize], h: usize, w: usize, factor: usize) -> Vec<usize> {
    let (ho, wo) = (h / factor, w / factor);
    (0..ho * wo).map(|i| gt[(i / wo) * factor * w + (i % wo) * factor]).collect()
}

/// Pixels whose prediction matches the ground truth, tagged with that class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorrectMask {
    pub mask: Vec<Option<usize>>,
    pub n_g: usize,
}

impl CorrectMask {
    /// Sentinel value used by [`CorrectMask::as_ints`].
    pub const SENTINEL: i64 = -1;

    pub fn as_ints(&self) -> Vec<i64> {
        self.mask.iter().map(|m| m.map_or(Self::SENTINEL, |c| c as i64)).collect()
    }

    /// Correct pixels per class.
    pub fn class_counts(&self, cls: usize) -> Vec<usize> {
        let mut n = vec![0; cls];
        for c in self.mask.iter().flatten() {
            n[*c] += 1;
        }
        n
    }
}

pub fn correct_mask(pred: &[usize], gt_small: &[usize]) -> Result<CorrectMask> {
    if pred.len() != gt_small.len() {
        return Err(shape_err("correct_mask", "pixel count", gt_small.len(), pred.len()));
    }
    let mask: Vec<Option<usize>> = pred.iter().zip(gt_small).map(|(&p, &t)| (p == t).then_some(t)).collect();
    let n_g = mask.iter().flatten().count();
    Ok(CorrectMask { mask, n_g })
}

/// Per-variate prototypes [CLS, C/M] (unit rows for present classes, zero rows otherwise).
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    pub protos: Vec<Var>,
    /// Per-class means before normalization, one [CLS, C/M] value per variate.
    pub means: Vec<Var>,
    pub present: Vec<bool>,
    pub counts: Vec<usize>,
}

impl PrototypeBank {
    /// Values laid out as [CLS, M, C/M].
    pub fn to_tensor(&self, g: &Graph) -> Tensor {
        let m = self.protos.len();
        let cls = self.present.len();
        let wd = g.shape(self.protos[0])[1];
        Tensor::from_fn(&[cls, m, wd], |i| {
            let (c, rest) = (i / (m * wd), i % (m * wd));
            g.value(self.protos[rest / wd]).data()[c * wd + rest % wd]
        })
    }
}

pub fn class_prototypes(g: &mut Graph, mf: &MultivariateFeature, cm: &CorrectMask, cls: usize) -> Result<PrototypeBank> {
    if cm.mask.len() != mf.h * mf.w {
        return Err(shape_err("class_prototypes", "mask length vs pixels", mf.h * mf.w, cm.mask.len()));
    }
    let counts = cm.class_counts(cls);
    let mut protos = Vec::with_capacity(mf.m);
    let mut means = Vec::with_capacity(mf.m);
    for i in 0..mf.m {
        let x = mf.variate(g, i)?;
        let mean = g.segment_mean(x, &cm.mask, cls)?;
        protos.push(g.l2_normalize_rows(mean)?);
        means.push(mean);
    }
    Ok(PrototypeBank {
        protos,
        means,
        present: counts.iter().map(|&n| n > 0).collect(),
        counts,
    })
}

/// Prototype contrast averaged over the M·N_G (variate, correct pixel) terms;
/// each term is log(1 + Σ_neg exp(s⁻/τ) / exp(s⁺/τ)). Prototypes enter as constants.
pub fn contrastive_loss(g: &mut Graph, mf: &MultivariateFeature, cm: &CorrectMask, bank: &PrototypeBank, cfg: &LossConfig) -> Result<Var> {
    let protos: Vec<Tensor> = bank.protos.iter().map(|&p| g.value(p).clone()).collect();
    contrastive_with(g, mf, cm, &protos, &bank.present, cfg)
}

/// [`contrastive_loss`] against fixed prototype tables, one [CLS, C/M] tensor per variate.
pub fn contrastive_with(
    g: &mut Graph,
    mf: &MultivariateFeature,
    cm: &CorrectMask,
    protos: &[Tensor],
    present: &[bool],
    cfg: &LossConfig,
) -> Result<Var> {
    let present: Vec<usize> = (0..present.len()).filter(|&c| present[c]).collect();
    if cm.n_g == 0 || present.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    if protos.len() != mf.m {
        return Err(shape_err("contrastive_loss", "prototype variates", mf.m, protos.len()));
    }
    let rows: Vec<usize> = cm.mask.iter().enumerate().filter_map(|(i, m)| m.map(|_| i)).collect();
    let slot: Vec<Option<usize>> = rows
        .iter()
        .map(|&i| present.iter().position(|&c| Some(c) == cm.mask[i]))
        .collect();
    let denom = (mf.m * cm.n_g) as f64;
    let wd = mf.width;
    let mut total = None;
    for (i, pv) in protos.iter().enumerate() {
        let x = mf.variate(g, i)?;
        let x = g.gather_rows(x, &rows)?;
        let q = match cfg.similarity {
            Similarity::Cosine => g.l2_normalize_rows(x)?,
            Similarity::Dot => x,
        };
        let pt = Tensor::from_fn(&[wd, present.len()], |j| pv.data()[present[j % present.len()] * wd + j / present.len()]);
        let pt = g.constant(pt);
        let s = g.matmul(q, pt)?;
        let s = g.scale(s, 1.0 / cfg.tau)?;
        let p = g.softmax(s)?;
        let l = g.nll_pick(p, &slot, f64::MIN_POSITIVE, denom)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    Ok(total.unwrap())
}

/// Mean upper-triangle variate similarity of each present class prototype,
/// weighted by that class's share of the N_G correct pixels.
pub fn mf_loss(g: &mut Graph, bank: &PrototypeBank, cm: &CorrectMask) -> Result<Var> {
    let m = bank.protos.len();
    if m < 2 || cm.n_g == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let pairs = (m * (m - 1) / 2) as f64;
    let weights = Tensor::from_fn(&[bank.counts.len()], |c| bank.counts[c] as f64 / (cm.n_g as f64 * pairs));
    let mut acc = None;
    for i in 0..m {
        for j in i + 1..m {
            let prod = g.mul(bank.protos[i], bank.protos[j])?;
            let sim = g.sum_axes(prod, &[1])?;
            acc = Some(match acc {
                None => sim,
                Some(a) => g.add(a, sim)?,
            });
        }
    }
    let w = g.constant(weights);
    let weighted = g.mul(acc.unwrap(), w)?;
    g.sum_all(weighted)
}

/// ce + λ₁·cr + λ₂·mf.
pub fn total_loss(g: &mut Graph, ce: Var, cr: Var, mf: Var, cfg: &LossConfig) -> Result<Var> {
    let a = g.scale(cr, cfg.lambda1)?;
    let b = g.scale(mf, cfg.lambda2)?;
    let s = g.add(ce, a)?;
    g.add(s, b)
}
