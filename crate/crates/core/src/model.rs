//! Full segmentation network: backbone → SSEA per frame → DSSA → multivariate head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::dssa::{CoordMap, Dssa, DssaConfig, Stage2Mode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Scope, Var};
use crate::losses::{self, CorrectMask, LossConfig, MultivariateHead};
use crate::params::ParamStore;
use crate::ssea::{exact_sqrt, Ssea, SseaConfig};
use crate::tensor::Tensor;

/// Which components run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// DSSA replaced by the identity on S^t.
    NoDssa,
    /// SSEA reduced to pyramid fusion.
    SseaFusionOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub c1: usize,
    pub c: usize,
    pub p: usize,
    pub d: usize,
    pub m: usize,
    pub cls: usize,
    /// Width of the 1×1 projections of F1, F3 and F4 before fusion.
    pub fuse_proj: usize,
    /// Hidden width of the coordinate heads.
    pub coord_hidden: usize,
    /// Largest learned displacement at F2 resolution; defaults to H2/4.
    pub max_disp: Option<f64>,
    /// Reference frame offsets (nearer, farther).
    pub ref_offsets: (usize, usize),
    pub stage2: Stage2Mode,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c1: 16,
            c: 64,
            p: 4,
            d: 9,
            m: 4,
            cls: 4,
            fuse_proj: 32,
            coord_hidden: 8,
            max_disp: None,
            ref_offsets: (3, 6),
            stage2: Stage2Mode::OneHop,
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if exact_sqrt(self.p).is_none() {
            return Err(Error::Config(format!("P = {} is not a perfect square", self.p)));
        }
        if exact_sqrt(self.d).is_none() {
            return Err(Error::Config(format!("D = {} is not a perfect square", self.d)));
        }
        if self.m == 0 || self.c % self.m != 0 {
            return Err(Error::Config(format!("M = {} must divide C = {}", self.m, self.c)));
        }
        let (a, b) = self.ref_offsets;
        if a == 0 || b == 0 || a == b {
            return Err(Error::Config(format!("reference offsets must be positive and distinct, got ({a}, {b})")));
        }
        if self.cls < 2 || self.c1 == 0 || self.c == 0 {
            return Err(Error::Config("class count must be ≥ 2 and widths positive".into()));
        }
        Ok(())
    }

    /// Frame indices (t, t − a, t − b), clamped to the clip start.
    pub fn frame_triplet(&self, t: usize) -> [usize; 3] {
        let (a, b) = self.ref_offsets;
        [t, t.saturating_sub(a), t.saturating_sub(b)]
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub ssea: Ssea,
    pub dssa: Dssa,
    pub head: MultivariateHead,
}

/// Values produced by one forward pass.
pub struct Forward {
    /// Joint logits at F2 resolution, [H2, W2, CLS].
    pub logits: Var,
    /// Softmax of the logits upsampled to the input size, [H, W, CLS].
    pub probs: Var,
    pub features: losses::MultivariateFeature,
    pub statics: [Var; 3],
    pub d_fine: Var,
    pub cmaps: Vec<CoordMap>,
}

/// Scalars of one training objective.
#[derive(Clone, Debug, Serialize)]
pub struct LossValues {
    pub total: f64,
    pub ce: f64,
    pub cr: Option<f64>,
    pub mf: Option<f64>,
    pub n_g: usize,
}

impl Model {
    /// Builds a model and its freshly initialized parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, cfg.c1, &mut rng);
        let ssea_cfg = SseaConfig {
            c: cfg.c,
            d: cfg.d,
            proj: cfg.fuse_proj,
        };
        let ssea = Ssea::new(&mut store, ssea_cfg, backbone.widths(), &mut rng)?;
        let dssa_cfg = DssaConfig {
            c: cfg.c,
            p: cfg.p,
            hidden: cfg.coord_hidden,
            max_disp: 0.0,
            stage2: cfg.stage2,
        };
        let dssa = Dssa::new(&mut store, dssa_cfg, &mut rng)?;
        let head = MultivariateHead::new(&mut store, cfg.c, cfg.m, cfg.cls, &mut rng)?;
        Ok((
            Self {
                cfg,
                backbone,
                ssea,
                dssa,
                head,
            },
            store,
        ))
    }

    /// Rebuilds the architecture for `cfg` and checks `store` matches it.
    pub fn from_store(cfg: ModelConfig, store: &ParamStore) -> Result<Self> {
        let (model, fresh) = Self::new(cfg, 0)?;
        if fresh.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, configuration expects {}",
                store.len(),
                fresh.len()
            )));
        }
        for id in fresh.ids() {
            if fresh.name(id) != store.name(id) || fresh.get(id).shape() != store.get(id).shape() {
                return Err(Error::Format(format!("parameter {} does not match the configuration", fresh.name(id))));
            }
        }
        Ok(model)
    }

    /// Static feature S of one [H, W, 3] frame.
    pub fn static_feature(&self, g: &mut Graph, image: Var) -> Result<Var> {
        g.set_scope(Scope::Backbone);
        let pyr = self.backbone.encode_frame(g, image)?;
        g.set_scope(Scope::Ssea);
        let s = match self.cfg.ablation {
            Ablation::SseaFusionOnly => self.ssea.fuse_only(g, &pyr)?,
            _ => self.ssea.forward(g, &pyr)?,
        };
        Ok(s)
    }

    fn max_disp(&self, h2: usize) -> f64 {
        self.cfg.max_disp.unwrap_or(h2 as f64 / 4.0)
    }

    /// Forward from precomputed static features (S^t, S^{t−a}, S^{t−b}).
    pub fn forward_from_statics(&self, g: &mut Graph, statics: [Var; 3], input_h: usize) -> Result<Forward> {
        let (h2, _, _) = g.value(statics[0]).hwc("forward")?;
        g.set_scope(Scope::Dssa);
        let (d_fine, cmaps) = match self.cfg.ablation {
            Ablation::NoDssa => (statics[0], Vec::new()),
            _ => {
                let mut dssa = self.dssa.clone();
                dssa.cfg.max_disp = self.max_disp(h2);
                let tr = dssa.forward(g, statics[0], statics[1], statics[2])?;
                (tr.d_fine, tr.cmaps)
            }
        };
        g.set_scope(Scope::Head);
        let features = self.head.project_multivariate(g, d_fine)?;
        let logits = self.head.joint_logits(g, &features)?;
        let probs = losses::upsampled_probs(g, logits, input_h / h2)?;
        Ok(Forward {
            logits,
            probs,
            features,
            statics,
            d_fine,
            cmaps,
        })
    }

    /// Forward pass on three frames given as graph values.
    pub fn forward(&self, g: &mut Graph, frames: [Var; 3]) -> Result<Forward> {
        let (h, _, _) = g.value(frames[0]).hwc("forward")?;
        let mut statics = [frames[0]; 3];
        for (s, f) in statics.iter_mut().zip(frames) {
            *s = self.static_feature(g, f)?;
        }
        self.forward_from_statics(g, statics, h)
    }

    /// Eq.-style training objective on a forward pass; `gt` is the full-resolution label map.
    pub fn loss(&self, g: &mut Graph, fw: &Forward, gt: &[usize], cfg: &LossConfig) -> Result<(Var, LossValues)> {
        g.set_scope(Scope::Loss);
        let (h, w, _) = g.value(fw.probs).hwc("loss")?;
        let (h2, w2, _) = g.value(fw.logits).hwc("loss")?;
        if gt.len() != h * w {
            return Err(crate::error::shape_err("loss", "label count", h * w, gt.len()));
        }
        let targets: Vec<Option<usize>> = gt.iter().map(|&c| Some(c)).collect();
        let ce = losses::ce_loss(g, fw.probs, &targets, cfg.ce_reduction)?;
        let ce_v = g.value(ce).item()?;
        if cfg.lambda1 == 0.0 && cfg.lambda2 == 0.0 {
            return Ok((
                ce,
                LossValues {
                    total: ce_v,
                    ce: ce_v,
                    cr: None,
                    mf: None,
                    n_g: 0,
                },
            ));
        }
        let pred = losses::argmax_labels(g.value(fw.logits));
        let gt_small = losses::downsample_labels(gt, h, w, h / h2);
        debug_assert_eq!(gt_small.len(), h2 * w2);
        let cm: CorrectMask = losses::correct_mask(&pred, &gt_small)?;
        let bank = losses::class_prototypes(g, &fw.features, &cm, self.cfg.cls)?;
        let cr = losses::contrastive_loss(g, &fw.features, &cm, &bank, cfg)?;
        let mf = losses::mf_loss(g, &bank, &cm)?;
        let total = losses::total_loss(g, ce, cr, mf, cfg)?;
        let vals = LossValues {
            total: g.value(total).item()?,
            ce: ce_v,
            cr: Some(g.value(cr).item()?),
            mf: Some(g.value(mf).item()?),
            n_g: cm.n_g,
        };
        Ok((total, vals))
    }
}

/// [H, W, 3] frame tensor from 8-bit RGB.
pub fn frame_tensor(h: usize, w: usize, rgb: &[u8]) -> Tensor {
    Tensor::from_fn(&[h, w, 3], |i| rgb[i] as f64 / 255.0)
}
