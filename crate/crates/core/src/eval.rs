//! Sliding-window evaluation of a trained model.

use log::warn;
use serde::Serialize;

use crate::datagen::VideoClip;
use crate::error::Result;
use crate::graph::Graph;
use crate::losses::argmax_labels;
use crate::metrics::{MetricsAccumulator, SegMetrics};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Default consistency windows.
pub const VC_WINDOWS: [usize; 2] = [8, 16];

/// Full-resolution label maps for every frame of `clip`; frames lacking
/// reference history reuse the earliest available frame.
pub fn predict_clip(model: &Model, store: &ParamStore, clip: &VideoClip) -> Result<Vec<Vec<usize>>> {
    let statics: Vec<Tensor> = (0..clip.len())
        .map(|t| {
            let mut g = Graph::with_params(store);
            let f = g.constant(clip.frame(t));
            let s = model.static_feature(&mut g, f)?;
            Ok(g.value(s).clone())
        })
        .collect::<Result<_>>()?;
    (0..clip.len())
        .map(|t| {
            let mut g = Graph::with_params(store);
            let s = model.cfg.frame_triplet(t).map(|i| g.constant(statics[i].clone()));
            let fw = model.forward_from_statics(&mut g, s, clip.params.size)?;
            Ok(argmax_labels(g.value(fw.probs)))
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub clips: usize,
    pub frames: usize,
    pub metrics: SegMetrics,
}

pub fn evaluate(model: &Model, store: &ParamStore, clips: &[VideoClip], windows: &[usize]) -> Result<EvalReport> {
    let cls = model.cfg.cls;
    let mut acc = MetricsAccumulator::new(cls, windows);
    let mut frames = 0;
    for (i, clip) in clips.iter().enumerate() {
        let pred = predict_clip(model, store, clip)?;
        let gt: Vec<Vec<usize>> = (0..clip.len()).map(|t| clip.label_map(t)).collect();
        frames += gt.len();
        for n in acc.add_clip(&gt, &pred)? {
            warn!("clip {i} has {} frames; skipping VC_{n}", gt.len());
        }
    }
    Ok(EvalReport {
        clips: clips.len(),
        frames,
        metrics: acc.finish(),
    })
}
