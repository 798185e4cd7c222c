//! Deterministic single-threaded training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::datagen::{Dataset, VideoClip};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{LossValues, Model};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::tensor::write_tensors;

#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub clip: usize,
    pub frame: usize,
    #[serde(flatten)]
    pub loss: LossValues,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log: Vec<StepLog>,
    pub store: ParamStore,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.path {
        Some(p) => Dataset::load(p),
        None => {
            let g = &cfg.data.generate;
            Dataset::generate(g.clips, g.val, g.seed, &g.params)
        }
    }
}

pub fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join(format!("ckpt_{step:06}.json"))
}

#[derive(Serialize)]
struct CheckpointExtra<'a> {
    step: usize,
    config: &'a RunConfig,
}

/// Objective and gradients for frame `t` of `clip`.
pub fn train_step(model: &Model, store: &ParamStore, cfg: &RunConfig, clip: &VideoClip, t: usize) -> Result<(LossValues, crate::graph::Gradients)> {
    let mut g = Graph::with_params(store);
    let idx = model.cfg.frame_triplet(t);
    let frames = idx.map(|f| g.constant(clip.frame(f)));
    let fw = model.forward(&mut g, frames)?;
    let (loss, vals) = model.loss(&mut g, &fw, &clip.label_map(t), &cfg.loss)?;
    let grads = g.backward(loss)?;
    Ok((vals, grads))
}

fn dump_non_finite(out: &Path, step: usize, clip_idx: usize, t: usize, clip: &VideoClip, model: &Model, vals: &LossValues) -> Result<PathBuf> {
    let idx = model.cfg.frame_triplet(t);
    let frames: Vec<_> = idx.iter().map(|&f| clip.frame(f)).collect();
    let base = out.join(format!("nonfinite_step{step:06}"));
    write_tensors(&base.with_extension("sdt"), &frames)?;
    let diag = serde_json::json!({
        "step": step,
        "clip": clip_idx,
        "clip_seed": clip.seed,
        "frames": idx,
        "loss": vals,
    });
    fs::write(base.with_extension("json"), serde_json::to_string_pretty(&diag)?)?;
    Ok(base)
}

/// Trains from scratch, writing checkpoints and `metrics.jsonl` to `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let data = load_dataset(cfg)?;
    train_on(cfg, &data)
}

pub fn train_on(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("dataset has no training clips".into()));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let (model, mut store) = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamW::new(cfg.optim.clone(), &store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let mut logf = BufWriter::new(File::create(cfg.out_dir.join("metrics.jsonl"))?);
    let mut log = Vec::with_capacity(cfg.optim.steps);
    let mut last = None;
    for step in 0..cfg.optim.steps {
        let ci = rng.random_range(0..data.train.len());
        let clip = &data.train[ci];
        let t = rng.random_range(0..clip.len());
        let (vals, grads) = train_step(&model, &store, cfg, clip, t)?;
        if !vals.total.is_finite() {
            let p = dump_non_finite(&cfg.out_dir, step, ci, t, clip, &model, &vals)?;
            return Err(Error::NonFinite(format!(
                "loss {} at step {step} (clip {ci}, frame {t}); inputs dumped to {}",
                vals.total,
                p.display()
            )));
        }
        let lr = opt.update(&mut store, grads.param_grads());
        let entry = StepLog {
            step,
            lr,
            clip: ci,
            frame: t,
            loss: vals,
        };
        serde_json::to_writer(&mut logf, &entry)?;
        logf.write_all(b"\n")?;
        if step % 50 == 0 {
            info!("step {step} lr {lr:.2e} loss {:.4} ce {:.4}", entry.loss.total, entry.loss.ce);
        }
        log.push(entry);
        let done = step + 1;
        if done % cfg.checkpoint_every.max(1) == 0 || done == cfg.optim.steps {
            let p = checkpoint_path(&cfg.out_dir, done);
            store.save_checkpoint(&p, &CheckpointExtra { step: done, config: cfg })?;
            last = Some(p);
        }
    }
    logf.flush()?;
    Ok(TrainOutcome {
        final_checkpoint: last.expect("at least one step"),
        log,
        store,
    })
}

/// Restores the configuration and parameters saved by [`train`].
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, Model, ParamStore)> {
    let (store, extra) = ParamStore::load_checkpoint(path)?;
    let cfg: RunConfig = serde_json::from_value(
        extra
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint manifest lacks the run configuration".into()))?,
    )?;
    let model = Model::from_store(cfg.model.clone(), &store)?;
    Ok((cfg, model, store))
}
