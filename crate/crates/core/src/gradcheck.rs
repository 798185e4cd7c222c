//! Finite-difference verification of every backward rule.
//!
//! Each case draws random inputs, builds y = op(inputs) on a fresh graph and
//! differentiates the scalar Σ w ⊙ y for a fixed random weight tensor w. The
//! analytic gradient of every input is compared with central differences
//! from [`crate::oracle::finite_diff_gradient`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dssa::{window_attention_core, CoordMap};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::losses::{
    ce_loss, class_prototypes, contrastive_with, mf_loss, total_loss, upsampled_probs, CorrectMask, LossConfig, MultivariateFeature,
    Reduction,
};
use crate::oracle::{finite_diff_gradient, relative_error};
use crate::ssea::{deformable_sample_conv, kernelized_attention};
use crate::tensor::Tensor;

pub type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Base step; the per-input step is `STEP · max(1, max |x|)`.
pub const STEP: f64 = 1e-5;

fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    g.sum_all(p)
}

fn evaluate(build: &Build, inputs: &[Tensor], w: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = build(&mut g, &vars)?;
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    let s = g.sum_all(p)?;
    g.value(s).item()
}

/// Largest relative error over all inputs of one instance.
pub fn instance_error(build: &Build, inputs: &[Tensor], rng: &mut impl Rng) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = build(&mut g, &vars)?;
    let w = Tensor::from_fn(g.shape(y), |_| rng.random_range(-1.0..1.0));
    let loss = weighted_sum(&mut g, y, &w)?;
    let grads = g.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], x.shape());
        let h = STEP * x.max_abs().max(1.0);
        let mut probe = inputs.to_vec();
        let fd = finite_diff_gradient(
            |xi| {
                probe[i] = xi.clone();
                evaluate(build, &probe, &w)
            },
            x,
            h,
        )?;
        worst = worst.max(relative_error(&analytic, &fd));
    }
    Ok(worst)
}

/// Outcome of one named case.
#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

/// A named generator of random instances plus the graph it exercises.
pub struct Case {
    pub name: &'static str,
    pub gen: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>,
    pub build: Box<Build>,
}

impl Case {
    pub fn new(
        name: &'static str,
        gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
        build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name,
            gen: Box::new(gen),
            build: Box::new(build),
        }
    }

    pub fn run(&self, instances: usize, seed: u64) -> Result<CaseReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let inputs = (self.gen)(&mut rng);
            worst = worst.max(instance_error(&*self.build, &inputs, &mut rng)?);
        }
        Ok(CaseReport {
            name: self.name.to_string(),
            instances,
            max_rel_error: worst,
        })
    }
}

/// Uniform draw in [-1, 1).
pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Uniform draw with magnitudes in [0.05, 1): keeps piecewise ops off their kinks.
fn off_kink(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.2..2.0))
}

/// Fractional sampling coordinates away from lattice lines, partly outside the map.
fn sample_coords(rng: &mut impl Rng, n: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[n, 2], |i| {
        let ext = if i % 2 == 0 { h } else { w } as f64;
        let base = rng.random_range(-2..(ext as i64 + 1)) as f64;
        base + rng.random_range(0.1..0.9)
    })
}

fn labels(rng: &mut impl Rng, n: usize, k: usize, hole: f64) -> Vec<Option<usize>> {
    (0..n)
        .map(|_| (!rng.random_bool(hole)).then(|| rng.random_range(0..k)))
        .collect()
}

/// One case per differentiable primitive of the graph.
pub fn primitive_cases() -> Vec<Case> {
    let mut v = vec![
        Case::new("add", |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[3, 4])], |g, x| g.add(x[0], x[1])),
        Case::new("sub", |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[3, 4])], |g, x| g.sub(x[0], x[1])),
        Case::new("mul", |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[3, 4])], |g, x| g.mul(x[0], x[1])),
        Case::new(
            "mul_scalar",
            |r| vec![rand_tensor(r, &[2, 5]), rand_tensor(r, &[])],
            |g, x| g.mul(x[0], x[1]),
        ),
        Case::new("relu", |r| vec![off_kink(r, &[4, 5])], |g, x| g.relu(x[0])),
        Case::new("elu_plus_one", |r| vec![off_kink(r, &[4, 5])], |g, x| g.elu_plus_one(x[0])),
        Case::new("elu", |r| vec![off_kink(r, &[4, 5])], |g, x| g.elu(x[0])),
        Case::new("tanh", |r| vec![rand_tensor(r, &[4, 5])], |g, x| g.tanh(x[0])),
        Case::new("exp", |r| vec![rand_tensor(r, &[4, 5])], |g, x| g.exp(x[0])),
        Case::new("log", |r| vec![positive(r, &[4, 5])], |g, x| g.log(x[0])),
        Case::new("scale", |r| vec![rand_tensor(r, &[4, 5])], |g, x| g.scale(x[0], -1.7)),
        Case::new("add_scalar", |r| vec![rand_tensor(r, &[4, 5])], |g, x| g.add_scalar(x[0], 0.3)),
        Case::new("reshape", |r| vec![rand_tensor(r, &[4, 6])], |g, x| g.reshape(x[0], &[2, 3, 4])),
        Case::new(
            "matmul",
            |r| vec![rand_tensor(r, &[7, 5]), rand_tensor(r, &[5, 3])],
            |g, x| g.matmul(x[0], x[1]),
        ),
        Case::new("transpose", |r| vec![rand_tensor(r, &[3, 5])], |g, x| g.transpose(x[0])),
        Case::new(
            "add_row_bias",
            |r| vec![rand_tensor(r, &[2, 3, 4]), rand_tensor(r, &[4])],
            |g, x| g.add_row_bias(x[0], x[1]),
        ),
        Case::new(
            "div_rows",
            |r| vec![rand_tensor(r, &[5, 3]), positive(r, &[5])],
            |g, x| g.div_rows(x[0], x[1]),
        ),
        Case::new("softmax", |r| vec![rand_tensor(r, &[3, 5])], |g, x| g.softmax(x[0])),
        Case::new("sum_axes", |r| vec![rand_tensor(r, &[3, 4, 2])], |g, x| g.sum_axes(x[0], &[0, 2])),
        Case::new("mean_axes", |r| vec![rand_tensor(r, &[3, 4, 2])], |g, x| g.mean_axes(x[0], &[1])),
        Case::new("mean_all", |r| vec![rand_tensor(r, &[3, 4])], |g, x| {
            let m = g.mean_all(x[0])?;
            g.reshape(m, &[1])
        }),
        Case::new(
            "concat",
            |r| vec![rand_tensor(r, &[2, 3, 2]), rand_tensor(r, &[2, 3, 3])],
            |g, x| g.concat(&[x[0], x[1]], 2),
        ),
        Case::new(
            "concat_axis0",
            |r| vec![rand_tensor(r, &[1, 3, 2]), rand_tensor(r, &[2, 3, 2])],
            |g, x| g.concat(&[x[0], x[1]], 0),
        ),
        Case::new("slice_last", |r| vec![rand_tensor(r, &[3, 6])], |g, x| g.slice_last(x[0], 2, 3)),
        Case::new(
            "conv2d",
            |r| vec![rand_tensor(r, &[5, 5, 2]), rand_tensor(r, &[3, 3, 2, 4])],
            |g, x| g.conv2d(x[0], x[1], 1, 1),
        ),
        Case::new(
            "conv2d_strided",
            |r| vec![rand_tensor(r, &[8, 5, 3]), rand_tensor(r, &[3, 3, 3, 2])],
            |g, x| g.conv2d_strided(x[0], x[1], (2, 1), (1, 1)),
        ),
        Case::new("avgpool2", |r| vec![rand_tensor(r, &[4, 6, 2])], |g, x| g.avgpool2(x[0])),
        Case::new("upsample_bilinear", |r| vec![rand_tensor(r, &[3, 4, 2])], |g, x| g.upsample_bilinear(x[0], 2)),
        Case::new(
            "bilinear_sample",
            |r| vec![rand_tensor(r, &[4, 5, 3]), sample_coords(r, 6, 4, 5)],
            |g, x| g.bilinear_sample(x[0], x[1]),
        ),
        Case::new(
            "gather_rows",
            |r| vec![rand_tensor(r, &[6, 3])],
            |g, x| g.gather_rows(x[0], &[5, 0, 0, 2, 5, 1, 3]),
        ),
        Case::new(
            "window_dot",
            |r| vec![rand_tensor(r, &[4, 3]), rand_tensor(r, &[4, 5, 3])],
            |g, x| g.window_dot(x[0], x[1]),
        ),
        Case::new("normalize_last", |r| vec![positive(r, &[4, 5])], |g, x| g.normalize_last(x[0], 1e-9)),
        Case::new(
            "window_combine",
            |r| vec![rand_tensor(r, &[4, 5]), rand_tensor(r, &[4, 5, 3])],
            |g, x| g.window_combine(x[0], x[1]),
        ),
        Case::new("l2_normalize_rows", |r| vec![off_kink(r, &[4, 5])], |g, x| g.l2_normalize_rows(x[0])),
    ];
    v.push(Case::new(
        "segment_mean",
        |r| vec![rand_tensor(r, &[9, 3])],
        |g, x| {
            let seg = [Some(0), Some(2), None, Some(0), Some(2), Some(2), None, Some(0), Some(3)];
            g.segment_mean(x[0], &seg, 4)
        },
    ));
    v.push(Case::new(
        "nll_pick",
        |r| vec![positive(r, &[6, 4])],
        |g, x| {
            let t = [Some(1), None, Some(3), Some(0), Some(1), Some(2)];
            let s = g.nll_pick(x[0], &t, 1e-12, 5.0)?;
            g.reshape(s, &[1])
        },
    ));
    v.push(Case::new(
        "composite",
        |r| {
            let k = r.random_range(2..5);
            vec![rand_tensor(r, &[4, 3]), rand_tensor(r, &[3, k]), labels_tensor(r, 4, k)]
        },
        |g, x| {
            let h = g.matmul(x[0], x[1])?;
            let t = g.tanh(h)?;
            let e = g.exp(t)?;
            let p = g.softmax(e)?;
            let q = g.mul(p, x[2])?;
            let s = g.sum_axes(q, &[1])?;
            let l = g.add_scalar(s, 0.5)?;
            g.log(l)
        },
    ));
    v
}

fn labels_tensor(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor {
    let l = labels(rng, n, k, 0.0);
    Tensor::from_fn(&[n, k], |i| if l[i / k] == Some(i % k) { 1.0 } else { 0.0 })
}

/// Largest accepted relative error for a passing case.
pub const TOLERANCE: f64 = 1e-5;

fn fixed_cmap(seed: u64, h: usize, w: usize, p: usize) -> CoordMap {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let coords = (0..h * w * p)
        .map(|_| (r.random_range(0..h), r.random_range(0..w)))
        .collect();
    CoordMap { h, w, p, coords }
}

fn fixed_mask() -> CorrectMask {
    let mask = vec![Some(0), Some(2), None, Some(0), Some(2), Some(0), None, Some(2), Some(0)];
    CorrectMask { n_g: 7, mask }
}

fn mv(var: Var) -> MultivariateFeature {
    MultivariateFeature {
        var,
        m: 2,
        h: 3,
        w: 3,
        width: 3,
    }
}

fn fixed_protos(seed: u64) -> Vec<Tensor> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..2).map(|_| rand_tensor(&mut r, &[3, 3])).collect()
}

fn deformable_offsets(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1..1) as f64 + rng.random_range(0.1..0.9))
}

fn as_vector(g: &mut Graph, s: Var) -> Result<Var> {
    g.reshape(s, &[1])
}

/// Cases for the composite model paths: both attention mechanisms, the
/// deformable convolution and each loss term.
pub fn model_cases() -> Vec<Case> {
    let dims = |r: &mut ChaCha8Rng, n: usize, c: usize| {
        let mut v = vec![rand_tensor(r, &[n, c]), rand_tensor(r, &[n, c])];
        v.extend((0..3).map(|_| rand_tensor(r, &[c, c]).map(|x| 0.5 * x)));
        v
    };
    let cmap = fixed_cmap(3, 2, 3, 4);
    let loss_cfg = LossConfig {
        lambda2: 1.0,
        ..LossConfig::default()
    };
    let total_cfg = loss_cfg.clone();
    let protos = fixed_protos(5);
    let protos_total = protos.clone();
    let present = vec![true, false, true];
    let present_total = present.clone();
    vec![
        Case::new(
            "linear_attention",
            move |r| dims(r, 6, 3),
            |g, x| {
                let q = g.matmul(x[0], x[2])?;
                let k = g.matmul(x[0], x[3])?;
                let v = g.matmul(x[0], x[4])?;
                let parts = kernelized_attention(g, q, k, v)?;
                g.add(x[0], parts.out)
            },
        ),
        Case::new(
            "windowed_attention",
            move |r| dims(r, 6, 3),
            move |g, x| {
                let q = g.matmul(x[0], x[2])?;
                let k = g.matmul(x[1], x[3])?;
                let v = g.matmul(x[1], x[4])?;
                let (o, _) = window_attention_core(g, q, k, v, &cmap)?;
                g.add(x[0], o)
            },
        ),
        Case::new(
            "deformable_conv",
            |r| {
                vec![
                    rand_tensor(r, &[4, 4, 2]),
                    deformable_offsets(r, &[4, 4, 18]),
                    rand_tensor(r, &[3, 3, 2, 2]),
                    rand_tensor(r, &[2]),
                ]
            },
            |g, x| deformable_sample_conv(g, x[0], x[1], x[2], x[3], 3),
        ),
        Case::new(
            "ce_loss",
            |r| vec![rand_tensor(r, &[3, 3, 4])],
            |g, x| {
                let probs = upsampled_probs(g, x[0], 2)?;
                let t: Vec<Option<usize>> = (0..36).map(|i| Some((i * 7 + i / 6) % 4)).collect();
                let l = ce_loss(g, probs, &t, Reduction::Mean)?;
                as_vector(g, l)
            },
        ),
        Case::new(
            "contrastive_loss",
            |r| vec![rand_tensor(r, &[9, 6])],
            move |g, x| {
                let l = contrastive_with(g, &mv(x[0]), &fixed_mask(), &protos, &present, &loss_cfg)?;
                as_vector(g, l)
            },
        ),
        Case::new(
            "mf_loss",
            |r| vec![rand_tensor(r, &[9, 6])],
            |g, x| {
                let bank = class_prototypes(g, &mv(x[0]), &fixed_mask(), 3)?;
                let l = mf_loss(g, &bank, &fixed_mask())?;
                as_vector(g, l)
            },
        ),
        Case::new(
            "total_loss",
            |r| vec![rand_tensor(r, &[3, 3, 3]), rand_tensor(r, &[9, 6])],
            move |g, x| {
                let probs = upsampled_probs(g, x[0], 1)?;
                let t: Vec<Option<usize>> = (0..9).map(|i| Some(i % 3)).collect();
                let ce = ce_loss(g, probs, &t, Reduction::Mean)?;
                let cm = fixed_mask();
                let cr = contrastive_with(g, &mv(x[1]), &cm, &protos_total, &present_total, &total_cfg)?;
                let bank = class_prototypes(g, &mv(x[1]), &cm, 3)?;
                let mf = mf_loss(g, &bank, &cm)?;
                let l = total_loss(g, ce, cr, mf, &total_cfg)?;
                as_vector(g, l)
            },
        ),
    ]
}

/// Runs every primitive and model-path case.
pub fn run_all(instances: usize, seed: u64) -> Result<Vec<CaseReport>> {
    primitive_cases()
        .iter()
        .chain(model_cases().iter())
        .enumerate()
        .map(|(i, c)| c.run(instances, seed.wrapping_add(i as u64)))
        .collect()
}

/// True when every report is within [`TOLERANCE`].
pub fn all_pass(reports: &[CaseReport]) -> bool {
    reports.iter().all(|r| r.max_rel_error <= TOLERANCE)
}
