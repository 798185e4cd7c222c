//! Scaling benchmarks for the attention mechanisms and FLOP-counter audits.
//!
//! Attention cores are timed on shared projected inputs q, k, v [N, C]:
//! windowed attention against the dense masked oracle, and kernelized
//! linear attention against its dense N × N form.

use std::io::Write;
use std::time::Instant;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::dssa::{window_attention_core, window_stage, CoordMap, Dssa, DssaConfig, Stage2Mode};
use crate::error::Result;
use crate::flops;
use crate::graph::Graph;
use crate::model::{Model, ModelConfig};
use crate::oracle::{dense_kernelized_attention_oracle, dense_masked_attention_oracle, flop_model};
use crate::params::ParamStore;
use crate::ssea::{kernelized_attention, Ssea, SseaConfig};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "mechanism,n,p,c,wall_time_s,flops_measured,flops_model";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F64,
    /// Generic single-precision kernels instead of the graph and oracle paths.
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub ns: Vec<usize>,
    pub p: usize,
    pub c: usize,
    pub repeats: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ns: vec![1024, 4096, 16384],
            p: 4,
            c: 64,
            repeats: 3,
            seed: 1,
            precision: Precision::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub mechanism: String,
    pub n: usize,
    pub p: usize,
    pub c: usize,
    pub wall_time_s: f64,
    pub flops_measured: u64,
    pub flops_model: u64,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6e},{},{}",
            self.mechanism, self.n, self.p, self.c, self.wall_time_s, self.flops_measured, self.flops_model
        )
    }
}

/// Least-squares slope of ln y against ln x.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

fn side_of(n: usize) -> (usize, usize) {
    let h = (n as f64).sqrt().round() as usize;
    if h * h == n {
        (h, h)
    } else {
        (1, n)
    }
}

/// Random coordinate map over an N-pixel reference decoded from random head outputs.
pub fn random_cmap(rng: &mut impl Rng, n: usize, p: usize) -> Result<CoordMap> {
    let (h, w) = side_of(n);
    let raw = Tensor::from_fn(&[h, w, 2 * p], |_| rng.random_range(-2.0..2.0));
    CoordMap::decode(&raw, p, h.max(w) as f64 / 4.0)
}

fn gaussian(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn time_min<T>(repeats: usize, mut f: impl FnMut() -> T) -> (T, f64) {
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        let r = f();
        best = best.min(t0.elapsed().as_secs_f64());
        out = Some(r);
    }
    (out.unwrap(), best)
}

/// Windowed attention on projected rows, through the graph.
pub fn run_windowed(q: &Tensor, k: &Tensor, v: &Tensor, cmap: &CoordMap) -> Result<(Tensor, u64)> {
    let (r, fl) = flops::measure(|| -> Result<Tensor> {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let (o, _) = window_attention_core(&mut g, qv, kv, vv, cmap)?;
        Ok(g.value(o).clone())
    });
    Ok((r?, fl))
}

/// FLOPs of the per-window stage alone, with φ(q) and φ(k) precomputed.
pub fn window_stage_flops(q: &Tensor, k: &Tensor, v: &Tensor, cmap: &CoordMap) -> Result<u64> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let fq = g.elu_plus_one(qv)?;
    let fk = g.elu_plus_one(kv)?;
    let (r, fl) = flops::measure(|| window_stage(&mut g, fq, fk, vv, cmap));
    r?;
    Ok(fl)
}

/// Kernelized linear attention on projected rows, through the graph.
pub fn run_linear(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, u64)> {
    let (r, fl) = flops::measure(|| -> Result<Tensor> {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let parts = kernelized_attention(&mut g, qv, kv, vv)?;
        Ok(g.value(parts.out).clone())
    });
    Ok((r?, fl))
}

fn phi<T: Float>(x: T) -> T {
    if x > T::zero() {
        x + T::one()
    } else {
        x.exp()
    }
}

/// Generic windowed kernel used by the single-precision mode.
pub fn windowed_kernel<T: Float>(q: &[T], k: &[T], v: &[T], idx: &[usize], n: usize, p: usize, c: usize) -> Vec<T> {
    let fq: Vec<T> = q.iter().map(|&x| phi(x)).collect();
    let fk: Vec<T> = k.iter().map(|&x| phi(x)).collect();
    let mut out = vec![T::zero(); n * c];
    let mut w = vec![T::zero(); p];
    for i in 0..n {
        let qi = &fq[i * c..(i + 1) * c];
        let mut s = T::zero();
        for j in 0..p {
            let r = idx[i * p + j];
            let d = qi.iter().zip(&fk[r * c..(r + 1) * c]).fold(T::zero(), |a, (&x, &y)| a + x * y);
            w[j] = d;
            s = s + d;
        }
        let s = s.max(T::from(crate::dssa::WINDOW_FLOOR).unwrap());
        for j in 0..p {
            let r = idx[i * p + j];
            let wj = w[j] / s;
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(&v[r * c..(r + 1) * c]) {
                *o = *o + wj * x;
            }
        }
    }
    out
}

/// Generic dense masked kernel used by the single-precision mode.
pub fn dense_masked_kernel<T: Float>(q: &[T], k: &[T], v: &[T], idx: &[usize], n: usize, p: usize, c: usize) -> Vec<T> {
    let nr = k.len() / c;
    let fq: Vec<T> = q.iter().map(|&x| phi(x)).collect();
    let fk: Vec<T> = k.iter().map(|&x| phi(x)).collect();
    let mut out = vec![T::zero(); n * c];
    let mut row = vec![T::zero(); nr];
    let mut mask = vec![T::zero(); nr];
    for i in 0..n {
        mask.iter_mut().for_each(|m| *m = T::zero());
        for &r in &idx[i * p..(i + 1) * p] {
            mask[r] = mask[r] + T::one();
        }
        let qi = &fq[i * c..(i + 1) * c];
        let mut s = T::zero();
        for j in 0..nr {
            let d = qi.iter().zip(&fk[j * c..(j + 1) * c]).fold(T::zero(), |a, (&x, &y)| a + x * y);
            row[j] = d * mask[j];
            s = s + row[j];
        }
        for j in 0..nr {
            let wj = row[j] / s;
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(&v[j * c..(j + 1) * c]) {
                *o = *o + wj * x;
            }
        }
    }
    out
}

/// Generic linear-attention kernel used by the single-precision mode.
pub fn linear_kernel<T: Float>(q: &[T], k: &[T], v: &[T], c: usize) -> Vec<T> {
    let fq: Vec<T> = q.iter().map(|&x| phi(x)).collect();
    let fk: Vec<T> = k.iter().map(|&x| phi(x)).collect();
    let mut kv = vec![T::zero(); c * c];
    let mut z = vec![T::zero(); c];
    for (kr, vr) in fk.chunks_exact(c).zip(v.chunks_exact(c)) {
        for a in 0..c {
            z[a] = z[a] + kr[a];
            for b in 0..c {
                kv[a * c + b] = kv[a * c + b] + kr[a] * vr[b];
            }
        }
    }
    let mut out = Vec::with_capacity(q.len());
    for qr in fq.chunks_exact(c) {
        let den = qr.iter().zip(&z).fold(T::zero(), |s, (&x, &y)| s + x * y);
        for b in 0..c {
            let num = (0..c).fold(T::zero(), |s, a| s + qr[a] * kv[a * c + b]);
            out.push(num / den);
        }
    }
    out
}

/// Generic dense kernelized attention used by the single-precision mode.
pub fn dense_kernelized_kernel<T: Float>(q: &[T], k: &[T], v: &[T], c: usize) -> Vec<T> {
    let nr = k.len() / c;
    let all: Vec<usize> = (0..q.len() / c).flat_map(|_| 0..nr).collect();
    dense_masked_kernel(q, k, v, &all, q.len() / c, nr, c)
}

fn to_f32(t: &Tensor) -> Vec<f32> {
    t.data().iter().map(|&x| x as f32).collect()
}

/// Runs the four attention mechanisms over the N sweep.
pub fn attention_sweep(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (p, c) = (cfg.p, cfg.c);
    let mut rows = Vec::new();
    for &n in &cfg.ns {
        let q = gaussian(&mut rng, &[n, c]).map(|x| 0.3 * x);
        let k = gaussian(&mut rng, &[n, c]).map(|x| 0.3 * x);
        let v = gaussian(&mut rng, &[n, c]);
        let cmap = random_cmap(&mut rng, n, p)?;
        let idx = cmap.flat_indices();
        let dense_reps = if n >= 16384 { 1 } else { cfg.repeats.min(2) };
        let (nu, pu, cu) = (n as u64, p as u64, c as u64);
        let row = |m: &str, t: f64, fm: u64, model: u64| BenchRow {
            mechanism: m.to_string(),
            n,
            p,
            c,
            wall_time_s: t,
            flops_measured: fm,
            flops_model: model,
        };
        match cfg.precision {
            Precision::F64 => {
                let fl = run_windowed(&q, &k, &v, &cmap)?.1;
                let (_, t) = time_min(cfg.repeats, || windowed_kernel(q.data(), k.data(), v.data(), &idx, n, p, c));
                rows.push(row("windowed", t, fl, nu * pu * cu));
                let sel: Vec<Vec<usize>> = (0..n).map(|i| cmap.selected(i)).collect();
                let (_, t) = time_min(dense_reps, || dense_masked_attention_oracle(&q, &k, &v, &sel));
                rows.push(row("dense_masked", t, 2 * nu * nu * cu, nu * nu * cu));
                let fl = run_linear(&q, &k, &v)?.1;
                let (_, t) = time_min(cfg.repeats, || linear_kernel(q.data(), k.data(), v.data(), c));
                rows.push(row("linear", t, fl, nu * cu * cu));
                let (_, t) = time_min(dense_reps, || dense_kernelized_attention_oracle(&q, &k, &v));
                rows.push(row("dense_kernelized", t, 2 * nu * nu * cu, nu * nu * cu));
            }
            Precision::F32 => {
                let (qf, kf, vf) = (to_f32(&q), to_f32(&k), to_f32(&v));
                let (_, t) = time_min(cfg.repeats, || windowed_kernel(&qf, &kf, &vf, &idx, n, p, c));
                rows.push(row("windowed", t, 2 * nu * pu * cu, nu * pu * cu));
                let (_, t) = time_min(dense_reps, || dense_masked_kernel(&qf, &kf, &vf, &idx, n, p, c));
                rows.push(row("dense_masked", t, 2 * nu * nu * cu, nu * nu * cu));
                let (_, t) = time_min(cfg.repeats, || linear_kernel(&qf, &kf, &vf, c));
                rows.push(row("linear", t, 2 * nu * cu * cu, nu * cu * cu));
                let (_, t) = time_min(dense_reps, || dense_kernelized_kernel(&qf, &kf, &vf, c));
                rows.push(row("dense_kernelized", t, 2 * nu * nu * cu, nu * nu * cu));
            }
        }
    }
    Ok(rows)
}

/// Instrumented forward FLOPs of SSEA and DSSA at one F2 side length.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentFlops {
    pub n: usize,
    pub ssea_measured: u64,
    pub ssea_model: u64,
    pub dssa_measured: u64,
    pub dssa_model: u64,
}

/// Counts FLOPs of one SSEA pass over three frames and one DSSA pass.
pub fn component_flops(h2: usize, c: usize, p: usize, d: usize, seed: u64) -> Result<ComponentFlops> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, 16, &mut rng);
    let ssea = Ssea::new(&mut store, SseaConfig { c, d, proj: 32 }, bb.widths(), &mut rng)?;
    let dcfg = DssaConfig {
        c,
        p,
        hidden: 8,
        max_disp: h2 as f64 / 4.0,
        stage2: Stage2Mode::OneHop,
    };
    let dssa = Dssa::new(&mut store, dcfg, &mut rng)?;
    let mut g = Graph::with_params(&store);
    let mut statics = Vec::new();
    let mut ssea_fl = 0;
    for _ in 0..3 {
        let img = g.constant(Tensor::from_fn(&[2 * h2, 2 * h2, 3], |_| rng.random_range(0.0..1.0)));
        let pyr = bb.encode_frame(&mut g, img)?;
        let (s, fl) = flops::measure(|| ssea.forward(&mut g, &pyr));
        statics.push(s?);
        ssea_fl += fl;
    }
    let (tr, dssa_fl) = flops::measure(|| dssa.forward(&mut g, statics[0], statics[1], statics[2]));
    tr?;
    let m = flop_model((h2 * h2) as u64, c as u64, p as u64, d as u64);
    Ok(ComponentFlops {
        n: h2 * h2,
        ssea_measured: ssea_fl,
        ssea_model: m.ssea as u64,
        dssa_measured: dssa_fl,
        dssa_model: m.dssa as u64,
    })
}

/// Measured/model ratios normalized by the ratio at the first entry.
pub fn calibrated_ratios(measured: &[u64], model: &[u64]) -> Vec<f64> {
    let raw: Vec<f64> = measured.iter().zip(model).map(|(&a, &b)| a as f64 / b as f64).collect();
    raw.iter().map(|r| r / raw[0]).collect()
}

/// FLOPs for one P value: the windowed attention core, its per-window stage
/// and a full model forward.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PSweepPoint {
    pub p: usize,
    pub window_core: u64,
    pub window_stage: u64,
    pub model_term: u64,
    pub step_forward: u64,
}

pub fn p_sweep(ps: &[usize], size: usize, seed: u64) -> Result<Vec<PSweepPoint>> {
    let mut out = Vec::new();
    for &p in ps {
        let cfg = ModelConfig {
            p,
            ..ModelConfig::default()
        };
        let (model, store) = Model::new(cfg.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_fn(&[size, size, 3], |_| rng.random_range(0.0..1.0)))
            .collect();
        let (_, step) = flops::measure(|| -> Result<()> {
            let mut g = Graph::with_params(&store);
            let f = [0, 1, 2].map(|i| g.constant(frames[i].clone()));
            model.forward(&mut g, f)?;
            Ok(())
        });
        let n = (size / 2) * (size / 2);
        let q = gaussian(&mut rng, &[n, cfg.c]);
        let k = gaussian(&mut rng, &[n, cfg.c]);
        let v = gaussian(&mut rng, &[n, cfg.c]);
        let cmap = random_cmap(&mut rng, n, p)?;
        let (_, core) = run_windowed(&q, &k, &v, &cmap)?;
        out.push(PSweepPoint {
            p,
            window_core: core,
            window_stage: window_stage_flops(&q, &k, &v, &cmap)?,
            model_term: (4 * n * p * cfg.c * cfg.c) as u64,
            step_forward: step,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchSummary {
    pub config: BenchConfig,
    /// Mechanism → log-log slope of wall time against N.
    pub slopes: std::collections::BTreeMap<String, f64>,
    pub component_flops: Vec<ComponentFlops>,
    pub ssea_calibrated: Vec<f64>,
    pub dssa_calibrated: Vec<f64>,
    pub p_sweep: Vec<PSweepPoint>,
}

pub fn slopes(rows: &[BenchRow]) -> std::collections::BTreeMap<String, f64> {
    let mut mechs: Vec<&str> = rows.iter().map(|r| r.mechanism.as_str()).collect();
    mechs.dedup();
    let mut mechs: Vec<String> = mechs.into_iter().map(String::from).collect();
    mechs.sort();
    mechs.dedup();
    mechs
        .into_iter()
        .map(|m| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| r.mechanism == m)
                .map(|r| (r.n as f64, r.wall_time_s))
                .unzip();
            let s = loglog_slope(&xs, &ys);
            (m, s)
        })
        .collect()
}

/// Full benchmark: attention sweep, component FLOP audit and P sweep.
pub fn run(cfg: &BenchConfig) -> Result<(Vec<BenchRow>, BenchSummary)> {
    let rows = attention_sweep(cfg)?;
    let comps = [16, 32, 64]
        .iter()
        .map(|&h2| component_flops(h2, cfg.c, cfg.p, 9, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let ssea_cal = calibrated_ratios(
        &comps.iter().map(|c| c.ssea_measured).collect::<Vec<_>>(),
        &comps.iter().map(|c| c.ssea_model).collect::<Vec<_>>(),
    );
    let dssa_cal = calibrated_ratios(
        &comps.iter().map(|c| c.dssa_measured).collect::<Vec<_>>(),
        &comps.iter().map(|c| c.dssa_model).collect::<Vec<_>>(),
    );
    let summary = BenchSummary {
        config: cfg.clone(),
        slopes: slopes(&rows),
        component_flops: comps,
        ssea_calibrated: ssea_cal,
        dssa_calibrated: dssa_cal,
        p_sweep: p_sweep(&[4, 9, 16], 64, cfg.seed)?,
    };
    Ok((rows, summary))
}

pub fn write_csv(rows: &[BenchRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    Ok(())
}
