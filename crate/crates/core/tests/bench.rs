use sdcpc_core::bench::{
    attention_sweep, calibrated_ratios, component_flops, dense_kernelized_kernel, dense_masked_kernel, linear_kernel, loglog_slope,
    p_sweep, random_cmap, run_linear, run_windowed, slopes, window_stage_flops, write_csv, BenchConfig, Precision, CSV_HEADER,
};
use sdcpc_core::gradcheck::rand_tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(precision: Precision) -> BenchConfig {
    BenchConfig {
        ns: vec![64, 256],
        c: 8,
        repeats: 1,
        precision,
        ..BenchConfig::default()
    }
}

#[test]
fn csv_has_one_row_per_mechanism_and_size() {
    for prec in [Precision::F64, Precision::F32] {
        let rows = attention_sweep(&small(prec)).unwrap();
        assert_eq!(rows.len(), 4 * 2);
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 9);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 7));
        assert_eq!(slopes(&rows).len(), 4);
    }
}

#[test]
fn slope_of_a_power_law_is_its_exponent() {
    let xs = [10.0, 100.0, 1000.0];
    let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
    assert!((loglog_slope(&xs, &ys) - 1.5).abs() < 1e-12);
}

#[test]
fn single_precision_kernels_agree_with_graph_paths() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let (n, c, p) = (49, 6, 4);
    let q = rand_tensor(&mut r, &[n, c]);
    let k = rand_tensor(&mut r, &[n, c]);
    let v = rand_tensor(&mut r, &[n, c]);
    let cmap = random_cmap(&mut r, n, p).unwrap();
    let idx = cmap.flat_indices();
    let f = |t: &sdcpc_core::Tensor| t.data().iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let (qf, kf, vf) = (f(&q), f(&k), f(&v));
    let close = |a: &[f32], b: &[f64]| a.iter().zip(b).all(|(x, y)| (*x as f64 - y).abs() < 1e-4);
    let (w, _) = run_windowed(&q, &k, &v, &cmap).unwrap();
    assert!(close(&sdcpc_core::bench::windowed_kernel(&qf, &kf, &vf, &idx, n, p, c), w.data()));
    assert!(close(&dense_masked_kernel(&qf, &kf, &vf, &idx, n, p, c), w.data()));
    let (l, _) = run_linear(&q, &k, &v).unwrap();
    assert!(close(&linear_kernel(&qf, &kf, &vf, c), l.data()));
    assert!(close(&dense_kernelized_kernel(&qf, &kf, &vf, c), l.data()));
}

#[test]
fn windowed_flops_scale_with_n_and_p() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut count = |n: usize, p: usize| {
        let q = rand_tensor(&mut r, &[n, 8]);
        let cmap = random_cmap(&mut r, n, p).unwrap();
        window_stage_flops(&q, &q, &q, &cmap).unwrap()
    };
    let a = count(64, 4);
    assert_eq!(count(256, 4), 4 * a);
    assert_eq!(count(64, 16), 4 * a);
}

#[test]
fn component_counters_track_the_model_within_factor_two() {
    let comps: Vec<_> = [8, 16].iter().map(|&h| component_flops(h, 16, 4, 9, 1).unwrap()).collect();
    let ssea = calibrated_ratios(&comps.iter().map(|c| c.ssea_measured).collect::<Vec<_>>(), &comps.iter().map(|c| c.ssea_model).collect::<Vec<_>>());
    let dssa = calibrated_ratios(&comps.iter().map(|c| c.dssa_measured).collect::<Vec<_>>(), &comps.iter().map(|c| c.dssa_model).collect::<Vec<_>>());
    for r in ssea.iter().chain(&dssa) {
        assert!((0.5..=2.0).contains(r), "{r}");
    }
}

#[test]
fn p_sweep_is_monotone() {
    let pts = p_sweep(&[4, 9, 16], 32, 2).unwrap();
    for w in pts.windows(2) {
        assert!(w[1].step_forward > w[0].step_forward);
        let measured = w[1].window_stage as f64 / w[0].window_stage as f64;
        assert!(w[1].window_core > w[0].window_core);
        let model = w[1].model_term as f64 / w[0].model_term as f64;
        assert!((measured / model - 1.0).abs() <= 0.1);
    }
}
