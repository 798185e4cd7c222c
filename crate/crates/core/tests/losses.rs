use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdcpc_core::gradcheck::{model_cases, rand_tensor};
use sdcpc_core::losses::{
    argmax_labels, ce_loss, class_prototypes, contrastive_loss, contrastive_with, correct_mask, downsample_labels, mf_loss,
    total_loss, CorrectMask, LossConfig, MultivariateFeature, MultivariateHead, Reduction, Similarity,
};
use sdcpc_core::{Error, Graph, ParamStore, Tensor};

fn feature(g: &mut Graph, x: Tensor, m: usize, h: usize, w: usize) -> MultivariateFeature {
    let width = x.shape()[1] / m;
    let var = g.variable(x);
    MultivariateFeature { var, m, h, w, width }
}

fn random_mask(r: &mut impl Rng, n: usize, cls: usize) -> CorrectMask {
    let mask: Vec<Option<usize>> = (0..n)
        .map(|_| r.random_bool(0.7).then(|| r.random_range(0..cls)))
        .collect();
    let n_g = mask.iter().flatten().count();
    CorrectMask { mask, n_g }
}

fn scalar(g: &mut Graph, v: f64) -> sdcpc_core::Var {
    g.constant(Tensor::scalar(v))
}

#[test]
fn prototypes_match_brute_force_means() {
    let mut r = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    let mut saw_empty = false;
    for _ in 0..100 {
        let (h, w) = (r.random_range(1..6), r.random_range(1..6));
        let m = r.random_range(1..4);
        let width = r.random_range(1..5);
        let cls = r.random_range(2..6);
        let n = h * w;
        let x = rand_tensor(&mut r, &[n, m * width]);
        let cm = random_mask(&mut r, n, cls);
        let mut g = Graph::new();
        let mf = feature(&mut g, x.clone(), m, h, w);
        let bank = class_prototypes(&mut g, &mf, &cm, cls).unwrap();
        for c in 0..cls {
            let members: Vec<usize> = (0..n).filter(|&i| cm.mask[i] == Some(c)).collect();
            assert_eq!(bank.present[c], !members.is_empty());
            saw_empty |= members.is_empty();
            for v in 0..m {
                let mean = g.value(bank.means[v]);
                let proto = g.value(bank.protos[v]);
                let mut brute = vec![0.0; width];
                for &i in &members {
                    for (k, b) in brute.iter_mut().enumerate() {
                        *b += x.at(&[i, v * width + k]);
                    }
                }
                let norm: f64 = if members.is_empty() {
                    0.0
                } else {
                    brute.iter_mut().for_each(|b| *b /= members.len() as f64);
                    brute.iter().map(|b| b * b).sum::<f64>().sqrt()
                };
                for (k, b) in brute.iter().enumerate() {
                    worst = worst.max((mean.at(&[c, k]) - b).abs());
                    let expect = if members.is_empty() { 0.0 } else { b / norm };
                    worst = worst.max((proto.at(&[c, k]) - expect).abs());
                }
            }
        }
    }
    assert!(saw_empty);
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn constant_feature_prototype_is_its_direction() {
    let mut g = Graph::new();
    let x = Tensor::from_fn(&[4, 2], |i| [3.0, 4.0][i % 2]);
    let mf = feature(&mut g, x, 1, 2, 2);
    let cm = correct_mask(&[1; 4], &[1; 4]).unwrap();
    let bank = class_prototypes(&mut g, &mf, &cm, 2).unwrap();
    assert_eq!(g.value(bank.protos[0]).data(), &[0.0, 0.0, 0.6, 0.8]);
    assert_eq!(bank.present, vec![false, true]);
}

#[test]
fn single_present_class_gives_zero_contrastive_loss() {
    let mut r = ChaCha8Rng::seed_from_u64(32);
    let mut g = Graph::new();
    let mf = feature(&mut g, rand_tensor(&mut r, &[6, 4]), 2, 2, 3);
    let cm = correct_mask(&[2; 6], &[2, 2, 2, 0, 2, 1]).unwrap();
    let bank = class_prototypes(&mut g, &mf, &cm, 3).unwrap();
    let l = contrastive_loss(&mut g, &mf, &cm, &bank, &LossConfig::default()).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);
}

#[test]
fn equal_similarities_give_log_one_plus_negatives() {
    let mut g = Graph::new();
    let x = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    let mf = feature(&mut g, x, 1, 1, 1);
    let cm = CorrectMask {
        mask: vec![Some(0)],
        n_g: 1,
    };
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let protos = vec![Tensor::new(&[3, 2], vec![s, s, s, -s, s, s]).unwrap()];
    let l = contrastive_with(&mut g, &mf, &cm, &protos, &[true; 3], &LossConfig::default()).unwrap();
    assert!((g.value(l).item().unwrap() - 3f64.ln()).abs() <= 1e-12);
}

#[test]
fn contrastive_scalar_case() {
    let mut g = Graph::new();
    let mf = feature(&mut g, Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap(), 1, 1, 1);
    let cm = CorrectMask {
        mask: vec![Some(0)],
        n_g: 1,
    };
    let protos = vec![Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()];
    let cfg = LossConfig {
        tau: 1.0,
        similarity: Similarity::Dot,
        ..LossConfig::default()
    };
    let l = contrastive_with(&mut g, &mf, &cm, &protos, &[true, true], &cfg).unwrap();
    let expect = (1.0 + (-2.0f64).exp()).ln();
    assert!((g.value(l).item().unwrap() - expect).abs() <= 1e-12);
    assert!((expect - 0.12693).abs() < 1e-5);
}

fn mf_of(variates: [[f64; 2]; 2]) -> f64 {
    let mut g = Graph::new();
    let x = Tensor::from_fn(&[1, 4], |i| variates[i / 2][i % 2]);
    let mf = feature(&mut g, x, 2, 1, 1);
    let cm = CorrectMask {
        mask: vec![Some(0)],
        n_g: 1,
    };
    let bank = class_prototypes(&mut g, &mf, &cm, 2).unwrap();
    let l = mf_loss(&mut g, &bank, &cm).unwrap();
    g.value(l).item().unwrap()
}

#[test]
fn mf_loss_orthogonal_and_identical_cases() {
    assert_eq!(mf_of([[1.0, 0.0], [0.0, 1.0]]), 0.0);
    assert!((mf_of([[0.6, 0.8], [0.6, 0.8]]) - 1.0).abs() <= 1e-12);
}

#[test]
fn mf_loss_three_variates_matches_pair_loop() {
    let mut r = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..20 {
        let x = rand_tensor(&mut r, &[8, 6]);
        let cm = random_mask(&mut r, 8, 3);
        let mut g = Graph::new();
        let mf = feature(&mut g, x, 3, 2, 4);
        let bank = class_prototypes(&mut g, &mf, &cm, 3).unwrap();
        let l = mf_loss(&mut g, &bank, &cm).unwrap();
        let counts = cm.class_counts(3);
        let mut expect = 0.0;
        for c in 0..3 {
            let p: Vec<&[f64]> = (0..3).map(|v| &g.value(bank.protos[v]).data()[c * 2..c * 2 + 2]).collect();
            let mut s = 0.0;
            for a in 0..3 {
                for b in a + 1..3 {
                    s += p[a][0] * p[b][0] + p[a][1] * p[b][1];
                }
            }
            expect += counts[c] as f64 * s / 3.0;
        }
        if cm.n_g > 0 {
            expect /= cm.n_g as f64;
        }
        assert!((g.value(l).item().unwrap() - expect).abs() <= 1e-12);
    }
}

#[test]
fn uniform_probabilities_give_ln_cls() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::full(&[3, 5, 4], 0.25));
    let t: Vec<Option<usize>> = (0..15).map(|i| Some(i % 4)).collect();
    let l = ce_loss(&mut g, p, &t, Reduction::Mean).unwrap();
    assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() <= 1e-12);
}

#[test]
fn one_hot_correct_probabilities_give_zero_ce() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_fn(&[2, 2, 3], |i| if i % 3 == 1 { 1.0 } else { 0.0 }));
    let l = ce_loss(&mut g, p, &[Some(1); 4], Reduction::Mean).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);
}

#[test]
fn ce_matches_scalar_recomputation() {
    let mut r = ChaCha8Rng::seed_from_u64(34);
    let raw = Tensor::from_fn(&[3, 4, 5], |_| r.random_range(0.01..1.0));
    let probs = Tensor::from_fn(&[3, 4, 5], |i| {
        let row = &raw.data()[(i / 5) * 5..(i / 5) * 5 + 5];
        raw.data()[i] / row.iter().sum::<f64>()
    });
    let t: Vec<Option<usize>> = (0..12).map(|i| (i % 5 != 3).then_some(i % 5)).collect();
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let l = ce_loss(&mut g, p, &t, Reduction::Mean).unwrap();
    let labelled: Vec<(usize, usize)> = t.iter().enumerate().filter_map(|(i, c)| c.map(|c| (i, c))).collect();
    let expect = -labelled.iter().map(|&(i, c)| probs.data()[i * 5 + c].ln()).sum::<f64>() / labelled.len() as f64;
    assert!((g.value(l).item().unwrap() - expect).abs() <= 1e-12);
}

#[test]
fn total_loss_arithmetic() {
    let mut g = Graph::new();
    let (ce, cr, mf) = (scalar(&mut g, 1.0), scalar(&mut g, 2.0), scalar(&mut g, 4.0));
    let cfg = LossConfig {
        lambda1: 0.5,
        lambda2: 0.25,
        ..LossConfig::default()
    };
    let t = total_loss(&mut g, ce, cr, mf, &cfg).unwrap();
    assert_eq!(g.value(t).item().unwrap(), 3.0);
    let zero = LossConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        ..LossConfig::default()
    };
    let t = total_loss(&mut g, ce, cr, mf, &zero).unwrap();
    assert_eq!(g.value(t).item().unwrap(), 1.0);
}

#[test]
fn loss_paths_pass_finite_difference_checks() {
    for (i, case) in model_cases().iter().enumerate() {
        let rep = case.run(10, 500 + i as u64).unwrap();
        assert!(rep.max_rel_error <= 1e-5, "{}: {}", rep.name, rep.max_rel_error);
    }
}

#[test]
fn correct_mask_extremes_and_loop_oracle() {
    let all = correct_mask(&[1, 2, 0], &[1, 2, 0]).unwrap();
    assert_eq!(all.n_g, 3);
    let none = correct_mask(&[1, 1], &[0, 0]).unwrap();
    assert_eq!((none.n_g, none.as_ints()), (0, vec![-1, -1]));
    let mut r = ChaCha8Rng::seed_from_u64(35);
    let pred: Vec<usize> = (0..50).map(|_| r.random_range(0..3)).collect();
    let gt: Vec<usize> = (0..50).map(|_| r.random_range(0..3)).collect();
    let cm = correct_mask(&pred, &gt).unwrap();
    for i in 0..50 {
        let expect = if pred[i] == gt[i] { gt[i] as i64 } else { -1 };
        assert_eq!(cm.as_ints()[i], expect);
    }
}

#[test]
fn multivariate_projection_shapes_and_joint_mean() {
    let mut r = ChaCha8Rng::seed_from_u64(36);
    let mut store = ParamStore::new();
    assert!(matches!(MultivariateHead::new(&mut store, 10, 4, 3, &mut r), Err(Error::Config(_))));
    let head = MultivariateHead::new(&mut store, 64, 4, 3, &mut r).unwrap();
    let mut g = Graph::with_params(&store);
    let d = g.constant(rand_tensor(&mut r, &[2, 3, 64]));
    let mf = head.project_multivariate(&mut g, d).unwrap();
    assert_eq!(mf.to_tensor(&g).shape(), &[4, 2, 3, 16]);
    let logits = head.joint_logits(&mut g, &mf).unwrap();
    let feat = g.value(mf.var).clone();
    for pix in 0..6 {
        for k in 0..3 {
            let mut s = 0.0;
            for (v, h) in head.heads.iter().enumerate() {
                let wt = store.get(h.weight);
                let mut z = store.get(h.bias).data()[k];
                for j in 0..16 {
                    z += feat.at(&[pix, v * 16 + j]) * wt.at(&[j, k]);
                }
                s += z;
            }
            assert!((g.value(logits).data()[pix * 3 + k] - s / 4.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn label_helpers() {
    let t = Tensor::new(&[1, 2, 3], vec![0.1, 0.7, 0.2, 0.5, 0.4, 0.1]).unwrap();
    assert_eq!(argmax_labels(&t), vec![1, 0]);
    let gt: Vec<usize> = (0..16).collect();
    assert_eq!(downsample_labels(&gt, 4, 4, 2), vec![0, 2, 8, 10]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sentinel_pixels_do_not_affect_prototype_losses(seed in 0u64..10_000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut r, &[12, 4]);
        let cm = random_mask(&mut r, 12, 3);
        let mut y = x.clone();
        for i in 0..12 {
            if cm.mask[i].is_none() {
                for k in 0..4 {
                    y.set(&[i, k], r.random_range(-5.0..5.0));
                }
            }
        }
        let eval = |t: Tensor| {
            let mut g = Graph::new();
            let mf = feature(&mut g, t, 2, 3, 4);
            let bank = class_prototypes(&mut g, &mf, &cm, 3).unwrap();
            let cr = contrastive_loss(&mut g, &mf, &cm, &bank, &LossConfig::default()).unwrap();
            let m = mf_loss(&mut g, &bank, &cm).unwrap();
            (g.value(cr).item().unwrap(), g.value(m).item().unwrap())
        };
        prop_assert_eq!(eval(x), eval(y));
    }

    #[test]
    fn present_prototypes_are_unit_norm_and_mf_bounded(seed in 0u64..10_000, m in 1usize..4) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut r, &[10, 2 * m]);
        let cm = random_mask(&mut r, 10, 4);
        let mut g = Graph::new();
        let mf = feature(&mut g, x, m, 2, 5);
        let bank = class_prototypes(&mut g, &mf, &cm, 4).unwrap();
        for v in 0..m {
            let p = g.value(bank.protos[v]);
            for c in 0..4 {
                let n: f64 = (0..2).map(|k| p.at(&[c, k]).powi(2)).sum::<f64>().sqrt();
                if bank.present[c] {
                    prop_assert!((n - 1.0).abs() <= 1e-10);
                } else {
                    prop_assert_eq!(n, 0.0);
                }
            }
        }
        let l = mf_loss(&mut g, &bank, &cm).unwrap();
        let v = g.value(l).item().unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
    }

    #[test]
    fn contrastive_is_monotone_in_similarities(seed in 0u64..10_000, delta in 0.01f64..0.5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cfg = LossConfig { tau: 1.0, similarity: Similarity::Dot, ..LossConfig::default() };
        let base = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let cm = CorrectMask { mask: vec![Some(0)], n_g: 1 };
        let protos = vec![Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 })];
        let eval = |q: [f64; 3]| {
            let mut g = Graph::new();
            let mf = feature(&mut g, Tensor::new(&[1, 3], q.to_vec()).unwrap(), 1, 1, 1);
            let l = contrastive_with(&mut g, &mf, &cm, &protos, &[true; 3], &cfg).unwrap();
            g.value(l).item().unwrap()
        };
        let l0 = eval(base);
        prop_assert!(eval([base[0] + delta, base[1], base[2]]) < l0);
        prop_assert!(eval([base[0], base[1] + delta, base[2]]) > l0);
        prop_assert!(eval([base[0], base[1], base[2] + delta]) > l0);
    }
}
