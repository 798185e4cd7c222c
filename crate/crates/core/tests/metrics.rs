use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdcpc_core::metrics::{video_consistency, Confusion, MetricsAccumulator};

#[test]
fn vc2_toy_case_is_three_quarters() {
    let gt = vec![vec![0; 4], vec![0; 4]];
    let pred = vec![vec![0; 4], vec![0, 0, 0, 1]];
    assert_eq!(video_consistency(&gt, &pred, 2), Some(0.75));
}

#[test]
fn perfect_prediction_scores_one_everywhere() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let gt: Vec<Vec<usize>> = (0..20)
        .map(|_| (0..64).map(|i| if i < 32 { i % 4 } else { r.random_range(0..4) }).collect())
        .collect();
    let mut acc = MetricsAccumulator::new(4, &[8, 16]);
    assert!(acc.add_clip(&gt, &gt).unwrap().is_empty());
    let m = acc.finish();
    assert_eq!((m.miou, m.wiou, m.mvc[&8], m.mvc[&16]), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn disjoint_prediction_scores_zero() {
    let mut c = Confusion::new(3);
    c.add(&[2; 9], &[1; 9]).unwrap();
    assert_eq!(c.miou(), 0.0);
}

#[test]
fn short_clips_skip_long_windows() {
    let gt = vec![vec![0usize; 4]; 10];
    let mut acc = MetricsAccumulator::new(2, &[8, 16]);
    assert_eq!(acc.add_clip(&gt, &gt).unwrap(), vec![16]);
    let m = acc.finish();
    assert!(m.mvc.contains_key(&8));
    assert!(!m.mvc.contains_key(&16));
}

#[test]
fn miou_averages_only_present_classes() {
    let mut c = Confusion::new(4);
    c.add(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
    let iou = c.iou();
    assert_eq!(iou[0], Some(0.5));
    assert_eq!(iou[1], Some(2.0 / 3.0));
    assert_eq!(iou[2], None);
    assert!((c.miou() - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert!((c.wiou() - (0.5 * 0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
}

#[test]
fn vc_loop_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let t = r.random_range(3..9);
        let n = r.random_range(2..=t);
        let gt: Vec<Vec<usize>> = (0..t).map(|_| (0..6).map(|_| r.random_range(0..2)).collect()).collect();
        let pred: Vec<Vec<usize>> = (0..t).map(|_| (0..6).map(|_| r.random_range(0..2)).collect()).collect();
        let mut sum = 0.0;
        let mut count = 0;
        for s in 0..=t - n {
            let stable = |v: &Vec<Vec<usize>>, i: usize| (s..s + n).all(|f| v[f][i] == v[s][i]);
            let g: Vec<usize> = (0..6).filter(|&i| stable(&gt, i)).collect();
            if g.is_empty() {
                continue;
            }
            let both = g.iter().filter(|&&i| stable(&pred, i) && pred[s][i] == gt[s][i]).count();
            sum += both as f64 / g.len() as f64;
            count += 1;
        }
        let expect = (count > 0).then(|| sum / count as f64);
        assert_eq!(video_consistency(&gt, &pred, n), expect);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_lie_in_unit_interval(seed in 0u64..100_000, cls in 2usize..6, t in 8usize..20) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<Vec<usize>> = (0..t).map(|_| (0..16).map(|_| r.random_range(0..cls)).collect()).collect();
        let pred: Vec<Vec<usize>> = (0..t).map(|_| (0..16).map(|_| r.random_range(0..cls)).collect()).collect();
        let mut acc = MetricsAccumulator::new(cls, &[8, 16]);
        acc.add_clip(&gt, &pred).unwrap();
        let m = acc.finish();
        prop_assert!((0.0..=1.0).contains(&m.miou));
        prop_assert!((0.0..=1.0).contains(&m.wiou));
        prop_assert!(m.mvc.values().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(m.per_class_iou.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn confusion_merge_is_associative(seed in 0u64..100_000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let parts: Vec<(Vec<usize>, Vec<usize>)> = (0..3)
            .map(|_| ((0..10).map(|_| r.random_range(0..3)).collect(), (0..10).map(|_| r.random_range(0..3)).collect()))
            .collect();
        let cm: Vec<Confusion> = parts.iter().map(|(g, p)| { let mut c = Confusion::new(3); c.add(g, p).unwrap(); c }).collect();
        let mut left = cm[0].clone();
        left.merge(&cm[1]);
        left.merge(&cm[2]);
        let mut right = cm[1].clone();
        right.merge(&cm[2]);
        let mut r2 = cm[0].clone();
        r2.merge(&right);
        prop_assert_eq!(left, r2);
    }
}
