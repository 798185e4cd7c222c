use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdcpc_core::backbone::Backbone;
use sdcpc_core::gradcheck::rand_tensor;
use sdcpc_core::oracle::{conv2d_reference, dense_kernelized_attention_oracle, Padding};
use sdcpc_core::ssea::{exact_sqrt, kernelized_attention, Deformable, LinearAttention, Ssea, SseaConfig};
use sdcpc_core::{Graph, ParamStore, Tensor};

#[test]
fn zero_offset_deformable_conv_equals_standard_conv() {
    let mut r = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for inst in 0..50 {
        let d = [1, 9, 25][inst % 3];
        let side = exact_sqrt(d).unwrap();
        let (h, w, c) = (r.random_range(1..7), r.random_range(1..7), r.random_range(1..5));
        let mut store = ParamStore::new();
        let dcn = Deformable::new(&mut store, "dcn", c, d, &mut r).unwrap();
        *store.get_mut(dcn.bias) = rand_tensor(&mut r, &[c]);
        let x = rand_tensor(&mut r, &[h, w, c]);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x.clone());
        let y = dcn.core(&mut g, xv).unwrap();
        let mut expect = conv2d_reference(&x, store.get(dcn.kernel), (1, 1), (side / 2, side / 2), Padding::Replicate);
        let b = store.get(dcn.bias).data().to_vec();
        for (i, e) in expect.data_mut().iter_mut().enumerate() {
            *e += b[i % c];
        }
        worst = worst.max(g.value(y).max_abs_diff(&expect).unwrap());
    }
    assert!(worst <= 1e-10, "{worst}");
}

#[test]
fn base_grid_is_centered() {
    let grid = Deformable::base_grid(3);
    assert_eq!(grid[0], (-1.0, -1.0));
    assert_eq!(grid[4], (0.0, 0.0));
    assert_eq!(grid[8], (1.0, 1.0));
}

#[test]
fn linear_attention_matches_dense_kernelized_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..30 {
        let (n, c) = (r.random_range(1..40), r.random_range(1..9));
        let q = rand_tensor(&mut r, &[n, c]);
        let k = rand_tensor(&mut r, &[n, c]);
        let v = rand_tensor(&mut r, &[n, c]);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let parts = kernelized_attention(&mut g, qv, kv, vv).unwrap();
        let err = g.value(parts.out).max_abs_diff(&dense_kernelized_attention_oracle(&q, &k, &v)).unwrap();
        assert!(err <= 1e-12, "{err}");
    }
}

#[test]
fn ssea_preserves_f2_extent_and_sets_width() {
    let mut r = ChaCha8Rng::seed_from_u64(23);
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, 4, &mut r);
    let cfg = SseaConfig { c: 12, d: 9, proj: 6 };
    let ssea = Ssea::new(&mut store, cfg, bb.widths(), &mut r).unwrap();
    let mut g = Graph::with_params(&store);
    let img = g.constant(Tensor::from_fn(&[16, 24, 3], |_| r.random_range(0.0..1.0)));
    let pyr = bb.encode_frame(&mut g, img).unwrap();
    let s = ssea.forward(&mut g, &pyr).unwrap();
    assert_eq!(g.shape(s), &[8, 12, 12]);
    let f = ssea.fuse_only(&mut g, &pyr).unwrap();
    assert_eq!(g.shape(f), &[8, 12, 12]);
}

#[test]
fn fusion_rejects_mismatched_pyramid() {
    let mut r = ChaCha8Rng::seed_from_u64(24);
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, 4, &mut r);
    let ssea = Ssea::new(&mut store, SseaConfig { c: 8, d: 9, proj: 4 }, [4, 8, 16, 33], &mut r).unwrap();
    let mut g = Graph::with_params(&store);
    let img = g.constant(Tensor::zeros(&[16, 16, 3]));
    let pyr = bb.encode_frame(&mut g, img).unwrap();
    let err = ssea.forward(&mut g, &pyr).unwrap_err();
    assert!(err.to_string().contains("F4"), "{err}");
}

#[test]
fn non_square_d_is_rejected() {
    let mut r = ChaCha8Rng::seed_from_u64(25);
    let mut store = ParamStore::new();
    assert!(Deformable::new(&mut store, "x", 4, 8, &mut r).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn linear_attention_rows_are_convex_combinations(seed in 0u64..10_000, n in 1usize..30, c in 1usize..8) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let la = LinearAttention::new(&mut store, "la", c, &mut r);
        let mut g = Graph::with_params(&store);
        let x = g.constant(rand_tensor(&mut r, &[n, c]).map(|v| 4.0 * v));
        let parts = la.core(&mut g, x).unwrap();
        let q = la.q.forward(&mut g, x).unwrap();
        let k = la.k.forward(&mut g, x).unwrap();
        let ones = g.constant(Tensor::full(&[n, c], 1.0));
        let unit = kernelized_attention(&mut g, q, k, ones).unwrap();
        for v in g.value(unit.out).data() {
            prop_assert!((v - 1.0).abs() <= 1e-10);
        }
        prop_assert!(g.value(parts.denominator).data().iter().all(|&d| d > 0.0));
    }
}
