use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdcpc_core::gradcheck::{primitive_cases, rand_tensor};
use sdcpc_core::oracle::{bilinear_reference, conv2d_reference, matmul_reference, Padding};
use sdcpc_core::{Error, Graph, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn every_primitive_backward_matches_finite_differences() {
    for (i, case) in primitive_cases().iter().enumerate() {
        let rep = case.run(20, 1000 + i as u64).unwrap();
        assert!(rep.max_rel_error <= 1e-6, "{}: {}", rep.name, rep.max_rel_error);
    }
}

#[test]
fn conv_identity_kernel_is_identity() {
    let mut r = rng(1);
    let x = rand_tensor(&mut r, &[4, 5, 3]);
    let k = Tensor::from_fn(&[1, 1, 3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k));
    let y = g.conv2d(xv, kv, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_averaging_kernel_keeps_constant_interior() {
    let x = Tensor::full(&[6, 6, 1], 2.5);
    let k = Tensor::full(&[3, 3, 1, 1], 1.0 / 9.0);
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x), g.constant(k));
    let y = g.conv2d(xv, kv, 1, 1).unwrap();
    for i in 1..5 {
        for j in 1..5 {
            assert!((g.value(y).at(&[i, j, 0]) - 2.5).abs() < 1e-14);
        }
    }
}

#[test]
fn conv_matches_loop_reference() {
    let mut r = rng(2);
    for (stride, pad) in [((1, 1), (1, 1)), ((2, 1), (1, 1)), ((2, 2), (0, 0)), ((1, 1), (2, 2))] {
        let x = rand_tensor(&mut r, &[5, 5, 2]);
        let k = rand_tensor(&mut r, &[3, 3, 2, 4]);
        let want = conv2d_reference(&x, &k, stride, pad, Padding::Zero);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x), g.constant(k));
        let y = g.conv2d_strided(xv, kv, stride, pad).unwrap();
        assert_eq!(g.shape(y), want.shape());
        assert!(g.value(y).max_abs_diff(&want).unwrap() <= 1e-12);
    }
}

#[test]
fn conv_output_extent_formula() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[9, 7, 2]));
    let k = g.constant(Tensor::zeros(&[3, 3, 2, 1]));
    let y = g.conv2d(x, k, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[(9 + 2 - 3) / 2 + 1, (7 + 2 - 3) / 2 + 1, 1]);
}

#[test]
fn conv_shape_errors_name_the_axis() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[5, 5, 2]));
    let k = g.constant(Tensor::zeros(&[3, 3, 3, 1]));
    let e = g.conv2d(x, k, 1, 1).unwrap_err();
    assert!(matches!(e, Error::Shape { .. }));
    assert!(e.to_string().contains("channel"), "{e}");
    let k = g.constant(Tensor::zeros(&[2, 2, 2, 1]));
    assert!(g.conv2d(x, k, 1, 1).is_err());
}

#[test]
fn bilinear_lattice_point_and_midpoint() {
    let mut r = rng(3);
    let x = rand_tensor(&mut r, &[4, 5, 2]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let c = g.constant(Tensor::new(&[2, 2], vec![2.0, 3.0, 0.5, 0.5]).unwrap());
    let y = g.bilinear_sample(xv, c).unwrap();
    let yv = g.value(y);
    for ch in 0..2 {
        assert_eq!(yv.at(&[0, ch]), x.at(&[2, 3, ch]));
        let mid = (x.at(&[0, 0, ch]) + x.at(&[0, 1, ch]) + x.at(&[1, 0, ch]) + x.at(&[1, 1, ch])) / 4.0;
        assert!((yv.at(&[1, ch]) - mid).abs() < 1e-15);
    }
}

#[test]
fn bilinear_matches_scalar_reference() {
    let mut r = rng(4);
    let x = rand_tensor(&mut r, &[6, 7, 3]);
    let pts = Tensor::from_fn(&[50, 2], |_| r.random_range(-3.0..9.0));
    let mut g = Graph::new();
    let (xv, cv) = (g.constant(x.clone()), g.constant(pts.clone()));
    let y = g.bilinear_sample(xv, cv).unwrap();
    for p in 0..50 {
        for ch in 0..3 {
            let want = bilinear_reference(&x, pts.at(&[p, 0]), pts.at(&[p, 1]), ch);
            assert!((g.value(y).at(&[p, ch]) - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn scale_one_is_identity_and_elu_plus_one_at_zero() {
    let mut r = rng(5);
    let x = rand_tensor(&mut r, &[3, 3]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.scale(xv, 1.0).unwrap();
    assert_eq!(g.value(y), &x);
    let z = g.constant(Tensor::scalar(0.0));
    let e = g.elu_plus_one(z).unwrap();
    assert_eq!(g.value(e).item().unwrap(), 1.0);
}

#[test]
fn exp_matches_scalar_loop() {
    let mut r = rng(6);
    let x = rand_tensor(&mut r, &[10, 10]).map(|v| 5.0 * v);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.exp(xv).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b.exp()).abs() / b.exp() <= 1e-15);
    }
}

#[test]
fn log_rejects_non_positive() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
    assert!(matches!(g.log(x), Err(Error::Domain { .. })));
}

#[test]
fn binary_ops_refuse_implicit_broadcast() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3]));
    assert!(g.add(a, b).is_err());
    let s = g.constant(Tensor::scalar(2.0));
    assert!(g.add(a, s).is_ok());
}

#[test]
fn softmax_constant_row_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 4], 3.7));
    let y = g.softmax(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn pool_then_upsample_of_constant() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[8, 8, 2], -1.25));
    let p = g.avgpool2(x).unwrap();
    let u = g.upsample_bilinear(p, 2).unwrap();
    assert_eq!(g.shape(u), &[8, 8, 2]);
    assert!(g.value(u).data().iter().all(|&v| (v + 1.25).abs() < 1e-15));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(7);
    let a = rand_tensor(&mut r, &[7, 5]);
    let b = rand_tensor(&mut r, &[5, 3]);
    let want = matmul_reference(&a, &b);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a), g.constant(b));
    let y = g.matmul(av, bv).unwrap();
    assert!(g.value(y).max_abs_diff(&want).unwrap() <= 1e-12);
}

#[test]
fn backward_linear_and_product_rule() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(1.3));
    let y = g.scale(x, 3.0).unwrap();
    let gr = g.backward(y).unwrap();
    assert_eq!(gr.get(x).unwrap().item().unwrap(), 3.0);

    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(2.0));
    let y = g.variable(Tensor::scalar(5.0));
    let p = g.mul(x, y).unwrap();
    let gr = g.backward(p).unwrap();
    assert_eq!(gr.get(x).unwrap().item().unwrap(), 5.0);
    assert_eq!(gr.get(y).unwrap().item().unwrap(), 2.0);
}

#[test]
fn backward_on_non_scalar_is_an_error() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::zeros(&[2]));
    let y = g.exp(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NotScalar(_))));
}

#[test]
fn backward_visits_in_exact_reverse_order() {
    let mut r = rng(8);
    let mut g = Graph::new();
    let x = g.variable(rand_tensor(&mut r, &[3, 3]));
    let a = g.tanh(x).unwrap();
    let b = g.exp(a).unwrap();
    let c = g.mul(a, b).unwrap();
    let d = g.softmax(c).unwrap();
    let e = g.sum_all(d).unwrap();
    let gr = g.backward(e).unwrap();
    assert_eq!(gr.visit_order(), &[e, d, c, b, a]);
}

#[test]
fn gradient_accumulation_is_exact() {
    let mut r = rng(9);
    let x0 = rand_tensor(&mut r, &[4, 3]);
    let f = |g: &mut Graph, x| {
        let t = g.tanh(x).unwrap();
        g.sum_all(t).unwrap()
    };
    let h = |g: &mut Graph, x| {
        let e = g.exp(x).unwrap();
        let s = g.softmax(e).unwrap();
        let m = g.mul(s, x).unwrap();
        g.sum_all(m).unwrap()
    };
    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let l = match which {
            0 => f(&mut g, x),
            1 => h(&mut g, x),
            _ => {
                let a = f(&mut g, x);
                let b = h(&mut g, x);
                g.add(a, b).unwrap()
            }
        };
        g.backward(l).unwrap().get(x).unwrap().clone()
    };
    let (gf, gh, gs) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..gs.len() {
        assert_eq!(gs.data()[i], gf.data()[i] + gh.data()[i]);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut r = rng(10);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut r, &[6, 6, 4]));
        let k = g.constant(rand_tensor(&mut r, &[3, 3, 4, 5]));
        let y = g.conv2d(x, k, 1, 1).unwrap();
        let p = g.avgpool2(y).unwrap();
        let u = g.upsample_bilinear(p, 2).unwrap();
        g.value(u).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn sdt1_roundtrip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.sdt");
    let mut r = rng(11);
    let ts = vec![rand_tensor(&mut r, &[2, 3]), Tensor::scalar(4.0), rand_tensor(&mut r, &[1, 2, 3, 4])];
    sdcpc_core::tensor::write_tensors(&p, &ts).unwrap();
    assert_eq!(sdcpc_core::tensor::read_tensors(&p).unwrap(), ts);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, k in 1usize..8, seed in any::<u64>(), mag in 0.1f64..50.0) {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut r, &[rows, k]).map(|v| v * mag));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn element_count_matches_shape(shape in prop::collection::vec(1usize..5, 0..4)) {
        let t = Tensor::zeros(&shape);
        prop_assert_eq!(t.len(), shape.iter().product::<usize>());
        prop_assert!(Tensor::new(&shape, vec![0.0; t.len() + 1]).is_err());
    }

    #[test]
    fn gradients_have_input_shapes(h in 2usize..6, w in 2usize..6, c in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let x = g.variable(rand_tensor(&mut r, &[2 * h, 2 * w, c]));
        let k = g.variable(rand_tensor(&mut r, &[3, 3, c, 2]));
        let y = g.conv2d(x, k, 1, 1).unwrap();
        let p = g.avgpool2(y).unwrap();
        let e = g.elu_plus_one(p).unwrap();
        let s = g.sum_all(e).unwrap();
        let gr = g.backward(s).unwrap();
        prop_assert_eq!(gr.get(x).unwrap().shape(), &[2 * h, 2 * w, c]);
        prop_assert_eq!(gr.get(k).unwrap().shape(), &[3, 3, c, 2]);
    }

    #[test]
    fn finite_inputs_give_finite_outputs(seed in any::<u64>(), mag in 0.1f64..30.0) {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut r, &[4, 4, 3]).map(|v| v * mag));
        let a = g.elu_plus_one(x).unwrap();
        let b = g.tanh(x).unwrap();
        let c = g.mul(a, b).unwrap();
        let d = g.upsample_bilinear(c, 2).unwrap();
        let e = g.reshape(d, &[64, 3]).unwrap();
        let f = g.l2_normalize_rows(e).unwrap();
        let s = g.softmax(f).unwrap();
        prop_assert!(g.value(s).is_finite());
    }
}
