mod common;

use common::{random_instance, random_tensor};
use gridattn::model::{forward_tensor, AttentionConfig, ModelParams};
use gridattn::grid::TaskKind;
use gridattn::tensor::{
    attend_aggregate, conv_depthk, grad_check, spatial_pool, spatial_softmax, PoolMode, Tensor3,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor_strategy(max_side: usize, max_depth: usize, scale: f64) -> impl Strategy<Value = Tensor3> {
    (1..=max_side, 1..=max_side, 1..=max_depth).prop_flat_map(move |(r, c, d)| {
        prop::collection::vec(-scale..scale, r * c * d)
            .prop_map(move |v| Tensor3::from_vec(r, c, d, v).unwrap())
    })
}

proptest! {
    #[test]
    fn min_pool_is_negated_max_pool(x in tensor_strategy(6, 3, 10.0), w in prop::sample::select(vec![1usize, 3, 5])) {
        let neg = x.map(|v| -v);
        let lhs = spatial_pool(&x, PoolMode::Min, w).unwrap();
        let rhs = spatial_pool(&neg, PoolMode::Max, w).unwrap().map(|v| -v);
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn softmax_channels_sum_to_one(x in tensor_strategy(7, 3, 1e4)) {
        let y = spatial_softmax(&x);
        for h in 0..y.depth() {
            let s: f64 = y.channel(h).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(y.channel(h).iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn softmax_shift_invariant(x in tensor_strategy(5, 2, 5.0), c in -50.0f64..50.0) {
        let shifted = x.map(|v| v + c);
        let a = spatial_softmax(&x);
        let b = spatial_softmax(&shifted);
        for (p, q) in a.values().iter().zip(b.values()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_preserves_shape(x in tensor_strategy(6, 3, 1.0), w in prop::sample::select(vec![1usize, 3])) {
        for mode in PoolMode::ORDER {
            prop_assert_eq!(spatial_pool(&x, mode, w).unwrap().shape(), x.shape());
        }
        prop_assert_eq!(spatial_pool(&x, PoolMode::Max, 1).unwrap(), x.clone());
    }

    #[test]
    fn one_hot_attention_indexes(g in tensor_strategy(5, 4, 3.0), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let (r, c, _) = g.shape();
        let cell = rng.random_range(0..r * c);
        let a = Tensor3::from_fn(r, c, 1, |i, j, _| if i * c + j == cell { 1.0 } else { 0.0 });
        let v = attend_aggregate(&a, &g).unwrap();
        prop_assert_eq!(v.row(0), g.cell(cell / c, cell % c));
    }

    #[test]
    fn pointwise_conv_matches_per_cell_map(g in tensor_strategy(4, 3, 2.0), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let d = g.depth();
        let h = 2;
        let kernels: Vec<f64> = (0..h * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = vec![0.25, -0.5];
        let out = conv_depthk(&g, &kernels, &bias, 1).unwrap();
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                for hh in 0..h {
                    let mut expect = bias[hh];
                    for k in 0..d {
                        expect += kernels[hh * d + k] * g.get(i, j, k);
                    }
                    prop_assert!((out.get(i, j, hh) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_is_pure(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, (seed % 12) as usize);
        let a = forward_tensor(inst.grid.clone(), &inst.params, &inst.cfg).unwrap();
        let b = forward_tensor(inst.grid.clone(), &inst.params, &inst.cfg).unwrap();
        prop_assert_eq!(a.output(), b.output());
        prop_assert_eq!(a.concat(), b.concat());
    }
}

#[test]
fn pointwise_conv_commutes_with_cell_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = random_tensor(&mut rng, 3, 4, 5, 1.0);
    let kernels: Vec<f64> = random_tensor(&mut rng, 1, 1, 15, 1.0).into_values();
    let bias = vec![0.1, 0.2, 0.3];
    // reverse the cell order
    let perm = |t: &Tensor3| Tensor3::from_fn(t.rows(), t.cols(), t.depth(), |i, j, k| {
        let c = t.cells() - 1 - (i * t.cols() + j);
        t.get(c / t.cols(), c % t.cols(), k)
    });
    let a = perm(&conv_depthk(&g, &kernels, &bias, 1).unwrap());
    let b = conv_depthk(&perm(&g), &kernels, &bias, 1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gradients_match_finite_differences_on_reference_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let cfg = AttentionConfig {
        h: 3,
        ..AttentionConfig::new(TaskKind::Classification, 8)
    };
    let params = ModelParams::init(&cfg, 9).unwrap();
    let inst = common::Instance {
        cfg,
        params,
        grid: random_tensor(&mut rng, 5, 7, 8, 1.0),
        target: gridattn::model::Target::Class(1),
    };
    let report = grad_check(|t| inst.loss_and_grad(t), &inst.theta(), 1e-5).unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn gradients_match_finite_differences_on_random_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for i in 0..20 {
        let inst = random_instance(&mut rng, i);
        let report = grad_check(|t| inst.loss_and_grad(t), &inst.theta(), 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-4, "instance {i}: {report:?}");
        let (analytic, numeric) = inst.conv_bias_gradients(1e-5);
        assert!(analytic < 1e-12 && numeric < 1e-10, "instance {i}: {analytic} {numeric}");
    }
}
