use biasfix::bft::Schedule;
use biasfix::nn::{forward, Activation, Graph, LayerSpec, Padding, Source};
use biasfix::qstats::{channel_stats, mse_decomposition};
use biasfix::quant::{quantize_weights_symmetric, QuantGrid};
use biasfix::Tensor;
use proptest::prelude::*;

/// Float slack for comparisons that are exact in real arithmetic.
fn ulps(v: f64) -> f64 {
    4.0 * f64::EPSILON * v.abs()
}

fn activation_grid() -> impl Strategy<Value = QuantGrid> {
    (-50.0f64..10.0, 0.01f64..60.0, 2u32..=16).prop_map(|(lo, width, bits)| QuantGrid::activation(lo, lo + width, bits).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn round_trip_within_half_step(g in activation_grid(), t in 0.0f64..=1.0) {
        let v = g.min_value() + t * (g.max_value() - g.min_value());
        let err = (g.fake_quant(v) - v).abs();
        prop_assert!(err <= g.scale / 2.0 + ulps(v) + ulps(g.scale), "err {err} scale {}", g.scale);
    }

    #[test]
    fn zero_is_exact(g in activation_grid()) {
        prop_assert_eq!(g.fake_quant(0.0), 0.0);
        prop_assert!(g.min_value() <= 0.0 && g.max_value() >= 0.0);
    }

    #[test]
    fn idempotent(g in activation_grid(), v in -100.0f64..100.0) {
        let once = g.fake_quant(v);
        prop_assert_eq!(g.fake_quant(once), once);
    }

    #[test]
    fn monotone(g in activation_grid(), a in -100.0f64..100.0, b in -100.0f64..100.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(g.fake_quant(lo) <= g.fake_quant(hi));
    }

    #[test]
    fn saturates_to_grid_edges(g in activation_grid(), far in 1.0f64..1e6) {
        prop_assert_eq!(g.fake_quant(g.max_value() + far), g.max_value());
        prop_assert_eq!(g.fake_quant(g.min_value() - far), g.min_value());
    }

    #[test]
    fn symmetric_weights_hit_extremes(w in prop::collection::vec(-5.0f64..5.0, 1..64), bits in 2u32..=12) {
        prop_assume!(w.iter().any(|v| v.abs() > 1e-9));
        let t = Tensor::new(vec![w.len()], w.clone()).unwrap();
        let (g, codes) = quantize_weights_symmetric(&t, bits).unwrap();
        let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(codes.iter().all(|&c| (c as i64).abs() <= g.qmax));
        prop_assert!(codes.iter().any(|&c| (c as i64).abs() == g.qmax));
        for (v, c) in w.iter().zip(&codes) {
            prop_assert!((g.dequantize(*c as i64) - v).abs() <= g.scale / 2.0 + ulps(max));
        }
    }

    #[test]
    fn mse_identity(e in prop::collection::vec(-10.0f64..10.0, 1..200), shift in -5.0f64..5.0) {
        let e: Vec<f64> = e.iter().map(|v| v + shift).collect();
        let d = mse_decomposition(&e).unwrap();
        let direct = e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64;
        prop_assert!((d.mean_sq + d.variance - direct).abs() <= 1e-9 * direct.max(1e-300));
        prop_assert!((d.mse - direct).abs() <= 1e-12 * direct.max(1e-300));
    }

    #[test]
    fn constant_error_is_pure_shift(x in prop::collection::vec(0.1f64..5.0, 2..100), c in -1.0f64..1.0) {
        let xq: Vec<f64> = x.iter().map(|v| v + c).collect();
        let s = channel_stats(0, 0, &x, &xq).unwrap();
        prop_assert!((s.mas - c).abs() < 1e-12);
        prop_assert!(s.error_variance().abs() < 1e-12);
    }

    #[test]
    fn schedule_text_round_trip(phases in prop::collection::vec((1e-8f64..1.0, 1usize..100), 0..5)) {
        let text: Vec<String> = phases.iter().map(|(lr, e)| format!("{lr:e}x{e}")).collect();
        let s: Schedule = text.join(",").parse().unwrap();
        prop_assert_eq!(s.to_string().parse::<Schedule>().unwrap(), s);
    }
}

fn linear_net(seed: u64) -> Graph {
    let (g, _) = biasfix::fixtures::random_graph(seed);
    let mut g = g;
    for l in &mut g.layers {
        l.activation = Activation::None;
    }
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Without activations the network is affine in its input.
    #[test]
    fn affine_without_activations(seed in 0u64..1000, alpha in -3.0f64..3.0) {
        let g = linear_net(seed);
        let (_, x) = biasfix::fixtures::random_graph(seed);
        let zero = Tensor::zeros(x.shape().to_vec());
        let f = |t: &Tensor| forward(&g, t, false).unwrap().0;
        let (f0, fx, fax) = (f(&zero), f(&x), f(&x.scaled(alpha)));
        for i in 0..fx.len() {
            let lhs = fax.data()[i] - f0.data()[i];
            let rhs = alpha * (fx.data()[i] - f0.data()[i]);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())));
        }
    }

    /// Shifting the output layer's bias shifts every logit of that class by the same amount.
    #[test]
    fn output_bias_is_additive(seed in 0u64..1000, delta in -2.0f64..2.0, class in 0usize..5) {
        let (g, x) = biasfix::fixtures::random_graph(seed);
        let mut h = g.clone();
        let out = h.output;
        h.layers[out].bias.as_mut().unwrap()[class] += delta;
        let (a, b) = (forward(&g, &x, false).unwrap().0, forward(&h, &x, false).unwrap().0);
        for i in 0..a.batch() {
            for j in 0..5 {
                let expect = if j == class { delta } else { 0.0 };
                prop_assert!((b.sample(i)[j] - a.sample(i)[j] - expect).abs() < 1e-12);
            }
        }
    }

    /// Folding batch norm leaves the network function unchanged.
    #[test]
    fn folding_preserves_function(seed in 0u64..1000) {
        let (g, x) = biasfix::fixtures::random_graph(seed);
        let folded = biasfix::quant::fold_batchnorm(&g).unwrap();
        prop_assert!(!folded.has_batchnorm());
        let (a, b) = (forward(&g, &x, false).unwrap().0, forward(&folded, &x, false).unwrap().0);
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() <= 1e-10 * (1.0 + u.abs()));
        }
    }
}

#[test]
fn same_padding_keeps_extent() {
    let w = Tensor::filled(vec![3, 3, 1, 1], 1.0);
    let g = Graph {
        input_shape: [5, 5, 1],
        layers: vec![LayerSpec::conv2d("c", Source::Input, w, vec![0.0]).with_padding(Padding::Same)],
        output: 0,
    };
    let (y, _) = forward(&g, &Tensor::filled(vec![1, 5, 5, 1], 1.0), false).unwrap();
    assert_eq!(y.len(), 25);
    assert_eq!(y.data()[0], 4.0);
    assert_eq!(y.data()[12], 9.0);
}
