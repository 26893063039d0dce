mod common;

use biasfix::bft::distillation_loss;
use biasfix::fixtures::{linear_layer, random_graph};
use biasfix::nn::{backward_bias_grads_with, forward, Activation, Graph, LayerSpec, Source};
use biasfix::quant::{forward_quant_with, quantize_model};
use biasfix::Tensor;
use common::*;

#[test]
fn linear_probe_matches_finite_differences() {
    for seed in 0..20 {
        let (g, x) = random_graph(seed);
        let worst = linear_fd(&g, &x, seed);
        assert!(worst < 1e-4, "graph {seed}: worst relative error {worst:e}");
    }
}

#[test]
fn distillation_through_graph_matches_finite_differences() {
    for seed in 0..20 {
        let (g, x) = random_graph(seed);
        let worst = distill_fd(&g, &x, seed + 100);
        assert!(worst < 1e-4, "graph {seed}: worst relative error {worst:e}");
    }
}

#[test]
fn distillation_gradient_matches_finite_differences() {
    let t = probe(4, 6, 1).scaled(4.0);
    let s = probe(4, 6, 2).scaled(4.0);
    let worst = distill_logit_fd(&t, &s, 1e-5);
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn distillation_fixed_point() {
    let t = probe(3, 5, 9);
    let (loss, g) = distillation_loss(&t, &t).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));
    let entropy: f64 = (0..3)
        .map(|i| {
            let p = biasfix::bft::softmax(t.sample(i));
            -p.iter().map(|v| v * v.ln()).sum::<f64>()
        })
        .sum::<f64>()
        / 3.0;
    assert!((loss - entropy).abs() < 1e-12);
}

#[test]
fn non_finite_logits_rejected_by_eval() {
    let t = Tensor::new(vec![1, 2], vec![0.0, f64::NAN]).unwrap();
    assert!(biasfix::metrics::evaluate(&t, &t, None).is_err());
}

/// An activation that sits above its grid for every sample passes no gradient.
#[test]
fn saturated_activation_blocks_gradient() {
    let (mut g, x) = linear_layer(3, 4, 2, 8);
    g.layers[0].activation = Activation::Relu;
    g.layers[0].bias.as_mut().unwrap()[0] += 5.0;
    let calib = x.clone();
    let q = quantize_model(&g, &calib, 8, 8).unwrap();
    let mut biases = q.biases();
    biases[0].as_mut().unwrap()[1] += 1e3;
    let exec = q.exec_graph_with_biases(&biases);
    let out = forward_quant_with(&q, &exec, &x, true, None).unwrap();
    let ones = Tensor::filled(vec![x.batch(), 2], 1.0);
    let quant = q.quantizer();
    let grads = backward_bias_grads_with(&exec, out.trace.as_ref().unwrap(), &ones, Some(&quant)).unwrap();
    let g0 = grads[0].as_ref().unwrap();
    assert_eq!(g0[1], 0.0);
    assert!(g0[0] > 0.0);
}

/// With no-op grids and the student equal to the teacher, nothing moves.
#[test]
fn transparent_quantization_gives_zero_gradient() {
    let (g, x) = linear_layer(5, 6, 3, 4);
    let q = quantize_model(&g, &x, 32, 32).unwrap();
    let exec = q.exec_graph();
    let out = forward_quant_with(&q, &exec, &x, true, None).unwrap();
    let logits = out.logits.unwrap();
    let (_, dl) = distillation_loss(&logits, &logits).unwrap();
    let quant = q.quantizer();
    let grads = backward_bias_grads_with(&exec, out.trace.as_ref().unwrap(), &dl, Some(&quant)).unwrap();
    assert!(grads[0].as_ref().unwrap().iter().all(|&v| v == 0.0));
}

/// One-layer chain checked against the closed-form gradient.
#[test]
fn dense_bias_gradient_is_column_sum() {
    let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
    let g = Graph {
        input_shape: [1, 1, 2],
        layers: vec![LayerSpec::dense("d", Source::Input, w, vec![0.1, -0.2])],
        output: 0,
    };
    let x = Tensor::new(vec![3, 1, 1, 2], vec![1.0, 2.0, -1.0, 0.0, 0.5, 0.5]).unwrap();
    let (_, trace) = forward(&g, &x, true).unwrap();
    let dy = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let grads = biasfix::nn::backward_bias_grads(&g, trace.as_ref().unwrap(), &dy).unwrap();
    assert_eq!(grads[0].as_deref(), Some(&[9.0, 12.0][..]));
}
