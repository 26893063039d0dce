//! Seeded synthetic models and data.
//!
//! All parameters and pixels are rounded to f32 so the in-memory fixture and
//! its saved copy are the same network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::nn::{forward, forward_with, Activation, BatchNorm, ForwardOptions, Graph, LayerSpec, Padding, Source};
use crate::tensor::Tensor;

pub const TOY_SIDE: usize = 12;
pub const TOY_CHANNELS: usize = 3;
pub const TOY_CLASSES: usize = 10;
/// Target standard deviation of the toy net's logits.
const LOGIT_STD: f64 = 3.0;

fn f32r(v: f64) -> f64 {
    v as f32 as f64
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn he_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| f32r(std * normal(rng))).collect()).expect("sized")
}

fn round_graph(g: &mut Graph) {
    for l in &mut g.layers {
        if let Some(w) = l.weights.as_mut() {
            w.data_mut().iter_mut().for_each(|v| *v = f32r(*v));
        }
        if let Some(b) = l.bias.as_mut() {
            b.iter_mut().for_each(|v| *v = f32r(*v));
        }
        if let Some(bn) = l.batchnorm.as_mut() {
            for v in [&mut bn.gamma, &mut bn.beta, &mut bn.mean, &mut bn.var] {
                v.iter_mut().for_each(|x| *x = f32r(*x));
            }
            bn.eps = f32r(bn.eps);
        }
    }
}

/// Class-conditional smooth images in [0, 1].
pub struct ImageSource {
    prototypes: Vec<Vec<f64>>,
}

impl ImageSource {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prototypes = (0..TOY_CLASSES)
            .map(|_| {
                let waves: Vec<[f64; 4]> = (0..TOY_CHANNELS * 3)
                    .map(|_| {
                        [
                            uniform(&mut rng, 0.3, 1.0),
                            rng.random_range(0..3) as f64,
                            rng.random_range(0..3) as f64,
                            uniform(&mut rng, 0.0, std::f64::consts::TAU),
                        ]
                    })
                    .collect();
                let mut img = Vec::with_capacity(TOY_SIDE * TOY_SIDE * TOY_CHANNELS);
                for y in 0..TOY_SIDE {
                    for x in 0..TOY_SIDE {
                        for c in 0..TOY_CHANNELS {
                            let v: f64 = waves[c * 3..c * 3 + 3]
                                .iter()
                                .map(|[a, fx, fy, ph]| {
                                    let t = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / TOY_SIDE as f64;
                                    a * (t + ph).cos()
                                })
                                .sum();
                            img.push(v / 3.0);
                        }
                    }
                }
                img
            })
            .collect();
        ImageSource { prototypes }
    }

    /// `n` images drawn from the stream seeded with `seed`.
    pub fn images(&self, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|_| {
                let p = &self.prototypes[rng.random_range(0..TOY_CLASSES)];
                let amp = uniform(&mut rng, 0.7, 1.3);
                let offset = uniform(&mut rng, -0.1, 0.1);
                p.iter()
                    .map(|v| f32r((0.5 + offset + 0.45 * amp * v + 0.08 * normal(&mut rng)).clamp(0.0, 1.0)))
                    .collect()
            })
            .collect();
        Tensor::stack(&[TOY_SIDE, TOY_SIDE, TOY_CHANNELS], samples)
    }
}

/// Depthwise-separable classifier with batch norm and ReLU6:
/// conv3x3(3→16) → dw3x3(16) → pw(16→32) → dw3x3/2(32) → pw(32→64)
/// → global average pool → dense(64→10).
///
/// Batch-norm statistics are measured on `stats_batch`, and the classifier is
/// rescaled so its logits have a standard deviation of about 3.
pub fn toy_depthwise_net(seed: u64, stats_batch: &Tensor) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = |c| vec![0.0; c];
    let relu6 = Activation::Relu6;
    let layers = vec![
        LayerSpec::conv2d("conv0", Source::Input, he_tensor(&mut rng, vec![3, 3, 3, 16], 27), z(16))
            .with_padding(Padding::Same),
        LayerSpec::depthwise("dw1", Source::Layer(0), he_tensor(&mut rng, vec![3, 3, 16, 1], 9), z(16))
            .with_padding(Padding::Same),
        LayerSpec::conv2d("pw1", Source::Layer(1), he_tensor(&mut rng, vec![1, 1, 16, 32], 16), z(32)),
        LayerSpec::depthwise("dw2", Source::Layer(2), he_tensor(&mut rng, vec![3, 3, 32, 1], 9), z(32))
            .with_padding(Padding::Same)
            .with_stride(2),
        LayerSpec::conv2d("pw2", Source::Layer(3), he_tensor(&mut rng, vec![1, 1, 32, 64], 32), z(64)),
        LayerSpec::pool("pool", Source::Layer(4), None, 1),
        LayerSpec::dense("fc", Source::Layer(5), he_tensor(&mut rng, vec![64, TOY_CLASSES], 128), z(TOY_CLASSES)),
    ];
    let mut g = Graph {
        input_shape: [TOY_SIDE, TOY_SIDE, TOY_CHANNELS],
        layers,
        output: 6,
    };
    for l in 0..5 {
        let c = g.layers[l].bias.as_ref().expect("parametric").len();
        g.layers[l] = g.layers[l].clone().with_batchnorm(BatchNorm::identity(c));
        let out = forward_with(
            &g,
            stats_batch,
            ForwardOptions {
                capture: true,
                quantizer: None,
                stop_after: Some(l),
            },
        )?;
        let pre = out.trace.expect("captured").pre.swap_remove(l);
        let mean = pre.channel_means();
        let var: Vec<f64> = (0..c)
            .map(|ch| {
                let n = pre.len() / c;
                pre.channel_values(ch).map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / n as f64
            })
            .collect();
        g.layers[l].batchnorm = Some(BatchNorm {
            gamma: (0..c).map(|_| uniform(&mut rng, 0.6, 1.4)).collect(),
            beta: (0..c).map(|_| uniform(&mut rng, 0.2, 1.2)).collect(),
            mean,
            var,
            eps: 1e-3,
        });
        g.layers[l].activation = relu6;
    }
    let (logits, _) = forward(&g, stats_batch, false)?;
    let m = logits.data().iter().sum::<f64>() / logits.len() as f64;
    let sd = (logits.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / logits.len() as f64).sqrt();
    let fc = &mut g.layers[6];
    let w = fc.weights.as_mut().expect("dense");
    *w = w.scaled(LOGIT_STD / sd);
    round_graph(&mut g);
    g.check()?;
    Ok(g)
}

/// Top-1 class of each row of `logits`.
pub fn argmax_labels(logits: &Tensor) -> Vec<i32> {
    (0..logits.batch())
        .map(|i| {
            let row = logits.sample(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best as i32
        })
        .collect()
}

/// Everything the end-to-end experiments use.
pub struct ToyFixture {
    pub graph: Graph,
    pub calib: Tensor,
    pub ibc: Tensor,
    pub tune: Tensor,
    pub heldout: Tensor,
    /// Full-precision predictions on `heldout`, used as its labels.
    pub heldout_labels: Vec<i32>,
}

pub const CALIB_IMAGES: usize = 64;
pub const IBC_IMAGES: usize = 32;
pub const TUNE_IMAGES: usize = 512;
pub const HELDOUT_IMAGES: usize = 256;

pub fn toy_fixture(seed: u64) -> Result<ToyFixture> {
    let src = ImageSource::new(seed);
    let calib = src.images(CALIB_IMAGES, seed.wrapping_add(1));
    let ibc = src.images(IBC_IMAGES, seed.wrapping_add(2));
    let tune = src.images(TUNE_IMAGES, seed.wrapping_add(3));
    let heldout = src.images(HELDOUT_IMAGES, seed.wrapping_add(4));
    let graph = toy_depthwise_net(seed, &calib)?;
    let (logits, _) = forward(&graph, &heldout, false)?;
    Ok(ToyFixture {
        graph,
        calib,
        ibc,
        tune,
        heldout_labels: argmax_labels(&logits),
        heldout,
    })
}

/// Small random graph touching every layer kind, with a random batch to feed it.
/// Activations are drawn from all three kinds, so a few graphs may have kinks
/// near a sample point; keep finite-difference steps small.
pub fn random_graph(seed: u64) -> (Graph, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act = |rng: &mut ChaCha8Rng| [Activation::None, Activation::Relu, Activation::Relu6][rng.random_range(0..3)];
    let bias = |rng: &mut ChaCha8Rng, c: usize| -> Vec<f64> { (0..c).map(|_| f32r(0.3 * normal(rng))).collect() };
    let (side, cin, c) = (6, 2, 4);
    let pad = if rng.random::<bool>() { Padding::Same } else { Padding::Valid };
    let stride = rng.random_range(1..=2);

    let a0 = act(&mut rng);
    let b0 = bias(&mut rng, c);
    let mut l0 = LayerSpec::conv2d("c0", Source::Input, he_tensor(&mut rng, vec![3, 3, cin, c], 9 * cin), b0)
        .with_padding(pad)
        .with_stride(stride)
        .with_activation(a0);
    if rng.random::<bool>() {
        l0 = l0.with_batchnorm(BatchNorm {
            gamma: (0..c).map(|_| f32r(uniform(&mut rng, 0.5, 1.5))).collect(),
            beta: (0..c).map(|_| f32r(uniform(&mut rng, -0.3, 0.3))).collect(),
            mean: (0..c).map(|_| f32r(uniform(&mut rng, -0.3, 0.3))).collect(),
            var: (0..c).map(|_| f32r(uniform(&mut rng, 0.5, 2.0))).collect(),
            eps: 1e-3,
        });
    }
    let a1 = act(&mut rng);
    let b1 = bias(&mut rng, c);
    let l1 = LayerSpec::depthwise("d1", Source::Layer(0), he_tensor(&mut rng, vec![3, 3, c, 1], 9), b1)
        .with_padding(Padding::Same)
        .with_activation(a1);
    let a2 = act(&mut rng);
    let b2 = bias(&mut rng, c);
    let l2 = LayerSpec::conv2d("p2", Source::Layer(0), he_tensor(&mut rng, vec![1, 1, c, c], c), b2).with_activation(a2);
    let (l3, merged) = if rng.random::<bool>() {
        (LayerSpec::add("add", vec![Source::Layer(1), Source::Layer(2)]), c)
    } else {
        (LayerSpec::concat("cat", vec![Source::Layer(1), Source::Layer(2)]), 2 * c)
    };
    let l4 = if rng.random::<bool>() {
        LayerSpec::pool("gap", Source::Layer(3), None, 1)
    } else {
        LayerSpec::pool("pool", Source::Layer(3), Some([2, 2]), 1)
    };
    let mut g = Graph {
        input_shape: [side, side, cin],
        layers: vec![l0, l1, l2, l3, l4],
        output: 4,
    };
    let [h, w, _] = g.check().expect("well-formed")[4];
    let fan = h * w * merged;
    let b5 = bias(&mut rng, 5);
    g.layers.push(LayerSpec::dense("fc", Source::Layer(4), he_tensor(&mut rng, vec![fan, 5], fan), b5));
    g.output = 5;
    g.check().expect("well-formed");
    let n = rng.random_range(2..=4);
    let batch: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..side * side * cin).map(|_| f32r(uniform(&mut rng, -1.0, 1.5))).collect())
        .collect();
    (g, Tensor::stack(&[side, side, cin], batch))
}

/// One dense layer (no activation) with random weights and a random batch.
pub fn linear_layer(seed: u64, inputs: usize, outputs: usize, batch: usize) -> (Graph, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = he_tensor(&mut rng, vec![inputs, outputs], inputs);
    let b = (0..outputs).map(|_| f32r(0.2 * normal(&mut rng))).collect();
    let g = Graph {
        input_shape: [1, 1, inputs],
        layers: vec![LayerSpec::dense("linear", Source::Input, w, b)],
        output: 0,
    };
    let data = (0..batch)
        .map(|_| (0..inputs).map(|_| f32r(uniform(&mut rng, 0.0, 1.0))).collect())
        .collect();
    (g, Tensor::stack(&[1, 1, inputs], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_fixture_is_deterministic() {
        let a = toy_fixture(7).unwrap();
        let b = toy_fixture(7).unwrap();
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.heldout, b.heldout);
        assert!(a.calib.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn random_graphs_run() {
        for s in 0..20 {
            let (g, x) = random_graph(s);
            let (y, _) = forward(&g, &x, false).unwrap();
            assert_eq!(y.shape(), &[x.batch(), 5]);
        }
    }
}
