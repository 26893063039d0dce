#![allow(dead_code)]

use biasfix::bft::distillation_loss;
use biasfix::nn::{backward_bias_grads, forward, Activation, ActivationTrace, Graph};
use biasfix::Tensor;

/// |a − b| relative to the larger magnitude, with a floor so that two
/// vanishing gradients compare as equal.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Random fixed weights for a linear functional of the logits.
pub fn probe(n: usize, width: usize, seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n * width)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(vec![n, width], data).unwrap()
}

fn with_bias(g: &Graph, layer: usize, ch: usize, delta: f64) -> Graph {
    let mut g = g.clone();
    g.layers[layer].bias.as_mut().unwrap()[ch] += delta;
    g
}

/// Distance from the nearest pre-activation to a kink of its activation.
pub fn kink_distance(g: &Graph, trace: &ActivationTrace) -> f64 {
    let mut d = f64::INFINITY;
    for (l, layer) in g.layers.iter().enumerate() {
        let kinks: &[f64] = match layer.activation {
            Activation::None => &[],
            Activation::Relu => &[0.0],
            Activation::Relu6 => &[0.0, 6.0],
        };
        for v in trace.pre[l].data() {
            for k in kinks {
                d = d.min((v - k).abs());
            }
        }
    }
    d
}

/// Worst relative error between analytic and central-difference bias
/// gradients of `loss(logits)`, whose logit gradient is `dloss`.
///
/// The step is `h` unless a pre-activation sits closer than `10·h` to an
/// activation kink, in which case it shrinks so the stencil stays on one
/// linear piece.
pub fn fd_check<L, D>(g: &Graph, x: &Tensor, loss: L, dloss: D, h: f64, floor: f64) -> f64
where
    L: Fn(&Tensor) -> f64,
    D: Fn(&Tensor) -> Tensor,
{
    let (y, trace) = forward(g, x, true).unwrap();
    let h = h.min(kink_distance(g, trace.as_ref().unwrap()) / 10.0).max(1e-9);
    let grads = backward_bias_grads(g, trace.as_ref().unwrap(), &dloss(&y)).unwrap();
    let mut worst: f64 = 0.0;
    for (l, gl) in grads.iter().enumerate() {
        let Some(gl) = gl else { continue };
        for (ch, &analytic) in gl.iter().enumerate() {
            let up = loss(&forward(&with_bias(g, l, ch, h), x, false).unwrap().0);
            let down = loss(&forward(&with_bias(g, l, ch, -h), x, false).unwrap().0);
            worst = worst.max(rel_err(analytic, (up - down) / (2.0 * h), floor));
        }
    }
    worst
}

/// Linear probe loss Σ c·logits.
pub fn linear_fd(g: &Graph, x: &Tensor, seed: u64) -> f64 {
    let (y, _) = forward(g, x, false).unwrap();
    let c = probe(y.batch(), y.sample_len(), seed);
    let c2 = c.clone();
    fd_check(
        g,
        x,
        move |y| y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum(),
        move |_| c2.clone(),
        1e-5,
        1e-6,
    )
}

/// Distillation loss against random teacher logits.
pub fn distill_fd(g: &Graph, x: &Tensor, seed: u64) -> f64 {
    let (y, _) = forward(g, x, false).unwrap();
    let t = probe(y.batch(), y.sample_len(), seed).scaled(3.0);
    let t2 = t.clone();
    fd_check(
        g,
        x,
        move |y| distillation_loss(&t, y).unwrap().0,
        move |y| distillation_loss(&t2, y).unwrap().1,
        1e-5,
        1e-6,
    )
}

/// Worst relative error of distillation_loss's own gradient against central differences.
pub fn distill_logit_fd(teacher: &Tensor, student: &Tensor, h: f64) -> f64 {
    let (_, g) = distillation_loss(teacher, student).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..student.len() {
        let mut up = student.clone();
        up.data_mut()[i] += h;
        let mut down = student.clone();
        down.data_mut()[i] -= h;
        let fd = (distillation_loss(teacher, &up).unwrap().0 - distillation_loss(teacher, &down).unwrap().0) / (2.0 * h);
        worst = worst.max(rel_err(g.data()[i], fd, 1e-8));
    }
    worst
}

/// Two runs' output directories hold the same files with the same bytes;
/// `run.json` is compared without its wall-clock field.
pub fn dirs_identical(a: &std::path::Path, b: &std::path::Path) -> Result<(), String> {
    let list = |d: &std::path::Path| {
        let mut v: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    let (la, lb) = (list(a), list(b));
    if la != lb {
        return Err(format!("file sets differ: {la:?} vs {lb:?}"));
    }
    for name in la {
        let (x, y) = (std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
        let same = if name == "run.json" {
            let strip = |bytes: &[u8]| {
                let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
                v.as_object_mut().unwrap().remove("duration_seconds");
                v
            };
            strip(&x) == strip(&y)
        } else {
            x == y
        };
        if !same {
            return Err(format!("{} differs", name.to_string_lossy()));
        }
    }
    Ok(())
}
