use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward, Graph, LayerKind, Padding, Source};
use crate::tensor::Tensor;

/// Post-activation variance (absolute) below which a channel counts as dead.
pub const DEAD_VARIANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeadAction {
    /// Output was constant zero; kernel slice and bias zeroed.
    Zeroed,
    /// Output was a nonzero constant; zeroed and the constant moved into the
    /// biases of every consumer.
    Compensated,
    /// Nonzero constant feeding a consumer that cannot absorb it; left as is.
    Kept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadChannel {
    pub layer: usize,
    pub channel: usize,
    pub value: f64,
    pub variance: f64,
    pub action: DeadAction,
}

/// Zeroes channels whose post-activation output is constant over the
/// calibration batch. The network function on that batch is unchanged.
pub fn drop_dead_channels(graph: &Graph, calib: &Tensor) -> Result<(Graph, Vec<DeadChannel>)> {
    if graph.has_batchnorm() {
        return Err(Error::Invalid("fold batch norm before dropping dead channels".into()));
    }
    let (_, trace) = forward(graph, calib, true)?;
    let trace = trace.expect("captured");
    let mut out = graph.clone();
    let mut report = Vec::new();

    for l in 0..graph.layers.len() {
        if l == graph.output || !graph.layers[l].kind.is_parametric() {
            continue;
        }
        let post = &trace.post[l];
        let consumers = graph.consumers(l);
        let compensable = consumers.iter().all(|&c| {
            matches!(
                graph.layers[c].kind,
                LayerKind::Dense
                    | LayerKind::Conv2d { padding: Padding::Valid, .. }
                    | LayerKind::DepthwiseConv2d { padding: Padding::Valid, .. }
            )
        });
        for ch in 0..post.channels() {
            let n = post.len() / post.channels();
            let mean = post.channel_values(ch).sum::<f64>() / n as f64;
            let var = post.channel_values(ch).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            if var >= DEAD_VARIANCE {
                continue;
            }
            let action = if mean == 0.0 {
                DeadAction::Zeroed
            } else if compensable {
                for &c in &consumers {
                    absorb_constant(&mut out, c, l, ch, mean);
                }
                DeadAction::Compensated
            } else {
                DeadAction::Kept
            };
            if action != DeadAction::Kept {
                zero_channel(&mut out, l, ch);
            }
            report.push(DeadChannel {
                layer: l,
                channel: ch,
                value: mean,
                variance: var,
                action,
            });
        }
    }
    Ok((out, report))
}

fn zero_channel(graph: &mut Graph, l: usize, ch: usize) {
    let layer = &mut graph.layers[l];
    let w = layer.weights.as_mut().expect("parametric");
    let stride = match layer.kind {
        LayerKind::DepthwiseConv2d { .. } => w.shape()[2],
        _ => *w.shape().last().unwrap(),
    };
    for (j, v) in w.data_mut().iter_mut().enumerate() {
        if j % stride == ch {
            *v = 0.0;
        }
    }
    layer.bias.as_mut().expect("parametric")[ch] = 0.0;
}

/// Adds the contribution of a constant input channel into consumer biases.
fn absorb_constant(graph: &mut Graph, consumer: usize, producer: usize, ch: usize, value: f64) {
    let shapes = graph.validate().expect("validated by forward");
    let layer = &mut graph.layers[consumer];
    let w = layer.weights.as_ref().expect("parametric").clone();
    let s = w.shape().to_vec();
    let bias = layer.bias.as_mut().expect("parametric");
    match layer.kind {
        LayerKind::Conv2d { .. } => {
            let (cin, cout) = (s[2], s[3]);
            for t in 0..s[0] * s[1] {
                for (co, b) in bias.iter_mut().enumerate() {
                    *b += value * w.data()[(t * cin + ch) * cout + co];
                }
            }
        }
        LayerKind::DepthwiseConv2d { .. } => {
            let c = s[2];
            bias[ch] += value * (0..s[0] * s[1]).map(|t| w.data()[t * c + ch]).sum::<f64>();
        }
        LayerKind::Dense => {
            let [h, wd, c] = shapes[producer];
            let fout = s[1];
            for p in 0..h * wd {
                let row = p * c + ch;
                for (o, b) in bias.iter_mut().enumerate() {
                    *b += value * w.data()[row * fout + o];
                }
            }
        }
        _ => unreachable!("checked compensable"),
    }
    debug_assert!(layer.inputs.contains(&Source::Layer(producer)));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec};

    fn net(c1_bias: Vec<f64>, c1_kernel: Vec<f64>) -> Graph {
        // input 3x3x1 -> pointwise 1->3 (relu6) -> dense 27->2
        Graph {
            input_shape: [3, 3, 1],
            layers: vec![
                LayerSpec::conv2d("pw", Source::Input, Tensor::new(vec![1, 1, 1, 3], c1_kernel).unwrap(), c1_bias)
                    .with_activation(Activation::Relu6),
                LayerSpec::dense(
                    "fc",
                    Source::Layer(0),
                    Tensor::new(vec![27, 2], (0..54).map(|i| ((i * 13) % 7) as f64 * 0.1 - 0.3).collect()).unwrap(),
                    vec![0.0, 0.0],
                ),
            ],
            output: 1,
        }
    }

    fn calib() -> Tensor {
        Tensor::new(vec![4, 3, 3, 1], (0..36).map(|i| ((i * 17) % 10) as f64 * 0.1).collect()).unwrap()
    }

    #[test]
    fn zero_channel_flagged() {
        let g = net(vec![0.0, 0.1, 0.0], vec![0.0, 1.0, 1e-3]);
        let (_, dead) = drop_dead_channels(&g, &calib()).unwrap();
        assert_eq!(dead.len(), 1);
        assert_eq!((dead[0].channel, dead[0].action), (0, DeadAction::Zeroed));
    }

    #[test]
    fn saturated_relu6_flagged_and_compensated() {
        let g = net(vec![6.5, 0.1, 0.0], vec![1e-4, 1.0, 1e-3]);
        let (h, dead) = drop_dead_channels(&g, &calib()).unwrap();
        assert_eq!(dead.len(), 1);
        assert_eq!(dead[0].value, 6.0);
        assert_eq!(dead[0].action, DeadAction::Compensated);
        let (a, _) = forward(&g, &calib(), false).unwrap();
        let (b, _) = forward(&h, &calib(), false).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn small_but_live_variance_kept() {
        // channel 2 output = 1e-2 * x + 0.5: var = 1e-4 * var(x) ~ 1e-6
        let g = net(vec![0.0, 0.1, 0.5], vec![0.0, 1.0, 1e-2]);
        let (_, dead) = drop_dead_channels(&g, &calib()).unwrap();
        assert!(dead.iter().all(|d| d.channel != 2));
        let (_, trace) = forward(&g, &calib(), true).unwrap();
        let t = &trace.unwrap().post[0];
        let vals: Vec<f64> = t.channel_values(2).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(var > 1e-7 && var < 1e-5, "{var}");
    }
}
