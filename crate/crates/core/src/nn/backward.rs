use super::forward::ActivationQuantizer;
use super::kernels;
use super::{Graph, LayerKind, Shape3, Source};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// dLoss/dBias per layer; `None` for layers without a bias.
pub type BiasGrads = Vec<Option<Vec<f64>>>;

/// Reverse-mode gradients of a loss with respect to every bias.
///
/// `logits_grad` is dLoss/dlogits for each image; contributions of all
/// images are summed, so a batch-averaged loss yields batch-averaged
/// gradients.
pub fn backward_bias_grads(graph: &Graph, trace: &super::ActivationTrace, logits_grad: &Tensor) -> Result<BiasGrads> {
    backward_bias_grads_with(graph, trace, logits_grad, None)
}

/// As [`backward_bias_grads`], routing gradients through the output
/// quantizers as a clipped straight-through estimator.
pub fn backward_bias_grads_with(
    graph: &Graph,
    trace: &super::ActivationTrace,
    logits_grad: &Tensor,
    quantizer: Option<&dyn ActivationQuantizer>,
) -> Result<BiasGrads> {
    let shapes = graph.check()?;
    if trace.pre.len() <= graph.output || trace.post.len() <= graph.output {
        return Err(Error::Invalid(format!(
            "trace holds {} layers, output layer is {}",
            trace.pre.len(),
            graph.output
        )));
    }
    let n = logits_grad.batch();
    for (l, s) in shapes.iter().enumerate().take(graph.output + 1) {
        let t = &trace.pre[l];
        if t.batch() != n || t.sample_len() != s.iter().product::<usize>() {
            return Err(Error::Invalid(format!("trace entry for layer {l} does not match graph/batch")));
        }
    }
    let [h, w, c] = shapes[graph.output];
    if logits_grad.sample_len() != h * w * c {
        return Err(Error::Invalid("logits gradient has the wrong width".into()));
    }

    let per_sample = par::map_range(n, |i| sample_grads(graph, &shapes, trace, i, logits_grad.sample(i), quantizer));

    let mut total: BiasGrads = graph.layers.iter().map(|l| l.bias.as_ref().map(|b| vec![0.0; b.len()])).collect();
    for grads in per_sample {
        for (acc, g) in total.iter_mut().zip(grads) {
            if let (Some(acc), Some(g)) = (acc.as_mut(), g) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok(total)
}

fn sample_grads(
    graph: &Graph,
    shapes: &[Shape3],
    trace: &super::ActivationTrace,
    i: usize,
    g_logits: &[f64],
    quantizer: Option<&dyn ActivationQuantizer>,
) -> BiasGrads {
    let mut g_post: Vec<Option<Vec<f64>>> = vec![None; graph.layers.len()];
    let mut out: BiasGrads = vec![None; graph.layers.len()];
    g_post[graph.output] = Some(g_logits.to_vec());

    for l in (0..=graph.output).rev() {
        let Some(g) = g_post[l].take() else { continue };
        let layer = &graph.layers[l];
        let out_shape = shapes[l];
        let c = out_shape[2];
        let z = trace.pre[l].sample(i);

        let mut gu: Vec<f64> = g
            .iter()
            .zip(z)
            .map(|(&gv, &zv)| {
                let mut s = layer.activation.slope(zv);
                if let Some(q) = quantizer {
                    if !q.passes(l, layer.activation.apply(zv)) {
                        s = 0.0;
                    }
                }
                gv * s
            })
            .collect();
        if let Some(bn) = &layer.batchnorm {
            for px in gu.chunks_exact_mut(c) {
                px.iter_mut().enumerate().for_each(|(ch, v)| *v *= bn.factor(ch));
            }
        }
        if layer.bias.is_some() {
            let mut gb = vec![0.0; c];
            for px in gu.chunks_exact(c) {
                gb.iter_mut().zip(px).for_each(|(a, b)| *a += b);
            }
            out[l] = Some(gb);
        }

        let in_shape = |src: &Source| match *src {
            Source::Input => graph.input_shape,
            Source::Layer(j) => shapes[j],
        };
        let mut channel_offset = 0;
        for src in &layer.inputs {
            let Source::Layer(j) = *src else {
                if let (LayerKind::Concat, s) = (&layer.kind, in_shape(src)) {
                    channel_offset += s[2];
                }
                continue;
            };
            let ishape = shapes[j];
            let gx = g_post[j].get_or_insert_with(|| vec![0.0; ishape.iter().product()]);
            match &layer.kind {
                LayerKind::Conv2d { stride, padding } => {
                    let wt = layer.weights.as_ref().expect("validated");
                    kernels::conv2d_input_grad(&gu, ishape, wt.data(), wt.shape(), *stride, *padding, out_shape, gx);
                }
                LayerKind::DepthwiseConv2d { stride, padding } => {
                    let wt = layer.weights.as_ref().expect("validated");
                    kernels::depthwise_input_grad(&gu, ishape, wt.data(), wt.shape(), *stride, *padding, out_shape, gx);
                }
                LayerKind::Dense => {
                    let wt = layer.weights.as_ref().expect("validated");
                    kernels::dense_input_grad(&gu, wt.data(), gx);
                }
                LayerKind::AvgPool { window, stride } => {
                    kernels::avg_pool_input_grad(&gu, ishape, *window, *stride, out_shape, gx);
                }
                LayerKind::Add => gx.iter_mut().zip(&gu).for_each(|(a, b)| *a += b),
                LayerKind::Concat => {
                    let ci = ishape[2];
                    for (p, px) in gu.chunks_exact(c).enumerate() {
                        for k in 0..ci {
                            gx[p * ci + k] += px[channel_offset + k];
                        }
                    }
                    channel_offset += ci;
                }
            }
        }
    }
    out
}
