use super::kernels;
use super::{Graph, LayerKind, LayerSpec, Shape3, Source};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Hook that turns full-precision inference into simulated quantized
/// inference. Implementations must be pure functions of their arguments.
pub trait ActivationQuantizer: Sync {
    /// Applied to the network input before the first layer.
    fn quantize_input(&self, x: &mut [f64]);
    /// Applied to a layer's post-activation output.
    fn quantize_output(&self, layer: usize, x: &mut [f64]);
    /// Straight-through estimator: whether gradient flows through the output
    /// quantizer of `layer` at the (unquantized) activation value `y`.
    fn passes(&self, layer: usize, y: f64) -> bool;
}

/// Pre- and post-activation outputs of every evaluated layer, batch-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub pre: Vec<Tensor>,
    pub post: Vec<Tensor>,
}

impl ActivationTrace {
    pub fn layers(&self) -> usize {
        self.post.len()
    }

    pub fn batch(&self) -> usize {
        self.post.first().map(Tensor::batch).unwrap_or(0)
    }

    pub fn at(&self, layer: usize, pre: bool) -> &Tensor {
        if pre {
            &self.pre[layer]
        } else {
            &self.post[layer]
        }
    }
}

#[derive(Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub capture: bool,
    pub quantizer: Option<&'a dyn ActivationQuantizer>,
    /// Evaluate layers `0..=stop_after` only. Logits are absent when the
    /// output layer is not reached.
    pub stop_after: Option<usize>,
}

pub struct ForwardOutput {
    pub logits: Option<Tensor>,
    pub trace: Option<ActivationTrace>,
}

/// Full-precision inference. Logits are the output layer's values flattened
/// per image.
pub fn forward(graph: &Graph, batch: &Tensor, capture: bool) -> Result<(Tensor, Option<ActivationTrace>)> {
    let out = forward_with(
        graph,
        batch,
        ForwardOptions {
            capture,
            ..Default::default()
        },
    )?;
    Ok((out.logits.expect("output layer evaluated"), out.trace))
}

pub fn forward_with(graph: &Graph, batch: &Tensor, opts: ForwardOptions<'_>) -> Result<ForwardOutput> {
    let shapes = graph.check()?;
    check_batch(graph, batch)?;
    let last = opts.stop_after.unwrap_or(graph.layers.len() - 1).min(graph.layers.len() - 1);
    let n = batch.batch();

    let per_sample = par::try_map_range(n, |i| {
        let (pre, post) = run_sample(graph, &shapes, batch.sample(i), opts.quantizer, last)?;
        let logits = (graph.output <= last).then(|| post[graph.output].clone());
        Ok::<_, Error>(if opts.capture {
            (logits, Some((pre, post)))
        } else {
            (logits, None)
        })
    })?;

    let mut logit_rows = Vec::with_capacity(n);
    let mut pre_rows: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n); last + 1];
    let mut post_rows: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n); last + 1];
    for (logits, captured) in per_sample {
        if let Some(l) = logits {
            logit_rows.push(l);
        }
        if let Some((pre, post)) = captured {
            for (l, (a, b)) in pre.into_iter().zip(post).enumerate() {
                pre_rows[l].push(a);
                post_rows[l].push(b);
            }
        }
    }

    let logits = if graph.output <= last {
        let [h, w, c] = shapes[graph.output];
        let t = Tensor::stack(&[h * w * c], logit_rows);
        if !t.all_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Some(t)
    } else {
        None
    };
    let trace = opts.capture.then(|| ActivationTrace {
        pre: pre_rows
            .into_iter()
            .zip(&shapes)
            .map(|(rows, s)| Tensor::stack(s, rows))
            .collect(),
        post: post_rows
            .into_iter()
            .zip(&shapes)
            .map(|(rows, s)| Tensor::stack(s, rows))
            .collect(),
    });
    Ok(ForwardOutput { logits, trace })
}

pub(super) fn check_batch(graph: &Graph, batch: &Tensor) -> Result<()> {
    let [h, w, c] = graph.input_shape;
    let s = batch.shape();
    if s.len() != 4 || s[1..] != [h, w, c] || s[0] == 0 {
        let layer = graph
            .layers
            .iter()
            .position(|l| l.inputs.contains(&Source::Input))
            .unwrap_or(0);
        return Err(Error::Shape {
            layer,
            name: graph.layers.get(layer).map(|l| l.name.clone()).unwrap_or_default(),
            msg: format!("batch of shape {s:?} does not match input [N, {h}, {w}, {c}]"),
        });
    }
    Ok(())
}

type SampleTrace = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn run_sample(
    graph: &Graph,
    shapes: &[Shape3],
    x: &[f64],
    quantizer: Option<&dyn ActivationQuantizer>,
    last: usize,
) -> Result<SampleTrace> {
    let mut input = x.to_vec();
    if let Some(q) = quantizer {
        q.quantize_input(&mut input);
    }
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(last + 1);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(last + 1);
    for (i, layer) in graph.layers.iter().enumerate().take(last + 1) {
        let ins: Vec<(&[f64], Shape3)> = layer
            .inputs
            .iter()
            .map(|s| match *s {
                Source::Input => (input.as_slice(), graph.input_shape),
                Source::Layer(j) => (post[j].as_slice(), shapes[j]),
            })
            .collect();
        let z = pre_activation(layer, &ins, shapes[i]);
        let mut y: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
        if let Some(q) = quantizer {
            q.quantize_output(i, &mut y);
        }
        pre.push(z);
        post.push(y);
    }
    Ok((pre, post))
}

/// Linear part of a layer plus bias and (unfolded) batch norm.
pub(super) fn pre_activation(layer: &LayerSpec, ins: &[(&[f64], Shape3)], out_shape: Shape3) -> Vec<f64> {
    let (x, in_shape) = ins[0];
    let mut z = match &layer.kind {
        LayerKind::Conv2d { stride, padding } => {
            let w = layer.weights.as_ref().expect("validated");
            kernels::conv2d(x, in_shape, w.data(), w.shape(), *stride, *padding, out_shape)
        }
        LayerKind::DepthwiseConv2d { stride, padding } => {
            let w = layer.weights.as_ref().expect("validated");
            kernels::depthwise(x, in_shape, w.data(), w.shape(), *stride, *padding, out_shape)
        }
        LayerKind::Dense => {
            let w = layer.weights.as_ref().expect("validated");
            kernels::dense(x, w.data(), out_shape[2])
        }
        LayerKind::AvgPool { window, stride } => kernels::avg_pool(x, in_shape, *window, *stride, out_shape),
        LayerKind::Add => {
            let mut acc = x.to_vec();
            for (other, _) in &ins[1..] {
                acc.iter_mut().zip(other.iter()).for_each(|(a, b)| *a += b);
            }
            acc
        }
        LayerKind::Concat => {
            let parts: Vec<(&[f64], usize)> = ins.iter().map(|(v, s)| (*v, s[2])).collect();
            kernels::concat(&parts, out_shape[0] * out_shape[1])
        }
    };
    let c = out_shape[2];
    if let Some(b) = &layer.bias {
        for px in z.chunks_exact_mut(c) {
            px.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
    }
    if let Some(bn) = &layer.batchnorm {
        for px in z.chunks_exact_mut(c) {
            for (ch, v) in px.iter_mut().enumerate() {
                *v = (*v - bn.mean[ch]) * bn.factor(ch) + bn.beta[ch];
            }
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::super::{Activation, LayerSpec, Padding};
    use super::*;

    fn single(layer: LayerSpec, input_shape: Shape3) -> Graph {
        Graph {
            input_shape,
            layers: vec![layer],
            output: 0,
        }
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut w = Tensor::zeros(vec![1, 1, 3, 3]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let g = single(LayerSpec::conv2d("id", Source::Input, w, vec![0.0; 3]), [2, 2, 3]);
        let x = Tensor::new(vec![2, 2, 2, 3], (0..24).map(|v| v as f64 * 0.37 - 2.0).collect()).unwrap();
        let (_, trace) = forward(&g, &x, true).unwrap();
        assert_eq!(trace.unwrap().post[0].data(), x.data());
    }

    #[test]
    fn depthwise_on_constant_plane() {
        // Each valid output pixel equals c * sum(kernel of that channel) + bias.
        let c = 1.5;
        let kernel: Vec<f64> = (0..18).map(|i| (i as f64 - 7.0) * 0.1).collect();
        let w = Tensor::new(vec![3, 3, 2, 1], kernel.clone()).unwrap();
        let bias = vec![0.25, -0.5];
        let g = single(LayerSpec::depthwise("dw", Source::Input, w, bias.clone()), [5, 5, 2]);
        let x = Tensor::filled(vec![1, 5, 5, 2], c);
        let (logits, _) = forward(&g, &x, false).unwrap();
        for ch in 0..2 {
            let ksum: f64 = (0..9).map(|t| kernel[t * 2 + ch]).sum();
            let expect = c * ksum + bias[ch];
            for p in 0..9 {
                assert!((logits.data()[p * 2 + ch] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu6_clamps() {
        let w = Tensor::filled(vec![1, 1], 1.0);
        let g = single(
            LayerSpec::dense("d", Source::Input, w, vec![0.0]).with_activation(Activation::Relu6),
            [1, 1, 1],
        );
        let x = Tensor::new(vec![1, 1, 1, 1], vec![7.0]).unwrap();
        let (y, _) = forward(&g, &x, false).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn same_padding_keeps_extent() {
        let w = Tensor::filled(vec![3, 3, 1, 1], 1.0);
        let g = single(
            LayerSpec::conv2d("c", Source::Input, w, vec![0.0]).with_padding(Padding::Same),
            [3, 3, 1],
        );
        let x = Tensor::filled(vec![1, 3, 3, 1], 1.0);
        let (y, _) = forward(&g, &x, false).unwrap();
        // corners see 4 taps, edges 6, centre 9
        assert_eq!(y.data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
    }

    #[test]
    fn batch_shape_mismatch_names_layer() {
        let w = Tensor::filled(vec![1, 1, 1, 1], 1.0);
        let g = single(LayerSpec::conv2d("first", Source::Input, w, vec![0.0]), [2, 2, 1]);
        let x = Tensor::zeros(vec![1, 3, 2, 1]);
        match forward(&g, &x, false) {
            Err(Error::Shape { layer, name, .. }) => assert_eq!((layer, name.as_str()), (0, "first")),
            other => panic!("unexpected {other:?}", other = other.map(|_| ())),
        }
    }

    #[test]
    fn concat_and_add() {
        let g = Graph {
            input_shape: [1, 2, 2],
            layers: vec![
                LayerSpec::concat("cat", vec![Source::Input, Source::Input]),
                LayerSpec::add("sum", vec![Source::Layer(0), Source::Layer(0)]),
            ],
            output: 1,
        };
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let (y, _) = forward(&g, &x, false).unwrap();
        assert_eq!(y.data(), &[2., 4., 2., 4., 6., 8., 6., 8.]);
    }
}
