//! Minimal CNN graph: layer definitions, shape propagation, full-precision
//! inference with optional activation quantization hooks, and reverse-mode
//! gradients with respect to biases.

mod backward;
mod forward;
mod kernels;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use backward::{backward_bias_grads, backward_bias_grads_with, BiasGrads};
pub use forward::{forward, forward_with, ActivationQuantizer, ActivationTrace, ForwardOptions, ForwardOutput};

/// Per-image activation extents: height, width, channels.
pub type Shape3 = [usize; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    Relu6,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::None => z,
            Activation::Relu => z.max(0.0),
            Activation::Relu6 => z.clamp(0.0, 6.0),
        }
    }

    /// Slope of the activation at `z`. Kinks count as flat.
    #[inline]
    pub fn slope(self, z: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Relu => f64::from(u8::from(z > 0.0)),
            Activation::Relu6 => f64::from(u8::from(z > 0.0 && z < 6.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        stride: usize,
        padding: Padding,
    },
    DepthwiseConv2d {
        stride: usize,
        padding: Padding,
    },
    Dense,
    /// Valid-padded average pooling; `window: None` pools globally.
    AvgPool {
        window: Option<[usize; 2]>,
        stride: usize,
    },
    Add,
    Concat,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::DepthwiseConv2d { .. } => "depthwise_conv2d",
            LayerKind::Dense => "dense",
            LayerKind::AvgPool { .. } => "avg_pool",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
        }
    }

    /// Whether the kind carries a kernel and a per-channel bias.
    pub fn is_parametric(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. } | LayerKind::DepthwiseConv2d { .. } | LayerKind::Dense
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Input,
    Layer(usize),
}

/// Inference-mode batch normalization attached to a parametric layer's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 0.0,
        }
    }

    /// Per-channel multiplier γ/√(σ²+ε).
    pub fn factor(&self, ch: usize) -> f64 {
        self.gamma[ch] / (self.var[ch] + self.eps).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<Source>,
    pub activation: Activation,
    pub weights: Option<Tensor>,
    pub bias: Option<Vec<f64>>,
    pub batchnorm: Option<BatchNorm>,
}

impl LayerSpec {
    pub fn conv2d(name: &str, input: Source, weights: Tensor, bias: Vec<f64>) -> Self {
        Self::parametric(
            name,
            LayerKind::Conv2d {
                stride: 1,
                padding: Padding::Valid,
            },
            input,
            weights,
            bias,
        )
    }

    pub fn depthwise(name: &str, input: Source, weights: Tensor, bias: Vec<f64>) -> Self {
        Self::parametric(
            name,
            LayerKind::DepthwiseConv2d {
                stride: 1,
                padding: Padding::Valid,
            },
            input,
            weights,
            bias,
        )
    }

    pub fn dense(name: &str, input: Source, weights: Tensor, bias: Vec<f64>) -> Self {
        Self::parametric(name, LayerKind::Dense, input, weights, bias)
    }

    fn parametric(
        name: &str,
        kind: LayerKind,
        input: Source,
        weights: Tensor,
        bias: Vec<f64>,
    ) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
            inputs: vec![input],
            activation: Activation::None,
            weights: Some(weights),
            bias: Some(bias),
            batchnorm: None,
        }
    }

    pub fn pool(name: &str, input: Source, window: Option<[usize; 2]>, stride: usize) -> Self {
        Self::structural(name, LayerKind::AvgPool { window, stride }, vec![input])
    }

    pub fn add(name: &str, inputs: Vec<Source>) -> Self {
        Self::structural(name, LayerKind::Add, inputs)
    }

    pub fn concat(name: &str, inputs: Vec<Source>) -> Self {
        Self::structural(name, LayerKind::Concat, inputs)
    }

    fn structural(name: &str, kind: LayerKind, inputs: Vec<Source>) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
            inputs,
            activation: Activation::None,
            weights: None,
            bias: None,
            batchnorm: None,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        match &mut self.kind {
            LayerKind::Conv2d { stride, .. }
            | LayerKind::DepthwiseConv2d { stride, .. }
            | LayerKind::AvgPool { stride, .. } => *stride = s,
            _ => {}
        }
        self
    }

    pub fn with_padding(mut self, p: Padding) -> Self {
        if let LayerKind::Conv2d { padding, .. } | LayerKind::DepthwiseConv2d { padding, .. } =
            &mut self.kind
        {
            *padding = p;
        }
        self
    }

    pub fn with_batchnorm(mut self, bn: BatchNorm) -> Self {
        self.batchnorm = Some(bn);
        self
    }

    /// Number of kernel elements feeding one output value.
    pub fn fan_in_k(&self) -> Option<usize> {
        let w = self.weights.as_ref()?;
        let s = w.shape();
        match self.kind {
            LayerKind::Conv2d { .. } => Some(s[0] * s[1] * s[2]),
            LayerKind::DepthwiseConv2d { .. } => Some(s[0] * s[1]),
            LayerKind::Dense => Some(s[0]),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub input_shape: Shape3,
    pub layers: Vec<LayerSpec>,
    pub output: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticKind {
    Ordering,
    Arity,
    Shape,
    Bias,
    BatchNorm,
    Output,
}

/// First violated structural invariant found by [`Graph::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub layer: usize,
    pub kind: DiagnosticKind,
    pub msg: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer {}: {:?}: {}", self.layer, self.kind, self.msg)
    }
}

impl From<Diagnostic> for Error {
    fn from(d: Diagnostic) -> Self {
        Error::Graph(d.to_string())
    }
}

fn conv_out(extent: usize, k: usize, stride: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Same => Some(extent.div_ceil(stride)),
        Padding::Valid => (extent >= k).then(|| (extent - k) / stride + 1),
    }
}

/// Leading pad for TF-style SAME padding.
pub(crate) fn pad_before(extent: usize, out: usize, k: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => 0,
        Padding::Same => ((out - 1) * stride + k).saturating_sub(extent) / 2,
    }
}

impl Graph {
    /// Checks ordering, arity, parameter extents and shape propagation.
    /// Returns the per-layer output shapes.
    pub fn validate(&self) -> std::result::Result<Vec<Shape3>, Diagnostic> {
        let mut shapes: Vec<Shape3> = Vec::with_capacity(self.layers.len());
        let diag = |layer, kind, msg: String| Diagnostic { layer, kind, msg };
        for (i, layer) in self.layers.iter().enumerate() {
            let mut ins = Vec::with_capacity(layer.inputs.len());
            for src in &layer.inputs {
                match *src {
                    Source::Input => ins.push(self.input_shape),
                    Source::Layer(j) if j < i => ins.push(shapes[j]),
                    Source::Layer(j) => {
                        return Err(diag(
                            i,
                            DiagnosticKind::Ordering,
                            format!("references layer {j}, which is not earlier"),
                        ))
                    }
                }
            }
            let arity_ok = match layer.kind {
                LayerKind::Add | LayerKind::Concat => ins.len() >= 2,
                _ => ins.len() == 1,
            };
            if !arity_ok {
                return Err(diag(
                    i,
                    DiagnosticKind::Arity,
                    format!("{} takes a different number of inputs than {}", layer.kind.name(), ins.len()),
                ));
            }
            if layer.kind.is_parametric() != layer.weights.is_some()
                || layer.kind.is_parametric() != layer.bias.is_some()
            {
                return Err(diag(
                    i,
                    DiagnosticKind::Shape,
                    "weights/bias presence does not match layer kind".into(),
                ));
            }
            let out = self.layer_shape(i, layer, &ins)?;
            if let Some(b) = &layer.bias {
                if b.len() != out[2] {
                    return Err(diag(
                        i,
                        DiagnosticKind::Bias,
                        format!("bias has {} entries for {} channels", b.len(), out[2]),
                    ));
                }
            }
            if let Some(bn) = &layer.batchnorm {
                if !layer.kind.is_parametric() {
                    return Err(diag(i, DiagnosticKind::BatchNorm, "batch norm on non-parametric layer".into()));
                }
                let c = out[2];
                if [bn.gamma.len(), bn.beta.len(), bn.mean.len(), bn.var.len()]
                    .iter()
                    .any(|&n| n != c)
                {
                    return Err(diag(i, DiagnosticKind::BatchNorm, format!("parameters must have {c} entries")));
                }
            }
            shapes.push(out);
        }
        if self.output >= self.layers.len() {
            return Err(diag(
                self.output,
                DiagnosticKind::Output,
                format!("output index outside {} layers", self.layers.len()),
            ));
        }
        Ok(shapes)
    }

    fn layer_shape(&self, i: usize, layer: &LayerSpec, ins: &[Shape3]) -> std::result::Result<Shape3, Diagnostic> {
        let shape_err = |msg: String| Diagnostic {
            layer: i,
            kind: DiagnosticKind::Shape,
            msg,
        };
        let [h, w, c] = ins[0];
        match &layer.kind {
            LayerKind::Conv2d { stride, padding } | LayerKind::DepthwiseConv2d { stride, padding } => {
                let ws = layer.weights.as_ref().map(|t| t.shape().to_vec()).unwrap_or_default();
                if ws.len() != 4 || *stride == 0 {
                    return Err(shape_err(format!("kernel shape {ws:?} / stride {stride} invalid")));
                }
                let depthwise = matches!(layer.kind, LayerKind::DepthwiseConv2d { .. });
                let (cin_ok, cout) = if depthwise {
                    (ws[2] == c && ws[3] == 1, c)
                } else {
                    (ws[2] == c, ws[3])
                };
                if !cin_ok {
                    return Err(shape_err(format!("kernel {ws:?} does not accept {c} input channels")));
                }
                let oh = conv_out(h, ws[0], *stride, *padding);
                let ow = conv_out(w, ws[1], *stride, *padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok([oh, ow, cout]),
                    _ => Err(shape_err(format!("kernel {ws:?} larger than input {h}x{w}"))),
                }
            }
            LayerKind::Dense => {
                let ws = layer.weights.as_ref().map(|t| t.shape().to_vec()).unwrap_or_default();
                if ws.len() != 2 || ws[0] != h * w * c {
                    return Err(shape_err(format!("dense kernel {ws:?} for {} inputs", h * w * c)));
                }
                Ok([1, 1, ws[1]])
            }
            LayerKind::AvgPool { window, stride } => {
                let [ph, pw] = window.unwrap_or([h, w]);
                if *stride == 0 || ph == 0 || pw == 0 || ph > h || pw > w {
                    return Err(shape_err(format!("pool window {ph}x{pw} invalid for {h}x{w}")));
                }
                Ok([(h - ph) / stride + 1, (w - pw) / stride + 1, c])
            }
            LayerKind::Add => {
                if ins.iter().any(|s| *s != ins[0]) {
                    return Err(shape_err(format!("add operands differ: {ins:?}")));
                }
                Ok(ins[0])
            }
            LayerKind::Concat => {
                if ins.iter().any(|s| s[0] != h || s[1] != w) {
                    return Err(shape_err(format!("concat operands differ spatially: {ins:?}")));
                }
                Ok([h, w, ins.iter().map(|s| s[2]).sum()])
            }
        }
    }

    pub fn check(&self) -> Result<Vec<Shape3>> {
        Ok(self.validate()?)
    }

    /// Indices of layers that carry a bias.
    pub fn biased_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.bias.is_some())
            .map(|(i, _)| i)
    }

    /// Layers that read the output of `layer`.
    pub fn consumers(&self, layer: usize) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.inputs.contains(&Source::Layer(layer)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| l.batchnorm.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Graph {
        let w1 = Tensor::filled(vec![1, 1, 2, 3], 0.5);
        let w2 = Tensor::filled(vec![3, 3, 3, 1], 0.1);
        let w3 = Tensor::filled(vec![3, 4], 0.2);
        Graph {
            input_shape: [5, 5, 2],
            layers: vec![
                LayerSpec::conv2d("c1", Source::Input, w1, vec![0.0; 3]),
                LayerSpec::depthwise("dw", Source::Layer(0), w2, vec![0.0; 3])
                    .with_padding(Padding::Same),
                LayerSpec::pool("gap", Source::Layer(1), None, 1),
                LayerSpec::dense("fc", Source::Layer(2), w3, vec![0.0; 4]),
            ],
            output: 3,
        }
    }

    #[test]
    fn valid_chain() {
        let shapes = chain().validate().unwrap();
        assert_eq!(shapes, vec![[5, 5, 3], [5, 5, 3], [1, 1, 3], [1, 1, 4]]);
    }

    #[test]
    fn forward_reference_is_ordering_error() {
        let mut g = chain();
        g.layers[1].inputs = vec![Source::Layer(2)];
        assert_eq!(g.validate().unwrap_err().kind, DiagnosticKind::Ordering);
    }

    #[test]
    fn short_bias_is_bias_error() {
        let mut g = chain();
        g.layers[0].bias = Some(vec![0.0; 2]);
        let d = g.validate().unwrap_err();
        assert_eq!((d.layer, d.kind), (0, DiagnosticKind::Bias));
    }

    #[test]
    fn fan_in_counts() {
        let g = chain();
        assert_eq!(g.layers[0].fan_in_k(), Some(2));
        assert_eq!(g.layers[1].fan_in_k(), Some(9));
        assert_eq!(g.layers[3].fan_in_k(), Some(3));
        assert_eq!(g.layers[2].fan_in_k(), None);
    }

    #[test]
    fn same_padding_strided() {
        assert_eq!(conv_out(7, 3, 2, Padding::Same), Some(4));
        assert_eq!(pad_before(7, 4, 3, 2, Padding::Same), 1);
        assert_eq!(conv_out(7, 3, 2, Padding::Valid), Some(3));
    }
}
