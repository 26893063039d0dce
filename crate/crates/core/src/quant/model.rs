use serde::{Deserialize, Serialize};

use super::dead::{drop_dead_channels, DeadChannel};
use super::fold::fold_batchnorm;
use super::grid::{quantize_bias_bits, quantize_weights_symmetric, QuantGrid, BIAS_BITS};
use crate::error::{Error, Result};
use crate::nn::{forward, forward_with, ActivationQuantizer, ActivationTrace, ForwardOptions, Graph, Source};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    pub grid: QuantGrid,
    pub codes: Vec<i32>,
}

impl QuantTensor {
    pub fn dequantized(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| self.grid.dequantize(c as i64)).collect()
    }
}

/// Quantized bias. `exact` holds full-precision values when a correction was
/// applied without re-quantization; inference then uses them instead of the codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantBias {
    pub grid: QuantGrid,
    pub codes: Vec<i32>,
    pub exact: Option<Vec<f64>>,
}

impl QuantBias {
    pub fn values(&self) -> Vec<f64> {
        match &self.exact {
            Some(v) => v.clone(),
            None => self.codes.iter().map(|&c| self.grid.dequantize(c as i64)).collect(),
        }
    }

    /// Replaces the bias. With `requantize` the values are rounded onto the
    /// existing grid (saturating); returns how many entries saturated.
    pub fn set(&mut self, values: &[f64], requantize: bool) -> usize {
        let saturated = values.iter().filter(|&&v| self.grid.overflows(v)).count();
        self.codes = values.iter().map(|&v| self.grid.quantize(v) as i32).collect();
        self.exact = (!requantize).then(|| values.to_vec());
        if requantize {
            saturated
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantLayer {
    pub weights: Option<QuantTensor>,
    pub bias: Option<QuantBias>,
    /// Grid of the layer's post-activation output; frozen after calibration.
    pub activation: QuantGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    /// The folded, dead-channel-processed full-precision graph.
    pub graph: Graph,
    pub input_grid: QuantGrid,
    pub layers: Vec<QuantLayer>,
}

/// Per-layer min/max of post-activation values over a calibration batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub input: (f64, f64),
    pub layers: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits_w: u32,
    pub bits_a: u32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig { bits_w: 8, bits_a: 8 }
    }
}

/// Bias width: 16 bits, lifted to 32 when weights and activations are both
/// 32-bit so that the "quantization disabled" mode really is lossless.
pub fn bias_bits_for(bits_w: u32, bits_a: u32) -> u32 {
    if bits_w >= 32 && bits_a >= 32 {
        32
    } else {
        BIAS_BITS
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

pub fn calibrate(graph: &Graph, calib: &Tensor) -> Result<CalibrationStats> {
    let (_, trace) = forward(graph, calib, true)?;
    let trace = trace.expect("captured");
    Ok(CalibrationStats {
        input: min_max(calib.data()),
        layers: trace.post.iter().map(|t| min_max(t.data())).collect(),
    })
}

/// Quantizes a folded graph: weight grids per layer, activation grids from
/// calibration min/max, bias grids on the accumulator scale.
pub fn quantize_model(graph: &Graph, calib: &Tensor, bits_w: u32, bits_a: u32) -> Result<QuantizedModel> {
    if graph.has_batchnorm() {
        return Err(Error::Invalid("graph must be batch-norm folded before quantization".into()));
    }
    let stats = calibrate(graph, calib)?;
    let input_grid = QuantGrid::activation(stats.input.0, stats.input.1, bits_a)?;
    let act_grids = stats
        .layers
        .iter()
        .map(|&(lo, hi)| QuantGrid::activation(lo, hi, bits_a))
        .collect::<Result<Vec<_>>>()?;
    let bias_bits = bias_bits_for(bits_w, bits_a);

    let mut layers = Vec::with_capacity(graph.layers.len());
    for (i, layer) in graph.layers.iter().enumerate() {
        let (weights, bias) = match (&layer.weights, &layer.bias) {
            (Some(w), Some(b)) => {
                let (wg, codes) = quantize_weights_symmetric(w, bits_w)?;
                let in_grid = match layer.inputs[0] {
                    Source::Input => &input_grid,
                    Source::Layer(j) => &act_grids[j],
                };
                let (bg, bcodes) = quantize_bias_bits(b, &wg, in_grid, bias_bits)?;
                (
                    Some(QuantTensor { grid: wg, codes }),
                    Some(QuantBias {
                        grid: bg,
                        codes: bcodes,
                        exact: None,
                    }),
                )
            }
            _ => (None, None),
        };
        layers.push(QuantLayer {
            weights,
            bias,
            activation: act_grids[i],
        });
    }
    Ok(QuantizedModel {
        graph: graph.clone(),
        input_grid,
        layers,
    })
}

#[derive(Debug, Clone)]
pub struct PreparedModel {
    pub folded: Graph,
    pub dead: Vec<DeadChannel>,
    pub qmodel: QuantizedModel,
}

/// Full scheme: fold batch norm, drop dead channels, then quantize.
pub fn prepare_and_quantize(graph: &Graph, calib: &Tensor, cfg: QuantConfig) -> Result<PreparedModel> {
    let folded = fold_batchnorm(graph)?;
    let (cleaned, dead) = drop_dead_channels(&folded, calib)?;
    let qmodel = quantize_model(&cleaned, calib, cfg.bits_w, cfg.bits_a)?;
    Ok(PreparedModel {
        folded: cleaned,
        dead,
        qmodel,
    })
}

impl QuantizedModel {
    /// Effective per-layer biases (`None` for bias-free layers).
    pub fn biases(&self) -> Vec<Option<Vec<f64>>> {
        self.layers.iter().map(|l| l.bias.as_ref().map(QuantBias::values)).collect()
    }

    /// Graph executing dequantized weights and the effective biases.
    pub fn exec_graph(&self) -> Graph {
        self.exec_graph_with_biases(&self.biases())
    }

    /// As [`exec_graph`](Self::exec_graph) but with caller-supplied biases.
    pub fn exec_graph_with_biases(&self, biases: &[Option<Vec<f64>>]) -> Graph {
        let mut g = self.graph.clone();
        for ((layer, q), b) in g.layers.iter_mut().zip(&self.layers).zip(biases) {
            if let (Some(w), Some(qw)) = (layer.weights.as_mut(), &q.weights) {
                *w = Tensor::new(w.shape().to_vec(), qw.dequantized()).expect("same shape");
            }
            if layer.bias.is_some() {
                layer.bias = b.clone();
            }
            layer.batchnorm = None;
        }
        g
    }

    pub fn quantizer(&self) -> GridQuantizer<'_> {
        GridQuantizer { model: self }
    }

    /// Whether weights and all grids match `other` bit for bit.
    pub fn same_except_biases(&self, other: &QuantizedModel) -> bool {
        self.graph.layers.len() == other.graph.layers.len()
            && self.input_grid == other.input_grid
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights == b.weights
                    && a.activation == b.activation
                    && a.bias.as_ref().map(|x| x.grid) == b.bias.as_ref().map(|x| x.grid)
            })
            && self.graph.layers.iter().zip(&other.graph.layers).all(|(a, b)| {
                a.weights == b.weights && a.kind == b.kind && a.inputs == b.inputs && a.activation == b.activation
            })
    }
}

/// Applies the model's frozen activation grids during inference.
pub struct GridQuantizer<'a> {
    model: &'a QuantizedModel,
}

impl ActivationQuantizer for GridQuantizer<'_> {
    fn quantize_input(&self, x: &mut [f64]) {
        let g = self.model.input_grid;
        x.iter_mut().for_each(|v| *v = g.fake_quant(*v));
    }

    fn quantize_output(&self, layer: usize, x: &mut [f64]) {
        let g = self.model.layers[layer].activation;
        x.iter_mut().for_each(|v| *v = g.fake_quant(*v));
    }

    fn passes(&self, layer: usize, y: f64) -> bool {
        self.model.layers[layer].activation.contains(y)
    }
}

/// Simulated quantized inference.
pub fn forward_quant(qmodel: &QuantizedModel, batch: &Tensor, capture: bool) -> Result<(Tensor, Option<ActivationTrace>)> {
    let exec = qmodel.exec_graph();
    let q = qmodel.quantizer();
    let out = forward_with(
        &exec,
        batch,
        ForwardOptions {
            capture,
            quantizer: Some(&q),
            stop_after: None,
        },
    )?;
    Ok((out.logits.expect("output evaluated"), out.trace))
}

/// Quantized inference of a pre-built execution graph (see
/// [`QuantizedModel::exec_graph_with_biases`]), optionally stopping early.
pub fn forward_quant_with(
    qmodel: &QuantizedModel,
    exec: &Graph,
    batch: &Tensor,
    capture: bool,
    stop_after: Option<usize>,
) -> Result<crate::nn::ForwardOutput> {
    let q = qmodel.quantizer();
    forward_with(
        exec,
        batch,
        ForwardOptions {
            capture,
            quantizer: Some(&q),
            stop_after,
        },
    )
}
