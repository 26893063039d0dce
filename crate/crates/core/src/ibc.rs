//! Iterative bias correction.
//!
//! Layers are visited in topological order. For each biased layer the
//! quantized network is re-evaluated with every earlier correction already
//! applied, the per-channel mean shift against the full-precision network is
//! measured on a small batch, and that shift is folded into the layer's bias.
//! Only biases change; weights and all grids stay frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::excess_cross_entropy;
use crate::nn::{forward, Graph};
use crate::qstats::Site;
use crate::quant::{forward_quant, forward_quant_with, QuantizedModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IbcConfig {
    /// Where shifts are measured; post-activation by default.
    pub mode: Site,
    /// Round each corrected bias back onto its 16-bit grid immediately.
    pub bias_requantize: bool,
}

impl Default for IbcConfig {
    fn default() -> Self {
        IbcConfig {
            mode: Site::Post,
            bias_requantize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOutcome {
    Corrected,
    /// No bias to adjust.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbcLayerReport {
    pub layer: usize,
    pub name: String,
    pub outcome: LayerOutcome,
    /// Applied correction per channel (FP mean minus quantized mean).
    pub delta: Vec<f64>,
    /// Remaining shift (FP mean minus quantized mean) right after correction.
    pub residual: Vec<f64>,
    /// Channels that were identically zero in one network but not the other.
    pub dead: Vec<bool>,
    /// Bias codes that hit the edge of the frozen bias grid.
    pub saturated: usize,
}

pub type IbcReport = Vec<IbcLayerReport>;

fn check_pair(fp_graph: &Graph, qmodel: &QuantizedModel) -> Result<()> {
    if qmodel.graph.has_batchnorm() {
        return Err(Error::Invalid("quantized model still carries batch norm".into()));
    }
    let a = fp_graph.check()?;
    let b = qmodel.graph.check()?;
    if a != b {
        return Err(Error::Invalid("full-precision graph and quantized model differ in topology".into()));
    }
    Ok(())
}

pub fn ibc_run(fp_graph: &Graph, qmodel: &QuantizedModel, batch: &Tensor, cfg: IbcConfig) -> Result<(QuantizedModel, IbcReport)> {
    check_pair(fp_graph, qmodel)?;
    let pre = cfg.mode.is_pre();
    let (_, fp_trace) = forward(fp_graph, batch, true)?;
    let fp_trace = fp_trace.expect("captured");
    let fp_means: Vec<Vec<f64>> = (0..fp_trace.layers()).map(|l| fp_trace.at(l, pre).channel_means()).collect();

    let mut model = qmodel.clone();
    let mut report = Vec::with_capacity(model.layers.len());
    let quant_layer = |m: &QuantizedModel, l: usize| -> Result<Tensor> {
        let exec = m.exec_graph();
        let out = forward_quant_with(m, &exec, batch, true, Some(l))?;
        let trace = out.trace.expect("captured");
        Ok(trace.at(l, pre).clone())
    };

    for l in 0..model.layers.len() {
        let name = model.graph.layers[l].name.clone();
        if model.layers[l].bias.is_none() {
            report.push(IbcLayerReport {
                layer: l,
                name,
                outcome: LayerOutcome::Skipped,
                delta: vec![],
                residual: vec![],
                dead: vec![],
                saturated: 0,
            });
            continue;
        }
        let act = quant_layer(&model, l)?;
        let q_means = act.channel_means();
        let delta: Vec<f64> = fp_means[l].iter().zip(&q_means).map(|(f, q)| f - q).collect();
        if let Some(ch) = delta.iter().position(|d| !d.is_finite()) {
            return Err(Error::Numeric(format!("layer {l} ({name}): non-finite shift on channel {ch}")));
        }
        let dead = if pre {
            vec![false; delta.len()]
        } else {
            let fp_act = fp_trace.at(l, false);
            (0..delta.len())
                .map(|ch| {
                    let q_zero = act.channel_values(ch).all(|v| v == 0.0);
                    let f_zero = fp_act.channel_values(ch).all(|v| v == 0.0);
                    (q_zero && fp_means[l][ch] > 0.0) || (f_zero && q_means[ch] > 0.0)
                })
                .collect()
        };

        let bias = model.layers[l].bias.as_mut().expect("checked");
        let updated: Vec<f64> = bias.values().iter().zip(&delta).map(|(b, d)| b + d).collect();
        let saturated = bias.set(&updated, cfg.bias_requantize);

        let after = quant_layer(&model, l)?.channel_means();
        let residual = fp_means[l].iter().zip(&after).map(|(f, q)| f - q).collect();
        report.push(IbcLayerReport {
            layer: l,
            name,
            outcome: LayerOutcome::Corrected,
            delta,
            residual,
            dead,
            saturated,
        });
    }
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub batch_size: usize,
    /// Excess teacher-student cross-entropy on the evaluation set.
    pub metric: f64,
}

/// Runs IBC once per batch size on a seeded subset of `pool` and scores each
/// corrected model on `eval`. A subset keeps the pool's order, so the full
/// pool reproduces a plain [`ibc_run`] on it.
pub fn ibc_sweep(
    fp_graph: &Graph,
    qmodel: &QuantizedModel,
    pool: &Tensor,
    sizes: &[usize],
    eval: &Tensor,
    cfg: IbcConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let (teacher, _) = forward(fp_graph, eval, false)?;
    let mut perm: Vec<usize> = (0..pool.batch()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    sizes
        .iter()
        .map(|&size| {
            if size == 0 || size > pool.batch() {
                return Err(Error::Invalid(format!("batch size {size} outside 1..={}", pool.batch())));
            }
            let mut idx = perm[..size].to_vec();
            idx.sort_unstable();
            let (corrected, _) = ibc_run(fp_graph, qmodel, &pool.select(&idx), cfg)?;
            let (student, _) = forward_quant(&corrected, eval, false)?;
            Ok(SweepRow {
                batch_size: size,
                metric: excess_cross_entropy(&teacher, &student)?,
            })
        })
        .collect()
}
