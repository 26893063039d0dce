use crate::error::{Error, Result};
use crate::nn::{Graph, LayerKind};

/// Absorbs attached batch-norm parameters into kernels and biases:
/// `W' = W·γ/√(σ²+ε)`, `b' = (b−μ)·γ/√(σ²+ε) + β`.
pub fn fold_batchnorm(graph: &Graph) -> Result<Graph> {
    let mut out = graph.clone();
    for (i, layer) in out.layers.iter_mut().enumerate() {
        let Some(bn) = layer.batchnorm.take() else { continue };
        if let Some(ch) = bn.var.iter().position(|&v| v < 0.0) {
            return Err(Error::Invalid(format!(
                "layer {i} ({}): negative batch-norm variance on channel {ch}",
                layer.name
            )));
        }
        let factors: Vec<f64> = (0..bn.gamma.len()).map(|c| bn.factor(c)).collect();
        if let Some(ch) = factors.iter().position(|f| !f.is_finite()) {
            return Err(Error::Numeric(format!(
                "layer {i} ({}): batch-norm scale on channel {ch} is not finite (σ²+ε = 0?)",
                layer.name
            )));
        }
        let w = layer.weights.as_mut().expect("batch norm only on parametric layers");
        // Output channel is the last kernel axis, except for depthwise kernels
        // [kh, kw, c, 1] where it is the third.
        let stride = match layer.kind {
            LayerKind::DepthwiseConv2d { .. } => w.shape()[2],
            _ => *w.shape().last().unwrap(),
        };
        for (j, v) in w.data_mut().iter_mut().enumerate() {
            *v *= factors[j % stride];
        }
        let b = layer.bias.as_mut().expect("parametric layers carry a bias");
        for (c, bv) in b.iter_mut().enumerate() {
            *bv = (*bv - bn.mean[c]) * factors[c] + bn.beta[c];
        }
    }
    Ok(out)
}
