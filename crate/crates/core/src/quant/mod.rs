//! Layerwise post-training quantization: batch-norm folding, dead-channel
//! removal, INT8-style symmetric weight grids, 16-bit bias grids, UINT8-style
//! min/max activation grids, and fake-quantized inference.

mod dead;
mod fold;
mod grid;
mod model;

pub use dead::{drop_dead_channels, DeadAction, DeadChannel, DEAD_VARIANCE};
pub use fold::fold_batchnorm;
pub use grid::{
    fake_quant, make_activation_grid, quantize_bias, quantize_bias_bits, quantize_weights_symmetric, QuantGrid,
    BIAS_BITS, MAX_BITS,
};
pub use model::{
    bias_bits_for, calibrate, forward_quant, forward_quant_with, prepare_and_quantize, quantize_model,
    CalibrationStats, GridQuantizer, PreparedModel, QuantBias, QuantConfig, QuantLayer, QuantTensor,
    QuantizedModel,
};
