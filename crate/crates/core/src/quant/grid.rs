use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest scale a weight grid may take; keeps all-zero tensors finite.
pub const MIN_WEIGHT_SCALE: f64 = 1e-12;
/// Range below which an activation grid is considered degenerate.
pub const DEGENERATE_RANGE: f64 = 1e-12;

pub const MAX_BITS: u32 = 32;

/// Uniform quantization grid: `real = (code - zero_point) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantGrid {
    pub bits: u32,
    pub scale: f64,
    pub zero_point: i64,
    pub symmetric: bool,
    pub qmin: i64,
    pub qmax: i64,
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=MAX_BITS).contains(&bits) {
        return Err(Error::Invalid(format!("bit width {bits} outside 2..={MAX_BITS}")));
    }
    Ok(())
}

impl QuantGrid {
    /// Signed grid with codes in `[-(2^(N-1)-1), 2^(N-1)-1]` covering `±max_abs`.
    pub fn symmetric(bits: u32, max_abs: f64) -> Result<Self> {
        check_bits(bits)?;
        if !max_abs.is_finite() {
            return Err(Error::Numeric(format!("non-finite range {max_abs}")));
        }
        let qmax = (1i64 << (bits - 1)) - 1;
        Ok(QuantGrid {
            bits,
            scale: (max_abs.abs() / qmax as f64).max(MIN_WEIGHT_SCALE),
            zero_point: 0,
            symmetric: true,
            qmin: -qmax,
            qmax,
        })
    }

    /// Unsigned asymmetric grid over `[min, max]`, widened to include zero and
    /// nudged so that zero is a grid point.
    pub fn activation(min: f64, max: f64, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        if !(min.is_finite() && max.is_finite()) || min > max {
            return Err(Error::Invalid(format!("invalid activation range [{min}, {max}]")));
        }
        let (min, max) = (min.min(0.0), max.max(0.0));
        let qmax = ((1u64 << bits) - 1) as i64;
        let levels = qmax as f64;
        let scale = if max - min < DEGENERATE_RANGE {
            (max.abs() / levels).max(1e-6)
        } else {
            (max - min) / levels
        };
        let zero_point = ((-min / scale).round() as i64).clamp(0, qmax);
        Ok(QuantGrid {
            bits,
            scale,
            zero_point,
            symmetric: false,
            qmin: 0,
            qmax,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.scale > 0.0
            && self.scale.is_finite()
            && self.qmin <= self.zero_point
            && self.zero_point <= self.qmax
            && (!self.symmetric || (self.zero_point == 0 && self.qmin == -self.qmax));
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("inconsistent grid {self:?}")))
        }
    }

    #[inline]
    pub fn quantize(&self, v: f64) -> i64 {
        let q = (v / self.scale).round();
        // Saturate in float space first; the cast would clip at i64 bounds anyway.
        let q = q.clamp((self.qmin - self.zero_point) as f64, (self.qmax - self.zero_point) as f64);
        q as i64 + self.zero_point
    }

    #[inline]
    pub fn dequantize(&self, code: i64) -> f64 {
        (code - self.zero_point) as f64 * self.scale
    }

    #[inline]
    pub fn fake_quant(&self, v: f64) -> f64 {
        self.dequantize(self.quantize(v))
    }

    /// Lowest representable value (the nudged minimum).
    pub fn min_value(&self) -> f64 {
        self.dequantize(self.qmin)
    }

    /// Highest representable value (the nudged maximum).
    pub fn max_value(&self) -> f64 {
        self.dequantize(self.qmax)
    }

    #[inline]
    pub fn contains(&self, v: f64) -> bool {
        v >= self.min_value() && v <= self.max_value()
    }

    /// Whether a real value would need a code outside the grid's range.
    pub fn overflows(&self, v: f64) -> bool {
        let q = (v / self.scale).round() + self.zero_point as f64;
        q < self.qmin as f64 || q > self.qmax as f64
    }
}

pub fn fake_quant(x: &Tensor, grid: &QuantGrid) -> Tensor {
    let data = x.data().iter().map(|&v| grid.fake_quant(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Per-tensor symmetric weight quantization.
pub fn quantize_weights_symmetric(w: &Tensor, bits: u32) -> Result<(QuantGrid, Vec<i32>)> {
    if w.is_empty() {
        return Err(Error::Invalid("cannot quantize an empty weight tensor".into()));
    }
    let max_abs = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let grid = QuantGrid::symmetric(bits, max_abs)?;
    let codes = w.data().iter().map(|&v| grid.quantize(v) as i32).collect();
    Ok((grid, codes))
}

pub fn make_activation_grid(min: f64, max: f64, bits: u32) -> Result<QuantGrid> {
    QuantGrid::activation(min, max, bits)
}

pub const BIAS_BITS: u32 = 16;

/// Bias grid on the accumulator scale `in_scale * w_scale`; falls back to
/// `max|b| / (2^(N-1)-1)` when that scale cannot hold every bias.
pub fn quantize_bias(b: &[f64], w_grid: &QuantGrid, in_grid: &QuantGrid) -> Result<(QuantGrid, Vec<i32>)> {
    quantize_bias_bits(b, w_grid, in_grid, BIAS_BITS)
}

pub fn quantize_bias_bits(
    b: &[f64],
    w_grid: &QuantGrid,
    in_grid: &QuantGrid,
    bits: u32,
) -> Result<(QuantGrid, Vec<i32>)> {
    let mut grid = QuantGrid::symmetric(bits, 0.0)?;
    grid.scale = in_grid.scale * w_grid.scale;
    if b.iter().any(|&v| grid.overflows(v)) {
        let max_abs = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        grid = QuantGrid::symmetric(bits, max_abs)?;
    }
    let codes = b.iter().map(|&v| grid.quantize(v) as i32).collect();
    Ok((grid, codes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn symmetric_weights_hand_example() {
        let w = Tensor::new(vec![3], vec![0.0, 0.5, -1.0]).unwrap();
        let (g, codes) = quantize_weights_symmetric(&w, 8).unwrap();
        assert!(close(g.scale, 1.0 / 127.0, 1e-15));
        assert_eq!(codes, vec![0, 64, -127]);
        let deq: Vec<f64> = codes.iter().map(|&c| g.dequantize(c as i64)).collect();
        assert!(close(deq[1], 0.503937, 1e-6));
        assert_eq!(deq[2], -1.0);
    }

    #[test]
    fn weight_grid_endpoint_round_trips() {
        let w = Tensor::new(vec![4], vec![0.3, -0.2, 0.71, 0.1]).unwrap();
        let (g, codes) = quantize_weights_symmetric(&w, 8).unwrap();
        assert_eq!(codes[2], 127);
        assert_eq!(g.dequantize(127), 0.71);
    }

    #[test]
    fn all_zero_weights() {
        let w = Tensor::zeros(vec![5]);
        let (g, codes) = quantize_weights_symmetric(&w, 8).unwrap();
        assert_eq!(g.scale, MIN_WEIGHT_SCALE);
        assert!(codes.iter().all(|&c| c == 0));
    }

    #[test]
    fn relu6_activation_grid() {
        let g = make_activation_grid(0.0, 6.0, 8).unwrap();
        assert!(close(g.scale, 6.0 / 255.0, 1e-15));
        assert_eq!(g.zero_point, 0);
    }

    #[test]
    fn signed_activation_grid_is_nudged() {
        let g = make_activation_grid(-1.0, 1.0, 8).unwrap();
        assert!(close(g.scale, 2.0 / 255.0, 1e-15));
        assert_eq!(g.zero_point, 128);
        assert!(close(g.min_value(), -1.00392, 1e-5));
        assert_eq!(g.fake_quant(0.0), 0.0);
    }

    #[test]
    fn range_includes_zero() {
        let g = make_activation_grid(0.2, 1.0, 8).unwrap();
        assert_eq!(g.zero_point, 0);
        assert!(close(g.scale, 1.0 / 255.0, 1e-15));
    }

    #[test]
    fn degenerate_range_fallback() {
        let g = make_activation_grid(0.0, 0.0, 8).unwrap();
        assert_eq!(g.scale, 1e-6);
        g.validate().unwrap();
    }

    #[test]
    fn fake_quant_hand_example() {
        let g = make_activation_grid(-1.0, 1.0, 8).unwrap();
        // 0.3 / (2/255) = 38.25 -> 38
        assert!(close(g.fake_quant(0.3), 38.0 * 2.0 / 255.0, 1e-15));
        assert!(close(g.fake_quant(0.3), 0.298039, 1e-6));
        assert_eq!(g.fake_quant(5.0), g.max_value());
    }

    #[test]
    fn bias_product_scale() {
        let in_g = make_activation_grid(-1.0, 1.0, 8).unwrap();
        let w_g = QuantGrid::symmetric(8, 1.0).unwrap();
        let (g, codes) = quantize_bias(&[0.01, 0.0], &w_g, &in_g).unwrap();
        assert_eq!(g.scale, 2.0 / 255.0 / 127.0);
        assert!(close(g.scale, 6.1752e-5, 1e-8));
        assert_eq!(codes, vec![162, 0]);
    }

    #[test]
    fn bias_overflow_fallback() {
        let in_g = make_activation_grid(0.0, 1.0, 8).unwrap();
        let w_g = QuantGrid::symmetric(8, 0.01).unwrap();
        let (g, codes) = quantize_bias(&[10.0, -3.0], &w_g, &in_g).unwrap();
        assert!(close(g.scale, 10.0 / 32767.0, 1e-15));
        assert_eq!(codes[0], 32767);
    }

    #[test]
    fn bad_bits_rejected() {
        assert!(QuantGrid::symmetric(1, 1.0).is_err());
        assert!(QuantGrid::activation(0.0, 1.0, 33).is_err());
        assert!(QuantGrid::activation(1.0, 0.0, 8).is_err());
    }
}
