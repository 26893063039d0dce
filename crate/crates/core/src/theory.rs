//! Monte Carlo study of how weight rounding produces mean activation shift.
//!
//! Two experiments:
//! * the sum of `k` weight rounding errors, whose spread grows like √k;
//! * the mean-shift-to-signal ratio of a single output channel with `k`
//!   non-negative weights fed non-negative inputs, whose spread across
//!   random layers falls like 1/√k.
//!
//! Each trial draws from its own ChaCha stream keyed by (seed, experiment,
//! k, trial), so results are identical whatever the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::quant::QuantGrid;

/// Redraws allowed for a single trial before the sampler is declared degenerate.
const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum Sampler {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
}

impl Sampler {
    fn validate(&self, what: &str) -> Result<()> {
        let ok = match *self {
            Sampler::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            Sampler::Normal { mean, std } => mean.is_finite() && std.is_finite() && std > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("{what} sampler {self:?} is degenerate")))
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Sampler::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            Sampler::Normal { mean, std } => Normal::new(mean, std).expect("validated").sample(rng),
        }
    }

    /// Draw rectified at zero, so any sampler yields post-ReLU-like inputs.
    fn draw_relu(&self, rng: &mut ChaCha8Rng) -> f64 {
        self.draw(rng).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub k_values: Vec<usize>,
    pub trials: usize,
    pub bits: u32,
    pub weight_sampler: Sampler,
    pub input_sampler: Sampler,
    /// Input vectors per trial used to estimate E(x_in) and RMS(x_out).
    pub input_samples: usize,
    pub seed: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            k_values: vec![9, 27, 128, 512],
            trials: 10_000,
            bits: 8,
            weight_sampler: Sampler::Uniform { lo: 0.0, hi: 1.0 },
            input_sampler: Sampler::Uniform { lo: 0.0, hi: 1.0 },
            input_samples: 32,
            seed: 0,
        }
    }
}

impl MonteCarloConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(Error::Invalid("k values must be non-empty and ≥ 1".into()));
        }
        if self.trials < 2 {
            return Err(Error::Invalid("need at least two trials".into()));
        }
        if self.input_samples == 0 {
            return Err(Error::Invalid("input_samples must be positive".into()));
        }
        QuantGrid::symmetric(self.bits, 1.0)?;
        self.weight_sampler.validate("weight")?;
        self.input_sampler.validate("input")?;
        if let Sampler::Uniform { hi, .. } = self.input_sampler {
            if hi <= 0.0 {
                return Err(Error::Invalid("input sampler never produces a positive value".into()));
            }
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn trial_rng(seed: u64, stream: u64, k: usize, trial: usize) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed) ^ stream) ^ k as u64) ^ trial as u64;
    ChaCha8Rng::seed_from_u64(splitmix(key))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Draws `k` weights with a non-zero maximum; returns them, the grid and the redraw count.
fn draw_weights(cfg: &MonteCarloConfig, rng: &mut ChaCha8Rng, k: usize) -> Result<(Vec<f64>, QuantGrid, usize)> {
    for redraws in 0..MAX_REDRAWS {
        let w: Vec<f64> = (0..k).map(|_| cfg.weight_sampler.draw(rng)).collect();
        let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max > 0.0 {
            return Ok((w, QuantGrid::symmetric(cfg.bits, max)?, redraws));
        }
    }
    Err(Error::Invalid("weight sampler keeps producing all-zero weights".into()))
}

/// Rounding error δ = Q(w) − w of every weight.
fn rounding_errors(w: &[f64], grid: &QuantGrid) -> Vec<f64> {
    w.iter().map(|&v| grid.fake_quant(v) - v).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSumRow {
    pub k: usize,
    pub empirical_mean: f64,
    pub empirical_std: f64,
    /// C·√(k/12) with C = 2·max|W|/2^(N−1), RMS-averaged over the trials' grids.
    pub predicted_std: f64,
    /// Same model with the actual grid step in place of C: step·√((k−1)/12).
    /// The largest weight sits on the grid and contributes no error.
    pub step_predicted_std: f64,
    pub redrawn: usize,
}

pub fn rounding_error_sum_stats(cfg: &MonteCarloConfig) -> Result<Vec<ErrorSumRow>> {
    cfg.validate()?;
    let half = (1u64 << (cfg.bits - 1)) as f64;
    cfg.k_values
        .iter()
        .map(|&k| {
            let trials = par::try_map_range(cfg.trials, |t| {
                let mut rng = trial_rng(cfg.seed, 0, k, t);
                let (w, grid, redrawn) = draw_weights(cfg, &mut rng, k)?;
                let sum: f64 = rounding_errors(&w, &grid).iter().sum();
                let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                Ok::<_, Error>((sum, 2.0 * max / half, grid.scale, redrawn))
            })?;
            let sums: Vec<f64> = trials.iter().map(|t| t.0).collect();
            let (empirical_mean, empirical_std) = mean_std(&sums);
            let n = trials.len() as f64;
            let c2 = trials.iter().map(|t| t.1 * t.1).sum::<f64>() / n;
            let s2 = trials.iter().map(|t| t.2 * t.2).sum::<f64>() / n;
            Ok(ErrorSumRow {
                k,
                empirical_mean,
                empirical_std,
                predicted_std: (c2 * k as f64 / 12.0).sqrt(),
                step_predicted_std: (s2 * (k as f64 - 1.0) / 12.0).sqrt(),
                redrawn: trials.iter().map(|t| t.3).sum(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MssrRow {
    pub k: usize,
    pub mssr_mean: f64,
    pub mssr_std: f64,
    /// Trials redrawn because the output carried no energy.
    pub redrawn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MssrScaling {
    pub rows: Vec<MssrRow>,
    /// Least-squares slope of ln std(MSSR) against ln k.
    pub slope: f64,
    pub intercept: f64,
}

/// One trial: E(x_in)·Σδ_w / RMS(x_out) for a fresh layer and input set.
fn mssr_trial(cfg: &MonteCarloConfig, k: usize, t: usize) -> Result<(f64, usize)> {
    let mut rng = trial_rng(cfg.seed, 1, k, t);
    let mut redrawn = 0;
    for _ in 0..MAX_REDRAWS {
        let (w, grid, r) = draw_weights(cfg, &mut rng, k)?;
        redrawn += r;
        let delta_sum: f64 = rounding_errors(&w, &grid).iter().sum();
        let (mut in_sum, mut out_sq) = (0.0, 0.0);
        for _ in 0..cfg.input_samples {
            let mut y = 0.0;
            for wi in &w {
                let x = cfg.input_sampler.draw_relu(&mut rng);
                in_sum += x;
                y += wi * x;
            }
            out_sq += y * y;
        }
        let rms_out = (out_sq / cfg.input_samples as f64).sqrt();
        if rms_out > 0.0 {
            let mean_in = in_sum / (cfg.input_samples * k) as f64;
            return Ok((mean_in * delta_sum / rms_out, redrawn));
        }
        redrawn += 1;
    }
    Err(Error::Numeric(format!("k={k} trial {t}: output energy stayed zero")))
}

pub fn fit_loglog(k: &[usize], y: &[f64]) -> Result<(f64, f64)> {
    if k.len() < 2 || y.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Numeric("log-log fit needs two or more positive points".into()));
    }
    let xs: Vec<f64> = k.iter().map(|&v| (v as f64).ln()).collect();
    let ys: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Numeric("log-log fit needs two distinct k".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

pub fn mssr_scaling_sim(cfg: &MonteCarloConfig) -> Result<MssrScaling> {
    cfg.validate()?;
    let rows = cfg
        .k_values
        .iter()
        .map(|&k| {
            let trials = par::try_map_range(cfg.trials, |t| mssr_trial(cfg, k, t))?;
            let values: Vec<f64> = trials.iter().map(|t| t.0).collect();
            let (mssr_mean, mssr_std) = mean_std(&values);
            Ok(MssrRow {
                k,
                mssr_mean,
                mssr_std,
                redrawn: trials.iter().map(|t| t.1).sum(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stds: Vec<f64> = rows.iter().map(|r| r.mssr_std).collect();
    let (slope, intercept) = fit_loglog(&cfg.k_values, &stds)?;
    Ok(MssrScaling { rows, slope, intercept })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MonteCarloConfig {
        MonteCarloConfig {
            k_values: vec![9, 64],
            trials: 500,
            ..Default::default()
        }
    }

    #[test]
    fn predicted_std_example() {
        let c: f64 = 2.0 / 128.0;
        assert!((c * (9.0f64 / 12.0).sqrt() - 0.013532).abs() < 5e-7);
    }

    #[test]
    fn reproducible() {
        let a = rounding_error_sum_stats(&small()).unwrap();
        let b = rounding_error_sum_stats(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(mssr_scaling_sim(&small()).unwrap(), mssr_scaling_sim(&small()).unwrap());
    }

    #[test]
    fn errors_within_half_step() {
        let cfg = small();
        let mut rng = trial_rng(3, 0, 9, 0);
        let (w, grid, _) = draw_weights(&cfg, &mut rng, 1000).unwrap();
        assert!(rounding_errors(&w, &grid).iter().all(|d| d.abs() <= grid.scale / 2.0 + 1e-15));
    }

    #[test]
    fn degenerate_samplers() {
        let mut cfg = small();
        cfg.weight_sampler = Sampler::Uniform { lo: 0.0, hi: 0.0 };
        assert!(rounding_error_sum_stats(&cfg).is_err());
        let mut cfg = small();
        cfg.input_sampler = Sampler::Uniform { lo: -1.0, hi: 0.0 };
        assert!(mssr_scaling_sim(&cfg).is_err());
    }

    #[test]
    fn exact_slope() {
        let k = [4, 16, 64];
        let y: Vec<f64> = k.iter().map(|&v| 3.0 / (v as f64).sqrt()).collect();
        let (s, b) = fit_loglog(&k, &y).unwrap();
        assert!((s + 0.5).abs() < 1e-12 && (b - 3f64.ln()).abs() < 1e-12);
    }
}
