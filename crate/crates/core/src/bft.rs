//! Bias fine-tuning by distillation.
//!
//! Only the biases of a quantized model are trained, against the softmax of
//! the full-precision network, with Adam and a piecewise-constant learning
//! rate. Gradients flow through the frozen activation quantizers as a clipped
//! straight-through estimator. At the end the tuned biases are rounded back
//! onto their frozen 16-bit grids.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{backward_bias_grads_with, forward, Graph};
use crate::quant::{forward_quant_with, QuantizedModel};
use crate::tensor::Tensor;

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Batch-mean cross-entropy of the student against the teacher's softmax,
/// with its gradient with respect to the student logits.
pub fn distillation_loss(teacher: &Tensor, student: &Tensor) -> Result<(f64, Tensor)> {
    if teacher.shape() != student.shape() || teacher.shape().len() != 2 || teacher.batch() == 0 {
        return Err(Error::Invalid(format!(
            "teacher {:?} and student {:?} logits must both be [N, classes]",
            teacher.shape(),
            student.shape()
        )));
    }
    let n = teacher.batch();
    let mut grad = Vec::with_capacity(student.len());
    let mut loss = 0.0;
    for i in 0..n {
        let pt = softmax(teacher.sample(i));
        let ls = log_softmax(student.sample(i));
        loss -= pt.iter().zip(&ls).map(|(p, l)| if *p == 0.0 { 0.0 } else { p * l }).sum::<f64>();
        // Same routine for both softmaxes, so equal logits give an exactly zero gradient.
        let ps = softmax(student.sample(i));
        grad.extend(ps.iter().zip(&pt).map(|(s, t)| (s - t) / n as f64));
    }
    Ok((loss / n as f64, Tensor::new(student.shape().to_vec(), grad)?))
}

/// One constant-rate stretch of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub lr: f64,
    pub epochs: usize,
}

/// Learning-rate schedule written as `LRxEPOCHS` phases, e.g. `1e-3x16,1e-4x16`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule(pub Vec<Phase>);

impl Default for Schedule {
    fn default() -> Self {
        Schedule([1e-3, 1e-4, 1e-5, 1e-6].iter().map(|&lr| Phase { lr, epochs: 16 }).collect())
    }
}

impl Schedule {
    pub fn total_epochs(&self) -> usize {
        self.0.iter().map(|p| p.epochs).sum()
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(Schedule(vec![]));
        }
        s.split(',')
            .map(|part| {
                let bad = || Error::Invalid(format!("schedule phase `{part}` is not LRxEPOCHS"));
                let (lr, ep) = part.trim().rsplit_once(['x', 'X']).ok_or_else(bad)?;
                let lr: f64 = lr.parse().map_err(|_| bad())?;
                let epochs: usize = ep.parse().map_err(|_| bad())?;
                if !(lr.is_finite() && lr > 0.0) {
                    return Err(Error::Invalid(format!("learning rate {lr} must be positive")));
                }
                if epochs == 0 {
                    return Err(Error::Invalid(format!("phase `{part}` has no mini-epochs")));
                }
                Ok(Phase { lr, epochs })
            })
            .collect::<Result<_>>()
            .map(Schedule)
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|p| format!("{:e}x{}", p.lr, p.epochs)).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BftConfig {
    pub schedule: Schedule,
    pub minibatch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for BftConfig {
    fn default() -> Self {
        BftConfig {
            schedule: Schedule::default(),
            minibatch: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

/// Trainable biases plus Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub biases: Vec<Option<Vec<f64>>>,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    pub step: u64,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(qmodel: &QuantizedModel) -> Self {
        let biases = qmodel.biases();
        let zeros: Vec<_> = biases.iter().map(|b| b.as_ref().map(|b| vec![0.0; b.len()])).collect();
        TrainState {
            biases,
            m: zeros.clone(),
            v: zeros,
            step: 0,
            loss_history: vec![],
        }
    }

    fn adam(&mut self, grads: &[Option<Vec<f64>>], lr: f64, cfg: &BftConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for l in 0..self.biases.len() {
            let (Some(b), Some(m), Some(v), Some(g)) =
                (self.biases[l].as_mut(), self.m[l].as_mut(), self.v[l].as_mut(), grads[l].as_ref())
            else {
                continue;
            };
            for i in 0..b.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                b[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            }
        }
    }
}

/// Loss of the model with the state's biases on `batch`.
pub fn state_loss(qmodel: &QuantizedModel, state: &TrainState, batch: &Tensor, teacher: &Tensor) -> Result<f64> {
    let exec = qmodel.exec_graph_with_biases(&state.biases);
    let out = forward_quant_with(qmodel, &exec, batch, false, None)?;
    Ok(distillation_loss(teacher, &out.logits.expect("output evaluated"))?.0)
}

/// One Adam update on a minibatch; returns the loss before the update.
pub fn bft_step(
    qmodel: &QuantizedModel,
    state: &mut TrainState,
    minibatch: &Tensor,
    teacher: &Tensor,
    lr: f64,
    cfg: &BftConfig,
) -> Result<f64> {
    let exec = qmodel.exec_graph_with_biases(&state.biases);
    let out = forward_quant_with(qmodel, &exec, minibatch, true, None)?;
    let (loss, grad) = distillation_loss(teacher, &out.logits.expect("output evaluated"))?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss diverged at step {}", state.step + 1)));
    }
    let q = qmodel.quantizer();
    let grads = backward_bias_grads_with(&exec, out.trace.as_ref().expect("captured"), &grad, Some(&q))?;
    state.adam(&grads, lr, cfg);
    state.loss_history.push(loss);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BftReport {
    /// Minibatch loss of every step.
    pub step_losses: Vec<f64>,
    /// Full tuning-set loss before training and after each phase.
    pub boundary_losses: Vec<f64>,
    /// Full tuning-set loss after rounding biases onto their grids.
    pub final_loss: f64,
    /// Bias entries clipped at the edge of their grid by the final rounding.
    pub saturated: usize,
}

pub fn bft_run(fp_graph: &Graph, qmodel: &QuantizedModel, tuning: &Tensor, cfg: &BftConfig) -> Result<(QuantizedModel, BftReport)> {
    if qmodel.graph.has_batchnorm() {
        return Err(Error::Invalid("quantized model still carries batch norm".into()));
    }
    if fp_graph.check()? != qmodel.graph.check()? {
        return Err(Error::Invalid("full-precision graph and quantized model differ in topology".into()));
    }
    let n = tuning.batch();
    if n == 0 {
        return Err(Error::Invalid("empty tuning set".into()));
    }
    if cfg.minibatch == 0 || cfg.minibatch > n {
        return Err(Error::Invalid(format!("minibatch size {} outside 1..={n}", cfg.minibatch)));
    }
    if cfg.schedule.0.iter().any(|p| p.epochs == 0) {
        return Err(Error::Invalid("every schedule phase needs at least one mini-epoch".into()));
    }
    let (teacher, _) = forward(fp_graph, tuning, false)?;
    let mut state = TrainState::new(qmodel);
    let initial = state_loss(qmodel, &state, tuning, &teacher)?;
    if cfg.schedule.total_epochs() == 0 {
        let report = BftReport {
            step_losses: vec![],
            boundary_losses: vec![initial],
            final_loss: initial,
            saturated: 0,
        };
        return Ok((qmodel.clone(), report));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut boundary = vec![initial];
    let mut order: Vec<usize> = (0..n).collect();
    for phase in &cfg.schedule.0 {
        for _ in 0..phase.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.minibatch) {
                let mut idx = chunk.to_vec();
                idx.sort_unstable();
                bft_step(qmodel, &mut state, &tuning.select(&idx), &teacher.select(&idx), phase.lr, cfg)?;
            }
        }
        boundary.push(state_loss(qmodel, &state, tuning, &teacher)?);
    }

    let mut tuned = qmodel.clone();
    let mut saturated = 0;
    for (layer, b) in tuned.layers.iter_mut().zip(&state.biases) {
        if let (Some(qb), Some(b)) = (layer.bias.as_mut(), b) {
            saturated += qb.set(b, true);
        }
    }
    let final_loss = state_loss(&tuned, &TrainState::new(&tuned), tuning, &teacher)?;
    let report = BftReport {
        step_losses: state.loss_history,
        boundary_losses: boundary,
        final_loss,
        saturated,
    };
    Ok((tuned, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let t = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let s = Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let (loss, g) = distillation_loss(&t, &s).unwrap();
        assert!((loss - 0.836988).abs() < 1e-6);
        assert!((g.data()[0] + 0.25).abs() < 1e-12);
        assert!((g.data()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 0.1]).unwrap();
        let s = Tensor::new(vec![2, 3], vec![0.3, 0.2, -1.0, 1.0, 1.0, 1.0]).unwrap();
        let (_, g) = distillation_loss(&t, &s).unwrap();
        for i in 0..2 {
            assert!(g.sample(i).iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_round_trip() {
        let s: Schedule = "1e-3x16, 1e-4x8".parse().unwrap();
        assert_eq!(s.0, vec![Phase { lr: 1e-3, epochs: 16 }, Phase { lr: 1e-4, epochs: 8 }]);
        assert_eq!(s.to_string().parse::<Schedule>().unwrap(), s);
        assert!("1e-3".parse::<Schedule>().is_err());
        assert!("-1x2".parse::<Schedule>().is_err());
        assert_eq!("".parse::<Schedule>().unwrap().total_epochs(), 0);
    }
}
