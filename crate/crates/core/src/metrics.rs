//! Teacher-student evaluation of a quantized network against its
//! full-precision original.

use serde::{Deserialize, Serialize};

use crate::bft::{log_softmax, softmax};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    /// Mean of −Σ p_teacher · log p_student.
    pub cross_entropy: f64,
    /// Mean entropy of the teacher's softmax; the floor of `cross_entropy`.
    pub teacher_entropy: f64,
    /// `cross_entropy − teacher_entropy`, i.e. the mean KL divergence.
    pub excess_cross_entropy: f64,
    /// Fraction of images where student and teacher agree on the top class.
    pub agreement: f64,
    pub student_top1: Option<f64>,
    pub teacher_top1: Option<f64>,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

fn check(teacher: &Tensor, student: &Tensor) -> Result<()> {
    if teacher.shape() != student.shape() || teacher.shape().len() != 2 || teacher.batch() == 0 {
        return Err(Error::Invalid(format!(
            "logit shapes {:?} and {:?} are not equal [N, classes]",
            teacher.shape(),
            student.shape()
        )));
    }
    if !teacher.all_finite() || !student.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(())
}

fn cross_entropy_rows(p_from: &[f64], log_q: &[f64]) -> f64 {
    -p_from.iter().zip(log_q).map(|(p, lq)| if *p == 0.0 { 0.0 } else { p * lq }).sum::<f64>()
}

pub fn evaluate(teacher: &Tensor, student: &Tensor, labels: Option<&[i32]>) -> Result<EvalReport> {
    check(teacher, student)?;
    let n = teacher.batch();
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::Invalid(format!("{} labels for {n} images", l.len())));
        }
    }
    let (mut ce, mut ent, mut agree) = (0.0, 0.0, 0usize);
    let (mut s_hits, mut t_hits) = (0usize, 0usize);
    for i in 0..n {
        let (t, s) = (teacher.sample(i), student.sample(i));
        let pt = softmax(t);
        ce += cross_entropy_rows(&pt, &log_softmax(s));
        ent += cross_entropy_rows(&pt, &log_softmax(t));
        let (ta, sa) = (argmax(t), argmax(s));
        agree += usize::from(ta == sa);
        if let Some(l) = labels {
            t_hits += usize::from(ta as i64 == l[i] as i64);
            s_hits += usize::from(sa as i64 == l[i] as i64);
        }
    }
    let nf = n as f64;
    Ok(EvalReport {
        images: n,
        cross_entropy: ce / nf,
        teacher_entropy: ent / nf,
        excess_cross_entropy: ce / nf - ent / nf,
        agreement: agree as f64 / nf,
        student_top1: labels.map(|_| s_hits as f64 / nf),
        teacher_top1: labels.map(|_| t_hits as f64 / nf),
    })
}

/// Degradation metric used across the toolkit: the excess cross-entropy.
pub fn excess_cross_entropy(teacher: &Tensor, student: &Tensor) -> Result<f64> {
    Ok(evaluate(teacher, student, None)?.excess_cross_entropy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_evaluation() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap();
        let r = evaluate(&t, &t, Some(&[1, 2])).unwrap();
        assert!((r.cross_entropy - r.teacher_entropy).abs() < 1e-15);
        assert_eq!(r.excess_cross_entropy, 0.0);
        assert_eq!(r.student_top1, Some(1.0));
        assert_eq!(r.student_top1, r.teacher_top1);
    }

    #[test]
    fn label_length_mismatch() {
        let t = Tensor::zeros(vec![2, 3]);
        assert!(matches!(evaluate(&t, &t, Some(&[0])), Err(Error::Invalid(_))));
    }
}
