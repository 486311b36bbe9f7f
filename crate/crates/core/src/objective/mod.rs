//! Joint CTC/attention objective and decoding without any external language model.

pub mod beam;
pub mod ctc;

use serde::{Deserialize, Serialize};

use crate::autograd::log_softmax_rows;
use crate::error::{Error, Result};
use crate::tensor::{Mat, Scalar};

pub use beam::{beam_search, joint_beam_decode, BeamOptions};

pub const BLANK: usize = 0;

/// A decoded token sequence (no blanks, no start/end symbols) and its log score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtcLoss {
    pub value: f64,
    pub reachable: bool,
}

fn check_log_normalized<T: Scalar>(log_probs: &Mat<T>) -> Result<()> {
    for t in 0..log_probs.rows() {
        let p: f64 = log_probs.row(t).iter().map(|x| x.to_f64_lossy().exp()).sum();
        if (p - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(format!("log_probs row {t} sums to {p} in probability")));
        }
    }
    Ok(())
}

/// CTC negative log-likelihood with blank at index 0.
///
/// An unreachable target (too long for the number of frames) is reported as
/// `+inf` with `reachable = false` rather than as an error.
pub fn ctc_loss<T: Scalar>(log_probs: &Mat<T>, target: &[usize]) -> Result<CtcLoss> {
    check_log_normalized(log_probs)?;
    if let Some(&bad) = target.iter().find(|&&t| t == BLANK || t >= log_probs.cols()) {
        return Err(Error::invalid(format!("target id {bad} is blank or outside the vocabulary")));
    }
    let out = ctc::forward_backward(log_probs, target, BLANK);
    let value = out.loss.to_f64_lossy();
    Ok(CtcLoss {
        value,
        reachable: value.is_finite(),
    })
}

/// Mean teacher-forced cross-entropy of `targets` under `logits` (one row per position).
pub fn attention_ce_loss<T: Scalar>(logits: &Mat<T>, targets: &[usize], smoothing: f64) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::invalid(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::invalid("empty target sequence"));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::invalid(format!("target id {bad} outside the vocabulary")));
    }
    let lp = log_softmax_rows(logits);
    let v = lp.cols() as f64;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let mut l = -(1.0 - smoothing) * lp.get(r, y).to_f64_lossy();
            if smoothing > 0.0 {
                l -= smoothing / v * lp.row(r).iter().map(|x| x.to_f64_lossy()).sum::<f64>();
            }
            l
        })
        .sum();
    Ok(total / targets.len() as f64)
}

/// `weight * ctc + (1 - weight) * att`.
pub fn joint_loss(ctc: f64, att: f64, weight: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::invalid(format!("CTC weight {weight} outside [0, 1]")));
    }
    Ok(weight * ctc + (1.0 - weight) * att)
}

/// Best-path decoding: per-frame argmax, collapse repeats, drop blanks.
pub fn greedy_ctc_decode<T: Scalar>(log_probs: &Mat<T>) -> Hypothesis {
    let mut tokens = Vec::new();
    let mut score = 0.0;
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let k = log_probs.argmax_row(t);
        score += log_probs.get(t, k).to_f64_lossy();
        if k != BLANK && prev != Some(k) {
            tokens.push(k);
        }
        prev = Some(k);
    }
    Hypothesis { tokens, score }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(frames: usize, vocab: usize) -> Mat<f64> {
        Mat::filled(frames, vocab, (1.0 / vocab as f64).ln())
    }

    #[test]
    fn ctc_single_frame_single_path() {
        let l = ctc_loss(&uniform(1, 2), &[1]).unwrap();
        assert!((l.value - 0.5f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn ctc_unreachable_is_infinite_not_error() {
        let l = ctc_loss(&uniform(2, 3), &[1, 2, 1]).unwrap();
        assert!(!l.reachable);
        assert_eq!(l.value, f64::INFINITY);
        let rep = ctc_loss(&uniform(2, 3), &[1, 1]).unwrap();
        assert!(!rep.reachable);
    }

    #[test]
    fn ctc_rejects_unnormalized_rows() {
        assert!(ctc_loss(&Mat::<f64>::filled(2, 2, 0.0), &[1]).is_err());
    }

    #[test]
    fn ce_edge_cases() {
        let mut onehot = Mat::<f64>::filled(3, 4, -1e9);
        for (r, y) in [2usize, 0, 3].iter().enumerate() {
            onehot.set(r, *y, 0.0);
        }
        assert!(attention_ce_loss(&onehot, &[2, 0, 3], 0.0).unwrap().abs() < 1e-12);
        let flat = Mat::<f64>::zeros(2, 7);
        assert!((attention_ce_loss(&flat, &[1, 5], 0.0).unwrap() - 7f64.ln()).abs() < 1e-12);
        assert!(attention_ce_loss(&flat, &[1], 0.0).is_err());
    }

    #[test]
    fn joint_loss_affine() {
        assert!((joint_loss(1.0, 0.0, 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(joint_loss(2.5, 7.0, 1.0).unwrap(), 2.5);
        assert_eq!(joint_loss(2.5, 7.0, 0.0).unwrap(), 7.0);
        assert!(joint_loss(1.0, 1.0, 1.2).is_err());
        assert!(joint_loss(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn greedy_collapse_rules() {
        let mk = |ids: &[usize]| {
            Mat::<f64>::from_fn(ids.len(), 3, |t, k| if k == ids[t] { 0.9f64.ln() } else { 0.05f64.ln() })
        };
        assert_eq!(greedy_ctc_decode(&mk(&[1, 1, 0, 2])).tokens, vec![1, 2]);
        assert!(greedy_ctc_decode(&mk(&[0, 0, 0])).tokens.is_empty());
        assert_eq!(greedy_ctc_decode(&mk(&[1, 0, 1])).tokens, vec![1, 1]);
    }
}
