//! CTC forward/backward recursion in log space.

use crate::tensor::{Mat, Scalar};

pub struct CtcOutput<T> {
    /// `-log p(target | log_probs)`; `+inf` when no alignment exists.
    pub loss: T,
    /// d loss / d log_probs, absent for unreachable targets.
    pub grad: Option<Mat<T>>,
}

#[inline]
pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Minimum number of frames needed to emit `target` (repeats need a blank in between).
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Runs the alpha/beta recursions over the blank-interleaved label sequence.
/// Accumulation happens in `f64` whatever `T` is.
pub fn forward_backward<T: Scalar>(log_probs: &Mat<T>, target: &[usize], blank: usize) -> CtcOutput<T> {
    let (frames, vocab) = log_probs.shape();
    let unreachable = CtcOutput {
        loss: T::infinity(),
        grad: None,
    };
    if frames == 0 || frames < min_frames(target) {
        return unreachable;
    }
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&l| [l, blank]))
        .collect();
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs.get(t, k).to_f64_lossy();
    let ninf = f64::NEG_INFINITY;
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, ext[s]) };
        }
    }
    let last = (frames - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p == ninf {
        return unreachable;
    }

    // beta excludes the emission at frame t
    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s] + lp(t + 1, ext[s]);
            if s + 1 < s_len {
                b = log_add(b, beta[next + s + 1] + lp(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, beta[next + s + 2] + lp(t + 1, ext[s + 2]));
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut grad = Mat::zeros(frames, vocab);
    for t in 0..frames {
        let mut occ = vec![0.0f64; vocab];
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if v > ninf {
                occ[ext[s]] += v.exp();
            }
        }
        for (k, o) in occ.into_iter().enumerate() {
            if o != 0.0 {
                grad.set(t, k, T::lit(-o));
            }
        }
    }
    CtcOutput {
        loss: T::lit(-log_p),
        grad: Some(grad),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn occupancy_rows_sum_to_minus_one() {
        let lp = Mat::<f64>::from_fn(5, 3, |t, k| [0.2f64, 0.5, 0.3][(t + k) % 3].ln());
        let out = forward_backward(&lp, &[1, 2], 0);
        let g = out.grad.unwrap();
        for t in 0..5 {
            let s: f64 = g.row(t).iter().sum();
            assert!((s + 1.0).abs() < 1e-12, "frame {t}: {s}");
        }
    }

    #[test]
    fn min_frames_counts_repeats() {
        assert_eq!(min_frames(&[1, 1, 2]), 4);
        assert_eq!(min_frames(&[]), 0);
    }
}
