//! Attention beam search with CTC prefix scoring.
//!
//! A hypothesis `g` carries the cumulative decoder log-probability `a(g)` and
//! the CTC prefix state; its score is `(1 - λ)·a(g) + λ·log P_ctc(g...)`.
//! Both terms only decrease as a prefix grows, so once the best finished
//! hypothesis scores at least as well as the best live one the search stops.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::ctc::log_add;
use super::{Hypothesis, BLANK};
use crate::autograd::{log_softmax_rows, Tape};
use crate::data::tokenizer::{EOS, SOS};
use crate::error::{Error, Result};
use crate::nnet::{ctc_log_probs, AsrModel, ForwardCtx};
use crate::tensor::{Mat, Scalar};

const NEG_INF: f64 = f64::NEG_INFINITY;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamOptions {
    pub beam_size: usize,
    /// Weight λ of the CTC prefix score.
    pub ctc_weight: f64,
    /// Output length cap; defaults to the number of encoder frames.
    pub max_len: Option<usize>,
}

impl Default for BeamOptions {
    fn default() -> Self {
        BeamOptions {
            beam_size: 4,
            ctc_weight: 0.3,
            max_len: None,
        }
    }
}

impl BeamOptions {
    pub fn new(beam_size: usize, ctc_weight: f64) -> Self {
        BeamOptions {
            beam_size,
            ctc_weight,
            max_len: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.beam_size < 1 {
            return Err(Error::invalid("beam_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::invalid(format!("ctc_weight {} outside [0, 1]", self.ctc_weight)));
        }
        Ok(())
    }
}

/// Forward variables of one prefix: probability of the prefix ending at frame
/// `t` in a non-blank (`r_n`) or blank (`r_b`) state.
#[derive(Clone, Debug)]
pub struct CtcPrefixState {
    r_n: Vec<f64>,
    r_b: Vec<f64>,
    last: Option<usize>,
}

/// Prefix probabilities `log P(h...)` under a CTC posterior matrix.
pub struct CtcPrefixScorer {
    log_probs: Mat<f64>,
}

impl CtcPrefixScorer {
    pub fn new<T: Scalar>(log_probs: &Mat<T>) -> Self {
        CtcPrefixScorer {
            log_probs: log_probs.cast(),
        }
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn initial(&self) -> CtcPrefixState {
        let mut r_b = Vec::with_capacity(self.frames());
        let mut acc = 0.0;
        for t in 0..self.frames() {
            acc += self.log_probs.get(t, BLANK);
            r_b.push(acc);
        }
        CtcPrefixState {
            r_n: vec![NEG_INF; self.frames()],
            r_b,
            last: None,
        }
    }

    /// Log-probability of all label sequences that equal `g` exactly.
    pub fn final_score(&self, g: &CtcPrefixState) -> f64 {
        match self.frames() {
            0 => NEG_INF,
            t => log_add(g.r_n[t - 1], g.r_b[t - 1]),
        }
    }

    /// Extends `g` by `c`, returning the new state and `log P(g c ...)`.
    pub fn extend(&self, g: &CtcPrefixState, c: usize) -> (CtcPrefixState, f64) {
        let frames = self.frames();
        let x = |t: usize, k: usize| self.log_probs.get(t, k);
        let mut r_n = vec![NEG_INF; frames];
        let mut r_b = vec![NEG_INF; frames];
        if frames == 0 {
            return (CtcPrefixState { r_n, r_b, last: Some(c) }, NEG_INF);
        }
        // paths entering c at frame t must have finished g by frame t - 1
        let phi = |t: usize| {
            if g.last == Some(c) {
                g.r_b[t]
            } else {
                log_add(g.r_b[t], g.r_n[t])
            }
        };
        if g.last.is_none() {
            r_n[0] = x(0, c);
        }
        let mut psi = r_n[0];
        for t in 1..frames {
            let p = phi(t - 1);
            r_n[t] = log_add(r_n[t - 1], p) + x(t, c);
            r_b[t] = log_add(r_b[t - 1], r_n[t - 1]) + x(t, BLANK);
            psi = log_add(psi, p + x(t, c));
        }
        (CtcPrefixState { r_n, r_b, last: Some(c) }, psi)
    }
}

struct Live {
    tokens: Vec<usize>,
    att: f64,
    ctc: Option<CtcPrefixState>,
    score: f64,
}

struct Candidate {
    parent: usize,
    token: usize,
    att: f64,
    ctc: Option<(CtcPrefixState, f64)>,
    score: f64,
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Beam search over a next-token scorer.
///
/// `next_log_probs(prefix)` returns decoder log-probabilities (length `vocab`)
/// for the token following `prefix`, where `prefix` starts with `<sos>`.
/// `ctc` supplies CTC posteriors; it is ignored when `ctc_weight == 0`.
/// Candidates never include blank or `<sos>`.
pub fn beam_search<F>(
    vocab: usize,
    mut next_log_probs: F,
    ctc: Option<&CtcPrefixScorer>,
    opts: &BeamOptions,
) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    opts.validate()?;
    let lambda = opts.ctc_weight;
    let max_len = opts
        .max_len
        .or_else(|| ctc.map(CtcPrefixScorer::frames))
        .ok_or_else(|| Error::invalid("max_len required without CTC posteriors"))?;
    let ctc = if lambda > 0.0 {
        Some(ctc.ok_or_else(|| Error::invalid("ctc_weight > 0 needs CTC posteriors"))?)
    } else {
        None
    };
    let use_att = lambda < 1.0;

    let mut live = vec![Live {
        tokens: vec![SOS],
        att: 0.0,
        ctc: ctc.map(|s| s.initial()),
        score: 0.0,
    }];
    let mut ended: Vec<Hypothesis> = Vec::new();

    for step in 0..=max_len {
        let mut cands = Vec::new();
        for (pi, hyp) in live.iter().enumerate() {
            let att_lp = if use_att {
                let lp = next_log_probs(&hyp.tokens)?;
                if lp.len() != vocab {
                    return Err(Error::invalid(format!("scorer returned {} scores for vocab {vocab}", lp.len())));
                }
                lp
            } else {
                vec![0.0; vocab]
            };
            for c in 0..vocab {
                if c == BLANK || c == SOS {
                    continue;
                }
                // at the cap only <eos> is allowed
                if step == max_len && c != EOS {
                    continue;
                }
                let att = hyp.att + att_lp[c];
                let (ctc_next, ctc_term) = match (ctc, &hyp.ctc) {
                    (Some(s), Some(state)) if c == EOS => (None, s.final_score(state)),
                    (Some(s), Some(state)) => {
                        let (next, psi) = s.extend(state, c);
                        (Some((next, psi)), psi)
                    }
                    _ => (None, 0.0),
                };
                let score = (1.0 - lambda) * att + lambda * ctc_term;
                if score == NEG_INF || score.is_nan() {
                    continue;
                }
                cands.push(Candidate {
                    parent: pi,
                    token: c,
                    att,
                    ctc: ctc_next,
                    score,
                });
            }
        }
        // stable sort keeps (parent, token) order among equal scores
        cands.sort_by(|a, b| by_score_desc(a.score, b.score));
        cands.truncate(opts.beam_size);

        let mut next = Vec::new();
        for c in cands {
            let parent = &live[c.parent];
            if c.token == EOS {
                ended.push(Hypothesis {
                    tokens: parent.tokens[1..].to_vec(),
                    score: c.score,
                });
            } else {
                let mut tokens = parent.tokens.clone();
                tokens.push(c.token);
                next.push(Live {
                    tokens,
                    att: c.att,
                    ctc: c.ctc.map(|(s, _)| s),
                    score: c.score,
                });
            }
        }
        live = next;
        let best_ended = ended.iter().map(|h| h.score).fold(NEG_INF, f64::max);
        let best_live = live.iter().map(|h| h.score).fold(NEG_INF, f64::max);
        if live.is_empty() || (!ended.is_empty() && best_ended >= best_live) {
            break;
        }
    }
    ended.sort_by(|a, b| by_score_desc(a.score, b.score));
    ended
        .into_iter()
        .next()
        .ok_or_else(|| Error::numerical("beam_search", "no hypothesis reached <eos> with finite score"))
}

/// Decodes one utterance with the model's decoder and CTC head (eval mode, no LM).
pub fn joint_beam_decode<T: Scalar, M: AsrModel<T> + ?Sized>(
    model: &M,
    feats: &Mat<T>,
    opts: &BeamOptions,
) -> Result<Hypothesis> {
    opts.validate()?;
    let mut tape = Tape::new(model.params(), false);
    let mut ctx = ForwardCtx::eval();
    let enc = model.encode(&mut tape, feats, &mut ctx)?;
    let lp = ctc_log_probs(model, &mut tape, enc);
    let scorer = CtcPrefixScorer::new(tape.value(lp));
    let memory = tape.value(enc).clone();
    let vocab = model.vocab_size();
    let next = |prefix: &[usize]| -> Result<Vec<f64>> {
        let mut tape = Tape::new(model.params(), false);
        let mut ctx = ForwardCtx::eval();
        let mem = tape.constant(memory.clone());
        let out = model.decoder().forward(&mut tape, mem, prefix, &mut ctx)?;
        let logits = tape.value(out.logits);
        let last = Mat::from_vec(1, logits.cols(), logits.row(logits.rows() - 1).to_vec());
        Ok(log_softmax_rows(&last).row(0).iter().map(|v| v.to_f64_lossy()).collect())
    };
    beam_search(vocab, next, Some(&scorer), opts)
}
