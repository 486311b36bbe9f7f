//! Levenshtein alignment counts and corpus-pooled error rates.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::normalize_text;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Minimal-cost alignment of `hyp` against `ref_`. Among equal-cost
/// backtraces, a substitution (or match) is taken before a deletion, and a
/// deletion before an insertion.
pub fn edit_distance<S: PartialEq>(ref_: &[S], hyp: &[S]) -> EditCounts {
    let (n, m) = (ref_.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(ref_[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut c = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 && here == d[(i - 1) * w + j - 1] + usize::from(ref_[i - 1] != hyp[j - 1]) {
            if ref_[i - 1] != hyp[j - 1] {
                c.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && here == d[(i - 1) * w + j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Word,
    Char,
}

impl Unit {
    /// Splits normalized text into scoring units; character units ignore spaces.
    pub fn tokens(self, text: &str) -> Vec<String> {
        let norm = normalize_text(text);
        match self {
            Unit::Word => norm.split(' ').filter(|s| !s.is_empty()).map(str::to_string).collect(),
            Unit::Char => norm.chars().filter(|c| *c != ' ').map(String::from).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttScore {
    pub utt_id: String,
    pub ref_len: usize,
    pub counts: EditCounts,
}

impl UttScore {
    pub fn wer(&self) -> f64 {
        rate(self.counts.total(), self.ref_len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub unit: Unit,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_tokens: usize,
    /// Pooled error rate in percent (WER or CER depending on `unit`).
    pub wer: f64,
    pub per_utterance: Vec<UttScore>,
}

fn rate(errors: usize, ref_len: usize) -> f64 {
    match (errors, ref_len) {
        (0, _) => 0.0,
        (_, 0) => f64::INFINITY,
        (e, r) => 100.0 * e as f64 / r as f64,
    }
}

pub struct ScoredPair<'a> {
    pub utt_id: &'a str,
    pub reference: &'a str,
    pub hypothesis: &'a str,
}

/// Pools edit counts over the corpus; the rate is total errors over total reference units.
pub fn score_corpus<'a>(pairs: impl IntoIterator<Item = ScoredPair<'a>>, unit: Unit) -> Result<ScoreReport> {
    let mut seen = HashSet::new();
    let mut per_utterance = Vec::new();
    for p in pairs {
        if !seen.insert(p.utt_id) {
            return Err(Error::invalid(format!("duplicate utterance id {}", p.utt_id)));
        }
        let r = unit.tokens(p.reference);
        let h = unit.tokens(p.hypothesis);
        per_utterance.push(UttScore {
            utt_id: p.utt_id.to_string(),
            ref_len: r.len(),
            counts: edit_distance(&r, &h),
        });
    }
    let sum = |f: fn(&UttScore) -> usize| per_utterance.iter().map(f).sum::<usize>();
    let substitutions = sum(|u| u.counts.substitutions);
    let deletions = sum(|u| u.counts.deletions);
    let insertions = sum(|u| u.counts.insertions);
    let ref_tokens = sum(|u| u.ref_len);
    Ok(ScoreReport {
        unit,
        substitutions,
        deletions,
        insertions,
        ref_tokens,
        wer: rate(substitutions + deletions + insertions, ref_tokens),
        per_utterance,
    })
}

impl ScoreReport {
    /// `utt_id,ref_len,S,D,I,wer` per utterance, then a `TOTAL` row of pooled counts.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("utt_id,ref_len,S,D,I,wer\n");
        for u in &self.per_utterance {
            let c = u.counts;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.4}",
                u.utt_id, u.ref_len, c.substitutions, c.deletions, c.insertions,
                u.wer()
            );
        }
        let _ = writeln!(
            s,
            "TOTAL,{},{},{},{},{:.4}",
            self.ref_tokens, self.substitutions, self.deletions, self.insertions, self.wer
        );
        s
    }
}
