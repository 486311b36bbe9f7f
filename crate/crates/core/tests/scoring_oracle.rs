//! Edit distance against a top-down recursion over every pair of short sequences.

use proptest::prelude::*;

use tapasr::scoring::{edit_distance, score_corpus, ScoredPair, Unit};

fn recursive(a: &[u8], b: &[u8], memo: &mut [[Option<usize>; 7]; 7]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    if let Some(d) = memo[a.len()][b.len()] {
        return d;
    }
    let sub = recursive(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
    let del = recursive(&a[1..], b, memo) + 1;
    let ins = recursive(a, &b[1..], memo) + 1;
    let d = sub.min(del).min(ins);
    memo[a.len()][b.len()] = Some(d);
    d
}

fn sequences(alphabet: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut start = 0;
    for _ in 0..max_len {
        let end = out.len();
        for i in start..end {
            for c in 0..alphabet {
                let mut s = out[i].clone();
                s.push(c);
                out.push(s);
            }
        }
        start = end;
    }
    out
}

/// Sequences whose symbols first appear in order 0, 1, 2, ... (one per relabelling class).
fn canonical(s: &[u8]) -> bool {
    let mut next = 0;
    for &c in s {
        if c > next {
            return false;
        }
        if c == next {
            next += 1;
        }
    }
    true
}

#[test]
fn dp_matches_recursion_on_all_pairs_up_to_length_six() {
    // distance is invariant under relabelling both sides, so fixing the
    // reference to a canonical labelling still covers every pair
    let all = sequences(4, 6);
    let refs: Vec<_> = all.iter().filter(|s| canonical(s)).collect();
    let mut pairs = 0usize;
    for r in &refs {
        for h in &all {
            let c = edit_distance(r, h);
            let d = recursive(r, h, &mut [[None; 7]; 7]);
            assert_eq!(c.total(), d, "{r:?} vs {h:?}");
            // the counted alignment is consistent with both lengths
            let matches = r.len() - c.substitutions - c.deletions;
            assert_eq!(h.len(), matches + c.substitutions + c.insertions);
            pairs += 1;
        }
    }
    assert!(pairs > 1_000_000);
}

#[test]
fn corpus_rate_pools_counts() {
    let pairs = [
        ScoredPair {
            utt_id: "a",
            reference: "the cat sat",
            hypothesis: "the cat",
        },
        ScoredPair {
            utt_id: "b",
            reference: "on the mat",
            hypothesis: "on a mat",
        },
    ];
    let r = score_corpus(pairs, Unit::Word).unwrap();
    assert_eq!((r.substitutions, r.deletions, r.insertions, r.ref_tokens), (1, 1, 0, 6));
    assert!((r.wer - 100.0 * 2.0 / 6.0).abs() < 1e-9);
}

proptest! {
    #[test]
    fn symmetric_and_triangle(a in prop::collection::vec(0u8..4, 0..8), b in prop::collection::vec(0u8..4, 0..8), c in prop::collection::vec(0u8..4, 0..8)) {
        let ab = edit_distance(&a, &b).total();
        prop_assert_eq!(ab, edit_distance(&b, &a).total());
        prop_assert!(edit_distance(&a, &c).total() <= ab + edit_distance(&b, &c).total());
        prop_assert_eq!(edit_distance(&a, &a).total(), 0);
    }
}
