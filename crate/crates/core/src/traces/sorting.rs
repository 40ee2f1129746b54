//! Selection-sort and merge traces, and the exact interpreters that replay
//! them.

use crate::model::MaskVector;
use crate::numeral::Token;

use super::{TraceError, TraceStep};

/// Smallest considered token and its position; ties go to the lowest index.
pub fn masked_min(tokens: &[Token], mask: &MaskVector) -> Option<(Token, usize)> {
    let mut best: Option<(Token, usize)> = None;
    for i in mask.considered() {
        if best.is_none_or(|(b, _)| tokens[i] < b) {
            best = Some((tokens[i], i));
        }
    }
    best
}

pub fn with_end(seq: &[u64]) -> Vec<Token> {
    seq.iter().map(|&v| Token::Num(v)).chain([Token::End]).collect()
}

/// Selection-sort rule: the chosen position becomes ignored.
pub fn selection_update(mask: &MaskVector, pointer: usize) -> MaskVector {
    let mut next = mask.clone();
    next.ignore(pointer);
    next
}

/// Merge rule: the chosen position becomes ignored and its successor
/// becomes the front of that run.
pub fn merge_update(mask: &MaskVector, pointer: usize) -> MaskVector {
    let mut next = mask.clone();
    next.ignore(pointer);
    if pointer + 1 < next.len() {
        next.consider(pointer + 1);
    }
    next
}

/// One trace step per emitted value, then a terminal step emitting `e`.
pub fn gen_selection_sort_trace(seq: &[u64]) -> Vec<TraceStep> {
    let tokens = with_end(seq);
    let mut mask = MaskVector::considering_all(tokens.len());
    let mut steps = Vec::with_capacity(tokens.len());
    loop {
        let (target, pointer) = masked_min(&tokens, &mask).expect("end token is never ignored");
        if target.is_end() {
            steps.push(TraceStep::terminal(tokens.clone(), mask, pointer));
            return steps;
        }
        let next = selection_update(&mask, pointer);
        steps.push(TraceStep {
            tokens: tokens.clone(),
            mask,
            target,
            pointer: Some(pointer),
            next_mask: Some(next.clone()),
        });
        mask = next;
    }
}

/// `[seq1, e, seq2, e]` with only the front of each run considered.
pub fn merge_layout(first: &[u64], second: &[u64]) -> (Vec<Token>, MaskVector) {
    let mut tokens = with_end(first);
    tokens.extend(with_end(second));
    let mut flags = vec![true; tokens.len()];
    flags[0] = false;
    flags[first.len() + 1] = false;
    (tokens, MaskVector::from_flags(flags))
}

pub fn gen_merge_trace(first: &[u64], second: &[u64]) -> Result<Vec<TraceStep>, TraceError> {
    for run in [first, second] {
        if run.windows(2).any(|w| w[0] > w[1]) {
            return Err(TraceError::Unsorted);
        }
    }
    let (tokens, mut mask) = merge_layout(first, second);
    let mut steps = Vec::with_capacity(tokens.len());
    loop {
        let (target, pointer) = masked_min(&tokens, &mask).expect("two fronts are always considered");
        if target.is_end() {
            steps.push(TraceStep::terminal(tokens.clone(), mask, pointer));
            return Ok(steps);
        }
        let next = merge_update(&mask, pointer);
        steps.push(TraceStep {
            tokens: tokens.clone(),
            mask,
            target,
            pointer: Some(pointer),
            next_mask: Some(next.clone()),
        });
        mask = next;
    }
}

/// Replays a trace: checks that each step's target sits at its pointer,
/// that the pointer is considered, that `rule` turns each mask into the
/// next step's mask, and that the trace ends on `e`. Returns the emitted
/// values.
pub fn replay(
    steps: &[TraceStep],
    rule: fn(&MaskVector, usize) -> MaskVector,
) -> Result<Vec<Token>, TraceError> {
    let mut out = Vec::new();
    let Some(first) = steps.first() else {
        return Err(TraceError::Inconsistent("empty trace".into()));
    };
    let mut mask = first.mask.clone();
    for (k, step) in steps.iter().enumerate() {
        if step.mask != mask || step.tokens != first.tokens {
            return Err(TraceError::Inconsistent(format!("step {k} does not continue the trace")));
        }
        let p = step.pointer.ok_or_else(|| TraceError::Inconsistent(format!("step {k} lacks a pointer")))?;
        if p >= step.tokens.len() || mask.is_ignored(p) || step.tokens[p] != step.target {
            return Err(TraceError::Inconsistent(format!("step {k} points at {p} illegally")));
        }
        if step.target.is_end() {
            if k + 1 != steps.len() {
                return Err(TraceError::Inconsistent("end emitted before the last step".into()));
            }
            return Ok(out);
        }
        let next = rule(&mask, p);
        if step.next_mask.as_ref() != Some(&next) {
            return Err(TraceError::Inconsistent(format!("step {k} next mask breaks the update rule")));
        }
        out.push(step.target);
        mask = next;
    }
    Err(TraceError::Inconsistent("trace never emits e".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traces::{sample_with, DistributionSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(s: &str) -> MaskVector {
        s.parse().unwrap()
    }

    #[test]
    fn selection_trace_hand_example() {
        let steps = gen_selection_sort_trace(&[5, 2, 7]);
        let expected = [
            ("0000", Token::Num(2), 1, Some("0100")),
            ("0100", Token::Num(5), 0, Some("1100")),
            ("1100", Token::Num(7), 2, Some("1110")),
            ("1110", Token::End, 3, None),
        ];
        assert_eq!(steps.len(), 4);
        for (s, (mask, val, ptr, next)) in steps.iter().zip(expected) {
            assert_eq!(s.mask, m(mask));
            assert_eq!(s.target, val);
            assert_eq!(s.pointer, Some(ptr));
            assert_eq!(s.next_mask, next.map(m));
        }
    }

    #[test]
    fn singleton_trace() {
        let steps = gen_selection_sort_trace(&[42]);
        assert_eq!(steps.len(), 2);
        assert_eq!(steps[0].target, Token::Num(42));
        assert!(steps[1].target.is_end());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let steps = gen_selection_sort_trace(&[3, 1, 1]);
        assert_eq!(steps[0].pointer, Some(1));
        assert_eq!(steps[1].pointer, Some(2));
    }

    #[test]
    fn merge_initial_mask() {
        let (_, mask) = merge_layout(&[1, 3], &[2, 4]);
        assert_eq!(mask, m("011011"));
    }

    #[test]
    fn merge_hand_example() {
        let steps = gen_merge_trace(&[1, 3], &[2, 4]).unwrap();
        let vals: Vec<Token> = steps.iter().map(|s| s.target).collect();
        assert_eq!(vals, [1, 2, 3, 4].map(Token::Num).into_iter().chain([Token::End]).collect::<Vec<_>>());
        assert_eq!(steps[0].next_mask, Some(m("101011")));
    }

    #[test]
    fn merge_rejects_unsorted() {
        assert!(matches!(gen_merge_trace(&[3, 1], &[2]), Err(TraceError::Unsorted)));
    }

    #[test]
    fn selection_replay_matches_std_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10_000 {
            let len = rng.gen_range(1..=10);
            let (seq, _) = sample_with(&DistributionSpec::test(), 8, len, &mut rng);
            let steps = gen_selection_sort_trace(&seq);
            let out = replay(&steps, selection_update).unwrap();
            let mut sorted = seq.clone();
            sorted.sort();
            assert_eq!(out, sorted.into_iter().map(Token::Num).collect::<Vec<_>>());
            for w in steps.windows(2) {
                if let Some(next) = &w[0].next_mask {
                    assert!(w[0].mask.is_subset_of(next));
                }
            }
        }
    }

    #[test]
    fn merge_replay_matches_two_pointer_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let (mut a, _) = sample_with(&DistributionSpec::test(), 8, rng.gen_range(0..6), &mut rng);
            let (mut b, _) = sample_with(&DistributionSpec::test(), 8, rng.gen_range(0..6), &mut rng);
            a.sort();
            b.sort();
            let out = replay(&gen_merge_trace(&a, &b).unwrap(), merge_update).unwrap();
            let (mut i, mut j, mut merged) = (0, 0, Vec::new());
            while i < a.len() || j < b.len() {
                if j == b.len() || (i < a.len() && a[i] <= b[j]) {
                    merged.push(a[i]);
                    i += 1;
                } else {
                    merged.push(b[j]);
                    j += 1;
                }
            }
            assert_eq!(out, merged.into_iter().map(Token::Num).collect::<Vec<_>>());
        }
    }
}
