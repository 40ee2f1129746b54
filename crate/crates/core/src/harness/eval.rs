//! Length-generalization evaluation of sorting solvers and accuracy of
//! arithmetic engines.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{nee_run_batch, seq2seq_decode_batch, MaskVector, Model, ModelMode};
use crate::numeral::Token;
use crate::traces::{sample_with, with_end, ArithOp, ArithPair, DistributionSpec, Task};

use super::compose::{compose_merge_sort, AddEngine, StepEngine};
use super::HarnessError;

/// One solved input: `None` when the solver did not terminate, plus the
/// attention row behind every emitted token (empty when not exposed).
#[derive(Clone, Debug, PartialEq)]
pub struct Solved {
    pub output: Option<Vec<Token>>,
    pub attention: Vec<Vec<f64>>,
}

/// Something that sorts batches of sequences.
pub trait Solver {
    fn solve_batch(&self, inputs: &[Vec<u64>]) -> Result<Vec<Solved>, HarnessError>;
}

/// Engines run selection sort; baselines decode greedily.
impl Solver for Model {
    fn solve_batch(&self, inputs: &[Vec<u64>]) -> Result<Vec<Solved>, HarnessError> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(128) {
            match self.config.mode {
                ModelMode::Nee => {
                    let items: Vec<(Vec<Token>, MaskVector)> = chunk
                        .iter()
                        .map(|s| (with_end(s), MaskVector::considering_all(s.len() + 1)))
                        .collect();
                    for r in nee_run_batch(self, &items)? {
                        out.push(match r {
                            Ok(r) => Solved {
                                output: Some(r.values),
                                attention: r.steps.into_iter().map(|s| s.pointer_weights).collect(),
                            },
                            Err(_) => Solved { output: None, attention: Vec::new() },
                        });
                    }
                }
                ModelMode::Seq2seq => {
                    let inputs: Vec<Vec<Token>> = chunk.iter().map(|s| with_end(s)).collect();
                    for d in seq2seq_decode_batch(self, &inputs)? {
                        out.push(Solved { output: d.terminated.then_some(d.output), attention: d.attention });
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Merge sort with every merge done by the wrapped engine.
pub struct MergeSorter<'a>(pub &'a dyn StepEngine);

impl Solver for MergeSorter<'_> {
    fn solve_batch(&self, inputs: &[Vec<u64>]) -> Result<Vec<Solved>, HarnessError> {
        inputs
            .iter()
            .map(|s| match compose_merge_sort(self.0, s) {
                Ok(v) => Ok(Solved { output: Some(v.into_iter().map(Token::Num).collect()), attention: Vec::new() }),
                Err(HarnessError::Budget { .. } | HarnessError::Subroutine(_)) => {
                    Ok(Solved { output: None, attention: Vec::new() })
                }
                Err(HarnessError::Model(crate::model::ModelError::EmptyMask)) => {
                    Ok(Solved { output: None, attention: Vec::new() })
                }
                Err(e) => Err(e),
            })
            .collect()
    }
}

/// Reference sort.
pub struct ExactSort;

impl Solver for ExactSort {
    fn solve_batch(&self, inputs: &[Vec<u64>]) -> Result<Vec<Solved>, HarnessError> {
        Ok(inputs
            .iter()
            .map(|s| {
                let mut v = s.clone();
                v.sort_unstable();
                Solved { output: Some(v.into_iter().map(Token::Num).collect()), attention: Vec::new() }
            })
            .collect())
    }
}

/// Content and position both equal.
pub fn exact_match(output: &[Token], target: &[Token]) -> bool {
    output == target
}

/// Fraction of target positions the output reproduces.
pub fn elementwise_accuracy(output: &[Token], target: &[Token]) -> f64 {
    if target.is_empty() {
        return if output.is_empty() { 1.0 } else { 0.0 };
    }
    output.iter().zip(target).filter(|(a, b)| a == b).count() as f64 / target.len() as f64
}

/// Mean of the largest weight in each row, by step index, over all
/// inputs that reached that step.
pub fn sharpness_of(rows: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let steps = rows.iter().map(Vec::len).max().unwrap_or(0);
    (0..steps)
        .map(|k| {
            let maxima: Vec<f64> = rows
                .iter()
                .filter_map(|r| r.get(k))
                .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            maxima.iter().sum::<f64>() / maxima.len() as f64
        })
        .collect()
}

/// Per-step mean max-attention of a solver over `inputs`.
pub fn attention_sharpness(solver: &dyn Solver, inputs: &[Vec<u64>]) -> Result<Vec<f64>, HarnessError> {
    let mut by_len: BTreeMap<usize, Vec<Vec<u64>>> = BTreeMap::new();
    for s in inputs {
        by_len.entry(s.len()).or_default().push(s.clone());
    }
    let mut rows = Vec::new();
    for group in by_len.values() {
        rows.extend(solver.solve_batch(group)?.into_iter().map(|s| s.attention));
    }
    Ok(sharpness_of(&rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthResult {
    pub length: usize,
    pub samples: usize,
    pub exact_match: f64,
    pub elementwise: f64,
    /// Inputs whose rollout never emitted the end token.
    pub unterminated: usize,
    /// Mean max-attention per decode step (empty when not exposed).
    pub sharpness: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub solver: String,
    pub seed: u64,
    pub lengths: Vec<LengthResult>,
    pub runtime_secs: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per length, accuracies in percent.
    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} ({}) | exact match % | elementwise % | unterminated |\n", self.task.name(), self.solver);
        s.push_str("|---:|---:|---:|---:|\n");
        for r in &self.lengths {
            s.push_str(&format!(
                "| {} | {:.2} | {:.2} | {} |\n",
                r.length,
                100.0 * r.exact_match,
                100.0 * r.elementwise,
                r.unterminated
            ));
        }
        s
    }

    pub fn at(&self, length: usize) -> Option<&LengthResult> {
        self.lengths.iter().find(|r| r.length == length)
    }
}

/// Test inputs for one length, deterministic in `(seed, length)`.
pub fn test_inputs(dist: &DistributionSpec, length: usize, n: usize, seed: u64) -> Vec<Vec<u64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (length as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    (0..n).map(|_| sample_with(dist, 8, length, &mut rng).0).collect()
}

/// Sorting accuracy at each length on a given input distribution.
pub fn evaluate_on(
    solver: &dyn Solver,
    name: &str,
    task: Task,
    dist: &DistributionSpec,
    lengths: &[usize],
    n_per_length: usize,
    seed: u64,
) -> Result<EvalReport, HarnessError> {
    let start = Instant::now();
    let mut results = Vec::with_capacity(lengths.len());
    for &length in lengths {
        let inputs = test_inputs(dist, length, n_per_length, seed);
        let solved = solver.solve_batch(&inputs)?;
        let (mut exact, mut elem, mut unterminated) = (0usize, 0.0, 0usize);
        for (input, s) in inputs.iter().zip(&solved) {
            let mut want = input.clone();
            want.sort_unstable();
            let want: Vec<Token> = want.into_iter().map(Token::Num).collect();
            match &s.output {
                Some(out) => {
                    exact += usize::from(exact_match(out, &want));
                    elem += elementwise_accuracy(out, &want);
                }
                None => unterminated += 1,
            }
        }
        let n = inputs.len().max(1) as f64;
        let rows: Vec<Vec<Vec<f64>>> = solved.into_iter().map(|s| s.attention).collect();
        results.push(LengthResult {
            length,
            samples: inputs.len(),
            exact_match: exact as f64 / n,
            elementwise: elem / n,
            unterminated,
            sharpness: sharpness_of(&rows),
        });
    }
    Ok(EvalReport {
        task,
        solver: name.to_string(),
        seed,
        lengths: results,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Sorting accuracy at each length on the 60/40 random/close test mix.
pub fn evaluate_generalization(
    solver: &dyn Solver,
    name: &str,
    task: Task,
    lengths: &[usize],
    n_per_length: usize,
    seed: u64,
) -> Result<EvalReport, HarnessError> {
    evaluate_on(solver, name, task, &DistributionSpec::test(), lengths, n_per_length, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArithmeticReport {
    pub op: ArithOp,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Up to ten wrong answers `(a, b, expected, got)`.
    pub failures: Vec<(Token, Token, Token, Token)>,
}

impl ArithmeticReport {
    pub fn to_markdown(&self) -> String {
        format!(
            "| op | pairs | correct | accuracy % |\n|---|---:|---:|---:|\n| {:?} | {} | {} | {:.2} |\n",
            self.op,
            self.total,
            self.correct,
            100.0 * self.accuracy
        )
    }
}

/// Fraction of pairs the engine answers exactly.
pub fn evaluate_arithmetic(engine: &dyn AddEngine, op: ArithOp, pairs: &[ArithPair]) -> Result<ArithmeticReport, HarnessError> {
    let mut correct = 0;
    let mut failures = Vec::new();
    for chunk in pairs.chunks(512) {
        let got = engine.add_batch(&chunk.iter().map(|p| (p.a, p.b)).collect::<Vec<_>>())?;
        for (p, g) in chunk.iter().zip(got) {
            if g == p.target {
                correct += 1;
            } else if failures.len() < 10 {
                failures.push((p.a, p.b, p.target, g));
            }
        }
    }
    Ok(ArithmeticReport {
        op,
        total: pairs.len(),
        correct,
        accuracy: if pairs.is_empty() { 0.0 } else { correct as f64 / pairs.len() as f64 },
        failures,
    })
}

/// Checks `0 + x = x` and `e + x = e` (both operand orders) for every
/// `x` of the width; returns the failing pairs.
pub fn addition_identity_failures(engine: &dyn AddEngine, width: u32) -> Result<Vec<(Token, Token)>, HarnessError> {
    let mut pairs = Vec::new();
    for x in (0..1u64 << width).map(Token::Num).chain([Token::End]) {
        for p in [(Token::Num(0), x), (x, Token::Num(0)), (Token::End, x), (x, Token::End)] {
            pairs.push(p);
        }
    }
    let got = engine.add_batch(&pairs)?;
    Ok(pairs
        .into_iter()
        .zip(got)
        .filter(|&((a, b), g)| {
            let want = if a.is_end() || b.is_end() { Token::End } else if a == Token::Num(0) { b } else { a };
            g != want
        })
        .map(|(p, _)| p)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::compose::{ExactAdd, ExactMin, ExactUpdate};

    #[test]
    fn perfect_predictor_scores_one_everywhere() {
        let r = evaluate_generalization(&ExactSort, "exact", Task::SelectionSort, &[25, 50, 75, 100], 20, 3).unwrap();
        assert!(r.lengths.iter().all(|l| l.exact_match == 1.0 && l.elementwise == 1.0));
        let r = evaluate_generalization(&MergeSorter(&ExactMin(ExactUpdate::Merge)), "merge", Task::Merge, &[9, 30], 20, 3)
            .unwrap();
        assert!(r.lengths.iter().all(|l| l.exact_match == 1.0));
    }

    #[test]
    fn corrupting_an_element_never_raises_accuracy() {
        let target: Vec<Token> = (0..6).map(Token::Num).collect();
        let mut out = target.clone();
        assert!(exact_match(&out, &target));
        out[3] = Token::Num(99);
        assert!(!exact_match(&out, &target));
        assert!((elementwise_accuracy(&out, &target) - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn sharpness_of_one_hot_and_uniform_rows() {
        let one_hot = vec![vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]];
        assert_eq!(sharpness_of(&one_hot), vec![1.0, 1.0]);
        let uniform = vec![vec![vec![0.25; 4]; 3]];
        assert_eq!(sharpness_of(&uniform), vec![0.25; 3]);
    }

    #[test]
    fn exact_adder_passes_identities() {
        assert!(addition_identity_failures(&ExactAdd(8), 8).unwrap().is_empty());
    }

    #[test]
    fn markdown_has_a_row_per_length() {
        let r = evaluate_generalization(&ExactSort, "exact", Task::SelectionSort, &[2, 3], 4, 0).unwrap();
        assert_eq!(r.to_markdown().lines().count(), 4);
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
