use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::MaskVector;
use crate::numeral::Token;

use super::{TraceError, TraceStep};

/// Training-number counts of the 8-bit addition holdout sweep.
pub const TRAINING_NUMBER_COUNTS: [usize; 7] = [256, 224, 192, 128, 89, 76, 64];

/// Pair spaces larger than this are sampled instead of enumerated.
const ENUMERATION_LIMIT: u64 = 1 << 20;
const SAMPLED_TRAIN_PAIRS: usize = 50_000;
const SAMPLED_EVAL_PAIRS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArithOp {
    Add,
    Multiply,
}

impl ArithOp {
    /// Output width for operands of `width` bits: addition keeps the width
    /// (overflowing pairs are excluded), multiplication doubles it.
    pub fn output_width(self, width: u32) -> u32 {
        match self {
            ArithOp::Add => width,
            ArithOp::Multiply => 2 * width,
        }
    }

    /// Result with `e` absorbing; `None` when an 8-bit sum would overflow.
    pub fn apply(self, a: Token, b: Token, width: u32) -> Option<Token> {
        let (Some(x), Some(y)) = (a.num(), b.num()) else {
            return Some(Token::End);
        };
        match self {
            ArithOp::Add => (x + y < 1 << width).then_some(Token::Num(x + y)),
            ArithOp::Multiply => Some(Token::Num(x * y)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArithPair {
    pub a: Token,
    pub b: Token,
    pub target: Token,
}

impl ArithPair {
    pub fn step(&self) -> TraceStep {
        TraceStep {
            tokens: vec![self.a, self.b],
            mask: MaskVector::considering_all(2),
            target: self.target,
            pointer: None,
            next_mask: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArithmeticSpec {
    pub op: ArithOp,
    pub width: u32,
    /// Numbers that never appear in a training pair.
    pub holdout: BTreeSet<u64>,
    /// Fraction of pairs over training numbers kept back for evaluation.
    pub unseen_pair_fraction: f64,
}

impl ArithmeticSpec {
    pub fn new(op: ArithOp, width: u32) -> Self {
        Self { op, width, holdout: BTreeSet::new(), unseen_pair_fraction: 1.0 / 3.0 }
    }

    pub fn with_holdout(mut self, holdout: BTreeSet<u64>) -> Self {
        self.holdout = holdout;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArithmeticData {
    pub spec: ArithmeticSpec,
    pub train: Vec<ArithPair>,
    /// Pairs of training numbers never trained on.
    pub unseen_pairs: Vec<ArithPair>,
    /// Pairs touching at least one held-out number.
    pub unseen_numbers: Vec<ArithPair>,
}

impl ArithmeticData {
    pub fn training_numbers(&self) -> Vec<u64> {
        (0..1u64 << self.spec.width).filter(|v| !self.spec.holdout.contains(v)).collect()
    }
}

/// Random holdout leaving `train_count` numbers; 0 always stays in training
/// because it is also the start token.
pub fn holdout_for_count(train_count: usize, width: u32, seed: u64) -> Result<BTreeSet<u64>, TraceError> {
    let total = 1usize << width;
    if train_count == 0 || train_count > total {
        return Err(TraceError::HoldoutTooLarge);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rest: Vec<u64> = (1..total as u64).collect();
    rest.shuffle(&mut rng);
    Ok(rest.into_iter().skip(train_count - 1).collect())
}

pub fn gen_arithmetic_pairs(spec: &ArithmeticSpec, seed: u64) -> Result<ArithmeticData, TraceError> {
    let top = 1u64 << spec.width;
    if spec.holdout.iter().any(|&h| h >= top) {
        return Err(TraceError::InvalidParams("holdout number outside the width".into()));
    }
    let trained: Vec<u64> = (0..top).filter(|v| !spec.holdout.contains(v)).collect();
    if trained.is_empty() {
        return Err(TraceError::HoldoutTooLarge);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let held = |v: u64| spec.holdout.contains(&v);
    let pair = |a: u64, b: u64| {
        spec.op
            .apply(Token::Num(a), Token::Num(b), spec.width)
            .map(|target| ArithPair { a: Token::Num(a), b: Token::Num(b), target })
    };

    let mut train = Vec::new();
    let mut unseen_pairs = Vec::new();
    let mut unseen_numbers = Vec::new();
    if top * top <= ENUMERATION_LIMIT {
        for a in 0..top {
            for b in 0..top {
                let Some(p) = pair(a, b) else { continue };
                if held(a) || held(b) {
                    unseen_numbers.push(p);
                } else if rng.gen_bool(spec.unseen_pair_fraction.clamp(0.0, 1.0)) {
                    unseen_pairs.push(p);
                } else {
                    train.push(p);
                }
            }
        }
    } else {
        let mut seen = BTreeSet::new();
        while train.len() < SAMPLED_TRAIN_PAIRS {
            let (a, b) = (*trained.choose(&mut rng).unwrap(), *trained.choose(&mut rng).unwrap());
            if let Some(p) = pair(a, b) {
                seen.insert((a, b));
                train.push(p);
            }
        }
        let mut attempts = 0;
        while (unseen_pairs.len() < SAMPLED_EVAL_PAIRS || unseen_numbers.len() < SAMPLED_EVAL_PAIRS)
            && attempts < 100 * SAMPLED_EVAL_PAIRS
        {
            attempts += 1;
            let (a, b) = (rng.gen_range(0..top), rng.gen_range(0..top));
            let Some(p) = pair(a, b) else { continue };
            if held(a) || held(b) {
                if unseen_numbers.len() < SAMPLED_EVAL_PAIRS {
                    unseen_numbers.push(p);
                }
            } else if !seen.contains(&(a, b)) && unseen_pairs.len() < SAMPLED_EVAL_PAIRS {
                unseen_pairs.push(p);
            }
        }
    }
    if train.is_empty() {
        return Err(TraceError::HoldoutTooLarge);
    }

    if spec.op == ArithOp::Add {
        for x in (0..top).map(Token::Num).chain([Token::End]) {
            let dest = if x.num().is_some_and(held) { &mut unseen_numbers } else { &mut train };
            dest.push(ArithPair { a: Token::End, b: x, target: Token::End });
            if !x.is_end() {
                dest.push(ArithPair { a: x, b: Token::End, target: Token::End });
            }
        }
    }
    train.shuffle(&mut rng);
    Ok(ArithmeticData { spec: spec.clone(), train, unseen_pairs, unseen_numbers })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identities_and_overflow() {
        let add = ArithOp::Add;
        for x in 0..256 {
            assert_eq!(add.apply(Token::Num(0), Token::Num(x), 8), Some(Token::Num(x)));
            assert_eq!(add.apply(Token::End, Token::Num(x), 8), Some(Token::End));
        }
        assert_eq!(add.apply(Token::Num(200), Token::Num(56), 8), None);
        assert_eq!(ArithOp::Multiply.apply(Token::Num(4095), Token::Num(4095), 12), Some(Token::Num(4095 * 4095)));
        assert_eq!(ArithOp::Multiply.output_width(12), 24);
    }

    #[test]
    fn full_range_addition_partitions_pairs() {
        let data = gen_arithmetic_pairs(&ArithmeticSpec::new(ArithOp::Add, 8), 1).unwrap();
        let numeric = |v: &[ArithPair]| v.iter().filter(|p| !p.a.is_end() && !p.b.is_end()).count();
        assert_eq!(numeric(&data.train) + data.unseen_pairs.len(), 32_896);
        assert!(data.unseen_pairs.len() >= 10_000);
        assert!(data.unseen_numbers.is_empty());
        let train: BTreeSet<_> = data.train.iter().map(|p| (p.a, p.b)).collect();
        assert!(data.unseen_pairs.iter().all(|p| !train.contains(&(p.a, p.b))));
        assert!(data.train.iter().any(|p| p.a.is_end() && p.b == Token::Num(7) && p.target.is_end()));
        for p in data.train.iter().chain(&data.unseen_pairs) {
            assert_eq!(ArithOp::Add.apply(p.a, p.b, 8), Some(p.target));
        }
    }

    #[test]
    fn holdout_numbers_never_trained() {
        for count in TRAINING_NUMBER_COUNTS {
            let holdout = holdout_for_count(count, 8, 3).unwrap();
            assert_eq!(256 - holdout.len(), count);
            assert!(!holdout.contains(&0));
            let data = gen_arithmetic_pairs(&ArithmeticSpec::new(ArithOp::Add, 8).with_holdout(holdout.clone()), 3)
                .unwrap();
            for p in &data.train {
                for t in [p.a, p.b] {
                    assert!(!t.num().is_some_and(|v| holdout.contains(&v)));
                }
            }
            assert_eq!(data.training_numbers().len(), count);
        }
    }

    #[test]
    fn holdout_of_everything_is_rejected() {
        let all: BTreeSet<u64> = (0..256).collect();
        assert!(gen_arithmetic_pairs(&ArithmeticSpec::new(ArithOp::Add, 8).with_holdout(all), 0).is_err());
        assert!(holdout_for_count(0, 8, 0).is_err());
    }

    #[test]
    fn multiplication_samples_twelve_bit_operands() {
        let data = gen_arithmetic_pairs(&ArithmeticSpec::new(ArithOp::Multiply, 12), 5).unwrap();
        assert_eq!(data.train.len(), SAMPLED_TRAIN_PAIRS);
        assert!(data.train.iter().all(|p| p.target.num().unwrap() < 1 << 24));
        assert!(data.train.iter().any(|p| p.a.num().unwrap() >= 256));
    }
}
