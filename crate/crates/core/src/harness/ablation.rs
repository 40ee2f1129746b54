//! Architecture-variant matrix: identical data and seed, one model per
//! toggle set, scored on several test distributions.

use serde::{Deserialize, Serialize};

use crate::model::Toggles;
use crate::traces::{generate_dataset, DistributionSpec, Task};

use super::eval::evaluate_on;
use super::train::{train_on, TrainConfig};
use super::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMix {
    Mixed,
    Random,
    Hard,
}

impl TestMix {
    pub const ALL: [TestMix; 3] = [TestMix::Mixed, TestMix::Random, TestMix::Hard];

    pub fn distribution(self) -> DistributionSpec {
        match self {
            TestMix::Mixed => DistributionSpec::test(),
            TestMix::Random => DistributionSpec::random(),
            TestMix::Hard => DistributionSpec::hard(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub toggles: Toggles,
    /// Exact-match accuracy per mix, in the table's mix order.
    pub accuracy: Vec<f64>,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub length: usize,
    pub samples: usize,
    pub mixes: Vec<TestMix>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn accuracy(&self, variant: &str, mix: TestMix) -> Option<f64> {
        let i = self.mixes.iter().position(|&m| m == mix)?;
        self.row(variant).map(|r| r.accuracy[i])
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| variant |");
        for m in &self.mixes {
            s.push_str(&format!(" {m:?} % |"));
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(self.mixes.len()));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("| {} |", r.variant));
            for a in &r.accuracy {
                s.push_str(&format!(" {:.2} |", 100.0 * a));
            }
            s.push('\n');
        }
        s
    }
}

/// Trains `base` once per variant (same dataset, same seed) and scores
/// each at `length`.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[&str],
    mixes: &[TestMix],
    length: usize,
    samples: usize,
) -> Result<AblationTable, HarnessError> {
    base.validate()?;
    let data = generate_dataset(&base.data, base.seed)?;
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let toggles = Toggles::from_variant(variant).map_err(HarnessError::Config)?;
        let mut cfg = base.clone();
        cfg.model.toggles = toggles;
        let outcome = train_on(&cfg, &data)?;
        let model = &outcome.checkpoint.model;
        let mut accuracy = Vec::with_capacity(mixes.len());
        for mix in mixes {
            let r = evaluate_on(model, variant, Task::SelectionSort, &mix.distribution(), &[length], samples, base.seed)?;
            accuracy.push(r.lengths[0].exact_match);
        }
        rows.push(AblationRow {
            variant: variant.to_string(),
            toggles,
            accuracy,
            final_loss: outcome.losses.last().copied().unwrap_or(f64::NAN),
        });
    }
    Ok(AblationTable { length, samples, mixes: mixes.to_vec(), rows })
}
