//! Execution traces with intermediate-state supervision, the reference
//! algorithms they are checked against, input distributions and the
//! dataset file format.

mod arithmetic;
mod dataset;
mod distribution;
mod graph;
mod sorting;

pub use arithmetic::{
    gen_arithmetic_pairs, holdout_for_count, ArithOp, ArithPair, ArithmeticData, ArithmeticSpec,
    TRAINING_NUMBER_COUNTS,
};
pub use dataset::{
    arithmetic_data, generate_dataset, read_dataset, read_dataset_bytes, write_dataset, write_dataset_bytes, write_dataset_json,
    Dataset, DatasetHeader, DatasetSpec, Episode, EpisodeInput, DATASET_MAGIC, DATASET_VERSION,
};
pub use distribution::{sample_sequence, sample_with, DistributionMode, DistributionSpec, DEFAULT_SPREAD};
pub use graph::{
    bellman_ford, brute_force_mst_weight, enumerate_mst_weight, gen_dijkstra_trace, gen_graph, gen_graph_with,
    gen_prim_trace, is_spanning_tree, replay_dijkstra, replay_prim, GraphFamily, WeightMode, WeightedGraph,
};
pub use sorting::{
    gen_merge_trace, gen_selection_sort_trace, masked_min, merge_layout, merge_update, replay, selection_update,
    with_end,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::MaskVector;
use crate::numeral::Token;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("merge inputs must be sorted ascending")]
    Unsorted,
    #[error("inconsistent trace: {0}")]
    Inconsistent(String),
    #[error("invalid graph parameters: {0}")]
    InvalidParams(String),
    #[error("graph is disconnected")]
    Disconnected,
    #[error("holdout leaves no training data")]
    HoldoutTooLarge,
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One supervised subroutine invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub tokens: Vec<Token>,
    pub mask: MaskVector,
    pub target: Token,
    /// Position the value was read from; absent for arithmetic.
    pub pointer: Option<usize>,
    /// Absent on terminal steps and on single-shot subroutines.
    pub next_mask: Option<MaskVector>,
}

impl TraceStep {
    pub fn terminal(tokens: Vec<Token>, mask: MaskVector, pointer: usize) -> Self {
        Self { tokens, mask, target: Token::End, pointer: Some(pointer), next_mask: None }
    }

    pub fn is_terminal(&self) -> bool {
        self.target.is_end() && self.next_mask.is_none()
    }
}

/// Which subroutine a step exercises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subroutine {
    /// Masked minimum with a mask update (selection sort, queue selection).
    Select,
    Merge,
    Add,
    Multiply,
    /// Unmasked minimum of a short list (distance relaxation, key update).
    Min,
}

/// A trace step tagged with its subroutine and, for graph traces, the node
/// it concerns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledStep {
    pub subroutine: Subroutine,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<usize>,
    pub step: TraceStep,
}

/// Tasks with trace generators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    SelectionSort,
    Merge,
    Add,
    Multiply,
    Dijkstra,
    Prim,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::SelectionSort => "selection-sort",
            Task::Merge => "merge",
            Task::Add => "add",
            Task::Multiply => "multiply",
            Task::Dijkstra => "dijkstra",
            Task::Prim => "prim",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Task::SelectionSort, Task::Merge, Task::Add, Task::Multiply, Task::Dijkstra, Task::Prim]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task {s:?}"))
    }
}
