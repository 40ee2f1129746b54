//! Training, generalization evaluation, composition of trained engines into
//! whole algorithms, and the ablation matrix.

mod ablation;
mod compose;
mod eval;
mod train;

use thiserror::Error;

use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::traces::TraceError;

pub use ablation::{run_ablation, AblationRow, AblationTable, TestMix};
pub use compose::{
    compose_dijkstra, compose_merge_sort, compose_prim, run_engine, AddEngine, EngineStep, ExactAdd, ExactMin,
    ExactUpdate, StepEngine,
};
pub use eval::{
    addition_identity_failures, attention_sharpness, elementwise_accuracy, evaluate_arithmetic, evaluate_generalization,
    evaluate_on, exact_match, sharpness_of, test_inputs, ArithmeticReport, EvalReport, ExactSort, LengthResult,
    MergeSorter, Solved, Solver,
};
pub use train::{train, train_on, validation_accuracy, Scale, TrainConfig, TrainOutcome, TrainTask, ValidationPoint};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss} (last finite loss {last_finite})")]
    Diverged { step: u64, loss: f64, last_finite: f64 },
    #[error("{what} did not finish within {steps} steps")]
    Budget { what: &'static str, steps: usize },
    #[error("subroutine produced an unusable result: {0}")]
    Subroutine(String),
}
