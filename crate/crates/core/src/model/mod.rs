//! The execution engine, the seq2seq baseline, and their checkpoints.

mod checkpoint;
mod config;
mod mask;
mod nee;
mod network;
mod seq2seq;

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::{NumericsError, Tape, Var};

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use config::{AttentionKind, InputEncoding, ModelConfig, ModelMode, OutputEncoding, Toggles};
pub use mask::MaskVector;
pub use nee::{mask_update, nee_run, nee_run_batch, nee_run_from, nee_step, nee_step_batch, Rollout, StepBatch, StepOutput};
pub use network::ParamStore;
pub use seq2seq::{seq2seq_decode, seq2seq_decode_batch, Decoded, SeqBatch};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("every position is masked")]
    EmptyMask,
    #[error("no end token within {steps} steps")]
    Budget { steps: usize },
    #[error("wrong model mode: {0}")]
    Mode(&'static str),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("config hash mismatch: expected {expected}, found {found}")]
    ConfigMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A configuration with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Training input for either model mode.
#[derive(Clone, Debug)]
pub enum TrainBatch {
    Steps(StepBatch),
    Sequences(SeqBatch),
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::Config)?;
        let params = ParamStore::init(&config, seed);
        Ok(Self { config, params })
    }

    fn check_batch(&self, batch: &TrainBatch) -> Result<(), ModelError> {
        match (self.config.mode, batch) {
            (ModelMode::Nee, TrainBatch::Steps(_)) | (ModelMode::Seq2seq, TrainBatch::Sequences(_)) => Ok(()),
            _ => Err(ModelError::Mode("batch kind does not match the model mode")),
        }
    }

    /// Builds the loss on `tape`, using `vars` for any parameters the
    /// caller has already placed on the tape.
    pub fn loss_with_vars(
        &self,
        tape: &mut Tape,
        vars: BTreeMap<String, Var>,
        batch: &TrainBatch,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        self.check_batch(batch)?;
        let mut ctx = network::Ctx::new(tape, &self.config, &self.params, dropout).with_vars(vars);
        match batch {
            TrainBatch::Steps(b) => nee::loss(&mut ctx, b),
            TrainBatch::Sequences(b) => seq2seq::loss(&mut ctx, b),
        }
    }

    /// Loss value without gradients.
    pub fn loss(&self, batch: &TrainBatch) -> Result<f64, ModelError> {
        let mut tape = Tape::inference();
        let l = self.loss_with_vars(&mut tape, BTreeMap::new(), batch, None)?;
        Ok(tape.value(l).data()[0])
    }

    /// Loss and per-parameter gradients; parameters off every path to the
    /// loss get zeros.
    pub fn loss_and_grads(
        &self,
        batch: &TrainBatch,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, BTreeMap<String, Vec<f64>>), ModelError> {
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        for (name, t) in self.params.iter() {
            vars.insert(name.clone(), tape.variable(t.clone()));
        }
        let loss = self.loss_with_vars(&mut tape, vars.clone(), batch, dropout)?;
        let grads = tape.backward(loss)?;
        let value = tape.value(loss).data()[0];
        Ok((value, vars.into_iter().map(|(n, v)| (n, grads.get_or_zero(v))).collect()))
    }
}
