//! Supervised training on trace steps (engine) or whole sequences
//! (baseline), Adam with the warmup / inverse-square-root schedule.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{
    nee_step_batch, seq2seq_decode_batch, Checkpoint, MaskVector, Model, ModelConfig, ModelMode, SeqBatch, StepBatch,
    TrainBatch,
};
use crate::numeral::Token;
use crate::numerics::{AdamConfig, AdamState, LrSchedule};
use crate::traces::{generate_dataset, Dataset, DatasetSpec, Episode, EpisodeInput, Subroutine, Task, TraceStep};

use super::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainTask {
    SelectionSort,
    Merge,
    Add,
    Multiply,
    Dijkstra,
    Prim,
    Seq2seqBaseline,
}

impl TrainTask {
    /// Trace task the training data comes from.
    pub fn data_task(self) -> Task {
        match self {
            TrainTask::SelectionSort | TrainTask::Seq2seqBaseline => Task::SelectionSort,
            TrainTask::Merge => Task::Merge,
            TrainTask::Add => Task::Add,
            TrainTask::Multiply => Task::Multiply,
            TrainTask::Dijkstra => Task::Dijkstra,
            TrainTask::Prim => Task::Prim,
        }
    }

    /// Subroutines the trained engine is supervised on.
    pub fn subroutines(self) -> &'static [Subroutine] {
        match self {
            TrainTask::SelectionSort | TrainTask::Seq2seqBaseline => &[Subroutine::Select],
            TrainTask::Merge => &[Subroutine::Merge],
            TrainTask::Add => &[Subroutine::Add],
            TrainTask::Multiply => &[Subroutine::Multiply],
            TrainTask::Dijkstra | TrainTask::Prim => &[Subroutine::Select, Subroutine::Min],
        }
    }

    pub fn mode(self) -> ModelMode {
        if self == TrainTask::Seq2seqBaseline {
            ModelMode::Seq2seq
        } else {
            ModelMode::Nee
        }
    }
}

impl std::str::FromStr for TrainTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown task {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TrainTask,
    pub model: ModelConfig,
    pub data: DatasetSpec,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub scale: Scale,
    pub warmup: u64,
    /// Multiplier on the scheduled learning rate.
    pub lr_scale: f64,
    /// Validation period in steps; 0 disables validation.
    pub eval_every: u64,
    /// Validations without improvement before stopping; 0 never stops.
    pub patience: usize,
}

impl TrainConfig {
    /// Desk-scale defaults for a task; the model follows the task.
    pub fn desk(task: TrainTask, steps: u64, seed: u64) -> Self {
        let model = match task {
            TrainTask::Add => ModelConfig::add_nee(),
            TrainTask::Multiply => ModelConfig::multiply_nee(),
            TrainTask::Seq2seqBaseline => ModelConfig::seq2seq_baseline(),
            _ => ModelConfig::sort_nee(),
        };
        let data = match task.data_task() {
            Task::Dijkstra | Task::Prim => DatasetSpec::graphs(task.data_task(), 8, 2000, 200),
            Task::Add => DatasetSpec { width: 8, ..DatasetSpec::sequences(Task::Add, 1, usize::MAX, 2000) },
            Task::Multiply => DatasetSpec { width: 12, ..DatasetSpec::sequences(Task::Multiply, 1, usize::MAX, 2000) },
            t => DatasetSpec::sequences(t, 8, 20000, 200),
        };
        Self {
            task,
            model,
            data,
            steps,
            batch_size: 32,
            seed,
            scale: Scale::Desk,
            warmup: 4000,
            lr_scale: 1.0,
            eval_every: 2000,
            patience: 0,
        }
    }

    /// Six encoder and six decoder layers over the full dataset sizes.
    pub fn paper(task: TrainTask, steps: u64, seed: u64) -> Self {
        let mut c = Self::desk(task, steps, seed);
        c.model.encoder_layers = 6;
        c.model.decoder_layers = 6;
        c.scale = Scale::Paper;
        if let Task::Dijkstra | Task::Prim = task.data_task() {
            c.data.train_count = 20000;
            c.data.validation_count = 2000;
        }
        c
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model.validate().map_err(HarnessError::Config)?;
        if self.model.mode != self.task.mode() {
            return Err(HarnessError::Config(format!("{:?} needs a {:?} model", self.task, self.task.mode())));
        }
        if self.data.task != self.task.data_task() {
            return Err(HarnessError::Config(format!("dataset task {} for {:?}", self.data.task.name(), self.task)));
        }
        if self.data.width != self.model.width {
            return Err(HarnessError::Config(format!(
                "dataset width {} but model width {}",
                self.data.width, self.model.width
            )));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(HarnessError::Config("zero steps or batch size".into()));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return Err(HarnessError::Config(format!("learning-rate scale {}", self.lr_scale)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation point (the last step when
    /// validation is off).
    pub checkpoint: Checkpoint,
    /// Training loss at every step.
    pub losses: Vec<f64>,
    pub validation: Vec<ValidationPoint>,
    pub stopped_early: bool,
}

enum Pool {
    Steps(Vec<TraceStep>),
    Sequences(Vec<Vec<u64>>),
}

fn step_pool(episodes: &[Episode], subs: &[Subroutine]) -> Vec<TraceStep> {
    episodes
        .iter()
        .flat_map(|e| e.steps.iter())
        .filter(|s| subs.contains(&s.subroutine))
        .map(|s| s.step.clone())
        .collect()
}

fn sequence_pool(episodes: &[Episode]) -> Vec<Vec<u64>> {
    episodes
        .iter()
        .filter_map(|e| match &e.input {
            EpisodeInput::Sequence { values } => Some(values.clone()),
            _ => None,
        })
        .collect()
}

fn step_correct(step: &TraceStep, value: Token, pointer: usize, next: &MaskVector) -> bool {
    value == step.target
        && step.pointer.is_none_or(|p| p == pointer)
        && step.next_mask.as_ref().is_none_or(|m| m == next)
}

/// Fraction of episodes the model gets entirely right. Engines are scored
/// teacher-forced on every supervised step; the baseline by greedy
/// decoding.
pub fn validation_accuracy(model: &Model, episodes: &[Episode], subs: &[Subroutine]) -> Result<f64, HarnessError> {
    if episodes.is_empty() {
        return Ok(0.0);
    }
    let correct = match model.config.mode {
        ModelMode::Nee => {
            let mut ok = vec![true; episodes.len()];
            let mut by_len: BTreeMap<usize, Vec<(usize, &TraceStep)>> = BTreeMap::new();
            for (i, e) in episodes.iter().enumerate() {
                for s in e.steps.iter().filter(|s| subs.contains(&s.subroutine)) {
                    by_len.entry(s.step.tokens.len()).or_default().push((i, &s.step));
                }
            }
            for group in by_len.values() {
                for chunk in group.chunks(256) {
                    let items: Vec<(&[Token], &MaskVector)> =
                        chunk.iter().map(|(_, s)| (s.tokens.as_slice(), &s.mask)).collect();
                    let outs = nee_step_batch(model, &items)?;
                    for ((i, s), o) in chunk.iter().zip(outs) {
                        if !step_correct(s, o.value, o.pointer, &o.next_mask) {
                            ok[*i] = false;
                        }
                    }
                }
            }
            ok.iter().filter(|&&b| b).count()
        }
        ModelMode::Seq2seq => {
            let seqs = sequence_pool(episodes);
            let mut by_len: BTreeMap<usize, Vec<&Vec<u64>>> = BTreeMap::new();
            for s in &seqs {
                by_len.entry(s.len()).or_default().push(s);
            }
            let mut n = 0;
            for group in by_len.values() {
                for chunk in group.chunks(256) {
                    let inputs: Vec<Vec<Token>> = chunk.iter().map(|s| crate::traces::with_end(s)).collect();
                    for (s, d) in chunk.iter().zip(seq2seq_decode_batch(model, &inputs)?) {
                        let mut want = (*s).clone();
                        want.sort_unstable();
                        let want: Vec<Token> = want.into_iter().map(Token::Num).collect();
                        n += usize::from(d.terminated && d.output == want);
                    }
                }
            }
            n
        }
    };
    Ok(correct as f64 / episodes.len() as f64)
}

/// Trains from a freshly generated dataset.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    let data = generate_dataset(&config.data, config.seed)?;
    train_on(config, &data)
}

/// Trains on an existing dataset.
pub fn train_on(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    let subs = config.task.subroutines();
    let pool = match config.task.mode() {
        ModelMode::Nee => Pool::Steps(step_pool(&data.train, subs)),
        ModelMode::Seq2seq => Pool::Sequences(sequence_pool(&data.train)),
    };
    let pool_len = match &pool {
        Pool::Steps(p) => p.len(),
        Pool::Sequences(p) => p.len(),
    };
    if pool_len == 0 {
        return Err(HarnessError::Config("no training examples for this task".into()));
    }

    let mut model = Model::new(config.model.clone(), config.seed)?;
    let mut adam = AdamState::new(AdamConfig::default());
    let schedule = LrSchedule::new(config.model.dim, config.warmup);
    let mut sampler = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let mut dropout = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0002);

    let mut losses = Vec::with_capacity(config.steps as usize);
    let mut validation = Vec::new();
    let mut best: Option<(f64, Model, u64)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    let mut last_finite = f64::NAN;

    for step in 1..=config.steps {
        let batch = match &pool {
            Pool::Steps(p) => {
                let picked: Vec<&TraceStep> =
                    (0..config.batch_size).map(|_| &p[sampler.gen_range(0..p.len())]).collect();
                TrainBatch::Steps(StepBatch::from_steps(&picked)?)
            }
            Pool::Sequences(p) => {
                let picked: Vec<Vec<u64>> =
                    (0..config.batch_size).map(|_| p[sampler.gen_range(0..p.len())].clone()).collect();
                TrainBatch::Sequences(SeqBatch::sorting(&picked)?)
            }
        };
        let (loss, grads) = match model.loss_and_grads(&batch, Some(&mut dropout)) {
            Ok(r) => r,
            Err(crate::model::ModelError::Numerics(_)) => {
                return Err(HarnessError::Diverged { step, loss: f64::NAN, last_finite })
            }
            Err(e) => return Err(e.into()),
        };
        if !loss.is_finite() || grads.values().flatten().any(|g| !g.is_finite()) {
            return Err(HarnessError::Diverged { step, loss, last_finite });
        }
        last_finite = loss;
        losses.push(loss);
        let lr = config.lr_scale * schedule.lr_at(step)?;
        adam.step(model.params.map_mut(), &grads, lr)?;

        if config.eval_every > 0 && (step % config.eval_every == 0 || step == config.steps) {
            let accuracy = validation_accuracy(&model, &data.validation, subs)?;
            validation.push(ValidationPoint { step, accuracy });
            if best.as_ref().is_none_or(|b| accuracy > b.0) {
                best = Some((accuracy, model.clone(), step));
                stale = 0;
            } else {
                stale += 1;
                if config.patience > 0 && stale >= config.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let (model, step) = match best {
        Some((_, m, s)) => (m, s),
        None => {
            let s = losses.len() as u64;
            (model, s)
        }
    };
    Ok(TrainOutcome { checkpoint: Checkpoint { model, step, seed: config.seed }, losses, validation, stopped_early })
}
