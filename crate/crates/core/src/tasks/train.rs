use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::{Batch, TaskGenerator, TaskSpec};
use crate::attention::{Encoder, EncoderConfig, ForwardOptions};
use crate::error::{Error, Result};
use crate::posembed::{Extrapolation, MethodKind};
use crate::tensor::{OptimizerConfig, SeededRng, Tape};

const DATA_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

/// How long to train and how to evaluate along the way.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Sequences per evaluation length.
    pub eval_batch: usize,
}

impl Schedule {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_epoch == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("steps_per_epoch, batch_size and eval_batch must be positive".into()));
        }
        Ok(())
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 30,
            steps_per_epoch: 100,
            batch_size: 32,
            eval_batch: 32,
        }
    }
}

/// Result of evaluating at one length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalOutcome {
    Accuracy(f64),
    /// The model cannot represent this length (absolute positions).
    CapacityError,
}

impl EvalOutcome {
    pub fn accuracy(self) -> Option<f64> {
        match self {
            EvalOutcome::Accuracy(a) => Some(a),
            EvalOutcome::CapacityError => None,
        }
    }
}

impl Serialize for EvalOutcome {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            EvalOutcome::Accuracy(a) => s.serialize_f64(*a),
            EvalOutcome::CapacityError => s.serialize_str("capacity_error"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    /// Optimizer steps completed.
    pub step: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub accuracy: BTreeMap<usize, EvalOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_s: f64,
    /// All learnable elements: position parameters plus backbone.
    pub param_count: usize,
}

impl RunMetrics {
    pub fn final_accuracy(&self) -> Option<&BTreeMap<usize, EvalOutcome>> {
        self.epochs.last().map(|e| &e.accuracy)
    }
}

/// Token accuracy over the scored positions of a batch.
pub fn batch_accuracy(model: &Encoder, batch: &Batch, policy: Extrapolation) -> Result<(usize, usize)> {
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        policy,
        ..Default::default()
    };
    let out = model.forward(&mut tape, &batch.inputs, &opts)?;
    let logits = tape.value(out.logits);
    let targets = batch.flat_targets();
    let mut hits = 0;
    let mut total = 0;
    for (r, m) in batch.loss_mask.iter().flatten().enumerate() {
        if !m {
            continue;
        }
        total += 1;
        let row = logits.row(r);
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        if best.0 == targets[r] {
            hits += 1;
        }
    }
    Ok((hits, total))
}

/// Accuracy at each of the task's evaluation lengths on a fixed, seeded
/// evaluation set. Lengths the model cannot represent are reported as
/// [`EvalOutcome::CapacityError`] rather than failing.
pub fn extrapolate_eval(
    model: &Encoder,
    task: &TaskGenerator,
    eval_batch: usize,
    rng: &SeededRng,
) -> Result<BTreeMap<usize, EvalOutcome>> {
    let mut out = BTreeMap::new();
    for &len in &task.spec().eval_lens {
        let mut eval_rng = rng.fork(EVAL_STREAM + len as u64);
        let batch = task.generate(&mut eval_rng, eval_batch, len)?;
        let outcome = match batch_accuracy(model, &batch, Extrapolation::Saturate) {
            Ok((hits, total)) => EvalOutcome::Accuracy(if total == 0 { 0.0 } else { hits as f64 / total as f64 }),
            Err(Error::Capacity { .. }) => EvalOutcome::CapacityError,
            Err(e) => return Err(e),
        };
        out.insert(len, outcome);
    }
    Ok(out)
}

/// Trains `model` in place with seeded batches, evaluating after every
/// epoch. Identical inputs give bitwise-identical metrics (apart from
/// wall-clock time).
pub fn train(
    model: &mut Encoder,
    task: &TaskGenerator,
    optimizer: &OptimizerConfig,
    schedule: &Schedule,
    rng: &SeededRng,
) -> Result<RunMetrics> {
    schedule.validate()?;
    if task.spec().vocab != model.config().vocab {
        return Err(Error::Config(format!(
            "task vocabulary {} differs from model vocabulary {}",
            task.spec().vocab,
            model.config().vocab
        )));
    }
    let start = Instant::now();
    let mut data_rng = rng.fork(DATA_STREAM);
    let mut opt = optimizer.build(model.store());
    model.store_mut().zero_grads();
    let mut epochs = Vec::with_capacity(schedule.epochs);
    let mut step = 0;
    for _ in 0..schedule.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..schedule.steps_per_epoch {
            step += 1;
            let batch = task.sample_train(&mut data_rng, schedule.batch_size)?;
            let mut tape = Tape::new();
            let loss = model
                .loss(
                    &mut tape,
                    &batch.inputs,
                    &batch.flat_targets(),
                    &batch.flat_weights(),
                    &ForwardOptions::default(),
                )
                .map_err(|e| match e {
                    Error::Numeric { .. } => Error::Divergence { step, loss: f64::NAN },
                    other => other,
                })?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            loss_sum += value;
            tape.backward(loss, model.store_mut())?;
            opt.step(model.store_mut());
            model.store_mut().zero_grads();
        }
        let accuracy = extrapolate_eval(model, task, schedule.eval_batch, rng)?;
        epochs.push(EpochRecord {
            step,
            loss: loss_sum / schedule.steps_per_epoch as f64,
            accuracy,
        });
    }
    Ok(RunMetrics {
        epochs,
        wall_clock_s: start.elapsed().as_secs_f64(),
        param_count: model.element_count(),
    })
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub encoder: EncoderConfig,
    pub task: TaskSpec,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.task.validate()?;
        self.schedule.validate()?;
        if self.task.vocab != self.encoder.vocab {
            return Err(Error::Config(format!(
                "task vocabulary {} differs from model vocabulary {}",
                self.task.vocab, self.encoder.vocab
            )));
        }
        if self.task.train_len.1 > self.encoder.max_len {
            return Err(Error::Config(format!(
                "training length {} exceeds the model's maximum length {}",
                self.task.train_len.1, self.encoder.max_len
            )));
        }
        Ok(())
    }

    /// Builds the model from `seed` and trains it.
    pub fn run(&self) -> Result<(Encoder, RunMetrics)> {
        self.validate()?;
        let mut model = Encoder::new(self.encoder, self.seed)?;
        let task = TaskGenerator::new(self.task.clone())?;
        let rng = SeededRng::new(self.seed);
        let metrics = train(&mut model, &task, &self.optimizer, &self.schedule, &rng)?;
        Ok((model, metrics))
    }

    /// Whether evaluation lengths beyond `max_len` are expected to fail.
    pub fn bounded_by_max_len(&self) -> bool {
        self.encoder.method.kind == MethodKind::Absolute
    }
}
