//! Continual training loops: sequential, experience replay, Reptile-only, meta-experience
//! replay (replay + Reptile) and the joint i.i.d. baseline.
//!
//! One optimizer update is taken per `ceil((1-α)N)` incoming samples; the batch is
//! topped up with `floor(αN)` rows from the replay buffer. Only the incoming rows are
//! added to the buffer. In Reptile modes the parameters are interpolated towards the
//! previous anchor every `k` updates, after which the anchor is refreshed. The
//! learning-rate schedule and AdamW state run once over the whole stream.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{BufferError, ReplayBuffer};
use crate::metrics::{EvalRecord, MetricsLog};
use crate::model::{loss, loss_and_grad, ModelError, ModelParams};
use crate::optim::{adamw_step, AdamWConfig, AdamWState, OptimError, ScheduleConfig};
use crate::sample::SampleBatch;
use crate::stream::{Cursor, TaskStream};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("replay ratio must lie in [0, 1), got {0}")]
    BadReplayRatio(f64),
    #[error("mode {0:?} needs a replay buffer")]
    MissingBuffer(TrainMode),
    #[error("non-finite loss {loss} at update step {step}; diagnostic checkpoint: {checkpoint:?}")]
    NonFiniteLoss { step: u64, loss: f64, checkpoint: Option<PathBuf> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Sequential,
    Replay,
    Reptile,
    Mer,
    Joint,
}

impl TrainMode {
    pub fn uses_reptile(self) -> bool {
        matches!(self, TrainMode::Reptile | TrainMode::Mer)
    }

    pub fn uses_replay(self) -> bool {
        matches!(self, TrainMode::Replay | TrainMode::Mer)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Rows per update, incoming plus replayed.
    pub batch_size: usize,
    /// Fraction of each batch drawn from the buffer.
    pub replay_ratio: f64,
    /// Update steps between Reptile interpolations.
    pub reptile_interval: u64,
    /// Reptile interpolation rate.
    pub reptile_rate: f64,
    pub schedule: ScheduleConfig,
    pub adamw: AdamWConfig,
    pub mode: TrainMode,
    pub seed: u64,
    pub eval_interval: u64,
    pub validation_rows: usize,
    /// Where to dump params/optimizer state if the loss goes non-finite.
    pub diagnostic_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, batch_size: usize, replay_ratio: f64, schedule: ScheduleConfig) -> Self {
        Self {
            batch_size,
            replay_ratio,
            reptile_interval: 50,
            reptile_rate: 0.1,
            schedule,
            adamw: AdamWConfig::default(),
            mode,
            seed: 0,
            eval_interval: 50,
            validation_rows: 64,
            diagnostic_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.replay_ratio) {
            return Err(EngineError::BadReplayRatio(self.replay_ratio));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.incoming_rows() == 0 {
            return bad("replay ratio leaves no incoming rows".into());
        }
        match self.mode {
            TrainMode::Sequential | TrainMode::Reptile | TrainMode::Joint if self.replay_ratio != 0.0 => {
                return bad(format!("mode {:?} requires replay_ratio = 0", self.mode));
            }
            TrainMode::Replay | TrainMode::Mer if self.replay_ratio == 0.0 => {
                return bad(format!("mode {:?} requires replay_ratio > 0", self.mode));
            }
            _ => {}
        }
        if self.mode.uses_reptile() {
            if self.reptile_interval == 0 {
                return bad("reptile_interval must be >= 1".into());
            }
            if !(0.0..=1.0).contains(&self.reptile_rate) {
                return bad(format!("reptile_rate must lie in [0, 1], got {}", self.reptile_rate));
            }
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be >= 1".into());
        }
        if self.validation_rows == 0 {
            return bad("validation_rows must be >= 1".into());
        }
        self.schedule.validate()?;
        Ok(())
    }

    /// `floor(αN)`
    pub fn replay_rows(&self) -> usize {
        replay_rows(self.replay_ratio, self.batch_size)
    }

    /// `N - floor(αN)`, which equals `ceil((1-α)N)`.
    pub fn incoming_rows(&self) -> usize {
        self.batch_size - self.replay_rows()
    }
}

pub fn replay_rows(alpha: f64, batch_size: usize) -> usize {
    (alpha * batch_size as f64).floor() as usize
}

/// Update steps a continual run over `stream` will take.
pub fn planned_update_steps(stream: &TaskStream, config: &TrainConfig) -> u64 {
    if config.mode == TrainMode::Joint {
        return stream.total_samples().div_ceil(config.batch_size as u64);
    }
    let per_step = config.incoming_rows() as u64;
    (0..stream.num_tasks()).map(|t| stream.samples_in_task(t).div_ceil(per_step)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComposedBatch {
    pub batch: SampleBatch,
    pub replay_rows: usize,
}

/// Incoming rows followed by `floor(αN)` rows from the buffer. With an empty queue the
/// batch is just the incoming rows.
pub fn compose_batch(
    incoming: &SampleBatch,
    buffer: Option<&mut ReplayBuffer>,
    alpha: f64,
    batch_size: usize,
) -> Result<ComposedBatch, EngineError> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(EngineError::BadReplayRatio(alpha));
    }
    let mut batch = incoming.clone();
    if alpha == 0.0 || replay_rows(alpha, batch_size) == 0 {
        return Ok(ComposedBatch { batch, replay_rows: 0 });
    }
    let buffer = buffer.ok_or(EngineError::MissingBuffer(TrainMode::Replay))?;
    let replay = buffer.get_batch(alpha, batch_size)?;
    batch.extend(&replay);
    Ok(ComposedBatch { batch, replay_rows: replay.num_rows() })
}

/// Elementwise `anchor + ε(current − anchor)`, evaluated as `ε·current + (1−ε)·anchor`
/// (three operations per parameter; exact at ε = 0 and ε = 1). Returns the number of
/// elementwise operations performed.
pub fn reptile_interpolate(current: &mut ModelParams, anchor: &ModelParams, epsilon: f64) -> u64 {
    assert!(current.same_shape(anchor), "reptile anchor shape mismatch");
    let keep = 1.0 - epsilon;
    let mut n = 0u64;
    for (c, a) in current.iter_mut().zip(anchor.iter()) {
        *c = epsilon * *c + keep * *a;
        n += 1;
    }
    3 * n
}

pub fn reptile_update(current: &ModelParams, anchor: &ModelParams, epsilon: f64) -> ModelParams {
    let mut out = current.clone();
    reptile_interpolate(&mut out, anchor, epsilon);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReptileAnchor {
    pub params_snapshot: ModelParams,
    pub steps_since_anchor: u64,
}

impl ReptileAnchor {
    pub fn new(params: &ModelParams) -> Self {
        Self { params_snapshot: params.clone(), steps_since_anchor: 0 }
    }

    /// Counts one update step; every `interval` steps interpolates `params` towards the
    /// snapshot and re-anchors. Returns the elementwise operation count (0 when idle).
    pub fn step(&mut self, params: &mut ModelParams, interval: u64, epsilon: f64) -> u64 {
        self.steps_since_anchor += 1;
        if self.steps_since_anchor < interval {
            return 0;
        }
        let ops = reptile_interpolate(params, &self.params_snapshot, epsilon);
        self.params_snapshot.clone_from(params);
        self.steps_since_anchor = 0;
        ops
    }
}

/// Work done by a run, counted rather than timed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainCounters {
    pub update_steps: u64,
    pub incoming_rows: u64,
    pub incoming_tokens: u64,
    pub replay_rows: u64,
    pub replay_tokens: u64,
    /// Tokens fed through forward and backward passes.
    pub processed_tokens: u64,
    /// Updates whose buffer draw came back empty (cold start).
    pub cold_steps: u64,
    pub reptile_updates: u64,
    pub reptile_param_ops: u64,
}

/// Hooks called synchronously from the training loop.
pub trait TrainObserver {
    fn on_eval(&mut self, _step: u64, _params: &ModelParams, _records: &[EvalRecord]) {}
    fn on_task_end(&mut self, _task: usize, _step: u64, _params: &ModelParams, _optimizer: &AdamWState) {}
    fn on_step(&mut self, _step: u64, _train_loss: f64, _composed: &ComposedBatch) {}
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub optimizer: AdamWState,
    pub log: MetricsLog,
    pub counters: TrainCounters,
}

/// Writes `params.bin` and `optim.bin` into `dir`.
pub fn write_checkpoint(dir: &Path, params: &ModelParams, optimizer: &AdamWState) -> Result<(), EngineError> {
    std::fs::create_dir_all(dir)?;
    params.save(&dir.join("params.bin"))?;
    let f = std::io::BufWriter::new(std::fs::File::create(dir.join("optim.bin"))?);
    optimizer.write_checkpoint(f)?;
    Ok(())
}

struct Evaluator {
    validation: Vec<SampleBatch>,
}

impl Evaluator {
    fn new(stream: &TaskStream, rows: usize) -> Self {
        Self { validation: (0..stream.num_tasks()).map(|t| stream.validation_set(t, rows)).collect() }
    }

    fn run(
        &self,
        params: &ModelParams,
        step: u64,
        train_task: Option<usize>,
        log: &mut MetricsLog,
        observer: &mut dyn TrainObserver,
    ) -> Result<(), EngineError> {
        let start = log.records.len();
        for (t, val) in self.validation.iter().enumerate() {
            log.push(EvalRecord { update_step: step, eval_task: t, val_loss: loss(params, val)?, train_task });
        }
        observer.on_eval(step, params, &log.records[start..]);
        Ok(())
    }
}

struct Stepper<'a> {
    config: &'a TrainConfig,
    params: ModelParams,
    optimizer: AdamWState,
    anchor: Option<ReptileAnchor>,
    counters: TrainCounters,
}

impl Stepper<'_> {
    fn update(&mut self, composed: &ComposedBatch, observer: &mut dyn TrainObserver) -> Result<(), EngineError> {
        let step = self.counters.update_steps;
        let (train_loss, grads) = loss_and_grad(&self.params, &composed.batch)?;
        if !train_loss.is_finite() {
            let checkpoint = match &self.config.diagnostic_dir {
                Some(dir) => {
                    let dir = dir.join(format!("nonfinite_step_{step}"));
                    write_checkpoint(&dir, &self.params, &self.optimizer)?;
                    Some(dir)
                }
                None => None,
            };
            return Err(EngineError::NonFiniteLoss { step, loss: train_loss, checkpoint });
        }
        let lr = self.config.schedule.lr_at(step);
        adamw_step(&mut self.params, &grads, &mut self.optimizer, lr, &self.config.adamw)?;
        observer.on_step(step, train_loss, composed);

        let c = &mut self.counters;
        c.update_steps += 1;
        let processed = composed.batch.num_tokens() as u64;
        let replay_tokens = (composed.replay_rows * composed.batch.seq_len()) as u64;
        c.processed_tokens += processed;
        c.replay_rows += composed.replay_rows as u64;
        c.replay_tokens += replay_tokens;
        c.incoming_rows += (composed.batch.num_rows() - composed.replay_rows) as u64;
        c.incoming_tokens += processed - replay_tokens;

        if let Some(anchor) = self.anchor.as_mut() {
            let ops = anchor.step(&mut self.params, self.config.reptile_interval, self.config.reptile_rate);
            if ops > 0 {
                c.reptile_updates += 1;
                c.reptile_param_ops += ops;
            }
        }
        Ok(())
    }
}

/// Continual training over `stream` in one of the sequential, replay, reptile or mer
/// modes. `buffer` is required when the mode replays; it receives every incoming row.
pub fn train(
    stream: &TaskStream,
    theta0: &ModelParams,
    config: &TrainConfig,
    mut buffer: Option<&mut ReplayBuffer>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, EngineError> {
    config.validate()?;
    if config.mode == TrainMode::Joint {
        return Err(EngineError::InvalidConfig("use joint_train for the joint baseline".into()));
    }
    if config.mode.uses_replay() && buffer.is_none() {
        return Err(EngineError::MissingBuffer(config.mode));
    }
    if let Some(b) = buffer.as_deref_mut() {
        b.start_prefetch();
    }
    let evaluator = Evaluator::new(stream, config.validation_rows);
    let mut log = MetricsLog::new(stream.num_tasks());
    let mut stepper = Stepper {
        config,
        params: theta0.clone(),
        optimizer: AdamWState::new(theta0),
        anchor: config.mode.uses_reptile().then(|| ReptileAnchor::new(theta0)),
        counters: TrainCounters::default(),
    };
    evaluator.run(&stepper.params, 0, Some(0), &mut log, observer)?;

    let mut cursor = Cursor::default();
    while let Some(incoming) = stream.next_incoming(cursor, config.incoming_rows()) {
        cursor = incoming.cursor;
        let alpha = if config.mode.uses_replay() { config.replay_ratio } else { 0.0 };
        let composed = compose_batch(&incoming.batch, buffer.as_deref_mut(), alpha, config.batch_size)?;
        if alpha > 0.0 && composed.replay_rows == 0 {
            stepper.counters.cold_steps += 1;
        }
        stepper.update(&composed, observer)?;
        if let Some(b) = buffer.as_deref_mut() {
            b.add(&incoming.batch)?;
        }
        let step = stepper.counters.update_steps;
        if incoming.task_finished {
            evaluator.run(&stepper.params, step, Some(incoming.task_id), &mut log, observer)?;
            log.task_boundaries.push(step);
            observer.on_task_end(incoming.task_id, step, &stepper.params, &stepper.optimizer);
        } else if step.is_multiple_of(config.eval_interval) {
            evaluator.run(&stepper.params, step, Some(incoming.task_id), &mut log, observer)?;
        }
    }
    Ok(TrainOutcome { params: stepper.params, optimizer: stepper.optimizer, log, counters: stepper.counters })
}

/// The i.i.d. reference: the same samples uniformly shuffled across tasks, full batches
/// of incoming rows, no buffer and no Reptile.
pub fn joint_train(
    stream: &TaskStream,
    theta0: &ModelParams,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, EngineError> {
    config.validate()?;
    if config.mode != TrainMode::Joint {
        return Err(EngineError::InvalidConfig(format!("joint_train called with mode {:?}", config.mode)));
    }
    let evaluator = Evaluator::new(stream, config.validation_rows);
    let mut log = MetricsLog::new(stream.num_tasks());
    let mut stepper = Stepper {
        config,
        params: theta0.clone(),
        optimizer: AdamWState::new(theta0),
        anchor: None,
        counters: TrainCounters::default(),
    };
    evaluator.run(&stepper.params, 0, None, &mut log, observer)?;
    let order = stream.joint_order();
    let chunks = order.chunks(config.batch_size);
    let last = chunks.len();
    for (i, chunk) in chunks.enumerate() {
        let composed = ComposedBatch { batch: stream.batch_of(chunk), replay_rows: 0 };
        stepper.update(&composed, observer)?;
        let step = stepper.counters.update_steps;
        if i + 1 == last || step.is_multiple_of(config.eval_interval) {
            evaluator.run(&stepper.params, step, None, &mut log, observer)?;
        }
    }
    let end = stepper.counters.update_steps;
    log.task_boundaries = vec![end; stream.num_tasks()];
    for t in 0..stream.num_tasks() {
        observer.on_task_end(t, end, &stepper.params, &stepper.optimizer);
    }
    Ok(TrainOutcome { params: stepper.params, optimizer: stepper.optimizer, log, counters: stepper.counters })
}
