//! Experiment arms and the desk-scale setup shared by the CLI and the acceptance suite.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::buffer::{BufferConfig, PrefetchMode, ReplayBuffer};
use crate::engine::{joint_train, planned_update_steps, train, EngineError, TrainConfig, TrainMode, TrainObserver, TrainOutcome};
use crate::model::{ModelDims, ModelParams};
use crate::optim::{AdamWConfig, ScheduleConfig};
use crate::stream::{mix_seed, StreamError, TaskStream};

/// The baseline matrix, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Sequential,
    Replay25,
    Replay50,
    #[serde(rename = "reptile")]
    ReptileOnly,
    Mer25,
    Mer50,
    Joint,
}

impl Arm {
    pub const ALL: [Arm; 7] =
        [Arm::Sequential, Arm::Replay25, Arm::Replay50, Arm::ReptileOnly, Arm::Mer25, Arm::Mer50, Arm::Joint];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Sequential => "sequential",
            Arm::Replay25 => "replay25",
            Arm::Replay50 => "replay50",
            Arm::ReptileOnly => "reptile",
            Arm::Mer25 => "mer25",
            Arm::Mer50 => "mer50",
            Arm::Joint => "joint",
        }
    }

    /// Row label in the comparison tables.
    pub fn table_label(self) -> &'static str {
        match self {
            Arm::Sequential => "No Replay",
            Arm::Replay25 => "25% Replay",
            Arm::Replay50 => "50% Replay",
            Arm::ReptileOnly => "Reptile Only",
            Arm::Mer25 => "25%+Reptile",
            Arm::Mer50 => "50%+Reptile",
            Arm::Joint => "Joint",
        }
    }

    pub fn mode(self) -> TrainMode {
        match self {
            Arm::Sequential => TrainMode::Sequential,
            Arm::Replay25 | Arm::Replay50 => TrainMode::Replay,
            Arm::ReptileOnly => TrainMode::Reptile,
            Arm::Mer25 | Arm::Mer50 => TrainMode::Mer,
            Arm::Joint => TrainMode::Joint,
        }
    }

    pub fn alpha(self) -> f64 {
        match self {
            Arm::Replay25 | Arm::Mer25 => 0.25,
            Arm::Replay50 | Arm::Mer50 => 0.5,
            _ => 0.0,
        }
    }

    /// Arms sharing an update rule, differing only in replay ratio.
    pub fn family(self) -> &'static str {
        match self {
            Arm::Sequential | Arm::Replay25 | Arm::Replay50 => "replay",
            Arm::ReptileOnly | Arm::Mer25 | Arm::Mer50 => "reptile",
            Arm::Joint => "joint",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Arm::ALL
            .into_iter()
            .find(|a| a.label() == s)
            .ok_or_else(|| format!("unknown arm `{s}`; expected one of {}", Arm::ALL.map(|a| a.label()).join(", ")))
    }
}

/// Everything needed to run one (arm, model size, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskSetup {
    pub num_tasks: usize,
    pub vocab_size: usize,
    /// Dirichlet concentration of the transition rows.
    pub concentration: f64,
    pub tokens_per_task: u64,
    pub seq_len: usize,
    /// Task definitions are derived from this and the run seed.
    pub task_seed: u64,
    pub embed_dim: usize,
    pub context: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    /// Warmup length as a fraction of the run's update steps.
    pub warmup_fraction: f64,
    pub reptile_interval: u64,
    pub reptile_rate: f64,
    pub eval_interval: u64,
    pub validation_rows: usize,
    pub adamw: AdamWConfig,
    pub buffer_capacity_tokens: u64,
    pub buffer_file_size: usize,
    pub buffer_queue_capacity: usize,
    pub buffer_dtype_bytes: u8,
    pub buffer_metadata_every: usize,
    pub buffer_idle_ms: u64,
    pub prefetch_mode: PrefetchMode,
}

impl Default for DeskSetup {
    fn default() -> Self {
        Self {
            num_tasks: 3,
            vocab_size: 32,
            concentration: 0.1,
            tokens_per_task: 200_000,
            seq_len: 64,
            task_seed: 100,
            embed_dim: 16,
            context: 3,
            batch_size: 16,
            peak_lr: 3e-3,
            min_lr: 3e-4,
            warmup_fraction: 0.05,
            reptile_interval: 50,
            reptile_rate: 0.1,
            eval_interval: 50,
            validation_rows: 64,
            adamw: AdamWConfig::default(),
            buffer_capacity_tokens: 10_000 * 64,
            buffer_file_size: 1000,
            buffer_queue_capacity: 4,
            buffer_dtype_bytes: 4,
            buffer_metadata_every: 1,
            buffer_idle_ms: 100,
            prefetch_mode: PrefetchMode::Synchronous,
        }
    }
}

impl DeskSetup {
    /// The five-task variant.
    pub fn five_tasks() -> Self {
        Self { num_tasks: 5, ..Self::default() }
    }

    pub fn stream(&self, seed: u64) -> Result<TaskStream, StreamError> {
        TaskStream::synthetic(
            self.num_tasks,
            self.vocab_size,
            self.concentration,
            self.tokens_per_task,
            self.seq_len,
            mix_seed(&[self.task_seed, seed]),
            seed,
        )
    }

    pub fn model_dims(&self, hidden_dim: usize) -> ModelDims {
        ModelDims { vocab_size: self.vocab_size, embed_dim: self.embed_dim, context: self.context, hidden_dim }
    }

    pub fn initial_params(&self, hidden_dim: usize, seed: u64) -> ModelParams {
        ModelParams::init(self.model_dims(hidden_dim), mix_seed(&[seed, hidden_dim as u64]))
            .expect("desk dims are valid")
    }

    pub fn train_config(&self, arm: Arm, seed: u64, stream: &TaskStream) -> TrainConfig {
        let schedule = ScheduleConfig { peak_lr: self.peak_lr, warmup_steps: 0, total_steps: 0, min_lr: self.min_lr };
        let mut cfg = TrainConfig::new(arm.mode(), self.batch_size, arm.alpha(), schedule);
        cfg.reptile_interval = self.reptile_interval;
        cfg.reptile_rate = self.reptile_rate;
        cfg.adamw = self.adamw;
        cfg.seed = seed;
        cfg.eval_interval = self.eval_interval;
        cfg.validation_rows = self.validation_rows;
        let total = planned_update_steps(stream, &cfg);
        cfg.schedule.total_steps = total;
        cfg.schedule.warmup_steps = (total as f64 * self.warmup_fraction).round() as u64;
        cfg
    }

    pub fn buffer_config(&self, dir: &Path, seed: u64) -> BufferConfig {
        let mut bc = BufferConfig::new(dir, self.buffer_capacity_tokens, self.buffer_file_size, self.seq_len);
        bc.queue_capacity = self.buffer_queue_capacity;
        bc.dtype_bytes = self.buffer_dtype_bytes;
        bc.metadata_every = self.buffer_metadata_every;
        bc.idle_interval = Duration::from_millis(self.buffer_idle_ms);
        bc.prefetch_mode = self.prefetch_mode;
        bc.seed = seed;
        bc
    }

    /// Trains one cell. Replaying arms keep their buffer in `work_dir/buffer`, which should
    /// not exist yet for a fresh run; a non-finite loss leaves its checkpoint in `work_dir`.
    pub fn run_cell(
        &self,
        arm: Arm,
        hidden_dim: usize,
        seed: u64,
        work_dir: &Path,
        observer: &mut dyn TrainObserver,
    ) -> Result<TrainOutcome, EngineError> {
        let stream = self.stream(seed).map_err(|e| EngineError::InvalidConfig(e.to_string()))?;
        let theta0 = self.initial_params(hidden_dim, seed);
        let mut cfg = self.train_config(arm, seed, &stream);
        cfg.diagnostic_dir = Some(work_dir.to_path_buf());
        match arm.mode() {
            TrainMode::Joint => joint_train(&stream, &theta0, &cfg, observer),
            mode if mode.uses_replay() => {
                let mut buffer = ReplayBuffer::init(self.buffer_config(&work_dir.join("buffer"), seed))?;
                let out = train(&stream, &theta0, &cfg, Some(&mut buffer), observer)?;
                buffer.shutdown()?;
                Ok(out)
            }
            _ => train(&stream, &theta0, &cfg, None, observer),
        }
    }
}
