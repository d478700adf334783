//! The run configuration file (TOML). Every field is optional; omitted fields take the
//! desk-scale defaults.

use std::fs;
use std::path::{Path, PathBuf};

use cpt_core::buffer::PrefetchMode;
use cpt_core::experiment::{Arm, DeskSetup};
use cpt_core::optim::AdamWConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    /// Model-size ladder.
    pub hidden_dims: Vec<usize>,
    /// Keep each cell's replay-buffer files after it completes.
    pub keep_buffers: bool,
    pub stream: StreamSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub buffer: BufferSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    pub num_tasks: usize,
    pub vocab_size: usize,
    pub concentration: f64,
    pub tokens_per_task: u64,
    pub seq_len: usize,
    pub task_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub context: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub reptile_interval: u64,
    pub reptile_rate: f64,
    pub eval_interval: u64,
    pub validation_rows: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BufferSection {
    pub capacity_tokens: u64,
    pub file_size: usize,
    pub queue_capacity: usize,
    pub dtype_bytes: u8,
    pub metadata_every: usize,
    pub idle_ms: u64,
    pub prefetch_mode: PrefetchMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/desk"),
            seeds: vec![0, 1, 2],
            arms: Arm::ALL.to_vec(),
            hidden_dims: vec![16, 32, 64, 128],
            keep_buffers: false,
            stream: StreamSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            buffer: BufferSection::default(),
        }
    }
}

impl Default for StreamSection {
    fn default() -> Self {
        let d = DeskSetup::default();
        Self {
            num_tasks: d.num_tasks,
            vocab_size: d.vocab_size,
            concentration: d.concentration,
            tokens_per_task: d.tokens_per_task,
            seq_len: d.seq_len,
            task_seed: d.task_seed,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DeskSetup::default();
        Self { embed_dim: d.embed_dim, context: d.context }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = DeskSetup::default();
        Self {
            batch_size: d.batch_size,
            peak_lr: d.peak_lr,
            min_lr: d.min_lr,
            warmup_fraction: d.warmup_fraction,
            reptile_interval: d.reptile_interval,
            reptile_rate: d.reptile_rate,
            eval_interval: d.eval_interval,
            validation_rows: d.validation_rows,
            beta1: d.adamw.beta1,
            beta2: d.adamw.beta2,
            eps: d.adamw.eps,
            weight_decay: d.adamw.weight_decay,
        }
    }
}

impl Default for BufferSection {
    fn default() -> Self {
        let d = DeskSetup::default();
        Self {
            capacity_tokens: d.buffer_capacity_tokens,
            file_size: d.buffer_file_size,
            queue_capacity: d.buffer_queue_capacity,
            dtype_bytes: d.buffer_dtype_bytes,
            metadata_every: d.buffer_metadata_every,
            idle_ms: d.buffer_idle_ms,
            prefetch_mode: d.prefetch_mode,
        }
    }
}

/// The part of a config that determines what a cell computes. Output directories
/// refuse to mix cells produced under different experiment settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSnapshot {
    pub stream: StreamSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub buffer: BufferSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        toml::from_str(&text).map_err(|e| CliError::ConfigParse(path.to_path_buf(), e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn snapshot(&self) -> ExperimentSnapshot {
        ExperimentSnapshot {
            stream: self.stream.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            buffer: self.buffer.clone(),
        }
    }

    pub fn setup(&self) -> DeskSetup {
        let (s, m, t, b) = (&self.stream, &self.model, &self.train, &self.buffer);
        DeskSetup {
            num_tasks: s.num_tasks,
            vocab_size: s.vocab_size,
            concentration: s.concentration,
            tokens_per_task: s.tokens_per_task,
            seq_len: s.seq_len,
            task_seed: s.task_seed,
            embed_dim: m.embed_dim,
            context: m.context,
            batch_size: t.batch_size,
            peak_lr: t.peak_lr,
            min_lr: t.min_lr,
            warmup_fraction: t.warmup_fraction,
            reptile_interval: t.reptile_interval,
            reptile_rate: t.reptile_rate,
            eval_interval: t.eval_interval,
            validation_rows: t.validation_rows,
            adamw: AdamWConfig { beta1: t.beta1, beta2: t.beta2, eps: t.eps, weight_decay: t.weight_decay },
            buffer_capacity_tokens: b.capacity_tokens,
            buffer_file_size: b.file_size,
            buffer_queue_capacity: b.queue_capacity,
            buffer_dtype_bytes: b.dtype_bytes,
            buffer_metadata_every: b.metadata_every,
            buffer_idle_ms: b.idle_ms,
            prefetch_mode: b.prefetch_mode,
        }
    }

    /// Checks every field and reports all problems at once. Does not touch the disk.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        let mut bad = |field: &str, msg: String| problems.push(format!("{field}: {msg}"));

        if self.seeds.is_empty() {
            bad("seeds", "must list at least one seed".into());
        }
        if has_duplicates(&self.seeds) {
            bad("seeds", "contains duplicates".into());
        }
        if self.arms.is_empty() {
            bad("arms", "must list at least one arm".into());
        }
        if has_duplicates(&self.arms) {
            bad("arms", "contains duplicates".into());
        }
        if self.hidden_dims.is_empty() {
            bad("hidden_dims", "must list at least one size".into());
        }
        if self.hidden_dims.contains(&0) {
            bad("hidden_dims", "sizes must be positive".into());
        }
        if has_duplicates(&self.hidden_dims) {
            bad("hidden_dims", "contains duplicates".into());
        }

        let s = &self.stream;
        if s.num_tasks == 0 {
            bad("stream.num_tasks", "must be >= 1".into());
        }
        if s.vocab_size < 2 {
            bad("stream.vocab_size", format!("must be >= 2, got {}", s.vocab_size));
        }
        if !(s.concentration > 0.0 && s.concentration.is_finite()) {
            bad("stream.concentration", format!("must be positive and finite, got {}", s.concentration));
        }
        if s.seq_len <= self.model.context {
            bad("stream.seq_len", format!("must exceed model.context ({})", self.model.context));
        }
        if s.tokens_per_task < s.seq_len as u64 {
            bad("stream.tokens_per_task", "must hold at least one sequence".into());
        }
        if self.model.embed_dim == 0 {
            bad("model.embed_dim", "must be >= 1".into());
        }
        if self.model.context == 0 {
            bad("model.context", "must be >= 1".into());
        }

        let t = &self.train;
        let replaying = self.arms.iter().any(|a| a.alpha() > 0.0);
        let min_alpha = self.arms.iter().map(|a| a.alpha()).filter(|&a| a > 0.0).fold(1.0, f64::min);
        if replaying && (min_alpha * t.batch_size as f64).floor() < 1.0 {
            bad("train.batch_size", format!("{} leaves no replay rows at replay ratio {min_alpha}", t.batch_size));
        }
        if t.batch_size == 0 {
            bad("train.batch_size", "must be >= 1".into());
        }
        if !(t.peak_lr > 0.0 && t.peak_lr.is_finite()) {
            bad("train.peak_lr", format!("must be positive, got {}", t.peak_lr));
        }
        if !(0.0 <= t.min_lr && t.min_lr <= t.peak_lr) {
            bad("train.min_lr", format!("must lie in [0, peak_lr], got {}", t.min_lr));
        }
        if !(0.0..=1.0).contains(&t.warmup_fraction) {
            bad("train.warmup_fraction", format!("must lie in [0, 1], got {}", t.warmup_fraction));
        }
        if t.reptile_interval == 0 {
            bad("train.reptile_interval", "must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&t.reptile_rate) {
            bad("train.reptile_rate", format!("must lie in [0, 1], got {}", t.reptile_rate));
        }
        if t.eval_interval == 0 {
            bad("train.eval_interval", "must be >= 1".into());
        }
        if t.validation_rows == 0 {
            bad("train.validation_rows", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&t.beta1) {
            bad("train.beta1", format!("must lie in [0, 1), got {}", t.beta1));
        }
        if !(0.0..1.0).contains(&t.beta2) {
            bad("train.beta2", format!("must lie in [0, 1), got {}", t.beta2));
        }
        if t.eps.is_nan() || t.eps <= 0.0 {
            bad("train.eps", format!("must be positive, got {}", t.eps));
        }
        if t.weight_decay.is_nan() || t.weight_decay < 0.0 {
            bad("train.weight_decay", format!("must be >= 0, got {}", t.weight_decay));
        }

        let b = &self.buffer;
        if let Err(e) = self.setup().buffer_config(Path::new("."), 0).validate() {
            bad("buffer", e.to_string());
        }
        if replaying && b.file_size < t.batch_size {
            bad("buffer.file_size", format!("must hold one incoming chunk ({} rows)", t.batch_size));
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::InvalidConfig(problems))
        }
    }
}

fn has_duplicates<T: PartialEq>(xs: &[T]) -> bool {
    xs.iter().enumerate().any(|(i, x)| xs[..i].contains(x))
}
