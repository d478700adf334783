//! Continual pre-training engine with experience replay, Reptile meta-experience replay
//! and a disk-backed prefetching replay buffer, over synthetic Markov-language task
//! streams and a small n-gram language model.

pub mod buffer;
pub mod engine;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod sample;
pub mod stream;

pub use buffer::{BufferConfig, BufferError, BufferState, PrefetchMode, ReplayBuffer};
pub use engine::{
    compose_batch, joint_train, reptile_update, train, EngineError, TrainConfig, TrainCounters, TrainMode,
    TrainObserver, TrainOutcome,
};
pub use experiment::{Arm, DeskSetup};
pub use metrics::{
    fit_power_law, forgetting_score, grad_alignment, learned_loss, retained_loss, EvalRecord, MetricsError,
    MetricsLog, PowerLawFit,
};
pub use model::{loss, loss_and_grad, Gradients, ModelDims, ModelError, ModelParams};
pub use optim::{adamw_step, AdamWConfig, AdamWState, OptimError, ScheduleConfig};
pub use sample::{SampleBatch, TokenId};
pub use stream::{make_task, sample_sequences, Cursor, StreamError, TaskSpec, TaskStream};
