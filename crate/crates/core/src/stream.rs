//! Synthetic task sequence: each task is a first-order Markov "language" over a shared
//! vocabulary, visited once and in order.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sample::{SampleBatch, TokenId};

#[derive(Debug, Error, PartialEq)]
pub enum StreamError {
    #[error("vocab_size must be >= 2, got {0}")]
    VocabTooSmall(usize),
    #[error("concentration must be positive and finite, got {0}")]
    BadConcentration(f64),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Splitmix64 finalizer, used to derive independent seeds from structured keys.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z ^= p;
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const DOMAIN_TRAIN: u64 = 0x0074_7261_696e;
const DOMAIN_VALID: u64 = 0x0076_616c_6964;
const DOMAIN_JOINT: u64 = 0x006a_6f69_6e74;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Row-stochastic, `transition[a][b] = P(next = b | current = a)`.
    pub transition: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub token_budget: u64,
}

fn dirichlet_row(rng: &mut ChaCha8Rng, gamma: &Gamma<f64>, len: usize) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..len).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = raw.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return raw.into_iter().map(|x| x / sum).collect();
        }
    }
}

/// A task whose transition rows are independent symmetric-Dirichlet draws. The initial
/// distribution is uniform.
pub fn make_task(seed: u64, vocab_size: usize, concentration: f64) -> Result<TaskSpec, StreamError> {
    if vocab_size < 2 {
        return Err(StreamError::VocabTooSmall(vocab_size));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(StreamError::BadConcentration(concentration));
    }
    let gamma = Gamma::new(concentration, 1.0).map_err(|_| StreamError::BadConcentration(concentration))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transition = (0..vocab_size).map(|_| dirichlet_row(&mut rng, &gamma, vocab_size)).collect();
    Ok(TaskSpec {
        task_id: 0,
        transition,
        initial: vec![1.0 / vocab_size as f64; vocab_size],
        token_budget: 0,
    })
}

impl TaskSpec {
    pub fn with_id(mut self, task_id: usize) -> Self {
        self.task_id = task_id;
        self
    }

    pub fn with_budget(mut self, token_budget: u64) -> Self {
        self.token_budget = token_budget;
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.initial.len()
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        let v = self.vocab_size();
        if v < 2 {
            return Err(StreamError::VocabTooSmall(v));
        }
        let check = |what: String, row: &[f64]| -> Result<(), StreamError> {
            if row.len() != v {
                return Err(StreamError::InvalidTask(format!("{what} has length {}, expected {v}", row.len())));
            }
            if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
                return Err(StreamError::InvalidTask(format!("{what} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(StreamError::InvalidTask(format!("{what} sums to {sum}")));
            }
            Ok(())
        };
        check("initial".into(), &self.initial)?;
        if self.transition.len() != v {
            return Err(StreamError::InvalidTask(format!("transition has {} rows, expected {v}", self.transition.len())));
        }
        for (i, row) in self.transition.iter().enumerate() {
            check(format!("transition row {i}"), row)?;
        }
        Ok(())
    }

    /// Whole samples this task contributes; a partial trailing sample is dropped.
    pub fn num_samples(&self, seq_len: usize) -> u64 {
        self.token_budget / seq_len as u64
    }

    /// Mean over rows of KL(self.transition[a] || other.transition[a]), in nats.
    pub fn mean_row_kl(&self, other: &TaskSpec) -> f64 {
        let v = self.vocab_size();
        let total: f64 = self
            .transition
            .iter()
            .zip(&other.transition)
            .map(|(p, q)| {
                p.iter()
                    .zip(q)
                    .filter(|(&pi, _)| pi > 0.0)
                    .map(|(&pi, &qi)| pi * (pi / qi).ln())
                    .sum::<f64>()
            })
            .sum();
        total / v as f64
    }
}

/// Cumulative tables for O(log V) categorical draws.
struct Sampler {
    initial: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .map(|&x| {
            acc += x;
            acc
        })
        .collect()
}

fn draw(cum: &[f64], rng: &mut impl Rng) -> TokenId {
    let total = *cum.last().expect("nonempty distribution");
    let u = rng.random::<f64>() * total;
    let idx = cum.partition_point(|&c| c <= u);
    // u can land on the top edge through rounding; fall back to the last positive entry
    let idx = if idx >= cum.len() {
        let mut j = cum.len() - 1;
        while j > 0 && cum[j] == cum[j - 1] {
            j -= 1;
        }
        j
    } else {
        idx
    };
    idx as TokenId
}

impl Sampler {
    fn new(task: &TaskSpec) -> Self {
        Self { initial: cumulative(&task.initial), rows: task.transition.iter().map(|r| cumulative(r)).collect() }
    }

    fn rollout(&self, seq_len: usize, rng: &mut impl Rng, out: &mut Vec<TokenId>) {
        let mut tok = draw(&self.initial, rng);
        out.push(tok);
        for _ in 1..seq_len {
            tok = draw(&self.rows[tok as usize], rng);
            out.push(tok);
        }
    }
}

/// `n` independent Markov rollouts of length `seq_len`, deterministic in `seed`.
pub fn sample_sequences(task: &TaskSpec, n: usize, seq_len: usize, seed: u64) -> Result<SampleBatch, StreamError> {
    if n == 0 || seq_len == 0 {
        return Err(StreamError::Argument(format!("need n >= 1 and seq_len >= 1, got n={n}, seq_len={seq_len}")));
    }
    let sampler = Sampler::new(task);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::with_capacity(n * seq_len);
    for _ in 0..n {
        sampler.rollout(seq_len, &mut rng, &mut tokens);
    }
    Ok(SampleBatch::new(seq_len, tokens))
}

/// Position in a stream: task index and sample index within that task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cursor {
    pub task: usize,
    pub sample: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Incoming {
    pub batch: SampleBatch,
    pub task_id: usize,
    pub cursor: Cursor,
    /// True when this chunk exhausted the task's budget.
    pub task_finished: bool,
}

/// An ordered sequence of tasks visited once. Every sample is generated from its own
/// derived seed, so the contents do not depend on how the stream is chunked.
pub struct TaskStream {
    tasks: Vec<TaskSpec>,
    samplers: Vec<Sampler>,
    seq_len: usize,
    seed: u64,
}

impl TaskStream {
    pub fn new(tasks: Vec<TaskSpec>, seq_len: usize, seed: u64) -> Result<Self, StreamError> {
        if tasks.is_empty() {
            return Err(StreamError::Argument("stream needs at least one task".into()));
        }
        if seq_len == 0 {
            return Err(StreamError::Argument("seq_len must be positive".into()));
        }
        let vocab = tasks[0].vocab_size();
        for t in &tasks {
            t.validate()?;
            if t.vocab_size() != vocab {
                return Err(StreamError::InvalidTask("tasks must share one vocabulary".into()));
            }
        }
        let samplers = tasks.iter().map(Sampler::new).collect();
        Ok(Self { tasks, samplers, seq_len, seed })
    }

    /// Tasks from seeds `base_seed + i`, with equal budgets.
    pub fn synthetic(
        num_tasks: usize,
        vocab_size: usize,
        concentration: f64,
        token_budget: u64,
        seq_len: usize,
        task_seed: u64,
        stream_seed: u64,
    ) -> Result<Self, StreamError> {
        let tasks = (0..num_tasks)
            .map(|i| {
                make_task(mix_seed(&[task_seed, i as u64]), vocab_size, concentration)
                    .map(|t| t.with_id(i).with_budget(token_budget))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(tasks, seq_len, stream_seed)
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab_size(&self) -> usize {
        self.tasks[0].vocab_size()
    }

    pub fn samples_in_task(&self, task: usize) -> u64 {
        self.tasks[task].num_samples(self.seq_len)
    }

    pub fn total_samples(&self) -> u64 {
        (0..self.tasks.len()).map(|t| self.samples_in_task(t)).sum()
    }

    fn sample_into(&self, domain: u64, task: usize, index: u64, out: &mut Vec<TokenId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[domain, self.seed, task as u64, index]));
        self.samplers[task].rollout(self.seq_len, &mut rng, out);
    }

    /// The training sample `index` of `task`.
    pub fn training_sample(&self, task: usize, index: u64) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.seq_len);
        self.sample_into(DOMAIN_TRAIN, task, index, &mut out);
        out
    }

    /// Held-out rows for `task`, drawn from a seed domain disjoint from training.
    pub fn validation_set(&self, task: usize, rows: usize) -> SampleBatch {
        let mut tokens = Vec::with_capacity(rows * self.seq_len);
        for i in 0..rows as u64 {
            self.sample_into(DOMAIN_VALID, task, i, &mut tokens);
        }
        SampleBatch::new(self.seq_len, tokens)
    }

    fn normalize(&self, mut cursor: Cursor) -> Cursor {
        while cursor.task < self.tasks.len() && cursor.sample >= self.samples_in_task(cursor.task) {
            cursor = Cursor { task: cursor.task + 1, sample: 0 };
        }
        cursor
    }

    pub fn is_finished(&self, cursor: Cursor) -> bool {
        self.normalize(cursor).task >= self.tasks.len()
    }

    /// Up to `max_rows` consecutive samples of the current task. A chunk never spans two
    /// tasks; a cursor sitting on a boundary moves to the next task first. `None` marks
    /// the end of the stream.
    pub fn next_incoming(&self, cursor: Cursor, max_rows: usize) -> Option<Incoming> {
        assert!(max_rows > 0, "max_rows must be positive");
        let cursor = self.normalize(cursor);
        if cursor.task >= self.tasks.len() {
            return None;
        }
        let available = self.samples_in_task(cursor.task) - cursor.sample;
        let take = available.min(max_rows as u64);
        let mut tokens = Vec::with_capacity(take as usize * self.seq_len);
        for i in 0..take {
            self.sample_into(DOMAIN_TRAIN, cursor.task, cursor.sample + i, &mut tokens);
        }
        Some(Incoming {
            batch: SampleBatch::new(self.seq_len, tokens),
            task_id: self.tasks[cursor.task].task_id,
            cursor: Cursor { task: cursor.task, sample: cursor.sample + take },
            task_finished: take == available,
        })
    }

    /// Every training sample of every task as (task, index), uniformly shuffled.
    pub fn joint_order(&self) -> Vec<(usize, u64)> {
        let mut order: Vec<(usize, u64)> = (0..self.tasks.len())
            .flat_map(|t| (0..self.samples_in_task(t)).map(move |i| (t, i)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[DOMAIN_JOINT, self.seed]));
        order.shuffle(&mut rng);
        order
    }

    pub fn batch_of(&self, items: &[(usize, u64)]) -> SampleBatch {
        let mut tokens = Vec::with_capacity(items.len() * self.seq_len);
        for &(t, i) in items {
            self.sample_into(DOMAIN_TRAIN, t, i, &mut tokens);
        }
        SampleBatch::new(self.seq_len, tokens)
    }
}
