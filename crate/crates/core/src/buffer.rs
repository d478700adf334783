//! Disk-backed replay buffer.
//!
//! Rows are fixed-width token sequences stored as raw little-endian integers in `F`
//! files (`buffer_{i}.bin`, no header) and addressed by offset
//! `row * seq_len * dtype_bytes`. A prefetcher samples a random non-empty file, reads
//! its whole filled region and pushes it onto a bounded queue; `get_batch` pops one
//! item and subsamples rows from it. Buffer state (`sizes`, `total`) is persisted to
//! `metadata.json` so a restarted process resumes with the same content.
//!
//! Concurrency: one writer (the training loop) and one prefetch reader. The file
//! contents and `sizes` are guarded by one `RwLock`; the writer holds it exclusively
//! while writing, the reader holds it shared while reading a file.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender, TrySendError};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sample::{SampleBatch, TokenId};
use crate::stream::mix_seed;

pub const METADATA_FILE: &str = "metadata.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("invalid buffer config: {0}")]
    InvalidConfig(String),
    #[error("cannot set up buffer directory {path}: {source}")]
    Setup { path: PathBuf, source: std::io::Error },
    #[error("existing store is incompatible: {0}")]
    Incompatible(String),
    #[error("batch of {rows} rows exceeds file_size {file_size}")]
    OversizeBatch { rows: usize, file_size: usize },
    #[error("batch row width {got} does not match seq_len {expected}")]
    RowWidth { got: usize, expected: usize },
    #[error("token id {token} does not fit in {dtype_bytes} bytes")]
    TokenTooWide { token: TokenId, dtype_bytes: u8 },
    #[error("fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("malformed metadata: {0}")]
    Metadata(String),
    #[error("buffer I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefetchMode {
    /// A background thread keeps the queue topped up.
    #[default]
    Background,
    /// No thread; `get_batch` refills the queue inline when it is empty. Fully
    /// deterministic for a given seed.
    Synchronous,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferConfig {
    /// Total capacity in tokens.
    pub capacity_tokens: u64,
    /// Rows per file.
    pub file_size: usize,
    pub seq_len: usize,
    pub data_dir: PathBuf,
    /// Maximum number of prefetched items held in memory.
    pub queue_capacity: usize,
    /// Bytes per token on disk: 2 or 4.
    pub dtype_bytes: u8,
    /// How long the prefetcher sleeps when the queue is full or nothing is sampleable.
    pub idle_interval: Duration,
    /// Persist metadata after every `metadata_every` adds.
    pub metadata_every: usize,
    pub prefetch_mode: PrefetchMode,
    pub seed: u64,
}

impl BufferConfig {
    pub fn new(data_dir: impl Into<PathBuf>, capacity_tokens: u64, file_size: usize, seq_len: usize) -> Self {
        Self {
            capacity_tokens,
            file_size,
            seq_len,
            data_dir: data_dir.into(),
            queue_capacity: 4,
            dtype_bytes: 4,
            idle_interval: Duration::from_millis(100),
            metadata_every: 1,
            prefetch_mode: PrefetchMode::Background,
            seed: 0,
        }
    }

    pub fn file_count(&self) -> usize {
        (self.capacity_tokens / (self.file_size as u64 * self.seq_len as u64)) as usize
    }

    pub fn row_bytes(&self) -> usize {
        self.seq_len * self.dtype_bytes as usize
    }

    pub fn validate(&self) -> Result<(), BufferError> {
        let bad = |m: String| Err(BufferError::InvalidConfig(m));
        if self.file_size == 0 || self.seq_len == 0 {
            return bad("file_size and seq_len must be positive".into());
        }
        if self.capacity_tokens < self.file_size as u64 * self.seq_len as u64 {
            return bad(format!(
                "capacity_tokens {} is below one file ({} rows x {} tokens)",
                self.capacity_tokens, self.file_size, self.seq_len
            ));
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be >= 1".into());
        }
        if self.dtype_bytes != 2 && self.dtype_bytes != 4 {
            return bad(format!("dtype_bytes must be 2 or 4, got {}", self.dtype_bytes));
        }
        if self.metadata_every == 0 {
            return bad("metadata_every must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BufferState {
    /// Filled rows per file.
    pub sizes: Vec<u64>,
    /// Rows ever added, including overwrites.
    pub total: u64,
}

impl BufferState {
    pub fn file_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn resident_rows(&self) -> u64 {
        self.sizes.iter().sum()
    }
}

/// On-disk form of `metadata.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub capacity_tokens: u64,
    pub file_size: u64,
    pub seq_len: u64,
    pub dtype_bytes: u8,
    pub sizes: Vec<u64>,
    pub total: u64,
    pub format_version: u32,
}

impl Metadata {
    pub fn state(&self) -> BufferState {
        BufferState { sizes: self.sizes.clone(), total: self.total }
    }
}

pub fn save_metadata(path: &Path, meta: &Metadata) -> Result<(), BufferError> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(meta).map_err(|e| BufferError::Metadata(e.to_string()))?;
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_metadata(path: &Path) -> Result<Metadata, BufferError> {
    let text = fs::read_to_string(path)?;
    let meta: Metadata = serde_json::from_str(&text).map_err(|e| BufferError::Metadata(e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(BufferError::Metadata(format!(
            "field `format_version`: unsupported value {}",
            meta.format_version
        )));
    }
    Ok(meta)
}

/// One queued unit of prefetched data: every filled row of one file.
#[derive(Clone, Debug)]
pub struct PrefetchItem {
    pub samples: SampleBatch,
    pub file_index: usize,
}

fn file_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("buffer_{i}.bin"))
}

fn encode_rows(tokens: &[TokenId], dtype_bytes: u8, out: &mut Vec<u8>) {
    out.reserve(tokens.len() * dtype_bytes as usize);
    for &t in tokens {
        match dtype_bytes {
            2 => out.extend_from_slice(&(t as u16).to_le_bytes()),
            _ => out.extend_from_slice(&t.to_le_bytes()),
        }
    }
}

fn decode_rows(bytes: &[u8], dtype_bytes: u8) -> Vec<TokenId> {
    match dtype_bytes {
        2 => bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as TokenId).collect(),
        _ => bytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
    }
}

/// State visible to the prefetcher.
struct Shared {
    dir: PathBuf,
    seq_len: usize,
    dtype_bytes: u8,
    state: RwLock<BufferState>,
    prefetch_rng: Mutex<ChaCha8Rng>,
    enqueued: AtomicU64,
    max_occupancy: AtomicU64,
    stop: AtomicBool,
}

impl Shared {
    /// Reads a uniformly random non-empty file; `None` when every file is empty.
    fn read_random_file(&self) -> Result<Option<PrefetchItem>, BufferError> {
        let state = self.state.read().expect("buffer state lock poisoned");
        let nonempty: Vec<usize> = (0..state.sizes.len()).filter(|&i| state.sizes[i] > 0).collect();
        if nonempty.is_empty() {
            return Ok(None);
        }
        let i = {
            let mut rng = self.prefetch_rng.lock().expect("prefetch rng lock poisoned");
            nonempty[rng.random_range(0..nonempty.len())]
        };
        let rows = state.sizes[i] as usize;
        let mut bytes = vec![0u8; rows * self.seq_len * self.dtype_bytes as usize];
        File::open(file_path(&self.dir, i))?.read_exact(&mut bytes)?;
        drop(state);
        Ok(Some(PrefetchItem {
            samples: SampleBatch::new(self.seq_len, decode_rows(&bytes, self.dtype_bytes)),
            file_index: i,
        }))
    }

    fn push(&self, tx: &Sender<PrefetchItem>, item: PrefetchItem) -> Result<(), TrySendError<PrefetchItem>> {
        tx.try_send(item)?;
        self.enqueued.fetch_add(1, Ordering::SeqCst);
        self.max_occupancy.fetch_max(tx.len() as u64, Ordering::SeqCst);
        Ok(())
    }
}

fn prefetch_loop(shared: Arc<Shared>, tx: Sender<PrefetchItem>, idle: Duration) {
    while !shared.stop.load(Ordering::SeqCst) {
        if tx.is_full() {
            std::thread::sleep(idle);
            continue;
        }
        match shared.read_random_file() {
            Ok(Some(item)) => {
                // the single consumer only ever removes items, so a full queue here means
                // it filled up since the check above: drop the item and idle
                if shared.push(&tx, item).is_err() {
                    std::thread::sleep(idle);
                }
            }
            Ok(None) | Err(_) => std::thread::sleep(idle),
        }
    }
}

pub struct ReplayBuffer {
    config: BufferConfig,
    shared: Arc<Shared>,
    tx: Sender<PrefetchItem>,
    rx: Receiver<PrefetchItem>,
    worker: Option<JoinHandle<()>>,
    files: Vec<File>,
    rng: ChaCha8Rng,
    adds_since_save: usize,
}

impl ReplayBuffer {
    /// Opens or creates the store in `config.data_dir`. Prefetching is not started.
    pub fn init(config: BufferConfig) -> Result<Self, BufferError> {
        config.validate()?;
        let dir = config.data_dir.clone();
        let setup = |source| BufferError::Setup { path: dir.clone(), source };
        fs::create_dir_all(&dir).map_err(setup)?;
        let f = config.file_count();
        let mut files = Vec::with_capacity(f);
        for i in 0..f {
            files.push(
                OpenOptions::new()
                    .create(true)
                    .truncate(false)
                    .write(true)
                    .open(file_path(&dir, i))
                    .map_err(setup)?,
            );
        }
        let meta_path = dir.join(METADATA_FILE);
        let state = if meta_path.exists() {
            let meta = load_metadata(&meta_path)?;
            let mut problems = Vec::new();
            if meta.dtype_bytes != config.dtype_bytes {
                problems.push(format!("dtype_bytes {} != {}", meta.dtype_bytes, config.dtype_bytes));
            }
            if meta.seq_len != config.seq_len as u64 {
                problems.push(format!("seq_len {} != {}", meta.seq_len, config.seq_len));
            }
            if meta.file_size != config.file_size as u64 {
                problems.push(format!("file_size {} != {}", meta.file_size, config.file_size));
            }
            if meta.capacity_tokens != config.capacity_tokens {
                problems.push(format!("capacity_tokens {} != {}", meta.capacity_tokens, config.capacity_tokens));
            }
            if meta.sizes.len() != f {
                problems.push(format!("{} file sizes recorded, expected {f}", meta.sizes.len()));
            }
            if meta.sizes.iter().any(|&s| s > config.file_size as u64) {
                problems.push("a recorded file size exceeds file_size".into());
            }
            if !problems.is_empty() {
                return Err(BufferError::Incompatible(problems.join("; ")));
            }
            for (i, &rows) in meta.sizes.iter().enumerate() {
                let len = fs::metadata(file_path(&dir, i))?.len();
                if len < rows * config.row_bytes() as u64 {
                    return Err(BufferError::Incompatible(format!(
                        "buffer_{i}.bin holds {len} bytes, metadata claims {rows} rows"
                    )));
                }
            }
            meta.state()
        } else {
            let state = BufferState { sizes: vec![0; f], total: 0 };
            save_metadata(&meta_path, &Self::metadata_for(&config, &state)).map_err(|e| match e {
                BufferError::Io(source) => setup(source),
                other => other,
            })?;
            state
        };
        let (tx, rx) = crossbeam_channel::bounded(config.queue_capacity);
        let shared = Arc::new(Shared {
            dir,
            seq_len: config.seq_len,
            dtype_bytes: config.dtype_bytes,
            state: RwLock::new(state),
            prefetch_rng: Mutex::new(ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 1]))),
            enqueued: AtomicU64::new(0),
            max_occupancy: AtomicU64::new(0),
            stop: AtomicBool::new(false),
        });
        let rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 2]));
        Ok(Self { config, shared, tx, rx, worker: None, files, rng, adds_since_save: 0 })
    }

    fn metadata_for(config: &BufferConfig, state: &BufferState) -> Metadata {
        Metadata {
            capacity_tokens: config.capacity_tokens,
            file_size: config.file_size as u64,
            seq_len: config.seq_len as u64,
            dtype_bytes: config.dtype_bytes,
            sizes: state.sizes.clone(),
            total: state.total,
            format_version: FORMAT_VERSION,
        }
    }

    pub fn config(&self) -> &BufferConfig {
        &self.config
    }

    pub fn state(&self) -> BufferState {
        self.shared.state.read().expect("buffer state lock poisoned").clone()
    }

    pub fn file_path(&self, i: usize) -> PathBuf {
        file_path(&self.config.data_dir, i)
    }

    pub fn metadata_path(&self) -> PathBuf {
        self.config.data_dir.join(METADATA_FILE)
    }

    pub fn save_metadata(&mut self) -> Result<(), BufferError> {
        let meta = Self::metadata_for(&self.config, &self.state());
        save_metadata(&self.metadata_path(), &meta)?;
        self.adds_since_save = 0;
        Ok(())
    }

    /// Appends `batch` to the first file with room for all of it. When none has room a
    /// uniformly random file is chosen, its remaining room (if any) is filled, and the
    /// rest of the rows overwrite distinct uniformly random previously filled slots.
    pub fn add(&mut self, batch: &SampleBatch) -> Result<(), BufferError> {
        let n = batch.num_rows();
        if n == 0 {
            return Ok(());
        }
        if batch.seq_len() != self.config.seq_len {
            return Err(BufferError::RowWidth { got: batch.seq_len(), expected: self.config.seq_len });
        }
        if n > self.config.file_size {
            return Err(BufferError::OversizeBatch { rows: n, file_size: self.config.file_size });
        }
        if self.config.dtype_bytes == 2 {
            if let Some(max) = batch.max_token().filter(|&t| t > u16::MAX as TokenId) {
                return Err(BufferError::TokenTooWide { token: max, dtype_bytes: 2 });
            }
        }
        let row_bytes = self.config.row_bytes();
        let cap = self.config.file_size as u64;
        let mut bytes = Vec::new();
        encode_rows(batch.tokens(), self.config.dtype_bytes, &mut bytes);

        let mut state = self.shared.state.write().expect("buffer state lock poisoned");
        let target = state.sizes.iter().position(|&s| s + n as u64 <= cap);
        let i = match target {
            Some(i) => i,
            None => self.rng.random_range(0..state.sizes.len()),
        };
        let file = &mut self.files[i];
        let filled = state.sizes[i];
        let append = ((cap - filled) as usize).min(n);
        if append > 0 {
            file.seek(SeekFrom::Start(filled * row_bytes as u64))?;
            file.write_all(&bytes[..append * row_bytes])?;
        }
        let rest = n - append;
        if rest > 0 {
            // cap >= n guarantees filled >= rest
            let slots = index::sample(&mut self.rng, filled as usize, rest);
            for (k, slot) in slots.into_iter().enumerate() {
                let src = &bytes[(append + k) * row_bytes..(append + k + 1) * row_bytes];
                file.seek(SeekFrom::Start((slot * row_bytes) as u64))?;
                file.write_all(src)?;
            }
        }
        state.sizes[i] += append as u64;
        state.total += n as u64;
        drop(state);

        self.adds_since_save += 1;
        if self.adds_since_save >= self.config.metadata_every {
            self.save_metadata()?;
        }
        Ok(())
    }

    /// Launches the background prefetcher. Idempotent; does nothing in synchronous mode.
    pub fn start_prefetch(&mut self) {
        if self.worker.is_some() || self.config.prefetch_mode == PrefetchMode::Synchronous {
            return;
        }
        let shared = Arc::clone(&self.shared);
        let tx = self.tx.clone();
        let idle = self.config.idle_interval;
        self.worker = Some(
            std::thread::Builder::new()
                .name("replay-prefetch".into())
                .spawn(move || prefetch_loop(shared, tx, idle))
                .expect("spawn prefetch thread"),
        );
    }

    pub fn is_prefetching(&self) -> bool {
        self.worker.is_some()
    }

    /// Reads one random non-empty file onto the queue from the calling thread. Returns
    /// false when the queue is full or the buffer is empty.
    pub fn prefetch_once(&self) -> Result<bool, BufferError> {
        if self.tx.is_full() {
            return Ok(false);
        }
        match self.shared.read_random_file()? {
            Some(item) => Ok(self.shared.push(&self.tx, item).is_ok()),
            None => Ok(false),
        }
    }

    pub fn queue_len(&self) -> usize {
        self.rx.len()
    }

    pub fn enqueued_count(&self) -> u64 {
        self.shared.enqueued.load(Ordering::SeqCst)
    }

    /// Highest queue occupancy observed right after an enqueue.
    pub fn max_queue_occupancy(&self) -> u64 {
        self.shared.max_occupancy.load(Ordering::SeqCst)
    }

    /// Pops one prefetched item, if any.
    pub fn pop_item(&mut self) -> Result<Option<PrefetchItem>, BufferError> {
        if self.rx.is_empty() && self.config.prefetch_mode == PrefetchMode::Synchronous {
            self.prefetch_once()?;
        }
        Ok(self.rx.try_recv().ok())
    }

    /// `floor(fraction * effective_batch_size)` rows drawn from one popped item, without
    /// replacement when the item is large enough and with replacement otherwise. Returns
    /// an empty batch when nothing is queued.
    pub fn get_batch(&mut self, fraction: f64, effective_batch_size: usize) -> Result<SampleBatch, BufferError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(BufferError::BadFraction(fraction));
        }
        let want = (fraction * effective_batch_size as f64).floor() as usize;
        if want == 0 {
            return Ok(SampleBatch::empty(self.config.seq_len));
        }
        let Some(item) = self.pop_item()? else {
            return Ok(SampleBatch::empty(self.config.seq_len));
        };
        let have = item.samples.num_rows();
        let picks: Vec<usize> = if have >= want {
            index::sample(&mut self.rng, have, want).into_vec()
        } else {
            (0..want).map(|_| self.rng.random_range(0..have)).collect()
        };
        Ok(item.samples.select(&picks))
    }

    /// Stops the prefetcher (if running) and persists metadata.
    pub fn shutdown(&mut self) -> Result<(), BufferError> {
        self.stop_worker();
        self.save_metadata()
    }

    fn stop_worker(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(handle) = self.worker.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for ReplayBuffer {
    fn drop(&mut self) {
        self.stop_worker();
        if self.adds_since_save > 0 {
            let _ = self.save_metadata();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    fn rows(n: usize, seq_len: usize, start: u32) -> SampleBatch {
        SampleBatch::new(seq_len, (0..(n * seq_len) as u32).map(|x| x + start).collect())
    }

    fn cfg(dir: &Path, file_size: usize, files: u64, seq_len: usize) -> BufferConfig {
        let mut c = BufferConfig::new(dir, files * file_size as u64 * seq_len as u64, file_size, seq_len);
        c.idle_interval = Duration::from_millis(5);
        c
    }

    #[test]
    fn file_count_floors() {
        let dir = tempfile::tempdir().unwrap();
        let c = BufferConfig::new(dir.path(), 1000 * 8, 300, 8);
        assert_eq!(c.file_count(), 3);
        let buf = ReplayBuffer::init(c).unwrap();
        assert_eq!(buf.state().file_count(), 3);
        for i in 0..3 {
            assert!(buf.file_path(i).exists());
        }
        let one = BufferConfig::new(dir.path().join("one"), 300 * 8, 300, 8);
        assert_eq!(one.file_count(), 1);
    }

    #[test]
    fn invalid_configs() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(dir.path(), 4, 1, 3);
        c.capacity_tokens = 11;
        assert!(matches!(ReplayBuffer::init(c), Err(BufferError::InvalidConfig(_))));
        let mut c = cfg(dir.path(), 4, 1, 3);
        c.queue_capacity = 0;
        assert!(ReplayBuffer::init(c).is_err());
        let mut c = cfg(dir.path(), 4, 1, 3);
        c.dtype_bytes = 3;
        assert!(ReplayBuffer::init(c).is_err());
    }

    #[test]
    fn unwritable_directory_is_setup_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let c = cfg(&blocker.join("sub"), 4, 1, 3);
        assert!(matches!(ReplayBuffer::init(c), Err(BufferError::Setup { .. })));
    }

    #[test]
    fn first_add_lands_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let mut buf = ReplayBuffer::init(cfg(dir.path(), 10, 2, 4)).unwrap();
        let b = rows(5, 4, 100);
        buf.add(&b).unwrap();
        assert_eq!(buf.state(), BufferState { sizes: vec![5, 0], total: 5 });
        let bytes = fs::read(buf.file_path(0)).unwrap();
        let mut expected = Vec::new();
        encode_rows(b.tokens(), 4, &mut expected);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn fills_to_exact_capacity_then_moves_on() {
        let dir = tempfile::tempdir().unwrap();
        let mut buf = ReplayBuffer::init(cfg(dir.path(), 10, 2, 4)).unwrap();
        buf.add(&rows(8, 4, 0)).unwrap();
        buf.add(&rows(2, 4, 1000)).unwrap();
        assert_eq!(buf.state().sizes, vec![10, 0]);
        buf.add(&rows(1, 4, 2000)).unwrap();
        assert_eq!(buf.state().sizes, vec![10, 1]);
        assert_eq!(buf.state().total, 11);
    }

    #[test]
    fn overwrite_changes_exactly_one_row_slot() {
        let dir = tempfile::tempdir().unwrap();
        let mut buf = ReplayBuffer::init(cfg(dir.path(), 6, 2, 3)).unwrap();
        buf.add(&rows(6, 3, 0)).unwrap();
        buf.add(&rows(6, 3, 100)).unwrap();
        let before: Vec<Vec<u8>> = (0..2).map(|i| fs::read(buf.file_path(i)).unwrap()).collect();
        buf.add(&rows(1, 3, 5000)).unwrap();
        let after: Vec<Vec<u8>> = (0..2).map(|i| fs::read(buf.file_path(i)).unwrap()).collect();
        assert_eq!(buf.state().sizes, vec![6, 6]);
        assert_eq!(buf.state().total, 13);
        let row_bytes = 12;
        let mut changed = 0;
        for (b, a) in before.iter().zip(&after) {
            assert_eq!(a.len(), b.len());
            changed += b.chunks(row_bytes).zip(a.chunks(row_bytes)).filter(|(x, y)| x != y).count();
        }
        assert_eq!(changed, 1);
    }

    #[test]
    fn partial_room_is_filled_before_overwriting() {
        let dir = tempfile::tempdir().unwrap();
        let mut buf = ReplayBuffer::init(cfg(dir.path(), 4, 1, 2)).unwrap();
        buf.add(&rows(3, 2, 0)).unwrap();
        buf.add(&rows(2, 2, 50)).unwrap();
        assert_eq!(buf.state().sizes, vec![4]);
        assert_eq!(buf.state().total, 5);
        let bytes = fs::read(buf.file_path(0)).unwrap();
        assert_eq!(bytes.len(), 4 * 2 * 4);
        let toks = decode_rows(&bytes, 4);
        assert_eq!(&toks[6..8], &[50, 51]);
        assert!(toks.chunks(2).any(|r| r == [52, 53]));
    }

    #[test]
    fn add_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut buf = ReplayBuffer::init(cfg(dir.path(), 4, 1, 2)).unwrap();
        assert!(matches!(buf.add(&rows(5, 2, 0)), Err(BufferError::OversizeBatch { rows: 5, file_size: 4 })));
        assert!(matches!(buf.add(&rows(1, 3, 0)), Err(BufferError::RowWidth { .. })));
    }

    #[test]
    fn two_byte_tokens_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(dir.path(), 4, 1, 2);
        c.dtype_bytes = 2;
        c.prefetch_mode = PrefetchMode::Synchronous;
        let mut buf = ReplayBuffer::init(c).unwrap();
        let b = SampleBatch::from_rows(2, &[[65535, 7]]);
        buf.add(&b).unwrap();
        assert_eq!(fs::read(buf.file_path(0)).unwrap(), vec![0xff, 0xff, 7, 0]);
        assert_eq!(buf.get_batch(1.0, 1).unwrap(), b);
        assert!(matches!(
            buf.add(&SampleBatch::from_rows(2, &[[65536, 0]])),
            Err(BufferError::TokenTooWide { .. })
        ));
    }

    #[test]
    fn get_batch_sizes_and_membership() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(dir.path(), 32, 1, 3);
        c.prefetch_mode = PrefetchMode::Synchronous;
        let mut buf = ReplayBuffer::init(c).unwrap();
        assert!(buf.get_batch(0.5, 8).unwrap().is_empty());
        let b = rows(20, 3, 0);
        buf.add(&b).unwrap();
        let out = buf.get_batch(1.0, 8).unwrap();
        assert_eq!(out.num_rows(), 8);
        let mut seen: Vec<&[u32]> = out.rows().collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8, "rows drawn without replacement");
        for r in out.rows() {
            assert!(b.rows().any(|x| x == r));
        }
        // item has 20 rows, request 30: drawn with replacement
        assert_eq!(buf.get_batch(1.0, 30).unwrap().num_rows(), 30);
        assert_eq!(buf.get_batch(0.25, 4096).unwrap().num_rows(), 1024);
        assert!(matches!(buf.get_batch(0.0, 8), Err(BufferError::BadFraction(_))));
        assert!(matches!(buf.get_batch(1.5, 8), Err(BufferError::BadFraction(_))));
    }

    #[test]
    fn background_queue_fills_to_capacity_and_holds() {
        let dir = tempfile::tempdir().unwrap();
        let mut buf = ReplayBuffer::init(cfg(dir.path(), 8, 1, 2)).unwrap();
        buf.add(&rows(3, 2, 0)).unwrap();
        buf.start_prefetch();
        buf.start_prefetch();
        let deadline = Instant::now() + Duration::from_secs(5);
        while buf.queue_len() < 4 && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(2));
        }
        assert_eq!(buf.queue_len(), 4);
        let produced = buf.enqueued_count();
        std::thread::sleep(Duration::from_millis(60));
        assert_eq!(buf.queue_len(), 4);
        assert_eq!(buf.enqueued_count(), produced, "no enqueues while full");
        assert_eq!(buf.get_batch(1.0, 3).unwrap().num_rows(), 3);
        let deadline = Instant::now() + Duration::from_secs(5);
        while buf.enqueued_count() == produced && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(2));
        }
        assert_eq!(buf.enqueued_count(), produced + 1);
        assert!(buf.max_queue_occupancy() <= 4);
    }

    #[test]
    fn empty_buffer_never_enqueues() {
        let dir = tempfile::tempdir().unwrap();
        let mut buf = ReplayBuffer::init(cfg(dir.path(), 8, 2, 2)).unwrap();
        buf.start_prefetch();
        std::thread::sleep(Duration::from_millis(50));
        assert_eq!(buf.queue_len(), 0);
        assert_eq!(buf.enqueued_count(), 0);
        assert!(buf.get_batch(0.5, 4).unwrap().is_empty());
    }

    #[test]
    fn restart_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), 10, 3, 4);
        let before = {
            let mut buf = ReplayBuffer::init(c.clone()).unwrap();
            buf.add(&rows(5, 4, 0)).unwrap();
            buf.add(&rows(7, 4, 100)).unwrap();
            buf.shutdown().unwrap();
            buf.state()
        };
        let buf = ReplayBuffer::init(c.clone()).unwrap();
        assert_eq!(buf.state(), before);
        assert_eq!(before, BufferState { sizes: vec![5, 7, 0], total: 12 });
        drop(buf);
        let mut other = c.clone();
        other.dtype_bytes = 2;
        assert!(matches!(ReplayBuffer::init(other), Err(BufferError::Incompatible(_))));
        let mut other = c;
        other.seq_len = 5;
        other.capacity_tokens = 3 * 10 * 5;
        assert!(matches!(ReplayBuffer::init(other), Err(BufferError::Incompatible(_))));
    }

    #[test]
    fn metadata_round_trip_and_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(METADATA_FILE);
        let meta = Metadata {
            capacity_tokens: 300,
            file_size: 10,
            seq_len: 10,
            dtype_bytes: 4,
            sizes: vec![5, 0, 0],
            total: 5,
            format_version: 1,
        };
        save_metadata(&path, &meta).unwrap();
        assert_eq!(load_metadata(&path).unwrap(), meta);

        fs::write(&path, r#"{"capacity_tokens":300,"file_size":10,"seq_len":10,"dtype_bytes":4,"total":5,"format_version":1}"#).unwrap();
        let err = load_metadata(&path).unwrap_err().to_string();
        assert!(err.contains("sizes"), "{err}");

        let hand_written = r#"{
            "capacity_tokens": 40, "file_size": 4, "seq_len": 5, "dtype_bytes": 4,
            "sizes": [2, 0], "total": 2, "format_version": 1
        }"#;
        fs::write(&path, hand_written).unwrap();
        assert_eq!(load_metadata(&path).unwrap().state(), BufferState { sizes: vec![2, 0], total: 2 });
    }
}
