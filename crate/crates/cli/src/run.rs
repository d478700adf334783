//! Runs the (seed × size × arm) matrix. Each cell lives in its own directory and is
//! marked complete by a `DONE` file written last, so reruns skip finished cells.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cpt_core::engine::{write_checkpoint, EngineError, TrainCounters, TrainObserver};
use cpt_core::experiment::Arm;
use cpt_core::metrics::{learned_loss, mean_end_of_run_forgetting, retained_loss};
use cpt_core::model::ModelParams;
use cpt_core::optim::AdamWState;
use serde::Serialize;

use crate::config::RunConfig;
use crate::csvio::{self, CellKey, HEADER};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const DONE_FILE: &str = "DONE";
pub const CELLS_DIR: &str = "cells";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub seed: u64,
    pub hidden_dim: usize,
    pub arm: Arm,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("seed{}_h{}_{}", self.seed, self.hidden_dim, self.arm)
    }

    pub fn parse(name: &str) -> Option<Self> {
        let rest = name.strip_prefix("seed")?;
        let (seed, rest) = rest.split_once("_h")?;
        let (hidden, arm) = rest.split_once('_')?;
        Some(Self { seed: seed.parse().ok()?, hidden_dim: hidden.parse().ok()?, arm: arm.parse().ok()? })
    }
}

/// Every cell of the config, in canonical order (seed, then size, then arm).
pub fn cells(cfg: &RunConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        for &hidden_dim in &cfg.hidden_dims {
            for &arm in &cfg.arms {
                out.push(Cell { seed, hidden_dim, arm });
            }
        }
    }
    out.sort();
    out
}

pub fn cell_dir(out: &Path, cell: &Cell) -> PathBuf {
    out.join(CELLS_DIR).join(cell.dir_name())
}

/// Cells in `out` that carry a completion marker, in canonical order.
pub fn completed_cells(out: &Path) -> Result<Vec<Cell>, CliError> {
    let dir = out.join(CELLS_DIR);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut done = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| CliError::Io(dir.clone(), e))? {
        let entry = entry.map_err(|e| CliError::Io(dir.clone(), e))?;
        let name = entry.file_name();
        if let Some(cell) = name.to_str().and_then(Cell::parse) {
            if entry.path().join(DONE_FILE).exists() {
                done.push(cell);
            }
        }
    }
    done.sort();
    Ok(done)
}

#[derive(Serialize)]
struct CellSummary {
    seed: u64,
    arm: Arm,
    hidden_dim: usize,
    model_size: usize,
    alpha: f64,
    reptile_k: u64,
    reptile_eps: f64,
    retained_loss: f64,
    learned_loss: f64,
    mean_forgetting: f64,
    counters: TrainCounters,
}

/// Writes `step_{n}/params.bin` and `step_{n}/optim.bin` at every task boundary.
struct Checkpointer {
    dir: PathBuf,
    last_step: Option<u64>,
    error: Option<EngineError>,
}

impl TrainObserver for Checkpointer {
    fn on_task_end(&mut self, _task: usize, step: u64, params: &ModelParams, optimizer: &AdamWState) {
        if self.error.is_some() || self.last_step == Some(step) {
            return;
        }
        self.last_step = Some(step);
        if let Err(e) = write_checkpoint(&self.dir.join(format!("step_{step}")), params, optimizer) {
            self.error = Some(e);
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Discard unfinished cells instead of refusing to continue.
    pub resume: bool,
}

#[derive(Debug, Default)]
pub struct RunSummary {
    pub ran: Vec<Cell>,
    pub skipped: Vec<Cell>,
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(path.to_path_buf(), e)
}

/// Creates the output directory, or checks that an existing one was produced under the
/// same experiment settings.
fn prepare_output(cfg: &RunConfig) -> Result<(), CliError> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out.join(CELLS_DIR)).map_err(|e| CliError::Unwritable(out.clone(), e))?;
    let probe = out.join(".write_probe");
    fs::write(&probe, b"").map_err(|e| CliError::Unwritable(out.clone(), e))?;
    fs::remove_file(&probe).map_err(io(&probe))?;

    let path = out.join(CONFIG_FILE);
    if path.exists() {
        let existing = RunConfig::load(&path)?;
        if existing.snapshot() != cfg.snapshot() {
            return Err(CliError::ConfigMismatch(out.clone()));
        }
    } else {
        fs::write(&path, cfg.to_toml()).map_err(io(&path))?;
    }
    Ok(())
}

/// Rewrites the top-level CSV from the completed cells.
pub fn rebuild_metrics(out: &Path) -> Result<usize, CliError> {
    let path = out.join(METRICS_FILE);
    let tmp = out.join("metrics.csv.tmp");
    let mut bytes = format!("{HEADER}\n").into_bytes();
    let done = completed_cells(out)?;
    for cell in &done {
        let cell_csv = cell_dir(out, cell).join(METRICS_FILE);
        let text = fs::read(&cell_csv).map_err(io(&cell_csv))?;
        let body = text.iter().position(|&b| b == b'\n').map_or(&text[..0], |i| &text[i + 1..]);
        bytes.extend_from_slice(body);
    }
    fs::write(&tmp, &bytes).map_err(io(&tmp))?;
    fs::rename(&tmp, &path).map_err(io(&path))?;
    Ok(done.len())
}

fn run_cell(cfg: &RunConfig, cell: &Cell) -> Result<Vec<u8>, CliError> {
    let setup = cfg.setup();
    let dir = cell_dir(&cfg.output_dir, cell);
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let engine_err = |source| CliError::Engine { cell: cell.dir_name(), source };

    let mut checkpointer = Checkpointer { dir: dir.clone(), last_step: None, error: None };
    let outcome = setup.run_cell(cell.arm, cell.hidden_dim, cell.seed, &dir, &mut checkpointer).map_err(engine_err)?;
    if let Some(e) = checkpointer.error {
        return Err(engine_err(e));
    }

    let uses_reptile = cell.arm.mode().uses_reptile();
    let key = CellKey {
        seed: cell.seed,
        arm: cell.arm,
        model_size: outcome.params.dims.param_count(),
        alpha: cell.arm.alpha(),
        reptile_k: if uses_reptile { setup.reptile_interval } else { 0 },
        reptile_eps: if uses_reptile { setup.reptile_rate } else { 0.0 },
    };
    let rows = csvio::rows_for(key, &outcome.log);
    csvio::write_csv(&dir.join(METRICS_FILE), &rows)?;

    let metric = |r: Result<f64, _>| r.map_err(|e: cpt_core::metrics::MetricsError| CliError::Metrics(dir.clone(), e.to_string()));
    let summary = CellSummary {
        seed: cell.seed,
        arm: cell.arm,
        hidden_dim: cell.hidden_dim,
        model_size: key.model_size,
        alpha: key.alpha,
        reptile_k: key.reptile_k,
        reptile_eps: key.reptile_eps,
        retained_loss: metric(retained_loss(&outcome.log))?,
        learned_loss: metric(learned_loss(&outcome.log))?,
        mean_forgetting: metric(mean_end_of_run_forgetting(&outcome.log))?,
        counters: outcome.counters,
    };
    let summary_path = dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .map_err(io(&summary_path))?;

    let buffer = dir.join("buffer");
    if !cfg.keep_buffers && buffer.exists() {
        fs::remove_dir_all(&buffer).map_err(io(&buffer))?;
    }
    let done = dir.join(DONE_FILE);
    fs::write(&done, b"").map_err(io(&done))?;
    csvio::encode_rows(&rows)
}

/// Runs every unfinished cell of `cfg`, appending each finished cell's rows to the
/// top-level CSV. `progress` receives one line per cell.
pub fn run_experiment(cfg: &RunConfig, opts: RunOptions, progress: &mut dyn FnMut(&str)) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    prepare_output(cfg)?;
    let out = &cfg.output_dir;
    let todo = cells(cfg);
    for cell in &todo {
        let dir = cell_dir(out, cell);
        if dir.exists() && !dir.join(DONE_FILE).exists() {
            if !opts.resume {
                return Err(CliError::UnfinishedCell(dir));
            }
            progress(&format!("discarding unfinished {}", cell.dir_name()));
            fs::remove_dir_all(&dir).map_err(io(&dir))?;
        }
    }
    rebuild_metrics(out)?;

    let csv_path = out.join(METRICS_FILE);
    let mut summary = RunSummary::default();
    let total = todo.len();
    for (i, cell) in todo.into_iter().enumerate() {
        if cell_dir(out, &cell).join(DONE_FILE).exists() {
            progress(&format!("[{}/{total}] {} already complete", i + 1, cell.dir_name()));
            summary.skipped.push(cell);
            continue;
        }
        let start = Instant::now();
        let rows = run_cell(cfg, &cell)?;
        let mut f = OpenOptions::new().append(true).open(&csv_path).map_err(io(&csv_path))?;
        f.write_all(&rows).map_err(io(&csv_path))?;
        progress(&format!("[{}/{total}] {} done in {:.1} s", i + 1, cell.dir_name(), start.elapsed().as_secs_f64()));
        summary.ran.push(cell);
    }
    Ok(summary)
}
