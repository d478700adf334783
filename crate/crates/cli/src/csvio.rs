//! The metrics CSV: one row per (cell, evaluation step, evaluated task).

use std::fs::File;
use std::io::Write;
use std::path::Path;

use cpt_core::experiment::Arm;
use cpt_core::metrics::MetricsLog;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const HEADER: &str = "seed,arm,model_size,alpha,reptile_k,reptile_eps,update_step,eval_task,train_task,val_loss_nats";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub arm: Arm,
    /// Parameter count of the model.
    pub model_size: usize,
    pub alpha: f64,
    /// Zero for arms without Reptile.
    pub reptile_k: u64,
    pub reptile_eps: f64,
    pub update_step: u64,
    pub eval_task: usize,
    /// Empty for the joint arm.
    pub train_task: Option<usize>,
    pub val_loss_nats: f64,
}

/// Identifies a cell's rows inside the CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellKey {
    pub seed: u64,
    pub arm: Arm,
    pub model_size: usize,
    pub alpha: f64,
    pub reptile_k: u64,
    pub reptile_eps: f64,
}

pub fn rows_for(key: CellKey, log: &MetricsLog) -> Vec<MetricsRow> {
    log.records
        .iter()
        .map(|r| MetricsRow {
            seed: key.seed,
            arm: key.arm,
            model_size: key.model_size,
            alpha: key.alpha,
            reptile_k: key.reptile_k,
            reptile_eps: key.reptile_eps,
            update_step: r.update_step,
            eval_task: r.eval_task,
            train_task: r.train_task,
            val_loss_nats: r.val_loss,
        })
        .collect()
}

/// Rows serialized without the header line.
pub fn encode_rows(rows: &[MetricsRow]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| CliError::Csv(e.into_error().into()))
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), CliError> {
    let io = |e| CliError::Io(path.to_path_buf(), e);
    let mut f = File::create(path).map_err(io)?;
    writeln!(f, "{HEADER}").map_err(io)?;
    f.write_all(&encode_rows(rows)?).map_err(io)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != HEADER {
        return Err(CliError::Metrics(path.to_path_buf(), format!("unexpected header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(CliError::from)).collect()
}
