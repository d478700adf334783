//! Stability and plasticity metrics over a run's evaluation log, the gradient alignment
//! diagnostic, and inverse power-law fitting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{loss_and_grad, ModelError, ModelParams};
use crate::sample::SampleBatch;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("task {task} has no evaluation at step {step}")]
    MissingRecord { task: usize, step: u64 },
    #[error("forgetting is undefined for the first evaluation of task {0}")]
    NoPastRecord(usize),
    #[error("incomplete log: {0}")]
    IncompleteLog(String),
    #[error("power-law fit needs at least 4 points, got {0}")]
    InsufficientData(usize),
    #[error("invalid fit input: {0}")]
    Argument(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub update_step: u64,
    pub eval_task: usize,
    pub val_loss: f64,
    /// Task being trained when the evaluation ran; `None` for i.i.d. joint training.
    pub train_task: Option<usize>,
}

/// Time-indexed validation losses of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub num_tasks: usize,
    pub records: Vec<EvalRecord>,
    /// `task_boundaries[t]` is the update step at which training on task `t` ended.
    pub task_boundaries: Vec<u64>,
}

impl MetricsLog {
    pub fn new(num_tasks: usize) -> Self {
        Self { num_tasks, records: Vec::new(), task_boundaries: Vec::new() }
    }

    pub fn push(&mut self, record: EvalRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.update_step <= record.update_step));
        self.records.push(record);
    }

    pub fn final_step(&self) -> Option<u64> {
        self.records.last().map(|r| r.update_step)
    }

    pub fn loss_at(&self, task: usize, step: u64) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.eval_task == task && r.update_step == step)
            .map(|r| r.val_loss)
    }

    /// Validation losses of `task` in step order.
    pub fn series(&self, task: usize) -> Vec<(u64, f64)> {
        self.records.iter().filter(|r| r.eval_task == task).map(|r| (r.update_step, r.val_loss)).collect()
    }

    pub fn final_losses(&self) -> Result<Vec<f64>, MetricsError> {
        let last = self.final_step().ok_or_else(|| MetricsError::IncompleteLog("no records".into()))?;
        (0..self.num_tasks)
            .map(|t| {
                self.loss_at(t, last)
                    .ok_or_else(|| MetricsError::IncompleteLog(format!("task {t} has no final record at step {last}")))
            })
            .collect()
    }

    pub fn boundary_losses(&self) -> Result<Vec<f64>, MetricsError> {
        if self.task_boundaries.len() != self.num_tasks {
            return Err(MetricsError::IncompleteLog(format!(
                "{} task boundaries for {} tasks",
                self.task_boundaries.len(),
                self.num_tasks
            )));
        }
        self.task_boundaries
            .iter()
            .enumerate()
            .map(|(t, &step)| {
                self.loss_at(t, step)
                    .ok_or_else(|| MetricsError::IncompleteLog(format!("task {t} has no record at its boundary {step}")))
            })
            .collect()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Loss on `task` at `at_step` minus the best loss recorded strictly earlier. Positive
/// values are forgetting, negative values backward transfer.
pub fn forgetting_score(log: &MetricsLog, task: usize, at_step: u64) -> Result<f64, MetricsError> {
    let current = log.loss_at(task, at_step).ok_or(MetricsError::MissingRecord { task, step: at_step })?;
    let best = log
        .records
        .iter()
        .filter(|r| r.eval_task == task && r.update_step < at_step)
        .map(|r| r.val_loss)
        .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.min(x))))
        .ok_or(MetricsError::NoPastRecord(task))?;
    Ok(current - best)
}

/// Mean over tasks of the validation loss at the end of training.
pub fn retained_loss(log: &MetricsLog) -> Result<f64, MetricsError> {
    Ok(mean(&log.final_losses()?))
}

/// Mean over tasks of the validation loss recorded when training on that task ended.
pub fn learned_loss(log: &MetricsLog) -> Result<f64, MetricsError> {
    Ok(mean(&log.boundary_losses()?))
}

/// Per task: final loss minus the loss at that task's own boundary.
pub fn end_of_run_forgetting(log: &MetricsLog) -> Result<Vec<f64>, MetricsError> {
    let fin = log.final_losses()?;
    let learned = log.boundary_losses()?;
    Ok(fin.iter().zip(&learned).map(|(f, l)| f - l).collect())
}

pub fn mean_end_of_run_forgetting(log: &MetricsLog) -> Result<f64, MetricsError> {
    Ok(mean(&end_of_run_forgetting(log)?))
}

/// Mean over tasks of `forgetting_score` at the final step, skipping tasks with no
/// earlier record.
pub fn mean_final_forgetting_score(log: &MetricsLog) -> Result<f64, MetricsError> {
    let last = log.final_step().ok_or_else(|| MetricsError::IncompleteLog("no records".into()))?;
    let scores: Vec<f64> = (0..log.num_tasks)
        .filter_map(|t| match forgetting_score(log, t, last) {
            Err(MetricsError::NoPastRecord(_)) => None,
            other => Some(other),
        })
        .collect::<Result<_, _>>()?;
    if scores.is_empty() {
        return Err(MetricsError::IncompleteLog("no task has a past record".into()));
    }
    Ok(mean(&scores))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub dot: f64,
    pub cosine: f64,
    /// Set when either gradient is exactly zero; cosine is then reported as 0.
    pub degenerate: bool,
}

pub fn alignment_of(ga: &ModelParams, gb: &ModelParams) -> Alignment {
    let dot = ga.dot(gb);
    let (na, nb) = (ga.norm(), gb.norm());
    if na == 0.0 || nb == 0.0 {
        return Alignment { dot, cosine: 0.0, degenerate: true };
    }
    Alignment { dot, cosine: (dot / (na * nb)).clamp(-1.0, 1.0), degenerate: false }
}

/// Inner product and cosine between the loss gradients of two batches.
pub fn grad_alignment(params: &ModelParams, a: &SampleBatch, b: &SampleBatch) -> Result<Alignment, ModelError> {
    let (_, ga) = loss_and_grad(params, a)?;
    let (_, gb) = loss_and_grad(params, b)?;
    Ok(alignment_of(&ga, &gb))
}

/// Second-order check of the Reptile objective for two inner steps of plain gradient
/// descent. Runs `θ1 = θ0 − β g1(θ0)`, `θ2 = θ1 − β g2(θ1)` and returns
/// `‖ε(θ2 − θ0) − ε(−β g1 − β g2 + β² H2 g1)‖`, with every gradient at `θ0` and the
/// Hessian-vector product `H2 g1` taken by central differences of `g2` along `g1` with
/// step `fd_step`. The residual is O(β³).
pub fn reptile_taylor_residual(
    theta0: &ModelParams,
    b1: &SampleBatch,
    b2: &SampleBatch,
    beta: f64,
    epsilon: f64,
    fd_step: f64,
) -> Result<f64, ModelError> {
    let (_, g1) = loss_and_grad(theta0, b1)?;
    let (_, g2) = loss_and_grad(theta0, b2)?;

    let mut theta1 = theta0.clone();
    theta1.axpy(-beta, &g1);
    let (_, g2_at_1) = loss_and_grad(&theta1, b2)?;
    let mut theta2 = theta1;
    theta2.axpy(-beta, &g2_at_1);

    let mut plus = theta0.clone();
    plus.axpy(fd_step, &g1);
    let mut minus = theta0.clone();
    minus.axpy(-fd_step, &g1);
    let (_, g_plus) = loss_and_grad(&plus, b2)?;
    let (_, g_minus) = loss_and_grad(&minus, b2)?;

    let mut sq = 0.0;
    let iter = theta2
        .iter()
        .zip(theta0.iter())
        .zip(g1.iter().zip(g2.iter()))
        .zip(g_plus.iter().zip(g_minus.iter()));
    for (((t2, t0), (a, b)), (gp, gm)) in iter {
        let hvp = (gp - gm) / (2.0 * fd_step);
        let displacement = epsilon * (t2 - t0);
        let predicted = epsilon * (-beta * a - beta * b + beta * beta * hvp);
        sq += (displacement - predicted).powi(2);
    }
    Ok(sq.sqrt())
}

/// FLOPs per incoming token: forward+backward (6 per parameter, uncalibrated) scaled by
/// the number of processed tokens per incoming token, `1/(1-α)`.
pub fn compute_per_token(param_count: usize, replay_ratio: f64) -> f64 {
    6.0 * param_count as f64 / (1.0 - replay_ratio)
}

/// `y = a·x^(−b) + c`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Root-mean-square error over the fitted points.
    pub rmse: f64,
    /// The error profile over `b` is flat, so `b` is not identified by the data.
    pub b_uncertain: bool,
}

impl PowerLawFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.a * x.powf(-self.b) + self.c
    }

    pub fn rmse_on(&self, xs: &[f64], ys: &[f64]) -> f64 {
        let sq: f64 = xs.iter().zip(ys).map(|(&x, &y)| (self.predict(x) - y).powi(2)).sum();
        (sq / xs.len() as f64).sqrt()
    }
}

/// Search range for the exponent.
pub const B_MIN: f64 = 1e-3;
pub const B_MAX: f64 = 5.0;
const B_GRID: usize = 400;

/// Least-squares `(a, c)` for a fixed exponent, and the resulting RMSE.
fn solve_linear(xs: &[f64], ys: &[f64], b: f64) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let us: Vec<f64> = xs.iter().map(|x| x.powf(-b)).collect();
    let mu = us.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let suu: f64 = us.iter().map(|u| (u - mu).powi(2)).sum();
    let suy: f64 = us.iter().zip(ys).map(|(u, y)| (u - mu) * (y - my)).sum();
    let a = if suu > 0.0 { suy / suu } else { 0.0 };
    let c = my - a * mu;
    let sq: f64 = us.iter().zip(ys).map(|(u, y)| (a * u + c - y).powi(2)).sum();
    (a, c, (sq / n).sqrt())
}

/// Fits `y = a·x^(−b) + c`: a log-spaced grid over `b` in [1e-3, 5] with `(a, c)` solved in
/// closed form at every candidate, then golden-section refinement around the best grid
/// point.
pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Result<PowerLawFit, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::Argument(format!("{} xs vs {} ys", xs.len(), ys.len())));
    }
    if xs.len() < 4 {
        return Err(MetricsError::InsufficientData(xs.len()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) || xs.iter().any(|&x| x <= 0.0) {
        return Err(MetricsError::Argument("xs must be positive and all values finite".into()));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(MetricsError::Argument("xs must be distinct".into()));
    }

    let ratio = (B_MAX / B_MIN).powf(1.0 / (B_GRID - 1) as f64);
    let grid: Vec<f64> = (0..B_GRID).map(|i| B_MIN * ratio.powi(i as i32)).collect();
    let profile: Vec<f64> = grid.iter().map(|&b| solve_linear(xs, ys, b).2).collect();
    let (best, _) = profile
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty grid");

    let mut lo = grid[best.saturating_sub(1)];
    let mut hi = grid[(best + 1).min(B_GRID - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let f = |b: f64| solve_linear(xs, ys, b).2;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..100 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    let mut b = 0.5 * (lo + hi);
    if f(grid[best]) < f(b) {
        b = grid[best];
    }
    let (a, c, _) = solve_linear(xs, ys, b);

    let scale = ys.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1e-300);
    let spread = profile.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - profile.iter().copied().fold(f64::INFINITY, f64::min);
    let mut fit = PowerLawFit { a, b, c, rmse: 0.0, b_uncertain: spread <= 1e-9 * scale };
    fit.rmse = fit.rmse_on(xs, ys);
    Ok(fit)
}
