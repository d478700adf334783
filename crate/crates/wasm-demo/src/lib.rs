//! wasm-bindgen bindings for the static page in `www/`. Replay arms need the disk-backed
//! buffer, so the training demo offers only the arms that run in memory.

use cpt_core::engine::{joint_train, train, TrainMode};
use cpt_core::experiment::{Arm, DeskSetup};
use cpt_core::metrics::{fit_power_law, learned_loss, retained_loss};
use cpt_core::optim::ScheduleConfig;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Learning rate at every update step of a linear-warmup cosine schedule.
#[wasm_bindgen]
pub fn lr_schedule(peak_lr: f64, min_lr: f64, warmup_steps: u32, total_steps: u32) -> Result<Vec<f64>, JsError> {
    let schedule =
        ScheduleConfig { peak_lr, min_lr, warmup_steps: warmup_steps.into(), total_steps: total_steps.into() };
    schedule.validate().map_err(js_err)?;
    Ok((0..u64::from(total_steps)).map(|s| schedule.lr_at(s)).collect())
}

/// Fits `y = a·x^(-b) + c`; returns `[a, b, c, rmse]`.
#[wasm_bindgen]
pub fn power_law_fit(xs: Vec<f64>, ys: Vec<f64>) -> Result<Vec<f64>, JsError> {
    let fit = fit_power_law(&xs, &ys).map_err(js_err)?;
    Ok(vec![fit.a, fit.b, fit.c, fit.rmse])
}

#[derive(Serialize)]
struct Curves {
    steps: Vec<u64>,
    /// `losses[t][i]` is the validation loss of task `t` at `steps[i]`.
    losses: Vec<Vec<f64>>,
    boundaries: Vec<u64>,
    retained: f64,
    learned: f64,
}

/// Trains a small model on a synthetic three-task stream and returns its per-task
/// validation curves as JSON. `arm` is one of `sequential`, `reptile` or `joint`.
#[wasm_bindgen]
pub fn forgetting_run(arm: &str, tokens_per_task: u32, seed: u32) -> Result<String, JsError> {
    let arm: Arm = arm.parse().map_err(js_err)?;
    if arm.mode().uses_replay() {
        return Err(JsError::new("replay arms need the disk buffer; use the cpt CLI"));
    }
    let setup = DeskSetup { tokens_per_task: tokens_per_task.into(), eval_interval: 10, reptile_interval: 10, ..DeskSetup::default() };
    let seed = u64::from(seed);
    let stream = setup.stream(seed).map_err(js_err)?;
    let theta0 = setup.initial_params(16, seed);
    let cfg = setup.train_config(arm, seed, &stream);
    let out = match arm.mode() {
        TrainMode::Joint => joint_train(&stream, &theta0, &cfg, &mut ()),
        _ => train(&stream, &theta0, &cfg, None, &mut ()),
    }
    .map_err(js_err)?;

    let log = &out.log;
    let steps: Vec<u64> = log.series(0).iter().map(|&(s, _)| s).collect();
    let losses = (0..log.num_tasks).map(|t| log.series(t).into_iter().map(|(_, l)| l).collect()).collect();
    let curves = Curves {
        steps,
        losses,
        boundaries: log.task_boundaries.clone(),
        retained: retained_loss(log).map_err(js_err)?,
        learned: learned_loss(log).map_err(js_err)?,
    };
    serde_json::to_string(&curves).map_err(js_err)
}
