//! Comparison tables, power-law scaling fits and plots, all derived from the metrics CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cpt_core::experiment::Arm;
use cpt_core::metrics::{
    compute_per_token, fit_power_law, learned_loss, mean_end_of_run_forgetting, retained_loss, EvalRecord, B_MAX, B_MIN,
    MetricsLog, PowerLawFit,
};

use crate::csvio::{read_csv, MetricsRow};
use crate::plot::{self, Series};
use crate::run::METRICS_FILE;
use crate::CliError;

pub const REPORT_FILE: &str = "report.txt";
pub const FITS_FILE: &str = "scaling_fits.csv";
pub const PLOTS_DIR: &str = "plots";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Self { mean, std, n }
    }
}

/// One completed cell, reduced to its end-of-run numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub seed: u64,
    pub arm: Arm,
    pub model_size: usize,
    pub alpha: f64,
    pub final_losses: Vec<f64>,
    pub learned_losses: Vec<f64>,
    pub retained: f64,
    pub learned: f64,
    pub forgetting: f64,
    pub log: MetricsLog,
}

/// Rebuilds each cell's log from CSV rows. Task boundaries are the last evaluation
/// tagged with that training task; rows without a training task (joint) end every task
/// at the final step.
pub fn cell_results(rows: &[MetricsRow], source: &Path) -> Result<Vec<CellResult>, CliError> {
    let mut groups: BTreeMap<(usize, Arm, u64), Vec<&MetricsRow>> = BTreeMap::new();
    for row in rows {
        groups.entry((row.model_size, row.arm, row.seed)).or_default().push(row);
    }
    let bad = |msg: String| CliError::Metrics(source.to_path_buf(), msg);
    let mut out = Vec::new();
    for ((model_size, arm, seed), rows) in groups {
        let num_tasks = rows.iter().map(|r| r.eval_task).max().unwrap_or(0) + 1;
        let mut log = MetricsLog::new(num_tasks);
        for r in &rows {
            log.push(EvalRecord {
                update_step: r.update_step,
                eval_task: r.eval_task,
                val_loss: r.val_loss_nats,
                train_task: r.train_task,
            });
        }
        let last = log.final_step().unwrap_or(0);
        log.task_boundaries = (0..num_tasks)
            .map(|t| {
                if rows.iter().all(|r| r.train_task.is_none()) {
                    return Some(last);
                }
                rows.iter().filter(|r| r.train_task == Some(t)).map(|r| r.update_step).max()
            })
            .collect::<Option<Vec<u64>>>()
            .ok_or_else(|| bad(format!("seed {seed} {arm} size {model_size}: a task never finished")))?;
        let cell = format!("seed {seed} {arm} size {model_size}");
        fn metric<T>(r: Result<T, cpt_core::metrics::MetricsError>, cell: &str, source: &Path) -> Result<T, CliError> {
            r.map_err(|e| CliError::Metrics(source.to_path_buf(), format!("{cell}: {e}")))
        }
        out.push(CellResult {
            seed,
            arm,
            model_size,
            alpha: rows[0].alpha,
            final_losses: metric(log.final_losses(), &cell, source)?,
            learned_losses: metric(log.boundary_losses(), &cell, source)?,
            retained: metric(retained_loss(&log), &cell, source)?,
            learned: metric(learned_loss(&log), &cell, source)?,
            forgetting: metric(mean_end_of_run_forgetting(&log), &cell, source)?,
            log,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub arm: Arm,
    pub per_task_retained: Vec<Stat>,
    pub per_task_learned: Vec<Stat>,
    pub avg_retained: Stat,
    pub avg_learned: Stat,
    pub avg_forgetting: Stat,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SizeTable {
    pub model_size: usize,
    pub num_tasks: usize,
    /// In the fixed arm order.
    pub rows: Vec<ReportRow>,
}

pub fn build_tables(cells: &[CellResult]) -> Vec<SizeTable> {
    let mut sizes: Vec<usize> = cells.iter().map(|c| c.model_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
        .into_iter()
        .map(|size| {
            let at_size: Vec<&CellResult> = cells.iter().filter(|c| c.model_size == size).collect();
            let num_tasks = at_size.iter().map(|c| c.final_losses.len()).max().unwrap_or(0);
            let rows = Arm::ALL
                .iter()
                .filter_map(|&arm| {
                    let group: Vec<&CellResult> = at_size.iter().copied().filter(|c| c.arm == arm).collect();
                    if group.is_empty() {
                        return None;
                    }
                    let per_task = |pick: fn(&CellResult) -> &Vec<f64>| {
                        (0..num_tasks)
                            .map(|t| Stat::of(&group.iter().map(|c| pick(c)[t]).collect::<Vec<_>>()))
                            .collect()
                    };
                    let over = |f: fn(&CellResult) -> f64| Stat::of(&group.iter().map(|c| f(c)).collect::<Vec<_>>());
                    Some(ReportRow {
                        arm,
                        per_task_retained: per_task(|c| &c.final_losses),
                        per_task_learned: per_task(|c| &c.learned_losses),
                        avg_retained: over(|c| c.retained),
                        avg_learned: over(|c| c.learned),
                        avg_forgetting: over(|c| c.forgetting),
                        seeds: group.iter().map(|c| c.seed).collect(),
                    })
                })
                .collect();
            SizeTable { model_size: size, num_tasks, rows }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitRow {
    /// An arm label, or `family:<name>` for a fit pooled over one update rule.
    pub label: String,
    pub axis: &'static str,
    pub metric: &'static str,
    pub fit: PowerLawFit,
    pub points: Vec<(f64, f64)>,
}

fn fit_points(label: String, axis: &'static str, metric: &'static str, mut points: Vec<(f64, f64)>) -> Option<FitRow> {
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
    let fit = fit_power_law(&xs, &ys).ok()?;
    Some(FitRow { label, axis, metric, fit, points })
}

/// Power-law fits of retained and learned loss against model size and compute per
/// token, per arm and per arm family. Groups with fewer than four distinct points are
/// skipped.
pub fn scaling_fits(tables: &[SizeTable]) -> Vec<FitRow> {
    let points = |arms: &[Arm], metric: &str, axis: &str| -> Vec<(f64, f64)> {
        tables
            .iter()
            .flat_map(|t| t.rows.iter().map(move |r| (t.model_size, r)))
            .filter(|(_, r)| arms.contains(&r.arm))
            .map(|(size, r)| {
                let x = if axis == "model_size" { size as f64 } else { compute_per_token(size, r.arm.alpha()) };
                let y = if metric == "retained" { r.avg_retained.mean } else { r.avg_learned.mean };
                (x, y)
            })
            .collect()
    };
    let mut fits = Vec::new();
    for metric in ["retained", "learned"] {
        for axis in ["compute_per_token", "model_size"] {
            for arm in Arm::ALL {
                fits.extend(fit_points(arm.label().to_string(), axis, metric, points(&[arm], metric, axis)));
            }
        }
        for family in ["replay", "reptile"] {
            let arms: Vec<Arm> = Arm::ALL.into_iter().filter(|a| a.family() == family).collect();
            let pts = points(&arms, metric, "compute_per_token");
            fits.extend(fit_points(format!("family:{family}"), "compute_per_token", metric, pts));
        }
    }
    fits
}

fn cell(s: &Stat) -> String {
    format!("{:.4} ± {:.4}", s.mean, s.std)
}

pub fn render_text(tables: &[SizeTable], fits: &[FitRow]) -> String {
    let mut out = String::new();
    let seeds: usize = tables.iter().flat_map(|t| &t.rows).map(|r| r.seeds.len()).max().unwrap_or(0);
    let _ = writeln!(out, "Continual pre-training report");
    let _ = writeln!(out, "Validation losses in nats; each entry is mean ± sample std over up to {seeds} seed(s).");
    let _ = writeln!(out, "Forgetting is final loss minus the loss right after the task was trained (AVG retained - AVG learned).");
    let label_w = 16;
    let col_w = 19;
    for t in tables {
        for (title, retained) in [("retained validation loss", true), ("learned validation loss", false)] {
            let _ = writeln!(out, "\n== model_size {} parameters: {title} ==", t.model_size);
            let mut header = format!("{:<label_w$}", "Training Method");
            for task in 0..t.num_tasks {
                let _ = write!(header, "{:>col_w$}", format!("Task {task}"));
            }
            if retained {
                for h in ["AVG retained", "AVG learned", "AVG forgetting"] {
                    let _ = write!(header, "{h:>col_w$}");
                }
                let _ = write!(header, "{:>7}", "seeds");
            } else {
                let _ = write!(header, "{:>col_w$}", "AVG");
            }
            let _ = writeln!(out, "{}", header.trim_end());
            for row in &t.rows {
                let mut line = format!("{:<label_w$}", row.arm.table_label());
                let per_task = if retained { &row.per_task_retained } else { &row.per_task_learned };
                for s in per_task {
                    let _ = write!(line, "{:>col_w$}", cell(s));
                }
                if retained {
                    for s in [&row.avg_retained, &row.avg_learned, &row.avg_forgetting] {
                        let _ = write!(line, "{:>col_w$}", cell(s));
                    }
                    let _ = write!(line, "{:>7}", row.seeds.len());
                } else {
                    let _ = write!(line, "{:>col_w$}", cell(&row.avg_learned));
                }
                let _ = writeln!(out, "{line}");
            }
        }
    }
    let _ = writeln!(out, "\n== power-law fits y = a * x^(-b) + c ==");
    if fits.is_empty() {
        let _ = writeln!(out, "(none: every arm needs at least four model sizes)");
    }
    for f in fits {
        let at_bound = f.fit.b <= B_MIN * (1.0 + 1e-6) || f.fit.b >= B_MAX * (1.0 - 1e-6);
        let flag = if f.fit.b_uncertain {
            "  (b not identified)"
        } else if at_bound {
            "  (b at search bound)"
        } else {
            ""
        };
        let _ = writeln!(
            out,
            "{:<16} {:<8} vs {:<17} a={:<12.5} b={:<9.5} c={:<9.5} rmse={:.2e}{flag}",
            f.label, f.metric, f.axis, f.fit.a, f.fit.b, f.fit.c, f.fit.rmse
        );
    }
    out
}

pub fn render_fits_csv(fits: &[FitRow]) -> String {
    let mut out = String::from("arm,axis,metric,a,b,c,rmse\n");
    for f in fits {
        let _ = writeln!(out, "{},{},{},{},{},{},{}", f.label, f.axis, f.metric, f.fit.a, f.fit.b, f.fit.c, f.fit.rmse);
    }
    out
}

#[derive(Debug)]
pub struct ReportFiles {
    pub report: PathBuf,
    pub fits: PathBuf,
    pub plots: Vec<PathBuf>,
    pub cells: usize,
}

/// Mean validation-loss curve per task over the seeds of one (size, arm) group.
fn mean_curves(cells: &[&CellResult]) -> Vec<Vec<(f64, f64)>> {
    let num_tasks = cells[0].log.num_tasks;
    (0..num_tasks)
        .map(|t| {
            let mut by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for c in cells {
                for (step, loss) in c.log.series(t) {
                    by_step.entry(step).or_default().push(loss);
                }
            }
            by_step.into_iter().map(|(s, v)| (s as f64, v.iter().sum::<f64>() / v.len() as f64)).collect()
        })
        .collect()
}

fn write_plots(dir: &Path, cells: &[CellResult], fits: &[FitRow]) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    let mut written = Vec::new();
    let mut save = |name: String, svg: String| -> Result<(), CliError> {
        let path = dir.join(name);
        fs::write(&path, svg).map_err(|e| CliError::Io(path.clone(), e))?;
        written.push(path);
        Ok(())
    };

    let mut groups: BTreeMap<(usize, Arm), Vec<&CellResult>> = BTreeMap::new();
    for c in cells {
        groups.entry((c.model_size, c.arm)).or_default().push(c);
    }
    for ((size, arm), group) in &groups {
        let series: Vec<Series> = mean_curves(group)
            .into_iter()
            .enumerate()
            .map(|(t, points)| Series { name: format!("task {t}"), points, line: true, markers: false })
            .collect();
        let title = format!("{} ({} params): validation loss per task", arm.table_label(), size);
        save(format!("curves_{size}_{arm}.svg"), plot::chart(&title, "update step", "validation loss (nats)", &series, false))?;
    }

    for metric in ["retained", "learned"] {
        for axis in ["model_size", "compute_per_token"] {
            let mut series = Vec::new();
            for f in fits.iter().filter(|f| f.metric == metric && f.axis == axis && !f.label.starts_with("family:")) {
                let (lo, hi) = (f.points[0].0, f.points[f.points.len() - 1].0);
                let curve = (0..=40)
                    .map(|i| {
                        let x = lo * (hi / lo).powf(i as f64 / 40.0);
                        (x, f.fit.predict(x))
                    })
                    .collect();
                series.push(Series { name: f.label.clone(), points: f.points.clone(), line: false, markers: true });
                series.push(Series { name: String::new(), points: curve, line: true, markers: false });
            }
            if series.is_empty() {
                continue;
            }
            let x_label = if axis == "model_size" { "parameters" } else { "FLOPs per incoming token" };
            let title = format!("{metric} loss vs {x_label}, power-law fits");
            save(format!("scaling_{metric}_{axis}.svg"), plot::chart(&title, x_label, &format!("{metric} loss (nats)"), &series, true))?;
        }
    }
    Ok(written)
}

/// Writes report.txt, scaling_fits.csv and the plots from `out/metrics.csv`.
pub fn emit_report(out: &Path) -> Result<ReportFiles, CliError> {
    let csv_path = out.join(METRICS_FILE);
    if !csv_path.exists() {
        return Err(CliError::NothingToReport(out.to_path_buf()));
    }
    let rows = read_csv(&csv_path)?;
    if rows.is_empty() {
        return Err(CliError::NothingToReport(out.to_path_buf()));
    }
    let cells = cell_results(&rows, &csv_path)?;
    let tables = build_tables(&cells);
    let fits = scaling_fits(&tables);

    let report = out.join(REPORT_FILE);
    fs::write(&report, render_text(&tables, &fits)).map_err(|e| CliError::Io(report.clone(), e))?;
    let fits_path = out.join(FITS_FILE);
    fs::write(&fits_path, render_fits_csv(&fits)).map_err(|e| CliError::Io(fits_path.clone(), e))?;
    let plots = write_plots(&out.join(PLOTS_DIR), &cells, &fits)?;
    Ok(ReportFiles { report, fits: fits_path, plots, cells: cells.len() })
}
