//! Acceptance suite. Runs every headline criterion and prints one PASS/FAIL line each;
//! exits non-zero if any fails.

use std::collections::HashMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use cpt_core::buffer::{BufferConfig, PrefetchMode, ReplayBuffer};
use cpt_core::engine::{compose_batch, train, ComposedBatch, TrainConfig, TrainMode, TrainObserver, TrainOutcome};
use cpt_core::experiment::{Arm, DeskSetup};
use cpt_core::metrics::{
    fit_power_law, learned_loss, mean_end_of_run_forgetting, reptile_taylor_residual, retained_loss, EvalRecord,
    MetricsLog,
};
use cpt_core::model::{loss_and_grad, ModelDims, ModelParams};
use cpt_core::optim::ScheduleConfig;
use cpt_core::sample::SampleBatch;
use cpt_core::stream::{make_task, sample_sequences, TaskStream};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Verdict = (bool, String);

fn main() {
    let mut runs: Vec<(String, TrainOutcome)> = Vec::new();
    let mut results: Vec<(&str, Verdict)> = Vec::new();

    let ordering = guarded(|| forgetting_ordering(&mut runs));
    report(&mut results, "forgetting ordering (seq > 25% > 50% replay)", ordering);
    let mer = guarded(|| mer_vs_er(&mut runs));
    report(&mut results, "MER(50%) <= ER(50%) forgetting", mer);
    report(&mut results, "comparison-table arithmetic", guarded(table_arithmetic));
    report(&mut results, "gradient oracle", guarded(gradient_oracle));
    report(&mut results, "Reptile second-order residual scaling", guarded(reptile_residual));
    report(&mut results, "buffer bit-exactness and persistence", guarded(buffer_bit_exact));
    report(&mut results, "buffer queue bound under stress", guarded(buffer_stress));
    report(&mut results, "overwrite uniformity", guarded(overwrite_uniformity));
    report(&mut results, "batch composition exactness", guarded(batch_composition));
    report(&mut results, "FLOP accounting", guarded(flop_accounting));
    report(&mut results, "learning-rate schedule landmarks", guarded(schedule_landmarks));
    report(&mut results, "power-law fit recovery", guarded(power_law_recovery));
    report(&mut results, "retained = learned + forgetting identity", guarded(|| identity(&runs)));

    let failed = results.iter().filter(|(_, (ok, _))| !ok).count();
    println!("\n{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        (false, format!("panicked: {msg}"))
    })
}

fn report<'a>(results: &mut Vec<(&'a str, Verdict)>, name: &'a str, verdict: Verdict) {
    let tag = if verdict.0 { "PASS" } else { "FAIL" };
    println!("[{tag}] {name}: {}", verdict.1);
    results.push((name, verdict));
}

const SEEDS: [u64; 3] = [0, 1, 2];
const HIDDEN: usize = 64;

fn run_arm(setup: &DeskSetup, arm: Arm, runs: &mut Vec<(String, TrainOutcome)>) -> Vec<f64> {
    SEEDS
        .iter()
        .map(|&seed| {
            let dir = tempfile::tempdir().unwrap();
            let out = setup.run_cell(arm, HIDDEN, seed, dir.path(), &mut ()).unwrap();
            let forgetting = mean_end_of_run_forgetting(&out.log).unwrap();
            runs.push((format!("{arm}/seed{seed}"), out));
            forgetting
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn forgetting_ordering(runs: &mut Vec<(String, TrainOutcome)>) -> Verdict {
    let setup = DeskSetup::default();
    let start = Instant::now();
    let seq = mean(&run_arm(&setup, Arm::Sequential, runs));
    let r25 = mean(&run_arm(&setup, Arm::Replay25, runs));
    let r50 = mean(&run_arm(&setup, Arm::Replay50, runs));
    let elapsed = start.elapsed();
    let ok = seq > r25 && r25 > r50 && seq > 0.05 && seq - r25 > 0.01 && r25 - r50 > 0.01 && elapsed.as_secs() < 15 * 60;
    (ok, format!("mean forgetting {seq:.4} / {r25:.4} / {r50:.4} nats over 3 seeds, {:.0} s", elapsed.as_secs_f64()))
}

fn mer_vs_er(runs: &mut Vec<(String, TrainOutcome)>) -> Verdict {
    let setup = DeskSetup::default();
    let er: Vec<f64> = runs
        .iter()
        .filter(|(name, _)| name.starts_with("replay50/"))
        .map(|(_, o)| mean_end_of_run_forgetting(&o.log).unwrap())
        .collect();
    let er = if er.len() == SEEDS.len() { mean(&er) } else { mean(&run_arm(&setup, Arm::Replay50, runs)) };
    let mer = mean(&run_arm(&setup, Arm::Mer50, runs));
    (mer <= er + 0.005, format!("MER {mer:.4} vs ER {er:.4} nats (k=50, eps=0.1)"))
}

fn log_with(final_losses: &[f64], learned: &[f64]) -> MetricsLog {
    let n = final_losses.len();
    let mut log = MetricsLog::new(n);
    for (t, &l) in learned.iter().enumerate() {
        let step = t as u64 + 1;
        log.push(EvalRecord { update_step: step, eval_task: t, val_loss: l, train_task: Some(t) });
        log.task_boundaries.push(step);
    }
    let end = n as u64 + 1;
    for (t, &l) in final_losses.iter().enumerate() {
        log.push(EvalRecord { update_step: end, eval_task: t, val_loss: l, train_task: Some(n - 1) });
    }
    log
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn table_arithmetic() -> Verdict {
    // retained table, 99M with 25% replay
    let retained = [4.03, 2.28, 2.27];
    let got = retained_loss(&log_with(&retained, &retained)).unwrap();
    let mut ok = (round2(got) - 2.86).abs() < 1e-9;
    let mut detail = format!("99M 25% replay retained {got:.4} -> {:.2} (table 2.86)", round2(got));

    // learned table rows: label, per-task values, AVG column
    let learned_rows: [(&str, [f64; 3], f64); 24] = [
        ("99M No Replay", [3.60, 2.20, 2.60], 2.80),
        ("99M 25% Replay", [3.20, 2.10, 2.27], 2.52),
        ("99M 50% Replay", [3.00, 1.95, 2.36], 2.44),
        ("99M Reptile Only", [3.30, 2.20, 2.40], 2.63),
        ("99M 25%+Reptile", [3.10, 2.00, 2.29], 2.46),
        ("99M 50%+Reptile", [2.80, 1.80, 2.01], 2.20),
        ("560M No Replay", [3.30, 1.90, 2.40], 2.53),
        ("560M 25% Replay", [2.90, 1.65, 1.91], 2.15),
        ("560M 50% Replay", [2.55, 1.30, 2.34], 2.06),
        ("560M Reptile Only", [3.10, 1.85, 2.30], 2.42),
        ("560M 25%+Reptile", [2.70, 1.50, 1.98], 2.06),
        ("560M 50%+Reptile", [2.35, 1.10, 1.60], 1.68),
        ("1B No Replay", [3.00, 1.60, 2.00], 2.20),
        ("1B 25% Replay", [2.50, 1.70, 2.22], 2.14),
        ("1B 50% Replay", [2.30, 1.35, 2.33], 2.00),
        ("1B Reptile Only", [2.80, 1.78, 2.12], 2.23),
        ("1B 25%+Reptile", [2.55, 1.45, 2.28], 2.09),
        ("1B 50%+Reptile", [2.20, 1.35, 1.83], 1.79),
        ("6B No Replay", [1.90, 1.10, 1.10], 1.37),
        ("6B 25% Replay", [1.20, 0.90, 0.90], 1.00),
        ("6B 50% Replay", [1.10, 0.70, 0.80], 0.87),
        ("6B Reptile Only", [1.50, 1.00, 1.09], 1.20),
        ("6B 25%+Reptile", [0.95, 0.68, 0.77], 0.80),
        ("6B 50%+Reptile", [0.90, 0.65, 0.74], 0.76),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let picks = rand::seq::index::sample(&mut rng, learned_rows.len(), 3).into_vec();
    for i in picks {
        let (label, values, avg) = learned_rows[i];
        let got = learned_loss(&log_with(&values, &values)).unwrap();
        let matches = (round2(got) - avg).abs() < 1e-9;
        ok &= matches;
        detail.push_str(&format!("; {label} learned {:.2} (table {avg:.2})", round2(got)));
    }
    (ok, detail)
}

fn gradient_oracle() -> Verdict {
    let dims = ModelDims { vocab_size: 16, embed_dim: 5, context: 3, hidden_dim: 12 };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for draw in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + draw);
        let mut params = ModelParams::init(dims, draw).unwrap();
        for p in params.iter_mut() {
            *p += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        let tokens: Vec<u32> = (0..3 * 10).map(|_| rng.random_range(0..16)).collect();
        let batch = SampleBatch::new(10, tokens);
        let (_, grads) = loss_and_grad(&params, &batch).unwrap();
        let analytic = grads.to_flat();
        let flat = params.to_flat();
        for _ in 0..200 {
            let i = rng.random_range(0..flat.len());
            let eval = |delta: f64| {
                let mut f = flat.clone();
                f[i] += delta;
                loss_and_grad(&ModelParams::from_flat(dims, &f).unwrap(), &batch).unwrap().0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-8);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst < 1e-4, format!("max relative error {worst:.2e} over {checked} coordinates in 5 draws"))
}

fn reptile_residual() -> Verdict {
    let dims = ModelDims { vocab_size: 12, embed_dim: 4, context: 2, hidden_dim: 8 };
    let residual_at = |beta: f64| -> f64 {
        let rs: Vec<f64> = (0..10u64)
            .map(|i| {
                let theta = ModelParams::init(dims, 200 + i).unwrap();
                let task = make_task(300 + i, 12, 0.5).unwrap();
                let b1 = sample_sequences(&task, 4, 12, 2 * i).unwrap();
                let b2 = sample_sequences(&task, 4, 12, 2 * i + 1).unwrap();
                reptile_taylor_residual(&theta, &b1, &b2, beta, 0.1, 1e-4).unwrap()
            })
            .collect();
        mean(&rs)
    };
    let (r1, r2) = (residual_at(1e-3), residual_at(5e-4));
    let ratio = r1 / r2;
    (
        (6.0..=10.0).contains(&ratio),
        format!("mean residual {r1:.3e} at 1e-3, {r2:.3e} at 5e-4, ratio {ratio:.2}"),
    )
}

fn buffer_cfg(dir: &Path, files: u64, file_size: usize, seq_len: usize) -> BufferConfig {
    let mut cfg = BufferConfig::new(dir, files * (file_size * seq_len) as u64, file_size, seq_len);
    cfg.prefetch_mode = PrefetchMode::Synchronous;
    cfg
}

/// Resident rows read straight from the files, as a multiset.
fn resident(buffer: &ReplayBuffer) -> HashMap<Vec<u32>, usize> {
    let cfg = buffer.config();
    let mut rows = HashMap::new();
    for (i, &n) in buffer.state().sizes.iter().enumerate() {
        let bytes = fs::read(buffer.file_path(i)).unwrap();
        for r in 0..n as usize {
            let row = &bytes[r * cfg.row_bytes()..(r + 1) * cfg.row_bytes()];
            let tokens = row.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
            *rows.entry(tokens).or_insert(0) += 1;
        }
    }
    rows
}

fn buffer_bit_exact() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg = buffer_cfg(dir.path(), 5, 40, 8);
    let mut buffer = ReplayBuffer::init(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = Vec::new();
    let mut overwritten = 0usize;
    for cycle in 0..10_000 {
        let n = rng.random_range(1..=8);
        let tokens: Vec<u32> = (0..n * 8).map(|_| rng.random()).collect();
        let batch = SampleBatch::new(8, tokens);
        let before = resident(&buffer);
        buffer.add(&batch).unwrap();
        let mut after = resident(&buffer);
        for row in batch.rows() {
            match after.get_mut(row) {
                Some(c) if *c > 0 => *c -= 1,
                _ => failures.push(format!("cycle {cycle}: added row missing")),
            }
        }
        let survivors: usize = after.values().sum();
        let before_total: usize = before.values().sum();
        overwritten += before_total - survivors;
        if after.iter().any(|(row, &c)| c > before.get(row).copied().unwrap_or(0)) {
            failures.push(format!("cycle {cycle}: a surviving row changed"));
        }

        let fraction = rng.random_range(0.01..=1.0);
        let eff = rng.random_range(1..=64);
        let got = buffer.get_batch(fraction, eff).unwrap();
        if got.num_rows() != (fraction * eff as f64).floor() as usize {
            failures.push(format!("cycle {cycle}: get_batch returned {} rows", got.num_rows()));
        }
        let now = resident(&buffer);
        if got.rows().any(|r| !now.contains_key(r)) {
            failures.push(format!("cycle {cycle}: replayed row not resident"));
        }
        if failures.len() > 5 {
            break;
        }
    }
    let state = buffer.state();
    let rows_before = resident(&buffer);
    drop(buffer);
    let reopened = ReplayBuffer::init(cfg).unwrap();
    let restored = reopened.state() == state && resident(&reopened) == rows_before;
    let ok = failures.is_empty() && restored && overwritten > 0;
    let detail = if failures.is_empty() {
        format!(
            "10000 cycles, {overwritten} rows overwritten, all survivors bit-exact; restart restored sizes {:?} total {}: {restored}",
            state.sizes, state.total
        )
    } else {
        failures.join("; ")
    };
    (ok, detail)
}

fn stress_row(id: u64, seq_len: usize) -> Vec<u32> {
    let mut row = vec![id as u32, (id >> 32) as u32];
    let mut x = id;
    while row.len() < seq_len {
        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        row.push((x >> 33) as u32);
    }
    row
}

fn buffer_stress() -> Verdict {
    let p = 4;
    let seq_len = 16;
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = BufferConfig::new(dir.path(), 8 * 100 * seq_len as u64, 100, seq_len);
    cfg.queue_capacity = p;
    cfg.idle_interval = Duration::from_millis(1);
    cfg.metadata_every = 50;
    let mut buffer = ReplayBuffer::init(cfg).unwrap();
    buffer.start_prefetch();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut next_id = 0u64;
    let mut max_seen = 0usize;
    let mut bad_rows = 0usize;
    let mut pops = 0usize;
    let start = Instant::now();
    while start.elapsed() < Duration::from_secs(60) {
        let n = rng.random_range(1..=16);
        let rows: Vec<Vec<u32>> = (0..n).map(|k| stress_row(next_id + k as u64, seq_len)).collect();
        next_id += n as u64;
        buffer.add(&SampleBatch::from_rows(seq_len, &rows)).unwrap();
        max_seen = max_seen.max(buffer.queue_len());
        match rng.random_range(0..4) {
            0 => std::thread::sleep(Duration::from_millis(5)),
            1 => {}
            _ => {
                let got = buffer.get_batch(0.5, 16).unwrap();
                pops += usize::from(!got.is_empty());
                for row in got.rows() {
                    let id = row[0] as u64 | (row[1] as u64) << 32;
                    if id >= next_id || row != stress_row(id, seq_len).as_slice() {
                        bad_rows += 1;
                    }
                }
            }
        }
        max_seen = max_seen.max(buffer.queue_len());
    }
    let max_enqueue = buffer.max_queue_occupancy();
    buffer.shutdown().unwrap();
    let ok = max_seen <= p && max_enqueue <= p as u64 && max_enqueue == p as u64 && bad_rows == 0 && pops > 0;
    (
        ok,
        format!(
            "60 s, {next_id} rows added, {pops} replay draws, max occupancy {max_seen} observed / {max_enqueue} at enqueue (P = {p}), {bad_rows} corrupt rows"
        ),
    )
}

/// Upper tail `P(X >= k)` of a binomial.
fn binomial_tail(n: u64, p: f64, k: u64) -> f64 {
    let mut pmf = (1.0 - p).powi(n as i32);
    let mut below = 0.0;
    for i in 0..k {
        below += pmf;
        pmf *= (n - i) as f64 / (i + 1) as f64 * p / (1.0 - p);
    }
    (1.0 - below).max(0.0)
}

fn overwrite_uniformity() -> Verdict {
    const C: usize = 100;
    const M: usize = 1000;
    const TRIALS: usize = 2000;
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = buffer_cfg(dir.path(), 1, C, 2);
    cfg.metadata_every = 1 << 30;
    cfg.seed = 5;
    let mut buffer = ReplayBuffer::init(cfg).unwrap();
    let path = buffer.file_path(0);
    let slot_ids = || -> Vec<u32> {
        let bytes = fs::read(&path).unwrap();
        bytes.chunks_exact(8).map(|c| u32::from_le_bytes(c[..4].try_into().unwrap())).collect()
    };
    let mut id = 0u32;
    let row = |id: &mut u32| {
        *id += 1;
        vec![*id, !*id]
    };
    let first: Vec<Vec<u32>> = (0..C).map(|_| row(&mut id)).collect();
    buffer.add(&SampleBatch::from_rows(2, &first)).unwrap();
    let mut survived = vec![0u64; C];
    for _ in 0..TRIALS {
        let start = slot_ids();
        for _ in 0..M {
            buffer.add(&SampleBatch::from_rows(2, &[row(&mut id)])).unwrap();
        }
        for (j, (a, b)) in start.iter().zip(slot_ids()).enumerate() {
            survived[j] += u64::from(*a == b);
        }
    }
    let p = (1.0 - 1.0 / C as f64).powi(M as i32);
    let pooled_n = (C * TRIALS) as f64;
    let total: u64 = survived.iter().sum();
    let rate = total as f64 / pooled_n;
    let se = (p * (1.0 - p) / pooled_n).sqrt();
    let pooled_ok = (rate - p).abs() <= 3.0 * se;
    let worst_row = *survived.iter().max().unwrap();
    let tail = binomial_tail(TRIALS as u64, p, worst_row);
    let bonferroni_ok = tail >= 0.0027 / C as f64;
    let row_se = (p * (1.0 - p) / TRIALS as f64).sqrt();
    let literal_outside = survived.iter().filter(|&&k| (k as f64 / TRIALS as f64 - p).abs() > 3.0 * row_se).count();
    (
        pooled_ok && bonferroni_ok,
        format!(
            "pooled survival {rate:.3e} vs {p:.3e} (3 SE = {:.1e}); busiest row {worst_row} survivals, tail p {tail:.3} (Bonferroni floor {:.1e}); {literal_outside} rows outside a literal per-row 3 SE band",
            3.0 * se,
            0.0027 / C as f64
        ),
    )
}

struct ReplayCounts(Vec<usize>);

impl TrainObserver for ReplayCounts {
    fn on_step(&mut self, _step: u64, _loss: f64, composed: &ComposedBatch) {
        self.0.push(composed.replay_rows);
    }
}

fn small_stream(samples_per_task: u64, seed: u64) -> TaskStream {
    TaskStream::synthetic(3, 16, 0.2, samples_per_task * 16, 16, seed, seed).unwrap()
}

fn small_dims() -> ModelDims {
    ModelDims { vocab_size: 16, embed_dim: 4, context: 2, hidden_dim: 8 }
}

fn schedule(total: u64) -> ScheduleConfig {
    ScheduleConfig { peak_lr: 1e-3, warmup_steps: 2, total_steps: total, min_lr: 1e-4 }
}

fn batch_composition() -> Verdict {
    let mut details = Vec::new();
    let mut ok = true;
    for alpha in [0.25, 0.5] {
        for n in [8usize, 64] {
            let want = (alpha * n as f64).floor() as usize;
            let incoming = n - want;
            let dir = tempfile::tempdir().unwrap();
            let mut buffer = ReplayBuffer::init(buffer_cfg(dir.path(), 4, 100, 16)).unwrap();
            let stream = small_stream(400, 3);
            buffer.add(&stream.validation_set(0, 50)).unwrap();
            let mut exact = 0;
            let mut checked = 0;
            for t in 0..200u64 {
                let rows: Vec<Vec<u32>> =
                    (0..incoming as u64).map(|i| stream.training_sample(1, t * incoming as u64 + i)).collect();
                let batch = SampleBatch::from_rows(16, &rows);
                let composed = compose_batch(&batch, Some(&mut buffer), alpha, n).unwrap();
                checked += 1;
                exact += usize::from(composed.replay_rows == want && composed.batch.num_rows() == n);
                buffer.add(&batch).unwrap();
            }

            // and inside a full training run: only the very first step may find the buffer cold
            let dir = tempfile::tempdir().unwrap();
            let mut buffer = ReplayBuffer::init(buffer_cfg(dir.path(), 4, 100, 16)).unwrap();
            let cfg = TrainConfig {
                validation_rows: 4,
                ..TrainConfig::new(TrainMode::Replay, n, alpha, schedule(10_000))
            };
            let theta = ModelParams::init(small_dims(), 1).unwrap();
            let mut counts = ReplayCounts(Vec::new());
            let out = train(&small_stream(incoming as u64 * 20, 4), &theta, &cfg, Some(&mut buffer), &mut counts).unwrap();
            let warm_exact = counts.0.iter().skip(1).all(|&r| r == want) && out.counters.cold_steps <= 1;

            ok &= exact == checked && warm_exact;
            details.push(format!(
                "a={alpha} N={n}: {exact}/{checked} direct, {} train steps exact={warm_exact}",
                counts.0.len()
            ));
        }
    }
    (ok, details.join("; "))
}

fn flop_accounting() -> Verdict {
    let run = |mode: TrainMode, alpha: f64, k: u64| {
        let stream = small_stream(160, 9);
        let mut cfg = TrainConfig::new(mode, 16, alpha, schedule(10_000));
        cfg.reptile_interval = k;
        cfg.validation_rows = 4;
        let theta = ModelParams::init(small_dims(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut buffer = ReplayBuffer::init(buffer_cfg(dir.path(), 4, 100, 16)).unwrap();
        // pre-warm so that no step runs with a cold buffer
        buffer.add(&small_stream(64, 77).validation_set(0, 64)).unwrap();
        let buffer = mode.uses_replay().then_some(&mut buffer);
        train(&stream, &theta, &cfg, buffer, &mut ()).unwrap().counters
    };
    let per_incoming = |c: &cpt_core::engine::TrainCounters| c.processed_tokens as f64 / c.incoming_tokens as f64;
    let seq = run(TrainMode::Sequential, 0.0, 1);
    let er50 = run(TrainMode::Replay, 0.5, 1);
    let er25 = run(TrainMode::Replay, 0.25, 1);
    let ratio = per_incoming(&er50) / per_incoming(&seq);

    let param_count = small_dims().param_count() as u64;
    let mut reptile_ok = true;
    let mut reptile_detail = Vec::new();
    for k in [5u64, 7, 50] {
        let c = run(TrainMode::Mer, 0.5, k);
        let expected = c.update_steps / k;
        let exact = c.reptile_updates == expected && c.reptile_param_ops == 3 * param_count * expected;
        reptile_ok &= exact;
        reptile_detail.push(format!("k={k}: {} interpolations, {} ops = 3 x {param_count} x {expected}", c.reptile_updates, c.reptile_param_ops));
    }
    let ok = ratio == 2.0 && er50.cold_steps == 0 && reptile_ok;
    (
        ok,
        format!(
            "tokens per incoming token: a=0 {:.4}, a=0.25 {:.4}, a=0.5 {:.4} (ratio {ratio}); {}",
            per_incoming(&seq),
            per_incoming(&er25),
            per_incoming(&er50),
            reptile_detail.join(", ")
        ),
    )
}

fn schedule_landmarks() -> Verdict {
    let configs = [
        ScheduleConfig { peak_lr: 1e-3, warmup_steps: 357, total_steps: 2357, min_lr: 1e-5 },
        ScheduleConfig { peak_lr: 3e-3, warmup_steps: 75, total_steps: 1575, min_lr: 3e-4 },
        ScheduleConfig { peak_lr: 0.5, warmup_steps: 1, total_steps: 9, min_lr: 0.05 },
    ];
    let rel = |got: f64, want: f64| (got - want).abs() / want.abs();
    let mut worst = 0.0f64;
    for s in configs {
        let mid = s.warmup_steps + (s.total_steps - s.warmup_steps) / 2;
        worst = worst
            .max(rel(s.lr_at(s.warmup_steps - 1), s.peak_lr))
            .max(rel(s.lr_at(s.total_steps), s.min_lr))
            .max(rel(s.lr_at(mid), (s.peak_lr + s.min_lr) / 2.0));
    }
    (worst <= 1e-12, format!("worst relative error {worst:.2e} over 3 schedules"))
}

fn power_law_recovery() -> Verdict {
    let xs = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0];
    let clean: Vec<f64> = xs.iter().map(|&x: &f64| 2.0 * x.powf(-0.5) + 1.0).collect();
    let err = |ys: &[f64]| {
        let f = fit_power_law(&xs, ys).unwrap();
        ((f.a - 2.0) / 2.0).abs().max(((f.b - 0.5) / 0.5).abs()).max((f.c - 1.0).abs())
    };
    let noisy = |seed: u64| -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        clean.iter().map(|y| y * (1.0 + 0.01 * rng.sample::<f64, _>(StandardNormal))).collect()
    };
    let e_clean = err(&clean);
    let e_noisy = err(&noisy(0));
    let draws = 500;
    let within = (0..draws).filter(|&s| err(&noisy(s)) < 0.15).count();
    (
        e_clean < 0.05 && e_noisy < 0.15,
        format!(
            "noiseless max rel error {e_clean:.1e}; 1% noise (seeded draw) {e_noisy:.3}; {within}/{draws} noisy draws within 15%"
        ),
    )
}

fn identity(runs: &[(String, TrainOutcome)]) -> Verdict {
    let mut worst = 0.0f64;
    for (_, out) in runs {
        let gap = retained_loss(&out.log).unwrap()
            - learned_loss(&out.log).unwrap()
            - mean_end_of_run_forgetting(&out.log).unwrap();
        worst = worst.max(gap.abs());
    }
    (!runs.is_empty() && worst <= 1e-9, format!("max |gap| {worst:.1e} over {} completed runs", runs.len()))
}
