//! Run orchestration: single runs, seed sweeps over one parameter, plot
//! data export, and the self-check table.
//!
//! Artifact layout for a single run:
//!
//! ```text
//! out/
//!   config.json        resolved spec (re-parseable; the reproducibility root)
//!   metrics.csv        step, kl_to_target, entropy, mode_coverage, logZ_error, mean_reward
//!   breakdown.csv      step, loss, mean_residual, mean_w, logZ, mean_logp_norm,
//!                      mean_ref_logp_norm, mean_beta_r
//!   summary.json       final metrics, wall time, build stamp
//!   checkpoints/       final.json (+ phase_NNNNNN.json at checkpoint_interval)
//! ```
//!
//! A sweep writes one such run per cell under
//! `out/cells/<param>=<value>/seed=<n>/`, then `sweep_points.csv` and
//! `sweep_aggregate.csv` (median/IQR per value), both derived purely from
//! the per-cell metrics.csv files. All files are UTF-8 with LF endings.

use super::config::{build_env, build_learner, override_parameter, parse_config, ExperimentSpec};
use crate::error::{Error, Result};
use crate::metrics::{target_distribution, DistributionTable};
use crate::policy::load_policy;
use crate::selfcheck;
use crate::trainer::{train_loop, MetricsRow, RunResult};
use serde_json::json;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

/// Build stamp baked in by the build script.
pub const BUILD_DESCRIBE: &str = env!("GIT_DESCRIBE");

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

/// Create `dir`; refuse to reuse a non-empty directory unless `force`.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn format_metric(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,kl_to_target,entropy,mode_coverage,logZ_error,mean_reward\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step,
            r.kl_to_target,
            r.entropy,
            r.mode_coverage,
            format_metric(r.log_z_error),
            r.mean_reward
        )
        .expect("writing to String cannot fail");
    }
    out
}

fn breakdown_csv(result: &RunResult) -> String {
    let mut out = String::from(
        "step,loss,mean_residual,mean_w,logZ,mean_logp_norm,mean_ref_logp_norm,mean_beta_r\n",
    );
    for r in &result.breakdown {
        let b = &r.breakdown;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            b.loss,
            b.mean_residual,
            b.mean_w,
            b.log_z,
            b.mean_logp_norm,
            b.mean_ref_logp_norm,
            b.mean_beta_r
        )
        .expect("writing to String cannot fail");
    }
    out
}

/// Execute one resolved spec into `out_dir`. Returns the final metrics row.
pub fn execute_run(spec: &ExperimentSpec, out_dir: &Path, force: bool) -> Result<MetricsRow> {
    prepare_dir(out_dir, force)?;
    let mut echo = serde_json::to_string_pretty(spec)?;
    echo.push('\n');
    write_text(&out_dir.join("config.json"), &echo)?;

    let env = build_env(&spec.env)?;
    let learner = build_learner(spec, &env)?;
    let started = Instant::now();
    let result = train_loop(&env, learner, &spec.train, &spec.eval)?;
    let wall = started.elapsed().as_secs_f64();

    write_text(&out_dir.join("metrics.csv"), &metrics_csv(&result.metrics))?;
    write_text(&out_dir.join("breakdown.csv"), &breakdown_csv(&result))?;

    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    for (phase, ckpt) in &result.checkpoints {
        let name = if *phase == spec.train.steps {
            "final.json".to_string()
        } else {
            format!("phase_{phase:06}.json")
        };
        let mut body = serde_json::to_string(ckpt)?;
        body.push('\n');
        write_text(&ckpt_dir.join(name), &body)?;
    }

    let last = result
        .metrics
        .last()
        .expect("train_loop always evaluates at least once")
        .clone();
    let summary = json!({
        "algorithm": spec.train.algorithm.as_str(),
        "steps": spec.train.steps,
        "seed": spec.train.seed,
        "wall_time_seconds": wall,
        "build": BUILD_DESCRIBE,
        "final": {
            "step": last.step,
            "kl_to_target": last.kl_to_target,
            "entropy": last.entropy,
            "mode_coverage": last.mode_coverage,
            "logZ_error": last.log_z_error,
            "mean_reward": last.mean_reward,
        },
    });
    let mut body = serde_json::to_string_pretty(&summary)?;
    body.push('\n');
    write_text(&out_dir.join("summary.json"), &body)?;
    Ok(last)
}

/// `run <config> [--out DIR] [--force]`.
pub fn cmd_run(config: &Path, out: Option<PathBuf>, force: bool) -> Result<()> {
    let spec = parse_config(config)?;
    let out_dir = out.unwrap_or_else(|| default_out_dir(config, "run"));
    let last = execute_run(&spec, &out_dir, force)?;
    println!(
        "run complete: {} (step {}, kl_to_target {:.6}, mode_coverage {})",
        out_dir.display(),
        last.step,
        last.kl_to_target,
        last.mode_coverage
    );
    Ok(())
}

fn default_out_dir(config: &Path, verb: &str) -> PathBuf {
    let stem = config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "experiment".to_string());
    PathBuf::from("runs").join(format!("{stem}-{verb}"))
}

/// One sweep cell: parameter value x seed.
struct Cell {
    value: serde_json::Value,
    seed: u64,
    dir: PathBuf,
    rel_dir: String,
}

/// `sweep <config> --out DIR [--force]`: runs the grid, then aggregates.
pub fn cmd_sweep(config: &Path, out: &Path, force: bool) -> Result<()> {
    let spec = parse_config(config)?;
    let sweep = spec
        .sweep
        .clone()
        .ok_or_else(|| Error::Config("sweep verb needs a sweep section in the config".into()))?;
    prepare_dir(out, force)?;

    let leaf = sweep
        .parameter
        .rsplit('.')
        .next()
        .expect("split always yields at least one segment");
    let mut cells = Vec::new();
    for value in &sweep.values {
        for &seed in &sweep.seeds {
            let rel_dir = format!("cells/{leaf}={value}/seed={seed}");
            cells.push(Cell {
                value: value.clone(),
                seed,
                dir: out.join(&rel_dir),
                rel_dir,
            });
        }
    }

    // Resolve every cell spec up front so config errors abort before any
    // training starts.
    let mut cell_specs = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut cell_spec = override_parameter(&spec, &sweep.parameter, &cell.value)?;
        cell_spec.train.seed = cell.seed;
        cell_spec.sweep = None;
        cell_specs.push(cell_spec);
    }

    let threads = run_threads(cells.len());
    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<(usize, String)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                if let Err(e) = execute_run(&cell_specs[i], &cells[i].dir, force) {
                    failures
                        .lock()
                        .expect("no panics hold this lock")
                        .push((i, e.to_string()));
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("scope joined all threads");
    failures.sort_by_key(|(i, _)| *i);

    let points = sweep_points(&sweep.parameter, &cells, out, &failures);
    write_text(&out.join("sweep_points.csv"), &points)?;
    let aggregate = aggregate_from_points(&points)?;
    write_text(&out.join("sweep_aggregate.csv"), &aggregate)?;

    if !failures.is_empty() {
        let mut table = String::from("failed cells:\n");
        for (i, msg) in &failures {
            writeln!(
                table,
                "  {}={} seed={}: {msg}",
                leaf, cells[*i].value, cells[*i].seed
            )
            .expect("writing to String cannot fail");
        }
        eprint!("{table}");
        return Err(Error::SweepPartial(format!(
            "{} of {} cells failed",
            failures.len(),
            cells.len()
        )));
    }
    println!(
        "sweep complete: {} cells under {}",
        cells.len(),
        out.display()
    );
    Ok(())
}

fn run_threads(cells: usize) -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let requested = std::env::var("RUN_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(available);
    requested.min(cells).max(1)
}

/// Final-row table, one line per cell, read back from each cell's
/// metrics.csv (the aggregate never trusts in-memory state).
fn sweep_points(
    parameter: &str,
    cells: &[Cell],
    out: &Path,
    failures: &[(usize, String)],
) -> String {
    let mut table = String::from(
        "parameter,value,seed,dir,status,final_step,kl_to_target,entropy,mode_coverage,logZ_error,mean_reward\n",
    );
    for (i, cell) in cells.iter().enumerate() {
        let failed = failures.iter().any(|(j, _)| *j == i);
        let final_row = if failed {
            None
        } else {
            read_final_metrics(&out.join(&cell.rel_dir).join("metrics.csv")).ok()
        };
        match final_row {
            Some(row) => writeln!(
                table,
                "{parameter},{},{},{},ok,{},{},{},{},{},{}",
                cell.value,
                cell.seed,
                cell.rel_dir,
                row.step,
                row.kl_to_target,
                row.entropy,
                row.mode_coverage,
                format_metric(row.log_z_error),
                row.mean_reward
            ),
            None => writeln!(
                table,
                "{parameter},{},{},{},failed,,,,,,",
                cell.value, cell.seed, cell.rel_dir
            ),
        }
        .expect("writing to String cannot fail");
    }
    table
}

/// Parse the last data row of a metrics.csv.
fn read_final_metrics(path: &Path) -> Result<MetricsRow> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("missing metrics file: {} ({e})", path.display())))?;
    let line = text
        .lines()
        .rfind(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Config(format!("{} is empty", path.display())))?;
    parse_metrics_line(line)
        .ok_or_else(|| Error::Config(format!("{} has a malformed final row", path.display())))
}

fn parse_metrics_line(line: &str) -> Option<MetricsRow> {
    let cols: Vec<&str> = line.split(',').collect();
    if cols.len() != 6 {
        return None;
    }
    Some(MetricsRow {
        step: cols[0].parse().ok()?,
        kl_to_target: cols[1].parse().ok()?,
        entropy: cols[2].parse().ok()?,
        mode_coverage: cols[3].parse().ok()?,
        log_z_error: if cols[4].is_empty() {
            None
        } else {
            Some(cols[4].parse().ok()?)
        },
        mean_reward: cols[5].parse().ok()?,
    })
}

/// Linear-interpolation percentile of a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn median_iqr(values: &mut [f64]) -> (f64, f64) {
    values.sort_by(|a, b| a.partial_cmp(b).expect("metrics are finite"));
    (
        percentile(values, 0.5),
        percentile(values, 0.75) - percentile(values, 0.25),
    )
}

/// Per-value sweep samples: (kl, coverage, reward) of each ok cell, plus
/// the total cell count including failures.
type ValueSamples = (Vec<f64>, Vec<f64>, Vec<f64>, usize);

/// Median/IQR per parameter value, computed from the points table text
/// (itself derived from the per-cell CSVs).
fn aggregate_from_points(points: &str) -> Result<String> {
    let mut order: Vec<String> = Vec::new();
    let mut by_value: std::collections::HashMap<String, ValueSamples> =
        std::collections::HashMap::new();
    for line in points.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 11 {
            continue;
        }
        let value = cols[1].to_string();
        let entry = by_value.entry(value.clone()).or_insert_with(|| {
            order.push(value.clone());
            (Vec::new(), Vec::new(), Vec::new(), 0)
        });
        entry.3 += 1;
        if cols[4] != "ok" {
            continue;
        }
        let (kl, cov, reward) = (
            cols[6].parse::<f64>(),
            cols[8].parse::<f64>(),
            cols[10].parse::<f64>(),
        );
        if let (Ok(kl), Ok(cov), Ok(reward)) = (kl, cov, reward) {
            entry.0.push(kl);
            entry.1.push(cov);
            entry.2.push(reward);
        }
    }
    let mut out = String::from(
        "value,cells,cells_ok,kl_median,kl_iqr,coverage_median,coverage_iqr,mean_reward_median\n",
    );
    for value in order {
        let (mut kl, mut cov, mut reward, total) =
            by_value.remove(&value).expect("order mirrors the map keys");
        if kl.is_empty() {
            writeln!(out, "{value},{total},0,,,,,").expect("writing to String cannot fail");
            continue;
        }
        let ok = kl.len();
        let (kl_med, kl_iqr) = median_iqr(&mut kl);
        let (cov_med, cov_iqr) = median_iqr(&mut cov);
        let (reward_med, _) = median_iqr(&mut reward);
        writeln!(
            out,
            "{value},{total},{ok},{kl_med},{kl_iqr},{cov_med},{cov_iqr},{reward_med}"
        )
        .expect("writing to String cannot fail");
    }
    Ok(out)
}

/// `export-plots <run-dir>`: tidy CSVs for plotting. On a sweep directory,
/// regenerates the aggregate from the per-cell CSVs instead.
pub fn cmd_export_plots(run_dir: &Path) -> Result<()> {
    if run_dir.join("sweep_points.csv").exists() {
        return export_sweep(run_dir);
    }
    let metrics_path = run_dir.join("metrics.csv");
    if !metrics_path.exists() {
        return Err(Error::Config(format!(
            "missing metrics file: {}",
            metrics_path.display()
        )));
    }
    let text = fs::read_to_string(&metrics_path)?;
    let mut kl = String::from("step,kl_to_target\n");
    let mut coverage = String::from("step,mode_coverage\n");
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::Config(format!(
                "{} has a malformed row: {line}",
                metrics_path.display()
            )));
        }
        writeln!(kl, "{},{}", cols[0], cols[1]).expect("writing to String cannot fail");
        writeln!(coverage, "{},{}", cols[0], cols[3]).expect("writing to String cannot fail");
    }
    write_text(&run_dir.join("kl_curve.csv"), &kl)?;
    write_text(&run_dir.join("coverage_curve.csv"), &coverage)?;
    export_policy_vs_target(run_dir)?;
    println!("exported plot data to {}", run_dir.display());
    Ok(())
}

/// Final-policy vs target table for enumerable envs; one file per prompt
/// (`policy_vs_target.csv` for prompt 0).
fn export_policy_vs_target(run_dir: &Path) -> Result<()> {
    let config_path = run_dir.join("config.json");
    if !config_path.exists() {
        return Err(Error::Config(format!(
            "missing resolved config: {}",
            config_path.display()
        )));
    }
    let spec = parse_config(&config_path)?;
    let ckpt_path = run_dir.join("checkpoints/final.json");
    if !ckpt_path.exists() {
        return Err(Error::Config(format!(
            "missing final checkpoint: {}",
            ckpt_path.display()
        )));
    }
    let ckpt = serde_json::from_str(&fs::read_to_string(&ckpt_path)?)?;
    let policy = load_policy(ckpt)?;
    let env = build_env(&spec.env)?;
    for (pid, prompt) in env.prompts.iter().enumerate() {
        let rewards = env.enumerate_rewards(prompt.id, crate::policy::DEFAULT_ENUMERATION_CAP)?;
        let target = target_distribution(
            &rewards,
            &env.space,
            prompt,
            spec.train.beta,
            &crate::policy::ReferencePolicy::Uniform,
        )?;
        let dist = DistributionTable::from_policy(
            &policy,
            prompt,
            crate::policy::DEFAULT_ENUMERATION_CAP,
        )?;
        for (name, total) in [
            ("target_prob", target.table.probs.iter().sum::<f64>()),
            ("policy_prob", dist.probs.iter().sum::<f64>()),
        ] {
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric(format!(
                    "{name} column sums to {total}, expected 1"
                )));
            }
        }
        let mut out = String::from("sequence,target_prob,policy_prob\n");
        for (i, seq) in target.table.sequences.iter().enumerate() {
            let label: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
            writeln!(
                out,
                "{},{},{}",
                label.join("-"),
                target.table.probs[i],
                dist.probs[i]
            )
            .expect("writing to String cannot fail");
        }
        let name = if pid == 0 {
            "policy_vs_target.csv".to_string()
        } else {
            format!("policy_vs_target_prompt{pid}.csv")
        };
        write_text(&run_dir.join(name), &out)?;
    }
    Ok(())
}

fn export_sweep(run_dir: &Path) -> Result<()> {
    let points_path = run_dir.join("sweep_points.csv");
    let points = fs::read_to_string(&points_path)?;
    // Re-derive the final rows from each cell's metrics.csv so the export is
    // a pure function of the per-run artifacts.
    let mut rebuilt = String::new();
    for (i, line) in points.lines().enumerate() {
        if i == 0 {
            rebuilt.push_str(line);
            rebuilt.push('\n');
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 11 || cols[4] != "ok" {
            rebuilt.push_str(line);
            rebuilt.push('\n');
            continue;
        }
        let row = read_final_metrics(&run_dir.join(cols[3]).join("metrics.csv"))?;
        writeln!(
            rebuilt,
            "{},{},{},{},ok,{},{},{},{},{},{}",
            cols[0],
            cols[1],
            cols[2],
            cols[3],
            row.step,
            row.kl_to_target,
            row.entropy,
            row.mode_coverage,
            format_metric(row.log_z_error),
            row.mean_reward
        )
        .expect("writing to String cannot fail");
    }
    let aggregate = aggregate_from_points(&rebuilt)?;
    write_text(&run_dir.join("sweep_aggregate.csv"), &aggregate)?;
    println!("exported sweep aggregate to {}", run_dir.display());
    Ok(())
}

/// `check`: run the self-check suite and print a pass/fail table.
pub fn cmd_check() -> Result<()> {
    let lines = selfcheck::run_all(17)?;
    let width = lines.iter().map(|l| l.name.len()).max().unwrap_or(0);
    let mut all_pass = true;
    for line in &lines {
        all_pass &= line.pass;
        println!(
            "{:<width$}  {}  {}",
            line.name,
            if line.pass { "pass" } else { "FAIL" },
            line.detail,
        );
    }
    if all_pass {
        println!("all checks passed");
        Ok(())
    } else {
        Err(Error::Numeric("one or more self-checks failed".into()))
    }
}
