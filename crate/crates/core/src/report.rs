//! Run directories, multi-seed comparisons and chart rendering.
//!
//! A run directory contains:
//!
//! - `config.toml`: the resolved config, which reproduces the run when fed back in;
//! - `metrics.jsonl`: one `batch` record per rollout batch, preceded by an
//!   `estep` record on batches where an E-step was scheduled;
//! - `timing.jsonl`: wall-clock per batch (kept apart so that the metrics
//!   stream is byte-reproducible);
//! - `summary.json`, `accuracy.svg`, `margin.svg`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{mean, std_dev};
use crate::plot::{line_chart, Series};
use crate::trainer::{Counters, MetricsRecord, Method, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub batches: usize,
    pub final_eval_accuracy: Option<f64>,
    pub best_eval_accuracy: Option<f64>,
    pub wall_ms: f64,
    pub counters: Counters,
    pub error: Option<String>,
}

#[derive(Serialize)]
struct Timing {
    batch: usize,
    wall_ms: f64,
}

fn write_line<T: Serialize>(w: &mut impl Write, v: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Train `cfg` to completion, writing a run directory under `out`.
/// When `checkpoint_every > 0`, a checkpoint is refreshed in `out/checkpoint`.
pub fn run_experiment(cfg: TrainConfig, out: &Path) -> Result<RunSummary> {
    let trainer = Trainer::new(cfg)?;
    drive(trainer, out, false)
}

/// Continue a run from `out/checkpoint`, appending to its streams.
pub fn resume_experiment(out: &Path) -> Result<RunSummary> {
    let trainer = Trainer::load_checkpoint(&out.join("checkpoint"))?;
    drive(trainer, out, true)
}

fn drive(mut trainer: Trainer, out: &Path, append: bool) -> Result<RunSummary> {
    fs::create_dir_all(out)?;
    let cfg = trainer.config().clone();
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let open = |name: &str| -> Result<BufWriter<File>> {
        let f = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(out.join(name))?;
        Ok(BufWriter::new(f))
    };
    let mut metrics = open("metrics.jsonl")?;
    let mut timing = open("timing.jsonl")?;
    let start = Instant::now();
    let mut error = None;
    while !trainer.is_finished() {
        let t0 = Instant::now();
        match trainer.run_batch() {
            Ok(b) => {
                if let Some(e) = &b.estep {
                    write_line(&mut metrics, e)?;
                }
                write_line(&mut metrics, &b.metrics)?;
                write_line(
                    &mut timing,
                    &Timing {
                        batch: b.metrics.batch,
                        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                    },
                )?;
                if cfg.checkpoint_every > 0 && b.metrics.batch % cfg.checkpoint_every == 0 {
                    trainer.save_checkpoint(&out.join("checkpoint"))?;
                }
            }
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
    }
    let summary = RunSummary {
        method: cfg.method,
        seed: cfg.seed,
        batches: trainer.batches_done(),
        final_eval_accuracy: trainer.last_eval(),
        best_eval_accuracy: trainer.best_eval(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        counters: trainer.counters().clone(),
        error: error.clone(),
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    render_charts(out)?;
    match error {
        Some(e) => Err(Error::Precondition(format!("run failed at batch {}: {e}", trainer.batches_done() + 1))),
        None => Ok(summary),
    }
}

/// Batch records of a metrics stream, in file order.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let v: serde_json::Value = serde_json::from_str(&line)?;
        if v.get("record").and_then(|r| r.as_str()) == Some("batch") {
            out.push(serde_json::from_value(v)?);
        }
    }
    Ok(out)
}

fn series_of(records: &[MetricsRecord], label: &str, f: impl Fn(&MetricsRecord) -> Option<f64>) -> Series {
    Series {
        label: label.into(),
        points: records
            .iter()
            .filter_map(|r| f(r).map(|v| (r.batch as f64, v)))
            .collect(),
    }
}

/// Rewrite `accuracy.svg` and `margin.svg` from `metrics.jsonl`.
pub fn render_charts(run_dir: &Path) -> Result<()> {
    let records = read_metrics(&run_dir.join("metrics.jsonl"))?;
    let acc = vec![
        series_of(&records, "train", |r| Some(r.train_accuracy)),
        series_of(&records, "eval", |r| r.eval_accuracy),
    ];
    fs::write(run_dir.join("accuracy.svg"), line_chart("Accuracy", "batch", "accuracy", &acc))?;
    let margin = vec![series_of(&records, "margin", |r| r.reward_margin)];
    fs::write(
        run_dir.join("margin.svg"),
        line_chart("Reward margin", "batch", "margin (nats)", &margin),
    )?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub final_accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub failed_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn table(&self) -> String {
        let mut s = format!("{:<18} {:>6} {:>18}\n", "method", "seeds", "final eval acc");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<18} {:>6} {:>9.4} ± {:<7.4}\n",
                r.method.as_str(),
                r.final_accuracies.len(),
                r.mean,
                r.std
            ));
        }
        s
    }
}

/// Cell directory for one (method, seed) pair.
pub fn cell_dir(out: &Path, row: usize, method: Method, seed: u64) -> PathBuf {
    out.join(format!("{row:02}-{}", method.as_str())).join(format!("seed-{seed}"))
}

/// Run every (method, seed) cell of `base` in parallel under `out`.
pub fn compare(base: &TrainConfig, methods: &[Method], seeds: &[u64], out: &Path) -> Result<Comparison> {
    if seeds.len() < 2 {
        return Err(Error::Config("`seeds` needs at least 2 entries for a comparison".into()));
    }
    let cells: Vec<(usize, Method, u64)> = methods
        .iter()
        .enumerate()
        .flat_map(|(i, &m)| seeds.iter().map(move |&s| (i, m, s)))
        .collect();
    let results: Vec<(usize, Method, u64, Result<RunSummary>)> = cells
        .par_iter()
        .map(|&(i, m, s)| {
            let cfg = TrainConfig {
                method: m,
                seed: s,
                teacher_source: None,
                ..base.clone()
            };
            (i, m, s, run_experiment(cfg, &cell_dir(out, i, m, s)))
        })
        .collect();
    let mut rows = Vec::new();
    let mut overlay = Vec::new();
    for (i, &m) in methods.iter().enumerate() {
        let mut finals = Vec::new();
        let mut ok_seeds = Vec::new();
        let mut failed = Vec::new();
        for (ci, _, s, r) in &results {
            if *ci != i {
                continue;
            }
            match r {
                Ok(summary) => {
                    finals.push(summary.final_eval_accuracy.unwrap_or(f64::NAN));
                    ok_seeds.push(*s);
                }
                Err(_) => failed.push(*s),
            }
        }
        let curves: Vec<Vec<MetricsRecord>> = ok_seeds
            .iter()
            .filter_map(|&s| read_metrics(&cell_dir(out, i, m, s).join("metrics.jsonl")).ok())
            .collect();
        overlay.push(mean_eval_curve(&format!("{i:02}-{}", m.as_str()), &curves));
        rows.push(ComparisonRow {
            method: m,
            seeds: ok_seeds,
            mean: if finals.is_empty() { f64::NAN } else { mean(&finals) },
            std: if finals.is_empty() { f64::NAN } else { std_dev(&finals) },
            final_accuracies: finals,
            failed_seeds: failed,
        });
    }
    let cmp = Comparison { rows };
    fs::create_dir_all(out)?;
    fs::write(out.join("comparison.json"), serde_json::to_string_pretty(&cmp)?)?;
    fs::write(out.join("comparison.txt"), cmp.table())?;
    fs::write(
        out.join("comparison.svg"),
        line_chart("Mean eval accuracy", "batch", "accuracy", &overlay),
    )?;
    Ok(cmp)
}

fn mean_eval_curve(label: &str, runs: &[Vec<MetricsRecord>]) -> Series {
    let mut points = Vec::new();
    if let Some(first) = runs.first() {
        for (k, r) in first.iter().enumerate() {
            if r.eval_accuracy.is_none() {
                continue;
            }
            let vals: Vec<f64> = runs.iter().filter_map(|run| run.get(k).and_then(|x| x.eval_accuracy)).collect();
            points.push((r.batch as f64, mean(&vals)));
        }
    }
    Series {
        label: label.into(),
        points,
    }
}
