//! CSV and JSON run reports.
//!
//! All CSV files carry a header row, use `.` as decimal separator and `\n`
//! line endings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::losses::variational_diagnostic;
use crate::train::{EvalMetrics, SweepRow, TrainConfig, TrainHistory, TrainRun};

pub const CHECKPOINT_FILE: &str = "adapter.alr2";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RANKS_FILE: &str = "ranks.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_FILE: &str = "sweep.csv";

pub const METRICS_HEADER: [&str; 8] = ["step", "total", "mse", "reg", "entropy", "weight", "active_params", "bytes"];

/// Paths written by [`write_run`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub ranks: PathBuf,
    pub summary: PathBuf,
    pub checkpoint_bytes: usize,
}

#[derive(Debug, Serialize)]
struct LayerSummary {
    kind: String,
    final_rank: usize,
    nu: f64,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    config: &'a TrainConfig,
    steps_run: usize,
    final_loss: Option<&'a crate::losses::LossBreakdown>,
    initial_eval: EvalMetrics,
    final_eval: EvalMetrics,
    layers: BTreeMap<String, LayerSummary>,
    layer_order: Vec<String>,
    active_params: usize,
    checkpoint_bytes: usize,
    variational: crate::losses::VariationalTerms,
    wall_time_secs: f64,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Report(e.to_string())
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_err)
}

fn write_metrics(history: &TrainHistory, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in &history.records {
        w.write_record([
            r.step.to_string(),
            fmt(r.loss.total),
            fmt(r.loss.mse),
            fmt(r.loss.reg),
            fmt(r.loss.entropy),
            fmt(r.loss.weight),
            r.active_params.to_string(),
            r.bytes.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_ranks(run: &TrainRun, path: &Path) -> Result<()> {
    let history = &run.history;
    let mut w = writer(path)?;
    let mut header = vec!["layer_name".to_string(), "kind".into(), "final_rank".into()];
    header.extend(history.records.iter().map(|r| format!("step_{}", r.step)));
    w.write_record(&header).map_err(csv_err)?;
    for (i, layer) in run.model.layers().iter().enumerate() {
        let mut row = vec![layer.name().to_string(), layer.kind().to_string(), layer.d().to_string()];
        row.extend(history.records.iter().map(|r| r.ranks[i].to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv`, `ranks.csv` and `summary.json` for a run whose
/// checkpoint took `checkpoint_bytes`.
pub fn export_reports(config: &TrainConfig, run: &TrainRun, checkpoint_bytes: usize, outdir: &Path) -> Result<()> {
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    write_metrics(&run.history, &outdir.join(METRICS_FILE))?;
    write_ranks(run, &outdir.join(RANKS_FILE))?;

    let layers = run.model.layers();
    let summary = Summary {
        config,
        steps_run: run.history.records.len(),
        final_loss: run.history.records.last().map(|r| &r.loss),
        initial_eval: run.history.initial_eval,
        final_eval: run.history.final_eval,
        layers: layers
            .iter()
            .map(|l| {
                (
                    l.name().to_string(),
                    LayerSummary { kind: l.kind().to_string(), final_rank: l.d(), nu: l.nu() },
                )
            })
            .collect(),
        layer_order: layers.iter().map(|l| l.name().to_string()).collect(),
        active_params: run.history.final_footprint.params,
        checkpoint_bytes,
        variational: variational_diagnostic(layers, &config.prior()),
        wall_time_secs: run.history.wall_time_secs,
    };
    let path = outdir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Report(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Saves the checkpoint and all reports of `run` under `outdir`.
pub fn write_run(config: &TrainConfig, run: &TrainRun, outdir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let checkpoint = outdir.join(CHECKPOINT_FILE);
    let checkpoint_bytes = save_checkpoint(run.model.layers(), &checkpoint)?;
    export_reports(config, run, checkpoint_bytes, outdir)?;
    Ok(ReportFiles {
        checkpoint,
        metrics: outdir.join(METRICS_FILE),
        ranks: outdir.join(RANKS_FILE),
        summary: outdir.join(SUMMARY_FILE),
        checkpoint_bytes,
    })
}

/// Writes the tradeoff table `label,final_mse,params,bytes,ranks`.
pub fn write_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["label", "final_mse", "params", "bytes", "ranks"]).map_err(csv_err)?;
    for r in rows {
        let ranks = r.ranks.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        w.write_record([r.label.clone(), fmt(r.final_mse), r.params.to_string(), r.bytes.to_string(), ranks])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::read_checkpoint;
    use crate::train::train_run;

    fn tiny(steps: usize) -> TrainConfig {
        TrainConfig {
            d_model: 8,
            k_tokens: 2,
            d_cond: 4,
            planted_ranks: vec![1; 9],
            r_max: 16,
            n_train: 8,
            n_eval: 4,
            steps,
            batch_size: 8,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn reports_agree_with_checkpoint() {
        let cfg = tiny(6);
        let run = train_run(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_run(&cfg, &run, dir.path()).unwrap();

        let metrics = std::fs::read_to_string(&files.metrics).unwrap();
        assert_eq!(metrics.lines().count(), cfg.steps + 1);
        assert!(metrics.starts_with("step,total,mse,reg,entropy,weight,active_params,bytes\n"));
        assert!(!metrics.contains('\r'));

        let ckpt = read_checkpoint(&files.checkpoint).unwrap();
        let mut rdr = csv::Reader::from_path(&files.ranks).unwrap();
        for (rec, row) in ckpt.iter().zip(rdr.records()) {
            let row = row.unwrap();
            assert_eq!(&row[0], rec.name);
            assert_eq!(row[2].parse::<usize>().unwrap(), rec.d);
            assert_eq!(row.len(), 3 + cfg.steps);
        }

        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&files.summary).unwrap()).unwrap();
        assert_eq!(summary["checkpoint_bytes"].as_u64().unwrap() as usize, files.checkpoint_bytes);
        assert_eq!(
            std::fs::metadata(&files.checkpoint).unwrap().len() as usize,
            files.checkpoint_bytes
        );
        assert_eq!(summary["config"]["steps"], 6);
    }

    #[test]
    fn zero_step_run_has_header_only_metrics() {
        let cfg = tiny(0);
        let run = train_run(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_run(&cfg, &run, dir.path()).unwrap();
        let metrics = std::fs::read_to_string(files.metrics).unwrap();
        assert_eq!(metrics, "step,total,mse,reg,entropy,weight,active_params,bytes\n");
    }
}
