//! Grid sweeps over configuration keys.
//!
//! Grid file, one axis per line (`#` starts a comment):
//!
//! ```text
//! aux.lambda = 0, 1e-5, 1e-4, 1e-3
//! adapter.expert_rank, adapter.experts = 2:8, 4:4, 8:2
//! ```
//!
//! Keys listed together on one line move jointly; separate lines form a
//! cross product, the first line varying slowest. A file without axes runs
//! nothing and yields a header-only summary.

use std::path::Path;

use fedmoe_core::config::ExperimentConfig;
use fedmoe_core::experiment::run_experiment;
use fedmoe_core::{Error, Result};

use crate::{claim_dir, fresh_run_dir, output_root, resolve_config, SweepArgs};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Axis {
    pub keys: Vec<String>,
    /// Each point assigns one value per key.
    pub points: Vec<Vec<String>>,
}

pub fn parse_grid(text: &str) -> Result<Vec<Axis>> {
    let mut axes = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = format!("grid line {}", n + 1);
        let (lhs, rhs) = line
            .split_once('=')
            .ok_or_else(|| Error::config(at.clone(), "expected `key = v1, v2, ...`"))?;
        let keys: Vec<String> = lhs.split(',').map(|k| k.trim().to_string()).collect();
        if keys.iter().any(String::is_empty) {
            return Err(Error::config(at, "empty key"));
        }
        let mut points = Vec::new();
        for p in rhs.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let values: Vec<String> = p.split(':').map(|v| v.trim().to_string()).collect();
            if values.len() != keys.len() {
                return Err(Error::config(
                    at,
                    format!("point `{p}` has {} values for {} keys", values.len(), keys.len()),
                ));
            }
            points.push(values);
        }
        if points.is_empty() {
            return Err(Error::config(at, "no values"));
        }
        axes.push(Axis { keys, points });
    }
    Ok(axes)
}

/// Every combination of one point per axis, as key/value assignments.
pub fn grid_cells(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    if axes.is_empty() {
        return Vec::new();
    }
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.points.len());
        for cell in &cells {
            for point in &axis.points {
                let mut c = cell.clone();
                c.extend(axis.keys.iter().cloned().zip(point.iter().cloned()));
                next.push(c);
            }
        }
        cells = next;
    }
    cells
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub config_id: String,
    pub values: Vec<String>,
    pub final_accuracy: Option<f64>,
    pub final_mean_util_kl: Option<f64>,
    pub expert_params: Option<usize>,
    pub trainable_params: Option<usize>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub keys: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepSummary {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["config_id".to_string()];
        header.extend(self.keys.iter().cloned());
        header.extend(
            ["final_accuracy", "final_mean_util_kl", "expert_params", "trainable_params", "status"]
                .map(String::from),
        );
        let csv_err = |e: csv::Error| Error::Input(format!("summary: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![r.config_id.clone()];
            rec.extend(r.values.iter().cloned());
            rec.push(opt(r.final_accuracy.map(|v| format!("{v:.10}"))));
            rec.push(opt(r.final_mean_util_kl.map(|v| format!("{v:.10}"))));
            rec.push(opt(r.expert_params.map(|v| v.to_string())));
            rec.push(opt(r.trainable_params.map(|v| v.to_string())));
            rec.push(r.status.clone());
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(format!("summary: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status != "ok").count()
    }
}

/// Runs every cell in order with the base seeds, each in `dir/cell_NNN`, and
/// writes `dir/summary.csv`. Failed cells are recorded and skipped.
pub fn run_sweep(base: &ExperimentConfig, axes: &[Axis], dir: &Path) -> Result<SweepSummary> {
    let mut keys: Vec<String> = Vec::new();
    for a in axes {
        for k in &a.keys {
            if !keys.contains(k) {
                keys.push(k.clone());
            }
        }
    }
    let mut rows = Vec::new();
    for (i, cell) in grid_cells(axes).into_iter().enumerate() {
        let config_id = format!("cell_{i:03}");
        let values: Vec<String> = keys
            .iter()
            .map(|k| {
                cell.iter()
                    .rev()
                    .find(|(ck, _)| ck == k)
                    .map(|(_, v)| v.clone())
                    .unwrap_or_default()
            })
            .collect();
        let mut cfg = base.clone();
        let outcome = cell
            .iter()
            .try_for_each(|(k, v)| cfg.set(k, v))
            .and_then(|()| cfg.validate())
            .and_then(|()| run_experiment(&cfg, &dir.join(&config_id)));
        let row = match outcome {
            Ok(out) => SweepRow {
                config_id,
                values,
                final_accuracy: out.final_accuracy(),
                final_mean_util_kl: out.final_mean_util_kl(),
                expert_params: Some(out.expert_parameters),
                trainable_params: Some(out.trainable_parameters),
                status: "ok".into(),
            },
            Err(e) => {
                eprintln!("{config_id} failed: {e}");
                SweepRow {
                    config_id,
                    values,
                    final_accuracy: None,
                    final_mean_util_kl: None,
                    expert_params: None,
                    trainable_params: None,
                    status: format!("failed: {e}"),
                }
            }
        };
        rows.push(row);
    }
    let summary = SweepSummary { keys, rows };
    let path = dir.join("summary.csv");
    std::fs::write(&path, summary.to_csv()?).map_err(|e| Error::io(path, e))?;
    Ok(summary)
}

pub(crate) fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let base = resolve_config(&args.config)?;
    let text = std::fs::read_to_string(&args.grid).map_err(|e| Error::io(&args.grid, e))?;
    let axes = parse_grid(&text)?;
    let dir = match &args.config.out {
        Some(d) => claim_dir(d)?,
        None => fresh_run_dir(&output_root(&base), &base)?,
    };
    eprintln!("sweep directory: {}", dir.display());
    let summary = run_sweep(&base, &axes, &dir)?;
    println!("{}", dir.join("summary.csv").display());
    match summary.failures() {
        0 => Ok(()),
        n => Err(Error::Input(format!(
            "{n} of {} sweep cells failed; see summary.csv",
            summary.rows.len()
        ))),
    }
}
