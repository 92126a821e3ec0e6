//! Side-by-side merge of the global metric rows of several runs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use fedmoe_core::experiment::METRICS_HEADER;
use fedmoe_core::{Error, Result};

use crate::CompareArgs;

/// Columns copied from each run's global rows.
pub const COMPARED: [&str; 3] = ["accuracy", "mean_util_kl", "task_loss"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub name: String,
    /// round → values of [`COMPARED`], verbatim.
    pub rounds: BTreeMap<u64, [String; 3]>,
}

pub fn read_run(dir: &Path, name: &str) -> Result<RunMetrics> {
    let path = dir.join("metrics.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let corrupt = |msg: String| Error::Input(format!("run `{name}` ({}): {msg}", path.display()));
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| corrupt(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let expected: Vec<&str> = METRICS_HEADER.split(',').collect();
    if header != expected {
        return Err(corrupt(format!("unexpected header `{}`", header.join(","))));
    }
    let col = |c: &str| expected.iter().position(|h| *h == c).expect("known column");
    let mut rounds = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| corrupt(e.to_string()))?;
        if rec.get(col("client_id")) != Some("global") {
            continue;
        }
        let round: u64 = rec[col("round")]
            .parse()
            .map_err(|_| corrupt(format!("row {}: bad round `{}`", i + 2, &rec[col("round")])))?;
        let values = COMPARED.map(|c| rec[col(c)].to_string());
        if rounds.insert(round, values).is_some() {
            return Err(corrupt(format!("round {round} appears twice")));
        }
    }
    Ok(RunMetrics {
        name: name.to_string(),
        rounds,
    })
}

/// Distinct display names: the directory name, suffixed on collision.
fn run_names(dirs: &[PathBuf]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    dirs.iter()
        .map(|d| {
            let base = d
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| d.display().to_string());
            let mut name = base.clone();
            let mut n = 2;
            while !seen.insert(name.clone()) {
                name = format!("{base}#{n}");
                n += 1;
            }
            name
        })
        .collect()
}

/// Merged CSV plus warnings about rounds missing from some runs.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<(String, Vec<String>)> {
    let names = run_names(dirs);
    let runs: Vec<RunMetrics> = dirs
        .iter()
        .zip(&names)
        .map(|(d, n)| read_run(d, n))
        .collect::<Result<_>>()?;
    let all: BTreeSet<u64> = runs.iter().flat_map(|r| r.rounds.keys().copied()).collect();
    let mut warnings = Vec::new();
    for r in &runs {
        let missing: Vec<String> = all
            .iter()
            .filter(|k| !r.rounds.contains_key(k))
            .map(u64::to_string)
            .collect();
        if !missing.is_empty() {
            warnings.push(format!(
                "warning: run `{}` has no rounds {}; left blank",
                r.name,
                missing.join(",")
            ));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Input(format!("compare: {e}"));
    let mut header = vec!["round".to_string()];
    for r in &runs {
        header.extend(COMPARED.iter().map(|c| format!("{}.{c}", r.name)));
    }
    w.write_record(&header).map_err(csv_err)?;
    for round in &all {
        let mut rec = vec![round.to_string()];
        for r in &runs {
            match r.rounds.get(round) {
                Some(vals) => rec.extend(vals.iter().cloned()),
                None => rec.extend(std::iter::repeat_n(String::new(), COMPARED.len())),
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(format!("compare: {e}")))?;
    Ok((String::from_utf8(bytes).expect("csv output is UTF-8"), warnings))
}

pub(crate) fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let (csv, warnings) = compare_runs(&args.runs)?;
    for w in warnings {
        eprintln!("{w}");
    }
    match &args.output {
        Some(p) => std::fs::write(p, csv).map_err(|e| Error::io(p, e)),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
