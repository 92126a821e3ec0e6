//! Expert-load accounting, utilization KL, accuracy, and CSV export.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{Tape, Tensor};
use crate::backbone::Backbone;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{kl_divergence, TargetDistribution};
use crate::moe::RoutingStats;

/// Layers × experts selection counts, with the mean dense routing
/// probabilities kept alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadMatrix {
    counts: Vec<Vec<u64>>,
    mean_probs: Vec<Vec<f64>>,
    tokens: Vec<u64>,
}

impl LoadMatrix {
    pub fn new(layers: usize, experts: usize) -> Self {
        Self {
            counts: vec![vec![0; experts]; layers],
            mean_probs: vec![vec![0.0; experts]; layers],
            tokens: vec![0; layers],
        }
    }

    /// Counts only, e.g. for analysis of externally gathered traffic.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let m = counts.first().map_or(0, Vec::len);
        if m == 0 || counts.iter().any(|r| r.len() != m) {
            return Err(Error::Input("load matrix rows must share a positive width".into()));
        }
        let layers = counts.len();
        Ok(Self {
            counts,
            mean_probs: vec![vec![0.0; m]; layers],
            tokens: vec![0; layers],
        })
    }

    pub fn from_stats(stats: &[RoutingStats]) -> Self {
        Self {
            counts: stats.iter().map(|s| s.counts.clone()).collect(),
            mean_probs: stats.iter().map(RoutingStats::mean_probs).collect(),
            tokens: stats.iter().map(|s| s.tokens_seen).collect(),
        }
    }

    pub fn layers(&self) -> usize {
        self.counts.len()
    }

    pub fn experts(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    /// Tokens routed per layer (0 for matrices built from raw counts).
    pub fn tokens(&self) -> &[u64] {
        &self.tokens
    }

    pub fn mean_probs(&self) -> &[Vec<f64>] {
        &self.mean_probs
    }

    /// Row-normalized counts; `None` for layers with no traffic.
    pub fn frequencies(&self) -> Vec<Option<Vec<f64>>> {
        self.counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                (total > 0).then(|| row.iter().map(|&c| c as f64 / total as f64).collect())
            })
            .collect()
    }

    /// Elementwise sum; probability views are re-weighted by token counts.
    pub fn merge(&mut self, other: &LoadMatrix) -> Result<()> {
        if self.layers() != other.layers() || self.experts() != other.experts() {
            return Err(Error::Dimension {
                op: "load_merge",
                left: vec![self.layers(), self.experts()],
                right: vec![other.layers(), other.experts()],
            });
        }
        for l in 0..self.layers() {
            let (ta, tb) = (self.tokens[l] as f64, other.tokens[l] as f64);
            if ta + tb > 0.0 {
                for (a, b) in self.mean_probs[l].iter_mut().zip(&other.mean_probs[l]) {
                    *a = (*a * ta + b * tb) / (ta + tb);
                }
            }
            self.tokens[l] += other.tokens[l];
            for (a, b) in self.counts[l].iter_mut().zip(&other.counts[l]) {
                *a += b;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationKl {
    /// `None` for layers that saw no traffic.
    pub per_layer: Vec<Option<f64>>,
    /// Mean over non-empty layers; `None` when every layer is empty.
    pub mean: Option<f64>,
    pub warnings: Vec<String>,
}

/// KL of each layer's selection frequencies against uniform.
pub fn utilization_kl(load: &LoadMatrix) -> UtilizationKl {
    let uniform = TargetDistribution::uniform(load.experts().max(1));
    let mut warnings = Vec::new();
    let per_layer: Vec<Option<f64>> = load
        .frequencies()
        .into_iter()
        .enumerate()
        .map(|(l, freq)| match freq {
            Some(f) => Some(kl_divergence(&f, uniform.probs()).expect("frequencies are a distribution")),
            None => {
                warnings.push(format!("layer {l} recorded no tokens; excluded from mean"));
                None
            }
        })
        .collect();
    let present: Vec<f64> = per_layer.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    UtilizationKl {
        per_layer,
        mean,
        warnings,
    }
}

/// `layer,expert,count,frequency`, sorted by layer then expert.
pub fn heatmap_csv(load: &LoadMatrix) -> String {
    let mut out = String::from("layer,expert,count,frequency\n");
    for (l, (row, freq)) in load.counts.iter().zip(load.frequencies()).enumerate() {
        for (m, c) in row.iter().enumerate() {
            let f = freq.as_ref().map_or(0.0, |f| f[m]);
            let _ = writeln!(out, "{l},{m},{c},{f:.12}");
        }
    }
    out
}

pub fn export_heatmap_csv(load: &LoadMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, heatmap_csv(load)).map_err(|e| Error::io(path, e))
}

/// `layer,expert,mean_prob`: the dense routing distribution per layer.
pub fn routing_probs_csv(load: &LoadMatrix) -> String {
    let mut out = String::from("layer,expert,mean_prob\n");
    for (l, row) in load.mean_probs.iter().enumerate() {
        for (m, p) in row.iter().enumerate() {
            let _ = writeln!(out, "{l},{m},{p:.12}");
        }
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of a `n × C` logits tensor whose argmax matches the label.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = logits.dims2();
    if n != labels.len() || n == 0 {
        return Err(Error::Dimension {
            op: "accuracy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let correct = (0..n)
        .filter(|&i| argmax(&logits.data()[i * c..(i + 1) * c]) == labels[i])
        .count();
    Ok(correct as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_task_loss: f64,
    pub load: LoadMatrix,
}

/// Runs the model over `test` in fixed-size batches, returning accuracy,
/// mean cross-entropy and the routing load.
pub fn evaluate_accuracy(backbone: &Backbone, test: &LabeledDataset, batch_size: usize) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Input("test set is empty".into()));
    }
    let batch_size = batch_size.max(1);
    let mut load = LoadMatrix::new(backbone.adapters.len(), backbone.num_experts());
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..test.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (x, labels) = test.batch(chunk);
        let mut tape = Tape::new();
        let pass = backbone.forward(&mut tape, &x, true)?;
        let ce = tape.cross_entropy(pass.logits, &labels)?;
        loss_sum += tape.value(ce).data()[0] * chunk.len() as f64;
        let logits = tape.value(pass.logits);
        let (_, c) = logits.dims2();
        correct += labels
            .iter()
            .enumerate()
            .filter(|(i, &y)| argmax(&logits.data()[i * c..(i + 1) * c]) == y)
            .count();
        load.merge(&LoadMatrix::from_stats(&pass.stats))?;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / test.len() as f64,
        mean_task_loss: loss_sum / test.len() as f64,
        load,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn balanced_load_has_zero_kl() {
        let load = LoadMatrix::from_counts(vec![vec![5; 4], vec![7; 4]]).unwrap();
        let u = utilization_kl(&load);
        assert_eq!(u.per_layer, vec![Some(0.0), Some(0.0)]);
        assert_eq!(u.mean, Some(0.0));
    }

    #[test]
    fn single_expert_load_is_ln_m() {
        let mut row = vec![0; 8];
        row[3] = 100;
        let u = utilization_kl(&LoadMatrix::from_counts(vec![row]).unwrap());
        assert!((u.mean.unwrap() - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn skewed_load_matches_direct_sum() {
        let u = utilization_kl(&LoadMatrix::from_counts(vec![vec![10, 10, 20, 40]]).unwrap());
        let p = [0.125, 0.125, 0.25, 0.5];
        let direct: f64 = p.iter().map(|x| x * (x / 0.25f64).ln()).sum();
        assert!((u.mean.unwrap() - direct).abs() < 1e-12);
        assert!((direct - 0.1733).abs() < 1e-4);
    }

    #[test]
    fn empty_layers_are_excluded_with_warning() {
        let u = utilization_kl(&LoadMatrix::from_counts(vec![vec![0, 0], vec![3, 1]]).unwrap());
        assert_eq!(u.per_layer[0], None);
        assert_eq!(u.warnings.len(), 1);
        let expected = 0.75 * (1.5f64).ln() + 0.25 * (0.5f64).ln();
        assert!((u.mean.unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn heatmap_rows_are_deterministic_and_normalized() {
        let load = LoadMatrix::from_counts(vec![vec![1, 3], vec![2, 2]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        export_heatmap_csv(&load, &p1).unwrap();
        export_heatmap_csv(&load, &p2).unwrap();
        let text = std::fs::read_to_string(&p1).unwrap();
        assert_eq!(text, std::fs::read_to_string(&p2).unwrap());
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0], "layer,expert,count,frequency");
        let mut sums = [0.0; 2];
        for r in &rows[1..] {
            let cells: Vec<&str> = r.split(',').collect();
            sums[cells[0].parse::<usize>().unwrap()] += cells[3].parse::<f64>().unwrap();
        }
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-9));
    }

    #[test]
    fn io_errors_carry_the_path() {
        let load = LoadMatrix::from_counts(vec![vec![1]]).unwrap();
        let err = export_heatmap_csv(&load, Path::new("/nonexistent/dir/h.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/h.csv"));
    }

    #[test]
    fn merge_adds_counts() {
        let mut a = LoadMatrix::from_counts(vec![vec![1, 2]]).unwrap();
        a.merge(&LoadMatrix::from_counts(vec![vec![3, 4]]).unwrap()).unwrap();
        assert_eq!(a.counts(), &[vec![4, 6]]);
        assert!(a.merge(&LoadMatrix::new(2, 2)).is_err());
    }

    #[test]
    fn random_logits_score_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4000;
        let data: Vec<f64> = (0..n * 4).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let acc = accuracy_from_logits(&Tensor::new(vec![n, 4], data).unwrap(), &labels).unwrap();
        assert!((acc - 0.25).abs() < 0.05, "{acc}");
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        let acc = accuracy_from_logits(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), &[0]).unwrap();
        assert_eq!(acc, 1.0);
    }
}
