//! Synthetic classification data, a CSV feature loader, and client partitioners.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// `n` examples of `seq × input_dim` features with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    seq_len: usize,
    input_dim: usize,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        seq_len: usize,
        input_dim: usize,
        classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Input("dataset is empty".into()));
        }
        if features.len() != labels.len() * seq_len * input_dim {
            return Err(Error::Dimension {
                op: "dataset",
                left: vec![labels.len(), seq_len, input_dim],
                right: vec![features.len()],
            });
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {l} outside [0, {classes})")));
        }
        Ok(Self {
            features,
            labels,
            seq_len,
            input_dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let w = self.seq_len * self.input_dim;
        &self.features[i * w..(i + 1) * w]
    }

    /// Stacks the chosen examples into a `b × seq × input_dim` tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let w = self.seq_len * self.input_dim;
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.example(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let t = Tensor::new(vec![indices.len(), self.seq_len, self.input_dim], data)
            .expect("batch shape");
        (t, labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let w = self.seq_len * self.input_dim;
        let mut features = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            features.extend_from_slice(self.example(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(features, labels, self.seq_len, self.input_dim, self.classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }

    /// Random split into `(train, test)` with `round(n·test_fraction)` test
    /// examples, at least one on each side.
    pub fn train_test_split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::config("data.test_fraction", "must lie in (0, 1)"));
        }
        if self.len() < 2 {
            return Err(Error::config("data.samples", "need at least two examples to split"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((self.len() as f64 * test_fraction).round() as usize).clamp(1, self.len() - 1);
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train)?, self.subset(test)?))
    }
}

/// Per-class Gaussian clusters. Each class gets a random mean whose token
/// rows have unit expected norm; examples add isotropic noise with standard
/// deviation `1 / separation`. Example `i` has label `i mod classes`.
pub fn synth_dataset(
    n: usize,
    classes: usize,
    seq_len: usize,
    input_dim: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes == 0 || seq_len == 0 || input_dim == 0 {
        return Err(Error::config("data", "classes, seq_len and input_dim must be positive"));
    }
    if n < classes {
        return Err(Error::config("data.samples", format!("need at least {classes} samples")));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::config("data.separation", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = seq_len * input_dim;
    let mean_dist = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).expect("std > 0");
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..w).map(|_| mean_dist.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0, 1.0 / separation).expect("std > 0");
    let mut features = Vec::with_capacity(n * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        features.extend(means[c].iter().map(|m| m + noise.sample(&mut rng)));
    }
    LabeledDataset::new(features, labels, seq_len, input_dim, classes)
}

/// Reads a CSV with a header row: every column but the last is a feature,
/// the last is an integer label. Features are reshaped to `seq_len × input_dim`.
pub fn load_csv(path: &Path, seq_len: usize, input_dim: usize, classes: usize) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Input(format!("{}: missing header row", path.display())))?;
    let width = header.split(',').count();
    if width != seq_len * input_dim + 1 {
        return Err(Error::Input(format!(
            "{}: {} columns, expected {} features + label",
            path.display(),
            width,
            seq_len * input_dim
        )));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != width {
            return Err(Error::Input(format!(
                "{}: row {} has {} columns, expected {width}",
                path.display(),
                row + 2,
                cells.len()
            )));
        }
        for c in &cells[..width - 1] {
            let v: f64 = c.parse().map_err(|_| {
                Error::Input(format!("{}: row {}: bad number `{c}`", path.display(), row + 2))
            })?;
            features.push(v);
        }
        let label: usize = cells[width - 1].parse().map_err(|_| {
            Error::Input(format!(
                "{}: row {}: bad label `{}`",
                path.display(),
                row + 2,
                cells[width - 1]
            ))
        })?;
        labels.push(label);
    }
    LabeledDataset::new(features, labels, seq_len, input_dim, classes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionScheme {
    Dirichlet { alpha: f64 },
    OneLabel,
    Iid,
}

impl PartitionScheme {
    pub fn name(&self) -> &'static str {
        match self {
            PartitionScheme::Dirichlet { .. } => "dirichlet",
            PartitionScheme::OneLabel => "one_label",
            PartitionScheme::Iid => "iid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub clients: usize,
    pub seed: u64,
}

/// Splits example indices across clients. The shards are disjoint and cover
/// every index. An empty shard takes one random example from the largest one.
pub fn partition(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let n_clients = spec.clients;
    if n_clients == 0 {
        return Err(Error::config("federation.clients", "must be positive"));
    }
    if n_clients > ds.len() {
        return Err(Error::config(
            "federation.clients",
            format!("{n_clients} clients but only {} examples", ds.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = ds.classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n_clients];

    match spec.scheme {
        PartitionScheme::Iid => {
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(&mut rng);
            for (pos, i) in idx.into_iter().enumerate() {
                shards[pos % n_clients].push(i);
            }
        }
        PartitionScheme::OneLabel => {
            for (c, members) in by_class.iter_mut().enumerate() {
                members.shuffle(&mut rng);
                // Clients holding class c: n ≡ c (mod classes). With fewer
                // clients than classes, class c goes to client c mod N.
                let owners: Vec<usize> = if n_clients >= classes {
                    (0..n_clients).filter(|n| n % classes == c).collect()
                } else {
                    vec![c % n_clients]
                };
                for (pos, &i) in members.iter().enumerate() {
                    shards[owners[pos % owners.len()]].push(i);
                }
            }
        }
        PartitionScheme::Dirichlet { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::config("data.alpha", "must be positive"));
            }
            let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config("data.alpha", e.to_string()))?;
            for members in by_class.iter_mut() {
                members.shuffle(&mut rng);
                let mut props: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = props.iter().sum();
                if total > 0.0 {
                    props.iter_mut().for_each(|p| *p /= total);
                } else {
                    // Every draw underflowed; put the class on one random client.
                    let pick = rng.random_range(0..n_clients);
                    props = (0..n_clients).map(|n| if n == pick { 1.0 } else { 0.0 }).collect();
                }
                let count = members.len();
                let mut start = 0;
                let mut cumulative = 0.0;
                for (client, p) in props.iter().enumerate() {
                    cumulative += p;
                    let end = if client + 1 == n_clients {
                        count
                    } else {
                        ((cumulative * count as f64).round() as usize).clamp(start, count)
                    };
                    shards[client].extend_from_slice(&members[start..end]);
                    start = end;
                }
            }
        }
    }

    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let largest = (0..n_clients)
            .max_by_key(|&c| (shards[c].len(), std::cmp::Reverse(c)))
            .expect("at least one client");
        let pick = rng.random_range(0..shards[largest].len());
        let moved = shards[largest].swap_remove(pick);
        shards[empty].push(moved);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

/// Shannon entropy (nats) of the label histogram of a shard.
pub fn label_entropy(ds: &LabeledDataset, shard: &[usize]) -> f64 {
    let mut counts = vec![0usize; ds.classes()];
    shard.iter().for_each(|&i| counts[ds.labels()[i]] += 1);
    let n = shard.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `index,client_id` rows for auditing an assignment.
pub fn partition_csv(shards: &[Vec<usize>]) -> String {
    let mut rows: Vec<(usize, usize)> = shards
        .iter()
        .enumerate()
        .flat_map(|(c, s)| s.iter().map(move |&i| (i, c)))
        .collect();
    rows.sort_unstable();
    let mut out = String::from("index,client_id\n");
    for (i, c) in rows {
        let _ = writeln!(out, "{i},{c}");
    }
    out
}
