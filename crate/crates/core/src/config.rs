//! Experiment configuration as flat `dotted.key = value` text.
//!
//! Lines starting with `#` and blank lines are ignored. Every key has a
//! default, so a file only lists what it changes. [`ExperimentConfig::to_text`]
//! writes every key in a fixed order; feeding that text back reproduces the
//! same configuration exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::autodiff::{AdamConfig, WeightDecayMode};
use crate::backbone::BackboneConfig;
use crate::data::{PartitionScheme, PartitionSpec};
use crate::error::{Error, Result};
use crate::federation::{Capability, RoundConfig, SparsityPolicy, TrainConfig};
use crate::losses::{AuxLossConfig, LayerReduction};
use crate::moe::{Activation, AdapterConfig, GatingMode};
use crate::rng::derive_seed;

pub const PRESETS: [&str; 2] = ["agnews-like", "cifar-like"];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    Csv(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Fixed,
    Capability,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankSpec {
    /// Same rank for every expert.
    Uniform(usize),
    PerExpert(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub ffn_width: usize,
    pub train_head: bool,

    pub experts: usize,
    pub expert_rank: RankSpec,
    pub gating: GatingMode,
    pub activation: Activation,
    pub init_std: f64,

    pub policy: PolicyKind,
    pub k: usize,
    pub k_high: usize,
    pub k_low: usize,
    /// Per-client capability; empty means every client is `high`.
    pub capabilities: Vec<Capability>,
    /// `None` evaluates with the largest client K.
    pub eval_k: Option<usize>,

    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecayMode,
    pub reset_optimizer: bool,
    pub parallel: bool,
    pub eval_batch_size: usize,

    pub aux: AuxLossConfig,

    pub source: DataSource,
    pub samples: usize,
    pub separation: f64,
    pub input_dim: usize,
    pub partition: String,
    pub alpha: f64,
    pub test_fraction: f64,

    pub run_seed: u64,
    pub data_seed: u64,
    pub frozen_seed: u64,

    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 32,
            heads: 4,
            seq_len: 8,
            classes: 4,
            ffn_width: 64,
            train_head: false,
            experts: 8,
            expert_rank: RankSpec::Uniform(4),
            gating: GatingMode::TopKSoftmax,
            activation: Activation::Gelu,
            init_std: 0.02,
            policy: PolicyKind::Fixed,
            k: 2,
            k_high: 4,
            k_low: 1,
            capabilities: Vec::new(),
            eval_k: None,
            clients: 4,
            rounds: 20,
            local_epochs: 1,
            batch_size: 128,
            lr: 3e-4,
            weight_decay: 0.01,
            decay_mode: WeightDecayMode::L2,
            reset_optimizer: false,
            parallel: true,
            eval_batch_size: 256,
            aux: AuxLossConfig::default(),
            source: DataSource::Synthetic,
            samples: 2000,
            separation: 3.0,
            input_dim: 16,
            partition: "dirichlet".into(),
            alpha: 1.0,
            test_fraction: 0.2,
            run_seed: 0,
            data_seed: 0,
            frozen_seed: 0,
            output_dir: None,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected `true` or `false`, got `{value}`"))),
    }
}

fn parse_enum<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::config(key, e.to_string()))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Named starting points. Both use `T = 20` rounds, batch 128, Adam at
    /// learning rate 3e-4 with weight decay 0.01.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        match name {
            "agnews-like" => Ok(Self {
                clients: 4,
                classes: 4,
                ..base
            }),
            "cifar-like" => Ok(Self {
                clients: 10,
                classes: 10,
                ..base
            }),
            other => Err(Error::config(
                "preset",
                format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")),
            )),
        }
    }

    /// Every recognized key, in canonical order.
    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "backbone.layers" => self.layers = parse_num(key, v)?,
            "backbone.width" => self.width = parse_num(key, v)?,
            "backbone.heads" => self.heads = parse_num(key, v)?,
            "backbone.seq_len" => self.seq_len = parse_num(key, v)?,
            "backbone.classes" => self.classes = parse_num(key, v)?,
            "backbone.ffn_width" => self.ffn_width = parse_num(key, v)?,
            "backbone.train_head" => self.train_head = parse_bool(key, v)?,
            "adapter.experts" => self.experts = parse_num(key, v)?,
            "adapter.expert_rank" => {
                let ranks: Vec<usize> = parse_list(key, v)?;
                self.expert_rank = match ranks.as_slice() {
                    [] => return Err(Error::config(key, "expected a rank or a comma-separated list")),
                    [r] => RankSpec::Uniform(*r),
                    _ => RankSpec::PerExpert(ranks),
                };
            }
            "adapter.gating" => self.gating = parse_enum(key, v)?,
            "adapter.activation" => self.activation = parse_enum(key, v)?,
            "adapter.init_std" => self.init_std = parse_num(key, v)?,
            "sparsity.policy" => {
                self.policy = match v {
                    "fixed" => PolicyKind::Fixed,
                    "capability" => PolicyKind::Capability,
                    _ => return Err(Error::config(key, format!("expected `fixed` or `capability`, got `{v}`"))),
                }
            }
            "sparsity.k" => self.k = parse_num(key, v)?,
            "sparsity.k_high" => self.k_high = parse_num(key, v)?,
            "sparsity.k_low" => self.k_low = parse_num(key, v)?,
            "sparsity.capabilities" => {
                self.capabilities = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(Capability::from_str)
                    .collect::<Result<_>>()?
            }
            "sparsity.eval_k" => {
                self.eval_k = if v == "auto" { None } else { Some(parse_num(key, v)?) }
            }
            "federation.clients" => self.clients = parse_num(key, v)?,
            "federation.rounds" => self.rounds = parse_num(key, v)?,
            "federation.local_epochs" => self.local_epochs = parse_num(key, v)?,
            "federation.batch_size" => self.batch_size = parse_num(key, v)?,
            "federation.lr" => self.lr = parse_num(key, v)?,
            "federation.weight_decay" => self.weight_decay = parse_num(key, v)?,
            "federation.decay_mode" => self.decay_mode = parse_enum(key, v)?,
            "federation.reset_optimizer" => self.reset_optimizer = parse_bool(key, v)?,
            "federation.parallel" => self.parallel = parse_bool(key, v)?,
            "federation.eval_batch_size" => self.eval_batch_size = parse_num(key, v)?,
            "aux.lambda" => self.aux.lambda = parse_num(key, v)?,
            "aux.theta_th" => self.aux.theta_th = parse_num(key, v)?,
            "aux.layer_reduction" => self.aux.layer_reduction = parse_enum::<LayerReduction>(key, v)?,
            "data.source" => {
                self.source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "csv" => DataSource::Csv(match &self.source {
                        DataSource::Csv(p) => p.clone(),
                        DataSource::Synthetic => PathBuf::new(),
                    }),
                    _ => return Err(Error::config(key, format!("expected `synthetic` or `csv`, got `{v}`"))),
                }
            }
            "data.path" => {
                if v.is_empty() {
                    if let DataSource::Csv(_) = self.source {
                        self.source = DataSource::Csv(PathBuf::new());
                    }
                } else {
                    self.source = DataSource::Csv(PathBuf::from(v));
                }
            }
            "data.samples" => self.samples = parse_num(key, v)?,
            "data.separation" => self.separation = parse_num(key, v)?,
            "data.input_dim" => self.input_dim = parse_num(key, v)?,
            "data.partition" => {
                if !["dirichlet", "one_label", "iid"].contains(&v) {
                    return Err(Error::config(
                        key,
                        format!("expected `dirichlet`, `one_label` or `iid`, got `{v}`"),
                    ));
                }
                self.partition = v.to_string();
            }
            "data.alpha" => self.alpha = parse_num(key, v)?,
            "data.test_fraction" => self.test_fraction = parse_num(key, v)?,
            "seed.run" => self.run_seed = parse_num(key, v)?,
            "seed.data" => self.data_seed = parse_num(key, v)?,
            "seed.frozen" => self.frozen_seed = parse_num(key, v)?,
            "output.dir" => self.output_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", n + 1),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// `(key, value)` pairs for every setting, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let rank = match &self.expert_rank {
            RankSpec::Uniform(r) => r.to_string(),
            RankSpec::PerExpert(rs) => join(rs),
        };
        let caps: Vec<&str> = self.capabilities.iter().map(|c| c.as_str()).collect();
        let (source, path) = match &self.source {
            DataSource::Synthetic => ("synthetic", String::new()),
            DataSource::Csv(p) => ("csv", p.display().to_string()),
        };
        vec![
            ("backbone.layers", self.layers.to_string()),
            ("backbone.width", self.width.to_string()),
            ("backbone.heads", self.heads.to_string()),
            ("backbone.seq_len", self.seq_len.to_string()),
            ("backbone.classes", self.classes.to_string()),
            ("backbone.ffn_width", self.ffn_width.to_string()),
            ("backbone.train_head", self.train_head.to_string()),
            ("adapter.experts", self.experts.to_string()),
            ("adapter.expert_rank", rank),
            ("adapter.gating", self.gating.as_str().into()),
            ("adapter.activation", self.activation.as_str().into()),
            ("adapter.init_std", self.init_std.to_string()),
            (
                "sparsity.policy",
                match self.policy {
                    PolicyKind::Fixed => "fixed",
                    PolicyKind::Capability => "capability",
                }
                .into(),
            ),
            ("sparsity.k", self.k.to_string()),
            ("sparsity.k_high", self.k_high.to_string()),
            ("sparsity.k_low", self.k_low.to_string()),
            ("sparsity.capabilities", caps.join(",")),
            ("sparsity.eval_k", self.eval_k.map_or("auto".into(), |k| k.to_string())),
            ("federation.clients", self.clients.to_string()),
            ("federation.rounds", self.rounds.to_string()),
            ("federation.local_epochs", self.local_epochs.to_string()),
            ("federation.batch_size", self.batch_size.to_string()),
            ("federation.lr", self.lr.to_string()),
            ("federation.weight_decay", self.weight_decay.to_string()),
            ("federation.decay_mode", self.decay_mode.as_str().into()),
            ("federation.reset_optimizer", self.reset_optimizer.to_string()),
            ("federation.parallel", self.parallel.to_string()),
            ("federation.eval_batch_size", self.eval_batch_size.to_string()),
            ("aux.lambda", self.aux.lambda.to_string()),
            ("aux.theta_th", self.aux.theta_th.to_string()),
            ("aux.layer_reduction", self.aux.layer_reduction.as_str().into()),
            ("data.source", source.into()),
            ("data.path", path),
            ("data.samples", self.samples.to_string()),
            ("data.separation", self.separation.to_string()),
            ("data.input_dim", self.input_dim.to_string()),
            ("data.partition", self.partition.clone()),
            ("data.alpha", self.alpha.to_string()),
            ("data.test_fraction", self.test_fraction.to_string()),
            ("seed.run", self.run_seed.to_string()),
            ("seed.data", self.data_seed.to_string()),
            ("seed.frozen", self.frozen_seed.to_string()),
            (
                "output.dir",
                self.output_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
            ),
        ]
    }

    /// Canonical text form: every key, fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Short digest of the canonical text, excluding `output.dir`.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "output.dir" {
                h.update(format!("{k}={v}\n"));
            }
        }
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn ranks(&self) -> Vec<usize> {
        match &self.expert_rank {
            RankSpec::Uniform(r) => vec![*r; self.experts],
            RankSpec::PerExpert(rs) => rs.clone(),
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            seq_len: self.seq_len,
            classes: self.classes,
            input_dim: self.input_dim,
            ffn_width: self.ffn_width,
            frozen_seed: self.frozen_seed,
            train_head: self.train_head,
        }
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            dim: self.width,
            ranks: self.ranks(),
            k: match self.policy {
                PolicyKind::Fixed => self.k,
                PolicyKind::Capability => self.k_high.max(self.k_low),
            },
            gating: self.gating,
            activation: self.activation,
            init_std: self.init_std,
        }
    }

    pub fn sparsity_policy(&self) -> SparsityPolicy {
        match self.policy {
            PolicyKind::Fixed => SparsityPolicy::Fixed(self.k),
            PolicyKind::Capability => SparsityPolicy::CapabilityMap {
                high: self.k_high,
                low: self.k_low,
            },
        }
    }

    pub fn client_capabilities(&self) -> Vec<Capability> {
        if self.capabilities.is_empty() {
            vec![Capability::High; self.clients]
        } else {
            self.capabilities.clone()
        }
    }

    pub fn partition_scheme(&self) -> PartitionScheme {
        match self.partition.as_str() {
            "one_label" => PartitionScheme::OneLabel,
            "iid" => PartitionScheme::Iid,
            _ => PartitionScheme::Dirichlet { alpha: self.alpha },
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            scheme: self.partition_scheme(),
            clients: self.clients,
            seed: derive_seed(self.data_seed, &[0xDA7A]),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            decay_mode: self.decay_mode,
            ..AdamConfig::default()
        }
    }

    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            train: TrainConfig {
                epochs: self.local_epochs,
                batch_size: self.batch_size,
                adam: self.adam(),
                aux: self.aux,
                reset_optimizer: self.reset_optimizer,
                run_seed: self.run_seed,
            },
            eval_k: self.eval_k,
            eval_batch_size: self.eval_batch_size,
            parallel: self.parallel,
        }
    }

    /// Checks every cross-field constraint. Runs before any compute.
    pub fn validate(&self) -> Result<()> {
        self.backbone_config().validate()?;
        if self.experts == 0 {
            return Err(Error::config("adapter.experts", "must be positive"));
        }
        if let RankSpec::PerExpert(rs) = &self.expert_rank {
            if rs.len() != self.experts {
                return Err(Error::config(
                    "adapter.expert_rank",
                    format!("{} ranks listed for {} experts", rs.len(), self.experts),
                ));
            }
        }
        self.adapter_config().validate()?;
        let in_range = |k: usize, key: &str| -> Result<()> {
            if k == 0 || k > self.experts {
                Err(Error::config(key, format!("K={k} outside [1, {}]", self.experts)))
            } else {
                Ok(())
            }
        };
        match self.policy {
            PolicyKind::Fixed => in_range(self.k, "sparsity.k")?,
            PolicyKind::Capability => {
                in_range(self.k_high, "sparsity.k_high")?;
                in_range(self.k_low, "sparsity.k_low")?;
            }
        }
        if let Some(k) = self.eval_k {
            in_range(k, "sparsity.eval_k")?;
        }
        if !self.capabilities.is_empty() && self.capabilities.len() != self.clients {
            return Err(Error::config(
                "sparsity.capabilities",
                format!("{} entries for {} clients", self.capabilities.len(), self.clients),
            ));
        }
        let positive = [
            ("federation.clients", self.clients),
            ("federation.local_epochs", self.local_epochs),
            ("federation.batch_size", self.batch_size),
            ("federation.eval_batch_size", self.eval_batch_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("federation.lr", "must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("federation.weight_decay", "must be finite and >= 0"));
        }
        self.aux.validate()?;
        match &self.source {
            DataSource::Synthetic => {
                if self.samples < self.classes {
                    return Err(Error::config(
                        "data.samples",
                        format!("need at least {} samples", self.classes),
                    ));
                }
                if !(self.separation > 0.0 && self.separation.is_finite()) {
                    return Err(Error::config("data.separation", "must be positive"));
                }
            }
            DataSource::Csv(p) if p.as_os_str().is_empty() => {
                return Err(Error::config("data.path", "required when data.source = csv"));
            }
            DataSource::Csv(_) => {}
        }
        if self.partition == "dirichlet" && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("data.alpha", "must be positive"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("data.test_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}
