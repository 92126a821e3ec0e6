//! End-to-end experiment driver and run-directory artifacts.
//!
//! A run directory holds:
//! - `config.txt`: the resolved configuration (replayable)
//! - `metadata.txt`: resolved configuration plus derived seeds and accounting
//! - `metrics.csv`: per-round client and global rows
//! - `heatmap_round_XX.csv` and `routing_probs_round_XX.csv` per evaluated round
//! - `partition.csv`: training-example index to client assignment
//! - `checkpoint.bin`: final global parameters

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::backbone::{build_backbone, Backbone};
use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{load_csv, partition, partition_csv, synth_dataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::federation::{assign_sparsity, run_round, ClientState, RoundReport, ServerState};
use crate::losses::{aux_loss_layer, LayerReduction};
use crate::metrics::{heatmap_csv, routing_probs_csv};
use crate::rng::derive_seed;

pub const METRICS_HEADER: &str = "round,client_id,task_loss,aux_loss,accuracy,mean_util_kl";

/// Everything a finished run produced in memory.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    pub final_params: Vec<Tensor>,
    pub parameter_names: Vec<String>,
    pub frozen_fingerprint: String,
    pub trainable_parameters: usize,
    pub expert_parameters: usize,
}

impl ExperimentOutcome {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.reports.last().map(|r| r.accuracy)
    }

    pub fn final_mean_util_kl(&self) -> Option<f64> {
        self.reports.last().and_then(|r| r.utilization.mean)
    }
}

/// Data, model and clients prepared from a configuration.
pub struct Setup {
    pub template: Backbone,
    pub clients: Vec<ClientState>,
    pub test: LabeledDataset,
    pub shards: Vec<Vec<usize>>,
}

fn load_data(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    match &cfg.source {
        DataSource::Synthetic => synth_dataset(
            cfg.samples,
            cfg.classes,
            cfg.seq_len,
            cfg.input_dim,
            cfg.separation,
            derive_seed(cfg.data_seed, &[0x5E7]),
        ),
        DataSource::Csv(path) => load_csv(path, cfg.seq_len, cfg.input_dim, cfg.classes),
    }
}

/// Builds the shared backbone, splits and partitions the data, and creates
/// one client per shard with its sparsity assigned.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Setup> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let (train, test) = data.train_test_split(cfg.test_fraction, derive_seed(cfg.data_seed, &[0x7E57]))?;
    let shards = partition(&train, &cfg.partition_spec())?;
    let template = build_backbone(&cfg.backbone_config(), &cfg.adapter_config())?;
    let init = template.export_parameters();
    let caps = cfg.client_capabilities();
    let mut clients = shards
        .iter()
        .enumerate()
        .map(|(id, shard)| Ok(ClientState::new(id, train.subset(shard)?, caps[id], init.clone(), 1)))
        .collect::<Result<Vec<_>>>()?;
    assign_sparsity(&mut clients, cfg.sparsity_policy(), cfg.experts)?;
    Ok(Setup {
        template,
        clients,
        test,
        shards,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.10}"))
}

/// Aux term of the global model's test-set routing distribution, before λ.
fn global_aux(report: &RoundReport, cfg: &ExperimentConfig) -> Option<f64> {
    let layers = report.load.mean_probs();
    if layers.is_empty() || report.load.tokens().contains(&0) {
        return None;
    }
    let mut values = Vec::with_capacity(layers.len());
    for p in layers {
        values.push(aux_loss_layer(p, &cfg.aux).ok()?);
    }
    let s: f64 = values.iter().sum();
    Some(match cfg.aux.layer_reduction {
        LayerReduction::Sum => s,
        LayerReduction::Mean => s / values.len() as f64,
    })
}

/// Metrics rows for one round: every client, then `global`.
pub fn metrics_rows(report: &RoundReport, cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    for c in &report.clients {
        let _ = writeln!(
            out,
            "{},{},{:.10},{:.10},,",
            report.round, c.client_id, c.task_loss, c.aux_loss
        );
    }
    let _ = writeln!(
        out,
        "{},global,{:.10},{},{:.10},{}",
        report.round,
        report.test_loss,
        fmt_opt(global_aux(report, cfg)),
        report.accuracy,
        fmt_opt(report.utilization.mean)
    );
    out
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

fn metadata(cfg: &ExperimentConfig, setup: &Setup, fingerprint: &str) -> String {
    let mut out = cfg.to_text();
    let derived = [
        ("derived.data_seed.synthetic", derive_seed(cfg.data_seed, &[0x5E7])),
        ("derived.data_seed.split", derive_seed(cfg.data_seed, &[0x7E57])),
        ("derived.data_seed.partition", cfg.partition_spec().seed),
        ("derived.frozen_seed.weights", derive_seed(cfg.frozen_seed, &[0xF0])),
        ("derived.frozen_seed.adapters", derive_seed(cfg.frozen_seed, &[0xADA])),
    ];
    for (k, v) in derived {
        let _ = writeln!(out, "{k} = {v}");
    }
    let ks: Vec<String> = setup.clients.iter().map(|c| c.k.to_string()).collect();
    let sizes: Vec<String> = setup.clients.iter().map(|c| c.shard.len().to_string()).collect();
    let eval_k = cfg
        .eval_k
        .unwrap_or_else(|| setup.clients.iter().map(|c| c.k).max().unwrap_or(1));
    let adam = cfg.adam();
    let lines = [
        ("run.config_hash", cfg.hash()),
        ("run.client_seed_rule", "derive_seed(seed.run, [round, client_id])".to_string()),
        ("run.client_k", ks.join(",")),
        ("run.client_samples", sizes.join(",")),
        ("run.test_samples", setup.test.len().to_string()),
        ("run.eval_k", eval_k.to_string()),
        ("run.adam_beta1", adam.beta1.to_string()),
        ("run.adam_beta2", adam.beta2.to_string()),
        ("run.adam_eps", adam.eps.to_string()),
        ("run.expert_parameters", (cfg.adapter_config().expert_parameter_count() * cfg.layers).to_string()),
        ("run.trainable_parameters", setup.template.trainable_parameter_count().to_string()),
        ("run.frozen_fingerprint", fingerprint.to_string()),
        ("run.version", env!("CARGO_PKG_VERSION").to_string()),
    ];
    for (k, v) in lines {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

/// Runs every round and writes all artifacts into `run_dir` (created if
/// needed). With zero rounds the checkpoint holds the initial parameters.
pub fn run_experiment(cfg: &ExperimentConfig, run_dir: &Path) -> Result<ExperimentOutcome> {
    let mut setup = prepare(cfg)?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let fingerprint = setup.template.frozen_fingerprint();
    write(run_dir, "config.txt", cfg.to_text())?;
    write(run_dir, "metadata.txt", metadata(cfg, &setup, &fingerprint))?;
    write(run_dir, "partition.csv", partition_csv(&setup.shards))?;

    let mut metrics = format!("{METRICS_HEADER}\n");
    write(run_dir, "metrics.csv", &metrics)?;
    let round_cfg = cfg.round_config();
    let mut server = ServerState::new(setup.template.export_parameters());
    for _ in 0..cfg.rounds {
        let report = run_round(&mut server, &mut setup.clients, &setup.template, &round_cfg, &setup.test)?;
        metrics.push_str(&metrics_rows(&report, cfg));
        write(run_dir, "metrics.csv", &metrics)?;
        write(run_dir, &format!("heatmap_round_{:02}.csv", report.round), heatmap_csv(&report.load))?;
        write(
            run_dir,
            &format!("routing_probs_round_{:02}.csv", report.round),
            routing_probs_csv(&report.load),
        )?;
    }
    if setup.template.frozen_fingerprint() != fingerprint {
        return Err(Error::Usage("frozen weights changed during the run".into()));
    }
    let names = setup.template.parameter_names();
    Checkpoint::new(names.clone(), server.global.clone())?.save(&run_dir.join("checkpoint.bin"))?;
    Ok(ExperimentOutcome {
        reports: server.history,
        final_params: server.global,
        parameter_names: names,
        frozen_fingerprint: fingerprint,
        trainable_parameters: setup.template.trainable_parameter_count(),
        expert_parameters: cfg.adapter_config().expert_parameter_count() * cfg.layers,
    })
}

/// Loads `checkpoint.bin` from a run directory into a model built from `cfg`.
pub fn load_checkpoint_into(cfg: &ExperimentConfig, path: &Path) -> Result<Backbone> {
    let ck = Checkpoint::load(path)?;
    let mut model = build_backbone(&cfg.backbone_config(), &cfg.adapter_config())?;
    if ck.names != model.parameter_names() {
        return Err(Error::Compatibility {
            location: path.display().to_string(),
            message: "tensor names differ from the configured model".into(),
        });
    }
    model.load_parameters(&ck.tensors)?;
    Ok(model)
}
