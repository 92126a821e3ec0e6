//! Synchronous federated rounds: broadcast, local training, weighted
//! averaging, and global evaluation.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::backbone::{Backbone, ForwardPass};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{aux_loss_layer_var, total_loss, AuxLossConfig, LayerReduction};
use crate::metrics::{evaluate_accuracy, utilization_kl, LoadMatrix, UtilizationKl};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capability {
    High,
    Low,
}

impl Capability {
    pub fn as_str(self) -> &'static str {
        match self {
            Capability::High => "high",
            Capability::Low => "low",
        }
    }
}

impl FromStr for Capability {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(Capability::High),
            "low" => Ok(Capability::Low),
            other => Err(Error::config("sparsity.capabilities", format!("unknown capability `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityPolicy {
    Fixed(usize),
    CapabilityMap { high: usize, low: usize },
}

pub struct ClientState {
    pub id: usize,
    pub shard: LabeledDataset,
    pub k: usize,
    pub capability: Capability,
    pub params: Vec<Tensor>,
    pub optimizer: AdamState,
}

impl ClientState {
    pub fn new(id: usize, shard: LabeledDataset, capability: Capability, params: Vec<Tensor>, k: usize) -> Self {
        Self {
            id,
            shard,
            k,
            capability,
            params,
            optimizer: AdamState::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: Vec<Tensor>,
    pub round: usize,
    pub history: Vec<RoundReport>,
}

impl ServerState {
    pub fn new(global: Vec<Tensor>) -> Self {
        Self {
            global,
            round: 0,
            history: Vec::new(),
        }
    }
}

/// Local training settings shared by all clients.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub aux: AuxLossConfig,
    /// Clear Adam moments at the start of every round.
    pub reset_optimizer: bool,
    pub run_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub client_id: usize,
    pub k: usize,
    pub samples: usize,
    pub steps: usize,
    /// Mean over steps of the batch cross-entropy.
    pub task_loss: f64,
    /// Mean over steps of the reduced per-layer auxiliary term, before λ.
    pub aux_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientReport>,
    pub accuracy: f64,
    pub test_loss: f64,
    pub eval_k: usize,
    pub utilization: UtilizationKl,
    pub load: LoadMatrix,
}

/// Round-level settings: local training plus evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub train: TrainConfig,
    /// Active experts for the global model; defaults to the largest client K.
    pub eval_k: Option<usize>,
    pub eval_batch_size: usize,
    pub parallel: bool,
}

fn check_shapes(reference: &[Tensor], got: &[Tensor], who: &str) -> Result<()> {
    if reference.len() != got.len() {
        return Err(Error::Compatibility {
            location: who.to_string(),
            message: format!("expected {} tensors, got {}", reference.len(), got.len()),
        });
    }
    for (i, (a, b)) in reference.iter().zip(got).enumerate() {
        if a.shape() != b.shape() {
            return Err(Error::Compatibility {
                location: format!("{who}, tensor {i}"),
                message: format!("expected shape {:?}, got {:?}", a.shape(), b.shape()),
            });
        }
    }
    Ok(())
}

/// Copies the global parameters into every client.
pub fn broadcast(server: &ServerState, clients: &mut [ClientState]) -> Result<()> {
    for c in clients.iter() {
        check_shapes(&server.global, &c.params, &format!("client {}", c.id))?;
    }
    for c in clients.iter_mut() {
        c.params = server.global.clone();
    }
    Ok(())
}

/// `|D_n| / Σ|D|` for each client.
pub fn aggregation_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Input("nothing to aggregate".into()));
    }
    if let Some(n) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Compatibility {
            location: format!("client {n}"),
            message: "shard size must be positive".into(),
        });
    }
    let total: usize = sizes.iter().sum();
    Ok(sizes.iter().map(|&s| s as f64 / total as f64).collect())
}

/// Shard-size-weighted average of the uploads.
pub fn aggregate(uploads: &[(Vec<Tensor>, usize)]) -> Result<Vec<Tensor>> {
    let sizes: Vec<usize> = uploads.iter().map(|(_, s)| *s).collect();
    let weights = aggregation_weights(&sizes)?;
    let reference = &uploads[0].0;
    for (n, (params, _)) in uploads.iter().enumerate().skip(1) {
        check_shapes(reference, params, &format!("client {n}"))?;
    }
    if uploads.len() == 1 {
        return Ok(reference.clone());
    }
    let mut out: Vec<Tensor> = reference.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    for ((params, _), w) in uploads.iter().zip(&weights) {
        for (acc, p) in out.iter_mut().zip(params) {
            acc.data_mut().iter_mut().zip(p.data()).for_each(|(a, v)| *a += w * v);
        }
    }
    // Consensus input returns that input exactly.
    for (i, acc) in out.iter_mut().enumerate() {
        if uploads.iter().all(|(p, _)| p[i].data() == reference[i].data()) {
            acc.data_mut().copy_from_slice(reference[i].data());
        }
        acc.set_requires_grad(reference[i].requires_grad());
    }
    Ok(out)
}

/// Sets each client's active-expert count.
pub fn assign_sparsity(clients: &mut [ClientState], policy: SparsityPolicy, experts: usize) -> Result<()> {
    let check = |k: usize, key: &str| -> Result<usize> {
        if k == 0 || k > experts {
            Err(Error::config(key, format!("K={k} outside [1, {experts}]")))
        } else {
            Ok(k)
        }
    };
    match policy {
        SparsityPolicy::Fixed(k) => {
            let k = check(k, "sparsity.k")?;
            clients.iter_mut().for_each(|c| c.k = k);
        }
        SparsityPolicy::CapabilityMap { high, low } => {
            let high = check(high, "sparsity.k_high")?;
            let low = check(low, "sparsity.k_low")?;
            for c in clients.iter_mut() {
                c.k = match c.capability {
                    Capability::High => high,
                    Capability::Low => low,
                };
            }
        }
    }
    Ok(())
}

fn reduce_aux(values: &[f64], reduction: LayerReduction) -> f64 {
    let s: f64 = values.iter().sum();
    match reduction {
        LayerReduction::Sum => s,
        LayerReduction::Mean => s / values.len().max(1) as f64,
    }
}

/// One recorded training objective: `task + λ · reduce(aux)`.
pub struct Objective {
    pub loss: Var,
    pub pass: ForwardPass,
    pub task_value: f64,
    /// Reduced per-layer auxiliary term before λ.
    pub aux_value: f64,
}

/// Records the full training loss of `model` on one batch.
pub fn objective(
    model: &Backbone,
    tape: &mut Tape,
    x: &Tensor,
    labels: &[usize],
    aux: &AuxLossConfig,
) -> Result<Objective> {
    let pass = model.forward(tape, x, false)?;
    let task = tape.cross_entropy(pass.logits, labels)?;
    let mut aux_vars = Vec::with_capacity(pass.layer_probs.len());
    let mut aux_values = Vec::with_capacity(pass.layer_probs.len());
    for p in &pass.layer_probs {
        let v = match p {
            Some(p) => aux_loss_layer_var(tape, *p, aux)?,
            None => None,
        };
        aux_values.push(v.map_or(0.0, |v| tape.value(v).data()[0]));
        aux_vars.push(v);
    }
    let loss = total_loss(tape, task, &aux_vars, aux)?;
    Ok(Objective {
        loss,
        pass,
        task_value: tape.value(task).data()[0],
        aux_value: reduce_aux(&aux_values, aux.layer_reduction),
    })
}

/// Trains the client's adapters on its shard for `cfg.epochs` passes.
/// `template` supplies the frozen model; it is not modified.
pub fn local_train(client: &mut ClientState, template: &Backbone, cfg: &TrainConfig, round: usize) -> Result<ClientReport> {
    if client.shard.is_empty() {
        return Err(Error::config("federation.clients", format!("client {} has an empty shard", client.id)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("federation.batch_size", "must be positive"));
    }
    let mut model = template.clone();
    model.load_parameters(&client.params)?;
    model.set_k(client.k)?;
    if cfg.reset_optimizer {
        client.optimizer.reset();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.run_seed, &[round as u64, client.id as u64]));
    let mut order: Vec<usize> = (0..client.shard.len()).collect();
    let (mut task_sum, mut aux_sum, mut steps) = (0.0, 0.0, 0usize);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = client.shard.batch(chunk);
            let mut tape = Tape::new();
            let obj = objective(&model, &mut tape, &x, &labels, &cfg.aux)?;
            task_sum += obj.task_value;
            aux_sum += obj.aux_value;
            let (loss, pass) = (obj.loss, obj.pass);
            let grads = tape.backward(loss)?;
            model.zero_grad();
            model.accumulate_gradients(&pass.bindings, &grads)?;
            adam_step(&mut model.parameters_mut(), &cfg.adam, &mut client.optimizer)?;
            steps += 1;
        }
    }
    client.params = model.export_parameters();
    let denom = steps.max(1) as f64;
    Ok(ClientReport {
        client_id: client.id,
        k: client.k,
        samples: client.shard.len(),
        steps,
        task_loss: task_sum / denom,
        aux_loss: aux_sum / denom,
    })
}

/// Evaluates `params` loaded into a copy of `template` with `k` active experts.
pub fn evaluate_global(
    template: &Backbone,
    params: &[Tensor],
    k: usize,
    test: &LabeledDataset,
    batch_size: usize,
) -> Result<crate::metrics::Evaluation> {
    let mut model = template.clone();
    model.load_parameters(params)?;
    model.set_k(k)?;
    evaluate_accuracy(&model, test, batch_size)
}

/// One synchronous round: broadcast, local training on every client,
/// weighted aggregation, then evaluation of the new global model.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    template: &Backbone,
    cfg: &RoundConfig,
    test: &LabeledDataset,
) -> Result<RoundReport> {
    if clients.is_empty() {
        return Err(Error::config("federation.clients", "must be positive"));
    }
    let round = server.round + 1;
    broadcast(server, clients)?;
    let train = |c: &mut ClientState| local_train(c, template, &cfg.train, round);
    let reports: Vec<ClientReport> = if cfg.parallel {
        clients.par_iter_mut().map(train).collect::<Result<_>>()?
    } else {
        clients.iter_mut().map(train).collect::<Result<_>>()?
    };
    let uploads: Vec<(Vec<Tensor>, usize)> = clients.iter().map(|c| (c.params.clone(), c.shard.len())).collect();
    server.global = aggregate(&uploads)?;
    server.round = round;

    let eval_k = cfg.eval_k.unwrap_or_else(|| clients.iter().map(|c| c.k).max().unwrap_or(1));
    let eval = evaluate_global(template, &server.global, eval_k, test, cfg.eval_batch_size)?;
    let report = RoundReport {
        round,
        clients: reports,
        accuracy: eval.accuracy,
        test_loss: eval.mean_task_loss,
        eval_k,
        utilization: utilization_kl(&eval.load),
        load: eval.load,
    };
    server.history.push(report.clone());
    Ok(report)
}
