//! Federated fine-tuning of sparse mixture-of-experts adapters.
//!
//! Clients share a small frozen transformer and train only the adapters
//! attached to each block's feed-forward layer. A server averages the
//! adapters weighted by shard size every round. Routing is top-k softmax with
//! a per-client `k`, and an optional thresholded KL penalty pulls each
//! layer's routing distribution toward uniform.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod moe;
pub mod rng;

pub use autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var, WeightDecayMode};
pub use backbone::{build_backbone, Backbone, BackboneConfig};
pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use data::{partition, synth_dataset, LabeledDataset, PartitionScheme, PartitionSpec};
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentOutcome};
pub use federation::{
    aggregate, assign_sparsity, broadcast, local_train, run_round, Capability, ClientReport, ClientState,
    RoundConfig, RoundReport, ServerState, SparsityPolicy, TrainConfig,
};
pub use losses::{aux_loss_layer, kl_divergence, total_loss, AuxLossConfig, LayerReduction};
pub use metrics::{evaluate_accuracy, utilization_kl, LoadMatrix, UtilizationKl};
pub use moe::{Activation, AdapterConfig, GatingMode, MoEAdapter, RoutingStats};
