//! Fixtures shared by the benchmarks.

use fedmoe_core::config::ExperimentConfig;
use fedmoe_core::experiment::{prepare, Setup};

/// Desk-scale model: 2 layers, width 32, 8 experts of rank 4, top-2.
pub fn desk_setup() -> Setup {
    let cfg = ExperimentConfig::from_text(
        "data.samples = 512\ndata.partition = iid\nfederation.batch_size = 32\nfederation.lr = 0.001\n",
    )
    .expect("valid benchmark config");
    prepare(&cfg).expect("benchmark setup")
}
