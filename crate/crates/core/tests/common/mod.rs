#![allow(dead_code)]

use std::path::PathBuf;

use gcfl::correction::{CorrectionConfig, CorrectionMode};
use gcfl::data::{partition_iid, synthetic_blobs, ClientShard, Dataset};
use gcfl::dp::{DpConfig, SamplingMode};
use gcfl::federation::{Algorithm, ClientSampling, FederationConfig, Setup};
use gcfl::model::MlpSpec;

pub fn blobs(classes: usize, per_class: usize, dim: usize, seed: u64) -> Dataset {
    synthetic_blobs(classes, per_class, dim, 0.3, seed).unwrap()
}

pub fn synthetic_setup(n_clients: usize, batch: usize, seed: u64) -> Setup {
    let train = blobs(3, 40, 8, seed);
    let test = blobs(3, 10, 8, seed + 1000);
    Setup {
        spec: MlpSpec::new(vec![8, 6, 3]).unwrap(),
        shards: partition_iid(&train, n_clients, seed).unwrap(),
        test,
        sampling: ClientSampling::BatchSize(batch),
    }
}

/// Every client holds a copy of the same examples.
pub fn cloned_shards(ds: &Dataset, n_clients: usize) -> Vec<ClientShard> {
    (0..n_clients)
        .map(|client_id| ClientShard {
            client_id,
            examples: ds.examples.clone(),
        })
        .collect()
}

pub fn fed(
    algorithm: Algorithm,
    n_clients: usize,
    rounds: usize,
    eta: f64,
    seed: u64,
) -> FederationConfig {
    FederationConfig {
        n_clients,
        clients_per_round: n_clients,
        rounds,
        learning_rate: eta,
        algorithm,
        global_seed: seed,
        ..FederationConfig::default()
    }
}

pub fn dp(sigma: f64, clip: f64) -> DpConfig {
    DpConfig {
        clip_threshold: clip,
        noise_multiplier: sigma,
        sampling_rate: 1.0,
        delta: 1e-5,
        sampling_mode: SamplingMode::FixedSize,
    }
}

pub fn reference_mode() -> CorrectionConfig {
    CorrectionConfig {
        mode: CorrectionMode::Reference,
        num_references: None,
        order_seed: 0,
    }
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn mnist_dir() -> PathBuf {
    std::env::var_os("GCFL_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/mnist"))
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}
