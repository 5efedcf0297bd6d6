//! Desk-scale experiment presets for the three heterogeneity scenarios.

use crate::data::{FederationSpec, SampleCounts, Scenario};
use crate::model::{ModelSpec, OptimizerConfig};
use crate::orchestrator::{ExperimentConfig, RuleKind, Seeds, StreamMode, Streams};
use crate::similarity::{SigmaProduct, DEFAULT_VARIANCE_BATCHES};

pub const PRESET_NAMES: [&str; 3] = [
    "label_shift_small",
    "covariate_shift_small",
    "concept_shift_small",
];

const NUM_CLIENTS: usize = 20;

fn optimizer() -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: 0.1,
        momentum: 0.9,
        batch_size: 16,
        local_epochs: 1,
    }
}

fn base(
    scenario: Scenario,
    samples: usize,
    input_dim: usize,
    num_classes: usize,
    streams: Streams,
) -> ExperimentConfig {
    ExperimentConfig {
        federation: FederationSpec {
            num_clients: NUM_CLIENTS,
            scenario,
            dirichlet_alpha: 0.4,
            num_clusters: 4,
            samples_per_client: SampleCounts::Equal(samples),
            input_dim,
            num_classes,
            seed: 0,
        },
        model: ModelSpec::linear(input_dim, num_classes),
        optimizer: optimizer(),
        rule: RuleKind::UserCentric,
        streams,
        rounds: 30,
        val_fraction: 0.2,
        seeds: Seeds {
            data: 0,
            init: 1,
            training: 2,
            probe: 3,
        },
        variance_batches: DEFAULT_VARIANCE_BATCHES,
        sigma_product: SigmaProduct::StdDev,
    }
}

/// Dirichlet label shift; few samples per client so that collaboration pays.
pub fn label_shift_small() -> ExperimentConfig {
    ExperimentConfig {
        val_fraction: 0.5,
        // two halves give the sharpest variance estimate available
        variance_batches: 2,
        ..base(
            Scenario::LabelShift,
            80,
            10,
            10,
            Streams::Mode(StreamMode::Full),
        )
    }
}

/// Label shift plus a per-group rotation of the inputs.
pub fn covariate_shift_small() -> ExperimentConfig {
    // low input dimension so the rotations actually conflict
    ExperimentConfig {
        variance_batches: 2,
        ..base(
            Scenario::LabelAndCovariateShift,
            100,
            4,
            10,
            Streams::Mode(StreamMode::Full),
        )
    }
}

/// IID inputs with a label permutation per group.
pub fn concept_shift_small() -> ExperimentConfig {
    base(Scenario::ConceptShift, 1000, 10, 10, Streams::Count(4))
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    match name {
        "label_shift_small" => Some(label_shift_small()),
        "covariate_shift_small" => Some(covariate_shift_small()),
        "concept_shift_small" => Some(concept_shift_small()),
        _ => None,
    }
}

/// `cfg` with every seed shifted by `seed` (the data seed is replaced).
pub fn with_seed(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seeds: Seeds {
            data: seed,
            init: seed.wrapping_add(1),
            training: seed.wrapping_add(2),
            probe: seed.wrapping_add(3),
        },
        ..cfg.clone()
    }
}
