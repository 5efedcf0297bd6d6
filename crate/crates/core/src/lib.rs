//! Simulator for personalized federated learning with user-centric
//! aggregation: each user receives its own weighted average of the locally
//! trained models, with weights derived from gradient similarity.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`.

pub mod aggregation;
pub mod comm;
pub mod data;
pub mod error;
pub mod model;
pub mod orchestrator;
pub mod presets;
pub mod rng;
pub mod scalar;
pub mod similarity;
pub mod theory;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use aggregation::{adjusted_rand_index, AggregationKind, AggregationRule, StreamPlan};
pub use comm::{CommModel, ComputeRate, TimedCurve, TimingMode, Uplink};
pub use data::{ClientDataset, FederationSpec, Sample, SampleCounts, Scenario};
pub use model::{Activation, Architecture, ModelSpec, OptimizerConfig, ParameterVector};
pub use orchestrator::{
    run_experiment, run_local_baseline, run_oracle_baseline, ExperimentConfig, RoundMetrics,
    RuleKind, Seeds, StreamMode, Streams, Summary,
};
pub use similarity::{MixingMatrix, SigmaProduct, SimilarityConfig, SimilarityReport};

pub type Params = ParameterVector<f64>;
pub type Dataset = ClientDataset<f64>;
pub type Mixing = MixingMatrix<f64>;
pub type Plan = StreamPlan<f64>;
pub type Report = SimilarityReport<f64>;
