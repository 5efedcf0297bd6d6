//! The federated training loop and its baselines.

use crate::aggregation::{
    kmeans_streams, select_num_streams, silhouette_table, AggregationRule, StreamPlan,
    KMEANS_MAX_ITERS,
};
use crate::data::{generate_federation, train_val_split, ClientDataset, FederationSpec};
use crate::error::{Error, Result};
use crate::model::{
    init_parameters, local_train, loss_and_gradient, predict, ModelSpec, OptimizerConfig,
    ParameterVector,
};
use crate::rng;
use crate::scalar::{squared_distance, Scalar};
use crate::similarity::{
    similarity_round, MixingMatrix, SigmaProduct, SimilarityConfig, SimilarityReport,
    DEFAULT_VARIANCE_BATCHES,
};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Local,
    #[serde(rename = "fedavg")]
    FedAvg,
    UserCentric,
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    /// One stream per user.
    Full,
    /// Pick the count with the best silhouette score.
    Auto,
}

/// Number of personalized downlink streams: a count, `"full"` or `"auto"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Streams {
    Count(usize),
    Mode(StreamMode),
}

impl Default for Streams {
    fn default() -> Self {
        Streams::Mode(StreamMode::Full)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seeds {
    /// Data generation (overrides `federation.seed`) and train/validation splits.
    pub data: u64,
    pub init: u64,
    pub training: u64,
    /// Probe model of the similarity round and stream clustering.
    pub probe: u64,
}

fn default_variance_batches() -> usize {
    DEFAULT_VARIANCE_BATCHES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub federation: FederationSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub rule: RuleKind,
    #[serde(default)]
    pub streams: Streams,
    pub rounds: usize,
    pub val_fraction: f64,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_variance_batches")]
    pub variance_batches: usize,
    #[serde(default)]
    pub sigma_product: SigmaProduct,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.model.input_dim != self.federation.input_dim {
            return Err(Error::config(
                "model.input_dim",
                "must equal federation.input_dim",
            ));
        }
        if self.model.num_classes != self.federation.num_classes {
            return Err(Error::config(
                "model.num_classes",
                "must equal federation.num_classes",
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction", "must lie in (0, 1)"));
        }
        if self.federation.counts().iter().any(|&n| n < 2) {
            return Err(Error::config(
                "federation.samples_per_client",
                "each client needs at least 2 samples",
            ));
        }
        if self.variance_batches == 0 {
            return Err(Error::config("variance_batches", "must be positive"));
        }
        if let Streams::Count(k) = self.streams {
            if k == 0 || k > self.federation.num_clients {
                return Err(Error::config(
                    "streams",
                    format!("must lie in [1, {}], got {k}", self.federation.num_clients),
                ));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form (keys sorted).
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        sha256_hex(value.to_string().as_bytes())
    }

    fn similarity_config(&self) -> SimilarityConfig {
        SimilarityConfig {
            variance_batches: self.variance_batches,
            probe_seed: self.seeds.probe,
            sigma_product: self.sigma_product,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Seed of the k-means restarts that group users into streams.
pub fn kmeans_seed(cfg: &ExperimentConfig) -> u64 {
    rng::derive(cfg.seeds.probe, 0xC1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 0 is the initial model, before any training.
    pub round: usize,
    pub per_user_val_accuracy: Vec<f64>,
    pub mean_val_accuracy: f64,
    pub worst_user_accuracy: f64,
    /// Training loss of the model each user holds after the round.
    pub per_user_train_loss: Vec<f64>,
    /// Mean Euclidean distance between models of users in the same true
    /// cluster; `None` when no cluster has two members.
    pub cluster_spread: Option<f64>,
}

/// Fraction of correctly classified samples (argmax, ties to the lowest class).
pub fn evaluate<T: Scalar>(
    theta: &ParameterVector<T>,
    spec: &ModelSpec,
    data: &ClientDataset<T>,
) -> Result<f64> {
    if data.samples.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let mut correct = 0usize;
    for s in &data.samples {
        correct += usize::from(predict(theta, spec, &s.x)? == s.y);
    }
    Ok(correct as f64 / data.samples.len() as f64)
}

/// Federation after the train/validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitFederation<T> {
    pub train: Vec<ClientDataset<T>>,
    pub val: Vec<ClientDataset<T>>,
}

impl<T: Scalar> SplitFederation<T> {
    pub fn ns(&self) -> Vec<usize> {
        self.train.iter().map(ClientDataset::n).collect()
    }

    pub fn clusters(&self) -> Vec<usize> {
        self.train.iter().map(|c| c.true_cluster).collect()
    }
}

pub fn prepare_federation<T: Scalar>(cfg: &ExperimentConfig) -> Result<SplitFederation<T>> {
    let spec = FederationSpec {
        seed: cfg.seeds.data,
        ..cfg.federation.clone()
    };
    let clients = generate_federation::<T>(&spec)?;
    split_clients(&clients, cfg.val_fraction, cfg.seeds.data)
}

pub fn split_clients<T: Scalar>(
    clients: &[ClientDataset<T>],
    val_fraction: f64,
    seed: u64,
) -> Result<SplitFederation<T>> {
    let mut train = Vec::with_capacity(clients.len());
    let mut val = Vec::with_capacity(clients.len());
    for c in clients {
        let (t, v) = train_val_split(
            c,
            val_fraction,
            rng::derive2(seed, 0x5711, c.client_id as u64),
        )?;
        train.push(t);
        val.push(v);
    }
    Ok(SplitFederation { train, val })
}

/// Aggregation with the state computed before training.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan<T> {
    pub rule: Option<AggregationRule<T>>,
    pub similarity: Option<SimilarityReport<T>>,
    /// Silhouette score per candidate when the stream count was chosen automatically.
    pub silhouette: Vec<(usize, T)>,
}

impl<T: Scalar> Plan<T> {
    /// Downlink models per round; local training broadcasts nothing.
    pub fn num_streams(&self, m: usize) -> usize {
        self.rule.as_ref().map_or(0, |r| r.num_streams(m))
    }

    pub fn stream_plan(&self) -> Option<&StreamPlan<T>> {
        match &self.rule {
            Some(AggregationRule::Streamed(p)) => Some(p),
            _ => None,
        }
    }
}

/// Candidates tried by automatic stream selection.
pub fn auto_stream_candidates(m: usize) -> Vec<usize> {
    (2..=m.min(10)).collect()
}

/// Mixing matrix that averages within each true cluster, weighted by sample count.
pub fn oracle_mixing<T: Scalar>(clusters: &[usize], ns: &[usize]) -> Result<MixingMatrix<T>> {
    let m = clusters.len();
    if m == 0 {
        return Err(Error::Empty("federation"));
    }
    let k = clusters.iter().max().map_or(0, |&c| c + 1);
    let missing: Vec<String> = (0..k)
        .filter(|c| !clusters.contains(c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingClusters(missing.join(", ")));
    }
    let mut w = Array2::zeros((m, m));
    for i in 0..m {
        let total: usize = (0..m)
            .filter(|&j| clusters[j] == clusters[i])
            .map(|j| ns[j])
            .sum();
        for j in 0..m {
            if clusters[j] == clusters[i] {
                w[[i, j]] = T::from_count(ns[j]) / T::from_count(total);
            }
        }
    }
    MixingMatrix::new(w)
}

pub fn plan_aggregation<T: Scalar>(
    cfg: &ExperimentConfig,
    fed: &SplitFederation<T>,
) -> Result<Plan<T>> {
    let m = fed.train.len();
    let ns = fed.ns();
    let mut plan = Plan {
        rule: None,
        similarity: None,
        silhouette: Vec::new(),
    };
    match cfg.rule {
        RuleKind::Local => {}
        RuleKind::FedAvg => plan.rule = Some(AggregationRule::FedAvg),
        RuleKind::Oracle => {
            let w = oracle_mixing(&fed.clusters(), &ns)?;
            let k = fed.clusters().iter().max().map_or(0, |&c| c + 1);
            let centroids = Array2::from_shape_fn((k, m), |(c, j)| {
                let i = fed
                    .clusters()
                    .iter()
                    .position(|&x| x == c)
                    .expect("cluster present");
                w.w[[i, j]]
            });
            plan.rule = Some(AggregationRule::Streamed(StreamPlan {
                num_streams: k,
                assignment: fed.clusters(),
                centroids,
            }));
        }
        RuleKind::UserCentric => {
            let report = similarity_round(&fed.train, &cfg.model, &cfg.similarity_config())?;
            let kmeans_seed = kmeans_seed(cfg);
            let streams = match cfg.streams {
                Streams::Mode(StreamMode::Full) => m,
                Streams::Count(k) => k,
                Streams::Mode(StreamMode::Auto) if m < 2 => 1,
                Streams::Mode(StreamMode::Auto) => {
                    let candidates = auto_stream_candidates(m);
                    plan.silhouette = silhouette_table(&report.w, &candidates, kmeans_seed)?;
                    select_num_streams(&report.w, &candidates, kmeans_seed)?
                }
            };
            plan.rule = Some(if streams >= m {
                AggregationRule::UserCentric(report.w.clone())
            } else {
                AggregationRule::Streamed(kmeans_streams(
                    &report.w,
                    streams,
                    kmeans_seed,
                    KMEANS_MAX_ITERS,
                )?)
            });
            plan.similarity = Some(report);
        }
    }
    Ok(plan)
}

fn train_loss<T: Scalar>(
    theta: &ParameterVector<T>,
    spec: &ModelSpec,
    data: &ClientDataset<T>,
) -> Result<f64> {
    Ok(loss_and_gradient(theta, spec, &data.samples)?.0.as_f64())
}

fn cluster_spread<T: Scalar>(models: &[ParameterVector<T>], clusters: &[usize]) -> Option<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            if clusters[i] == clusters[j] {
                total += squared_distance(models[i].values(), models[j].values())
                    .as_f64()
                    .sqrt();
                pairs += 1;
            }
        }
    }
    (pairs > 0).then(|| total / pairs as f64)
}

fn round_metrics<T: Scalar>(
    round: usize,
    models: &[ParameterVector<T>],
    spec: &ModelSpec,
    fed: &SplitFederation<T>,
) -> Result<RoundMetrics> {
    let per_user: Vec<(f64, f64)> = models
        .par_iter()
        .zip(fed.train.par_iter().zip(&fed.val))
        .map(|(theta, (train, val))| {
            Ok((evaluate(theta, spec, val)?, train_loss(theta, spec, train)?))
        })
        .collect::<Result<_>>()?;
    let (acc, loss): (Vec<f64>, Vec<f64>) = per_user.into_iter().unzip();
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    let worst = acc.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(RoundMetrics {
        round,
        per_user_val_accuracy: acc,
        mean_val_accuracy: mean,
        worst_user_accuracy: worst,
        per_user_train_loss: loss,
        cluster_spread: cluster_spread(models, &fed.clusters()),
    })
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct Outcome<T> {
    pub metrics: Vec<RoundMetrics>,
    pub plan: Plan<T>,
    pub final_models: Vec<ParameterVector<T>>,
}

/// Runs `cfg.rounds` rounds on an already split federation. Every user starts
/// from the shared initial model; in round `t` user `i` trains with seed
/// `derive2(seeds.training, t, i)`, then the server aggregates under `plan`
/// (no aggregation for local training).
pub fn train_federation<T: Scalar>(
    cfg: &ExperimentConfig,
    fed: &SplitFederation<T>,
    plan: &Plan<T>,
) -> Result<(Vec<RoundMetrics>, Vec<ParameterVector<T>>)> {
    let init = init_parameters::<T>(&cfg.model, cfg.seeds.init);
    let mut models = vec![init; fed.train.len()];
    let ns = fed.ns();
    let mut metrics = Vec::with_capacity(cfg.rounds + 1);
    metrics.push(round_metrics(0, &models, &cfg.model, fed)?);
    for t in 1..=cfg.rounds {
        let trained: Vec<ParameterVector<T>> = models
            .par_iter()
            .zip(&fed.train)
            .enumerate()
            .map(|(i, (theta, data))| {
                local_train(
                    theta,
                    &cfg.model,
                    data,
                    &cfg.optimizer,
                    rng::derive2(cfg.seeds.training, t as u64, i as u64),
                )
            })
            .collect::<Result<_>>()?;
        models = match &plan.rule {
            Some(rule) => rule.apply(&trained, &ns)?,
            None => trained,
        };
        metrics.push(round_metrics(t, &models, &cfg.model, fed)?);
    }
    Ok((metrics, models))
}

/// Full pipeline: generate and split the data, plan the aggregation (similarity
/// round and stream clustering for the user-centric rule), then train.
pub fn simulate<T: Scalar>(cfg: &ExperimentConfig) -> Result<Outcome<T>> {
    cfg.validate()?;
    let fed = prepare_federation::<T>(cfg)?;
    let plan = plan_aggregation(cfg, &fed)?;
    let (metrics, final_models) = train_federation(cfg, &fed, &plan)?;
    Ok(Outcome {
        metrics,
        plan,
        final_models,
    })
}

/// Metric series of `cfg`, `rounds + 1` entries starting with the initial model.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RoundMetrics>> {
    Ok(simulate::<f64>(cfg)?.metrics)
}

/// Every user trains alone; no communication.
pub fn run_local_baseline(cfg: &ExperimentConfig) -> Result<Vec<RoundMetrics>> {
    run_experiment(&ExperimentConfig {
        rule: RuleKind::Local,
        ..cfg.clone()
    })
}

/// Independent FedAvg within each ground-truth cluster.
pub fn run_oracle_baseline(cfg: &ExperimentConfig) -> Result<Vec<RoundMetrics>> {
    run_experiment(&ExperimentConfig {
        rule: RuleKind::Oracle,
        ..cfg.clone()
    })
}

/// CSV with header `round,user,val_acc,train_loss`.
pub fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from("round,user,val_acc,train_loss\n");
    for rm in metrics {
        for (u, (acc, loss)) in rm
            .per_user_val_accuracy
            .iter()
            .zip(&rm.per_user_train_loss)
            .enumerate()
        {
            let _ = writeln!(out, "{},{u},{acc},{loss}", rm.round);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_curve: Vec<f64>,
    pub worst_user_final: f64,
    pub config_digest: String,
}

impl Summary {
    pub fn new(cfg: &ExperimentConfig, metrics: &[RoundMetrics]) -> Self {
        Summary {
            mean_curve: metrics.iter().map(|m| m.mean_val_accuracy).collect(),
            worst_user_final: metrics.last().map_or(0.0, |m| m.worst_user_accuracy),
            config_digest: cfg.digest(),
        }
    }
}
