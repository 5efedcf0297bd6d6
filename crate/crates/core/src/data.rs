//! Synthetic federated datasets: a Gaussian class-conditional base task and
//! the three heterogeneity regimes (label shift, label plus covariate shift,
//! concept shift), with ground-truth client clusters.

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// Radius of the sphere the class means are drawn on.
pub const CLASS_MEAN_RADIUS: f64 = 3.0;
/// Candidate mean configurations drawn; the most spread one is kept.
const MEAN_CANDIDATES: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub x: Vec<T>,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset<T> {
    pub client_id: usize,
    pub samples: Vec<Sample<T>>,
    pub true_cluster: usize,
}

impl<T> ClientDataset<T> {
    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn label_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for s in &self.samples {
            h[s.y] += 1;
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    LabelShift,
    LabelAndCovariateShift,
    ConceptShift,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleCounts {
    Equal(usize),
    PerClient(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationSpec {
    pub num_clients: usize,
    pub scenario: Scenario,
    pub dirichlet_alpha: f64,
    pub num_clusters: usize,
    pub samples_per_client: SampleCounts,
    pub input_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl FederationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("federation.num_clients", "must be positive"));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::config(
                "federation.dirichlet_alpha",
                "must be a positive finite number",
            ));
        }
        if self.num_clusters == 0 || self.num_clusters > self.num_clients {
            return Err(Error::config(
                "federation.num_clusters",
                "must lie in [1, num_clients]",
            ));
        }
        if self.input_dim == 0 {
            return Err(Error::config("federation.input_dim", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(
                "federation.num_classes",
                "must be at least 2",
            ));
        }
        match &self.samples_per_client {
            SampleCounts::Equal(0) => {
                return Err(Error::config(
                    "federation.samples_per_client",
                    "must be positive",
                ))
            }
            SampleCounts::PerClient(v) if v.len() != self.num_clients || v.contains(&0) => {
                return Err(Error::config(
                    "federation.samples_per_client",
                    "per-client list needs one positive count per client",
                ))
            }
            _ => {}
        }
        match self.scenario {
            Scenario::LabelAndCovariateShift => {
                if self.input_dim < 2 {
                    return Err(Error::config(
                        "federation.input_dim",
                        "covariate shift rotates two coordinates",
                    ));
                }
                if self.num_clusters > 4 {
                    return Err(Error::config(
                        "federation.num_clusters",
                        "at most 4 rotation groups",
                    ));
                }
            }
            Scenario::ConceptShift => {
                let perms: f64 = (1..=self.num_classes).map(|k| k as f64).product();
                if self.num_clusters as f64 > perms {
                    return Err(Error::config(
                        "federation.num_clusters",
                        "exceeds the number of label permutations",
                    ));
                }
            }
            Scenario::LabelShift => {}
        }
        Ok(())
    }

    pub fn counts(&self) -> Vec<usize> {
        match &self.samples_per_client {
            SampleCounts::Equal(n) => vec![*n; self.num_clients],
            SampleCounts::PerClient(v) => v.clone(),
        }
    }

    pub fn total_samples(&self) -> usize {
        self.counts().iter().sum()
    }

    /// Pool size: the Dirichlet scenarios may pull every sample of a client
    /// from one class, so each class holds the full total.
    pub fn pool_size(&self) -> usize {
        match self.scenario {
            Scenario::ConceptShift => self.total_samples(),
            _ => self.total_samples() * self.num_classes,
        }
    }

    /// Ground-truth group of client `i` (round-robin).
    pub fn group_of(&self, client: usize) -> usize {
        match self.scenario {
            Scenario::LabelShift => 0,
            _ => client % self.num_clusters,
        }
    }
}

/// Labeled samples stored per class, with the class means that generated them.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePool<T> {
    pub means: Vec<Vec<f64>>,
    pub by_class: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> SamplePool<T> {
    pub fn len(&self) -> usize {
        self.by_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    /// Bayes-optimal prediction for the equal-prior, identity-covariance task:
    /// the nearest class mean.
    pub fn bayes_predict(&self, x: &[T]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (c, mu) in self.means.iter().enumerate() {
            let d: f64 = mu
                .iter()
                .zip(x)
                .map(|(m, v)| (m - v.as_f64()).powi(2))
                .sum();
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }
}

fn sphere_point(rng: &mut rng::Rng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|a| radius * a / norm).collect();
        }
    }
}

fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            best = best.min(d);
        }
    }
    best
}

/// Class means on the sphere of radius [`CLASS_MEAN_RADIUS`].
pub fn class_means(input_dim: usize, num_classes: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::rng(seed);
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for _ in 0..MEAN_CANDIDATES {
        let means: Vec<Vec<f64>> = (0..num_classes)
            .map(|_| sphere_point(&mut r, input_dim, CLASS_MEAN_RADIUS))
            .collect();
        let spread = min_pairwise_distance(&means);
        if best.as_ref().is_none_or(|(s, _)| spread > *s) {
            best = Some((spread, means));
        }
    }
    best.expect("at least one candidate").1
}

/// Draws a balanced pool of `size` samples, `x ~ N(mu_c, I)`.
pub fn generate_pool<T: Scalar>(
    input_dim: usize,
    num_classes: usize,
    size: usize,
    seed: u64,
) -> SamplePool<T> {
    let means = class_means(input_dim, num_classes, rng::derive(seed, 1));
    let mut r = rng::rng(rng::derive(seed, 2));
    let by_class = means
        .iter()
        .enumerate()
        .map(|(c, mu)| {
            let count = size / num_classes + usize::from(c < size % num_classes);
            (0..count)
                .map(|_| {
                    mu.iter()
                        .map(|&m| T::lit(m + r.sample::<f64, _>(StandardNormal)))
                        .collect()
                })
                .collect()
        })
        .collect();
    SamplePool { means, by_class }
}

pub fn generate_base_task<T: Scalar>(spec: &FederationSpec) -> SamplePool<T> {
    generate_pool(
        spec.input_dim,
        spec.num_classes,
        spec.pool_size(),
        spec.seed,
    )
}

/// Symmetric Dirichlet draw through normalized Gamma variates.
pub fn sample_dirichlet(rng: &mut rng::Rng, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive alpha");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // every Gamma draw underflowed: all mass on one uniformly chosen class
        let hot = rng.random_range(0..k);
        (0..k).map(|c| if c == hot { 1.0 } else { 0.0 }).collect()
    }
}

fn sample_categorical(rng: &mut rng::Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    // rounding left u above the cumulative sum: last class with mass
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Dirichlet label-shift partition; every client keeps `true_cluster = 0`.
pub fn partition_label_shift<T: Scalar>(
    pool: &SamplePool<T>,
    spec: &FederationSpec,
) -> Result<Vec<ClientDataset<T>>> {
    let classes = pool.num_classes();
    let mut r = rng::rng(rng::derive(spec.seed, 3));
    let mut next = vec![0usize; classes];
    let mut clients = Vec::with_capacity(spec.num_clients);
    for (client_id, n) in spec.counts().into_iter().enumerate() {
        let p = sample_dirichlet(&mut r, spec.dirichlet_alpha, classes);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let c = sample_categorical(&mut r, &p);
            let x = pool.by_class[c]
                .get(next[c])
                .ok_or(Error::PoolExhausted { class: c })?;
            next[c] += 1;
            samples.push(Sample { x: x.clone(), y: c });
        }
        clients.push(ClientDataset {
            client_id,
            samples,
            true_cluster: 0,
        });
    }
    Ok(clients)
}

/// Rotation of the first two coordinates by `quarter_turns * 90` degrees,
/// with exact sine and cosine values.
pub fn rotate_quarter_turns<T: Scalar>(x: &[T], quarter_turns: usize) -> Vec<T> {
    let mut out = x.to_vec();
    let (a, b) = (x[0], x[1]);
    match quarter_turns % 4 {
        0 => {}
        1 => {
            out[0] = -b;
            out[1] = a;
        }
        2 => {
            out[0] = -a;
            out[1] = -b;
        }
        _ => {
            out[0] = b;
            out[1] = -a;
        }
    }
    out
}

/// Label shift followed by a per-group rotation; group `g` is rotated by `g * 90` degrees.
pub fn partition_covariate_shift<T: Scalar>(
    pool: &SamplePool<T>,
    spec: &FederationSpec,
) -> Result<Vec<ClientDataset<T>>> {
    let mut clients = partition_label_shift(pool, spec)?;
    for client in &mut clients {
        let g = client.client_id % spec.num_clusters;
        client.true_cluster = g;
        if g != 0 {
            for s in &mut client.samples {
                s.x = rotate_quarter_turns(&s.x, g);
            }
        }
    }
    Ok(clients)
}

/// Seeded IID split of the pool across clients with round-robin groups and
/// unchanged labels.
pub fn iid_split<T: Scalar>(
    pool: &SamplePool<T>,
    spec: &FederationSpec,
) -> Result<Vec<ClientDataset<T>>> {
    let mut all: Vec<(usize, usize)> = pool
        .by_class
        .iter()
        .enumerate()
        .flat_map(|(c, xs)| (0..xs.len()).map(move |k| (c, k)))
        .collect();
    all.shuffle(&mut rng::rng(rng::derive(spec.seed, 4)));
    let mut cursor = 0;
    let mut clients = Vec::with_capacity(spec.num_clients);
    for (client_id, n) in spec.counts().into_iter().enumerate() {
        if cursor + n > all.len() {
            let class = all.get(cursor).map_or(0, |&(c, _)| c);
            return Err(Error::PoolExhausted { class });
        }
        let samples = all[cursor..cursor + n]
            .iter()
            .map(|&(c, k)| Sample {
                x: pool.by_class[c][k].clone(),
                y: c,
            })
            .collect();
        cursor += n;
        clients.push(ClientDataset {
            client_id,
            samples,
            true_cluster: spec.group_of(client_id),
        });
    }
    Ok(clients)
}

/// Identity for group 0, then distinct non-identity seeded permutations.
pub fn label_permutations(num_classes: usize, groups: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut r = rng::rng(seed);
    let mut perms = vec![(0..num_classes).collect::<Vec<_>>()];
    while perms.len() < groups {
        let mut p: Vec<usize> = (0..num_classes).collect();
        p.shuffle(&mut r);
        if !perms.contains(&p) {
            perms.push(p);
        }
    }
    perms
}

/// IID split, then group `g` relabels `y -> perms[g][y]`.
pub fn partition_concept_shift_with<T: Scalar>(
    pool: &SamplePool<T>,
    spec: &FederationSpec,
    perms: &[Vec<usize>],
) -> Result<Vec<ClientDataset<T>>> {
    let mut clients = iid_split(pool, spec)?;
    for client in &mut clients {
        let perm = &perms[client.true_cluster];
        for s in &mut client.samples {
            s.y = perm[s.y];
        }
    }
    Ok(clients)
}

pub fn partition_concept_shift<T: Scalar>(
    pool: &SamplePool<T>,
    spec: &FederationSpec,
) -> Result<Vec<ClientDataset<T>>> {
    let perms = label_permutations(
        pool.num_classes(),
        spec.num_clusters,
        rng::derive(spec.seed, 5),
    );
    partition_concept_shift_with(pool, spec, &perms)
}

/// Base task plus the scenario's partition.
pub fn generate_federation<T: Scalar>(spec: &FederationSpec) -> Result<Vec<ClientDataset<T>>> {
    spec.validate()?;
    let pool = generate_base_task(spec);
    match spec.scenario {
        Scenario::LabelShift => partition_label_shift(&pool, spec),
        Scenario::LabelAndCovariateShift => partition_covariate_shift(&pool, spec),
        Scenario::ConceptShift => partition_concept_shift(&pool, spec),
    }
}

/// Seeded shuffle, then `round(n * val_fraction)` samples (at least one, at
/// most `n - 1`) go to the validation part. Returns `(train, validation)`.
pub fn train_val_split<T: Clone>(
    data: &ClientDataset<T>,
    val_fraction: f64,
    seed: u64,
) -> Result<(ClientDataset<T>, ClientDataset<T>)> {
    if data.samples.len() < 2 {
        return Err(Error::NotEnoughSamples {
            needed: 2,
            available: data.samples.len(),
        });
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config("val_fraction", "must lie in (0, 1)"));
    }
    let n = data.samples.len();
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(seed));
    let part = |idx: &[usize]| ClientDataset {
        client_id: data.client_id,
        samples: idx.iter().map(|&k| data.samples[k].clone()).collect(),
        true_cluster: data.true_cluster,
    };
    Ok((part(&order[n_val..]), part(&order[..n_val])))
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    client: usize,
    x: Vec<f64>,
    y: usize,
    cluster: usize,
}

/// One JSON object per sample: `{client, x, y, cluster}`.
pub fn write_jsonl<T: Scalar, W: Write>(clients: &[ClientDataset<T>], mut out: W) -> Result<()> {
    for c in clients {
        for s in &c.samples {
            let rec = SampleRecord {
                client: c.client_id,
                x: s.x.iter().map(|v| v.as_f64()).collect(),
                y: s.y,
                cluster: c.true_cluster,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Inverse of [`write_jsonl`]; clients are returned in id order.
pub fn read_jsonl<T: Scalar, R: BufRead>(input: R) -> Result<Vec<ClientDataset<T>>> {
    let mut clients: Vec<ClientDataset<T>> = Vec::new();
    for (k, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: k + 1,
            reason: e.to_string(),
        })?;
        while clients.len() <= rec.client {
            let id = clients.len();
            clients.push(ClientDataset {
                client_id: id,
                samples: Vec::new(),
                true_cluster: 0,
            });
        }
        let c = &mut clients[rec.client];
        c.true_cluster = rec.cluster;
        c.samples.push(Sample {
            x: rec.x.into_iter().map(T::lit).collect(),
            y: rec.y,
        });
    }
    Ok(clients)
}
