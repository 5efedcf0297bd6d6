//! Server-side aggregation: FedAvg, per-user aggregation with a mixing
//! matrix, and the stream-reduced variant that clusters mixing rows with
//! k-means and serves one model per cluster.

use crate::error::{Error, Result};
use crate::model::ParameterVector;
use crate::rng;
use crate::scalar::{squared_distance, Scalar};
use crate::similarity::MixingMatrix;
use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Number of k-means++ restarts; the lowest objective wins.
pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_MAX_ITERS: usize = 100;

/// Assignment of users to personalized streams and the stream weight vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamPlan<T> {
    pub num_streams: usize,
    pub assignment: Vec<usize>,
    /// `num_streams x m`, row-stochastic.
    pub centroids: Array2<T>,
}

impl<T: Scalar> StreamPlan<T> {
    /// One stream per user, stream `i` carrying row `i` of `w`.
    pub fn full(w: &MixingMatrix<T>) -> Self {
        let m = w.m();
        StreamPlan {
            num_streams: m,
            assignment: (0..m).collect(),
            centroids: w.w.clone(),
        }
    }

    pub fn members(&self, stream: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == stream)
            .collect()
    }

    pub fn to_json(&self) -> StreamPlanJson {
        StreamPlanJson {
            m_t: self.num_streams,
            assignment: self.assignment.clone(),
            centroids: self
                .centroids
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|v| v.as_f64()).collect())
                .collect(),
        }
    }

    pub fn from_json(json: &StreamPlanJson) -> Result<Self> {
        let m = json.assignment.len();
        let mut centroids = Array2::zeros((json.m_t, m));
        if json.centroids.len() != json.m_t {
            return Err(Error::DimensionMismatch {
                expected: json.m_t,
                actual: json.centroids.len(),
            });
        }
        for (c, row) in json.centroids.iter().enumerate() {
            if row.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    actual: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                centroids[[c, j]] = T::lit(v);
            }
        }
        if json.assignment.iter().any(|&a| a >= json.m_t) {
            return Err(Error::config("assignment", "stream id out of range"));
        }
        Ok(StreamPlan {
            num_streams: json.m_t,
            assignment: json.assignment.clone(),
            centroids,
        })
    }
}

/// JSON shape `{m_t, assignment, centroids}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamPlanJson {
    pub m_t: usize,
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationKind {
    FedAvg,
    UserCentric,
    Streamed,
}

/// Server rule with the state it needs.
#[derive(Clone, Debug, PartialEq)]
pub enum AggregationRule<T> {
    FedAvg,
    UserCentric(MixingMatrix<T>),
    Streamed(StreamPlan<T>),
}

impl<T: Scalar> AggregationRule<T> {
    pub fn kind(&self) -> AggregationKind {
        match self {
            AggregationRule::FedAvg => AggregationKind::FedAvg,
            AggregationRule::UserCentric(_) => AggregationKind::UserCentric,
            AggregationRule::Streamed(_) => AggregationKind::Streamed,
        }
    }

    /// The model each user receives after aggregating `models`.
    pub fn apply(
        &self,
        models: &[ParameterVector<T>],
        ns: &[usize],
    ) -> Result<Vec<ParameterVector<T>>> {
        match self {
            AggregationRule::FedAvg => {
                let avg = fedavg_aggregate(models, ns)?;
                Ok(vec![avg; models.len()])
            }
            AggregationRule::UserCentric(w) => user_centric_aggregate(models, w),
            AggregationRule::Streamed(plan) => {
                let streams = streamed_aggregate(models, plan)?;
                Ok(plan
                    .assignment
                    .iter()
                    .map(|&s| streams[s].clone())
                    .collect())
            }
        }
    }

    /// Distinct downlink models per round.
    pub fn num_streams(&self, m: usize) -> usize {
        match self {
            AggregationRule::FedAvg => 1,
            AggregationRule::UserCentric(_) => m,
            AggregationRule::Streamed(plan) => plan.num_streams,
        }
    }
}

fn check_models<T: Scalar>(models: &[ParameterVector<T>], weights: usize) -> Result<usize> {
    let first = models.first().ok_or(Error::Empty("models"))?;
    if weights != models.len() {
        return Err(Error::DimensionMismatch {
            expected: models.len(),
            actual: weights,
        });
    }
    let d = first.len();
    if let Some(bad) = models.iter().find(|m| m.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    Ok(d)
}

/// Convex combination `sum_j w_j theta_j`, evaluated as
/// `theta_a + sum_j w_j (theta_j - theta_a)` around the heaviest model `a`.
/// Zero weights are skipped, so identical inputs and one-hot weights come
/// back bit-exact. Summation runs in index order.
fn convex_combination<T: Scalar>(
    models: &[ParameterVector<T>],
    weights: &[T],
) -> ParameterVector<T> {
    let mut anchor = 0;
    for (j, &w) in weights.iter().enumerate() {
        if w > weights[anchor] {
            anchor = j;
        }
    }
    let base = models[anchor].values();
    let mut out = base.to_vec();
    for (j, (model, &w)) in models.iter().zip(weights).enumerate() {
        if j == anchor || w == T::zero() {
            continue;
        }
        for ((o, &v), &b) in out.iter_mut().zip(model.values()).zip(base) {
            *o += w * (v - b);
        }
    }
    models[anchor]
        .with_values(out)
        .expect("lengths checked by caller")
}

pub fn fedavg_aggregate<T: Scalar>(
    models: &[ParameterVector<T>],
    ns: &[usize],
) -> Result<ParameterVector<T>> {
    check_models(models, ns.len())?;
    if ns.contains(&0) {
        return Err(Error::Empty("client with zero samples"));
    }
    let total = T::from_count(ns.iter().sum());
    let weights: Vec<T> = ns.iter().map(|&n| T::from_count(n) / total).collect();
    Ok(convex_combination(models, &weights))
}

/// Output `i` is `sum_j w_ij theta_j`.
pub fn user_centric_aggregate<T: Scalar>(
    models: &[ParameterVector<T>],
    w: &MixingMatrix<T>,
) -> Result<Vec<ParameterVector<T>>> {
    check_models(models, w.m())?;
    Ok((0..w.m())
        .map(|i| convex_combination(models, &w.row(i)))
        .collect())
}

/// One model per stream, `sum_j centroid_cj theta_j`.
pub fn streamed_aggregate<T: Scalar>(
    models: &[ParameterVector<T>],
    plan: &StreamPlan<T>,
) -> Result<Vec<ParameterVector<T>>> {
    check_models(models, plan.centroids.ncols())?;
    Ok(plan
        .centroids
        .rows()
        .into_iter()
        .map(|row| convex_combination(models, &row.to_vec()))
        .collect())
}

/// Result of one Lloyd run, including the objective after each iteration.
#[derive(Clone, Debug)]
pub struct KMeansRun<T> {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<T>>,
    pub objective: T,
    pub history: Vec<T>,
}

fn nearest<T: Scalar>(point: &[T], centroids: &[Vec<T>]) -> (usize, T) {
    let mut best = (0, squared_distance(point, &centroids[0]));
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_plus_plus<T: Scalar>(points: &[Vec<T>], k: usize, rng: &mut rng::Rng) -> Vec<Vec<T>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &points[chosen[0]]).as_f64())
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if d > 0.0 && target < acc {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| dist.iter().rposition(|&d| d > 0.0).expect("positive mass"))
        } else {
            // every point coincides with a chosen one: pick an unused index
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(squared_distance(&points[i], &points[next]).as_f64());
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn objective<T: Scalar>(points: &[Vec<T>], centroids: &[Vec<T>], assignment: &[usize]) -> T {
    points
        .iter()
        .zip(assignment)
        .fold(T::zero(), |acc, (p, &c)| {
            acc + squared_distance(p, &centroids[c])
        })
}

fn recompute_centroids<T: Scalar>(
    points: &[Vec<T>],
    assignment: &[usize],
    k: usize,
) -> Vec<Vec<T>> {
    let dim = points[0].len();
    let mut sums = vec![vec![T::zero(); dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for (s, &v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| {
            let n = T::from_count(n.max(1));
            s.into_iter().map(|v| v / n).collect()
        })
        .collect()
}

/// Moves the point farthest from its centroid (within a cluster that has
/// more than one member) into each empty cluster.
fn repair_empty<T: Scalar>(points: &[Vec<T>], centroids: &mut [Vec<T>], assignment: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignment.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far: Option<(usize, T)> = None;
        for (i, p) in points.iter().enumerate() {
            if counts[assignment[i]] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[assignment[i]]);
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let (i, _) = far.expect("k <= number of points leaves a donor cluster");
        let donor = assignment[i];
        assignment[i] = empty;
        centroids[empty] = points[i].clone();
        // keep the donor centroid consistent with its reduced membership
        let members: Vec<&Vec<T>> = points
            .iter()
            .zip(assignment.iter())
            .filter(|(_, &c)| c == donor)
            .map(|(p, _)| p)
            .collect();
        let n = T::from_count(members.len());
        centroids[donor] = (0..points[0].len())
            .map(|j| members.iter().fold(T::zero(), |acc, p| acc + p[j]) / n)
            .collect();
    }
}

/// Lloyd's algorithm from a k-means++ seeding.
pub fn lloyd<T: Scalar>(points: &[Vec<T>], k: usize, max_iters: usize, seed: u64) -> KMeansRun<T> {
    let mut rng = rng::rng(seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    repair_empty(points, &mut centroids, &mut assignment);
    let mut history = vec![objective(points, &centroids, &assignment)];
    for _ in 0..max_iters.max(1) {
        centroids = recompute_centroids(points, &assignment, k);
        history.push(objective(points, &centroids, &assignment));
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        let changed = next != assignment;
        assignment = next;
        repair_empty(points, &mut centroids, &mut assignment);
        history.push(objective(points, &centroids, &assignment));
        if !changed {
            break;
        }
    }
    let objective = *history.last().expect("non-empty history");
    KMeansRun {
        assignment,
        centroids,
        objective,
        history,
    }
}

/// Clusters the mixing rows into `m_t` streams. Restarts are compared by
/// `(objective, restart index)`; centroids are renormalized to the simplex.
pub fn kmeans_streams<T: Scalar>(
    w: &MixingMatrix<T>,
    m_t: usize,
    seed: u64,
    max_iters: usize,
) -> Result<StreamPlan<T>> {
    let m = w.m();
    if m_t == 0 || m_t > m {
        return Err(Error::config(
            "streams",
            format!("number of streams must lie in [1, {m}], got {m_t}"),
        ));
    }
    let points = w.rows();
    let best = (0..KMEANS_RESTARTS)
        .map(|r| lloyd(&points, m_t, max_iters, rng::derive(seed, r as u64)))
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            a.objective
                .partial_cmp(&b.objective)
                .expect("finite objective")
                .then(ia.cmp(ib))
        })
        .map(|(_, run)| run)
        .expect("at least one restart");
    let mut centroids = Array2::zeros((m_t, m));
    for (c, row) in best.centroids.iter().enumerate() {
        let total = row.iter().fold(T::zero(), |a, &b| a + b);
        for (j, &v) in row.iter().enumerate() {
            centroids[[c, j]] = v / total;
        }
    }
    Ok(StreamPlan {
        num_streams: m_t,
        assignment: best.assignment,
        centroids,
    })
}

/// Mean silhouette over users with Euclidean distance on mixing rows.
/// Singleton clusters contribute 0, as does a user with `a = b = 0`.
pub fn silhouette_score<T: Scalar>(w: &MixingMatrix<T>, plan: &StreamPlan<T>) -> Result<T> {
    silhouette(&w.rows(), &plan.assignment, plan.num_streams)
}

pub fn silhouette<T: Scalar>(points: &[Vec<T>], assignment: &[usize], k: usize) -> Result<T> {
    if k < 2 {
        return Err(Error::config(
            "streams",
            "silhouette needs at least two clusters",
        ));
    }
    let n = points.len();
    let mut sizes = vec![0usize; k];
    for &c in assignment {
        sizes[c] += 1;
    }
    if sizes.contains(&0) {
        return Err(Error::Empty("cluster"));
    }
    let mut total = T::zero();
    for i in 0..n {
        let own = assignment[i];
        if sizes[own] == 1 {
            continue;
        }
        let mut sums = vec![T::zero(); k];
        for j in 0..n {
            if j != i {
                sums[assignment[j]] += squared_distance(&points[i], &points[j]).sqrt();
            }
        }
        let a = sums[own] / T::from_count(sizes[own] - 1);
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / T::from_count(sizes[c]))
            .fold(T::infinity(), T::min);
        let denom = a.max(b);
        if denom > T::zero() {
            total += (b - a) / denom;
        }
    }
    Ok(total / T::from_count(n))
}

/// Silhouette score of the k-means plan for each candidate.
pub fn silhouette_table<T: Scalar>(
    w: &MixingMatrix<T>,
    candidates: &[usize],
    seed: u64,
) -> Result<Vec<(usize, T)>> {
    candidates
        .iter()
        .map(|&k| {
            let plan = kmeans_streams(w, k, seed, KMEANS_MAX_ITERS)?;
            Ok((k, silhouette_score(w, &plan)?))
        })
        .collect()
}

/// Candidate with the highest silhouette; ties go to the smallest.
pub fn select_num_streams<T: Scalar>(
    w: &MixingMatrix<T>,
    candidates: &[usize],
    seed: u64,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Empty("stream candidates"));
    }
    if let Some(&bad) = candidates.iter().find(|&&k| k < 2 || k > w.m()) {
        return Err(Error::config(
            "streams",
            format!("candidate {bad} outside [2, {}]", w.m()),
        ));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let table = silhouette_table(w, &sorted, seed)?;
    let mut best = table[0];
    for &(k, s) in &table[1..] {
        if s > best.1 {
            best = (k, s);
        }
    }
    Ok(best.0)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&v| pairs(v)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..kb)
        .map(|j| pairs(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = pairs(n as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
