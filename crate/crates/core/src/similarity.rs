//! The special round before federated training: gradient fingerprints at a
//! common probe model, pairwise fingerprint distances, per-client gradient
//! variance, and the normalized-exponential mixing matrix.

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{
    init_parameters, loss_and_gradient, loss_and_gradient_indexed, ModelSpec, ParameterVector,
};
use crate::rng;
use crate::scalar::{squared_distance, Scalar};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Variances below this are replaced before building the mixing matrix.
pub const SIGMA_SQ_FLOOR: f64 = 1e-12;
pub const DEFAULT_VARIANCE_BATCHES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct GradientFingerprint<T> {
    pub client_id: usize,
    pub gradient: Vec<T>,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientVarianceEstimate<T> {
    pub client_id: usize,
    pub sigma_sq: T,
    pub num_batches: usize,
}

/// Symmetric, zero-diagonal matrix of squared fingerprint distances.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix<T> {
    pub delta: Array2<T>,
}

/// Row-stochastic collaboration weights; row `i` personalizes user `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingMatrix<T> {
    pub w: Array2<T>,
}

impl<T: Scalar> MixingMatrix<T> {
    pub fn new(w: Array2<T>) -> Result<Self> {
        let (r, c) = w.dim();
        if r != c {
            return Err(Error::DimensionMismatch {
                expected: r,
                actual: c,
            });
        }
        if w.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::NonFinite("mixing matrix entries"));
        }
        Ok(MixingMatrix { w })
    }

    pub fn identity(m: usize) -> Self {
        MixingMatrix { w: Array2::eye(m) }
    }

    /// Every row equal to `n_j / sum(n)`.
    pub fn fedavg(ns: &[usize]) -> Self {
        let total = T::from_count(ns.iter().sum());
        let m = ns.len();
        MixingMatrix {
            w: Array2::from_shape_fn((m, m), |(_, j)| T::from_count(ns[j]) / total),
        }
    }

    pub fn m(&self) -> usize {
        self.w.nrows()
    }

    pub fn row(&self, i: usize) -> Vec<T> {
        self.w.row(i).to_vec()
    }

    pub fn rows(&self) -> Vec<Vec<T>> {
        (0..self.m()).map(|i| self.row(i)).collect()
    }

    pub fn max_row_sum_error(&self) -> T {
        self.w
            .rows()
            .into_iter()
            .map(|r| (r.iter().copied().sum::<T>() - T::one()).abs())
            .fold(T::zero(), T::max)
    }
}

/// How `sigma_i sigma_j` in the exponent is formed from the variance estimates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaProduct {
    /// `sqrt(s_i) * sqrt(s_j)`: product of standard deviations.
    #[default]
    StdDev,
    /// `s_i * s_j`: product of the raw variance estimates.
    RawVariance,
}

/// Mean gradient over each client's whole dataset at `theta_hat`.
pub fn probe_gradients<T: Scalar>(
    theta_hat: &ParameterVector<T>,
    spec: &ModelSpec,
    clients: &[ClientDataset<T>],
) -> Result<Vec<GradientFingerprint<T>>> {
    clients
        .par_iter()
        .map(|c| {
            let (_, g) = loss_and_gradient(theta_hat, spec, &c.samples)?;
            Ok(GradientFingerprint {
                client_id: c.client_id,
                gradient: g.into_values(),
                n: c.n(),
            })
        })
        .collect()
}

pub fn pairwise_delta<T: Scalar>(fps: &[GradientFingerprint<T>]) -> Result<SimilarityMatrix<T>> {
    if fps.len() < 2 {
        return Err(Error::Empty("need at least two fingerprints"));
    }
    let d = fps[0].gradient.len();
    if let Some(bad) = fps.iter().find(|f| f.gradient.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.gradient.len(),
        });
    }
    let m = fps.len();
    let mut delta = Array2::zeros((m, m));
    for i in 0..m {
        for j in i + 1..m {
            let v = squared_distance(&fps[i].gradient, &fps[j].gradient);
            delta[[i, j]] = v;
            delta[[j, i]] = v;
        }
    }
    Ok(SimilarityMatrix { delta })
}

/// Mean squared deviation of `K` batch-mean gradients from the full mean.
pub fn estimate_sigma_sq<T: Scalar>(
    theta_hat: &ParameterVector<T>,
    spec: &ModelSpec,
    data: &ClientDataset<T>,
    num_batches: usize,
    seed: u64,
) -> Result<GradientVarianceEstimate<T>> {
    let n = data.n();
    if num_batches == 0 || num_batches > n {
        return Err(Error::NotEnoughSamples {
            needed: num_batches.max(1),
            available: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(seed));
    // full mean over the same order so a single batch reproduces it bit for bit
    let (_, full) = loss_and_gradient_indexed(theta_hat, spec, &data.samples, &order)?;
    let (base, extra) = (n / num_batches, n % num_batches);
    let mut start = 0;
    let mut acc = T::zero();
    for k in 0..num_batches {
        let len = base + usize::from(k < extra);
        let (_, g) =
            loss_and_gradient_indexed(theta_hat, spec, &data.samples, &order[start..start + len])?;
        acc += squared_distance(g.values(), full.values());
        start += len;
    }
    Ok(GradientVarianceEstimate {
        client_id: data.client_id,
        sigma_sq: acc / T::from_count(num_batches),
        num_batches,
    })
}

/// `w_ij` proportional to `n_j exp(-delta_ij / (2 sigma_i sigma_j))`, each row
/// normalized. Exponents are shifted by the row maximum before exponentiating.
pub fn mixing_matrix<T: Scalar>(
    deltas: &SimilarityMatrix<T>,
    sigmas: &[GradientVarianceEstimate<T>],
    ns: &[usize],
    product: SigmaProduct,
) -> Result<MixingMatrix<T>> {
    let m = deltas.delta.nrows();
    if deltas.delta.ncols() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            actual: deltas.delta.ncols(),
        });
    }
    for len in [sigmas.len(), ns.len()] {
        if len != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: len,
            });
        }
    }
    if deltas.delta.iter().any(|v| !v.is_finite()) || sigmas.iter().any(|s| !s.sigma_sq.is_finite())
    {
        return Err(Error::NonFinite("similarity inputs"));
    }
    if let Some(k) = sigmas.iter().position(|s| s.sigma_sq <= T::zero()) {
        return Err(Error::ZeroVariance { client: k });
    }
    if ns.contains(&0) {
        return Err(Error::Empty("client with zero samples"));
    }
    let scale: Vec<T> = sigmas
        .iter()
        .map(|s| match product {
            SigmaProduct::StdDev => s.sigma_sq.sqrt(),
            SigmaProduct::RawVariance => s.sigma_sq,
        })
        .collect();
    let two = T::lit(2.0);
    let mut w = Array2::zeros((m, m));
    for i in 0..m {
        let exponents: Vec<T> = (0..m)
            .map(|j| -deltas.delta[[i, j]] / (two * scale[i] * scale[j]))
            .collect();
        let max = exponents.iter().copied().fold(T::neg_infinity(), T::max);
        let weights: Vec<T> = exponents
            .iter()
            .zip(ns)
            .map(|(&e, &n)| T::from_count(n) * (e - max).exp())
            .collect();
        let total = weights.iter().fold(T::zero(), |a, &b| a + b);
        for (j, v) in weights.into_iter().enumerate() {
            w[[i, j]] = v / total;
        }
    }
    MixingMatrix::new(w)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub variance_batches: usize,
    pub probe_seed: u64,
    #[serde(default)]
    pub sigma_product: SigmaProduct,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            variance_batches: DEFAULT_VARIANCE_BATCHES,
            probe_seed: 0,
            sigma_product: SigmaProduct::StdDev,
        }
    }
}

/// Everything the special round produces.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport<T> {
    pub probe_seed: u64,
    pub delta: SimilarityMatrix<T>,
    pub sigma_sq: Vec<T>,
    pub w: MixingMatrix<T>,
}

/// Probe model, fingerprints, distances, variances (floored) and mixing weights.
pub fn similarity_round<T: Scalar>(
    clients: &[ClientDataset<T>],
    spec: &ModelSpec,
    cfg: &SimilarityConfig,
) -> Result<SimilarityReport<T>> {
    let theta_hat = init_parameters::<T>(spec, cfg.probe_seed);
    let fps = probe_gradients(&theta_hat, spec, clients)?;
    let delta = pairwise_delta(&fps)?;
    let floor = T::lit(SIGMA_SQ_FLOOR);
    let sigmas: Vec<GradientVarianceEstimate<T>> = clients
        .par_iter()
        .map(|c| {
            let k = cfg.variance_batches.min(c.n());
            let seed = rng::derive(cfg.probe_seed, 1000 + c.client_id as u64);
            let mut est = estimate_sigma_sq(&theta_hat, spec, c, k, seed)?;
            if est.sigma_sq < floor {
                est.sigma_sq = floor;
            }
            Ok(est)
        })
        .collect::<Result<_>>()?;
    let ns: Vec<usize> = clients.iter().map(ClientDataset::n).collect();
    let w = mixing_matrix(&delta, &sigmas, &ns, cfg.sigma_product)?;
    Ok(SimilarityReport {
        probe_seed: cfg.probe_seed,
        delta,
        sigma_sq: sigmas.into_iter().map(|s| s.sigma_sq).collect(),
        w,
    })
}

/// JSON shape `{m, delta, sigma_sq, w}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityJson {
    pub m: usize,
    pub delta: Vec<Vec<f64>>,
    pub sigma_sq: Vec<f64>,
    pub w: Vec<Vec<f64>>,
}

fn to_rows<T: Scalar>(a: &Array2<T>) -> Vec<Vec<f64>> {
    a.rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.as_f64()).collect())
        .collect()
}

impl<T: Scalar> SimilarityReport<T> {
    pub fn to_json(&self) -> SimilarityJson {
        SimilarityJson {
            m: self.w.m(),
            delta: to_rows(&self.delta.delta),
            sigma_sq: self.sigma_sq.iter().map(|v| v.as_f64()).collect(),
            w: to_rows(&self.w.w),
        }
    }
}
