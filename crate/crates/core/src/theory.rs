//! Finite-class checks of the weighted-ERM generalization bound: exact
//! discrepancy distance between discrete distributions for threshold
//! classifiers under the 0-1 loss, the weighted empirical risk minimizer,
//! and Monte Carlo validation of the high-probability bound.

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Minimum number of Monte Carlo trials accepted by [`validate_bound`].
pub const MIN_TRIALS: usize = 1000;

/// `h(x) = 1[x >= tau]` (upper) or `h(x) = 1[x < tau]` (lower).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold<T> {
    pub tau: T,
    pub upper: bool,
}

impl<T: Scalar> Threshold<T> {
    pub fn predict(&self, x: T) -> u8 {
        u8::from((x >= self.tau) == self.upper)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Only `1[x >= tau]`; VC dimension 1.
    #[default]
    Upper,
    /// Both orientations; VC dimension 2.
    Both,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteHypothesisClass<T> {
    pub hypotheses: Vec<Threshold<T>>,
    pub vc_dim: usize,
}

impl<T: Scalar> FiniteHypothesisClass<T> {
    pub fn thresholds(grid: &[T], orientation: Orientation) -> Self {
        let mut hypotheses: Vec<Threshold<T>> = grid
            .iter()
            .map(|&tau| Threshold { tau, upper: true })
            .collect();
        let vc_dim = match orientation {
            Orientation::Upper => 1,
            Orientation::Both => {
                hypotheses.extend(grid.iter().map(|&tau| Threshold { tau, upper: false }));
                2
            }
        };
        FiniteHypothesisClass { hypotheses, vc_dim }
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }
}

/// Finitely supported distribution over `(x, y)` with binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution<T> {
    pub support: Vec<(T, u8)>,
    pub probs: Vec<T>,
}

impl<T: Scalar> DiscreteDistribution<T> {
    pub fn new(support: Vec<(T, u8)>, probs: Vec<T>) -> Result<Self> {
        if support.len() != probs.len() || support.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: support.len(),
                actual: probs.len(),
            });
        }
        let total = probs.iter().fold(T::zero(), |a, &p| a + p);
        if probs.iter().any(|&p| p < T::zero() || !p.is_finite())
            || (total - T::one()).abs() > T::lit(1e-12)
        {
            return Err(Error::config("probs", "must be a probability vector"));
        }
        if support.iter().any(|&(_, y)| y > 1) {
            return Err(Error::config("support", "labels must be 0 or 1"));
        }
        Ok(DiscreteDistribution { support, probs })
    }

    /// Uniform `x` over `xs` with `y = 1[x >= tau]`, flipped with probability `noise`.
    pub fn threshold_task(xs: &[T], tau: T, noise: T) -> Self {
        let k = T::from_count(xs.len());
        let mut support = Vec::with_capacity(2 * xs.len());
        let mut probs = Vec::with_capacity(2 * xs.len());
        for &x in xs {
            let clean = u8::from(x >= tau);
            support.push((x, clean));
            probs.push((T::one() - noise) / k);
            support.push((x, 1 - clean));
            probs.push(noise / k);
        }
        DiscreteDistribution { support, probs }
    }

    /// 0-1 risk of `h`.
    pub fn risk(&self, h: &Threshold<T>) -> T {
        self.support
            .iter()
            .zip(&self.probs)
            .filter(|((x, y), _)| h.predict(*x) != *y)
            .fold(T::zero(), |acc, (_, &p)| acc + p)
    }

    /// Probability under the x-marginal that `f` and `g` disagree.
    pub fn disagreement(&self, f: &Threshold<T>, g: &Threshold<T>) -> T {
        self.support
            .iter()
            .zip(&self.probs)
            .filter(|((x, _), _)| f.predict(*x) != g.predict(*x))
            .fold(T::zero(), |acc, (_, &p)| acc + p)
    }

    /// `sum_j w_j P_j`, support concatenated in order.
    pub fn mixture(dists: &[Self], weights: &[T]) -> Self {
        let mut support = Vec::new();
        let mut probs = Vec::new();
        for (d, &w) in dists.iter().zip(weights) {
            support.extend_from_slice(&d.support);
            probs.extend(d.probs.iter().map(|&p| p * w));
        }
        DiscreteDistribution { support, probs }
    }

    pub fn sample(&self, n: usize, r: &mut rng::Rng) -> Vec<(T, u8)> {
        let cumulative: Vec<f64> = self
            .probs
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p.as_f64();
                Some(*acc)
            })
            .collect();
        let last = cumulative.last().copied().unwrap_or(1.0);
        (0..n)
            .map(|_| {
                let u = r.random::<f64>() * last;
                let k = cumulative
                    .partition_point(|&c| c <= u)
                    .min(self.support.len() - 1);
                self.support[k]
            })
            .collect()
    }
}

/// `max_{f, f'} |E_P[l(f, f')] - E_Q[l(f, f')]|` by exhaustive enumeration.
pub fn discrepancy_distance<T: Scalar>(
    p: &DiscreteDistribution<T>,
    q: &DiscreteDistribution<T>,
    fc: &FiniteHypothesisClass<T>,
) -> T {
    let mut best = T::zero();
    for f in &fc.hypotheses {
        for g in &fc.hypotheses {
            let gap = (p.disagreement(f, g) - q.disagreement(f, g)).abs();
            if gap > best {
                best = gap;
            }
        }
    }
    best
}

fn empirical_errors<T: Scalar>(h: &Threshold<T>, data: &[(T, u8)]) -> usize {
    data.iter().filter(|&&(x, y)| h.predict(x) != y).count()
}

/// Index of the minimizer of `sum_j w_j / n_j * errors_j(f)`; ties go to the
/// lowest index.
pub fn weighted_erm<T: Scalar>(
    fc: &FiniteHypothesisClass<T>,
    datasets: &[Vec<(T, u8)>],
    w: &[T],
) -> Result<usize> {
    if fc.is_empty() {
        return Err(Error::Empty("hypothesis class"));
    }
    if datasets.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: datasets.len(),
            actual: w.len(),
        });
    }
    let active: Vec<(usize, T)> = w
        .iter()
        .enumerate()
        .filter(|(_, &wj)| wj > T::zero())
        .map(|(j, &wj)| (j, wj))
        .collect();
    if active.is_empty() {
        return Err(Error::ZeroWeight);
    }
    if let Some(&(j, _)) = active.iter().find(|(j, _)| datasets[*j].is_empty()) {
        return Err(Error::NotEnoughSamples {
            needed: 1,
            available: datasets[j].len(),
        });
    }
    let mut best = (0, T::infinity());
    for (k, h) in fc.hypotheses.iter().enumerate() {
        let loss = active.iter().fold(T::zero(), |acc, &(j, wj)| {
            acc + wj * T::from_count(empirical_errors(h, &datasets[j]))
                / T::from_count(datasets[j].len())
        });
        if loss < best.1 {
            best = (k, loss);
        }
    }
    Ok(best.0)
}

/// `min_f (R_target(f) + R_mixture(f))`, the attained minimum.
pub fn lambda_term<T: Scalar>(
    fc: &FiniteHypothesisClass<T>,
    p_target: &DiscreteDistribution<T>,
    p_mixture: &DiscreteDistribution<T>,
) -> T {
    fc.hypotheses
        .iter()
        .map(|h| p_target.risk(h) + p_mixture.risk(h))
        .fold(T::infinity(), T::min)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundInputs<T> {
    /// Range bound of the loss.
    pub b: T,
    pub delta: T,
    pub weights: Vec<T>,
    pub ns: Vec<usize>,
    /// `d_F(P_i, P_j)` for every `j`.
    pub discrepancies: Vec<T>,
    pub lambda: T,
}

/// `B sqrt(sum_j w_j^2 / n_j) (sqrt(2d/N ln(eN/d)) + sqrt(ln(2/delta)))
///  + 2 sum_j w_j d_j + 2 lambda`, with `N` the total sample count.
pub fn generalization_bound<T: Scalar>(
    inputs: &BoundInputs<T>,
    total_n: usize,
    vc_dim: usize,
) -> T {
    let two = T::lit(2.0);
    let n_total = T::from_count(total_n);
    let d = T::from_count(vc_dim);
    let spread = inputs
        .weights
        .iter()
        .zip(&inputs.ns)
        .fold(T::zero(), |acc, (&w, &n)| acc + w * w / T::from_count(n))
        .sqrt();
    let complexity = (two * d / n_total * (T::lit(std::f64::consts::E) * n_total / d).ln()).sqrt();
    let confidence = (two / inputs.delta).ln().sqrt();
    let bias = inputs
        .weights
        .iter()
        .zip(&inputs.discrepancies)
        .fold(T::zero(), |acc, (&w, &disc)| acc + w * disc);
    inputs.b * spread * (complexity + confidence) + two * bias + two * inputs.lambda
}

/// One grid point of the bound validation.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundProblem<T> {
    pub fc: FiniteHypothesisClass<T>,
    pub distributions: Vec<DiscreteDistribution<T>>,
    pub ns: Vec<usize>,
    pub weights: Vec<T>,
    pub target: usize,
    pub delta: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundValidation {
    pub trials: usize,
    pub violation_rate: f64,
    pub mean_slack: f64,
    pub bound: f64,
    pub mean_excess_risk: f64,
}

impl<T: Scalar> BoundProblem<T> {
    pub fn bound_inputs(&self) -> BoundInputs<T> {
        let target = &self.distributions[self.target];
        let mixture = DiscreteDistribution::mixture(&self.distributions, &self.weights);
        BoundInputs {
            b: T::one(),
            delta: self.delta,
            weights: self.weights.clone(),
            ns: self.ns.clone(),
            discrepancies: self
                .distributions
                .iter()
                .map(|p| discrepancy_distance(target, p, &self.fc))
                .collect(),
            lambda: lambda_term(&self.fc, target, &mixture),
        }
    }

    pub fn bound(&self) -> T {
        generalization_bound(&self.bound_inputs(), self.ns.iter().sum(), self.fc.vc_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.distributions.len();
        if m == 0 || self.ns.len() != m || self.weights.len() != m {
            return Err(Error::config(
                "distributions",
                "distributions, ns and weights must have equal length",
            ));
        }
        if self.target >= m {
            return Err(Error::config("target", "out of range"));
        }
        let total = self.weights.iter().fold(T::zero(), |a, &w| a + w);
        if self.weights.iter().any(|&w| w < T::zero()) || (total - T::one()).abs() > T::lit(1e-9) {
            return Err(Error::config("weights", "must lie on the simplex"));
        }
        if self.ns.contains(&0) {
            return Err(Error::config("ns", "sample counts must be positive"));
        }
        if !(self.delta > T::zero() && self.delta < T::one()) {
            return Err(Error::config("delta", "must lie in (0, 1)"));
        }
        if self.fc.is_empty() {
            return Err(Error::config("grid", "hypothesis class is empty"));
        }
        Ok(())
    }
}

/// Monte Carlo frequency with which the weighted ERM's excess risk on the
/// target exceeds the bound. Trials are split into shards with their own
/// seeds and merged in shard order.
pub fn validate_bound<T: Scalar>(
    problem: &BoundProblem<T>,
    trials: usize,
    seed: u64,
) -> Result<BoundValidation> {
    problem.validate()?;
    if trials < MIN_TRIALS {
        return Err(Error::config(
            "trials",
            format!("at least {MIN_TRIALS} trials required"),
        ));
    }
    let target = &problem.distributions[problem.target];
    let best_risk = problem
        .fc
        .hypotheses
        .iter()
        .map(|h| target.risk(h))
        .fold(T::infinity(), T::min);
    let bound = problem.bound();
    const SHARDS: usize = 16;
    let per = trials.div_ceil(SHARDS);
    let partial: Vec<(usize, f64, f64)> = (0..SHARDS)
        .into_par_iter()
        .map(|s| -> Result<(usize, f64, f64)> {
            let count = per.min(trials.saturating_sub(s * per));
            let mut r = rng::rng(rng::derive(seed, s as u64));
            let (mut violations, mut slack, mut excess_sum) = (0usize, 0.0, 0.0);
            for _ in 0..count {
                let datasets: Vec<Vec<(T, u8)>> = problem
                    .distributions
                    .iter()
                    .zip(&problem.ns)
                    .map(|(d, &n)| d.sample(n, &mut r))
                    .collect();
                let k = weighted_erm(&problem.fc, &datasets, &problem.weights)?;
                let excess = target.risk(&problem.fc.hypotheses[k]) - best_risk;
                violations += usize::from(excess > bound);
                slack += (bound - excess).as_f64();
                excess_sum += excess.as_f64();
            }
            Ok((violations, slack, excess_sum))
        })
        .collect::<Result<_>>()?;
    let (violations, slack, excess) = partial
        .into_iter()
        .fold((0, 0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let n = trials as f64;
    Ok(BoundValidation {
        trials,
        violation_rate: violations as f64 / n,
        mean_slack: slack / n,
        bound: bound.as_f64(),
        mean_excess_risk: excess / n,
    })
}

/// Serializable description of one grid point (threshold tasks on a shared x-grid).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCase {
    pub name: String,
    pub delta: f64,
    pub target: usize,
    pub ns: Vec<usize>,
    pub weights: Vec<f64>,
    /// Per-client labeling threshold.
    pub taus: Vec<f64>,
    /// Per-client label noise.
    pub noise: Vec<f64>,
    /// Support points of the x-marginal, shared by all clients.
    pub xs: Vec<f64>,
    /// Candidate thresholds of the hypothesis class.
    pub grid: Vec<f64>,
    #[serde(default)]
    pub orientation: Orientation,
}

impl BoundCase {
    pub fn problem<T: Scalar>(&self) -> Result<BoundProblem<T>> {
        let m = self.ns.len();
        if self.taus.len() != m || self.noise.len() != m {
            return Err(Error::config(
                format!("{}.taus", self.name),
                "one threshold and noise level per client",
            ));
        }
        let xs: Vec<T> = self.xs.iter().map(|&x| T::lit(x)).collect();
        let grid: Vec<T> = self.grid.iter().map(|&x| T::lit(x)).collect();
        let problem = BoundProblem {
            fc: FiniteHypothesisClass::thresholds(&grid, self.orientation),
            distributions: self
                .taus
                .iter()
                .zip(&self.noise)
                .map(|(&tau, &noise)| {
                    DiscreteDistribution::threshold_task(&xs, T::lit(tau), T::lit(noise))
                })
                .collect(),
            ns: self.ns.clone(),
            weights: self.weights.iter().map(|&w| T::lit(w)).collect(),
            target: self.target,
            delta: T::lit(self.delta),
        };
        problem.validate().map_err(|e| match e {
            Error::InvalidConfig { field, reason } => {
                Error::config(format!("{}.{field}", self.name), reason)
            }
            other => other,
        })?;
        Ok(problem)
    }
}

/// Default validation grid: five heterogeneity settings, each at two
/// confidence levels.
pub fn default_bound_grid() -> Vec<BoundCase> {
    let xs: Vec<f64> = (0..10).map(|k| (k as f64 + 0.5) / 10.0).collect();
    let grid: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
    let base = |name: &str, taus: Vec<f64>, noise: Vec<f64>, ns: Vec<usize>, weights: Vec<f64>| {
        BoundCase {
            name: name.to_string(),
            delta: 0.05,
            target: 0,
            ns,
            weights,
            taus,
            noise,
            xs: xs.clone(),
            grid: grid.clone(),
            orientation: Orientation::Upper,
        }
    };
    let settings = vec![
        base(
            "homogeneous_uniform",
            vec![0.5; 4],
            vec![0.1; 4],
            vec![25; 4],
            vec![0.25; 4],
        ),
        base(
            "local_only",
            vec![0.5, 0.3, 0.7],
            vec![0.1; 3],
            vec![30; 3],
            vec![1.0, 0.0, 0.0],
        ),
        base(
            "mild_shift",
            vec![0.5, 0.6, 0.4, 0.5],
            vec![0.15; 4],
            vec![20, 40, 40, 20],
            vec![0.4, 0.2, 0.2, 0.2],
        ),
        base(
            "strong_shift_fedavg",
            vec![0.2, 0.8, 0.8],
            vec![0.05; 3],
            vec![30; 3],
            vec![1.0 / 3.0; 3],
        ),
        base(
            "noisy_unequal",
            vec![0.5, 0.5, 0.3],
            vec![0.3, 0.1, 0.2],
            vec![10, 60, 30],
            vec![0.2, 0.5, 0.3],
        ),
    ];
    let mut cases = Vec::new();
    for s in settings {
        for delta in [0.05, 0.1] {
            cases.push(BoundCase {
                name: format!("{}_d{}", s.name, delta),
                delta,
                ..s.clone()
            });
        }
    }
    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(x: f64) -> DiscreteDistribution<f64> {
        DiscreteDistribution::new(vec![(x, 0)], vec![1.0]).unwrap()
    }

    #[test]
    fn discrepancy_of_identical_is_zero() {
        let xs = [0.1, 0.4, 0.9];
        let p = DiscreteDistribution::threshold_task(&xs, 0.5, 0.2);
        let fc = FiniteHypothesisClass::thresholds(&[0.0, 0.3, 0.6, 1.0], Orientation::Both);
        assert_eq!(discrepancy_distance(&p, &p, &fc), 0.0);
    }

    #[test]
    fn discrepancy_between_point_masses() {
        let fc = FiniteHypothesisClass::thresholds(&[-1.0, 0.5, 2.0], Orientation::Both);
        assert_eq!(fc.len(), 6);
        let (p, q) = (point(0.0), point(1.0));
        // exhaustive over the 36 ordered pairs
        let mut best: f64 = 0.0;
        for f in &fc.hypotheses {
            for g in &fc.hypotheses {
                let dp = f64::from(u8::from(f.predict(0.0) != g.predict(0.0)));
                let dq = f64::from(u8::from(f.predict(1.0) != g.predict(1.0)));
                best = best.max((dp - dq).abs());
            }
        }
        assert_eq!(best, 1.0);
        assert_eq!(discrepancy_distance(&p, &q, &fc), 1.0);
        assert_eq!(discrepancy_distance(&q, &p, &fc), 1.0);
    }

    #[test]
    fn discrepancy_is_a_pseudometric_on_random_instances() {
        let mut r = rng::rng(4);
        let xs: Vec<f64> = (0..10).map(|k| k as f64 / 10.0).collect();
        let fc =
            FiniteHypothesisClass::thresholds(&[0.05, 0.25, 0.45, 0.65, 0.85], Orientation::Both);
        let random_dist = |r: &mut rng::Rng| {
            let raw: Vec<f64> = (0..10).map(|_| r.random_range(0.0..1.0)).collect();
            let total: f64 = raw.iter().sum();
            DiscreteDistribution {
                support: xs.iter().map(|&x| (x, 0)).collect(),
                probs: raw.iter().map(|v| v / total).collect(),
            }
        };
        for _ in 0..50 {
            let (a, b, c) = (
                random_dist(&mut r),
                random_dist(&mut r),
                random_dist(&mut r),
            );
            let ab = discrepancy_distance(&a, &b, &fc);
            assert_eq!(ab, discrepancy_distance(&b, &a, &fc));
            assert!(
                ab <= discrepancy_distance(&a, &c, &fc) + discrepancy_distance(&c, &b, &fc) + 1e-12
            );
        }
    }

    #[test]
    fn erm_degenerations() {
        let fc = FiniteHypothesisClass::thresholds(&[0.25, 0.75], Orientation::Upper);
        // client 0 labeled by tau = 0.25, client 1 by tau = 0.75
        let d0 = vec![(0.0, 0), (0.5, 1), (0.6, 1), (1.0, 1)];
        let d1 = vec![(0.0, 0), (0.5, 0), (0.6, 0), (1.0, 1)];
        let data = vec![d0, d1];
        assert_eq!(weighted_erm(&fc, &data, &[1.0, 0.0]).unwrap(), 0);
        assert_eq!(weighted_erm(&fc, &data, &[0.0, 1.0]).unwrap(), 1);
        // equal weights tie (2 errors each): lowest index
        assert_eq!(weighted_erm(&fc, &data, &[0.5, 0.5]).unwrap(), 0);
        assert!(matches!(
            weighted_erm(&fc, &data, &[0.0, 0.0]),
            Err(Error::ZeroWeight)
        ));

        let single = FiniteHypothesisClass::thresholds(&[0.9], Orientation::Upper);
        assert_eq!(weighted_erm(&single, &data, &[0.5, 0.5]).unwrap(), 0);
    }

    #[test]
    fn uniform_weights_on_copies_equal_pooled_erm() {
        let mut r = rng::rng(6);
        let fc = FiniteHypothesisClass::thresholds(&[0.1, 0.3, 0.5, 0.7, 0.9], Orientation::Both);
        let p = DiscreteDistribution::threshold_task(&[0.0, 0.2, 0.4, 0.6, 0.8, 1.0], 0.5, 0.25);
        for _ in 0..50 {
            let d = p.sample(12, &mut r);
            let copies = vec![d.clone(), d.clone(), d.clone()];
            let pooled: Vec<_> = copies.concat();
            let a = weighted_erm(&fc, &copies, &[1.0 / 3.0; 3]).unwrap();
            let b = weighted_erm(&fc, &[pooled], &[1.0]).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn lambda_cases() {
        let xs = [0.1, 0.4, 0.6, 0.9];
        let clean = DiscreteDistribution::threshold_task(&xs, 0.5, 0.0);
        let fc = FiniteHypothesisClass::thresholds(&[0.0, 0.5, 1.0], Orientation::Upper);
        assert_eq!(lambda_term(&fc, &clean, &clean), 0.0);
        let noisy = DiscreteDistribution::threshold_task(&xs, 0.5, 0.2);
        assert!((lambda_term(&fc, &noisy, &noisy) - 0.4f64).abs() < 1e-12);
    }

    #[test]
    fn lambda_matches_re_enumeration() {
        let mut r = rng::rng(12);
        for _ in 0..20 {
            let grid: Vec<f64> = (0..5).map(|_| r.random_range(0.0..1.0)).collect();
            let fc = FiniteHypothesisClass::thresholds(&grid, Orientation::Upper);
            let mk = |r: &mut rng::Rng| {
                let support: Vec<(f64, u8)> = (0..6)
                    .map(|_| (r.random_range(0.0..1.0), r.random_range(0..2u8)))
                    .collect();
                let raw: Vec<f64> = (0..6).map(|_| r.random_range(0.01..1.0)).collect();
                let t: f64 = raw.iter().sum();
                DiscreteDistribution {
                    support,
                    probs: raw.iter().map(|v| v / t).collect(),
                }
            };
            let (p, q) = (mk(&mut r), mk(&mut r));
            let mut best = f64::INFINITY;
            for &tau in &grid {
                let risk = |d: &DiscreteDistribution<f64>| -> f64 {
                    d.support
                        .iter()
                        .zip(&d.probs)
                        .filter(|((x, y), _)| u8::from(*x >= tau) != *y)
                        .map(|(_, p)| p)
                        .sum()
                };
                best = best.min(risk(&p) + risk(&q));
            }
            assert!((lambda_term(&fc, &p, &q) - best).abs() < 1e-12);
        }
    }

    fn inputs(
        weights: Vec<f64>,
        ns: Vec<usize>,
        disc: Vec<f64>,
        lambda: f64,
        delta: f64,
    ) -> BoundInputs<f64> {
        BoundInputs {
            b: 1.0,
            delta,
            weights,
            ns,
            discrepancies: disc,
            lambda,
        }
    }

    #[test]
    fn bound_plug_in_value() {
        let got = generalization_bound(
            &inputs(vec![0.5, 0.5], vec![50, 50], vec![0.0, 0.2], 0.05, 0.1),
            100,
            1,
        );
        // term by term
        let spread = (0.25f64 / 50.0 + 0.25 / 50.0).sqrt();
        let est = (2.0f64 / 100.0 * (100.0f64.ln() + 1.0)).sqrt() + 20.0f64.ln().sqrt();
        let expect = spread * est + 2.0 * 0.5 * 0.2 + 2.0 * 0.05;
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.5065636).abs() < 1e-6);
    }

    #[test]
    fn bound_simplifications() {
        let (m, n) = (4usize, 25usize);
        let got = generalization_bound(
            &inputs(vec![0.25; 4], vec![n; 4], vec![0.0; 4], 0.0, 0.05),
            m * n,
            1,
        );
        let est =
            (2.0 / 100.0 * (std::f64::consts::E * 100.0).ln()).sqrt() + (2.0f64 / 0.05).ln().sqrt();
        assert!((got - (1.0 / ((m * n) as f64)).sqrt() * est).abs() < 1e-12);

        let onehot = inputs(vec![1.0, 0.0], vec![40, 10], vec![0.0, 0.7], 0.0, 0.1);
        let est = (2.0 / 50.0 * (std::f64::consts::E * 50.0).ln()).sqrt() + 20.0f64.ln().sqrt();
        assert!(
            (generalization_bound(&onehot, 50, 1) - (1.0f64 / 40.0).sqrt() * est).abs() < 1e-12
        );
    }

    #[test]
    fn bound_grows_with_discrepancy() {
        let base = inputs(
            vec![0.5, 0.3, 0.2],
            vec![10, 20, 30],
            vec![0.0, 0.1, 0.2],
            0.05,
            0.1,
        );
        let b0 = generalization_bound(&base, 60, 1);
        for j in 0..3 {
            let mut more = base.clone();
            more.discrepancies[j] += 0.05;
            assert!(generalization_bound(&more, 60, 1) > b0);
        }
    }

    #[test]
    fn validate_bound_rejects_few_trials() {
        let problem = default_bound_grid()[0].problem::<f64>().unwrap();
        assert!(validate_bound(&problem, 999, 1).is_err());
    }

    #[test]
    fn large_local_sample_has_no_excess_risk() {
        let xs: Vec<f64> = (0..10).map(|k| (k as f64 + 0.5) / 10.0).collect();
        let case = BoundCase {
            name: "big".into(),
            delta: 0.1,
            target: 0,
            ns: vec![10_000, 10],
            weights: vec![1.0, 0.0],
            taus: vec![0.5, 0.5],
            noise: vec![0.1, 0.1],
            xs,
            grid: (0..=10).map(|k| k as f64 / 10.0).collect(),
            orientation: Orientation::Upper,
        };
        let problem = case.problem::<f64>().unwrap();
        let res = validate_bound(&problem, 1000, 3).unwrap();
        assert_eq!(res.violation_rate, 0.0);
        assert!(res.mean_excess_risk < 1e-3);
        let inputs = problem.bound_inputs();
        let est = (1.0f64 / 10_000.0).sqrt()
            * ((2.0 / 10_010.0 * (std::f64::consts::E * 10_010.0).ln()).sqrt()
                + 20.0f64.ln().sqrt());
        assert!((res.mean_slack - (2.0 * inputs.lambda + est)).abs() < 1e-3);
    }

    #[test]
    fn default_grid_is_valid_and_deterministic() {
        let grid = default_bound_grid();
        assert!(grid.len() >= 5);
        let p = grid[4].problem::<f64>().unwrap();
        assert_eq!(
            validate_bound(&p, 1000, 9).unwrap(),
            validate_bound(&p, 1000, 9).unwrap()
        );
    }
}
