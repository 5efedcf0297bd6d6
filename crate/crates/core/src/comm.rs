//! Round timing: downlink streams, shifted-exponential compute stragglers and
//! uplink transmission, plus accuracy-versus-time curves.

use crate::orchestrator::RoundMetrics;
use crate::rng;
use crate::scalar::Scalar;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Rate of the exponential part of the compute time; `Infinite` makes the
/// compute time deterministic (`T_min`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComputeRate {
    Finite(f64),
    Infinite,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Uplink {
    /// Users upload concurrently; the stage costs `rho * t_dl`.
    #[default]
    Parallel,
    /// Uploads are serialized; the stage costs `m * rho * t_dl`.
    Serial,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommModel {
    pub rho: f64,
    pub t_dl: f64,
    pub t_min: f64,
    pub mu: ComputeRate,
    #[serde(default)]
    pub uplink: Uplink,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    Expected,
    Sampled,
}

/// Named system presets, all with `t_dl = 1`.
pub const PRESET_NAMES: [&str; 3] = ["wireless_slow", "wireless_fast", "wired"];

impl CommModel {
    /// `rho = 4`, `T_min = T_dl = 1/mu`.
    pub fn wireless_slow() -> Self {
        CommModel {
            rho: 4.0,
            t_dl: 1.0,
            t_min: 1.0,
            mu: ComputeRate::Finite(1.0),
            uplink: Uplink::Parallel,
        }
    }

    /// `rho = 2`, `T_min = T_dl`, `1/mu = 0`.
    pub fn wireless_fast() -> Self {
        CommModel {
            rho: 2.0,
            t_dl: 1.0,
            t_min: 1.0,
            mu: ComputeRate::Infinite,
            uplink: Uplink::Parallel,
        }
    }

    /// `rho = 1`, `T_min = T_dl`, `1/mu = 0`.
    pub fn wired() -> Self {
        CommModel {
            rho: 1.0,
            t_dl: 1.0,
            t_min: 1.0,
            mu: ComputeRate::Infinite,
            uplink: Uplink::Parallel,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "wireless_slow" => Some(Self::wireless_slow()),
            "wireless_fast" => Some(Self::wireless_fast()),
            "wired" => Some(Self::wired()),
            _ => None,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        use crate::Error;
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::config("comm.rho", "must be positive"));
        }
        if !(self.t_dl > 0.0 && self.t_dl.is_finite()) {
            return Err(Error::config("comm.t_dl", "must be positive"));
        }
        if !(self.t_min >= 0.0 && self.t_min.is_finite()) {
            return Err(Error::config("comm.t_min", "must be non-negative"));
        }
        if let ComputeRate::Finite(mu) = self.mu {
            if !(mu > 0.0 && mu.is_finite()) {
                return Err(Error::config("comm.mu", "must be positive"));
            }
        }
        Ok(())
    }
}

pub fn harmonic<T: Scalar>(m: usize) -> T {
    (1..=m).fold(T::zero(), |acc, k| acc + T::one() / T::from_count(k))
}

/// `E[max of m compute times] = T_min + H_m / mu`.
pub fn expected_compute_time<T: Scalar>(m: usize, cm: &CommModel) -> T {
    match cm.mu {
        ComputeRate::Infinite => T::lit(cm.t_min),
        ComputeRate::Finite(mu) => T::lit(cm.t_min) + harmonic::<T>(m) / T::lit(mu),
    }
}

/// i.i.d. `T_min + Exp(mu)` draws by inverse CDF.
pub fn sample_compute_times<T: Scalar>(m: usize, cm: &CommModel, seed: u64) -> Vec<T> {
    let mut r = rng::rng(seed);
    (0..m).map(|_| T::lit(draw_compute(&mut r, cm))).collect()
}

fn draw_compute(r: &mut rng::Rng, cm: &CommModel) -> f64 {
    match cm.mu {
        ComputeRate::Infinite => cm.t_min,
        ComputeRate::Finite(mu) => {
            let u: f64 = r.random();
            cm.t_min - (1.0 - u).ln() / mu
        }
    }
}

/// Mean and standard error of `max(T_1..T_m)` over `trials` rounds, sharded
/// over threads with per-shard seeds and merged in shard order.
pub fn monte_carlo_makespan(m: usize, cm: &CommModel, trials: usize, seed: u64) -> (f64, f64) {
    const SHARDS: usize = 16;
    let per = trials.div_ceil(SHARDS);
    let partial: Vec<(f64, f64, usize)> = (0..SHARDS)
        .into_par_iter()
        .map(|s| {
            let count = per.min(trials.saturating_sub(s * per));
            let mut r = rng::rng(rng::derive(seed, s as u64));
            let (mut sum, mut sq) = (0.0, 0.0);
            for _ in 0..count {
                let mx = (0..m)
                    .map(|_| draw_compute(&mut r, cm))
                    .fold(f64::NEG_INFINITY, f64::max);
                sum += mx;
                sq += mx * mx;
            }
            (sum, sq, count)
        })
        .collect();
    let (sum, sq, n) = partial
        .into_iter()
        .fold((0.0, 0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let n = n as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Stage durations of one round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundTime<T> {
    pub downlink: T,
    pub compute: T,
    pub uplink: T,
}

impl<T: Scalar> RoundTime<T> {
    pub fn total(&self) -> T {
        self.downlink + self.compute + self.uplink
    }
}

pub fn round_stages<T: Scalar>(
    m: usize,
    num_streams: usize,
    cm: &CommModel,
    mode: TimingMode,
    seed: u64,
) -> RoundTime<T> {
    let t_dl = T::lit(cm.t_dl);
    let compute = match mode {
        TimingMode::Expected => expected_compute_time(m, cm),
        TimingMode::Sampled => sample_compute_times::<T>(m, cm, seed)
            .into_iter()
            .fold(T::neg_infinity(), T::max),
    };
    let uplink = match cm.uplink {
        Uplink::Parallel => T::lit(cm.rho) * t_dl,
        Uplink::Serial => T::from_count(m) * T::lit(cm.rho) * t_dl,
    };
    RoundTime {
        downlink: T::from_count(num_streams) * t_dl,
        compute,
        uplink,
    }
}

/// Downlink (one broadcast per stream) + compute + uplink.
pub fn round_time<T: Scalar>(
    m: usize,
    num_streams: usize,
    cm: &CommModel,
    mode: TimingMode,
    seed: u64,
) -> T {
    round_stages(m, num_streams, cm, mode, seed).total()
}

/// `(time in units of t_dl, mean validation accuracy)`, time strictly increasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedCurve {
    pub points: Vec<(f64, f64)>,
}

/// Pairs cumulative round times with the accuracy after each round. A round-0
/// entry (the initial model) sits at time 0 when present. When
/// `similarity_round` is set, the special round's broadcast, compute and
/// upload are charged once before round 1.
pub fn timed_curve(
    metrics: &[RoundMetrics],
    m: usize,
    num_streams: usize,
    cm: &CommModel,
    mode: TimingMode,
    seed: u64,
    similarity_round: bool,
) -> TimedCurve {
    let mut t = 0.0;
    if similarity_round {
        t += round_time::<f64>(m, 1, cm, mode, rng::derive(seed, u64::MAX));
    }
    let mut points = Vec::with_capacity(metrics.len());
    for rm in metrics {
        if rm.round == 0 {
            points.push((0.0, rm.mean_val_accuracy));
            continue;
        }
        t += round_time::<f64>(m, num_streams, cm, mode, rng::derive(seed, rm.round as u64));
        points.push((t / cm.t_dl, rm.mean_val_accuracy));
    }
    TimedCurve { points }
}

impl TimedCurve {
    /// Accuracy reached by time `t` (step function; last point at or before `t`).
    pub fn value_at(&self, t: f64) -> Option<f64> {
        self.points
            .iter()
            .take_while(|(pt, _)| *pt <= t)
            .last()
            .map(|&(_, a)| a)
    }

    pub fn end_time(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.0)
    }

    /// First time at which accuracy reaches `target`.
    pub fn time_to_reach(&self, target: f64) -> Option<f64> {
        self.points.iter().find(|(_, a)| *a >= target).map(|p| p.0)
    }

    /// Earliest time `t*` such that `self` stays at or above `other` on every
    /// breakpoint in `[t*, horizon]`, with `horizon` the earlier end time.
    /// `None` when `self` is below `other` at the horizon.
    pub fn dominates_after(&self, other: &TimedCurve) -> Option<f64> {
        let horizon = self.end_time().min(other.end_time());
        let mut times: Vec<f64> = self
            .points
            .iter()
            .chain(&other.points)
            .map(|p| p.0)
            .filter(|&t| t <= horizon)
            .collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let mut crossover = None;
        for &t in times.iter().rev() {
            match (self.value_at(t), other.value_at(t)) {
                (Some(a), Some(b)) if a >= b => crossover = Some(t),
                _ => break,
            }
        }
        crossover
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_in_tdl,mean_val_acc\n");
        for (t, a) in &self.points {
            out.push_str(&format!("{t},{a}\n"));
        }
        out
    }
}
