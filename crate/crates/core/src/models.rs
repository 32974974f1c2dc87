//! Birth–death chains and numeric checks of the compactness conditions on
//! finite truncations.
//!
//! A truncation at `K` lives on `{0, ..., K}` with rates `r(k, k+1) = b_k` for
//! `k < K` and `r(k, k-1) = d_k` for `1 <= k <= K`. Asymptotic conditions
//! cannot be decided on a finite state space, so every verdict is qualified as
//! holding or failing *on the truncation*, based on the trend over the last
//! quarter of the states.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::{stationary_flow, Flow, Measure, ProbabilityMeasure, RateKernel, StateSpace};
use crate::simulate::stream;

/// Birth rates `b[k] = b_k` for `k = 0..K-1` and death rates `d[k-1] = d_k` for
/// `k = 1..K`. Longer vectors are allowed; entries past the truncation are
/// ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BirthDeathSpec {
    pub b: Vec<f64>,
    pub d: Vec<f64>,
    pub truncation: usize,
}

impl BirthDeathSpec {
    pub fn new(b: Vec<f64>, d: Vec<f64>, truncation: usize) -> Result<Self> {
        let s = Self { b, d, truncation };
        s.validate()?;
        Ok(s)
    }

    /// Rates given as functions of `k`: `birth(k)` for `k < K`, `death(k)` for `1 <= k <= K`.
    pub fn from_fn(truncation: usize, birth: impl Fn(usize) -> f64, death: impl Fn(usize) -> f64) -> Result<Self> {
        Self::new((0..truncation).map(birth).collect(), (1..=truncation).map(death).collect(), truncation)
    }

    /// `b_k = beta`, `d_k = delta`.
    pub fn constant(beta: f64, delta: f64, truncation: usize) -> Result<Self> {
        Self::from_fn(truncation, |_| beta, |_| delta)
    }

    /// `b_k = lambda`, `d_k = k`: Poisson invariant law.
    pub fn poisson(lambda: f64, truncation: usize) -> Result<Self> {
        Self::from_fn(truncation, |_| lambda, |k| k as f64)
    }

    /// `b_k = k + 1`, `d_k = 2k`: invariant law `2^{-k-1}`.
    pub fn doubling(truncation: usize) -> Result<Self> {
        Self::from_fn(truncation, |k| (k + 1) as f64, |k| 2.0 * k as f64)
    }

    /// `b_k = (k + 1)/2`, `d_k = k`: invariant law `2^{-k-1}`.
    pub fn half_birth(truncation: usize) -> Result<Self> {
        Self::from_fn(truncation, |k| (k + 1) as f64 / 2.0, |k| k as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.truncation;
        if k < 2 {
            return Err(Error::InvalidModel(format!("truncation {k} must be at least 2")));
        }
        if self.b.len() < k || self.d.len() < k {
            return Err(Error::InvalidModel(format!(
                "truncation {k} needs {k} birth and {k} death rates, got {} and {}",
                self.b.len(),
                self.d.len()
            )));
        }
        if let Some(x) = self.b[..k].iter().chain(&self.d[..k]).find(|x| !(x.is_finite() && **x > 0.0)) {
            return Err(Error::InvalidModel(format!("birth and death rates must be positive and finite, got {x}")));
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.truncation + 1
    }

    /// `b_k`, zero at the truncation boundary.
    pub fn birth(&self, k: usize) -> f64 {
        if k < self.truncation {
            self.b[k]
        } else {
            0.0
        }
    }

    /// `d_k`, zero at the origin.
    pub fn death(&self, k: usize) -> f64 {
        if k == 0 || k > self.truncation {
            0.0
        } else {
            self.d[k - 1]
        }
    }

    /// `r(k)` of the untruncated chain where known (`b_K` is unknown and
    /// treated as zero).
    pub fn exit_rate(&self, k: usize) -> f64 {
        self.birth(k) + self.death(k)
    }
}

pub fn birth_death_kernel(spec: &BirthDeathSpec) -> Result<RateKernel> {
    spec.validate()?;
    let k = spec.truncation;
    let rates = (0..k).flat_map(|i| [(i, i + 1, spec.birth(i)), (i + 1, i, spec.death(i + 1))]);
    RateKernel::new(StateSpace::range(k + 1), rates)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn running_log_sum(xs: &[f64]) -> Vec<f64> {
    let mut acc = f64::NEG_INFINITY;
    xs.iter()
        .map(|&x| {
            let m = acc.max(x);
            acc = if m == f64::NEG_INFINITY { m } else { m + ((acc - m).exp() + (x - m).exp()).ln() };
            acc
        })
        .collect()
}

/// `ln(b_0 ... b_{k-1} / (d_1 ... d_k))` for `k = 0..=K`.
pub fn log_weights(spec: &BirthDeathSpec) -> Vec<f64> {
    let mut w = Vec::with_capacity(spec.num_states());
    let mut acc = 0.0;
    w.push(acc);
    for k in 1..=spec.truncation {
        acc += spec.birth(k - 1).ln() - spec.death(k).ln();
        w.push(acc);
    }
    w
}

/// Closed-form invariant law of the truncation, `pi(k) = Z^{-1} prod b / prod d`.
pub fn bd_invariant(spec: &BirthDeathSpec) -> Result<ProbabilityMeasure> {
    spec.validate()?;
    let lw = log_weights(spec);
    let lz = log_sum_exp(&lw);
    ProbabilityMeasure::normalized(lw.iter().map(|l| (l - lz).exp()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trend {
    Bounded,
    Growing,
    Inconclusive,
}

fn last_quartile(len: usize) -> usize {
    (3 * len / 4).min(len.saturating_sub(2))
}

/// Ratio test on series terms given as logs: `Bounded` (summable) when every
/// ratio over the last quartile is below `1 - 1e-3`, `Growing` when none is
/// below one.
pub fn series_trend(log_terms: &[f64]) -> Trend {
    if log_terms.len() < 3 {
        return Trend::Inconclusive;
    }
    let diffs: Vec<f64> = log_terms[last_quartile(log_terms.len())..].windows(2).map(|w| w[1] - w[0]).collect();
    let max = diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = diffs.iter().copied().fold(f64::INFINITY, f64::min);
    if max < (1.0f64 - 1e-3).ln() {
        Trend::Bounded
    } else if min >= 0.0 {
        Trend::Growing
    } else {
        Trend::Inconclusive
    }
}

/// Relative change over the last quartile: `Growing` above 2%, `Bounded` at
/// or below 0.5%.
pub fn sequence_trend(values: &[f64]) -> (Trend, f64) {
    if values.len() < 3 {
        return (Trend::Inconclusive, f64::NAN);
    }
    let a = values[last_quartile(values.len())];
    let z = values[values.len() - 1];
    let rel = (z - a) / a.abs().max(f64::MIN_POSITIVE);
    let t = if rel > 0.02 {
        Trend::Growing
    } else if rel <= 0.005 {
        Trend::Bounded
    } else {
        Trend::Inconclusive
    };
    (t, rel)
}

/// Partial sums (in log space) of the normalisation series `Z` and of the
/// series `sum_k d_1..d_k / (b_1..b_k)` whose divergence is recurrence.
#[derive(Debug, Clone, Serialize)]
pub struct BirthDeathDiagnostics {
    pub log_normalization_partial: Vec<f64>,
    pub normalization_trend: Trend,
    pub log_recurrence_partial: Vec<f64>,
    pub recurrence_trend: Trend,
    /// `<pi, r>` on the truncation.
    pub mean_exit_rate: f64,
    pub mean_exit_trend: Trend,
}

pub fn birth_death_diagnostics(spec: &BirthDeathSpec) -> Result<BirthDeathDiagnostics> {
    spec.validate()?;
    let k = spec.truncation;
    let lw = log_weights(spec);
    // recurrence terms use b_1..b_k, so they stop at K-1
    let mut lrec = vec![0.0];
    let mut acc = 0.0;
    for i in 1..k {
        acc += spec.death(i).ln() - spec.birth(i).ln();
        lrec.push(acc);
    }
    let pi = bd_invariant(spec)?;
    let lz = log_sum_exp(&lw);
    let log_exit_terms: Vec<f64> = (0..k).map(|i| lw[i] - lz + (spec.birth(i) + spec.death(i)).ln()).collect();
    Ok(BirthDeathDiagnostics {
        normalization_trend: series_trend(&lw[..k]),
        log_normalization_partial: running_log_sum(&lw),
        recurrence_trend: series_trend(&lrec),
        log_recurrence_partial: running_log_sum(&lrec),
        mean_exit_rate: (0..=k).map(|i| pi.get(i) * spec.exit_rate(i)).sum(),
        mean_exit_trend: series_trend(&log_exit_terms),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    HoldsOnTruncation,
    FailsOnTruncation,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub condition: String,
    pub verdict: Verdict,
    pub witnesses: BTreeMap<String, f64>,
    /// The per-state sequence the verdict is read from.
    pub series: Vec<f64>,
}

/// `{2^-10, ..., 2^3}`.
pub fn default_sigma_grid() -> Vec<f64> {
    (-10..=3).map(|e| 2f64.powi(e)).collect()
}

/// `v = -Lu/u` from `ln u`, evaluated through ratios `u(z)/u(y)`.
pub fn lyapunov_v(kernel: &RateKernel, log_u: &[f64]) -> Vec<f64> {
    (0..kernel.num_states())
        .map(|y| -kernel.out_edges(y).iter().map(|&(z, r)| r * (log_u[z] - log_u[y]).exp_m1()).sum::<f64>())
        .collect()
}

/// `v(k) = d_k (1 - 1/A) + b_k (1 - A)` for `u(k) = A^k` on the truncation.
pub fn bd_geometric_v(spec: &BirthDeathSpec, a: f64) -> Vec<f64> {
    (0..spec.num_states()).map(|k| spec.death(k) * (1.0 - 1.0 / a) + spec.birth(k) * (1.0 - a)).collect()
}

/// `ln u(k) = k ln A`.
pub fn geometric_log_u(a: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 * a.ln()).collect()
}

/// Lyapunov check for `u = e^{log_u}`: computes `v = -Lu/u` and the largest
/// grid `sigma` for which `sigma r - v` attains its maximum `C` before the last
/// quartile of states.
pub fn check_lyapunov(kernel: &RateKernel, log_u: &[f64], sigma_grid: &[f64]) -> Result<ConditionReport> {
    let n = kernel.num_states();
    if log_u.len() != n || log_u.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("u must be positive and finite on every state".into()));
    }
    if n < 4 {
        return Err(Error::InvalidArgument("lyapunov check needs at least 4 states".into()));
    }
    let v = lyapunov_v(kernel, log_u);
    let cut = last_quartile(n);
    let feasible = |s: f64| -> Option<f64> {
        let g: Vec<f64> = (0..n).map(|y| s * kernel.exit_rate(y) - v[y]).collect();
        let head = g[..cut].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tail = g[cut..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (tail <= head).then_some(head)
    };
    let mut best: Option<(f64, f64)> = None;
    for &s in sigma_grid {
        if s > 0.0 && best.is_none_or(|(bs, _)| s > bs) {
            if let Some(c) = feasible(s) {
                best = Some((s, c));
            }
        }
    }
    let (v_trend, v_rel) = sequence_trend(&v);
    let mut witnesses = BTreeMap::new();
    witnesses.insert("v_min".into(), v.iter().copied().fold(f64::INFINITY, f64::min));
    witnesses.insert("v_last".into(), v[n - 1]);
    witnesses.insert("v_last_quartile_change".into(), v_rel);
    let verdict = match best {
        Some((s, c)) => {
            witnesses.insert("sigma".into(), s);
            witnesses.insert("C".into(), c);
            if v_trend == Trend::Growing {
                Verdict::HoldsOnTruncation
            } else {
                Verdict::Inconclusive
            }
        }
        None => {
            witnesses.insert("sigma".into(), 0.0);
            witnesses.insert("C".into(), (0..n).map(|y| -v[y]).fold(f64::NEG_INFINITY, f64::max).max(0.0));
            Verdict::FailsOnTruncation
        }
    };
    Ok(ConditionReport { condition: "lyapunov".into(), verdict, witnesses, series: v })
}

/// Terms of the birth–death log-Sobolev criterion
/// `pi[k, inf) ln(1/pi[k, inf)) sum_{j<k} 1/(pi(j) b_j)` for `k = 1..K`,
/// together with the log of the tail remainder beyond `K` used in `pi[k, inf)`.
pub fn log_sobolev_terms(spec: &BirthDeathSpec) -> Result<(Vec<f64>, f64)> {
    spec.validate()?;
    let k_max = spec.truncation;
    let lw = log_weights(spec);
    // geometric bound on the mass beyond K from the last-quartile ratio trend
    let ratios: Vec<f64> = lw[last_quartile(lw.len())..].windows(2).map(|w| w[1] - w[0]).collect();
    let lrho = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_remainder = if lrho < 0.0 { lw[k_max] + lrho - (-lrho.exp_m1()).ln() } else { f64::INFINITY };
    if !log_remainder.is_finite() {
        return Err(Error::NumericalFailure("invariant weights do not decay over the last quartile".into()));
    }
    let mut all = lw.clone();
    all.push(log_remainder);
    let lz = log_sum_exp(&all);
    // log pi[k, inf) including the remainder
    let mut log_tail = vec![0.0; k_max + 2];
    log_tail[k_max + 1] = log_remainder - lz;
    for k in (0..=k_max).rev() {
        let (a, b) = (lw[k] - lz, log_tail[k + 1]);
        let m = a.max(b);
        log_tail[k] = m + ((a - m).exp() + (b - m).exp()).ln();
    }
    let mut terms = Vec::with_capacity(k_max);
    let mut log_s = f64::NEG_INFINITY;
    for k in 1..=k_max {
        let x = -(lw[k - 1] - lz) - spec.birth(k - 1).ln();
        let m = log_s.max(x);
        log_s = m + ((log_s - m).exp() + (x - m).exp()).ln();
        let lt = log_tail[k];
        // pi[k, inf) ln(1/pi[k, inf)) = exp(lt) * (-lt)
        terms.push((lt + (-lt).ln() + log_s).exp());
    }
    Ok((terms, log_remainder - lz))
}

pub fn check_log_sobolev_bd(spec: &BirthDeathSpec) -> Result<ConditionReport> {
    let (terms, log_remainder) = log_sobolev_terms(spec)?;
    let (trend, rel) = sequence_trend(&terms);
    let mut witnesses = BTreeMap::new();
    witnesses.insert("sup_criterion".into(), terms.iter().copied().fold(0.0, f64::max));
    witnesses.insert("last_term".into(), *terms.last().unwrap());
    witnesses.insert("last_quartile_change".into(), rel);
    witnesses.insert("log_tail_remainder".into(), log_remainder);
    let moments = check_exponential_moments(spec, &default_sigma_grid())?;
    witnesses.insert("moment_sigma".into(), moments.witnesses["sigma"]);
    let verdict = match trend {
        Trend::Bounded => Verdict::HoldsOnTruncation,
        Trend::Growing => Verdict::FailsOnTruncation,
        Trend::Inconclusive => Verdict::Inconclusive,
    };
    Ok(ConditionReport { condition: "logsobolev".into(), verdict, witnesses, series: terms })
}

/// `ln <pi, e^{sigma r}>` on the truncation for each grid `sigma`; the verdict
/// holds when some positive `sigma` gives summable terms over `k < K`.
pub fn check_exponential_moments(spec: &BirthDeathSpec, sigma_grid: &[f64]) -> Result<ConditionReport> {
    spec.validate()?;
    let k_max = spec.truncation;
    let lw = log_weights(spec);
    let lz = log_sum_exp(&lw);
    let mut witnesses = BTreeMap::new();
    let mut best = 0.0f64;
    let mut any_inconclusive = false;
    let mut series = Vec::new();
    for &s in sigma_grid {
        let lt: Vec<f64> = (0..=k_max).map(|k| lw[k] - lz + s * spec.exit_rate(k)).collect();
        let log_moment = log_sum_exp(&lt);
        series.push(log_moment);
        witnesses.insert(format!("log_moment[{s}]"), log_moment);
        match series_trend(&lt[..k_max]) {
            Trend::Bounded => best = best.max(s),
            Trend::Inconclusive => any_inconclusive = true,
            Trend::Growing => {}
        }
    }
    witnesses.insert("sigma".into(), best);
    let verdict = if best > 0.0 {
        Verdict::HoldsOnTruncation
    } else if any_inconclusive {
        Verdict::Inconclusive
    } else {
        Verdict::FailsOnTruncation
    };
    Ok(ConditionReport { condition: "moments".into(), verdict, witnesses, series })
}

/// `D(f) = 1/4 sum_{x,y} (pi(x) r(x,y) + pi(y) r(y,x)) (f(y) - f(x))^2`.
pub fn dirichlet_form(kernel: &RateKernel, pi: &Measure, f: &[f64]) -> f64 {
    // each edge appears once in each ordered pair
    0.5 * kernel.edges().map(|((x, y), r)| pi.get(x) * r * (f[y] - f[x]).powi(2)).sum::<f64>()
}

#[derive(Debug, Clone, Serialize)]
pub struct NonTightnessReport {
    pub beta: f64,
    pub delta: f64,
    pub horizon: f64,
    /// `[beta T / 2, 2 (beta + delta) T]`.
    pub interval: (f64, f64),
    /// `(2 (beta + delta) T - 1) ln(beta / (beta + delta))`.
    pub log_bound: f64,
    pub bound: f64,
    pub paths: usize,
    pub hits: usize,
    pub frequency: f64,
    /// Upper end of a 95% confidence interval for the frequency (rule of three
    /// when there are no hits).
    pub frequency_upper: f64,
}

/// Lower bound on the probability, from 0 with constant rates `beta < delta`,
/// that all jumps in `[0, T]` go right and their number lies in the interval,
/// with a Monte Carlo frequency of that event.
pub fn non_tightness_demo(beta: f64, delta: f64, horizon: f64, paths: usize, seed: u64) -> Result<NonTightnessReport> {
    if !(beta > 0.0 && delta > 0.0 && beta < delta) {
        return Err(Error::InvalidArgument("need 0 < beta < delta".into()));
    }
    if !(horizon > 0.0 && horizon.is_finite()) || paths == 0 {
        return Err(Error::InvalidArgument("need a positive horizon and at least one path".into()));
    }
    let (lo, hi) = (beta * horizon / 2.0, 2.0 * (beta + delta) * horizon);
    let log_bound = (hi - 1.0) * (beta / (beta + delta)).ln();
    let hits = (0..paths as u64)
        .into_par_iter()
        .filter(|&i| {
            let mut rng = stream(seed, i);
            let (mut t, mut n) = (0.0, 0usize);
            loop {
                let rate = if n == 0 { beta } else { beta + delta };
                t += -(1.0 - rng.gen::<f64>()).ln() / rate;
                if t > horizon {
                    let nf = n as f64;
                    return nf >= lo && nf <= hi;
                }
                if n > 0 && rng.gen::<f64>() * rate >= beta {
                    return false;
                }
                n += 1;
                if n as f64 > hi {
                    return false;
                }
            }
        })
        .count();
    let nf = paths as f64;
    let p = hits as f64 / nf;
    let upper = if hits == 0 { 3.0 / nf } else { p + 1.96 * (p * (1.0 - p) / nf).sqrt() };
    Ok(NonTightnessReport {
        beta,
        delta,
        horizon,
        interval: (lo, hi),
        log_bound,
        bound: log_bound.exp(),
        paths,
        hits,
        frequency: p,
        frequency_upper: upper,
    })
}

/// The pair `mu^n = (1 - 1/n) pi + (delta_n + delta_{n+1}) / 2n`,
/// `Q^n = (1 - 1/n) Q^pi + (1_{(n,n+1)} + 1_{(n+1,n)}) / 2` for
/// `b_k = (k+1)/2`, `d_k = k` truncated at `K > n` (default `n + 40`).
pub fn strong_topology_counterexample(n: usize, truncation: Option<usize>) -> Result<(ProbabilityMeasure, Flow, RateKernel)> {
    if n < 2 {
        return Err(Error::InvalidArgument("n must be at least 2".into()));
    }
    let k = truncation.unwrap_or(n + 40);
    if k <= n {
        return Err(Error::InvalidArgument(format!("truncation {k} must exceed n = {n}")));
    }
    let spec = BirthDeathSpec::half_birth(k)?;
    let kernel = birth_death_kernel(&spec)?;
    let pi = bd_invariant(&spec)?;
    let qpi = stationary_flow(&pi, &kernel);
    let w = 1.0 - 1.0 / n as f64;
    let mut mu: Vec<f64> = pi.weights().iter().map(|p| w * p).collect();
    mu[n] += 0.5 / n as f64;
    mu[n + 1] += 0.5 / n as f64;
    let bump = Flow::new([((n, n + 1), 0.5), ((n + 1, n), 0.5)])?;
    let q = qpi.combine(w, &bump, 1.0);
    Ok((ProbabilityMeasure::normalized(mu)?, q, kernel))
}
