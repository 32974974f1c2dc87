//! Tilted chains, Radon–Nikodym weights, exponential martingales and
//! importance sampling.

use std::collections::{BTreeMap, VecDeque};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::event::Event;
use crate::markov::{divergence, invariant_measure, lift_operator, stationary_flow, Edge, Flow, Measure, RateKernel};
use crate::rate_function::{divergence_tolerance, line_maximize, rate, tilted_exit_gap, TestPair};
use crate::simulate::{sample_indexed, EmpiricalPair, Trajectory};

/// A base kernel together with an absolutely continuous perturbation.
#[derive(Debug, Clone)]
pub struct TiltedModel {
    pub base: RateKernel,
    pub tilted: RateKernel,
    /// `ln(r_tilde / r)` on the tilted edges.
    pub log_rate_ratio: BTreeMap<Edge, f64>,
    /// `r_tilde(y) - r(y)`.
    pub exit_gap: Vec<f64>,
}

impl TiltedModel {
    /// Pairs two kernels on the same state space; every tilted edge must be a
    /// base edge.
    pub fn from_kernels(base: RateKernel, tilted: RateKernel) -> Result<Self> {
        if base.num_states() != tilted.num_states() {
            return Err(Error::InvalidArgument("tilted kernel lives on a different state space".into()));
        }
        let mut log_rate_ratio = BTreeMap::new();
        for ((y, z), rt) in tilted.edges() {
            if !base.has_edge(y, z) {
                return Err(Error::UnsupportedFlow(y, z));
            }
            log_rate_ratio.insert((y, z), (rt / base.rate(y, z)).ln());
        }
        let exit_gap = (0..base.num_states()).map(|y| tilted.exit_rate(y) - base.exit_rate(y)).collect();
        Ok(Self { base, tilted, log_rate_ratio, exit_gap })
    }

    /// `r_hat = r e^G` on every base edge.
    pub fn from_log_ratios(base: &RateKernel, g: &BTreeMap<Edge, f64>) -> Result<Self> {
        let tilted = base.map_rates(|e, r| r * g.get(&e).copied().unwrap_or(0.0).exp())?;
        Self::from_kernels(base.clone(), tilted)
    }

    pub fn identity(base: &RateKernel) -> Self {
        Self::from_kernels(base.clone(), base.clone()).expect("a kernel is absolutely continuous w.r.t. itself")
    }

    /// `max_z |sum_y mu(y) r_tilde(y, z) - mu(z) r_tilde(z)|` over the support of `mu`.
    pub fn invariance_residual(&self, mu: &Measure) -> f64 {
        let n = self.tilted.num_states();
        let mut inflow = vec![0.0; n];
        for ((y, z), r) in self.tilted.edges() {
            inflow[z] += mu.get(y) * r;
        }
        (0..n)
            .filter(|&z| mu.get(z) > 0.0)
            .map(|z| (inflow[z] - mu.get(z) * self.tilted.exit_rate(z)).abs())
            .fold(0.0, f64::max)
    }
}

/// Shortest path (in jumps) of `kernel` from `start` into `targets`.
fn escape_path(kernel: &RateKernel, start: usize, targets: &[bool]) -> Option<Vec<Edge>> {
    let n = kernel.num_states();
    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut seen = vec![false; n];
    seen[start] = true;
    let mut queue = VecDeque::from([start]);
    while let Some(y) = queue.pop_front() {
        if targets[y] {
            let mut path = Vec::new();
            let mut cur = y;
            while let Some(p) = parent[cur] {
                path.push((p, cur));
                cur = p;
            }
            path.reverse();
            return Some(path);
        }
        for &(z, _) in kernel.out_edges(y) {
            if !seen[z] {
                seen[z] = true;
                parent[z] = Some(y);
                queue.push_back(z);
            }
        }
    }
    None
}

/// Kernel with rates `Q(y, z) / mu(y)` on the support of `Q`.
///
/// When `escape_from` names a state outside the support of `mu`, base rates are
/// kept along one shortest path from it into the support.
pub fn tilted_kernel(mu: &Measure, q: &Flow, kernel: &RateKernel, escape_from: Option<usize>) -> Result<TiltedModel> {
    let n = kernel.num_states();
    if mu.len() != n {
        return Err(Error::InvalidArgument(format!("measure has {} entries, model has {n} states", mu.len())));
    }
    for ((y, z), _) in q.iter() {
        if y >= n || z >= n || mu.get(y) == 0.0 || !kernel.has_edge(y, z) {
            return Err(Error::UnsupportedFlow(y, z));
        }
    }
    let div = divergence(q, n);
    if div.max_abs() > divergence_tolerance(q) {
        return Err(Error::NonzeroDivergence { max_abs: div.max_abs() });
    }
    let mut rates: Vec<(usize, usize, f64)> = q
        .iter()
        .map(|((y, z), qv)| {
            let base = kernel.rate(y, z);
            let ratio = qv / mu.get(y);
            // rounding noise around the base rate is dropped so that (pi, Q^pi) gives back r exactly
            let r = if (ratio - base).abs() <= 4.0 * f64::EPSILON * base { base } else { ratio };
            (y, z, r)
        })
        .collect();
    if let Some(x) = escape_from {
        if x >= n {
            return Err(Error::InvalidArgument(format!("start state {x} outside state space")));
        }
        if mu.get(x) == 0.0 {
            let inside: Vec<bool> = (0..n).map(|y| mu.get(y) > 0.0).collect();
            let path = escape_path(kernel, x, &inside).ok_or(Error::DegenerateTilt)?;
            rates.extend(path.into_iter().map(|(y, z)| (y, z, kernel.rate(y, z))));
        }
    }
    let tilted = RateKernel::new(kernel.states().clone(), rates)?;
    TiltedModel::from_kernels(kernel.clone(), tilted)
}

/// `log dP_hat/dP` on `[0, T]`: `-T <mu_T, r_hat - r> + sum T Q_T ln(r_hat / r)`.
///
/// A jump the tilted chain cannot make gives `-inf`; one the base chain cannot
/// make gives `+inf`.
pub fn log_rn_weight(traj: &Trajectory, tm: &TiltedModel) -> f64 {
    let mut w = 0.0;
    for (y, z) in traj.transitions() {
        match tm.log_rate_ratio.get(&(y, z)) {
            Some(l) => w += l,
            None if tm.base.has_edge(y, z) => return f64::NEG_INFINITY,
            None => return f64::INFINITY,
        }
    }
    let occ = traj.occupation_times(tm.base.num_states());
    w - occ.iter().zip(&tm.exit_gap).map(|(t, g)| t * g).sum::<f64>()
}

/// `T [<Q_T, F> - <mu_T, r^F - r>]`.
pub fn log_exp_martingale_f(traj: &Trajectory, tp: &TestPair, kernel: &RateKernel) -> f64 {
    let jumps: f64 = traj.transitions().map(|e| tp.f_at(e)).sum();
    let gap = tilted_exit_gap(kernel, &tp.f);
    let occ = traj.occupation_times(kernel.num_states());
    jumps - occ.iter().zip(&gap).map(|(t, g)| t * g).sum::<f64>()
}

pub fn exp_martingale_f(traj: &Trajectory, tp: &TestPair, kernel: &RateKernel) -> f64 {
    log_exp_martingale_f(traj, tp, kernel).exp()
}

/// `ln u(X_T) - ln u(X_0) + T <mu_T, -Lu/u>`.
pub fn log_exp_martingale_u(traj: &Trajectory, u: &[f64], kernel: &RateKernel) -> Result<f64> {
    let n = kernel.num_states();
    if u.len() != n || u.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument("u must be positive and finite on every state".into()));
    }
    let lu = lift_operator(kernel, u);
    let occ = traj.occupation_times(n);
    let drift: f64 = (0..n).map(|y| occ[y] * (-lu[y] / u[y])).sum();
    Ok(u[traj.final_state()].ln() - u[traj.initial].ln() + drift)
}

pub fn exp_martingale_u(traj: &Trajectory, u: &[f64], kernel: &RateKernel) -> Result<f64> {
    log_exp_martingale_u(traj, u, kernel).map(f64::exp)
}

/// Samples path `index`, keeping paths that stop in an absorbing state.
fn sample_allowing_absorption(kernel: &RateKernel, x0: usize, horizon: f64, seed: u64, index: u64) -> Result<Trajectory> {
    match sample_indexed(kernel, x0, horizon, seed, index) {
        Err(Error::AbsorbedBeforeHorizon { trajectory, .. }) => Ok(*trajectory),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub horizon: f64,
    pub estimate: f64,
    pub std_error: f64,
    /// `ln(estimate)`, computed without underflow.
    pub log_estimate: f64,
    pub hits: usize,
    pub paths: usize,
}

impl Estimate {
    /// `-(1/T) ln(estimate)`.
    pub fn implied_rate(&self) -> f64 {
        -self.log_estimate / self.horizon
    }
}

/// Reweighted indicator for each path index in `range`: `Some(-log_rn)` on a hit.
fn weighted_hits(
    tm: &TiltedModel,
    x0: usize,
    event: &Event,
    horizon: f64,
    seed: u64,
    range: std::ops::Range<u64>,
) -> Result<Vec<Option<f64>>> {
    let n = tm.base.num_states();
    range
        .into_par_iter()
        .map(|i| {
            let tr = sample_allowing_absorption(&tm.tilted, x0, horizon, seed, i)?;
            let pair = EmpiricalPair::of(&tr, n);
            Ok(event.holds(&pair.measure, &pair.flow).then(|| -log_rn_weight(&tr, tm)))
        })
        .collect()
}

/// Importance-sampling estimate of `P_x0((mu_T, Q_T) in event)` under a given
/// tilted model.
///
/// The first `max(N/10, 1)` paths form a pilot batch; no hits there gives
/// [`Error::DegenerateTilt`].
pub fn importance_estimate_with(
    tm: &TiltedModel,
    x0: usize,
    event: &Event,
    horizon: f64,
    paths: usize,
    seed: u64,
) -> Result<Estimate> {
    if paths == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    if x0 >= tm.base.num_states() {
        return Err(Error::InvalidArgument(format!("initial state {x0} outside state space")));
    }
    if event.is_all() {
        return Ok(Estimate { horizon, estimate: 1.0, std_error: 0.0, log_estimate: 0.0, hits: paths, paths });
    }
    let pilot = (paths / 10).max(1) as u64;
    let mut logs = weighted_hits(tm, x0, event, horizon, seed, 0..pilot)?;
    if logs.iter().all(Option::is_none) {
        return Err(Error::DegenerateTilt);
    }
    logs.extend(weighted_hits(tm, x0, event, horizon, seed, pilot..paths as u64)?);

    let hits: Vec<f64> = logs.iter().flatten().copied().collect();
    let m = hits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let nf = paths as f64;
    let (s1, s2) = hits.iter().fold((0.0, 0.0), |(a, b), &l| {
        let w = (l - m).exp();
        (a + w, b + w * w)
    });
    let mean_scaled = s1 / nf;
    let var_scaled = if paths > 1 { (s2 / nf - mean_scaled * mean_scaled).max(0.0) * nf / (nf - 1.0) } else { 0.0 };
    let scale = m.exp();
    Ok(Estimate {
        horizon,
        estimate: scale * mean_scaled,
        std_error: scale * (var_scaled / nf).sqrt(),
        log_estimate: m + mean_scaled.ln(),
        hits: hits.len(),
        paths,
    })
}

/// Importance-sampling estimate with the chain tilted towards `(mu*, Q*)`.
#[allow(clippy::too_many_arguments)]
pub fn importance_estimate(
    kernel: &RateKernel,
    x0: usize,
    event: &Event,
    mu_star: &Measure,
    q_star: &Flow,
    horizon: f64,
    paths: usize,
    seed: u64,
) -> Result<Estimate> {
    let tm = tilted_kernel(mu_star, q_star, kernel, Some(x0))?;
    importance_estimate_with(&tm, x0, event, horizon, paths, seed)
}

/// Plain Monte Carlo estimate of the same probability.
pub fn naive_estimate(kernel: &RateKernel, x0: usize, event: &Event, horizon: f64, paths: usize, seed: u64) -> Result<Estimate> {
    let tm = TiltedModel::identity(kernel);
    let logs = weighted_hits(&tm, x0, event, horizon, seed, 0..paths as u64)?;
    let hits = logs.iter().flatten().count();
    let p = hits as f64 / paths as f64;
    Ok(Estimate {
        horizon,
        estimate: p,
        std_error: (p * (1.0 - p) / (paths as f64 - 1.0).max(1.0)).sqrt(),
        log_estimate: p.ln(),
        hits,
        paths,
    })
}

/// A tilting target: a stationary pair of a tilted kernel near the cheapest
/// point of the event.
#[derive(Debug, Clone)]
pub struct TiltTarget {
    pub measure: Measure,
    pub flow: Flow,
    pub rate: f64,
    /// Event violation at the target; zero when it lies inside.
    pub violation: f64,
    pub log_ratios: BTreeMap<Edge, f64>,
}

const G_MAX: f64 = 20.0;

/// Minimises the rate function over stationary pairs `(pi_G, pi_G r e^G)` of
/// the tilts `r e^G` of an irreducible kernel, subject to `event` through an
/// increasing quadratic penalty, by coordinate descent over `G`.
pub fn find_tilt(kernel: &RateKernel, event: &Event, max_sweeps: usize) -> Result<TiltTarget> {
    let edges: Vec<Edge> = kernel.edges().map(|(e, _)| e).collect();
    let eval = |g: &BTreeMap<Edge, f64>| -> Result<(Measure, Flow, f64, f64)> {
        let tk = kernel.map_rates(|e, r| r * g[&e].exp())?;
        let pi = invariant_measure(&tk)?.into_measure();
        let q = stationary_flow(&pi, &tk);
        let i = rate(&pi, &q, kernel).value.finite().ok_or_else(|| Error::NumericalFailure("infinite rate at a tilt".into()))?;
        let v = event.violation(&pi, &q);
        Ok((pi, q, i, v))
    };
    let mut g: BTreeMap<Edge, f64> = edges.iter().map(|&e| (e, 0.0)).collect();
    if !event.is_all() {
        for rho in [1e1, 1e3, 1e5, 1e7] {
            let objective = |g: &BTreeMap<Edge, f64>| match eval(g) {
                Ok((_, _, i, v)) => i + rho * v * v,
                Err(_) => f64::INFINITY,
            };
            let mut best = objective(&g);
            for _ in 0..max_sweeps {
                let before = best;
                let start = g.clone();
                for &e in &edges {
                    let mut trial = g.clone();
                    let mut f = |x: f64| {
                        trial.insert(e, x.clamp(-G_MAX, G_MAX));
                        -objective(&trial)
                    };
                    let x = line_maximize(&mut f, g[&e], 0.25).clamp(-G_MAX, G_MAX);
                    let mut cand = g.clone();
                    cand.insert(e, x);
                    let val = objective(&cand);
                    if val < best {
                        best = val;
                        g = cand;
                    }
                }
                // pattern move along the sweep displacement
                let along = |t: f64| -> BTreeMap<Edge, f64> {
                    start.iter().map(|(&e, &x0)| (e, (x0 + t * (g[&e] - x0)).clamp(-G_MAX, G_MAX))).collect()
                };
                let t = line_maximize(&mut |t| -objective(&along(t)), 1.0, 0.5);
                let cand = along(t);
                let val = objective(&cand);
                if val < best {
                    best = val;
                    g = cand;
                }
                if before - best <= 1e-13 * (1.0 + best.abs()) {
                    break;
                }
            }
        }
    }
    let (measure, flow, rate, violation) = eval(&g)?;
    Ok(TiltTarget { measure, flow, rate, violation, log_ratios: g })
}

/// Frequencies of the two one-sided deviation events for `Q_T(y, z)` from a
/// single-edge exponential tilt, against the bound `e^{-T delta lambda}`.
#[derive(Debug, Clone, Serialize)]
pub struct WillyReport {
    pub edge: Edge,
    pub lambda: f64,
    pub delta: f64,
    pub horizon: f64,
    pub paths: usize,
    pub bound: f64,
    pub upper_hits: usize,
    pub lower_hits: usize,
}

impl WillyReport {
    pub fn upper_frequency(&self) -> f64 {
        self.upper_hits as f64 / self.paths as f64
    }

    pub fn lower_frequency(&self) -> f64 {
        self.lower_hits as f64 / self.paths as f64
    }

    /// Both frequencies at most `safety * bound`.
    pub fn within(&self, safety: f64) -> bool {
        let b = safety * self.bound;
        self.upper_frequency() <= b && self.lower_frequency() <= b
    }
}

#[allow(clippy::too_many_arguments)]
pub fn willy_bounds_check(
    kernel: &RateKernel,
    x0: usize,
    edge: Edge,
    lambda: f64,
    delta: f64,
    horizon: f64,
    paths: usize,
    seed: u64,
) -> Result<WillyReport> {
    if !(lambda > 0.0 && delta > 0.0) {
        return Err(Error::InvalidArgument("lambda and delta must be positive".into()));
    }
    let (y, z) = edge;
    if y >= kernel.num_states() || !kernel.has_edge(y, z) {
        return Err(Error::UnknownEdge(y, z));
    }
    let r = kernel.rate(y, z);
    let up = lambda.exp_m1() / lambda;
    let down = -(-lambda).exp_m1() / lambda;
    let n = kernel.num_states();
    let flags: Vec<(bool, bool)> = (0..paths as u64)
        .into_par_iter()
        .map(|i| {
            let tr = sample_allowing_absorption(kernel, x0, horizon, seed, i)?;
            let p = EmpiricalPair::of(&tr, n);
            let (qv, base) = (p.flow.get(edge), p.measure.get(y) * r);
            Ok((qv > base * up + delta, qv < base * down - delta))
        })
        .collect::<Result<_>>()?;
    Ok(WillyReport {
        edge,
        lambda,
        delta,
        horizon,
        paths,
        bound: (-horizon * delta * lambda).exp(),
        upper_hits: flags.iter().filter(|f| f.0).count(),
        lower_hits: flags.iter().filter(|f| f.1).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::{ProbabilityMeasure, StateSpace};

    fn two_state(a: f64, b: f64) -> RateKernel {
        RateKernel::new(StateSpace::range(2), [(0, 1, a), (1, 0, b)]).unwrap()
    }

    fn three_cycle() -> RateKernel {
        RateKernel::new(StateSpace::range(3), [(0, 1, 1.0), (1, 2, 2.0), (2, 0, 0.5), (1, 0, 0.7)]).unwrap()
    }

    #[test]
    fn stationary_pair_gives_back_the_kernel() {
        let k = three_cycle();
        let pi = invariant_measure(&k).unwrap();
        let q = stationary_flow(&pi, &k);
        let tm = tilted_kernel(&pi, &q, &k, None).unwrap();
        for ((y, z), r) in k.edges() {
            assert_eq!(tm.tilted.rate(y, z), r);
        }
        assert!(tm.exit_gap.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn two_state_division() {
        let k = two_state(1.0, 1.0);
        let mu = ProbabilityMeasure::uniform(2);
        let q = Flow::new([((0, 1), 1.0), ((1, 0), 1.0)]).unwrap();
        let tm = tilted_kernel(&mu, &q, &k, None).unwrap();
        assert_eq!(tm.tilted.rate(0, 1), 2.0);
        assert_eq!(tm.tilted.rate(1, 0), 2.0);
        assert!(tm.invariance_residual(&mu) <= 1e-12);
    }

    #[test]
    fn rejects_flow_off_support() {
        let k = two_state(1.0, 1.0);
        let mu = ProbabilityMeasure::dirac(2, 0);
        let q = Flow::new([((0, 1), 1.0), ((1, 0), 1.0)]).unwrap();
        assert!(matches!(tilted_kernel(&mu, &q, &k, None), Err(Error::UnsupportedFlow(1, 0))));
    }

    #[test]
    fn escape_path_keeps_base_rates() {
        let k = RateKernel::new(StateSpace::range(4), [(0, 1, 3.0), (1, 2, 1.0), (2, 3, 1.0), (3, 2, 1.0), (2, 1, 1.0)]).unwrap();
        let mu = ProbabilityMeasure::new(vec![0.0, 0.0, 0.5, 0.5]).unwrap();
        let q = Flow::new([((2, 3), 0.4), ((3, 2), 0.4)]).unwrap();
        let tm = tilted_kernel(&mu, &q, &k, Some(0)).unwrap();
        assert_eq!(tm.tilted.rate(0, 1), 3.0);
        assert_eq!(tm.tilted.rate(1, 2), 1.0);
        assert_eq!(tm.tilted.rate(2, 1), 0.0);
        assert!((tm.tilted.rate(2, 3) - 0.8).abs() < 1e-15);
        assert!(tm.invariance_residual(&mu) <= 1e-12);
    }

    #[test]
    fn rn_weight_identity_and_no_jump() {
        let k = two_state(1.0, 2.0);
        let tr = sample_indexed(&k, 0, 5.0, 3, 0).unwrap();
        assert_eq!(log_rn_weight(&tr, &TiltedModel::identity(&k)), 0.0);

        let tm = TiltedModel::from_kernels(k.clone(), two_state(1.5, 2.0)).unwrap();
        let still = Trajectory::new(0, vec![], 4.0).unwrap();
        assert!((log_rn_weight(&still, &tm) - (-4.0 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn rn_weight_matches_per_jump_product() {
        let k = three_cycle();
        let tk = RateKernel::new(StateSpace::range(3), [(0, 1, 2.0), (1, 2, 1.0), (2, 0, 0.25), (1, 0, 3.0)]).unwrap();
        let tm = TiltedModel::from_kernels(k.clone(), tk.clone()).unwrap();
        // 0 -> 1 at 0.5, 1 -> 2 at 1.25, 2 -> 0 at 3.0, horizon 4
        let tr = Trajectory::new(0, vec![(0.5, 1), (1.25, 2), (3.0, 0)], 4.0).unwrap();
        let holds = [(0usize, 0.5), (1, 0.75), (2, 1.75), (0, 1.0)];
        let jumps = [(0usize, 1usize), (1, 2), (2, 0)];
        let mut ratio = 1.0;
        for &(y, h) in &holds {
            ratio *= (-(tk.exit_rate(y) - k.exit_rate(y)) * h).exp();
        }
        for &(y, z) in &jumps {
            ratio *= tk.rate(y, z) / k.rate(y, z);
        }
        assert!((log_rn_weight(&tr, &tm) - ratio.ln()).abs() < 1e-13);
    }

    #[test]
    fn rn_weight_infinite_cases() {
        let k = three_cycle();
        let tk = RateKernel::new(StateSpace::range(3), [(0, 1, 1.0), (1, 2, 2.0), (2, 0, 0.5)]).unwrap();
        let tm = TiltedModel::from_kernels(k, tk).unwrap();
        let tr = Trajectory::new(1, vec![(0.5, 0)], 1.0).unwrap();
        assert_eq!(log_rn_weight(&tr, &tm), f64::NEG_INFINITY);
        let tr = Trajectory::new(0, vec![(0.5, 2)], 1.0).unwrap();
        assert_eq!(log_rn_weight(&tr, &tm), f64::INFINITY);
    }

    #[test]
    fn martingales_trivial_cases() {
        let k = three_cycle();
        let tr = sample_indexed(&k, 1, 10.0, 9, 4).unwrap();
        assert_eq!(exp_martingale_f(&tr, &TestPair::default(), &k), 1.0);
        assert!((exp_martingale_u(&tr, &[2.0; 3], &k).unwrap() - 1.0).abs() < 1e-15);
        assert!(exp_martingale_u(&tr, &[1.0, 0.0, 1.0], &k).is_err());
    }

    #[test]
    fn martingale_f_equals_rn_weight() {
        let k = three_cycle();
        let tk = RateKernel::new(StateSpace::range(3), [(0, 1, 2.0), (1, 2, 1.0), (2, 0, 0.25), (1, 0, 3.0)]).unwrap();
        let tm = TiltedModel::from_kernels(k.clone(), tk).unwrap();
        let tp = TestPair::new([], tm.log_rate_ratio.clone());
        for i in 0..20 {
            let tr = sample_indexed(&k, 0, 7.0, 11, i).unwrap();
            let a = log_exp_martingale_f(&tr, &tp, &k);
            assert!((a - log_rn_weight(&tr, &tm)).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn martingale_u_matches_f_up_to_boundary() {
        let k = three_cycle();
        let u = [1.0f64, 3.0, 0.5];
        let f = k.edges().map(|((y, z), _)| ((y, z), (u[z] / u[y]).ln())).collect::<BTreeMap<_, _>>();
        let tp = TestPair::new([], f);
        for i in 0..20 {
            let tr = sample_indexed(&k, 2, 6.0, 5, i).unwrap();
            let lu = log_exp_martingale_u(&tr, &u, &k).unwrap();
            let lf = log_exp_martingale_f(&tr, &tp, &k);
            let boundary = (u[tr.final_state()] / u[tr.initial]).ln();
            assert!((lu - lf).abs() < 1e-12 * (1.0 + lf.abs()), "{lu} {lf} {boundary}");
        }
    }

    #[test]
    fn rn_weight_telescopes() {
        let k = three_cycle();
        let tk = RateKernel::new(StateSpace::range(3), [(0, 1, 2.0), (1, 2, 1.0), (2, 0, 0.25), (1, 0, 3.0)]).unwrap();
        let tm = TiltedModel::from_kernels(k.clone(), tk).unwrap();
        for i in 0..20 {
            let tr = sample_indexed(&k, 0, 8.0, 21, i).unwrap();
            let (a, b) = tr.split_at(3.3);
            let whole = log_rn_weight(&tr, &tm);
            let parts = log_rn_weight(&a, &tm) + log_rn_weight(&b, &tm);
            assert!((whole - parts).abs() < 1e-12 * (1.0 + whole.abs()));
        }
    }

    #[test]
    fn whole_space_estimate_is_one() {
        let k = two_state(1.0, 1.0);
        let est = importance_estimate_with(&TiltedModel::identity(&k), 0, &Event::all(), 10.0, 100, 1).unwrap();
        assert_eq!((est.estimate, est.std_error), (1.0, 0.0));
    }

    #[test]
    fn unreachable_event_is_degenerate() {
        let k = two_state(1.0, 1.0);
        let ev = Event::parse("mu[0] >= 2", k.states()).unwrap();
        let r = importance_estimate_with(&TiltedModel::identity(&k), 0, &ev, 10.0, 100, 1);
        assert!(matches!(r, Err(Error::DegenerateTilt)));
    }

    #[test]
    fn tilted_estimate_agrees_with_naive() {
        let k = two_state(1.0, 1.0);
        let ev = Event::parse("mu[0] >= 0.7", k.states()).unwrap();
        let mu = ProbabilityMeasure::new(vec![0.7, 0.3]).unwrap();
        let q0 = 0.21f64.sqrt();
        let q = Flow::new([((0, 1), q0), ((1, 0), q0)]).unwrap();
        let t = 20.0;
        let is = importance_estimate(&k, 0, &ev, &mu, &q, t, 4000, 7).unwrap();
        let mc = naive_estimate(&k, 0, &ev, t, 20000, 8).unwrap();
        let z = (is.estimate - mc.estimate).abs() / (is.std_error.powi(2) + mc.std_error.powi(2)).sqrt();
        assert!(z < 3.0, "is {is:?} mc {mc:?}");
    }

    #[test]
    fn find_tilt_on_two_state_threshold() {
        let k = two_state(1.0, 1.0);
        let ev = Event::parse("mu[0] >= 0.7", k.states()).unwrap();
        let t = find_tilt(&k, &ev, 200).unwrap();
        let exact = 1.0 - 2.0 * 0.21f64.sqrt();
        assert!((t.rate - exact).abs() < 1e-5, "{} vs {exact}", t.rate);
        assert!((t.measure.get(0) - 0.7).abs() < 1e-4);
    }

    #[test]
    fn willy_bound_holds_on_two_state() {
        let k = two_state(1.0, 1.0);
        let rep = willy_bounds_check(&k, 0, (0, 1), 1.0, 0.5, 50.0, 10_000, 3).unwrap();
        assert_eq!((rep.upper_hits, rep.lower_hits), (0, 0));
        assert!(rep.within(1.0));
        let far = willy_bounds_check(&k, 0, (0, 1), 1.0, 1e6, 5.0, 100, 3).unwrap();
        assert_eq!(far.upper_frequency(), 0.0);
    }
}
