//! Trajectory sampling and the empirical statistics of a path.
//!
//! Paths are stored as jump lists, so empirical measure and flow are exact
//! functions of the path with no time discretisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::{Edge, Flow, ProbabilityMeasure, RateKernel, SignedMeasure};

/// A piecewise-constant path on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial: usize,
    /// `(time, destination)` with strictly increasing times in `(0, T]`.
    pub jumps: Vec<(f64, usize)>,
    pub horizon: f64,
}

impl Trajectory {
    /// Validated constructor.
    pub fn new(initial: usize, jumps: Vec<(f64, usize)>, horizon: f64) -> Result<Self> {
        if !(horizon >= 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!("horizon {horizon} must be finite and nonnegative")));
        }
        let mut cur = initial;
        let mut last = 0.0;
        for &(t, z) in &jumps {
            if !(t > last && t <= horizon) {
                return Err(Error::InvalidArgument(format!("jump time {t} out of order or beyond horizon")));
            }
            if z == cur {
                return Err(Error::InvalidArgument(format!("jump to current state {z} at time {t}")));
            }
            last = t;
            cur = z;
        }
        Ok(Self { initial, jumps, horizon })
    }

    pub fn final_state(&self) -> usize {
        self.jumps.last().map_or(self.initial, |&(_, z)| z)
    }

    pub fn num_jumps(&self) -> usize {
        self.jumps.len()
    }

    /// Iterates over `(from, to)` for every jump, in time order.
    pub fn transitions(&self) -> impl Iterator<Item = Edge> + '_ {
        let froms = std::iter::once(self.initial).chain(self.jumps.iter().map(|&(_, z)| z));
        froms.zip(self.jumps.iter().map(|&(_, z)| z))
    }

    /// Time spent in each state over `[0, T]`.
    pub fn occupation_times(&self, n_states: usize) -> Vec<f64> {
        let mut occ = vec![0.0; n_states];
        let mut cur = self.initial;
        let mut last = 0.0;
        for &(t, z) in &self.jumps {
            occ[cur] += t - last;
            cur = z;
            last = t;
        }
        occ[cur] += self.horizon - last;
        occ
    }

    /// Jump counts `N(y, z)` per edge.
    pub fn jump_counts(&self) -> std::collections::BTreeMap<Edge, u64> {
        let mut counts = std::collections::BTreeMap::new();
        for e in self.transitions() {
            *counts.entry(e).or_insert(0u64) += 1;
        }
        counts
    }

    /// Splits the path at time `s` into the pieces on `[0, s]` and `[s, T]`,
    /// the second re-based to start at time 0.
    pub fn split_at(&self, s: f64) -> (Trajectory, Trajectory) {
        assert!(s > 0.0 && s < self.horizon, "split time must lie inside (0, T)");
        let cut = self.jumps.partition_point(|&(t, _)| t <= s);
        let head = Trajectory { initial: self.initial, jumps: self.jumps[..cut].to_vec(), horizon: s };
        let mid = head.final_state();
        let tail = Trajectory {
            initial: mid,
            jumps: self.jumps[cut..].iter().map(|&(t, z)| (t - s, z)).collect(),
            horizon: self.horizon - s,
        };
        (head, tail)
    }
}

/// The pair `(mu_T, Q_T)` of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalPair {
    pub measure: ProbabilityMeasure,
    pub flow: Flow,
    pub horizon: f64,
}

impl EmpiricalPair {
    pub fn of(traj: &Trajectory, n_states: usize) -> Self {
        Self { measure: empirical_measure(traj, n_states), flow: empirical_flow(traj), horizon: traj.horizon }
    }
}

/// Random stream for trajectory `index` of a batch keyed by `seed`.
///
/// ChaCha is counter based: each `(seed, index)` pair addresses its own
/// stream, so batch results do not depend on how trajectories are scheduled.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Exponential holding time by inverse CDF.
fn exp_sample<R: Rng>(rng: &mut R, rate: f64) -> f64 {
    // 1 - U lies in (0, 1]
    let u: f64 = 1.0 - rng.gen::<f64>();
    -u.ln() / rate
}

/// Picks the outgoing edge whose cumulative-rate interval contains `u * r(y)`;
/// on an exact boundary hit the lower destination wins.
fn pick_destination(out: &[(usize, f64)], target: f64) -> usize {
    let mut acc = 0.0;
    for &(z, r) in out {
        acc += r;
        if target < acc {
            return z;
        }
    }
    out.last().expect("pick_destination on a state with no exits").0
}

/// Samples a path of `kernel` from `x0` on `[0, T]`.
///
/// An absorbing state reached before `T` yields
/// [`Error::AbsorbedBeforeHorizon`] carrying the complete path (with the final
/// holding padded up to `T`).
pub fn sample_path<R: Rng>(kernel: &RateKernel, x0: usize, horizon: f64, rng: &mut R) -> Result<Trajectory> {
    if x0 >= kernel.num_states() {
        return Err(Error::InvalidArgument(format!("initial state {x0} outside state space")));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!("horizon {horizon} must be finite and nonnegative")));
    }
    let mut jumps = Vec::new();
    let mut cur = x0;
    let mut t = 0.0;
    loop {
        let exit = kernel.exit_rate(cur);
        if exit == 0.0 {
            if t < horizon {
                let trajectory = Box::new(Trajectory { initial: x0, jumps, horizon });
                return Err(Error::AbsorbedBeforeHorizon { time: t, trajectory });
            }
            break;
        }
        let hold = exp_sample(rng, exit);
        let next = t + hold;
        if next > horizon {
            break;
        }
        if next == t {
            // holding time below float resolution; jump times must stay strictly increasing
            continue;
        }
        let u: f64 = rng.gen();
        let z = pick_destination(kernel.out_edges(cur), u * exit);
        jumps.push((next, z));
        cur = z;
        t = next;
    }
    Ok(Trajectory { initial: x0, jumps, horizon })
}

/// Samples path `index` of the batch keyed by `seed`.
pub fn sample_indexed(kernel: &RateKernel, x0: usize, horizon: f64, seed: u64, index: u64) -> Result<Trajectory> {
    sample_path(kernel, x0, horizon, &mut stream(seed, index))
}

/// Maps `f` over `n` independently seeded paths in parallel, returning results
/// in index order.
pub fn batch_map<T, F>(kernel: &RateKernel, x0: usize, horizon: f64, n: usize, seed: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Trajectory) -> T + Sync + Send,
{
    (0..n as u64)
        .into_par_iter()
        .map(|i| sample_indexed(kernel, x0, horizon, seed, i).map(|tr| f(&tr)))
        .collect()
}

/// `mu_T(y)`: fraction of `[0, T]` spent in `y`. A zero horizon gives the
/// Dirac mass at the initial state.
pub fn empirical_measure(traj: &Trajectory, n_states: usize) -> ProbabilityMeasure {
    if traj.horizon == 0.0 {
        return ProbabilityMeasure::dirac(n_states, traj.initial);
    }
    let occ = traj.occupation_times(n_states);
    ProbabilityMeasure::normalized(occ).expect("occupation times sum to the horizon")
}

/// `Q_T(y, z)`: number of jumps `y -> z` in `[0, T]` divided by `T`.
pub fn empirical_flow(traj: &Trajectory) -> Flow {
    if traj.horizon == 0.0 {
        return Flow::zero();
    }
    let t = traj.horizon;
    Flow::new(traj.jump_counts().into_iter().map(|(e, k)| (e, k as f64 / t))).expect("counts are nonnegative")
}

/// Empirical flow of the periodised path: adds `1/T` on `(X_T, X_0)` when the
/// path does not end where it started.
pub fn periodize_flow(traj: &Trajectory) -> Flow {
    let (first, last) = (traj.initial, traj.final_state());
    if first == last || traj.horizon == 0.0 {
        return empirical_flow(traj);
    }
    let mut counts = traj.jump_counts();
    *counts.entry((last, first)).or_insert(0) += 1;
    let t = traj.horizon;
    Flow::new(counts.into_iter().map(|(e, k)| (e, k as f64 / t))).expect("counts are nonnegative")
}

/// `delta_y(X_T) - delta_y(X_0) + T div Q_T(y)` for every state, evaluated on
/// integer jump counts so the result is exactly zero for any valid path.
pub fn continuity_residual(traj: &Trajectory, n_states: usize) -> SignedMeasure {
    let mut balance = vec![0i64; n_states];
    for (y, z) in traj.transitions() {
        balance[y] += 1;
        balance[z] -= 1;
    }
    balance[traj.final_state()] += 1;
    balance[traj.initial] -= 1;
    SignedMeasure { weights: balance.into_iter().map(|b| b as f64).collect() }
}

/// `M_T(y, z) = T Q_T(y, z) - r(y, z) * (time spent in y)`.
pub fn martingale_residual(traj: &Trajectory, kernel: &RateKernel, edge: Edge) -> Result<f64> {
    let (y, z) = edge;
    if y >= kernel.num_states() || !kernel.has_edge(y, z) {
        return Err(Error::UnknownEdge(y, z));
    }
    let count = traj.transitions().filter(|&e| e == edge).count() as f64;
    let occ = traj.occupation_times(kernel.num_states())[y];
    Ok(count - kernel.rate(y, z) * occ)
}
