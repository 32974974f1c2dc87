//! The joint rate function of empirical measure and empirical flow.
//!
//! For a probability `mu` and a flow `Q` the rate is
//! `I(mu, Q) = sum_{(y,z) in E} Phi(Q(y,z), mu(y) r(y,z))` when `div Q = 0`,
//! and `+inf` otherwise, with `Phi(q, p) = q ln(q/p) - (q - p)` the Poisson
//! cost.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ext::ExtReal;
use crate::markov::{divergence, mean_exit_rate, Edge, Flow, Measure, ProbabilityMeasure, RateKernel};

/// Divergence tolerance scale: `|div Q| <= TAU_DIV * max(1, ||Q||)` counts as zero.
pub const TAU_DIV: f64 = 1e-9;
/// Allowed gap between `rate` and the variational value at the closed-form maximiser.
pub const TAU_SUP: f64 = 1e-9;
/// Tolerance for rate additivity over affine components.
pub const TAU_SUM: f64 = 1e-12;
/// Clamp for `F* = ln(Q / Q^mu)`.
pub const F_MAX: f64 = 40.0;

pub fn divergence_tolerance(flow: &Flow) -> f64 {
    TAU_DIV * flow.norm().max(1.0)
}

/// `Phi(q, p)`; `Phi(0, p) = p` (so `Phi(0, 0) = 0`) and `Phi(q, 0) = +inf`
/// for `q > 0`.
pub fn phi(q: f64, p: f64) -> ExtReal {
    debug_assert!(q >= 0.0 && p >= 0.0, "Phi is defined on nonnegative arguments");
    if q == 0.0 {
        ExtReal::Finite(p)
    } else if p == 0.0 {
        ExtReal::Infinite
    } else {
        ExtReal::Finite(q * (q / p).ln() - (q - p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RateReason {
    Ok,
    NonzeroDivergence,
    UnsupportedEdge,
    SeriesDivergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeTerm {
    pub from: usize,
    pub to: usize,
    pub term: ExtReal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub value: ExtReal,
    pub reason: RateReason,
    pub max_abs_divergence: f64,
    /// Per-edge `Phi` terms in lexicographic edge order; empty when the
    /// divergence test fails.
    pub per_edge_terms: Vec<EdgeTerm>,
}

impl RateReport {
    /// The `k` largest contributions, infinite ones first.
    pub fn top_terms(&self, k: usize) -> Vec<EdgeTerm> {
        let mut terms = self.per_edge_terms.clone();
        terms.sort_by(|a, b| match (a.term, b.term) {
            (ExtReal::Infinite, ExtReal::Infinite) => std::cmp::Ordering::Equal,
            (ExtReal::Infinite, _) => std::cmp::Ordering::Less,
            (_, ExtReal::Infinite) => std::cmp::Ordering::Greater,
            (ExtReal::Finite(x), ExtReal::Finite(y)) => y.total_cmp(&x),
        });
        terms.truncate(k);
        terms
    }
}

/// Evaluates `I(mu, Q)`.
pub fn rate(mu: &Measure, q: &Flow, kernel: &RateKernel) -> RateReport {
    let n = kernel.num_states();
    let div = divergence(q, n).max_abs();
    if !mean_exit_rate(mu, kernel).is_finite() || !q.norm().is_finite() {
        return RateReport {
            value: ExtReal::Infinite,
            reason: RateReason::SeriesDivergence,
            max_abs_divergence: div,
            per_edge_terms: Vec::new(),
        };
    }
    if div > divergence_tolerance(q) {
        return RateReport {
            value: ExtReal::Infinite,
            reason: RateReason::NonzeroDivergence,
            max_abs_divergence: div,
            per_edge_terms: Vec::new(),
        };
    }
    // Merge the kernel edges and the flow support in lexicographic order;
    // flow on an edge with zero stationary weight costs +inf.
    let mut terms: BTreeMap<Edge, ExtReal> = BTreeMap::new();
    for ((y, z), r) in kernel.edges() {
        terms.insert((y, z), phi(q.get((y, z)), mu.get(y) * r));
    }
    for (e, qe) in q.iter() {
        terms.entry(e).or_insert_with(|| phi(qe, 0.0));
    }
    let mut value = ExtReal::ZERO;
    for t in terms.values() {
        value = value + *t;
    }
    let reason = if value.is_finite() { RateReason::Ok } else { RateReason::UnsupportedEdge };
    RateReport {
        value,
        reason,
        max_abs_divergence: div,
        per_edge_terms: terms.into_iter().map(|((from, to), term)| EdgeTerm { from, to, term }).collect(),
    }
}

/// Finitely supported test functions `(phi, F)`; `phi` also plays the role of
/// the state potential `h` in the eigenvalue oracle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TestPair {
    pub phi: BTreeMap<usize, f64>,
    pub f: BTreeMap<Edge, f64>,
}

impl TestPair {
    pub fn new(phi: impl IntoIterator<Item = (usize, f64)>, f: impl IntoIterator<Item = (Edge, f64)>) -> Self {
        Self { phi: phi.into_iter().collect(), f: f.into_iter().collect() }
    }

    pub fn phi_at(&self, y: usize) -> f64 {
        self.phi.get(&y).copied().unwrap_or(0.0)
    }

    pub fn f_at(&self, e: Edge) -> f64 {
        self.f.get(&e).copied().unwrap_or(0.0)
    }
}

/// `r^F(y) - r(y) = sum_z r(y, z) (e^{F(y,z)} - 1)` for every state.
pub fn tilted_exit_gap(kernel: &RateKernel, f: &BTreeMap<Edge, f64>) -> Vec<f64> {
    let mut gap = vec![0.0; kernel.num_states()];
    for (&(y, z), &fv) in f {
        if y < gap.len() {
            gap[y] += kernel.rate(y, z) * fv.exp_m1();
        }
    }
    gap
}

/// `I_{phi,F}(mu, Q) = <phi, div Q> + <Q, F> - <mu, r^F - r>`.
pub fn rate_variational(mu: &Measure, q: &Flow, kernel: &RateKernel, tp: &TestPair) -> f64 {
    let div = divergence(q, kernel.num_states());
    let phi_div: f64 = tp.phi.iter().map(|(&y, &v)| v * div.get(y)).sum();
    let q_f: f64 = tp.f.iter().map(|(&e, &v)| v * q.get(e)).sum();
    let gap = tilted_exit_gap(kernel, &tp.f);
    phi_div + q_f - mu.pair(&gap)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupCheck {
    pub value: f64,
    pub gap: ExtReal,
    /// True when some `ln(Q / Q^mu)` fell outside `[-F_MAX, F_MAX]`, including
    /// edges with `Q = 0` that take the `-F_MAX` limit.
    pub clamped: bool,
    pub maximizer: TestPair,
}

/// Evaluates the variational functional at the closed-form maximiser
/// `F* = ln(Q / Q^mu)`, `phi = 0`, and compares with [`rate`].
pub fn rate_sup_check(mu: &Measure, q: &Flow, kernel: &RateKernel) -> SupCheck {
    let mut f = BTreeMap::new();
    let mut clamped = false;
    for ((y, z), r) in kernel.edges() {
        let p = mu.get(y) * r;
        let qe = q.get((y, z));
        if p == 0.0 {
            if qe > 0.0 {
                f.insert((y, z), F_MAX);
                clamped = true;
            }
            continue;
        }
        let raw = if qe > 0.0 { (qe / p).ln() } else { f64::NEG_INFINITY };
        let v = raw.clamp(-F_MAX, F_MAX);
        if v != raw {
            clamped = true;
        }
        f.insert((y, z), v);
    }
    let maximizer = TestPair { phi: BTreeMap::new(), f };
    let value = rate_variational(mu, q, kernel, &maximizer);
    let gap = rate(mu, q, kernel).value.minus(value);
    SupCheck { value, gap, clamped, maximizer }
}

/// One piece of the affine decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineComponent {
    pub states: Vec<usize>,
    pub weight: f64,
    pub measure: ProbabilityMeasure,
    pub flow: Flow,
}

/// Connected components of the unoriented graph on `nodes` with the given
/// edges; components are sorted by their lowest state, states ascending.
pub fn undirected_components(n: usize, nodes: &[usize], edges: impl IntoIterator<Item = Edge>) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (y, z) in edges {
        let (a, b) = (find(&mut parent, y), find(&mut parent, z));
        if a != b {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            parent[hi] = lo;
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut sorted = nodes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &x in &sorted {
        let root = find(&mut parent, x);
        groups.entry(root).or_default().push(x);
    }
    let mut comps: Vec<Vec<usize>> = groups.into_values().collect();
    comps.sort_by_key(|c| c[0]);
    comps
}

/// Splits `(mu, Q)` over the connected components of `(supp mu, E(Q))`:
/// `(mu, Q) = sum_j mu(K_j) (mu_j, Q_j)`.
pub fn affine_decompose(mu: &Measure, q: &Flow, kernel: &RateKernel) -> Result<Vec<AffineComponent>> {
    if !rate(mu, q, kernel).value.is_finite() {
        return Err(Error::InfiniteRate);
    }
    let n = kernel.num_states();
    let support = mu.support();
    let comps = undirected_components(n, &support, q.edges());
    let mut member = vec![usize::MAX; n];
    for (j, c) in comps.iter().enumerate() {
        for &x in c {
            member[x] = j;
        }
    }
    let mut out = Vec::with_capacity(comps.len());
    for (j, states) in comps.into_iter().enumerate() {
        let weight: f64 = states.iter().map(|&x| mu.get(x)).sum();
        let mut w = vec![0.0; n];
        for &x in &states {
            w[x] = mu.get(x) / weight;
        }
        let measure = ProbabilityMeasure::normalized(w)?;
        let flow = q.filter(|(y, _)| member[y] == j).scale(1.0 / weight);
        out.push(AffineComponent { states, weight, measure, flow });
    }
    Ok(out)
}

/// Entropy of the stationary tilted chain with rates `Q(y,z)/mu(y)` relative
/// to the base chain, per unit time:
/// `sum_{Q>0} Q ln(Q / (mu r)) - sum_y mu(y) (r~(y) - r(y))`.
///
/// Computed from the tilted exit rates rather than edge by edge; the result
/// coincides with [`rate`] for finitely supported balanced flows.
pub fn entropy_rate_tilted(mu: &Measure, q: &Flow, kernel: &RateKernel) -> ExtReal {
    let n = kernel.num_states();
    if divergence(q, n).max_abs() > divergence_tolerance(q) {
        return ExtReal::Infinite;
    }
    let mut tilted_exit = vec![0.0; n];
    let mut jump_term = 0.0;
    for ((y, z), qe) in q.iter() {
        let m = mu.get(y);
        let r = kernel.rate(y, z);
        if m == 0.0 || r == 0.0 {
            return ExtReal::Infinite;
        }
        jump_term += qe * (qe / (m * r)).ln();
        tilted_exit[y] += qe / m;
    }
    let holding_term: f64 = (0..n)
        .filter(|&y| mu.get(y) > 0.0)
        .map(|y| mu.get(y) * (tilted_exit[y] - kernel.exit_rate(y)))
        .sum();
    ExtReal::Finite(jump_term - holding_term)
}

/// Largest real eigenvalue of the tilted generator with off-diagonal entries
/// `r(y,z) e^{F(y,z)}` and diagonal `h(y) - r(y)`, where `h` is `tp.phi`.
pub fn scgf_max_eigenvalue(kernel: &RateKernel, tp: &TestPair) -> Result<f64> {
    let n = kernel.num_states();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for ((y, z), r) in kernel.edges() {
        m[(y, z)] = r * tp.f_at((y, z)).exp();
    }
    for y in 0..n {
        m[(y, y)] = tp.phi_at(y) - kernel.exit_rate(y);
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("tilted generator has non-finite entries".into()));
    }
    let eig = m
        .clone()
        .try_schur(1e-15, 10_000)
        .ok_or_else(|| Error::NumericalFailure("Schur iteration did not converge".into()))?
        .complex_eigenvalues();
    let lam = eig.iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max);
    if !lam.is_finite() {
        return Err(Error::NumericalFailure("eigenvalue solver returned non-finite values".into()));
    }
    Ok(lam)
}

/// `<Q, F> + <mu, h> - lambda(F, h)`, a lower bound on `I(mu, Q)` for every
/// `(F, h)`.
pub fn scgf_dual_value(mu: &Measure, q: &Flow, kernel: &RateKernel, tp: &TestPair) -> Result<f64> {
    let q_f: f64 = tp.f.iter().map(|(&e, &v)| v * q.get(e)).sum();
    let mu_h: f64 = tp.phi.iter().map(|(&y, &v)| v * mu.get(y)).sum();
    Ok(q_f + mu_h - scgf_max_eigenvalue(kernel, tp)?)
}

/// Coordinate ascent of [`scgf_dual_value`] over `F` on every kernel edge and
/// `h` on every state, with a golden-section line search per coordinate.
/// Returns the best value and test pair found.
pub fn maximize_scgf_dual(
    mu: &Measure,
    q: &Flow,
    kernel: &RateKernel,
    start: TestPair,
    max_sweeps: usize,
    tol: f64,
) -> Result<(f64, TestPair)> {
    #[derive(Clone, Copy)]
    enum Coord {
        F(Edge),
        H(usize),
    }
    let mut coords: Vec<Coord> = kernel.edges().map(|(e, _)| Coord::F(e)).collect();
    coords.extend((0..kernel.num_states()).map(Coord::H));
    let mut tp = start;
    let mut best = scgf_dual_value(mu, q, kernel, &tp)?;
    let mut step = 1.0;
    for _ in 0..max_sweeps {
        let before = best;
        for &c in &coords {
            let x0 = match c {
                Coord::F(e) => tp.f_at(e),
                Coord::H(y) => tp.phi_at(y),
            };
            let mut eval = |x: f64| -> f64 {
                let mut t = tp.clone();
                match c {
                    Coord::F(e) => t.f.insert(e, x),
                    Coord::H(y) => t.phi.insert(y, x),
                };
                scgf_dual_value(mu, q, kernel, &t).unwrap_or(f64::NEG_INFINITY)
            };
            let x = line_maximize(&mut eval, x0, step);
            let v = eval(x);
            if v > best {
                best = v;
                match c {
                    Coord::F(e) => tp.f.insert(e, x),
                    Coord::H(y) => tp.phi.insert(y, x),
                };
            }
        }
        if best - before < tol {
            if step < 1e-6 {
                break;
            }
            step *= 0.5;
        }
    }
    Ok((best, tp))
}

/// Maximises a concave 1-D function starting from `x0`: bracket by doubling
/// steps, then golden-section search.
pub(crate) fn line_maximize(f: &mut impl FnMut(f64) -> f64, x0: f64, step: f64) -> f64 {
    let f0 = f(x0);
    let dir = if f(x0 + step) > f0 {
        1.0
    } else if f(x0 - step) > f0 {
        -1.0
    } else {
        return golden(f, x0 - step, x0 + step);
    };
    let mut s = step;
    let mut prev = x0;
    let mut cur = x0 + dir * s;
    let mut fcur = f(cur);
    loop {
        s *= 2.0;
        let next = cur + dir * s;
        let fnext = f(next);
        if fnext <= fcur || s > 1e3 {
            return golden(f, prev.min(next), prev.max(next));
        }
        prev = cur;
        cur = next;
        fcur = fnext;
    }
}

fn golden(f: &mut impl FnMut(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-13 * (1.0 + a.abs() + b.abs()) {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// `Phi(q, p) >= p (1 - ln 2) / 2` on `0 <= q < p/2`.
pub fn phi_lower_bound_check(q: f64, p: f64) -> Result<bool> {
    if !(p > 0.0 && q >= 0.0 && q < p / 2.0) {
        return Err(Error::InvalidArgument(format!("need 0 <= q < p/2 and p > 0, got q={q}, p={p}")));
    }
    Ok(phi(q, p).unwrap() >= p * (1.0 - 2f64.ln()) / 2.0)
}

/// Lower bound `(1 - ln 2)/2 * (<mu, r> - 2 ||Q||)` on the per-edge sum, valid
/// whenever the sum is finite.
pub fn series_lower_bound(mu: &Measure, q: &Flow, kernel: &RateKernel) -> f64 {
    (1.0 - 2f64.ln()) / 2.0 * (mean_exit_rate(mu, kernel) - 2.0 * q.norm())
}
