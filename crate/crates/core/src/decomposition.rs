//! Cycle decomposition of divergence-free flows and the approximation
//! constructions built on it.
//!
//! A balanced flow with finite support is a positive combination of
//! indicator flows of self-avoiding cycles. The weights are not unique; the
//! extraction rule here is deterministic so the output is reproducible.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::{divergence, invariant_measure, Edge, Flow, Measure, ProbabilityMeasure, RateKernel, StateSpace};
use crate::rate_function::{divergence_tolerance, undirected_components};

/// Relative threshold under which a residual edge counts as zeroed.
pub const ZERO_TOL: f64 = 1e-14;

/// A self-avoiding oriented cycle `x_1 -> x_2 -> ... -> x_k -> x_1`, `k >= 2`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cycle {
    vertices: Vec<usize>,
}

impl Cycle {
    pub fn new(vertices: Vec<usize>) -> Result<Self> {
        if vertices.len() < 2 {
            return Err(Error::InvalidArgument("a cycle needs at least two vertices".into()));
        }
        let distinct: BTreeSet<_> = vertices.iter().collect();
        if distinct.len() != vertices.len() {
            return Err(Error::InvalidArgument(format!("cycle {vertices:?} is not self-avoiding")));
        }
        Ok(Self::canonical(vertices))
    }

    /// Rotates so the smallest vertex comes first.
    fn canonical(mut vertices: Vec<usize>) -> Self {
        let pos = vertices.iter().enumerate().min_by_key(|(_, v)| **v).map_or(0, |(i, _)| i);
        vertices.rotate_left(pos);
        Self { vertices }
    }

    pub fn vertices(&self) -> &[usize] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        let k = self.vertices.len();
        (0..k).map(move |i| (self.vertices[i], self.vertices[(i + 1) % k]))
    }

    pub fn is_self_avoiding(&self) -> bool {
        self.vertices.iter().collect::<BTreeSet<_>>().len() == self.vertices.len()
    }

    pub fn lies_in(&self, kernel: &RateKernel) -> bool {
        self.edges().all(|(y, z)| kernel.has_edge(y, z))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleDecomposition {
    pub terms: Vec<(Cycle, f64)>,
}

impl CycleDecomposition {
    /// `sum_C w(C) |C|`, which equals `||Q||` for the reconstructed flow.
    pub fn weighted_length(&self) -> f64 {
        self.terms.iter().map(|(c, w)| w * c.len() as f64).sum()
    }
}

/// Bookkeeping from a decomposition run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct DecomposeStats {
    /// Subtraction steps, including dead-end clean-ups.
    pub steps: usize,
    /// `|E(Q)|` of the input.
    pub support_size: usize,
    /// Residual mass discarded as numerical noise.
    pub dropped_mass: f64,
}

/// Decomposes a balanced finite flow into weighted self-avoiding cycles.
pub fn decompose(q: &Flow) -> Result<CycleDecomposition> {
    decompose_traced(q).map(|(d, _)| d)
}

/// [`decompose`] plus step accounting.
///
/// Each step takes the edge of largest residual (ties: lexicographically
/// smallest), walks forward from its head along the heaviest outgoing
/// residual edge (ties: smallest destination) until a vertex repeats, and
/// subtracts the minimum residual along the closed loop. Every step zeroes
/// at least one edge, so there are at most `|E(Q)|` steps.
pub fn decompose_traced(q: &Flow) -> Result<(CycleDecomposition, DecomposeStats)> {
    let max_abs = divergence(q, 0).max_abs();
    if max_abs > divergence_tolerance(q) {
        return Err(Error::NonzeroDivergence { max_abs });
    }
    let mut residual = Residual::new(q);
    let zero_tol = ZERO_TOL * q.norm();
    let mut stats = DecomposeStats { support_size: q.support_size(), ..Default::default() };
    let mut terms = Vec::new();
    while let Some(start) = residual.heaviest_edge() {
        stats.steps += 1;
        match residual.walk_cycle(start) {
            Walk::Cycle(vertices) => {
                let cycle = Cycle::canonical(vertices);
                let m = cycle.edges().map(|e| residual.get(e)).fold(f64::INFINITY, f64::min);
                stats.dropped_mass += residual.subtract(&cycle, m, zero_tol);
                terms.push((cycle, m));
            }
            Walk::DeadEnd(edge) => {
                // only reachable through round-off in a balanced input
                stats.dropped_mass += residual.remove(edge);
            }
        }
    }
    Ok((CycleDecomposition { terms }, stats))
}

enum Walk {
    Cycle(Vec<usize>),
    DeadEnd(Edge),
}

struct Residual {
    out: BTreeMap<usize, BTreeMap<usize, f64>>,
}

impl Residual {
    fn new(q: &Flow) -> Self {
        let mut out: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
        for ((y, z), v) in q.iter() {
            out.entry(y).or_default().insert(z, v);
        }
        Self { out }
    }

    fn get(&self, (y, z): Edge) -> f64 {
        self.out.get(&y).and_then(|m| m.get(&z)).copied().unwrap_or(0.0)
    }

    fn heaviest_edge(&self) -> Option<Edge> {
        let mut best: Option<(Edge, f64)> = None;
        for (&y, row) in &self.out {
            for (&z, &v) in row {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some(((y, z), v));
                }
            }
        }
        best.map(|(e, _)| e)
    }

    fn heaviest_out(&self, y: usize) -> Option<usize> {
        let row = self.out.get(&y)?;
        let mut best: Option<(usize, f64)> = None;
        for (&z, &v) in row {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((z, v));
            }
        }
        best.map(|(z, _)| z)
    }

    fn walk_cycle(&self, (y, z): Edge) -> Walk {
        let mut path = vec![y, z];
        let mut pos: BTreeMap<usize, usize> = BTreeMap::from([(y, 0), (z, 1)]);
        loop {
            let cur = *path.last().unwrap();
            let Some(next) = self.heaviest_out(cur) else {
                return Walk::DeadEnd((path[path.len() - 2], cur));
            };
            if let Some(&p) = pos.get(&next) {
                return Walk::Cycle(path[p..].to_vec());
            }
            pos.insert(next, path.len());
            path.push(next);
        }
    }

    fn remove(&mut self, (y, z): Edge) -> f64 {
        let row = self.out.get_mut(&y).expect("edge present");
        let v = row.remove(&z).unwrap_or(0.0);
        if row.is_empty() {
            self.out.remove(&y);
        }
        v
    }

    /// Subtracts `m` along the cycle; returns mass dropped below `zero_tol`.
    fn subtract(&mut self, cycle: &Cycle, m: f64, zero_tol: f64) -> f64 {
        let mut dropped = 0.0;
        for (y, z) in cycle.edges() {
            let row = self.out.get_mut(&y).expect("cycle edge present");
            let v = row.get_mut(&z).expect("cycle edge present");
            *v -= m;
            if *v <= zero_tol {
                dropped += v.max(0.0);
                row.remove(&z);
                if row.is_empty() {
                    self.out.remove(&y);
                }
            }
        }
        dropped
    }
}

/// `Q(y, z) = sum_{C containing (y,z)} w(C)`.
pub fn reconstruct(d: &CycleDecomposition) -> Flow {
    let mut acc: BTreeMap<Edge, f64> = BTreeMap::new();
    for (c, w) in &d.terms {
        for e in c.edges() {
            *acc.entry(e).or_insert(0.0) += w;
        }
    }
    Flow::new(acc).expect("cycle weights are positive")
}

/// Removes two-cycle overlap: `q(y,z) = Q(y,z) - min(Q(y,z), Q(z,y))`.
pub fn reduced_flow(q: &Flow) -> Flow {
    Flow::new(q.iter().map(|((y, z), v)| ((y, z), v - v.min(q.get((z, y)))))).expect("reduction stays nonnegative")
}

/// Flux quantities of a flow relative to a vertex set `V_n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FluxDiagnostics {
    /// Largest flow on an edge inside `V_n`.
    pub max_inside: f64,
    /// Flow leaving `V_n`.
    pub outflux: f64,
    /// Flow entering `V_n`.
    pub influx: f64,
}

pub fn flux_diagnostics(q: &Flow, inside: &BTreeSet<usize>) -> FluxDiagnostics {
    let mut d = FluxDiagnostics { max_inside: 0.0, outflux: 0.0, influx: 0.0 };
    for ((y, z), v) in q.iter() {
        match (inside.contains(&y), inside.contains(&z)) {
            (true, true) => d.max_inside = d.max_inside.max(v),
            (true, false) => d.outflux += v,
            (false, true) => d.influx += v,
            (false, false) => {}
        }
    }
    d
}

/// Result of the invading-sequence decomposition.
#[derive(Debug, Clone)]
pub struct GhostDecomposition {
    pub decomposition: CycleDecomposition,
    /// Level index `n_i` used at each step.
    pub levels_used: Vec<usize>,
    /// Flow not yet assigned to any cycle.
    pub residual: Flow,
    pub stats: DecomposeStats,
}

/// Decomposition along an invading sequence `V_0 ⊂ V_1 ⊂ ...`, collapsing the
/// exterior of the current level into a ghost vertex.
///
/// At each step the level is the first `n` with `M_n > phi_n^+`; a cycle
/// inside `V_n` is extracted from the finite ghost flow and removed with
/// weight equal to the minimum flow along it. The iteration stops when the
/// flow is exhausted, when no level qualifies (the rest escapes through the
/// last level), or after `max_steps`.
pub fn decompose_with_ghost(q: &Flow, levels: &[BTreeSet<usize>], max_steps: usize) -> Result<GhostDecomposition> {
    let max_abs = divergence(q, 0).max_abs();
    if max_abs > divergence_tolerance(q) {
        return Err(Error::NonzeroDivergence { max_abs });
    }
    for w in levels.windows(2) {
        if !w[0].is_subset(&w[1]) {
            return Err(Error::InvalidArgument("levels must be nested".into()));
        }
    }
    let ghost = q.max_state().map_or(0, |m| m + 1).max(levels.iter().flatten().max().map_or(0, |m| m + 1));
    let zero_tol = ZERO_TOL * q.norm();
    let mut current = q.clone();
    let mut terms = Vec::new();
    let mut levels_used = Vec::new();
    let mut stats = DecomposeStats { support_size: q.support_size(), ..Default::default() };
    while !current.is_zero() && stats.steps < max_steps {
        let Some(n) = levels.iter().position(|v| {
            let d = flux_diagnostics(&current, v);
            d.max_inside > d.outflux
        }) else {
            break;
        };
        let inside = &levels[n];
        let mut collapsed: BTreeMap<Edge, f64> = BTreeMap::new();
        for ((y, z), v) in current.iter() {
            let key = match (inside.contains(&y), inside.contains(&z)) {
                (true, true) => (y, z),
                (true, false) => (y, ghost),
                (false, true) => (ghost, z),
                (false, false) => continue,
            };
            *collapsed.entry(key).or_insert(0.0) += v;
        }
        let ghost_flow = Flow::new(collapsed)?;
        let finite = decompose(&ghost_flow)?;
        let Some((cycle, _)) = finite.terms.iter().find(|(c, _)| !c.vertices().contains(&ghost)) else {
            return Err(Error::NumericalFailure("no ghost-free cycle at a qualifying level".into()));
        };
        let m = cycle.edges().map(|e| current.get(e)).fold(f64::INFINITY, f64::min);
        let mut next: BTreeMap<Edge, f64> = current.iter().collect();
        for e in cycle.edges() {
            let v = next.get_mut(&e).expect("cycle edge in support");
            *v -= m;
            if *v <= zero_tol {
                stats.dropped_mass += v.max(0.0);
                next.remove(&e);
            }
        }
        current = Flow::new(next)?;
        terms.push((cycle.clone(), m));
        levels_used.push(n);
        stats.steps += 1;
    }
    Ok(GhostDecomposition { decomposition: CycleDecomposition { terms }, levels_used, residual: current, stats })
}

/// Restriction of `(mu, Q)` to `V_n`: `mu_n = mu|V_n / mu(V_n)` and `Q_n` the
/// sum of the decomposition cycles lying inside `V_n`.
pub fn truncate_pair(mu: &Measure, q: &Flow, inside: &BTreeSet<usize>) -> Result<(ProbabilityMeasure, Flow)> {
    let mass: f64 = inside.iter().map(|&x| mu.get(x)).sum();
    if !(mass > 0.0) {
        return Err(Error::EmptyTruncation);
    }
    let w: Vec<f64> = (0..mu.len()).map(|x| if inside.contains(&x) { mu.get(x) } else { 0.0 }).collect();
    let mu_n = ProbabilityMeasure::normalized(w)?;
    let d = decompose(q)?;
    let kept = CycleDecomposition {
        terms: d.terms.into_iter().filter(|(c, _)| c.vertices().iter().all(|v| inside.contains(v))).collect(),
    };
    Ok((mu_n, reconstruct(&kept)))
}

/// Mixes `(mu, Q)` with the stationary pair of a unit-rate auxiliary chain
/// whose graph joins every component of `(supp mu, E(Q))`:
/// `eps (pi*, Q*) + (1 - eps) (mu, Q)`.
///
/// Components are joined by shortest oriented paths (hop count, ties broken
/// by smallest next state) between their lowest-index states, for every
/// ordered pair of components.
pub fn make_connected(mu: &Measure, q: &Flow, kernel: &RateKernel, eps: f64) -> Result<(ProbabilityMeasure, Flow)> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("eps must lie in (0, 1), got {eps}")));
    }
    let n = kernel.num_states();
    let max_abs = divergence(q, n).max_abs();
    if max_abs > divergence_tolerance(q) {
        return Err(Error::NonzeroDivergence { max_abs });
    }
    let support = mu.support();
    let comps = undirected_components(n, &support, q.edges());
    let reps: Vec<usize> = comps.iter().map(|c| c[0]).collect();
    let mut aux_edges: BTreeSet<Edge> = q.edges().collect();
    let mut aux_vertices: BTreeSet<usize> = support.iter().copied().collect();
    for &a in &reps {
        for &b in &reps {
            if a == b {
                continue;
            }
            let path = shortest_path(kernel, a, b).ok_or(Error::DisconnectedAmbient { from: a, to: b })?;
            for w in path.windows(2) {
                aux_edges.insert((w[0], w[1]));
            }
            aux_vertices.extend(path);
        }
    }
    let verts: Vec<usize> = aux_vertices.into_iter().collect();
    let local: BTreeMap<usize, usize> = verts.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let sub = RateKernel::new(
        StateSpace::range(verts.len()),
        aux_edges.iter().map(|&(y, z)| (local[&y], local[&z], 1.0)),
    )?;
    let pi_local = invariant_measure(&sub)?;
    let mut pi_star = vec![0.0; n];
    for (i, &v) in verts.iter().enumerate() {
        pi_star[v] = pi_local.get(i);
    }
    let q_star = Flow::new(aux_edges.iter().map(|&(y, z)| ((y, z), pi_star[y])))?;
    let mixed: Vec<f64> = (0..n).map(|x| eps * pi_star[x] + (1.0 - eps) * mu.get(x)).collect();
    Ok((ProbabilityMeasure::normalized(mixed)?, q_star.combine(eps, q, 1.0 - eps)))
}

fn shortest_path(kernel: &RateKernel, from: usize, to: usize) -> Option<Vec<usize>> {
    let n = kernel.num_states();
    let mut prev = vec![usize::MAX; n];
    prev[from] = from;
    let mut queue = VecDeque::from([from]);
    while let Some(y) = queue.pop_front() {
        if y == to {
            let mut path = vec![to];
            let mut cur = to;
            while cur != from {
                cur = prev[cur];
                path.push(cur);
            }
            path.reverse();
            return Some(path);
        }
        for &(z, _) in kernel.out_edges(y) {
            if prev[z] == usize::MAX {
                prev[z] = y;
                queue.push_back(z);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rate_function::{affine_decompose, rate};

    fn tri(base: usize, w: f64) -> Vec<(Edge, f64)> {
        vec![((base, base + 1), w), ((base + 1, base + 2), w), ((base + 2, base), w)]
    }

    #[test]
    fn single_triangle() {
        let q = Flow::new(tri(0, 2.0)).unwrap();
        let d = decompose(&q).unwrap();
        assert_eq!(d.terms, vec![(Cycle::new(vec![0, 1, 2]).unwrap(), 2.0)]);
        assert_eq!(reconstruct(&d), q);
    }

    #[test]
    fn triangles_sharing_a_vertex() {
        // 0-1-2 and 2-3-4 share vertex 2
        let mut e = tri(0, 1.0);
        e.extend(tri(2, 1.0));
        let q = Flow::new(e).unwrap();
        let (d, stats) = decompose_traced(&q).unwrap();
        assert_eq!(d.terms.len(), 2);
        assert!(d.terms.iter().all(|(c, w)| *w == 1.0 && c.len() == 3));
        assert!(stats.steps <= q.support_size());
        assert_eq!(reconstruct(&d), q);
    }

    #[test]
    fn two_cycles_and_reduced_flow() {
        let q = Flow::new([((0, 1), 3.0), ((1, 0), 1.0)]).unwrap();
        let r = reduced_flow(&q);
        assert_eq!(r.get((0, 1)), 2.0);
        assert_eq!(r.get((1, 0)), 0.0);
        let q = Flow::new(tri(0, 1.0)).unwrap();
        assert_eq!(reduced_flow(&q), q);
    }

    #[test]
    fn divergent_flow_rejected() {
        let s = StateSpace::new(["v", "w", "0"]).unwrap();
        let q = Flow::new([((s.index_of("w").unwrap(), s.index_of("v").unwrap()), 1.0)]).unwrap();
        assert!(matches!(decompose(&q), Err(Error::NonzeroDivergence { .. })));
    }

    #[test]
    fn empty_decomposition_is_zero_flow() {
        assert!(reconstruct(&CycleDecomposition::default()).is_zero());
        assert!(decompose(&Flow::zero()).unwrap().terms.is_empty());
    }

    #[test]
    fn cycle_validation() {
        assert!(Cycle::new(vec![1]).is_err());
        assert!(Cycle::new(vec![1, 2, 1]).is_err());
        let c = Cycle::new(vec![3, 1, 2]).unwrap();
        assert_eq!(c.vertices(), &[1, 2, 3]);
        assert_eq!(c.edges().collect::<Vec<_>>(), vec![(1, 2), (2, 3), (3, 1)]);
    }

    #[test]
    fn ghost_decomposition_reconstructs() {
        // a chain of overlapping cycles along a line of states 0..8
        let mut e = Vec::new();
        for i in 0..7 {
            e.push(((i, i + 1), 1.0 + i as f64 * 0.1));
            e.push(((i + 1, i), 1.0 + i as f64 * 0.1));
        }
        e.extend(tri(2, 0.7));
        let q = Flow::new(e).unwrap();
        let levels: Vec<BTreeSet<usize>> = (1..=8).map(|n| (0..n).collect()).collect();
        let g = decompose_with_ghost(&q, &levels, 1000).unwrap();
        assert!(g.residual.is_zero());
        assert!(g.stats.steps <= q.support_size());
        assert!(reconstruct(&g.decomposition).sup_distance(&q) <= 1e-12 * q.norm());
        // levels are nondecreasing in this example once the small ones are exhausted
        assert!(!g.levels_used.is_empty());
    }

    #[test]
    fn flux_diagnostics_balance() {
        let mut e = tri(0, 1.0);
        e.extend(tri(2, 0.5));
        let q = Flow::new(e).unwrap();
        let inside: BTreeSet<usize> = [0, 1, 2].into();
        let d = flux_diagnostics(&q, &inside);
        assert_eq!(d.outflux, d.influx);
        assert_eq!(d.outflux, 0.5);
        assert_eq!(d.max_inside, 1.0);
    }

    fn ring_kernel(n: usize) -> RateKernel {
        let mut r = Vec::new();
        for i in 0..n {
            r.push((i, (i + 1) % n, 1.0));
            r.push(((i + 1) % n, i, 1.0));
        }
        RateKernel::new(StateSpace::range(n), r).unwrap()
    }

    #[test]
    fn truncate_pair_cases() {
        let k = ring_kernel(3);
        let mu = ProbabilityMeasure::uniform(3);
        let q = Flow::new(tri(0, 1.0)).unwrap();
        let all: BTreeSet<usize> = [0, 1, 2].into();
        let (m, f) = truncate_pair(&mu, &q, &all).unwrap();
        assert_eq!(f, q);
        assert!(m.weights().iter().zip(mu.weights()).all(|(a, b)| (a - b).abs() < 1e-15));
        let cut: BTreeSet<usize> = [0, 1].into();
        let (m, f) = truncate_pair(&mu, &q, &cut).unwrap();
        assert!(f.is_zero());
        assert_eq!(m.get(2), 0.0);
        assert!(rate(&m, &f, &k).value.is_finite());
        let none: BTreeSet<usize> = BTreeSet::new();
        assert!(matches!(truncate_pair(&mu, &q, &none), Err(Error::EmptyTruncation)));
    }

    #[test]
    fn make_connected_joins_components() {
        // two triangles 0-1-2 and 4-5-6 on a ring of 8 states plus chords
        let mut r = Vec::new();
        for i in 0..8 {
            r.push((i, (i + 1) % 8, 1.0));
            r.push(((i + 1) % 8, i, 1.0));
        }
        r.push((2, 0, 1.0));
        r.push((6, 4, 1.0));
        let k = RateKernel::new(StateSpace::range(8), r).unwrap();
        let mut w = vec![0.0; 8];
        for x in [0, 1, 2, 4, 5, 6] {
            w[x] = 1.0 / 6.0;
        }
        let mu = ProbabilityMeasure::new(w).unwrap();
        let mut e = tri(0, 1.0);
        e.extend([((4, 5), 1.0), ((5, 6), 1.0), ((6, 4), 1.0)]);
        let q = Flow::new(e).unwrap();
        assert_eq!(affine_decompose(&mu, &q, &k).unwrap().len(), 2);
        let (m2, q2) = make_connected(&mu, &q, &k, 0.1).unwrap();
        assert_eq!(affine_decompose(&m2, &q2, &k).unwrap().len(), 1);
        assert!(divergence(&q2, 8).max_abs() < 1e-12);
        assert!(matches!(make_connected(&mu, &q, &k, 0.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn make_connected_reports_disconnected_ambient() {
        let k = RateKernel::new(StateSpace::range(4), [(0, 1, 1.0), (1, 0, 1.0), (2, 3, 1.0), (3, 2, 1.0)]).unwrap();
        let mu = ProbabilityMeasure::new(vec![0.25; 4]).unwrap();
        let q = Flow::new([((0, 1), 1.0), ((1, 0), 1.0), ((2, 3), 1.0), ((3, 2), 1.0)]).unwrap();
        assert!(matches!(make_connected(&mu, &q, &k, 0.5), Err(Error::DisconnectedAmbient { .. })));
    }
}
