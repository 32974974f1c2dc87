//! State spaces, jump-rate kernels, measures and flows.
//!
//! Everything here lives on a finite, ordered state set. Countable chains are
//! handled by explicit truncation: the truncation level is a model parameter
//! chosen by the caller.

use std::collections::{BTreeMap, HashMap, VecDeque};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a probability measure.
pub const TAU_MASS: f64 = 1e-9;
/// Relative tolerance on linear-solve residuals.
pub const TAU_LIN: f64 = 1e-9;

/// Ordered edge `(from, to)` between state indices.
pub type Edge = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpace {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl StateSpace {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::InvalidModel(format!("duplicate state label `{l}`")));
            }
        }
        Ok(Self { labels, index })
    }

    /// States labelled `"0"`, `"1"`, ..., `"n-1"`.
    pub fn range(n: usize) -> Self {
        Self::new((0..n).map(|i| i.to_string())).expect("numeric labels are distinct")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.index
            .get(label)
            .copied()
            .ok_or_else(|| Error::UnknownState(label.to_string()))
    }
}

/// Sparse jump rates `r(y, z) > 0` with cached exit rates `r(y)`.
#[derive(Debug, Clone)]
pub struct RateKernel {
    states: StateSpace,
    // out[y] sorted by destination
    out: Vec<Vec<(usize, f64)>>,
    exit: Vec<f64>,
}

impl RateKernel {
    /// Builds a kernel from `(from, to, rate)` triples. Zero rates are
    /// dropped; self-loops, duplicates, negative or non-finite rates are
    /// rejected.
    pub fn new(states: StateSpace, rates: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let n = states.len();
        let mut out: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (y, z, r) in rates {
            if y >= n || z >= n {
                return Err(Error::InvalidModel(format!("edge ({y}, {z}) outside state space of size {n}")));
            }
            if y == z {
                return Err(Error::InvalidModel(format!("self-loop at state {y}")));
            }
            if !r.is_finite() || r < 0.0 {
                return Err(Error::InvalidModel(format!("rate {r} on edge ({y}, {z}) is not a finite nonnegative number")));
            }
            if r == 0.0 {
                continue;
            }
            out[y].push((z, r));
        }
        for (y, row) in out.iter_mut().enumerate() {
            row.sort_by_key(|&(z, _)| z);
            if let Some(w) = row.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(Error::InvalidModel(format!("duplicate edge ({y}, {})", w[0].0)));
            }
        }
        let exit = out.iter().map(|row| row.iter().map(|&(_, r)| r).sum()).collect();
        Ok(Self { states, out, exit })
    }

    pub fn states(&self) -> &StateSpace {
        &self.states
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_edges(&self) -> usize {
        self.out.iter().map(Vec::len).sum()
    }

    /// `r(y, z)`, zero when the edge is absent.
    pub fn rate(&self, y: usize, z: usize) -> f64 {
        self.out[y]
            .binary_search_by_key(&z, |&(d, _)| d)
            .map(|i| self.out[y][i].1)
            .unwrap_or(0.0)
    }

    pub fn has_edge(&self, y: usize, z: usize) -> bool {
        y < self.out.len() && self.out[y].binary_search_by_key(&z, |&(d, _)| d).is_ok()
    }

    /// Outgoing edges of `y` as `(destination, rate)`, sorted by destination.
    pub fn out_edges(&self, y: usize) -> &[(usize, f64)] {
        &self.out[y]
    }

    /// Exit rate `r(y) = sum_z r(y, z)`.
    pub fn exit_rate(&self, y: usize) -> f64 {
        self.exit[y]
    }

    pub fn exit_rates(&self) -> &[f64] {
        &self.exit
    }

    /// All edges in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (Edge, f64)> + '_ {
        self.out
            .iter()
            .enumerate()
            .flat_map(|(y, row)| row.iter().map(move |&(z, r)| ((y, z), r)))
    }

    /// Kernel with the same states and rates `f(edge, rate)`; zero results
    /// drop the edge.
    pub fn map_rates(&self, mut f: impl FnMut(Edge, f64) -> f64) -> Result<Self> {
        let rates: Vec<_> = self.edges().map(|((y, z), r)| (y, z, f((y, z), r))).collect();
        Self::new(self.states.clone(), rates)
    }
}

/// Nonnegative weights on states, stored densely over the state space.
#[derive(Debug, Clone, PartialEq)]
pub struct Measure {
    weights: Vec<f64>,
}

impl Measure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::InvalidArgument(format!("measure weight {w} at state {i} is not finite and nonnegative")));
        }
        Ok(Self { weights })
    }

    pub fn zeros(n: usize) -> Self {
        Self { weights: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.weights.get(i).copied().unwrap_or(0.0)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `<mu, f>`.
    pub fn pair(&self, f: &[f64]) -> f64 {
        self.weights.iter().zip(f).map(|(m, v)| m * v).sum()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.weights.len()).filter(|&i| self.weights[i] > 0.0).collect()
    }
}

/// A [`Measure`] whose total mass is 1 within [`TAU_MASS`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMeasure(Measure);

impl ProbabilityMeasure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let m = Measure::new(weights)?;
        let total = m.total();
        if (total - 1.0).abs() > TAU_MASS {
            return Err(Error::InvalidArgument(format!("probability measure has total mass {total}")));
        }
        Ok(Self(m))
    }

    /// Normalises nonnegative weights with positive total.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let m = Measure::new(weights)?;
        let total = m.total();
        if !(total > 0.0) {
            return Err(Error::InvalidArgument("cannot normalise a zero measure".into()));
        }
        Ok(Self(Measure { weights: m.weights.into_iter().map(|w| w / total).collect() }))
    }

    pub fn dirac(n: usize, i: usize) -> Self {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        Self(Measure { weights: w })
    }

    pub fn uniform(n: usize) -> Self {
        Self(Measure { weights: vec![1.0 / n as f64; n] })
    }

    pub fn measure(&self) -> &Measure {
        &self.0
    }

    pub fn into_measure(self) -> Measure {
        self.0
    }
}

impl std::ops::Deref for ProbabilityMeasure {
    type Target = Measure;
    fn deref(&self) -> &Measure {
        &self.0
    }
}

/// Signed weights on states, e.g. the divergence of a flow.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedMeasure {
    pub weights: Vec<f64>,
}

impl SignedMeasure {
    pub fn get(&self, i: usize) -> f64 {
        self.weights.get(i).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.weights.iter().fold(0.0, |m, w| m.max(w.abs()))
    }

    pub fn pair(&self, f: &[f64]) -> f64 {
        self.weights.iter().zip(f).map(|(m, v)| m * v).sum()
    }
}

/// Nonnegative weights on ordered edges with a cached L1 norm. Zero entries
/// are never stored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Flow {
    weights: BTreeMap<Edge, f64>,
    norm: f64,
}

impl Flow {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(entries: impl IntoIterator<Item = (Edge, f64)>) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for ((y, z), q) in entries {
            if y == z {
                return Err(Error::InvalidArgument(format!("flow on self-loop ({y}, {y})")));
            }
            if !(q.is_finite() && q >= 0.0) {
                return Err(Error::InvalidArgument(format!("flow value {q} on ({y}, {z}) is not finite and nonnegative")));
            }
            if q > 0.0 {
                *weights.entry((y, z)).or_insert(0.0) += q;
            }
        }
        Ok(Self::from_map(weights))
    }

    fn from_map(weights: BTreeMap<Edge, f64>) -> Self {
        let norm = weights.values().sum();
        Self { weights, norm }
    }

    pub fn get(&self, e: Edge) -> f64 {
        self.weights.get(&e).copied().unwrap_or(0.0)
    }

    /// Entries in lexicographic edge order.
    pub fn iter(&self) -> impl Iterator<Item = (Edge, f64)> + '_ {
        self.weights.iter().map(|(&e, &q)| (e, q))
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.weights.keys().copied()
    }

    /// Number of edges with positive flow, `|E(Q)|`.
    pub fn support_size(&self) -> usize {
        self.weights.len()
    }

    pub fn is_zero(&self) -> bool {
        self.weights.is_empty()
    }

    /// L1 norm `||Q||`.
    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn scale(&self, c: f64) -> Self {
        assert!(c >= 0.0 && c.is_finite(), "flow scale factor must be finite and nonnegative");
        if c == 0.0 {
            return Self::zero();
        }
        Self::from_map(self.weights.iter().map(|(&e, &q)| (e, q * c)).collect())
    }

    /// `a * self + b * other` for nonnegative coefficients.
    pub fn combine(&self, a: f64, other: &Flow, b: f64) -> Self {
        let mut w: BTreeMap<Edge, f64> = BTreeMap::new();
        for (e, q) in self.iter() {
            *w.entry(e).or_insert(0.0) += a * q;
        }
        for (e, q) in other.iter() {
            *w.entry(e).or_insert(0.0) += b * q;
        }
        w.retain(|_, q| *q > 0.0);
        Self::from_map(w)
    }

    /// Keeps entries with `keep(edge)` true.
    pub fn filter(&self, mut keep: impl FnMut(Edge) -> bool) -> Self {
        Self::from_map(self.weights.iter().filter(|(e, _)| keep(**e)).map(|(&e, &q)| (e, q)).collect())
    }

    /// Largest state index referenced, if any.
    pub fn max_state(&self) -> Option<usize> {
        self.weights.keys().map(|&(y, z)| y.max(z)).max()
    }

    /// Sup-norm distance between two flows.
    pub fn sup_distance(&self, other: &Flow) -> f64 {
        let mut d: f64 = 0.0;
        for (e, q) in self.iter() {
            d = d.max((q - other.get(e)).abs());
        }
        for (e, q) in other.iter() {
            d = d.max((q - self.get(e)).abs());
        }
        d
    }

    /// L1 distance between two flows.
    pub fn l1_distance(&self, other: &Flow) -> f64 {
        let mut d = 0.0;
        for (e, q) in self.iter() {
            d += (q - other.get(e)).abs();
        }
        for (e, q) in other.iter() {
            if !self.weights.contains_key(&e) {
                d += q;
            }
        }
        d
    }
}

/// Whether every state reaches every other along positive-rate edges.
pub fn check_irreducible(kernel: &RateKernel) -> bool {
    let n = kernel.num_states();
    if n <= 1 {
        return true;
    }
    let mut rev: Vec<Vec<usize>> = vec![Vec::new(); n];
    for ((y, z), _) in kernel.edges() {
        rev[z].push(y);
    }
    let fwd = |y: usize| kernel.out_edges(y).iter().map(|&(z, _)| z).collect::<Vec<_>>();
    reaches_all(n, fwd) && reaches_all(n, |y| rev[y].clone())
}

fn reaches_all(n: usize, next: impl Fn(usize) -> Vec<usize>) -> bool {
    let mut seen = vec![false; n];
    seen[0] = true;
    let mut queue = VecDeque::from([0usize]);
    let mut count = 1;
    while let Some(y) = queue.pop_front() {
        for z in next(y) {
            if !seen[z] {
                seen[z] = true;
                count += 1;
                queue.push_back(z);
            }
        }
    }
    count == n
}

/// Max-abs residual of the balance equations, relative to `max_x pi(x) r(x)`.
pub fn balance_residual(kernel: &RateKernel, pi: &[f64]) -> f64 {
    let n = kernel.num_states();
    let mut bal = vec![0.0; n];
    for ((y, z), r) in kernel.edges() {
        bal[y] += pi[y] * r;
        bal[z] -= pi[y] * r;
    }
    let scale = (0..n).map(|x| pi[x] * kernel.exit_rate(x)).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    bal.iter().fold(0.0, |m: f64, b| m.max(b.abs())) / scale
}

/// Unique invariant probability measure of an irreducible kernel.
///
/// Uses Grassmann–Taksar–Heyman state reduction, which involves no
/// subtractions and therefore keeps every weight strictly positive even when
/// the measure spans hundreds of orders of magnitude.
pub fn invariant_measure(kernel: &RateKernel) -> Result<ProbabilityMeasure> {
    if !check_irreducible(kernel) {
        return Err(Error::NoUniqueInvariant);
    }
    let n = kernel.num_states();
    if n == 1 {
        return Ok(ProbabilityMeasure::dirac(1, 0));
    }
    let mut a = vec![vec![0.0f64; n]; n];
    for ((y, z), r) in kernel.edges() {
        a[y][z] = r;
    }
    let mut s = vec![0.0f64; n];
    for k in (1..n).rev() {
        let sk: f64 = a[k][..k].iter().sum();
        if !(sk > 0.0) {
            return Err(Error::NumericalFailure(format!("state reduction broke down at state {k}")));
        }
        s[k] = sk;
        let (head, tail) = a.split_at_mut(k);
        let row_k = &tail[0][..k];
        for row_i in head.iter_mut() {
            let aik = row_i[k];
            if aik == 0.0 {
                continue;
            }
            let f = aik / sk;
            for (j, &akj) in row_k.iter().enumerate() {
                if akj != 0.0 {
                    row_i[j] += f * akj;
                }
            }
        }
    }
    let mut pi = vec![0.0f64; n];
    pi[0] = 1.0;
    for k in 1..n {
        pi[k] = (0..k).map(|i| pi[i] * a[i][k]).sum::<f64>() / s[k];
    }
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    finish_invariant(kernel, pi)
}

/// Invariant measure from a dense LU solve of the balance equations with the
/// last equation replaced by the normalisation row. Used as an independent
/// route in tests; loses relative accuracy on states of tiny mass.
pub fn invariant_measure_lu(kernel: &RateKernel) -> Result<ProbabilityMeasure> {
    if !check_irreducible(kernel) {
        return Err(Error::NoUniqueInvariant);
    }
    let n = kernel.num_states();
    // row x: sum_y pi(y) r(y, x) - pi(x) r(x) = 0
    let mut m = DMatrix::<f64>::zeros(n, n);
    for ((y, z), r) in kernel.edges() {
        m[(z, y)] += r;
    }
    for x in 0..n {
        m[(x, x)] -= kernel.exit_rate(x);
    }
    for j in 0..n {
        m[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(n);
    rhs[n - 1] = 1.0;
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NumericalFailure("singular balance system".into()))?;
    let pi: Vec<f64> = sol.iter().copied().collect();
    if pi.iter().any(|p| !p.is_finite() || *p <= 0.0) {
        return Err(Error::NumericalFailure("balance solve produced a non-positive weight".into()));
    }
    finish_invariant(kernel, pi)
}

fn finish_invariant(kernel: &RateKernel, pi: Vec<f64>) -> Result<ProbabilityMeasure> {
    let res = balance_residual(kernel, &pi);
    if !(res <= TAU_LIN) {
        return Err(Error::NumericalFailure(format!("balance residual {res:e} exceeds tolerance")));
    }
    ProbabilityMeasure::new(pi)
}

/// Signed divergence `div Q(y) = sum_z Q(y, z) - sum_z Q(z, y)`.
pub fn divergence(flow: &Flow, n_states: usize) -> SignedMeasure {
    let n = n_states.max(flow.max_state().map_or(0, |m| m + 1));
    let mut w = vec![0.0; n];
    for ((y, z), q) in flow.iter() {
        w[y] += q;
        w[z] -= q;
    }
    SignedMeasure { weights: w }
}

/// Stationary flow `Q^mu(y, z) = mu(y) r(y, z)` on the edges of the kernel.
pub fn stationary_flow(mu: &Measure, kernel: &RateKernel) -> Flow {
    Flow::from_map(
        kernel
            .edges()
            .map(|((y, z), r)| ((y, z), mu.get(y) * r))
            .filter(|&(_, q)| q > 0.0)
            .collect(),
    )
}

/// `<mu, r>`.
pub fn mean_exit_rate(mu: &Measure, kernel: &RateKernel) -> f64 {
    mu.pair(kernel.exit_rates())
}

/// Generator action `Lf(x) = sum_y r(x, y) [f(y) - f(x)]`.
pub fn lift_operator(kernel: &RateKernel, f: &[f64]) -> Vec<f64> {
    assert_eq!(f.len(), kernel.num_states(), "function must be defined on every state");
    (0..kernel.num_states())
        .map(|x| kernel.out_edges(x).iter().map(|&(y, r)| r * (f[y] - f[x])).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(a: f64, b: f64) -> RateKernel {
        RateKernel::new(StateSpace::range(2), [(0, 1, a), (1, 0, b)]).unwrap()
    }

    fn triangle() -> RateKernel {
        RateKernel::new(StateSpace::range(3), [(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)]).unwrap()
    }

    fn poisson_bd(lambda: f64, k: usize) -> RateKernel {
        let mut rates = Vec::new();
        for i in 0..k {
            rates.push((i, i + 1, lambda));
            rates.push((i + 1, i, (i + 1) as f64));
        }
        RateKernel::new(StateSpace::range(k + 1), rates).unwrap()
    }

    #[test]
    fn kernel_rejects_bad_input() {
        let s = StateSpace::range(2);
        assert!(RateKernel::new(s.clone(), [(0, 0, 1.0)]).is_err());
        assert!(RateKernel::new(s.clone(), [(0, 1, -1.0)]).is_err());
        assert!(RateKernel::new(s.clone(), [(0, 1, 1.0), (0, 1, 2.0)]).is_err());
        assert!(RateKernel::new(s.clone(), [(0, 2, 1.0)]).is_err());
        let k = RateKernel::new(s, [(0, 1, 0.0), (1, 0, 2.0)]).unwrap();
        assert_eq!(k.num_edges(), 1);
        assert!(!k.has_edge(0, 1));
        assert_eq!(k.exit_rate(1), 2.0);
    }

    #[test]
    fn duplicate_labels_rejected() {
        assert!(StateSpace::new(["a", "b", "a"]).is_err());
        let s = StateSpace::new(["v", "w"]).unwrap();
        assert_eq!(s.index_of("w").unwrap(), 1);
        assert!(s.index_of("x").is_err());
    }

    #[test]
    fn invariant_two_state() {
        let pi = invariant_measure(&two_state(1.0, 2.0)).unwrap();
        assert!((pi.get(0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((pi.get(1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn invariant_triangle_uniform() {
        let pi = invariant_measure(&triangle()).unwrap();
        for x in 0..3 {
            assert!((pi.get(x) - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn invariant_poisson_birth_death() {
        let lambda: f64 = 2.0;
        let pi = invariant_measure(&poisson_bd(lambda, 30)).unwrap();
        let mut p = (-lambda).exp();
        let mut mass = 0.0;
        let mut max_err: f64 = 0.0;
        for k in 0..=30 {
            max_err = max_err.max((pi.get(k) - p).abs());
            mass += p;
            p *= lambda / (k + 1) as f64;
        }
        // truncated Poisson renormalised by its mass
        assert!(max_err <= 2.0 * (1.0 - mass) + 1e-14, "max_err {max_err}");
        assert!(pi.weights().iter().all(|&w| w > 0.0));
    }

    #[test]
    fn invariant_gth_agrees_with_lu() {
        let k = RateKernel::new(
            StateSpace::range(4),
            [(0, 1, 1.0), (1, 2, 2.0), (2, 3, 0.5), (3, 0, 1.5), (2, 0, 0.7), (1, 0, 0.3)],
        )
        .unwrap();
        let a = invariant_measure(&k).unwrap();
        let b = invariant_measure_lu(&k).unwrap();
        for x in 0..4 {
            assert!((a.get(x) - b.get(x)).abs() < 1e-13);
        }
    }

    #[test]
    fn reducible_kernel_has_no_unique_invariant() {
        let k = RateKernel::new(StateSpace::range(2), [(0, 1, 1.0)]).unwrap();
        assert!(matches!(invariant_measure(&k), Err(Error::NoUniqueInvariant)));
        assert!(matches!(invariant_measure_lu(&k), Err(Error::NoUniqueInvariant)));
    }

    #[test]
    fn irreducibility() {
        assert!(check_irreducible(&two_state(1.0, 1.0)));
        assert!(!check_irreducible(&RateKernel::new(StateSpace::range(2), [(0, 1, 1.0)]).unwrap()));
        assert!(check_irreducible(&triangle()));
    }

    #[test]
    fn divergence_examples() {
        let cyc = Flow::new([((0, 1), 1.0), ((1, 2), 1.0), ((2, 0), 1.0)]).unwrap();
        assert_eq!(divergence(&cyc, 3).max_abs(), 0.0);
        let single = Flow::new([((0, 1), 1.0)]).unwrap();
        let d = divergence(&single, 2);
        assert_eq!(d.weights, vec![1.0, -1.0]);
        assert_eq!(d.total(), 0.0);
    }

    #[test]
    fn divergence_discontinuity_fixture() {
        // states: v, w, then 0..N; the limit flow 1_{(w,v)} is not balanced
        let s = StateSpace::new(["v", "w", "0", "1", "2"]).unwrap();
        let (v, w) = (s.index_of("v").unwrap(), s.index_of("w").unwrap());
        let q = Flow::new([((w, v), 1.0)]).unwrap();
        let d = divergence(&q, s.len());
        assert_eq!(d.get(w), 1.0);
        assert_eq!(d.get(v), -1.0);
        // every approximating cycle v -> n -> w -> v is balanced
        for n in 2..5 {
            let qn = Flow::new([((v, n), 1.0), ((n, w), 1.0), ((w, v), 1.0)]).unwrap();
            assert_eq!(divergence(&qn, s.len()).max_abs(), 0.0);
        }
    }

    #[test]
    fn stationary_flow_examples() {
        let k = two_state(1.0, 1.0);
        let pi = invariant_measure(&k).unwrap();
        let q = stationary_flow(&pi, &k);
        assert_eq!(q.get((0, 1)), 0.5);
        assert_eq!(q.get((1, 0)), 0.5);

        let d0 = ProbabilityMeasure::dirac(2, 0);
        let q = stationary_flow(&d0, &k);
        assert_eq!(q.get((0, 1)), 1.0);
        assert_eq!(q.get((1, 0)), 0.0);
        assert_eq!(q.support_size(), 1);

        let bd = poisson_bd(1.5, 25);
        let pi = invariant_measure(&bd).unwrap();
        let qpi = stationary_flow(&pi, &bd);
        assert!(divergence(&qpi, 26).max_abs() <= TAU_LIN);
    }

    #[test]
    fn mean_exit_rate_examples() {
        let k = RateKernel::new(StateSpace::range(2), [(0, 1, 3.0), (1, 0, 1.0)]).unwrap();
        assert_eq!(mean_exit_rate(&ProbabilityMeasure::dirac(2, 0), &k), 3.0);
        assert_eq!(mean_exit_rate(&ProbabilityMeasure::uniform(2), &two_state(1.0, 1.0)), 1.0);
    }

    #[test]
    fn mean_exit_rate_poisson_against_closed_form() {
        let lambda: f64 = 1.0;
        let k = 40;
        let kernel = poisson_bd(lambda, k);
        let pi = invariant_measure(&kernel).unwrap();
        // oracle: closed-form Poisson weights, direct summation of pi(k)(b_k + d_k)
        let mut p = (-lambda).exp();
        let mut oracle = 0.0;
        for i in 0..=k {
            let b = if i < k { lambda } else { 0.0 };
            oracle += p * (b + i as f64);
            p *= lambda / (i + 1) as f64;
        }
        let got = mean_exit_rate(&pi, &kernel);
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 2.0 * lambda).abs() < 1e-12);
    }

    #[test]
    fn lift_operator_examples() {
        let k = two_state(1.0, 1.0);
        assert_eq!(lift_operator(&k, &[5.0, 5.0]), vec![0.0, 0.0]);
        assert_eq!(lift_operator(&k, &[0.0, 1.0]), vec![1.0, -1.0]);

        let lambda = 0.7;
        let a: f64 = 3.0;
        let kk = 12;
        let bd = poisson_bd(lambda, kk);
        let u: Vec<f64> = (0..=kk).map(|i| a.powi(i as i32)).collect();
        let lu = lift_operator(&bd, &u);
        for i in 0..=kk {
            let b = if i < kk { lambda } else { 0.0 };
            let d = i as f64;
            let mut expect = b * (a.powi(i as i32 + 1) - a.powi(i as i32));
            if i > 0 {
                expect += d * (a.powi(i as i32 - 1) - a.powi(i as i32));
            }
            assert!((lu[i] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn flow_rejects_negative_and_drops_zero() {
        assert!(Flow::new([((0, 1), -1.0)]).is_err());
        assert!(Flow::new([((1, 1), 1.0)]).is_err());
        let f = Flow::new([((0, 1), 0.0), ((1, 0), 2.0)]).unwrap();
        assert_eq!(f.support_size(), 1);
        assert_eq!(f.norm(), 2.0);
    }
}
