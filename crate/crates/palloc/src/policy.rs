//! Allocation vectors, the generalized Schur-convex order, and tie-aware
//! routing distributions.
//!
//! An allocation vector `p = (p_1, ..., p_s)` routes an arrival to the i-th
//! shortest queue with probability `p_i`. A policy is *maximal* (stable for
//! every traffic intensity below 1) whenever `p` is dominated by the uniform
//! vector in the generalized Schur-convex order, i.e. every tail sum of `p`
//! is at most the corresponding tail sum of `(1/s, ..., 1/s)`.

use crate::error::{Error, Result};

/// Absolute tolerance for tail-sum comparisons. Tail sums of probability
/// vectors are O(1), so a fixed absolute tolerance absorbs summation error.
pub const GSC_TOL: f64 = 1e-12;

/// Largest server count for which binomial coefficients in `pw_allocation`
/// are computed in floating point.
pub const MAX_PW_SERVERS: usize = 60;

/// A probability vector over queue ranks (shortest first).
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationVector {
    probs: Vec<f64>,
}

impl AllocationVector {
    /// Validates entries in `[0, 1]` summing to 1 within `GSC_TOL`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid("allocation vector needs at least 2 entries"));
        }
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("allocation entries must lie in [0, 1]"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > GSC_TOL {
            return Err(Error::invalid(format!(
                "allocation entries must sum to 1, got {sum}"
            )));
        }
        Ok(Self { probs })
    }

    pub fn servers(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// System parameters `(s, lambda, mu)`. The traffic intensity is always
/// derived, never stored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemParams {
    s: usize,
    lambda: f64,
    mu: f64,
}

impl SystemParams {
    pub fn new(s: usize, lambda: f64, mu: f64) -> Result<Self> {
        if s < 2 {
            return Err(Error::invalid("need at least 2 servers"));
        }
        if !(lambda > 0.0) || !(mu > 0.0) {
            return Err(Error::invalid("lambda and mu must be positive"));
        }
        Ok(Self { s, lambda, mu })
    }

    pub fn servers(&self) -> usize {
        self.s
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Traffic intensity `rho = lambda / (s * mu)`.
    pub fn rho(&self) -> f64 {
        self.lambda / (self.s as f64 * self.mu)
    }
}

/// Outcome of comparing two vectors in the generalized Schur-convex order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderComparison {
    LessOrEqual,
    GreaterOrEqual,
    Equal,
    Incomparable,
}

/// Uniform routing: every rank gets mass `1/s`.
pub fn uniform_allocation(s: usize) -> Result<AllocationVector> {
    if s < 2 {
        return Err(Error::invalid("need at least 2 servers"));
    }
    AllocationVector::new(vec![1.0 / s as f64; s])
}

/// Power-of-d sampling expressed as an allocation vector:
/// rank i receives `C(s-i, d-1) / C(s, d)` for `i <= s-d+1`, zero beyond.
/// `d = 1` is uniform routing, `d = s` is join-the-shortest-queue.
pub fn pw_allocation(s: usize, d: usize) -> Result<AllocationVector> {
    if s < 2 || s > MAX_PW_SERVERS {
        return Err(Error::invalid(format!(
            "server count must be in [2, {MAX_PW_SERVERS}]"
        )));
    }
    if d < 1 || d > s {
        return Err(Error::invalid("d must satisfy 1 <= d <= s"));
    }
    let mut probs = vec![0.0; s];
    // p_1 = C(s-1, d-1) / C(s, d) = d/s, then
    // p_{i+1} = p_i * (s - i - d + 1) / (s - i).
    let mut cur = d as f64 / s as f64;
    for i in 0..s {
        let remaining = s - i - 1; // entries after rank i+1
        probs[i] = cur;
        if remaining + 1 < d {
            break;
        }
        if remaining + 1 == d {
            cur = 0.0;
        } else {
            cur *= (s - i - d) as f64 / (s - i - 1) as f64;
        }
    }
    // Re-normalize away accumulated rounding so the constructor accepts it.
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    AllocationVector::new(probs)
}

/// Error-prone routing: mass `1-p` on the shortest queue and mass `p` on the
/// m-th shortest. The two families studied analytically are `m = 2` with
/// general `p` and general `m` with `p = 1`; other `(m, p)` combinations are
/// the natural two-point extension and claims about them are extrapolations.
pub fn error_allocation(s: usize, m: usize, p: f64) -> Result<AllocationVector> {
    if s < 2 {
        return Err(Error::invalid("need at least 2 servers"));
    }
    if m < 2 || m > s {
        return Err(Error::invalid("m must satisfy 2 <= m <= s"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("p must lie in [0, 1]"));
    }
    let mut probs = vec![0.0; s];
    probs[0] = 1.0 - p;
    probs[m - 1] += p;
    AllocationVector::new(probs)
}

/// Compares two non-negative vectors by dominance of all tail sums.
pub fn gsc_compare(a: &[f64], b: &[f64]) -> Result<OrderComparison> {
    if a.len() != b.len() {
        return Err(Error::invalid("vectors must have equal length"));
    }
    if a.is_empty() {
        return Err(Error::invalid("vectors must be non-empty"));
    }
    if a.iter().chain(b.iter()).any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("entries must be non-negative and finite"));
    }
    let mut le = true;
    let mut ge = true;
    let mut tail_a = 0.0;
    let mut tail_b = 0.0;
    for (&x, &y) in a.iter().rev().zip(b.iter().rev()) {
        tail_a += x;
        tail_b += y;
        if tail_a > tail_b + GSC_TOL {
            le = false;
        }
        if tail_b > tail_a + GSC_TOL {
            ge = false;
        }
    }
    Ok(match (le, ge) {
        (true, true) => OrderComparison::Equal,
        (true, false) => OrderComparison::LessOrEqual,
        (false, true) => OrderComparison::GreaterOrEqual,
        (false, false) => OrderComparison::Incomparable,
    })
}

/// True iff `p` is dominated by the uniform vector in the generalized
/// Schur-convex order, which guarantees stability on the whole interval
/// `rho < 1`. The condition is sufficient in general; for the two-point
/// error family with `m = 2` it is also necessary.
pub fn satisfies_maximality_condition(p: &AllocationVector) -> bool {
    let uniform = uniform_allocation(p.servers()).expect("valid server count");
    matches!(
        gsc_compare(p.probs(), uniform.probs()).expect("lengths match"),
        OrderComparison::LessOrEqual | OrderComparison::Equal
    )
}

/// Entrywise product.
pub fn hadamard(x: &[f64], a: &[f64]) -> Result<Vec<f64>> {
    if x.len() != a.len() {
        return Err(Error::invalid("vectors must have equal length"));
    }
    Ok(x.iter().zip(a.iter()).map(|(&u, &v)| u * v).collect())
}

/// Routing distribution over server positions for a sorted state: within
/// each maximal group of equal values spanning positions `j..=k`, every
/// member receives `(sum of p_j..p_k) / (k - j + 1)`.
pub fn tie_aware_routing_distribution<T: PartialOrd>(
    state: &[T],
    p: &AllocationVector,
) -> Result<Vec<f64>> {
    if state.len() != p.servers() {
        return Err(Error::invalid("state and allocation lengths differ"));
    }
    if state.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("state must be sorted non-decreasing"));
    }
    let probs = p.probs();
    let mut out = vec![0.0; state.len()];
    let mut j = 0;
    while j < state.len() {
        let mut k = j;
        while k + 1 < state.len() && state[k + 1] == state[j] {
            k += 1;
        }
        let share: f64 = probs[j..=k].iter().sum::<f64>() / (k - j + 1) as f64;
        for slot in &mut out[j..=k] {
            *slot = share;
        }
        j = k + 1;
    }
    Ok(out)
}
