//! Exact finite-state analysis of the ordered queue-length chain: generator
//! construction on a truncated lattice, stationary solves, and numerical
//! verification of the negative Lyapunov drift outside a compact set.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::policy::{self, AllocationVector, SystemParams};

/// Upper bound on states visited by the drift scan.
const DRIFT_SCAN_STATE_LIMIT: u64 = 10_000_000;

/// Largest state count handled by the direct dense stationary solve.
const DENSE_SOLVE_LIMIT: usize = 3_000;

/// Whether arrivals that find an idle server are forced onto it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Idling,
    NonIdling,
}

/// Non-decreasing vector of queue lengths; the state of the ordered chain.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OrderedState {
    queues: Vec<u32>,
}

impl OrderedState {
    pub fn new(queues: Vec<u32>) -> Result<Self> {
        if queues.is_empty() {
            return Err(Error::invalid("state must be non-empty"));
        }
        if queues.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("state must be sorted non-decreasing"));
        }
        Ok(Self { queues })
    }

    /// Sorts an arbitrary queue vector into an ordered state.
    pub fn from_unsorted(mut queues: Vec<u32>) -> Result<Self> {
        if queues.is_empty() {
            return Err(Error::invalid("state must be non-empty"));
        }
        queues.sort_unstable();
        Ok(Self { queues })
    }

    pub fn queues(&self) -> &[u32] {
        &self.queues
    }

    /// Number of strictly positive entries.
    pub fn pos(&self) -> usize {
        self.queues.iter().filter(|&&q| q > 0).count()
    }

    pub fn total(&self) -> u64 {
        self.queues.iter().map(|&q| u64::from(q)).sum()
    }

    fn bump(&self, i: usize) -> Self {
        let mut q = self.queues.clone();
        q[i] += 1;
        q.sort_unstable();
        Self { queues: q }
    }

    fn drop_one(&self, i: usize) -> Self {
        let mut q = self.queues.clone();
        q[i] -= 1;
        q.sort_unstable();
        Self { queues: q }
    }
}

/// Explicit transition rates of the ordered chain on the lattice of states
/// with every queue at most `cap`. Arrivals that would push a queue past the
/// cap are dropped, so the truncated chain is a loss variant of the real one;
/// the bias is observable as stationary mass on the boundary.
#[derive(Debug, Clone)]
pub struct TruncatedChain {
    cap: u32,
    states: Vec<OrderedState>,
    index: HashMap<Vec<u32>, usize>,
    /// rates[i] lists (target index, rate > 0), no self-loops.
    rates: Vec<Vec<(usize, f64)>>,
}

impl TruncatedChain {
    pub fn cap(&self) -> u32 {
        self.cap
    }

    pub fn states(&self) -> &[OrderedState] {
        &self.states
    }

    pub fn rates(&self) -> &[Vec<(usize, f64)>] {
        &self.rates
    }

    pub fn state_index(&self, state: &OrderedState) -> Option<usize> {
        self.index.get(state.queues()).copied()
    }
}

fn enumerate_states(s: usize, cap: u32) -> Vec<OrderedState> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; s];
    fn rec(slot: usize, min: u32, cap: u32, cur: &mut Vec<u32>, out: &mut Vec<OrderedState>) {
        if slot == cur.len() {
            out.push(OrderedState {
                queues: cur.clone(),
            });
            return;
        }
        for v in min..=cap {
            cur[slot] = v;
            rec(slot + 1, v, cap, cur, out);
        }
    }
    rec(0, 0, cap, &mut cur, &mut out);
    out
}

/// Builds the truncated generator for a p-allocation policy. Under
/// `NonIdling`, an arrival that finds an idle server always joins one;
/// otherwise the tie-aware routing distribution splits the arrival rate
/// over server positions.
pub fn build_generator(
    params: &SystemParams,
    p: &AllocationVector,
    variant: Variant,
    cap: u32,
) -> Result<TruncatedChain> {
    if cap < 1 {
        return Err(Error::invalid("cap must be at least 1"));
    }
    if p.servers() != params.servers() {
        return Err(Error::invalid("allocation and params disagree on server count"));
    }
    let s = params.servers();
    let (lambda, mu) = (params.lambda(), params.mu());
    let states = enumerate_states(s, cap);
    let index: HashMap<Vec<u32>, usize> = states
        .iter()
        .enumerate()
        .map(|(i, st)| (st.queues().to_vec(), i))
        .collect();

    let mut rates = Vec::with_capacity(states.len());
    for state in &states {
        let mut row: HashMap<usize, f64> = HashMap::new();
        let add = |target: OrderedState, rate: f64, row: &mut HashMap<usize, f64>| {
            let idx = index[target.queues()];
            *row.entry(idx).or_insert(0.0) += rate;
        };

        // Arrivals.
        if variant == Variant::NonIdling && state.queues()[0] == 0 {
            // All idle servers are interchangeable in the ordered state.
            add(state.bump(0), lambda, &mut row);
        } else {
            let routing = policy::tie_aware_routing_distribution(state.queues(), p)?;
            for (i, &r) in routing.iter().enumerate() {
                if r > 0.0 && state.queues()[i] < cap {
                    add(state.bump(i), lambda * r, &mut row);
                }
            }
        }

        // Departures, one rate mu per busy server.
        for i in 0..s {
            if state.queues()[i] > 0 {
                add(state.drop_one(i), mu, &mut row);
            }
        }

        let self_idx = index[state.queues()];
        row.remove(&self_idx);
        let mut list: Vec<(usize, f64)> = row.into_iter().collect();
        list.sort_unstable_by_key(|&(i, _)| i);
        rates.push(list);
    }

    Ok(TruncatedChain {
        cap,
        states,
        index,
        rates,
    })
}

/// Solves `pi G = 0`, `sum pi = 1` on the truncated chain. Small chains get
/// a direct dense solve; larger ones fall back to power iteration on the
/// uniformized transition matrix.
pub fn stationary_distribution(chain: &TruncatedChain, tol: f64) -> Result<Vec<f64>> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tol must be positive"));
    }
    let n = chain.states.len();
    let pi = if n <= DENSE_SOLVE_LIMIT {
        dense_solve(chain)?
    } else {
        power_iteration(chain, tol)?
    };
    let residual = balance_residual(chain, &pi);
    if residual > tol {
        return Err(Error::ConvergenceFailure { residual, tol });
    }
    Ok(pi)
}

/// Infinity norm of `pi G`.
pub fn balance_residual(chain: &TruncatedChain, pi: &[f64]) -> f64 {
    let n = chain.states.len();
    let mut net = vec![0.0; n];
    for (i, row) in chain.rates.iter().enumerate() {
        let outflow: f64 = row.iter().map(|&(_, r)| r).sum();
        net[i] -= pi[i] * outflow;
        for &(j, r) in row {
            net[j] += pi[i] * r;
        }
    }
    net.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
}

fn dense_solve(chain: &TruncatedChain) -> Result<Vec<f64>> {
    use nalgebra::{DMatrix, DVector};
    let n = chain.states.len();
    // A = G^T with the last balance equation replaced by normalization.
    let mut a = DMatrix::<f64>::zeros(n, n);
    for (i, row) in chain.rates.iter().enumerate() {
        let outflow: f64 = row.iter().map(|&(_, r)| r).sum();
        a[(i, i)] -= outflow;
        for &(j, r) in row {
            a[(j, i)] += r;
        }
    }
    for i in 0..n {
        a[(n - 1, i)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let lu = a.lu();
    let x = lu
        .solve(&b)
        .ok_or_else(|| Error::Internal("singular truncated generator".into()))?;
    let mut pi: Vec<f64> = x.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = pi.iter().sum();
    for v in &mut pi {
        *v /= total;
    }
    Ok(pi)
}

fn power_iteration(chain: &TruncatedChain, tol: f64) -> Result<Vec<f64>> {
    let n = chain.states.len();
    let max_rate = chain
        .rates
        .iter()
        .map(|row| row.iter().map(|&(_, r)| r).sum::<f64>())
        .fold(0.0f64, f64::max);
    let unif = max_rate * 1.05;
    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let max_iters = 2_000_000;
    for it in 0..max_iters {
        for v in &mut next {
            *v = 0.0;
        }
        for (i, row) in chain.rates.iter().enumerate() {
            let outflow: f64 = row.iter().map(|&(_, r)| r).sum();
            next[i] += pi[i] * (1.0 - outflow / unif);
            for &(j, r) in row {
                next[j] += pi[i] * r / unif;
            }
        }
        std::mem::swap(&mut pi, &mut next);
        if it % 64 == 0 && balance_residual(chain, &pi) <= tol * 0.5 {
            let total: f64 = pi.iter().sum();
            for v in &mut pi {
                *v /= total;
            }
            return Ok(pi);
        }
    }
    Err(Error::ConvergenceFailure {
        residual: balance_residual(chain, &pi),
        tol,
    })
}

/// Expected total queue length under a stationary vector.
pub fn stationary_mean_total(chain: &TruncatedChain, pi: &[f64]) -> f64 {
    chain
        .states
        .iter()
        .zip(pi)
        .map(|(st, &p)| st.total() as f64 * p)
        .sum()
}

/// Stationary mass on states with some queue at the cap; a truncation-bias
/// diagnostic.
pub fn boundary_mass(chain: &TruncatedChain, pi: &[f64]) -> f64 {
    chain
        .states
        .iter()
        .zip(pi)
        .filter(|(st, _)| st.queues().iter().any(|&q| q == chain.cap))
        .map(|(_, &p)| p)
        .sum()
}

/// Radius of the compact set outside which the drift is negative for
/// certified policies: `s (lambda + s mu) / (2 (s mu - lambda))`.
pub fn compact_set_threshold(params: &SystemParams) -> Result<f64> {
    if params.rho() >= 1.0 {
        return Err(Error::invalid("threshold requires rho < 1"));
    }
    let s = params.servers() as f64;
    let (lambda, mu) = (params.lambda(), params.mu());
    Ok(s * (lambda + s * mu) / (2.0 * (s * mu - lambda)))
}

/// One-step expected change of the sum-of-squares Lyapunov function for the
/// embedded jump chain at a state.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub state: OrderedState,
    pub drift: f64,
    pub in_compact_set: bool,
}

/// Expected one-step change of `V(x) = sum x_i^2` for the embedded chain:
/// `[2 (lambda sum r_i x_i - mu sum x_i) + lambda + pos(x) mu] / (lambda + pos(x) mu)`
/// with `r` the tie-aware routing distribution at `x`.
pub fn embedded_drift(
    x: &OrderedState,
    params: &SystemParams,
    p: &AllocationVector,
) -> Result<DriftReport> {
    if p.servers() != params.servers() || x.queues().len() != params.servers() {
        return Err(Error::invalid("dimension mismatch"));
    }
    let (lambda, mu) = (params.lambda(), params.mu());
    let routing = policy::tie_aware_routing_distribution(x.queues(), p)?;
    let weighted: f64 = routing
        .iter()
        .zip(x.queues())
        .map(|(&r, &q)| r * q as f64)
        .sum();
    let total: f64 = x.total() as f64;
    let pos = x.pos() as f64;
    let denom = lambda + pos * mu;
    let drift = (2.0 * (lambda * weighted - mu * total) + lambda + pos * mu) / denom;
    let in_compact_set = match compact_set_threshold(params) {
        Ok(threshold) => total <= threshold,
        Err(_) => false,
    };
    Ok(DriftReport {
        state: x.clone(),
        drift,
        in_compact_set,
    })
}

/// Exhaustively checks that the embedded drift is strictly negative at every
/// ordered state with total in `(threshold, scan_bound]`.
pub fn verify_negative_drift(
    params: &SystemParams,
    p: &AllocationVector,
    scan_bound: u64,
) -> Result<bool> {
    let threshold = compact_set_threshold(params)?;
    if (scan_bound as f64) <= threshold {
        return Err(Error::invalid("scan_bound must exceed the compact-set threshold"));
    }
    let s = params.servers();
    let lo = threshold.floor() as u64;
    let mut count: u64 = 0;

    // Generate non-decreasing s-vectors with a fixed total.
    fn rec(
        slot: usize,
        min: u32,
        remaining: u64,
        cur: &mut Vec<u32>,
        count: &mut u64,
        ok: &mut bool,
        check: &mut dyn FnMut(&[u32]) -> Result<bool>,
    ) -> Result<()> {
        if !*ok {
            return Ok(());
        }
        let slots_left = cur.len() - slot;
        if slot == cur.len() {
            if remaining == 0 {
                *count += 1;
                if *count > DRIFT_SCAN_STATE_LIMIT {
                    return Err(Error::invalid("drift scan exceeds the state-count guard"));
                }
                if !check(cur)? {
                    *ok = false;
                }
            }
            return Ok(());
        }
        // Remaining slots must fit `remaining` with non-decreasing entries.
        let max_v = remaining / slots_left as u64;
        for v in u64::from(min)..=max_v {
            // Later entries are all >= v, so v * slots_left <= remaining holds.
            cur[slot] = v as u32;
            rec(slot + 1, v as u32, remaining - v, cur, count, ok, check)?;
        }
        Ok(())
    }

    let mut all_negative = true;
    let mut cur = vec![0u32; s];
    for total in (lo + 1)..=scan_bound {
        if (total as f64) <= threshold {
            continue;
        }
        let mut check = |q: &[u32]| -> Result<bool> {
            let state = OrderedState::new(q.to_vec())?;
            Ok(embedded_drift(&state, params, p)?.drift < 0.0)
        };
        rec(0, 0, total, &mut cur, &mut count, &mut all_negative, &mut check)?;
        if !all_negative {
            break;
        }
    }
    Ok(all_negative)
}

/// Writes a stationary vector as delimited text: `state,probability` with
/// the state entries joined by `|`.
pub fn write_stationary_csv<W: std::io::Write>(
    w: &mut W,
    chain: &TruncatedChain,
    pi: &[f64],
    header_comment: &str,
) -> std::io::Result<()> {
    writeln!(w, "# {header_comment}")?;
    writeln!(w, "state,probability")?;
    for (state, &p) in chain.states.iter().zip(pi) {
        let tuple: Vec<String> = state.queues().iter().map(|q| q.to_string()).collect();
        writeln!(w, "{},{}", tuple.join("|"), format_args!("{p:.17e}"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{error_allocation, pw_allocation, uniform_allocation, AllocationVector};

    fn row_map(chain: &TruncatedChain, state: &[u32]) -> HashMap<Vec<u32>, f64> {
        let idx = chain
            .state_index(&OrderedState::new(state.to_vec()).unwrap())
            .unwrap();
        chain.rates()[idx]
            .iter()
            .map(|&(j, r)| (chain.states()[j].queues().to_vec(), r))
            .collect()
    }

    #[test]
    fn generator_empty_state() {
        let params = SystemParams::new(2, 1.3, 1.0).unwrap();
        let p = uniform_allocation(2).unwrap();
        for variant in [Variant::Idling, Variant::NonIdling] {
            let chain = build_generator(&params, &p, variant, 4).unwrap();
            let row = row_map(&chain, &[0, 0]);
            assert_eq!(row.len(), 1);
            assert!((row[&vec![0, 1]] - 1.3).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_jsq_interior_state() {
        let params = SystemParams::new(2, 1.3, 1.0).unwrap();
        let p = AllocationVector::new(vec![1.0, 0.0]).unwrap();
        let chain = build_generator(&params, &p, Variant::Idling, 5).unwrap();
        let row = row_map(&chain, &[1, 2]);
        assert_eq!(row.len(), 3);
        assert!((row[&vec![2, 2]] - 1.3).abs() < 1e-12);
        assert!((row[&vec![0, 2]] - 1.0).abs() < 1e-12);
        assert!((row[&vec![1, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generator_nonidling_forces_idle_server() {
        let params = SystemParams::new(2, 0.9, 1.0).unwrap();
        let p = AllocationVector::new(vec![0.0, 1.0]).unwrap();
        let chain = build_generator(&params, &p, Variant::NonIdling, 5).unwrap();
        let row = row_map(&chain, &[0, 3]);
        assert!((row[&vec![1, 3]] - 0.9).abs() < 1e-12);
        assert!((row[&vec![0, 2]] - 1.0).abs() < 1e-12);
        assert_eq!(row.len(), 2);
    }

    #[test]
    fn generator_outflow_at_interior_states() {
        let params = SystemParams::new(3, 1.7, 0.8).unwrap();
        let p = pw_allocation(3, 2).unwrap();
        for variant in [Variant::Idling, Variant::NonIdling] {
            let chain = build_generator(&params, &p, variant, 6).unwrap();
            for (i, state) in chain.states().iter().enumerate() {
                if state.queues().iter().any(|&q| q == chain.cap()) {
                    continue;
                }
                let outflow: f64 = chain.rates()[i].iter().map(|&(_, r)| r).sum();
                let expected = params.lambda() + state.pos() as f64 * params.mu();
                assert!((outflow - expected).abs() < 1e-9, "state {:?}", state);
            }
        }
    }

    #[test]
    fn variants_coincide_where_expected() {
        let params = SystemParams::new(3, 1.7, 0.8).unwrap();
        let p = error_allocation(3, 2, 0.6).unwrap();
        let idling = build_generator(&params, &p, Variant::Idling, 5).unwrap();
        let nonidling = build_generator(&params, &p, Variant::NonIdling, 5).unwrap();
        let jsq = build_generator(
            &params,
            &AllocationVector::new(vec![1.0, 0.0, 0.0]).unwrap(),
            Variant::Idling,
            5,
        )
        .unwrap();
        for state in idling.states() {
            let q = state.queues().to_vec();
            if q[0] >= 1 {
                assert_eq!(row_map(&idling, &q), row_map(&nonidling, &q));
            } else {
                assert_eq!(row_map(&nonidling, &q), row_map(&jsq, &q));
            }
        }
    }

    #[test]
    fn stationary_matches_independent_mm1_product_form() {
        // s = 2 uniform idling splits into two independent M/M/1 queues at
        // load lambda / 2.
        let params = SystemParams::new(2, 1.0, 1.0).unwrap();
        let p = uniform_allocation(2).unwrap();
        let chain = build_generator(&params, &p, Variant::Idling, 60).unwrap();
        let pi = stationary_distribution(&chain, 1e-10).unwrap();
        let mean = stationary_mean_total(&chain, &pi);
        assert!((mean - 2.0).abs() < 1e-3, "mean {mean}");
        let empty = pi[chain
            .state_index(&OrderedState::new(vec![0, 0]).unwrap())
            .unwrap()];
        assert!((empty - 0.25).abs() < 1e-3, "empty {empty}");
    }

    #[test]
    fn jsq_boundary_mass_negligible() {
        let params = SystemParams::new(2, 1.0, 1.0).unwrap();
        let p = AllocationVector::new(vec![1.0, 0.0]).unwrap();
        let chain = build_generator(&params, &p, Variant::Idling, 60).unwrap();
        let pi = stationary_distribution(&chain, 1e-10).unwrap();
        assert!(boundary_mass(&chain, &pi) < 1e-8);
    }

    #[test]
    fn stationary_satisfies_global_balance() {
        let params = SystemParams::new(3, 1.9, 1.0).unwrap();
        let p = pw_allocation(3, 2).unwrap();
        let chain = build_generator(&params, &p, Variant::NonIdling, 12).unwrap();
        let pi = stationary_distribution(&chain, 1e-10).unwrap();
        assert!(balance_residual(&chain, &pi) <= 1e-10);
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_total_non_increasing_in_d() {
        let params = SystemParams::new(3, 2.1, 1.0).unwrap();
        let mut prev = f64::INFINITY;
        for d in 1..=3 {
            let p = pw_allocation(3, d).unwrap();
            let chain = build_generator(&params, &p, Variant::Idling, 25).unwrap();
            let pi = stationary_distribution(&chain, 1e-9).unwrap();
            let mean = stationary_mean_total(&chain, &pi);
            assert!(mean <= prev + 1e-9, "d={d} mean={mean} prev={prev}");
            prev = mean;
        }
    }

    #[test]
    fn threshold_cases() {
        let params = SystemParams::new(2, 1.0, 1.0).unwrap();
        assert!((compact_set_threshold(&params).unwrap() - 3.0).abs() < 1e-12);
        let nearly = SystemParams::new(2, 1.9999, 1.0).unwrap();
        assert!(compact_set_threshold(&nearly).unwrap() > 1e3);
        let over = SystemParams::new(2, 2.5, 1.0).unwrap();
        assert!(compact_set_threshold(&over).is_err());
    }

    #[test]
    fn drift_hand_values() {
        let params = SystemParams::new(2, 1.0, 1.0).unwrap();
        let p = AllocationVector::new(vec![1.0, 0.0]).unwrap();
        let x = OrderedState::new(vec![2, 3]).unwrap();
        let report = embedded_drift(&x, &params, &p).unwrap();
        assert!((report.drift - (-1.0)).abs() < 1e-12);
        assert!(!report.in_compact_set); // total 5 > threshold 3

        let empty = OrderedState::new(vec![0, 0]).unwrap();
        let report = embedded_drift(&empty, &params, &p).unwrap();
        assert!((report.drift - 1.0).abs() < 1e-12);
        assert!(report.in_compact_set);
    }

    #[test]
    fn drift_matches_transition_enumeration() {
        // Independent oracle: enumerate embedded-chain transitions and sum
        // probability-weighted changes of V.
        let params = SystemParams::new(3, 2.0, 0.9).unwrap();
        let p = error_allocation(3, 2, 0.4).unwrap();
        for queues in [[0, 0, 0], [0, 2, 2], [1, 1, 4], [3, 3, 3], [0, 1, 7]] {
            let x = OrderedState::new(queues.to_vec()).unwrap();
            let oracle = drift_oracle(&x, &params, &p);
            let got = embedded_drift(&x, &params, &p).unwrap().drift;
            assert!((oracle - got).abs() < 1e-12, "{queues:?}");
        }
    }

    pub(crate) fn drift_oracle(
        x: &OrderedState,
        params: &SystemParams,
        p: &AllocationVector,
    ) -> f64 {
        let (lambda, mu) = (params.lambda(), params.mu());
        let v = |q: &[u32]| -> f64 { q.iter().map(|&u| (u as f64) * (u as f64)).sum() };
        let v0 = v(x.queues());
        let denom = lambda + x.pos() as f64 * mu;
        let routing = policy::tie_aware_routing_distribution(x.queues(), p).unwrap();
        let mut drift = 0.0;
        for (i, &r) in routing.iter().enumerate() {
            if r > 0.0 {
                let mut q = x.queues().to_vec();
                q[i] += 1;
                drift += (lambda * r / denom) * (v(&q) - v0);
            }
        }
        for i in 0..x.queues().len() {
            if x.queues()[i] > 0 {
                let mut q = x.queues().to_vec();
                q[i] -= 1;
                drift += (mu / denom) * (v(&q) - v0);
            }
        }
        drift
    }

    #[test]
    fn negative_drift_scan_cases() {
        let params = SystemParams::new(2, 1.0, 1.2).unwrap();
        let jsq = AllocationVector::new(vec![1.0, 0.0]).unwrap();
        assert!(verify_negative_drift(&params, &jsq, 40).unwrap());

        let params = SystemParams::new(3, 2.7, 1.0).unwrap();
        let p = uniform_allocation(3).unwrap();
        assert!(verify_negative_drift(&params, &p, 30).unwrap());

        // J2SQ at rho = 0.95 has non-negative drift somewhere outside the set.
        let params = SystemParams::new(2, 1.9, 1.0).unwrap();
        let j2sq = AllocationVector::new(vec![0.0, 1.0]).unwrap();
        assert!(!verify_negative_drift(&params, &j2sq, 120).unwrap());
    }
}
