//! Closed-form and numerically-derived stability quantities: critical
//! traffic intensities for error-prone routing, Erlang-B loss probabilities,
//! the front-server stationary distribution during split episodes, and the
//! overflow rate from a saturated front server.

use crate::error::{Error, Result};
use crate::policy::SystemParams;

/// Default bracket width for bisected critical values.
pub const DEFAULT_CRITICAL_TOL: f64 = 1e-9;

/// How a critical value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticalMethod {
    ClosedForm,
    Bisection,
}

/// A critical traffic intensity together with its provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalValueReport {
    pub value: f64,
    pub method: CriticalMethod,
    /// Final bracket width for bisection, 0 for closed form.
    pub residual: f64,
}

/// Stationary quantities of the front-server birth-death chain during a
/// split episode under two-point error routing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontServerDistribution {
    /// Stationary probability the front server is idle.
    pub p0: f64,
    /// Stationary probability the front server is busy.
    pub busy: f64,
    /// Geometric ratio `lambda * (1 - p) / mu` of the queue tail.
    pub geometric_ratio: f64,
}

/// Critical traffic intensity for two-point error routing with error
/// probability `p` onto the second-shortest queue:
/// `(s-1)/(2s) * (1 + sqrt(1 + 4/(p(s-1))))`.
pub fn v_cr(p: f64, s: usize) -> Result<CriticalValueReport> {
    if s < 2 {
        return Err(Error::invalid("need at least 2 servers"));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid("p must lie in (0, 1]"));
    }
    let sf = s as f64;
    let value = (sf - 1.0) / (2.0 * sf) * (1.0 + (1.0 + 4.0 / (p * (sf - 1.0))).sqrt());
    Ok(CriticalValueReport {
        value,
        method: CriticalMethod::ClosedForm,
        residual: 0.0,
    })
}

/// Erlang-B blocking probability of an `n_servers` loss system at the given
/// offered load, by the stable recurrence
/// `B(n) = a B(n-1) / (n + a B(n-1))`, `B(0) = 1`.
pub fn erlang_loss(n_servers: usize, offered_load: f64) -> Result<f64> {
    if !(offered_load > 0.0) {
        return Err(Error::invalid("offered load must be positive"));
    }
    let mut b = 1.0;
    for n in 1..=n_servers {
        b = offered_load * b / (n as f64 + offered_load * b);
    }
    Ok(b)
}

/// Membership of `rho` in the stability-candidate set for routing all
/// arrivals to the m-th shortest queue: true iff the overflow rate of an
/// (m-1)-server loss system offered `s*rho` stays below the back capacity,
/// `s*rho * B(m-1, s*rho) < s - m + 1`.
pub fn g_membership(rho: f64, s: usize, m: usize) -> Result<bool> {
    if s < 2 || m < 2 || m > s {
        return Err(Error::invalid("need 2 <= m <= s"));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid("rho must lie in (0, 1)"));
    }
    let a = s as f64 * rho;
    Ok(a * erlang_loss(m - 1, a)? < (s - m + 1) as f64)
}

/// Critical traffic intensity for deterministic routing to the m-th
/// shortest queue, as the supremum of the membership set, found by
/// bisection. The boundary's monotonicity is validated by a dense scan
/// before the bisection is trusted.
pub fn v_cr_1m(s: usize, m: usize, tol: f64) -> Result<CriticalValueReport> {
    if s < 2 || m < 2 || m > s {
        return Err(Error::invalid("need 2 <= m <= s"));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tol must be positive"));
    }
    // Guaranteed member: every rho below (s - m + 1)/s belongs to the set.
    let mut lo = ((s - m + 1) as f64 / s as f64 - 1e-9).max(1e-12);
    if !g_membership(lo, s, m)? {
        return Err(Error::Internal(format!(
            "guaranteed member rho={lo} rejected for s={s}, m={m}"
        )));
    }
    // Validate that membership is monotone (a member-prefix) on a dense grid.
    let mut seen_nonmember = false;
    for i in 1..2000 {
        let rho = i as f64 / 2000.0;
        let member = g_membership(rho, s, m)?;
        if !member {
            seen_nonmember = true;
        } else if seen_nonmember {
            return Err(Error::Internal(format!(
                "membership boundary not monotone at rho={rho} for s={s}, m={m}"
            )));
        }
    }
    // The supremum is below 1, so a non-member upper bound exists inside
    // (0, 1); approach 1 geometrically to find one.
    let mut hi = lo;
    let mut found = false;
    for _ in 0..60 {
        hi = 1.0 - (1.0 - hi) / 2.0;
        if !g_membership(hi, s, m)? {
            found = true;
            break;
        }
        lo = hi;
    }
    if !found {
        return Err(Error::Internal(format!(
            "no non-member found below 1 for s={s}, m={m}"
        )));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if g_membership(mid, s, m)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(CriticalValueReport {
        value: 0.5 * (lo + hi),
        method: CriticalMethod::Bisection,
        residual: hi - lo,
    })
}

/// Stationary distribution of the front-server birth-death chain during a
/// split episode: birth rate `lambda` at 0 and `lambda*(1-p)` elsewhere,
/// death rate `mu`. Busy probability `s*rho / (1 + s*rho*p)`.
pub fn front_server_distribution(params: &SystemParams, p: f64) -> Result<FrontServerDistribution> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("p must lie in [0, 1]"));
    }
    let (lambda, mu) = (params.lambda(), params.mu());
    let tail_rate = lambda * (1.0 - p);
    if tail_rate >= mu {
        return Err(Error::NonErgodicFrontServer {
            rate: tail_rate,
            mu,
        });
    }
    let busy = lambda / (mu + lambda * p);
    Ok(FrontServerDistribution {
        p0: 1.0 - busy,
        busy,
        geometric_ratio: tail_rate / mu,
    })
}

/// Long-run rate at which a stationary single-server loss front diverts
/// arrivals to the back servers: `lambda^2 / (lambda + mu)`.
pub fn overflow_rate(lambda: f64, mu: f64) -> Result<f64> {
    if lambda < 0.0 || !(mu > 0.0) {
        return Err(Error::invalid("rates must be non-negative, mu positive"));
    }
    Ok(lambda * lambda / (lambda + mu))
}
