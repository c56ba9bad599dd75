//! Constant calculus for the moment inequality and the block coupling scheme.
//!
//! Everything here is a pure numeric function: the cubic root `t0`, the rate
//! function `psi`, the admissible moment excess `delta`, the two decay thresholds,
//! the bisection contraction factor, the maximal-inequality constant and the
//! integer parameter system of the block scheme.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    /// `theta_r <= c0 r^{-lambda}`
    Power,
    /// `theta_r <= c0 exp(-lambda r)`
    Exponential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentParams {
    pub d: usize,
    pub p: f64,
    pub d_p: f64,
    pub c0: f64,
    pub lambda: f64,
    pub decay: DecayKind,
}

impl MomentParams {
    pub fn new(d: usize, p: f64, d_p: f64, c0: f64, lambda: f64, decay: DecayKind) -> Result<Self> {
        if d == 0 {
            return Err(Error::Domain("d = 0".into()));
        }
        if !(p > 2.0) {
            return Err(Error::Domain(format!("moment order p = {p} (need p > 2)")));
        }
        if !(d_p > 0.0) {
            return Err(Error::Domain(format!("moment bound D_p = {d_p}")));
        }
        if !(c0 > 1.0) {
            return Err(Error::Domain(format!("decay prefactor c0 = {c0} (need c0 > 1)")));
        }
        if !(lambda > 0.0) {
            return Err(Error::Domain(format!("decay exponent lambda = {lambda}")));
        }
        Ok(MomentParams { d, p, d_p, c0, lambda, decay })
    }

    /// The decay envelope `c0 r^{-lambda}` or `c0 e^{-lambda r}`.
    pub fn envelope(&self, r: u64) -> f64 {
        let r = r as f64;
        match self.decay {
            DecayKind::Power => self.c0 * r.powf(-self.lambda),
            DecayKind::Exponential => self.c0 * (-self.lambda * r).exp(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeParams {
    pub alpha: u32,
    pub beta: u32,
    pub tau: f64,
    pub rho: f64,
    pub gamma0: f64,
}

impl SchemeParams {
    /// User-supplied scheme; `rho` is always `tau / 8`.
    pub fn new(alpha: u32, beta: u32, tau: f64, gamma0: f64) -> Result<Self> {
        if !(alpha > beta && beta > 1) {
            return Err(Error::Domain(format!("alpha = {alpha}, beta = {beta} (need alpha > beta > 1)")));
        }
        if !(tau > 0.0) || !(gamma0 > 0.0) {
            return Err(Error::Domain(format!("tau = {tau}, gamma0 = {gamma0}")));
        }
        Ok(SchemeParams { alpha, beta, tau, rho: tau / 8.0, gamma0 })
    }
}

fn cubic(t: f64) -> f64 {
    ((t + 2.0) * t - 7.0) * t - 4.0
}

/// Largest real root of `t^3 + 2t^2 - 7t - 4`, by bisection on `[2, 3]`.
pub fn t0() -> f64 {
    let (mut lo, mut hi) = (2.0f64, 3.0f64);
    debug_assert!(cubic(lo) < 0.0 && cubic(hi) > 0.0);
    while hi - lo > 1e-15 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if cubic(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn require_p(p: f64) -> Result<()> {
    if p > 2.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("p = {p} (need p > 2)")))
    }
}

/// Three-branch rate function with breakpoints `4` and `t0^2`.
pub fn psi(x: f64) -> Result<f64> {
    require_p(x)?;
    let t0sq = t0().powi(2);
    Ok(if x <= 4.0 {
        (x - 1.0) / (x - 2.0)
    } else if x <= t0sq {
        (3.0 - x.sqrt()) * (x.sqrt() + 1.0) / 2.0
    } else {
        ((x - 1.0) * ((x - 2.0).powi(2) - 3.0).sqrt() - x * x + 6.0 * x - 11.0) / (3.0 * x - 12.0)
    })
}

/// `(p - 1) / (p - 2)`, which dominates `psi(p)`.
pub fn psi_simple_bound(p: f64) -> Result<f64> {
    require_p(p)?;
    Ok((p - 1.0) / (p - 2.0))
}

fn require_delta(delta: f64, p: f64) -> Result<()> {
    if delta > 0.0 && delta < p - 2.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("delta = {delta} (need 0 < delta < p - 2 = {})", p - 2.0)))
    }
}

pub fn lambda1(d: usize, delta: f64, p: f64) -> Result<f64> {
    require_delta(delta, p)?;
    Ok(d as f64 * (2.0 + delta) * (2.0 * p - 4.0 - delta) / (4.0 * (p - 2.0 - delta)))
}

pub fn lambda2(d: usize, delta: f64, p: f64) -> Result<f64> {
    require_delta(delta, p)?;
    Ok(d as f64 * ((2.0 + delta) / (2.0 * (p - 2.0 - delta)) + 1.0 - delta / 2.0))
}

fn max_lambda(d: usize, delta: f64, p: f64) -> Result<f64> {
    Ok(lambda1(d, delta, p)?.max(lambda2(d, delta, p)?))
}

/// Relative shrink applied to the line-searched `delta` when `p <= 4`.
pub const DELTA_SAFETY: f64 = 0.01;

/// Moment excess `delta` for which `lambda > max(lambda1, lambda2)`.
///
/// For `p > 4` the closed-form choices are used (they minimise `max(lambda1, lambda2)`);
/// for `p <= 4` the largest `delta` such that every smaller value is admissible is found
/// by a grid scan refined with bisection, then shrunk by [`DELTA_SAFETY`]. The result is
/// clipped to `(0, 1]` and below `p - 2`.
pub fn choose_delta(params: &MomentParams) -> Result<f64> {
    let MomentParams { d, p, lambda, .. } = *params;
    let threshold = d as f64 * psi(p)?;
    if !(lambda > threshold) {
        return Err(Error::DecayTooSlow { lambda, threshold });
    }
    let upper = 1.0f64.min(p - 2.0);
    let admissible = |delta: f64| -> bool {
        delta > 0.0 && delta < p - 2.0 && max_lambda(d, delta, p).is_ok_and(|m| lambda > m)
    };
    let delta = if p > 4.0 {
        let optimal = if p <= t0().powi(2) {
            p - p.sqrt() - 2.0
        } else {
            (2.0 / 3.0) * (p - 2.0 - ((p - 2.0).powi(2) - 3.0).sqrt())
        };
        // clipping can only move delta towards the feasible side of the optimum
        let clipped = optimal.min(upper);
        if clipped < p - 2.0 { clipped } else { 0.5 * (p - 2.0) }
    } else {
        const GRID: usize = 4096;
        let cap = if upper < p - 2.0 { upper } else { upper * (1.0 - 1e-9) };
        let mut last_ok = 0.0;
        let mut first_bad = None;
        for i in 1..=GRID {
            let x = cap * i as f64 / GRID as f64;
            if admissible(x) {
                last_ok = x;
            } else {
                first_bad = Some(x);
                break;
            }
        }
        if last_ok == 0.0 {
            // feasible region thinner than one grid step
            let mut hi = cap / GRID as f64;
            while !admissible(hi) {
                hi *= 0.5;
                if hi < 1e-300 {
                    return Err(Error::DecayTooSlow { lambda, threshold });
                }
            }
            last_ok = hi;
            first_bad = Some(2.0 * hi);
        }
        let best = match first_bad {
            None => last_ok,
            Some(mut bad) => {
                let mut ok = last_ok;
                for _ in 0..80 {
                    let mid = 0.5 * (ok + bad);
                    if admissible(mid) {
                        ok = mid;
                    } else {
                        bad = mid;
                    }
                }
                ok
            }
        };
        best * (1.0 - DELTA_SAFETY)
    };
    if !admissible(delta) {
        return Err(Error::DecayTooSlow { lambda, threshold: max_lambda(d, delta, p)? });
    }
    Ok(delta)
}

/// Sharp bisection contraction `max_L (floor(L/2)^e + ceil(L/2)^e) / L^e`, `e = 1 + delta/2`.
///
/// The ratio only depends on the split edge `L`. Even `L` give exactly `2^{-delta/2}`;
/// odd `L` approach it from above, so the maximum sits at small `L` and the scan over
/// `L <= 1000` is exhaustive in practice.
pub fn tau0(delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Domain(format!("delta = {delta} (need 0 < delta <= 1)")));
    }
    let e = 1.0 + delta / 2.0;
    Ok((2u64..=1000)
        .map(|l| {
            let lo = (l / 2) as f64;
            let hi = (l - l / 2) as f64;
            (lo.powf(e) + hi.powf(e)) / (l as f64).powf(e)
        })
        .fold(0.0, f64::max))
}

/// `A = 5^d (1 - 2^{-delta/(4 + 2 delta)})^{-d(2 + delta)}`.
///
/// The exponent of 2 is taken negative: with a positive exponent the base is negative
/// and the power is undefined over the reals.
pub fn moricz_a(d: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta <= 1.0) || d == 0 {
        return Err(Error::Domain(format!("d = {d}, delta = {delta}")));
    }
    let dd = d as f64;
    let base = 1.0 - 2f64.powf(-delta / (4.0 + 2.0 * delta));
    Ok(5f64.powf(dd) * base.powf(-dd * (2.0 + delta)))
}

/// `n_l = sum_{i=1}^l (i^alpha + i^beta)`, `n_0 = 0`.
pub fn block_boundary(alpha: u32, beta: u32, l: u64) -> Result<i64> {
    if !(alpha > beta && beta > 1) {
        return Err(Error::Domain(format!("alpha = {alpha}, beta = {beta} (need alpha > beta > 1)")));
    }
    let mut n: i64 = 0;
    for i in 1..=l {
        let i = i64::try_from(i).map_err(|_| Error::Overflow("block boundary"))?;
        let term = i
            .checked_pow(alpha)
            .and_then(|x| i.checked_pow(beta).and_then(|y| x.checked_add(y)))
            .ok_or(Error::Overflow("block boundary"))?;
        n = n.checked_add(term).ok_or(Error::Overflow("block boundary"))?;
    }
    Ok(n)
}

/// Search cap for [`choose_scheme`].
pub const SCHEME_ALPHA_MAX: u64 = 1_000_000;

/// Checks the seven scheme constraints for a concrete `(alpha, beta, gamma0)`.
/// Returns the name of the first violated one.
pub fn scheme_violation(
    d: usize,
    tau: f64,
    mu: f64,
    delta: f64,
    gamma1: f64,
    alpha: f64,
    beta: f64,
    gamma0: f64,
) -> Option<&'static str> {
    let rho = tau / 8.0;
    let dd = d as f64;
    if !(gamma0 > (1.0 + 1.0 / rho) * (1.0 - 1.0 / dd)) {
        return Some("gamma0 > (1 + 1/rho)(1 - 1/d)");
    }
    if !((alpha / beta) * (1.0 - mu * delta / (8.0 * (1.0 + delta))) < 1.0) {
        return Some("(alpha/beta)(1 - mu delta / (8(1 + delta))) < 1");
    }
    if !(beta > 6.0 / rho) {
        return Some("beta > 6/rho");
    }
    if !(alpha - beta > 6.0 / rho) {
        return Some("alpha - beta > 6/rho");
    }
    if !(beta > 2.0 * gamma0 / rho) {
        return Some("beta > 2 gamma0 / rho");
    }
    if !(alpha > 8.0 / (3.0 * tau) - 1.0) {
        return Some("alpha > 8/(3 tau) - 1");
    }
    if !(alpha * gamma1 > 2.0) {
        return Some("alpha gamma1 > 2");
    }
    None
}

/// Lexicographically smallest `(alpha, beta)` with `alpha > beta > 1` admitting a `gamma0`
/// that satisfies the whole constraint system; `gamma0` is the midpoint of its open interval.
pub fn choose_scheme(d: usize, tau: f64, mu: f64, delta: f64, gamma1: f64) -> Result<SchemeParams> {
    if d == 0 || !(tau > 0.0 && mu > 0.0 && delta > 0.0 && gamma1 > 0.0) {
        return Err(Error::Domain(format!(
            "d = {d}, tau = {tau}, mu = {mu}, delta = {delta}, gamma1 = {gamma1}"
        )));
    }
    let rho = tau / 8.0;
    let dd = d as f64;
    let gamma_floor = (1.0 + 1.0 / rho) * (1.0 - 1.0 / dd);
    let shrink = 1.0 - mu * delta / (8.0 * (1.0 + delta));
    let gap = 6.0 / rho;

    // For fixed alpha, beta must lie strictly inside (beta_low, alpha - gap).
    let beta_low = |alpha: f64| -> f64 {
        (alpha * shrink).max(gap).max(2.0 * gamma_floor / rho).max(1.0)
    };
    let next_int_above = |x: f64| -> u64 { (x.floor() as u64).saturating_add(1) };

    for alpha in 3..=SCHEME_ALPHA_MAX {
        let a = alpha as f64;
        if !(a > 8.0 / (3.0 * tau) - 1.0) || !(a * gamma1 > 2.0) {
            continue;
        }
        let beta = next_int_above(beta_low(a)).max(2);
        if beta >= alpha || !((beta as f64) < a - gap) {
            continue;
        }
        let gamma_ceiling = beta as f64 * rho / 2.0;
        let gamma0 = if d == 1 { 0.5 * gamma_ceiling } else { 0.5 * (gamma_floor + gamma_ceiling) };
        if scheme_violation(d, tau, mu, delta, gamma1, a, beta as f64, gamma0).is_none() {
            return Ok(SchemeParams {
                alpha: u32::try_from(alpha).map_err(|_| Error::Overflow("alpha"))?,
                beta: u32::try_from(beta).map_err(|_| Error::Overflow("beta"))?,
                tau,
                rho,
                gamma0,
            });
        }
    }

    // Name the lower bound on beta that collides with alpha - beta > 6/rho at the cap.
    let a = SCHEME_ALPHA_MAX as f64;
    let candidates = [
        (a * shrink, "(alpha/beta)(1 - mu delta / (8(1 + delta))) < 1"),
        (gap, "beta > 6/rho"),
        (2.0 * gamma_floor / rho, "beta > 2 gamma0 / rho with gamma0 > (1 + 1/rho)(1 - 1/d)"),
    ];
    let binding = candidates
        .iter()
        .max_by(|x, y| x.0.total_cmp(&y.0))
        .map(|c| c.1)
        .unwrap_or("alpha - beta > 6/rho");
    let binding = if a * gamma1 <= 2.0 { "alpha gamma1 > 2" } else { binding };
    Err(Error::Infeasible(format!(
        "no (alpha, beta) with alpha <= {SCHEME_ALPHA_MAX}; binding constraint: {binding} against alpha - beta > 6/rho"
    )))
}
