use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const PERPLEXITY_TOLERANCE: f64 = 1e-4;
pub const MAX_BISECTION_STEPS: usize = 200;

const LOG_SIGMA_MIN: f64 = -46.051_701_859_880_914; // ln(1e-20)
const LOG_SIGMA_MAX: f64 = 46.051_701_859_880_914; // ln(1e20)
const BRACKET_GROWTH: f64 = 23.025_850_929_940_457; // ln(1e10)
const MAX_BRACKET_EXPANSIONS: usize = 8;

/// Bandwidth calibrated for one point.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthRow<T> {
    pub sigma: T,
    pub achieved_perplexity: T,
    pub converged: bool,
    /// `p_{j|i}` over the neighbors, summing to 1.
    pub conditional: Vec<T>,
}

/// Conditional Gaussian row and its perplexity `exp(H)` (H in nats).
///
/// Distances are shifted by their minimum before exponentiating; the shift
/// cancels in the normalization.
pub fn conditional_row<T: Scalar>(squared_distances: &[T], sigma: T) -> (Vec<T>, T) {
    let beta = (T::of(2.0) * sigma * sigma).recip();
    let d_min = squared_distances
        .iter()
        .copied()
        .fold(T::infinity(), T::min);
    let mut e: Vec<T> = squared_distances
        .iter()
        .map(|&d| (-(beta * (d - d_min))).exp())
        .collect();
    let sum: T = e.iter().copied().sum();
    let weighted: T = squared_distances
        .iter()
        .zip(&e)
        .map(|(&d, &w)| {
            let shifted = d - d_min;
            if w == T::zero() {
                T::zero()
            } else {
                shifted * w
            }
        })
        .sum();
    let entropy = sum.ln() + beta * weighted / sum;
    for w in e.iter_mut() {
        *w /= sum;
    }
    (e, entropy.exp())
}

/// Bisection on `log sigma` until the perplexity of the conditional row is
/// within [`PERPLEXITY_TOLERANCE`] of the target.
///
/// Targets the row cannot reach (for instance more tied nearest neighbors
/// than the target) come back with `converged == false` and the boundary
/// bandwidth.
pub fn perplexity_search<T: Scalar>(
    squared_distances: &[T],
    target_perplexity: T,
) -> Result<BandwidthRow<T>> {
    let k = squared_distances.len();
    if !(target_perplexity > T::zero()) || !target_perplexity.is_finite() {
        return Err(Error::invalid("perplexity", "must be positive and finite"));
    }
    if target_perplexity >= T::of_usize(k) {
        return Err(Error::invalid(
            "perplexity",
            format!("must be smaller than the neighbor count {k}"),
        ));
    }
    if squared_distances.iter().any(|d| !d.is_finite() || *d < T::zero()) {
        return Err(Error::NonFinite("squared distance row".into()));
    }
    if squared_distances.iter().all(|&d| d == T::zero()) {
        return Err(Error::invalid("squared_distances", "all neighbor distances are zero"));
    }

    let tol = T::of(PERPLEXITY_TOLERANCE);
    let perp_at = |log_sigma: T| conditional_row(squared_distances, log_sigma.exp());

    let mut lo = T::of(LOG_SIGMA_MIN);
    let mut hi = T::of(LOG_SIGMA_MAX);
    let growth = T::of(BRACKET_GROWTH);
    // the largest representable sigma for T bounds the expansion
    let max_log = T::max_value().ln() * T::of(0.5) - T::one();
    let min_log = -max_log;
    for _ in 0..MAX_BRACKET_EXPANSIONS {
        if perp_at(hi).1 >= target_perplexity - tol || hi >= max_log {
            break;
        }
        hi = (hi + growth).min(max_log);
    }
    for _ in 0..MAX_BRACKET_EXPANSIONS {
        if perp_at(lo).1 <= target_perplexity + tol || lo <= min_log {
            break;
        }
        lo = (lo - growth).max(min_log);
    }

    let (row_hi, perp_hi) = perp_at(hi);
    if perp_hi < target_perplexity - tol {
        return Ok(BandwidthRow {
            sigma: hi.exp(),
            achieved_perplexity: perp_hi,
            converged: false,
            conditional: row_hi,
        });
    }
    let (row_lo, perp_lo) = perp_at(lo);
    if perp_lo > target_perplexity + tol {
        return Ok(BandwidthRow {
            sigma: lo.exp(),
            achieved_perplexity: perp_lo,
            converged: false,
            conditional: row_lo,
        });
    }

    let half = T::of(0.5);
    let mut best = (row_hi, perp_hi, hi);
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = (lo + hi) * half;
        let (row, perp) = perp_at(mid);
        let done = (perp - target_perplexity).abs() <= tol;
        if done || (perp - target_perplexity).abs() < (best.1 - target_perplexity).abs() {
            best = (row, perp, mid);
        }
        if done {
            break;
        }
        if perp > target_perplexity {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (conditional, achieved, log_sigma) = best;
    Ok(BandwidthRow {
        sigma: log_sigma.exp(),
        achieved_perplexity: achieved,
        converged: (achieved - target_perplexity).abs() <= tol,
        conditional,
    })
}
