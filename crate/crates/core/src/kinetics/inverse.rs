// SPDX-License-Identifier: Apache-2.0

//! Inversion of the fit observables back to transition rates.
//!
//! Writing `D = (k_tm² − k_1m²)/4 = k12·k23 + k12·k32 + k21·k32`, the shape
//! parameter satisfies `g_e·k_1m = 2D/k32 − k_tm`, which pins `k32` directly.
//! With `σ2∞` known the remaining unknowns follow from a 2×2 linear system.
//! With only `k21·σ2∞ = N/η` known, `σ2∞` is a root of a cubic and more than
//! one physical root can exist.

use super::{derived_from_rates, rel_diff, DerivedParams, DetectionEfficiency, RateConstants};
use crate::error::{Error, Result};
use crate::kinetics::PER_NS_TO_PER_S;

/// Accepted relative mismatch when re-deriving the inputs from a candidate.
const VERIFY_TOL: f64 = 1e-8;

/// Below this fraction of `k_tm`, a negative `k23` is rounding noise.
const ZERO_RATE_TOL: f64 = 1e-12;

struct ShapeSolution {
    det: f64,
    k32: f64,
}

fn shape_solution(g_e: f64, k_tm: f64, k_1m: f64) -> Result<ShapeSolution> {
    if !(g_e.is_finite() && k_tm > 0.0 && k_1m >= 0.0 && k_1m < k_tm) {
        return Err(Error::NoSolution(format!(
            "need 0 <= k_1m < k_tm and finite g_e (g_e={g_e}, k_tm={k_tm}, k_1m={k_1m})"
        )));
    }
    let det = 0.25 * (k_tm - k_1m) * (k_tm + k_1m);
    let denom = k_tm + g_e * k_1m;
    if denom <= 0.0 {
        return Err(Error::NoSolution(format!(
            "k_tm + g_e·k_1m = {denom} <= 0 leaves no positive k32"
        )));
    }
    Ok(ShapeSolution {
        det,
        k32: 2.0 * det / denom,
    })
}

fn clamp_small_negative(v: f64, scale: f64) -> f64 {
    if v < 0.0 && v > -ZERO_RATE_TOL * scale {
        0.0
    } else {
        v
    }
}

fn shape_matches(rates: &RateConstants, g_e: f64, k_tm: f64, k_1m: f64) -> Option<DerivedParams> {
    let d = derived_from_rates(rates).ok()?;
    let g_err = (d.g_e - g_e).abs() / g_e.abs().max(1.0);
    let ok = g_err <= VERIFY_TOL && rel_diff(d.k_tm, k_tm) <= VERIFY_TOL && (d.k_1m - k_1m).abs() <= VERIFY_TOL * k_tm;
    ok.then_some(d)
}

/// Rates reproducing `(g_e, k_tm, k_1m, σ2∞)`.
pub fn rates_from_derived(derived: &DerivedParams) -> Result<RateConstants> {
    derived.validate()?;
    let DerivedParams {
        g_e,
        k_tm,
        k_1m,
        sigma2_inf,
    } = *derived;
    let ShapeSolution { det, k32 } = shape_solution(g_e, k_tm, k_1m)?;
    let k12 = sigma2_inf * det / k32;
    // k21 + k23 = rest and k32·k21 + k12·k23 = D·(1 − σ2∞).
    let rest = k_tm - k12 - k32;
    let rhs = det * (1.0 - sigma2_inf) - k32 * rest;
    let pivot = k12 - k32;
    let scale = k_tm * k_tm;
    if pivot.abs() <= 1e-13 * k_tm {
        if rhs.abs() <= 1e-12 * scale {
            // k12 = k32: one equation short, a line of solutions.
            let candidates = [0.0, 0.5]
                .into_iter()
                .filter_map(|f| RateConstants::new(k12, rest * (1.0 - f), rest * f, k32).ok())
                .collect();
            return Err(Error::Ambiguous { candidates });
        }
        return Err(Error::NoSolution("inconsistent system with k12 = k32".into()));
    }
    let k23 = clamp_small_negative(rhs / pivot, k_tm);
    let k21 = rest - k23;
    if !(k21 > 0.0 && k23 >= 0.0 && k12 >= 0.0) {
        return Err(Error::NoSolution(format!(
            "unphysical solution k12={k12:e} k21={k21:e} k23={k23:e} k32={k32:e}"
        )));
    }
    let rates = RateConstants::new(k12, k21, k23, k32)?;
    match shape_matches(&rates, g_e, k_tm, k_1m) {
        Some(d) if rel_diff(d.sigma2_inf, sigma2_inf) <= VERIFY_TOL => Ok(rates),
        _ => Err(Error::NoSolution("candidate does not reproduce the inputs".into())),
    }
}

/// Every physical rate tuple consistent with the g² shape `(g_e, k_tm, k_1m)`
/// and the detected count rate `brightness` (s⁻¹) at efficiency `eta`.
///
/// Sorted by increasing `σ2∞`. Empty when nothing is realizable.
pub fn observable_candidates(
    g_e: f64,
    k_tm: f64,
    k_1m: f64,
    brightness: f64,
    eta: DetectionEfficiency,
) -> Result<Vec<RateConstants>> {
    if !(brightness.is_finite() && brightness > 0.0) {
        return Err(Error::invalid("brightness", format!("{brightness} must be > 0")));
    }
    let ShapeSolution { det, k32 } = shape_solution(g_e, k_tm, k_1m)?;
    // Emission rate k21·σ2∞ in ns⁻¹.
    let emission = brightness / (eta.get() * PER_NS_TO_PER_S);
    let a = det / k32;
    // −a²σ³ + a·k_tm·σ² − (a·R + D)·σ + R·k32 = 0, made monic.
    let a2 = a * a;
    let cubic = [-emission * k32 / a2, (a * emission + det) / a2, -k_tm / a];
    let mut out: Vec<RateConstants> = Vec::new();
    for sigma in cubic_roots_in_unit_interval(cubic) {
        let k12 = a * sigma;
        let k21 = emission / sigma;
        let k23 = clamp_small_negative(k_tm - k12 - k21 - k32, k_tm);
        if !(k23 >= 0.0 && k21 > 0.0) {
            continue;
        }
        let Ok(rates) = RateConstants::new(k12, k21, k23, k32) else {
            continue;
        };
        if let Some(d) = shape_matches(&rates, g_e, k_tm, k_1m) {
            if rel_diff(k21 * d.sigma2_inf, emission) <= VERIFY_TOL
                && !out.iter().any(|r| r.max_rel_diff(&rates) < 1e-7)
            {
                out.push(rates);
            }
        }
    }
    Ok(out)
}

/// Rates from the g² shape plus the detected count rate, via `N = η·k21·σ2∞`.
///
/// Fails with [`Error::Ambiguous`] when several physical tuples fit; use
/// [`observable_candidates`] to enumerate them.
pub fn rates_from_observables(
    g_e: f64,
    k_tm: f64,
    k_1m: f64,
    brightness: f64,
    eta: DetectionEfficiency,
) -> Result<RateConstants> {
    let mut candidates = observable_candidates(g_e, k_tm, k_1m, brightness, eta)?;
    match candidates.len() {
        0 => Err(Error::NoSolution(format!(
            "no rates reproduce g_e={g_e}, k_tm={k_tm}, k_1m={k_1m} at N={brightness} s⁻¹, eta={}",
            eta.get()
        ))),
        1 => Ok(candidates.pop().unwrap()),
        _ => Err(Error::Ambiguous { candidates }),
    }
}

/// Real roots in (0, 1) of `x³ + c[2]·x² + c[1]·x + c[0]`.
fn cubic_roots_in_unit_interval(c: [f64; 3]) -> Vec<f64> {
    let p = |x: f64| ((x + c[2]) * x + c[1]) * x + c[0];
    let dp = |x: f64| (3.0 * x + 2.0 * c[2]) * x + c[1];

    // Monotone pieces between the critical points.
    let mut knots = vec![0.0];
    let disc = c[2] * c[2] - 3.0 * c[1];
    if disc > 0.0 {
        let s = disc.sqrt();
        let mut crit = [(-c[2] - s) / 3.0, (-c[2] + s) / 3.0];
        crit.sort_by(f64::total_cmp);
        knots.extend(crit.into_iter().filter(|x| *x > 0.0 && *x < 1.0));
    }
    knots.push(1.0);

    let mut roots = Vec::new();
    for w in knots.windows(2) {
        let (mut lo, mut hi) = (w[0], w[1]);
        let (flo, fhi) = (p(lo), p(hi));
        if flo == 0.0 {
            if lo > 0.0 {
                roots.push(lo);
            }
            continue;
        }
        if flo.signum() == fhi.signum() {
            continue;
        }
        let rising = fhi > flo;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if (p(mid) > 0.0) == rising {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let mut x = 0.5 * (lo + hi);
        // Newton polish inside the bracket.
        for _ in 0..3 {
            let d = dp(x);
            if d == 0.0 {
                break;
            }
            let next = x - p(x) / d;
            if next > w[0] && next < w[1] {
                x = next;
            }
        }
        if x > 0.0 && x < 1.0 {
            roots.push(x);
        }
    }
    roots
}
