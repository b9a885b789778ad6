// SPDX-License-Identifier: Apache-2.0

use crate::error::{Error, Result};
use crate::sim::G2Curve;

/// Removes uncorrelated background from a normalized curve:
/// `g' = (g − (1 − ρ²))/ρ²`, errors divided by `ρ²`.
///
/// `rho` is the signal fraction `S/(S+B)` of the clicks.
pub fn background_correct(curve: &G2Curve, rho: f64) -> Result<G2Curve> {
    if !(rho.is_finite() && rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid("rho", format!("{rho} not in (0, 1]")));
    }
    if curve.rho.is_some() {
        return Err(Error::invalid("rho", "curve is already background corrected"));
    }
    let r2 = rho * rho;
    let floor = 1.0 - r2;
    Ok(G2Curve {
        g2: curve.g2.iter().map(|g| (g - floor) / r2).collect(),
        sigma: curve.sigma.iter().map(|s| s / r2).collect(),
        rho: Some(rho),
        ..curve.clone()
    })
}

/// Signal fraction for a known signal rate and uncorrelated background rate.
pub fn signal_fraction(signal_per_s: f64, background_per_s: f64) -> Result<f64> {
    if !(signal_per_s > 0.0 && background_per_s >= 0.0 && background_per_s.is_finite()) {
        return Err(Error::invalid("signal_fraction", "need signal > 0 and background >= 0"));
    }
    Ok(signal_per_s / (signal_per_s + background_per_s))
}
