// SPDX-License-Identifier: Apache-2.0

//! Detected-photon arrival times from a single three-level emitter.
//!
//! Two exact samplers share one contract: successive calls return the
//! absolute times (ns) of photons that survive detection with probability η.
//!
//! * [`JumpSampler`] walks every transition of the chain.
//! * [`RenewalSampler`] uses the fact that every emission resets the emitter
//!   to level 1, so detections form a renewal process. The gap between
//!   detections is phase-type: the chain with undetected emissions folded back
//!   into 1 and detected ones as an absorbing exit. Its survival function is a
//!   sum of three exponentials, inverted per draw.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::Rng;
use rand_distr::Exp1;

use crate::kinetics::RateConstants;

pub(crate) trait PhotonSource {
    fn next_detection(&mut self, rng: &mut impl Rng) -> Option<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Level {
    Ground,
    Excited,
    Trap,
}

pub(crate) struct JumpSampler {
    rates: RateConstants,
    eta: f64,
    level: Level,
    t: f64,
}

impl JumpSampler {
    pub(crate) fn new(rates: RateConstants, eta: f64) -> Self {
        JumpSampler {
            rates,
            eta,
            level: Level::Ground,
            t: 0.0,
        }
    }
}

fn exp_wait(rng: &mut impl Rng, rate: f64) -> f64 {
    let e: f64 = rng.sample(Exp1);
    e / rate
}

impl PhotonSource for JumpSampler {
    fn next_detection(&mut self, rng: &mut impl Rng) -> Option<f64> {
        let RateConstants { k12, k21, k23, k32 } = self.rates;
        loop {
            match self.level {
                Level::Ground => {
                    if k12 == 0.0 {
                        return None;
                    }
                    self.t += exp_wait(rng, k12);
                    self.level = Level::Excited;
                }
                Level::Excited => {
                    let out = k21 + k23;
                    self.t += exp_wait(rng, out);
                    if rng.random::<f64>() * out < k21 {
                        self.level = Level::Ground;
                        if rng.random::<f64>() < self.eta {
                            return Some(self.t);
                        }
                    } else {
                        self.level = Level::Trap;
                    }
                }
                Level::Trap => {
                    if k32 == 0.0 {
                        return None;
                    }
                    self.t += exp_wait(rng, k32);
                    self.level = Level::Excited;
                }
            }
        }
    }
}

/// Survival `S(t) = Σ wᵢ·exp(−rᵢ·t)` of the inter-detection gap.
#[derive(Debug, Clone)]
pub(crate) struct GapDistribution {
    weights: Vec<f64>,
    decay: Vec<f64>,
}

impl GapDistribution {
    /// `None` when the gap law lacks the reversible structure used here
    /// (η = 1, an absorbing trap, or no pumping).
    pub(crate) fn new(rates: &RateConstants, eta: f64) -> Option<Self> {
        let RateConstants { k12, k21, k23, k32 } = *rates;
        let silent = k21 * (1.0 - eta);
        if !(k12 > 0.0 && silent > 0.0 && eta > 0.0) || (k23 > 0.0 && k32 == 0.0) {
            return None;
        }
        // Symmetrized sub-generator; level 3 is dropped when unreachable.
        let n = if k23 > 0.0 { 3 } else { 2 };
        let d = [1.0, (k12 / silent).sqrt(), (k12 * k23 / (silent * k32)).sqrt()];
        let s12 = (k12 * silent).sqrt();
        let s23 = (k23 * k32).sqrt();
        let full = Matrix3::new(-k12, s12, 0.0, s12, -k21 - k23, s23, 0.0, s23, -k32);
        let sym = full.view((0, 0), (n, n)).into_owned();
        let eig = SymmetricEigen::new(sym);

        let mut weights = Vec::with_capacity(n);
        let mut decay = Vec::with_capacity(n);
        for i in 0..n {
            let v = eig.eigenvectors.column(i);
            let mass: f64 = (0..n).map(|j| d[j] * v[j]).sum();
            weights.push(mass * v[0] / d[0]);
            decay.push(-eig.eigenvalues[i]);
        }
        if decay.iter().any(|r| *r <= 0.0) {
            return None;
        }
        Some(GapDistribution { weights, decay })
    }

    pub(crate) fn survival(&self, t: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.decay)
            .map(|(w, r)| w * (-r * t).exp())
            .sum()
    }

    fn density(&self, t: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.decay)
            .map(|(w, r)| w * r * (-r * t).exp())
            .sum()
    }

    fn slowest(&self) -> f64 {
        self.decay.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Solves `S(t) = u` for `u ∈ (0, 1)`.
    pub(crate) fn quantile(&self, u: f64) -> f64 {
        let mut lo = 0.0;
        let mut hi = (-u.ln()).max(1.0) / self.slowest();
        while self.survival(hi) > u {
            lo = hi;
            hi *= 2.0;
        }
        let mut t = 0.5 * (lo + hi);
        for _ in 0..200 {
            let f = self.survival(t) - u;
            if f > 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let dens = self.density(t);
            if dens > 0.0 {
                let step = f / dens;
                if step.abs() <= 1e-12 * t {
                    return (t + step).clamp(lo, hi);
                }
                let newton = t + step;
                if newton > lo && newton < hi {
                    t = newton;
                    continue;
                }
            }
            t = 0.5 * (lo + hi);
            if hi - lo <= 1e-14 * hi {
                break;
            }
        }
        t
    }
}

pub(crate) struct RenewalSampler {
    gaps: GapDistribution,
    t: f64,
}

impl RenewalSampler {
    pub(crate) fn new(gaps: GapDistribution) -> Self {
        RenewalSampler { gaps, t: 0.0 }
    }
}

impl PhotonSource for RenewalSampler {
    fn next_detection(&mut self, rng: &mut impl Rng) -> Option<f64> {
        // 1 − U ∈ (0, 1]; reject the measure-zero endpoint.
        let mut u = 1.0 - rng.random::<f64>();
        while u >= 1.0 {
            u = 1.0 - rng.random::<f64>();
        }
        self.t += self.gaps.quantile(u);
        Some(self.t)
    }
}
