// SPDX-License-Identifier: Apache-2.0

//! Rate-equation model of a three-level emitter with a shelving level.
//!
//! Level 1 is the ground state, level 2 the emitting excited state and level 3
//! a metastable trap. Transitions are 1→2 (`k12`, pump), 2→1 (`k21`, radiative),
//! 2→3 (`k23`, shelving) and 3→2 (`k32`, deshelving). Rates are in ns⁻¹ and
//! times in ns throughout; count rates leave this module in s⁻¹.

mod forward;
mod inverse;
mod power;

pub use forward::{
    count_rate, derived_from_rates, g2_analytic, g2_from_derived, generator, populations_at, stationary,
};
pub use inverse::{observable_candidates, rates_from_derived, rates_from_observables};
pub use power::{count_rate_at_power, rates_at_power, two_level_count_rate, PowerModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ns⁻¹ → s⁻¹.
pub const PER_NS_TO_PER_S: f64 = 1e9;

/// Tolerance on `σ1 + σ2 + σ3 = 1`.
pub const POPULATION_SUM_TOL: f64 = 1e-12;

/// The four transition rates of the three-level system, in ns⁻¹.
///
/// `k32 = 0` is representable (a permanently dark trap); operations that need
/// a finite deshelving rate reject it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RatesRepr", into = "RatesRepr")]
pub struct RateConstants {
    pub k12: f64,
    pub k21: f64,
    pub k23: f64,
    pub k32: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RatesRepr {
    k12_per_ns: f64,
    k21_per_ns: f64,
    k23_per_ns: f64,
    k32_per_ns: f64,
}

impl TryFrom<RatesRepr> for RateConstants {
    type Error = Error;
    fn try_from(r: RatesRepr) -> Result<Self> {
        RateConstants::new(r.k12_per_ns, r.k21_per_ns, r.k23_per_ns, r.k32_per_ns)
    }
}

impl From<RateConstants> for RatesRepr {
    fn from(r: RateConstants) -> Self {
        RatesRepr {
            k12_per_ns: r.k12,
            k21_per_ns: r.k21,
            k23_per_ns: r.k23,
            k32_per_ns: r.k32,
        }
    }
}

impl RateConstants {
    pub fn new(k12: f64, k21: f64, k23: f64, k32: f64) -> Result<Self> {
        let rates = RateConstants { k12, k21, k23, k32 };
        rates.validate()?;
        Ok(rates)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k12", self.k12),
            ("k21", self.k21),
            ("k23", self.k23),
            ("k32", self.k32),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Invalid {
                    field: "rates",
                    reason: format!("{name} = {v} must be finite and >= 0"),
                });
            }
        }
        if self.k21 <= 0.0 {
            return Err(Error::invalid("rates", "k21 must be > 0"));
        }
        Ok(())
    }

    /// `k12·k23 + k12·k32 + k21·k32`, the normalizer of the stationary state.
    pub fn determinant(&self) -> f64 {
        self.k12 * self.k23 + self.k12 * self.k32 + self.k21 * self.k32
    }

    pub fn total(&self) -> f64 {
        self.k12 + self.k21 + self.k23 + self.k32
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.k12, self.k21, self.k23, self.k32]
    }

    /// Largest component-wise relative difference.
    pub fn max_rel_diff(&self, other: &RateConstants) -> f64 {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .map(|(a, b)| rel_diff(*a, b))
            .fold(0.0, f64::max)
    }
}

pub(crate) fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Occupation probabilities of the three levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Populations {
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
}

impl Populations {
    /// The state right after a photon emission.
    pub const GROUND: Populations = Populations {
        sigma1: 1.0,
        sigma2: 0.0,
        sigma3: 0.0,
    };

    pub fn new(sigma1: f64, sigma2: f64, sigma3: f64) -> Result<Self> {
        let p = Populations { sigma1, sigma2, sigma3 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let arr = self.as_array();
        if arr.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(
                "populations",
                format!("components {arr:?} must lie in [0, 1]"),
            ));
        }
        let sum: f64 = arr.iter().sum();
        if (sum - 1.0).abs() > POPULATION_SUM_TOL {
            return Err(Error::invalid("populations", format!("components sum to {sum}, not 1")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.sigma1, self.sigma2, self.sigma3]
    }
}

/// Observables of the g² curve plus the stationary excited population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedParams {
    pub g_e: f64,
    #[serde(rename = "k_tm_per_ns")]
    pub k_tm: f64,
    #[serde(rename = "k_1m_per_ns")]
    pub k_1m: f64,
    pub sigma2_inf: f64,
}

impl DerivedParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.g_e.is_finite() && self.k_tm.is_finite() && self.k_1m.is_finite()) {
            return Err(Error::invalid("derived", "non-finite component"));
        }
        if !(self.k_tm > 0.0 && self.k_1m >= 0.0 && self.k_1m < self.k_tm) {
            return Err(Error::invalid(
                "derived",
                format!("need 0 <= k_1m < k_tm, got k_tm={} k_1m={}", self.k_tm, self.k_1m),
            ));
        }
        if !(self.sigma2_inf > 0.0 && self.sigma2_inf < 1.0) {
            return Err(Error::invalid(
                "derived",
                format!("sigma2_inf = {} outside (0, 1)", self.sigma2_inf),
            ));
        }
        Ok(())
    }

    /// Decay rate of the fast (antibunching) term, `(k_tm + k_1m)/2`.
    pub fn fast_rate(&self) -> f64 {
        0.5 * (self.k_tm + self.k_1m)
    }

    /// Decay rate of the slow (bunching) term, `(k_tm − k_1m)/2`.
    pub fn slow_rate(&self) -> f64 {
        0.5 * (self.k_tm - self.k_1m)
    }

    /// `(k_tm² − k_1m²)/4`, equal to [`RateConstants::determinant`].
    pub fn determinant(&self) -> f64 {
        0.25 * (self.k_tm - self.k_1m) * (self.k_tm + self.k_1m)
    }

    pub fn max_rel_diff(&self, other: &DerivedParams) -> f64 {
        [
            rel_diff(self.g_e, other.g_e),
            rel_diff(self.k_tm, other.k_tm),
            rel_diff(self.k_1m, other.k_1m),
            rel_diff(self.sigma2_inf, other.sigma2_inf),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Overall probability that an emitted photon yields a recorded click.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct DetectionEfficiency(f64);

impl DetectionEfficiency {
    pub fn new(eta: f64) -> Result<Self> {
        if eta.is_finite() && eta > 0.0 && eta <= 1.0 {
            Ok(DetectionEfficiency(eta))
        } else {
            Err(Error::invalid("eta", format!("{eta} not in (0, 1]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for DetectionEfficiency {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        DetectionEfficiency::new(v)
    }
}

impl From<DetectionEfficiency> for f64 {
    fn from(e: DetectionEfficiency) -> f64 {
        e.0
    }
}
