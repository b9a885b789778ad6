// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::{stationary, DetectionEfficiency, RateConstants, PER_NS_TO_PER_S};
use crate::error::{Error, Result};

/// Linear pump-power dependence of the transition rates.
///
/// Slopes are in ns⁻¹·mW⁻¹, intercepts and `k21` in ns⁻¹, powers in mW.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerModel {
    #[serde(rename = "k12_slope_per_ns_per_mw")]
    pub k12_slope: f64,
    #[serde(rename = "k12_intercept_per_ns", default)]
    pub k12_intercept: f64,
    #[serde(rename = "k21_per_ns")]
    pub k21: f64,
    #[serde(rename = "k23_slope_per_ns_per_mw")]
    pub k23_slope: f64,
    #[serde(rename = "k23_intercept_per_ns", default)]
    pub k23_intercept: f64,
    #[serde(rename = "k32_slope_per_ns_per_mw")]
    pub k32_slope: f64,
    #[serde(rename = "k32_intercept_per_ns", default)]
    pub k32_intercept: f64,
    #[serde(rename = "p_min_mw")]
    pub p_min: f64,
    #[serde(rename = "p_max_mw")]
    pub p_max: f64,
}

impl PowerModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.k12_slope,
            self.k12_intercept,
            self.k21,
            self.k23_slope,
            self.k23_intercept,
            self.k32_slope,
            self.k32_intercept,
            self.p_min,
            self.p_max,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("power_model", "non-finite coefficient"));
        }
        if self.k21 <= 0.0 {
            return Err(Error::invalid("power_model", "k21 must be > 0"));
        }
        if !(self.p_min >= 0.0 && self.p_max >= self.p_min) {
            return Err(Error::invalid(
                "power_model",
                format!("bad validity range [{}, {}]", self.p_min, self.p_max),
            ));
        }
        // Linear functions are extremal at the range ends.
        for p in [self.p_min, self.p_max] {
            let [k12, k23, k32] = self.linear_rates(p);
            if k12 < 0.0 || k23 < 0.0 || k32 < 0.0 {
                return Err(Error::invalid("power_model", format!("negative rate at {p} mW")));
            }
        }
        Ok(())
    }

    fn linear_rates(&self, p: f64) -> [f64; 3] {
        [
            self.k12_slope * p + self.k12_intercept,
            self.k23_slope * p + self.k23_intercept,
            self.k32_slope * p + self.k32_intercept,
        ]
    }

    /// The same model with the trap switched off (`k23 = 0`).
    pub fn without_shelving(&self) -> PowerModel {
        PowerModel {
            k23_slope: 0.0,
            k23_intercept: 0.0,
            ..*self
        }
    }
}

pub fn rates_at_power(model: &PowerModel, power_mw: f64) -> Result<RateConstants> {
    if !(power_mw.is_finite() && power_mw >= model.p_min && power_mw <= model.p_max) {
        return Err(Error::PowerOutOfRange {
            power_mw,
            reason: format!("validity range is [{}, {}] mW", model.p_min, model.p_max),
        });
    }
    let [k12, k23, k32] = model.linear_rates(power_mw);
    RateConstants::new(k12, model.k21, k23, k32).map_err(|e| Error::PowerOutOfRange {
        power_mw,
        reason: e.to_string(),
    })
}

/// Two-level saturation `η·k21·k12/(k12 + k21)` in s⁻¹, the shelving-free reference.
pub fn two_level_count_rate(model: &PowerModel, power_mw: f64, eta: DetectionEfficiency) -> Result<f64> {
    let r = rates_at_power(&model.without_shelving(), power_mw)?;
    Ok(eta.get() * r.k21 * r.k12 / (r.k12 + r.k21) * PER_NS_TO_PER_S)
}

/// Model count rate `η·k21·σ2∞(P)` in s⁻¹.
pub fn count_rate_at_power(model: &PowerModel, power_mw: f64, eta: DetectionEfficiency) -> Result<f64> {
    let r = rates_at_power(model, power_mw)?;
    if r.k12 == 0.0 {
        return Ok(0.0);
    }
    if r.k23 == 0.0 {
        return two_level_count_rate(model, power_mw, eta);
    }
    Ok(eta.get() * r.k21 * stationary(&r)?.sigma2 * PER_NS_TO_PER_S)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shelving() -> PowerModel {
        PowerModel {
            k12_slope: 0.01,
            k12_intercept: 0.0,
            k21: 1.0 / 11.6,
            k23_slope: 0.002,
            k23_intercept: 0.0,
            k32_slope: 0.0004,
            k32_intercept: 0.003,
            p_min: 0.0,
            p_max: 40.0,
        }
    }

    #[test]
    fn zero_power_zero_intercepts() {
        let m = PowerModel {
            k32_intercept: 0.0,
            ..shelving()
        };
        let r = rates_at_power(&m, 0.0).unwrap();
        assert_eq!(r.as_array(), [0.0, 1.0 / 11.6, 0.0, 0.0]);
    }

    #[test]
    fn k21_constant_and_ordering() {
        let m = shelving();
        let mut prev = -1.0;
        for i in 0..=50 {
            let p = 0.3 + (31.0 - 0.3) * i as f64 / 50.0;
            let r = rates_at_power(&m, p).unwrap();
            assert_eq!(r.k21, 1.0 / 11.6);
            assert!((r.k21 - 0.0862).abs() < 1e-4);
            assert!(r.k12 > prev);
            prev = r.k12;
        }
        let top = rates_at_power(&m, 31.0).unwrap();
        assert!(top.k23 > top.k32);
    }

    #[test]
    fn out_of_range() {
        let m = shelving();
        assert!(matches!(rates_at_power(&m, 41.0), Err(Error::PowerOutOfRange { .. })));
        let neg = PowerModel {
            k23_intercept: -0.01,
            ..shelving()
        };
        assert!(neg.validate().is_err());
        assert!(matches!(rates_at_power(&neg, 1.0), Err(Error::PowerOutOfRange { .. })));
    }

    #[test]
    fn shelving_depresses_saturation() {
        let m = shelving();
        let eta = DetectionEfficiency::new(3e-3).unwrap();
        let with = count_rate_at_power(&m, 31.0, eta).unwrap();
        let without = two_level_count_rate(&m, 31.0, eta).unwrap();
        assert!(with < without);
    }
}
