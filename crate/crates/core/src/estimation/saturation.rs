// SPDX-License-Identifier: Apache-2.0

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::lm;
use crate::error::{Error, Result};
use crate::kinetics::{count_rate_at_power, two_level_count_rate, DetectionEfficiency, PowerModel};

pub const MIN_SATURATION_POINTS: usize = 4;

/// Coefficients of a [`PowerModel`] that a saturation fit may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaturationParam {
    K12Slope,
    K12Intercept,
    K21,
    K23Slope,
    K23Intercept,
    K32Slope,
    K32Intercept,
}

impl SaturationParam {
    fn get(self, m: &PowerModel) -> f64 {
        match self {
            SaturationParam::K12Slope => m.k12_slope,
            SaturationParam::K12Intercept => m.k12_intercept,
            SaturationParam::K21 => m.k21,
            SaturationParam::K23Slope => m.k23_slope,
            SaturationParam::K23Intercept => m.k23_intercept,
            SaturationParam::K32Slope => m.k32_slope,
            SaturationParam::K32Intercept => m.k32_intercept,
        }
    }

    fn set(self, m: &mut PowerModel, v: f64) {
        match self {
            SaturationParam::K12Slope => m.k12_slope = v,
            SaturationParam::K12Intercept => m.k12_intercept = v,
            SaturationParam::K21 => m.k21 = v,
            SaturationParam::K23Slope => m.k23_slope = v,
            SaturationParam::K23Intercept => m.k23_intercept = v,
            SaturationParam::K32Slope => m.k32_slope = v,
            SaturationParam::K32Intercept => m.k32_intercept = v,
        }
    }

    /// Default free set: the three slopes, or only the pump slope when the
    /// seed has no shelving (the trap rates are then invisible).
    ///
    /// `N(P)` is unchanged when every rate and `1/η` scale together, so
    /// `k21` stays fixed unless asked for explicitly.
    pub fn default_free(seed: &PowerModel) -> Vec<SaturationParam> {
        if seed.k23_slope == 0.0 && seed.k23_intercept == 0.0 {
            vec![SaturationParam::K12Slope]
        } else {
            vec![
                SaturationParam::K12Slope,
                SaturationParam::K23Slope,
                SaturationParam::K32Slope,
            ]
        }
    }
}

/// A measured count rate; `sigma_per_s` defaults to `√N` (one second of counting).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaturationPoint {
    #[serde(rename = "power_mw")]
    pub power: f64,
    #[serde(rename = "counts_per_s")]
    pub counts: f64,
    #[serde(rename = "sigma_per_s", default)]
    pub sigma: Option<f64>,
}

impl SaturationPoint {
    fn sigma(&self) -> f64 {
        self.sigma.unwrap_or_else(|| self.counts.max(1.0).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationFit {
    pub model: PowerModel,
    pub free_parameters: Vec<SaturationParam>,
    pub stderr: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    #[serde(rename = "power_mw")]
    pub powers: Vec<f64>,
    #[serde(rename = "measured_per_s")]
    pub measured: Vec<f64>,
    #[serde(rename = "predicted_per_s")]
    pub predicted: Vec<f64>,
    /// Shelving-free saturation at the same powers (`k23 = 0`).
    #[serde(rename = "two_level_reference_per_s")]
    pub reference: Vec<f64>,
    /// Euclidean norm of the weighted residuals.
    pub residual_norm: f64,
    pub reduced_chi2: f64,
    pub iterations: usize,
    pub converged: bool,
    pub message: String,
}

/// Model count rate and shelving-free reference on a list of powers.
pub fn predict_saturation(
    model: &PowerModel,
    eta: DetectionEfficiency,
    powers: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut n = Vec::with_capacity(powers.len());
    let mut r = Vec::with_capacity(powers.len());
    for &p in powers {
        n.push(count_rate_at_power(model, p, eta)?);
        r.push(two_level_count_rate(model, p, eta)?);
    }
    Ok((n, r))
}

/// Least-squares fit of `N(P) = η·k21·σ2∞(P)` over the chosen coefficients,
/// holding the rest at `seed`.
pub fn fit_saturation(
    data: &[SaturationPoint],
    seed: &PowerModel,
    eta: DetectionEfficiency,
    free: Option<&[SaturationParam]>,
) -> Result<SaturationFit> {
    if data.len() < MIN_SATURATION_POINTS {
        return Err(Error::invalid(
            "saturation",
            format!("{} points given, need at least {MIN_SATURATION_POINTS}", data.len()),
        ));
    }
    for d in data {
        if !(d.power.is_finite() && d.power >= 0.0 && d.counts.is_finite() && d.counts >= 0.0) {
            return Err(Error::invalid(
                "saturation",
                format!("bad point ({}, {})", d.power, d.counts),
            ));
        }
        if !(d.sigma() > 0.0 && d.sigma().is_finite()) {
            return Err(Error::invalid("sigma_per_s", "must be > 0"));
        }
    }
    let free: Vec<SaturationParam> = match free {
        Some(f) if !f.is_empty() => f.to_vec(),
        Some(_) => return Err(Error::invalid("free_parameters", "empty")),
        None => SaturationParam::default_free(seed),
    };
    if free.len() >= data.len() {
        return Err(Error::invalid(
            "free_parameters",
            "more free coefficients than data points",
        ));
    }

    let mut base = *seed;
    base.p_min = data.iter().map(|d| d.power).fold(seed.p_min, f64::min);
    base.p_max = data.iter().map(|d| d.power).fold(seed.p_max, f64::max);
    base.validate()?;

    let build = |p: &DVector<f64>| -> PowerModel {
        let mut m = base;
        for (k, param) in free.iter().enumerate() {
            param.set(&mut m, p[k]);
        }
        m
    };
    let residuals = |p: &DVector<f64>| -> Result<DVector<f64>> {
        let m = build(p);
        m.validate()?;
        let mut r = DVector::zeros(data.len());
        for (i, d) in data.iter().enumerate() {
            r[i] = (count_rate_at_power(&m, d.power, eta)? - d.counts) / d.sigma();
        }
        Ok(r)
    };
    let eval = |p: &DVector<f64>| -> lm::Evaluation {
        let r = residuals(p)?;
        let j = lm::numeric_jacobian(&residuals, p, &r)?;
        Ok((r, j))
    };
    let start = DVector::from_iterator(free.len(), free.iter().map(|f| f.get(&base)));
    let out = lm::minimize(eval, start, lm::MAX_ITERATIONS)?;

    let model = build(&out.params);
    let cov = out.covariance();
    let powers: Vec<f64> = data.iter().map(|d| d.power).collect();
    let (predicted, reference) = predict_saturation(&model, eta, &powers)?;
    let chi2 = out.cost();
    let dof = data.len() - free.len();
    Ok(SaturationFit {
        model,
        stderr: (0..free.len()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
        covariance: (0..free.len())
            .map(|i| (0..free.len()).map(|j| cov[(i, j)]).collect())
            .collect(),
        free_parameters: free,
        powers,
        measured: data.iter().map(|d| d.counts).collect(),
        predicted,
        reference,
        residual_norm: chi2.sqrt(),
        reduced_chi2: chi2 / dof as f64,
        iterations: out.iterations,
        converged: out.converged,
        message: out.message,
    })
}
