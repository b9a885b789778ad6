// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::PowerPoint;
use crate::error::{Error, Result};
use crate::kinetics::PowerModel;

/// Straight-line fit `y = intercept + slope·P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    #[serde(rename = "slope_per_ns_per_mw")]
    pub slope: f64,
    #[serde(rename = "intercept_per_ns")]
    pub intercept: f64,
    #[serde(rename = "slope_stderr_per_ns_per_mw")]
    pub slope_stderr: f64,
    #[serde(rename = "intercept_stderr_per_ns")]
    pub intercept_stderr: f64,
    #[serde(rename = "residuals_per_ns")]
    pub residuals: Vec<f64>,
    pub reduced_chi2: f64,
    /// False when point errors were unusable and all points weighed equally.
    pub weighted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerModelFit {
    pub model: PowerModel,
    pub k12: LinearFit,
    pub k23: LinearFit,
    pub k32: LinearFit,
    #[serde(rename = "k21_mean_per_ns")]
    pub k21_mean: f64,
    #[serde(rename = "k21_stderr_per_ns")]
    pub k21_stderr: f64,
    #[serde(rename = "k21_residuals_per_ns")]
    pub k21_residuals: Vec<f64>,
}

/// Usable inverse-variance weights, or `None` to fall back to equal weights.
fn weights(errors: &[f64]) -> Option<Vec<f64>> {
    errors
        .iter()
        .map(|e| (e.is_finite() && *e > 0.0).then(|| 1.0 / (e * e)))
        .collect()
}

/// Error scale: standard errors grow with the residual scatter when the points
/// scatter more than their own error bars allow, never shrink.
fn scatter_scale(reduced_chi2: f64, weighted: bool) -> f64 {
    if !weighted {
        return reduced_chi2.sqrt();
    }
    if reduced_chi2.is_finite() {
        reduced_chi2.max(1.0).sqrt()
    } else {
        1.0
    }
}

pub fn linear_fit(x: &[f64], y: &[f64], errors: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n < 2 || y.len() != n || errors.len() != n {
        return Err(Error::invalid("regression", "need >= 2 points of matching length"));
    }
    let (w, weighted) = match weights(errors) {
        Some(w) => (w, true),
        None => (vec![1.0; n], false),
    };
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(&w).map(|(x, w)| w * x).sum::<f64>() / sw;
    let my = y.iter().zip(&w).map(|(y, w)| w * y).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(&w).map(|(x, w)| w * (x - mx).powi(2)).sum();
    if sxx.is_nan() || sxx <= 1e-12 * sw * (mx * mx).max(1.0) {
        return Err(Error::RankDeficient("all powers are equal".into()));
    }
    let sxy: f64 = (0..n).map(|i| w[i] * (x[i] - mx) * (y[i] - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = (0..n).map(|i| y[i] - intercept - slope * x[i]).collect();
    let chi2: f64 = (0..n).map(|i| w[i] * residuals[i].powi(2)).sum();
    let reduced_chi2 = if n > 2 { chi2 / (n - 2) as f64 } else { f64::NAN };
    let scale = if n > 2 {
        scatter_scale(reduced_chi2, weighted)
    } else {
        1.0
    };
    Ok(LinearFit {
        slope,
        intercept,
        slope_stderr: scale * (1.0 / sxx).sqrt(),
        intercept_stderr: scale * (1.0 / sw + mx * mx / sxx).sqrt(),
        residuals,
        reduced_chi2,
        weighted,
    })
}

/// Linear regression of k12, k23 and k32 against power; k21 becomes the
/// weighted mean. The model's validity range is the span of the powers.
pub fn extract_power_model(points: &[PowerPoint]) -> Result<PowerModelFit> {
    if points.len() < 3 {
        return Err(Error::invalid("points", "need at least 3 powers"));
    }
    let mut rates = Vec::with_capacity(points.len());
    for p in points {
        let r = p
            .rates
            .ok_or_else(|| Error::invalid("points", format!("rates at {} mW not filled", p.power)))?;
        rates.push((r.as_array(), p.rates_stderr.unwrap_or([f64::NAN; 4])));
    }
    let x: Vec<f64> = points.iter().map(|p| p.power).collect();
    let series = |k: usize| -> (Vec<f64>, Vec<f64>) { rates.iter().map(|(r, e)| (r[k], e[k])).unzip() };

    let (y, e) = series(0);
    let k12 = linear_fit(&x, &y, &e)?;
    let (y, e) = series(2);
    let k23 = linear_fit(&x, &y, &e)?;
    let (y, e) = series(3);
    let k32 = linear_fit(&x, &y, &e)?;

    let (k21s, e) = series(1);
    let (w, weighted) = match weights(&e) {
        Some(w) => (w, true),
        None => (vec![1.0; k21s.len()], false),
    };
    let sw: f64 = w.iter().sum();
    let k21_mean = k21s.iter().zip(&w).map(|(k, w)| k * w).sum::<f64>() / sw;
    let k21_residuals: Vec<f64> = k21s.iter().map(|k| k - k21_mean).collect();
    let chi2: f64 = k21_residuals.iter().zip(&w).map(|(r, w)| w * r * r).sum();
    let red = chi2 / (k21s.len() - 1) as f64;
    let k21_stderr = scatter_scale(red, weighted) * (1.0 / sw).sqrt();

    let p_min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let p_max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(PowerModelFit {
        model: PowerModel {
            k12_slope: k12.slope,
            k12_intercept: k12.intercept,
            k21: k21_mean,
            k23_slope: k23.slope,
            k23_intercept: k23.intercept,
            k32_slope: k32.slope,
            k32_intercept: k32.intercept,
            p_min,
            p_max,
        },
        k12,
        k23,
        k32,
        k21_mean,
        k21_stderr,
        k21_residuals,
    })
}
