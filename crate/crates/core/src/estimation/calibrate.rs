// SPDX-License-Identifier: Apache-2.0

//! Detection-efficiency calibration.
//!
//! Each power's g² shape plus its count rate pins the rates once η is known.
//! The true η is the one for which the implied radiative rate k21 is the same
//! at every power, so we minimize the relative spread of k21 over η.
//!
//! The objective depends on η only through `N/η`. Searching over
//! `η / max N` keeps the answer exactly proportional to a uniform rescaling
//! of the count rates.

use serde::{Deserialize, Serialize};

use super::FitResult;
use crate::error::{Error, Result};
use crate::kinetics::{observable_candidates, DetectionEfficiency, RateConstants};
use crate::sim::G2Curve;

pub const MIN_CALIBRATION_POINTS: usize = 3;

/// Grid resolution of the bracketing pass, in points per decade of η.
const GRID_PER_DECADE: usize = 20;
/// Lowest ratio η/N searched, in s.
const RATIO_FLOOR: f64 = 1e-13;
const GOLDEN_ITERATIONS: usize = 200;

/// One pump power's measurement and its analysis products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    #[serde(rename = "power_mw")]
    pub power: f64,
    pub curve: G2Curve,
    #[serde(rename = "brightness_per_s")]
    pub brightness: f64,
    pub fit: FitResult,
    pub rates: Option<RateConstants>,
    /// One-sigma errors on `(k12, k21, k23, k32)`, propagated from the fit.
    #[serde(rename = "rates_stderr_per_ns")]
    pub rates_stderr: Option<[f64; 4]>,
}

impl PowerPoint {
    pub fn new(power: f64, curve: G2Curve, brightness: f64, fit: FitResult) -> Result<Self> {
        if !(power.is_finite() && power > 0.0) {
            return Err(Error::invalid("power_mw", format!("{power} must be > 0")));
        }
        if !(brightness.is_finite() && brightness > 0.0) {
            return Err(Error::invalid("brightness_per_s", format!("{brightness} must be > 0")));
        }
        Ok(PowerPoint {
            power,
            curve,
            brightness,
            fit,
            rates: None,
            rates_stderr: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaCalibration {
    pub eta: DetectionEfficiency,
    #[serde(rename = "power_mw")]
    pub powers: Vec<f64>,
    /// Implied k21 at each power, ns⁻¹.
    #[serde(rename = "k21_per_ns")]
    pub k21: Vec<f64>,
    /// Relative standard deviation of `k21` across powers.
    pub dispersion: f64,
    pub rates: Vec<RateConstants>,
    #[serde(rename = "rates_stderr_per_ns")]
    pub rates_stderr: Vec<[f64; 4]>,
}

impl EtaCalibration {
    /// Copies the calibrated rates into the matching points.
    pub fn fill_rates(&self, points: &mut [PowerPoint]) -> Result<()> {
        if points.len() != self.rates.len() {
            return Err(Error::invalid(
                "points",
                "calibration was made on a different point set",
            ));
        }
        for ((p, r), e) in points.iter_mut().zip(&self.rates).zip(&self.rates_stderr) {
            p.rates = Some(*r);
            p.rates_stderr = Some(*e);
        }
        Ok(())
    }
}

fn rel_spread(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt() / mean
}

/// Picks one candidate per point so that k21 is as uniform as possible.
///
/// Every candidate in turn seeds a reference k21; each point takes its
/// candidate nearest the reference (log scale), then the reference is moved
/// to the selection's mean and the choice repeated once.
fn select_branches(candidates: &[Vec<RateConstants>]) -> Option<(Vec<usize>, f64)> {
    if candidates.iter().any(|c| c.is_empty()) {
        return None;
    }
    let nearest = |reference: f64| -> Vec<usize> {
        candidates
            .iter()
            .map(|c| {
                (0..c.len())
                    .min_by(|&a, &b| {
                        let da = (c[a].k21 / reference).ln().abs();
                        let db = (c[b].k21 / reference).ln().abs();
                        da.total_cmp(&db)
                    })
                    .unwrap()
            })
            .collect()
    };
    let k21_of = |pick: &[usize]| -> Vec<f64> { pick.iter().zip(candidates).map(|(&i, c)| c[i].k21).collect() };

    let mut best: Option<(Vec<usize>, f64)> = None;
    for seed in candidates.iter().flatten() {
        let mut pick = nearest(seed.k21);
        let mean = k21_of(&pick).iter().sum::<f64>() / pick.len() as f64;
        let refined = nearest(mean);
        if rel_spread(&k21_of(&refined)) <= rel_spread(&k21_of(&pick)) {
            pick = refined;
        }
        let spread = rel_spread(&k21_of(&pick));
        if best.as_ref().map_or(true, |b| spread < b.1) {
            best = Some((pick, spread));
        }
    }
    best
}

struct Objective<'a> {
    points: &'a [PowerPoint],
    n_ref: f64,
}

impl Objective<'_> {
    fn eta(&self, ln_ratio: f64) -> f64 {
        ln_ratio.exp() * self.n_ref
    }

    fn candidates(&self, eta: f64) -> Option<Vec<Vec<RateConstants>>> {
        let eta = DetectionEfficiency::new(eta).ok()?;
        self.points
            .iter()
            .map(|p| observable_candidates(p.fit.g_e, p.fit.k_tm, p.fit.k_1m, p.brightness, eta).ok())
            .collect()
    }

    fn value(&self, ln_ratio: f64) -> f64 {
        self.candidates(self.eta(ln_ratio))
            .and_then(|c| select_branches(&c))
            .map_or(f64::INFINITY, |(_, s)| s)
    }
}

/// Finds η by making k21 power independent.
pub fn calibrate_eta(points: &[PowerPoint]) -> Result<EtaCalibration> {
    if points.len() < MIN_CALIBRATION_POINTS {
        return Err(Error::invalid(
            "points",
            format!("{} powers given, need at least {MIN_CALIBRATION_POINTS}", points.len()),
        ));
    }
    if let Some(p) = points.iter().find(|p| !p.fit.converged) {
        return Err(Error::invalid(
            "points",
            format!("fit at {} mW did not converge", p.power),
        ));
    }
    let n_ref = points.iter().map(|p| p.brightness).fold(0.0, f64::max);
    let obj = Objective { points, n_ref };

    // η ≤ 1 caps the ratio at 1/N_max.
    let hi = (1.0 / n_ref).ln();
    let lo = RATIO_FLOOR.ln();
    // Fixed nodes, so rescaling every N only moves the upper cutoff.
    let step = std::f64::consts::LN_10 / GRID_PER_DECADE as f64;
    let grid: Vec<f64> = (0..).map(|i| lo + step * i as f64).take_while(|x| *x <= hi).collect();
    if grid.is_empty() {
        return Err(Error::CalibrationFailed(format!(
            "count rate {n_ref} s⁻¹ is out of range"
        )));
    }
    let steps = grid.len() - 1;
    let values: Vec<f64> = grid.iter().map(|&x| obj.value(x)).collect();
    let (imin, vmin) = values
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    if !vmin.is_finite() {
        return Err(Error::CalibrationFailed(
            "no efficiency in (0, 1] makes every power invertible".into(),
        ));
    }

    // Golden-section refinement inside the neighbouring grid cells.
    let (mut a, mut b) = (grid[imin.saturating_sub(1)], grid[(imin + 1).min(steps)]);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (obj.value(c), obj.value(d));
    for _ in 0..GOLDEN_ITERATIONS {
        if (b - a).abs() <= 1e-12 * (1.0 + a.abs()) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = obj.value(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = obj.value(d);
        }
    }
    let mut x = if fc <= fd { c } else { d };
    if obj.value(x) > vmin {
        x = grid[imin];
    }

    let eta = obj.eta(x);
    let candidates = obj
        .candidates(eta)
        .ok_or_else(|| Error::CalibrationFailed("optimum left the feasible region".into()))?;
    let (pick, dispersion) = select_branches(&candidates)
        .ok_or_else(|| Error::CalibrationFailed("optimum left the feasible region".into()))?;
    let eta = DetectionEfficiency::new(eta)?;
    let rates: Vec<RateConstants> = pick.iter().zip(&candidates).map(|(&i, c)| c[i]).collect();
    let rates_stderr = points.iter().zip(&rates).map(|(p, r)| rate_stderr(p, r, eta)).collect();
    Ok(EtaCalibration {
        eta,
        powers: points.iter().map(|p| p.power).collect(),
        k21: rates.iter().map(|r| r.k21).collect(),
        dispersion,
        rates,
        rates_stderr,
    })
}

/// Propagates the fit covariance of `(g_e, k_tm, k_1m)` to the rates by
/// central differences, following the branch nearest `base`.
pub fn rate_stderr(point: &PowerPoint, base: &RateConstants, eta: DetectionEfficiency) -> [f64; 4] {
    let shape = [point.fit.g_e, point.fit.k_tm, point.fit.k_1m];
    let cov = point.fit.shape_covariance();
    let solve = |s: [f64; 3]| -> Option<[f64; 4]> {
        observable_candidates(s[0], s[1], s[2], point.brightness, eta)
            .ok()?
            .into_iter()
            .min_by(|a, b| a.max_rel_diff(base).total_cmp(&b.max_rel_diff(base)))
            .filter(|r| r.max_rel_diff(base) < 0.1)
            .map(|r| r.as_array())
    };
    let centre = base.as_array();
    let mut jac = [[0.0; 3]; 4];
    for j in 0..3 {
        let h = 1e-6 * shape[j].abs().max(1e-9);
        let mut hi = shape;
        hi[j] += h;
        let mut lo = shape;
        lo[j] -= h;
        let col = match (solve(hi), solve(lo)) {
            (Some(a), Some(b)) => std::array::from_fn(|k| (a[k] - b[k]) / (2.0 * h)),
            (Some(a), None) => std::array::from_fn(|k| (a[k] - centre[k]) / h),
            (None, Some(b)) => std::array::from_fn(|k| (centre[k] - b[k]) / h),
            (None, None) => [f64::NAN; 4],
        };
        for k in 0..4 {
            jac[k][j] = col[k];
        }
    }
    std::array::from_fn(|k| {
        let mut v = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                v += jac[k][a] * cov[a][b] * jac[k][b];
            }
        }
        v.max(0.0).sqrt()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::G2Shape;
    use crate::kinetics::{count_rate, derived_from_rates, rates_at_power, PowerModel};

    pub(crate) fn truth_model() -> PowerModel {
        PowerModel {
            k12_slope: 0.01,
            k12_intercept: 0.0,
            k21: 1.0 / 11.6,
            k23_slope: 0.002,
            k23_intercept: 0.0,
            k32_slope: 0.0004,
            k32_intercept: 0.003,
            p_min: 0.3,
            p_max: 31.0,
        }
    }

    fn exact_point(model: &PowerModel, power: f64, eta: f64) -> PowerPoint {
        let rates = rates_at_power(model, power).unwrap();
        let d = derived_from_rates(&rates).unwrap();
        let shape = G2Shape {
            g_e: d.g_e,
            k_tm: d.k_tm,
            k_1m: d.k_1m,
        };
        let fit = FitResult {
            g_e: shape.g_e,
            k_tm: shape.k_tm,
            k_1m: shape.k_1m,
            amplitude: None,
            tau_offset: None,
            parameter_names: vec!["g_e".into(), "k_tm_per_ns".into(), "k_1m_per_ns".into()],
            covariance: vec![vec![1e-6, 0.0, 0.0], vec![0.0, 1e-8, 0.0], vec![0.0, 0.0, 1e-8]],
            chi2: 0.0,
            dof: 10,
            reduced_chi2: 0.0,
            bins_used: 13,
            iterations: 1,
            converged: true,
            message: String::new(),
        };
        let n = count_rate(&rates, DetectionEfficiency::new(eta).unwrap()).unwrap();
        let curve = G2Curve::from_points(vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        PowerPoint::new(power, curve, n, fit).unwrap()
    }

    const LADDER: [f64; 6] = [0.3, 1.0, 3.0, 6.0, 15.0, 31.0];

    #[test]
    fn exact_points_give_true_eta() {
        let m = truth_model();
        let points: Vec<PowerPoint> = LADDER.iter().map(|&p| exact_point(&m, p, 3e-3)).collect();
        let cal = calibrate_eta(&points).unwrap();
        assert!((cal.eta.get() / 3e-3 - 1.0).abs() < 1e-6, "eta {}", cal.eta.get());
        assert!(cal.dispersion < 1e-6);
        for k21 in &cal.k21 {
            assert!((k21 * 11.6 - 1.0).abs() < 1e-6);
        }
        for (r, &p) in cal.rates.iter().zip(&LADDER) {
            assert!(r.max_rel_diff(&rates_at_power(&m, p).unwrap()) < 1e-5);
        }
        assert!(cal.rates_stderr.iter().flatten().all(|e| e.is_finite()));
    }

    #[test]
    fn doubled_counts_double_eta() {
        let m = truth_model();
        let points: Vec<PowerPoint> = LADDER.iter().map(|&p| exact_point(&m, p, 3e-3)).collect();
        let doubled: Vec<PowerPoint> = points
            .iter()
            .cloned()
            .map(|mut p| {
                p.brightness *= 2.0;
                p
            })
            .collect();
        let a = calibrate_eta(&points).unwrap();
        let b = calibrate_eta(&doubled).unwrap();
        assert_eq!(b.eta.get(), 2.0 * a.eta.get());
        assert_eq!(a.rates, b.rates);
    }

    #[test]
    fn needs_three_converged_points() {
        let m = truth_model();
        let one = vec![exact_point(&m, 3.0, 3e-3)];
        assert!(matches!(calibrate_eta(&one), Err(Error::Invalid { .. })));
        let mut three: Vec<PowerPoint> = [1.0, 3.0, 6.0].iter().map(|&p| exact_point(&m, p, 3e-3)).collect();
        three[1].fit.converged = false;
        assert!(calibrate_eta(&three).is_err());
    }

    #[test]
    fn fill_rates_copies_selection() {
        let m = truth_model();
        let mut points: Vec<PowerPoint> = LADDER.iter().map(|&p| exact_point(&m, p, 3e-3)).collect();
        let cal = calibrate_eta(&points).unwrap();
        cal.fill_rates(&mut points).unwrap();
        assert!(points.iter().all(|p| p.rates.is_some() && p.rates_stderr.is_some()));
        assert!(cal.fill_rates(&mut points[..2]).is_err());
    }

    #[test]
    fn branch_selection_prefers_uniform_k21() {
        let r = |k21| RateConstants::new(0.05, k21, 0.01, 0.005).unwrap();
        let c = vec![vec![r(0.05), r(0.09)], vec![r(0.0901)], vec![r(0.2), r(0.0899)]];
        let (pick, spread) = select_branches(&c).unwrap();
        assert_eq!(pick, vec![1, 0, 1]);
        assert!(spread < 2e-3);
        assert!(select_branches(&[vec![], vec![r(0.1)]]).is_none());
    }
}
