// SPDX-License-Identifier: Apache-2.0

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::{DerivedParams, DetectionEfficiency, Populations, RateConstants, PER_NS_TO_PER_S};
use crate::error::{Error, Result};

/// Generator `Q` of `dσ/dt = Q·σ`. Every column sums to zero.
pub fn generator(rates: &RateConstants) -> Matrix3<f64> {
    let RateConstants { k12, k21, k23, k32 } = *rates;
    Matrix3::new(-k12, k21, 0.0, k12, -k21 - k23, k32, 0.0, k23, -k32)
}

/// Stationary populations (normalized null vector of the generator).
pub fn stationary(rates: &RateConstants) -> Result<Populations> {
    rates.validate()?;
    let RateConstants { k12, k21, k23, k32 } = *rates;
    let det = rates.determinant();
    if det <= 0.0 {
        return Err(Error::Degenerate(format!(
            "stationary state is not unique for {rates:?}"
        )));
    }
    let sigma1 = k21 * k32 / det;
    let sigma2 = k12 * k32 / det;
    let sigma3 = k12 * k23 / det;
    Ok(Populations { sigma1, sigma2, sigma3 })
}

pub fn derived_from_rates(rates: &RateConstants) -> Result<DerivedParams> {
    rates.validate()?;
    let RateConstants { k12, k21, k23, k32 } = *rates;
    if k32 <= 0.0 {
        return Err(Error::invalid("rates", "k32 must be > 0 for g_e to exist"));
    }
    let k_tm = rates.total();
    let split = k12 + k21 - k23 - k32;
    let k_1m = split.hypot(2.0 * (k21 * k23).sqrt());
    if k_1m <= 0.0 {
        return Err(Error::Degenerate("k_1m = 0: the two relaxation rates coincide".into()));
    }
    let g_e = (2.0 * k12 * k23 + k32 * split) / (k_1m * k32);
    let sigma2_inf = stationary(rates)?.sigma2;
    Ok(DerivedParams {
        g_e,
        k_tm,
        k_1m,
        sigma2_inf,
    })
}

/// Two-exponential form of g²; `slow` is computed without the `k_tm − k_1m`
/// cancellation when the rate tuple is at hand.
struct Relaxation {
    fast_weight: f64,
    slow_weight: f64,
    fast: f64,
    slow: f64,
}

impl Relaxation {
    fn from_rates(rates: &RateConstants) -> Result<Self> {
        let d = derived_from_rates(rates)?;
        let fast = d.fast_rate();
        let slow = 2.0 * rates.determinant() / (d.k_tm + d.k_1m);
        Ok(Self::with_rates(d.g_e, fast, slow))
    }

    fn with_rates(g_e: f64, fast: f64, slow: f64) -> Self {
        Relaxation {
            fast_weight: 0.5 * (1.0 + g_e),
            slow_weight: 0.5 * (1.0 - g_e),
            fast,
            slow,
        }
    }

    // Written as Σ w·(1 − e^{−rτ}) so that τ = 0 gives exactly 0.
    fn eval(&self, tau: f64) -> f64 {
        -self.fast_weight * (-self.fast * tau).exp_m1() - self.slow_weight * (-self.slow * tau).exp_m1()
    }
}

/// Closed-form `g²(τ) = σ2(τ)/σ2(∞)` after an emission at τ = 0.
pub fn g2_analytic(rates: &RateConstants, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(Relaxation::from_rates(rates)?.eval(tau))
}

/// Same curve parameterized by the fit observables (`sigma2_inf` unused).
pub fn g2_from_derived(derived: &DerivedParams, tau: f64) -> f64 {
    Relaxation::with_rates(derived.g_e, derived.fast_rate(), derived.slow_rate()).eval(tau.abs())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid("tau", format!("{tau} must be finite and >= 0")))
    }
}

/// Populations at time `tau` from `initial`, by spectral decomposition of the
/// generator (independent of the closed-form g² expressions).
pub fn populations_at(rates: &RateConstants, tau: f64, initial: &Populations) -> Result<Populations> {
    rates.validate()?;
    initial.validate()?;
    check_tau(tau)?;
    if tau == 0.0 {
        return Ok(*initial);
    }
    let p0 = Vector3::from(initial.as_array());
    let p = if rates.k12 > 0.0 && rates.k23 > 0.0 && rates.k32 > 0.0 {
        propagate_reversible(rates, tau, &p0)
    } else {
        (generator(rates) * tau).exp() * p0
    };
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    Ok(Populations {
        sigma1: clamp(p[0]),
        sigma2: clamp(p[1]),
        sigma3: clamp(p[2]),
    })
}

// The chain 1⇄2⇄3 satisfies detailed balance, so D⁻¹·Q·D is symmetric for
// D = diag(1, √(k12/k21), √(k12·k23/(k21·k32))).
fn propagate_reversible(rates: &RateConstants, tau: f64, p0: &Vector3<f64>) -> Vector3<f64> {
    let RateConstants { k12, k21, k23, k32 } = *rates;
    let d = Vector3::new(1.0, (k12 / k21).sqrt(), (k12 * k23 / (k21 * k32)).sqrt());
    let s12 = (k12 * k21).sqrt();
    let s23 = (k23 * k32).sqrt();
    let sym = Matrix3::new(-k12, s12, 0.0, s12, -k21 - k23, s23, 0.0, s23, -k32);
    let eig = SymmetricEigen::new(sym);
    let mut values = eig.eigenvalues;
    // The null eigenvalue is exactly zero; pin it so it cannot drift at long times.
    let imax = values.imax();
    values[imax] = 0.0;

    let y0 = p0.component_div(&d);
    let coeffs = eig.eigenvectors.transpose() * y0;
    let mut y = Vector3::zeros();
    for i in 0..3 {
        y += eig.eigenvectors.column(i) * (coeffs[i] * (values[i] * tau).exp());
    }
    y.component_mul(&d)
}

/// Detected count rate `η·k21·σ2∞`, in s⁻¹.
pub fn count_rate(rates: &RateConstants, eta: DetectionEfficiency) -> Result<f64> {
    rates.validate()?;
    if rates.k12 == 0.0 {
        return Ok(0.0);
    }
    let sigma2 = stationary(rates)?.sigma2;
    Ok(eta.get() * rates.k21 * sigma2 * PER_NS_TO_PER_S)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> RateConstants {
        RateConstants::new(0.05, 0.0862, 0.01, 0.005).unwrap()
    }

    #[test]
    fn generator_columns_sum_to_zero() {
        let q = generator(&reference());
        for c in 0..3 {
            assert!(q.column(c).sum().abs() < 1e-16);
        }
    }

    #[test]
    fn stationary_limits() {
        let two_level = RateConstants::new(0.3, 0.0862, 0.0, 0.02).unwrap();
        let p = stationary(&two_level).unwrap();
        assert!((p.sigma2 - 0.3 / (0.3 + 0.0862)).abs() < 1e-15);
        assert_eq!(p.sigma3, 0.0);

        let dark = RateConstants::new(0.0, 0.0862, 0.01, 0.005).unwrap();
        assert_eq!(stationary(&dark).unwrap(), Populations::GROUND);

        let stuck = RateConstants::new(0.0, 0.0862, 0.01, 0.0).unwrap();
        assert!(matches!(stationary(&stuck), Err(Error::Degenerate(_))));
    }

    #[test]
    fn stationary_reference_value() {
        // Null vector of the generator from an LU solve with σ1 pinned.
        let q = generator(&reference());
        let sub = q.fixed_view::<2, 2>(1, 1).into_owned();
        let rhs = -q.fixed_view::<2, 1>(1, 0).into_owned();
        let x = sub.lu().solve(&rhs).unwrap();
        let norm = 1.0 + x[0] + x[1];
        let oracle = x[0] / norm;
        let got = stationary(&reference()).unwrap().sigma2;
        assert!((got - oracle).abs() < 1e-14);
        assert!((got - 0.2117).abs() < 5e-5);
    }

    #[test]
    fn derived_reference_values() {
        let d = derived_from_rates(&reference()).unwrap();
        assert!((d.k_tm - 0.1512).abs() < 1e-15);
        assert!((d.k_1m - 0.134675).abs() < 5e-6);
        assert!((d.g_e - 2.385).abs() < 5e-4);
    }

    #[test]
    fn derived_two_level_collapse() {
        let r = RateConstants::new(0.2, 0.0862, 0.0, 0.03).unwrap();
        let d = derived_from_rates(&r).unwrap();
        assert!((d.k_1m - (0.2 + 0.0862 - 0.03)).abs() < 1e-15);
        assert!((d.g_e - 1.0).abs() < 1e-15);
    }

    #[test]
    fn derived_rejects_corners() {
        let no_return = RateConstants::new(0.05, 0.0862, 0.01, 0.0).unwrap();
        assert!(derived_from_rates(&no_return).is_err());
        // k23 = 0 and k12 + k21 = k32 makes both eigenvalues equal.
        let equal = RateConstants::new(0.05, 0.05, 0.0, 0.1).unwrap();
        assert!(matches!(derived_from_rates(&equal), Err(Error::Degenerate(_))));
    }

    #[test]
    fn g2_endpoints() {
        let r = reference();
        assert_eq!(g2_analytic(&r, 0.0).unwrap(), 0.0);
        assert!((g2_analytic(&r, 1e5).unwrap() - 1.0).abs() < 1e-14);
        assert!(g2_analytic(&r, -1.0).is_err());
    }

    #[test]
    fn g2_reference_shape() {
        let r = reference();
        let d = derived_from_rates(&r).unwrap();
        assert!((d.slow_rate() - 0.00826).abs() < 5e-6);
        let (tau_peak, peak) = (1..2000)
            .map(|i| {
                let t = i as f64 * 0.1;
                (t, g2_analytic(&r, t).unwrap())
            })
            .fold((0.0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        assert!(peak > 1.0);
        assert!((10.0..100.0).contains(&tau_peak), "peak at {tau_peak}");
    }

    #[test]
    fn populations_identity_and_relaxation() {
        let r = reference();
        let start = Populations::new(0.2, 0.5, 0.3).unwrap();
        assert_eq!(populations_at(&r, 0.0, &start).unwrap(), start);
        let d = derived_from_rates(&r).unwrap();
        let late = populations_at(&r, 50.0 / (d.k_tm - d.k_1m), &start).unwrap();
        let st = stationary(&r).unwrap();
        for (a, b) in late.as_array().iter().zip(st.as_array()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn populations_without_reversible_structure() {
        // k23 = 0 and k12 = 0 fall back to the dense matrix exponential.
        for r in [
            RateConstants::new(0.05, 0.0862, 0.0, 0.005).unwrap(),
            RateConstants::new(0.0, 0.0862, 0.01, 0.005).unwrap(),
            RateConstants::new(0.05, 0.0862, 0.01, 0.0).unwrap(),
        ] {
            let start = Populations::new(0.1, 0.6, 0.3).unwrap();
            for tau in [0.5, 10.0, 1e3] {
                let p = populations_at(&r, tau, &start).unwrap();
                let sum: f64 = p.as_array().iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "{r:?} {tau} {sum}");
            }
        }
    }

    #[test]
    fn count_rate_values() {
        let eta = DetectionEfficiency::new(3e-3).unwrap();
        let n = count_rate(&reference(), eta).unwrap();
        assert!((n / 5.47e4 - 1.0).abs() < 2e-3, "{n}");

        let one = DetectionEfficiency::new(1.0).unwrap();
        let r = RateConstants::new(0.2, 0.0862, 0.0, 0.01).unwrap();
        let expected = 0.0862 * 0.2 / (0.2 + 0.0862) * 1e9;
        assert!((count_rate(&r, one).unwrap() / expected - 1.0).abs() < 1e-14);

        let off = RateConstants::new(0.0, 0.0862, 0.01, 0.005).unwrap();
        assert_eq!(count_rate(&off, eta).unwrap(), 0.0);
    }
}
