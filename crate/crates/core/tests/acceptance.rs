// SPDX-License-Identifier: Apache-2.0
//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//!
//! Every random draw is seeded here, so the sample is the same on each run.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{bin_mean, pearson, reference};
use g2kin::estimation::background_correct;
use g2kin::kinetics::*;
use g2kin::pipeline::*;
use g2kin::sim::*;
use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

const TUPLES: usize = 1000;

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Valid rate tuples, each rate log-uniform on [1e-4, 1] ns⁻¹.
fn tuples(seed: u64) -> Vec<RateConstants> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(TUPLES);
    while out.len() < TUPLES {
        let mut k = [0.0; 4];
        for v in &mut k {
            *v = 10f64.powf(rng.random_range(-4.0..0.0));
        }
        let r = RateConstants::new(k[0], k[1], k[2], k[3]).unwrap();
        if derived_from_rates(&r).is_ok() {
            out.push(r);
        }
    }
    out
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn oracle_equivalence() -> Outcome {
    let mut worst_g2: f64 = 0.0;
    let mut worst_eig: f64 = 0.0;
    let start = Populations::new(1.0, 0.0, 0.0).unwrap();
    for r in tuples(1) {
        let d = derived_from_rates(&r).unwrap();
        let s2 = stationary(&r).unwrap().sigma2;
        let span = 100.0 / (d.k_tm - d.k_1m);
        for i in 0..200 {
            let tau = span * i as f64 / 199.0;
            let ode = populations_at(&r, tau, &start).unwrap().sigma2 / s2;
            worst_g2 = worst_g2.max(rel(g2_analytic(&r, tau).unwrap(), ode));
        }
        let q = Matrix3::new(-r.k12, r.k21, 0.0, r.k12, -(r.k21 + r.k23), r.k32, 0.0, r.k23, -r.k32);
        let mut ev: Vec<f64> = q.complex_eigenvalues().iter().map(|c| c.re).collect();
        ev.sort_by(f64::total_cmp);
        worst_eig = worst_eig
            .max(rel(ev[0], -d.fast_rate()))
            .max(rel(ev[1], -d.slow_rate()));
    }
    check(
        worst_g2 < 1e-9 && worst_eig < 1e-10,
        format!("max rel g2 {worst_g2:.1e} (< 1e-9), max rel eigenvalue {worst_eig:.1e} (< 1e-10)"),
    )
}

fn round_trip() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut over = 0;
    for r in tuples(2) {
        let back = rates_from_derived(&derived_from_rates(&r).unwrap()).unwrap();
        let e = back.max_rel_diff(&r);
        worst = worst.max(e);
        over += usize::from(e >= 1e-9);
    }
    check(
        worst < 1e-9,
        format!("max rel error {worst:.1e} (< 1e-9), {over}/{TUPLES} tuples over"),
    )
}

fn exact_limits() -> Outcome {
    let set = tuples(3);
    let zero = set.iter().all(|r| g2_analytic(r, 0.0).unwrap() == 0.0);

    let mut worst_two: f64 = 0.0;
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    for _ in 0..TUPLES {
        let k: Vec<f64> = (0..3).map(|_| 10f64.powf(rng.random_range(-4.0..0.0))).collect();
        let r = RateConstants::new(k[0], k[1], 0.0, k[2]).unwrap();
        for i in 0..50 {
            let tau = 20.0 * i as f64 / (k[0] + k[1]) / 49.0;
            let want = -(-(k[0] + k[1]) * tau).exp_m1();
            worst_two = worst_two.max((g2_analytic(&r, tau).unwrap() - want).abs());
        }
    }

    // Overshoot below ~1e-12 cannot be told from 1 in f64; such tuples are counted apart.
    let mut agree = 0;
    let mut unresolvable = 0;
    for r in &set {
        let d = derived_from_rates(r).unwrap();
        let (f, s) = (d.fast_rate(), d.slow_rate());
        let mut taus: Vec<f64> = (0..4000).map(|i| 1e-3 / f * 1e9f64.powf(i as f64 / 3999.0)).collect();
        if d.g_e > 1.0 {
            let t_star = ((1.0 + d.g_e) * f / ((d.g_e - 1.0) * s)).ln() / (f - s);
            if 0.5 * (d.g_e - 1.0) * (-s * t_star).exp() * (1.0 - s / f) <= 1e-12 {
                unresolvable += 1;
                continue;
            }
            taus.push(t_star);
        }
        let over = taus.iter().any(|&t| g2_analytic(r, t).unwrap() > 1.0);
        agree += usize::from(over == (d.g_e > 1.0));
    }
    let tested = set.len() - unresolvable;
    check(
        zero && worst_two < 1e-12 && agree == tested,
        format!(
            "g2(0) = 0 on all: {zero}; two-level max abs {worst_two:.1e} (< 1e-12); \
             bunching iff g_e > 1 on {agree}/{tested} ({unresolvable} with overshoot below f64 resolution)"
        ),
    )
}

fn monte_carlo_validity() -> Outcome {
    let eta = DetectionEfficiency::new(REFERENCE_ETA).unwrap();
    let events = simulate_events(&SimConfig::new(reference(), eta, 60.0, 2024)).unwrap();
    let spec = HistogramSpec::symmetric(1000.0, 1.0, CorrelationMode::FullCorrelation);
    let curve = normalize(&correlate(&events, &spec).unwrap())
        .unwrap()
        .rebin_geometric(40.0, 1.1)
        .unwrap();
    let model: Vec<f64> = curve
        .tau_ns
        .iter()
        .zip(&curve.bin_width_ns)
        .map(|(t, w)| {
            bin_mean(
                |x| g2_analytic(&reference(), x.abs()).unwrap(),
                t - 0.5 * w,
                t + 0.5 * w,
            )
        })
        .collect();
    let (chi2, n, worst) = pearson(&curve.g2, &model, &curve.poisson_counts);
    let red = chi2 / n as f64;
    check(
        n >= 100 && (0.7..=1.3).contains(&red) && worst <= 3.0,
        format!("{n} bins (>= 100), reduced chi2 {red:.3} in [0.7, 1.3], worst pull {worst:.2} (<= 3)"),
    )
}

/// Zero-delay value and its error from a quadratic in |τ| over the central bins.
fn dip_at_zero(curve: &G2Curve, half_ns: f64) -> (f64, f64) {
    let idx: Vec<usize> = (0..curve.len()).filter(|&i| curve.tau_ns[i].abs() <= half_ns).collect();
    let x = DMatrix::from_fn(idx.len(), 3, |r, c| curve.tau_ns[idx[r]].abs().powi(c as i32));
    let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| curve.g2[i]));
    let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
    let beta = &xtx_inv * x.transpose() * &y;
    let resid = &y - &x * &beta;
    let s2 = resid.norm_squared() / (idx.len() - 3) as f64;
    (beta[0], (s2 * xtx_inv[(0, 0)]).sqrt())
}

fn background_correction() -> Outcome {
    let rho: f64 = 0.81;
    let eta = DetectionEfficiency::new(REFERENCE_ETA).unwrap();
    let signal = count_rate(&reference(), eta).unwrap() / 2.0;
    let mut cfg = SimConfig::new(reference(), eta, 3600.0, 81);
    cfg.background_rate = signal * (1.0 / rho - 1.0);
    cfg.resolution_ns = 0.01;
    let spec = HistogramSpec::symmetric(4.0, 0.1, CorrelationMode::FullCorrelation);
    // An hour of clicks is streamed rather than held in memory.
    let mut corr = Correlator::new(&spec, cfg.resolution_ns).unwrap();
    for e in stream_events(&cfg).unwrap() {
        corr.push(&e).unwrap();
    }
    let raw = normalize(&corr.finish(&spec, cfg.duration_s)).unwrap();
    let fixed = background_correct(&raw, rho).unwrap();
    let (d_raw, e_raw) = dip_at_zero(&raw, 2.0);
    let (d_fix, e_fix) = dip_at_zero(&fixed, 2.0);
    let floor = 1.0 - rho * rho;
    check(
        (d_raw - floor).abs() < 0.05 && d_fix.abs() < 0.05,
        format!(
            "raw dip {d_raw:.3} ± {e_raw:.3} vs 1 - rho^2 = {floor:.3} (within 0.05), \
             corrected dip {d_fix:.3} ± {e_fix:.3} (|.| < 0.05)"
        ),
    )
}

fn closed_loop(out: &g2kin::Result<PipelineOutput>) -> Outcome {
    let out = match out {
        Ok(o) => o,
        Err(e) => return check(false, format!("pipeline failed: {e}")),
    };
    let r = &out.report;
    let err = |q: &str| r.row(q).map(|row| row.rel_error).unwrap_or(f64::NAN);
    let (eta, k21) = (err("eta"), err("k21_per_ns"));
    let slopes = [
        err("k12_slope_per_ns_per_mw"),
        err("k23_slope_per_ns_per_mw"),
        err("k32_slope_per_ns_per_mw"),
    ];
    let spread = r.calibration.dispersion;
    let m = &r.power_model.model;
    let ordered = m.k23_slope > m.k32_slope;
    check(
        eta.abs() < 0.05 && k21.abs() < 0.03 && spread < 0.02 && slopes.iter().all(|s| s.abs() < 0.10) && ordered,
        format!(
            "eta {:+.2}% (5%), k21 {:+.2}% (3%), k21 spread {:.2}% (< 2%), slopes k12 {:+.2}% k23 {:+.2}% k32 {:+.2}% (10%), \
             k23 slope > k32 slope: {ordered}",
            100.0 * eta,
            100.0 * k21,
            100.0 * spread,
            100.0 * slopes[0],
            100.0 * slopes[1],
            100.0 * slopes[2],
        ),
    )
}

fn saturation_property(config: &PipelineConfig, out: &g2kin::Result<PipelineOutput>) -> Outcome {
    let out = match out {
        Ok(o) => o,
        Err(e) => return check(false, format!("pipeline failed: {e}")),
    };
    let (predicted, two_level) =
        g2kin::estimation::predict_saturation(&config.truth, config.eta, &config.powers).unwrap();
    let mut worst: f64 = 0.0;
    for (p, n) in out.report.points.iter().zip(&predicted) {
        let expected = n * p.duration_s;
        let seen = (p.singles_a + p.singles_b) as f64;
        worst = worst.max((seen - expected).abs() / expected.sqrt());
    }
    let top = config.powers.len() - 1;
    let below = predicted[top] < two_level[top];
    check(
        worst <= 3.0 && below,
        format!(
            "worst |N_sim - N_model| {worst:.2} sigma (<= 3); at {} mW model {:.0}/s below shelving-free {:.0}/s: {below}",
            config.powers[top], predicted[top], two_level[top]
        ),
    )
}

fn main() -> ExitCode {
    let mut all = true;
    let mut report = |name: &str, budget: Duration, run: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = run();
        let took = t.elapsed();
        let pass = o.pass && took < budget;
        all &= pass;
        println!(
            "{} {name}: {} [{:.1} s, budget {} s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    };
    let secs = Duration::from_secs;

    report("oracle equivalence", secs(10), &mut oracle_equivalence);
    report("inversion round trip", secs(30), &mut round_trip);
    report("exact limits", secs(60), &mut exact_limits);
    report("monte-carlo validity", secs(120), &mut monte_carlo_validity);
    report("background correction", secs(300), &mut background_correction);

    let eta = DetectionEfficiency::new(REFERENCE_ETA).unwrap();
    let mut config = PipelineConfig::new(reference_model(), eta, REFERENCE_LADDER_MW.to_vec(), 1.0, 1);
    config.min_signal_counts = 1e8;
    let t = Instant::now();
    let out = run_pipeline(&config);
    let loop_time = t.elapsed();
    report("closed-loop pipeline", secs(900), &mut || {
        let mut o = closed_loop(&out);
        o.pass &= loop_time < secs(900);
        o.detail += &format!(" (loop ran {:.0} s)", loop_time.as_secs_f64());
        o
    });
    report("saturation property", secs(60), &mut || {
        saturation_property(&config, &out)
    });

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
