// SPDX-License-Identifier: Apache-2.0
//! Statistical checks of the photon-stream simulator and correlator.

mod common;

use common::{bin_mean, pearson, reference};
use g2kin::kinetics::{count_rate, g2_analytic, DetectionEfficiency, RateConstants};
use g2kin::sim::io::{read_events_binary, write_events_binary};
use g2kin::sim::*;

fn eta() -> DetectionEfficiency {
    DetectionEfficiency::new(3e-3).unwrap()
}

fn reference_run(duration_s: f64, seed: u64) -> SimConfig {
    SimConfig::new(reference(), eta(), duration_s, seed)
}

fn full(half: f64, width: f64) -> HistogramSpec {
    HistogramSpec::symmetric(half, width, CorrelationMode::FullCorrelation)
}

#[test]
fn reference_singles_follow_count_rate() {
    let events = simulate_events(&reference_run(60.0, 11)).unwrap();
    let (a, b) = events.singles();
    let expected = count_rate(&reference(), eta()).unwrap() * 60.0;
    let total = (a + b) as f64;
    assert!(
        (total - expected).abs() < 3.0 * expected.sqrt(),
        "{total} vs {expected}"
    );
    // Beamsplitter: each side is binomial with p = 1/2.
    assert!((a as f64 - total / 2.0).abs() < 3.0 * (total / 4.0).sqrt());
}

#[test]
fn background_only_is_poisson() {
    let off = RateConstants::new(0.0, 0.0862, 0.01, 0.005).unwrap();
    let mut cfg = SimConfig::new(off, eta(), 10.0, 3);
    cfg.background_rate = 1e3;
    let events = simulate_events(&cfg).unwrap();
    let (a, b) = events.singles();
    for n in [a, b] {
        assert!((n as f64 - 1e4).abs() < 3.0 * 100.0, "{n}");
    }
    // Kolmogorov–Smirnov on detector A's gaps against Exp(1e3 s⁻¹).
    let mut gaps: Vec<f64> = events
        .events
        .iter()
        .filter(|e| e.detector == Detector::A)
        .map(|e| e.ticks as f64 * events.resolution_ns * 1e-9)
        .collect::<Vec<_>>()
        .windows(2)
        .map(|w| w[1] - w[0])
        .collect();
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len() as f64;
    let d = gaps
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let cdf = -(-1e3 * g).exp_m1();
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max);
    // 1 % critical value.
    assert!(d < 1.63 / n.sqrt(), "KS D = {d}");
}

#[test]
fn same_seed_same_bytes() {
    let cfg = reference_run(2.0, 99);
    let mut x = Vec::new();
    let mut y = Vec::new();
    write_events_binary(&simulate_events(&cfg).unwrap(), &mut x).unwrap();
    write_events_binary(&simulate_events(&cfg).unwrap(), &mut y).unwrap();
    assert_eq!(x, y);
    let back = read_events_binary(x.as_slice()).unwrap();
    assert_eq!(back, simulate_events(&cfg).unwrap());
    let other = simulate_events(&reference_run(2.0, 100)).unwrap();
    assert_ne!(back, other);
}

#[test]
fn streaming_matches_materialized() {
    let cfg = reference_run(1.0, 5);
    let streamed: Vec<DetectionEvent> = stream_events(&cfg).unwrap().collect();
    assert_eq!(streamed, simulate_events(&cfg).unwrap().events);
}

#[test]
fn histograms_merge_over_time_slices() {
    let mut cfg = reference_run(5.0, 21);
    cfg.background_rate = 2e4;
    let events = simulate_events(&cfg).unwrap();
    let spec = full(200.0, 1.0);
    let whole = correlate(&events, &spec).unwrap();
    for slices in [1, 3, 8] {
        assert_eq!(correlate_parallel(&events, &spec, slices).unwrap(), whole);
    }
    // Independent acquisitions add bin by bin.
    let other = simulate_events(&reference_run(5.0, 22)).unwrap();
    let mut sum = whole.clone();
    sum.merge(&correlate(&other, &spec).unwrap()).unwrap();
    let second = correlate(&other, &spec).unwrap();
    for i in 0..sum.counts.len() {
        assert_eq!(sum.counts[i], whole.counts[i] + second.counts[i]);
    }
}

#[test]
fn independent_streams_are_flat() {
    let off = RateConstants::new(0.0, 0.0862, 0.01, 0.005).unwrap();
    let mut cfg = SimConfig::new(off, eta(), 20.0, 8);
    cfg.background_rate = 5e4;
    let hist = correlate(&simulate_events(&cfg).unwrap(), &full(100.0, 2.0)).unwrap();
    let curve = normalize(&hist).unwrap();
    let ones = vec![1.0; curve.len()];
    let (chi2, n, worst) = pearson(&curve.g2, &ones, &curve.poisson_counts);
    assert!(worst < 3.5, "worst pull {worst}");
    assert!((chi2 / n as f64 - 1.0).abs() < 0.3, "chi2/n = {}", chi2 / n as f64);
}

#[test]
fn reference_curve_matches_analytic() {
    let cfg = reference_run(60.0, 2024);
    let hist = correlate(&simulate_events(&cfg).unwrap(), &full(1000.0, 1.0)).unwrap();
    let curve = normalize(&hist).unwrap().rebin_geometric(40.0, 1.1).unwrap();
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
    assert!(n >= 100);
    let red = chi2 / n as f64;
    assert!((0.7..=1.3).contains(&red), "reduced chi2 {red}");
    assert!(worst < 4.0, "worst pull {worst}");
    // The deepest bin sits at zero delay, the shoulder bunches.
    let i0 = curve.tau_ns.iter().position(|t| (t - 0.5).abs() < 1e-9).unwrap();
    let lowest = curve.g2.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(curve.g2[i0] <= lowest + 3.0 * curve.sigma[i0]);
    assert!(curve.g2.iter().cloned().fold(0.0, f64::max) > 1.5);
}

#[test]
fn background_dilutes_the_dip() {
    // Per-detector background chosen so that ρ = S/(S+B) = 0.81.
    let rho: f64 = 0.81;
    let signal = count_rate(&reference(), eta()).unwrap() / 2.0;
    let mut cfg = reference_run(60.0, 77);
    cfg.background_rate = signal * (1.0 / rho - 1.0);
    let spec = full(20.0, 0.2);
    let hist = correlate(&simulate_events(&cfg).unwrap(), &spec).unwrap();
    let curve = normalize(&hist).unwrap();
    // The two bins either side of zero against the diluted model.
    for i in [curve.len() / 2 - 1, curve.len() / 2] {
        let (t, w) = (curve.tau_ns[i], curve.bin_width_ns[i]);
        let pure = bin_mean(
            |x| g2_analytic(&reference(), x.abs()).unwrap(),
            t - 0.5 * w,
            t + 0.5 * w,
        );
        let want = 1.0 - rho * rho + rho * rho * pure;
        assert!(
            (curve.g2[i] - want).abs() < 3.0 * curve.sigma[i],
            "bin {t}: {} vs {want}",
            curve.g2[i]
        );
    }
    assert!((1.0 - rho * rho - 0.344).abs() < 1e-3);
}

#[test]
fn jump_and_renewal_samplers_agree() {
    let mut a = reference_run(20.0, 5);
    a.sampler = Sampler::Jump;
    let spec = full(300.0, 3.0);
    let ha = correlate(&simulate_events(&a).unwrap(), &spec).unwrap();
    let hb = correlate(&simulate_events(&reference_run(20.0, 6)).unwrap(), &spec).unwrap();
    // Two-sample χ² on raw counts, scaled by the singles products.
    let la = ha.singles_a as f64 * ha.singles_b as f64;
    let lb = hb.singles_a as f64 * hb.singles_b as f64;
    let mut chi2 = 0.0;
    for (x, y) in ha.counts.iter().zip(&hb.counts) {
        let (x, y) = (*x as f64 / la, *y as f64 / lb);
        let var = x / la + y / lb;
        chi2 += (x - y).powi(2) / var;
    }
    let red = chi2 / ha.counts.len() as f64;
    assert!((0.7..=1.3).contains(&red), "two-sample reduced chi2 {red}");
}
