// SPDX-License-Identifier: Apache-2.0
//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use g2kin::kinetics::RateConstants;
use proptest::prelude::*;

pub const REFERENCE: [f64; 4] = [0.05, 0.0862, 0.01, 0.005];

pub fn reference() -> RateConstants {
    let [a, b, c, d] = REFERENCE;
    RateConstants::new(a, b, c, d).unwrap()
}

/// Rate tuples log-uniform in [1e-4, 1] ns⁻¹.
pub fn rates() -> impl Strategy<Value = RateConstants> {
    let r = || (-4.0f64..0.0).prop_map(|e| 10f64.powf(e));
    (r(), r(), r(), r()).prop_map(|(a, b, c, d)| RateConstants::new(a, b, c, d).unwrap())
}

/// Right-hand side of the population equations, written out from the rate
/// diagram rather than taken from the library's generator.
fn rhs(r: &RateConstants, s: [f64; 3]) -> [f64; 3] {
    let [s1, s2, s3] = s;
    [
        -r.k12 * s1 + r.k21 * s2,
        r.k12 * s1 - (r.k21 + r.k23) * s2 + r.k32 * s3,
        r.k23 * s2 - r.k32 * s3,
    ]
}

/// Adaptive Dormand–Prince 5(4) integration of the population equations
/// (autonomous, so the stage times are not needed).
pub fn dormand_prince(r: &RateConstants, init: [f64; 3], t_end: f64, rtol: f64) -> [f64; 3] {
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    const B5: [f64; 7] = [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    let mut t = 0.0;
    let mut y = init;
    let mut h = (t_end / 1000.0).min(0.01 / r.total());
    while t < t_end {
        h = h.min(t_end - t);
        let mut k = [[0.0; 3]; 7];
        for i in 0..7 {
            let mut yi = y;
            for (j, kj) in k.iter().enumerate().take(i) {
                for d in 0..3 {
                    yi[d] += h * A[i][j] * kj[d];
                }
            }
            k[i] = rhs(r, yi);
        }
        let mut y5 = y;
        let mut err: f64 = 0.0;
        for d in 0..3 {
            let mut e = 0.0;
            for i in 0..7 {
                y5[d] += h * B5[i] * k[i][d];
                e += h * (B5[i] - B4[i]) * k[i][d];
            }
            let scale = rtol * y5[d].abs().max(y[d].abs()) + 1e-18;
            err = err.max((e / scale).abs());
        }
        if err <= 1.0 {
            t += h;
            y = y5;
        }
        h *= (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
    }
    y
}

/// Mean of `f` over `[lo, hi]` by composite Simpson with ≤ 0.05 ns panels.
pub fn bin_mean(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let n = (((hi - lo) / 0.05).ceil() as usize).max(2).next_multiple_of(2);
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
    }
    s * h / 3.0 / (hi - lo)
}

/// Pearson comparison of a normalized curve against expected g² values:
/// returns (χ², bins, worst |pull|), with pulls against the expected count.
pub fn pearson(g2: &[f64], expected: &[f64], level: &[f64]) -> (f64, usize, f64) {
    let mut chi2 = 0.0;
    let mut worst: f64 = 0.0;
    for ((g, e), l) in g2.iter().zip(expected).zip(level) {
        let (obs, exp) = (g * l, e * l);
        let pull = (obs - exp) / exp.sqrt();
        chi2 += pull * pull;
        worst = worst.max(pull.abs());
    }
    (chi2, g2.len(), worst)
}
