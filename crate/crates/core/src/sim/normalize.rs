// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::{CoincidenceHistogram, CorrelationMode};
use crate::error::{Error, Result};
use crate::kinetics::PER_NS_TO_PER_S;

/// Start–stop histograms are flagged once the chance of any stop inside the
/// window exceeds this.
pub const START_STOP_BIAS_LIMIT: f64 = 0.01;

/// Half-width, in bins, of the smoothing window for zero-count bins.
const ZERO_BIN_SMOOTHING: usize = 2;

/// Normalized coincidence estimate of g²(τ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct G2Curve {
    /// Bin centers, strictly increasing.
    pub tau_ns: Vec<f64>,
    pub g2: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Per-bin widths; empty when the curve came from a file without them.
    #[serde(default)]
    pub bin_width_ns: Vec<f64>,
    /// Coincidences a Poissonian source would put in each bin (g² = 1 level);
    /// empty when unknown.
    #[serde(default)]
    pub poisson_counts: Vec<f64>,
    /// Signal fraction S/(S+B) applied by background correction, if any.
    #[serde(default)]
    pub rho: Option<f64>,
    /// Probability that a start sees any stop inside the window (start–stop only).
    #[serde(default)]
    pub stop_probability: Option<f64>,
    #[serde(default)]
    pub start_stop_warning: bool,
}

impl G2Curve {
    pub fn from_points(tau_ns: Vec<f64>, g2: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let curve = G2Curve {
            tau_ns,
            g2,
            sigma,
            bin_width_ns: Vec::new(),
            poisson_counts: Vec::new(),
            rho: None,
            stop_probability: None,
            start_stop_warning: false,
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn len(&self) -> usize {
        self.tau_ns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau_ns.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tau_ns.len();
        if self.g2.len() != n || self.sigma.len() != n {
            return Err(Error::invalid("curve", "tau, g2 and sigma lengths differ"));
        }
        for extra in [&self.bin_width_ns, &self.poisson_counts] {
            if !extra.is_empty() && extra.len() != n {
                return Err(Error::invalid("curve", "per-bin metadata length mismatch"));
            }
        }
        if self.tau_ns.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("curve", "tau grid must be strictly increasing"));
        }
        if self.g2.iter().chain(&self.sigma).any(|v| !v.is_finite()) {
            return Err(Error::invalid("curve", "non-finite value"));
        }
        if self.sigma.iter().any(|s| *s <= 0.0) {
            return Err(Error::invalid("curve", "standard errors must be > 0"));
        }
        Ok(())
    }

    /// Merges bins beyond `|τ| > fine_ns` into groups whose width grows
    /// geometrically by `growth`, keeping the fine bins untouched.
    ///
    /// Merged values are Poisson-level weighted means, so raw counts add.
    pub fn rebin_geometric(&self, fine_ns: f64, growth: f64) -> Result<G2Curve> {
        if self.poisson_counts.is_empty() || self.bin_width_ns.is_empty() {
            return Err(Error::invalid("curve", "rebinning needs bin widths and Poisson levels"));
        }
        if !(growth >= 1.0 && fine_ns >= 0.0) {
            return Err(Error::invalid("rebin", "need growth >= 1 and fine_ns >= 0"));
        }
        let n = self.len();
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let fine: Vec<usize> = (0..n).filter(|&i| self.tau_ns[i].abs() <= fine_ns).collect();
        let (f0, f1) = match (fine.first(), fine.last()) {
            (Some(&a), Some(&b)) => (a, b + 1),
            _ => {
                let split = self.tau_ns.partition_point(|t| *t < 0.0);
                (split, split)
            }
        };
        // Negative side grows outward from the fine core.
        let mut left = Vec::new();
        let mut end = f0;
        let mut target = self.bin_width_ns.get(f0.saturating_sub(1)).copied().unwrap_or(0.0) * growth;
        while end > 0 {
            let mut start = end - 1;
            let mut width = self.bin_width_ns[start];
            while start > 0 && width + self.bin_width_ns[start - 1] <= target * (1.0 + 1e-9) {
                start -= 1;
                width += self.bin_width_ns[start];
            }
            left.push((start, end));
            end = start;
            target *= growth;
        }
        left.reverse();
        groups.extend(left);
        groups.extend((f0..f1).map(|i| (i, i + 1)));
        let mut start = f1;
        let mut target = self.bin_width_ns.get(f1).copied().unwrap_or(0.0) * growth;
        while start < n {
            let mut end = start + 1;
            let mut width = self.bin_width_ns[start];
            while end < n && width + self.bin_width_ns[end] <= target * (1.0 + 1e-9) {
                width += self.bin_width_ns[end];
                end += 1;
            }
            groups.push((start, end));
            start = end;
            target *= growth;
        }

        let mut out = G2Curve {
            tau_ns: Vec::with_capacity(groups.len()),
            g2: Vec::with_capacity(groups.len()),
            sigma: Vec::with_capacity(groups.len()),
            bin_width_ns: Vec::with_capacity(groups.len()),
            poisson_counts: Vec::with_capacity(groups.len()),
            ..self.clone()
        };
        for (a, b) in groups {
            let lo = self.tau_ns[a] - 0.5 * self.bin_width_ns[a];
            let hi = self.tau_ns[b - 1] + 0.5 * self.bin_width_ns[b - 1];
            let level: f64 = self.poisson_counts[a..b].iter().sum();
            let g: f64 = (a..b).map(|i| self.poisson_counts[i] * self.g2[i]).sum::<f64>() / level;
            let var: f64 = (a..b)
                .map(|i| (self.poisson_counts[i] * self.sigma[i]).powi(2))
                .sum::<f64>()
                / (level * level);
            out.tau_ns.push(0.5 * (lo + hi));
            out.g2.push(g);
            out.sigma.push(var.sqrt());
            out.bin_width_ns.push(hi - lo);
            out.poisson_counts.push(level);
        }
        out.validate()?;
        Ok(out)
    }
}

/// Divides each bin by the coincidences expected from a Poissonian source of
/// the same singles rates, `N_A·N_B·Δτ/T`.
///
/// Standard errors are `√counts` scaled the same way. A zero-count bin gets
/// the error of its neighbours' mean count, floored at one count.
pub fn normalize(hist: &CoincidenceHistogram) -> Result<G2Curve> {
    if !(hist.duration_s.is_finite() && hist.duration_s > 0.0) {
        return Err(Error::invalid("duration_s", "must be > 0 to normalize"));
    }
    if hist.singles_a == 0 || hist.singles_b == 0 {
        return Err(Error::invalid("singles", "both detectors need counts to normalize"));
    }
    let duration_ns = hist.duration_s * PER_NS_TO_PER_S;
    let level = hist.singles_a as f64 * hist.singles_b as f64 * hist.bin_width_ns / duration_ns;
    let n = hist.counts.len();
    let mut g2 = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for (i, &c) in hist.counts.iter().enumerate() {
        let c = c as f64;
        g2.push(c / level);
        let var_counts = if c > 0.0 {
            c
        } else {
            let lo = i.saturating_sub(ZERO_BIN_SMOOTHING);
            let hi = (i + ZERO_BIN_SMOOTHING + 1).min(n);
            let mean = hist.counts[lo..hi].iter().sum::<u64>() as f64 / (hi - lo) as f64;
            mean.max(1.0)
        };
        sigma.push(var_counts.sqrt() / level);
    }

    let (stop_probability, warning) = match hist.mode {
        CorrelationMode::FullCorrelation => (None, false),
        CorrelationMode::StartStop => {
            let stop_rate = hist.singles_b as f64 / duration_ns;
            let p = -(-stop_rate * (hist.tau_max_ns - hist.tau_min_ns)).exp_m1();
            (Some(p), p > START_STOP_BIAS_LIMIT)
        }
    };

    let curve = G2Curve {
        tau_ns: hist.bin_centers(),
        g2,
        sigma,
        bin_width_ns: vec![hist.bin_width_ns; n],
        poisson_counts: vec![level; n],
        rho: None,
        stop_probability,
        start_stop_warning: warning,
    };
    curve.validate()?;
    Ok(curve)
}
