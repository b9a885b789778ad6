// SPDX-License-Identifier: Apache-2.0

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lm::{self, Evaluation};
use crate::error::{Error, Result};
use crate::sim::G2Curve;

/// Fewest bins a curve may have and still constrain both timescales.
pub const MIN_FIT_BINS: usize = 10;

/// Reweighting passes before giving up on the weights settling.
const REWEIGHT_ROUNDS: usize = 10;
/// Largest parameter step (in fit coordinates) that counts as settled.
const REWEIGHT_TOL: f64 = 1e-7;
/// Guards the model variance of bins that expect almost nothing.
const MIN_EXPECTED_COUNTS: f64 = 1e-6;

/// Three-point Gauss–Legendre nodes and weights on [−½, ½].
const GL_NODES: [f64; 3] = [-0.387_298_334_620_741_7, 0.0, 0.387_298_334_620_741_7];
const GL_WEIGHTS: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];

/// Shape parameters of g²(τ): bunching weight and the summed / split decay
/// rates. The fast and slow rates are `(k_tm ± k_1m)/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct G2Shape {
    pub g_e: f64,
    #[serde(rename = "k_tm_per_ns")]
    pub k_tm: f64,
    #[serde(rename = "k_1m_per_ns")]
    pub k_1m: f64,
}

impl G2Shape {
    pub fn from_decays(g_e: f64, fast: f64, slow: f64) -> Self {
        G2Shape {
            g_e,
            k_tm: fast + slow,
            k_1m: fast - slow,
        }
    }

    pub fn fast_rate(&self) -> f64 {
        0.5 * (self.k_tm + self.k_1m)
    }

    pub fn slow_rate(&self) -> f64 {
        0.5 * (self.k_tm - self.k_1m)
    }

    pub fn eval(&self, tau_ns: f64) -> f64 {
        Terms::new(self.g_e, self.fast_rate(), self.slow_rate(), tau_ns).value
    }

    fn validate(&self) -> Result<()> {
        let ok = self.g_e.is_finite() && self.k_tm.is_finite() && self.k_1m.is_finite();
        if !(ok && self.k_1m >= 0.0 && self.k_1m < self.k_tm) {
            return Err(Error::invalid("initial_guess", "need finite g_e and 0 <= k_1m < k_tm"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    /// Fit an overall scale on g² (normalization slack).
    pub fit_amplitude: bool,
    /// Gaussian prior width on the amplitude around 1.
    pub amplitude_prior_sigma: f64,
    /// Fit a zero-delay shift (timing drift between detectors).
    pub fit_tau_offset: bool,
    #[serde(rename = "tau_offset_prior_sigma_ns")]
    pub tau_offset_prior_sigma: f64,
    /// Average the model over each bin instead of sampling its center.
    pub bin_average: bool,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            fit_amplitude: true,
            amplitude_prior_sigma: 0.02,
            fit_tau_offset: true,
            tau_offset_prior_sigma: 0.5,
            bin_average: true,
            max_iterations: lm::MAX_ITERATIONS,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude_prior_sigma > 0.0 && self.amplitude_prior_sigma.is_finite()) {
            return Err(Error::invalid("amplitude_prior_sigma", "must be > 0"));
        }
        if !(self.tau_offset_prior_sigma > 0.0 && self.tau_offset_prior_sigma.is_finite()) {
            return Err(Error::invalid("tau_offset_prior_sigma_ns", "must be > 0"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be >= 1"));
        }
        Ok(())
    }

    /// Shape parameters only: no nuisance terms.
    pub fn shape_only() -> Self {
        FitOptions {
            fit_amplitude: false,
            fit_tau_offset: false,
            ..FitOptions::default()
        }
    }
}

/// Outcome of a weighted g² fit.
///
/// `covariance` is ordered as `parameter_names`: `g_e`, `k_tm`, `k_1m`, then
/// any enabled nuisance terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub g_e: f64,
    #[serde(rename = "k_tm_per_ns")]
    pub k_tm: f64,
    #[serde(rename = "k_1m_per_ns")]
    pub k_1m: f64,
    pub amplitude: Option<f64>,
    #[serde(rename = "tau_offset_ns")]
    pub tau_offset: Option<f64>,
    pub parameter_names: Vec<String>,
    pub covariance: Vec<Vec<f64>>,
    pub chi2: f64,
    pub dof: usize,
    pub reduced_chi2: f64,
    pub bins_used: usize,
    pub iterations: usize,
    pub converged: bool,
    pub message: String,
}

impl FitResult {
    pub fn shape(&self) -> G2Shape {
        G2Shape {
            g_e: self.g_e,
            k_tm: self.k_tm,
            k_1m: self.k_1m,
        }
    }

    pub fn stderr(&self) -> Vec<f64> {
        (0..self.covariance.len())
            .map(|i| self.covariance[i][i].max(0.0).sqrt())
            .collect()
    }

    /// Covariance of `(g_e, k_tm, k_1m)`.
    pub fn shape_covariance(&self) -> [[f64; 3]; 3] {
        let mut c = [[0.0; 3]; 3];
        for (i, row) in c.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.covariance[i][j];
            }
        }
        c
    }

    /// Fitted model including nuisance terms, averaged over a bin of `width_ns`.
    pub fn model(&self, tau_ns: f64, width_ns: f64) -> f64 {
        let f = self.shape().fast_rate();
        let s = self.shape().slow_rate();
        let amp = self.amplitude.unwrap_or(1.0);
        let t0 = self.tau_offset.unwrap_or(0.0);
        amp * bin_terms(self.g_e, f, s, tau_ns - t0, width_ns, width_ns > 0.0).value
    }

    /// Model values on the curve's own grid, for overlay columns.
    pub fn model_curve(&self, curve: &G2Curve) -> Vec<f64> {
        (0..curve.len())
            .map(|i| self.model(curve.tau_ns[i], curve.bin_width_ns.get(i).copied().unwrap_or(0.0)))
            .collect()
    }
}

/// Value of `1 − A·e^{−f|x|} − B·e^{−s|x|}` and its partials in
/// `(g, ln f, ln s, x)`.
#[derive(Debug, Clone, Copy, Default)]
struct Terms {
    value: f64,
    d_g: f64,
    d_lnf: f64,
    d_lns: f64,
    d_x: f64,
}

impl Terms {
    fn new(g: f64, f: f64, s: f64, x: f64) -> Self {
        let a = 0.5 * (1.0 + g);
        let b = 0.5 * (1.0 - g);
        let ax = x.abs();
        let ef = (-f * ax).exp();
        let es = (-s * ax).exp();
        // Written via expm1 so the dip stays accurate near zero delay.
        let value = -a * (-f * ax).exp_m1() - b * (-s * ax).exp_m1();
        Terms {
            value,
            d_g: 0.5 * (es - ef),
            d_lnf: a * f * ax * ef,
            d_lns: b * s * ax * es,
            d_x: x.signum() * (a * f * ef + b * s * es),
        }
    }

    fn add_scaled(&mut self, o: &Terms, w: f64) {
        self.value += w * o.value;
        self.d_g += w * o.d_g;
        self.d_lnf += w * o.d_lnf;
        self.d_lns += w * o.d_lns;
        self.d_x += w * o.d_x;
    }
}

fn bin_terms(g: f64, f: f64, s: f64, center: f64, width: f64, average: bool) -> Terms {
    if !average || width <= 0.0 {
        return Terms::new(g, f, s, center);
    }
    let mut acc = Terms::default();
    for (node, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
        acc.add_scaled(&Terms::new(g, f, s, center + node * width), w);
    }
    acc
}

struct Problem<'a> {
    tau: Vec<f64>,
    width: Vec<f64>,
    g2: Vec<f64>,
    sigma: Vec<f64>,
    /// Poissonian coincidence level per bin; empty when the curve has none.
    level: Vec<f64>,
    /// Signal fraction a background-corrected curve was divided by.
    rho: f64,
    options: &'a FitOptions,
}

impl Problem<'_> {
    fn n_params(&self) -> usize {
        3 + usize::from(self.options.fit_amplitude) + usize::from(self.options.fit_tau_offset)
    }

    fn unpack(&self, p: &DVector<f64>) -> (f64, f64, f64, f64, f64) {
        let mut k = 3;
        let amp = if self.options.fit_amplitude {
            k += 1;
            p[k - 1]
        } else {
            1.0
        };
        let t0 = if self.options.fit_tau_offset { p[k] } else { 0.0 };
        (p[0], p[1].exp(), p[2].exp(), amp, t0)
    }

    fn eval(&self, p: &DVector<f64>) -> Evaluation {
        let (g, f, s, amp, t0) = self.unpack(p);
        if !(f.is_finite() && s.is_finite() && f > 0.0 && s > 0.0 && g.is_finite()) {
            return Err(Error::Degenerate("rates left the representable range".into()));
        }
        let n = self.tau.len();
        let np = self.n_params();
        let priors = np - 3;
        let mut r = DVector::zeros(n + priors);
        let mut j = DMatrix::zeros(n + priors, np);
        for i in 0..n {
            let t = bin_terms(g, f, s, self.tau[i] - t0, self.width[i], self.options.bin_average);
            let w = 1.0 / self.sigma[i];
            r[i] = (amp * t.value - self.g2[i]) * w;
            j[(i, 0)] = amp * t.d_g * w;
            j[(i, 1)] = amp * t.d_lnf * w;
            j[(i, 2)] = amp * t.d_lns * w;
            let mut k = 3;
            if self.options.fit_amplitude {
                j[(i, k)] = t.value * w;
                k += 1;
            }
            if self.options.fit_tau_offset {
                j[(i, k)] = -amp * t.d_x * w;
            }
        }
        let mut k = 3;
        if self.options.fit_amplitude {
            r[n + k - 3] = (amp - 1.0) / self.options.amplitude_prior_sigma;
            j[(n + k - 3, k)] = 1.0 / self.options.amplitude_prior_sigma;
            k += 1;
        }
        if self.options.fit_tau_offset {
            r[n + k - 3] = t0 / self.options.tau_offset_prior_sigma;
            j[(n + k - 3, k)] = 1.0 / self.options.tau_offset_prior_sigma;
        }
        Ok((r, j))
    }

    /// Swaps the data errors for the model's Poisson errors at `p`.
    fn reweight(&mut self, p: &DVector<f64>) {
        let (g, f, s, amp, t0) = self.unpack(p);
        let r2 = self.rho * self.rho;
        for i in 0..self.tau.len() {
            let m = amp * bin_terms(g, f, s, self.tau[i] - t0, self.width[i], self.options.bin_average).value;
            // Expected raw coincidences, before any background correction.
            let counts = ((1.0 - r2 + r2 * m) * self.level[i]).max(MIN_EXPECTED_COUNTS);
            self.sigma[i] = counts.sqrt() / (self.level[i] * r2);
        }
    }

    fn start(&self, guess: &G2Shape) -> DVector<f64> {
        let mut v = vec![guess.g_e, guess.fast_rate().ln(), guess.slow_rate().max(1e-300).ln()];
        if self.options.fit_amplitude {
            v.push(1.0);
        }
        if self.options.fit_tau_offset {
            v.push(0.0);
        }
        DVector::from_vec(v)
    }
}

/// Starting point read off the curve: dip recovery time for the fast rate,
/// shoulder height for `g_e`, shoulder decay for the slow rate.
pub fn guess_shape(curve: &G2Curve) -> Result<G2Shape> {
    if curve.len() < 3 {
        return Err(Error::invalid("curve", "too few bins for a starting guess"));
    }
    // Fold onto |τ| and smooth over three bins against shot noise.
    let mut pts: Vec<(f64, f64)> = curve
        .tau_ns
        .iter()
        .map(|t| t.abs())
        .zip(curve.g2.iter().copied())
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let smooth: Vec<(f64, f64)> = (0..pts.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 2).min(pts.len());
            (
                pts[i].0,
                pts[lo..hi].iter().map(|p| p.1).sum::<f64>() / (hi - lo) as f64,
            )
        })
        .collect();
    let t_max = smooth.last().unwrap().0.max(1e-9);

    let (peak_at, peak) = smooth
        .iter()
        .copied()
        .fold((0.0, f64::NEG_INFINITY), |acc, p| if p.1 > acc.1 { p } else { acc });
    let rise = 1.0 - (-1.0f64).exp();
    let fast = smooth
        .iter()
        .find(|p| p.1 >= rise.min(0.9 * peak))
        .map(|p| 1.0 / p.0.max(t_max * 1e-3))
        .unwrap_or(4.0 / t_max);

    let excess = peak - 1.0;
    let (g_e, slow) = if excess > 0.02 {
        let target = excess / std::f64::consts::E;
        let slow = smooth
            .iter()
            .filter(|p| p.0 > peak_at)
            .find(|p| p.1 - 1.0 <= target)
            .map(|p| 1.0 / (p.0 - peak_at).max(1e-9))
            .unwrap_or(1.0 / t_max);
        (1.0 + 2.0 * excess, slow)
    } else {
        (1.0, 0.1 * fast)
    };
    let slow = if slow < fast { slow } else { 0.1 * fast };
    Ok(G2Shape::from_decays(g_e, fast, slow))
}

/// Weighted least-squares fit of the two-exponential g² model.
///
/// Bins with `|τ|` under half a bin width are excluded. Starts come from
/// `initial_guess`, if any, and from [`guess_shape`], each with a few
/// rescaled companions; the lowest χ² wins. Curves that carry their Poisson levels are
/// then refit with errors taken from the model instead of the data.
pub fn fit_g2(curve: &G2Curve, initial_guess: Option<G2Shape>, options: &FitOptions) -> Result<FitResult> {
    curve.validate()?;
    options.validate()?;
    let mut problem = Problem {
        tau: Vec::new(),
        width: Vec::new(),
        g2: Vec::new(),
        sigma: Vec::new(),
        level: Vec::new(),
        rho: curve.rho.unwrap_or(1.0),
        options,
    };
    let has_level = curve.poisson_counts.len() == curve.len();
    for i in 0..curve.len() {
        let width = curve.bin_width_ns.get(i).copied().unwrap_or(0.0);
        if curve.tau_ns[i].abs() < 0.5 * width * (1.0 - 1e-9) {
            continue;
        }
        problem.tau.push(curve.tau_ns[i]);
        problem.width.push(width);
        problem.g2.push(curve.g2[i]);
        problem.sigma.push(curve.sigma[i]);
        if has_level {
            problem.level.push(curve.poisson_counts[i]);
        }
    }
    let n = problem.tau.len();
    if n < MIN_FIT_BINS {
        return Err(Error::invalid(
            "curve",
            format!("{n} usable bins, need at least {MIN_FIT_BINS}"),
        ));
    }
    // Flat-model χ² within three standard deviations of its expectation.
    let flat: f64 = problem
        .g2
        .iter()
        .zip(&problem.sigma)
        .map(|(g, s)| ((g - 1.0) / s).powi(2))
        .sum();
    if flat <= n as f64 + 3.0 * (2.0 * n as f64).sqrt() {
        return Err(Error::Unidentifiable("curve is consistent with g² ≡ 1".into()));
    }

    // A given guess is tried alongside the curve's own; both get rescaled
    // companions so one bad basin cannot capture the fit.
    let mut bases = Vec::new();
    if let Some(g) = initial_guess {
        g.validate()?;
        bases.push(g);
    }
    bases.push(guess_shape(curve)?);
    let mut starts = Vec::new();
    for g in bases {
        let (f, s) = (g.fast_rate(), g.slow_rate());
        starts.push(g);
        for (fs, ss) in [(1.0, 3.0), (1.0, 0.3), (3.0, 1.0), (0.3, 1.0)] {
            let (f2, s2) = (f * fs, s * ss);
            if s2 < f2 {
                starts.push(G2Shape::from_decays(g.g_e, f2, s2));
            }
        }
    }

    let mut best: Option<lm::Outcome> = None;
    for start in &starts {
        let Ok(out) = lm::minimize(|p| problem.eval(p), problem.start(start), options.max_iterations) else {
            continue;
        };
        let better = match &best {
            None => true,
            Some(b) => (out.converged && !b.converged) || (out.converged == b.converged && out.cost() < b.cost()),
        };
        if better {
            best = Some(out);
        }
    }
    let mut out = best.ok_or_else(|| Error::Degenerate("no starting point could be evaluated".into()))?;

    // √counts errors pull sparse bins low (Neyman bias). With the Poisson
    // level known, refit under model errors until the weights settle; the
    // fixed point is the Poisson maximum-likelihood estimate.
    if has_level && out.converged {
        for _ in 0..REWEIGHT_ROUNDS {
            problem.reweight(&out.params);
            let next = lm::minimize(|p| problem.eval(p), out.params.clone(), options.max_iterations)?;
            let moved = (&next.params - &out.params).amax();
            out = next;
            if !out.converged || moved < REWEIGHT_TOL {
                break;
            }
        }
        problem.reweight(&out.params);
        out = lm::minimize(|p| problem.eval(p), out.params.clone(), options.max_iterations)?;
    }
    Ok(summarize(&problem, out))
}

fn summarize(problem: &Problem<'_>, out: lm::Outcome) -> FitResult {
    let n = problem.tau.len();
    let np = problem.n_params();
    let (mut g, mut f, mut s, amp, t0) = problem.unpack(&out.params);
    let cov_q = out.covariance();

    // (g, ln f, ln s, …) → (g_e, k_tm, k_1m, …); swapping the decays and
    // negating g leaves the curve unchanged.
    let swap = f < s;
    let mut t = DMatrix::identity(np, np);
    if swap {
        std::mem::swap(&mut f, &mut s);
        g = -g;
        t[(0, 0)] = -1.0;
        t[(1, 1)] = s;
        t[(1, 2)] = f;
        t[(2, 1)] = -s;
        t[(2, 2)] = f;
    } else {
        t[(1, 1)] = f;
        t[(1, 2)] = s;
        t[(2, 1)] = f;
        t[(2, 2)] = -s;
    }
    let cov = &t * cov_q * t.transpose();
    let cov = 0.5 * (&cov + cov.transpose());

    let chi2: f64 = out.residuals.rows(0, n).norm_squared();
    let dof = n.saturating_sub(np);
    let mut names = vec!["g_e".to_string(), "k_tm_per_ns".into(), "k_1m_per_ns".into()];
    if problem.options.fit_amplitude {
        names.push("amplitude".into());
    }
    if problem.options.fit_tau_offset {
        names.push("tau_offset_ns".into());
    }
    FitResult {
        g_e: g,
        k_tm: f + s,
        k_1m: f - s,
        amplitude: problem.options.fit_amplitude.then_some(amp),
        tau_offset: problem.options.fit_tau_offset.then_some(t0),
        parameter_names: names,
        covariance: (0..np).map(|i| (0..np).map(|j| cov[(i, j)]).collect()).collect(),
        chi2,
        dof,
        reduced_chi2: if dof > 0 { chi2 / dof as f64 } else { f64::NAN },
        bins_used: n,
        iterations: out.iterations,
        converged: out.converged,
        message: out.message,
    }
}
