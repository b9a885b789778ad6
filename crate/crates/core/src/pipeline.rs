// SPDX-License-Identifier: Apache-2.0

//! Closed-loop experiment: simulate a power ladder from a known
//! [`PowerModel`], then recover η, the per-power rates, the linear model and
//! the saturation curve from the click streams alone.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{
    background_correct, calibrate_eta, extract_power_model, fit_g2, fit_saturation, EtaCalibration, FitOptions,
    PowerModelFit, PowerPoint, SaturationFit, SaturationPoint,
};
use crate::kinetics::{count_rate, rates_at_power, DetectionEfficiency, PowerModel, RateConstants};
use crate::sim::{normalize, stream_events, CorrelationMode, Correlator, G2Curve, HistogramSpec, SimConfig};

pub const MIN_LADDER: usize = 3;

/// Pump powers of the reference ladder, mW.
pub const REFERENCE_LADDER_MW: [f64; 6] = [0.3, 1.0, 3.0, 6.0, 15.0, 31.0];
pub const REFERENCE_ETA: f64 = 3e-3;

/// Reference emitter: a 11.6 ns radiative lifetime, saturation near 0.6 mW
/// and shelving that grows faster with power than deshelving.
///
/// The slopes keep every ladder point away from the power at which the two
/// physical inversion branches merge, where k21 is not identifiable.
pub fn reference_model() -> PowerModel {
    PowerModel {
        k12_slope: 0.15,
        k12_intercept: 0.0,
        k21: 1.0 / 11.6,
        k23_slope: 0.001,
        k23_intercept: 0.003,
        k32_slope: 0.0003,
        k32_intercept: 0.002,
        p_min: REFERENCE_LADDER_MW[0],
        p_max: REFERENCE_LADDER_MW[5],
    }
}

/// Rebinning of the raw histogram before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rebin {
    /// Bins with `|τ|` up to this keep their native width.
    pub fine_ns: f64,
    /// Width ratio between successive merged bins.
    pub growth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub truth: PowerModel,
    pub eta: DetectionEfficiency,
    #[serde(rename = "powers_mw")]
    pub powers: Vec<f64>,
    /// Acquisition time per power, before `min_signal_counts` stretching.
    pub duration_s: f64,
    /// Lengthens dim points until their expected signal clicks reach this.
    #[serde(default)]
    pub min_signal_counts: f64,
    #[serde(default, rename = "background_rate_per_s")]
    pub background_rate: f64,
    #[serde(default = "default_resolution", rename = "timestamp_resolution_ns")]
    pub resolution_ns: f64,
    #[serde(default = "default_histogram")]
    pub histogram: HistogramSpec,
    #[serde(default = "default_rebin")]
    pub rebin: Option<Rebin>,
    #[serde(default)]
    pub fit: FitOptions,
    pub seed: u64,
}

/// Fine enough to resolve a sub-ns antibunching dip at the top of the ladder.
fn default_resolution() -> f64 {
    0.01
}

fn default_histogram() -> HistogramSpec {
    HistogramSpec::symmetric(1000.0, 1.0, CorrelationMode::FullCorrelation)
}

fn default_rebin() -> Option<Rebin> {
    Some(Rebin {
        fine_ns: 40.0,
        growth: 1.1,
    })
}

impl PipelineConfig {
    pub fn new(truth: PowerModel, eta: DetectionEfficiency, powers: Vec<f64>, duration_s: f64, seed: u64) -> Self {
        PipelineConfig {
            truth,
            eta,
            powers,
            duration_s,
            min_signal_counts: 0.0,
            background_rate: 0.0,
            resolution_ns: default_resolution(),
            histogram: default_histogram(),
            rebin: default_rebin(),
            fit: FitOptions::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        if self.powers.len() < MIN_LADDER {
            return Err(Error::invalid(
                "powers_mw",
                format!("{} powers given, need at least {MIN_LADDER}", self.powers.len()),
            ));
        }
        if self.powers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("powers_mw", "must be strictly increasing"));
        }
        for &p in &self.powers {
            rates_at_power(&self.truth, p)?;
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::invalid("duration_s", "must be > 0"));
        }
        if !(self.min_signal_counts.is_finite() && self.min_signal_counts >= 0.0) {
            return Err(Error::invalid("min_signal_counts", "must be >= 0"));
        }
        if !(self.background_rate.is_finite() && self.background_rate >= 0.0) {
            return Err(Error::invalid("background_rate_per_s", "must be >= 0"));
        }
        if !(self.resolution_ns.is_finite() && self.resolution_ns > 0.0) {
            return Err(Error::invalid("timestamp_resolution_ns", "must be > 0"));
        }
        self.histogram.n_bins()?;
        if self.histogram.mode != CorrelationMode::FullCorrelation {
            return Err(Error::invalid(
                "histogram.mode",
                "the pipeline normalizes full correlations only",
            ));
        }
        if let Some(r) = self.rebin {
            if !(r.growth >= 1.0 && r.fine_ns >= 0.0) {
                return Err(Error::invalid("rebin", "need growth >= 1 and fine_ns >= 0"));
            }
        }
        self.fit.validate()
    }

    /// Acquisition time at one power.
    pub fn duration_at(&self, power: f64) -> Result<f64> {
        let signal = count_rate(&rates_at_power(&self.truth, power)?, self.eta)?;
        Ok(self.duration_s.max(self.min_signal_counts / signal))
    }
}

/// Seed of the `index`-th power's simulation (SplitMix64 finalizer).
pub fn point_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One simulated acquisition, normalized and background corrected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    #[serde(rename = "power_mw")]
    pub power: f64,
    pub duration_s: f64,
    pub singles_a: u64,
    pub singles_b: u64,
    /// Signal clicks per second on both detectors, background removed.
    #[serde(rename = "brightness_per_s")]
    pub brightness: f64,
    #[serde(rename = "brightness_stderr_per_s")]
    pub brightness_stderr: f64,
    pub rho: f64,
    pub curve: G2Curve,
}

/// Simulates one power and reduces the stream to a g² curve.
pub fn acquire(config: &PipelineConfig, index: usize) -> Result<Acquisition> {
    let power = config.powers[index];
    let rates = rates_at_power(&config.truth, power)?;
    let duration_s = config.duration_at(power)?;
    let mut sim = SimConfig::new(rates, config.eta, duration_s, point_seed(config.seed, index));
    sim.background_rate = config.background_rate;
    sim.resolution_ns = config.resolution_ns;
    let mut corr = Correlator::new(&config.histogram, sim.resolution_ns)?;
    for event in stream_events(&sim)? {
        corr.push(&event)?;
    }
    let hist = corr.finish(&config.histogram, duration_s);
    let (singles_a, singles_b) = (hist.singles_a, hist.singles_b);
    let total = (singles_a + singles_b) as f64;
    let background = 2.0 * config.background_rate * duration_s;
    let signal = total - background;
    if signal <= 0.0 {
        return Err(Error::invalid(
            "background_rate_per_s",
            format!("no signal left at {power} mW"),
        ));
    }
    let rho = signal / total;

    let mut curve = normalize(&hist)?;
    if let Some(r) = config.rebin {
        curve = curve.rebin_geometric(r.fine_ns, r.growth)?;
    }
    if rho < 1.0 {
        curve = background_correct(&curve, rho)?;
    }
    Ok(Acquisition {
        power,
        duration_s,
        singles_a,
        singles_b,
        brightness: signal / duration_s,
        brightness_stderr: total.sqrt() / duration_s,
        rho,
        curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub quantity: String,
    pub truth: f64,
    pub estimate: f64,
    pub stderr: Option<f64>,
    pub rel_error: f64,
}

impl ComparisonRow {
    fn new(quantity: &str, truth: f64, estimate: f64, stderr: Option<f64>) -> Self {
        ComparisonRow {
            quantity: quantity.to_string(),
            truth,
            estimate,
            stderr,
            rel_error: (estimate - truth) / truth.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    #[serde(rename = "power_mw")]
    pub power: f64,
    pub duration_s: f64,
    pub singles_a: u64,
    pub singles_b: u64,
    #[serde(rename = "brightness_per_s")]
    pub brightness: f64,
    pub rho: f64,
    pub fit: crate::estimation::FitResult,
    pub rates: Option<RateConstants>,
    #[serde(rename = "rates_stderr_per_ns")]
    pub rates_stderr: Option<[f64; 4]>,
    pub true_rates: RateConstants,
}

/// Everything the closed loop recovered, plus the truth it started from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub points: Vec<PointSummary>,
    pub calibration: EtaCalibration,
    pub power_model: PowerModelFit,
    pub saturation: SaturationFit,
    pub comparison: Vec<ComparisonRow>,
}

impl PipelineReport {
    pub fn row(&self, quantity: &str) -> Option<&ComparisonRow> {
        self.comparison.iter().find(|r| r.quantity == quantity)
    }
}

/// Full output: the report and the per-power data behind it.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: PipelineReport,
    pub acquisitions: Vec<Acquisition>,
    pub points: Vec<PowerPoint>,
}

/// Stage-tagged error so callers can say where the loop broke.
fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    // Powers are independent; collect keeps ladder order.
    let acquisitions: Vec<Acquisition> = (0..config.powers.len())
        .into_par_iter()
        .map(|i| acquire(config, i))
        .collect::<Result<_>>()
        .map_err(|e| Error::Stage {
            stage: "simulate",
            source: Box::new(e),
        })?;

    let mut points = Vec::with_capacity(acquisitions.len());
    for acq in &acquisitions {
        let fit = stage("fit_g2", fit_g2(&acq.curve, None, &config.fit))?;
        if !fit.converged {
            return stage(
                "fit_g2",
                Err(Error::NotConverged {
                    iterations: fit.iterations,
                    reason: format!("at {} mW: {}", acq.power, fit.message),
                }),
            );
        }
        points.push(PowerPoint::new(acq.power, acq.curve.clone(), acq.brightness, fit)?);
    }

    let calibration = stage("calibrate_eta", calibrate_eta(&points))?;
    calibration.fill_rates(&mut points)?;
    let power_model = stage("extract_power_model", extract_power_model(&points))?;

    let data: Vec<SaturationPoint> = acquisitions
        .iter()
        .map(|a| SaturationPoint {
            power: a.power,
            counts: a.brightness,
            sigma: Some(a.brightness_stderr),
        })
        .collect();
    let seed = usable_seed(&power_model.model);
    let saturation = stage("fit_saturation", fit_saturation(&data, &seed, calibration.eta, None))?;

    let report = PipelineReport {
        points: points
            .iter()
            .zip(&acquisitions)
            .map(|(p, a)| PointSummary {
                power: p.power,
                duration_s: a.duration_s,
                singles_a: a.singles_a,
                singles_b: a.singles_b,
                brightness: p.brightness,
                rho: a.rho,
                fit: p.fit.clone(),
                rates: p.rates,
                rates_stderr: p.rates_stderr,
                true_rates: rates_at_power(&config.truth, p.power).expect("validated ladder"),
            })
            .collect(),
        comparison: compare(config, &calibration, &power_model),
        calibration,
        power_model,
        saturation,
    };
    Ok(PipelineOutput {
        report,
        acquisitions,
        points,
    })
}

/// Regression intercepts can dip a rate below zero at the low end of the
/// ladder; lift them so the model is valid as a fit seed.
fn usable_seed(model: &PowerModel) -> PowerModel {
    let mut m = *model;
    let lift = |slope: f64, intercept: &mut f64| {
        let low = slope * m.p_min + *intercept;
        let high = slope * m.p_max + *intercept;
        if low < 0.0 || high < 0.0 {
            *intercept -= low.min(high);
        }
    };
    let (mut a, mut b, mut c) = (m.k12_intercept, m.k23_intercept, m.k32_intercept);
    lift(m.k12_slope, &mut a);
    lift(m.k23_slope, &mut b);
    lift(m.k32_slope, &mut c);
    m.k12_intercept = a;
    m.k23_intercept = b;
    m.k32_intercept = c;
    m
}

fn compare(config: &PipelineConfig, cal: &EtaCalibration, fit: &PowerModelFit) -> Vec<ComparisonRow> {
    let t = &config.truth;
    vec![
        ComparisonRow::new("eta", config.eta.get(), cal.eta.get(), None),
        ComparisonRow::new("k21_per_ns", t.k21, fit.k21_mean, Some(fit.k21_stderr)),
        ComparisonRow::new(
            "k12_slope_per_ns_per_mw",
            t.k12_slope,
            fit.k12.slope,
            Some(fit.k12.slope_stderr),
        ),
        ComparisonRow::new(
            "k23_slope_per_ns_per_mw",
            t.k23_slope,
            fit.k23.slope,
            Some(fit.k23.slope_stderr),
        ),
        ComparisonRow::new(
            "k32_slope_per_ns_per_mw",
            t.k32_slope,
            fit.k32.slope,
            Some(fit.k32.slope_stderr),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth() -> PowerModel {
        reference_model()
    }

    fn config() -> PipelineConfig {
        PipelineConfig::new(
            truth(),
            DetectionEfficiency::new(3e-3).unwrap(),
            vec![1.0, 5.0, 31.0],
            1.0,
            5,
        )
    }

    #[test]
    fn validation() {
        config().validate().unwrap();
        let mut c = config();
        c.powers = vec![1.0, 5.0];
        assert!(c.validate().is_err());
        let mut c = config();
        c.powers = vec![1.0, 5.0, 5.0];
        assert!(c.validate().is_err());
        let mut c = config();
        c.powers = vec![1.0, 5.0, 50.0];
        assert!(c.validate().is_err());
        let mut c = config();
        c.duration_s = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn duration_stretching() {
        let mut c = config();
        assert_eq!(c.duration_at(1.0).unwrap(), 1.0);
        c.min_signal_counts = 1e6;
        let d = c.duration_at(1.0).unwrap();
        let n = count_rate(&rates_at_power(&c.truth, 1.0).unwrap(), c.eta).unwrap();
        assert!((d * n - 1e6).abs() < 1e-6);
    }

    #[test]
    fn point_seeds_differ() {
        let s: Vec<u64> = (0..6).map(|i| point_seed(42, i)).collect();
        for i in 0..6 {
            for j in 0..i {
                assert_ne!(s[i], s[j]);
            }
        }
        assert_eq!(point_seed(42, 3), point_seed(42, 3));
    }

    #[test]
    fn acquisition_is_deterministic() {
        let c = config();
        let a = acquire(&c, 2).unwrap();
        let b = acquire(&c, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rho, 1.0);
        assert!(a.curve.rho.is_none());
    }

    #[test]
    fn background_is_corrected() {
        let mut c = config();
        c.background_rate = 5_000.0;
        let a = acquire(&c, 2).unwrap();
        assert!(a.rho < 1.0);
        assert_eq!(a.curve.rho, Some(a.rho));
    }

    #[test]
    fn seed_lifting() {
        let m = PowerModel {
            k23_intercept: -0.004,
            ..truth()
        };
        let s = usable_seed(&m);
        s.validate().unwrap();
        assert!((s.k23_slope * s.p_min + s.k23_intercept).abs() < 1e-15);
    }
}
