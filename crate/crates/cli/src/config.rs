// SPDX-License-Identifier: Apache-2.0

//! Run configuration: one TOML file, one optional table per subcommand.

use std::path::{Path, PathBuf};

use g2kin::estimation::{FitOptions, SaturationParam, SaturationPoint};
use g2kin::pipeline::Rebin;
use g2kin::sim::{HistogramSpec, Sampler};
use g2kin::{PowerModel, RateConstants};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fail::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    #[default]
    Json,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub simulate: Option<SimulateSection>,
    pub correlate: Option<CorrelateSection>,
    pub analyze: Option<AnalyzeSection>,
    pub invert: Option<InvertSection>,
    pub calibrate_eta: Option<CalibrateSection>,
    pub power_fit: Option<PowerFitSection>,
    pub saturation: Option<SaturationSection>,
    pub pipeline: Option<PipelineSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventFormat {
    #[default]
    Binary,
    Csv,
}

/// Either fixed `rates`, or a power `model` sampled on `powers_mw`. With
/// neither, the reference model on the reference ladder.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub rates: Option<RateConstants>,
    pub model: Option<PowerModel>,
    pub powers_mw: Option<Vec<f64>>,
    pub eta: Option<f64>,
    pub duration_s: f64,
    #[serde(default)]
    pub min_signal_counts: f64,
    #[serde(default)]
    pub background_rate_per_s: f64,
    #[serde(default)]
    pub dark_rate_per_s: f64,
    #[serde(default = "default_resolution")]
    pub timestamp_resolution_ns: f64,
    #[serde(default)]
    pub dead_time_ns: f64,
    #[serde(default = "half")]
    pub beamsplit_ratio: f64,
    #[serde(default)]
    pub sampler: Sampler,
    #[serde(default)]
    pub event_format: EventFormat,
}

/// How to read CSV click streams, which carry neither of these.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvEvents {
    pub timestamp_resolution_ns: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelateSection {
    pub inputs: Vec<PathBuf>,
    #[serde(default = "default_histogram")]
    pub histogram: HistogramSpec,
    /// Off by default: the curve keeps the histogram's bins.
    pub rebin: Option<Rebin>,
    pub csv_events: Option<CsvEvents>,
}

/// Inputs are click streams (`.bin`, `.csv` with `t_ns,detector`) or
/// normalized curves (`.csv` with `tau_ns,g2,sigma`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    pub inputs: Vec<PathBuf>,
    /// One per input; needed downstream by calibrate-eta.
    pub powers_mw: Option<Vec<f64>>,
    pub rho: Option<f64>,
    pub background_rate_per_s: Option<f64>,
    pub eta: Option<f64>,
    /// Background-free detected rate per input; click streams supply their own.
    pub brightness_per_s: Option<Vec<f64>>,
    #[serde(default = "default_histogram")]
    pub histogram: HistogramSpec,
    #[serde(default = "default_rebin")]
    pub rebin: Option<Rebin>,
    #[serde(default)]
    pub fit: FitOptions,
    pub csv_events: Option<CsvEvents>,
}

/// `sigma2_inf` gives the unique rates; otherwise `count_rate_per_s` and
/// `eta` give every physical candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertSection {
    pub g_e: f64,
    pub k_tm_per_ns: f64,
    pub k_1m_per_ns: f64,
    pub sigma2_inf: Option<f64>,
    pub count_rate_per_s: Option<f64>,
    pub eta: Option<f64>,
}

/// `point.json` files written by analyze, one per power.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateSection {
    pub inputs: Vec<PathBuf>,
}

/// `points.json` written by calibrate-eta.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerFitSection {
    pub input: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaturationSection {
    pub eta: f64,
    /// Inline points, or a CSV `power_mw,counts_per_s[,sigma_per_s]`.
    pub points: Option<Vec<SaturationPoint>>,
    pub points_file: Option<PathBuf>,
    /// Starting model inline, or the `power_model.json` from power-fit.
    pub model: Option<PowerModel>,
    pub model_file: Option<PathBuf>,
    pub free_parameters: Option<Vec<SaturationParam>>,
}

/// Closed-loop run; omitted fields take the reference values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub truth: Option<PowerModel>,
    pub eta: Option<f64>,
    pub powers_mw: Option<Vec<f64>>,
    pub duration_s: Option<f64>,
    pub min_signal_counts: Option<f64>,
    pub background_rate_per_s: Option<f64>,
    pub timestamp_resolution_ns: Option<f64>,
    pub histogram: Option<HistogramSpec>,
    pub rebin: Option<Rebin>,
    pub fit: Option<FitOptions>,
}

fn default_resolution() -> f64 {
    0.01
}

fn half() -> f64 {
    0.5
}

pub fn default_histogram() -> HistogramSpec {
    HistogramSpec::symmetric(1000.0, 1.0, g2kin::sim::CorrelationMode::FullCorrelation)
}

fn default_rebin() -> Option<Rebin> {
    Some(Rebin {
        fine_ns: 40.0,
        growth: 1.1,
    })
}

/// Seed, config hash and version stamped on every output.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub config_sha256: String,
    pub version: &'static str,
}

/// Parsed configuration plus where its relative paths are anchored.
pub struct Loaded {
    pub config: RunConfig,
    base: PathBuf,
}

impl Loaded {
    pub fn read(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Loaded {
                config: RunConfig::default(),
                base: PathBuf::from("."),
            });
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Loaded { config, base })
    }

    /// Config-relative path; absolute paths pass through.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Resolves `p` and checks that it exists, naming `field` if not.
    pub fn input(&self, field: &str, p: &Path) -> Result<PathBuf, Failure> {
        let full = self.resolve(p);
        if !full.is_file() {
            return Err(Failure::config(format!("{field}: no such file {}", full.display())));
        }
        Ok(full)
    }

    pub fn provenance(&self) -> Provenance {
        // serde_json keeps struct field order, so equal configs hash equally.
        // Where the results land is not part of the run.
        let run = RunConfig {
            out: None,
            ..self.config.clone()
        };
        let canonical = serde_json::to_vec(&run).expect("config serializes");
        Provenance {
            seed: self.config.seed,
            config_sha256: hex(&Sha256::digest(&canonical)),
            version: env!("CARGO_PKG_VERSION"),
        }
    }

    pub fn seed(&self) -> Result<u64, Failure> {
        self.config
            .seed
            .ok_or_else(|| Failure::config("seed: required for stochastic commands (config `seed` or --seed)"))
    }

    pub fn format(&self) -> Format {
        self.config.format.unwrap_or_default()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A ladder must be strictly increasing and positive.
pub fn check_ladder(field: &str, powers: &[f64]) -> Result<(), Failure> {
    if powers.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(Failure::config(format!("{field}: powers must be finite and > 0")));
    }
    if powers.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Failure::config(format!("{field}: must be strictly increasing")));
    }
    Ok(())
}
