// SPDX-License-Identifier: Apache-2.0

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use g2kin::estimation::*;
use g2kin::kinetics::*;
use g2kin::pipeline::*;
use g2kin::sim::io::*;
use g2kin::sim::*;
use serde::Serialize;

use crate::config::*;
use crate::fail::Failure;
use crate::output::{cell, stem, Out};

/// A command that finished but wants its non-convergence reported (exit 3).
pub enum Status {
    Done,
    Flagged(String),
}

type Run = Result<Status, Failure>;

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T, Failure> {
    s.as_ref()
        .ok_or_else(|| Failure::config(format!("[{name}] section missing from the config")))
}

fn efficiency(field: &str, eta: f64) -> Result<DetectionEfficiency, Failure> {
    DetectionEfficiency::new(eta).map_err(|e| Failure::config(format!("{field}: {e}")))
}

fn positive(field: &str, v: f64) -> Result<(), Failure> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Failure::config(format!("{field}: must be > 0, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<(), Failure> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Failure::config(format!("{field}: must be >= 0, got {v}")))
    }
}

fn open(path: &Path) -> Result<File, Failure> {
    File::open(path).map_err(|e| Failure::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_reader(BufReader::new(open(path)?))
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// True when a CSV file holds a normalized curve rather than clicks.
fn is_curve_csv(path: &Path) -> Result<bool, Failure> {
    let mut first = String::new();
    BufReader::new(open(path)?)
        .read_line(&mut first)
        .map_err(|e| Failure::io(path, e))?;
    Ok(first.trim_start().starts_with(CURVE_CSV_HEADER))
}

fn read_events(path: &Path, csv: Option<CsvEvents>, field: &str) -> Result<EventList, Failure> {
    if is_csv(path) {
        let c = csv.ok_or_else(|| Failure::config(format!("{field}: CSV click streams need [{field}.csv_events]")))?;
        read_events_csv(open(path)?, c.timestamp_resolution_ns, c.duration_s).map_err(|e| Failure::at(path, e))
    } else {
        read_events_binary(BufReader::new(open(path)?)).map_err(|e| Failure::at(path, e))
    }
}

fn rate_cells(r: &RateConstants) -> Vec<String> {
    r.as_array().iter().map(f64::to_string).collect()
}

const RATE_COLUMNS: [&str; 4] = ["k12_per_ns", "k21_per_ns", "k23_per_ns", "k32_per_ns"];

// ---------------------------------------------------------------- simulate

#[derive(Serialize)]
struct SimRow {
    file: String,
    power_mw: Option<f64>,
    duration_s: f64,
    singles_a: u64,
    singles_b: u64,
    singles_rate_per_s: f64,
    /// Model rate on both detectors, background included, dead time ignored.
    expected_rate_per_s: f64,
    deviation_sigma: f64,
}

#[derive(Serialize)]
struct SimSummary {
    runs: Vec<SimRow>,
}

pub fn simulate(l: &Loaded, out: &Out) -> Run {
    let sec = section(&l.config.simulate, "simulate")?;
    positive("simulate.duration_s", sec.duration_s)?;
    non_negative("simulate.min_signal_counts", sec.min_signal_counts)?;
    let eta = efficiency("simulate.eta", sec.eta.unwrap_or(REFERENCE_ETA))?;
    let seed = l.seed()?;

    let runs: Vec<(Option<f64>, RateConstants)> = match (&sec.rates, &sec.model) {
        (Some(_), Some(_)) => return Err(Failure::config("simulate: give rates or model, not both")),
        (Some(r), None) => {
            if sec.powers_mw.is_some() {
                return Err(Failure::config("simulate.powers_mw: only meaningful with a model"));
            }
            vec![(None, *r)]
        }
        (None, model) => {
            let powers = match (model, &sec.powers_mw) {
                (Some(_), None) => return Err(Failure::config("simulate.powers_mw: required with a model")),
                (_, Some(p)) => p.clone(),
                (None, None) => REFERENCE_LADDER_MW.to_vec(),
            };
            check_ladder("simulate.powers_mw", &powers)?;
            let model = model.unwrap_or_else(reference_model);
            powers
                .iter()
                .map(|&p| Ok((Some(p), rates_at_power(&model, p)?)))
                .collect::<g2kin::Result<_>>()?
        }
    };

    let mut rows = Vec::new();
    for (i, (power, rates)) in runs.iter().enumerate() {
        let signal = count_rate(rates, eta)?;
        let duration_s = sec.duration_s.max(sec.min_signal_counts / signal);
        let run_seed = if power.is_some() { point_seed(seed, i) } else { seed };
        let mut cfg = SimConfig::new(*rates, eta, duration_s, run_seed);
        cfg.background_rate = sec.background_rate_per_s;
        cfg.dark_rate = sec.dark_rate_per_s;
        cfg.resolution_ns = sec.timestamp_resolution_ns;
        cfg.dead_time_ns = sec.dead_time_ns;
        cfg.beamsplit_ratio = sec.beamsplit_ratio;
        cfg.sampler = sec.sampler;
        let events = simulate_events(&cfg)?;

        let ext = match sec.event_format {
            EventFormat::Binary => "bin",
            EventFormat::Csv => "csv",
        };
        let name = match power {
            Some(p) => format!("events_{i:02}_{p}mW.{ext}"),
            None => format!("events.{ext}"),
        };
        out.write_with(&name, |f| match sec.event_format {
            EventFormat::Binary => write_events_binary(&events, f),
            EventFormat::Csv => write_events_csv(&events, f),
        })?;

        let (a, b) = events.singles();
        let expected = signal + 2.0 * (cfg.background_rate + cfg.dark_rate);
        let total = (a + b) as f64;
        let deviation = (total - expected * duration_s) / (expected * duration_s).sqrt();
        println!(
            "{name}: {duration_s} s, {} clicks ({:+.2} sigma from model)",
            a + b,
            deviation
        );
        rows.push(SimRow {
            file: name,
            power_mw: *power,
            duration_s,
            singles_a: a,
            singles_b: b,
            singles_rate_per_s: total / duration_s,
            expected_rate_per_s: expected,
            deviation_sigma: deviation,
        });
    }
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.file.clone(),
                cell(r.power_mw),
                r.duration_s.to_string(),
                r.singles_a.to_string(),
                r.singles_b.to_string(),
                r.singles_rate_per_s.to_string(),
                r.expected_rate_per_s.to_string(),
                r.deviation_sigma.to_string(),
            ]
        })
        .collect();
    out.table(
        "summary",
        &SimSummary { runs: rows },
        &[
            "file",
            "power_mw",
            "duration_s",
            "singles_a",
            "singles_b",
            "singles_rate_per_s",
            "expected_rate_per_s",
            "deviation_sigma",
        ],
        &cells,
    )?;
    Ok(Status::Done)
}

// --------------------------------------------------------------- correlate

pub fn correlate_cmd(l: &Loaded, out: &Out) -> Run {
    let sec = section(&l.config.correlate, "correlate")?;
    if sec.inputs.is_empty() {
        return Err(Failure::config("correlate.inputs: empty"));
    }
    let inputs: Vec<PathBuf> = sec
        .inputs
        .iter()
        .map(|p| l.input("correlate.inputs", p))
        .collect::<Result<_, _>>()?;
    for path in &inputs {
        let events = read_events(path, sec.csv_events, "correlate")?;
        let hist = correlate(&events, &sec.histogram)?;
        let mut curve = normalize(&hist)?;
        if let Some(r) = sec.rebin {
            curve = curve.rebin_geometric(r.fine_ns, r.growth)?;
        }
        let name = stem(path);
        out.write_with(&format!("{name}_histogram.csv"), |f| write_histogram_csv(&hist, f))?;
        match out.format {
            Format::Csv => out.write_with(&format!("{name}_g2.csv"), |f| write_curve_csv(&curve, &[], f))?,
            Format::Json => out.json(&format!("{name}_g2.json"), &curve)?,
        };
        println!(
            "{}: {} + {} clicks over {} s, {} bins",
            path.display(),
            hist.singles_a,
            hist.singles_b,
            hist.duration_s,
            curve.len()
        );
    }
    Ok(Status::Done)
}

// ----------------------------------------------------------------- analyze

#[derive(Serialize)]
struct FitDoc<'a> {
    input: String,
    power_mw: Option<f64>,
    rho: f64,
    brightness_per_s: Option<f64>,
    fit: &'a FitResult,
}

#[derive(Serialize)]
struct RatesDoc {
    eta: Option<f64>,
    brightness_per_s: Option<f64>,
    /// Every physical rate set consistent with the fit and brightness.
    candidates: Vec<RateConstants>,
    rates: Option<RateConstants>,
    rates_stderr_per_ns: Option<[f64; 4]>,
    note: String,
}

pub fn analyze(l: &Loaded, out: &Out) -> Run {
    let sec = section(&l.config.analyze, "analyze")?;
    if sec.inputs.is_empty() {
        return Err(Failure::config("analyze.inputs: empty"));
    }
    let n = sec.inputs.len();
    for (field, v) in [
        ("analyze.powers_mw", &sec.powers_mw),
        ("analyze.brightness_per_s", &sec.brightness_per_s),
    ] {
        if v.as_ref().is_some_and(|v| v.len() != n) {
            return Err(Failure::config(format!("{field}: need one value per input ({n})")));
        }
    }
    if sec.rho.is_none() && sec.background_rate_per_s.is_none() {
        return Err(Failure::config(
            "analyze.rho: give rho, or background_rate_per_s (0 for none)",
        ));
    }
    if let Some(r) = sec.rho {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Failure::config(format!("analyze.rho: {r} not in (0, 1]")));
        }
    }
    if let Some(b) = sec.background_rate_per_s {
        non_negative("analyze.background_rate_per_s", b)?;
    }
    let eta = sec.eta.map(|e| efficiency("analyze.eta", e)).transpose()?;
    let inputs: Vec<PathBuf> = sec
        .inputs
        .iter()
        .map(|p| l.input("analyze.inputs", p))
        .collect::<Result<_, _>>()?;

    let mut flagged = Vec::new();
    for (i, path) in inputs.iter().enumerate() {
        let power = sec.powers_mw.as_ref().map(|p| p[i]);
        let (curve, rho, brightness) = if is_csv(path) && is_curve_csv(path)? {
            let curve = read_curve_csv(open(path)?).map_err(|e| Failure::at(path, e))?;
            let rho = match (sec.rho, sec.background_rate_per_s) {
                (Some(r), _) => r,
                (None, Some(b)) if b > 0.0 => {
                    return Err(Failure::config(format!(
                        "analyze.rho: {} is a curve; without singles the background needs rho",
                        path.display()
                    )))
                }
                _ => 1.0,
            };
            (curve, rho, sec.brightness_per_s.as_ref().map(|b| b[i]))
        } else {
            let events = read_events(path, sec.csv_events, "analyze")?;
            let hist = correlate(&events, &sec.histogram)?;
            let total = (hist.singles_a + hist.singles_b) as f64;
            let background = 2.0 * sec.background_rate_per_s.unwrap_or(0.0) * hist.duration_s;
            let signal = total - background;
            if signal <= 0.0 {
                return Err(Failure::config(format!(
                    "analyze.background_rate_per_s: leaves no signal in {}",
                    path.display()
                )));
            }
            let rho = sec.rho.unwrap_or(signal / total);
            let mut curve = normalize(&hist)?;
            if let Some(r) = sec.rebin {
                curve = curve.rebin_geometric(r.fine_ns, r.growth)?;
            }
            let brightness = sec
                .brightness_per_s
                .as_ref()
                .map_or(rho * total / hist.duration_s, |b| b[i]);
            (curve, rho, Some(brightness))
        };
        let curve = if rho < 1.0 {
            background_correct(&curve, rho).map_err(|e| Failure::at(path, e))?
        } else {
            curve
        };
        let fit = fit_g2(&curve, None, &sec.fit).map_err(|e| Failure::at(path, e))?;

        let dest = if n == 1 { out.sub(".")? } else { out.sub(&stem(path))? };
        let overlay = fit.model_curve(&curve);
        dest.write_with("g2_curve.csv", |f| write_curve_csv(&curve, &[("g2_fit", &overlay)], f))?;
        dest.json(
            "g2_fit.json",
            &FitDoc {
                input: path.display().to_string(),
                power_mw: power,
                rho,
                brightness_per_s: brightness,
                fit: &fit,
            },
        )?;

        let mut doc = RatesDoc {
            eta: eta.map(|e| e.get()),
            brightness_per_s: brightness,
            candidates: Vec::new(),
            rates: None,
            rates_stderr_per_ns: None,
            note: String::new(),
        };
        match (eta, brightness, fit.converged) {
            (_, _, false) => doc.note = "fit did not converge".into(),
            (None, _, _) => doc.note = "no eta given; shape only".into(),
            (_, None, _) => doc.note = "no brightness known; shape only".into(),
            (Some(eta), Some(b), true) => {
                doc.candidates = observable_candidates(fit.g_e, fit.k_tm, fit.k_1m, b, eta)?;
                doc.note = match doc.candidates.len() {
                    0 => "no physical rates reproduce the fit at this eta".into(),
                    1 => "unique".into(),
                    k => format!("{k} physical rate sets; calibrate eta across powers to choose"),
                };
                if let [r] = doc.candidates[..] {
                    doc.rates = Some(r);
                }
            }
        }
        if let (Some(p), Some(b)) = (power, brightness) {
            let mut point = PowerPoint::new(p, curve.clone(), b, fit.clone())?;
            if let (Some(r), Some(eta)) = (doc.rates, eta) {
                let se = rate_stderr(&point, &r, eta);
                point.rates = Some(r);
                point.rates_stderr = Some(se);
                doc.rates_stderr_per_ns = Some(se);
            }
            dest.json("point.json", &point)?;
        }
        dest.json("rates.json", &doc)?;

        let dip = curve
            .tau_ns
            .iter()
            .zip(&curve.g2)
            .filter(|(t, _)| t.abs() < 1.0)
            .map(|(_, g)| *g)
            .fold(f64::INFINITY, f64::min);
        println!(
            "{}: rho {rho:.3}, lowest |tau| < 1 ns bin {dip:.3}, g_e {:.4}, k_tm {:.5} /ns, k_1m {:.5} /ns, reduced chi2 {:.3}{}",
            path.display(),
            fit.g_e,
            fit.k_tm,
            fit.k_1m,
            fit.reduced_chi2,
            if fit.converged { "" } else { " (NOT CONVERGED)" }
        );
        if !fit.converged {
            flagged.push(format!("{}: {}", path.display(), fit.message));
        }
    }
    Ok(if flagged.is_empty() {
        Status::Done
    } else {
        Status::Flagged(format!("fit did not converge for {}", flagged.join("; ")))
    })
}

// ------------------------------------------------------------------ invert

#[derive(Serialize)]
struct InvertDoc {
    candidates: Vec<RateConstants>,
}

pub fn invert(l: &Loaded, out: &Out) -> Run {
    let sec = section(&l.config.invert, "invert")?;
    let candidates = match (sec.sigma2_inf, sec.count_rate_per_s, sec.eta) {
        (Some(s), None, None) => {
            let d = DerivedParams {
                g_e: sec.g_e,
                k_tm: sec.k_tm_per_ns,
                k_1m: sec.k_1m_per_ns,
                sigma2_inf: s,
            };
            vec![rates_from_derived(&d)?]
        }
        (None, Some(n), Some(eta)) => {
            let eta = efficiency("invert.eta", eta)?;
            let c = observable_candidates(sec.g_e, sec.k_tm_per_ns, sec.k_1m_per_ns, n, eta)?;
            if c.is_empty() {
                return Err(Failure::numerical(
                    "invert: no physical rates reproduce these observables",
                ));
            }
            c
        }
        _ => return Err(Failure::config("invert: give sigma2_inf, or count_rate_per_s with eta")),
    };
    for r in &candidates {
        println!("k12 {} k21 {} k23 {} k32 {} /ns", r.k12, r.k21, r.k23, r.k32);
    }
    let rows: Vec<Vec<String>> = candidates.iter().map(rate_cells).collect();
    out.table("rates", &InvertDoc { candidates }, &RATE_COLUMNS, &rows)?;
    Ok(Status::Done)
}

// ----------------------------------------------------------- calibrate-eta

pub fn calibrate(l: &Loaded, out: &Out) -> Run {
    let sec = section(&l.config.calibrate_eta, "calibrate_eta")?;
    let mut points: Vec<PowerPoint> = sec
        .inputs
        .iter()
        .map(|p| read_json(&l.input("calibrate_eta.inputs", p)?))
        .collect::<Result<_, _>>()?;
    let powers: Vec<f64> = points.iter().map(|p| p.power).collect();
    check_ladder("calibrate_eta.inputs (power_mw)", &powers)?;
    let cal = calibrate_eta(&points)?;
    cal.fill_rates(&mut points)?;

    println!(
        "eta {} (k21 spread {:.3}% across {} powers)",
        cal.eta.get(),
        100.0 * cal.dispersion,
        powers.len()
    );
    let rows: Vec<Vec<String>> = cal
        .powers
        .iter()
        .zip(&cal.rates)
        .zip(&cal.rates_stderr)
        .map(|((p, r), e)| {
            let mut row = vec![p.to_string()];
            row.extend(rate_cells(r));
            row.extend(e.iter().map(f64::to_string));
            row
        })
        .collect();
    out.table(
        "calibration",
        &cal,
        &[
            "power_mw",
            "k12_per_ns",
            "k21_per_ns",
            "k23_per_ns",
            "k32_per_ns",
            "k12_stderr_per_ns",
            "k21_stderr_per_ns",
            "k23_stderr_per_ns",
            "k32_stderr_per_ns",
        ],
        &rows,
    )?;
    out.json("points.json", &PointsDoc { points })?;
    Ok(Status::Done)
}

#[derive(Serialize, serde::Deserialize)]
struct PointsDoc {
    points: Vec<PowerPoint>,
}

// --------------------------------------------------------------- power-fit

pub fn power_fit(l: &Loaded, out: &Out) -> Run {
    let sec = section(&l.config.power_fit, "power_fit")?;
    let doc: PointsDoc = read_json(&l.input("power_fit.input", &sec.input)?)?;
    let fit = extract_power_model(&doc.points)?;
    let m = &fit.model;
    println!(
        "k12 = {} P + {}, k21 = {}, k23 = {} P + {}, k32 = {} P + {} (/ns, P in mW)",
        m.k12_slope, m.k12_intercept, m.k21, m.k23_slope, m.k23_intercept, m.k32_slope, m.k32_intercept
    );
    out.json("power_model.json", &fit)?;
    if out.format == Format::Csv {
        let line = |name: &str, lf: &LinearFit| {
            vec![
                name.to_string(),
                lf.slope.to_string(),
                lf.slope_stderr.to_string(),
                lf.intercept.to_string(),
                lf.intercept_stderr.to_string(),
            ]
        };
        let rows = vec![
            line("k12", &fit.k12),
            vec![
                "k21".into(),
                "0".into(),
                "0".into(),
                fit.k21_mean.to_string(),
                fit.k21_stderr.to_string(),
            ],
            line("k23", &fit.k23),
            line("k32", &fit.k32),
        ];
        out.csv(
            "power_model.csv",
            &[
                "rate",
                "slope_per_ns_per_mw",
                "slope_stderr",
                "intercept_per_ns",
                "intercept_stderr",
            ],
            &rows,
        )?;
    }
    Ok(Status::Done)
}

// -------------------------------------------------------------- saturation

fn read_saturation_csv(path: &Path) -> Result<Vec<SaturationPoint>, Failure> {
    let bad = |line: usize, what: &str| Failure::config(format!("{}: line {line}: {what}", path.display()));
    let mut lines = BufReader::new(open(path)?).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim().starts_with("power_mw,counts_per_s") => {}
        _ => return Err(bad(1, "expected header power_mw,counts_per_s[,sigma_per_s]")),
    }
    let mut pts = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Failure::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(i + 2, &e.to_string()))?;
        if !(2..=3).contains(&v.len()) {
            return Err(bad(i + 2, "need 2 or 3 fields"));
        }
        pts.push(SaturationPoint {
            power: v[0],
            counts: v[1],
            sigma: v.get(2).copied(),
        });
    }
    Ok(pts)
}

/// A bare PowerModel, or power-fit's output carrying one under `model`.
fn read_model(path: &Path) -> Result<PowerModel, Failure> {
    let mut v: serde_json::Value = read_json(path)?;
    if let Some(m) = v.get_mut("model") {
        v = m.take();
    }
    serde_json::from_value(v).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn coefficient(m: &PowerModel, p: SaturationParam) -> f64 {
    match p {
        SaturationParam::K12Slope => m.k12_slope,
        SaturationParam::K12Intercept => m.k12_intercept,
        SaturationParam::K21 => m.k21,
        SaturationParam::K23Slope => m.k23_slope,
        SaturationParam::K23Intercept => m.k23_intercept,
        SaturationParam::K32Slope => m.k32_slope,
        SaturationParam::K32Intercept => m.k32_intercept,
    }
}

pub fn saturation(l: &Loaded, out: &Out) -> Run {
    let sec = section(&l.config.saturation, "saturation")?;
    let eta = efficiency("saturation.eta", sec.eta)?;
    let data = match (&sec.points, &sec.points_file) {
        (Some(p), None) => p.clone(),
        (None, Some(f)) => read_saturation_csv(&l.input("saturation.points_file", f)?)?,
        _ => return Err(Failure::config("saturation: give points or points_file")),
    };
    let seed = match (&sec.model, &sec.model_file) {
        (Some(m), None) => *m,
        (None, Some(f)) => read_model(&l.input("saturation.model_file", f)?)?,
        _ => return Err(Failure::config("saturation: give model or model_file")),
    };
    let fit = fit_saturation(&data, &seed, eta, sec.free_parameters.as_deref())?;
    for (p, e) in fit.free_parameters.iter().zip(&fit.stderr) {
        println!("{p:?}: {} ± {e}", coefficient(&fit.model, *p));
    }
    println!("reduced chi2 {:.3}", fit.reduced_chi2);
    let rows: Vec<Vec<String>> = (0..fit.powers.len())
        .map(|i| {
            vec![
                fit.powers[i].to_string(),
                fit.measured[i].to_string(),
                fit.predicted[i].to_string(),
                fit.reference[i].to_string(),
            ]
        })
        .collect();
    out.json("saturation.json", &fit)?;
    out.csv(
        "saturation.csv",
        &["power_mw", "measured_per_s", "predicted_per_s", "shelving_free_per_s"],
        &rows,
    )?;
    Ok(if fit.converged {
        Status::Done
    } else {
        Status::Flagged(format!("saturation fit did not converge: {}", fit.message))
    })
}

// ---------------------------------------------------------------- pipeline

pub fn pipeline_config(l: &Loaded) -> Result<PipelineConfig, Failure> {
    let sec = l.config.pipeline.clone().unwrap_or_default();
    let eta = efficiency("pipeline.eta", sec.eta.unwrap_or(REFERENCE_ETA))?;
    let mut cfg = PipelineConfig::new(
        sec.truth.unwrap_or_else(reference_model),
        eta,
        sec.powers_mw.unwrap_or_else(|| REFERENCE_LADDER_MW.to_vec()),
        sec.duration_s.unwrap_or(60.0),
        l.seed()?,
    );
    if let Some(v) = sec.min_signal_counts {
        cfg.min_signal_counts = v;
    }
    if let Some(v) = sec.background_rate_per_s {
        cfg.background_rate = v;
    }
    if let Some(v) = sec.timestamp_resolution_ns {
        cfg.resolution_ns = v;
    }
    if let Some(v) = sec.histogram {
        cfg.histogram = v;
    }
    if sec.rebin.is_some() {
        cfg.rebin = sec.rebin;
    }
    if let Some(v) = sec.fit {
        cfg.fit = v;
    }
    cfg.validate().map_err(|e| Failure::config(format!("pipeline: {e}")))?;
    Ok(cfg)
}

pub fn pipeline(l: &Loaded, out: &Out) -> Run {
    let cfg = pipeline_config(l)?;
    let result = run_pipeline(&cfg)?;
    let report = &result.report;

    out.json("report.json", report)?;
    let rows: Vec<Vec<String>> = report
        .comparison
        .iter()
        .map(|r| {
            vec![
                r.quantity.clone(),
                r.truth.to_string(),
                r.estimate.to_string(),
                cell(r.stderr),
                r.rel_error.to_string(),
            ]
        })
        .collect();
    if out.format == Format::Csv {
        out.csv(
            "comparison.csv",
            &["quantity", "truth", "estimate", "stderr", "rel_error"],
            &rows,
        )?;
    }
    for (i, p) in result.points.iter().enumerate() {
        let overlay = p.fit.model_curve(&p.curve);
        out.write_with(&format!("g2_{i:02}_{}mW.csv", p.power), |f| {
            write_curve_csv(&p.curve, &[("g2_fit", &overlay)], f)
        })?;
    }
    let s = &report.saturation;
    let sat: Vec<Vec<String>> = (0..s.powers.len())
        .map(|i| {
            vec![
                s.powers[i].to_string(),
                s.measured[i].to_string(),
                s.predicted[i].to_string(),
                s.reference[i].to_string(),
            ]
        })
        .collect();
    out.csv(
        "saturation.csv",
        &["power_mw", "measured_per_s", "predicted_per_s", "shelving_free_per_s"],
        &sat,
    )?;

    for r in &report.comparison {
        println!(
            "{:<26} truth {:<12.6e} estimate {:<12.6e} rel error {:+.2}%",
            r.quantity,
            r.truth,
            r.estimate,
            100.0 * r.rel_error
        );
    }
    println!("k21 spread across powers {:.3}%", 100.0 * report.calibration.dispersion);
    Ok(Status::Done)
}
