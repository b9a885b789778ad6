// SPDX-License-Identifier: Apache-2.0

//! File formats for click streams, raw histograms and normalized curves.
//!
//! * events, text: CSV `t_ns,detector` with fixed-point nanoseconds;
//! * events, binary: 32-byte header (`G2KEVT01`, resolution ns f64,
//!   duration s f64, record count u64) then `(u64 ticks, u8 detector)`
//!   records, all little-endian;
//! * curves: CSV `tau_ns,g2,sigma` with optional `bin_width_ns`,
//!   `poisson_counts` and `rho` columns (others are ignored on read);
//! * raw histograms: CSV `tau_ns,counts`.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use super::{CoincidenceHistogram, DetectionEvent, Detector, EventList, G2Curve};
use crate::error::{Error, Result};

pub const EVENT_CSV_HEADER: &str = "t_ns,detector";
pub const CURVE_CSV_HEADER: &str = "tau_ns,g2,sigma";
pub const RAW_CSV_HEADER: &str = "tau_ns,counts";
pub const BINARY_MAGIC: &[u8; 8] = b"G2KEVT01";

/// Decimal places needed to print multiples of `resolution_ns` exactly,
/// and the resolution in units of 10^-places ns.
fn fixed_point(resolution_ns: f64) -> Result<(usize, u64)> {
    for places in 0..=9 {
        let scaled = resolution_ns * 10f64.powi(places as i32);
        let r = scaled.round();
        if r >= 1.0 && (scaled - r).abs() <= 1e-9 * scaled {
            return Ok((places, r as u64));
        }
    }
    Err(Error::invalid(
        "timestamp_resolution_ns",
        format!("{resolution_ns} has no exact decimal form with <= 9 places"),
    ))
}

fn detector_char(d: Detector) -> char {
    match d {
        Detector::A => 'A',
        Detector::B => 'B',
    }
}

pub fn write_events_csv(events: &EventList, out: impl Write) -> Result<()> {
    let (places, unit) = fixed_point(events.resolution_ns)?;
    let scale = 10u128.pow(places as u32);
    let mut w = BufWriter::new(out);
    writeln!(w, "{EVENT_CSV_HEADER}")?;
    for e in &events.events {
        let v = e.ticks as u128 * unit as u128;
        let d = detector_char(e.detector);
        if places == 0 {
            writeln!(w, "{v},{d}")?;
        } else {
            writeln!(w, "{}.{:0places$},{d}", v / scale, v % scale)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_detector(s: &str, line: usize) -> Result<Detector> {
    match s.trim() {
        "A" => Ok(Detector::A),
        "B" => Ok(Detector::B),
        other => Err(Error::Parse(format!("line {line}: unknown detector {other:?}"))),
    }
}

fn parse_fixed(s: &str, places: usize, line: usize) -> Result<u128> {
    let bad = || Error::Parse(format!("line {line}: bad timestamp {s:?}"));
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if int.is_empty()
        || frac.len() > places
        || !int.bytes().all(|b| b.is_ascii_digit())
        || !frac.bytes().all(|b| b.is_ascii_digit())
    {
        return Err(bad());
    }
    let int: u128 = int.parse().map_err(|_| bad())?;
    let mut frac_v: u128 = if frac.is_empty() {
        0
    } else {
        frac.parse().map_err(|_| bad())?
    };
    frac_v *= 10u128.pow((places - frac.len()) as u32);
    Ok(int * 10u128.pow(places as u32) + frac_v)
}

/// Reads a CSV event file; resolution and duration are not stored in the text
/// format and must be supplied.
pub fn read_events_csv(input: impl Read, resolution_ns: f64, duration_s: f64) -> Result<EventList> {
    let (places, unit) = fixed_point(resolution_ns)?;
    let reader = BufReader::new(input);
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, Ok(h))) if h.trim() == EVENT_CSV_HEADER => {}
        _ => return Err(Error::Parse(format!("expected header {EVENT_CSV_HEADER:?}"))),
    }
    let mut events = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (t, d) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("line {line_no}: expected two fields")))?;
        let v = parse_fixed(t.trim(), places, line_no)?;
        if v % unit as u128 != 0 {
            return Err(Error::Parse(format!(
                "line {line_no}: {t} is not a multiple of the {resolution_ns} ns resolution"
            )));
        }
        let ticks =
            u64::try_from(v / unit as u128).map_err(|_| Error::Parse(format!("line {line_no}: timestamp overflow")))?;
        events.push(DetectionEvent {
            ticks,
            detector: parse_detector(d, line_no)?,
        });
    }
    let list = EventList {
        resolution_ns,
        duration_s,
        events,
    };
    list.check_sorted()?;
    Ok(list)
}

pub fn write_events_binary(events: &EventList, out: impl Write) -> Result<()> {
    let mut w = BufWriter::new(out);
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&events.resolution_ns.to_le_bytes())?;
    w.write_all(&events.duration_s.to_le_bytes())?;
    w.write_all(&(events.events.len() as u64).to_le_bytes())?;
    for e in &events.events {
        w.write_all(&e.ticks.to_le_bytes())?;
        w.write_all(&[e.detector as u8])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events_binary(input: impl Read) -> Result<EventList> {
    let mut r = BufReader::new(input);
    let mut header = [0u8; 32];
    r.read_exact(&mut header)
        .map_err(|_| Error::Parse("truncated binary event header".into()))?;
    if &header[..8] != BINARY_MAGIC {
        return Err(Error::Parse("not a binary event file".into()));
    }
    let f = |range: std::ops::Range<usize>| -> [u8; 8] { header[range].try_into().unwrap() };
    let resolution_ns = f64::from_le_bytes(f(8..16));
    let duration_s = f64::from_le_bytes(f(16..24));
    let count = u64::from_le_bytes(f(24..32));
    let mut events = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut rec = [0u8; 9];
    for i in 0..count {
        r.read_exact(&mut rec)
            .map_err(|_| Error::Parse(format!("truncated at record {i}")))?;
        let detector = match rec[8] {
            0 => Detector::A,
            1 => Detector::B,
            other => return Err(Error::Parse(format!("record {i}: detector byte {other}"))),
        };
        events.push(DetectionEvent {
            ticks: u64::from_le_bytes(rec[..8].try_into().unwrap()),
            detector,
        });
    }
    let list = EventList {
        resolution_ns,
        duration_s,
        events,
    };
    list.check_sorted()?;
    Ok(list)
}

/// Writes `tau_ns,g2,sigma`, then `bin_width_ns`, `poisson_counts` and `rho`
/// when the curve knows them, then one column per `(name, values)` overlay.
pub fn write_curve_csv(curve: &G2Curve, overlays: &[(&str, &[f64])], out: impl Write) -> Result<()> {
    let mut w = BufWriter::new(out);
    let widths = curve.bin_width_ns.len() == curve.len();
    let levels = curve.poisson_counts.len() == curve.len();
    write!(w, "{CURVE_CSV_HEADER}")?;
    if widths {
        write!(w, ",bin_width_ns")?;
    }
    if levels {
        write!(w, ",poisson_counts")?;
    }
    if curve.rho.is_some() {
        write!(w, ",rho")?;
    }
    for (name, values) in overlays {
        if values.len() != curve.len() {
            return Err(Error::invalid("overlay", format!("{name} has the wrong length")));
        }
        write!(w, ",{name}")?;
    }
    writeln!(w)?;
    for i in 0..curve.len() {
        write!(w, "{},{},{}", curve.tau_ns[i], curve.g2[i], curve.sigma[i])?;
        if widths {
            write!(w, ",{}", curve.bin_width_ns[i])?;
        }
        if levels {
            write!(w, ",{}", curve.poisson_counts[i])?;
        }
        if let Some(rho) = curve.rho {
            write!(w, ",{rho}")?;
        }
        for (_, values) in overlays {
            write!(w, ",{}", values[i])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a curve written by [`write_curve_csv`]; columns are matched by
/// name and unknown ones (overlays) are skipped.
pub fn read_curve_csv(input: impl Read) -> Result<G2Curve> {
    let reader = BufReader::new(input);
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(h))) if h.trim().starts_with(CURVE_CSV_HEADER) => h,
        _ => return Err(Error::Parse(format!("expected header starting {CURVE_CSV_HEADER:?}"))),
    };
    let names: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let col = |name: &str| names.iter().position(|n| *n == name);
    let (width_col, level_col, rho_col) = (col("bin_width_ns"), col("poisson_counts"), col("rho"));
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < names.len() {
            return Err(Error::Parse(format!("line {}: missing field", i + 1)));
        }
        for (c, f) in cols.iter_mut().zip(&fields) {
            c.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?,
            );
        }
    }
    let rho = match rho_col {
        Some(c) => {
            let v = cols[c].first().copied();
            if cols[c].iter().any(|r| Some(*r) != v) {
                return Err(Error::Parse("rho column is not constant".into()));
            }
            v
        }
        None => None,
    };
    let mut curve = G2Curve::from_points(cols[0].clone(), cols[1].clone(), cols[2].clone())?;
    if let Some(c) = width_col {
        curve.bin_width_ns = std::mem::take(&mut cols[c]);
    }
    if let Some(c) = level_col {
        curve.poisson_counts = std::mem::take(&mut cols[c]);
    }
    curve.rho = rho;
    curve.validate()?;
    Ok(curve)
}

pub fn write_histogram_csv(hist: &CoincidenceHistogram, out: impl Write) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "{RAW_CSV_HEADER}")?;
    for (tau, c) in hist.bin_centers().iter().zip(&hist.counts) {
        writeln!(w, "{tau},{c}")?;
    }
    w.flush()?;
    Ok(())
}
