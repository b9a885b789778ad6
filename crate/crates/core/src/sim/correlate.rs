// SPDX-License-Identifier: Apache-2.0

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DetectionEvent, Detector, EventList};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// Every A–B pair with `t_B − t_A` inside the window.
    FullCorrelation,
    /// Each A start paired only with the first B stop at or after `t_A + tau_min`,
    /// as a time-to-amplitude converter records.
    StartStop,
}

/// Histogram layout: bins of `bin_width_ns` covering `[tau_min_ns, tau_max_ns)`,
/// with `τ = t_B − t_A`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSpec {
    pub bin_width_ns: f64,
    pub tau_min_ns: f64,
    pub tau_max_ns: f64,
    pub mode: CorrelationMode,
}

impl HistogramSpec {
    pub fn symmetric(half_width_ns: f64, bin_width_ns: f64, mode: CorrelationMode) -> Self {
        HistogramSpec {
            bin_width_ns,
            tau_min_ns: -half_width_ns,
            tau_max_ns: half_width_ns,
            mode,
        }
    }

    pub fn n_bins(&self) -> Result<usize> {
        if !(self.bin_width_ns.is_finite() && self.bin_width_ns > 0.0) {
            return Err(Error::invalid("bin_width_ns", "must be > 0"));
        }
        if !(self.tau_min_ns.is_finite() && self.tau_max_ns.is_finite() && self.tau_max_ns > self.tau_min_ns) {
            return Err(Error::invalid("window", "need tau_min < tau_max"));
        }
        let n = exact_ratio((self.tau_max_ns - self.tau_min_ns) / self.bin_width_ns)
            .ok_or_else(|| Error::invalid("window", "width must be a whole number of bins"))?;
        Ok(n as usize)
    }

    pub fn bin_centers(&self) -> Result<Vec<f64>> {
        let n = self.n_bins()?;
        Ok((0..n)
            .map(|i| self.tau_min_ns + (i as f64 + 0.5) * self.bin_width_ns)
            .collect())
    }

    fn in_ticks(&self, resolution_ns: f64) -> Result<TickLayout> {
        let n_bins = self.n_bins()?;
        let ticks = |v: f64, field: &'static str| {
            exact_ratio(v / resolution_ns).ok_or_else(|| {
                Error::invalid(
                    field,
                    format!("{v} ns is not a multiple of the {resolution_ns} ns resolution"),
                )
            })
        };
        let width = ticks(self.bin_width_ns, "bin_width_ns")?;
        let lo = ticks(self.tau_min_ns, "tau_min_ns")?;
        Ok(TickLayout {
            lo,
            hi: lo + width * n_bins as i64,
            width,
            n_bins,
        })
    }
}

fn exact_ratio(x: f64) -> Option<i64> {
    let r = x.round();
    ((x - r).abs() <= 1e-9 * x.abs().max(1.0) && r.abs() < 1e15).then_some(r as i64)
}

#[derive(Debug, Clone, Copy)]
struct TickLayout {
    lo: i64,
    hi: i64,
    width: i64,
    n_bins: usize,
}

impl TickLayout {
    fn bin(&self, delay: i64) -> Option<usize> {
        (delay >= self.lo && delay < self.hi).then(|| ((delay - self.lo) / self.width) as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceHistogram {
    pub bin_width_ns: f64,
    pub tau_min_ns: f64,
    pub tau_max_ns: f64,
    pub counts: Vec<u64>,
    pub singles_a: u64,
    pub singles_b: u64,
    pub duration_s: f64,
    pub mode: CorrelationMode,
}

impl CoincidenceHistogram {
    pub fn spec(&self) -> HistogramSpec {
        HistogramSpec {
            bin_width_ns: self.bin_width_ns,
            tau_min_ns: self.tau_min_ns,
            tau_max_ns: self.tau_max_ns,
            mode: self.mode,
        }
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        (0..self.counts.len())
            .map(|i| self.tau_min_ns + (i as f64 + 0.5) * self.bin_width_ns)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds a histogram accumulated over a disjoint stretch of acquisition.
    pub fn merge(&mut self, other: &CoincidenceHistogram) -> Result<()> {
        if self.spec() != other.spec() || self.counts.len() != other.counts.len() {
            return Err(Error::invalid("histogram", "layouts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.singles_a += other.singles_a;
        self.singles_b += other.singles_b;
        self.duration_s += other.duration_s;
        Ok(())
    }
}

/// Single-pass coincidence counter fed with time-ordered clicks.
pub struct Correlator {
    layout: TickLayout,
    mode: CorrelationMode,
    counts: Vec<u64>,
    recent_a: VecDeque<i64>,
    recent_b: VecDeque<i64>,
    pending_starts: VecDeque<i64>,
    last: Option<i64>,
    pushed: usize,
    singles: [u64; 2],
}

impl Correlator {
    pub fn new(spec: &HistogramSpec, resolution_ns: f64) -> Result<Self> {
        if !(resolution_ns.is_finite() && resolution_ns > 0.0) {
            return Err(Error::invalid("timestamp_resolution_ns", "must be > 0"));
        }
        let layout = spec.in_ticks(resolution_ns)?;
        Ok(Correlator {
            layout,
            mode: spec.mode,
            counts: vec![0; layout.n_bins],
            recent_a: VecDeque::new(),
            recent_b: VecDeque::new(),
            pending_starts: VecDeque::new(),
            last: None,
            pushed: 0,
            singles: [0, 0],
        })
    }

    pub fn push(&mut self, event: &DetectionEvent) -> Result<()> {
        self.feed(event, true)
    }

    /// `owned = false` marks a stop-channel context event outside the slice
    /// being counted; A clicks that are not owned are skipped entirely.
    fn feed(&mut self, event: &DetectionEvent, owned: bool) -> Result<()> {
        let t = i64::try_from(event.ticks).map_err(|_| Error::invalid("ticks", "exceeds i64"))?;
        if self.last.is_some_and(|last| t < last) {
            return Err(Error::Unsorted { index: self.pushed });
        }
        self.last = Some(t);
        self.pushed += 1;
        if owned {
            self.singles[event.detector as usize] += 1;
        }
        match (event.detector, owned) {
            (Detector::A, false) => Ok(()),
            (Detector::A, true) => {
                self.on_start(t);
                Ok(())
            }
            (Detector::B, _) => {
                self.on_stop(t);
                Ok(())
            }
        }
    }

    fn on_start(&mut self, t: i64) {
        let layout = self.layout;
        // B clicks earlier than t + lo can no longer pair with any A.
        while self.recent_b.front().is_some_and(|&b| b - t < layout.lo) {
            self.recent_b.pop_front();
        }
        match self.mode {
            CorrelationMode::FullCorrelation => {
                for &b in &self.recent_b {
                    if let Some(i) = layout.bin(b - t) {
                        self.counts[i] += 1;
                    }
                }
                if layout.hi > 0 {
                    while self.recent_a.front().is_some_and(|&a| t - a >= layout.hi) {
                        self.recent_a.pop_front();
                    }
                    self.recent_a.push_back(t);
                }
            }
            CorrelationMode::StartStop => {
                if let Some(&b) = self.recent_b.front() {
                    // Already-seen stop at or after t + lo.
                    if let Some(i) = layout.bin(b - t) {
                        self.counts[i] += 1;
                    }
                } else {
                    self.pending_starts.push_back(t);
                }
            }
        }
    }

    fn on_stop(&mut self, t: i64) {
        let layout = self.layout;
        match self.mode {
            CorrelationMode::FullCorrelation => {
                while self.recent_a.front().is_some_and(|&a| t - a >= layout.hi) {
                    self.recent_a.pop_front();
                }
                for &a in &self.recent_a {
                    if let Some(i) = layout.bin(t - a) {
                        self.counts[i] += 1;
                    }
                }
            }
            CorrelationMode::StartStop => {
                while self.pending_starts.front().is_some_and(|&a| t - a >= layout.lo) {
                    let a = self.pending_starts.pop_front().unwrap();
                    if let Some(i) = layout.bin(t - a) {
                        self.counts[i] += 1;
                    }
                }
            }
        }
        if layout.lo <= 0 {
            while self.recent_b.front().is_some_and(|&b| b - t < layout.lo) {
                self.recent_b.pop_front();
            }
            self.recent_b.push_back(t);
        }
    }

    pub fn singles(&self) -> (u64, u64) {
        (self.singles[0], self.singles[1])
    }

    pub fn finish(self, spec: &HistogramSpec, duration_s: f64) -> CoincidenceHistogram {
        CoincidenceHistogram {
            bin_width_ns: spec.bin_width_ns,
            tau_min_ns: spec.tau_min_ns,
            tau_max_ns: spec.tau_max_ns,
            counts: self.counts,
            singles_a: self.singles[0],
            singles_b: self.singles[1],
            duration_s,
            mode: self.mode,
        }
    }
}

pub fn correlate(events: &EventList, spec: &HistogramSpec) -> Result<CoincidenceHistogram> {
    let mut c = Correlator::new(spec, events.resolution_ns)?;
    for e in &events.events {
        c.push(e)?;
    }
    Ok(c.finish(spec, events.duration_s))
}

/// Correlates `n_slices` disjoint time slices concurrently and merges them.
///
/// Slice `k` owns the A clicks in its time range and sees every B click that
/// could pair with them, so the merged result equals [`correlate`].
pub fn correlate_parallel(events: &EventList, spec: &HistogramSpec, n_slices: usize) -> Result<CoincidenceHistogram> {
    events.check_sorted()?;
    let layout = spec.in_ticks(events.resolution_ns)?;
    let n_slices = n_slices.max(1);
    let end_ticks = (events.duration_s * 1e9 / events.resolution_ns).ceil() as i64;
    let end_ticks = end_ticks.max(events.events.last().map_or(0, |e| e.ticks as i64 + 1));
    let bounds: Vec<i64> = (0..=n_slices)
        .map(|k| (end_ticks as i128 * k as i128 / n_slices as i128) as i64)
        .collect();

    let parts: Vec<Result<CoincidenceHistogram>> = bounds
        .par_windows(2)
        .map(|w| {
            let (start, stop) = (w[0], w[1]);
            let first = events
                .events
                .partition_point(|e| (e.ticks as i64) < start + layout.lo.min(0));
            let last = events
                .events
                .partition_point(|e| (e.ticks as i64) < stop + layout.hi.max(0));
            let mut c = Correlator::new(spec, events.resolution_ns)?;
            for e in &events.events[first..last] {
                let t = e.ticks as i64;
                c.feed(e, t >= start && t < stop)?;
            }
            Ok(c.finish(spec, 0.0))
        })
        .collect();

    let mut parts = parts.into_iter();
    let mut total = parts.next().unwrap()?;
    for p in parts {
        total.merge(&p?)?;
    }
    total.duration_s = events.duration_s;
    Ok(total)
}
