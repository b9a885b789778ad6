// SPDX-License-Identifier: Apache-2.0

//! Hanbury-Brown–Twiss acquisition of a simulated single emitter: click
//! streams, coincidence histograms and their normalization to g²(τ).

mod correlate;
mod emitter;
pub mod io;
mod normalize;

pub use correlate::{correlate, correlate_parallel, CoincidenceHistogram, CorrelationMode, Correlator, HistogramSpec};
pub use normalize::{normalize, G2Curve, START_STOP_BIAS_LIMIT};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::{count_rate, DetectionEfficiency, RateConstants, PER_NS_TO_PER_S};
use emitter::{GapDistribution, JumpSampler, PhotonSource, RenewalSampler};

/// Default limit on materialized events (~1.6 GB of records).
pub const DEFAULT_EVENT_BUDGET: u64 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Detector {
    A,
    B,
}

/// One detector click; `ticks` counts units of the stream's timestamp resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DetectionEvent {
    pub ticks: u64,
    pub detector: Detector,
}

/// How emitter trajectories are generated. Both choices are exact.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Renewal sampling when the gap law allows it, transition-by-transition otherwise.
    #[default]
    Auto,
    /// Always simulate every transition.
    Jump,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub rates: RateConstants,
    pub eta: DetectionEfficiency,
    pub duration_s: f64,
    #[serde(default = "half")]
    pub beamsplit_ratio: f64,
    /// Uncorrelated clicks per second on each detector.
    #[serde(default, rename = "background_rate_per_s")]
    pub background_rate: f64,
    #[serde(default, rename = "dark_rate_per_s")]
    pub dark_rate: f64,
    #[serde(default = "default_resolution", rename = "timestamp_resolution_ns")]
    pub resolution_ns: f64,
    /// Non-paralyzable per-detector dead time; 0 means ideal detectors.
    #[serde(default)]
    pub dead_time_ns: f64,
    pub seed: u64,
    #[serde(default)]
    pub sampler: Sampler,
    #[serde(default = "default_budget")]
    pub event_budget: u64,
}

fn half() -> f64 {
    0.5
}
fn default_resolution() -> f64 {
    0.1
}
fn default_budget() -> u64 {
    DEFAULT_EVENT_BUDGET
}

impl SimConfig {
    pub fn new(rates: RateConstants, eta: DetectionEfficiency, duration_s: f64, seed: u64) -> Self {
        SimConfig {
            rates,
            eta,
            duration_s,
            beamsplit_ratio: 0.5,
            background_rate: 0.0,
            dark_rate: 0.0,
            resolution_ns: 0.1,
            dead_time_ns: 0.0,
            seed,
            sampler: Sampler::Auto,
            event_budget: DEFAULT_EVENT_BUDGET,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rates.validate()?;
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::invalid("duration_s", "must be > 0"));
        }
        if !(self.beamsplit_ratio > 0.0 && self.beamsplit_ratio < 1.0) {
            return Err(Error::invalid("beamsplit_ratio", "must lie in (0, 1)"));
        }
        if !(self.resolution_ns.is_finite() && self.resolution_ns > 0.0) {
            return Err(Error::invalid("timestamp_resolution_ns", "must be > 0"));
        }
        for (field, v) in [
            ("background_rate_per_s", self.background_rate),
            ("dark_rate_per_s", self.dark_rate),
            ("dead_time_ns", self.dead_time_ns),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(field, "must be finite and >= 0"));
            }
        }
        if self.duration_s * 1e9 / self.resolution_ns >= u64::MAX as f64 / 2.0 {
            return Err(Error::invalid("duration_s", "overflows the tick counter"));
        }
        Ok(())
    }

    /// Expected clicks on both detectors together.
    pub fn expected_events(&self) -> Result<f64> {
        let signal = count_rate(&self.rates, self.eta)?;
        Ok(self.duration_s * (signal + 2.0 * (self.background_rate + self.dark_rate)))
    }
}

/// A materialized, time-ordered click record.
#[derive(Debug, Clone, PartialEq)]
pub struct EventList {
    pub resolution_ns: f64,
    pub duration_s: f64,
    pub events: Vec<DetectionEvent>,
}

impl EventList {
    pub fn singles(&self) -> (u64, u64) {
        self.events.iter().fold((0, 0), |(a, b), e| match e.detector {
            Detector::A => (a + 1, b),
            Detector::B => (a, b + 1),
        })
    }

    pub fn check_sorted(&self) -> Result<()> {
        match self.events.windows(2).position(|w| w[1].ticks < w[0].ticks) {
            Some(i) => Err(Error::Unsorted { index: i + 1 }),
            None => Ok(()),
        }
    }
}

enum Source {
    Renewal(RenewalSampler),
    Jump(JumpSampler),
}

impl Source {
    fn next(&mut self, rng: &mut ChaCha12Rng) -> Option<f64> {
        match self {
            Source::Renewal(s) => s.next_detection(rng),
            Source::Jump(s) => s.next_detection(rng),
        }
    }
}

/// Independent Poisson click train on one detector.
struct PoissonTrain {
    rate_per_ns: f64,
    rng: ChaCha12Rng,
    next: Option<f64>,
}

impl PoissonTrain {
    fn new(rate_per_s: f64, mut rng: ChaCha12Rng) -> Self {
        let rate_per_ns = rate_per_s / PER_NS_TO_PER_S;
        let next = (rate_per_ns > 0.0).then(|| {
            let e: f64 = rng.sample(Exp1);
            e / rate_per_ns
        });
        PoissonTrain { rate_per_ns, rng, next }
    }

    fn advance(&mut self) {
        if let Some(t) = self.next {
            let e: f64 = self.rng.sample(Exp1);
            self.next = Some(t + e / self.rate_per_ns);
        }
    }
}

/// Time-ordered click stream; events are produced lazily.
///
/// Emitter, routing and each background train draw from separate ChaCha
/// streams of the same seed, so toggling background leaves the emitter
/// realization unchanged.
pub struct EventStream {
    source: Source,
    emitter_rng: ChaCha12Rng,
    routing_rng: ChaCha12Rng,
    next_photon: Option<(f64, Detector)>,
    background: [PoissonTrain; 2],
    beamsplit_ratio: f64,
    end_ns: f64,
    resolution_ns: f64,
    dead_time_ns: f64,
    last_click: [Option<f64>; 2],
}

fn substream(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl EventStream {
    pub fn new(config: &SimConfig) -> Result<Self> {
        config.validate()?;
        let eta = config.eta.get();
        let source = match (config.sampler, GapDistribution::new(&config.rates, eta)) {
            (Sampler::Auto, Some(gaps)) => Source::Renewal(RenewalSampler::new(gaps)),
            _ => Source::Jump(JumpSampler::new(config.rates, eta)),
        };
        let bg = config.background_rate + config.dark_rate;
        let mut stream = EventStream {
            source,
            emitter_rng: substream(config.seed, 0),
            routing_rng: substream(config.seed, 1),
            next_photon: None,
            background: [
                PoissonTrain::new(bg, substream(config.seed, 2)),
                PoissonTrain::new(bg, substream(config.seed, 3)),
            ],
            beamsplit_ratio: config.beamsplit_ratio,
            end_ns: config.duration_s * PER_NS_TO_PER_S,
            resolution_ns: config.resolution_ns,
            dead_time_ns: config.dead_time_ns,
            last_click: [None, None],
        };
        stream.pull_photon();
        Ok(stream)
    }

    fn pull_photon(&mut self) {
        self.next_photon = self.source.next(&mut self.emitter_rng).map(|t| {
            let det = if self.routing_rng.random::<f64>() < self.beamsplit_ratio {
                Detector::A
            } else {
                Detector::B
            };
            (t, det)
        });
    }

    fn next_raw(&mut self) -> Option<(f64, Detector)> {
        let photon = self.next_photon;
        let bg_a = self.background[0].next.map(|t| (t, Detector::A));
        let bg_b = self.background[1].next.map(|t| (t, Detector::B));
        let (t, det, which) = [(photon, 0usize), (bg_a, 1), (bg_b, 2)]
            .into_iter()
            .filter_map(|(c, i)| c.map(|(t, d)| (t, d, i)))
            .min_by(|x, y| x.0.total_cmp(&y.0).then(x.2.cmp(&y.2)))?;
        if t >= self.end_ns {
            return None;
        }
        match which {
            0 => self.pull_photon(),
            i => self.background[i - 1].advance(),
        }
        Some((t, det))
    }
}

impl Iterator for EventStream {
    type Item = DetectionEvent;

    fn next(&mut self) -> Option<DetectionEvent> {
        loop {
            let (t, detector) = self.next_raw()?;
            let slot = detector as usize;
            if self.dead_time_ns > 0.0 {
                if let Some(last) = self.last_click[slot] {
                    if t - last < self.dead_time_ns {
                        continue;
                    }
                }
                self.last_click[slot] = Some(t);
            }
            return Some(DetectionEvent {
                ticks: (t / self.resolution_ns).floor() as u64,
                detector,
            });
        }
    }
}

/// Lazily generated click stream without a size limit.
pub fn stream_events(config: &SimConfig) -> Result<EventStream> {
    EventStream::new(config)
}

/// Simulates and materializes the full click record.
pub fn simulate_events(config: &SimConfig) -> Result<EventList> {
    config.validate()?;
    let expected = config.expected_events()?;
    if expected > config.event_budget as f64 {
        return Err(Error::EventBudget {
            expected,
            budget: config.event_budget,
        });
    }
    let events: Vec<DetectionEvent> = EventStream::new(config)?.collect();
    Ok(EventList {
        resolution_ns: config.resolution_ns,
        duration_s: config.duration_s,
        events,
    })
}
