//! Synthetic multi-channel recordings with traveling-wave events.
//!
//! Background channels are sums of two to three sinusoids at
//! channel-specific base frequencies plus white noise. Events are
//! Hann-windowed, amplitude-boosted, frequency-shifted sinusoid bursts that
//! start on a seed channel and propagate along a directed graph with a fixed
//! per-hop sample delay, so labeled activity travels across channels while
//! keeping its shape.

pub mod dataset;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::signal::Recording;

/// Relative amplitudes of the per-channel sinusoid stack.
const HARMONIC_AMPS: [f64; 3] = [1.0, 0.35, 0.2];
/// Standard deviation of the background white noise.
const NOISE_STD: f64 = 0.1;
/// Base-frequency grid (Hz) channels draw from without replacement.
const FREQ_GRID: [f64; 24] = [
    3.0, 5.5, 8.0, 10.5, 13.0, 15.5, 18.0, 20.5, 23.0, 25.5, 28.0, 30.5, 33.0, 35.5, 38.0, 40.5,
    43.0, 45.5, 48.0, 50.5, 53.0, 55.5, 58.0, 60.5,
];

/// Configuration of one synthetic recording.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub channels: usize,
    pub length: usize,
    pub sample_rate_hz: f64,
    pub event_count: usize,
    /// Inclusive burst-length interval in samples.
    pub event_len_range: (usize, usize),
    pub propagation_delay_per_hop: usize,
    /// Directed weighted edges `(from, to, weight)` over channel indices.
    pub propagation_graph: Vec<(usize, usize, f64)>,
    pub amplitude_boost: f64,
    pub frequency_shift_hz: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 channels, got {}",
                self.channels
            )));
        }
        if self.channels > FREQ_GRID.len() {
            return Err(Error::InvalidArgument(format!(
                "frequency grid supports at most {} channels",
                FREQ_GRID.len()
            )));
        }
        if self.length == 0 {
            return Err(Error::InvalidArgument("length must be positive".into()));
        }
        if self.event_len_range.0 == 0 || self.event_len_range.0 > self.event_len_range.1 {
            return Err(Error::InvalidArgument(format!(
                "bad event length range {:?}",
                self.event_len_range
            )));
        }
        if self.amplitude_boost <= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "amplitude boost must exceed 1, got {}",
                self.amplitude_boost
            )));
        }
        for &(a, b, w) in &self.propagation_graph {
            if a >= self.channels || b >= self.channels {
                return Err(Error::InvalidArgument(format!(
                    "propagation edge ({a}, {b}) references a channel out of range"
                )));
            }
            if w <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "propagation edge ({a}, {b}) has non-positive weight {w}"
                )));
            }
        }
        Ok(())
    }

    /// Default desk-scale propagation layout: two chains out of channel 0.
    pub fn default_graph(channels: usize) -> Vec<(usize, usize, f64)> {
        let mut edges = Vec::new();
        let half = channels / 2;
        for i in 0..half.saturating_sub(1) {
            edges.push((i, i + 1, 1.0));
        }
        if half < channels {
            edges.push((0, half, 0.8));
            for i in half..channels - 1 {
                edges.push((i, i + 1, 0.8));
            }
        }
        edges
    }
}

/// Per-channel base frequencies, drawn without replacement from the grid.
pub fn channel_base_freqs(cfg: &SynthConfig) -> Vec<f64> {
    let mut grid: Vec<f64> = FREQ_GRID.to_vec();
    let mut rng = rng::stream(cfg.seed, "synth-freqs", 0);
    grid.shuffle(&mut rng);
    grid.truncate(cfg.channels);
    grid
}

/// One planned burst and where it lands on each affected channel.
#[derive(Debug, Clone)]
pub struct EventPlan {
    pub seed_channel: usize,
    pub burst_len: usize,
    pub freq_hz: f64,
    pub phase: f64,
    /// `(channel, start_sample, hop_count)` for every reachable channel.
    pub placements: Vec<(usize, usize, usize)>,
}

/// Generate the labeled-zero background recording.
pub fn generate_background(cfg: &SynthConfig) -> Result<Recording> {
    cfg.validate()?;
    let freqs = channel_base_freqs(cfg);
    let mut samples = Array2::zeros((cfg.length, cfg.channels));
    for c in 0..cfg.channels {
        let mut rng = rng::stream(cfg.seed, "synth-bg", c as u64);
        let f1 = freqs[c];
        // Companion tones, kept away from the grid so the base stays dominant.
        let f2 = f1 * 1.73 + 0.9;
        let f3 = f1 * 0.41 + 1.3;
        let phases: Vec<f64> = (0..3)
            .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
            .collect();
        for l in 0..cfg.length {
            let t = l as f64 / cfg.sample_rate_hz;
            let mut v = HARMONIC_AMPS[0] * (std::f64::consts::TAU * f1 * t + phases[0]).sin()
                + HARMONIC_AMPS[1] * (std::f64::consts::TAU * f2 * t + phases[1]).sin()
                + HARMONIC_AMPS[2] * (std::f64::consts::TAU * f3 * t + phases[2]).sin();
            let noise: f64 = StandardNormal.sample(&mut rng);
            v += NOISE_STD * noise;
            samples[[l, c]] = v as f32;
        }
    }
    let names = (0..cfg.channels).map(|i| format!("ch{i}")).collect();
    Recording::unlabeled(samples, cfg.sample_rate_hz, names)
}

/// Directed hop distances from `seed` over the propagation graph.
fn hop_distances(cfg: &SynthConfig, seed: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; cfg.channels];
    dist[seed] = Some(0);
    let mut frontier = vec![seed];
    while let Some(node) = frontier.pop() {
        let d = dist[node].unwrap();
        for &(a, b, _) in &cfg.propagation_graph {
            if a == node {
                let next = d + 1;
                if dist[b].map_or(true, |old| next < old) {
                    dist[b] = Some(next);
                    frontier.push(b);
                }
            }
        }
    }
    dist
}

/// Plan event placements. Returns the plans and the number of events skipped
/// because their full propagation span would not fit in the recording.
pub fn plan_events(cfg: &SynthConfig) -> Result<(Vec<EventPlan>, usize)> {
    cfg.validate()?;
    let freqs = channel_base_freqs(cfg);
    let mut rng = rng::stream(cfg.seed, "synth-events", 0);
    let mut plans = Vec::new();
    let mut skipped = 0usize;
    for _ in 0..cfg.event_count {
        let seed_channel = rng.random_range(0..cfg.channels);
        let burst_len = rng.random_range(cfg.event_len_range.0..=cfg.event_len_range.1);
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let dist = hop_distances(cfg, seed_channel);
        let max_hop = dist.iter().flatten().copied().max().unwrap_or(0);
        let total_span = burst_len + max_hop * cfg.propagation_delay_per_hop;
        if total_span > cfg.length {
            log::warn!(
                "event on channel {seed_channel} needs {total_span} samples, \
                 recording has {}; skipping",
                cfg.length
            );
            skipped += 1;
            continue;
        }
        let start = rng.random_range(0..=cfg.length - total_span);
        let placements = dist
            .iter()
            .enumerate()
            .filter_map(|(ch, hop)| {
                hop.map(|h| (ch, start + h * cfg.propagation_delay_per_hop, h))
            })
            .collect();
        plans.push(EventPlan {
            seed_channel,
            burst_len,
            freq_hz: freqs[seed_channel] + cfg.frequency_shift_hz,
            phase,
            placements,
        });
    }
    Ok((plans, skipped))
}

/// Inject the planned traveling-wave bursts into a background recording.
pub fn inject_events(rec: &Recording, cfg: &SynthConfig) -> Result<Recording> {
    let (plans, _) = plan_events(cfg)?;
    apply_events(rec, cfg, &plans)
}

/// Apply explicit event plans (exposed so tests can audit label spans).
pub fn apply_events(
    rec: &Recording,
    cfg: &SynthConfig,
    plans: &[EventPlan],
) -> Result<Recording> {
    if rec.channels() != cfg.channels || rec.len() != cfg.length {
        return Err(Error::Shape {
            what: "event injection target".into(),
            expected: format!("[{} x {}]", cfg.length, cfg.channels),
            actual: format!("[{} x {}]", rec.len(), rec.channels()),
        });
    }
    let mut samples = rec.samples.clone();
    let mut labels = rec.point_labels.clone();
    for plan in plans {
        for &(ch, start, _hop) in &plan.placements {
            for k in 0..plan.burst_len {
                let l = start + k;
                let t = l as f64 / cfg.sample_rate_hz;
                let hann = 0.5
                    * (1.0
                        - (std::f64::consts::TAU * k as f64 / plan.burst_len as f64).cos());
                let v = cfg.amplitude_boost
                    * hann
                    * (std::f64::consts::TAU * plan.freq_hz * t + plan.phase).sin();
                samples[[l, ch]] += v as f32;
                labels[[l, ch]] = 1;
            }
        }
    }
    Recording::new(
        samples,
        rec.sample_rate_hz,
        rec.channel_names.clone(),
        labels,
    )
}
