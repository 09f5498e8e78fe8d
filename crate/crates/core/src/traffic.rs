//! Traffic sources and QoS metrology.

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::model::SimTime;

/// Below this a window counts as "no traffic".
pub const NO_TRAFFIC_KBPS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CbrConfig {
    pub rate_kbps: f64,
    pub packet_size_bytes: u32,
    pub start: SimTime,
    pub stop: SimTime,
}

impl CbrConfig {
    /// Gap between emissions, rounded to the nearest microsecond.
    pub fn interval(&self) -> SimTime {
        emit_interval(self.packet_size_bytes, self.rate_kbps)
    }
}

pub fn emit_interval(size_bytes: u32, rate_kbps: f64) -> SimTime {
    SimTime((size_bytes as f64 * 8.0 * 1000.0 / rate_kbps).round().max(1.0) as u64)
}

pub fn cbr_schedule(cfg: &CbrConfig) -> Vec<SimTime> {
    let step = cfg.interval();
    let mut out = Vec::new();
    let mut t = cfg.start;
    while t < cfg.stop {
        out.push(t);
        t += step;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeechModelConfig {
    pub mean_talkspurt_s: f64,
    pub mean_pause_s: f64,
    pub mean_mutual_silence_s: f64,
    pub on_rate_kbps: f64,
    pub packet_size_bytes: u32,
}

impl Default for SpeechModelConfig {
    fn default() -> Self {
        SpeechModelConfig {
            mean_talkspurt_s: 1.004,
            mean_pause_s: 1.587,
            mean_mutual_silence_s: 0.508,
            on_rate_kbps: 64.0,
            packet_size_bytes: 200,
        }
    }
}

impl SpeechModelConfig {
    /// Time for both sides to hear each other once: twice a mutual silence
    /// plus a talkspurt.
    pub fn threshold_wb_s(&self) -> f64 {
        2.0 * (self.mean_mutual_silence_s + self.mean_talkspurt_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpeechPhase {
    Talkspurt,
    Pause,
}

/// Next on/off phase and how long it lasts. Durations are exponential with
/// the configured means; the peer's talkspurt shows up here as a pause.
pub fn speech_next_phase<R: Rng + ?Sized>(
    cfg: &SpeechModelConfig,
    rng: &mut R,
    current: SpeechPhase,
) -> (SpeechPhase, SimTime) {
    let (next, mean) = match current {
        SpeechPhase::Talkspurt => (SpeechPhase::Pause, cfg.mean_pause_s),
        SpeechPhase::Pause => (SpeechPhase::Talkspurt, cfg.mean_talkspurt_s),
    };
    let d = Exp::new(1.0 / mean).expect("positive mean").sample(rng);
    (next, SimTime::from_secs_f64(d))
}

/// Interarrival jitter with the 1/16 gain used by RTP receivers and iperf.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JitterEstimator {
    pub j_us: f64,
    pub prev_transit_us: Option<i64>,
    samples: u64,
    sum_us: f64,
    max_us: f64,
}

impl JitterEstimator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, sent: SimTime, received: SimTime) {
        let transit = received.as_micros() as i64 - sent.as_micros() as i64;
        if let Some(prev) = self.prev_transit_us {
            let d = (transit - prev).abs() as f64;
            self.j_us += (d - self.j_us) / 16.0;
            self.samples += 1;
            self.sum_us += self.j_us;
            self.max_us = self.max_us.max(self.j_us);
        }
        self.prev_transit_us = Some(transit);
    }

    pub fn jitter_ms(&self) -> f64 {
        self.j_us / 1000.0
    }

    /// Mean of the running estimate over all updates after the first packet.
    pub fn avg_ms(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.sum_us / self.samples as f64 / 1000.0
        }
    }

    pub fn max_ms(&self) -> f64 {
        self.max_us / 1000.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LossStats {
    pub sent: u64,
    pub received: u64,
}

impl LossStats {
    pub fn loss_rate(&self) -> f64 {
        if self.sent == 0 {
            0.0
        } else {
            1.0 - self.received as f64 / self.sent as f64
        }
    }
}

pub fn is_no_traffic(kbps: f64) -> bool {
    kbps < NO_TRAFFIC_KBPS
}

fn window_kbps(bytes: u64, window: SimTime) -> f64 {
    bytes as f64 * 8.0 / 1000.0 / window.as_secs_f64()
}

/// Per-window kbps over `[0, end)` for `(arrival, bytes)` deliveries.
/// A trailing partial window is dropped.
pub fn window_throughput(window: SimTime, deliveries: &[(SimTime, u32)], end: SimTime) -> Vec<f64> {
    let n = (end.as_micros() / window.as_micros()) as usize;
    let mut bytes = vec![0u64; n];
    for &(at, size) in deliveries {
        let k = (at.as_micros() / window.as_micros()) as usize;
        if k < n {
            bytes[k] += size as u64;
        }
    }
    bytes.into_iter().map(|b| window_kbps(b, window)).collect()
}

/// Streaming form of [`window_throughput`] for the connection manager.
#[derive(Debug, Clone)]
pub struct ThroughputMeter {
    pub window: SimTime,
    window_start: SimTime,
    bytes: u64,
    pub samples: Vec<f64>,
}

impl ThroughputMeter {
    pub fn new(window: SimTime) -> Self {
        ThroughputMeter { window, window_start: SimTime::ZERO, bytes: 0, samples: Vec::new() }
    }

    pub fn record(&mut self, at: SimTime, bytes: u32) {
        self.close_until(at);
        self.bytes += bytes as u64;
    }

    /// Closes every window ending at or before `now`.
    pub fn close_until(&mut self, now: SimTime) {
        while self.window_start + self.window <= now {
            self.samples.push(window_kbps(self.bytes, self.window));
            self.bytes = 0;
            self.window_start += self.window;
        }
    }

    /// Forgets history, e.g. after a handover changes the link.
    pub fn reset_history(&mut self) {
        self.samples.clear();
    }

    pub fn last(&self, n: usize) -> Option<&[f64]> {
        self.samples.len().checked_sub(n).map(|i| &self.samples[i..])
    }
}

/// Per-flow receiver statistics.
#[derive(Debug, Clone, Default)]
pub struct FlowMetrics {
    pub loss: LossStats,
    pub jitter: JitterEstimator,
    pub bytes_received: u64,
    pub first_rx: Option<SimTime>,
    pub last_rx: Option<SimTime>,
}

impl FlowMetrics {
    pub fn on_sent(&mut self) {
        self.loss.sent += 1;
    }

    pub fn on_received(&mut self, sent: SimTime, at: SimTime, bytes: u32) {
        self.loss.received += 1;
        self.bytes_received += bytes as u64;
        self.jitter.update(sent, at);
        self.first_rx.get_or_insert(at);
        self.last_rx = Some(at);
    }

    /// Received kbps over `span`.
    pub fn mean_kbps(&self, span: SimTime) -> f64 {
        if span == SimTime::ZERO {
            return 0.0;
        }
        window_kbps(self.bytes_received, span)
    }
}

/// Sample mean and half-width of a normal-approximation 95% interval.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}
