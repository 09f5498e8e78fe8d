//! Shared-medium link models: a Bluetooth piconet and a Wi-Fi BSS, both
//! half-duplex FIFO channels with serialization, propagation delay, jitter
//! and Bernoulli loss.

use std::collections::BTreeSet;

use rand::Rng;
use thiserror::Error;

use crate::mobility::{within_range, Point};
use crate::model::{DeviceId, InterfaceKind, SimTime};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JitterDist {
    Zero,
    /// Uniform on `[0, max]`, drawn in whole microseconds.
    Uniform { max: SimTime },
}

impl JitterDist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SimTime {
        match *self {
            JitterDist::Zero => SimTime::ZERO,
            JitterDist::Uniform { max } if max == SimTime::ZERO => SimTime::ZERO,
            JitterDist::Uniform { max } => SimTime(rng.gen_range(0..=max.0)),
        }
    }

    pub fn max(&self) -> SimTime {
        match *self {
            JitterDist::Zero => SimTime::ZERO,
            JitterDist::Uniform { max } => max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinkParamError {
    #[error("loss probability {0} outside [0, 1]")]
    LossProb(f64),
    #[error("link rate must be positive, got {0} kbps")]
    Rate(f64),
    #[error("range must be positive, got {0} m")]
    Range(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    pub base_delay: SimTime,
    pub jitter: JitterDist,
    pub loss_prob: f64,
    pub rate_kbps: f64,
    pub range_m: f64,
}

impl LinkParams {
    pub fn wifi_default() -> Self {
        LinkParams {
            base_delay: SimTime::from_millis(2),
            jitter: JitterDist::Uniform { max: SimTime::from_millis(2) },
            loss_prob: 0.0,
            rate_kbps: 20_000.0,
            range_m: 100.0,
        }
    }

    pub fn bluetooth_default() -> Self {
        LinkParams {
            base_delay: SimTime::from_millis(15),
            jitter: JitterDist::Uniform { max: SimTime::from_millis(10) },
            loss_prob: 0.0,
            rate_kbps: 700.0,
            range_m: 10.0,
        }
    }

    pub fn default_for(kind: InterfaceKind) -> Self {
        match kind {
            InterfaceKind::WiFi => Self::wifi_default(),
            InterfaceKind::Bluetooth => Self::bluetooth_default(),
        }
    }

    pub fn validate(&self) -> Result<(), LinkParamError> {
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(LinkParamError::LossProb(self.loss_prob));
        }
        if self.rate_kbps.is_nan() || self.rate_kbps <= 0.0 {
            return Err(LinkParamError::Rate(self.rate_kbps));
        }
        if self.range_m.is_nan() || self.range_m <= 0.0 {
            return Err(LinkParamError::Range(self.range_m));
        }
        Ok(())
    }

    /// `size_bytes * 8 / rate_kbps`, rounded to the nearest microsecond.
    pub fn serialization(&self, size_bytes: u32) -> SimTime {
        SimTime((size_bytes as f64 * 8.0 * 1000.0 / self.rate_kbps).round() as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Arrives { at: SimTime },
    Lost { hop: u8 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub sent: u64,
    pub delivered: u64,
    pub lost: u64,
}

impl ChannelStats {
    pub fn in_flight(&self) -> u64 {
        self.sent - self.delivered - self.lost
    }
}

/// Single-server FIFO medium. `busy_until` only moves forward, so reserved
/// transmission intervals never overlap.
#[derive(Debug, Clone)]
pub struct Channel {
    pub params: LinkParams,
    busy_until: SimTime,
    record_intervals: bool,
    intervals: Vec<(SimTime, SimTime)>,
    pub stats: ChannelStats,
}

impl Channel {
    pub fn new(params: LinkParams) -> Self {
        Channel {
            params,
            busy_until: SimTime::ZERO,
            record_intervals: false,
            intervals: Vec::new(),
            stats: ChannelStats::default(),
        }
    }

    pub fn with_interval_log(mut self) -> Self {
        self.record_intervals = true;
        self
    }

    pub fn busy_until(&self) -> SimTime {
        self.busy_until
    }

    /// Transmission intervals, when logging is enabled.
    pub fn intervals(&self) -> &[(SimTime, SimTime)] {
        &self.intervals
    }

    /// One hop: wait for the medium, serialize, then drop or propagate.
    /// Returns the arrival instant at the far end of the hop.
    fn hop<R: Rng + ?Sized>(&mut self, ready_at: SimTime, size_bytes: u32, rng: &mut R) -> Option<SimTime> {
        let start = ready_at.max(self.busy_until);
        let end = start + self.params.serialization(size_bytes);
        self.busy_until = end;
        if self.record_intervals {
            self.intervals.push((start, end));
        }
        let p = self.params.loss_prob;
        let lost = if p <= 0.0 {
            false
        } else if p >= 1.0 {
            true
        } else {
            rng.gen_bool(p)
        };
        if lost {
            return None;
        }
        Some(end + self.params.base_delay + self.params.jitter.sample(rng))
    }

    /// Sends a frame across `hops` consecutive hops of this medium (2 for a
    /// BSS, where every frame is relayed by the access point).
    pub fn transmit<R: Rng + ?Sized>(&mut self, now: SimTime, size_bytes: u32, hops: u8, rng: &mut R) -> Delivery {
        self.stats.sent += 1;
        let mut t = now;
        for h in 0..hops {
            match self.hop(t, size_bytes, rng) {
                Some(next) => t = next,
                None => {
                    self.stats.lost += 1;
                    return Delivery::Lost { hop: h };
                }
            }
        }
        Delivery::Arrives { at: t }
    }

    pub fn mark_delivered(&mut self) {
        self.stats.delivered += 1;
    }

    /// Frame reached the far end but was discarded there (receiver down).
    pub fn mark_dropped_on_arrival(&mut self) {
        self.stats.lost += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Topology {
    /// Bluetooth piconet arbitrated by `master`.
    Piconet { master: DeviceId },
    /// Wi-Fi BSS; all frames go device -> AP -> device.
    Bss { ap: Point },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("{0} is not a member of this network")]
    NotMember(DeviceId),
    #[error("{to} is out of range of {from}")]
    OutOfRange { from: DeviceId, to: DeviceId },
}

#[derive(Debug, Clone)]
pub struct Network {
    pub name: String,
    pub kind: InterfaceKind,
    pub topology: Topology,
    pub members: BTreeSet<DeviceId>,
    pub channel: Channel,
}

impl Network {
    pub fn piconet(name: &str, master: DeviceId, members: BTreeSet<DeviceId>, params: LinkParams) -> Self {
        Network {
            name: name.to_string(),
            kind: InterfaceKind::Bluetooth,
            topology: Topology::Piconet { master },
            members,
            channel: Channel::new(params),
        }
    }

    pub fn bss(name: &str, ap: Point, members: BTreeSet<DeviceId>, params: LinkParams) -> Self {
        Network {
            name: name.to_string(),
            kind: InterfaceKind::WiFi,
            topology: Topology::Bss { ap },
            members,
            channel: Channel::new(params),
        }
    }

    pub fn hops(&self) -> u8 {
        match self.topology {
            Topology::Piconet { .. } => 1,
            Topology::Bss { .. } => 2,
        }
    }

    /// Whether a member at `at` can associate (reach the master or AP).
    pub fn can_associate(&self, at: Point, master_at: Option<Point>) -> bool {
        match self.topology {
            Topology::Piconet { .. } => master_at.is_some_and(|m| within_range(at, m, self.channel.params.range_m)),
            Topology::Bss { ap } => within_range(at, ap, self.channel.params.range_m),
        }
    }

    /// Whether `a` and `b` can exchange frames given their current positions.
    pub fn reachable(&self, a: Point, b: Point) -> bool {
        let r = self.channel.params.range_m;
        match self.topology {
            Topology::Piconet { .. } => within_range(a, b, r),
            Topology::Bss { ap } => within_range(a, ap, r) && within_range(b, ap, r),
        }
    }

    /// Membership and range gate, then the channel model.
    pub fn transmit<R: Rng + ?Sized>(
        &mut self,
        now: SimTime,
        (from, from_at): (DeviceId, Point),
        (to, to_at): (DeviceId, Point),
        size_bytes: u32,
        rng: &mut R,
    ) -> Result<Delivery, LinkError> {
        if !self.members.contains(&from) {
            return Err(LinkError::NotMember(from));
        }
        if !self.members.contains(&to) {
            return Err(LinkError::NotMember(to));
        }
        if !self.reachable(from_at, to_at) {
            return Err(LinkError::OutOfRange { from, to });
        }
        let hops = self.hops();
        Ok(self.channel.transmit(now, size_bytes, hops, rng))
    }
}
