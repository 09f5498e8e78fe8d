//! Connection manager logic: when to hand over, the per-device handover
//! state machine, SYN synchronization and delay/loss accounting.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::engine::Engine;
use crate::model::{DeviceId, InterfaceKind, SimTime, SyncKind, SyncMessage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerConfig {
    pub no_traffic_threshold_kbps: f64,
    pub threshold_wb_s: f64,
    pub evaluation_period_s: f64,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        TriggerConfig { no_traffic_threshold_kbps: 5.0, threshold_wb_s: 3.0, evaluation_period_s: 1.0 }
    }
}

impl TriggerConfig {
    /// Number of consecutive samples the decision looks at.
    pub fn window_len(&self) -> usize {
        (self.threshold_wb_s / self.evaluation_period_s).ceil().max(1.0) as usize
    }

    pub fn is_valid(&self) -> bool {
        [self.no_traffic_threshold_kbps, self.threshold_wb_s, self.evaluation_period_s]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    SwitchToBluetooth,
    SwitchToWiFi,
    Stay,
}

impl Decision {
    pub fn direction(self) -> Option<Direction> {
        match self {
            Decision::SwitchToBluetooth => Some(Direction::WiFiToBluetooth),
            Decision::SwitchToWiFi => Some(Direction::BluetoothToWiFi),
            Decision::Stay => None,
        }
    }
}

pub fn evaluate_trigger(cfg: &TriggerConfig, history: &[f64], active: InterfaceKind, bt_mutual_range: bool) -> Decision {
    let n = cfg.window_len();
    if history.len() < n {
        return Decision::Stay;
    }
    let window = &history[history.len() - n..];
    let quiet = |kbps: &f64| *kbps < cfg.no_traffic_threshold_kbps;
    match active {
        InterfaceKind::WiFi if bt_mutual_range && window.iter().all(quiet) => Decision::SwitchToBluetooth,
        InterfaceKind::Bluetooth if !window.iter().any(quiet) => Decision::SwitchToWiFi,
        _ => Decision::Stay,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    WiFiToBluetooth,
    BluetoothToWiFi,
}

impl Direction {
    pub fn from_kind(self) -> InterfaceKind {
        match self {
            Direction::WiFiToBluetooth => InterfaceKind::WiFi,
            Direction::BluetoothToWiFi => InterfaceKind::Bluetooth,
        }
    }

    pub fn to_kind(self) -> InterfaceKind {
        self.from_kind().other()
    }

    pub fn towards(kind: InterfaceKind) -> Direction {
        match kind {
            InterfaceKind::Bluetooth => Direction::WiFiToBluetooth,
            InterfaceKind::WiFi => Direction::BluetoothToWiFi,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::WiFiToBluetooth => "wifi-to-bluetooth",
            Direction::BluetoothToWiFi => "bluetooth-to-wifi",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wifi-to-bluetooth" => Ok(Direction::WiFiToBluetooth),
            "bluetooth-to-wifi" => Ok(Direction::BluetoothToWiFi),
            _ => Err(format!("unknown direction `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HandoverPhase {
    Idle,
    WakingBackup,
    Associating,
    Synchronizing,
    Committing,
    Done,
    Aborted,
}

impl HandoverPhase {
    pub fn can_advance(self, to: HandoverPhase) -> bool {
        use HandoverPhase::*;
        matches!(
            (self, to),
            (Idle, WakingBackup)
                | (WakingBackup, Associating)
                | (Associating, Synchronizing)
                | (Synchronizing, Committing)
                | (Committing, Done)
                | (WakingBackup | Associating | Synchronizing, Aborted)
        )
    }

    /// Data still flows over the old interface.
    pub fn on_old_link(self) -> bool {
        !matches!(self, HandoverPhase::Done)
    }

    pub fn is_busy(self) -> bool {
        !matches!(self, HandoverPhase::Idle | HandoverPhase::Done | HandoverPhase::Aborted)
    }
}

/// Duration distribution of one commit activity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivityDist {
    Fixed(SimTime),
    /// Drawn on `[lo, hi)` in whole microseconds.
    Uniform { lo: SimTime, hi: SimTime },
    /// A fraction of the network configuration time drawn for the same
    /// handover. Only meaningful for rule installation.
    FractionOfConfig(f64),
}

impl ActivityDist {
    pub fn uniform_ms(lo: f64, hi: f64) -> Self {
        ActivityDist::Uniform { lo: SimTime::from_millis_f64(lo), hi: SimTime::from_millis_f64(hi) }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, config: Option<SimTime>) -> SimTime {
        match *self {
            ActivityDist::Fixed(d) => d,
            ActivityDist::Uniform { lo, hi } if hi > lo => {
                SimTime(Uniform::new(lo.as_micros(), hi.as_micros()).sample(rng))
            }
            ActivityDist::Uniform { lo, .. } => lo,
            ActivityDist::FractionOfConfig(f) => {
                SimTime((config.unwrap_or(SimTime::ZERO).as_micros() as f64 * f).round() as u64)
            }
        }
    }

    pub fn is_valid_for_config(&self) -> bool {
        match *self {
            ActivityDist::Fixed(_) => true,
            ActivityDist::Uniform { lo, hi } => hi >= lo,
            ActivityDist::FractionOfConfig(_) => false,
        }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            ActivityDist::FractionOfConfig(f) => f.is_finite() && f >= 0.0,
            _ => self.is_valid_for_config(),
        }
    }
}

impl fmt::Display for ActivityDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivityDist::Fixed(d) => write!(f, "fixed({})", d),
            ActivityDist::Uniform { lo, hi } => write!(f, "uniform({}, {})", lo, hi),
            ActivityDist::FractionOfConfig(x) => write!(f, "config*{}", x),
        }
    }
}

impl FromStr for ActivityDist {
    type Err = String;

    /// `fixed(80ms)`, `uniform(70ms, 90ms)` or `config*0.1667`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let args = |prefix: &str| -> Option<Vec<&str>> {
            s.strip_prefix(prefix)?.strip_suffix(')').map(|a| a.split(',').map(str::trim).collect())
        };
        let time = |v: &str| v.parse::<SimTime>().map_err(|e| format!("{e}"));
        if let Some(a) = args("fixed(") {
            if let [d] = a[..] {
                return Ok(ActivityDist::Fixed(time(d)?));
            }
        } else if let Some(a) = args("uniform(") {
            if let [lo, hi] = a[..] {
                return Ok(ActivityDist::Uniform { lo: time(lo)?, hi: time(hi)? });
            }
        } else if let Some(x) = s.strip_prefix("config*") {
            return x.trim().parse().map(ActivityDist::FractionOfConfig).map_err(|_| format!("bad fraction `{x}`"));
        }
        Err(format!("unrecognised distribution `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivityDistributions {
    pub b2w_config: ActivityDist,
    pub b2w_rule_install: ActivityDist,
    pub w2b_config: ActivityDist,
    pub w2b_rule_install: ActivityDist,
}

impl Default for ActivityDistributions {
    fn default() -> Self {
        ActivityDistributions {
            b2w_config: ActivityDist::uniform_ms(70.0, 90.0),
            b2w_rule_install: ActivityDist::uniform_ms(70.0, 90.0),
            w2b_config: ActivityDist::uniform_ms(80.0, 150.0),
            w2b_rule_install: ActivityDist::FractionOfConfig(1.0 / 6.0),
        }
    }
}

impl ActivityDistributions {
    /// Draws `(t_config, t_rule_install)` for one handover.
    pub fn sample<R: Rng + ?Sized>(&self, direction: Direction, rng: &mut R) -> (SimTime, SimTime) {
        let (c, r) = match direction {
            Direction::BluetoothToWiFi => (self.b2w_config, self.b2w_rule_install),
            Direction::WiFiToBluetooth => (self.w2b_config, self.w2b_rule_install),
        };
        let config = c.sample(rng, None);
        (config, r.sample(rng, Some(config)))
    }

    pub fn is_valid(&self) -> bool {
        self.b2w_config.is_valid_for_config()
            && self.w2b_config.is_valid_for_config()
            && self.b2w_rule_install.is_valid()
            && self.w2b_rule_install.is_valid()
    }
}

/// One device's record of a handover attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct HandoverTimings {
    pub device: DeviceId,
    pub direction: Direction,
    pub epoch: u64,
    pub started_at: SimTime,
    pub association_duration: SimTime,
    pub sync_duration: SimTime,
    pub t_config: SimTime,
    pub t_rule_install: SimTime,
    pub committed_at: Option<SimTime>,
    pub lost_packets: u64,
}

impl HandoverTimings {
    pub fn delay(&self) -> SimTime {
        self.t_config.max(self.t_rule_install)
    }

    pub fn aborted(&self) -> bool {
        self.committed_at.is_none()
    }
}

/// Packets in `[rule_done, config_done)` are steered to an interface that
/// cannot carry them yet.
pub fn handover_loss(rule_done: SimTime, config_done: SimTime, arrivals: &[SimTime]) -> u64 {
    arrivals.iter().filter(|&&t| t >= rule_done && t < config_done).count() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncReaction {
    /// Wrong epoch or wrong kind of message.
    Stale,
    /// Accepted; `reply` asks the caller to answer so the peer learns that
    /// its SYN got through.
    Accepted { reply: bool },
}

/// Per-device state of the SYN handshake.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncState {
    pub device: DeviceId,
    pub epoch: u64,
    pub sent_syn: bool,
    pub received_syn: bool,
    pub started_at: SimTime,
    pub deadline: SimTime,
    pub last_send: Option<SimTime>,
    pub sends: u32,
}

impl SyncState {
    pub fn new(device: DeviceId, epoch: u64, now: SimTime, timeout: SimTime) -> Self {
        SyncState {
            device,
            epoch,
            sent_syn: false,
            received_syn: false,
            started_at: now,
            deadline: now + timeout,
            last_send: None,
            sends: 0,
        }
    }

    pub fn make_syn(&mut self, now: SimTime) -> SyncMessage {
        self.sent_syn = true;
        self.last_send = Some(now);
        self.sends += 1;
        SyncMessage { kind: SyncKind::Syn, sender: self.device, handover_epoch: self.epoch, peer_seen: self.received_syn }
    }

    /// A reply is only due when the peer still hasn't heard us although our
    /// last SYN should have reached it a full RTT ago.
    pub fn on_syn(&mut self, msg: &SyncMessage, now: SimTime, rtt: SimTime) -> SyncReaction {
        if msg.kind != SyncKind::Syn || msg.handover_epoch != self.epoch || msg.sender == self.device {
            return SyncReaction::Stale;
        }
        self.received_syn = true;
        let ours_overdue = self.last_send.is_none_or(|t| now >= t + rtt);
        SyncReaction::Accepted { reply: !msg.peer_seen && ours_overdue }
    }

    pub fn complete(&self) -> bool {
        self.sent_syn && self.received_syn
    }

    /// Keep retransmitting until the peer has been heard from.
    pub fn needs_retransmit(&self) -> bool {
        !self.received_syn
    }

    pub fn expired(&self, now: SimTime) -> bool {
        now >= self.deadline
    }

    /// Half an RTT after the last SYN left, so the peer has it too.
    pub fn commit_at(&self, now: SimTime, rtt: SimTime) -> SimTime {
        now.max(self.last_send.unwrap_or(now) + rtt.half())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncOutcome {
    Success { committed_at: SimTime, duration: SimTime, sends: u32 },
    Timeout { at: SimTime, sends: u32 },
}

/// Two-node handshake over a symmetric link, used to study the protocol in
/// isolation. `ready` gives when each side finishes association (`None`
/// never). Messages take `one_way` and are lost with `loss_prob`.
pub struct SyncLink {
    pub one_way: SimTime,
    pub rtt_estimate: SimTime,
    pub timeout: SimTime,
    pub loss_prob: f64,
}

#[derive(Debug)]
enum SyncEvent {
    Ready(usize),
    Resend(usize),
    Deliver(usize, SyncMessage),
    Commit(usize),
}

impl SyncLink {
    pub fn run<R: Rng + ?Sized>(&self, ready: [Option<SimTime>; 2], rng: &mut R) -> [SyncOutcome; 2] {
        let ids = [DeviceId(0), DeviceId(1)];
        let mut engine: Engine<SyncEvent> = Engine::new();
        let mut states: [Option<SyncState>; 2] = [None, None];
        let mut early: [bool; 2] = [false, false];
        let mut outcomes: [Option<SyncOutcome>; 2] = [None, None];
        let mut commit_pending = [false; 2];
        for (i, r) in ready.iter().enumerate() {
            if let Some(t) = r {
                engine.schedule(*t, SyncEvent::Ready(i)).expect("future");
            }
        }
        let horizon = ready.iter().flatten().max().copied().unwrap_or(SimTime::ZERO) + self.timeout + self.timeout;
        let send = |engine: &mut Engine<SyncEvent>, st: &mut SyncState, rng: &mut R, now: SimTime, to: usize| {
            let msg = st.make_syn(now);
            if !(self.loss_prob > 0.0 && rng.gen_bool(self.loss_prob.min(1.0))) {
                engine.schedule_in(self.one_way, SyncEvent::Deliver(to, msg));
            }
        };
        while let Some((now, ev)) = engine.next_event(horizon) {
            match ev {
                SyncEvent::Ready(i) => {
                    let mut st = SyncState::new(ids[i], 1, now, self.timeout);
                    st.received_syn = early[i];
                    send(&mut engine, &mut st, rng, now, 1 - i);
                    if st.complete() {
                        commit_pending[i] = true;
                        engine.schedule(st.commit_at(now, self.rtt_estimate), SyncEvent::Commit(i)).expect("future");
                    } else {
                        engine.schedule_in(self.rtt_estimate.half(), SyncEvent::Resend(i));
                    }
                    states[i] = Some(st);
                }
                SyncEvent::Resend(i) => {
                    let Some(st) = states[i].as_mut() else { continue };
                    if outcomes[i].is_some() || !st.needs_retransmit() {
                        continue;
                    }
                    if st.expired(now) {
                        outcomes[i] = Some(SyncOutcome::Timeout { at: now, sends: st.sends });
                        continue;
                    }
                    send(&mut engine, st, rng, now, 1 - i);
                    engine.schedule_in(self.rtt_estimate.half(), SyncEvent::Resend(i));
                }
                SyncEvent::Deliver(i, msg) => match states[i].as_mut() {
                    None => early[i] = true,
                    Some(st) => {
                        if let SyncReaction::Accepted { reply } = st.on_syn(&msg, now, self.rtt_estimate) {
                            if reply {
                                send(&mut engine, st, rng, now, 1 - i);
                            }
                            if st.complete() && !commit_pending[i] && outcomes[i].is_none() {
                                commit_pending[i] = true;
                                engine.schedule(st.commit_at(now, self.rtt_estimate), SyncEvent::Commit(i)).expect("future");
                            }
                        }
                    }
                },
                SyncEvent::Commit(i) => {
                    let st = states[i].as_ref().expect("committing side is ready");
                    outcomes[i].get_or_insert(SyncOutcome::Success {
                        committed_at: now,
                        duration: now - st.started_at,
                        sends: st.sends,
                    });
                }
            }
        }
        let finish = |i: usize| {
            outcomes[i].unwrap_or_else(|| {
                let (at, sends) = match &states[i] {
                    Some(st) => (st.deadline, st.sends),
                    None => (horizon, 0),
                };
                SyncOutcome::Timeout { at, sends }
            })
        };
        [finish(0), finish(1)]
    }
}
