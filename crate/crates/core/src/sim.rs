//! Scenario runtime. Every device owns two radios, a flow-table switch and
//! its controller stack; piconets and BSSs carry frames between them, and a
//! single event queue drives the whole run.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::controller::{
    fallback_install, gratuitous_arps, session_rules, ArpCounters, ArpResponder, ControllerLiveness,
    DbAdvert, FallbackController, InterfaceRecord, LocalController, LocalDb, RuleIdGen, VirtualEndpoint,
};
use crate::energy::{EnergyError, EnergyLedger, StateTransition};
use crate::engine::{Engine, Trace};
use crate::handover::{evaluate_trigger, Decision, Direction, HandoverPhase, HandoverTimings, SyncReaction, SyncState};
use crate::link::{Channel, ChannelStats, Delivery, LinkError, Network, Topology};
use crate::mobility::Point;
use crate::model::{
    make_udp_packet, DeviceId, Endpoint, InterfaceKind, InterfaceState, IpAddress, MacAddress, Packet, PayloadId,
    PayloadIdGen, Protocol, SimTime, SyncMessage,
};
use crate::scenario::{Anchor, FlowSource, Scenario};
use crate::switch::{DropReason, FlowTable, ForwardDecision, MissBehavior, Port, RuleOrigin, Switch, SwitchCounters};
use crate::traffic::{speech_next_phase, FlowMetrics, SpeechModelConfig, SpeechPhase, ThroughputMeter};

/// UDP port of in-band control traffic (D2D, database updates, handover
/// signalling). Control frames bypass the flow table.
pub const CONTROL_PORT: u16 = 7300;
const CONTROL_FRAME_BYTES: u32 = 128;
const APP_PORT_BASE: u16 = 5000;
pub const MAX_DEVICES: usize = 250;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOptions {
    pub trace: bool,
    /// Keep per-packet send and delivery logs in the report.
    pub record_packets: bool,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("at most {MAX_DEVICES} devices are supported, got {0}")]
    TooManyDevices(usize),
    #[error("energy ledger of {device}: {source}")]
    Energy {
        device: String,
        #[source]
        source: EnergyError,
    },
}

/// Why a frame never reached its destination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DropCause {
    LinkLoss,
    OutOfRange,
    NoRoute,
    InterfaceDown,
    /// Steered to an interface whose configuration has not finished.
    HandoverWindow,
    ReceiverDown,
    Switch(DropReason),
}

impl DropCause {
    pub fn as_str(self) -> &'static str {
        match self {
            DropCause::LinkLoss => "link-loss",
            DropCause::OutOfRange => "out-of-range",
            DropCause::NoRoute => "no-route",
            DropCause::InterfaceDown => "interface-down",
            DropCause::HandoverWindow => "handover-window",
            DropCause::ReceiverDown => "receiver-down",
            DropCause::Switch(DropReason::RuleDrop) => "rule-drop",
            DropCause::Switch(DropReason::TableMiss) => "table-miss",
            DropCause::Switch(DropReason::UnknownPeer) => "unknown-peer",
            DropCause::Switch(DropReason::UnhandledMiss) => "unhandled-miss",
        }
    }
}

/// Application-side address of device `index` (0-based).
pub fn virtual_endpoint(index: usize) -> VirtualEndpoint {
    let n = (index + 1) as u8;
    VirtualEndpoint { mac: MacAddress([2, 0, 0, 0, 0, n]), ip: IpAddress::new(Ipv4Addr::new(10, 0, 0, n), 24) }
}

/// Physical addresses of device `index`'s interface of `kind`.
pub fn interface_address(index: usize, kind: InterfaceKind) -> (MacAddress, IpAddress) {
    let n = (index + 1) as u8;
    let k = match kind {
        InterfaceKind::WiFi => 1,
        InterfaceKind::Bluetooth => 2,
    };
    (MacAddress([2, 0, 0, k, 0, n]), IpAddress::new(Ipv4Addr::new(192, 168, k, n), 24))
}

#[derive(Debug, Clone)]
pub struct FlowReport {
    pub name: String,
    pub src: String,
    pub dst: String,
    pub metrics: FlowMetrics,
    /// Active span used for the mean rate.
    pub span: SimTime,
    pub drops: BTreeMap<DropCause, u64>,
    pub in_flight: u64,
}

impl FlowReport {
    pub fn dropped(&self) -> u64 {
        self.drops.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandoverRecord {
    pub device: String,
    pub peer: String,
    pub timings: HandoverTimings,
}

impl HandoverRecord {
    pub fn rule_done(&self) -> Option<SimTime> {
        self.timings.committed_at.map(|c| c + self.timings.t_rule_install)
    }

    pub fn config_done(&self) -> Option<SimTime> {
        self.timings.committed_at.map(|c| c + self.timings.t_config)
    }
}

#[derive(Debug, Clone)]
pub struct DeviceReport {
    pub name: String,
    pub energy: EnergyLedger,
    pub switch: SwitchCounters,
    pub arp: ArpCounters,
    pub flow_table: String,
    pub db: String,
    pub active: InterfaceKind,
}

#[derive(Debug, Clone)]
pub struct ChannelReport {
    pub network: String,
    pub kind: InterfaceKind,
    pub stats: ChannelStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketRecord {
    pub flow: usize,
    pub payload_id: PayloadId,
    pub sent_at: SimTime,
    pub at: SimTime,
}

/// App-boundary view of a delivered frame, kept for address audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryFrame {
    pub src_mac: MacAddress,
    pub dst_mac: MacAddress,
    pub src_ip: IpAddress,
    pub dst_ip: IpAddress,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub duration: SimTime,
    pub flows: Vec<FlowReport>,
    pub handovers: Vec<HandoverRecord>,
    pub devices: Vec<DeviceReport>,
    pub channels: Vec<ChannelReport>,
    pub violations: Vec<String>,
    pub trace: Option<String>,
    /// Emissions per flow; filled when `record_packets` is set.
    pub sent: Vec<PacketRecord>,
    pub delivered: Vec<PacketRecord>,
    pub boundary: Vec<BoundaryFrame>,
}

impl RunReport {
    pub fn flow(&self, name: &str) -> Option<&FlowReport> {
        self.flows.iter().find(|f| f.name == name)
    }

    pub fn device(&self, name: &str) -> Option<&DeviceReport> {
        self.devices.iter().find(|d| d.name == name)
    }
}

#[derive(Debug, Clone)]
enum ControlMsg {
    D2dRequest(DbAdvert),
    D2dResponse(DbAdvert),
    DbUpdate(DbAdvert),
    HandoverRequest { epoch: u64, direction: Direction },
    Syn(SyncMessage),
}

impl ControlMsg {
    fn label(&self) -> &'static str {
        match self {
            ControlMsg::D2dRequest(_) => "d2d-request",
            ControlMsg::D2dResponse(_) => "d2d-response",
            ControlMsg::DbUpdate(_) => "db-update",
            ControlMsg::HandoverRequest { .. } => "handover-request",
            ControlMsg::Syn(_) => "syn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activity {
    Config,
    Rules,
}

#[derive(Debug)]
enum Ev {
    Arrival { to: usize, kind: InterfaceKind, net: usize, packet: Packet },
    Emit { flow: usize, generation: u64 },
    SpeechToggle { flow: usize },
    WindowTick,
    Scripted { index: usize },
    InterfaceReady { dev: usize, run: u64 },
    Associated { dev: usize, run: u64 },
    SyncResend { dev: usize, run: u64 },
    Commit { dev: usize, run: u64 },
    ActivityDone { dev: usize, run: u64, activity: Activity },
    HandoverTimeout { dev: usize, run: u64 },
    OldIfaceOff { dev: usize, kind: InterfaceKind, token: u64 },
    D2dStart { dev: usize, peer: usize },
    D2dResend { dev: usize, peer: usize },
    SendControl { from: usize, to: usize, msg: ControlMsg },
    GratArp { dev: usize, kind: InterfaceKind },
    ControllerDie { dev: usize },
    ControllerRevive { dev: usize },
}

fn ki(kind: InterfaceKind) -> usize {
    match kind {
        InterfaceKind::WiFi => 0,
        InterfaceKind::Bluetooth => 1,
    }
}

#[derive(Debug, Clone, Copy)]
struct Iface {
    state: InterfaceState,
    network: Option<usize>,
    associated: bool,
    /// Network configuration done; application frames may use it.
    configured: bool,
}

#[derive(Debug)]
struct HandoverRun {
    run: u64,
    peer: usize,
    direction: Direction,
    epoch: u64,
    phase: HandoverPhase,
    started_at: SimTime,
    assoc_started: SimTime,
    association_duration: SimTime,
    sync: Option<SyncState>,
    sync_started: SimTime,
    sync_duration: SimTime,
    early_syn: bool,
    commit_scheduled: bool,
    committed_at: Option<SimTime>,
    t_config: SimTime,
    t_rule: SimTime,
    rules_done: bool,
    config_done: bool,
    lost: u64,
    snapshot: (FlowTable, LocalDb),
}

impl HandoverRun {
    fn advance(&mut self, to: HandoverPhase) {
        debug_assert!(self.phase.can_advance(to), "{:?} -> {:?}", self.phase, to);
        self.phase = to;
    }

    fn adopt_epoch(&mut self, epoch: u64) {
        if epoch > self.epoch {
            self.epoch = epoch;
            if let Some(s) = self.sync.as_mut() {
                s.epoch = epoch;
                s.received_syn = false;
            }
        }
    }

    fn timings(&self, device: usize) -> HandoverTimings {
        HandoverTimings {
            device: DeviceId(device as u32),
            direction: self.direction,
            epoch: self.epoch,
            started_at: self.started_at,
            association_duration: self.association_duration,
            sync_duration: self.sync_duration,
            t_config: self.t_config,
            t_rule_install: self.t_rule,
            committed_at: self.committed_at,
            lost_packets: self.lost,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct D2dPending {
    first_sent: SimTime,
    sends: u32,
}

struct Device {
    name: String,
    relay: bool,
    ifaces: [Iface; 2],
    switch: Switch,
    db: LocalDb,
    ids: RuleIdGen,
    liveness: ControllerLiveness,
    arp: ArpCounters,
    meter: ThroughputMeter,
    epoch: u64,
    handover: Option<HandoverRun>,
    linger_token: u64,
    transitions: Vec<StateTransition>,
    d2d: BTreeMap<usize, D2dPending>,
    session_peer: Option<usize>,
}

struct FlowRt {
    src: usize,
    dst: usize,
    port: u16,
    size: u32,
    interval: SimTime,
    start: SimTime,
    stop: SimTime,
    speech: Option<(SpeechModelConfig, SpeechPhase, SimTime)>,
    generation: u64,
    metrics: FlowMetrics,
    drops: BTreeMap<DropCause, u64>,
}

struct World<'s> {
    sc: &'s Scenario,
    opts: SimOptions,
    engine: Engine<Ev>,
    rng: ChaCha8Rng,
    trace: Trace,
    devices: Vec<Device>,
    networks: Vec<Network>,
    flows: Vec<FlowRt>,
    mac_owner: BTreeMap<MacAddress, (usize, InterfaceKind)>,
    virtual_macs: BTreeSet<MacAddress>,
    virtual_ips: BTreeSet<Ipv4Addr>,
    pids: PayloadIdGen,
    control: BTreeMap<PayloadId, ControlMsg>,
    app: BTreeMap<PayloadId, usize>,
    next_run: u64,
    handovers: Vec<HandoverRecord>,
    violations: Vec<String>,
    sent: Vec<PacketRecord>,
    delivered: Vec<PacketRecord>,
    boundary: Vec<BoundaryFrame>,
}

/// Runs `sc` to its duration with the scenario's own seed.
pub fn run_scenario(sc: &Scenario, opts: SimOptions) -> Result<RunReport, SimError> {
    let mut w = World::build(sc, opts)?;
    w.start();
    while let Some((now, ev)) = w.engine.next_event(sc.duration) {
        w.handle(now, ev);
    }
    w.finish()
}

impl<'s> World<'s> {
    fn build(sc: &'s Scenario, opts: SimOptions) -> Result<Self, SimError> {
        let n = sc.devices.len();
        if n > MAX_DEVICES {
            return Err(SimError::TooManyDevices(n));
        }
        let idx = |name: &str| sc.device_index(name).expect("validated scenario");
        let networks: Vec<Network> = sc
            .networks
            .iter()
            .map(|spec| {
                let members: BTreeSet<DeviceId> = spec.members.iter().map(|m| DeviceId(idx(m) as u32)).collect();
                let mut net = match &spec.anchor {
                    Anchor::Master(m) => Network::piconet(&spec.name, DeviceId(idx(m) as u32), members, spec.params),
                    Anchor::Ap(p) => Network::bss(&spec.name, *p, members, spec.params),
                };
                net.channel = Channel::new(spec.params).with_interval_log();
                net
            })
            .collect();
        let mut mac_owner = BTreeMap::new();
        let mut devices = Vec::with_capacity(n);
        let window = SimTime::from_secs_f64(sc.trigger.evaluation_period_s);
        for (i, d) in sc.devices.iter().enumerate() {
            let member_of = |kind: InterfaceKind| {
                networks.iter().position(|net| net.kind == kind && net.members.contains(&DeviceId(i as u32)))
            };
            let mut ifaces = [InterfaceKind::WiFi, InterfaceKind::Bluetooth].map(|kind| {
                let network = member_of(kind);
                let up = d.state(kind).is_up() && network.is_some();
                Iface { state: d.state(kind), network, associated: up, configured: up }
            });
            let records = [InterfaceKind::WiFi, InterfaceKind::Bluetooth].map(|kind| {
                let (mac, ip) = interface_address(i, kind);
                mac_owner.insert(mac, (i, kind));
                let iface = &ifaces[ki(kind)];
                InterfaceRecord {
                    kind,
                    mac,
                    ip,
                    network: iface.network.map(|n| networks[n].name.clone()),
                    connected: iface.associated,
                }
            });
            let mut db = LocalDb::new(DeviceId(i as u32), virtual_endpoint(i), d.active, records, sc.initial_rtt);
            db.relay = d.relay;
            let transitions = InterfaceKind::ALL
                .into_iter()
                .map(|kind| StateTransition { at: SimTime::ZERO, kind, state: ifaces[ki(kind)].state })
                .collect();
            // the active interface must carry traffic even if the file left it asleep
            let act = &mut ifaces[ki(d.active)];
            act.configured = act.associated;
            let session_peer = sc
                .flows
                .iter()
                .filter_map(|f| {
                    if f.src == d.name {
                        Some(idx(&f.dst))
                    } else if f.dst == d.name {
                        Some(idx(&f.src))
                    } else {
                        None
                    }
                })
                .find(|&p| {
                    sc.networks.iter().any(|net| net.members.contains(&d.name) && net.members.contains(&sc.devices[p].name))
                });
            devices.push(Device {
                name: d.name.clone(),
                relay: d.relay,
                ifaces,
                switch: Switch::new(MissBehavior::AskController),
                db,
                ids: RuleIdGen::new(),
                liveness: ControllerLiveness::default(),
                arp: ArpCounters::default(),
                meter: ThroughputMeter::new(window),
                epoch: 0,
                handover: None,
                linger_token: 0,
                transitions,
                d2d: BTreeMap::new(),
                session_peer,
            });
        }
        let flows = sc
            .flows
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let (rate, size, speech) = match &f.source {
                    FlowSource::Cbr { rate_kbps, size_bytes } => (*rate_kbps, *size_bytes, None),
                    FlowSource::Speech(c) => {
                        (c.on_rate_kbps, c.packet_size_bytes, Some((*c, SpeechPhase::Pause, SimTime::ZERO)))
                    }
                };
                FlowRt {
                    src: idx(&f.src),
                    dst: idx(&f.dst),
                    port: APP_PORT_BASE + i as u16,
                    size,
                    interval: crate::traffic::emit_interval(size, rate),
                    start: f.start,
                    stop: f.stop,
                    speech,
                    generation: 0,
                    metrics: FlowMetrics::default(),
                    drops: BTreeMap::new(),
                }
            })
            .collect();
        Ok(World {
            sc,
            opts,
            engine: Engine::new(),
            rng: ChaCha8Rng::seed_from_u64(sc.seed),
            trace: Trace::new(opts.trace),
            virtual_macs: (0..n).map(|i| virtual_endpoint(i).mac).collect(),
            virtual_ips: (0..n).map(|i| virtual_endpoint(i).ip.addr).collect(),
            devices,
            networks,
            flows,
            mac_owner,
            pids: PayloadIdGen::new(),
            control: BTreeMap::new(),
            app: BTreeMap::new(),
            next_run: 0,
            handovers: Vec::new(),
            violations: Vec::new(),
            sent: Vec::new(),
            delivered: Vec::new(),
            boundary: Vec::new(),
        })
    }

    fn now(&self) -> SimTime {
        self.engine.now()
    }

    fn at(&mut self, t: SimTime, ev: Ev) {
        if t <= self.sc.duration {
            self.engine.schedule(t, ev).expect("events are never scheduled in the past");
        }
    }

    fn after(&mut self, delay: SimTime, ev: Ev) {
        let t = self.now() + delay;
        self.at(t, ev);
    }

    fn violation(&mut self, msg: String) {
        log::warn!("invariant violation: {msg}");
        let now = self.now();
        self.trace.record(now, "violation", "-", || msg.clone());
        self.violations.push(format!("t={} {}", now.as_micros(), msg));
    }

    fn position(&self, dev: usize) -> Point {
        self.sc.devices[dev].position.at(self.now())
    }

    fn start(&mut self) {
        for (i, d) in self.devices.iter().enumerate() {
            for t in &d.transitions {
                let (kind, state) = (t.kind, t.state);
                self.trace.record(SimTime::ZERO, "iface-state", &d.name, || format!("kind={kind} state={state}"));
            }
            log::debug!("device {} ({}) active={}", d.name, i, d.db.active);
        }
        let n = self.devices.len();
        for a in 0..n {
            for b in a + 1..n {
                if self.link_between(a, b).is_some() {
                    self.at(SimTime::ZERO, Ev::D2dStart { dev: a, peer: b });
                }
            }
        }
        for (i, f) in self.flows.iter().enumerate() {
            let ev = if f.speech.is_some() { Ev::SpeechToggle { flow: i } } else { Ev::Emit { flow: i, generation: 0 } };
            self.engine.schedule(f.start, ev).expect("future");
        }
        if self.sc.trigger_enabled {
            let period = SimTime::from_secs_f64(self.sc.trigger.evaluation_period_s);
            self.at(period, Ev::WindowTick);
        }
        for (i, h) in self.sc.handovers.iter().enumerate() {
            self.at(h.at, Ev::Scripted { index: i });
        }
        for (i, d) in self.sc.devices.iter().enumerate() {
            if let Some(t) = d.controller_die_at {
                self.at(t, Ev::ControllerDie { dev: i });
            }
            if let Some(t) = d.controller_revive_at {
                self.at(t, Ev::ControllerRevive { dev: i });
            }
        }
    }

    fn handle(&mut self, now: SimTime, ev: Ev) {
        match ev {
            Ev::Arrival { to, kind, net, packet } => self.on_arrival(to, kind, net, packet),
            Ev::Emit { flow, generation } => self.on_emit(flow, generation),
            Ev::SpeechToggle { flow } => self.on_speech_toggle(flow),
            Ev::WindowTick => self.on_window_tick(),
            Ev::Scripted { index } => {
                let h = &self.sc.handovers[index];
                let (dev, peer, dir) = (
                    self.sc.device_index(&h.device).expect("validated"),
                    self.sc.device_index(&h.peer).expect("validated"),
                    h.direction,
                );
                self.initiate(dev, peer, dir, "scripted");
            }
            Ev::InterfaceReady { dev, run } => self.on_interface_ready(dev, run),
            Ev::Associated { dev, run } => self.on_associated(dev, run),
            Ev::SyncResend { dev, run } => self.on_sync_resend(dev, run),
            Ev::Commit { dev, run } => self.on_commit(dev, run),
            Ev::ActivityDone { dev, run, activity } => {
                if self.run_matches(dev, run) {
                    match activity {
                        Activity::Rules => self.apply_rules(dev),
                        Activity::Config => self.apply_config(dev),
                    }
                }
            }
            Ev::HandoverTimeout { dev, run } => {
                let pending = self.devices[dev]
                    .handover
                    .as_ref()
                    .is_some_and(|h| h.run == run && h.phase.on_old_link() && h.committed_at.is_none());
                if pending {
                    self.abort(dev, "sync timeout");
                }
            }
            Ev::OldIfaceOff { dev, kind, token } => self.on_old_iface_off(dev, kind, token),
            Ev::D2dStart { dev, peer } => self.on_d2d_start(dev, peer),
            Ev::D2dResend { dev, peer } => self.on_d2d_resend(dev, peer),
            Ev::SendControl { from, to, msg } => self.send_control(from, to, msg),
            Ev::GratArp { dev, kind } => self.send_gratuitous(dev, kind),
            Ev::ControllerDie { dev } => {
                self.devices[dev].liveness.kill(now);
                self.trace.record(now, "controller", &self.devices[dev].name, || "dead".into());
            }
            Ev::ControllerRevive { dev } => {
                self.devices[dev].liveness.revive(now);
                self.trace.record(now, "controller", &self.devices[dev].name, || "alive".into());
            }
        }
    }

    // ---- interfaces and energy ----

    fn set_state(&mut self, dev: usize, kind: InterfaceKind, to: InterfaceState) {
        let now = self.now();
        let d = &mut self.devices[dev];
        let from = d.ifaces[ki(kind)].state;
        if from == to {
            return;
        }
        if !from.can_transition(to) {
            let name = d.name.clone();
            self.violation(format!("illegal {kind} transition {from} -> {to} on {name}"));
            return;
        }
        d.ifaces[ki(kind)].state = to;
        d.transitions.push(StateTransition { at: now, kind, state: to });
        self.trace.record(now, "iface-state", &d.name, || format!("kind={kind} state={to}"));
    }

    /// A network of `kind` on which both devices are currently associated.
    fn associated_on(&self, a: usize, b: usize, kind: InterfaceKind) -> Option<usize> {
        let (ia, ib) = (&self.devices[a].ifaces[ki(kind)], &self.devices[b].ifaces[ki(kind)]);
        (ia.associated && ib.associated && ia.network.is_some() && ia.network == ib.network).then_some(ia.network?)
    }

    /// Interface to reach `b` from `a` on: the active one first, and one that
    /// is in range if possible.
    fn link_between(&self, a: usize, b: usize) -> Option<InterfaceKind> {
        let first = self.devices[a].db.active;
        let candidates: Vec<(InterfaceKind, usize)> = [first, first.other()]
            .into_iter()
            .filter_map(|k| self.associated_on(a, b, k).map(|n| (k, n)))
            .collect();
        let (pa, pb) = (self.position(a), self.position(b));
        candidates
            .iter()
            .find(|(_, n)| self.networks[*n].reachable(pa, pb))
            .or(candidates.first())
            .map(|(k, _)| *k)
    }

    fn bt_mutual_range(&self, a: usize, b: usize) -> bool {
        let kind = InterfaceKind::Bluetooth;
        match (self.devices[a].ifaces[ki(kind)].network, self.devices[b].ifaces[ki(kind)].network) {
            (Some(x), Some(y)) if x == y => self.networks[x].reachable(self.position(a), self.position(b)),
            _ => false,
        }
    }

    fn shares_network(&self, a: usize, b: usize, kind: InterfaceKind) -> bool {
        let (x, y) = (self.devices[a].ifaces[ki(kind)].network, self.devices[b].ifaces[ki(kind)].network);
        x.is_some() && x == y
    }

    // ---- frames ----

    fn drop_frame(&mut self, dev: usize, packet: &Packet, cause: DropCause) {
        let now = self.now();
        let pid = packet.payload_id;
        self.trace.record(now, "drop", &self.devices[dev].name, || format!("pid={pid} cause={}", cause.as_str()));
        if let Some(f) = self.app.remove(&pid) {
            *self.flows[f].drops.entry(cause).or_default() += 1;
        } else {
            self.control.remove(&pid);
        }
    }

    fn send_frame(&mut self, dev: usize, kind: InterfaceKind, packet: Packet) {
        let now = self.now();
        let is_app = self.app.contains_key(&packet.payload_id);
        let iface = self.devices[dev].ifaces[ki(kind)];
        let usable = iface.associated && iface.state.is_up() && (iface.configured || !is_app);
        if !usable {
            let mut cause = DropCause::InterfaceDown;
            if is_app {
                if let Some(h) = self.devices[dev].handover.as_mut() {
                    if h.rules_done && !h.config_done && h.direction.to_kind() == kind {
                        h.lost += 1;
                        cause = DropCause::HandoverWindow;
                    }
                }
            }
            self.drop_frame(dev, &packet, cause);
            return;
        }
        let net = iface.network.expect("associated implies a network");
        let Some(&(to, to_kind)) = self.mac_owner.get(&packet.dst_mac) else {
            self.drop_frame(dev, &packet, DropCause::NoRoute);
            return;
        };
        if to_kind != kind {
            self.drop_frame(dev, &packet, DropCause::NoRoute);
            return;
        }
        let (from_at, to_at) = (self.position(dev), self.position(to));
        let result = self.networks[net].transmit(
            now,
            (DeviceId(dev as u32), from_at),
            (DeviceId(to as u32), to_at),
            packet.size_bytes,
            &mut self.rng,
        );
        match result {
            Err(LinkError::NotMember(_)) => self.drop_frame(dev, &packet, DropCause::NoRoute),
            Err(LinkError::OutOfRange { .. }) => {
                self.drop_frame(dev, &packet, DropCause::OutOfRange);
                self.link_failure(dev, to, kind);
            }
            Ok(Delivery::Lost { .. }) => self.drop_frame(dev, &packet, DropCause::LinkLoss),
            Ok(Delivery::Arrives { at }) => {
                if at <= now {
                    self.violation(format!("arrival at {at} not after send at {now}"));
                }
                let (pid, size) = (packet.payload_id, packet.size_bytes);
                let to_name = &self.devices[to].name;
                self.trace.record(now, "send", &self.devices[dev].name, || {
                    format!("pid={pid} iface={kind} to={to_name} size={size} arrive_us={}", at.as_micros())
                });
                self.at(at, Ev::Arrival { to, kind, net, packet });
            }
        }
    }

    fn send_control(&mut self, from: usize, to: usize, msg: ControlMsg) {
        let now = self.now();
        let Some(kind) = self.link_between(from, to) else {
            let label = msg.label();
            let to_name = &self.devices[to].name;
            self.trace.record(now, "ctrl-unsent", &self.devices[from].name, || format!("{label} to={to_name}"));
            return;
        };
        let (smac, sip) = interface_address(from, kind);
        let (dmac, dip) = interface_address(to, kind);
        let src = Endpoint { mac: smac, ip: sip, port: CONTROL_PORT };
        let dst = Endpoint { mac: dmac, ip: dip, port: CONTROL_PORT };
        let packet = make_udp_packet(&mut self.pids, &src, &dst, CONTROL_FRAME_BYTES, now).expect("control frame size");
        let label = msg.label();
        let to_name = &self.devices[to].name;
        self.trace.record(now, "ctrl", &self.devices[from].name, || {
            format!("{label} pid={} to={to_name}", packet.payload_id)
        });
        self.control.insert(packet.payload_id, msg);
        self.send_frame(from, kind, packet);
    }

    fn on_arrival(&mut self, to: usize, kind: InterfaceKind, net: usize, packet: Packet) {
        let now = self.now();
        self.settle(to);
        let iface = self.devices[to].ifaces[ki(kind)];
        if !(iface.associated && iface.state.is_up() && iface.network == Some(net)) {
            self.networks[net].channel.mark_dropped_on_arrival();
            self.drop_frame(to, &packet, DropCause::ReceiverDown);
            return;
        }
        self.networks[net].channel.mark_delivered();
        if packet.protocol == Protocol::Udp && packet.dst_port == CONTROL_PORT {
            if let Some(msg) = self.control.remove(&packet.payload_id) {
                let from = self.mac_owner.get(&packet.src_mac).map(|o| o.0).expect("control frames use known addresses");
                self.on_control(to, from, msg);
            }
            return;
        }
        if packet.protocol == Protocol::Arp {
            let d = &mut self.devices[to];
            let mut responder = ArpResponder { db: &mut d.db, counters: &mut d.arp, outbox: Vec::new() };
            d.switch.intercept_arp(&packet, Port::Phys(kind), now, &mut responder);
            let outbox = responder.outbox;
            self.trace.record(now, "arp", &self.devices[to].name, || format!("from={} iface={kind}", packet.src_mac));
            for (port, reply) in outbox {
                if let Port::Phys(k) = port {
                    self.send_frame(to, k, reply);
                }
            }
            return;
        }
        let decision = self.switch_process(to, &packet, Port::Phys(kind));
        self.dispatch(to, &packet, decision);
    }

    fn switch_process(&mut self, dev: usize, packet: &Packet, in_port: Port) -> ForwardDecision {
        let now = self.now();
        let d = &mut self.devices[dev];
        let before = d.switch.counters.packet_ins;
        let mut local = LocalController { db: &d.db, ids: &d.ids, liveness: &d.liveness };
        let mut fallback = FallbackController { db: &d.db, ids: &d.ids, liveness: &d.liveness };
        let decision = d.switch.process(packet, in_port, now, &mut local, &mut fallback);
        if d.switch.counters.packet_ins != before {
            let pid = packet.payload_id;
            let alive = d.liveness.is_alive();
            self.trace.record(now, "packet-in", &d.name, || {
                format!("pid={pid} port={in_port} controller={}", if alive { "local" } else { "extended" })
            });
        }
        decision
    }

    fn dispatch(&mut self, dev: usize, original: &Packet, decision: ForwardDecision) {
        match decision {
            ForwardDecision::Forward { port: Port::Virtual, packet } => self.deliver_app(dev, packet),
            ForwardDecision::Forward { port: Port::Phys(k), packet } => self.send_frame(dev, k, packet),
            ForwardDecision::Drop(reason) => self.drop_frame(dev, original, DropCause::Switch(reason)),
        }
    }

    fn deliver_app(&mut self, dev: usize, p: Packet) {
        let now = self.now();
        let own = self.devices[dev].db.virtual_ep;
        let clean = self.virtual_macs.contains(&p.src_mac)
            && self.virtual_macs.contains(&p.dst_mac)
            && self.virtual_ips.contains(&p.src_ip.addr)
            && p.dst_ip.addr == own.ip.addr
            && p.dst_mac == own.mac;
        if !clean {
            let name = self.devices[dev].name.clone();
            self.violation(format!(
                "physical address reached the application on {name}: {} {} -> {} {}",
                p.src_mac, p.src_ip, p.dst_mac, p.dst_ip
            ));
        }
        if self.opts.record_packets {
            self.boundary.push(BoundaryFrame { src_mac: p.src_mac, dst_mac: p.dst_mac, src_ip: p.src_ip, dst_ip: p.dst_ip });
        }
        let Some(f) = self.app.remove(&p.payload_id) else {
            self.violation(format!("unexpected delivery of {} at {}", p.payload_id, self.devices[dev].name));
            return;
        };
        self.flows[f].metrics.on_received(p.sent_at, now, p.size_bytes);
        self.devices[dev].meter.record(now, p.size_bytes);
        if self.opts.record_packets {
            self.delivered.push(PacketRecord { flow: f, payload_id: p.payload_id, sent_at: p.sent_at, at: now });
        }
        let pid = p.payload_id;
        self.trace.record(now, "deliver", &self.devices[dev].name, || {
            format!("pid={pid} flow={} delay_us={}", self.sc.flows[f].name, (now - p.sent_at).as_micros())
        });
    }

    // ---- traffic ----

    fn on_emit(&mut self, fi: usize, generation: u64) {
        let now = self.now();
        let f = &self.flows[fi];
        if now >= f.stop || generation != f.generation {
            return;
        }
        let limit = match f.speech {
            Some((_, SpeechPhase::Talkspurt, end)) => end.min(f.stop),
            Some(_) => return,
            None => f.stop,
        };
        let (src, dst, port, size, interval) = (f.src, f.dst, f.port, f.size, f.interval);
        let (a, b) = (virtual_endpoint(src), virtual_endpoint(dst));
        let packet = make_udp_packet(
            &mut self.pids,
            &Endpoint { mac: a.mac, ip: a.ip, port },
            &Endpoint { mac: b.mac, ip: b.ip, port },
            size,
            now,
        )
        .expect("flow sizes are validated");
        self.flows[fi].metrics.on_sent();
        self.app.insert(packet.payload_id, fi);
        if self.opts.record_packets {
            self.sent.push(PacketRecord { flow: fi, payload_id: packet.payload_id, sent_at: now, at: now });
        }
        self.devices[src].meter.record(now, size);
        let next = now + interval;
        if next < limit {
            self.at(next, Ev::Emit { flow: fi, generation });
        }
        self.settle(src);
        let decision = self.switch_process(src, &packet, Port::Virtual);
        match decision {
            ForwardDecision::Forward { port: Port::Virtual, .. } => self.drop_frame(src, &packet, DropCause::NoRoute),
            other => self.dispatch(src, &packet, other),
        }
    }

    fn on_speech_toggle(&mut self, fi: usize) {
        let now = self.now();
        let f = &mut self.flows[fi];
        let Some((cfg, phase, _)) = f.speech else { return };
        if now >= f.stop {
            return;
        }
        let (next, dur) = speech_next_phase(&cfg, &mut self.rng, phase);
        let end = now + dur;
        f.speech = Some((cfg, next, end));
        f.generation += 1;
        let (generation, stop) = (f.generation, f.stop);
        self.trace.record(now, "speech", &self.sc.flows[fi].name, || {
            format!("phase={} until_us={}", if next == SpeechPhase::Talkspurt { "talk" } else { "pause" }, end.as_micros())
        });
        if end < stop {
            self.at(end, Ev::SpeechToggle { flow: fi });
        }
        if next == SpeechPhase::Talkspurt {
            self.on_emit(fi, generation);
        }
    }

    fn on_window_tick(&mut self) {
        let now = self.now();
        let period = SimTime::from_secs_f64(self.sc.trigger.evaluation_period_s);
        if now + period <= self.sc.duration {
            self.after(period, Ev::WindowTick);
        }
        for dev in 0..self.devices.len() {
            let d = &mut self.devices[dev];
            d.meter.close_until(now);
            d.db.traffic.throughput_kbps = d.meter.samples.clone();
            if d.relay || d.handover.is_some() {
                continue;
            }
            let Some(peer) = d.session_peer else { continue };
            let active = d.db.active;
            let mutual = self.bt_mutual_range(dev, peer);
            let decision = if active == InterfaceKind::Bluetooth && !mutual {
                // link supervision: the peer left Bluetooth range
                Decision::SwitchToWiFi
            } else {
                evaluate_trigger(&self.sc.trigger, &self.devices[dev].meter.samples, active, mutual)
            };
            if let Some(dir) = decision.direction() {
                let reason = if active == InterfaceKind::Bluetooth && !mutual { "link-lost" } else { "trigger" };
                self.initiate(dev, peer, dir, reason);
            }
        }
    }

    // ---- D2D and database updates ----

    fn on_d2d_start(&mut self, dev: usize, peer: usize) {
        let now = self.now();
        if self.devices[dev].db.exchange_done.contains(&DeviceId(peer as u32)) {
            return;
        }
        self.devices[dev].d2d.insert(peer, D2dPending { first_sent: now, sends: 1 });
        let advert = self.devices[dev].db.advert(now);
        self.send_control(dev, peer, ControlMsg::D2dRequest(advert));
        let rtt = self.devices[dev].db.traffic.rtt.estimate();
        self.after(rtt, Ev::D2dResend { dev, peer });
    }

    fn on_d2d_resend(&mut self, dev: usize, peer: usize) {
        let now = self.now();
        let Some(p) = self.devices[dev].d2d.get_mut(&peer) else { return };
        p.sends += 1;
        let advert = self.devices[dev].db.advert(now);
        self.send_control(dev, peer, ControlMsg::D2dRequest(advert));
        let rtt = self.devices[dev].db.traffic.rtt.estimate();
        self.after(rtt, Ev::D2dResend { dev, peer });
    }

    /// Merges `advert`; true when a direct peer was new to this device.
    fn absorb(&mut self, dev: usize, from: usize, advert: &DbAdvert, exchanged: bool) -> bool {
        let now = self.now();
        let db = &mut self.devices[dev].db;
        let from_id = DeviceId(from as u32);
        let fresh = db.peers.get(&from_id).is_none_or(|p| p.via.is_some());
        db.absorb(advert, now);
        if exchanged {
            db.exchange_done.insert(from_id);
        }
        fresh
    }

    fn relay_update(&mut self, dev: usize) {
        if !self.devices[dev].relay {
            return;
        }
        let now = self.now();
        let advert = self.devices[dev].db.advert(now);
        let rtt = self.devices[dev].db.traffic.rtt.estimate();
        let direct: Vec<usize> = self.devices[dev]
            .db
            .peers
            .values()
            .filter(|p| p.via.is_none())
            .map(|p| p.device.0 as usize)
            .collect();
        for to in direct {
            self.send_control(dev, to, ControlMsg::DbUpdate(advert.clone()));
            self.after(rtt, Ev::SendControl { from: dev, to, msg: ControlMsg::DbUpdate(advert.clone()) });
        }
    }

    fn on_control(&mut self, dev: usize, from: usize, msg: ControlMsg) {
        let now = self.now();
        match msg {
            ControlMsg::D2dRequest(advert) => {
                let fresh = self.absorb(dev, from, &advert, true);
                let reply = self.devices[dev].db.advert(now);
                self.send_control(dev, from, ControlMsg::D2dResponse(reply));
                if fresh {
                    self.relay_update(dev);
                }
            }
            ControlMsg::D2dResponse(advert) => {
                let fresh = self.absorb(dev, from, &advert, true);
                if let Some(p) = self.devices[dev].d2d.remove(&from) {
                    // Karn: only unambiguous exchanges give a sample
                    if p.sends == 1 {
                        self.devices[dev].db.traffic.rtt.observe(now - p.first_sent);
                    }
                }
                if fresh {
                    self.relay_update(dev);
                }
            }
            ControlMsg::DbUpdate(advert) => {
                self.absorb(dev, from, &advert, false);
            }
            ControlMsg::HandoverRequest { epoch, direction } => self.on_handover_request(dev, from, epoch, direction),
            ControlMsg::Syn(msg) => self.on_syn(dev, from, msg),
        }
    }

    fn send_gratuitous(&mut self, dev: usize, kind: InterfaceKind) {
        let now = self.now();
        let arps = gratuitous_arps(&self.devices[dev].db, kind, &mut self.pids, now);
        for (_, p) in arps {
            self.send_frame(dev, kind, p);
        }
    }

    // ---- handover ----

    fn run_matches(&self, dev: usize, run: u64) -> bool {
        self.devices[dev].handover.as_ref().is_some_and(|h| h.run == run)
    }

    fn can_hand_over(&self, dev: usize, peer: usize, dir: Direction) -> bool {
        let d = &self.devices[dev];
        d.handover.is_none() && !d.relay && d.db.active == dir.from_kind() && self.shares_network(dev, peer, dir.to_kind())
    }

    fn initiate(&mut self, dev: usize, peer: usize, dir: Direction, reason: &str) {
        let now = self.now();
        if !self.can_hand_over(dev, peer, dir) {
            self.trace.record(now, "handover-skip", &self.devices[dev].name, || format!("{dir} reason={reason}"));
            return;
        }
        let epoch = self.devices[dev].epoch + 1;
        log::info!("{} starts {dir} handover with {} ({reason})", self.devices[dev].name, self.devices[peer].name);
        self.start_handover(dev, peer, dir, epoch, reason);
        self.send_control(dev, peer, ControlMsg::HandoverRequest { epoch, direction: dir });
    }

    fn on_handover_request(&mut self, dev: usize, from: usize, epoch: u64, direction: Direction) {
        let now = self.now();
        let d = &mut self.devices[dev];
        match d.handover.as_mut() {
            Some(h) if h.peer == from && h.direction == direction => {
                h.adopt_epoch(epoch);
                d.epoch = h.epoch;
            }
            Some(_) => {
                self.trace.record(now, "handover-busy", &d.name, || format!("{direction} from={}", from));
            }
            None => {
                if self.can_hand_over(dev, from, direction) {
                    let epoch = epoch.max(self.devices[dev].epoch + 1);
                    self.start_handover(dev, from, direction, epoch, "request");
                } else {
                    let name = &self.devices[dev].name;
                    self.trace.record(now, "handover-skip", name, || format!("{direction} reason=request"));
                }
            }
        }
    }

    fn start_handover(&mut self, dev: usize, peer: usize, direction: Direction, epoch: u64, reason: &str) {
        let now = self.now();
        let run = self.next_run;
        self.next_run += 1;
        let d = &mut self.devices[dev];
        d.epoch = epoch;
        d.linger_token += 1;
        let snapshot = (d.switch.table.clone(), d.db.clone());
        d.handover = Some(HandoverRun {
            run,
            peer,
            direction,
            epoch,
            phase: HandoverPhase::Idle,
            started_at: now,
            assoc_started: now,
            association_duration: SimTime::ZERO,
            sync: None,
            sync_started: now,
            sync_duration: SimTime::ZERO,
            early_syn: false,
            commit_scheduled: false,
            committed_at: None,
            t_config: SimTime::ZERO,
            t_rule: SimTime::ZERO,
            rules_done: false,
            config_done: false,
            lost: 0,
            snapshot,
        });
        d.handover.as_mut().expect("just set").advance(HandoverPhase::WakingBackup);
        let peer_name = &self.devices[peer].name;
        self.trace.record(now, "handover-start", &self.devices[dev].name, || {
            format!("{direction} peer={peer_name} epoch={epoch} reason={reason}")
        });
        self.after(self.sc.sync_timeout, Ev::HandoverTimeout { dev, run });
        let backup = direction.to_kind();
        if self.devices[dev].ifaces[ki(backup)].state == InterfaceState::Off {
            self.set_state(dev, backup, InterfaceState::WakingUp);
            self.after(self.sc.energy.wakeup_duration(backup), Ev::InterfaceReady { dev, run });
        } else if self.devices[dev].ifaces[ki(backup)].associated {
            self.devices[dev].handover.as_mut().expect("running").advance(HandoverPhase::Associating);
            self.at(now, Ev::Associated { dev, run });
        } else {
            self.at(now, Ev::InterfaceReady { dev, run });
        }
    }

    fn on_interface_ready(&mut self, dev: usize, run: u64) {
        if !self.run_matches(dev, run) {
            return;
        }
        let now = self.now();
        let backup = self.devices[dev].handover.as_ref().expect("matched").direction.to_kind();
        if self.devices[dev].ifaces[ki(backup)].state == InterfaceState::WakingUp {
            self.set_state(dev, backup, InterfaceState::Sleep);
        }
        let h = self.devices[dev].handover.as_mut().expect("matched");
        h.advance(HandoverPhase::Associating);
        h.assoc_started = now;
        let Some(net) = self.devices[dev].ifaces[ki(backup)].network else {
            self.abort(dev, "no network");
            return;
        };
        let at = self.position(dev);
        let master_at = match self.networks[net].topology {
            Topology::Piconet { master } => Some(self.position(master.0 as usize)),
            Topology::Bss { .. } => None,
        };
        if !self.networks[net].can_associate(at, master_at) {
            self.abort(dev, "association failed");
            return;
        }
        let delay = self.networks[net].channel.params.base_delay + self.networks[net].channel.params.base_delay;
        self.after(delay, Ev::Associated { dev, run });
    }

    fn on_associated(&mut self, dev: usize, run: u64) {
        if !self.run_matches(dev, run) {
            return;
        }
        let now = self.now();
        let d = &mut self.devices[dev];
        let h = d.handover.as_mut().expect("matched");
        let backup = h.direction.to_kind();
        h.association_duration = now - h.assoc_started;
        h.advance(HandoverPhase::Synchronizing);
        d.ifaces[ki(backup)].associated = true;
        d.db.set_connected(backup, true);
        self.trace.record(now, "associated", &d.name, || format!("iface={backup}"));
        self.start_sync(dev);
    }

    fn start_sync(&mut self, dev: usize) {
        let now = self.now();
        let timeout = self.sc.sync_timeout;
        let d = &mut self.devices[dev];
        let rtt = d.db.traffic.rtt.estimate();
        let h = d.handover.as_mut().expect("running");
        let mut sync = SyncState::new(DeviceId(dev as u32), h.epoch, h.started_at, timeout);
        sync.received_syn = h.early_syn;
        h.sync_started = now;
        let msg = sync.make_syn(now);
        let complete = sync.complete();
        h.sync = Some(sync);
        let (peer, run) = (h.peer, h.run);
        self.send_control(dev, peer, ControlMsg::Syn(msg));
        if complete {
            self.schedule_commit(dev);
        } else {
            self.after(rtt.half(), Ev::SyncResend { dev, run });
        }
    }

    fn schedule_commit(&mut self, dev: usize) {
        let now = self.now();
        let d = &mut self.devices[dev];
        let rtt = d.db.traffic.rtt.estimate();
        let h = d.handover.as_mut().expect("running");
        h.commit_scheduled = true;
        let at = h.sync.as_ref().expect("synchronizing").commit_at(now, rtt);
        let run = h.run;
        self.at(at, Ev::Commit { dev, run });
    }

    fn on_sync_resend(&mut self, dev: usize, run: u64) {
        if !self.run_matches(dev, run) {
            return;
        }
        let now = self.now();
        let d = &mut self.devices[dev];
        let rtt = d.db.traffic.rtt.estimate();
        let h = d.handover.as_mut().expect("matched");
        if h.phase != HandoverPhase::Synchronizing {
            return;
        }
        let sync = h.sync.as_mut().expect("synchronizing");
        if !sync.needs_retransmit() || sync.expired(now) {
            return;
        }
        let msg = sync.make_syn(now);
        let peer = h.peer;
        self.send_control(dev, peer, ControlMsg::Syn(msg));
        self.after(rtt.half(), Ev::SyncResend { dev, run });
    }

    fn on_syn(&mut self, dev: usize, from: usize, msg: SyncMessage) {
        let now = self.now();
        let d = &mut self.devices[dev];
        let rtt = d.db.traffic.rtt.estimate();
        let Some(h) = d.handover.as_mut().filter(|h| h.peer == from) else {
            self.trace.record(now, "sync-stale", &d.name, || format!("epoch={}", msg.handover_epoch));
            return;
        };
        h.adopt_epoch(msg.handover_epoch);
        d.epoch = h.epoch;
        let Some(sync) = h.sync.as_mut() else {
            if msg.handover_epoch == h.epoch {
                h.early_syn = true;
            }
            return;
        };
        let SyncReaction::Accepted { reply } = sync.on_syn(&msg, now, rtt) else {
            return;
        };
        let reply = reply.then(|| sync.make_syn(now));
        let ready = sync.complete() && !h.commit_scheduled && h.phase == HandoverPhase::Synchronizing;
        let peer = h.peer;
        if let Some(m) = reply {
            self.send_control(dev, peer, ControlMsg::Syn(m));
        }
        if ready {
            self.schedule_commit(dev);
        }
    }

    fn on_commit(&mut self, dev: usize, run: u64) {
        if !self.run_matches(dev, run) {
            return;
        }
        let now = self.now();
        let d = &mut self.devices[dev];
        let dead = !d.liveness.is_alive();
        let h = d.handover.as_mut().expect("matched");
        if h.phase != HandoverPhase::Synchronizing {
            return;
        }
        h.advance(HandoverPhase::Committing);
        h.committed_at = Some(now);
        h.sync_duration = now - h.sync_started;
        let (t_config, mut t_rule) = self.sc.distributions.sample(h.direction, &mut self.rng);
        if dead {
            t_rule += self.sc.management_latency;
        }
        h.t_config = t_config;
        h.t_rule = t_rule;
        let dir = h.direction;
        self.trace.record(now, "handover-commit", &d.name, || {
            format!("{dir} t_config_us={} t_rule_us={}", t_config.as_micros(), t_rule.as_micros())
        });
        self.after(t_rule, Ev::ActivityDone { dev, run, activity: Activity::Rules });
        self.after(t_config, Ev::ActivityDone { dev, run, activity: Activity::Config });
    }

    /// Applies activities that are due at the current instant before any
    /// frame is processed, so the loss window is closed on the left.
    fn settle(&mut self, dev: usize) {
        let now = self.now();
        let Some(h) = self.devices[dev].handover.as_ref() else { return };
        let Some(c) = h.committed_at else { return };
        let (rules_due, config_due) = (!h.rules_done && c + h.t_rule <= now, !h.config_done && c + h.t_config <= now);
        if rules_due {
            self.apply_rules(dev);
        }
        if config_due && self.devices[dev].handover.is_some() {
            self.apply_config(dev);
        }
    }

    fn apply_rules(&mut self, dev: usize) {
        let now = self.now();
        let d = &mut self.devices[dev];
        let h = d.handover.as_mut().expect("running");
        if h.rules_done {
            return;
        }
        h.rules_done = true;
        let (new, peer) = (h.direction.to_kind(), DeviceId(h.peer as u32));
        let installed = if d.liveness.is_alive() {
            d.db.peers.get(&peer).and_then(|rec| {
                session_rules(&d.db, rec, new, RuleOrigin::LocalController, &d.ids, now).ok().map(|rules| {
                    for r in rules.iter().cloned() {
                        d.switch.table.install(r).expect("fresh rule ids");
                    }
                    RuleOrigin::LocalController
                })
            })
        } else {
            fallback_install(&d.db, &d.ids, &d.liveness, &mut d.switch, peer, new, now)
                .ok()
                .map(|_| RuleOrigin::ExtendedController)
        };
        d.db.active = new;
        self.trace.record(now, "rules-done", &d.name, || match installed {
            Some(origin) => format!("iface={new} origin={origin}"),
            None => format!("iface={new} origin=none"),
        });
        self.maybe_finish(dev);
    }

    fn apply_config(&mut self, dev: usize) {
        let now = self.now();
        let d = &mut self.devices[dev];
        let h = d.handover.as_mut().expect("running");
        if h.config_done {
            return;
        }
        h.config_done = true;
        let new = h.direction.to_kind();
        d.ifaces[ki(new)].configured = true;
        self.trace.record(now, "config-done", &d.name, || format!("iface={new}"));
        self.set_state(dev, new, InterfaceState::Active);
        self.maybe_finish(dev);
    }

    fn maybe_finish(&mut self, dev: usize) {
        let now = self.now();
        let d = &mut self.devices[dev];
        let Some(h) = d.handover.as_mut().filter(|h| h.rules_done && h.config_done) else { return };
        h.advance(HandoverPhase::Done);
        let timings = h.timings(dev);
        let (old, new, peer) = (h.direction.from_kind(), h.direction.to_kind(), h.peer);
        d.handover = None;
        d.meter.reset_history();
        d.db.traffic.throughput_kbps.clear();
        let token = d.linger_token;
        let rtt = d.db.traffic.rtt.estimate();
        self.trace.record(now, "handover-done", &d.name, || {
            format!("{} delay_us={} lost={}", timings.direction, timings.delay().as_micros(), timings.lost_packets)
        });
        self.handovers.push(HandoverRecord {
            device: self.devices[dev].name.clone(),
            peer: self.devices[peer].name.clone(),
            timings,
        });
        self.send_gratuitous(dev, new);
        self.after(rtt, Ev::GratArp { dev, kind: new });
        self.after(self.sc.old_interface_linger, Ev::OldIfaceOff { dev, kind: old, token });
    }

    fn on_old_iface_off(&mut self, dev: usize, kind: InterfaceKind, token: u64) {
        let d = &mut self.devices[dev];
        if d.linger_token != token || d.db.active == kind || d.handover.is_some() {
            return;
        }
        let iface = &mut d.ifaces[ki(kind)];
        iface.associated = false;
        iface.configured = false;
        d.db.set_connected(kind, false);
        let port = Port::Phys(kind);
        d.switch.table.remove_where(|r| r.match_fields.in_port == Some(port) || r.output_port() == Some(port));
        self.set_state(dev, kind, InterfaceState::Off);
    }

    /// Puts table and database back as they were before the attempt; the
    /// traffic statistics keep running.
    fn abort(&mut self, dev: usize, reason: &str) {
        let now = self.now();
        let d = &mut self.devices[dev];
        let Some(mut h) = d.handover.take() else { return };
        h.advance(HandoverPhase::Aborted);
        let (table, mut db) = std::mem::replace(&mut h.snapshot, (FlowTable::new(MissBehavior::Drop), d.db.clone()));
        db.traffic = d.db.traffic.clone();
        d.switch.table = table;
        d.db = db;
        let backup = h.direction.to_kind();
        let iface = &mut d.ifaces[ki(backup)];
        iface.associated = false;
        iface.configured = false;
        let timings = h.timings(dev);
        self.trace.record(now, "handover-abort", &d.name, || format!("{} reason={reason}", h.direction));
        log::info!("{} aborted {} handover: {reason}", d.name, h.direction);
        self.handovers.push(HandoverRecord {
            device: d.name.clone(),
            peer: self.devices[h.peer].name.clone(),
            timings,
        });
        self.set_state(dev, backup, InterfaceState::Off);
    }

    fn link_failure(&mut self, dev: usize, to: usize, kind: InterfaceKind) {
        if kind != InterfaceKind::Bluetooth || !self.sc.trigger_enabled {
            return;
        }
        let d = &self.devices[dev];
        if d.handover.is_some() || d.db.active != InterfaceKind::Bluetooth || d.relay {
            return;
        }
        self.initiate(dev, to, Direction::BluetoothToWiFi, "link-lost");
    }

    // ---- wrap-up ----

    fn finish(mut self) -> Result<RunReport, SimError> {
        let end = self.sc.duration;
        for net in &self.networks {
            let iv = net.channel.intervals();
            if let Some(w) = iv.windows(2).find(|w| w[1].0 < w[0].1) {
                self.violations.push(format!(
                    "half-duplex: overlapping transmissions on {} at {}",
                    net.name,
                    w[1].0.as_micros()
                ));
            }
            let s = net.channel.stats;
            if s.delivered + s.lost > s.sent {
                self.violations.push(format!("channel accounting on {}: {s:?}", net.name));
            }
        }
        let mut in_flight = vec![0u64; self.flows.len()];
        for f in self.app.values() {
            in_flight[*f] += 1;
        }
        let mut flows = Vec::with_capacity(self.flows.len());
        for (i, f) in self.flows.iter().enumerate() {
            let dropped: u64 = f.drops.values().sum();
            let m = &f.metrics;
            if m.loss.sent != m.loss.received + dropped + in_flight[i] {
                self.violations.push(format!(
                    "flow accounting on {}: sent {} != received {} + dropped {} + in flight {}",
                    self.sc.flows[i].name, m.loss.sent, m.loss.received, dropped, in_flight[i]
                ));
            }
            flows.push(FlowReport {
                name: self.sc.flows[i].name.clone(),
                src: self.devices[f.src].name.clone(),
                dst: self.devices[f.dst].name.clone(),
                metrics: f.metrics.clone(),
                span: f.stop.min(end).saturating_sub(f.start),
                drops: f.drops.clone(),
                in_flight: in_flight[i],
            });
        }
        let mut devices = Vec::with_capacity(self.devices.len());
        for d in &self.devices {
            let energy = EnergyLedger::from_transitions(self.sc.energy, &d.transitions, end)
                .map_err(|source| SimError::Energy { device: d.name.clone(), source })?;
            devices.push(DeviceReport {
                name: d.name.clone(),
                energy,
                switch: d.switch.counters,
                arp: d.arp,
                flow_table: d.switch.table.dump(),
                db: d.db.dump(),
                active: d.db.active,
            });
        }
        let channels = self
            .networks
            .iter()
            .map(|n| ChannelReport { network: n.name.clone(), kind: n.kind, stats: n.channel.stats })
            .collect();
        Ok(RunReport {
            scenario: self.sc.name.clone(),
            seed: self.sc.seed,
            duration: end,
            flows,
            handovers: self.handovers,
            devices,
            channels,
            violations: self.violations,
            trace: self.opts.trace.then(|| self.trace.into_string()),
            sent: self.sent,
            delivered: self.delivered,
            boundary: self.boundary,
        })
    }
}
