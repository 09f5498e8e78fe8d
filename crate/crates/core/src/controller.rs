//! Per-device control plane: the local SDN controller, and the extended
//! controller's information manager (LocalDb, D2D exchange, ARP handling) and
//! flow-rules fallback path.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{
    DeviceId, InterfaceKind, IpAddress, MacAddress, Packet, PayloadIdGen, Protocol, SimTime, MIN_FRAME_BYTES,
};
use crate::switch::{ArpSink, ControllerError, FlowAction, FlowRule, MatchFields, Port, RuleId, RuleOrigin, RuleSource, Switch};

/// Priority of rules synthesized for peer sessions and relay transit.
pub const SESSION_PRIORITY: u16 = 100;

/// Address pair presented to applications; never changes across handovers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VirtualEndpoint {
    pub mac: MacAddress,
    pub ip: IpAddress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Liveness {
    Alive,
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControllerLiveness {
    pub state: Liveness,
    pub died_at: Option<SimTime>,
    pub revived_at: Option<SimTime>,
}

impl Default for ControllerLiveness {
    fn default() -> Self {
        ControllerLiveness { state: Liveness::Alive, died_at: None, revived_at: None }
    }
}

impl ControllerLiveness {
    pub fn kill(&mut self, at: SimTime) {
        self.state = Liveness::Dead;
        self.died_at = Some(at);
    }

    pub fn revive(&mut self, at: SimTime) {
        self.state = Liveness::Alive;
        self.revived_at = Some(at);
    }

    pub fn is_alive(&self) -> bool {
        self.state == Liveness::Alive
    }

    /// The extended controller stands in exactly while the local one is down.
    pub fn fallback_active(&self) -> bool {
        self.state == Liveness::Dead
    }
}

/// Shared by both controllers of a device so rule ids stay unique per table.
#[derive(Debug, Default)]
pub struct RuleIdGen {
    next: Cell<u64>,
}

impl RuleIdGen {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fresh(&self) -> RuleId {
        let id = self.next.get();
        self.next.set(id + 1);
        RuleId(id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterfaceRecord {
    pub kind: InterfaceKind,
    pub mac: MacAddress,
    pub ip: IpAddress,
    /// Name of the piconet or BSS this interface joins, if any.
    pub network: Option<String>,
    pub connected: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerInterface {
    pub mac: MacAddress,
    pub ip: IpAddress,
    pub reachable: bool,
    pub last_updated: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerRecord {
    pub device: DeviceId,
    pub virtual_ep: VirtualEndpoint,
    pub interfaces: BTreeMap<InterfaceKind, PeerInterface>,
    pub active: InterfaceKind,
    /// Relay device through which this peer is reached, if not direct.
    pub via: Option<DeviceId>,
}

/// Smoothed round-trip estimate (gain 1/8). The first sample replaces the
/// configured initial guess.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RttEstimator {
    srtt_us: f64,
    samples: u64,
}

impl RttEstimator {
    pub fn new(initial: SimTime) -> Self {
        RttEstimator { srtt_us: initial.as_micros() as f64, samples: 0 }
    }

    pub fn observe(&mut self, sample: SimTime) {
        let s = sample.as_micros() as f64;
        if self.samples == 0 {
            self.srtt_us = s;
        } else {
            self.srtt_us += (s - self.srtt_us) / 8.0;
        }
        self.samples += 1;
    }

    pub fn estimate(&self) -> SimTime {
        SimTime(self.srtt_us.round().max(1.0) as u64)
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficStats {
    pub throughput_kbps: Vec<f64>,
    pub rtt: RttEstimator,
}

/// What one device knows about itself and its peers.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDb {
    pub device: DeviceId,
    pub virtual_ep: VirtualEndpoint,
    pub active: InterfaceKind,
    pub self_records: BTreeMap<InterfaceKind, InterfaceRecord>,
    pub peers: BTreeMap<DeviceId, PeerRecord>,
    pub traffic: TrafficStats,
    pub exchange_done: BTreeSet<DeviceId>,
    /// Whether this device forwards between its two interfaces.
    pub relay: bool,
}

/// Payload of a D2D exchange or update message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbAdvert {
    pub sender: PeerRecord,
    /// Peers the sender can reach on its other interface (relay devices only).
    pub relayed: Vec<PeerRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum D2dError {
    #[error("{0} and {1} share no connected network")]
    UnreachablePeer(DeviceId, DeviceId),
}

impl LocalDb {
    pub fn new(
        device: DeviceId,
        virtual_ep: VirtualEndpoint,
        active: InterfaceKind,
        records: [InterfaceRecord; 2],
        initial_rtt: SimTime,
    ) -> Self {
        LocalDb {
            device,
            virtual_ep,
            active,
            self_records: records.into_iter().map(|r| (r.kind, r)).collect(),
            peers: BTreeMap::new(),
            traffic: TrafficStats { throughput_kbps: Vec::new(), rtt: RttEstimator::new(initial_rtt) },
            exchange_done: BTreeSet::new(),
            relay: false,
        }
    }

    pub fn iface(&self, kind: InterfaceKind) -> &InterfaceRecord {
        &self.self_records[&kind]
    }

    pub fn set_connected(&mut self, kind: InterfaceKind, connected: bool) {
        if let Some(r) = self.self_records.get_mut(&kind) {
            r.connected = connected;
        }
    }

    /// Connected networks this device shares with `other`.
    pub fn common_networks(&self, other: &LocalDb) -> Vec<InterfaceKind> {
        InterfaceKind::ALL
            .into_iter()
            .filter(|k| {
                let (a, b) = (self.iface(*k), other.iface(*k));
                a.connected && b.connected && a.network.is_some() && a.network == b.network
            })
            .collect()
    }

    fn own_record(&self, now: SimTime) -> PeerRecord {
        PeerRecord {
            device: self.device,
            virtual_ep: self.virtual_ep,
            interfaces: self
                .self_records
                .values()
                .map(|r| {
                    (r.kind, PeerInterface { mac: r.mac, ip: r.ip, reachable: r.connected, last_updated: now })
                })
                .collect(),
            active: self.active,
            via: None,
        }
    }

    pub fn advert(&self, now: SimTime) -> DbAdvert {
        let relayed = if self.relay {
            self.peers.values().filter(|p| p.via.is_none()).cloned().collect()
        } else {
            Vec::new()
        };
        DbAdvert { sender: self.own_record(now), relayed }
    }

    /// Merges a peer's advert. Direct knowledge always wins over relayed.
    pub fn absorb(&mut self, advert: &DbAdvert, now: SimTime) {
        let mut sender = advert.sender.clone();
        sender.via = None;
        for i in sender.interfaces.values_mut() {
            i.last_updated = now;
        }
        self.peers.insert(sender.device, sender);
        for r in &advert.relayed {
            if r.device == self.device {
                continue;
            }
            if self.peers.get(&r.device).is_some_and(|p| p.via.is_none()) {
                continue;
            }
            let mut r = r.clone();
            r.via = Some(advert.sender.device);
            for i in r.interfaces.values_mut() {
                i.last_updated = now;
            }
            self.peers.insert(r.device, r);
        }
    }

    pub fn peer_by_virtual_ip(&self, ip: &IpAddress) -> Option<&PeerRecord> {
        self.peers.values().find(|p| p.virtual_ep.ip.addr == ip.addr)
    }

    /// Peer owning physical address `ip` on any interface.
    pub fn peer_by_phys_ip(&self, ip: &IpAddress) -> Option<(&PeerRecord, InterfaceKind)> {
        self.peers
            .values()
            .find_map(|p| p.interfaces.iter().find(|(_, i)| i.ip.addr == ip.addr).map(|(k, _)| (p, *k)))
    }

    /// Canonical, key-sorted dump; one record per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "self {} virtual={} {} active={} relay={}",
            self.device, self.virtual_ep.mac, self.virtual_ep.ip, self.active, self.relay
        );
        for r in self.self_records.values() {
            let _ = writeln!(
                out,
                "self_if {} {} mac={} ip={} network={} connected={}",
                self.device,
                r.kind,
                r.mac,
                r.ip,
                r.network.as_deref().unwrap_or("-"),
                r.connected
            );
        }
        for p in self.peers.values() {
            let via = p.via.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "peer {} virtual={} {} active={} via={}",
                p.device, p.virtual_ep.mac, p.virtual_ep.ip, p.active, via
            );
            for (k, i) in &p.interfaces {
                let _ = writeln!(
                    out,
                    "peer_if {} {} mac={} ip={} reachable={} updated_us={}",
                    p.device,
                    k,
                    i.mac,
                    i.ip,
                    i.reachable,
                    i.last_updated.as_micros()
                );
            }
        }
        for d in &self.exchange_done {
            let _ = writeln!(out, "exchanged {d}");
        }
        let _ = writeln!(
            out,
            "traffic rtt_us={} samples={} windows={}",
            self.traffic.rtt.estimate().as_micros(),
            self.traffic.rtt.samples(),
            self.traffic.throughput_kbps.len()
        );
        out
    }
}

/// One-shot information exchange between two devices. Returns `false` when
/// the pair had already exchanged (no-op).
pub fn d2d_exchange(a: &mut LocalDb, b: &mut LocalDb, now: SimTime) -> Result<bool, D2dError> {
    if a.exchange_done.contains(&b.device) && b.exchange_done.contains(&a.device) {
        return Ok(false);
    }
    if a.common_networks(b).is_empty() {
        return Err(D2dError::UnreachablePeer(a.device, b.device));
    }
    let (adv_a, adv_b) = (a.advert(now), b.advert(now));
    a.absorb(&adv_b, now);
    b.absorb(&adv_a, now);
    a.exchange_done.insert(b.device);
    b.exchange_done.insert(a.device);
    Ok(true)
}

/// Forward and reverse rules for a session with `peer` carried on `kind`.
/// Forward translates virtual addresses to the physical ones of `kind`;
/// reverse maps arrivals on `kind` back to virtual addresses on port 0.
pub fn session_rules(
    db: &LocalDb,
    peer: &PeerRecord,
    kind: InterfaceKind,
    origin: RuleOrigin,
    ids: &RuleIdGen,
    now: SimTime,
) -> Result<[FlowRule; 2], ControllerError> {
    let own = db.iface(kind);
    let (next_hop_mac, peer_ip) = match peer.via {
        None => {
            let pi = peer.interfaces.get(&kind).ok_or(ControllerError::UnknownPeer)?;
            (pi.mac, pi.ip)
        }
        Some(relay) => {
            let r = db.peers.get(&relay).ok_or(ControllerError::UnknownPeer)?;
            let hop = r.interfaces.get(&kind).ok_or(ControllerError::UnknownPeer)?;
            let far = peer.interfaces.get(&peer.active).ok_or(ControllerError::UnknownPeer)?;
            (hop.mac, far.ip)
        }
    };
    let forward = FlowRule {
        id: ids.fresh(),
        priority: SESSION_PRIORITY,
        match_fields: MatchFields { in_port: Some(Port::Virtual), ip_dst: Some(peer.virtual_ep.ip), ..Default::default() },
        actions: vec![
            FlowAction::SetEthSrc(own.mac),
            FlowAction::SetIpSrc(own.ip),
            FlowAction::SetEthDst(next_hop_mac),
            FlowAction::SetIpDst(peer_ip),
            FlowAction::Output(Port::Phys(kind)),
        ],
        installed_at: now,
        origin,
    };
    let reverse = FlowRule {
        id: ids.fresh(),
        priority: SESSION_PRIORITY,
        match_fields: MatchFields {
            in_port: Some(Port::Phys(kind)),
            ip_src: Some(peer_ip),
            ip_dst: Some(own.ip),
            ..Default::default()
        },
        actions: vec![
            FlowAction::SetEthSrc(peer.virtual_ep.mac),
            FlowAction::SetIpSrc(peer.virtual_ep.ip),
            FlowAction::SetEthDst(db.virtual_ep.mac),
            FlowAction::SetIpDst(db.virtual_ep.ip),
            FlowAction::Output(Port::Virtual),
        ],
        installed_at: now,
        origin,
    };
    Ok([forward, reverse])
}

/// Transit rules on a relay: frames for `dst` arriving on `ingress` leave on
/// the other interface with link-layer addresses of the next hop, and the
/// reverse direction likewise.
fn transit_rules(
    db: &LocalDb,
    ingress: InterfaceKind,
    src: &(IpAddress, MacAddress),
    dst: &(IpAddress, MacAddress),
    origin: RuleOrigin,
    ids: &RuleIdGen,
    now: SimTime,
) -> [FlowRule; 2] {
    let egress = ingress.other();
    let out = FlowRule {
        id: ids.fresh(),
        priority: SESSION_PRIORITY,
        match_fields: MatchFields {
            in_port: Some(Port::Phys(ingress)),
            ip_src: Some(src.0),
            ip_dst: Some(dst.0),
            ..Default::default()
        },
        actions: vec![
            FlowAction::SetEthSrc(db.iface(egress).mac),
            FlowAction::SetEthDst(dst.1),
            FlowAction::Output(Port::Phys(egress)),
        ],
        installed_at: now,
        origin,
    };
    let back = FlowRule {
        id: ids.fresh(),
        priority: SESSION_PRIORITY,
        match_fields: MatchFields {
            in_port: Some(Port::Phys(egress)),
            ip_src: Some(dst.0),
            ip_dst: Some(src.0),
            ..Default::default()
        },
        actions: vec![
            FlowAction::SetEthSrc(db.iface(ingress).mac),
            FlowAction::SetEthDst(src.1),
            FlowAction::Output(Port::Phys(ingress)),
        ],
        installed_at: now,
        origin,
    };
    [out, back]
}

/// Rule synthesis for a table miss, shared by both controllers.
pub fn synthesize(
    db: &LocalDb,
    p: &Packet,
    in_port: Port,
    origin: RuleOrigin,
    ids: &RuleIdGen,
    now: SimTime,
) -> Result<Vec<FlowRule>, ControllerError> {
    match in_port {
        Port::Virtual => {
            let peer = db.peer_by_virtual_ip(&p.dst_ip).ok_or(ControllerError::UnknownPeer)?;
            Ok(session_rules(db, peer, db.active, origin, ids, now)?.to_vec())
        }
        Port::Phys(kind) => {
            if p.dst_ip.addr == db.iface(kind).ip.addr {
                // Arrival for us: pick the peer by its physical source address.
                let peer = db
                    .peers
                    .values()
                    .find(|peer| match peer.via {
                        None => peer.interfaces.get(&kind).is_some_and(|i| i.ip.addr == p.src_ip.addr),
                        Some(_) => peer.interfaces.values().any(|i| i.ip.addr == p.src_ip.addr),
                    })
                    .ok_or(ControllerError::UnknownPeer)?;
                let [_, reverse] = session_rules(db, peer, kind, origin, ids, now)?;
                let [forward, _] = session_rules(db, peer, db.active, origin, ids, now)?;
                Ok(vec![forward, reverse])
            } else if db.relay {
                let egress = kind.other();
                let (dst_peer, _) = db
                    .peer_by_phys_ip(&p.dst_ip)
                    .filter(|(peer, k)| *k == egress && peer.via.is_none())
                    .ok_or(ControllerError::UnknownPeer)?;
                let dst_mac = dst_peer.interfaces[&egress].mac;
                let (src_peer, _) = db
                    .peer_by_phys_ip(&p.src_ip)
                    .filter(|(peer, k)| *k == kind && peer.via.is_none())
                    .ok_or(ControllerError::UnknownPeer)?;
                let src_mac = src_peer.interfaces[&kind].mac;
                Ok(transit_rules(db, kind, &(p.src_ip, src_mac), &(p.dst_ip, dst_mac), origin, ids, now).to_vec())
            } else {
                Err(ControllerError::UnknownPeer)
            }
        }
    }
}

/// The local SDN controller as seen by the switch.
pub struct LocalController<'a> {
    pub db: &'a LocalDb,
    pub ids: &'a RuleIdGen,
    pub liveness: &'a ControllerLiveness,
}

impl RuleSource for LocalController<'_> {
    fn packet_in(&mut self, p: &Packet, in_port: Port, now: SimTime) -> Result<Vec<FlowRule>, ControllerError> {
        if !self.liveness.is_alive() {
            return Err(ControllerError::Dead);
        }
        synthesize(self.db, p, in_port, RuleOrigin::LocalController, self.ids, now)
    }
}

/// The extended controller's flow-rules component, used only while the
/// local controller is down.
pub struct FallbackController<'a> {
    pub db: &'a LocalDb,
    pub ids: &'a RuleIdGen,
    pub liveness: &'a ControllerLiveness,
}

impl RuleSource for FallbackController<'_> {
    fn packet_in(&mut self, p: &Packet, in_port: Port, now: SimTime) -> Result<Vec<FlowRule>, ControllerError> {
        if !self.liveness.fallback_active() {
            return Err(ControllerError::Dead);
        }
        synthesize(self.db, p, in_port, RuleOrigin::ExtendedController, self.ids, now)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FallbackError {
    #[error("local controller is alive; fallback not permitted")]
    LocalAlive,
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

/// Installs session rules for `peer` on `kind` straight into the switch via
/// the management path.
pub fn fallback_install(
    db: &LocalDb,
    ids: &RuleIdGen,
    liveness: &ControllerLiveness,
    switch: &mut Switch,
    peer: DeviceId,
    kind: InterfaceKind,
    now: SimTime,
) -> Result<[FlowRule; 2], FallbackError> {
    if !liveness.fallback_active() {
        return Err(FallbackError::LocalAlive);
    }
    let peer = db.peers.get(&peer).ok_or(ControllerError::UnknownPeer)?;
    let rules = session_rules(db, peer, kind, RuleOrigin::ExtendedController, ids, now)?;
    for r in rules.iter().cloned() {
        switch.table.install(r).expect("fresh rule ids are unique");
    }
    Ok(rules)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ArpCounters {
    pub requests_answered: u64,
    pub arp_unresolved: u64,
    pub announcements: u64,
    pub unknown_announcer: u64,
}

/// ARP endpoint of the extended controller. Replies are queued in `outbox`
/// for the caller to transmit.
pub struct ArpResponder<'a> {
    pub db: &'a mut LocalDb,
    pub counters: &'a mut ArpCounters,
    pub outbox: Vec<(Port, Packet)>,
}

impl ArpSink for ArpResponder<'_> {
    fn handle_arp(&mut self, p: &Packet, in_port: Port, now: SimTime) {
        if p.is_gratuitous_arp() {
            let Port::Phys(kind) = in_port else { return };
            let owner = self
                .db
                .peers
                .values()
                .find(|peer| peer.interfaces.get(&kind).is_some_and(|i| i.mac == p.src_mac || i.ip.addr == p.src_ip.addr))
                .map(|peer| peer.device);
            let Some(owner) = owner else {
                self.counters.unknown_announcer += 1;
                return;
            };
            let peer = self.db.peers.get_mut(&owner).expect("found above");
            peer.active = kind;
            for (k, i) in peer.interfaces.iter_mut() {
                if *k == kind {
                    i.mac = p.src_mac;
                    i.ip = p.src_ip;
                    i.reachable = true;
                    i.last_updated = now;
                } else {
                    i.reachable = false;
                }
            }
            self.counters.announcements += 1;
            return;
        }
        if !p.dst_mac.is_broadcast() {
            // a reply to someone else's request
            return;
        }
        let target = p.dst_ip;
        let answer = self
            .db
            .peers
            .values()
            .find_map(|peer| {
                if peer.virtual_ep.ip.addr == target.addr {
                    return Some(peer.virtual_ep.mac);
                }
                peer.interfaces.values().find(|i| i.ip.addr == target.addr).map(|i| i.mac)
            });
        match answer {
            Some(mac) => {
                self.counters.requests_answered += 1;
                let reply = Packet {
                    src_mac: mac,
                    dst_mac: p.src_mac,
                    src_ip: target,
                    dst_ip: p.src_ip,
                    protocol: Protocol::Arp,
                    src_port: 0,
                    dst_port: 0,
                    payload_id: p.payload_id,
                    size_bytes: MIN_FRAME_BYTES,
                    sent_at: now,
                };
                self.outbox.push((in_port, reply));
            }
            None => self.counters.arp_unresolved += 1,
        }
    }
}

/// Announcements of `kind`'s addresses, one per direct peer known to have
/// an interface of that kind.
pub fn gratuitous_arps(db: &LocalDb, kind: InterfaceKind, ids: &mut PayloadIdGen, now: SimTime) -> Vec<(DeviceId, Packet)> {
    let own = db.iface(kind);
    db.peers
        .values()
        .filter(|p| p.via.is_none())
        .filter_map(|p| p.interfaces.get(&kind).map(|i| (p.device, i.mac)))
        .map(|(dev, mac)| {
            (
                dev,
                Packet {
                    src_mac: own.mac,
                    dst_mac: mac,
                    src_ip: own.ip,
                    dst_ip: own.ip,
                    protocol: Protocol::Arp,
                    src_port: 0,
                    dst_port: 0,
                    payload_id: ids.fresh(),
                    size_bytes: MIN_FRAME_BYTES,
                    sent_at: now,
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_udp_packet, Endpoint};
    use crate::switch::{ForwardDecision, MissBehavior};
    use std::net::Ipv4Addr;

    fn rec(dev: u8, kind: InterfaceKind, net: &str) -> InterfaceRecord {
        let k = match kind {
            InterfaceKind::WiFi => 1,
            InterfaceKind::Bluetooth => 2,
        };
        InterfaceRecord {
            kind,
            mac: MacAddress([2, 0, 0, 0, dev, k]),
            ip: IpAddress::new(Ipv4Addr::new(10, k, 0, dev), 24),
            network: Some(net.to_string()),
            connected: false,
        }
    }

    fn db(dev: u8, active: InterfaceKind) -> LocalDb {
        let v = VirtualEndpoint {
            mac: MacAddress([2, 0xff, 0, 0, 0, dev]),
            ip: IpAddress::new(Ipv4Addr::new(172, 16, 0, dev), 16),
        };
        let mut d = LocalDb::new(
            DeviceId(dev as u32),
            v,
            active,
            [rec(dev, InterfaceKind::WiFi, "wlan"), rec(dev, InterfaceKind::Bluetooth, "pan")],
            SimTime::from_millis(50),
        );
        d.set_connected(active, true);
        d
    }

    fn app_packet(from: &LocalDb, to: &LocalDb, ids: &mut PayloadIdGen) -> Packet {
        let a = Endpoint { mac: from.virtual_ep.mac, ip: from.virtual_ep.ip, port: 5000 };
        let b = Endpoint { mac: to.virtual_ep.mac, ip: to.virtual_ep.ip, port: 5000 };
        make_udp_packet(ids, &a, &b, 200, SimTime::ZERO).unwrap()
    }

    #[test]
    fn exchange_fills_both_databases() {
        let (mut a, mut b) = (db(1, InterfaceKind::Bluetooth), db(2, InterfaceKind::Bluetooth));
        assert_eq!(d2d_exchange(&mut a, &mut b, SimTime::from_millis(3)), Ok(true));
        for (x, y) in [(&a, &b), (&b, &a)] {
            let p = &x.peers[&y.device];
            assert_eq!(p.interfaces.len(), 2);
            // even the switched-off Wi-Fi interface is known
            assert_eq!(p.interfaces[&InterfaceKind::WiFi].mac, y.iface(InterfaceKind::WiFi).mac);
            assert_eq!(p.interfaces[&InterfaceKind::Bluetooth].ip, y.iface(InterfaceKind::Bluetooth).ip);
            assert!(x.exchange_done.contains(&y.device));
        }
        assert_eq!(a.self_records.len(), 2);
    }

    #[test]
    fn exchange_is_one_shot() {
        let (mut a, mut b) = (db(1, InterfaceKind::Bluetooth), db(2, InterfaceKind::Bluetooth));
        d2d_exchange(&mut a, &mut b, SimTime::ZERO).unwrap();
        let (a1, b1) = (a.clone(), b.clone());
        for _ in 0..3 {
            assert_eq!(d2d_exchange(&mut a, &mut b, SimTime::from_secs(9)), Ok(false));
        }
        assert_eq!(a, a1);
        assert_eq!(b, b1);
    }

    #[test]
    fn exchange_needs_a_common_network() {
        let mut a = db(1, InterfaceKind::Bluetooth);
        let mut b = db(2, InterfaceKind::WiFi);
        assert_eq!(
            d2d_exchange(&mut a, &mut b, SimTime::ZERO),
            Err(D2dError::UnreachablePeer(DeviceId(1), DeviceId(2)))
        );
    }

    #[test]
    fn first_packet_over_bluetooth_gets_bluetooth_rules() {
        let (mut a, mut b) = (db(1, InterfaceKind::Bluetooth), db(2, InterfaceKind::Bluetooth));
        d2d_exchange(&mut a, &mut b, SimTime::ZERO).unwrap();
        let ids = RuleIdGen::new();
        let live = ControllerLiveness::default();
        let mut pids = PayloadIdGen::new();
        let p = app_packet(&a, &b, &mut pids);
        let mut local = LocalController { db: &a, ids: &ids, liveness: &live };
        let rules = local.packet_in(&p, Port::Virtual, SimTime::ZERO).unwrap();
        assert_eq!(rules.len(), 2);
        let (out, port) = rules[0].apply(&p);
        assert_eq!(port, Some(Port::Phys(InterfaceKind::Bluetooth)));
        assert_eq!(out.dst_mac, b.iface(InterfaceKind::Bluetooth).mac);
        assert_eq!(out.dst_ip, b.iface(InterfaceKind::Bluetooth).ip);
        assert_eq!(out.src_ip, a.iface(InterfaceKind::Bluetooth).ip);
        assert!(rules.iter().all(|r| r.origin == RuleOrigin::LocalController));

        // and b's reverse rule restores the virtual addresses
        let ids_b = RuleIdGen::new();
        let mut local_b = LocalController { db: &b, ids: &ids_b, liveness: &live };
        let back = local_b.packet_in(&out, Port::Phys(InterfaceKind::Bluetooth), SimTime::ZERO).unwrap();
        let (restored, port) = back[1].apply(&out);
        assert_eq!(port, Some(Port::Virtual));
        assert_eq!((restored.src_ip, restored.dst_ip), (a.virtual_ep.ip, b.virtual_ep.ip));
        assert_eq!((restored.src_mac, restored.dst_mac), (a.virtual_ep.mac, b.virtual_ep.mac));
    }

    #[test]
    fn unknown_destination_is_dropped_and_counted() {
        let a = db(1, InterfaceKind::Bluetooth);
        let b = db(2, InterfaceKind::Bluetooth);
        let ids = RuleIdGen::new();
        let live = ControllerLiveness::default();
        let mut pids = PayloadIdGen::new();
        let p = app_packet(&a, &b, &mut pids);
        let mut sw = Switch::new(MissBehavior::AskController);
        let d = sw.process(
            &p,
            Port::Virtual,
            SimTime::ZERO,
            &mut LocalController { db: &a, ids: &ids, liveness: &live },
            &mut FallbackController { db: &a, ids: &ids, liveness: &live },
        );
        assert!(matches!(d, ForwardDecision::Drop(_)));
        assert_eq!(sw.counters.unknown_peer, 1);
    }

    #[test]
    fn fallback_matches_local_rules() {
        let (mut a, mut b) = (db(1, InterfaceKind::WiFi), db(2, InterfaceKind::WiFi));
        d2d_exchange(&mut a, &mut b, SimTime::ZERO).unwrap();
        let mut pids = PayloadIdGen::new();
        let p = app_packet(&a, &b, &mut pids);
        let ids = RuleIdGen::new();
        let alive = ControllerLiveness::default();
        let mut dead = ControllerLiveness::default();
        dead.kill(SimTime::from_secs(1));
        let local = LocalController { db: &a, ids: &ids, liveness: &alive }.packet_in(&p, Port::Virtual, SimTime::ZERO).unwrap();
        let fb = FallbackController { db: &a, ids: &ids, liveness: &dead }.packet_in(&p, Port::Virtual, SimTime::ZERO).unwrap();
        assert_eq!(local.len(), fb.len());
        for (l, f) in local.iter().zip(&fb) {
            assert!(l.same_behavior(f));
            assert_eq!(l.origin, RuleOrigin::LocalController);
            assert_eq!(f.origin, RuleOrigin::ExtendedController);
        }
        // fallback refuses to act while the local controller runs
        assert_eq!(
            FallbackController { db: &a, ids: &ids, liveness: &alive }.packet_in(&p, Port::Virtual, SimTime::ZERO),
            Err(ControllerError::Dead)
        );
        let mut sw = Switch::new(MissBehavior::AskController);
        assert_eq!(
            fallback_install(&a, &ids, &alive, &mut sw, b.device, InterfaceKind::WiFi, SimTime::ZERO),
            Err(FallbackError::LocalAlive)
        );
        let installed = fallback_install(&a, &ids, &dead, &mut sw, b.device, InterfaceKind::WiFi, SimTime::ZERO).unwrap();
        assert!(installed[0].same_behavior(&local[0]));
        assert_eq!(sw.table.len(), 2);
    }

    #[test]
    fn gratuitous_arp_moves_peer_to_new_interface() {
        let (mut a, mut b) = (db(1, InterfaceKind::WiFi), db(2, InterfaceKind::WiFi));
        d2d_exchange(&mut a, &mut b, SimTime::ZERO).unwrap();
        // a hands over to Bluetooth and announces it
        a.active = InterfaceKind::Bluetooth;
        let mut pids = PayloadIdGen::new();
        let arps = gratuitous_arps(&a, InterfaceKind::Bluetooth, &mut pids, SimTime::from_secs(4));
        assert_eq!(arps.len(), 1);
        let (to, arp) = &arps[0];
        assert_eq!(*to, b.device);
        assert!(arp.is_gratuitous_arp());
        let mut counters = ArpCounters::default();
        let mut resp = ArpResponder { db: &mut b, counters: &mut counters, outbox: vec![] };
        resp.handle_arp(arp, Port::Phys(InterfaceKind::Bluetooth), SimTime::from_secs(4));
        assert!(resp.outbox.is_empty());
        let peer = &b.peers[&a.device];
        assert_eq!(peer.active, InterfaceKind::Bluetooth);
        let bt = &peer.interfaces[&InterfaceKind::Bluetooth];
        assert_eq!((bt.mac, bt.ip), (a.iface(InterfaceKind::Bluetooth).mac, a.iface(InterfaceKind::Bluetooth).ip));
        assert!(bt.reachable);
        assert_eq!(bt.last_updated, SimTime::from_secs(4));
        assert!(!peer.interfaces[&InterfaceKind::WiFi].reachable);
        assert_eq!(peer.virtual_ep, a.virtual_ep);
        assert_eq!(counters.announcements, 1);
    }

    #[test]
    fn no_peers_no_announcements() {
        let a = db(1, InterfaceKind::WiFi);
        let mut pids = PayloadIdGen::new();
        assert!(gratuitous_arps(&a, InterfaceKind::Bluetooth, &mut pids, SimTime::ZERO).is_empty());
    }

    #[test]
    fn arp_requests_answered_from_db() {
        let (mut a, mut b) = (db(1, InterfaceKind::WiFi), db(2, InterfaceKind::WiFi));
        d2d_exchange(&mut a, &mut b, SimTime::ZERO).unwrap();
        let req = Packet {
            src_mac: a.iface(InterfaceKind::WiFi).mac,
            dst_mac: MacAddress::BROADCAST,
            src_ip: a.iface(InterfaceKind::WiFi).ip,
            dst_ip: b.iface(InterfaceKind::WiFi).ip,
            protocol: Protocol::Arp,
            src_port: 0,
            dst_port: 0,
            payload_id: crate::model::PayloadId(9),
            size_bytes: 42,
            sent_at: SimTime::ZERO,
        };
        let mut counters = ArpCounters::default();
        let mut resp = ArpResponder { db: &mut a, counters: &mut counters, outbox: vec![] };
        resp.handle_arp(&req, Port::Virtual, SimTime::ZERO);
        assert_eq!(resp.outbox.len(), 1);
        assert_eq!(resp.outbox[0].1.src_mac, b.iface(InterfaceKind::WiFi).mac);

        let unknown = Packet { dst_ip: IpAddress::new(Ipv4Addr::new(9, 9, 9, 9), 24), ..req };
        resp.handle_arp(&unknown, Port::Virtual, SimTime::ZERO);
        assert_eq!(resp.outbox.len(), 1);
        assert_eq!(counters.arp_unresolved, 1);
        assert_eq!(counters.requests_answered, 1);
    }

    #[test]
    fn rtt_estimator_smooths() {
        let mut r = RttEstimator::new(SimTime::from_millis(100));
        assert_eq!(r.estimate(), SimTime::from_millis(100));
        r.observe(SimTime::from_millis(40));
        assert_eq!(r.estimate(), SimTime::from_millis(40));
        r.observe(SimTime::from_millis(48));
        assert_eq!(r.estimate(), SimTime::from_millis(41));
    }

    #[test]
    fn relay_learns_and_shares_peers() {
        // client1 (bt) <-> client2 (relay) <-> client3 (wifi)
        let mut c1 = db(1, InterfaceKind::Bluetooth);
        let mut c2 = db(2, InterfaceKind::Bluetooth);
        c2.relay = true;
        c2.set_connected(InterfaceKind::WiFi, true);
        let mut c3 = db(3, InterfaceKind::WiFi);
        d2d_exchange(&mut c2, &mut c1, SimTime::ZERO).unwrap();
        d2d_exchange(&mut c2, &mut c3, SimTime::ZERO).unwrap();
        assert_eq!(c3.peers[&c1.device].via, Some(c2.device));
        assert!(!c1.peers.contains_key(&c3.device));
        // a later update push from the relay fills the gap
        let adv = c2.advert(SimTime::from_millis(5));
        c1.absorb(&adv, SimTime::from_millis(5));
        assert_eq!(c1.peers[&c3.device].via, Some(c2.device));
        assert!(c1.dump().contains("via=dev2"));
    }
}
