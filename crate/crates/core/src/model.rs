//! Shared vocabulary: simulated time, identifiers, addresses, packets and
//! control messages.

use std::fmt;
use std::net::Ipv4Addr;
use std::ops::{Add, AddAssign, Sub};
use std::str::FromStr;

use thiserror::Error;

/// Smallest frame the simulator accepts: Ethernet (14) + IPv4 (20) + UDP (8).
pub const MIN_FRAME_BYTES: u32 = 42;

/// Microseconds since scenario start.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    /// Rounds to the nearest microsecond; negative input clamps to zero.
    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * 1e6).round().max(0.0) as u64)
    }

    pub fn from_millis_f64(ms: f64) -> Self {
        SimTime((ms * 1e3).round().max(0.0) as u64)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }

    pub fn half(self) -> SimTime {
        SimTime(self.0 / 2)
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 = self.0.saturating_add(rhs.0);
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

/// Renders with the largest unit that keeps the value integral (`1500ms`,
/// `3s`, `250us`). The scenario parser accepts the same notation.
impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let us = self.0;
        if us == 0 {
            write!(f, "0s")
        } else if us.is_multiple_of(1_000_000) {
            write!(f, "{}s", us / 1_000_000)
        } else if us.is_multiple_of(1_000) {
            write!(f, "{}ms", us / 1_000)
        } else {
            write!(f, "{}us", us)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid duration `{0}` (expected e.g. 250us, 15ms, 3s, 1.5s)")]
pub struct ParseTimeError(pub String);

impl FromStr for SimTime {
    type Err = ParseTimeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseTimeError(s.to_string());
        let s = s.trim();
        let (num, scale) = if let Some(n) = s.strip_suffix("us") {
            (n, 1.0)
        } else if let Some(n) = s.strip_suffix("ms") {
            (n, 1e3)
        } else if let Some(n) = s.strip_suffix('s') {
            (n, 1e6)
        } else {
            return Err(err());
        };
        let v: f64 = num.trim().parse().map_err(|_| err())?;
        if !v.is_finite() || v < 0.0 {
            return Err(err());
        }
        Ok(SimTime((v * scale).round() as u64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeviceId(pub u32);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dev{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InterfaceKind {
    WiFi,
    Bluetooth,
}

impl InterfaceKind {
    pub const ALL: [InterfaceKind; 2] = [InterfaceKind::WiFi, InterfaceKind::Bluetooth];

    pub fn other(self) -> InterfaceKind {
        match self {
            InterfaceKind::WiFi => InterfaceKind::Bluetooth,
            InterfaceKind::Bluetooth => InterfaceKind::WiFi,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InterfaceKind::WiFi => "wifi",
            InterfaceKind::Bluetooth => "bluetooth",
        }
    }
}

impl fmt::Display for InterfaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InterfaceKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wifi" => Ok(InterfaceKind::WiFi),
            "bluetooth" | "bt" => Ok(InterfaceKind::Bluetooth),
            other => Err(format!("unknown interface kind `{other}`")),
        }
    }
}

/// Radio lifecycle. Legal moves: `Off -> WakingUp -> Sleep <-> Active`, and
/// any state may drop to `Off`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InterfaceState {
    Off,
    WakingUp,
    Sleep,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal interface transition {from:?} -> {to:?}")]
pub struct IllegalTransition {
    pub from: InterfaceState,
    pub to: InterfaceState,
}

impl InterfaceState {
    pub const ALL: [InterfaceState; 4] = [
        InterfaceState::Off,
        InterfaceState::WakingUp,
        InterfaceState::Sleep,
        InterfaceState::Active,
    ];

    pub fn can_transition(self, to: InterfaceState) -> bool {
        use InterfaceState::*;
        matches!(
            (self, to),
            (_, Off) | (Off, WakingUp) | (WakingUp, Sleep) | (Sleep, Active) | (Active, Sleep)
        )
    }

    pub fn transition(self, to: InterfaceState) -> Result<InterfaceState, IllegalTransition> {
        if self.can_transition(to) {
            Ok(to)
        } else {
            Err(IllegalTransition { from: self, to })
        }
    }

    /// Associated and able to carry frames.
    pub fn is_up(self) -> bool {
        matches!(self, InterfaceState::Sleep | InterfaceState::Active)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InterfaceState::Off => "off",
            InterfaceState::WakingUp => "wakeup",
            InterfaceState::Sleep => "sleep",
            InterfaceState::Active => "active",
        }
    }
}

impl fmt::Display for InterfaceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InterfaceState {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(InterfaceState::Off),
            "wakeup" => Ok(InterfaceState::WakingUp),
            "sleep" => Ok(InterfaceState::Sleep),
            "active" => Ok(InterfaceState::Active),
            other => Err(format!("unknown interface state `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MacAddress(pub [u8; 6]);

impl MacAddress {
    pub const BROADCAST: MacAddress = MacAddress([0xff; 6]);

    pub fn is_broadcast(&self) -> bool {
        *self == Self::BROADCAST
    }
}

impl fmt::Display for MacAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl FromStr for MacAddress {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 6];
        let mut parts = s.split(':');
        for byte in out.iter_mut() {
            let part = parts.next().ok_or_else(|| format!("bad MAC `{s}`"))?;
            *byte = u8::from_str_radix(part, 16).map_err(|_| format!("bad MAC `{s}`"))?;
        }
        if parts.next().is_some() {
            return Err(format!("bad MAC `{s}`"));
        }
        Ok(MacAddress(out))
    }
}

/// IPv4 address with its subnet prefix length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IpAddress {
    pub addr: Ipv4Addr,
    pub prefix: u8,
}

impl IpAddress {
    pub fn new(addr: Ipv4Addr, prefix: u8) -> Self {
        IpAddress { addr, prefix }
    }
}

impl fmt::Display for IpAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr, self.prefix)
    }
}

impl FromStr for IpAddress {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, p) = s.split_once('/').ok_or_else(|| format!("bad IP `{s}`"))?;
        let addr = a.parse().map_err(|_| format!("bad IP `{s}`"))?;
        let prefix: u8 = p.parse().map_err(|_| format!("bad IP `{s}`"))?;
        if prefix > 32 {
            return Err(format!("bad IP prefix `{s}`"));
        }
        Ok(IpAddress { addr, prefix })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Protocol {
    Arp,
    Icmp,
    Tcp,
    Udp,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Arp => "arp",
            Protocol::Icmp => "icmp",
            Protocol::Tcp => "tcp",
            Protocol::Udp => "udp",
        })
    }
}

/// Stands in for payload bytes; survives every header rewrite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PayloadId(pub u64);

impl fmt::Display for PayloadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Hands out fresh payload ids within one scenario.
#[derive(Debug, Default, Clone)]
pub struct PayloadIdGen {
    next: u64,
}

impl PayloadIdGen {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fresh(&mut self) -> PayloadId {
        let id = PayloadId(self.next);
        self.next += 1;
        id
    }
}

/// Addressing of one end of a UDP exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Endpoint {
    pub mac: MacAddress,
    pub ip: IpAddress,
    pub port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub src_mac: MacAddress,
    pub dst_mac: MacAddress,
    pub src_ip: IpAddress,
    pub dst_ip: IpAddress,
    pub protocol: Protocol,
    pub src_port: u16,
    pub dst_port: u16,
    pub payload_id: PayloadId,
    pub size_bytes: u32,
    pub sent_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PacketError {
    #[error("packet of {0} bytes is below the {MIN_FRAME_BYTES}-byte header minimum")]
    Undersized(u32),
}

pub fn make_udp_packet(
    ids: &mut PayloadIdGen,
    src: &Endpoint,
    dst: &Endpoint,
    size_bytes: u32,
    sent_at: SimTime,
) -> Result<Packet, PacketError> {
    if size_bytes < MIN_FRAME_BYTES {
        return Err(PacketError::Undersized(size_bytes));
    }
    Ok(Packet {
        src_mac: src.mac,
        dst_mac: dst.mac,
        src_ip: src.ip,
        dst_ip: dst.ip,
        protocol: Protocol::Udp,
        src_port: src.port,
        dst_port: dst.port,
        payload_id: ids.fresh(),
        size_bytes,
        sent_at,
    })
}

impl Packet {
    /// Replaces the L2/L3 addresses; everything else is carried over.
    pub fn rewrite_headers(
        &self,
        src_mac: MacAddress,
        dst_mac: MacAddress,
        src_ip: IpAddress,
        dst_ip: IpAddress,
    ) -> Packet {
        Packet {
            src_mac,
            dst_mac,
            src_ip,
            dst_ip,
            ..self.clone()
        }
    }

    /// True for an unsolicited ARP announcement (sender IP equals target IP).
    pub fn is_gratuitous_arp(&self) -> bool {
        self.protocol == Protocol::Arp && self.src_ip == self.dst_ip
    }

    pub fn flow_key(&self) -> FlowKey {
        FlowKey {
            src_ip: self.src_ip,
            dst_ip: self.dst_ip,
            protocol: self.protocol,
            src_port: self.src_port,
            dst_port: self.dst_port,
        }
    }
}

/// Classic 5-tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowKey {
    pub src_ip: IpAddress,
    pub dst_ip: IpAddress,
    pub protocol: Protocol,
    pub src_port: u16,
    pub dst_port: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncKind {
    Syn,
}

/// Handover synchronization message. `peer_seen` tells the receiver that the
/// sender has already heard a SYN of the same epoch from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncMessage {
    pub kind: SyncKind,
    pub sender: DeviceId,
    pub handover_epoch: u64,
    pub peer_seen: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(last: u8, port: u16) -> Endpoint {
        Endpoint {
            mac: MacAddress([2, 0, 0, 0, 0, last]),
            ip: IpAddress::new(Ipv4Addr::new(10, 0, 0, last), 24),
            port,
        }
    }

    #[test]
    fn udp_packet_copies_headers() {
        let mut ids = PayloadIdGen::new();
        let (a, b) = (ep(1, 5000), ep(2, 6000));
        let p = make_udp_packet(&mut ids, &a, &b, 1000, SimTime::ZERO).unwrap();
        assert_eq!(p.size_bytes, 1000);
        assert_eq!((p.src_mac, p.dst_mac), (a.mac, b.mac));
        assert_eq!((p.src_ip, p.dst_ip), (a.ip, b.ip));
        assert_eq!((p.src_port, p.dst_port), (5000, 6000));
        let q = make_udp_packet(&mut ids, &a, &b, 1000, SimTime::ZERO).unwrap();
        assert_ne!(p.payload_id, q.payload_id);
    }

    #[test]
    fn header_floor_is_inclusive() {
        let mut ids = PayloadIdGen::new();
        let (a, b) = (ep(1, 1), ep(2, 2));
        assert!(make_udp_packet(&mut ids, &a, &b, 42, SimTime::ZERO).is_ok());
        assert_eq!(
            make_udp_packet(&mut ids, &a, &b, 41, SimTime::ZERO),
            Err(PacketError::Undersized(41))
        );
    }

    #[test]
    fn rewrite_changes_only_addresses() {
        let mut ids = PayloadIdGen::new();
        let (a, b, c, d) = (ep(1, 1), ep(2, 2), ep(3, 3), ep(4, 4));
        let p = make_udp_packet(&mut ids, &a, &b, 300, SimTime::from_millis(7)).unwrap();
        assert_eq!(p.rewrite_headers(p.src_mac, p.dst_mac, p.src_ip, p.dst_ip), p);

        let q = p.rewrite_headers(c.mac, d.mac, c.ip, d.ip);
        // field-by-field diff
        let diffs = [
            p.src_mac != q.src_mac,
            p.dst_mac != q.dst_mac,
            p.src_ip != q.src_ip,
            p.dst_ip != q.dst_ip,
            p.protocol != q.protocol,
            p.src_port != q.src_port,
            p.dst_port != q.dst_port,
            p.payload_id != q.payload_id,
            p.size_bytes != q.size_bytes,
            p.sent_at != q.sent_at,
        ];
        assert_eq!(diffs, [true, true, true, true, false, false, false, false, false, false]);

        let back = q.rewrite_headers(p.src_mac, p.dst_mac, p.src_ip, p.dst_ip);
        assert_eq!(back, p);
    }

    #[test]
    fn transition_matrix() {
        use InterfaceState::*;
        let legal = [
            (Off, Off),
            (Off, WakingUp),
            (WakingUp, Off),
            (WakingUp, Sleep),
            (Sleep, Off),
            (Sleep, Active),
            (Active, Off),
            (Active, Sleep),
        ];
        for from in InterfaceState::ALL {
            for to in InterfaceState::ALL {
                let expected = legal.contains(&(from, to));
                assert_eq!(from.can_transition(to), expected, "{from:?} -> {to:?}");
                assert_eq!(from.transition(to).is_ok(), expected);
            }
        }
    }

    #[test]
    fn address_rendering() {
        let mac = MacAddress([0xaa, 0xbb, 0xcc, 0xdd, 0xee, 0xff]);
        assert_eq!(mac.to_string(), "aa:bb:cc:dd:ee:ff");
        assert_eq!("aa:bb:cc:dd:ee:ff".parse::<MacAddress>().unwrap(), mac);
        let ip = IpAddress::new(Ipv4Addr::new(192, 168, 1, 10), 24);
        assert_eq!(ip.to_string(), "192.168.1.10/24");
        assert_eq!("192.168.1.10/24".parse::<IpAddress>().unwrap(), ip);
    }

    #[test]
    fn time_notation() {
        for s in ["0s", "3s", "1500ms", "250us"] {
            assert_eq!(s.parse::<SimTime>().unwrap().to_string(), s);
        }
        assert_eq!("1.4s".parse::<SimTime>().unwrap(), SimTime::from_millis(1400));
        assert!("5".parse::<SimTime>().is_err());
        assert!("-1s".parse::<SimTime>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_mac() -> impl Strategy<Value = MacAddress> {
            any::<[u8; 6]>().prop_map(MacAddress)
        }

        fn arb_ip() -> impl Strategy<Value = IpAddress> {
            (any::<u32>(), 0u8..=32).prop_map(|(a, p)| IpAddress::new(Ipv4Addr::from(a), p))
        }

        proptest! {
            #[test]
            fn payload_identity_survives_rewrites(
                hops in prop::collection::vec((arb_mac(), arb_mac(), arb_ip(), arb_ip()), 0..8),
                size in 42u32..2000,
            ) {
                let mut ids = PayloadIdGen::new();
                let a = Endpoint { mac: MacAddress([1; 6]), ip: IpAddress::new(Ipv4Addr::new(1, 1, 1, 1), 8), port: 9 };
                let orig = make_udp_packet(&mut ids, &a, &a, size, SimTime::ZERO).unwrap();
                let mut p = orig.clone();
                for (sm, dm, si, di) in hops {
                    p = p.rewrite_headers(sm, dm, si, di);
                    prop_assert_eq!(p.payload_id, orig.payload_id);
                    prop_assert_eq!(p.size_bytes, orig.size_bytes);
                    prop_assert_eq!((p.src_port, p.dst_port), (orig.src_port, orig.dst_port));
                }
            }
        }
    }
}
