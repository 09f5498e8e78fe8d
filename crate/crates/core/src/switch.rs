//! Per-device flow-table switch: priority match-action lookup, header
//! rewrites, packet-in escalation and ARP diversion.

use std::fmt;

use thiserror::Error;

use crate::model::{InterfaceKind, IpAddress, MacAddress, Packet, Protocol, SimTime};

/// Switch port. The application-facing virtual interface is port 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Port {
    Virtual,
    Phys(InterfaceKind),
}

impl fmt::Display for Port {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Port::Virtual => f.write_str("v0"),
            Port::Phys(k) => write!(f, "{k}"),
        }
    }
}

/// Absent field = wildcard.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchFields {
    pub in_port: Option<Port>,
    pub eth_src: Option<MacAddress>,
    pub eth_dst: Option<MacAddress>,
    pub ip_src: Option<IpAddress>,
    pub ip_dst: Option<IpAddress>,
    pub protocol: Option<Protocol>,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
}

fn field_ok<T: PartialEq>(want: &Option<T>, got: &T) -> bool {
    want.as_ref().is_none_or(|w| w == got)
}

impl MatchFields {
    pub fn matches(&self, p: &Packet, in_port: Port) -> bool {
        field_ok(&self.in_port, &in_port)
            && field_ok(&self.eth_src, &p.src_mac)
            && field_ok(&self.eth_dst, &p.dst_mac)
            && field_ok(&self.ip_src, &p.src_ip)
            && field_ok(&self.ip_dst, &p.dst_ip)
            && field_ok(&self.protocol, &p.protocol)
            && field_ok(&self.src_port, &p.src_port)
            && field_ok(&self.dst_port, &p.dst_port)
    }
}

impl fmt::Display for MatchFields {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(v) = self.in_port {
            parts.push(format!("in_port={v}"));
        }
        if let Some(v) = self.eth_src {
            parts.push(format!("eth_src={v}"));
        }
        if let Some(v) = self.eth_dst {
            parts.push(format!("eth_dst={v}"));
        }
        if let Some(v) = self.ip_src {
            parts.push(format!("ip_src={v}"));
        }
        if let Some(v) = self.ip_dst {
            parts.push(format!("ip_dst={v}"));
        }
        if let Some(v) = self.protocol {
            parts.push(format!("proto={v}"));
        }
        if let Some(v) = self.src_port {
            parts.push(format!("tp_src={v}"));
        }
        if let Some(v) = self.dst_port {
            parts.push(format!("tp_dst={v}"));
        }
        if parts.is_empty() {
            f.write_str("*")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowAction {
    Output(Port),
    SetEthSrc(MacAddress),
    SetEthDst(MacAddress),
    SetIpSrc(IpAddress),
    SetIpDst(IpAddress),
    Drop,
}

impl fmt::Display for FlowAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowAction::Output(p) => write!(f, "output:{p}"),
            FlowAction::SetEthSrc(m) => write!(f, "set_eth_src:{m}"),
            FlowAction::SetEthDst(m) => write!(f, "set_eth_dst:{m}"),
            FlowAction::SetIpSrc(i) => write!(f, "set_ip_src:{i}"),
            FlowAction::SetIpDst(i) => write!(f, "set_ip_dst:{i}"),
            FlowAction::Drop => f.write_str("drop"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RuleId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RuleOrigin {
    LocalController,
    ExtendedController,
}

impl fmt::Display for RuleOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuleOrigin::LocalController => "local",
            RuleOrigin::ExtendedController => "extended",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowRule {
    pub id: RuleId,
    pub priority: u16,
    pub match_fields: MatchFields,
    pub actions: Vec<FlowAction>,
    pub installed_at: SimTime,
    pub origin: RuleOrigin,
}

impl FlowRule {
    pub fn output_port(&self) -> Option<Port> {
        self.actions.iter().find_map(|a| match a {
            FlowAction::Output(p) => Some(*p),
            _ => None,
        })
    }

    /// Runs the action list left to right. Returns the rewritten packet and
    /// the egress port, or `None` when the rule drops or has no output.
    pub fn apply(&self, p: &Packet) -> (Packet, Option<Port>) {
        let mut out = p.clone();
        let mut port = None;
        for a in &self.actions {
            match *a {
                FlowAction::SetEthSrc(m) => out.src_mac = m,
                FlowAction::SetEthDst(m) => out.dst_mac = m,
                FlowAction::SetIpSrc(i) => out.src_ip = i,
                FlowAction::SetIpDst(i) => out.dst_ip = i,
                FlowAction::Output(p) => port = Some(p),
                FlowAction::Drop => return (out, None),
            }
        }
        (out, port)
    }

    /// Equality on everything that affects forwarding.
    pub fn same_behavior(&self, other: &FlowRule) -> bool {
        self.priority == other.priority && self.match_fields == other.match_fields && self.actions == other.actions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissBehavior {
    AskController,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SwitchError {
    #[error("rule id {0:?} already installed")]
    DuplicateRule(RuleId),
    #[error("rule {0:?} has more than one output action")]
    MultipleOutputs(RuleId),
}

/// Ordering key for lookup: higher priority, then newer, then lower id.
fn precedence(r: &FlowRule) -> (u16, SimTime, std::cmp::Reverse<RuleId>) {
    (r.priority, r.installed_at, std::cmp::Reverse(r.id))
}

#[derive(Debug, Clone)]
pub struct FlowTable {
    rules: Vec<FlowRule>,
    pub miss: MissBehavior,
}

impl FlowTable {
    pub fn new(miss: MissBehavior) -> Self {
        FlowTable { rules: Vec::new(), miss }
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> &[FlowRule] {
        &self.rules
    }

    pub fn lookup(&self, p: &Packet, in_port: Port) -> Option<&FlowRule> {
        // rules are kept sorted by descending precedence
        self.rules.iter().find(|r| r.match_fields.matches(p, in_port))
    }

    pub fn install(&mut self, rule: FlowRule) -> Result<(), SwitchError> {
        if self.rules.iter().any(|r| r.id == rule.id) {
            return Err(SwitchError::DuplicateRule(rule.id));
        }
        let outputs = rule.actions.iter().filter(|a| matches!(a, FlowAction::Output(_))).count();
        if outputs > 1 {
            return Err(SwitchError::MultipleOutputs(rule.id));
        }
        let key = precedence(&rule);
        let pos = self.rules.partition_point(|r| precedence(r) > key);
        self.rules.insert(pos, rule);
        Ok(())
    }

    pub fn remove_where<F: FnMut(&FlowRule) -> bool>(&mut self, mut pred: F) -> usize {
        let before = self.rules.len();
        self.rules.retain(|r| !pred(r));
        before - self.rules.len()
    }

    /// One rule per line: `priority  match  actions  origin`, highest
    /// precedence first.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for r in &self.rules {
            let actions: Vec<String> = r.actions.iter().map(|a| a.to_string()).collect();
            out.push_str(&format!("{}  {}  {}  {}\n", r.priority, r.match_fields, actions.join(","), r.origin));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ControllerError {
    #[error("controller is not running")]
    Dead,
    #[error("destination is not in the local database")]
    UnknownPeer,
}

/// Something that answers table misses with rules.
pub trait RuleSource {
    fn packet_in(&mut self, p: &Packet, in_port: Port, now: SimTime) -> Result<Vec<FlowRule>, ControllerError>;
}

/// Receives ARP frames diverted away from the flow table.
pub trait ArpSink {
    fn handle_arp(&mut self, p: &Packet, in_port: Port, now: SimTime);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DropReason {
    RuleDrop,
    TableMiss,
    UnknownPeer,
    UnhandledMiss,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ForwardDecision {
    Forward { port: Port, packet: Packet },
    Drop(DropReason),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SwitchCounters {
    pub hits: u64,
    pub packet_ins: u64,
    pub fallback_packet_ins: u64,
    pub miss_dropped: u64,
    pub unknown_peer: u64,
    pub unhandled_miss: u64,
    pub rule_drops: u64,
    pub arp_diverted: u64,
}

#[derive(Debug, Clone)]
pub struct Switch {
    pub table: FlowTable,
    pub counters: SwitchCounters,
}

impl Switch {
    pub fn new(miss: MissBehavior) -> Self {
        Switch { table: FlowTable::new(miss), counters: SwitchCounters::default() }
    }

    fn forward_with(&mut self, rule: &FlowRule, p: &Packet) -> ForwardDecision {
        match rule.apply(p) {
            (packet, Some(port)) => ForwardDecision::Forward { port, packet },
            (_, None) => {
                self.counters.rule_drops += 1;
                ForwardDecision::Drop(DropReason::RuleDrop)
            }
        }
    }

    /// Table pipeline. On a miss the local controller is asked first; if it
    /// is dead the extended controller's fallback path is tried.
    pub fn process(
        &mut self,
        p: &Packet,
        in_port: Port,
        now: SimTime,
        local: &mut dyn RuleSource,
        fallback: &mut dyn RuleSource,
    ) -> ForwardDecision {
        if let Some(rule) = self.table.lookup(p, in_port).cloned() {
            self.counters.hits += 1;
            return self.forward_with(&rule, p);
        }
        if self.table.miss == MissBehavior::Drop {
            self.counters.miss_dropped += 1;
            return ForwardDecision::Drop(DropReason::TableMiss);
        }
        self.counters.packet_ins += 1;
        let rules = match local.packet_in(p, in_port, now) {
            Ok(rules) => rules,
            Err(ControllerError::UnknownPeer) => {
                self.counters.unknown_peer += 1;
                return ForwardDecision::Drop(DropReason::UnknownPeer);
            }
            Err(ControllerError::Dead) => {
                self.counters.fallback_packet_ins += 1;
                match fallback.packet_in(p, in_port, now) {
                    Ok(rules) => rules,
                    Err(ControllerError::UnknownPeer) => {
                        self.counters.unknown_peer += 1;
                        return ForwardDecision::Drop(DropReason::UnknownPeer);
                    }
                    Err(ControllerError::Dead) => {
                        self.counters.unhandled_miss += 1;
                        return ForwardDecision::Drop(DropReason::UnhandledMiss);
                    }
                }
            }
        };
        for r in rules {
            if let Err(e) = self.table.install(r) {
                log::warn!("packet-in rule rejected: {e}");
            }
        }
        match self.table.lookup(p, in_port).cloned() {
            Some(rule) => self.forward_with(&rule, p),
            None => {
                self.counters.unhandled_miss += 1;
                ForwardDecision::Drop(DropReason::UnhandledMiss)
            }
        }
    }

    /// ARP frames bypass the flow table and go to the extended controller.
    pub fn intercept_arp(&mut self, p: &Packet, in_port: Port, now: SimTime, sink: &mut dyn ArpSink) -> bool {
        if p.protocol != Protocol::Arp {
            return false;
        }
        self.counters.arp_diverted += 1;
        sink.handle_arp(p, in_port, now);
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_udp_packet, Endpoint, PayloadIdGen};
    use std::net::Ipv4Addr;

    fn ip(last: u8) -> IpAddress {
        IpAddress::new(Ipv4Addr::new(10, 0, 0, last), 24)
    }

    fn mac(last: u8) -> MacAddress {
        MacAddress([2, 0, 0, 0, 0, last])
    }

    fn pkt(src: u8, dst: u8) -> Packet {
        let mut ids = PayloadIdGen::new();
        let a = Endpoint { mac: mac(src), ip: ip(src), port: 5000 };
        let b = Endpoint { mac: mac(dst), ip: ip(dst), port: 5001 };
        make_udp_packet(&mut ids, &a, &b, 500, SimTime::ZERO).unwrap()
    }

    fn rule(id: u64, priority: u16, m: MatchFields, actions: Vec<FlowAction>, at: u64) -> FlowRule {
        FlowRule {
            id: RuleId(id),
            priority,
            match_fields: m,
            actions,
            installed_at: SimTime(at),
            origin: RuleOrigin::LocalController,
        }
    }

    fn to_wifi() -> Vec<FlowAction> {
        vec![FlowAction::Output(Port::Phys(InterfaceKind::WiFi))]
    }

    #[test]
    fn empty_table_misses() {
        let t = FlowTable::new(MissBehavior::AskController);
        assert!(t.lookup(&pkt(1, 2), Port::Virtual).is_none());
    }

    #[test]
    fn higher_priority_wins() {
        let mut t = FlowTable::new(MissBehavior::Drop);
        t.install(rule(1, 10, MatchFields::default(), to_wifi(), 0)).unwrap();
        t.install(rule(2, 20, MatchFields::default(), to_wifi(), 0)).unwrap();
        assert_eq!(t.lookup(&pkt(1, 2), Port::Virtual).unwrap().id, RuleId(2));
    }

    #[test]
    fn duplicate_rule_id_rejected() {
        let mut t = FlowTable::new(MissBehavior::Drop);
        t.install(rule(1, 10, MatchFields::default(), to_wifi(), 0)).unwrap();
        assert_eq!(
            t.install(rule(1, 30, MatchFields::default(), to_wifi(), 5)),
            Err(SwitchError::DuplicateRule(RuleId(1)))
        );
    }

    #[test]
    fn equal_priority_newer_then_lower_id() {
        let mut t = FlowTable::new(MissBehavior::Drop);
        t.install(rule(5, 10, MatchFields::default(), to_wifi(), 100)).unwrap();
        t.install(rule(3, 10, MatchFields::default(), to_wifi(), 200)).unwrap();
        assert_eq!(t.lookup(&pkt(1, 2), Port::Virtual).unwrap().id, RuleId(3));
        t.install(rule(1, 10, MatchFields::default(), to_wifi(), 200)).unwrap();
        assert_eq!(t.lookup(&pkt(1, 2), Port::Virtual).unwrap().id, RuleId(1));
    }

    #[test]
    fn rejects_two_outputs() {
        let mut t = FlowTable::new(MissBehavior::Drop);
        let actions = vec![
            FlowAction::Output(Port::Phys(InterfaceKind::WiFi)),
            FlowAction::Output(Port::Phys(InterfaceKind::Bluetooth)),
        ];
        assert_eq!(
            t.install(rule(1, 1, MatchFields::default(), actions, 0)),
            Err(SwitchError::MultipleOutputs(RuleId(1)))
        );
    }

    struct Fixed {
        rules: Vec<FlowRule>,
        calls: usize,
        result: Option<ControllerError>,
    }

    impl RuleSource for Fixed {
        fn packet_in(&mut self, _: &Packet, _: Port, _: SimTime) -> Result<Vec<FlowRule>, ControllerError> {
            self.calls += 1;
            match self.result {
                Some(e) => Err(e),
                None => Ok(std::mem::take(&mut self.rules)),
            }
        }
    }

    fn fixed(rules: Vec<FlowRule>, result: Option<ControllerError>) -> Fixed {
        Fixed { rules, calls: 0, result }
    }

    #[test]
    fn hit_applies_rewrite_then_output() {
        let mut sw = Switch::new(MissBehavior::AskController);
        let x = ip(99);
        sw.table
            .install(rule(1, 10, MatchFields::default(), vec![FlowAction::SetIpDst(x), FlowAction::Output(Port::Phys(InterfaceKind::WiFi))], 0))
            .unwrap();
        let p = pkt(1, 2);
        let mut none = fixed(vec![], Some(ControllerError::Dead));
        let mut none2 = fixed(vec![], Some(ControllerError::Dead));
        match sw.process(&p, Port::Virtual, SimTime::ZERO, &mut none, &mut none2) {
            ForwardDecision::Forward { port, packet } => {
                assert_eq!(port, Port::Phys(InterfaceKind::WiFi));
                assert_eq!(packet.dst_ip, x);
                assert_eq!(packet.payload_id, p.payload_id);
                assert_eq!(packet.size_bytes, p.size_bytes);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(none.calls, 0);
    }

    #[test]
    fn miss_escalates_once_per_flow() {
        let mut sw = Switch::new(MissBehavior::AskController);
        let m = MatchFields { ip_dst: Some(ip(2)), ..Default::default() };
        let mut local = fixed(vec![rule(1, 10, m, to_wifi(), 0)], None);
        let mut ext = fixed(vec![], Some(ControllerError::Dead));
        for _ in 0..5 {
            let d = sw.process(&pkt(1, 2), Port::Virtual, SimTime::ZERO, &mut local, &mut ext);
            assert!(matches!(d, ForwardDecision::Forward { .. }));
        }
        assert_eq!(local.calls, 1);
        assert_eq!(sw.counters.packet_ins, 1);
        assert_eq!(sw.counters.hits, 4);
    }

    #[test]
    fn miss_with_drop_behavior_counts() {
        let mut sw = Switch::new(MissBehavior::Drop);
        let mut local = fixed(vec![], None);
        let mut ext = fixed(vec![], None);
        let d = sw.process(&pkt(1, 2), Port::Virtual, SimTime::ZERO, &mut local, &mut ext);
        assert_eq!(d, ForwardDecision::Drop(DropReason::TableMiss));
        assert_eq!(sw.counters.miss_dropped, 1);
        assert_eq!(local.calls, 0);
    }

    #[test]
    fn dead_local_falls_back_then_unhandled() {
        let mut sw = Switch::new(MissBehavior::AskController);
        let mut local = fixed(vec![], Some(ControllerError::Dead));
        let mut ext = fixed(vec![rule(7, 10, MatchFields::default(), to_wifi(), 0)], None);
        let d = sw.process(&pkt(1, 2), Port::Virtual, SimTime::ZERO, &mut local, &mut ext);
        assert!(matches!(d, ForwardDecision::Forward { .. }));
        assert_eq!(sw.counters.fallback_packet_ins, 1);

        let mut sw = Switch::new(MissBehavior::AskController);
        let mut ext_dead = fixed(vec![], Some(ControllerError::Dead));
        let d = sw.process(&pkt(1, 2), Port::Virtual, SimTime::ZERO, &mut local, &mut ext_dead);
        assert_eq!(d, ForwardDecision::Drop(DropReason::UnhandledMiss));
        assert_eq!(sw.counters.unhandled_miss, 1);
    }

    struct Recorder(Vec<Packet>);
    impl ArpSink for Recorder {
        fn handle_arp(&mut self, p: &Packet, _: Port, _: SimTime) {
            self.0.push(p.clone());
        }
    }

    #[test]
    fn arp_is_diverted_and_other_traffic_is_not() {
        let mut sw = Switch::new(MissBehavior::AskController);
        let mut rec = Recorder(vec![]);
        let udp = pkt(1, 2);
        assert!(!sw.intercept_arp(&udp, Port::Virtual, SimTime::ZERO, &mut rec));
        let arp = Packet { protocol: Protocol::Arp, ..udp };
        assert!(sw.intercept_arp(&arp, Port::Phys(InterfaceKind::Bluetooth), SimTime::ZERO, &mut rec));
        assert_eq!(rec.0.len(), 1);
    }

    #[test]
    fn dump_is_canonical() {
        let mut t = FlowTable::new(MissBehavior::Drop);
        let m = MatchFields { in_port: Some(Port::Virtual), ip_dst: Some(ip(2)), ..Default::default() };
        t.install(rule(1, 10, m, vec![FlowAction::SetEthDst(mac(2)), FlowAction::Output(Port::Phys(InterfaceKind::Bluetooth))], 0))
            .unwrap();
        assert_eq!(
            t.dump(),
            "10  in_port=v0,ip_dst=10.0.0.2/24  set_eth_dst:02:00:00:00:00:02,output:bluetooth  local\n"
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        // Small address pools make overlaps between rules and packets common.
        fn arb_match() -> impl Strategy<Value = MatchFields> {
            (
                prop::option::of(prop_oneof![Just(Port::Virtual), Just(Port::Phys(InterfaceKind::WiFi)), Just(Port::Phys(InterfaceKind::Bluetooth))]),
                prop::option::of(1u8..4),
                prop::option::of(1u8..4),
                prop::option::of(1u8..4),
                prop::option::of(1u8..4),
                prop::option::of(prop_oneof![Just(Protocol::Udp), Just(Protocol::Tcp)]),
                prop::option::of(5000u16..5003),
            )
                .prop_map(|(in_port, es, ed, is, id, proto, dp)| MatchFields {
                    in_port,
                    eth_src: es.map(mac),
                    eth_dst: ed.map(mac),
                    ip_src: is.map(ip),
                    ip_dst: id.map(ip),
                    protocol: proto,
                    src_port: None,
                    dst_port: dp,
                })
        }

        fn arb_packet() -> impl Strategy<Value = (Packet, Port)> {
            (1u8..4, 1u8..4, 1u8..4, 1u8..4, prop_oneof![Just(Protocol::Udp), Just(Protocol::Tcp)], 5000u16..5003, 0usize..3).prop_map(
                |(es, ed, is, id, proto, dp, port)| {
                    let p = Packet {
                        src_mac: mac(es),
                        dst_mac: mac(ed),
                        src_ip: ip(is),
                        dst_ip: ip(id),
                        protocol: proto,
                        src_port: 4000,
                        dst_port: dp,
                        payload_id: crate::model::PayloadId(0),
                        size_bytes: 100,
                        sent_at: SimTime::ZERO,
                    };
                    let port = [Port::Virtual, Port::Phys(InterfaceKind::WiFi), Port::Phys(InterfaceKind::Bluetooth)][port];
                    (p, port)
                },
            )
        }

        /// Exhaustive scan: best = max over matching rules of (priority, installed_at, -id).
        fn brute_force<'a>(rules: &'a [FlowRule], p: &Packet, port: Port) -> Option<&'a FlowRule> {
            let mut best: Option<&FlowRule> = None;
            for r in rules {
                if !r.match_fields.matches(p, port) {
                    continue;
                }
                best = match best {
                    None => Some(r),
                    Some(b) => {
                        let better = r.priority > b.priority
                            || (r.priority == b.priority && r.installed_at > b.installed_at)
                            || (r.priority == b.priority && r.installed_at == b.installed_at && r.id < b.id);
                        if better { Some(r) } else { Some(b) }
                    }
                };
            }
            best
        }

        proptest! {
            #[test]
            fn lookup_equals_exhaustive_scan(
                specs in prop::collection::vec((0u16..4, arb_match(), 0u64..4), 0..50),
                packets in prop::collection::vec(arb_packet(), 1..40),
            ) {
                let mut t = FlowTable::new(MissBehavior::Drop);
                let mut all = vec![];
                for (i, (prio, m, at)) in specs.into_iter().enumerate() {
                    let r = rule(1000 - i as u64, prio, m, to_wifi(), at);
                    all.push(r.clone());
                    t.install(r).unwrap();
                }
                for (p, port) in &packets {
                    let got = t.lookup(p, *port).map(|r| r.id);
                    let want = brute_force(&all, p, *port).map(|r| r.id);
                    prop_assert_eq!(got, want);
                }
            }

            #[test]
            fn rewrites_keep_identity(m in arb_match(), (p, port) in arb_packet(), a in 1u8..4, b in 1u8..4) {
                let r = rule(1, 1, m, vec![
                    FlowAction::SetEthSrc(mac(a)), FlowAction::SetIpDst(ip(b)),
                    FlowAction::Output(Port::Virtual),
                ], 0);
                let (q, out) = r.apply(&p);
                prop_assert_eq!(out, Some(Port::Virtual));
                prop_assert_eq!(q.payload_id, p.payload_id);
                prop_assert_eq!(q.size_bytes, p.size_bytes);
                let _ = port;
            }
        }
    }
}
