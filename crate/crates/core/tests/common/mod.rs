#![allow(dead_code)]

use hetnet::handover::{ActivityDist, Direction};
use hetnet::model::{MacAddress, SimTime};
use hetnet::reproduce::handover_testbed;
use hetnet::scenario::{HandoverScript, Scenario};
use hetnet::sim::{virtual_endpoint, BoundaryFrame, HandoverRecord, PacketRecord, RunReport};

/// Both directions use the same fixed activity durations.
pub fn fix_activities(s: &mut Scenario, t_config: SimTime, t_rule: SimTime) {
    let d = &mut s.distributions;
    d.b2w_config = ActivityDist::Fixed(t_config);
    d.w2b_config = ActivityDist::Fixed(t_config);
    d.b2w_rule_install = ActivityDist::Fixed(t_rule);
    d.w2b_rule_install = ActivityDist::Fixed(t_rule);
}

/// Bluetooth to Wi-Fi at 2 s, back to Bluetooth at 5 s, under CBR.
pub fn double_handover(seed: u64, rate_kbps: f64) -> Scenario {
    let mut s = handover_testbed(seed, rate_kbps, Direction::BluetoothToWiFi);
    s.name = "double-handover".into();
    s.duration = SimTime::from_secs(11);
    s.flows[0].stop = SimTime::from_millis(10_500);
    s.handovers.push(HandoverScript {
        at: SimTime::from_secs(5),
        device: "client1".into(),
        peer: "client2".into(),
        direction: Direction::WiFiToBluetooth,
    });
    s
}

/// Emissions of `flow` inside `[from, to)`.
pub fn emitted_within(sent: &[PacketRecord], flow: usize, from: SimTime, to: SimTime) -> u64 {
    sent.iter().filter(|p| p.flow == flow && p.sent_at >= from && p.sent_at < to).count() as u64
}

pub fn window(h: &HandoverRecord) -> (SimTime, SimTime) {
    let c = h.timings.committed_at.expect("committed");
    (c + h.timings.t_rule_install, c + h.timings.t_config)
}

pub fn sender_records<'a>(r: &'a RunReport, device: &'a str) -> impl Iterator<Item = &'a HandoverRecord> + 'a {
    r.handovers.iter().filter(move |h| h.device == device)
}

pub fn is_virtual_mac(m: MacAddress) -> bool {
    (0..250).any(|i| virtual_endpoint(i).mac == m)
}

pub fn only_virtual(f: &BoundaryFrame) -> bool {
    let v = |ip: std::net::Ipv4Addr| ip.octets()[..3] == [10, 0, 0];
    is_virtual_mac(f.src_mac) && is_virtual_mac(f.dst_mac) && v(f.src_ip.addr) && v(f.dst_ip.addr)
}

/// Independent jitter recurrence over (send, receive) pairs in microseconds.
pub fn jitter_oracle(trace: &[(u64, u64)]) -> f64 {
    let mut j = 0.0f64;
    for w in trace.windows(2) {
        let d = (w[1].1 as f64 - w[1].0 as f64) - (w[0].1 as f64 - w[0].0 as f64);
        j += (d.abs() - j) / 16.0;
    }
    j
}
