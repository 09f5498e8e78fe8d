//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

mod common;

use std::net::Ipv4Addr;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use hetnet::controller::{
    d2d_exchange, ControllerLiveness, FallbackController, InterfaceRecord, LocalController, LocalDb, RuleIdGen,
};
use hetnet::energy::{savings_curve, savings_fraction, EnergyParams};
use hetnet::handover::{evaluate_trigger, Decision, Direction, TriggerConfig};
use hetnet::model::{
    make_udp_packet, DeviceId, Endpoint, InterfaceKind, IpAddress, MacAddress, Packet, PayloadId, PayloadIdGen,
    Protocol, SimTime,
};
use hetnet::report::{handovers_csv, summary, traffic_csv};
use hetnet::reproduce::{
    energy_report, handover_study, handover_testbed, range_exit_testbed, relay_study, relay_testbed, RATES_KBPS,
    REPETITIONS,
};
use hetnet::scenario::parse_scenario;
use hetnet::sim::{run_scenario, virtual_endpoint, RunReport, SimOptions};
use hetnet::switch::{FlowAction, FlowRule, FlowTable, MatchFields, MissBehavior, Port, RuleId, RuleOrigin, RuleSource};
use hetnet::traffic::JitterEstimator;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

const PACKETS: SimOptions = SimOptions { trace: false, record_packets: true };

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol + 1e-9
}

fn report_value(text: &str, key: &str) -> Option<f64> {
    text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == key).then(|| v.trim().trim_end_matches('%').parse().ok())?
    })
}

fn energy() -> Outcome {
    let start = Instant::now();
    let text = energy_report(&EnergyParams::default());
    let elapsed = start.elapsed();
    let expected = [
        ("wakeup_power_bluetooth_mw", 137.95),
        ("wakeup_power_wifi_mw", 383.41),
        ("segment_bt_wakeup_mj", 1917.99),
        ("segment_bt_active_mj", 953.88),
        ("segment_wifi_wakeup_mj", 590.25),
        ("segment_wifi_only_active_mj", 2094.87),
        ("segment_wifi_only_return_mj", 977.60),
        ("savings_t0", 24.42),
    ];
    for (key, want) in expected {
        let got = report_value(&text, key).ok_or_else(|| format!("{key} missing"))?;
        check!(close(got, want, 0.01), "{key} = {got}, want {want}");
    }
    let s0 = 100.0 * savings_fraction(3471.66, 4593.54).map_err(|e| e.to_string())?;
    check!(close(s0, 24.42, 0.01), "savings at the anchors {s0}");
    let s600 = 100.0 * savings_curve(&EnergyParams::default(), 600.0);
    check!(close(s600, 44.7, 0.1), "savings after 600 s {s600}");
    let printed = report_value(&text, "savings_t600").ok_or("savings_t600 missing")?;
    check!(close(printed, 44.7, 0.1), "printed savings_t600 {printed}");
    check!(text.contains("published totals differ"), "totals inconsistency not reported");
    check!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("savings {s0:.2}% at t=0, {s600:.2}% at 600 s, {elapsed:?}"))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn handover_delay() -> Outcome {
    let start = Instant::now();
    let study = handover_study(REPETITIONS, &RATES_KBPS).map_err(|e| e.to_string())?;
    check!(study.violations.is_empty(), "violations: {:?}", study.violations);
    let b2w = study.pooled(Direction::BluetoothToWiFi);
    let w2b = study.pooled(Direction::WiFiToBluetooth);
    for (name, s) in [("B->W", &b2w), ("W->B", &w2b)] {
        check!(s.aborted == 0, "{name}: {} aborted", s.aborted);
        check!(s.delay_ms.len() as u64 >= REPETITIONS, "{name}: only {} samples", s.delay_ms.len());
        let worst = s.delay_ms.iter().cloned().fold(0.0, f64::max);
        check!(worst < 150.0, "{name}: delay {worst} ms");
    }
    for (name, xs) in [("t_config", &b2w.t_config_ms), ("t_rule_install", &b2w.t_rule_ms), ("delay", &b2w.delay_ms)] {
        let m = mean(xs);
        check!((70.0..=90.0).contains(&m), "B->W mean {name} {m}");
    }
    let ratio = mean(&w2b.t_rule_ms) / mean(&w2b.t_config_ms);
    check!((1.0 / 8.0..=1.0 / 4.0).contains(&ratio), "W->B rule/config ratio {ratio}");
    Ok(format!(
        "{} runs, B->W mean {:.1} ms, W->B ratio {ratio:.3}, {:?}",
        b2w.delay_ms.len() + w2b.delay_ms.len(),
        mean(&b2w.delay_ms),
        start.elapsed()
    ))
}

fn loss_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut lossy = 0;
    for case in 0..1000 {
        let seed = rng.gen_range(0..10_000);
        let rate = rng.gen_range(50.0..600.0);
        let config = SimTime::from_micros(rng.gen_range(0..200_000));
        let rule = SimTime::from_micros(rng.gen_range(0..200_000));
        let dir = if rng.gen() { Direction::BluetoothToWiFi } else { Direction::WiFiToBluetooth };
        let mut s = handover_testbed(seed, rate, dir);
        fix_activities(&mut s, config, rule);
        let r = run_scenario(&s, PACKETS).map_err(|e| e.to_string())?;
        check!(r.violations.is_empty(), "case {case}: {:?}", r.violations);
        let h = sender_records(&r, "client1").next().ok_or(format!("case {case}: no handover"))?;
        check!(!h.timings.aborted(), "case {case}: aborted");
        let (rule_done, config_done) = window(h);
        let expected = emitted_within(&r.sent, 0, rule_done, config_done);
        let f = &r.flows[0];
        let simulated = f.metrics.loss.sent - f.metrics.loss.received - f.in_flight;
        check!(simulated == expected, "case {case}: lost {simulated}, oracle {expected}");
        check!(h.timings.lost_packets == expected, "case {case}: recorded {}", h.timings.lost_packets);
        if config <= rule {
            check!(expected == 0, "case {case}: config first yet {expected} lost");
        }
        lossy += usize::from(expected > 0);
    }
    Ok(format!("1000 cases, {lossy} with a nonempty window"))
}

fn trigger_oracle(history: &[f64], active: InterfaceKind, in_range: bool) -> Decision {
    if history.len() < 3 {
        return Decision::Stay;
    }
    let last = &history[history.len() - 3..];
    let below = last[0] < 5.0 && last[1] < 5.0 && last[2] < 5.0;
    let above = last[0] >= 5.0 && last[1] >= 5.0 && last[2] >= 5.0;
    if active == InterfaceKind::WiFi && below && in_range {
        Decision::SwitchToBluetooth
    } else if active == InterfaceKind::Bluetooth && above {
        Decision::SwitchToWiFi
    } else {
        Decision::Stay
    }
}

fn trigger() -> Outcome {
    let cfg = TriggerConfig::default();
    let rates = [0.0, 4.9, 5.0, 5.1, 100.0];
    let mut n = 0;
    for a in rates {
        for b in rates {
            for c in rates {
                for active in [InterfaceKind::WiFi, InterfaceKind::Bluetooth] {
                    for in_range in [false, true] {
                        let h = [a, b, c];
                        let got = evaluate_trigger(&cfg, &h, active, in_range);
                        let want = trigger_oracle(&h, active, in_range);
                        check!(got == want, "{h:?} {active:?} in_range={in_range}: {got:?}, want {want:?}");
                        n += 1;
                    }
                }
            }
        }
    }
    use InterfaceKind::*;
    let examples: [(&[f64], InterfaceKind, bool, Decision); 6] = [
        (&[0.0, 0.0, 0.0], WiFi, true, Decision::SwitchToBluetooth),
        (&[0.0, 0.0, 0.0], Bluetooth, true, Decision::Stay),
        (&[120.0, 200.0, 96.0], Bluetooth, true, Decision::SwitchToWiFi),
        (&[0.0, 0.0, 4.9, 6.0], WiFi, true, Decision::Stay),
        (&[0.0, 0.0, 4.9, 6.0], Bluetooth, true, Decision::Stay),
        (&[0.0, 0.0, 0.0], WiFi, false, Decision::Stay),
    ];
    for (h, active, in_range, want) in examples {
        let got = evaluate_trigger(&cfg, h, active, in_range);
        check!(got == want, "example {h:?} {active:?}: {got:?}, want {want:?}");
    }
    Ok(format!("{n} exhaustive inputs and the worked examples"))
}

fn mac(n: u8) -> MacAddress {
    MacAddress([2, 0, 0, 0, 0, n])
}

fn ip(n: u8) -> IpAddress {
    IpAddress::new(Ipv4Addr::new(10, 0, 0, n), 24)
}

const PORTS: [Port; 3] = [Port::Virtual, Port::Phys(InterfaceKind::WiFi), Port::Phys(InterfaceKind::Bluetooth)];

fn opt<T>(rng: &mut ChaCha8Rng, f: impl FnOnce(&mut ChaCha8Rng) -> T) -> Option<T> {
    if rng.gen_bool(0.5) {
        Some(f(rng))
    } else {
        None
    }
}

fn random_rule(rng: &mut ChaCha8Rng, id: u64) -> FlowRule {
    let m = MatchFields {
        in_port: opt(rng, |r| PORTS[r.gen_range(0..3)]),
        eth_src: opt(rng, |r| mac(r.gen_range(1..4))),
        eth_dst: opt(rng, |r| mac(r.gen_range(1..4))),
        ip_src: opt(rng, |r| ip(r.gen_range(1..4))),
        ip_dst: opt(rng, |r| ip(r.gen_range(1..4))),
        protocol: opt(rng, |r| if r.gen() { Protocol::Udp } else { Protocol::Tcp }),
        src_port: None,
        dst_port: opt(rng, |r| r.gen_range(5000..5003)),
    };
    FlowRule {
        id: RuleId(id),
        priority: rng.gen_range(0..4),
        match_fields: m,
        actions: vec![FlowAction::Output(PORTS[rng.gen_range(0..3)])],
        installed_at: SimTime::from_millis(rng.gen_range(0..4)),
        origin: RuleOrigin::LocalController,
    }
}

fn random_packet(rng: &mut ChaCha8Rng) -> (Packet, Port) {
    let p = Packet {
        src_mac: mac(rng.gen_range(1..4)),
        dst_mac: mac(rng.gen_range(1..4)),
        src_ip: ip(rng.gen_range(1..4)),
        dst_ip: ip(rng.gen_range(1..4)),
        protocol: if rng.gen() { Protocol::Udp } else { Protocol::Tcp },
        src_port: 4000,
        dst_port: rng.gen_range(5000..5003),
        payload_id: PayloadId(0),
        size_bytes: 100,
        sent_at: SimTime::ZERO,
    };
    (p, PORTS[rng.gen_range(0..3)])
}

/// Highest priority, then most recently installed, then lowest id.
fn scan<'a>(rules: &'a [FlowRule], p: &Packet, port: Port) -> Option<&'a FlowRule> {
    let mut best: Option<&FlowRule> = None;
    for r in rules.iter().filter(|r| r.match_fields.matches(p, port)) {
        let wins = match best {
            None => true,
            Some(b) => (r.priority, r.installed_at, std::cmp::Reverse(r.id)) > (b.priority, b.installed_at, std::cmp::Reverse(b.id)),
        };
        if wins {
            best = Some(r);
        }
    }
    best
}

fn flow_table() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut hits = 0;
    for case in 0..10_000 {
        let mut table = FlowTable::new(MissBehavior::Drop);
        let mut rules = Vec::new();
        let mut ids: Vec<u64> = (1..=40).collect();
        for _ in 0..rng.gen_range(0..40) {
            let id = ids.swap_remove(rng.gen_range(0..ids.len()));
            let r = random_rule(&mut rng, id);
            table.install(r.clone()).map_err(|e| e.to_string())?;
            rules.push(r);
        }
        let (p, port) = random_packet(&mut rng);
        let got = table.lookup(&p, port).map(|r| r.id);
        let want = scan(&rules, &p, port).map(|r| r.id);
        check!(got == want, "case {case}: lookup {got:?}, scan {want:?}");
        hits += usize::from(got.is_some());
    }
    let r = run_scenario(&relay_testbed(1, 300.0, false), SimOptions::default()).map_err(|e| e.to_string())?;
    for d in &r.devices {
        check!(d.switch.packet_ins <= 1, "{}: {} packet-ins for one flow", d.name, d.switch.packet_ins);
    }
    let r = run_scenario(&double_handover(2, 300.0), SimOptions::default()).map_err(|e| e.to_string())?;
    for d in &r.devices {
        check!(d.switch.packet_ins <= 1, "{}: {} packet-ins across handovers", d.name, d.switch.packet_ins);
    }
    Ok(format!("10000 instances ({hits} matched), one packet-in per flow"))
}

fn virtual_addresses() -> Outcome {
    let mut frames = 0;
    for seed in 0..10 {
        let rate = [100.0, 200.0, 300.0, 400.0, 500.0][seed as usize % 5];
        let r = run_scenario(&double_handover(seed, rate), PACKETS).map_err(|e| e.to_string())?;
        check!(r.violations.is_empty(), "seed {seed}: {:?}", r.violations);
        let committed: Vec<_> = sender_records(&r, "client1").filter(|h| !h.timings.aborted()).collect();
        check!(committed.len() == 2, "seed {seed}: {} committed handovers", committed.len());
        check!(r.boundary.iter().all(only_virtual), "seed {seed}: physical address at the boundary");
        let f = &r.flows[0];
        let lost = f.metrics.loss.sent - f.metrics.loss.received - f.in_flight;
        let windows: u64 = r.handovers.iter().map(|h| h.timings.lost_packets).sum();
        check!(lost == windows, "seed {seed}: lost {lost}, windows {windows}");
        frames += r.boundary.len();
    }
    Ok(format!("10 runs, {frames} boundary frames, loss equals window counts"))
}

fn relay() -> Outcome {
    for rate in [100.0, 300.0, 500.0] {
        let r = run_scenario(&relay_testbed(9, rate, true), PACKETS).map_err(|e| e.to_string())?;
        let sent: Vec<u64> = r.sent.iter().map(|p| p.payload_id.0).collect();
        let got: Vec<u64> = r.delivered.iter().map(|p| p.payload_id.0).collect();
        check!(!sent.is_empty() && sent == got, "ideal relay at {rate} kbps: {} sent, {} delivered", sent.len(), got.len());
    }
    let rates = [200.0, 300.0, 400.0];
    let study = relay_study(REPETITIONS, &rates, false).map_err(|e| e.to_string())?;
    check!(study.violations.is_empty(), "violations: {:?}", study.violations);
    let mut parts = Vec::new();
    for c in &study.cells {
        let (j, l) = (mean(&c.jitter_ms), mean(&c.loss_pct));
        check!(c.jitter_ms.len() as u64 == REPETITIONS, "{} kbps: {} runs", c.rate_kbps, c.jitter_ms.len());
        check!(j < 20.0, "{} kbps: mean jitter {j} ms", c.rate_kbps);
        check!(l <= 0.2, "{} kbps: mean loss {l}%", c.rate_kbps);
        parts.push(format!("{}: {j:.2} ms/{l:.3}%", c.rate_kbps));
    }
    Ok(format!("ideal links lossless and ordered; {}", parts.join(", ")))
}

fn db(index: usize, active: InterfaceKind) -> LocalDb {
    let n = (index + 1) as u8;
    let rec = |kind, k: u8, net: &str| InterfaceRecord {
        kind,
        mac: MacAddress([2, 0, 0, k, 0, n]),
        ip: IpAddress::new(Ipv4Addr::new(192, 168, k, n), 24),
        network: Some(net.into()),
        connected: true,
    };
    LocalDb::new(
        DeviceId(index as u32),
        virtual_endpoint(index),
        active,
        [rec(InterfaceKind::WiFi, 1, "wlan"), rec(InterfaceKind::Bluetooth, 2, "pan")],
        SimTime::from_millis(50),
    )
}

fn fallback() -> Outcome {
    let mut compared = 0;
    let mut dead = ControllerLiveness::default();
    dead.kill(SimTime::from_secs(1));
    let alive = ControllerLiveness::default();
    for active in [InterfaceKind::WiFi, InterfaceKind::Bluetooth] {
        let (mut a, mut b) = (db(0, active), db(1, active));
        d2d_exchange(&mut a, &mut b, SimTime::ZERO).map_err(|e| e.to_string())?;
        let mut ids = PayloadIdGen::new();
        let ea = Endpoint { mac: a.virtual_ep.mac, ip: a.virtual_ep.ip, port: 5000 };
        let eb = Endpoint { mac: b.virtual_ep.mac, ip: b.virtual_ep.ip, port: 5001 };
        let out = make_udp_packet(&mut ids, &ea, &eb, 200, SimTime::ZERO).map_err(|e| e.to_string())?;
        let (wire, _) = {
            let rules = LocalController { db: &a, ids: &RuleIdGen::new(), liveness: &alive }
                .packet_in(&out, Port::Virtual, SimTime::ZERO)
                .map_err(|e| e.to_string())?;
            rules[0].apply(&out)
        };
        for (me, p, port) in [(&a, &out, Port::Virtual), (&b, &wire, Port::Phys(active))] {
            let local = LocalController { db: me, ids: &RuleIdGen::new(), liveness: &alive }
                .packet_in(p, port, SimTime::ZERO)
                .map_err(|e| e.to_string())?;
            let fb = FallbackController { db: me, ids: &RuleIdGen::new(), liveness: &dead }
                .packet_in(p, port, SimTime::ZERO)
                .map_err(|e| e.to_string())?;
            check!(local.len() == fb.len(), "rule counts differ");
            for (l, f) in local.iter().zip(&fb) {
                check!(l.same_behavior(f), "rules differ:\n{l:?}\n{f:?}");
                check!(l.origin == RuleOrigin::LocalController && f.origin == RuleOrigin::ExtendedController, "origins");
                compared += 1;
            }
        }
    }
    for seed in 0..10 {
        let mut s = handover_testbed(seed, 300.0, Direction::BluetoothToWiFi);
        s.handovers.clear();
        for d in &mut s.devices {
            d.controller_die_at = Some(SimTime::from_secs(3));
        }
        let r = run_scenario(&s, SimOptions::default()).map_err(|e| e.to_string())?;
        let f = &r.flows[0];
        check!(f.metrics.loss.sent > 0, "seed {seed}: nothing sent");
        check!(f.metrics.loss.sent == f.metrics.loss.received, "seed {seed}: {} lost", f.dropped());
        check!(r.violations.is_empty(), "seed {seed}: {:?}", r.violations);
    }
    Ok(format!("{compared} rule pairs identical, no loss across controller death in 10 runs"))
}

fn rendered(r: &RunReport) -> String {
    let mut out = summary(r) + &traffic_csv(r) + &handovers_csv(r);
    for d in &r.devices {
        out += &d.energy.to_csv();
    }
    out + r.trace.as_deref().unwrap_or("")
}

fn determinism() -> Outcome {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/voice_walkout.toml"))
        .map_err(|e| e.to_string())?;
    let voice = parse_scenario(&text).map_err(|e| e.to_string())?;
    let opts = SimOptions { trace: true, record_packets: false };
    let mut bytes = 0;
    for s in [voice, range_exit_testbed(4), double_handover(7, 400.0), relay_testbed(3, 300.0, false)] {
        let a = rendered(&run_scenario(&s, opts).map_err(|e| e.to_string())?);
        let b = rendered(&run_scenario(&s, opts).map_err(|e| e.to_string())?);
        check!(a == b, "{} differs between runs", s.name);
        bytes += a.len();
    }
    let golden = include_str!("golden/double_handover_seed7.csv");
    let r = run_scenario(&double_handover(7, 300.0), SimOptions::default()).map_err(|e| e.to_string())?;
    check!(traffic_csv(&r) + &handovers_csv(&r) == golden, "golden double handover report changed");
    Ok(format!("4 scenarios byte-identical ({bytes} bytes), golden report matches"))
}

fn jitter() -> Outcome {
    let mut est = JitterEstimator::new();
    for (s, r) in [(0, 5), (20, 25), (40, 55)] {
        est.update(SimTime::from_millis(s), SimTime::from_millis(r));
    }
    check!(est.jitter_ms() == 0.625, "worked example gives {}", est.jitter_ms());
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..10_000 {
        let n = rng.gen_range(1..60);
        let mut t = 0u64;
        let trace: Vec<(u64, u64)> = (0..n)
            .map(|_| {
                t += rng.gen_range(0..50_000);
                (t, t + rng.gen_range(0..100_000))
            })
            .collect();
        let mut est = JitterEstimator::new();
        for &(s, r) in &trace {
            est.update(SimTime::from_micros(s), SimTime::from_micros(r));
        }
        let want = jitter_oracle(&trace) / 1000.0;
        check!(close(est.jitter_ms(), want, 1e-9), "case {case}: {} vs {want}", est.jitter_ms());
    }
    Ok("worked example 0.625 ms, 10000 random traces".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("energy arithmetic", energy),
        ("handover delay", handover_delay),
        ("handover loss law", loss_law),
        ("trigger correctness", trigger),
        ("flow-table equivalence", flow_table),
        ("virtual-address stability", virtual_addresses),
        ("relay conservation", relay),
        ("fallback equivalence", fallback),
        ("determinism", determinism),
        ("jitter estimator", jitter),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS criterion {}: {name} ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
