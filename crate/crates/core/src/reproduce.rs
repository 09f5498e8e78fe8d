//! Built-in testbeds and the experiment drivers behind the `reproduce`
//! subcommands.

use std::fmt::Write as _;

use crate::energy::{savings_curve, savings_limit, savings_fraction, CycleBreakdown, EnergyParams, CYCLE_BASELINE_MJ, CYCLE_PROPOSED_MJ};
use crate::handover::Direction;
use crate::link::{JitterDist, LinkParams};
use crate::mobility::Point;
use crate::model::{InterfaceKind, InterfaceState, SimTime};
use crate::scenario::{Anchor, DeviceSpec, FlowSource, FlowSpec, HandoverScript, NetworkSpec, Scenario};
use crate::sim::{run_scenario, RunReport, SimError, SimOptions};
use crate::traffic::mean_ci95;

pub const REPETITIONS: u64 = 30;
/// Offered loads of the handover and relay experiments.
pub const RATES_KBPS: [f64; 5] = [100.0, 200.0, 300.0, 400.0, 500.0];
/// Payload of the CBR load generator.
pub const LOAD_PACKET_BYTES: u32 = 1000;
/// Points of the savings curve printed by [`energy_report`].
pub const CURVE_POINTS_S: [f64; 4] = [0.0, 60.0, 300.0, 600.0];

fn piconet(name: &str, master: &str, members: &[&str], params: LinkParams) -> NetworkSpec {
    NetworkSpec {
        name: name.into(),
        kind: InterfaceKind::Bluetooth,
        anchor: Anchor::Master(master.into()),
        members: members.iter().map(|m| m.to_string()).collect(),
        params,
    }
}

fn bss(name: &str, ap: Point, members: &[&str], params: LinkParams) -> NetworkSpec {
    NetworkSpec {
        name: name.into(),
        kind: InterfaceKind::WiFi,
        anchor: Anchor::Ap(ap),
        members: members.iter().map(|m| m.to_string()).collect(),
        params,
    }
}

fn cbr(name: &str, src: &str, dst: &str, rate_kbps: f64, start: SimTime, stop: SimTime) -> FlowSpec {
    FlowSpec {
        name: name.into(),
        src: src.into(),
        dst: dst.into(),
        source: FlowSource::Cbr { rate_kbps, size_bytes: LOAD_PACKET_BYTES },
        start,
        stop,
    }
}

/// Three devices sharing a piconet and an 802.11g BSS. Client1 streams CBR
/// to Client2, and both hand over in `direction` at t = 2 s.
pub fn handover_testbed(seed: u64, rate_kbps: f64, direction: Direction) -> Scenario {
    let mut s = Scenario::new("handover-testbed", seed, SimTime::from_secs(10));
    s.trigger_enabled = false;
    let from = direction.from_kind();
    s.devices.push(DeviceSpec::new("master", 0.0, 0.0, InterfaceKind::Bluetooth));
    s.devices.push(DeviceSpec::new("client1", 3.0, 0.0, from));
    s.devices.push(DeviceSpec::new("client2", -3.0, 0.0, from));
    s.networks.push(piconet("piconet", "master", &["master", "client1", "client2"], LinkParams::bluetooth_default()));
    s.networks.push(bss("wlan", Point::new(0.0, 20.0), &["client1", "client2"], LinkParams::wifi_default()));
    s.flows.push(cbr("load", "client1", "client2", rate_kbps, SimTime::from_secs(1), SimTime::from_secs(9)));
    s.handovers.push(HandoverScript {
        at: SimTime::from_secs(2),
        device: "client1".into(),
        peer: "client2".into(),
        direction,
    });
    s
}

/// Same topology with the trigger on; Client2 walks out of Bluetooth range
/// between 2 s and 2.5 s while receiving, which forces a move to Wi-Fi.
pub fn range_exit_testbed(seed: u64) -> Scenario {
    let mut s = handover_testbed(seed, 300.0, Direction::BluetoothToWiFi);
    s.name = "range-exit".into();
    s.trigger_enabled = true;
    s.handovers.clear();
    s.devices[2].position.waypoints =
        vec![(SimTime::from_secs(2), Point::new(-3.0, 0.0)), (SimTime::from_millis(2500), Point::new(-15.0, 0.0))];
    s
}

/// Link parameters without loss or jitter.
pub fn ideal(mut p: LinkParams) -> LinkParams {
    p.loss_prob = 0.0;
    p.jitter = JitterDist::Zero;
    p
}

/// Piconet of Master, Client1 and Client2 next to a BSS holding Client2 and
/// Client3. Client2 relays; Client3 streams CBR to Client1.
pub fn relay_testbed(seed: u64, rate_kbps: f64, ideal_links: bool) -> Scenario {
    let mut s = Scenario::new("relay-testbed", seed, SimTime::from_secs(12));
    s.trigger_enabled = false;
    let (bt, wifi) = if ideal_links {
        (ideal(LinkParams::bluetooth_default()), ideal(LinkParams::wifi_default()))
    } else {
        (LinkParams::bluetooth_default(), LinkParams::wifi_default())
    };
    s.devices.push(DeviceSpec::new("master", 0.0, 0.0, InterfaceKind::Bluetooth));
    s.devices.push(DeviceSpec::new("client1", 3.0, 0.0, InterfaceKind::Bluetooth));
    s.devices.push(DeviceSpec::new("client2", 0.0, 4.0, InterfaceKind::Bluetooth).relay());
    s.devices.push(DeviceSpec::new("client3", 35.0, 4.0, InterfaceKind::WiFi));
    s.networks.push(piconet("piconet", "master", &["master", "client1", "client2"], bt));
    s.networks.push(bss("wlan", Point::new(20.0, 10.0), &["client2", "client3"], wifi));
    s.flows.push(cbr("load", "client3", "client1", rate_kbps, SimTime::from_secs(1), SimTime::from_secs(11)));
    s
}

fn pct(x: f64) -> f64 {
    100.0 * x
}

/// Pure arithmetic on the energy constants; no simulation and no seed.
pub fn energy_report(params: &EnergyParams) -> String {
    let b = CycleBreakdown::compute(params, 3.0).expect("default constants are valid");
    let mut out = String::new();
    let w = |out: &mut String, key: &str, v: String| {
        let _ = writeln!(out, "{key:<34} = {v}");
    };
    w(&mut out, "wakeup_power_wifi_mw", format!("{:.2}", params.power_mw(InterfaceKind::WiFi, InterfaceState::WakingUp)));
    w(
        &mut out,
        "wakeup_power_bluetooth_mw",
        format!("{:.2}", params.power_mw(InterfaceKind::Bluetooth, InterfaceState::WakingUp)),
    );
    out.push('\n');
    w(&mut out, "segment_bt_wakeup_mj", format!("{:.2}", b.bt_wakeup_mj));
    w(&mut out, "segment_bt_active_mj", format!("{:.2}", b.bt_active_mj));
    w(&mut out, "segment_wifi_wakeup_mj", format!("{:.2}", b.wifi_wakeup_mj));
    w(&mut out, "segment_wifi_only_active_mj", format!("{:.2}", b.baseline_active_span_mj));
    w(&mut out, "segment_wifi_only_return_mj", format!("{:.2}", b.baseline_return_span_mj));
    out.push('\n');
    w(&mut out, "total_proposed_published_mj", format!("{CYCLE_PROPOSED_MJ:.2}"));
    w(&mut out, "total_wifi_only_published_mj", format!("{CYCLE_BASELINE_MJ:.2}"));
    w(&mut out, "total_proposed_segments_mj", format!("{:.2}", b.proposed_segments_mj()));
    w(&mut out, "total_wifi_only_segments_mj", format!("{:.2}", b.baseline_segments_mj()));
    let anchored = savings_fraction(CYCLE_PROPOSED_MJ, CYCLE_BASELINE_MJ).expect("positive baseline");
    let derived = savings_fraction(b.proposed_segments_mj(), b.baseline_segments_mj()).expect("positive baseline");
    w(&mut out, "savings_published_totals", format!("{:.2}%", pct(anchored)));
    w(&mut out, "savings_segment_totals", format!("{:.2}%", pct(derived)));
    let _ = writeln!(
        out,
        "note: published totals differ from the sums of the published segments \
         (proposed {:+.2} mJ, wifi-only {:+.2} mJ); the curve below is anchored on the published totals",
        CYCLE_PROPOSED_MJ - b.proposed_segments_mj(),
        CYCLE_BASELINE_MJ - b.baseline_segments_mj()
    );
    out.push('\n');
    for t in CURVE_POINTS_S {
        w(&mut out, &format!("savings_t{t:.0}"), format!("{:.2}%", pct(savings_curve(params, t))));
    }
    w(&mut out, "savings_limit", format!("{:.2}%", pct(savings_limit(params))));
    out
}

/// Delays of one handover experiment cell, in milliseconds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HandoverSamples {
    pub t_config_ms: Vec<f64>,
    pub t_rule_ms: Vec<f64>,
    pub delay_ms: Vec<f64>,
    pub lost: Vec<u64>,
    pub aborted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandoverCell {
    pub direction: Direction,
    pub rate_kbps: f64,
    pub samples: HandoverSamples,
}

#[derive(Debug, Clone, Default)]
pub struct HandoverStudy {
    pub cells: Vec<HandoverCell>,
    pub violations: Vec<String>,
}

impl HandoverStudy {
    /// All samples of one direction across rates.
    pub fn pooled(&self, direction: Direction) -> HandoverSamples {
        let mut all = HandoverSamples::default();
        for c in self.cells.iter().filter(|c| c.direction == direction) {
            all.t_config_ms.extend(&c.samples.t_config_ms);
            all.t_rule_ms.extend(&c.samples.t_rule_ms);
            all.delay_ms.extend(&c.samples.delay_ms);
            all.lost.extend(&c.samples.lost);
            all.aborted += c.samples.aborted;
        }
        all
    }
}

fn ms(t: SimTime) -> f64 {
    t.as_micros() as f64 / 1000.0
}

/// Runs every (direction, rate, seed) combination. Records come from the
/// sending device.
pub fn handover_study(seeds: u64, rates: &[f64]) -> Result<HandoverStudy, SimError> {
    let mut study = HandoverStudy::default();
    for direction in [Direction::BluetoothToWiFi, Direction::WiFiToBluetooth] {
        for &rate in rates {
            let mut samples = HandoverSamples::default();
            for seed in 1..=seeds {
                let report = run_scenario(&handover_testbed(seed, rate, direction), SimOptions::default())?;
                study.violations.extend(report.violations.iter().map(|v| format!("seed {seed}: {v}")));
                for h in report.handovers.iter().filter(|h| h.device == "client1") {
                    let t = &h.timings;
                    if t.aborted() {
                        samples.aborted += 1;
                        continue;
                    }
                    samples.t_config_ms.push(ms(t.t_config));
                    samples.t_rule_ms.push(ms(t.t_rule_install));
                    samples.delay_ms.push(ms(t.delay()));
                    samples.lost.push(t.lost_packets);
                }
            }
            study.cells.push(HandoverCell { direction, rate_kbps: rate, samples });
        }
    }
    Ok(study)
}

fn ci(xs: &[f64]) -> String {
    let (m, h) = mean_ci95(xs);
    format!("{m:>8.2} ± {h:<6.2}")
}

pub fn render_handover_study(study: &HandoverStudy) -> String {
    let mut out = String::new();
    out.push_str("# offered loads chosen to match the relay experiment; mean ± 95% CI over seeds\n");
    let _ = writeln!(
        out,
        "{:<18} {:>6} {:>4} {:>17} {:>17} {:>17} {:>9} {:>7}",
        "direction", "kbps", "n", "t_config_ms", "t_rule_ms", "delay_ms", "max_ms", "aborted"
    );
    for c in &study.cells {
        let s = &c.samples;
        let max = s.delay_ms.iter().cloned().fold(0.0, f64::max);
        let _ = writeln!(
            out,
            "{:<18} {:>6.0} {:>4} {:>17} {:>17} {:>17} {:>9.2} {:>7}",
            c.direction.as_str(),
            c.rate_kbps,
            s.delay_ms.len(),
            ci(&s.t_config_ms),
            ci(&s.t_rule_ms),
            ci(&s.delay_ms),
            max,
            s.aborted
        );
    }
    out.push('\n');
    for d in [Direction::BluetoothToWiFi, Direction::WiFiToBluetooth] {
        let p = study.pooled(d);
        let max = p.delay_ms.iter().cloned().fold(0.0, f64::max);
        let (rule, _) = mean_ci95(&p.t_rule_ms);
        let (config, _) = mean_ci95(&p.t_config_ms);
        let _ = writeln!(
            out,
            "{:<18} delay {} max {:.2} ms  rule/config {:.3}  under_150ms {}",
            d.as_str(),
            ci(&p.delay_ms),
            max,
            rule / config,
            if max < 150.0 && p.aborted == 0 { "yes" } else { "no" }
        );
    }
    let _ = writeln!(out, "violations {}", study.violations.len());
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelayCell {
    pub rate_kbps: f64,
    pub jitter_ms: Vec<f64>,
    pub loss_pct: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RelayStudy {
    pub cells: Vec<RelayCell>,
    pub violations: Vec<String>,
}

pub fn relay_study(seeds: u64, rates: &[f64], ideal_links: bool) -> Result<RelayStudy, SimError> {
    let mut study = RelayStudy::default();
    for &rate in rates {
        let mut cell = RelayCell { rate_kbps: rate, jitter_ms: Vec::new(), loss_pct: Vec::new() };
        for seed in 1..=seeds {
            let report: RunReport = run_scenario(&relay_testbed(seed, rate, ideal_links), SimOptions::default())?;
            study.violations.extend(report.violations.iter().map(|v| format!("seed {seed}: {v}")));
            let f = &report.flows[0];
            cell.jitter_ms.push(f.metrics.jitter.avg_ms());
            cell.loss_pct.push(100.0 * f.metrics.loss.loss_rate());
        }
        study.cells.push(cell);
    }
    Ok(study)
}

pub fn render_relay_study(study: &RelayStudy) -> String {
    let mut out = String::new();
    out.push_str("# client3 -> client2 (relay) -> client1; mean ± 95% CI over seeds\n");
    let _ = writeln!(
        out,
        "{:>6} {:>4} {:>17} {:>9} {:>17} {:>9} {:>9}",
        "kbps", "n", "jitter_ms", "max_ms", "loss_pct", "min_pct", "max_pct"
    );
    for c in &study.cells {
        let fold_max = |xs: &[f64]| xs.iter().cloned().fold(0.0, f64::max);
        let min_loss = c.loss_pct.iter().cloned().fold(f64::INFINITY, f64::min);
        let _ = writeln!(
            out,
            "{:>6.0} {:>4} {:>17} {:>9.3} {:>17} {:>9.3} {:>9.3}",
            c.rate_kbps,
            c.jitter_ms.len(),
            ci(&c.jitter_ms),
            fold_max(&c.jitter_ms),
            ci(&c.loss_pct),
            if min_loss.is_finite() { min_loss } else { 0.0 },
            fold_max(&c.loss_pct)
        );
    }
    let _ = writeln!(out, "violations {}", study.violations.len());
    out
}
