//! Text renderings of a [`RunReport`]: CSV files for plotting and an aligned
//! summary for people. Output depends only on the report, so a fixed
//! scenario and seed always produce the same bytes.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::energy::{savings_fraction, EnergyParams};
use crate::model::{InterfaceKind, InterfaceState, SimTime};
use crate::sim::RunReport;

fn ms(t: SimTime) -> f64 {
    t.as_micros() as f64 / 1000.0
}

/// `flow,src,dst,sent,received,dropped,in_flight,loss_rate,avg_jitter_ms,max_jitter_ms,mean_kbps`
pub fn traffic_csv(r: &RunReport) -> String {
    let mut out = String::from("flow,src,dst,sent,received,dropped,in_flight,loss_rate,avg_jitter_ms,max_jitter_ms,mean_kbps\n");
    for f in &r.flows {
        let m = &f.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6},{:.3},{:.3},{:.3}",
            f.name,
            f.src,
            f.dst,
            m.loss.sent,
            m.loss.received,
            f.dropped(),
            f.in_flight,
            m.loss.loss_rate(),
            m.jitter.avg_ms(),
            m.jitter.max_ms(),
            m.mean_kbps(f.span)
        );
    }
    out
}

/// One row per handover attempt; aborted attempts leave the commit columns
/// empty and say so in `outcome`.
pub fn handovers_csv(r: &RunReport) -> String {
    let mut out = String::from(
        "device,peer,direction,epoch,started_at_us,committed_at_us,outcome,association_ms,sync_ms,t_config_ms,t_rule_install_ms,delay_ms,lost_packets\n",
    );
    for h in &r.handovers {
        let t = &h.timings;
        let _ = match t.committed_at {
            Some(c) => writeln!(
                out,
                "{},{},{},{},{},{},committed,{:.3},{:.3},{:.3},{:.3},{:.3},{}",
                h.device,
                h.peer,
                t.direction,
                t.epoch,
                t.started_at.as_micros(),
                c.as_micros(),
                ms(t.association_duration),
                ms(t.sync_duration),
                ms(t.t_config),
                ms(t.t_rule_install),
                ms(t.delay()),
                t.lost_packets
            ),
            None => writeln!(
                out,
                "{},{},{},{},{},,aborted,{:.3},,,,,0",
                h.device,
                h.peer,
                t.direction,
                t.epoch,
                t.started_at.as_micros(),
                ms(t.association_duration)
            ),
        };
    }
    out
}

/// Energy of a device that kept Wi-Fi active and Bluetooth off for the run.
pub fn wifi_only_baseline_mj(params: &EnergyParams, duration: SimTime) -> f64 {
    let secs = duration.as_micros() as f64 / 1e6;
    (params.power_mw(InterfaceKind::WiFi, InterfaceState::Active)
        + params.power_mw(InterfaceKind::Bluetooth, InterfaceState::Off))
        * secs
}

pub fn summary(r: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "scenario  {}", r.scenario);
    let _ = writeln!(out, "seed      {}", r.seed);
    let _ = writeln!(out, "duration  {}", r.duration);
    out.push('\n');

    let _ = writeln!(
        out,
        "{:<16} {:>8} {:>8} {:>8} {:>10} {:>10} {:>10}",
        "flow", "sent", "recv", "loss%", "jitter_ms", "max_ms", "kbps"
    );
    for f in &r.flows {
        let m = &f.metrics;
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>8} {:>8.3} {:>10.3} {:>10.3} {:>10.1}",
            f.name,
            m.loss.sent,
            m.loss.received,
            100.0 * m.loss.loss_rate(),
            m.jitter.avg_ms(),
            m.jitter.max_ms(),
            m.mean_kbps(f.span)
        );
        for (cause, n) in &f.drops {
            let _ = writeln!(out, "  dropped {:<16} {n}", cause.as_str());
        }
    }
    out.push('\n');

    let committed = r.handovers.iter().filter(|h| !h.timings.aborted()).count();
    let _ = writeln!(out, "handovers {} committed, {} aborted", committed, r.handovers.len() - committed);
    for h in &r.handovers {
        let t = &h.timings;
        if t.aborted() {
            let _ = writeln!(out, "  {:<12} {:<18} aborted", h.device, t.direction.as_str());
        } else {
            let _ = writeln!(
                out,
                "  {:<12} {:<18} delay {:>8.3} ms  lost {}",
                h.device,
                t.direction.as_str(),
                ms(t.delay()),
                t.lost_packets
            );
        }
    }
    out.push('\n');

    let _ = writeln!(out, "{:<16} {:>12} {:>12} {:>12} {:>9}", "device", "wifi_mj", "bt_mj", "total_mj", "saved%");
    let mut total = 0.0;
    let mut baseline = 0.0;
    for d in &r.devices {
        let base = wifi_only_baseline_mj(&d.energy.params, r.duration);
        let saved = savings_fraction(d.energy.total_mj(), base).map(|s| 100.0 * s).unwrap_or(0.0);
        total += d.energy.total_mj();
        baseline += base;
        let _ = writeln!(
            out,
            "{:<16} {:>12.2} {:>12.2} {:>12.2} {:>9.2}",
            d.name,
            d.energy.total_for(InterfaceKind::WiFi),
            d.energy.total_for(InterfaceKind::Bluetooth),
            d.energy.total_mj(),
            saved
        );
    }
    let saved = savings_fraction(total, baseline).map(|s| 100.0 * s).unwrap_or(0.0);
    let _ = writeln!(out, "{:<16} {:>12} {:>12} {:>12.2} {:>9.2}", "all", "", "", total, saved);
    out.push('\n');

    if r.violations.is_empty() {
        out.push_str("violations none\n");
    } else {
        let _ = writeln!(out, "violations {}", r.violations.len());
        for v in &r.violations {
            let _ = writeln!(out, "  {v}");
        }
    }
    out
}

/// Writes `traffic.csv`, `handovers.csv`, `energy_<device>.csv` and
/// `summary.txt` into `dir`, creating it if needed.
pub fn write_report(r: &RunReport, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("traffic.csv"), traffic_csv(r))?;
    fs::write(dir.join("handovers.csv"), handovers_csv(r))?;
    for d in &r.devices {
        fs::write(dir.join(format!("energy_{}.csv", d.name)), d.energy.to_csv())?;
    }
    fs::write(dir.join("summary.txt"), summary(r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_is_wifi_active_plus_bt_off() {
        let p = EnergyParams::default();
        let b = wifi_only_baseline_mj(&p, SimTime::from_secs(2));
        assert!((b - 2.0 * (660.09 + 38.20)).abs() < 1e-9);
    }
}
