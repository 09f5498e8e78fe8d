//! Interface energy accounting: per-state power constants, integration of
//! state intervals, and the handover-cycle savings arithmetic.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{IllegalTransition, InterfaceKind, InterfaceState, SimTime};

/// Measured per-interface figures. Wake-up is an energy (mJ) spent over
/// `wakeup_duration_s`; the other states are powers (mW).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadioEnergy {
    pub wakeup_energy_mj: f64,
    pub sleep_mw: f64,
    pub active_mw: f64,
    pub off_mw: f64,
    pub wakeup_duration_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyParams {
    pub wifi: RadioEnergy,
    pub bluetooth: RadioEnergy,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            wifi: RadioEnergy {
                wakeup_energy_mj: 536.77,
                sleep_mw: 495.05,
                active_mw: 660.09,
                off_mw: 213.75,
                wakeup_duration_s: 1.4,
            },
            bluetooth: RadioEnergy {
                wakeup_energy_mj: 417.98,
                sleep_mw: 79.24,
                active_mw: 104.21,
                off_mw: 38.20,
                wakeup_duration_s: 3.03,
            },
        }
    }
}

impl EnergyParams {
    pub fn radio(&self, kind: InterfaceKind) -> &RadioEnergy {
        match kind {
            InterfaceKind::WiFi => &self.wifi,
            InterfaceKind::Bluetooth => &self.bluetooth,
        }
    }

    pub fn wakeup_duration(&self, kind: InterfaceKind) -> SimTime {
        SimTime::from_secs_f64(self.radio(kind).wakeup_duration_s)
    }

    pub fn power_mw(&self, kind: InterfaceKind, state: InterfaceState) -> f64 {
        let r = self.radio(kind);
        match state {
            InterfaceState::Off => r.off_mw,
            InterfaceState::WakingUp => r.wakeup_energy_mj / r.wakeup_duration_s,
            InterfaceState::Sleep => r.sleep_mw,
            InterfaceState::Active => r.active_mw,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.wifi, self.bluetooth].iter().all(|r| {
            [r.wakeup_energy_mj, r.sleep_mw, r.active_mw, r.off_mw, r.wakeup_duration_s]
                .iter()
                .all(|v| v.is_finite() && *v > 0.0)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateInterval {
    pub kind: InterfaceKind,
    pub state: InterfaceState,
    pub from: SimTime,
    pub to: SimTime,
}

impl StateInterval {
    pub fn duration_s(&self) -> f64 {
        (self.to - self.from).as_secs_f64()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnergyError {
    #[error("{kind} interval [{from}, {to}) ends before it starts")]
    Reversed { kind: InterfaceKind, from: SimTime, to: SimTime },
    #[error("{kind} intervals overlap at {at}")]
    Overlap { kind: InterfaceKind, at: SimTime },
    #[error("no initial state for the {0} interface")]
    MissingInitial(InterfaceKind),
    #[error("{kind} at {at}: {source}")]
    MissingTransition {
        kind: InterfaceKind,
        at: SimTime,
        #[source]
        source: IllegalTransition,
    },
    #[error("transitions out of time order at {0}")]
    Unordered(SimTime),
    #[error("baseline energy must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("malformed trace line {line}: {reason}")]
    BadTraceLine { line: usize, reason: String },
}

/// Energy of a set of intervals covering one or both interfaces.
pub fn interval_energy_mj(params: &EnergyParams, intervals: &[StateInterval]) -> Result<f64, EnergyError> {
    let mut by_kind: BTreeMap<InterfaceKind, Vec<&StateInterval>> = BTreeMap::new();
    for iv in intervals {
        if iv.to < iv.from {
            return Err(EnergyError::Reversed { kind: iv.kind, from: iv.from, to: iv.to });
        }
        by_kind.entry(iv.kind).or_default().push(iv);
    }
    for (kind, ivs) in by_kind.iter_mut() {
        ivs.sort_by_key(|iv| (iv.from, iv.to));
        for w in ivs.windows(2) {
            if w[1].from < w[0].to {
                return Err(EnergyError::Overlap { kind: *kind, at: w[1].from });
            }
        }
    }
    Ok(intervals
        .iter()
        .map(|iv| params.power_mw(iv.kind, iv.state) * iv.duration_s())
        .sum())
}

/// Interface state change as recorded by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateTransition {
    pub at: SimTime,
    pub kind: InterfaceKind,
    pub state: InterfaceState,
}

/// Tiling of the timeline `[0, end)` by state intervals, per interface.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyLedger {
    pub params: EnergyParams,
    pub end: SimTime,
    pub intervals: Vec<StateInterval>,
}

impl EnergyLedger {
    /// Rebuilds intervals from a time-ordered transition list. Each interface
    /// must have a transition at time zero giving its initial state, and
    /// every later change must be a legal lifecycle step.
    pub fn from_transitions(
        params: EnergyParams,
        transitions: &[StateTransition],
        end: SimTime,
    ) -> Result<Self, EnergyError> {
        let mut intervals = Vec::new();
        for kind in InterfaceKind::ALL {
            let mine: Vec<&StateTransition> = transitions.iter().filter(|t| t.kind == kind).collect();
            let first = mine.first().filter(|t| t.at == SimTime::ZERO).ok_or(EnergyError::MissingInitial(kind))?;
            let (mut state, mut since) = (first.state, SimTime::ZERO);
            for t in &mine[1..] {
                if t.at < since {
                    return Err(EnergyError::Unordered(t.at));
                }
                state
                    .transition(t.state)
                    .map_err(|source| EnergyError::MissingTransition { kind, at: t.at, source })?;
                let to = t.at.min(end);
                if to > since {
                    intervals.push(StateInterval { kind, state, from: since, to });
                }
                state = t.state;
                since = t.at.max(since);
            }
            if end > since {
                intervals.push(StateInterval { kind, state, from: since, to: end });
            }
        }
        intervals.sort_by_key(|iv| (iv.from, iv.kind));
        Ok(EnergyLedger { params, end, intervals })
    }

    pub fn total_mj(&self) -> f64 {
        self.intervals.iter().map(|iv| self.energy_of(iv)).sum()
    }

    pub fn total_for(&self, kind: InterfaceKind) -> f64 {
        self.intervals.iter().filter(|iv| iv.kind == kind).map(|iv| self.energy_of(iv)).sum()
    }

    pub fn energy_of(&self, iv: &StateInterval) -> f64 {
        self.params.power_mw(iv.kind, iv.state) * iv.duration_s()
    }

    /// Appends `other`'s timeline after this one.
    pub fn concat(&self, other: &EnergyLedger) -> EnergyLedger {
        let shift = self.end;
        let mut intervals = self.intervals.clone();
        intervals.extend(other.intervals.iter().map(|iv| StateInterval {
            from: iv.from + shift,
            to: iv.to + shift,
            ..*iv
        }));
        EnergyLedger { params: self.params, end: self.end + other.end, intervals }
    }

    /// `interface,state,from_us,to_us,power_mw,energy_mj` rows, then totals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("interface,state,from_us,to_us,power_mw,energy_mj\n");
        let mut rows = self.intervals.clone();
        rows.sort_by_key(|iv| (iv.kind, iv.from));
        for iv in &rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.2},{:.2}",
                iv.kind,
                iv.state,
                iv.from.as_micros(),
                iv.to.as_micros(),
                self.params.power_mw(iv.kind, iv.state),
                self.energy_of(iv)
            );
        }
        out.push('\n');
        for kind in InterfaceKind::ALL {
            let _ = writeln!(out, "total_{}_mj,{:.2}", kind, self.total_for(kind));
        }
        let _ = writeln!(out, "total_mj,{:.2}", self.total_mj());
        out
    }
}

/// Pulls one device's interface transitions out of an event trace
/// (`time_us  iface-state  device  kind=<k> state=<s>` lines).
pub fn transitions_from_trace(trace: &str, device: &str) -> Result<Vec<StateTransition>, EnergyError> {
    let mut out = Vec::new();
    for (n, line) in trace.lines().enumerate() {
        let mut cols = line.split('\t');
        let (Some(t), Some(kind), Some(dev), Some(detail)) = (cols.next(), cols.next(), cols.next(), cols.next()) else {
            continue;
        };
        if kind != "iface-state" || dev != device {
            continue;
        }
        let bad = |reason: &str| EnergyError::BadTraceLine { line: n + 1, reason: reason.to_string() };
        let at: u64 = t.parse().map_err(|_| bad("time"))?;
        let mut k = None;
        let mut s = None;
        for kv in detail.split_whitespace() {
            match kv.split_once('=') {
                Some(("kind", v)) => k = v.parse::<InterfaceKind>().ok(),
                Some(("state", v)) => s = v.parse::<InterfaceState>().ok(),
                _ => {}
            }
        }
        out.push(StateTransition {
            at: SimTime(at),
            kind: k.ok_or_else(|| bad("kind"))?,
            state: s.ok_or_else(|| bad("state"))?,
        });
    }
    Ok(out)
}

pub fn ledger_from_trace(params: EnergyParams, trace: &str, device: &str, end: SimTime) -> Result<EnergyLedger, EnergyError> {
    EnergyLedger::from_transitions(params, &transitions_from_trace(trace, device)?, end)
}

/// `1 - proposed / baseline`.
pub fn savings_fraction(proposed_mj: f64, baseline_mj: f64) -> Result<f64, EnergyError> {
    if baseline_mj.is_nan() || baseline_mj <= 0.0 {
        return Err(EnergyError::NonPositiveBaseline(baseline_mj));
    }
    Ok(1.0 - proposed_mj / baseline_mj)
}

/// Published totals of one worst-case handover cycle (no Bluetooth sleep),
/// used as the zero-sleep anchors of the savings curve.
pub const CYCLE_PROPOSED_MJ: f64 = 3471.66;
pub const CYCLE_BASELINE_MJ: f64 = 4593.54;

/// Savings when Bluetooth sleeps `t_blue_sleep_s` seconds inside the cycle:
/// the proposed path pays Bluetooth-sleep + Wi-Fi-off per second, the
/// Wi-Fi-only baseline pays Wi-Fi-sleep + Bluetooth-off.
pub fn savings_curve(params: &EnergyParams, t_blue_sleep_s: f64) -> f64 {
    let (prop_rate, base_rate) = savings_rates(params);
    1.0 - (CYCLE_PROPOSED_MJ + prop_rate * t_blue_sleep_s) / (CYCLE_BASELINE_MJ + base_rate * t_blue_sleep_s)
}

/// Limit of [`savings_curve`] as the sleep time grows without bound.
pub fn savings_limit(params: &EnergyParams) -> f64 {
    let (prop_rate, base_rate) = savings_rates(params);
    1.0 - prop_rate / base_rate
}

fn savings_rates(params: &EnergyParams) -> (f64, f64) {
    (
        params.bluetooth.sleep_mw + params.wifi.off_mw,
        params.wifi.sleep_mw + params.bluetooth.off_mw,
    )
}

/// The worst-case Wi-Fi -> Bluetooth -> Wi-Fi cycle, segment by segment.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleBreakdown {
    /// One second of Wi-Fi sleep + Bluetooth off before the handover starts.
    pub idle_before_mj: f64,
    /// Bluetooth wakes while Wi-Fi sleeps.
    pub bt_wakeup_mj: f64,
    /// Same span on the Wi-Fi-only path (Wi-Fi sleep + Bluetooth off).
    pub baseline_wakeup_span_mj: f64,
    /// Three seconds of Bluetooth traffic with Wi-Fi off.
    pub bt_active_mj: f64,
    /// Same span on the Wi-Fi-only path (Wi-Fi active + Bluetooth off).
    pub baseline_active_span_mj: f64,
    /// Wi-Fi wakes while Bluetooth is off.
    pub wifi_wakeup_mj: f64,
    /// Same span on the Wi-Fi-only path (Wi-Fi active + Bluetooth off).
    pub baseline_return_span_mj: f64,
}

impl CycleBreakdown {
    pub fn compute(params: &EnergyParams, active_window_s: f64) -> Result<Self, EnergyError> {
        use InterfaceKind::{Bluetooth as B, WiFi as W};
        use InterfaceState::*;
        let bt_wake = params.wakeup_duration(B);
        let wifi_wake = params.wakeup_duration(W);
        let active = SimTime::from_secs_f64(active_window_s);
        let span = |pairs: &[(InterfaceKind, InterfaceState)], len: SimTime| -> Result<f64, EnergyError> {
            let ivs: Vec<StateInterval> = pairs
                .iter()
                .map(|&(kind, state)| StateInterval { kind, state, from: SimTime::ZERO, to: len })
                .collect();
            interval_energy_mj(params, &ivs)
        };
        Ok(CycleBreakdown {
            idle_before_mj: span(&[(W, Sleep), (B, Off)], SimTime::from_secs(1))?,
            bt_wakeup_mj: span(&[(B, WakingUp), (W, Sleep)], bt_wake)?,
            baseline_wakeup_span_mj: span(&[(W, Sleep), (B, Off)], bt_wake)?,
            bt_active_mj: span(&[(B, Active), (W, Off)], active)?,
            baseline_active_span_mj: span(&[(W, Active), (B, Off)], active)?,
            wifi_wakeup_mj: span(&[(W, WakingUp), (B, Off)], wifi_wake)?,
            baseline_return_span_mj: span(&[(W, Active), (B, Off)], wifi_wake)?,
        })
    }

    /// Proposed path summed from its printed segments (no idle second).
    pub fn proposed_segments_mj(&self) -> f64 {
        self.bt_wakeup_mj + self.bt_active_mj + self.wifi_wakeup_mj
    }

    pub fn baseline_segments_mj(&self) -> f64 {
        self.baseline_wakeup_span_mj + self.baseline_active_span_mj + self.baseline_return_span_mj
    }
}

/// Transition script of the cycle on the proposed path: idle second, BT
/// wake-up, three seconds of BT traffic, then Wi-Fi wake-up.
pub fn cycle_transitions(params: &EnergyParams, active_window_s: f64) -> (Vec<StateTransition>, SimTime) {
    use InterfaceKind::{Bluetooth as B, WiFi as W};
    use InterfaceState::*;
    let t0 = SimTime::from_secs(1);
    let t1 = t0 + params.wakeup_duration(B);
    let t2 = t1 + SimTime::from_secs_f64(active_window_s);
    let t3 = t2 + params.wakeup_duration(W);
    let tr = |at, kind, state| StateTransition { at, kind, state };
    let script = vec![
        tr(SimTime::ZERO, W, Sleep),
        tr(SimTime::ZERO, B, Off),
        tr(t0, B, WakingUp),
        tr(t1, B, Sleep),
        tr(t1, B, Active),
        tr(t1, W, Off),
        tr(t2, B, Off),
        tr(t2, W, WakingUp),
        tr(t3, W, Sleep),
    ];
    (script, t3)
}

/// Same span on the Wi-Fi-only path.
pub fn baseline_cycle_transitions(params: &EnergyParams, active_window_s: f64) -> (Vec<StateTransition>, SimTime) {
    use InterfaceKind::{Bluetooth as B, WiFi as W};
    use InterfaceState::*;
    let t1 = SimTime::from_secs(1) + params.wakeup_duration(B);
    let t3 = t1 + SimTime::from_secs_f64(active_window_s) + params.wakeup_duration(W);
    let tr = |at, kind, state| StateTransition { at, kind, state };
    (vec![tr(SimTime::ZERO, W, Sleep), tr(SimTime::ZERO, B, Off), tr(t1, W, Active)], t3)
}
