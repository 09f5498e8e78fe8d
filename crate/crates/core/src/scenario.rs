//! Scenario files: a TOML document with a `[scenario]` header, optional
//! `[trigger]`, `[distributions]` and `[energy.*]` tables, and arrays of
//! `[[device]]`, `[[piconet]]`, `[[bss]]`, `[[flow]]` and `[[handover]]`.
//! See the README for the full key list.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::energy::{EnergyParams, RadioEnergy};
use crate::handover::{ActivityDist, ActivityDistributions, Direction, TriggerConfig};
use crate::link::{JitterDist, LinkParams};
use crate::mobility::{Point, Position};
use crate::model::{InterfaceKind, InterfaceState, SimTime, MIN_FRAME_BYTES};
use crate::traffic::SpeechModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub duration: SimTime,
    pub sync_timeout: SimTime,
    pub initial_rtt: SimTime,
    /// How long the old interface stays up after a handover completes.
    pub old_interface_linger: SimTime,
    /// Extra delay for rules pushed through the switch management path.
    pub management_latency: SimTime,
    pub trigger_enabled: bool,
    pub trigger: TriggerConfig,
    pub distributions: ActivityDistributions,
    pub energy: EnergyParams,
    pub devices: Vec<DeviceSpec>,
    pub networks: Vec<NetworkSpec>,
    pub flows: Vec<FlowSpec>,
    pub handovers: Vec<HandoverScript>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSpec {
    pub name: String,
    pub position: Position,
    /// Interface carrying sessions at start.
    pub active: InterfaceKind,
    pub wifi: InterfaceState,
    pub bluetooth: InterfaceState,
    pub relay: bool,
    pub controller_die_at: Option<SimTime>,
    pub controller_revive_at: Option<SimTime>,
}

impl DeviceSpec {
    /// Active interface up, the other off; relays keep both up.
    pub fn new(name: &str, x: f64, y: f64, active: InterfaceKind) -> Self {
        let state = |k: InterfaceKind| if k == active { InterfaceState::Active } else { InterfaceState::Off };
        DeviceSpec {
            name: name.to_string(),
            position: Position::fixed(x, y),
            active,
            wifi: state(InterfaceKind::WiFi),
            bluetooth: state(InterfaceKind::Bluetooth),
            relay: false,
            controller_die_at: None,
            controller_revive_at: None,
        }
    }

    pub fn relay(mut self) -> Self {
        self.relay = true;
        self.wifi = InterfaceState::Active;
        self.bluetooth = InterfaceState::Active;
        self
    }

    pub fn state(&self, kind: InterfaceKind) -> InterfaceState {
        match kind {
            InterfaceKind::WiFi => self.wifi,
            InterfaceKind::Bluetooth => self.bluetooth,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Anchor {
    /// Piconet master device.
    Master(String),
    /// Access point position.
    Ap(Point),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub kind: InterfaceKind,
    pub anchor: Anchor,
    pub members: Vec<String>,
    pub params: LinkParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlowSource {
    Cbr { rate_kbps: f64, size_bytes: u32 },
    Speech(SpeechModelConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSpec {
    pub name: String,
    pub src: String,
    pub dst: String,
    pub source: FlowSource,
    pub start: SimTime,
    pub stop: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandoverScript {
    pub at: SimTime,
    pub device: String,
    pub peer: String,
    pub direction: Direction,
}

impl Scenario {
    /// Empty scenario with default protocol parameters.
    pub fn new(name: &str, seed: u64, duration: SimTime) -> Self {
        Scenario {
            name: name.to_string(),
            seed,
            duration,
            sync_timeout: SimTime::from_secs(5),
            initial_rtt: SimTime::from_millis(50),
            old_interface_linger: SimTime::from_millis(500),
            management_latency: SimTime::ZERO,
            trigger_enabled: true,
            trigger: TriggerConfig::default(),
            distributions: ActivityDistributions::default(),
            energy: EnergyParams::default(),
            devices: Vec::new(),
            networks: Vec::new(),
            flows: Vec::new(),
            handovers: Vec::new(),
        }
    }

    pub fn device_index(&self, name: &str) -> Option<usize> {
        self.devices.iter().position(|d| d.name == name)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&RawScenario::from(self)).expect("scenario serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DiagCode {
    Syntax,
    UnknownKey,
    UnknownDevice,
    NonPositiveRate,
    InvalidValue,
    DeviceInTwoNetworks,
    DuplicateName,
    MissingKey,
}

impl DiagCode {
    pub fn code(self) -> &'static str {
        match self {
            DiagCode::Syntax => "E001",
            DiagCode::UnknownKey => "E002",
            DiagCode::UnknownDevice => "E003",
            DiagCode::NonPositiveRate => "E004",
            DiagCode::InvalidValue => "E005",
            DiagCode::DeviceInTwoNetworks => "E006",
            DiagCode::DuplicateName => "E007",
            DiagCode::MissingKey => "E008",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub code: DiagCode,
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}: {}", self.line, self.code.code(), self.message)
    }
}

impl std::error::Error for Diagnostic {}

// ---- raw document ----

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    scenario: RawHeader,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trigger: Option<RawTrigger>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distributions: Option<RawDistributions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    energy: Option<RawEnergy>,
    #[serde(default, rename = "device")]
    devices: Vec<Spanned<RawDevice>>,
    #[serde(default, rename = "piconet", skip_serializing_if = "Vec::is_empty")]
    piconets: Vec<Spanned<RawNetwork>>,
    #[serde(default, rename = "bss", skip_serializing_if = "Vec::is_empty")]
    bsss: Vec<Spanned<RawNetwork>>,
    #[serde(default, rename = "flow", skip_serializing_if = "Vec::is_empty")]
    flows: Vec<Spanned<RawFlow>>,
    #[serde(default, rename = "handover", skip_serializing_if = "Vec::is_empty")]
    handovers: Vec<Spanned<RawHandover>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeader {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    seed: u64,
    duration: Spanned<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sync_timeout: Option<Spanned<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial_rtt: Option<Spanned<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    old_interface_linger: Option<Spanned<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    management_latency: Option<Spanned<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrigger {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    enabled: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    no_traffic_threshold_kbps: Option<Spanned<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    threshold_wb: Option<Spanned<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    evaluation_period: Option<Spanned<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDistributions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b2w_config: Option<Spanned<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b2w_rule_install: Option<Spanned<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w2b_config: Option<Spanned<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w2b_rule_install: Option<Spanned<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnergy {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    wifi: Option<Spanned<RawRadio>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bluetooth: Option<Spanned<RawRadio>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRadio {
    wakeup_energy_mj: f64,
    sleep_mw: f64,
    active_mw: f64,
    off_mw: f64,
    wakeup_duration_s: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWaypoint {
    at: String,
    x: f64,
    y: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDevice {
    name: Spanned<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    position: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    waypoints: Vec<RawWaypoint>,
    active: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    wifi: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bluetooth: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    relay: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    controller_die_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    controller_revive_at: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    name: Spanned<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    master: Option<Spanned<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ap: Option<[f64; 2]>,
    members: Vec<Spanned<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rate_kbps: Option<Spanned<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_delay: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    jitter: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    range_m: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFlow {
    name: Spanned<String>,
    src: Spanned<String>,
    dst: Spanned<String>,
    #[serde(rename = "type")]
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rate_kbps: Option<Spanned<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<u32>,
    start: String,
    stop: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean_talkspurt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean_pause: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean_mutual_silence: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHandover {
    at: String,
    device: Spanned<String>,
    peer: Spanned<String>,
    direction: String,
}

fn sp<T>(v: T) -> Spanned<T> {
    Spanned::new(0..0, v)
}

fn secs_string(t: SimTime) -> String {
    t.to_string()
}

fn jitter_string(j: &JitterDist) -> String {
    match j {
        JitterDist::Zero => "none".into(),
        JitterDist::Uniform { max } => format!("uniform({max})"),
    }
}

fn parse_jitter(s: &str) -> Result<JitterDist, String> {
    let s = s.trim();
    if s == "none" {
        return Ok(JitterDist::Zero);
    }
    let inner = s
        .strip_prefix("uniform(")
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| format!("unrecognised jitter `{s}` (expected `none` or `uniform(<max>)`)"))?;
    inner.parse::<SimTime>().map(|max| JitterDist::Uniform { max }).map_err(|e| e.to_string())
}

fn state_string(s: InterfaceState) -> String {
    s.as_str().to_string()
}

impl From<&Scenario> for RawScenario {
    fn from(s: &Scenario) -> Self {
        let d = &s.distributions;
        let radio = |r: &RadioEnergy| {
            sp(RawRadio {
                wakeup_energy_mj: r.wakeup_energy_mj,
                sleep_mw: r.sleep_mw,
                active_mw: r.active_mw,
                off_mw: r.off_mw,
                wakeup_duration_s: r.wakeup_duration_s,
            })
        };
        let network = |n: &NetworkSpec| {
            let (master, ap) = match &n.anchor {
                Anchor::Master(m) => (Some(sp(m.clone())), None),
                Anchor::Ap(p) => (None, Some([p.x, p.y])),
            };
            sp(RawNetwork {
                name: sp(n.name.clone()),
                master,
                ap,
                members: n.members.iter().cloned().map(sp).collect(),
                rate_kbps: Some(sp(n.params.rate_kbps)),
                base_delay: Some(secs_string(n.params.base_delay)),
                jitter: Some(jitter_string(&n.params.jitter)),
                loss: Some(n.params.loss_prob),
                range_m: Some(n.params.range_m),
            })
        };
        RawScenario {
            scenario: RawHeader {
                name: Some(s.name.clone()),
                seed: s.seed,
                duration: sp(secs_string(s.duration)),
                sync_timeout: Some(sp(secs_string(s.sync_timeout))),
                initial_rtt: Some(sp(secs_string(s.initial_rtt))),
                old_interface_linger: Some(sp(secs_string(s.old_interface_linger))),
                management_latency: Some(sp(secs_string(s.management_latency))),
            },
            trigger: Some(RawTrigger {
                enabled: Some(s.trigger_enabled),
                no_traffic_threshold_kbps: Some(sp(s.trigger.no_traffic_threshold_kbps)),
                threshold_wb: Some(sp(secs_string(SimTime::from_secs_f64(s.trigger.threshold_wb_s)))),
                evaluation_period: Some(sp(secs_string(SimTime::from_secs_f64(s.trigger.evaluation_period_s)))),
            }),
            distributions: Some(RawDistributions {
                b2w_config: Some(sp(d.b2w_config.to_string())),
                b2w_rule_install: Some(sp(d.b2w_rule_install.to_string())),
                w2b_config: Some(sp(d.w2b_config.to_string())),
                w2b_rule_install: Some(sp(d.w2b_rule_install.to_string())),
            }),
            energy: Some(RawEnergy { wifi: Some(radio(&s.energy.wifi)), bluetooth: Some(radio(&s.energy.bluetooth)) }),
            devices: s
                .devices
                .iter()
                .map(|dev| {
                    sp(RawDevice {
                        name: sp(dev.name.clone()),
                        position: Some([dev.position.start.x, dev.position.start.y]),
                        waypoints: dev
                            .position
                            .waypoints
                            .iter()
                            .map(|(t, p)| RawWaypoint { at: secs_string(*t), x: p.x, y: p.y })
                            .collect(),
                        active: dev.active.as_str().to_string(),
                        wifi: Some(state_string(dev.wifi)),
                        bluetooth: Some(state_string(dev.bluetooth)),
                        relay: dev.relay,
                        controller_die_at: dev.controller_die_at.map(secs_string),
                        controller_revive_at: dev.controller_revive_at.map(secs_string),
                    })
                })
                .collect(),
            piconets: s.networks.iter().filter(|n| n.kind == InterfaceKind::Bluetooth).map(network).collect(),
            bsss: s.networks.iter().filter(|n| n.kind == InterfaceKind::WiFi).map(network).collect(),
            flows: s
                .flows
                .iter()
                .map(|f| {
                    let (kind, rate, size, talk, pause, silence) = match &f.source {
                        FlowSource::Cbr { rate_kbps, size_bytes } => {
                            ("cbr", *rate_kbps, *size_bytes, None, None, None)
                        }
                        FlowSource::Speech(c) => (
                            "speech",
                            c.on_rate_kbps,
                            c.packet_size_bytes,
                            Some(secs_string(SimTime::from_secs_f64(c.mean_talkspurt_s))),
                            Some(secs_string(SimTime::from_secs_f64(c.mean_pause_s))),
                            Some(secs_string(SimTime::from_secs_f64(c.mean_mutual_silence_s))),
                        ),
                    };
                    sp(RawFlow {
                        name: sp(f.name.clone()),
                        src: sp(f.src.clone()),
                        dst: sp(f.dst.clone()),
                        kind: kind.into(),
                        rate_kbps: Some(sp(rate)),
                        size: Some(size),
                        start: secs_string(f.start),
                        stop: secs_string(f.stop),
                        mean_talkspurt: talk,
                        mean_pause: pause,
                        mean_mutual_silence: silence,
                    })
                })
                .collect(),
            handovers: s
                .handovers
                .iter()
                .map(|h| {
                    sp(RawHandover {
                        at: secs_string(h.at),
                        device: sp(h.device.clone()),
                        peer: sp(h.peer.clone()),
                        direction: h.direction.to_string(),
                    })
                })
                .collect(),
        }
    }
}

// ---- parsing ----

struct Ctx<'a> {
    text: &'a str,
}

impl Ctx<'_> {
    fn line(&self, span: &Range<usize>) -> usize {
        let end = span.start.min(self.text.len());
        self.text[..end].matches('\n').count() + 1
    }

    fn diag(&self, code: DiagCode, span: &Range<usize>, message: impl Into<String>) -> Diagnostic {
        Diagnostic { code, line: self.line(span), message: message.into() }
    }

    fn time(&self, v: &str, span: &Range<usize>, what: &str) -> Result<SimTime, Diagnostic> {
        v.parse::<SimTime>()
            .map_err(|e| self.diag(DiagCode::InvalidValue, span, format!("{what}: {e}")))
    }

    fn spanned_time(&self, v: &Spanned<String>, what: &str) -> Result<SimTime, Diagnostic> {
        self.time(v.get_ref(), &v.span(), what)
    }

    fn opt_time(&self, v: &Option<Spanned<String>>, what: &str, default: SimTime) -> Result<SimTime, Diagnostic> {
        v.as_ref().map_or(Ok(default), |v| self.spanned_time(v, what))
    }

    fn positive_rate(&self, v: &Spanned<f64>, what: &str) -> Result<f64, Diagnostic> {
        let r = *v.get_ref();
        if !(r.is_finite() && r > 0.0) {
            return Err(self.diag(DiagCode::NonPositiveRate, &v.span(), format!("{what} must be positive, got {r}")));
        }
        Ok(r)
    }

    fn device_ref(&self, names: &BTreeSet<&str>, v: &Spanned<String>, owner: &str) -> Result<String, Diagnostic> {
        if names.contains(v.get_ref().as_str()) {
            Ok(v.get_ref().clone())
        } else {
            Err(self.diag(
                DiagCode::UnknownDevice,
                &v.span(),
                format!("{owner} references unknown device `{}`", v.get_ref()),
            ))
        }
    }
}

fn toml_diag(text: &str, e: &toml::de::Error) -> Diagnostic {
    let ctx = Ctx { text };
    let span = e.span().unwrap_or(0..0);
    let msg = e.message().trim().to_string();
    let code = if msg.contains("unknown field") {
        DiagCode::UnknownKey
    } else if msg.contains("missing field") {
        DiagCode::MissingKey
    } else {
        DiagCode::Syntax
    };
    ctx.diag(code, &span, msg)
}

pub fn parse_scenario(text: &str) -> Result<Scenario, Diagnostic> {
    let raw: RawScenario = toml::from_str(text).map_err(|e| toml_diag(text, &e))?;
    let ctx = Ctx { text };
    let h = &raw.scenario;
    let mut s = Scenario::new(h.name.as_deref().unwrap_or("scenario"), h.seed, ctx.spanned_time(&h.duration, "duration")?);
    if s.duration == SimTime::ZERO {
        return Err(ctx.diag(DiagCode::InvalidValue, &h.duration.span(), "duration must be positive"));
    }
    s.sync_timeout = ctx.opt_time(&h.sync_timeout, "sync_timeout", s.sync_timeout)?;
    s.initial_rtt = ctx.opt_time(&h.initial_rtt, "initial_rtt", s.initial_rtt)?;
    s.old_interface_linger = ctx.opt_time(&h.old_interface_linger, "old_interface_linger", s.old_interface_linger)?;
    s.management_latency = ctx.opt_time(&h.management_latency, "management_latency", s.management_latency)?;

    if let Some(t) = &raw.trigger {
        s.trigger_enabled = t.enabled.unwrap_or(true);
        if let Some(v) = &t.no_traffic_threshold_kbps {
            s.trigger.no_traffic_threshold_kbps = ctx.positive_rate(v, "no_traffic_threshold_kbps")?;
        }
        for (field, slot, name) in [
            (&t.threshold_wb, &mut s.trigger.threshold_wb_s, "threshold_wb"),
            (&t.evaluation_period, &mut s.trigger.evaluation_period_s, "evaluation_period"),
        ] {
            if let Some(v) = field {
                let d = ctx.spanned_time(v, name)?;
                if d == SimTime::ZERO {
                    return Err(ctx.diag(DiagCode::InvalidValue, &v.span(), format!("{name} must be positive")));
                }
                *slot = d.as_secs_f64();
            }
        }
    }

    if let Some(d) = &raw.distributions {
        for (field, slot, name, config_ok) in [
            (&d.b2w_config, &mut s.distributions.b2w_config, "b2w_config", true),
            (&d.b2w_rule_install, &mut s.distributions.b2w_rule_install, "b2w_rule_install", false),
            (&d.w2b_config, &mut s.distributions.w2b_config, "w2b_config", true),
            (&d.w2b_rule_install, &mut s.distributions.w2b_rule_install, "w2b_rule_install", false),
        ] {
            if let Some(v) = field {
                let dist: ActivityDist = v
                    .get_ref()
                    .parse()
                    .map_err(|e: String| ctx.diag(DiagCode::InvalidValue, &v.span(), format!("{name}: {e}")))?;
                let ok = if config_ok { dist.is_valid_for_config() } else { dist.is_valid() };
                if !ok {
                    return Err(ctx.diag(DiagCode::InvalidValue, &v.span(), format!("{name}: `{dist}` not allowed here")));
                }
                *slot = dist;
            }
        }
    }

    if let Some(e) = &raw.energy {
        for (field, slot) in [(&e.wifi, &mut s.energy.wifi), (&e.bluetooth, &mut s.energy.bluetooth)] {
            if let Some(r) = field {
                let v = r.get_ref();
                *slot = RadioEnergy {
                    wakeup_energy_mj: v.wakeup_energy_mj,
                    sleep_mw: v.sleep_mw,
                    active_mw: v.active_mw,
                    off_mw: v.off_mw,
                    wakeup_duration_s: v.wakeup_duration_s,
                };
            }
        }
        if !s.energy.is_valid() {
            let span = e.wifi.as_ref().or(e.bluetooth.as_ref()).map(|r| r.span()).unwrap_or(0..0);
            return Err(ctx.diag(DiagCode::InvalidValue, &span, "energy constants must all be positive"));
        }
    }

    // devices
    let mut names = BTreeSet::new();
    for d in &raw.devices {
        let span = d.span();
        let d = d.get_ref();
        if !names.insert(d.name.get_ref().as_str()) {
            return Err(ctx.diag(DiagCode::DuplicateName, &d.name.span(), format!("device `{}` defined twice", d.name.get_ref())));
        }
        let bad = |m: String| ctx.diag(DiagCode::InvalidValue, &span, m);
        let active: InterfaceKind = d.active.parse().map_err(|_| bad(format!("unknown interface `{}`", d.active)))?;
        let mut spec = DeviceSpec::new(d.name.get_ref(), 0.0, 0.0, active);
        if d.relay {
            spec = spec.relay();
        }
        if let Some([x, y]) = d.position {
            spec.position.start = Point::new(x, y);
        }
        let mut last = SimTime::ZERO;
        for w in &d.waypoints {
            let at = ctx.time(&w.at, &span, "waypoint time")?;
            if at < last {
                return Err(bad("waypoints must be in time order".into()));
            }
            last = at;
            spec.position.waypoints.push((at, Point::new(w.x, w.y)));
        }
        for (field, kind) in [(&d.wifi, InterfaceKind::WiFi), (&d.bluetooth, InterfaceKind::Bluetooth)] {
            if let Some(v) = field {
                let st: InterfaceState = v.parse().map_err(|_| bad(format!("unknown interface state `{v}`")))?;
                if st == InterfaceState::WakingUp {
                    return Err(bad(format!("{kind} cannot start in the wake-up state")));
                }
                match kind {
                    InterfaceKind::WiFi => spec.wifi = st,
                    InterfaceKind::Bluetooth => spec.bluetooth = st,
                }
            }
        }
        if !spec.state(active).is_up() {
            return Err(bad(format!("active interface {active} must start up")));
        }
        spec.controller_die_at = d.controller_die_at.as_deref().map(|v| ctx.time(v, &span, "controller_die_at")).transpose()?;
        spec.controller_revive_at =
            d.controller_revive_at.as_deref().map(|v| ctx.time(v, &span, "controller_revive_at")).transpose()?;
        if let (Some(die), Some(rev)) = (spec.controller_die_at, spec.controller_revive_at) {
            if rev <= die {
                return Err(bad("controller_revive_at must be after controller_die_at".into()));
            }
        }
        s.devices.push(spec);
    }

    // networks
    let mut seen_net_names = BTreeSet::new();
    let mut membership: BTreeMap<(InterfaceKind, String), String> = BTreeMap::new();
    for (kind, list) in [(InterfaceKind::Bluetooth, &raw.piconets), (InterfaceKind::WiFi, &raw.bsss)] {
        for n in list {
            let span = n.span();
            let n = n.get_ref();
            let name = n.name.get_ref().clone();
            if !seen_net_names.insert(name.clone()) {
                return Err(ctx.diag(DiagCode::DuplicateName, &n.name.span(), format!("network `{name}` defined twice")));
            }
            let owner = format!("network `{name}`");
            let mut members = Vec::new();
            for m in &n.members {
                let dev = ctx.device_ref(&names, m, &owner)?;
                if let Some(prev) = membership.insert((kind, dev.clone()), name.clone()) {
                    return Err(ctx.diag(
                        DiagCode::DeviceInTwoNetworks,
                        &m.span(),
                        format!("device `{dev}` is already in {kind} network `{prev}`"),
                    ));
                }
                members.push(dev);
            }
            let anchor = match kind {
                InterfaceKind::Bluetooth => {
                    let m = n.master.as_ref().ok_or_else(|| {
                        ctx.diag(DiagCode::MissingKey, &span, format!("piconet `{name}` needs a master"))
                    })?;
                    let master = ctx.device_ref(&names, m, &owner)?;
                    if !members.contains(&master) {
                        return Err(ctx.diag(DiagCode::InvalidValue, &m.span(), format!("master `{master}` must be a member")));
                    }
                    if n.ap.is_some() {
                        return Err(ctx.diag(DiagCode::UnknownKey, &span, "`ap` is only valid for a bss"));
                    }
                    Anchor::Master(master)
                }
                InterfaceKind::WiFi => {
                    let [x, y] = n
                        .ap
                        .ok_or_else(|| ctx.diag(DiagCode::MissingKey, &span, format!("bss `{name}` needs an ap position")))?;
                    if n.master.is_some() {
                        return Err(ctx.diag(DiagCode::UnknownKey, &span, "`master` is only valid for a piconet"));
                    }
                    Anchor::Ap(Point::new(x, y))
                }
            };
            let mut params = LinkParams::default_for(kind);
            if let Some(r) = &n.rate_kbps {
                params.rate_kbps = ctx.positive_rate(r, "rate_kbps")?;
            }
            if let Some(v) = &n.base_delay {
                params.base_delay = ctx.time(v, &span, "base_delay")?;
            }
            if let Some(v) = &n.jitter {
                params.jitter = parse_jitter(v).map_err(|e| ctx.diag(DiagCode::InvalidValue, &span, e))?;
            }
            if let Some(v) = n.loss {
                params.loss_prob = v;
            }
            if let Some(v) = n.range_m {
                params.range_m = v;
            }
            params.validate().map_err(|e| ctx.diag(DiagCode::InvalidValue, &span, format!("network `{name}`: {e}")))?;
            s.networks.push(NetworkSpec { name, kind, anchor, members, params });
        }
    }

    // flows
    let mut flow_names = BTreeSet::new();
    for f in &raw.flows {
        let span = f.span();
        let f = f.get_ref();
        let name = f.name.get_ref().clone();
        if !flow_names.insert(name.clone()) {
            return Err(ctx.diag(DiagCode::DuplicateName, &f.name.span(), format!("flow `{name}` defined twice")));
        }
        let owner = format!("flow `{name}`");
        let src = ctx.device_ref(&names, &f.src, &owner)?;
        let dst = ctx.device_ref(&names, &f.dst, &owner)?;
        if src == dst {
            return Err(ctx.diag(DiagCode::InvalidValue, &f.dst.span(), format!("{owner} sends to itself")));
        }
        let rate = match &f.rate_kbps {
            Some(r) => Some(ctx.positive_rate(r, "rate_kbps")?),
            None => None,
        };
        let size = f.size;
        if let Some(sz) = size {
            if sz < MIN_FRAME_BYTES {
                return Err(ctx.diag(
                    DiagCode::InvalidValue,
                    &span,
                    format!("{owner}: size {sz} below the {MIN_FRAME_BYTES}-byte frame minimum"),
                ));
            }
        }
        let source = match f.kind.as_str() {
            "cbr" => FlowSource::Cbr {
                rate_kbps: rate.ok_or_else(|| ctx.diag(DiagCode::MissingKey, &span, format!("{owner} needs rate_kbps")))?,
                size_bytes: size.ok_or_else(|| ctx.diag(DiagCode::MissingKey, &span, format!("{owner} needs size")))?,
            },
            "speech" => {
                let mut c = SpeechModelConfig::default();
                if let Some(r) = rate {
                    c.on_rate_kbps = r;
                }
                if let Some(sz) = size {
                    c.packet_size_bytes = sz;
                }
                for (field, slot, what) in [
                    (&f.mean_talkspurt, &mut c.mean_talkspurt_s, "mean_talkspurt"),
                    (&f.mean_pause, &mut c.mean_pause_s, "mean_pause"),
                    (&f.mean_mutual_silence, &mut c.mean_mutual_silence_s, "mean_mutual_silence"),
                ] {
                    if let Some(v) = field {
                        let t = ctx.time(v, &span, what)?;
                        if t == SimTime::ZERO {
                            return Err(ctx.diag(DiagCode::InvalidValue, &span, format!("{what} must be positive")));
                        }
                        *slot = t.as_secs_f64();
                    }
                }
                FlowSource::Speech(c)
            }
            other => {
                return Err(ctx.diag(DiagCode::InvalidValue, &span, format!("{owner}: unknown type `{other}` (cbr or speech)")))
            }
        };
        if !matches!(source, FlowSource::Speech(_))
            && (f.mean_talkspurt.is_some() || f.mean_pause.is_some() || f.mean_mutual_silence.is_some())
        {
            return Err(ctx.diag(DiagCode::UnknownKey, &span, format!("{owner}: speech keys on a cbr flow")));
        }
        let start = ctx.time(&f.start, &span, "start")?;
        let stop = ctx.time(&f.stop, &span, "stop")?;
        if stop <= start {
            return Err(ctx.diag(DiagCode::InvalidValue, &span, format!("{owner}: stop must be after start")));
        }
        s.flows.push(FlowSpec { name, src, dst, source, start, stop });
    }

    for h in &raw.handovers {
        let span = h.span();
        let h = h.get_ref();
        let device = ctx.device_ref(&names, &h.device, "handover")?;
        let peer = ctx.device_ref(&names, &h.peer, "handover")?;
        if device == peer {
            return Err(ctx.diag(DiagCode::InvalidValue, &h.peer.span(), "handover peer must differ from device"));
        }
        let direction: Direction = h.direction.parse().map_err(|e: String| ctx.diag(DiagCode::InvalidValue, &span, e))?;
        let at = ctx.time(&h.at, &span, "at")?;
        s.handovers.push(HandoverScript { at, device, peer, direction });
    }
    Ok(s)
}
