//! Scenario files: loading, validation with line-anchored diagnostics,
//! running, run artifacts and report derivation.
//!
//! A scenario is a TOML document (`schema_version = 1`). Relative paths
//! are resolved against the directory holding the scenario file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::Spanned;

use crate::analysis::{self, DeploymentReport};
use crate::firmware::{
    Backhaul, Cadence, Device, DeviceProfile, DeviceStats, FirmwarePhase, HttpsRecord, Storage,
    Transport, TransportKind, WifiConfig,
};
use crate::lorawan::{
    codec, server, ActivationMode, AesKey, AppEui, DevAddr, DevEui, DeviceIdentity, Gateway,
    LinkModel, LoraDevice, NetworkServer, RadioNetwork, RadioParams, RequiredSnr, ServerStats,
    TxCurrentTable,
};
use crate::power::{ChargePulse, DrawInterval, DrawLog, PowerConfig, PowerSystem, SolarProfile};
use crate::sensors::{Channel, EnvironmentTrace, SensorKind, SensorModel, SensorParams};
use crate::simcore::{RandomStream, SimTime};
use crate::world::{World, WorldError};

pub const SCHEMA_VERSION: u32 = 1;
pub const GENERATOR: &str = concat!("aqlog-core ", env!("CARGO_PKG_VERSION"));

/// One problem found in a scenario file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub file: String,
    pub line: usize,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}: {}: {}",
            self.file, self.line, self.field, self.message
        )
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{}", render_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),
}

impl ConfigError {
    pub fn diagnostics(&self) -> &[Diagnostic] {
        match self {
            ConfigError::Invalid(d) => d,
            ConfigError::Io { .. } => &[],
        }
    }
}

fn render_diagnostics(d: &[Diagnostic]) -> String {
    d.iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("device {device}: {message}")]
    Build { device: String, message: String },
    #[error(transparent)]
    Report(#[from] ReportError),
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {message}")]
    Artifact { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// File schema

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    schema_version: Spanned<u32>,
    name: Spanned<String>,
    #[serde(default)]
    seed: u64,
    duration_ms: u64,
    #[serde(default)]
    output_dir: Option<String>,
    #[serde(default)]
    required_snr_db: Option<Spanned<Vec<f64>>>,
    #[serde(default)]
    devices: Vec<RawDevice>,
    #[serde(default)]
    gateways: Vec<RawGateway>,
    #[serde(default)]
    resets: Vec<RawReset>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDevice {
    name: Spanned<String>,
    #[serde(default)]
    location: Option<String>,
    profile: Spanned<String>,
    #[serde(default)]
    transport: Option<Spanned<String>>,
    #[serde(default)]
    sensors: Vec<Spanned<String>>,
    sample_count: Option<Spanned<u32>>,
    sample_gap_ms: Option<u64>,
    active_window_ms: Option<u64>,
    sleep_ms: Option<Spanned<u64>>,
    cadence: Option<Cadence>,
    active_ma: Option<Spanned<f64>>,
    sleep_ma: Option<Spanned<f64>>,
    display_ma: Option<f64>,
    first_wake_ms: Option<u64>,
    confirmed_uplinks: Option<bool>,
    retry_depth: Option<Spanned<usize>>,
    rtc_drift_ppm: Option<f64>,
    warmup_wait_ms: Option<u64>,
    #[serde(default)]
    storage_fault: bool,
    #[serde(default)]
    battery: Option<Spanned<PowerConfig>>,
    #[serde(default)]
    solar: Option<Spanned<String>>,
    #[serde(default)]
    traces: BTreeMap<Spanned<String>, Spanned<String>>,
    #[serde(default)]
    lorawan: Option<RawLora>,
    #[serde(default)]
    wifi: Option<Spanned<WifiConfig>>,
    #[serde(default)]
    sensor_params: BTreeMap<Spanned<String>, RawSensorParams>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLora {
    dev_eui: Spanned<String>,
    #[serde(default)]
    app_eui: Option<Spanned<String>>,
    app_key: Spanned<String>,
    #[serde(default)]
    mode: ActivationMode,
    #[serde(default)]
    abp_dev_addr: Option<Spanned<String>>,
    #[serde(default)]
    abp_fcnt_persisted: u32,
    #[serde(default)]
    sf: Option<Spanned<i64>>,
    #[serde(default)]
    tx_power_dbm: Option<Spanned<i64>>,
    #[serde(default)]
    adr: bool,
    #[serde(default)]
    tx_current: TxCurrentTable,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSensorParams {
    warmup_ms: Option<u64>,
    sample_ms: Option<u64>,
    active_ma: Option<f64>,
    sleep_ma: Option<f64>,
    peak_ma: Option<f64>,
    noise_sd: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGateway {
    name: Spanned<String>,
    #[serde(default)]
    links: Vec<RawLink>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    device: Spanned<String>,
    #[serde(default)]
    loss_probability: Option<Spanned<f64>>,
    #[serde(default)]
    loss_schedule: Option<Spanned<String>>,
    #[serde(default)]
    schedule_slot_ms: Option<u64>,
    #[serde(default)]
    snr_mean_db: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReset {
    device: Spanned<String>,
    at_ms: u64,
}

// ---------------------------------------------------------------------------
// Resolved scenario

#[derive(Debug, Clone)]
pub struct LoraSpec {
    pub identity: DeviceIdentity,
    pub radio: RadioParams,
    pub adr: bool,
    pub tx_current: TxCurrentTable,
}

#[derive(Debug, Clone)]
pub struct DeviceSpec {
    pub profile: DeviceProfile,
    pub location: String,
    pub power: PowerConfig,
    pub solar: Option<SolarProfile>,
    pub sensors: Vec<(SensorKind, SensorParams)>,
    pub traces: Vec<EnvironmentTrace>,
    pub lora: Option<LoraSpec>,
    pub wifi: WifiConfig,
    pub storage_fault: bool,
}

impl DeviceSpec {
    pub fn channels(&self) -> Vec<Channel> {
        Channel::ALL
            .iter()
            .copied()
            .filter(|c| self.sensors.iter().any(|(k, _)| k.channels().contains(c)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct GatewaySpec {
    pub name: String,
    /// `(device index, link model)`
    pub links: Vec<(usize, LinkModel)>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub duration_ms: u64,
    pub output_dir: PathBuf,
    pub config_sha256: String,
    pub required_snr: RequiredSnr,
    pub devices: Vec<DeviceSpec>,
    pub gateways: Vec<GatewaySpec>,
    /// `(device index, power-loss time)`
    pub resets: Vec<(usize, u64)>,
}

struct Ctx<'a> {
    file: String,
    src: &'a str,
    base: PathBuf,
    diags: Vec<Diagnostic>,
}

impl Ctx<'_> {
    fn line(&self, span: Range<usize>) -> usize {
        let end = span.start.min(self.src.len());
        self.src[..end].bytes().filter(|b| *b == b'\n').count() + 1
    }

    fn err(&mut self, span: Range<usize>, field: impl Into<String>, message: impl Into<String>) {
        let line = self.line(span);
        self.diags.push(Diagnostic {
            file: self.file.clone(),
            line,
            field: field.into(),
            message: message.into(),
        });
    }

    fn path(&mut self, p: &Spanned<String>, field: &str) -> Option<PathBuf> {
        let full = self.base.join(p.get_ref());
        if full.is_file() {
            Some(full)
        } else {
            self.err(
                p.span(),
                field,
                format!("file not found: {}", full.display()),
            );
            None
        }
    }
}

fn parse_hex<T: std::str::FromStr>(
    ctx: &mut Ctx,
    s: &Spanned<String>,
    field: &str,
    what: &str,
) -> Option<T> {
    match s.get_ref().parse() {
        Ok(v) => Some(v),
        Err(_) => {
            ctx.err(
                s.span(),
                field,
                format!("expected {what}, got `{}`", s.get_ref()),
            );
            None
        }
    }
}

/// Reads a `slot` column of slot indices.
pub fn read_slot_list(path: &Path) -> Result<BTreeSet<u64>, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let mut out = BTreeSet::new();
    for row in rdr.deserialize::<(u64,)>() {
        out.insert(row.map_err(|e| e.to_string())?.0);
    }
    Ok(out)
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &path.display().to_string(), &base)
    }

    /// Parses and validates scenario text. `file` labels diagnostics and
    /// `base` anchors relative paths.
    pub fn parse(text: &str, file: &str, base: &Path) -> Result<Scenario, ConfigError> {
        let mut ctx = Ctx {
            file: file.to_string(),
            src: text,
            base: base.to_path_buf(),
            diags: Vec::new(),
        };
        let raw: RawScenario = match toml::from_str(text) {
            Ok(r) => r,
            Err(e) => {
                let span = e.span().unwrap_or(0..0);
                let msg = e.message().to_string();
                let field = toml_field_hint(&msg);
                ctx.err(span, field, msg);
                return Err(ConfigError::Invalid(ctx.diags));
            }
        };
        let sc = resolve(raw, &mut ctx, text);
        match sc {
            Some(sc) if ctx.diags.is_empty() => Ok(sc),
            _ => Err(ConfigError::Invalid(ctx.diags)),
        }
    }
}

fn toml_field_hint(msg: &str) -> String {
    msg.split('`')
        .nth(1)
        .filter(|s| !s.contains(' '))
        .unwrap_or("document")
        .to_string()
}

fn resolve(raw: RawScenario, ctx: &mut Ctx, text: &str) -> Option<Scenario> {
    if *raw.schema_version.get_ref() != SCHEMA_VERSION {
        ctx.err(
            raw.schema_version.span(),
            "schema_version",
            format!(
                "unsupported version {}, expected {SCHEMA_VERSION}",
                raw.schema_version.get_ref()
            ),
        );
    }
    if raw.name.get_ref().trim().is_empty() {
        ctx.err(raw.name.span(), "name", "must not be empty");
    }
    let required_snr = match &raw.required_snr_db {
        None => RequiredSnr::default(),
        Some(v) => match <[f64; 6]>::try_from(v.get_ref().as_slice()) {
            Ok(a) => RequiredSnr(a),
            Err(_) => {
                ctx.err(v.span(), "required_snr_db", "needs six values, SF7 to SF12");
                RequiredSnr::default()
            }
        },
    };

    let mut names: BTreeMap<String, usize> = BTreeMap::new();
    let mut euis: BTreeSet<DevEui> = BTreeSet::new();
    let mut devices = Vec::new();
    for (i, d) in raw.devices.into_iter().enumerate() {
        let name = d.name.get_ref().clone();
        if name.trim().is_empty() || name.contains(['/', '\\']) {
            ctx.err(
                d.name.span(),
                "devices.name",
                "must be non-empty and free of path separators",
            );
        }
        if names.insert(name.clone(), i).is_some() {
            ctx.err(
                d.name.span(),
                "devices.name",
                format!("duplicate device name `{name}`"),
            );
        }
        if let Some(spec) = resolve_device(d, ctx, &mut euis) {
            devices.push(spec);
        }
    }

    let mut gateways = Vec::new();
    let mut gw_names = BTreeSet::new();
    for g in raw.gateways {
        if !gw_names.insert(g.name.get_ref().clone()) {
            ctx.err(
                g.name.span(),
                "gateways.name",
                format!("duplicate gateway name `{}`", g.name.get_ref()),
            );
        }
        let mut links = Vec::new();
        for l in g.links {
            let Some(&idx) = names.get(l.device.get_ref()) else {
                ctx.err(
                    l.device.span(),
                    "gateways.links.device",
                    format!("unknown device `{}`", l.device.get_ref()),
                );
                continue;
            };
            let mut model = LinkModel::default();
            if let Some(p) = &l.loss_probability {
                if !(0.0..=1.0).contains(p.get_ref()) {
                    ctx.err(
                        p.span(),
                        "gateways.links.loss_probability",
                        format!("{} outside [0, 1]", p.get_ref()),
                    );
                }
                model.loss_probability = *p.get_ref();
            }
            if let Some(snr) = l.snr_mean_db {
                model.snr_mean_db = snr;
            }
            model.slot_ms = l
                .schedule_slot_ms
                .or_else(|| devices.get(idx).map(|d: &DeviceSpec| d.profile.cycle_ms()))
                .unwrap_or(model.slot_ms);
            if let Some(p) = &l.loss_schedule {
                if let Some(path) = ctx.path(p, "gateways.links.loss_schedule") {
                    match read_slot_list(&path) {
                        Ok(s) => model.loss_slots = s,
                        Err(e) => ctx.err(p.span(), "gateways.links.loss_schedule", e),
                    }
                }
            }
            if devices.get(idx).is_some_and(|d| d.lora.is_none()) {
                ctx.err(
                    l.device.span(),
                    "gateways.links.device",
                    format!("device `{}` has no lorawan section", l.device.get_ref()),
                );
            }
            links.push((idx, model));
        }
        gateways.push(GatewaySpec {
            name: g.name.into_inner(),
            links,
        });
    }

    let mut resets = Vec::new();
    for r in raw.resets {
        match names.get(r.device.get_ref()) {
            Some(&idx) => resets.push((idx, r.at_ms)),
            None => ctx.err(
                r.device.span(),
                "resets.device",
                format!("unknown device `{}`", r.device.get_ref()),
            ),
        }
    }

    let output_dir = ctx.base.join(
        raw.output_dir
            .unwrap_or_else(|| format!("out/{}", raw.name.get_ref())),
    );
    Some(Scenario {
        name: raw.name.into_inner(),
        seed: raw.seed,
        duration_ms: raw.duration_ms,
        output_dir,
        config_sha256: hex::encode(Sha256::digest(text.as_bytes())),
        required_snr,
        devices,
        gateways,
        resets,
    })
}

fn resolve_device(d: RawDevice, ctx: &mut Ctx, euis: &mut BTreeSet<DevEui>) -> Option<DeviceSpec> {
    let name = d.name.get_ref().clone();
    let mut profile = match d.profile.get_ref().as_str() {
        "indoor" => DeviceProfile::indoor(&name),
        "outdoor" => DeviceProfile::outdoor(&name),
        other => {
            ctx.err(
                d.profile.span(),
                "devices.profile",
                format!("unknown profile `{other}` (indoor or outdoor)"),
            );
            DeviceProfile::indoor(&name)
        }
    };
    if let Some(t) = &d.transport {
        profile.transport = match t.get_ref().as_str() {
            "wifi_https" => TransportKind::WifiHttps,
            "lorawan" => TransportKind::Lorawan,
            "offline" => TransportKind::Offline,
            other => {
                ctx.err(
                    t.span(),
                    "devices.transport",
                    format!("unknown transport `{other}` (wifi_https, lorawan or offline)"),
                );
                profile.transport
            }
        };
    }
    if let Some(n) = &d.sample_count {
        if *n.get_ref() < 1 {
            ctx.err(n.span(), "devices.sample_count", "must be >= 1");
        }
        profile.sample_count = *n.get_ref();
    }
    if let Some(v) = d.sample_gap_ms {
        profile.sample_gap_ms = v;
    }
    if let Some(v) = d.active_window_ms {
        profile.active_window_ms = v;
    }
    if let Some(v) = d.cadence {
        profile.cadence = v;
    }
    if let Some(v) = &d.sleep_ms {
        profile.sleep_ms = *v.get_ref();
        if profile.cycle_ms() == 0 {
            ctx.err(v.span(), "devices.sleep_ms", "cycle length must be > 0");
        }
    }
    for (field, v, slot) in [
        ("devices.active_ma", &d.active_ma, &mut profile.active_ma),
        ("devices.sleep_ma", &d.sleep_ma, &mut profile.sleep_ma),
    ] {
        if let Some(v) = v {
            if !(*v.get_ref() >= 0.0) {
                ctx.err(v.span(), field, "must be >= 0");
            }
            *slot = *v.get_ref();
        }
    }
    if let Some(v) = d.display_ma {
        profile.display_ma = v.max(0.0);
    }
    if let Some(v) = d.first_wake_ms {
        profile.first_wake_ms = v;
    }
    if let Some(v) = d.confirmed_uplinks {
        profile.confirmed_uplinks = v;
    }
    if let Some(v) = &d.retry_depth {
        if *v.get_ref() < 1 {
            ctx.err(v.span(), "devices.retry_depth", "must be >= 1");
        }
        profile.retry_depth = *v.get_ref();
    }
    if let Some(v) = d.rtc_drift_ppm {
        profile.rtc_drift_ppm = v;
    }
    profile.warmup_wait_ms = d.warmup_wait_ms;

    let power = match &d.battery {
        Some(b) => {
            if let Err(e) = b.get_ref().validate() {
                ctx.err(b.span(), "devices.battery", e.to_string());
            }
            b.get_ref().clone()
        }
        None => PowerConfig::default(),
    };
    profile.cutoff_code = power.code_for_voltage(power.cutoff_v);
    profile.rearm_code = power.code_for_voltage(power.rearm_v);

    let solar = d.solar.as_ref().and_then(|p| {
        let path = ctx.path(p, "devices.solar")?;
        SolarProfile::from_csv_path(&path)
            .map_err(|e| ctx.err(p.span(), "devices.solar", e.to_string()))
            .ok()
    });

    let mut overrides: BTreeMap<SensorKind, RawSensorParams> = BTreeMap::new();
    for (k, v) in d.sensor_params {
        match k.get_ref().parse::<SensorKind>() {
            Ok(kind) => {
                overrides.insert(kind, v);
            }
            Err(_) => ctx.err(
                k.span(),
                "devices.sensor_params",
                format!("unknown sensor `{}`", k.get_ref()),
            ),
        }
    }
    let mut sensors = Vec::new();
    let mut seen = BTreeSet::new();
    for s in &d.sensors {
        let Ok(kind) = s.get_ref().parse::<SensorKind>() else {
            ctx.err(
                s.span(),
                "devices.sensors",
                format!("unknown sensor `{}` (sps30, scd30 or sht31)", s.get_ref()),
            );
            continue;
        };
        if !seen.insert(kind) {
            ctx.err(
                s.span(),
                "devices.sensors",
                format!("sensor `{kind}` listed twice"),
            );
            continue;
        }
        let mut p = kind.default_params();
        if let Some(o) = overrides.get(&kind) {
            p.warmup_ms = o.warmup_ms.unwrap_or(p.warmup_ms);
            p.sample_ms = o.sample_ms.unwrap_or(p.sample_ms);
            p.active_ma = o.active_ma.unwrap_or(p.active_ma);
            p.sleep_ma = o.sleep_ma.unwrap_or(p.sleep_ma);
            p.peak_ma = o.peak_ma.unwrap_or(p.peak_ma);
            p.noise_sd = o.noise_sd.unwrap_or(p.noise_sd);
        }
        if let Err(e) = p.validate() {
            ctx.err(s.span(), "devices.sensor_params", format!("{kind}: {e}"));
        }
        sensors.push((kind, p));
    }

    let mut traces = Vec::new();
    let mut bound = BTreeSet::new();
    for (k, p) in &d.traces {
        let Ok(channel) = k.get_ref().parse::<Channel>() else {
            ctx.err(
                k.span(),
                "devices.traces",
                format!("unknown channel `{}`", k.get_ref()),
            );
            continue;
        };
        bound.insert(channel);
        if let Some(path) = ctx.path(p, &format!("devices.traces.{channel}")) {
            match EnvironmentTrace::from_csv_path(channel, &path) {
                Ok(t) => traces.push(t),
                Err(e) => ctx.err(p.span(), format!("devices.traces.{channel}"), e.to_string()),
            }
        }
    }
    for (kind, _) in &sensors {
        for c in kind.channels() {
            if !bound.contains(c) {
                ctx.err(
                    d.name.span(),
                    "devices.traces",
                    format!("sensor {kind} needs a `{c}` trace"),
                );
            }
        }
    }

    let lora = match (&d.lorawan, profile.transport) {
        (Some(l), _) => resolve_lora(l, ctx, euis),
        (None, TransportKind::Lorawan) => {
            ctx.err(
                d.name.span(),
                "devices.lorawan",
                "lorawan transport needs a [devices.lorawan] table",
            );
            None
        }
        (None, _) => None,
    };
    let wifi = match &d.wifi {
        Some(w) => {
            if !(0.0..=1.0).contains(&w.get_ref().success_probability) {
                ctx.err(
                    w.span(),
                    "devices.wifi.success_probability",
                    "outside [0, 1]",
                );
            }
            *w.get_ref()
        }
        None => WifiConfig::default(),
    };
    Some(DeviceSpec {
        profile,
        location: d.location.unwrap_or(name),
        power,
        solar,
        sensors,
        traces,
        lora,
        wifi,
        storage_fault: d.storage_fault,
    })
}

fn resolve_lora(l: &RawLora, ctx: &mut Ctx, euis: &mut BTreeSet<DevEui>) -> Option<LoraSpec> {
    let dev_eui: Option<DevEui> =
        parse_hex(ctx, &l.dev_eui, "devices.lorawan.dev_eui", "16 hex digits");
    let app_eui: Option<AppEui> = match &l.app_eui {
        Some(a) => parse_hex(ctx, a, "devices.lorawan.app_eui", "16 hex digits"),
        None => Some(AppEui([0; 8])),
    };
    let app_key: Option<AesKey> =
        parse_hex(ctx, &l.app_key, "devices.lorawan.app_key", "32 hex digits");
    let abp_dev_addr: Option<DevAddr> = match &l.abp_dev_addr {
        Some(a) => parse_hex(ctx, a, "devices.lorawan.abp_dev_addr", "8 hex digits"),
        None => None,
    };
    if let Some(e) = dev_eui {
        if !euis.insert(e) {
            ctx.err(
                l.dev_eui.span(),
                "devices.lorawan.dev_eui",
                format!("dev_eui {e} used twice"),
            );
        }
    }
    if l.mode == ActivationMode::Abp && abp_dev_addr.is_none() && l.abp_dev_addr.is_none() {
        ctx.err(
            l.dev_eui.span(),
            "devices.lorawan.abp_dev_addr",
            "abp mode needs abp_dev_addr",
        );
    }
    let mut radio = RadioParams::default();
    if let Some(sf) = &l.sf {
        if !(7..=12).contains(sf.get_ref()) {
            ctx.err(
                sf.span(),
                "devices.lorawan.sf",
                format!("spreading factor {} outside 7-12", sf.get_ref()),
            );
        } else {
            radio.spreading_factor = *sf.get_ref() as u8;
        }
    }
    if let Some(p) = &l.tx_power_dbm {
        if !(2..=14).contains(p.get_ref()) {
            ctx.err(
                p.span(),
                "devices.lorawan.tx_power_dbm",
                format!("tx power {} dBm outside 2-14", p.get_ref()),
            );
        } else {
            radio.tx_power_dbm = *p.get_ref() as i8;
        }
    }
    Some(LoraSpec {
        identity: DeviceIdentity {
            dev_eui: dev_eui?,
            app_eui: app_eui?,
            app_key: app_key?,
            mode: l.mode,
            abp_dev_addr,
            abp_fcnt_persisted: l.abp_fcnt_persisted,
        },
        radio,
        adr: l.adr,
        tx_current: l.tx_current,
    })
}

// ---------------------------------------------------------------------------
// Running

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestDevice {
    pub name: String,
    pub location: String,
    pub transport: TransportKind,
    pub dev_eui: Option<DevEui>,
    pub channels: Vec<Channel>,
    pub cadence_ms: u64,
    pub first_wake_ms: u64,
    pub capacity_mah: f64,
    pub charge_start_mah: f64,
    pub charge_end_mah: f64,
    pub consumed_mah: f64,
    pub charged_mah: f64,
    pub conservation_error_mah: f64,
    pub final_phase: FirmwarePhase,
    pub storage_rows: u64,
    pub storage_dropped: u64,
    pub retry_dropped: u64,
    pub cutoff_notices: u64,
    pub stats: DeviceStats,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub scenario: String,
    pub seed: u64,
    pub duration_ms: u64,
    pub config_sha256: String,
    pub generator: String,
    pub events_scheduled: u64,
    pub events_fired: u64,
    pub server: ServerStats,
    pub devices: Vec<ManifestDevice>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SERVER_RECORDS_FILE: &str = "server_records.csv";
pub const HTTPS_RECORDS_FILE: &str = "https_records.csv";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";

pub struct RunOutput {
    pub world: World,
    pub manifest: RunManifest,
    pub reports: Vec<DeploymentReport>,
    pub out_dir: PathBuf,
}

/// Builds the devices and backhaul of `sc`, storing device logs under
/// `out/devices`.
pub fn build_world(sc: &Scenario, out: &Path) -> Result<World, RunError> {
    let dev_dir = out.join("devices");
    fs::create_dir_all(&dev_dir).map_err(io_err(&dev_dir))?;
    let mut server = NetworkServer::new(sc.required_snr);
    let mut devices = Vec::new();
    for spec in &sc.devices {
        let name = spec.profile.name.clone();
        let build = |message: String| RunError::Build {
            device: name.clone(),
            message,
        };
        let mut power = PowerSystem::new(spec.power.clone()).map_err(|e| build(e.to_string()))?;
        if let Some(s) = &spec.solar {
            power = power.with_solar(s.clone());
        }
        if spec.power.adc_noise_lsb > 0 {
            power = power.with_adc_noise(RandomStream::labelled(sc.seed, &format!("adc/{name}")));
        }
        let mut sensors = Vec::new();
        for (kind, params) in &spec.sensors {
            let mut m = SensorModel::new(*kind, *params).map_err(|e| build(e.to_string()))?;
            if params.noise_sd > 0.0 {
                m = m.with_noise(RandomStream::labelled(
                    sc.seed,
                    &format!("noise/{name}/{kind}"),
                ));
            }
            sensors.push(m);
        }
        let transport = match spec.profile.transport {
            TransportKind::Offline => Transport::Offline,
            TransportKind::WifiHttps => Transport::Wifi {
                cfg: spec.wifi,
                rng: RandomStream::labelled(sc.seed, &format!("wifi/{name}")),
            },
            TransportKind::Lorawan => {
                let l = spec
                    .lora
                    .as_ref()
                    .ok_or_else(|| build("missing lorawan identity".into()))?;
                server
                    .register(l.identity.clone(), l.adr)
                    .map_err(|e| build(e.to_string()))?;
                let dev = LoraDevice::new(l.identity.clone(), l.radio, l.adr)
                    .map_err(|e| build(e.to_string()))?;
                Transport::Lora {
                    dev: Box::new(dev),
                    tx: l.tx_current,
                }
            }
        };
        let storage = if spec.storage_fault {
            Storage::degraded()
        } else {
            let p = dev_dir.join(format!("{name}.csv"));
            Storage::create(&p).map_err(|e| build(e.to_string()))?
        };
        let dev = Device::new(
            spec.profile.clone(),
            power,
            sensors,
            spec.traces.clone(),
            transport,
            storage,
        )
        .map_err(|e| build(e.to_string()))?;
        devices.push(dev);
    }
    let mut gateways = Vec::new();
    for g in &sc.gateways {
        let mut gw = Gateway::new(&g.name);
        for (idx, model) in &g.links {
            if let Some(l) = &sc.devices[*idx].lora {
                gw.add_link(sc.seed, l.identity.dev_eui, model.clone());
            }
        }
        gateways.push(gw);
    }
    let backhaul = Backhaul {
        network: RadioNetwork::new(gateways),
        server,
        https: Vec::new(),
    };
    let mut world = World::new(devices, backhaul)?;
    for (idx, at) in &sc.resets {
        world.schedule_power_loss(*idx, SimTime(*at))?;
    }
    Ok(world)
}

/// Runs the scenario and writes every artifact into `out`.
pub fn run_scenario(sc: &Scenario, out: &Path) -> Result<RunOutput, RunError> {
    let mut world = build_world(sc, out)?;
    world.run(SimTime(sc.duration_ms))?;
    let manifest = write_artifacts(sc, &world, out)?;
    let reports = report_from_dir(out)?;
    write_reports(out, &reports)?;
    Ok(RunOutput {
        world,
        manifest,
        reports,
        out_dir: out.to_path_buf(),
    })
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, RunError> {
    Ok(BufWriter::new(
        fs::File::create(path).map_err(io_err(path))?,
    ))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> RunError + '_ {
    move |e| RunError::Io {
        path: path.display().to_string(),
        source: io::Error::other(e.to_string()),
    }
}

pub fn write_https_csv<W: Write>(records: &[HttpsRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "device",
        "seq",
        "timestamp_ms",
        "received_ms",
        "payload_hex",
    ])?;
    for r in records {
        w.write_record([
            r.device.clone(),
            r.seq.to_string(),
            r.timestamp_ms.to_string(),
            r.received_ms.to_string(),
            hex::encode(&r.payload),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_energy_csv<W: Write>(log: &DrawLog, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "start_ms", "end_ms", "value"])?;
    for i in &log.intervals {
        w.write_record([
            "draw_ma".to_string(),
            i.start_ms.to_string(),
            i.end_ms.to_string(),
            i.current_ma.to_string(),
        ])?;
    }
    for p in &log.pulses {
        w.write_record([
            format!("pulse_mah:{}", p.consumer),
            p.at_ms.to_string(),
            p.at_ms.to_string(),
            p.charge_mah.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_artifacts(sc: &Scenario, world: &World, out: &Path) -> Result<RunManifest, RunError> {
    let p = out.join(SERVER_RECORDS_FILE);
    world
        .backhaul
        .server
        .write_csv(create(&p)?)
        .map_err(csv_err(&p))?;
    let p = out.join(HTTPS_RECORDS_FILE);
    write_https_csv(&world.backhaul.https, create(&p)?).map_err(csv_err(&p))?;

    let energy_dir = out.join("energy");
    fs::create_dir_all(&energy_dir).map_err(io_err(&energy_dir))?;
    let mut devices = Vec::new();
    for (spec, dev) in sc.devices.iter().zip(&world.devices) {
        let p = energy_dir.join(format!("{}.csv", dev.name()));
        write_energy_csv(dev.power.draw_log(), create(&p)?).map_err(csv_err(&p))?;
        devices.push(ManifestDevice {
            name: dev.name().to_string(),
            location: spec.location.clone(),
            transport: spec.profile.transport,
            dev_eui: spec.lora.as_ref().map(|l| l.identity.dev_eui),
            channels: spec.channels(),
            cadence_ms: spec.profile.cycle_ms(),
            first_wake_ms: spec.profile.first_wake_ms,
            capacity_mah: spec.power.capacity_mah,
            charge_start_mah: dev.power.start_charge_mah(),
            charge_end_mah: dev.power.charge_mah(),
            consumed_mah: dev.power.consumed_mah(),
            charged_mah: dev.power.charged_mah(),
            conservation_error_mah: dev.power.conservation_error_mah(),
            final_phase: dev.phase(),
            storage_rows: dev.storage().rows(),
            storage_dropped: dev.storage().dropped(),
            retry_dropped: dev.retry_queue().dropped(),
            cutoff_notices: dev
                .power_notices()
                .iter()
                .filter(|n| matches!(n, crate::power::PowerNotice::Cutoff { .. }))
                .count() as u64,
            stats: dev.stats(),
        });
    }
    let stats = world.scheduler_stats();
    let manifest = RunManifest {
        scenario: sc.name.clone(),
        seed: sc.seed,
        duration_ms: sc.duration_ms,
        config_sha256: sc.config_sha256.clone(),
        generator: GENERATOR.to_string(),
        events_scheduled: stats.scheduled,
        events_fired: stats.fired,
        server: world.backhaul.server.stats(),
        devices,
    };
    let p = out.join(MANIFEST_FILE);
    let mut f = create(&p)?;
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(|e| RunError::Io {
        path: p.display().to_string(),
        source: e.into(),
    })?;
    f.write_all(b"\n")
        .and_then(|_| f.flush())
        .map_err(io_err(&p))?;
    Ok(manifest)
}

pub fn write_reports(out: &Path, reports: &[DeploymentReport]) -> Result<(), RunError> {
    let p = out.join(REPORT_JSON_FILE);
    let mut f = create(&p)?;
    serde_json::to_writer_pretty(&mut f, reports).map_err(|e| RunError::Io {
        path: p.display().to_string(),
        source: e.into(),
    })?;
    f.write_all(b"\n")
        .and_then(|_| f.flush())
        .map_err(io_err(&p))?;
    let p = out.join(REPORT_TEXT_FILE);
    fs::write(&p, analysis::render_table(reports)).map_err(io_err(&p))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Reports from run artifacts

fn artifact(path: &Path, message: impl fmt::Display) -> ReportError {
    ReportError::Artifact {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, ReportError> {
    let p = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).map_err(|e| artifact(&p, e))?;
    serde_json::from_str(&text).map_err(|e| artifact(&p, e))
}

pub fn read_energy_csv(path: &Path) -> Result<DrawLog, ReportError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| artifact(path, e))?;
    let mut log = DrawLog::default();
    for row in rdr.deserialize::<(String, f64, f64, f64)>() {
        let (kind, start, end, value) = row.map_err(|e| artifact(path, e))?;
        if kind == "draw_ma" {
            log.intervals.push(DrawInterval {
                start_ms: start,
                end_ms: end,
                current_ma: value,
            });
        } else if let Some(consumer) = kind.strip_prefix("pulse_mah:") {
            log.pulses.push(ChargePulse {
                at_ms: start as u64,
                consumer: consumer.to_string(),
                charge_mah: value,
            });
        } else {
            return Err(artifact(path, format!("unknown row kind `{kind}`")));
        }
    }
    Ok(log)
}

fn read_https_csv(path: &Path) -> Result<Vec<HttpsRecord>, ReportError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| artifact(path, e))?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<(String, u64, u64, u64, String)>() {
        let (device, seq, timestamp_ms, received_ms, hexs) = row.map_err(|e| artifact(path, e))?;
        out.push(HttpsRecord {
            device,
            seq,
            timestamp_ms,
            received_ms,
            payload: hex::decode(&hexs).map_err(|e| artifact(path, e))?,
        });
    }
    Ok(out)
}

/// `(timestamp, value of the report channel)` per stored record.
fn read_storage_csv(
    path: &Path,
    channel: Option<Channel>,
) -> Result<Vec<(u64, Option<f64>)>, ReportError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| artifact(path, e))?;
    let mut out: Vec<(u64, u64, Option<f64>)> = Vec::new();
    for row in rdr.deserialize::<(u64, u64, String, String, u32)>() {
        let (seq, ts, ch, value, _) = row.map_err(|e| artifact(path, e))?;
        if out.last().map(|r| r.0) != Some(seq) {
            out.push((seq, ts, None));
        }
        if channel.map(|c| c.as_str()) == Some(ch.as_str()) && !value.is_empty() {
            let v: f64 = value.parse().map_err(|e| artifact(path, e))?;
            out.last_mut().expect("pushed above").2 = Some(v);
        }
    }
    Ok(out.into_iter().map(|(_, t, v)| (t, v)).collect())
}

/// Re-derives the deployment report from the files of a finished run.
pub fn report_from_dir(dir: &Path) -> Result<Vec<DeploymentReport>, ReportError> {
    let manifest = read_manifest(dir)?;
    let p = dir.join(SERVER_RECORDS_FILE);
    let server_records = server::read_records_csv(fs::File::open(&p).map_err(|e| artifact(&p, e))?)
        .map_err(|e| artifact(&p, e))?;
    let https = read_https_csv(&dir.join(HTTPS_RECORDS_FILE))?;
    let mut rows = Vec::new();
    for d in &manifest.devices {
        let channel = d.channels.first().copied();
        let pick = |values: Vec<(Channel, Option<f64>)>| {
            values
                .into_iter()
                .find(|(c, _)| Some(*c) == channel)
                .and_then(|(_, v)| v)
        };
        let received: Vec<(u64, Option<f64>)> = match d.transport {
            TransportKind::Lorawan => server_records
                .iter()
                .filter(|r| Some(r.dev_eui) == d.dev_eui)
                .map(|r| {
                    let v = codec::decode(&d.channels, &r.payload).map_err(|e| artifact(&p, e))?;
                    Ok((r.timestamp_ms, pick(v)))
                })
                .collect::<Result<_, ReportError>>()?,
            TransportKind::WifiHttps => https
                .iter()
                .filter(|r| r.device == d.name)
                .map(|r| {
                    let v = codec::decode(&d.channels, &r.payload)
                        .map_err(|e| artifact(&dir.join(HTTPS_RECORDS_FILE), e))?;
                    Ok((r.timestamp_ms, pick(v)))
                })
                .collect::<Result<_, ReportError>>()?,
            TransportKind::Offline => {
                let p = dir.join("devices").join(format!("{}.csv", d.name));
                if p.is_file() {
                    read_storage_csv(&p, channel)?
                } else {
                    Vec::new()
                }
            }
        };
        let span = (d.first_wake_ms, manifest.duration_ms);
        let times: Vec<u64> = received.iter().map(|r| r.0).collect();
        let up = analysis::uptime(d.cadence_ms, span, &times).ok();
        let values: Vec<f64> = received.iter().filter_map(|r| r.1).collect();
        let stats = analysis::channel_stats(&values).ok();
        let log = read_energy_csv(&dir.join("energy").join(format!("{}.csv", d.name)))?;
        let energy = analysis::energy_report(&log, d.capacity_mah).ok();
        rows.push(DeploymentReport {
            device: d.name.clone(),
            location: d.location.clone(),
            channel: channel.map(|c| c.as_str().to_string()),
            uptime_pct: up.map(|u| u.uptime_pct),
            expected_frames: up.map(|u| u.expected).unwrap_or(0),
            received_frames: up.map(|u| u.received).unwrap_or(0),
            min: stats.map(|s| s.min),
            max: stats.map(|s| s.max),
            avg: stats.map(|s| s.avg),
            gaps: analysis::gaps(d.cadence_ms, span, &times),
            avg_current_ma: energy.map(|e| e.avg_current_ma),
            projected_life_h: energy.and_then(|e| e.projected_life_h),
        });
    }
    Ok(rows)
}
