//! Battery, charger and supply-rail model.
//!
//! Charge is kept in an integer coulomb counter (1e-12 mAh per unit) so that
//! `charge_end = charge_start - consumed + charged` holds exactly no matter
//! how many integration steps a run takes. Consumers register a current on a
//! rail; the rail's efficiency chain converts it to the current seen at the
//! cell.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simcore::{RandomStream, SimTime};

const UNITS_PER_MAH: f64 = 1e12;
const MS_PER_HOUR: f64 = 3_600_000.0;
/// Longest integration step while a charger is connected.
const CHARGE_STEP_MS: f64 = 1000.0;

/// Open-circuit voltage against state of charge, `(soc, volts)`.
pub const OCV_TABLE: [(f64, f64); 5] = [
    (0.00, 2.50),
    (0.05, 3.00),
    (0.50, 3.70),
    (0.90, 4.05),
    (1.00, 4.20),
];

pub const MIN_CELL_V: f64 = 2.5;
pub const MAX_CELL_V: f64 = 4.2;

#[derive(Debug, Error, PartialEq)]
pub enum PowerError {
    #[error("unknown rail `{0}` (expected battery, rail_5v or rail_3v3)")]
    UnknownRail(String),
    #[error("integration target {until} is before last integration time {last}")]
    TimeReversal { until: SimTime, last: SimTime },
    #[error("invalid power configuration: {0}")]
    InvalidConfig(String),
    #[error("solar profile: {0}")]
    Solar(String),
}

/// Supply rail a consumer is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rail {
    /// Straight off the cell (divider, whole-board residual draw).
    Battery,
    /// Boost converter output.
    Rail5v,
    /// LDO output fed from the 5 V rail.
    Rail3v3,
}

impl Rail {
    pub fn as_str(self) -> &'static str {
        match self {
            Rail::Battery => "battery",
            Rail::Rail5v => "rail_5v",
            Rail::Rail3v3 => "rail_3v3",
        }
    }
}

impl fmt::Display for Rail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Rail {
    type Err = PowerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "battery" => Ok(Rail::Battery),
            "rail_5v" => Ok(Rail::Rail5v),
            "rail_3v3" => Ok(Rail::Rail3v3),
            other => Err(PowerError::UnknownRail(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerRail {
    pub name: Rail,
    /// Cell-to-rail efficiency of the whole chain feeding this rail.
    pub efficiency: f64,
    pub dropout_v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChargePhase {
    Discharging,
    CcCharging,
    CvCharging,
    Full,
    Cutoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatteryState {
    pub capacity_mah: f64,
    pub charge_mah: f64,
    pub terminal_voltage_v: f64,
    pub phase: ChargePhase,
}

impl BatteryState {
    pub fn soc(&self) -> f64 {
        self.charge_mah / self.capacity_mah
    }
}

/// A consumer's registered current.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurrentDraw {
    pub consumer: String,
    pub rail: Rail,
    pub current_ma: f64,
    pub since: SimTime,
}

/// Constant cell-side load over `[start_ms, end_ms)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawInterval {
    pub start_ms: f64,
    pub end_ms: f64,
    pub current_ma: f64,
}

impl DrawInterval {
    pub fn duration_ms(&self) -> f64 {
        self.end_ms - self.start_ms
    }

    pub fn charge_mah(&self) -> f64 {
        self.current_ma * self.duration_ms() / MS_PER_HOUR
    }
}

/// Charge removed in a burst too short for the millisecond clock
/// (radio transmissions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargePulse {
    pub at_ms: u64,
    pub consumer: String,
    pub charge_mah: f64,
}

/// Cell-side load history of one device.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DrawLog {
    pub intervals: Vec<DrawInterval>,
    pub pulses: Vec<ChargePulse>,
}

impl DrawLog {
    fn push(&mut self, start_ms: f64, end_ms: f64, current_ma: f64) {
        if end_ms <= start_ms {
            return;
        }
        if let Some(last) = self.intervals.last_mut() {
            if last.end_ms == start_ms && last.current_ma == current_ma {
                last.end_ms = end_ms;
                return;
            }
        }
        self.intervals.push(DrawInterval {
            start_ms,
            end_ms,
            current_ma,
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PowerNotice {
    /// Terminal voltage fell to the cutoff threshold.
    Cutoff { at_ms: f64 },
    /// Voltage recovered to the re-arm threshold after a cutoff.
    Rearmed { at_ms: f64 },
}

/// Step-wise available charging current, `time_ms,current_mA`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolarProfile {
    samples: Vec<(SimTime, f64)>,
}

impl SolarProfile {
    pub fn new(samples: Vec<(SimTime, f64)>) -> Result<Self, PowerError> {
        for w in samples.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(PowerError::Solar(format!(
                    "times not strictly increasing at {}",
                    w[1].0
                )));
            }
        }
        if let Some((t, c)) = samples.iter().find(|(_, c)| !(*c >= 0.0)) {
            return Err(PowerError::Solar(format!("negative current {c} at {t}")));
        }
        Ok(SolarProfile { samples })
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, PowerError> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| PowerError::Solar(format!("{}: {e}", path.display())))?;
        let mut samples = Vec::new();
        for row in rdr.deserialize::<(u64, f64)>() {
            let (t, c) = row.map_err(|e| PowerError::Solar(format!("{}: {e}", path.display())))?;
            samples.push((SimTime(t), c));
        }
        Self::new(samples)
    }

    pub fn samples(&self) -> &[(SimTime, f64)] {
        &self.samples
    }

    /// Sample-and-hold value at `t_ms`; zero before the first sample.
    pub fn available_at(&self, t_ms: f64) -> f64 {
        let idx = self.samples.partition_point(|(t, _)| (t.0 as f64) <= t_ms);
        if idx == 0 {
            0.0
        } else {
            self.samples[idx - 1].1
        }
    }

    pub fn next_change_after(&self, t_ms: f64) -> Option<f64> {
        let idx = self.samples.partition_point(|(t, _)| (t.0 as f64) <= t_ms);
        self.samples.get(idx).map(|(t, _)| t.0 as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerConfig {
    pub capacity_mah: f64,
    pub initial_soc: f64,
    /// Series resistance in milliohms; 0 makes terminal voltage equal OCV.
    pub internal_resistance_mohm: f64,
    pub boost_efficiency: f64,
    pub cc_limit_ma: f64,
    pub cv_threshold_v: f64,
    pub cv_tau_ms: f64,
    pub done_current_ma: f64,
    /// Charging restarts from `full` once OCV sags below this.
    pub recharge_v: f64,
    pub cutoff_v: f64,
    pub rearm_v: f64,
    pub divider_ratio: f64,
    pub adc_bits: u32,
    pub vref_v: f64,
    /// Uniform ADC noise half-width in LSB.
    pub adc_noise_lsb: u32,
    /// Monitor draw that stays on through cutoff.
    pub quiescent_ma: f64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig {
            capacity_mah: 3300.0,
            initial_soc: 1.0,
            internal_resistance_mohm: 0.0,
            boost_efficiency: 0.90,
            cc_limit_ma: 300.0,
            cv_threshold_v: 4.2,
            cv_tau_ms: 30.0 * 60.0 * 1000.0,
            done_current_ma: 30.0,
            recharge_v: 4.1,
            cutoff_v: 2.6,
            rearm_v: 3.0,
            divider_ratio: 0.5,
            adc_bits: 12,
            vref_v: 3.3,
            adc_noise_lsb: 0,
            quiescent_ma: 0.01,
        }
    }
}

impl PowerConfig {
    pub fn validate(&self) -> Result<(), PowerError> {
        let bad = |m: String| Err(PowerError::InvalidConfig(m));
        if !(self.capacity_mah > 0.0) {
            return bad(format!(
                "capacity_mah must be > 0, got {}",
                self.capacity_mah
            ));
        }
        if !(0.0..=1.0).contains(&self.initial_soc) {
            return bad(format!(
                "initial_soc must be in [0, 1], got {}",
                self.initial_soc
            ));
        }
        if !(self.boost_efficiency > 0.0 && self.boost_efficiency <= 1.0) {
            return bad(format!(
                "boost_efficiency must be in (0, 1], got {}",
                self.boost_efficiency
            ));
        }
        if !(8..=16).contains(&self.adc_bits) {
            return bad(format!(
                "adc_bits must be in [8, 16], got {}",
                self.adc_bits
            ));
        }
        if self.rearm_v <= self.cutoff_v {
            return bad("rearm_v must exceed cutoff_v".into());
        }
        if self.internal_resistance_mohm < 0.0 || self.quiescent_ma < 0.0 {
            return bad("resistance and quiescent current must be >= 0".into());
        }
        Ok(())
    }

    pub fn rails(&self) -> [PowerRail; 3] {
        let ldo = 3.3 / 5.0;
        [
            PowerRail {
                name: Rail::Battery,
                efficiency: 1.0,
                dropout_v: 0.0,
            },
            PowerRail {
                name: Rail::Rail5v,
                efficiency: self.boost_efficiency,
                dropout_v: 0.0,
            },
            PowerRail {
                name: Rail::Rail3v3,
                efficiency: self.boost_efficiency * ldo,
                dropout_v: 5.0 - 3.3,
            },
        ]
    }

    pub fn rail(&self, rail: Rail) -> PowerRail {
        self.rails()[rail as usize]
    }

    /// ADC code corresponding to a cell voltage, without noise.
    pub fn code_for_voltage(&self, volts: f64) -> u32 {
        divider_code(volts, self.divider_ratio, self.adc_bits, self.vref_v)
    }
}

/// `round(volts * ratio / vref * (2^bits - 1))`, clamped to the code range.
pub fn divider_code(volts: f64, ratio: f64, adc_bits: u32, vref_v: f64) -> u32 {
    let full_scale = ((1u64 << adc_bits) - 1) as f64;
    let code = (volts * ratio / vref_v * full_scale).round();
    code.clamp(0.0, full_scale) as u32
}

/// Piecewise-linear OCV at a state of charge in `[0, 1]`.
pub fn ocv_at(soc: f64) -> f64 {
    let soc = soc.clamp(0.0, 1.0);
    for w in OCV_TABLE.windows(2) {
        let (s0, v0) = w[0];
        let (s1, v1) = w[1];
        if soc <= s1 {
            return v0 + (v1 - v0) * (soc - s0) / (s1 - s0);
        }
    }
    MAX_CELL_V
}

/// Inverse of [`ocv_at`].
pub fn soc_at(volts: f64) -> f64 {
    let v = volts.clamp(MIN_CELL_V, MAX_CELL_V);
    for w in OCV_TABLE.windows(2) {
        let (s0, v0) = w[0];
        let (s1, v1) = w[1];
        if v <= v1 {
            return s0 + (s1 - s0) * (v - v0) / (v1 - v0);
        }
    }
    1.0
}

/// CC/CV charge controller.
#[derive(Debug, Clone, PartialEq)]
pub struct Charger {
    pub cc_limit_ma: f64,
    pub cv_threshold_v: f64,
    pub cv_tau_ms: f64,
    pub done_current_ma: f64,
    pub recharge_v: f64,
    cv: Option<CvTaper>,
    full: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct CvTaper {
    elapsed_ms: f64,
    initial_ma: f64,
}

/// What the charger needs to know about the cell.
#[derive(Debug, Clone, Copy)]
pub struct CellView {
    pub soc: f64,
    pub ocv_v: f64,
    pub resistance_ohm: f64,
}

impl Charger {
    pub fn from_config(cfg: &PowerConfig) -> Self {
        Charger {
            cc_limit_ma: cfg.cc_limit_ma,
            cv_threshold_v: cfg.cv_threshold_v,
            cv_tau_ms: cfg.cv_tau_ms,
            done_current_ma: cfg.done_current_ma,
            recharge_v: cfg.recharge_v,
            cv: None,
            full: false,
        }
    }

    pub fn is_full(&self) -> bool {
        self.full
    }

    pub fn in_cv(&self) -> bool {
        self.cv.is_some()
    }

    /// Charging current to apply over the next `dt_ms` given the available
    /// input current.
    pub fn step(&mut self, available_ma: f64, cell: CellView, dt_ms: f64) -> f64 {
        debug_assert!(dt_ms > 0.0);
        if available_ma <= 0.0 {
            self.cv = None;
            return 0.0;
        }
        if self.full {
            if cell.ocv_v < self.recharge_v {
                self.full = false;
            } else {
                return 0.0;
            }
        }
        if cell.soc >= 1.0 && self.cv.is_none() {
            self.full = true;
            return 0.0;
        }
        let cc = available_ma.min(self.cc_limit_ma);
        if self.cv.is_none() {
            let terminal = cell.ocv_v + cell.resistance_ohm * cc / 1000.0;
            if terminal < self.cv_threshold_v {
                return cc;
            }
            self.cv = Some(CvTaper {
                elapsed_ms: 0.0,
                initial_ma: cc,
            });
        }
        let taper = self.cv.as_mut().expect("cv set above");
        let current = taper.initial_ma * (-taper.elapsed_ms / self.cv_tau_ms).exp();
        taper.elapsed_ms += dt_ms;
        if current < self.done_current_ma {
            self.cv = None;
            self.full = true;
            return 0.0;
        }
        current.min(available_ma)
    }
}

/// Per-device power chain: cell, charger, rails and the consumers on them.
#[derive(Debug, Clone)]
pub struct PowerSystem {
    cfg: PowerConfig,
    charger: Charger,
    solar: Option<SolarProfile>,
    capacity_units: i64,
    charge_units: i64,
    start_units: i64,
    consumed_units: i64,
    charged_units: i64,
    draws: BTreeMap<String, CurrentDraw>,
    last_ms: f64,
    charging_ma: f64,
    cutoff_latched: bool,
    armed: bool,
    notices: Vec<PowerNotice>,
    log: DrawLog,
    adc_noise: Option<RandomStream>,
}

impl PowerSystem {
    pub fn new(cfg: PowerConfig) -> Result<Self, PowerError> {
        cfg.validate()?;
        let capacity_units = (cfg.capacity_mah * UNITS_PER_MAH).round() as i64;
        let charge_units = (cfg.capacity_mah * cfg.initial_soc * UNITS_PER_MAH).round() as i64;
        let mut ps = PowerSystem {
            charger: Charger::from_config(&cfg),
            cfg,
            solar: None,
            capacity_units,
            charge_units,
            start_units: charge_units,
            consumed_units: 0,
            charged_units: 0,
            draws: BTreeMap::new(),
            last_ms: 0.0,
            charging_ma: 0.0,
            cutoff_latched: false,
            armed: true,
            notices: Vec::new(),
            log: DrawLog::default(),
            adc_noise: None,
        };
        ps.cutoff_latched = ps.terminal_voltage() <= ps.cfg.cutoff_v;
        Ok(ps)
    }

    pub fn with_solar(mut self, solar: SolarProfile) -> Self {
        self.solar = Some(solar);
        self
    }

    pub fn with_adc_noise(mut self, stream: RandomStream) -> Self {
        self.adc_noise = Some(stream);
        self
    }

    pub fn config(&self) -> &PowerConfig {
        &self.cfg
    }

    pub fn charger(&self) -> &Charger {
        &self.charger
    }

    pub fn last_integration(&self) -> SimTime {
        SimTime(self.last_ms.ceil() as u64)
    }

    fn soc(&self) -> f64 {
        self.charge_units as f64 / self.capacity_units as f64
    }

    pub fn charge_mah(&self) -> f64 {
        self.charge_units as f64 / UNITS_PER_MAH
    }

    pub fn start_charge_mah(&self) -> f64 {
        self.start_units as f64 / UNITS_PER_MAH
    }

    pub fn consumed_mah(&self) -> f64 {
        self.consumed_units as f64 / UNITS_PER_MAH
    }

    pub fn charged_mah(&self) -> f64 {
        self.charged_units as f64 / UNITS_PER_MAH
    }

    /// `charge - (start - consumed + charged)` in mAh.
    pub fn conservation_error_mah(&self) -> f64 {
        let expected = self.start_units - self.consumed_units + self.charged_units;
        (self.charge_units - expected) as f64 / UNITS_PER_MAH
    }

    pub fn draws(&self) -> impl Iterator<Item = &CurrentDraw> {
        self.draws.values()
    }

    pub fn draw_log(&self) -> &DrawLog {
        &self.log
    }

    pub fn take_notices(&mut self) -> Vec<PowerNotice> {
        std::mem::take(&mut self.notices)
    }

    pub fn in_cutoff(&self) -> bool {
        self.cutoff_latched && self.charging_ma <= 0.0
    }

    fn resistance_ohm(&self) -> f64 {
        self.cfg.internal_resistance_mohm / 1000.0
    }

    /// Cell-side load, honouring the cutoff rule.
    pub fn load_ma(&self) -> f64 {
        if self.in_cutoff() {
            return self.cfg.quiescent_ma;
        }
        let rails = self.cfg.rails();
        self.cfg.quiescent_ma
            + self
                .draws
                .values()
                .map(|d| d.current_ma / rails[d.rail as usize].efficiency)
                .sum::<f64>()
    }

    fn terminal_for(&self, soc: f64, load_ma: f64, charge_ma: f64) -> f64 {
        let v = ocv_at(soc) - self.resistance_ohm() * (load_ma - charge_ma) / 1000.0;
        v.clamp(MIN_CELL_V, MAX_CELL_V)
    }

    pub fn terminal_voltage(&self) -> f64 {
        self.terminal_for(self.soc(), self.load_ma(), self.charging_ma)
    }

    pub fn phase(&self) -> ChargePhase {
        if self.charging_ma > 0.0 {
            if self.charger.in_cv() {
                ChargePhase::CvCharging
            } else {
                ChargePhase::CcCharging
            }
        } else if self.charger.is_full() {
            ChargePhase::Full
        } else if self.cutoff_latched {
            ChargePhase::Cutoff
        } else {
            ChargePhase::Discharging
        }
    }

    pub fn state(&self) -> BatteryState {
        BatteryState {
            capacity_mah: self.cfg.capacity_mah,
            charge_mah: self.charge_mah(),
            terminal_voltage_v: self.terminal_voltage(),
            phase: self.phase(),
        }
    }

    /// Registers `current_ma` for `consumer` from `at` onwards. Charge drawn
    /// under the previous setting is committed first.
    pub fn set_draw(
        &mut self,
        at: SimTime,
        consumer: &str,
        rail: Rail,
        current_ma: f64,
    ) -> Result<(), PowerError> {
        self.integrate(at)?;
        let current_ma = current_ma.max(0.0);
        if current_ma == 0.0 {
            self.draws.remove(consumer);
        } else {
            self.draws.insert(
                consumer.to_string(),
                CurrentDraw {
                    consumer: consumer.to_string(),
                    rail,
                    current_ma,
                    since: at,
                },
            );
        }
        Ok(())
    }

    pub fn set_draw_named(
        &mut self,
        at: SimTime,
        consumer: &str,
        rail: &str,
        current_ma: f64,
    ) -> Result<(), PowerError> {
        let rail = rail.parse()?;
        self.set_draw(at, consumer, rail, current_ma)
    }

    /// Removes `current_ma` on `rail` for `duration_ms` starting at `at`.
    /// Returns the cell-side charge taken; zero while in cutoff.
    pub fn consume_pulse(
        &mut self,
        at: SimTime,
        consumer: &str,
        rail: Rail,
        current_ma: f64,
        duration_ms: f64,
    ) -> Result<f64, PowerError> {
        self.integrate(at)?;
        if self.in_cutoff() || current_ma <= 0.0 || duration_ms <= 0.0 {
            return Ok(0.0);
        }
        let eff = self.cfg.rail(rail).efficiency;
        let want = (current_ma * duration_ms / MS_PER_HOUR / eff * UNITS_PER_MAH).round() as i64;
        let taken = want.min(self.charge_units);
        self.charge_units -= taken;
        self.consumed_units += taken;
        let charge_mah = taken as f64 / UNITS_PER_MAH;
        self.log.pulses.push(ChargePulse {
            at_ms: at.0,
            consumer: consumer.to_string(),
            charge_mah,
        });
        self.check_voltage_edges(at.0 as f64);
        Ok(charge_mah)
    }

    fn apply_flows(&mut self, dt_ms: f64, charge_ma: f64, load_ma: f64, round_out_up: bool) {
        let to_units = |ma: f64| ma * dt_ms / MS_PER_HOUR * UNITS_PER_MAH;
        let mut dq_in = to_units(charge_ma).round() as i64;
        let mut dq_out = if round_out_up {
            to_units(load_ma).ceil() as i64
        } else {
            to_units(load_ma).round() as i64
        };
        let next = self.charge_units + dq_in - dq_out;
        if next > self.capacity_units {
            dq_in -= (next - self.capacity_units).min(dq_in);
        } else if next < 0 {
            dq_out -= (-next).min(dq_out);
        }
        self.charge_units += dq_in - dq_out;
        debug_assert!((0..=self.capacity_units).contains(&self.charge_units));
        self.charged_units += dq_in;
        self.consumed_units += dq_out;
    }

    fn check_voltage_edges(&mut self, at_ms: f64) {
        let v = self.terminal_voltage();
        if !self.cutoff_latched && self.charging_ma <= 0.0 && v <= self.cfg.cutoff_v {
            self.cutoff_latched = true;
            if self.armed {
                self.armed = false;
                self.notices.push(PowerNotice::Cutoff { at_ms });
            }
        }
        if !self.armed && v >= self.cfg.rearm_v {
            self.armed = true;
            self.notices.push(PowerNotice::Rearmed { at_ms });
        }
    }

    /// Advances the cell to `until`, applying every registered draw and the
    /// charger input.
    pub fn integrate(&mut self, until: SimTime) -> Result<BatteryState, PowerError> {
        let end = until.0 as f64;
        if end < self.last_ms {
            return Err(PowerError::TimeReversal {
                until,
                last: self.last_integration(),
            });
        }
        let mut t = self.last_ms;
        while t < end {
            let available = self
                .solar
                .as_ref()
                .map(|s| s.available_at(t))
                .unwrap_or(0.0);
            let mut seg_end = end;
            if let Some(next) = self.solar.as_ref().and_then(|s| s.next_change_after(t)) {
                seg_end = seg_end.min(next);
            }
            if available > 0.0 {
                seg_end = seg_end.min(t + CHARGE_STEP_MS);
            }
            let dt = seg_end - t;
            let cell = CellView {
                soc: self.soc(),
                ocv_v: ocv_at(self.soc()),
                resistance_ohm: self.resistance_ohm(),
            };
            self.charging_ma = self.charger.step(available, cell, dt);
            if self.charging_ma > 0.0 {
                self.cutoff_latched = false;
            } else if self.terminal_voltage() <= self.cfg.cutoff_v {
                self.cutoff_latched = true;
            }
            let load = self.load_ma();
            let net_out = load - self.charging_ma;

            // Exact crossing of the cutoff threshold inside this segment.
            if net_out > 0.0 && !self.cutoff_latched {
                let v_target = self.cfg.cutoff_v + self.resistance_ohm() * net_out / 1000.0;
                let q_cut = (soc_at(v_target) * self.capacity_units as f64).floor();
                let q_now = self.charge_units as f64;
                let rate = net_out / MS_PER_HOUR * UNITS_PER_MAH;
                let dt_cross = (q_now - q_cut) / rate;
                if q_now > q_cut && dt_cross < dt {
                    let tc = t + dt_cross;
                    self.apply_flows(tc - t, self.charging_ma, load, true);
                    self.log.push(t, tc, load);
                    self.check_voltage_edges(tc);
                    t = tc;
                    continue;
                }
            }
            self.apply_flows(dt, self.charging_ma, load, false);
            self.log.push(t, seg_end, load);
            self.check_voltage_edges(seg_end);
            t = seg_end;
        }
        self.last_ms = end;
        Ok(self.state())
    }

    /// Samples the battery through the divider.
    pub fn read_divider(&mut self, adc_bits: u32, vref_v: f64) -> u32 {
        let code = divider_code(
            self.terminal_voltage(),
            self.cfg.divider_ratio,
            adc_bits,
            vref_v,
        );
        match (&mut self.adc_noise, self.cfg.adc_noise_lsb) {
            (Some(rng), n) if n > 0 => {
                let jitter = rng.range_inclusive(-(n as i64), n as i64);
                let max = (1i64 << adc_bits) - 1;
                (code as i64 + jitter).clamp(0, max) as u32
            }
            _ => code,
        }
    }

    /// Divider reading with the configured ADC.
    pub fn read_battery_code(&mut self) -> u32 {
        self.read_divider(self.cfg.adc_bits, self.cfg.vref_v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(cfg: PowerConfig) -> PowerConfig {
        PowerConfig {
            quiescent_ma: 0.0,
            ..cfg
        }
    }

    #[test]
    fn ocv_anchor_points() {
        for (soc, v) in OCV_TABLE {
            assert!((ocv_at(soc) - v).abs() < 1e-12);
            assert!((soc_at(v) - soc).abs() < 1e-12);
        }
        assert!((ocv_at(0.01) - 2.6).abs() < 1e-12);
    }

    #[test]
    fn divider_codes() {
        // round(1.85 / 3.3 * 4095) = round(2295.68)
        assert_eq!(divider_code(3.70, 0.5, 12, 3.3), 2296);
        assert_eq!(divider_code(0.0, 0.5, 12, 3.3), 0);
        // round(1.30 / 3.3 * 4095) = round(1613.18)
        assert_eq!(divider_code(2.60, 0.5, 12, 3.3), 1613);
        assert_eq!(divider_code(10.0, 0.5, 12, 3.3), 4095);
    }

    #[test]
    fn unknown_rail_is_rejected() {
        let mut ps = PowerSystem::new(PowerConfig::default()).unwrap();
        assert_eq!(
            ps.set_draw_named(SimTime(0), "mcu", "rail_12v", 1.0),
            Err(PowerError::UnknownRail("rail_12v".into()))
        );
    }

    #[test]
    fn held_draw_consumes_expected_charge() {
        let cfg = quiet(PowerConfig::default());
        let mut ps = PowerSystem::new(cfg.clone()).unwrap();
        ps.set_draw(SimTime(0), "mcu", Rail::Battery, 60.0).unwrap();
        ps.integrate(SimTime::from_secs(25)).unwrap();
        assert!((ps.consumed_mah() - 60.0 * 25.0 / 3600.0).abs() < 1e-9);

        let mut ps = PowerSystem::new(cfg.clone()).unwrap();
        ps.set_draw(SimTime(0), "mcu", Rail::Rail3v3, 60.0).unwrap();
        ps.integrate(SimTime::from_secs(25)).unwrap();
        let eff = 0.9 * 3.3 / 5.0;
        assert!((ps.consumed_mah() - 60.0 * 25.0 / 3600.0 / eff).abs() < 1e-9);

        let mut ps = PowerSystem::new(cfg).unwrap();
        ps.set_draw(SimTime(0), "mcu", Rail::Battery, 7.0).unwrap();
        ps.integrate(SimTime::from_secs(240)).unwrap();
        assert!((ps.consumed_mah() - 0.4666666666666667).abs() < 1e-9);
    }

    #[test]
    fn zero_draw_consumes_nothing() {
        let mut ps = PowerSystem::new(quiet(PowerConfig::default())).unwrap();
        ps.set_draw(SimTime(0), "mcu", Rail::Rail3v3, 0.0).unwrap();
        let before = ps.charge_mah();
        ps.integrate(SimTime::from_secs(3600)).unwrap();
        assert_eq!(ps.charge_mah(), before);
        assert_eq!(ps.consumed_mah(), 0.0);
    }

    #[test]
    fn constant_twelve_ma_empties_full_battery_in_275_hours() {
        let cfg = PowerConfig {
            cutoff_v: 2.0,
            rearm_v: 3.0,
            ..quiet(PowerConfig::default())
        };
        let mut ps = PowerSystem::new(cfg).unwrap();
        ps.set_draw(SimTime(0), "load", Rail::Battery, 12.0)
            .unwrap();
        let h = |x: f64| SimTime((x * 3_600_000.0) as u64);
        ps.integrate(h(274.9)).unwrap();
        assert!(ps.charge_mah() > 0.0);
        ps.integrate(h(275.0)).unwrap();
        assert!(ps.charge_mah().abs() < 1e-9);
        assert!(ps.conservation_error_mah().abs() < 1e-9);
    }

    #[test]
    fn cc_charge_from_half_is_capped_by_limit() {
        let cfg = PowerConfig {
            initial_soc: 0.5,
            ..quiet(PowerConfig::default())
        };
        let solar = SolarProfile::new(vec![(SimTime(0), 300.0)]).unwrap();
        let mut ps = PowerSystem::new(cfg).unwrap().with_solar(solar);
        let before = ps.charge_mah();
        let st = ps.integrate(SimTime::from_secs(3600)).unwrap();
        let gained = ps.charge_mah() - before;
        assert!(gained <= 300.0 + 1e-9);
        assert!((gained - 300.0).abs() < 1e-6);
        assert_eq!(st.phase, ChargePhase::CcCharging);
    }

    #[test]
    fn charger_step_cases() {
        let cfg = PowerConfig::default();
        let mut ch = Charger::from_config(&cfg);
        let at = |soc: f64| CellView {
            soc,
            ocv_v: ocv_at(soc),
            resistance_ohm: 0.0,
        };
        assert_eq!(ch.step(500.0, at(0.4), 1000.0), 300.0);
        assert_eq!(ch.step(0.0, at(0.4), 1000.0), 0.0);
        assert_eq!(ch.step(120.0, at(0.4), 1000.0), 120.0);
        let mut full = Charger::from_config(&cfg);
        assert_eq!(full.step(500.0, at(1.0), 1000.0), 0.0);
        assert!(full.is_full());
    }

    #[test]
    fn cv_taper_terminates_at_done_current() {
        let cfg = PowerConfig {
            internal_resistance_mohm: 200.0,
            initial_soc: 0.98,
            ..quiet(PowerConfig::default())
        };
        let solar = SolarProfile::new(vec![(SimTime(0), 500.0)]).unwrap();
        let mut ps = PowerSystem::new(cfg).unwrap().with_solar(solar);
        let mut saw_cv = false;
        for min in 1..=240u64 {
            let st = ps.integrate(SimTime(min * 60_000)).unwrap();
            saw_cv |= st.phase == ChargePhase::CvCharging;
        }
        assert!(saw_cv);
        assert_eq!(ps.phase(), ChargePhase::Full);
        assert!(ps.conservation_error_mah().abs() < 1e-9);
    }

    #[test]
    fn cutoff_notice_fires_once_until_rearmed() {
        let cfg = PowerConfig {
            capacity_mah: 10.0,
            initial_soc: 0.02,
            ..quiet(PowerConfig::default())
        };
        let mut ps = PowerSystem::new(cfg).unwrap();
        ps.set_draw(SimTime(0), "mcu", Rail::Battery, 60.0).unwrap();
        ps.integrate(SimTime::from_secs(60)).unwrap();
        let n = ps.take_notices();
        assert_eq!(n.len(), 1);
        let PowerNotice::Cutoff { at_ms } = n[0] else {
            panic!("expected cutoff")
        };
        // 0.1 mAh above the 1 % point at 60 mA -> 6 s
        assert!((at_ms - 6000.0).abs() < 1.0, "{at_ms}");
        assert_eq!(ps.phase(), ChargePhase::Cutoff);
        assert!(ps.terminal_voltage() <= 2.6);
        // Loads are shed in cutoff.
        let q = ps.charge_mah();
        ps.integrate(SimTime::from_secs(120)).unwrap();
        assert_eq!(ps.charge_mah(), q);
        assert!(ps.take_notices().is_empty());
    }

    #[test]
    fn charging_rearms_after_cutoff() {
        let cfg = PowerConfig {
            capacity_mah: 10.0,
            initial_soc: 0.02,
            ..quiet(PowerConfig::default())
        };
        let solar = SolarProfile::new(vec![(SimTime(0), 0.0), (SimTime(60_000), 5.0)]).unwrap();
        let mut ps = PowerSystem::new(cfg).unwrap().with_solar(solar);
        ps.set_draw(SimTime(0), "mcu", Rail::Battery, 60.0).unwrap();
        ps.integrate(SimTime::from_secs(30)).unwrap();
        assert!(matches!(
            ps.take_notices()[..],
            [PowerNotice::Cutoff { .. }]
        ));
        ps.set_draw(SimTime::from_secs(30), "mcu", Rail::Battery, 0.0)
            .unwrap();
        ps.integrate(SimTime::from_secs(3 * 3600)).unwrap();
        let n = ps.take_notices();
        assert!(matches!(n[..], [PowerNotice::Rearmed { .. }]), "{n:?}");
        assert!(ps.terminal_voltage() >= 3.0);
        assert!(ps.conservation_error_mah().abs() < 1e-9);
    }

    #[test]
    fn pulses_are_suppressed_in_cutoff() {
        let cfg = PowerConfig {
            initial_soc: 0.0,
            ..quiet(PowerConfig::default())
        };
        let mut ps = PowerSystem::new(cfg).unwrap();
        assert_eq!(ps.phase(), ChargePhase::Cutoff);
        let q = ps
            .consume_pulse(SimTime(5), "radio", Rail::Rail3v3, 44.0, 56.576)
            .unwrap();
        assert_eq!(q, 0.0);
    }

    #[test]
    fn solar_profile_rejects_non_increasing_times() {
        assert!(SolarProfile::new(vec![(SimTime(5), 1.0), (SimTime(5), 2.0)]).is_err());
        assert!(SolarProfile::new(vec![(SimTime(5), -1.0)]).is_err());
    }

    #[test]
    fn draw_log_merges_equal_neighbours() {
        let mut ps = PowerSystem::new(quiet(PowerConfig::default())).unwrap();
        ps.set_draw(SimTime(0), "a", Rail::Battery, 5.0).unwrap();
        ps.integrate(SimTime(100)).unwrap();
        ps.integrate(SimTime(200)).unwrap();
        ps.set_draw(SimTime(300), "a", Rail::Battery, 6.0).unwrap();
        ps.integrate(SimTime(400)).unwrap();
        let log = &ps.draw_log().intervals;
        assert_eq!(log.len(), 2);
        assert_eq!(log[0].end_ms, 300.0);
    }
}
