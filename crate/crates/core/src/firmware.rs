//! Datalogger firmware: battery check, init, sampling, storage, uplink and
//! sleep, plus the low-battery hold.
//!
//! A [`Device`] owns its power chain, sensors, storage log and transport.
//! It is advanced only by [`Step`]s delivered by the world driver and
//! answers each step with the follow-up steps to schedule.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lorawan::{
    self, codec, phy::LORAWAN_OVERHEAD_BYTES, IngestOutcome, LoraDevice, LoraError, NetworkServer,
    RadioNetwork, TxCurrentTable,
};
use crate::power::{PowerError, PowerNotice, PowerSystem, Rail};
use crate::sensors::{Channel, EnvironmentTrace, SensorError, SensorModel, SensorState};
use crate::simcore::{RandomStream, SimTime};

pub const HOLD_POLL_MS: u64 = 60_000;
pub const DEFAULT_RETRY_DEPTH: usize = 16;
/// Join-request PHY length.
const JOIN_REQUEST_BYTES: usize = 23;

#[derive(Debug, Error)]
pub enum FirmwareError {
    #[error(transparent)]
    Power(#[from] PowerError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error("storage: {0}")]
    Storage(#[from] io::Error),
    #[error("storage: {0}")]
    Csv(#[from] csv::Error),
    #[error("record seq {got} does not follow {last}")]
    SeqGap { last: u64, got: u64 },
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    WifiHttps,
    Lorawan,
    Offline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    /// Wake-to-wake period is fixed.
    Period,
    /// Sleep for `sleep_ms` after the active window closes.
    AfterActive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub name: String,
    pub transport: TransportKind,
    pub sample_count: u32,
    pub sample_gap_ms: u64,
    pub active_window_ms: u64,
    /// Sleep length for `AfterActive`, wake-to-wake period for `Period`.
    pub sleep_ms: u64,
    pub cadence: Cadence,
    /// Whole-device supply current while awake, as seen at the cell.
    pub active_ma: f64,
    pub sleep_ma: f64,
    pub first_wake_ms: u64,
    pub cutoff_code: u32,
    pub rearm_code: u32,
    pub confirmed_uplinks: bool,
    pub retry_depth: usize,
    pub rtc_drift_ppm: f64,
    pub display_ma: f64,
    /// Overrides the wait between sensor wake and the first sample.
    pub warmup_wait_ms: Option<u64>,
}

impl DeviceProfile {
    /// ESP32-class indoor unit: 25 s awake at 60 mA, then 4 min at 7 mA.
    pub fn indoor(name: &str) -> Self {
        DeviceProfile {
            name: name.to_string(),
            transport: TransportKind::WifiHttps,
            sample_count: 3,
            sample_gap_ms: 2000,
            active_window_ms: 25_000,
            sleep_ms: 240_000,
            cadence: Cadence::AfterActive,
            active_ma: 60.0,
            sleep_ma: 7.0,
            first_wake_ms: 0,
            cutoff_code: 1613,
            rearm_code: 1861,
            confirmed_uplinks: true,
            retry_depth: DEFAULT_RETRY_DEPTH,
            rtc_drift_ppm: 0.0,
            display_ma: 0.0,
            warmup_wait_ms: None,
        }
    }

    /// STM32WL-class outdoor unit on a 15 min cadence.
    pub fn outdoor(name: &str) -> Self {
        DeviceProfile {
            transport: TransportKind::Lorawan,
            active_window_ms: 30_000,
            sleep_ms: 900_000,
            cadence: Cadence::Period,
            active_ma: 70.0,
            sleep_ma: 0.5,
            ..Self::indoor(name)
        }
    }

    pub fn validate(&self) -> Result<(), FirmwareError> {
        let bad = |m: &str| Err(FirmwareError::InvalidProfile(format!("{}: {m}", self.name)));
        if self.sample_count < 1 {
            return bad("sample_count must be >= 1");
        }
        if self.retry_depth < 1 {
            return bad("retry_depth must be >= 1");
        }
        if !(self.active_ma >= 0.0 && self.sleep_ma >= 0.0 && self.display_ma >= 0.0) {
            return bad("currents must be >= 0");
        }
        if self.cycle_ms() == 0 {
            return bad("cycle length must be > 0");
        }
        Ok(())
    }

    /// Expected wake-to-wake spacing.
    pub fn cycle_ms(&self) -> u64 {
        match self.cadence {
            Cadence::Period => self.sleep_ms,
            Cadence::AfterActive => self.active_window_ms + self.sleep_ms,
        }
    }

    pub fn rtc_timestamp(&self, at: SimTime) -> u64 {
        let t = at.as_millis() as f64;
        (t + (t * self.rtc_drift_ppm / 1e6).round()).max(0.0) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirmwarePhase {
    Boot,
    BatteryCheck,
    Init,
    Sampling,
    Storing,
    Uplinking,
    Sleeping,
    LowBatteryHold,
}

impl FirmwarePhase {
    pub fn as_str(self) -> &'static str {
        match self {
            FirmwarePhase::Boot => "boot",
            FirmwarePhase::BatteryCheck => "battery_check",
            FirmwarePhase::Init => "init",
            FirmwarePhase::Sampling => "sampling",
            FirmwarePhase::Storing => "storing",
            FirmwarePhase::Uplinking => "uplinking",
            FirmwarePhase::Sleeping => "sleeping",
            FirmwarePhase::LowBatteryHold => "low_battery_hold",
        }
    }

    /// The flowchart edge that follows `self` on the path toward the hold.
    fn toward_hold(self) -> Option<FirmwarePhase> {
        use FirmwarePhase::*;
        match self {
            Boot | Sleeping | LowBatteryHold => Some(BatteryCheck),
            BatteryCheck => Some(LowBatteryHold),
            Init => Some(Sampling),
            Sampling => Some(Storing),
            Storing => Some(Uplinking),
            Uplinking => Some(Sleeping),
        }
    }
}

/// Flowchart edges. A power loss may return any phase to `boot`; that edge
/// is checked separately through [`PhaseChange::power_reset`].
pub fn is_legal_transition(from: FirmwarePhase, to: FirmwarePhase) -> bool {
    use FirmwarePhase::*;
    matches!(
        (from, to),
        (Boot, BatteryCheck)
            | (BatteryCheck, Init)
            | (BatteryCheck, LowBatteryHold)
            | (Init, Sampling)
            | (Sampling, Storing)
            | (Storing, Uplinking)
            | (Uplinking, Sleeping)
            | (Sleeping, BatteryCheck)
            | (LowBatteryHold, BatteryCheck)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseChange {
    pub at: SimTime,
    pub from: FirmwarePhase,
    pub to: FirmwarePhase,
    pub power_reset: bool,
}

/// Returns the first change that is not a flowchart edge.
pub fn first_illegal(log: &[PhaseChange]) -> Option<&PhaseChange> {
    log.iter().find(|c| {
        if c.power_reset {
            c.to != FirmwarePhase::Boot
        } else {
            !is_legal_transition(c.from, c.to)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub timestamp_ms: u64,
    pub values: Vec<(Channel, Option<f64>)>,
    pub battery_code: u32,
}

impl LogRecord {
    pub fn is_gap(&self) -> bool {
        self.values.iter().all(|(_, v)| v.is_none())
    }
}

/// Median of the finite values; mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub const STORAGE_HEADER: [&str; 5] = ["seq", "timestamp_ms", "channel", "value", "battery_code"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreAck {
    Written,
    Dropped,
}

/// Append-only CSV storage log, flushed after every record.
pub struct Storage {
    writer: Option<csv::Writer<Box<dyn Write + Send>>>,
    degraded: bool,
    last_seq: u64,
    rows: u64,
    dropped: u64,
}

impl std::fmt::Debug for Storage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Storage")
            .field("degraded", &self.degraded)
            .field("last_seq", &self.last_seq)
            .field("rows", &self.rows)
            .field("dropped", &self.dropped)
            .finish()
    }
}

impl Storage {
    pub fn new(out: Box<dyn Write + Send>) -> Result<Self, FirmwareError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(STORAGE_HEADER)?;
        w.flush()?;
        Ok(Storage {
            writer: Some(w),
            degraded: false,
            last_seq: 0,
            rows: 0,
            dropped: 0,
        })
    }

    pub fn create(path: &Path) -> Result<Self, FirmwareError> {
        Self::new(Box::new(BufWriter::new(File::create(path)?)))
    }

    pub fn discard() -> Self {
        Self::new(Box::new(io::sink())).expect("sink never fails")
    }

    /// Storage whose initialisation failed; records are counted and dropped.
    pub fn degraded() -> Self {
        Storage {
            writer: None,
            degraded: true,
            last_seq: 0,
            rows: 0,
            dropped: 0,
        }
    }

    pub fn is_degraded(&self) -> bool {
        self.degraded
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn store(&mut self, record: &LogRecord) -> Result<StoreAck, FirmwareError> {
        if record.seq != self.last_seq + 1 {
            return Err(FirmwareError::SeqGap {
                last: self.last_seq,
                got: record.seq,
            });
        }
        self.last_seq = record.seq;
        let Some(w) = self.writer.as_mut() else {
            self.dropped += 1;
            return Ok(StoreAck::Dropped);
        };
        for (channel, value) in &record.values {
            w.write_record([
                record.seq.to_string(),
                record.timestamp_ms.to_string(),
                channel.as_str().to_string(),
                value.map(|v| format!("{v:.2}")).unwrap_or_default(),
                record.battery_code.to_string(),
            ])?;
            self.rows += 1;
        }
        w.flush()?;
        Ok(StoreAck::Written)
    }
}

/// Bounded FIFO of records awaiting delivery; drops the oldest when full.
#[derive(Debug, Clone)]
pub struct RetryQueue {
    depth: usize,
    items: VecDeque<LogRecord>,
    dropped: u64,
}

impl RetryQueue {
    pub fn new(depth: usize) -> Self {
        RetryQueue {
            depth: depth.max(1),
            items: VecDeque::new(),
            dropped: 0,
        }
    }

    pub fn push(&mut self, r: LogRecord) {
        if self.items.len() == self.depth {
            self.items.pop_front();
            self.dropped += 1;
        }
        self.items.push_back(r);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    fn drain(&mut self) -> Vec<LogRecord> {
        self.items.drain(..).collect()
    }

    fn clear(&mut self) {
        self.items.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WifiConfig {
    pub latency_ms: u64,
    pub success_probability: f64,
    /// Extra supply current for the duration of the transaction.
    pub current_ma: f64,
}

impl Default for WifiConfig {
    fn default() -> Self {
        WifiConfig {
            latency_ms: 2000,
            success_probability: 1.0,
            current_ma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpsRecord {
    pub device: String,
    pub seq: u64,
    pub timestamp_ms: u64,
    pub received_ms: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Transport {
    Offline,
    Wifi {
        cfg: WifiConfig,
        rng: RandomStream,
    },
    Lora {
        dev: Box<LoraDevice>,
        tx: TxCurrentTable,
    },
}

impl Transport {
    pub fn kind(&self) -> TransportKind {
        match self {
            Transport::Offline => TransportKind::Offline,
            Transport::Wifi { .. } => TransportKind::WifiHttps,
            Transport::Lora { .. } => TransportKind::Lorawan,
        }
    }
}

/// Shared infrastructure the devices talk to.
#[derive(Debug, Default)]
pub struct Backhaul {
    pub network: RadioNetwork,
    pub server: NetworkServer,
    pub https: Vec<HttpsRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportOutcome {
    Delivered,
    NotDelivered,
    /// Unconfirmed frame handed to the radio; delivery is unknown.
    Sent,
    NotJoined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityKind {
    Sample,
    RadioTx,
    JoinRequest,
    WifiTx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activity {
    pub at: SimTime,
    pub kind: ActivityKind,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceStats {
    pub wakes: u64,
    pub records: u64,
    pub gap_records: u64,
    pub uplinks: u64,
    pub delivered: u64,
    pub join_attempts: u64,
    pub joins: u64,
    pub holds: u64,
    pub resets: u64,
    pub sample_retries: u64,
}

/// Work items a device schedules for itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Step {
    Wake,
    SensorsReady,
    Sample(u32),
    SampleRetry { sample: u32, sensor: u8 },
    SampleDone { sensor: u8 },
    GoSleep,
    HoldPoll,
    JoinRetry,
    PowerLoss,
}

impl Step {
    /// Steps that survive a change of generation.
    fn is_external(self) -> bool {
        matches!(self, Step::PowerLoss)
    }
}

pub struct Device {
    pub profile: DeviceProfile,
    pub power: PowerSystem,
    sensors: Vec<SensorModel>,
    traces: BTreeMap<Channel, EnvironmentTrace>,
    channels: Vec<Channel>,
    transport: Transport,
    storage: Storage,
    retry: RetryQueue,
    phase: FirmwarePhase,
    transitions: Vec<PhaseChange>,
    generation: u32,
    cycle_start: SimTime,
    readings: BTreeMap<Channel, Vec<f64>>,
    retried: BTreeSet<(u32, u8)>,
    outstanding: u32,
    awaiting_rearm: bool,
    join_retry_pending: bool,
    next_seq: u64,
    stats: DeviceStats,
    activity: Vec<Activity>,
    notices: Vec<PowerNotice>,
}

impl std::fmt::Debug for Device {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Device")
            .field("name", &self.profile.name)
            .field("phase", &self.phase)
            .field("stats", &self.stats)
            .finish()
    }
}

impl Device {
    pub fn new(
        profile: DeviceProfile,
        power: PowerSystem,
        sensors: Vec<SensorModel>,
        traces: Vec<EnvironmentTrace>,
        transport: Transport,
        storage: Storage,
    ) -> Result<Self, FirmwareError> {
        profile.validate()?;
        let channels: Vec<Channel> = Channel::ALL
            .iter()
            .copied()
            .filter(|c| sensors.iter().any(|s| s.kind().channels().contains(c)))
            .collect();
        let traces = traces.into_iter().map(|t| (t.channel(), t)).collect();
        let retry = RetryQueue::new(profile.retry_depth);
        Ok(Device {
            profile,
            power,
            sensors,
            traces,
            channels,
            transport,
            storage,
            retry,
            phase: FirmwarePhase::Boot,
            transitions: Vec::new(),
            generation: 0,
            cycle_start: SimTime::ZERO,
            readings: BTreeMap::new(),
            retried: BTreeSet::new(),
            outstanding: 0,
            awaiting_rearm: false,
            join_retry_pending: false,
            next_seq: 1,
            stats: DeviceStats::default(),
            activity: Vec::new(),
            notices: Vec::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.profile.name
    }

    pub fn phase(&self) -> FirmwarePhase {
        self.phase
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub fn transitions(&self) -> &[PhaseChange] {
        &self.transitions
    }

    pub fn stats(&self) -> DeviceStats {
        self.stats
    }

    pub fn activity(&self) -> &[Activity] {
        &self.activity
    }

    pub fn power_notices(&self) -> &[PowerNotice] {
        &self.notices
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn retry_queue(&self) -> &RetryQueue {
        &self.retry
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn transport(&self) -> &Transport {
        &self.transport
    }

    pub fn lora(&self) -> Option<&LoraDevice> {
        match &self.transport {
            Transport::Lora { dev, .. } => Some(dev),
            _ => None,
        }
    }

    pub fn sensor_states(&self) -> Vec<SensorState> {
        self.sensors.iter().map(|s| s.state()).collect()
    }

    /// Whether a step scheduled under `generation` is still current.
    pub fn accepts(&self, step: Step, generation: u32) -> bool {
        step.is_external() || generation == self.generation
    }

    fn goto(&mut self, at: SimTime, to: FirmwarePhase) {
        self.transitions.push(PhaseChange {
            at,
            from: self.phase,
            to,
            power_reset: false,
        });
        self.phase = to;
    }

    /// Re-derives every draw from the sensor states and the MCU mode.
    fn refresh_draws(&mut self, now: SimTime, awake: bool) -> Result<(), FirmwareError> {
        let cfg = self.power.config().clone();
        let mut sensor_cell_ma = 0.0;
        for (i, s) in self.sensors.iter().enumerate() {
            let rail = s.kind().rail();
            sensor_cell_ma += s.current_ma() / cfg.rail(rail).efficiency;
            self.power.set_draw(
                now,
                &format!("sensor{i}:{}", s.kind()),
                rail,
                s.current_ma(),
            )?;
        }
        let target = if awake {
            self.profile.active_ma + self.profile.display_ma
        } else {
            self.profile.sleep_ma
        };
        let board = (target - cfg.quiescent_ma - sensor_cell_ma).max(0.0);
        self.power.set_draw(now, "board", Rail::Battery, board)?;
        Ok(())
    }

    fn collect_notices(&mut self) -> bool {
        let mut cut = false;
        for n in self.power.take_notices() {
            if matches!(n, PowerNotice::Cutoff { .. }) {
                cut = true;
            }
            self.notices.push(n);
        }
        cut
    }

    /// Brings the power chain up to `now` and reports whether the device
    /// must drop into the low-battery hold.
    fn must_hold(&mut self, now: SimTime) -> Result<bool, FirmwareError> {
        self.power.integrate(now)?;
        let cut = self.collect_notices();
        if cut {
            self.awaiting_rearm = true;
        }
        Ok(cut || self.power.in_cutoff())
    }

    /// Walks the flowchart to the hold without doing the skipped work.
    fn enter_hold(&mut self, now: SimTime) -> Result<Vec<(SimTime, Step)>, FirmwareError> {
        while self.phase != FirmwarePhase::LowBatteryHold {
            let next = self
                .phase
                .toward_hold()
                .expect("every phase reaches the hold");
            self.goto(now, next);
        }
        self.generation += 1;
        self.awaiting_rearm = true;
        self.join_retry_pending = false;
        self.outstanding = 0;
        self.readings.clear();
        self.retried.clear();
        self.stats.holds += 1;
        for s in &mut self.sensors {
            s.sleep_sensor(now);
        }
        self.refresh_draws(now, false)?;
        Ok(vec![(now.plus(HOLD_POLL_MS), Step::HoldPoll)])
    }

    /// Dispatches one step; returns the steps to schedule next.
    pub fn handle(
        &mut self,
        step: Step,
        now: SimTime,
        bh: &mut Backhaul,
    ) -> Result<Vec<(SimTime, Step)>, FirmwareError> {
        if step == Step::PowerLoss {
            return self.power_loss(now);
        }
        if self.phase == FirmwarePhase::LowBatteryHold {
            return match step {
                Step::HoldPoll => self.hold_poll(now),
                _ => Ok(Vec::new()),
            };
        }
        if self.must_hold(now)? {
            return self.enter_hold(now);
        }
        match step {
            Step::Wake => self.begin_cycle(now),
            Step::SensorsReady => self.sensors_ready(now),
            Step::Sample(k) => self.sample(now, k, None),
            Step::SampleRetry { sample, sensor } => self.sample(now, sample, Some(sensor)),
            Step::SampleDone { sensor } => self.sample_done(now, sensor, bh),
            Step::GoSleep => self.go_sleep(now),
            Step::HoldPoll => Ok(Vec::new()),
            Step::JoinRetry => self.join_retry(now, bh),
            Step::PowerLoss => unreachable!(),
        }
    }

    fn power_loss(&mut self, now: SimTime) -> Result<Vec<(SimTime, Step)>, FirmwareError> {
        self.transitions.push(PhaseChange {
            at: now,
            from: self.phase,
            to: FirmwarePhase::Boot,
            power_reset: true,
        });
        self.phase = FirmwarePhase::Boot;
        self.generation += 1;
        self.stats.resets += 1;
        self.outstanding = 0;
        self.readings.clear();
        self.retried.clear();
        self.retry.clear();
        self.join_retry_pending = false;
        for s in &mut self.sensors {
            s.power_off();
        }
        if let Transport::Lora { dev, .. } = &mut self.transport {
            dev.reset(now)?;
        }
        self.refresh_draws(now, false)?;
        Ok(vec![(now, Step::Wake)])
    }

    fn begin_cycle(&mut self, now: SimTime) -> Result<Vec<(SimTime, Step)>, FirmwareError> {
        self.goto(now, FirmwarePhase::BatteryCheck);
        self.stats.wakes += 1;
        self.cycle_start = now;
        self.refresh_draws(now, true)?;
        let code = self.power.read_battery_code();
        if code <= self.profile.cutoff_code || self.awaiting_rearm {
            return self.enter_hold(now);
        }
        self.goto(now, FirmwarePhase::Init);
        self.readings.clear();
        self.retried.clear();
        self.outstanding = 0;
        let mut ready = now;
        for s in &mut self.sensors {
            s.wake(now)?;
            ready = ready.max(s.ready_at());
        }
        if let Some(w) = self.profile.warmup_wait_ms {
            ready = now.plus(w);
        }
        self.refresh_draws(now, true)?;
        Ok(vec![(ready, Step::SensorsReady)])
    }

    fn sensors_ready(&mut self, now: SimTime) -> Result<Vec<(SimTime, Step)>, FirmwareError> {
        self.goto(now, FirmwarePhase::Sampling);
        let n = self.profile.sample_count;
        self.outstanding = n;
        Ok((0..n)
            .map(|k| {
                (
                    now.plus(k as u64 * self.profile.sample_gap_ms),
                    Step::Sample(k),
                )
            })
            .collect())
    }

    fn sample(
        &mut self,
        now: SimTime,
        k: u32,
        only: Option<u8>,
    ) -> Result<Vec<(SimTime, Step)>, FirmwareError> {
        self.outstanding -= 1;
        let mut next = Vec::new();
        let mut took = false;
        for i in 0..self.sensors.len() {
            if only.is_some_and(|o| o as usize != i) {
                continue;
            }
            let traces: Vec<&EnvironmentTrace> = self.sensors[i]
                .kind()
                .channels()
                .iter()
                .filter_map(|c| self.traces.get(c))
                .collect();
            match self.sensors[i].sample(&traces, now) {
                Ok(ms) => {
                    took = true;
                    for m in ms {
                        self.readings.entry(m.channel).or_default().push(m.value);
                    }
                    let done = now.plus(self.sensors[i].params().sample_ms);
                    next.push((done, Step::SampleDone { sensor: i as u8 }));
                    self.outstanding += 1;
                }
                Err(SensorError::NotReady { .. }) if self.retried.insert((k, i as u8)) => {
                    self.stats.sample_retries += 1;
                    let at = self.sensors[i].ready_at().max(now.plus(1));
                    next.push((
                        at,
                        Step::SampleRetry {
                            sample: k,
                            sensor: i as u8,
                        },
                    ));
                    self.outstanding += 1;
                }
                Err(_) => {}
            }
        }
        if took {
            self.activity.push(Activity {
                at: now,
                kind: ActivityKind::Sample,
            });
            self.refresh_draws(now, true)?;
        }
        Ok(next)
    }

    fn sample_done(
        &mut self,
        now: SimTime,
        sensor: u8,
        bh: &mut Backhaul,
    ) -> Result<Vec<(SimTime, Step)>, FirmwareError> {
        self.outstanding -= 1;
        if let Some(s) = self.sensors.get_mut(sensor as usize) {
            s.finish_sample();
        }
        self.refresh_draws(now, true)?;
        if self.outstanding > 0 {
            return Ok(Vec::new());
        }
        self.store_and_uplink(now, bh)
    }

    fn store_and_uplink(
        &mut self,
        now: SimTime,
        bh: &mut Backhaul,
    ) -> Result<Vec<(SimTime, Step)>, FirmwareError> {
        self.goto(now, FirmwarePhase::Storing);
        let values: Vec<(Channel, Option<f64>)> = self
            .channels
            .iter()
            .map(|c| (*c, self.readings.get(c).and_then(|v| median(v))))
            .collect();
        let record = LogRecord {
            seq: self.next_seq,
            timestamp_ms: self.profile.rtc_timestamp(now),
            values,
            battery_code: self.power.read_battery_code(),
        };
        self.next_seq += 1;
        self.stats.records += 1;
        if record.is_gap() {
            self.stats.gap_records += 1;
        }
        self.storage.store(&record)?;
        self.readings.clear();

        self.goto(now, FirmwarePhase::Uplinking);
        let mut next = Vec::new();
        if !record.is_gap() || !self.retry.is_empty() {
            let mut batch = self.retry.drain();
            if !record.is_gap() {
                batch.push(record);
            }
            for r in batch {
                let outcome = self.uplink(now, &r, bh, &mut next)?;
                if self.collect_notices() {
                    self.awaiting_rearm = true;
                }
                match outcome {
                    TransportOutcome::Delivered | TransportOutcome::Sent => {}
                    TransportOutcome::NotDelivered | TransportOutcome::NotJoined => {
                        self.retry.push(r)
                    }
                }
                if self.power.in_cutoff() || self.awaiting_rearm {
                    return self.enter_hold(now);
                }
            }
        }
        let close = self
            .cycle_start
            .plus(self.profile.active_window_ms)
            .max(now);
        next.push((close, Step::GoSleep));
        Ok(next)
    }

    fn try_join(&mut self, now: SimTime, bh: &mut Backhaul) -> Result<bool, FirmwareError> {
        let Transport::Lora { dev, tx } = &mut self.transport else {
            return Ok(false);
        };
        self.stats.join_attempts += 1;
        self.activity.push(Activity {
            at: now,
            kind: ActivityKind::JoinRequest,
        });
        let airtime = lorawan::airtime_ms(&dev.radio, JOIN_REQUEST_BYTES);
        let ma = tx.current_ma(dev.radio.tx_power_dbm);
        self.power
            .consume_pulse(now, "radio", Rail::Rail3v3, ma, airtime)?;
        let eui = dev.identity.dev_eui;
        if bh.network.transmit_join(&eui, dev.radio.tx_power_dbm, now) {
            let session = bh.server.join(eui, now)?;
            dev.accept_join(session);
            self.stats.joins += 1;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    fn schedule_join_retry(&mut self, now: SimTime, next: &mut Vec<(SimTime, Step)>) {
        if self.join_retry_pending {
            return;
        }
        if let Transport::Lora { dev, .. } = &mut self.transport {
            let wait = dev.join_failed();
            self.join_retry_pending = true;
            next.push((now.plus(wait), Step::JoinRetry));
        }
    }

    fn join_retry(
        &mut self,
        now: SimTime,
        bh: &mut Backhaul,
    ) -> Result<Vec<(SimTime, Step)>, FirmwareError> {
        self.join_retry_pending = false;
        let joined = self.lora().is_some_and(|d| d.is_joined());
        let mut next = Vec::new();
        if !joined && !self.try_join(now, bh)? {
            self.schedule_join_retry(now, &mut next);
        }
        Ok(next)
    }

    /// Sends one record over the configured transport.
    pub fn uplink(
        &mut self,
        now: SimTime,
        record: &LogRecord,
        bh: &mut Backhaul,
        next: &mut Vec<(SimTime, Step)>,
    ) -> Result<TransportOutcome, FirmwareError> {
        let payload = codec::encode(&self.channels, &record.values);
        let unjoined = self.lora().is_some_and(|d| !d.is_joined());
        if unjoined && !self.try_join(now, bh)? {
            self.schedule_join_retry(now, next);
            return Ok(TransportOutcome::NotJoined);
        }
        self.stats.uplinks += 1;
        let outcome = match &mut self.transport {
            Transport::Offline => TransportOutcome::Delivered,
            Transport::Wifi { cfg, rng } => {
                self.activity.push(Activity {
                    at: now,
                    kind: ActivityKind::WifiTx,
                });
                self.power.consume_pulse(
                    now,
                    "wifi",
                    Rail::Rail3v3,
                    cfg.current_ma,
                    cfg.latency_ms as f64,
                )?;
                if rng.bernoulli(cfg.success_probability) {
                    bh.https.push(HttpsRecord {
                        device: self.profile.name.clone(),
                        seq: record.seq,
                        timestamp_ms: record.timestamp_ms,
                        received_ms: now.as_millis() + cfg.latency_ms,
                        payload,
                    });
                    TransportOutcome::Delivered
                } else {
                    TransportOutcome::NotDelivered
                }
            }
            Transport::Lora { dev, tx } => {
                let frame = dev.build_uplink(payload, now)?;
                self.activity.push(Activity {
                    at: now,
                    kind: ActivityKind::RadioTx,
                });
                let airtime =
                    lorawan::airtime_ms(&frame.radio, frame.payload.len() + LORAWAN_OVERHEAD_BYTES);
                let ma = tx.current_ma(frame.radio.tx_power_dbm);
                self.power
                    .consume_pulse(now, "radio", Rail::Rail3v3, ma, airtime)?;
                let eui = dev.identity.dev_eui;
                let snrs = bh.network.transmit(&eui, &frame);
                let result = bh.server.ingest(&frame, &snrs);
                let stored = match result {
                    IngestOutcome::Accepted { adr } => {
                        if let Some(cmd) = adr {
                            if dev.adr_enabled {
                                dev.apply_adr(cmd);
                            }
                        }
                        true
                    }
                    IngestOutcome::Duplicate => true,
                    _ => false,
                };
                if !self.profile.confirmed_uplinks {
                    TransportOutcome::Sent
                } else if stored {
                    TransportOutcome::Delivered
                } else {
                    TransportOutcome::NotDelivered
                }
            }
        };
        if outcome == TransportOutcome::Delivered {
            self.stats.delivered += 1;
        }
        Ok(outcome)
    }

    fn go_sleep(&mut self, now: SimTime) -> Result<Vec<(SimTime, Step)>, FirmwareError> {
        self.goto(now, FirmwarePhase::Sleeping);
        for s in &mut self.sensors {
            s.sleep_sensor(now);
        }
        self.refresh_draws(now, false)?;
        let wake = match self.profile.cadence {
            Cadence::Period => self.cycle_start.plus(self.profile.sleep_ms),
            Cadence::AfterActive => now.plus(self.profile.sleep_ms),
        };
        Ok(vec![(wake.max(now.plus(1)), Step::Wake)])
    }

    fn hold_poll(&mut self, now: SimTime) -> Result<Vec<(SimTime, Step)>, FirmwareError> {
        self.power.integrate(now)?;
        self.collect_notices();
        let code = self.power.read_battery_code();
        if code >= self.profile.rearm_code && !self.power.in_cutoff() {
            self.awaiting_rearm = false;
            self.generation += 1;
            return self.begin_cycle(now);
        }
        Ok(vec![(now.plus(HOLD_POLL_MS), Step::HoldPoll)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::power::PowerConfig;
    use crate::sensors::SensorKind;

    fn constant(channel: Channel, v: f64) -> EnvironmentTrace {
        EnvironmentTrace::new(channel, vec![(SimTime(0), v), (SimTime(1_000_000_000), v)]).unwrap()
    }

    fn offline_device(kinds: &[SensorKind], soc: f64) -> Device {
        let power = PowerSystem::new(PowerConfig {
            initial_soc: soc,
            ..Default::default()
        })
        .unwrap();
        let sensors = kinds
            .iter()
            .map(|k| SensorModel::with_defaults(*k))
            .collect();
        let traces = Channel::ALL
            .iter()
            .map(|c| constant(*c, 500.0_f64.min(c.range().1)))
            .collect();
        let mut p = DeviceProfile::indoor("dev");
        p.transport = TransportKind::Offline;
        Device::new(
            p,
            power,
            sensors,
            traces,
            Transport::Offline,
            Storage::discard(),
        )
        .unwrap()
    }

    /// Runs a device's own schedule in isolation up to `end`.
    fn drive(dev: &mut Device, end: u64) {
        let mut bh = Backhaul::default();
        let mut queue: Vec<(SimTime, u64, Step, u32)> = vec![(SimTime::ZERO, 0, Step::Wake, 0)];
        let mut seq = 1;
        while let Some(i) = (0..queue.len()).min_by_key(|&i| (queue[i].0, queue[i].1)) {
            let (at, _, step, gen) = queue.swap_remove(i);
            if at.as_millis() >= end {
                break;
            }
            if !dev.accepts(step, gen) {
                continue;
            }
            for (t, s) in dev.handle(step, at, &mut bh).unwrap() {
                queue.push((t, seq, s, dev.generation()));
                seq += 1;
            }
        }
    }

    #[test]
    fn median_rejects_a_transient() {
        assert_eq!(median(&[10.0, 1000.0, 12.0]), Some(12.0));
        assert_eq!(median(&[500.0; 3]), Some(500.0));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn transition_table() {
        use FirmwarePhase::*;
        assert!(is_legal_transition(Boot, BatteryCheck));
        assert!(is_legal_transition(LowBatteryHold, BatteryCheck));
        assert!(!is_legal_transition(Sleeping, Sampling));
        assert!(!is_legal_transition(LowBatteryHold, Init));
    }

    #[test]
    fn healthy_battery_proceeds_to_init() {
        let mut d = offline_device(&[SensorKind::Scd30], 0.5);
        let mut bh = Backhaul::default();
        d.handle(Step::Wake, SimTime::ZERO, &mut bh).unwrap();
        assert_eq!(d.phase(), FirmwarePhase::Init);
    }

    #[test]
    fn flat_battery_holds_with_sensors_asleep() {
        let mut d = offline_device(&[SensorKind::Scd30], 0.0);
        let mut bh = Backhaul::default();
        let next = d.handle(Step::Wake, SimTime::ZERO, &mut bh).unwrap();
        assert_eq!(d.phase(), FirmwarePhase::LowBatteryHold);
        assert_eq!(next, vec![(SimTime(HOLD_POLL_MS), Step::HoldPoll)]);
        assert!(d.sensor_states().iter().all(|s| *s != SensorState::Warming));
    }

    #[test]
    fn exactly_cutoff_code_holds() {
        // cell cutoff set lower so only the firmware's code comparison acts
        let cfg = PowerConfig {
            initial_soc: crate::power::soc_at(2.6004),
            cutoff_v: 2.55,
            ..Default::default()
        };
        let mut d = offline_device(&[SensorKind::Sht31], 1.0);
        d.power = PowerSystem::new(cfg.clone()).unwrap();
        assert_eq!(d.power.read_battery_code(), cfg.code_for_voltage(2.6));
        assert_eq!(d.power.read_battery_code(), 1613);
        let mut bh = Backhaul::default();
        d.handle(Step::Wake, SimTime::ZERO, &mut bh).unwrap();
        assert_eq!(d.phase(), FirmwarePhase::LowBatteryHold);
    }

    #[test]
    fn one_cycle_samples_three_times_four_seconds_apart() {
        let mut d = offline_device(&[SensorKind::Scd30], 1.0);
        drive(&mut d, 30_000);
        let t: Vec<u64> = d.activity().iter().map(|a| a.at.as_millis()).collect();
        assert_eq!(t, vec![2000, 4000, 6000]);
        assert_eq!(d.stats().records, 1);
        assert_eq!(d.phase(), FirmwarePhase::Sleeping);
        assert!(first_illegal(d.transitions()).is_none());
    }

    #[test]
    fn indoor_cadence_is_265_seconds() {
        let mut d = offline_device(&[SensorKind::Sht31], 1.0);
        drive(&mut d, 265_000 * 10);
        assert_eq!(d.stats().wakes, 10);
        assert_eq!(d.stats().records, 10);
        assert_eq!(d.stats().delivered, 10);
    }

    #[test]
    fn storage_rows_and_degraded_drop() {
        let buf = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        struct Shared(std::sync::Arc<std::sync::Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, b: &[u8]) -> io::Result<usize> {
                self.0.lock().unwrap().extend_from_slice(b);
                Ok(b.len())
            }
            fn flush(&mut self) -> io::Result<()> {
                Ok(())
            }
        }
        let mut s = Storage::new(Box::new(Shared(buf.clone()))).unwrap();
        let rec = |seq| LogRecord {
            seq,
            timestamp_ms: seq * 10,
            values: vec![(Channel::Co2Ppm, Some(415.0))],
            battery_code: 2296,
        };
        assert_eq!(s.store(&rec(1)).unwrap(), StoreAck::Written);
        s.store(&rec(2)).unwrap();
        let text = String::from_utf8(buf.lock().unwrap().clone()).unwrap();
        assert_eq!(
            text,
            "seq,timestamp_ms,channel,value,battery_code\n1,10,co2_ppm,415.00,2296\n2,20,co2_ppm,415.00,2296\n"
        );
        assert!(matches!(
            s.store(&rec(5)),
            Err(FirmwareError::SeqGap { .. })
        ));

        let mut bad = Storage::degraded();
        assert_eq!(bad.store(&rec(1)).unwrap(), StoreAck::Dropped);
        assert_eq!(bad.dropped(), 1);
        assert_eq!(bad.rows(), 0);
    }

    #[test]
    fn retry_queue_drops_oldest() {
        let mut q = RetryQueue::new(16);
        for seq in 1..=20 {
            q.push(LogRecord {
                seq,
                timestamp_ms: 0,
                values: vec![],
                battery_code: 0,
            });
        }
        assert_eq!(q.len(), 16);
        assert_eq!(q.dropped(), 4);
        assert_eq!(q.drain()[0].seq, 5);
    }

    #[test]
    fn offline_uplink_is_free() {
        let mut d = offline_device(&[SensorKind::Sht31], 1.0);
        let mut bh = Backhaul::default();
        let before = d.power.consumed_mah();
        let r = LogRecord {
            seq: 1,
            timestamp_ms: 0,
            values: vec![(Channel::TempC, Some(20.0))],
            battery_code: 0,
        };
        let out = d
            .uplink(SimTime::ZERO, &r, &mut bh, &mut Vec::new())
            .unwrap();
        assert_eq!(out, TransportOutcome::Delivered);
        assert_eq!(d.power.consumed_mah(), before);
    }

    #[test]
    fn rtc_drift_knob() {
        let mut p = DeviceProfile::indoor("x");
        assert_eq!(p.rtc_timestamp(SimTime(1_000_000)), 1_000_000);
        p.rtc_drift_ppm = 20.0;
        assert_eq!(p.rtc_timestamp(SimTime(1_000_000)), 1_000_020);
    }
}
