//! SPS30 / SCD30 / SHT31 driver models.
//!
//! Each sensor walks `off -> warming -> idle <-> sampling` and
//! `idle <-> sleep`, and reports the supply current of its present state so
//! the firmware can forward it to the power chain.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::power::Rail;
use crate::simcore::{RandomStream, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Pm25Ugm3,
    Co2Ppm,
    TempC,
    RhPct,
}

impl Channel {
    pub const ALL: [Channel; 4] = [
        Channel::Pm25Ugm3,
        Channel::Co2Ppm,
        Channel::TempC,
        Channel::RhPct,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Pm25Ugm3 => "pm25_ugm3",
            Channel::Co2Ppm => "co2_ppm",
            Channel::TempC => "temp_c",
            Channel::RhPct => "rh_pct",
        }
    }

    /// Physical range a measurement is clamped to.
    pub fn range(self) -> (f64, f64) {
        match self {
            Channel::Pm25Ugm3 => (0.0, f64::INFINITY),
            Channel::Co2Ppm => (0.0, 40_000.0),
            Channel::TempC => (-40.0, 125.0),
            Channel::RhPct => (0.0, 100.0),
        }
    }

    pub fn clamp(self, v: f64) -> f64 {
        let (lo, hi) = self.range();
        v.clamp(lo, hi)
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = SensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Channel::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| SensorError::UnknownChannel(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    Sps30,
    Scd30,
    Sht31,
}

impl SensorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SensorKind::Sps30 => "sps30",
            SensorKind::Scd30 => "scd30",
            SensorKind::Sht31 => "sht31",
        }
    }

    pub fn channels(self) -> &'static [Channel] {
        match self {
            SensorKind::Sps30 => &[Channel::Pm25Ugm3],
            SensorKind::Scd30 => &[Channel::Co2Ppm],
            SensorKind::Sht31 => &[Channel::TempC, Channel::RhPct],
        }
    }

    pub fn rail(self) -> Rail {
        match self {
            SensorKind::Sps30 => Rail::Rail5v,
            SensorKind::Scd30 | SensorKind::Sht31 => Rail::Rail3v3,
        }
    }

    pub fn default_params(self) -> SensorParams {
        match self {
            SensorKind::Sps30 => SensorParams {
                warmup_ms: 8000,
                sample_ms: 100,
                active_ma: 60.0,
                sleep_ma: 0.05,
                peak_ma: 80.0,
                noise_sd: 0.0,
            },
            SensorKind::Scd30 => SensorParams {
                warmup_ms: 2000,
                sample_ms: 100,
                active_ma: 19.0,
                sleep_ma: 0.5,
                peak_ma: 75.0,
                noise_sd: 0.0,
            },
            SensorKind::Sht31 => SensorParams {
                warmup_ms: 15,
                sample_ms: 15,
                active_ma: 0.8,
                sleep_ma: 0.002,
                peak_ma: 1.5,
                noise_sd: 0.0,
            },
        }
    }
}

impl FromStr for SensorKind {
    type Err = SensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [SensorKind::Sps30, SensorKind::Scd30, SensorKind::Sht31]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SensorError::UnknownSensor(s.to_string()))
    }
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorState {
    Off,
    Sleep,
    Warming,
    Sampling,
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorParams {
    pub warmup_ms: u64,
    /// How long one measurement holds the peak current.
    pub sample_ms: u64,
    pub active_ma: f64,
    pub sleep_ma: f64,
    pub peak_ma: f64,
    /// Gaussian noise standard deviation in channel units.
    pub noise_sd: f64,
}

impl SensorParams {
    pub fn validate(&self) -> Result<(), SensorError> {
        if !(self.sleep_ma >= 0.0
            && self.sleep_ma < self.active_ma
            && self.active_ma <= self.peak_ma)
        {
            return Err(SensorError::InvalidParams(format!(
                "need 0 <= sleep_ma < active_ma <= peak_ma, got {} / {} / {}",
                self.sleep_ma, self.active_ma, self.peak_ma
            )));
        }
        if self.noise_sd < 0.0 {
            return Err(SensorError::InvalidParams("noise_sd must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SensorError {
    #[error("{kind} not ready ({state:?})")]
    NotReady {
        kind: SensorKind,
        state: SensorState,
    },
    #[error("{kind}: wake requested while sampling")]
    ProtocolMisuse { kind: SensorKind },
    #[error("{channel}: {at} lies outside the trace span")]
    OutOfTrace { channel: Channel, at: SimTime },
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("unknown sensor `{0}`")]
    UnknownSensor(String),
    #[error("invalid sensor parameters: {0}")]
    InvalidParams(String),
    #[error("trace {channel}: {message}")]
    InvalidTrace { channel: Channel, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Measurement {
    pub channel: Channel,
    pub value: f64,
    pub taken_at: SimTime,
}

/// Ground-truth series for one channel, linearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentTrace {
    channel: Channel,
    samples: Vec<(SimTime, f64)>,
}

impl EnvironmentTrace {
    pub fn new(channel: Channel, samples: Vec<(SimTime, f64)>) -> Result<Self, SensorError> {
        let invalid = |message: String| SensorError::InvalidTrace { channel, message };
        if samples.is_empty() {
            return Err(invalid("empty trace".into()));
        }
        for w in samples.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(invalid(format!(
                    "times not strictly increasing at {}",
                    w[1].0
                )));
            }
        }
        let (lo, hi) = channel.range();
        if let Some((t, v)) = samples.iter().find(|(_, v)| !(*v >= lo && *v <= hi)) {
            return Err(invalid(format!("value {v} at {t} outside [{lo}, {hi}]")));
        }
        Ok(EnvironmentTrace { channel, samples })
    }

    /// Reads `time_ms,value` rows (with header).
    pub fn from_csv_path(channel: Channel, path: &Path) -> Result<Self, SensorError> {
        let invalid = |e: csv::Error| SensorError::InvalidTrace {
            channel,
            message: format!("{}: {e}", path.display()),
        };
        let mut rdr = csv::Reader::from_path(path).map_err(invalid)?;
        let mut samples = Vec::new();
        for row in rdr.deserialize::<(u64, f64)>() {
            let (t, v) = row.map_err(invalid)?;
            samples.push((SimTime(t), v));
        }
        Self::new(channel, samples)
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    pub fn samples(&self) -> &[(SimTime, f64)] {
        &self.samples
    }

    pub fn span(&self) -> (SimTime, SimTime) {
        (self.samples[0].0, self.samples[self.samples.len() - 1].0)
    }

    pub fn value_at(&self, at: SimTime) -> Result<f64, SensorError> {
        let (start, end) = self.span();
        if at < start || at > end {
            return Err(SensorError::OutOfTrace {
                channel: self.channel,
                at,
            });
        }
        let idx = self.samples.partition_point(|(t, _)| *t <= at);
        let (t0, v0) = self.samples[idx - 1];
        if t0 == at || idx == self.samples.len() {
            return Ok(v0);
        }
        let (t1, v1) = self.samples[idx];
        let frac = (at.0 - t0.0) as f64 / (t1.0 - t0.0) as f64;
        Ok(v0 + (v1 - v0) * frac)
    }
}

#[derive(Debug, Clone)]
pub struct SensorModel {
    kind: SensorKind,
    params: SensorParams,
    state: SensorState,
    ready_at: SimTime,
    noise: Option<RandomStream>,
}

impl SensorModel {
    pub fn new(kind: SensorKind, params: SensorParams) -> Result<Self, SensorError> {
        params.validate()?;
        Ok(SensorModel {
            kind,
            params,
            state: SensorState::Off,
            ready_at: SimTime::ZERO,
            noise: None,
        })
    }

    pub fn with_defaults(kind: SensorKind) -> Self {
        Self::new(kind, kind.default_params()).expect("default params are valid")
    }

    pub fn with_noise(mut self, stream: RandomStream) -> Self {
        self.noise = Some(stream);
        self
    }

    pub fn kind(&self) -> SensorKind {
        self.kind
    }

    pub fn params(&self) -> &SensorParams {
        &self.params
    }

    pub fn state(&self) -> SensorState {
        self.state
    }

    pub fn ready_at(&self) -> SimTime {
        self.ready_at
    }

    /// Completes a warm-up whose deadline has passed.
    pub fn poll(&mut self, now: SimTime) -> SensorState {
        if self.state == SensorState::Warming && now >= self.ready_at {
            self.state = SensorState::Idle;
        }
        self.state
    }

    /// Supply current in the present state.
    pub fn current_ma(&self) -> f64 {
        match self.state {
            SensorState::Off => 0.0,
            SensorState::Sleep => self.params.sleep_ma,
            SensorState::Warming | SensorState::Idle => self.params.active_ma,
            SensorState::Sampling => self.params.peak_ma,
        }
    }

    pub fn wake(&mut self, now: SimTime) -> Result<SensorState, SensorError> {
        match self.poll(now) {
            SensorState::Off | SensorState::Sleep => {
                self.state = SensorState::Warming;
                self.ready_at = now.plus(self.params.warmup_ms);
                Ok(self.poll(now))
            }
            SensorState::Sampling => Err(SensorError::ProtocolMisuse { kind: self.kind }),
            s => Ok(s),
        }
    }

    /// Takes one reading of every channel this sensor provides. The sensor
    /// stays in `sampling` (drawing peak current) until
    /// [`finish_sample`](Self::finish_sample).
    pub fn sample(
        &mut self,
        traces: &[&EnvironmentTrace],
        at: SimTime,
    ) -> Result<Vec<Measurement>, SensorError> {
        let state = self.poll(at);
        if state != SensorState::Idle {
            return Err(SensorError::NotReady {
                kind: self.kind,
                state,
            });
        }
        let mut out = Vec::with_capacity(self.kind.channels().len());
        for &channel in self.kind.channels() {
            let trace = traces
                .iter()
                .find(|t| t.channel() == channel)
                .ok_or(SensorError::OutOfTrace { channel, at })?;
            let truth = trace.value_at(at)?;
            let noisy = match &mut self.noise {
                Some(rng) => rng.gaussian(truth, self.params.noise_sd),
                None => truth,
            };
            out.push(Measurement {
                channel,
                value: channel.clamp(noisy),
                taken_at: at,
            });
        }
        self.state = SensorState::Sampling;
        Ok(out)
    }

    pub fn finish_sample(&mut self) {
        if self.state == SensorState::Sampling {
            self.state = SensorState::Idle;
        }
    }

    /// Puts the sensor to sleep. An in-flight measurement is discarded.
    pub fn sleep_sensor(&mut self, now: SimTime) -> SensorState {
        match self.poll(now) {
            SensorState::Off => {}
            _ => self.state = SensorState::Sleep,
        }
        self.state
    }

    pub fn power_off(&mut self) {
        self.state = SensorState::Off;
    }
}
