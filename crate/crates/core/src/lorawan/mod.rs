//! LoRaWAN-style uplink path: activation, sessions, frame counters,
//! airtime, adaptive data rate, gateways and a network server.

pub mod adr;
pub mod codec;
pub mod keys;
pub mod network;
pub mod phy;
pub mod server;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simcore::SimTime;

pub use adr::{adr_step, AdrCommand, AdrState, RequiredSnr};
pub use keys::{compute_mic, derive_session_keys, AesKey, AppEui, DevAddr, DevEui, SessionKeys};
pub use network::{Gateway, LinkModel, RadioNetwork};
pub use phy::{airtime_ms, tx_charge_mah, tx_current_ma, RadioParams, TxCurrentTable};
pub use server::{IngestOutcome, NetworkServer, ServerRecord, ServerStats};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoraError {
    #[error("spreading factor {0} outside 7-12")]
    SpreadingFactor(u8),
    #[error("tx power {0} dBm outside 2-14")]
    TxPower(i8),
    #[error("payload of {len} bytes exceeds {max} bytes at SF{sf}")]
    Oversize { len: usize, max: usize, sf: u8 },
    #[error("device has no session")]
    NotJoined,
    #[error("{field} must be {expected} bytes of hex")]
    BadHex {
        field: &'static str,
        expected: usize,
    },
    #[error("payload is {got} bytes, expected {expected}")]
    PayloadLength { expected: usize, got: usize },
    #[error("dev_eui {0} registered twice")]
    DuplicateDevEui(DevEui),
    #[error("abp device {0} has no dev_addr")]
    MissingAbpAddr(DevEui),
    #[error("abp dev_addr {0} already in use")]
    AddrInUse(DevAddr),
    #[error("unknown device {0}")]
    UnknownDevice(DevEui),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ActivationMode {
    #[default]
    Otaa,
    Abp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceIdentity {
    pub dev_eui: DevEui,
    pub app_eui: AppEui,
    pub app_key: AesKey,
    pub mode: ActivationMode,
    pub abp_dev_addr: Option<DevAddr>,
    /// Counter value an ABP device restores after losing power.
    pub abp_fcnt_persisted: u32,
}

impl DeviceIdentity {
    /// Fixed ABP session keys, provisioned alongside the address.
    pub fn abp_keys(&self) -> SessionKeys {
        derive_session_keys(&self.app_key, 0, &self.dev_eui)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub dev_addr: DevAddr,
    pub nwk_skey: AesKey,
    pub app_skey: AesKey,
    pub fcnt_up: u32,
    pub join_nonce: u32,
    pub established_at: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UplinkFrame {
    pub dev_addr: DevAddr,
    pub fcnt: u32,
    pub payload: Vec<u8>,
    pub radio: RadioParams,
    pub mic: [u8; 4],
    pub sent_at: SimTime,
    pub snr_db: Option<f64>,
}

impl UplinkFrame {
    /// Bytes on air: application payload plus the LoRaWAN framing.
    pub fn phy_len(&self) -> usize {
        self.payload.len() + phy::LORAWAN_OVERHEAD_BYTES
    }

    pub fn airtime_ms(&self) -> f64 {
        airtime_ms(&self.radio, self.phy_len())
    }
}

/// Join retry delay after `failures` consecutive losses.
pub fn join_backoff_ms(failures: u32) -> u64 {
    const BASE_MS: u64 = 10_000;
    const CAP_MS: u64 = 600_000;
    BASE_MS.saturating_mul(1u64 << failures.min(20)).min(CAP_MS)
}

/// End-device half of the stack.
#[derive(Debug, Clone)]
pub struct LoraDevice {
    pub identity: DeviceIdentity,
    pub radio: RadioParams,
    pub adr_enabled: bool,
    session: Option<Session>,
    join_failures: u32,
}

impl LoraDevice {
    pub fn new(
        identity: DeviceIdentity,
        radio: RadioParams,
        adr_enabled: bool,
    ) -> Result<Self, LoraError> {
        radio.validate()?;
        let mut d = LoraDevice {
            identity,
            radio,
            adr_enabled,
            session: None,
            join_failures: 0,
        };
        if d.identity.mode == ActivationMode::Abp {
            d.session = Some(d.abp_session(SimTime::ZERO)?);
        }
        Ok(d)
    }

    fn abp_session(&self, at: SimTime) -> Result<Session, LoraError> {
        let addr = self
            .identity
            .abp_dev_addr
            .ok_or(LoraError::MissingAbpAddr(self.identity.dev_eui))?;
        let keys = self.identity.abp_keys();
        Ok(Session {
            dev_addr: addr,
            nwk_skey: keys.nwk_skey,
            app_skey: keys.app_skey,
            fcnt_up: self.identity.abp_fcnt_persisted,
            join_nonce: 0,
            established_at: at,
        })
    }

    pub fn session(&self) -> Option<&Session> {
        self.session.as_ref()
    }

    pub fn is_joined(&self) -> bool {
        self.session.is_some()
    }

    pub fn join_failures(&self) -> u32 {
        self.join_failures
    }

    pub fn accept_join(&mut self, session: Session) {
        self.session = Some(session);
        self.join_failures = 0;
    }

    /// Records a lost join request and returns the delay before retrying.
    pub fn join_failed(&mut self) -> u64 {
        let d = join_backoff_ms(self.join_failures);
        self.join_failures = self.join_failures.saturating_add(1);
        d
    }

    /// Power loss: OTAA forgets its session, ABP restarts from the
    /// persisted counter.
    pub fn reset(&mut self, at: SimTime) -> Result<(), LoraError> {
        self.join_failures = 0;
        self.session = match self.identity.mode {
            ActivationMode::Otaa => None,
            ActivationMode::Abp => Some(self.abp_session(at)?),
        };
        Ok(())
    }

    pub fn apply_adr(&mut self, cmd: AdrCommand) {
        self.radio.spreading_factor = cmd.spreading_factor;
        self.radio.tx_power_dbm = cmd.tx_power_dbm;
    }

    /// Builds the next uplink and advances the frame counter. The counter
    /// moves whether or not the frame is later received.
    pub fn build_uplink(
        &mut self,
        payload: Vec<u8>,
        at: SimTime,
    ) -> Result<UplinkFrame, LoraError> {
        let max = self.radio.max_app_payload();
        if payload.len() > max {
            return Err(LoraError::Oversize {
                len: payload.len(),
                max,
                sf: self.radio.spreading_factor,
            });
        }
        let session = self.session.as_mut().ok_or(LoraError::NotJoined)?;
        let fcnt = session.fcnt_up;
        session.fcnt_up = session.fcnt_up.wrapping_add(1);
        let mic = compute_mic(&session.nwk_skey, session.dev_addr, fcnt, &payload);
        Ok(UplinkFrame {
            dev_addr: session.dev_addr,
            fcnt,
            payload,
            radio: self.radio,
            mic,
            sent_at: at,
            snr_db: None,
        })
    }
}
