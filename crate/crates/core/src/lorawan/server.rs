//! Network server: address allocation, MIC and frame-counter checks,
//! multi-gateway deduplication and ADR.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::simcore::SimTime;

use super::adr::{adr_step, AdrCommand, AdrState, RequiredSnr};
use super::keys::{compute_mic, derive_session_keys, AesKey, DevAddr, DevEui};
use super::{ActivationMode, DeviceIdentity, LoraError, Session, UplinkFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerRecord {
    pub dev_eui: DevEui,
    pub dev_addr: DevAddr,
    pub fcnt: u32,
    pub timestamp_ms: u64,
    pub payload: Vec<u8>,
    pub sf: u8,
    pub tx_power_dbm: i8,
    pub snr_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IngestOutcome {
    Accepted {
        adr: Option<AdrCommand>,
    },
    /// Extra copy of a frame already stored.
    Duplicate,
    /// Counter at or below the watermark.
    Replay,
    MicFailure,
    UnknownAddr,
    NotHeard,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStats {
    pub accepted: u64,
    pub duplicates: u64,
    pub replays: u64,
    pub mic_failures: u64,
    pub unknown: u64,
    pub joins: u64,
}

#[derive(Debug, Clone)]
struct SessionEntry {
    dev_eui: DevEui,
    nwk_skey: AesKey,
    /// Last accepted counter and its MIC.
    last: Option<(u32, [u8; 4])>,
}

#[derive(Debug, Clone)]
struct DeviceEntry {
    identity: DeviceIdentity,
    adr_enabled: bool,
    adr: AdrState,
    join_nonce: u32,
    current_addr: Option<DevAddr>,
}

#[derive(Debug, Clone)]
pub struct NetworkServer {
    devices: BTreeMap<DevEui, DeviceEntry>,
    sessions: BTreeMap<DevAddr, SessionEntry>,
    next_addr: u32,
    required_snr: RequiredSnr,
    records: Vec<ServerRecord>,
    stats: ServerStats,
}

impl Default for NetworkServer {
    fn default() -> Self {
        Self::new(RequiredSnr::default())
    }
}

impl NetworkServer {
    pub fn new(required_snr: RequiredSnr) -> Self {
        NetworkServer {
            devices: BTreeMap::new(),
            sessions: BTreeMap::new(),
            next_addr: 1,
            required_snr,
            records: Vec::new(),
            stats: ServerStats::default(),
        }
    }

    pub fn register(
        &mut self,
        identity: DeviceIdentity,
        adr_enabled: bool,
    ) -> Result<(), LoraError> {
        if self.devices.contains_key(&identity.dev_eui) {
            return Err(LoraError::DuplicateDevEui(identity.dev_eui));
        }
        let mut current_addr = None;
        if identity.mode == ActivationMode::Abp {
            let addr = identity
                .abp_dev_addr
                .ok_or(LoraError::MissingAbpAddr(identity.dev_eui))?;
            if self.sessions.contains_key(&addr) {
                return Err(LoraError::AddrInUse(addr));
            }
            self.sessions.insert(
                addr,
                SessionEntry {
                    dev_eui: identity.dev_eui,
                    nwk_skey: identity.abp_keys().nwk_skey,
                    last: None,
                },
            );
            current_addr = Some(addr);
        }
        self.devices.insert(
            identity.dev_eui,
            DeviceEntry {
                identity,
                adr_enabled,
                adr: AdrState::default(),
                join_nonce: 0,
                current_addr,
            },
        );
        Ok(())
    }

    fn allocate(&mut self) -> DevAddr {
        loop {
            let a = DevAddr(self.next_addr);
            self.next_addr = self.next_addr.wrapping_add(1).max(1);
            if !self.sessions.contains_key(&a) {
                return a;
            }
        }
    }

    /// Accepts a join request that reached the server and opens a fresh
    /// session with a new address, keys and a cleared watermark.
    pub fn join(&mut self, dev_eui: DevEui, at: SimTime) -> Result<Session, LoraError> {
        if !self.devices.contains_key(&dev_eui) {
            return Err(LoraError::UnknownDevice(dev_eui));
        }
        let addr = self.allocate();
        let dev = self.devices.get_mut(&dev_eui).expect("checked above");
        if let Some(old) = dev.current_addr.take() {
            self.sessions.remove(&old);
        }
        dev.join_nonce += 1;
        dev.current_addr = Some(addr);
        dev.adr.clear();
        let keys = derive_session_keys(&dev.identity.app_key, dev.join_nonce, &dev_eui);
        self.sessions.insert(
            addr,
            SessionEntry {
                dev_eui,
                nwk_skey: keys.nwk_skey,
                last: None,
            },
        );
        self.stats.joins += 1;
        Ok(Session {
            dev_addr: addr,
            nwk_skey: keys.nwk_skey,
            app_skey: keys.app_skey,
            fcnt_up: 0,
            join_nonce: dev.join_nonce,
            established_at: at,
        })
    }

    /// Handles every gateway copy of one transmission. `snrs` holds one
    /// entry per gateway that heard the frame.
    pub fn ingest(&mut self, frame: &UplinkFrame, snrs: &[f64]) -> IngestOutcome {
        let Some(best) = snrs.iter().copied().reduce(f64::max) else {
            return IngestOutcome::NotHeard;
        };
        let Some(entry) = self.sessions.get_mut(&frame.dev_addr) else {
            self.stats.unknown += 1;
            return IngestOutcome::UnknownAddr;
        };
        if compute_mic(&entry.nwk_skey, frame.dev_addr, frame.fcnt, &frame.payload) != frame.mic {
            self.stats.mic_failures += 1;
            return IngestOutcome::MicFailure;
        }
        match entry.last {
            Some((f, mic)) if f == frame.fcnt && mic == frame.mic => {
                self.stats.duplicates += snrs.len() as u64;
                return IngestOutcome::Duplicate;
            }
            Some((f, _)) if frame.fcnt <= f => {
                self.stats.replays += 1;
                return IngestOutcome::Replay;
            }
            _ => {}
        }
        entry.last = Some((frame.fcnt, frame.mic));
        let dev_eui = entry.dev_eui;
        self.stats.accepted += 1;
        self.stats.duplicates += snrs.len() as u64 - 1;
        self.records.push(ServerRecord {
            dev_eui,
            dev_addr: frame.dev_addr,
            fcnt: frame.fcnt,
            timestamp_ms: frame.sent_at.as_millis(),
            payload: frame.payload.clone(),
            sf: frame.radio.spreading_factor,
            tx_power_dbm: frame.radio.tx_power_dbm,
            snr_db: best,
        });
        let dev = self
            .devices
            .get_mut(&dev_eui)
            .expect("session without device");
        let mut adr = None;
        if dev.adr_enabled {
            dev.adr.push(best);
            adr = adr_step(&mut dev.adr, &frame.radio, &self.required_snr);
            if adr.is_some() {
                dev.adr.clear();
            }
        }
        IngestOutcome::Accepted { adr }
    }

    pub fn records(&self) -> &[ServerRecord] {
        &self.records
    }

    pub fn stats(&self) -> ServerStats {
        self.stats
    }

    pub fn adr_state(&self, dev_eui: &DevEui) -> Option<&AdrState> {
        self.devices.get(dev_eui).map(|d| &d.adr)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        write_records_csv(&self.records, out)
    }
}

pub const SERVER_CSV_HEADER: [&str; 8] = [
    "dev_eui",
    "dev_addr",
    "fcnt",
    "timestamp_ms",
    "payload_hex",
    "sf",
    "tx_power_dbm",
    "snr_db",
];

pub fn write_records_csv<W: Write>(records: &[ServerRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SERVER_CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.dev_eui.to_string(),
            r.dev_addr.to_string(),
            r.fcnt.to_string(),
            r.timestamp_ms.to_string(),
            hex::encode(&r.payload),
            r.sf.to_string(),
            r.tx_power_dbm.to_string(),
            format!("{:.2}", r.snr_db),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back a delivered-records export.
pub fn read_records_csv<R: std::io::Read>(input: R) -> Result<Vec<ServerRecord>, String> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row.map_err(|e| e.to_string())?;
        let field = |k: usize| {
            row.get(k)
                .ok_or_else(|| format!("row {}: missing column {}", i + 2, k))
        };
        let bad = |what: &str| format!("row {}: bad {what}", i + 2);
        out.push(ServerRecord {
            dev_eui: field(0)?.parse().map_err(|_| bad("dev_eui"))?,
            dev_addr: field(1)?.parse().map_err(|_| bad("dev_addr"))?,
            fcnt: field(2)?.parse().map_err(|_| bad("fcnt"))?,
            timestamp_ms: field(3)?.parse().map_err(|_| bad("timestamp_ms"))?,
            payload: hex::decode(field(4)?).map_err(|_| bad("payload_hex"))?,
            sf: field(5)?.parse().map_err(|_| bad("sf"))?,
            tx_power_dbm: field(6)?.parse().map_err(|_| bad("tx_power_dbm"))?,
            snr_db: field(7)?.parse().map_err(|_| bad("snr_db"))?,
        });
    }
    Ok(out)
}
