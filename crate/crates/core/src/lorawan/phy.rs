//! Radio parameters, time-on-air and transmit current.

use serde::{Deserialize, Serialize};

use super::LoraError;

pub const MIN_SF: u8 = 7;
pub const MAX_SF: u8 = 12;
pub const MIN_TX_POWER_DBM: i8 = 2;
pub const MAX_TX_POWER_DBM: i8 = 14;
/// MHDR + FHDR (no FOpts) + FPort + MIC.
pub const LORAWAN_OVERHEAD_BYTES: usize = 13;

/// Largest application payload per spreading factor, SF7..SF12
/// (EU868 defaults, no FOpts).
pub const MAX_APP_PAYLOAD: [usize; 6] = [222, 222, 115, 51, 51, 51];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadioParams {
    pub spreading_factor: u8,
    pub bandwidth_hz: u32,
    /// Coding rate denominator offset: 1 means 4/5.
    pub coding_rate: u8,
    pub tx_power_dbm: i8,
    pub preamble_symbols: u16,
}

impl Default for RadioParams {
    fn default() -> Self {
        RadioParams {
            spreading_factor: 10,
            bandwidth_hz: 125_000,
            coding_rate: 1,
            tx_power_dbm: MAX_TX_POWER_DBM,
            preamble_symbols: 8,
        }
    }
}

impl RadioParams {
    pub fn new(spreading_factor: u8, tx_power_dbm: i8) -> Result<Self, LoraError> {
        let r = RadioParams {
            spreading_factor,
            tx_power_dbm,
            ..Default::default()
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), LoraError> {
        if !(MIN_SF..=MAX_SF).contains(&self.spreading_factor) {
            return Err(LoraError::SpreadingFactor(self.spreading_factor));
        }
        if !(MIN_TX_POWER_DBM..=MAX_TX_POWER_DBM).contains(&self.tx_power_dbm) {
            return Err(LoraError::TxPower(self.tx_power_dbm));
        }
        Ok(())
    }

    pub fn max_app_payload(&self) -> usize {
        MAX_APP_PAYLOAD[(self.spreading_factor - MIN_SF) as usize]
    }

    /// Low data rate optimisation is mandated for SF11 and SF12 at 125 kHz.
    pub fn low_data_rate_optimize(&self) -> bool {
        self.spreading_factor >= 11
    }
}

/// Time on air in milliseconds for a PHY payload of `payload_len` bytes
/// (explicit header, CRC on).
pub fn airtime_ms(radio: &RadioParams, payload_len: usize) -> f64 {
    let sf = radio.spreading_factor as f64;
    let t_sym = (1u64 << radio.spreading_factor) as f64 / radio.bandwidth_hz as f64 * 1000.0;
    let t_preamble = (radio.preamble_symbols as f64 + 4.25) * t_sym;
    let de = if radio.low_data_rate_optimize() {
        1.0
    } else {
        0.0
    };
    let numerator = 8.0 * payload_len as f64 - 4.0 * sf + 28.0 + 16.0;
    let blocks = (numerator / (4.0 * (sf - 2.0 * de))).ceil().max(0.0);
    let payload_symbols = 8.0 + blocks * (radio.coding_rate as f64 + 4.0);
    t_preamble + payload_symbols * t_sym
}

/// Linear transmit-current table between the power floor and ceiling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TxCurrentTable {
    pub min_power_ma: f64,
    pub max_power_ma: f64,
}

impl Default for TxCurrentTable {
    fn default() -> Self {
        TxCurrentTable {
            min_power_ma: 24.0,
            max_power_ma: 44.0,
        }
    }
}

impl TxCurrentTable {
    pub fn current_ma(&self, tx_power_dbm: i8) -> f64 {
        let p = tx_power_dbm.clamp(MIN_TX_POWER_DBM, MAX_TX_POWER_DBM) as f64;
        let span = (MAX_TX_POWER_DBM - MIN_TX_POWER_DBM) as f64;
        self.min_power_ma
            + (p - MIN_TX_POWER_DBM as f64) * (self.max_power_ma - self.min_power_ma) / span
    }
}

/// Supply current while transmitting with the default table: 24 mA at
/// 2 dBm rising linearly to 44 mA at 14 dBm.
pub fn tx_current_ma(tx_power_dbm: i8) -> f64 {
    TxCurrentTable::default().current_ma(tx_power_dbm)
}

/// Radio charge of one transmission in mAh, before supply efficiency.
pub fn tx_charge_mah(airtime_ms: f64, tx_current_ma: f64) -> f64 {
    airtime_ms * tx_current_ma / 3_600_000.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radio_param_ranges() {
        assert!(RadioParams::new(13, 14).is_err());
        assert!(RadioParams::new(6, 14).is_err());
        assert!(RadioParams::new(7, 15).is_err());
        assert!(RadioParams::new(12, 2).is_ok());
    }

    #[test]
    fn tx_current_endpoints() {
        assert_eq!(tx_current_ma(2), 24.0);
        assert_eq!(tx_current_ma(14), 44.0);
        assert!((tx_current_ma(8) - 34.0).abs() < 1e-12);
    }

    #[test]
    fn payload_limits() {
        assert_eq!(RadioParams::new(7, 14).unwrap().max_app_payload(), 222);
        assert_eq!(RadioParams::new(12, 14).unwrap().max_app_payload(), 51);
    }
}
