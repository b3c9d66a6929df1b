//! Network-side adaptive data rate.
//!
//! Margin over the last 20 uplinks is `max(snr) - required(sf) - 10 dB`;
//! every full 3 dB buys one step. Steps lower the spreading factor toward
//! SF7 first, then the transmit power in 2 dB decrements toward 2 dBm.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::phy::{RadioParams, MIN_SF, MIN_TX_POWER_DBM};

pub const ADR_WINDOW: usize = 20;
pub const INSTALLATION_MARGIN_DB: f64 = 10.0;
pub const DB_PER_STEP: f64 = 3.0;
pub const TX_POWER_STEP_DB: i8 = 2;

/// Demodulation floor per spreading factor, SF7..SF12.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequiredSnr(pub [f64; 6]);

impl Default for RequiredSnr {
    fn default() -> Self {
        RequiredSnr([-7.5, -10.0, -12.5, -15.0, -17.5, -20.0])
    }
}

impl RequiredSnr {
    pub fn for_sf(&self, sf: u8) -> f64 {
        self.0[(sf.clamp(7, 12) - 7) as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdrCommand {
    pub spreading_factor: u8,
    pub tx_power_dbm: i8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdrState {
    recent_snrs: VecDeque<f64>,
    pub installation_margin_db: f64,
    pub pending_command: Option<AdrCommand>,
}

impl Default for AdrState {
    fn default() -> Self {
        AdrState {
            recent_snrs: VecDeque::with_capacity(ADR_WINDOW),
            installation_margin_db: INSTALLATION_MARGIN_DB,
            pending_command: None,
        }
    }
}

impl AdrState {
    pub fn capacity(&self) -> usize {
        ADR_WINDOW
    }

    pub fn len(&self) -> usize {
        self.recent_snrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recent_snrs.is_empty()
    }

    pub fn push(&mut self, snr_db: f64) {
        if self.recent_snrs.len() == ADR_WINDOW {
            self.recent_snrs.pop_front();
        }
        self.recent_snrs.push_back(snr_db);
    }

    pub fn clear(&mut self) {
        self.recent_snrs.clear();
    }

    pub fn max_snr(&self) -> Option<f64> {
        self.recent_snrs.iter().copied().reduce(f64::max)
    }

    /// Link margin in dB once the window is full.
    pub fn margin_db(&self, sf: u8, required: &RequiredSnr) -> Option<f64> {
        if self.recent_snrs.len() < ADR_WINDOW {
            return None;
        }
        self.max_snr()
            .map(|m| m - required.for_sf(sf) - self.installation_margin_db)
    }
}

/// Walks `steps` reductions from `(sf, power)`.
pub fn apply_steps(sf: u8, tx_power_dbm: i8, steps: i64) -> (u8, i8) {
    let (mut sf, mut p, mut steps) = (sf, tx_power_dbm, steps);
    while steps > 0 && sf > MIN_SF {
        sf -= 1;
        steps -= 1;
    }
    while steps > 0 && p > MIN_TX_POWER_DBM {
        p = (p - TX_POWER_STEP_DB).max(MIN_TX_POWER_DBM);
        steps -= 1;
    }
    (sf, p)
}

/// Computes the next command for a device currently on `current`; the
/// command is also left in `state.pending_command`.
pub fn adr_step(
    state: &mut AdrState,
    current: &RadioParams,
    required: &RequiredSnr,
) -> Option<AdrCommand> {
    let margin = state.margin_db(current.spreading_factor, required)?;
    let steps = (margin / DB_PER_STEP).floor() as i64;
    if steps <= 0 {
        return None;
    }
    let (sf, p) = apply_steps(current.spreading_factor, current.tx_power_dbm, steps);
    if sf == current.spreading_factor && p == current.tx_power_dbm {
        return None;
    }
    let cmd = AdrCommand {
        spreading_factor: sf,
        tx_power_dbm: p,
    };
    state.pending_command = Some(cmd);
    Some(cmd)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(snr: f64) -> AdrState {
        let mut s = AdrState::default();
        for _ in 0..ADR_WINDOW {
            s.push(snr);
        }
        s
    }

    /// max snr that yields `margin` at `sf`
    fn snr_for_margin(sf: u8, margin: f64) -> f64 {
        margin + RequiredSnr::default().for_sf(sf) + INSTALLATION_MARGIN_DB
    }

    #[test]
    fn ring_holds_exactly_twenty() {
        let mut s = AdrState::default();
        for i in 0..30 {
            s.push(i as f64);
        }
        assert_eq!(s.len(), 20);
        assert_eq!(s.max_snr(), Some(29.0));
    }

    #[test]
    fn needs_a_full_window() {
        let mut s = AdrState::default();
        s.push(30.0);
        let r = RadioParams::new(10, 14).unwrap();
        assert_eq!(adr_step(&mut s, &r, &RequiredSnr::default()), None);
    }

    #[test]
    fn small_margin_gives_no_command() {
        let r = RadioParams::new(10, 14).unwrap();
        let mut s = filled(snr_for_margin(10, 2.9));
        assert_eq!(adr_step(&mut s, &r, &RequiredSnr::default()), None);
    }

    #[test]
    fn nine_db_at_sf10_goes_to_sf7() {
        let r = RadioParams::new(10, 14).unwrap();
        let mut s = filled(snr_for_margin(10, 9.0));
        let cmd = adr_step(&mut s, &r, &RequiredSnr::default()).unwrap();
        assert_eq!(
            cmd,
            AdrCommand {
                spreading_factor: 7,
                tx_power_dbm: 14
            }
        );
        assert_eq!(s.pending_command, Some(cmd));
    }

    #[test]
    fn saturated_device_gets_nothing() {
        let r = RadioParams::new(7, 2).unwrap();
        let mut s = filled(50.0);
        assert_eq!(adr_step(&mut s, &r, &RequiredSnr::default()), None);
    }

    #[test]
    fn extra_steps_lower_power() {
        assert_eq!(apply_steps(8, 14, 4), (7, 8));
        assert_eq!(apply_steps(7, 3, 2), (7, 2));
    }
}
