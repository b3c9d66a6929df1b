//! Gateways and the per-link channel model.
//!
//! Each gateway-device link drops frames with a fixed probability and can
//! additionally drop data frames whose send time falls in a listed slot.
//! Received frames get an SNR drawn from `Normal(mean - backoff, 2 dB)`,
//! where `backoff` is how far the transmit power sits below 14 dBm.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::simcore::{RandomStream, SimTime};

use super::keys::DevEui;
use super::phy::MAX_TX_POWER_DBM;
use super::UplinkFrame;

pub const SNR_SD_DB: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub loss_probability: f64,
    /// Slot indices (`sent_at / slot_ms`) in which data frames are lost.
    pub loss_slots: BTreeSet<u64>,
    pub slot_ms: u64,
    pub snr_mean_db: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            loss_probability: 0.0,
            loss_slots: BTreeSet::new(),
            slot_ms: 900_000,
            snr_mean_db: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Link {
    model: LinkModel,
    rng: RandomStream,
}

#[derive(Debug, Clone)]
pub struct Gateway {
    pub name: String,
    links: BTreeMap<DevEui, Link>,
}

impl Gateway {
    pub fn new(name: impl Into<String>) -> Self {
        Gateway {
            name: name.into(),
            links: BTreeMap::new(),
        }
    }

    pub fn add_link(&mut self, seed: u64, dev_eui: DevEui, model: LinkModel) {
        let rng = RandomStream::labelled(seed, &format!("link/{}/{}", self.name, dev_eui));
        self.links.insert(dev_eui, Link { model, rng });
    }

    pub fn hears(&self, dev_eui: &DevEui) -> bool {
        self.links.contains_key(dev_eui)
    }

    /// Returns the SNR if this gateway receives the frame.
    fn offer(
        &mut self,
        dev_eui: &DevEui,
        tx_power_dbm: i8,
        sent_at: SimTime,
        data: bool,
    ) -> Option<f64> {
        let link = self.links.get_mut(dev_eui)?;
        let lost = link.rng.bernoulli(link.model.loss_probability);
        if data && link.model.slot_ms > 0 {
            let slot = sent_at.as_millis() / link.model.slot_ms;
            if link.model.loss_slots.contains(&slot) {
                return None;
            }
        }
        if lost {
            return None;
        }
        let backoff = (MAX_TX_POWER_DBM - tx_power_dbm) as f64;
        Some(
            link.rng
                .gaussian(link.model.snr_mean_db - backoff, SNR_SD_DB),
        )
    }
}

/// All gateways of a scenario.
#[derive(Debug, Clone, Default)]
pub struct RadioNetwork {
    pub gateways: Vec<Gateway>,
}

impl RadioNetwork {
    pub fn new(gateways: Vec<Gateway>) -> Self {
        RadioNetwork { gateways }
    }

    /// Offers a data frame to every gateway; returns one SNR per receiving
    /// gateway, in gateway order.
    pub fn transmit(&mut self, dev_eui: &DevEui, frame: &UplinkFrame) -> Vec<f64> {
        self.gateways
            .iter_mut()
            .filter_map(|g| g.offer(dev_eui, frame.radio.tx_power_dbm, frame.sent_at, true))
            .collect()
    }

    /// Join requests see only the random loss.
    pub fn transmit_join(&mut self, dev_eui: &DevEui, tx_power_dbm: i8, at: SimTime) -> bool {
        let mut heard = false;
        for g in &mut self.gateways {
            heard |= g.offer(dev_eui, tx_power_dbm, at, false).is_some();
        }
        heard
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lorawan::tests::identity;
    use crate::lorawan::{ActivationMode, IngestOutcome, LoraDevice, NetworkServer, RadioParams};

    fn setup(loss: f64, gateways: usize) -> (RadioNetwork, NetworkServer, LoraDevice) {
        let id = identity(1, ActivationMode::Abp);
        let mut net = RadioNetwork::default();
        for i in 0..gateways {
            let mut g = Gateway::new(format!("gw{i}"));
            g.add_link(
                42,
                id.dev_eui,
                LinkModel {
                    loss_probability: loss,
                    ..Default::default()
                },
            );
            net.gateways.push(g);
        }
        let mut s = NetworkServer::default();
        s.register(id.clone(), false).unwrap();
        let d = LoraDevice::new(id, RadioParams::default(), false).unwrap();
        (net, s, d)
    }

    #[test]
    fn lossless_two_gateways_store_once() {
        let (mut net, mut s, mut d) = setup(0.0, 2);
        let f = d.build_uplink(vec![1], SimTime::ZERO).unwrap();
        let snrs = net.transmit(&d.identity.dev_eui, &f);
        assert_eq!(snrs.len(), 2);
        assert!(matches!(
            s.ingest(&f, &snrs),
            IngestOutcome::Accepted { .. }
        ));
        assert_eq!(s.records().len(), 1);
    }

    #[test]
    fn total_loss_still_advances_counter() {
        let (mut net, mut s, mut d) = setup(1.0, 1);
        let f = d.build_uplink(vec![1], SimTime::ZERO).unwrap();
        let snrs = net.transmit(&d.identity.dev_eui, &f);
        assert_eq!(s.ingest(&f, &snrs), IngestOutcome::NotHeard);
        assert_eq!(d.session().unwrap().fcnt_up, 1);
        assert!(s.records().is_empty());
    }

    #[test]
    fn scheduled_slot_drops_data_only() {
        let id = identity(1, ActivationMode::Abp);
        let mut g = Gateway::new("gw");
        g.add_link(
            1,
            id.dev_eui,
            LinkModel {
                loss_slots: [3u64].into_iter().collect(),
                ..Default::default()
            },
        );
        let mut net = RadioNetwork::new(vec![g]);
        let mut d = LoraDevice::new(id.clone(), RadioParams::default(), false).unwrap();
        let f = d
            .build_uplink(vec![], SimTime::from_millis(3 * 900_000 + 10))
            .unwrap();
        assert!(net.transmit(&id.dev_eui, &f).is_empty());
        let f = d
            .build_uplink(vec![], SimTime::from_millis(4 * 900_000 + 10))
            .unwrap();
        assert_eq!(net.transmit(&id.dev_eui, &f).len(), 1);
        assert!(net.transmit_join(&id.dev_eui, 14, SimTime::from_millis(3 * 900_000)));
    }

    #[test]
    fn unlinked_device_is_not_heard() {
        let (mut net, _, _) = setup(0.0, 1);
        let other = identity(7, ActivationMode::Otaa);
        assert!(!net.transmit_join(&other.dev_eui, 14, SimTime::ZERO));
    }
}
