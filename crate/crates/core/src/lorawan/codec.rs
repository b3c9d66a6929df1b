//! Fixed little-endian payload packing.
//!
//! Fields appear in channel order and only for configured channels:
//! `pm25 x10 : u16`, `co2 : u16`, `temp x100 : i16`, `rh x100 : u16`.
//! A missing reading is sent as `0xFFFF` (unsigned) or `i16::MIN`.

use crate::sensors::Channel;

use super::LoraError;

pub const MISSING_U16: u16 = u16::MAX;
pub const MISSING_I16: i16 = i16::MIN;

fn scale(channel: Channel) -> f64 {
    match channel {
        Channel::Pm25Ugm3 => 10.0,
        Channel::Co2Ppm => 1.0,
        Channel::TempC | Channel::RhPct => 100.0,
    }
}

fn ordered(channels: &[Channel]) -> Vec<Channel> {
    Channel::ALL
        .iter()
        .copied()
        .filter(|c| channels.contains(c))
        .collect()
}

pub fn payload_len(channels: &[Channel]) -> usize {
    ordered(channels).len() * 2
}

/// Packs one reading per configured channel. Channels absent from
/// `readings` are encoded as missing.
pub fn encode(channels: &[Channel], readings: &[(Channel, Option<f64>)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload_len(channels));
    for ch in ordered(channels) {
        let v = readings
            .iter()
            .find(|(c, _)| *c == ch)
            .and_then(|(_, v)| *v)
            .filter(|v| v.is_finite());
        let scaled = v.map(|v| (v * scale(ch)).round());
        match ch {
            Channel::TempC => {
                let raw = scaled
                    .map(|s| s.clamp(-(i16::MAX as f64), i16::MAX as f64) as i16)
                    .unwrap_or(MISSING_I16);
                out.extend_from_slice(&raw.to_le_bytes());
            }
            _ => {
                let raw = scaled
                    .map(|s| s.clamp(0.0, (u16::MAX - 1) as f64) as u16)
                    .unwrap_or(MISSING_U16);
                out.extend_from_slice(&raw.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode(
    channels: &[Channel],
    bytes: &[u8],
) -> Result<Vec<(Channel, Option<f64>)>, LoraError> {
    let chans = ordered(channels);
    if bytes.len() != chans.len() * 2 {
        return Err(LoraError::PayloadLength {
            expected: chans.len() * 2,
            got: bytes.len(),
        });
    }
    Ok(chans
        .into_iter()
        .zip(bytes.chunks_exact(2))
        .map(|(ch, b)| {
            let pair = [b[0], b[1]];
            let v = match ch {
                Channel::TempC => {
                    let raw = i16::from_le_bytes(pair);
                    (raw != MISSING_I16).then(|| raw as f64 / scale(ch))
                }
                _ => {
                    let raw = u16::from_le_bytes(pair);
                    (raw != MISSING_U16).then(|| raw as f64 / scale(ch))
                }
            };
            (ch, v)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_frame_layout() {
        let chans = Channel::ALL;
        let bytes = encode(
            &chans,
            &[
                (Channel::RhPct, Some(45.5)),
                (Channel::Pm25Ugm3, Some(72.9)),
                (Channel::Co2Ppm, Some(415.0)),
                (Channel::TempC, Some(-3.25)),
            ],
        );
        assert_eq!(bytes.len(), 8);
        assert_eq!(&bytes[0..2], &729u16.to_le_bytes());
        assert_eq!(&bytes[2..4], &415u16.to_le_bytes());
        assert_eq!(&bytes[4..6], &(-325i16).to_le_bytes());
        assert_eq!(&bytes[6..8], &4550u16.to_le_bytes());
        let back = decode(&chans, &bytes).unwrap();
        assert_eq!(back[0], (Channel::Pm25Ugm3, Some(72.9)));
        assert_eq!(back[2], (Channel::TempC, Some(-3.25)));
    }

    #[test]
    fn missing_and_unconfigured() {
        let chans = [Channel::Pm25Ugm3];
        let bytes = encode(
            &chans,
            &[(Channel::Pm25Ugm3, None), (Channel::Co2Ppm, Some(1.0))],
        );
        assert_eq!(bytes, vec![0xFF, 0xFF]);
        assert_eq!(
            decode(&chans, &bytes).unwrap(),
            vec![(Channel::Pm25Ugm3, None)]
        );
        assert!(decode(&chans, &[0]).is_err());
    }
}
