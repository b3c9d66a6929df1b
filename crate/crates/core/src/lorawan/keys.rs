//! Identifiers and the keyed derivation standing in for AES-CMAC.
//!
//! Session keys and MICs are prefixes of `SHA-256(key || label || fields)`.
//! They are deterministic and key-dependent, which is all the session and
//! counter logic relies on; they are not interoperable with real LoRaWAN.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use super::LoraError;

macro_rules! hex_id {
    ($name:ident, $len:expr) => {
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; $len]);

        impl FromStr for $name {
            type Err = LoraError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let bytes = hex::decode(s).map_err(|_| LoraError::BadHex {
                    field: stringify!($name),
                    expected: $len,
                })?;
                let arr: [u8; $len] = bytes.try_into().map_err(|_| LoraError::BadHex {
                    field: stringify!($name),
                    expected: $len,
                })?;
                Ok($name(arr))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&hex::encode(self.0))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self)
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_string())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_id!(DevEui, 8);
hex_id!(AppEui, 8);
hex_id!(AesKey, 16);

/// 32-bit device address, shown as 8 hex digits.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DevAddr(pub u32);

impl fmt::Display for DevAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08x}", self.0)
    }
}

impl fmt::Debug for DevAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DevAddr({self})")
    }
}

impl FromStr for DevAddr {
    type Err = LoraError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 8 {
            return Err(LoraError::BadHex {
                field: "DevAddr",
                expected: 4,
            });
        }
        u32::from_str_radix(s, 16)
            .map(DevAddr)
            .map_err(|_| LoraError::BadHex {
                field: "DevAddr",
                expected: 4,
            })
    }
}

const LABEL_NWK: u8 = 0x01;
const LABEL_APP: u8 = 0x02;
const LABEL_MIC: u8 = 0x49;

fn keyed(key: &[u8], label: u8, fields: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(key);
    h.update([label]);
    for f in fields {
        h.update(f);
    }
    h.finalize().into()
}

fn key16(d: [u8; 32]) -> AesKey {
    let mut k = [0u8; 16];
    k.copy_from_slice(&d[..16]);
    AesKey(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionKeys {
    pub nwk_skey: AesKey,
    pub app_skey: AesKey,
}

/// Derives both session keys from the root key, join nonce and DevEUI.
pub fn derive_session_keys(app_key: &AesKey, join_nonce: u32, dev_eui: &DevEui) -> SessionKeys {
    let nonce = join_nonce.to_le_bytes();
    SessionKeys {
        nwk_skey: key16(keyed(&app_key.0, LABEL_NWK, &[&nonce, &dev_eui.0])),
        app_skey: key16(keyed(&app_key.0, LABEL_APP, &[&nonce, &dev_eui.0])),
    }
}

pub fn compute_mic(nwk_skey: &AesKey, dev_addr: DevAddr, fcnt: u32, payload: &[u8]) -> [u8; 4] {
    let d = keyed(
        &nwk_skey.0,
        LABEL_MIC,
        &[&dev_addr.0.to_le_bytes(), &fcnt.to_le_bytes(), payload],
    );
    [d[0], d[1], d[2], d[3]]
}
