//! Discrete-event simulation of a solar-charged, duty-cycled air-quality
//! datalogger and its LoRaWAN uplink path.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod firmware;
pub mod fixtures;
pub mod lorawan;
pub mod power;
pub mod scenario;
pub mod sensors;
pub mod simcore;
pub mod world;
