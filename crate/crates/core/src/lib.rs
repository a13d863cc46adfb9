// Licensed under the Apache-2.0 license

//! Secure simultaneous firmware dissemination to intermittently powered RFID
//! tokens: protocol endpoints, an energy-harvesting model and a deterministic
//! discrete-event air interface to run them on.

pub mod adversary;
pub mod crypto;
pub mod power;
pub mod scenario;
pub mod server;
pub mod sim;
pub mod token;
pub mod wire;
