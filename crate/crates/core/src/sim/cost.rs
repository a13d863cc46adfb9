// Licensed under the Apache-2.0 license

//! Cycle costs of token-side operations and the air-interface timing model.

use serde::{Deserialize, Serialize};

use crate::power::PamParams;
use crate::wire::AttestMode;

/// Cycles divided by clock rate, in microseconds.
pub fn cycles_to_time(cycles: u64, mhz: f64) -> f64 {
    cycles as f64 / mhz
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub pilot_receive: u64,
    pub pilot_reply: u64,
    pub observer_receive: u64,
    pub security_association: u64,
    /// Firmware decryption, per 240 bytes.
    pub secure_broadcast_per_240: u64,
    /// MAC check, per 240 bytes.
    pub validation_per_240: u64,
    pub attest_fast: u64,
    pub attest_elaborate_setup: u64,
    pub attest_elaborate_per_block: u64,
    pub receive_mhz: f64,
    pub transmit_mhz: f64,
    pub compute_mhz: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            pilot_receive: 23_082,
            pilot_reply: 1_131,
            observer_receive: 22_002,
            security_association: 2_302,
            secure_broadcast_per_240: 11_604,
            validation_per_240: 26_724,
            attest_fast: 5_574,
            attest_elaborate_setup: 4_397,
            attest_elaborate_per_block: 1_060,
            receive_mhz: 16.0,
            transmit_mhz: 12.0,
            compute_mhz: 16.0,
        }
    }
}

impl CostModel {
    /// Fraction of per-packet cycles an observer saves over the pilot.
    pub fn observer_reduction(&self) -> f64 {
        1.0 - self.observer_receive as f64 / (self.pilot_receive + self.pilot_reply) as f64
    }

    pub fn attest_cycles(&self, mode: AttestMode, blocks: usize) -> u64 {
        match mode {
            AttestMode::Fast => self.attest_fast,
            AttestMode::Elaborate => {
                self.attest_elaborate_setup + self.attest_elaborate_per_block * blocks as u64
            }
        }
    }

    /// Decrypt plus MAC over `bytes` of ciphertext, scaled linearly.
    pub fn validation_cycles(&self, bytes: usize) -> u64 {
        let per_240 = self.secure_broadcast_per_240 + self.validation_per_240;
        (per_240 * bytes as u64).div_ceil(240)
    }

    pub fn receive_us(&self, observer: bool) -> f64 {
        let c = if observer {
            self.observer_receive
        } else {
            self.pilot_receive
        };
        cycles_to_time(c, self.receive_mhz)
    }

    pub fn reply_us(&self) -> f64 {
        cycles_to_time(self.pilot_reply, self.transmit_mhz)
    }

    pub fn compute_us(&self, cycles: u64) -> f64 {
        cycles_to_time(cycles, self.compute_mhz)
    }

    /// Wall time of a sliced computation: an initial sleep, then bursts of
    /// `t_active` separated by `t_lpm` sleeps.
    pub fn sliced_duration_us(&self, cycles: u64, pam: PamParams) -> f64 {
        let work = self.compute_us(cycles);
        match pam.t_active_ms {
            None => work,
            Some(active) => {
                let active = f64::from(active.max(1)) * 1e3;
                let sleep = f64::from(pam.t_lpm_ms) * 1e3;
                let bursts = (work / active).ceil().max(1.0);
                sleep * bursts + work
            }
        }
    }
}

/// Air interface timing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkModel {
    pub downlink_bps: f64,
    pub uplink_bps: f64,
    /// Reader gap between receiving a reply and starting the next command.
    pub turnaround_s: f64,
    /// Fixed length of one inventory round.
    pub inventory_round_s: f64,
    /// Capacitor voltage a token waits for before backscattering a reply.
    pub v_reply: f64,
    /// Reader wait after the token count is known before the first frame.
    pub warmup_s: f64,
    /// Pause between update attempts so browned-out tokens can recover.
    pub retry_gap_s: f64,
    /// Slack added to computed waits (reboot, sniff, validation).
    pub settle_s: f64,
}

/// Reader gives up on a pilot acknowledgement after this long.
pub const ACK_TIMEOUT_S: f64 = 0.020;

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            downlink_bps: 26_700.0,
            uplink_bps: 40_000.0,
            turnaround_s: 0.0005,
            inventory_round_s: 0.020,
            v_reply: 2.0,
            warmup_s: 0.1,
            retry_gap_s: 0.1,
            settle_s: 0.005,
        }
    }
}

impl LinkModel {
    pub fn downlink_s(&self, bits: usize) -> f64 {
        bits as f64 / self.downlink_bps
    }

    pub fn uplink_s(&self, bits: usize) -> f64 {
        bits as f64 / self.uplink_bps
    }
}
