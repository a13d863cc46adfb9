// Licensed under the Apache-2.0 license

//! Scripted attacks against live sessions.
//!
//! Attacks act only on the air: they read the transcript, transmit their own
//! frames, rewrite or jam downlink frames and forge or suppress replies.
//! Token internals are inspected only afterwards, to score the outcome.

use std::collections::BTreeMap;
use std::io;

use serde::Serialize;

use crate::crypto::{
    mac_compute, rng_bytes, skp_decrypt, skp_encrypt, unwrap_key, Block, CipherBlockChain,
    MacTag, RandomSource, SymmetricKey,
};
use crate::power::PamParams;
use crate::scenario::{build_world, Scenario, TokenSpec, World};
use crate::server::{FirmwareImage, TokenOutcome};
use crate::sim::{Interceptor, Sender, SimTime, Simulator, Transcript, ACK_TIMEOUT_S};
use crate::wire::{
    chunk_firmware, decode, encode, AttestMode, CommandKind, Frame, Handle, Segment, TokenId,
    DEFAULT_CHUNK_PAYLOAD,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttackScript {
    /// Passive capture of a complete session.
    Eavesdrop,
    /// Run a rogue update session carrying attacker-chosen bytes.
    InjectFirmware(Vec<u8>),
    /// Flip `mask` into the first data byte of chunk `index`, fixing the CRC.
    TamperChunk { index: u16, mask: u8 },
    /// Replay a recorded session to tokens that already installed it.
    ReplaySession,
    /// Replay an older session after a newer update.
    Downgrade,
    /// Jam the target's broadcast and answer validation on its behalf.
    SpoofAck { target: usize },
    /// A device unknown to the server replays another token's association.
    UnauthorizedDevice,
}

impl AttackScript {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Eavesdrop => "eavesdrop",
            Self::InjectFirmware(_) => "inject_firmware",
            Self::TamperChunk { .. } => "tamper_chunk",
            Self::ReplaySession => "replay_session",
            Self::Downgrade => "downgrade",
            Self::SpoofAck { .. } => "spoof_ack",
            Self::UnauthorizedDevice => "unauthorized_device",
        }
    }
}

/// What the attack achieved. `None` marks checks the script does not make.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackOutcome {
    pub attack: &'static str,
    pub seed: u64,
    pub protections_disabled: bool,
    /// Some token holds firmware the server never issued.
    pub foreign_install: bool,
    /// Some token accepted a finalize driven by the attacker.
    pub attacker_update_accepted: bool,
    pub version_decreased: bool,
    /// Longest run of plaintext bytes visible in captured frames.
    pub plaintext_overlap: Option<usize>,
    pub plaintext_recovered: bool,
    pub server_fooled: Option<bool>,
    pub attestation_caught: Option<bool>,
    /// Authorized tokens updated normally in the same run.
    pub control_updated: Option<bool>,
}

impl AttackOutcome {
    fn new(script: &AttackScript, seed: u64, unprotected: bool) -> Self {
        Self {
            attack: script.name(),
            seed,
            protections_disabled: unprotected,
            foreign_install: false,
            attacker_update_accepted: false,
            version_decreased: false,
            plaintext_overlap: None,
            plaintext_recovered: false,
            server_fooled: None,
            attestation_caught: None,
            control_updated: None,
        }
    }

    /// The attack reached its goal.
    pub fn succeeded(&self) -> bool {
        self.foreign_install
            || self.attacker_update_accepted
            || self.version_decreased
            || self.plaintext_recovered
            || (self.server_fooled == Some(true) && self.attestation_caught != Some(true))
    }
}

/// Ciphertext and public parameters recoverable from a transcript.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Capture {
    /// SecureComm payloads of the last session, in index order.
    pub ciphertext: Vec<u8>,
    pub iv: Option<Block>,
    pub wrapped_keys: Vec<Block>,
}

/// Reassembles what a passive listener sees of the last update session.
pub fn eavesdrop_extract(t: &Transcript) -> Capture {
    let rec = Recording::from_transcript(t);
    let mut cap = Capture::default();
    if let Some(r) = rec {
        cap.ciphertext = r.chunks.values().flatten().copied().collect();
        cap.iv = r.auths.values().next().map(|a| a.iv);
        cap.wrapped_keys = r.auths.values().map(|a| a.wrapped_sk).collect();
    }
    cap
}

/// Length of the longest common substring.
pub fn longest_common_substring(a: &[u8], b: &[u8]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    let mut best = 0;
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { 0 };
            best = best.max(cur[j + 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// Plaintext counts as recovered once a full cipher block of it is exposed.
pub const RECOVERY_THRESHOLD: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
struct Auth {
    wrapped_sk: Block,
    s: MacTag,
    nver: u32,
    t_lpm_ms: u16,
    t_active_ms: Option<u16>,
    iv: Block,
    pilot: bool,
}

impl Auth {
    fn frame(&self, to: Handle) -> Frame {
        Frame::to(
            to,
            CommandKind::Authenticate {
                wrapped_sk: self.wrapped_sk,
                s: self.s,
                nver: self.nver,
                t_lpm_ms: self.t_lpm_ms,
                t_active_ms: self.t_active_ms,
                iv: self.iv,
                pilot: self.pilot,
            },
        )
    }
}

/// The last update session in a transcript, keyed by token id.
#[derive(Debug, Clone, Default)]
struct Recording {
    auths: BTreeMap<TokenId, Auth>,
    chunks: BTreeMap<u16, Vec<u8>>,
}

impl Recording {
    /// The last session that reached end-of-broadcast. Handles are learnt
    /// from the inventory replies that precede the association.
    fn from_transcript(t: &Transcript) -> Option<Self> {
        let mut handles: BTreeMap<u16, TokenId> = BTreeMap::new();
        let mut cur = Recording::default();
        let mut last = None;
        for r in t.records() {
            if let (Sender::Token(id), Some(h), "InventoryReply") = (r.sender, r.handle, r.kind.as_str()) {
                handles.insert(h, id);
                continue;
            }
            if !r.is_downlink() {
                continue;
            }
            let Some(f) = r.frame() else { continue };
            match f.kind {
                CommandKind::Inventory => {
                    handles.clear();
                    cur = Recording::default();
                }
                CommandKind::Authenticate {
                    wrapped_sk,
                    s,
                    nver,
                    t_lpm_ms,
                    t_active_ms,
                    iv,
                    pilot,
                } => {
                    if let Some(id) = f.handle.and_then(|h| handles.get(&h.0)) {
                        let a = Auth {
                            wrapped_sk,
                            s,
                            nver,
                            t_lpm_ms,
                            t_active_ms,
                            iv,
                            pilot,
                        };
                        cur.auths.insert(*id, a);
                    }
                }
                CommandKind::SecureComm { index, data } => {
                    cur.chunks.insert(index, data);
                }
                CommandKind::Eob => last = Some(cur.clone()),
                _ => {}
            }
        }
        last
    }
}

/// Runs a rogue session as a reader: every target enters update mode,
/// receives its association frame, then the chunks go to the pilot.
fn rogue_session(sim: &mut Simulator, auths: &BTreeMap<TokenId, Auth>, chunks: &BTreeMap<u16, Vec<u8>>) {
    let link = sim.config().link;
    let cost = sim.config().cost;
    let warm = SimTime::from_secs(link.warmup_s);
    if sim.now() < warm {
        sim.advance(warm);
    }
    let me = Sender::Adversary;
    let ack = |sim: &mut Simulator, end: SimTime| {
        sim.wait_for(end + SimTime::from_secs(ACK_TIMEOUT_S), |r| {
            matches!(r.frame.kind, CommandKind::Ack { .. })
        })
    };
    for o in sim.inventory_round(me) {
        if auths.contains_key(&o.id) && o.vt == 0.0 {
            let _ = sim.transmit(&Frame::to(o.handle, CommandKind::EnterWisecr), me);
        }
    }
    sim.wait(sim.config().sniff_window_s + cost.receive_us(false) * 1e-6 + link.settle_s);
    let obs = sim.inventory_round(me);
    let mut pilot = None;
    for (id, a) in auths {
        let Some(o) = obs.iter().find(|o| o.id == *id) else {
            continue;
        };
        let _ = sim.transmit(&a.frame(o.handle), me);
        let end = sim.now();
        ack(sim, end);
        if a.pilot {
            pilot = Some(o.handle);
        }
    }
    let Some(pilot) = pilot.or_else(|| obs.first().map(|o| o.handle)) else {
        return;
    };
    for (index, data) in chunks {
        let f = Frame::to(
            pilot,
            CommandKind::SecureComm {
                index: *index,
                data: data.clone(),
            },
        );
        let _ = sim.transmit(&f, me);
        let end = sim.now();
        ack(sim, end);
    }
    let _ = sim.transmit(&Frame::to(pilot, CommandKind::Eob), me);
    let bytes: usize = chunks.values().map(Vec::len).sum();
    let longest = cost.sliced_duration_us(cost.validation_cycles(bytes), PamParams::CONTINUOUS);
    sim.wait(ACK_TIMEOUT_S + longest * 1e-6 + 1.0);
}

/// Rewrites one chunk in flight and recomputes the frame CRC.
struct ChunkTamper {
    index: u16,
    mask: u8,
}

impl Interceptor for ChunkTamper {
    fn on_downlink(
        &mut self,
        _seq: u64,
        _sender: Sender,
        bytes: &mut Vec<u8>,
        _blocked: &mut Vec<TokenId>,
    ) -> bool {
        let Ok(mut f) = decode(bytes) else {
            return false;
        };
        match &mut f.kind {
            CommandKind::SecureComm { index, data } if *index == self.index && !data.is_empty() => {
                data[0] ^= self.mask;
            }
            _ => return false,
        }
        *bytes = encode(&f).expect("same length re-encodes");
        true
    }
}

/// Keeps the target from hearing the broadcast, then answers the next
/// inventory in its name with the new version.
struct AckSpoofer {
    target: TokenId,
    nver: Option<u32>,
    after_eob: bool,
    /// The target's own replies are hidden once its broadcast was jammed.
    hide_target: bool,
    target_handle: Option<Handle>,
    /// The jammed target was elected pilot, so its acks must be forged too.
    target_is_pilot: bool,
}

impl Interceptor for AckSpoofer {
    fn on_downlink(
        &mut self,
        _seq: u64,
        sender: Sender,
        bytes: &mut Vec<u8>,
        blocked: &mut Vec<TokenId>,
    ) -> bool {
        if sender != Sender::Reader {
            return false;
        }
        let Ok(frame) = decode(bytes) else {
            return false;
        };
        match frame.kind {
            CommandKind::Inventory => self.target_is_pilot = false,
            CommandKind::Authenticate { nver, pilot, .. } => {
                self.nver = Some(nver);
                if pilot && frame.handle.is_some() && frame.handle == self.target_handle {
                    self.target_is_pilot = true;
                }
            }
            CommandKind::SecureComm { .. } => blocked.push(self.target),
            CommandKind::Eob => {
                blocked.push(self.target);
                self.after_eob = true;
                self.hide_target = true;
            }
            _ => {}
        }
        false
    }

    fn forge_replies(&mut self, _seq: u64, frame: &Frame) -> Vec<Frame> {
        match (&frame.kind, self.nver) {
            (CommandKind::Inventory, Some(ver)) if self.after_eob => {
                self.after_eob = false;
                vec![Frame::broadcast(CommandKind::InventoryReply {
                    id: self.target,
                    ver,
                    vt_mv: 0,
                })]
            }
            (CommandKind::SecureComm { .. } | CommandKind::Eob, _) if self.target_is_pilot => {
                vec![Frame::broadcast(CommandKind::Ack { crc_error: false })]
            }
            _ => Vec::new(),
        }
    }

    fn on_singulation(&mut self, id: TokenId, handle: Handle) {
        if id == self.target {
            self.target_handle = Some(handle);
        }
    }

    fn on_uplink(&mut self, from: TokenId, frame: &Frame) -> bool {
        !(self.hide_target
            && from == self.target
            && matches!(frame.kind, CommandKind::InventoryReply { .. }))
    }
}

/// Firmware each token held and the highest version it reached, sampled
/// between stages.
struct Ledger {
    issued: Vec<Vec<u8>>,
    peak_ver: BTreeMap<TokenId, u32>,
}

impl Ledger {
    fn new(w: &World) -> Self {
        let mut l = Self {
            issued: vec![w.firmware.bytes.clone()],
            peak_ver: BTreeMap::new(),
        };
        l.sample(&w.sim);
        l
    }

    fn sample(&mut self, sim: &Simulator) {
        for t in sim.tokens() {
            if let Some(fw) = t.installed_firmware() {
                if !self.issued.iter().any(|x| x == fw) {
                    self.issued.push(fw.to_vec());
                }
            }
            let v = self.peak_ver.entry(t.id()).or_insert(0);
            *v = (*v).max(t.ver());
        }
    }

    fn score(&self, sim: &Simulator, out: &mut AttackOutcome) {
        for t in sim.tokens() {
            if t.installed_firmware().is_some_and(|fw| !self.issued.iter().any(|x| x == fw)) {
                out.foreign_install = true;
            }
            if t.ver() < self.peak_ver.get(&t.id()).copied().unwrap_or(0) {
                out.version_decreased = true;
            }
        }
    }
}

fn accepted_since(sim: &Simulator, from: usize, who: impl Fn(TokenId) -> bool) -> bool {
    sim.finalize_log()[from..].iter().any(|r| r.accepted && who(r.id))
}

#[cfg(feature = "insecure-positive-controls")]
fn disable_mac_checks(sim: &mut Simulator) {
    for i in 0..sim.node_count() {
        sim.token_mut(i).set_skip_mac_verification(true);
    }
}

#[cfg(not(feature = "insecure-positive-controls"))]
fn disable_mac_checks(_sim: &mut Simulator) {
    unreachable!("positive controls are not compiled in");
}

/// Runs `script` against a fresh world for `seed`.
pub fn run_attack(sc: &Scenario, seed: u64, script: &AttackScript) -> io::Result<AttackOutcome> {
    execute(sc, seed, script, false)
}

/// The same attack with the defence it targets switched off: MAC checks
/// for the update attacks, key secrecy for eavesdropping and attestation for
/// spoofed acknowledgements.
#[cfg(feature = "insecure-positive-controls")]
pub fn run_positive_control(
    sc: &Scenario,
    seed: u64,
    script: &AttackScript,
) -> io::Result<AttackOutcome> {
    execute(sc, seed, script, true)
}

fn execute(
    sc: &Scenario,
    seed: u64,
    script: &AttackScript,
    unprotected: bool,
) -> io::Result<AttackOutcome> {
    let mut sc = sc.clone();
    if *script == AttackScript::UnauthorizedDevice {
        let n = sc.node_count();
        sc.tokens.resize(n, TokenSpec::default());
        sc.tokens.push(TokenSpec {
            foreign: true,
            ..TokenSpec::default()
        });
    }
    let mut w = build_world(&sc, seed)?;
    let mac_off = unprotected && *script != AttackScript::Eavesdrop && !matches!(script, AttackScript::SpoofAck { .. });
    if mac_off {
        disable_mac_checks(&mut w.sim);
    }
    let mut rng = RandomSource::from_seed(seed).fork(0xAD);
    let mut out = AttackOutcome::new(script, seed, unprotected);
    let mut ledger = Ledger::new(&w);

    match script {
        AttackScript::Eavesdrop => {
            w.server.run_update(&mut w.sim, &w.firmware);
            let cap = eavesdrop_extract(w.sim.transcript());
            let mut overlap = longest_common_substring(&cap.ciphertext, &w.firmware.bytes);
            if unprotected {
                // White-box: one device key has leaked.
                let k = w.server.db.get(&w.ids[0]).map(|e| e.k.clone());
                if let (Some(k), Some(iv)) = (k, cap.iv) {
                    for wk in &cap.wrapped_keys {
                        let sk = unwrap_key(&k, wk);
                        let pt = CipherBlockChain::from_bytes(iv, &cap.ciphertext)
                            .and_then(|ct| skp_decrypt(&sk, &ct));
                        if let Ok(pt) = pt {
                            overlap = overlap.max(longest_common_substring(&pt, &w.firmware.bytes));
                        }
                    }
                }
            }
            out.plaintext_overlap = Some(overlap);
            out.plaintext_recovered = overlap >= RECOVERY_THRESHOLD;
        }
        AttackScript::InjectFirmware(malicious) => {
            let sk = SymmetricKey::random(&mut rng);
            let guess = SymmetricKey::random(&mut rng);
            let iv = rng.block();
            let ct = skp_encrypt(&sk, &iv, malicious).to_bytes();
            let plan = chunk_firmware(&ct, DEFAULT_CHUNK_PAYLOAD).map_err(io::Error::other)?;
            let nver = sc.firmware.installed_version + 1;
            let auths = w
                .ids
                .iter()
                .enumerate()
                .map(|(i, id)| {
                    let a = Auth {
                        wrapped_sk: rng.block(),
                        s: mac_compute(&guess, &crate::token::mac_message(malicious, sc.firmware.installed_version, nver)),
                        nver,
                        t_lpm_ms: 0,
                        t_active_ms: None,
                        iv,
                        pilot: i == 0,
                    };
                    (*id, a)
                })
                .collect();
            let chunks = plan.packets.iter().map(|c| (c.index, c.data.clone())).collect();
            let mark = w.sim.finalize_log().len();
            rogue_session(&mut w.sim, &auths, &chunks);
            out.attacker_update_accepted = accepted_since(&w.sim, mark, |_| true);
        }
        AttackScript::TamperChunk { index, mask } => {
            w.sim.set_interceptor(Box::new(ChunkTamper {
                index: *index,
                mask: (*mask).max(1),
            }));
            let mark = w.sim.finalize_log().len();
            w.server.run_update(&mut w.sim, &w.firmware);
            out.attacker_update_accepted = accepted_since(&w.sim, mark, |_| true)
                && w.sim.tokens().any(|t| t.installed_firmware() != Some(&w.firmware.bytes[..]));
        }
        AttackScript::ReplaySession => {
            w.server.run_update(&mut w.sim, &w.firmware);
            ledger.sample(&w.sim);
            let rec = Recording::from_transcript(w.sim.transcript()).unwrap_or_default();
            let mark = w.sim.finalize_log().len();
            w.sim.wait(1.0);
            rogue_session(&mut w.sim, &rec.auths, &rec.chunks);
            out.attacker_update_accepted = accepted_since(&w.sim, mark, |_| true);
        }
        AttackScript::Downgrade => {
            w.server.run_update(&mut w.sim, &w.firmware);
            ledger.sample(&w.sim);
            let old = Recording::from_transcript(w.sim.transcript()).unwrap_or_default();
            let newer = FirmwareImage {
                bytes: rng_bytes(&mut rng, w.firmware.bytes.len()),
                version: w.firmware.version + 1,
            };
            ledger.issued.push(newer.bytes.clone());
            w.sim.wait(1.0);
            w.server.run_update(&mut w.sim, &newer);
            ledger.sample(&w.sim);
            let mark = w.sim.finalize_log().len();
            w.sim.wait(1.0);
            rogue_session(&mut w.sim, &old.auths, &old.chunks);
            out.attacker_update_accepted = accepted_since(&w.sim, mark, |_| true);
        }
        AttackScript::SpoofAck { target } => {
            let target = w.ids[*target % w.ids.len()];
            w.sim.set_interceptor(Box::new(AckSpoofer {
                target,
                nver: None,
                after_eob: false,
                hide_target: false,
                target_handle: None,
                target_is_pilot: false,
            }));
            let report = w.server.run_update(&mut w.sim, &w.firmware);
            w.sim.take_interceptor();
            let idx = w.sim.index_of(target).expect("target exists");
            let really = w.sim.token(idx).ver() == w.firmware.version;
            out.server_fooled =
                Some(report.outcomes.get(&target) == Some(&TokenOutcome::Updated) && !really);
            if !unprotected {
                let seg = Segment {
                    offset: 0,
                    len: u16::try_from(w.firmware.bytes.len()).unwrap_or(u16::MAX),
                };
                let verdict =
                    w.server
                        .attest(&mut w.sim, target, AttestMode::Elaborate, seg, &w.firmware.bytes);
                out.attestation_caught = Some(!matches!(verdict, Ok((true, _))));
            }
        }
        AttackScript::UnauthorizedDevice => {
            let foreign = *w.ids.last().expect("foreign token appended");
            let report = w.server.run_update(&mut w.sim, &w.firmware);
            out.control_updated = Some(
                w.ids
                    .iter()
                    .filter(|id| **id != foreign)
                    .all(|id| report.outcomes.get(id) == Some(&TokenOutcome::Updated)),
            );
            ledger.sample(&w.sim);
            let mut rec = Recording::from_transcript(w.sim.transcript()).unwrap_or_default();
            // Present a victim's association material as the foreign device's own.
            let victim = rec.auths.values().next().cloned();
            rec.auths = victim
                .map(|a| (foreign, Auth { pilot: true, ..a }))
                .into_iter()
                .collect();
            let mark = w.sim.finalize_log().len();
            w.sim.wait(1.0);
            rogue_session(&mut w.sim, &rec.auths, &rec.chunks);
            out.attacker_update_accepted = accepted_since(&w.sim, mark, |id| id == foreign);
        }
    }
    ledger.score(&w.sim, &mut out);
    Ok(out)
}

pub fn write_outcomes<W: io::Write>(rows: &[AttackOutcome], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lcs_basics() {
        assert_eq!(longest_common_substring(b"xxabcdyy", b"zabcdz"), 4);
        assert_eq!(longest_common_substring(b"", b"abc"), 0);
    }
}
