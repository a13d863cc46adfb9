// Licensed under the Apache-2.0 license

//! The token endpoint: bootloader control flow, the segment access policy,
//! session phases, firmware validation and the attestation responder.
//!
//! Command handling is logical and instantaneous. The simulator charges the
//! physical cost of each [`Work`] item afterwards and calls back into
//! [`Token::boot`], [`Token::finalize_update`] or [`Token::attest_respond`]
//! once the corresponding computation has actually completed.

use serde::Serialize;

use crate::crypto::{
    mac_compute, mac_verify, skp_decrypt, unwrap_key, Block, CipherBlockChain, MacTag,
    SymmetricKey, BLOCK_LEN,
};
use crate::power::PamParams;
use crate::wire::{AttestMode, CommandKind, Frame, Handle, Segment, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Role {
    Pilot,
    Observer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum TokenPhase {
    Off,
    Bootloader,
    AppExec,
    WisecrAssoc,
    WisecrBroadcast(Role),
    WisecrValidate,
    WisecrAttest,
}

impl TokenPhase {
    pub fn role(&self) -> Option<Role> {
        match self {
            Self::WisecrBroadcast(r) => Some(*r),
            _ => None,
        }
    }
}

/// Memory segments enforced by the simulated MPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MemSegment {
    /// Secure storage: id, device key, version.
    M,
    /// Bootloader image and interrupt vectors.
    Mrx,
    /// Application code, data and the download region.
    Mrwx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessOp {
    Read,
    Write,
    Execute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Allowed,
    ResetToBootloader,
}

/// Access policy. Only application code is restricted; every other phase
/// runs bootloader code with full access.
pub fn access_policy(phase: TokenPhase, segment: MemSegment, op: AccessOp) -> Access {
    match (phase, segment, op) {
        (TokenPhase::AppExec, MemSegment::M, _) => Access::ResetToBootloader,
        (TokenPhase::AppExec, MemSegment::Mrx, AccessOp::Write) => Access::ResetToBootloader,
        _ => Access::Allowed,
    }
}

/// Non-volatile secure storage.
#[derive(Clone)]
pub struct SecureStorage {
    id: TokenId,
    k: SymmetricKey,
    ver: u32,
}

/// Volatile session state. Dropping it wipes the session key.
#[derive(Debug, Clone)]
pub struct SessionScratch {
    pub sk: SymmetricKey,
    pub iv: Block,
    pub s_received: MacTag,
    pub nver: u32,
    pub pam: PamParams,
    pub pilot: bool,
    download: Vec<u8>,
    written_end: usize,
}

impl SessionScratch {
    pub fn download(&self) -> &[u8] {
        &self.download[..self.written_end]
    }
}

#[derive(Debug, Clone)]
struct AttestScratch {
    sk: SymmetricKey,
    challenge: Block,
    mode: AttestMode,
    segment: Segment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenConfig {
    /// Download region size in bytes; blocks beyond it are dropped.
    pub download_capacity: usize,
    /// Bytes per SecureComm frame, used to place blocks by index.
    pub chunk_payload: usize,
    /// Observers also report corrupted frames. Off by default: only the
    /// pilot speaks during a broadcast.
    pub reliable_broadcast: bool,
}

impl Default for TokenConfig {
    fn default() -> Self {
        Self {
            download_capacity: 4096,
            chunk_payload: crate::wire::DEFAULT_CHUNK_PAYLOAD,
            reliable_broadcast: false,
        }
    }
}

/// What the token must now spend energy on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Work {
    /// Not for this token, or not valid in the current phase.
    Ignored,
    /// Radio processing only.
    Receive,
    ObserverStore,
    PilotStore,
    /// Receive, then reboot through the bootloader.
    Reset,
    /// Receive, then unwrap the session key.
    Associate,
    /// Receive, then decrypt and MAC `bytes` of ciphertext under `pam`.
    Validate { bytes: usize, pam: PamParams },
    /// Receive, then compute the attestation response.
    Attest { mode: AttestMode, blocks: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub work: Work,
    pub reply: Option<Frame>,
}

impl Outcome {
    fn ignored() -> Self {
        Self {
            work: Work::Ignored,
            reply: None,
        }
    }

    fn silent(work: Work) -> Self {
        Self { work, reply: None }
    }

    fn reply(work: Work, kind: CommandKind) -> Self {
        Self {
            work,
            reply: Some(Frame::broadcast(kind)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreError {
    OutOfRange,
}

const BOOTLOADER_IMAGE: &[u8] = b"wisecr immutable bootloader image, interrupt vectors follow\0";

#[derive(Clone)]
pub struct Token {
    storage: SecureStorage,
    bootloader: Vec<u8>,
    firmware: Option<Vec<u8>>,
    wisecr_flag: bool,
    phase: TokenPhase,
    scratch: Option<SessionScratch>,
    attest: Option<AttestScratch>,
    /// id and ver as copied out for the application at boot.
    app_view: Option<(TokenId, u32)>,
    handle: Option<Handle>,
    vt_mv: u16,
    cfg: TokenConfig,
    #[cfg(feature = "insecure-positive-controls")]
    skip_mac_verification: bool,
}

impl std::fmt::Debug for Token {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Token")
            .field("id", &self.storage.id)
            .field("ver", &self.storage.ver)
            .field("phase", &self.phase)
            .field("wisecr_flag", &self.wisecr_flag)
            .field("handle", &self.handle)
            .finish_non_exhaustive()
    }
}

impl Token {
    /// A provisioned token, unpowered. `firmware == None` means no valid
    /// application is installed.
    pub fn provision(
        id: TokenId,
        k: SymmetricKey,
        ver: u32,
        firmware: Option<Vec<u8>>,
        cfg: TokenConfig,
    ) -> Self {
        Self {
            storage: SecureStorage { id, k, ver },
            bootloader: BOOTLOADER_IMAGE.to_vec(),
            firmware,
            wisecr_flag: false,
            phase: TokenPhase::Off,
            scratch: None,
            attest: None,
            app_view: None,
            handle: None,
            vt_mv: 0,
            cfg,
            #[cfg(feature = "insecure-positive-controls")]
            skip_mac_verification: false,
        }
    }

    pub fn id(&self) -> TokenId {
        self.storage.id
    }

    pub fn ver(&self) -> u32 {
        self.storage.ver
    }

    /// Harness inspection of the device key; never reachable over the air.
    pub fn device_key(&self) -> &SymmetricKey {
        &self.storage.k
    }

    pub fn phase(&self) -> TokenPhase {
        self.phase
    }

    pub fn wisecr_flag(&self) -> bool {
        self.wisecr_flag
    }

    pub fn installed_firmware(&self) -> Option<&[u8]> {
        self.firmware.as_deref()
    }

    pub fn bootloader_image(&self) -> &[u8] {
        &self.bootloader
    }

    pub fn scratch(&self) -> Option<&SessionScratch> {
        self.scratch.as_ref()
    }

    /// True while any session key is held in volatile memory.
    pub fn holds_key_material(&self) -> bool {
        self.scratch.is_some() || self.attest.is_some()
    }

    pub fn handle(&self) -> Option<Handle> {
        self.handle
    }

    pub fn assign_handle(&mut self, h: Handle) {
        self.handle = Some(h);
    }

    pub fn vt_mv(&self) -> u16 {
        self.vt_mv
    }

    pub fn app_view(&self) -> Option<(TokenId, u32)> {
        self.app_view
    }

    pub fn is_powered(&self) -> bool {
        self.phase != TokenPhase::Off
    }

    pub fn role(&self) -> Option<Role> {
        self.phase.role()
    }

    #[cfg(feature = "insecure-positive-controls")]
    pub fn set_skip_mac_verification(&mut self, skip: bool) {
        self.skip_mac_verification = skip;
    }

    fn mac_check_disabled(&self) -> bool {
        #[cfg(feature = "insecure-positive-controls")]
        {
            self.skip_mac_verification
        }
        #[cfg(not(feature = "insecure-positive-controls"))]
        {
            false
        }
    }

    /// Bootloader entry after power-up or soft reset.
    pub fn boot(&mut self) -> TokenPhase {
        self.scratch = None;
        self.attest = None;
        self.handle = None;
        self.app_view = None;
        self.phase = if self.wisecr_flag {
            TokenPhase::WisecrAssoc
        } else if self.firmware.is_some() {
            self.app_view = Some((self.storage.id, self.storage.ver));
            self.vt_mv = 0;
            TokenPhase::AppExec
        } else {
            TokenPhase::Bootloader
        };
        self.phase
    }

    fn soft_reset(&mut self) {
        self.scratch = None;
        self.attest = None;
        self.handle = None;
        self.phase = TokenPhase::Bootloader;
    }

    /// Records the SNIFF reading taken right after booting into the update
    /// state machine.
    pub fn record_vt(&mut self, vt: f64) {
        self.vt_mv = (vt * 1000.0).round().clamp(0.0, f64::from(u16::MAX)) as u16;
    }

    pub fn on_power_loss(&mut self) {
        self.phase = TokenPhase::Off;
        self.scratch = None;
        self.attest = None;
        self.handle = None;
        self.app_view = None;
    }

    pub fn mem_access(&mut self, segment: MemSegment, op: AccessOp) -> Access {
        let access = access_policy(self.phase, segment, op);
        if access == Access::ResetToBootloader {
            self.soft_reset();
            self.boot();
        }
        access
    }

    fn addressed_to_me(&self, frame: &Frame) -> bool {
        frame.handle.is_some() && frame.handle == self.handle
    }

    /// Reaction to a frame whose CRC did not verify. Only a pilot reports it.
    pub fn handle_corrupted(&mut self) -> Outcome {
        match self.phase {
            TokenPhase::WisecrBroadcast(Role::Pilot) => {
                Outcome::reply(Work::Receive, CommandKind::Ack { crc_error: true })
            }
            TokenPhase::WisecrBroadcast(Role::Observer) if self.cfg.reliable_broadcast => {
                Outcome::reply(Work::Receive, CommandKind::Ack { crc_error: true })
            }
            TokenPhase::Off => Outcome::ignored(),
            _ => Outcome::silent(Work::Receive),
        }
    }

    pub fn handle_command(&mut self, frame: &Frame) -> Outcome {
        use CommandKind as K;
        let mine = self.addressed_to_me(frame);
        match (self.phase, &frame.kind) {
            (TokenPhase::Off, _) => Outcome::ignored(),

            (TokenPhase::AppExec | TokenPhase::Bootloader | TokenPhase::WisecrAssoc, K::Inventory) => {
                let (id, ver) = self
                    .app_view
                    .unwrap_or((self.storage.id, self.storage.ver));
                let vt_mv = if self.phase == TokenPhase::WisecrAssoc {
                    self.vt_mv
                } else {
                    0
                };
                Outcome::reply(Work::Receive, K::InventoryReply { id, ver, vt_mv })
            }
            // A new inventory round abandons a session that lost track of
            // the reader.
            (TokenPhase::WisecrBroadcast(_), K::Inventory) => {
                self.soft_reset();
                Outcome::silent(Work::Reset)
            }

            (TokenPhase::AppExec | TokenPhase::Bootloader, K::EnterWisecr) if mine => {
                self.wisecr_flag = true;
                self.soft_reset();
                Outcome::silent(Work::Reset)
            }

            (
                TokenPhase::WisecrAssoc,
                K::Authenticate {
                    wrapped_sk,
                    s,
                    nver,
                    t_lpm_ms,
                    t_active_ms,
                    iv,
                    pilot,
                },
            ) if mine => {
                let pam = PamParams {
                    t_active_ms: *t_active_ms,
                    t_lpm_ms: *t_lpm_ms,
                    update_advised: true,
                };
                self.security_associate(wrapped_sk, *s, *nver, pam, *iv, *pilot);
                Outcome::reply(Work::Associate, K::Ack { crc_error: false })
            }

            (TokenPhase::WisecrBroadcast(role), K::SecureComm { index, data }) => {
                if role == Role::Pilot && !mine {
                    return Outcome::ignored();
                }
                // Out-of-range blocks are dropped without a reply.
                let _ = self.store_block(*index, data);
                match role {
                    Role::Pilot => {
                        Outcome::reply(Work::PilotStore, K::Ack { crc_error: false })
                    }
                    Role::Observer => Outcome::silent(Work::ObserverStore),
                }
            }

            (TokenPhase::WisecrBroadcast(role), K::Eob) => {
                if role == Role::Pilot && !mine {
                    return Outcome::ignored();
                }
                let Some(scratch) = &self.scratch else {
                    return Outcome::ignored();
                };
                let work = Work::Validate {
                    bytes: scratch.written_end,
                    pam: scratch.pam,
                };
                self.phase = TokenPhase::WisecrValidate;
                match role {
                    Role::Pilot => Outcome::reply(work, K::Ack { crc_error: false }),
                    Role::Observer => Outcome::silent(work),
                }
            }

            (
                TokenPhase::WisecrAssoc,
                K::AttestRequest {
                    wrapped_sk,
                    challenge,
                    mode,
                    segment,
                },
            ) if mine => {
                self.attest = Some(AttestScratch {
                    sk: unwrap_key(&self.storage.k, wrapped_sk),
                    challenge: *challenge,
                    mode: *mode,
                    segment: *segment,
                });
                self.phase = TokenPhase::WisecrAttest;
                let blocks = match mode {
                    AttestMode::Fast => 0,
                    AttestMode::Elaborate => self.segment_bytes(*segment).len().div_ceil(BLOCK_LEN),
                };
                Outcome::silent(Work::Attest {
                    mode: *mode,
                    blocks,
                })
            }

            (TokenPhase::AppExec | TokenPhase::Bootloader | TokenPhase::WisecrAssoc, _) if mine => {
                Outcome::silent(Work::Receive)
            }
            _ => Outcome::ignored(),
        }
    }

    pub fn security_associate(
        &mut self,
        wrapped_sk: &Block,
        s: MacTag,
        nver: u32,
        pam: PamParams,
        iv: Block,
        pilot: bool,
    ) {
        debug_assert_eq!(self.phase, TokenPhase::WisecrAssoc);
        self.scratch = Some(SessionScratch {
            sk: unwrap_key(&self.storage.k, wrapped_sk),
            iv,
            s_received: s,
            nver,
            pam,
            pilot,
            download: vec![0; self.cfg.download_capacity],
            written_end: 0,
        });
        self.phase = TokenPhase::WisecrBroadcast(if pilot { Role::Pilot } else { Role::Observer });
    }

    pub fn store_block(&mut self, index: u16, data: &[u8]) -> Result<(), StoreError> {
        let payload = self.cfg.chunk_payload;
        let scratch = self.scratch.as_mut().ok_or(StoreError::OutOfRange)?;
        let start = usize::from(index) * payload;
        let end = start + data.len();
        if data.len() > payload || end > scratch.download.len() {
            return Err(StoreError::OutOfRange);
        }
        scratch.download[start..end].copy_from_slice(data);
        scratch.written_end = scratch.written_end.max(end);
        Ok(())
    }

    /// Decrypts the download region, checks the MAC binding firmware, the
    /// current version and the new version, and commits on success. The
    /// token reboots either way.
    pub fn finalize_update(&mut self) -> bool {
        let Some(scratch) = self.scratch.take() else {
            self.soft_reset();
            self.boot();
            return false;
        };
        let plaintext = CipherBlockChain::from_bytes(scratch.iv, scratch.download())
            .and_then(|ct| skp_decrypt(&scratch.sk, &ct));
        let accept = match plaintext {
            Ok(fw) => {
                let msg = mac_message(&fw, self.storage.ver, scratch.nver);
                let ok = mac_verify(&self.storage.k, &msg, &scratch.s_received)
                    || self.mac_check_disabled();
                if ok {
                    self.commit(fw, scratch.nver);
                }
                ok
            }
            Err(_) if self.mac_check_disabled() => {
                self.commit(scratch.download().to_vec(), scratch.nver);
                true
            }
            Err(_) => false,
        };
        self.wisecr_flag = false;
        self.soft_reset();
        self.boot();
        accept
    }

    /// Firmware and version change together or not at all.
    fn commit(&mut self, firmware: Vec<u8>, nver: u32) {
        self.firmware = Some(firmware);
        self.storage.ver = nver;
    }

    fn segment_bytes(&self, segment: Segment) -> &[u8] {
        segment_of(self.firmware.as_deref().unwrap_or(&[]), segment)
    }

    /// Attestation response over the installed state; clears the flag and
    /// reboots after replying.
    pub fn attest_respond(&mut self) -> Option<Frame> {
        let a = self.attest.take()?;
        let r = attestation_tag(
            &a.sk,
            &a.challenge,
            a.mode,
            self.segment_bytes(a.segment),
            self.storage.id,
            self.storage.ver,
        );
        self.wisecr_flag = false;
        self.soft_reset();
        self.boot();
        Some(Frame::broadcast(CommandKind::AttestReply { r }))
    }
}

/// `firmware || ver || nver`, versions big-endian.
pub fn mac_message(firmware: &[u8], ver: u32, nver: u32) -> Vec<u8> {
    let mut m = Vec::with_capacity(firmware.len() + 8);
    m.extend_from_slice(firmware);
    m.extend_from_slice(&ver.to_be_bytes());
    m.extend_from_slice(&nver.to_be_bytes());
    m
}

pub fn segment_of(firmware: &[u8], segment: Segment) -> &[u8] {
    let start = usize::from(segment.offset).min(firmware.len());
    let end = (start + usize::from(segment.len)).min(firmware.len());
    &firmware[start..end]
}

/// Fast: MAC_sk(c || id || ver). Elaborate: MAC_sk(c || segment || id || ver).
pub fn attestation_tag(
    sk: &SymmetricKey,
    challenge: &Block,
    mode: AttestMode,
    segment: &[u8],
    id: TokenId,
    ver: u32,
) -> MacTag {
    let mut m = Vec::with_capacity(BLOCK_LEN + segment.len() + 16);
    m.extend_from_slice(challenge);
    if mode == AttestMode::Elaborate {
        m.extend_from_slice(segment);
    }
    m.extend_from_slice(&id.0);
    m.extend_from_slice(&ver.to_be_bytes());
    mac_compute(sk, &m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{skp_encrypt, wrap_key};
    use crate::wire::chunk_firmware;

    fn token(firmware: Option<Vec<u8>>) -> Token {
        Token::provision(
            TokenId::from_index(1, 1),
            SymmetricKey::from_bytes([7; 16]),
            1,
            firmware,
            TokenConfig::default(),
        )
    }

    #[test]
    fn boot_paths() {
        let mut t = token(Some(vec![1, 2, 3]));
        assert_eq!(t.boot(), TokenPhase::AppExec);
        let mut t = token(None);
        assert_eq!(t.boot(), TokenPhase::Bootloader);
        t.wisecr_flag = true;
        assert_eq!(t.boot(), TokenPhase::WisecrAssoc);
    }

    #[test]
    fn policy_table() {
        use AccessOp::*;
        use MemSegment::*;
        for op in [Read, Write, Execute] {
            assert_eq!(access_policy(TokenPhase::AppExec, M, op), Access::ResetToBootloader);
            assert_eq!(access_policy(TokenPhase::Bootloader, M, op), Access::Allowed);
            assert_eq!(access_policy(TokenPhase::AppExec, Mrwx, op), Access::Allowed);
        }
        assert_eq!(access_policy(TokenPhase::AppExec, Mrx, Write), Access::ResetToBootloader);
        assert_eq!(access_policy(TokenPhase::AppExec, Mrx, Read), Access::Allowed);
    }

    #[test]
    fn enter_wisecr_sets_flag_and_resets() {
        let mut t = token(Some(vec![1]));
        t.boot();
        t.assign_handle(Handle(9));
        let out = t.handle_command(&Frame::to(Handle(9), CommandKind::EnterWisecr));
        assert_eq!(out.work, Work::Reset);
        assert!(t.wisecr_flag());
        assert_eq!(t.boot(), TokenPhase::WisecrAssoc);
    }

    #[test]
    fn full_session_accepts_and_bumps_version() {
        let k = SymmetricKey::from_bytes([7; 16]);
        let sk = SymmetricKey::from_bytes([3; 16]);
        let iv = [5; 16];
        let fw = b"new application image".to_vec();
        let ct = skp_encrypt(&sk, &iv, &fw).to_bytes();
        let plan = chunk_firmware(&ct, 2).unwrap();
        let s = mac_compute(&k, &mac_message(&fw, 1, 2));

        let mut t = token(Some(vec![0]));
        t.wisecr_flag = true;
        t.boot();
        t.assign_handle(Handle(1));
        t.security_associate(&wrap_key(&k, &sk), s, 2, PamParams::CONTINUOUS, iv, true);
        for c in &plan.packets {
            t.store_block(c.index, &c.data).unwrap();
        }
        assert!(t.finalize_update());
        assert_eq!(t.ver(), 2);
        assert_eq!(t.installed_firmware(), Some(&fw[..]));
        assert_eq!(t.phase(), TokenPhase::AppExec);
        assert!(!t.holds_key_material());
    }

    #[test]
    fn out_of_range_block_is_dropped() {
        let mut t = token(None);
        t.wisecr_flag = true;
        t.boot();
        t.security_associate(&[0; 16], MacTag([0; 16]), 2, PamParams::CONTINUOUS, [0; 16], false);
        assert_eq!(t.store_block(u16::MAX, &[1, 2]), Err(StoreError::OutOfRange));
    }
}
