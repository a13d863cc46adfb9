// Licensed under the Apache-2.0 license

//! The server: token database, session preparation, per-token association,
//! pilot election, broadcast orchestration, version-based validation and
//! attestation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    mac_compute, skp_encrypt, wrap_key, Block, MacTag, RandomSource, SymmetricKey,
};
use crate::power::{pam_get, PamParams};
use crate::sim::{InventoryObs, Sender, SimTime, Simulator, ACK_TIMEOUT_S};
use crate::token::{attestation_tag, mac_message, segment_of};
use crate::wire::{chunk_firmware, AttestMode, ChunkPlan, CommandKind, Frame, Handle, Segment, TokenId, WireError};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("no eligible token answered the association inventory")]
    NoEligibleTokens,
    #[error("token {0} is not in the database")]
    UnknownToken(TokenId),
    #[error("unknown token {0} answered; strict mode aborts the session")]
    UnknownTokenAbort(TokenId),
    #[error("firmware image is empty")]
    EmptyFirmware,
    #[error("pilot did not acknowledge within the timeout")]
    PilotTimeout,
    #[error("token {0} did not answer the attestation request")]
    NoAttestReply(TokenId),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Clone, PartialEq, Eq)]
pub struct DbEntry {
    pub id: TokenId,
    pub k: SymmetricKey,
    pub ver: u32,
    /// Scheduled for update.
    pub valid: bool,
}

impl fmt::Debug for DbEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DbEntry")
            .field("id", &self.id)
            .field("ver", &self.ver)
            .field("valid", &self.valid)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DbRecord {
    id: TokenId,
    #[serde(with = "hex::serde")]
    key: [u8; 16],
    ver: u32,
    #[serde(default = "yes")]
    valid: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct DbFile {
    tokens: Vec<DbRecord>,
}

#[derive(Debug, Error)]
pub enum DbError {
    #[error("duplicate token id {0}")]
    DuplicateId(TokenId),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenDb {
    entries: BTreeMap<TokenId, DbEntry>,
}

impl TokenDb {
    pub fn insert(&mut self, e: DbEntry) -> Result<(), DbError> {
        if self.entries.contains_key(&e.id) {
            return Err(DbError::DuplicateId(e.id));
        }
        self.entries.insert(e.id, e);
        Ok(())
    }

    pub fn get(&self, id: &TokenId) -> Option<&DbEntry> {
        self.entries.get(id)
    }

    pub fn get_mut(&mut self, id: &TokenId) -> Option<&mut DbEntry> {
        self.entries.get_mut(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &DbEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn from_file(f: DbFile) -> Result<Self, DbError> {
        let mut db = Self::default();
        for r in f.tokens {
            db.insert(DbEntry {
                id: r.id,
                k: SymmetricKey::from_bytes(r.key),
                ver: r.ver,
                valid: r.valid,
            })?;
        }
        Ok(db)
    }

    /// `[[tokens]]` tables with `id`, `key` (hex), `ver` and `valid`.
    pub fn from_toml(s: &str) -> Result<Self, DbError> {
        Self::from_file(toml::from_str(s)?)
    }

    pub fn from_json(s: &str) -> Result<Self, DbError> {
        Self::from_file(serde_json::from_str(s)?)
    }

    pub fn to_toml(&self) -> String {
        let f = DbFile {
            tokens: self
                .iter()
                .map(|e| DbRecord {
                    id: e.id,
                    key: *e.k.as_bytes(),
                    ver: e.ver,
                    valid: e.valid,
                })
                .collect(),
        };
        toml::to_string(&f).expect("db serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirmwareImage {
    pub bytes: Vec<u8>,
    pub version: u32,
}

/// Per-token association material.
#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    pub id: TokenId,
    pub handle: Handle,
    pub wrapped_sk: Block,
    pub s: MacTag,
    pub pam: PamParams,
    pub vt: f64,
    pub reported_ver: u32,
}

#[derive(Debug, Clone)]
pub struct UpdatePlan {
    pub sk: SymmetricKey,
    pub iv: Block,
    pub firmware: Vec<u8>,
    pub ciphertext: Vec<u8>,
    pub chunks: ChunkPlan,
    pub nver: u32,
    pub associations: Vec<Association>,
}

/// Fresh session key and IV, firmware encrypted and chunked.
pub fn prelude(
    firmware: &FirmwareImage,
    rng: &mut RandomSource,
    chunk_payload: usize,
) -> Result<UpdatePlan, ServerError> {
    if firmware.bytes.is_empty() {
        return Err(ServerError::EmptyFirmware);
    }
    let sk = SymmetricKey::random(rng);
    let iv = rng.block();
    let ciphertext = skp_encrypt(&sk, &iv, &firmware.bytes).to_bytes();
    let chunks = chunk_firmware(&ciphertext, chunk_payload)?;
    Ok(UpdatePlan {
        sk,
        iv,
        firmware: firmware.bytes.clone(),
        ciphertext,
        chunks,
        nver: firmware.version,
        associations: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExclusionReason {
    UnknownId,
    NotScheduled,
    AlreadyCurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationPolicy {
    /// Abort the whole session on an unknown id instead of excluding it.
    pub strict_abort: bool,
    /// Continuous execution for everyone when false.
    pub pam_disabled: bool,
}

/// Builds one association per eligible responder. Unknown and unscheduled
/// ids are excluded and never receive association material.
pub fn security_association(
    plan: &mut UpdatePlan,
    db: &TokenDb,
    responses: &[InventoryObs],
    policy: AssociationPolicy,
) -> Result<Vec<(TokenId, ExclusionReason)>, ServerError> {
    let mut excluded = Vec::new();
    plan.associations.clear();
    for r in responses {
        let Some(entry) = db.get(&r.id) else {
            if policy.strict_abort {
                return Err(ServerError::UnknownTokenAbort(r.id));
            }
            warn!("rejecting unknown token {}", r.id);
            excluded.push((r.id, ExclusionReason::UnknownId));
            continue;
        };
        if !entry.valid {
            excluded.push((r.id, ExclusionReason::NotScheduled));
            continue;
        }
        if r.ver >= plan.nver {
            excluded.push((r.id, ExclusionReason::AlreadyCurrent));
            continue;
        }
        if r.ver != entry.ver {
            warn!(
                "token {} reports version {} but the database holds {}",
                r.id, r.ver, entry.ver
            );
        }
        let pam = if policy.pam_disabled {
            PamParams::CONTINUOUS
        } else {
            pam_get(r.vt)
        };
        if !pam.update_advised {
            warn!("token {} reports Vt {:.3} V: update not advised", r.id, r.vt);
        }
        plan.associations.push(Association {
            id: r.id,
            handle: r.handle,
            wrapped_sk: wrap_key(&entry.k, &plan.sk),
            s: mac_compute(&entry.k, &mac_message(&plan.firmware, r.ver, plan.nver)),
            pam,
            vt: r.vt,
            reported_ver: r.ver,
        });
    }
    if plan.associations.is_empty() {
        return Err(ServerError::NoEligibleTokens);
    }
    Ok(excluded)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PilotStrategy {
    #[default]
    LowestVt,
    HighestVt,
    LowestReadRate,
    HighestReadRate,
    LowestRssi,
    HighestRssi,
    Random(u64),
}

impl PilotStrategy {
    pub const ALL_DETERMINISTIC: [PilotStrategy; 6] = [
        PilotStrategy::LowestVt,
        PilotStrategy::HighestVt,
        PilotStrategy::LowestReadRate,
        PilotStrategy::HighestReadRate,
        PilotStrategy::LowestRssi,
        PilotStrategy::HighestRssi,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::LowestVt => "lowest_vt",
            Self::HighestVt => "highest_vt",
            Self::LowestReadRate => "lowest_read_rate",
            Self::HighestReadRate => "highest_read_rate",
            Self::LowestRssi => "lowest_rssi",
            Self::HighestRssi => "highest_rssi",
            Self::Random(_) => "random",
        }
    }
}

impl fmt::Display for PilotStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Random(seed) => write!(f, "random:{seed}"),
            s => f.write_str(s.name()),
        }
    }
}

impl TryFrom<String> for PilotStrategy {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<PilotStrategy> for String {
    fn from(s: PilotStrategy) -> Self {
        s.to_string()
    }
}

impl FromStr for PilotStrategy {
    type Err = String;

    /// Accepts the snake-case names; `random` takes an optional `:seed`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (name, seed) = match s.split_once(':') {
            Some((n, seed)) => (n, Some(seed)),
            None => (s, None),
        };
        let strategy = match name {
            "lowest_vt" => Self::LowestVt,
            "highest_vt" => Self::HighestVt,
            "lowest_read_rate" => Self::LowestReadRate,
            "highest_read_rate" => Self::HighestReadRate,
            "lowest_rssi" => Self::LowestRssi,
            "highest_rssi" => Self::HighestRssi,
            "random" => Self::Random(
                seed.map(str::parse)
                    .transpose()
                    .map_err(|e| format!("bad random seed: {e}"))?
                    .unwrap_or(0),
            ),
            other => return Err(format!("unknown pilot strategy `{other}`")),
        };
        if seed.is_some() && !matches!(strategy, Self::Random(_)) {
            return Err(format!("strategy `{name}` takes no seed"));
        }
        Ok(strategy)
    }
}

/// Election inputs for one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub id: TokenId,
    pub vt: f64,
    pub read_rate: f64,
    pub rssi: f64,
}

impl From<&InventoryObs> for Candidate {
    fn from(o: &InventoryObs) -> Self {
        Self {
            id: o.id,
            vt: o.vt,
            read_rate: o.read_rate,
            rssi: o.rssi,
        }
    }
}

/// Picks the pilot. Ties go to the lexicographically smallest id.
pub fn elect_pilot(candidates: &[Candidate], strategy: PilotStrategy) -> Option<TokenId> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by_key(|c| c.id);
    let pick = |key: fn(&Candidate) -> f64, lowest: bool| {
        sorted
            .iter()
            .fold(None::<&Candidate>, |best, c| match best {
                None => Some(c),
                Some(b) => {
                    let better = if lowest {
                        key(c) < key(b)
                    } else {
                        key(c) > key(b)
                    };
                    Some(if better { c } else { b })
                }
            })
            .map(|c| c.id)
    };
    match strategy {
        PilotStrategy::LowestVt => pick(|c| c.vt, true),
        PilotStrategy::HighestVt => pick(|c| c.vt, false),
        PilotStrategy::LowestReadRate => pick(|c| c.read_rate, true),
        PilotStrategy::HighestReadRate => pick(|c| c.read_rate, false),
        PilotStrategy::LowestRssi => pick(|c| c.rssi, true),
        PilotStrategy::HighestRssi => pick(|c| c.rssi, false),
        PilotStrategy::Random(seed) => {
            if sorted.is_empty() {
                return None;
            }
            let i = RandomSource::from_seed(seed).below(sorted.len());
            Some(sorted[i].id)
        }
    }
}

/// Tokens whose reported version equals `nver`.
pub fn validate(nver: u32, inventory: &[(TokenId, u32)]) -> BTreeMap<TokenId, bool> {
    inventory.iter().map(|&(id, ver)| (id, ver == nver)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Challenge {
    pub wrapped_sk: Block,
    pub c: Block,
    pub expected: MacTag,
    pub mode: AttestMode,
    pub segment: Segment,
}

/// Fresh key and challenge; the expected response is computed with the same
/// formula the token uses, over the reference firmware.
pub fn attest_challenge(
    db: &TokenDb,
    id: TokenId,
    mode: AttestMode,
    segment: Segment,
    reference_firmware: &[u8],
    rng: &mut RandomSource,
) -> Result<Challenge, ServerError> {
    let entry = db.get(&id).ok_or(ServerError::UnknownToken(id))?;
    let sk = SymmetricKey::random(rng);
    let c = rng.block();
    let expected = attestation_tag(
        &sk,
        &c,
        mode,
        segment_of(reference_firmware, segment),
        id,
        entry.ver,
    );
    Ok(Challenge {
        wrapped_sk: wrap_key(&entry.k, &sk),
        c,
        expected,
        mode,
        segment,
    })
}

pub fn attest_verify(expected: &MacTag, received: &MacTag) -> bool {
    expected.ct_eq(received)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenOutcome {
    Updated,
    Failed,
    Excluded,
}

/// bits delivered to updated tokens per second of latency.
pub fn throughput_bps(firmware_bytes: usize, updated: usize, latency_s: f64) -> f64 {
    if latency_s > 0.0 {
        (firmware_bytes * 8 * updated) as f64 / latency_s
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionReport {
    pub latency_s: f64,
    pub throughput_bps: f64,
    pub attempts: u32,
    pub firmware_bytes: usize,
    pub outcomes: BTreeMap<TokenId, TokenOutcome>,
    pub first_attempt_all_updated: bool,
    pub pilot_timeouts: u32,
    pub secure_comm_frames: usize,
    pub retransmissions: usize,
    pub aborted: Option<String>,
    pub transcript_len: usize,
}

impl SessionReport {
    pub fn updated(&self) -> usize {
        self.outcomes
            .values()
            .filter(|o| **o == TokenOutcome::Updated)
            .count()
    }

    pub fn all_updated(&self) -> bool {
        !self.outcomes.is_empty() && self.outcomes.values().all(|o| *o == TokenOutcome::Updated)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub max_attempts: u32,
    pub strategy: PilotStrategy,
    pub sequential: bool,
    pub chunk_payload: usize,
    /// Retransmissions of one chunk before the attempt is abandoned.
    pub max_retransmissions: u32,
    pub policy: AssociationPolicy,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            max_attempts: 10,
            strategy: PilotStrategy::LowestVt,
            sequential: false,
            chunk_payload: crate::wire::DEFAULT_CHUNK_PAYLOAD,
            max_retransmissions: 16,
            policy: AssociationPolicy::default(),
        }
    }
}

#[derive(Debug, Default)]
struct AttemptResult {
    updated: Vec<TokenId>,
    excluded: Vec<(TokenId, ExclusionReason)>,
    pilot_timeout: bool,
    secure_comm_frames: usize,
    retransmissions: usize,
    last_reply: Option<SimTime>,
}

pub struct Server {
    pub db: TokenDb,
    pub cfg: ServerConfig,
    rng: RandomSource,
    sender: Sender,
}

impl Server {
    pub fn new(db: TokenDb, cfg: ServerConfig, rng: RandomSource) -> Self {
        Self {
            db,
            cfg,
            rng,
            sender: Sender::Reader,
        }
    }

    fn gap(&self, sim: &mut Simulator) {
        sim.wait(sim.config().link.turnaround_s);
    }

    fn send(&self, sim: &mut Simulator, frame: Frame) -> Result<SimTime, ServerError> {
        sim.transmit(&frame, self.sender)?;
        Ok(sim.now())
    }

    /// Runs inventory, association, broadcast and validation, retrying
    /// tokens that did not update, until everyone is done or attempts run
    /// out.
    pub fn run_update(&mut self, sim: &mut Simulator, fw: &FirmwareImage) -> SessionReport {
        let warmup = SimTime::from_secs(sim.config().link.warmup_s);
        if sim.now() < warmup {
            sim.advance(warmup);
        }
        let t0 = sim.now();
        let transcript_start = sim.transcript().len();
        let targets: BTreeSet<TokenId> = self
            .db
            .iter()
            .filter(|e| e.valid && e.ver < fw.version)
            .map(|e| e.id)
            .collect();

        let mut outcomes: BTreeMap<TokenId, TokenOutcome> = self
            .db
            .iter()
            .map(|e| {
                let o = if targets.contains(&e.id) {
                    TokenOutcome::Failed
                } else {
                    TokenOutcome::Excluded
                };
                (e.id, o)
            })
            .collect();
        let mut report = SessionReport {
            latency_s: 0.0,
            throughput_bps: 0.0,
            attempts: 0,
            firmware_bytes: fw.bytes.len(),
            outcomes: BTreeMap::new(),
            first_attempt_all_updated: false,
            pilot_timeouts: 0,
            secure_comm_frames: 0,
            retransmissions: 0,
            aborted: None,
            transcript_len: 0,
        };
        let mut last_reply = t0;

        let groups: Vec<BTreeSet<TokenId>> = if self.cfg.sequential {
            targets.iter().map(|id| BTreeSet::from([*id])).collect()
        } else {
            vec![targets.clone()]
        };
        'groups: for group in groups {
            let mut pending = group;
            let mut attempts = 0;
            while !pending.is_empty() && attempts < self.cfg.max_attempts {
                attempts += 1;
                report.attempts += 1;
                let res = match self.attempt(sim, fw, &pending) {
                    Ok(r) => r,
                    Err(ServerError::UnknownTokenAbort(id)) => {
                        report.aborted = Some(format!("unknown token {id}"));
                        break 'groups;
                    }
                    Err(e) => {
                        debug!("attempt {attempts} failed: {e}");
                        AttemptResult::default()
                    }
                };
                report.pilot_timeouts += u32::from(res.pilot_timeout);
                report.secure_comm_frames += res.secure_comm_frames;
                report.retransmissions += res.retransmissions;
                for (id, reason) in &res.excluded {
                    debug!("token {id} excluded: {reason:?}");
                }
                for id in &res.updated {
                    if pending.remove(id) {
                        outcomes.insert(*id, TokenOutcome::Updated);
                        if let Some(e) = self.db.get_mut(id) {
                            e.ver = fw.version;
                        }
                    }
                }
                if let Some(t) = res.last_reply {
                    last_reply = last_reply.max(t);
                }
                if report.attempts == 1 && !self.cfg.sequential {
                    report.first_attempt_all_updated = pending.is_empty();
                }
                if !pending.is_empty() && attempts < self.cfg.max_attempts {
                    sim.wait(sim.config().link.retry_gap_s);
                }
            }
            if !pending.is_empty() {
                info!("{} token(s) not updated after {attempts} attempts", pending.len());
            }
        }
        if self.cfg.sequential {
            report.first_attempt_all_updated = report.attempts as usize == targets.len()
                && outcomes.values().all(|o| *o != TokenOutcome::Failed);
        }
        // Nobody updated: the session lasted until the last attempt ended.
        if outcomes.values().all(|o| *o != TokenOutcome::Updated) {
            last_reply = sim.now();
        }
        report.latency_s = (last_reply - t0).as_secs();
        report.outcomes = outcomes;
        report.throughput_bps =
            throughput_bps(report.firmware_bytes, report.updated(), report.latency_s);
        report.transcript_len = sim.transcript().len() - transcript_start;
        report
    }

    fn attempt(
        &mut self,
        sim: &mut Simulator,
        fw: &FirmwareImage,
        pending: &BTreeSet<TokenId>,
    ) -> Result<AttemptResult, ServerError> {
        let link = sim.config().link;
        let cost = sim.config().cost;
        let mut res = AttemptResult::default();

        // Put every pending token into update mode.
        let first = sim.inventory_round(self.sender);
        let to_enter: Vec<Handle> = first
            .iter()
            .filter(|o| pending.contains(&o.id) && o.vt == 0.0)
            .map(|o| o.handle)
            .collect();
        for h in to_enter {
            self.send(sim, Frame::to(h, CommandKind::EnterWisecr))?;
            self.gap(sim);
        }
        sim.wait(sim.config().sniff_window_s + cost.receive_us(false) * 1e-6 + link.settle_s);

        // Association.
        let second = sim.inventory_round(self.sender);
        let responders: Vec<InventoryObs> = second
            .into_iter()
            .filter(|o| o.vt > 0.0 && (pending.contains(&o.id) || self.db.get(&o.id).is_none()))
            .collect();
        let mut plan = prelude(fw, &mut self.rng, self.cfg.chunk_payload)?;
        res.excluded = security_association(&mut plan, &self.db, &responders, self.cfg.policy)?;
        let candidates: Vec<Candidate> = responders
            .iter()
            .filter(|o| plan.associations.iter().any(|a| a.id == o.id))
            .map(Candidate::from)
            .collect();
        let strategy = match self.cfg.strategy {
            PilotStrategy::Random(_) => PilotStrategy::Random(self.rng.next_u64()),
            s => s,
        };
        let pilot = elect_pilot(&candidates, strategy).ok_or(ServerError::NoEligibleTokens)?;
        let mut associated = Vec::new();
        for a in &plan.associations {
            let frame = Frame::to(
                a.handle,
                CommandKind::Authenticate {
                    wrapped_sk: a.wrapped_sk,
                    s: a.s,
                    nver: plan.nver,
                    t_lpm_ms: a.pam.t_lpm_ms,
                    t_active_ms: a.pam.t_active_ms,
                    iv: plan.iv,
                    pilot: a.id == pilot,
                },
            );
            let end = self.send(sim, frame)?;
            let deadline = end
                + SimTime::from_secs(
                    ACK_TIMEOUT_S + cost.compute_us(cost.security_association) * 1e-6,
                );
            let (ack, _) = sim.wait_for(deadline, |r| {
                matches!(r.frame.kind, CommandKind::Ack { crc_error: false })
            });
            if ack.is_some() {
                associated.push(a.clone());
            } else if a.id == pilot {
                res.pilot_timeout = true;
                return Ok(res);
            }
            self.gap(sim);
        }
        let pilot_handle = associated
            .iter()
            .find(|a| a.id == pilot)
            .map(|a| a.handle)
            .expect("pilot associated");

        // Broadcast.
        for chunk in &plan.chunks.packets {
            let mut tries = 0;
            loop {
                let frame = Frame::to(
                    pilot_handle,
                    CommandKind::SecureComm {
                        index: chunk.index,
                        data: chunk.data.clone(),
                    },
                );
                let end = self.send(sim, frame)?;
                res.secure_comm_frames += 1;
                let (ack, others) = sim.wait_for(end + SimTime::from_secs(ACK_TIMEOUT_S), |r| {
                    matches!(r.frame.kind, CommandKind::Ack { .. })
                });
                let nack = |r: &crate::sim::Reply| {
                    matches!(r.frame.kind, CommandKind::Ack { crc_error: true })
                };
                let retry = match &ack {
                    None => {
                        res.pilot_timeout = true;
                        return Ok(res);
                    }
                    Some(r) => nack(r) || others.iter().any(nack),
                };
                self.gap(sim);
                if !retry {
                    break;
                }
                tries += 1;
                res.retransmissions += 1;
                if tries > self.cfg.max_retransmissions {
                    res.pilot_timeout = true;
                    return Ok(res);
                }
            }
        }
        let end = self.send(sim, Frame::to(pilot_handle, CommandKind::Eob))?;
        let (_, _) = sim.wait_for(end + SimTime::from_secs(ACK_TIMEOUT_S), |r| {
            matches!(r.frame.kind, CommandKind::Ack { .. })
        });

        // Validation: wait out the slowest token's sliced computation.
        let cycles = cost.validation_cycles(plan.ciphertext.len());
        let longest = associated
            .iter()
            .map(|a| cost.sliced_duration_us(cycles, a.pam))
            .fold(0.0, f64::max);
        sim.advance(end + SimTime::from_secs(ACK_TIMEOUT_S + longest * 1e-6 + link.settle_s));
        let third = sim.inventory_round(self.sender);
        let versions: Vec<(TokenId, u32)> = third.iter().map(|o| (o.id, o.ver)).collect();
        let verdict = validate(plan.nver, &versions);
        res.updated = associated
            .iter()
            .filter(|a| verdict.get(&a.id).copied().unwrap_or(false))
            .map(|a| a.id)
            .collect();
        res.last_reply = third
            .iter()
            .filter(|o| res.updated.contains(&o.id))
            .map(|o| o.at)
            .max();
        Ok(res)
    }

    /// Challenges `id` and verifies its response against the reference
    /// firmware. Returns the verdict and the time from request to reply.
    pub fn attest(
        &mut self,
        sim: &mut Simulator,
        id: TokenId,
        mode: AttestMode,
        segment: Segment,
        reference_firmware: &[u8],
    ) -> Result<(bool, f64), ServerError> {
        let cost = sim.config().cost;
        let link = sim.config().link;
        let first = sim.inventory_round(self.sender);
        let obs = first
            .iter()
            .find(|o| o.id == id)
            .ok_or(ServerError::NoAttestReply(id))?;
        if obs.vt == 0.0 {
            self.send(sim, Frame::to(obs.handle, CommandKind::EnterWisecr))?;
            sim.wait(sim.config().sniff_window_s + cost.receive_us(false) * 1e-6 + link.settle_s);
        }
        let second = sim.inventory_round(self.sender);
        let obs = second
            .iter()
            .find(|o| o.id == id)
            .ok_or(ServerError::NoAttestReply(id))?;
        let ch = attest_challenge(&self.db, id, mode, segment, reference_firmware, &mut self.rng)?;
        let start = sim.now();
        let end = self.send(
            sim,
            Frame::to(
                obs.handle,
                CommandKind::AttestRequest {
                    wrapped_sk: ch.wrapped_sk,
                    challenge: ch.c,
                    mode,
                    segment,
                },
            ),
        )?;
        let blocks = usize::from(segment.len).div_ceil(16);
        let budget = cost.receive_us(false) + cost.compute_us(cost.attest_cycles(mode, blocks));
        let (reply, _) = sim.wait_for(
            end + SimTime::from_secs(budget * 1e-6 + ACK_TIMEOUT_S),
            |r| matches!(r.frame.kind, CommandKind::AttestReply { .. }),
        );
        let Some(reply) = reply else {
            return Err(ServerError::NoAttestReply(id));
        };
        let CommandKind::AttestReply { r } = reply.frame.kind else {
            unreachable!()
        };
        Ok((attest_verify(&ch.expected, &r), (reply.at - start).as_secs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(i: u64, vt: f64) -> Candidate {
        Candidate {
            id: TokenId::from_index(0, i),
            vt,
            read_rate: vt,
            rssi: vt,
        }
    }

    #[test]
    fn lowest_vt_is_argmin() {
        let c = [cand(1, 2.25), cand(2, 2.18), cand(3, 2.30)];
        assert_eq!(elect_pilot(&c, PilotStrategy::LowestVt), Some(c[1].id));
        assert_eq!(elect_pilot(&c, PilotStrategy::HighestVt), Some(c[2].id));
    }

    #[test]
    fn ties_go_to_smallest_id() {
        let c = [cand(2, 2.20), cand(1, 2.20)];
        assert_eq!(elect_pilot(&c, PilotStrategy::LowestVt), Some(c[1].id));
        assert_eq!(elect_pilot(&c, PilotStrategy::HighestVt), Some(c[1].id));
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in PilotStrategy::ALL_DETERMINISTIC {
            assert_eq!(s.to_string().parse::<PilotStrategy>(), Ok(s));
        }
        assert_eq!("random:7".parse(), Ok(PilotStrategy::Random(7)));
        assert!("lowest_vt:3".parse::<PilotStrategy>().is_err());
    }

    #[test]
    fn throughput_worked_example() {
        let bps = throughput_bps(391, 4, 14.27);
        assert!((bps - 12512.0 / 14.27).abs() < 1e-9, "{bps}");
    }

    #[test]
    fn db_toml_roundtrip() {
        let mut db = TokenDb::default();
        db.insert(DbEntry {
            id: TokenId::from_index(9, 9),
            k: SymmetricKey::from_bytes([0x5A; 16]),
            ver: 3,
            valid: true,
        })
        .unwrap();
        assert_eq!(TokenDb::from_toml(&db.to_toml()).unwrap(), db);
    }
}
