// Licensed under the Apache-2.0 license

//! Deterministic discrete-event air interface.
//!
//! The reader (server or adversary) drives time forward by transmitting
//! frames and waiting for replies. Every token is a harvester plus a
//! [`Token`] state machine running one job at a time; a job is a list of
//! timed load segments and actions. Voltages are integrated in closed form
//! between events, so brownouts land at their exact crossing instant.
//!
//! Events with equal timestamps run in insertion order.

pub mod clock;
pub mod cost;
pub mod transcript;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

pub use clock::{Clock, SimTime};
pub use cost::{cycles_to_time, CostModel, LinkModel, ACK_TIMEOUT_S};
pub use transcript::{Sender, Transcript, TranscriptParseError, TranscriptRecord};

use crate::crypto::RandomSource;
use crate::power::{
    received_power, rssi, sniff, step, time_to_brownout, time_to_reach, HarvesterParams,
    HarvesterState, LoadMode, MobileChannel, PamParams, SNIFF_WINDOW_S,
};
use crate::token::{Outcome, Role, Token, TokenPhase, Work};
use crate::wire::{decode, encode, CommandKind, Frame, Handle, TokenId, WireError};

/// Per-delivery error injection. Draws are made for every powered token on
/// every downlink frame, so the random stream does not depend on outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorModel {
    pub crc_flip_prob: f64,
    pub frame_loss_prob: f64,
    pub seed: u64,
    /// Restricts injection to these tokens; empty means all.
    pub only: Vec<TokenId>,
}

impl Default for ErrorModel {
    fn default() -> Self {
        Self {
            crc_flip_prob: 0.0,
            frame_loss_prob: 0.0,
            seed: 0,
            only: Vec::new(),
        }
    }
}

impl ErrorModel {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.crc_flip_prob) && (0.0..=1.0).contains(&self.frame_loss_prob)
    }

    fn applies_to(&self, id: TokenId) -> bool {
        self.only.is_empty() || self.only.contains(&id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub link: LinkModel,
    pub cost: CostModel,
    pub harvester: HarvesterParams,
    pub errors: ErrorModel,
    pub sniff_window_s: f64,
    /// Relative half-width of the uniform noise on RSSI and read-rate
    /// measurements.
    pub measurement_noise: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            link: LinkModel::default(),
            cost: CostModel::default(),
            harvester: HarvesterParams::default(),
            errors: ErrorModel::default(),
            sniff_window_s: SNIFF_WINDOW_S,
            measurement_noise: 0.1,
        }
    }
}

pub struct NodeSpec {
    pub token: Token,
    pub channel: MobileChannel,
    pub backscatter_k: f64,
}

/// One interval of constant load, attributed to the frame that caused it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Activity {
    pub start: SimTime,
    pub end: SimTime,
    pub mode: LoadMode,
    pub cause: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EnergyLedger {
    /// Integral of the load drain, in volts.
    pub total_drain: f64,
    pub activities: Vec<Activity>,
    pub brownouts: u32,
}

impl EnergyLedger {
    fn record(&mut self, a: Activity, drain: f64) {
        self.total_drain += drain;
        match self.activities.last_mut() {
            Some(last) if last.end == a.start && last.mode == a.mode && last.cause == a.cause => {
                last.end = a.end;
            }
            _ => self.activities.push(a),
        }
    }

    /// Drain recomputed from the activity log.
    pub fn recomputed(&self, params: &HarvesterParams) -> f64 {
        self.activities
            .iter()
            .map(|a| params.drain.of(a.mode) * (a.end - a.start).as_secs())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Action {
    Boot,
    SniffDone,
    Finalize,
    AttestRespond,
    Emit(Frame),
}

#[derive(Debug, Clone, PartialEq)]
enum Step {
    Run {
        mode: LoadMode,
        dur: SimTime,
        end: Option<SimTime>,
    },
    /// Sleep until the capacitor reaches `target`. On missing `deadline`
    /// the following `skip` steps are dropped.
    Await {
        target: f64,
        deadline: SimTime,
        skip: usize,
    },
    Act(Action),
}

impl Step {
    fn run(mode: LoadMode, us: f64) -> Self {
        Step::Run {
            mode,
            dur: SimTime::from_micros(us),
            end: None,
        }
    }
}

#[derive(Debug, Clone)]
struct Job {
    steps: VecDeque<Step>,
    cause: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum NodeEvent {
    StepDone,
    Brownout,
    Powered,
    GiveUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Node {
        idx: usize,
        epoch: u64,
        kind: NodeEvent,
    },
    Channel {
        idx: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Scheduled {
    at: SimTime,
    seq: u64,
    event: Event,
}

struct Node {
    token: Token,
    channel: MobileChannel,
    backscatter_k: f64,
    h: HarvesterState,
    mode: LoadMode,
    last_sync: SimTime,
    job: Option<Job>,
    epoch: u64,
    energy: EnergyLedger,
}

/// A reply as seen by the reader.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub start: SimTime,
    pub at: SimTime,
    pub from: Sender,
    pub frame: Frame,
    pub seq: u64,
}

/// One singulated token as reported by an inventory round.
#[derive(Debug, Clone, PartialEq)]
pub struct InventoryObs {
    pub id: TokenId,
    pub ver: u32,
    pub vt: f64,
    pub handle: Handle,
    pub rssi: f64,
    pub read_rate: f64,
    pub at: SimTime,
}

/// Delivery-layer hook for attack scripts. It sees and may rewrite on-air
/// bytes and may keep individual tokens from hearing a frame; it never sees
/// token internals.
pub trait Interceptor {
    /// Returns true when `bytes` were altered.
    fn on_downlink(
        &mut self,
        seq: u64,
        sender: Sender,
        bytes: &mut Vec<u8>,
        blocked: &mut Vec<TokenId>,
    ) -> bool {
        let _ = (seq, sender, bytes, blocked);
        false
    }

    /// Replies forged in answer to a downlink frame; the reader hears them
    /// as soon as the frame ends.
    fn forge_replies(&mut self, seq: u64, frame: &Frame) -> Vec<Frame> {
        let _ = (seq, frame);
        Vec::new()
    }

    /// A responder was singulated; the handle travels in the clear.
    fn on_singulation(&mut self, id: TokenId, handle: Handle) {
        let _ = (id, handle);
    }

    /// Returns false to keep the reply from reaching the reader.
    fn on_uplink(&mut self, from: TokenId, frame: &Frame) -> bool {
        let _ = (from, frame);
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FinalizeRecord {
    pub at: SimTime,
    pub id: TokenId,
    pub accepted: bool,
}

pub struct Simulator {
    cfg: SimConfig,
    clock: Clock,
    queue: BinaryHeap<Reverse<Scheduled>>,
    next_event: u64,
    nodes: Vec<Node>,
    transcript: Transcript,
    inbox: VecDeque<Reply>,
    error_rng: RandomSource,
    handle_rng: RandomSource,
    noise_rng: RandomSource,
    interceptor: Option<Box<dyn Interceptor>>,
    forced_crc: BTreeMap<TokenId, u32>,
    finalize_log: Vec<FinalizeRecord>,
}

impl Simulator {
    /// Tokens start unpowered with an empty capacitor.
    pub fn new(cfg: SimConfig, specs: Vec<NodeSpec>, rng: &mut RandomSource) -> Self {
        let error_rng = RandomSource::from_seed(cfg.errors.seed);
        let nodes = specs
            .into_iter()
            .map(|s| Node {
                token: s.token,
                channel: s.channel,
                backscatter_k: s.backscatter_k,
                h: HarvesterState::new(cfg.harvester, 0.0),
                mode: LoadMode::Off,
                last_sync: SimTime::ZERO,
                job: None,
                epoch: 0,
                energy: EnergyLedger::default(),
            })
            .collect::<Vec<_>>();
        let mut sim = Self {
            cfg,
            clock: Clock::default(),
            queue: BinaryHeap::new(),
            next_event: 0,
            nodes,
            transcript: Transcript::default(),
            inbox: VecDeque::new(),
            error_rng,
            handle_rng: rng.fork(1),
            noise_rng: rng.fork(2),
            interceptor: None,
            forced_crc: BTreeMap::new(),
            finalize_log: Vec::new(),
        };
        for i in 0..sim.nodes.len() {
            let breaks: Vec<f64> = sim.nodes[i].channel.schedule.changes_after(0.0).collect();
            for b in breaks {
                sim.push(SimTime::from_secs(b), Event::Channel { idx: i });
            }
            sim.schedule_node(i);
        }
        sim
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> SimTime {
        self.clock.now()
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn token(&self, i: usize) -> &Token {
        &self.nodes[i].token
    }

    /// Direct access for harness setup (positive controls, provisioning).
    pub fn token_mut(&mut self, i: usize) -> &mut Token {
        &mut self.nodes[i].token
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.nodes.iter().map(|n| &n.token)
    }

    pub fn index_of(&self, id: TokenId) -> Option<usize> {
        self.nodes.iter().position(|n| n.token.id() == id)
    }

    pub fn energy(&self, i: usize) -> &EnergyLedger {
        &self.nodes[i].energy
    }

    /// Capacitor voltage now.
    pub fn voltage(&mut self, i: usize) -> f64 {
        self.sync(i);
        self.nodes[i].h.v_cap
    }

    pub fn received_power(&self, i: usize) -> f64 {
        self.p_at(i, self.now())
    }

    pub fn finalize_log(&self) -> &[FinalizeRecord] {
        &self.finalize_log
    }

    pub fn set_interceptor(&mut self, i: Box<dyn Interceptor>) {
        self.interceptor = Some(i);
    }

    pub fn take_interceptor(&mut self) -> Option<Box<dyn Interceptor>> {
        self.interceptor.take()
    }

    /// The next `n` SecureComm frames heard by `id` arrive corrupted.
    pub fn force_crc_errors(&mut self, id: TokenId, n: u32) {
        *self.forced_crc.entry(id).or_default() += n;
    }

    fn p_at(&self, i: usize, t: SimTime) -> f64 {
        received_power(&self.nodes[i].channel.at(t.as_secs()))
    }

    fn push(&mut self, at: SimTime, event: Event) {
        let seq = self.next_event;
        self.next_event += 1;
        self.queue.push(Reverse(Scheduled { at, seq, event }));
    }

    /// Integrates node `i` up to now.
    fn sync(&mut self, i: usize) {
        let now = self.clock.now();
        let p = self.p_at(i, self.nodes[i].last_sync);
        let n = &mut self.nodes[i];
        if now <= n.last_sync {
            return;
        }
        let dt = (now - n.last_sync).as_secs();
        n.h = step(&n.h, n.mode, p, dt);
        let cause = n.job.as_ref().and_then(|j| j.cause);
        let drain = n.h.params.drain.of(n.mode) * dt;
        n.energy.record(
            Activity {
                start: n.last_sync,
                end: now,
                mode: n.mode,
                cause,
            },
            drain,
        );
        n.last_sync = now;
    }

    /// Re-plans node `i` from its current state; older events go stale.
    fn schedule_node(&mut self, i: usize) {
        let now = self.clock.now();
        let p = self.p_at(i, now);
        let v_release = self.cfg.harvester.v_release;
        let n = &mut self.nodes[i];
        n.epoch += 1;
        let epoch = n.epoch;
        let mut next: Option<(SimTime, NodeEvent)> = None;
        let mut consider = |at: SimTime, kind: NodeEvent| {
            if next.is_none_or(|(t, _)| at < t) {
                next = Some((at, kind));
            }
        };
        let after = |s: f64| now + SimTime::from_secs(s);

        if !n.token.is_powered() {
            n.mode = LoadMode::Off;
            if let Some(t) = time_to_reach(&n.h, LoadMode::Off, p, v_release) {
                consider(after(t), NodeEvent::Powered);
            }
        } else {
            match n.job.as_ref().and_then(|j| j.steps.front()) {
                None => {
                    n.mode = LoadMode::Lpm;
                    if let Some(t) = time_to_brownout(&n.h, LoadMode::Lpm, p) {
                        consider(after(t), NodeEvent::Brownout);
                    }
                }
                Some(Step::Run { mode, end, .. }) => {
                    n.mode = *mode;
                    consider(end.expect("started"), NodeEvent::StepDone);
                    if let Some(t) = time_to_brownout(&n.h, *mode, p) {
                        consider(after(t), NodeEvent::Brownout);
                    }
                }
                Some(Step::Await {
                    target, deadline, ..
                }) => {
                    n.mode = LoadMode::Lpm;
                    if let Some(t) = time_to_reach(&n.h, LoadMode::Lpm, p, *target) {
                        consider(after(t), NodeEvent::StepDone);
                    }
                    if let Some(t) = time_to_brownout(&n.h, LoadMode::Lpm, p) {
                        consider(after(t), NodeEvent::Brownout);
                    }
                    consider(*deadline, NodeEvent::GiveUp);
                }
                Some(Step::Act(_)) => unreachable!("actions run eagerly"),
            }
        }
        if let Some((at, kind)) = next {
            self.push(at, Event::Node { idx: i, epoch, kind });
        }
    }

    /// Runs actions and starts the next timed step of node `i`'s job.
    fn run_job(&mut self, i: usize) {
        let now = self.clock.now();
        loop {
            let n = &mut self.nodes[i];
            let Some(job) = n.job.as_mut() else { break };
            match job.steps.front_mut() {
                None => {
                    n.job = None;
                    break;
                }
                Some(Step::Run { dur, end, .. }) => {
                    let e = *end.get_or_insert(now + *dur);
                    if e > now {
                        break;
                    }
                    job.steps.pop_front();
                }
                Some(Step::Await { target, .. }) => {
                    if n.h.v_cap < *target {
                        break;
                    }
                    job.steps.pop_front();
                }
                Some(Step::Act(_)) => {
                    let Some(Step::Act(action)) = job.steps.pop_front() else {
                        unreachable!()
                    };
                    self.perform(i, action);
                }
            }
        }
        self.schedule_node(i);
    }

    fn push_front_steps(&mut self, i: usize, steps: Vec<Step>) {
        let n = &mut self.nodes[i];
        let job = n.job.get_or_insert_with(|| Job {
            steps: VecDeque::new(),
            cause: None,
        });
        for s in steps.into_iter().rev() {
            job.steps.push_front(s);
        }
    }

    fn sniff_steps(&self) -> Vec<Step> {
        vec![
            Step::run(LoadMode::Lpm, self.cfg.sniff_window_s * 1e6),
            Step::Act(Action::SniffDone),
        ]
    }

    fn perform(&mut self, i: usize, action: Action) {
        match action {
            Action::Boot => {
                if self.nodes[i].token.boot() == TokenPhase::WisecrAssoc {
                    let s = self.sniff_steps();
                    self.push_front_steps(i, s);
                }
            }
            Action::SniffDone => {
                // The measurement is defined from a fresh release.
                let p = self.p_at(i, self.now());
                let vt = sniff(
                    &HarvesterState::released(self.cfg.harvester),
                    p,
                    self.cfg.sniff_window_s,
                );
                self.nodes[i].token.record_vt(vt);
            }
            Action::Finalize => {
                let accepted = self.nodes[i].token.finalize_update();
                self.finalize_log.push(FinalizeRecord {
                    at: self.now(),
                    id: self.nodes[i].token.id(),
                    accepted,
                });
            }
            Action::AttestRespond => {
                if let Some(reply) = self.nodes[i].token.attest_respond() {
                    let steps = self.reply_steps(reply, self.now());
                    self.push_front_steps(i, steps);
                }
            }
            Action::Emit(frame) => self.emit(i, frame),
        }
    }

    fn reply_steps(&self, frame: Frame, trigger_end: SimTime) -> Vec<Step> {
        let tx_us = self.cfg.cost.reply_us();
        let up_s = self.cfg.link.uplink_s(frame.bit_len());
        let budget = ACK_TIMEOUT_S - tx_us * 1e-6 - up_s;
        let deadline = trigger_end + SimTime::from_secs(budget.max(0.0));
        vec![
            Step::Await {
                target: self.cfg.link.v_reply,
                deadline,
                skip: 3,
            },
            Step::run(LoadMode::RfidTransmit, tx_us),
            // Backscatter only toggles the antenna load.
            Step::run(LoadMode::Lpm, up_s * 1e6),
            Step::Act(Action::Emit(frame)),
        ]
    }

    fn validation_steps(&self, bytes: usize, pam: PamParams) -> Vec<Step> {
        let cost = &self.cfg.cost;
        let mut remaining = cost.compute_us(cost.validation_cycles(bytes));
        let mut steps = Vec::new();
        match pam.t_active_ms {
            None => steps.push(Step::run(LoadMode::ActiveCpu, remaining)),
            Some(active) => {
                let active_us = f64::from(active.max(1)) * 1e3;
                let sleep_us = f64::from(pam.t_lpm_ms) * 1e3;
                while remaining > 0.0 {
                    if sleep_us > 0.0 {
                        steps.push(Step::run(LoadMode::Lpm, sleep_us));
                    }
                    let burst = remaining.min(active_us);
                    steps.push(Step::run(LoadMode::ActiveCpu, burst));
                    remaining -= burst;
                }
            }
        }
        steps.push(Step::Act(Action::Finalize));
        steps
    }

    fn emit(&mut self, i: usize, frame: Frame) {
        let now = self.now();
        let id = self.nodes[i].token.id();
        let bytes = encode(&frame).expect("token replies fit a frame");
        let start = now.saturating_sub(SimTime::from_secs(
            self.cfg.link.uplink_s(bytes.len() * 8),
        ));
        let pass = self
            .interceptor
            .as_mut()
            .is_none_or(|ic| ic.on_uplink(id, &frame));
        let seq = self.record_uplink(Sender::Token(id), &frame, bytes, start, pass);
        if pass {
            self.inbox.push_back(Reply {
                start,
                at: now,
                from: Sender::Token(id),
                frame,
                seq,
            });
        }
    }

    fn record_uplink(
        &mut self,
        sender: Sender,
        frame: &Frame,
        bytes: Vec<u8>,
        start: SimTime,
        received: bool,
    ) -> u64 {
        let seq = self.transcript.next_seq();
        self.transcript.push(TranscriptRecord {
            seq,
            t_ns: self.now().0,
            start_ns: start.0,
            end_ns: self.now().0,
            sender,
            kind: frame.kind.name().to_owned(),
            handle: frame.handle.map(|h| h.0),
            bytes,
            delivered_to: Vec::new(),
            corrupted_at: Vec::new(),
            lost_at: Vec::new(),
            missed_busy: Vec::new(),
            reader_received: received,
            tampered: false,
        })
    }

    /// A forged reply, heard by the reader as if backscattered now.
    pub fn inject_reply(&mut self, frame: Frame) {
        let now = self.now();
        let bytes = encode(&frame).expect("forged replies fit a frame");
        let start = now.saturating_sub(SimTime::from_secs(
            self.cfg.link.uplink_s(bytes.len() * 8),
        ));
        let seq = self.record_uplink(Sender::Adversary, &frame, bytes, start, true);
        self.inbox.push_back(Reply {
            start,
            at: now,
            from: Sender::Adversary,
            frame,
            seq,
        });
    }

    fn handle_event(&mut self, ev: Event) {
        match ev {
            Event::Channel { idx } => {
                self.sync(idx);
                self.schedule_node(idx);
            }
            Event::Node { idx, epoch, kind } => {
                if epoch != self.nodes[idx].epoch {
                    return;
                }
                self.sync(idx);
                match kind {
                    NodeEvent::StepDone => {
                        if let Some(job) = self.nodes[idx].job.as_mut() {
                            job.steps.pop_front();
                        }
                        self.run_job(idx);
                    }
                    NodeEvent::GiveUp => {
                        if let Some(job) = self.nodes[idx].job.as_mut() {
                            if let Some(Step::Await { skip, .. }) = job.steps.pop_front() {
                                for _ in 0..skip {
                                    job.steps.pop_front();
                                }
                            }
                        }
                        self.run_job(idx);
                    }
                    NodeEvent::Brownout => {
                        let n = &mut self.nodes[idx];
                        n.token.on_power_loss();
                        n.job = None;
                        n.energy.brownouts += 1;
                        self.schedule_node(idx);
                    }
                    NodeEvent::Powered => {
                        let n = &mut self.nodes[idx];
                        n.h.v_cap = n.h.v_cap.max(n.h.params.v_release);
                        if n.token.boot() == TokenPhase::WisecrAssoc {
                            let s = self.sniff_steps();
                            self.push_front_steps(idx, s);
                            self.run_job(idx);
                        } else {
                            self.schedule_node(idx);
                        }
                    }
                }
            }
        }
    }

    /// Processes one event at or before `until`. Returns false when none.
    fn step_event(&mut self, until: SimTime) -> bool {
        match self.queue.peek() {
            Some(Reverse(s)) if s.at <= until => {
                let Reverse(s) = self.queue.pop().expect("peeked");
                self.clock.advance_to(s.at.max(self.clock.now()));
                self.handle_event(s.event);
                true
            }
            _ => false,
        }
    }

    /// Processes every event up to `until` and moves the clock there.
    pub fn advance(&mut self, until: SimTime) {
        while self.step_event(until) {}
        self.clock.advance_to(until.max(self.clock.now()));
    }

    pub fn wait_until(&mut self, t: SimTime) -> Vec<Reply> {
        self.advance(t);
        self.inbox.drain(..).collect()
    }

    pub fn wait(&mut self, secs: f64) -> Vec<Reply> {
        let t = self.now() + SimTime::from_secs(secs);
        self.wait_until(t)
    }

    /// Runs until a reply satisfying `pred` arrives or `deadline` passes.
    /// Other replies collected on the way are returned alongside.
    pub fn wait_for(
        &mut self,
        deadline: SimTime,
        mut pred: impl FnMut(&Reply) -> bool,
    ) -> (Option<Reply>, Vec<Reply>) {
        let mut others = Vec::new();
        loop {
            while let Some(r) = self.inbox.pop_front() {
                if pred(&r) {
                    return (Some(r), others);
                }
                others.push(r);
            }
            if !self.step_event(deadline) {
                self.clock.advance_to(deadline.max(self.clock.now()));
                return (None, others);
            }
        }
    }

    pub fn transmit(&mut self, frame: &Frame, sender: Sender) -> Result<u64, WireError> {
        let bytes = encode(frame)?;
        Ok(self.transmit_bytes(bytes, sender))
    }

    /// Puts raw bytes on the air at the current time and delivers them to
    /// every powered, idle token when the frame ends. Returns the transcript
    /// sequence number.
    pub fn transmit_bytes(&mut self, mut bytes: Vec<u8>, sender: Sender) -> u64 {
        let start = self.now();
        let seq = self.transcript.next_seq();
        let mut blocked = Vec::new();
        let tampered = match self.interceptor.as_mut() {
            Some(ic) => ic.on_downlink(seq, sender, &mut bytes, &mut blocked),
            None => false,
        };
        let air = SimTime::from_secs(self.cfg.link.downlink_s(bytes.len() * 8));
        let end = start + air;
        let parsed = decode(&bytes);
        self.transcript.push(TranscriptRecord {
            seq,
            t_ns: start.0,
            start_ns: start.0,
            end_ns: end.0,
            sender,
            kind: parsed
                .as_ref()
                .map_or("Invalid", |f| f.kind.name())
                .to_owned(),
            handle: parsed.as_ref().ok().and_then(|f| f.handle.map(|h| h.0)),
            bytes: bytes.clone(),
            delivered_to: Vec::new(),
            corrupted_at: Vec::new(),
            lost_at: Vec::new(),
            missed_busy: Vec::new(),
            reader_received: false,
            tampered,
        });
        self.advance(end);

        let is_secure_comm = matches!(
            parsed,
            Ok(Frame {
                kind: CommandKind::SecureComm { .. },
                ..
            })
        );
        let (mut delivered, mut corrupted, mut lost, mut missed) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..self.nodes.len() {
            if !self.nodes[i].token.is_powered() {
                continue;
            }
            let id = self.nodes[i].token.id();
            let drop_draw = self.error_rng.chance(self.cfg.errors.frame_loss_prob);
            let flip_draw = self.error_rng.chance(self.cfg.errors.crc_flip_prob);
            if blocked.contains(&id) {
                lost.push(id);
                continue;
            }
            if self.nodes[i].job.is_some() {
                missed.push(id);
                continue;
            }
            let applies = self.cfg.errors.applies_to(id);
            if applies && drop_draw {
                lost.push(id);
                continue;
            }
            let forced = is_secure_comm
                && match self.forced_crc.get_mut(&id) {
                    Some(n) if *n > 0 => {
                        *n -= 1;
                        true
                    }
                    _ => false,
                };
            let frame = match &parsed {
                Ok(f) if !(forced || applies && flip_draw) => Some(f),
                _ => None,
            };
            let outcome = match frame {
                Some(f) => {
                    delivered.push(id);
                    self.nodes[i].token.handle_command(f)
                }
                None => {
                    corrupted.push(id);
                    self.nodes[i].token.handle_corrupted()
                }
            };
            self.sync(i);
            self.start_work(i, outcome, seq, end);
        }
        if let Some(rec) = self.transcript.get_mut(seq) {
            rec.delivered_to = delivered;
            rec.corrupted_at = corrupted;
            rec.lost_at = lost;
            rec.missed_busy = missed;
        }
        if let (Ok(f), Some(mut ic)) = (&parsed, self.interceptor.take()) {
            for forged in ic.forge_replies(seq, f) {
                self.inject_reply(forged);
            }
            self.interceptor = Some(ic);
        }
        seq
    }

    fn start_work(&mut self, i: usize, outcome: Outcome, cause: u64, frame_end: SimTime) {
        let Outcome { work, reply } = outcome;
        if work == Work::Ignored && reply.is_none() {
            return;
        }
        let cost = self.cfg.cost;
        let observer = work == Work::ObserverStore
            || self.nodes[i].token.role() == Some(Role::Observer);
        let mut steps = vec![Step::run(LoadMode::RfidReceive, cost.receive_us(observer))];
        let reply_steps = |s: &Self| {
            reply
                .clone()
                .map(|r| s.reply_steps(r, frame_end))
                .unwrap_or_default()
        };
        match work {
            Work::Ignored | Work::Receive | Work::ObserverStore | Work::PilotStore => {
                steps.extend(reply_steps(self));
            }
            Work::Reset => steps.push(Step::Act(Action::Boot)),
            Work::Associate => {
                steps.push(Step::run(
                    LoadMode::ActiveCpu,
                    cost.compute_us(cost.security_association),
                ));
                steps.extend(reply_steps(self));
            }
            Work::Validate { bytes, pam } => {
                steps.extend(reply_steps(self));
                steps.extend(self.validation_steps(bytes, pam));
            }
            Work::Attest { mode, blocks } => {
                steps.push(Step::run(
                    LoadMode::ActiveCpu,
                    cost.compute_us(cost.attest_cycles(mode, blocks)),
                ));
                steps.push(Step::Act(Action::AttestRespond));
            }
        }
        self.nodes[i].job = Some(Job {
            steps: steps.into(),
            cause: Some(cause),
        });
        self.run_job(i);
    }

    /// Broadcasts Inventory, collects replies for one fixed-length round and
    /// assigns each responder a fresh handle, unique within the round.
    pub fn inventory_round(&mut self, sender: Sender) -> Vec<InventoryObs> {
        let start = self.now();
        self.transmit(&Frame::broadcast(CommandKind::Inventory), sender)
            .expect("inventory encodes");
        let end = start + SimTime::from_secs(self.cfg.link.inventory_round_s);
        let replies = self.wait_until(end);
        let mut used: Vec<Handle> = Vec::new();
        let mut out = Vec::new();
        for r in replies {
            let CommandKind::InventoryReply { id, ver, vt_mv } = r.frame.kind else {
                continue;
            };
            let handle = loop {
                let h = Handle(self.handle_rng.next_u16());
                if !used.contains(&h) {
                    break h;
                }
            };
            used.push(handle);
            if let Some(rec) = self.transcript.get_mut(r.seq) {
                rec.handle = Some(handle.0);
            }
            if let Some(ic) = self.interceptor.as_mut() {
                ic.on_singulation(id, handle);
            }
            let noise = self.cfg.measurement_noise;
            let (rssi_n, rate_n) = (
                self.noise_rng.uniform(1.0 - noise, 1.0 + noise),
                self.noise_rng.uniform(1.0 - noise, 1.0 + noise),
            );
            let (rssi_v, rate_v) = match (r.from, self.index_of(id)) {
                (Sender::Token(_), Some(i)) => {
                    self.nodes[i].token.assign_handle(handle);
                    let ch = self.nodes[i].channel.at(r.at.as_secs());
                    (
                        rssi(&ch, self.nodes[i].backscatter_k) * rssi_n,
                        received_power(&ch) * rate_n,
                    )
                }
                _ => (0.0, 0.0),
            };
            out.push(InventoryObs {
                id,
                ver,
                vt: f64::from(vt_mv) / 1000.0,
                handle,
                rssi: rssi_v,
                read_rate: rate_v,
                at: r.at,
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SymmetricKey;
    use crate::power::ChannelState;
    use crate::token::TokenConfig;

    fn sim_with(distance: f64, tx: f64) -> Simulator {
        let token = Token::provision(
            TokenId::from_index(1, 0),
            SymmetricKey::from_bytes([1; 16]),
            1,
            Some(vec![0xAA; 32]),
            TokenConfig::default(),
        );
        let channel = MobileChannel::fixed(ChannelState {
            distance_m: distance,
            tx_power_w: tx,
            ..ChannelState::default()
        });
        Simulator::new(
            SimConfig::default(),
            vec![NodeSpec {
                token,
                channel,
                backscatter_k: 1.0,
            }],
            &mut RandomSource::from_seed(1),
        )
    }

    #[test]
    fn tokens_boot_after_charging() {
        let mut sim = sim_with(0.2, 1.0);
        assert!(!sim.token(0).is_powered());
        sim.advance(SimTime::from_millis(50.0));
        assert_eq!(sim.token(0).phase(), TokenPhase::AppExec);
    }

    #[test]
    fn inventory_singulates_powered_tokens() {
        let mut sim = sim_with(0.2, 1.0);
        sim.advance(SimTime::from_millis(50.0));
        let obs = sim.inventory_round(Sender::Reader);
        assert_eq!(obs.len(), 1);
        assert_eq!(sim.token(0).handle(), Some(obs[0].handle));
    }

    #[test]
    fn unpowered_token_never_boots() {
        let mut sim = sim_with(5.0, 0.01);
        sim.advance(SimTime::from_secs(1.0));
        assert!(!sim.token(0).is_powered());
        assert!(sim.inventory_round(Sender::Reader).is_empty());
    }
}
