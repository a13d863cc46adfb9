// Licensed under the Apache-2.0 license

//! Scenario files, seeded repetitions, CSV rows and summaries, the
//! attestation bench and human-readable transcript replay.

use std::fmt::Write as _;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{rng_bytes, RandomSource, SymmetricKey};
use crate::power::{ChannelState, DistanceSchedule, MobileChannel};
use crate::server::{
    AssociationPolicy, DbEntry, FirmwareImage, PilotStrategy, Server, ServerConfig,
    SessionReport, TokenDb, TokenOutcome,
};
use crate::sim::{NodeSpec, Sender, SimConfig, Simulator, Transcript, TranscriptParseError};
use crate::token::{Token, TokenConfig};
use crate::wire::{AttestMode, Segment, TokenId, DEFAULT_CHUNK_PAYLOAD};

/// Id prefix for scenario tokens.
pub const ID_PREFIX: u32 = 0x5749_5345;

// Fork labels for independent random streams within one repetition.
const FORK_FIRMWARE: u64 = 0x10;
const FORK_KEYS: u64 = 0x11;
const FORK_CHANNEL: u64 = 0x12;
const FORK_ERRORS: u64 = 0x13;
const FORK_SIM: u64 = 0x14;
const FORK_SERVER: u64 = 0x15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SendMode {
    #[default]
    Broadcast,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenSpec {
    pub distance_m: Option<f64>,
    /// `(from_s, distance_m)` breakpoints; overrides `distance_m`.
    pub schedule: Option<Vec<(f64, f64)>>,
    /// Absent from the server database; its key is unrelated to any entry.
    pub foreign: bool,
    /// Known but not scheduled for update.
    pub unscheduled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FirmwareSpec {
    pub size: usize,
    /// Relative paths resolve against the scenario file's directory.
    pub file: Option<PathBuf>,
    pub version: u32,
    pub installed_version: u32,
}

impl Default for FirmwareSpec {
    fn default() -> Self {
        Self {
            size: 407,
            file: None,
            version: 2,
            installed_version: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub repetitions: u32,
    pub max_attempts: u32,
    pub strategy: PilotStrategy,
    pub send_mode: SendMode,
    /// Sliced validation; continuous execution when false.
    pub pam: bool,
    pub strict_abort: bool,
    pub token_count: usize,
    pub distance_m: f64,
    pub tx_power_w: f64,
    /// Per-token multipath magnitude is drawn uniformly from this range.
    pub multipath: (f64, f64),
    /// Per-token backscatter coefficient range, used only for RSSI.
    pub backscatter: (f64, f64),
    /// Per-token overrides; when non-empty its length is the token count.
    pub tokens: Vec<TokenSpec>,
    pub firmware: FirmwareSpec,
    pub sim: SimConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            seed: 1,
            repetitions: 1,
            max_attempts: 10,
            strategy: PilotStrategy::LowestVt,
            send_mode: SendMode::Broadcast,
            pam: true,
            strict_abort: false,
            token_count: 4,
            distance_m: 0.2,
            tx_power_w: 1.0,
            multipath: (1.0, 1.0),
            backscatter: (1.0, 1.0),
            tokens: Vec::new(),
            firmware: FirmwareSpec::default(),
            sim: SimConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: field `{field}`: {message}")]
    Invalid {
        path: String,
        field: &'static str,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// False for NaN as well as for non-positive values.
fn positive(x: f64) -> bool {
    x > 0.0
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

impl Scenario {
    /// Parses TOML, or JSON when the text starts with `{`. `origin` names
    /// the source in diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let sc: Scenario = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| ConfigError::Parse {
                path: origin.into(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?
        } else {
            toml::from_str(text).map_err(|e| {
                let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
                ConfigError::Parse {
                    path: origin.into(),
                    line,
                    column,
                    message: e.message().to_string(),
                }
            })?
        };
        sc.validate(origin)?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: origin.clone(),
            source,
        })?;
        let mut sc = Self::parse(&text, &origin)?;
        if let Some(f) = &sc.firmware.file {
            if f.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                sc.firmware.file = Some(base.join(f));
            }
            sc.check_firmware_file(&origin)?;
        }
        Ok(sc)
    }

    fn check_firmware_file(&self, origin: &str) -> Result<(), ConfigError> {
        match &self.firmware.file {
            Some(f) if !f.is_file() => Err(ConfigError::Invalid {
                path: origin.into(),
                field: "firmware.file",
                message: format!("{} does not exist", f.display()),
            }),
            _ => Ok(()),
        }
    }

    fn validate(&self, origin: &str) -> Result<(), ConfigError> {
        let invalid = |field, message: &str| {
            Err(ConfigError::Invalid {
                path: origin.into(),
                field,
                message: message.into(),
            })
        };
        if self.repetitions == 0 {
            return invalid("repetitions", "must be at least 1");
        }
        if self.max_attempts == 0 {
            return invalid("max_attempts", "must be at least 1");
        }
        if self.node_count() == 0 {
            return invalid("token_count", "must be at least 1");
        }
        if !positive(self.distance_m) {
            return invalid("distance_m", "must be positive");
        }
        if !(positive(self.tx_power_w) || self.tx_power_w == 0.0) {
            return invalid("tx_power_w", "must be non-negative");
        }
        if !(self.multipath.0 > 0.0 && self.multipath.0 <= self.multipath.1) {
            return invalid("multipath", "expects 0 < lo <= hi");
        }
        if !(self.backscatter.0 > 0.0 && self.backscatter.0 <= self.backscatter.1) {
            return invalid("backscatter", "expects 0 < lo <= hi");
        }
        if self.firmware.file.is_none() && self.firmware.size == 0 {
            return invalid("firmware.size", "must be at least 1");
        }
        if self.firmware.version <= self.firmware.installed_version {
            return invalid("firmware.version", "must exceed installed_version");
        }
        if !self.sim.errors.is_valid() {
            return invalid("sim.errors", "probabilities must lie in [0, 1]");
        }
        if !positive(self.sim.cost.compute_mhz) {
            return invalid("sim.cost.compute_mhz", "must be positive");
        }
        for t in &self.tokens {
            if t.distance_m.is_some_and(|d| !positive(d))
                || t.schedule.iter().flatten().any(|&(_, d)| !positive(d))
            {
                return invalid("tokens.distance_m", "must be positive");
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        if self.tokens.is_empty() {
            self.token_count
        } else {
            self.tokens.len()
        }
    }

    /// Seed of repetition `rep`.
    pub fn rep_seed(&self, rep: u32) -> u64 {
        self.seed.wrapping_add(u64::from(rep))
    }

    /// The image to disseminate; identical across repetitions.
    pub fn firmware_image(&self) -> io::Result<FirmwareImage> {
        let bytes = match &self.firmware.file {
            Some(f) => std::fs::read(f)?,
            None => rng_bytes(
                &mut RandomSource::from_seed(self.seed).fork(FORK_FIRMWARE),
                self.firmware.size,
            ),
        };
        Ok(FirmwareImage {
            bytes,
            version: self.firmware.version,
        })
    }
}

/// Everything needed to run one repetition.
pub struct World {
    pub sim: Simulator,
    pub server: Server,
    pub firmware: FirmwareImage,
    pub ids: Vec<TokenId>,
}

/// Builds tokens, database, simulator and server for `seed`.
pub fn build_world(sc: &Scenario, seed: u64) -> io::Result<World> {
    let firmware = sc.firmware_image()?;
    let mut rng = RandomSource::from_seed(seed);
    let mut keys = rng.fork(FORK_KEYS);
    let mut chan = rng.fork(FORK_CHANNEL);
    let token_cfg = TokenConfig {
        download_capacity: crate::crypto::padded_len(firmware.bytes.len()).max(4096),
        chunk_payload: DEFAULT_CHUNK_PAYLOAD,
        reliable_broadcast: false,
    };
    let old_firmware = rng_bytes(&mut rng.fork(FORK_FIRMWARE), firmware.bytes.len());

    let mut db = TokenDb::default();
    let mut specs = Vec::new();
    let mut ids = Vec::new();
    for i in 0..sc.node_count() {
        let t = sc.tokens.get(i).cloned().unwrap_or_default();
        let id = TokenId::from_index(ID_PREFIX, i as u64);
        let k = SymmetricKey::random(&mut keys);
        if !t.foreign {
            db.insert(DbEntry {
                id,
                k: k.clone(),
                ver: sc.firmware.installed_version,
                valid: !t.unscheduled,
            })
            .expect("scenario ids are unique");
        }
        let base = ChannelState {
            distance_m: t.distance_m.unwrap_or(sc.distance_m),
            tx_power_w: sc.tx_power_w,
            multipath: chan.uniform(sc.multipath.0, sc.multipath.1),
            ..ChannelState::default()
        };
        let backscatter_k = chan.uniform(sc.backscatter.0, sc.backscatter.1);
        let channel = match &t.schedule {
            Some(s) => MobileChannel {
                base,
                schedule: DistanceSchedule(s.clone()),
            },
            None => MobileChannel::fixed(base),
        };
        specs.push(NodeSpec {
            token: Token::provision(
                id,
                k,
                sc.firmware.installed_version,
                Some(old_firmware.clone()),
                token_cfg,
            ),
            channel,
            backscatter_k,
        });
        ids.push(id);
    }

    let mut cfg = sc.sim.clone();
    cfg.errors.seed ^= rng.fork(FORK_ERRORS).next_u64();
    let sim = Simulator::new(cfg, specs, &mut rng.fork(FORK_SIM));
    let server = Server::new(
        db,
        ServerConfig {
            max_attempts: sc.max_attempts,
            strategy: sc.strategy,
            sequential: sc.send_mode == SendMode::Sequential,
            chunk_payload: DEFAULT_CHUNK_PAYLOAD,
            policy: AssociationPolicy {
                strict_abort: sc.strict_abort,
                pam_disabled: !sc.pam,
            },
            ..ServerConfig::default()
        },
        rng.fork(FORK_SERVER),
    );
    Ok(World {
        sim,
        server,
        firmware,
        ids,
    })
}

/// Result of one repetition.
pub struct RunOutput {
    pub seed: u64,
    pub report: SessionReport,
    pub transcript: Transcript,
}

pub fn run_once(sc: &Scenario, seed: u64) -> io::Result<RunOutput> {
    let mut w = build_world(sc, seed)?;
    let report = w.server.run_update(&mut w.sim, &w.firmware);
    Ok(RunOutput {
        seed,
        report,
        transcript: w.sim.into_transcript(),
    })
}

/// One CSV row. Column order is part of the output contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub scenario: String,
    pub seed: u64,
    pub latency_s: f64,
    pub throughput_bps: f64,
    pub attempts: u32,
    pub updated: usize,
    pub failed: usize,
    pub excluded: usize,
    pub all_updated: bool,
    pub first_attempt_all_updated: bool,
    pub pilot_timeouts: u32,
    pub secure_comm_frames: usize,
    /// `id=outcome` pairs joined with `;`, ordered by id.
    pub outcomes: String,
}

impl RunRow {
    pub fn new(scenario: &str, seed: u64, r: &SessionReport) -> Self {
        let count = |o| r.outcomes.values().filter(|v| **v == o).count();
        Self {
            scenario: scenario.into(),
            seed,
            latency_s: r.latency_s,
            throughput_bps: r.throughput_bps,
            attempts: r.attempts,
            updated: count(TokenOutcome::Updated),
            failed: count(TokenOutcome::Failed),
            excluded: count(TokenOutcome::Excluded),
            all_updated: count(TokenOutcome::Failed) == 0 && count(TokenOutcome::Updated) > 0,
            first_attempt_all_updated: r.first_attempt_all_updated,
            pilot_timeouts: r.pilot_timeouts,
            secure_comm_frames: r.secure_comm_frames,
            outcomes: r
                .outcomes
                .iter()
                .map(|(id, o)| {
                    let o = match o {
                        TokenOutcome::Updated => "updated",
                        TokenOutcome::Failed => "failed",
                        TokenOutcome::Excluded => "excluded",
                    };
                    format!("{id}={o}")
                })
                .collect::<Vec<_>>()
                .join(";"),
        }
    }
}

pub fn write_csv<W: io::Write>(rows: &[RunRow], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn csv_string(rows: &[RunRow]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("in-memory csv");
    String::from_utf8(buf).expect("csv is utf-8")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Sample standard deviation; 0 for fewer than two values.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                n,
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            n,
            mean,
            std: var.sqrt(),
        }
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Drops values outside `[Q1 - 1.5 IQR, Q3 + 1.5 IQR]`.
pub fn iqr_filter(xs: &[f64]) -> Vec<f64> {
    if xs.len() < 4 {
        return xs.to_vec();
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let (q1, q3) = (quantile(&s, 0.25), quantile(&s, 0.75));
    let iqr = q3 - q1;
    xs.iter()
        .copied()
        .filter(|x| (q1 - 1.5 * iqr..=q3 + 1.5 * iqr).contains(x))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub scenario: String,
    pub runs: usize,
    pub all_updated: usize,
    pub first_attempt_all_updated: usize,
    pub latency_s: Stat,
    pub throughput_bps: Stat,
    pub outliers_filtered: bool,
}

/// Latency and throughput statistics over successful runs.
pub fn summarize(scenario: &str, rows: &[RunRow], filter_outliers: bool) -> Summary {
    let ok: Vec<&RunRow> = rows.iter().filter(|r| r.all_updated).collect();
    let pick = |f: fn(&RunRow) -> f64| {
        let xs: Vec<f64> = ok.iter().map(|r| f(r)).collect();
        if filter_outliers {
            iqr_filter(&xs)
        } else {
            xs
        }
    };
    Summary {
        scenario: scenario.into(),
        runs: rows.len(),
        all_updated: ok.len(),
        first_attempt_all_updated: rows.iter().filter(|r| r.first_attempt_all_updated).count(),
        latency_s: Stat::of(&pick(|r| r.latency_s)),
        throughput_bps: Stat::of(&pick(|r| r.throughput_bps)),
        outliers_filtered: filter_outliers,
    }
}

/// Overrides applied on top of a scenario file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub repetitions: Option<u32>,
    pub sequential: bool,
    pub strategy: Option<PilotStrategy>,
}

impl Overrides {
    pub fn apply(&self, sc: &mut Scenario) {
        if let Some(s) = self.seed {
            sc.seed = s;
        }
        if let Some(r) = self.repetitions {
            sc.repetitions = r.max(1);
        }
        if self.sequential {
            sc.send_mode = SendMode::Sequential;
        }
        if let Some(s) = self.strategy {
            sc.strategy = s;
        }
    }
}

/// Runs every repetition in seed order. `on_run` sees each output, for
/// example to persist its transcript.
pub fn run_scenario(
    sc: &Scenario,
    mut on_run: impl FnMut(&RunOutput) -> io::Result<()>,
) -> io::Result<Vec<RunRow>> {
    (0..sc.repetitions)
        .map(|rep| {
            let out = run_once(sc, sc.rep_seed(rep))?;
            on_run(&out)?;
            Ok(RunRow::new(&sc.name, out.seed, &out.report))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttestRow {
    pub size: usize,
    pub mode: String,
    pub blocks: usize,
    pub cycles: u64,
    pub compute_ms: f64,
    pub end_to_end_ms: f64,
    pub verified: bool,
}

/// Fast and elaborate attestation over freshly installed images of each
/// size, one token at the scenario's distance.
pub fn attest_bench(sc: &Scenario, sizes: &[usize]) -> io::Result<Vec<AttestRow>> {
    let mut rows = Vec::new();
    for &size in sizes {
        let mut one = sc.clone();
        one.tokens = vec![TokenSpec::default()];
        one.firmware.file = None;
        one.firmware.size = size;
        let mut w = build_world(&one, one.seed)?;
        let report = w.server.run_update(&mut w.sim, &w.firmware);
        let id = w.ids[0];
        let blocks = size.div_ceil(16);
        for mode in [AttestMode::Fast, AttestMode::Elaborate] {
            let cost = w.sim.config().cost;
            let cycles = cost.attest_cycles(mode, blocks);
            let segment = Segment {
                offset: 0,
                len: u16::try_from(size).unwrap_or(u16::MAX),
            };
            let (verified, secs) = if report.all_updated() {
                w.server
                    .attest(&mut w.sim, id, mode, segment, &w.firmware.bytes)
                    .unwrap_or((false, f64::NAN))
            } else {
                (false, f64::NAN)
            };
            rows.push(AttestRow {
                size,
                mode: format!("{mode:?}").to_lowercase(),
                blocks,
                cycles,
                compute_ms: cost.compute_us(cycles) / 1e3,
                end_to_end_ms: secs * 1e3,
                verified,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("{path}: {source}")]
    FileNotFound {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: TranscriptParseError,
    },
}

/// Protocol stage a frame belongs to, tracked across the transcript.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Inventory,
    Association,
    Broadcast,
    Validation,
    Attestation,
}

impl Stage {
    fn next(self, kind: &str) -> Stage {
        match kind {
            "EnterWisecr" | "Authenticate" => Stage::Association,
            "SecureComm" | "Eob" => Stage::Broadcast,
            "AttestRequest" => Stage::Attestation,
            "Inventory" => match self {
                Stage::Broadcast => Stage::Validation,
                Stage::Association => Stage::Association,
                _ => Stage::Inventory,
            },
            _ => self,
        }
    }
}

/// Stage of every record, in transcript order.
pub fn annotate(t: &Transcript) -> Vec<Stage> {
    let mut stage = Stage::Inventory;
    t.records()
        .iter()
        .map(|r| {
            if r.is_downlink() {
                stage = stage.next(&r.kind);
            }
            stage
        })
        .collect()
}

pub fn render_transcript(t: &Transcript) -> String {
    let mut out = String::new();
    for (r, stage) in t.records().iter().zip(annotate(t)) {
        let who = match r.sender {
            Sender::Reader => "reader".to_string(),
            Sender::Adversary => "adversary".to_string(),
            Sender::Token(id) => format!("token {id}"),
        };
        let handle = r.handle.map(|h| format!(" @{h:04x}")).unwrap_or_default();
        let flag = if r.tampered { "  [TAMPERED]" } else { "" };
        let _ = writeln!(
            out,
            "{:>12.3} ms  {:<11} {:<24} {}{}{}",
            r.start_ns as f64 / 1e6,
            format!("{stage:?}"),
            who,
            r.kind,
            handle,
            flag
        );
    }
    out
}

pub fn replay_transcript(path: &Path) -> Result<String, ReplayError> {
    let p = path.display().to_string();
    let f = std::fs::File::open(path).map_err(|source| ReplayError::FileNotFound {
        path: p.clone(),
        source,
    })?;
    let t = Transcript::read_jsonl(BufReader::new(f))
        .map_err(|source| ReplayError::Parse { path: p, source })?;
    Ok(render_transcript(&t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_error_reports_line() {
        let err = Scenario::parse("seed = 1\nrepetitions = \"x\"\n", "s.toml").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn zero_repetitions_rejected() {
        let err = Scenario::parse("repetitions = 0", "s.toml").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { field: "repetitions", .. }));
    }

    #[test]
    fn json_accepted() {
        let sc = Scenario::parse(r#"{"seed": 9, "strategy": "random:3"}"#, "s.json").unwrap();
        assert_eq!(sc.seed, 9);
        assert_eq!(sc.strategy, PilotStrategy::Random(3));
    }

    #[test]
    fn iqr_drops_far_points() {
        let xs = [1.0, 1.1, 0.9, 1.05, 0.95, 10.0];
        assert_eq!(iqr_filter(&xs).len(), 5);
    }

    #[test]
    fn happy_path_updates_everyone() {
        let sc = Scenario {
            token_count: 2,
            firmware: FirmwareSpec {
                size: 64,
                ..FirmwareSpec::default()
            },
            ..Scenario::default()
        };
        let out = run_once(&sc, 3).unwrap();
        assert!(out.report.all_updated(), "{:?}", out.report);
        assert_eq!(out.report.attempts, 1);
    }
}
