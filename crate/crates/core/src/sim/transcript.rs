// Licensed under the Apache-2.0 license

//! Append-only record of every frame put on the air.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::clock::SimTime;
use crate::wire::{decode, Frame, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "id")]
pub enum Sender {
    Reader,
    Token(TokenId),
    Adversary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub seq: u64,
    /// When the record was appended: frame start for downlink, reception
    /// end for uplink. Records are ordered by it.
    pub t_ns: u64,
    pub start_ns: u64,
    pub end_ns: u64,
    pub sender: Sender,
    pub kind: String,
    pub handle: Option<u16>,
    #[serde(with = "hex::serde")]
    pub bytes: Vec<u8>,
    /// Tokens that decoded the frame intact (downlink only).
    #[serde(default)]
    pub delivered_to: Vec<TokenId>,
    #[serde(default)]
    pub corrupted_at: Vec<TokenId>,
    #[serde(default)]
    pub lost_at: Vec<TokenId>,
    /// Powered tokens that were still busy and did not listen.
    #[serde(default)]
    pub missed_busy: Vec<TokenId>,
    /// Uplink only: whether the reader got the reply.
    #[serde(default)]
    pub reader_received: bool,
    /// Bytes were altered in flight.
    #[serde(default)]
    pub tampered: bool,
}

impl TranscriptRecord {
    pub fn frame(&self) -> Option<Frame> {
        decode(&self.bytes).ok()
    }

    pub fn start(&self) -> SimTime {
        SimTime(self.start_ns)
    }

    pub fn end(&self) -> SimTime {
        SimTime(self.end_ns)
    }

    pub fn is_downlink(&self) -> bool {
        !matches!(self.sender, Sender::Token(_))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    records: Vec<TranscriptRecord>,
}

impl Transcript {
    pub fn next_seq(&self) -> u64 {
        self.records.len() as u64
    }

    pub fn push(&mut self, rec: TranscriptRecord) -> u64 {
        debug_assert_eq!(rec.seq, self.next_seq());
        if let Some(last) = self.records.last() {
            assert!(rec.t_ns >= last.t_ns, "transcript must stay time-ordered");
        }
        self.records.push(rec);
        self.records.len() as u64 - 1
    }

    pub fn records(&self) -> &[TranscriptRecord] {
        &self.records
    }

    pub fn get_mut(&mut self, seq: u64) -> Option<&mut TranscriptRecord> {
        self.records.get_mut(seq as usize)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn since(&self, seq: u64) -> &[TranscriptRecord] {
        &self.records[(seq as usize).min(self.records.len())..]
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, TranscriptParseError> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| TranscriptParseError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| TranscriptParseError::Line {
                line: i + 1,
                msg: e.to_string(),
            })?;
            records.push(rec);
        }
        if records.is_empty() {
            return Err(TranscriptParseError::Empty);
        }
        Ok(Self { records })
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum TranscriptParseError {
    #[error("transcript is empty")]
    Empty,
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("read failed: {0}")]
    Io(String),
}
