//! Append-only, hash-linked ledger of completed contracts.
//!
//! Persisted form is one line per entry:
//!
//! ```text
//! <index> <prev> <ts> <contract> <ack> <delta>\t<digest>
//! ```
//!
//! `prev` is the hex digest of the exact bytes of the previous line (all
//! zeros for entry 0) and `digest` is the hex digest of everything before the
//! tab. `contract` and `ack` are hex-encoded wire bytes (`-` for no ack);
//! `delta` is a comma list of `borrower:lender:before:after:rate_bp`.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::contract::{ContractCtBal, SettlementAck};
use crate::crypto::{hash, Digest, Keyring};
use crate::model::{Amount, CreditNetwork, ModelError, NodeId, Rate, RequestId, Tick};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("contract {request_id} rejected: {reason}")]
    Rejected {
        request_id: RequestId,
        reason: String,
    },
    #[error("index {index} out of range (length {len})")]
    OutOfRange { index: u64, len: u64 },
    #[error("line {line}: {msg}")]
    Corrupt { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TopologyDelta {
    pub borrower: NodeId,
    pub lender: NodeId,
    pub before: Amount,
    pub after: Amount,
    pub interest: Rate,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerPayload {
    pub contract: ContractCtBal,
    pub ack: Option<SettlementAck>,
    pub delta: Vec<TopologyDelta>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerEntry {
    pub index: u64,
    pub prev_digest: Digest,
    pub timestamp: Tick,
    pub payload: LedgerPayload,
}

#[derive(Debug, Default, Clone)]
pub struct Ledger {
    lines: Vec<String>,
    entries: Vec<LedgerEntry>,
    by_request: HashMap<RequestId, u64>,
}

fn encode_delta(delta: &[TopologyDelta]) -> String {
    if delta.is_empty() {
        return "-".into();
    }
    delta
        .iter()
        .map(|d| {
            format!(
                "{}:{}:{}:{}:{}",
                d.borrower.0, d.lender.0, d.before, d.after, d.interest.0
            )
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn decode_delta(s: &str) -> Option<Vec<TopologyDelta>> {
    if s == "-" {
        return Some(Vec::new());
    }
    s.split(',')
        .map(|item| {
            let f: Vec<&str> = item.split(':').collect();
            if f.len() != 5 {
                return None;
            }
            Some(TopologyDelta {
                borrower: NodeId(f[0].parse().ok()?),
                lender: NodeId(f[1].parse().ok()?),
                before: f[2].parse().ok()?,
                after: f[3].parse().ok()?,
                interest: Rate(f[4].parse().ok()?),
            })
        })
        .collect()
}

fn body_of(entry: &LedgerEntry) -> String {
    let ack = entry
        .payload
        .ack
        .as_ref()
        .map(|a| hex::encode(a.to_bytes()))
        .unwrap_or_else(|| "-".into());
    format!(
        "{} {} {} {} {} {}",
        entry.index,
        entry.prev_digest.to_hex(),
        entry.timestamp,
        hex::encode(entry.payload.contract.to_bytes()),
        ack,
        encode_delta(&entry.payload.delta)
    )
}

fn parse_line(line: &str, n: usize) -> Result<LedgerEntry, LedgerError> {
    let corrupt = |msg: &str| LedgerError::Corrupt {
        line: n,
        msg: msg.to_string(),
    };
    let (body, _) = line
        .split_once('\t')
        .ok_or_else(|| corrupt("missing digest"))?;
    let f: Vec<&str> = body.split(' ').collect();
    if f.len() != 6 {
        return Err(corrupt("wrong field count"));
    }
    let index = f[0].parse().map_err(|_| corrupt("index"))?;
    let prev_digest = Digest::from_hex(f[1]).ok_or_else(|| corrupt("prev digest"))?;
    let timestamp = f[2].parse().map_err(|_| corrupt("timestamp"))?;
    let cbytes = hex::decode(f[3]).map_err(|_| corrupt("contract hex"))?;
    let contract = ContractCtBal::from_bytes(&cbytes).map_err(|e| corrupt(&e.to_string()))?;
    let ack = if f[4] == "-" {
        None
    } else {
        let abytes = hex::decode(f[4]).map_err(|_| corrupt("ack hex"))?;
        Some(SettlementAck::from_bytes(&abytes).map_err(|e| corrupt(&e.to_string()))?)
    };
    let delta = decode_delta(f[5]).ok_or_else(|| corrupt("delta"))?;
    Ok(LedgerEntry {
        index,
        prev_digest,
        timestamp,
        payload: LedgerPayload {
            contract,
            ack,
            delta,
        },
    })
}

/// Checks digests and linkage of persisted lines. Digests are compared as
/// literal text so that any change to a line is caught.
fn verify_lines<S: AsRef<str>>(lines: &[S]) -> bool {
    let mut prev = Digest::ZERO;
    for (i, line) in lines.iter().enumerate() {
        let line = line.as_ref();
        let Some((body, digest)) = line.split_once('\t') else {
            return false;
        };
        if digest != hash(body.as_bytes()).to_hex() {
            return false;
        }
        let mut f = body.splitn(3, ' ');
        if f.next() != Some(i.to_string().as_str()) || f.next() != Some(prev.to_hex().as_str()) {
            return false;
        }
        prev = hash(line.as_bytes());
    }
    true
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn index_of(&self, request_id: &RequestId) -> Option<u64> {
        self.by_request.get(request_id).copied()
    }

    /// Appends a completed contract. A second submission for the same
    /// request id returns the original index and appends nothing.
    pub fn write(
        &mut self,
        keys: &Keyring,
        payload: LedgerPayload,
        timestamp: Tick,
    ) -> Result<u64, LedgerError> {
        let rid = payload.contract.request_id.clone();
        if let Some(&i) = self.by_request.get(&rid) {
            return Ok(i);
        }
        let reject = |reason: &str| LedgerError::Rejected {
            request_id: rid.clone(),
            reason: reason.to_string(),
        };
        if payload.contract.val == 0 {
            return Err(reject("zero value"));
        }
        if !payload.contract.verify_dest(keys) {
            return Err(reject("dest signature invalid"));
        }
        if !payload.contract.verify_user(keys) {
            return Err(reject("user signature invalid"));
        }
        if let Some(ack) = &payload.ack {
            if !ack.is_contested() && !ack.verify(keys) {
                return Err(reject("settlement ack invalid"));
            }
        }
        let index = self.len();
        let prev_digest = self
            .lines
            .last()
            .map(|l| hash(l.as_bytes()))
            .unwrap_or(Digest::ZERO);
        let entry = LedgerEntry {
            index,
            prev_digest,
            timestamp,
            payload,
        };
        let body = body_of(&entry);
        let line = format!("{}\t{}", body, hash(body.as_bytes()).to_hex());
        self.lines.push(line);
        self.entries.push(entry);
        self.by_request.insert(rid, index);
        Ok(index)
    }

    pub fn read(&self, index: u64) -> Result<&LedgerEntry, LedgerError> {
        self.entries
            .get(index as usize)
            .ok_or(LedgerError::OutOfRange {
                index,
                len: self.len(),
            })
    }

    pub fn verify_chain(&self) -> bool {
        verify_lines(&self.lines)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }

    /// Chain check over persisted text.
    pub fn verify_text(text: &str) -> bool {
        if text.is_empty() {
            return true;
        }
        let Some(stripped) = text.strip_suffix('\n') else {
            return false;
        };
        let lines: Vec<&str> = stripped.split('\n').collect();
        verify_lines(&lines)
    }

    /// Chain check over raw file bytes; invalid UTF-8 fails.
    pub fn verify_bytes(bytes: &[u8]) -> bool {
        std::str::from_utf8(bytes)
            .map(Self::verify_text)
            .unwrap_or(false)
    }

    pub fn from_text(text: &str) -> Result<Self, LedgerError> {
        if !Self::verify_text(text) {
            return Err(LedgerError::Corrupt {
                line: 0,
                msg: "chain verification failed".into(),
            });
        }
        let mut ledger = Ledger::new();
        for (n, line) in text.lines().enumerate() {
            let entry = parse_line(line, n)?;
            ledger
                .by_request
                .insert(entry.payload.contract.request_id.clone(), entry.index);
            ledger.entries.push(entry);
            ledger.lines.push(line.to_string());
        }
        Ok(ledger)
    }

    pub fn save(&self, path: &Path) -> Result<(), LedgerError> {
        std::fs::write(path, self.to_text()).map_err(|e| LedgerError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, LedgerError> {
        let text = std::fs::read_to_string(path).map_err(|e| LedgerError::Io(e.to_string()))?;
        Self::from_text(&text)
    }

    /// Applies every recorded delta to `base`.
    pub fn replay(&self, base: &CreditNetwork) -> Result<CreditNetwork, ModelError> {
        let mut net = base.clone();
        for e in &self.entries {
            for d in &e.payload.delta {
                for n in [d.borrower, d.lender] {
                    if !net.contains(n) {
                        net.add_node(n)?;
                    }
                }
                if net.link(d.borrower, d.lender).is_none() && d.after > 0 {
                    net.create_link(d.borrower, d.lender, d.after, d.interest)?;
                } else {
                    net.apply_link_update(d.borrower, d.lender, d.after as i64)?;
                }
            }
        }
        Ok(net)
    }
}
