//! Shared hash logs: every node that handles a routed response records a
//! signed commitment to the hashed id of the node it forwarded to. The final
//! recipient records a receipt pointing at itself. An arbiter can later walk
//! a claimed path against these records and name the segment where the
//! trail breaks.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use super::{CreditNetwork, NodeId, RequestId};
use crate::crypto::{Digest, Keyring, Signature};
use crate::wire::Writer;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedHashLogEntry {
    pub writer: NodeId,
    pub hashed_next_hop: Digest,
    pub signature: Signature,
    pub seq: u64,
    pub request_id: RequestId,
}

impl SharedHashLogEntry {
    pub fn verify(&self, keys: &Keyring) -> bool {
        let msg = log_message(&self.request_id, self.seq, &self.hashed_next_hop);
        keys.verify(self.writer, &msg, &self.signature)
    }
}

/// Bytes covered by a log entry's signature. The request id and sequence
/// number are bound in alongside the digest so entries cannot be replayed
/// into another request.
pub fn log_message(request_id: &RequestId, seq: u64, hashed_next_hop: &Digest) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(request_id.as_str())
        .u64(seq)
        .bytes(hashed_next_hop.as_bytes());
    w.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogReader {
    Node(NodeId),
    Arbiter,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogError {
    #[error("{reader:?} may not read the log of {writer}")]
    AccessDenied { reader: LogReader, writer: NodeId },
    #[error("sequence {got} for {writer} does not exceed {last}")]
    NonMonotoneSeq { writer: NodeId, last: u64, got: u64 },
}

#[derive(Debug, Default)]
pub struct SharedLogs {
    entries: Vec<SharedHashLogEntry>,
    by_request: HashMap<RequestId, Vec<usize>>,
    last_seq: HashMap<(NodeId, RequestId), u64>,
    grants: HashSet<(NodeId, NodeId)>,
}

impl SharedLogs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Signs and appends an entry for `writer`, returning its sequence number.
    pub fn write(
        &mut self,
        keys: &mut Keyring,
        writer: NodeId,
        request_id: &RequestId,
        hashed_next_hop: Digest,
    ) -> u64 {
        let seq = self
            .last_seq
            .get(&(writer, request_id.clone()))
            .map(|s| s + 1)
            .unwrap_or(0);
        let signature = keys.sign(writer, &log_message(request_id, seq, &hashed_next_hop));
        self.append(SharedHashLogEntry {
            writer,
            hashed_next_hop,
            signature,
            seq,
            request_id: request_id.clone(),
        })
        .expect("fresh sequence number");
        seq
    }

    /// Appends a pre-built entry. Sequence numbers must strictly increase per
    /// `(writer, request_id)`.
    pub fn append(&mut self, entry: SharedHashLogEntry) -> Result<(), LogError> {
        let key = (entry.writer, entry.request_id.clone());
        if let Some(&last) = self.last_seq.get(&key) {
            if entry.seq <= last {
                return Err(LogError::NonMonotoneSeq {
                    writer: entry.writer,
                    last,
                    got: entry.seq,
                });
            }
        }
        self.last_seq.insert(key, entry.seq);
        self.by_request
            .entry(entry.request_id.clone())
            .or_default()
            .push(self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    /// Lets `reader` see `writer`'s entries even when the two share no
    /// credit link (e.g. overlay peers that handed a message to `writer`).
    pub fn grant(&mut self, writer: NodeId, reader: NodeId) {
        self.grants.insert((writer, reader));
    }

    fn can_read(&self, reader: LogReader, writer: NodeId, net: &CreditNetwork) -> bool {
        match reader {
            LogReader::Arbiter => true,
            LogReader::Node(r) => {
                r == writer || net.are_adjacent(r, writer) || self.grants.contains(&(writer, r))
            }
        }
    }

    /// `writer`'s entries for one request, as seen by `reader`.
    pub fn read(
        &self,
        reader: LogReader,
        writer: NodeId,
        request_id: &RequestId,
        net: &CreditNetwork,
    ) -> Result<Vec<&SharedHashLogEntry>, LogError> {
        if !self.can_read(reader, writer, net) {
            return Err(LogError::AccessDenied { reader, writer });
        }
        Ok(self
            .for_request(request_id)
            .into_iter()
            .filter(|e| e.writer == writer)
            .collect())
    }

    /// Arbiter view of every entry for a request, in write order.
    pub fn for_request(&self, request_id: &RequestId) -> Vec<&SharedHashLogEntry> {
        self.by_request
            .get(request_id)
            .map(|idx| idx.iter().map(|&i| &self.entries[i]).collect())
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AuditVerdict {
    /// No log entries exist for the request.
    NoTrail,
    /// Every hop, including the final receipt, is backed by a valid entry.
    Verified { path: Vec<NodeId> },
    /// The trail breaks between the two nodes of `suspect`. One of them
    /// misbehaved; the logs cannot say which.
    Broken {
        verified_prefix: Vec<NodeId>,
        suspect: (NodeId, NodeId),
    },
}

impl AuditVerdict {
    pub fn suspect(&self) -> Option<(NodeId, NodeId)> {
        match self {
            AuditVerdict::Broken { suspect, .. } => Some(*suspect),
            _ => None,
        }
    }
}

/// Walks `claimed_path` (responder first, requestor last) against the
/// request's log entries.
///
/// Node `p[h]` is expected to hold a signature-valid entry whose digest is
/// `node_digest(p[h+1])`; the last node's entry must name itself. At the
/// first hop that fails:
/// - an entry by `p[h]` exists but is invalid or points elsewhere: the
///   segment is `(p[h], p[h+1])`;
/// - `p[h]` wrote nothing: the segment is `(p[h-1], p[h])`, since either the
///   sender never delivered or the receiver swallowed the message.
pub fn audit_path<F>(
    entries: &[&SharedHashLogEntry],
    claimed_path: &[NodeId],
    keys: &Keyring,
    node_digest: F,
) -> AuditVerdict
where
    F: Fn(NodeId) -> Option<Digest>,
{
    if entries.is_empty() {
        return AuditVerdict::NoTrail;
    }
    let mut verified = Vec::new();
    for (h, &node) in claimed_path.iter().enumerate() {
        let next = claimed_path.get(h + 1).copied().unwrap_or(node);
        let expected = node_digest(next);
        let mine: Vec<&&SharedHashLogEntry> = entries.iter().filter(|e| e.writer == node).collect();
        let ok = mine
            .iter()
            .any(|e| e.verify(keys) && Some(e.hashed_next_hop) == expected);
        if ok {
            verified.push(node);
            continue;
        }
        let suspect = if !mine.is_empty() || h == 0 {
            (node, next)
        } else {
            (claimed_path[h - 1], node)
        };
        return AuditVerdict::Broken {
            verified_prefix: verified,
            suspect,
        };
    }
    AuditVerdict::Verified {
        path: claimed_path.to_vec(),
    }
}
