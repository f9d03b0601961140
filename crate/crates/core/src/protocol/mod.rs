//! Balance transfer, MultiSig contracts, settlement and bailout.
//!
//! All protocol state for one run lives in [`World`]. Operations mutate it
//! synchronously; the simulator decides when each one fires.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::chord::ChordError;
use crate::contract::{canonical_bytes, ContractCtBal, SettlementAck};
use crate::crypto::{KeyMode, Keyring};
use crate::ledger::{Ledger, LedgerError, LedgerPayload, TopologyDelta};
use crate::model::{
    Amount, CreditNetwork, LinkChange, ModelError, NodeId, Rate, RequestId, SharedLogs, Tick,
};
use crate::prefix::RoutingError;

pub mod bailout;
pub mod routing;
pub mod transfer;

pub use bailout::{
    bailout, out_req, BailoutConfig, BailoutOutcome, LendingPolicy, OutlinkRequest, ScriptedLending,
};
pub use routing::{
    forward, response_envelope, ChordRouter, Delivery, PrefixRouter, RelayBehavior, ResponseRouter,
};
pub use transfer::{
    bt_accept, bt_broadcast, bt_respond, complete_transfer, eligible_subject, run_balance_transfer,
    transfer_subject, AcceptOutcome, Accepted, BalanceTransferRequest, BtOutcome, ResponsePolicy,
    TransferResponse,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Chord(#[from] ChordError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("acceptance evaluated at {now}, deadline {tp} not yet passed")]
    DeadlineNotReached { now: Tick, tp: Tick },
    #[error("{0} refused to sign")]
    SignatureRefused(NodeId),
    #[error("signature by {0} failed verification")]
    SignatureInvalid(NodeId),
    #[error("transfer subject of {0} changed since responding")]
    StaleSubject(NodeId),
    #[error("request at {t} outside response window ending at {tr}")]
    WindowClosed { t: Tick, tr: Tick },
    #[error("bailout failed after {rounds} rounds")]
    BailoutFailed { rounds: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MessageKind {
    ResponseHop,
    SignRequest,
    Countersign,
    AckRequest,
    Ack,
    OutReq,
    OutReply,
}

/// What authorizes a link change.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Cover {
    Contract(RequestId),
    Ack(RequestId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    Broadcast {
        from: NodeId,
        request_id: RequestId,
        recipients: usize,
    },
    Message {
        kind: MessageKind,
        from: NodeId,
        to: NodeId,
    },
    LinkChanged {
        change: LinkChange,
        cover: Cover,
    },
    ContractCompleted {
        request_id: RequestId,
        temporary: bool,
    },
    LedgerWrite {
        index: u64,
        request_id: RequestId,
    },
    Discarded {
        request_id: RequestId,
        node: NodeId,
        reason: String,
    },
}

/// Settlement the old lender would not acknowledge.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dispute {
    pub request_id: RequestId,
    pub user: NodeId,
    pub src: NodeId,
    pub weight: Amount,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LinkRecord {
    Contract,
    Ack,
}

/// Latest signed artifact per link, plus every contract and ack by id.
#[derive(Debug, Default)]
pub struct ContractStore {
    contracts: HashMap<RequestId, (ContractCtBal, bool)>,
    acks: HashMap<RequestId, SettlementAck>,
    latest: HashMap<(NodeId, NodeId), (LinkRecord, RequestId)>,
}

impl ContractStore {
    pub fn contract(&self, rid: &RequestId) -> Option<&ContractCtBal> {
        self.contracts.get(rid).map(|(c, _)| c)
    }

    pub fn is_temporary(&self, rid: &RequestId) -> bool {
        self.contracts.get(rid).map(|(_, t)| *t).unwrap_or(false)
    }

    pub fn ack(&self, rid: &RequestId) -> Option<&SettlementAck> {
        self.acks.get(rid)
    }

    pub fn contract_count(&self) -> usize {
        self.contracts.len()
    }

    /// Weight of `borrower → lender` according to the newest signed record.
    pub fn signed_weight(&self, borrower: NodeId, lender: NodeId) -> Option<Amount> {
        let (kind, rid) = self.latest.get(&(borrower, lender))?;
        match kind {
            LinkRecord::Contract => self.contract(rid).map(|c| c.val),
            LinkRecord::Ack => Some(0),
        }
    }

    fn put_contract(&mut self, c: ContractCtBal, temporary: bool) {
        self.latest.insert(
            (c.user, c.dest),
            (LinkRecord::Contract, c.request_id.clone()),
        );
        self.contracts.insert(c.request_id.clone(), (c, temporary));
    }

    fn put_ack(&mut self, a: SettlementAck) {
        self.latest
            .insert((a.user, a.src), (LinkRecord::Ack, a.request_id.clone()));
        self.acks.insert(a.request_id.clone(), a);
    }
}

/// Outcome of the end-of-run signature sweep over link changes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BilateralityReport {
    pub changes: usize,
    pub covered: usize,
    pub contested: usize,
    pub violations: Vec<String>,
}

/// Outcome of comparing one node's stated link weight with the signed record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClaimCheck {
    pub claimer: NodeId,
    pub borrower: NodeId,
    pub lender: NodeId,
    pub claimed: Amount,
    pub signed: Amount,
}

impl ClaimCheck {
    pub fn is_misreport(&self) -> bool {
        self.claimed != self.signed
    }
}

#[derive(Debug)]
pub struct World {
    pub net: CreditNetwork,
    pub keys: Keyring,
    pub logs: SharedLogs,
    pub ledger: Ledger,
    pub store: ContractStore,
    pub trace: Vec<TraceEvent>,
    pub disputes: Vec<Dispute>,
    /// Nodes that refuse every signing request.
    pub offline: BTreeSet<NodeId>,
    pub behaviors: BTreeMap<NodeId, RelayBehavior>,
    pub messages: u64,
    pub now: Tick,
}

impl World {
    pub fn new(net: CreditNetwork, key_mode: KeyMode) -> Self {
        Self {
            net,
            keys: Keyring::new(key_mode),
            logs: SharedLogs::new(),
            ledger: Ledger::new(),
            store: ContractStore::default(),
            trace: Vec::new(),
            disputes: Vec::new(),
            offline: BTreeSet::new(),
            behaviors: BTreeMap::new(),
            messages: 0,
            now: 0,
        }
    }

    /// Convenience constructor with deterministic keys seeded from the network.
    pub fn deterministic(net: CreditNetwork) -> Self {
        let seed = net.seed();
        Self::new(net, KeyMode::Deterministic { seed })
    }

    pub fn behavior(&self, n: NodeId) -> RelayBehavior {
        self.behaviors
            .get(&n)
            .copied()
            .unwrap_or(RelayBehavior::Honest)
    }

    pub(crate) fn send(&mut self, kind: MessageKind, from: NodeId, to: NodeId) {
        self.messages += 1;
        self.trace.push(TraceEvent::Message { kind, from, to });
    }

    fn sign_as(
        &mut self,
        node: NodeId,
        msg: &[u8],
    ) -> Result<crate::crypto::Signature, ProtocolError> {
        if self.offline.contains(&node) {
            return Err(ProtocolError::SignatureRefused(node));
        }
        Ok(self.keys.sign(node, msg))
    }

    fn record_change(&mut self, change: LinkChange, cover: Cover) {
        self.trace.push(TraceEvent::LinkChanged { change, cover });
    }

    /// Signed weight of a link, creating the genesis contract for links that
    /// predate the run on first use.
    pub fn signed_weight(&mut self, borrower: NodeId, lender: NodeId) -> Amount {
        if let Some(w) = self.store.signed_weight(borrower, lender) {
            return w;
        }
        let Some(link) = self.net.link(borrower, lender).copied() else {
            return 0;
        };
        let rid = RequestId::new(format!("genesis/{}-{}", borrower, lender));
        let msg = canonical_bytes(lender, borrower, link.weight, &rid);
        let c = ContractCtBal {
            dest: lender,
            user: borrower,
            val: link.weight,
            sig_dest: self.keys.sign(lender, &msg),
            sig_user: self.keys.sign(borrower, &msg),
            request_id: rid,
        };
        self.store.put_contract(c, false);
        link.weight
    }

    pub fn check_claim(
        &mut self,
        claimer: NodeId,
        borrower: NodeId,
        lender: NodeId,
        claimed: Amount,
    ) -> ClaimCheck {
        let signed = self.signed_weight(borrower, lender);
        ClaimCheck {
            claimer,
            borrower,
            lender,
            claimed,
            signed,
        }
    }

    /// Two-round sign/countersign over `⟨dest, user, val, request_id⟩`,
    /// then creation of `user → dest`. Nothing changes unless both
    /// signatures are collected and verified.
    pub fn multisig(
        &mut self,
        dest: NodeId,
        val: Amount,
        user: NodeId,
        request_id: &RequestId,
        interest: Rate,
        temporary: bool,
    ) -> Result<ContractCtBal, ProtocolError> {
        if val == 0 {
            return Err(ProtocolError::InvalidRequest(
                "contract value must be positive".into(),
            ));
        }
        for n in [dest, user] {
            if !self.net.contains(n) {
                return Err(ModelError::UnknownNode(n).into());
            }
        }
        if dest == user {
            return Err(ModelError::SelfLink(dest).into());
        }
        if self.net.link(user, dest).is_some() {
            return Err(ModelError::DuplicateLink(user, dest).into());
        }
        let msg = canonical_bytes(dest, user, val, request_id);
        let sig_dest = self.sign_as(dest, &msg)?;
        self.send(MessageKind::SignRequest, dest, user);
        if !self.keys.verify(dest, &msg, &sig_dest) {
            return Err(ProtocolError::SignatureInvalid(dest));
        }
        let sig_user = self.sign_as(user, &msg)?;
        self.send(MessageKind::Countersign, user, dest);
        if !self.keys.verify(user, &msg, &sig_user) {
            return Err(ProtocolError::SignatureInvalid(user));
        }
        let contract = ContractCtBal {
            dest,
            user,
            val,
            request_id: request_id.clone(),
            sig_dest,
            sig_user,
        };
        let change = self.net.create_link(user, dest, val, interest)?;
        self.record_change(change, Cover::Contract(request_id.clone()));
        self.store.put_contract(contract.clone(), temporary);
        self.trace.push(TraceEvent::ContractCompleted {
            request_id: request_id.clone(),
            temporary,
        });
        Ok(contract)
    }

    /// Zeroes `user → src` and collects both acknowledgements. When `src`
    /// refuses, the link is still zeroed and a dispute is recorded.
    pub fn settle_old_link(
        &mut self,
        user: NodeId,
        src: NodeId,
        request_id: &RequestId,
    ) -> Result<SettlementAck, ProtocolError> {
        let weight = self.net.link(user, src).map(|l| l.weight).ok_or_else(|| {
            ProtocolError::InvalidRequest(format!("no link {user} -> {src} to settle"))
        })?;
        // make sure the pre-settlement weight has a signed record
        self.signed_weight(user, src);
        let change = self.net.apply_link_update(user, src, 0)?;
        self.record_change(change, Cover::Ack(request_id.clone()));
        let msg = canonical_bytes(src, user, 0, request_id);
        self.send(MessageKind::AckRequest, user, src);
        let sig_src = match self.sign_as(src, &msg) {
            Ok(s) => {
                self.send(MessageKind::Ack, src, user);
                if !self.keys.verify(src, &msg, &s) {
                    return Err(ProtocolError::SignatureInvalid(src));
                }
                Some(s)
            }
            Err(_) => {
                self.disputes.push(Dispute {
                    request_id: request_id.clone(),
                    user,
                    src,
                    weight,
                });
                None
            }
        };
        // the user's countersignature is part of its own settlement step
        let sig_user = self.keys.sign(user, &msg);
        let ack = SettlementAck {
            src,
            user,
            request_id: request_id.clone(),
            sig_src,
            sig_user,
        };
        self.store.put_ack(ack.clone());
        Ok(ack)
    }

    /// Single ledger write for a completed contract.
    pub fn write_ledger(
        &mut self,
        contract: ContractCtBal,
        ack: Option<SettlementAck>,
        delta: Vec<TopologyDelta>,
    ) -> Result<u64, ProtocolError> {
        let rid = contract.request_id.clone();
        let index = self.ledger.write(
            &self.keys,
            LedgerPayload {
                contract,
                ack,
                delta,
            },
            self.now,
        )?;
        self.trace.push(TraceEvent::LedgerWrite {
            index,
            request_id: rid,
        });
        Ok(index)
    }

    /// Every link change in the trace must be backed by a dual-signed
    /// contract matching it, or by an acknowledgement of a zeroing.
    pub fn verify_bilaterality(&self) -> BilateralityReport {
        let mut r = BilateralityReport::default();
        for ev in &self.trace {
            let TraceEvent::LinkChanged { change, cover } = ev else {
                continue;
            };
            r.changes += 1;
            match cover {
                Cover::Contract(rid) => match self.store.contract(rid) {
                    Some(c)
                        if c.verify(&self.keys)
                            && c.user == change.borrower
                            && c.dest == change.lender
                            && c.val == change.after =>
                    {
                        r.covered += 1
                    }
                    _ => r
                        .violations
                        .push(format!("{rid}: contract missing or invalid for {change:?}")),
                },
                Cover::Ack(rid) => match self.store.ack(rid) {
                    Some(a)
                        if a.user == change.borrower
                            && a.src == change.lender
                            && change.after == 0 =>
                    {
                        if a.is_contested() {
                            r.contested += 1;
                        } else if a.verify(&self.keys) {
                            r.covered += 1;
                        } else {
                            r.violations.push(format!("{rid}: ack signatures invalid"));
                        }
                    }
                    _ => r
                        .violations
                        .push(format!("{rid}: ack missing or mismatched for {change:?}")),
                },
            }
        }
        r
    }

    /// Checks that the ledger holds exactly one entry per completed
    /// non-temporary contract and nothing else.
    pub fn audit_single_write(&self) -> Result<usize, String> {
        let mut completed: BTreeMap<&RequestId, usize> = BTreeMap::new();
        let mut written: BTreeMap<&RequestId, usize> = BTreeMap::new();
        for ev in &self.trace {
            match ev {
                TraceEvent::ContractCompleted {
                    request_id,
                    temporary: false,
                } => *completed.entry(request_id).or_default() += 1,
                TraceEvent::LedgerWrite { request_id, .. } => {
                    *written.entry(request_id).or_default() += 1
                }
                _ => {}
            }
        }
        if self.ledger.len() as usize != completed.len() {
            return Err(format!(
                "{} ledger entries for {} completed contracts",
                self.ledger.len(),
                completed.len()
            ));
        }
        for e in self.ledger.entries() {
            let rid = &e.payload.contract.request_id;
            if !completed.contains_key(rid) {
                return Err(format!(
                    "ledger entry {} ({rid}) has no completed contract",
                    e.index
                ));
            }
        }
        if let Some((rid, n)) = completed.iter().find(|(_, &n)| n != 1) {
            return Err(format!("contract {rid} completed {n} times"));
        }
        if let Some((rid, _)) = completed
            .iter()
            .find(|(rid, _)| self.ledger.index_of(rid).is_none())
        {
            return Err(format!("contract {rid} never written"));
        }
        Ok(completed.len())
    }
}

pub(crate) fn delta_of(change: &LinkChange, interest: Rate) -> TopologyDelta {
    TopologyDelta {
        borrower: change.borrower,
        lender: change.lender,
        before: change.before,
        after: change.after,
        interest,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abde() -> World {
        // E borrows 20 from A; D is a fresh lender
        let mut net = CreditNetwork::with_nodes(5, 1);
        net.create_link(NodeId(4), NodeId(0), 20, Rate(900))
            .unwrap();
        World::deterministic(net)
    }

    #[test]
    fn multisig_creates_link_and_verifies() {
        let mut w = abde();
        let rid = RequestId::new("m1");
        let c = w
            .multisig(NodeId(3), 20, NodeId(4), &rid, Rate(100), false)
            .unwrap();
        assert!(c.verify(&w.keys));
        assert_eq!(w.net.link(NodeId(4), NodeId(3)).unwrap().weight, 20);
        assert_eq!(
            w.net.table(NodeId(4)).unwrap().get(NodeId(3), false),
            Some(20)
        );
        assert_eq!(
            w.net.table(NodeId(3)).unwrap().get(NodeId(4), true),
            Some(20)
        );
    }

    #[test]
    fn multisig_abort_leaves_graph_unchanged() {
        let mut w = abde();
        let before = w.net.serialize();
        w.offline.insert(NodeId(4));
        let err = w.multisig(
            NodeId(3),
            20,
            NodeId(4),
            &RequestId::new("m2"),
            Rate(100),
            false,
        );
        assert_eq!(err, Err(ProtocolError::SignatureRefused(NodeId(4))));
        assert_eq!(w.net.serialize(), before);
        assert_eq!(w.store.contract_count(), 0);
        assert!(w.ledger.is_empty());
    }

    #[test]
    fn settle_then_pipeline_conserves_debt() {
        let mut w = abde();
        let e = NodeId(4);
        let before = w.net.total_debt(e);
        let rid = RequestId::new("p");
        w.multisig(NodeId(3), 20, e, &rid, Rate(100), false)
            .unwrap();
        let ack = w.settle_old_link(e, NodeId(0), &rid).unwrap();
        assert!(ack.verify(&w.keys));
        assert!(w.net.link(e, NodeId(0)).is_none());
        assert!(w.net.table(NodeId(0)).unwrap().is_empty());
        assert_eq!(w.net.total_debt(e), before);
        let report = w.verify_bilaterality();
        assert_eq!(report.changes, 2);
        assert_eq!(report.covered, 2);
        assert!(report.violations.is_empty());
    }

    #[test]
    fn offline_source_leaves_contested_settlement() {
        let mut w = abde();
        w.offline.insert(NodeId(0));
        let ack = w
            .settle_old_link(NodeId(4), NodeId(0), &RequestId::new("c"))
            .unwrap();
        assert!(ack.is_contested());
        assert!(w.net.link(NodeId(4), NodeId(0)).is_none());
        assert_eq!(w.disputes.len(), 1);
        assert_eq!(w.disputes[0].weight, 20);
        assert_eq!(w.verify_bilaterality().contested, 1);
    }

    #[test]
    fn claims_checked_against_signed_weight() {
        let mut w = abde();
        assert!(!w
            .check_claim(NodeId(4), NodeId(4), NodeId(0), 20)
            .is_misreport());
        let c = w.check_claim(NodeId(0), NodeId(4), NodeId(0), 35);
        assert!(c.is_misreport());
        assert_eq!(c.signed, 20);
    }
}
