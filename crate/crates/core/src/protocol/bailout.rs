//! Landmark-assisted creation of outgoing links for a node short on lenders.

use std::collections::BTreeMap;

use super::{delta_of, MessageKind, ProtocolError, TraceEvent, World};
use crate::crypto::Signature;
use crate::model::{Amount, LinkChange, NodeId, Rate, RequestId, Tick};
use crate::wire::Writer;

#[derive(Clone, Debug, PartialEq)]
pub struct BailoutConfig {
    /// Candidates the landmark links to per round.
    pub m_out: usize,
    /// Length of each round's response window.
    pub tr: Tick,
    pub fee_per_link: Amount,
    pub max_rounds: usize,
    /// Rate on links created for the requestor.
    pub interest: Rate,
    /// Weight of the landmark's temporary links.
    pub temp_weight: Amount,
}

impl Default for BailoutConfig {
    fn default() -> Self {
        Self {
            m_out: 10,
            tr: 10,
            fee_per_link: 1,
            max_rounds: 3,
            interest: Rate(1000),
            temp_weight: 1,
        }
    }
}

pub trait LendingPolicy {
    /// Amount `lender` would extend to `requestor`, or `None` to refuse.
    fn offer(&mut self, lender: NodeId, requestor: NodeId, round: usize) -> Option<Amount>;
}

/// Fixed offers per node; everyone else uses `default`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScriptedLending {
    pub offers: BTreeMap<NodeId, Amount>,
    pub default: Option<Amount>,
}

impl LendingPolicy for ScriptedLending {
    fn offer(&mut self, lender: NodeId, _requestor: NodeId, _round: usize) -> Option<Amount> {
        self.offers
            .get(&lender)
            .copied()
            .or(self.default)
            .filter(|&v| v > 0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutlinkRequest {
    pub requestor: NodeId,
    pub candidate: NodeId,
    pub inlink: bool,
    pub t: Tick,
    pub sig_req: Signature,
}

impl OutlinkRequest {
    pub fn message(requestor: NodeId, candidate: NodeId, inlink: bool, t: Tick) -> Vec<u8> {
        let mut w = Writer::new();
        w.str("outreq")
            .u32(requestor.0)
            .u32(candidate.0)
            .u8(inlink as u8)
            .u64(t);
        w.finish()
    }

    pub fn signed(world: &mut World, requestor: NodeId, candidate: NodeId, t: Tick) -> Self {
        let sig_req = world
            .keys
            .sign(requestor, &Self::message(requestor, candidate, false, t));
        Self {
            requestor,
            candidate,
            inlink: false,
            t,
            sig_req,
        }
    }
}

/// Relays `req` through the landmark to its candidate and returns the
/// candidate's answer. Bad signatures are refused and logged.
pub fn out_req(
    world: &mut World,
    landmark: NodeId,
    req: &OutlinkRequest,
    tr: Tick,
    round: usize,
    policy: &mut dyn LendingPolicy,
) -> Result<Option<Amount>, ProtocolError> {
    if req.t >= tr {
        return Err(ProtocolError::WindowClosed { t: req.t, tr });
    }
    world.send(MessageKind::OutReq, req.requestor, landmark);
    world.send(MessageKind::OutReq, landmark, req.candidate);
    let msg = OutlinkRequest::message(req.requestor, req.candidate, req.inlink, req.t);
    let answer = if !world.keys.verify(req.requestor, &msg, &req.sig_req) {
        world.trace.push(TraceEvent::Discarded {
            request_id: RequestId::new(format!("outreq/{}/{}", req.requestor, req.t)),
            node: req.candidate,
            reason: "invalid requestor signature".into(),
        });
        None
    } else if req.inlink {
        None
    } else {
        policy.offer(req.candidate, req.requestor, round)
    };
    world.send(MessageKind::OutReply, req.candidate, landmark);
    world.send(MessageKind::OutReply, landmark, req.requestor);
    Ok(answer)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BailoutOutcome {
    pub landmark: NodeId,
    pub links: Vec<(NodeId, Amount)>,
    pub fee: Amount,
    pub rounds: usize,
    pub candidates: Vec<Vec<NodeId>>,
    pub ledger_indices: Vec<u64>,
    pub messages: u64,
}

/// Nodes the landmark may propose: not the requestor, not already lending
/// to it; best connected first.
pub fn candidate_pool(world: &World, i: NodeId, landmark: NodeId) -> Vec<NodeId> {
    let mut pool: Vec<(usize, NodeId)> = world
        .net
        .nodes()
        .filter(|&n| n != i && n != landmark && world.net.link(i, n).is_none())
        .map(|n| (world.net.degree(n), n))
        .collect();
    pool.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    pool.into_iter().map(|(_, n)| n).collect()
}

/// Runs one bailout session for `i`. The landmark joins as a fresh node,
/// holds temporary links for the session and leaves with none. Returns
/// [`ProtocolError::BailoutFailed`] when no round produced a link.
pub fn bailout(
    world: &mut World,
    i: NodeId,
    cfg: &BailoutConfig,
    policy: &mut dyn LendingPolicy,
) -> Result<BailoutOutcome, ProtocolError> {
    if !world.net.contains(i) {
        return Err(crate::model::ModelError::UnknownNode(i).into());
    }
    let start_messages = world.messages;
    let lm = world.net.next_free_id();
    world.net.add_node(lm)?;
    world.keys.register(lm);
    let session = RequestId::new(format!("bailout/{}/{}", i, world.now));
    let mut temp: Vec<(NodeId, NodeId, RequestId)> = Vec::new();

    let rid = session.child(format!("lm-{i}"));
    if world
        .multisig(lm, cfg.temp_weight, i, &rid, Rate::ZERO, true)
        .is_ok()
    {
        temp.push((i, lm, rid));
    }

    let pool = candidate_pool(world, i, lm);
    let mut out = BailoutOutcome {
        landmark: lm,
        links: Vec::new(),
        fee: 0,
        rounds: 0,
        candidates: Vec::new(),
        ledger_indices: Vec::new(),
        messages: 0,
    };
    for round in 0..cfg.max_rounds {
        let batch: Vec<NodeId> = pool
            .iter()
            .skip(round * cfg.m_out)
            .take(cfg.m_out)
            .copied()
            .collect();
        if batch.is_empty() {
            break;
        }
        out.rounds = round + 1;
        let round_start = world.now;
        let tr = round_start + cfg.tr;
        for &j in &batch {
            let rid = session.child(format!("lm-{j}"));
            if world
                .multisig(j, cfg.temp_weight, lm, &rid, Rate::ZERO, true)
                .is_ok()
            {
                temp.push((lm, j, rid));
            }
        }
        for &j in &batch {
            if world.net.link(lm, j).is_none() {
                continue;
            }
            let req = OutlinkRequest::signed(world, i, j, round_start + 1);
            let Some(val) = out_req(world, lm, &req, tr, round, policy)? else {
                continue;
            };
            let rid = session.child(j);
            let Ok(contract) = world.multisig(j, val, i, &rid, cfg.interest, false) else {
                continue;
            };
            let change = LinkChange {
                borrower: i,
                lender: j,
                before: 0,
                after: val,
            };
            let idx = world.write_ledger(contract, None, vec![delta_of(&change, cfg.interest)])?;
            out.ledger_indices.push(idx);
            out.links.push((j, val));
        }
        out.candidates.push(batch);
        world.now = tr;
        if !out.links.is_empty() {
            break;
        }
    }

    for (borrower, lender, rid) in temp {
        if world.net.link(borrower, lender).is_some() {
            world.settle_old_link(borrower, lender, &rid)?;
        }
    }
    world.net.remove_node(lm)?;
    out.fee = cfg.fee_per_link * out.links.len() as Amount;
    out.messages = world.messages - start_messages;
    if out.links.is_empty() {
        return Err(ProtocolError::BailoutFailed { rounds: out.rounds });
    }
    Ok(out)
}
