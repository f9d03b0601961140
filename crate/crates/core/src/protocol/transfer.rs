//! Balance transfer: broadcast, encrypted responses, deadline acceptance and
//! settlement into a new incoming link at the requestor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::routing::{forward, response_envelope, Delivery, ResponseRouter};
use super::{delta_of, ProtocolError, TraceEvent, World};
use crate::chord::RingId;
use crate::crypto::{hash_parts, Ciphertext};
use crate::model::{Amount, CreditLink, CreditNetwork, NodeId, Rate, RequestId, Tick};

/// Ticks a response spends per hop.
pub const HOP_TICKS: Tick = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BalanceTransferRequest {
    pub requestor: NodeId,
    pub amt: Amount,
    pub intr: Rate,
    pub tp: Tick,
    pub issued_at: Tick,
    /// Ring id of the requestor, Chord variant only.
    pub key: Option<RingId>,
    pub request_id: RequestId,
}

impl BalanceTransferRequest {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.amt == 0 {
            return Err(ProtocolError::InvalidRequest("amt must be positive".into()));
        }
        if self.tp <= self.issued_at {
            return Err(ProtocolError::InvalidRequest(format!(
                "deadline {} not after broadcast time {}",
                self.tp, self.issued_at
            )));
        }
        Ok(())
    }

    pub fn response_id(&self, responder: NodeId) -> RequestId {
        self.request_id.child(responder)
    }
}

/// Extra filter on top of the rate rule, which always applies.
#[derive(Clone, Debug, PartialEq)]
pub enum ResponsePolicy {
    Rule,
    /// Each eligible node responds with probability `p`, drawn from a
    /// stream keyed by `(seed, request, node)`.
    Probabilistic {
        p: f64,
        seed: u64,
    },
    Only(std::collections::BTreeSet<NodeId>),
}

impl ResponsePolicy {
    fn admits(&self, j: NodeId, bt: &BalanceTransferRequest) -> bool {
        match self {
            ResponsePolicy::Rule => true,
            ResponsePolicy::Probabilistic { p, seed } => {
                let d = hash_parts(&[
                    &seed.to_be_bytes(),
                    bt.request_id.as_str().as_bytes(),
                    &j.0.to_be_bytes(),
                ]);
                ChaCha8Rng::seed_from_u64(d.truncate(64)).gen_bool(p.clamp(0.0, 1.0))
            }
            ResponsePolicy::Only(set) => set.contains(&j),
        }
    }
}

/// The lender link a responder would move: its highest-interest one, ties
/// to the smaller lender id.
pub fn transfer_subject(net: &CreditNetwork, j: NodeId) -> Option<CreditLink> {
    net.lender_links(j)
        .filter(|l| l.weight > 0)
        .max_by(|a, b| a.interest.cmp(&b.interest).then(b.lender.cmp(&a.lender)))
        .copied()
}

/// The subject link if `j` takes up the offer.
pub fn eligible_subject(
    net: &CreditNetwork,
    j: NodeId,
    bt: &BalanceTransferRequest,
    policy: &ResponsePolicy,
) -> Option<CreditLink> {
    if j == bt.requestor {
        return None;
    }
    let s = transfer_subject(net, j)?;
    if s.lender == bt.requestor || net.link(j, bt.requestor).is_some() {
        return None;
    }
    (bt.intr < s.interest && policy.admits(j, bt)).then_some(s)
}

/// Delivers the request to every node except the requestor, once each, in
/// id order. Costs one send at the requestor.
pub fn bt_broadcast(world: &mut World, bt: &BalanceTransferRequest) -> Vec<NodeId> {
    let recipients: Vec<NodeId> = world.net.nodes().filter(|&n| n != bt.requestor).collect();
    world.messages += recipients.len() as u64;
    world.trace.push(TraceEvent::Broadcast {
        from: bt.requestor,
        request_id: bt.request_id.clone(),
        recipients: recipients.len(),
    });
    recipients
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferResponse {
    pub request_id: RequestId,
    /// Serialized message as forwarded by each hop.
    pub envelope: Vec<u8>,
    pub responder: NodeId,
    pub ciphertext: Ciphertext,
    pub arrival_ts: Tick,
    pub hops: usize,
    /// Responder-side record of the link being moved; never sent.
    pub subject: CreditLink,
}

/// `j`'s response if it decides to answer: its full balance with the
/// subject lender, encrypted for the requestor and routed hop by hop.
/// The response is `None` when routing lost the message.
pub fn bt_respond(
    world: &mut World,
    bt: &BalanceTransferRequest,
    j: NodeId,
    router: &dyn ResponseRouter,
    policy: &ResponsePolicy,
) -> Option<(Option<TransferResponse>, Delivery)> {
    let subject = eligible_subject(&world.net, j, bt, policy)?;
    if world.behavior(j) == super::RelayBehavior::Silent {
        return None;
    }
    let rid = bt.response_id(j);
    let ciphertext = world.keys.encrypt_for(bt.requestor, subject.weight);
    let envelope = response_envelope(router, &rid, &ciphertext);
    let delivery = forward(world, router, j, &rid);
    let response = delivery.delivered.then(|| TransferResponse {
        request_id: rid,
        envelope,
        responder: j,
        ciphertext,
        arrival_ts: bt.issued_at + 1 + HOP_TICKS * delivery.hops() as Tick,
        hops: delivery.hops(),
        subject,
    });
    Some((response, delivery))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Accepted {
    pub responder: NodeId,
    pub amount: Amount,
    pub subject: CreditLink,
    pub request_id: RequestId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AcceptOutcome {
    pub accepted: Vec<Accepted>,
    pub rejected: Vec<NodeId>,
    pub discarded: Vec<NodeId>,
    pub remaining: Amount,
}

/// Evaluates responses after the deadline, in `(arrival_ts, responder)`
/// order. A response is taken iff it arrived strictly before `tp` and its
/// amount fits in what is left of the budget.
pub fn bt_accept(
    world: &mut World,
    bt: &BalanceTransferRequest,
    responses: &[TransferResponse],
    now: Tick,
) -> Result<AcceptOutcome, ProtocolError> {
    if now <= bt.tp {
        return Err(ProtocolError::DeadlineNotReached { now, tp: bt.tp });
    }
    let mut order: Vec<&TransferResponse> = responses.iter().collect();
    order.sort_by_key(|r| (r.arrival_ts, r.responder));
    let mut out = AcceptOutcome {
        remaining: bt.amt,
        ..Default::default()
    };
    for r in order {
        let amt = match world.keys.decrypt_as(bt.requestor, &r.ciphertext) {
            Ok(a) => a,
            Err(e) => {
                world.trace.push(TraceEvent::Discarded {
                    request_id: r.request_id.clone(),
                    node: r.responder,
                    reason: e.to_string(),
                });
                out.discarded.push(r.responder);
                continue;
            }
        };
        if r.arrival_ts < bt.tp && amt > 0 && amt <= out.remaining {
            out.remaining -= amt;
            out.accepted.push(Accepted {
                responder: r.responder,
                amount: amt,
                subject: r.subject,
                request_id: r.request_id.clone(),
            });
        } else {
            out.rejected.push(r.responder);
        }
    }
    Ok(out)
}

/// MultiSig with the requestor, settlement with the old lender, and the
/// single ledger write. Returns the ledger index.
pub fn complete_transfer(
    world: &mut World,
    bt: &BalanceTransferRequest,
    a: &Accepted,
) -> Result<u64, ProtocolError> {
    let j = a.responder;
    let src = a.subject.lender;
    match world.net.link(j, src) {
        Some(l) if l.weight == a.amount => {}
        _ => return Err(ProtocolError::StaleSubject(j)),
    }
    let old_rate = a.subject.interest;
    let contract = world.multisig(bt.requestor, a.amount, j, &a.request_id, bt.intr, false)?;
    let new_change = crate::model::LinkChange {
        borrower: j,
        lender: bt.requestor,
        before: 0,
        after: a.amount,
    };
    let ack = world.settle_old_link(j, src, &a.request_id)?;
    let old_change = crate::model::LinkChange {
        borrower: j,
        lender: src,
        before: a.amount,
        after: 0,
    };
    world.write_ledger(
        contract,
        Some(ack),
        vec![
            delta_of(&new_change, bt.intr),
            delta_of(&old_change, old_rate),
        ],
    )
}

#[derive(Debug, Default)]
pub struct BtOutcome {
    pub recipients: usize,
    pub responses: Vec<TransferResponse>,
    pub deliveries: Vec<Delivery>,
    pub accept: AcceptOutcome,
    pub completed: Vec<(NodeId, u64)>,
    pub failed: Vec<(NodeId, ProtocolError)>,
}

/// Whole request lifecycle: broadcast at `issued_at`, responses, acceptance
/// one tick after the deadline, then settlement of each accepted response.
pub fn run_balance_transfer(
    world: &mut World,
    bt: &BalanceTransferRequest,
    router: &dyn ResponseRouter,
    policy: &ResponsePolicy,
) -> Result<BtOutcome, ProtocolError> {
    bt.validate()?;
    world.now = bt.issued_at;
    let recipients = bt_broadcast(world, bt);
    let mut out = BtOutcome {
        recipients: recipients.len(),
        ..Default::default()
    };
    for j in recipients {
        if let Some((resp, delivery)) = bt_respond(world, bt, j, router, policy) {
            out.responses.extend(resp);
            out.deliveries.push(delivery);
        }
    }
    world.now = bt.tp + 1;
    out.accept = bt_accept(world, bt, &out.responses, world.now)?;
    for a in out.accept.accepted.clone() {
        match complete_transfer(world, bt, &a) {
            Ok(idx) => out.completed.push((a.responder, idx)),
            Err(e) => out.failed.push((a.responder, e)),
        }
    }
    Ok(out)
}
