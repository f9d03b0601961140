//! Hop-by-hop forwarding of transfer responses with shared-log writes.

use std::collections::BTreeSet;

use super::{MessageKind, World};
use crate::chord::{ChordRing, RingId};
use crate::crypto::{hash_parts, Ciphertext, Digest};
use crate::model::{audit_path, AuditVerdict, CreditNetwork, NodeId, RequestId};
use crate::prefix::{HashedPrefixId, PrefixEmbedding};
use crate::wire::Writer;

/// How a node treats responses passing through it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RelayBehavior {
    Honest,
    /// Logs the next hop, then discards the message.
    DropAfterLog,
    /// Neither logs nor forwards. Senders see the missing write and re-route.
    Silent,
    /// Logs a digest that names no real next hop, then discards the message.
    Misdirect,
}

pub trait ResponseRouter {
    fn node_digest(&self, n: NodeId) -> Option<Digest>;
    fn is_destination(&self, at: NodeId) -> bool;
    /// Next-hop choices at `at`, best first.
    fn candidates(&self, net: &CreditNetwork, at: NodeId) -> Vec<NodeId>;
    /// Destination address as carried on the wire.
    fn address_bytes(&self) -> Vec<u8>;
}

/// Bytes each hop forwards: request id, destination address, ciphertext.
pub fn response_envelope(
    router: &dyn ResponseRouter,
    request_id: &RequestId,
    ciphertext: &Ciphertext,
) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(request_id.as_str())
        .bytes(&router.address_bytes())
        .bytes(&ciphertext.0);
    w.finish()
}

/// Greedy routing toward a hashed prefix address. The tree next hop comes
/// first; when `alternates` is set, graph neighbors that also get strictly
/// closer follow as fallbacks.
pub struct PrefixRouter<'a> {
    pub embedding: &'a PrefixEmbedding,
    pub target: HashedPrefixId,
    pub alternates: bool,
}

impl ResponseRouter for PrefixRouter<'_> {
    fn node_digest(&self, n: NodeId) -> Option<Digest> {
        self.embedding.node_digest(n)
    }

    fn is_destination(&self, at: NodeId) -> bool {
        self.embedding.is_target(at, &self.target)
    }

    fn candidates(&self, net: &CreditNetwork, at: NodeId) -> Vec<NodeId> {
        let emb = self.embedding;
        let Some(first) = emb.next_hop(at, &self.target) else {
            return Vec::new();
        };
        let mut out = vec![first];
        if self.alternates {
            let here = emb.score(at, &self.target);
            let mut alt: Vec<(i64, NodeId)> = net
                .neighbors(at)
                .filter(|&w| w != first && emb.id(w).is_some())
                .map(|w| (emb.score(w, &self.target), w))
                .filter(|&(s, _)| s < here)
                .collect();
            alt.sort();
            out.extend(alt.into_iter().map(|(_, w)| w));
        }
        out
    }

    fn address_bytes(&self) -> Vec<u8> {
        self.target.to_bytes()
    }
}

/// Finger-table routing toward the owner of `key`.
pub struct ChordRouter<'a> {
    pub ring: &'a ChordRing,
    pub key: RingId,
}

impl ResponseRouter for ChordRouter<'_> {
    fn node_digest(&self, n: NodeId) -> Option<Digest> {
        self.ring.node_digest(n)
    }

    fn is_destination(&self, at: NodeId) -> bool {
        self.ring.owns_key(at, self.key)
    }

    fn candidates(&self, _net: &CreditNetwork, at: NodeId) -> Vec<NodeId> {
        self.ring.forward_candidates(at, self.key)
    }

    fn address_bytes(&self) -> Vec<u8> {
        self.key.0.to_be_bytes().to_vec()
    }
}

/// Result of forwarding one response. `path` starts at the responder and
/// ends where the message stopped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub request_id: RequestId,
    pub path: Vec<NodeId>,
    pub delivered: bool,
    pub lost_at: Option<NodeId>,
    pub messages: u64,
    pub reroutes: u64,
}

impl Delivery {
    pub fn hops(&self) -> usize {
        self.path.len().saturating_sub(1)
    }

    /// The route an arbiter reconstructs: the realized path, extended from
    /// the stopping point by the honest first choice at each hop.
    pub fn claimed_path(&self, router: &dyn ResponseRouter, net: &CreditNetwork) -> Vec<NodeId> {
        let mut path = self.path.clone();
        if self.delivered {
            return path;
        }
        let mut seen: BTreeSet<NodeId> = path.iter().copied().collect();
        let mut cur = *path.last().expect("non-empty path");
        while !router.is_destination(cur) {
            let Some(&next) = router
                .candidates(net, cur)
                .iter()
                .find(|c| !seen.contains(c))
            else {
                break;
            };
            path.push(next);
            seen.insert(next);
            cur = next;
        }
        path
    }

    pub fn audit(&self, world: &World, router: &dyn ResponseRouter) -> AuditVerdict {
        let claimed = self.claimed_path(router, &world.net);
        audit_path(
            &world.logs.for_request(&self.request_id),
            &claimed,
            &world.keys,
            |n| router.node_digest(n),
        )
    }
}

/// Carries a response from `src` toward the router's destination. Every
/// sender logs the next hop it hands the message to; the destination logs a
/// receipt naming itself.
pub fn forward(
    world: &mut World,
    router: &dyn ResponseRouter,
    src: NodeId,
    request_id: &RequestId,
) -> Delivery {
    let mut d = Delivery {
        request_id: request_id.clone(),
        path: vec![src],
        delivered: false,
        lost_at: None,
        messages: 0,
        reroutes: 0,
    };
    let mut visited = BTreeSet::from([src]);
    let mut cur = src;
    loop {
        if router.is_destination(cur) {
            match (world.behavior(cur), router.node_digest(cur)) {
                (RelayBehavior::Honest, Some(me)) => {
                    world.logs.write(&mut world.keys, cur, request_id, me);
                    d.delivered = true;
                }
                _ => d.lost_at = Some(cur),
            }
            return d;
        }
        let candidates: Vec<NodeId> = router
            .candidates(&world.net, cur)
            .into_iter()
            .filter(|c| !visited.contains(c))
            .collect();
        match world.behavior(cur) {
            RelayBehavior::Honest => {}
            RelayBehavior::Silent => {
                d.lost_at = Some(cur);
                return d;
            }
            RelayBehavior::DropAfterLog => {
                if let Some(digest) = candidates.first().and_then(|&c| router.node_digest(c)) {
                    world.logs.write(&mut world.keys, cur, request_id, digest);
                }
                d.lost_at = Some(cur);
                return d;
            }
            RelayBehavior::Misdirect => {
                let forged = hash_parts(&[
                    b"misdirect",
                    request_id.as_str().as_bytes(),
                    &cur.0.to_be_bytes(),
                ]);
                world.logs.write(&mut world.keys, cur, request_id, forged);
                d.messages += 1;
                world.messages += 1;
                d.lost_at = Some(cur);
                return d;
            }
        }
        let mut moved = None;
        for c in candidates {
            let Some(digest) = router.node_digest(c) else {
                continue;
            };
            world.logs.write(&mut world.keys, cur, request_id, digest);
            world.send(MessageKind::ResponseHop, cur, c);
            d.messages += 1;
            // the sender reads the receiver's log; no write means re-route
            if world.behavior(c) == RelayBehavior::Silent {
                d.reroutes += 1;
                continue;
            }
            moved = Some(c);
            break;
        }
        match moved {
            Some(c) => {
                visited.insert(c);
                d.path.push(c);
                cur = c;
            }
            None => {
                d.lost_at = Some(cur);
                return d;
            }
        }
    }
}
