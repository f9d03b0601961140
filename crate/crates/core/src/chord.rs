//! Chord identifier ring with finger tables, graceful join/leave, periodic
//! stabilization and repositioning.
//!
//! Identifiers live in `[0, 2^m)`. Finger `k` (1-based) of node `n` is the
//! successor of `n + 2^(k-1) mod 2^m`. Join and leave splice successor and
//! predecessor pointers immediately and hand keys over; every other node's
//! fingers are left stale until [`ChordRing::stabilize`] runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::crypto::{hash_parts, Digest};
use crate::model::NodeId;

pub const DEFAULT_RING_BITS: u32 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RingId(pub u64);

impl std::fmt::Display for RingId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChordError {
    #[error("ring is empty")]
    EmptyRing,
    #[error("node {0} already in the ring")]
    DuplicateJoin(NodeId),
    #[error("node {0} is not in the ring")]
    UnknownNode(NodeId),
    #[error("identifier width must be 1..=64 bits, got {0}")]
    InvalidBits(u32),
    #[error("lookup for {key} did not converge after {hops} hops")]
    LookupFailed { key: RingId, hops: usize },
}

/// First id equal to or clockwise after `k`.
pub fn successor(ring: &BTreeSet<RingId>, k: RingId) -> Result<RingId, ChordError> {
    ring.range(k..)
        .next()
        .or_else(|| ring.iter().next())
        .copied()
        .ok_or(ChordError::EmptyRing)
}

/// `x` in the half-open arc `(a, b]`. When `a == b` the arc is the whole ring.
fn in_half_open(x: u64, a: u64, b: u64) -> bool {
    if a < b {
        a < x && x <= b
    } else {
        x > a || x <= b
    }
}

/// `x` in the open arc `(a, b)`. When `a == b` this is every id except `a`.
fn in_open(x: u64, a: u64, b: u64) -> bool {
    if a < b {
        a < x && x < b
    } else {
        x > a || x < b
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FingerTable {
    pub owner: RingId,
    /// `entries[k-1]` is finger `k`.
    pub entries: Vec<RingId>,
    pub predecessor: RingId,
}

#[derive(Clone, Debug)]
struct ChordNode {
    node: NodeId,
    successor: u64,
    predecessor: u64,
    fingers: Vec<u64>,
    keys: BTreeSet<u64>,
}

/// Owner and forwarding path of a lookup. `path` excludes the start node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lookup {
    pub owner: NodeId,
    pub owner_id: RingId,
    pub path: Vec<NodeId>,
}

impl Lookup {
    pub fn hops(&self) -> usize {
        self.path.len()
    }
}

#[derive(Clone, Debug)]
pub struct ChordRing {
    bits: u32,
    nodes: BTreeMap<u64, ChordNode>,
    by_node: HashMap<NodeId, u64>,
    epochs: HashMap<NodeId, u32>,
}

impl ChordRing {
    pub fn new(bits: u32) -> Result<Self, ChordError> {
        if !(1..=64).contains(&bits) {
            return Err(ChordError::InvalidBits(bits));
        }
        Ok(Self {
            bits,
            nodes: BTreeMap::new(),
            by_node: HashMap::new(),
            epochs: HashMap::new(),
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    fn mask(&self) -> u64 {
        if self.bits == 64 {
            u64::MAX
        } else {
            (1u64 << self.bits) - 1
        }
    }

    fn offset(&self, id: u64, k: u32) -> u64 {
        id.wrapping_add(1u64 << (k - 1)) & self.mask()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.by_node.contains_key(&node)
    }

    pub fn ring_id(&self, node: NodeId) -> Option<RingId> {
        self.by_node.get(&node).map(|&r| RingId(r))
    }

    pub fn node_at(&self, id: RingId) -> Option<NodeId> {
        self.nodes.get(&id.0).map(|n| n.node)
    }

    pub fn ids(&self) -> BTreeSet<RingId> {
        self.nodes.keys().map(|&k| RingId(k)).collect()
    }

    pub fn members(&self) -> impl Iterator<Item = (RingId, NodeId)> + '_ {
        self.nodes.iter().map(|(&k, n)| (RingId(k), n.node))
    }

    /// Digest naming `node` in shared hash logs.
    pub fn node_digest(&self, node: NodeId) -> Option<Digest> {
        self.ring_id(node)
            .map(|r| hash_parts(&[b"chord/node", &r.0.to_be_bytes()]))
    }

    /// Ring id for `node` at a given reposition epoch.
    pub fn derive_id(&self, node: NodeId, epoch: u32) -> RingId {
        let mut salt = 0u32;
        loop {
            let d = hash_parts(&[
                b"chord/id",
                &node.0.to_be_bytes(),
                &epoch.to_be_bytes(),
                &salt.to_be_bytes(),
            ]);
            let id = d.truncate(self.bits);
            if !self.nodes.contains_key(&id) {
                return RingId(id);
            }
            salt += 1;
        }
    }

    pub fn successor_of(&self, node: NodeId) -> Option<NodeId> {
        let r = self.by_node.get(&node)?;
        self.nodes.get(&self.nodes[r].successor).map(|n| n.node)
    }

    pub fn predecessor_of(&self, node: NodeId) -> Option<NodeId> {
        let r = self.by_node.get(&node)?;
        self.nodes.get(&self.nodes[r].predecessor).map(|n| n.node)
    }

    pub fn finger_table(&self, node: NodeId) -> Option<FingerTable> {
        let r = *self.by_node.get(&node)?;
        let n = &self.nodes[&r];
        Some(FingerTable {
            owner: RingId(r),
            entries: n.fingers.iter().map(|&f| RingId(f)).collect(),
            predecessor: RingId(n.predecessor),
        })
    }

    /// Fingers of `node` that are still live, in finger order.
    pub fn live_fingers(&self, node: NodeId) -> Vec<NodeId> {
        let Some(r) = self.by_node.get(&node) else {
            return Vec::new();
        };
        self.nodes[r]
            .fingers
            .iter()
            .filter_map(|f| self.nodes.get(f).map(|n| n.node))
            .collect()
    }

    /// Is `key` owned by the node at ring position `at`, judged from its own
    /// predecessor pointer?
    fn owns(&self, at: u64, key: u64) -> bool {
        let n = &self.nodes[&at];
        key == at || in_half_open(key, n.predecessor, at)
    }

    /// Does `node` own `key` according to its local state?
    pub fn owns_key(&self, node: NodeId, key: RingId) -> bool {
        self.by_node
            .get(&node)
            .map(|&r| self.owns(r, key.0))
            .unwrap_or(false)
    }

    /// Forwarding candidates at `node` for `key`, best first: the successor
    /// alone when it owns the key, otherwise live fingers in `(node, key)`
    /// from closest-preceding outward, then the successor as fallback.
    pub fn forward_candidates(&self, node: NodeId, key: RingId) -> Vec<NodeId> {
        let Some(&at) = self.by_node.get(&node) else {
            return Vec::new();
        };
        let n = &self.nodes[&at];
        if in_half_open(key.0, at, n.successor) {
            return self
                .nodes
                .get(&n.successor)
                .map(|s| vec![s.node])
                .unwrap_or_default();
        }
        let mut out: Vec<NodeId> = Vec::new();
        for f in n.fingers.iter().rev() {
            if in_open(*f, at, key.0) {
                if let Some(fnode) = self.nodes.get(f) {
                    if !out.contains(&fnode.node) {
                        out.push(fnode.node);
                    }
                }
            }
        }
        if let Some(s) = self.nodes.get(&n.successor) {
            if !out.contains(&s.node) {
                out.push(s.node);
            }
        }
        out
    }

    fn lookup_from(&self, start: u64, key: u64) -> Result<(u64, Vec<u64>), ChordError> {
        let mut cur = start;
        let mut path = Vec::new();
        let guard = self.nodes.len() + self.bits as usize + 1;
        loop {
            if self.owns(cur, key) {
                return Ok((cur, path));
            }
            let n = &self.nodes[&cur];
            let next =
                if in_half_open(key, cur, n.successor) && self.nodes.contains_key(&n.successor) {
                    n.successor
                } else {
                    n.fingers
                        .iter()
                        .rev()
                        .find(|&&f| in_open(f, cur, key) && self.nodes.contains_key(&f))
                        .copied()
                        .unwrap_or(n.successor)
                };
            path.push(next);
            if path.len() > guard || !self.nodes.contains_key(&next) {
                return Err(ChordError::LookupFailed {
                    key: RingId(key),
                    hops: path.len(),
                });
            }
            cur = next;
        }
    }

    /// Resolves `key` starting at `start` using finger tables only.
    pub fn lookup(&self, start: NodeId, key: RingId) -> Result<Lookup, ChordError> {
        let &s = self
            .by_node
            .get(&start)
            .ok_or(ChordError::UnknownNode(start))?;
        let (owner, path) = self.lookup_from(s, key.0 & self.mask())?;
        Ok(Lookup {
            owner: self.nodes[&owner].node,
            owner_id: RingId(owner),
            path: path.iter().map(|p| self.nodes[p].node).collect(),
        })
    }

    /// Brute-force owner of `key` by scanning the id set.
    pub fn oracle_owner(&self, key: RingId) -> Result<NodeId, ChordError> {
        let id = self
            .nodes
            .range(key.0..)
            .next()
            .or_else(|| self.nodes.iter().next())
            .map(|(_, n)| n.node)
            .ok_or(ChordError::EmptyRing)?;
        Ok(id)
    }

    pub fn join(&mut self, node: NodeId) -> Result<RingId, ChordError> {
        if self.by_node.contains_key(&node) {
            return Err(ChordError::DuplicateJoin(node));
        }
        let epoch = *self.epochs.entry(node).or_insert(0);
        let id = self.derive_id(node, epoch);
        self.join_at(node, id)?;
        Ok(id)
    }

    fn join_at(&mut self, node: NodeId, id: RingId) -> Result<(), ChordError> {
        let id = id.0;
        let bits = self.bits as usize;
        if self.nodes.is_empty() {
            self.nodes.insert(
                id,
                ChordNode {
                    node,
                    successor: id,
                    predecessor: id,
                    fingers: vec![id; bits],
                    keys: BTreeSet::new(),
                },
            );
            self.by_node.insert(node, id);
            return Ok(());
        }
        let bootstrap = *self.nodes.keys().next().expect("non-empty");
        let (succ, _) = self.lookup_from(bootstrap, id)?;
        let pred = self.nodes[&succ].predecessor;
        let moved: BTreeSet<u64> = self.nodes[&succ]
            .keys
            .iter()
            .copied()
            .filter(|&k| in_half_open(k, pred, id))
            .collect();
        {
            let s = self.nodes.get_mut(&succ).expect("succ");
            s.predecessor = id;
            s.keys.retain(|k| !moved.contains(k));
        }
        self.nodes.get_mut(&pred).expect("pred").successor = id;
        self.nodes.insert(
            id,
            ChordNode {
                node,
                successor: succ,
                predecessor: pred,
                fingers: vec![succ; bits],
                keys: moved,
            },
        );
        self.by_node.insert(node, id);
        // initialize own fingers through the (possibly stale) ring
        for k in 1..=self.bits {
            let target = self.offset(id, k);
            if let Ok((f, _)) = self.lookup_from(succ, target) {
                self.nodes.get_mut(&id).expect("self").fingers[k as usize - 1] = f;
            }
        }
        Ok(())
    }

    /// Graceful departure: neighbors are spliced and keys move to the
    /// successor.
    pub fn leave(&mut self, node: NodeId) -> Result<RingId, ChordError> {
        let id = self
            .by_node
            .remove(&node)
            .ok_or(ChordError::UnknownNode(node))?;
        let gone = self.nodes.remove(&id).expect("indexed");
        if self.nodes.is_empty() {
            return Ok(RingId(id));
        }
        let (succ, pred) = if gone.successor == id {
            unreachable!("multi-node ring has a distinct successor")
        } else {
            (gone.successor, gone.predecessor)
        };
        {
            let s = self.nodes.get_mut(&succ).expect("succ");
            s.predecessor = pred;
            s.keys.extend(gone.keys);
        }
        self.nodes.get_mut(&pred).expect("pred").successor = succ;
        Ok(RingId(id))
    }

    /// Moves `node` to a freshly derived id: leave with key handover, join at
    /// the new position, then stabilize to quiescence.
    pub fn reposition(&mut self, node: NodeId) -> Result<(RingId, usize), ChordError> {
        if !self.by_node.contains_key(&node) {
            return Err(ChordError::UnknownNode(node));
        }
        self.leave(node)?;
        let epoch = {
            let e = self.epochs.entry(node).or_insert(0);
            *e += 1;
            *e
        };
        let id = self.derive_id(node, epoch);
        self.join_at(node, id)?;
        let (corrections, _) = self.stabilize_until_quiescent(64);
        Ok((id, corrections))
    }

    /// One round of the stabilization protocol over every node: successor
    /// check and notify, then a refresh of every finger. Returns the number
    /// of pointer or finger entries that changed.
    pub fn stabilize(&mut self) -> usize {
        let mut corrections = 0;
        let ids: Vec<u64> = self.nodes.keys().copied().collect();
        for &n in &ids {
            let succ = self.nodes[&n].successor;
            if let Some(x) = self.nodes.get(&succ).map(|s| s.predecessor) {
                if x != n && in_open(x, n, succ) && self.nodes.contains_key(&x) {
                    self.nodes.get_mut(&n).expect("n").successor = x;
                    corrections += 1;
                }
            }
            let succ = self.nodes[&n].successor;
            let sp = self.nodes[&succ].predecessor;
            if sp != n && (!self.nodes.contains_key(&sp) || in_open(n, sp, succ)) {
                self.nodes.get_mut(&succ).expect("succ").predecessor = n;
                corrections += 1;
            }
        }
        for &n in &ids {
            for k in 1..=self.bits {
                let target = self.offset(n, k);
                let succ = self.nodes[&n].successor;
                let found = if in_half_open(target, n, succ) {
                    Some(succ)
                } else {
                    self.lookup_from(n, target).ok().map(|(o, _)| o)
                };
                if let Some(f) = found {
                    let slot = &mut self.nodes.get_mut(&n).expect("n").fingers[k as usize - 1];
                    if *slot != f {
                        *slot = f;
                        corrections += 1;
                    }
                }
            }
        }
        corrections
    }

    /// Runs rounds until one makes no correction. Returns total corrections
    /// and the number of rounds, including the final quiet one.
    pub fn stabilize_until_quiescent(&mut self, max_rounds: usize) -> (usize, usize) {
        let mut total = 0;
        for round in 1..=max_rounds {
            let c = self.stabilize();
            total += c;
            if c == 0 {
                return (total, round);
            }
        }
        (total, max_rounds)
    }

    /// Entries disagreeing with the brute-force oracle (successors,
    /// predecessors and fingers).
    pub fn oracle_mismatches(&self) -> usize {
        let ids = self.ids();
        let mut bad = 0;
        for (&n, st) in &self.nodes {
            let succ = successor(&ids, RingId((n + 1) & self.mask()))
                .expect("non-empty")
                .0;
            if st.successor != succ {
                bad += 1;
            }
            let pred = ids
                .range(..RingId(n))
                .next_back()
                .or_else(|| ids.iter().next_back())
                .expect("non-empty")
                .0;
            if st.predecessor != pred {
                bad += 1;
            }
            for k in 1..=self.bits {
                let want = successor(&ids, RingId(self.offset(n, k)))
                    .expect("non-empty")
                    .0;
                if st.fingers[k as usize - 1] != want {
                    bad += 1;
                }
            }
        }
        bad
    }

    /// Successor pointers form one cycle over every live node.
    pub fn ring_is_intact(&self) -> bool {
        let Some((&start, _)) = self.nodes.iter().next() else {
            return true;
        };
        let mut cur = start;
        for _ in 0..self.nodes.len() {
            match self.nodes.get(&cur) {
                Some(n) => cur = n.successor,
                None => return false,
            }
        }
        if cur != start {
            return false;
        }
        let mut seen = BTreeSet::new();
        let mut cur = start;
        loop {
            if !seen.insert(cur) {
                break;
            }
            cur = self.nodes[&cur].successor;
        }
        seen.len() == self.nodes.len()
    }

    /// Stores `key` at the node a lookup from `via` resolves it to.
    pub fn store_key(&mut self, via: NodeId, key: RingId) -> Result<NodeId, ChordError> {
        let look = self.lookup(via, key)?;
        let k = key.0 & self.mask();
        self.nodes
            .get_mut(&look.owner_id.0)
            .expect("owner")
            .keys
            .insert(k);
        Ok(look.owner)
    }

    pub fn keys_of(&self, node: NodeId) -> Vec<RingId> {
        self.by_node
            .get(&node)
            .map(|r| self.nodes[r].keys.iter().map(|&k| RingId(k)).collect())
            .unwrap_or_default()
    }

    /// Line dump: `node <node> <ringId> <successor> <predecessor>` per
    /// member, each followed by `finger <ringId> <k> <entry>` lines.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (&id, n) in &self.nodes {
            let _ = writeln!(
                out,
                "node {} {} {} {}",
                n.node, id, n.successor, n.predecessor
            );
            for (k, f) in n.fingers.iter().enumerate() {
                let _ = writeln!(out, "finger {} {} {}", id, k + 1, f);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[u64]) -> BTreeSet<RingId> {
        ids.iter().map(|&i| RingId(i)).collect()
    }

    /// Clockwise scan, independent of the BTreeSet range query.
    fn scan(ids: &[u64], k: u64, bits: u32) -> u64 {
        let size = 1u64 << bits;
        (0..size)
            .map(|d| (k + d) % size)
            .find(|c| ids.contains(c))
            .unwrap()
    }

    #[test]
    fn successor_small_ring() {
        let ring = [0, 1, 3];
        for (k, want) in [(1, 1), (2, 3), (6, 0)] {
            assert_eq!(scan(&ring, k, 3), want);
            assert_eq!(successor(&set(&ring), RingId(k)), Ok(RingId(want)));
        }
        assert_eq!(
            successor(&BTreeSet::new(), RingId(0)),
            Err(ChordError::EmptyRing)
        );
    }

    fn ring_with_ids(bits: u32, ids: &[u64]) -> ChordRing {
        let mut ring = ChordRing::new(bits).unwrap();
        for (i, &id) in ids.iter().enumerate() {
            ring.join_at(NodeId(i as u32), RingId(id)).unwrap();
        }
        ring.stabilize_until_quiescent(16);
        ring
    }

    #[test]
    fn lookup_small_ring() {
        let ring = ring_with_ids(3, &[0, 1, 3]);
        assert_eq!(ring.oracle_mismatches(), 0);
        let look = ring.lookup(NodeId(0), RingId(2)).unwrap();
        assert_eq!(look.owner, NodeId(2));
        assert_eq!(look.owner_id, RingId(3));
        let own = ring.lookup(NodeId(0), RingId(0)).unwrap();
        assert_eq!(own.hops(), 0);
        // key 7 wraps to node id 0, owned by the start itself
        assert_eq!(ring.lookup(NodeId(0), RingId(7)).unwrap().hops(), 0);
    }

    #[test]
    fn join_into_single_node_ring() {
        let mut ring = ChordRing::new(6).unwrap();
        ring.join(NodeId(1)).unwrap();
        ring.join(NodeId(2)).unwrap();
        assert_eq!(ring.successor_of(NodeId(1)), Some(NodeId(2)));
        assert_eq!(ring.successor_of(NodeId(2)), Some(NodeId(1)));
        assert_eq!(
            ring.join(NodeId(2)),
            Err(ChordError::DuplicateJoin(NodeId(2)))
        );
        assert_eq!(
            ring.leave(NodeId(9)),
            Err(ChordError::UnknownNode(NodeId(9)))
        );
    }

    #[test]
    fn leave_hands_keys_to_successor() {
        let mut ring = ChordRing::new(6).unwrap();
        for i in 0..8 {
            ring.join(NodeId(i)).unwrap();
        }
        ring.stabilize_until_quiescent(16);
        for k in 0..64 {
            ring.store_key(NodeId(0), RingId(k)).unwrap();
        }
        let victim = NodeId(3);
        let old_succ = ring.successor_of(victim).unwrap();
        let held = ring.keys_of(victim);
        ring.leave(victim).unwrap();
        for k in held {
            assert_eq!(ring.oracle_owner(k).unwrap(), old_succ);
            assert!(ring.keys_of(old_succ).contains(&k));
        }
    }

    #[test]
    fn join_then_leave_restores_ring() {
        let mut ring = ChordRing::new(6).unwrap();
        for i in 0..6 {
            ring.join(NodeId(i)).unwrap();
        }
        ring.stabilize_until_quiescent(16);
        let before = ring.dump();
        ring.join(NodeId(40)).unwrap();
        ring.leave(NodeId(40)).unwrap();
        ring.stabilize_until_quiescent(16);
        assert_eq!(ring.dump(), before);
    }

    #[test]
    fn quiescent_ring_needs_no_corrections() {
        let mut ring = ChordRing::new(8).unwrap();
        for i in 0..20 {
            ring.join(NodeId(i)).unwrap();
        }
        ring.stabilize_until_quiescent(32);
        assert_eq!(ring.stabilize(), 0);
        assert_eq!(ring.oracle_mismatches(), 0);
        assert!(ring.ring_is_intact());
    }

    #[test]
    fn reposition_two_node_ring() {
        let mut ring = ChordRing::new(6).unwrap();
        ring.join(NodeId(0)).unwrap();
        ring.join(NodeId(1)).unwrap();
        let old = ring.ring_id(NodeId(1)).unwrap();
        let (new, _) = ring.reposition(NodeId(1)).unwrap();
        assert_ne!(old, new);
        assert!(ring.ring_is_intact());
        for k in 0..64 {
            let want = ring.oracle_owner(RingId(k)).unwrap();
            assert_eq!(ring.lookup(NodeId(0), RingId(k)).unwrap().owner, want);
            assert_eq!(ring.lookup(NodeId(1), RingId(k)).unwrap().owner, want);
        }
    }

    #[test]
    fn reposition_keeps_every_key_reachable() {
        let mut ring = ChordRing::new(6).unwrap();
        for i in 0..10 {
            ring.join(NodeId(i)).unwrap();
        }
        ring.stabilize_until_quiescent(16);
        for k in 0..64 {
            ring.store_key(NodeId(0), RingId(k)).unwrap();
        }
        let mover = NodeId(4);
        let old_id = ring.ring_id(mover).unwrap();
        let old_succ = ring.successor_of(mover).unwrap();
        ring.reposition(mover).unwrap();
        assert_eq!(ring.oracle_mismatches(), 0);
        for k in 0..64 {
            let owner = ring.lookup(NodeId(0), RingId(k)).unwrap().owner;
            assert_eq!(owner, ring.oracle_owner(RingId(k)).unwrap());
            assert!(ring.keys_of(owner).contains(&RingId(k)));
        }
        // unless the new id landed between them, the old id now resolves
        // to the former successor
        let owner_of_old = ring.oracle_owner(old_id).unwrap();
        assert!(owner_of_old == old_succ || owner_of_old == mover);
    }

    #[test]
    fn dump_lists_fingers() {
        let mut ring = ChordRing::new(3).unwrap();
        ring.join(NodeId(0)).unwrap();
        let d = ring.dump();
        assert_eq!(d.lines().filter(|l| l.starts_with("finger")).count(), 3);
        assert_eq!(d.lines().filter(|l| l.starts_with("node")).count(), 1);
    }
}
