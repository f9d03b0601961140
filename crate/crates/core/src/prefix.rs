//! Greedy routing over a prefix embedding of a BFS spanning tree.
//!
//! The root has the empty coordinate vector and the `i`-th child (1-based,
//! ascending node id) of a node extends its parent's vector by `i`. Hop
//! distance on the tree is then `|a| + |b| - 2 cpl(a, b)`.
//!
//! Routed messages never carry plaintext coordinates. A target is addressed
//! by a [`HashedPrefixId`]: one chained digest per coordinate level, padded
//! with random digests to a fixed depth. A node compares its own level
//! digests against the target's to get the common prefix length, which is
//! all greedy forwarding needs.

use std::collections::{BTreeMap, VecDeque};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::crypto::{hash_parts, Digest};
use crate::model::{CreditNetwork, NodeId};
use crate::wire::Writer;

/// Extra hashed levels beyond the deepest real coordinate.
pub const DEFAULT_PAD_SLACK: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RoutingError {
    #[error("root {0} is not in the network")]
    UnknownRoot(NodeId),
    #[error("node {0} is unreachable from the root")]
    Unreachable(NodeId),
    #[error("node {0} is not part of the embedding")]
    NotEmbedded(NodeId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanningTree {
    root: NodeId,
    parent: BTreeMap<NodeId, NodeId>,
    children: BTreeMap<NodeId, Vec<NodeId>>,
    depth: BTreeMap<NodeId, usize>,
}

impl SpanningTree {
    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.depth.contains_key(&n)
    }

    pub fn parent(&self, n: NodeId) -> Option<NodeId> {
        self.parent.get(&n).copied()
    }

    pub fn children(&self, n: NodeId) -> &[NodeId] {
        self.children.get(&n).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn depth(&self, n: NodeId) -> Option<usize> {
        self.depth.get(&n).copied()
    }

    pub fn max_depth(&self) -> usize {
        self.depth.values().copied().max().unwrap_or(0)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.depth.keys().copied()
    }

    /// Parent (if any) followed by children.
    pub fn neighbors(&self, n: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.parent(n)
            .into_iter()
            .chain(self.children(n).iter().copied())
    }
}

/// BFS tree over the undirected skeleton of `net`, visiting neighbors in
/// ascending id order so child lists come out sorted.
pub fn build_spanning_tree(
    net: &CreditNetwork,
    root: NodeId,
) -> Result<SpanningTree, RoutingError> {
    if !net.contains(root) {
        return Err(RoutingError::UnknownRoot(root));
    }
    let mut tree = SpanningTree {
        root,
        parent: BTreeMap::new(),
        children: BTreeMap::new(),
        depth: BTreeMap::from([(root, 0)]),
    };
    let mut queue = VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        let d = tree.depth[&v];
        for w in net.neighbors(v) {
            if tree.depth.contains_key(&w) {
                continue;
            }
            tree.depth.insert(w, d + 1);
            tree.parent.insert(w, v);
            tree.children.entry(v).or_default().push(w);
            queue.push_back(w);
        }
    }
    if let Some(missing) = net.nodes().find(|n| !tree.depth.contains_key(n)) {
        return Err(RoutingError::Unreachable(missing));
    }
    Ok(tree)
}

/// Plaintext tree coordinates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PrefixId(pub Vec<u32>);

impl PrefixId {
    pub fn root() -> Self {
        PrefixId(Vec::new())
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn child(&self, index: u32) -> Self {
        let mut c = self.0.clone();
        c.push(index);
        PrefixId(c)
    }

    pub fn coords(&self) -> &[u32] {
        &self.0
    }
}

pub fn assign_prefix_ids(tree: &SpanningTree) -> BTreeMap<NodeId, PrefixId> {
    let mut ids = BTreeMap::from([(tree.root, PrefixId::root())]);
    let mut queue = VecDeque::from([tree.root]);
    while let Some(v) = queue.pop_front() {
        let base = ids[&v].clone();
        for (i, &c) in tree.children(v).iter().enumerate() {
            ids.insert(c, base.child(i as u32 + 1));
            queue.push_back(c);
        }
    }
    ids
}

/// Common prefix length.
pub fn cpl(a: &PrefixId, b: &PrefixId) -> usize {
    a.0.iter().zip(&b.0).take_while(|(x, y)| x == y).count()
}

/// Hop count between two nodes of the same embedding.
pub fn tree_distance(a: &PrefixId, b: &PrefixId) -> usize {
    a.depth() + b.depth() - 2 * cpl(a, b)
}

/// Per-level digests of a node's coordinates, padded with random digests.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashedPrefixId {
    levels: Vec<Digest>,
}

impl HashedPrefixId {
    pub fn levels(&self) -> &[Digest] {
        &self.levels
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.levels.len() as u32);
        for l in &self.levels {
            w.bytes(l.as_bytes());
        }
        w.finish()
    }
}

/// A route found by greedy forwarding. `hops` excludes the source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Route {
    pub hops: Vec<NodeId>,
    /// Hop count predicted from coordinates before routing.
    pub predicted_len: usize,
}

/// Spanning tree plus coordinates and cached level digests.
#[derive(Clone, Debug)]
pub struct PrefixEmbedding {
    tree: SpanningTree,
    ids: BTreeMap<NodeId, PrefixId>,
    levels: BTreeMap<NodeId, Vec<Digest>>,
    base: Digest,
    pad_depth: usize,
}

impl PrefixEmbedding {
    pub fn build(net: &CreditNetwork, root: NodeId, salt: u64) -> Result<Self, RoutingError> {
        let tree = build_spanning_tree(net, root)?;
        Ok(Self::from_tree(tree, salt, DEFAULT_PAD_SLACK))
    }

    pub fn from_tree(tree: SpanningTree, salt: u64, pad_slack: usize) -> Self {
        let ids = assign_prefix_ids(&tree);
        let base = hash_parts(&[b"prefix/root", &salt.to_be_bytes()]);
        let mut levels: BTreeMap<NodeId, Vec<Digest>> = BTreeMap::from([(tree.root, Vec::new())]);
        let mut queue = VecDeque::from([tree.root]);
        while let Some(v) = queue.pop_front() {
            let parent_levels = levels[&v].clone();
            let prev = parent_levels.last().copied().unwrap_or(base);
            for (i, &c) in tree.children(v).iter().enumerate() {
                let idx = (i as u32 + 1).to_be_bytes();
                let mut mine = parent_levels.clone();
                mine.push(hash_parts(&[b"prefix/level", prev.as_bytes(), &idx]));
                levels.insert(c, mine);
                queue.push_back(c);
            }
        }
        let pad_depth = tree.max_depth() + pad_slack;
        Self {
            tree,
            ids,
            levels,
            base,
            pad_depth,
        }
    }

    pub fn tree(&self) -> &SpanningTree {
        &self.tree
    }

    pub fn id(&self, n: NodeId) -> Option<&PrefixId> {
        self.ids.get(&n)
    }

    pub fn ids(&self) -> &BTreeMap<NodeId, PrefixId> {
        &self.ids
    }

    pub fn pad_depth(&self) -> usize {
        self.pad_depth
    }

    /// Digest naming `n` in shared hash logs: its deepest level digest.
    pub fn node_digest(&self, n: NodeId) -> Option<Digest> {
        self.levels
            .get(&n)
            .map(|l| l.last().copied().unwrap_or(self.base))
    }

    pub fn distance(&self, a: NodeId, b: NodeId) -> Result<usize, RoutingError> {
        let ia = self.ids.get(&a).ok_or(RoutingError::NotEmbedded(a))?;
        let ib = self.ids.get(&b).ok_or(RoutingError::NotEmbedded(b))?;
        Ok(tree_distance(ia, ib))
    }

    /// Hashed address of `n`, padded with fresh random digests.
    pub fn hashed_id<R: RngCore>(
        &self,
        n: NodeId,
        rng: &mut R,
    ) -> Result<HashedPrefixId, RoutingError> {
        let mut levels = self
            .levels
            .get(&n)
            .ok_or(RoutingError::NotEmbedded(n))?
            .clone();
        while levels.len() < self.pad_depth {
            let mut pad = [0u8; 32];
            rng.fill_bytes(&mut pad);
            levels.push(Digest(pad));
        }
        Ok(HashedPrefixId { levels })
    }

    /// Convenience for callers without their own randomness.
    pub fn hashed_id_seeded(&self, n: NodeId, seed: u64) -> Result<HashedPrefixId, RoutingError> {
        self.hashed_id(n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Common prefix length between `n`'s coordinates and a hashed target.
    pub fn hashed_cpl(&self, n: NodeId, target: &HashedPrefixId) -> usize {
        match self.levels.get(&n) {
            Some(mine) => mine
                .iter()
                .zip(&target.levels)
                .take_while(|(a, b)| a == b)
                .count(),
            None => 0,
        }
    }

    /// `tree_distance(n, target) - |target|`. The target's depth is hidden by
    /// padding but is the same for every candidate, so ranking by this score
    /// ranks by true distance.
    pub fn score(&self, n: NodeId, target: &HashedPrefixId) -> i64 {
        let depth = self.levels.get(&n).map(Vec::len).unwrap_or(0) as i64;
        depth - 2 * self.hashed_cpl(n, target) as i64
    }

    /// Tree neighbor of `current` closest to the target, ties to the smaller
    /// id. `None` when `current` is the target.
    pub fn next_hop(&self, current: NodeId, target: &HashedPrefixId) -> Option<NodeId> {
        let here = self.score(current, target);
        self.tree
            .neighbors(current)
            .map(|w| (self.score(w, target), w))
            .filter(|&(s, _)| s < here)
            .min()
            .map(|(_, w)| w)
    }

    pub fn is_target(&self, n: NodeId, target: &HashedPrefixId) -> bool {
        self.tree.contains(n) && self.next_hop(n, target).is_none()
    }

    /// Greedy route from `src` to the node addressed by `target`.
    /// `dst` is only used to report the predicted length.
    pub fn find_route(
        &self,
        src: NodeId,
        dst: NodeId,
        target: &HashedPrefixId,
    ) -> Result<Route, RoutingError> {
        let predicted_len = self.distance(src, dst)?;
        let mut hops = Vec::with_capacity(predicted_len);
        let mut cur = src;
        // greedy progress bounds the walk by 2 * depth
        let limit = 2 * self.tree.max_depth() + 1;
        while let Some(next) = self.next_hop(cur, target) {
            hops.push(next);
            cur = next;
            if hops.len() > limit {
                break;
            }
        }
        Ok(Route {
            hops,
            predicted_len,
        })
    }
}
