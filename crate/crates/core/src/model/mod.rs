//! The credit graph: directed lender/borrower links plus the per-node local
//! tables that mirror them.
//!
//! An edge `borrower -> lender` of weight `w` means the lender has extended
//! `w` units of credit to the borrower. Every mutation goes through
//! [`CreditNetwork`], which keeps the graph and both endpoints' tables in
//! lock-step.

mod gen;
mod hashlog;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gen::{generate_network, NetworkConfig};
pub use hashlog::{
    audit_path, log_message, AuditVerdict, LogError, LogReader, SharedHashLogEntry, SharedLogs,
};

/// Credit units.
pub type Amount = u64;

/// Simulated time.
pub type Tick = u64;

#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Opaque correlation id for one protocol exchange.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(String);

impl RequestId {
    pub fn new(s: impl Into<String>) -> Self {
        RequestId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Derived id for a sub-exchange, e.g. one responder within a request.
    pub fn child(&self, part: impl fmt::Display) -> Self {
        RequestId(format!("{}/{}", self.0, part))
    }
}

impl fmt::Debug for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Interest rate per period in basis points (1/100 of a percent).
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Rate(pub u32);

impl Rate {
    pub const ZERO: Rate = Rate(0);

    /// `0.05` -> 500 basis points. Negative or non-finite input clamps to 0.
    pub fn from_fraction(f: f64) -> Rate {
        if !f.is_finite() || f <= 0.0 {
            return Rate::ZERO;
        }
        Rate((f * 10_000.0).round() as u32)
    }

    pub fn as_fraction(self) -> f64 {
        self.0 as f64 / 10_000.0
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}bp", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreditLink {
    pub borrower: NodeId,
    pub lender: NodeId,
    pub weight: Amount,
    pub interest: Rate,
}

/// One row of a node's local table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TableEntry {
    pub neighbor: NodeId,
    /// `true` when the neighbor borrows from the table owner.
    pub inlink: bool,
    pub weight: Amount,
}

/// A node's private record of its adjacent link weights.
///
/// Rows are keyed by `(neighbor, inlink)` so that a pair of nodes lending to
/// each other in both directions gets one row per link.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LocalTable {
    owner: NodeId,
    entries: BTreeMap<(NodeId, bool), Amount>,
}

impl LocalTable {
    pub fn new(owner: NodeId) -> Self {
        Self {
            owner,
            entries: BTreeMap::new(),
        }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn get(&self, neighbor: NodeId, inlink: bool) -> Option<Amount> {
        self.entries.get(&(neighbor, inlink)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = TableEntry> + '_ {
        self.entries
            .iter()
            .map(|(&(neighbor, inlink), &weight)| TableEntry {
                neighbor,
                inlink,
                weight,
            })
    }

    /// Distinct neighbors in ascending order.
    pub fn neighbors(&self) -> impl Iterator<Item = NodeId> + '_ {
        let mut last = None;
        self.entries.keys().filter_map(move |&(n, _)| {
            if last == Some(n) {
                None
            } else {
                last = Some(n);
                Some(n)
            }
        })
    }

    fn put(&mut self, neighbor: NodeId, inlink: bool, weight: Amount) {
        self.entries.insert((neighbor, inlink), weight);
    }

    fn remove(&mut self, neighbor: NodeId, inlink: bool) {
        self.entries.remove(&(neighbor, inlink));
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("network needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("edge density must be at least 1, got {0}")]
    InvalidDensity(String),
    #[error("invalid interest range [{0}, {1}]")]
    InvalidInterestRange(Rate, Rate),
    #[error("invalid weight range [{0}, {1}]")]
    InvalidWeightRange(Amount, Amount),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} already exists")]
    DuplicateNode(NodeId),
    #[error("node {0} still has adjacent links")]
    NodeHasLinks(NodeId),
    #[error("negative link weight {0}")]
    NegativeWeight(i64),
    #[error("link {0} -> {1} already exists")]
    DuplicateLink(NodeId, NodeId),
    #[error("a node cannot lend to itself ({0})")]
    SelfLink(NodeId),
    #[error("table of {owner} disagrees with the edge list: {detail}")]
    TableMismatch { owner: NodeId, detail: String },
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Result of a weight change, for callers that record provenance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkChange {
    pub borrower: NodeId,
    pub lender: NodeId,
    pub before: Amount,
    pub after: Amount,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CreditNetwork {
    seed: u64,
    nodes: BTreeSet<NodeId>,
    links: BTreeMap<(NodeId, NodeId), CreditLink>,
    tables: BTreeMap<NodeId, LocalTable>,
}

impl CreditNetwork {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Default::default()
        }
    }

    /// Empty network over nodes `0..n`.
    pub fn with_nodes(n: u32, seed: u64) -> Self {
        let mut net = Self::new(seed);
        for i in 0..n {
            net.add_node(NodeId(i)).expect("fresh ids");
        }
        net
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add_node(&mut self, id: NodeId) -> Result<(), ModelError> {
        if !self.nodes.insert(id) {
            return Err(ModelError::DuplicateNode(id));
        }
        self.tables.insert(id, LocalTable::new(id));
        Ok(())
    }

    /// Removes a node that has no adjacent links left.
    pub fn remove_node(&mut self, id: NodeId) -> Result<(), ModelError> {
        let table = self.tables.get(&id).ok_or(ModelError::UnknownNode(id))?;
        if !table.is_empty() {
            return Err(ModelError::NodeHasLinks(id));
        }
        self.tables.remove(&id);
        self.nodes.remove(&id);
        Ok(())
    }

    /// Smallest id strictly above every existing node.
    pub fn next_free_id(&self) -> NodeId {
        NodeId(self.nodes.iter().next_back().map(|n| n.0 + 1).unwrap_or(0))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains(&id)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().copied()
    }

    pub fn links(&self) -> impl Iterator<Item = &CreditLink> + '_ {
        self.links.values()
    }

    pub fn link(&self, borrower: NodeId, lender: NodeId) -> Option<&CreditLink> {
        self.links.get(&(borrower, lender))
    }

    pub fn table(&self, owner: NodeId) -> Option<&LocalTable> {
        self.tables.get(&owner)
    }

    /// Neighbors in the undirected skeleton, ascending.
    pub fn neighbors(&self, node: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.tables
            .get(&node)
            .into_iter()
            .flat_map(|t| t.neighbors())
    }

    pub fn degree(&self, node: NodeId) -> usize {
        self.neighbors(node).count()
    }

    pub fn are_adjacent(&self, a: NodeId, b: NodeId) -> bool {
        self.tables
            .get(&a)
            .map(|t| t.get(b, true).is_some() || t.get(b, false).is_some())
            .unwrap_or(false)
    }

    /// Links where `node` is the borrower (its lenders).
    pub fn lender_links(&self, node: NodeId) -> impl Iterator<Item = &CreditLink> + '_ {
        self.tables.get(&node).into_iter().flat_map(move |t| {
            t.entries()
                .filter(|e| !e.inlink)
                .filter_map(move |e| self.links.get(&(node, e.neighbor)))
        })
    }

    /// Links where `node` is the lender (its borrowers).
    pub fn borrower_links(&self, node: NodeId) -> impl Iterator<Item = &CreditLink> + '_ {
        self.tables.get(&node).into_iter().flat_map(move |t| {
            t.entries()
                .filter(|e| e.inlink)
                .filter_map(move |e| self.links.get(&(e.neighbor, node)))
        })
    }

    /// Sum of the weights `node` owes across all of its lenders.
    pub fn total_debt(&self, node: NodeId) -> Amount {
        self.lender_links(node).map(|l| l.weight).sum()
    }

    fn check_pair(&self, borrower: NodeId, lender: NodeId) -> Result<(), ModelError> {
        if !self.contains(borrower) {
            return Err(ModelError::UnknownNode(borrower));
        }
        if !self.contains(lender) {
            return Err(ModelError::UnknownNode(lender));
        }
        if borrower == lender {
            return Err(ModelError::SelfLink(borrower));
        }
        Ok(())
    }

    /// Creates a new link. A second link on an existing ordered pair is
    /// rejected rather than merged. Zero weight creates nothing.
    pub fn create_link(
        &mut self,
        borrower: NodeId,
        lender: NodeId,
        weight: Amount,
        interest: Rate,
    ) -> Result<LinkChange, ModelError> {
        self.check_pair(borrower, lender)?;
        if self.links.contains_key(&(borrower, lender)) {
            return Err(ModelError::DuplicateLink(borrower, lender));
        }
        if weight > 0 {
            self.install(borrower, lender, weight, interest);
        }
        Ok(LinkChange {
            borrower,
            lender,
            before: 0,
            after: weight,
        })
    }

    /// Sets a link's weight. Zero deletes the link; an absent link is created
    /// with zero interest.
    pub fn apply_link_update(
        &mut self,
        borrower: NodeId,
        lender: NodeId,
        new_weight: i64,
    ) -> Result<LinkChange, ModelError> {
        if new_weight < 0 {
            return Err(ModelError::NegativeWeight(new_weight));
        }
        self.check_pair(borrower, lender)?;
        let new_weight = new_weight as Amount;
        let before = self
            .links
            .get(&(borrower, lender))
            .map(|l| l.weight)
            .unwrap_or(0);
        if new_weight == 0 {
            self.uninstall(borrower, lender);
        } else {
            let interest = self
                .links
                .get(&(borrower, lender))
                .map(|l| l.interest)
                .unwrap_or(Rate::ZERO);
            self.install(borrower, lender, new_weight, interest);
        }
        Ok(LinkChange {
            borrower,
            lender,
            before,
            after: new_weight,
        })
    }

    fn install(&mut self, borrower: NodeId, lender: NodeId, weight: Amount, interest: Rate) {
        self.links.insert(
            (borrower, lender),
            CreditLink {
                borrower,
                lender,
                weight,
                interest,
            },
        );
        self.tables
            .get_mut(&borrower)
            .expect("checked")
            .put(lender, false, weight);
        self.tables
            .get_mut(&lender)
            .expect("checked")
            .put(borrower, true, weight);
    }

    fn uninstall(&mut self, borrower: NodeId, lender: NodeId) {
        self.links.remove(&(borrower, lender));
        if let Some(t) = self.tables.get_mut(&borrower) {
            t.remove(lender, false);
        }
        if let Some(t) = self.tables.get_mut(&lender) {
            t.remove(borrower, true);
        }
    }

    /// Rebuilds every local table from the edge list alone.
    pub fn derive_tables(&self) -> BTreeMap<NodeId, LocalTable> {
        let mut out: BTreeMap<NodeId, LocalTable> = self
            .nodes
            .iter()
            .map(|&n| (n, LocalTable::new(n)))
            .collect();
        for l in self.links.values() {
            out.get_mut(&l.borrower)
                .expect("node")
                .put(l.lender, false, l.weight);
            out.get_mut(&l.lender)
                .expect("node")
                .put(l.borrower, true, l.weight);
        }
        out
    }

    /// Checks the table/graph bisimulation and the no-zero-weight invariant.
    pub fn check_consistency(&self) -> Result<(), ModelError> {
        if let Some(l) = self.links.values().find(|l| l.weight == 0) {
            return Err(ModelError::TableMismatch {
                owner: l.borrower,
                detail: format!("zero-weight link to {} left in place", l.lender),
            });
        }
        let derived = self.derive_tables();
        for (owner, table) in &self.tables {
            match derived.get(owner) {
                Some(d) if d == table => {}
                Some(d) => {
                    return Err(ModelError::TableMismatch {
                        owner: *owner,
                        detail: format!("stored {} rows, derived {}", table.len(), d.len()),
                    })
                }
                None => {
                    return Err(ModelError::TableMismatch {
                        owner: *owner,
                        detail: "table for unknown node".into(),
                    })
                }
            }
        }
        if derived.len() != self.tables.len() {
            return Err(ModelError::TableMismatch {
                owner: NodeId(u32::MAX),
                detail: "node without table".into(),
            });
        }
        Ok(())
    }

    /// Line format: `nodes N seed S`, optional `node ID` lines when ids are
    /// not exactly `0..N`, then `edge borrower lender weight interest` sorted
    /// by borrower then lender. Interest is in basis points.
    pub fn serialize(&self) -> String {
        let mut out = format!("nodes {} seed {}\n", self.nodes.len(), self.seed);
        let contiguous = self
            .nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.0 as usize == i);
        if !contiguous {
            for n in &self.nodes {
                out.push_str(&format!("node {}\n", n));
            }
        }
        for l in self.links.values() {
            out.push_str(&format!(
                "edge {} {} {} {}\n",
                l.borrower, l.lender, l.weight, l.interest.0
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let perr = |line: usize, msg: &str| ModelError::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| perr(1, "missing header"))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 4 || h[0] != "nodes" || h[2] != "seed" {
            return Err(perr(1, "expected `nodes N seed S`"));
        }
        let count: u32 = num(h[1], 1)?;
        let seed: u64 = num(h[3], 1)?;
        let mut explicit = Vec::new();
        let mut edges = Vec::new();
        for (idx, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["node", id] => explicit.push(NodeId(num(id, idx + 1)?)),
                ["edge", b, l, w, r] => edges.push(CreditLink {
                    borrower: NodeId(num(b, idx + 1)?),
                    lender: NodeId(num(l, idx + 1)?),
                    weight: num(w, idx + 1)?,
                    interest: Rate(num(r, idx + 1)?),
                }),
                _ => return Err(perr(idx + 1, "unrecognized record")),
            }
        }
        let mut net = CreditNetwork::new(seed);
        if explicit.is_empty() {
            for i in 0..count {
                net.add_node(NodeId(i))?;
            }
        } else {
            if explicit.len() != count as usize {
                return Err(perr(1, "node count disagrees with node records"));
            }
            for n in explicit {
                net.add_node(n)?;
            }
        }
        for e in edges {
            net.create_link(e.borrower, e.lender, e.weight, e.interest)?;
        }
        Ok(net)
    }
}

fn num<T: FromStr>(s: &str, line: usize) -> Result<T, ModelError> {
    s.parse().map_err(|_| ModelError::Parse {
        line,
        msg: format!("bad number `{s}`"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: NodeId = NodeId(0);
    const D: NodeId = NodeId(3);
    const E: NodeId = NodeId(4);

    fn five() -> CreditNetwork {
        let mut net = CreditNetwork::with_nodes(5, 0);
        net.create_link(E, A, 20, Rate(500)).unwrap();
        net
    }

    #[test]
    fn zero_weight_deletes_link_and_rows() {
        let mut net = five();
        let ch = net.apply_link_update(E, A, 0).unwrap();
        assert_eq!((ch.before, ch.after), (20, 0));
        assert!(net.link(E, A).is_none());
        assert!(net.table(E).unwrap().is_empty());
        assert!(net.table(A).unwrap().is_empty());
        net.check_consistency().unwrap();
    }

    #[test]
    fn creating_absent_link_updates_both_tables() {
        let mut net = five();
        net.apply_link_update(E, D, 20).unwrap();
        assert_eq!(net.table(E).unwrap().get(D, false), Some(20));
        assert_eq!(net.table(D).unwrap().get(E, true), Some(20));
        assert_eq!(net.derive_tables()[&E], net.table(E).unwrap().clone());
        assert_eq!(net.derive_tables()[&D], net.table(D).unwrap().clone());
    }

    #[test]
    fn negative_weight_rejected() {
        let mut net = five();
        assert_eq!(
            net.apply_link_update(E, A, -5),
            Err(ModelError::NegativeWeight(-5))
        );
        assert_eq!(net.link(E, A).unwrap().weight, 20);
    }

    #[test]
    fn duplicate_pair_rejected_but_reverse_allowed() {
        let mut net = five();
        assert_eq!(
            net.create_link(E, A, 5, Rate::ZERO),
            Err(ModelError::DuplicateLink(E, A))
        );
        net.create_link(A, E, 7, Rate::ZERO).unwrap();
        let t = net.table(E).unwrap();
        assert_eq!((t.get(A, false), t.get(A, true)), (Some(20), Some(7)));
        assert_eq!(net.neighbors(E).collect::<Vec<_>>(), vec![A]);
        net.check_consistency().unwrap();
    }

    #[test]
    fn debt_totals() {
        let mut net = five();
        net.create_link(E, D, 15, Rate::ZERO).unwrap();
        assert_eq!(net.total_debt(E), 35);
        assert_eq!(net.borrower_links(A).count(), 1);
    }

    #[test]
    fn remove_node_requires_no_links() {
        let mut net = five();
        assert_eq!(net.remove_node(E), Err(ModelError::NodeHasLinks(E)));
        net.apply_link_update(E, A, 0).unwrap();
        net.remove_node(E).unwrap();
        assert!(!net.contains(E));
    }

    #[test]
    fn serialization_is_sorted_and_parses_back() {
        let mut net = CreditNetwork::with_nodes(3, 9);
        net.create_link(NodeId(2), NodeId(0), 4, Rate(10)).unwrap();
        net.create_link(NodeId(0), NodeId(1), 6, Rate(20)).unwrap();
        let text = net.serialize();
        assert_eq!(text, "nodes 3 seed 9\nedge 0 1 6 20\nedge 2 0 4 10\n");
        assert_eq!(CreditNetwork::parse(&text).unwrap(), net);
    }

    #[test]
    fn sparse_ids_round_trip() {
        let mut net = CreditNetwork::new(1);
        net.add_node(NodeId(2)).unwrap();
        net.add_node(NodeId(7)).unwrap();
        net.create_link(NodeId(7), NodeId(2), 1, Rate(1)).unwrap();
        assert_eq!(CreditNetwork::parse(&net.serialize()).unwrap(), net);
    }
}
