use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Amount, CreditNetwork, ModelError, NodeId, Rate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub node_count: usize,
    /// Target average out-degree.
    pub edge_density: f64,
    pub seed: u64,
    pub interest_range: (Rate, Rate),
    pub weight_range: (Amount, Amount),
}

impl NetworkConfig {
    pub fn new(node_count: usize, edge_density: f64, seed: u64) -> Self {
        Self {
            node_count,
            edge_density,
            seed,
            interest_range: (Rate(500), Rate(2000)),
            weight_range: (1, 100),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.node_count < 2 {
            return Err(ModelError::TooFewNodes(self.node_count));
        }
        if !self.edge_density.is_finite() || self.edge_density < 1.0 {
            return Err(ModelError::InvalidDensity(self.edge_density.to_string()));
        }
        let (lo, hi) = self.interest_range;
        if lo > hi {
            return Err(ModelError::InvalidInterestRange(lo, hi));
        }
        let (wlo, whi) = self.weight_range;
        if wlo == 0 || wlo > whi {
            return Err(ModelError::InvalidWeightRange(wlo, whi));
        }
        Ok(())
    }
}

struct Components {
    parent: Vec<usize>,
}

impl Components {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller index as representative for deterministic order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Random directed credit graph over nodes `0..node_count`.
///
/// Draws `round(n * density)` distinct ordered pairs uniformly (capped at
/// `n(n-1)`), then joins any remaining weak components to the component of
/// node 0 with one extra link each.
pub fn generate_network(cfg: &NetworkConfig) -> Result<CreditNetwork, ModelError> {
    cfg.validate()?;
    let n = cfg.node_count;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = CreditNetwork::with_nodes(n as u32, cfg.seed);
    let mut comps = Components::new(n);

    let max_links = n * (n - 1);
    let target = ((n as f64 * cfg.edge_density).round() as usize).min(max_links);
    let draw_link = |rng: &mut ChaCha8Rng| {
        let w = rng.gen_range(cfg.weight_range.0..=cfg.weight_range.1);
        let r = Rate(rng.gen_range(cfg.interest_range.0 .0..=cfg.interest_range.1 .0));
        (w, r)
    };

    while net.link_count() < target {
        let b = rng.gen_range(0..n);
        let l = rng.gen_range(0..n);
        if b == l || net.link(NodeId(b as u32), NodeId(l as u32)).is_some() {
            continue;
        }
        let (w, r) = draw_link(&mut rng);
        net.create_link(NodeId(b as u32), NodeId(l as u32), w, r)?;
        comps.union(b, l);
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for v in 0..n {
        let root = comps.find(v);
        members[root].push(v);
    }
    let main = comps.find(0);
    let mut main_members = members[main].clone();
    for (root, group) in members.iter().enumerate() {
        if root == main || group.is_empty() {
            continue;
        }
        let u = *group.choose(&mut rng).expect("non-empty");
        let v = *main_members.choose(&mut rng).expect("non-empty");
        let (b, l) = if rng.gen_bool(0.5) { (u, v) } else { (v, u) };
        let (w, r) = draw_link(&mut rng);
        net.create_link(NodeId(b as u32), NodeId(l as u32), w, r)?;
        comps.union(u, v);
        main_members.extend_from_slice(group);
    }
    Ok(net)
}
