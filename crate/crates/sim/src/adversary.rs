use std::collections::BTreeMap;

use creditnet_core::model::AuditVerdict;
use creditnet_core::protocol::{ClaimCheck, Delivery, RelayBehavior, ResponseRouter, World};
use creditnet_core::{Amount, NodeId, RequestId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Behavior {
    /// Logs the next hop, then drops the response.
    Drop,
    /// Logs a digest naming no real next hop, then drops the response.
    Misdirect,
    /// Never answers a transfer request.
    SelectiveResponse,
    /// Claims `claimed` as the weight of its link with `counterparty`.
    MisreportLink {
        counterparty: NodeId,
        claimed: Amount,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AdversarySpec {
    pub corrupt: BTreeMap<NodeId, Behavior>,
}

impl AdversarySpec {
    pub fn single(node: NodeId, b: Behavior) -> Self {
        Self {
            corrupt: BTreeMap::from([(node, b)]),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.corrupt.is_empty()
    }

    pub fn is_selective(&self, n: NodeId) -> bool {
        self.corrupt.get(&n) == Some(&Behavior::SelectiveResponse)
    }

    /// The landmark is never corrupt and at least one node stays honest.
    pub fn validate(&self, world: &World, landmark: Option<NodeId>) -> Result<(), String> {
        if let Some(lm) = landmark {
            if self.corrupt.contains_key(&lm) {
                return Err(format!("landmark {lm} cannot be corrupt"));
            }
        }
        if !self.corrupt.is_empty() && self.corrupt.len() >= world.net.node_count() {
            return Err("the adversary cannot corrupt every node".into());
        }
        for (&n, b) in &self.corrupt {
            if !world.net.contains(n) {
                return Err(format!("corrupt node {n} is not in the network"));
            }
            if let Behavior::MisreportLink { counterparty, .. } = *b {
                if world.net.link(n, counterparty).is_none()
                    && world.net.link(counterparty, n).is_none()
                {
                    return Err(format!("{n} has no link with {counterparty} to misreport"));
                }
            }
        }
        Ok(())
    }
}

/// Installs relay behaviors. Response and claim behaviors are read by the
/// scenario and the audit.
pub fn inject_adversary(world: &mut World, spec: &AdversarySpec) {
    for (&n, b) in &spec.corrupt {
        match b {
            Behavior::Drop => {
                world.behaviors.insert(n, RelayBehavior::DropAfterLog);
            }
            Behavior::Misdirect => {
                world.behaviors.insert(n, RelayBehavior::Misdirect);
            }
            Behavior::SelectiveResponse | Behavior::MisreportLink { .. } => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuspectSegment {
    pub request_id: RequestId,
    pub suspect: (NodeId, NodeId),
}

impl SuspectSegment {
    pub fn contains(&self, n: NodeId) -> bool {
        self.suspect.0 == n || self.suspect.1 == n
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub segments: Vec<SuspectSegment>,
    /// Failed deliveries the logs could not localize.
    pub unlocated: Vec<RequestId>,
    pub misreports: Vec<ClaimCheck>,
}

impl AuditReport {
    pub fn is_empty(&self) -> bool {
        self.segments.is_empty() && self.unlocated.is_empty() && self.misreports.is_empty()
    }

    pub fn lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.segments {
            out.push(format!(
                "segment {} {} {}",
                s.request_id, s.suspect.0, s.suspect.1
            ));
        }
        for r in &self.unlocated {
            out.push(format!("unlocated {r}"));
        }
        for m in &self.misreports {
            out.push(format!(
                "misreport {} link {}->{} claimed {} signed {}",
                m.claimer, m.borrower, m.lender, m.claimed, m.signed
            ));
        }
        out
    }
}

/// Audits every failed delivery against the shared logs and compares each
/// claimed link weight in `spec` with the signed contracts.
pub fn run_audit(
    world: &mut World,
    deliveries: &[Delivery],
    router: &dyn ResponseRouter,
    spec: &AdversarySpec,
) -> AuditReport {
    let mut report = AuditReport::default();
    for d in deliveries.iter().filter(|d| !d.delivered) {
        match d.audit(world, router) {
            AuditVerdict::Broken { suspect, .. } => report.segments.push(SuspectSegment {
                request_id: d.request_id.clone(),
                suspect,
            }),
            AuditVerdict::NoTrail | AuditVerdict::Verified { .. } => {
                report.unlocated.push(d.request_id.clone())
            }
        }
    }
    for (&n, b) in &spec.corrupt {
        let Behavior::MisreportLink {
            counterparty,
            claimed,
        } = *b
        else {
            continue;
        };
        let (borrower, lender) = if world.net.link(n, counterparty).is_some() {
            (n, counterparty)
        } else {
            (counterparty, n)
        };
        let check = world.check_claim(n, borrower, lender, claimed);
        if check.is_misreport() {
            report.misreports.push(check);
        }
    }
    report
}
