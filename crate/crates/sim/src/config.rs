use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{AdversarySpec, Behavior};
use creditnet_core::NodeId;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub scenario: String,
    pub seed: u64,
    pub network: NetworkSection,
    pub ring: RingSection,
    pub transfer: TransferSection,
    pub bailout: BailoutSection,
    pub lending: LendingSection,
    pub adversary: AdversarySection,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scenario: "prefix-bt".into(),
            seed: 1,
            network: NetworkSection::default(),
            ring: RingSection::default(),
            transfer: TransferSection::default(),
            bailout: BailoutSection::default(),
            lending: LendingSection::default(),
            adversary: AdversarySection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub nodes: usize,
    /// Average out-degree of the generated graph.
    pub density: f64,
    pub min_interest: u32,
    pub max_interest: u32,
    pub min_weight: u64,
    pub max_weight: u64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            nodes: 1000,
            density: 3.0,
            min_interest: 500,
            max_interest: 2000,
            min_weight: 1,
            max_weight: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RingSection {
    pub bits: u32,
    /// Ticks between stabilization rounds.
    pub stabilize_interval: u64,
    pub max_stabilize_rounds: usize,
}

impl Default for RingSection {
    fn default() -> Self {
        Self {
            bits: 32,
            stabilize_interval: 8,
            max_stabilize_rounds: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Responders {
    Rule,
    Probabilistic { p: f64 },
    Only { nodes: Vec<u32> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    /// Defaults to a node drawn from the seed.
    pub requestor: Option<u32>,
    pub amt: u64,
    pub intr: u32,
    /// Deadline, in ticks after the broadcast.
    pub window: u64,
    pub responders: Responders,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self {
            requestor: None,
            amt: 500,
            intr: 1200,
            window: 64,
            responders: Responders::Rule,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BailoutSection {
    /// Defaults to the node with the fewest lenders.
    pub requestor: Option<u32>,
    pub m_out: usize,
    pub tr: u64,
    pub fee_per_link: u64,
    pub max_rounds: usize,
    pub interest: u32,
    /// Repetitions averaged into the findroute row.
    pub reps: usize,
}

impl Default for BailoutSection {
    fn default() -> Self {
        Self {
            requestor: None,
            m_out: 10,
            tr: 10,
            fee_per_link: 1,
            max_rounds: 3,
            interest: 1000,
            reps: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Offer {
    pub node: u32,
    pub amount: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LendingSection {
    /// Offer from any node not listed; `None` means refuse.
    pub default: Option<u64>,
    pub offer: Vec<Offer>,
}

impl Default for LendingSection {
    fn default() -> Self {
        Self {
            default: Some(20),
            offer: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptNode {
    pub node: u32,
    pub behavior: String,
    /// Misreport only: the other end of the link and the value claimed.
    pub counterparty: Option<u32>,
    pub claimed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarySection {
    pub corrupt: Vec<CorruptNode>,
}

impl AdversarySection {
    pub fn to_spec(&self) -> Result<AdversarySpec, ConfigError> {
        let mut spec = AdversarySpec::default();
        for c in &self.corrupt {
            let b = match c.behavior.as_str() {
                "drop" => Behavior::Drop,
                "misdirect" => Behavior::Misdirect,
                "selective-response" => Behavior::SelectiveResponse,
                "misreport-link" => match (c.counterparty, c.claimed) {
                    (Some(cp), Some(v)) => Behavior::MisreportLink {
                        counterparty: NodeId(cp),
                        claimed: v,
                    },
                    _ => {
                        return Err(ConfigError::Invalid(format!(
                            "node {}: misreport-link needs counterparty and claimed",
                            c.node
                        )))
                    }
                },
                other => return Err(ConfigError::Invalid(format!("unknown behavior {other:?}"))),
            };
            if spec.corrupt.insert(NodeId(c.node), b).is_some() {
                return Err(ConfigError::Invalid(format!(
                    "node {} listed twice",
                    c.node
                )));
            }
        }
        Ok(spec)
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: SimConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.network.nodes < 2 {
            return bad(format!("invalid N: {}", self.network.nodes));
        }
        if self.transfer.window == 0 {
            return bad("transfer window must be positive".into());
        }
        if self.transfer.amt == 0 {
            return bad("transfer amt must be positive".into());
        }
        if self.bailout.m_out == 0 || self.bailout.max_rounds == 0 || self.bailout.reps == 0 {
            return bad("bailout m_out, max_rounds and reps must be positive".into());
        }
        if self.ring.stabilize_interval == 0 {
            return bad("stabilize_interval must be positive".into());
        }
        if let Responders::Probabilistic { p } = self.transfer.responders {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("responder probability {p} outside [0, 1]"));
            }
        }
        self.adversary.to_spec()?;
        Ok(())
    }
}
