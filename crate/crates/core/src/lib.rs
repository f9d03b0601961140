//! Rebalancing of depleted links in a decentralized credit network.
//!
//! The crate covers the credit graph and its local tables ([`model`]),
//! signing/encryption ([`crypto`]), two routing layers for transfer
//! responses ([`prefix`] tree embeddings and a [`chord`] ring), the
//! balance-transfer and bailout protocols ([`protocol`]) and a hash-linked
//! [`ledger`] of completed contracts.

pub mod chord;
pub mod contract;
pub mod crypto;
pub mod ledger;
pub mod model;
pub mod prefix;
pub mod protocol;
pub mod wire;

pub use model::{Amount, CreditLink, CreditNetwork, NodeId, Rate, RequestId, Tick};
