//! Dual-signed link contracts and settlement acknowledgements.
//!
//! Canonical bytes are `lp(dest) ‖ lp(user) ‖ val ‖ lp(request_id)` with
//! every integer big-endian and `lp` a u32 length prefix. Node ids are
//! encoded as 4-byte values inside their prefix.

use thiserror::Error;

use crate::crypto::{Keyring, Signature};
use crate::model::{Amount, NodeId, RequestId};
use crate::wire::{Reader, WireError, Writer};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContractError {
    #[error("malformed contract bytes: {0}")]
    Wire(#[from] WireError),
    #[error("node id field has {0} bytes, expected 4")]
    BadIdWidth(usize),
}

fn put_id(w: &mut Writer, id: NodeId) {
    w.bytes(&id.0.to_be_bytes());
}

fn get_id(r: &mut Reader<'_>) -> Result<NodeId, ContractError> {
    let b = r.bytes()?;
    let arr: [u8; 4] = b
        .try_into()
        .map_err(|_| ContractError::BadIdWidth(b.len()))?;
    Ok(NodeId(u32::from_be_bytes(arr)))
}

/// Bytes both parties sign for `⟨dest, user, val, request_id⟩`.
pub fn canonical_bytes(dest: NodeId, user: NodeId, val: Amount, request_id: &RequestId) -> Vec<u8> {
    let mut w = Writer::new();
    put_id(&mut w, dest);
    put_id(&mut w, user);
    w.u64(val);
    w.str(request_id.as_str());
    w.finish()
}

/// Link `user → dest` of weight `val`, signed by both ends.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContractCtBal {
    pub dest: NodeId,
    pub user: NodeId,
    pub val: Amount,
    pub request_id: RequestId,
    pub sig_dest: Signature,
    pub sig_user: Signature,
}

impl ContractCtBal {
    pub fn message(&self) -> Vec<u8> {
        canonical_bytes(self.dest, self.user, self.val, &self.request_id)
    }

    pub fn verify_dest(&self, keys: &Keyring) -> bool {
        keys.verify(self.dest, &self.message(), &self.sig_dest)
    }

    pub fn verify_user(&self, keys: &Keyring) -> bool {
        keys.verify(self.user, &self.message(), &self.sig_user)
    }

    pub fn verify(&self, keys: &Keyring) -> bool {
        self.val > 0 && self.verify_dest(keys) && self.verify_user(keys)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        put_id(&mut w, self.dest);
        put_id(&mut w, self.user);
        w.u64(self.val);
        w.str(self.request_id.as_str());
        w.bytes(&self.sig_dest.0);
        w.bytes(&self.sig_user.0);
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, ContractError> {
        let mut r = Reader::new(data);
        let dest = get_id(&mut r)?;
        let user = get_id(&mut r)?;
        let val = r.u64()?;
        let request_id = RequestId::new(r.string()?);
        let sig_dest = Signature(r.bytes()?.to_vec());
        let sig_user = Signature(r.bytes()?.to_vec());
        r.finish()?;
        Ok(Self {
            dest,
            user,
            val,
            request_id,
            sig_dest,
            sig_user,
        })
    }
}

/// Both parties' acknowledgement that `user → src` now carries 0.
/// `sig_src` is `None` when the old lender refused, which makes the
/// settlement contested.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SettlementAck {
    pub src: NodeId,
    pub user: NodeId,
    pub request_id: RequestId,
    pub sig_src: Option<Signature>,
    pub sig_user: Signature,
}

impl SettlementAck {
    pub fn message(&self) -> Vec<u8> {
        canonical_bytes(self.src, self.user, 0, &self.request_id)
    }

    pub fn is_contested(&self) -> bool {
        self.sig_src.is_none()
    }

    pub fn verify(&self, keys: &Keyring) -> bool {
        let msg = self.message();
        match &self.sig_src {
            Some(s) => {
                keys.verify(self.src, &msg, s) && keys.verify(self.user, &msg, &self.sig_user)
            }
            None => false,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        put_id(&mut w, self.src);
        put_id(&mut w, self.user);
        w.str(self.request_id.as_str());
        match &self.sig_src {
            Some(s) => w.u8(1).bytes(&s.0),
            None => w.u8(0),
        };
        w.bytes(&self.sig_user.0);
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, ContractError> {
        let mut r = Reader::new(data);
        let src = get_id(&mut r)?;
        let user = get_id(&mut r)?;
        let request_id = RequestId::new(r.string()?);
        let sig_src = match r.u8()? {
            0 => None,
            _ => Some(Signature(r.bytes()?.to_vec())),
        };
        let sig_user = Signature(r.bytes()?.to_vec());
        r.finish()?;
        Ok(Self {
            src,
            user,
            request_id,
            sig_src,
            sig_user,
        })
    }
}
