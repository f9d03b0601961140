//! Signing, public-key encryption and hashing.
//!
//! Signatures are Ed25519, amounts are encrypted with X25519/XSalsa20-Poly1305
//! sealed boxes and digests are SHA-256 (truncated to `m` bits where a ring
//! identifier is needed). Protocol code never sees key material directly: it
//! goes through a [`Keyring`], which hands out signatures, ciphertexts and
//! verification results keyed by [`NodeId`].

use std::collections::BTreeMap;
use std::fmt;

use crypto_box::{PublicKey, SecretKey};
use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use rand::rngs::OsRng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::model::{Amount, NodeId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("decryption failed")]
    DecryptionFailed,
    #[error("no key material registered for node {0}")]
    UnknownNode(NodeId),
}

/// How key pairs are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyMode {
    /// Keys are a pure function of `(seed, node)`; encryption randomness is
    /// drawn from a seeded stream. Used by the simulator for replayable runs.
    Deterministic { seed: u64 },
    /// Fresh OS randomness for every key pair and ciphertext.
    Secure,
}

/// Fixed-width SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Leading `bits` bits of the digest as an integer in `[0, 2^bits)`.
    pub fn truncate(&self, bits: u32) -> u64 {
        assert!((1..=64).contains(&bits), "digest width must be 1..=64 bits");
        let head = u64::from_be_bytes(self.0[..8].try_into().expect("8 bytes"));
        if bits == 64 {
            head
        } else {
            head >> (64 - bits)
        }
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Digest> {
        let bytes = hex::decode(s).ok()?;
        Some(Digest(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

pub fn hash(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// Hash of several byte strings, each length-prefixed so that field
/// boundaries cannot be shifted.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u32).to_be_bytes());
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// `hash(bytes)` truncated to `bits` bits.
pub fn hash_bits(bytes: &[u8], bits: u32) -> u64 {
    hash(bytes).truncate(bits)
}

/// Opaque signature bytes. Malformed values simply fail verification.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Signature(pub Vec<u8>);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = hex::encode(&self.0);
        write!(f, "Signature({}..)", &h[..h.len().min(12)])
    }
}

/// Opaque ciphertext bytes.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Ciphertext(pub Vec<u8>);

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ciphertext({} bytes)", self.0.len())
    }
}

pub struct SigningKeyPair {
    sk: SigningKey,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct VerificationKey(VerifyingKey);

impl fmt::Debug for VerificationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "VerificationKey({})",
            &hex::encode(self.0.as_bytes())[..12]
        )
    }
}

impl VerificationKey {
    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }
}

impl SigningKeyPair {
    pub fn verification_key(&self) -> VerificationKey {
        VerificationKey(self.sk.verifying_key())
    }
}

pub struct EncryptionKeyPair {
    dk: SecretKey,
}

#[derive(Clone, PartialEq, Eq)]
pub struct EncryptionKey(PublicKey);

impl EncryptionKeyPair {
    pub fn public_key(&self) -> EncryptionKey {
        EncryptionKey(self.dk.public_key())
    }
}

impl fmt::Debug for EncryptionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "EncryptionKey({})",
            &hex::encode(self.0.as_bytes())[..12]
        )
    }
}

fn derivation_rng(seed: u64, id: NodeId, domain: &[u8]) -> ChaCha20Rng {
    let d = hash_parts(&[domain, &seed.to_be_bytes(), &id.0.to_be_bytes()]);
    ChaCha20Rng::from_seed(d.0)
}

pub fn keygen(mode: KeyMode, id: NodeId) -> (SigningKeyPair, EncryptionKeyPair) {
    match mode {
        KeyMode::Deterministic { seed } => {
            let mut rng = derivation_rng(seed, id, b"creditnet/keygen");
            let sk = SigningKey::generate(&mut rng);
            let dk = SecretKey::generate(&mut rng);
            (SigningKeyPair { sk }, EncryptionKeyPair { dk })
        }
        KeyMode::Secure => {
            let sk = SigningKey::generate(&mut OsRng);
            let dk = SecretKey::generate(&mut OsRng);
            (SigningKeyPair { sk }, EncryptionKeyPair { dk })
        }
    }
}

pub fn sign(kp: &SigningKeyPair, message: &[u8]) -> Signature {
    Signature(kp.sk.sign(message).to_bytes().to_vec())
}

pub fn verify(vk: &VerificationKey, message: &[u8], sig: &Signature) -> bool {
    match ed25519_dalek::Signature::from_slice(&sig.0) {
        Ok(s) => vk.0.verify(message, &s).is_ok(),
        Err(_) => false,
    }
}

pub fn encrypt<R>(pk: &EncryptionKey, amount: Amount, rng: &mut R) -> Ciphertext
where
    R: rand::CryptoRng + rand::RngCore,
{
    let ct =
        pk.0.seal(rng, &amount.to_be_bytes())
            .expect("sealing an 8-byte payload cannot fail");
    Ciphertext(ct)
}

pub fn decrypt(kp: &EncryptionKeyPair, ct: &Ciphertext) -> Result<Amount, CryptoError> {
    let pt = kp
        .dk
        .unseal(&ct.0)
        .map_err(|_| CryptoError::DecryptionFailed)?;
    let bytes: [u8; 8] = pt.try_into().map_err(|_| CryptoError::DecryptionFailed)?;
    Ok(Amount::from_be_bytes(bytes))
}

struct NodeKeys {
    signing: SigningKeyPair,
    vk: VerificationKey,
    encryption: EncryptionKeyPair,
    pk: EncryptionKey,
}

/// Per-run key registry. Keys are created on first use of a node id.
pub struct Keyring {
    mode: KeyMode,
    keys: BTreeMap<NodeId, NodeKeys>,
    rng: ChaCha20Rng,
}

impl Keyring {
    pub fn new(mode: KeyMode) -> Self {
        let rng = match mode {
            KeyMode::Deterministic { seed } => {
                derivation_rng(seed, NodeId(u32::MAX), b"creditnet/nonce")
            }
            KeyMode::Secure => ChaCha20Rng::from_rng(OsRng).expect("os rng"),
        };
        Self {
            mode,
            keys: BTreeMap::new(),
            rng,
        }
    }

    pub fn mode(&self) -> KeyMode {
        self.mode
    }

    pub fn register(&mut self, id: NodeId) {
        let mode = self.mode;
        self.keys.entry(id).or_insert_with(|| {
            let (signing, encryption) = keygen(mode, id);
            let vk = signing.verification_key();
            let pk = encryption.public_key();
            NodeKeys {
                signing,
                vk,
                encryption,
                pk,
            }
        });
    }

    pub fn is_registered(&self, id: NodeId) -> bool {
        self.keys.contains_key(&id)
    }

    pub fn verification_key(&mut self, id: NodeId) -> VerificationKey {
        self.register(id);
        self.keys[&id].vk
    }

    pub fn encryption_key(&mut self, id: NodeId) -> EncryptionKey {
        self.register(id);
        self.keys[&id].pk.clone()
    }

    pub fn sign(&mut self, id: NodeId, message: &[u8]) -> Signature {
        self.register(id);
        sign(&self.keys[&id].signing, message)
    }

    /// Verifies under `id`'s key. A node that never had keys issued cannot
    /// have produced a valid signature, so the answer is `false`.
    pub fn verify(&self, id: NodeId, message: &[u8], sig: &Signature) -> bool {
        self.keys
            .get(&id)
            .map(|k| verify(&k.vk, message, sig))
            .unwrap_or(false)
    }

    pub fn encrypt_for(&mut self, recipient: NodeId, amount: Amount) -> Ciphertext {
        let pk = self.encryption_key(recipient);
        encrypt(&pk, amount, &mut self.rng)
    }

    pub fn decrypt_as(&self, recipient: NodeId, ct: &Ciphertext) -> Result<Amount, CryptoError> {
        let k = self
            .keys
            .get(&recipient)
            .ok_or(CryptoError::UnknownNode(recipient))?;
        decrypt(&k.encryption, ct)
    }
}

impl fmt::Debug for Keyring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Keyring")
            .field("mode", &self.mode)
            .field("nodes", &self.keys.len())
            .finish()
    }
}
