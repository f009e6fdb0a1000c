//! Peer identities: keypairs, stable peer ids, rotation, and petname handles.
//!
//! A peer id is the hash of the peer's *original* public key, so it survives
//! key rotation. Rotation appends a link to the record's lineage: the old key
//! signs the new key, and verification walks the whole chain back to the
//! original. Handles are strictly local petnames; two peers never have to
//! agree on them.

use std::collections::BTreeMap;
use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use sha2::{Digest, Sha256};
use thiserror::Error;

const BASE32_ALPHABET: &[u8; 32] = b"abcdefghijklmnopqrstuvwxyz234567";

/// Field separator for canonical encodings signed or hashed by this module.
pub const FIELD_SEP: u8 = 0x1f;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("bad peer id {0:?}")]
    BadPeerId(String),
    #[error("handle {0:?} is invalid: 1-64 chars, no ':', '@', '.', or whitespace")]
    BadHandle(String),
    #[error("alias {0:?} is not bound")]
    UnboundAlias(String),
    #[error("signature does not verify")]
    BadSignature,
    #[error("peer id does not match the original key")]
    PeerIdMismatch,
    #[error("rotation chain is broken at generation {0}")]
    BrokenChain(u64),
    #[error("record generation {got} does not match chain length {want}")]
    BadGeneration { got: u64, want: u64 },
    #[error("malformed identity record: {0}")]
    Malformed(String),
}

/// Stable peer identifier: SHA-256 of the original verifying key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PeerId(pub [u8; 32]);

impl PeerId {
    pub fn from_key(key: &VerifyingKey) -> Self {
        let mut h = Sha256::new();
        h.update(b"folkfed/peer-id/v1");
        h.update(key.as_bytes());
        PeerId(h.finalize().into())
    }

    /// Well-known ids for protocol vocabularies (`fed`, `as`, `skos`, ...).
    /// These namespaces are never signed for; they exist so reserved
    /// predicates compare equal across unrelated stores.
    pub fn reserved(name: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"folkfed/reserved/v1/");
        h.update(name.as_bytes());
        PeerId(h.finalize().into())
    }

    /// Lowercase base32, no padding: 52 characters for 256 bits.
    pub fn render(&self) -> String {
        base32_encode(&self.0)
    }

    pub fn parse(text: &str) -> Result<Self, IdentityError> {
        let bytes = base32_decode(text).ok_or_else(|| IdentityError::BadPeerId(text.to_string()))?;
        if bytes.len() != 32 {
            return Err(IdentityError::BadPeerId(text.to_string()));
        }
        let mut out = [0u8; 32];
        out.copy_from_slice(&bytes);
        Ok(PeerId(out))
    }

    /// True when `text` has the shape of a rendered peer id.
    pub fn looks_like(text: &str) -> bool {
        text.len() == 52 && text.bytes().all(|b| BASE32_ALPHABET.contains(&b))
    }
}

impl fmt::Debug for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PeerId({})", &self.render()[..8])
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

fn base32_encode(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len().div_ceil(5) * 8);
    let mut acc: u64 = 0;
    let mut bits = 0u32;
    for &b in bytes {
        acc = (acc << 8) | u64::from(b);
        bits += 8;
        while bits >= 5 {
            bits -= 5;
            out.push(BASE32_ALPHABET[((acc >> bits) & 0x1f) as usize] as char);
        }
    }
    if bits > 0 {
        out.push(BASE32_ALPHABET[((acc << (5 - bits)) & 0x1f) as usize] as char);
    }
    out
}

fn base32_decode(text: &str) -> Option<Vec<u8>> {
    let mut acc: u64 = 0;
    let mut bits = 0u32;
    let mut out = Vec::with_capacity(text.len() * 5 / 8);
    for ch in text.bytes() {
        let val = BASE32_ALPHABET.iter().position(|&a| a == ch)? as u64;
        acc = (acc << 5) | val;
        bits += 5;
        if bits >= 8 {
            bits -= 8;
            out.push(((acc >> bits) & 0xff) as u8);
        }
    }
    // Leftover bits must be zero padding.
    if bits > 0 && (acc & ((1 << bits) - 1)) != 0 {
        return None;
    }
    Some(out)
}

/// Opaque signing capability. Never serialized by this module; callers that
/// need persistence store the seed themselves.
pub struct SecretHandle {
    key: SigningKey,
}

impl SecretHandle {
    pub fn sign(&self, message: &[u8]) -> [u8; 64] {
        self.key.sign(message).to_bytes()
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        SecretHandle { key: SigningKey::from_bytes(&seed) }
    }

    pub fn seed(&self) -> [u8; 32] {
        self.key.to_bytes()
    }
}

impl fmt::Debug for SecretHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretHandle(..)")
    }
}

/// One rotation link: the previous key signed `to_key` for this generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RotationLink {
    pub to_key: [u8; 32],
    pub proof: [u8; 64],
}

/// Self-describing identity record, signed by the current key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityRecord {
    pub peer_id: PeerId,
    pub original_key: [u8; 32],
    pub current_key: [u8; 32],
    pub display_handle: String,
    pub recovery_locator: String,
    pub generation: u64,
    pub lineage: Vec<RotationLink>,
    pub signature: [u8; 64],
}

fn validate_handle(handle: &str) -> Result<(), IdentityError> {
    let ok = !handle.is_empty()
        && handle.len() <= 64
        && !handle.chars().any(|c| c == ':' || c == '@' || c == '.' || c.is_whitespace());
    if ok {
        Ok(())
    } else {
        Err(IdentityError::BadHandle(handle.to_string()))
    }
}

fn rotation_message(peer_id: &PeerId, generation: u64, to_key: &[u8; 32]) -> Vec<u8> {
    let mut msg = Vec::with_capacity(80);
    msg.extend_from_slice(b"folkfed/rotate/v1");
    msg.push(FIELD_SEP);
    msg.extend_from_slice(&peer_id.0);
    msg.push(FIELD_SEP);
    msg.extend_from_slice(&generation.to_be_bytes());
    msg.push(FIELD_SEP);
    msg.extend_from_slice(to_key);
    msg
}

impl IdentityRecord {
    /// Canonical bytes covered by the record signature: every field except
    /// the signature, in declaration order, separated by 0x1F.
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"folkfed/identity/v1");
        out.push(FIELD_SEP);
        out.extend_from_slice(&self.peer_id.0);
        out.push(FIELD_SEP);
        out.extend_from_slice(&self.original_key);
        out.push(FIELD_SEP);
        out.extend_from_slice(&self.current_key);
        out.push(FIELD_SEP);
        out.extend_from_slice(self.display_handle.as_bytes());
        out.push(FIELD_SEP);
        out.extend_from_slice(self.recovery_locator.as_bytes());
        out.push(FIELD_SEP);
        out.extend_from_slice(&self.generation.to_be_bytes());
        for link in &self.lineage {
            out.push(FIELD_SEP);
            out.extend_from_slice(&link.to_key);
            out.extend_from_slice(&link.proof);
        }
        out
    }

    /// Canonical field-order binary encoding (the `.fid` format).
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"fid1");
        out.extend_from_slice(&self.peer_id.0);
        out.extend_from_slice(&self.original_key);
        out.extend_from_slice(&self.current_key);
        let handle = self.display_handle.as_bytes();
        out.extend_from_slice(&(handle.len() as u32).to_be_bytes());
        out.extend_from_slice(handle);
        let locator = self.recovery_locator.as_bytes();
        out.extend_from_slice(&(locator.len() as u32).to_be_bytes());
        out.extend_from_slice(locator);
        out.extend_from_slice(&self.generation.to_be_bytes());
        out.extend_from_slice(&(self.lineage.len() as u32).to_be_bytes());
        for link in &self.lineage {
            out.extend_from_slice(&link.to_key);
            out.extend_from_slice(&link.proof);
        }
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, IdentityError> {
        let mut at = 0usize;
        let take = |at: &mut usize, n: usize| -> Result<&[u8], IdentityError> {
            if *at + n > bytes.len() {
                return Err(IdentityError::Malformed("truncated".into()));
            }
            let s = &bytes[*at..*at + n];
            *at += n;
            Ok(s)
        };
        if take(&mut at, 4)? != b"fid1" {
            return Err(IdentityError::Malformed("bad magic".into()));
        }
        let fixed = |at: &mut usize| -> Result<[u8; 32], IdentityError> {
            let s = take(at, 32)?;
            let mut out = [0u8; 32];
            out.copy_from_slice(s);
            Ok(out)
        };
        let peer_id = PeerId(fixed(&mut at)?);
        let original_key = fixed(&mut at)?;
        let current_key = fixed(&mut at)?;
        let len32 = |at: &mut usize| -> Result<usize, IdentityError> {
            let s = take(at, 4)?;
            Ok(u32::from_be_bytes([s[0], s[1], s[2], s[3]]) as usize)
        };
        let hlen = len32(&mut at)?;
        let display_handle = String::from_utf8(take(&mut at, hlen)?.to_vec())
            .map_err(|_| IdentityError::Malformed("handle not utf-8".into()))?;
        let llen = len32(&mut at)?;
        let recovery_locator = String::from_utf8(take(&mut at, llen)?.to_vec())
            .map_err(|_| IdentityError::Malformed("locator not utf-8".into()))?;
        let gen_bytes = take(&mut at, 8)?;
        let generation = u64::from_be_bytes(gen_bytes.try_into().unwrap());
        let nlinks = len32(&mut at)?;
        if nlinks > 1024 {
            return Err(IdentityError::Malformed("absurd lineage length".into()));
        }
        let mut lineage = Vec::with_capacity(nlinks);
        for _ in 0..nlinks {
            let mut to_key = [0u8; 32];
            to_key.copy_from_slice(take(&mut at, 32)?);
            let mut proof = [0u8; 64];
            proof.copy_from_slice(take(&mut at, 64)?);
            lineage.push(RotationLink { to_key, proof });
        }
        let mut signature = [0u8; 64];
        signature.copy_from_slice(take(&mut at, 64)?);
        if at != bytes.len() {
            return Err(IdentityError::Malformed("trailing bytes".into()));
        }
        Ok(IdentityRecord {
            peer_id,
            original_key,
            current_key,
            display_handle,
            recovery_locator,
            generation,
            lineage,
            signature,
        })
    }
}

/// Creates a fresh identity. `entropy`, when given, seeds the key
/// deterministically (tests, simulations); otherwise the OS RNG is used.
pub fn generate_identity(
    entropy: Option<&[u8]>,
    handle: &str,
    recovery_locator: &str,
) -> Result<(IdentityRecord, SecretHandle), IdentityError> {
    validate_handle(handle)?;
    let seed: [u8; 32] = match entropy {
        Some(bytes) => {
            let mut h = Sha256::new();
            h.update(b"folkfed/seed/v1");
            h.update(bytes);
            h.finalize().into()
        }
        None => {
            let mut seed = [0u8; 32];
            use rand::RngCore;
            rand::rngs::OsRng.fill_bytes(&mut seed);
            seed
        }
    };
    let secret = SecretHandle::from_seed(seed);
    let key = secret.verifying_key();
    let peer_id = PeerId::from_key(&key);
    let mut record = IdentityRecord {
        peer_id,
        original_key: key.to_bytes(),
        current_key: key.to_bytes(),
        display_handle: handle.to_string(),
        recovery_locator: recovery_locator.to_string(),
        generation: 0,
        lineage: Vec::new(),
        signature: [0u8; 64],
    };
    record.signature = secret.sign(&record.signed_bytes());
    Ok((record, secret))
}

/// Rotates to a fresh key. The peer id is unchanged; the old key signs the
/// new one and the proof is appended to the lineage.
pub fn rotate_key(
    record: &IdentityRecord,
    old_secret: &SecretHandle,
    entropy: Option<&[u8]>,
) -> Result<(IdentityRecord, SecretHandle), IdentityError> {
    if old_secret.verifying_key().to_bytes() != record.current_key {
        return Err(IdentityError::BadSignature);
    }
    let seed: [u8; 32] = match entropy {
        Some(bytes) => {
            let mut h = Sha256::new();
            h.update(b"folkfed/seed/v1");
            h.update(bytes);
            h.finalize().into()
        }
        None => {
            let mut seed = [0u8; 32];
            use rand::RngCore;
            rand::rngs::OsRng.fill_bytes(&mut seed);
            seed
        }
    };
    let new_secret = SecretHandle::from_seed(seed);
    let new_key = new_secret.verifying_key().to_bytes();
    let generation = record.generation + 1;
    let proof = old_secret.sign(&rotation_message(&record.peer_id, generation, &new_key));
    let mut lineage = record.lineage.clone();
    lineage.push(RotationLink { to_key: new_key, proof });
    let mut next = IdentityRecord {
        peer_id: record.peer_id,
        original_key: record.original_key,
        current_key: new_key,
        display_handle: record.display_handle.clone(),
        recovery_locator: record.recovery_locator.clone(),
        generation,
        lineage,
        signature: [0u8; 64],
    };
    next.signature = new_secret.sign(&next.signed_bytes());
    Ok((next, new_secret))
}

/// Full verification: peer id matches the original key, every rotation link
/// is signed by its predecessor, the chain ends at the current key, and the
/// record signature verifies under the current key.
pub fn verify_identity(record: &IdentityRecord) -> Result<(), IdentityError> {
    validate_handle(&record.display_handle)?;
    let original = VerifyingKey::from_bytes(&record.original_key)
        .map_err(|_| IdentityError::Malformed("bad original key".into()))?;
    if PeerId::from_key(&original) != record.peer_id {
        return Err(IdentityError::PeerIdMismatch);
    }
    if record.generation != record.lineage.len() as u64 {
        return Err(IdentityError::BadGeneration {
            got: record.generation,
            want: record.lineage.len() as u64,
        });
    }
    let mut prev = original;
    for (i, link) in record.lineage.iter().enumerate() {
        let gen = (i + 1) as u64;
        let msg = rotation_message(&record.peer_id, gen, &link.to_key);
        let sig = Signature::from_bytes(&link.proof);
        prev.verify(&msg, &sig).map_err(|_| IdentityError::BrokenChain(gen))?;
        prev = VerifyingKey::from_bytes(&link.to_key)
            .map_err(|_| IdentityError::BrokenChain(gen))?;
    }
    if prev.to_bytes() != record.current_key {
        return Err(IdentityError::BrokenChain(record.generation));
    }
    let sig = Signature::from_bytes(&record.signature);
    prev.verify(&record.signed_bytes(), &sig).map_err(|_| IdentityError::BadSignature)?;
    Ok(())
}

/// Signs an arbitrary message with the current key.
pub fn sign(secret: &SecretHandle, message: &[u8]) -> [u8; 64] {
    secret.sign(message)
}

/// Verifies a detached signature against a peer's current key.
pub fn verify(record: &IdentityRecord, message: &[u8], signature: &[u8; 64]) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(&record.current_key) else {
        return false;
    };
    key.verify(message, &Signature::from_bytes(signature)).is_ok()
}

/// Strictly local alias table: petname -> peer id. Pure value; rebinding
/// returns an updated copy and last-wins.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HandleTable {
    bindings: BTreeMap<String, PeerId>,
}

impl HandleTable {
    pub fn new() -> Self {
        HandleTable::default()
    }

    /// A table pre-bound with the reserved protocol vocabularies.
    pub fn with_reserved() -> Self {
        let mut t = HandleTable::new();
        for name in ["fed", "as", "skos", "translate"] {
            t.bindings.insert(name.to_string(), PeerId::reserved(name));
        }
        t
    }

    pub fn bind(&self, alias: &str, peer: PeerId) -> Result<HandleTable, IdentityError> {
        validate_handle(alias)?;
        let mut next = self.clone();
        next.bindings.insert(alias.to_string(), peer);
        Ok(next)
    }

    pub fn unbind(&self, alias: &str) -> HandleTable {
        let mut next = self.clone();
        next.bindings.remove(alias);
        next
    }

    pub fn resolve(&self, alias: &str) -> Result<PeerId, IdentityError> {
        self.bindings
            .get(alias)
            .copied()
            .ok_or_else(|| IdentityError::UnboundAlias(alias.to_string()))
    }

    /// Reverse lookup: the alphabetically first alias bound to `peer`.
    pub fn alias_of(&self, peer: &PeerId) -> Option<&str> {
        self.bindings
            .iter()
            .find(|(_, p)| *p == peer)
            .map(|(a, _)| a.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &PeerId)> {
        self.bindings.iter().map(|(a, p)| (a.as_str(), p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peer_id_renders_52_lowercase_base32_chars() {
        let (record, _) = generate_identity(Some(b"alpha"), "alpha", "").unwrap();
        let text = record.peer_id.render();
        assert_eq!(text.len(), 52);
        assert!(text.bytes().all(|b| BASE32_ALPHABET.contains(&b)));
        assert_eq!(PeerId::parse(&text).unwrap(), record.peer_id);
    }

    #[test]
    fn base32_round_trips_arbitrary_bytes() {
        for len in 0..64 {
            let bytes: Vec<u8> = (0..len).map(|i| (i * 37 + len) as u8).collect();
            let text = base32_encode(&bytes);
            assert_eq!(base32_decode(&text).unwrap(), bytes);
        }
    }

    #[test]
    fn generate_is_deterministic_under_fixed_entropy() {
        let (a, _) = generate_identity(Some(b"same"), "h", "").unwrap();
        let (b, _) = generate_identity(Some(b"same"), "h", "").unwrap();
        assert_eq!(a, b);
        let (c, _) = generate_identity(Some(b"other"), "h", "").unwrap();
        assert_ne!(a.peer_id, c.peer_id);
    }

    #[test]
    fn fresh_record_verifies() {
        let (record, _) = generate_identity(Some(b"x"), "xena", "https://example.org/id").unwrap();
        verify_identity(&record).unwrap();
    }

    #[test]
    fn rotation_preserves_peer_id_and_verifies() {
        let (r0, s0) = generate_identity(Some(b"r"), "rot", "").unwrap();
        let (r1, s1) = rotate_key(&r0, &s0, Some(b"r1")).unwrap();
        let (r2, _s2) = rotate_key(&r1, &s1, Some(b"r2")).unwrap();
        assert_eq!(r2.peer_id, r0.peer_id);
        assert_eq!(r2.generation, 2);
        assert_ne!(r2.current_key, r0.current_key);
        verify_identity(&r1).unwrap();
        verify_identity(&r2).unwrap();
    }

    #[test]
    fn chain_of_ten_rotations_verifies() {
        let (mut record, mut secret) = generate_identity(Some(b"ten"), "ten", "").unwrap();
        for i in 0..10u8 {
            let (r, s) = rotate_key(&record, &secret, Some(&[i])).unwrap();
            record = r;
            secret = s;
        }
        assert_eq!(record.generation, 10);
        verify_identity(&record).unwrap();
    }

    #[test]
    fn tampered_records_fail_verification() {
        let (r0, s0) = generate_identity(Some(b"t"), "tam", "").unwrap();
        let (r1, _) = rotate_key(&r0, &s0, Some(b"t1")).unwrap();

        let mut bad = r1.clone();
        bad.display_handle = "other".into();
        assert!(verify_identity(&bad).is_err());

        let mut bad = r1.clone();
        bad.lineage[0].to_key[0] ^= 1;
        assert!(verify_identity(&bad).is_err());

        let mut bad = r1.clone();
        bad.signature[5] ^= 0x40;
        assert_eq!(verify_identity(&bad), Err(IdentityError::BadSignature));

        let mut bad = r1.clone();
        bad.generation = 7;
        assert!(verify_identity(&bad).is_err());

        // A record claiming a different original key fails the id check.
        let (other, _) = generate_identity(Some(b"u"), "u", "").unwrap();
        let mut bad = r1.clone();
        bad.original_key = other.original_key;
        assert_eq!(verify_identity(&bad), Err(IdentityError::PeerIdMismatch));
    }

    #[test]
    fn record_encoding_round_trips() {
        let (r0, s0) = generate_identity(Some(b"enc"), "enc", "loc").unwrap();
        let (r1, _) = rotate_key(&r0, &s0, Some(b"enc1")).unwrap();
        for r in [&r0, &r1] {
            let bytes = r.encode();
            assert_eq!(&IdentityRecord::decode(&bytes).unwrap(), r);
        }
        assert!(IdentityRecord::decode(b"junk").is_err());
    }

    #[test]
    fn detached_signatures() {
        let (record, secret) = generate_identity(Some(b"sig"), "sig", "").unwrap();
        let sig = sign(&secret, b"hello");
        assert!(verify(&record, b"hello", &sig));
        assert!(!verify(&record, b"hellp", &sig));
    }

    #[test]
    fn handle_rules() {
        assert!(generate_identity(Some(b"h"), "", "").is_err());
        assert!(generate_identity(Some(b"h"), "has space", "").is_err());
        assert!(generate_identity(Some(b"h"), "has:colon", "").is_err());
        assert!(generate_identity(Some(b"h"), "has@at", "").is_err());
        assert!(generate_identity(Some(b"h"), "has.dot", "").is_err());
        assert!(generate_identity(Some(b"h"), &"x".repeat(65), "").is_err());
        assert!(generate_identity(Some(b"h"), &"x".repeat(64), "").is_ok());
    }

    #[test]
    fn handle_table_last_wins() {
        let (a, _) = generate_identity(Some(b"a"), "a", "").unwrap();
        let (b, _) = generate_identity(Some(b"b"), "b", "").unwrap();
        let t = HandleTable::new();
        let t = t.bind("jonny", a.peer_id).unwrap();
        assert_eq!(t.resolve("jonny").unwrap(), a.peer_id);
        let t = t.bind("jonny", b.peer_id).unwrap();
        assert_eq!(t.resolve("jonny").unwrap(), b.peer_id);
        assert!(t.resolve("nobody").is_err());
        assert!(t.bind("bad alias", a.peer_id).is_err());
    }

    #[test]
    fn reserved_ids_are_stable() {
        let t = HandleTable::with_reserved();
        assert_eq!(t.resolve("fed").unwrap(), PeerId::reserved("fed"));
        assert_eq!(PeerId::reserved("fed"), PeerId::reserved("fed"));
        assert_ne!(PeerId::reserved("fed"), PeerId::reserved("as"));
    }
}
