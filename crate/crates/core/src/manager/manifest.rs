//! Repository manifests: a root of trusted keys with a signing threshold and
//! a signed targets list mapping plugin names to hashes and maximum
//! capabilities.
//!
//! `root.json` holds the [`Root`] object directly. `targets.json` holds
//! `{"signatures": [...], "signed": {...}}`; signatures cover the canonical
//! bytes of `signed`, which must also be exactly how it appears in the file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use ed25519_dalek::{Signature, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::hexser::{Hex32, Hex64};
use super::keys::{key_id_of, KeyPair};
use super::package::peek_capability_mask;
use crate::canonical;

pub const HASH_ALG: &str = "sha256";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{role} expired at {expires}")]
    Expired { role: &'static str, expires: String },
    #[error("{valid} valid signatures from distinct root keys, threshold is {threshold}")]
    InsufficientSignatures { valid: usize, threshold: u32 },
    #[error("signature by key {0} which is not a root key")]
    UnknownKeyId(String),
    #[error("signed targets are not in canonical form")]
    CanonicalizationMismatch,
    #[error("invalid root: {0}")]
    InvalidRoot(String),
    #[error("unsupported hash algorithm {0:?}")]
    UnsupportedHashAlg(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResolveError {
    #[error("no target named {0:?}")]
    UnknownTarget(String),
    #[error("hash mismatch: {0}")]
    HashMismatch(String),
    #[error("package requests capabilities {requested:#x}, target allows {allowed:#x}")]
    CapabilityEscalation { requested: u32, allowed: u32 },
    #[error("target bytes are not a plugin package")]
    NotAPackage,
}

/// Timestamps are RFC 3339 UTC to the second, e.g. `2030-01-01T00:00:00Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub DateTime<Utc>);

impl Timestamp {
    pub fn now() -> Timestamp {
        Timestamp::from_unix(Utc::now().timestamp())
    }

    pub fn from_unix(secs: i64) -> Timestamp {
        Timestamp(Utc.timestamp_opt(secs, 0).single().expect("timestamp in range"))
    }

    pub fn unix(&self) -> i64 {
        self.0.timestamp()
    }

    pub fn plus_secs(&self, secs: i64) -> Timestamp {
        Timestamp::from_unix(self.unix() + secs)
    }
}

impl std::fmt::Display for Timestamp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0.to_rfc3339_opts(SecondsFormat::Secs, true))
    }
}

impl std::str::FromStr for Timestamp {
    type Err = String;
    fn from_str(s: &str) -> Result<Timestamp, String> {
        let t = DateTime::parse_from_rfc3339(s).map_err(|e| format!("{s:?}: {e}"))?;
        let t = Timestamp(t.with_timezone(&Utc));
        if t.to_string() != s {
            return Err(format!("{s:?} is not of the form YYYY-MM-DDTHH:MM:SSZ"));
        }
        Ok(t)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Root {
    pub version: u64,
    pub expires: Timestamp,
    pub keys: BTreeMap<Hex32, Hex32>,
    pub threshold: u32,
}

impl Root {
    pub fn new(keys: &[VerifyingKey], threshold: u32, expires: Timestamp) -> Root {
        Root {
            version: 1,
            expires,
            keys: keys.iter().map(|k| (Hex32(key_id_of(k)), Hex32(k.to_bytes()))).collect(),
            threshold,
        }
    }

    fn validate(&self) -> Result<BTreeMap<[u8; 32], VerifyingKey>, ManifestError> {
        if self.threshold == 0 || self.threshold as usize > self.keys.len() {
            return Err(ManifestError::InvalidRoot(format!(
                "threshold {} with {} keys",
                self.threshold,
                self.keys.len()
            )));
        }
        let mut out = BTreeMap::new();
        for (id, pk) in &self.keys {
            let vk = VerifyingKey::from_bytes(&pk.0)
                .map_err(|_| ManifestError::InvalidRoot(format!("key {id} is not a valid public key")))?;
            if key_id_of(&vk) != id.0 {
                return Err(ManifestError::InvalidRoot(format!("key id {id} does not match its public key")));
            }
            out.insert(id.0, vk);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetInfo {
    pub length: u64,
    pub hash: Hex32,
    pub max_capabilities: u32,
}

impl TargetInfo {
    pub fn for_bytes(bytes: &[u8], max_capabilities: u32) -> TargetInfo {
        TargetInfo { length: bytes.len() as u64, hash: Hex32(Sha256::digest(bytes).into()), max_capabilities }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Targets {
    pub version: u64,
    pub expires: Timestamp,
    pub hash_alg: String,
    pub targets: BTreeMap<String, TargetInfo>,
}

impl Targets {
    pub fn new(expires: Timestamp) -> Targets {
        Targets { version: 1, expires, hash_alg: HASH_ALG.into(), targets: BTreeMap::new() }
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical::to_vec(self).expect("targets serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignatureEntry {
    pub key_id: Hex32,
    pub sig: Hex64,
}

#[derive(Serialize)]
struct TargetsFileOut<'a> {
    signatures: &'a [SignatureEntry],
    signed: &'a Targets,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetsFileIn<'a> {
    signatures: Vec<SignatureEntry>,
    #[serde(borrow)]
    signed: &'a RawValue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepoManifest {
    pub root: Root,
    pub targets: Targets,
    pub signatures: Vec<SignatureEntry>,
    /// `signed` exactly as it appeared in the loaded file.
    pub signed_raw: Option<String>,
}

impl RepoManifest {
    pub fn new(root: Root, targets: Targets) -> RepoManifest {
        RepoManifest { root, targets, signatures: Vec::new(), signed_raw: None }
    }

    /// Adds (or replaces) the signature by `key` over the current targets.
    pub fn sign(&mut self, key: &KeyPair) {
        let id = Hex32(key.key_id());
        self.signatures.retain(|s| s.key_id != id);
        self.signatures.push(SignatureEntry { key_id: id, sig: Hex64(key.sign(&self.targets.canonical_bytes())) });
        self.signatures.sort_by_key(|a| a.key_id);
        self.signed_raw = None;
    }

    pub fn root_json(&self) -> Vec<u8> {
        canonical::to_vec(&self.root).expect("root serializes")
    }

    pub fn targets_json(&self) -> Vec<u8> {
        canonical::to_vec(&TargetsFileOut { signatures: &self.signatures, signed: &self.targets })
            .expect("targets serialize")
    }

    pub fn parse(root_json: &[u8], targets_json: &[u8]) -> Result<RepoManifest, ManifestError> {
        let root: Root = serde_json::from_slice(root_json)?;
        let file: TargetsFileIn = serde_json::from_slice(targets_json)?;
        let targets: Targets = serde_json::from_str(file.signed.get())?;
        Ok(RepoManifest { root, targets, signatures: file.signatures, signed_raw: Some(file.signed.get().to_string()) })
    }

    pub fn load(dir: &Path) -> Result<RepoManifest, ManifestError> {
        RepoManifest::parse(&fs::read(dir.join("root.json"))?, &fs::read(dir.join("targets.json"))?)
    }

    pub fn save(&self, dir: &Path) -> Result<(), ManifestError> {
        fs::write(dir.join("root.json"), self.root_json())?;
        fs::write(dir.join("targets.json"), self.targets_json())?;
        Ok(())
    }
}

/// Checks, in order: canonical form, root sanity, expiry of both roles, and
/// a threshold of distinct valid root-key signatures over the targets.
pub fn verify_manifest(m: &RepoManifest, now: Timestamp) -> Result<(), ManifestError> {
    let canonical = m.targets.canonical_bytes();
    if let Some(raw) = &m.signed_raw {
        if raw.as_bytes() != canonical.as_slice() {
            return Err(ManifestError::CanonicalizationMismatch);
        }
    }
    let keys = m.root.validate()?;
    if m.targets.hash_alg != HASH_ALG {
        return Err(ManifestError::UnsupportedHashAlg(m.targets.hash_alg.clone()));
    }
    for (role, expires) in [("root", m.root.expires), ("targets", m.targets.expires)] {
        if expires <= now {
            return Err(ManifestError::Expired { role, expires: expires.to_string() });
        }
    }
    let mut valid = BTreeSet::new();
    for s in &m.signatures {
        let key = keys.get(&s.key_id.0).ok_or_else(|| ManifestError::UnknownKeyId(s.key_id.to_string()))?;
        if key.verify_strict(&canonical, &Signature::from_bytes(&s.sig.0)).is_ok() {
            valid.insert(s.key_id.0);
        }
    }
    if valid.len() < m.root.threshold as usize {
        return Err(ManifestError::InsufficientSignatures { valid: valid.len(), threshold: m.root.threshold });
    }
    Ok(())
}

/// Matches package bytes against a target entry of a verified manifest.
pub fn resolve_plugin<'m>(m: &'m RepoManifest, name: &str, bytes: &[u8]) -> Result<&'m TargetInfo, ResolveError> {
    let t = m.targets.targets.get(name).ok_or_else(|| ResolveError::UnknownTarget(name.to_string()))?;
    if bytes.len() as u64 != t.length {
        return Err(ResolveError::HashMismatch(format!("length {} != expected {}", bytes.len(), t.length)));
    }
    let digest: [u8; 32] = Sha256::digest(bytes).into();
    if digest != t.hash.0 {
        return Err(ResolveError::HashMismatch(format!("sha256 {} != expected {}", hex::encode(digest), t.hash)));
    }
    let requested = peek_capability_mask(bytes).ok_or(ResolveError::NotAPackage)?;
    if requested & !t.max_capabilities != 0 {
        return Err(ResolveError::CapabilityEscalation { requested, allowed: t.max_capabilities });
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(n: u8) -> Vec<KeyPair> {
        (0..n).map(|i| KeyPair::from_seed([i + 1; 32])).collect()
    }

    fn t0() -> Timestamp {
        "2030-01-01T00:00:00Z".parse().unwrap()
    }

    fn manifest(ks: &[KeyPair], threshold: u32) -> RepoManifest {
        let pubs: Vec<_> = ks.iter().map(|k| k.public()).collect();
        let mut targets = Targets::new(t0().plus_secs(3600));
        targets.targets.insert("p".into(), TargetInfo::for_bytes(b"FANPxxxx", 0b1));
        RepoManifest::new(Root::new(&pubs, threshold, t0().plus_secs(3600)), targets)
    }

    #[test]
    fn two_of_three() {
        let ks = keys(3);
        let mut m = manifest(&ks, 2);
        m.sign(&ks[0]);
        assert!(matches!(verify_manifest(&m, t0()), Err(ManifestError::InsufficientSignatures { valid: 1, .. })));
        m.sign(&ks[2]);
        verify_manifest(&m, t0()).unwrap();
    }

    #[test]
    fn duplicate_signature_not_counted() {
        let ks = keys(3);
        let mut m = manifest(&ks, 2);
        m.sign(&ks[0]);
        let dup = m.signatures[0].clone();
        m.signatures.push(dup);
        assert!(matches!(verify_manifest(&m, t0()), Err(ManifestError::InsufficientSignatures { valid: 1, .. })));
    }

    #[test]
    fn expiry_boundary() {
        let ks = keys(1);
        let mut m = manifest(&ks, 1);
        m.sign(&ks[0]);
        let expires = m.targets.expires;
        verify_manifest(&m, expires.plus_secs(-1)).unwrap();
        assert!(matches!(verify_manifest(&m, expires), Err(ManifestError::Expired { .. })));
        assert!(matches!(verify_manifest(&m, expires.plus_secs(1)), Err(ManifestError::Expired { .. })));
    }

    #[test]
    fn unknown_key_rejected() {
        let ks = keys(2);
        let mut m = manifest(&ks[..1], 1);
        m.sign(&ks[0]);
        m.sign(&ks[1]);
        assert!(matches!(verify_manifest(&m, t0()), Err(ManifestError::UnknownKeyId(_))));
    }

    #[test]
    fn file_round_trip_and_canonical_check() {
        let ks = keys(2);
        let mut m = manifest(&ks, 2);
        m.sign(&ks[0]);
        m.sign(&ks[1]);
        let parsed = RepoManifest::parse(&m.root_json(), &m.targets_json()).unwrap();
        verify_manifest(&parsed, t0()).unwrap();

        let pretty = String::from_utf8(m.targets_json()).unwrap().replace("\"version\":1", "\"version\": 1");
        let parsed = RepoManifest::parse(&m.root_json(), pretty.as_bytes()).unwrap();
        assert!(matches!(verify_manifest(&parsed, t0()), Err(ManifestError::CanonicalizationMismatch)));
    }

    #[test]
    fn tampered_targets_insufficient() {
        let ks = keys(1);
        let mut m = manifest(&ks, 1);
        m.sign(&ks[0]);
        m.targets.targets.get_mut("p").unwrap().max_capabilities = 0xff;
        assert!(matches!(verify_manifest(&m, t0()), Err(ManifestError::InsufficientSignatures { .. })));
    }

    #[test]
    fn bad_roots() {
        let ks = keys(2);
        let mut m = manifest(&ks, 3);
        m.sign(&ks[0]);
        assert!(matches!(verify_manifest(&m, t0()), Err(ManifestError::InvalidRoot(_))));
        let mut m = manifest(&ks, 1);
        let (id, pk) = m.root.keys.pop_first().unwrap();
        let mut id2 = id;
        id2.0[0] ^= 1;
        m.root.keys.insert(id2, pk);
        assert!(matches!(verify_manifest(&m, t0()), Err(ManifestError::InvalidRoot(_))));
    }

    #[test]
    fn resolve_errors() {
        let m = manifest(&keys(1), 1);
        assert_eq!(resolve_plugin(&m, "q", b"x"), Err(ResolveError::UnknownTarget("q".into())));
        assert!(
            matches!(resolve_plugin(&m, "p", b"FANPxxx"), Err(ResolveError::HashMismatch(d)) if d.contains("length"))
        );
        assert!(matches!(resolve_plugin(&m, "p", b"FANPxxxy"), Err(ResolveError::HashMismatch(_))));
    }

    #[test]
    fn timestamps_strict() {
        assert!("2030-01-01T00:00:00+00:00".parse::<Timestamp>().is_err());
        assert!("2030-01-01T00:00:00.5Z".parse::<Timestamp>().is_err());
        assert_eq!(t0().to_string(), "2030-01-01T00:00:00Z");
    }
}
