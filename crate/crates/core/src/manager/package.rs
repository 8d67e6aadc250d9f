//! `.fanp` plugin packages.
//!
//! Layout (little-endian):
//!
//! ```text
//! 0   magic "FANP"
//! 4   format_version u16
//! 6   flags u16                 bit0 = ephemeral-only
//! 8   name[32]                  NUL-padded UTF-8
//! 40  version u16 x3
//! 46  capability_mask u32
//! 50  feature_count u8, feature ids u8 x count
//!     entry_count u8, (event_id u16, pc u32) x count
//!     memory_size u32
//!     code_len u32, code
//!     signer_key_id[32]
//!     signature[64]             over every preceding byte
//! ```

use std::collections::BTreeSet;
use std::fmt;

use ed25519_dalek::Signature;
use thiserror::Error;

use super::keys::{KeyId, KeyPair, TrustStore};
use crate::abi::{EventKind, ALL_CAPABILITIES, HOST_TABLE_SIZE};
use crate::cell::FeatureId;
use crate::vm::{verify, ParseError, Program, VerifiedProgram, MAX_INSNS, MAX_MEMORY, MIN_MEMORY};

pub const MAGIC: &[u8; 4] = b"FANP";
pub const FORMAT_VERSION: u16 = 1;
pub const FLAG_EPHEMERAL_ONLY: u16 = 0x0001;
pub const NAME_LEN: usize = 32;
pub const TRAILER_LEN: usize = 32 + 64;
const KNOWN_FLAGS: u16 = FLAG_EPHEMERAL_ONLY;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PackageError {
    #[error("bad magic")]
    BadMagic,
    #[error("malformed package: {0}")]
    Malformed(String),
    #[error("signer not in trust store")]
    UnknownSigner,
    #[error("signature invalid")]
    SignatureInvalid,
    #[error("verifier rejected code: {0}")]
    VerifierRejected(String),
    #[error("unknown capability bits {0:#x}")]
    UnknownCapability(u32),
    #[error("name longer than {NAME_LEN} bytes or contains NUL")]
    BadName,
    #[error("code: {0}")]
    Code(#[from] ParseError),
    #[error("too many {0}")]
    TooMany(&'static str),
}

impl PackageError {
    fn malformed(msg: impl Into<String>) -> PackageError {
        PackageError::Malformed(msg.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Version {
    pub major: u16,
    pub minor: u16,
    pub patch: u16,
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.major, self.minor, self.patch)
    }
}

impl std::str::FromStr for Version {
    type Err = String;
    fn from_str(s: &str) -> Result<Version, String> {
        let parts: Vec<_> = s.split('.').collect();
        if parts.len() != 3 {
            return Err(format!("version {s:?} is not X.Y.Z"));
        }
        let n = |p: &str| p.parse::<u16>().map_err(|e| format!("version {s:?}: {e}"));
        Ok(Version { major: n(parts[0])?, minor: n(parts[1])?, patch: n(parts[2])? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entry {
    pub event_id: u16,
    pub pc: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackageHeader {
    pub flags: u16,
    pub name: String,
    pub version: Version,
    pub capability_mask: u32,
    pub feature_ids: Vec<FeatureId>,
    pub entries: Vec<Entry>,
    pub memory_size: u32,
}

impl PackageHeader {
    pub fn ephemeral_only(&self) -> bool {
        self.flags & FLAG_EPHEMERAL_ONLY != 0
    }

    /// Entry pc for `event`, ignoring unknown event ids.
    pub fn entry(&self, event: EventKind) -> Option<u32> {
        self.entries.iter().find(|e| e.event_id == event.id()).map(|e| e.pc)
    }
}

/// A fully authenticated package.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PluginPackage {
    pub format_version: u16,
    pub header: PackageHeader,
    pub program: VerifiedProgram,
    pub signer_key_id: KeyId,
    pub signature: [u8; 64],
}

impl PluginPackage {
    pub fn name(&self) -> &str {
        &self.header.name
    }

    pub fn capability_mask(&self) -> u32 {
        self.header.capability_mask
    }

    pub fn code(&self) -> Vec<u8> {
        self.program.program().to_bytes()
    }
}

/// Fixed header size for a package with `features` feature ids and
/// `entries` entries, excluding code and trailer.
pub fn header_len(features: usize, entries: usize) -> usize {
    51 + features + 1 + 6 * entries + 4 + 4
}

fn encode_unsigned(header: &PackageHeader, code: &[u8]) -> Result<Vec<u8>, PackageError> {
    let name = header.name.as_bytes();
    if name.len() > NAME_LEN || name.contains(&0) {
        return Err(PackageError::BadName);
    }
    let features = u8::try_from(header.feature_ids.len()).map_err(|_| PackageError::TooMany("feature ids"))?;
    let entries = u8::try_from(header.entries.len()).map_err(|_| PackageError::TooMany("entries"))?;
    let mut out = Vec::with_capacity(header_len(features.into(), entries.into()) + code.len() + TRAILER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header.flags.to_le_bytes());
    let mut name_buf = [0u8; NAME_LEN];
    name_buf[..name.len()].copy_from_slice(name);
    out.extend_from_slice(&name_buf);
    for v in [header.version.major, header.version.minor, header.version.patch] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&header.capability_mask.to_le_bytes());
    out.push(features);
    out.extend(header.feature_ids.iter().map(|f| f.get()));
    out.push(entries);
    for e in &header.entries {
        out.extend_from_slice(&e.event_id.to_le_bytes());
        out.extend_from_slice(&e.pc.to_le_bytes());
    }
    out.extend_from_slice(&header.memory_size.to_le_bytes());
    out.extend_from_slice(&(code.len() as u32).to_le_bytes());
    out.extend_from_slice(code);
    Ok(out)
}

/// Builds and signs a package. The code must pass the verifier and every
/// structural rule `parse_and_verify` enforces.
pub fn package(header: &PackageHeader, code: &[u8], key: &KeyPair) -> Result<Vec<u8>, PackageError> {
    let program = Program::parse(code)?;
    check_semantics(header, &program)?;
    let mut out = encode_unsigned(header, code)?;
    // Structural rules are shared with the parser.
    parse_layout(&{
        let mut probe = out.clone();
        probe.extend_from_slice(&[0u8; TRAILER_LEN]);
        probe
    })?;
    let sig = key.sign(&out);
    out.extend_from_slice(&key.key_id());
    out.extend_from_slice(&sig);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], PackageError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PackageError::malformed(format!("truncated at {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, PackageError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, PackageError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, PackageError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4")))
    }
}

struct Layout {
    format_version: u16,
    header: PackageHeader,
    code: Program,
    signed_len: usize,
    signer: KeyId,
    signature: [u8; 64],
}

fn parse_layout(bytes: &[u8]) -> Result<Layout, PackageError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(PackageError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let format_version = r.u16("format_version")?;
    if format_version != FORMAT_VERSION {
        return Err(PackageError::malformed(format!("unsupported format version {format_version}")));
    }
    let flags = r.u16("flags")?;
    if flags & !KNOWN_FLAGS != 0 {
        return Err(PackageError::malformed(format!("unknown flags {flags:#x}")));
    }
    let raw_name = r.take(NAME_LEN, "name")?;
    let name_len = raw_name.iter().position(|&b| b == 0).unwrap_or(NAME_LEN);
    if raw_name[name_len..].iter().any(|&b| b != 0) {
        return Err(PackageError::malformed("name has bytes after NUL"));
    }
    let name = std::str::from_utf8(&raw_name[..name_len])
        .map_err(|_| PackageError::malformed("name is not UTF-8"))?
        .to_string();
    let version = Version { major: r.u16("version")?, minor: r.u16("version")?, patch: r.u16("version")? };
    let capability_mask = r.u32("capability_mask")?;

    let feature_count = r.u8("feature_count")?;
    let mut feature_ids = Vec::with_capacity(feature_count.into());
    let mut seen = BTreeSet::new();
    for &id in r.take(feature_count.into(), "feature ids")? {
        let f = FeatureId::new(id).map_err(|e| PackageError::malformed(e.to_string()))?;
        if !seen.insert(f) {
            return Err(PackageError::malformed(format!("duplicate feature id {id}")));
        }
        feature_ids.push(f);
    }

    let entry_count = r.u8("entry_count")?;
    let mut entries = Vec::with_capacity(entry_count.into());
    for _ in 0..entry_count {
        entries.push(Entry { event_id: r.u16("entry")?, pc: r.u32("entry")? });
    }
    let mut events = BTreeSet::new();
    for e in &entries {
        if !events.insert(e.event_id) {
            return Err(PackageError::malformed(format!("duplicate entry for event {}", e.event_id)));
        }
    }
    if feature_ids.is_empty()
        && entries.iter().any(|e| EventKind::from_id(e.event_id).is_some_and(|k| !k.is_lifecycle()))
    {
        return Err(PackageError::malformed("feature cell entry without feature ids"));
    }

    let memory_size = r.u32("memory_size")?;
    if !(MIN_MEMORY..=MAX_MEMORY).contains(&(memory_size as usize)) {
        return Err(PackageError::malformed(format!("memory size {memory_size} out of range")));
    }
    let code_len = r.u32("code_len")? as usize;
    if code_len > MAX_INSNS * 8 {
        return Err(PackageError::malformed("code too large"));
    }
    let code = Program::parse(r.take(code_len, "code")?).map_err(|e| PackageError::malformed(e.to_string()))?;
    let signed_len = r.pos;
    let signer: KeyId = r.take(32, "signer_key_id")?.try_into().expect("32");
    let signature: [u8; 64] = r.take(64, "signature")?.try_into().expect("64");
    if r.pos != bytes.len() {
        return Err(PackageError::malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Layout {
        format_version,
        header: PackageHeader { flags, name, version, capability_mask, feature_ids, entries, memory_size },
        code,
        signed_len,
        signer,
        signature,
    })
}

fn check_semantics(header: &PackageHeader, code: &Program) -> Result<(), PackageError> {
    let report = verify(code, HOST_TABLE_SIZE);
    if !report.is_ok() {
        return Err(PackageError::VerifierRejected(report.to_string()));
    }
    if let Some(e) = header.entries.iter().find(|e| e.pc as usize >= code.len()) {
        return Err(PackageError::VerifierRejected(format!(
            "entry for event {} at pc {} beyond {} instructions",
            e.event_id,
            e.pc,
            code.len()
        )));
    }
    if header.capability_mask & !ALL_CAPABILITIES != 0 {
        return Err(PackageError::UnknownCapability(header.capability_mask & !ALL_CAPABILITIES));
    }
    Ok(())
}

/// Authenticates and validates a package. Checks run in a fixed order:
/// magic, layout, signer, signature, verifier, capabilities.
pub fn parse_and_verify(bytes: &[u8], trusted: &TrustStore) -> Result<PluginPackage, PackageError> {
    let layout = parse_layout(bytes)?;
    let key = trusted.get(&layout.signer).ok_or(PackageError::UnknownSigner)?;
    let sig = Signature::from_bytes(&layout.signature);
    key.verify_strict(&bytes[..layout.signed_len], &sig).map_err(|_| PackageError::SignatureInvalid)?;
    check_semantics(&layout.header, &layout.code)?;
    for e in &layout.header.entries {
        if EventKind::from_id(e.event_id).is_none() {
            log::warn!("package {:?}: ignoring entry for unknown event {}", layout.header.name, e.event_id);
        }
    }
    let program = VerifiedProgram::new(layout.code, HOST_TABLE_SIZE)
        .map_err(|r| PackageError::VerifierRejected(r.to_string()))?;
    Ok(PluginPackage {
        format_version: layout.format_version,
        header: layout.header,
        program,
        signer_key_id: layout.signer,
        signature: layout.signature,
    })
}

/// Reads only the capability mask, without authenticating anything.
pub fn peek_capability_mask(bytes: &[u8]) -> Option<u32> {
    if bytes.len() < 50 || &bytes[..4] != MAGIC {
        return None;
    }
    Some(u32::from_le_bytes(bytes[46..50].try_into().ok()?))
}

/// Reads the package name without authenticating anything.
pub fn peek_name(bytes: &[u8]) -> Option<String> {
    if bytes.len() < 40 || &bytes[..4] != MAGIC {
        return None;
    }
    let raw = &bytes[8..40];
    let end = raw.iter().position(|&b| b == 0).unwrap_or(NAME_LEN);
    std::str::from_utf8(&raw[..end]).ok().map(str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolkit::assemble;

    fn header(code_entries: Vec<Entry>) -> PackageHeader {
        PackageHeader {
            flags: 0,
            name: "demo".into(),
            version: Version { major: 1, minor: 2, patch: 3 },
            capability_mask: 0b1,
            feature_ids: vec![FeatureId::new(40).unwrap()],
            entries: code_entries,
            memory_size: 4096,
        }
    }

    fn key() -> KeyPair {
        KeyPair::from_seed([7u8; 32])
    }

    fn two_insn() -> Vec<u8> {
        assemble("movi r0, 0\nexit").unwrap()
    }

    fn entries() -> Vec<Entry> {
        vec![Entry { event_id: EventKind::OnFeatureCell.id(), pc: 0 }]
    }

    #[test]
    fn round_trip() {
        let bytes = package(&header(entries()), &two_insn(), &key()).unwrap();
        let trust = TrustStore::new().with(key().public());
        let p = parse_and_verify(&bytes, &trust).unwrap();
        assert_eq!(p.header, header(entries()));
        assert_eq!(p.code(), two_insn());
        assert_eq!(p.signer_key_id, key().key_id());
    }

    #[test]
    fn size_is_sum_of_layout() {
        let bytes = package(&header(entries()), &two_insn(), &key()).unwrap();
        // 51 fixed + 1 feature + 1 entry count + 6 per entry + 4 memory + 4 code_len
        assert_eq!(header_len(1, 1), 51 + 1 + 1 + 6 + 4 + 4);
        assert_eq!(bytes.len(), header_len(1, 1) + 16 + 96);
    }

    #[test]
    fn flipped_byte_rejected() {
        let bytes = package(&header(entries()), &two_insn(), &key()).unwrap();
        let trust = TrustStore::new().with(key().public());
        let mut bad = bytes.clone();
        bad[60] ^= 0x01; // inside the code
        assert_eq!(parse_and_verify(&bad, &trust), Err(PackageError::SignatureInvalid));
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() ^= 0x80;
        assert_eq!(parse_and_verify(&bad, &trust), Err(PackageError::SignatureInvalid));
    }

    #[test]
    fn unknown_signer() {
        let bytes = package(&header(entries()), &two_insn(), &key()).unwrap();
        let other = TrustStore::new().with(KeyPair::from_seed([8u8; 32]).public());
        assert_eq!(parse_and_verify(&bytes, &other), Err(PackageError::UnknownSigner));
    }

    #[test]
    fn signature_checked_before_verifier() {
        // Hand-sign a package whose code fails verification.
        let bad_code = assemble("movi r0, 1").unwrap();
        let mut raw = encode_unsigned(&header(entries()), &bad_code).unwrap();
        let sig = key().sign(&raw);
        raw.extend_from_slice(&key().key_id());
        raw.extend_from_slice(&sig);
        let trust = TrustStore::new().with(key().public());
        assert!(matches!(parse_and_verify(&raw, &trust), Err(PackageError::VerifierRejected(_))));
        let mut tampered = raw.clone();
        tampered[70] ^= 1;
        assert_eq!(parse_and_verify(&tampered, &trust), Err(PackageError::SignatureInvalid));
    }

    #[test]
    fn unknown_capability_bits() {
        let mut h = header(entries());
        h.capability_mask = 1 << 9;
        assert_eq!(package(&h, &two_insn(), &key()), Err(PackageError::UnknownCapability(1 << 9)));
        let mut raw = encode_unsigned(&h, &two_insn()).unwrap();
        let sig = key().sign(&raw);
        raw.extend_from_slice(&key().key_id());
        raw.extend_from_slice(&sig);
        let trust = TrustStore::new().with(key().public());
        assert_eq!(parse_and_verify(&raw, &trust), Err(PackageError::UnknownCapability(1 << 9)));
    }

    #[test]
    fn packaging_errors() {
        let mut h = header(entries());
        h.name = "x".repeat(33);
        assert_eq!(package(&h, &two_insn(), &key()), Err(PackageError::BadName));
        let h = header(vec![Entry { event_id: 2, pc: 5 }]);
        assert!(matches!(package(&h, &two_insn(), &key()), Err(PackageError::VerifierRejected(_))));
        assert!(matches!(package(&header(entries()), &[0u8; 12], &key()), Err(PackageError::Code(_))));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let trust = TrustStore::new().with(key().public());
        assert_eq!(parse_and_verify(b"NOPE....", &trust), Err(PackageError::BadMagic));
        let bytes = package(&header(entries()), &two_insn(), &key()).unwrap();
        assert!(matches!(parse_and_verify(&bytes[..bytes.len() - 1], &trust), Err(PackageError::Malformed(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(parse_and_verify(&longer, &trust), Err(PackageError::Malformed(_))));
    }

    #[test]
    fn peeks() {
        let bytes = package(&header(entries()), &two_insn(), &key()).unwrap();
        assert_eq!(peek_capability_mask(&bytes), Some(1));
        assert_eq!(peek_name(&bytes).as_deref(), Some("demo"));
    }
}
