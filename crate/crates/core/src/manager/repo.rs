//! On-disk plugin repository: `root.json`, `targets.json` and the package
//! files under `targets/`.

use std::fs;
use std::path::{Path, PathBuf};

use super::keys::KeyPair;
use super::manifest::{ManifestError, RepoManifest, Root, TargetInfo, Targets, Timestamp};
use super::package::peek_name;

pub const TARGETS_DIR: &str = "targets";

pub fn target_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(TARGETS_DIR).join(format!("{name}.fanp"))
}

/// Creates an empty repository trusting `keys` with the given threshold.
pub fn init(dir: &Path, keys: &[KeyPair], threshold: u32, expires: Timestamp) -> Result<RepoManifest, ManifestError> {
    fs::create_dir_all(dir.join(TARGETS_DIR))?;
    let pubs: Vec<_> = keys.iter().map(|k| k.public()).collect();
    let m = RepoManifest::new(Root::new(&pubs, threshold, expires), Targets::new(expires));
    m.save(dir)?;
    Ok(m)
}

/// Adds (or replaces) a package. Bumps the targets version and clears
/// existing signatures, which no longer cover the new targets.
pub fn add(
    dir: &Path,
    package_bytes: &[u8],
    name: Option<&str>,
    max_capabilities: u32,
) -> Result<String, ManifestError> {
    let mut m = RepoManifest::load(dir)?;
    let name = match name {
        Some(n) => n.to_string(),
        None => peek_name(package_bytes).filter(|n| !n.is_empty()).ok_or_else(|| {
            ManifestError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, "cannot read package name"))
        })?,
    };
    fs::create_dir_all(dir.join(TARGETS_DIR))?;
    fs::write(target_path(dir, &name), package_bytes)?;
    m.targets.targets.insert(name.clone(), TargetInfo::for_bytes(package_bytes, max_capabilities));
    m.targets.version += 1;
    m.signatures.clear();
    m.signed_raw = None;
    m.save(dir)?;
    Ok(name)
}

pub fn set_expiry(dir: &Path, expires: Timestamp) -> Result<(), ManifestError> {
    let mut m = RepoManifest::load(dir)?;
    m.targets.expires = expires;
    m.targets.version += 1;
    m.signatures.clear();
    m.signed_raw = None;
    m.save(dir)
}

pub fn sign(dir: &Path, key: &KeyPair) -> Result<RepoManifest, ManifestError> {
    let mut m = RepoManifest::load(dir)?;
    m.sign(key);
    m.save(dir)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manager::manifest::{resolve_plugin, verify_manifest};

    #[test]
    fn init_add_sign_verify() {
        let dir = tempfile::tempdir().unwrap();
        let ks: Vec<_> = (1..=3u8).map(|i| KeyPair::from_seed([i; 32])).collect();
        let now: Timestamp = "2030-01-01T00:00:00Z".parse().unwrap();
        init(dir.path(), &ks, 2, now.plus_secs(86400)).unwrap();
        let mut bytes = b"FANP".to_vec();
        bytes.extend_from_slice(&[0u8; 60]);
        add(dir.path(), &bytes, Some("demo"), 0xff).unwrap();
        sign(dir.path(), &ks[0]).unwrap();
        let m = RepoManifest::load(dir.path()).unwrap();
        assert!(matches!(verify_manifest(&m, now), Err(ManifestError::InsufficientSignatures { .. })));
        sign(dir.path(), &ks[1]).unwrap();
        let m = RepoManifest::load(dir.path()).unwrap();
        verify_manifest(&m, now).unwrap();
        let stored = fs::read(target_path(dir.path(), "demo")).unwrap();
        resolve_plugin(&m, "demo", &stored).unwrap();
    }
}
