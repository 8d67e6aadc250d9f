//! Ed25519 signing keys, key ids and trust stores.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand_core::{CryptoRngCore, OsRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::hexser::Hex32;
use crate::canonical;

pub type KeyId = [u8; 32];

#[derive(Debug, Error)]
pub enum KeyError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("key file has no secret key")]
    NoSecret,
    #[error("invalid public key")]
    BadPublicKey,
    #[error("key id does not match public key")]
    KeyIdMismatch,
}

/// Key ids are the SHA-256 of the 32-byte public key.
pub fn key_id_of(public: &VerifyingKey) -> KeyId {
    Sha256::digest(public.as_bytes()).into()
}

#[derive(Debug, Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn generate() -> KeyPair {
        KeyPair::generate_with(&mut OsRng)
    }

    pub fn generate_with<R: CryptoRngCore + ?Sized>(rng: &mut R) -> KeyPair {
        KeyPair { signing: SigningKey::generate(rng) }
    }

    pub fn from_seed(seed: [u8; 32]) -> KeyPair {
        KeyPair { signing: SigningKey::from_bytes(&seed) }
    }

    pub fn public(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    pub fn key_id(&self) -> KeyId {
        key_id_of(&self.public())
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; 64] {
        self.signing.sign(msg).to_bytes()
    }

    pub fn seed(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn to_file(&self) -> KeyFile {
        KeyFile {
            key_id: Hex32(self.key_id()),
            public_key: Hex32(self.public().to_bytes()),
            secret_key: Some(Hex32(self.seed())),
        }
    }

    pub fn load(path: &Path) -> Result<KeyPair, KeyError> {
        let file: KeyFile = serde_json::from_slice(&fs::read(path)?)?;
        let secret = file.secret_key.ok_or(KeyError::NoSecret)?;
        let pair = KeyPair::from_seed(secret.0);
        if pair.key_id() != file.key_id.0 || pair.public().to_bytes() != file.public_key.0 {
            return Err(KeyError::KeyIdMismatch);
        }
        Ok(pair)
    }

    /// Writes `path` (secret) and `path.pub` (public only).
    pub fn save(&self, path: &Path) -> Result<(), KeyError> {
        let file = self.to_file();
        fs::write(path, canonical::to_vec(&file)?)?;
        fs::write(pub_path(path), canonical::to_vec(&file.public())?)?;
        Ok(())
    }
}

pub fn pub_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".pub");
    s.into()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct KeyFile {
    pub key_id: Hex32,
    pub public_key: Hex32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secret_key: Option<Hex32>,
}

impl KeyFile {
    pub fn public(&self) -> KeyFile {
        KeyFile { secret_key: None, ..self.clone() }
    }

    pub fn verifying_key(&self) -> Result<VerifyingKey, KeyError> {
        let vk = verifying_key(&self.public_key.0)?;
        if key_id_of(&vk) != self.key_id.0 {
            return Err(KeyError::KeyIdMismatch);
        }
        Ok(vk)
    }
}

pub fn verifying_key(bytes: &[u8; 32]) -> Result<VerifyingKey, KeyError> {
    VerifyingKey::from_bytes(bytes).map_err(|_| KeyError::BadPublicKey)
}

/// Public keys a node accepts plugin signatures from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrustStore {
    keys: BTreeMap<KeyId, VerifyingKey>,
}

impl TrustStore {
    pub fn new() -> TrustStore {
        TrustStore::default()
    }

    pub fn add(&mut self, key: VerifyingKey) -> KeyId {
        let id = key_id_of(&key);
        self.keys.insert(id, key);
        id
    }

    pub fn with(mut self, key: VerifyingKey) -> TrustStore {
        self.add(key);
        self
    }

    pub fn get(&self, id: &KeyId) -> Option<&VerifyingKey> {
        self.keys.get(id)
    }

    pub fn contains(&self, id: &KeyId) -> bool {
        self.keys.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key_ids(&self) -> impl Iterator<Item = &KeyId> {
        self.keys.keys()
    }

    /// Loads every `*.pub` key file in `dir`.
    pub fn load_dir(dir: &Path) -> Result<TrustStore, KeyError> {
        let mut store = TrustStore::new();
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "pub"))
            .collect();
        paths.sort();
        for p in paths {
            let file: KeyFile = serde_json::from_slice(&fs::read(&p)?)?;
            store.add(file.verifying_key()?);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dev.key");
        let k = KeyPair::from_seed([9u8; 32]);
        k.save(&path).unwrap();
        assert_eq!(KeyPair::load(&path).unwrap().key_id(), k.key_id());
        let store = TrustStore::load_dir(dir.path()).unwrap();
        assert_eq!(store.len(), 1);
        assert!(store.contains(&k.key_id()));
        assert!(matches!(KeyPair::load(&pub_path(&path)), Err(KeyError::NoSecret)));
    }

    #[test]
    fn tampered_key_id_rejected() {
        let mut f = KeyPair::from_seed([1u8; 32]).to_file().public();
        f.key_id.0[0] ^= 1;
        assert!(matches!(f.verifying_key(), Err(KeyError::KeyIdMismatch)));
    }
}
