//! Envelope encryption: every payload gets a fresh AES-256-GCM data key,
//! and the data key is itself sealed under a master key held by the key
//! service.

use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use aes_gcm::aead::{Aead, AeadCore, KeyInit, OsRng, Payload};
use aes_gcm::{Aes256Gcm, Key, Nonce};
use rand::RngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{KvStore, StoreError};

const MAGIC: &[u8; 4] = b"ENV1";
const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;
const KEY_LEN: usize = 32;
const WRAPPED_LEN: usize = NONCE_LEN + KEY_LEN + TAG_LEN;

#[derive(Debug, Error)]
pub enum EnvelopeError {
    #[error("ciphertext sealed under key {found:?}, expected {expected:?}")]
    KeyMismatch { expected: String, found: String },
    #[error("authenticated decryption failed")]
    Integrity,
    #[error("malformed envelope: {0}")]
    Malformed(&'static str),
    #[error("unknown master key {0:?}")]
    UnknownKey(String),
    #[error("key file: {0}")]
    KeyFile(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("payload encoding: {0}")]
    Encoding(#[from] serde_json::Error),
}

#[derive(Clone)]
pub struct MasterKey {
    key_id: String,
    bytes: [u8; KEY_LEN],
}

impl std::fmt::Debug for MasterKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MasterKey")
            .field("key_id", &self.key_id)
            .finish_non_exhaustive()
    }
}

impl MasterKey {
    pub fn generate(key_id: impl Into<String>) -> Self {
        let mut bytes = [0u8; KEY_LEN];
        OsRng.fill_bytes(&mut bytes);
        Self {
            key_id: key_id.into(),
            bytes,
        }
    }

    pub fn from_bytes(key_id: impl Into<String>, bytes: [u8; KEY_LEN]) -> Self {
        Self {
            key_id: key_id.into(),
            bytes,
        }
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    fn cipher(&self) -> Aes256Gcm {
        Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&self.bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvelopeCiphertext {
    /// Nonce followed by the sealed data key.
    pub wrapped_data_key: Vec<u8>,
    pub nonce: Vec<u8>,
    pub ciphertext: Vec<u8>,
    pub key_id: String,
}

impl EnvelopeCiphertext {
    /// `ENV1 | u16 key_id len | key_id | u16 wrapped len | wrapped | nonce | ciphertext`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            8 + self.key_id.len() + self.wrapped_data_key.len() + self.nonce.len() + self.ciphertext.len(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.key_id.len() as u16).to_be_bytes());
        out.extend_from_slice(self.key_id.as_bytes());
        out.extend_from_slice(&(self.wrapped_data_key.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.wrapped_data_key);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, EnvelopeError> {
        let mut rest = buf
            .strip_prefix(MAGIC.as_slice())
            .ok_or(EnvelopeError::Malformed("bad magic"))?;
        let mut take = |n: usize| -> Result<&[u8], EnvelopeError> {
            if rest.len() < n {
                return Err(EnvelopeError::Malformed("truncated"));
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(head)
        };
        let id_len = u16::from_be_bytes(take(2)?.try_into().unwrap()) as usize;
        let key_id = std::str::from_utf8(take(id_len)?)
            .map_err(|_| EnvelopeError::Malformed("key id not utf-8"))?
            .to_owned();
        let wrapped_len = u16::from_be_bytes(take(2)?.try_into().unwrap()) as usize;
        let wrapped_data_key = take(wrapped_len)?.to_vec();
        let nonce = take(NONCE_LEN)?.to_vec();
        let ciphertext = rest.to_vec();
        Ok(Self {
            wrapped_data_key,
            nonce,
            ciphertext,
            key_id,
        })
    }
}

pub fn envelope_encrypt(plaintext: &[u8], master: &MasterKey) -> EnvelopeCiphertext {
    let data_key = Aes256Gcm::generate_key(&mut OsRng);
    let aad = master.key_id.as_bytes();

    let wrap_nonce = Aes256Gcm::generate_nonce(&mut OsRng);
    let sealed_key = master
        .cipher()
        .encrypt(&wrap_nonce, Payload { msg: data_key.as_slice(), aad })
        .expect("aes-gcm encryption of a 32-byte key cannot fail");
    let mut wrapped_data_key = wrap_nonce.to_vec();
    wrapped_data_key.extend_from_slice(&sealed_key);

    let nonce = Aes256Gcm::generate_nonce(&mut OsRng);
    let ciphertext = Aes256Gcm::new(&data_key)
        .encrypt(&nonce, Payload { msg: plaintext, aad })
        .expect("aes-gcm encryption failed");

    EnvelopeCiphertext {
        wrapped_data_key,
        nonce: nonce.to_vec(),
        ciphertext,
        key_id: master.key_id.clone(),
    }
}

pub fn envelope_decrypt(ct: &EnvelopeCiphertext, master: &MasterKey) -> Result<Vec<u8>, EnvelopeError> {
    if ct.key_id != master.key_id {
        return Err(EnvelopeError::KeyMismatch {
            expected: master.key_id.clone(),
            found: ct.key_id.clone(),
        });
    }
    if ct.wrapped_data_key.len() != WRAPPED_LEN {
        return Err(EnvelopeError::Malformed("wrapped data key length"));
    }
    if ct.nonce.len() != NONCE_LEN {
        return Err(EnvelopeError::Malformed("nonce length"));
    }
    let aad = ct.key_id.as_bytes();
    let (wrap_nonce, sealed_key) = ct.wrapped_data_key.split_at(NONCE_LEN);
    let data_key = master
        .cipher()
        .decrypt(Nonce::from_slice(wrap_nonce), Payload { msg: sealed_key, aad })
        .map_err(|_| EnvelopeError::Integrity)?;
    Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&data_key))
        .decrypt(Nonce::from_slice(&ct.nonce), Payload { msg: &ct.ciphertext, aad })
        .map_err(|_| EnvelopeError::Integrity)
}

#[derive(Serialize, Deserialize)]
struct KeyFile {
    key_id: String,
    key_hex: String,
}

/// Local stand-in for a managed key service. Holds the active master key;
/// key generation is serialized behind a mutex.
#[derive(Debug)]
pub struct KeyService {
    active: Mutex<MasterKey>,
}

impl KeyService {
    pub fn ephemeral() -> Self {
        Self {
            active: Mutex::new(MasterKey::generate("mk-ephemeral")),
        }
    }

    pub fn with_key(key: MasterKey) -> Self {
        Self {
            active: Mutex::new(key),
        }
    }

    /// Loads the master key from `path`, creating one if the file is absent.
    pub fn open_or_create(path: &Path) -> Result<Self, EnvelopeError> {
        let key = match fs::read_to_string(path) {
            Ok(s) => {
                let kf: KeyFile = serde_json::from_str(&s)?;
                let raw = hex::decode(&kf.key_hex).map_err(|e| EnvelopeError::KeyFile(e.to_string()))?;
                let bytes: [u8; KEY_LEN] = raw
                    .try_into()
                    .map_err(|_| EnvelopeError::KeyFile("key must be 32 bytes".into()))?;
                MasterKey::from_bytes(kf.key_id, bytes)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let mut id = [0u8; 4];
                OsRng.fill_bytes(&mut id);
                let key = MasterKey::generate(format!("mk-{}", hex::encode(id)));
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|e| EnvelopeError::KeyFile(e.to_string()))?;
                }
                let kf = KeyFile {
                    key_id: key.key_id.clone(),
                    key_hex: hex::encode(key.bytes),
                };
                fs::write(path, serde_json::to_vec_pretty(&kf)?).map_err(|e| EnvelopeError::KeyFile(e.to_string()))?;
                key
            }
            Err(e) => return Err(EnvelopeError::KeyFile(e.to_string())),
        };
        Ok(Self::with_key(key))
    }

    pub fn master(&self) -> MasterKey {
        self.active.lock().unwrap().clone()
    }

    pub fn master_for(&self, key_id: &str) -> Result<MasterKey, EnvelopeError> {
        let k = self.master();
        if k.key_id == key_id {
            Ok(k)
        } else {
            Err(EnvelopeError::UnknownKey(key_id.to_owned()))
        }
    }
}

/// JSON documents stored envelope-encrypted in a [`KvStore`].
#[derive(Clone)]
pub struct SealedKv {
    kv: Arc<dyn KvStore>,
    keys: Arc<KeyService>,
}

impl SealedKv {
    pub fn new(kv: Arc<dyn KvStore>, keys: Arc<KeyService>) -> Self {
        Self { kv, keys }
    }

    pub fn kv(&self) -> &Arc<dyn KvStore> {
        &self.kv
    }

    pub fn put_json<T: Serialize>(&self, key: &str, value: &T) -> Result<(), EnvelopeError> {
        let plain = serde_json::to_vec(value)?;
        let ct = envelope_encrypt(&plain, &self.keys.master());
        self.kv.put(key, &ct.to_bytes())?;
        Ok(())
    }

    pub fn get_json<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, EnvelopeError> {
        let Some(raw) = self.kv.get(key)? else {
            return Ok(None);
        };
        Ok(Some(self.open(&raw)?))
    }

    pub fn open<T: DeserializeOwned>(&self, raw: &[u8]) -> Result<T, EnvelopeError> {
        let ct = EnvelopeCiphertext::from_bytes(raw)?;
        let master = self.keys.master_for(&ct.key_id)?;
        let plain = envelope_decrypt(&ct, &master)?;
        Ok(serde_json::from_slice(&plain)?)
    }

    pub fn scan_json<T: DeserializeOwned>(&self, prefix: &str) -> Result<Vec<(String, T)>, EnvelopeError> {
        self.kv
            .scan_prefix(prefix)?
            .into_iter()
            .map(|(k, raw)| Ok((k, self.open(&raw)?)))
            .collect()
    }

    pub fn delete(&self, key: &str) -> Result<bool, EnvelopeError> {
        Ok(self.kv.delete(key)?)
    }

    pub fn keys_with_prefix(&self, prefix: &str) -> Result<Vec<String>, EnvelopeError> {
        Ok(self.kv.keys_with_prefix(prefix)?)
    }
}

/// Random hex suffix for storage keys that must not carry identifiers.
pub fn random_key_suffix() -> String {
    let mut b = [0u8; 12];
    OsRng.fill_bytes(&mut b);
    hex::encode(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mk = MasterKey::generate("mk-1");
        let ct = envelope_encrypt(b"hello record", &mk);
        assert_eq!(envelope_decrypt(&ct, &mk).unwrap(), b"hello record");
        let back = EnvelopeCiphertext::from_bytes(&ct.to_bytes()).unwrap();
        assert_eq!(back, ct);
    }

    #[test]
    fn fresh_keys_and_nonces() {
        let mk = MasterKey::generate("mk-1");
        let a = envelope_encrypt(b"same", &mk);
        let b = envelope_encrypt(b"same", &mk);
        assert_ne!(a.ciphertext, b.ciphertext);
        assert_ne!(a.wrapped_data_key, b.wrapped_data_key);
        assert_ne!(a.nonce, b.nonce);
    }

    #[test]
    fn bit_flip_detected() {
        let mk = MasterKey::generate("mk-1");
        let mut ct = envelope_encrypt(b"payload", &mk);
        ct.ciphertext[0] ^= 1;
        assert!(matches!(envelope_decrypt(&ct, &mk), Err(EnvelopeError::Integrity)));
    }

    #[test]
    fn wrong_master_key() {
        let mk = MasterKey::generate("mk-1");
        let other = MasterKey::generate("mk-1");
        let ct = envelope_encrypt(b"payload", &mk);
        assert!(matches!(envelope_decrypt(&ct, &other), Err(EnvelopeError::Integrity)));
        let renamed = MasterKey::generate("mk-2");
        assert!(matches!(
            envelope_decrypt(&ct, &renamed),
            Err(EnvelopeError::KeyMismatch { .. })
        ));
    }

    #[test]
    fn truncated_wrapped_key() {
        let mk = MasterKey::generate("mk-1");
        let mut ct = envelope_encrypt(b"payload", &mk);
        ct.wrapped_data_key.pop();
        assert!(envelope_decrypt(&ct, &mk).is_err());
        let bytes = envelope_encrypt(b"payload", &mk).to_bytes();
        assert!(EnvelopeCiphertext::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn key_file_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("keys/master.json");
        let a = KeyService::open_or_create(&path).unwrap().master();
        let b = KeyService::open_or_create(&path).unwrap().master();
        assert_eq!(a.key_id(), b.key_id());
        let ct = envelope_encrypt(b"x", &a);
        assert_eq!(envelope_decrypt(&ct, &b).unwrap(), b"x");
    }
}
