//! Participant identities and Ed25519 signing.
//!
//! Every participant in a channel has an Ed25519 keypair. DataSources,
//! the owners of log data, additionally carry an access descriptor and a
//! salted password digest used to authenticate operators.

use std::collections::BTreeMap;
use std::fmt;
use std::net::IpAddr;

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{self, hex_bytes};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("participant {0} is already registered")]
    DuplicateParticipant(String),
    #[error("port {0} is outside 1..=65535")]
    InvalidPort(u32),
    #[error("{0:?} is not a valid IP address")]
    InvalidAddress(String),
    #[error("unknown signer {0}")]
    UnknownSigner(String),
    #[error("malformed key material: {0}")]
    MalformedKey(String),
}

/// Access descriptor for a DataSource as supplied by an operator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSource {
    pub datasource_id: String,
    pub ip: String,
    pub port: u32,
    pub username: String,
    pub url: String,
}

impl DataSource {
    pub fn validate(&self) -> Result<(), IdentityError> {
        if !(1..=65535).contains(&self.port) {
            return Err(IdentityError::InvalidPort(self.port));
        }
        if self.ip.parse::<IpAddr>().is_err() {
            return Err(IdentityError::InvalidAddress(self.ip.clone()));
        }
        Ok(())
    }
}

/// A registered DataSource as stored in world state and in registry exports.
///
/// Canonical key order: `datasourceId, ip, port, username, password_digest,
/// salt, url, public_key`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSourceRecord {
    #[serde(rename = "datasourceId")]
    pub datasource_id: String,
    pub ip: String,
    pub port: u32,
    pub username: String,
    #[serde(with = "hex_bytes")]
    pub password_digest: Vec<u8>,
    #[serde(with = "hex_bytes")]
    pub salt: Vec<u8>,
    pub url: String,
    #[serde(with = "hex_bytes")]
    pub public_key: Vec<u8>,
}

impl DataSourceRecord {
    pub fn descriptor(&self) -> DataSource {
        DataSource {
            datasource_id: self.datasource_id.clone(),
            ip: self.ip.clone(),
            port: self.port,
            username: self.username.clone(),
            url: self.url.clone(),
        }
    }

    pub fn password_matches(&self, plaintext: &str) -> bool {
        password_digest(&self.salt, plaintext) == self.password_digest
    }
}

pub fn password_digest(salt: &[u8], plaintext: &str) -> Vec<u8> {
    let mut hasher = Sha256::new();
    hasher.update(salt);
    hasher.update(plaintext.as_bytes());
    hasher.finalize().to_vec()
}

/// A participant's keypair. The signing half never leaves the owner.
#[derive(Clone)]
pub struct Credential {
    pub participant_id: String,
    signing_key: SigningKey,
}

impl fmt::Debug for Credential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Credential")
            .field("participant_id", &self.participant_id)
            .field("public_key", &hex::encode(self.public_key()))
            .finish_non_exhaustive()
    }
}

impl Credential {
    pub fn generate<R: RngCore + CryptoRng>(participant_id: impl Into<String>, rng: &mut R) -> Self {
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        Self::from_secret(participant_id, secret)
    }

    pub fn from_secret(participant_id: impl Into<String>, secret: [u8; 32]) -> Self {
        Credential { participant_id: participant_id.into(), signing_key: SigningKey::from_bytes(&secret) }
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.signing_key.verifying_key().to_bytes()
    }

    pub fn private_key(&self) -> [u8; 32] {
        self.signing_key.to_bytes()
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        sign(self, message)
    }
}

/// Canonical key order: `signer_id, bytes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub signer_id: String,
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
}

/// Signs the SHA-256 digest of `message`.
pub fn sign(credential: &Credential, message: &[u8]) -> Signature {
    let digest = codec::sha256(message);
    Signature {
        signer_id: credential.participant_id.clone(),
        bytes: credential.signing_key.sign(digest.as_bytes()).to_bytes().to_vec(),
    }
}

/// Verifies `signature` over `message` with a raw public key.
pub fn verify_with_key(public_key: &[u8], signature: &Signature, message: &[u8]) -> bool {
    let Ok(key_bytes) = <[u8; 32]>::try_from(public_key) else {
        return false;
    };
    let Ok(key) = VerifyingKey::from_bytes(&key_bytes) else {
        return false;
    };
    let Ok(sig_bytes) = <[u8; 64]>::try_from(signature.bytes.as_slice()) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig_bytes);
    let digest = codec::sha256(message);
    key.verify_strict(digest.as_bytes(), &sig).is_ok()
}

/// Anything that can resolve a participant id to its verification key.
pub trait KeyDirectory {
    fn public_key(&self, participant_id: &str) -> Option<Vec<u8>>;
}

/// In-memory participant registry.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    datasources: BTreeMap<String, DataSourceRecord>,
    /// Non-DataSource participants (peers, orderer) by id.
    nodes: BTreeMap<String, Vec<u8>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.datasources.len() + self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, participant_id: &str) -> bool {
        self.datasources.contains_key(participant_id) || self.nodes.contains_key(participant_id)
    }

    pub fn datasource(&self, id: &str) -> Option<&DataSourceRecord> {
        self.datasources.get(id)
    }

    pub fn datasources(&self) -> impl Iterator<Item = &DataSourceRecord> {
        self.datasources.values()
    }

    /// Adds an already-built record, e.g. one read back from world state.
    pub fn insert_record(&mut self, record: DataSourceRecord) -> Result<(), IdentityError> {
        if self.contains(&record.datasource_id) {
            return Err(IdentityError::DuplicateParticipant(record.datasource_id));
        }
        self.datasources.insert(record.datasource_id.clone(), record);
        Ok(())
    }

    pub fn insert_node(&mut self, participant_id: &str, public_key: &[u8]) -> Result<(), IdentityError> {
        if self.contains(participant_id) {
            return Err(IdentityError::DuplicateParticipant(participant_id.to_string()));
        }
        self.nodes.insert(participant_id.to_string(), public_key.to_vec());
        Ok(())
    }

    /// One canonical record per DataSource, newline-terminated. Private keys
    /// are never part of a record.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for record in self.datasources.values() {
            out.push_str(&codec::to_canonical_string(record));
            out.push('\n');
        }
        out
    }
}

impl KeyDirectory for Registry {
    fn public_key(&self, participant_id: &str) -> Option<Vec<u8>> {
        self.datasources
            .get(participant_id)
            .map(|r| r.public_key.clone())
            .or_else(|| self.nodes.get(participant_id).cloned())
    }
}

/// Builds the record for a new DataSource without touching any registry.
pub fn new_datasource_record<R: RngCore + CryptoRng>(
    descriptor: &DataSource,
    plaintext_password: &str,
    rng: &mut R,
) -> Result<(DataSourceRecord, Credential), IdentityError> {
    descriptor.validate()?;
    let credential = Credential::generate(descriptor.datasource_id.clone(), rng);
    let mut salt = vec![0u8; 16];
    rng.fill_bytes(&mut salt);
    let record = DataSourceRecord {
        datasource_id: descriptor.datasource_id.clone(),
        ip: descriptor.ip.clone(),
        port: descriptor.port,
        username: descriptor.username.clone(),
        password_digest: password_digest(&salt, plaintext_password),
        salt,
        url: descriptor.url.clone(),
        public_key: credential.public_key().to_vec(),
    };
    Ok((record, credential))
}

pub fn register_datasource<R: RngCore + CryptoRng>(
    registry: &mut Registry,
    descriptor: &DataSource,
    plaintext_password: &str,
    rng: &mut R,
) -> Result<Credential, IdentityError> {
    if registry.contains(&descriptor.datasource_id) {
        return Err(IdentityError::DuplicateParticipant(descriptor.datasource_id.clone()));
    }
    let (record, credential) = new_datasource_record(descriptor, plaintext_password, rng)?;
    registry.insert_record(record)?;
    Ok(credential)
}

/// Unknown participants simply fail authentication.
pub fn authenticate(registry: &Registry, datasource_id: &str, plaintext_password: &str) -> bool {
    registry.datasource(datasource_id).is_some_and(|r| r.password_matches(plaintext_password))
}

pub fn verify<K: KeyDirectory + ?Sized>(
    directory: &K,
    signature: &Signature,
    message: &[u8],
) -> Result<bool, IdentityError> {
    let key = directory
        .public_key(&signature.signer_id)
        .ok_or_else(|| IdentityError::UnknownSigner(signature.signer_id.clone()))?;
    Ok(verify_with_key(&key, signature, message))
}

/// On-disk form of a credential, kept by its owner only.
///
/// Canonical key order: `participant_id, public_key, private_key`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyFile {
    pub participant_id: String,
    #[serde(with = "hex_bytes")]
    pub public_key: Vec<u8>,
    #[serde(with = "hex_bytes")]
    pub private_key: Vec<u8>,
}

impl From<&Credential> for KeyFile {
    fn from(c: &Credential) -> Self {
        KeyFile {
            participant_id: c.participant_id.clone(),
            public_key: c.public_key().to_vec(),
            private_key: c.private_key().to_vec(),
        }
    }
}

impl TryFrom<KeyFile> for Credential {
    type Error = IdentityError;

    fn try_from(k: KeyFile) -> Result<Self, Self::Error> {
        let secret: [u8; 32] =
            k.private_key.try_into().map_err(|_| IdentityError::MalformedKey("private key must be 32 bytes".into()))?;
        let credential = Credential::from_secret(k.participant_id, secret);
        if credential.public_key().as_slice() != k.public_key.as_slice() {
            return Err(IdentityError::MalformedKey("public key does not match".into()));
        }
        Ok(credential)
    }
}
