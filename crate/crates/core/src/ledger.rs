//! Hash-chained block storage and world state.
//!
//! A channel's ledger is an append-only block file. Each record is a 4-byte
//! big-endian length followed by the canonical encoding of one [`Block`]:
//!
//! ```text
//! {"header":{"block_number":N,"previous_hash":"<hex>","data_hash":"<hex>","timestamp":T},
//!  "orderer_signature":{"signer_id":"..","bytes":"<hex>"},
//!  "transactions":[<envelope>,...],
//!  "validity_flags":["VALID",...]}
//! ```
//!
//! (shown wrapped; the stored form has no whitespace). The block hash is
//! SHA-256 over the canonical header; `data_hash` is SHA-256 over the
//! canonical transaction array. The orderer signs the canonical header.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, hex_bytes, CodecError, Digest};
use crate::identity::{self, Signature};
use crate::txflow::{self, ChannelConfig, TransactionEnvelope};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("previous_hash of block {block_number} does not match the chain tip")]
    ChainLinkMismatch { block_number: u64 },
    #[error("expected block number {expected}, got {got}")]
    NonSequentialNumber { expected: u64, got: u64 },
    #[error("data hash of block {block_number} does not match its transactions")]
    DataHashMismatch { block_number: u64 },
    #[error("validity flags ({flags}) do not match transactions ({transactions})")]
    FlagCountMismatch { flags: usize, transactions: usize },
    #[error("chain failed verification: {0:?}")]
    ChainNotVerified(VerificationReport),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("malformed block file: {0}")]
    Malformed(String),
    #[error("block file already exists: {0}")]
    AlreadyExists(PathBuf),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Position of a write in the ledger: `(block_number, transaction_index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Version {
    pub block: u64,
    pub tx: u64,
}

/// A key read during simulation with the version seen; `None` means absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadEntry {
    pub key: String,
    pub version: Option<Version>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteEntry {
    pub key: String,
    #[serde(with = "hex_bytes")]
    pub value: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ValidityFlag {
    Valid,
    PolicyFail,
    MvccConflict,
    BadSignature,
    /// Order-execute baseline only: the chaincode rejected the transaction.
    ExecutionFailed,
}

impl ValidityFlag {
    pub fn is_valid(self) -> bool {
        self == ValidityFlag::Valid
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub block_number: u64,
    pub previous_hash: Digest,
    pub data_hash: Digest,
    /// Orderer clock, UTC milliseconds.
    pub timestamp: u64,
}

pub fn compute_block_hash(header: &BlockHeader) -> Digest {
    codec::digest_of(header)
}

pub fn compute_data_hash(transactions: &[TransactionEnvelope]) -> Digest {
    codec::digest_of(&transactions)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub header: BlockHeader,
    pub orderer_signature: Signature,
    pub transactions: Vec<TransactionEnvelope>,
    pub validity_flags: Vec<ValidityFlag>,
}

impl Block {
    pub fn hash(&self) -> Digest {
        compute_block_hash(&self.header)
    }

    pub fn number(&self) -> u64 {
        self.header.block_number
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        codec::to_canonical(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        codec::from_canonical(bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateEntry {
    #[serde(with = "hex_bytes")]
    pub value: Vec<u8>,
    pub version: Version,
}

/// Versioned key/value view derived from the valid transactions on a chain.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    entries: BTreeMap<String, StateEntry>,
}

impl WorldState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<&StateEntry> {
        self.entries.get(key)
    }

    pub fn version_of(&self, key: &str) -> Option<Version> {
        self.entries.get(key).map(|e| e.version)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &StateEntry)> {
        self.entries.iter()
    }

    pub fn scan_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a StateEntry)> + 'a {
        self.entries.range(prefix.to_string()..).take_while(move |(k, _)| k.starts_with(prefix))
    }

    pub fn apply(&mut self, writes: &[WriteEntry], version: Version) {
        for w in writes {
            self.entries.insert(w.key.clone(), StateEntry { value: w.value.clone(), version });
        }
    }

    /// Digest over every entry, versions included.
    pub fn digest(&self) -> Digest {
        codec::digest_of(self)
    }

    /// Digest over keys and values only. Two pipelines that cut blocks at
    /// different points agree on this but not on versions.
    pub fn content_digest(&self) -> Digest {
        let content: BTreeMap<&str, String> =
            self.entries.iter().map(|(k, e)| (k.as_str(), hex::encode(&e.value))).collect();
        codec::digest_of(&content)
    }

    pub fn channel_config(&self) -> Option<ChannelConfig> {
        self.get(txflow::CONFIG_KEY).and_then(|e| codec::from_canonical(&e.value).ok())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureKind {
    BrokenLink,
    DataHashMismatch,
    BadSignature,
    NonsequentialNumber,
    /// The record could not be framed or decoded canonically.
    MalformedRecord,
    /// Stored validity flags disagree with a local re-validation.
    ValidityMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub ok: bool,
    pub first_bad_block: Option<u64>,
    pub failure_kind: Option<FailureKind>,
    pub blocks_checked: u64,
    pub detail: Option<String>,
}

impl VerificationReport {
    fn ok(blocks: u64) -> Self {
        VerificationReport { ok: true, first_bad_block: None, failure_kind: None, blocks_checked: blocks, detail: None }
    }

    fn bad(block: u64, kind: FailureKind, detail: impl Into<String>) -> Self {
        VerificationReport {
            ok: false,
            first_bad_block: Some(block),
            failure_kind: Some(kind),
            blocks_checked: block,
            detail: Some(detail.into()),
        }
    }
}

/// Splits a block file image into records. Iteration stops after the first
/// framing error.
pub fn records(image: &[u8]) -> impl Iterator<Item = Result<&[u8], String>> + '_ {
    let mut offset = 0usize;
    let mut failed = false;
    std::iter::from_fn(move || {
        if failed || offset == image.len() {
            return None;
        }
        let rest = &image[offset..];
        if rest.len() < 4 {
            failed = true;
            return Some(Err(format!("truncated length prefix at offset {offset}")));
        }
        let len = u32::from_be_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
        if rest.len() - 4 < len {
            failed = true;
            return Some(Err(format!("record at offset {offset} claims {len} bytes past end of file")));
        }
        offset += 4 + len;
        Some(Ok(&rest[4..4 + len]))
    })
}

pub fn frame_record(block_bytes: &[u8]) -> Vec<u8> {
    let len = u32::try_from(block_bytes.len()).expect("block larger than 4 GiB");
    let mut out = Vec::with_capacity(block_bytes.len() + 4);
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(block_bytes);
    out
}

/// Checks a single block against its predecessor's hash and number.
fn check_structure(block: &Block, expected_number: u64, previous_hash: &Digest) -> Result<(), (FailureKind, String)> {
    if block.header.block_number != expected_number {
        return Err((
            FailureKind::NonsequentialNumber,
            format!("expected block number {expected_number}, found {}", block.header.block_number),
        ));
    }
    if block.header.previous_hash != *previous_hash {
        return Err((FailureKind::BrokenLink, "previous_hash does not match predecessor".into()));
    }
    if compute_data_hash(&block.transactions) != block.header.data_hash {
        return Err((FailureKind::DataHashMismatch, "data_hash does not match transactions".into()));
    }
    Ok(())
}

fn orderer_key(block: &Block, state: &WorldState) -> Option<(String, Vec<u8>)> {
    let config = if block.header.block_number == 0 {
        block.transactions.first().and_then(txflow::config_from_genesis_tx)
    } else {
        state.channel_config()
    }?;
    Some((config.orderer_id.clone(), config.orderer_public_key.clone()))
}

/// Full check of one block given the state produced by its predecessors.
fn check_block(
    block: &Block,
    expected_number: u64,
    previous_hash: &Digest,
    state: &WorldState,
) -> Result<(), (FailureKind, String)> {
    check_signed_structure(block, expected_number, previous_hash, state)?;
    check_flags(block, state)
}

fn check_signed_structure(
    block: &Block,
    expected_number: u64,
    previous_hash: &Digest,
    state: &WorldState,
) -> Result<(), (FailureKind, String)> {
    check_structure(block, expected_number, previous_hash)?;

    let Some((orderer_id, orderer_pk)) = orderer_key(block, state) else {
        return Err((FailureKind::BadSignature, "no orderer key available".into()));
    };
    if block.orderer_signature.signer_id != orderer_id
        || !identity::verify_with_key(&orderer_pk, &block.orderer_signature, &codec::to_canonical(&block.header))
    {
        return Err((FailureKind::BadSignature, "orderer signature over header does not verify".into()));
    }
    Ok(())
}

fn check_flags(block: &Block, state: &WorldState) -> Result<(), (FailureKind, String)> {
    if block.validity_flags.len() != block.transactions.len() {
        return Err((FailureKind::ValidityMismatch, "flag count differs from transaction count".into()));
    }
    let recomputed = txflow::compute_validity_flags(block, state);
    for (i, (stored, fresh)) in block.validity_flags.iter().zip(&recomputed).enumerate() {
        if stored == fresh {
            continue;
        }
        let kind = if *fresh == ValidityFlag::BadSignature {
            FailureKind::BadSignature
        } else {
            FailureKind::ValidityMismatch
        };
        return Err((kind, format!("transaction {i}: stored {stored:?}, recomputed {fresh:?}")));
    }
    Ok(())
}

/// Like [`verify_next_block`] but leaves the validity flags unchecked, for
/// chains whose flags come from sequential execution.
pub fn verify_next_header(ledger: &Ledger, block: &Block) -> Result<(), VerificationReport> {
    let number = ledger.chain.next_block_number();
    check_signed_structure(block, number, &ledger.chain.tip_hash(), &ledger.state)
        .map_err(|(kind, detail)| VerificationReport::bad(number, kind, detail))
}

/// Checks that `block` can extend `ledger`, validity flags included.
pub fn verify_next_block(ledger: &Ledger, block: &Block) -> Result<(), VerificationReport> {
    let number = ledger.chain.next_block_number();
    check_block(block, number, &ledger.chain.tip_hash(), &ledger.state)
        .map_err(|(kind, detail)| VerificationReport::bad(number, kind, detail))
}

pub(crate) fn apply_block(state: &mut WorldState, block: &Block) {
    for (i, (tx, flag)) in block.transactions.iter().zip(&block.validity_flags).enumerate() {
        if flag.is_valid() {
            state.apply(&tx.write_set, Version { block: block.header.block_number, tx: i as u64 });
        }
    }
}

/// Verifies a raw block-file image from genesis, returning the report and
/// the state replayed over the verified prefix.
pub fn verify_image_with_state(image: &[u8]) -> (VerificationReport, WorldState) {
    let mut state = WorldState::new();
    let mut previous_hash = Digest::ZERO;
    let mut count = 0u64;
    for (index, record) in records(image).enumerate() {
        let index = index as u64;
        let block = match record.and_then(|bytes| Block::from_bytes(bytes).map_err(|e| e.to_string())) {
            Ok(block) => block,
            Err(detail) => return (VerificationReport::bad(index, FailureKind::MalformedRecord, detail), state),
        };
        if let Err((kind, detail)) = check_block(&block, index, &previous_hash, &state) {
            return (VerificationReport::bad(index, kind, detail), state);
        }
        apply_block(&mut state, &block);
        previous_hash = block.hash();
        count += 1;
    }
    (VerificationReport::ok(count), state)
}

pub fn verify_image(image: &[u8]) -> VerificationReport {
    verify_image_with_state(image).0
}

/// Verifies every link, data hash, sequence number, orderer signature and
/// transaction signature (via re-validation of the stored flags).
pub fn verify_chain(chain: &Chain) -> VerificationReport {
    verify_image(chain.image())
}

pub fn verify_block_file(path: &Path) -> io::Result<VerificationReport> {
    Ok(verify_image(&fs::read(path)?))
}

pub fn replay_world_state(chain: &Chain) -> Result<WorldState, LedgerError> {
    let (report, state) = verify_image_with_state(chain.image());
    if !report.ok {
        return Err(LedgerError::ChainNotVerified(report));
    }
    Ok(state)
}

/// An append-only sequence of blocks, optionally mirrored to a block file.
#[derive(Debug, Clone, Default)]
pub struct Chain {
    blocks: Vec<Block>,
    image: Vec<u8>,
    tx_index: HashMap<Digest, (u64, usize)>,
    path: Option<PathBuf>,
}

impl Chain {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates a new, empty block file at `path`.
    pub fn create(path: impl Into<PathBuf>) -> Result<Self, LedgerError> {
        let path = path.into();
        if path.exists() {
            return Err(LedgerError::AlreadyExists(path));
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        OpenOptions::new().write(true).create_new(true).open(&path)?;
        Ok(Chain { path: Some(path), ..Self::default() })
    }

    /// Loads a block file. Records must decode canonically and link up;
    /// signatures and flags are checked by [`verify_chain`].
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, LedgerError> {
        let path = path.into();
        let image = fs::read(&path)?;
        let mut chain = Self::from_image(&image)?;
        chain.path = Some(path);
        Ok(chain)
    }

    pub fn from_image(image: &[u8]) -> Result<Self, LedgerError> {
        let mut chain = Chain::new();
        for record in records(image) {
            let bytes = record.map_err(LedgerError::Malformed)?;
            let block = Block::from_bytes(bytes).map_err(|e| LedgerError::Malformed(e.to_string()))?;
            chain.push_unpersisted(block)?;
        }
        Ok(chain)
    }

    /// An in-memory copy that is not mirrored to any file.
    pub fn detached(&self) -> Chain {
        Chain { path: None, ..self.clone() }
    }

    pub fn len(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn tip(&self) -> Option<&Block> {
        self.blocks.last()
    }

    pub fn tip_hash(&self) -> Digest {
        self.tip().map(Block::hash).unwrap_or(Digest::ZERO)
    }

    pub fn next_block_number(&self) -> u64 {
        self.len()
    }

    /// The exact bytes of the block file.
    pub fn image(&self) -> &[u8] {
        &self.image
    }

    /// SHA-256 over the whole block file image.
    pub fn digest(&self) -> Digest {
        codec::sha256(&self.image)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn check_append(&self, block: &Block) -> Result<(), LedgerError> {
        let expected = self.next_block_number();
        let number = block.header.block_number;
        if number != expected {
            return Err(LedgerError::NonSequentialNumber { expected, got: number });
        }
        if block.header.previous_hash != self.tip_hash() {
            return Err(LedgerError::ChainLinkMismatch { block_number: number });
        }
        if compute_data_hash(&block.transactions) != block.header.data_hash {
            return Err(LedgerError::DataHashMismatch { block_number: number });
        }
        if block.validity_flags.len() != block.transactions.len() {
            return Err(LedgerError::FlagCountMismatch {
                flags: block.validity_flags.len(),
                transactions: block.transactions.len(),
            });
        }
        Ok(())
    }

    fn push_unpersisted(&mut self, block: Block) -> Result<Vec<u8>, LedgerError> {
        self.check_append(&block)?;
        let record = frame_record(&block.to_bytes());
        self.image.extend_from_slice(&record);
        let number = block.header.block_number;
        for (i, tx) in block.transactions.iter().enumerate() {
            self.tx_index.entry(tx.tx_id).or_insert((number, i));
        }
        self.blocks.push(block);
        Ok(record)
    }

    /// Appends `block` at the tail. Nothing already stored is rewritten.
    pub fn append_block(&mut self, block: Block) -> Result<(), LedgerError> {
        self.check_append(&block)?;
        let record = frame_record(&block.to_bytes());
        if let Some(path) = &self.path {
            let mut file = OpenOptions::new().append(true).open(path)?;
            file.write_all(&record)?;
            file.sync_data()?;
        }
        self.push_unpersisted(block)?;
        Ok(())
    }

    pub fn get_block(&self, block_number: u64) -> Result<&Block, LedgerError> {
        usize::try_from(block_number)
            .ok()
            .and_then(|n| self.blocks.get(n))
            .ok_or_else(|| LedgerError::NotFound(format!("block {block_number}")))
    }

    pub fn get_transaction(&self, tx_id: &Digest) -> Result<(&Block, usize, &TransactionEnvelope), LedgerError> {
        let &(number, index) =
            self.tx_index.get(tx_id).ok_or_else(|| LedgerError::NotFound(format!("transaction {tx_id}")))?;
        let block = &self.blocks[number as usize];
        Ok((block, index, &block.transactions[index]))
    }
}

/// A chain together with its incrementally maintained world state.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    pub chain: Chain,
    pub state: WorldState,
}

impl Ledger {
    pub fn new(chain: Chain) -> Result<Self, LedgerError> {
        let state = replay_world_state(&chain)?;
        Ok(Ledger { chain, state })
    }

    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends a validated block and applies its valid writes. The state is
    /// only touched once the block is durably appended.
    pub fn commit(&mut self, block: Block) -> Result<(), LedgerError> {
        self.chain.append_block(block)?;
        let block = self.chain.tip().expect("block just appended");
        apply_block(&mut self.state, block);
        Ok(())
    }

    pub fn config(&self) -> Option<ChannelConfig> {
        self.state.channel_config()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaincode::weblog_key;
    use crate::test_support::{asset, Fixture};

    fn header(number: u64, previous: Digest, data: Digest, timestamp: u64) -> BlockHeader {
        BlockHeader { block_number: number, previous_hash: previous, data_hash: data, timestamp }
    }

    // Expected digests computed with Python's hashlib over the hand-written
    // canonical header text.
    const GENESIS_HASH: &str = "f49c023013f95f523f7be902c1ab9abd2c656a9e76b27b0a3c8d410f577a5c7a";
    const GENESIS_TS1001_HASH: &str = "ce70f63bd732d2bf77368950214b0b0d497491814faeb94a9e7159bebe3695a1";
    const BLOCK1_HASH: &str = "e818a369ddf5924cea68519255e351ffaba196e85534e22d1d838dd5e0f9f700";

    #[test]
    fn block_hash_matches_external_sha256() {
        let genesis = header(0, Digest::ZERO, Digest([0x11; 32]), 1000);
        assert_eq!(compute_block_hash(&genesis).to_hex(), GENESIS_HASH);
        assert_eq!(compute_block_hash(&genesis.clone()), compute_block_hash(&genesis));

        let later = header(0, Digest::ZERO, Digest([0x11; 32]), 1001);
        assert_eq!(compute_block_hash(&later).to_hex(), GENESIS_TS1001_HASH);

        let block1 = header(1, compute_block_hash(&genesis), Digest([0x22; 32]), 2000);
        assert_eq!(compute_block_hash(&block1).to_hex(), BLOCK1_HASH);
    }

    #[test]
    fn append_block_rejects_bad_links() {
        let mut fx = Fixture::new(1, 1);
        let genesis = fx.ledger.chain.get_block(0).unwrap().clone();
        let mut chain = Chain::new();
        chain.append_block(genesis.clone()).unwrap();
        assert_eq!(chain.len(), 1);

        let env = fx.append_envelope(&asset("w1", "10.0.0.1", "ua", 1));
        let good = fx.commit_block(vec![env]);

        let mut gap = good.clone();
        gap.header.block_number = 5;
        assert!(matches!(chain.append_block(gap), Err(LedgerError::NonSequentialNumber { expected: 1, got: 5 })));

        let mut zero_link = good.clone();
        zero_link.header.previous_hash = Digest::ZERO;
        assert!(matches!(chain.append_block(zero_link), Err(LedgerError::ChainLinkMismatch { block_number: 1 })));

        let mut bad_data = good.clone();
        bad_data.transactions[0].endorsements.clear();
        assert!(matches!(chain.append_block(bad_data), Err(LedgerError::DataHashMismatch { block_number: 1 })));

        let image_before = chain.image().to_vec();
        chain.append_block(good).unwrap();
        assert_eq!(&chain.image()[..image_before.len()], image_before.as_slice());
        assert_eq!(chain.len(), 2);
    }

    fn ten_block_fixture() -> Fixture {
        let mut fx = Fixture::new(3, 2);
        for b in 1..10u64 {
            let envs = (0..3)
                .map(|i| fx.append_envelope(&asset(&format!("b{b}t{i}"), "10.0.0.1", "ua", b * 10 + i)))
                .collect();
            fx.commit_block(envs);
        }
        assert_eq!(fx.ledger.chain.len(), 10);
        fx
    }

    fn record_span(image: &[u8], block: usize) -> std::ops::Range<usize> {
        let mut offset = 0;
        for _ in 0..block {
            let len = u32::from_be_bytes(image[offset..offset + 4].try_into().unwrap()) as usize;
            offset += 4 + len;
        }
        let len = u32::from_be_bytes(image[offset..offset + 4].try_into().unwrap()) as usize;
        offset + 4..offset + 4 + len
    }

    #[test]
    fn fresh_chain_verifies() {
        let fx = ten_block_fixture();
        let report = verify_chain(&fx.ledger.chain);
        assert!(report.ok, "{report:?}");
        assert_eq!(report.first_bad_block, None);
        assert_eq!(report.blocks_checked, 10);
    }

    #[test]
    fn payload_byte_flip_is_data_hash_mismatch_at_that_block() {
        let fx = ten_block_fixture();
        let mut image = fx.ledger.chain.image().to_vec();
        let span = record_span(&image, 4);
        let text = std::str::from_utf8(&image[span.clone()]).unwrap();
        // Inside the DataAppend argument: the asset url "/b4t1" becomes "/b4t2".
        let at = text.find("/b4t1").unwrap() + 4;
        image[span.start + at] = b'2';
        let report = verify_image(&image);
        assert!(!report.ok);
        assert_eq!(report.first_bad_block, Some(4));
        assert_eq!(report.failure_kind, Some(FailureKind::DataHashMismatch));
    }

    #[test]
    fn header_timestamp_edit() {
        let fx = ten_block_fixture();
        let mut blocks = fx.ledger.chain.blocks().to_vec();
        blocks[7].header.timestamp += 1;
        let image: Vec<u8> = blocks.iter().flat_map(|b| frame_record(&b.to_bytes())).collect();
        let report = verify_image(&image);
        assert_eq!(report.first_bad_block, Some(7));
        assert_eq!(report.failure_kind, Some(FailureKind::BadSignature));

        // If the orderer itself re-signs the edited header, the break shows
        // up as a link failure in the next block.
        blocks[7].orderer_signature = fx.orderer.sign(&codec::to_canonical(&blocks[7].header));
        let image: Vec<u8> = blocks.iter().flat_map(|b| frame_record(&b.to_bytes())).collect();
        let report = verify_image(&image);
        assert_eq!(report.first_bad_block, Some(8));
        assert_eq!(report.failure_kind, Some(FailureKind::BrokenLink));
    }

    #[test]
    fn flag_edit_is_detected() {
        let fx = ten_block_fixture();
        let mut blocks = fx.ledger.chain.blocks().to_vec();
        blocks[3].validity_flags[1] = ValidityFlag::MvccConflict;
        let image: Vec<u8> = blocks.iter().flat_map(|b| frame_record(&b.to_bytes())).collect();
        let report = verify_image(&image);
        assert_eq!(report.first_bad_block, Some(3));
        assert_eq!(report.failure_kind, Some(FailureKind::ValidityMismatch));
    }

    #[test]
    fn truncated_file_is_malformed_at_last_record() {
        let fx = ten_block_fixture();
        let image = fx.ledger.chain.image();
        let report = verify_image(&image[..image.len() - 1]);
        assert_eq!(report.first_bad_block, Some(9));
        assert_eq!(report.failure_kind, Some(FailureKind::MalformedRecord));
    }

    #[test]
    fn replay_examples() {
        let mut fx = Fixture::new(1, 1);
        let state = replay_world_state(&fx.ledger.chain).unwrap();
        assert_eq!(state.scan_prefix(crate::chaincode::WEBLOG_PREFIX).count(), 0);

        let env = fx.append_envelope(&asset("k", "10.0.0.1", "ua", 1));
        fx.commit_block(vec![env]);
        let state = replay_world_state(&fx.ledger.chain).unwrap();
        assert_eq!(state.version_of(&weblog_key("k")), Some(Version { block: 1, tx: 0 }));

        let a = fx.append_envelope(&asset("x", "10.0.0.1", "ua", 1));
        let b = fx.append_envelope(&asset("y", "10.0.0.1", "ua", 1));
        fx.commit_block(vec![a, b]);
        let state = replay_world_state(&fx.ledger.chain).unwrap();
        assert_eq!(state.version_of(&weblog_key("x")), Some(Version { block: 2, tx: 0 }));
        assert_eq!(state.version_of(&weblog_key("y")), Some(Version { block: 2, tx: 1 }));
        assert_eq!(state, fx.ledger.state);
    }

    #[test]
    fn replay_refuses_unverified_chain() {
        let fx = ten_block_fixture();
        let mut blocks = fx.ledger.chain.blocks().to_vec();
        blocks[2].validity_flags[0] = ValidityFlag::PolicyFail;
        let image: Vec<u8> = blocks.iter().flat_map(|b| frame_record(&b.to_bytes())).collect();
        let chain = Chain::from_image(&image).unwrap();
        match replay_world_state(&chain) {
            Err(LedgerError::ChainNotVerified(report)) => assert_eq!(report.first_bad_block, Some(2)),
            other => panic!("expected ChainNotVerified, got {other:?}"),
        }
    }

    #[test]
    fn lookups() {
        let mut fx = Fixture::new(1, 1);
        let env = fx.append_envelope(&asset("k", "10.0.0.1", "ua", 1));
        let submitted = env.to_bytes();
        let tx_id = env.tx_id;
        fx.commit_block(vec![env]);

        let chain = &fx.ledger.chain;
        let genesis = chain.get_block(0).unwrap();
        assert_eq!(genesis.header.previous_hash, Digest::ZERO);
        assert!(matches!(chain.get_block(2), Err(LedgerError::NotFound(_))));

        let (block, index, found) = chain.get_transaction(&tx_id).unwrap();
        assert_eq!((block.number(), index), (1, 0));
        assert_eq!(found.to_bytes(), submitted);
        assert!(matches!(chain.get_transaction(&Digest([9; 32])), Err(LedgerError::NotFound(_))));
    }

    #[test]
    fn block_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.blocks");
        let fx = ten_block_fixture();
        let mut chain = Chain::create(&path).unwrap();
        for block in fx.ledger.chain.blocks() {
            chain.append_block(block.clone()).unwrap();
        }
        assert!(matches!(Chain::create(&path), Err(LedgerError::AlreadyExists(_))));
        assert_eq!(std::fs::read(&path).unwrap(), fx.ledger.chain.image());

        let reopened = Chain::open(&path).unwrap();
        assert_eq!(reopened.blocks(), fx.ledger.chain.blocks());
        assert!(verify_block_file(&path).unwrap().ok);
        for block in reopened.blocks() {
            let bytes = block.to_bytes();
            assert_eq!(Block::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        }
        assert_eq!(replay_world_state(&reopened).unwrap(), fx.ledger.state);
    }
}
