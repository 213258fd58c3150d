//! Execute-order-validate transaction flow.
//!
//! 1. **Execute/endorse**: endorsing peers simulate a signed [`Proposal`]
//!    against their committed state and sign the resulting read/write sets.
//! 2. **Order**: the [`OrderingService`] fixes a FIFO total order and cuts
//!    blocks at `max_block_txs` or `max_wait_ms`, whichever comes first.
//! 3. **Validate**: each transaction is checked for signatures, endorsement
//!    policy and MVCC read-set freshness, in block order.
//! 4. **Commit**: the block, including invalid transactions, is appended and
//!    valid write sets are applied.
//!
//! Channel configuration and DataSource registration travel as system
//! transactions signed by the channel's orderer, so membership changes are
//! recorded on the chain like any other write.

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chaincode::{self, ChaincodeError, ChaincodeResult, FunctionKind, RwSet};
use crate::codec::{self, hex_array8, hex_bytes, Digest};
use crate::identity::{self, Credential, DataSourceRecord, Signature};
use crate::ledger::{
    Block, BlockHeader, Ledger, LedgerError, ReadEntry, ValidityFlag, Version, WorldState, WriteEntry,
};

pub const CONFIG_KEY: &str = "config:channel";
pub const FN_CONFIGURE_CHANNEL: &str = "ConfigureChannel";
pub const FN_REGISTER_DATASOURCE: &str = "RegisterDataSource";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TxFlowError {
    #[error("invalid endorsement policy: {required} of {endorsers}")]
    InvalidPolicy { required: u32, endorsers: usize },
    #[error("invalid channel configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EndorseError {
    #[error("endorsement policy unsatisfied: {matching} matching of {required} required")]
    PolicyUnsatisfied { required: u32, matching: u32 },
    #[error(transparent)]
    Chaincode(#[from] ChaincodeError),
    #[error("client signature does not verify")]
    BadClientSignature,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OrderError {
    #[error("envelope rejected before ordering: {0}")]
    Rejected(String),
}

/// `required` matching endorsements from the listed endorsing peers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndorsementPolicy {
    pub required: u32,
    pub endorsers: Vec<String>,
}

impl EndorsementPolicy {
    pub fn new(required: u32, endorsers: Vec<String>) -> Result<Self, TxFlowError> {
        let policy = EndorsementPolicy { required, endorsers };
        policy.validate()?;
        Ok(policy)
    }

    /// `floor(n/2) + 1` of `endorsers`.
    pub fn majority(endorsers: Vec<String>) -> Self {
        let required = (endorsers.len() / 2 + 1) as u32;
        EndorsementPolicy { required, endorsers }
    }

    pub fn validate(&self) -> Result<(), TxFlowError> {
        let n = self.endorsers.len();
        let unique: BTreeSet<_> = self.endorsers.iter().collect();
        if self.required < 1 || self.required as usize > n || unique.len() != n {
            return Err(TxFlowError::InvalidPolicy { required: self.required, endorsers: n });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderingConfig {
    pub max_block_txs: u32,
    pub max_wait_ms: u64,
}

impl Default for OrderingConfig {
    fn default() -> Self {
        OrderingConfig { max_block_txs: 10, max_wait_ms: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerInfo {
    pub peer_id: String,
    #[serde(with = "hex_bytes")]
    pub public_key: Vec<u8>,
    pub endorser: bool,
}

/// Written by the genesis block under [`CONFIG_KEY`].
///
/// Canonical key order: `channel_id, orderer_id, orderer_public_key, peers,
/// policy, ordering, datasources`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub channel_id: String,
    pub orderer_id: String,
    #[serde(with = "hex_bytes")]
    pub orderer_public_key: Vec<u8>,
    pub peers: Vec<PeerInfo>,
    pub policy: EndorsementPolicy,
    pub ordering: OrderingConfig,
    /// DataSources that are members from genesis onwards.
    pub datasources: Vec<DataSourceRecord>,
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), TxFlowError> {
        if self.channel_id.is_empty() {
            return Err(TxFlowError::InvalidConfig("empty channel id".into()));
        }
        self.policy.validate()?;
        for endorser in &self.policy.endorsers {
            if !self.peers.iter().any(|p| &p.peer_id == endorser && p.endorser) {
                return Err(TxFlowError::InvalidConfig(format!("{endorser} is not an endorsing peer")));
            }
        }
        if self.ordering.max_block_txs < 1 {
            return Err(TxFlowError::InvalidConfig("max_block_txs must be at least 1".into()));
        }
        let mut ids = BTreeSet::new();
        for id in self
            .peers
            .iter()
            .map(|p| &p.peer_id)
            .chain(self.datasources.iter().map(|d| &d.datasource_id))
            .chain(std::iter::once(&self.orderer_id))
        {
            if !ids.insert(id) {
                return Err(TxFlowError::InvalidConfig(format!("duplicate participant {id}")));
            }
        }
        Ok(())
    }

    pub fn peer(&self, peer_id: &str) -> Option<&PeerInfo> {
        self.peers.iter().find(|p| p.peer_id == peer_id)
    }

    pub fn is_member_peer(&self, peer_id: &str) -> bool {
        self.peer(peer_id).is_some()
    }
}

/// Canonical key order: `channel_id, function, args, submitter, nonce,
/// client_signature`. The client signs, and `tx_id` hashes, the same
/// encoding with `client_signature` omitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub channel_id: String,
    pub function: String,
    pub args: Vec<String>,
    pub submitter: String,
    #[serde(with = "hex_array8")]
    pub nonce: [u8; 8],
    pub client_signature: Signature,
}

#[derive(Serialize)]
struct ProposalBody<'a> {
    channel_id: &'a str,
    function: &'a str,
    args: &'a [String],
    submitter: &'a str,
    nonce: String,
}

impl Proposal {
    pub fn new(
        client: &Credential,
        channel_id: impl Into<String>,
        function: impl Into<String>,
        args: Vec<String>,
        nonce: [u8; 8],
    ) -> Self {
        let mut proposal = Proposal {
            channel_id: channel_id.into(),
            function: function.into(),
            args,
            submitter: client.participant_id.clone(),
            nonce,
            client_signature: Signature { signer_id: client.participant_id.clone(), bytes: vec![] },
        };
        proposal.client_signature = client.sign(&proposal.body_bytes());
        proposal
    }

    pub fn body_bytes(&self) -> Vec<u8> {
        codec::to_canonical(&ProposalBody {
            channel_id: &self.channel_id,
            function: &self.function,
            args: &self.args,
            submitter: &self.submitter,
            nonce: hex::encode(self.nonce),
        })
    }

    pub fn tx_id(&self) -> Digest {
        codec::sha256(&self.body_bytes())
    }

    pub fn verify_client_signature(&self, public_key: &[u8]) -> bool {
        self.client_signature.signer_id == self.submitter
            && identity::verify_with_key(public_key, &self.client_signature, &self.body_bytes())
    }
}

/// Canonical key order: `tx_id, proposal, read_set, write_set, endorsements`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionEnvelope {
    pub tx_id: Digest,
    pub proposal: Proposal,
    pub read_set: Vec<ReadEntry>,
    pub write_set: Vec<WriteEntry>,
    pub endorsements: Vec<Signature>,
}

/// The bytes an endorser signs: `tx_id || read_set || write_set`.
pub fn endorsement_message(tx_id: &Digest, read_set: &[ReadEntry], write_set: &[WriteEntry]) -> Vec<u8> {
    let mut msg = tx_id.as_bytes().to_vec();
    msg.extend_from_slice(&codec::to_canonical(&read_set));
    msg.extend_from_slice(&codec::to_canonical(&write_set));
    msg
}

impl TransactionEnvelope {
    pub fn endorsement_message(&self) -> Vec<u8> {
        endorsement_message(&self.tx_id, &self.read_set, &self.write_set)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        codec::to_canonical(self)
    }

    /// tx_id matches the proposal it claims to carry.
    pub fn is_well_formed(&self) -> bool {
        self.tx_id == self.proposal.tx_id()
    }
}

fn datasource_public_key(lookup: impl Fn(&str) -> Option<Vec<u8>>, datasource_id: &str) -> Option<Vec<u8>> {
    let raw = lookup(&chaincode::datasource_key(datasource_id))?;
    let record: DataSourceRecord = codec::from_canonical(&raw).ok()?;
    Some(record.public_key)
}

// ---------------------------------------------------------------------------
// Endorsement
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EndorsementResponse {
    Endorsed { rw: RwSet, signature: Signature },
    Failed(ChaincodeError),
    BadClientSignature,
    Unavailable,
}

/// Runs the proposal on one endorsing peer against its committed state.
/// Never modifies the state.
pub fn simulate_endorsement(peer: &Credential, state: &WorldState, proposal: &Proposal) -> EndorsementResponse {
    let Some(client_key) = datasource_public_key(|k| state.get(k).map(|e| e.value.clone()), &proposal.submitter) else {
        return EndorsementResponse::Failed(ChaincodeError::UnregisteredSubmitter(proposal.submitter.clone()));
    };
    if !proposal.verify_client_signature(&client_key) {
        return EndorsementResponse::BadClientSignature;
    }
    match chaincode::function_kind(&proposal.function) {
        Some(FunctionKind::Append) => {}
        Some(FunctionKind::Query) => {
            return EndorsementResponse::Failed(ChaincodeError::BadArguments(format!(
                "{} is read-only and is never ordered",
                proposal.function
            )))
        }
        None => return EndorsementResponse::Failed(ChaincodeError::UnknownFunction(proposal.function.clone())),
    }
    match chaincode::dispatch(state, &proposal.submitter, &proposal.function, &proposal.args) {
        Ok(ChaincodeResult::Write(rw)) => {
            let msg = endorsement_message(&proposal.tx_id(), &rw.read_set, &rw.write_set);
            EndorsementResponse::Endorsed { signature: peer.sign(&msg), rw }
        }
        Ok(ChaincodeResult::Rows(_)) => {
            EndorsementResponse::Failed(ChaincodeError::BadArguments("query produced no write set".into()))
        }
        Err(e) => EndorsementResponse::Failed(e),
    }
}

/// Collects endorser responses into an envelope if at least `required`
/// policy endorsers returned byte-identical read/write sets.
pub fn assemble_endorsements(
    proposal: &Proposal,
    responses: &[(String, EndorsementResponse)],
    policy: &EndorsementPolicy,
) -> Result<TransactionEnvelope, EndorseError> {
    let mut groups: Vec<(Vec<u8>, &RwSet, Vec<Signature>)> = Vec::new();
    let mut errors: Vec<(&ChaincodeError, u32)> = Vec::new();
    let mut bad_client = false;
    let mut seen = BTreeSet::new();

    for (peer_id, response) in responses {
        if !policy.endorsers.contains(peer_id) || !seen.insert(peer_id) {
            continue;
        }
        match response {
            EndorsementResponse::Endorsed { rw, signature } => {
                let key = codec::to_canonical(rw);
                match groups.iter_mut().find(|(k, _, _)| *k == key) {
                    Some((_, _, sigs)) => sigs.push(signature.clone()),
                    None => groups.push((key, rw, vec![signature.clone()])),
                }
            }
            EndorsementResponse::Failed(e) => match errors.iter_mut().find(|(known, _)| *known == e) {
                Some((_, n)) => *n += 1,
                None => errors.push((e, 1)),
            },
            EndorsementResponse::BadClientSignature => bad_client = true,
            EndorsementResponse::Unavailable => {}
        }
    }

    let best =
        groups.iter().enumerate().max_by_key(|(i, (_, _, sigs))| (sigs.len(), std::cmp::Reverse(*i))).map(|(_, g)| g);
    let matching = best.map_or(0, |(_, _, sigs)| sigs.len() as u32);
    if let Some((_, rw, sigs)) = best {
        if matching >= policy.required {
            return Ok(TransactionEnvelope {
                tx_id: proposal.tx_id(),
                proposal: proposal.clone(),
                read_set: rw.read_set.clone(),
                write_set: rw.write_set.clone(),
                endorsements: sigs.clone(),
            });
        }
    }
    if bad_client {
        return Err(EndorseError::BadClientSignature);
    }
    if let Some((err, _)) = errors.iter().find(|(_, n)| *n >= policy.required) {
        return Err(EndorseError::Chaincode((*err).clone()));
    }
    Err(EndorseError::PolicyUnsatisfied { required: policy.required, matching })
}

/// An endorsing peer as seen by a client: its key and committed state.
#[derive(Debug, Clone, Copy)]
pub struct EndorsingPeer<'a> {
    pub credential: &'a Credential,
    pub state: &'a WorldState,
    pub online: bool,
}

pub fn endorse(
    proposal: &Proposal,
    endorsers: &[EndorsingPeer<'_>],
    policy: &EndorsementPolicy,
) -> Result<TransactionEnvelope, EndorseError> {
    let responses: Vec<_> = endorsers
        .iter()
        .map(|peer| {
            let response = if peer.online {
                simulate_endorsement(peer.credential, peer.state, proposal)
            } else {
                EndorsementResponse::Unavailable
            };
            (peer.credential.participant_id.clone(), response)
        })
        .collect();
    assemble_endorsements(proposal, &responses, policy)
}

// ---------------------------------------------------------------------------
// System transactions
// ---------------------------------------------------------------------------

fn genesis_rw(config: &ChannelConfig) -> RwSet {
    let mut write_set = vec![WriteEntry { key: CONFIG_KEY.into(), value: codec::to_canonical(config) }];
    for record in &config.datasources {
        write_set.push(WriteEntry {
            key: chaincode::datasource_key(&record.datasource_id),
            value: codec::to_canonical(record),
        });
    }
    RwSet { read_set: vec![], write_set }
}

fn registration_rw(record: &DataSourceRecord) -> RwSet {
    let key = chaincode::datasource_key(&record.datasource_id);
    RwSet {
        read_set: vec![ReadEntry { key: key.clone(), version: None }],
        write_set: vec![WriteEntry { key, value: codec::to_canonical(record) }],
    }
}

fn system_envelope(
    admin: &Credential,
    channel_id: &str,
    function: &str,
    arg: String,
    rw: RwSet,
    nonce: [u8; 8],
) -> TransactionEnvelope {
    let proposal = Proposal::new(admin, channel_id, function, vec![arg], nonce);
    TransactionEnvelope {
        tx_id: proposal.tx_id(),
        proposal,
        read_set: rw.read_set,
        write_set: rw.write_set,
        endorsements: vec![],
    }
}

/// Channel configuration carried by a genesis transaction, if it is one.
pub fn config_from_genesis_tx(tx: &TransactionEnvelope) -> Option<ChannelConfig> {
    if tx.proposal.function != FN_CONFIGURE_CHANNEL {
        return None;
    }
    let [raw] = tx.proposal.args.as_slice() else { return None };
    codec::from_canonical(raw.as_bytes()).ok()
}

fn sign_header(orderer: &Credential, header: BlockHeader, transactions: Vec<TransactionEnvelope>) -> Block {
    let orderer_signature = orderer.sign(&codec::to_canonical(&header));
    Block { header, orderer_signature, transactions, validity_flags: vec![] }
}

/// Block 0: a single configuration transaction signed by the orderer.
pub fn genesis_block(config: &ChannelConfig, orderer: &Credential, timestamp: u64) -> Result<Block, TxFlowError> {
    config.validate()?;
    if orderer.participant_id != config.orderer_id || orderer.public_key().as_slice() != config.orderer_public_key {
        return Err(TxFlowError::InvalidConfig("orderer credential does not match configuration".into()));
    }
    let env = system_envelope(
        orderer,
        &config.channel_id,
        FN_CONFIGURE_CHANNEL,
        codec::to_canonical_string(config),
        genesis_rw(config),
        [0u8; 8],
    );
    let transactions = vec![env];
    let header = BlockHeader {
        block_number: 0,
        previous_hash: Digest::ZERO,
        data_hash: crate::ledger::compute_data_hash(&transactions),
        timestamp,
    };
    let mut block = sign_header(orderer, header, transactions);
    block.validity_flags = vec![ValidityFlag::Valid];
    Ok(block)
}

/// A DataSource registration, ordered like any other transaction.
pub fn registration_envelope(
    admin: &Credential,
    channel_id: &str,
    record: &DataSourceRecord,
    nonce: [u8; 8],
) -> TransactionEnvelope {
    system_envelope(
        admin,
        channel_id,
        FN_REGISTER_DATASOURCE,
        codec::to_canonical_string(record),
        registration_rw(record),
        nonce,
    )
}

// ---------------------------------------------------------------------------
// Ordering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DroppedEnvelope {
    pub tx_id: Digest,
    pub reason: String,
}

/// Single-node FIFO ordering service for one channel.
#[derive(Debug, Clone)]
pub struct OrderingService {
    channel_id: String,
    orderer: Credential,
    config: OrderingConfig,
    pending: VecDeque<(TransactionEnvelope, u64)>,
    next_number: u64,
    previous_hash: Digest,
    last_timestamp: u64,
    dropped: Vec<DroppedEnvelope>,
}

impl OrderingService {
    /// Continues ordering after `tip` (the last block already on the chain).
    pub fn new(channel_id: impl Into<String>, orderer: Credential, config: OrderingConfig, tip: &Block) -> Self {
        OrderingService {
            channel_id: channel_id.into(),
            orderer,
            config,
            pending: VecDeque::new(),
            next_number: tip.header.block_number + 1,
            previous_hash: tip.hash(),
            last_timestamp: tip.header.timestamp,
            dropped: vec![],
        }
    }

    pub fn channel_id(&self) -> &str {
        &self.channel_id
    }

    pub fn config(&self) -> &OrderingConfig {
        &self.config
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn dropped(&self) -> &[DroppedEnvelope] {
        &self.dropped
    }

    /// Accepts an envelope into the FIFO queue. Envelopes for another
    /// channel, or whose `tx_id` does not match their proposal, are dropped
    /// and logged.
    pub fn submit(&mut self, envelope: TransactionEnvelope, now_ms: u64) -> Result<(), OrderError> {
        let reason = if envelope.proposal.channel_id != self.channel_id {
            Some(format!(
                "envelope for channel {} sent to orderer of {}",
                envelope.proposal.channel_id, self.channel_id
            ))
        } else if !envelope.is_well_formed() {
            Some("tx_id does not match proposal".to_string())
        } else {
            None
        };
        if let Some(reason) = reason {
            log::warn!("dropping envelope {}: {reason}", envelope.tx_id);
            self.dropped.push(DroppedEnvelope { tx_id: envelope.tx_id, reason: reason.clone() });
            return Err(OrderError::Rejected(reason));
        }
        self.pending.push_back((envelope, now_ms));
        Ok(())
    }

    /// When the current batch times out, if anything is pending.
    pub fn next_deadline(&self) -> Option<u64> {
        self.pending.front().map(|(_, arrived)| arrived + self.config.max_wait_ms)
    }

    /// Cuts every block that is due at `now_ms`.
    pub fn poll(&mut self, now_ms: u64) -> Vec<Block> {
        let max = self.config.max_block_txs.max(1) as usize;
        let mut blocks = Vec::new();
        while self.pending.len() >= max {
            blocks.push(self.cut(max, now_ms));
        }
        if self.next_deadline().is_some_and(|deadline| deadline <= now_ms) {
            let n = self.pending.len();
            blocks.push(self.cut(n, now_ms));
        }
        blocks
    }

    /// Cuts everything pending regardless of the timeout.
    pub fn flush(&mut self, now_ms: u64) -> Vec<Block> {
        let max = self.config.max_block_txs.max(1) as usize;
        let mut blocks = Vec::new();
        while !self.pending.is_empty() {
            let n = self.pending.len().min(max);
            blocks.push(self.cut(n, now_ms));
        }
        blocks
    }

    fn cut(&mut self, n: usize, now_ms: u64) -> Block {
        let transactions: Vec<_> = self.pending.drain(..n).map(|(env, _)| env).collect();
        self.last_timestamp = self.last_timestamp.max(now_ms);
        let header = BlockHeader {
            block_number: self.next_number,
            previous_hash: self.previous_hash,
            data_hash: crate::ledger::compute_data_hash(&transactions),
            timestamp: self.last_timestamp,
        };
        let block = sign_header(&self.orderer, header, transactions);
        self.next_number += 1;
        self.previous_hash = block.hash();
        block
    }
}

/// Orders `envelopes` into blocks after `tip`, cutting at `max_block_txs`;
/// the final partial batch is cut as if its wait had expired.
pub fn order(
    envelopes: Vec<TransactionEnvelope>,
    config: &OrderingConfig,
    orderer: &Credential,
    tip: &Block,
    now_ms: u64,
) -> Vec<Block> {
    let channel_id = tip.transactions.first().map(|tx| tx.proposal.channel_id.clone()).unwrap_or_default();
    let mut service = OrderingService::new(channel_id, orderer.clone(), config.clone(), tip);
    let mut blocks = Vec::new();
    for env in envelopes {
        if service.submit(env, now_ms).is_ok() {
            blocks.extend(service.poll(now_ms));
        }
    }
    blocks.extend(service.poll(now_ms + config.max_wait_ms));
    blocks
}

// ---------------------------------------------------------------------------
// Validation and commit
// ---------------------------------------------------------------------------

/// Committed state plus the writes of earlier valid transactions in the
/// block being validated.
struct BlockView<'a> {
    state: &'a WorldState,
    overlay: HashMap<String, (Vec<u8>, Version)>,
}

impl BlockView<'_> {
    fn version(&self, key: &str) -> Option<Version> {
        self.overlay.get(key).map(|(_, v)| *v).or_else(|| self.state.version_of(key))
    }

    fn value(&self, key: &str) -> Option<Vec<u8>> {
        self.overlay.get(key).map(|(v, _)| v.clone()).or_else(|| self.state.get(key).map(|e| e.value.clone()))
    }

    fn apply(&mut self, writes: &[WriteEntry], version: Version) {
        for w in writes {
            self.overlay.insert(w.key.clone(), (w.value.clone(), version));
        }
    }

    fn reads_are_current(&self, reads: &[ReadEntry]) -> bool {
        reads.iter().all(|r| self.version(&r.key) == r.version)
    }
}

fn check_genesis_tx(tx: &TransactionEnvelope, block_number: u64, index: usize) -> ValidityFlag {
    if block_number != 0 || index != 0 {
        return ValidityFlag::PolicyFail;
    }
    let Some(config) = config_from_genesis_tx(tx) else {
        return ValidityFlag::PolicyFail;
    };
    if config.validate().is_err() || tx.proposal.channel_id != config.channel_id {
        return ValidityFlag::PolicyFail;
    }
    if tx.proposal.submitter != config.orderer_id || !tx.proposal.verify_client_signature(&config.orderer_public_key) {
        return ValidityFlag::BadSignature;
    }
    let expected = genesis_rw(&config);
    if !tx.endorsements.is_empty() || tx.read_set != expected.read_set || tx.write_set != expected.write_set {
        return ValidityFlag::PolicyFail;
    }
    ValidityFlag::Valid
}

fn check_registration_tx(tx: &TransactionEnvelope, view: &BlockView<'_>, config: &ChannelConfig) -> ValidityFlag {
    if tx.proposal.submitter != config.orderer_id {
        return ValidityFlag::PolicyFail;
    }
    if !tx.proposal.verify_client_signature(&config.orderer_public_key) {
        return ValidityFlag::BadSignature;
    }
    let record = match tx.proposal.args.as_slice() {
        [raw] => codec::from_canonical::<DataSourceRecord>(raw.as_bytes()).ok(),
        _ => None,
    };
    let Some(record) = record else {
        return ValidityFlag::PolicyFail;
    };
    let expected = registration_rw(&record);
    if record.descriptor().validate().is_err()
        || !tx.endorsements.is_empty()
        || tx.read_set != expected.read_set
        || tx.write_set != expected.write_set
    {
        return ValidityFlag::PolicyFail;
    }
    if !view.reads_are_current(&tx.read_set) {
        return ValidityFlag::MvccConflict;
    }
    ValidityFlag::Valid
}

fn check_chaincode_tx(tx: &TransactionEnvelope, view: &BlockView<'_>, config: &ChannelConfig) -> ValidityFlag {
    let Some(client_key) = datasource_public_key(|k| view.value(k), &tx.proposal.submitter) else {
        return ValidityFlag::BadSignature;
    };
    if !tx.proposal.verify_client_signature(&client_key) {
        return ValidityFlag::BadSignature;
    }

    let msg = tx.endorsement_message();
    let mut endorsed_by = BTreeSet::new();
    for endorsement in &tx.endorsements {
        if !config.policy.endorsers.contains(&endorsement.signer_id) {
            continue;
        }
        let Some(peer) = config.peer(&endorsement.signer_id) else {
            continue;
        };
        if !identity::verify_with_key(&peer.public_key, endorsement, &msg) {
            return ValidityFlag::BadSignature;
        }
        endorsed_by.insert(endorsement.signer_id.as_str());
    }
    if (endorsed_by.len() as u32) < config.policy.required {
        return ValidityFlag::PolicyFail;
    }

    let in_namespace = |key: &str| key.starts_with(chaincode::WEBLOG_PREFIX);
    if tx.write_set.is_empty()
        || !tx.write_set.iter().all(|w| in_namespace(&w.key))
        || !tx.read_set.iter().all(|r| in_namespace(&r.key))
    {
        return ValidityFlag::PolicyFail;
    }
    if !view.reads_are_current(&tx.read_set) {
        return ValidityFlag::MvccConflict;
    }
    ValidityFlag::Valid
}

/// Recomputes the validity flag of every transaction in `block`, in order,
/// against `state` as of the end of the previous block.
pub fn compute_validity_flags(block: &Block, state: &WorldState) -> Vec<ValidityFlag> {
    let block_number = block.header.block_number;
    let mut view = BlockView { state, overlay: HashMap::new() };
    let mut config = if block_number == 0 { None } else { state.channel_config() };
    let mut flags = Vec::with_capacity(block.transactions.len());

    for (index, tx) in block.transactions.iter().enumerate() {
        let flag = if !tx.is_well_formed() {
            ValidityFlag::BadSignature
        } else if tx.proposal.function == FN_CONFIGURE_CHANNEL {
            check_genesis_tx(tx, block_number, index)
        } else {
            match &config {
                None => ValidityFlag::PolicyFail,
                Some(c) if tx.proposal.channel_id != c.channel_id => ValidityFlag::PolicyFail,
                Some(c) => match tx.proposal.function.as_str() {
                    FN_REGISTER_DATASOURCE => check_registration_tx(tx, &view, c),
                    f if chaincode::function_kind(f) == Some(FunctionKind::Append) => check_chaincode_tx(tx, &view, c),
                    _ => ValidityFlag::PolicyFail,
                },
            }
        };
        if flag.is_valid() {
            view.apply(&tx.write_set, Version { block: block_number, tx: index as u64 });
            if tx.proposal.function == FN_CONFIGURE_CHANNEL {
                config = config_from_genesis_tx(tx);
            }
        }
        flags.push(flag);
    }
    flags
}

/// Fills in the validity flags of an ordered block.
pub fn validate(mut block: Block, state: &WorldState) -> Block {
    block.validity_flags = compute_validity_flags(&block, state);
    block
}

/// Persists a validated block (valid and invalid transactions alike) and
/// applies the valid write sets.
pub fn commit(ledger: &mut Ledger, block: Block) -> Result<(), LedgerError> {
    ledger.commit(block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaincode::{weblog_key, WebLogData};
    use crate::ledger::verify_chain;
    use crate::test_support::{asset, Fixture};

    #[test]
    fn policy_bounds() {
        let peers = |n: usize| (0..n).map(|i| format!("p{i}")).collect::<Vec<_>>();
        assert!(EndorsementPolicy::new(1, peers(1)).is_ok());
        assert_eq!(EndorsementPolicy::new(5, peers(3)), Err(TxFlowError::InvalidPolicy { required: 5, endorsers: 3 }));
        assert!(EndorsementPolicy::new(0, peers(3)).is_err());
        assert_eq!(EndorsementPolicy::majority(peers(4)).required, 3);
        assert_eq!(EndorsementPolicy::majority(peers(3)).required, 2);
        assert_eq!(EndorsementPolicy::majority(peers(1)).required, 1);
    }

    #[test]
    fn single_endorser() {
        let mut fx = Fixture::new(1, 1);
        let env = fx.append_envelope(&asset("w1", "10.0.0.1", "ua", 1));
        assert_eq!(env.endorsements.len(), 1);
        assert!(env.is_well_formed());
    }

    #[test]
    fn three_of_four_with_one_offline() {
        let mut fx = Fixture::new(4, 3);
        let proposal = fx.proposal(&asset("w1", "10.0.0.1", "ua", 1));
        // Every subset with one endorser missing still meets the policy;
        // any subset with two missing does not.
        for offline in 0..4 {
            let peers: Vec<_> = fx
                .peers
                .iter()
                .enumerate()
                .map(|(i, c)| EndorsingPeer { credential: c, state: &fx.ledger.state, online: i != offline })
                .collect();
            let env = endorse(&proposal, &peers, &fx.config.policy).unwrap();
            assert_eq!(env.endorsements.len(), 3);
        }
        for a in 0..4 {
            for b in a + 1..4 {
                let peers: Vec<_> = fx
                    .peers
                    .iter()
                    .enumerate()
                    .map(|(i, c)| EndorsingPeer { credential: c, state: &fx.ledger.state, online: i != a && i != b })
                    .collect();
                assert_eq!(
                    endorse(&proposal, &peers, &fx.config.policy),
                    Err(EndorseError::PolicyUnsatisfied { required: 3, matching: 2 })
                );
            }
        }
    }

    #[test]
    fn divergent_state_views_fail_the_policy() {
        let mut fx = Fixture::new(2, 2);
        let stale = fx.ledger.state.clone();
        let env = fx.append_envelope(&asset("w1", "10.0.0.1", "ua", 1));
        fx.commit_block(vec![env]);

        // peer1 never received block 1.
        let proposal = fx.proposal(&asset("w1", "10.0.0.1", "ua", 1));
        let peers = [
            EndorsingPeer { credential: &fx.peers[0], state: &fx.ledger.state, online: true },
            EndorsingPeer { credential: &fx.peers[1], state: &stale, online: true },
        ];
        assert_eq!(
            endorse(&proposal, &peers, &fx.config.policy),
            Err(EndorseError::PolicyUnsatisfied { required: 2, matching: 1 })
        );

        // With both in sync the duplicate is reported as a chaincode error.
        let peers = [
            EndorsingPeer { credential: &fx.peers[0], state: &fx.ledger.state, online: true },
            EndorsingPeer { credential: &fx.peers[1], state: &fx.ledger.state, online: true },
        ];
        assert_eq!(
            endorse(&proposal, &peers, &fx.config.policy),
            Err(EndorseError::Chaincode(ChaincodeError::DuplicateAsset("w1".into())))
        );
    }

    #[test]
    fn endorsement_leaves_state_untouched() {
        let mut fx = Fixture::new(3, 2);
        let before = fx.ledger.state.clone();
        fx.append_envelope(&asset("w1", "10.0.0.1", "ua", 1));
        assert_eq!(fx.ledger.state, before);
    }

    #[test]
    fn forged_client_signature() {
        let mut fx = Fixture::new(1, 1);
        let mut proposal = fx.proposal(&asset("w1", "10.0.0.1", "ua", 1));
        proposal.args[0] = proposal.args[0].replace("/w1", "/zz");
        let peers = [EndorsingPeer { credential: &fx.peers[0], state: &fx.ledger.state, online: true }];
        assert_eq!(endorse(&proposal, &peers, &fx.config.policy), Err(EndorseError::BadClientSignature));
    }

    #[test]
    fn queries_are_not_ordered() {
        let mut fx = Fixture::new(1, 1);
        let nonce = fx.next_nonce();
        let proposal = Proposal::new(&fx.client, "audit", chaincode::FN_SELECT_WEBLOG, vec!["ALL".into()], nonce);
        let peers = [EndorsingPeer { credential: &fx.peers[0], state: &fx.ledger.state, online: true }];
        assert!(matches!(
            endorse(&proposal, &peers, &fx.config.policy),
            Err(EndorseError::Chaincode(ChaincodeError::BadArguments(_)))
        ));
    }

    fn ordering_fixture(max: u32) -> (Fixture, Vec<TransactionEnvelope>) {
        let mut fx = Fixture::with_ordering(1, 1, OrderingConfig { max_block_txs: max, max_wait_ms: 50 });
        let envs = (0..5).map(|i| fx.append_envelope(&asset(&format!("o{i}"), "10.0.0.1", "ua", i))).collect();
        (fx, envs)
    }

    #[test]
    fn ordering_cuts_by_size_then_timeout() {
        let (mut fx, envs) = ordering_fixture(2);
        let mut sizes = vec![];
        for env in envs {
            fx.service.submit(env, 100).unwrap();
            sizes.extend(fx.service.poll(100).iter().map(|b| b.transactions.len()));
        }
        assert_eq!(sizes, [2, 2]);
        assert_eq!(fx.service.next_deadline(), Some(150));
        assert!(fx.service.poll(149).is_empty());
        let last = fx.service.poll(150);
        assert_eq!(last.iter().map(|b| b.transactions.len()).collect::<Vec<_>>(), [1]);
        assert_eq!(last[0].header.block_number, 3);

        // Nothing pending: the timer produces no block.
        assert!(fx.service.poll(10_000).is_empty());
        assert_eq!(fx.service.next_deadline(), None);
    }

    #[test]
    fn order_function_matches_service() {
        let (fx, envs) = ordering_fixture(2);
        let genesis = fx.ledger.chain.get_block(0).unwrap();
        let blocks = order(envs, &OrderingConfig { max_block_txs: 2, max_wait_ms: 50 }, &fx.orderer, genesis, 5);
        assert_eq!(blocks.iter().map(|b| b.transactions.len()).collect::<Vec<_>>(), [2, 2, 1]);
        assert_eq!(blocks[0].header.previous_hash, genesis.hash());
        assert_eq!(blocks[1].header.previous_hash, blocks[0].hash());
    }

    #[test]
    fn single_envelope_times_out_into_a_block() {
        let (mut fx, mut envs) = ordering_fixture(10);
        fx.service.submit(envs.remove(0), 0).unwrap();
        assert!(fx.service.poll(49).is_empty());
        let blocks = fx.service.poll(50);
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].transactions.len(), 1);
        assert_eq!(blocks[0].header.timestamp, 1_000, "orderer clock never goes backwards");
    }

    #[test]
    fn orderer_rejects_foreign_and_malformed_envelopes() {
        let (mut fx, mut envs) = ordering_fixture(10);
        let mut foreign = envs.remove(0);
        foreign.proposal.channel_id = "other".into();
        assert!(fx.service.submit(foreign, 0).is_err());
        let mut mangled = envs.remove(0);
        mangled.tx_id = Digest([1; 32]);
        assert!(fx.service.submit(mangled, 0).is_err());
        assert_eq!(fx.service.dropped().len(), 2);
        assert_eq!(fx.service.pending(), 0);
    }

    #[test]
    fn same_asset_twice_in_one_block() {
        let mut fx = Fixture::new(2, 2);
        let data = asset("dup", "10.0.0.1", "ua", 1);
        let first = fx.append_envelope(&data);
        let second = fx.append_envelope(&data);
        let block = fx.commit_block(vec![first, second]);
        assert_eq!(block.validity_flags, [ValidityFlag::Valid, ValidityFlag::MvccConflict]);
        assert_eq!(fx.ledger.state.version_of(&weblog_key("dup")), Some(Version { block: 1, tx: 0 }));
        assert_eq!(fx.ledger.chain.get_block(1).unwrap().transactions.len(), 2);
    }

    #[test]
    fn distinct_assets_are_both_valid() {
        let mut fx = Fixture::new(2, 1);
        let a = fx.append_envelope(&asset("a", "10.0.0.1", "ua", 1));
        let b = fx.append_envelope(&asset("b", "10.0.0.1", "ua", 1));
        let block = fx.commit_block(vec![a, b]);
        assert_eq!(block.validity_flags, [ValidityFlag::Valid, ValidityFlag::Valid]);
    }

    #[test]
    fn too_few_endorsements_is_policy_fail() {
        let mut fx = Fixture::new(3, 2);
        let mut env = fx.append_envelope(&asset("a", "10.0.0.1", "ua", 1));
        env.endorsements.truncate(1);
        let block = fx.commit_block(vec![env]);
        assert_eq!(block.validity_flags, [ValidityFlag::PolicyFail]);
        assert!(fx.ledger.state.get(&weblog_key("a")).is_none());
        assert!(verify_chain(&fx.ledger.chain).ok);
    }

    #[test]
    fn forged_endorsement_is_bad_signature() {
        let mut fx = Fixture::new(2, 1);
        let mut env = fx.append_envelope(&asset("a", "10.0.0.1", "ua", 1));
        env.write_set[0].value =
            codec::to_canonical(&WebLogData { url: "/forged".into(), ..asset("a", "10.0.0.1", "ua", 1) });
        let block = fx.commit_block(vec![env]);
        assert_eq!(block.validity_flags, [ValidityFlag::BadSignature]);
    }

    #[test]
    fn endorser_cannot_write_outside_asset_namespace() {
        let mut fx = Fixture::new(1, 1);
        let proposal = fx.proposal(&asset("a", "10.0.0.1", "ua", 1));
        let read_set = vec![];
        let write_set = vec![WriteEntry { key: CONFIG_KEY.into(), value: b"{}".to_vec() }];
        let tx_id = proposal.tx_id();
        let sig = fx.peers[0].sign(&endorsement_message(&tx_id, &read_set, &write_set));
        let env = TransactionEnvelope { tx_id, proposal, read_set, write_set, endorsements: vec![sig] };
        let block = fx.commit_block(vec![env]);
        assert_eq!(block.validity_flags, [ValidityFlag::PolicyFail]);
    }

    #[test]
    fn commit_keeps_invalid_transactions_but_not_their_writes() {
        let mut fx = Fixture::new(1, 1);
        let a = fx.append_envelope(&asset("a", "10.0.0.1", "ua", 1));
        let a_again = fx.append_envelope(&asset("a", "10.0.0.1", "ua", 1));
        let before = fx.ledger.state.clone();
        let block = fx.commit_block(vec![a, a_again]);
        assert_eq!(block.validity_flags, [ValidityFlag::Valid, ValidityFlag::MvccConflict]);
        let mut expected = before.clone();
        expected.apply(&block.transactions[0].write_set, Version { block: 1, tx: 0 });
        assert_eq!(fx.ledger.state, expected);

        // An all-invalid block grows the chain and leaves state alone.
        let stale = fx.append_envelope(&asset("b", "10.0.0.1", "ua", 1));
        let mut stale = stale;
        stale.endorsements.clear();
        let state_before = fx.ledger.state.clone();
        fx.commit_block(vec![stale]);
        assert_eq!(fx.ledger.chain.len(), 3);
        assert_eq!(fx.ledger.state, state_before);
    }

    #[test]
    fn registration_goes_through_the_chain() {
        use rand::SeedableRng;
        let mut fx = Fixture::new(1, 1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let descriptor = identity::DataSource {
            datasource_id: "ds2".into(),
            ip: "::1".into(),
            port: 443,
            username: "u".into(),
            url: "https://log".into(),
        };
        let (record, cred) = identity::new_datasource_record(&descriptor, "pw2", &mut rng).unwrap();
        let reg = registration_envelope(&fx.orderer, "audit", &record, [1; 8]);
        let reg_again = registration_envelope(&fx.orderer, "audit", &record, [2; 8]);

        // ds2 appends in the same block, after its registration.
        let data = asset("from-ds2", "::1", "ua", 5);
        let p = Proposal::new(&cred, "audit", chaincode::FN_DATA_APPEND, chaincode::append_args(&data), [3; 8]);
        let mut staged = fx.ledger.state.clone();
        staged.apply(&reg.write_set, Version { block: 1, tx: 0 });
        let peers = [EndorsingPeer { credential: &fx.peers[0], state: &staged, online: true }];
        let env = endorse(&p, &peers, &fx.config.policy).unwrap();

        let block = fx.commit_block(vec![reg, reg_again, env]);
        assert_eq!(block.validity_flags, [ValidityFlag::Valid, ValidityFlag::MvccConflict, ValidityFlag::Valid]);
        assert!(verify_chain(&fx.ledger.chain).ok);

        // Only the orderer may register participants.
        let forged = registration_envelope(&fx.client, "audit", &record, [4; 8]);
        let block = fx.commit_block(vec![forged]);
        assert_eq!(block.validity_flags, [ValidityFlag::PolicyFail]);
    }
}
