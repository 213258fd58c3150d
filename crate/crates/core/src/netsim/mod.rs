//! In-process multi-peer, multi-channel network.
//!
//! [`Network`] is a synchronous gateway: every call runs the whole
//! transaction pipeline before returning, then pushes the new blocks to the
//! member peers. The CLI and the ingestion module drive it directly. [`run_scenario`] drives the same structures from a seeded
//! discrete-event queue to measure throughput and latency.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chaincode::{self, ChaincodeError, QuerySpec, WebLogData, FN_DATA_APPEND};
use crate::codec::{self, Digest};
use crate::identity::{self, Credential, DataSource, IdentityError, Registry};
use crate::ledger::{self, Block, Chain, Ledger, LedgerError, ValidityFlag, WorldState};
use crate::txflow::{
    self, ChannelConfig, EndorseError, EndorsementPolicy, EndorsingPeer, OrderError, OrderingConfig, OrderingService,
    PeerInfo, Proposal, TransactionEnvelope, TxFlowError,
};

mod config;
mod scenario;

pub use config::{ChannelSpec as ScenarioChannel, NetworkParams, PeerSpec, Pipeline, ScenarioConfig, WorkloadSpec};
pub use scenario::{
    replay_order_execute, run_order_execute_baseline, run_scenario, ChannelMetrics, ScenarioMetrics, ScenarioRun,
    TamperEvent,
};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid scenario configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown channel {0}")]
    UnknownChannel(String),
    #[error("unknown peer {0}")]
    UnknownPeer(String),
    #[error("channel {0} already exists")]
    ChannelExists(String),
    #[error("peer {0} already exists")]
    PeerExists(String),
    #[error("{participant} is not a member of channel {channel}")]
    NotAMember { participant: String, channel: String },
    #[error("authentication failed for {0}")]
    Unauthorized(String),
    #[error("peer {peer} detected tampering in channel {channel} at block {block_number}")]
    TamperDetected { peer: String, channel: String, block_number: u64 },
    #[error("registration of {id} was not committed: {flag:?}")]
    RegistrationRejected { id: String, flag: ValidityFlag },
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    TxFlow(#[from] TxFlowError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Chaincode(#[from] ChaincodeError),
    #[error(transparent)]
    Order(#[from] OrderError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultMode {
    Honest,
    /// Unreachable for simulated times in `[from_ms, until_ms)`.
    Offline {
        from_ms: u64,
        until_ms: u64,
    },
    /// XORs `mask` into byte `offset` (modulo the record length) of its
    /// stored copy of `block_number` once that block is committed locally.
    Tampering {
        block_number: u64,
        offset: u64,
        mask: u8,
    },
}

impl FaultMode {
    pub fn is_offline_at(&self, now_ms: u64) -> bool {
        matches!(*self, FaultMode::Offline { from_ms, until_ms } if (from_ms..until_ms).contains(&now_ms))
    }
}

/// Where a peer found a problem it refused to accept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TamperReport {
    pub block_number: u64,
    pub detail: String,
}

/// A peer's copy of one channel.
#[derive(Debug, Clone)]
pub struct PeerChannel {
    pub ledger: Ledger,
    pub endorser: bool,
    pub halted: Option<TamperReport>,
    /// Stored image after local tampering; `None` while the copy is intact.
    disk: Option<Vec<u8>>,
}

impl PeerChannel {
    fn new(canonical: &Ledger, endorser: bool) -> Self {
        PeerChannel {
            ledger: Ledger { chain: canonical.chain.detached(), state: canonical.state.clone() },
            endorser,
            halted: None,
            disk: None,
        }
    }

    /// Digest of the block file as the peer currently stores it.
    pub fn chain_digest(&self) -> Digest {
        match &self.disk {
            Some(image) => codec::sha256(image),
            None => self.ledger.chain.digest(),
        }
    }

    pub fn stored_image(&self) -> &[u8] {
        self.disk.as_deref().unwrap_or(self.ledger.chain.image())
    }

    pub fn is_halted(&self) -> bool {
        self.halted.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct Peer {
    pub credential: Credential,
    pub fault: FaultMode,
    /// Reachability in synchronous mode.
    pub online: bool,
    pub channels: BTreeMap<String, PeerChannel>,
    /// Chaincode invocations this peer has run, across channels.
    pub executions: u64,
    pub(crate) busy_until_us: u64,
}

impl Peer {
    pub fn id(&self) -> &str {
        &self.credential.participant_id
    }
}

/// A channel's configuration, ordering service and canonical ledger.
#[derive(Debug, Clone)]
pub struct Channel {
    pub config: ChannelConfig,
    pub orderer: OrderingService,
    pub ledger: Ledger,
}

impl Channel {
    pub fn id(&self) -> &str {
        &self.config.channel_id
    }

    pub fn members(&self) -> impl Iterator<Item = &str> {
        self.config.peers.iter().map(|p| p.peer_id.as_str())
    }

    /// Registered DataSources, read from the committed world state.
    pub fn registry(&self) -> Registry {
        registry_from_state(&self.ledger.state)
    }
}

pub fn registry_from_state(state: &WorldState) -> Registry {
    let mut registry = Registry::new();
    for (_, entry) in state.scan_prefix(chaincode::DATASOURCE_PREFIX) {
        if let Ok(record) = codec::from_canonical(&entry.value) {
            let _ = registry.insert_record(record);
        }
    }
    registry
}

/// Parameters for a new channel.
#[derive(Debug, Clone)]
pub struct ChannelSpec {
    pub channel_id: String,
    pub peers: Vec<String>,
    /// Defaults to every member peer.
    pub endorsers: Option<Vec<String>>,
    /// Defaults to a majority of the endorsers.
    pub required: Option<u32>,
    pub ordering: OrderingConfig,
    pub datasources: Vec<identity::DataSourceRecord>,
    /// Block file; `None` keeps the canonical chain in memory.
    pub storage: Option<PathBuf>,
}

impl ChannelSpec {
    pub fn new(channel_id: impl Into<String>, peers: &[&str]) -> Self {
        ChannelSpec {
            channel_id: channel_id.into(),
            peers: peers.iter().map(|p| p.to_string()).collect(),
            endorsers: None,
            required: None,
            ordering: OrderingConfig::default(),
            datasources: vec![],
            storage: None,
        }
    }
}

/// What happened to one submitted proposal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppendOutcome {
    Committed { tx_id: Digest, block_number: u64 },
    Invalid { tx_id: Digest, block_number: u64, flag: ValidityFlag },
    Rejected { tx_id: Digest, error: EndorseError },
    Dropped { tx_id: Digest, reason: String },
}

impl AppendOutcome {
    pub fn tx_id(&self) -> Digest {
        match self {
            AppendOutcome::Committed { tx_id, .. }
            | AppendOutcome::Invalid { tx_id, .. }
            | AppendOutcome::Rejected { tx_id, .. }
            | AppendOutcome::Dropped { tx_id, .. } => *tx_id,
        }
    }

    pub fn is_committed(&self) -> bool {
        matches!(self, AppendOutcome::Committed { .. })
    }

    /// A duplicate asset, refused at endorsement or lost to MVCC.
    pub fn is_duplicate(&self) -> bool {
        matches!(
            self,
            AppendOutcome::Rejected { error: EndorseError::Chaincode(ChaincodeError::DuplicateAsset(_)), .. }
                | AppendOutcome::Invalid { flag: ValidityFlag::MvccConflict, .. }
        )
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub(crate) orderer: Credential,
    pub(crate) peers: BTreeMap<String, Peer>,
    pub(crate) channels: BTreeMap<String, Channel>,
    rng: ChaCha8Rng,
    clock_ms: u64,
    nonce: u64,
}

impl Network {
    /// A network whose orderer key is drawn from `seed`.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let orderer = Credential::generate("orderer", &mut rng);
        Self::with_orderer(orderer, rng)
    }

    pub fn with_orderer(orderer: Credential, rng: ChaCha8Rng) -> Self {
        Network { orderer, peers: BTreeMap::new(), channels: BTreeMap::new(), rng, clock_ms: 0, nonce: 0 }
    }

    pub fn orderer(&self) -> &Credential {
        &self.orderer
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    /// Block timestamps are taken from this clock; it never runs backwards.
    pub fn set_clock(&mut self, now_ms: u64) {
        self.clock_ms = self.clock_ms.max(now_ms);
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn next_nonce(&mut self) -> [u8; 8] {
        self.nonce += 1;
        self.nonce.to_be_bytes()
    }

    /// Adds a peer with a fresh key pair.
    pub fn add_peer(&mut self, peer_id: &str) -> Result<&Credential, NetError> {
        let credential = Credential::generate(peer_id, &mut self.rng);
        self.add_peer_with_credential(credential)
    }

    pub fn add_peer_with_credential(&mut self, credential: Credential) -> Result<&Credential, NetError> {
        let id = credential.participant_id.clone();
        if self.peers.contains_key(&id) || id == self.orderer.participant_id {
            return Err(NetError::PeerExists(id));
        }
        let peer = Peer {
            credential,
            fault: FaultMode::Honest,
            online: true,
            channels: BTreeMap::new(),
            executions: 0,
            busy_until_us: 0,
        };
        Ok(&self.peers.entry(id).or_insert(peer).credential)
    }

    pub fn peer(&self, peer_id: &str) -> Option<&Peer> {
        self.peers.get(peer_id)
    }

    pub fn peers(&self) -> impl Iterator<Item = &Peer> {
        self.peers.values()
    }

    pub fn channel(&self, channel_id: &str) -> Option<&Channel> {
        self.channels.get(channel_id)
    }

    pub fn channels(&self) -> impl Iterator<Item = &Channel> {
        self.channels.values()
    }

    pub fn set_peer_online(&mut self, peer_id: &str, online: bool) -> Result<(), NetError> {
        let peer = self.peers.get_mut(peer_id).ok_or_else(|| NetError::UnknownPeer(peer_id.into()))?;
        peer.online = online;
        Ok(())
    }

    pub fn set_fault(&mut self, peer_id: &str, fault: FaultMode) -> Result<(), NetError> {
        let peer = self.peers.get_mut(peer_id).ok_or_else(|| NetError::UnknownPeer(peer_id.into()))?;
        peer.fault = fault;
        Ok(())
    }

    fn channel_ref(&self, channel_id: &str) -> Result<&Channel, NetError> {
        self.channels.get(channel_id).ok_or_else(|| NetError::UnknownChannel(channel_id.into()))
    }

    /// Writes a genesis block for a new channel and has every member peer
    /// join it.
    pub fn create_channel(&mut self, spec: ChannelSpec) -> Result<(), NetError> {
        if self.channels.contains_key(&spec.channel_id) {
            return Err(NetError::ChannelExists(spec.channel_id));
        }
        let mut peers = Vec::new();
        let endorsers = spec.endorsers.clone().unwrap_or_else(|| spec.peers.clone());
        for id in &spec.peers {
            let peer = self.peers.get(id).ok_or_else(|| NetError::UnknownPeer(id.clone()))?;
            peers.push(PeerInfo {
                peer_id: id.clone(),
                public_key: peer.credential.public_key().to_vec(),
                endorser: endorsers.contains(id),
            });
        }
        if let Some(e) = endorsers.iter().find(|e| !spec.peers.contains(e)) {
            return Err(NetError::NotAMember { participant: e.clone(), channel: spec.channel_id });
        }
        let policy = match spec.required {
            Some(k) => EndorsementPolicy::new(k, endorsers)?,
            None => EndorsementPolicy::majority(endorsers),
        };
        let config = ChannelConfig {
            channel_id: spec.channel_id.clone(),
            orderer_id: self.orderer.participant_id.clone(),
            orderer_public_key: self.orderer.public_key().to_vec(),
            peers,
            policy,
            ordering: spec.ordering.clone(),
            datasources: spec.datasources,
        };
        let genesis = txflow::genesis_block(&config, &self.orderer, self.clock_ms)?;
        let genesis = txflow::validate(genesis, &WorldState::new());
        let chain = match &spec.storage {
            Some(path) => Chain::create(path)?,
            None => Chain::new(),
        };
        let mut ledger = Ledger { chain, state: WorldState::new() };
        ledger.commit(genesis)?;
        self.install_channel(ledger)
    }

    /// Loads an existing chain (verified and replayed) and has its member
    /// peers join. Every member peer must already be known.
    pub fn open_channel(&mut self, chain: Chain) -> Result<(), NetError> {
        let ledger = Ledger::new(chain)?;
        let config = ledger.config().ok_or_else(|| NetError::InvalidConfig("chain has no configuration".into()))?;
        if self.channels.contains_key(&config.channel_id) {
            return Err(NetError::ChannelExists(config.channel_id));
        }
        if config.orderer_public_key != self.orderer.public_key() {
            return Err(NetError::InvalidConfig(format!(
                "channel {} was created by a different orderer",
                config.channel_id
            )));
        }
        if let Some(tip) = ledger.chain.tip() {
            self.set_clock(tip.header.timestamp);
        }
        self.install_channel(ledger)
    }

    fn install_channel(&mut self, ledger: Ledger) -> Result<(), NetError> {
        let config = ledger.config().expect("genesis committed");
        for info in &config.peers {
            let peer = self.peers.get(&info.peer_id).ok_or_else(|| NetError::UnknownPeer(info.peer_id.clone()))?;
            if peer.credential.public_key()[..] != info.public_key[..] {
                return Err(NetError::InvalidConfig(format!("key mismatch for peer {}", info.peer_id)));
            }
        }
        for info in &config.peers {
            let peer = self.peers.get_mut(&info.peer_id).expect("checked above");
            peer.channels.insert(config.channel_id.clone(), PeerChannel::new(&ledger, info.endorser));
        }
        let tip = ledger.chain.tip().expect("genesis committed");
        let orderer = OrderingService::new(&config.channel_id, self.orderer.clone(), config.ordering.clone(), tip);
        self.channels.insert(config.channel_id.clone(), Channel { config, orderer, ledger });
        Ok(())
    }

    /// Commits an orderer-signed registration transaction and returns the
    /// new DataSource's signing credential.
    pub fn register_datasource(
        &mut self,
        channel_id: &str,
        descriptor: &DataSource,
        password: &str,
    ) -> Result<Credential, NetError> {
        let channel = self.channel_ref(channel_id)?;
        if channel.ledger.state.get(&chaincode::datasource_key(&descriptor.datasource_id)).is_some() {
            return Err(IdentityError::DuplicateParticipant(descriptor.datasource_id.clone()).into());
        }
        let (record, credential) = identity::new_datasource_record(descriptor, password, &mut self.rng)?;
        let nonce = self.next_nonce();
        let envelope = txflow::registration_envelope(&self.orderer, channel_id, &record, nonce);
        let tx_id = envelope.tx_id;
        let now = self.tick();
        let channel = self.channels.get_mut(channel_id).expect("checked above");
        channel.orderer.submit(envelope, now)?;
        let blocks = channel.orderer.flush(now);
        let mut flag = ValidityFlag::PolicyFail;
        for block in blocks {
            let block = txflow::validate(block, &channel.ledger.state);
            if let Some(i) = block.transactions.iter().position(|tx| tx.tx_id == tx_id) {
                flag = block.validity_flags[i];
            }
            channel.ledger.commit(block)?;
        }
        self.deliver_quietly(channel_id);
        if flag.is_valid() {
            Ok(credential)
        } else {
            Err(NetError::RegistrationRejected { id: descriptor.datasource_id.clone(), flag })
        }
    }

    pub fn registry(&self, channel_id: &str) -> Result<Registry, NetError> {
        Ok(self.channel_ref(channel_id)?.registry())
    }

    /// Signs a `DataAppend` proposal for each asset and submits them as one
    /// batch.
    pub fn append(
        &mut self,
        channel_id: &str,
        client: &Credential,
        assets: &[WebLogData],
    ) -> Result<Vec<AppendOutcome>, NetError> {
        let proposals = assets
            .iter()
            .map(|asset| {
                let nonce = self.next_nonce();
                Proposal::new(client, channel_id, FN_DATA_APPEND, chaincode::append_args(asset), nonce)
            })
            .collect();
        self.submit_proposals(channel_id, proposals)
    }

    /// Endorses each proposal at the channel's endorsers, orders the
    /// endorsed envelopes in submission order, validates, commits and
    /// delivers to member peers.
    pub fn submit_proposals(
        &mut self,
        channel_id: &str,
        proposals: Vec<Proposal>,
    ) -> Result<Vec<AppendOutcome>, NetError> {
        let channel = self.channels.get(channel_id).ok_or_else(|| NetError::UnknownChannel(channel_id.into()))?;
        let mut outcomes: Vec<Option<AppendOutcome>> = vec![None; proposals.len()];
        let mut envelopes = Vec::new();
        for (i, proposal) in proposals.iter().enumerate() {
            let endorsers: Vec<EndorsingPeer<'_>> = channel
                .config
                .policy
                .endorsers
                .iter()
                .filter_map(|id| self.peers.get(id))
                .filter_map(|peer| {
                    let pc = peer.channels.get(channel_id)?;
                    Some(EndorsingPeer {
                        credential: &peer.credential,
                        state: &pc.ledger.state,
                        online: peer.online && !pc.is_halted(),
                    })
                })
                .collect();
            match txflow::endorse(proposal, &endorsers, &channel.config.policy) {
                Ok(env) => envelopes.push((i, env)),
                Err(error) => outcomes[i] = Some(AppendOutcome::Rejected { tx_id: proposal.tx_id(), error }),
            }
        }
        for (_, env) in &envelopes {
            for id in &channel.config.policy.endorsers {
                if env.endorsements.iter().any(|s| &s.signer_id == id) {
                    self.peers.get_mut(id).expect("endorser exists").executions += 1;
                }
            }
        }

        let now = self.tick();
        let channel = self.channels.get_mut(channel_id).expect("checked above");
        let mut queued = VecDeque::new();
        for (i, env) in envelopes {
            let tx_id = env.tx_id;
            match channel.orderer.submit(env, now) {
                Ok(()) => queued.push_back(i),
                Err(OrderError::Rejected(reason)) => outcomes[i] = Some(AppendOutcome::Dropped { tx_id, reason }),
            }
        }
        for block in channel.orderer.flush(now) {
            let block = txflow::validate(block, &channel.ledger.state);
            let block_number = block.number();
            for (tx, flag) in block.transactions.iter().zip(&block.validity_flags) {
                let i = queued.pop_front().expect("one queued proposal per ordered envelope");
                outcomes[i] = Some(if flag.is_valid() {
                    AppendOutcome::Committed { tx_id: tx.tx_id, block_number }
                } else {
                    AppendOutcome::Invalid { tx_id: tx.tx_id, block_number, flag: *flag }
                });
            }
            channel.ledger.commit(block)?;
        }
        self.deliver_quietly(channel_id);
        Ok(outcomes.into_iter().map(|o| o.expect("every proposal has an outcome")).collect())
    }

    /// Hands an already-built envelope straight to a channel's orderer and
    /// commits whatever it cuts.
    pub fn submit_envelope(&mut self, channel_id: &str, envelope: TransactionEnvelope) -> Result<Block, NetError> {
        let now = self.tick();
        let channel = self.channels.get_mut(channel_id).ok_or_else(|| NetError::UnknownChannel(channel_id.into()))?;
        channel.orderer.submit(envelope, now)?;
        let mut last = None;
        for block in channel.orderer.flush(now) {
            let block = txflow::validate(block, &channel.ledger.state);
            channel.ledger.commit(block.clone())?;
            last = Some(block);
        }
        self.deliver_quietly(channel_id);
        Ok(last.expect("a submitted envelope is always cut"))
    }

    /// Authenticated `selectWebLogData`, evaluated on a member peer's
    /// committed state.
    pub fn query(
        &self,
        channel_id: &str,
        datasource_id: &str,
        password: &str,
        query: &QuerySpec,
    ) -> Result<Vec<WebLogData>, NetError> {
        let channel = self.channel_ref(channel_id)?;
        let registry = channel.registry();
        if !registry.contains(datasource_id) {
            return Err(NetError::NotAMember { participant: datasource_id.into(), channel: channel_id.into() });
        }
        if !identity::authenticate(&registry, datasource_id, password) {
            return Err(NetError::Unauthorized(datasource_id.into()));
        }
        Ok(chaincode::select_weblog(self.query_state(channel_id)?, query)?)
    }

    /// State of the first reachable, non-halted member peer; the canonical
    /// state when none is reachable.
    pub fn query_state(&self, channel_id: &str) -> Result<&WorldState, NetError> {
        let channel = self.channel_ref(channel_id)?;
        let peer_state = channel.members().find_map(|id| {
            let peer = self.peers.get(id)?;
            let pc = peer.channels.get(channel_id)?;
            (peer.online && !pc.is_halted()).then_some(&pc.ledger.state)
        });
        Ok(peer_state.unwrap_or(&channel.ledger.state))
    }

    /// Brings every reachable member peer up to the canonical tip. Peers that
    /// detect tampering halt; the first detection is returned.
    pub fn deliver_all(&mut self, channel_id: &str) -> Result<(), NetError> {
        let members: Vec<String> = self.channel_ref(channel_id)?.members().map(String::from).collect();
        let mut first_error = None;
        for id in members {
            if !self.peers[&id].online {
                continue;
            }
            if let Err(e) = self.deliver_blocks(channel_id, &id) {
                first_error.get_or_insert(e);
            }
        }
        first_error.map_or(Ok(()), Err)
    }

    /// Appends the blocks `peer_id` is missing, re-verifying each against its
    /// own copy before accepting it.
    pub fn deliver_blocks(&mut self, channel_id: &str, peer_id: &str) -> Result<u64, NetError> {
        let channel = self.channels.get(channel_id).ok_or_else(|| NetError::UnknownChannel(channel_id.into()))?;
        let peer = self.peers.get_mut(peer_id).ok_or_else(|| NetError::UnknownPeer(peer_id.into()))?;
        deliver_to_peer(channel, peer, channel.ledger.chain.len())
    }

    /// Applies a peer's TAMPERING fault to its stored copy, if due, then
    /// re-verifies the stored image.
    pub fn tamper_check(&mut self, channel_id: &str, peer_id: &str) -> Result<(), NetError> {
        let peer = self.peers.get_mut(peer_id).ok_or_else(|| NetError::UnknownPeer(peer_id.into()))?;
        apply_tampering(peer, channel_id)
    }

    /// Delivery after a commit: a peer that detects tampering halts and is
    /// reported in the log, but the commit itself stands.
    fn deliver_quietly(&mut self, channel_id: &str) {
        if let Err(e) = self.deliver_all(channel_id) {
            log::warn!("{e}");
        }
    }

    fn tick(&mut self) -> u64 {
        let now = self.clock_ms;
        self.clock_ms += 1;
        now
    }
}

pub(crate) fn tamper_error(peer_id: &str, channel_id: &str, report: &TamperReport) -> NetError {
    NetError::TamperDetected {
        peer: peer_id.to_string(),
        channel: channel_id.to_string(),
        block_number: report.block_number,
    }
}

/// Delivers canonical blocks `[have, upto)` to `peer`. Each block must pass
/// [`ledger::verify_next_block`] against the peer's own copy.
pub(crate) fn deliver_to_peer(channel: &Channel, peer: &mut Peer, upto: u64) -> Result<u64, NetError> {
    let channel_id = channel.id();
    let peer_id = peer.id().to_string();
    let Some(pc) = peer.channels.get_mut(channel_id) else {
        return Err(NetError::NotAMember { participant: peer_id, channel: channel_id.into() });
    };
    if let Some(report) = &pc.halted {
        return Err(tamper_error(&peer_id, channel_id, report));
    }
    let mut delivered = 0;
    let upto = upto.min(channel.ledger.chain.len());
    for number in pc.ledger.chain.len()..upto {
        let block = channel.ledger.chain.get_block(number)?.clone();
        if let Err(report) = ledger::verify_next_block(&pc.ledger, &block) {
            log::warn!("{peer_id} refused block {number} of {channel_id}: {report:?}");
            let tamper = TamperReport { block_number: number, detail: report.detail.unwrap_or_default() };
            pc.halted = Some(tamper.clone());
            return Err(tamper_error(&peer_id, channel_id, &tamper));
        }
        pc.ledger.commit(block)?;
        delivered += 1;
    }
    apply_tampering(peer, channel_id)?;
    Ok(delivered)
}

fn apply_tampering(peer: &mut Peer, channel_id: &str) -> Result<(), NetError> {
    let FaultMode::Tampering { block_number, offset, mask } = peer.fault else {
        return Ok(());
    };
    let peer_id = peer.id().to_string();
    let Some(pc) = peer.channels.get_mut(channel_id) else { return Ok(()) };
    if pc.disk.is_some() || pc.ledger.chain.len() <= block_number {
        return Ok(());
    }
    let mut image = pc.ledger.chain.image().to_vec();
    let (start, len) = record_span(&image, block_number).expect("block is stored");
    image[start + (offset % len as u64) as usize] ^= if mask == 0 { 1 } else { mask };
    let report = ledger::verify_image(&image);
    pc.disk = Some(image);
    if report.ok {
        return Ok(());
    }
    let tamper = TamperReport {
        block_number: report.first_bad_block.unwrap_or(block_number),
        detail: report.detail.unwrap_or_default(),
    };
    log::warn!("{peer_id} detected tampering in its copy of {channel_id}: {}", tamper.detail);
    pc.halted = Some(tamper.clone());
    Err(tamper_error(&peer_id, channel_id, &tamper))
}

/// Byte range `(start, len)` of block `number`'s record, length prefix
/// included.
pub fn record_span(image: &[u8], number: u64) -> Option<(usize, usize)> {
    let mut start = 0usize;
    for (i, record) in ledger::records(image).enumerate() {
        let len = 4 + record.ok()?.len();
        if i as u64 == number {
            return Some((start, len));
        }
        start += len;
    }
    None
}

/// Channel-membership violations found in a network.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsolationReport {
    pub channels_checked: usize,
    pub peers_checked: usize,
    pub violations: Vec<String>,
}

impl IsolationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Scans every canonical and peer ledger for envelopes of a foreign channel,
/// and every non-member peer for any trace of a channel's transactions.
pub fn assert_channel_isolation(network: &Network) -> IsolationReport {
    let mut report = IsolationReport {
        channels_checked: network.channels.len(),
        peers_checked: network.peers.len(),
        ..Default::default()
    };
    let mut tx_ids: BTreeMap<&str, BTreeSet<Digest>> = BTreeMap::new();

    let scan = |owner: &str, channel_id: &str, chain: &Chain, violations: &mut Vec<String>| {
        for block in chain.blocks() {
            for tx in &block.transactions {
                if tx.proposal.channel_id != channel_id {
                    violations.push(format!(
                        "{owner}: block {} of {channel_id} holds tx {} for channel {}",
                        block.number(),
                        tx.tx_id,
                        tx.proposal.channel_id
                    ));
                }
            }
        }
    };

    for channel in network.channels.values() {
        scan("orderer", channel.id(), &channel.ledger.chain, &mut report.violations);
        let ids = tx_ids.entry(channel.id()).or_default();
        for block in channel.ledger.chain.blocks() {
            ids.extend(block.transactions.iter().map(|tx| tx.tx_id));
        }
    }
    for peer in network.peers.values() {
        for (channel_id, pc) in &peer.channels {
            match network.channels.get(channel_id) {
                Some(channel) if channel.config.is_member_peer(peer.id()) => {}
                _ => report.violations.push(format!("{} holds channel {channel_id} without membership", peer.id())),
            }
            scan(peer.id(), channel_id, &pc.ledger.chain, &mut report.violations);
        }
        for (channel_id, ids) in &tx_ids {
            if peer.channels.contains_key(*channel_id) {
                continue;
            }
            for (held, pc) in &peer.channels {
                let leaked = pc
                    .ledger
                    .chain
                    .blocks()
                    .iter()
                    .flat_map(|b| &b.transactions)
                    .filter(|tx| ids.contains(&tx.tx_id))
                    .count();
                if leaked > 0 {
                    report
                        .violations
                        .push(format!("{} holds {leaked} tx(s) of {channel_id} in its copy of {held}", peer.id()));
                }
            }
        }
    }
    report
}

/// Submits asset batches on behalf of one DataSource.
pub trait AppendSink {
    fn append_batch(&mut self, client: &Credential, assets: &[WebLogData]) -> Result<Vec<AppendOutcome>, NetError>;

    /// Digest of the committed world state.
    fn state_digest(&self) -> Digest;
}

/// A [`Network`] bound to one channel.
pub struct ChannelClient<'a> {
    pub network: &'a mut Network,
    pub channel_id: String,
}

impl<'a> ChannelClient<'a> {
    pub fn new(network: &'a mut Network, channel_id: impl Into<String>) -> Self {
        ChannelClient { network, channel_id: channel_id.into() }
    }
}

impl AppendSink for ChannelClient<'_> {
    fn append_batch(&mut self, client: &Credential, assets: &[WebLogData]) -> Result<Vec<AppendOutcome>, NetError> {
        self.network.append(&self.channel_id, client, assets)
    }

    fn state_digest(&self) -> Digest {
        self.network.channel(&self.channel_id).map(|c| c.ledger.state.digest()).unwrap_or(Digest::ZERO)
    }
}

#[cfg(test)]
mod tests;
