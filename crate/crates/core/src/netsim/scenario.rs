//! Seeded discrete-event simulation over a [`Network`].
//!
//! Simulated time is in microseconds from the start of the run; block
//! timestamps are `GENESIS_MS` plus elapsed milliseconds. Events at the same
//! instant run in scheduling order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt::Write as _;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Pipeline, ScenarioConfig};
use super::{
    deliver_to_peer, record_span, tamper_error, ChannelSpec, FaultMode, NetError, Network, Peer, TamperReport,
};
use crate::chaincode::{self, ChaincodeResult, QuerySpec, WebLogData, FN_DATA_APPEND};
use crate::codec::{self, Digest};
use crate::identity::{self, Credential, DataSource, DataSourceRecord};
use crate::ledger::{self, Block, Chain, Ledger, LedgerError, ValidityFlag, Version, WorldState};
use crate::txflow::{self, EndorsementResponse, Proposal, TransactionEnvelope};

/// Timestamp of every simulated genesis block.
pub const GENESIS_MS: u64 = 1_600_000_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub blocks: u64,
    pub committed_valid: u64,
    pub committed_invalid: u64,
    pub chain_digest: Digest,
    pub state_digest: Digest,
    /// State digest ignoring versions; comparable across pipelines.
    pub content_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TamperEvent {
    pub peer: String,
    pub channel: String,
    pub block_number: u64,
    pub at_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub pipeline: Pipeline,
    pub seed: u64,
    pub proposals: u64,
    pub queries: u64,
    pub query_rows: u64,
    pub endorsement_failures: u64,
    pub dropped: u64,
    /// Envelopes that reached a committed block.
    pub delivered: u64,
    pub committed_valid: u64,
    pub committed_invalid: u64,
    pub blocks: u64,
    pub duration_us: u64,
    pub tps: f64,
    pub latency_p50_us: u64,
    pub latency_p95_us: u64,
    pub latency_p99_us: u64,
    /// Chaincode executions per peer (endorsements under EOV, ordered
    /// transactions under order-execute).
    pub executions: BTreeMap<String, u64>,
    pub channels: BTreeMap<String, ChannelMetrics>,
    /// peer → channel → digest of the block file as that peer stores it.
    pub peer_chain_digests: BTreeMap<String, BTreeMap<String, Digest>>,
    pub tamper_events: Vec<TamperEvent>,
}

impl ScenarioMetrics {
    pub fn to_canonical(&self) -> String {
        codec::to_canonical_string(self)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let pipeline = match self.pipeline {
            Pipeline::Eov => "execute-order-validate",
            Pipeline::OrderExecute => "order-execute",
        };
        let _ = writeln!(out, "pipeline             {pipeline}");
        let _ = writeln!(out, "seed                 {}", self.seed);
        for (label, value) in [
            ("proposals", self.proposals),
            ("queries", self.queries),
            ("endorsement failures", self.endorsement_failures),
            ("dropped", self.dropped),
            ("delivered", self.delivered),
            ("committed valid", self.committed_valid),
            ("committed invalid", self.committed_invalid),
            ("blocks", self.blocks),
            ("duration (us)", self.duration_us),
            ("latency p50 (us)", self.latency_p50_us),
            ("latency p95 (us)", self.latency_p95_us),
            ("latency p99 (us)", self.latency_p99_us),
        ] {
            let _ = writeln!(out, "{label:<20} {value}");
        }
        let _ = writeln!(out, "{:<20} {:.1}", "tps", self.tps);
        let _ = writeln!(out, "\n{:<12} {:>10}", "peer", "executions");
        for (peer, n) in &self.executions {
            let _ = writeln!(out, "{peer:<12} {n:>10}");
        }
        let _ = writeln!(out, "\n{:<12} {:>6} {:>7} {:>7}  chain digest", "channel", "blocks", "valid", "invalid");
        for (id, c) in &self.channels {
            let _ = writeln!(
                out,
                "{id:<12} {:>6} {:>7} {:>7}  {}",
                c.blocks, c.committed_valid, c.committed_invalid, c.chain_digest
            );
        }
        let _ = writeln!(out, "\n{:<12} {:<12} chain digest", "peer", "channel");
        for (peer, chans) in &self.peer_chain_digests {
            for (channel, digest) in chans {
                let _ = writeln!(out, "{peer:<12} {channel:<12} {digest}");
            }
        }
        for t in &self.tamper_events {
            let _ = writeln!(
                out,
                "tamper detected: {} in {} at block {} (t={}us)",
                t.peer, t.channel, t.block_number, t.at_us
            );
        }
        out
    }
}

/// Outcome of a run: metrics plus the final network for inspection.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub metrics: ScenarioMetrics,
    pub network: Network,
    pub pipeline: Pipeline,
    /// One line per processed event when `trace` is set.
    pub trace: Vec<String>,
}

impl ScenarioRun {
    /// Members of `channel_id` that are neither tampering nor halted.
    pub fn honest_members<'a>(&'a self, channel_id: &'a str) -> impl Iterator<Item = &'a Peer> + 'a {
        self.network.peers().filter(move |p| {
            p.channels.get(channel_id).is_some_and(|pc| !pc.is_halted())
                && !matches!(p.fault, FaultMode::Tampering { .. })
        })
    }

    /// Rebuilds each channel's state from its block image and compares it
    /// with the incrementally maintained one, for the canonical copy and
    /// every honest member.
    pub fn replay_matches(&self) -> Result<bool, LedgerError> {
        for channel in self.network.channels() {
            let replay = |chain: &Chain| match self.pipeline {
                Pipeline::Eov => ledger::replay_world_state(chain),
                Pipeline::OrderExecute => replay_order_execute(chain),
            };
            let fresh = Chain::from_image(channel.ledger.chain.image())?;
            if replay(&fresh)? != channel.ledger.state {
                return Ok(false);
            }
            for peer in self.honest_members(channel.id()) {
                let pc = &peer.channels[channel.id()];
                let fresh = Chain::from_image(pc.stored_image())?;
                if replay(&fresh)? != pc.ledger.state {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

/// Executes one ordered transaction against `state`, returning its write set
/// on success.
fn execute_ordered_tx(tx: &TransactionEnvelope, state: &WorldState) -> Option<crate::chaincode::RwSet> {
    let record: DataSourceRecord =
        codec::from_canonical(&state.get(&chaincode::datasource_key(&tx.proposal.submitter))?.value).ok()?;
    if !tx.is_well_formed() || !tx.proposal.verify_client_signature(&record.public_key) {
        return None;
    }
    match chaincode::dispatch(state, &tx.proposal.submitter, &tx.proposal.function, &tx.proposal.args) {
        Ok(ChaincodeResult::Write(rw)) if chaincode::function_kind(&tx.proposal.function).is_some() => Some(rw),
        _ => None,
    }
}

/// Runs every transaction of `block` in order against `state`, applying each
/// result before the next. Returns the per-transaction flags.
pub fn execute_block(block: &Block, state: &mut WorldState) -> Vec<ValidityFlag> {
    let number = block.number();
    block
        .transactions
        .iter()
        .enumerate()
        .map(|(i, tx)| match execute_ordered_tx(tx, state) {
            Some(rw) => {
                state.apply(&rw.write_set, Version { block: number, tx: i as u64 });
                ValidityFlag::Valid
            }
            None => ValidityFlag::ExecutionFailed,
        })
        .collect()
}

/// World state of an order-execute chain: genesis writes, then sequential
/// re-execution of every later block. Stored flags must match.
pub fn replay_order_execute(chain: &Chain) -> Result<WorldState, LedgerError> {
    let mut ledger = Ledger::in_memory();
    for block in chain.blocks() {
        if block.number() == 0 {
            ledger::verify_next_block(&ledger, block).map_err(LedgerError::ChainNotVerified)?;
            ledger.commit(block.clone())?;
            continue;
        }
        ledger::verify_next_header(&ledger, block).map_err(LedgerError::ChainNotVerified)?;
        let mut state = ledger.state.clone();
        if execute_block(block, &mut state) != block.validity_flags {
            return Err(LedgerError::Malformed(format!("block {}: flags differ on re-execution", block.number())));
        }
        ledger.commit(block.clone())?;
        ledger.state = state;
    }
    Ok(ledger.state)
}

#[derive(Debug, Clone)]
enum OpKind {
    Append(WebLogData),
    Query(QuerySpec),
}

#[derive(Debug, Clone)]
struct Op {
    channel: String,
    client: usize,
    arrival_us: u64,
    kind: OpKind,
}

#[derive(Debug, Clone)]
enum Event {
    Submit { op: usize },
    AtEndorser { op: usize, peer: String },
    Execute { op: usize, peer: String },
    AtClient { op: usize, peer: String, response: EndorsementResponse },
    AtOrderer { op: usize, envelope: Box<TransactionEnvelope> },
    OrdererTimer { channel: String },
    AtPeer { channel: String, peer: String, upto: u64 },
    Recover { peer: String },
}

impl Event {
    fn describe(&self) -> String {
        match self {
            Event::Submit { op } => format!("submit op={op}"),
            Event::AtEndorser { op, peer } => format!("proposal op={op} at {peer}"),
            Event::Execute { op, peer } => format!("execute op={op} on {peer}"),
            Event::AtClient { op, peer, response } => {
                let r = match response {
                    EndorsementResponse::Endorsed { .. } => "endorsed".to_string(),
                    EndorsementResponse::Failed(e) => format!("failed: {e}"),
                    EndorsementResponse::BadClientSignature => "bad client signature".into(),
                    EndorsementResponse::Unavailable => "unavailable".into(),
                };
                format!("response op={op} from {peer}: {r}")
            }
            Event::AtOrderer { op, envelope } => format!("envelope op={op} tx={} at orderer", envelope.tx_id),
            Event::OrdererTimer { channel } => format!("batch timer {channel}"),
            Event::AtPeer { channel, peer, upto } => format!("deliver {channel} blocks <{upto} to {peer}"),
            Event::Recover { peer } => format!("{peer} back online"),
        }
    }
}

#[derive(Debug)]
struct Scheduled {
    at_us: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at_us, self.seq) == (other.at_us, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed: BinaryHeap pops the earliest.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at_us, other.seq).cmp(&(self.at_us, self.seq))
    }
}

#[derive(Debug, Default)]
struct OpState {
    proposal: Option<Proposal>,
    responses: Vec<(String, EndorsementResponse)>,
    expected: usize,
}

struct Sim<'c> {
    config: &'c ScenarioConfig,
    pipeline: Pipeline,
    net: Network,
    clients: BTreeMap<String, Vec<Credential>>,
    ops: Vec<Op>,
    state: Vec<OpState>,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    now_us: u64,
    timers: BTreeMap<String, Option<u64>>,
    committer_busy: BTreeMap<String, u64>,
    submitted_at: HashMap<Digest, u64>,
    latencies: Vec<u64>,
    last_commit_us: u64,
    metrics: ScenarioMetrics,
    trace: Vec<String>,
}

/// Runs the configured workload through the configured pipeline.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioRun, NetError> {
    run_with_pipeline(config, config.pipeline)
}

/// The same workload as [`run_scenario`], through the order-execute
/// pipeline regardless of `config.pipeline`.
pub fn run_order_execute_baseline(config: &ScenarioConfig) -> Result<ScenarioRun, NetError> {
    run_with_pipeline(config, Pipeline::OrderExecute)
}

fn run_with_pipeline(config: &ScenarioConfig, pipeline: Pipeline) -> Result<ScenarioRun, NetError> {
    config.validate()?;
    let mut sim = Sim::setup(config, pipeline)?;
    sim.run()?;
    Ok(sim.finish())
}

fn ip_from_index(k: u32) -> String {
    format!("10.0.{}.{}", k / 256, k % 256)
}

fn generate_ops(config: &ScenarioConfig, clients: &BTreeMap<String, Vec<Credential>>) -> Vec<Op> {
    let w = &config.workload;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let status = WeightedIndex::new(w.status_codes.iter().map(|&(_, weight)| weight)).expect("validated weights");
    let mut ops = Vec::new();
    for channel in &config.channels {
        let mut arrival = 0u64;
        let mut datetime = w.datetime_start_ms;
        let mut used: Vec<String> = Vec::new();
        let n_clients = clients[&channel.id].len();
        for i in 0..w.transactions {
            arrival += rng.gen_range(0..=2 * w.arrival_interval_us);
            datetime += rng.gen_range(0..=w.datetime_step_ms);
            let client = rng.gen_range(0..n_clients);
            let kind = if rng.gen_bool(w.query_fraction) {
                OpKind::Query(match rng.gen_range(0..4) {
                    0 => QuerySpec::All,
                    1 => QuerySpec::ByIp(ip_from_index(rng.gen_range(0..w.ip_pool))),
                    2 => QuerySpec::ByUserAgent(w.user_agents[rng.gen_range(0..w.user_agents.len())].clone()),
                    _ => {
                        let from = w.datetime_start_ms + rng.gen_range(0..=w.datetime_step_ms * u64::from(i + 1));
                        QuerySpec::ByDatetimeRange { from, to: from + w.datetime_step_ms * 20 }
                    }
                })
            } else {
                let asset_id = if !used.is_empty() && rng.gen_bool(w.conflict_rate) {
                    used[rng.gen_range(0..used.len())].clone()
                } else {
                    let id = format!("{}-{i:06}", channel.id);
                    used.push(id.clone());
                    id
                };
                let url = w.urls[rng.gen_range(0..w.urls.len())].clone();
                OpKind::Append(WebLogData {
                    asset_id,
                    referer: if rng.gen_bool(0.5) { String::new() } else { format!("https://example.org{url}") },
                    url,
                    return_code: w.status_codes[status.sample(&mut rng)].0,
                    user_agent: w.user_agents[rng.gen_range(0..w.user_agents.len())].clone(),
                    datetime,
                    ip: ip_from_index(rng.gen_range(0..w.ip_pool)),
                })
            };
            ops.push(Op { channel: channel.id.clone(), client, arrival_us: arrival, kind });
        }
    }
    ops
}

impl<'c> Sim<'c> {
    fn setup(config: &'c ScenarioConfig, pipeline: Pipeline) -> Result<Self, NetError> {
        let mut net = Network::new(config.seed);
        net.set_clock(GENESIS_MS);
        for p in &config.peers {
            net.add_peer(&p.id)?;
            net.set_fault(&p.id, p.fault.clone())?;
        }
        let mut clients = BTreeMap::new();
        for c in &config.channels {
            let mut records = Vec::new();
            let mut creds = Vec::new();
            for j in 0..c.datasources {
                let descriptor = DataSource {
                    datasource_id: format!("{}-ds{j}", c.id),
                    ip: format!("192.168.{}.{}", j / 250, j % 250 + 1),
                    port: 443,
                    username: "collector".into(),
                    url: format!("https://logs.example.org/{}/{j}", c.id),
                };
                let (record, cred) =
                    identity::new_datasource_record(&descriptor, &format!("pw-{}-{j}", c.id), net.rng())?;
                records.push(record);
                creds.push(cred);
            }
            let members: Vec<String> =
                config.peers.iter().filter(|p| p.channels.contains(&c.id)).map(|p| p.id.clone()).collect();
            if members.is_empty() {
                return Err(NetError::InvalidConfig(format!("channel {} has no member peers", c.id)));
            }
            let endorsers = config.peers.iter().filter(|p| p.endorses(&c.id)).map(|p| p.id.clone()).collect();
            net.create_channel(ChannelSpec {
                channel_id: c.id.clone(),
                peers: members,
                endorsers: Some(endorsers),
                required: c.required,
                ordering: c.ordering(),
                datasources: records,
                storage: None,
            })?;
            clients.insert(c.id.clone(), creds);
        }
        let ops = generate_ops(config, &clients);
        let state = (0..ops.len()).map(|_| OpState::default()).collect();
        let metrics = ScenarioMetrics {
            pipeline,
            seed: config.seed,
            proposals: 0,
            queries: 0,
            query_rows: 0,
            endorsement_failures: 0,
            dropped: 0,
            delivered: 0,
            committed_valid: 0,
            committed_invalid: 0,
            blocks: 0,
            duration_us: 0,
            tps: 0.0,
            latency_p50_us: 0,
            latency_p95_us: 0,
            latency_p99_us: 0,
            executions: config.peers.iter().map(|p| (p.id.clone(), 0)).collect(),
            channels: BTreeMap::new(),
            peer_chain_digests: BTreeMap::new(),
            tamper_events: vec![],
        };
        let mut sim = Sim {
            config,
            pipeline,
            net,
            clients,
            ops,
            state,
            queue: BinaryHeap::new(),
            seq: 0,
            now_us: 0,
            timers: BTreeMap::new(),
            committer_busy: BTreeMap::new(),
            submitted_at: HashMap::new(),
            latencies: vec![],
            last_commit_us: 0,
            metrics,
            trace: vec![],
        };
        for op in 0..sim.ops.len() {
            sim.schedule(sim.ops[op].arrival_us, Event::Submit { op });
        }
        for p in &config.peers {
            if let FaultMode::Offline { until_ms, .. } = p.fault {
                sim.schedule(until_ms * 1000, Event::Recover { peer: p.id.clone() });
            }
        }
        Ok(sim)
    }

    fn schedule(&mut self, at_us: u64, event: Event) {
        self.seq += 1;
        self.queue.push(Scheduled { at_us, seq: self.seq, event });
    }

    fn now_ms(&self) -> u64 {
        GENESIS_MS + self.now_us / 1000
    }

    /// Constant per-link delay, a function of the seed and the endpoints.
    fn delay(&self, a: &str, b: &str) -> u64 {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let d = codec::sha256(format!("{}|{a}|{b}", self.config.seed).as_bytes());
        let v = u64::from_be_bytes(d.0[..8].try_into().expect("8 bytes"));
        let [lo, hi] = self.config.network.link_delay_us;
        lo + v % (hi - lo + 1)
    }

    fn client_name(&self, op: usize) -> String {
        format!("client:{}", self.clients[&self.ops[op].channel][self.ops[op].client].participant_id)
    }

    fn peer_reachable(&self, peer_id: &str, channel_id: &str) -> bool {
        self.net.peers.get(peer_id).is_some_and(|p| {
            !p.fault.is_offline_at(self.now_us / 1000) && p.channels.get(channel_id).is_some_and(|pc| !pc.is_halted())
        })
    }

    fn run(&mut self) -> Result<(), NetError> {
        while let Some(Scheduled { at_us, event, .. }) = self.queue.pop() {
            self.now_us = at_us;
            if self.config.trace {
                self.trace.push(format!("{at_us:>10} {}", event.describe()));
            }
            self.handle(event)?;
        }
        Ok(())
    }

    fn handle(&mut self, event: Event) -> Result<(), NetError> {
        let t = self.now_us;
        match event {
            Event::Submit { op } => self.submit(op)?,
            Event::AtEndorser { op, peer } => {
                let channel = self.ops[op].channel.clone();
                if self.peer_reachable(&peer, &channel) {
                    let p = self.net.peers.get_mut(&peer).expect("known peer");
                    let start = t.max(p.busy_until_us);
                    p.busy_until_us = start + self.config.network.exec_cost_us;
                    self.schedule(start, Event::Execute { op, peer });
                } else {
                    let back = t + self.delay(&peer, &self.client_name(op));
                    self.schedule(back, Event::AtClient { op, peer, response: EndorsementResponse::Unavailable });
                }
            }
            Event::Execute { op, peer } => {
                let channel = &self.ops[op].channel;
                let p = self.net.peers.get_mut(&peer).expect("known peer");
                p.executions += 1;
                let proposal = self.state[op].proposal.as_ref().expect("proposal signed at submit");
                let response = txflow::simulate_endorsement(&p.credential, &p.channels[channel].ledger.state, proposal);
                let back = t + self.config.network.exec_cost_us + self.delay(&peer, &self.client_name(op));
                self.schedule(back, Event::AtClient { op, peer, response });
            }
            Event::AtClient { op, peer, response } => {
                let st = &mut self.state[op];
                st.responses.push((peer, response));
                if st.responses.len() == st.expected {
                    let channel = &self.ops[op].channel;
                    let policy = &self.net.channels[channel].config.policy;
                    let proposal = st.proposal.as_ref().expect("proposal signed at submit");
                    match txflow::assemble_endorsements(proposal, &st.responses, policy) {
                        Ok(envelope) => {
                            let at = t + self.delay(&self.client_name(op), "orderer");
                            self.schedule(at, Event::AtOrderer { op, envelope: Box::new(envelope) });
                        }
                        Err(e) => {
                            log::debug!("op {op} not endorsed: {e}");
                            self.metrics.endorsement_failures += 1;
                        }
                    }
                }
            }
            Event::AtOrderer { op, envelope } => {
                let channel = self.ops[op].channel.clone();
                let now_ms = self.now_ms();
                let tx_id = envelope.tx_id;
                let orderer = &mut self.net.channels.get_mut(&channel).expect("known channel").orderer;
                if orderer.submit(*envelope, now_ms).is_err() {
                    self.metrics.dropped += 1;
                } else {
                    self.submitted_at.entry(tx_id).or_insert(self.ops[op].arrival_us);
                    let blocks = orderer.poll(now_ms);
                    self.commit_blocks(&channel, blocks)?;
                }
                self.arm_timer(&channel);
            }
            Event::OrdererTimer { channel } => {
                if self.timers.get(&channel).copied().flatten() == Some(t) {
                    self.timers.insert(channel.clone(), None);
                }
                let now_ms = self.now_ms();
                let blocks = self.net.channels.get_mut(&channel).expect("known channel").orderer.poll(now_ms);
                self.commit_blocks(&channel, blocks)?;
                self.arm_timer(&channel);
            }
            Event::AtPeer { channel, peer, upto } => {
                if self.peer_reachable(&peer, &channel) {
                    self.deliver(&channel, &peer, upto)?;
                }
            }
            Event::Recover { peer } => {
                let joined: Vec<String> = self.net.peers[&peer].channels.keys().cloned().collect();
                for channel in joined {
                    if self.peer_reachable(&peer, &channel) {
                        let upto = self.net.channels[&channel].ledger.chain.len();
                        self.deliver(&channel, &peer, upto)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn submit(&mut self, op: usize) -> Result<(), NetError> {
        let channel_id = self.ops[op].channel.clone();
        let client = self.clients[&channel_id][self.ops[op].client].clone();
        match self.ops[op].kind.clone() {
            OpKind::Query(query) => {
                let members: Vec<String> = self.net.channels[&channel_id].members().map(String::from).collect();
                let state = members
                    .iter()
                    .find(|p| self.peer_reachable(p, &channel_id))
                    .map(|p| &self.net.peers[p].channels[&channel_id].ledger.state)
                    .unwrap_or(&self.net.channels[&channel_id].ledger.state);
                let rows = chaincode::select_weblog(state, &query)?;
                self.metrics.queries += 1;
                self.metrics.query_rows += rows.len() as u64;
            }
            OpKind::Append(asset) => {
                self.metrics.proposals += 1;
                let nonce = self.net.next_nonce();
                let proposal =
                    Proposal::new(&client, &channel_id, FN_DATA_APPEND, chaincode::append_args(&asset), nonce);
                let client_name = self.client_name(op);
                match self.pipeline {
                    Pipeline::Eov => {
                        let endorsers = self.net.channels[&channel_id].config.policy.endorsers.clone();
                        self.state[op] =
                            OpState { proposal: Some(proposal), responses: vec![], expected: endorsers.len() };
                        for peer in endorsers {
                            let at = self.now_us + self.delay(&client_name, &peer);
                            self.schedule(at, Event::AtEndorser { op, peer });
                        }
                    }
                    Pipeline::OrderExecute => {
                        let envelope = TransactionEnvelope {
                            tx_id: proposal.tx_id(),
                            proposal,
                            read_set: vec![],
                            write_set: vec![],
                            endorsements: vec![],
                        };
                        let at = self.now_us + self.delay(&client_name, "orderer");
                        self.schedule(at, Event::AtOrderer { op, envelope: Box::new(envelope) });
                    }
                }
            }
        }
        Ok(())
    }

    fn arm_timer(&mut self, channel_id: &str) {
        let Some(deadline_ms) = self.net.channels[channel_id].orderer.next_deadline() else { return };
        let at = (deadline_ms.saturating_sub(GENESIS_MS) * 1000).max(self.now_us);
        let slot = self.timers.entry(channel_id.to_string()).or_default();
        if *slot != Some(at) {
            *slot = Some(at);
            self.schedule(at, Event::OrdererTimer { channel: channel_id.to_string() });
        }
    }

    /// The channel's reference committer validates (EOV) or executes
    /// (order-execute) each cut block, then disseminates it.
    fn commit_blocks(&mut self, channel_id: &str, blocks: Vec<Block>) -> Result<(), NetError> {
        let net_params = &self.config.network;
        for block in blocks {
            let n = block.transactions.len() as u64;
            let channel = self.net.channels.get_mut(channel_id).expect("known channel");
            let busy = self.committer_busy.entry(channel_id.to_string()).or_default();
            let start = self.now_us.max(*busy);
            let block = match self.pipeline {
                Pipeline::Eov => {
                    *busy = start + net_params.validate_cost_us * n;
                    let block = txflow::validate(block, &channel.ledger.state);
                    channel.ledger.commit(block.clone())?;
                    block
                }
                Pipeline::OrderExecute => {
                    *busy = start + net_params.exec_cost_us * n;
                    let mut state = channel.ledger.state.clone();
                    let mut block = block;
                    block.validity_flags = execute_block(&block, &mut state);
                    channel.ledger.commit(block.clone())?;
                    channel.ledger.state = state;
                    block
                }
            };
            let done = *busy;
            self.last_commit_us = self.last_commit_us.max(done);
            self.metrics.blocks += 1;
            for (tx, flag) in block.transactions.iter().zip(&block.validity_flags) {
                self.metrics.delivered += 1;
                if flag.is_valid() {
                    self.metrics.committed_valid += 1;
                } else {
                    self.metrics.committed_invalid += 1;
                }
                if let Some(at) = self.submitted_at.get(&tx.tx_id) {
                    self.latencies.push(done - at);
                }
            }
            let upto = block.number() + 1;
            let members: Vec<String> = channel.members().map(String::from).collect();
            for peer in members {
                let at = done + self.delay("orderer", &peer);
                self.schedule(at, Event::AtPeer { channel: channel_id.to_string(), peer, upto });
            }
        }
        Ok(())
    }

    fn deliver(&mut self, channel_id: &str, peer_id: &str, upto: u64) -> Result<(), NetError> {
        let channel = &self.net.channels[channel_id];
        let peer = self.net.peers.get_mut(peer_id).expect("known peer");
        let result = match self.pipeline {
            Pipeline::Eov => deliver_to_peer(channel, peer, upto).map(|_| ()),
            Pipeline::OrderExecute => {
                let start = self.now_us.max(peer.busy_until_us);
                let cost = self.config.network.exec_cost_us;
                execute_to_peer(channel, peer, upto).map(|executed| peer.busy_until_us = start + executed * cost)
            }
        };
        match result {
            Ok(()) => Ok(()),
            Err(NetError::TamperDetected { peer, channel, block_number }) => {
                let seen = self.metrics.tamper_events.iter().any(|e| e.peer == peer && e.channel == channel);
                if !seen {
                    self.metrics.tamper_events.push(TamperEvent { peer, channel, block_number, at_us: self.now_us });
                }
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    fn finish(mut self) -> ScenarioRun {
        let m = &mut self.metrics;
        for peer in self.net.peers.values() {
            m.executions.insert(peer.id().to_string(), peer.executions);
            let digests = peer.channels.iter().map(|(c, pc)| (c.clone(), pc.chain_digest())).collect();
            m.peer_chain_digests.insert(peer.id().to_string(), digests);
        }
        for channel in self.net.channels.values() {
            let flags = channel.ledger.chain.blocks().iter().skip(1).flat_map(|b| &b.validity_flags);
            let (valid, invalid) = flags.fold((0, 0), |(v, i), f| if f.is_valid() { (v + 1, i) } else { (v, i + 1) });
            m.channels.insert(
                channel.id().to_string(),
                ChannelMetrics {
                    blocks: channel.ledger.chain.len(),
                    committed_valid: valid,
                    committed_invalid: invalid,
                    chain_digest: channel.ledger.chain.digest(),
                    state_digest: channel.ledger.state.digest(),
                    content_digest: channel.ledger.state.content_digest(),
                },
            );
        }
        let first_submit = self.ops.iter().map(|o| o.arrival_us).min().unwrap_or(0);
        m.duration_us = self.last_commit_us.saturating_sub(first_submit);
        if m.duration_us > 0 {
            m.tps = (m.committed_valid as f64 * 1e6 / m.duration_us as f64 * 1000.0).round() / 1000.0;
        }
        self.latencies.sort_unstable();
        m.latency_p50_us = percentile(&self.latencies, 50);
        m.latency_p95_us = percentile(&self.latencies, 95);
        m.latency_p99_us = percentile(&self.latencies, 99);
        ScenarioRun { metrics: self.metrics, network: self.net, pipeline: self.pipeline, trace: self.trace }
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[u64], p: u64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (p as usize * sorted.len()).div_ceil(100).max(1);
    sorted[rank - 1]
}

/// Order-execute delivery: the peer checks each block's header, then executes
/// it against its own state and compares the result with the recorded flags. Returns the number of transactions
/// executed.
fn execute_to_peer(channel: &super::Channel, peer: &mut Peer, upto: u64) -> Result<u64, NetError> {
    let channel_id = channel.id();
    let peer_id = peer.id().to_string();
    let Some(pc) = peer.channels.get_mut(channel_id) else {
        return Err(NetError::NotAMember { participant: peer_id, channel: channel_id.into() });
    };
    if let Some(report) = &pc.halted {
        return Err(tamper_error(&peer_id, channel_id, report));
    }
    let mut executed = 0;
    for number in pc.ledger.chain.len()..upto.min(channel.ledger.chain.len()) {
        let block = channel.ledger.chain.get_block(number)?.clone();
        let mut state = pc.ledger.state.clone();
        let check = ledger::verify_next_header(&pc.ledger, &block).map_err(|r| r.detail.unwrap_or_default());
        let check = check.and_then(|()| {
            let flags = execute_block(&block, &mut state);
            executed += flags.len() as u64;
            if flags == block.validity_flags {
                Ok(())
            } else {
                Err("local execution disagrees with recorded flags".to_string())
            }
        });
        if let Err(detail) = check {
            let tamper = TamperReport { block_number: number, detail };
            pc.halted = Some(tamper.clone());
            peer.executions += executed;
            return Err(tamper_error(&peer_id, channel_id, &tamper));
        }
        pc.ledger.commit(block)?;
        pc.ledger.state = state;
    }
    peer.executions += executed;
    if let FaultMode::Tampering { block_number, offset, mask } = peer.fault {
        let pc = peer.channels.get_mut(channel_id).expect("joined");
        if pc.disk.is_none() && pc.ledger.chain.len() > block_number {
            let mut image = pc.ledger.chain.image().to_vec();
            let (start, len) = record_span(&image, block_number).expect("block is stored");
            image[start + (offset % len as u64) as usize] ^= if mask == 0 { 1 } else { mask };
            let detected = Chain::from_image(&image).and_then(|c| replay_order_execute(&c)).is_err();
            pc.disk = Some(image);
            if detected {
                let tamper = TamperReport { block_number, detail: "stored copy fails re-verification".into() };
                pc.halted = Some(tamper.clone());
                return Err(tamper_error(&peer_id, channel_id, &tamper));
            }
        }
    }
    Ok(executed)
}
