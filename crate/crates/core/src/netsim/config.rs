//! Scenario configuration, read from TOML.
//!
//! ```toml
//! seed = 42
//! pipeline = "eov"            # or "order_execute"
//! trace = false
//!
//! [network]
//! link_delay_us = [200, 2000]  # per-link constant delay drawn from this range
//! exec_cost_us = 400           # one chaincode execution
//! validate_cost_us = 50        # validating one transaction at commit
//!
//! [[peers]]
//! id = "peer0"
//! channels = ["audit"]
//! endorses = ["audit"]         # defaults to every joined channel
//! fault = { kind = "offline", from_ms = 5, until_ms = 40 }
//!
//! [[channels]]
//! id = "audit"
//! required = 2                 # defaults to a majority of endorsers
//! max_block_txs = 10
//! max_wait_ms = 5
//! datasources = 2
//!
//! [workload]
//! transactions = 100           # per channel
//! query_fraction = 0.1
//! conflict_rate = 0.0
//! arrival_interval_us = 500    # mean gap between client submissions
//! status_codes = [[200, 80], [304, 8], [404, 7], [500, 5]]
//! user_agents = ["curl/8.4.0", "Mozilla/5.0 (X11; Linux x86_64)"]
//! ip_pool = 16
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FaultMode, NetError};
use crate::txflow::OrderingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    #[default]
    Eov,
    OrderExecute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    #[serde(default)]
    pub pipeline: Pipeline,
    /// Record every processed event in `ScenarioRun::trace`.
    #[serde(default)]
    pub trace: bool,
    #[serde(default)]
    pub network: NetworkParams,
    pub peers: Vec<PeerSpec>,
    pub channels: Vec<ChannelSpec>,
    #[serde(default)]
    pub workload: WorkloadSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkParams {
    pub link_delay_us: [u64; 2],
    pub exec_cost_us: u64,
    pub validate_cost_us: u64,
}

impl Default for NetworkParams {
    fn default() -> Self {
        NetworkParams { link_delay_us: [200, 2_000], exec_cost_us: 400, validate_cost_us: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerSpec {
    pub id: String,
    pub channels: Vec<String>,
    #[serde(default)]
    pub endorses: Option<Vec<String>>,
    #[serde(default = "honest")]
    pub fault: FaultMode,
}

fn honest() -> FaultMode {
    FaultMode::Honest
}

impl PeerSpec {
    pub fn new(id: impl Into<String>, channels: &[&str]) -> Self {
        PeerSpec {
            id: id.into(),
            channels: channels.iter().map(|c| c.to_string()).collect(),
            endorses: None,
            fault: FaultMode::Honest,
        }
    }

    pub fn endorses(&self, channel_id: &str) -> bool {
        match &self.endorses {
            Some(list) => list.iter().any(|c| c == channel_id),
            None => self.channels.iter().any(|c| c == channel_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub id: String,
    #[serde(default)]
    pub required: Option<u32>,
    #[serde(default = "default_block_txs")]
    pub max_block_txs: u32,
    #[serde(default = "default_wait_ms")]
    pub max_wait_ms: u64,
    #[serde(default = "one")]
    pub datasources: u32,
}

fn default_block_txs() -> u32 {
    10
}

fn default_wait_ms() -> u64 {
    5
}

fn one() -> u32 {
    1
}

impl ChannelSpec {
    pub fn new(id: impl Into<String>) -> Self {
        ChannelSpec {
            id: id.into(),
            required: None,
            max_block_txs: default_block_txs(),
            max_wait_ms: default_wait_ms(),
            datasources: 1,
        }
    }

    pub fn ordering(&self) -> OrderingConfig {
        OrderingConfig { max_block_txs: self.max_block_txs, max_wait_ms: self.max_wait_ms }
    }
}

/// Synthetic WebLogData workload. Field distributions live here rather than
/// in the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    pub transactions: u32,
    pub query_fraction: f64,
    /// Fraction of appends that reuse an asset_id already proposed.
    pub conflict_rate: f64,
    pub arrival_interval_us: u64,
    /// `(status, weight)` pairs.
    pub status_codes: Vec<(u16, u32)>,
    pub user_agents: Vec<String>,
    pub urls: Vec<String>,
    /// Client addresses are drawn from `10.0.0.0/16`, this many of them.
    pub ip_pool: u32,
    /// First asset datetime, epoch ms; later assets step forward by up to
    /// `datetime_step_ms`.
    pub datetime_start_ms: u64,
    pub datetime_step_ms: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            transactions: 100,
            query_fraction: 0.0,
            conflict_rate: 0.0,
            arrival_interval_us: 500,
            status_codes: vec![(200, 80), (304, 8), (404, 7), (500, 5)],
            user_agents: vec![
                "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36".into(),
                "Mozilla/5.0 (X11; Linux x86_64; rv:109.0) Gecko/20100101 Firefox/119.0".into(),
                "curl/8.4.0".into(),
                "Googlebot/2.1 (+http://www.google.com/bot.html)".into(),
            ],
            urls: vec![
                "/".into(),
                "/index.html".into(),
                "/api/v1/orders".into(),
                "/static/app.js".into(),
                "/login".into(),
                "/images/logo.png".into(),
            ],
            ip_pool: 16,
            datetime_start_ms: 1_600_000_000_000,
            datetime_step_ms: 1_000,
        }
    }
}

impl ScenarioConfig {
    /// `peers` peers all endorsing one channel "audit".
    pub fn single_channel(seed: u64, peers: usize, transactions: u32) -> Self {
        ScenarioConfig {
            seed,
            pipeline: Pipeline::Eov,
            trace: false,
            network: NetworkParams::default(),
            peers: (0..peers).map(|i| PeerSpec::new(format!("peer{i}"), &["audit"])).collect(),
            channels: vec![ChannelSpec::new("audit")],
            workload: WorkloadSpec { transactions, ..WorkloadSpec::default() },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, NetError> {
        let config: ScenarioConfig = toml::from_str(text).map_err(|e| NetError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| NetError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |msg: String| Err(NetError::InvalidConfig(msg));
        let mut channel_ids = BTreeSet::new();
        for c in &self.channels {
            if c.id.is_empty() || !channel_ids.insert(c.id.as_str()) {
                return bad(format!("channel id {:?} is empty or repeated", c.id));
            }
            if c.max_block_txs == 0 {
                return bad(format!("channel {}: max_block_txs must be at least 1", c.id));
            }
            if c.datasources == 0 {
                return bad(format!("channel {}: needs at least one datasource", c.id));
            }
        }
        if channel_ids.is_empty() {
            return bad("no channels".into());
        }
        let mut peer_ids = BTreeSet::new();
        for p in &self.peers {
            if p.id.is_empty() || p.id == "orderer" || !peer_ids.insert(p.id.as_str()) {
                return bad(format!("peer id {:?} is empty, reserved or repeated", p.id));
            }
            for c in p.channels.iter().chain(p.endorses.iter().flatten()) {
                if !channel_ids.contains(c.as_str()) {
                    return bad(format!("peer {} refers to unknown channel {c}", p.id));
                }
            }
            if let Some(list) = &p.endorses {
                if let Some(c) = list.iter().find(|c| !p.channels.contains(c)) {
                    return bad(format!("peer {} endorses {c} without joining it", p.id));
                }
            }
            if let FaultMode::Offline { from_ms, until_ms } = p.fault {
                if from_ms > until_ms {
                    return bad(format!("peer {}: offline window ends before it starts", p.id));
                }
            }
        }
        for c in &self.channels {
            let endorsers = self.peers.iter().filter(|p| p.endorses(&c.id)).count() as u32;
            if endorsers == 0 {
                return bad(format!("channel {} has no endorsing peer", c.id));
            }
            if let Some(k) = c.required {
                if k == 0 || k > endorsers {
                    return bad(format!("channel {}: policy {k} of {endorsers} endorsers", c.id));
                }
            }
        }
        let w = &self.workload;
        for (name, rate) in [("query_fraction", w.query_fraction), ("conflict_rate", w.conflict_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if w.status_codes.is_empty() || w.status_codes.iter().all(|&(_, weight)| weight == 0) {
            return bad("status_codes needs a positive weight".into());
        }
        if let Some((code, _)) = w.status_codes.iter().find(|(code, _)| !(100..=599).contains(code)) {
            return bad(format!("status code {code} outside 100..=599"));
        }
        if w.user_agents.is_empty() || w.urls.is_empty() || w.ip_pool == 0 || w.ip_pool > 65_536 {
            return bad("user_agents, urls and ip_pool (1..=65536) must be non-empty".into());
        }
        let [lo, hi] = self.network.link_delay_us;
        if lo > hi {
            return bad("link_delay_us range is reversed".into());
        }
        Ok(())
    }
}
