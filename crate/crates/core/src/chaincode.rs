//! The log-storage smart contract.
//!
//! Exactly two function families exist: `DataAppend`, which adds one
//! `WebLogData` asset, and `selectWebLogData`, which reads committed assets
//! by attribute. Nothing can update or delete an asset once written.

use std::fmt;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec;
use crate::ledger::{ReadEntry, WorldState, WriteEntry};

pub const FN_DATA_APPEND: &str = "DataAppend";
pub const FN_SELECT_WEBLOG: &str = "selectWebLogData";

/// World-state key prefix for assets.
pub const WEBLOG_PREFIX: &str = "weblog:";
/// World-state key prefix for DataSource participant records.
pub const DATASOURCE_PREFIX: &str = "datasource:";

pub fn weblog_key(asset_id: &str) -> String {
    format!("{WEBLOG_PREFIX}{asset_id}")
}

pub fn datasource_key(datasource_id: &str) -> String {
    format!("{DATASOURCE_PREFIX}{datasource_id}")
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChaincodeError {
    #[error("asset {0} already exists; assets cannot be modified")]
    DuplicateAsset(String),
    #[error("submitter {0} is not a registered DataSource")]
    UnregisteredSubmitter(String),
    #[error("invalid asset: {0}")]
    InvalidAsset(String),
    #[error("invalid datetime range: from {from} > to {to}")]
    InvalidRange { from: u64, to: u64 },
    #[error("unknown function {0:?}")]
    UnknownFunction(String),
    #[error("bad arguments: {0}")]
    BadArguments(String),
}

/// One web access log record.
///
/// Canonical key order: `asset_id, url, referer, returnCode, userAgent,
/// datetime, ip`. An empty `referer` means the request had none.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WebLogData {
    pub asset_id: String,
    pub url: String,
    pub referer: String,
    #[serde(rename = "returnCode")]
    pub return_code: u16,
    #[serde(rename = "userAgent")]
    pub user_agent: String,
    /// UTC milliseconds since the epoch.
    pub datetime: u64,
    pub ip: String,
}

impl WebLogData {
    pub fn validate(&self) -> Result<(), ChaincodeError> {
        if self.asset_id.is_empty() {
            return Err(ChaincodeError::InvalidAsset("empty asset_id".into()));
        }
        if !(100..=599).contains(&self.return_code) {
            return Err(ChaincodeError::InvalidAsset(format!("returnCode {} outside 100..=599", self.return_code)));
        }
        if self.ip.parse::<IpAddr>().is_err() {
            return Err(ChaincodeError::InvalidAsset(format!("bad ip {:?}", self.ip)));
        }
        Ok(())
    }

    pub fn state_key(&self) -> String {
        weblog_key(&self.asset_id)
    }
}

/// The append transaction: a single asset plus the submitting DataSource.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataAppend {
    pub data: WebLogData,
    pub submitter: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuerySpec {
    All,
    ByIp(String),
    /// Exact-string match.
    ByUserAgent(String),
    /// `from` inclusive, `to` exclusive, both UTC epoch milliseconds.
    ByDatetimeRange {
        from: u64,
        to: u64,
    },
}

impl QuerySpec {
    pub fn to_args(&self) -> Vec<String> {
        match self {
            QuerySpec::All => vec!["ALL".into()],
            QuerySpec::ByIp(ip) => vec!["BY_IP".into(), ip.clone()],
            QuerySpec::ByUserAgent(ua) => vec!["BY_USER_AGENT".into(), ua.clone()],
            QuerySpec::ByDatetimeRange { from, to } => {
                vec!["BY_DATETIME_RANGE".into(), from.to_string(), to.to_string()]
            }
        }
    }

    pub fn from_args(args: &[String]) -> Result<Self, ChaincodeError> {
        let bad = || ChaincodeError::BadArguments(format!("unrecognised filter {args:?}"));
        let num = |s: &String| {
            s.parse::<u64>().map_err(|_| ChaincodeError::BadArguments(format!("{s:?} is not a timestamp")))
        };
        match args {
            [kind] if kind == "ALL" => Ok(QuerySpec::All),
            [kind, ip] if kind == "BY_IP" => Ok(QuerySpec::ByIp(ip.clone())),
            [kind, ua] if kind == "BY_USER_AGENT" => Ok(QuerySpec::ByUserAgent(ua.clone())),
            [kind, from, to] if kind == "BY_DATETIME_RANGE" => {
                Ok(QuerySpec::ByDatetimeRange { from: num(from)?, to: num(to)? })
            }
            _ => Err(bad()),
        }
    }

    pub fn validate(&self) -> Result<(), ChaincodeError> {
        match *self {
            QuerySpec::ByDatetimeRange { from, to } if from > to => Err(ChaincodeError::InvalidRange { from, to }),
            _ => Ok(()),
        }
    }

    pub fn matches(&self, asset: &WebLogData) -> bool {
        match self {
            QuerySpec::All => true,
            QuerySpec::ByIp(ip) => match (ip.parse::<IpAddr>(), asset.ip.parse::<IpAddr>()) {
                (Ok(want), Ok(have)) => want == have,
                _ => *ip == asset.ip,
            },
            QuerySpec::ByUserAgent(ua) => *ua == asset.user_agent,
            QuerySpec::ByDatetimeRange { from, to } => (*from..*to).contains(&asset.datetime),
        }
    }
}

impl fmt::Display for QuerySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_args().join(" "))
    }
}

/// Read and write sets produced by simulating a transaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RwSet {
    pub read_set: Vec<ReadEntry>,
    pub write_set: Vec<WriteEntry>,
}

/// The `onDataAppend` trigger.
///
/// Pure function of the committed state and the transaction. The read set
/// records the asset key as absent, so a concurrent append of the same id
/// loses MVCC validation even if both were endorsed.
pub fn on_data_append(state: &WorldState, tx: &DataAppend) -> Result<RwSet, ChaincodeError> {
    if state.get(&datasource_key(&tx.submitter)).is_none() {
        return Err(ChaincodeError::UnregisteredSubmitter(tx.submitter.clone()));
    }
    tx.data.validate()?;
    let key = tx.data.state_key();
    if state.get(&key).is_some() {
        return Err(ChaincodeError::DuplicateAsset(tx.data.asset_id.clone()));
    }
    Ok(RwSet {
        read_set: vec![ReadEntry { key: key.clone(), version: None }],
        write_set: vec![WriteEntry { key, value: codec::to_canonical(&tx.data) }],
    })
}

/// The `selectWebLogData` family. Results are ordered by `(datetime, asset_id)`.
pub fn select_weblog(state: &WorldState, query: &QuerySpec) -> Result<Vec<WebLogData>, ChaincodeError> {
    query.validate()?;
    let mut out = Vec::new();
    for (_, entry) in state.scan_prefix(WEBLOG_PREFIX) {
        let asset: WebLogData = codec::from_canonical(&entry.value)
            .map_err(|e| ChaincodeError::InvalidAsset(format!("stored asset unreadable: {e}")))?;
        if query.matches(&asset) {
            out.push(asset);
        }
    }
    out.sort_by(|a, b| (a.datetime, &a.asset_id).cmp(&(b.datetime, &b.asset_id)));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FunctionKind {
    Append,
    Query,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChaincodeResult {
    Write(RwSet),
    Rows(Vec<WebLogData>),
}

type Handler = fn(&WorldState, &str, &[String]) -> Result<ChaincodeResult, ChaincodeError>;

struct Entry {
    name: &'static str,
    kind: FunctionKind,
    handler: Handler,
}

const DISPATCH_TABLE: &[Entry] = &[
    Entry { name: FN_DATA_APPEND, kind: FunctionKind::Append, handler: handle_append },
    Entry { name: FN_SELECT_WEBLOG, kind: FunctionKind::Query, handler: handle_select },
];

fn handle_append(state: &WorldState, submitter: &str, args: &[String]) -> Result<ChaincodeResult, ChaincodeError> {
    let [raw] = args else {
        return Err(ChaincodeError::BadArguments(format!("DataAppend takes one argument, got {}", args.len())));
    };
    let data: WebLogData =
        codec::from_canonical(raw.as_bytes()).map_err(|e| ChaincodeError::BadArguments(format!("asset: {e}")))?;
    let tx = DataAppend { data, submitter: submitter.to_string() };
    on_data_append(state, &tx).map(ChaincodeResult::Write)
}

fn handle_select(state: &WorldState, _submitter: &str, args: &[String]) -> Result<ChaincodeResult, ChaincodeError> {
    let query = QuerySpec::from_args(args)?;
    select_weblog(state, &query).map(ChaincodeResult::Rows)
}

/// Every function the contract exposes, in table order.
pub fn functions() -> impl Iterator<Item = (&'static str, FunctionKind)> {
    DISPATCH_TABLE.iter().map(|e| (e.name, e.kind))
}

pub fn function_kind(name: &str) -> Option<FunctionKind> {
    DISPATCH_TABLE.iter().find(|e| e.name == name).map(|e| e.kind)
}

/// Routes a named invocation. Anything not in the table is rejected.
pub fn dispatch(
    state: &WorldState,
    submitter: &str,
    function: &str,
    args: &[String],
) -> Result<ChaincodeResult, ChaincodeError> {
    let entry = DISPATCH_TABLE
        .iter()
        .find(|e| e.name == function)
        .ok_or_else(|| ChaincodeError::UnknownFunction(function.to_string()))?;
    (entry.handler)(state, submitter, args)
}

/// Builds the argument list for a `DataAppend` invocation.
pub fn append_args(asset: &WebLogData) -> Vec<String> {
    vec![codec::to_canonical_string(asset)]
}
