//! A permissioned, tamper-evident ledger for web access logs.
//!
//! Log records are stored as `WebLogData` assets owned by registered
//! DataSources. The only operations are appending a record and querying
//! records by attribute; both run through an execute-order-validate
//! pipeline over hash-chained, orderer-signed blocks.
//!
//! Modules:
//!
//! - [`codec`]: canonical text encoding and SHA-256 digests
//! - [`identity`]: DataSource participants, keys, signatures
//! - [`ledger`]: blocks, block files, world state, chain verification
//! - [`chaincode`]: the asset model and its two operations
//! - [`txflow`]: the transaction pipeline up to commit
//! - [`netsim`]: deterministic multi-peer, multi-channel simulation
//! - [`ingest`]: Combined Log Format parsing and batch ingestion
//! - [`cli`]: the `medusa` command-line front end

pub mod chaincode;
pub mod cli;
pub mod codec;
pub mod identity;
pub mod ingest;
pub mod ledger;
pub mod netsim;
pub mod txflow;

#[cfg(test)]
mod test_support;
