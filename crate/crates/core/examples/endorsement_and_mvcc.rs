//! Two appends of the same asset id endorsed against the same state: both
//! reach the orderer, only the first in block order commits.

use medusa::chaincode::{append_args, WebLogData, FN_DATA_APPEND};
use medusa::identity::DataSource;
use medusa::netsim::{AppendOutcome, ChannelSpec, Network};
use medusa::txflow::Proposal;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut net = Network::new(4);
    for p in ["e0", "e1", "e2"] {
        net.add_peer(p)?;
    }
    let mut spec = ChannelSpec::new("audit", &["e0", "e1", "e2"]);
    spec.required = Some(2);
    net.create_channel(spec)?;
    let ds = DataSource {
        datasource_id: "lb".into(),
        ip: "10.9.0.1".into(),
        port: 8443,
        username: "lb".into(),
        url: "https://10.9.0.1/".into(),
    };
    let client = net.register_datasource("audit", &ds, "pw")?;

    let asset = |ua: &str| WebLogData {
        asset_id: "shared-id".into(),
        url: "/checkout".into(),
        referer: String::new(),
        return_code: 200,
        user_agent: ua.into(),
        datetime: 1_700_000_000_000,
        ip: "198.51.100.4".into(),
    };
    let proposals = vec![
        Proposal::new(&client, "audit", FN_DATA_APPEND, append_args(&asset("first")), net.next_nonce()),
        Proposal::new(&client, "audit", FN_DATA_APPEND, append_args(&asset("second")), net.next_nonce()),
    ];
    for outcome in net.submit_proposals("audit", proposals)? {
        match outcome {
            AppendOutcome::Committed { block_number, .. } => println!("committed in block {block_number}"),
            AppendOutcome::Invalid { flag, block_number, .. } => println!("invalid in block {block_number}: {flag:?}"),
            other => println!("{other:?}"),
        }
    }

    // Once committed, a new proposal for the id fails at endorsement.
    let late = net.append("audit", &client, &[asset("third")])?;
    println!("late duplicate: {:?}", late[0]);
    Ok(())
}
