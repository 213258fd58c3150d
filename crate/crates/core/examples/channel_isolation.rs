//! Two channels over four peers; each peer holds only its channels' ledgers.

use medusa::netsim::{assert_channel_isolation, run_scenario, PeerSpec, ScenarioChannel, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = ScenarioConfig::single_channel(12, 0, 40);
    config.peers = vec![
        PeerSpec::new("hq", &["finance", "ops"]),
        PeerSpec::new("bank", &["finance"]),
        PeerSpec::new("dc1", &["ops"]),
        PeerSpec::new("dc2", &["ops"]),
    ];
    config.channels = vec![ScenarioChannel::new("finance"), ScenarioChannel::new("ops")];
    let run = run_scenario(&config)?;

    for peer in run.network.peers() {
        let held: Vec<&String> = peer.channels.keys().collect();
        println!("{:<5} holds {held:?}", peer.id());
    }
    for channel in run.network.channels() {
        println!("{:<8} {} blocks, chain {}", channel.id(), channel.ledger.chain.len(), channel.ledger.chain.digest());
    }
    let report = assert_channel_isolation(&run.network);
    println!("isolation: {} violations", report.violations.len());
    Ok(())
}
