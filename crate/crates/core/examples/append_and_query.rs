//! Register a DataSource, append a few records, then query them back.

use medusa::chaincode::{QuerySpec, WebLogData};
use medusa::identity::DataSource;
use medusa::netsim::{ChannelSpec, Network};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut net = Network::new(1);
    for peer in ["peer0", "peer1", "peer2"] {
        net.add_peer(peer)?;
    }
    net.create_channel(ChannelSpec::new("audit", &["peer0", "peer1", "peer2"]))?;

    let nginx = DataSource {
        datasource_id: "nginx-01".into(),
        ip: "10.0.0.5".into(),
        port: 443,
        username: "ops".into(),
        url: "https://10.0.0.5/logs".into(),
    };
    let client = net.register_datasource("audit", &nginx, "hunter2")?;

    let records: Vec<WebLogData> = (0..5)
        .map(|i| WebLogData {
            asset_id: format!("req-{i}"),
            url: format!("/item/{i}"),
            referer: String::new(),
            return_code: if i == 3 { 404 } else { 200 },
            user_agent: "curl/8.4.0".into(),
            datetime: 1_700_000_000_000 + i * 1_000,
            ip: format!("192.0.2.{}", i % 2 + 1),
        })
        .collect();
    for outcome in net.append("audit", &client, &records)? {
        println!("{outcome:?}");
    }

    let rows = net.query("audit", "nginx-01", "hunter2", &QuerySpec::ByIp("192.0.2.1".into()))?;
    println!("\n{} records from 192.0.2.1:", rows.len());
    for r in rows {
        println!("  {} {} {}", r.datetime, r.url, r.return_code);
    }
    let window = QuerySpec::ByDatetimeRange { from: 1_700_000_001_000, to: 1_700_000_003_000 };
    println!("in window: {}", net.query("audit", "nginx-01", "hunter2", &window)?.len());
    Ok(())
}
