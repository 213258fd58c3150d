//! Flip one byte in a persisted block file and verify it.

use medusa::chaincode::WebLogData;
use medusa::identity::DataSource;
use medusa::ledger::verify_block_file;
use medusa::netsim::{record_span, ChannelSpec, Network};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("audit.blocks");

    let mut net = Network::new(3);
    net.add_peer("peer0")?;
    let mut spec = ChannelSpec::new("audit", &["peer0"]);
    spec.storage = Some(path.clone());
    net.create_channel(spec)?;
    let ds = DataSource {
        datasource_id: "ds".into(),
        ip: "10.1.1.1".into(),
        port: 80,
        username: "u".into(),
        url: "http://10.1.1.1".into(),
    };
    let client = net.register_datasource("audit", &ds, "pw")?;
    for i in 0..4 {
        let asset = WebLogData {
            asset_id: format!("a{i}"),
            url: "/".into(),
            referer: String::new(),
            return_code: 200,
            user_agent: "probe".into(),
            datetime: 1_700_000_000_000 + i,
            ip: "10.1.1.9".into(),
        };
        net.append("audit", &client, &[asset])?;
    }
    println!("pristine: {:?}", verify_block_file(&path)?);

    let mut image = std::fs::read(&path)?;
    let (start, len) = record_span(&image, 3).expect("block 3 exists");
    image[start + len / 2] ^= 0x01;
    std::fs::write(&path, &image)?;
    let report = verify_block_file(&path)?;
    println!("tampered: first bad block {:?}, {:?}", report.first_bad_block, report.failure_kind);
    Ok(())
}
