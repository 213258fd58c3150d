//! Parse a Combined Log Format file and load it onto a channel.

use std::io::Write;

use medusa::identity::DataSource;
use medusa::ingest::{ingest_file, parse_combined_log_line};
use medusa::netsim::{ChannelClient, ChannelSpec, Network};

const LOG: &str = r#"127.0.0.1 - frank [10/Oct/2000:13:55:36 -0700] "GET /apache_pb.gif HTTP/1.0" 200 2326 "http://www.example.com/start.html" "Mozilla/4.08 [en] (Win98; I ;Nav)"
203.0.113.9 - - [10/Oct/2000:13:56:01 -0700] "POST /login HTTP/1.1" 302 0 "-" "curl/8.4.0"
203.0.113.9 - - [10/Oct/2000:13:56:02 -0700] "GET /search?q=\"x\" HTTP/1.1" 200 512 "-" "Agent \"quoted\""
this line is not a log line
127.0.0.1 - frank [10/Oct/2000:13:55:36 -0700] "GET /apache_pb.gif HTTP/1.0" 200 2326 "http://www.example.com/start.html" "Mozilla/4.08 [en] (Win98; I ;Nav)"
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let first = parse_combined_log_line(LOG.lines().next().unwrap())?;
    println!("{first:#?}");

    let mut file = tempfile::NamedTempFile::new()?;
    file.write_all(LOG.as_bytes())?;

    let mut net = Network::new(9);
    net.add_peer("peer0")?;
    net.add_peer("peer1")?;
    net.create_channel(ChannelSpec::new("web", &["peer0", "peer1"]))?;
    let ds = DataSource {
        datasource_id: "apache".into(),
        ip: "127.0.0.1".into(),
        port: 80,
        username: "www".into(),
        url: "http://127.0.0.1/".into(),
    };
    let client = net.register_datasource("web", &ds, "pw")?;
    let mut sink = ChannelClient::new(&mut net, "web");
    let report = ingest_file(file.path(), &client, &mut sink, 100)?;
    println!("\n{}", report.to_table());
    assert!(report.reconciles());
    Ok(())
}
