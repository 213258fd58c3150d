use super::*;
use crate::ledger::verify_chain;
use crate::test_support::asset;

fn descriptor(id: &str) -> DataSource {
    DataSource {
        datasource_id: id.into(),
        ip: "10.0.0.5".into(),
        port: 8080,
        username: "ops".into(),
        url: "http://10.0.0.5/logs".into(),
    }
}

/// Peers p0..p{n-1} on channel "audit" with one registered DataSource.
fn network(peers: usize, required: u32) -> (Network, Credential) {
    let mut net = Network::new(11);
    let ids: Vec<String> = (0..peers).map(|i| format!("p{i}")).collect();
    for id in &ids {
        net.add_peer(id).unwrap();
    }
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let mut spec = ChannelSpec::new("audit", &refs);
    spec.required = Some(required);
    net.create_channel(spec).unwrap();
    let client = net.register_datasource("audit", &descriptor("ds1"), "pw").unwrap();
    (net, client)
}

fn digests(net: &Network, channel: &str) -> Vec<Digest> {
    net.peers().filter_map(|p| p.channels.get(channel)).map(|pc| pc.chain_digest()).collect()
}

#[test]
fn append_then_query_through_gateway() {
    let (mut net, client) = network(3, 2);
    let assets = [asset("a", "10.0.0.5", "curl", 20), asset("b", "10.0.0.6", "curl", 10)];
    let outcomes = net.append("audit", &client, &assets).unwrap();
    assert!(outcomes.iter().all(AppendOutcome::is_committed));

    let rows = net.query("audit", "ds1", "pw", &QuerySpec::All).unwrap();
    assert_eq!(rows.iter().map(|r| r.asset_id.as_str()).collect::<Vec<_>>(), ["b", "a"]);
    let rows = net.query("audit", "ds1", "pw", &QuerySpec::ByIp("10.0.0.5".into())).unwrap();
    assert_eq!(rows, vec![assets[0].clone()]);

    let canonical = net.channel("audit").unwrap().ledger.chain.digest();
    assert!(digests(&net, "audit").iter().all(|d| *d == canonical));
    assert!(verify_chain(&net.channel("audit").unwrap().ledger.chain).ok);
}

#[test]
fn queries_need_membership_and_password() {
    let (net, _) = network(1, 1);
    assert!(matches!(net.query("audit", "ds1", "wrong", &QuerySpec::All), Err(NetError::Unauthorized(_))));
    assert!(matches!(net.query("audit", "nobody", "pw", &QuerySpec::All), Err(NetError::NotAMember { .. })));
    assert!(matches!(net.query("other", "ds1", "pw", &QuerySpec::All), Err(NetError::UnknownChannel(_))));
}

#[test]
fn duplicates_across_and_within_batches() {
    let (mut net, client) = network(1, 1);
    let a = asset("a", "10.0.0.5", "curl", 1);
    assert!(net.append("audit", &client, std::slice::from_ref(&a)).unwrap()[0].is_committed());

    let again = net.append("audit", &client, std::slice::from_ref(&a)).unwrap();
    assert!(matches!(
        &again[0],
        AppendOutcome::Rejected { error: EndorseError::Chaincode(ChaincodeError::DuplicateAsset(_)), .. }
    ));
    assert!(again[0].is_duplicate());

    let b = asset("b", "10.0.0.5", "curl", 2);
    let batch = net.append("audit", &client, &[b.clone(), b]).unwrap();
    assert!(batch[0].is_committed());
    assert!(matches!(batch[1], AppendOutcome::Invalid { flag: ValidityFlag::MvccConflict, .. }));
}

#[test]
fn registration_is_on_chain_and_unique() {
    let (mut net, _) = network(2, 1);
    assert!(net.registry("audit").unwrap().contains("ds1"));
    assert!(matches!(
        net.register_datasource("audit", &descriptor("ds1"), "x"),
        Err(NetError::Identity(IdentityError::DuplicateParticipant(_)))
    ));
    let before = net.channel("audit").unwrap().ledger.chain.len();
    net.register_datasource("audit", &descriptor("ds2"), "x").unwrap();
    assert_eq!(net.channel("audit").unwrap().ledger.chain.len(), before + 1);
    let export = net.registry("audit").unwrap().export();
    assert_eq!(export.lines().count(), 2);
}

#[test]
fn channel_creation_errors() {
    let (mut net, _) = network(2, 1);
    assert!(matches!(net.create_channel(ChannelSpec::new("audit", &["p0"])), Err(NetError::ChannelExists(_))));
    assert!(matches!(net.create_channel(ChannelSpec::new("x", &["ghost"])), Err(NetError::UnknownPeer(_))));
    let mut spec = ChannelSpec::new("x", &["p0", "p1"]);
    spec.required = Some(3);
    assert!(matches!(
        net.create_channel(spec),
        Err(NetError::TxFlow(TxFlowError::InvalidPolicy { required: 3, endorsers: 2 }))
    ));
}

#[test]
fn offline_peer_catches_up() {
    let (mut net, client) = network(3, 2);
    net.set_peer_online("p2", false).unwrap();
    for i in 0..3 {
        let a = asset(&format!("x{i}"), "10.0.0.5", "curl", i);
        assert!(net.append("audit", &client, &[a]).unwrap()[0].is_committed());
    }
    let lagging = net.peer("p2").unwrap().channels["audit"].ledger.chain.len();
    assert!(lagging < net.channel("audit").unwrap().ledger.chain.len());

    net.set_peer_online("p2", true).unwrap();
    assert_eq!(net.deliver_blocks("audit", "p2").unwrap(), 3);
    let canonical = net.channel("audit").unwrap().ledger.chain.digest();
    assert!(digests(&net, "audit").iter().all(|d| *d == canonical));
}

#[test]
fn tampering_peer_halts_and_stays_contained() {
    let (mut net, client) = network(3, 2);
    net.set_fault("p1", FaultMode::Tampering { block_number: 2, offset: 57, mask: 0x20 }).unwrap();
    let a = asset("a", "10.0.0.5", "curl", 1);
    assert!(net.append("audit", &client, &[a]).unwrap()[0].is_committed());
    let halted = net.peer("p1").unwrap().channels["audit"].halted.clone().unwrap();
    assert_eq!(halted.block_number, 2);
    assert!(matches!(net.deliver_blocks("audit", "p1"), Err(NetError::TamperDetected { block_number: 2, .. })));

    // Two honest endorsers still satisfy 2-of-3.
    let b = asset("b", "10.0.0.5", "curl", 2);
    let _ = net.append("audit", &client, &[b]);
    let canonical = net.channel("audit").unwrap().ledger.chain.digest();
    for id in ["p0", "p2"] {
        assert_eq!(net.peer(id).unwrap().channels["audit"].chain_digest(), canonical);
    }
    assert_ne!(net.peer("p1").unwrap().channels["audit"].chain_digest(), canonical);
}

#[test]
fn forged_block_is_refused_by_peers() {
    let (mut net, client) = network(2, 1);
    net.set_peer_online("p1", false).unwrap();
    net.append("audit", &client, &[asset("a", "10.0.0.5", "curl", 1)]).unwrap();
    // Rewrite a committed asset and re-sign the block with a rogue key.
    let rogue = Credential::from_secret("orderer", [9; 32]);
    let channel = net.channels.get_mut("audit").unwrap();
    let mut blocks = channel.ledger.chain.blocks().to_vec();
    let last = blocks.last_mut().unwrap();
    last.transactions[0].write_set[0].value[5] ^= 1;
    last.header.data_hash = ledger::compute_data_hash(&last.transactions);
    last.orderer_signature = rogue.sign(&codec::to_canonical(&last.header));
    let mut chain = Chain::new();
    for b in blocks {
        chain.append_block(b).unwrap();
    }
    channel.ledger.chain = chain;
    net.set_peer_online("p1", true).unwrap();
    assert!(matches!(net.deliver_blocks("audit", "p1"), Err(NetError::TamperDetected { block_number: 2, .. })));
}

#[test]
fn cross_channel_envelope_is_rejected_before_ordering() {
    let mut net = Network::new(3);
    for id in ["a0", "b0"] {
        net.add_peer(id).unwrap();
    }
    net.create_channel(ChannelSpec::new("A", &["a0"])).unwrap();
    net.create_channel(ChannelSpec::new("B", &["b0"])).unwrap();
    let client = net.register_datasource("A", &descriptor("dsA"), "pw").unwrap();

    let nonce = net.next_nonce();
    let proposal =
        Proposal::new(&client, "A", FN_DATA_APPEND, chaincode::append_args(&asset("k", "10.0.0.1", "ua", 1)), nonce);
    let peer = net.peer("a0").unwrap();
    let endorsers =
        [EndorsingPeer { credential: &peer.credential, state: &peer.channels["A"].ledger.state, online: true }];
    let envelope = txflow::endorse(&proposal, &endorsers, &net.channel("A").unwrap().config.policy).unwrap();

    let b_len = net.channel("B").unwrap().ledger.chain.len();
    assert!(matches!(net.submit_envelope("B", envelope), Err(NetError::Order(OrderError::Rejected(_)))));
    assert_eq!(net.channel("B").unwrap().ledger.chain.len(), b_len);
    assert_eq!(net.channel("B").unwrap().orderer.dropped().len(), 1);

    // A DataSource of A is unknown to B's endorsers.
    let outcome = net.append("B", &client, &[asset("k", "10.0.0.1", "ua", 1)]).unwrap();
    assert!(matches!(
        &outcome[0],
        AppendOutcome::Rejected { error: EndorseError::Chaincode(ChaincodeError::UnregisteredSubmitter(_)), .. }
    ));

    let report = assert_channel_isolation(&net);
    assert!(report.is_clean(), "{:?}", report.violations);
    assert!(!net.peer("a0").unwrap().channels.contains_key("B"));
}

#[test]
fn isolation_report_flags_foreign_data() {
    let mut net = Network::new(3);
    for id in ["a0", "b0"] {
        net.add_peer(id).unwrap();
    }
    net.create_channel(ChannelSpec::new("A", &["a0"])).unwrap();
    net.create_channel(ChannelSpec::new("B", &["b0"])).unwrap();
    let leaked = net.channel("B").unwrap().ledger.clone();
    net.peers.get_mut("a0").unwrap().channels.insert("B".into(), PeerChannel::new(&leaked, false));
    let report = assert_channel_isolation(&net);
    assert!(report.violations.iter().any(|v| v.contains("without membership")), "{:?}", report.violations);
}

#[test]
fn record_span_covers_each_block() {
    let (net, _) = network(1, 1);
    let image = net.channel("audit").unwrap().ledger.chain.image();
    let (s0, l0) = record_span(image, 0).unwrap();
    let (s1, l1) = record_span(image, 1).unwrap();
    assert_eq!((s0, s0 + l0), (0, s1));
    assert_eq!(s1 + l1, image.len());
    assert!(record_span(image, 2).is_none());
}

// ---------------------------------------------------------------------------
// Scenarios
// ---------------------------------------------------------------------------

fn assert_converged(run: &ScenarioRun) {
    for channel in run.network.channels() {
        let canonical = channel.ledger.chain.digest();
        for peer in run.honest_members(channel.id()) {
            assert_eq!(peer.channels[channel.id()].chain_digest(), canonical, "{} diverged", peer.id());
        }
    }
}

#[test]
fn ten_conflict_free_appends_on_one_peer() {
    let mut config = ScenarioConfig::single_channel(1, 1, 10);
    config.channels[0].required = Some(1);
    let run = run_scenario(&config).unwrap();
    assert_eq!(run.metrics.committed_valid, 10);
    assert_eq!(run.metrics.committed_invalid, 0);
    assert_eq!(run.metrics.delivered, 10);
    assert_converged(&run);
    assert!(run.replay_matches().unwrap());
}

#[test]
fn full_conflict_on_one_key_has_one_winner() {
    let mut config = ScenarioConfig::single_channel(5, 3, 10);
    config.workload.conflict_rate = 1.0;
    let run = run_scenario(&config).unwrap();
    let m = &run.metrics;
    assert_eq!(m.committed_valid + m.committed_invalid + m.endorsement_failures, 10);
    // Each loser either fails endorsement (key already committed) or MVCC.
    assert_eq!(m.committed_valid, 1);
    assert_eq!(m.committed_valid + m.committed_invalid, m.delivered);
    assert_eq!(run.network.channel("audit").unwrap().ledger.state.scan_prefix("weblog:").count(), 1);
}

#[test]
fn full_conflict_in_one_block_is_one_valid_nine_invalid() {
    let mut config = ScenarioConfig::single_channel(5, 3, 10);
    config.workload.conflict_rate = 1.0;
    config.workload.arrival_interval_us = 0;
    config.channels[0].max_block_txs = 100;
    config.channels[0].max_wait_ms = 50;
    let run = run_scenario(&config).unwrap();
    assert_eq!((run.metrics.committed_valid, run.metrics.committed_invalid), (1, 9));
}

#[test]
fn same_seed_same_bytes() {
    let mut config = ScenarioConfig::single_channel(77, 4, 60);
    config.workload.query_fraction = 0.2;
    config.workload.conflict_rate = 0.3;
    config.trace = true;
    let a = run_scenario(&config).unwrap();
    let b = run_scenario(&config).unwrap();
    assert_eq!(a.metrics.to_canonical(), b.metrics.to_canonical());
    assert_eq!(a.trace, b.trace);
    assert!(!a.trace.is_empty());
    config.seed = 78;
    let c = run_scenario(&config).unwrap();
    assert_ne!(a.metrics.to_canonical(), c.metrics.to_canonical());
}

#[test]
fn order_execute_matches_eov_state_and_counts() {
    let config = ScenarioConfig::single_channel(9, 4, 40);
    let eov = run_scenario(&config).unwrap();
    let oe = run_order_execute_baseline(&config).unwrap();
    assert_eq!(eov.metrics.committed_valid, 40);
    assert_eq!(oe.metrics.committed_valid, 40);
    assert_eq!(eov.metrics.channels["audit"].content_digest, oe.metrics.channels["audit"].content_digest);
    for n in oe.metrics.executions.values() {
        assert_eq!(*n, 40);
    }
    let total: u64 = eov.metrics.executions.values().sum();
    assert!(total <= 4 * eov.metrics.proposals);
    assert!(oe.replay_matches().unwrap());
    assert_converged(&oe);
}

#[test]
fn offline_peer_recovers_in_scenario() {
    let mut config = ScenarioConfig::single_channel(3, 4, 80);
    config.peers[3].fault = FaultMode::Offline { from_ms: 2, until_ms: 30 };
    let run = run_scenario(&config).unwrap();
    assert_eq!(run.metrics.committed_valid, 80);
    assert_converged(&run);
    assert!(run.replay_matches().unwrap());
}

#[test]
fn tampering_peer_detected_in_scenario() {
    for pipeline in [Pipeline::Eov, Pipeline::OrderExecute] {
        let mut config = ScenarioConfig::single_channel(4, 3, 50);
        config.pipeline = pipeline;
        config.peers[2].fault = FaultMode::Tampering { block_number: 2, offset: 300, mask: 0x04 };
        let run = run_scenario(&config).unwrap();
        assert_eq!(run.metrics.tamper_events.len(), 1, "{pipeline:?}");
        assert_eq!(run.metrics.tamper_events[0].peer, "peer2");
        assert_eq!(run.metrics.tamper_events[0].block_number, 2);
        assert_converged(&run);
    }
}

#[test]
fn scenario_config_round_trips_through_toml() {
    let text = r#"
        seed = 42
        pipeline = "order_execute"

        [network]
        link_delay_us = [100, 300]

        [[peers]]
        id = "p0"
        channels = ["a", "b"]

        [[peers]]
        id = "p1"
        channels = ["a"]
        fault = { kind = "offline", from_ms = 1, until_ms = 4 }

        [[channels]]
        id = "a"
        required = 1

        [[channels]]
        id = "b"
        datasources = 2

        [workload]
        transactions = 5
        status_codes = [[200, 9], [404, 1]]
    "#;
    let config = ScenarioConfig::from_toml(text).unwrap();
    assert_eq!(config.pipeline, Pipeline::OrderExecute);
    assert_eq!(config.peers[1].fault, FaultMode::Offline { from_ms: 1, until_ms: 4 });
    assert_eq!(config.channels[1].datasources, 2);
    assert_eq!(ScenarioConfig::from_toml(&config.to_toml()).unwrap(), config);
    let run = run_scenario(&config).unwrap();
    assert!(assert_channel_isolation(&run.network).is_clean());
}

#[test]
fn invalid_scenario_configs() {
    let base = ScenarioConfig::single_channel(1, 2, 5);
    let mut bad = base.clone();
    bad.channels[0].required = Some(3);
    assert!(matches!(run_scenario(&bad), Err(NetError::InvalidConfig(_))));
    let mut bad = base.clone();
    bad.workload.conflict_rate = 1.5;
    assert!(bad.validate().is_err());
    let mut bad = base.clone();
    bad.peers[1].id = "peer0".into();
    assert!(bad.validate().is_err());
    let mut bad = base;
    bad.peers[0].channels.push("nowhere".into());
    assert!(bad.validate().is_err());
    assert!(ScenarioConfig::from_toml("seed = 1\nbogus = 2\npeers = []\nchannels = []").is_err());
}
