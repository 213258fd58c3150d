//! Fixtures shared by unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chaincode::{self, WebLogData, FN_DATA_APPEND};
use crate::identity::{self, Credential, DataSource};
use crate::ledger::{Block, Ledger};
use crate::txflow::{
    self, ChannelConfig, EndorsementPolicy, EndorsingPeer, OrderingConfig, OrderingService, PeerInfo, Proposal,
    TransactionEnvelope,
};

pub fn asset(id: &str, ip: &str, ua: &str, datetime: u64) -> WebLogData {
    WebLogData {
        asset_id: id.into(),
        url: format!("/{id}"),
        referer: String::new(),
        return_code: 200,
        user_agent: ua.into(),
        datetime,
        ip: ip.into(),
    }
}

pub struct Fixture {
    pub orderer: Credential,
    pub peers: Vec<Credential>,
    pub client: Credential,
    pub config: ChannelConfig,
    pub ledger: Ledger,
    pub service: OrderingService,
    nonce: u64,
}

impl Fixture {
    pub fn new(peers: usize, required: u32) -> Self {
        Self::with_ordering(peers, required, OrderingConfig { max_block_txs: 1000, max_wait_ms: 10 })
    }

    pub fn with_ordering(peers: usize, required: u32, ordering: OrderingConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let orderer = Credential::generate("orderer", &mut rng);
        let peers: Vec<_> = (0..peers).map(|i| Credential::generate(format!("peer{i}"), &mut rng)).collect();
        let descriptor = DataSource {
            datasource_id: "ds1".into(),
            ip: "10.0.0.5".into(),
            port: 8080,
            username: "ops".into(),
            url: "http://10.0.0.5/logs".into(),
        };
        let (record, client) = identity::new_datasource_record(&descriptor, "pw", &mut rng).unwrap();
        let config = ChannelConfig {
            channel_id: "audit".into(),
            orderer_id: "orderer".into(),
            orderer_public_key: orderer.public_key().to_vec(),
            peers: peers
                .iter()
                .map(|p| PeerInfo {
                    peer_id: p.participant_id.clone(),
                    public_key: p.public_key().to_vec(),
                    endorser: true,
                })
                .collect(),
            policy: EndorsementPolicy::new(required, peers.iter().map(|p| p.participant_id.clone()).collect()).unwrap(),
            ordering: ordering.clone(),
            datasources: vec![record],
        };
        let genesis = txflow::genesis_block(&config, &orderer, 1_000).unwrap();
        let mut ledger = Ledger::in_memory();
        ledger.commit(genesis.clone()).unwrap();
        let service = OrderingService::new("audit", orderer.clone(), ordering, &genesis);
        Fixture { orderer, peers, client, config, ledger, service, nonce: 0 }
    }

    pub fn next_nonce(&mut self) -> [u8; 8] {
        self.nonce += 1;
        self.nonce.to_be_bytes()
    }

    pub fn proposal(&mut self, data: &WebLogData) -> Proposal {
        let nonce = self.next_nonce();
        Proposal::new(&self.client, "audit", FN_DATA_APPEND, chaincode::append_args(data), nonce)
    }

    pub fn endorse(&self, proposal: &Proposal) -> TransactionEnvelope {
        let endorsers: Vec<_> = self
            .peers
            .iter()
            .map(|c| EndorsingPeer { credential: c, state: &self.ledger.state, online: true })
            .collect();
        txflow::endorse(proposal, &endorsers, &self.config.policy).unwrap()
    }

    pub fn append_envelope(&mut self, data: &WebLogData) -> TransactionEnvelope {
        let p = self.proposal(data);
        self.endorse(&p)
    }

    /// Orders the envelopes into one block and commits it after validation.
    pub fn commit_block(&mut self, envelopes: Vec<TransactionEnvelope>) -> Block {
        let now = self.ledger.chain.tip().unwrap().header.timestamp + 1;
        for env in envelopes {
            self.service.submit(env, now).unwrap();
        }
        let mut blocks = self.service.flush(now);
        assert_eq!(blocks.len(), 1, "fixture expects a single block");
        let block = txflow::validate(blocks.remove(0), &self.ledger.state);
        self.ledger.commit(block.clone()).unwrap();
        block
    }
}
