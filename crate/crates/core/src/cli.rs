//! The `medusa` command-line front end.
//!
//! Each invocation loads the data directory, performs one operation through
//! an in-process [`Network`] and exits. Layout of the data directory:
//!
//! ```text
//! config                          CliConfig, canonical encoding
//! lock                            present while a writer runs
//! keys/orderer.key                KeyFile of the ordering service
//! keys/peers/<peer>.key
//! keys/datasources/<channel>/<id>.key
//! channels/<channel>.blocks       block file
//! ```
//!
//! Settings resolve as environment (`MEDUSA_*`) over flags over the config
//! file. Passwords come from `MEDUSA_PASSWORD` or the first line of stdin.
//!
//! Exit codes: 0 success, 1 usage or bad input, 2 conflict or duplicate,
//! 3 invalid endorsement policy, 4 verification failure, 5 I/O or lock.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chaincode::{ChaincodeError, QuerySpec, WebLogData};
use crate::codec::{self, Digest};
use crate::identity::{Credential, DataSource, IdentityError, KeyFile};
use crate::ingest::{self, IngestError, IngestOptions, ParseOptions};
use crate::ledger::{self, Block, Chain, LedgerError};
use crate::netsim::{self, AppendOutcome, ChannelClient, ChannelSpec, NetError, Network, ScenarioConfig};
use crate::txflow::{EndorseError, OrderingConfig, TxFlowError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFLICT: i32 = 2;
pub const EXIT_POLICY: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutputFormat {
    #[default]
    Table,
    Canonical,
}

/// Contents of `data_dir/config`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CliConfig {
    pub default_channel: Option<String>,
    pub output_format: OutputFormat,
}

#[derive(Debug, Parser)]
#[command(name = "medusa", version, about = "Tamper-evident audit-log ledger")]
struct Cli {
    /// Data directory [env: MEDUSA_DATA_DIR] [default: .medusa]
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Output format [env: MEDUSA_FORMAT]
    #[arg(long, global = true, value_enum)]
    format: Option<OutputFormat>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create and list channels
    #[command(subcommand)]
    Channel(ChannelCmd),
    /// Register and list DataSources
    #[command(subcommand)]
    Datasource(DatasourceCmd),
    /// Append one log record
    Append(AppendArgs),
    /// Ingest a Combined Log Format file
    Ingest(IngestArgs),
    /// Query log records
    Query(QueryArgs),
    /// Verify a channel's block file
    Verify(VerifyArgs),
    /// Inspect blocks
    #[command(subcommand)]
    Block(BlockCmd),
    /// Run a simulation scenario
    Simulate(SimulateArgs),
}

#[derive(Debug, Subcommand)]
enum ChannelCmd {
    Create(ChannelCreateArgs),
    List,
}

#[derive(Debug, Args)]
struct ChannelCreateArgs {
    channel_id: String,
    /// Member peers, comma separated; keys are created for new peers
    #[arg(long, value_delimiter = ',', required = true)]
    peers: Vec<String>,
    /// Endorsing peers [default: all members]
    #[arg(long, value_delimiter = ',')]
    endorsers: Option<Vec<String>>,
    /// Matching endorsements required [default: majority]
    #[arg(long)]
    policy: Option<u32>,
    #[arg(long, default_value_t = OrderingConfig::default().max_block_txs)]
    max_block_txs: u32,
    #[arg(long, default_value_t = OrderingConfig::default().max_wait_ms)]
    max_wait_ms: u64,
}

#[derive(Debug, Args)]
struct ChannelOpt {
    /// Channel [env: MEDUSA_CHANNEL] [default: from config]
    #[arg(long)]
    channel: Option<String>,
}

#[derive(Debug, Subcommand)]
enum DatasourceCmd {
    /// Register a DataSource; the password is read from MEDUSA_PASSWORD or stdin
    Register(RegisterArgs),
    List(ChannelOpt),
}

#[derive(Debug, Args)]
struct RegisterArgs {
    #[command(flatten)]
    channel: ChannelOpt,
    #[arg(long)]
    id: String,
    #[arg(long)]
    ip: String,
    #[arg(long)]
    port: u32,
    #[arg(long)]
    username: String,
    #[arg(long)]
    url: String,
}

#[derive(Debug, Args)]
struct AppendArgs {
    #[command(flatten)]
    channel: ChannelOpt,
    /// Submitting DataSource
    #[arg(long)]
    datasource: String,
    /// Derived from the content when omitted
    #[arg(long)]
    asset_id: Option<String>,
    #[arg(long)]
    url: String,
    #[arg(long, default_value = "")]
    referer: String,
    #[arg(long)]
    status: u16,
    #[arg(long)]
    user_agent: String,
    /// UTC epoch milliseconds
    #[arg(long)]
    datetime: u64,
    #[arg(long)]
    ip: String,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[command(flatten)]
    channel: ChannelOpt,
    #[arg(long)]
    datasource: String,
    file: PathBuf,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    /// Treat backslashes in quoted fields literally
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[command(flatten)]
    channel: ChannelOpt,
    /// Authenticating DataSource; password from MEDUSA_PASSWORD or stdin
    #[arg(long)]
    datasource: String,
    #[arg(long, conflicts_with_all = ["user_agent", "from", "to"])]
    ip: Option<String>,
    #[arg(long, conflicts_with_all = ["from", "to"])]
    user_agent: Option<String>,
    /// Inclusive lower bound, epoch ms
    #[arg(long, requires = "to")]
    from: Option<u64>,
    /// Exclusive upper bound, epoch ms
    #[arg(long, requires = "from")]
    to: Option<u64>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    channel: ChannelOpt,
    /// Verify this block file instead of a channel in the data directory
    #[arg(long, conflicts_with = "channel")]
    file: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum BlockCmd {
    Show(BlockShowArgs),
}

#[derive(Debug, Args)]
struct BlockShowArgs {
    #[command(flatten)]
    channel: ChannelOpt,
    number: u64,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario configuration (TOML)
    config: PathBuf,
    /// Write the event trace here
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug)]
struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    fn io(context: &Path, e: impl std::fmt::Display) -> Self {
        Self::new(EXIT_IO, format!("{}: {e}", context.display()))
    }
}

impl From<LedgerError> for CliError {
    fn from(e: LedgerError) -> Self {
        let code = match e {
            LedgerError::Io(_) | LedgerError::AlreadyExists(_) => EXIT_IO,
            LedgerError::NotFound(_) => EXIT_USAGE,
            _ => EXIT_VERIFY,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        let code = match &e {
            NetError::ChannelExists(_)
            | NetError::PeerExists(_)
            | NetError::Identity(IdentityError::DuplicateParticipant(_)) => EXIT_CONFLICT,
            NetError::TxFlow(TxFlowError::InvalidPolicy { .. }) => EXIT_POLICY,
            NetError::TamperDetected { .. } => EXIT_VERIFY,
            NetError::Ledger(inner) => return CliError::new(CliError::from_ledger_code(inner), e.to_string()),
            _ => EXIT_USAGE,
        };
        CliError::new(code, e.to_string())
    }
}

impl CliError {
    fn from_ledger_code(e: &LedgerError) -> i32 {
        match e {
            LedgerError::Io(_) | LedgerError::AlreadyExists(_) => EXIT_IO,
            LedgerError::NotFound(_) => EXIT_USAGE,
            _ => EXIT_VERIFY,
        }
    }
}

type CliResult = Result<(), CliError>;

/// Removes the lock file when dropped.
struct WriteLock(PathBuf);

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

struct Ctx<'a> {
    data_dir: PathBuf,
    format: OutputFormat,
    config: CliConfig,
    env: &'a BTreeMap<String, String>,
    stdin: &'a mut dyn BufRead,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn config_path(&self) -> PathBuf {
        self.data_dir.join("config")
    }

    fn channel_path(&self, channel_id: &str) -> PathBuf {
        self.data_dir.join("channels").join(format!("{channel_id}.blocks"))
    }

    fn key_path(&self, kind: &str, name: &str) -> PathBuf {
        self.data_dir.join("keys").join(kind).join(format!("{name}.key"))
    }

    fn channel(&self, opt: &ChannelOpt) -> Result<String, CliError> {
        self.env
            .get("MEDUSA_CHANNEL")
            .cloned()
            .or_else(|| opt.channel.clone())
            .or_else(|| self.config.default_channel.clone())
            .ok_or_else(|| CliError::usage("no channel given (use --channel or set a default)"))
    }

    fn now_ms(&self) -> u64 {
        self.env
            .get("MEDUSA_NOW_MS")
            .and_then(|v| v.parse().ok())
            .unwrap_or_else(|| chrono::Utc::now().timestamp_millis().max(0) as u64)
    }

    fn rng(&self) -> ChaCha8Rng {
        match self.env.get("MEDUSA_SEED").and_then(|v| v.parse().ok()) {
            Some(seed) => ChaCha8Rng::seed_from_u64(seed),
            None => ChaCha8Rng::from_entropy(),
        }
    }

    fn password(&mut self) -> Result<String, CliError> {
        if let Some(pw) = self.env.get("MEDUSA_PASSWORD") {
            return Ok(pw.clone());
        }
        let mut line = String::new();
        self.stdin.read_line(&mut line).map_err(|e| CliError::new(EXIT_IO, format!("stdin: {e}")))?;
        let pw = line.trim_end_matches(['\r', '\n']).to_string();
        if pw.is_empty() {
            return Err(CliError::usage("no password given (set MEDUSA_PASSWORD or pipe it on stdin)"));
        }
        Ok(pw)
    }

    fn ensure_dirs(&self) -> CliResult {
        for sub in ["channels", "keys/peers", "keys/datasources"] {
            let dir = self.data_dir.join(sub);
            fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        let path = self.config_path();
        if !path.exists() {
            write_atomic(&path, codec::to_canonical_string(&self.config).as_bytes())?;
        }
        Ok(())
    }

    fn lock(&self) -> Result<WriteLock, CliError> {
        self.ensure_dirs()?;
        let path = self.data_dir.join("lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WriteLock(path))
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                Err(CliError::new(EXIT_IO, format!("{} is locked by another writer", self.data_dir.display())))
            }
            Err(e) => Err(CliError::io(&path, e)),
        }
    }

    fn save_config(&self) -> CliResult {
        write_atomic(&self.config_path(), codec::to_canonical_string(&self.config).as_bytes())
    }

    fn load_or_create_key(&self, path: &Path, id: &str, rng: &mut ChaCha8Rng) -> Result<Credential, CliError> {
        if path.exists() {
            return read_key(path);
        }
        let credential = Credential::generate(id, rng);
        write_key(path, &credential)?;
        Ok(credential)
    }

    /// Orderer plus every known peer, with no channels opened.
    fn network(&self, create_orderer: bool) -> Result<Network, CliError> {
        let mut rng = self.rng();
        let orderer_path = self.data_dir.join("keys").join("orderer.key");
        let orderer = if create_orderer {
            self.load_or_create_key(&orderer_path, "orderer", &mut rng)?
        } else {
            read_key(&orderer_path)?
        };
        let mut net = Network::with_orderer(orderer, rng);
        let peers_dir = self.data_dir.join("keys").join("peers");
        if peers_dir.is_dir() {
            let mut paths: Vec<_> = fs::read_dir(&peers_dir)
                .map_err(|e| CliError::io(&peers_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "key"))
                .collect();
            paths.sort();
            for path in paths {
                net.add_peer_with_credential(read_key(&path)?)?;
            }
        }
        net.set_clock(self.now_ms());
        Ok(net)
    }

    fn open(&self, channel_id: &str) -> Result<Network, CliError> {
        let path = self.channel_path(channel_id);
        if !path.exists() {
            return Err(CliError::usage(format!("unknown channel {channel_id}")));
        }
        let mut net = self.network(false)?;
        net.open_channel(Chain::open(&path)?)?;
        net.set_clock(self.now_ms());
        Ok(net)
    }

    fn emit(&mut self, text: &str) -> CliResult {
        self.out
            .write_all(text.as_bytes())
            .and_then(|()| if text.ends_with('\n') || text.is_empty() { Ok(()) } else { self.out.write_all(b"\n") })
            .map_err(|e| CliError::new(EXIT_IO, format!("stdout: {e}")))
    }

    fn emit_value<T: Serialize>(&mut self, value: &T, table: impl FnOnce(&T) -> String) -> CliResult {
        let text = match self.format {
            OutputFormat::Canonical => codec::to_canonical_string(value),
            OutputFormat::Table => table(value),
        };
        self.emit(&text)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).and_then(|()| fs::rename(&tmp, path)).map_err(|e| CliError::io(path, e))
}

fn write_key(path: &Path, credential: &Credential) -> CliResult {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let bytes = codec::to_canonical(&KeyFile::from(credential));
    let mut options = fs::OpenOptions::new();
    options.write(true).create_new(true);
    #[cfg(unix)]
    std::os::unix::fs::OpenOptionsExt::mode(&mut options, 0o600);
    options.open(path).and_then(|mut f| f.write_all(&bytes)).map_err(|e| CliError::io(path, e))
}

fn read_key(path: &Path) -> Result<Credential, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let file: KeyFile =
        codec::from_canonical(&bytes).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", path.display())))?;
    Credential::try_from(file).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn resolve_settings(cli: &Cli, env: &BTreeMap<String, String>) -> Result<(PathBuf, CliConfig, OutputFormat), CliError> {
    let data_dir = env
        .get("MEDUSA_DATA_DIR")
        .map(PathBuf::from)
        .or_else(|| cli.data_dir.clone())
        .unwrap_or_else(|| PathBuf::from(".medusa"));
    let config_path = data_dir.join("config");
    let config = if config_path.exists() {
        let bytes = fs::read(&config_path).map_err(|e| CliError::io(&config_path, e))?;
        codec::from_canonical(&bytes).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", config_path.display())))?
    } else {
        CliConfig::default()
    };
    let format = match env.get("MEDUSA_FORMAT") {
        Some(v) => OutputFormat::from_str(v, true).map_err(|_| CliError::usage(format!("bad MEDUSA_FORMAT {v:?}")))?,
        None => cli.format.unwrap_or(config.output_format),
    };
    Ok((data_dir, config, format))
}

/// Runs one command line. `args` includes the program name.
pub fn run<I, S>(
    args: I,
    env: &BTreeMap<String, String>,
    stdin: &mut dyn BufRead,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = resolve_settings(&cli, env).and_then(|(data_dir, config, format)| {
        let mut ctx = Ctx { data_dir, format, config, env, stdin, out };
        dispatch(&mut ctx, cli.command)
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "medusa: {}", e.message);
            e.code
        }
    }
}

/// Entry point for the binary, wired to the process environment.
pub fn main_with_std() -> i32 {
    let env: BTreeMap<String, String> = std::env::vars().filter(|(k, _)| k.starts_with("MEDUSA_")).collect();
    let stdin = io::stdin();
    let mut stdin = stdin.lock();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let code = run(std::env::args_os(), &env, &mut stdin, &mut out, &mut io::stderr());
    let _ = out.flush();
    code
}

fn dispatch(ctx: &mut Ctx<'_>, command: Command) -> CliResult {
    match command {
        Command::Channel(ChannelCmd::Create(args)) => cmd_channel_create(ctx, args),
        Command::Channel(ChannelCmd::List) => cmd_channel_list(ctx),
        Command::Datasource(DatasourceCmd::Register(args)) => cmd_datasource_register(ctx, args),
        Command::Datasource(DatasourceCmd::List(opt)) => cmd_datasource_list(ctx, opt),
        Command::Append(args) => cmd_append(ctx, args),
        Command::Ingest(args) => cmd_ingest(ctx, args),
        Command::Query(args) => cmd_query(ctx, args),
        Command::Verify(args) => cmd_verify(ctx, args),
        Command::Block(BlockCmd::Show(args)) => cmd_block_show(ctx, args),
        Command::Simulate(args) => cmd_simulate(ctx, args),
    }
}

#[derive(Serialize)]
struct ChannelCreated {
    channel_id: String,
    genesis_hash: Digest,
    peers: Vec<String>,
    required: u32,
}

fn cmd_channel_create(ctx: &mut Ctx<'_>, args: ChannelCreateArgs) -> CliResult {
    let _lock = ctx.lock()?;
    let path = ctx.channel_path(&args.channel_id);
    if path.exists() {
        return Err(CliError::new(EXIT_CONFLICT, format!("channel {} already exists", args.channel_id)));
    }
    if args.channel_id.is_empty() || !args.channel_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
        return Err(CliError::usage(format!("invalid channel id {:?}", args.channel_id)));
    }
    let endorsers = args.endorsers.clone().unwrap_or_else(|| args.peers.clone());
    if let Some(k) = args.policy {
        if k < 1 || k as usize > endorsers.len() {
            return Err(CliError::new(
                EXIT_POLICY,
                TxFlowError::InvalidPolicy { required: k, endorsers: endorsers.len() }.to_string(),
            ));
        }
    }
    let mut net = ctx.network(true)?;
    for peer in &args.peers {
        if net.peer(peer).is_none() {
            let credential = Credential::generate(peer.as_str(), net.rng());
            write_key(&ctx.key_path("peers", peer), &credential)?;
            net.add_peer_with_credential(credential)?;
        }
    }
    net.create_channel(ChannelSpec {
        channel_id: args.channel_id.clone(),
        peers: args.peers.clone(),
        endorsers: Some(endorsers),
        required: args.policy,
        ordering: OrderingConfig { max_block_txs: args.max_block_txs, max_wait_ms: args.max_wait_ms },
        datasources: vec![],
        storage: Some(path),
    })?;
    let channel = net.channel(&args.channel_id).expect("just created");
    let created = ChannelCreated {
        channel_id: args.channel_id.clone(),
        genesis_hash: channel.ledger.chain.tip_hash(),
        peers: args.peers,
        required: channel.config.policy.required,
    };
    if ctx.config.default_channel.is_none() {
        ctx.config.default_channel = Some(args.channel_id);
        ctx.save_config()?;
    }
    ctx.emit_value(&created, |c| {
        format!(
            "created channel {} ({} of {} peers)\ngenesis {}",
            c.channel_id,
            c.required,
            c.peers.len(),
            c.genesis_hash
        )
    })
}

fn cmd_channel_list(ctx: &mut Ctx<'_>) -> CliResult {
    let dir = ctx.data_dir.join("channels");
    let mut ids: Vec<String> = match fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str()?.strip_suffix(".blocks").map(String::from))
            .collect(),
        Err(e) if e.kind() == io::ErrorKind::NotFound => vec![],
        Err(e) => return Err(CliError::io(&dir, e)),
    };
    ids.sort();
    ctx.emit_value(&ids, |ids| ids.join("\n"))
}

#[derive(Serialize)]
struct Registered {
    datasource_id: String,
    channel_id: String,
    key_file: String,
}

fn cmd_datasource_register(ctx: &mut Ctx<'_>, args: RegisterArgs) -> CliResult {
    let channel_id = ctx.channel(&args.channel)?;
    let password = ctx.password()?;
    let _lock = ctx.lock()?;
    let mut net = ctx.open(&channel_id)?;
    let descriptor = DataSource {
        datasource_id: args.id.clone(),
        ip: args.ip,
        port: args.port,
        username: args.username,
        url: args.url,
    };
    let key_path = ctx.key_path(&format!("datasources/{channel_id}"), &args.id);
    if net.registry(&channel_id)?.contains(&args.id) || key_path.exists() {
        return Err(CliError::new(EXIT_CONFLICT, format!("participant {} is already registered", args.id)));
    }
    let credential = net.register_datasource(&channel_id, &descriptor, &password)?;
    write_key(&key_path, &credential)?;
    let done = Registered { datasource_id: args.id, channel_id, key_file: key_path.display().to_string() };
    ctx.emit_value(&done, |d| format!("registered {} on {}\nsigning key {}", d.datasource_id, d.channel_id, d.key_file))
}

fn cmd_datasource_list(ctx: &mut Ctx<'_>, opt: ChannelOpt) -> CliResult {
    let channel_id = ctx.channel(&opt)?;
    let net = ctx.open(&channel_id)?;
    let registry = net.registry(&channel_id)?;
    match ctx.format {
        OutputFormat::Canonical => ctx.emit(&registry.export()),
        OutputFormat::Table => {
            let lines: Vec<String> = registry
                .datasources()
                .map(|r| format!("{:<16} {}:{:<6} {:<12} {}", r.datasource_id, r.ip, r.port, r.username, r.url))
                .collect();
            ctx.emit(&lines.join("\n"))
        }
    }
}

fn datasource_key(ctx: &Ctx<'_>, channel_id: &str, id: &str) -> Result<Credential, CliError> {
    let path = ctx.key_path(&format!("datasources/{channel_id}"), id);
    if !path.exists() {
        return Err(CliError::usage(format!("no signing key for {id} on {channel_id}")));
    }
    read_key(&path)
}

#[derive(Serialize)]
struct Appended {
    asset_id: String,
    tx_id: Digest,
    block_number: u64,
}

fn cmd_append(ctx: &mut Ctx<'_>, args: AppendArgs) -> CliResult {
    let channel_id = ctx.channel(&args.channel)?;
    let _lock = ctx.lock()?;
    let mut net = ctx.open(&channel_id)?;
    let credential = datasource_key(ctx, &channel_id, &args.datasource)?;
    let mut asset = WebLogData {
        asset_id: String::new(),
        url: args.url,
        referer: args.referer,
        return_code: args.status,
        user_agent: args.user_agent,
        datetime: args.datetime,
        ip: args.ip,
    };
    asset.asset_id = args.asset_id.unwrap_or_else(|| ingest::derive_asset_id(&asset));
    let outcome = net.append(&channel_id, &credential, &[asset.clone()])?.remove(0);
    match outcome {
        AppendOutcome::Committed { tx_id, block_number } => {
            let done = Appended { asset_id: asset.asset_id, tx_id, block_number };
            ctx.emit_value(&done, |d| format!("appended {} in block {}\ntx {}", d.asset_id, d.block_number, d.tx_id))
        }
        AppendOutcome::Rejected { error: EndorseError::Chaincode(ChaincodeError::DuplicateAsset(id)), .. } => {
            Err(CliError::new(EXIT_CONFLICT, format!("duplicate asset {id}")))
        }
        AppendOutcome::Invalid { flag, block_number, .. } => Err(CliError::new(
            EXIT_CONFLICT,
            format!("transaction committed invalid in block {block_number}: {flag:?}"),
        )),
        AppendOutcome::Rejected { error, .. } => Err(CliError::usage(error.to_string())),
        AppendOutcome::Dropped { reason, .. } => Err(CliError::usage(reason)),
    }
}

fn cmd_ingest(ctx: &mut Ctx<'_>, args: IngestArgs) -> CliResult {
    let channel_id = ctx.channel(&args.channel)?;
    let _lock = ctx.lock()?;
    let mut net = ctx.open(&channel_id)?;
    let credential = datasource_key(ctx, &channel_id, &args.datasource)?;
    let options = IngestOptions { batch_size: args.batch_size, parse: ParseOptions { strict: args.strict } };
    let mut sink = ChannelClient::new(&mut net, channel_id);
    match ingest::ingest_file_with(&args.file, &credential, &mut sink, options) {
        Ok(report) => ctx.emit_value(&report, |r| r.to_table()),
        Err(IngestError::FileUnreadable { path, source }) => Err(CliError::new(EXIT_IO, format!("{path}: {source}"))),
        Err(IngestError::SubmissionFailure { report, reason }) => {
            ctx.emit_value(&report, |r| r.to_table())?;
            Err(CliError::new(EXIT_IO, format!("submission failed: {reason}")))
        }
    }
}

/// One line per record, in `(datetime, asset_id)` order.
pub fn format_rows(rows: &[WebLogData], format: OutputFormat) -> String {
    let mut out = String::new();
    for r in rows {
        match format {
            OutputFormat::Canonical => out.push_str(&codec::to_canonical_string(r)),
            OutputFormat::Table => {
                let when = chrono::DateTime::from_timestamp_millis(r.datetime as i64)
                    .map(|d| d.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string())
                    .unwrap_or_else(|| r.datetime.to_string());
                out.push_str(&format!(
                    "{}  {when}  {}  {}  {}  {:?}  {:?}",
                    r.asset_id, r.ip, r.return_code, r.url, r.referer, r.user_agent
                ));
            }
        }
        out.push('\n');
    }
    out
}

fn cmd_query(ctx: &mut Ctx<'_>, args: QueryArgs) -> CliResult {
    let channel_id = ctx.channel(&args.channel)?;
    let password = ctx.password()?;
    let net = ctx.open(&channel_id)?;
    let query = match (args.ip, args.user_agent, args.from, args.to) {
        (Some(ip), _, _, _) => QuerySpec::ByIp(ip),
        (_, Some(ua), _, _) => QuerySpec::ByUserAgent(ua),
        (_, _, Some(from), Some(to)) => QuerySpec::ByDatetimeRange { from, to },
        _ => QuerySpec::All,
    };
    let rows = net.query(&channel_id, &args.datasource, &password, &query)?;
    let text = format_rows(&rows, ctx.format);
    ctx.emit(&text)
}

fn cmd_verify(ctx: &mut Ctx<'_>, args: VerifyArgs) -> CliResult {
    let path = match args.file {
        Some(path) => path,
        None => ctx.channel_path(&ctx.channel(&args.channel)?),
    };
    if !path.exists() {
        return Err(CliError::new(EXIT_IO, format!("{}: no such block file", path.display())));
    }
    let report = ledger::verify_block_file(&path).map_err(|e| CliError::io(&path, e))?;
    ctx.emit_value(&report, |r| {
        if r.ok {
            format!("ok: {} blocks verified", r.blocks_checked)
        } else {
            format!(
                "TAMPERED\nfirst_bad_block: {}\nfailure_kind: {}\ndetail: {}",
                r.first_bad_block.map_or("-".into(), |b| b.to_string()),
                codec::to_canonical_string(&r.failure_kind).trim_matches('"'),
                r.detail.as_deref().unwrap_or("")
            )
        }
    })?;
    if report.ok {
        Ok(())
    } else {
        Err(CliError::new(
            EXIT_VERIFY,
            format!("verification failed at block {}", report.first_bad_block.map_or("-".into(), |b| b.to_string())),
        ))
    }
}

fn block_table(block: &Block) -> String {
    let h = &block.header;
    let mut out = format!(
        "block {}\nhash          {}\nprevious_hash {}\ndata_hash     {}\ntimestamp     {}\norderer       {}\n",
        h.block_number,
        block.hash(),
        h.previous_hash,
        h.data_hash,
        h.timestamp,
        block.orderer_signature.signer_id
    );
    for (i, (tx, flag)) in block.transactions.iter().zip(&block.validity_flags).enumerate() {
        out.push_str(&format!(
            "tx {i}  {}  {}  {}  {:?}\n",
            tx.tx_id, tx.proposal.function, tx.proposal.submitter, flag
        ));
    }
    out
}

fn cmd_block_show(ctx: &mut Ctx<'_>, args: BlockShowArgs) -> CliResult {
    let channel_id = ctx.channel(&args.channel)?;
    let path = ctx.channel_path(&channel_id);
    if !path.exists() {
        return Err(CliError::usage(format!("unknown channel {channel_id}")));
    }
    let chain = Chain::open(&path)?;
    let block = chain.get_block(args.number)?;
    match ctx.format {
        OutputFormat::Canonical => {
            let text = String::from_utf8(block.to_bytes()).expect("canonical text is UTF-8");
            ctx.emit(&text)
        }
        OutputFormat::Table => ctx.emit(&block_table(block)),
    }
}

fn cmd_simulate(ctx: &mut Ctx<'_>, args: SimulateArgs) -> CliResult {
    let text = fs::read_to_string(&args.config).map_err(|e| CliError::io(&args.config, e))?;
    let mut config = ScenarioConfig::from_toml(&text).map_err(CliError::from)?;
    config.trace |= args.trace.is_some();
    let run = netsim::run_scenario(&config)?;
    if let Some(path) = &args.trace {
        let mut trace = run.trace.join("\n");
        trace.push('\n');
        fs::write(path, trace).map_err(|e| CliError::io(path, e))?;
    }
    ctx.emit_value(&run.metrics, |m| m.to_table())
}
