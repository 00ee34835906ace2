//! Operator command line: run the training service, drive a device through
//! provision/query/predict, and reproduce the evaluation experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use ptaas_core::corpus::CorpusStore;
use ptaas_core::envelope::{digest, DeviceKeyRecord, DpSection, KeyRegistry, RejectCode};
use ptaas_core::learn::{
    deserialize_model, pretrain_base, serialize_model, ModelArtifact, ModelSpec,
    PretrainedBase, TrainMeta,
};
use ptaas_core::privacy::{Mechanism, NoisePlacement};
use ptaas_core::protocol::{
    device_execute, net_ops, reset_net_ops, serve, ClientSession, ProtocolError, QueryConfig,
    ServerConfig, ServerState, TcpTransport,
};
use ptaas_core::{eval, synth};

#[derive(Parser)]
#[command(name = "ptaas", version, about = "Privacy-enhanced training service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training service until the process is terminated.
    Server {
        /// Path to the TOML server configuration.
        #[arg(long, env = "PTAAS_CONFIG")]
        config: PathBuf,
    },
    /// Device-side operations.
    Device {
        #[command(subcommand)]
        command: DeviceCommand,
    },
    /// Seeded experiments; each writes a TSV report.
    Eval {
        #[command(subcommand)]
        experiment: EvalCommand,
    },
    /// Generate a synthetic cluster corpus file (tooling for setups).
    GenCorpus {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        clusters: u32,
        #[arg(long, default_value_t = 16)]
        dim: u32,
        #[arg(long, default_value_t = 100)]
        per_cluster: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DeviceCommand {
    /// Create device credentials and register them with the server registry.
    Provision {
        /// Device state directory (created if missing).
        #[arg(long)]
        home: PathBuf,
        /// Key registry file shared with the server.
        #[arg(long)]
        registry: PathBuf,
        /// Seed for credential generation (default: OS entropy).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one full training round against the server.
    Query(QueryArgs),
    /// Print the deployed model's digest and metadata.
    ShowModel {
        #[arg(long)]
        home: PathBuf,
    },
    /// Local inference on the deployed model; never touches the network.
    Predict {
        #[arg(long)]
        home: PathBuf,
        /// File with one comma-separated feature row.
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    home: PathBuf,
    /// Server address, e.g. 127.0.0.1:7070.
    #[arg(long)]
    server: String,
    /// Local data file: one `label<TAB>v1,v2,...` row per sample.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.0)]
    delta: f64,
    /// none | laplace | gaussian | randomized_response
    #[arg(long, default_value = "none")]
    mechanism: String,
    #[arg(long, value_enum, default_value_t = PlacementArg::PostHash)]
    placement: PlacementArg,
    /// Number of corpus samples to retrieve.
    #[arg(long, default_value_t = 50)]
    k: u32,
    #[arg(long, default_value_t = 40)]
    epochs: u32,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    noise_seed: u64,
    /// Send a MinHash sketch instead of SimHash.
    #[arg(long, default_value_t = false)]
    minhash: bool,
    #[arg(long, default_value_t = 128)]
    minhash_k: u32,
    #[arg(long, default_value_t = 64)]
    simhash_b: u32,
    #[arg(long, value_enum, default_value_t = ArchArg::Logreg)]
    arch: ArchArg,
    #[arg(long, default_value_t = 16)]
    hidden: u32,
    /// Number of classes the requested model should output.
    #[arg(long)]
    classes: u32,
    /// Restrict retrieval to these corpus labels.
    #[arg(long, value_delimiter = ',')]
    label_hints: Vec<i64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlacementArg {
    PostHash,
    Projection,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Logreg,
    Mlp1,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Sweep epsilon and report retrieval precision and tuned accuracy.
    PrivacyUtility(EvalArgs),
    /// Sketch-inversion attack; reports mean L2 error per epsilon.
    Reconstruction(EvalArgs),
    /// Fine-tune on retrieved vs random vs no extra data.
    RetrievalAblation(EvalArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    trials: u64,
    /// Output directory for the TSV report.
    #[arg(long)]
    out: PathBuf,
}

/// Persisted device credentials and session cursor.
#[derive(Serialize, Deserialize)]
struct DeviceState {
    device_id: String,
    key: String,
    nonce_salt: String,
    nonce_counter: u64,
    epsilon_spent: f64,
}

const MODEL_FILE: &str = "model.bin";
const STATE_FILE: &str = "device.toml";

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

struct CmdError {
    code: u8,
    message: String,
}

fn usage_err(message: impl Into<String>) -> CmdError {
    CmdError {
        code: 2,
        message: message.into(),
    }
}

fn runtime_err(message: impl Into<String>) -> CmdError {
    CmdError {
        code: 1,
        message: message.into(),
    }
}

fn run(cli: Cli) -> Result<(), CmdError> {
    match cli.command {
        Command::Server { config } => cmd_server(&config),
        Command::Device { command } => match command {
            DeviceCommand::Provision {
                home,
                registry,
                seed,
            } => cmd_provision(&home, &registry, seed),
            DeviceCommand::Query(args) => cmd_query(args),
            DeviceCommand::ShowModel { home } => cmd_show_model(&home),
            DeviceCommand::Predict { home, input } => cmd_predict(&home, &input),
        },
        Command::Eval { experiment } => cmd_eval(experiment),
        Command::GenCorpus {
            seed,
            clusters,
            dim,
            per_cluster,
            out,
        } => {
            let dataset = synth::generate(synth::ClusterConfig {
                num_clusters: clusters as usize,
                dim: dim as usize,
                records_per_cluster: per_cluster as usize,
                noise_std: 0.25,
                seed,
            });
            dataset
                .write_corpus_file(&out)
                .map_err(|e| runtime_err(format!("write corpus: {e}")))?;
            println!("corpus\t{}", out.display());
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// server

fn cmd_server(config_path: &Path) -> Result<(), CmdError> {
    let config = ServerConfig::load(config_path).map_err(|e| usage_err(e.to_string()))?;
    if !config.corpus_path.exists() {
        return Err(usage_err(format!(
            "corpus not found: {}",
            config.corpus_path.display()
        )));
    }

    let corpus = load_corpus(&config).map_err(usage_err)?;
    let corpus = std::sync::Arc::new(corpus);
    let base = std::sync::Arc::new(load_or_pretrain_base(&config, &corpus)?);
    let registry = if config.key_registry_path.exists() {
        KeyRegistry::load(&config.key_registry_path)
            .map_err(|e| usage_err(format!("registry: {e}")))?
    } else {
        KeyRegistry::new()
    };

    let state = std::sync::Arc::new(ServerState::new(
        registry,
        corpus,
        base,
        config.epsilon_cap,
        config.limits.clone(),
        config.audit_log_path.clone(),
    ));
    let handle =
        serve(state, &config.listen_addr).map_err(|e| runtime_err(format!("serve: {e}")))?;
    println!("listening\t{}", handle.addr);
    // Serve until the process is terminated.
    loop {
        std::thread::sleep(std::time::Duration::from_secs(3600));
    }
}

fn load_corpus(config: &ServerConfig) -> Result<CorpusStore, String> {
    let is_text = config
        .corpus_path
        .extension()
        .map(|e| e == "tsv" || e == "txt")
        .unwrap_or(false);
    if is_text {
        CorpusStore::ingest(&config.corpus_path, config.sketch_params, 1)
            .map_err(|e| format!("ingest corpus: {e}"))
    } else {
        CorpusStore::load(&config.corpus_path).map_err(|e| format!("load corpus: {e}"))
    }
}

fn load_or_pretrain_base(
    config: &ServerConfig,
    corpus: &CorpusStore,
) -> Result<PretrainedBase, CmdError> {
    if config.base_model_path.exists() {
        let bytes = std::fs::read(&config.base_model_path)
            .map_err(|e| usage_err(format!("read base model: {e}")))?;
        let artifact = deserialize_model(&bytes)
            .map_err(|e| usage_err(format!("parse base model: {e}")))?;
        return Ok(PretrainedBase {
            spec: artifact.spec,
            params: artifact.params,
            provenance: corpus.digest(),
        });
    }
    let spec = ModelSpec::logreg(corpus.dim as u32, corpus.num_classes);
    let base = pretrain_base(&corpus.all_samples(), &spec, 40, 0.5, 7, corpus.digest())
        .map_err(|e| runtime_err(format!("pretrain: {e}")))?;
    let artifact = ModelArtifact {
        spec: base.spec,
        params: base.params.clone(),
        train_meta: TrainMeta {
            seed: 7,
            epochs: 40,
            lr: 0.5,
            samples_used: corpus.len() as u32,
            final_loss: 0.0,
        },
    };
    std::fs::write(&config.base_model_path, serialize_model(&artifact))
        .map_err(|e| runtime_err(format!("write base model: {e}")))?;
    Ok(base)
}

// ---------------------------------------------------------------------------
// device

fn cmd_provision(home: &Path, registry_path: &Path, seed: Option<u64>) -> Result<(), CmdError> {
    std::fs::create_dir_all(home).map_err(|e| runtime_err(format!("create home: {e}")))?;
    let mut rng = match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    };
    let device_id: [u8; 16] = rng.gen();
    let key: [u8; 32] = rng.gen();
    let salt: [u8; 4] = rng.gen();

    let state = DeviceState {
        device_id: hex::encode(device_id),
        key: hex::encode(key),
        nonce_salt: hex::encode(salt),
        nonce_counter: 0,
        epsilon_spent: 0.0,
    };
    save_state(home, &state)?;

    let mut registry = if registry_path.exists() {
        KeyRegistry::load(registry_path).map_err(|e| runtime_err(format!("registry: {e}")))?
    } else {
        KeyRegistry::new()
    };
    registry.register(DeviceKeyRecord {
        device_id,
        key,
        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    });
    registry
        .save(registry_path)
        .map_err(|e| runtime_err(format!("save registry: {e}")))?;
    println!("device_id\t{}", state.device_id);
    Ok(())
}

fn cmd_query(args: QueryArgs) -> Result<(), CmdError> {
    let state = load_state(&args.home)?;
    let (device_id, key, salt) = credentials(&state)?;
    let mut session = ClientSession::new(device_id, key, salt);
    session.nonce.set_counter(state.nonce_counter);
    session.local_epsilon_spent = state.epsilon_spent;
    session.local_data = read_data_rows(&args.data)?;
    let input_dim = session
        .local_data
        .first()
        .map(|r| r.len() as u32)
        .ok_or_else(|| usage_err("empty data file"))?;

    let model_spec = match args.arch {
        ArchArg::Logreg => ModelSpec::logreg(input_dim, args.classes),
        ArchArg::Mlp1 => ModelSpec::mlp1(input_dim, args.hidden, args.classes),
    };
    let mechanism: Mechanism = args
        .mechanism
        .parse()
        .map_err(|e: ptaas_core::privacy::PrivacyError| usage_err(e.to_string()))?;
    let config = QueryConfig {
        sketch_params: ptaas_core::corpus::SketchParams {
            minhash_k: args.minhash_k,
            simhash_b: args.simhash_b,
            ..Default::default()
        },
        use_minhash: args.minhash,
        dp: DpSection {
            mechanism,
            epsilon: args.epsilon,
            delta: args.delta,
            sensitivity: 1.0,
            placement: match args.placement {
                PlacementArg::PostHash => NoisePlacement::PostHash,
                PlacementArg::Projection => NoisePlacement::Projection,
            },
        },
        model_spec,
        label_hints: args.label_hints.clone(),
        k_retrieve: args.k,
        epochs: args.epochs,
        learning_rate: args.lr,
        seed: args.seed,
        noise_seed: args.noise_seed,
    };

    let mut transport = TcpTransport {
        addr: args
            .server
            .parse()
            .map_err(|e| usage_err(format!("bad server address: {e}")))?,
        max_frame: ptaas_core::protocol::DEFAULT_MAX_FRAME,
    };
    let result = device_execute(&mut session, &config, &mut transport);

    // Persist the nonce cursor and budget mirror whatever the outcome.
    let mut state = state;
    state.nonce_counter = session.nonce.counter();
    state.epsilon_spent = session.local_epsilon_spent;
    save_state(&args.home, &state)?;

    match result {
        Ok(outcome) => {
            let artifact = session.deployed.as_ref().expect("deployed after success");
            std::fs::write(args.home.join(MODEL_FILE), serialize_model(artifact))
                .map_err(|e| runtime_err(format!("write model: {e}")))?;
            println!("model_digest\t{}", outcome.model_digest);
            println!("train_loss\t{}", outcome.train_loss);
            println!("samples_used\t{}", outcome.samples_used);
            println!("epsilon_spent\t{}", outcome.epsilon_spent);
            Ok(())
        }
        Err(ProtocolError::Rejected(code, detail)) => {
            let label = match code {
                RejectCode::BudgetExhausted => "BUDGET_EXHAUSTED",
                RejectCode::VerifyFailed => "VERIFY_FAILED",
                RejectCode::Internal => "INTERNAL",
            };
            println!("rejected\t{label}\t{detail}");
            Err(runtime_err(format!("query rejected: {label}")))
        }
        Err(e) => Err(runtime_err(format!("query failed: {e}"))),
    }
}

fn cmd_show_model(home: &Path) -> Result<(), CmdError> {
    let artifact = load_model(home)?;
    let bytes = serialize_model(&artifact);
    println!("model_digest\t{}", hex::encode(digest(&bytes)));
    println!("arch\t{:?}", artifact.spec.arch);
    println!("input_dim\t{}", artifact.spec.input_dim);
    println!("num_classes\t{}", artifact.spec.num_classes);
    println!("epochs\t{}", artifact.train_meta.epochs);
    println!("samples_used\t{}", artifact.train_meta.samples_used);
    println!("final_loss\t{}", artifact.train_meta.final_loss);
    Ok(())
}

fn cmd_predict(home: &Path, input: &Path) -> Result<(), CmdError> {
    reset_net_ops();
    let artifact = load_model(home)?;
    let text =
        std::fs::read_to_string(input).map_err(|e| runtime_err(format!("read input: {e}")))?;
    let features = parse_row(text.trim())
        .map_err(|e| usage_err(format!("parse input row: {e}")))?;
    let probs = artifact
        .predict(&features)
        .map_err(|e| runtime_err(format!("predict: {e}")))?;
    let (label, _) = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .expect("non-empty class probabilities");
    println!("label\t{label}");
    println!(
        "probs\t{}",
        probs
            .iter()
            .map(|p| format!("{p:.6}"))
            .collect::<Vec<_>>()
            .join(",")
    );
    // Offline-inference guarantee: no transport activity during predict.
    assert_eq!(net_ops(), 0, "predict must not touch the network");
    println!("net_ops\t0");
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn cmd_eval(experiment: EvalCommand) -> Result<(), CmdError> {
    let (args, report) = match experiment {
        EvalCommand::PrivacyUtility(args) => {
            let (_, report) = eval::privacy_utility(args.seed, args.trials);
            (args, report)
        }
        EvalCommand::Reconstruction(args) => {
            let (_, report) = eval::reconstruction(args.seed, args.trials);
            (args, report)
        }
        EvalCommand::RetrievalAblation(args) => {
            let (_, report) = eval::retrieval_ablation(args.seed, args.trials);
            (args, report)
        }
    };
    std::fs::create_dir_all(&args.out).map_err(|e| runtime_err(format!("create out: {e}")))?;
    let path = report
        .write(&args.out)
        .map_err(|e| runtime_err(format!("write report: {e}")))?;
    println!("report\t{}", path.display());
    println!("summary\t{}", report.summary);
    Ok(())
}

// ---------------------------------------------------------------------------
// helpers

fn save_state(home: &Path, state: &DeviceState) -> Result<(), CmdError> {
    let text = toml::to_string_pretty(state).expect("serializable state");
    std::fs::write(home.join(STATE_FILE), text)
        .map_err(|e| runtime_err(format!("write device state: {e}")))
}

fn load_state(home: &Path) -> Result<DeviceState, CmdError> {
    let path = home.join(STATE_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|_| usage_err(format!("device not provisioned: {} missing", path.display())))?;
    toml::from_str(&text).map_err(|e| usage_err(format!("device state: {e}")))
}

#[allow(clippy::type_complexity)]
fn credentials(state: &DeviceState) -> Result<([u8; 16], [u8; 32], [u8; 4]), CmdError> {
    let parse = |s: &str, n: usize| -> Result<Vec<u8>, CmdError> {
        let bytes = hex::decode(s).map_err(|e| usage_err(format!("device state hex: {e}")))?;
        if bytes.len() != n {
            return Err(usage_err("device state field has wrong length"));
        }
        Ok(bytes)
    };
    let id = parse(&state.device_id, 16)?;
    let key = parse(&state.key, 32)?;
    let salt = parse(&state.nonce_salt, 4)?;
    Ok((
        id.try_into().unwrap(),
        key.try_into().unwrap(),
        salt.try_into().unwrap(),
    ))
}

fn load_model(home: &Path) -> Result<ModelArtifact, CmdError> {
    let path = home.join(MODEL_FILE);
    let bytes = std::fs::read(&path)
        .map_err(|_| runtime_err(format!("no deployed model at {}", path.display())))?;
    deserialize_model(&bytes).map_err(|e| runtime_err(format!("model artifact: {e}")))
}

/// Parses `label<TAB>v1,v2,...` rows, tolerating rows without a label.
fn read_data_rows(path: &Path) -> Result<Vec<Vec<f64>>, CmdError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage_err(format!("read data file: {e}")))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let values = line.rsplit('\t').next().unwrap();
        rows.push(
            parse_row(values).map_err(|e| usage_err(format!("data line {}: {e}", i + 1)))?,
        );
    }
    Ok(rows)
}

fn parse_row(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect()
}
