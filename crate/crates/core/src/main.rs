use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dsekp::adversary::{self, AttackError, AttackKind, AttackScenario};
use dsekp::metrics::{self, Comparison, MetricsError, RunSummary, ServerLogRecord, Variant};
use dsekp::sim::{self, ConfigError, RunProfile, SimError};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

#[derive(Parser)]
#[command(name = "dsekp", version, about = "Session-keyed sensor telemetry simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate devices talking to the edge and write logs to --out.
    Run(RunArgs),
    /// Compare two runs (server log files or run directories).
    Compare(CompareArgs),
    /// Run an attack scenario against a simulated deployment.
    Attack(AttackArgs),
}

#[derive(Args, Default)]
struct RunArgs {
    /// key=value profile file; flags override its entries.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long, value_parser = ["psk", "dsekp"])]
    mode: Option<String>,
    /// Readings per device.
    #[arg(long)]
    packets: Option<u64>,
    #[arg(long)]
    interval_ms: Option<u64>,
    #[arg(long)]
    devices: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// psk, dsekp or lossless latency moments (default follows --mode).
    #[arg(long, value_parser = ["psk", "dsekp", "lossless"])]
    network_preset: Option<String>,
    #[arg(long)]
    latency_base_ms: Option<f64>,
    #[arg(long)]
    latency_jitter_ms: Option<f64>,
    #[arg(long)]
    loss: Option<f64>,
    #[arg(long)]
    dup: Option<f64>,
    /// Start a new session after this many packets (0 disables).
    #[arg(long)]
    reboot_every: Option<u64>,
    /// Rotate sessions after this many seconds (0 disables).
    #[arg(long)]
    session_timeout_s: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Reference run.
    a: PathBuf,
    /// Run compared against the reference.
    b: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Args)]
struct AttackArgs {
    /// replay_data, replay_init, tamper_bitflip, forge_init or cross_session_splice.
    #[arg(long)]
    kind: AttackKind,
    #[arg(long, default_value_t = 100)]
    count: u64,
    #[arg(long, default_value_t = 1)]
    attack_seed: u64,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Invariant(String),
    Other(String),
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => CliError::Config(e.to_string()),
            SimError::Invariant(_) => CliError::Invariant(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::SchemaMismatch(_) => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Sim(s) => s.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn build_profile(args: &RunArgs) -> Result<RunProfile, CliError> {
    let mut profile = RunProfile::new(Variant::Dsekp, 0);
    if let Some(path) = &args.profile {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        profile.apply_file(&text)?;
    }
    let mut pairs = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_owned(), v));
        }
    };
    push("mode", args.mode.clone());
    push("packets", args.packets.map(|v| v.to_string()));
    push("interval-ms", args.interval_ms.map(|v| v.to_string()));
    push("devices", args.devices.map(|v| v.to_string()));
    push("seed", args.seed.map(|v| v.to_string()));
    push("network-preset", args.network_preset.clone());
    push("latency-base-ms", args.latency_base_ms.map(|v| v.to_string()));
    push("latency-jitter-ms", args.latency_jitter_ms.map(|v| v.to_string()));
    push("loss", args.loss.map(|v| v.to_string()));
    push("dup", args.dup.map(|v| v.to_string()));
    push("reboot-every", args.reboot_every.map(|v| v.to_string()));
    push("session-timeout-s", args.session_timeout_s.map(|v| v.to_string()));
    push("out", args.out.as_ref().map(|p| p.display().to_string()));
    profile.apply_pairs(pairs)?;
    profile.validate()?;
    Ok(profile)
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let profile = build_profile(args)?;
    let out_dir = profile.out_dir.clone();
    let output = sim::run(profile)?;
    output.write_artifacts(&out_dir)?;
    let s = &output.stats;
    println!(
        "{} packets sent, {} logged by the edge, {} sessions; artifacts in {}",
        s.sent,
        output.server_logs.len(),
        s.sessions_established,
        out_dir.display()
    );
    Ok(())
}

/// A server log plus, for run directories, the number of packets sent.
fn load_run(path: &Path) -> Result<(Variant, Vec<ServerLogRecord>, Option<u64>), CliError> {
    let open = |p: &Path| File::open(p).map_err(|e| CliError::Other(format!("{}: {e}", p.display())));
    if path.is_dir() {
        let (variant, server) = metrics::read_server_csv(open(&path.join("server_logs.csv"))?)?;
        let client = path.join("client_logs.csv");
        let sent = if client.exists() {
            Some(metrics::read_client_csv(open(&client)?)?.1.len() as u64)
        } else {
            None
        };
        Ok((variant, server, sent))
    } else {
        let (variant, server) = metrics::read_server_csv(open(path)?)?;
        Ok((variant, server, None))
    }
}

fn cmd_compare(args: &CompareArgs) -> Result<(), CliError> {
    let (va, ra, sa) = load_run(&args.a)?;
    let (vb, rb, sb) = load_run(&args.b)?;
    let lat = |r: &[ServerLogRecord]| r.iter().map(|x| x.latency_ms).collect::<Vec<_>>();
    let cmp = Comparison::new(
        RunSummary::from_records(va, &ra, sa)?,
        RunSummary::from_records(vb, &rb, sb)?,
        &lat(&ra),
        &lat(&rb),
    )?;
    match args.format {
        Format::Table => print!("{}", cmp.render_table()),
        Format::Json => println!("{}", serde_json::to_string_pretty(&cmp).expect("plain data")),
    }
    Ok(())
}

fn cmd_attack(args: &AttackArgs) -> Result<(), CliError> {
    let profile = build_profile(&args.run)?;
    let scenario = AttackScenario {
        kind: args.kind,
        count: args.count,
        seed: args.attack_seed,
    };
    let report = adversary::run_attack(profile, &scenario)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("plain data"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Attack(a) => cmd_attack(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(CliError::Invariant(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_INVARIANT)
        }
        Err(CliError::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
