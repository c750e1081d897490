use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use tabula::lookup::TruncationMode;
use tabula::model::{load_architecture, load_dataset, load_model, quant_sweep, sweep_csv, SchemaError};
use tabula::runtime::{
    bench, claim_bundle, connect_with_retry, run_client, run_dealer, run_server, trial_dir, trial_seed, write_bundles,
    RuntimeError, SessionOptions, TransportKind,
};
use tabula::transport::Channel;

#[derive(Parser)]
#[command(name = "tabula", version, about = "Two-party inference with masked lookup-table activations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate client and server preprocessing bundles.
    Dealer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Deterministic output; omit for fresh OS randomness.
        #[arg(long)]
        seed: Option<u64>,
        /// Write this many bundle pairs into trial-NNNN subdirectories.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Serve one inference.
    Server {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        listen: String,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Test only: deterministic truncation through an extra round.
        #[arg(long, hide = true)]
        exact_truncation: bool,
    },
    /// Run one inference against a server and print the logits.
    Client {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        /// JSON array of input values.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        connect: String,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, hide = true)]
        exact_truncation: bool,
    },
    /// Run repeated inferences in-process and print a JSON report.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value = "loopback")]
        transport: TransportKind,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy and table storage across activation precisions, as CSV.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 1)]
        k_min: u32,
        #[arg(long, default_value_t = 16)]
        k_max: u32,
    },
}

fn options(exact: bool) -> SessionOptions {
    SessionOptions { truncation: if exact { TruncationMode::ExactForTesting } else { TruncationMode::Probabilistic } }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), RuntimeError> {
    fs::write(path, serde_json::to_string_pretty(value).expect("serializable") + "\n")?;
    Ok(())
}

fn read_input(path: &Path) -> Result<Vec<f32>, RuntimeError> {
    let text =
        fs::read_to_string(path).map_err(|source| SchemaError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|e| SchemaError::Top { field: "input".into(), message: e.to_string() }.into())
}

fn run(cli: Cli) -> Result<(), RuntimeError> {
    match cli.command {
        Command::Dealer { model, out, seed, trials } => {
            let compiled = load_model(&model)?.compile()?;
            let dirs: Vec<(PathBuf, Option<u64>)> = match trials {
                None => vec![(out, seed)],
                Some(t) => (0..t).map(|i| (trial_dir(&out, i), seed.map(|s| trial_seed(s, i)))).collect(),
            };
            for (dir, seed) in dirs {
                let pair = run_dealer(&compiled, seed);
                let (c, s) = write_bundles(&compiled, &pair, &dir)?;
                println!("{}\n{}", c.display(), s.display());
            }
        }
        Command::Server { model, bundle, listen, report, exact_truncation } => {
            let compiled = load_model(&model)?.compile()?;
            let mut bundle = claim_bundle(&bundle, compiled.field())?;
            bundle.check_against(&compiled, tabula::sharing::PartyRole::Server)?;
            let listener = TcpListener::bind(&listen)?;
            eprintln!("listening on {}", listener.local_addr()?);
            let (stream, peer) = listener.accept()?;
            eprintln!("client {peer}");
            let mut channel = Channel::tcp(stream)?;
            let r = run_server(&compiled, &mut bundle, &mut channel, options(exact_truncation))?;
            match report {
                Some(p) => write_json(&p, &r)?,
                None => println!("{}", serde_json::to_string_pretty(&r).expect("serializable")),
            }
        }
        Command::Client { model, bundle, input, connect, report, exact_truncation } => {
            let compiled = load_architecture(&model)?.compile()?;
            let x = read_input(&input)?;
            let mut bundle = claim_bundle(&bundle, compiled.field())?;
            bundle.check_against(&compiled, tabula::sharing::PartyRole::Client)?;
            let mut channel = connect_with_retry(connect.as_str(), Duration::from_secs(10))
                .map_err(|e| RuntimeError::Protocol(tabula::transport::TransportError::Io(e).into()))?;
            let r = run_client(&compiled, &mut bundle, &x, &mut channel, options(exact_truncation))?;
            println!("logits: {}", serde_json::to_string(&r.decoded).expect("serializable"));
            println!("argmax: {}", r.argmax);
            if let Some(p) = report {
                write_json(&p, &r.report)?;
            }
        }
        Command::Bench { model, trials, transport, seed } => {
            let compiled = load_model(&model)?.compile()?;
            let r = bench(&compiled, trials.max(1), transport, seed)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("serializable"));
        }
        Command::Sweep { model, dataset, k_min, k_max } => {
            let m = load_model(&model)?;
            let d = load_dataset(&dataset)?;
            let ks: Vec<u32> = (k_min..=k_max).collect();
            print!("{}", sweep_csv(&quant_sweep(&m, &d, &ks)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
