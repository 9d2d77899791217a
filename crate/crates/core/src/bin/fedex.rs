//! Command-line front end: train a victim, serve it, attack it, evaluate
//! surrogates and run the full grid.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error
//! (unknown flag, missing or unreadable config).

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use fedex::extraction::{run_attack, Branch};
use fedex::federated::write_round_records;
use fedex::harness::{
    cell_attack_config, pretrained_surrogate, run_cell, run_experiment, summarize, summary_csv,
    train_victim, write_outputs, Cell, ExperimentConfig, Workload,
};
use fedex::metrics::evaluate;
use fedex::model::ModelInstance;
use fedex::oracle::wire::{OracleServer, RemoteOracle};
use fedex::oracle::{PredictionApi, PredictionOracle, ResponseMode};
use fedex::Error;

#[derive(Parser)]
#[command(
    name = "fedex",
    version,
    about = "Federated victim training and model-extraction experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (flat key = value file).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `master_seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: config `out`, then $FEDEX_OUT_DIR, then ./fedex-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one victim (federated, or centralised with --clients 0) and save FXL1 weights.
    TrainVictim {
        #[command(flatten)]
        common: Common,
        /// Client count; defaults to the first entry of `clients`.
        #[arg(long)]
        clients: Option<usize>,
    },
    /// Serve a victim over NDJSON/TCP with a query budget until killed.
    Serve {
        /// Victim weights (FXL1).
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// 0 picks a free port; the bound address is printed on stdout.
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long, default_value = "probability_vector")]
        mode: ResponseMode,
    },
    /// Run one extraction attack against a weights file or a remote oracle.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Victim weights served in-process.
        #[arg(long, conflicts_with = "remote", required_unless_present = "remote")]
        weights: Option<PathBuf>,
        /// Address of a running `fedex serve`.
        #[arg(long)]
        remote: Option<SocketAddr>,
        /// Victim weights used only for evaluation (remote attacks).
        #[arg(long)]
        victim: Option<PathBuf>,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value = "scratch")]
        branch: Branch,
        /// Attack repeat seed; defaults to the first entry of `seeds`.
        #[arg(long)]
        attack_seed: Option<u64>,
        /// Arm whose cell seeds to use; defaults to the first entry of `clients`.
        #[arg(long)]
        clients: Option<usize>,
        /// Pretrained surrogate (FXL1) for the pretrained branch; otherwise
        /// the auxiliary-split model is trained.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Metrics between two weight files on the config's test set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        victim: PathBuf,
        #[arg(long)]
        extracted: PathBuf,
    },
    /// Run the full grid and write CSV/JSON reports.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load_config(common: &Common) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg =
        ExperimentConfig::load(&common.config).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(s) = common.seed {
        cfg.master_seed = s;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn read_model(path: &Path) -> fedex::Result<ModelInstance> {
    ModelInstance::load_any(&std::fs::read(path)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> fedex::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::from)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn out_dir(cfg: &ExperimentConfig) -> fedex::Result<PathBuf> {
    let dir = cfg.resolved_out_dir();
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn train_victim_cmd(common: Common, clients: Option<usize>) -> Outcome {
    let cfg = load_config(&common)?;
    let clients = clients.or(cfg.client_counts.first().copied()).unwrap_or(0);
    let work = Workload::prepare(&cfg)?;
    let victim = train_victim(&cfg, &work, clients)?;
    let dir = out_dir(&cfg)?;
    std::fs::write(dir.join("victim.fxl"), victim.model.save_parameters())?;
    if !victim.rounds.is_empty() {
        let file = std::fs::File::create(dir.join("rounds.jsonl"))?;
        write_round_records(&victim.rounds, std::io::BufWriter::new(file))?;
    }
    let accuracy = fedex::metrics::accuracy(&victim.model, &work.bundle.test)?;
    let summary = serde_json::json!({
        "clients": clients,
        "spec": victim.model.spec().to_string(),
        "fingerprint": victim.model.fingerprint(),
        "provenance": format!("{:?}", victim.model.provenance()),
        "test_accuracy": accuracy,
        "rounds": victim.rounds.len(),
    });
    write_json(&dir.join("victim.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn serve_cmd(
    weights: PathBuf,
    budget: usize,
    host: String,
    port: u16,
    mode: ResponseMode,
) -> Outcome {
    let victim = read_model(&weights)?;
    let oracle = Arc::new(PredictionOracle::new(victim, budget, mode));
    let server = OracleServer::bind((host.as_str(), port), oracle)?;
    println!("listening on {}", server.local_addr()?);
    use std::io::Write;
    std::io::stdout().flush().ok();
    server.run()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn attack_cmd(
    common: Common,
    weights: Option<PathBuf>,
    remote: Option<SocketAddr>,
    victim_path: Option<PathBuf>,
    budget: usize,
    branch: Branch,
    attack_seed: Option<u64>,
    clients: Option<usize>,
    pretrained_path: Option<PathBuf>,
) -> Outcome {
    let cfg = load_config(&common)?;
    let work = Workload::prepare(&cfg)?;
    let cell = Cell {
        clients: clients.or(cfg.client_counts.first().copied()).unwrap_or(0),
        budget,
        branch,
        seed: attack_seed.unwrap_or(cfg.seeds[0]),
    };
    let pretrained = match (branch, pretrained_path) {
        (Branch::Pretrained, Some(p)) => Some(read_model(&p)?),
        (Branch::Pretrained, None) => Some(pretrained_surrogate(&cfg, &work, cell.seed)?),
        (Branch::Scratch, _) => None,
    };

    let victim_for_eval = match (&weights, &victim_path) {
        (_, Some(p)) => Some(read_model(p)?),
        (Some(w), None) => Some(read_model(w)?),
        (None, None) => None,
    };
    let oracle: Box<dyn PredictionApi> = match (weights, remote) {
        (Some(w), _) => Box::new(PredictionOracle::new(
            read_model(&w)?,
            budget,
            cfg.oracle_mode,
        )),
        (None, Some(addr)) => Box::new(RemoteOracle::connect(
            addr,
            &work.spec.input_shape,
            work.spec.class_count,
            cfg.oracle_mode,
        )?),
        (None, None) => return Err(Failure::Usage("attack needs --weights or --remote".into())),
    };

    let dir = out_dir(&cfg)?;
    let (surrogate, extracted, report) = match &victim_for_eval {
        Some(v) => {
            let (s, e, r) = run_cell(&cfg, &work, v, oracle.as_ref(), cell, pretrained.as_ref())?;
            (s, e, Some(r))
        }
        None => {
            let attack = cell_attack_config(&cfg, &work, cell, pretrained.as_ref())?;
            let (s, e) = run_attack(
                oracle.as_ref(),
                &work.bundle.query_pool.unlabeled(),
                &attack,
            )?;
            (s, e, None)
        }
    };
    std::fs::write(dir.join("surrogate.fxl"), surrogate.save_parameters())?;
    std::fs::write(dir.join("extracted.fxd"), extracted.to_fxd())?;
    match report {
        Some(report) => {
            write_json(&dir.join("metrics.json"), &report)?;
            println!(
                "{}",
                serde_json::to_string(&report).map_err(std::io::Error::from)?
            );
        }
        None => println!(
            "{}",
            serde_json::json!({ "queries": extracted.len(), "surrogate": surrogate.fingerprint() })
        ),
    }
    Ok(())
}

fn evaluate_cmd(common: Common, victim: PathBuf, extracted: PathBuf) -> Outcome {
    let out_given = common.out.is_some();
    let cfg = load_config(&common)?;
    let work = Workload::prepare(&cfg)?;
    let report = evaluate(
        &read_model(&victim)?,
        &read_model(&extracted)?,
        &work.bundle.test,
    )?;
    if out_given {
        write_json(&out_dir(&cfg)?.join("metrics.json"), &report)?;
    }
    println!(
        "{}",
        serde_json::to_string(&report).map_err(std::io::Error::from)?
    );
    Ok(())
}

fn sweep_cmd(common: Common) -> Outcome {
    let cfg = load_config(&common)?;
    let report = run_experiment(&cfg)?;
    let dir = out_dir(&cfg)?;
    let paths = write_outputs(&cfg, &report, &dir)?;
    print!("{}", summary_csv(&summarize(&report)));
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    for p in paths {
        eprintln!("wrote {}", p.display());
    }
    if failed > 0 {
        eprintln!(
            "{failed} of {} cells failed; see results.json",
            report.rows.len()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::TrainVictim { common, clients } => train_victim_cmd(common, clients),
        Command::Serve {
            weights,
            budget,
            host,
            port,
            mode,
        } => serve_cmd(weights, budget, host, port, mode),
        Command::Attack {
            common,
            weights,
            remote,
            victim,
            budget,
            branch,
            attack_seed,
            clients,
            pretrained,
        } => attack_cmd(
            common,
            weights,
            remote,
            victim,
            budget,
            branch,
            attack_seed,
            clients,
            pretrained,
        ),
        Command::Evaluate {
            common,
            victim,
            extracted,
        } => evaluate_cmd(common, victim, extracted),
        Command::Sweep { common } => sweep_cmd(common),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
