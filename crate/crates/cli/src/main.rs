//! `fedsem` command-line interface.
//!
//! Exit codes: 0 success, 1 check failure or protocol error, 2 configuration
//! or usage error, 3 infeasible selection problem, 4 I/O or format error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsem::harness::{gradcheck_suite, parse_strategy, prepare_seed, run_experiment, write_outputs, ExperimentConfig};
use fedsem::selection::{brute_force_allocation, solve_allocation, SelectionProblem};
use fedsem::semcom::SemComModel;
use fedsem::Error;

#[derive(Parser)]
#[command(name = "fedsem", version, about = "Federated semantic-communication simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every strategy/seed pair of an experiment and write CSV + summary.
    Run {
        /// Config file of `key = value` lines.
        config: PathBuf,
        /// Strategy to run (repeatable): baseline, utilitarian or prop_fair.
        #[arg(long = "strategy")]
        strategies: Vec<String>,
        /// Seed to run (repeatable); FEDSEM_SEED takes precedence over the config file.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train clients and runs one at a time.
        #[arg(long)]
        sequential: bool,
    },
    /// Show the client partition produced for a seed.
    Partition {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Solve one epoch-allocation instance read from a `key = value` file
    /// (utilities, participation, e_total, e_max, lambda).
    Solve {
        instance: PathBuf,
        /// Also solve by exhaustive enumeration and compare.
        #[arg(long)]
        check: bool,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::LayerShape { .. } => 2,
        Error::Infeasible { .. } => 3,
        Error::Io(_) | Error::Format { .. } => 4,
        Error::Protocol(_) => 1,
    }
}

fn load_config(path: &PathBuf) -> fedsem::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> fedsem::Result<u8> {
    match cli.command {
        Command::Run {
            config,
            strategies,
            seeds,
            out,
            sequential,
        } => {
            let mut cfg = load_config(&config)?;
            if !strategies.is_empty() {
                cfg.strategies = strategies
                    .iter()
                    .map(|s| parse_strategy("--strategy", s, cfg.lambda))
                    .collect::<fedsem::Result<_>>()?;
            }
            if !seeds.is_empty() && std::env::var_os(fedsem::harness::SEED_ENV).is_none() {
                cfg.seeds = seeds;
            }
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            if sequential {
                cfg.parallel = false;
            }
            let experiment = run_experiment(&cfg, &cfg.strategies, &cfg.seeds)?;
            let files = write_outputs(&cfg.output_dir, &experiment, cfg.checkpoints)?;
            print!("{}", std::fs::read_to_string(&files.summary)?);
            println!("wrote {}", files.csv.display());
            Ok(0)
        }
        Command::Partition { config, seed } => {
            let cfg = load_config(&config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let model = SemComModel::new(cfg.semcom.clone())?;
            let setup = prepare_seed(&cfg, &model, seed)?;
            println!(
                "seed {seed}: {} images, {} train, {} validation, alpha_dir {}",
                setup.corpus.len(),
                setup.train.len(),
                setup.validation.len(),
                cfg.alpha_dir
            );
            let labels = setup.corpus.labels().unwrap_or_default();
            let classes = labels.iter().max().map_or(0, |m| m + 1);
            for (k, idx) in setup.partition.clients.iter().enumerate() {
                let mut hist = vec![0usize; classes];
                idx.iter().for_each(|&i| hist[labels[i]] += 1);
                let hist: Vec<String> = hist.iter().map(usize::to_string).collect();
                println!("client {k}: {} images, per class [{}]", idx.len(), hist.join(", "));
            }
            Ok(0)
        }
        Command::Gradcheck => {
            let mut ok = true;
            for case in gradcheck_suite()? {
                let r = &case.report;
                println!(
                    "{:<18} {} max_rel_error {:.3e} checked {} skipped_kinks {}",
                    case.name,
                    if r.passed() { "pass" } else { "FAIL" },
                    r.max_rel_error,
                    r.checked,
                    r.skipped_kinks
                );
                ok &= r.passed();
            }
            Ok(if ok { 0 } else { 1 })
        }
        Command::Solve { instance, check } => {
            let prob = parse_instance(&std::fs::read_to_string(&instance)?)?;
            let plan = solve_allocation(&prob)?;
            let fmt = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
            println!("epochs    {}", fmt(&plan.epochs));
            println!("selected  {}", fmt(&plan.selected_clients()));
            println!("objective {}", plan.objective);
            if check {
                let oracle = brute_force_allocation(&prob)?;
                let agree = oracle.epochs == plan.epochs && oracle.objective == plan.objective;
                println!("oracle    {} ({})", fmt(&oracle.epochs), if agree { "agrees" } else { "DISAGREES" });
                if !agree {
                    return Ok(1);
                }
            }
            Ok(0)
        }
    }
}

fn parse_instance(text: &str) -> fedsem::Result<SelectionProblem> {
    let mut utilities = None;
    let mut participation = None;
    let (mut e_total, mut e_max, mut lambda) = (None, None, 0.0);
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected `key = value`, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = || Error::Config(format!("{key}: cannot parse {value:?}"));
        let list = |v: &str| -> Option<Vec<String>> { Some(v.split(',').map(|s| s.trim().to_string()).collect()) };
        match key {
            "utilities" => {
                utilities = Some(
                    list(value)
                        .unwrap()
                        .iter()
                        .map(|s| s.parse::<f64>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| bad())?,
                )
            }
            "participation" => {
                participation = Some(
                    list(value)
                        .unwrap()
                        .iter()
                        .map(|s| s.parse::<u64>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| bad())?,
                )
            }
            "e_total" => e_total = Some(value.parse().map_err(|_| bad())?),
            "e_max" => e_max = Some(value.parse().map_err(|_| bad())?),
            "lambda" => lambda = value.parse().map_err(|_| bad())?,
            other => return Err(Error::Config(format!("{other}: unknown key"))),
        }
    }
    let utilities: Vec<f64> = utilities.ok_or_else(|| Error::Config("utilities: missing".into()))?;
    let participation = participation.unwrap_or_else(|| vec![0; utilities.len()]);
    let e_total = e_total.ok_or_else(|| Error::Config("e_total: missing".into()))?;
    Ok(SelectionProblem {
        participation,
        e_total,
        e_max: e_max.unwrap_or(e_total),
        lambda,
        utilities,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
