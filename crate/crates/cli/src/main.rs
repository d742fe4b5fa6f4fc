use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use mita::baselines::MethodKind;
use mita::diffnet::{load_checkpoint, save_checkpoint};
use mita::eval::{load_dir, report};
use mita::experiment::{build_source, clean_accuracy, generate_data, run_sweep, ConfigError, ExperimentConfig, ExperimentError};
use mita::scenarios::gen_source;

#[derive(Parser)]
#[command(name = "mita", version, about = "Mutual test-time adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only these seeds (overrides `seeds`).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the clean source sets and every scenario stream.
    GenData(Common),
    /// Train the source classifier and save a checkpoint.
    TrainSource(Common),
    /// Run the (scenario x method x seed) sweep and write records and reports.
    Run {
        #[command(flatten)]
        common: Common,
        /// Run only these methods (overrides `methods`).
        #[arg(long = "method")]
        methods: Vec<String>,
        /// Source checkpoint; trained from the config when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Carry the adapted net across batches.
        #[arg(long)]
        online: bool,
        /// Dump every negative-sample chain as CSV.
        #[arg(long)]
        trace: bool,
    },
    /// Rebuild the report tables from the records under `<out>/records`.
    Report(Common),
}

enum Failure {
    Config(String),
    Divergence(String),
    Other(anyhow::Error),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_divergence() {
            return Failure::Divergence(e.to_string());
        }
        match e {
            ExperimentError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Other(other.into()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if !common.seeds.is_empty() {
        cfg.seeds = common.seeds.clone();
    }
    Ok(cfg)
}

fn write_report(out_dir: &Path) -> anyhow::Result<String> {
    let records = load_dir(&out_dir.join("records")).context("reading records")?;
    let r = report(&records);
    fs::write(out_dir.join("report.txt"), &r.text)?;
    fs::write(out_dir.join("summary.csv"), &r.summary_csv)?;
    fs::write(out_dir.join("corruption.csv"), &r.corruption_csv)?;
    let mut timing = String::from("run_id,wall_time_s\n");
    let mut sorted: Vec<_> = records.iter().collect();
    sorted.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    for rec in sorted {
        timing.push_str(&format!("{},{:.3}\n", rec.run_id, rec.wall_time_s));
    }
    fs::write(out_dir.join("timing.csv"), timing)?;
    Ok(r.text)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Command::GenData(common) => {
            let cfg = load_config(&common)?;
            let paths = generate_data(&cfg, &cfg.out_dir)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::TrainSource(common) => {
            let cfg = load_config(&common)?;
            let world = build_source(&cfg)?;
            fs::create_dir_all(&cfg.out_dir).context("creating output directory")?;
            let ckpt = cfg.out_dir.join("source.ckpt");
            save_checkpoint(&world.trained.net, &ckpt).context("writing checkpoint")?;
            let acc = clean_accuracy(&world.trained.net, &world.test)?;
            println!("checkpoint: {}", ckpt.display());
            match acc {
                Some(a) => println!("clean test accuracy: {a:.2}%"),
                None => println!("clean test accuracy: n/a (empty test set)"),
            }
        }
        Command::Run {
            common,
            methods,
            checkpoint,
            online,
            trace,
        } => {
            let mut cfg = load_config(&common)?;
            if !methods.is_empty() {
                cfg.methods = methods
                    .iter()
                    .map(|m| MethodKind::parse(m).map_err(|e| Failure::Config(e.to_string())))
                    .collect::<Result<_, _>>()?;
            }
            cfg.online |= online;
            cfg.trace |= trace;
            cfg.validate_for_run()?;
            let (net, test) = match &checkpoint {
                Some(path) => {
                    let net = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
                    if net.spec() != &cfg.net {
                        return Err(Failure::Config(format!(
                            "checkpoint {} does not match the `net` section of the config",
                            path.display()
                        )));
                    }
                    let (_, test) = gen_source(&cfg.source).map_err(ExperimentError::from)?;
                    (net, test)
                }
                None => {
                    let world = build_source(&cfg)?;
                    (world.trained.net, world.test)
                }
            };
            fs::create_dir_all(&cfg.out_dir).context("creating output directory")?;
            fs::write(cfg.out_dir.join("config.json"), cfg.to_json()).context("writing config")?;
            let records = run_sweep(&cfg, &net, &test, Some(&cfg.out_dir))?;
            eprintln!("{} runs written to {}", records.len(), cfg.out_dir.join("records").display());
            print!("{}", write_report(&cfg.out_dir)?);
        }
        Command::Report(common) => {
            let cfg = load_config(&common)?;
            print!("{}", write_report(&cfg.out_dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Divergence(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
