//! `clusterdiff`: clustering, bound search, conditional diffusion training,
//! sampling and evaluation driven by one TOML config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use clusterdiff::dataset::FileFormat;
use clusterdiff::pipeline::{
    cmd_bound, cmd_cluster, cmd_eval, cmd_gen_data, cmd_reproduce, cmd_sample, cmd_train, DataSource,
    ExperimentConfig, ReportFormat, Stage, Trend,
};
use clusterdiff::Error;

#[derive(Parser, Debug)]
#[command(name = "clusterdiff", version, about)]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report layout; for gen-data, `csv` writes CSV and `json` the binary format.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Seed of the initial sampling noise, shared across models.
    #[arg(long, global = true)]
    noise_seed: Option<u64>,
    /// The CSV dataset has a trailing integer label column.
    #[arg(long, global = true)]
    labels_col: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cluster the dataset and write assignments with a metric report.
    Cluster,
    /// Search the upper bound on the useful number of clusters.
    Bound,
    /// Train the (conditional) diffusion model with milestone checkpoints.
    Train,
    /// Generate sample sets from a checkpoint.
    Sample,
    /// Score sample files against the reference data.
    Eval,
    /// Run desk-scale trend protocols and write CSV plus verdicts.
    Reproduce {
        /// sample_efficiency, bound_sweep, ood_sweep or sampling_distribution.
        #[arg(required = true)]
        trends: Vec<String>,
    },
    /// Write the configured synthetic dataset.
    GenData,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.noise_seed {
        cfg.sampling.noise_seed = Some(seed);
    }
    if cli.labels_col {
        match &mut cfg.data {
            DataSource::File { labels_col, .. } => *labels_col = true,
            DataSource::Synthetic(_) => {
                return Err(Error::Config("--labels-col applies to file datasets only".into()));
            }
        }
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    cfg.validate_for(match &cli.command {
        Command::Cluster => Stage::Cluster,
        Command::Bound => Stage::Bound,
        Command::Train => Stage::Train,
        Command::Sample => Stage::Sample,
        Command::Eval => Stage::Eval,
        Command::Reproduce { .. } => Stage::Reproduce,
        Command::GenData => Stage::GenData,
    })?;
    let format = match cli.format {
        Some(Format::Csv) => ReportFormat::Csv,
        Some(Format::Json) | None => ReportFormat::Json,
    };
    match &cli.command {
        Command::Cluster => {
            for r in cmd_cluster(&cfg, format)? {
                println!("C={} utilized={} file={}", r.c, r.utilized, r.assignment_file);
            }
        }
        Command::Bound => {
            let report = cmd_bound(&cfg)?;
            println!("C_max={} probes={}", report.c_max, report.probes.len());
        }
        Command::Train => {
            let s = cmd_train(&cfg)?;
            println!("trained {} samples, model {}", s.samples_seen, s.model.display());
        }
        Command::Sample => {
            for m in cmd_sample(&cfg)? {
                println!("set {} n={} C={}", m.set, m.n, m.c);
            }
        }
        Command::Eval => {
            let rows = cmd_eval(&cfg, format)?;
            println!("evaluated {} rows", rows.len());
        }
        Command::Reproduce { trends } => {
            let trends = trends.iter().map(|t| t.parse()).collect::<Result<Vec<Trend>, _>>()?;
            for result in cmd_reproduce(&cfg, &trends)? {
                for v in &result.verdicts {
                    let mark = if v.passed { "PASS" } else { "FAIL" };
                    println!("{mark} {}: {} ({})", result.trend.name(), v.claim, v.detail);
                }
            }
        }
        Command::GenData => {
            let ff = match cli.format {
                Some(Format::Csv) => FileFormat::Csv,
                _ => FileFormat::Binary,
            };
            println!("{}", cmd_gen_data(&cfg, ff)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
