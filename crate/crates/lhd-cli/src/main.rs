//! `lhd`: deterministic command-line front end for the search-space engine.
//!
//! Exit codes: 0 on success, 1 on domain errors (invalid genotypes,
//! unsatisfiable policies, malformed input files), 2 on usage errors.

mod commands;
mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use lhd::space::{PolicyId, SpaceFamily};
use lhd::toysearch::Method;

fn parse_space(s: &str) -> Result<SpaceFamily, String> {
    match s {
        "dss" => Ok(SpaceFamily::Dss),
        "lhd" => Ok(SpaceFamily::Lhd),
        other => Err(format!("unknown space '{other}' (expected dss or lhd)")),
    }
}

fn parse_policy(s: &str) -> Result<PolicyId, String> {
    s.parse().map_err(|e: lhd::LhdError| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: lhd::LhdError| e.to_string())
}

#[derive(Parser)]
#[command(
    name = "lhd",
    version,
    about = "Search-space statistics, sampling, toy search trials, ranking analytics, and scheduling"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print exact continuous and discretized space sizes as JSON
    SpaceStats {
        #[arg(long, value_parser = parse_space)]
        space: SpaceFamily,
        #[arg(long, value_parser = parse_policy)]
        policy: PolicyId,
        /// Where to write the run manifest (stdout digest included)
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Sample valid pruned genotypes into JSON files
    Sample {
        #[arg(long, value_parser = parse_policy)]
        policy: PolicyId,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Worker threads for independent samples
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run toy search trials, append a results CSV, and write genotypes
    Search {
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long, value_parser = parse_policy)]
        policy: PolicyId,
        /// Task to search on (the toy planted-signal task is the only one)
        #[arg(long, default_value = "toy", value_parser = ["toy"])]
        task: String,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        /// Stream seed: trial seeds are drawn from it uniformly in [1, 100000]
        #[arg(long)]
        seed_stream: u64,
        /// Results CSV to create or append to
        #[arg(long)]
        results: PathBuf,
        /// Directory for searched genotype JSON files and the manifest
        #[arg(long)]
        out_dir: PathBuf,
        /// Worker threads for independent trials
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Ranking, margin, and cross-condition correlation report from a results CSV
    Rank {
        #[arg(long)]
        input: PathBuf,
        /// Trial count per method assumed by the t statistics
        #[arg(long, default_value_t = 5)]
        n_per_method: usize,
        /// Write the JSON report here instead of stdout
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Empirical distribution function of val_acc over a results CSV
    Edf {
        #[arg(long)]
        input: PathBuf,
        /// Restrict to one condition, e.g. toy/base
        #[arg(long)]
        condition: Option<String>,
        /// Restrict to one method
        #[arg(long)]
        method: Option<String>,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Successive halving over a sampled candidate pool with a partial-training surrogate
    Asha {
        #[arg(long, value_parser = parse_policy)]
        policy: PolicyId,
        #[arg(long)]
        budget_epochs: u64,
        #[arg(long)]
        seed: u64,
        /// Size of the sampled candidate pool
        #[arg(long, default_value_t = 256)]
        candidates: usize,
        /// Promotion rate: top 1/eta of each rung advances
        #[arg(long, default_value_t = 4)]
        eta: u64,
        #[arg(long, default_value_t = 1)]
        min_epochs: u64,
        #[arg(long, default_value_t = 100)]
        max_epochs: u64,
        /// Surrogate noise at zero resource, fading to none at max-epochs
        #[arg(long, default_value_t = 0.05)]
        noise_scale: f64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Price a genotype JSON file in parameters, MACs, and depth
    Capacity {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long, default_value_t = 20)]
        cells: usize,
        #[arg(long, default_value_t = 36)]
        init_channels: usize,
        /// Rescale to the smallest width reaching 1.5M parameters at 25 cells
        #[arg(long)]
        rescale_1m: bool,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> lhd::Result<()> {
    match cli.command {
        Cmd::SpaceStats {
            space,
            policy,
            manifest,
        } => commands::space_stats(space, policy, manifest.as_deref()),
        Cmd::Sample {
            policy,
            seed,
            count,
            out_dir,
            jobs,
            manifest,
        } => commands::sample(policy, seed, count, &out_dir, jobs, manifest.as_deref()),
        Cmd::Search {
            method,
            policy,
            task,
            trials,
            seed_stream,
            results,
            out_dir,
            jobs,
            manifest,
        } => commands::search(
            method,
            policy,
            &task,
            trials,
            seed_stream,
            &results,
            &out_dir,
            jobs,
            manifest.as_deref(),
        ),
        Cmd::Rank {
            input,
            n_per_method,
            output,
            manifest,
        } => commands::rank(&input, n_per_method, output.as_deref(), manifest.as_deref()),
        Cmd::Edf {
            input,
            condition,
            method,
            output,
            manifest,
        } => commands::edf_command(
            &input,
            condition.as_deref(),
            method.as_deref(),
            output.as_deref(),
            manifest.as_deref(),
        ),
        Cmd::Asha {
            policy,
            budget_epochs,
            seed,
            candidates,
            eta,
            min_epochs,
            max_epochs,
            noise_scale,
            out_dir,
            manifest,
        } => commands::asha(
            policy,
            budget_epochs,
            seed,
            candidates,
            eta,
            min_epochs,
            max_epochs,
            noise_scale,
            &out_dir,
            manifest.as_deref(),
        ),
        Cmd::Capacity {
            genotype,
            cells,
            init_channels,
            rescale_1m,
            manifest,
        } => commands::capacity(
            &genotype,
            cells,
            init_channels,
            rescale_1m,
            manifest.as_deref(),
        ),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
