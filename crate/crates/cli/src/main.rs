//! `pcdarts` — run architecture searches, derive discrete cells from their
//! checkpoints, sweep one ablation axis, and cost genotypes at evaluation
//! scale.
//!
//! Exit codes: 0 success, 1 runtime failure (partial artifacts are kept),
//! 2 usage error. Every failure prints exactly one `error: …` line to stderr.

mod manifest;
mod plot;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pcdarts_core::config::Config;
use pcdarts_core::genotype::{self, count_costs, validate, Genotype};
use pcdarts_core::search::run_search;
use pcdarts_core::space::ArchParams;
use pcdarts_core::tensor::checkpoint;

#[derive(Parser)]
#[command(
    name = "pcdarts",
    version,
    about = "Differentiable architecture search with partial channel connections"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a bilevel search and write checkpoint, log, genotype, and manifest.
    Search {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory, created if absent.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the channel-sampling divisor K.
        #[arg(long)]
        k: Option<usize>,
        /// Disable partial channel connections (every edge sees all channels).
        #[arg(long)]
        no_pc: bool,
        /// Disable edge normalization.
        #[arg(long)]
        no_en: bool,
    },
    /// Turn an architecture checkpoint into a discrete genotype (JSON + DOT).
    Derive {
        /// Checkpoint holding alpha.normal/alpha.reduce/beta.normal/beta.reduce.
        #[arg(long)]
        arch: PathBuf,
        /// Node count the checkpoint must encode.
        #[arg(long)]
        nodes: usize,
        /// Genotype JSON destination; the DOT rendering lands beside it.
        #[arg(long)]
        out: PathBuf,
        /// Let the zero op win edges instead of excluding it.
        #[arg(long)]
        keep_zero: bool,
    },
    /// Run every point of one sweep axis and summarize cost vs accuracy.
    Ablate {
        /// TOML run configuration providing everything the axis doesn't vary.
        #[arg(long)]
        config: PathBuf,
        /// Axis spec: `k=1,2,4,8`, `seeds=0..4` (inclusive), `nodes=5,6,7`,
        /// or `epochs=50,75,100,125`.
        #[arg(long)]
        sweep: String,
        /// Directory for summary.csv and scatter.svg.
        #[arg(long)]
        out: PathBuf,
        /// Sweep points run concurrently, up to this many.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print a genotype's parameter and multiply-add costs as JSON.
    Cost {
        /// Genotype JSON file.
        #[arg(long)]
        genotype: PathBuf,
        /// Number of stacked cells.
        #[arg(long)]
        cells: usize,
        /// Initial channel count.
        #[arg(long)]
        channels: usize,
        /// Input resolution in pixels.
        #[arg(long)]
        resolution: usize,
    },
}

/// Failure modes map 1:1 onto exit codes; messages stay single-line.
pub enum Failure {
    Usage(String),
    Runtime(String),
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error: {first}");
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {}", m.replace('\n', " "));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {}", m.replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Search { config, out, seed, k, no_pc, no_en } => {
            cmd_search(&config, &out, seed, k, no_pc, no_en)
        }
        Cmd::Derive { arch, nodes, out, keep_zero } => cmd_derive(&arch, nodes, &out, keep_zero),
        Cmd::Ablate { config, sweep, out, jobs } => sweep::cmd_ablate(&config, &sweep, &out, jobs),
        Cmd::Cost { genotype, cells, channels, resolution } => {
            cmd_cost(&genotype, cells, channels, resolution)
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_search(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    k: Option<usize>,
    no_pc: bool,
    no_en: bool,
) -> Result<(), Failure> {
    let mut cfg = Config::load(config).map_err(usage)?;
    if let Some(s) = seed {
        cfg.search.seed = s;
    }
    if let Some(k) = k {
        cfg.search.k = k;
    }
    if no_pc {
        cfg.search.partial_connection = false;
    }
    if no_en {
        cfg.search.edge_normalization = false;
    }
    cfg.validate().map_err(usage)?;

    fs::create_dir_all(out)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
    let started = manifest::unix_now();
    let dataset = cfg.load_dataset().map_err(runtime)?;
    let outcome = run_search::<f32>(&cfg, &dataset).map_err(runtime)?;

    // Artifacts land even for an aborted run: the log up to the rollback
    // point is part of the record.
    let weights: Vec<(String, _)> = outcome.net.weight_params();
    let named: Vec<(&str, _)> = weights.iter().map(|(n, t)| (n.as_str(), t)).collect();
    checkpoint::save(&out.join("weights.pcnt"), &named).map_err(runtime)?;
    let arch = outcome.net.arch_params();
    let named: Vec<(&str, _)> = arch.iter().map(|(n, t)| (n.as_str(), t)).collect();
    checkpoint::save(&out.join("arch.pcnt"), &named).map_err(runtime)?;
    write_file(&out.join("log.csv"), outcome.log.to_csv().as_bytes())?;
    write_file(&out.join("genotype.json"), outcome.genotype.to_json().as_bytes())?;
    write_file(&out.join("cell.dot"), genotype::to_dot(&outcome.genotype).as_bytes())?;
    let man = manifest::RunManifest::new(&cfg, started, outcome.aborted.clone());
    write_file(&out.join("manifest.json"), man.to_json().as_bytes())?;

    if let Some(reason) = outcome.aborted {
        return Err(Failure::Runtime(format!(
            "search aborted and rolled back after a non-finite value: {reason}"
        )));
    }
    let last = outcome.log.records.last().expect("at least one epoch");
    println!(
        "search done: {} epochs, train acc {:.4}, held-out acc {:.4}, artifacts in {}",
        outcome.log.records.len(),
        last.w_acc,
        last.a_acc,
        out.display()
    );
    Ok(())
}

fn cmd_derive(arch: &Path, nodes: usize, out: &Path, keep_zero: bool) -> Result<(), Failure> {
    let tensors = checkpoint::load::<f64>(arch).map_err(usage)?;
    let params = ArchParams::from_named(&tensors).map_err(usage)?;
    if params.n_nodes != nodes {
        return Err(Failure::Usage(format!(
            "checkpoint encodes a {}-node cell ({} edges), but --nodes says {nodes}",
            params.n_nodes,
            params.n_edges()
        )));
    }
    // Scores follow the full derivation rule (mixing weight × edge weight);
    // runs that disabled edge normalization leave β at its near-uniform
    // initialization, where the product degenerates to the α ranking.
    let genotype =
        genotype::derive_with(&params, true, keep_zero, genotype::EdgeScore::MaxOp)
            .map_err(runtime)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    write_file(out, genotype.to_json().as_bytes())?;
    let dot_path = out.with_extension("dot");
    write_file(&dot_path, genotype::to_dot(&genotype).as_bytes())?;
    println!("derived {}-node genotype: {} and {}", nodes, out.display(), dot_path.display());
    Ok(())
}

fn cmd_cost(
    genotype: &Path,
    cells: usize,
    channels: usize,
    resolution: usize,
) -> Result<(), Failure> {
    let text = fs::read_to_string(genotype)
        .map_err(|e| usage(format!("cannot read {}: {e}", genotype.display())))?;
    let g = Genotype::from_json(&text).map_err(usage)?;
    let violations = validate(&g, g.n_nodes());
    if !violations.is_empty() {
        return Err(Failure::Runtime(format!(
            "invalid genotype: {}",
            violations.join("; ")
        )));
    }
    let report =
        count_costs(&g, channels, cells, 10, resolution).map_err(runtime)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| runtime(format!("cannot serialize report: {e}")))?;
    println!("{json}");
    Ok(())
}
