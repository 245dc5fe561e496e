use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use fedmom::experiment::{self, CellKey, ExperimentConfig};
use fedmom::metrics;

#[derive(Parser)]
#[command(name = "fedmom", version, about = "Federated momentum-initialization experiments")]
struct Cli {
    /// Worker threads for client training (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (algorithm, lr, seed) cell of a config, skipping completed ones.
    Run {
        /// TOML experiment config.
        config: PathBuf,
        /// Restrict the sweep to this seed from the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Aggregate a completed run directory into summary and curve CSVs.
    Summarize {
        /// Run directory holding a manifest and per-cell round CSVs.
        dir: PathBuf,
        /// Directory for summary.csv and curve CSVs (default: the run directory).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write per-client class counts for a config's Dirichlet partition.
    PartitionStats {
        /// TOML experiment config.
        config: PathBuf,
        /// Partition seed (default: the config's first seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path (default: partition_stats_seed<N>.csv in the output dir).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run one cell with per-step gradient logging and export divergence CSVs.
    Diagnose {
        /// TOML experiment config.
        config: PathBuf,
        /// Algorithm to diagnose (default: the config's first).
        #[arg(long)]
        algorithm: Option<String>,
        /// Learning rate (default: the config's first).
        #[arg(long)]
        lr: Option<f64>,
        /// Seed (default: the config's first).
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path (default: divergence_<cell>.csv in the output dir).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(path: &PathBuf, output: Option<PathBuf>) -> anyhow::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_toml_file(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if let Some(dir) = output {
        config.output_dir = dir;
    }
    Ok(config)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Run {
            config,
            seed,
            output,
        } => {
            let config = load_config(&config, output)?;
            let report = experiment::run_experiment(&config, seed)?;
            println!(
                "trained {} cell(s), skipped {} completed cell(s)",
                report.trained.len(),
                report.skipped.len()
            );
            println!("results in {}", config.output_dir.display());
        }
        Command::Summarize { dir, output } => {
            let config = experiment::load_manifest(&dir)
                .with_context(|| format!("reading manifest in {}", dir.display()))?;
            let records = experiment::load_all_records(&dir, &config)?;
            let summary = experiment::summarize(&config, &records)?;
            let out_dir = output.unwrap_or_else(|| dir.clone());
            std::fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            experiment::write_summary_files(&out_dir, &records, &summary)?;
            print!("{}", summary.text_table());
            println!("summary CSVs in {}", out_dir.display());
        }
        Command::PartitionStats {
            config,
            seed,
            output,
        } => {
            let config = load_config(&config, None)?;
            let seed = seed.unwrap_or(config.seeds[0]);
            let (train, _) = config.load_dataset()?;
            let partition = fedmom::data::partition_dirichlet(
                &train.labels,
                train.num_classes,
                &config.partition_config(seed),
            )?;
            let path = output.unwrap_or_else(|| {
                config
                    .output_dir
                    .join(format!("partition_stats_seed{seed}.csv"))
            });
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)
                    .with_context(|| format!("creating {}", parent.display()))?;
            }
            experiment::write_partition_csv(&path, &partition, &train.labels)?;
            println!(
                "alpha={} seed={seed}: mean label entropy {:.4} nats over {} clients",
                config.alpha,
                partition.mean_label_entropy(&train.labels),
                partition.clients.len()
            );
            println!("class counts in {}", path.display());
        }
        Command::Diagnose {
            config,
            algorithm,
            lr,
            seed,
            output,
        } => {
            let config = load_config(&config, None)?;
            let cell = CellKey {
                algorithm: match algorithm {
                    Some(name) => name.parse()?,
                    None => config.algorithm_list()?[0],
                },
                lr: lr.unwrap_or(config.lr_grid[0]),
                seed: seed.unwrap_or(config.seeds[0]),
            };
            let records = experiment::run_diagnostics(&config, cell)?;
            let path = output.unwrap_or_else(|| {
                config
                    .output_dir
                    .join(format!("divergence_{}.csv", cell.file_stem()))
            });
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)
                    .with_context(|| format!("creating {}", parent.display()))?;
            }
            experiment::write_divergence_csv(&path, &records)?;
            let (rho_cos, rho_proj) = metrics::divergence_trend(&records)?;
            println!(
                "{cell}: Spearman(step, mean cosine) = {rho_cos:.4}, Spearman(step, mean projection) = {rho_proj:.4}"
            );
            println!("divergence records in {}", path.display());
        }
    }
    Ok(())
}
