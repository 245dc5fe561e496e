//! Experiment orchestration: declarative run configs, sweeps over
//! (algorithm, learning rate, seed), resumable round-by-round CSV logging,
//! best-learning-rate selection, and result summarization.
//!
//! A run directory contains one CSV per sweep cell plus a manifest recording
//! the resolved config and its hash. Round CSVs are fully deterministic
//! functions of the config; wall-clock timings go to sidecar files so the
//! main CSVs stay byte-identical across reruns.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    self, Dataset, Partition, PartitionConfig, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::fed::{Algorithm, FederatedRun, FederationConfig};
use crate::metrics::{self, DivergenceRecord};
use crate::nn::MlpArchitecture;
use crate::optim::SgdConfig;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
/// Number of trailing evaluation points averaged into a run's final score.
pub const FINAL_WINDOW: usize = 5;

const ROUND_HEADER: &str = "round,train_loss,test_accuracy,test_macro_f1,lr,seed,algorithm";
const TIMING_HEADER: &str = "round,wall_time_ms";
const DIVERGENCE_HEADER: &str = "round,k,mean_cosine,mean_projection,num_clients";
const SUMMARY_HEADER: &str = "dataset,alpha,metric,algorithm,mean,std,n_seeds";
const CURVE_HEADER: &str = "round,mean_acc,std_acc";

fn default_num_classes() -> usize {
    10
}
fn default_feature_dim() -> usize {
    32
}
fn default_train_per_class() -> usize {
    500
}
fn default_test_per_class() -> usize {
    100
}
fn default_separation() -> f64 {
    1.0
}
fn default_noise_std() -> f64 {
    1.0
}
fn default_hidden_dim() -> usize {
    128
}
fn default_num_clients() -> usize {
    100
}
fn default_clients_per_round() -> usize {
    10
}
fn default_local_epochs() -> usize {
    2
}
fn default_batch_size() -> usize {
    50
}
fn default_rounds() -> usize {
    200
}
fn default_beta() -> f64 {
    0.9
}
fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}
fn default_eval_every() -> usize {
    2
}

/// Flat, TOML-serializable description of a full experiment sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// "mnist" or "synthetic".
    pub dataset: String,
    /// Directory holding the four MNIST IDX files (dataset = "mnist").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mnist_dir: Option<PathBuf>,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Seed for generating the synthetic dataset (shared by every run).
    #[serde(default)]
    pub synthetic_seed: u64,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    /// Dirichlet concentration for partitioning.
    pub alpha: f64,
    #[serde(default = "default_num_clients")]
    pub num_clients: usize,
    #[serde(default = "default_clients_per_round")]
    pub clients_per_round: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub reversed_drives_updates: bool,
    pub algorithms: Vec<String>,
    pub lr_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    pub output_dir: PathBuf,
    /// Log per-step client gradients and emit divergence CSVs (memory-heavy).
    #[serde(default)]
    pub diagnostics: bool,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse failure: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        match self.dataset.as_str() {
            "mnist" => {
                if self.mnist_dir.is_none() {
                    return Err(Error::InvalidConfig(
                        "dataset \"mnist\" requires mnist_dir".into(),
                    ));
                }
            }
            "synthetic" => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown dataset {other:?}, expected \"mnist\" or \"synthetic\""
                )));
            }
        }
        if self.lr_grid.is_empty() {
            return Err(Error::InvalidConfig("lr_grid must be nonempty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be nonempty".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::InvalidConfig("algorithms must be nonempty".into()));
        }
        self.algorithm_list()?;
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be positive".into()));
        }
        for &lr in &self.lr_grid {
            SgdConfig { lr, beta: self.beta }.validate()?;
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be finite and positive, got {}",
                self.alpha
            )));
        }
        // Validate the per-cell federation setup once with a grid placeholder.
        self.federation(self.parse_algorithms_first()?, self.lr_grid[0], 0)
            .validate()
    }

    fn parse_algorithms_first(&self) -> Result<Algorithm> {
        self.algorithms[0].parse()
    }

    pub fn algorithm_list(&self) -> Result<Vec<Algorithm>> {
        self.algorithms.iter().map(|a| a.parse()).collect()
    }

    pub fn arch(&self) -> Result<MlpArchitecture> {
        match self.dataset.as_str() {
            "mnist" => MlpArchitecture::new(784, self.hidden_dim, 10),
            _ => MlpArchitecture::new(self.feature_dim, self.hidden_dim, self.num_classes),
        }
    }

    pub fn load_dataset(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset.as_str() {
            "mnist" => data::load_mnist(self.mnist_dir.as_ref().expect("validated")),
            _ => data::make_synthetic(&SyntheticConfig {
                num_classes: self.num_classes,
                feature_dim: self.feature_dim,
                train_per_class: self.train_per_class,
                test_per_class: self.test_per_class,
                separation: self.separation,
                noise_std: self.noise_std,
                seed: self.synthetic_seed,
            }),
        }
    }

    pub fn partition_config(&self, seed: u64) -> PartitionConfig {
        PartitionConfig {
            num_clients: self.num_clients,
            alpha: self.alpha,
            seed,
        }
    }

    pub fn federation(&self, algorithm: Algorithm, lr: f64, seed: u64) -> FederationConfig {
        FederationConfig {
            num_clients: self.num_clients,
            clients_per_round: self.clients_per_round,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            rounds: self.rounds,
            algorithm,
            optimizer: SgdConfig {
                lr,
                beta: self.beta,
            },
            seed,
            reversed_drives_updates: self.reversed_drives_updates,
        }
    }

    /// 1-based rounds at which the model is evaluated on the test set.
    pub fn eval_rounds(&self) -> Vec<usize> {
        let mut rounds: Vec<usize> = (1..=self.rounds)
            .filter(|r| r % self.eval_every == 0)
            .collect();
        if rounds.last() != Some(&self.rounds) {
            rounds.push(self.rounds);
        }
        rounds
    }

    /// All sweep cells in deterministic order.
    pub fn cells(&self) -> Result<Vec<CellKey>> {
        let mut cells = Vec::new();
        for algorithm in self.algorithm_list()? {
            for &lr in &self.lr_grid {
                for &seed in &self.seeds {
                    cells.push(CellKey {
                        algorithm,
                        lr,
                        seed,
                    });
                }
            }
        }
        Ok(cells)
    }
}

/// SHA-256 of the canonical TOML serialization of a config.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let canonical = toml::to_string(config).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One (algorithm, learning rate, seed) sweep cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellKey {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub seed: u64,
}

impl CellKey {
    pub fn file_stem(&self) -> String {
        format!("{}_lr{}_seed{}", self.algorithm, self.lr, self.seed)
    }

    pub fn round_csv(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.csv", self.file_stem()))
    }

    pub fn timing_csv(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.timing.csv", self.file_stem()))
    }

    pub fn divergence_csv(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.divergence.csv", self.file_stem()))
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} lr={} seed={}", self.algorithm, self.lr, self.seed)
    }
}

/// One evaluation point of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub test_macro_f1: f64,
    /// Measured, not reproducible; stored in the timing sidecar CSV only.
    pub wall_time_ms: u64,
    pub lr: f64,
    pub seed: u64,
    pub algorithm: Algorithm,
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

struct AtomicCsv {
    partial: PathBuf,
    target: PathBuf,
    writer: BufWriter<File>,
}

impl AtomicCsv {
    fn create(target: PathBuf, header: &str) -> Result<Self> {
        let partial = target.with_extension("csv.partial");
        let mut writer = create_file(&partial)?;
        writeln!(writer, "{header}").map_err(|e| Error::io(&partial, e))?;
        Ok(Self {
            partial,
            target,
            writer,
        })
    }

    fn write_row(&mut self, row: &str) -> Result<()> {
        writeln!(self.writer, "{row}").map_err(|e| Error::io(&self.partial, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.partial, e))
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.partial, e))?;
        fs::rename(&self.partial, &self.target).map_err(|e| Error::io(&self.target, e))
    }
}

fn round_row(record: &RoundRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        record.round,
        record.train_loss,
        record.test_accuracy,
        record.test_macro_f1,
        record.lr,
        record.seed,
        record.algorithm
    )
}

/// Parses one run's round CSV back into records (timings read as zero).
pub fn load_round_csv(path: impl AsRef<Path>) -> Result<Vec<RoundRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (line_idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let malformed = |message: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: line_idx + 1,
            message,
        };
        if line_idx == 0 {
            if line != ROUND_HEADER {
                return Err(malformed(format!(
                    "unexpected header {line:?}, expected {ROUND_HEADER:?}"
                )));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(malformed(format!("expected 7 fields, got {}", fields.len())));
        }
        records.push(RoundRecord {
            round: fields[0]
                .parse()
                .map_err(|e| malformed(format!("round: {e}")))?,
            train_loss: fields[1]
                .parse()
                .map_err(|e| malformed(format!("train_loss: {e}")))?,
            test_accuracy: fields[2]
                .parse()
                .map_err(|e| malformed(format!("test_accuracy: {e}")))?,
            test_macro_f1: fields[3]
                .parse()
                .map_err(|e| malformed(format!("test_macro_f1: {e}")))?,
            wall_time_ms: 0,
            lr: fields[4]
                .parse()
                .map_err(|e| malformed(format!("lr: {e}")))?,
            seed: fields[5]
                .parse()
                .map_err(|e| malformed(format!("seed: {e}")))?,
            algorithm: fields[6].parse()?,
        });
    }
    Ok(records)
}

fn write_manifest(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut writer = create_file(&path)?;
    let body = toml::to_string(config).expect("config serializes");
    write!(
        writer,
        "schema_version = {SCHEMA_VERSION}\nconfig_hash = \"{}\"\n\n{body}",
        config_hash(config)
    )
    .map_err(|e| Error::io(&path, e))?;
    writer.flush().map_err(|e| Error::io(&path, e))
}

/// Reads a run directory's manifest back into the config it was built from.
pub fn load_manifest(dir: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("manifest parse failure: {e}")))?;
    let stored_hash = table
        .remove("config_hash")
        .and_then(|v| v.as_str().map(String::from))
        .ok_or_else(|| Error::InvalidConfig("manifest lacks config_hash".into()))?;
    table.remove("schema_version");
    let config: ExperimentConfig = table
        .try_into()
        .map_err(|e| Error::InvalidConfig(format!("manifest config invalid: {e}")))?;
    let actual = config_hash(&config);
    if actual != stored_hash {
        return Err(Error::ManifestMismatch {
            existing: stored_hash,
            current: actual,
        });
    }
    Ok(config)
}

/// What `run_experiment` did for each cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentReport {
    pub trained: Vec<String>,
    pub skipped: Vec<String>,
}

/// Runs every sweep cell of the config, skipping cells whose round CSV
/// already exists. An existing run directory must carry a manifest for the
/// same config; otherwise the run is refused. `seed_filter` restricts the
/// sweep to one of the config's seeds without changing the manifest.
pub fn run_experiment(
    config: &ExperimentConfig,
    seed_filter: Option<u64>,
) -> Result<ExperimentReport> {
    config.validate()?;
    if let Some(seed) = seed_filter {
        if !config.seeds.contains(&seed) {
            return Err(Error::InvalidConfig(format!(
                "seed {seed} is not in the config's seed list"
            )));
        }
    }
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    match load_manifest(&dir) {
        Ok(existing) => {
            let (existing_hash, current_hash) = (config_hash(&existing), config_hash(config));
            if existing_hash != current_hash {
                return Err(Error::ManifestMismatch {
                    existing: existing_hash,
                    current: current_hash,
                });
            }
        }
        Err(Error::Io { .. }) => write_manifest(&dir, config)?,
        Err(e) => return Err(e),
    }

    let (train, test) = config.load_dataset()?;
    let arch = config.arch()?;
    let mut partitions: BTreeMap<u64, Partition> = BTreeMap::new();
    let mut report = ExperimentReport {
        trained: Vec::new(),
        skipped: Vec::new(),
    };
    for cell in config.cells()? {
        if seed_filter.is_some_and(|seed| seed != cell.seed) {
            continue;
        }
        if cell.round_csv(&dir).exists() {
            report.skipped.push(cell.file_stem());
            continue;
        }
        let partition = match partitions.entry(cell.seed) {
            std::collections::btree_map::Entry::Occupied(p) => p.into_mut(),
            std::collections::btree_map::Entry::Vacant(slot) => {
                slot.insert(data::partition_dirichlet(
                    &train.labels,
                    train.num_classes,
                    &config.partition_config(cell.seed),
                )?)
            }
        };
        run_cell(config, &arch, &train, &test, partition, cell, &dir)?;
        report.trained.push(cell.file_stem());
    }
    Ok(report)
}

fn run_cell(
    config: &ExperimentConfig,
    arch: &MlpArchitecture,
    train: &Dataset,
    test: &Dataset,
    partition: &Partition,
    cell: CellKey,
    dir: &Path,
) -> Result<()> {
    let fed = config.federation(cell.algorithm, cell.lr, cell.seed);
    let mut run = FederatedRun::new(*arch, train, partition, fed)?;
    let eval_rounds = config.eval_rounds();
    let mut rounds_csv = AtomicCsv::create(cell.round_csv(dir), ROUND_HEADER)?;
    let mut timing_csv = AtomicCsv::create(cell.timing_csv(dir), TIMING_HEADER)?;
    let mut divergence_csv = if config.diagnostics {
        Some(AtomicCsv::create(
            cell.divergence_csv(dir),
            DIVERGENCE_HEADER,
        )?)
    } else {
        None
    };
    let mut next_eval = eval_rounds.iter().copied().peekable();
    while !run.is_finished() {
        let started = Instant::now();
        let outcome = run.step_round(config.diagnostics)?;
        if let Some(csv) = divergence_csv.as_mut() {
            for record in &outcome.divergence {
                csv.write_row(&divergence_row(record))?;
            }
        }
        if next_eval.peek() == Some(&outcome.round) {
            next_eval.next();
            let eval = metrics::evaluate_model(arch, run.server().global_params.view(), test)?;
            let record = RoundRecord {
                round: outcome.round,
                train_loss: outcome.train_loss,
                test_accuracy: eval.accuracy,
                test_macro_f1: eval.macro_f1,
                wall_time_ms: started.elapsed().as_millis() as u64,
                lr: cell.lr,
                seed: cell.seed,
                algorithm: cell.algorithm,
            };
            rounds_csv.write_row(&round_row(&record))?;
            timing_csv.write_row(&format!("{},{}", record.round, record.wall_time_ms))?;
        }
    }
    rounds_csv.finish()?;
    timing_csv.finish()?;
    if let Some(csv) = divergence_csv {
        csv.finish()?;
    }
    Ok(())
}

fn divergence_row(record: &DivergenceRecord) -> String {
    format!(
        "{},{},{},{},{}",
        record.round, record.k, record.mean_cosine, record.mean_projection, record.num_clients
    )
}

/// Writes divergence records in the diagnostic CSV schema.
pub fn write_divergence_csv(
    path: impl AsRef<Path>,
    records: &[DivergenceRecord],
) -> Result<()> {
    let path = path.as_ref();
    let mut csv = AtomicCsv::create(path.to_path_buf(), DIVERGENCE_HEADER)?;
    for record in records {
        csv.write_row(&divergence_row(record))?;
    }
    csv.finish()
}

/// Writes per-client class counts: `client_id, class_0..class_{C-1}`.
pub fn write_partition_csv(
    path: impl AsRef<Path>,
    partition: &Partition,
    labels: &[usize],
) -> Result<()> {
    let path = path.as_ref();
    let header: String = std::iter::once("client_id".to_string())
        .chain((0..partition.num_classes).map(|c| format!("class_{c}")))
        .collect::<Vec<_>>()
        .join(",");
    let mut csv = AtomicCsv::create(path.to_path_buf(), &header)?;
    let counts = partition.class_counts(labels);
    for (client_id, row) in counts.rows().into_iter().enumerate() {
        let line: String = std::iter::once(client_id.to_string())
            .chain(row.iter().map(|c| c.to_string()))
            .collect::<Vec<_>>()
            .join(",");
        csv.write_row(&line)?;
    }
    csv.finish()
}

/// Mean of the last `FINAL_WINDOW` values of `metric` in round order.
/// Records must belong to a single run.
pub fn final_window_mean(records: &[RoundRecord], metric: fn(&RoundRecord) -> f64) -> f64 {
    let mut sorted: Vec<&RoundRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.round);
    let tail = &sorted[sorted.len().saturating_sub(FINAL_WINDOW)..];
    tail.iter().map(|r| metric(r)).sum::<f64>() / tail.len() as f64
}

fn cell_records<'a>(records: &'a [RoundRecord], cell: &CellKey) -> Vec<&'a RoundRecord> {
    records
        .iter()
        .filter(|r| r.algorithm == cell.algorithm && r.lr == cell.lr && r.seed == cell.seed)
        .collect()
}

fn complete_cells(config: &ExperimentConfig, records: &[RoundRecord]) -> Result<()> {
    let missing: Vec<String> = config
        .cells()?
        .iter()
        .filter(|cell| cell_records(records, cell).is_empty())
        .map(|cell| cell.to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::IncompleteRuns { missing })
    }
}

/// Per-algorithm learning rate with the best seed-averaged final-window test
/// accuracy. Ties go to the smaller learning rate.
pub fn select_best_lr(
    config: &ExperimentConfig,
    records: &[RoundRecord],
) -> Result<BTreeMap<Algorithm, f64>> {
    complete_cells(config, records)?;
    let mut best = BTreeMap::new();
    for algorithm in config.algorithm_list()? {
        let mut sorted_grid = config.lr_grid.clone();
        sorted_grid.sort_by(|a, b| a.partial_cmp(b).expect("learning rates are finite"));
        let mut best_lr = f64::NAN;
        let mut best_score = f64::NEG_INFINITY;
        for &lr in &sorted_grid {
            let mut score = 0.0;
            for &seed in &config.seeds {
                let cell = CellKey {
                    algorithm,
                    lr,
                    seed,
                };
                let run: Vec<RoundRecord> = cell_records(records, &cell)
                    .into_iter()
                    .cloned()
                    .collect();
                score += final_window_mean(&run, |r| r.test_accuracy);
            }
            score /= config.seeds.len() as f64;
            // Strict comparison over ascending rates keeps ties on the smaller one.
            if score > best_score {
                best_score = score;
                best_lr = lr;
            }
        }
        best.insert(algorithm, best_lr);
    }
    Ok(best)
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub dataset: String,
    pub alpha: f64,
    /// "accuracy" or "f1".
    pub metric: String,
    pub algorithm: Algorithm,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

/// Summary of a sweep at the per-algorithm best learning rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub best_lrs: BTreeMap<Algorithm, f64>,
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// Aggregates records into the results table: mean and sample standard
/// deviation over seeds of the final-window metrics, at each algorithm's best
/// learning rate.
pub fn summarize(config: &ExperimentConfig, records: &[RoundRecord]) -> Result<Summary> {
    let best_lrs = select_best_lr(config, records)?;
    let mut rows = Vec::new();
    for metric_name in ["accuracy", "f1"] {
        let metric: fn(&RoundRecord) -> f64 = match metric_name {
            "accuracy" => |r| r.test_accuracy,
            _ => |r| r.test_macro_f1,
        };
        for (&algorithm, &lr) in &best_lrs {
            let per_seed: Vec<f64> = config
                .seeds
                .iter()
                .map(|&seed| {
                    let cell = CellKey {
                        algorithm,
                        lr,
                        seed,
                    };
                    let run: Vec<RoundRecord> =
                        cell_records(records, &cell).into_iter().cloned().collect();
                    final_window_mean(&run, metric)
                })
                .collect();
            rows.push(SummaryRow {
                dataset: config.dataset.clone(),
                alpha: config.alpha,
                metric: metric_name.to_string(),
                algorithm,
                mean: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
                std: sample_std(&per_seed),
                n_seeds: per_seed.len(),
            });
        }
    }
    Ok(Summary { rows, best_lrs })
}

impl Summary {
    /// Plain-text table; the best algorithm per metric is starred.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        for metric in ["accuracy", "f1"] {
            let rows: Vec<&SummaryRow> =
                self.rows.iter().filter(|r| r.metric == metric).collect();
            let best = rows
                .iter()
                .map(|r| r.mean)
                .fold(f64::NEG_INFINITY, f64::max);
            out.push_str(&format!("{metric}:\n"));
            for row in rows {
                let marker = if row.mean == best { " *" } else { "" };
                out.push_str(&format!(
                    "  {:<8} lr={:<7} {:.4} ({:.4}) n={}{}\n",
                    row.algorithm.to_string(),
                    self.best_lrs[&row.algorithm],
                    row.mean,
                    row.std,
                    row.n_seeds,
                    marker
                ));
            }
        }
        out
    }
}

/// Loads every expected cell CSV of a run directory.
pub fn load_all_records(dir: impl AsRef<Path>, config: &ExperimentConfig) -> Result<Vec<RoundRecord>> {
    let dir = dir.as_ref();
    let mut records = Vec::new();
    for cell in config.cells()? {
        let path = cell.round_csv(dir);
        if path.exists() {
            records.extend(load_round_csv(&path)?);
        }
    }
    Ok(records)
}

/// Writes `summary.csv` and per-algorithm accuracy-curve CSVs
/// (`curve_<algorithm>.csv`: round, mean_acc, std_acc at the best lr).
pub fn write_summary_files(
    dir: impl AsRef<Path>,
    records: &[RoundRecord],
    summary: &Summary,
) -> Result<()> {
    let dir = dir.as_ref();
    let mut summary_csv = AtomicCsv::create(dir.join("summary.csv"), SUMMARY_HEADER)?;
    for row in &summary.rows {
        summary_csv.write_row(&format!(
            "{},{},{},{},{},{},{}",
            row.dataset, row.alpha, row.metric, row.algorithm, row.mean, row.std, row.n_seeds
        ))?;
    }
    summary_csv.finish()?;

    for (&algorithm, &lr) in &summary.best_lrs {
        let mut by_round: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for record in records {
            if record.algorithm == algorithm && record.lr == lr {
                by_round.entry(record.round).or_default().push(record.test_accuracy);
            }
        }
        let mut curve_csv = AtomicCsv::create(
            dir.join(format!("curve_{algorithm}.csv")),
            CURVE_HEADER,
        )?;
        for (round, accs) in by_round {
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            curve_csv.write_row(&format!("{},{},{}", round, mean, sample_std(&accs)))?;
        }
        curve_csv.finish()?;
    }
    Ok(())
}

/// Runs one cell with per-step gradient logging and returns its divergence
/// records; the round CSV machinery is bypassed.
pub fn run_diagnostics(
    config: &ExperimentConfig,
    cell: CellKey,
) -> Result<Vec<DivergenceRecord>> {
    config.validate()?;
    let (train, _test) = config.load_dataset()?;
    let arch = config.arch()?;
    let partition = data::partition_dirichlet(
        &train.labels,
        train.num_classes,
        &config.partition_config(cell.seed),
    )?;
    let fed = config.federation(cell.algorithm, cell.lr, cell.seed);
    let mut run = FederatedRun::new(arch, &train, &partition, fed)?;
    let mut records = Vec::new();
    while !run.is_finished() {
        records.extend(run.step_round(true)?.divergence);
    }
    Ok(records)
}
