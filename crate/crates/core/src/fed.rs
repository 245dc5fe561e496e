//! Federated training loop: client sampling, broadcast of model and momentum,
//! parallel local training, and sample-weighted aggregation.
//!
//! One round runs: select clients -> broadcast `(global_params,
//! global_momentum)` -> each selected client trains for `local_epochs` passes
//! over its shard -> the server averages the returned parameters and momenta,
//! weighted by shard size. The aggregated momentum is what seeds every
//! client's buffer in the next round; under `fedavg` it stays zero.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use std::str::FromStr;

use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::metrics::{self, DivergenceRecord};
use crate::nn::{self, MlpArchitecture};
use crate::optim::{ClientOptimizer, MomentumScheme, SgdConfig};
use crate::stream::stream_rng;

/// The three compared algorithms, distinguished by what momentum clients
/// transmit: nothing (`fedavg`), the live buffer (`mfl`), or the reversed
/// estimate (`rmfl`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    FedAvg,
    Mfl,
    Rmfl,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::FedAvg, Algorithm::Mfl, Algorithm::Rmfl];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::Mfl => "mfl",
            Algorithm::Rmfl => "rmfl",
        }
    }

    pub fn scheme(self) -> MomentumScheme {
        match self {
            Algorithm::FedAvg => MomentumScheme::None,
            Algorithm::Mfl => MomentumScheme::Standard,
            Algorithm::Rmfl => MomentumScheme::Reversed,
        }
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Algorithm::FedAvg),
            "mfl" => Ok(Algorithm::Mfl),
            "rmfl" => Ok(Algorithm::Rmfl),
            other => Err(Error::InvalidConfig(format!(
                "unknown algorithm {other:?}, expected fedavg, mfl, or rmfl"
            ))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Full specification of one federated training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub algorithm: Algorithm,
    pub optimizer: SgdConfig,
    pub seed: u64,
    /// When true, the reversed scheme also descends along its estimate
    /// instead of the live buffer.
    pub reversed_drives_updates: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            num_clients: 100,
            clients_per_round: 10,
            local_epochs: 2,
            batch_size: 50,
            rounds: 200,
            algorithm: Algorithm::Rmfl,
            optimizer: SgdConfig { lr: 0.1, beta: 0.9 },
            seed: 0,
            reversed_drives_updates: false,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::InvalidConfig("num_clients must be positive".into()));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(Error::InvalidConfig(format!(
                "clients_per_round must lie in [1, num_clients], got {} with {} clients",
                self.clients_per_round, self.num_clients
            )));
        }
        if self.local_epochs == 0 || self.batch_size == 0 || self.rounds == 0 {
            return Err(Error::InvalidConfig(
                "local_epochs, batch_size, and rounds must be positive".into(),
            ));
        }
        self.optimizer.validate()
    }
}

/// Server-side state between rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub global_params: Array1<f64>,
    pub global_momentum: Array1<f64>,
    /// Number of completed rounds.
    pub round: usize,
}

/// What one client sends back after local training.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: Array1<f64>,
    pub momentum: Array1<f64>,
    pub num_samples: usize,
    pub mean_step_loss: f64,
    /// Per-step minibatch gradients, kept only when diagnostics are on.
    pub step_grads: Option<Vec<Array1<f64>>>,
}

/// The client ids participating in `round`: a uniform draw without
/// replacement, deterministic in `(cfg.seed, round)`, returned sorted.
pub fn select_clients(round: usize, cfg: &FederationConfig) -> Vec<usize> {
    let mut rng = stream_rng(cfg.seed, "select", round as u64, 0);
    let mut ids: Vec<usize> = (0..cfg.num_clients).collect();
    ids.shuffle(&mut rng);
    ids.truncate(cfg.clients_per_round);
    ids.sort_unstable();
    ids
}

/// Runs `cfg.local_epochs` passes of minibatch SGD over one client's shard,
/// starting from the broadcast parameters and momentum.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    client_id: usize,
    shard: &[usize],
    dataset: &Dataset,
    arch: &MlpArchitecture,
    start_params: &Array1<f64>,
    start_momentum: &Array1<f64>,
    cfg: &FederationConfig,
    round: usize,
    log_grads: bool,
) -> Result<ClientUpdate> {
    let context = |source: Error| Error::ClientFailed {
        client_id,
        round,
        source: Box::new(source),
    };
    if shard.is_empty() {
        return Err(context(Error::Empty {
            what: "client shard",
        }));
    }
    let mut params = start_params.clone();
    let mut optimizer = ClientOptimizer::new(
        &cfg.optimizer,
        cfg.algorithm.scheme(),
        cfg.reversed_drives_updates,
        start_momentum.clone(),
    )
    .map_err(context)?;
    let mut rng = stream_rng(cfg.seed, "shuffle", round as u64, client_id as u64);
    let mut order = shard.to_vec();
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    let mut grads = log_grads.then(Vec::new);
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (x, labels) = dataset.gather(batch);
            let (loss, grad) =
                nn::loss_and_grad(arch, params.view(), x.view(), &labels).map_err(context)?;
            optimizer.step(&mut params, grad.view()).map_err(context)?;
            loss_sum += loss;
            steps += 1;
            if let Some(grads) = grads.as_mut() {
                grads.push(grad);
            }
        }
    }
    let momentum = optimizer.transmitted_momentum().map_err(context)?;
    Ok(ClientUpdate {
        client_id,
        params,
        momentum,
        num_samples: shard.len(),
        mean_step_loss: loss_sum / steps as f64,
        step_grads: grads,
    })
}

/// Averages client parameters and momenta, weighted by `num_samples`.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<(Array1<f64>, Array1<f64>)> {
    let first = updates.first().ok_or(Error::Empty {
        what: "update list",
    })?;
    let dim = first.params.len();
    for u in updates {
        for (len, what) in [(u.params.len(), "client parameters"), (u.momentum.len(), "client momentum")] {
            if len != dim {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: dim,
                    actual: len,
                });
            }
        }
    }
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    let mut params = Array1::zeros(dim);
    let mut momentum = Array1::zeros(dim);
    for u in updates {
        let weight = u.num_samples as f64 / total as f64;
        params.scaled_add(weight, &u.params);
        momentum.scaled_add(weight, &u.momentum);
    }
    Ok((params, momentum))
}

/// Per-round outputs apart from the server-state mutation.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    /// Completed round number (1-based).
    pub round: usize,
    /// Mean over selected clients of their mean minibatch loss.
    pub train_loss: f64,
    pub divergence: Vec<DivergenceRecord>,
}

/// Executes one full round, advancing the server state.
///
/// Clients train in parallel; results are reduced in client-id order, so the
/// outcome is independent of thread count. Any client failure aborts the
/// round with the server state untouched.
pub fn run_round(
    server: &mut ServerState,
    arch: &MlpArchitecture,
    dataset: &Dataset,
    partition: &Partition,
    cfg: &FederationConfig,
    diagnostics: bool,
) -> Result<RoundOutcome> {
    if server.round >= cfg.rounds {
        return Err(Error::RoundsExhausted {
            round: server.round,
            rounds: cfg.rounds,
        });
    }
    let round = server.round;
    let selected = select_clients(round, cfg);
    let results: Vec<Result<ClientUpdate>> = selected
        .par_iter()
        .map(|&id| {
            local_train(
                id,
                &partition.clients[id],
                dataset,
                arch,
                &server.global_params,
                &server.global_momentum,
                cfg,
                round,
                diagnostics,
            )
        })
        .collect();
    // Surface the failure of the lowest client id, independent of scheduling.
    let updates: Vec<ClientUpdate> = results.into_iter().collect::<Result<_>>()?;
    let (params, momentum) = aggregate(&updates)?;

    let divergence = if diagnostics {
        collect_divergence(round + 1, &updates)
    } else {
        Vec::new()
    };
    let train_loss =
        updates.iter().map(|u| u.mean_step_loss).sum::<f64>() / updates.len() as f64;

    server.global_params = params;
    server.global_momentum = momentum;
    server.round += 1;
    Ok(RoundOutcome {
        round: server.round,
        train_loss,
        divergence,
    })
}

/// Cosine/projection divergence per local step across this round's clients.
/// Steps where fewer than two clients took a gradient, or where the mean
/// gradient vanishes, produce no record.
fn collect_divergence(round: usize, updates: &[ClientUpdate]) -> Vec<DivergenceRecord> {
    let max_steps = updates
        .iter()
        .filter_map(|u| u.step_grads.as_ref().map(Vec::len))
        .max()
        .unwrap_or(0);
    let mut records = Vec::new();
    for k in 0..max_steps {
        let grads: Vec<Array1<f64>> = updates
            .iter()
            .filter_map(|u| u.step_grads.as_ref().and_then(|g| g.get(k)).cloned())
            .collect();
        if grads.len() < 2 {
            continue;
        }
        if let Ok(step) = metrics::step_divergence(&grads) {
            records.push(DivergenceRecord {
                round,
                k: k + 1,
                mean_cosine: step.mean_cosine,
                mean_projection: step.mean_projection,
                num_clients: step.num_clients,
            });
        }
    }
    records
}

/// A federated training run stepped one round at a time.
#[derive(Debug, Clone)]
pub struct FederatedRun<'a> {
    arch: MlpArchitecture,
    dataset: &'a Dataset,
    partition: &'a Partition,
    cfg: FederationConfig,
    server: ServerState,
}

impl<'a> FederatedRun<'a> {
    /// Validates the setup and initializes the global model from the run seed.
    pub fn new(
        arch: MlpArchitecture,
        dataset: &'a Dataset,
        partition: &'a Partition,
        cfg: FederationConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if partition.num_clients() != cfg.num_clients {
            return Err(Error::InvalidConfig(format!(
                "partition has {} clients but the federation expects {}",
                partition.num_clients(),
                cfg.num_clients
            )));
        }
        if dataset.feature_dim() != arch.input_dim {
            return Err(Error::DimensionMismatch {
                what: "dataset features",
                expected: arch.input_dim,
                actual: dataset.feature_dim(),
            });
        }
        let global_params = nn::init_params(&arch, &mut stream_rng(cfg.seed, "init", 0, 0));
        let dim = global_params.len();
        Ok(Self {
            arch,
            dataset,
            partition,
            cfg,
            server: ServerState {
                global_params,
                global_momentum: Array1::zeros(dim),
                round: 0,
            },
        })
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn arch(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn is_finished(&self) -> bool {
        self.server.round >= self.cfg.rounds
    }

    pub fn step_round(&mut self, diagnostics: bool) -> Result<RoundOutcome> {
        run_round(
            &mut self.server,
            &self.arch,
            self.dataset,
            self.partition,
            &self.cfg,
            diagnostics,
        )
    }
}
