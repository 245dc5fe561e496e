//! End-to-end validation suite. Every check prints one `PASS`/`FAIL` line
//! (visible with `--nocapture`, and in the failure report otherwise) and the
//! criteria are asserted at their stated tolerances.
//!
//! The MNIST-scale checks need the IDX files in `data/mnist/` (see
//! `scripts/fetch_mnist.py`) or a directory named by `MNIST_DIR`. They train
//! real federated runs on one core and together take tens of minutes; the
//! small properties all finish in seconds.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use fedmom::data::{self, Dataset, Partition, PartitionConfig, SyntheticConfig};
use fedmom::experiment::{self, ExperimentConfig};
use fedmom::fed::{Algorithm, FederatedRun, FederationConfig};
use fedmom::metrics::DivergenceRecord;
use fedmom::nn::{self, MlpArchitecture};
use fedmom::optim::{MomentumState, SgdConfig};
use fedmom::stream::stream_rng;

fn report(name: &str, ok: bool, detail: &str) {
    println!("{}  {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn mnist_dir() -> PathBuf {
    match std::env::var_os("MNIST_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

fn mnist() -> &'static (Dataset, Dataset) {
    static DATA: OnceLock<(Dataset, Dataset)> = OnceLock::new();
    DATA.get_or_init(|| {
        data::load_mnist(mnist_dir()).expect(
            "MNIST IDX files not found; run scripts/fetch_mnist.py or set MNIST_DIR",
        )
    })
}

// --- Test-side oracles, written directly from the formulas under test ---

/// r_t = (1-b) v0 + (1-b) sum_{i<t} b^i g_i + b^t g_t, evaluated from scratch.
fn reversed_direct(beta: f64, v0: &Array1<f64>, grads: &[Array1<f64>]) -> Array1<f64> {
    let t = grads.len() - 1;
    let mut r = v0 * (1.0 - beta);
    for (i, g) in grads[..t].iter().enumerate() {
        r = r + g * ((1.0 - beta) * beta.powi(i as i32));
    }
    r + &grads[t] * beta.powi(t as i32)
}

/// v_T = b^T v0 + sum_{i=0}^{T-1} b^{T-1-i} g_i, evaluated from scratch.
fn standard_direct(beta: f64, v0: &Array1<f64>, grads: &[Array1<f64>]) -> Array1<f64> {
    let t = grads.len();
    let mut v = v0 * beta.powi(t as i32);
    for (i, g) in grads.iter().enumerate() {
        v = v + g * beta.powi((t - 1 - i) as i32);
    }
    v
}

fn inf_norm_diff(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Spearman rank correlation with average ranks for ties, self-contained.
fn spearman_oracle(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(values: &[f64]) -> Vec<f64> {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let mut out = vec![0.0; values.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
                j += 1;
            }
            let rank = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                out[idx] = rank;
            }
            i = j + 1;
        }
        out
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in rx.iter().zip(ry.iter()) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[test]
fn criterion_1_reversed_estimate_matches_direct_formula() {
    let started = Instant::now();
    let mut rng = stream_rng(1001, "acceptance", 0, 0);
    let betas = [0.0, 0.5, 0.9, 0.99];
    let mut worst = 0.0_f64;
    for case in 0..1000 {
        let beta = betas[case % betas.len()];
        let dim = rng.random_range(1..8);
        let len = rng.random_range(1..=50);
        let v0 = Array1::from_shape_fn(dim, |_| rng.random_range(-2.0..2.0));
        let mut state = MomentumState::new(beta, v0.clone()).unwrap();
        let mut grads: Vec<Array1<f64>> = Vec::with_capacity(len);
        for _ in 0..len {
            let g = Array1::from_shape_fn(dim, |_| rng.random_range(-2.0..2.0));
            state.observe(g.view()).unwrap();
            grads.push(g);
            let direct = reversed_direct(beta, &v0, &grads);
            worst = worst.max(inf_norm_diff(
                state.reversed_estimate().unwrap().view(),
                direct.view(),
            ));
        }
    }
    let elapsed = started.elapsed();
    report(
        "criterion 1",
        worst < 1e-10 && elapsed.as_secs_f64() < 10.0,
        &format!(
            "incremental vs direct reversed estimate, 1000 sequences: max |diff| = {worst:.3e} (< 1e-10), {:.2}s (< 10s)",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_constant_gradients_give_two_minus_beta() {
    let mut worst = 0.0_f64;
    for &beta in &[0.0, 0.5, 0.9, 0.99] {
        for &c in &[-3.0, -0.25, 0.5, 1.0, 7.5] {
            let dim = 6;
            let ones_c = Array1::from_elem(dim, c);
            let mut state = MomentumState::new(beta, ones_c.clone()).unwrap();
            for _ in 0..40 {
                state.observe(ones_c.view()).unwrap();
                let expected = (2.0 - beta) * c;
                let r = state.reversed_estimate().unwrap();
                worst = worst.max(
                    r.iter()
                        .map(|v| (v - expected).abs())
                        .fold(0.0, f64::max),
                );
            }
        }
    }
    report(
        "criterion 2",
        worst < 1e-12,
        &format!("constant c gradients give (2 - beta) * c at every step: max |diff| = {worst:.3e} (< 1e-12)"),
    );
}

#[test]
fn criterion_3_standard_momentum_matches_closed_form() {
    let mut rng = stream_rng(1003, "acceptance", 0, 0);
    let mut worst = 0.0_f64;
    for case in 0..500 {
        let beta = [0.0, 0.5, 0.9, 0.99][case % 4];
        let dim = rng.random_range(1..6);
        let len = rng.random_range(1..=30);
        let v0 = Array1::from_shape_fn(dim, |_| rng.random_range(-2.0..2.0));
        let mut state = MomentumState::new(beta, v0.clone()).unwrap();
        let mut grads = Vec::new();
        for _ in 0..len {
            let g = Array1::from_shape_fn(dim, |_| rng.random_range(-2.0..2.0));
            state.observe(g.view()).unwrap();
            grads.push(g);
        }
        let direct = standard_direct(beta, &v0, &grads);
        worst = worst.max(inf_norm_diff(state.v.view(), direct.view()));
    }
    report(
        "criterion 3",
        worst < 1e-10,
        &format!("iterated momentum vs closed form over 500 sequences: max |diff| = {worst:.3e} (< 1e-10)"),
    );
}

#[test]
fn criterion_4_analytic_gradients_match_central_differences() {
    let mut worst = 0.0_f64;
    for (arch_idx, &(input, hidden, output)) in
        [(4, 3, 2), (5, 4, 3), (7, 2, 5)].iter().enumerate()
    {
        let arch = MlpArchitecture::new(input, hidden, output).unwrap();
        let mut rng = stream_rng(1004 + arch_idx as u64, "acceptance", 0, 0);
        let params = nn::init_params(&arch, &mut rng);
        let n = 6;
        let x = Array2::from_shape_fn((n, input), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..output)).collect();
        let (_, analytic) = nn::loss_and_grad(&arch, params.view(), x.view(), &labels).unwrap();
        let step = 1e-4;
        for idx in 0..arch.param_count() {
            let mut plus = params.clone();
            plus[idx] += step;
            let mut minus = params.clone();
            minus[idx] -= step;
            let (lp, _) = nn::loss_and_grad(&arch, plus.view(), x.view(), &labels).unwrap();
            let (lm, _) = nn::loss_and_grad(&arch, minus.view(), x.view(), &labels).unwrap();
            let numeric = (lp - lm) / (2.0 * step);
            worst = worst.max((analytic[idx] - numeric).abs());
        }
    }
    report(
        "criterion 4",
        worst < 1e-5,
        &format!("analytic vs central-difference gradients on 3 architectures: max |diff| = {worst:.3e} (< 1e-5)"),
    );
}

#[test]
fn criterion_5_single_client_fedavg_equals_centralized_sgd() {
    let (train, _test) = data::make_synthetic(&SyntheticConfig {
        num_classes: 4,
        feature_dim: 8,
        train_per_class: 30,
        test_per_class: 5,
        separation: 1.0,
        noise_std: 1.0,
        seed: 5,
    })
    .unwrap();
    let arch = MlpArchitecture::new(8, 6, 4).unwrap();
    let cfg = FederationConfig {
        num_clients: 1,
        clients_per_round: 1,
        local_epochs: 2,
        batch_size: 7,
        rounds: 5,
        algorithm: Algorithm::FedAvg,
        optimizer: SgdConfig { lr: 0.05, beta: 0.9 },
        seed: 3,
        reversed_drives_updates: false,
    };
    let partition = Partition {
        clients: vec![(0..train.len()).collect()],
        num_classes: train.num_classes,
    };
    let mut run = FederatedRun::new(arch, &train, &partition, cfg).unwrap();

    // Independent plain-SGD loop sharing only the published stream contract:
    // one shuffle rng per (seed, round, client), reused across epochs.
    let mut params = nn::init_params(&arch, &mut stream_rng(cfg.seed, "init", 0, 0));
    let mut identical_rounds = 0;
    for round in 0..cfg.rounds {
        run.step_round(false).unwrap();
        let mut rng = stream_rng(cfg.seed, "shuffle", round as u64, 0);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _epoch in 0..cfg.local_epochs {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let (x, labels) = train.gather(batch);
                let (_, grad) =
                    nn::loss_and_grad(&arch, params.view(), x.view(), &labels).unwrap();
                params = params - cfg.optimizer.lr * &grad;
            }
        }
        if run.server().global_params == params {
            identical_rounds += 1;
        }
    }
    report(
        "criterion 5",
        identical_rounds == cfg.rounds,
        &format!(
            "single-client run without momentum vs centralized SGD: {identical_rounds}/{} rounds bit-identical",
            cfg.rounds
        ),
    );
}

// Sweep settings for the quantitative checks. The grid spans the usable
// range on this task: 0.03 is the largest rate at which every algorithm
// still converges under heavy skew, and the aggressive end lets the
// selection rule reject unstable cells on the evidence.
const MNIST_BATCH: usize = 50;
const MNIST_GRID: &[f64] = &[0.3, 0.1, 0.03];
const MNIST_SEEDS: &[u64] = &[0, 1, 2];

const SYN_CLIENTS: usize = 20;
const SYN_ACTIVE: usize = 10;
const SYN_BATCH: usize = 250;
const SYN_ROUNDS: usize = 60;
const SYN_SEPARATION: f64 = 0.6;
const SYN_LR: f64 = 0.3;

const DIVERGENCE_LR: f64 = 0.1;

fn tmp_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name)
}

fn mnist_experiment(alpha: f64, algorithms: &[&str], dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset: "mnist".into(),
        mnist_dir: Some(mnist_dir()),
        alpha,
        batch_size: MNIST_BATCH,
        algorithms: algorithms.iter().map(|s| s.to_string()).collect(),
        lr_grid: MNIST_GRID.to_vec(),
        seeds: MNIST_SEEDS.to_vec(),
        eval_every: 5,
        output_dir: dir.to_path_buf(),
        ..synthetic_defaults()
    }
}

/// Baseline config with every field at its usual value; tests override the
/// parts they exercise.
fn synthetic_defaults() -> ExperimentConfig {
    ExperimentConfig {
        dataset: "synthetic".into(),
        mnist_dir: None,
        num_classes: 10,
        feature_dim: 32,
        train_per_class: 500,
        test_per_class: 100,
        separation: 1.0,
        noise_std: 1.0,
        synthetic_seed: 0,
        hidden_dim: 128,
        alpha: 0.01,
        num_clients: 100,
        clients_per_round: 10,
        local_epochs: 2,
        batch_size: 50,
        rounds: 200,
        beta: 0.9,
        reversed_drives_updates: false,
        algorithms: vec!["mfl".into(), "rmfl".into()],
        lr_grid: vec![0.1],
        seeds: vec![0],
        eval_every: 2,
        output_dir: PathBuf::from("unused"),
        diagnostics: false,
    }
}

fn summary_accuracy(summary: &experiment::Summary, algorithm: Algorithm) -> f64 {
    summary
        .rows
        .iter()
        .find(|r| r.metric == "accuracy" && r.algorithm == algorithm)
        .expect("summary holds an accuracy row per algorithm")
        .mean
}

#[test]
fn criterion_6_partition_coverage_and_entropy_ordering() {
    let labels = &mnist().0.labels;
    let num_classes = mnist().0.num_classes;
    let alphas = [0.01, 0.1, 1.0];
    let mut mean_entropy = [0.0; 3];
    let mut all_disjoint = true;
    for seed in 0..20 {
        for (slot, &alpha) in alphas.iter().enumerate() {
            for num_clients in [10, 100] {
                let partition = data::partition_dirichlet(
                    labels,
                    num_classes,
                    &PartitionConfig {
                        num_clients,
                        alpha,
                        seed,
                    },
                )
                .unwrap();
                let mut seen: Vec<usize> =
                    partition.clients.iter().flatten().copied().collect();
                seen.sort_unstable();
                all_disjoint &= seen == (0..labels.len()).collect::<Vec<_>>();
                if num_clients == 100 {
                    mean_entropy[slot] += partition.mean_label_entropy(labels) / 20.0;
                }
            }
        }
    }
    let ordered = mean_entropy[0] <= mean_entropy[1] && mean_entropy[1] <= mean_entropy[2];
    report(
        "criterion 6",
        all_disjoint && ordered,
        &format!(
            "partitions disjointly cover the dataset; mean label entropy {:.3} (a=0.01) <= {:.3} (a=0.1) <= {:.3} (a=1), 20 seeds",
            mean_entropy[0], mean_entropy[1], mean_entropy[2]
        ),
    );
}

#[test]
fn criterion_7_mnist_headline_accuracies() {
    let started = Instant::now();

    let dir_skewed = tmp_dir("mnist_alpha001");
    let cfg_skewed = mnist_experiment(0.01, &["mfl", "rmfl"], &dir_skewed);
    experiment::run_experiment(&cfg_skewed, None).unwrap();
    let records = experiment::load_all_records(&dir_skewed, &cfg_skewed).unwrap();
    let skewed = experiment::summarize(&cfg_skewed, &records).unwrap();
    let rmfl_skewed = summary_accuracy(&skewed, Algorithm::Rmfl);
    let mfl_skewed = summary_accuracy(&skewed, Algorithm::Mfl);

    let dir_mild = tmp_dir("mnist_alpha1");
    let cfg_mild = mnist_experiment(1.0, &["rmfl"], &dir_mild);
    experiment::run_experiment(&cfg_mild, None).unwrap();
    let records = experiment::load_all_records(&dir_mild, &cfg_mild).unwrap();
    let mild = experiment::summarize(&cfg_mild, &records).unwrap();
    let rmfl_mild = summary_accuracy(&mild, Algorithm::Rmfl);

    let gap = rmfl_skewed - mfl_skewed;
    let ok = (rmfl_skewed - 0.920).abs() <= 0.05 && gap >= 0.02 && (rmfl_mild - 0.940).abs() <= 0.05;
    report(
        "criterion 7",
        ok,
        &format!(
            "alpha=0.01: rmfl {rmfl_skewed:.4} (want 0.920±0.05, lr {}), mfl {mfl_skewed:.4} (lr {}), gap {gap:+.4} (want >= +0.02); alpha=1: rmfl {rmfl_mild:.4} (want 0.940±0.05, lr {}); {:.0}s",
            skewed.best_lrs[&Algorithm::Rmfl],
            skewed.best_lrs[&Algorithm::Mfl],
            mild.best_lrs[&Algorithm::Rmfl],
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_8_advantage_grows_with_local_epochs() {
    let started = Instant::now();
    let mut gaps = Vec::new();
    let mut details = Vec::new();
    let mut wins_ok = true;
    for &epochs in &[2usize, 5, 10] {
        let dir = tmp_dir(&format!("syn_epochs{epochs}"));
        let cfg = ExperimentConfig {
            separation: SYN_SEPARATION,
            num_clients: SYN_CLIENTS,
            clients_per_round: SYN_ACTIVE,
            local_epochs: epochs,
            batch_size: SYN_BATCH,
            rounds: SYN_ROUNDS,
            lr_grid: vec![SYN_LR],
            seeds: (0..10).collect(),
            eval_every: 2,
            output_dir: dir.clone(),
            ..synthetic_defaults()
        };
        experiment::run_experiment(&cfg, None).unwrap();
        let records = experiment::load_all_records(&dir, &cfg).unwrap();
        let acc = |algorithm: Algorithm, seed: u64| {
            let cell: Vec<experiment::RoundRecord> = records
                .iter()
                .filter(|r| r.algorithm == algorithm && r.seed == seed)
                .cloned()
                .collect();
            experiment::final_window_mean(&cell, |r| r.test_accuracy)
        };
        let mut wins = 0;
        let mut gap_sum = 0.0;
        for &seed in &cfg.seeds {
            let rmfl = acc(Algorithm::Rmfl, seed);
            let mfl = acc(Algorithm::Mfl, seed);
            wins += (rmfl >= mfl) as usize;
            gap_sum += rmfl - mfl;
        }
        let gap = gap_sum / cfg.seeds.len() as f64;
        wins_ok &= wins >= 8;
        gaps.push(gap);
        details.push(format!("E={epochs}: {wins}/10 wins, mean gap {gap:+.4}"));
    }
    let elapsed = started.elapsed().as_secs_f64();
    let nondecreasing = gaps[1] >= gaps[0] && gaps[2] >= gaps[1];
    report(
        "criterion 8",
        wins_ok && nondecreasing && elapsed < 900.0,
        &format!("{}; {elapsed:.0}s (< 900s)", details.join("; ")),
    );
}

#[test]
fn criterion_9_gradient_divergence_grows_with_local_step() {
    let started = Instant::now();
    // 600-sample shards, batch 20 and 1 epoch make exactly 30 local steps.
    let cfg = ExperimentConfig {
        dataset: "mnist".into(),
        mnist_dir: Some(mnist_dir()),
        local_epochs: 1,
        batch_size: 20,
        rounds: 100,
        algorithms: vec!["fedavg".into()],
        lr_grid: vec![DIVERGENCE_LR],
        seeds: vec![0],
        output_dir: tmp_dir("divergence"),
        diagnostics: true,
        ..synthetic_defaults()
    };
    let cell = experiment::CellKey {
        algorithm: Algorithm::FedAvg,
        lr: DIVERGENCE_LR,
        seed: 0,
    };
    let records = experiment::run_diagnostics(&cfg, cell).unwrap();

    // The trend statistic aggregates mean_cosine over the round window per
    // step index, then rank-correlates against k (the divergence_trend
    // definition, restricted to rounds 20-100).
    let windowed_trend = |value: fn(&DivergenceRecord) -> f64| -> f64 {
        let max_k = records.iter().map(|r| r.k).max().unwrap();
        let mut ks = Vec::new();
        let mut means = Vec::new();
        for k in 1..=max_k {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| (20..=100).contains(&r.round) && r.k == k)
                .map(value)
                .collect();
            assert!(vals.len() == 81, "step {k} seen in {} rounds", vals.len());
            ks.push(k as f64);
            means.push(vals.iter().sum::<f64>() / vals.len() as f64);
        }
        assert!(ks.len() == 30, "expected 30 local steps, got {}", ks.len());
        spearman_oracle(&ks, &means)
    };
    let per_round_mean = |value: fn(&DivergenceRecord) -> f64| -> f64 {
        let mut sum = 0.0;
        let mut rounds = 0;
        for round in 20..=100 {
            let (ks, vals): (Vec<f64>, Vec<f64>) = records
                .iter()
                .filter(|r| r.round == round)
                .map(|r| (r.k as f64, value(r)))
                .unzip();
            assert!(ks.len() >= 25, "round {round} has only {} steps", ks.len());
            sum += spearman_oracle(&ks, &vals);
            rounds += 1;
        }
        sum / rounds as f64
    };
    let cosine_trend = windowed_trend(|r| r.mean_cosine);
    let projection_trend = windowed_trend(|r| r.mean_projection);
    report(
        "criterion 9",
        cosine_trend <= -0.3 && projection_trend <= -0.3,
        &format!(
            "Spearman(step, round-averaged similarity) over rounds 20-100: cosine {cosine_trend:+.3}, projection {projection_trend:+.3} (both <= -0.3); per-round correlation means {:+.3}/{:+.3}; {:.0}s",
            per_round_mean(|r| r.mean_cosine),
            per_round_mean(|r| r.mean_projection),
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_10_round_csvs_are_thread_count_invariant() {
    let base = ExperimentConfig {
        dataset: "mnist".into(),
        mnist_dir: Some(mnist_dir()),
        alpha: 0.1,
        batch_size: 600,
        rounds: 12,
        algorithms: vec!["rmfl".into()],
        lr_grid: vec![0.1],
        seeds: vec![0],
        eval_every: 3,
        output_dir: PathBuf::from("unused"),
        ..synthetic_defaults()
    };
    let mut outputs = Vec::new();
    for threads in [1usize, 4] {
        let dir = tmp_dir(&format!("determinism_t{threads}"));
        let _ = std::fs::remove_dir_all(&dir);
        let cfg = ExperimentConfig {
            output_dir: dir.clone(),
            ..base.clone()
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| experiment::run_experiment(&cfg, None)).unwrap();
        let csv = cfg.cells().unwrap()[0].round_csv(&dir);
        outputs.push(std::fs::read(csv).unwrap());
    }
    report(
        "criterion 10",
        outputs[0] == outputs[1],
        "fresh 1-thread and 4-thread executions of one config produce byte-identical round CSVs",
    );
}
