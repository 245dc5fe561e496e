//! Classification metrics and gradient-divergence diagnostics.

use ndarray::{Array1, Array2, ArrayView1};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, MlpArchitecture};

fn check_pair(predictions: &[usize], labels: &[usize]) -> Result<()> {
    if predictions.is_empty() {
        return Err(Error::Empty {
            what: "prediction set",
        });
    }
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "prediction count",
            expected: labels.len(),
            actual: predictions.len(),
        });
    }
    Ok(())
}

/// Fraction of predictions equal to their labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(predictions, labels)?;
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Confusion matrix with one row per true class, one column per prediction.
pub fn confusion_matrix(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<Array2<usize>> {
    check_pair(predictions, labels)?;
    let mut matrix = Array2::zeros((num_classes, num_classes));
    for (&p, &l) in predictions.iter().zip(labels) {
        if let Some(&bad) = [p, l].iter().find(|&&v| v >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        matrix[[l, p]] += 1;
    }
    Ok(matrix)
}

/// Unweighted mean of per-class F1 scores over all `num_classes` classes.
/// Precision, recall, and F1 are taken as zero when their denominator is zero,
/// so classes absent from both labels and predictions contribute zero.
pub fn macro_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    let matrix = confusion_matrix(predictions, labels, num_classes)?;
    let mut total = 0.0;
    for class in 0..num_classes {
        let tp = matrix[[class, class]] as f64;
        let fp = matrix.column(class).sum() as f64 - tp;
        let fn_ = matrix.row(class).sum() as f64 - tp;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if precision + recall > 0.0 {
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(total / num_classes as f64)
}

/// Loss, accuracy, and macro F1 of a model over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

pub fn evaluate_model(
    arch: &MlpArchitecture,
    params: ArrayView1<f64>,
    dataset: &Dataset,
) -> Result<EvalMetrics> {
    let loss = nn::mean_loss(arch, params, dataset.features.view(), &dataset.labels)?;
    let predictions = nn::predict_all(arch, params, dataset.features.view())?;
    Ok(EvalMetrics {
        loss,
        accuracy: accuracy(&predictions, &dataset.labels)?,
        macro_f1: macro_f1(&predictions, &dataset.labels, dataset.num_classes)?,
    })
}

/// How far client gradients point away from their mean at one local step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDivergence {
    /// Mean over clients of `cos(g_i, mean_g)`; zero-norm gradients contribute 0.
    pub mean_cosine: f64,
    /// Mean over clients of the scalar projection of `g_i` onto `mean_g`.
    pub mean_projection: f64,
    pub num_clients: usize,
}

/// Cosine and projection statistics of client gradients against their mean.
pub fn step_divergence(grads: &[Array1<f64>]) -> Result<StepDivergence> {
    if grads.is_empty() {
        return Err(Error::Empty {
            what: "gradient set",
        });
    }
    let dim = grads[0].len();
    if let Some(bad) = grads.iter().find(|g| g.len() != dim) {
        return Err(Error::DimensionMismatch {
            what: "gradient",
            expected: dim,
            actual: bad.len(),
        });
    }
    let mut mean = Array1::<f64>::zeros(dim);
    for g in grads {
        mean += g;
    }
    mean /= grads.len() as f64;
    let mean_norm = mean.dot(&mean).sqrt();
    if mean_norm == 0.0 {
        return Err(Error::ZeroMeanGradient);
    }
    let mut cosine = 0.0;
    let mut projection = 0.0;
    for g in grads {
        let dot = g.dot(&mean);
        let norm = g.dot(g).sqrt();
        if norm > 0.0 {
            cosine += dot / (norm * mean_norm);
        }
        projection += dot / mean_norm;
    }
    Ok(StepDivergence {
        mean_cosine: cosine / grads.len() as f64,
        mean_projection: projection / grads.len() as f64,
        num_clients: grads.len(),
    })
}

/// Divergence statistics for one local step of one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceRecord {
    pub round: usize,
    /// 1-based local step index.
    pub k: usize,
    pub mean_cosine: f64,
    pub mean_projection: f64,
    pub num_clients: usize,
}

/// Trend of divergence against local step, over a set of records.
///
/// For each statistic, records are first averaged per local step `k` across
/// rounds, then the Spearman correlation of `k` against the averaged value is
/// taken. Err when fewer than 5 distinct steps are covered.
pub fn divergence_trend(records: &[DivergenceRecord]) -> Result<(f64, f64)> {
    let mut steps: Vec<usize> = records.iter().map(|r| r.k).collect();
    steps.sort_unstable();
    steps.dedup();
    if steps.len() < 5 {
        return Err(Error::InsufficientDistinctSteps {
            distinct: steps.len(),
            required: 5,
        });
    }
    let ks: Vec<f64> = steps.iter().map(|&k| k as f64).collect();
    let mean_per_step = |value: fn(&DivergenceRecord) -> f64| -> Vec<f64> {
        steps
            .iter()
            .map(|&k| {
                let at_k: Vec<f64> = records
                    .iter()
                    .filter(|r| r.k == k)
                    .map(value)
                    .collect();
                at_k.iter().sum::<f64>() / at_k.len() as f64
            })
            .collect()
    };
    let cosine_trend = spearman(&ks, &mean_per_step(|r| r.mean_cosine))?;
    let projection_trend = spearman(&ks, &mean_per_step(|r| r.mean_projection))?;
    Ok((cosine_trend, projection_trend))
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("values are finite"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // 1-based ranks; ties share the average of their positions.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either variable is completely tied (zero rank variance).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            what: "rank correlation inputs",
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    let distinct = |vals: &[f64]| {
        let mut sorted: Vec<f64> = vals.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("values are finite"));
        sorted.dedup();
        sorted.len()
    };
    if xs.len() < 2 {
        return Err(Error::InsufficientDistinctSteps {
            distinct: xs.len(),
            required: 2,
        });
    }
    if distinct(xs) < 2 || distinct(ys) < 2 {
        return Ok(0.0);
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mean) * (b - mean);
        var_x += (a - mean) * (a - mean);
        var_y += (b - mean) * (b - mean);
    }
    Ok(cov / (var_x * var_y).sqrt())
}
