//! Two-layer MLP with softmax output, operating on flat parameter vectors.
//!
//! Parameters live in a single `Array1<f64>` laid out as
//! `[W1 row-major (input x hidden), b1, W2 row-major (hidden x output), b2]`,
//! so optimizer and aggregation code can treat a model as one vector.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shape of the network: `input_dim -> hidden_dim (ReLU) -> output_dim (softmax)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "all layer dimensions must be positive, got {input_dim}x{hidden_dim}x{output_dim}"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            output_dim,
        })
    }

    /// Total length of the flat parameter vector.
    pub fn param_count(&self) -> usize {
        self.input_dim * self.hidden_dim
            + self.hidden_dim
            + self.hidden_dim * self.output_dim
            + self.output_dim
    }

    fn check_params(&self, params: ArrayView1<f64>) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        Ok(())
    }

    fn check_batch(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "input features",
                expected: self.input_dim,
                actual: x.ncols(),
            });
        }
        if x.nrows() == 0 {
            return Err(Error::Empty { what: "batch" });
        }
        if labels.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                what: "label count",
                expected: x.nrows(),
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.output_dim) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes: self.output_dim,
            });
        }
        Ok(())
    }
}

struct Layers<'a> {
    w1: ndarray::ArrayView2<'a, f64>,
    b1: ndarray::ArrayView1<'a, f64>,
    w2: ndarray::ArrayView2<'a, f64>,
    b2: ndarray::ArrayView1<'a, f64>,
}

fn split_params<'a>(arch: &MlpArchitecture, params: &'a ArrayView1<'a, f64>) -> Layers<'a> {
    let (i, h, o) = (arch.input_dim, arch.hidden_dim, arch.output_dim);
    let w1_end = i * h;
    let b1_end = w1_end + h;
    let w2_end = b1_end + h * o;
    Layers {
        w1: params
            .slice(s![..w1_end])
            .into_shape_with_order((i, h))
            .expect("w1 slice reshapes"),
        b1: params.slice(s![w1_end..b1_end]),
        w2: params
            .slice(s![b1_end..w2_end])
            .into_shape_with_order((h, o))
            .expect("w2 slice reshapes"),
        b2: params.slice(s![w2_end..]),
    }
}

/// Glorot-uniform weights (`+-sqrt(6 / (fan_in + fan_out))` per layer), zero biases.
pub fn init_params(arch: &MlpArchitecture, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let mut params = Array1::zeros(arch.param_count());
    let (i, h, o) = (arch.input_dim, arch.hidden_dim, arch.output_dim);
    let w1_end = i * h;
    let b1_end = w1_end + h;
    let w2_end = b1_end + h * o;
    let bound1 = (6.0 / (i + h) as f64).sqrt();
    for v in params.slice_mut(s![..w1_end]) {
        *v = rng.random_range(-bound1..bound1);
    }
    let bound2 = (6.0 / (h + o) as f64).sqrt();
    for v in params.slice_mut(s![b1_end..w2_end]) {
        *v = rng.random_range(-bound2..bound2);
    }
    params
}

fn softmax_in_place(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// Softmax class probabilities for a batch, one row per sample.
pub fn forward(
    arch: &MlpArchitecture,
    params: ArrayView1<f64>,
    x: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    arch.check_params(params)?;
    if x.ncols() != arch.input_dim {
        return Err(Error::DimensionMismatch {
            what: "input features",
            expected: arch.input_dim,
            actual: x.ncols(),
        });
    }
    let layers = split_params(arch, &params);
    let mut hidden = x.dot(&layers.w1) + layers.b1;
    hidden.mapv_inplace(|v| v.max(0.0));
    let mut logits = hidden.dot(&layers.w2) + layers.b2;
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// Mean cross-entropy over the batch and its gradient as a flat vector.
pub fn loss_and_grad(
    arch: &MlpArchitecture,
    params: ArrayView1<f64>,
    x: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(f64, Array1<f64>)> {
    arch.check_params(params)?;
    arch.check_batch(x, labels)?;
    let layers = split_params(arch, &params);
    let n = x.nrows();

    let hidden_pre = x.dot(&layers.w1) + layers.b1;
    let hidden = hidden_pre.mapv(|v| v.max(0.0));
    let mut probs = hidden.dot(&layers.w2) + layers.b2;
    softmax_in_place(&mut probs);

    let mut loss = 0.0;
    for (row, &label) in probs.rows().into_iter().zip(labels) {
        loss -= row[label].max(f64::MIN_POSITIVE).ln();
    }
    loss /= n as f64;

    // d(loss)/d(logits) = (probs - onehot) / n; reuse the probs buffer.
    let mut dlogits = probs;
    for (mut row, &label) in dlogits.rows_mut().into_iter().zip(labels) {
        row[label] -= 1.0;
    }
    dlogits.mapv_inplace(|v| v / n as f64);

    let g_w2 = hidden.t().dot(&dlogits);
    let g_b2 = dlogits.sum_axis(Axis(0));
    let mut dhidden = dlogits.dot(&layers.w2.t());
    ndarray::Zip::from(&mut dhidden)
        .and(&hidden_pre)
        .for_each(|d, &pre| {
            if pre <= 0.0 {
                *d = 0.0;
            }
        });
    let g_w1 = x.t().dot(&dhidden);
    let g_b1 = dhidden.sum_axis(Axis(0));

    let mut grad = Array1::zeros(arch.param_count());
    let (i, h, o) = (arch.input_dim, arch.hidden_dim, arch.output_dim);
    let w1_end = i * h;
    let b1_end = w1_end + h;
    let w2_end = b1_end + h * o;
    grad.slice_mut(s![..w1_end])
        .assign(&g_w1.into_shape_with_order(w1_end).expect("w1 grad flattens"));
    grad.slice_mut(s![w1_end..b1_end]).assign(&g_b1);
    grad.slice_mut(s![b1_end..w2_end])
        .assign(&g_w2.into_shape_with_order(h * o).expect("w2 grad flattens"));
    grad.slice_mut(s![w2_end..]).assign(&g_b2);

    if let Some(index) = grad.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    Ok((loss, grad))
}

/// Predicted class per sample: argmax of the probabilities, ties to the lowest index.
pub fn predict(
    arch: &MlpArchitecture,
    params: ArrayView1<f64>,
    x: ArrayView2<f64>,
) -> Result<Vec<usize>> {
    let probs = forward(arch, params, x)?;
    Ok(argmax_rows(&probs))
}

pub(crate) fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_val = row[0];
            for (idx, &v) in row.iter().enumerate().skip(1) {
                if v > best_val {
                    best = idx;
                    best_val = v;
                }
            }
            best
        })
        .collect()
}

/// Mean cross-entropy over a labeled set, evaluated in bounded-size batches.
pub fn mean_loss(
    arch: &MlpArchitecture,
    params: ArrayView1<f64>,
    x: ArrayView2<f64>,
    labels: &[usize],
) -> Result<f64> {
    arch.check_params(params)?;
    arch.check_batch(x, labels)?;
    let mut total = 0.0;
    for (chunk, chunk_labels) in batches(x, labels, 512) {
        let probs = forward(arch, params, chunk)?;
        for (row, &label) in probs.rows().into_iter().zip(chunk_labels) {
            total -= row[label].max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok(total / labels.len() as f64)
}

/// Predictions over a labeled set, evaluated in bounded-size batches.
pub fn predict_all(
    arch: &MlpArchitecture,
    params: ArrayView1<f64>,
    x: ArrayView2<f64>,
) -> Result<Vec<usize>> {
    arch.check_params(params)?;
    let mut out = Vec::with_capacity(x.nrows());
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + 512).min(x.nrows());
        out.extend(predict(arch, params, x.slice(s![start..end, ..]))?);
        start = end;
    }
    Ok(out)
}

fn batches<'a>(
    x: ArrayView2<'a, f64>,
    labels: &'a [usize],
    size: usize,
) -> impl Iterator<Item = (ArrayView2<'a, f64>, &'a [usize])> {
    let n = x.nrows();
    (0..n.div_ceil(size)).map(move |i| {
        let start = i * size;
        let end = ((i + 1) * size).min(n);
        (x.slice_move(s![start..end, ..]), &labels[start..end])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::stream_rng;
    use ndarray::Array2;
    use rand::Rng;

    fn small_arch() -> MlpArchitecture {
        MlpArchitecture::new(5, 4, 3).unwrap()
    }

    fn random_batch(
        arch: &MlpArchitecture,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Array2<f64>, Vec<usize>) {
        let x = Array2::from_shape_fn((n, arch.input_dim), |_| rng.random_range(-1.0..1.0));
        let labels = (0..n).map(|_| rng.random_range(0..arch.output_dim)).collect();
        (x, labels)
    }

    #[test]
    fn param_count_matches_layout() {
        assert_eq!(MlpArchitecture::new(2, 3, 2).unwrap().param_count(), 17);
        assert_eq!(
            MlpArchitecture::new(784, 128, 10).unwrap().param_count(),
            101_770
        );
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(MlpArchitecture::new(0, 3, 2).is_err());
        assert!(MlpArchitecture::new(2, 0, 2).is_err());
        assert!(MlpArchitecture::new(2, 3, 0).is_err());
    }

    #[test]
    fn init_bounds_and_zero_biases() {
        let arch = MlpArchitecture::new(784, 128, 10).unwrap();
        let params = init_params(&arch, &mut stream_rng(1, "init", 0, 0));
        let (i, h, o) = (784, 128, 10);
        let w1_end = i * h;
        let b1_end = w1_end + h;
        let w2_end = b1_end + h * o;
        let bound1 = (6.0 / (i + h) as f64).sqrt();
        let bound2 = (6.0 / (h + o) as f64).sqrt();
        assert!(params.slice(s![..w1_end]).iter().all(|v| v.abs() < bound1));
        assert!(params.slice(s![w1_end..b1_end]).iter().all(|&v| v == 0.0));
        assert!(params
            .slice(s![b1_end..w2_end])
            .iter()
            .all(|v| v.abs() < bound2));
        assert!(params.slice(s![w2_end..]).iter().all(|&v| v == 0.0));
        let w1 = params.slice(s![..w1_end]);
        let spread = w1.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - w1.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread > bound1);
    }

    #[test]
    fn init_is_deterministic_per_stream() {
        let arch = small_arch();
        let a = init_params(&arch, &mut stream_rng(9, "init", 0, 0));
        let b = init_params(&arch, &mut stream_rng(9, "init", 0, 0));
        let c = init_params(&arch, &mut stream_rng(10, "init", 0, 0));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn forward_rows_are_distributions() {
        let arch = small_arch();
        let mut rng = stream_rng(2, "test", 0, 0);
        let params = init_params(&arch, &mut rng);
        let (x, _) = random_batch(&arch, 6, &mut rng);
        let probs = forward(&arch, params.view(), x.view()).unwrap();
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        let arch = small_arch();
        let params = Array1::zeros(arch.param_count());
        let mut rng = stream_rng(3, "test", 0, 0);
        let (x, _) = random_batch(&arch, 4, &mut rng);
        let probs = forward(&arch, params.view(), x.view()).unwrap();
        for row in probs.rows() {
            for &p in row {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        // Uniform rows tie everywhere; argmax must break ties to class 0.
        assert_eq!(predict(&arch, params.view(), x.view()).unwrap(), vec![0; 4]);
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let arch = small_arch();
        let mut rng = stream_rng(4, "test", 0, 0);
        let params = init_params(&arch, &mut rng);
        let (x, labels) = random_batch(&arch, 7, &mut rng);
        let (_, grad) = loss_and_grad(&arch, params.view(), x.view(), &labels).unwrap();

        let step = 1e-4;
        for idx in 0..arch.param_count() {
            let mut plus = params.clone();
            plus[idx] += step;
            let mut minus = params.clone();
            minus[idx] -= step;
            let (lp, _) = loss_and_grad(&arch, plus.view(), x.view(), &labels).unwrap();
            let (lm, _) = loss_and_grad(&arch, minus.view(), x.view(), &labels).unwrap();
            let numeric = (lp - lm) / (2.0 * step);
            assert!(
                (grad[idx] - numeric).abs() < 1e-5,
                "component {idx}: analytic {} vs numeric {numeric}",
                grad[idx]
            );
        }
    }

    #[test]
    fn gradient_step_reduces_loss() {
        let arch = small_arch();
        let mut rng = stream_rng(5, "test", 0, 0);
        let mut params = init_params(&arch, &mut rng);
        let (x, labels) = random_batch(&arch, 16, &mut rng);
        let (before, grad) = loss_and_grad(&arch, params.view(), x.view(), &labels).unwrap();
        params.scaled_add(-0.5, &grad);
        let (after, _) = loss_and_grad(&arch, params.view(), x.view(), &labels).unwrap();
        assert!(after < before);
    }

    #[test]
    fn batched_helpers_match_single_shot() {
        let arch = small_arch();
        let mut rng = stream_rng(6, "test", 0, 0);
        let params = init_params(&arch, &mut rng);
        let (x, labels) = random_batch(&arch, 1100, &mut rng);
        let (whole, _) = loss_and_grad(&arch, params.view(), x.view(), &labels).unwrap();
        let chunked = mean_loss(&arch, params.view(), x.view(), &labels).unwrap();
        assert!((whole - chunked).abs() < 1e-12);
        assert_eq!(
            predict_all(&arch, params.view(), x.view()).unwrap(),
            predict(&arch, params.view(), x.view()).unwrap()
        );
    }

    #[test]
    fn shape_errors_are_reported() {
        let arch = small_arch();
        let params = Array1::zeros(arch.param_count());
        let bad_x = Array2::zeros((3, 9));
        assert!(matches!(
            forward(&arch, params.view(), bad_x.view()),
            Err(Error::DimensionMismatch { .. })
        ));
        let x = Array2::zeros((3, 5));
        assert!(matches!(
            loss_and_grad(&arch, params.view(), x.view(), &[0, 1]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            loss_and_grad(&arch, params.view(), x.view(), &[0, 1, 3]),
            Err(Error::LabelOutOfRange { .. })
        ));
        let short = Array1::zeros(5);
        assert!(matches!(
            forward(&arch, short.view(), x.view()),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
