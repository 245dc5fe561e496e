//! SGD with three momentum flavors: none, the standard cumulative buffer,
//! and a reversed exponential-decay estimate of the buffer's history.
//!
//! The standard buffer follows `v <- beta * v + g`, so after `t + 1` steps
//! the most recent gradient carries the largest weight. The reversed
//! estimate flips that emphasis: with initial momentum `v0` and gradients
//! `g_0..g_t` it is
//!
//! ```text
//! r_t = (1 - beta) * v0 + (1 - beta) * sum_{i < t} beta^i * g_i + beta^t * g_t
//! ```
//!
//! which weights early gradients the most. Both are maintained
//! incrementally; the reversed estimate uses the O(1)-per-step recurrence
//! `r_t = r_{t-1} + beta^t * (g_t - g_{t-1})`.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};

/// Which momentum quantity a client maintains and transmits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentumScheme {
    /// Plain SGD; nothing is transmitted.
    None,
    /// The live buffer `v` is transmitted.
    Standard,
    /// The reversed estimate `r` is transmitted; `v` still drives descent
    /// unless configured otherwise.
    Reversed,
}

/// Learning-rate and momentum hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub beta: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and positive, got {}",
                self.lr
            )));
        }
        validate_beta(self.beta)
    }
}

fn validate_beta(beta: f64) -> Result<()> {
    if !(beta.is_finite() && (0.0..1.0).contains(&beta)) {
        return Err(Error::InvalidConfig(format!(
            "momentum coefficient must lie in [0, 1), got {beta}"
        )));
    }
    Ok(())
}

/// Momentum buffers for one client, seeded with the server-broadcast `v0`.
#[derive(Debug, Clone)]
pub struct MomentumState {
    pub beta: f64,
    /// Standard buffer, `v <- beta * v + g` each step; starts at `v0`.
    pub v: Array1<f64>,
    /// The initial momentum this state was seeded with.
    pub v0: Array1<f64>,
    /// Reversed estimate; meaningful once at least one step was observed.
    pub r: Array1<f64>,
    last_grad: Array1<f64>,
    /// Always equals `beta^step`.
    pub beta_pow: f64,
    /// Number of gradients observed so far.
    pub step: usize,
}

impl MomentumState {
    pub fn new(beta: f64, v0: Array1<f64>) -> Result<Self> {
        validate_beta(beta)?;
        let dim = v0.len();
        Ok(Self {
            beta,
            v: v0.clone(),
            v0,
            r: Array1::zeros(dim),
            last_grad: Array1::zeros(dim),
            beta_pow: 1.0,
            step: 0,
        })
    }

    pub fn zeros(beta: f64, dim: usize) -> Result<Self> {
        Self::new(beta, Array1::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    /// Feeds the next gradient into both buffers.
    pub fn observe(&mut self, grad: ArrayView1<f64>) -> Result<()> {
        if grad.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "gradient",
                expected: self.dim(),
                actual: grad.len(),
            });
        }
        self.v *= self.beta;
        self.v += &grad;
        if self.step == 0 {
            ndarray::Zip::from(&mut self.r)
                .and(&self.v0)
                .and(&grad)
                .for_each(|r, &v0, &g| *r = (1.0 - self.beta) * v0 + g);
        } else {
            let coeff = self.beta_pow;
            ndarray::Zip::from(&mut self.r)
                .and(&grad)
                .and(&self.last_grad)
                .for_each(|r, &g, &prev| *r += coeff * (g - prev));
        }
        self.last_grad.assign(&grad);
        self.beta_pow *= self.beta;
        self.step += 1;
        Ok(())
    }

    /// The reversed estimate, defined once a step has been observed.
    pub fn reversed_estimate(&self) -> Result<&Array1<f64>> {
        if self.step == 0 {
            return Err(Error::MomentumNotStarted);
        }
        Ok(&self.r)
    }
}

/// Per-client local optimizer: applies descent steps and exposes the
/// momentum value the client would transmit back to the server.
#[derive(Debug, Clone)]
pub struct ClientOptimizer {
    lr: f64,
    scheme: MomentumScheme,
    /// When true, the reversed scheme descends along `r` instead of `v`.
    reversed_drives_updates: bool,
    state: MomentumState,
}

impl ClientOptimizer {
    pub fn new(
        config: &SgdConfig,
        scheme: MomentumScheme,
        reversed_drives_updates: bool,
        v0: Array1<f64>,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            lr: config.lr,
            scheme,
            reversed_drives_updates,
            state: MomentumState::new(config.beta, v0)?,
        })
    }

    pub fn state(&self) -> &MomentumState {
        &self.state
    }

    /// One descent step: observes the gradient, then moves the parameters.
    pub fn step(&mut self, params: &mut Array1<f64>, grad: ArrayView1<f64>) -> Result<()> {
        if params.len() != self.state.dim() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.state.dim(),
                actual: params.len(),
            });
        }
        match self.scheme {
            MomentumScheme::None => {
                params.scaled_add(-self.lr, &grad);
            }
            MomentumScheme::Standard => {
                self.state.observe(grad)?;
                params.scaled_add(-self.lr, &self.state.v);
            }
            MomentumScheme::Reversed => {
                self.state.observe(grad)?;
                if self.reversed_drives_updates {
                    params.scaled_add(-self.lr, &self.state.r);
                } else {
                    params.scaled_add(-self.lr, &self.state.v);
                }
            }
        }
        Ok(())
    }

    /// The momentum vector this client reports to the server: the live buffer
    /// for the standard scheme, the reversed estimate for the reversed scheme,
    /// and a zero vector when no momentum is used.
    pub fn transmitted_momentum(&self) -> Result<Array1<f64>> {
        match self.scheme {
            MomentumScheme::None => Ok(Array1::zeros(self.state.dim())),
            MomentumScheme::Standard => {
                if self.state.step == 0 {
                    return Err(Error::MomentumNotStarted);
                }
                Ok(self.state.v.clone())
            }
            MomentumScheme::Reversed => Ok(self.state.reversed_estimate()?.clone()),
        }
    }
}
