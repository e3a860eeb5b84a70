//! Multi-positive contrastive objectives over a multiviewed batch.
//!
//! For view `i` with positives `P(i)` (same group, excluding `i`) and
//! negatives `A(i)` (other groups), and logits `t_ij = z_i·z_j / τ`:
//!
//! ```text
//! naive: l(i) = -1/|P(i)| Σ_p log( e^{t_ip} / (e^{t_ip} + Σ_a e^{t_ia}) )
//! dcl:   l(i) = -1/|P(i)| Σ_p log( e^{t_ip} /            Σ_a e^{t_ia}  )
//! ```
//!
//! and the batch loss is the mean of `l(i)` over all `2B` views. The
//! decoupled variant drops the positive from its own denominator and can go
//! negative. Index sets are derived from group labels, so any layout works.

pub mod oracle;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real;

pub use oracle::oracle_loss;

/// Unit-norm tolerance accepted by [`EmbeddingSet::new`] and [`similarity`].
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Added to row norms before division in [`l2_normalize_rows`].
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("row {row} has norm {norm}, expected 1")]
    NotNormalized { row: usize, norm: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no negatives: a batch needs at least two groups")]
    NoNegatives,
    #[error("view {0} has no positive")]
    NoPositives(usize),
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Naive,
    Dcl,
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossVariant::Naive => "naive",
            LossVariant::Dcl => "dcl",
        })
    }
}

impl std::str::FromStr for LossVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(LossVariant::Naive),
            "dcl" => Ok(LossVariant::Dcl),
            other => Err(format!("unknown loss variant `{other}` (expected naive or dcl)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub variant: LossVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.1, variant: LossVariant::Dcl }
    }
}

impl LossConfig {
    pub fn new(tau: f64, variant: LossVariant) -> Self {
        Self { tau, variant }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.tau > 0.0 && self.tau.is_finite() {
            Ok(())
        } else {
            Err(LossError::Temperature(self.tau))
        }
    }
}

/// Unit-normalized projections of a multiviewed batch with their group labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    z: Array2<f64>,
    group: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(z: Array2<f64>, group: Vec<usize>) -> Result<Self, LossError> {
        if z.nrows() != group.len() {
            return Err(LossError::Shape(format!(
                "{} rows but {} group labels",
                z.nrows(),
                group.len()
            )));
        }
        if z.ncols() < 2 {
            return Err(LossError::Shape(format!("embedding dim {} < 2", z.ncols())));
        }
        check_unit_rows(z.view())?;
        let set = Self { z, group };
        set.check_groups()?;
        Ok(set)
    }

    /// Normalizes raw rows first.
    pub fn from_raw(raw: ArrayView2<f64>, group: Vec<usize>) -> Result<Self, LossError> {
        let (z, _) = l2_normalize_rows(raw);
        Self::new(z, group)
    }

    fn check_groups(&self) -> Result<(), LossError> {
        let first = self.group.first().copied();
        if self.group.iter().all(|&g| Some(g) == first) {
            return Err(LossError::NoNegatives);
        }
        for (i, &g) in self.group.iter().enumerate() {
            if self.group.iter().filter(|&&h| h == g).count() < 2 {
                return Err(LossError::NoPositives(i));
            }
        }
        Ok(())
    }

    pub fn z(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    pub fn groups(&self) -> &[usize] {
        &self.group
    }

    pub fn len(&self) -> usize {
        self.group.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }
}

fn check_unit_rows(z: ArrayView2<f64>) -> Result<(), LossError> {
    for (row, r) in z.axis_iter(Axis(0)).enumerate() {
        let norm = r.dot(&r).sqrt();
        if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(LossError::NotNormalized { row, norm });
        }
    }
    Ok(())
}

/// Row-wise L2 normalization. Returns the unit rows and the (epsilon-guarded)
/// norms needed by [`l2_normalize_backward`].
pub fn l2_normalize_rows(raw: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    real::normalize_rows(raw, NORM_EPSILON)
}

/// Pulls a gradient with respect to unit rows `z = x/‖x‖` back to the raw
/// rows.
pub fn l2_normalize_backward(z: ArrayView2<f64>, norms: &[f64], dz: ArrayView2<f64>) -> Array2<f64> {
    real::normalize_rows_backward(z, norms, dz)
}

/// Pairwise inner products of unit rows.
pub fn similarity(z: ArrayView2<f64>) -> Result<Array2<f64>, LossError> {
    check_unit_rows(z)?;
    Ok(z.dot(&z.t()))
}

pub fn loss(e: &EmbeddingSet, cfg: &LossConfig) -> Result<f64, LossError> {
    Ok(loss_and_grad(e, cfg)?.0)
}

pub fn loss_naive(e: &EmbeddingSet, tau: f64) -> Result<f64, LossError> {
    loss(e, &LossConfig::new(tau, LossVariant::Naive))
}

pub fn loss_dcl(e: &EmbeddingSet, tau: f64) -> Result<f64, LossError> {
    loss(e, &LossConfig::new(tau, LossVariant::Dcl))
}

/// Gradient of the batch loss with respect to the unit rows of `e`, treating
/// them as free variables.
pub fn loss_gradient(e: &EmbeddingSet, cfg: &LossConfig) -> Result<Array2<f64>, LossError> {
    Ok(loss_and_grad(e, cfg)?.1)
}

/// Loss and gradient with respect to raw, unnormalized rows; normalization is
/// part of the objective.
pub fn loss_and_grad_raw(
    raw: ArrayView2<f64>,
    group: Vec<usize>,
    cfg: &LossConfig,
) -> Result<(f64, Array2<f64>), LossError> {
    let (z, norms) = l2_normalize_rows(raw);
    let e = EmbeddingSet::new(z, group)?;
    let (value, dz) = loss_and_grad(&e, cfg)?;
    Ok((value, l2_normalize_backward(e.z(), &norms, dz.view())))
}

/// Loss and its gradient with respect to the unit rows.
///
/// Logits are shifted by their per-row maximum before exponentiation. The
/// gradient is assembled through `W = ∂L/∂t`: `∂L/∂Z = (W + Wᵀ) Z / τ`.
pub fn loss_and_grad(e: &EmbeddingSet, cfg: &LossConfig) -> Result<(f64, Array2<f64>), LossError> {
    cfg.validate()?;
    let n = e.len();
    let tau = cfg.tau;
    let logits = e.z.dot(&e.z.t()) / tau;
    let groups = &e.group;
    let mut weights = Array2::<f64>::zeros((n, n));
    let mut total = 0.0;

    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    for i in 0..n {
        positives.clear();
        negatives.clear();
        for j in 0..n {
            if j == i {
                continue;
            }
            if groups[j] == groups[i] {
                positives.push(j);
            } else {
                negatives.push(j);
            }
        }
        let row = logits.row(i);
        let shift = positives
            .iter()
            .chain(negatives.iter())
            .map(|&j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        // Shifted negative exponentials and their sum.
        let neg_exp: Vec<f64> = negatives.iter().map(|&a| (row[a] - shift).exp()).collect();
        let neg_sum: f64 = neg_exp.iter().sum();
        let inv_p = 1.0 / positives.len() as f64;
        let mut w = weights.row_mut(i);

        match cfg.variant {
            LossVariant::Naive => {
                let mut li = 0.0;
                let mut neg_coeff = 0.0;
                for &p in &positives {
                    let pos_exp = (row[p] - shift).exp();
                    let denom = pos_exp + neg_sum;
                    li += row[p] - shift - denom.ln();
                    w[p] = -inv_p * (1.0 - pos_exp / denom);
                    neg_coeff += inv_p / denom;
                }
                for (&a, &ea) in negatives.iter().zip(&neg_exp) {
                    w[a] = ea * neg_coeff;
                }
                total += -li * inv_p;
            }
            LossVariant::Dcl => {
                let log_neg = shift + neg_sum.ln();
                let mean_pos = positives.iter().map(|&p| row[p]).sum::<f64>() * inv_p;
                total += log_neg - mean_pos;
                for &p in &positives {
                    w[p] = -inv_p;
                }
                for (&a, &ea) in negatives.iter().zip(&neg_exp) {
                    w[a] = ea / neg_sum;
                }
            }
        }
    }

    let scale = 1.0 / (n as f64 * tau);
    let sym = &weights + &weights.t();
    let grad = sym.dot(&e.z) * scale;
    Ok((total / n as f64, grad))
}
