//! Training objectives and their weighted combination.
//!
//! Classification-side losses return gradients with respect to the logits
//! that produced the probabilities, which is where the classifier backward
//! pass picks them up.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CsawError, Result};

/// Probability floor used inside `log` for the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmMode {
    Entropy,
    MinProb,
}

impl FromStr for DmMode {
    type Err = CsawError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(DmMode::Entropy),
            "min_prob" => Ok(DmMode::MinProb),
            other => Err(CsawError::Config(format!(
                "unknown diversity mode '{other}' (expected entropy or min_prob)"
            ))),
        }
    }
}

impl fmt::Display for DmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DmMode::Entropy => "entropy",
            DmMode::MinProb => "min_prob",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda_bt: f64,
    pub dm_mode: DmMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            lambda_bt: 5.1e-3,
            dm_mode: DmMode::Entropy,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CsawError::Config(format!("loss.alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.lambda_bt > 0.0 && self.lambda_bt.is_finite()) {
            return Err(CsawError::Config(format!(
                "loss.lambda_bt must be positive, got {}",
                self.lambda_bt
            )));
        }
        Ok(())
    }

    /// Coefficients of (ce, ssl, recon, dm) in the total.
    pub fn coefficients(&self) -> LossCoefficients {
        LossCoefficients {
            ce: 1.0,
            ssl: self.alpha,
            recon: self.alpha,
            dm: 1.0 - self.alpha,
        }
    }
}

/// Linear weights applied to each loss component when differentiating.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCoefficients {
    pub ce: f64,
    pub ssl: f64,
    pub recon: f64,
    pub dm: f64,
}

impl LossCoefficients {
    pub fn only_ce() -> Self {
        LossCoefficients { ce: 1.0, ssl: 0.0, recon: 0.0, dm: 0.0 }
    }
    pub fn only_ssl() -> Self {
        LossCoefficients { ce: 0.0, ssl: 1.0, recon: 0.0, dm: 0.0 }
    }
    pub fn only_recon() -> Self {
        LossCoefficients { ce: 0.0, ssl: 0.0, recon: 1.0, dm: 0.0 }
    }
    pub fn only_dm() -> Self {
        LossCoefficients { ce: 0.0, ssl: 0.0, recon: 0.0, dm: 1.0 }
    }

    pub fn combine(&self, ce: f64, ssl: f64, recon: f64, dm: f64) -> f64 {
        self.ce * ce + self.ssl * ssl + self.recon * recon + self.dm * dm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub ssl: f64,
    pub recon: f64,
    pub dm: f64,
    pub total: f64,
}

impl LossReport {
    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("ce", self.ce),
            ("ssl", self.ssl),
            ("recon", self.recon),
            ("dm", self.dm),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `ce + α (ssl + recon) + (1 − α) dm`.
pub fn total_loss(ce: f64, ssl: f64, recon: f64, dm: f64, weights: &LossWeights) -> LossReport {
    let a = weights.alpha;
    LossReport {
        ce,
        ssl,
        recon,
        dm,
        total: ce + a * (ssl + recon) + (1.0 - a) * dm,
    }
}

fn check_probs(probs: ArrayView2<'_, f64>) -> Result<()> {
    for (i, row) in probs.rows().into_iter().enumerate() {
        let s = row.sum();
        if !s.is_finite() || (s - 1.0).abs() > 1e-5 || row.iter().any(|p| *p < 0.0) {
            return Err(CsawError::InvalidArgument(format!(
                "probability row {i} is not a distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Mean negative log-probability of the true class.
pub fn cross_entropy(probs: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    check_probs(probs)?;
    if labels.len() != probs.nrows() || labels.is_empty() {
        return Err(CsawError::Shape(format!(
            "{} labels for {} probability rows",
            labels.len(),
            probs.nrows()
        )));
    }
    let k = probs.ncols();
    let mut sum = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(CsawError::UnknownClass { index: y, classes: k });
        }
        let p = probs[[i, y]];
        if p < PROB_FLOOR {
            log::debug!("true-class probability {p:e} clamped to {PROB_FLOOR:e} (row {i})");
        }
        sum -= p.max(PROB_FLOOR).ln();
    }
    Ok(sum / labels.len() as f64)
}

/// `∂ce/∂logits = (p − onehot(y)) / B`.
pub fn cross_entropy_grad_logits(probs: ArrayView2<'_, f64>, labels: &[usize]) -> Array2<f64> {
    let mut g = probs.to_owned();
    for (i, &y) in labels.iter().enumerate() {
        g[[i, y]] -= 1.0;
    }
    g / labels.len() as f64
}

fn entropy(row: ArrayView1<'_, f64>) -> f64 {
    -row.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

fn argmin(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &p) in row.iter().enumerate() {
        if p < row[best] {
            best = j;
        }
    }
    best
}

/// Batch mean of the row entropy, or of the row minimum.
pub fn diversity_loss(probs: ArrayView2<'_, f64>, mode: DmMode) -> Result<f64> {
    check_probs(probs)?;
    if probs.nrows() == 0 {
        return Err(CsawError::InvalidArgument("empty probability batch".into()));
    }
    let per_row = probs.rows().into_iter().map(|r| match mode {
        DmMode::Entropy => entropy(r),
        DmMode::MinProb => r[argmin(r)],
    });
    Ok(per_row.sum::<f64>() / probs.nrows() as f64)
}

pub fn diversity_grad_logits(probs: ArrayView2<'_, f64>, mode: DmMode) -> Array2<f64> {
    let b = probs.nrows() as f64;
    let mut g = Array2::zeros(probs.raw_dim());
    for (mut gr, p) in g.axis_iter_mut(Axis(0)).zip(probs.rows()) {
        match mode {
            DmMode::Entropy => {
                // ∂H/∂z_j = −p_j (ln p_j + H)
                let h = entropy(p);
                for (gj, &pj) in gr.iter_mut().zip(p.iter()) {
                    if pj > 0.0 {
                        *gj = -pj * (pj.ln() + h) / b;
                    }
                }
            }
            DmMode::MinProb => {
                let k = argmin(p);
                let pk = p[k];
                for (j, (gj, &pj)) in gr.iter_mut().zip(p.iter()).enumerate() {
                    let delta = if j == k { 1.0 } else { 0.0 };
                    *gj = pk * (delta - pj) / b;
                }
            }
        }
    }
    g
}

/// Batch-standardized columns (population standard deviation) and the stds.
fn standardize(z: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let b = z.nrows() as f64;
    let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
    let mut y = &z - &mean;
    let mut stds = Vec::with_capacity(z.ncols());
    for (d, mut col) in y.axis_iter_mut(Axis(1)).enumerate() {
        let var = col.dot(&col) / b;
        let sd = var.sqrt();
        if !(sd > 0.0) {
            return Err(CsawError::ZeroVariance(d));
        }
        col /= sd;
        stds.push(sd);
    }
    Ok((y, stds))
}

fn standardize_backward(y: &Array2<f64>, stds: &[f64], g: &Array2<f64>) -> Array2<f64> {
    let b = y.nrows() as f64;
    let mut dz = Array2::zeros(y.raw_dim());
    for d in 0..y.ncols() {
        let yc = y.column(d);
        let gc = g.column(d);
        let gm = gc.sum() / b;
        let gym = gc.dot(&yc) / b;
        let mut out = dz.column_mut(d);
        for i in 0..y.nrows() {
            out[i] = (gc[i] - gm - yc[i] * gym) / stds[d];
        }
    }
    dz
}

/// Cross-correlation of the standardized views, `(D, D)`.
pub fn cross_correlation(z1: ArrayView2<'_, f64>, z2: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_pair(z1, z2)?;
    let (y1, _) = standardize(z1)?;
    let (y2, _) = standardize(z2)?;
    Ok(y1.t().dot(&y2) / z1.nrows() as f64)
}

fn check_pair(z1: ArrayView2<'_, f64>, z2: ArrayView2<'_, f64>) -> Result<()> {
    if z1.dim() != z2.dim() {
        return Err(CsawError::Shape(format!("views {:?} and {:?} differ", z1.dim(), z2.dim())));
    }
    if z1.nrows() < 2 {
        return Err(CsawError::InvalidArgument(format!(
            "redundancy reduction needs a batch of at least 2, got {}",
            z1.nrows()
        )));
    }
    Ok(())
}

fn barlow_from_c(c: &Array2<f64>, lambda_bt: f64) -> f64 {
    let mut on = 0.0;
    let mut off = 0.0;
    for ((i, j), &v) in c.indexed_iter() {
        if i == j {
            on += (1.0 - v) * (1.0 - v);
        } else {
            off += v * v;
        }
    }
    on + lambda_bt * off
}

/// `Σ_i (1 − C_ii)² + λ Σ_{i≠j} C_ij²`.
pub fn barlow_twins(z1: ArrayView2<'_, f64>, z2: ArrayView2<'_, f64>, lambda_bt: f64) -> Result<f64> {
    Ok(barlow_from_c(&cross_correlation(z1, z2)?, lambda_bt))
}

/// Loss value with gradients with respect to both views.
pub fn barlow_twins_grad(
    z1: ArrayView2<'_, f64>,
    z2: ArrayView2<'_, f64>,
    lambda_bt: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_pair(z1, z2)?;
    let b = z1.nrows() as f64;
    let (y1, s1) = standardize(z1)?;
    let (y2, s2) = standardize(z2)?;
    let c = y1.t().dot(&y2) / b;
    let gc = Array2::from_shape_fn(c.raw_dim(), |(i, j)| {
        if i == j {
            -2.0 * (1.0 - c[[i, j]])
        } else {
            2.0 * lambda_bt * c[[i, j]]
        }
    });
    let gy1 = y2.dot(&gc.t()) / b;
    let gy2 = y1.dot(&gc) / b;
    Ok((
        barlow_from_c(&c, lambda_bt),
        standardize_backward(&y1, &s1, &gy1),
        standardize_backward(&y2, &s2, &gy2),
    ))
}

fn check_images(x_hat: &[Array3<f64>], target: &[ArrayView3<'_, f64>]) -> Result<()> {
    if x_hat.len() != target.len() || x_hat.is_empty() {
        return Err(CsawError::Shape(format!(
            "{} reconstructions for {} targets",
            x_hat.len(),
            target.len()
        )));
    }
    for (i, (a, b)) in x_hat.iter().zip(target).enumerate() {
        if a.dim() != b.dim() {
            return Err(CsawError::Shape(format!(
                "item {i}: reconstruction {:?} vs target {:?}",
                a.dim(),
                b.dim()
            )));
        }
    }
    Ok(())
}

/// `‖a − t‖₂` with compensated summation; images hold ~150k terms, and the
/// plain running sum loses enough digits to blur finite differences.
fn residual_norm(a: ArrayView3<'_, f64>, t: ArrayView3<'_, f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(t.iter()) {
        let v = (x - y) * (x - y);
        let s = sum + v;
        carry += if sum.abs() >= v { (sum - s) + v } else { (v - s) + sum };
        sum = s;
    }
    (sum + carry).sqrt()
}

/// Batch mean of `‖x̂ − target‖₂`.
pub fn reconstruction_loss(x_hat: &[Array3<f64>], target: &[ArrayView3<'_, f64>]) -> Result<f64> {
    check_images(x_hat, target)?;
    let sum: f64 = x_hat
        .iter()
        .zip(target)
        .map(|(a, b)| residual_norm(a.view(), *b))
        .sum();
    Ok(sum / x_hat.len() as f64)
}

/// `∂/∂x̂_b = (x̂_b − t_b) / (B ‖x̂_b − t_b‖)`, zero where the residual vanishes.
pub fn reconstruction_grad(x_hat: &[Array3<f64>], target: &[ArrayView3<'_, f64>]) -> Result<Vec<Array3<f64>>> {
    check_images(x_hat, target)?;
    let b = x_hat.len() as f64;
    Ok(x_hat
        .iter()
        .zip(target)
        .map(|(a, t)| {
            let d = a - t;
            let n = residual_norm(a.view(), *t);
            if n > 0.0 {
                d / (b * n)
            } else {
                d
            }
        })
        .collect())
}
