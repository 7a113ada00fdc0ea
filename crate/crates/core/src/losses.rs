//! Binary cross-entropy and contrastive loss, with analytic gradients.
//!
//! Contrastive labels use the metric-learning convention: 0 for a similar
//! pair, 1 for a dissimilar one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to probabilities before taking logarithms.
pub const BCE_EPSILON: f64 = 1e-7;
/// Added under the square root when differentiating the distance.
pub const DISTANCE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub margin: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { margin: 1.0 }
    }
}

impl ContrastiveConfig {
    pub fn new(margin: f64) -> Result<Self> {
        if margin > 0.0 && margin.is_finite() {
            Ok(Self { margin })
        } else {
            Err(Error::InvalidArgument(format!("margin must be positive, got {margin}")))
        }
    }
}

pub fn euclidean_distance(e1: &[f64], e2: &[f64]) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::InvalidArgument(format!("embedding lengths differ: {} vs {}", e1.len(), e2.len())));
    }
    Ok(e1.iter().zip(e2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Gradient of the distance with respect to `e1`; the gradient for `e2` is
/// its negation.
pub fn euclidean_distance_grad(e1: &[f64], e2: &[f64]) -> Result<Vec<f64>> {
    let d = euclidean_distance(e1, e2)?;
    let denom = (d * d + DISTANCE_EPSILON).sqrt();
    Ok(e1.iter().zip(e2).map(|(a, b)| (a - b) / denom).collect())
}

fn check_pair(d: f64, y: u8) -> Result<()> {
    if !(d >= 0.0) {
        return Err(Error::InvalidArgument(format!("distance must be non-negative, got {d}")));
    }
    if y > 1 {
        return Err(Error::InvalidArgument(format!("label must be 0 or 1, got {y}")));
    }
    Ok(())
}

pub fn contrastive_loss(d: f64, y: u8, cfg: ContrastiveConfig) -> Result<f64> {
    check_pair(d, y)?;
    Ok(if y == 0 { 0.5 * d * d } else { 0.5 * (cfg.margin - d).max(0.0).powi(2) })
}

/// dL/dD. At the hinge point `D = m` the inactive side (zero) is taken.
pub fn contrastive_loss_grad(d: f64, y: u8, cfg: ContrastiveConfig) -> Result<f64> {
    check_pair(d, y)?;
    Ok(if y == 0 {
        d
    } else if d < cfg.margin {
        d - cfg.margin
    } else {
        0.0
    })
}

pub fn contrastive_batch(distances: &[f64], labels: &[u8], cfg: ContrastiveConfig) -> Result<f64> {
    if distances.is_empty() || distances.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "contrastive batch needs equal non-zero lengths, got {} distances and {} labels",
            distances.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (&d, &y) in distances.iter().zip(labels) {
        total += contrastive_loss(d, y, cfg)?;
    }
    Ok(total / distances.len() as f64)
}

pub fn binary_cross_entropy(p: f64, y: u8) -> f64 {
    let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// dL/dp of the clamped loss (zero where the clamp is active).
pub fn binary_cross_entropy_grad(p: f64, y: u8) -> f64 {
    if !(BCE_EPSILON..=1.0 - BCE_EPSILON).contains(&p) {
        return 0.0;
    }
    if y == 1 {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

/// BCE of `sigmoid(z)` and its derivative with respect to the logit `z`.
pub fn bce_with_logit(z: f64, y: u8) -> (f64, f64) {
    let p = 1.0 / (1.0 + (-z).exp());
    (binary_cross_entropy(p, y), p - f64::from(y))
}

pub fn bce_batch(probabilities: &[f64], labels: &[u8]) -> Result<f64> {
    if probabilities.is_empty() || probabilities.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "BCE batch needs equal non-zero lengths, got {} and {}",
            probabilities.len(),
            labels.len()
        )));
    }
    Ok(probabilities.iter().zip(labels).map(|(&p, &y)| binary_cross_entropy(p, y)).sum::<f64>()
        / probabilities.len() as f64)
}
