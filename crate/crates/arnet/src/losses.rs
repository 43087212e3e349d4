//! Training losses over one video's score vector, each returning its value
//! and gradient with respect to the scores.
//!
//! The instance loss runs binary cross-entropy against the video label over
//! the top `k = ceil(t/α)` scores; the center loss penalizes the variance of
//! a normal video's scores around their mean. Scores are clamped away from
//! {0, 1} inside logarithms only.

use crate::error::{Error, Result};

/// Clamp applied to scores inside logarithms, keeping losses finite.
pub const SCORE_CLAMP: f64 = 1e-7;

/// A loss value and its gradient with respect to the score vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossOutput {
    fn zeros(t: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; t],
        }
    }
}

/// The `k` largest scores of a video and where they sit.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKSelection {
    pub k: usize,
    /// Clip indices of the selected scores, in descending score order;
    /// ties broken by lower clip index.
    pub indices: Vec<usize>,
    /// The selected scores, descending.
    pub values: Vec<f64>,
}

/// `k = ceil(t/α)`, clamped into `[1, t]`.
pub fn dynamic_k(t: usize, alpha: f64) -> usize {
    assert!(t >= 1, "need at least one clip");
    assert!(alpha > 0.0, "alpha must be positive");
    ((t as f64 / alpha).ceil() as usize).clamp(1, t)
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

fn check_label(label: u8) -> Result<()> {
    if label > 1 {
        return Err(Error::Invalid(format!("label must be 0 or 1, got {label}")));
    }
    Ok(())
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Invalid("score vector is empty".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score".into()));
    }
    Ok(())
}

/// Selects the top `k = ceil(t/α)` scores, descending, ties broken by lower
/// clip index.
pub fn select_topk(scores: &[f64], alpha: f64) -> Result<TopKSelection> {
    check_scores(scores)?;
    if alpha <= 0.0 {
        return Err(Error::Invalid(format!("alpha must be positive, got {alpha}")));
    }
    let k = dynamic_k(scores.len(), alpha);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    let values = order.iter().map(|&i| scores[i]).collect();
    Ok(TopKSelection {
        k,
        indices: order,
        values,
    })
}

/// Dynamic multiple-instance loss: mean binary cross-entropy between each of
/// the top-k scores and the video label. The gradient is nonzero only on
/// selected indices.
pub fn dmil_loss(scores: &[f64], label: u8, alpha: f64) -> Result<LossOutput> {
    check_label(label)?;
    let selection = select_topk(scores, alpha)?;
    let k = selection.k as f64;
    let y = f64::from(label);
    let mut value = 0.0;
    let mut grad = vec![0.0; scores.len()];
    for &idx in &selection.indices {
        let s = clamp_score(scores[idx]);
        value += -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
        grad[idx] = -y / (k * s) + (1.0 - y) / (k * (1.0 - s));
    }
    Ok(LossOutput {
        value: value / k,
        grad,
    })
}

/// Score-center loss: for a normal video, the variance of its scores around
/// their mean; zero for abnormal videos.
pub fn center_loss(scores: &[f64], label: u8) -> Result<LossOutput> {
    check_label(label)?;
    check_scores(scores)?;
    if label == 1 {
        return Ok(LossOutput::zeros(scores.len()));
    }
    let t = scores.len() as f64;
    let center = scores.iter().sum::<f64>() / t;
    let value = scores.iter().map(|s| (s - center).powi(2)).sum::<f64>() / t;
    // Σ(s_j - c) = 0, so treating c as constant gives the exact gradient.
    let grad = scores.iter().map(|s| 2.0 * (s - center) / t).collect();
    Ok(LossOutput { value, grad })
}

/// Instance and center losses broken out alongside their λ-weighted sum.
#[derive(Debug, Clone)]
pub struct TotalLossBreakdown {
    pub dmil: LossOutput,
    pub center: LossOutput,
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Total objective `dmil + λ·center`, with per-component values retained.
pub fn total_loss_breakdown(
    scores: &[f64],
    label: u8,
    alpha: f64,
    lambda: f64,
) -> Result<TotalLossBreakdown> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Invalid(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    let dmil = dmil_loss(scores, label, alpha)?;
    let center = center_loss(scores, label)?;
    let value = dmil.value + lambda * center.value;
    let grad = dmil
        .grad
        .iter()
        .zip(&center.grad)
        .map(|(d, c)| d + lambda * c)
        .collect();
    Ok(TotalLossBreakdown {
        dmil,
        center,
        value,
        grad,
    })
}

/// Total objective `dmil + λ·center`.
pub fn total_loss(scores: &[f64], label: u8, alpha: f64, lambda: f64) -> Result<LossOutput> {
    let breakdown = total_loss_breakdown(scores, label, alpha, lambda)?;
    Ok(LossOutput {
        value: breakdown.value,
        grad: breakdown.grad,
    })
}
