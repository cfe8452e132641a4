//! Cumulative-mass KV eviction.
//!
//! Per query, keep the smallest set of highest attention weights whose
//! sum reaches the threshold tau. The selection is recomputed fresh for
//! every query step; nothing is ever discarded permanently.

use crate::error::{Error, Result};
use crate::score_engine::ScoreVector;

/// The tokens surviving eviction for one query, in descending weight
/// order (ties by ascending token index). This is exactly the payload
/// that crosses the device-to-host channel.
#[derive(Debug, Clone, PartialEq)]
pub struct EvictionSelection {
    pub tau: f64,
    pub k_star: usize,
    /// Original token indices, length `k_star`.
    pub indices: Vec<u32>,
    /// Matching attention weights, length `k_star`.
    pub weights: Vec<f32>,
    /// Sequence length the selection was drawn from.
    pub n: usize,
}

/// Slack subtracted from tau before the cumulative comparison, so that
/// tau = 1 is reachable even though float softmax weights sum to 1 only
/// up to rounding.
pub const TAU_SLACK: f64 = 1e-6;

/// Minimal top-mass prefix reaching `tau`.
///
/// Weights sort descending with ties broken toward the lower token
/// index; the cumulative sum accumulates in f64 and the scan stops at
/// the first prefix reaching `tau - TAU_SLACK`.
pub fn select(weights: &ScoreVector, tau: f64) -> Result<EvictionSelection> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidThreshold(tau));
    }
    let w = weights.weights.as_ref().ok_or(Error::NotNormalized)?;
    if w.is_empty() {
        return Err(Error::EmptyInput("weight vector"));
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("selection weights"));
    }

    let mut order: Vec<u32> = (0..w.len() as u32).collect();
    order.sort_by(|&a, &b| {
        w[b as usize]
            .partial_cmp(&w[a as usize])
            .expect("weights checked finite")
            .then(a.cmp(&b))
    });

    let threshold = tau - TAU_SLACK;
    let mut cumulative = 0.0f64;
    let mut k_star = w.len();
    for (rank, &idx) in order.iter().enumerate() {
        cumulative += w[idx as usize] as f64;
        if cumulative >= threshold {
            k_star = rank + 1;
            break;
        }
    }

    order.truncate(k_star);
    let selected_weights = order.iter().map(|&i| w[i as usize]).collect();
    Ok(EvictionSelection {
        tau,
        k_star,
        indices: order,
        weights: selected_weights,
        n: w.len(),
    })
}

/// Fraction of the sequence surviving eviction, `k* / n`.
pub fn selection_ratio(sel: &EvictionSelection) -> f64 {
    sel.k_star as f64 / sel.n as f64
}
