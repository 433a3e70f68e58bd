//! Sub-pixel refinement at 1/2 resolution: one source query attends over a
//! 7×7 key window around the initial target.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{dot, DescriptorGrid};
use crate::Point2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RefinementError {
    #[error("attention window is entirely out of bounds")]
    AllMasked,
    #[error("keys and values differ in length ({keys} vs {values})")]
    LengthMismatch { keys: usize, values: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchCandidate {
    pub source: Point2,
    /// Initial target from the selected hypothesis.
    pub target: Point2,
    pub refined: Option<Point2>,
    pub confidence: Option<f64>,
}

impl MatchCandidate {
    pub fn new(source: Point2, target: Point2) -> Self {
        Self {
            source,
            target,
            refined: None,
            confidence: None,
        }
    }

    /// The refined target if present, otherwise the initial one.
    pub fn best_target(&self) -> Point2 {
        self.refined.unwrap_or(self.target)
    }
}

/// Thread-safe count of attention inner products.
#[derive(Debug, Default)]
pub struct AttentionCostCounter {
    inner_products: AtomicU64,
    queries: AtomicU64,
}

impl AttentionCostCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, inner_products: u64) {
        self.inner_products.fetch_add(inner_products, Ordering::Relaxed);
        self.queries.fetch_add(1, Ordering::Relaxed);
    }

    pub fn inner_products(&self) -> u64 {
        self.inner_products.load(Ordering::Relaxed)
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub value: Vector2<f64>,
    /// One weight per key; zero where masked.
    pub weights: Vec<f64>,
    /// Largest query–key inner product among unmasked keys.
    pub max_similarity: f64,
}

/// Softmax attention of one query over `keys` (masked where `None`),
/// returning the weighted sum of `values`.
pub fn unidirectional_cross_attention(
    query: &[f64],
    keys: &[Option<&[f64]>],
    values: &[Vector2<f64>],
    temperature: f64,
    counter: &AttentionCostCounter,
) -> Result<AttentionOutput, RefinementError> {
    if keys.len() != values.len() {
        return Err(RefinementError::LengthMismatch {
            keys: keys.len(),
            values: values.len(),
        });
    }
    let sims: Vec<Option<f64>> = keys.iter().map(|k| k.map(|k| dot(query, k))).collect();
    let live = sims.iter().flatten().count();
    if live == 0 {
        return Err(RefinementError::AllMasked);
    }
    counter.record(live as u64);
    let max_similarity = sims.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = sims
        .iter()
        .map(|s| s.map_or(0.0, |s| ((s - max_similarity) / temperature).exp()))
        .collect();
    let z: f64 = weights.iter().sum();
    let mut value = Vector2::zeros();
    for (w, v) in weights.iter_mut().zip(values) {
        *w /= z;
        value += *v * *w;
    }
    Ok(AttentionOutput {
        value,
        weights,
        max_similarity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub temperature: f64,
    /// Half-width of the key window in 1/2 units (3 → 7×7).
    pub window_radius: usize,
    /// Confidence is `σ(scale · max_similarity + bias)`.
    pub confidence_scale: f64,
    pub confidence_bias: f64,
    pub inlier_threshold_px: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            window_radius: 3,
            confidence_scale: 60.0,
            confidence_bias: -54.0,
            inlier_threshold_px: 2.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Refines `cand.target` against the 1/2-level grids. Keys are the units
/// around the one nearest the initial target; each value is that key's
/// center relative to the initial target, so the refined target is the
/// attention-weighted mean key position.
pub fn refine_match(
    cand: &MatchCandidate,
    source: &DescriptorGrid,
    target: &DescriptorGrid,
    cfg: &RefineConfig,
    counter: &AttentionCostCounter,
) -> Result<MatchCandidate, RefinementError> {
    let query = source.bilinear(&cand.source);
    let s = target.stride() as f64;
    let (cc, cr) = (
        (cand.target.x / s - 0.5).round() as i64,
        (cand.target.y / s - 0.5).round() as i64,
    );
    let r = cfg.window_radius as i64;
    let n = (2 * cfg.window_radius + 1).pow(2);
    let mut keys = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for dr in -r..=r {
        for dc in -r..=r {
            let (c, row) = (cc + dc, cr + dr);
            keys.push(target.get_checked(c, row));
            let center = Vector2::new((c as f64 + 0.5) * s, (row as f64 + 0.5) * s);
            values.push(center - cand.target);
        }
    }
    let out = unidirectional_cross_attention(&query, &keys, &values, cfg.temperature, counter)?;
    Ok(MatchCandidate {
        refined: Some(cand.target + out.value),
        confidence: Some(sigmoid(cfg.confidence_scale * out.max_similarity + cfg.confidence_bias)),
        ..*cand
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementLoss {
    pub value: f64,
    pub endpoint: f64,
    pub bce: f64,
    /// Gradient with respect to the refined target.
    pub grad_point: Vector2<f64>,
    /// Gradient with respect to the confidence logit.
    pub grad_logit: f64,
}

const BCE_EPS: f64 = 1e-7;

/// `|P* − P̄|₂ + BCE(c, [|P* − P̄|₂ ≤ threshold])`.
pub fn refinement_loss(refined: &Point2, truth: &Point2, confidence: f64, inlier_threshold: f64) -> RefinementLoss {
    let d = refined - truth;
    let endpoint = d.norm();
    let label = endpoint <= inlier_threshold;
    let bce = if label {
        -confidence.max(BCE_EPS).ln()
    } else {
        -(1.0 - confidence).max(BCE_EPS).ln()
    };
    RefinementLoss {
        value: endpoint + bce,
        endpoint,
        bce,
        grad_point: if endpoint > 0.0 { d / endpoint } else { Vector2::zeros() },
        grad_logit: confidence - if label { 1.0 } else { 0.0 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Unidirectional7x7,
    Bidirectional5x5SelfCross,
}

/// Inner products per match for each attention layout.
pub fn attention_cost(mode: AttentionMode) -> u64 {
    match mode {
        AttentionMode::Unidirectional7x7 => 7 * 7,
        // Self and cross attention in both directions over 5×5 windows.
        AttentionMode::Bidirectional5x5SelfCross => 25 * 25 * 4,
    }
}

/// Reference two-window layer: self attention in each window, then cross
/// attention in both directions, all full softmax. Returns the updated
/// source and target windows; every inner product is recorded as one query.
pub fn bidirectional_window_attention(
    source: &[Vec<f64>],
    target: &[Vec<f64>],
    temperature: f64,
    counter: &AttentionCostCounter,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let attend = |queries: &[Vec<f64>], keys: &[Vec<f64>]| -> (Vec<Vec<f64>>, u64) {
        let mut n = 0;
        let out = queries
            .iter()
            .map(|q| {
                let sims: Vec<f64> = keys.iter().map(|k| dot(q, k)).collect();
                n += sims.len() as u64;
                let m = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = sims.iter().map(|s| ((s - m) / temperature).exp()).collect();
                let z: f64 = w.iter().sum();
                let mut v = vec![0.0; q.len()];
                for (wk, k) in w.iter().zip(keys) {
                    v.iter_mut().zip(k).for_each(|(a, b)| *a += wk / z * b);
                }
                v
            })
            .collect();
        (out, n)
    };
    let (s1, a) = attend(source, source);
    let (t1, b) = attend(target, target);
    let (s2, c) = attend(&s1, &t1);
    let (t2, d) = attend(&t1, &s1);
    counter.inner_products.fetch_add(a + b + c + d, Ordering::Relaxed);
    counter.queries.fetch_add(1, Ordering::Relaxed);
    (s2, t2)
}
