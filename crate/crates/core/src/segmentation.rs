//! Reassignment at 1/8 resolution: each unit picks one of the nine coarse
//! hypotheses around it.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::hypothesis::{argmin_slot, slot_offset, GridIndex, Hypothesis, HypothesisGrid, PyramidConfig, CENTER_SLOT};
use crate::rng::stage_rng;
use crate::scene::{dot, DescriptorGrid, GroundTruth, Level};
use crate::{Homography, Point2, Real};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SegmentationError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("target class {0} is invalid")]
    InvalidTarget(usize),
    #[error("no valid hypothesis among the candidates")]
    AllInvalid,
}

/// Nine fixed orthonormal vectors, one per neighborhood slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEmbeddingTable {
    pub vectors: [Vec<f64>; 9],
}

impl PositionalEmbeddingTable {
    pub fn new(dim: usize, scale: f64, seed: u64) -> Self {
        assert!(dim >= 9, "positional embeddings need dim >= 9");
        let mut rng = stage_rng(seed, "positional-embedding");
        let mut basis: Vec<DVector<f64>> = Vec::with_capacity(9);
        while basis.len() < 9 {
            let mut v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            for b in &basis {
                v -= b * b.dot(&v);
            }
            let n = v.norm();
            if n > 1e-6 {
                basis.push(v / n);
            }
        }
        Self {
            vectors: std::array::from_fn(|k| basis[k].iter().map(|x| x * scale).collect()),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            vectors: std::array::from_fn(|_| vec![0.0; dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }
}

/// Fixed seeded linear map reducing hypothesis features to the 1/8 dim.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProjection {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Row-major `output_dim × input_dim`.
    pub weights: Vec<f64>,
}

impl LinearProjection {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = stage_rng(seed, "hypothesis-projection");
        let s = 1.0 / (output_dim as f64).sqrt();
        let weights = (0..input_dim * output_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * s)
            .collect();
        Self {
            input_dim,
            output_dim,
            weights,
        }
    }

    pub fn from_weights(input_dim: usize, output_dim: usize, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), input_dim * output_dim);
        Self {
            input_dim,
            output_dim,
            weights,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, SegmentationError> {
        if x.len() != self.input_dim {
            return Err(SegmentationError::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(self.weights.chunks_exact(self.input_dim).map(|row| dot(row, x)).collect())
    }
}

/// `C[i] = ⟨proj(h_i) + pos[i], f_j⟩`; missing hypotheses score −∞.
pub fn segmentation_score(
    f_j: &[f64],
    hyp_feats: &[Option<&[f64]>; 9],
    proj: &LinearProjection,
    pos: &PositionalEmbeddingTable,
) -> Result<[f64; 9], SegmentationError> {
    if f_j.len() != proj.output_dim || pos.dim() != proj.output_dim {
        return Err(SegmentationError::DimensionMismatch {
            expected: proj.output_dim,
            got: if f_j.len() != proj.output_dim { f_j.len() } else { pos.dim() },
        });
    }
    let mut out = [f64::NEG_INFINITY; 9];
    for (k, h) in hyp_feats.iter().enumerate() {
        if let Some(h) = h {
            out[k] = dot(&proj.apply(h)?, f_j) + dot(&pos.vectors[k], f_j);
        }
    }
    Ok(out)
}

/// Argmax with ties to the center slot, then the lowest slot. 1-based.
pub fn argmax_slot(scores: &[f64; 9]) -> Option<usize> {
    argmin_slot(&scores.map(|s| (s > f64::NEG_INFINITY && !s.is_nan()).then_some(-s)))
}

/// Slot whose hypothesis maps the unit center closest (L2) to its true target.
pub fn assign_best_hypothesis(
    center: &Point2,
    target: &Point2,
    hyps: &[Option<&Homography>; 9],
) -> Result<usize, SegmentationError> {
    let errors = hyps.map(|h| h.and_then(|h| h.apply(center).ok()).map(|p| (p - target).norm()));
    argmin_slot(&errors).ok_or(SegmentationError::AllInvalid)
}

/// Everything a scorer may look at for one 1/8 unit.
pub struct UnitContext<'a> {
    pub unit: GridIndex,
    pub center: Point2,
    pub hood: &'a [Option<(usize, &'a Hypothesis)>; 9],
}

pub trait HypothesisScorer: Sync {
    /// Nine scores; `−∞` where the hypothesis is missing or unusable.
    fn scores(&self, ctx: &UnitContext<'_>) -> [f64; 9];
}

/// The literal embedding score over synthetic descriptors.
pub struct EmbeddingScorer<'a> {
    pub source_mid: &'a DescriptorGrid,
    pub source_coarse: &'a DescriptorGrid,
    pub proj: &'a LinearProjection,
    pub pos: &'a PositionalEmbeddingTable,
}

impl HypothesisScorer for EmbeddingScorer<'_> {
    fn scores(&self, ctx: &UnitContext<'_>) -> [f64; 9] {
        let feats = ctx.hood.map(|n| n.map(|(i, _)| self.source_coarse.at(i)));
        segmentation_score(self.source_mid.get(ctx.unit.col, ctx.unit.row), &feats, self.proj, self.pos)
            .expect("descriptor dims agree with the projection")
    }
}

/// Negative center-projection error against ground truth.
pub struct GeometricScorer<'a, G: GroundTruth + Sync> {
    pub truth: &'a G,
}

impl<G: GroundTruth + Sync> HypothesisScorer for GeometricScorer<'_, G> {
    fn scores(&self, ctx: &UnitContext<'_>) -> [f64; 9] {
        let Some(t) = self.truth.target_at(&ctx.center) else {
            return [f64::NEG_INFINITY; 9];
        };
        ctx.hood.map(|n| {
            n.and_then(|(_, h)| h.homography.apply(&ctx.center).ok())
                .map_or(f64::NEG_INFINITY, |p| -(p - t).norm())
        })
    }
}

/// Cosine between the source 1/8 descriptor and the target 1/8 descriptor
/// sampled where each hypothesis sends the unit center.
pub struct WarpConsistencyScorer<'a> {
    pub source_mid: &'a DescriptorGrid,
    pub target_mid: &'a DescriptorGrid,
}

impl HypothesisScorer for WarpConsistencyScorer<'_> {
    fn scores(&self, ctx: &UnitContext<'_>) -> [f64; 9] {
        let f = self.source_mid.get(ctx.unit.col, ctx.unit.row);
        let (w, h) = (
            (self.target_mid.cols as u32 * self.target_mid.stride()) as f64,
            (self.target_mid.rows as u32 * self.target_mid.stride()) as f64,
        );
        ctx.hood.map(|n| {
            n.and_then(|(_, hyp)| hyp.homography.apply(&ctx.center).ok())
                .filter(|p| p.x >= 0.0 && p.y >= 0.0 && p.x <= w && p.y <= h)
                .map_or(f64::NEG_INFINITY, |p| dot(f, &self.target_mid.bilinear(&p)))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentChoice {
    /// 1-based slot in the 3×3 neighborhood.
    pub slot: u8,
    /// Row-major coarse unit index of the chosen hypothesis.
    pub hypothesis: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    pub cols: usize,
    pub rows: usize,
    pub cells: Vec<Option<SegmentChoice>>,
}

impl SegmentationMap {
    pub fn get(&self, at: GridIndex) -> Option<SegmentChoice> {
        self.cells[at.row * self.cols + at.col]
    }

    pub fn valid_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

/// Coarse unit containing a 1/8 unit.
pub fn parent_unit(unit: GridIndex) -> GridIndex {
    let r = (Level::Coarse.stride() / Level::Mid.stride()) as usize;
    GridIndex::new(unit.col / r, unit.row / r)
}

fn choose(grid: &HypothesisGrid, unit: GridIndex, slot: usize) -> SegmentChoice {
    let parent = parent_unit(unit);
    let (dc, dr) = slot_offset(slot);
    SegmentChoice {
        slot: slot as u8,
        hypothesis: (parent.row as i64 + dr) as usize * grid.cols + (parent.col as i64 + dc) as usize,
    }
}

/// Per 1/8 unit, the best-scoring of the nine hypotheses around its coarse
/// parent. Units with no usable candidate are left invalid.
pub fn segment(pyramid: &PyramidConfig, grid: &HypothesisGrid, scorer: &dyn HypothesisScorer) -> SegmentationMap {
    let (cols, rows) = pyramid.grid(Level::Mid);
    let cells = (0..cols * rows)
        .into_par_iter()
        .map(|j| {
            let unit = GridIndex::new(j % cols, j / cols);
            let hood = grid.neighborhood(parent_unit(unit));
            let ctx = UnitContext {
                unit,
                center: pyramid.unit_center(Level::Mid, unit.col, unit.row),
                hood: &hood,
            };
            argmax_slot(&scorer.scores(&ctx)).map(|slot| choose(grid, unit, slot))
        })
        .collect();
    SegmentationMap { cols, rows, cells }
}

/// The no-segmentation baseline: every unit takes its parent's hypothesis.
pub fn segment_center_only(pyramid: &PyramidConfig, grid: &HypothesisGrid) -> SegmentationMap {
    let (cols, rows) = pyramid.grid(Level::Mid);
    let cells = (0..cols * rows)
        .map(|j| {
            let unit = GridIndex::new(j % cols, j / cols);
            grid.get(parent_unit(unit)).map(|_| choose(grid, unit, CENTER_SLOT))
        })
        .collect();
    SegmentationMap { cols, rows, cells }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FocalMode {
    /// Single-label softmax over the candidates.
    #[default]
    Softmax,
    /// Independent per-class sigmoids, one-vs-rest.
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocalLoss<T> {
    pub value: T,
    /// Gradient with respect to each score; zero at masked entries.
    pub grad: Vec<T>,
}

fn log_sigmoid<T: Real>(x: T) -> T {
    // log σ(x) = −softplus(−x)
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Focal loss of `scores` for the class at index `target` (0-based).
/// Non-finite scores are masked out. Returns the value and its analytic
/// gradient.
pub fn focal_loss<T: Real>(
    scores: &[T],
    target: usize,
    gamma: T,
    alpha: T,
    mode: FocalMode,
) -> Result<FocalLoss<T>, SegmentationError> {
    let live = |s: &T| s.is_finite();
    if target >= scores.len() || !live(&scores[target]) {
        return Err(SegmentationError::InvalidTarget(target));
    }
    let one = T::one();
    let mut grad = vec![T::zero(); scores.len()];
    match mode {
        FocalMode::Softmax => {
            let m = scores.iter().copied().filter(live).fold(scores[target], |a, b| a.max(b));
            let exps: Vec<T> = scores.iter().map(|&s| if live(&s) { (s - m).exp() } else { T::zero() }).collect();
            let z: T = exps.iter().copied().fold(T::zero(), |a, b| a + b);
            let p: Vec<T> = exps.iter().map(|&e| e / z).collect();
            let log_pt = scores[target] - m - z.ln();
            let pt = p[target];
            let rest = p
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != target)
                .fold(T::zero(), |a, (_, &b)| a + b);
            let value = -alpha * rest.powf(gamma) * log_pt;
            if rest > T::zero() {
                // dL/ds_t-chain: α[γ(1−p)^(γ−1)·p·ln p − (1−p)^γ]·(δ − p_k)
                let c = alpha * (gamma * rest.powf(gamma - one) * pt * log_pt - rest.powf(gamma));
                for (k, g) in grad.iter_mut().enumerate() {
                    if live(&scores[k]) {
                        let delta = if k == target { one } else { T::zero() };
                        *g = c * (delta - p[k]);
                    }
                }
            }
            Ok(FocalLoss { value, grad })
        }
        FocalMode::Sigmoid => {
            let mut value = T::zero();
            for (k, &s) in scores.iter().enumerate() {
                if !live(&s) {
                    continue;
                }
                let (x, a, sign) = if k == target { (s, alpha, one) } else { (-s, one - alpha, -one) };
                let log_pt = log_sigmoid(x);
                let pt = log_pt.exp();
                let rest = log_sigmoid(-x).exp();
                value -= a * rest.powf(gamma) * log_pt;
                grad[k] = sign * a * (gamma * rest.powf(gamma) * pt * log_pt - rest.powf(gamma + one));
            }
            Ok(FocalLoss { value, grad })
        }
    }
}
