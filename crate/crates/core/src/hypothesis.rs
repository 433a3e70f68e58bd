//! Coarse stage at 1/32 resolution: nearest-cosine unit matching, group-wise
//! correlation, per-unit attribute fits and the supervision / loss gating
//! used to train hypotheses.

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{
    apply_homography, attributes_from_corners, attributes_to_homography, base_quad, solve_homography_points,
    AttributeBounds, GeometryError,
};
use crate::rng::stage_rng;
use crate::scene::dot;
use crate::scene::{DescriptorGrid, GroundTruthField, ImageSize, Level, SampledMatch};
use crate::{Attributes, Homography, Point2};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HypothesisError {
    #[error("descriptor dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("descriptor dimension {dim} not divisible into {groups} groups")]
    IndivisibleGroups { dim: usize, groups: usize },
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("fitted attributes outside the model: {0}")]
    OutOfModel(String),
    #[error("no valid hypothesis among the candidates")]
    AllInvalid,
}

/// Grid sizes of the three pyramid levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidConfig {
    pub image_size: ImageSize,
}

impl PyramidConfig {
    pub fn new(image_size: ImageSize) -> Self {
        Self { image_size }
    }

    pub fn grid(&self, level: Level) -> (usize, usize) {
        let s = level.stride();
        ((self.image_size.width / s) as usize, (self.image_size.height / s) as usize)
    }

    pub fn unit_center(&self, level: Level, col: usize, row: usize) -> Point2 {
        let s = level.stride() as f64;
        Vector2::new((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }

    /// Unit of `level` containing pixel `p`.
    pub fn unit_of(&self, level: Level, p: &Point2) -> Option<GridIndex> {
        let (cols, rows) = self.grid(level);
        let s = level.stride() as f64;
        let (c, r) = ((p.x / s).floor(), (p.y / s).floor());
        (c >= 0.0 && r >= 0.0 && (c as usize) < cols && (r as usize) < rows)
            .then(|| GridIndex::new(c as usize, r as usize))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridIndex {
    pub col: usize,
    pub row: usize,
}

impl GridIndex {
    pub fn new(col: usize, row: usize) -> Self {
        Self { col, row }
    }

    pub fn chebyshev(&self, other: &Self) -> usize {
        self.col.abs_diff(other.col).max(self.row.abs_diff(other.row))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseMatch {
    /// Row-major index of the source unit.
    pub source: usize,
    pub target: GridIndex,
    pub score: f64,
}

/// For every source unit, the target unit of maximal cosine similarity;
/// ties go to the lowest row-major index.
pub fn coarse_match(src: &DescriptorGrid, tgt: &DescriptorGrid) -> Result<Vec<CoarseMatch>, HypothesisError> {
    if src.dim != tgt.dim {
        return Err(HypothesisError::DimensionMismatch(src.dim, tgt.dim));
    }
    Ok((0..src.len())
        .into_par_iter()
        .map(|i| {
            let f = src.at(i);
            let (mut best, mut best_score) = (0usize, f64::NEG_INFINITY);
            for j in 0..tgt.len() {
                let s = dot(f, tgt.at(j));
                if s > best_score {
                    best = j;
                    best_score = s;
                }
            }
            CoarseMatch {
                source: i,
                target: GridIndex::new(best % tgt.cols, best / tgt.cols),
                score: best_score,
            }
        })
        .collect())
}

/// Group-wise correlation of `f` against each neighbor: per neighbor, the
/// mean elementwise product within each contiguous `dim / groups` slice.
/// Output is neighbor-major, group-ascending; missing neighbors give zeros.
pub fn groupwise_correlation(
    f: &[f64],
    neighborhood: &[Option<&[f64]>],
    groups: usize,
) -> Result<Vec<f64>, HypothesisError> {
    let dim = f.len();
    if groups == 0 || dim % groups != 0 {
        return Err(HypothesisError::IndivisibleGroups { dim, groups });
    }
    let size = dim / groups;
    let mut out = Vec::with_capacity(neighborhood.len() * groups);
    for n in neighborhood {
        match n {
            Some(n) => {
                if n.len() != dim {
                    return Err(HypothesisError::DimensionMismatch(dim, n.len()));
                }
                for g in 0..groups {
                    let r = g * size..(g + 1) * size;
                    out.push(dot(&f[r.clone()], &n[r]) / size as f64);
                }
            }
            None => out.extend(std::iter::repeat_n(0.0, groups)),
        }
    }
    Ok(out)
}

/// Correlation of source unit `source` against the 5×5 target neighborhood
/// around `center`.
pub fn neighborhood_correlation(
    src: &DescriptorGrid,
    tgt: &DescriptorGrid,
    source: usize,
    center: GridIndex,
    groups: usize,
) -> Result<Vec<f64>, HypothesisError> {
    let mut hood = Vec::with_capacity(25);
    for dr in -2i64..=2 {
        for dc in -2i64..=2 {
            hood.push(tgt.get_checked(center.col as i64 + dc, center.row as i64 + dr));
        }
    }
    groupwise_correlation(src.at(source), &hood, groups)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOutcome {
    pub attributes: Attributes,
    /// Least-squares homography over the matches.
    pub homography: Homography,
    /// RMS reprojection error of `homography` over the matches, px.
    pub dlt_residual: f64,
    /// RMS reprojection error of the attribute homography over the matches, px.
    pub attribute_residual: f64,
}

fn rms_residual(h: &Homography, matches: &[(Point2, Point2)]) -> f64 {
    let sum: f64 = matches
        .iter()
        .map(|(s, t)| match apply_homography(h, s) {
            Ok(p) => (p - t).norm_squared(),
            Err(_) => f64::INFINITY,
        })
        .sum();
    (sum / matches.len() as f64).sqrt()
}

/// Fits an attribute block to local correspondences: a least-squares DLT
/// over all pairs, evaluated at the virtual corners around `center`, then
/// inverted back to attributes in the canonical gauge.
pub fn fit_attributes(
    matches: &[(Point2, Point2)],
    center: Point2,
    bounds: &AttributeBounds,
) -> Result<FitOutcome, HypothesisError> {
    if matches.len() < 4 {
        return Err(HypothesisError::DegenerateFit(format!("{} matches, need 4", matches.len())));
    }
    let homography = solve_homography_points(matches).map_err(|e| HypothesisError::DegenerateFit(e.to_string()))?;
    let src = base_quad::<f64>().translated(&center);
    let mut dst = src;
    for p in dst.pts.iter_mut() {
        *p = apply_homography(&homography, p).map_err(|e| HypothesisError::DegenerateFit(e.to_string()))?;
    }
    if !dst.is_non_collinear(bounds.min_area) {
        return Err(HypothesisError::DegenerateFit("collapsed virtual corners".into()));
    }
    let attributes = attributes_from_corners(center, &dst, 1.0);
    attributes
        .validate(bounds)
        .map_err(|e| HypothesisError::OutOfModel(e.to_string()))?;
    let attr_h = attributes_to_homography(&attributes, bounds).map_err(|e| HypothesisError::OutOfModel(e.to_string()))?;
    Ok(FitOutcome {
        attributes,
        homography,
        dlt_residual: rms_residual(&homography, matches),
        attribute_residual: rms_residual(&attr_h, matches),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hypothesis {
    pub attributes: Attributes,
    pub homography: Homography,
}

impl Hypothesis {
    pub fn from_attributes(attributes: Attributes, bounds: &AttributeBounds) -> Result<Self, GeometryError> {
        Ok(Self {
            homography: attributes_to_homography(&attributes, bounds)?,
            attributes,
        })
    }
}

/// One hypothesis (or `None`) per 1/32 unit, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisGrid {
    pub cols: usize,
    pub rows: usize,
    pub cells: Vec<Option<Hypothesis>>,
}

/// Local 3×3 slot (1-based, row-major; 5 is the center) → grid offset.
pub fn slot_offset(slot: usize) -> (i64, i64) {
    let k = slot as i64 - 1;
    (k % 3 - 1, k / 3 - 1)
}

pub const CENTER_SLOT: usize = 5;

impl HypothesisGrid {
    pub fn get(&self, at: GridIndex) -> Option<&Hypothesis> {
        self.cells[at.row * self.cols + at.col].as_ref()
    }

    pub fn valid_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// The nine hypotheses around `at` in slot order, with their row-major
    /// unit indices. Out-of-grid or invalid slots are `None`.
    pub fn neighborhood(&self, at: GridIndex) -> [Option<(usize, &Hypothesis)>; 9] {
        std::array::from_fn(|k| {
            let (dc, dr) = slot_offset(k + 1);
            let (c, r) = (at.col as i64 + dc, at.row as i64 + dr);
            if c < 0 || r < 0 || c as usize >= self.cols || r as usize >= self.rows {
                return None;
            }
            let idx = r as usize * self.cols + c as usize;
            self.cells[idx].as_ref().map(|h| (idx, h))
        })
    }
}

/// Perturbation applied to fitted attributes, emulating regression error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeNoise {
    pub translation_px: f64,
    pub rotation_rad: f64,
    pub log_scale: f64,
    pub perspective: f64,
}

impl AttributeNoise {
    pub const NONE: Self = Self {
        translation_px: 0.0,
        rotation_rad: 0.0,
        log_scale: 0.0,
        perspective: 0.0,
    };

    fn is_zero(&self) -> bool {
        *self == Self::NONE
    }

    fn apply<R: Rng>(&self, rng: &mut R, a: &Attributes) -> Attributes {
        let mut n = || -> f64 { rng.sample(StandardNormal) };
        let mut out = *a;
        out.target += Vector2::new(n(), n()) * self.translation_px;
        out.rotation += n() * self.rotation_rad;
        out.scale *= (n() * self.log_scale).exp();
        for q in out.perspective.iter_mut() {
            *q += n() * self.perspective;
        }
        out
    }
}

impl Default for AttributeNoise {
    fn default() -> Self {
        Self {
            translation_px: 1.0,
            rotation_rad: 0.01,
            log_scale: 0.01,
            perspective: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypothesisConfig {
    pub bounds: AttributeBounds,
    /// Half-width, in coarse cells, of the target window around a coarse match
    /// from which local correspondences are accepted (2 → 5×5).
    pub window_radius: usize,
    pub noise: AttributeNoise,
}

impl Default for HypothesisConfig {
    fn default() -> Self {
        Self {
            bounds: AttributeBounds::default(),
            window_radius: 2,
            noise: AttributeNoise::default(),
        }
    }
}

/// One hypothesis per coarse unit, fitted to the ground-truth samples of
/// `fit_field` that fall inside the unit.
///
/// The fit stands in for the learned attribute regressor. With `coarse`
/// matches, only samples whose target lies in the window around the unit's
/// match are usable, so a wrong coarse match yields no (or a wrong)
/// hypothesis. Only the unit's dominant plane is fitted.
pub fn build_hypothesis_grid(
    pyramid: &PyramidConfig,
    coarse: Option<&[CoarseMatch]>,
    fit_field: &GroundTruthField,
    cfg: &HypothesisConfig,
    seed: u64,
) -> HypothesisGrid {
    let (cols, rows) = pyramid.grid(Level::Coarse);
    assert_eq!(32 % fit_field.stride, 0, "fit field stride must divide 32");
    let per_unit = (32 / fit_field.stride) as usize;
    let cells = (0..cols * rows)
        .into_par_iter()
        .map(|i| {
            let (uc, ur) = (i % cols, i / cols);
            let gate = coarse.map(|m| m[i].target);
            let mut samples: Vec<(Point2, Point2, usize)> = Vec::with_capacity(per_unit * per_unit);
            for r in ur * per_unit..(ur + 1) * per_unit {
                for c in uc * per_unit..(uc + 1) * per_unit {
                    let e = fit_field.entry(c, r);
                    let (true, Some(plane)) = (e.valid, e.plane_id) else {
                        continue;
                    };
                    if let Some(a) = gate {
                        match pyramid.unit_of(Level::Coarse, &e.target) {
                            Some(t) if t.chebyshev(&a) <= cfg.window_radius => {}
                            _ => continue,
                        }
                    }
                    samples.push((fit_field.sample_point(c, r), e.target, plane));
                }
            }
            let dominant = dominant_plane(samples.iter().map(|s| s.2))?;
            let pairs: Vec<_> = samples.iter().filter(|s| s.2 == dominant).map(|s| (s.0, s.1)).collect();
            let center = pyramid.unit_center(Level::Coarse, uc, ur);
            let fit = fit_attributes(&pairs, center, &cfg.bounds).ok()?;
            let mut attrs = fit.attributes;
            attrs.confidence = coarse.map_or(1.0, |m| m[i].score.clamp(0.0, 1.0));
            if !cfg.noise.is_zero() {
                let mut rng = stage_rng(seed, &format!("hypothesis-noise-{i}"));
                attrs = cfg.noise.apply(&mut rng, &attrs);
            }
            Hypothesis::from_attributes(attrs, &cfg.bounds).ok()
        })
        .collect();
    HypothesisGrid { cols, rows, cells }
}

fn dominant_plane(ids: impl Iterator<Item = usize>) -> Option<usize> {
    let mut counts: Vec<usize> = Vec::new();
    for id in ids {
        if id >= counts.len() {
            counts.resize(id + 1, 0);
        }
        counts[id] += 1;
    }
    let best = counts.iter().copied().max().filter(|&m| m > 0)?;
    counts.iter().position(|&c| c == best)
}

/// `|H·p_s − p_t|₁` in px.
pub fn hypothesis_point_error(h: &Homography, p_s: &Point2, p_t: &Point2) -> Result<f64, GeometryError> {
    let p = apply_homography(h, p_s)?;
    Ok((p - p_t).abs().sum())
}

/// Argmin over up to nine candidates; exact ties prefer the center slot and
/// then the lowest slot. Returns the 1-based slot.
pub fn argmin_slot(errors: &[Option<f64>; 9]) -> Option<usize> {
    let best = errors.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return None;
    }
    if errors[CENTER_SLOT - 1] == Some(best) {
        return Some(CENTER_SLOT);
    }
    errors.iter().position(|e| *e == Some(best)).map(|k| k + 1)
}

/// Which of the nine neighboring hypotheses best explains `(p_s, p_t)` under
/// the L1 projection error. Returns the 1-based slot.
pub fn assign_supervision_hypothesis(
    p_s: &Point2,
    p_t: &Point2,
    hyps: &[Option<&Homography>; 9],
) -> Result<usize, HypothesisError> {
    let errors = hyps.map(|h| h.and_then(|h| hypothesis_point_error(h, p_s, p_t).ok()));
    argmin_slot(&errors).ok_or(HypothesisError::AllInvalid)
}

/// A supervision point with the unit whose hypothesis it was assigned to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignedPoint {
    pub source: Point2,
    pub target: Point2,
    pub unit: usize,
    pub error: f64,
}

/// Assigns each sampled match to the best of the 3×3 hypotheses around its
/// containing coarse unit; points with no valid neighbor are skipped.
pub fn assign_points(pyramid: &PyramidConfig, grid: &HypothesisGrid, points: &[SampledMatch]) -> Vec<AssignedPoint> {
    points
        .iter()
        .filter_map(|m| {
            let at = pyramid.unit_of(Level::Coarse, &m.source)?;
            let hood = grid.neighborhood(at);
            let hyps = hood.map(|n| n.map(|(_, h)| &h.homography));
            let slot = assign_supervision_hypothesis(&m.source, &m.target, &hyps).ok()?;
            let (unit, h) = hood[slot - 1]?;
            Some(AssignedPoint {
                source: m.source,
                target: m.target,
                unit,
                error: hypothesis_point_error(&h.homography, &m.source, &m.target).ok()?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossGateConfig {
    /// Gate threshold in coarse cells.
    pub theta1: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub descriptor_dim: usize,
    pub groups: usize,
}

impl Default for LossGateConfig {
    fn default() -> Self {
        Self {
            theta1: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            descriptor_dim: 128,
            groups: 8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GatePartition {
    /// Units whose match deviates by more than θ₁ cells: classification loss.
    pub classify: Vec<usize>,
    /// Remaining valid units: correspondence loss.
    pub correspond: Vec<usize>,
}

/// Splits units by the infinity-norm deviation of predicted from true
/// target unit. Units without a true target are in neither set.
pub fn loss_gate_partition(predicted: &[GridIndex], truth: &[Option<GridIndex>], theta1: f64) -> GatePartition {
    let mut out = GatePartition::default();
    for (i, (p, t)) in predicted.iter().zip(truth).enumerate() {
        if let Some(t) = t {
            if p.chebyshev(t) as f64 > theta1 {
                out.classify.push(i);
            } else {
                out.correspond.push(i);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseLoss {
    pub classification: f64,
    pub correspondence: f64,
}

impl CoarseLoss {
    pub fn total(&self) -> f64 {
        self.classification + self.correspondence
    }
}

/// `L_H`: `1 − cos(f_i, f_â)` over the classification set plus the summed
/// (or per-unit averaged) L1 errors of the points assigned to each unit of
/// the correspondence set.
pub fn coarse_loss(
    partition: &GatePartition,
    src: &DescriptorGrid,
    tgt: &DescriptorGrid,
    truth: &[Option<GridIndex>],
    points: &[AssignedPoint],
    average: bool,
) -> CoarseLoss {
    let classification = partition
        .classify
        .iter()
        .filter_map(|&i| truth[i].map(|t| 1.0 - dot(src.at(i), tgt.get(t.col, t.row))))
        .fold(0.0, |a, b| a + b);
    let mut correspondence = 0.0;
    for &i in &partition.correspond {
        let (sum, n) = points
            .iter()
            .filter(|p| p.unit == i)
            .fold((0.0, 0usize), |(s, n), p| (s + p.error, n + 1));
        correspondence += if average && n > 0 { sum / n as f64 } else { sum };
    }
    CoarseLoss {
        classification,
        correspondence,
    }
}

/// True target unit per coarse source unit, from a field sampled at the
/// coarse unit centers.
pub fn true_target_units(pyramid: &PyramidConfig, coarse_field: &GroundTruthField) -> Vec<Option<GridIndex>> {
    assert_eq!(coarse_field.stride, Level::Coarse.stride());
    coarse_field
        .entries
        .iter()
        .map(|e| if e.valid { pyramid.unit_of(Level::Coarse, &e.target) } else { None })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::HomographyAttributes;
    use crate::scene::{generate_scene, project_correspondences, synth_descriptors, SceneOptions};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_of(vectors: Vec<Vec<f64>>, cols: usize) -> DescriptorGrid {
        let dim = vectors[0].len();
        let rows = vectors.len() / cols;
        DescriptorGrid {
            level: Level::Coarse,
            cols,
            rows,
            dim,
            data: vectors.concat(),
        }
    }

    fn unit(dim: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        v
    }

    #[test]
    fn coarse_match_on_identical_grids_is_identity() {
        let scene = generate_scene(0, &SceneOptions::default()).unwrap();
        let (src, _) = synth_descriptors(&scene, Level::Coarse, 64, 0.0, 0);
        let m = coarse_match(&src, &src).unwrap();
        for (i, cm) in m.iter().enumerate() {
            assert_eq!(cm.target.row * src.cols + cm.target.col, i);
        }
    }

    #[test]
    fn coarse_match_examples() {
        let tgt = grid_of((0..8).map(|k| unit(8, k)).collect(), 4);
        let src = grid_of(vec![unit(8, 6)], 1);
        let m = coarse_match(&src, &tgt).unwrap();
        assert_eq!(m[0].target, GridIndex::new(2, 1));
        // Ties resolve to the lowest index.
        let flat = grid_of(vec![vec![1.0 / 8f64.sqrt(); 8]; 4], 2);
        let m = coarse_match(&grid_of(vec![unit(8, 0)], 1), &flat).unwrap();
        assert_eq!(m[0].target, GridIndex::new(0, 0));
        assert!(coarse_match(&grid_of(vec![unit(4, 0)], 1), &flat).is_err());
    }

    #[test]
    fn groupwise_correlation_examples() {
        let ones = vec![1.0 / 8.0; 64];
        let hood: Vec<Option<&[f64]>> = vec![Some(&ones); 25];
        let out = groupwise_correlation(&ones, &hood, 8).unwrap();
        assert_eq!(out.len(), 200);
        assert!(out.iter().all(|v| (v - 1.0 / 64.0).abs() < 1e-15));

        let a: Vec<f64> = (0..16).map(|k| if k < 8 { 1.0 } else { 0.0 }).collect();
        let b: Vec<f64> = (0..16).map(|k| if k < 8 { 0.0 } else { 1.0 }).collect();
        let out = groupwise_correlation(&a, &[Some(&b), None], 2).unwrap();
        assert_eq!(out, vec![0.0; 4]);
        assert!(matches!(
            groupwise_correlation(&a, &[Some(&b)], 3),
            Err(HypothesisError::IndivisibleGroups { .. })
        ));
    }

    #[test]
    fn groupwise_correlation_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let f: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let hood: Vec<Vec<f64>> = (0..25).map(|_| (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let refs: Vec<Option<&[f64]>> = hood.iter().map(|v| Some(v.as_slice())).collect();
            let out = groupwise_correlation(&f, &refs, 8).unwrap();
            for (n, nb) in hood.iter().enumerate() {
                for g in 0..8 {
                    let mut s = 0.0;
                    for c in g * 8..g * 8 + 8 {
                        s += f[c] * nb[c];
                    }
                    assert_abs_diff_eq!(out[n * 8 + g], s / 8.0, epsilon = 1e-14);
                }
            }
        }
    }

    fn sample_pairs(h: &Homography, center: Point2) -> Vec<(Point2, Point2)> {
        let mut out = Vec::new();
        for dy in [-12.0, -4.0, 4.0, 12.0] {
            for dx in [-12.0, -4.0, 4.0, 12.0] {
                let p = center + Vector2::new(dx, dy);
                out.push((p, h.apply(&p).unwrap()));
            }
        }
        out
    }

    #[test]
    fn fit_recovers_translation() {
        let center = Vector2::new(48.0, 80.0);
        let pairs = sample_pairs(&Homography::translation(7.5, -3.0), center);
        let fit = fit_attributes(&pairs, center, &AttributeBounds::default()).unwrap();
        let a = fit.attributes;
        assert_abs_diff_eq!(a.scale, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(a.rotation, 0.0, epsilon = 1e-9);
        for q in a.perspective {
            assert_abs_diff_eq!(q, 0.0, epsilon = 1e-9);
        }
        assert_abs_diff_eq!((a.target - a.source - Vector2::new(7.5, -3.0)).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn fit_reproduces_attribute_homography() {
        let bounds = AttributeBounds::default();
        let center = Vector2::new(112.0, 48.0);
        let truth = HomographyAttributes {
            source: center,
            target: Vector2::new(130.0, 40.0),
            scale: 1.5,
            rotation: 0.3,
            perspective: [0.05; 4],
            confidence: 1.0,
        };
        let (_, truth_corners) = crate::geometry::attributes_to_virtual_corners(&truth, &bounds).unwrap();
        let h = attributes_to_homography(&truth, &bounds).unwrap();
        let fit = fit_attributes(&sample_pairs(&h, center), center, &bounds).unwrap();
        let (_, corners) = crate::geometry::attributes_to_virtual_corners(&fit.attributes, &bounds).unwrap();
        for (a, b) in corners.pts.iter().zip(truth_corners.pts.iter()) {
            assert!((a - b).norm() < 1e-6);
        }
        assert!(fit.attribute_residual < 1e-6);
        // Rotation is gauge-invariant here since I + M is symmetric.
        assert_abs_diff_eq!(fit.attributes.rotation, 0.3, epsilon = 1e-9);
    }

    #[test]
    fn fit_rejects_degenerate_layouts() {
        let center = Vector2::new(0.0, 0.0);
        let pts = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (5.0, -1.0)];
        let pairs: Vec<_> = pts.iter().map(|&(x, y)| (Vector2::new(x, y), Vector2::new(x, y))).collect();
        assert!(matches!(
            fit_attributes(&pairs, center, &AttributeBounds::default()),
            Err(HypothesisError::DegenerateFit(_))
        ));
        assert!(matches!(
            fit_attributes(&pairs[..3], center, &AttributeBounds::default()),
            Err(HypothesisError::DegenerateFit(_))
        ));
        // A strong zoom falls outside the scale bounds.
        let zoom = Homography::new(nalgebra::Matrix3::new(20.0, 0.0, 0.0, 0.0, 20.0, 0.0, 0.0, 0.0, 1.0)).unwrap();
        assert!(matches!(
            fit_attributes(&sample_pairs(&zoom, center), center, &AttributeBounds::default()),
            Err(HypothesisError::OutOfModel(_))
        ));
    }

    #[test]
    fn supervision_assignment_examples() {
        let id = Homography::identity();
        let all = [Some(&id); 9];
        let p = Vector2::new(3.0, 4.0);
        assert_eq!(assign_supervision_hypothesis(&p, &(p + Vector2::new(1.0, 0.0)), &all).unwrap(), 5);

        let shift = Homography::translation(2.0, 0.0);
        let mut one = [Some(&id); 9];
        one[7] = Some(&shift);
        assert_eq!(assign_supervision_hypothesis(&p, &(p + Vector2::new(2.0, 0.0)), &one).unwrap(), 8);

        assert_eq!(
            assign_supervision_hypothesis(&p, &p, &[None; 9]),
            Err(HypothesisError::AllInvalid)
        );
    }

    #[test]
    fn supervision_assignment_matches_exhaustive_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let hs: Vec<Homography> = (0..9)
                .map(|_| Homography::translation(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
                .collect();
            let mut hyps: [Option<&Homography>; 9] = std::array::from_fn(|k| Some(&hs[k]));
            if rng.random_bool(0.3) {
                hyps[rng.random_range(0..9)] = None;
            }
            let p_s = Vector2::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
            let p_t = p_s + Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let got = assign_supervision_hypothesis(&p_s, &p_t, &hyps).unwrap();
            let mut best = (f64::INFINITY, 0);
            for (k, h) in hyps.iter().enumerate() {
                if let Some(h) = h {
                    let e = hypothesis_point_error(h, &p_s, &p_t).unwrap();
                    if e < best.0 {
                        best = (e, k + 1);
                    }
                }
            }
            assert_eq!(got, best.1);
        }
    }

    #[test]
    fn point_error_examples() {
        let id = Homography::identity();
        let p = Vector2::new(0.0, 0.0);
        assert_eq!(hypothesis_point_error(&id, &p, &p).unwrap(), 0.0);
        assert_eq!(hypothesis_point_error(&id, &p, &Vector2::new(1.0, 2.0)).unwrap(), 3.0);
    }

    #[test]
    fn gate_partition_examples() {
        let a = vec![GridIndex::new(3, 3), GridIndex::new(0, 0)];
        let p = loss_gate_partition(&a, &[Some(a[0]), Some(a[1])], 1.0);
        assert_eq!(p.correspond, vec![0, 1]);
        assert!(p.classify.is_empty());

        let p = loss_gate_partition(&[GridIndex::new(8, 2)], &[Some(GridIndex::new(3, 2))], 1.0);
        assert_eq!(p.classify, vec![0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred: Vec<_> = (0..300).map(|_| GridIndex::new(rng.random_range(0..20), rng.random_range(0..15))).collect();
        let truth: Vec<_> = (0..300)
            .map(|_| rng.random_bool(0.9).then(|| GridIndex::new(rng.random_range(0..20), rng.random_range(0..15))))
            .collect();
        let p = loss_gate_partition(&pred, &truth, 2.0);
        for i in 0..300 {
            let expect_q1 = truth[i].is_some_and(|t| {
                (pred[i].col as i64 - t.col as i64).abs().max((pred[i].row as i64 - t.row as i64).abs()) > 2
            });
            assert_eq!(p.classify.contains(&i), expect_q1);
            assert_eq!(p.correspond.contains(&i), truth[i].is_some() && !expect_q1);
        }
    }

    #[test]
    fn single_plane_hypotheses_match_plane_homography() {
        let opts = SceneOptions {
            n_planes: 1,
            fronto_parallel: true,
            ..Default::default()
        };
        let scene = generate_scene(0, &opts).unwrap();
        let pyramid = PyramidConfig::new(scene.image_size);
        let field = project_correspondences(&scene, 4);
        let cfg = HypothesisConfig {
            noise: AttributeNoise::NONE,
            ..Default::default()
        };
        let grid = build_hypothesis_grid(&pyramid, None, &field, &cfg, 0);
        assert!(grid.valid_count() > 0);
        let h_plane = scene.plane_homography(0);
        for h in grid.cells.iter().flatten() {
            let src = base_quad::<f64>().translated(&h.attributes.source);
            for p in src.pts {
                let err = (h.homography.apply(&p).unwrap() - h_plane.apply(&p).unwrap()).norm();
                assert!(err < 1e-6, "corner error {err}");
            }
        }
        assert_eq!(grid, build_hypothesis_grid(&pyramid, None, &field, &cfg, 0));
    }

    #[test]
    fn units_without_valid_targets_are_invalid() {
        let scene = generate_scene(5, &SceneOptions::default()).unwrap();
        let pyramid = PyramidConfig::new(scene.image_size);
        let field = project_correspondences(&scene, 4);
        let grid = build_hypothesis_grid(&pyramid, None, &field, &HypothesisConfig::default(), 0);
        for i in 0..grid.cells.len() {
            let (uc, ur) = (i % grid.cols, i / grid.cols);
            let any_valid = (ur * 8..ur * 8 + 8).any(|r| (uc * 8..uc * 8 + 8).any(|c| field.entry(c, r).valid));
            if !any_valid {
                assert!(grid.cells[i].is_none());
            }
        }
    }

    #[test]
    fn coarse_loss_examples() {
        let scene = generate_scene(6, &SceneOptions::default()).unwrap();
        let pyramid = PyramidConfig::new(scene.image_size);
        let (src, tgt) = synth_descriptors(&scene, Level::Coarse, 64, 0.0, 0);
        let truth = true_target_units(&pyramid, &project_correspondences(&scene, 32));
        let predicted: Vec<GridIndex> = truth.iter().map(|t| t.unwrap_or(GridIndex::new(0, 0))).collect();
        let part = loss_gate_partition(&predicted, &truth, 1.0);
        assert!(part.classify.is_empty());

        // Exact hypotheses and points lying on them: zero loss.
        let points: Vec<AssignedPoint> = part
            .correspond
            .iter()
            .map(|&i| AssignedPoint {
                source: Vector2::new(1.0, 1.0),
                target: Vector2::new(1.0, 1.0),
                unit: i,
                error: 0.0,
            })
            .collect();
        let loss = coarse_loss(&part, &src, &tgt, &truth, &points, false);
        assert_eq!(loss.total(), 0.0);

        // Classification terms with identical features vanish.
        let all_q1 = GatePartition {
            classify: (0..truth.len()).filter(|&i| truth[i].is_some()).collect(),
            correspond: vec![],
        };
        let same: Vec<Option<GridIndex>> =
            (0..truth.len()).map(|i| truth[i].map(|_| GridIndex::new(i % src.cols, i / src.cols))).collect();
        let loss = coarse_loss(&all_q1, &src, &src, &same, &[], false);
        assert_abs_diff_eq!(loss.total(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn coarse_loss_matches_term_by_term_sum() {
        let scene = generate_scene(7, &SceneOptions::default()).unwrap();
        let pyramid = PyramidConfig::new(scene.image_size);
        let (src, tgt) = synth_descriptors(&scene, Level::Coarse, 64, 0.1, 1);
        let truth = true_target_units(&pyramid, &project_correspondences(&scene, 32));
        let coarse = coarse_match(&src, &tgt).unwrap();
        let predicted: Vec<GridIndex> = coarse.iter().map(|m| m.target).collect();
        let part = loss_gate_partition(&predicted, &truth, 0.0);
        let field = project_correspondences(&scene, 4);
        let grid = build_hypothesis_grid(&pyramid, Some(&coarse), &field, &HypothesisConfig::default(), 3);
        let samples = crate::scene::sample_matches(&field, 400, 2).unwrap();
        let points = assign_points(&pyramid, &grid, &samples);
        let loss = coarse_loss(&part, &src, &tgt, &truth, &points, false);

        let mut expected = 0.0;
        for &i in &part.classify {
            let t = truth[i].unwrap();
            expected += 1.0 - dot(src.at(i), tgt.get(t.col, t.row));
        }
        for p in &points {
            if part.correspond.contains(&p.unit) {
                let h = &grid.cells[p.unit].unwrap().homography;
                expected += hypothesis_point_error(h, &p.source, &p.target).unwrap();
            }
        }
        assert_abs_diff_eq!(loss.total(), expected, epsilon = 1e-9);
        assert!(loss.total() >= 0.0);
    }
}
