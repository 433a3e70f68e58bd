//! Relative pose recovery, match metrics and the variant ablation.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{hartley, solve_homography_points, CameraIntrinsics};
use crate::pipeline::{run_pipeline, PipelineConfig, PipelineError, Variant};
use crate::rng::stage_rng;
use crate::scene::{generate_scene, GroundTruth, ImageSize, SceneError, SceneOptions};
use crate::{Homography, Point2, Pose};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("pose estimation failed: {0}")]
    EstimationFailed(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub threshold_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold_px: 0.25,
            max_iterations: 2000,
            confidence: 0.999,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    pub rotation: Matrix3<f64>,
    /// Unit translation direction of camera 2 in its own frame, `x₂ = R x₁ + t`.
    pub translation: Vector3<f64>,
    pub inliers: usize,
    /// The matches are explained by a rotation alone; `translation` is
    /// arbitrary.
    pub translation_degenerate: bool,
}

/// Normalized 8-point essential matrix over `n ≥ 8` calibrated pairs.
fn eight_point(x1: &[Vector2<f64>], x2: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let (n1, t1) = hartley(x1);
    let (n2, t2) = hartley(x2);
    let rows = n1.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (p, q)) in n1.iter().zip(&n2).enumerate() {
        let row = [q.x * p.x, q.x * p.y, q.x, q.y * p.x, q.y * p.y, q.y, p.x, p.y, 1.0];
        for (c, v) in row.iter().enumerate() {
            a[(k, c)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (k_min, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let e = v_t.row(k_min);
    let f = Matrix3::new(e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]);
    let e = t2.transpose() * f * t1;
    // Project onto the essential manifold: singular values (1, 1, 0).
    let svd = e.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut d = Matrix3::zeros();
    d[(order[0], order[0])] = 1.0;
    d[(order[1], order[1])] = 1.0;
    let e = u * d * v_t;
    e.iter().all(|v| v.is_finite()).then_some(e)
}

/// Squared Sampson distance of a calibrated pair.
fn sampson(e: &Matrix3<f64>, p: &Vector2<f64>, q: &Vector2<f64>) -> f64 {
    let x1 = Vector3::new(p.x, p.y, 1.0);
    let x2 = Vector3::new(q.x, q.y, 1.0);
    let ex1 = e * x1;
    let etx2 = e.transpose() * x2;
    let num = x2.dot(&ex1).powi(2);
    let den = ex1.x.powi(2) + ex1.y.powi(2) + etx2.x.powi(2) + etx2.y.powi(2);
    if den > 0.0 {
        num / den
    } else {
        f64::INFINITY
    }
}

/// Depths `(λ₁, λ₂)` with `λ₂ x₂ ≈ λ₁ R x₁ + t`, least squares.
fn depths(r: &Matrix3<f64>, t: &Vector3<f64>, p: &Vector2<f64>, q: &Vector2<f64>) -> (f64, f64) {
    let a = r * Vector3::new(p.x, p.y, 1.0);
    let b = Vector3::new(q.x, q.y, 1.0);
    // [a, −b]·(λ₁, λ₂) = −t
    let (aa, ab, bb) = (a.dot(&a), a.dot(&b), b.dot(&b));
    let (at, bt) = (a.dot(t), b.dot(t));
    let det = aa * bb - ab * ab;
    if det.abs() < 1e-15 {
        return (0.0, 0.0);
    }
    let l1 = (-at * bb + ab * bt) / det;
    let l2 = (aa * bt - ab * at) / det;
    (l1, l2)
}

/// The (R, t) among the four decompositions with most points in front of
/// both cameras.
fn decompose(e: &Matrix3<f64>, x1: &[Vector2<f64>], x2: &[Vector2<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let svd = e.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut v_t = svd.v_t.unwrap();
    // Sort so the null direction is last.
    let k0 = (0..3).min_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j])).unwrap();
    if k0 != 2 {
        u.swap_columns(k0, 2);
        v_t.swap_rows(k0, 2);
    }
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t: Vector3<f64> = u.column(2).into();
    let candidates = [
        (u * w * v_t, t),
        (u * w * v_t, -t),
        (u * w.transpose() * v_t, t),
        (u * w.transpose() * v_t, -t),
    ];
    let score = |(r, t): &(Matrix3<f64>, Vector3<f64>)| {
        x1.iter()
            .zip(x2)
            .filter(|(p, q)| {
                let (a, b) = depths(r, t, p, q);
                a > 0.0 && b > 0.0
            })
            .count()
    };
    let mut best = candidates[0];
    let mut best_score = score(&best);
    for c in &candidates[1..] {
        let s = score(c);
        if s > best_score {
            best = *c;
            best_score = s;
        }
    }
    best
}

/// Rotation best aligning bearings `a` onto `b`.
fn kabsch(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Matrix3<f64> {
    let mut h = Matrix3::zeros();
    for (x, y) in a.iter().zip(b) {
        h += y * x.transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

fn rotation_residual(r: &Matrix3<f64>, p: &Vector2<f64>, q: &Vector2<f64>) -> f64 {
    let x = r * Vector3::new(p.x, p.y, 1.0);
    if x.z <= 0.0 {
        return f64::INFINITY;
    }
    (Vector2::new(x.x / x.z, x.y / x.z) - q).norm()
}

fn bearing(p: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(p.x, p.y, 1.0).normalize()
}

fn adaptive_bound(inlier_ratio: f64, sample: usize, confidence: f64) -> f64 {
    let good = inlier_ratio.powi(sample as i32);
    if good >= 1.0 {
        return 0.0;
    }
    let denom = (-good).ln_1p();
    if denom >= 0.0 {
        return f64::INFINITY;
    }
    (1.0 - confidence).ln() / denom
}

/// Essential-matrix RANSAC over pixel matches, decomposed into a relative
/// pose. Deterministic for a given `seed`.
pub fn estimate_relative_pose(
    matches: &[(Point2, Point2)],
    k1: &CameraIntrinsics<f64>,
    k2: &CameraIntrinsics<f64>,
    cfg: &RansacConfig,
    seed: u64,
) -> Result<PoseEstimate, EvaluationError> {
    let n = matches.len();
    if n < 8 {
        return Err(EvaluationError::EstimationFailed(format!("{n} matches, need 8")));
    }
    let norm = |k: &CameraIntrinsics<f64>, p: &Point2| Vector2::new((p.x - k.cx) / k.fx, (p.y - k.cy) / k.fy);
    let x1: Vec<Vector2<f64>> = matches.iter().map(|m| norm(k1, &m.0)).collect();
    let x2: Vec<Vector2<f64>> = matches.iter().map(|m| norm(k2, &m.1)).collect();
    let thr = cfg.threshold_px / ((k1.fx + k1.fy + k2.fx + k2.fy) / 4.0);
    let thr2 = thr * thr;
    let mut rng = stage_rng(seed, "ransac");

    let inliers_of = |e: &Matrix3<f64>| -> Vec<usize> { (0..n).filter(|&i| sampson(e, &x1[i], &x2[i]) <= thr2).collect() };
    let mut best: Vec<usize> = Vec::new();
    let mut best_e = None;
    let mut iter = 0;
    let mut bound = cfg.max_iterations as f64;
    while (iter as f64) < bound && iter < cfg.max_iterations {
        iter += 1;
        let idx = sample(&mut rng, n, 8);
        let s1: Vec<_> = idx.iter().map(|i| x1[i]).collect();
        let s2: Vec<_> = idx.iter().map(|i| x2[i]).collect();
        let Some(e) = eight_point(&s1, &s2) else { continue };
        let inl = inliers_of(&e);
        if inl.len() > best.len() {
            bound = adaptive_bound(inl.len() as f64 / n as f64, 8, cfg.confidence);
            best = inl;
            best_e = Some(e);
        }
    }
    // Refit on the consensus set while it keeps growing.
    while best.len() >= 8 {
        let s1: Vec<_> = best.iter().map(|&i| x1[i]).collect();
        let s2: Vec<_> = best.iter().map(|&i| x2[i]).collect();
        let Some(e) = eight_point(&s1, &s2) else { break };
        let inl = inliers_of(&e);
        if inl.len() <= best.len() {
            if inl.len() == best.len() {
                best_e = Some(e);
            }
            break;
        }
        best = inl;
        best_e = Some(e);
    }

    // Rotation-only model, two bearings per sample.
    let mut rot_best: Vec<usize> = Vec::new();
    for _ in 0..200 {
        let idx = sample(&mut rng, n, 2);
        let a: Vec<_> = idx.iter().map(|i| bearing(&x1[i])).collect();
        let b: Vec<_> = idx.iter().map(|i| bearing(&x2[i])).collect();
        let r = kabsch(&a, &b);
        let inl: Vec<usize> = (0..n).filter(|&i| rotation_residual(&r, &x1[i], &x2[i]) <= thr).collect();
        if inl.len() > rot_best.len() {
            rot_best = inl;
        }
    }

    if rot_best.len() >= 8 && rot_best.len() as f64 >= 0.9 * best.len() as f64 {
        let a: Vec<_> = rot_best.iter().map(|&i| bearing(&x1[i])).collect();
        let b: Vec<_> = rot_best.iter().map(|&i| bearing(&x2[i])).collect();
        let translation = match best_e {
            Some(e) if best.len() >= 8 => {
                let (s1, s2): (Vec<_>, Vec<_>) = best.iter().map(|&i| (x1[i], x2[i])).unzip();
                decompose(&e, &s1, &s2).1
            }
            _ => Vector3::z(),
        };
        return Ok(PoseEstimate {
            rotation: kabsch(&a, &b),
            translation,
            inliers: rot_best.len(),
            translation_degenerate: true,
        });
    }

    let Some(e) = best_e.filter(|_| best.len() >= 8) else {
        return Err(EvaluationError::EstimationFailed(format!("{} inliers", best.len())));
    };
    let (s1, s2): (Vec<_>, Vec<_>) = best.iter().map(|&i| (x1[i], x2[i])).unzip();
    let (rotation, translation) = decompose(&e, &s1, &s2);
    Ok(PoseEstimate {
        rotation,
        translation: translation.normalize(),
        inliers: best.len(),
        translation_degenerate: false,
    })
}

fn angle_deg(cos: f64) -> f64 {
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Rotation and translation-direction errors in degrees; the translation
/// error ignores sign.
pub fn pose_error(est: &PoseEstimate, gt: &Pose) -> (f64, f64) {
    let r = est.rotation * gt.rotation.transpose();
    let rot = angle_deg((r.trace() - 1.0) / 2.0);
    let (a, b) = (est.translation.norm(), gt.translation.norm());
    let trans = if a < 1e-12 || b < 1e-12 {
        0.0
    } else {
        let t = angle_deg(est.translation.dot(&gt.translation) / (a * b));
        t.min(180.0 - t)
    };
    (rot, trans)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseErrorMode {
    #[default]
    Max,
    Rotation,
    Translation,
}

impl PoseErrorMode {
    pub fn combine(self, rot: f64, trans: f64) -> f64 {
        match self {
            PoseErrorMode::Max => rot.max(trans),
            PoseErrorMode::Rotation => rot,
            PoseErrorMode::Translation => trans,
        }
    }
}

/// Area under the empirical error CDF up to `threshold`, normalized.
pub fn auc(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    let sum: f64 = errors.iter().map(|&e| (threshold - e).max(0.0)).sum();
    sum / (errors.len() as f64 * threshold)
}

/// Mean distance between the image corners mapped by either homography.
pub fn corner_error(h_est: &Homography, h_gt: &Homography, size: ImageSize) -> f64 {
    size.corners()
        .iter()
        .map(|c| match (h_est.apply(c), h_gt.apply(c)) {
            (Ok(a), Ok(b)) => (a - b).norm(),
            _ => f64::INFINITY,
        })
        .sum::<f64>()
        / 4.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointAccuracy {
    pub value: f64,
    pub evaluated: usize,
    /// No match had a ground-truth target.
    pub warning: bool,
}

pub fn point_accuracy(matches: &[(Point2, Point2)], truth: &dyn GroundTruth, threshold_px: f64) -> PointAccuracy {
    let (mut hits, mut evaluated) = (0usize, 0usize);
    for (s, t) in matches {
        if let Some(g) = truth.target_at(s) {
            evaluated += 1;
            hits += ((t - g).norm() <= threshold_px) as usize;
        }
    }
    PointAccuracy {
        value: if evaluated > 0 { hits as f64 / evaluated as f64 } else { 0.0 },
        evaluated,
        warning: evaluated == 0,
    }
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub scenes: usize,
    pub base_seed: u64,
    pub scene: SceneOptions,
    pub pipeline: PipelineConfig,
    pub ransac: RansacConfig,
    pub error_mode: PoseErrorMode,
    pub variants: Vec<Variant>,
    /// Matches below this confidence are ignored when fitting a
    /// single-plane homography for the corner error.
    pub min_confidence: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            scenes: 10,
            base_seed: 0,
            scene: SceneOptions::default(),
            pipeline: PipelineConfig::default(),
            ransac: RansacConfig::default(),
            error_mode: PoseErrorMode::default(),
            variants: Variant::ALL.to_vec(),
            min_confidence: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub seed: u64,
    pub variant: Variant,
    pub planes: usize,
    pub matches: usize,
    pub matches_with_truth: usize,
    pub median_endpoint_px: f64,
    pub point_accuracy_1px: f64,
    pub rotation_error_deg: f64,
    pub translation_error_deg: f64,
    pub pose_failed: bool,
    pub corner_error_px: Option<f64>,
    pub inner_products: u64,
    pub queries: u64,
}

/// Evaluates one pipeline variant on one scene.
pub fn evaluate_scene(seed: u64, variant: Variant, cfg: &AblationConfig) -> Result<SceneMetrics, EvaluationError> {
    let scene = generate_scene(seed, &cfg.scene)?;
    let out = run_pipeline(&scene, variant, &cfg.pipeline, seed)?;
    let pairs: Vec<(Point2, Point2)> = out.matches.iter().map(|m| (m.source, m.best_target())).collect();
    let mut endpoint: Vec<f64> = pairs
        .iter()
        .filter_map(|(s, t)| scene.target_at(s).map(|g| (t - g).norm()))
        .collect();
    let acc = point_accuracy(&pairs, &scene, 1.0);
    let (rot, trans, failed) = match estimate_relative_pose(
        &pairs,
        &scene.cam1.intrinsics,
        &scene.cam2.intrinsics,
        &cfg.ransac,
        seed,
    ) {
        Ok(est) => {
            let (r, t) = pose_error(&est, scene.relative_pose());
            (r, t, false)
        }
        Err(_) => (f64::INFINITY, f64::INFINITY, true),
    };
    let corner_error_px = (scene.planes.len() == 1).then(|| {
        let confident: Vec<_> = out
            .matches
            .iter()
            .filter(|m| m.confidence.unwrap_or(1.0) >= cfg.min_confidence)
            .map(|m| (m.source, m.best_target()))
            .collect();
        solve_homography_points(&confident)
            .map(|h| corner_error(&h, &scene.plane_homography(0), scene.image_size))
            .unwrap_or(f64::INFINITY)
    });
    Ok(SceneMetrics {
        seed,
        variant,
        planes: scene.planes.len(),
        matches: pairs.len(),
        matches_with_truth: endpoint.len(),
        median_endpoint_px: median(&mut endpoint),
        point_accuracy_1px: acc.value,
        rotation_error_deg: rot,
        translation_error_deg: trans,
        pose_failed: failed,
        corner_error_px,
        inner_products: out.inner_products,
        queries: out.queries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: Variant,
    pub scenes: usize,
    pub matches: usize,
    pub median_endpoint_px: f64,
    pub auc_5: f64,
    pub auc_10: f64,
    pub auc_20: f64,
    pub point_accuracy_1px: f64,
    pub pose_failures: usize,
    /// Fractions of single-plane scenes with corner error within 1, 3, 5 px.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corner_within: Option<[f64; 3]>,
    pub inner_products: u64,
    pub queries: u64,
}

impl MetricReport {
    pub fn aggregate(variant: Variant, rows: &[&SceneMetrics], mode: PoseErrorMode) -> Self {
        let errors: Vec<f64> = rows
            .iter()
            .map(|r| mode.combine(r.rotation_error_deg, r.translation_error_deg))
            .collect();
        let mut medians: Vec<f64> = rows.iter().map(|r| r.median_endpoint_px).filter(|v| !v.is_nan()).collect();
        let corners: Vec<f64> = rows.iter().filter_map(|r| r.corner_error_px).collect();
        let corner_within = (!corners.is_empty()).then(|| {
            [1.0, 3.0, 5.0].map(|t| corners.iter().filter(|&&e| e <= t).count() as f64 / corners.len() as f64)
        });
        let with_truth: usize = rows.iter().map(|r| r.matches_with_truth).sum();
        let hits: f64 = rows.iter().map(|r| r.point_accuracy_1px * r.matches_with_truth as f64).sum();
        Self {
            variant,
            scenes: rows.len(),
            matches: rows.iter().map(|r| r.matches).sum(),
            median_endpoint_px: median(&mut medians),
            auc_5: auc(&errors, 5.0),
            auc_10: auc(&errors, 10.0),
            auc_20: auc(&errors, 20.0),
            point_accuracy_1px: if with_truth > 0 { hits / with_truth as f64 } else { 0.0 },
            pose_failures: rows.iter().filter(|r| r.pose_failed).count(),
            corner_within,
            inner_products: rows.iter().map(|r| r.inner_products).sum(),
            queries: rows.iter().map(|r| r.queries).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub per_scene: Vec<SceneMetrics>,
    pub reports: Vec<MetricReport>,
}

/// Runs every variant over the seeded scene set `base_seed..base_seed+scenes`.
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationResult, EvaluationError> {
    let jobs: Vec<(u64, Variant)> = (0..cfg.scenes as u64)
        .flat_map(|k| cfg.variants.iter().map(move |&v| (cfg.base_seed + k, v)))
        .collect();
    let per_scene = jobs
        .par_iter()
        .map(|&(seed, v)| evaluate_scene(seed, v, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let reports = cfg
        .variants
        .iter()
        .map(|&v| {
            let rows: Vec<&SceneMetrics> = per_scene.iter().filter(|r| r.variant == v).collect();
            MetricReport::aggregate(v, &rows, cfg.error_mode)
        })
        .collect();
    Ok(AblationResult { per_scene, reports })
}

/// A random rotation, uniform enough for property tests.
pub fn random_rotation<R: Rng>(rng: &mut R, max_angle: f64) -> Matrix3<f64> {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-6 { Vector3::z() } else { axis.normalize() };
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis), rng.random_range(-max_angle..max_angle))
        .into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{default_intrinsics, project_correspondences, sample_matches};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene_matches(seed: u64, n: usize) -> (crate::scene::PlanarScene, Vec<(Point2, Point2)>) {
        let scene = generate_scene(seed, &SceneOptions::default()).unwrap();
        let field = project_correspondences(&scene, 4);
        let m = sample_matches(&field, n, seed).unwrap();
        (scene, m.iter().map(|m| (m.source, m.target)).collect())
    }

    #[test]
    fn perfect_matches_recover_pose() {
        for seed in 0..5 {
            let (scene, matches) = scene_matches(seed, 500);
            let est = estimate_relative_pose(
                &matches,
                &scene.cam1.intrinsics,
                &scene.cam2.intrinsics,
                &RansacConfig::default(),
                seed,
            )
            .unwrap();
            let (r, t) = pose_error(&est, scene.relative_pose());
            assert!(!est.translation_degenerate);
            assert!(r < 0.1, "rotation error {r}");
            assert!(t < 0.5, "translation error {t}");
            assert_abs_diff_eq!(est.translation.norm(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn pure_rotation_is_flagged() {
        let k = default_intrinsics(ImageSize::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = random_rotation(&mut rng, 0.2);
        let mut matches = Vec::new();
        while matches.len() < 300 {
            let p = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let x = r * k.unproject(&p) * rng.random_range(2.0..20.0);
            if let Some(q) = k.project(&x) {
                matches.push((p, q));
            }
        }
        let est = estimate_relative_pose(&matches, &k, &k, &RansacConfig::default(), 1).unwrap();
        assert!(est.translation_degenerate);
        let gt = Pose::new(r, Vector3::zeros()).unwrap();
        assert!(pose_error(&est, &gt).0 < 0.5);
    }

    #[test]
    fn adaptive_bound_handles_tiny_ratios() {
        assert!(adaptive_bound(15.0 / 4141.0, 8, 0.999) > 1e12);
        assert_eq!(adaptive_bound(0.0, 8, 0.999), f64::INFINITY);
        assert_eq!(adaptive_bound(1.0, 8, 0.999), 0.0);
        let b = adaptive_bound(0.5, 8, 0.999);
        assert!((b - 0.001f64.ln() / (1.0 - 0.5f64.powi(8)).ln()).abs() < 1e-9);
    }

    #[test]
    fn too_few_matches_fail() {
        let k = default_intrinsics(ImageSize::default());
        let m = vec![(Point2::zeros(), Point2::zeros()); 7];
        assert!(matches!(
            estimate_relative_pose(&m, &k, &k, &RansacConfig::default(), 0),
            Err(EvaluationError::EstimationFailed(_))
        ));
    }

    #[test]
    fn pose_estimation_is_deterministic() {
        let (scene, mut matches) = scene_matches(3, 300);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for m in matches.iter_mut().take(60) {
            m.1 += Vector2::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
        }
        let run = || {
            estimate_relative_pose(&matches, &scene.cam1.intrinsics, &scene.cam2.intrinsics, &RansacConfig::default(), 4)
                .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let (r, _) = pose_error(&a, scene.relative_pose());
        assert!(r < 0.5);
    }

    #[test]
    fn pose_error_examples() {
        let id = Pose::identity();
        let est = |r: Matrix3<f64>, t: Vector3<f64>| PoseEstimate {
            rotation: r,
            translation: t,
            inliers: 0,
            translation_degenerate: false,
        };
        let gt = Pose::new(Matrix3::identity(), Vector3::x()).unwrap();
        assert_eq!(pose_error(&est(Matrix3::identity(), Vector3::x()), &gt), (0.0, 0.0));
        let rz = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), 10f64.to_radians()).into_inner();
        assert_abs_diff_eq!(pose_error(&est(rz, Vector3::x()), &gt).0, 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(pose_error(&est(Matrix3::identity(), Vector3::y()), &gt).1, 90.0, epsilon = 1e-9);
        assert_abs_diff_eq!(pose_error(&est(Matrix3::identity(), -Vector3::x()), &gt).1, 0.0, epsilon = 1e-9);
        assert_eq!(pose_error(&est(Matrix3::identity(), Vector3::x()), &id).1, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng, std::f64::consts::PI);
            let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let g = Pose::new(r, t).unwrap();
            let (a, b) = pose_error(&est(r, t.normalize()), &g);
            assert!(a < 1e-5 && b < 1e-5, "{a} {b}");
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.0, 0.0], 5.0), 1.0);
        assert_eq!(auc(&[0.0, f64::INFINITY], 10.0), 0.5);
        assert_eq!(auc(&[2.5], 5.0), 0.5);
        assert_eq!(auc(&[], 5.0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut errs: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..30.0)).collect();
        let a = auc(&errs, 10.0);
        errs.reverse();
        assert_eq!(auc(&errs, 10.0), a);
        let better: Vec<f64> = errs.iter().map(|e| e * 0.5).collect();
        assert!(auc(&better, 10.0) >= a);
    }

    #[test]
    fn corner_error_examples() {
        let size = ImageSize::default();
        let id = Homography::identity();
        assert_eq!(corner_error(&id, &id, size), 0.0);
        assert_abs_diff_eq!(corner_error(&Homography::translation(1.0, 0.0), &id, size), 1.0, epsilon = 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let mut m = Matrix3::identity();
            for v in m.iter_mut() {
                *v += rng.random_range(-1e-4..1e-4);
            }
            let a = Homography::new(m).unwrap();
            let b = Homography::translation(rng.random_range(-3.0..3.0), 0.5);
            let brute: f64 = size
                .corners()
                .iter()
                .map(|c| (a.apply(c).unwrap() - b.apply(c).unwrap()).norm())
                .sum::<f64>()
                / 4.0;
            assert_abs_diff_eq!(corner_error(&a, &b, size), brute, epsilon = 1e-12);
            assert_eq!(corner_error(&a, &b, size), corner_error(&b, &a, size));
        }
    }

    #[test]
    fn point_accuracy_examples() {
        let (scene, matches) = scene_matches(1, 200);
        assert_eq!(point_accuracy(&matches, &scene, 1.0).value, 1.0);
        let off: Vec<_> = matches.iter().map(|(s, t)| (*s, t + Vector2::new(2.0, 0.0))).collect();
        assert_eq!(point_accuracy(&off, &scene, 1.0).value, 0.0);
        let mixed: Vec<_> = matches
            .iter()
            .enumerate()
            .map(|(i, (s, t))| (*s, t + Vector2::new((i % 3) as f64 * 0.6, 0.0)))
            .collect();
        let expected = mixed.iter().enumerate().filter(|(i, _)| i % 3 != 2).count() as f64 / mixed.len() as f64;
        assert_abs_diff_eq!(point_accuracy(&mixed, &scene, 1.0).value, expected, epsilon = 1e-12);
        let none = point_accuracy(&[(Point2::new(-5.0, -5.0), Point2::zeros())], &scene, 1.0);
        assert!(none.warning && none.value == 0.0);
    }

    #[test]
    fn single_plane_quantization_bounds() {
        let mut cfg = AblationConfig {
            scenes: 1,
            scene: SceneOptions {
                n_planes: 1,
                fronto_parallel: true,
                ..Default::default()
            },
            ..Default::default()
        };
        cfg.pipeline.descriptors.noise_sigma = 0.0;
        cfg.pipeline.hypothesis.noise = crate::hypothesis::AttributeNoise::NONE;
        let with_h = evaluate_scene(0, Variant::Base32WithH, &cfg).unwrap();
        let no_h = evaluate_scene(0, Variant::Base32NoH, &cfg).unwrap();
        assert!(with_h.median_endpoint_px < 1e-6);
        assert!(no_h.median_endpoint_px > 1.0 && no_h.median_endpoint_px <= 16.0 * 2f64.sqrt());
        assert!(with_h.corner_error_px.unwrap() < 1e-3);
    }
}
