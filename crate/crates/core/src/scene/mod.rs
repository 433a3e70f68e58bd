//! Synthetic piecewise-planar two-view scenes and their analytic ground truth.
//!
//! Camera 1 sits at the origin looking down +z (x right, y down). Planes are
//! bounded rectangles in camera-1 coordinates. Pixel coordinates are
//! continuous with the image spanning `[0, W] × [0, H]`; pixel `(i, j)` has its
//! center at `(i + 0.5, j + 0.5)`.

mod descriptors;
mod field;

pub use descriptors::{
    dot, synth_descriptors, DescriptorConfig, DescriptorGrid, DescriptorSynth, Embedding, Level,
};
pub use field::{project_correspondences, sample_matches, FieldEntry, GroundTruthField, SampledMatch};

use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{plane_induced_homography, CameraIntrinsics, CameraPose, GeometryError, Plane3D};
use crate::rng::stage_rng;
use crate::{Homography, Point2};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene generation failed after {attempts} attempts: {reason}")]
    GenerationFailed { attempts: usize, reason: String },
    #[error("invalid scene parameters: {0}")]
    InvalidParameters(String),
    #[error("need {requested} valid correspondences, field has {available}")]
    InsufficientValid { requested: usize, available: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub const MAX_PLANES: usize = 16;
pub const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Result<Self, SceneError> {
        if width == 0 || height == 0 || width % 32 != 0 || height % 32 != 0 {
            return Err(SceneError::InvalidParameters(format!(
                "image size {width}x{height} must be positive multiples of 32"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= self.width as f64 && p.y <= self.height as f64
    }

    pub fn corners(&self) -> [Point2; 4] {
        let (w, h) = (self.width as f64, self.height as f64);
        [
            Vector2::new(0.0, 0.0),
            Vector2::new(w, 0.0),
            Vector2::new(w, h),
            Vector2::new(0.0, h),
        ]
    }
}

impl Default for ImageSize {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
        }
    }
}

/// A plane with a rectangular extent `center + a·axis_u + b·axis_v`,
/// `|a| ≤ half_u`, `|b| ≤ half_v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneRegion {
    pub plane: Plane3D<f64>,
    pub center: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
}

impl PlaneRegion {
    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        let d = x - self.center;
        d.dot(&self.axis_u).abs() <= self.half_u && d.dot(&self.axis_v).abs() <= self.half_v
    }

    /// Ray parameter at which `origin + λ·dir` enters the bounded region.
    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let n = &self.plane.normal;
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let lambda = (self.plane.distance - n.dot(origin)) / denom;
        if !(lambda > 1e-9) {
            return None;
        }
        self.contains(&(origin + dir * lambda)).then_some(lambda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics<f64>,
    /// Camera-1 frame to this camera's frame.
    pub pose: CameraPose<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub plane_id: usize,
    /// Intersection in camera-1 coordinates.
    pub point: Vector3<f64>,
    /// Depth along the casting camera's optical axis.
    pub depth: f64,
}

/// Ground-truth correspondence of one source pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub target: Point2,
    pub plane_id: usize,
    pub world: Vector3<f64>,
}

/// Anything that can report the true target of a source point.
pub trait GroundTruth {
    fn target_at(&self, p: &Point2) -> Option<Point2>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanarScene {
    pub seed: u64,
    pub image_size: ImageSize,
    pub planes: Vec<PlaneRegion>,
    pub cam1: Camera,
    pub cam2: Camera,
    homographies: Vec<Homography>,
}

impl PlanarScene {
    pub fn new(
        seed: u64,
        image_size: ImageSize,
        planes: Vec<PlaneRegion>,
        cam1: Camera,
        cam2: Camera,
    ) -> Result<Self, SceneError> {
        if planes.is_empty() || planes.len() > MAX_PLANES {
            return Err(SceneError::InvalidParameters(format!(
                "plane count {} outside [1, {MAX_PLANES}]",
                planes.len()
            )));
        }
        if cam1.pose != CameraPose::identity() {
            return Err(SceneError::InvalidParameters("camera 1 must sit at the origin".into()));
        }
        let homographies = planes
            .iter()
            .map(|r| plane_induced_homography(&cam1.intrinsics, &cam2.intrinsics, &cam2.pose, &r.plane))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            seed,
            image_size,
            planes,
            cam1,
            cam2,
            homographies,
        })
    }

    pub fn plane_homography(&self, plane_id: usize) -> &Homography {
        &self.homographies[plane_id]
    }

    pub fn relative_pose(&self) -> &CameraPose<f64> {
        &self.cam2.pose
    }

    fn nearest_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (k, region) in self.planes.iter().enumerate() {
            if let Some(l) = region.hit(origin, dir) {
                if best.is_none_or(|(_, b)| l < b) {
                    best = Some((k, l));
                }
            }
        }
        best
    }

    /// Nearest plane seen by camera 1 through pixel `p`.
    pub fn cast_cam1(&self, p: &Point2) -> Option<RayHit> {
        let dir = self.cam1.intrinsics.unproject(p);
        let (plane_id, depth) = self.nearest_hit(&Vector3::zeros(), &dir)?;
        Some(RayHit {
            plane_id,
            point: dir * depth,
            depth,
        })
    }

    /// Nearest plane seen by camera 2 through pixel `p`; the point is
    /// reported in camera-1 coordinates.
    pub fn cast_cam2(&self, p: &Point2) -> Option<RayHit> {
        let pose = &self.cam2.pose;
        let origin = pose.center();
        let dir = pose.rotation.transpose() * self.cam2.intrinsics.unproject(p);
        let (plane_id, depth) = self.nearest_hit(&origin, &dir)?;
        Some(RayHit {
            plane_id,
            point: origin + dir * depth,
            depth,
        })
    }

    /// True target of source pixel `p`, or `None` when it has no plane, lands
    /// outside the target image, or is hidden by a nearer plane in camera 2.
    pub fn correspondence_at(&self, p: &Point2) -> Option<Correspondence> {
        let hit = self.cast_cam1(p)?;
        let target = self.homographies[hit.plane_id].apply(p).ok()?;
        if !target.iter().all(|v| v.is_finite()) || !self.image_size.contains(&target) {
            return None;
        }
        let in_cam2 = self.cam2.pose.transform(&hit.point);
        if in_cam2.z <= 1e-9 {
            return None;
        }
        let seen = self.cast_cam2(&target)?;
        if seen.plane_id != hit.plane_id && seen.depth < in_cam2.z * (1.0 - 1e-9) - 1e-9 {
            return None;
        }
        Some(Correspondence {
            target,
            plane_id: hit.plane_id,
            world: hit.point,
        })
    }

    /// World point behind target pixel `p` if camera 1 sees it too.
    pub fn co_visible_from_target(&self, p: &Point2) -> Option<RayHit> {
        let hit = self.cast_cam2(p)?;
        let back = self.cam1.intrinsics.project(&hit.point)?;
        if !self.image_size.contains(&back) {
            return None;
        }
        let seen = self.cast_cam1(&back)?;
        if seen.plane_id != hit.plane_id && seen.depth < hit.point.z * (1.0 - 1e-9) - 1e-9 {
            return None;
        }
        Some(hit)
    }

    /// Mean camera-1 depth over a 16 px sampling grid.
    pub fn mean_depth(&self) -> f64 {
        let (w, h) = (self.image_size.width / 16, self.image_size.height / 16);
        let mut sum = 0.0;
        let mut n = 0usize;
        for j in 0..h {
            for i in 0..w {
                let p = Vector2::new((i as f64 + 0.5) * 16.0, (j as f64 + 0.5) * 16.0);
                if let Some(hit) = self.cast_cam1(&p) {
                    sum += hit.depth;
                    n += 1;
                }
            }
        }
        if n == 0 {
            1.0
        } else {
            sum / n as f64
        }
    }

    /// Fraction of camera-1 pixels (sampled every `stride` px) on which each
    /// plane is the visible surface.
    pub fn visibility(&self, stride: u32) -> Vec<f64> {
        let (w, h) = (self.image_size.width / stride, self.image_size.height / stride);
        let mut counts = vec![0usize; self.planes.len()];
        for j in 0..h {
            for i in 0..w {
                let p = Vector2::new(
                    (i as f64 + 0.5) * stride as f64,
                    (j as f64 + 0.5) * stride as f64,
                );
                if let Some(hit) = self.cast_cam1(&p) {
                    counts[hit.plane_id] += 1;
                }
            }
        }
        let total = (w * h) as f64;
        counts.into_iter().map(|c| c as f64 / total).collect()
    }
}

impl GroundTruth for PlanarScene {
    fn target_at(&self, p: &Point2) -> Option<Point2> {
        self.correspondence_at(p).map(|c| c.target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneOptions {
    pub n_planes: usize,
    pub image_size: ImageSize,
    /// Camera baseline as a fraction of the mean scene depth.
    pub baseline_scale: f64,
    /// All planes face the camera and camera 2 does not rotate, so every
    /// plane-induced map is affine.
    pub fronto_parallel: bool,
    pub max_rotation_deg: f64,
    /// Minimum camera-1 visibility per plane.
    pub min_visibility: f64,
    /// Minimum fraction of source pixels with a valid correspondence.
    pub min_valid_fraction: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            n_planes: 4,
            image_size: ImageSize::default(),
            baseline_scale: 0.15,
            fronto_parallel: false,
            max_rotation_deg: 30.0,
            min_visibility: 0.02,
            min_valid_fraction: 0.3,
        }
    }
}

pub fn default_intrinsics(size: ImageSize) -> CameraIntrinsics<f64> {
    let f = 0.8 * size.width as f64;
    CameraIntrinsics {
        fx: f,
        fy: f,
        cx: size.width as f64 / 2.0,
        cy: size.height as f64 / 2.0,
    }
}

fn random_unit_tilt<R: Rng>(rng: &mut R, max_deg: f64) -> Vector3<f64> {
    let tilt = rng.random_range(0.0..=max_deg).to_radians();
    let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    let axis = Unit::new_normalize(Vector3::new(azimuth.cos(), azimuth.sin(), 0.0));
    Rotation3::from_axis_angle(&axis, tilt) * Vector3::z()
}

fn in_plane_axes<R: Rng>(rng: &mut R, normal: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let seed_axis = if normal.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let u0 = (seed_axis - normal * normal.dot(&seed_axis)).normalize();
    let v0 = normal.cross(&u0);
    let spin = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, c) = spin.sin_cos();
    (u0 * c + v0 * s, v0 * c - u0 * s)
}

fn region(normal: Vector3<f64>, center: Vector3<f64>, axes: (Vector3<f64>, Vector3<f64>), half: (f64, f64)) -> Result<PlaneRegion, SceneError> {
    let plane = Plane3D::new(normal, normal.dot(&center))?;
    Ok(PlaneRegion {
        plane,
        center,
        axis_u: axes.0,
        axis_v: axes.1,
        half_u: half.0,
        half_v: half.1,
    })
}

fn look_at(center: &Vector3<f64>, target: &Vector3<f64>, roll: f64) -> Matrix3<f64> {
    let z = (target - center).normalize();
    let x = Vector3::y().cross(&z).normalize();
    let y = z.cross(&x);
    let (s, c) = roll.sin_cos();
    let (x, y) = (x * c + y * s, y * c - x * s);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

fn attempt<R: Rng>(rng: &mut R, seed: u64, opts: &SceneOptions) -> Result<PlanarScene, String> {
    let size = opts.image_size;
    let k = default_intrinsics(size);
    let (w, h) = (size.width as f64, size.height as f64);
    let mut planes = Vec::with_capacity(opts.n_planes);

    let back_depth = rng.random_range(8.0..12.0);
    let back_normal = if opts.fronto_parallel {
        Vector3::z()
    } else {
        random_unit_tilt(rng, 20.0)
    };
    let axes = in_plane_axes(rng, &back_normal);
    planes.push(
        region(back_normal, Vector3::new(0.0, 0.0, back_depth), axes, (20.0 * back_depth, 20.0 * back_depth))
            .map_err(|e| e.to_string())?,
    );
    for _ in 1..opts.n_planes {
        let pixel = Vector2::new(rng.random_range(0.15 * w..0.85 * w), rng.random_range(0.15 * h..0.85 * h));
        let depth = rng.random_range(3.0..6.0);
        let center = k.unproject(&pixel) * depth;
        let normal = if opts.fronto_parallel {
            Vector3::z()
        } else {
            random_unit_tilt(rng, 40.0)
        };
        let axes = in_plane_axes(rng, &normal);
        let half_u = rng.random_range(0.08..0.22) * w * depth / k.fx;
        let half_v = rng.random_range(0.08..0.22) * w * depth / k.fx;
        planes.push(region(normal, center, axes, (half_u, half_v)).map_err(|e| e.to_string())?);
    }

    let probe = PlanarScene::new(
        seed,
        size,
        planes.clone(),
        Camera {
            intrinsics: k,
            pose: CameraPose::identity(),
        },
        Camera {
            intrinsics: k,
            pose: CameraPose::identity(),
        },
    )
    .map_err(|e| e.to_string())?;
    let mean_depth = probe.mean_depth();
    let baseline = opts.baseline_scale * mean_depth;
    let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    let dir = Vector3::new(azimuth.cos(), 0.5 * azimuth.sin(), rng.random_range(-0.3..0.3)).normalize();
    let c2 = dir * baseline;
    let rotation = if opts.fronto_parallel {
        Matrix3::identity()
    } else {
        let roll = rng.random_range(-10f64..10.0).to_radians();
        look_at(&c2, &Vector3::new(0.0, 0.0, mean_depth), roll)
    };
    let angle = Rotation3::from_matrix_unchecked(rotation).angle().to_degrees();
    if angle > opts.max_rotation_deg {
        return Err(format!("rotation {angle:.1}° exceeds limit"));
    }
    let pose = CameraPose::new(rotation, -(rotation * c2)).map_err(|e| e.to_string())?;
    let scene = PlanarScene::new(
        seed,
        size,
        planes,
        Camera {
            intrinsics: k,
            pose: CameraPose::identity(),
        },
        Camera { intrinsics: k, pose },
    )
    .map_err(|e| e.to_string())?;

    let vis = scene.visibility(8);
    if let Some((id, v)) = vis.iter().enumerate().find(|(_, v)| **v < opts.min_visibility) {
        return Err(format!("plane {id} visible on {:.2}% of pixels", v * 100.0));
    }
    let field = project_correspondences(&scene, 16);
    if field.valid_fraction() < opts.min_valid_fraction {
        return Err(format!("only {:.1}% valid correspondences", field.valid_fraction() * 100.0));
    }
    Ok(scene)
}

/// Deterministic rejection-sampled scene for `seed`.
pub fn generate_scene(seed: u64, opts: &SceneOptions) -> Result<PlanarScene, SceneError> {
    if opts.n_planes == 0 || opts.n_planes > MAX_PLANES {
        return Err(SceneError::InvalidParameters(format!(
            "plane count {} outside [1, {MAX_PLANES}]",
            opts.n_planes
        )));
    }
    ImageSize::new(opts.image_size.width, opts.image_size.height)?;
    if !(opts.baseline_scale > 0.0) {
        return Err(SceneError::InvalidParameters("baseline scale must be positive".into()));
    }
    let mut rng = stage_rng(seed, "scene");
    let mut last = String::new();
    for _ in 0..MAX_ATTEMPTS {
        match attempt(&mut rng, seed, opts) {
            Ok(scene) => return Ok(scene),
            Err(reason) => last = reason,
        }
    }
    Err(SceneError::GenerationFailed {
        attempts: MAX_ATTEMPTS,
        reason: last,
    })
}
