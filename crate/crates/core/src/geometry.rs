//! Homography parameterization, DLT solving, plane-induced homographies and
//! projective point mapping.
//!
//! A hypothesis is described by a block of attributes (source/target
//! positions, scale, rotation, four perspective components and a
//! confidence). The attributes place four virtual corners around the source
//! and target positions; the homography is whatever maps one quad onto the
//! other.
//!
//! Rotation convention: positive angles rotate counter-clockwise in a y-up
//! frame. Image coordinates are y-down, so on screen a positive rotation
//! appears clockwise.

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid hypothesis: {0}")]
    InvalidHypothesis(String),
    #[error("singular system (conditioning ratio {ratio:e})")]
    SingularSystem { ratio: f64 },
    #[error("point maps to infinity")]
    PointAtInfinity,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid plane: {0}")]
    InvalidPlane(String),
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

/// Base corners of the unit square, in the fixed order used throughout.
pub const BASE_CORNERS: [[f64; 2]; 4] = [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]];

/// Default minimum triangle area for a [`CornerQuad`].
pub const DEFAULT_MIN_AREA: f64 = 1e-6;

const W_EPS: f64 = 1e-9;
const DLT_RATIO_TOL: f64 = 1e-10;
const NORMALIZED_AREA_TOL: f64 = 1e-9;

pub fn base_quad<T: Real>() -> CornerQuad<T> {
    CornerQuad::new(BASE_CORNERS.map(|[x, y]| Vector2::new(T::lit(x), T::lit(y))))
}

/// Four points; no validation on construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerQuad<T: Real> {
    pub pts: [Vector2<T>; 4],
}

impl<T: Real> CornerQuad<T> {
    pub fn new(pts: [Vector2<T>; 4]) -> Self {
        Self { pts }
    }

    pub fn centroid(&self) -> Vector2<T> {
        let sum = self.pts.iter().fold(Vector2::zeros(), |acc, p| acc + p);
        sum / T::lit(4.0)
    }

    pub fn translated(&self, by: &Vector2<T>) -> Self {
        Self::new(self.pts.map(|p| p + by))
    }

    pub fn scaled(&self, s: T) -> Self {
        Self::new(self.pts.map(|p| p * s))
    }

    /// Smallest absolute area over the four triangles formed by corner triples.
    pub fn min_triangle_area(&self) -> T {
        const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
        TRIPLES
            .iter()
            .map(|&[a, b, c]| triangle_area(&self.pts[a], &self.pts[b], &self.pts[c]))
            .fold(T::max_value().unwrap(), |m, v| if v < m { v } else { m })
    }

    pub fn is_non_collinear(&self, min_area: T) -> bool {
        let area = self.min_triangle_area();
        area.is_finite() && area > min_area
    }
}

fn triangle_area<T: Real>(a: &Vector2<T>, b: &Vector2<T>, c: &Vector2<T>) -> T {
    let ab = b - a;
    let ac = c - a;
    (ab.x * ac.y - ab.y * ac.x).abs() * T::lit(0.5)
}

/// Projective 3×3 map, scale-normalized so that `m[(2,2)] == 1` when that
/// entry is not vanishing, otherwise to unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomographyMatrix<T: Real> {
    m: Matrix3<T>,
}

impl<T: Real> HomographyMatrix<T> {
    pub fn new(m: Matrix3<T>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::SingularSystem { ratio: 0.0 });
        }
        let m = if m[(2, 2)].abs() > T::lit(1e-9) {
            m / m[(2, 2)]
        } else {
            let norm = m.norm();
            if norm <= T::zero() {
                return Err(GeometryError::SingularSystem { ratio: 0.0 });
            }
            m / norm
        };
        let det = m.determinant();
        if det.abs() <= T::lit(1e-12) || !det.is_finite() {
            return Err(GeometryError::SingularSystem {
                ratio: det.abs().to_f64_lossy(),
            });
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    pub fn translation(tx: T, ty: T) -> Self {
        let mut m = Matrix3::identity();
        m[(0, 2)] = tx;
        m[(1, 2)] = ty;
        Self { m }
    }

    pub fn matrix(&self) -> &Matrix3<T> {
        &self.m
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .m
            .try_inverse()
            .ok_or(GeometryError::SingularSystem { ratio: 0.0 })?;
        Self::new(inv)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        Self::new(self.m * other.m)
    }

    pub fn apply(&self, p: &Vector2<T>) -> Result<Vector2<T>> {
        apply_homography(self, p)
    }

    /// Relative Frobenius distance after both matrices are normalized.
    pub fn relative_distance(&self, other: &Self) -> T {
        (self.m - other.m).norm() / self.m.norm()
    }

    pub fn cast<U: Real>(&self) -> HomographyMatrix<U> {
        HomographyMatrix {
            m: self.m.map(|v| U::lit(v.to_f64_lossy())),
        }
    }
}

/// Bounds that a hypothesis attribute block must satisfy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeBounds {
    pub scale_min: f64,
    pub scale_max: f64,
    pub perspective_max: f64,
    /// Minimum triangle area of the target corner quad.
    pub min_area: f64,
}

impl Default for AttributeBounds {
    fn default() -> Self {
        Self {
            scale_min: 1.0 / 8.0,
            scale_max: 8.0,
            perspective_max: 0.45,
            min_area: DEFAULT_MIN_AREA,
        }
    }
}

/// Per-unit hypothesis parameter block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomographyAttributes<T: Real> {
    pub source: Vector2<T>,
    pub target: Vector2<T>,
    pub scale: T,
    /// Radians, counter-clockwise in a y-up frame.
    pub rotation: T,
    /// `(δxx, δxy, δyx, δyy)`.
    pub perspective: [T; 4],
    pub confidence: T,
}

impl<T: Real> HomographyAttributes<T> {
    pub fn identity_at(p: Vector2<T>) -> Self {
        Self {
            source: p,
            target: p,
            scale: T::one(),
            rotation: T::zero(),
            perspective: [T::zero(); 4],
            confidence: T::one(),
        }
    }

    pub fn validate(&self, bounds: &AttributeBounds) -> Result<()> {
        let finite = self.source.iter().chain(self.target.iter()).all(|v| v.is_finite())
            && self.scale.is_finite()
            && self.rotation.is_finite()
            && self.perspective.iter().all(|v| v.is_finite())
            && self.confidence.is_finite();
        if !finite {
            return Err(GeometryError::InvalidHypothesis("non-finite attribute".into()));
        }
        let s = self.scale.to_f64_lossy();
        if !(bounds.scale_min..=bounds.scale_max).contains(&s) {
            return Err(GeometryError::InvalidHypothesis(format!(
                "scale {s} outside [{}, {}]",
                bounds.scale_min, bounds.scale_max
            )));
        }
        check_perspective(&self.perspective, bounds.perspective_max)?;
        let c = self.confidence.to_f64_lossy();
        if !(0.0..=1.0).contains(&c) {
            return Err(GeometryError::InvalidHypothesis(format!(
                "confidence {c} outside [0, 1]"
            )));
        }
        Ok(())
    }
}

fn check_perspective<T: Real>(q: &[T; 4], q_max: f64) -> Result<()> {
    for (k, v) in q.iter().enumerate() {
        if !v.is_finite() || v.abs().to_f64_lossy() > q_max {
            return Err(GeometryError::InvalidHypothesis(format!(
                "perspective component {k} = {} exceeds {q_max}",
                v.to_f64_lossy()
            )));
        }
    }
    Ok(())
}

/// Offsets applied to the base corners by the perspective components.
///
/// Row `k` for base corner `(bx, by)` is `(by·δxx + bx·δxy, by·δyx + bx·δyy)`.
pub fn perspective_offsets<T: Real>(q: &[T; 4], q_max: f64) -> Result<[Vector2<T>; 4]> {
    check_perspective(q, q_max)?;
    let [dxx, dxy, dyx, dyy] = *q;
    Ok(BASE_CORNERS.map(|[bx, by]| {
        let (bx, by) = (T::lit(bx), T::lit(by));
        Vector2::new(by * dxx + bx * dxy, by * dyx + bx * dyy)
    }))
}

pub fn rotate_about_centroid<T: Real>(quad: &CornerQuad<T>, r: T) -> CornerQuad<T> {
    let c = quad.centroid();
    let rot = rotation2(r);
    CornerQuad::new(quad.pts.map(|p| c + rot * (p - c)))
}

fn rotation2<T: Real>(r: T) -> Matrix2<T> {
    let (s, c) = r.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Virtual corners `(B_s, B_t)` for an attribute block: offsets, then
/// rotation about the centroid, then scale, then translation.
pub fn attributes_to_virtual_corners<T: Real>(
    attrs: &HomographyAttributes<T>,
    bounds: &AttributeBounds,
) -> Result<(CornerQuad<T>, CornerQuad<T>)> {
    attrs.validate(bounds)?;
    let base = base_quad::<T>();
    let offsets = perspective_offsets(&attrs.perspective, bounds.perspective_max)?;
    let mut perturbed = base;
    for (p, o) in perturbed.pts.iter_mut().zip(offsets.iter()) {
        *p += o;
    }
    let target = rotate_about_centroid(&perturbed, attrs.rotation)
        .scaled(attrs.scale)
        .translated(&attrs.target);
    if !target.is_non_collinear(T::lit(bounds.min_area)) {
        return Err(GeometryError::InvalidHypothesis(
            "target corners are (nearly) collinear".into(),
        ));
    }
    Ok((base.translated(&attrs.source), target))
}

pub fn attributes_to_homography<T: Real>(
    attrs: &HomographyAttributes<T>,
    bounds: &AttributeBounds,
) -> Result<HomographyMatrix<T>> {
    let (src, dst) = attributes_to_virtual_corners(attrs, bounds)?;
    solve_homography_dlt(&src, &dst)
}

/// Inverts the corner composition. `target` holds the images of the base
/// corners placed around `source`.
///
/// The attribute block has six shape parameters for a four-dimensional
/// linear part, so the inverse returns the canonical representative: the
/// rotation of the polar decomposition, the RMS corner-radius ratio as
/// scale, and a symmetric perspective block (`δxx == δyy`) normalized so
/// that the Frobenius norm of `I + M` is `√2`. Any non-affine component of
/// `target` is discarded in the least-squares sense.
pub fn attributes_from_corners<T: Real>(
    source: Vector2<T>,
    target: &CornerQuad<T>,
    confidence: T,
) -> HomographyAttributes<T> {
    let center = target.centroid();
    let quarter = T::lit(0.25);
    // Least-squares linear part: A = (Σ d_k b_kᵀ)(Σ b_k b_kᵀ)⁻¹ with Σ b bᵀ = 4I.
    let mut a = Matrix2::zeros();
    for ([bx, by], t) in BASE_CORNERS.iter().zip(target.pts.iter()) {
        let d = t - center;
        let b = Vector2::new(T::lit(*bx), T::lit(*by));
        a += d * b.transpose();
    }
    a *= quarter;

    let rotation = (a[(1, 0)] - a[(0, 1)]).atan2(a[(0, 0)] + a[(1, 1)]);
    let sym = rotation2(rotation).transpose() * a;
    let scale = a.norm() / T::lit(2.0).sqrt();
    let m = sym / scale - Matrix2::identity();
    // M = [[δxy, δxx], [δyy, δyx]]; symmetrize the off-diagonal pair.
    let off = (m[(0, 1)] + m[(1, 0)]) * T::lit(0.5);
    HomographyAttributes {
        source,
        target: center,
        scale,
        rotation,
        perspective: [off, m[(0, 0)], m[(1, 1)], off],
        confidence,
    }
}

/// Hartley normalization: centroid to origin, RMS distance √2.
pub(crate) fn hartley<T: Real>(pts: &[Vector2<T>]) -> (Vec<Vector2<T>>, Matrix3<T>) {
    let n = T::from_usize(pts.len()).unwrap();
    let c = pts.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let ms = pts.iter().map(|p| (p - c).norm_squared()).fold(T::zero(), |a, b| a + b) / n;
    let s = if ms > T::zero() {
        T::lit(2.0).sqrt() / ms.sqrt()
    } else {
        T::one()
    };
    let t = Matrix3::new(
        s,
        T::zero(),
        -s * c.x,
        T::zero(),
        s,
        -s * c.y,
        T::zero(),
        T::zero(),
        T::one(),
    );
    let out = pts.iter().map(|p| (p - c) * s).collect();
    (out, t)
}

/// Four-point homography with `H·src[k] ≃ dst[k]`.
///
/// Rejects quads with three (nearly) collinear corners as a singular system.
pub fn solve_homography_dlt<T: Real>(
    src: &CornerQuad<T>,
    dst: &CornerQuad<T>,
) -> Result<HomographyMatrix<T>> {
    let pairs: Vec<_> = src.pts.iter().copied().zip(dst.pts.iter().copied()).collect();
    let (ns, _) = hartley(&src.pts);
    let (nd, _) = hartley(&dst.pts);
    let area_tol = T::tol(NORMALIZED_AREA_TOL);
    for quad in [&ns, &nd] {
        let q = CornerQuad::new([quad[0], quad[1], quad[2], quad[3]]);
        let area = q.min_triangle_area();
        if !(area > area_tol) {
            return Err(GeometryError::SingularSystem {
                ratio: area.to_f64_lossy(),
            });
        }
    }
    solve_homography_points(&pairs)
}

/// Least-squares DLT over `n ≥ 4` correspondences `(src, dst)`.
pub fn solve_homography_points<T: Real>(
    pairs: &[(Vector2<T>, Vector2<T>)],
) -> Result<HomographyMatrix<T>> {
    if pairs.len() < 4 {
        return Err(GeometryError::SingularSystem { ratio: 0.0 });
    }
    let src: Vec<_> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<_> = pairs.iter().map(|p| p.1).collect();
    let (ns, ts) = hartley(&src);
    let (nd, td) = hartley(&dst);

    // Pad to at least nine rows so the thin SVD exposes the full right basis.
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<T>::zeros(rows, 9);
    for (k, (s, d)) in ns.iter().zip(nd.iter()).enumerate() {
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r = 2 * k;
        a[(r, 0)] = -x;
        a[(r, 1)] = -y;
        a[(r, 2)] = -T::one();
        a[(r, 6)] = u * x;
        a[(r, 7)] = u * y;
        a[(r, 8)] = u;
        a[(r + 1, 3)] = -x;
        a[(r + 1, 4)] = -y;
        a[(r + 1, 5)] = -T::one();
        a[(r + 1, 6)] = v * x;
        a[(r + 1, 7)] = v * y;
        a[(r + 1, 8)] = v;
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::SingularSystem { ratio: 0.0 });
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::SingularSystem { ratio: 0.0 })?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[i]
            .partial_cmp(&svd.singular_values[j])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let largest = svd.singular_values[*order.last().unwrap()];
    let second_smallest = svd.singular_values[order[1]];
    let ratio = if largest > T::zero() {
        second_smallest / largest
    } else {
        T::zero()
    };
    if !(ratio >= T::tol(DLT_RATIO_TOL)) {
        return Err(GeometryError::SingularSystem {
            ratio: ratio.to_f64_lossy(),
        });
    }
    let h = v_t.row(order[0]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or(GeometryError::SingularSystem { ratio: 0.0 })?;
    HomographyMatrix::new(td_inv * hn * ts)
}

pub fn apply_homography<T: Real>(h: &HomographyMatrix<T>, p: &Vector2<T>) -> Result<Vector2<T>> {
    let v = h.m * Vector3::new(p.x, p.y, T::one());
    if !(v.z.abs() >= T::lit(W_EPS)) {
        return Err(GeometryError::PointAtInfinity);
    }
    Ok(Vector2::new(v.x / v.z, v.y / v.z))
}

/// Pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T) -> Result<Self> {
        if !(fx > T::zero() && fy > T::zero()) || !cx.is_finite() || !cy.is_finite() {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive".into()));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn identity() -> Self {
        Self {
            fx: T::one(),
            fy: T::one(),
            cx: T::zero(),
            cy: T::zero(),
        }
    }

    pub fn matrix(&self) -> Matrix3<T> {
        let (z, o) = (T::zero(), T::one());
        Matrix3::new(self.fx, z, self.cx, z, self.fy, self.cy, z, z, o)
    }

    pub fn inverse_matrix(&self) -> Matrix3<T> {
        let (z, o) = (T::zero(), T::one());
        Matrix3::new(
            o / self.fx,
            z,
            -self.cx / self.fx,
            z,
            o / self.fy,
            -self.cy / self.fy,
            z,
            z,
            o,
        )
    }

    /// Ray direction (z = 1) through pixel `p`.
    pub fn unproject(&self, p: &Vector2<T>) -> Vector3<T> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, T::one())
    }

    /// Pixel of a camera-frame point; `None` behind the camera.
    pub fn project(&self, x: &Vector3<T>) -> Option<Vector2<T>> {
        if !(x.z > T::zero()) {
            return None;
        }
        Some(Vector2::new(
            self.fx * x.x / x.z + self.cx,
            self.fy * x.y / x.z + self.cy,
        ))
    }
}

/// Maps camera-1 coordinates into camera-2 coordinates: `X₂ = R X₁ + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> CameraPose<T> {
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self> {
        let tol = T::tol(1e-9);
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho <= tol) || !((rotation.determinant() - T::one()).abs() <= tol) {
            return Err(GeometryError::InvalidCamera("rotation is not in SO(3)".into()));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn transform(&self, x: &Vector3<T>) -> Vector3<T> {
        self.rotation * x + self.translation
    }

    /// Camera-2 center expressed in camera-1 coordinates.
    pub fn center(&self) -> Vector3<T> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// Plane `nᵀX = d` in camera-1 coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane3D<T: Real> {
    pub normal: Vector3<T>,
    pub distance: T,
}

impl<T: Real> Plane3D<T> {
    pub fn new(normal: Vector3<T>, distance: T) -> Result<Self> {
        if !((normal.norm() - T::one()).abs() <= T::tol(1e-9)) {
            return Err(GeometryError::InvalidPlane("normal must be unit length".into()));
        }
        if !(distance > T::zero()) {
            return Err(GeometryError::InvalidPlane("distance must be positive".into()));
        }
        Ok(Self { normal, distance })
    }

    /// Ray parameter where `λ·dir` meets the plane, if in front of the origin.
    pub fn intersect_ray(&self, dir: &Vector3<T>) -> Option<T> {
        let denom = self.normal.dot(dir);
        if !(denom > T::lit(1e-12)) {
            return None;
        }
        Some(self.distance / denom)
    }
}

/// `H = K₂ (R + t nᵀ / d) K₁⁻¹`.
pub fn plane_induced_homography<T: Real>(
    k1: &CameraIntrinsics<T>,
    k2: &CameraIntrinsics<T>,
    pose: &CameraPose<T>,
    plane: &Plane3D<T>,
) -> Result<HomographyMatrix<T>> {
    let inner = pose.rotation + pose.translation * plane.normal.transpose() / plane.distance;
    // det(R + t nᵀ/d) = 1 + nᵀRᵀt / d; zero when the plane contains camera 2's center.
    let det = inner.determinant();
    if !(det.abs() > T::tol(1e-10)) {
        return Err(GeometryError::SingularSystem {
            ratio: det.abs().to_f64_lossy(),
        });
    }
    HomographyMatrix::new(k2.matrix() * inner * k1.inverse_matrix())
}
