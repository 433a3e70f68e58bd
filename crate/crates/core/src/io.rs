//! On-disk formats: a little-endian binary container for grids and matches,
//! a text match table, TOML scene files and CSV reports. Writes are atomic.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{MetricReport, SceneMetrics};
use crate::geometry::{AttributeBounds, CameraIntrinsics, CameraPose, HomographyAttributes, Plane3D};
use crate::hypothesis::{slot_offset, CoarseMatch, GridIndex, Hypothesis, HypothesisGrid};
use crate::refinement::MatchCandidate;
use crate::scene::{Camera, FieldEntry, GroundTruthField, ImageSize, PlanarScene, PlaneRegion, SceneError};
use crate::segmentation::{parent_unit, SegmentChoice, SegmentationMap};

pub const MAGIC: [u8; 4] = *b"PWHB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;
pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

fn bad(msg: impl Into<String>) -> IoError {
    IoError::Format(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum RecordKind {
    Field = 1,
    Hypotheses = 2,
    Segmentation = 3,
    Matches = 4,
}

impl RecordKind {
    fn from_u32(v: u32) -> Option<Self> {
        [Self::Field, Self::Hypotheses, Self::Segmentation, Self::Matches]
            .into_iter()
            .find(|k| *k as u32 == v)
    }

    pub fn record_size(self) -> usize {
        match self {
            RecordKind::Field => 16,
            RecordKind::Hypotheses => 41,
            RecordKind::Segmentation => 1,
            RecordKind::Matches => 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub width: u32,
    pub height: u32,
    pub stride: u32,
    pub kind: RecordKind,
    pub count: u32,
}

impl Header {
    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        for v in [
            VERSION,
            self.width,
            self.height,
            self.stride,
            self.kind as u32,
            self.count,
            self.kind.record_size() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn parse(bytes: &[u8]) -> Result<(Self, &[u8]), IoError> {
        if bytes.len() < HEADER_LEN || bytes[..4] != MAGIC {
            return Err(bad("missing container header"));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap());
        if word(0) != VERSION {
            return Err(bad(format!("unsupported version {}", word(0))));
        }
        let kind = RecordKind::from_u32(word(4)).ok_or_else(|| bad(format!("unknown record kind {}", word(4))))?;
        if word(6) as usize != kind.record_size() {
            return Err(bad("record size does not match kind"));
        }
        let header = Header {
            width: word(1),
            height: word(2),
            stride: word(3),
            kind,
            count: word(5),
        };
        let body = &bytes[HEADER_LEN..];
        if body.len() != header.count as usize * kind.record_size() {
            return Err(bad(format!(
                "expected {} records of {} bytes, found {} bytes",
                header.count,
                kind.record_size(),
                body.len()
            )));
        }
        Ok((header, body))
    }

    fn expect(&self, kind: RecordKind) -> Result<ImageSize, IoError> {
        if self.kind != kind {
            return Err(bad(format!("expected {kind:?} records, found {:?}", self.kind)));
        }
        ImageSize::new(self.width, self.height).map_err(|e| bad(e.to_string()))
    }
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn f32_at(rec: &[u8], k: usize) -> f64 {
    f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64
}

fn grid_dims(size: ImageSize, stride: u32) -> Result<(usize, usize), IoError> {
    if stride == 0 || size.width % stride != 0 || size.height % stride != 0 {
        return Err(bad(format!("stride {stride} does not tile the image")));
    }
    Ok(((size.width / stride) as usize, (size.height / stride) as usize))
}

pub fn encode_field(field: &GroundTruthField) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + field.entries.len() * 16);
    Header {
        width: field.image_size.width,
        height: field.image_size.height,
        stride: field.stride,
        kind: RecordKind::Field,
        count: field.entries.len() as u32,
    }
    .write(&mut out);
    for e in &field.entries {
        let (tx, ty) = if e.valid { (e.target.x, e.target.y) } else { (f64::NAN, f64::NAN) };
        let plane = e.plane_id.map_or(-1.0, |p| p as f64);
        put_f32s(&mut out, &[tx, ty, plane, e.valid as u8 as f64]);
    }
    out
}

pub fn decode_field(bytes: &[u8]) -> Result<GroundTruthField, IoError> {
    let (h, body) = Header::parse(bytes)?;
    let size = h.expect(RecordKind::Field)?;
    let (cols, rows) = grid_dims(size, h.stride)?;
    if cols * rows != h.count as usize {
        return Err(bad("record count does not match the grid"));
    }
    let entries = body
        .chunks_exact(16)
        .map(|r| {
            let plane = f32_at(r, 2);
            FieldEntry {
                target: Vector2::new(f32_at(r, 0), f32_at(r, 1)),
                plane_id: (plane >= 0.0).then_some(plane as usize),
                valid: f32_at(r, 3) != 0.0,
            }
        })
        .collect();
    Ok(GroundTruthField {
        image_size: size,
        stride: h.stride,
        cols,
        rows,
        entries,
    })
}

/// Records are `p_t.x, p_t.y, s, r, q₀..q₃, c, coarse score` as f32 plus a
/// validity byte; `p_s` is the unit center.
pub fn encode_hypotheses(grid: &HypothesisGrid, size: ImageSize, coarse: Option<&[CoarseMatch]>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + grid.cells.len() * 41);
    Header {
        width: size.width,
        height: size.height,
        stride: 32,
        kind: RecordKind::Hypotheses,
        count: grid.cells.len() as u32,
    }
    .write(&mut out);
    for (i, cell) in grid.cells.iter().enumerate() {
        let score = coarse.map_or(f64::NAN, |m| m[i].score);
        match cell {
            Some(h) => {
                let a = &h.attributes;
                let q = a.perspective;
                put_f32s(
                    &mut out,
                    &[a.target.x, a.target.y, a.scale, a.rotation, q[0], q[1], q[2], q[3], a.confidence, score],
                );
                out.push(1);
            }
            None => {
                put_f32s(&mut out, &[f64::NAN; 9]);
                put_f32s(&mut out, &[score]);
                out.push(0);
            }
        }
    }
    out
}

pub fn decode_hypotheses(bytes: &[u8], bounds: &AttributeBounds) -> Result<HypothesisGrid, IoError> {
    let (h, body) = Header::parse(bytes)?;
    let size = h.expect(RecordKind::Hypotheses)?;
    let (cols, rows) = grid_dims(size, h.stride)?;
    if cols * rows != h.count as usize {
        return Err(bad("record count does not match the grid"));
    }
    let cells = body
        .chunks_exact(41)
        .enumerate()
        .map(|(i, r)| {
            if r[40] == 0 {
                return Ok(None);
            }
            let s = h.stride as f64;
            let attrs = HomographyAttributes {
                source: Vector2::new(((i % cols) as f64 + 0.5) * s, ((i / cols) as f64 + 0.5) * s),
                target: Vector2::new(f32_at(r, 0), f32_at(r, 1)),
                scale: f32_at(r, 2),
                rotation: f32_at(r, 3),
                perspective: [f32_at(r, 4), f32_at(r, 5), f32_at(r, 6), f32_at(r, 7)],
                confidence: f32_at(r, 8),
            };
            Hypothesis::from_attributes(attrs, bounds)
                .map(Some)
                .map_err(|e| bad(format!("hypothesis {i}: {e}")))
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    Ok(HypothesisGrid { cols, rows, cells })
}

/// One byte per 1/8 unit: 0 for invalid, otherwise the 1-based slot.
pub fn encode_segmentation(map: &SegmentationMap, size: ImageSize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + map.cells.len());
    Header {
        width: size.width,
        height: size.height,
        stride: 8,
        kind: RecordKind::Segmentation,
        count: map.cells.len() as u32,
    }
    .write(&mut out);
    out.extend(map.cells.iter().map(|c| c.map_or(0, |c| c.slot)));
    out
}

pub fn decode_segmentation(bytes: &[u8]) -> Result<SegmentationMap, IoError> {
    let (h, body) = Header::parse(bytes)?;
    let size = h.expect(RecordKind::Segmentation)?;
    let (cols, rows) = grid_dims(size, h.stride)?;
    let (coarse_cols, coarse_rows) = grid_dims(size, 32)?;
    if cols * rows != h.count as usize {
        return Err(bad("record count does not match the grid"));
    }
    let cells = body
        .iter()
        .enumerate()
        .map(|(j, &slot)| {
            if slot == 0 {
                return Ok(None);
            }
            if slot > 9 {
                return Err(bad(format!("slot {slot} out of range")));
            }
            let parent = parent_unit(GridIndex::new(j % cols, j / cols));
            let (dc, dr) = slot_offset(slot as usize);
            let (c, r) = (parent.col as i64 + dc, parent.row as i64 + dr);
            if c < 0 || r < 0 || c as usize >= coarse_cols || r as usize >= coarse_rows {
                return Err(bad(format!("slot {slot} of unit {j} leaves the grid")));
            }
            Ok(Some(SegmentChoice {
                slot,
                hypothesis: r as usize * coarse_cols + c as usize,
            }))
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    Ok(SegmentationMap { cols, rows, cells })
}

fn match_row(m: &MatchCandidate) -> [f64; 5] {
    let t = m.best_target();
    [m.source.x, m.source.y, t.x, t.y, m.confidence.unwrap_or(1.0)]
}

pub fn encode_matches(matches: &[MatchCandidate], size: ImageSize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + matches.len() * 20);
    Header {
        width: size.width,
        height: size.height,
        stride: 1,
        kind: RecordKind::Matches,
        count: matches.len() as u32,
    }
    .write(&mut out);
    for m in matches {
        put_f32s(&mut out, &match_row(m));
    }
    out
}

/// Matches as `(source, target, confidence)`.
pub fn decode_matches(bytes: &[u8]) -> Result<Vec<(Vector2<f64>, Vector2<f64>, f64)>, IoError> {
    let (h, body) = Header::parse(bytes)?;
    h.expect(RecordKind::Matches)?;
    Ok(body
        .chunks_exact(20)
        .map(|r| {
            (
                Vector2::new(f32_at(r, 0), f32_at(r, 1)),
                Vector2::new(f32_at(r, 2), f32_at(r, 3)),
                f32_at(r, 4),
            )
        })
        .collect())
}

/// Whitespace-separated table, one match per line.
pub fn format_match_table(matches: &[MatchCandidate]) -> String {
    let mut out = String::from("# source_x source_y target_x target_y confidence\n");
    for m in matches {
        let [a, b, c, d, e] = match_row(m);
        writeln!(out, "{a:.4} {b:.4} {c:.4} {d:.4} {e:.6}").unwrap();
    }
    out
}

pub fn parse_match_table(text: &str) -> Result<Vec<[f64; 5]>, IoError> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(k, l)| {
            let vals: Vec<f64> = l
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| bad(format!("line {}: {e}", k + 1)))?;
            vals.try_into().map_err(|_| bad(format!("line {}: expected 5 columns", k + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IntrinsicsFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CameraFile {
    intrinsics: IntrinsicsFile,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PlaneFile {
    normal: [f64; 3],
    distance: f64,
    center: [f64; 3],
    axis_u: [f64; 3],
    axis_v: [f64; 3],
    half_u: f64,
    half_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SceneFile {
    format_version: u32,
    seed: u64,
    width: u32,
    height: u32,
    cam1: CameraFile,
    cam2: CameraFile,
    planes: Vec<PlaneFile>,
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn vec3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl CameraFile {
    fn from_camera(c: &Camera) -> Self {
        let r = &c.pose.rotation;
        Self {
            intrinsics: IntrinsicsFile {
                fx: c.intrinsics.fx,
                fy: c.intrinsics.fy,
                cx: c.intrinsics.cx,
                cy: c.intrinsics.cy,
            },
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            translation: arr(&c.pose.translation),
        }
    }

    fn to_camera(&self) -> Result<Camera, IoError> {
        let i = &self.intrinsics;
        let r = Matrix3::from_fn(|a, b| self.rotation[a][b]);
        Ok(Camera {
            intrinsics: CameraIntrinsics::new(i.fx, i.fy, i.cx, i.cy).map_err(|e| bad(e.to_string()))?,
            pose: CameraPose::new(r, vec3(self.translation)).map_err(|e| bad(e.to_string()))?,
        })
    }
}

pub fn scene_to_toml(scene: &PlanarScene) -> Result<String, IoError> {
    let file = SceneFile {
        format_version: SCENE_FORMAT_VERSION,
        seed: scene.seed,
        width: scene.image_size.width,
        height: scene.image_size.height,
        cam1: CameraFile::from_camera(&scene.cam1),
        cam2: CameraFile::from_camera(&scene.cam2),
        planes: scene
            .planes
            .iter()
            .map(|p| PlaneFile {
                normal: arr(&p.plane.normal),
                distance: p.plane.distance,
                center: arr(&p.center),
                axis_u: arr(&p.axis_u),
                axis_v: arr(&p.axis_v),
                half_u: p.half_u,
                half_v: p.half_v,
            })
            .collect(),
    };
    Ok(toml::to_string(&file)?)
}

pub fn scene_from_toml(text: &str) -> Result<PlanarScene, IoError> {
    let file: SceneFile = toml::from_str(text)?;
    if file.format_version != SCENE_FORMAT_VERSION {
        return Err(bad(format!("unsupported scene format_version {}", file.format_version)));
    }
    let size = ImageSize::new(file.width, file.height).map_err(|e| bad(e.to_string()))?;
    let planes = file
        .planes
        .iter()
        .map(|p| PlaneRegion {
            plane: Plane3D {
                normal: vec3(p.normal),
                distance: p.distance,
            },
            center: vec3(p.center),
            axis_u: vec3(p.axis_u),
            axis_v: vec3(p.axis_v),
            half_u: p.half_u,
            half_v: p.half_v,
        })
        .collect();
    Ok(PlanarScene::new(
        file.seed,
        size,
        planes,
        file.cam1.to_camera()?,
        file.cam2.to_camera()?,
    )?)
}

/// One row per variant.
pub fn reports_to_csv(reports: &[MetricReport]) -> Result<String, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "variant",
        "scenes",
        "matches",
        "median_endpoint_px",
        "auc_5",
        "auc_10",
        "auc_20",
        "point_accuracy_1px",
        "pose_failures",
        "corner_within_1px",
        "corner_within_3px",
        "corner_within_5px",
        "inner_products",
        "queries",
    ])?;
    for r in reports {
        let corners = r.corner_within.map(|c| c.map(|v| v.to_string())).unwrap_or_default();
        w.write_record([
            r.variant.name().to_string(),
            r.scenes.to_string(),
            r.matches.to_string(),
            r.median_endpoint_px.to_string(),
            r.auc_5.to_string(),
            r.auc_10.to_string(),
            r.auc_20.to_string(),
            r.point_accuracy_1px.to_string(),
            r.pose_failures.to_string(),
            corners[0].clone(),
            corners[1].clone(),
            corners[2].clone(),
            r.inner_products.to_string(),
            r.queries.to_string(),
        ])?;
    }
    String::from_utf8(w.into_inner().map_err(|e| bad(e.to_string()))?).map_err(|e| bad(e.to_string()))
}

pub fn scene_metrics_to_csv(rows: &[SceneMetrics]) -> Result<String, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| bad(e.to_string()))?).map_err(|e| bad(e.to_string()))
}

/// Writes through a temporary file in the destination directory, then
/// renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| IoError::Io(e.error))?;
    Ok(())
}
