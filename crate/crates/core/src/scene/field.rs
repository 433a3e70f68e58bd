use nalgebra::Vector2;
use rand::seq::index::sample;
use rayon::prelude::*;

use super::{GroundTruth, ImageSize, PlanarScene, SceneError};
use crate::rng::stage_rng;
use crate::Point2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldEntry {
    pub target: Point2,
    pub plane_id: Option<usize>,
    pub valid: bool,
}

impl FieldEntry {
    pub const INVALID: Self = Self {
        target: Vector2::new(f64::NAN, f64::NAN),
        plane_id: None,
        valid: false,
    };
}

/// Dense source→target map sampled every `stride` px at
/// `((i + 0.5)·stride, (j + 0.5)·stride)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthField {
    pub image_size: ImageSize,
    pub stride: u32,
    pub cols: usize,
    pub rows: usize,
    pub entries: Vec<FieldEntry>,
}

impl GroundTruthField {
    pub fn sample_point(&self, col: usize, row: usize) -> Point2 {
        let s = self.stride as f64;
        Vector2::new((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }

    pub fn entry(&self, col: usize, row: usize) -> &FieldEntry {
        &self.entries[row * self.cols + col]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Point2, &FieldEntry)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .map(|(k, e)| (self.sample_point(k % self.cols, k / self.cols), e))
    }

    pub fn valid_count(&self) -> usize {
        self.entries.iter().filter(|e| e.valid).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.entries.len().max(1) as f64
    }

    /// Sample index of `p` when it lies exactly on the sampling lattice.
    pub fn index_of(&self, p: &Point2) -> Option<usize> {
        let s = self.stride as f64;
        let (fx, fy) = (p.x / s - 0.5, p.y / s - 0.5);
        let (cx, cy) = (fx.round(), fy.round());
        if (fx - cx).abs() > 1e-9 || (fy - cy).abs() > 1e-9 || cx < 0.0 || cy < 0.0 {
            return None;
        }
        let (c, r) = (cx as usize, cy as usize);
        (c < self.cols && r < self.rows).then_some(r * self.cols + c)
    }
}

impl GroundTruth for GroundTruthField {
    fn target_at(&self, p: &Point2) -> Option<Point2> {
        let e = &self.entries[self.index_of(p)?];
        e.valid.then_some(e.target)
    }
}

pub fn project_correspondences(scene: &PlanarScene, stride: u32) -> GroundTruthField {
    assert!(stride > 0, "stride must be positive");
    let cols = (scene.image_size.width / stride) as usize;
    let rows = (scene.image_size.height / stride) as usize;
    let s = stride as f64;
    let entries = (0..rows * cols)
        .into_par_iter()
        .map(|k| {
            let p = Vector2::new((k % cols) as f64 * s + 0.5 * s, (k / cols) as f64 * s + 0.5 * s);
            match scene.correspondence_at(&p) {
                Some(c) => FieldEntry {
                    target: c.target,
                    plane_id: Some(c.plane_id),
                    valid: true,
                },
                None => FieldEntry {
                    plane_id: scene.cast_cam1(&p).map(|h| h.plane_id),
                    ..FieldEntry::INVALID
                },
            }
        })
        .collect();
    GroundTruthField {
        image_size: scene.image_size,
        stride,
        cols,
        rows,
        entries,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledMatch {
    pub source: Point2,
    pub target: Point2,
    pub plane_id: usize,
}

/// `n` valid entries drawn uniformly without replacement, in ascending
/// field order.
pub fn sample_matches(field: &GroundTruthField, n: usize, seed: u64) -> Result<Vec<SampledMatch>, SceneError> {
    let valid: Vec<usize> = (0..field.entries.len()).filter(|&k| field.entries[k].valid).collect();
    if valid.len() < n {
        return Err(SceneError::InsufficientValid {
            requested: n,
            available: valid.len(),
        });
    }
    let mut rng = stage_rng(seed, "sample-matches");
    let mut picked: Vec<usize> = sample(&mut rng, valid.len(), n).into_iter().map(|i| valid[i]).collect();
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|k| {
            let e = &field.entries[k];
            SampledMatch {
                source: field.sample_point(k % field.cols, k / field.cols),
                target: e.target,
                plane_id: e.plane_id.expect("valid entries carry a plane"),
            }
        })
        .collect())
}
