//! Coarse → segmentation → refinement over one synthetic scene.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{attributes_to_virtual_corners, base_quad};
use crate::hypothesis::{
    build_hypothesis_grid, coarse_match, CoarseMatch, HypothesisConfig, HypothesisError, HypothesisGrid, PyramidConfig,
};
use crate::refinement::{refine_match, AttentionCostCounter, MatchCandidate, RefineConfig, RefinementError};
use crate::rng::stage_u64;
use crate::scene::{project_correspondences, DescriptorConfig, Level, PlanarScene};
use crate::segmentation::{
    segment, segment_center_only, EmbeddingScorer, GeometricScorer, LinearProjection,
    PositionalEmbeddingTable, SegmentationMap, WarpConsistencyScorer,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Hypothesis(#[from] HypothesisError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Coarse unit centers matched to the center of their best target unit.
    #[serde(rename = "base32_no_H")]
    Base32NoH,
    /// Four virtual-corner correspondences per coarse hypothesis.
    #[serde(rename = "base32_with_H")]
    Base32WithH,
    /// Every 1/8 unit takes its parent hypothesis, then refinement.
    #[serde(rename = "no_segmentation")]
    NoSegmentation,
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base32NoH, Variant::Base32WithH, Variant::NoSegmentation, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base32NoH => "base32_no_H",
            Variant::Base32WithH => "base32_with_H",
            Variant::NoSegmentation => "no_segmentation",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// Descriptor agreement at each hypothesis' warped unit center.
    #[default]
    Warp,
    /// Projected hypothesis feature plus positional embedding.
    Embedding,
    /// Ground-truth center error; an oracle for testing.
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub descriptors: DescriptorConfig,
    pub hypothesis: HypothesisConfig,
    /// Stride of the local correspondences used for hypothesis fits.
    pub fit_stride: u32,
    /// Restrict hypothesis fits to the window around each coarse match.
    pub coarse_gating: bool,
    pub scorer: ScorerKind,
    pub refine: RefineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            descriptors: DescriptorConfig::default(),
            hypothesis: HypothesisConfig::default(),
            fit_stride: 4,
            coarse_gating: true,
            scorer: ScorerKind::default(),
            refine: RefineConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub variant: Variant,
    pub coarse: Vec<CoarseMatch>,
    pub hypotheses: Option<HypothesisGrid>,
    pub segmentation: Option<SegmentationMap>,
    pub matches: Vec<MatchCandidate>,
    /// Candidates whose initial target left the image or whose window was
    /// fully masked.
    pub dropped: usize,
    pub inner_products: u64,
    pub queries: u64,
}

pub fn run_pipeline(
    scene: &PlanarScene,
    variant: Variant,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<PipelineOutput, PipelineError> {
    let pyramid = PyramidConfig::new(scene.image_size);
    let desc_seed = stage_u64(seed, "descriptors");
    let (src32, tgt32) = cfg.descriptors.synthesize(scene, Level::Coarse, desc_seed);
    let coarse = coarse_match(&src32, &tgt32)?;
    let mut out = PipelineOutput {
        variant,
        coarse,
        hypotheses: None,
        segmentation: None,
        matches: Vec::new(),
        dropped: 0,
        inner_products: 0,
        queries: 0,
    };

    if variant == Variant::Base32NoH {
        out.matches = out
            .coarse
            .iter()
            .map(|m| {
                let (c, r) = (m.source % src32.cols, m.source / src32.cols);
                let mut cand = MatchCandidate::new(
                    pyramid.unit_center(Level::Coarse, c, r),
                    pyramid.unit_center(Level::Coarse, m.target.col, m.target.row),
                );
                cand.confidence = Some(m.score.clamp(0.0, 1.0));
                cand
            })
            .collect();
        return Ok(out);
    }

    let fit_field = project_correspondences(scene, cfg.fit_stride);
    let gate = cfg.coarse_gating.then_some(out.coarse.as_slice());
    let grid = build_hypothesis_grid(&pyramid, gate, &fit_field, &cfg.hypothesis, stage_u64(seed, "hypotheses"));

    if variant == Variant::Base32WithH {
        let corners = base_quad::<f64>();
        for h in grid.cells.iter().flatten() {
            let Ok((_, target)) = attributes_to_virtual_corners(&h.attributes, &cfg.hypothesis.bounds) else {
                continue;
            };
            for (s, t) in corners.translated(&h.attributes.source).pts.iter().zip(target.pts) {
                let mut cand = MatchCandidate::new(*s, t);
                cand.confidence = Some(h.attributes.confidence);
                out.matches.push(cand);
            }
        }
        out.hypotheses = Some(grid);
        return Ok(out);
    }

    let seg = match variant {
        Variant::NoSegmentation => segment_center_only(&pyramid, &grid),
        _ => {
            let (src8, tgt8) = cfg.descriptors.synthesize(scene, Level::Mid, desc_seed);
            match cfg.scorer {
                ScorerKind::Warp => segment(
                    &pyramid,
                    &grid,
                    &WarpConsistencyScorer {
                        source_mid: &src8,
                        target_mid: &tgt8,
                    },
                ),
                ScorerKind::Embedding => {
                    let seg_seed = stage_u64(seed, "segmentation");
                    let proj = LinearProjection::new(src32.dim, src8.dim, seg_seed);
                    let pos = PositionalEmbeddingTable::new(src8.dim, 1.0, seg_seed);
                    let scorer = EmbeddingScorer {
                        source_mid: &src8,
                        source_coarse: &src32,
                        proj: &proj,
                        pos: &pos,
                    };
                    segment(&pyramid, &grid, &scorer)
                }
                ScorerKind::Geometric => segment(&pyramid, &grid, &GeometricScorer { truth: scene }),
            }
        }
    };

    let (src2, tgt2) = cfg.descriptors.synthesize(scene, Level::Fine, desc_seed);
    let counter = AttentionCostCounter::new();
    let size = scene.image_size;
    let refined: Vec<Option<MatchCandidate>> = seg
        .cells
        .par_iter()
        .enumerate()
        .filter_map(|(j, cell)| cell.map(|c| (j, c)))
        .map(|(j, choice)| {
            let center = pyramid.unit_center(Level::Mid, j % seg.cols, j / seg.cols);
            let h = grid.cells[choice.hypothesis].as_ref()?;
            let target = h.homography.apply(&center).ok().filter(|t| size.contains(t))?;
            match refine_match(&MatchCandidate::new(center, target), &src2, &tgt2, &cfg.refine, &counter) {
                Ok(m) => Some(m),
                Err(RefinementError::AllMasked | RefinementError::LengthMismatch { .. }) => None,
            }
        })
        .collect();
    out.dropped = refined.iter().filter(|m| m.is_none()).count();
    out.matches = refined.into_iter().flatten().collect();
    out.inner_products = counter.inner_products();
    out.queries = counter.queries();
    out.hypotheses = Some(grid);
    out.segmentation = Some(seg);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypothesis::AttributeNoise;
    use crate::scene::{generate_scene, GroundTruth, SceneOptions};

    fn noise_free() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.descriptors.noise_sigma = 0.0;
        cfg.hypothesis.noise = AttributeNoise::NONE;
        cfg
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn base32_no_h_emits_unit_centers() {
        let scene = generate_scene(0, &SceneOptions::default()).unwrap();
        let out = run_pipeline(&scene, Variant::Base32NoH, &PipelineConfig::default(), 0).unwrap();
        assert_eq!(out.matches.len(), 300);
        for m in &out.matches {
            for v in [m.source.x, m.source.y, m.target.x, m.target.y] {
                assert_eq!((v - 16.0) % 32.0, 0.0);
            }
        }
    }

    #[test]
    fn single_plane_full_pipeline_is_accurate() {
        let opts = SceneOptions {
            n_planes: 1,
            fronto_parallel: true,
            ..Default::default()
        };
        let scene = generate_scene(1, &opts).unwrap();
        let out = run_pipeline(&scene, Variant::Full, &noise_free(), 1).unwrap();
        assert!(out.matches.len() > 1000);
        assert!(out.inner_products <= 49 * out.queries && out.queries == out.matches.len() as u64);
        let within = out
            .matches
            .iter()
            .filter(|m| scene.target_at(&m.source).is_some_and(|t| (m.best_target() - t).norm() <= 1.0))
            .count();
        assert!(within as f64 / out.matches.len() as f64 > 0.99);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let scene = generate_scene(2, &SceneOptions::default()).unwrap();
        let a = run_pipeline(&scene, Variant::Full, &PipelineConfig::default(), 5).unwrap();
        let b = run_pipeline(&scene, Variant::Full, &PipelineConfig::default(), 5).unwrap();
        assert_eq!(a.matches, b.matches);
        assert_eq!(a.segmentation, b.segmentation);
    }
}
