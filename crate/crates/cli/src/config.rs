//! Run configuration: a sectioned TOML file merged with command-line flags.

use std::path::PathBuf;

use hypomatch::evaluation::{AblationConfig, PoseErrorMode, RansacConfig};
use hypomatch::geometry::AttributeBounds;
use hypomatch::hypothesis::{AttributeNoise, HypothesisConfig, LossGateConfig};
use hypomatch::pipeline::{PipelineConfig, ScorerKind, Variant};
use hypomatch::refinement::RefineConfig;
use hypomatch::scene::{DescriptorConfig, ImageSize, SceneOptions, MAX_PLANES};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    pub variant: Variant,
    pub scene: SceneSection,
    pub descriptors: DescriptorSection,
    pub hypothesis: HypothesisSection,
    pub refinement: RefineConfig,
    pub evaluation: EvaluationSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub width: u32,
    pub height: u32,
    pub planes: usize,
    pub baseline_scale: f64,
    pub fronto_parallel: bool,
    pub max_rotation_deg: f64,
    /// Sample spacing of the written ground-truth field, in pixels.
    pub field_stride: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptorSection {
    pub coarse_dim: usize,
    pub dim: usize,
    pub bandwidth: [f64; 3],
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypothesisSection {
    pub theta1: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub groups: usize,
    pub window_radius: usize,
    pub fit_stride: u32,
    pub coarse_gating: bool,
    pub scorer: ScorerKind,
    pub noise_translation_px: f64,
    pub noise_rotation_rad: f64,
    pub noise_log_scale: f64,
    pub noise_perspective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub scenes: usize,
    pub ransac: RansacConfig,
    pub error_mode: PoseErrorMode,
    pub min_confidence: f64,
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Empty means the environment default or the working directory.
    pub dir: Option<PathBuf>,
    /// Also write wall-clock timings, to `timing.toml`.
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed: 0,
            variant: Variant::Full,
            scene: SceneSection::default(),
            descriptors: DescriptorSection::default(),
            hypothesis: HypothesisSection::default(),
            refinement: RefineConfig::default(),
            evaluation: EvaluationSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl Default for SceneSection {
    fn default() -> Self {
        let s = SceneOptions::default();
        Self {
            width: s.image_size.width,
            height: s.image_size.height,
            planes: s.n_planes,
            baseline_scale: s.baseline_scale,
            fronto_parallel: s.fronto_parallel,
            max_rotation_deg: s.max_rotation_deg,
            field_stride: 8,
        }
    }
}

impl Default for DescriptorSection {
    fn default() -> Self {
        let d = DescriptorConfig::default();
        Self {
            coarse_dim: d.coarse_dim,
            dim: d.dim,
            bandwidth: d.bandwidth,
            noise_sigma: d.noise_sigma,
        }
    }
}

impl Default for HypothesisSection {
    fn default() -> Self {
        let g = LossGateConfig::default();
        let h = HypothesisConfig::default();
        let p = PipelineConfig::default();
        Self {
            theta1: g.theta1,
            focal_gamma: g.focal_gamma,
            focal_alpha: g.focal_alpha,
            groups: g.groups,
            window_radius: h.window_radius,
            fit_stride: p.fit_stride,
            coarse_gating: p.coarse_gating,
            scorer: p.scorer,
            noise_translation_px: h.noise.translation_px,
            noise_rotation_rad: h.noise.rotation_rad,
            noise_log_scale: h.noise.log_scale,
            noise_perspective: h.noise.perspective,
        }
    }
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let a = AblationConfig::default();
        Self {
            scenes: a.scenes,
            ransac: a.ransac,
            error_mode: a.error_mode,
            min_confidence: a.min_confidence,
            variants: a.variants,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn positive(name: &str, v: f64) -> Result<(), String> {
    check(v.is_finite() && v > 0.0, || format!("{name} must be positive, got {v}"))
}

fn non_negative(name: &str, v: f64) -> Result<(), String> {
    check(v.is_finite() && v >= 0.0, || format!("{name} must be non-negative, got {v}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        check(cfg.format_version == FORMAT_VERSION, || {
            format!("unsupported format_version {}", cfg.format_version)
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        let s = &self.scene;
        ImageSize::new(s.width, s.height).map_err(|e| e.to_string())?;
        check((1..=MAX_PLANES).contains(&s.planes), || {
            format!("planes must be in 1..={MAX_PLANES}, got {}", s.planes)
        })?;
        check(s.width % 32 == 0 && s.height % 32 == 0, || {
            format!("image size {}x{} must be a multiple of 32", s.width, s.height)
        })?;
        positive("scene.baseline_scale", s.baseline_scale)?;
        non_negative("scene.max_rotation_deg", s.max_rotation_deg)?;
        check(s.field_stride > 0 && s.width % s.field_stride == 0 && s.height % s.field_stride == 0, || {
            format!("scene.field_stride {} must divide the image size", s.field_stride)
        })?;

        let d = &self.descriptors;
        check(d.coarse_dim > 0 && d.dim > 0, || "descriptor dims must be positive".into())?;
        for b in d.bandwidth {
            positive("descriptors.bandwidth", b)?;
        }
        non_negative("descriptors.noise_sigma", d.noise_sigma)?;

        let h = &self.hypothesis;
        positive("hypothesis.theta1", h.theta1)?;
        non_negative("hypothesis.focal_gamma", h.focal_gamma)?;
        check((0.0..=1.0).contains(&h.focal_alpha), || {
            format!("hypothesis.focal_alpha must be in [0, 1], got {}", h.focal_alpha)
        })?;
        check(h.groups > 0 && d.coarse_dim % h.groups == 0, || {
            format!("hypothesis.groups {} must divide coarse_dim {}", h.groups, d.coarse_dim)
        })?;
        check(h.fit_stride > 0 && 32 % h.fit_stride == 0, || {
            format!("hypothesis.fit_stride {} must divide 32", h.fit_stride)
        })?;
        for (name, v) in [
            ("noise_translation_px", h.noise_translation_px),
            ("noise_rotation_rad", h.noise_rotation_rad),
            ("noise_log_scale", h.noise_log_scale),
            ("noise_perspective", h.noise_perspective),
        ] {
            non_negative(name, v)?;
        }

        let r = &self.refinement;
        positive("refinement.temperature", r.temperature)?;
        check(r.window_radius > 0, || "refinement.window_radius must be positive".into())?;
        positive("refinement.inlier_threshold_px", r.inlier_threshold_px)?;

        let e = &self.evaluation;
        check(e.scenes > 0, || "evaluation.scenes must be positive".into())?;
        positive("evaluation.ransac.threshold_px", e.ransac.threshold_px)?;
        check(e.ransac.max_iterations > 0, || "evaluation.ransac.max_iterations must be positive".into())?;
        check(e.ransac.confidence > 0.0 && e.ransac.confidence < 1.0, || {
            "evaluation.ransac.confidence must be in (0, 1)".into()
        })?;
        check(!e.variants.is_empty(), || "evaluation.variants must not be empty".into())?;
        Ok(())
    }

    pub fn scene_options(&self) -> SceneOptions {
        let s = &self.scene;
        SceneOptions {
            n_planes: s.planes,
            image_size: ImageSize {
                width: s.width,
                height: s.height,
            },
            baseline_scale: s.baseline_scale,
            fronto_parallel: s.fronto_parallel,
            max_rotation_deg: s.max_rotation_deg,
            ..SceneOptions::default()
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let d = &self.descriptors;
        let h = &self.hypothesis;
        PipelineConfig {
            descriptors: DescriptorConfig {
                coarse_dim: d.coarse_dim,
                dim: d.dim,
                bandwidth: d.bandwidth,
                noise_sigma: d.noise_sigma,
            },
            hypothesis: HypothesisConfig {
                bounds: AttributeBounds::default(),
                window_radius: h.window_radius,
                noise: AttributeNoise {
                    translation_px: h.noise_translation_px,
                    rotation_rad: h.noise_rotation_rad,
                    log_scale: h.noise_log_scale,
                    perspective: h.noise_perspective,
                },
            },
            fit_stride: h.fit_stride,
            coarse_gating: h.coarse_gating,
            scorer: h.scorer,
            refine: self.refinement,
        }
    }

    pub fn loss_gate(&self) -> LossGateConfig {
        let h = &self.hypothesis;
        LossGateConfig {
            theta1: h.theta1,
            focal_gamma: h.focal_gamma,
            focal_alpha: h.focal_alpha,
            descriptor_dim: self.descriptors.coarse_dim,
            groups: h.groups,
        }
    }

    pub fn ablation(&self) -> AblationConfig {
        let e = &self.evaluation;
        AblationConfig {
            scenes: e.scenes,
            base_seed: self.seed,
            scene: self.scene_options(),
            pipeline: self.pipeline(),
            ransac: e.ransac,
            error_mode: e.error_mode,
            variants: e.variants.clone(),
            min_confidence: e.min_confidence,
        }
    }
}
