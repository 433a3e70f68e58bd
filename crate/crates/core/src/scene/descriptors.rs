//! Surrogate feature maps.
//!
//! Each unit's descriptor is a random Fourier embedding of the 3D point seen
//! at the unit center: `[cos(G·X/ℓ), sin(G·X/ℓ)]·√(2/dim)`, with `G` a seeded
//! Gaussian frequency matrix shared by every level of the same dimension and
//! `ℓ` a level-specific bandwidth. Paired cosine/sine features make the inner
//! product exactly shift-invariant, `⟨φ(X), φ(Y)⟩ = mean_k cos(g_k·(X−Y)/ℓ)`,
//! and every embedding has unit norm.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::PlanarScene;
use crate::rng::stage_rng;
use crate::Point2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    /// 1/32 resolution.
    Coarse,
    /// 1/8 resolution.
    Mid,
    /// 1/2 resolution.
    Fine,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Coarse, Level::Mid, Level::Fine];

    pub fn stride(self) -> u32 {
        match self {
            Level::Coarse => 32,
            Level::Mid => 8,
            Level::Fine => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Coarse => "coarse",
            Level::Mid => "mid",
            Level::Fine => "fine",
        }
    }
}

/// Unit-normalized per-unit feature vectors of one image at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorGrid {
    pub level: Level,
    pub cols: usize,
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl DescriptorGrid {
    pub fn from_fn(level: Level, cols: usize, rows: usize, dim: usize, mut f: impl FnMut(usize, usize) -> Vec<f64>) -> Self {
        let mut data = Vec::with_capacity(cols * rows * dim);
        for r in 0..rows {
            for c in 0..cols {
                let v = f(c, r);
                assert_eq!(v.len(), dim, "descriptor length mismatch");
                data.extend(v);
            }
        }
        Self {
            level,
            cols,
            rows,
            dim,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, col: usize, row: usize) -> &[f64] {
        self.at(row * self.cols + col)
    }

    pub fn at(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn get_checked(&self, col: i64, row: i64) -> Option<&[f64]> {
        (col >= 0 && row >= 0 && (col as usize) < self.cols && (row as usize) < self.rows)
            .then(|| self.get(col as usize, row as usize))
    }

    pub fn stride(&self) -> u32 {
        self.level.stride()
    }

    pub fn unit_center(&self, col: usize, row: usize) -> Point2 {
        let s = self.stride() as f64;
        Vector2::new((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }

    /// Unit containing pixel `p`.
    pub fn unit_of(&self, p: &Point2) -> Option<(usize, usize)> {
        let s = self.stride() as f64;
        let (c, r) = ((p.x / s).floor(), (p.y / s).floor());
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.cols && (r as usize) < self.rows)
            .then_some((c as usize, r as usize))
    }

    /// Bilinear sample at pixel `p`, renormalized; edges clamp.
    pub fn bilinear(&self, p: &Point2) -> Vec<f64> {
        let s = self.stride() as f64;
        let gx = (p.x / s - 0.5).clamp(0.0, (self.cols - 1) as f64);
        let gy = (p.y / s - 0.5).clamp(0.0, (self.rows - 1) as f64);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.cols - 1), (y0 + 1).min(self.rows - 1));
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        let mut out = vec![0.0; self.dim];
        for (c, r, w) in [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ] {
            if w != 0.0 {
                for (o, v) in out.iter_mut().zip(self.get(c, r)) {
                    *o += w * v;
                }
            }
        }
        normalize(&mut out);
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut v);
    v
}

/// Random Fourier embedding of 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    freqs: Vec<Vector3<f64>>,
}

impl Embedding {
    /// `dim` must be even; frequencies are drawn from `N(0, I)/bandwidth`.
    pub fn new(dim: usize, bandwidth: f64, seed: u64) -> Self {
        assert!(dim >= 2 && dim % 2 == 0, "embedding dimension must be even");
        let mut rng = stage_rng(seed, &format!("descriptor-frequencies-{dim}"));
        let freqs = (0..dim / 2)
            .map(|_| {
                Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
                    / bandwidth
            })
            .collect();
        Self { freqs }
    }

    pub fn dim(&self) -> usize {
        2 * self.freqs.len()
    }

    pub fn embed(&self, x: &Vector3<f64>) -> Vec<f64> {
        let half = self.freqs.len();
        let scale = (1.0 / half as f64).sqrt();
        let mut out = vec![0.0; 2 * half];
        for (k, g) in self.freqs.iter().enumerate() {
            let (s, c) = g.dot(x).sin_cos();
            out[k] = c * scale;
            out[half + k] = s * scale;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptorConfig {
    /// Channel count at 1/32.
    pub coarse_dim: usize,
    /// Channel count at 1/8 and 1/2.
    pub dim: usize,
    /// Embedding bandwidth per level, in units of that level's cell size
    /// measured at the mean scene depth (coarse, mid, fine).
    pub bandwidth: [f64; 3],
    /// Norm of the additive Gaussian perturbation before renormalization.
    pub noise_sigma: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            coarse_dim: 128,
            dim: 64,
            bandwidth: [1.0, 1.0, 3.0],
            noise_sigma: 0.05,
        }
    }
}

impl DescriptorConfig {
    pub fn dim_for(&self, level: Level) -> usize {
        match level {
            Level::Coarse => self.coarse_dim,
            _ => self.dim,
        }
    }

    pub fn bandwidth_for(&self, level: Level) -> f64 {
        match level {
            Level::Coarse => self.bandwidth[0],
            Level::Mid => self.bandwidth[1],
            Level::Fine => self.bandwidth[2],
        }
    }

    pub fn synthesize(&self, scene: &PlanarScene, level: Level, seed: u64) -> (DescriptorGrid, DescriptorGrid) {
        DescriptorSynth::new(scene, level, self.dim_for(level), self.bandwidth_for(level), seed)
            .grids(self.noise_sigma)
    }
}

/// Noise-free descriptor evaluation for one scene and level.
pub struct DescriptorSynth<'a> {
    scene: &'a PlanarScene,
    level: Level,
    embedding: Embedding,
    seed: u64,
}

impl<'a> DescriptorSynth<'a> {
    pub fn new(scene: &'a PlanarScene, level: Level, dim: usize, bandwidth_cells: f64, seed: u64) -> Self {
        assert!(dim >= 8, "descriptor dimension must be at least 8");
        let world_per_px = scene.mean_depth() / scene.cam1.intrinsics.fx;
        let bandwidth = bandwidth_cells * level.stride() as f64 * world_per_px;
        Self {
            scene,
            level,
            embedding: Embedding::new(dim, bandwidth, seed),
            seed,
        }
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    /// Source-side descriptor at pixel `p`; `None` without a valid correspondence.
    pub fn source_descriptor_at(&self, p: &Point2) -> Option<Vec<f64>> {
        self.scene.correspondence_at(p).map(|c| self.embedding.embed(&c.world))
    }

    /// Target-side descriptor at pixel `p`; `None` unless camera 1 sees the same point.
    pub fn target_descriptor_at(&self, p: &Point2) -> Option<Vec<f64>> {
        self.scene.co_visible_from_target(p).map(|h| self.embedding.embed(&h.point))
    }

    /// Source and target grids with perturbation of norm ≈ `noise_sigma`.
    /// Units without a co-visible world point get independent random vectors.
    pub fn grids(&self, noise_sigma: f64) -> (DescriptorGrid, DescriptorGrid) {
        let stride = self.level.stride();
        let cols = (self.scene.image_size.width / stride) as usize;
        let rows = (self.scene.image_size.height / stride) as usize;
        let dim = self.embedding.dim();
        let s = stride as f64;
        let center = |k: usize| Vector2::new(((k % cols) as f64 + 0.5) * s, ((k / cols) as f64 + 0.5) * s);
        let clean_src: Vec<Option<Vec<f64>>> =
            (0..cols * rows).into_par_iter().map(|k| self.source_descriptor_at(&center(k))).collect();
        let clean_tgt: Vec<Option<Vec<f64>>> =
            (0..cols * rows).into_par_iter().map(|k| self.target_descriptor_at(&center(k))).collect();

        let finish = |clean: Vec<Option<Vec<f64>>>, side: &str| {
            let tag = format!("{}-{side}", self.level.name());
            let mut noise_rng = stage_rng(self.seed, &format!("descriptor-noise-{tag}"));
            let mut fill_rng = stage_rng(self.seed, &format!("descriptor-fill-{tag}"));
            let per_channel = noise_sigma / (dim as f64).sqrt();
            let mut data = Vec::with_capacity(cols * rows * dim);
            for d in clean {
                let mut v = match d {
                    Some(v) => v,
                    None => random_unit(&mut fill_rng, dim),
                };
                if noise_sigma > 0.0 {
                    for x in v.iter_mut() {
                        let n: f64 = noise_rng.sample(StandardNormal);
                        *x += per_channel * n;
                    }
                    normalize(&mut v);
                }
                data.extend(v);
            }
            DescriptorGrid {
                level: self.level,
                cols,
                rows,
                dim,
                data,
            }
        };
        (finish(clean_src, "source"), finish(clean_tgt, "target"))
    }
}

/// Descriptor pair for `level` with the default bandwidth.
pub fn synth_descriptors(
    scene: &PlanarScene,
    level: Level,
    dim: usize,
    noise_sigma: f64,
    seed: u64,
) -> (DescriptorGrid, DescriptorGrid) {
    let cfg = DescriptorConfig::default();
    DescriptorSynth::new(scene, level, dim, cfg.bandwidth_for(level), seed).grids(noise_sigma)
}
