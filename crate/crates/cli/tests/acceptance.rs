//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use hypomatch::evaluation::{estimate_relative_pose, pose_error, run_ablation, AblationConfig, RansacConfig};
use hypomatch::geometry::{
    attributes_to_homography, attributes_to_virtual_corners, base_quad, solve_homography_dlt, AttributeBounds,
    CornerQuad, GeometryError, HomographyAttributes,
};
use hypomatch::hypothesis::{build_hypothesis_grid, AttributeNoise, HypothesisConfig, PyramidConfig};
use hypomatch::pipeline::{run_pipeline, PipelineConfig, Variant};
use hypomatch::refinement::refinement_loss;
use hypomatch::scene::{
    generate_scene, project_correspondences, sample_matches, GroundTruth, PlanarScene, SceneOptions,
};
use hypomatch::segmentation::{focal_loss, segment, FocalMode, GeometricScorer};
use hypomatch::Point2;
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn rel_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-5 * analytic.abs().max(numeric.abs()).max(1e-3)
}

fn roundtrip() -> Outcome {
    let start = Instant::now();
    let bounds = AttributeBounds::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut rejected = 0;
    for _ in 0..10_000 {
        let a = HomographyAttributes {
            source: Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
            target: Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
            scale: rng.random_range(bounds.scale_min.ln()..bounds.scale_max.ln()).exp(),
            rotation: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            perspective: std::array::from_fn(|_| rng.random_range(-bounds.perspective_max..bounds.perspective_max)),
            confidence: rng.random_range(0.0..1.0),
        };
        let (Ok((src, dst)), Ok(h)) = (attributes_to_virtual_corners(&a, &bounds), attributes_to_homography(&a, &bounds))
        else {
            rejected += 1;
            continue;
        };
        for (s, d) in src.pts.iter().zip(&dst.pts) {
            worst = worst.max((h.apply(s).unwrap() - d).norm());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-8 && secs < 10.0 && rejected == 0,
        format!("max corner error {worst:.2e} px over 10000 blocks, {rejected} rejected, {secs:.2} s"),
    )
}

fn singular_guard() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = base_quad::<f64>();
    let mut accepted = 0;
    for _ in 0..1000 {
        let p = |rng: &mut ChaCha8Rng| Vector2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let (a, b, free) = (p(&mut rng), p(&mut rng), p(&mut rng));
        let c = a + (b - a) * rng.random_range(-2.0..2.0);
        let mut pts = [a, b, c, free];
        let k = rng.random_range(0..4);
        pts.swap(3, k);
        let bad = CornerQuad::new(pts);
        for res in [solve_homography_dlt(&base, &bad), solve_homography_dlt(&bad, &base)] {
            if !matches!(res, Err(GeometryError::SingularSystem { .. })) {
                accepted += 1;
            }
        }
    }
    outcome(accepted == 0, format!("{accepted} of 2000 solves on 1000 degenerate quads accepted"))
}

fn plane_homography() -> Outcome {
    let mut worst: f64 = 0.0;
    let (mut checked, mut short) = (0, 0);
    for seed in 0..100 {
        let scene = generate_scene(seed, &SceneOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for (id, region) in scene.planes.iter().enumerate() {
            let h = scene.plane_homography(id);
            let (mut n, mut tries) = (0, 0);
            while n < 50 && tries < 100_000 {
                tries += 1;
                let x: Vector3<f64> = region.center
                    + region.axis_u * rng.random_range(-region.half_u..region.half_u)
                    + region.axis_v * rng.random_range(-region.half_v..region.half_v);
                let project = |cam: &hypomatch::scene::Camera| cam.intrinsics.project(&cam.pose.transform(&x));
                let (Some(x1), Some(x2)) = (project(&scene.cam1), project(&scene.cam2)) else {
                    continue;
                };
                if !scene.image_size.contains(&x1) || !scene.image_size.contains(&x2) {
                    continue;
                }
                worst = worst.max((h.apply(&x1).unwrap() - x2).norm());
                n += 1;
                checked += 1;
            }
            short += (n < 50) as usize;
        }
    }
    outcome(worst < 1e-8 && short == 0, format!("max |Hx1 - x2| = {worst:.2e} px over {checked} points visible in both views"))
}

fn segmentation_oracle() -> Outcome {
    let mut mismatches = 0;
    let mut units = 0;
    for seed in 0..100 {
        let scene = generate_scene(seed, &SceneOptions::default()).unwrap();
        let pyramid = PyramidConfig::new(scene.image_size);
        let field = project_correspondences(&scene, 4);
        let grid = build_hypothesis_grid(&pyramid, None, &field, &HypothesisConfig::default(), seed);
        let seg = segment(&pyramid, &grid, &GeometricScorer { truth: &scene });
        for j in 0..seg.cells.len() {
            let (col, row) = (j % seg.cols, j / seg.cols);
            let center = Point2::new((col as f64 + 0.5) * 8.0, (row as f64 + 0.5) * 8.0);
            let expected = scene.target_at(&center).and_then(|truth| {
                let (pc, pr) = ((col / 4) as i64, (row / 4) as i64);
                let mut best: Option<(f64, u8, usize)> = None;
                // Center first so that ties resolve to it, then row-major.
                for slot in [5u8, 1, 2, 3, 4, 6, 7, 8, 9] {
                    let (c, r) = (pc + (slot as i64 - 1) % 3 - 1, pr + (slot as i64 - 1) / 3 - 1);
                    if c < 0 || r < 0 || c as usize >= grid.cols || r as usize >= grid.rows {
                        continue;
                    }
                    let idx = r as usize * grid.cols + c as usize;
                    let Some(h) = &grid.cells[idx] else { continue };
                    let Ok(p) = h.homography.apply(&center) else { continue };
                    let e = (p - truth).norm();
                    if best.is_none_or(|(b, _, _)| e < b) {
                        best = Some((e, slot, idx));
                    }
                }
                best.map(|(_, s, i)| (s, i))
            });
            let got = seg.cells[j].map(|c| (c.slot, c.hypothesis));
            units += 1;
            if got != expected {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over {units} units in 100 scenes"))
}

fn hypomatch() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hypomatch"))
}

fn attention_counts(dir: &Path) -> Outcome {
    let run = |queries: usize| -> Option<toml::Table> {
        let out = dir.join(format!("bench{queries}"));
        let status = hypomatch()
            .args(["bench-attn", "--queries", &queries.to_string(), "--out-dir"])
            .arg(&out)
            .output()
            .ok()?;
        if !status.status.success() {
            return None;
        }
        std::fs::read_to_string(out.join("bench_attn.toml")).ok()?.parse().ok()
    };
    let (Some(one), Some(hundred)) = (run(1), run(100)) else {
        return outcome(false, "bench-attn did not run".into());
    };
    let int = |t: &toml::Table, k: &str| t.get(k).and_then(|v| v.as_integer()).unwrap_or(-1);
    let ratio = one.get("ratio").and_then(|v| v.as_float()).unwrap_or(f64::NAN);
    let pass = int(&one, "unidirectional_per_match") == 49
        && int(&one, "bidirectional_per_match") == 2500
        && (ratio - 2500.0 / 49.0).abs() < 1e-12
        && int(&hundred, "unidirectional_total") == 4900
        && int(&hundred, "bidirectional_total") == 250_000;
    outcome(
        pass,
        format!(
            "per match {} vs {}, ratio {ratio:.2}; 100 queries: {} vs {}",
            int(&one, "unidirectional_per_match"),
            int(&one, "bidirectional_per_match"),
            int(&hundred, "unidirectional_total"),
            int(&hundred, "bidirectional_total")
        ),
    )
}

fn gradients() -> Outcome {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut focal_bad = 0;
    for k in 0..1000 {
        let mode = if k % 2 == 0 { FocalMode::Softmax } else { FocalMode::Sigmoid };
        let s: Vec<f64> = (0..9).map(|_| rng.random_range(-4.0..4.0)).collect();
        let t = rng.random_range(0..9);
        let l = focal_loss(&s, t, 2.0, 0.25, mode).unwrap();
        for i in 0..9 {
            let (mut a, mut b) = (s.clone(), s.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (focal_loss(&a, t, 2.0, 0.25, mode).unwrap().value
                - focal_loss(&b, t, 2.0, 0.25, mode).unwrap().value)
                / (2.0 * h);
            if !rel_close(l.grad[i], fd) {
                focal_bad += 1;
            }
        }
    }
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    let mut refine_bad = 0;
    let mut refine_checked = 0;
    for _ in 0..1000 {
        let truth = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let p = truth + Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let z = rng.random_range(-6.0..6.0);
        let l = refinement_loss(&p, &truth, sigmoid(z), 2.0);
        let at = |p: Point2, z: f64| refinement_loss(&p, &truth, sigmoid(z), 2.0);
        let mut checks = vec![(l.grad_logit, (at(p, z + h).value - at(p, z - h).value) / (2.0 * h))];
        for axis in 0..2 {
            let mut e = Vector2::zeros();
            e[axis] = h;
            let (hi, lo) = (at(p + e, z), at(p - e, z));
            // The inlier label is a step; skip the measure-zero straddling case.
            if (hi.endpoint <= 2.0) == (lo.endpoint <= 2.0) {
                checks.push((l.grad_point[axis], (hi.value - lo.value) / (2.0 * h)));
            }
        }
        for (a, n) in checks {
            refine_checked += 1;
            if !rel_close(a, n) {
                refine_bad += 1;
            }
        }
    }
    outcome(
        focal_bad == 0 && refine_bad == 0,
        format!("focal: {focal_bad} of 9000 partials off; refinement: {refine_bad} of {refine_checked} partials off"),
    )
}

fn ablation_ordering() -> Outcome {
    let start = Instant::now();
    let cfg = AblationConfig {
        scenes: 50,
        ..AblationConfig::default()
    };
    let result = run_ablation(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let at = |seed: u64, v: Variant| {
        result
            .per_scene
            .iter()
            .find(|r| r.seed == seed && r.variant == v)
            .map(|r| r.median_endpoint_px)
            .unwrap()
    };
    let (mut a, mut b, mut c) = (0, 0, 0);
    for seed in 0..50 {
        let no_h = at(seed, Variant::Base32NoH);
        let with_h = at(seed, Variant::Base32WithH);
        let full = at(seed, Variant::Full);
        let no_seg = at(seed, Variant::NoSegmentation);
        a += (no_h > with_h) as usize;
        b += (with_h >= full) as usize;
        c += (full <= no_seg) as usize;
    }
    let medians: Vec<String> = result
        .reports
        .iter()
        .map(|r| format!("{} {:.3}", r.variant, r.median_endpoint_px))
        .collect();
    outcome(
        a >= 45 && b >= 45 && c >= 45 && secs < 300.0,
        format!(
            "no_H > with_H {a}/50, with_H >= full {b}/50, full <= no_seg {c}/50 [{}], {secs:.1} s",
            medians.join(", ")
        ),
    )
}

fn noise_free() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.descriptors.noise_sigma = 0.0;
    cfg.hypothesis.noise = AttributeNoise::NONE;
    cfg
}

fn pose_sanity() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let scene = generate_scene(seed, &SceneOptions::default()).unwrap();
        let field = project_correspondences(&scene, 4);
        let pairs: Vec<(Point2, Point2)> = sample_matches(&field, 500, seed)
            .unwrap()
            .iter()
            .map(|m| (m.source, m.target))
            .collect();
        let est = estimate_relative_pose(
            &pairs,
            &scene.cam1.intrinsics,
            &scene.cam2.intrinsics,
            &RansacConfig::default(),
            seed,
        )
        .unwrap();
        worst = worst.max(pose_error(&est, scene.relative_pose()).0);
    }
    let cfg = AblationConfig {
        scenes: 50,
        pipeline: noise_free(),
        variants: vec![Variant::Full],
        ..AblationConfig::default()
    };
    let report = &run_ablation(&cfg).unwrap().reports[0];
    outcome(
        worst < 0.1 && report.auc_5 >= 0.95,
        format!(
            "perfect matches: max rotation error {worst:.2e} deg; full pipeline AUC@5 {:.4} (AUC@10 {:.4}, {} failures)",
            report.auc_5, report.auc_10, report.pose_failures
        ),
    )
}

fn subpixel() -> Outcome {
    let opts = SceneOptions {
        n_planes: 1,
        ..SceneOptions::default()
    };
    let mut cfg = PipelineConfig::default();
    cfg.descriptors.noise_sigma = 0.0;
    let (mut post, mut window, mut improved) = (Vec::new(), 0usize, 0usize);
    for seed in 0..20 {
        let scene: PlanarScene = generate_scene(seed, &opts).unwrap();
        let out = run_pipeline(&scene, Variant::Full, &cfg, seed).unwrap();
        for m in &out.matches {
            let (Some(gt), Some(r)) = (scene.target_at(&m.source), m.refined) else {
                continue;
            };
            let (before, after) = ((m.target - gt).norm(), (r - gt).norm());
            post.push(after);
            if before <= 2.0 * (cfg.refine.window_radius as f64) {
                window += 1;
                improved += (after < before) as usize;
            }
        }
    }
    let med = median(post);
    let frac = improved as f64 / window as f64;
    outcome(
        med < 0.5 && frac >= 0.95,
        format!("median refined error {med:.3} px; improved {improved}/{window} = {frac:.3} within the window"),
    )
}

fn artifacts(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<(PathBuf, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().is_some_and(|n| n != "timing.toml"))
        .map(|p| (p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

/// Runs each command once with `--emit-effective-config`, then again from
/// that file into a fresh directory, and compares every artifact except
/// the timing file.
fn determinism(root: &Path) -> Outcome {
    let scene_dir = root.join("det-scene");
    let run_dir = root.join("det-run");
    let ablate_dir = root.join("det-ablate");
    let path = |p: PathBuf| p.display().to_string();
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("gen-scene", vec!["gen-scene".into(), "--seed".into(), "3".into()]),
        ("run-pipeline", vec!["run-pipeline".into(), "--seed".into(), "3".into()]),
        ("ablate", vec!["ablate".into(), "--scenes".into(), "2".into()]),
        ("bench-attn", vec!["bench-attn".into(), "--queries".into(), "10".into()]),
        (
            "eval-pose",
            vec![
                "eval-pose".into(),
                "--scene".into(),
                path(scene_dir.join("scene.toml")),
                "--matches".into(),
                path(run_dir.join("matches.bin")),
            ],
        ),
        ("report", vec!["report".into(), "--input".into(), path(ablate_dir.join("ablation.toml"))]),
    ];
    let run = |args: &[String], extra: &[String], dir: &Path| {
        hypomatch()
            .args(args)
            .args(extra)
            .arg("--out-dir")
            .arg(dir)
            .output()
            .is_ok_and(|o| o.status.success())
    };
    for (dir, (_, args)) in [&scene_dir, &run_dir, &ablate_dir].into_iter().zip(&commands) {
        if !run(args, &[], dir) {
            return outcome(false, format!("could not prepare inputs in {}", dir.display()));
        }
    }
    let mut differing = Vec::new();
    let mut files = 0;
    for (name, args) in &commands {
        let (a, b) = (root.join(format!("{name}-a")), root.join(format!("{name}-b")));
        let effective = path(root.join(format!("{name}-effective.toml")));
        let first = run(args, &["--timing".into(), "--emit-effective-config".into(), effective.clone()], &a);
        let second = first && run(args, &["--timing".into(), "--config".into(), effective], &b);
        let same = second && {
            let (fa, fb) = (artifacts(&a), artifacts(&b));
            files += fa.len();
            !fa.is_empty() && fa == fb
        };
        if !same {
            differing.push(*name);
        }
    }
    outcome(
        differing.is_empty(),
        format!(
            "6 commands replayed from their effective config, {files} artifact files compared; differing: {}",
            if differing.is_empty() { "none".to_string() } else { differing.join(", ") }
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("parameterization round-trip", Box::new(roundtrip)),
        ("singularity guard", Box::new(singular_guard)),
        ("plane-induced homography", Box::new(plane_homography)),
        ("segmentation oracle equivalence", Box::new(segmentation_oracle)),
        ("attention cost counts", Box::new(|| attention_counts(tmp.path()))),
        ("loss gradient checks", Box::new(gradients)),
        ("ablation ordering", Box::new(ablation_ordering)),
        ("end-to-end pose sanity", Box::new(pose_sanity)),
        ("sub-pixel refinement", Box::new(subpixel)),
        ("determinism", Box::new(|| determinism(tmp.path()))),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += !o.pass as usize;
        println!("{} {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, k + 1, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
