mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use hypomatch::evaluation::{
    auc, estimate_relative_pose, point_accuracy, pose_error, run_ablation, AblationResult, MetricReport,
    SceneMetrics,
};
use hypomatch::hypothesis::{coarse_loss, loss_gate_partition, true_target_units, CoarseMatch, GridIndex, PyramidConfig};
use hypomatch::io::{self, IoError};
use hypomatch::pipeline::{run_pipeline, Variant};
use hypomatch::refinement::{
    attention_cost, bidirectional_window_attention, refine_match, AttentionCostCounter, AttentionMode,
    MatchCandidate,
};
use hypomatch::rng::stage_u64;
use hypomatch::scene::{generate_scene, project_correspondences, GroundTruth, Level, PlanarScene};
use hypomatch::Point2;
use serde::{Deserialize, Serialize};

use config::RunConfig;

const OUT_DIR_ENV: &str = "HYPOMATCH_OUT_DIR";
const REPORT_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "hypomatch", version, about = "Hypothesis-driven coarse-to-fine matching on synthetic planar scenes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [default: $HYPOMATCH_OUT_DIR, then the working directory].
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Write the merged configuration to this path.
    #[arg(long, global = true)]
    emit_effective_config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[arg(long, global = true)]
    planes: Option<usize>,
    #[arg(long, global = true)]
    width: Option<u32>,
    #[arg(long, global = true)]
    height: Option<u32>,
    /// Descriptor perturbation norm.
    #[arg(long, global = true)]
    noise_sigma: Option<f64>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    inlier_threshold_px: Option<f64>,
    #[arg(long, global = true)]
    ransac_threshold_px: Option<f64>,
    /// Also write wall-clock timings to timing.toml.
    #[arg(long, global = true)]
    timing: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded scene and its ground-truth correspondence field.
    GenScene,
    /// Run one pipeline variant on a scene and report per-stage results.
    RunPipeline {
        /// Scene file from gen-scene; generated from the seed when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Run every variant over a seeded scene set.
    Ablate {
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Count attention inner products for both window layouts.
    BenchAttn {
        #[arg(long, default_value_t = 1)]
        queries: usize,
    },
    /// Estimate relative pose from a match file.
    EvalPose {
        #[arg(long)]
        scene: PathBuf,
        /// Binary (.bin) or text match file.
        #[arg(long)]
        matches: PathBuf,
    },
    /// Re-aggregate an ablation result file into a CSV table.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::runtime(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
            RunConfig::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(c.seed, cfg.seed);
    set!(c.variant, cfg.variant);
    set!(c.planes, cfg.scene.planes);
    set!(c.width, cfg.scene.width);
    set!(c.height, cfg.scene.height);
    set!(c.noise_sigma, cfg.descriptors.noise_sigma);
    set!(c.temperature, cfg.refinement.temperature);
    set!(c.inlier_threshold_px, cfg.refinement.inlier_threshold_px);
    set!(c.ransac_threshold_px, cfg.evaluation.ransac.threshold_px);
    if c.out_dir.is_some() {
        cfg.output.dir = c.out_dir.clone();
    }
    cfg.output.timing |= c.timing;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output
        .dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = dir.join(name);
    io::write_atomic(&path, contents.as_ref())?;
    Ok(path)
}

fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(CliError::runtime)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    if let Command::Ablate { scenes: Some(n) } = &cli.command {
        cfg.evaluation.scenes = *n;
    }
    cfg.validate().map_err(CliError::Usage)?;
    if let Some(p) = &cli.common.emit_effective_config {
        io::write_atomic(p, cfg.to_toml().as_bytes())?;
    }
    let dir = out_dir(&cfg);
    let mut timing = Timing::default();
    match cli.command {
        Command::GenScene => gen_scene(&cfg, &dir)?,
        Command::RunPipeline { scene } => run_pipeline_cmd(&cfg, &dir, scene.as_deref(), &mut timing)?,
        Command::Ablate { .. } => ablate(&cfg, &dir, &mut timing)?,
        Command::BenchAttn { queries } => bench_attn(&cfg, &dir, queries, &mut timing)?,
        Command::EvalPose { scene, matches } => eval_pose(&cfg, &dir, &scene, &matches)?,
        Command::Report { input } => report(&cfg, &dir, &input)?,
    }
    if cfg.output.timing && !timing.stages.is_empty() {
        write(&dir, "timing.toml", to_toml(&timing)?)?;
    }
    Ok(())
}

/// Wall-clock seconds per stage; kept out of every deterministic artifact.
#[derive(Debug, Default, Serialize)]
struct Timing {
    stages: std::collections::BTreeMap<String, f64>,
}

impl Timing {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.stages.insert(stage.to_string(), start.elapsed().as_secs_f64());
        out
    }
}

fn load_scene(path: &Path) -> Result<PlanarScene> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    io::scene_from_toml(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn gen_scene(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let scene = generate_scene(cfg.seed, &cfg.scene_options()).map_err(CliError::runtime)?;
    let field = project_correspondences(&scene, cfg.scene.field_stride);
    let scene_path = write(dir, "scene.toml", io::scene_to_toml(&scene)?)?;
    let field_path = write(dir, "field.bin", io::encode_field(&field))?;
    println!(
        "seed {}: {} planes, {:.1}% of source samples visible in both views",
        cfg.seed,
        scene.planes.len(),
        100.0 * field.valid_fraction()
    );
    println!("wrote {} and {}", scene_path.display(), field_path.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct RunReport {
    format_version: u32,
    seed: u64,
    variant: Variant,
    stages: StageCounts,
    coarse_gate: GateSummary,
    metrics: RunMetrics,
}

/// Coarse units split by the supervision gate: those whose coarse match is
/// more than θ₁ cells from the truth get a classification term.
#[derive(Debug, Serialize, Deserialize)]
struct GateSummary {
    theta1: f64,
    classify: usize,
    correspond: usize,
    classification_loss: f64,
}

fn gate_summary(scene: &PlanarScene, coarse: &[CoarseMatch], cfg: &RunConfig) -> GateSummary {
    let gate = cfg.loss_gate();
    let pyramid = PyramidConfig::new(scene.image_size);
    let truth = true_target_units(&pyramid, &project_correspondences(scene, Level::Coarse.stride()));
    let predicted: Vec<GridIndex> = coarse.iter().map(|m| m.target).collect();
    let partition = loss_gate_partition(&predicted, &truth, gate.theta1);
    let (src, tgt) = cfg
        .pipeline()
        .descriptors
        .synthesize(scene, Level::Coarse, stage_u64(cfg.seed, "descriptors"));
    let loss = coarse_loss(&partition, &src, &tgt, &truth, &[], false);
    GateSummary {
        theta1: gate.theta1,
        classify: partition.classify.len(),
        correspond: partition.correspond.len(),
        classification_loss: loss.classification,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StageCounts {
    coarse_matches: usize,
    hypotheses: usize,
    segmented_units: usize,
    matches: usize,
    dropped: usize,
    inner_products: u64,
    queries: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunMetrics {
    matches_with_truth: usize,
    median_endpoint_px: f64,
    point_accuracy_1px: f64,
    rotation_error_deg: f64,
    translation_error_deg: f64,
    pose_failed: bool,
}

fn pair_metrics(scene: &PlanarScene, pairs: &[(Point2, Point2)], cfg: &RunConfig) -> RunMetrics {
    let mut endpoint: Vec<f64> = pairs
        .iter()
        .filter_map(|(s, t)| scene.target_at(s).map(|g| (t - g).norm()))
        .collect();
    endpoint.sort_by(f64::total_cmp);
    let median = match endpoint.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => endpoint[n / 2],
        n => 0.5 * (endpoint[n / 2 - 1] + endpoint[n / 2]),
    };
    let pose = estimate_relative_pose(
        pairs,
        &scene.cam1.intrinsics,
        &scene.cam2.intrinsics,
        &cfg.evaluation.ransac,
        cfg.seed,
    );
    let (rot, trans, failed) = match pose {
        Ok(est) => {
            let (r, t) = pose_error(&est, scene.relative_pose());
            (r, t, false)
        }
        Err(_) => (f64::INFINITY, f64::INFINITY, true),
    };
    RunMetrics {
        matches_with_truth: endpoint.len(),
        median_endpoint_px: median,
        point_accuracy_1px: point_accuracy(pairs, scene, 1.0).value,
        rotation_error_deg: rot,
        translation_error_deg: trans,
        pose_failed: failed,
    }
}

fn run_pipeline_cmd(cfg: &RunConfig, dir: &Path, scene_path: Option<&Path>, timing: &mut Timing) -> Result<()> {
    let scene = match scene_path {
        Some(p) => load_scene(p)?,
        None => generate_scene(cfg.seed, &cfg.scene_options()).map_err(CliError::runtime)?,
    };
    let out = timing
        .time("pipeline", || run_pipeline(&scene, cfg.variant, &cfg.pipeline(), cfg.seed))
        .map_err(CliError::runtime)?;
    let size = scene.image_size;
    write(dir, "matches.bin", io::encode_matches(&out.matches, size))?;
    write(dir, "matches.txt", io::format_match_table(&out.matches))?;
    if let Some(grid) = &out.hypotheses {
        write(dir, "hypotheses.bin", io::encode_hypotheses(grid, size, Some(&out.coarse)))?;
    }
    if let Some(seg) = &out.segmentation {
        write(dir, "segmentation.bin", io::encode_segmentation(seg, size))?;
    }
    let pairs: Vec<(Point2, Point2)> = out.matches.iter().map(|m| (m.source, m.best_target())).collect();
    let metrics = timing.time("evaluation", || pair_metrics(&scene, &pairs, cfg));
    let report = RunReport {
        format_version: REPORT_VERSION,
        seed: cfg.seed,
        variant: cfg.variant,
        stages: StageCounts {
            coarse_matches: out.coarse.len(),
            hypotheses: out.hypotheses.as_ref().map_or(0, |g| g.valid_count()),
            segmented_units: out.segmentation.as_ref().map_or(0, |s| s.valid_count()),
            matches: out.matches.len(),
            dropped: out.dropped,
            inner_products: out.inner_products,
            queries: out.queries,
        },
        coarse_gate: gate_summary(&scene, &out.coarse, cfg),
        metrics,
    };
    write(dir, "report.toml", to_toml(&report)?)?;
    let m = &report.metrics;
    println!(
        "{}: {} matches, median endpoint {:.3} px, accuracy@1px {:.3}, rotation {:.3}°, translation {:.3}°",
        cfg.variant, report.stages.matches, m.median_endpoint_px, m.point_accuracy_1px, m.rotation_error_deg,
        m.translation_error_deg
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct AblationFile {
    format_version: u32,
    base_seed: u64,
    #[serde(flatten)]
    result: AblationResult,
}

fn print_reports(reports: &[MetricReport]) {
    println!(
        "{:<16} {:>8} {:>12} {:>8} {:>8} {:>8} {:>10}",
        "variant", "matches", "median_px", "auc@5", "auc@10", "auc@20", "acc@1px"
    );
    for r in reports {
        println!(
            "{:<16} {:>8} {:>12.4} {:>8.4} {:>8.4} {:>8.4} {:>10.4}",
            r.variant.name(),
            r.matches,
            r.median_endpoint_px,
            r.auc_5,
            r.auc_10,
            r.auc_20,
            r.point_accuracy_1px
        );
    }
}

fn ablate(cfg: &RunConfig, dir: &Path, timing: &mut Timing) -> Result<()> {
    let result = timing.time("ablation", || run_ablation(&cfg.ablation())).map_err(CliError::runtime)?;
    write(dir, "ablation.csv", io::reports_to_csv(&result.reports)?)?;
    write(dir, "ablation_scenes.csv", io::scene_metrics_to_csv(&result.per_scene)?)?;
    print_reports(&result.reports);
    let file = AblationFile {
        format_version: REPORT_VERSION,
        base_seed: cfg.seed,
        result,
    };
    write(dir, "ablation.toml", to_toml(&file)?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchReport {
    format_version: u32,
    queries: usize,
    unidirectional_per_match: u64,
    bidirectional_per_match: u64,
    ratio: f64,
    unidirectional_total: u64,
    bidirectional_total: u64,
}

fn bench_attn(cfg: &RunConfig, dir: &Path, queries: usize, timing: &mut Timing) -> Result<()> {
    if queries == 0 {
        return Err(CliError::Usage("--queries must be positive".into()));
    }
    let scene = generate_scene(cfg.seed, &cfg.scene_options()).map_err(CliError::runtime)?;
    let pipe = cfg.pipeline();
    let seed = stage_u64(cfg.seed, "descriptors");
    let (src, tgt) = pipe.descriptors.synthesize(&scene, Level::Fine, seed);
    let margin = 2.0 * (pipe.refine.window_radius as f64 + 2.0);
    let size = scene.image_size;
    let interior = |p: &Point2| {
        p.x >= margin && p.y >= margin && p.x <= size.width as f64 - margin && p.y <= size.height as f64 - margin
    };
    let pool: Vec<(Point2, Point2)> = project_correspondences(&scene, 8)
        .iter()
        .filter(|(s, e)| e.valid && interior(s) && interior(&e.target))
        .map(|(s, e)| (s, e.target))
        .collect();
    if pool.is_empty() {
        return Err(CliError::Runtime("scene has no interior correspondences".into()));
    }
    let picks: Vec<(Point2, Point2)> = (0..queries).map(|k| pool[k % pool.len()]).collect();

    let uni = AttentionCostCounter::new();
    timing.time("unidirectional", || {
        for (s, t) in &picks {
            let _ = refine_match(&MatchCandidate::new(*s, *t), &src, &tgt, &pipe.refine, &uni);
        }
    });
    let window = |grid: &hypomatch::scene::DescriptorGrid, p: &Point2| -> Vec<Vec<f64>> {
        let (c, r) = grid.unit_of(p).expect("interior point");
        let mut w = Vec::with_capacity(25);
        for dr in -2i64..=2 {
            for dc in -2i64..=2 {
                let d = grid.get_checked(c as i64 + dc, r as i64 + dr).expect("interior window");
                w.push(d.to_vec());
            }
        }
        w
    };
    let bi = AttentionCostCounter::new();
    timing.time("bidirectional", || {
        for (s, t) in &picks {
            bidirectional_window_attention(&window(&src, s), &window(&tgt, t), pipe.refine.temperature, &bi);
        }
    });

    let per_uni = uni.inner_products() / uni.queries();
    let per_bi = bi.inner_products() / bi.queries();
    debug_assert_eq!(per_uni, attention_cost(AttentionMode::Unidirectional7x7));
    let report = BenchReport {
        format_version: REPORT_VERSION,
        queries,
        unidirectional_per_match: per_uni,
        bidirectional_per_match: per_bi,
        ratio: per_bi as f64 / per_uni as f64,
        unidirectional_total: uni.inner_products(),
        bidirectional_total: bi.inner_products(),
    };
    write(dir, "bench_attn.toml", to_toml(&report)?)?;
    println!(
        "inner products per match: unidirectional 7x7 = {}, bidirectional 5x5 self+cross = {}, ratio {:.2}",
        report.unidirectional_per_match, report.bidirectional_per_match, report.ratio
    );
    println!("totals over {queries} queries: {} vs {}", report.unidirectional_total, report.bidirectional_total);
    Ok(())
}

fn read_pairs(path: &Path) -> Result<Vec<(Point2, Point2)>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(&io::MAGIC) {
        return Ok(io::decode_matches(&bytes)?.into_iter().map(|(s, t, _)| (s, t)).collect());
    }
    let text = String::from_utf8(bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(io::parse_match_table(&text)?
        .into_iter()
        .map(|r| (Point2::new(r[0], r[1]), Point2::new(r[2], r[3])))
        .collect())
}

#[derive(Debug, Serialize)]
struct PoseReport {
    format_version: u32,
    matches: usize,
    #[serde(flatten)]
    metrics: RunMetrics,
    auc_5: f64,
    auc_10: f64,
    auc_20: f64,
}

fn eval_pose(cfg: &RunConfig, dir: &Path, scene_path: &Path, matches: &Path) -> Result<()> {
    let scene = load_scene(scene_path)?;
    let pairs = read_pairs(matches)?;
    let metrics = pair_metrics(&scene, &pairs, cfg);
    let err = cfg
        .evaluation
        .error_mode
        .combine(metrics.rotation_error_deg, metrics.translation_error_deg);
    let report = PoseReport {
        format_version: REPORT_VERSION,
        matches: pairs.len(),
        auc_5: auc(&[err], 5.0),
        auc_10: auc(&[err], 10.0),
        auc_20: auc(&[err], 20.0),
        metrics,
    };
    write(dir, "pose.toml", to_toml(&report)?)?;
    println!(
        "{} matches: rotation error {:.4}°, translation error {:.4}°{}",
        report.matches,
        report.metrics.rotation_error_deg,
        report.metrics.translation_error_deg,
        if report.metrics.pose_failed { " (estimation failed)" } else { "" }
    );
    Ok(())
}

fn report(cfg: &RunConfig, dir: &Path, input: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input).map_err(|e| CliError::Runtime(format!("{}: {e}", input.display())))?;
    let file: AblationFile =
        toml::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", input.display())))?;
    let mut variants: Vec<Variant> = Vec::new();
    for r in &file.result.per_scene {
        if !variants.contains(&r.variant) {
            variants.push(r.variant);
        }
    }
    let reports: Vec<MetricReport> = variants
        .iter()
        .map(|&v| {
            let rows: Vec<&SceneMetrics> = file.result.per_scene.iter().filter(|r| r.variant == v).collect();
            MetricReport::aggregate(v, &rows, cfg.evaluation.error_mode)
        })
        .collect();
    write(dir, "report.csv", io::reports_to_csv(&reports)?)?;
    print_reports(&reports);
    Ok(())
}
