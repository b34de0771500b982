//! Command-line interface: scene generation, descriptor caching,
//! optimization, gradient checking and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::eval::{compute_metrics, EvalMetrics};
use crate::geometry::DepthField;
use crate::imgcore::{read_pfm, read_pnm, write_pfm, write_pgm, ImageBuffer, ScalarField};
use crate::loss::{DetectorConfig, LossBreakdown, LossModes, LossWeights, Observations, Reduction};
use crate::optim::{gradcheck, init_state, run, GradcheckConfig, GradcheckReport, Init, OptimConfig};
use crate::sift::{compute_dense_grid, DEFAULT_PATCH_SIZE};
use crate::store::write_grid;
use crate::synth::{load_scene, make_scene, write_scene, SceneSpec};
use crate::{Error, Result};

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// A run whose total loss falls by less than this fraction is reported as stalled.
pub const STALL_THRESHOLD: f64 = 0.05;

#[derive(Debug, Parser)]
#[command(name = "kpdepth", version, about = "Keypoint-guided depth objective on synthetic scenes")]
pub struct Cli {
    /// Worker threads (default: all logical cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene.
    Synth(SynthArgs),
    /// Precompute a dense descriptor grid into a DGRID file.
    Descriptors(DescriptorArgs),
    /// Optimize depth, poses and mask on a scene.
    Optimize(OptimizeArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Depth metrics for a prediction, or a table from optimize manifests.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    Gradcheck,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene spec JSON; a preset is used when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default", conflicts_with = "spec")]
    pub preset: Preset,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DescriptorArgs {
    /// PGM/PPM or PFM image.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PATCH_SIZE as u16)]
    pub size: u16,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Gt,
    Perturbed,
    Constant,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ObjectiveArgs {
    /// Restrict the keypoint loss to detected keypoints.
    #[arg(long, value_enum, default_value = "on")]
    pub det: Switch,
    /// Weight data terms by the explainability mask and regularize it.
    #[arg(long, value_enum, default_value = "on")]
    pub expl: Switch,
    /// Whether the mask also weights keypoint residuals.
    #[arg(long, value_enum, default_value = "on")]
    pub mask_keypoints: Switch,
    #[arg(long, value_enum, default_value = "mean")]
    pub reduction: ReductionArg,
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.2)]
    pub delta: f64,
    #[arg(long, default_value_t = DEFAULT_PATCH_SIZE as u16)]
    pub patch_size: u16,
    #[arg(long, default_value_t = crate::sift::DEFAULT_CONTRAST_THRESHOLD)]
    pub contrast_threshold: f64,
    #[arg(long, default_value_t = crate::sift::DEFAULT_MAX_KEYPOINTS)]
    pub max_keypoints: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReductionArg {
    Mean,
    Sum,
}

impl ObjectiveArgs {
    fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            delta: self.delta,
        }
    }

    fn modes(&self) -> LossModes {
        LossModes {
            detector: self.det.on(),
            explainability: self.expl.on(),
            mask_gates_keypoints: self.mask_keypoints.on(),
            reduction: match self.reduction {
                ReductionArg::Mean => Reduction::Mean,
                ReductionArg::Sum => Reduction::Sum,
            },
        }
    }

    fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            max_count: self.max_keypoints,
            contrast_threshold: self.contrast_threshold,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct OptimizeArgs {
    /// Scene directory written by `synth`.
    #[arg(long)]
    pub scene: PathBuf,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    #[arg(long, value_enum, default_value = "perturbed")]
    pub init: InitKind,
    /// Log-depth noise std for `--init perturbed`.
    #[arg(long, default_value_t = 0.1)]
    pub sigma_depth: f64,
    /// Twist noise std for `--init perturbed`.
    #[arg(long, default_value_t = 0.01)]
    pub sigma_twist: f64,
    /// Depth for `--init constant`.
    #[arg(long, default_value_t = 2.0)]
    pub init_depth: f64,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-2)]
    pub lr_depth: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr_pose: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub lr_mask: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub rel_tol: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Scene directory; the built-in 16x16 gradcheck scene when omitted.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate at a perturbed state with this log-depth noise (0: ground truth).
    #[arg(long, default_value_t = 0.1)]
    pub sigma_depth: f64,
    #[arg(long, default_value_t = 0.01)]
    pub sigma_twist: f64,
    /// Debug: double one gradient entry before comparing.
    #[arg(long)]
    pub corrupt_gradient: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, requires = "gt", conflicts_with = "manifests")]
    pub pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub no_median_scale: bool,
    /// Ignore ground-truth depths below this value.
    #[arg(long)]
    pub min_depth: Option<f64>,
    /// Ignore ground-truth depths above this value.
    #[arg(long)]
    pub max_depth: Option<f64>,
    /// Optimize manifests to tabulate instead of a single prediction.
    #[arg(long, num_args = 1..)]
    pub manifests: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StallDiagnostics {
    pub initial_total: f64,
    pub final_total: f64,
    pub relative_decrease: f64,
    pub stalled: bool,
}

/// Everything needed to reproduce an optimize run. Wall time is kept in a
/// separate `timing.json` so manifests of identical runs are byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: OptimizeArgs,
    pub seed: u64,
    pub scene: String,
    pub keypoints: usize,
    pub history: String,
    pub depth: String,
    pub iterations: usize,
    pub converged: bool,
    pub final_loss: LossSummary,
    pub metrics: MetricsRecord,
    pub stall: StallDiagnostics,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossSummary {
    pub l_key: f64,
    pub l_photo: f64,
    pub l_smooth: f64,
    pub l_expl: f64,
    pub total: f64,
}

impl From<&LossBreakdown> for LossSummary {
    fn from(b: &LossBreakdown) -> Self {
        Self {
            l_key: b.l_key,
            l_photo: b.l_photo,
            l_smooth: b.l_smooth,
            l_expl: b.l_expl,
            total: b.total,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
}

impl From<EvalMetrics> for MetricsRecord {
    fn from(m: EvalMetrics) -> Self {
        Self {
            abs_rel: m.abs_rel,
            sq_rel: m.sq_rel,
            delta1: m.delta1,
            delta2: m.delta2,
            delta3: m.delta3,
            n_pixels: m.n_pixels,
        }
    }
}

impl From<MetricsRecord> for EvalMetrics {
    fn from(m: MetricsRecord) -> Self {
        Self {
            abs_rel: m.abs_rel,
            sq_rel: m.sq_rel,
            delta1: m.delta1,
            delta2: m.delta2,
            delta3: m.delta3,
            n_pixels: m.n_pixels,
        }
    }
}

/// Failures that map to exit code 1 rather than 2.
#[derive(Debug)]
enum Outcome {
    Ok,
    NumericalFailure(String),
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFinite { .. } | Error::IllConditioned(_) => 1,
        _ => 2,
    }
}

pub fn main_exit() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::NumericalFailure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn execute(cli: Cli) -> Result<Outcome> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Descriptors(a) => cmd_descriptors(&a),
        Command::Optimize(a) => cmd_optimize(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Eval(a) => cmd_eval(&a),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn cmd_synth(args: &SynthArgs) -> Result<Outcome> {
    let spec = match &args.spec {
        Some(path) => SceneSpec::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?,
        None => match args.preset {
            Preset::Default => SceneSpec::default(),
            Preset::Gradcheck => SceneSpec::gradcheck(),
        },
    };
    let scene = make_scene(&spec)?;
    write_scene(&args.out, &spec, &scene)?;
    println!("wrote scene with {} sources to {}", scene.sources.len(), args.out.display());
    Ok(Outcome::Ok)
}

/// Reads PGM/PPM, or PFM when the extension says so.
pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm")) {
        let f = read_pfm(path)?;
        ImageBuffer::new(f.width(), f.height(), 1, f.into_data())
    } else {
        read_pnm(path)
    }
}

fn cmd_descriptors(args: &DescriptorArgs) -> Result<Outcome> {
    let img = read_image(&args.image)?;
    let grid = compute_dense_grid(&img, args.size as f64)?;
    write_grid(&grid, args.size as f64, &args.out)?;
    println!("wrote {}x{} descriptor grid to {}", grid.width(), grid.height(), args.out.display());
    Ok(Outcome::Ok)
}

fn scene_observations(dir: &Path, objective: &ObjectiveArgs) -> Result<(crate::synth::SceneSample, Observations)> {
    let (_, scene) = load_scene(dir)?;
    let obs = Observations::new(
        scene.target.clone(),
        scene.sources.clone(),
        scene.intrinsics,
        objective.patch_size as f64,
        objective.detector(),
    )?;
    Ok((scene, obs))
}

/// Inverse depth scaled to `[0, 1]` by its maximum.
fn inverse_depth_image(depth: &DepthField) -> Result<ImageBuffer> {
    let inv: Vec<f64> = depth.depths().iter().map(|d| 1.0 / d).collect();
    let max = inv.iter().copied().fold(0.0, f64::max);
    ImageBuffer::new(depth.width(), depth.height(), 1, inv.iter().map(|q| q / max).collect())
}

pub fn optimize_config(args: &OptimizeArgs) -> OptimConfig {
    OptimConfig {
        lr_depth: args.lr_depth,
        lr_pose: args.lr_pose,
        lr_mask: args.lr_mask,
        max_iters: args.iters,
        rel_tol: args.rel_tol,
        weights: args.objective.weights(),
        modes: args.objective.modes(),
        ..OptimConfig::default()
    }
}

fn cmd_optimize(args: &OptimizeArgs) -> Result<Outcome> {
    let started = Instant::now();
    let config = optimize_config(args);
    config.validate()?;
    let init = match args.init {
        InitKind::Gt => Init::Gt,
        InitKind::Constant => Init::Constant { depth: args.init_depth },
        InitKind::Perturbed => Init::Perturbed {
            sigma_depth: args.sigma_depth,
            sigma_twist: args.sigma_twist,
            seed: args.seed,
        },
    };
    let (scene, obs) = scene_observations(&args.scene, &args.objective)?;
    let mut state = init_state(&scene, init)?;
    let history = run(&mut state, &obs, &config)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let depth = &state.vars.depth;
    write_pfm(
        args.out.join("depth.pfm"),
        &ScalarField::new(depth.width(), depth.height(), depth.depths())?,
    )?;
    write_pgm(args.out.join("inverse_depth.pgm"), &inverse_depth_image(depth)?)?;
    write_text(&args.out.join("history.csv"), &history.to_csv())?;

    let first = history.history.first().expect("max_iters >= 1");
    let last = history.history.last().expect("max_iters >= 1");
    let decrease = history.relative_decrease();
    let metrics = compute_metrics(depth, &scene.gt_depth, None, true)?;
    let manifest = RunManifest {
        command: "optimize".into(),
        config: args.clone(),
        seed: args.seed,
        scene: args.scene.display().to_string(),
        keypoints: obs.keypoints.len(),
        history: "history.csv".into(),
        depth: "depth.pfm".into(),
        iterations: history.history.len(),
        converged: history.converged,
        final_loss: last.into(),
        metrics: metrics.into(),
        stall: StallDiagnostics {
            initial_total: first.total,
            final_total: last.total,
            relative_decrease: decrease,
            stalled: decrease < STALL_THRESHOLD,
        },
        diagnostics: last.diagnostics.clone(),
    };
    write_text(&args.out.join("manifest.json"), &to_json(&manifest))?;
    let timing = serde_json::json!({ "wall_time_seconds": started.elapsed().as_secs_f64() });
    write_text(&args.out.join("timing.json"), &to_json(&timing))?;

    println!(
        "{} iterations, total {:.6} -> {:.6}, abs_rel {:.4}, delta1 {:.4}{}",
        manifest.iterations,
        first.total,
        last.total,
        metrics.abs_rel,
        metrics.delta1,
        if manifest.stall.stalled { " (stalled)" } else { "" }
    );
    Ok(Outcome::Ok)
}

pub fn run_gradcheck(args: &GradcheckArgs) -> Result<GradcheckReport> {
    let (scene, obs) = match &args.scene {
        Some(dir) => scene_observations(dir, &args.objective)?,
        None => {
            let scene = make_scene(&SceneSpec::gradcheck())?;
            let obs = Observations::new(
                scene.target.clone(),
                scene.sources.clone(),
                scene.intrinsics,
                args.objective.patch_size as f64,
                args.objective.detector(),
            )?;
            (scene, obs)
        }
    };
    let init = if args.sigma_depth == 0.0 && args.sigma_twist == 0.0 {
        Init::Gt
    } else {
        Init::Perturbed {
            sigma_depth: args.sigma_depth,
            sigma_twist: args.sigma_twist,
            seed: args.seed,
        }
    };
    let state = init_state(&scene, init)?;
    let config = OptimConfig {
        weights: args.objective.weights(),
        modes: args.objective.modes(),
        ..OptimConfig::default()
    };
    config.weights.validate()?;
    let check = GradcheckConfig {
        samples: args.samples,
        step: args.step,
        seed: args.seed,
        corrupt: args.corrupt_gradient,
    };
    gradcheck(&state, &obs, &config, &check)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Outcome> {
    let report = run_gradcheck(args)?;
    println!(
        "max relative error {:.3e} over {} entries ({} skipped near kinks)",
        report.max_rel_error, report.checked, report.skipped
    );
    if report.checked == 0 {
        return Ok(Outcome::NumericalFailure("no gradient entries could be checked".into()));
    }
    if report.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::NumericalFailure(format!(
            "gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e} at entry {:?}",
            report.max_rel_error, report.worst_index
        )))
    }
}

fn read_depth(path: &Path) -> Result<DepthField> {
    let f = read_pfm(path)?;
    if let Some(bad) = f.data().iter().find(|d| !(**d > 0.0 && d.is_finite())) {
        return Err(Error::format(path, format!("depth values must be positive and finite, found {bad}")));
    }
    DepthField::from_depth(f.width(), f.height(), f.data())
}

fn row_label(cfg: &OptimizeArgs) -> String {
    let det = if cfg.objective.det.on() { "Det" } else { "No det" };
    let expl = if cfg.objective.expl.on() { "expl" } else { "no expl" };
    format!("{det} + {expl}")
}

fn cmd_eval(args: &EvalArgs) -> Result<Outcome> {
    if !args.manifests.is_empty() {
        let mut rows = Vec::new();
        for path in &args.manifests {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
            rows.push((row_label(&m.config), EvalMetrics::from(m.metrics)));
        }
        print!("{}", EvalMetrics::table(&rows));
        return Ok(Outcome::Ok);
    }
    let (Some(pred), Some(gt)) = (&args.pred, &args.gt) else {
        return Err(Error::Config("eval needs --pred and --gt, or --manifests".into()));
    };
    let (pred, gt) = (read_depth(pred)?, read_depth(gt)?);
    let gt_depths = gt.depths();
    let valid: Vec<bool> = gt_depths
        .iter()
        .map(|&d| args.min_depth.is_none_or(|m| d >= m) && args.max_depth.is_none_or(|m| d <= m))
        .collect();
    let metrics = compute_metrics(&pred, &gt, Some(&valid), !args.no_median_scale)?;
    println!("{}", EvalMetrics::CSV_HEADER);
    println!("{}", metrics.csv_row());
    print!("{}", EvalMetrics::table(&[("prediction".into(), metrics)]));
    Ok(Outcome::Ok)
}
