//! Command-line front end.
//!
//! Every option can also come from a JSON object passed with `--config`;
//! keys are long option names and command-line values take precedence.
//! Exit codes: 0 success, 1 runtime or partial failure, 2 invalid input.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::warn;
use nalgebra::DVector;
use rayon::prelude::*;
use serde_json::Value;

use crate::crf::{PairwiseSet, UnaryPrediction, COVARIANCE_FLOOR, INIT_PAIR_SCALE};
use crate::dataset::{self, GroundTruth, Manifest, Prediction};
use crate::error::{invalid, Error, Result};
use crate::eval::{nme, EvalReport, DEFAULT_GRID_MAX, DEFAULT_GRID_STEPS, DEFAULT_THRESHOLD};
use crate::fitting::{cold_start, fit_deform_params, fitted_landmarks, FitOptions};
use crate::inference::{infer, InferOptions};
use crate::io::{read_json, write_json};
use crate::model::{ShapeModel3D, DEFAULT_MODEL_EXTENT};
use crate::training::{train_crf, TrainOptions, TrainSample};
use crate::unary::{moments_from_heatmap, read_heatmaps, synth_generate, SynthSpec};

#[derive(Debug, Parser)]
#[command(
    name = "landmark-crf",
    version,
    about = "Gaussian CRF landmark inference and training"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// JSON file of option values; explicit arguments override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads (0 = one per core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic 3D shape model.
    GenModel(GenModelArgs),
    /// Generate a synthetic dataset from a shape model.
    Synth(SynthArgs),
    /// Joint inference of landmarks and deformable parameters.
    Infer(InferArgs),
    /// Fit deformable parameters to fixed landmarks.
    FitShape(FitShapeArgs),
    /// Learn pairwise structure parameters.
    TrainCrf(TrainArgs),
    /// Gaussian moments of heatmaps.
    Moments(MomentsArgs),
    /// NME, CED, AUC and failure rate of predictions.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    /// Number of landmarks.
    #[arg(long)]
    pub n: usize,
    /// Number of shape bases.
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub seed: u64,
    /// RMS distance of the mean shape's points from its centroid.
    #[arg(long, default_value_t = DEFAULT_MODEL_EXTENT)]
    pub extent: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_range(s: &str) -> std::result::Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [a, b] => {
            let lo = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
            let hi = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
            Ok([lo, hi])
        }
        _ => Err(format!("expected LO,HI, got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub num: usize,
    #[arg(long)]
    pub seed: u64,
    /// Std of unary mean noise.
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    /// Fraction of corrupted landmarks per sample.
    #[arg(long, default_value_t = 0.0)]
    pub corrupt: f64,
    #[arg(long, default_value_t = 0.15)]
    pub corrupt_bias: f64,
    #[arg(long, default_value_t = 100.0)]
    pub corrupt_cov_scale: f64,
    #[arg(long, value_parser = parse_range, allow_hyphen_values = true, default_value = "-0.3,0.3")]
    pub pitch_range: [f64; 2],
    #[arg(long, value_parser = parse_range, allow_hyphen_values = true, default_value = "-1,1")]
    pub yaw_range: [f64; 2],
    #[arg(long, value_parser = parse_range, allow_hyphen_values = true, default_value = "-0.3,0.3")]
    pub roll_range: [f64; 2],
    #[arg(long, value_parser = parse_range, default_value = "0.8,1.3")]
    pub scale_range: [f64; 2],
    #[arg(long, default_value_t = 0.0)]
    pub q_sigma: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Weight of the shape-coefficient prior.
    #[arg(long, default_value_t = 1e-3)]
    pub lambda_q: f64,
    /// Levenberg-Marquardt iteration budget.
    #[arg(long, default_value_t = 200)]
    pub fit_max_iters: usize,
}

impl FitArgs {
    fn options(&self) -> FitOptions {
        FitOptions {
            lambda_q: self.lambda_q,
            max_iters: self.fit_max_iters,
            ..FitOptions::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Pairwise parameter file; required unless `--unary-only`.
    #[arg(long)]
    pub crf: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Output the unary means (no pairwise coupling).
    #[arg(long)]
    pub unary_only: bool,
    #[arg(long, default_value_t = 50)]
    pub max_iters: usize,
    /// Convergence threshold on the largest landmark change.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FitTarget {
    Unary,
    Gt,
}

#[derive(Debug, Args)]
pub struct FitShapeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pairwise weights for the fit; unit weights when absent.
    #[arg(long)]
    pub crf: Option<PathBuf>,
    /// Landmarks to fit: unary means or ground truth.
    #[arg(long, value_enum, default_value_t = FitTarget::Unary)]
    pub target: FitTarget,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output pairwise parameter file.
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds the PSD spot checks.
    #[arg(long)]
    pub seed: u64,
    /// Initial pairwise parameters; `C = 0.01 I` when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Training report output.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.5)]
    pub lr_growth: f64,
    #[arg(long, default_value_t = 100)]
    pub max_outer: usize,
    #[arg(long, default_value_t = 20)]
    pub stage3_steps: usize,
    #[arg(long, default_value_t = 1)]
    pub stage1_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub rel_tol: f64,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Args)]
pub struct MomentsArgs {
    /// Stacked heatmap file, one map per landmark.
    #[arg(long)]
    pub heatmaps: PathBuf,
    #[arg(long, default_value_t = COVARIANCE_FLOOR)]
    pub floor: f64,
    /// Output unary JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory with ground truth.
    #[arg(long)]
    pub data: PathBuf,
    /// Prediction directory.
    #[arg(long)]
    pub pred: PathBuf,
    /// Report JSON output.
    #[arg(long)]
    pub out: PathBuf,
    /// CED CSV output.
    #[arg(long)]
    pub ced: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = DEFAULT_GRID_MAX)]
    pub grid_max: f64,
    #[arg(long, default_value_t = DEFAULT_GRID_STEPS)]
    pub grid_steps: usize,
}

/// Command failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_)
            | Error::Io { .. }
            | Error::Json { .. }
            | Error::Format { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn config_args(path: &Path) -> Result<Vec<OsString>> {
    let value: Value = read_json(path)?;
    let obj = value.as_object().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        message: "config must be a JSON object".into(),
    })?;
    let mut out = Vec::new();
    for (key, v) in obj {
        if key == "config" {
            continue;
        }
        let flag = OsString::from(format!("--{}", key.replace('_', "-")));
        let scalar = |v: &Value| match v {
            Value::String(s) => Some(s.clone()),
            Value::Number(n) => Some(n.to_string()),
            _ => None,
        };
        match v {
            Value::Bool(true) => out.push(flag),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                let parts: Option<Vec<String>> = items.iter().map(scalar).collect();
                let parts = parts
                    .ok_or_else(|| invalid(format!("config key {key:?}: unsupported array")))?;
                out.push(flag);
                out.push(parts.join(",").into());
            }
            other => {
                let s = scalar(other)
                    .ok_or_else(|| invalid(format!("config key {key:?}: unsupported value")))?;
                out.push(flag);
                out.push(s.into());
            }
        }
    }
    Ok(out)
}

/// Inserts options from `--config FILE` right after the subcommand so that
/// explicit arguments, which come later, override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    for (k, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = args.get(k + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else { return Ok(args) };
    let extra = config_args(&path)?;
    let sub = args
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, a)| !a.to_string_lossy().starts_with('-'))
        .map(|(k, _)| k)
        .unwrap_or(args.len());
    let mut out = args[..(sub + 1).min(args.len())].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[(sub + 1).min(args.len())..]);
    Ok(out)
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let raw: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let expanded = match expand_config(raw) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(expanded) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(&cli.command)) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cmd: &Command) -> CmdResult {
    match cmd {
        Command::GenModel(a) => cmd_gen_model(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Infer(a) => cmd_infer(a),
        Command::FitShape(a) => cmd_fit_shape(a),
        Command::TrainCrf(a) => cmd_train(a),
        Command::Moments(a) => cmd_moments(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(crate::io::io_err(dir))
}

pub fn cmd_gen_model(a: &GenModelArgs) -> CmdResult {
    let model = ShapeModel3D::synthetic(a.n, a.k, a.extent, a.seed)?;
    model.save(&a.out)?;
    println!("wrote model with {} landmarks and {} bases", a.n, a.k);
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let model = ShapeModel3D::load(&a.model)?;
    let spec = SynthSpec {
        num_samples: a.num,
        noise_sigma: a.noise,
        corrupt_fraction: a.corrupt,
        corrupt_bias: a.corrupt_bias,
        corrupt_cov_scale: a.corrupt_cov_scale,
        seed: a.seed,
        pitch_range: a.pitch_range,
        yaw_range: a.yaw_range,
        roll_range: a.roll_range,
        scale_range: a.scale_range,
        q_sigma: a.q_sigma,
    };
    let samples = synth_generate(&model, &spec)?;
    create_dir(&a.out)?;
    dataset::write_synthetic(&a.out, &samples, &spec)?;
    println!("{}", samples.len());
    Ok(())
}

fn report_failures(failed: &[(String, Error)], total: usize) -> CmdResult {
    if failed.is_empty() {
        return Ok(());
    }
    for (id, e) in failed {
        eprintln!("sample {id}: {e}");
    }
    Err(Failure {
        code: 1,
        message: format!(
            "{} of {total} samples failed: {}",
            failed.len(),
            failed
                .iter()
                .map(|(id, _)| id.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    })
}

/// Runs `f` on every manifest sample in parallel and writes each result to
/// `<out>/<id>.pred.json`.
fn predict_all<F>(data: &Path, out: &Path, f: F) -> CmdResult
where
    F: Fn(&TrainSample) -> Result<Prediction> + Sync,
{
    let manifest = Manifest::load(data)?;
    create_dir(out)?;
    let results: Vec<(String, Result<()>)> = manifest
        .samples
        .par_iter()
        .map(|id| {
            let r = dataset::load_sample(data, id, manifest.n)
                .and_then(|(s, _)| f(&s))
                .and_then(|p| write_json(&dataset::pred_path(out, id), &p));
            (id.clone(), r)
        })
        .collect();
    let total = results.len();
    let failed: Vec<(String, Error)> = results
        .into_iter()
        .filter_map(|(id, r)| r.err().map(|e| (id, e)))
        .collect();
    report_failures(&failed, total)?;
    println!("{total}");
    Ok(())
}

pub fn cmd_infer(a: &InferArgs) -> CmdResult {
    let model = ShapeModel3D::load(&a.model)?;
    let opts = InferOptions {
        tol: a.tol,
        max_iters: a.max_iters,
        fit: a.fit.options(),
    };
    if a.unary_only {
        return predict_all(&a.data, &a.out, |s| {
            Ok(Prediction {
                landmarks: dataset::to_pairs(&s.unaries.stacked_means()),
                zeta: None,
                iters: 0,
                converged: true,
                energy_trace: Vec::new(),
            })
        });
    }
    let crf_path = a.crf.as_ref().ok_or_else(|| Failure {
        code: 2,
        message: "--crf is required unless --unary-only is given".into(),
    })?;
    let pairs_ = PairwiseSet::load(crf_path)?;
    if pairs_.num_landmarks() != model.num_landmarks() {
        return Err(invalid(format!(
            "pairwise file has N={}, model has N={}",
            pairs_.num_landmarks(),
            model.num_landmarks()
        ))
        .into());
    }
    predict_all(&a.data, &a.out, |s| {
        let (y, zeta, trace) = infer(&s.unaries, &pairs_, &model, &opts)?;
        Ok(Prediction {
            landmarks: dataset::to_pairs(&y),
            zeta: Some(zeta),
            iters: trace.iterations,
            converged: trace.converged,
            energy_trace: trace.iteration_energies,
        })
    })
}

pub fn cmd_fit_shape(a: &FitShapeArgs) -> CmdResult {
    let model = ShapeModel3D::load(&a.model)?;
    let n = model.num_landmarks();
    let weights = match &a.crf {
        Some(p) => PairwiseSet::load(p)?,
        None => PairwiseSet::scaled_identity(n, 1.0)?,
    };
    let opts = a.fit.options();
    let gt_only = a.target == FitTarget::Gt;
    predict_all(&a.data, &a.out, |s| {
        let y: DVector<f64> = if gt_only {
            s.y_gt.clone()
        } else {
            s.unaries.stacked_means()
        };
        let init = cold_start(&y, &model)?;
        let (zeta, diag) = fit_deform_params(&y, &weights, &model, &init, &opts)?;
        let placed = fitted_landmarks(&y, &model, &zeta)?;
        Ok(Prediction {
            landmarks: placed.iter().map(|p| [p.x, p.y]).collect(),
            zeta: Some(zeta),
            iters: diag.iterations,
            converged: diag.converged,
            energy_trace: vec![diag.objective],
        })
    })
}

pub fn cmd_train(a: &TrainArgs) -> CmdResult {
    let model = ShapeModel3D::load(&a.model)?;
    let data: Vec<TrainSample> = dataset::load_dataset(&a.data)?
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    let init = a.init.as_ref().map(|p| PairwiseSet::load(p)).transpose()?;
    let opts = TrainOptions {
        learning_rate: a.lr,
        lr_growth: a.lr_growth,
        max_outer: a.max_outer,
        stage3_steps: a.stage3_steps,
        stage1_iters: a.stage1_iters,
        rel_tol: a.rel_tol,
        seed: a.seed,
        fit: a.fit.options(),
        ..TrainOptions::default()
    };
    let (pairs_, _, report) = match train_crf(&data, &model, init.as_ref(), &opts) {
        Ok(r) => r,
        Err(Error::TrainingFailure {
            reason,
            last_finite,
        }) => {
            let mut salvage = a.out.clone().into_os_string();
            salvage.push(".last_finite");
            let salvage = PathBuf::from(salvage);
            if let Err(e) = last_finite.save(&salvage) {
                warn!("could not save last finite parameters: {e}");
            }
            return Err(Failure {
                code: 1,
                message: format!(
                    "training failed: {reason}; last finite parameters in {}",
                    salvage.display()
                ),
            });
        }
        Err(e) => return Err(e.into()),
    };
    pairs_.save(&a.out)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    println!(
        "trained on {} samples: NLL {} -> {} in {} outer iterations (initial C = {INIT_PAIR_SCALE} I unless --init)",
        data.len(),
        report.initial_nll,
        report.nll_curve().last().unwrap(),
        report.epochs.len()
    );
    Ok(())
}

pub fn cmd_moments(a: &MomentsArgs) -> CmdResult {
    let maps = read_heatmaps(&a.heatmaps)?;
    let moments: Vec<_> = maps
        .iter()
        .map(|h| moments_from_heatmap(h, a.floor))
        .collect::<Result<_>>()?;
    let (means, covs): (Vec<_>, Vec<_>) = moments.into_iter().unzip();
    let unary = UnaryPrediction::with_floor(means, covs)?;
    unary.save(&a.out)?;
    println!("{}", unary.len());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let manifest = Manifest::load(&a.data)?;
    let mut nmes = Vec::with_capacity(manifest.samples.len());
    for id in &manifest.samples {
        let gt = GroundTruth::load(&dataset::gt_path(&a.data, id))?;
        let pred = Prediction::load(&dataset::pred_path(&a.pred, id))?;
        let e = nme(&pred.stacked(), &gt.stacked(), gt.bbox.w, gt.bbox.h)
            .map_err(|e| invalid(format!("sample {id}: {e}")))?;
        nmes.push(e);
    }
    let report = EvalReport::from_nmes(nmes, a.threshold, a.grid_max, a.grid_steps)?;
    write_json(&a.out, &report)?;
    if let Some(p) = &a.ced {
        report.write_ced_csv(p)?;
    }
    println!(
        "mean NME {:.6}  AUC {:.6}  FR {:.6}",
        report.mean_nme, report.auc, report.failure_rate
    );
    Ok(())
}
