//! Command-line surface: `evaluate`, `calibrate`, `gradcheck`, `synth`.
//!
//! Exit codes: 0 success, 1 metric-level failure, 2 input error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::gradcheck::run_gradcheck;
use crate::metrics::{evaluate_image, logit_uece, ConfigEcho, EvalConfig, MetricReport, OracleOptions};
use crate::postprocess::{PipelineConfig, PostprocessConfig};
use crate::semantic::{cross_entropy, fit_temperature, CalibrationConfig, UncertaintyMode};
use crate::spatial::VarianceNormalizer;
use crate::synth::{generate_scene, CalibrationMode, Layout, OffsetModel, SceneConfig, ShapeFamily};
use crate::tensor_io::{load_bundle, read_tensor, save_bundle, write_tensor, Tensor};

pub const EXIT_OK: u8 = 0;
pub const EXIT_METRIC_FAILURE: u8 = 1;
pub const EXIT_INPUT_ERROR: u8 = 2;

/// Name of the per-scene gt class map written by `synth` (H×W i32).
pub const GT_SEMANTIC_FILE: &str = "gt_semantic.ppdl";

#[derive(Debug, Parser)]
#[command(name = "panu", version, about = "Uncertainty-aware panoptic segmentation evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode bundles and write a JSON metric report.
    Evaluate(EvaluateArgs),
    /// Fit a softmax temperature on a logits/labels dump.
    Calibrate(CalibrateArgs),
    /// Finite-difference check of every loss gradient.
    Gradcheck(GradcheckArgs),
    /// Write seeded synthetic bundles.
    Synth(SynthArgs),
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn open_unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1)"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be finite and >= 0"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be finite and > 0"))
    }
}

fn odd_kernel(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if v % 2 == 1 {
        Ok(v)
    } else {
        Err(format!("{v} is not odd"))
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Bundle directories, each with a `bundle.manifest`.
    #[arg(long, num_args = 1.., required = true)]
    pub bundles: Vec<PathBuf>,
    /// Output JSON path; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Calibration bins.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    pub bins: u32,
    #[arg(long, default_value_t = 0.1, value_parser = open_unit_interval)]
    pub heatmap_threshold: f64,
    #[arg(long, default_value_t = 7, value_parser = odd_kernel)]
    pub nms_kernel: usize,
    #[arg(long, default_value_t = 200)]
    pub top_k: usize,
    #[arg(long)]
    pub oracle_centers: bool,
    #[arg(long)]
    pub oracle_semantics: bool,
    #[arg(long)]
    pub oracle_offsets: bool,
    /// Also report every bundle separately.
    #[arg(long)]
    pub per_image: bool,
    /// Worker threads; never changes any reported number.
    #[arg(long, env = "PANU_THREADS")]
    pub threads: Option<usize>,
    /// Seed for sampling Gaussian offsets in the energy score.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Normaliser for spatial uncertainty; default is each bundle's maximum.
    #[arg(long, value_parser = positive)]
    pub max_variance: Option<f64>,
    /// Samples drawn per pixel to score Gaussian offsets.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    pub es_samples: u32,
    /// Semantic uncertainty: mcp, entropy or evidential.
    #[arg(long)]
    pub semantic_uncertainty: Option<UncertaintyMode>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Logits tensor, N×C or H×W×C.
    #[arg(long)]
    pub logits: PathBuf,
    /// Integer labels, N or H×W.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 25, value_parser = clap::value_parser!(u32).range(1..))]
    pub epochs: u32,
    #[arg(long, default_value_t = 0.001, value_parser = positive)]
    pub lr: f64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: u64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub initial_t: f64,
    /// Labels equal to this value are skipped.
    #[arg(long, default_value_t = 255)]
    pub ignore_label: i64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    pub bins: u32,
    /// Write the fit as JSON here.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4, value_parser = positive)]
    pub tolerance: f64,
    /// Random inputs per kernel.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    pub cases: u32,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ShapeArg {
    Rect,
    Disc,
    Mixed,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LayoutArg {
    Random,
    Grid,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OffsetKindArg {
    Point,
    Gaussian,
    Samples,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CalibrationArg {
    Perfect,
    Overconfident,
    Underconfident,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory; scene `i` goes to `scene_{i:04}`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub scenes: usize,
    /// Scene `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Stuff classes are the first `stuff` ids.
    #[arg(long, default_value_t = 2)]
    pub stuff: usize,
    #[arg(long, default_value_t = 4)]
    pub instances: usize,
    #[arg(long, value_enum, default_value_t = ShapeArg::Mixed)]
    pub shapes: ShapeArg,
    #[arg(long, value_enum, default_value_t = LayoutArg::Random)]
    pub layout: LayoutArg,
    #[arg(long, default_value_t = 4)]
    pub min_size: usize,
    #[arg(long, default_value_t = 10)]
    pub max_size: usize,
    #[arg(long, default_value_t = 0.0, value_parser = unit_interval)]
    pub flip_rate: f64,
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    pub offset_sigma: f64,
    #[arg(long, value_enum, default_value_t = OffsetKindArg::Point)]
    pub offset_kind: OffsetKindArg,
    /// Samples per pixel for `--offset-kind samples`.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    pub samples: u32,
    #[arg(long, default_value_t = 2.0, value_parser = positive)]
    pub heatmap_sigma: f64,
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    pub center_jitter: f64,
    #[arg(long, default_value_t = 0)]
    pub spurious_centers: usize,
    #[arg(long, value_enum, default_value_t = CalibrationArg::Perfect)]
    pub calibration: CalibrationArg,
    /// Sharpening / flattening factor for non-perfect calibration.
    #[arg(long, default_value_t = 10.0, value_parser = positive)]
    pub factor: f64,
    /// Disable every corruption.
    #[arg(long, conflicts_with_all = ["flip_rate", "offset_sigma", "center_jitter", "spurious_centers"])]
    pub zero_noise: bool,
}

/// Error carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT_ERROR,
            message: message.into(),
        }
    }
}

fn write_output(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::input(format!("cannot write {}: {e}", p.display()))),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| CliError::input(format!("cannot write output: {e}"))),
    }
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::input("--threads must be >= 1"));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::input(format!("cannot start thread pool: {e}")))
}

/// Run `evaluate` and return the report JSON.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<String, CliError> {
    let pipeline = PipelineConfig {
        postprocess: PostprocessConfig {
            heatmap_threshold: args.heatmap_threshold,
            nms_kernel: args.nms_kernel,
            top_k: args.top_k,
        },
        semantic_mode: args.semantic_uncertainty,
        variance_normalizer: args
            .max_variance
            .map(VarianceNormalizer::new)
            .transpose()
            .map_err(|e| CliError::input(e.to_string()))?,
    };
    let config = EvalConfig {
        pipeline,
        bins: args.bins as usize,
        oracle: OracleOptions {
            centers: args.oracle_centers,
            semantics: args.oracle_semantics,
            offsets: args.oracle_offsets,
        },
        es_samples: args.es_samples as usize,
        seed: args.seed,
    };
    let pool = thread_pool(args.threads)?;
    let results: Vec<_> = pool.install(|| {
        args.bundles
            .par_iter()
            .enumerate()
            .map(|(i, dir)| {
                let (bundle, gt) = load_bundle(dir).map_err(|e| CliError::input(format!("bundle {}: {e}", dir.display())))?;
                evaluate_image(&bundle, &gt, &config, i as u64)
                    .map_err(|e| CliError::input(format!("bundle {}: {e}", dir.display())))
            })
            .collect()
    });
    let images = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let names: Vec<String> = args.bundles.iter().map(|p| p.display().to_string()).collect();
    let echo = ConfigEcho::new(&config, names.clone(), args.per_image);
    let report = MetricReport::pool(&images, &names, echo);
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    Ok(json)
}

#[derive(Debug, Serialize)]
struct CalibrationOutput {
    temperature: f64,
    initial_cross_entropy: f64,
    final_cross_entropy: f64,
    initial_uece: f64,
    final_uece: f64,
    samples: usize,
    steps: usize,
    warning: bool,
}

fn load_calibration_dump(args: &CalibrateArgs) -> Result<(Array2<f64>, Vec<usize>), CliError> {
    let read = |p: &Path| read_tensor(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())));
    let logits = read(&args.logits)?;
    let labels = read(&args.labels)?;
    let z = logits
        .to_f64_array()
        .map_err(|e| CliError::input(format!("{}: {e}", args.logits.display())))?;
    let y = labels
        .to_i64_array()
        .map_err(|e| CliError::input(format!("{}: {e}", args.labels.display())))?;
    let c = *z.shape().last().expect("rank >= 1");
    let pixel_shape = &z.shape()[..z.ndim() - 1];
    if z.ndim() < 2 || pixel_shape != y.shape() {
        return Err(CliError::input(format!(
            "logits shape {:?} does not match labels shape {:?}",
            z.shape(),
            y.shape()
        )));
    }
    let n = y.len();
    let z = z.into_shape_with_order((n, c)).expect("contiguous");
    let mut rows = Vec::new();
    let mut kept = Vec::new();
    for (i, &label) in y.iter().enumerate() {
        if label == args.ignore_label {
            continue;
        }
        if label < 0 || label as usize >= c {
            return Err(CliError::input(format!("label {label} at index {i} outside [0, {c})")));
        }
        rows.push(i);
        kept.push(label as usize);
    }
    let z = z.select(ndarray::Axis(0), &rows);
    Ok((z, kept))
}

/// Run `calibrate`; returns the human-readable summary.
pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<String, CliError> {
    let (z, labels) = load_calibration_dump(args)?;
    let config = CalibrationConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        initial_t: args.initial_t,
        batch_size: args.batch_size as usize,
    };
    let input = |e: &dyn std::fmt::Display| CliError::input(e.to_string());
    let fit = fit_temperature(z.view(), &labels, &config).map_err(|e| input(&e))?;
    let bins = args.bins as usize;
    let out = CalibrationOutput {
        temperature: fit.temperature,
        initial_cross_entropy: cross_entropy(z.view(), &labels, args.initial_t).map_err(|e| input(&e))?,
        final_cross_entropy: fit.final_loss,
        initial_uece: logit_uece(z.view(), &labels, args.initial_t, bins).map_err(|e| input(&e))?,
        final_uece: logit_uece(z.view(), &labels, fit.temperature, bins).map_err(|e| input(&e))?,
        samples: labels.len(),
        steps: fit.steps,
        warning: fit.warning,
    };
    if let Some(path) = &args.output {
        let json = serde_json::to_string_pretty(&out).expect("serializes") + "\n";
        write_output(Some(path), &json, &mut std::io::sink())?;
    }
    let mut text = format!(
        "temperature {:.6}\ncross-entropy {:.6} -> {:.6}\nuECE {:.6} -> {:.6}\n",
        out.temperature, out.initial_cross_entropy, out.final_cross_entropy, out.initial_uece, out.final_uece
    );
    if out.warning {
        text.push_str("warning: cross-entropy increased during fitting\n");
    }
    Ok(text)
}

impl SynthArgs {
    pub fn scene_config(&self, index: usize) -> SceneConfig {
        let noise = !self.zero_noise;
        SceneConfig {
            height: self.height,
            width: self.width,
            num_classes: self.classes,
            num_stuff: self.stuff,
            num_instances: self.instances,
            shapes: match self.shapes {
                ShapeArg::Rect => ShapeFamily::Rectangles,
                ShapeArg::Disc => ShapeFamily::Discs,
                ShapeArg::Mixed => ShapeFamily::Mixed,
            },
            layout: match self.layout {
                LayoutArg::Random => Layout::Random,
                LayoutArg::Grid => Layout::Grid,
            },
            min_half_size: self.min_size,
            max_half_size: self.max_size,
            flip_rate: if noise { self.flip_rate } else { 0.0 },
            calibration: match self.calibration {
                CalibrationArg::Perfect => CalibrationMode::Perfect,
                CalibrationArg::Overconfident => CalibrationMode::Overconfident(self.factor),
                CalibrationArg::Underconfident => CalibrationMode::Underconfident(self.factor),
            },
            offset_sigma: if noise { self.offset_sigma } else { 0.0 },
            offset_model: match self.offset_kind {
                OffsetKindArg::Point => OffsetModel::Point,
                OffsetKindArg::Gaussian => OffsetModel::Gaussian,
                OffsetKindArg::Samples => OffsetModel::Samples(self.samples as usize),
            },
            heatmap_sigma: self.heatmap_sigma,
            center_jitter: if noise { self.center_jitter } else { 0.0 },
            spurious_centers: if noise { self.spurious_centers } else { 0 },
            ignore_label: 255,
            seed: self.seed.wrapping_add(index as u64),
        }
    }
}

/// Run `synth`; returns one line per written scene.
pub fn cmd_synth(args: &SynthArgs) -> Result<String, CliError> {
    let mut text = String::new();
    for i in 0..args.scenes {
        let cfg = args.scene_config(i);
        let scene = generate_scene(&cfg).map_err(|e| CliError::input(format!("scene {i}: {e}")))?;
        let dir = args.out.join(format!("scene_{i:04}"));
        save_bundle(&dir, &scene.bundle, &scene.gt).map_err(|e| CliError::input(e.to_string()))?;
        let labels = scene.gt.semantic().mapv(|c| c as i32);
        let t = Tensor::from_i32(&labels).expect("2-d tensor");
        write_tensor(&t, dir.join(GT_SEMANTIC_FILE)).map_err(|e| CliError::input(e.to_string()))?;
        text.push_str(&format!("{} seed={}\n", dir.display(), cfg.seed));
    }
    Ok(text)
}

/// Execute a parsed command, writing results to `out` and diagnostics to
/// `err`. Returns the exit code.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    let result = match &cli.command {
        Command::Evaluate(a) => cmd_evaluate(a).and_then(|json| write_output(a.report.as_deref(), &json, out)),
        Command::Calibrate(a) => cmd_calibrate(a).and_then(|t| write_output(None, &t, out)),
        Command::Synth(a) => cmd_synth(a).and_then(|t| write_output(None, &t, out)),
        Command::Gradcheck(a) => {
            let report = run_gradcheck(a.seed, a.cases as usize, a.tolerance);
            write_output(None, &format!("{report}\n"), out).and_then(|()| {
                if report.passed() {
                    Ok(())
                } else {
                    Err(CliError {
                        code: EXIT_METRIC_FAILURE,
                        message: "gradient check failed".into(),
                    })
                }
            })
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}
