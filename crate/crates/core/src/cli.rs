//! Command-line front end: `run`, `eval` and `features`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, FrtmError, Result};
use crate::features::{extract_handcrafted_features, feature_file_name, write_feature_map};
use crate::frame::LabelMask;
use crate::metrics::{evaluate_sequence, EvalOptions, EvalReport};
use crate::optim::Preset;
use crate::pipeline::{run_sequence_with, DirFrames, FeatureSource, FrameSource, PipelineConfig, RunOutput};

pub const FAILED_MARKER: &str = ".failed";
pub const TIMING_FILE: &str = "timing.json";
pub const CONFIG_FILE: &str = "config.json";
pub const EVAL_FILE: &str = "eval.json";
/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "FRTM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "frtm", version, about = "Video object segmentation with online-learned linear target models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment a sequence given its first-frame mask.
    Run(Box<RunArgs>),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Write built-in feature files for every frame of a sequence.
    Features(FeaturesArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetArg {
    Default,
    Fast,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Default => Preset::Default,
            PresetArg::Fast => Preset::Fast,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Files,
    Builtin,
}

/// Overrides shared by the config file and the command line; unset fields keep the preset value.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    /// Optimizer iteration budgets [default: default].
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    /// Frames between online updates [default: 8].
    #[arg(long)]
    pub update_interval: Option<usize>,
    /// Memory learning rate [default: 0.1].
    #[arg(long)]
    pub eta: Option<f64>,
    /// Memory capacity [default: 80].
    #[arg(long = "kmax")]
    #[serde(alias = "kmax")]
    pub k_max: Option<usize>,
    /// Floor on the weighted target share [default: 0.1].
    #[arg(long)]
    pub kappa_min: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Score threshold of the decoded mask [default: 0.5].
    #[arg(long)]
    pub threshold: Option<f32>,
    /// First-frame samples including the original [default: 5].
    #[arg(long)]
    pub initial_samples: Option<usize>,
    #[arg(long, value_enum)]
    pub feature_source: Option<SourceKind>,
    /// Stride of built-in features [default: 16].
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub compressed_channels: Option<usize>,
    #[arg(long)]
    pub label_stride: Option<usize>,
}

impl Overrides {
    /// Fields set in `self` win over those in `lower`.
    pub fn over(self, lower: Overrides) -> Overrides {
        Overrides {
            preset: self.preset.or(lower.preset),
            update_interval: self.update_interval.or(lower.update_interval),
            eta: self.eta.or(lower.eta),
            k_max: self.k_max.or(lower.k_max),
            kappa_min: self.kappa_min.or(lower.kappa_min),
            lambda1: self.lambda1.or(lower.lambda1),
            lambda2: self.lambda2.or(lower.lambda2),
            threshold: self.threshold.or(lower.threshold),
            initial_samples: self.initial_samples.or(lower.initial_samples),
            feature_source: self.feature_source.or(lower.feature_source),
            stride: self.stride.or(lower.stride),
            seed: self.seed.or(lower.seed),
            compressed_channels: self.compressed_channels.or(lower.compressed_channels),
            label_stride: self.label_stride.or(lower.label_stride),
        }
    }

    /// Resolves against the preset; `features_dir` backs the `files` source.
    pub fn resolve(&self, features_dir: Option<&Path>) -> Result<PipelineConfig> {
        let mut c = PipelineConfig::from_preset(self.preset.map(Preset::from).unwrap_or_default());
        if let Some(v) = self.update_interval {
            c.update_interval = v;
        }
        if let Some(v) = self.eta {
            c.eta = v;
        }
        if let Some(v) = self.k_max {
            c.k_max = v;
        }
        if let Some(v) = self.kappa_min {
            c.schedule.kappa_min = v;
        }
        if let Some(v) = self.lambda1 {
            c.schedule.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            c.schedule.lambda2 = v;
        }
        if let Some(v) = self.threshold {
            c.threshold = v;
        }
        if let Some(v) = self.initial_samples {
            c.n_initial_samples = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.compressed_channels {
            c.compressed_channels = v;
        }
        if let Some(v) = self.label_stride {
            c.label_stride = v;
        }
        let kind =
            self.feature_source.unwrap_or(if features_dir.is_some() { SourceKind::Files } else { SourceKind::Builtin });
        c.feature_source = match kind {
            SourceKind::Builtin => FeatureSource::Builtin { stride: self.stride.unwrap_or(16) },
            SourceKind::Files => {
                let dir = features_dir.ok_or_else(|| arg_err("--feature-source files needs --features DIR"))?;
                FeatureSource::Files { dir: dir.to_path_buf() }
            }
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Directory of frame images, processed in file-name order.
    #[arg(long)]
    pub frames: PathBuf,
    /// Indexed first-frame mask (pixel value = object id).
    #[arg(long)]
    pub mask: PathBuf,
    /// Output directory for masks, `timing.json` and `config.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of `.frtm` files for the `files` feature source.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// JSON file of overrides; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Boundary tolerance in pixels; defaults to 0.8% of the image diagonal.
    #[arg(long)]
    pub tolerance: Option<usize>,
    #[arg(long, value_name = "BOOL", default_value_t = true, action = clap::ArgAction::Set)]
    pub exclude_first: bool,
    #[arg(long, value_name = "BOOL", default_value_t = false, action = clap::ArgAction::Set)]
    pub exclude_last: bool,
    /// Report path; defaults to `eval.json` inside the prediction directory.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub stride: usize,
}

/// Paths and resolved configuration of one `run` invocation.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub frames_dir: PathBuf,
    pub mask_path: PathBuf,
    pub out_dir: PathBuf,
    pub config: PipelineConfig,
}

impl RunManifest {
    pub fn from_args(args: &RunArgs) -> Result<Self> {
        for p in [&args.frames, &args.mask].into_iter().chain(&args.features).chain(&args.config) {
            if !p.exists() {
                return Err(FrtmError::MissingInput(p.clone()));
            }
        }
        let file = match &args.config {
            Some(path) => serde_json::from_str::<Overrides>(&fs::read_to_string(path)?)
                .map_err(|e| arg_err(format!("{}: {e}", path.display())))?,
            None => Overrides::default(),
        };
        let config = args.overrides.clone().over(file).resolve(args.features.as_deref())?;
        Ok(Self { frames_dir: args.frames.clone(), mask_path: args.mask.clone(), out_dir: args.out.clone(), config })
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| arg_err(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn output_name(frames: &DirFrames, index: usize) -> String {
    frames
        .paths()
        .get(index)
        .and_then(|p| p.file_stem())
        .map(|s| format!("{}.png", s.to_string_lossy()))
        .unwrap_or_else(|| format!("{index:05}.png"))
}

pub fn cmd_run(manifest: &RunManifest) -> Result<RunOutput> {
    let out = &manifest.out_dir;
    fs::create_dir_all(out)?;
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let result = run_into(manifest);
    if let Err(e) = &result {
        fs::write(&marker, format!("{e}\n"))?;
    }
    result
}

fn run_into(manifest: &RunManifest) -> Result<RunOutput> {
    let out = &manifest.out_dir;
    write_json(&out.join(CONFIG_FILE), &manifest.config)?;
    let frames = DirFrames::open(&manifest.frames_dir)?;
    if frames.is_empty() {
        return Err(arg_err(format!("no frames in {}", manifest.frames_dir.display())));
    }
    let first = LabelMask::load(&manifest.mask_path)?;
    let output =
        run_sequence_with(&frames, &first, &manifest.config, |i, mask| mask.save(&out.join(output_name(&frames, i))))?;
    #[derive(Serialize)]
    struct TimingReport<'a> {
        frames: usize,
        ms: &'a crate::pipeline::Timing,
        update_frames: &'a [usize],
    }
    write_json(
        &out.join(TIMING_FILE),
        &TimingReport { frames: output.masks.len(), ms: &output.timing, update_frames: &output.update_frames },
    )?;
    Ok(output)
}

fn mask_files(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().to_str().map(String::from))
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn evaluate_dir(name: &str, pred: &Path, gt: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let names = mask_files(gt)?;
    if names.is_empty() {
        return Err(arg_err(format!("no ground-truth masks in {}", gt.display())));
    }
    let mut preds = Vec::with_capacity(names.len());
    let mut gts = Vec::with_capacity(names.len());
    for n in &names {
        let p = pred.join(n);
        if !p.exists() {
            return Err(arg_err(format!("{name}: prediction {} is missing", p.display())));
        }
        preds.push(LabelMask::load(&p)?);
        gts.push(LabelMask::load(&gt.join(n))?);
    }
    evaluate_sequence(name, &preds, &gts, opts)
}

/// Evaluates one sequence directory, or every sequence sub-directory of `gt`.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    for p in [&args.pred, &args.gt] {
        if !p.is_dir() {
            return Err(FrtmError::MissingInput(p.clone()));
        }
    }
    let opts =
        EvalOptions { exclude_first: args.exclude_first, exclude_last: args.exclude_last, tolerance: args.tolerance };
    let report = if !mask_files(&args.gt)?.is_empty() {
        let name = args.gt.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        evaluate_dir(&name, &args.pred, &args.gt, &opts)?
    } else {
        let mut seqs: Vec<PathBuf> =
            fs::read_dir(&args.gt)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
        seqs.sort();
        if seqs.is_empty() {
            return Err(arg_err(format!("no sequences in {}", args.gt.display())));
        }
        let mut reports = Vec::with_capacity(seqs.len());
        for s in seqs {
            let name = s.file_name().expect("directory entry").to_string_lossy().into_owned();
            let pred = args.pred.join(&name);
            if !pred.is_dir() {
                return Err(arg_err(format!("sequence `{name}` has no prediction directory")));
            }
            reports.push(evaluate_dir(&name, &pred, &s, &opts)?);
        }
        EvalReport::merge(reports)
    };
    let json = args.json.clone().unwrap_or_else(|| args.pred.join(EVAL_FILE));
    write_json(&json, &report)?;
    Ok(report)
}

/// Returns the number of files written.
pub fn cmd_features(args: &FeaturesArgs) -> Result<usize> {
    let frames = DirFrames::open(&args.frames)?;
    if frames.is_empty() {
        return Err(arg_err(format!("no frames in {}", args.frames.display())));
    }
    fs::create_dir_all(&args.out)?;
    for i in 0..frames.len() {
        let fm = extract_handcrafted_features(&frames.image(i)?, args.stride)?;
        write_feature_map(&args.out.join(feature_file_name(i)), &fm)?;
    }
    Ok(frames.len())
}

/// Sizes the global worker pool from `FRTM_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize =
        v.trim().parse().map_err(|_| arg_err(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return Err(arg_err(format!("{THREADS_ENV} must be >= 1")));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| arg_err(e.to_string()))
}

pub fn execute(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Run(args) => {
            let manifest = RunManifest::from_args(&args)?;
            let out = cmd_run(&manifest)?;
            log::info!("wrote {} masks to {}", out.masks.len(), manifest.out_dir.display());
        }
        Command::Eval(args) => {
            let report = cmd_eval(&args)?;
            print!("{}", report.to_table());
        }
        Command::Features(args) => {
            let n = cmd_features(&args)?;
            log::info!("wrote {n} feature files to {}", args.out.display());
        }
    }
    Ok(())
}
