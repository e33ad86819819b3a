//! Command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use myotracker_core::gradcheck::{model_loss_check, op_suite, tiny_config};
use myotracker_core::strain::{compare_report, fws_from_tracks, trajectory_metrics, Agreement, StrainCurve, TrajectoryMetrics};
use myotracker_core::synth::{generate_dataset, SynthParams};
use myotracker_core::training::{train, AugmentConfig, LogRecord, TrainConfig};
use myotracker_core::weights::count_parameters;
use myotracker_core::{Clip, ModelConfig, Network, Tensor, TrajectorySet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{keypoint_path, read_dataset, write_dataset, write_json, Sample};
use crate::formats::{
    load_sequence, load_weights, read_keypoints, save_weights, write_keypoints, FormatError, Keypoints, PixelType,
};
use crate::parallel::forward_parallel;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, malformed inputs or violated constraints (exit code 2).
    #[error("{0}")]
    Usage(String),
    /// Everything else (exit code 1).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<myotracker_core::Error> for CliError {
    fn from(e: myotracker_core::Error) -> Self {
        use myotracker_core::Error as E;
        match e {
            E::Shape { .. } | E::Invalid(_) | E::Fingerprint { .. } | E::UnknownParameter(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io { .. } => CliError::Runtime(e.to_string()),
            FormatError::Malformed(_) => CliError::Usage(e.to_string()),
            FormatError::Core(c) => c.into(),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {}", path.display(), e))
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "myotracker", version, about = "Myocardial point tracking: synthetic data, training, inference and strain")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Write a synthetic dataset.
    Generate(GenerateArgs),
    /// Train a tracker and save the best validation checkpoint.
    Train(TrainArgs),
    /// Track the frame-0 points of a keypoint file through a video.
    Infer(InferArgs),
    /// Trajectory errors (px and mm) against a dataset's ground truth.
    Eval(EvalArgs),
    /// Free-wall strain curves and agreement statistics.
    Strain(StrainArgs),
    /// Compare every gradient with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Inference latency and memory.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 256x256 input and the full-size network.
    Full,
    /// 64x64 input and a reduced network for CPU runs.
    Desk,
}

/// Optional JSON file with `model`, `train` and `synth` sections; flags
/// given on the command line override it.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub synth: Option<SynthParams>,
}

fn read_config_file(path: Option<&Path>) -> CliResult<ConfigFile> {
    let Some(path) = path else { return Ok(ConfigFile::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e)))
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 80)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PixelType::F32)]
    pub dtype: PixelType,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub frames_min: Option<usize>,
    #[arg(long)]
    pub frames_max: Option<usize>,
    #[arg(long)]
    pub points_min: Option<usize>,
    #[arg(long)]
    pub points_max: Option<usize>,
    /// Largest radial contraction, as a fraction of the radius.
    #[arg(long)]
    pub contraction_max: Option<f64>,
    /// Largest angular compression toward the apex.
    #[arg(long)]
    pub shear_max: Option<f64>,
    /// Largest rigid shift, as a fraction of the frame side.
    #[arg(long)]
    pub translation_max: Option<f64>,
    /// Largest keypoint displacement between consecutive frames, in pixels.
    #[arg(long)]
    pub max_step: Option<f64>,
    #[arg(long)]
    pub dropout_fraction: Option<f64>,
    #[arg(long)]
    pub burst_fraction: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset; defaults to the last `--val-count` samples of `--data`.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub val_count: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub clip_frames: Option<usize>,
    #[arg(long)]
    pub clip_points: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub ablation: AblationArgs,
}

/// Architecture and schedule variants.
#[derive(Args, Debug, Default, Serialize)]
pub struct AblationArgs {
    /// Sliding-window length S (0 = whole sequence).
    #[arg(long)]
    pub window: Option<usize>,
    /// Transformer passes with correlation resampling in between.
    #[arg(long)]
    pub refine: Option<usize>,
    /// Add temporal and spatial positional encodings to the tokens.
    #[arg(long)]
    pub positional_encoding: bool,
    /// Correlation neighbourhood side.
    #[arg(long)]
    pub kernel: Option<usize>,
}

impl AblationArgs {
    fn apply(&self, mut c: ModelConfig) -> ModelConfig {
        if let Some(w) = self.window {
            c.window_length = w;
        }
        if let Some(r) = self.refine {
            c.refinement_iters = r;
        }
        if self.positional_encoding {
            c.positional_encoding = true;
        }
        if let Some(k) = self.kernel {
            c.kernel = k;
        }
        c
    }
}

/// Inference schedule overrides; they do not change the weight layout.
#[derive(Args, Debug, Default, Serialize)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub refine: Option<usize>,
}

impl ScheduleArgs {
    fn network(&self, weights: &Path) -> CliResult<Network> {
        let (mut config, store) = load_weights(weights)?;
        if let Some(w) = self.window {
            config.window_length = w;
        }
        if let Some(r) = self.refine {
            config.refinement_iters = r;
        }
        Ok(Network::from_weights(config, store)?)
    }
}

#[derive(Args, Debug, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub video: PathBuf,
    /// Keypoint CSV; its frame-0 rows are the queries.
    #[arg(long)]
    pub points: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub weights: Option<PathBuf>,
    /// Directory of predicted `NAME.csv` tables instead of running a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct StrainArgs {
    /// A trajectory CSV, or a directory of predicted `NAME.csv` tables
    /// when `--data` is given.
    #[arg(long, conflicts_with = "weights")]
    pub trajectories: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per operation.
    #[arg(long, default_value_t = 5)]
    pub instances: usize,
    /// Checked coordinates per weight tensor in the end-to-end check.
    #[arg(long, default_value_t = 2)]
    pub coords: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    #[arg(long, default_value_t = 100)]
    pub repeat: usize,
    #[arg(long, default_value_t = 100)]
    pub warmup: usize,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
    /// Benchmark these weights instead of a fresh initialization.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

/// Path next to `out` with its extension replaced by `suffix`.
pub fn companion(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

#[derive(Serialize)]
struct RunManifest<'a, R: Serialize> {
    command: &'a Command,
    version: &'static str,
    results: R,
}

fn write_manifest(path: &Path, command: &Command, results: impl Serialize) -> CliResult<()> {
    let m = RunManifest { command, version: env!("CARGO_PKG_VERSION"), results };
    Ok(write_json(path, &m)?)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(&cli.command, a),
        Command::Train(a) => cmd_train(&cli.command, a),
        Command::Infer(a) => cmd_infer(&cli.command, a),
        Command::Eval(a) => cmd_eval(&cli.command, a),
        Command::Strain(a) => cmd_strain(&cli.command, a),
        Command::Gradcheck(a) => cmd_gradcheck(&cli.command, a),
        Command::Bench(a) => cmd_bench(&cli.command, a),
    }
}

fn preset_model(p: Preset) -> ModelConfig {
    match p {
        Preset::Full => ModelConfig::default(),
        Preset::Desk => ModelConfig::desk(),
    }
}

fn preset_synth(p: Preset) -> SynthParams {
    match p {
        Preset::Full => SynthParams::default(),
        Preset::Desk => SynthParams::desk(),
    }
}

fn preset_train(p: Preset) -> TrainConfig {
    match p {
        Preset::Full => TrainConfig::default(),
        Preset::Desk => TrainConfig::desk(),
    }
}

fn cmd_generate(command: &Command, a: &GenerateArgs) -> CliResult<()> {
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let mut r = read_config_file(a.config.as_deref())?.synth.unwrap_or_else(|| preset_synth(a.preset));
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(a.size, r.size);
    set!(a.frames_min, r.frames.0);
    set!(a.frames_max, r.frames.1);
    set!(a.points_min, r.points_per_wall.0);
    set!(a.points_max, r.points_per_wall.1);
    set!(a.contraction_max, r.contraction.1);
    set!(a.shear_max, r.shear.1);
    set!(a.translation_max, r.translation.1);
    set!(a.max_step, r.max_step_px);
    set!(a.dropout_fraction, r.dropout_fraction);
    set!(a.burst_fraction, r.burst_fraction);
    let ordered = |(lo, hi): (f64, f64)| lo <= hi;
    if r.frames.0 < 2
        || r.frames.0 > r.frames.1
        || r.points_per_wall.0 < 3
        || r.points_per_wall.0 > r.points_per_wall.1
        || !ordered(r.contraction)
        || !ordered(r.shear)
        || !ordered(r.translation)
        || !(0.0..=1.0).contains(&r.dropout_fraction)
        || !(0.0..=1.0).contains(&r.burst_fraction)
    {
        return Err(CliError::Usage(
            "invalid ranges: need 2 <= frames-min <= frames-max, 3 <= points-min <= points-max, min <= max for motion \
             ranges and fractions in [0, 1]"
                .into(),
        ));
    }
    let samples = generate_dataset(a.count, &r, a.seed)?;
    let manifest = write_dataset(&a.out, &samples, &r, a.seed, a.dtype)?;
    let frames: Vec<usize> = manifest.samples.iter().map(|s| s.params.frames).collect();
    let points: Vec<usize> = manifest.samples.iter().map(|s| s.params.points_per_wall).collect();
    let range = |v: &[usize]| (v.iter().min().copied().unwrap_or(0), v.iter().max().copied().unwrap_or(0));
    println!(
        "wrote {} samples to {} (frames {:?}, points per wall {:?})",
        a.count,
        a.out.display(),
        range(&frames),
        range(&points)
    );
    #[derive(Serialize)]
    struct Summary {
        samples: usize,
        frames: (usize, usize),
        points_per_wall: (usize, usize),
    }
    write_manifest(
        &a.out.join("run.json"),
        command,
        Summary { samples: a.count, frames: range(&frames), points_per_wall: range(&points) },
    )
}

fn clips(samples: &[Sample]) -> Vec<Clip> {
    samples.iter().map(|s| s.clip.clone()).collect()
}

fn cmd_train(command: &Command, a: &TrainArgs) -> CliResult<()> {
    let file = read_config_file(a.config.as_deref())?;
    let mut model = a.ablation.apply(file.model.unwrap_or_else(|| preset_model(a.preset)));
    model.seed = a.seed;
    model.validate()?;
    let mut tc = file.train.unwrap_or_else(|| preset_train(a.preset));
    tc.seed = a.seed;
    if let Some(v) = a.steps {
        tc.steps = v;
    }
    if let Some(v) = a.batch {
        tc.batch = v;
    }
    if let Some(v) = a.lr0 {
        tc.schedule.lr0 = v;
    }
    if let Some(v) = a.decay {
        tc.schedule.decay = v;
    }
    if let Some(v) = a.clip_frames {
        tc.clip_frames = v;
    }
    if let Some(v) = a.clip_points {
        tc.clip_points = v;
    }
    if a.no_augment {
        tc.augment = AugmentConfig::none();
    }
    let data = read_dataset(&a.data)?;
    let (train_set, val_set) = match &a.val {
        Some(dir) => (clips(&data), clips(&read_dataset(dir)?)),
        None => {
            let n_val = a.val_count.unwrap_or((data.len() / 5).max(1));
            if n_val == 0 || n_val >= data.len() {
                return Err(CliError::Usage(format!(
                    "cannot hold out {n_val} of {} samples for validation; pass --val or a smaller --val-count",
                    data.len()
                )));
            }
            let all = clips(&data);
            let (t, v) = all.split_at(data.len() - n_val);
            (t.to_vec(), v.to_vec())
        }
    };
    for c in train_set.iter().chain(&val_set) {
        if c.height() != model.input_size || c.width() != model.input_size {
            return Err(CliError::Usage(format!(
                "the model expects {0}x{0} frames, the data has {1}x{2}",
                model.input_size,
                c.height(),
                c.width()
            )));
        }
    }
    let log_path = companion(&a.out, "log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| io_error(&log_path, e))?);
    let mut log_err = None;
    let started = Instant::now();
    let outcome = train(&model, &tc, &train_set, &val_set, |r: &LogRecord| {
        if let Some(m) = r.val_metric {
            eprintln!("step {:>6}  loss {:.4}  val {:.4} px  ({:.0?})", r.step, r.loss, m, started.elapsed());
            // the final record of an epoch is reported again with its metric
            if let Err(e) = log.flush() {
                log_err.get_or_insert(e);
            }
            return;
        }
        let line = serde_json::to_string(r).expect("log records serialize");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    drop(log);
    if let Some(e) = log_err {
        return Err(io_error(&log_path, e));
    }
    // rewrite the log with the validation metrics attached
    let mut text = String::new();
    for r in &outcome.log {
        text.push_str(&serde_json::to_string(r).expect("log records serialize"));
        text.push('\n');
    }
    std::fs::write(&log_path, text).map_err(|e| io_error(&log_path, e))?;
    save_weights(&a.out, &model, &outcome.weights)?;
    if let Some(step) = outcome.diverged_at {
        eprintln!("loss stopped being finite at step {step}; kept the best checkpoint so far");
    }
    println!(
        "validation error {:.4} px before training, best {:?} at epoch {:?}; {} steps",
        outcome.initial_metric,
        outcome.best_metric(),
        outcome.best_epoch,
        outcome.steps_run
    );
    #[derive(Serialize)]
    struct Summary<'a> {
        model: &'a ModelConfig,
        train: &'a TrainConfig,
        train_samples: usize,
        val_samples: usize,
        parameters: usize,
        initial_val_px: f64,
        epoch_val_px: &'a [f64],
        best_epoch: Option<usize>,
        best_val_px: Option<f64>,
        steps_run: usize,
        skipped_steps: usize,
        diverged_at: Option<usize>,
    }
    write_manifest(
        &companion(&a.out, "manifest.json"),
        command,
        Summary {
            model: &model,
            train: &tc,
            train_samples: train_set.len(),
            val_samples: val_set.len(),
            parameters: count_parameters(&model),
            initial_val_px: outcome.initial_metric,
            epoch_val_px: &outcome.epoch_metrics,
            best_epoch: outcome.best_epoch,
            best_val_px: outcome.best_metric(),
            steps_run: outcome.steps_run,
            skipped_steps: outcome.skipped_steps,
            diverged_at: outcome.diverged_at,
        },
    )
}

fn cmd_infer(command: &Command, a: &InferArgs) -> CliResult<()> {
    let net = a.schedule.network(&a.weights)?;
    let video = load_sequence(&a.video)?;
    let points = read_keypoints(&a.points)?;
    let pred = net.forward(&video, &points.tracks.queries())?;
    let kp = Keypoints::new(pred, points.meta.scale_mm_per_px, points.meta.seed)?;
    write_keypoints(&a.out, &kp)?;
    println!("tracked {} points through {} frames into {}", kp.tracks.points(), kp.tracks.frames(), a.out.display());
    #[derive(Serialize)]
    struct Summary {
        frames: usize,
        points: usize,
    }
    write_manifest(
        &companion(&a.out, "manifest.json"),
        command,
        Summary { frames: kp.tracks.frames(), points: kp.tracks.points() },
    )
}

/// Predictions for every sample: from a model or from stored tables.
fn predictions(samples: &[Sample], weights: Option<&Path>, tables: Option<&Path>, schedule: &ScheduleArgs) -> CliResult<Vec<TrajectorySet>> {
    match (weights, tables) {
        (Some(w), _) => {
            let net = schedule.network(w)?;
            samples.iter().map(|s| Ok(net.forward(&s.clip.video, &s.clip.tracks.queries())?)).collect()
        }
        (None, Some(dir)) => samples.iter().map(|s| Ok(read_keypoints(&keypoint_path(dir, &s.name))?.tracks)).collect(),
        (None, None) => Err(CliError::Usage("pass --weights or a predictions directory".into())),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub name: String,
    pub scale_mm_per_px: f64,
    #[serde(flatten)]
    pub metrics: TrajectoryMetrics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    pub mean: TrajectoryMetrics,
    pub sd: TrajectoryMetrics,
}

fn summarize(rows: &[TrajectoryMetrics]) -> (TrajectoryMetrics, TrajectoryMetrics) {
    let n = rows.len() as f64;
    let field = |f: fn(&TrajectoryMetrics) -> f64| {
        let m = rows.iter().map(f).sum::<f64>() / n;
        let var = if rows.len() > 1 { rows.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        (m, var.sqrt())
    };
    let fields: [fn(&TrajectoryMetrics) -> f64; 6] =
        [|r| r.avg_px, |r| r.end_px, |r| r.drift_px, |r| r.avg_mm, |r| r.end_mm, |r| r.drift_mm];
    let stats: Vec<(f64, f64)> = fields.iter().map(|&f| field(f)).collect();
    let build = |k: fn(&(f64, f64)) -> f64| TrajectoryMetrics {
        avg_px: k(&stats[0]),
        end_px: k(&stats[1]),
        drift_px: k(&stats[2]),
        avg_mm: k(&stats[3]),
        end_mm: k(&stats[4]),
        drift_mm: k(&stats[5]),
    };
    (build(|s| s.0), build(|s| s.1))
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {}", path.display(), e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(format!("{}: {}", path.display(), e)))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

fn cmd_eval(command: &Command, a: &EvalArgs) -> CliResult<()> {
    let samples = read_dataset(&a.data)?;
    let preds = predictions(&samples, a.weights.as_deref(), a.predictions.as_deref(), &a.schedule)?;
    let mut rows = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(&preds) {
        let scale = s.clip.scale_mm_per_px as f64;
        let metrics = trajectory_metrics(&s.clip.tracks, p, scale)
            .map_err(|e| CliError::Usage(format!("{}: {}", s.name, e)))?;
        rows.push(SampleMetrics { name: s.name.clone(), scale_mm_per_px: scale, metrics });
    }
    let (mean, sd) = summarize(&rows.iter().map(|r| r.metrics).collect::<Vec<_>>());
    let report = EvalReport { samples: rows, mean, sd };
    write_json(&a.out, &report)?;
    #[derive(Serialize)]
    struct Row<'a> {
        name: &'a str,
        scale_mm_per_px: f64,
        avg_px: f64,
        end_px: f64,
        drift_px: f64,
        avg_mm: f64,
        end_mm: f64,
        drift_mm: f64,
    }
    write_csv(
        &companion(&a.out, "csv"),
        report.samples.iter().map(|r| {
            let m = &r.metrics;
            Row {
                name: &r.name,
                scale_mm_per_px: r.scale_mm_per_px,
                avg_px: m.avg_px,
                end_px: m.end_px,
                drift_px: m.drift_px,
                avg_mm: m.avg_mm,
                end_mm: m.end_mm,
                drift_mm: m.drift_mm,
            }
        }),
    )?;
    println!(
        "average {:.3} px ({:.3} mm), last frame {:.3} px ({:.3} mm), drift {:.3} px ({:.3} mm) over {} samples",
        mean.avg_px,
        mean.avg_mm,
        mean.end_px,
        mean.end_mm,
        mean.drift_px,
        mean.drift_mm,
        report.samples.len()
    );
    write_manifest(&companion(&a.out, "manifest.json"), command, report.mean)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StrainRow {
    pub name: String,
    pub reference_peak: f64,
    pub predicted_peak: f64,
    pub difference: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StrainReport {
    pub samples: Vec<StrainRow>,
    pub agreement: Option<Agreement>,
}

fn cmd_strain(command: &Command, a: &StrainArgs) -> CliResult<()> {
    let Some(data) = &a.data else {
        let Some(path) = &a.trajectories else {
            return Err(CliError::Usage("pass --trajectories FILE, or --data with --weights or --trajectories DIR".into()));
        };
        let kp = read_keypoints(path)?;
        let curve = fws_from_tracks(&kp.tracks)?;
        write_json(&a.out, &curve)?;
        #[derive(Serialize)]
        struct Row {
            frame: usize,
            fws_percent: f64,
        }
        write_csv(&companion(&a.out, "csv"), curve.values.iter().enumerate().map(|(frame, &v)| Row { frame, fws_percent: v }))?;
        println!("peak free-wall strain {:.2}% at frame {} (apex index {})", curve.peak(), curve.peak_frame, curve.apex);
        return write_manifest(&companion(&a.out, "manifest.json"), command, &curve);
    };
    let samples = read_dataset(data)?;
    let preds = predictions(&samples, a.weights.as_deref(), a.trajectories.as_deref(), &a.schedule)?;
    let mut rows = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(&preds) {
        let curve = |t: &TrajectorySet| -> CliResult<StrainCurve> {
            fws_from_tracks(t).map_err(|e| CliError::Usage(format!("{}: {}", s.name, e)))
        };
        let (r, q) = (curve(&s.clip.tracks)?.peak(), curve(p)?.peak());
        rows.push(StrainRow { name: s.name.clone(), reference_peak: r, predicted_peak: q, difference: q - r });
    }
    let agreement = if rows.len() >= 2 {
        let r: Vec<f64> = rows.iter().map(|x| x.reference_peak).collect();
        let q: Vec<f64> = rows.iter().map(|x| x.predicted_peak).collect();
        Some(compare_report(&r, &q)?)
    } else {
        None
    };
    let report = StrainReport { samples: rows, agreement };
    write_json(&a.out, &report)?;
    write_csv(&companion(&a.out, "csv"), &report.samples)?;
    match &report.agreement {
        Some(g) => println!(
            "bias {:.2}%, limits of agreement [{:.2}%, {:.2}%], correlation {} over {} samples",
            g.bias,
            g.loa_low,
            g.loa_high,
            g.pearson.map_or("undefined".into(), |r| format!("{r:.3}")),
            g.pairs
        ),
        None => println!("one sample: no agreement statistics"),
    }
    write_manifest(&companion(&a.out, "manifest.json"), command, report.agreement)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub name: String,
    pub instances: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Runs the operation suite and the end-to-end loss check.
pub fn gradcheck_rows(seed: u64, instances: usize, coords: usize) -> CliResult<Vec<GradcheckRow>> {
    let mut rows: Vec<GradcheckRow> = op_suite(seed, instances)?
        .into_iter()
        .map(|e| GradcheckRow {
            name: e.name.to_string(),
            instances: e.instances,
            checked: e.outcome.checked,
            skipped: e.outcome.skipped,
            max_rel_error: e.outcome.max_rel_error,
            passed: e.passed(),
        })
        .collect();
    let variants = [
        ("model_loss", tiny_config()),
        ("model_loss_refined_encoded", ModelConfig { refinement_iters: 2, positional_encoding: true, ..tiny_config() }),
        ("model_loss_windowed", ModelConfig { window_length: 2, ..tiny_config() }),
    ];
    for (name, config) in variants {
        let mut total = myotracker_core::gradcheck::CheckOutcome::default();
        for i in 0..instances {
            total.merge(&model_loss_check(&config, seed.wrapping_mul(1000).wrapping_add(i as u64), coords)?);
        }
        rows.push(GradcheckRow {
            name: name.to_string(),
            instances,
            checked: total.checked,
            skipped: total.skipped,
            max_rel_error: total.max_rel_error,
            passed: total.passed(1e-4),
        });
    }
    Ok(rows)
}

fn cmd_gradcheck(command: &Command, a: &GradcheckArgs) -> CliResult<()> {
    if a.instances == 0 || a.coords == 0 {
        return Err(CliError::Usage("--instances and --coords must be positive".into()));
    }
    let rows = gradcheck_rows(a.seed, a.instances, a.coords)?;
    for r in &rows {
        println!(
            "{:<28} {}  max rel err {:.2e}  ({} checked, {} skipped, {} instances)",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.checked,
            r.skipped,
            r.instances
        );
    }
    if let Some(out) = &a.out {
        write_json(out, &rows)?;
        write_manifest(&companion(out, "manifest.json"), command, rows.iter().all(|r| r.passed))?;
    }
    match rows.iter().filter(|r| !r.passed).count() {
        0 => Ok(()),
        n => Err(CliError::Runtime(format!("{n} gradient check(s) failed"))),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Latency {
    pub threads: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub parameters: usize,
    pub frames: usize,
    pub points: usize,
    pub input_size: usize,
    pub warmup: usize,
    pub repeat: usize,
    pub transformer_passes: usize,
    pub peak_working_set_bytes: usize,
    pub single_thread: Latency,
    pub parallel: Latency,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

fn time_runs(repeat: usize, warmup: usize, threads: usize, mut f: impl FnMut() -> CliResult<()>) -> CliResult<Latency> {
    for _ in 0..warmup {
        f()?;
    }
    let mut ms = Vec::with_capacity(repeat);
    for _ in 0..repeat {
        let t0 = Instant::now();
        f()?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(f64::total_cmp);
    Ok(Latency {
        threads,
        mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
        p50_ms: percentile(&ms, 0.5),
        p90_ms: percentile(&ms, 0.9),
        p99_ms: percentile(&ms, 0.99),
        min_ms: ms[0],
        max_ms: ms[ms.len() - 1],
    })
}

pub fn bench(net: &Network, frames: usize, points: usize, repeat: usize, warmup: usize, seed: u64) -> CliResult<BenchReport> {
    if repeat == 0 {
        return Err(CliError::Usage("--repeat must be at least 1".into()));
    }
    let config = net.config();
    let size = config.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let video = Tensor::from_fn(vec![frames, size, size], |_| rng.random_range(0.0..1.0f32));
    let hi = (size - 1) as f32;
    let queries: Vec<[f32; 2]> = (0..points).map(|_| [rng.random_range(0.0..hi), rng.random_range(0.0..hi)]).collect();
    let (_, stats) = net.forward_with_stats(&video, &queries)?;
    let single = time_runs(repeat, warmup, 1, || net.forward(&video, &queries).map(|_| ()).map_err(Into::into))?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let parallel =
        time_runs(repeat, warmup, threads, || forward_parallel(net, &video, &queries, threads).map(|_| ()).map_err(Into::into))?;
    Ok(BenchReport {
        parameters: count_parameters(config),
        frames,
        points,
        input_size: size,
        warmup,
        repeat,
        transformer_passes: stats.transformer_passes,
        peak_working_set_bytes: stats.peak_bytes,
        single_thread: single,
        parallel,
    })
}

fn cmd_bench(command: &Command, a: &BenchArgs) -> CliResult<()> {
    let net = match &a.weights {
        Some(w) => a.schedule.network(w)?,
        None => {
            let mut config = preset_model(a.preset);
            if let Some(w) = a.schedule.window {
                config.window_length = w;
            }
            if let Some(r) = a.schedule.refine {
                config.refinement_iters = r;
            }
            config.seed = a.seed;
            Network::new(config)?
        }
    };
    let report = bench(&net, a.frames, a.points, a.repeat, a.warmup, a.seed)?;
    println!("parameters: {}", report.parameters);
    println!(
        "{} points x {} frames at {}x{}: {} warm-up + {} timed runs, {} transformer pass(es)",
        report.points, report.frames, report.input_size, report.input_size, report.warmup, report.repeat, report.transformer_passes
    );
    for l in [&report.single_thread, &report.parallel] {
        println!(
            "  {} thread(s): mean {:.1} ms, p50 {:.1}, p90 {:.1}, p99 {:.1}, min {:.1}, max {:.1}",
            l.threads, l.mean_ms, l.p50_ms, l.p90_ms, l.p99_ms, l.min_ms, l.max_ms
        );
    }
    println!("peak working set estimate: {:.1} MiB", report.peak_working_set_bytes as f64 / (1 << 20) as f64);
    if let Some(out) = &a.out {
        write_json(out, &report)?;
        write_manifest(&companion(out, "manifest.json"), command, &report)?;
    }
    Ok(())
}
