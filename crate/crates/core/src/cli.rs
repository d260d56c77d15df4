//! Command-line front end.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    grad_check, row_sums, stack_forward, AttentionConfig, Embeddings, GradCheckSpec, GradTarget,
    LayerParams, ValueSource,
};
use crate::dataset::{
    esie_windows, segment_stream, select_top_k_segments, Manifest, ManifestEntry,
};
use crate::error::{Error, Result};
use crate::events::{load_events, save_events, EventFormat, EventStream, SensorGeometry};
use crate::metrics::{ced_curve, evaluate, load_landmarks, Normalization, DEFAULT_THRESHOLD};
use crate::representations::{build_any, RepKind, TimeWindow, DEFAULT_VOXEL_BINS};
use crate::selfcheck;
use crate::simulator::{
    frames_to_events, FrameSequence, SimulatorConfig, DEFAULT_LOG_EPS,
    DEFAULT_THRESHOLD as SIM_THRESHOLD,
};
use crate::ssmer::{
    synthetic_dataset, train_toy, EncoderConfig, RepresentationDataset, ToyConfig, TOY_RESOLUTION,
};
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// Variable capping the worker thread count; 0 or unset means automatic.
pub const THREADS_ENV: &str = "EVLIGN_THREADS";

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "evlign",
    version,
    about = "Event-camera facial alignment toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Convert luminance frames (TNS1 tensors) into an event stream.
    Simulate(SimulateArgs),
    /// Build a frame, voxel or time-surface tensor from an event window.
    Represent(RepresentArgs),
    /// Segment a stream and write the busiest windows (or the 10-window protocol) as a manifest.
    Select(SelectArgs),
    /// Run the alignment attention layer on stacked embeddings.
    Attn(AttnArgs),
    /// Train the toy multi-representation model and write its loss trace.
    Ssmer(SsmerArgs),
    /// Score landmark predictions against ground truth.
    Eval(EvalArgs),
    /// Run the built-in invariant checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GeometryArgs {
    /// Sensor width for CSV input (binary files carry their own).
    #[arg(long, default_value_t = SensorGeometry::DAVIS346.width)]
    pub width: u32,
    /// Sensor height for CSV input.
    #[arg(long, default_value_t = SensorGeometry::DAVIS346.height)]
    pub height: u32,
}

impl GeometryArgs {
    fn geometry(&self) -> Result<SensorGeometry> {
        SensorGeometry::new(self.width, self.height)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Frame tensors in order, or one directory of `.tns` files sorted by name.
    /// A rank-3 tensor holds several frames.
    #[arg(long, num_args = 1.., required = true)]
    pub frames: Vec<PathBuf>,
    #[arg(long, default_value_t = 25.0)]
    pub fps: f64,
    #[arg(long, default_value_t = SIM_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = DEFAULT_LOG_EPS)]
    pub log_eps: f64,
    /// Linearly interpolated frames per gap, plus one.
    #[arg(long, default_value_t = 1)]
    pub interpolate: usize,
    /// Output path; `.csv` writes CSV, anything else EVS1 binary.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RepresentArgs {
    #[arg(long)]
    pub events: PathBuf,
    /// frame, voxel or timesurface.
    #[arg(long, default_value = "frame")]
    pub kind: String,
    #[arg(long, default_value_t = DEFAULT_VOXEL_BINS)]
    pub bins: usize,
    /// Window start in microseconds.
    #[arg(long, default_value_t = 0)]
    pub t0: u64,
    /// Window length in microseconds.
    #[arg(long, default_value_t = 40_000)]
    pub dt: u64,
    /// Time-surface decay in microseconds [default: dt / 3].
    #[arg(long)]
    pub tau: Option<f64>,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long, default_value_t = 25.0)]
    pub fps: f64,
    #[arg(long, default_value_t = 1)]
    pub top_k: usize,
    /// Write the ten 40 ms protocol windows instead of the busiest ones.
    #[arg(long)]
    pub esie: bool,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AttnArgs {
    /// JSON layer configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Row-stacked `[T; Q; F_rgb; P_rgb; F_evt; P_evt]` tensor; random when omitted.
    #[arg(long)]
    pub inputs: Option<PathBuf>,
    /// Also run the finite-difference gradient check.
    #[arg(long)]
    pub check_grad: bool,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output tokens tensor.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Layer configuration read by `attn`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfigFile {
    pub channels: usize,
    pub heads: usize,
    #[serde(default)]
    pub value_source: ValueSource,
    /// Landmark token count `N`.
    pub tokens: usize,
    /// Patch count `M`, used for random inputs.
    #[serde(default)]
    pub patches: Option<usize>,
    #[serde(default = "one")]
    pub layers: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Args, Serialize)]
pub struct SsmerArgs {
    /// Selection manifest; synthetic windows are used when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of synthetic windows.
    #[arg(long, default_value_t = 64)]
    pub windows: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_VOXEL_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = TOY_RESOLUTION)]
    pub resolution: usize,
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    /// Let gradients flow into the projector targets.
    #[arg(long)]
    pub no_stop_gradient: bool,
    /// One encoder trunk per representation instead of a shared one.
    #[arg(long)]
    pub per_representation: bool,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// inter_pupil or inter_ocular.
    #[arg(long, default_value = "inter_pupil")]
    pub norm: String,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// JSON report path; printed to standard output when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// CED curve CSV path.
    #[arg(long)]
    pub ced: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub ced_steps: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    eprintln!(
        "evlign {} config {}",
        env!("CARGO_PKG_VERSION"),
        serde_json::to_string(&cli.command).unwrap_or_default()
    );
    match dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("{THREADS_ENV} must be a non-negative integer, got `{raw}`"))?;
    if n > 0 {
        // A second initialization (e.g. repeated calls in one process) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

pub fn dispatch(command: &Command) -> Result<i32> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Represent(a) => represent(a),
        Command::Select(a) => select(a),
        Command::Attn(a) => attn(a),
        Command::Ssmer(a) => ssmer(a),
        Command::Eval(a) => eval(a),
        Command::Selfcheck(a) => Ok(run_selfcheck(a)),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn load_stream(path: &Path, geometry: &GeometryArgs) -> Result<EventStream> {
    let loaded = load_events(path, EventFormat::from_path(path), geometry.geometry()?)?;
    if loaded.resorted {
        eprintln!(
            "warning: {} was not time-ordered; events were re-sorted",
            path.display()
        );
    }
    Ok(loaded.stream)
}

fn frame_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if let [dir] = inputs {
        if dir.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "tns"))
                .collect();
            files.sort();
            return Ok(files);
        }
    }
    Ok(inputs.to_vec())
}

fn simulate(a: &SimulateArgs) -> Result<i32> {
    let mut frames = Vec::new();
    for path in frame_paths(&a.frames)? {
        let t = Tensor::load(&path)?;
        match t.shape() {
            [_, _] => frames.push(t),
            &[n, h, w] => {
                for k in 0..n {
                    let data = t.data()[k * h * w..(k + 1) * h * w].to_vec();
                    frames.push(Tensor::new(vec![h, w], data)?);
                }
            }
            s => {
                return Err(Error::Shape(format!(
                    "{}: frames must be rank 2 or 3, got {s:?}",
                    path.display()
                )))
            }
        }
    }
    let seq = FrameSequence::from_tensors(&frames, a.fps)?;
    let cfg = SimulatorConfig {
        threshold: a.threshold,
        log_eps: a.log_eps,
        interpolation_factor: a.interpolate,
    };
    let stream = frames_to_events(&seq, &cfg)?;
    save_events(&a.out, EventFormat::from_path(&a.out), &stream)?;
    eprintln!("{} events from {} frames", stream.len(), frames.len());
    Ok(EXIT_OK)
}

fn represent(a: &RepresentArgs) -> Result<i32> {
    let kind: RepKind = a.kind.parse()?;
    let stream = load_stream(&a.events, &a.geometry)?;
    let span = TimeWindow::new(a.t0, a.dt);
    let window = stream.slice_window(a.t0, a.dt);
    let grid = build_any(&window, span, kind, a.bins, a.tau)?;
    grid.to_tensor().save(&a.out)?;
    eprintln!(
        "{} events -> {:?} {}",
        window.len(),
        grid.shape(),
        kind.name()
    );
    Ok(EXIT_OK)
}

fn select(a: &SelectArgs) -> Result<i32> {
    let stream = load_stream(&a.events, &a.geometry)?;
    let events = a.events.display().to_string();
    let manifest = if a.esie {
        let (first, last) = stream
            .first_t()
            .zip(stream.last_t())
            .ok_or_else(|| Error::Protocol("empty recording".into()))?;
        let windows = esie_windows(first, last)?
            .into_iter()
            .map(|w| ManifestEntry {
                t0: w.t0,
                dt: w.dt,
                count: stream.count_in_window(w.t0, w.dt),
            })
            .collect();
        Manifest {
            events,
            fps: a.fps,
            windows,
        }
    } else {
        let index = segment_stream(&stream, a.fps)?;
        let ids = select_top_k_segments(&index, a.top_k)?;
        Manifest::from_selection(events, a.fps, &index, &ids)
    };
    write_json(&a.out, &manifest)?;
    eprintln!("{} windows selected", manifest.windows.len());
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct HeadChecksum {
    layer_block: String,
    head: usize,
    /// Sum of all row sums (equals the row count).
    row_sum_total: f64,
    max_row_sum_error: f64,
    /// `sum_ij A_ij (j + 1)`, sensitive to where the weight goes.
    weighted: f64,
}

#[derive(Debug, Serialize)]
struct AttnReport {
    config: LayerConfigFile,
    seed: u64,
    output_sum: f64,
    output_abs_sum: f64,
    attention: Vec<HeadChecksum>,
    grad_check: Option<Vec<crate::attention::GradCheckReport>>,
}

fn attn(a: &AttnArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
    let file: LayerConfigFile = serde_json::from_str(&text)?;
    let cfg = AttentionConfig::new(file.channels, file.heads, file.value_source)?;
    if file.tokens == 0 || file.layers == 0 {
        return Err(Error::Parameter(
            "tokens and layers must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let emb = match &a.inputs {
        Some(path) => Embeddings::from_tensor(&Tensor::load(path)?, file.tokens)?,
        None => {
            let m = file.patches.ok_or_else(|| {
                Error::Parameter("config needs `patches` when --inputs is omitted".into())
            })?;
            Embeddings::random(file.tokens, m, file.channels, &mut rng)
        }
    };
    emb.validate(&cfg)?;
    let params = LayerParams::random(&cfg, &mut rng);
    let out = stack_forward(&emb, &params, &cfg, file.layers)?;
    let attention = out
        .attention_maps
        .iter()
        .flat_map(|maps| {
            maps.heads.iter().enumerate().map(move |(h, a)| {
                let sums = row_sums(a);
                HeadChecksum {
                    layer_block: maps.block.name().to_string(),
                    head: h,
                    row_sum_total: sums.sum(),
                    max_row_sum_error: sums.iter().fold(0.0f64, |m, s| m.max((s - 1.0).abs())),
                    weighted: a.indexed_iter().map(|((_, j), v)| v * (j + 1) as f64).sum(),
                }
            })
        })
        .collect();
    let grad_check = if a.check_grad {
        let spec = GradCheckSpec {
            tokens: emb.tokens_len(),
            patches: emb.patches_len(),
            channels: cfg.channels,
            heads: cfg.heads,
            value_source: cfg.value_source,
        };
        Some(
            [GradTarget::CmfaBlock, GradTarget::LayerForward]
                .into_iter()
                .map(|t| grad_check(t, &spec, a.seed))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let report = AttnReport {
        config: file,
        seed: a.seed,
        output_sum: out.tokens.sum(),
        output_abs_sum: out.tokens.iter().map(|v| v.abs()).sum(),
        attention,
        grad_check,
    };
    if let Some(path) = &a.out {
        Tensor::from_array2(&out.tokens).save(path)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(reports) = &report.grad_check {
        let worst = reports
            .iter()
            .map(|r| r.max_relative_error.max(r.max_strict_relative_error))
            .fold(0.0, f64::max);
        eprintln!("grad-check max relative error {worst:.3e}");
    }
    Ok(EXIT_OK)
}

fn ssmer(a: &SsmerArgs) -> Result<i32> {
    let data = match &a.data {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let manifest: Manifest = serde_json::from_str(&text)?;
            let events = resolve_relative(path, Path::new(&manifest.events));
            let stream = load_stream(&events, &a.geometry)?;
            RepresentationDataset::from_manifest(&manifest, &stream, a.bins, a.resolution)?
        }
        None => synthetic_dataset(a.windows, a.resolution, a.bins, a.seed)?,
    };
    let cfg = ToyConfig {
        epochs: a.epochs,
        lr: a.lr,
        momentum: a.momentum,
        batch: a.batch,
        seed: a.seed,
        stop_gradient: !a.no_stop_gradient,
        encoder: EncoderConfig {
            shared_trunk: !a.per_representation,
            ..Default::default()
        },
        embed_dim: a.embed_dim,
        ..Default::default()
    };
    let (trace, _) = train_toy(&data, &cfg)?;
    let mut w = create(&a.out)?;
    trace
        .write_csv(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&a.out, e))?;
    let (first, last) = (trace.initial(), trace.last());
    eprintln!(
        "{} windows, L_MR {:.6} -> {:.6}, spread {:.4} -> {:.4}",
        data.len(),
        first.loss,
        last.loss,
        first.spread,
        last.spread
    );
    Ok(EXIT_OK)
}

/// Manifest event paths are relative to the manifest's directory unless they
/// exist as given.
fn resolve_relative(manifest: &Path, events: &Path) -> PathBuf {
    if events.is_absolute() || events.exists() {
        return events.to_path_buf();
    }
    manifest
        .parent()
        .map(|dir| dir.join(events))
        .unwrap_or_else(|| events.to_path_buf())
}

fn eval(a: &EvalArgs) -> Result<i32> {
    let norm: Normalization = a.norm.parse()?;
    let pred = load_landmarks(&a.pred)?;
    let gt = load_landmarks(&a.gt)?;
    let report = evaluate(&pred, &gt, norm, a.threshold)?;
    match &a.report {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    if let Some(path) = &a.ced {
        let curve = ced_curve(&report.fractions(), a.threshold, a.ced_steps)?;
        let mut w = create(path)?;
        let mut body = || -> std::io::Result<()> {
            writeln!(w, "nme,fraction")?;
            for (e, f) in &curve {
                writeln!(w, "{e},{f}")?;
            }
            w.flush()
        };
        body().map_err(|e| Error::io(path, e))?;
    }
    eprintln!(
        "NME {:.4}%  FR@{} {:.2}%  AUC@{} {:.4}",
        report.nme_percent, a.threshold, report.fr10_percent, a.threshold, report.auc10
    );
    Ok(EXIT_OK)
}

fn run_selfcheck(a: &SelfcheckArgs) -> i32 {
    let outcomes = selfcheck::run(a.seed);
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(0);
    for o in &outcomes {
        println!(
            "{:<width$}  {}  {}",
            o.name,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!(
        "{} of {} checks passed",
        outcomes.len() - failed,
        outcomes.len()
    );
    if failed == 0 {
        EXIT_OK
    } else {
        EXIT_FAILURE
    }
}
