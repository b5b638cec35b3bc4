use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};

use dsrn::bench::{self, BenchReport};
use dsrn::checkpoint::{self, Checkpoint, TaskInfo};
use dsrn::data::{self, Direction, FilenamePattern, IlluminationSetting, SceneIndex, SplitFile, Task};
use dsrn::imaging::ImageTensor;
use dsrn::losses::RandomConvExtractor;
use dsrn::metrics::{self, MetricReport};
use dsrn::network::{dsrn_forward, ArchConfig, ModelParams};
use dsrn::synth;
use dsrn::training::{self, LogRecord, TrainConfig};

/// Exit status categories.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<dsrn::Error> for Failure {
    fn from(e: dsrn::Error) -> Self {
        use dsrn::Error as E;
        match e {
            E::Format(_)
            | E::Dimension(_)
            | E::Shape(_)
            | E::Data(_)
            | E::CorruptArchive(_)
            | E::VersionMismatch { .. }
            | E::Io(_)
            | E::Image(_)
            | E::Json(_) => Failure::Data(e.to_string()),
            E::Config(_) | E::Numeric(_) | E::Unsupported(_) => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "dsrn", version, about = "Image relighting with a deep stacked pyramid network")]
struct Cli {
    /// Compute device; only `cpu` is available in this build.
    #[arg(long, global = true, env = "DSRN_DEVICE", default_value = "cpu")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic multi-illumination corpus.
    SynthData(SynthArgs),
    /// Two-stage training on an indexed corpus.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus (optionally a split partition).
    Eval(EvalArgs),
    /// Relight one image (or an opposite-direction pair) with a checkpoint.
    Relight(RelightArgs),
    /// Time inference at a given resolution.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    scenes: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated directions (default: all eight).
    #[arg(long, value_delimiter = ',')]
    directions: Vec<String>,
    /// Comma-separated colour temperatures in Kelvin (default: all five).
    #[arg(long, value_delimiter = ',')]
    temps: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum TaskKind {
    Single,
    Multi,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Corpus root directory.
    #[arg(long)]
    data: PathBuf,
    /// Explicit manifest (bypasses filename matching).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = data::DEFAULT_PATTERN)]
    pattern: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = TaskKind::Single)]
    task: TaskKind,
    #[arg(long, default_value = "N")]
    source_dir: String,
    #[arg(long, default_value_t = data::MULTI_DEFAULT_TEMPERATURE_K)]
    source_temp: u32,
    #[arg(long, default_value = "E")]
    target_dir: String,
    #[arg(long, default_value_t = 4500)]
    target_temp: u32,
    /// Training configuration JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Existing split file; otherwise a new split is drawn.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    n_test: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps_stage1: Option<usize>,
    #[arg(long)]
    steps_stage2: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Partition {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Split file written by `train`; restricts scoring to one partition.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Partition::Test)]
    partition: Partition,
    /// Also report the feature-space perceptual distance.
    #[arg(long)]
    perceptual: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RelightArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Opposite-direction capture, required by multi-illumination models.
    #[arg(long)]
    input2: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("weights").required(true).args(["checkpoint", "random_weights"])))]
struct BenchArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Benchmark a freshly initialised model instead of a checkpoint.
    #[arg(long)]
    random_weights: bool,
    /// Width of the randomly initialised model.
    #[arg(long, default_value_t = 32)]
    base_channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1024)]
    resolution: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Reproducibility header written to every output directory.
#[derive(Serialize)]
struct RunHeader<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a C,
}

fn write_run_header<C: Serialize>(dir: &Path, command: &str, seed: u64, config: &C) -> CliResult<()> {
    let canonical = serde_json::to_vec(config)?;
    let header = RunHeader {
        tool: "dsrn",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        config_hash: hex_digest(&canonical),
        config,
    };
    write_json(&dir.join("run.json"), &header)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn parse_direction(s: &str) -> CliResult<Direction> {
    s.parse().map_err(|e: dsrn::Error| Failure::Usage(e.to_string()))
}

fn setting(dir: &str, temp: u32) -> CliResult<IlluminationSetting> {
    IlluminationSetting::new(parse_direction(dir)?, temp).map_err(|e| Failure::Usage(e.to_string()))
}

fn load_index(args: &DataArgs) -> CliResult<SceneIndex> {
    let index = match &args.manifest {
        Some(m) => data::index_manifest(m)?,
        None => {
            let pattern = FilenamePattern::new(&args.pattern).map_err(|e| Failure::Usage(e.to_string()))?;
            data::index_dataset(&args.data, &pattern)?
        }
    };
    info!("indexed {} scenes ({} images, {} skipped)", index.scene_count(), index.entry_count(), index.skipped().len());
    Ok(index)
}

fn run_synth(a: &SynthArgs) -> CliResult<()> {
    let directions = if a.directions.is_empty() {
        Direction::ALL.to_vec()
    } else {
        a.directions.iter().map(|d| parse_direction(d)).collect::<CliResult<_>>()?
    };
    let temps = if a.temps.is_empty() { data::TEMPERATURES_K.to_vec() } else { a.temps.clone() };
    if a.size == 0 || a.size % 16 != 0 {
        return Err(Failure::Usage(format!("--size {} must be a positive multiple of 16", a.size)));
    }
    for &t in &temps {
        IlluminationSetting::new(Direction::N, t).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let index = synth::generate_corpus(a.scenes, &directions, &temps, a.size, a.seed, &a.out)?;
    #[derive(Serialize)]
    struct SynthConfig<'a> {
        scenes: usize,
        size: usize,
        directions: &'a [Direction],
        temps: &'a [u32],
    }
    let cfg = SynthConfig { scenes: a.scenes, size: a.size, directions: &directions, temps: &temps };
    write_run_header(&a.out, "synth-data", a.seed, &cfg)?;
    println!("wrote {} images for {} scenes to {}", index.entry_count(), index.scene_count(), a.out.display());
    Ok(())
}

fn task_for(kind: TaskKind, dir: &str, temp: u32) -> CliResult<Task> {
    let src = setting(dir, temp)?;
    Ok(match kind {
        TaskKind::Single => Task::Single { source: src },
        TaskKind::Multi => Task::multi(src.direction, src.temperature_k),
    })
}

fn run_train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps_stage1 {
        cfg.steps_stage1 = s;
    }
    if let Some(s) = a.steps_stage2 {
        cfg.steps_stage2 = s;
    }
    if let Some(c) = a.base_channels {
        cfg.arch.base_channels = c;
    }
    cfg.validate()?;
    let task = task_for(a.task, &a.source_dir, a.source_temp)?;
    let target = setting(&a.target_dir, a.target_temp)?;
    let index = load_index(&a.data)?;

    std::fs::create_dir_all(&a.out)?;
    let split = match &a.split {
        Some(p) => SplitFile::load(p)?,
        None => {
            let mut n_test = a.n_test;
            if n_test >= index.scene_count() {
                n_test = (index.scene_count() / 5).max(1);
                warn!("--n-test {} exceeds the corpus; holding out {n_test} scenes", a.n_test);
            }
            data::split_custom(&index, n_test, cfg.seed)?.2
        }
    };
    split.save(&a.out.join("split.json"))?;
    let train_pairs = data::make_pairs(&index.subset(split.train.iter().map(String::as_str)), &task, target)?;
    let val_pairs = data::make_pairs(&index.subset(split.test.iter().map(String::as_str)), &task, target)?;
    if train_pairs.is_empty() {
        return Err(Failure::Data("no scene provides the settings this task needs".into()));
    }
    info!("{} training pairs, {} validation pairs", train_pairs.len(), val_pairs.len());

    #[derive(Serialize)]
    struct TrainRun<'a> {
        config: &'a TrainConfig,
        task: &'a Task,
        target: &'a IlluminationSetting,
        split: &'a SplitFile,
    }
    write_run_header(&a.out, "train", cfg.seed, &TrainRun { config: &cfg, task: &task, target: &target, split: &split })?;
    write_json(&a.out.join("config.json"), &cfg)?;

    let mut log = std::io::BufWriter::new(std::fs::File::create(a.out.join("train_log.jsonl"))?);
    let mut sink = |r: &LogRecord| -> dsrn::Result<()> {
        use std::io::Write;
        writeln!(log, "{}", serde_json::to_string(r)?)?;
        Ok(())
    };
    let outcome = training::train_two_stage(&train_pairs, &val_pairs, &cfg, &mut sink)?;
    drop(log);
    let info = Some(TaskInfo { task, target });
    let best = Checkpoint { task: info, ..outcome.best().clone() };
    let last = Checkpoint { task: info, ..outcome.last().clone() };
    checkpoint::save_checkpoint(&best, &a.out.join("checkpoint.ckpt"))?;
    checkpoint::save_checkpoint(&last, &a.out.join("last.ckpt"))?;
    println!(
        "trained {} + {} steps; best validation PSNR {}",
        cfg.steps_stage1,
        cfg.steps_stage2,
        best.best_val_psnr.map_or("n/a".to_string(), |p| format!("{p:.3} dB"))
    );
    Ok(())
}

fn run_eval(a: &EvalArgs) -> CliResult<()> {
    let ckpt = checkpoint::load_checkpoint(&a.checkpoint)?;
    let info = ckpt.task.ok_or_else(|| Failure::Data("checkpoint does not record its task".into()))?;
    let mut index = load_index(&a.data)?;
    if let Some(p) = &a.split {
        let split = SplitFile::load(p)?;
        index = match a.partition {
            Partition::Train => index.subset(split.train.iter().map(String::as_str)),
            Partition::Test => index.subset(split.test.iter().map(String::as_str)),
            Partition::All => index,
        };
    }
    let pairs = data::make_pairs(&index, &info.task, info.target)?;
    let extractor = RandomConvExtractor::<f32>::default();
    let ext = a.perceptual.then_some(&extractor as &dyn dsrn::losses::FeatureExtractor<f32>);
    let report = metrics::evaluate_dataset(&ckpt.params, &pairs, ext)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("metrics.json"), json + "\n")?;
        std::fs::write(out.join("metrics.csv"), format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row("dsrn", None)))?;
        #[derive(Serialize)]
        struct EvalRun<'a> {
            checkpoint_sha256: String,
            split: Option<&'a Path>,
            perceptual: bool,
            n_images: usize,
        }
        let run = EvalRun {
            checkpoint_sha256: hex_digest(&std::fs::read(&a.checkpoint)?),
            split: a.split.as_deref(),
            perceptual: a.perceptual,
            n_images: report.n_images,
        };
        write_run_header(out, "eval", ckpt.config.seed, &run)?;
    }
    Ok(())
}

fn run_relight(a: &RelightArgs) -> CliResult<()> {
    let ckpt = checkpoint::load_checkpoint(&a.checkpoint)?;
    let multi = matches!(ckpt.task.map(|t| t.task), Some(Task::Multi { .. }));
    let input = match (&a.input2, multi) {
        (None, true) => return Err(Failure::Usage("this model fuses two opposite-direction inputs; pass --input2".into())),
        (Some(_), false) => return Err(Failure::Usage("--input2 is only valid for multi-illumination models".into())),
        (None, false) => ImageTensor::load_png(&a.input)?,
        (Some(second), true) => {
            let (w1, w2) = data::FUSE_WEIGHTS;
            data::fuse_opposite(&ImageTensor::load_png(&a.input)?, &ImageTensor::load_png(second)?, w1, w2)?
        }
    };
    let out = dsrn_forward(&input, &ckpt.params)?;
    out.save_png(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn run_bench(a: &BenchArgs) -> CliResult<()> {
    let model = match &a.checkpoint {
        Some(p) => checkpoint::load_checkpoint(p)?.params,
        None => ModelParams::init(ArchConfig::default().with_base_channels(a.base_channels), a.seed)?,
    };
    if a.resolution == 0 || a.resolution % 16 != 0 {
        return Err(Failure::Usage(format!("--resolution {} must be a positive multiple of 16", a.resolution)));
    }
    if a.iters < bench::MIN_TIMED_ITERS {
        return Err(Failure::Usage(format!("--iters must be at least {}", bench::MIN_TIMED_ITERS)));
    }
    let report: BenchReport = bench::time_inference(&model, a.resolution, a.warmup, a.iters)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("bench.json"), json + "\n")?;
        std::fs::write(out.join("bench.csv"), format!("{}\n{}\n", BenchReport::CSV_HEADER, report.csv_row("dsrn")))?;
        write_run_header(out, "bench", a.seed, model.arch())?;
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    if !cli.device.eq_ignore_ascii_case("cpu") {
        return Err(Failure::Runtime(format!("device {:?} is not available; this build runs on the cpu only", cli.device)));
    }
    match &cli.command {
        Command::SynthData(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Relight(a) => run_relight(a),
        Command::Bench(a) => run_bench(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
