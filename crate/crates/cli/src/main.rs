use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crackseg::checkpoint::load_checkpoint;
use crackseg::data::{
    dataset_checksum, decode_cell_image, preprocess_pixels, DatasetStats, LabelPolicy, Part,
};
use crackseg::experiments::{
    emit_panel, finalize_report, prepare_output, run_job, DatasetConfig, Job, PanelOptions,
    PreparedData, SplitMode, SweepConfig,
};
use crackseg::lp_pooling::Exponent;
use crackseg::segment::{
    export_mask, extract_heatmap, log_mean_activation, resolve_polarity, segment, MaskSidecar,
    PolarityMode,
};
use crackseg::synthetic;
use crackseg::train::evaluate;

#[derive(Parser)]
#[command(name = "crackseg", version, about = "Weakly supervised crack segmentation with Lp pooling")]
struct Cli {
    /// Increase log verbosity (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic dataset, or validate a dataset and write its split.
    PrepareData(PrepareArgs),
    /// Train a single model (first exponent, repeat 0) from a config.
    Train(RunArgs),
    /// Evaluate a checkpoint on one part of the configured split.
    Evaluate(EvaluateArgs),
    /// Train one model per exponent (and repeat) and write the report.
    Sweep(SweepArgs),
    #[command(hide = true)]
    SweepWorker(WorkerArgs),
    /// Write gated crack masks (PNG + JSON sidecar) for images.
    Segment(SegmentArgs),
    /// Write heatmap panels for several exponents.
    Panel(PanelArgs),
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    out: PathBuf,
    /// Generate the line-vs-noise dataset into --out.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 40)]
    count: usize,
    /// Dataset root holding the index file and images.
    #[arg(long, conflicts_with = "synthetic")]
    root: Option<PathBuf>,
    #[arg(long, default_value = "labels.csv")]
    index: PathBuf,
    /// Crack labels file (`path,crack_label` with header).
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value = "strict")]
    policy: LabelPolicy,
    #[arg(long)]
    split_by_module: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Flags that override the config file.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// Comma-separated exponents, e.g. `1,2,3,4,5,9,inf`.
    #[arg(long, value_delimiter = ',')]
    p: Option<Vec<Exponent>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    width_divisor: Option<usize>,
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    policy: Option<LabelPolicy>,
    #[arg(long)]
    split_by_module: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut SweepConfig) {
        if let Some(p) = &self.p {
            cfg.p_values = p.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = self.learning_rate {
            cfg.train.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(d) = self.width_divisor {
            cfg.model.width_divisor = d;
        }
        if let Some(w) = &self.pretrained {
            cfg.model.pretrained_weights_path = Some(w.clone());
        }
        if let Some(p) = self.policy {
            cfg.dataset.policy = p;
        }
        if self.split_by_module {
            cfg.dataset.split = SplitMode::Module;
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    repeats: Option<usize>,
    /// Run up to N jobs at once as separate processes.
    #[arg(long)]
    parallel: Option<usize>,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    p: Exponent,
    #[arg(long)]
    repeat: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "test")]
    part: String,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    image: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Required for p <= 4.
    #[arg(long)]
    polarity: Option<PolarityMode>,
    /// Keep the native map resolution instead of upsampling to the image.
    #[arg(long)]
    native: bool,
}

#[derive(Args)]
struct PanelArgs {
    /// Checkpoint files; the exponent is read from each.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Sweep output directory; uses repeat 0 of each exponent.
    #[arg(long)]
    sweep_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    p: Option<Vec<Exponent>>,
    #[arg(long, required = true, num_args = 1..)]
    image: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Add the input / heatmap / segmentation layout.
    #[arg(long)]
    overlay: bool,
    /// Polarity per exponent, e.g. `1=inverted,3=direct`.
    #[arg(long, value_delimiter = ',')]
    polarity: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::PrepareData(a) => prepare(a).map(|_| 0),
        Cmd::Train(a) => train_one(a).map(|_| 0),
        Cmd::Evaluate(a) => evaluate_cmd(a).map(|_| 0),
        Cmd::Sweep(a) => sweep(a),
        Cmd::SweepWorker(a) => worker(a).map(|_| 0),
        Cmd::Segment(a) => segment_cmd(a).map(|_| 0),
        Cmd::Panel(a) => panel(a).map(|_| 0),
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<SweepConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg: SweepConfig = SweepConfig::from_toml_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(a: PrepareArgs) -> Result<()> {
    if a.synthetic {
        let cells = synthetic::line_vs_noise(a.count, a.seed);
        synthetic::write_dataset(&a.out, &cells)?;
        println!("wrote {} synthetic cells to {}", cells.len(), a.out.display());
        return Ok(());
    }
    let Some(root) = a.root else {
        bail!("either --synthetic or --root is required");
    };
    let dataset = DatasetConfig {
        root: Some(root),
        index_file: a.index,
        labels_file: a.labels,
        policy: a.policy,
        synthetic: None,
        split: if a.split_by_module { SplitMode::Module } else { SplitMode::Cell },
        ..DatasetConfig::default()
    };
    let samples = dataset.load()?;
    let split = dataset.split(&samples, a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    let paths = |part: Part| -> Vec<String> {
        split.samples(&samples, part).iter().map(|s| s.image_path.display().to_string()).collect()
    };
    let summary = serde_json::json!({
        "dataset_checksum": dataset_checksum(&samples),
        "split_checksum": split.checksum(&samples),
        "seed": a.seed,
        "stats": DatasetStats::of(&samples),
        "train": paths(Part::Train),
        "val": paths(Part::Val),
        "test": paths(Part::Test),
    });
    std::fs::write(a.out.join("split.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    for part in [Part::Train, Part::Val, Part::Test] {
        let stats = DatasetStats::of(split.samples(&samples, part));
        println!(
            "{part:?}: {} images, crack fraction {:.4}",
            stats.total,
            stats.crack_fraction()
        );
    }
    Ok(())
}

fn train_one(a: RunArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides)?;
    if cfg.p_values.len() > 1 {
        warn!("train uses only the first exponent ({}); use `sweep` for all", cfg.p_values[0]);
    }
    let data = PreparedData::load(&cfg)?;
    prepare_output(&cfg, &data)?;
    let job = Job { p: cfg.p_values[0], repeat: 0 };
    let record = run_job(&cfg, &data, job)?;
    println!("{}", serde_json::to_string_pretty(&record)?);
    if !record.ok {
        bail!("training failed: {}", record.error.unwrap_or_default());
    }
    println!("checkpoint: {}", job.dir(&cfg.out_dir).join("model.safetensors").display());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let overrides = Overrides { seed: a.seed, ..Default::default() };
    let cfg = load_config(&a.config, &overrides)?;
    let part = match a.part.as_str() {
        "train" => Part::Train,
        "val" => Part::Val,
        "test" => Part::Test,
        other => bail!("unknown part `{other}` (train|val|test)"),
    };
    let ck = load_checkpoint(&a.checkpoint, None)?;
    let expected = cfg.model_config(ck.model.pooling().p, cfg.seed)?;
    if let Some(diff) = expected.architecture_mismatch(ck.model.config()) {
        bail!("checkpoint does not match the config: {diff}");
    }
    let data = PreparedData::load(&cfg)?;
    let split = cfg.dataset.split(&data.samples, cfg.seed)?;
    let samples = split.samples(&data.samples, part);
    let report = evaluate(&ck.model, &samples, cfg.train.eval_batch_size)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<u8> {
    let mut cfg = load_config(&a.config, &a.overrides)?;
    if let Some(r) = a.repeats {
        cfg.repeats = r;
    }
    cfg.validate()?;
    let data = PreparedData::load(&cfg)?;
    let provenance = prepare_output(&cfg, &data)?;
    match a.parallel {
        Some(n) if n > 1 => run_workers(&cfg, n)?,
        _ => {
            for job in cfg.jobs() {
                run_job(&cfg, &data, job)?;
            }
        }
    }
    let report = finalize_report(&cfg, provenance)?;
    print!("{}", report.to_table());
    println!("report: {}", cfg.out_dir.join("report.json").display());
    Ok(report.exit_code() as u8)
}

/// Runs each job as `crackseg sweep-worker` against the persisted config,
/// at most `n` at a time.
fn run_workers(cfg: &SweepConfig, n: usize) -> Result<()> {
    let exe = std::env::current_exe()?;
    let resolved = cfg.out_dir.join("resolved_config.toml");
    let mut pending = cfg.jobs().into_iter();
    let mut running: Vec<(Job, Child)> = Vec::new();
    loop {
        while running.len() < n {
            let Some(job) = pending.next() else { break };
            let child = Command::new(&exe)
                .arg("sweep-worker")
                .arg("--config")
                .arg(&resolved)
                .arg("--p")
                .arg(job.p.label())
                .arg("--repeat")
                .arg(job.repeat.to_string())
                .spawn()
                .context("spawning sweep worker")?;
            running.push((job, child));
        }
        if running.is_empty() {
            return Ok(());
        }
        let (job, mut child) = running.remove(0);
        let status = child.wait()?;
        if !status.success() {
            warn!("worker for p={} repeat={} exited with {status}", job.p, job.repeat);
        }
    }
}

fn worker(a: WorkerArgs) -> Result<()> {
    let cfg = load_config(&a.config, &Overrides::default())?;
    let data = PreparedData::load(&cfg)?;
    run_job(&cfg, &data, Job { p: a.p, repeat: a.repeat })?;
    Ok(())
}

fn segment_cmd(a: SegmentArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint, None)?;
    let model = ck.model;
    let p = model.pooling().p;
    let polarity = resolve_polarity(p, a.polarity)?;
    let mut heatmaps = Vec::new();
    for path in &a.image {
        let pixels = decode_cell_image(&std::fs::read(path)?, path)?;
        let x = preprocess_pixels(&pixels, path)?;
        let result = extract_heatmap(&model, &x)?;
        let target = if a.native {
            [result.heatmap.height, result.heatmap.width]
        } else {
            [pixels.height() as usize, pixels.width() as usize]
        };
        let mask = segment(&result, polarity, target)?;
        let sidecar = MaskSidecar {
            image_path: path.clone(),
            p: p.label(),
            polarity,
            gated: mask.gated,
            label: result.classification.label,
            probabilities: result.classification.probabilities,
            foreground_pixels: mask.foreground(),
            heatmap_mean: result.heatmap.mean(),
        };
        let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        let png = export_mask(&a.out, &stem, &mask, &sidecar)?;
        info!("{} -> {} ({}, {} px)", path.display(), png.display(), sidecar.label, sidecar.foreground_pixels);
        heatmaps.push(result.heatmap);
    }
    log_mean_activation(p, &heatmaps);
    Ok(())
}

fn panel(a: PanelArgs) -> Result<()> {
    let mut checkpoints = BTreeMap::new();
    for path in &a.checkpoint {
        let ck = load_checkpoint(path, None).with_context(|| format!("loading {}", path.display()))?;
        checkpoints.insert(ck.model.pooling().p.label(), path.clone());
    }
    let p_values = match (&a.p, &a.sweep_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(_)) => crackseg::experiments::default_p_values(),
        (None, None) => {
            let mut ps: Vec<Exponent> = checkpoints.keys().map(|k| k.parse()).collect::<Result<_, _>>()?;
            ps.sort_by(|x, y| x.value().total_cmp(&y.value()));
            ps
        }
    };
    if let Some(dir) = &a.sweep_dir {
        for p in &p_values {
            let path = Job { p: *p, repeat: 0 }.dir(dir).join("model.safetensors");
            if path.is_file() {
                checkpoints.entry(p.label()).or_insert(path);
            }
        }
    }
    let mut options = PanelOptions { overlay: a.overlay, ..Default::default() };
    for entry in &a.polarity {
        let (p, mode) = entry
            .split_once('=')
            .with_context(|| format!("--polarity expects p=mode, got `{entry}`"))?;
        let p: Exponent = p.parse()?;
        let mode: PolarityMode = mode.parse().map_err(anyhow::Error::msg)?;
        options.polarity.insert(p.label(), mode);
    }
    let outcome = emit_panel(&checkpoints, &p_values, &a.image, &a.out, &options)?;
    for (p, reason) in &outcome.skipped {
        println!("skipped p={p}: {reason}");
    }
    println!("wrote {} files to {}", outcome.written.len(), a.out.display());
    Ok(())
}
