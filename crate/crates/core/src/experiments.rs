//! Config-driven experiments: the pooling-exponent sweep, its report and
//! heatmap panels.
//!
//! A sweep trains one model per (exponent, repeat) job. Every job writes its
//! checkpoint, history and a `record.json` into its own directory, and the
//! report is always assembled from those records, so jobs may run in-process
//! or as separate worker processes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};
use log::{error, info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    dataset_checksum, decode_cell_image, load_dataset, preprocess_pixels, stratified_split, DatasetPaths,
    DatasetSplit, DatasetStats, ImageSample, LabelPolicy, Part, SplitRatios, CELL_SIDE,
};
use crate::error::{Error, Result};
use crate::label::CrackLabel;
use crate::lp_pooling::{Exponent, PoolingSpec};
use crate::model::{CrackNet, ModelConfig};
use crate::segment::{
    apply_gate, extract_heatmap, extract_heatmaps, log_mean_activation, nearest_source, resolve_polarity,
    threshold_mask, upsample_mask, Heatmap, PolarityMode,
};
use crate::synthetic;
use crate::train::{evaluate, train, MetricsReport, TrainConfig};

pub const REPORT_FORMAT: &str = "crackseg-sweep-report-v1";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn default_p_values() -> Vec<Exponent> {
    [1.0, 2.0, 3.0, 4.0, 5.0, 9.0]
        .into_iter()
        .map(Exponent::Finite)
        .chain([Exponent::Infinity])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Stratified split of individual cells.
    Cell,
    /// Whole modules per part (needs a module column in the index).
    Module,
    /// Train, validate and test on every sample (overfit diagnostics).
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: Option<PathBuf>,
    pub index_file: PathBuf,
    pub labels_file: Option<PathBuf>,
    pub policy: LabelPolicy,
    /// Generate the line-vs-noise set instead of reading `root`.
    pub synthetic: Option<SyntheticSpec>,
    pub split: SplitMode,
    pub ratios: SplitRatios,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            root: None,
            index_file: PathBuf::from("labels.csv"),
            labels_file: None,
            policy: LabelPolicy::Strict,
            synthetic: None,
            split: SplitMode::Cell,
            ratios: SplitRatios::default(),
        }
    }
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Vec<ImageSample>> {
        match (&self.root, &self.synthetic) {
            (Some(root), None) => load_dataset(&DatasetPaths {
                root: root.clone(),
                index_file: self.index_file.clone(),
                labels_file: self.labels_file.clone(),
                policy: self.policy,
            }),
            (None, Some(s)) => Ok(synthetic::line_vs_noise(s.count, s.seed)
                .into_iter()
                .map(|c| c.sample)
                .collect()),
            _ => Err(Error::InvalidSweep("dataset needs exactly one of `root` or `synthetic`".into())),
        }
    }

    pub fn split(&self, samples: &[ImageSample], seed: u64) -> Result<DatasetSplit> {
        match self.split {
            SplitMode::Cell => stratified_split(samples, self.ratios, seed, false),
            SplitMode::Module => stratified_split(samples, self.ratios, seed, true),
            SplitMode::All => {
                let all: Vec<usize> = (0..samples.len()).collect();
                Ok(DatasetSplit {
                    train: all.clone(),
                    val: all.clone(),
                    test: all,
                    seed,
                    by_module: false,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub pretrained_weights_path: Option<PathBuf>,
    pub input_size: [usize; 2],
    pub width_divisor: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelSection {
            pretrained_weights_path: None,
            input_size: d.input_size,
            width_divisor: d.width_divisor,
        }
    }
}

/// Everything one sweep needs. The sweep seed drives the split, the
/// initialization and the batch order (`seed + repeat` for each repeat);
/// `train.seed` is overwritten with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub p_values: Vec<Exponent>,
    pub seed: u64,
    pub repeats: usize,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            p_values: default_p_values(),
            seed: 0,
            repeats: 1,
            out_dir: PathBuf::from("runs/sweep"),
            dataset: DatasetConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SweepConfig = toml::from_str(text).map_err(|e| Error::InvalidSweep(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidSweep(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_values.is_empty() {
            return Err(Error::InvalidSweep("p_values must not be empty".into()));
        }
        for p in &self.p_values {
            PoolingSpec::new(*p)?;
        }
        let mut labels: Vec<String> = self.p_values.iter().map(Exponent::label).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.p_values.len() {
            return Err(Error::InvalidSweep("p_values contains duplicates".into()));
        }
        if self.repeats < 1 {
            return Err(Error::InvalidSweep("repeats must be >= 1".into()));
        }
        if self.dataset.root.is_some() == self.dataset.synthetic.is_some() {
            return Err(Error::InvalidSweep("dataset needs exactly one of `root` or `synthetic`".into()));
        }
        self.dataset.ratios.validate()?;
        self.train.validate()?;
        self.model_config(self.p_values[0], self.seed)?.validate()
    }

    pub fn model_config(&self, p: Exponent, seed: u64) -> Result<ModelConfig> {
        Ok(ModelConfig {
            input_size: self.model.input_size,
            pooling: PoolingSpec::new(p)?,
            pretrained_weights_path: self.model.pretrained_weights_path.clone(),
            seed,
            width_divisor: self.model.width_divisor,
            ..ModelConfig::default()
        })
    }

    pub fn jobs(&self) -> Vec<Job> {
        (0..self.repeats)
            .flat_map(|repeat| self.p_values.iter().map(move |&p| Job { p, repeat }))
            .collect()
    }

    /// Copy with `train.seed` set to the sweep seed, as persisted.
    pub fn resolved(&self) -> SweepConfig {
        let mut r = self.clone();
        r.train.seed = self.seed;
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Job {
    pub p: Exponent,
    pub repeat: usize,
}

impl Job {
    pub fn dir(&self, out: &Path) -> PathBuf {
        out.join("runs").join(format!("p-{}", self.p.label())).join(format!("repeat-{}", self.repeat))
    }

    pub fn seed(&self, base: u64) -> u64 {
        base.wrapping_add(self.repeat as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub p: Exponent,
    pub repeat: usize,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub metrics: Option<MetricsReport>,
    pub split_checksum: Option<String>,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    pub best_val_loss: Option<f64>,
    /// Mean crack activation over the test maps (diagnostic).
    pub mean_crack_activation: Option<f64>,
}

impl RunRecord {
    fn failed(job: Job, seed: u64, err: &Error) -> Self {
        RunRecord {
            p: job.p,
            repeat: job.repeat,
            seed,
            ok: false,
            error: Some(err.to_string()),
            metrics: None,
            split_checksum: None,
            best_epoch: None,
            epochs_run: None,
            best_val_loss: None,
            mean_crack_activation: None,
        }
    }
}

/// Loaded dataset plus its checksum, shared across jobs.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub samples: Vec<ImageSample>,
    pub checksum: String,
    pub stats: DatasetStats,
}

impl PreparedData {
    pub fn load(config: &SweepConfig) -> Result<Self> {
        let samples = config.dataset.load()?;
        if samples.is_empty() {
            return Err(Error::InvalidSweep("dataset is empty".into()));
        }
        Ok(PreparedData {
            checksum: dataset_checksum(&samples),
            stats: DatasetStats::of(&samples),
            samples,
        })
    }
}

/// Trains and evaluates one job, writing `model.safetensors`,
/// `history.jsonl` and `record.json` into the job directory. Training
/// errors are captured in the record rather than returned.
pub fn run_job(config: &SweepConfig, data: &PreparedData, job: Job) -> Result<RunRecord> {
    let dir = job.dir(&config.out_dir);
    std::fs::create_dir_all(&dir)?;
    let seed = job.seed(config.seed);
    info!("job p={} repeat={} seed={seed}", job.p, job.repeat);
    let record = match train_job(config, data, job, seed, &dir) {
        Ok(r) => r,
        Err(e) => {
            error!("job p={} repeat={} failed: {e}", job.p, job.repeat);
            RunRecord::failed(job, seed, &e)
        }
    };
    std::fs::write(dir.join("record.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(record)
}

fn train_job(config: &SweepConfig, data: &PreparedData, job: Job, seed: u64, dir: &Path) -> Result<RunRecord> {
    let split = config.dataset.split(&data.samples, seed)?;
    let split_checksum = split.checksum(&data.samples);
    let mut model = CrackNet::new(config.model_config(job.p, seed)?)?;
    let train_cfg = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let history = train(&mut model, &data.samples, &split, &train_cfg)?;
    history.write_jsonl(dir.join("history.jsonl"))?;
    let test = split.samples(&data.samples, Part::Test);
    let metrics = evaluate(&model, &test, train_cfg.eval_batch_size)?;
    let mut maps = Vec::with_capacity(test.len());
    for chunk in test.chunks(train_cfg.eval_batch_size) {
        let images = chunk
            .iter()
            .map(|s| preprocess_pixels(&s.pixels, &s.image_path))
            .collect::<Result<Vec<_>>>()?;
        let batch = crate::tensor::Tensor::stack(&images)?;
        maps.extend(extract_heatmaps(&model, &batch)?.into_iter().map(|r| r.heatmap));
    }
    let mean_crack_activation = log_mean_activation(job.p, &maps);
    let mut meta = BTreeMap::new();
    meta.insert("bn_mode".to_string(), train_cfg.bn_mode.to_string());
    meta.insert("split_checksum".to_string(), split_checksum.clone());
    meta.insert("dataset_checksum".to_string(), data.checksum.clone());
    meta.insert("proxy_labels".to_string(), (data.stats.proxy > 0).to_string());
    meta.insert("best_epoch".to_string(), history.best_epoch.to_string());
    save_checkpoint(&model, &meta, dir.join("model.safetensors"))?;
    info!("p={} repeat={}: {metrics}", job.p, job.repeat);
    Ok(RunRecord {
        p: job.p,
        repeat: job.repeat,
        seed,
        ok: true,
        error: None,
        metrics: Some(metrics),
        split_checksum: Some(split_checksum),
        best_epoch: Some(history.best_epoch),
        epochs_run: Some(history.records.len()),
        best_val_loss: history.best().map(|r| r.val_loss),
        mean_crack_activation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; 0 for a single value.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub p: Exponent,
    pub runs: usize,
    pub succeeded: usize,
    pub complete: bool,
    pub precision_crack: Option<MeanStd>,
    pub recall_crack: Option<MeanStd>,
    pub f1_crack: Option<MeanStd>,
    pub accuracy: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub code_version: String,
    pub seed: u64,
    pub dataset_checksum: String,
    pub dataset: DatasetStats,
    pub proxy_labels: bool,
    /// SHA-256 of the resolved config TOML.
    pub config_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub format: String,
    pub provenance: Provenance,
    pub columns: Vec<ColumnSummary>,
    pub records: Vec<RunRecord>,
}

impl SweepReport {
    pub fn failed_runs(&self) -> usize {
        self.records.iter().filter(|r| !r.ok).count()
    }

    /// 0 when every run succeeded, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.failed_runs() == 0 {
            0
        } else {
            2
        }
    }

    /// Table with one row per metric and one column per exponent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if self.provenance.proxy_labels {
            out.push_str("NOTE: labels are proxies from defect probability >= 0.5, not crack annotations.\n");
        }
        let _ = writeln!(
            out,
            "dataset {} ({} images), seed {}, version {}",
            &self.provenance.dataset_checksum[..12.min(self.provenance.dataset_checksum.len())],
            self.provenance.dataset.total,
            self.provenance.seed,
            self.provenance.code_version
        );
        let width = 17;
        let _ = write!(out, "{:<10}", "metric");
        for c in &self.columns {
            let head = if c.complete {
                format!("L_{}", c.p)
            } else {
                format!("L_{} ({}/{})", c.p, c.succeeded, c.runs)
            };
            let _ = write!(out, "{head:>width$}");
        }
        out.push('\n');
        type Getter = fn(&ColumnSummary) -> Option<MeanStd>;
        let rows: [(&str, Getter); 4] = [
            ("precision", |c| c.precision_crack),
            ("recall", |c| c.recall_crack),
            ("f1", |c| c.f1_crack),
            ("accuracy", |c| c.accuracy),
        ];
        for (name, get) in rows {
            let _ = write!(out, "{name:<10}");
            for c in &self.columns {
                let cell = match get(c) {
                    Some(m) if c.runs > 1 => format!("{:.4} ± {:.4}", m.mean, m.std),
                    Some(m) => format!("{:.4}", m.mean),
                    None => "failed".to_string(),
                };
                let _ = write!(out, "{cell:>width$}");
            }
            out.push('\n');
        }
        for r in self.records.iter().filter(|r| !r.ok) {
            let _ = writeln!(
                out,
                "run p={} repeat={} failed: {}",
                r.p,
                r.repeat,
                r.error.as_deref().unwrap_or("unknown error")
            );
        }
        out
    }
}

fn summarize(p: Exponent, records: &[&RunRecord]) -> ColumnSummary {
    let ok: Vec<&MetricsReport> = records.iter().filter_map(|r| r.metrics.as_ref()).collect();
    let stat = |f: fn(&MetricsReport) -> f64| MeanStd::of(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
    ColumnSummary {
        p,
        runs: records.len(),
        succeeded: ok.len(),
        complete: ok.len() == records.len(),
        precision_crack: stat(|m| m.precision_crack),
        recall_crack: stat(|m| m.recall_crack),
        f1_crack: stat(|m| m.f1_crack),
        accuracy: stat(|m| m.accuracy),
    }
}

fn config_sha(config: &SweepConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(config.resolved().to_toml_string()?.as_bytes())))
}

/// Creates the output directory and persists the resolved config and the
/// dataset provenance.
pub fn prepare_output(config: &SweepConfig, data: &PreparedData) -> Result<Provenance> {
    std::fs::create_dir_all(&config.out_dir)?;
    let resolved = config.resolved();
    std::fs::write(config.out_dir.join("resolved_config.toml"), resolved.to_toml_string()?)?;
    let provenance = Provenance {
        code_version: CODE_VERSION.to_string(),
        seed: config.seed,
        dataset_checksum: data.checksum.clone(),
        dataset: data.stats,
        proxy_labels: data.stats.proxy > 0,
        config_sha256: config_sha(config)?,
    };
    std::fs::write(
        config.out_dir.join("provenance.json"),
        serde_json::to_string_pretty(&provenance)? + "\n",
    )?;
    Ok(provenance)
}

/// Builds the report from the jobs' `record.json` files (a missing record
/// counts as a failed run) and writes `report.json` and `report.txt`.
pub fn finalize_report(config: &SweepConfig, provenance: Provenance) -> Result<SweepReport> {
    let mut records = Vec::new();
    for job in config.jobs() {
        let path = job.dir(&config.out_dir).join("record.json");
        let record = std::fs::read_to_string(&path)
            .map_err(Error::from)
            .and_then(|t| serde_json::from_str::<RunRecord>(&t).map_err(Error::from))
            .unwrap_or_else(|e| {
                let e = Error::InvalidSweep(format!("no usable record at {}: {e}", path.display()));
                RunRecord::failed(job, job.seed(config.seed), &e)
            });
        records.push(record);
    }
    let columns = config
        .p_values
        .iter()
        .map(|&p| {
            let rs: Vec<&RunRecord> = records.iter().filter(|r| r.p.label() == p.label()).collect();
            summarize(p, &rs)
        })
        .collect();
    let report = SweepReport {
        format: REPORT_FORMAT.into(),
        provenance,
        columns,
        records,
    };
    std::fs::write(config.out_dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(config.out_dir.join("report.txt"), report.to_table())?;
    Ok(report)
}

/// Runs every job sequentially in this process.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepReport> {
    config.validate()?;
    let data = PreparedData::load(config)?;
    let provenance = prepare_output(config, &data)?;
    for job in config.jobs() {
        run_job(config, &data, job)?;
    }
    let report = finalize_report(config, provenance)?;
    info!("sweep finished: {} runs, {} failed", report.records.len(), report.failed_runs());
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct PanelOptions {
    /// Also write the heatmap/segmentation pair per exponent.
    pub overlay: bool,
    /// Polarity per exponent label; required for `p <= 4` with `overlay`.
    pub polarity: BTreeMap<String, PolarityMode>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PanelOutcome {
    pub written: Vec<PathBuf>,
    /// Requested exponents that were skipped, with the reason.
    pub skipped: Vec<(String, String)>,
}

fn upsample_gray(img: &GrayImage, side: usize) -> GrayImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    GrayImage::from_fn(side as u32, side as u32, |x, y| {
        *img.get_pixel(nearest_source(x as usize, w, side) as u32, nearest_source(y as usize, h, side) as u32)
    })
}

fn overlay(input: &GrayImage, mask: &crate::segment::SegmentationMask) -> RgbImage {
    RgbImage::from_fn(input.width(), input.height(), |x, y| {
        let v = input.get_pixel(x, y).0[0];
        if mask.get(y as usize, x as usize) {
            Rgb([255, v / 3, v / 3])
        } else {
            Rgb([v, v, v])
        }
    })
}

/// Writes, per image, the original plus one min-max normalized heatmap per
/// requested exponent; with `overlay`, also the gated segmentation over the
/// input. Exponents without a loadable checkpoint are skipped and listed.
pub fn emit_panel(
    checkpoints: &BTreeMap<String, PathBuf>,
    p_values: &[Exponent],
    images: &[PathBuf],
    out_dir: &Path,
    options: &PanelOptions,
) -> Result<PanelOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let mut outcome = PanelOutcome::default();
    let mut models = Vec::new();
    for p in p_values {
        let label = p.label();
        let Some(path) = checkpoints.get(&label) else {
            warn!("no checkpoint for p={label}; skipped");
            outcome.skipped.push((label, "no checkpoint".into()));
            continue;
        };
        let polarity = if options.overlay {
            match resolve_polarity(*p, options.polarity.get(&label).copied()) {
                Ok(m) => Some(m),
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        match load_checkpoint(path, None) {
            Ok(ck) if ck.model.pooling().p.label() == label => models.push((label, ck.model, polarity)),
            Ok(ck) => {
                let reason = format!("{} holds p={}", path.display(), ck.model.pooling().p);
                warn!("skipping p={label}: {reason}");
                outcome.skipped.push((label, reason));
            }
            Err(e) => {
                warn!("skipping p={label}: {e}");
                outcome.skipped.push((label, e.to_string()));
            }
        }
    }
    for image_path in images {
        let pixels = decode_cell_image(&std::fs::read(image_path)?, image_path)?;
        let stem = image_path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        let original = out_dir.join(format!("{stem}_original.png"));
        pixels.save(&original)?;
        outcome.written.push(original);
        let tensor = preprocess_pixels(&pixels, image_path)?;
        for (label, model, polarity) in &models {
            let result = extract_heatmap(model, &tensor)?;
            let heat = out_dir.join(format!("{stem}_heatmap_p{label}.png"));
            upsample_gray(&result.heatmap.to_gray(), CELL_SIDE).save(&heat)?;
            outcome.written.push(heat);
            if let Some(polarity) = polarity {
                let mask = apply_gate(result.classification.label, threshold_mask(&result.heatmap, *polarity)?);
                let mask = upsample_mask(&mask, [CELL_SIDE, CELL_SIDE])?;
                let seg = out_dir.join(format!("{stem}_segmentation_p{label}.png"));
                overlay(&pixels, &mask).save(&seg)?;
                outcome.written.push(seg);
                if result.classification.label == CrackLabel::NonCrack {
                    info!("{stem}: classified non-crack at p={label}; segmentation is empty");
                }
            }
        }
    }
    Ok(outcome)
}

/// Heatmap rendering helper re-exported for the CLI.
pub fn heatmap_image(heatmap: &Heatmap) -> GrayImage {
    upsample_gray(&heatmap.to_gray(), CELL_SIDE)
}
