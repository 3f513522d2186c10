//! EL cell images: dataset index parsing, weak labels, preprocessing,
//! stratified splits and the (optionally balanced, augmented) training stream.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{imageops, GrayImage};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::label::CrackLabel;
use crate::tensor::Tensor;

/// Side length of every dataset image.
pub const CELL_SIDE: usize = 300;

/// Per-channel normalization of the ImageNet-pretrained backbone.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellType {
    Mono,
    Poly,
}

impl fmt::Display for CellType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellType::Mono => "mono",
            CellType::Poly => "poly",
        })
    }
}

impl FromStr for CellType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mono" | "monocrystalline" => Ok(CellType::Mono),
            "poly" | "polycrystalline" => Ok(CellType::Poly),
            other => Err(format!("unknown cell type `{other}`")),
        }
    }
}

/// Expert defect probability; one of 0, 1/3, 2/3, 1 (stored as thirds).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DefectProbability(u8);

impl DefectProbability {
    pub fn from_thirds(k: u8) -> Option<Self> {
        (k <= 3).then_some(DefectProbability(k))
    }

    /// Snaps `p` to the nearest level, rejecting values more than 0.01 away.
    pub fn from_value(p: f64) -> Option<Self> {
        if !p.is_finite() {
            return None;
        }
        let k = (p * 3.0).round();
        ((0.0..=3.0).contains(&k) && (p - k / 3.0).abs() <= 0.01).then_some(DefectProbability(k as u8))
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / 3.0
    }

    pub fn thirds(self) -> u8 {
        self.0
    }
}

/// Fallback when an image has no entry in the crack labels file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelPolicy {
    /// Missing label is an error.
    Strict,
    /// Missing label becomes `crack` iff defect probability >= 0.5. This is
    /// an approximation (any defect type counts), flagged on every sample.
    Proxy,
}

impl FromStr for LabelPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "strict" => Ok(LabelPolicy::Strict),
            "proxy" => Ok(LabelPolicy::Proxy),
            other => Err(format!("unknown label policy `{other}` (strict|proxy)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// Path as written in the index, relative to the dataset root.
    pub image_path: PathBuf,
    pub pixels: GrayImage,
    pub cell_type: CellType,
    pub defect_probability: DefectProbability,
    pub crack_label: CrackLabel,
    /// Label derived from the defect probability rather than annotated.
    pub proxy_label: bool,
    /// Source module, when the index carries one.
    pub module: Option<String>,
}

/// One row of the dataset index: `path defect_probability cell_type [module]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexRow {
    pub path: String,
    pub defect_probability: DefectProbability,
    pub cell_type: CellType,
    pub module: Option<String>,
}

fn split_fields(line: &str) -> Vec<&str> {
    let delimiter = [',', ';', '\t'].into_iter().find(|d| line.contains(*d));
    match delimiter {
        Some(d) => line.split(d).map(str::trim).filter(|f| !f.is_empty()).collect(),
        None => line.split_whitespace().collect(),
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_start_matches('\u{feff}').trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Parses the dataset index. Comma, semicolon, tab or whitespace delimited;
/// a leading header row (non-numeric probability column) is skipped.
pub fn parse_index(text: &str, source: &Path) -> Result<Vec<IndexRow>> {
    let err = |line: usize, reason: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        reason,
    };
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, (line_no, line)) in content_lines(text).enumerate() {
        let fields = split_fields(line);
        if n == 0 && fields.get(1).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if !(3..=4).contains(&fields.len()) {
            return Err(err(
                line_no,
                format!("expected `path defect_probability cell_type [module]`, got {} fields", fields.len()),
            ));
        }
        let prob: f64 = fields[1]
            .parse()
            .map_err(|_| err(line_no, format!("bad defect probability `{}`", fields[1])))?;
        let defect_probability = DefectProbability::from_value(prob)
            .ok_or_else(|| err(line_no, format!("defect probability {prob} is not one of 0, 1/3, 2/3, 1")))?;
        let cell_type = fields[2].parse().map_err(|e| err(line_no, e))?;
        let path = fields[0].to_string();
        if !seen.insert(path.clone()) {
            return Err(err(line_no, format!("duplicate image `{path}`")));
        }
        rows.push(IndexRow {
            path,
            defect_probability,
            cell_type,
            module: fields.get(3).map(|m| m.to_string()),
        });
    }
    Ok(rows)
}

/// Parses the crack labels file: a header row, then `path crack_label` rows.
pub fn parse_labels(text: &str, source: &Path) -> Result<BTreeMap<String, CrackLabel>> {
    let err = |line: usize, reason: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        reason,
    };
    let mut lines = content_lines(text);
    let (header_no, header) = match lines.next() {
        Some(h) => h,
        None => return Ok(BTreeMap::new()),
    };
    if split_fields(header).len() != 2 {
        return Err(err(header_no, "header must have two columns (path, crack_label)".into()));
    }
    let mut labels = BTreeMap::new();
    for (line_no, line) in lines {
        let fields = split_fields(line);
        if fields.len() != 2 {
            return Err(err(line_no, format!("expected `path crack_label`, got {} fields", fields.len())));
        }
        let label: CrackLabel = fields[1].parse().map_err(|e| err(line_no, e))?;
        if labels.insert(fields[0].to_string(), label).is_some() {
            return Err(err(line_no, format!("duplicate image `{}`", fields[0])));
        }
    }
    Ok(labels)
}

/// Decodes an 8-bit single-channel 300×300 image.
pub fn decode_cell_image(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let bad = |reason: String| Error::BadImage {
        path: path.to_path_buf(),
        reason,
    };
    let img = image::load_from_memory(bytes).map_err(|e| bad(e.to_string()))?;
    let img = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => return Err(bad(format!("expected 8-bit grayscale, found {:?}", other.color()))),
    };
    if img.dimensions() != (CELL_SIDE as u32, CELL_SIDE as u32) {
        return Err(bad(format!(
            "expected {CELL_SIDE}x{CELL_SIDE} pixels, found {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok(img)
}

#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub root: PathBuf,
    /// Index file, relative to `root` unless absolute.
    pub index_file: PathBuf,
    pub labels_file: Option<PathBuf>,
    pub policy: LabelPolicy,
}

impl DatasetPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetPaths {
            root: root.into(),
            index_file: PathBuf::from("labels.csv"),
            labels_file: None,
            policy: LabelPolicy::Strict,
        }
    }
}

/// Loads every indexed image with its weak labels.
pub fn load_dataset(paths: &DatasetPaths) -> Result<Vec<ImageSample>> {
    let index_path = paths.root.join(&paths.index_file);
    let rows = parse_index(&std::fs::read_to_string(&index_path)?, &index_path)?;
    let labels = match &paths.labels_file {
        Some(p) => parse_labels(&std::fs::read_to_string(p)?, p)?,
        None => BTreeMap::new(),
    };
    let mut samples = Vec::with_capacity(rows.len());
    for row in rows {
        let file = paths.root.join(&row.path);
        if !file.is_file() {
            return Err(Error::MissingImage(file));
        }
        let (crack_label, proxy_label) = match labels.get(&row.path) {
            Some(l) => (*l, false),
            None => match paths.policy {
                LabelPolicy::Strict => return Err(Error::Unlabeled(PathBuf::from(&row.path))),
                LabelPolicy::Proxy => (proxy_label(row.defect_probability), true),
            },
        };
        let pixels = decode_cell_image(&std::fs::read(&file)?, &file)?;
        samples.push(ImageSample {
            image_path: PathBuf::from(row.path),
            pixels,
            cell_type: row.cell_type,
            defect_probability: row.defect_probability,
            crack_label,
            proxy_label,
            module: row.module,
        });
    }
    let stats = DatasetStats::of(&samples);
    info!(
        "loaded {} images: {} crack / {} non-crack, {} mono / {} poly, {} proxy-labelled",
        samples.len(),
        stats.crack,
        stats.non_crack,
        stats.mono,
        stats.poly,
        stats.proxy
    );
    if stats.proxy > 0 {
        warn!(
            "{} labels are proxies derived from defect probability >= 0.5, \
             not crack annotations; metrics are not comparable to annotated runs",
            stats.proxy
        );
    }
    Ok(samples)
}

pub fn proxy_label(p: DefectProbability) -> CrackLabel {
    if p.value() >= 0.5 {
        CrackLabel::Crack
    } else {
        CrackLabel::NonCrack
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub crack: usize,
    pub non_crack: usize,
    pub mono: usize,
    pub poly: usize,
    pub proxy: usize,
}

impl DatasetStats {
    pub fn of<'a>(samples: impl IntoIterator<Item = &'a ImageSample>) -> Self {
        let mut s = DatasetStats::default();
        for x in samples {
            s.total += 1;
            match x.crack_label {
                CrackLabel::Crack => s.crack += 1,
                CrackLabel::NonCrack => s.non_crack += 1,
            }
            match x.cell_type {
                CellType::Mono => s.mono += 1,
                CellType::Poly => s.poly += 1,
            }
            s.proxy += x.proxy_label as usize;
        }
        s
    }

    pub fn crack_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.crack as f64 / self.total as f64
        }
    }
}

/// SHA-256 over paths, labels and pixels of `samples`, in order.
pub fn dataset_checksum<'a>(samples: impl IntoIterator<Item = &'a ImageSample>) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.image_path.to_string_lossy().as_bytes());
        h.update([0, s.crack_label.index() as u8, s.defect_probability.thirds(), s.cell_type as u8]);
        h.update(s.pixels.as_raw());
    }
    hex::encode(h.finalize())
}

/// Grayscale → 3 replicated channels, scaled to [0, 1], then normalized with
/// [`IMAGENET_MEAN`] / [`IMAGENET_STD`]. Output shape `[1, 3, 300, 300]`.
pub fn preprocess(sample: &ImageSample) -> Result<Tensor> {
    preprocess_pixels(&sample.pixels, &sample.image_path)
}

pub fn preprocess_pixels(pixels: &GrayImage, path: &Path) -> Result<Tensor> {
    if pixels.dimensions() != (CELL_SIDE as u32, CELL_SIDE as u32) {
        return Err(Error::BadImage {
            path: path.to_path_buf(),
            reason: format!(
                "expected {CELL_SIDE}x{CELL_SIDE}, found {}x{} (images are never resized)",
                pixels.width(),
                pixels.height()
            ),
        });
    }
    let mut t = Tensor::zeros([1, 3, CELL_SIDE, CELL_SIDE]);
    for c in 0..3 {
        let (mean, std) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
        for (dst, src) in t.plane_mut(0, c).iter_mut().zip(pixels.as_raw()) {
            *dst = (*src as f32 / 255.0 - mean) / std;
        }
    }
    Ok(t)
}

/// Element of the symmetry group of the square: `rotations` quarter turns
/// counter-clockwise, optionally preceded by a horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub flip: bool,
    pub rotations: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        flip: false,
        rotations: 0,
    };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(|k| Dihedral {
            flip: k >= 4,
            rotations: (k % 4) as u8,
        })
    }

    pub fn apply(self, img: &GrayImage) -> GrayImage {
        let base = if self.flip {
            imageops::flip_horizontal(img)
        } else {
            img.clone()
        };
        match self.rotations % 4 {
            0 => base,
            1 => imageops::rotate270(&base),
            2 => imageops::rotate180(&base),
            _ => imageops::rotate90(&base),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = SplitRatios { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = self.as_array();
        if parts.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::Stratify(format!("split ratios must be positive: {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Stratify(format!("split ratios must sum to 1: {parts:?}")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
}

/// Disjoint index sets into the sample list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub by_module: bool,
}

impl DatasetSplit {
    pub fn part(&self, part: Part) -> &[usize] {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }

    pub fn samples<'a>(&self, all: &'a [ImageSample], part: Part) -> Vec<&'a ImageSample> {
        self.part(part).iter().map(|&i| &all[i]).collect()
    }

    /// Hash of the image paths in each part, in order.
    pub fn checksum(&self, all: &[ImageSample]) -> String {
        let mut h = Sha256::new();
        for (tag, part) in [(b'T', &self.train), (b'V', &self.val), (b'E', &self.test)] {
            h.update([tag]);
            for &i in part {
                h.update(all[i].image_path.to_string_lossy().as_bytes());
                h.update([0]);
            }
        }
        hex::encode(h.finalize())
    }
}

/// Largest-remainder apportionment of `n` by `ratios`.
fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| n as f64 * r);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for k in order.into_iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Seeded split, stratified jointly by crack label and cell type. With
/// `by_module`, whole modules are assigned to one part (requires a module
/// column in the index) and stratification is best effort.
pub fn stratified_split(
    samples: &[ImageSample],
    ratios: SplitRatios,
    seed: u64,
    by_module: bool,
) -> Result<DatasetSplit> {
    ratios.validate()?;
    for label in [CrackLabel::Crack, CrackLabel::NonCrack] {
        let n = samples.iter().filter(|s| s.crack_label == label).count();
        if n < 3 {
            return Err(Error::Stratify(format!(
                "class `{label}` has {n} samples; at least 3 are needed so every part \
                 gets one (add data or change the split ratios)"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = if by_module {
        split_by_module(samples, ratios, &mut rng)?
    } else {
        split_by_stratum(samples, ratios, &mut rng)
    };
    ensure_both_classes(samples, &mut parts, by_module)?;
    let [train, val, test] = parts;
    Ok(DatasetSplit {
        train,
        val,
        test,
        seed,
        by_module,
    })
}

fn split_by_stratum(samples: &[ImageSample], ratios: SplitRatios, rng: &mut ChaCha8Rng) -> [Vec<usize>; 3] {
    let r = ratios.as_array();
    let mut strata: BTreeMap<(CrackLabel, CellType), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        strata.entry((s.crack_label, s.cell_type)).or_default().push(i);
    }
    let strata: Vec<Vec<usize>> = strata
        .into_values()
        .map(|mut v| {
            v.shuffle(rng);
            v
        })
        .collect();
    let targets = apportion(samples.len(), r);
    let mut counts: Vec<[usize; 3]> = strata
        .iter()
        .map(|s| r.map(|x| (s.len() as f64 * x).floor() as usize))
        .collect();
    let mut leftover: Vec<usize> = strata
        .iter()
        .zip(&counts)
        .map(|(s, c)| s.len() - c.iter().sum::<usize>())
        .collect();
    let mut deficit: [usize; 3] =
        std::array::from_fn(|k| targets[k] - counts.iter().map(|c| c[k]).sum::<usize>());
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (s, stratum) in strata.iter().enumerate() {
        for k in 0..3 {
            let q = stratum.len() as f64 * r[k];
            candidates.push((q - q.floor(), s, k));
        }
    }
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, s, k) in &candidates {
        if leftover[s] > 0 && deficit[k] > 0 {
            counts[s][k] += 1;
            leftover[s] -= 1;
            deficit[k] -= 1;
        }
    }
    for s in 0..strata.len() {
        while leftover[s] > 0 {
            let k = (0..3).max_by_key(|&k| (deficit[k], 3 - k)).unwrap();
            counts[s][k] += 1;
            leftover[s] -= 1;
            deficit[k] = deficit[k].saturating_sub(1);
        }
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (stratum, c) in strata.iter().zip(&counts) {
        let mut it = stratum.iter().copied();
        for k in 0..3 {
            parts[k].extend(it.by_ref().take(c[k]));
        }
    }
    parts
}

fn split_by_module(
    samples: &[ImageSample],
    ratios: SplitRatios,
    rng: &mut ChaCha8Rng,
) -> Result<[Vec<usize>; 3]> {
    let mut modules: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let m = s.module.as_deref().ok_or_else(|| {
            Error::Stratify(format!(
                "split by module requested but `{}` has no module id (add a 4th index column)",
                s.image_path.display()
            ))
        })?;
        modules.entry(m).or_default().push(i);
    }
    if modules.len() < 3 {
        return Err(Error::Stratify(format!(
            "split by module needs at least 3 modules, found {}",
            modules.len()
        )));
    }
    let mut groups: Vec<Vec<usize>> = modules.into_values().collect();
    groups.shuffle(rng);
    let r = ratios.as_array();
    let total = samples.len() as f64;
    let mut parts: [Vec<usize>; 3] = Default::default();
    for g in groups {
        // part furthest below its target share
        let k = (0..3)
            .max_by(|&a, &b| {
                let da = r[a] * total - parts[a].len() as f64;
                let db = r[b] * total - parts[b].len() as f64;
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        parts[k].extend(g);
    }
    Ok(parts)
}

fn ensure_both_classes(samples: &[ImageSample], parts: &mut [Vec<usize>; 3], by_module: bool) -> Result<()> {
    for label in [CrackLabel::Crack, CrackLabel::NonCrack] {
        for k in 0..3 {
            if parts[k].iter().any(|&i| samples[i].crack_label == label) {
                continue;
            }
            if by_module {
                return Err(Error::Stratify(format!(
                    "module split left part {k} without `{label}` samples; try another seed"
                )));
            }
            // borrow one from the part holding the most of this class
            let donor = (0..3)
                .filter(|&d| d != k)
                .max_by_key(|&d| parts[d].iter().filter(|&&i| samples[i].crack_label == label).count())
                .unwrap();
            let have = parts[donor].iter().filter(|&&i| samples[i].crack_label == label).count();
            if have < 2 {
                return Err(Error::Stratify(format!("class `{label}` too small for three parts")));
            }
            let pos = parts[donor]
                .iter()
                .rposition(|&i| samples[i].crack_label == label)
                .unwrap();
            let moved = parts[donor].remove(pos);
            parts[k].push(moved);
        }
    }
    Ok(())
}

/// A mini-batch of preprocessed images.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<CrackLabel>,
    /// Sample indices (into the full sample list) in batch order.
    pub indices: Vec<usize>,
}

/// Epoch-wise batch generator over the training part of a split.
#[derive(Debug, Clone)]
pub struct TrainingStream<'a> {
    samples: &'a [ImageSample],
    train: Vec<usize>,
    batch_size: usize,
    balance: bool,
    augment: bool,
    seed: u64,
}

impl<'a> TrainingStream<'a> {
    pub fn new(
        samples: &'a [ImageSample],
        split: &DatasetSplit,
        batch_size: usize,
        balance: bool,
        augment: bool,
        seed: u64,
    ) -> Result<Self> {
        if batch_size < 1 {
            return Err(Error::InvalidTrainConfig("batch_size must be >= 1".into()));
        }
        if split.train.is_empty() {
            return Err(Error::InvalidTrainConfig("training split is empty".into()));
        }
        Ok(TrainingStream {
            samples,
            train: split.train.clone(),
            batch_size,
            balance,
            augment,
            seed,
        })
    }

    fn rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        rng
    }

    /// Sample order and augmentation for one epoch. With balancing, the
    /// minority class is oversampled (whole shuffled passes, then a random
    /// remainder) to the size of the majority class.
    pub fn epoch_plan(&self, epoch: usize) -> Vec<(usize, Dihedral)> {
        let mut rng = self.rng(epoch);
        let mut order: Vec<usize> = if self.balance {
            let (crack, non): (Vec<usize>, Vec<usize>) = self
                .train
                .iter()
                .partition(|&&i| self.samples[i].crack_label.is_crack());
            let (minority, majority) = if crack.len() <= non.len() { (crack, non) } else { (non, crack) };
            let mut out = majority.clone();
            if !minority.is_empty() {
                let mut extra = Vec::with_capacity(majority.len());
                while extra.len() + minority.len() <= majority.len() {
                    extra.extend(&minority);
                }
                let mut rest = minority.clone();
                rest.shuffle(&mut rng);
                extra.extend(rest.into_iter().take(majority.len() - extra.len()));
                out.extend(extra);
            }
            out
        } else {
            self.train.clone()
        };
        order.shuffle(&mut rng);
        order
            .into_iter()
            .map(|i| {
                let t = if self.augment {
                    let k: u8 = rng.gen_range(0..8);
                    Dihedral {
                        flip: k >= 4,
                        rotations: k % 4,
                    }
                } else {
                    Dihedral::IDENTITY
                };
                (i, t)
            })
            .collect()
    }

    pub fn batches_per_epoch(&self, epoch: usize) -> usize {
        self.epoch_plan(epoch).len().div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let plan = self.epoch_plan(epoch);
        let chunks: Vec<Vec<(usize, Dihedral)>> =
            plan.chunks(self.batch_size).map(|c| c.to_vec()).collect();
        chunks.into_iter().map(move |chunk| {
            let mut images = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            let mut indices = Vec::with_capacity(chunk.len());
            for (i, t) in chunk {
                let s = &self.samples[i];
                let pixels = if t == Dihedral::IDENTITY {
                    std::borrow::Cow::Borrowed(&s.pixels)
                } else {
                    std::borrow::Cow::Owned(t.apply(&s.pixels))
                };
                images.push(preprocess_pixels(&pixels, &s.image_path)?);
                labels.push(s.crack_label);
                indices.push(i);
            }
            Ok(Batch {
                images: Tensor::stack(&images)?,
                labels,
                indices,
            })
        })
    }
}

/// Preprocesses `samples` into batches of at most `batch_size` (for evaluation).
pub fn eval_batches<'a>(
    samples: &'a [&'a ImageSample],
    batch_size: usize,
) -> impl Iterator<Item = Result<(Tensor, Vec<CrackLabel>)>> + 'a {
    samples.chunks(batch_size.max(1)).map(|chunk| {
        let images = chunk.iter().map(|s| preprocess(s)).collect::<Result<Vec<_>>>()?;
        Ok((Tensor::stack(&images)?, chunk.iter().map(|s| s.crack_label).collect()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(i: usize, label: CrackLabel, cell: CellType) -> ImageSample {
        ImageSample {
            image_path: PathBuf::from(format!("images/cell{i:04}.png")),
            pixels: GrayImage::from_pixel(CELL_SIDE as u32, CELL_SIDE as u32, image::Luma([(i % 256) as u8])),
            cell_type: cell,
            defect_probability: DefectProbability::from_thirds(if label.is_crack() { 3 } else { 0 }).unwrap(),
            crack_label: label,
            proxy_label: false,
            module: Some(format!("m{}", i % 11)),
        }
    }

    fn population(n: usize, crack_every: usize) -> Vec<ImageSample> {
        (0..n)
            .map(|i| {
                let label = if i % crack_every == 0 { CrackLabel::Crack } else { CrackLabel::NonCrack };
                let cell = if i % 3 == 0 { CellType::Poly } else { CellType::Mono };
                sample(i, label, cell)
            })
            .collect()
    }

    #[test]
    fn parses_published_index_format() {
        let text = "images/cell0001.png  1.0  mono\nimages/cell0002.png  0.3333333333333333  poly\n\n\
                    images/cell0003.png  0.6666666666666666  mono\nimages/cell0004.png  0.0  poly\n";
        let rows = parse_index(text, Path::new("labels.csv")).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[1].defect_probability.thirds(), 1);
        assert_eq!(rows[2].defect_probability.thirds(), 2);
        assert_eq!(rows[3].cell_type, CellType::Poly);
        assert!(rows[0].module.is_none());
    }

    #[test]
    fn index_with_header_and_commas() {
        let text = "path,defect_probability,type,module\na.png,0,mono,m1\nb.png,1,poly,m2\n";
        let rows = parse_index(text, Path::new("x")).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].module.as_deref(), Some("m2"));
    }

    #[test]
    fn index_errors_carry_line_numbers() {
        let err = parse_index("a.png 0 mono\nb.png 0.5 mono\n", Path::new("idx")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_index("a.png 0 mono\na.png 0 mono\n", Path::new("idx")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(parse_index("a.png 0 thin\n", Path::new("idx")).is_err());
        assert!(parse_index("a.png\n", Path::new("idx")).is_err());
    }

    #[test]
    fn parses_labels_file() {
        let text = "path,crack_label\nimages/a.png,crack\nimages/b.png,non-crack\n";
        let l = parse_labels(text, Path::new("l.csv")).unwrap();
        assert_eq!(l["images/a.png"], CrackLabel::Crack);
        assert_eq!(l["images/b.png"], CrackLabel::NonCrack);
        assert!(parse_labels("", Path::new("l")).unwrap().is_empty());
        assert!(parse_labels("path,label\na.png,maybe\n", Path::new("l")).is_err());
        assert!(parse_labels("path,label\na.png,crack\na.png,crack\n", Path::new("l")).is_err());
    }

    #[test]
    fn defect_probability_levels() {
        assert_eq!(DefectProbability::from_value(0.3333333333333333).unwrap().thirds(), 1);
        assert!(DefectProbability::from_value(0.5).is_none());
        assert!(DefectProbability::from_value(1.2).is_none());
        assert!(DefectProbability::from_value(f64::NAN).is_none());
        assert_eq!(proxy_label(DefectProbability::from_thirds(2).unwrap()), CrackLabel::Crack);
        assert_eq!(proxy_label(DefectProbability::from_thirds(1).unwrap()), CrackLabel::NonCrack);
    }

    #[test]
    fn preprocess_constant_images() {
        for v in [0u8, 255] {
            let mut s = sample(0, CrackLabel::Crack, CellType::Mono);
            s.pixels = GrayImage::from_pixel(300, 300, image::Luma([v]));
            let before = s.clone();
            let t = preprocess(&s).unwrap();
            assert_eq!(t.shape(), [1, 3, 300, 300]);
            for c in 0..3 {
                let want = (v as f32 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
                assert!(t.plane(0, c).iter().all(|x| *x == want));
            }
            assert_eq!(s, before);
        }
    }

    #[test]
    fn preprocess_replicates_source_channel() {
        let mut s = sample(0, CrackLabel::Crack, CellType::Mono);
        s.pixels = GrayImage::from_fn(300, 300, |x, y| image::Luma([((x * 7 + y * 3) % 256) as u8]));
        let t = preprocess(&s).unwrap();
        for c in 0..3 {
            for (v, p) in t.plane(0, c).iter().zip(s.pixels.as_raw()) {
                // undo normalization: exact replication of the scaled source
                let scaled = v * IMAGENET_STD[c] + IMAGENET_MEAN[c];
                assert!((scaled - *p as f32 / 255.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn preprocess_rejects_other_sizes() {
        let mut s = sample(0, CrackLabel::Crack, CellType::Mono);
        s.pixels = GrayImage::new(299, 300);
        assert!(matches!(preprocess(&s), Err(Error::BadImage { .. })));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let all = population(100, 5);
        let r = SplitRatios::new(0.8, 0.1, 0.1).unwrap();
        let a = stratified_split(&all, r, 1, false).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (80, 10, 10));
        assert_eq!(a, stratified_split(&all, r, 1, false).unwrap());
        let b = stratified_split(&all, r, 2, false).unwrap();
        assert_ne!(a.train, b.train);
        let frac = |idx: &[usize]| idx.iter().filter(|&&i| all[i].crack_label.is_crack()).count() as f64 / idx.len() as f64;
        for s in [&a, &b] {
            assert!((frac(&s.train) - frac(&a.train)).abs() < 1e-9);
        }
    }

    #[test]
    fn split_rejects_tiny_class() {
        let mut all = population(30, 1000);
        all[0].crack_label = CrackLabel::Crack;
        all[1].crack_label = CrackLabel::Crack;
        let err = stratified_split(&all, SplitRatios::default(), 0, false).unwrap_err();
        assert!(matches!(err, Error::Stratify(ref m) if m.contains("ratio")));
        assert!(SplitRatios::new(0.5, 0.5, 0.1).is_err());
        assert!(SplitRatios::new(1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn small_classes_reach_every_part() {
        let all = population(40, 13); // 4 cracks
        let s = stratified_split(&all, SplitRatios::default(), 3, false).unwrap();
        for part in [Part::Train, Part::Val, Part::Test] {
            assert!(s.samples(&all, part).iter().any(|x| x.crack_label.is_crack()));
        }
    }

    #[test]
    fn module_split_keeps_modules_together() {
        let all = population(220, 4);
        let s = stratified_split(&all, SplitRatios::default(), 9, true).unwrap();
        let module_part = |idx: &[usize]| idx.iter().map(|&i| all[i].module.clone().unwrap()).collect::<BTreeSet<_>>();
        let (a, b, c) = (module_part(&s.train), module_part(&s.val), module_part(&s.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        let mut no_modules = all.clone();
        no_modules[5].module = None;
        assert!(stratified_split(&no_modules, SplitRatios::default(), 9, true).is_err());
    }

    #[test]
    fn balanced_stream_is_even() {
        let all = population(200, 10); // 10% crack
        let split = stratified_split(&all, SplitRatios::default(), 4, false).unwrap();
        let stream = TrainingStream::new(&all, &split, 16, true, false, 4).unwrap();
        for epoch in 0..3 {
            let plan = stream.epoch_plan(epoch);
            let crack = plan.iter().filter(|(i, _)| all[*i].crack_label.is_crack()).count();
            let f = crack as f64 / plan.len() as f64;
            assert!((f - 0.5).abs() <= 0.05, "epoch {epoch}: {f}");
            let train: BTreeSet<usize> = split.train.iter().copied().collect();
            assert!(plan.iter().all(|(i, _)| train.contains(i)));
        }
    }

    #[test]
    fn stream_is_deterministic() {
        let all = population(60, 4);
        let split = stratified_split(&all, SplitRatios::default(), 4, false).unwrap();
        let a = TrainingStream::new(&all, &split, 8, false, false, 7).unwrap();
        let b = TrainingStream::new(&all, &split, 8, false, false, 7).unwrap();
        let ea: Vec<Batch> = a.epoch(2).map(Result::unwrap).collect();
        let eb: Vec<Batch> = b.epoch(2).map(Result::unwrap).collect();
        assert_eq!(ea.len(), eb.len());
        for (x, y) in ea.iter().zip(&eb) {
            assert_eq!(x.indices, y.indices);
            assert_eq!(x.images, y.images);
        }
        assert_ne!(a.epoch_plan(0), a.epoch_plan(1));
        assert!(TrainingStream::new(&all, &split, 0, false, false, 7).is_err());
    }

    #[test]
    fn augmentation_preserves_labels_and_pixels() {
        let all = population(60, 2);
        let split = stratified_split(&all, SplitRatios::default(), 4, false).unwrap();
        let stream = TrainingStream::new(&all, &split, 4, true, true, 1).unwrap();
        for batch in stream.epoch(0) {
            let batch = batch.unwrap();
            for (k, i) in batch.indices.iter().enumerate() {
                assert_eq!(batch.labels[k], all[*i].crack_label);
            }
        }
        let img = GrayImage::from_fn(300, 300, |x, y| image::Luma([((x + 2 * y) % 256) as u8]));
        let mut hist_src = [0usize; 256];
        img.pixels().for_each(|p| hist_src[p.0[0] as usize] += 1);
        let mut seen = BTreeSet::new();
        for t in Dihedral::all() {
            let out = t.apply(&img);
            let mut hist = [0usize; 256];
            out.pixels().for_each(|p| hist[p.0[0] as usize] += 1);
            assert_eq!(hist, hist_src);
            seen.insert(out.into_raw());
        }
        assert_eq!(seen.len(), 8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn split_partitions_and_stratifies(seed in any::<u64>()) {
            let all = population(600, 7);
            let s = stratified_split(&all, SplitRatios::default(), seed, false).unwrap();
            let mut every: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            every.sort_unstable();
            prop_assert_eq!(every, (0..all.len()).collect::<Vec<_>>());
            let global = DatasetStats::of(&all).crack_fraction();
            for part in [Part::Train, Part::Val, Part::Test] {
                let f = DatasetStats::of(s.samples(&all, part)).crack_fraction();
                prop_assert!((f - global).abs() <= 0.02, "{:?}: {} vs {}", part, f, global);
            }
        }
    }
}
