//! Crack masks from the crack activation map: classification gate, the
//! half-maximum threshold and nearest-neighbour upsampling.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, Luma};
use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::CrackLabel;
use crate::lp_pooling::Exponent;
use crate::model::{classify, Classification, CrackNet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolarityMode {
    Direct,
    /// Threshold the negated map.
    Inverted,
}

impl fmt::Display for PolarityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolarityMode::Direct => "direct",
            PolarityMode::Inverted => "inverted",
        })
    }
}

impl FromStr for PolarityMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "direct" => Ok(PolarityMode::Direct),
            "inverted" | "invert" => Ok(PolarityMode::Inverted),
            other => Err(format!("unknown polarity `{other}` (direct|inverted)")),
        }
    }
}

/// Largest finite exponent for which no default polarity is assumed.
pub const EXPLICIT_POLARITY_MAX_P: f64 = 4.0;

/// Polarity to use for exponent `p`. For `p <= 4` the crack region may show
/// up as low activations, so the caller must choose.
pub fn resolve_polarity(p: Exponent, explicit: Option<PolarityMode>) -> Result<PolarityMode> {
    match (explicit, p) {
        (Some(mode), _) => Ok(mode),
        (None, Exponent::Finite(v)) if v <= EXPLICIT_POLARITY_MAX_P => Err(Error::PolarityRequired(p.label())),
        (None, _) => Ok(PolarityMode::Direct),
    }
}

/// Crack-channel activation map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || values.is_empty() {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width} values"),
                actual: format!("{}", values.len()),
            });
        }
        Ok(Heatmap { height, width, values })
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    }

    /// Per-map min-max normalization to 8 bits (dark = low). A constant map
    /// renders as mid-gray.
    pub fn to_gray(&self) -> GrayImage {
        let (lo, hi) = self.min_max();
        let range = hi - lo;
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.values[y as usize * self.width + x as usize];
            let unit = if range > 0.0 { (v - lo) / range } else { 0.5 };
            Luma([(unit * 255.0).round().clamp(0.0, 255.0) as u8])
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapResult {
    pub heatmap: Heatmap,
    pub classification: Classification,
    pub scores: [f64; 2],
}

/// Crack map and classification of each image in `batch`, from one forward pass.
pub fn extract_heatmaps(model: &CrackNet, batch: &Tensor) -> Result<Vec<HeatmapResult>> {
    let out = model.forward(batch)?;
    let (h, w) = (out.maps.height(), out.maps.width());
    (0..out.maps.batch())
        .map(|n| {
            let values = out.maps.plane(n, CrackLabel::Crack.index()).iter().map(|v| *v as f64).collect();
            Ok(HeatmapResult {
                heatmap: Heatmap::new(h, w, values)?,
                classification: classify(out.scores[n])?,
                scores: out.scores[n],
            })
        })
        .collect()
}

pub fn extract_heatmap(model: &CrackNet, image: &Tensor) -> Result<HeatmapResult> {
    if image.batch() != 1 {
        return Err(Error::ShapeMismatch {
            expected: "a single image".into(),
            actual: format!("{:?}", image.shape()),
        });
    }
    Ok(extract_heatmaps(model, image)?.remove(0))
}

/// Binary mask (entries 0 or 1), row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
    /// Suppressed because the image was classified non-crack.
    pub gated: bool,
}

impl SegmentationMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        SegmentationMask {
            height,
            width,
            data: vec![0; height * width],
            gated: false,
        }
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }
}

/// `1` where the (optionally negated) value is strictly above half the
/// (negated) map's maximum. A constant map yields no foreground.
pub fn threshold_values(values: &[f64], polarity: PolarityMode) -> Result<Vec<u8>> {
    if values.is_empty() {
        return Err(Error::EmptyMap);
    }
    if let Some((index, value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index, value: *value });
    }
    let sign = match polarity {
        PolarityMode::Direct => 1.0,
        PolarityMode::Inverted => -1.0,
    };
    if values.iter().all(|v| *v == values[0]) {
        return Ok(vec![0; values.len()]);
    }
    let max = values.iter().map(|v| sign * v).fold(f64::NEG_INFINITY, f64::max);
    let half = max / 2.0;
    Ok(values.iter().map(|v| u8::from(sign * v > half)).collect())
}

pub fn threshold_mask(heatmap: &Heatmap, polarity: PolarityMode) -> Result<SegmentationMask> {
    Ok(SegmentationMask {
        height: heatmap.height,
        width: heatmap.width,
        data: threshold_values(&heatmap.values, polarity)?,
        gated: false,
    })
}

/// Non-crack images get an empty, gated mask; crack masks pass unchanged.
pub fn apply_gate(label: CrackLabel, mask: SegmentationMask) -> SegmentationMask {
    match label {
        CrackLabel::Crack => mask,
        CrackLabel::NonCrack => SegmentationMask {
            data: vec![0; mask.data.len()],
            gated: true,
            ..mask
        },
    }
}

/// Source index sampled by output index `i` when stretching `src` to `dst`
/// (pixel centres aligned).
pub fn nearest_source(i: usize, src: usize, dst: usize) -> usize {
    ((2 * i + 1) * src / (2 * dst)).min(src - 1)
}

pub fn upsample_mask(mask: &SegmentationMask, target: [usize; 2]) -> Result<SegmentationMask> {
    let [th, tw] = target;
    if th < mask.height || tw < mask.width {
        return Err(Error::UpsampleTarget {
            from: [mask.height, mask.width],
            target,
        });
    }
    let cols: Vec<usize> = (0..tw).map(|x| nearest_source(x, mask.width, tw)).collect();
    let mut data = Vec::with_capacity(th * tw);
    for y in 0..th {
        let sy = nearest_source(y, mask.height, th);
        let row = &mask.data[sy * mask.width..(sy + 1) * mask.width];
        data.extend(cols.iter().map(|&sx| row[sx]));
    }
    Ok(SegmentationMask {
        height: th,
        width: tw,
        data,
        gated: mask.gated,
    })
}

/// Full pipeline for one heatmap: threshold, gate, upsample to `target`.
pub fn segment(result: &HeatmapResult, polarity: PolarityMode, target: [usize; 2]) -> Result<SegmentationMask> {
    let mask = apply_gate(result.classification.label, threshold_mask(&result.heatmap, polarity)?);
    upsample_mask(&mask, target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub image_path: PathBuf,
    pub p: String,
    pub polarity: PolarityMode,
    pub gated: bool,
    pub label: CrackLabel,
    /// Softmax probabilities, `[crack, non-crack]`.
    pub probabilities: [f64; 2],
    pub foreground_pixels: usize,
    pub heatmap_mean: f64,
}

/// Writes `<stem>_mask.png` (0/255) and `<stem>_mask.json` into `dir`.
pub fn export_mask(dir: &Path, stem: &str, mask: &SegmentationMask, sidecar: &MaskSidecar) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let png = dir.join(format!("{stem}_mask.png"));
    mask.to_image().save(&png)?;
    let json = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(dir.join(format!("{stem}_mask.json")), json + "\n")?;
    Ok(png)
}

/// Logs the mean crack activation over `heatmaps`.
pub fn log_mean_activation<'a>(p: Exponent, heatmaps: impl IntoIterator<Item = &'a Heatmap>) -> Option<f64> {
    let means: Vec<f64> = heatmaps.into_iter().map(Heatmap::mean).collect();
    if means.is_empty() {
        return None;
    }
    let mean = means.iter().sum::<f64>() / means.len() as f64;
    info!("p={p}: mean crack activation {mean:.6} over {} maps", means.len());
    Some(mean)
}
