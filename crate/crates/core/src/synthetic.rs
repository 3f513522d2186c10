//! Synthetic line-vs-noise cells: a bright diagonal line on noise is a
//! crack, plain noise is not. The line's pixels are known exactly.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{CellType, DefectProbability, ImageSample, CELL_SIDE};
use crate::error::Result;
use crate::label::CrackLabel;

const BACKGROUND_MEAN: f64 = 100.0;
const BACKGROUND_STD: f64 = 20.0;
const LINE_MEAN: f64 = 225.0;
const LINE_STD: f64 = 10.0;
/// Pixels within this distance of the line's center are drawn.
const LINE_HALF_WIDTH: f64 = 8.0;

#[derive(Debug, Clone)]
pub struct SyntheticCell {
    pub sample: ImageSample,
    /// Row-major 300×300 mask of the drawn line; `None` for noise cells.
    pub line_mask: Option<Vec<bool>>,
}

impl SyntheticCell {
    pub fn line_pixels(&self) -> usize {
        self.line_mask.as_ref().map_or(0, |m| m.iter().filter(|b| **b).count())
    }
}

/// `count` cells alternating crack (even index) and non-crack.
pub fn line_vs_noise(count: usize, seed: u64) -> Vec<SyntheticCell> {
    (0..count).map(|i| cell(i, i % 2 == 0, seed)).collect()
}

/// `count` crack cells from a seed stream disjoint from [`line_vs_noise`].
pub fn crack_cells(count: usize, seed: u64) -> Vec<SyntheticCell> {
    (0..count).map(|i| cell(i + (1 << 20), true, seed)).collect()
}

fn cell(index: usize, crack: bool, seed: u64) -> SyntheticCell {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let background = Normal::new(BACKGROUND_MEAN, BACKGROUND_STD).expect("valid normal");
    let line = Normal::new(LINE_MEAN, LINE_STD).expect("valid normal");
    let side = CELL_SIDE as u32;
    let mut pixels = GrayImage::from_fn(side, side, |_, _| Luma([clamp(background.sample(&mut rng))]));
    let line_mask = crack.then(|| {
        // y = x + offset, or the anti-diagonal y = (side - 1 - x) + offset
        let anti = rng.gen_bool(0.5);
        let offset: f64 = rng.gen_range(-80.0..80.0);
        let mut mask = vec![false; CELL_SIDE * CELL_SIDE];
        for y in 0..CELL_SIDE {
            for x in 0..CELL_SIDE {
                let xf = if anti { (CELL_SIDE - 1 - x) as f64 } else { x as f64 };
                let dist = (y as f64 - xf - offset).abs() / std::f64::consts::SQRT_2;
                if dist <= LINE_HALF_WIDTH {
                    mask[y * CELL_SIDE + x] = true;
                    pixels.put_pixel(x as u32, y as u32, Luma([clamp(line.sample(&mut rng))]));
                }
            }
        }
        mask
    });
    let label = if crack { CrackLabel::Crack } else { CrackLabel::NonCrack };
    let sample = ImageSample {
        image_path: PathBuf::from(format!("images/synthetic_{index:07}.png")),
        pixels,
        cell_type: if index % 4 < 2 { CellType::Mono } else { CellType::Poly },
        defect_probability: DefectProbability::from_thirds(if crack { 3 } else { 0 }).expect("valid level"),
        crack_label: label,
        proxy_label: false,
        module: Some(format!("synthetic{}", index % 8)),
    };
    SyntheticCell { sample, line_mask }
}

fn clamp(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Writes `cells` as a dataset directory: PNG images, the index
/// (`labels.csv`), the crack labels file (`crack_labels.csv`) and the line
/// masks (`masks/*.png`, 0/255).
pub fn write_dataset(dir: &Path, cells: &[SyntheticCell]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut index = String::new();
    let mut labels = String::from("path,crack_label\n");
    for c in cells {
        let s = &c.sample;
        s.pixels.save(dir.join(&s.image_path))?;
        index.push_str(&format!(
            "{}  {}  {}  {}\n",
            s.image_path.display(),
            s.defect_probability.value(),
            s.cell_type,
            s.module.as_deref().unwrap_or("synthetic")
        ));
        labels.push_str(&format!("{},{}\n", s.image_path.display(), s.crack_label));
        if let Some(mask) = &c.line_mask {
            let img = GrayImage::from_fn(CELL_SIDE as u32, CELL_SIDE as u32, |x, y| {
                Luma([if mask[y as usize * CELL_SIDE + x as usize] { 255 } else { 0 }])
            });
            let name = s.image_path.file_name().expect("file name");
            img.save(dir.join("masks").join(name))?;
        }
    }
    std::fs::write(dir.join("labels.csv"), index)?;
    std::fs::write(dir.join("crack_labels.csv"), labels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = line_vs_noise(10, 3);
        let b = line_vs_noise(10, 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sample, y.sample);
        }
        assert_eq!(a.iter().filter(|c| c.sample.crack_label.is_crack()).count(), 5);
        assert_ne!(line_vs_noise(1, 4)[0].sample.pixels, a[0].sample.pixels);
    }

    #[test]
    fn line_is_bright_and_long() {
        for c in crack_cells(4, 1) {
            let mask = c.line_mask.as_ref().unwrap();
            assert!(c.line_pixels() > 1000, "{}", c.line_pixels());
            let raw = c.sample.pixels.as_raw();
            let (on, off): (Vec<_>, Vec<_>) = (0..raw.len()).partition(|i| mask[*i]);
            let mean = |v: &[usize]| v.iter().map(|i| raw[*i] as f64).sum::<f64>() / v.len() as f64;
            assert!(mean(&on) > 200.0 && mean(&off) < 120.0);
        }
        assert!(line_vs_noise(2, 1)[1].line_mask.is_none());
    }
}
