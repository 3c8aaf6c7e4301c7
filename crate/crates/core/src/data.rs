//! Saliency-style segmentation datasets: a seeded synthetic generator and an
//! ingester for `images/` + `masks/` directory pairs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Shape, Tensor};
use crate::scalar::Scalar;

/// Foreground fraction bounds enforced by the synthetic generator.
pub const FOREGROUND_RANGE: (f64, f64) = (0.05, 0.5);
/// Ground-truth pixels at or above this 8-bit value are foreground.
pub const MASK_THRESHOLD: u8 = 128;
const CHANNELS: usize = 3;

/// One image with its binary ground-truth map. Images are channel-major with
/// values in [0, 1]; masks have a single channel of 0/1 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S = f32> {
    pub name: String,
    pub image: Tensor<S>,
    pub mask: Tensor<S>,
}

impl<S: Scalar> Sample<S> {
    pub fn foreground_fraction(&self) -> f64 {
        let fg = self.mask.data().iter().filter(|&&v| v > S::zero()).count();
        fg as f64 / self.mask.data().len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum Provenance {
    Synthetic {
        seed: u64,
        count: usize,
        height: usize,
        width: usize,
    },
    Directory {
        images: PathBuf,
        masks: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<S = f32> {
    pub train: Vec<Sample<S>>,
    pub validation: Vec<Sample<S>>,
    pub test: Vec<Sample<S>>,
    pub provenance: Provenance,
}

impl<S: Scalar> DatasetSplit<S> {
    pub fn all(&self) -> impl Iterator<Item = &Sample<S>> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    /// 50% / 10% / 40%, the proportions of a 2500/500/2000 split.
    fn default() -> Self {
        SplitFractions {
            train: 0.5,
            validation: 0.1,
            test: 0.4,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f))
            || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            return Err(Error::InvalidConfig(format!(
                "split fractions {parts:?} must be in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }

    /// Train and validation sizes round down; the test split takes the rest.
    pub fn sizes(&self, count: usize) -> (usize, usize, usize) {
        let take = |f: f64| ((count as f64 * f) + 1e-9).floor() as usize;
        let train = take(self.train).min(count);
        let validation = take(self.validation).min(count - train);
        (train, validation, count - train - validation)
    }
}

fn split_samples<S>(mut samples: Vec<Sample<S>>, fractions: &SplitFractions, provenance: Provenance) -> DatasetSplit<S> {
    let (train, validation, _) = fractions.sizes(samples.len());
    let test = samples.split_off(train + validation);
    let validation_set = samples.split_off(train);
    DatasetSplit {
        train: samples,
        validation: validation_set,
        test,
        provenance,
    }
}

#[derive(Clone, Copy, Debug)]
enum Figure {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { cy: f64, cx: f64, ry: f64, rx: f64 },
    Triangle([(f64, f64); 3]),
}

impl Figure {
    fn random(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Self {
        let (h, w) = (height as f64, width as f64);
        let ry = rng.random_range(0.1 * h..0.3 * h);
        let rx = rng.random_range(0.1 * w..0.3 * w);
        // bounding box stays within [0, h-1] x [0, w-1]
        let cy = rng.random_range(ry..=(h - 1.0 - ry));
        let cx = rng.random_range(rx..=(w - 1.0 - rx));
        match rng.random_range(0..3) {
            0 => Figure::Ellipse { cy, cx, ry, rx },
            1 => Figure::Rect { cy, cx, ry, rx },
            _ => {
                let start = rng.random_range(0.0..std::f64::consts::TAU);
                let vertex = |k: f64| {
                    let angle = start + k * std::f64::consts::TAU / 3.0;
                    (cy + ry * angle.sin(), cx + rx * angle.cos())
                };
                Figure::Triangle([vertex(0.0), vertex(1.0), vertex(2.0)])
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Figure::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
            Figure::Rect { cy, cx, ry, rx } => (y - cy).abs() <= ry && (x - cx).abs() <= rx,
            Figure::Triangle([a, b, c]) => {
                let side = |p: (f64, f64), q: (f64, f64)| (q.1 - p.1) * (y - p.0) - (q.0 - p.0) * (x - p.1);
                let (d1, d2, d3) = (side(a, b), side(b, c), side(c, a));
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

/// Bilinearly upsampled coarse random grid: a smooth field in `[-amp, amp]`.
fn smooth_noise(rng: &mut ChaCha8Rng, height: usize, width: usize, amp: f64) -> Vec<f64> {
    const GRID: usize = 5;
    let grid: Vec<f64> = (0..GRID * GRID).map(|_| rng.random_range(-amp..amp)).collect();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let gy = y as f64 / (height - 1) as f64 * (GRID - 1) as f64;
        let y0 = gy.floor().min((GRID - 2) as f64) as usize;
        let ty = gy - y0 as f64;
        for x in 0..width {
            let gx = x as f64 / (width - 1) as f64 * (GRID - 1) as f64;
            let x0 = gx.floor().min((GRID - 2) as f64) as usize;
            let tx = gx - x0 as f64;
            let at = |r: usize, c: usize| grid[r * GRID + c];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn synthetic_sample(rng: &mut ChaCha8Rng, name: String, height: usize, width: usize) -> Sample<f32> {
    let plane = height * width;
    let (figures, mask) = loop {
        let n = rng.random_range(1..=3);
        let figures: Vec<Figure> = (0..n).map(|_| Figure::random(rng, height, width)).collect();
        let mut mask = vec![usize::MAX; plane];
        let mut fg = 0usize;
        for y in 0..height {
            for x in 0..width {
                if let Some(i) = figures.iter().rposition(|f| f.contains(y as f64, x as f64)) {
                    mask[y * width + x] = i;
                    fg += 1;
                }
            }
        }
        let fraction = fg as f64 / plane as f64;
        if (FOREGROUND_RANGE.0..=FOREGROUND_RANGE.1).contains(&fraction) {
            break (figures, mask);
        }
    };

    let mut image = vec![0.0f32; CHANNELS * plane];
    let colours: Vec<[f64; CHANNELS]> = figures
        .iter()
        .map(|_| {
            let mean: f64 = rng.random_range(0.65..0.95);
            std::array::from_fn(|_| (mean + rng.random_range(-0.05f64..0.05)).clamp(0.0, 1.0))
        })
        .collect();
    for c in 0..CHANNELS {
        let base = rng.random_range(0.1..0.4);
        let field = smooth_noise(rng, height, width, 0.1);
        for p in 0..plane {
            let value = match mask[p] {
                usize::MAX => base + field[p],
                i => colours[i][c],
            } + rng.random_range(-0.03..0.03);
            image[c * plane + p] = value.clamp(0.0, 1.0) as f32;
        }
    }
    let mask: Vec<f32> = mask.iter().map(|&i| if i == usize::MAX { 0.0 } else { 1.0 }).collect();
    Sample {
        name,
        image: Tensor::new(Shape::new(CHANNELS, height, width), image).expect("sized by construction"),
        mask: Tensor::new(Shape::new(1, height, width), mask).expect("sized by construction"),
    }
}

/// Generates `count` RGB samples: a smooth noisy background with one to three
/// brighter filled ellipses, rectangles or triangles whose union is the mask.
/// Split 50/10/40 into train/validation/test. Deterministic per seed.
pub fn generate_synthetic(seed: u64, count: usize, height: usize, width: usize) -> Result<DatasetSplit<f32>> {
    if count < 3 {
        return Err(Error::RejectedInput(format!("count must be at least 3, got {count}")));
    }
    if height < 16 || width < 16 {
        return Err(Error::RejectedInput(format!(
            "height and width must be at least 16, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|i| synthetic_sample(&mut rng, format!("sample-{i:05}"), height, width))
        .collect();
    Ok(split_samples(
        samples,
        &SplitFractions::default(),
        Provenance::Synthetic {
            seed,
            count,
            height,
            width,
        },
    ))
}

fn list_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Ingestion {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut stems = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        if stems.insert(stem.clone(), path.clone()).is_some() {
            return Err(Error::Ingestion {
                path,
                reason: format!("basename {stem} appears more than once"),
            });
        }
    }
    Ok(stems)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads `images/<name>.<ext>` paired with `masks/<name>.<ext>`, sorted by
/// name. Images are converted to RGB in [0, 1]; masks are binarised at 128.
/// With `resize`, both are resampled to `(height, width)`.
pub fn load_directory(
    images: &Path,
    masks: &Path,
    fractions: &SplitFractions,
    resize: Option<(usize, usize)>,
) -> Result<DatasetSplit<f32>> {
    fractions.validate()?;
    let image_files = list_stems(images)?;
    let mask_files = list_stems(masks)?;
    let unmatched: Vec<&String> = image_files
        .keys()
        .filter(|k| !mask_files.contains_key(*k))
        .chain(mask_files.keys().filter(|k| !image_files.contains_key(*k)))
        .collect();
    if let Some(first) = unmatched.first() {
        let names: Vec<&str> = unmatched.iter().map(|s| s.as_str()).collect();
        return Err(Error::Ingestion {
            path: image_files
                .get(*first)
                .or_else(|| mask_files.get(*first))
                .cloned()
                .unwrap_or_default(),
            reason: format!("no matching image/mask pair for: {}", names.join(", ")),
        });
    }

    let mut samples = Vec::with_capacity(image_files.len());
    for (name, image_path) in &image_files {
        let mask_path = &mask_files[name];
        let mut rgb = open_image(image_path)?.to_rgb8();
        let mut gray = open_image(mask_path)?.to_luma8();
        if rgb.dimensions() != gray.dimensions() {
            return Err(Error::Ingestion {
                path: mask_path.clone(),
                reason: format!(
                    "mask is {:?} but image {name} is {:?}",
                    gray.dimensions(),
                    rgb.dimensions()
                ),
            });
        }
        if let Some((h, w)) = resize {
            rgb = image::imageops::resize(&rgb, w as u32, h as u32, image::imageops::FilterType::Triangle);
            gray = image::imageops::resize(&gray, w as u32, h as u32, image::imageops::FilterType::Nearest);
        }
        samples.push(sample_from_rasters(name.clone(), &rgb, &gray));
    }
    Ok(split_samples(
        samples,
        fractions,
        Provenance::Directory {
            images: images.to_path_buf(),
            masks: masks.to_path_buf(),
        },
    ))
}

fn sample_from_rasters(name: String, rgb: &RgbImage, gray: &GrayImage) -> Sample<f32> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let mut image = vec![0.0f32; CHANNELS * plane];
    for (p, px) in rgb.pixels().enumerate() {
        for c in 0..CHANNELS {
            image[c * plane + p] = f32::from(px.0[c]) / 255.0;
        }
    }
    let mask = gray
        .pixels()
        .map(|px| if px.0[0] >= MASK_THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    Sample {
        name,
        image: Tensor::new(Shape::new(CHANNELS, h, w), image).expect("sized by construction"),
        mask: Tensor::new(Shape::new(1, h, w), mask).expect("sized by construction"),
    }
}

pub(crate) fn to_u8(value: f64) -> u8 {
    (value.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a single-channel map in [0, 1] as an 8-bit grayscale PNG.
pub fn write_gray_png<S: Scalar>(map: &Tensor<S>, path: &Path) -> Result<()> {
    let shape = map.shape();
    let pixels = map.data()[..shape.plane()]
        .iter()
        .map(|v| to_u8(v.to_f64_lossy()))
        .collect();
    let img = GrayImage::from_raw(shape.width as u32, shape.height as u32, pixels)
        .expect("buffer sized from shape");
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Writes every sample in split order as `images/<name>.png` and `masks/<name>.png`.
pub fn write_directory(split: &DatasetSplit<f32>, out: &Path) -> Result<()> {
    let images = out.join("images");
    let masks = out.join("masks");
    for dir in [&images, &masks] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for sample in split.all() {
        let shape = sample.image.shape();
        let plane = shape.plane();
        let data = sample.image.data();
        let mut raw = Vec::with_capacity(plane * CHANNELS);
        for p in 0..plane {
            for c in 0..shape.channels.min(CHANNELS) {
                raw.push(to_u8(f64::from(data[c * plane + p])));
            }
        }
        let path = images.join(format!("{}.png", sample.name));
        let img = RgbImage::from_raw(shape.width as u32, shape.height as u32, raw)
            .expect("buffer sized from shape");
        img.save(&path).map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        write_gray_png(&sample.mask, &masks.join(format!("{}.png", sample.name)))?;
    }
    Ok(())
}
