//! PNG image IO, random cropping, and the procedural toy dataset.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylestego_nn::Tensor;

use crate::error::{Result, StegoError};

fn image_err(path: &Path, reason: impl ToString) -> StegoError {
    StegoError::Image { path: path.to_path_buf(), reason: reason.to_string() }
}

/// Maps a [-1, 1] value to an 8-bit level.
pub fn quantize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8
}

pub fn dequantize(q: u8) -> f64 {
    q as f64 / 255.0 * 2.0 - 1.0
}

/// Decodes any RGB(A)/grey image into an `[h, w, 3]` tensor in [-1, 1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(dequantize).collect();
    Ok(Tensor::new(&[h as usize, w as usize, 3], data)?)
}

/// Snaps a tensor to the 8-bit grid a PNG round trip would give.
pub fn quantize_tensor(t: &Tensor) -> Tensor {
    t.map(|v| dequantize(quantize(v)))
}

/// Writes an 8-bit RGB PNG. Any other extension is refused, since lossy
/// formats would destroy the hidden signal.
pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if !is_png {
        return Err(image_err(path, "only lossless .png output is supported"));
    }
    let (h, w, _) = t.hwc()?;
    if t.shape()[2] != 3 {
        return Err(image_err(path, format!("expected 3 channels, got {}", t.shape()[2])));
    }
    let img = RgbImage::from_raw(w as u32, h as u32, t.data().iter().map(|&v| quantize(v)).collect())
        .ok_or_else(|| image_err(path, "buffer size mismatch"))?;
    img.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// `crop x crop` window with top-left corner `(y, x)`.
pub fn crop_at(img: &Tensor, y: usize, x: usize, crop: usize) -> Result<Tensor> {
    let (h, w, c) = img.hwc()?;
    if y + crop > h || x + crop > w {
        return Err(StegoError::Shape(format!("crop {crop} at ({y}, {x}) exceeds a {h}x{w} image")));
    }
    let mut out = Vec::with_capacity(crop * crop * c);
    for r in y..y + crop {
        let start = (r * w + x) * c;
        out.extend_from_slice(&img.data()[start..start + crop * c]);
    }
    Ok(Tensor::new(&[crop, crop, c], out)?)
}

pub fn random_crop<R: Rng + ?Sized>(img: &Tensor, crop: usize, rng: &mut R) -> Result<Tensor> {
    let (h, w, _) = img.hwc()?;
    if h < crop || w < crop {
        return Err(StegoError::Dataset(format!("{h}x{w} image is smaller than the {crop} px crop")));
    }
    let y = rng.random_range(0..=h - crop);
    let x = rng.random_range(0..=w - crop);
    crop_at(img, y, x, crop)
}

/// Images of one dataset, all at least `crop` pixels on each side.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub names: Vec<String>,
}

impl Dataset {
    /// Loads every readable image in `dir` (sorted by file name). Unreadable
    /// files and images smaller than `crop` are skipped with a warning.
    pub fn load(dir: &Path, crop: usize) -> Result<Self> {
        let entries = std::fs::read_dir(dir)
            .map_err(|e| StegoError::Dataset(format!("cannot read {}: {e}", dir.display())))?;
        let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
        paths.sort();
        let mut images = Vec::new();
        let mut names = Vec::new();
        for p in paths {
            match load_image(&p) {
                Ok(t) if t.shape()[0] >= crop && t.shape()[1] >= crop => {
                    images.push(t);
                    names.push(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
                }
                Ok(t) => warn!(
                    "skipping {}: {}x{} is smaller than the {crop} px crop",
                    p.display(),
                    t.shape()[0],
                    t.shape()[1]
                ),
                Err(e) => warn!("skipping {}: {e}", p.display()),
            }
        }
        if images.is_empty() {
            return Err(StegoError::Dataset(format!(
                "no usable images of at least {crop}x{crop} in {}",
                dir.display()
            )));
        }
        Ok(Self { images, names })
    }

    pub fn from_images(images: Vec<Tensor>, crop: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(StegoError::Dataset("dataset is empty".into()));
        }
        for (i, t) in images.iter().enumerate() {
            let (h, w, c) = t.hwc()?;
            if h < crop || w < crop || c != 3 {
                return Err(StegoError::Dataset(format!("image {i} is {h}x{w}x{c}, need RGB of at least {crop}")));
            }
        }
        let names = (0..images.len()).map(|i| format!("image_{i}")).collect();
        Ok(Self { images, names })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `n` random crops of uniformly chosen images.
    pub fn crops<R: Rng + ?Sized>(&self, n: usize, crop: usize, rng: &mut R) -> Result<Vec<Tensor>> {
        (0..n)
            .map(|_| {
                let i = rng.random_range(0..self.images.len());
                random_crop(&self.images[i], crop, rng)
            })
            .collect()
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let f = h.fract();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render(size: usize, mut px: impl FnMut(f64, f64) -> [f64; 3]) -> Tensor {
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let [r, g, b] = px(x as f64 / size as f64, y as f64 / size as f64);
            data.extend([r, g, b].map(|v| v.clamp(0.0, 1.0) * 2.0 - 1.0));
        }
    }
    Tensor::new(&[size, size, 3], data).expect("size is positive")
}

/// Procedural "photo-like" content texture number `index`: smooth colour
/// fields overlaid with one of several structured patterns.
pub fn toy_content(index: usize, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0_47e7 + index as u64);
    let hue = rng.random::<f64>();
    let freq = rng.random_range(2.0..7.0);
    let angle = rng.random_range(0.0..PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let blobs: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| (rng.random(), rng.random(), rng.random_range(0.05..0.25), rng.random_range(-0.4..0.4)))
        .collect();
    let grain: Vec<f64> = (0..size * size).map(|_| rng.random_range(-0.04..0.04)).collect();
    let kind = index % 4;
    let mut i = 0;
    render(size, |x, y| {
        let u = x * ca + y * sa;
        let pattern = match kind {
            0 => (2.0 * PI * freq * u).sin() * 0.25,
            1 => {
                let cx = ((x * freq * 1.5).floor() + (y * freq * 1.5).floor()) as i64;
                if cx % 2 == 0 { 0.2 } else { -0.2 }
            }
            2 => ((2.0 * PI * freq * x).sin() * (2.0 * PI * freq * y).cos()) * 0.3,
            _ => (2.0 * PI * freq * ((x - 0.5).powi(2) + (y - 0.5).powi(2)).sqrt() * 2.0).sin() * 0.25,
        };
        let blob: f64 = blobs
            .iter()
            .map(|&(bx, by, r, a)| a * (-((x - bx).powi(2) + (y - by).powi(2)) / (r * r)).exp())
            .sum();
        let n = grain[i];
        i += 1;
        let base = hsv(hue + 0.15 * blob + 0.1 * u, 0.5 + 0.3 * pattern, 0.55 + pattern + blob);
        base.map(|c| c + n)
    })
}

/// Procedural "painting" number `index`: a small palette laid down in
/// oriented strokes.
pub fn toy_style(index: usize, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0x57_11e0 + index as u64);
    let base_hue = rng.random::<f64>();
    let palette: Vec<[f64; 3]> = (0..4)
        .map(|k| hsv(base_hue + 0.08 * k as f64, rng.random_range(0.5..0.9), rng.random_range(0.35..0.95)))
        .collect();
    let angle = rng.random_range(0.0..PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let stroke = rng.random_range(10.0..24.0);
    let wobble = rng.random_range(2.0..6.0);
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    render(size, |x, y| {
        let along = x * ca + y * sa;
        let across = -x * sa + y * ca;
        let band = (across * stroke + 0.6 * (2.0 * PI * wobble * along + phase).sin()).floor();
        let idx = (band.rem_euclid(palette.len() as f64)) as usize;
        let streak = 0.06 * (2.0 * PI * 3.0 * stroke * along).sin();
        palette[idx].map(|c| c + streak)
    })
}

/// Writes `n_content` content and `n_style` style PNGs of `size` pixels
/// under `dir/content` and `dir/style`.
pub fn write_toy_dataset(dir: &Path, n_content: usize, n_style: usize, size: usize) -> Result<()> {
    let content = dir.join("content");
    let style = dir.join("style");
    std::fs::create_dir_all(&content)?;
    std::fs::create_dir_all(&style)?;
    for i in 0..n_content {
        save_png(&content.join(format!("content_{i:02}.png")), &toy_content(i, size))?;
    }
    for i in 0..n_style {
        save_png(&style.join(format!("style_{i:02}.png")), &toy_style(i, size))?;
    }
    Ok(())
}
