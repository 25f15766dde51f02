//! Image pipeline: median filter → resize → augment (training only) → normalize.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SIZE: usize = 256;
pub const DEFAULT_MEDIAN_WINDOW: usize = 3;
pub const STD_FLOOR: f64 = 1e-6;

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}×{})", self.height, self.width)
    }
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("image dimensions must be positive"));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::validation(format!(
                "{}×{} RGB image needs {} bytes, got {}",
                height,
                width,
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Reads PNG or binary PPM (any format the decoder recognises), converted to RGB.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Resolve {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "image file not found"),
            });
        }
        let rgb = image::open(path)?.to_rgb8();
        let (w, h) = rgb.dimensions();
        Image::new(h as usize, w as usize, rgb.into_raw())
    }

    /// Writes PNG, or binary PPM when the extension is `.ppm`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("buffer length checked at construction");
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("ppm") => image::ImageFormat::Pnm,
            _ => image::ImageFormat::Png,
        };
        buf.save_with_format(path, format)?;
        Ok(())
    }
}

/// Per-channel sliding-window median with edge replication.
pub fn median_filter(img: &Image, window: usize) -> Result<Image> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::validation(format!("median window must be odd and positive, got {window}")));
    }
    if window == 1 {
        return Ok(img.clone());
    }
    let (h, w) = (img.height, img.width);
    let r = (window / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0u8; img.pixels.len()];
    out.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        let mut buf = Vec::with_capacity(window * window);
        for x in 0..w {
            for c in 0..3 {
                buf.clear();
                for dy in -r..=r {
                    let sy = clamp(y as isize + dy, h);
                    for dx in -r..=r {
                        let sx = clamp(x as isize + dx, w);
                        buf.push(img.pixels[(sy * w + sx) * 3 + c]);
                    }
                }
                let mid = buf.len() / 2;
                row[x * 3 + c] = *buf.select_nth_unstable(mid).1;
            }
        }
    });
    Ok(Image {
        height: h,
        width: w,
        pixels: out,
    })
}

fn to_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Bilinear sample at continuous pixel-centre coordinates; outside pixels
/// read as `fill` (None replicates the nearest edge).
fn bilinear(img: &Image, sy: f64, sx: f64, c: usize, fill: Option<f64>) -> f64 {
    let (h, w) = (img.height as isize, img.width as isize);
    let y0 = sy.floor();
    let x0 = sx.floor();
    let (fy, fx) = (sy - y0, sx - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let px = |y: isize, x: isize| -> f64 {
        if (0..h).contains(&y) && (0..w).contains(&x) {
            img.get(y as usize, x as usize, c) as f64
        } else if let Some(f) = fill {
            f
        } else {
            img.get(y.clamp(0, h - 1) as usize, x.clamp(0, w - 1) as usize, c) as f64
        }
    };
    let top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1) * fx;
    let bottom = px(y0 + 1, x0) * (1.0 - fx) + px(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize with half-pixel centres, rounded half-up to 8 bits.
/// Aspect ratio is not preserved.
pub fn resize(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::validation("resize target must be positive"));
    }
    if height == img.height && width == img.width {
        return Ok(img.clone());
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let mut out = vec![0u8; height * width * 3];
    out.par_chunks_mut(width * 3).enumerate().for_each(|(y, row)| {
        let src_y = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
        for x in 0..width {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
            for c in 0..3 {
                row[x * 3 + c] = to_u8(bilinear(img, src_y, src_x, c, None));
            }
        }
    });
    Ok(Image {
        height,
        width,
        pixels: out,
    })
}

/// Rotation about the image centre by `degrees` (counter-clockwise), black fill.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.height, img.width);
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0u8; img.pixels.len()];
    out.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = c * dx - s * dy + cx;
            let sy = s * dx + c * dy + cy;
            for ch in 0..3 {
                row[x * 3 + ch] = to_u8(bilinear(img, sy, sx, ch, Some(0.0)));
            }
        }
    });
    Image {
        height: h,
        width: w,
        pixels: out,
    }
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let src = (y * img.width + (img.width - 1 - x)) * 3;
            let dst = (y * img.width + x) * 3;
            out.pixels[dst..dst + 3].copy_from_slice(&img.pixels[src..src + 3]);
        }
    }
    out
}

pub fn flip_vertical(img: &Image) -> Image {
    let row = img.width * 3;
    let mut out = img.clone();
    for y in 0..img.height {
        let src = (img.height - 1 - y) * row;
        out.pixels[y * row..(y + 1) * row].copy_from_slice(&img.pixels[src..src + row]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Side fraction of the crop box, sampled uniformly from this range.
    pub crop_fraction: (f64, f64),
    /// Rotation angle bound in degrees; angles are uniform in `[-r, r]`.
    pub rotation_degrees: f64,
    pub horizontal_flip_prob: f64,
    pub vertical_flip_prob: f64,
    pub seed: u64,
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            crop_fraction: (1.0, 1.0),
            rotation_degrees: 0.0,
            horizontal_flip_prob: 0.0,
            vertical_flip_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_fraction;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::validation(format!("crop fraction range ({lo}, {hi}) must satisfy 0 < lo ≤ hi ≤ 1")));
        }
        if !(self.rotation_degrees >= 0.0 && self.rotation_degrees.is_finite()) {
            return Err(Error::validation("rotation bound must be a finite non-negative angle"));
        }
        for (name, p) in [
            ("horizontal_flip_prob", self.horizontal_flip_prob),
            ("vertical_flip_prob", self.vertical_flip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_fraction: (0.85, 1.0),
            rotation_degrees: 15.0,
            horizontal_flip_prob: 0.5,
            vertical_flip_prob: 0.5,
            seed: 0,
        }
    }
}

/// Random crop (resized back to the input size), rotation, then flips.
///
/// Draws come from a ChaCha stream keyed on `(cfg.seed, sample_index)`, so
/// the result depends only on those two values.
pub fn augment(img: &Image, cfg: &AugmentConfig, sample_index: u64) -> Result<Image> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(sample_index);
    let (lo, hi) = cfg.crop_fraction;
    let frac = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let ch = ((img.height as f64 * frac).round() as usize).clamp(1, img.height);
    let cw = ((img.width as f64 * frac).round() as usize).clamp(1, img.width);
    let oy = rng.random_range(0..=img.height - ch);
    let ox = rng.random_range(0..=img.width - cw);
    let angle = if cfg.rotation_degrees > 0.0 {
        rng.random_range(-cfg.rotation_degrees..=cfg.rotation_degrees)
    } else {
        0.0
    };
    let hflip = rng.random::<f64>() < cfg.horizontal_flip_prob;
    let vflip = rng.random::<f64>() < cfg.vertical_flip_prob;

    let mut out = if ch == img.height && cw == img.width {
        img.clone()
    } else {
        let mut crop = Vec::with_capacity(ch * cw * 3);
        for y in oy..oy + ch {
            let start = (y * img.width + ox) * 3;
            crop.extend_from_slice(&img.pixels[start..start + cw * 3]);
        }
        resize(&Image::new(ch, cw, crop)?, img.height, img.width)?
    };
    out = rotate(&out, angle);
    if hflip {
        out = flip_horizontal(&out);
    }
    if vflip {
        out = flip_vertical(&out);
    }
    Ok(out)
}

/// Per-channel mean and standard deviation in `[0, 1]` pixel scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub const UNIT: NormStats = NormStats {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::validation(format!("normalization std must be positive, got {:?}", self.std)));
        }
        Ok(())
    }
}

/// `(pixel/255 − mean_c) / std_c`, laid out as `[3, H, W]`.
pub fn normalize(img: &Image, stats: &NormStats) -> Result<Tensor<f32>> {
    stats.validate()?;
    let plane = img.height * img.width;
    let mut data = vec![0f32; 3 * plane];
    for c in 0..3 {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for (i, px) in img.pixels.chunks_exact(3).enumerate() {
            data[c * plane + i] = ((px[c] as f64 / 255.0 - m) / s) as f32;
        }
    }
    Tensor::new(&[3, img.height, img.width], data)
}

/// Inverse of [`normalize`], rounded and clamped to 8 bits.
pub fn denormalize(t: &Tensor<f32>, stats: &NormStats) -> Result<Image> {
    stats.validate()?;
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension {
            op: "denormalize",
            axis: "channels",
            expected: 3,
            actual: s.first().copied().unwrap_or(0),
        });
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut pixels = vec![0u8; 3 * plane];
    for c in 0..3 {
        for i in 0..plane {
            let v = (t.data()[c * plane + i] as f64 * stats.std[c] + stats.mean[c]) * 255.0;
            pixels[i * 3 + c] = to_u8(v);
        }
    }
    Image::new(h, w, pixels)
}

/// Result of [`dataset_stats`]; `degenerate` marks channels whose std hit the floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub stats: NormStats,
    pub degenerate: bool,
}

/// Streaming per-channel population statistics.
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    count: u64,
    sum: [f64; 3],
    sum_sq: [f64; 3],
}

impl StatsAccumulator {
    pub fn add(&mut self, img: &Image) {
        for px in img.pixels.chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as f64 / 255.0;
                self.sum[c] += v;
                self.sum_sq[c] += v * v;
            }
        }
        self.count += (img.height * img.width) as u64;
    }

    pub fn finish(&self) -> Result<DatasetStats> {
        if self.count == 0 {
            return Err(Error::validation("dataset statistics need at least one image"));
        }
        let n = self.count as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        let mut degenerate = false;
        for c in 0..3 {
            mean[c] = self.sum[c] / n;
            let var = (self.sum_sq[c] / n - mean[c] * mean[c]).max(0.0);
            std[c] = var.sqrt();
            if std[c] < STD_FLOOR {
                std[c] = STD_FLOOR;
                degenerate = true;
            }
        }
        Ok(DatasetStats {
            stats: NormStats { mean, std },
            degenerate,
        })
    }
}

pub fn dataset_stats<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<DatasetStats> {
    let mut acc = StatsAccumulator::default();
    for img in images {
        acc.add(img);
    }
    acc.finish()
}

/// Median filter then resize to `size`×`size`: the deterministic prefix of the pipeline.
pub fn prepare(img: &Image, median_window: usize, size: usize) -> Result<Image> {
    let filtered = median_filter(img, median_window)?;
    resize(&filtered, size, size)
}
