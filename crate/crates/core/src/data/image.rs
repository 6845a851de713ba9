//! RGB images in planar `[0, 1]` floats, PPM (P6) I/O, and the two
//! augmentations: random resized crop and a reduced RandAugment.

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square RGB image, channel-planar (`c·S·S + y·S + x`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if size == 0 || data.len() != 3 * size * size {
            return Err(Error::InvalidShape {
                shape: vec![3, size, size],
                reason: format!("{} values", data.len()),
            });
        }
        Ok(Image { size, data })
    }

    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let plane = size * size;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Image { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.size + y) * self.size + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.size + y) * self.size + x] = v;
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// P6 bytes, maxval 255.
    pub fn to_ppm(&self) -> Vec<u8> {
        let s = self.size;
        let mut out = format!("P6\n{s} {s}\n255\n").into_bytes();
        out.reserve(3 * s * s);
        for y in 0..s {
            for x in 0..s {
                for c in 0..3 {
                    out.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
        }
        pos += 1; // single whitespace byte before the raster
        if fields[0] != "P6" {
            return Err(Error::Format(format!("expected P6 magic, found {:?}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM number {s:?}")));
        let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if w != h || w == 0 {
            return Err(Error::Format(format!("expected a square image, got {w}×{h}")));
        }
        if max != 255 {
            return Err(Error::Format(format!("expected maxval 255, got {max}")));
        }
        let raster = bytes
            .get(pos..pos + 3 * w * h)
            .ok_or_else(|| Error::Format("truncated PPM raster".into()))?;
        let mut img = Image::filled(w, [0.0; 3]);
        for (p, px) in raster.chunks_exact(3).enumerate() {
            for (c, &b) in px.iter().enumerate() {
                img.data[c * w * h + p] = f32::from(b) / 255.0;
            }
        }
        Ok(img)
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_ppm(&bytes)
    }

    /// Bilinear sample of the window `(x0, y0, w, h)` resized to `out × out`
    /// (half-pixel centres, edges clamped).
    pub fn resized_crop(&self, rect: CropRect, out: usize) -> Image {
        let mut dst = Image::filled(out, [0.0; 3]);
        let sx = rect.w as f32 / out as f32;
        let sy = rect.h as f32 / out as f32;
        let last = (self.size - 1) as f32;
        for oy in 0..out {
            let fy = (rect.y0 as f32 + (oy as f32 + 0.5) * sy - 0.5).clamp(0.0, last);
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(self.size - 1);
            for ox in 0..out {
                let fx = (rect.x0 as f32 + (ox as f32 + 0.5) * sx - 0.5).clamp(0.0, last);
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(self.size - 1);
                for c in 0..3 {
                    let top = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
                    let bot = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
                    dst.set(c, oy, ox, top * (1.0 - ty) + bot * ty);
                }
            }
        }
        dst
    }
}

/// Crop window in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    Flip,
    Rotate90,
    ColorJitter,
    Posterize,
    Cutout,
    Grayscale,
    Contrast,
    Brightness,
}

impl AugOp {
    pub const ALL: [AugOp; 8] = [
        AugOp::Flip,
        AugOp::Rotate90,
        AugOp::ColorJitter,
        AugOp::Posterize,
        AugOp::Cutout,
        AugOp::Grayscale,
        AugOp::Contrast,
        AugOp::Brightness,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub crop: bool,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub rand_augment: bool,
    pub n_ops: usize,
    pub pool: Vec<AugOp>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            crop: true,
            crop_scale: (0.08, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            rand_augment: true,
            n_ops: 2,
            pool: AugOp::ALL.to_vec(),
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            crop: false,
            rand_augment: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        let (rlo, rhi) = self.crop_ratio;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop scale ({lo}, {hi}) must satisfy 0 < lo ≤ hi ≤ 1")));
        }
        if !(0.0 < rlo && rlo <= rhi) {
            return Err(Error::Config(format!("crop ratio ({rlo}, {rhi}) must satisfy 0 < lo ≤ hi")));
        }
        if self.n_ops > self.pool.len() {
            return Err(Error::Config(format!(
                "cannot draw {} ops from a pool of {}",
                self.n_ops,
                self.pool.len()
            )));
        }
        Ok(())
    }
}

/// Samples a crop window: area fraction uniform in `crop_scale`, aspect
/// log-uniform in `crop_ratio`, position uniform. After 10 rejected draws
/// falls back to the largest centred window whose aspect lies in bounds.
pub fn sample_crop<R: Rng + ?Sized>(size: usize, policy: &AugmentPolicy, rng: &mut R) -> CropRect {
    let area = (size * size) as f64;
    let (lo, hi) = policy.crop_scale;
    let (rlo, rhi) = (policy.crop_ratio.0.ln(), policy.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let aspect = if rhi > rlo { rng.random_range(rlo..=rhi) } else { rlo }.exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if (1..=size).contains(&w) && (1..=size).contains(&h) {
            let x0 = rng.random_range(0..=size - w);
            let y0 = rng.random_range(0..=size - h);
            return CropRect { x0, y0, w, h };
        }
    }
    let (w, h) = if 1.0 < policy.crop_ratio.0 {
        (size, ((size as f64) / policy.crop_ratio.0).round() as usize)
    } else if 1.0 > policy.crop_ratio.1 {
        (((size as f64) * policy.crop_ratio.1).round() as usize, size)
    } else {
        (size, size)
    };
    let (w, h) = (w.max(1), h.max(1));
    CropRect {
        x0: (size - w) / 2,
        y0: (size - h) / 2,
        w,
        h,
    }
}

pub fn random_resized_crop<R: Rng + ?Sized>(img: &Image, policy: &AugmentPolicy, rng: &mut R) -> Result<Image> {
    if img.size() < 8 {
        return Err(Error::invalid(format!("image side {} is below 8", img.size())));
    }
    let rect = sample_crop(img.size(), policy, rng);
    Ok(img.resized_crop(rect, img.size()))
}

fn apply_op<R: Rng + ?Sized>(img: &mut Image, op: AugOp, rng: &mut R) {
    let s = img.size();
    match op {
        AugOp::Flip => {
            for c in 0..3 {
                for y in 0..s {
                    for x in 0..s / 2 {
                        let (a, b) = (img.get(c, y, x), img.get(c, y, s - 1 - x));
                        img.set(c, y, x, b);
                        img.set(c, y, s - 1 - x, a);
                    }
                }
            }
        }
        AugOp::Rotate90 => {
            let src = img.clone();
            for c in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        img.set(c, y, x, src.get(c, s - 1 - x, y));
                    }
                }
            }
        }
        AugOp::ColorJitter => {
            let gains: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.8..1.2));
            for (c, g) in gains.iter().enumerate() {
                for v in &mut img.data[c * s * s..(c + 1) * s * s] {
                    *v *= g;
                }
            }
        }
        AugOp::Posterize => {
            let levels = 2f32.powi(rng.random_range(2..=4));
            for v in &mut img.data {
                *v = (*v * levels).floor().min(levels - 1.0) / (levels - 1.0);
            }
        }
        AugOp::Cutout => {
            let k = s / 4;
            let (x0, y0) = (rng.random_range(0..=s - k), rng.random_range(0..=s - k));
            for c in 0..3 {
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        img.set(c, y, x, 0.5);
                    }
                }
            }
        }
        AugOp::Grayscale => {
            let plane = s * s;
            for p in 0..plane {
                let g = 0.299 * img.data[p] + 0.587 * img.data[plane + p] + 0.114 * img.data[2 * plane + p];
                for c in 0..3 {
                    img.data[c * plane + p] = g;
                }
            }
        }
        AugOp::Contrast => {
            let f = rng.random_range(0.6..1.4);
            let mean = img.data.iter().sum::<f32>() / img.data.len() as f32;
            for v in &mut img.data {
                *v = mean + (*v - mean) * f;
            }
        }
        AugOp::Brightness => {
            let f = rng.random_range(0.6..1.4);
            for v in &mut img.data {
                *v *= f;
            }
        }
    }
}

/// Draws `n_ops` distinct pool entries and applies them in draw order;
/// values are clamped to `[0, 1]`. Returns the ops used.
pub fn rand_augment_lite<R: Rng + ?Sized>(img: &Image, policy: &AugmentPolicy, rng: &mut R) -> Result<(Image, Vec<AugOp>)> {
    policy.validate()?;
    let ops: Vec<AugOp> = index::sample(rng, policy.pool.len(), policy.n_ops)
        .into_iter()
        .map(|i| policy.pool[i])
        .collect();
    let mut out = img.clone();
    for &op in &ops {
        apply_op(&mut out, op, rng);
    }
    out.clamp();
    Ok((out, ops))
}
