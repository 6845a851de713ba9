//! Procedural image–caption data: coloured shapes on plain backgrounds,
//! each image carrying one short "original" caption plus `m` synthetic
//! full-description paraphrases.
//!
//! On disk a split is a directory holding `images/*.ppm`, `vocab.txt` and
//! `manifest.jsonl` (a header line followed by one sample per line).

mod image;
mod vocab;

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use image::{random_resized_crop, rand_augment_lite, sample_crop, AugOp, AugmentPolicy, CropRect, Image};
pub use vocab::{Vocab, PAD};

use crate::autodiff::{Scalar, Tensor};
use crate::encoders::TokenBatch;
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};

pub const IMAGE_SIZE: usize = 32;
/// Longest caption any template can produce, in tokens.
pub const MAX_CAPTION_LEN: usize = 16;
pub const MANIFEST_FORMAT: &str = "siclip-manifest";
pub const MANIFEST_VERSION: u32 = 1;

macro_rules! attribute {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
                Self::ALL[rng.random_range(0..Self::ALL.len())]
            }
        }
    };
}

attribute!(Shape {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
    Cross => "cross",
    Ring => "ring",
});

attribute!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Purple => "purple",
    Orange => "orange",
    Cyan => "cyan",
});

attribute!(Position {
    UpperLeft => "upper left",
    UpperRight => "upper right",
    LowerLeft => "lower left",
    LowerRight => "lower right",
    Center => "center",
});

attribute!(SizeClass {
    Small => "small",
    Medium => "medium",
    Large => "large",
});

attribute!(Background {
    Black => "black",
    Gray => "gray",
    White => "white",
});

impl Color {
    fn rgb(self) -> [f32; 3] {
        let c = match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [50, 80, 220],
            Color::Yellow => [230, 220, 50],
            Color::Purple => [150, 60, 190],
            Color::Orange => [240, 140, 30],
            Color::Cyan => [40, 200, 210],
        };
        c.map(|v| v as f32 / 255.0)
    }
}

impl Background {
    fn rgb(self) -> [f32; 3] {
        let v = match self {
            Background::Black => 20.0,
            Background::Gray => 128.0,
            Background::White => 235.0,
        } / 255.0;
        [v; 3]
    }
}

/// Ground-truth factors of one image. The offset jitters the shape centre
/// within its named region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latents {
    pub shape: Shape,
    pub color: Color,
    pub position: Position,
    pub size: SizeClass,
    pub background: Background,
    pub offset: (i32, i32),
}

impl Latents {
    pub fn draw<R: Rng + ?Sized>(image_size: usize, rng: &mut R) -> Self {
        let j = (image_size / 16) as i32;
        Latents {
            shape: Shape::draw(rng),
            color: Color::draw(rng),
            position: Position::draw(rng),
            size: SizeClass::draw(rng),
            background: Background::draw(rng),
            offset: (rng.random_range(-j..=j), rng.random_range(-j..=j)),
        }
    }

    fn fill(&self, template: &str) -> String {
        template
            .replace("{shape}", self.shape.word())
            .replace("{color}", self.color.word())
            .replace("{pos}", self.position.word())
            .replace("{size}", self.size.word())
            .replace("{bg}", self.background.word())
    }
}

/// Full-description paraphrase templates; the first is the canonical form
/// used for evaluation captions.
pub const SYNTHETIC_TEMPLATES: [&str; 6] = [
    "a {size} {color} {shape} in the {pos} on a {bg} background",
    "{size} {color} {shape} at the {pos} over {bg}",
    "there is a {size} {color} {shape} in the {pos} of a {bg} image",
    "a {bg} picture with a {size} {color} {shape} in the {pos}",
    "the {shape} is {color} and {size} and sits in the {pos} on {bg}",
    "{bg} background {size} {color} {shape} {pos}",
];

/// Short, partial "original" captions, like terse web alt text.
pub const ORIGINAL_TEMPLATES: [&str; 7] = [
    "a photo of a {color} {shape}",
    "a {shape}",
    "a {color} object",
    "a {size} {shape}",
    "something in the {pos}",
    "a {shape} on {bg}",
    "a picture of a {size} thing",
];

pub fn canonical_caption(l: &Latents) -> String {
    l.fill(SYNTHETIC_TEMPLATES[0])
}

/// Caption 0 is an original; captions `1..=m` are synthetic paraphrases,
/// consecutive templates from a random starting point.
pub fn captions_for<R: Rng + ?Sized>(l: &Latents, m: usize, rng: &mut R) -> Vec<String> {
    let original = l.fill(ORIGINAL_TEMPLATES[rng.random_range(0..ORIGINAL_TEMPLATES.len())]);
    let start = rng.random_range(0..SYNTHETIC_TEMPLATES.len());
    std::iter::once(original)
        .chain((0..m).map(|i| l.fill(SYNTHETIC_TEMPLATES[(start + i) % SYNTHETIC_TEMPLATES.len()])))
        .collect()
}

/// Every word any template can emit, plus padding.
pub fn toy_vocab() -> Vocab {
    let mut words: Vec<String> = Vec::new();
    for t in SYNTHETIC_TEMPLATES.iter().chain(ORIGINAL_TEMPLATES.iter()) {
        words.extend(t.split_whitespace().filter(|w| !w.starts_with('{')).map(str::to_string));
    }
    let attrs = Shape::ALL
        .iter()
        .map(|s| s.word())
        .chain(Color::ALL.iter().map(|c| c.word()))
        .chain(Position::ALL.iter().map(|p| p.word()))
        .chain(SizeClass::ALL.iter().map(|s| s.word()))
        .chain(Background::ALL.iter().map(|b| b.word()));
    for a in attrs {
        words.extend(a.split_whitespace().map(str::to_string));
    }
    Vocab::from_words(words)
}

/// Draws the shape described by `l` on its background.
pub fn render(l: &Latents, size: usize) -> Image {
    let mut img = Image::filled(size, l.background.rgb());
    let s = size as f32;
    let (cx, cy) = match l.position {
        Position::UpperLeft => (0.25, 0.25),
        Position::UpperRight => (0.75, 0.25),
        Position::LowerLeft => (0.25, 0.75),
        Position::LowerRight => (0.75, 0.75),
        Position::Center => (0.5, 0.5),
    };
    let cx = cx * s + l.offset.0 as f32;
    let cy = cy * s + l.offset.1 as f32;
    let r = s * match l.size {
        SizeClass::Small => 0.125,
        SizeClass::Medium => 0.1875,
        SizeClass::Large => 0.25,
    };
    let rgb = l.color.rgb();
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let dist = (dx * dx + dy * dy).sqrt();
            let inside = match l.shape {
                Shape::Circle => dist <= r,
                Shape::Ring => dist <= r && dist >= 0.55 * r,
                Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
                Shape::Triangle => dy.abs() <= r && dx.abs() <= 0.5 * (dy + r),
                Shape::Cross => {
                    (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
                }
            };
            if inside {
                for (c, v) in rgb.iter().enumerate() {
                    img.set(c, y, x, *v);
                }
            }
        }
    }
    img
}

/// First line of a manifest file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub vocab: String,
    pub image_size: usize,
    pub synthetic_captions: usize,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: String,
    pub captions: Vec<String>,
    pub latents: Latents,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub samples: Vec<Sample>,
    /// Directory that relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn file_name() -> &'static str {
        "manifest.jsonl"
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(Self::file_name());
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(self.to_text()?.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    /// Loads `manifest.jsonl` from a split directory or a direct file path.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(Self::file_name()) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let f = std::fs::File::open(&file).map_err(|e| Error::io(&file, e))?;
        let mut lines = BufReader::new(f).lines();
        let head = lines
            .next()
            .ok_or_else(|| Error::Format(format!("{}: empty manifest", file.display())))?
            .map_err(|e| Error::io(&file, e))?;
        let header: ManifestHeader = serde_json::from_str(&head)?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported manifest {} v{}",
                file.display(),
                header.format,
                header.version
            )));
        }
        let mut samples = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(&file, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", file.display(), i + 2)))?;
            if s.captions.is_empty() {
                return Err(Error::Format(format!("{} line {}: no captions", file.display(), i + 2)));
            }
            samples.push(s);
        }
        Ok(Manifest { header, samples, root })
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.root.join(&self.header.vocab)
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.samples[i].image)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_split(out_dir: &Path, header: ManifestHeader, samples: Vec<(Sample, Image)>) -> Result<Manifest> {
    let img_dir = out_dir.join("images");
    create_dir(&img_dir)?;
    toy_vocab().save(&out_dir.join(&header.vocab))?;
    let mut list = Vec::with_capacity(samples.len());
    for (s, img) in samples {
        img.save_ppm(&out_dir.join(&s.image))?;
        list.push(s);
    }
    let m = Manifest {
        header,
        samples: list,
        root: out_dir.to_path_buf(),
    };
    m.save()?;
    Ok(m)
}

fn header(seed: u64, m: usize, split: &str) -> ManifestHeader {
    ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        seed,
        vocab: "vocab.txt".into(),
        image_size: IMAGE_SIZE,
        synthetic_captions: m,
        split: split.into(),
    }
}

/// Writes a training split of `n` images with `1 + m` captions each.
pub fn gen_toy_dataset(n: usize, m: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::invalid("dataset needs at least one sample"));
    }
    let samples = (0..n)
        .map(|i| {
            let mut rng = stream(&[seed, i as u64]);
            let l = Latents::draw(IMAGE_SIZE, &mut rng);
            let captions = captions_for(&l, m, &mut rng);
            let s = Sample {
                image: format!("images/{i:06}.ppm"),
                captions,
                latents: l,
            };
            (s, render(&l, IMAGE_SIZE))
        })
        .collect();
    write_split(out_dir, header(seed, m, "train"), samples)
}

/// Writes an evaluation split: one canonical full-description caption per
/// image.
pub fn gen_eval_split(n: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::invalid("dataset needs at least one sample"));
    }
    let samples = (0..n)
        .map(|i| {
            let mut rng = stream(&[seed, i as u64]);
            let l = Latents::draw(IMAGE_SIZE, &mut rng);
            let s = Sample {
                image: format!("images/{i:06}.ppm"),
                captions: vec![canonical_caption(&l)],
                latents: l,
            };
            (s, render(&l, IMAGE_SIZE))
        })
        .collect();
    write_split(out_dir, header(seed, 0, "eval"), samples)
}

/// Uniform choice over all captions of a sample.
pub fn choose_caption<'a, R: Rng + ?Sized>(sample: &'a Sample, rng: &mut R) -> (usize, &'a str) {
    let i = rng.random_range(0..sample.captions.len());
    (i, &sample.captions[i])
}

/// A split held in memory with its vocabulary.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub vocab: Vocab,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = Manifest::load(path)?;
        let vocab = Vocab::load(&manifest.vocab_path())?;
        let mut images = Vec::with_capacity(manifest.samples.len());
        for i in 0..manifest.samples.len() {
            images.push(Image::load_ppm(&manifest.image_path(i))?);
        }
        for s in &manifest.samples {
            for c in &s.captions {
                vocab.encode(c, MAX_CAPTION_LEN)?;
            }
        }
        Ok(Dataset { manifest, vocab, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// How `make_batch` picks a caption per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptionChoice {
    Random,
    /// Fixed index, clamped to the last caption of shorter lists.
    Index(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub tokens: TokenBatch,
    pub caption_idx: Vec<usize>,
}

/// Assembles images `B×3×S×S` and padded tokens `B×max_len`. Each sample
/// draws from its own stream keyed by `(seed, step, index)`, so a batch
/// does not depend on how its samples are scheduled.
pub fn make_batch<T: Scalar>(
    ds: &Dataset,
    indices: &[usize],
    policy: &AugmentPolicy,
    choice: CaptionChoice,
    max_len: usize,
    seed: u64,
    step: u64,
) -> Result<Batch<T>> {
    policy.validate()?;
    if indices.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let s = ds.manifest.header.image_size;
    let mut pixels = Vec::with_capacity(indices.len() * 3 * s * s);
    let mut ids = Vec::with_capacity(indices.len() * max_len);
    let mut caption_idx = Vec::with_capacity(indices.len());
    for &i in indices {
        let sample = ds
            .manifest
            .samples
            .get(i)
            .ok_or_else(|| Error::invalid(format!("sample index {i} out of range")))?;
        let mut rng = stream(&[seed, purpose::SAMPLE, step, i as u64]);
        let (ci, caption) = match choice {
            CaptionChoice::Random => choose_caption(sample, &mut rng),
            CaptionChoice::Index(k) => {
                let k = k.min(sample.captions.len() - 1);
                (k, sample.captions[k].as_str())
            }
        };
        ids.extend(ds.vocab.encode(caption, max_len)?);
        caption_idx.push(ci);
        let mut img = ds.images[i].clone();
        if policy.crop {
            img = random_resized_crop(&img, policy, &mut rng)?;
        }
        if policy.rand_augment {
            img = rand_augment_lite(&img, policy, &mut rng)?.0;
        }
        pixels.extend(img.data().iter().map(|&v| T::of(f64::from(v))));
    }
    Ok(Batch {
        images: Tensor::new(&[indices.len(), 3, s, s], pixels)?,
        tokens: TokenBatch::new(indices.len(), max_len, ids)?,
        caption_idx,
    })
}
