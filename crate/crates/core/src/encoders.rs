//! Toy image and text towers, the bundle that owns every parameter of a
//! CLIP-style model, weight inheritance from a teacher, and freezing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::blocks::{BlockGeometry, BlockKind, BlockStack, LayerNormParams, LinearParams, SharePolicy};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamStore};

/// One patchifying convolution: kernel size equals stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemStage {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageEncoderConfig {
    pub image_size: usize,
    pub stem: Vec<StemStage>,
    pub n_blocks: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig {
            image_size: 32,
            stem: vec![
                StemStage { channels: 16, stride: 2 },
                StemStage { channels: 64, stride: 4 },
            ],
            n_blocks: 4,
        }
    }
}

impl ImageEncoderConfig {
    /// Side length of the token grid after the stem.
    pub fn grid(&self) -> Result<usize> {
        let mut side = self.image_size;
        for s in &self.stem {
            if s.stride == 0 || !side.is_multiple_of(s.stride) {
                return Err(Error::Config(format!(
                    "stem stride {} does not divide feature map side {side}",
                    s.stride
                )));
            }
            side /= s.stride;
        }
        Ok(side)
    }

    pub fn tokens(&self) -> Result<usize> {
        Ok(self.grid()?.pow(2))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_blocks: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            vocab_size: 64,
            max_len: 16,
            n_blocks: 2,
        }
    }
}

/// How a PM head combines an (image, text) embedding pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PmFusion {
    Hadamard,
    Concat,
}

impl PmFusion {
    pub fn input_width(self, embed_dim: usize) -> usize {
        match self {
            PmFusion::Hadamard => embed_dim,
            PmFusion::Concat => 2 * embed_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub block_kind: BlockKind,
    pub share_policy: SharePolicy,
    pub geometry: BlockGeometry,
    pub embed_dim: usize,
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
    pub init_tau: f64,
    pub pm_fusion: PmFusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            block_kind: BlockKind::Sasp,
            share_policy: SharePolicy::AdjacentPairs,
            geometry: BlockGeometry::default(),
            embed_dim: 64,
            image: ImageEncoderConfig::default(),
            text: TextEncoderConfig::default(),
            init_tau: 0.07,
            pm_fusion: PmFusion::Hadamard,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.head_dim()?;
        self.image.grid()?;
        if self.image.stem.last().map(|s| s.channels) != Some(self.geometry.d) {
            return Err(Error::Config(format!(
                "last stem stage must output the model width {}",
                self.geometry.d
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.text.vocab_size < 2 || self.text.max_len == 0 {
            return Err(Error::Config("text tower needs vocab_size ≥ 2 and max_len ≥ 1".into()));
        }
        if !(self.init_tau > 0.0) {
            return Err(Error::Config("init_tau must be positive".into()));
        }
        Ok(())
    }
}

/// Padded token ids, `batch` rows of `len` ids each. Id 0 is padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, len: usize, ids: Vec<u32>) -> Result<Self> {
        if batch == 0 || len == 0 || ids.len() != batch * len {
            return Err(Error::InvalidShape {
                shape: vec![batch, len],
                reason: format!("{} token ids", ids.len()),
            });
        }
        Ok(TokenBatch { batch, len, ids })
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    pub stem: Vec<LinearParams>,
    pub pos: ParamId,
    pub blocks: BlockStack,
    pub ln_final: LayerNormParams,
    pub proj: LinearParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub token_embed: ParamId,
    pub pos: ParamId,
    pub blocks: BlockStack,
    pub ln_final: LayerNormParams,
    pub proj: LinearParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PmHeads {
    pub i2t: LinearParams,
    pub t2i: LinearParams,
}

/// Per-parameter trainable flag, indexed by [`ParamId`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask(pub Vec<bool>);

impl FreezeMask {
    pub fn all_trainable(n: usize) -> Self {
        FreezeMask(vec![true; n])
    }

    pub fn all_frozen(n: usize) -> Self {
        FreezeMask(vec![false; n])
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.0[id.index()]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    InheritedFrozen,
    AllTrainable,
}

/// Every parameter of a two-tower model plus its freeze mask.
#[derive(Clone, Debug)]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub log_tau: ParamId,
    pub pm: PmHeads,
    pub freeze: FreezeMask,
}

/// Parameters that sit outside the transformer blocks and are therefore
/// candidates for inheritance: stems, embeddings, final norms, projections.
pub fn is_inheritable(name: &str) -> bool {
    let tower = name.starts_with("image.") || name.starts_with("text.");
    tower && !name.contains(".blocks.") && !name.contains(".mixers.")
}

fn std_for(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let geom = config.geometry;
        let d = geom.d;
        let mut store = ParamStore::new();

        let mut stem = Vec::with_capacity(config.image.stem.len());
        let mut in_ch = 3;
        for (i, s) in config.image.stem.iter().enumerate() {
            let fan_in = s.stride * s.stride * in_ch;
            stem.push(LinearParams::init(
                &mut store,
                &format!("image.stem.{i}"),
                fan_in,
                s.channels,
                true,
                std_for(fan_in),
                rng,
            )?);
            in_ch = s.channels;
        }
        let n_img = config.image.tokens()?;
        let image = ImageEncoder {
            stem,
            pos: store.add("image.pos", Tensor::randn(&[n_img, d], 0.1, rng))?,
            blocks: BlockStack::init(
                &mut store,
                "image",
                config.block_kind,
                config.image.n_blocks,
                config.share_policy,
                &geom,
                rng,
            )?,
            ln_final: LayerNormParams::init(&mut store, "image.ln_final", d)?,
            proj: LinearParams::init(&mut store, "image.proj", d, config.embed_dim, false, std_for(d), rng)?,
        };

        let text = TextEncoder {
            token_embed: store.add(
                "text.token_embed",
                Tensor::randn(&[config.text.vocab_size, d], 1.0, rng),
            )?,
            pos: store.add("text.pos", Tensor::randn(&[config.text.max_len, d], 0.1, rng))?,
            blocks: BlockStack::init(
                &mut store,
                "text",
                config.block_kind,
                config.text.n_blocks,
                config.share_policy,
                &geom,
                rng,
            )?,
            ln_final: LayerNormParams::init(&mut store, "text.ln_final", d)?,
            proj: LinearParams::init(&mut store, "text.proj", d, config.embed_dim, false, std_for(d), rng)?,
        };

        let log_tau = store.add("log_tau", Tensor::scalar(T::of(config.init_tau.ln())))?;
        let w = config.pm_fusion.input_width(config.embed_dim);
        let pm = PmHeads {
            i2t: LinearParams::init(&mut store, "pm.i2t", w, 2, true, 0.0, rng)?,
            t2i: LinearParams::init(&mut store, "pm.t2i", w, 2, true, 0.0, rng)?,
        };
        let freeze = FreezeMask::all_trainable(store.len());
        Ok(ModelBundle {
            config,
            store,
            image,
            text,
            log_tau,
            pm,
            freeze,
        })
    }

    pub fn tau(&self) -> f64 {
        self.store.get(self.log_tau).item().f64().exp()
    }

    pub fn trainable_count(&self) -> usize {
        self.store
            .iter()
            .filter(|(id, _, _)| self.freeze.is_trainable(*id))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    /// Binder whose leaves follow the freeze mask.
    pub fn binder(&self) -> Binder<'_, T> {
        Binder::new(&self.store, Some(self.freeze.as_slice()))
    }

    /// Binder that records every parameter as a constant.
    pub fn constant_binder(&self) -> Binder<'_, T> {
        Binder::new(&self.store, None)
    }

    /// Image tower forward on a `B×3×S×S` batch; returns unit-norm `B×e` rows.
    /// Attention maps of every block are appended to `maps` when given.
    pub fn encode_image(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        images: &Tensor<T>,
        maps: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let s = self.config.image.image_size;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected B×3×{s}×{s} images"),
            });
        }
        if images.data().iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        let b = shape[0];

        // channels-last rows: (b, y, x) × c
        let mut rows = vec![T::zero(); images.numel()];
        let plane = s * s;
        for bi in 0..b {
            for c in 0..3 {
                let src = &images.data()[(bi * 3 + c) * plane..(bi * 3 + c + 1) * plane];
                for (p, v) in src.iter().enumerate() {
                    rows[(bi * plane + p) * 3 + c] = *v;
                }
            }
        }
        let mut x = tape.constant(Tensor::new(&[b * plane, 3], rows)?);
        let (mut side, mut ch) = (s, 3);
        let last = self.image.stem.len() - 1;
        for (i, (stage, lin)) in self.config.image.stem.iter().zip(&self.image.stem).enumerate() {
            let idx = patchify_indices(b, side, ch, stage.stride);
            side /= stage.stride;
            let k = stage.stride * stage.stride * ch;
            let patches = tape.gather(x, idx, &[b * side * side, k])?;
            x = lin.apply(tape, binder, patches)?;
            if i != last {
                x = tape.gelu(x)?;
            }
            ch = stage.channels;
        }
        let n = side * side;
        let pos = binder.var(tape, self.image.pos);
        let tiled: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let pos = tape.gather_rows(pos, &tiled)?;
        let x = tape.add(x, pos)?;

        let pool = Tensor::new(&[b, b * n], pooling_rows(b, n, |_, _| true))?;
        self.head(tape, binder, x, n, pool, &self.image.blocks, &self.image.ln_final, &self.image.proj, maps)
    }

    /// Text tower forward; padding (id 0) is excluded from mean pooling.
    pub fn encode_text(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        tokens: &TokenBatch,
        maps: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let cfg = &self.config.text;
        if tokens.len > cfg.max_len {
            return Err(Error::InvalidShape {
                shape: vec![tokens.batch, tokens.len],
                reason: format!("sequence longer than max_len {}", cfg.max_len),
            });
        }
        if let Some(bad) = tokens.ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Vocab(format!("token id {bad} ≥ vocab size {}", cfg.vocab_size)));
        }
        let (b, n) = (tokens.batch, tokens.len);
        for r in 0..b {
            if tokens.row(r).iter().all(|&t| t == 0) {
                return Err(Error::Degenerate(format!("caption {r} has no tokens")));
            }
        }
        let emb = binder.var(tape, self.text.token_embed);
        let ids: Vec<usize> = tokens.ids.iter().map(|&t| t as usize).collect();
        let x = tape.gather_rows(emb, &ids)?;
        let pos = binder.var(tape, self.text.pos);
        let tiled: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let pos = tape.gather_rows(pos, &tiled)?;
        let x = tape.add(x, pos)?;

        let pool = Tensor::new(&[b, b * n], pooling_rows(b, n, |r, j| tokens.row(r)[j] != 0))?;
        self.head(tape, binder, x, n, pool, &self.text.blocks, &self.text.ln_final, &self.text.proj, maps)
    }

    #[allow(clippy::too_many_arguments)]
    fn head(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        x: Var,
        seq_len: usize,
        pool: Tensor<T>,
        blocks: &BlockStack,
        ln: &LayerNormParams,
        proj: &LinearParams,
        maps: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let x = blocks.forward(tape, binder, x, seq_len, maps)?;
        let x = ln.apply(tape, binder, x, self.config.geometry.ln_eps)?;
        let pool = tape.constant(pool);
        let pooled = tape.matmul(pool, x)?;
        let e = proj.apply(tape, binder, pooled)?;
        tape.l2_normalize_rows(e)
    }

    /// Untracked image embeddings.
    pub fn embed_images(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut binder = self.constant_binder();
        let v = self.encode_image(&mut tape, &mut binder, images, None)?;
        Ok(tape.value(v).clone())
    }

    /// Untracked text embeddings.
    pub fn embed_text(&self, tokens: &TokenBatch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut binder = self.constant_binder();
        let t = self.encode_text(&mut tape, &mut binder, tokens, None)?;
        Ok(tape.value(t).clone())
    }

    /// Identity name mapping over every inheritable tensor present in both
    /// bundles with equal shape.
    pub fn default_inheritance(&self, teacher: &ModelBundle<T>) -> Vec<(String, String)> {
        self.store
            .iter()
            .filter(|(_, name, _)| is_inheritable(name))
            .filter(|(_, name, t)| teacher.store.by_name(name).is_some_and(|u| u.shape() == t.shape()))
            .map(|(_, name, _)| (name.to_string(), name.to_string()))
            .collect()
    }

    pub fn apply_freeze(&mut self, policy: FreezePolicy) -> &FreezeMask {
        self.freeze = FreezeMask(
            self.store
                .iter()
                .map(|(_, name, _)| match policy {
                    FreezePolicy::AllTrainable => true,
                    FreezePolicy::InheritedFrozen => !is_inheritable(name),
                })
                .collect(),
        );
        &self.freeze
    }

    pub fn freeze_all(&mut self) {
        self.freeze = FreezeMask::all_frozen(self.store.len());
    }
}

/// Copies teacher tensors into the student under `mapping` (student name,
/// teacher name). Every pair is validated before anything is written.
pub fn inherit_weights<T: Scalar>(
    student: &mut ModelBundle<T>,
    teacher: &ModelBundle<T>,
    mapping: &[(String, String)],
) -> Result<()> {
    let mut plan = Vec::with_capacity(mapping.len());
    for (s_name, t_name) in mapping {
        let sid = student
            .store
            .id(s_name)
            .ok_or_else(|| Error::invalid(format!("student has no tensor {s_name:?}")))?;
        let src = teacher
            .store
            .by_name(t_name)
            .ok_or_else(|| Error::invalid(format!("teacher has no tensor {t_name:?}")))?;
        let dst = student.store.get(sid);
        if dst.shape() != src.shape() {
            return Err(Error::Shape {
                op: "inherit_weights",
                lhs: dst.shape().to_vec(),
                rhs: src.shape().to_vec(),
            });
        }
        plan.push((sid, src));
    }
    for (sid, src) in plan {
        *student.store.get_mut(sid) = src.clone();
    }
    Ok(())
}

/// Gather indices turning channels-last rows `(b, y, x) × ch` into
/// non-overlapping `k×k` patches `(b, y', x') × (dy, dx, ch)`.
fn patchify_indices(b: usize, side: usize, ch: usize, k: usize) -> Vec<usize> {
    let out = side / k;
    let mut idx = Vec::with_capacity(b * side * side * ch);
    for bi in 0..b {
        for oy in 0..out {
            for ox in 0..out {
                for dy in 0..k {
                    for dx in 0..k {
                        let pix = (bi * side + oy * k + dy) * side + ox * k + dx;
                        idx.extend((0..ch).map(|c| pix * ch + c));
                    }
                }
            }
        }
    }
    idx
}

/// Row-major `B × B·n` matrix averaging the kept positions of each sequence.
fn pooling_rows<T: Scalar>(b: usize, n: usize, keep: impl Fn(usize, usize) -> bool) -> Vec<T> {
    let mut out = vec![T::zero(); b * b * n];
    for r in 0..b {
        let kept: Vec<usize> = (0..n).filter(|&j| keep(r, j)).collect();
        let w = T::of(1.0 / kept.len() as f64);
        for j in kept {
            out[r * b * n + r * n + j] = w;
        }
    }
    out
}
