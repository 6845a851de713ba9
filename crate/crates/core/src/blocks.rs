//! Transformer blocks: the Pre-LN baseline, the SAS-P block built on shaped
//! attention, and the registry that lets adjacent SAS-P blocks share one
//! token mixer.
//!
//! Every block maps a stack of `B` sequences laid out as `B·n × d` rows to a
//! tensor of the same shape. Attention is computed independently per
//! sequence and per head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Preln,
    Sasp,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Preln => "preln",
            BlockKind::Sasp => "sasp",
        }
    }
}

impl std::str::FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "preln" => Ok(BlockKind::Preln),
            "sasp" => Ok(BlockKind::Sasp),
            other => Err(Error::invalid(format!("unknown block kind {other:?}"))),
        }
    }
}

/// Divisor applied to attention scores before the softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    /// `1/sqrt(d_h)`, the per-head width.
    HeadWidth,
    /// `1/sqrt(d)`, the full model width.
    ModelWidth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharePolicy {
    AdjacentPairs,
    All,
    None,
}

/// Width, heads and the switches that change a block's parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockGeometry {
    pub d: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub score_scale: ScoreScale,
    /// One (α, β, γ) triple per head instead of one per mixer.
    pub per_head_shape: bool,
    /// Biases on the four Pre-LN attention projections.
    pub attn_bias: bool,
    pub ln_eps: f64,
}

impl Default for BlockGeometry {
    fn default() -> Self {
        BlockGeometry {
            d: 64,
            heads: 4,
            mlp_ratio: 4,
            score_scale: ScoreScale::HeadWidth,
            per_head_shape: true,
            attn_bias: false,
            ln_eps: 1e-5,
        }
    }
}

impl BlockGeometry {
    pub fn new(d: usize, heads: usize) -> Self {
        BlockGeometry {
            d,
            heads,
            ..Default::default()
        }
    }

    pub fn head_dim(&self) -> Result<usize> {
        if self.heads == 0 || self.d == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(self.d / self.heads)
    }

    fn shape_params(&self) -> usize {
        if self.per_head_shape {
            self.heads
        } else {
            1
        }
    }

    fn score_factor(&self) -> Result<f64> {
        let width = match self.score_scale {
            ScoreScale::HeadWidth => self.head_dim()?,
            ScoreScale::ModelWidth => self.d,
        };
        Ok(1.0 / (width as f64).sqrt())
    }
}

/// Token mixer of a SAS-P block: query/key projections and the shape
/// scalars α, β, γ. There are no value or output projections.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapedMixerParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub gamma: ParamId,
}

impl ShapedMixerParams {
    /// `W_Q = 0` and `α = β = γ = 1`, which makes the mixer the identity.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        geom: &BlockGeometry,
        rng: &mut R,
    ) -> Result<Self> {
        geom.head_dim()?;
        let d = geom.d;
        let h = geom.shape_params();
        Ok(ShapedMixerParams {
            w_q: store.add(format!("{prefix}.w_q"), Tensor::zeros(&[d, d]))?,
            w_k: store.add(
                format!("{prefix}.w_k"),
                Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), rng),
            )?,
            alpha: store.add(format!("{prefix}.alpha"), Tensor::ones(&[h]))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::ones(&[h]))?,
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[h]))?,
        })
    }

    pub fn ids(&self) -> [ParamId; 5] {
        [self.w_q, self.w_k, self.alpha, self.beta, self.gamma]
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, binder: &mut Binder<'_, T>) -> MixerVars {
        MixerVars {
            w_q: binder.var(tape, self.w_q),
            w_k: binder.var(tape, self.w_k),
            alpha: binder.var(tape, self.alpha),
            beta: binder.var(tape, self.beta),
            gamma: binder.var(tape, self.gamma),
        }
    }
}

/// Tape handles of a bound [`ShapedMixerParams`].
#[derive(Clone, Copy, Debug)]
pub struct MixerVars {
    pub w_q: Var,
    pub w_k: Var,
    pub alpha: Var,
    pub beta: Var,
    pub gamma: Var,
}

/// Flat indices that regroup `B·n × d` rows into `B·H·n × d_h` head slices.
fn split_heads_indices(batch: usize, n: usize, heads: usize, dh: usize) -> Vec<usize> {
    let d = heads * dh;
    let mut idx = Vec::with_capacity(batch * n * d);
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..n {
                let base = (b * n + i) * d + h * dh;
                idx.extend(base..base + dh);
            }
        }
    }
    idx
}

/// Inverse of [`split_heads_indices`]: concatenates heads back to width d.
fn merge_heads_indices(batch: usize, n: usize, heads: usize, dh: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * n * heads * dh);
    for b in 0..batch {
        for i in 0..n {
            for h in 0..heads {
                let base = ((b * heads + h) * n + i) * dh;
                idx.extend(base..base + dh);
            }
        }
    }
    idx
}

fn seq_batch<T: Scalar>(tape: &Tape<T>, x: Var, seq_len: usize) -> Result<(usize, usize)> {
    let (rows, d) = tape.value(x).dims2()?;
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(Error::invalid(format!(
            "{rows} rows are not a whole number of length-{seq_len} sequences"
        )));
    }
    Ok((rows / seq_len, d))
}

fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, batch: usize, n: usize, heads: usize, dh: usize) -> Result<Var> {
    tape.gather(
        x,
        split_heads_indices(batch, n, heads, dh),
        &[batch * heads * n, dh],
    )
}

fn merge_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, batch: usize, n: usize, heads: usize, dh: usize) -> Result<Var> {
    tape.gather(
        x,
        merge_heads_indices(batch, n, heads, dh),
        &[batch * n, heads * dh],
    )
}

/// Output of an attention sub-layer together with its attention matrices.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    /// `B·H·n × n`: matrix of sequence `b`, head `h` at row block `b·H + h`.
    pub maps: Var,
}

/// Shaped attention: per head
/// `A = α·I + β·softmax(X W_Q (X W_K)ᵀ · s) − γ·C`, and the head output is
/// `A` applied to that head's `d_h`-wide slice of `X`. Heads are
/// concatenated back to width `d`; no value or output projection is applied.
pub fn shaped_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    mixer: &MixerVars,
    seq_len: usize,
    geom: &BlockGeometry,
) -> Result<AttentionOutput> {
    let (batch, d) = seq_batch(tape, x, seq_len)?;
    if d != geom.d {
        return Err(Error::Shape {
            op: "shaped_attention",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![geom.d],
        });
    }
    let (n, heads, dh) = (seq_len, geom.heads, geom.head_dim()?);
    let groups = batch * heads;

    let q = tape.matmul(x, mixer.w_q)?;
    let k = tape.matmul(x, mixer.w_k)?;
    let qh = split_heads(tape, q, batch, n, heads, dh)?;
    let kh = split_heads(tape, k, batch, n, heads, dh)?;
    let xh = split_heads(tape, x, batch, n, heads, dh)?;

    let scores = tape.batch_matmul(qh, kh, groups, true)?;
    let scores = tape.scale(scores, T::of(geom.score_factor()?))?;
    let soft = tape.softmax_rows(scores)?;

    let maps = tape.shaped_mix(soft, mixer.alpha, mixer.beta, mixer.gamma, groups)?;

    let yh = tape.batch_matmul(maps, xh, groups, false)?;
    let out = merge_heads(tape, yh, batch, n, heads, dh)?;
    Ok(AttentionOutput { out, maps })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gain: store.add(format!("{prefix}.gain"), Tensor::ones(&[d]))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        x: Var,
        eps: f64,
    ) -> Result<Var> {
        let g = binder.var(tape, self.gain);
        let b = binder.var(tape, self.bias);
        tape.layer_norm(x, g, b, T::of(eps))
    }
}

/// Dense layer `x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = if std == 0.0 {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            Tensor::randn(&[fan_in, fan_out], std, rng)
        };
        let weight = store.add(format!("{prefix}.weight"), w)?;
        let bias = if bias {
            Some(store.add(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(LinearParams { weight, bias })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, binder: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        let w = binder.var(tape, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = binder.var(tape, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Two-layer GELU MLP of hidden width `mlp_ratio·d`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub up: LinearParams,
    pub down: LinearParams,
}

impl MlpParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        geom: &BlockGeometry,
        zero_down: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, hidden) = (geom.d, geom.d * geom.mlp_ratio);
        let up = LinearParams::init(store, &format!("{prefix}.up"), d, hidden, true, 1.0 / (d as f64).sqrt(), rng)?;
        let down_std = if zero_down { 0.0 } else { 1.0 / (hidden as f64).sqrt() };
        let down = LinearParams::init(store, &format!("{prefix}.down"), hidden, d, true, down_std, rng)?;
        Ok(MlpParams { up, down })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, binder: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        let h = self.up.apply(tape, binder, x)?;
        let h = tape.gelu(h)?;
        self.down.apply(tape, binder, h)
    }
}

/// Pre-LN block with a full multi-head self-attention sub-layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PreLnBlockParams {
    pub ln1: LayerNormParams,
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

impl PreLnBlockParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        geom: &BlockGeometry,
        rng: &mut R,
    ) -> Result<Self> {
        geom.head_dim()?;
        let d = geom.d;
        let std = 1.0 / (d as f64).sqrt();
        let mut proj = |name: &str, store: &mut ParamStore<T>| {
            LinearParams::init(store, &format!("{prefix}.{name}"), d, d, geom.attn_bias, std, rng)
        };
        let q = proj("q", store)?;
        let k = proj("k", store)?;
        let v = proj("v", store)?;
        let o = proj("o", store)?;
        Ok(PreLnBlockParams {
            ln1: LayerNormParams::init(store, &format!("{prefix}.ln1"), d)?,
            q,
            k,
            v,
            o,
            ln2: LayerNormParams::init(store, &format!("{prefix}.ln2"), d)?,
            mlp: MlpParams::init(store, &format!("{prefix}.mlp"), geom, false, rng)?,
        })
    }
}

/// Standard softmax multi-head self-attention with value and output
/// projections.
pub fn mhsa<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    x: Var,
    p: &PreLnBlockParams,
    seq_len: usize,
    geom: &BlockGeometry,
) -> Result<AttentionOutput> {
    let (batch, _) = seq_batch(tape, x, seq_len)?;
    let (n, heads, dh) = (seq_len, geom.heads, geom.head_dim()?);
    let groups = batch * heads;
    let q = p.q.apply(tape, binder, x)?;
    let k = p.k.apply(tape, binder, x)?;
    let v = p.v.apply(tape, binder, x)?;
    let qh = split_heads(tape, q, batch, n, heads, dh)?;
    let kh = split_heads(tape, k, batch, n, heads, dh)?;
    let vh = split_heads(tape, v, batch, n, heads, dh)?;
    let scores = tape.batch_matmul(qh, kh, groups, true)?;
    let scores = tape.scale(scores, T::of(geom.score_factor()?))?;
    let maps = tape.softmax_rows(scores)?;
    let yh = tape.batch_matmul(maps, vh, groups, false)?;
    let merged = merge_heads(tape, yh, batch, n, heads, dh)?;
    let out = p.o.apply(tape, binder, merged)?;
    Ok(AttentionOutput { out, maps })
}

/// `X1 = X + MHSA(LN(X))`, `out = X1 + MLP(LN(X1))`.
pub fn preln_block<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    x: Var,
    p: &PreLnBlockParams,
    seq_len: usize,
    geom: &BlockGeometry,
) -> Result<(Var, Var)> {
    let n1 = p.ln1.apply(tape, binder, x, geom.ln_eps)?;
    let attn = mhsa(tape, binder, n1, p, seq_len, geom)?;
    let x1 = tape.add(x, attn.out)?;
    let n2 = p.ln2.apply(tape, binder, x1, geom.ln_eps)?;
    let m = p.mlp.apply(tape, binder, n2)?;
    Ok((tape.add(x1, m)?, attn.maps))
}

/// SAS-P block. The mixer lives in a [`SharedMixerRegistry`] group.
#[derive(Clone, Debug, PartialEq)]
pub struct SaspBlockParams {
    pub mixer_group: usize,
    pub ln: LayerNormParams,
    pub mlp: MlpParams,
}

impl SaspBlockParams {
    /// The MLP's second layer starts at zero so a fresh block is a pure
    /// layer-norm pass-through.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        mixer_group: usize,
        geom: &BlockGeometry,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(SaspBlockParams {
            mixer_group,
            ln: LayerNormParams::init(store, &format!("{prefix}.ln"), geom.d)?,
            mlp: MlpParams::init(store, &format!("{prefix}.mlp"), geom, true, rng)?,
        })
    }
}

/// `N = LN(X)`, `out = ShapedAttention(N) + MLP(N)`; no skip from `X`.
pub fn sasp_block<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    x: Var,
    p: &SaspBlockParams,
    mixer: &ShapedMixerParams,
    seq_len: usize,
    geom: &BlockGeometry,
) -> Result<(Var, Var)> {
    let normed = p.ln.apply(tape, binder, x, geom.ln_eps)?;
    let mv = mixer.bind(tape, binder);
    let attn = shaped_attention(tape, normed, &mv, seq_len, geom)?;
    let m = p.mlp.apply(tape, binder, normed)?;
    Ok((tape.add(attn.out, m)?, attn.maps))
}

/// Group assignment for `n_blocks` blocks under `policy`.
pub fn share_mixers(n_blocks: usize, policy: SharePolicy) -> Result<Vec<usize>> {
    if n_blocks == 0 {
        return Err(Error::invalid("cannot share mixers over zero blocks"));
    }
    Ok((0..n_blocks)
        .map(|i| match policy {
            SharePolicy::AdjacentPairs => i / 2,
            SharePolicy::All => 0,
            SharePolicy::None => i,
        })
        .collect())
}

/// Mixer groups and the block → group assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedMixerRegistry {
    pub groups: Vec<ShapedMixerParams>,
    pub assignment: Vec<usize>,
}

impl SharedMixerRegistry {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        n_blocks: usize,
        policy: SharePolicy,
        geom: &BlockGeometry,
        rng: &mut R,
    ) -> Result<Self> {
        let assignment = share_mixers(n_blocks, policy)?;
        let n_groups = assignment.iter().max().map_or(0, |m| m + 1);
        let groups = (0..n_groups)
            .map(|g| ShapedMixerParams::init(store, &format!("{prefix}.mixers.{g}"), geom, rng))
            .collect::<Result<_>>()?;
        Ok(SharedMixerRegistry { groups, assignment })
    }

    pub fn mixer_for(&self, block: usize) -> &ShapedMixerParams {
        &self.groups[self.assignment[block]]
    }

    pub fn unique_mixers(&self) -> usize {
        self.groups.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockParams {
    Preln(PreLnBlockParams),
    Sasp(SaspBlockParams),
}

/// A homogeneous sequence of blocks plus, for SAS-P, the mixer registry.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockStack {
    pub kind: BlockKind,
    pub geometry: BlockGeometry,
    pub blocks: Vec<BlockParams>,
    pub registry: Option<SharedMixerRegistry>,
}

impl BlockStack {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kind: BlockKind,
        n_blocks: usize,
        policy: SharePolicy,
        geom: &BlockGeometry,
        rng: &mut R,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(n_blocks);
        let registry = match kind {
            BlockKind::Preln => {
                for i in 0..n_blocks {
                    blocks.push(BlockParams::Preln(PreLnBlockParams::init(
                        store,
                        &format!("{prefix}.blocks.{i}"),
                        geom,
                        rng,
                    )?));
                }
                None
            }
            BlockKind::Sasp => {
                if n_blocks == 0 {
                    None
                } else {
                    let reg = SharedMixerRegistry::build(store, prefix, n_blocks, policy, geom, rng)?;
                    for i in 0..n_blocks {
                        blocks.push(BlockParams::Sasp(SaspBlockParams::init(
                            store,
                            &format!("{prefix}.blocks.{i}"),
                            reg.assignment[i],
                            geom,
                            rng,
                        )?));
                    }
                    Some(reg)
                }
            }
        };
        Ok(BlockStack {
            kind,
            geometry: *geom,
            blocks,
            registry,
        })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Runs every block in order. When `maps` is given, each block's
    /// attention matrices are appended to it.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        mut x: Var,
        seq_len: usize,
        mut maps: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        for block in &self.blocks {
            let (y, a) = match block {
                BlockParams::Preln(p) => preln_block(tape, binder, x, p, seq_len, &self.geometry)?,
                BlockParams::Sasp(p) => {
                    let reg = self
                        .registry
                        .as_ref()
                        .ok_or_else(|| Error::invalid("SAS-P stack without a mixer registry"))?;
                    let mixer = &reg.groups[p.mixer_group];
                    sasp_block(tape, binder, x, p, mixer, seq_len, &self.geometry)?
                }
            };
            if let Some(m) = maps.as_deref_mut() {
                m.push(a);
            }
            x = y;
        }
        Ok(x)
    }
}

/// Attention (token-mixer) parameters of one block.
pub fn count_mixer_params(kind: BlockKind, geom: &BlockGeometry) -> Result<usize> {
    geom.head_dim()?;
    let d = geom.d;
    Ok(match kind {
        BlockKind::Preln => 4 * d * d + if geom.attn_bias { 4 * d } else { 0 },
        BlockKind::Sasp => 2 * d * d + 3 * geom.shape_params(),
    })
}

/// Exact parameter count of one unshared block.
pub fn count_block_params(kind: BlockKind, geom: &BlockGeometry) -> Result<usize> {
    let d = geom.d;
    let hidden = d * geom.mlp_ratio;
    let mlp = d * hidden + hidden + hidden * d + d;
    let norms = match kind {
        BlockKind::Preln => 2 * 2 * d,
        BlockKind::Sasp => 2 * d,
    };
    Ok(count_mixer_params(kind, geom)? + mlp + norms)
}

/// Exact parameter count of `n_blocks` blocks, mixers counted once per
/// share group (Pre-LN blocks never share).
pub fn count_stack_params(
    kind: BlockKind,
    geom: &BlockGeometry,
    n_blocks: usize,
    policy: SharePolicy,
) -> Result<usize> {
    if n_blocks == 0 {
        return Ok(0);
    }
    let block = count_block_params(kind, geom)?;
    let mixer = count_mixer_params(kind, geom)?;
    let unique = match kind {
        BlockKind::Preln => n_blocks,
        BlockKind::Sasp => share_mixers(n_blocks, policy)?
            .into_iter()
            .max()
            .map_or(0, |m| m + 1),
    };
    Ok(n_blocks * (block - mixer) + unique * mixer)
}

#[cfg(test)]
mod tests;
