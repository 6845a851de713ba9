//! Training objectives over unit-norm embedding batches: CLIP contrastive,
//! feature / interactive-contrastive / relational distillation, the
//! pair-matching loss with similarity-sampled negatives, and their sum.
//!
//! All losses are built on a [`Tape`] so they are differentiable with respect
//! to every input. The temperature enters as `inv_tau`, a one-element
//! variable holding `1/τ`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::blocks::LinearParams;
use crate::encoders::{PmFusion, PmHeads};
use crate::error::{Error, Result};
use crate::params::Binder;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_fd: f64,
    pub lambda_ic: f64,
    pub lambda_crd: f64,
    pub lambda_pm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_fd: 4000.0,
            lambda_ic: 1.0,
            lambda_crd: 1.0,
            lambda_pm: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_fd, self.lambda_ic, self.lambda_crd, self.lambda_pm];
        if all.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0, got {all:?}")));
        }
        Ok(())
    }
}

/// Student and teacher embeddings of one batch, each `B×e`.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingBatch {
    pub v_s: Var,
    pub t_s: Var,
    pub v_t: Var,
    pub t_t: Var,
}

/// `1/τ` from a log-temperature variable.
pub fn inv_temperature<T: Scalar>(tape: &mut Tape<T>, log_tau: Var) -> Result<Var> {
    let neg = tape.neg(log_tau)?;
    tape.exp(neg)
}

/// `V·Tᵀ`.
pub fn similarity<T: Scalar>(tape: &mut Tape<T>, v: Var, t: Var) -> Result<Var> {
    if tape.shape(v) != tape.shape(t) {
        return Err(Error::Shape {
            op: "similarity",
            lhs: tape.shape(v).to_vec(),
            rhs: tape.shape(t).to_vec(),
        });
    }
    let tt = tape.transpose(t)?;
    tape.matmul(v, tt)
}

fn batch_of<T: Scalar>(tape: &Tape<T>, v: Var, op: &str) -> Result<usize> {
    let b = tape.value(v).dims2()?.0;
    if b < 2 {
        return Err(Error::invalid(format!("{op} needs a batch of at least 2, got {b}")));
    }
    Ok(b)
}

fn diag_indices(b: usize) -> Vec<usize> {
    (0..b).map(|k| k * b + k).collect()
}

fn off_diag_indices(b: usize) -> Vec<usize> {
    (0..b)
        .flat_map(|k| (0..b).filter(move |&j| j != k).map(move |j| k * b + j))
        .collect()
}

/// Mean cross-entropy of each row of `logits` against its diagonal entry.
fn diag_ce<T: Scalar>(tape: &mut Tape<T>, logits: Var, b: usize) -> Result<Var> {
    let lsm = tape.log_softmax_rows(logits)?;
    let d = tape.gather(lsm, diag_indices(b), &[b])?;
    let m = tape.mean(d)?;
    tape.neg(m)
}

/// Symmetric InfoNCE with logits `V·Tᵀ/τ`; the positive is in the denominator.
pub fn clip_contrastive<T: Scalar>(tape: &mut Tape<T>, v: Var, t: Var, inv_tau: Var) -> Result<Var> {
    let b = batch_of(tape, v, "clip_contrastive")?;
    let s = similarity(tape, v, t)?;
    let logits = tape.mul_scalar(s, inv_tau)?;
    let i2t = diag_ce(tape, logits, b)?;
    let lt = tape.transpose(logits)?;
    let t2i = diag_ce(tape, lt, b)?;
    let sum = tape.add(i2t, t2i)?;
    tape.scale(sum, T::of(0.5))
}

/// `(1/B)·Σ_k (‖v_kᵀ − v_kˢ‖² + ‖t_kᵀ − t_kˢ‖²)/2`.
pub fn fd_loss<T: Scalar>(tape: &mut Tape<T>, e: &EmbeddingBatch) -> Result<Var> {
    let b = tape.value(e.v_s).dims2()?.0;
    let dv = tape.sub(e.v_t, e.v_s)?;
    let dt = tape.sub(e.t_t, e.t_s)?;
    let dv2 = tape.mul(dv, dv)?;
    let dt2 = tape.mul(dt, dt)?;
    let sv = tape.sum(dv2)?;
    let st = tape.sum(dt2)?;
    let s = tape.add(sv, st)?;
    tape.scale(s, T::of(0.5 / b as f64))
}

/// One direction of the interactive contrastive loss: rows of `anchor`
/// scored against `other` (a teacher embedding set). Summed over rows.
fn ic_direction<T: Scalar>(
    tape: &mut Tape<T>,
    anchor: Var,
    other: Var,
    inv_tau: Var,
    b: usize,
    include_positive: bool,
) -> Result<Var> {
    let s = similarity(tape, anchor, other)?;
    let logits = tape.mul_scalar(s, inv_tau)?;
    let pos = tape.gather(logits, diag_indices(b), &[b, 1])?;
    let denom = if include_positive {
        logits
    } else {
        tape.gather(logits, off_diag_indices(b), &[b, b - 1])?
    };
    let lse = tape.log_sum_exp_rows(denom)?;
    let terms = tape.sub(lse, pos)?;
    tape.sum(terms)
}

/// Interactive contrastive loss: student anchors against teacher candidates
/// in both directions, summed over the batch and averaged over directions.
/// The verbatim form excludes the positive from each denominator and can be
/// negative; `include_positive` gives the conventional InfoNCE form.
pub fn ic_loss<T: Scalar>(
    tape: &mut Tape<T>,
    e: &EmbeddingBatch,
    inv_tau: Var,
    include_positive: bool,
) -> Result<Var> {
    let b = batch_of(tape, e.v_s, "ic_loss")?;
    let i2t = ic_direction(tape, e.v_s, e.t_t, inv_tau, b, include_positive)?;
    let t2i = ic_direction(tape, e.t_s, e.v_t, inv_tau, b, include_positive)?;
    let s = tape.add(i2t, t2i)?;
    tape.scale(s, T::of(0.5))
}

/// Σ_rows KL(softmax(teacher row) ‖ softmax(student row)).
fn row_kl<T: Scalar>(tape: &mut Tape<T>, teacher_logits: Var, student_logits: Var) -> Result<Var> {
    let lp = tape.log_softmax_rows(teacher_logits)?;
    let p = tape.softmax_rows(teacher_logits)?;
    let lq = tape.log_softmax_rows(student_logits)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    tape.sum(terms)
}

/// Relational distillation: `(1/B)·KL(Sim_T ‖ Sim_S)` over row softmaxes of
/// the image-to-text matrices and over their columns, averaged.
pub fn crd_loss<T: Scalar>(tape: &mut Tape<T>, e: &EmbeddingBatch, inv_tau: Var) -> Result<Var> {
    let b = batch_of(tape, e.v_s, "crd_loss")?;
    let st = similarity(tape, e.v_t, e.t_t)?;
    let ss = similarity(tape, e.v_s, e.t_s)?;
    let lt = tape.mul_scalar(st, inv_tau)?;
    let ls = tape.mul_scalar(ss, inv_tau)?;
    let rows = row_kl(tape, lt, ls)?;
    let ltt = tape.transpose(lt)?;
    let lst = tape.transpose(ls)?;
    let cols = row_kl(tape, ltt, lst)?;
    let s = tape.add(rows, cols)?;
    tape.scale(s, T::of(0.5 / b as f64))
}

/// Weighted distillation terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct KdTerms {
    pub fd: Var,
    pub ic: Var,
    pub crd: Var,
    pub total: Var,
}

/// `λ1·L_FD + λ2·L_IC + λ3·L_CRD`; the returned parts are already weighted.
pub fn kd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    e: &EmbeddingBatch,
    inv_tau: Var,
    w: &LossWeights,
    ic_include_positive: bool,
) -> Result<KdTerms> {
    let fd = fd_loss(tape, e)?;
    let ic = ic_loss(tape, e, inv_tau, ic_include_positive)?;
    let crd = crd_loss(tape, e, inv_tau)?;
    let fd = tape.scale(fd, T::of(w.lambda_fd))?;
    let ic = tape.scale(ic, T::of(w.lambda_ic))?;
    let crd = tape.scale(crd, T::of(w.lambda_crd))?;
    let s = tape.add(fd, ic)?;
    let total = tape.add(s, crd)?;
    Ok(KdTerms { fd, ic, crd, total })
}

/// Sampled hard negatives: for each image a text index, for each text an
/// image index, never the aligned partner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Negatives {
    pub text_for_image: Vec<usize>,
    pub image_for_text: Vec<usize>,
}

/// Draws one negative per row (image → text) and per column (text → image)
/// of `sim` with probability `softmax(s/τ)` over the off-diagonal entries.
pub fn sample_negatives<T: Scalar, R: Rng + ?Sized>(sim: &Tensor<T>, tau: f64, rng: &mut R) -> Result<Negatives> {
    let (b, c) = sim.dims2()?;
    if b != c {
        return Err(Error::InvalidShape {
            shape: sim.shape().to_vec(),
            reason: "similarity matrix must be square".into(),
        });
    }
    if b < 2 {
        return Err(Error::invalid("negative sampling needs a batch of at least 2"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let draw = |k: usize, get: &dyn Fn(usize) -> f64, rng: &mut R| -> Result<usize> {
        let max = (0..b).filter(|&j| j != k).map(get).fold(f64::NEG_INFINITY, f64::max);
        let weights = (0..b).map(|j| if j == k { 0.0 } else { ((get(j) - max) / tau).exp() });
        let dist = WeightedIndex::new(weights).map_err(|e| Error::Degenerate(format!("negative weights: {e}")))?;
        Ok(dist.sample(rng))
    };
    let mut text_for_image = Vec::with_capacity(b);
    for k in 0..b {
        text_for_image.push(draw(k, &|j| sim.at(k, j).f64(), rng)?);
    }
    let mut image_for_text = Vec::with_capacity(b);
    for k in 0..b {
        image_for_text.push(draw(k, &|j| sim.at(j, k).f64(), rng)?);
    }
    Ok(Negatives {
        text_for_image,
        image_for_text,
    })
}

/// Bound weights of the two pair-matching heads.
#[derive(Clone, Copy, Debug)]
pub struct PmHeadVars {
    pub i2t: (Var, Var),
    pub t2i: (Var, Var),
}

impl PmHeadVars {
    pub fn bind<T: Scalar>(heads: &PmHeads, tape: &mut Tape<T>, binder: &mut Binder<'_, T>) -> Result<Self> {
        let one = |l: &LinearParams, tape: &mut Tape<T>, binder: &mut Binder<'_, T>| -> Result<(Var, Var)> {
            let b = l.bias.ok_or_else(|| Error::invalid("pair-matching head without bias"))?;
            Ok((binder.var(tape, l.weight), binder.var(tape, b)))
        };
        Ok(PmHeadVars {
            i2t: one(&heads.i2t, tape, binder)?,
            t2i: one(&heads.t2i, tape, binder)?,
        })
    }
}

fn fuse<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, fusion: PmFusion) -> Result<Var> {
    match fusion {
        PmFusion::Hadamard => tape.mul(a, b),
        PmFusion::Concat => tape.concat_cols(&[a, b]),
    }
}

/// Mean 2-class cross-entropy of one head over B positive then B negative
/// decisions. Class 1 is "match".
fn pm_direction<T: Scalar>(
    tape: &mut Tape<T>,
    anchor: Var,
    other: Var,
    negatives: &[usize],
    head: (Var, Var),
    fusion: PmFusion,
) -> Result<Var> {
    let b = negatives.len();
    let neg = tape.gather_rows(other, negatives)?;
    let pos_f = fuse(tape, anchor, other, fusion)?;
    let neg_f = fuse(tape, anchor, neg, fusion)?;
    let x = tape.concat_rows(&[pos_f, neg_f])?;
    let logits = tape.matmul(x, head.0)?;
    let logits = tape.add_bias(logits, head.1)?;
    let lsm = tape.log_softmax_rows(logits)?;
    let picks: Vec<usize> = (0..2 * b).map(|r| r * 2 + usize::from(r < b)).collect();
    let ll = tape.gather(lsm, picks, &[2 * b])?;
    let m = tape.mean(ll)?;
    tape.neg(m)
}

/// Pair-matching loss for fixed negatives: `λ4·(CE_I→T + CE_T→I)`.
pub fn pm_loss_with_negatives<T: Scalar>(
    tape: &mut Tape<T>,
    v: Var,
    t: Var,
    heads: &PmHeadVars,
    negatives: &Negatives,
    fusion: PmFusion,
    lambda_pm: f64,
) -> Result<Var> {
    let b = batch_of(tape, v, "pm_loss")?;
    if negatives.text_for_image.len() != b || negatives.image_for_text.len() != b {
        return Err(Error::invalid("negatives do not match the batch size"));
    }
    let i2t = pm_direction(tape, v, t, &negatives.text_for_image, heads.i2t, fusion)?;
    let t2i = pm_direction(tape, t, v, &negatives.image_for_text, heads.t2i, fusion)?;
    let s = tape.add(i2t, t2i)?;
    tape.scale(s, T::of(lambda_pm))
}

/// Pair-matching loss with negatives drawn from the current (detached)
/// student similarity at temperature `tau`. Returns the loss and the draw.
#[allow(clippy::too_many_arguments)]
pub fn pm_loss<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    v: Var,
    t: Var,
    heads: &PmHeadVars,
    fusion: PmFusion,
    lambda_pm: f64,
    tau: f64,
    rng: &mut R,
) -> Result<(Var, Negatives)> {
    let sim = tape.value(v).matmul(&tape.value(t).transposed()?)?;
    let negatives = sample_negatives(&sim, tau, rng)?;
    let loss = pm_loss_with_negatives(tape, v, t, heads, &negatives, fusion, lambda_pm)?;
    Ok((loss, negatives))
}

/// Per-component values of one total-loss evaluation. KD and PM entries
/// are the weighted contributions, so they add up to `total`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub clip: f64,
    pub fd: f64,
    pub ic: f64,
    pub crd: f64,
    pub pm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn component_sum(&self) -> f64 {
        self.clip + self.fd + self.ic + self.crd + self.pm
    }
}

/// What to include in [`total_loss`] beyond the CLIP term.
#[derive(Clone, Copy, Debug)]
pub struct LossSetup<'a> {
    pub weights: LossWeights,
    /// Teacher embeddings `(V_t, T_t)`; KD terms are skipped when absent.
    pub teacher: Option<(Var, Var)>,
    pub ic_include_positive: bool,
    /// Heads and negatives; the PM term is skipped when absent.
    pub pm: Option<(&'a PmHeadVars, &'a Negatives)>,
    pub fusion: PmFusion,
}

/// `L_CLIP + L_KD + L_PM`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    v_s: Var,
    t_s: Var,
    inv_tau: Var,
    setup: &LossSetup<'_>,
) -> Result<(Var, LossBreakdown)> {
    setup.weights.validate()?;
    let clip = clip_contrastive(tape, v_s, t_s, inv_tau)?;
    let mut total = clip;
    let mut out = LossBreakdown {
        clip: tape.value(clip).item().f64(),
        ..Default::default()
    };
    if let Some((v_t, t_t)) = setup.teacher {
        let e = EmbeddingBatch { v_s, t_s, v_t, t_t };
        let kd = kd_loss(tape, &e, inv_tau, &setup.weights, setup.ic_include_positive)?;
        out.fd = tape.value(kd.fd).item().f64();
        out.ic = tape.value(kd.ic).item().f64();
        out.crd = tape.value(kd.crd).item().f64();
        total = tape.add(total, kd.total)?;
    }
    if let Some((heads, negs)) = setup.pm {
        let pm = pm_loss_with_negatives(tape, v_s, t_s, heads, negs, setup.fusion, setup.weights.lambda_pm)?;
        out.pm = tape.value(pm).item().f64();
        total = tape.add(total, pm)?;
    }
    out.total = tape.value(total).item().f64();
    Ok((total, out))
}
