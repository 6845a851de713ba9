use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::data::{make_batch, Batch, CaptionChoice, Dataset};
use crate::encoders::{inherit_weights, FreezePolicy, ModelBundle, TokenBatch};
use crate::error::{Error, Result};
use crate::losses::{inv_temperature, sample_negatives, total_loss, LossBreakdown, LossSetup, PmHeadVars};
use crate::rng::{purpose, stream};

use super::checkpoint::{Checkpoint, RngState};
use super::config::TrainConfig;
use super::optim::{lr_schedule, AdamW};

pub const METRICS_HEADER: &str = "kind,step,epoch,lr,l_clip,l_fd,l_ic,l_crd,l_pm,l_total,r1_i2t,r1_t2i,loader_mode";

/// Retrieval recall at rank one in both directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Retrieval {
    pub i2t: f64,
    pub t2i: f64,
    pub n: usize,
}

impl Retrieval {
    pub fn mean(&self) -> f64 {
        0.5 * (self.i2t + self.t2i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricRow {
    Step {
        step: u64,
        epoch: usize,
        lr: f64,
        loss: LossBreakdown,
    },
    Eval {
        step: u64,
        epoch: usize,
        r1: Retrieval,
    },
}

impl MetricRow {
    pub fn to_csv(&self, loader_mode: &str) -> String {
        match self {
            MetricRow::Step { step, epoch, lr, loss } => format!(
                "step,{step},{epoch},{lr},{},{},{},{},{},{},,,{loader_mode}",
                loss.clip, loss.fd, loss.ic, loss.crd, loss.pm, loss.total
            ),
            MetricRow::Eval { step, epoch, r1 } => {
                format!("eval,{step},{epoch},,,,,,,,{},{},{loader_mode}", r1.i2t, r1.t2i)
            }
        }
    }
}

pub fn metrics_csv(rows: &[MetricRow], loader_mode: &str) -> String {
    let mut out = String::with_capacity(rows.len() * 120);
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv(loader_mode));
        out.push('\n');
    }
    out
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// R@1 for aligned `N×e` embedding sets. Ties resolve to the lowest index.
pub fn recall_at_1<T: Scalar>(images: &Tensor<T>, texts: &Tensor<T>) -> Result<Retrieval> {
    let (n, e) = images.dims2()?;
    if texts.shape() != [n, e] {
        return Err(Error::Shape {
            op: "recall_at_1",
            lhs: images.shape().to_vec(),
            rhs: texts.shape().to_vec(),
        });
    }
    let sim = images.cast::<f64>().matmul(&texts.cast::<f64>().transposed()?)?;
    let simt = sim.transposed()?;
    let i2t = (0..n).filter(|&i| argmax_lowest(sim.row(i)) == i).count();
    let t2i = (0..n).filter(|&j| argmax_lowest(simt.row(j)) == j).count();
    Ok(Retrieval {
        i2t: i2t as f64 / n as f64,
        t2i: t2i as f64 / n as f64,
        n,
    })
}

const EVAL_CHUNK: usize = 128;

/// Encodes the whole split (caption 0, no augmentation) and scores R@1.
pub fn evaluate_retrieval<T: Scalar>(bundle: &ModelBundle<T>, eval: &Dataset) -> Result<Retrieval> {
    let n = eval.manifest.samples.len();
    if n == 0 {
        return Err(Error::invalid("empty evaluation set"));
    }
    let e = bundle.config.embed_dim;
    let (mut img, mut txt) = (Vec::with_capacity(n * e), Vec::with_capacity(n * e));
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let batch: Batch<T> = make_batch(
            eval,
            chunk,
            &crate::data::AugmentPolicy::disabled(),
            CaptionChoice::Index(0),
            bundle.config.text.max_len,
            0,
            0,
        )?;
        img.extend_from_slice(bundle.embed_images(&batch.images)?.data());
        txt.extend_from_slice(bundle.embed_text(&batch.tokens)?.data());
    }
    recall_at_1(&Tensor::new(&[n, e], img)?, &Tensor::new(&[n, e], txt)?)
}

fn load_batch<T: Scalar>(cfg: &TrainConfig, ds: &Dataset, idx: &[usize], step: u64, max_len: usize) -> Result<Batch<T>> {
    let load = |part: &[usize]| make_batch::<T>(ds, part, &cfg.augment, CaptionChoice::Random, max_len, cfg.seed, step);
    if cfg.loader_workers <= 1 || idx.len() < 2 {
        return load(idx);
    }
    let per = idx.len().div_ceil(cfg.loader_workers);
    let parts: Vec<Result<Batch<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = idx.chunks(per).map(|c| s.spawn(move || load(c))).collect();
        handles.into_iter().map(|h| h.join().expect("loader thread panicked")).collect()
    });
    let mut images = Vec::new();
    let mut ids = Vec::new();
    let mut caption_idx = Vec::new();
    for p in parts {
        let p = p?;
        images.extend_from_slice(p.images.data());
        ids.extend_from_slice(&p.tokens.ids);
        caption_idx.extend(p.caption_idx);
    }
    let s = ds.manifest.header.image_size;
    Ok(Batch {
        images: Tensor::new(&[idx.len(), 3, s, s], images)?,
        tokens: TokenBatch::new(idx.len(), max_len, ids)?,
        caption_idx,
    })
}

/// One training run in progress.
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub bundle: ModelBundle<T>,
    pub opt: AdamW<T>,
    pub teacher: Option<ModelBundle<T>>,
    pub train: Dataset,
    pub eval: Option<Dataset>,
    /// Number of optimizer steps already taken.
    pub step: u64,
    order: Option<(usize, Vec<usize>)>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut bundle = ModelBundle::<T>::new(cfg.model.clone(), &mut stream(&[cfg.seed, purpose::INIT]))?;
        let teacher = Self::load_teacher(&cfg)?;
        if cfg.use_wi {
            let t = teacher.as_ref().expect("validated");
            let mapping = bundle.default_inheritance(t);
            if mapping.is_empty() {
                return Err(Error::Config("teacher shares no inheritable tensors with the student".into()));
            }
            inherit_weights(&mut bundle, t, &mapping)?;
            bundle.apply_freeze(cfg.freeze_policy);
        } else {
            bundle.apply_freeze(FreezePolicy::AllTrainable);
        }
        let opt = AdamW::new(&bundle.store, bundle.freeze.as_slice(), cfg.adam);
        Self::assemble(cfg, bundle, opt, teacher, 0)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint<T>) -> Result<Self> {
        let cfg = ckpt
            .train
            .ok_or_else(|| Error::Format("checkpoint has no training config to resume".into()))?;
        cfg.validate()?;
        let opt = ckpt
            .optimizer
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        if ckpt.rng.seed != cfg.seed || ckpt.rng.step != ckpt.step {
            return Err(Error::Format("checkpoint rng state disagrees with its config".into()));
        }
        let teacher = Self::load_teacher(&cfg)?;
        Self::assemble(cfg, ckpt.bundle, opt, teacher, ckpt.step)
    }

    fn load_teacher(cfg: &TrainConfig) -> Result<Option<ModelBundle<T>>> {
        if !(cfg.use_kd || cfg.use_wi) {
            return Ok(None);
        }
        let path = cfg.teacher.as_ref().expect("validated");
        let t = Checkpoint::<T>::load(path)?.bundle;
        if t.config.embed_dim != cfg.model.embed_dim {
            return Err(Error::Config(format!(
                "teacher embed_dim {} differs from student embed_dim {}",
                t.config.embed_dim, cfg.model.embed_dim
            )));
        }
        Ok(Some(t))
    }

    fn assemble(
        cfg: TrainConfig,
        bundle: ModelBundle<T>,
        opt: AdamW<T>,
        teacher: Option<ModelBundle<T>>,
        step: u64,
    ) -> Result<Self> {
        let train = Dataset::load(&cfg.train_manifest)?;
        if train.manifest.samples.len() < cfg.batch_size {
            return Err(Error::Config(format!(
                "{} training samples cannot fill a batch of {}",
                train.manifest.samples.len(),
                cfg.batch_size
            )));
        }
        if train.vocab.len() > cfg.model.text.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} words, model embeds {}",
                train.vocab.len(),
                cfg.model.text.vocab_size
            )));
        }
        let eval = cfg.eval_manifest.as_deref().map(Dataset::load).transpose()?;
        let t = Trainer {
            cfg,
            bundle,
            opt,
            teacher,
            train,
            eval,
            step,
            order: None,
        };
        if step > t.total_steps() {
            return Err(Error::Format(format!("checkpoint step {step} beyond run length {}", t.total_steps())));
        }
        Ok(t)
    }

    /// Full batches per epoch; the remainder of each shuffled epoch is dropped.
    pub fn steps_per_epoch(&self) -> usize {
        self.train.manifest.samples.len() / self.cfg.batch_size
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch() * self.cfg.epochs) as u64
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step as usize / spe;
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.train.manifest.samples.len()).collect();
            perm.shuffle(&mut stream(&[self.cfg.seed, purpose::BATCH_ORDER, epoch as u64]));
            self.order = Some((epoch, perm));
        }
        let pos = step as usize % spe;
        let b = self.cfg.batch_size;
        self.order.as_ref().expect("set above").1[pos * b..(pos + 1) * b].to_vec()
    }

    /// Takes one optimizer step and returns its metrics row (1-based step).
    pub fn train_step(&mut self) -> Result<MetricRow> {
        if self.is_done() {
            return Err(Error::invalid("training already finished"));
        }
        let s = self.step;
        let epoch = s as usize / self.steps_per_epoch();
        let idx = self.batch_indices(s);
        let batch: Batch<T> = load_batch(&self.cfg, &self.train, &idx, s, self.cfg.model.text.max_len)?;
        let lr = lr_schedule(
            s as usize + 1,
            self.cfg.warmup_steps,
            self.total_steps() as usize,
            self.cfg.lr_peak,
            self.cfg.schedule,
        )?;

        let teacher = match (&self.teacher, self.cfg.use_kd) {
            (Some(t), true) => Some((t.embed_images(&batch.images)?, t.embed_text(&batch.tokens)?)),
            _ => None,
        };

        let (grads, breakdown) = self.loss_and_grads(&batch, teacher, s).map_err(|(e, l)| match e {
            Error::NonFinite(_) => self.dump(s, lr, l.as_ref(), e),
            other => other,
        })?;
        self.opt.step(&mut self.bundle.store, &grads, lr, self.cfg.weight_decay)?;
        let floor = T::of(self.cfg.min_tau.ln());
        let lt = self.bundle.store.get_mut(self.bundle.log_tau);
        if lt.data()[0] < floor {
            lt.data_mut()[0] = floor;
        }
        self.step += 1;
        Ok(MetricRow::Step {
            step: self.step,
            epoch,
            lr,
            loss: breakdown,
        })
    }

    #[allow(clippy::type_complexity)]
    fn loss_and_grads(
        &self,
        batch: &Batch<T>,
        teacher: Option<(Tensor<T>, Tensor<T>)>,
        s: u64,
    ) -> std::result::Result<(Vec<Option<Tensor<T>>>, LossBreakdown), (Error, Option<LossBreakdown>)> {
        let mut tape = Tape::new();
        let mut binder = self.bundle.binder();
        let forward = |tape: &mut Tape<T>, binder: &mut crate::params::Binder<'_, T>| -> Result<_> {
            let v = self.bundle.encode_image(tape, binder, &batch.images, None)?;
            let t = self.bundle.encode_text(tape, binder, &batch.tokens, None)?;
            let log_tau = binder.var(tape, self.bundle.log_tau);
            let inv_tau = inv_temperature(tape, log_tau)?;
            let teacher_vars = teacher.map(|(vt, tt)| (tape.constant(vt), tape.constant(tt)));
            let pm = if self.cfg.use_pm {
                let heads = PmHeadVars::bind(&self.bundle.pm, tape, binder)?;
                let sim = tape.value(v).matmul(&tape.value(t).transposed()?)?;
                let rng = &mut stream(&[self.cfg.seed, purpose::NEGATIVES, s]);
                Some((heads, sample_negatives(&sim, self.bundle.tau(), rng)?))
            } else {
                None
            };
            let setup = LossSetup {
                weights: self.cfg.lambdas,
                teacher: teacher_vars,
                ic_include_positive: self.cfg.ic_include_positive,
                pm: pm.as_ref().map(|(h, n)| (h, n)),
                fusion: self.cfg.model.pm_fusion,
            };
            total_loss(tape, v, t, inv_tau, &setup)
        };
        let (loss, breakdown) = forward(&mut tape, &mut binder).map_err(|e| (e, None))?;
        if !breakdown.total.is_finite() {
            return Err((Error::NonFinite("training loss".into()), Some(breakdown)));
        }
        tape.backward(loss).map_err(|e| (e, Some(breakdown)))?;
        Ok((binder.grads(&tape), breakdown))
    }

    fn dump(&self, step: u64, lr: f64, loss: Option<&LossBreakdown>, cause: Error) -> Error {
        let mut msg = format!("aborting at step {} (lr {lr}): {cause}", step + 1);
        if let Some(l) = loss {
            let _ = write!(msg, "; losses {l:?}");
        }
        let _ = write!(msg, "; tau {}", self.bundle.tau());
        for (_, name, t) in self.bundle.store.iter() {
            let bad = t.data().iter().filter(|v| !v.is_finite()).count();
            let max = t.data().iter().map(|v| v.f64().abs()).fold(0.0, f64::max);
            if bad > 0 || max > 1e4 {
                let _ = write!(msg, "; {name}: max|w| {max:.3e}, {bad} non-finite");
            }
        }
        Error::NonFinite(msg)
    }

    pub fn evaluate(&self) -> Result<Option<Retrieval>> {
        self.eval.as_ref().map(|e| evaluate_retrieval(&self.bundle, e)).transpose()
    }

    fn should_eval(&self) -> bool {
        self.eval.is_some()
            && (self.step == self.total_steps() || (self.cfg.eval_every > 0 && self.step.is_multiple_of(self.cfg.eval_every as u64)))
    }

    /// Trains until `stop` steps have been taken (or the run ends), feeding
    /// every row to `sink`.
    pub fn run_until(&mut self, stop: u64, sink: &mut dyn FnMut(&MetricRow) -> Result<()>) -> Result<()> {
        let stop = stop.min(self.total_steps());
        while self.step < stop {
            let row = self.train_step()?;
            sink(&row)?;
            if self.should_eval() {
                let r1 = self.evaluate()?.expect("eval set present");
                sink(&MetricRow::Eval {
                    step: self.step,
                    epoch: (self.step as usize - 1) / self.steps_per_epoch(),
                    r1,
                })?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            bundle: self.bundle.clone(),
            train: Some(self.cfg.clone()),
            step: self.step,
            rng: RngState {
                seed: self.cfg.seed,
                step: self.step,
            },
            optimizer: Some(self.opt.clone()),
        }
    }
}

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct RunSummary<T> {
    pub rows: Vec<MetricRow>,
    pub final_r1: Option<Retrieval>,
    pub checkpoint: Checkpoint<T>,
}

impl<T> RunSummary<T> {
    /// Mean `l_total` over the step rows of `epoch` (0-based).
    pub fn mean_loss_in_epoch(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter_map(|r| match r {
                MetricRow::Step { epoch: e, loss, .. } if *e == epoch => Some(loss.total),
                _ => None,
            })
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Writes rows as they arrive so an aborted run keeps its history.
fn csv_sink<'a>(
    file: Option<&'a mut std::fs::File>,
    path: Option<&'a Path>,
    mode: String,
    rows: &'a mut Vec<MetricRow>,
) -> impl FnMut(&MetricRow) -> Result<()> + 'a {
    use std::io::Write;
    let mut file = file;
    move |row: &MetricRow| {
        if let (Some(f), Some(p)) = (file.as_deref_mut(), path) {
            writeln!(f, "{}", row.to_csv(&mode)).map_err(|e| Error::io(p, e))?;
        }
        rows.push(row.clone());
        Ok(())
    }
}

fn drive<T: Scalar>(mut trainer: Trainer<T>, metrics: Option<&Path>, ckpt_out: Option<&Path>, append: bool) -> Result<RunSummary<T>> {
    use std::io::Write;
    let mut file = match metrics {
        Some(p) => {
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            if !append {
                writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(p, e))?;
            }
            Some(f)
        }
        None => None,
    };
    let mut rows = Vec::new();
    let mode = trainer.cfg.loader_mode();
    {
        let mut sink = csv_sink(file.as_mut(), metrics, mode, &mut rows);
        let total = trainer.total_steps();
        trainer.run_until(total, &mut sink)?;
    }
    let final_r1 = rows.iter().rev().find_map(|r| match r {
        MetricRow::Eval { r1, .. } => Some(*r1),
        _ => None,
    });
    let checkpoint = trainer.checkpoint();
    if let Some(p) = ckpt_out {
        checkpoint.save(p)?;
    }
    Ok(RunSummary {
        rows,
        final_r1,
        checkpoint,
    })
}

/// Trains from scratch per `cfg`, streaming metrics to `metrics` (CSV) and
/// saving the final state to `ckpt_out` when given.
pub fn train_run<T: Scalar>(cfg: &TrainConfig, metrics: Option<&Path>, ckpt_out: Option<&Path>) -> Result<RunSummary<T>> {
    drive(Trainer::new(cfg.clone())?, metrics, ckpt_out, false)
}

/// Continues a checkpointed run to completion, appending to `metrics`.
pub fn resume_run<T: Scalar>(ckpt: Checkpoint<T>, metrics: Option<&Path>, ckpt_out: Option<&Path>) -> Result<RunSummary<T>> {
    drive(Trainer::resume(ckpt)?, metrics, ckpt_out, true)
}

/// Contrastive-only teacher: the teacher preset overlaid with `cfg`'s data,
/// seed and schedule choices is the caller's job; this forces the
/// teacher-specific switches and trains.
pub fn train_teacher<T: Scalar>(cfg: &TrainConfig, metrics: Option<&Path>, ckpt_out: Option<&Path>) -> Result<RunSummary<T>> {
    let cfg = TrainConfig {
        use_kd: false,
        use_pm: false,
        use_wi: false,
        teacher: None,
        freeze_policy: FreezePolicy::AllTrainable,
        ..cfg.clone()
    };
    train_run(&cfg, metrics, ckpt_out)
}
