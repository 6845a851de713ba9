//! Attention-map similarity across adjacent blocks, parameter accounting and
//! forward-throughput measurement.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DType, Scalar, Tape, Tensor};
use crate::blocks::{BlockGeometry, BlockKind, BlockStack, SharePolicy};
use crate::encoders::{FreezeMask, ModelBundle};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};

/// Entries below this are raised to it before JS is evaluated.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean of `G` stacked `n×n` matrices given as a `G·n × n` tensor.
pub fn avg_attention_matrix<T: Scalar>(stack: &Tensor<T>, n: usize) -> Result<Tensor<f64>> {
    let (rows, cols) = stack.dims2()?;
    if n == 0 || cols != n || rows % n != 0 || rows == 0 {
        return Err(Error::InvalidShape {
            shape: stack.shape().to_vec(),
            reason: format!("expected a stack of {n}×{n} matrices"),
        });
    }
    let groups = rows / n;
    let mut out = vec![0.0; n * n];
    for g in 0..groups {
        for (o, v) in out.iter_mut().zip(&stack.data()[g * n * n..(g + 1) * n * n]) {
            *o += v.f64();
        }
    }
    let inv = 1.0 / groups as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(&[n, n], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JsUnit {
    Nats,
    Bits,
}

/// JS divergence with the probability mass that clamping removed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JsValue {
    pub js: f64,
    /// Total negative mass clamped to zero, averaged over rows of P and Q.
    pub clipped_mass: f64,
}

fn to_distribution(row: &[f64], what: &str, r: usize) -> Result<(Vec<f64>, f64)> {
    let clipped: f64 = row.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    let clamped: Vec<f64> = row.iter().map(|v| v.max(0.0)).collect();
    let sum: f64 = clamped.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::Degenerate(format!("row {r} of {what} has no positive mass")));
    }
    let floored: Vec<f64> = clamped.iter().map(|v| (v / sum).max(PROB_FLOOR)).collect();
    let z: f64 = floored.iter().sum();
    Ok((floored.into_iter().map(|v| v / z).collect(), clipped))
}

fn kl_to_mid(p: &[f64], m: &[f64]) -> f64 {
    p.iter().zip(m).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Row-averaged Jensen–Shannon divergence between two row-stochastic
/// matrices. Negative entries are clamped to zero and rows renormalised
/// first; the clamped mass is reported.
pub fn js_divergence_detailed<A: Scalar, B: Scalar>(p: &Tensor<A>, q: &Tensor<B>, unit: JsUnit) -> Result<JsValue> {
    if p.shape() != q.shape() {
        return Err(Error::Shape {
            op: "js_divergence",
            lhs: p.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    let (rows, _) = p.dims2()?;
    let (pf, qf) = (p.to_f64_vec(), q.to_f64_vec());
    let n = pf.len() / rows;
    let mut total = 0.0;
    let mut clipped = 0.0;
    for r in 0..rows {
        let (a, ca) = to_distribution(&pf[r * n..(r + 1) * n], "P", r)?;
        let (b, cb) = to_distribution(&qf[r * n..(r + 1) * n], "Q", r)?;
        let m: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        total += 0.5 * kl_to_mid(&a, &m) + 0.5 * kl_to_mid(&b, &m);
        clipped += 0.5 * (ca + cb);
    }
    let js = (total / rows as f64).clamp(0.0, std::f64::consts::LN_2);
    Ok(JsValue {
        js: match unit {
            JsUnit::Nats => js,
            JsUnit::Bits => js / std::f64::consts::LN_2,
        },
        clipped_mass: clipped / rows as f64,
    })
}

/// Row-averaged JS divergence in nats, in `[0, ln 2]`.
pub fn js_divergence<A: Scalar, B: Scalar>(p: &Tensor<A>, q: &Tensor<B>) -> Result<f64> {
    Ok(js_divergence_detailed(p, q, JsUnit::Nats)?.js)
}

/// JS divergence between the averaged attention of blocks `i` and `i + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct JsPair {
    pub pair_index: usize,
    pub js_nats: f64,
    pub clipped_mass: f64,
}

/// Adjacent-pair profile from per-block averaged attention matrices.
pub fn js_profile(averages: &[Tensor<f64>]) -> Result<Vec<JsPair>> {
    if averages.len() < 2 {
        return Err(Error::invalid("an attention profile needs at least two blocks"));
    }
    averages
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let v = js_divergence_detailed(&w[0], &w[1], JsUnit::Nats)?;
            Ok(JsPair {
                pair_index: i,
                js_nats: v.js,
                clipped_mass: v.clipped_mass,
            })
        })
        .collect()
}

/// Runs the image tower on a probe batch and profiles its attention blocks.
pub fn adjacent_js_profile<T: Scalar>(bundle: &ModelBundle<T>, probe: &Tensor<T>) -> Result<Vec<JsPair>> {
    let mut tape = Tape::new();
    let mut binder = bundle.constant_binder();
    let mut maps = Vec::new();
    bundle.encode_image(&mut tape, &mut binder, probe, Some(&mut maps))?;
    let n = bundle.config.image.tokens()?;
    let averages = maps
        .iter()
        .map(|m| avg_attention_matrix(tape.value(*m), n))
        .collect::<Result<Vec<_>>>()?;
    js_profile(&averages)
}

pub fn write_js_csv(path: &Path, pairs: &[JsPair]) -> Result<()> {
    let mut out = String::from("pair_index,js_nats,clipped_mass\n");
    for p in pairs {
        out.push_str(&format!("{},{:.9},{:.9}\n", p.pair_index, p.js_nats, p.clipped_mass));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parameter counts of one module.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamRow {
    pub module: String,
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
}

/// Module a tensor belongs to: block and mixer tensors group under their
/// tower's `blocks`, everything else under its first two name components.
pub fn module_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    if parts.len() >= 2 && (parts[1] == "blocks" || parts[1] == "mixers") {
        return format!("{}.blocks", parts[0]);
    }
    match parts.as_slice() {
        [one] => (*one).to_string(),
        ["pm", ..] => "pm".to_string(),
        [a, b, ..] => format!("{a}.{b}"),
        [] => String::new(),
    }
}

/// Per-module counts in first-seen order, plus a final `total` row. Each
/// stored tensor is counted once, so shared mixers count once.
pub fn param_report<T: Scalar>(store: &ParamStore<T>, freeze: &FreezeMask) -> Vec<ParamRow> {
    let mut rows: Vec<ParamRow> = Vec::new();
    let mut total = ParamRow {
        module: "total".into(),
        ..Default::default()
    };
    for (id, name, t) in store.iter() {
        let module = module_of(name);
        let row = match rows.iter_mut().position(|r| r.module == module) {
            Some(i) => &mut rows[i],
            None => {
                rows.push(ParamRow {
                    module,
                    ..Default::default()
                });
                rows.last_mut().expect("just pushed")
            }
        };
        let k = t.numel();
        let trainable = freeze.0.get(id.index()).copied().unwrap_or(true);
        for r in [&mut *row, &mut total] {
            if trainable {
                r.trainable += k;
            } else {
                r.frozen += k;
            }
            r.total += k;
        }
    }
    rows.push(total);
    rows
}

pub fn bundle_param_report<T: Scalar>(bundle: &ModelBundle<T>) -> Vec<ParamRow> {
    param_report(&bundle.store, &bundle.freeze)
}

pub fn write_params_csv(path: &Path, rows: &[ParamRow]) -> Result<()> {
    let mut out = String::from("module,trainable,frozen,total\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.module, r.trainable, r.frozen, r.total));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub block_kind: BlockKind,
    pub d: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub n_blocks: usize,
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(block_kind: BlockKind, d: usize, heads: usize, seq_len: usize, batch: usize) -> Self {
        BenchConfig {
            block_kind,
            d,
            heads,
            seq_len,
            batch,
            n_blocks: 4,
            iters: 20,
            warmup: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub dtype: DType,
    /// Wall-clock seconds of each timed forward, warmup excluded.
    pub times: Vec<f64>,
    pub median_seconds: f64,
    pub items_per_sec: f64,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Times forward passes of a block stack (adjacent-pair sharing for SAS-P)
/// on a fixed random input and reports the median throughput.
pub fn throughput_bench<T: Scalar>(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.iters < 3 {
        return Err(Error::invalid(format!("need at least 3 timed iterations, got {}", cfg.iters)));
    }
    if cfg.warmup < 1 {
        return Err(Error::invalid("need at least one warmup iteration"));
    }
    if cfg.batch == 0 || cfg.seq_len == 0 || cfg.n_blocks == 0 {
        return Err(Error::invalid("batch, sequence length and block count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let geom = BlockGeometry::new(cfg.d, cfg.heads);
    let mut store = ParamStore::<T>::new();
    let stack = BlockStack::init(
        &mut store,
        "bench",
        cfg.block_kind,
        cfg.n_blocks,
        SharePolicy::AdjacentPairs,
        &geom,
        &mut rng,
    )?;
    let x = Tensor::<T>::randn(&[cfg.batch * cfg.seq_len, cfg.d], 1.0, &mut rng);
    let mut times = Vec::with_capacity(cfg.iters);
    for i in 0..cfg.warmup + cfg.iters {
        let start = Instant::now();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, None);
        let xv = tape.constant(x.clone());
        let y = stack.forward(&mut tape, &mut binder, xv, cfg.seq_len, None)?;
        std::hint::black_box(tape.value(y));
        let dt = start.elapsed().as_secs_f64();
        if i >= cfg.warmup {
            times.push(dt);
        }
    }
    let med = median(&times);
    Ok(BenchReport {
        config: cfg.clone(),
        dtype: T::DTYPE,
        times,
        median_seconds: med,
        items_per_sec: cfg.batch as f64 / med,
    })
}

pub fn write_bench_csv(path: &Path, reports: &[BenchReport]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("block_kind,d,heads,seq_len,batch,n_blocks,dtype,warmup,reps,median_ms,items_per_sec\n");
    for r in reports {
        let c = &r.config;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{:.4},{:.3}\n",
            c.block_kind.name(),
            c.d,
            c.heads,
            c.seq_len,
            c.batch,
            c.n_blocks,
            r.dtype.name(),
            c.warmup,
            r.times.len(),
            r.median_seconds * 1e3,
            r.items_per_sec
        ));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
