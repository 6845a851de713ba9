use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW moments. Frozen parameters have no entry at all.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub hyper: AdamWHyper,
    pub step: u64,
    /// `(m, v)` per parameter index; `None` for frozen parameters.
    pub moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
    /// Whether weight decay applies to each parameter.
    pub decay: Vec<bool>,
}

/// Weight decay applies to matrices only; vectors (biases, norm gains,
/// shaping scalars) and the temperature are left alone.
pub fn default_decay_mask<T: Scalar>(store: &ParamStore<T>) -> Vec<bool> {
    store.iter().map(|(_, _, t)| t.rank() >= 2).collect()
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, trainable: &[bool], hyper: AdamWHyper) -> Self {
        let moments = store
            .iter()
            .map(|(id, _, t)| {
                trainable[id.index()].then(|| (Tensor::zeros(t.shape()), Tensor::zeros(t.shape())))
            })
            .collect();
        AdamW {
            hyper,
            step: 0,
            moments,
            decay: default_decay_mask(store),
        }
    }

    /// One decoupled-decay Adam update. `grads[i] == None` on a trainable
    /// parameter is treated as a zero gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if !(lr >= 0.0) || !(weight_decay >= 0.0) {
            return Err(Error::invalid(format!("lr {lr} and weight decay {weight_decay} must be >= 0")));
        }
        if grads.len() != self.moments.len() || store.len() != self.moments.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, got {} grads for {} tensors",
                self.moments.len(),
                grads.len(),
                store.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let (Some((m, _)), Some(g)) = (&self.moments[i], g) {
                if m.shape() != g.shape() {
                    return Err(Error::Shape {
                        op: "adamw_step",
                        lhs: m.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
        }
        self.step += 1;
        let AdamWHyper { beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some((m, v)) = self.moments[i].as_mut() else {
                continue;
            };
            let wd = if self.decay[i] { weight_decay } else { 0.0 };
            let w = store.get_mut(id);
            let g = grads[i].as_ref();
            let (b1, b2, lr_t, shrink) = (T::of(beta1), T::of(beta2), T::of(lr), T::of(1.0 - lr * wd));
            let (ib1, ib2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
            let (c1, c2, e) = (T::of(bc1), T::of(bc2), T::of(eps));
            for k in 0..w.numel() {
                let gk = g.map_or(T::zero(), |g| g.data()[k]);
                let mk = b1 * m.data()[k] + ib1 * gk;
                let vk = b2 * v.data()[k] + ib2 * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let update = (mk / c1) / ((vk / c2).sqrt() + e);
                let wk = w.data()[k];
                w.data_mut()[k] = wk * shrink - lr_t * update;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to 0 at `total`
/// (or flat at `lr_peak` for [`Schedule::Constant`]).
pub fn lr_schedule(step: usize, warmup: usize, total: usize, lr_peak: f64, schedule: Schedule) -> Result<f64> {
    if total < warmup {
        return Err(Error::invalid(format!("total steps {total} < warmup steps {warmup}")));
    }
    if step > total {
        return Err(Error::invalid(format!("step {step} beyond total {total}")));
    }
    if step < warmup {
        return Ok(lr_peak * step as f64 / warmup as f64);
    }
    Ok(match schedule {
        Schedule::Constant => lr_peak,
        Schedule::Cosine if total == warmup => lr_peak,
        Schedule::Cosine => {
            let p = (step - warmup) as f64 / (total - warmup) as f64;
            lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        }
    })
}
