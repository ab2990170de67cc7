//! SGD with momentum, poly learning-rate schedule and the episodic training
//! loop.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::net::{EpisodeInput, LossReport, Trfs, TrfsParams};
use crate::nn::{is_weight, named_leaves, ParamMap};
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyper {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Rescales the batch gradient to this global L2 norm when it is larger.
    pub clip_norm: Option<f64>,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            total_steps: 400,
            batch_size: 2,
            clip_norm: Some(1.0),
        }
    }
}

impl Hyper {
    /// `base_lr · (1 − t/T)^power`, zero from `T` on.
    pub fn lr(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        self.base_lr * (1.0 - step as f64 / self.total_steps as f64).powf(self.poly_power)
    }
}

/// Momentum buffers in parameter traversal order.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    velocity: Vec<Vec<T>>,
    decay_mask: Vec<bool>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new<M: ParamMap<Tensor<T>>>(params: &M) -> Self {
        let leaves = named_leaves(params, "");
        Sgd {
            velocity: leaves.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect(),
            decay_mask: leaves.iter().map(|(n, _)| is_weight(n)).collect(),
        }
    }

    /// `v ← μ·v + g + λ·w` (λ only on weights), `w ← w − lr·v`.
    pub fn step<M>(&mut self, params: &M, grads: &M, lr: f64, momentum: f64, weight_decay: f64) -> M
    where
        M: ParamMap<Tensor<T>, Output<Tensor<T>> = M>,
    {
        let grads: Vec<Tensor<T>> = named_leaves(grads, "").into_iter().map(|(_, g)| g).collect();
        assert_eq!(grads.len(), self.velocity.len(), "optimizer built for a different parameter set");
        let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
        let mut i = 0;
        params.map_params("", &mut |_, w: &Tensor<T>| {
            let (v, g, decay) = (&mut self.velocity[i], grads[i].data(), self.decay_mask[i]);
            i += 1;
            let data = w
                .data()
                .iter()
                .zip(g)
                .zip(v.iter_mut())
                .map(|((&w, &g), v)| {
                    let g = if decay { g + wd * w } else { g };
                    *v = mu * *v + g;
                    w - lr * *v
                })
                .collect();
            Tensor::new_unchecked(w.shape().to_vec(), data)
        })
    }
}

fn add_into<T: Scalar>(acc: &TrfsParams<Tensor<T>>, g: &TrfsParams<Tensor<T>>) -> TrfsParams<Tensor<T>> {
    let other: Vec<Tensor<T>> = named_leaves(g, "").into_iter().map(|(_, t)| t).collect();
    let mut i = 0;
    acc.map_params("", &mut |_, a: &Tensor<T>| {
        let b = &other[i];
        i += 1;
        Tensor::new_unchecked(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect())
    })
}

/// One optimizer step on a batch. Gradients are averaged over the batch in
/// order. On a non-finite loss the model is left untouched.
pub fn train_step<T: Scalar>(
    model: &mut Trfs<T>,
    opt: &mut Sgd<T>,
    batch: &[&EpisodeInput<T>],
    hyper: &Hyper,
    step: usize,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::EmptyInput { op: "train_step" });
    }
    let mut reports = Vec::with_capacity(batch.len());
    let mut sum: Option<TrfsParams<Tensor<T>>> = None;
    for input in batch {
        let (rep, g) = model.loss_and_grad(input)?;
        reports.push(rep);
        sum = Some(match sum {
            None => g,
            Some(acc) => add_into(&acc, &g),
        });
    }
    let mut scale = 1.0 / batch.len() as f64;
    let sum = sum.expect("non-empty batch");
    if let Some(max) = hyper.clip_norm {
        let sq: f64 = named_leaves(&sum, "")
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.as_f64() * v.as_f64()))
            .sum();
        let norm = sq.sqrt() * scale;
        if norm > max {
            scale *= max / norm;
        }
    }
    let scale = T::of(scale);
    let mean = sum.map_params("", &mut |_, t: &Tensor<T>| t.map(|v| v * scale));
    let updated = opt.step(model.params(), &mean, hyper.lr(step), hyper.momentum, hyper.weight_decay);
    model.set_params(updated);
    Ok(LossReport::mean(&reports))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossReport,
    pub lr: f64,
}

/// Trains on a fixed pool of prepared episodes for `hyper.total_steps`
/// steps. Each pass over the pool uses a fresh seeded shuffle.
pub fn fit<T: Scalar>(
    model: &mut Trfs<T>,
    pool: &[EpisodeInput<T>],
    hyper: &Hyper,
    seed: u64,
    mut log: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if hyper.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    if pool.is_empty() && hyper.total_steps > 0 {
        return Err(Error::EmptyInput { op: "fit" });
    }
    let mut opt = Sgd::new(model.params());
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut history = Vec::with_capacity(hyper.total_steps);
    for step in 0..hyper.total_steps {
        let mut batch = Vec::with_capacity(hyper.batch_size);
        while batch.len() < hyper.batch_size {
            if order.is_empty() {
                order = (0..pool.len()).collect();
                order.shuffle(&mut rng_for(seed, "episode-order", &[epoch]));
                order.reverse();
                epoch += 1;
            }
            batch.push(&pool[order.pop().expect("refilled")]);
        }
        let loss = train_step(model, &mut opt, &batch, hyper, step)?;
        let entry = StepLog {
            step,
            loss,
            lr: hyper.lr(step),
        };
        log(&entry);
        history.push(entry);
    }
    Ok(history)
}
