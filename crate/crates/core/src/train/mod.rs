//! Patch sampling, augmentation, SGD with momentum and the training loop.

mod augment;
mod sample;

pub use augment::{augment, AugmentOp, Axis};
pub use sample::{fine_origin_ranges, sample, sample_coarse, sample_fine, Patch, SamplerSpec, StageKind};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, shape_err, Error, Result};
use crate::net::{loss_overall, Checkpoint, LossBreakdown, NetworkConfig, ResDsn};
use crate::rng::{self, Purpose};
use crate::tensor::{Param, Scalar, Tensor};
use crate::volume::{CtVolume, LabelVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub power: f64,
    pub batch_size: usize,
    pub iterations: u64,
    /// Log every this many iterations (the last iteration is always logged).
    pub log_every: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 0.01,
            momentum: 0.9,
            power: 0.9,
            batch_size: 16,
            iterations: 80_000,
            log_every: 20,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(invalid_arg!("base learning rate must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid_arg!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.iterations == 0 || self.log_every == 0 {
            return Err(invalid_arg!("batch size, iterations and log interval must be positive"));
        }
        Ok(())
    }
}

/// `base * (1 - t / total)^power`.
pub fn lr_poly(t: u64, total: u64, base: f64, power: f64) -> Result<f64> {
    if t > total || total == 0 {
        return Err(invalid_arg!("iteration {t} outside schedule of {total}"));
    }
    Ok(base * (1.0 - t as f64 / total as f64).powf(power))
}

/// Momentum buffers, one per parameter, in parameter order.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub velocity: Vec<Tensor<T>>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub t: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &[&mut Param<T>], momentum: f64, weight_decay: f64) -> Self {
        OptimState {
            velocity: params.iter().map(|p| Tensor::zeros_like(&p.value)).collect(),
            momentum,
            weight_decay,
            t: 0,
        }
    }
}

/// `v <- momentum * v + (g + decay * w)`, `w <- w - lr * v`. Parameters
/// flagged without decay skip the `decay * w` term.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Param<T>], state: &mut OptimState<T>, lr: f64) -> Result<()> {
    if params.len() != state.velocity.len() {
        return Err(shape_err!("{} parameters for {} velocity buffers", params.len(), state.velocity.len()));
    }
    let (mu, lr) = (T::of(state.momentum), T::of(lr));
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        if v.shape() != p.value.shape() || p.grad.shape() != p.value.shape() {
            return Err(shape_err!("velocity {:?} for parameter {:?}", v.shape(), p.value.shape()));
        }
        let lambda = if p.decay { T::of(state.weight_decay) } else { T::zero() };
        let Param { value, grad, .. } = &mut **p;
        for ((w, &g), vel) in value.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
            *vel = mu * *vel + (g + lambda * *w);
            *w -= lr * *vel;
        }
    }
    state.t += 1;
    Ok(())
}

/// One training case: a preprocessed volume and its mask.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub image: CtVolume,
    pub label: LabelVolume,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: u64,
    pub lr: f64,
    pub loss_main: f64,
    pub loss_aux1: f64,
    pub loss_aux2: f64,
    pub loss_total: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "iter,lr,loss_main,loss_aux1,loss_aux2,loss_total";

    fn new(iter: u64, lr: f64, l: &LossBreakdown) -> Self {
        let aux = |k: usize| l.aux.get(k).copied().unwrap_or(0.0);
        LogRow {
            iter,
            lr,
            loss_main: l.main,
            loss_aux1: aux(0),
            loss_aux2: aux(1),
            loss_total: l.total,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6e},{:.6},{:.6},{:.6},{:.6}",
            self.iter, self.lr, self.loss_main, self.loss_aux1, self.loss_aux2, self.loss_total
        )
    }
}

/// A network together with its optimiser state.
pub struct Trainer {
    pub net: ResDsn<f32>,
    pub optim: OptimState<f32>,
}

impl Trainer {
    pub fn new(net: ResDsn<f32>, momentum: f64) -> Self {
        let wd = net.config().weight_decay;
        let mut net = net;
        let optim = OptimState::new(&net.params_mut(), momentum, wd);
        Trainer { net, optim }
    }

    /// Forward, loss, backward and one SGD update on a mini-batch.
    pub fn step(&mut self, x: &Tensor<f32>, labels: &[u8], lr: f64) -> Result<LossBreakdown> {
        let (out, trace) = self.net.forward_train(x)?;
        let aux_w = self.net.config().aux_weights;
        let (loss, grads) = loss_overall(&out, labels, aux_w)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                iteration: self.optim.t,
                loss: loss.total,
            });
        }
        drop(out);
        self.net.zero_grad();
        self.net.backward(&trace, &grads)?;
        drop(trace);
        let mut params = self.net.params_mut();
        sgd_step(&mut params, &mut self.optim, lr)?;
        if params.iter().any(|p| !p.value.all_finite()) {
            return Err(Error::Diverged {
                iteration: self.optim.t,
                loss: f64::NAN,
            });
        }
        Ok(loss)
    }
}

/// Stacks patches into a `[n, 1, d, h, w]` batch and a flat label list.
pub fn batch_tensor(patches: &[Patch]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = patches.first().ok_or_else(|| invalid_arg!("empty batch"))?;
    let [w, h, d] = first.0.dims();
    let mut x = Vec::with_capacity(patches.len() * w * h * d);
    let mut y = Vec::with_capacity(x.capacity());
    for (img, lab) in patches {
        img.same_dims(&first.0)?;
        x.extend_from_slice(img.data());
        y.extend_from_slice(lab.data());
    }
    Ok((Tensor::from_vec(&[patches.len(), 1, d, h, w], x)?, y))
}

/// Draws the augmented patch for one batch slot. Depends only on
/// `(seed, iteration, slot)`.
pub fn draw_patch(spec: &SamplerSpec, data: &[Case], seed: u64, iteration: u64, slot: usize) -> Result<Patch> {
    let mut r = rng::stream(seed, Purpose::Sample, iteration, slot as u64);
    let case = &data[rand::Rng::random_range(&mut r, 0..data.len())];
    let (img, lab) = sample(spec, &case.image, &case.label, &mut r)?;
    let (img, lab, _) = augment(&img, &lab, &mut r)?;
    Ok((img, lab))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub optim: OptimConfig,
    pub fine_margin: usize,
}

/// Runs the full sampler, augment, forward, loss, SGD loop for one stage
/// and returns the final checkpoint. `on_log` receives a row every
/// `log_every` iterations and after the last one.
pub fn train_stage(
    cfg: &TrainConfig,
    data: &[Case],
    stage: StageKind,
    seed: u64,
    mut on_log: impl FnMut(&LogRow),
) -> Result<Checkpoint> {
    cfg.optim.validate()?;
    if data.is_empty() {
        return Err(invalid_arg!("training needs at least one case"));
    }
    if stage == StageKind::Fine {
        if let Some(c) = data.iter().find(|c| c.label.count() == 0) {
            return Err(invalid_arg!("case {} has an empty label; fine-stage sampling needs foreground", c.id));
        }
    }
    let spec = SamplerSpec {
        stage,
        patch_size: cfg.network.input_size,
        fine_margin: cfg.fine_margin,
    };
    let net = ResDsn::new(cfg.network.clone(), seed)?;
    let mut trainer = Trainer::new(net, cfg.optim.momentum);
    let total = cfg.optim.iterations;
    for t in 0..total {
        let patches = (0..cfg.optim.batch_size)
            .into_par_iter()
            .map(|slot| draw_patch(&spec, data, seed, t, slot))
            .collect::<Result<Vec<_>>>()?;
        let (x, y) = batch_tensor(&patches)?;
        drop(patches);
        let lr = lr_poly(t, total, cfg.optim.base_lr, cfg.optim.power)?;
        let loss = trainer.step(&x, &y, lr)?;
        if (t + 1) % cfg.optim.log_every == 0 || t + 1 == total {
            let row = LogRow::new(t + 1, lr, &loss);
            log::info!("{stage} {}", row.to_csv());
            on_log(&row);
        }
    }
    Ok(trainer.net.to_checkpoint(total, seed))
}
