//! SGD with (Nesterov) momentum, step learning-rate schedules and a plain
//! cross-entropy training loop.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentationPolicy, Dataset};
use crate::error::{Error, Result};
use crate::loss::cross_entropy;
use crate::netcore::{BnMode, PrunableNetwork};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule { initial: lr, decay: 1.0, milestones: Vec::new() }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.initial * self.decay.powi(passed as i32)
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        if !(self.initial > 0.0 && self.decay > 0.0) {
            return Err(Error::Config("learning rate and decay must be positive".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("lr milestones must be strictly increasing".into()));
        }
        if self.milestones.last().is_some_and(|&m| m >= epochs) {
            return Err(Error::Config(format!("lr milestone beyond the {epochs}-epoch schedule")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(momentum: f64, nesterov: bool, weight_decay: f64) -> Self {
        Sgd { momentum, nesterov, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        if self.velocity.len() != params.len() {
            self.velocity = vec![0.0; params.len()];
        }
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            let d = if self.nesterov { g + self.momentum * *v } else { *v };
            *p -= lr * d;
        }
    }
}

/// One epoch of cross-entropy training over `ids` in shuffled order.
/// Returns the mean batch loss.
pub fn train_epoch(
    net: &mut PrunableNetwork,
    data: &Dataset,
    ids: &[usize],
    batch_size: usize,
    policy: &AugmentationPolicy,
    opt: &mut Sgd,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut order = ids.to_vec();
    order.shuffle(rng);
    let shape = data.shape();
    let mut total = 0.0;
    let mut steps = 0;
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = data.batch_with(chunk, |img| policy.apply(img, shape, rng));
        let pass = net.pass(net.params(), &batch.x, BnMode::Train)?;
        let (loss, dlogits) = cross_entropy(&pass.logits, &batch.labels);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch: 0, loss });
        }
        let back = net.backward(net.params(), &pass, &dlogits)?;
        let stats = net.updated_running_stats(&pass);
        *net = net.with_running_stats(stats);
        opt.step(net.params_mut(), &back.params, lr);
        total += loss;
        steps += 1;
    }
    Ok(total / steps.max(1) as f64)
}

/// Mean cross entropy and accuracy of `net` over `ids`.
pub fn evaluate(net: &PrunableNetwork, data: &Dataset, ids: &[usize], batch_size: usize, mode: BnMode) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut hits = 0;
    for batch in data.batches(ids, batch_size) {
        let logits = net.forward(&batch.x, mode)?;
        loss += cross_entropy(&logits, &batch.labels).0 * batch.len() as f64;
        hits += crate::loss::correct(&logits, &batch.labels);
    }
    let n = ids.len().max(1) as f64;
    Ok((loss / n, hits as f64 / n))
}
