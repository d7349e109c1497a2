//! Fine-tuning the pruned network against the memory bank.
//!
//! Each step draws two augmented views of the batch, sums their task
//! losses and adds one distillation term between the softened ensemble
//! targets and the mean of the two softened student outputs.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_pair, AugmentationPolicy, Dataset};
use crate::error::{Error, IoContext, Result};
use crate::loss::{cross_entropy, kl_divergence, log_softmax};
use crate::membank::{LossEma, MemoryBank};
use crate::netcore::{BnMode, PrunableNetwork};
use crate::optim::{evaluate, LrSchedule, Sgd};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub kd_weight: f64,
    pub kd_temperature: f64,
    /// Distil each view separately instead of their mean.
    pub per_view_kd: bool,
    pub ema_decay: f64,
    pub crop_padding: usize,
    pub color_jitter: bool,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 100,
            batch_size: 128,
            lr: LrSchedule { initial: 1e-2, decay: 0.2, milestones: vec![30, 60, 80] },
            weight_decay: 5e-4,
            momentum: 0.9,
            nesterov: true,
            kd_weight: 1.0,
            kd_temperature: 4.0,
            per_view_kd: false,
            ema_decay: 0.99,
            crop_padding: 4,
            color_jitter: true,
            eval_batch_size: 256,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 {
            self.lr.validate(self.epochs)?;
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("fine-tune batch sizes must be positive".into()));
        }
        if self.kd_temperature <= 0.0 || self.kd_weight < 0.0 || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("invalid fine-tune rates".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("EMA decay must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn policy(&self) -> AugmentationPolicy {
        AugmentationPolicy::finetune(self.crop_padding, self.color_jitter)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdSpec {
    pub weight: f64,
    pub temperature: f64,
    pub per_view: bool,
}

#[derive(Clone, Debug)]
pub struct FinetuneLoss {
    pub total: f64,
    pub task: f64,
    pub kd: f64,
    pub grad_a: Tensor,
    pub grad_b: Tensor,
}

/// `Σ_views CE + w·T²·KL(q ‖ p̄)` where `q` is the softened target and `p̄`
/// the mean of the two softened student distributions.
pub fn finetune_loss(out_a: &Tensor, out_b: &Tensor, labels: &[usize], kd_targets: Option<&[f64]>, kd: KdSpec) -> Result<FinetuneLoss> {
    if out_a.shape() != out_b.shape() || out_a.n() != labels.len() {
        return Err(Error::ShapeMismatch("both views need one logit row per label".into()));
    }
    let (ca, mut grad_a) = cross_entropy(out_a, labels);
    let (cb, mut grad_b) = cross_entropy(out_b, labels);
    let task = ca + cb;
    let targets = match kd_targets {
        Some(t) if kd.weight != 0.0 => t,
        _ => return Ok(FinetuneLoss { total: task, task, kd: 0.0, grad_a, grad_b }),
    };
    if targets.len() != out_a.data().len() {
        return Err(Error::ShapeMismatch("one target row per logit row".into()));
    }
    let t = kd.temperature;
    let scale = kd.weight * t * t;
    let kd_value = if kd.per_view {
        let (ka, ga) = kl_divergence(targets, out_a, t);
        let (kb, gb) = kl_divergence(targets, out_b, t);
        for (g, k) in grad_a.data_mut().iter_mut().zip(ga.data()) {
            *g += 0.5 * scale * k;
        }
        for (g, k) in grad_b.data_mut().iter_mut().zip(gb.data()) {
            *g += 0.5 * scale * k;
        }
        0.5 * (ka + kb)
    } else {
        let (n, k) = (out_a.n(), out_a.c());
        let inv_n = 1.0 / n as f64;
        let mut total = 0.0;
        for s in 0..n {
            let row = s * k..(s + 1) * k;
            let lq = log_softmax(&targets[row.clone()], t);
            let pa: Vec<f64> = log_softmax(&out_a.data()[row.clone()], t).into_iter().map(f64::exp).collect();
            let pb: Vec<f64> = log_softmax(&out_b.data()[row.clone()], t).into_iter().map(f64::exp).collect();
            let pm: Vec<f64> = pa.iter().zip(&pb).map(|(a, b)| 0.5 * (a + b)).collect();
            // r_c = q_c / p̄_c drives both view gradients
            let mut ratio = vec![0.0; k];
            for c in 0..k {
                let q = lq[c].exp();
                if q > 0.0 {
                    total += q * (lq[c] - pm[c].ln());
                    ratio[c] = q / pm[c];
                }
            }
            for (p, g) in [(&pa, &mut grad_a), (&pb, &mut grad_b)] {
                let dot: f64 = (0..k).map(|c| ratio[c] * p[c]).sum();
                let gr = &mut g.data_mut()[row.clone()];
                for j in 0..k {
                    gr[j] += scale * inv_n * -(0.5 / t) * p[j] * (ratio[j] - dot);
                }
            }
        }
        total * inv_n
    };
    Ok(FinetuneLoss { total: task + scale * kd_value, task, kd: kd_value, grad_a, grad_b })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub kd_loss: f64,
    pub qualifying_teachers: Option<usize>,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub student_loss_ema: Option<f64>,
}

/// Gate input and outcome of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub gate_loss: f64,
    pub qualifying: usize,
}

pub struct FinetuneData<'a> {
    pub train: &'a Dataset,
    pub train_ids: &'a [usize],
    pub val_ids: &'a [usize],
    pub test: Option<&'a Dataset>,
}

pub struct FinetuneOutcome {
    pub network: PrunableNetwork,
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepLog>,
}

pub fn run_finetune(net: &PrunableNetwork, bank: Option<&MemoryBank>, data: &FinetuneData, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let mut net = net.clone();
    let mut opt = Sgd::new(cfg.momentum, cfg.nesterov, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let policy = cfg.policy();
    let shape = data.train.shape();
    let kd = KdSpec { weight: cfg.kd_weight, temperature: cfg.kd_temperature, per_view: cfg.per_view_kd };
    let bank = bank.filter(|_| cfg.kd_weight != 0.0);
    let mut ema = LossEma::new(cfg.ema_decay);
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at(epoch);
        let mut order = data.train_ids.to_vec();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut kd_sum, mut n_steps) = (0.0, 0.0, 0usize);
        let mut last_q = None;
        for chunk in order.chunks(cfg.batch_size) {
            let mut views_b = Vec::with_capacity(chunk.len());
            let batch_a = data.train.batch_with(chunk, |img| {
                let (a, b) = augment_pair(img, shape, &policy, &mut rng);
                views_b.push(b);
                a
            });
            let mut vb = views_b.into_iter();
            let batch_b = data.train.batch_with(chunk, |_| vb.next().expect("one view per example"));
            let pass_a = net.pass(net.params(), &batch_a.x, BnMode::Train)?;
            let pass_b = net.pass(net.params(), &batch_b.x, BnMode::Train)?;
            let targets = match bank {
                Some(b) => {
                    let gate = ema.current();
                    let (t, q) = b.ensemble_targets(gate, chunk)?;
                    steps.push(StepLog { epoch, step: n_steps, gate_loss: gate, qualifying: q });
                    last_q = Some(q);
                    Some(t)
                }
                None => None,
            };
            let l = finetune_loss(&pass_a.logits, &pass_b.logits, &batch_a.labels, targets.as_deref(), kd)?;
            if !l.total.is_finite() {
                return Err(Error::Diverged { epoch, loss: l.total });
            }
            ema.update(0.5 * l.task);
            let ga = net.backward(net.params(), &pass_a, &l.grad_a)?;
            let gb = net.backward(net.params(), &pass_b, &l.grad_b)?;
            let grads: Vec<f64> = ga.params.iter().zip(&gb.params).map(|(a, b)| a + b).collect();
            let stats = net.updated_running_stats(&pass_a);
            net = net.with_running_stats(stats);
            let stats = net.updated_running_stats(&pass_b);
            net = net.with_running_stats(stats);
            opt.step(net.params_mut(), &grads, lr);
            loss_sum += l.total;
            kd_sum += l.kd;
            n_steps += 1;
        }
        let denom = n_steps.max(1) as f64;
        let val_acc = if data.val_ids.is_empty() {
            None
        } else {
            Some(evaluate(&net, data.train, data.val_ids, cfg.eval_batch_size, BnMode::Eval)?.1)
        };
        let test_acc = match data.test {
            Some(t) if !t.is_empty() => Some(evaluate(&net, t, &t.all_ids(), cfg.eval_batch_size, BnMode::Eval)?.1),
            _ => None,
        };
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / denom,
            kd_loss: kd_sum / denom,
            qualifying_teachers: last_q,
            val_acc,
            test_acc,
            student_loss_ema: ema.value,
        };
        log::info!("fine-tune epoch {epoch}: loss {:.4}, test acc {:?}", m.train_loss, m.test_acc);
        epochs.push(m);
    }
    Ok(FinetuneOutcome { network: net, epochs, steps })
}

fn opt_cell<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "N/A".to_string(), |v| v.to_string())
}

pub fn write_metrics_csv(path: &Path, epochs: &[EpochMetrics]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "epoch,lr,train_loss,kd_loss,qualifying_teachers,val_acc,test_acc,student_loss_ema").expect("write to Vec");
    for m in epochs {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.epoch,
            m.lr,
            m.train_loss,
            m.kd_loss,
            opt_cell(m.qualifying_teachers),
            opt_cell(m.val_acc),
            opt_cell(m.test_acc),
            opt_cell(m.student_loss_ema)
        )
        .expect("write to Vec");
    }
    std::fs::write(path, out).at(path)
}
