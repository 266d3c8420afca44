//! Optimization loop, evaluation and the frozen-encoder guard.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use gsap_autograd::{Group, Mat, ParamId, ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GsapError, Result};
use crate::model::{Model, Prepared};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Rate for prompt-side parameters.
    pub lr_lm_side: f64,
    /// Rate for graph encoder, relevance scorer and reasoning head.
    pub lr_graph: f64,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub grad_accum: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; `0` disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_lm_side: 1e-5,
            lr_graph: 1e-4,
            epochs: 6,
            warmup_steps: 600,
            grad_accum: 1,
            batch_size: 1,
            seed: 0,
            weight_decay: 0.01,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Rates and warmup sized for a few thousand steps from scratch.
    pub fn desk() -> Self {
        Self { lr_lm_side: 1e-3, lr_graph: 1e-3, warmup_steps: 100, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_lm_side > 0.0 && self.lr_graph > 0.0) {
            return Err(GsapError::Config("learning rates must be positive".into()));
        }
        if self.grad_accum == 0 || self.batch_size == 0 {
            return Err(GsapError::Config("batch size and accumulation must be at least 1".into()));
        }
        Ok(())
    }

    /// Instances consumed per optimizer step.
    pub fn instances_per_step(&self) -> usize {
        self.batch_size * self.grad_accum
    }
}

/// Linear warmup to the base rate, then linear decay to zero at `total`.
pub fn lr_factor(step: usize, warmup: usize, total: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return 1.0;
    }
    ((total - step) as f64 / (total - warmup) as f64).clamp(0.0, 1.0)
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    moments: BTreeMap<ParamId, (Mat, Mat)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, t: 0, moments: BTreeMap::new() }
    }

    /// One update; `lr` gives the rate of each parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Mat>, lr: impl Fn(ParamId) -> f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (&id, g) in grads {
            if !store.is_trainable(id) {
                continue;
            }
            let rate = lr(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Mat::zeros(g.rows(), g.cols()), Mat::zeros(g.rows(), g.cols())));
            let w = store.get_mut(id);
            for (((wi, mi), vi), &gi) in
                w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *wi -= rate * (update + self.weight_decay * *wi);
            }
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<ParamId, Mat>, max: f64) -> f64 {
    let norm = grads.values().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if max > 0.0 && norm > max {
        let s = max / norm;
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// Bitwise snapshot of the frozen encoder weights.
#[derive(Clone, Debug)]
pub struct FreezeGuard {
    ids: Vec<ParamId>,
    values: Vec<Mat>,
}

impl FreezeGuard {
    pub fn new(store: &ParamStore) -> Self {
        let ids = store.ids_in_group(Group::Frozen);
        let values = store.snapshot(&ids);
        Self { ids, values }
    }

    /// True iff every frozen value is bit-identical to the snapshot.
    pub fn check(&self, store: &ParamStore) -> bool {
        self.ids.iter().zip(&self.values).all(|(&id, snap)| {
            let now = store.get(id);
            now.shape() == snap.shape() && now.data().iter().zip(snap.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub dev_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LogEntry>,
    pub steps: usize,
    pub best_dev_acc: f64,
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| GsapError::io(path, e))?;
        for e in &self.log {
            writeln!(f, "{}", serde_json::to_string(e)?).map_err(|e| GsapError::io(path, e))?;
        }
        Ok(())
    }
}

/// Loss and parameter gradients of one instance; buffers are left untouched.
pub fn instance_gradients(
    model: &Model,
    p: &Prepared,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, BTreeMap<ParamId, Mat>, crate::model::ForwardOut)> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, p, true, rng)?;
    let loss = tape.cross_entropy(out.logits, p.answer);
    let value = tape.scalar(loss);
    let grads = tape.backward(loss).into_params();
    Ok((value, grads, out))
}

/// Trains in place. After the final epoch the parameters of the epoch with
/// the best dev accuracy are restored (the last epoch when `dev` is empty).
pub fn train(model: &mut Model, train: &[Prepared], dev: &[Prepared], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let mut report = TrainReport { log: Vec::new(), steps: 0, best_dev_acc: f64::NEG_INFINITY, best_epoch: None };
    if cfg.epochs == 0 || train.is_empty() {
        return Ok(report);
    }
    let per_step = cfg.instances_per_step();
    let steps_per_epoch = train.len().div_ceil(per_step);
    let total = cfg.max_steps.unwrap_or(usize::MAX).min(cfg.epochs * steps_per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let groups: BTreeMap<ParamId, Group> = model.store.ids().map(|id| (id, model.store.group(id))).collect();
    let kept: Vec<ParamId> = model.store.ids().filter(|&id| model.store.group(id) != Group::Frozen).collect();
    let mut best: Option<Vec<Mat>> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        let mut stop = false;
        for chunk in order.chunks(per_step) {
            if step >= total {
                stop = true;
                break;
            }
            let mut acc: BTreeMap<ParamId, Mat> = BTreeMap::new();
            for &i in chunk {
                let (loss, grads, out) = instance_gradients(model, &train[i], &mut rng)?;
                if !loss.is_finite() {
                    return Err(GsapError::NonFiniteLoss { step, instance: train[i].id.clone() });
                }
                loss_sum += loss;
                seen += 1;
                model.apply_bn_updates(&out.bn_stats);
                for (id, g) in grads {
                    match acc.get_mut(&id) {
                        Some(a) => a.add_assign(&g),
                        None => {
                            acc.insert(id, g);
                        }
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in acc.values_mut() {
                *g = g.scale(inv);
            }
            clip_grad_norm(&mut acc, cfg.clip_norm);
            let f = lr_factor(step, cfg.warmup_steps, total);
            opt.step(&mut model.store, &acc, |id| {
                f * if groups[&id] == Group::LanguageSide { cfg.lr_lm_side } else { cfg.lr_graph }
            });
            step += 1;
        }
        if seen > 0 {
            finish_epoch(model, dev, epoch, step, loss_sum, seen, &kept, &mut best, &mut report)?;
        }
        if stop {
            break;
        }
    }
    if let Some(values) = best {
        model.store.restore(&kept, &values);
    }
    report.steps = step;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch(
    model: &Model,
    dev: &[Prepared],
    epoch: usize,
    step: usize,
    loss_sum: f64,
    seen: usize,
    kept: &[ParamId],
    best: &mut Option<Vec<Mat>>,
    report: &mut TrainReport,
) -> Result<()> {
    let dev_acc = if dev.is_empty() { f64::NAN } else { evaluate(model, dev)? };
    let train_loss = loss_sum / seen as f64;
    report.log.push(LogEntry { epoch, step, train_loss, dev_acc });
    // ties keep the later epoch; with no dev set the last epoch wins
    if dev.is_empty() || dev_acc >= report.best_dev_acc {
        report.best_dev_acc = dev_acc;
        report.best_epoch = Some(epoch);
        *best = Some(model.store.snapshot(kept));
    }
    Ok(())
}

/// Fraction of instances whose highest-scoring choice is the gold one.
pub fn evaluate(model: &Model, data: &[Prepared]) -> Result<f64> {
    if data.is_empty() {
        return Err(GsapError::Config("cannot evaluate on an empty dataset".into()));
    }
    let preds: Vec<usize> = data.par_iter().map(|p| model.predict(p).map(|(_, pred)| pred)).collect::<Result<_>>()?;
    let gold: Vec<usize> = data.iter().map(|p| p.answer).collect();
    Ok(accuracy(&preds, &gold))
}

/// Fraction of positions where `pred` equals `gold`.
pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    assert_eq!(pred.len(), gold.len(), "prediction and label counts differ");
    assert!(!gold.is_empty(), "accuracy of an empty set");
    pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64
}

/// Mean cross-entropy in evaluation mode.
pub fn mean_loss(model: &Model, data: &[Prepared]) -> Result<f64> {
    let mut sum = 0.0;
    for p in data {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(&mut tape, p, false, &mut rng)?;
        let l = tape.cross_entropy(out.logits, p.answer);
        sum += tape.scalar(l);
    }
    Ok(sum / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert!((lr_factor(0, 10, 100) - 0.1).abs() < 1e-12);
        assert!((lr_factor(9, 10, 100) - 1.0).abs() < 1e-12);
        assert!((lr_factor(55, 10, 100) - 0.5).abs() < 1e-12);
        assert_eq!(lr_factor(100, 10, 100), 0.0);
        assert_eq!(lr_factor(3, 0, 0), 1.0);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Mat::from_vec(1, 2, vec![1.0, -1.0]), Group::Graph);
        let mut opt = AdamW::new(0.9, 0.999, 1e-12, 0.0);
        let grads = BTreeMap::from([(id, Mat::from_vec(1, 2, vec![0.3, -2.0]))]);
        opt.step(&mut store, &grads, |_| 0.1);
        // bias-corrected first step is lr * sign(g)
        assert!((store.get(id).get(0, 0) - 0.9).abs() < 1e-9);
        assert!((store.get(id).get(0, 1) + 0.9).abs() < 1e-9);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut store = ParamStore::new();
        let id = store.add("w", Mat::from_vec(1, 1, vec![2.0]), Group::Graph);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.5);
        opt.step(&mut store, &BTreeMap::from([(id, Mat::zeros(1, 1))]), |_| 0.1);
        assert!((store.get(id).get(0, 0) - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut store = ParamStore::new();
        let id = store.add("w", Mat::from_vec(1, 1, vec![2.0]), Group::Frozen);
        let guard = FreezeGuard::new(&store);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut store, &BTreeMap::from([(id, Mat::filled(1, 1, 1.0))]), |_| 0.1);
        assert!(guard.check(&store));
        store.get_mut(id).set(0, 0, 2.0 + 1e-15);
        assert!(!guard.check(&store));
    }

    #[test]
    fn accuracy_hand_count() {
        let gold = [0, 1, 2, 3, 0, 1, 2, 3, 0, 1];
        let pred = [0, 1, 0, 3, 0, 2, 2, 1, 0, 1];
        // matches at positions 0, 1, 3, 4, 6, 8, 9
        assert_eq!(accuracy(&pred, &gold), 0.7);
        assert_eq!(accuracy(&gold, &gold), 1.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut store = ParamStore::new();
        let id = store.add("w", Mat::zeros(1, 2), Group::Graph);
        let mut g = BTreeMap::from([(id, Mat::from_vec(1, 2, vec![3.0, 4.0]))]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[&id].norm() - 1.0).abs() < 1e-12);
    }
}
