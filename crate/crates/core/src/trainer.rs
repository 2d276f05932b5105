//! REINFORCE with a maximum-entropy bonus and three baselines.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use mstop_numkit::{save_checkpoint, AdamConfig, AdamState, ParamGrads};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddtm::{DdtmParams, DecodeMode, TapedRollout};
use crate::error::{CoreError, Result};
use crate::instance::{augment, generate, GenConfig, Instance, PrizeMode};
use crate::seeds::{derive, derive2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    BatchMean,
    GreedyRollout,
    InstanceAug,
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BatchMean => "batch-mean",
            Self::GreedyRollout => "greedy-rollout",
            Self::InstanceAug => "instance-aug",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch-mean" => Ok(Self::BatchMean),
            "greedy-rollout" => Ok(Self::GreedyRollout),
            "instance-aug" => Ok(Self::InstanceAug),
            other => Err(CoreError::InvalidConfig(format!(
                "unknown baseline {other:?} (expected batch-mean, greedy-rollout or instance-aug)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub n: usize,
    pub k: usize,
    pub t_max: f64,
    pub prize_mode: PrizeMode,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Trajectories per step.
    pub batch: usize,
    /// Copies of each raw instance per step (1, or 8 for the full symmetry group).
    pub k_aug: usize,
    pub alpha: f64,
    pub baseline: BaselineKind,
    pub lr: f64,
    /// Global-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub val_size: usize,
    pub bn_momentum: f64,
    pub data_seed: u64,
    pub model_seed: u64,
    pub rollout_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::tiny(0)
    }
}

impl TrainConfig {
    /// Desk-scale run: n = 6, K = 2, 30 epochs of 50 steps of 64 trajectories.
    pub fn tiny(seed: u64) -> Self {
        Self {
            n: 6,
            k: 2,
            t_max: 1.5,
            prize_mode: PrizeMode::Uniform,
            epochs: 30,
            steps_per_epoch: 50,
            batch: 64,
            k_aug: 8,
            alpha: 0.01,
            baseline: BaselineKind::InstanceAug,
            lr: 1e-4,
            clip_norm: Some(1.0),
            val_size: 200,
            bn_momentum: 0.1,
            data_seed: derive(seed, 0),
            model_seed: derive(seed, 1),
            rollout_seed: derive(seed, 2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::InvalidConfig(msg));
        if self.n == 0 || self.k == 0 {
            return bad(format!("instance size n = {}, K = {} must be positive", self.n, self.k));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return bad(format!("t_max = {} must be positive", self.t_max));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.k_aug != 1 && self.k_aug != 8 {
            return bad(format!("k_aug = {} must be 1 or 8", self.k_aug));
        }
        if !self.batch.is_multiple_of(self.k_aug) {
            return bad(format!("batch {} is not a multiple of k_aug {}", self.batch, self.k_aug));
        }
        if self.baseline == BaselineKind::InstanceAug && self.k_aug != 8 {
            return bad("the instance-aug baseline needs k_aug = 8".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha = {} must be non-negative", self.alpha));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip norm {c} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("bn momentum {} must lie in [0, 1]", self.bn_momentum));
        }
        if self.val_size == 0 {
            return bad("validation set must be non-empty".into());
        }
        Ok(())
    }

    /// Raw instances drawn per step.
    pub fn raw_per_step(&self) -> usize {
        self.batch / self.k_aug
    }

    pub fn raw_instances_per_epoch(&self) -> usize {
        self.raw_per_step() * self.steps_per_epoch
    }

    fn gen(&self, seed: u64) -> GenConfig {
        GenConfig {
            n: self.n,
            k: self.k,
            t_max: self.t_max,
            prize_mode: self.prize_mode,
            seed,
        }
    }

    /// The fixed held-out set, disjoint by stream from training draws.
    pub fn validation_set(&self) -> Result<Vec<Instance>> {
        let root = derive(self.data_seed, u64::MAX);
        (0..self.val_size)
            .map(|i| generate(&self.gen(derive(root, i as u64))))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    /// 1-based; 0 is reserved for the untrained model.
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_baseline: f64,
    /// Mean per-step entropy of the sampled trajectories.
    pub mean_entropy: f64,
    /// Mean pre-clip global gradient norm.
    pub grad_norm: f64,
    pub validation: f64,
    pub raw_instances: usize,
    /// Validation score of the frozen greedy-rollout policy.
    pub baseline_validation: Option<f64>,
    pub baseline_syncs: usize,
    #[serde(skip)]
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DdtmParams,
    pub adam: AdamState,
    pub initial_validation: f64,
    pub best_validation: f64,
    pub reports: Vec<EpochReport>,
}

/// One trajectory to be sampled: instance, vehicle order, group index.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub instance: Instance,
    pub order: Vec<usize>,
    pub group: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_baseline: f64,
    pub mean_entropy: f64,
    pub grad_norm: f64,
}

/// `b = mean(rewards)`, taken as an offset from the first reward so equal
/// rewards give exactly zero advantage.
pub fn baseline_instance_aug(rewards: &[f64]) -> Result<f64> {
    let first = *rewards
        .first()
        .ok_or_else(|| CoreError::CountMismatch("no rewards in group".into()))?;
    Ok(first + rewards.iter().map(|r| r - first).sum::<f64>() / rewards.len() as f64)
}

/// Per-trajectory baselines for grouped rewards (`group_size` consecutive
/// trajectories share one mean).
pub fn grouped_baselines(rewards: &[f64], group_size: usize) -> Result<Vec<f64>> {
    if group_size == 0 || !rewards.len().is_multiple_of(group_size) {
        return Err(CoreError::CountMismatch(format!(
            "{} rewards do not split into groups of {group_size}",
            rewards.len()
        )));
    }
    let mut out = Vec::with_capacity(rewards.len());
    for chunk in rewards.chunks(group_size) {
        let b = baseline_instance_aug(chunk)?;
        out.extend(std::iter::repeat_n(b, group_size));
    }
    Ok(out)
}

/// Greedy reward of `frozen` on each item.
pub fn baseline_greedy_rollout(frozen: &DdtmParams, items: &[BatchItem]) -> Result<Vec<f64>> {
    items
        .par_iter()
        .map(|it| Ok(frozen.rollout(&it.instance, &it.order, DecodeMode::Greedy)?.reward))
        .collect()
}

/// Samples one taped rollout per item, in parallel.
pub fn sample_rollouts(params: &DdtmParams, items: &[BatchItem]) -> Result<Vec<TapedRollout>> {
    items
        .par_iter()
        .map(|it| params.rollout_taped(&it.instance, &it.order, DecodeMode::Sample(it.seed)))
        .collect()
}

/// Gradient of `-(1/B) sum[(R - b) logp + alpha H]` with the advantage held
/// constant. Per-trajectory gradients are summed in batch order.
pub fn surrogate_grads(
    params: &DdtmParams,
    rollouts: &mut [TapedRollout],
    baselines: &[f64],
    alpha: f64,
    step: usize,
) -> Result<(ParamGrads, f64)> {
    if rollouts.len() != baselines.len() || rollouts.is_empty() {
        return Err(CoreError::CountMismatch(format!(
            "{} rollouts but {} baselines",
            rollouts.len(),
            baselines.len()
        )));
    }
    let inv_b = 1.0 / rollouts.len() as f64;
    let parts: Vec<Result<(ParamGrads, f64)>> = rollouts
        .par_iter_mut()
        .zip(baselines.par_iter())
        .map(|(r, &b)| {
            let adv = r.trajectory.reward - b;
            let tape = &mut r.tape;
            let pg = tape.scale(r.logp_sum, -adv * inv_b)?;
            let ent = tape.scale(r.entropy_sum, -alpha * inv_b)?;
            let loss = tape.add(pg, ent)?;
            let value = tape.scalar(loss);
            let grads = tape.backward(loss)?.param_grads(&params.store);
            Ok((grads, value))
        })
        .collect();
    let mut total = ParamGrads::zeros_like(&params.store);
    let mut loss = 0.0;
    for part in parts {
        let (g, l) = part?;
        total.accumulate(&g, 1.0);
        loss += l;
    }
    if !loss.is_finite() || !total.is_finite() {
        return Err(CoreError::NonFiniteLoss {
            step,
            detail: format!("loss = {loss}, gradient norm = {}", total.global_norm()),
        });
    }
    Ok((total, loss))
}

/// Samples, baselines, differentiates and applies one Adam update.
pub fn reinforce_step(
    params: &mut DdtmParams,
    adam: &mut AdamState,
    items: &[BatchItem],
    cfg: &TrainConfig,
    frozen: Option<&DdtmParams>,
    step: usize,
) -> Result<StepReport> {
    let mut rollouts = sample_rollouts(params, items)?;
    let rewards: Vec<f64> = rollouts.iter().map(|r| r.trajectory.reward).collect();
    let baselines = match cfg.baseline {
        BaselineKind::BatchMean => grouped_baselines(&rewards, rewards.len())?,
        BaselineKind::InstanceAug => grouped_baselines(&rewards, cfg.k_aug)?,
        BaselineKind::GreedyRollout => {
            let frozen = frozen.ok_or_else(|| CoreError::InvalidConfig("greedy-rollout baseline without frozen parameters".into()))?;
            baseline_greedy_rollout(frozen, items)?
        }
    };
    let (mut grads, loss) = surrogate_grads(params, &mut rollouts, &baselines, cfg.alpha, step)?;
    let grad_norm = match cfg.clip_norm {
        Some(c) => grads.clip_global_norm(c),
        None => grads.global_norm(),
    };
    adam.step(&mut params.store, &grads)?;

    let slots = params.bn_slots().len();
    let mut observed = vec![Vec::new(); slots];
    for r in &rollouts {
        for (slot, stats) in observed.iter_mut().zip(&r.bn_stats) {
            slot.extend(stats.iter().cloned());
        }
    }
    params.update_running_stats(&observed, cfg.bn_momentum);

    let count = rollouts.len() as f64;
    Ok(StepReport {
        loss,
        mean_reward: rewards.iter().sum::<f64>() / count,
        mean_baseline: baselines.iter().sum::<f64>() / count,
        mean_entropy: rollouts
            .iter()
            .map(|r| r.tape.scalar(r.entropy_sum) / r.trajectory.steps.len() as f64)
            .sum::<f64>()
            / count,
        grad_norm,
    })
}

/// Mean greedy reward over `set`, identity vehicle order.
pub fn validation_score(params: &DdtmParams, set: &[Instance]) -> Result<f64> {
    let rewards: Vec<f64> = set
        .par_iter()
        .map(|inst| {
            let order: Vec<usize> = (0..inst.k()).collect();
            Ok(params.rollout(inst, &order, DecodeMode::Greedy)?.reward)
        })
        .collect::<Result<_>>()?;
    Ok(rewards.iter().sum::<f64>() / rewards.len().max(1) as f64)
}

/// Draws the items of one step: `batch / k_aug` fresh instances, each with a
/// random vehicle order shared by its `k_aug` transformed copies.
pub fn make_batch(cfg: &TrainConfig, global_step: u64) -> Result<Vec<BatchItem>> {
    let data_root = derive(cfg.data_seed, global_step);
    let order_root = derive2(cfg.rollout_seed, 0, global_step);
    let sample_root = derive2(cfg.rollout_seed, 1, global_step);
    let mut items = Vec::with_capacity(cfg.batch);
    for i in 0..cfg.raw_per_step() {
        let inst = generate(&cfg.gen(derive(data_root, i as u64)))?;
        let mut order: Vec<usize> = (0..cfg.k).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(order_root, i as u64)));
        let copies = if cfg.k_aug == 8 { augment(&inst) } else { vec![inst] };
        for instance in copies {
            let j = items.len() as u64;
            items.push(BatchItem {
                instance,
                order: order.clone(),
                group: i,
                seed: derive(sample_root, j),
            });
        }
    }
    Ok(items)
}

/// Runs the full loop. With `checkpoint_dir`, writes `best.ckpt` (highest
/// validation, the untrained model included) and `last.ckpt`.
pub fn train(cfg: &TrainConfig, params: DdtmParams, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_with(cfg, params, checkpoint_dir, &mut |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    cfg: &TrainConfig,
    mut params: DdtmParams,
    checkpoint_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut adam = AdamState::new(
        &params.store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let val_set = cfg.validation_set()?;
    let initial_validation = validation_score(&params, &val_set)?;
    let mut best_validation = initial_validation;
    let save = |name: &str, p: &DdtmParams, a: &AdamState| -> Result<()> {
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(&dir.join(name), &p.store, Some(a))?;
        }
        Ok(())
    };
    save("best.ckpt", &params, &adam)?;

    let mut frozen = (cfg.baseline == BaselineKind::GreedyRollout).then(|| params.clone());
    let mut frozen_validation = initial_validation;
    let mut syncs = 0;
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let (mut reward, mut base, mut ent, mut norm) = (0.0, 0.0, 0.0, 0.0);
        for step in 0..cfg.steps_per_epoch {
            let global = (epoch * cfg.steps_per_epoch + step) as u64;
            let items = make_batch(cfg, global)?;
            let r = reinforce_step(&mut params, &mut adam, &items, cfg, frozen.as_ref(), global as usize)?;
            reward += r.mean_reward;
            base += r.mean_baseline;
            ent += r.mean_entropy;
            norm += r.grad_norm;
        }
        let validation = validation_score(&params, &val_set)?;
        if let Some(f) = frozen.as_mut() {
            if validation > frozen_validation {
                *f = params.clone();
                frozen_validation = validation;
                syncs += 1;
            }
        }
        if validation > best_validation {
            best_validation = validation;
            save("best.ckpt", &params, &adam)?;
        }
        let steps = cfg.steps_per_epoch.max(1) as f64;
        let report = EpochReport {
            epoch: epoch + 1,
            mean_reward: reward / steps,
            mean_baseline: base / steps,
            mean_entropy: ent / steps,
            grad_norm: norm / steps,
            validation,
            raw_instances: cfg.raw_instances_per_epoch(),
            baseline_validation: frozen.as_ref().map(|_| frozen_validation),
            baseline_syncs: syncs,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        on_epoch(&report);
        reports.push(report);
    }
    save("last.ckpt", &params, &adam)?;
    Ok(TrainOutcome {
        params,
        adam,
        initial_validation,
        best_validation,
        reports,
    })
}
