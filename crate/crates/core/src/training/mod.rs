//! Episodic source training, target fine-tuning on pseudo queries, and the
//! artifacts both stages emit.

mod augment;
mod checkpoint;
mod episode;
mod loss;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use augment::{augment, AugmentConfig};
pub use checkpoint::{Checkpoint, BANK_TENSOR};
pub use episode::{categories, check_disjoint, Episode, SupportPool};
pub use loss::{bce, combined_loss, dice, loss_from_logits, LossConfig, PROB_CLAMP};

use crate::error::{Error, Result};
use crate::evalkit::iou;
use crate::graph::Graph;
use crate::model::{Model, PreparedEpisode};
use crate::params::{named_rng, Adam};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Episodes per optimizer step.
    pub batch: usize,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 25, lr: 1e-4, batch: 1, loss: LossConfig::default(), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    pub shots: usize,
    pub augment: AugmentConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { train: TrainConfig { epochs: 10, ..TrainConfig::default() }, shots: 1, augment: AugmentConfig::default() }
    }
}

/// `epoch=<n> step=<n> loss=<f> miou=<f>` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    lines: Vec<String>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, epoch: usize, step: usize, loss: f64, miou: f64) {
        self.lines.push(format!("epoch={epoch} step={step} loss={loss:.6} miou={miou:.6}"));
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            let _ = writeln!(s, "{l}");
        }
        s
    }
}

/// Per-epoch means of the step losses and training IoUs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
    pub epoch_miou: Vec<f64>,
}

fn prepare_all(model: &Model, episodes: &[Episode]) -> Result<Vec<PreparedEpisode>> {
    episodes.par_iter().map(|e| model.prepare(e)).collect()
}

/// One pass over `prepared` in the given order; returns (mean loss, mean IoU).
fn run_epoch(model: &mut Model, opt: &mut Adam, prepared: &[PreparedEpisode], order: &[usize], cfg: &TrainConfig) -> Result<(f64, f64)> {
    let batch = cfg.batch.max(1);
    let (mut loss_sum, mut iou_sum) = (0.0, 0.0);
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut pending = 0;
    for (i, &idx) in order.iter().enumerate() {
        let ep = &prepared[idx];
        let gt = ep.query_mask.as_ref().ok_or_else(|| Error::Dataset("training episode without a query mask".into()))?;
        let mut g = Graph::new();
        let mut bank = model.bank.clone();
        let logits = model.forward(&mut g, &model.params, &mut bank, ep, true)?;
        model.bank = bank;
        let loss = loss_from_logits(&mut g, logits, gt, &cfg.loss)?;
        loss_sum += g.value(loss).item();
        let pred = crate::decoder::SegLogits::from_tensor(g.value(logits)).to_mask();
        iou_sum += iou(&pred, gt)?;
        let grads = g.backward(loss);
        for (name, t) in g.param_grads(&grads) {
            match acc.get_mut(&name) {
                Some(a) => a.add_assign(&t),
                None => {
                    acc.insert(name, t);
                }
            }
        }
        pending += 1;
        if pending == batch || i + 1 == order.len() {
            let scale = 1.0 / pending as f64;
            let avg = std::mem::take(&mut acc).into_iter().map(|(k, v)| (k, v.scale(scale))).collect();
            opt.step(&mut model.params, &avg);
            pending = 0;
        }
    }
    let n = order.len() as f64;
    Ok((loss_sum / n, iou_sum / n))
}

fn shuffled(n: usize, seed: u64, stream: &str) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut named_rng(seed, stream));
    order
}

/// Meta-training on labelled source episodes.
pub fn train_source(model: &mut Model, episodes: &[Episode], cfg: &TrainConfig, log: &mut MetricsLog) -> Result<TrainHistory> {
    if episodes.is_empty() {
        return Err(Error::config("data", "source episode stream is empty"));
    }
    cfg.loss.validate()?;
    let prepared = prepare_all(model, episodes)?;
    let mut opt = Adam::new(cfg.lr);
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let order = shuffled(prepared.len(), cfg.seed, &format!("train.order.{epoch}"));
        let (loss, miou) = run_epoch(model, &mut opt, &prepared, &order, cfg)?;
        log.record(epoch + 1, opt.steps() as usize, loss, miou);
        info!("source epoch {}: loss {loss:.4} miou {miou:.4}", epoch + 1);
        history.epoch_loss.push(loss);
        history.epoch_miou.push(miou);
    }
    Ok(history)
}

/// Pseudo episodes for one epoch: pair `i` (augmented) is the query and the
/// supports are pairs `i, i+1, …` cyclically.
pub fn pseudo_episodes(pools: &[SupportPool], shots: usize, aug: &AugmentConfig, seed: u64, epoch: usize) -> Result<Vec<Episode>> {
    if shots == 0 {
        return Err(Error::config("shots", "fine-tuning needs K ≥ 1 support pairs"));
    }
    let mut out = Vec::new();
    for pool in pools {
        let n = pool.pairs.len();
        if n == 0 {
            return Err(Error::config("data", format!("category `{}` has no support pairs", pool.category)));
        }
        for i in 0..n {
            let mut rng = named_rng(seed, &format!("finetune.aug.{epoch}.{}.{i}", pool.category));
            let (img, mask) = &pool.pairs[i];
            let (q, qm) = augment(img, mask, aug, &mut rng)?;
            let support = (0..shots).map(|k| pool.pairs[(i + k) % n].clone()).collect();
            out.push(Episode::new(&format!("pseudo-{i}"), &pool.category, support, q, Some(qm))?);
        }
    }
    Ok(out)
}

/// Fine-tunes on target support pools using augmented pseudo queries.
pub fn finetune_target(model: &mut Model, pools: &[SupportPool], cfg: &FinetuneConfig, log: &mut MetricsLog) -> Result<TrainHistory> {
    if pools.is_empty() {
        return Err(Error::config("data", "no target support pairs"));
    }
    cfg.train.loss.validate()?;
    cfg.augment.validate()?;
    // `fai.freeze_bank` only governs this stage
    let was_frozen = model.bank.frozen;
    model.bank.frozen = model.config.fai.freeze_bank;
    let mut opt = Adam::new(cfg.train.lr);
    let mut history = TrainHistory::default();
    let result = (|| {
        for epoch in 0..cfg.train.epochs {
            let episodes = pseudo_episodes(pools, cfg.shots, &cfg.augment, cfg.train.seed, epoch)?;
            let prepared = prepare_all(model, &episodes)?;
            let order = shuffled(prepared.len(), cfg.train.seed, &format!("finetune.order.{epoch}"));
            let (loss, miou) = run_epoch(model, &mut opt, &prepared, &order, &cfg.train)?;
            log.record(epoch + 1, opt.steps() as usize, loss, miou);
            info!("finetune epoch {}: loss {loss:.4} miou {miou:.4}", epoch + 1);
            history.epoch_loss.push(loss);
            history.epoch_miou.push(miou);
        }
        Ok(history)
    })();
    model.bank.frozen = was_frozen;
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_line_format() {
        let mut log = MetricsLog::new();
        log.record(1, 10, 0.5, 0.25);
        assert_eq!(log.render(), "epoch=1 step=10 loss=0.500000 miou=0.250000\n");
    }
}
