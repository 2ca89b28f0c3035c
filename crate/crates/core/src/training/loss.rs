use crate::encoders::BinaryMask;
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the cross-entropy term.
    pub lambda: f64,
    /// Dice smoothing.
    pub delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.5, delta: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("loss.lambda", "must lie in [0, 1]"));
        }
        if self.delta.is_nan() || self.delta <= 0.0 {
            return Err(Error::config("loss.dice_smooth", "must be positive"));
        }
        Ok(())
    }
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

pub fn bce(probs: &[f64], gt: &[f64]) -> f64 {
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let p = clamp(p);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

pub fn dice(probs: &[f64], gt: &[f64], delta: f64) -> f64 {
    let (mut inter, mut total) = (0.0, 0.0);
    for (&p, &g) in probs.iter().zip(gt) {
        let p = clamp(p);
        inter += p * g;
        total += p + g;
    }
    1.0 - (2.0 * inter + delta) / (total + delta)
}

/// `λ·BCE + (1−λ)·Dice` on probabilities.
pub fn combined_loss(probs: &[f64], gt: &BinaryMask, cfg: &LossConfig) -> Result<f64> {
    if probs.len() != gt.height() * gt.width() {
        return Err(Error::invalid(format!("{} probabilities for a {}×{} mask", probs.len(), gt.height(), gt.width())));
    }
    let g = gt.as_f64();
    Ok(cfg.lambda * bce(probs, &g) + (1.0 - cfg.lambda) * dice(probs, &g, cfg.delta))
}

/// Loss of sigmoid(`logits`) as a graph node.
pub fn loss_from_logits(graph: &mut Graph, logits: Var, gt: &BinaryMask, cfg: &LossConfig) -> Result<Var> {
    let z = graph.value(logits).data().to_vec();
    if z.len() != gt.height() * gt.width() {
        return Err(Error::invalid("logit grid does not match the mask"));
    }
    let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
    let value = combined_loss(&p, gt, cfg)?;
    let g = gt.as_f64();
    let cfg = *cfg;
    Ok(graph.custom(
        Tensor::scalar(value),
        &[logits],
        Box::new(move |up, parents, _, _| {
            let n = p.len() as f64;
            let (mut inter, mut total) = (0.0, 0.0);
            for (&pi, &gi) in p.iter().zip(&g) {
                let pc = clamp(pi);
                inter += pc * gi;
                total += pc + gi;
            }
            let denom = total + cfg.delta;
            let num = 2.0 * inter + cfg.delta;
            let scale = up.item();
            let grad = p
                .iter()
                .zip(&g)
                .map(|(&pi, &gi)| {
                    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pi) {
                        return 0.0;
                    }
                    let d_bce = (pi - gi) / (pi * (1.0 - pi)) / n;
                    let d_dice = -(2.0 * gi * denom - num) / (denom * denom);
                    let dp = cfg.lambda * d_bce + (1.0 - cfg.lambda) * d_dice;
                    scale * dp * pi * (1.0 - pi)
                })
                .collect();
            vec![Some(Tensor::new(parents[0].shape(), grad))]
        }),
    ))
}
