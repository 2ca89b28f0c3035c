use std::collections::BTreeMap;

use log::info;

use super::{evaluate, EvalReport};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Switches};
use crate::rct::{CategoryExpander, ExpanderConfig, Lexicon};
use crate::training::{finetune_target, train_source, Episode, FinetuneConfig, MetricsLog, SupportPool, TrainConfig};

/// Everything one ablation row needs to train and score a model.
#[derive(Clone, Debug)]
pub struct AblationPlan {
    pub model: ModelConfig,
    pub expander: ExpanderConfig,
    pub lexicon: Lexicon,
    pub train: TrainConfig,
    /// Skipped when `None` or when there are no pools.
    pub finetune: Option<FinetuneConfig>,
    pub eval_shots: usize,
}

pub struct AblationData<'a> {
    pub source: &'a [Episode],
    pub pools: &'a [SupportPool],
    pub test: &'a [Episode],
}

impl AblationPlan {
    /// Trains and scores one configuration; returns the test mIoU and the
    /// combined metrics log of both stages.
    pub fn run_one(&self, switches: Switches, data: &AblationData) -> Result<(f64, MetricsLog)> {
        let config = ModelConfig { switches, ..self.model.clone() };
        let expander = CategoryExpander::new(self.expander.clone(), self.lexicon.clone());
        let mut model = Model::new(config, expander)?;
        let mut log = MetricsLog::new();
        train_source(&mut model, data.source, &self.train, &mut log)?;
        if let Some(ft) = &self.finetune {
            if !data.pools.is_empty() {
                finetune_target(&mut model, data.pools, ft, &mut log)?;
            }
        }
        let outcome = evaluate(&model, data.test, self.eval_shots)?;
        log.record(0, 0, 0.0, outcome.miou);
        Ok((outcome.miou, log))
    }
}

/// Full model first, then one row per disabled switch.
pub fn run_ablation(plan: &AblationPlan, switches: &[String], data: &AblationData) -> Result<(EvalReport, BTreeMap<String, MetricsLog>)> {
    let base = plan.model.switches;
    let mut configs = vec![("full".to_string(), base)];
    for s in switches {
        if configs.iter().any(|(l, _)| l == s) {
            return Err(Error::config("switches", format!("switch `{s}` listed twice")));
        }
        configs.push((s.clone(), base.without(s)?));
    }
    let mut report = EvalReport::default();
    let mut logs = BTreeMap::new();
    for (label, sw) in configs {
        let (miou, log) = plan.run_one(sw, data)?;
        info!("ablation {label}: mIoU {miou:.4}");
        report.add_row(&label, miou);
        logs.insert(label, log);
    }
    Ok((report, logs))
}
