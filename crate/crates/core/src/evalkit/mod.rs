//! Metrics, synthetic data, dataset IO, evaluation and ablation reports.

mod ablation;
mod dataset;
mod metric;
mod report;
mod synth;

pub use ablation::{run_ablation, AblationData, AblationPlan};
pub use dataset::{
    load_episodes, load_predictions, load_support_pools, prediction_path, save_episodes, save_mask, save_support_pools, Split,
};
pub use metric::{iou, miou};
pub use report::{EvalReport, ReportRow, REFERENCE_ABLATION};
pub use synth::{
    band_energy_ratio, generate_synthetic, parse_category, render_scene, Scene, Shape, ShiftParams, SyntheticData, SyntheticDomainSpec,
};

use rayon::prelude::*;

use crate::encoders::BinaryMask;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::Episode;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub ious: Vec<f64>,
    pub miou: f64,
    pub predictions: Vec<BinaryMask>,
}

/// Scores `episodes` restricted to their first `shots` supports. Episodes run
/// concurrently; results keep input order.
pub fn evaluate(model: &Model, episodes: &[Episode], shots: usize) -> Result<EvalOutcome> {
    if episodes.is_empty() {
        return Err(Error::invalid("no evaluation episodes"));
    }
    let scored: Vec<(BinaryMask, f64)> = episodes
        .par_iter()
        .map(|ep| {
            let ep = ep.with_shots(shots)?;
            let gt = ep.query_mask.as_ref().ok_or_else(|| Error::Dataset(format!("episode `{}` has no query mask", ep.id)))?;
            let pred = model.predict(&ep)?;
            let score = iou(&pred, gt)?;
            Ok((pred, score))
        })
        .collect::<Result<_>>()?;
    let (predictions, ious): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
    let miou = ious.iter().sum::<f64>() / ious.len() as f64;
    Ok(EvalOutcome { ious, miou, predictions })
}
