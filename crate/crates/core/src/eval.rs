//! Batch inference and metric evaluation over datasets.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::Result;
use crate::metrics::{summarize, MetricSummary, PredictionSet, VideoPrediction};
use crate::model::{forward, ModelConfig, ModelParams};

/// Scores every video; runs in parallel, output in dataset order.
pub fn predict(ds: &Dataset, params: &ModelParams, config: &ModelConfig) -> Result<PredictionSet> {
    let videos = ds
        .examples
        .par_iter()
        .map(|e| {
            let out = forward(&e.video, &e.audio, params, config)?;
            Ok(VideoPrediction {
                id: e.id.clone(),
                scores: out.probs.into_data(),
                labels: e.label_indices(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(PredictionSet { videos })
}

pub fn evaluate(ds: &Dataset, params: &ModelParams, config: &ModelConfig) -> Result<MetricSummary> {
    summarize(&predict(ds, params, config)?)
}
