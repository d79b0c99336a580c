//! Multi-label video metrics: GAP, PERR and Hit@1.
//!
//! All rankings break score ties deterministically (video id, then class
//! id), so results are reproducible bit for bit.

use std::cmp::Ordering;

use crate::error::{Error, Result};

pub const DEFAULT_GAP_TOP_K: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoPrediction {
    pub id: String,
    pub scores: Vec<f32>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionSet {
    pub videos: Vec<VideoPrediction>,
}

impl PredictionSet {
    pub fn validate(&self) -> Result<()> {
        if self.videos.is_empty() {
            return Err(Error::Empty("empty prediction set".into()));
        }
        for v in &self.videos {
            if v.scores.iter().any(|s| !s.is_finite() || *s < 0.0 || *s > 1.0) {
                return Err(Error::Contract(format!("video {}: scores outside [0, 1]", v.id)));
            }
            if v.labels.is_empty() {
                return Err(Error::Contract(format!("video {} has no ground-truth label", v.id)));
            }
            if v.labels.iter().any(|&l| l >= v.scores.len()) {
                return Err(Error::Contract(format!("video {}: label out of range", v.id)));
            }
        }
        Ok(())
    }
}

/// Classes of one video ranked by descending score, ties by class id.
fn ranked_classes(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Global average precision over the pooled top-`top_k` predictions of every
/// video, normalized by the total number of ground-truth labels.
pub fn gap(preds: &PredictionSet, top_k: usize) -> Result<f64> {
    if top_k == 0 {
        return Err(Error::Config("top_k must be >= 1".into()));
    }
    preds.validate()?;
    let mut pool: Vec<(f32, usize, usize, bool)> = Vec::new();
    let mut positives = 0usize;
    for (vi, v) in preds.videos.iter().enumerate() {
        positives += v.labels.len();
        for c in ranked_classes(&v.scores).into_iter().take(top_k) {
            pool.push((v.scores[c], vi, c, v.labels.contains(&c)));
        }
    }
    pool.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| preds.videos[a.1].id.cmp(&preds.videos[b.1].id))
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut hits = 0usize;
    let mut ap = 0.0f64;
    for (j, &(_, _, _, rel)) in pool.iter().enumerate() {
        if rel {
            hits += 1;
            ap += hits as f64 / (j + 1) as f64;
        }
    }
    Ok(ap / positives as f64)
}

/// Mean over videos of the precision of the top-n classes, n = label count.
pub fn perr(preds: &PredictionSet) -> Result<f64> {
    preds.validate()?;
    let total: f64 = preds
        .videos
        .iter()
        .map(|v| {
            let n = v.labels.len();
            let hit = ranked_classes(&v.scores)
                .into_iter()
                .take(n)
                .filter(|c| v.labels.contains(c))
                .count();
            hit as f64 / n as f64
        })
        .sum();
    Ok(total / preds.videos.len() as f64)
}

fn argmax(scores: &[f32]) -> usize {
    scores
        .iter()
        .enumerate()
        .fold(None::<(usize, f32)>, |best, (i, &s)| match best {
            Some((_, b)) if s.total_cmp(&b) != Ordering::Greater => best,
            _ => Some((i, s)),
        })
        .map_or(0, |(i, _)| i)
}

/// Fraction of videos whose top-scored class (lowest id on ties) is a true label.
pub fn hit_at_1(preds: &PredictionSet) -> Result<f64> {
    preds.validate()?;
    let hits = preds
        .videos
        .iter()
        .filter(|v| v.labels.contains(&argmax(&v.scores)))
        .count();
    Ok(hits as f64 / preds.videos.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSummary {
    pub gap: f64,
    pub perr: f64,
    pub hit_at_1: f64,
}

pub fn summarize(preds: &PredictionSet) -> Result<MetricSummary> {
    Ok(MetricSummary {
        gap: gap(preds, DEFAULT_GAP_TOP_K)?,
        perr: perr(preds)?,
        hit_at_1: hit_at_1(preds)?,
    })
}
