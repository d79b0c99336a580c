//! Post-training robustness evaluation: FGSM adversarial test sets,
//! clean-vs-adversarial attention-map MSE, and DeepFool average robustness.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::data::{Dataset, VideoExample};
use crate::error::{Error, Result};
use crate::losses::fgsm_perturbation;
use crate::model::{forward, forward_nodes, Modality, ModelConfig, ModelParams, ParamNodes};
use crate::tensor::Tensor;

/// Replaces every example with `X + R`, `R` the FGSM perturbation against
/// these parameters.
pub fn make_adversarial_testset(
    ds: &Dataset,
    params: &ModelParams,
    config: &ModelConfig,
    epsilon: f32,
) -> Result<Dataset> {
    let examples = ds
        .examples
        .par_iter()
        .map(|e| {
            if epsilon == 0.0 {
                return Ok(e.clone());
            }
            let r = fgsm_perturbation(e, params, config, epsilon)?;
            e.perturbed(&r.video, &r.audio)
        })
        .collect::<Result<_>>()?;
    Ok(ds.with_examples(examples))
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.sub(b)?;
    Ok(d.l2_norm().powi(2) / d.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionMseReport {
    pub mean_mse: f64,
    pub per_example_mse: Vec<f64>,
    pub mean_video_mse: f64,
    pub mean_audio_mse: f64,
}

/// Per example, the mean squared difference between the head-averaged
/// attention maps of `X` and `X + R`, averaged over both modalities.
pub fn attention_mse(
    ds: &Dataset,
    params: &ModelParams,
    config: &ModelConfig,
    epsilon: f32,
) -> Result<AttentionMseReport> {
    if ds.is_empty() {
        return Err(Error::Empty("attention_mse on an empty dataset".into()));
    }
    let per: Vec<(f64, f64)> = ds
        .examples
        .par_iter()
        .map(|e| {
            if epsilon == 0.0 {
                return Ok((0.0, 0.0));
            }
            let r = fgsm_perturbation(e, params, config, epsilon)?;
            let adv = e.perturbed(&r.video, &r.audio)?;
            let a = forward(&e.video, &e.audio, params, config)?;
            let b = forward(&adv.video, &adv.audio, params, config)?;
            Ok((
                mse(&a.attn_video, &b.attn_video)?,
                mse(&a.attn_audio, &b.attn_audio)?,
            ))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let per_example_mse: Vec<f64> = per.iter().map(|(v, a)| (v + a) / 2.0).collect();
    Ok(AttentionMseReport {
        mean_mse: per_example_mse.iter().sum::<f64>() / n,
        mean_video_mse: per.iter().map(|p| p.0).sum::<f64>() / n,
        mean_audio_mse: per.iter().map(|p| p.1).sum::<f64>() / n,
        per_example_mse,
    })
}

/// Anything that exposes logits and their input gradients over the two
/// modalities.
pub trait Classifier: Sync {
    /// Logits at `(video, audio)` and, for each class in `classes`, the
    /// gradient of that logit with respect to both inputs.
    fn logit_gradients(
        &self,
        video: &Tensor,
        audio: &Tensor,
        classes: &[usize],
    ) -> Result<(Vec<f32>, Vec<(Tensor, Tensor)>)>;

    fn logits(&self, video: &Tensor, audio: &Tensor) -> Result<Vec<f32>> {
        Ok(self.logit_gradients(video, audio, &[])?.0)
    }
}

/// The attention classifier with fixed weights.
pub struct AttentionClassifier<'a> {
    pub params: &'a ModelParams,
    pub config: &'a ModelConfig,
}

impl Classifier for AttentionClassifier<'_> {
    fn logit_gradients(
        &self,
        video: &Tensor,
        audio: &Tensor,
        classes: &[usize],
    ) -> Result<(Vec<f32>, Vec<(Tensor, Tensor)>)> {
        let mut g = Graph::new();
        let pn = ParamNodes::register(&mut g, self.params, false)?;
        let xv = g.input(video.clone())?;
        let xa = g.input(audio.clone())?;
        let fwd = forward_nodes(&mut g, self.config, &pn, xv, xa)?;
        let logits = g.value(fwd.logits).data().to_vec();
        let mut grads = Vec::with_capacity(classes.len());
        for &k in classes {
            let pick = g.pick(fwd.logits, k)?;
            let mut gm = g.backward(pick, &[xv, xa])?;
            let gv = gm.take(xv).unwrap_or_else(|| Tensor::zeros(video.shape()));
            let ga = gm.take(xa).unwrap_or_else(|| Tensor::zeros(audio.shape()));
            grads.push((gv, ga));
        }
        Ok((logits, grads))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DeepFoolConfig {
    pub max_iter: usize,
    pub overshoot: f32,
    /// Number of highest-logit classes considered as boundaries.
    pub candidates: usize,
}

impl Default for DeepFoolConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            overshoot: 0.02,
            candidates: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepFoolResult {
    /// Total applied perturbation, already scaled by `1 + overshoot`.
    pub r_video: Tensor,
    pub r_audio: Tensor,
    pub converged: bool,
    pub iterations: usize,
    pub original_class: usize,
}

impl DeepFoolResult {
    pub fn norm(&self) -> f64 {
        (self.r_video.l2_norm().powi(2) + self.r_audio.l2_norm().powi(2)).sqrt()
    }
}

/// Index of the largest logit, lowest index on ties.
pub fn top_class(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn joint_axpy(acc: &mut [f64], s: f64, v: &Tensor, a: &Tensor) {
    for (o, &x) in acc.iter_mut().zip(v.data().iter().chain(a.data())) {
        *o += s * f64::from(x);
    }
}

/// Multiclass DeepFool on the top-1 decision: iteratively steps to the
/// nearest linearized boundary between the original top class and the
/// other highest-logit candidates until the top class changes.
pub fn deepfool<C: Classifier + ?Sized>(
    classifier: &C,
    example: &VideoExample,
    cfg: &DeepFoolConfig,
) -> Result<DeepFoolResult> {
    if cfg.max_iter == 0 || !(cfg.overshoot >= 0.0) || cfg.candidates < 2 {
        return Err(Error::Config(format!("invalid DeepFool settings {cfg:?}")));
    }
    let (nv, na) = (example.video.len(), example.audio.len());
    let logits0 = classifier.logits(&example.video, &example.audio)?;
    let k0 = top_class(&logits0);
    let mut order: Vec<usize> = (0..logits0.len()).collect();
    order.sort_by(|&a, &b| logits0[b].total_cmp(&logits0[a]).then(a.cmp(&b)));
    let mut classes = vec![k0];
    classes.extend(order.into_iter().filter(|&k| k != k0).take(cfg.candidates - 1));

    let scale = 1.0 + f64::from(cfg.overshoot);
    let mut r_tot = vec![0f64; nv + na];
    let applied = |r: &[f64]| -> Result<(Tensor, Tensor)> {
        let rv: Vec<f32> = r[..nv].iter().map(|v| (v * scale) as f32).collect();
        let ra: Vec<f32> = r[nv..].iter().map(|v| (v * scale) as f32).collect();
        Ok((
            Tensor::new(example.video.shape(), rv)?,
            Tensor::new(example.audio.shape(), ra)?,
        ))
    };

    let mut converged = false;
    let mut iterations = 0;
    let (mut xv, mut xa) = (example.video.clone(), example.audio.clone());
    loop {
        let (logits, grads) = classifier.logit_gradients(&xv, &xa, &classes)?;
        if top_class(&logits) != k0 {
            converged = true;
            break;
        }
        if iterations == cfg.max_iter {
            break;
        }
        let (g0v, g0a) = &grads[0];
        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        for (j, &k) in classes.iter().enumerate().skip(1) {
            let mut w = vec![0f64; nv + na];
            joint_axpy(&mut w, 1.0, &grads[j].0, &grads[j].1);
            joint_axpy(&mut w, -1.0, g0v, g0a);
            let wn2: f64 = w.iter().map(|v| v * v).sum();
            if wn2.sqrt() < 1e-12 {
                continue;
            }
            let fk = f64::from(logits[k]) - f64::from(logits[k0]);
            let dist = fk.abs() / wn2.sqrt();
            if best.as_ref().is_none_or(|b| dist < b.0) {
                best = Some((dist, fk.abs() / wn2, w));
            }
        }
        let Some((_, coef, w)) = best else {
            // every margin is flat in the input: no boundary to reach
            break;
        };
        for (r, wv) in r_tot.iter_mut().zip(&w) {
            *r += coef * wv;
        }
        iterations += 1;
        let (rv, ra) = applied(&r_tot)?;
        xv = example.video.add(&rv)?;
        xa = example.audio.add(&ra)?;
    }
    let (r_video, r_audio) = applied(&r_tot)?;
    Ok(DeepFoolResult {
        r_video,
        r_audio,
        converged,
        iterations,
        original_class: k0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExampleRobustness {
    pub id: String,
    pub rho: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessReport {
    pub rho_tot: f64,
    pub per_example: Vec<ExampleRobustness>,
    /// Fraction of examples whose top class DeepFool managed to flip.
    pub fooled_fraction: f64,
    /// `iterations_histogram[i]` counts converged examples that took `i` steps.
    pub iterations_histogram: Vec<usize>,
}

impl RobustnessReport {
    pub fn converged(&self) -> impl Iterator<Item = &ExampleRobustness> {
        self.per_example.iter().filter(|e| e.converged)
    }
}

/// Mean over converged examples of `||r_tot|| / ||X||`, both norms taken
/// over the two modalities jointly.
pub fn average_robustness<C: Classifier + ?Sized>(
    ds: &Dataset,
    classifier: &C,
    cfg: &DeepFoolConfig,
) -> Result<RobustnessReport> {
    let per_example: Vec<ExampleRobustness> = ds
        .examples
        .par_iter()
        .map(|e| {
            let r = deepfool(classifier, e, cfg)?;
            let xn = e.joint_norm();
            let rho = if xn > 0.0 { r.norm() / xn } else { 0.0 };
            Ok(ExampleRobustness {
                id: e.id.clone(),
                rho,
                iterations: r.iterations,
                converged: r.converged,
            })
        })
        .collect::<Result<_>>()?;
    robustness_from_examples(per_example, cfg.max_iter)
}

pub fn robustness_from_examples(
    per_example: Vec<ExampleRobustness>,
    max_iter: usize,
) -> Result<RobustnessReport> {
    let mut hist = vec![0usize; max_iter + 1];
    let mut sum = 0.0;
    let mut n = 0usize;
    for e in per_example.iter().filter(|e| e.converged) {
        sum += e.rho;
        n += 1;
        hist[e.iterations.min(max_iter)] += 1;
    }
    if n == 0 {
        return Err(Error::Empty("DeepFool converged on no example".into()));
    }
    Ok(RobustnessReport {
        rho_tot: sum / n as f64,
        fooled_fraction: n as f64 / per_example.len() as f64,
        iterations_histogram: hist,
        per_example,
    })
}

/// One row per converged example:
/// `id,rho,iterations,converged,attention_mse`.
pub fn robustness_csv(report: &RobustnessReport, attention: Option<&AttentionMseReport>) -> String {
    let mut s = String::from("id,rho,iterations,converged,attention_mse\n");
    for (i, e) in report.per_example.iter().enumerate() {
        if !e.converged {
            continue;
        }
        let mse = attention
            .and_then(|a| a.per_example_mse.get(i))
            .map_or_else(String::new, |v| v.to_string());
        let _ = writeln!(s, "{},{},{},{},{}", e.id, e.rho, e.iterations, e.converged, mse);
    }
    s
}

#[derive(Serialize)]
struct RobustnessSummary<'a> {
    rho_tot: f64,
    examples: usize,
    converged: usize,
    fooled_fraction: f64,
    iterations_histogram: &'a [usize],
    deepfool: &'a DeepFoolConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    attention_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attention_mse_video: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attention_mse_audio: Option<f64>,
}

pub fn robustness_summary(
    report: &RobustnessReport,
    cfg: &DeepFoolConfig,
    attention: Option<&AttentionMseReport>,
) -> Result<String> {
    let s = RobustnessSummary {
        rho_tot: report.rho_tot,
        examples: report.per_example.len(),
        converged: report.converged().count(),
        fooled_fraction: report.fooled_fraction,
        iterations_histogram: &report.iterations_histogram,
        deepfool: cfg,
        attention_mse: attention.map(|a| a.mean_mse),
        attention_mse_video: attention.map(|a| a.mean_video_mse),
        attention_mse_audio: attention.map(|a| a.mean_audio_mse),
    };
    Ok(serde_json::to_string_pretty(&s)? + "\n")
}

pub fn write_robustness(
    dir: &Path,
    report: &RobustnessReport,
    cfg: &DeepFoolConfig,
    attention: Option<&AttentionMseReport>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("robustness.csv"), robustness_csv(report, attention))?;
    fs::write(
        dir.join("robustness_summary.json"),
        robustness_summary(report, cfg, attention)?,
    )?;
    Ok(())
}

/// Mean squared difference between two attention maps of the same modality.
pub fn map_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    mse(a, b)
}

/// The modality's clean and perturbed head-averaged attention maps.
pub fn attention_pair(
    example: &VideoExample,
    params: &ModelParams,
    config: &ModelConfig,
    epsilon: f32,
    m: Modality,
) -> Result<(Tensor, Tensor)> {
    let r = fgsm_perturbation(example, params, config, epsilon)?;
    let adv = example.perturbed(&r.video, &r.audio)?;
    let a = forward(&example.video, &example.audio, params, config)?;
    let b = forward(&adv.video, &adv.audio, params, config)?;
    Ok((a.attention(m).clone(), b.attention(m).clone()))
}
