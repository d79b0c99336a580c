//! Training objectives: plain BCE, the FGSM-regularized adversarial loss,
//! and the adversarial loss with an attention-map Frobenius penalty.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_value, Graph, NodeId};
use crate::data::VideoExample;
use crate::error::{Error, Result};
use crate::model::{forward_nodes, ForwardNodes, ForwardOutput, Modality, ModelConfig, ModelParams, ParamNodes};
use crate::tensor::Tensor;

/// Below this gradient norm a modality gets no perturbation.
pub const DEGENERATE_GRAD_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvConfig {
    pub epsilon: f32,
    pub alpha: f32,
    pub beta_fr: f32,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            alpha: 1.0,
            beta_fr: 0.001,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("alpha", self.alpha),
            ("beta_fr", self.beta_fr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    NonArt,
    Art,
    AArt,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::NonArt, Regime::Art, Regime::AArt];

    pub fn name(self) -> &'static str {
        match self {
            Regime::NonArt => "non_art",
            Regime::Art => "art",
            Regime::AArt => "a_art",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_art" => Ok(Regime::NonArt),
            "art" => Ok(Regime::Art),
            "a_art" => Ok(Regime::AArt),
            other => Err(Error::Config(format!(
                "unknown regime {other:?} (expected non_art, art or a_art)"
            ))),
        }
    }
}

/// Mean binary cross-entropy over classes, probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn classification_loss(probs: &[f32], labels: &[f32]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::shape(
            "classification_loss",
            format!("{} probabilities vs {} labels", probs.len(), labels.len()),
        ));
    }
    Ok(bce_value(probs, labels))
}

/// First-order adversarial perturbation for both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub video: Tensor,
    pub audio: Tensor,
    pub degenerate_video: bool,
    pub degenerate_audio: bool,
}

impl Perturbation {
    pub fn zeros_like(example: &VideoExample) -> Self {
        Self {
            video: Tensor::zeros(example.video.shape()),
            audio: Tensor::zeros(example.audio.shape()),
            degenerate_video: false,
            degenerate_audio: false,
        }
    }

    pub fn get(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Video => &self.video,
            Modality::Audio => &self.audio,
        }
    }
}

/// `epsilon * g / ||g||_2` over the whole tensor, or zeros when `||g||` is
/// degenerate. Returns the flag alongside.
pub fn normalized_step(grad: &Tensor, epsilon: f32) -> (Tensor, bool) {
    let norm = grad.l2_norm();
    if norm < DEGENERATE_GRAD_NORM {
        return (Tensor::zeros(grad.shape()), true);
    }
    let s = f64::from(epsilon) / norm;
    (grad.map(|g| (f64::from(g) * s) as f32), false)
}

fn perturbation_from_grads(
    example: &VideoExample,
    gv: Option<&Tensor>,
    ga: Option<&Tensor>,
    epsilon: f32,
) -> Perturbation {
    let step = |g: Option<&Tensor>, like: &Tensor| match g {
        Some(g) => normalized_step(g, epsilon),
        None => (Tensor::zeros(like.shape()), true),
    };
    let (video, degenerate_video) = step(gv, &example.video);
    let (audio, degenerate_audio) = step(ga, &example.audio);
    Perturbation {
        video,
        audio,
        degenerate_video,
        degenerate_audio,
    }
}

/// `R = epsilon * G / ||G||_2` per modality, `G` the gradient of the BCE
/// loss with respect to that modality's frames.
pub fn fgsm_perturbation(
    example: &VideoExample,
    params: &ModelParams,
    config: &ModelConfig,
    epsilon: f32,
) -> Result<Perturbation> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(Perturbation::zeros_like(example));
    }
    let mut g = Graph::new();
    let pn = ParamNodes::register(&mut g, params, false)?;
    let xv = g.input(example.video.clone())?;
    let xa = g.input(example.audio.clone())?;
    let y = g.constant(Tensor::new(&[1, example.labels.len()], example.labels.clone())?)?;
    let fwd = forward_nodes(&mut g, config, &pn, xv, xa)?;
    let loss = g.bce(fwd.probs, y)?;
    let grads = g.backward(loss, &[xv, xa])?;
    Ok(perturbation_from_grads(example, grads.get(xv), grads.get(xa), epsilon))
}

/// `||A_video - A_video_adv||_F + ||A_audio - A_audio_adv||_F` on
/// head-averaged maps.
pub fn attention_regularizer(clean: &ForwardOutput, adv: &ForwardOutput) -> Result<f64> {
    let mut total = 0.0;
    for m in Modality::ALL {
        let d = clean.attention(m).sub(adv.attention(m)).map_err(|_| {
            Error::shape(
                "attention_regularizer",
                format!(
                    "{} maps {:?} vs {:?}",
                    m.name(),
                    clean.attention(m).shape(),
                    adv.attention(m).shape()
                ),
            )
        })?;
        total += d.l2_norm();
    }
    Ok(total)
}

/// Per-example loss terms as graph nodes.
#[derive(Clone, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub clean: NodeId,
    pub adversarial: Option<NodeId>,
    pub regularizer: Option<NodeId>,
    pub clean_forward: ForwardNodes,
}

/// Inputs of one example registered on a graph.
pub struct ExampleNodes {
    pub video: NodeId,
    pub audio: NodeId,
    pub labels: NodeId,
}

impl ExampleNodes {
    /// Registers frames as input leaves (differentiable) or constants.
    pub fn register(g: &mut Graph, example: &VideoExample, differentiable: bool) -> Result<Self> {
        let (video, audio) = if differentiable {
            (g.input(example.video.clone())?, g.input(example.audio.clone())?)
        } else {
            (g.constant(example.video.clone())?, g.constant(example.audio.clone())?)
        };
        let labels = g.constant(Tensor::new(&[1, example.labels.len()], example.labels.clone())?)?;
        Ok(Self { video, audio, labels })
    }
}

/// Appends the adversarial forward pass and the regime's loss to a graph
/// that already holds the clean forward pass and its BCE node. The
/// perturbation enters as a constant, so no gradient flows through its
/// construction.
pub fn append_regime_loss(
    g: &mut Graph,
    config: &ModelConfig,
    pn: &ParamNodes,
    ex: &ExampleNodes,
    clean_forward: ForwardNodes,
    clean: NodeId,
    perturbation: Option<&Perturbation>,
    regime: Regime,
    adv: &AdvConfig,
) -> Result<LossNodes> {
    let Some(r) = perturbation.filter(|_| regime != Regime::NonArt) else {
        return Ok(LossNodes {
            total: clean,
            clean,
            adversarial: None,
            regularizer: None,
            clean_forward,
        });
    };
    let rv = g.constant(r.video.clone())?;
    let ra = g.constant(r.audio.clone())?;
    let xv_adv = g.add(ex.video, rv)?;
    let xa_adv = g.add(ex.audio, ra)?;
    let adv_fwd = forward_nodes(g, config, pn, xv_adv, xa_adv)?;
    let adv_loss = g.bce(adv_fwd.probs, ex.labels)?;
    let weighted = g.scale(adv_loss, adv.alpha)?;
    let mut total = g.add(clean, weighted)?;
    let mut regularizer = None;
    if regime == Regime::AArt {
        let dv = g.sub(clean_forward.attn_video, adv_fwd.attn_video)?;
        let da = g.sub(clean_forward.attn_audio, adv_fwd.attn_audio)?;
        let nv = g.frobenius(dv)?;
        let na = g.frobenius(da)?;
        let reg = g.add(nv, na)?;
        let weighted = g.scale(reg, adv.beta_fr)?;
        total = g.add(total, weighted)?;
        regularizer = Some(reg);
    }
    Ok(LossNodes {
        total,
        clean,
        adversarial: Some(adv_loss),
        regularizer,
        clean_forward,
    })
}

/// Builds one example's full loss graph with trainable parameters. When the
/// regime is adversarial and no perturbation is supplied, it is computed on
/// the same graph from the clean forward pass.
pub fn example_loss_graph(
    example: &VideoExample,
    params: &ModelParams,
    config: &ModelConfig,
    regime: Regime,
    adv: &AdvConfig,
    perturbation: Option<&Perturbation>,
) -> Result<(Graph, ParamNodes, ExampleNodes, LossNodes)> {
    let mut g = Graph::new();
    let pn = ParamNodes::register(&mut g, params, true)?;
    let needs_input_grad = regime != Regime::NonArt && perturbation.is_none() && adv.epsilon > 0.0;
    let ex = ExampleNodes::register(&mut g, example, needs_input_grad)?;
    let fwd = forward_nodes(&mut g, config, &pn, ex.video, ex.audio)?;
    let clean = g.bce(fwd.probs, ex.labels)?;
    let computed;
    let r = match (regime, perturbation) {
        (Regime::NonArt, _) => None,
        (_, Some(r)) => Some(r),
        (_, None) if adv.epsilon == 0.0 => {
            computed = Perturbation::zeros_like(example);
            Some(&computed)
        }
        (_, None) => {
            let grads = g.backward(clean, &[ex.video, ex.audio])?;
            computed = perturbation_from_grads(example, grads.get(ex.video), grads.get(ex.audio), adv.epsilon);
            Some(&computed)
        }
    };
    let nodes = append_regime_loss(&mut g, config, &pn, &ex, fwd, clean, r, regime, adv)?;
    Ok((g, pn, ex, nodes))
}

/// Per-example loss value and parameter gradients.
fn example_loss_and_grad(
    example: &VideoExample,
    params: &ModelParams,
    config: &ModelConfig,
    regime: Regime,
    adv: &AdvConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let (g, pn, _, nodes) = example_loss_graph(example, params, config, regime, adv, None)?;
    let ids = pn.ids();
    let mut grads = g.backward(nodes.total, &ids)?;
    let grads = ids
        .iter()
        .zip(params.tensors())
        .map(|(id, t)| grads.take(*id).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((f64::from(g.value(nodes.total).data()[0]), grads))
}

/// Mean loss over the batch and its gradient with respect to every weight,
/// in [`ModelParams::tensors`] order. Examples are processed in parallel and
/// reduced in index order.
pub fn batch_loss_and_grad(
    batch: &[&VideoExample],
    params: &ModelParams,
    config: &ModelConfig,
    regime: Regime,
    adv: &AdvConfig,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let per: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|e| example_loss_and_grad(e, params, config, regime, adv))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut acc: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut loss = 0.0;
    for (l, grads) in &per {
        loss += l;
        for (a, g) in acc.iter_mut().zip(grads) {
            for (s, &v) in a.iter_mut().zip(g.data()) {
                *s += f64::from(v);
            }
        }
    }
    let grads = acc
        .into_iter()
        .zip(params.tensors())
        .map(|(a, t)| Tensor::new(t.shape(), a.into_iter().map(|v| (v / n) as f32).collect()))
        .collect::<Result<_>>()?;
    Ok((loss / n, grads))
}

/// Mean over the batch of the regime's per-example loss, without gradients.
pub fn regime_loss(
    batch: &[VideoExample],
    params: &ModelParams,
    config: &ModelConfig,
    regime: Regime,
    adv: &AdvConfig,
) -> Result<f64> {
    adv.validate()?;
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let per: Vec<f64> = batch
        .par_iter()
        .map(|e| {
            let (g, _, _, nodes) = example_loss_graph(e, params, config, regime, adv, None)?;
            Ok(f64::from(g.value(nodes.total).data()[0]))
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / batch.len() as f64)
}

/// Mean BCE over the batch.
pub fn ce_loss(batch: &[VideoExample], params: &ModelParams, config: &ModelConfig) -> Result<f64> {
    regime_loss(batch, params, config, Regime::NonArt, &AdvConfig::default())
}

/// `L_CE + alpha * mean l(y, theta(X + R))`.
pub fn adversarial_loss(
    batch: &[VideoExample],
    params: &ModelParams,
    config: &ModelConfig,
    adv: &AdvConfig,
) -> Result<f64> {
    regime_loss(batch, params, config, Regime::Art, adv)
}

/// Adversarial loss plus `beta_fr` times the mean attention regularizer.
pub fn total_loss(
    batch: &[VideoExample],
    params: &ModelParams,
    config: &ModelConfig,
    adv: &AdvConfig,
) -> Result<f64> {
    regime_loss(batch, params, config, Regime::AArt, adv)
}
