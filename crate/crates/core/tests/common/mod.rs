//! Reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

use aart::attack::Classifier;
use aart::data::{generate_synthetic, Dataset, SyntheticSpec};
use aart::metrics::{PredictionSet, VideoPrediction};
use aart::model::{ModelConfig, ModelParams};
use aart::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 5,
        video_dim: 6,
        audio_dim: 3,
        min_frames: 3,
        max_frames: 6,
        num_videos: 30,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_classes: 5,
        video_dim: 6,
        audio_dim: 3,
        model_dim: 8,
        num_heads: 2,
        max_frames: 6,
        seed,
        positional: false,
    }
}

pub fn tiny_dataset(seed: u64) -> Dataset {
    generate_synthetic(&tiny_spec(seed)).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Prediction set with coarse score levels so that ties are common, and ids
/// shuffled so that id order differs from index order.
pub fn random_predictions(rng: &mut ChaCha8Rng, videos: usize, classes: usize) -> PredictionSet {
    let mut ids: Vec<usize> = (0..videos).collect();
    ids.shuffle(rng);
    PredictionSet {
        videos: ids
            .into_iter()
            .map(|id| {
                let scores = (0..classes).map(|_| rng.gen_range(0..=32) as f32 / 32.0).collect();
                let n = rng.gen_range(1..=3);
                let mut labels: Vec<usize> = (0..classes).collect();
                labels.shuffle(rng);
                labels.truncate(n);
                VideoPrediction { id: format!("vid{id:05}"), scores, labels }
            })
            .collect(),
    }
}

/// Classes in rank order found by repeated selection of the best remaining.
fn select_top(scores: &[f32], k: usize) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while out.len() < k && !left.is_empty() {
        let mut bi = 0;
        for i in 1..left.len() {
            if scores[left[i]] > scores[left[bi]] {
                bi = i;
            }
        }
        out.push(left.remove(bi));
    }
    out
}

/// Quadratic-time GAP: each pooled item's rank is found by counting the
/// items that precede it.
pub fn brute_gap(p: &PredictionSet, top_k: usize) -> f64 {
    let mut pool = Vec::new();
    let mut positives = 0;
    for (vi, v) in p.videos.iter().enumerate() {
        positives += v.labels.len();
        for c in select_top(&v.scores, top_k) {
            pool.push((v.scores[c], v.id.as_str(), vi, c, v.labels.contains(&c)));
        }
    }
    let before = |a: &(f32, &str, usize, usize, bool), b: &(f32, &str, usize, usize, bool)| {
        a.0 > b.0 || (a.0 == b.0 && (a.1, a.2, a.3) < (b.1, b.2, b.3))
    };
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for item in pool.iter().filter(|i| i.4) {
        let rank = pool.iter().filter(|o| before(o, item)).count();
        let hits_above = pool.iter().filter(|o| o.4 && before(o, item)).count();
        ranked.push((rank, hits_above + 1));
    }
    ranked.sort();
    ranked.iter().map(|&(r, h)| h as f64 / (r + 1) as f64).sum::<f64>() / positives as f64
}

pub fn brute_perr(p: &PredictionSet) -> f64 {
    let mut total = 0.0;
    for v in &p.videos {
        let n = v.labels.len();
        let top = select_top(&v.scores, n);
        total += top.iter().filter(|c| v.labels.contains(c)).count() as f64 / n as f64;
    }
    total / p.videos.len() as f64
}

pub fn brute_hit_at_1(p: &PredictionSet) -> f64 {
    let hits = p.videos.iter().filter(|v| v.labels.contains(&select_top(&v.scores, 1)[0])).count();
    hits as f64 / p.videos.len() as f64
}

/// `logits = W [vec(video); vec(audio)] + b`.
pub struct LinearClassifier {
    pub w: Vec<Vec<f32>>,
    pub b: Vec<f32>,
    pub video_shape: Vec<usize>,
    pub audio_shape: Vec<usize>,
}

impl LinearClassifier {
    pub fn random(rng: &mut ChaCha8Rng, classes: usize, video_shape: &[usize], audio_shape: &[usize]) -> Self {
        let n: usize = video_shape.iter().product::<usize>() + audio_shape.iter().product::<usize>();
        Self {
            w: (0..classes).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            b: (0..classes).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            video_shape: video_shape.to_vec(),
            audio_shape: audio_shape.to_vec(),
        }
    }

    pub fn logits_f64(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.b)
            .map(|(w, b)| w.iter().zip(x).map(|(a, b)| f64::from(*a) * b).sum::<f64>() + f64::from(*b))
            .collect()
    }
}

impl Classifier for LinearClassifier {
    fn logit_gradients(&self, video: &Tensor, audio: &Tensor, classes: &[usize]) -> Result<(Vec<f32>, Vec<(Tensor, Tensor)>)> {
        let x: Vec<f64> = video.data().iter().chain(audio.data()).map(|v| f64::from(*v)).collect();
        let logits = self.logits_f64(&x).into_iter().map(|v| v as f32).collect();
        let nv = video.len();
        let grads = classes
            .iter()
            .map(|&k| {
                let w = &self.w[k];
                (
                    Tensor::new(&self.video_shape, w[..nv].to_vec()).unwrap(),
                    Tensor::new(&self.audio_shape, w[nv..].to_vec()).unwrap(),
                )
            })
            .collect();
        Ok((logits, grads))
    }
}

/// Straight-loop forward pass in `f64`. Returns probabilities and the
/// head-averaged attention map of each modality.
pub fn loop_forward(video: &Tensor, audio: &Tensor, p: &ModelParams, c: &ModelConfig) -> (Vec<f64>, [Vec<Vec<f64>>; 2]) {
    let d = c.model_dim;
    let heads = c.num_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mm = |x: &[Vec<f64>], w: &Tensor| -> Vec<Vec<f64>> {
        let (r, cols) = w.rows_cols();
        x.iter()
            .map(|row| (0..cols).map(|j| (0..r).map(|i| row[i] * f64::from(w.get2(i, j))).sum()).collect())
            .collect()
    };
    let mut pooled_all = Vec::new();
    let mut maps = Vec::new();
    for (x, mp) in [(video, &p.video), (audio, &p.audio)] {
        let (t, _) = x.rows_cols();
        let rows: Vec<Vec<f64>> = (0..t).map(|i| x.row(i).iter().map(|v| f64::from(*v)).collect()).collect();
        let h = mm(&rows, &mp.w_in);
        let (q, k, v) = (mm(&h, &mp.w_q), mm(&h, &mp.w_k), mm(&h, &mp.w_v));
        let mut avg = vec![vec![0.0; t]; t];
        let mut out = vec![vec![0.0; d]; t];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..t {
                let s: Vec<f64> = (0..t).map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale).collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..t {
                    let a = e[j] / z;
                    avg[i][j] += a / heads as f64;
                    for c in cols.clone() {
                        out[i][c] += a * v[j][c];
                    }
                }
            }
        }
        pooled_all.extend((0..d).map(|c| out.iter().map(|r| r[c]).sum::<f64>() / t as f64));
        maps.push(avg);
    }
    let logits = mm(&[pooled_all], &p.w_c).remove(0);
    let probs = logits
        .iter()
        .zip(p.b_c.data())
        .map(|(l, b)| 1.0 / (1.0 + (-(l + f64::from(*b))).exp()))
        .collect();
    let audio_map = maps.pop().unwrap();
    (probs, [maps.pop().unwrap(), audio_map])
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst relative error of the analytic gradient of one example's full
/// regime loss, w.r.t. every weight and both input tensors, against
/// central differences. The perturbation is held at its value at the base
/// point, matching its treatment as a constant in the loss.
pub fn regime_loss_grad_check(
    example: &aart::data::VideoExample,
    params: &ModelParams,
    config: &ModelConfig,
    regime: aart::losses::Regime,
    adv: &aart::losses::AdvConfig,
    step: f32,
) -> Result<f64> {
    use aart::autodiff::grad_check;
    use aart::losses::{append_regime_loss, fgsm_perturbation, ExampleNodes};
    use aart::model::{forward_nodes, ParamNodes};

    assert!(!config.positional);
    let r = fgsm_perturbation(example, params, config, adv.epsilon)?;
    let mut leaves: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    leaves.push(example.video.clone());
    leaves.push(example.audio.clone());
    let labels = Tensor::new(&[1, example.labels.len()], example.labels.clone())?;
    grad_check(
        |g, ids| {
            let pn = ParamNodes {
                video: [ids[0], ids[1], ids[2], ids[3]],
                video_pos: None,
                audio: [ids[4], ids[5], ids[6], ids[7]],
                audio_pos: None,
                w_c: ids[8],
                b_c: ids[9],
            };
            let ex = ExampleNodes { video: ids[10], audio: ids[11], labels: g.constant(labels.clone())? };
            let fwd = forward_nodes(g, config, &pn, ex.video, ex.audio)?;
            let clean = g.bce(fwd.probs, ex.labels)?;
            Ok(append_regime_loss(g, config, &pn, &ex, fwd, clean, Some(&r), regime, adv)?.total)
        },
        &leaves,
        step,
    )
}
