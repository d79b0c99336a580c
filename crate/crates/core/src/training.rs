//! Adam training with validation-GAP early stopping and reduce-on-plateau
//! learning-rate scheduling, for all three regimes, plus hyperparameter
//! sweeps.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, VideoExample};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::losses::{batch_loss_and_grad, AdvConfig, Regime};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::tensor::Tensor;

/// Minimum increase of validation GAP that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub adv: AdvConfig,
    pub lr: f32,
    pub batch_size: usize,
    pub eval_every: usize,
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f32,
    pub max_iterations: usize,
    /// Adam's denominator constant. Zero keeps the optimizer exactly
    /// invariant to a rescaling of the loss.
    pub adam_eps: f64,
    pub seed: u64,
    pub model_dim: usize,
    pub num_heads: usize,
    pub max_frames: usize,
    pub positional: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::NonArt,
            adv: AdvConfig::default(),
            lr: 0.0002,
            batch_size: 64,
            eval_every: 200,
            early_stop_patience: 5,
            plateau_patience: 3,
            plateau_factor: 0.1,
            max_iterations: 5000,
            adam_eps: 0.0,
            seed: 1,
            model_dim: 32,
            num_heads: 8,
            max_frames: 30,
            positional: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adv.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.adam_eps >= 0.0 && self.adam_eps.is_finite()) {
            return Err(Error::Config(format!("adam_eps must be >= 0, got {}", self.adam_eps)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau_factor must be in (0, 1), got {}",
                self.plateau_factor
            )));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("early_stop_patience", self.early_stop_patience),
            ("plateau_patience", self.plateau_patience),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.trim() {
            "regime" => self.regime = value.trim().parse()?,
            "epsilon" => self.adv.epsilon = parse(key, value)?,
            "alpha" => self.adv.alpha = parse(key, value)?,
            "beta_fr" => self.adv.beta_fr = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "early_stop_patience" => self.early_stop_patience = parse(key, value)?,
            "plateau_patience" => self.plateau_patience = parse(key, value)?,
            "plateau_factor" => self.plateau_factor = parse(key, value)?,
            "max_iterations" => self.max_iterations = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "model_dim" => self.model_dim = parse(key, value)?,
            "num_heads" => self.num_heads = parse(key, value)?,
            "max_frames" => self.max_frames = parse(key, value)?,
            "positional" => self.positional = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a plain-text `key = value` file; `#` starts a comment.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn model_config(&self, ds: &Dataset) -> ModelConfig {
        ModelConfig {
            num_classes: ds.num_classes,
            video_dim: ds.video_dim,
            audio_dim: ds.audio_dim,
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            max_frames: self.max_frames,
            seed: self.seed,
            positional: self.positional,
        }
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 0.0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f32) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = f64::from(lr);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gv = f64::from(gv);
            let mn = b1 * f64::from(*mv) + (1.0 - b1) * gv;
            let vn = b2 * f64::from(*vv) + (1.0 - b2) * gv * gv;
            *mv = mn as f32;
            *vv = vn as f32;
            let denom = (vn / c2).sqrt() + state.eps;
            // a zero second moment means every gradient so far was zero
            let update = if denom > 0.0 { lr * (mn / c1) / denom } else { 0.0 };
            *pv = (f64::from(*pv) - update) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    EarlyStopping,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub val_gap: f64,
    pub lr: f32,
    /// Mean training loss over the iterations since the previous evaluation.
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EvalRecord>,
    pub best_iteration: usize,
    pub best_val_gap: Option<f64>,
    pub iterations_run: usize,
    pub stop_reason: StopReason,
    /// Batch loss at every iteration.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,val_gap,lr,train_loss\n");
        for r in &self.history {
            let _ = writeln!(s, "{},{},{},{}", r.iteration, r.val_gap, r.lr, r.train_loss);
        }
        s
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub config: ModelConfig,
    pub report: TrainReport,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of the shuffling permutation for one epoch.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    splitmix(splitmix(seed) ^ epoch)
}

/// Endless stream of example indices, one fresh permutation per epoch.
struct BatchStream {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order
            .shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(self.seed, self.epoch)));
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.n {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn diverged(iteration: usize, lr: f32, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            iteration,
            lr,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Trains a model under `config.regime`, returning the best-validation-GAP
/// weights.
pub fn train(config: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Empty("training and validation splits must be non-empty".into()));
    }
    train_set.validate()?;
    let model_config = config.model_config(train_set);
    let longest = train_set.max_frames().max(val_set.max_frames());
    if longest > model_config.max_frames {
        return Err(Error::Config(format!(
            "videos have up to {longest} frames, max_frames is {}",
            model_config.max_frames
        )));
    }
    let mut params = init_params(&model_config)?;
    let mut adam = AdamState::new(params.tensors());
    adam.eps = config.adam_eps;
    let mut lr = config.lr;
    let mut stream = BatchStream::new(train_set.len(), config.seed);

    let mut history = Vec::new();
    let mut losses = Vec::with_capacity(config.max_iterations);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut reference = f64::NEG_INFINITY;
    let mut plateau_bad = 0;
    let mut stop_bad = 0;
    let mut window = (0.0f64, 0usize);
    let mut stop_reason = StopReason::MaxIterations;
    let mut iterations_run = 0;

    for it in 1..=config.max_iterations {
        let idx = stream.next_batch(config.batch_size);
        let batch: Vec<&VideoExample> = idx.iter().map(|&i| &train_set.examples[i]).collect();
        let (loss, grads) = batch_loss_and_grad(&batch, &params, &model_config, config.regime, &config.adv)
            .map_err(|e| diverged(it, lr, e))?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: it,
                lr,
                detail: format!("loss {loss}"),
            });
        }
        adam_step(&mut params.tensors_mut(), &grads, &mut adam, lr)?;
        losses.push(loss);
        window.0 += loss;
        window.1 += 1;
        iterations_run = it;

        if it % config.eval_every != 0 {
            continue;
        }
        let gap = evaluate(val_set, &params, &model_config)
            .map_err(|e| diverged(it, lr, e))?
            .gap;
        history.push(EvalRecord {
            iteration: it,
            val_gap: gap,
            lr,
            train_loss: window.0 / window.1 as f64,
        });
        window = (0.0, 0);
        if best.as_ref().is_none_or(|b| gap > b.0) {
            best = Some((gap, it, params.clone()));
        }
        if gap >= reference + MIN_IMPROVEMENT {
            reference = gap;
            plateau_bad = 0;
            stop_bad = 0;
            continue;
        }
        plateau_bad += 1;
        stop_bad += 1;
        if stop_bad >= config.early_stop_patience {
            stop_reason = StopReason::EarlyStopping;
            break;
        }
        if plateau_bad >= config.plateau_patience {
            lr *= config.plateau_factor;
            plateau_bad = 0;
        }
    }

    let (best_val_gap, best_iteration, params) = match best {
        Some((g, i, p)) => (Some(g), i, p),
        None => (None, iterations_run, params),
    };
    Ok(TrainOutcome {
        params,
        config: model_config,
        report: TrainReport {
            history,
            best_iteration,
            best_val_gap,
            iterations_run,
            stop_reason,
            losses,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Epsilon,
    Alpha,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Epsilon => "epsilon",
            SweepParam::Alpha => "alpha",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f32,
    pub val_gap: Option<f64>,
    pub iterations: usize,
    pub best_iteration: usize,
    pub error: Option<String>,
}

/// One full training run per grid value with otherwise identical settings.
/// A failing run is recorded and the remaining grid points still run.
pub fn sweep(
    base: &TrainConfig,
    param: SweepParam,
    grid: &[f32],
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    Ok(grid
        .par_iter()
        .map(|&value| {
            let mut cfg = base.clone();
            match param {
                SweepParam::Epsilon => cfg.adv.epsilon = value,
                SweepParam::Alpha => cfg.adv.alpha = value,
            }
            match train(&cfg, train_set, val_set) {
                Ok(out) => SweepRow {
                    value,
                    val_gap: out.report.best_val_gap,
                    iterations: out.report.iterations_run,
                    best_iteration: out.report.best_iteration,
                    error: None,
                },
                Err(e) => SweepRow {
                    value,
                    val_gap: None,
                    iterations: 0,
                    best_iteration: 0,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut s = String::from("parameter,value,val_gap,iterations,best_iteration,status\n");
    for r in rows {
        let gap = r.val_gap.map_or_else(String::new, |g| g.to_string());
        let status = match &r.error {
            None => "ok".to_string(),
            Some(e) => format!("\"failed: {}\"", e.replace('"', "'")),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            param.name(),
            r.value,
            gap,
            r.iterations,
            r.best_iteration,
            status
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = Tensor::from_rows(&[&[1.0, -2.0]]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new([&p]);
        for _ in 0..10 {
            adam_step(&mut [&mut p], &[Tensor::zeros(&[1, 2])], &mut st, 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_by_hand() {
        // m = 0.1 g, v = 0.001 g^2; corrected m = g, v = g^2, step = lr * g / (|g| + eps)
        let g = 0.5f64;
        let lr = 0.01f32;
        let eps = 1e-8;
        let expect = 1.0 - f64::from(lr) * g / (g + eps);
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new([&p]);
        st.eps = eps;
        adam_step(&mut [&mut p], &[Tensor::scalar(g as f32)], &mut st, lr).unwrap();
        assert!((f64::from(p.data()[0]) - expect).abs() < 1e-7);
        // second step with the same gradient: corrected moments unchanged
        let m = 0.9 * 0.05 + 0.1 * g;
        let v = 0.999 * 0.00025 + 0.001 * g * g;
        let step2 = f64::from(lr) * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.998001)).sqrt() + 1e-8);
        adam_step(&mut [&mut p], &[Tensor::scalar(g as f32)], &mut st, lr).unwrap();
        assert!((f64::from(p.data()[0]) - (expect - step2)).abs() < 1e-6);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new([&p]);
        assert!(adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st, 0.1).is_err());
    }

    #[test]
    fn batch_stream_covers_each_epoch() {
        let mut s = BatchStream::new(10, 3);
        let mut first: Vec<usize> = s.next_batch(10);
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let again = BatchStream::new(10, 3).next_batch(25);
        assert_eq!(again, BatchStream::new(10, 3).next_batch(25));
    }

    #[test]
    fn kv_config_parsing() {
        let mut c = TrainConfig::default();
        c.apply_kv_text("# comment\nregime = art\nepsilon=0.25\nmax_iterations = 7\n")
            .unwrap();
        assert_eq!(c.regime, Regime::Art);
        assert_eq!(c.adv.epsilon, 0.25);
        assert_eq!(c.max_iterations, 7);
        assert!(c.apply_kv_text("nonsense").is_err());
        assert!(c.apply_kv_text("lr = fast").is_err());
        assert!(c.apply_kv_text("regime = sgd").is_err());
    }

    #[test]
    fn invalid_train_configs() {
        let bad = [
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { plateau_factor: 1.0, ..TrainConfig::default() },
            TrainConfig { early_stop_patience: 0, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }
}
