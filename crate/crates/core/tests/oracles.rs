//! Library results checked against independent straight-line references.

mod common;

use aart::attack::{attention_mse, deepfool, DeepFoolConfig};
use aart::autodiff::{bce_value, grad_check, Graph, NodeId};
use aart::data::VideoExample;
use aart::losses::{fgsm_perturbation, AdvConfig, Regime};
use aart::metrics::{gap, hit_at_1, perr, DEFAULT_GAP_TOP_K};
use aart::model::{forward, init_params, Modality, ModelConfig};
use aart::plot::Profile;
use aart::training::{adam_step, AdamState};
use aart::{Result, Tensor};
use common::*;
use rand::Rng;

#[test]
fn forward_matches_loop_reference() {
    let mut rng = seeded(11);
    for (seed, heads, d) in [(1, 1, 4), (2, 2, 8), (3, 4, 8), (4, 8, 16)] {
        let config = ModelConfig { num_heads: heads, model_dim: d, seed, ..tiny_config(seed) };
        let params = init_params(&config).unwrap();
        let v = random_tensor(&mut rng, &[4, config.video_dim], 2.0);
        let a = random_tensor(&mut rng, &[4, config.audio_dim], 2.0);
        let out = forward(&v, &a, &params, &config).unwrap();
        let (probs, maps) = loop_forward(&v, &a, &params, &config);
        for (x, y) in out.probs.data().iter().zip(&probs) {
            assert!((f64::from(*x) - y).abs() < 1e-5, "prob {x} vs {y}");
        }
        for (m, want) in Modality::ALL.into_iter().zip(&maps) {
            let got = out.attention(m);
            for (i, row) in want.iter().enumerate() {
                for (j, &w) in row.iter().enumerate() {
                    assert!((f64::from(got.get2(i, j)) - w).abs() < 1e-5);
                }
            }
        }
    }
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = seeded(5);
    for _ in 0..10 {
        let p = random_predictions(&mut rng, 60, 20);
        for k in [1, 3, DEFAULT_GAP_TOP_K] {
            assert!((gap(&p, k).unwrap() - brute_gap(&p, k)).abs() <= 1e-9);
        }
        assert!((perr(&p).unwrap() - brute_perr(&p)).abs() <= 1e-9);
        assert!((hit_at_1(&p).unwrap() - brute_hit_at_1(&p)).abs() <= 1e-9);
    }
}

#[test]
fn deepfool_on_linear_classifier_is_closed_form() {
    let mut rng = seeded(8);
    let cfg = DeepFoolConfig::default();
    for trial in 0..10 {
        let clf = LinearClassifier::random(&mut rng, 5, &[3, 4], &[3, 2]);
        let ex = VideoExample {
            id: format!("lin{trial}"),
            video: random_tensor(&mut rng, &[3, 4], 1.0),
            audio: random_tensor(&mut rng, &[3, 2], 1.0),
            labels: vec![0.0; 5],
        };
        let x: Vec<f64> = ex.video.data().iter().chain(ex.audio.data()).map(|v| f64::from(*v)).collect();
        let f = clf.logits_f64(&x);
        let k0 = (0..5).fold(0, |b, k| if f[k] > f[b] { k } else { b });
        let (mut best, mut want) = (f64::INFINITY, vec![]);
        for k in (0..5).filter(|&k| k != k0) {
            let w: Vec<f64> = clf.w[k].iter().zip(&clf.w[k0]).map(|(a, b)| f64::from(a - b)).collect();
            let wn2: f64 = w.iter().map(|v| v * v).sum();
            let dist = (f[k] - f[k0]).abs() / wn2.sqrt();
            if dist < best {
                best = dist;
                let c = (f[k] - f[k0]).abs() / wn2 * (1.0 + f64::from(cfg.overshoot));
                want = w.iter().map(|v| v * c).collect();
            }
        }
        let r = deepfool(&clf, &ex, &cfg).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        assert_eq!(r.original_class, k0);
        let got: Vec<f32> = r.r_video.data().iter().chain(r.r_audio.data()).copied().collect();
        for (g, w) in got.iter().zip(&want) {
            assert!((f64::from(*g) - w).abs() < 1e-5, "{g} vs {w}");
        }
    }
}

#[test]
fn fgsm_follows_finite_difference_gradient() {
    let ds = tiny_dataset(4);
    let config = tiny_config(4);
    let params = init_params(&config).unwrap();
    let bce = |v: &Tensor, a: &Tensor, y: &[f32]| {
        let out = forward(v, a, &params, &config).unwrap();
        bce_value(out.probs.data(), y)
    };
    for ex in &ds.examples[..5] {
        let r = fgsm_perturbation(ex, &params, &config, 0.3).unwrap();
        for m in Modality::ALL {
            let x = ex.frames(m);
            let h = 1e-3f32;
            let fd: Vec<f64> = (0..x.len())
                .map(|i| {
                    let mut p = x.clone();
                    let mut n = x.clone();
                    p.data_mut()[i] += h;
                    n.data_mut()[i] -= h;
                    let (fp, fm) = match m {
                        Modality::Video => (bce(&p, &ex.audio, &ex.labels), bce(&n, &ex.audio, &ex.labels)),
                        Modality::Audio => (bce(&ex.video, &p, &ex.labels), bce(&ex.video, &n, &ex.labels)),
                    };
                    (fp - fm) / (2.0 * f64::from(h))
                })
                .collect();
            let fd_norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            let rm = r.get(m);
            let cos = rm.data().iter().zip(&fd).map(|(a, b)| f64::from(*a) * b).sum::<f64>() / (rm.l2_norm() * fd_norm);
            assert!(cos > 0.999, "{} cosine {cos}", m.name());
            assert!((rm.l2_norm() - 0.3).abs() < 1e-5);
        }
    }
}

type Build = fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

fn squash(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let s = g.sigmoid(x)?;
    let s = g.mul(s, x)?;
    g.sum(s)
}

#[test]
fn gradients_match_finite_differences_on_random_graphs() {
    let builds: [(&str, usize, Build); 12] = [
        ("matmul", 2, |g, l| {
            let m = g.matmul(l[0], l[1])?;
            squash(g, m)
        }),
        ("transpose", 1, |g, l| {
            let t = g.transpose(l[0])?;
            let m = g.matmul(l[0], t)?;
            squash(g, m)
        }),
        ("add_sub_mul", 3, |g, l| {
            let a = g.add(l[0], l[1])?;
            let b = g.sub(a, l[2])?;
            let c = g.mul(b, l[0])?;
            squash(g, c)
        }),
        ("softmax", 1, |g, l| {
            let s = g.softmax_rows(l[0])?;
            let s = g.mul(s, l[0])?;
            g.sum(s)
        }),
        ("relu_scale", 1, |g, l| {
            let r = g.relu(l[0])?;
            let r = g.scale(r, 1.7)?;
            squash(g, r)
        }),
        ("mean_rows", 1, |g, l| {
            let m = g.mean(l[0], 0)?;
            squash(g, m)
        }),
        ("mean_cols", 1, |g, l| {
            let m = g.mean(l[0], 1)?;
            squash(g, m)
        }),
        ("concat_slice", 2, |g, l| {
            let c = g.concat(&[l[0], l[1]], 1)?;
            let cols = g.value(c).rows_cols().1;
            let s = g.slice_cols(c, 1, cols - 1)?;
            squash(g, s)
        }),
        ("add_row", 2, |g, l| {
            let row = g.mean(l[1], 0)?;
            let a = g.add_row(l[0], row)?;
            squash(g, a)
        }),
        ("frobenius", 1, |g, l| g.frobenius(l[0])),
        ("l2_pick", 1, |g, l| {
            let n = g.l2_norm(l[0])?;
            let p = g.pick(l[0], 0)?;
            let p = g.mul(p, p)?;
            g.add(n, p)
        }),
        ("heads", 3, |g, l| {
            let a = g.head_attention(l[0], l[1], 2, 0.6)?;
            let o = g.head_mix(a, l[2])?;
            let m = g.mean_heads(a)?;
            let s = squash(g, o)?;
            let t = g.frobenius(m)?;
            g.add(s, t)
        }),
    ];
    let mut rng = seeded(21);
    let mut checked = 0;
    for (name, arity, build) in builds {
        for _ in 0..2 {
            let r = rng.gen_range(2..5);
            let c = 2 * rng.gen_range(1..4);
            let leaves: Vec<Tensor> = (0..arity)
                .map(|i| {
                    let shape = if name == "matmul" && i == 1 { [c, r] } else { [r, c] };
                    random_tensor(&mut rng, &shape, 1.0)
                })
                .collect();
            let err = grad_check(build, &leaves, 1e-3).unwrap();
            assert!(err < 1e-3, "{name} {r}x{c}: {err}");
            checked += 1;
        }
    }
    assert!(checked >= 20);
}

#[test]
fn bce_through_sigmoid_gradient() {
    let mut rng = seeded(3);
    let y = Tensor::new(&[1, 4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let x = random_tensor(&mut rng, &[1, 4], 2.0);
    let err = grad_check(
        |g, l| {
            let p = g.sigmoid(l[0])?;
            let y = g.constant(y.clone())?;
            g.bce(p, y)
        },
        &[x],
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3);
}

#[test]
fn full_regime_losses_pass_grad_check() {
    let ds = tiny_dataset(9);
    let config = tiny_config(9);
    let params = init_params(&config).unwrap();
    let adv = AdvConfig { epsilon: 0.5, alpha: 1.0, beta_fr: 0.5 };
    for regime in Regime::ALL {
        for ex in &ds.examples[..3] {
            let err = regime_loss_grad_check(ex, &params, &config, regime, &adv, 1e-3).unwrap();
            assert!(err < 1e-3, "{regime:?} {}: {err}", ex.id);
        }
    }
}

#[test]
fn adam_three_steps_by_hand() {
    let mut p = Tensor::scalar(0.5);
    let grads = [0.2f64, -0.1, 0.4];
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.01f64);
    let mut state = AdamState::new([&p]);
    state.eps = eps;
    let (mut m, mut v, mut want) = (0.0, 0.0, 0.5f64);
    for (t, &gv) in grads.iter().enumerate() {
        adam_step(&mut [&mut p], &[Tensor::scalar(gv as f32)], &mut state, lr as f32).unwrap();
        m = b1 * m + (1.0 - b1) * gv;
        v = b2 * v + (1.0 - b2) * gv * gv;
        let t = t as i32 + 1;
        want -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        assert!((f64::from(p.data()[0]) - want).abs() < 1e-6, "step {t}");
    }
}

#[test]
fn default_adam_ignores_loss_scale() {
    let mut rng = seeded(17);
    let mut a = random_tensor(&mut rng, &[3, 4], 1.0);
    let mut b = a.clone();
    let (mut sa, mut sb) = (AdamState::new([&a]), AdamState::new([&b]));
    for _ in 0..20 {
        let g = random_tensor(&mut rng, &[3, 4], 1e-3);
        adam_step(&mut [&mut a], std::slice::from_ref(&g), &mut sa, 0.01).unwrap();
        adam_step(&mut [&mut b], &[g.scale(4.0)], &mut sb, 0.01).unwrap();
    }
    assert_eq!(a, b);
}

#[test]
fn attention_mse_matches_loop() {
    let ds = tiny_dataset(6);
    let config = tiny_config(6);
    let params = init_params(&config).unwrap();
    let sub = ds.with_examples(ds.examples[..8].to_vec());
    let report = attention_mse(&sub, &params, &config, 0.7).unwrap();
    let mut total = 0.0;
    for (ex, got) in sub.examples.iter().zip(&report.per_example_mse) {
        let r = fgsm_perturbation(ex, &params, &config, 0.7).unwrap();
        let clean = forward(&ex.video, &ex.audio, &params, &config).unwrap();
        let adv = forward(&ex.video.add(&r.video).unwrap(), &ex.audio.add(&r.audio).unwrap(), &params, &config).unwrap();
        let mut per = 0.0;
        for m in Modality::ALL {
            let (a, b) = (clean.attention(m).data(), adv.attention(m).data());
            per += a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum::<f64>() / a.len() as f64;
        }
        per /= 2.0;
        assert!((per - got).abs() < 1e-9, "{per} vs {got}");
        total += per;
    }
    assert!((total / 8.0 - report.mean_mse).abs() < 1e-9);
}

#[test]
fn column_mean_profile_matches_loop() {
    let ds = tiny_dataset(2);
    let config = tiny_config(2);
    let params = init_params(&config).unwrap();
    let ex = &ds.examples[0];
    let map = forward(&ex.video, &ex.audio, &params, &config).unwrap().attn_video;
    let t = map.rows_cols().0;
    let prof = Profile::ColumnMean.compute(&map).unwrap();
    for (j, p) in prof.iter().enumerate() {
        let want: f64 = (0..t).map(|i| f64::from(map.get2(i, j))).sum::<f64>() / t as f64;
        assert!((p - want).abs() < 1e-12);
    }
    // rows are stochastic, so the column means sum to one
    assert!((prof.iter().sum::<f64>() - 1.0).abs() < 1e-5);
}
