//! The acceptance criteria, run end to end on the default synthetic data
//! for seeds 1, 2 and 3. Prints one PASS/FAIL line per criterion and fails
//! if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use aart::attack::{
    attention_mse, average_robustness, deepfool, make_adversarial_testset, write_robustness, AttentionClassifier,
    DeepFoolConfig,
};
use aart::cli::{losses_csv, SPLIT_FRACTIONS};
use aart::data::{generate_synthetic, split, write_dataset, Dataset, SyntheticSpec, VideoExample};
use aart::eval::evaluate;
use aart::losses::{fgsm_perturbation, Regime};
use aart::metrics::{gap, hit_at_1, perr, DEFAULT_GAP_TOP_K};
use aart::model::{init_params, save_checkpoint, Modality, ModelConfig};
use aart::training::{sweep, train, SweepParam, TrainConfig};
use common::*;

const SEEDS: [u64; 3] = [1, 2, 3];
const DESK: &str = include_str!("../../../configs/desk.cfg");
const ATTACK_EPS: f32 = 0.5;
const SWEEP_GRID: [f32; 5] = [0.1, 0.5, 1.0, 2.0, 4.0];
const BUDGET_SECS: f64 = 45.0 * 60.0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// Bypasses the test harness capture so the lines always reach the log.
fn report(line: &str) {
    let mut out = std::io::stdout();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn desk_config(regime: Regime, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig { regime, seed, ..TrainConfig::default() };
    cfg.apply_kv_text(DESK).unwrap();
    cfg
}

fn default_data(seed: u64) -> (Dataset, [Dataset; 3]) {
    let ds = generate_synthetic(&SyntheticSpec { seed, ..SyntheticSpec::default() }).unwrap();
    let parts = split(&ds, SPLIT_FRACTIONS, seed).unwrap();
    (ds, parts)
}

fn gradient_correctness() -> Verdict {
    let t0 = Instant::now();
    let (ds, _) = default_data(1);
    let mut cfg = desk_config(Regime::AArt, 1);
    let examples: Vec<&VideoExample> = ds.examples.iter().filter(|e| e.num_frames() <= 12).take(20).collect();
    let mut worst = 0f64;
    for (i, ex) in examples.iter().enumerate() {
        cfg.seed = 100 + i as u64;
        let config = cfg.model_config(&ds);
        let params = init_params(&config).unwrap();
        let err = regime_loss_grad_check(ex, &params, &config, Regime::AArt, &cfg.adv, 1e-3).unwrap();
        worst = worst.max(err);
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        examples.len() == 20 && worst < 1e-3 && secs < 60.0,
        format!("max relative error {worst:.2e} over {} examples in {secs:.1}s", examples.len()),
    )
}

fn fgsm_norm_contract() -> Verdict {
    let (ds, _) = default_data(7);
    let mut worst = 0f64;
    let mut checked = 0;
    for i in 0..100u64 {
        let config = ModelConfig { seed: 1000 + i, ..ModelConfig::default() };
        let params = init_params(&config).unwrap();
        let ex = &ds.examples[i as usize * 37 % ds.len()];
        for eps in [0.1f32, 0.5, 1.0] {
            let r = fgsm_perturbation(ex, &params, &config, eps).unwrap();
            for m in Modality::ALL {
                worst = worst.max((r.get(m).l2_norm() - f64::from(eps)).abs());
                checked += 1;
            }
        }
    }
    verdict(worst <= 1e-5, format!("max |norm - eps| {worst:.2e} over {checked} perturbations"))
}

fn regime_nesting() -> Verdict {
    let (_, [tr, va, _]) = default_data(1);
    let run = |regime| {
        let mut cfg = desk_config(regime, 1);
        cfg.adv.epsilon = 0.0;
        cfg.max_iterations = 100;
        cfg.eval_every = 50;
        train(&cfg, &tr, &va).unwrap()
    };
    let plain = run(Regime::NonArt);
    let art = run(Regime::Art);
    let alpha = f64::from(desk_config(Regime::Art, 1).adv.alpha);
    let worst = plain
        .report
        .losses
        .iter()
        .zip(&art.report.losses)
        .map(|(p, a)| (a - (1.0 + alpha) * p).abs())
        .fold(0.0, f64::max);
    let same_len = plain.report.losses.len() == art.report.losses.len() && !art.report.losses.is_empty();
    verdict(
        same_len && worst <= 1e-5,
        format!("max deviation {worst:.2e} over {} iterations", art.report.losses.len()),
    )
}

fn metric_oracles() -> Verdict {
    let mut rng = seeded(404);
    let mut worst = 0f64;
    for _ in 0..50 {
        let p = random_predictions(&mut rng, 200, 20);
        worst = worst
            .max((gap(&p, DEFAULT_GAP_TOP_K).unwrap() - brute_gap(&p, DEFAULT_GAP_TOP_K)).abs())
            .max((perr(&p).unwrap() - brute_perr(&p)).abs())
            .max((hit_at_1(&p).unwrap() - brute_hit_at_1(&p)).abs());
    }
    verdict(worst <= 1e-9, format!("max deviation {worst:.2e} over 50 sets"))
}

fn deepfool_linear_closed_form() -> f64 {
    let mut rng = seeded(99);
    let cfg = DeepFoolConfig::default();
    let mut worst = 0f64;
    for t in 0..20 {
        let clf = LinearClassifier::random(&mut rng, 6, &[4, 5], &[4, 2]);
        let ex = VideoExample {
            id: format!("l{t}"),
            video: random_tensor(&mut rng, &[4, 5], 1.0),
            audio: random_tensor(&mut rng, &[4, 2], 1.0),
            labels: vec![0.0; 6],
        };
        let x: Vec<f64> = ex.video.data().iter().chain(ex.audio.data()).map(|v| f64::from(*v)).collect();
        let f = clf.logits_f64(&x);
        let k0 = (0..f.len()).fold(0, |b, k| if f[k] > f[b] { k } else { b });
        let mut best = (f64::INFINITY, Vec::new());
        for k in (0..f.len()).filter(|&k| k != k0) {
            let w: Vec<f64> = clf.w[k].iter().zip(&clf.w[k0]).map(|(a, b)| f64::from(a - b)).collect();
            let wn2: f64 = w.iter().map(|v| v * v).sum();
            let dist = (f[k] - f[k0]).abs() / wn2.sqrt();
            if dist < best.0 {
                let c = (f[k] - f[k0]).abs() / wn2 * (1.0 + f64::from(cfg.overshoot));
                best = (dist, w.iter().map(|v| v * c).collect());
            }
        }
        let r = deepfool(&clf, &ex, &cfg).unwrap();
        if !r.converged {
            return f64::INFINITY;
        }
        for (g, w) in r.r_video.data().iter().chain(r.r_audio.data()).zip(&best.1) {
            worst = worst.max((f64::from(*g) - w).abs());
        }
    }
    worst
}

#[derive(Clone, Debug)]
struct RegimeResult {
    clean_gap: f64,
    adv_gap: f64,
    attention_mse: f64,
    rho_tot: f64,
}

/// Trains, evaluates and attacks all three regimes for one seed, writing
/// every artifact under `dir`.
fn pipeline(seed: u64, dir: &Path) -> (BTreeMap<Regime, RegimeResult>, Option<f64>) {
    fs::create_dir_all(dir).unwrap();
    let (ds, [tr, va, te]) = default_data(seed);
    write_dataset(&ds, &dir.join("data.avd")).unwrap();
    let mut results = BTreeMap::new();
    let mut art_val_gap = None;
    for regime in Regime::ALL {
        let cfg = desk_config(regime, seed);
        let out = train(&cfg, &tr, &va).unwrap();
        let name = regime.name();
        let rdir = dir.join(name);
        fs::create_dir_all(&rdir).unwrap();
        save_checkpoint(&rdir.join("model.aat"), &out.config, &out.params).unwrap();
        fs::write(rdir.join("report.csv"), out.report.to_csv()).unwrap();
        fs::write(rdir.join("losses.csv"), losses_csv(&out.report.losses)).unwrap();

        let clean = evaluate(&te, &out.params, &out.config).unwrap();
        let adv_set = make_adversarial_testset(&te, &out.params, &out.config, ATTACK_EPS).unwrap();
        write_dataset(&adv_set, &rdir.join("adversarial.avd")).unwrap();
        let adv = evaluate(&adv_set, &out.params, &out.config).unwrap();
        fs::write(
            rdir.join("eval.csv"),
            format!(
                "split,epsilon,gap,perr,hit_at_1\ntest,0,{},{},{}\ntest,{ATTACK_EPS},{},{},{}\n",
                clean.gap, clean.perr, clean.hit_at_1, adv.gap, adv.perr, adv.hit_at_1
            ),
        )
        .unwrap();
        let mse = attention_mse(&te, &out.params, &out.config, ATTACK_EPS).unwrap();
        let df = DeepFoolConfig::default();
        let clf = AttentionClassifier { params: &out.params, config: &out.config };
        let rob = average_robustness(&te, &clf, &df).unwrap();
        write_robustness(&rdir, &rob, &df, Some(&mse)).unwrap();
        if regime == Regime::Art {
            art_val_gap = out.report.best_val_gap;
        }
        report(&format!(
            "    seed {seed} {name:7} iters {:4} clean GAP {:.4} adv GAP {:.4} attention MSE {:.3e} rho_tot {:.5}",
            out.report.iterations_run, clean.gap, adv.gap, mse.mean_mse, rob.rho_tot
        ));
        results.insert(
            regime,
            RegimeResult { clean_gap: clean.gap, adv_gap: adv.gap, attention_mse: mse.mean_mse, rho_tot: rob.rho_tot },
        );
    }
    (results, art_val_gap)
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pts(x: f64) -> f64 {
    100.0 * x
}

#[test]
fn acceptance_criteria() {
    let mut verdicts: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |n, name, v: Verdict| {
        report(&format!("[{}] {n:2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail));
        verdicts.push((n, name, v));
    };
    record(1, "gradient correctness", gradient_correctness());
    record(2, "FGSM norm contract", fgsm_norm_contract());
    record(3, "regime nesting", regime_nesting());
    record(4, "metric oracles", metric_oracles());

    let work = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let mut runs = BTreeMap::new();
    let mut sweeps = BTreeMap::new();
    for seed in SEEDS {
        let (res, art_val) = pipeline(seed, &work.path().join(format!("seed{seed}")));
        let (_, [tr, va, _]) = default_data(seed);
        let base = desk_config(Regime::Art, seed);
        let others: Vec<f32> = SWEEP_GRID.iter().copied().filter(|&e| e != base.adv.epsilon).collect();
        let rows = sweep(&base, SweepParam::Epsilon, &others, &tr, &va).unwrap();
        let mut curve: Vec<(f32, Option<f64>)> = rows.iter().map(|r| (r.value, r.val_gap)).collect();
        curve.push((base.adv.epsilon, art_val));
        curve.sort_by(|a, b| a.0.total_cmp(&b.0));
        report(&format!("    seed {seed} epsilon sweep (val GAP): {curve:?}"));
        runs.insert(seed, res);
        sweeps.insert(seed, curve);
    }
    let pipeline_secs = t0.elapsed().as_secs_f64();

    let r = |s: &u64, g: Regime| runs[s][&g].clone();
    let drops: Vec<f64> = SEEDS.iter().map(|s| pts(r(s, Regime::NonArt).clean_gap - r(s, Regime::NonArt).adv_gap)).collect();
    record(
        5,
        "attack effectiveness",
        verdict(drops.iter().all(|d| *d >= 5.0), format!("Non-ART clean-minus-adversarial GAP points {drops:.2?}")),
    );

    let mut ordered = 0;
    let mut clean_close = true;
    let mut detail = Vec::new();
    for s in &SEEDS {
        let (n, a, f) = (r(s, Regime::NonArt), r(s, Regime::Art), r(s, Regime::AArt));
        if pts(f.adv_gap - a.adv_gap) >= 1.0 && pts(a.adv_gap - n.adv_gap) >= 1.0 {
            ordered += 1;
        }
        let cg = [n.clean_gap, a.clean_gap, f.clean_gap];
        let spread = pts(cg.iter().cloned().fold(f64::MIN, f64::max) - cg.iter().cloned().fold(f64::MAX, f64::min));
        clean_close &= spread <= 3.0;
        detail.push(format!("seed {s}: adv {:.2}/{:.2}/{:.2} clean spread {spread:.2}", pts(f.adv_gap), pts(a.adv_gap), pts(n.adv_gap)));
    }
    record(
        6,
        "robustness ordering",
        verdict(ordered >= 2 && clean_close, format!("{ordered}/3 seeds ordered A-ART>ART>Non-ART; {}", detail.join("; "))),
    );

    let ratios: Vec<f64> = SEEDS.iter().map(|s| r(s, Regime::AArt).attention_mse / r(s, Regime::Art).attention_mse).collect();
    record(
        7,
        "attention-map MSE",
        verdict(ratios.iter().all(|q| *q <= 0.1), format!("A-ART/ART MSE ratios {ratios:.4?}")),
    );

    let rho_ordered = SEEDS
        .iter()
        .filter(|s| r(s, Regime::AArt).rho_tot > r(s, Regime::Art).rho_tot && r(s, Regime::Art).rho_tot > r(s, Regime::NonArt).rho_tot)
        .count();
    let rhos: Vec<[f64; 3]> = SEEDS.iter().map(|s| [r(s, Regime::AArt).rho_tot, r(s, Regime::Art).rho_tot, r(s, Regime::NonArt).rho_tot]).collect();
    let lin = deepfool_linear_closed_form();
    record(
        8,
        "DeepFool rho ordering",
        verdict(rho_ordered >= 2 && lin <= 1e-5, format!("{rho_ordered}/3 seeds ordered, rho (A-ART, ART, Non-ART) {rhos:.5?}; linear closed form error {lin:.2e}")),
    );

    let shape_ok: Vec<bool> = sweeps
        .values()
        .map(|curve| {
            let gaps: Option<Vec<f64>> = curve.iter().map(|c| c.1).collect();
            gaps.is_some_and(|g| {
                let max = g.iter().cloned().fold(f64::MIN, f64::max);
                g[g.len() - 1] < max
            })
        })
        .collect();
    record(9, "sweep shape", verdict(shape_ok.iter().all(|b| *b), format!("val GAP at eps=4 below grid max per seed {shape_ok:?}")));

    let again = work.path().join("rerun");
    pipeline(SEEDS[0], &again);
    let first = files_under(&work.path().join(format!("seed{}", SEEDS[0])));
    let second = files_under(&again);
    let differing: Vec<_> = first.iter().filter(|(p, b)| second.get(*p) != Some(*b)).map(|(p, _)| p.display().to_string()).collect();
    record(
        10,
        "determinism",
        verdict(
            differing.is_empty() && first.len() == second.len(),
            format!("{} artifacts compared, {} differ {differing:?}", first.len(), differing.len()),
        ),
    );

    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    record(
        11,
        "runtime budget",
        verdict(
            pipeline_secs < BUDGET_SECS,
            format!("3 seeds x 3 regimes plus epsilon sweep in {:.1} min on {cores} core(s)", pipeline_secs / 60.0),
        ),
    );

    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.2.pass).map(|v| v.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
