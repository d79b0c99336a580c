//! The `aart` command-line tool.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
//! configuration error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attack::{
    attention_mse, attention_pair, average_robustness, make_adversarial_testset, write_robustness,
    AttentionClassifier, DeepFoolConfig,
};
use crate::data::{generate_synthetic, read_dataset, split, write_dataset, write_jsonl, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::manifest::ExperimentManifest;
use crate::model::{load_checkpoint, save_checkpoint, Modality, ModelConfig, ModelParams};
use crate::plot::{LinePlot, Profile, Series};
use crate::training::{sweep, sweep_csv, train, SweepParam, TrainConfig};

pub const SPLIT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];
const DEFAULT_SEED: u64 = 1;

#[derive(Parser, Debug)]
#[command(name = "aart", version, about = "Adversarial training and robustness evaluation of attention video classifiers")]
pub struct Cli {
    /// Seed for data generation, splitting and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory that receives every output file named by a relative path.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train one model.
    Train(TrainArgs),
    /// GAP, PERR and Hit@1 on a clean or FGSM-perturbed split.
    Eval(EvalArgs),
    /// Write an FGSM-perturbed split and its attention-map MSE.
    Attack(AttackArgs),
    /// DeepFool average robustness over a split.
    Robustness(RobustnessArgs),
    /// One training run per grid value of epsilon or alpha.
    Sweep(SweepArgs),
    /// Clean vs perturbed attention profile of one video.
    PlotAttention(PlotAttentionArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a JSON-lines export.
    #[arg(long)]
    pub jsonl: Option<PathBuf>,
    #[arg(long)]
    pub num_videos: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub video_dim: Option<usize>,
    #[arg(long)]
    pub audio_dim: Option<usize>,
    #[arg(long)]
    pub min_frames: Option<usize>,
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    pub min_labels: Option<usize>,
    #[arg(long)]
    pub max_labels: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f32>,
    #[arg(long)]
    pub motif_std: Option<f32>,
    #[arg(long)]
    pub motif_length: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset file in the AVD1 format.
    #[arg(long)]
    pub data: PathBuf,
    /// Seed of the 80/10/10 split (default: the global seed).
    #[arg(long)]
    pub split_seed: Option<u64>,
}

/// Training settings; each one overrides the `--config` file.
#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    /// Plain-text `key = value` file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub regime: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f32>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub beta_fr: Option<f32>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub early_stop_patience: Option<usize>,
    #[arg(long)]
    pub plateau_patience: Option<usize>,
    #[arg(long)]
    pub plateau_factor: Option<f32>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub positional: Option<bool>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Checkpoint path (default `<regime>.aat`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Report CSV path (default `<regime>_report.csv`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Evaluate on the FGSM-perturbed split at this radius.
    #[arg(long)]
    pub adversarial: Option<f32>,
    /// Also append the metrics row to this CSV file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    #[arg(long, default_value_t = 0.5)]
    pub epsilon: f32,
    /// Perturbed dataset path.
    #[arg(long, default_value = "adversarial.avd")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0.02)]
    pub overshoot: f32,
    /// Number of highest-logit classes DeepFool linearizes.
    #[arg(long, default_value_t = 10)]
    pub candidates: usize,
    /// FGSM radius for the attention-MSE column.
    #[arg(long, default_value_t = 0.5)]
    pub epsilon: f32,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long, value_enum, default_value = "epsilon")]
    pub param: SweepKind,
    /// Comma-separated grid (default 0.1,0.5,1,2,4 for epsilon and 0.25,1,4 for alpha).
    #[arg(long)]
    pub grid: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Epsilon,
    Alpha,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProfileKind {
    ColumnMean,
    RowEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModalityName {
    Video,
    Audio,
}

#[derive(Args, Debug)]
pub struct PlotAttentionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file; the video is looked up by id in the whole file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub video_id: String,
    #[arg(long, default_value_t = 0.5)]
    pub epsilon: f32,
    #[arg(long, value_enum, default_value = "video")]
    pub modality: ModalityName,
    #[arg(long, value_enum, default_value = "column-mean")]
    pub profile: ProfileKind,
    /// Output file stem; `.csv` and `.svg` are appended.
    #[arg(long, default_value = "attention_profile")]
    pub out: PathBuf,
}

/// Exit code for an error: configuration problems are usage errors.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Process entry point.
pub fn main() -> i32 {
    run(std::env::args_os())
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    fs::create_dir_all(&cli.out_dir)?;
    let ctx = Context {
        seed: cli.seed,
        out_dir: &cli.out_dir,
    };
    pool.install(|| match &cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Attack(a) => cmd_attack(&ctx, a),
        Command::Robustness(a) => cmd_robustness(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::PlotAttention(a) => cmd_plot_attention(&ctx, a),
    })
}

struct Context<'a> {
    seed: Option<u64>,
    out_dir: &'a Path,
}

impl Context<'_> {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    fn output(&self, p: &Path) -> Result<PathBuf> {
        let out = self.out_dir.join(p);
        if let Some(parent) = out.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(out)
    }

    fn load_split(&self, data: &DataArgs, which: SplitName) -> Result<Dataset> {
        let ds = read_dataset(&data.data)?;
        if which == SplitName::All {
            return Ok(ds);
        }
        let [tr, va, te] = split(&ds, SPLIT_FRACTIONS, data.split_seed.unwrap_or(self.seed()))?;
        Ok(match which {
            SplitName::Train => tr,
            SplitName::Val => va,
            _ => te,
        })
    }
}

fn cmd_synth(ctx: &Context, a: &SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec {
        seed: ctx.seed(),
        ..SyntheticSpec::default()
    };
    macro_rules! over {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { spec.$f = v; } )* };
    }
    over!(num_videos, num_classes, video_dim, audio_dim, min_frames, max_frames);
    over!(min_labels, max_labels, noise_std, motif_std, motif_length);
    spec.validate()?;
    let ds = generate_synthetic(&spec)?;
    let out = ctx.output(&a.out)?;
    write_dataset(&ds, &out)?;
    if let Some(j) = &a.jsonl {
        write_jsonl(&ds, &ctx.output(j)?)?;
    }
    println!("wrote {} videos to {}", ds.len(), out.display());
    Ok(())
}

fn train_config(ctx: &Context, flags: &TrainFlags, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_kv_text(&text)?;
    }
    macro_rules! apply {
        ($($f:ident),*) => {
            $( if let Some(v) = &flags.$f { cfg.set(stringify!($f), &v.to_string())?; } )*
        };
    }
    apply!(regime, epsilon, alpha, beta_fr, lr, batch_size, eval_every);
    apply!(early_stop_patience, plateau_patience, plateau_factor, max_iterations, adam_eps);
    apply!(model_dim, num_heads, positional);
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `iteration,loss` for every training iteration.
pub fn losses_csv(losses: &[f64]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{}", i + 1, l);
    }
    s
}

fn cmd_train(ctx: &Context, a: &TrainArgs) -> Result<()> {
    let cfg = train_config(ctx, &a.flags, TrainConfig::default())?;
    let ds = read_dataset(&a.data.data)?;
    let split_seed = a.data.split_seed.unwrap_or(cfg.seed);
    let [tr, va, _] = split(&ds, SPLIT_FRACTIONS, split_seed)?;
    let out = train(&cfg, &tr, &va)?;
    let name = cfg.regime.name();
    let ckpt_rel = a.checkpoint.clone().unwrap_or_else(|| format!("{name}.aat").into());
    let report_rel = a.report.clone().unwrap_or_else(|| format!("{name}_report.csv").into());
    let losses_rel = PathBuf::from(format!("{name}_losses.csv"));
    save_checkpoint(&ctx.output(&ckpt_rel)?, &out.config, &out.params)?;
    fs::write(ctx.output(&report_rel)?, out.report.to_csv())?;
    fs::write(ctx.output(&losses_rel)?, losses_csv(&out.report.losses))?;

    let mut manifest = ExperimentManifest {
        dataset: Some(std::path::absolute(&a.data.data)?),
        regime: Some(cfg.regime),
        adv: Some(cfg.adv),
        seeds: vec![cfg.seed, split_seed],
        ..ExperimentManifest::default()
    };
    manifest.checkpoints.insert(name.into(), ckpt_rel);
    manifest.reports.insert("train".into(), report_rel);
    manifest.reports.insert("losses".into(), losses_rel);
    manifest.save(&ctx.output(Path::new(&format!("{name}_manifest.json")))?)?;

    println!(
        "{name}: {} iterations, best val GAP {} at iteration {} ({:?})",
        out.report.iterations_run,
        out.report.best_val_gap.map_or_else(|| "n/a".into(), |g| format!("{g:.6}")),
        out.report.best_iteration,
        out.report.stop_reason
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    load_checkpoint(path)
}

fn cmd_eval(ctx: &Context, a: &EvalArgs) -> Result<()> {
    let (config, params) = load_model(&a.checkpoint)?;
    let mut ds = ctx.load_split(&a.data, a.split)?;
    let eps = a.adversarial.unwrap_or(0.0);
    if eps < 0.0 || !eps.is_finite() {
        return Err(Error::Config(format!("--adversarial must be >= 0, got {eps}")));
    }
    if eps > 0.0 {
        ds = make_adversarial_testset(&ds, &params, &config, eps)?;
    }
    let m = evaluate(&ds, &params, &config)?;
    let split = format!("{:?}", a.split).to_lowercase();
    let row = format!("{split},{eps},{},{},{}\n", m.gap, m.perr, m.hit_at_1);
    print!("split,epsilon,gap,perr,hit_at_1\n{row}");
    if let Some(out) = &a.out {
        let path = ctx.output(out)?;
        let mut text = if path.exists() {
            fs::read_to_string(&path)?
        } else {
            "split,epsilon,gap,perr,hit_at_1\n".to_string()
        };
        text.push_str(&row);
        fs::write(path, text)?;
    }
    Ok(())
}

fn cmd_attack(ctx: &Context, a: &AttackArgs) -> Result<()> {
    if a.epsilon <= 0.0 || !a.epsilon.is_finite() {
        return Err(Error::Config(format!("--epsilon must be > 0, got {}", a.epsilon)));
    }
    let (config, params) = load_model(&a.checkpoint)?;
    let ds = ctx.load_split(&a.data, a.split)?;
    let adv = make_adversarial_testset(&ds, &params, &config, a.epsilon)?;
    let out = ctx.output(&a.out)?;
    write_dataset(&adv, &out)?;
    let mse = attention_mse(&ds, &params, &config, a.epsilon)?;
    let mut csv = String::from("id,attention_mse\n");
    for (e, v) in ds.examples.iter().zip(&mse.per_example_mse) {
        let _ = writeln!(csv, "{},{}", e.id, v);
    }
    fs::write(ctx.output(Path::new("attention_mse.csv"))?, csv)?;
    println!(
        "wrote {} perturbed videos to {}; mean attention MSE {} (video {}, audio {})",
        adv.len(),
        out.display(),
        mse.mean_mse,
        mse.mean_video_mse,
        mse.mean_audio_mse
    );
    Ok(())
}

fn cmd_robustness(ctx: &Context, a: &RobustnessArgs) -> Result<()> {
    if a.max_iter == 0 || a.candidates < 2 || !(a.overshoot >= 0.0) {
        return Err(Error::Config(
            "need --max-iter >= 1, --candidates >= 2 and --overshoot >= 0".into(),
        ));
    }
    let (config, params) = load_model(&a.checkpoint)?;
    let ds = ctx.load_split(&a.data, a.split)?;
    let cfg = DeepFoolConfig {
        max_iter: a.max_iter,
        overshoot: a.overshoot,
        candidates: a.candidates,
    };
    let clf = AttentionClassifier {
        params: &params,
        config: &config,
    };
    let report = average_robustness(&ds, &clf, &cfg)?;
    let mse = attention_mse(&ds, &params, &config, a.epsilon)?;
    write_robustness(ctx.out_dir, &report, &cfg, Some(&mse))?;
    println!(
        "rho_tot {} over {} converged of {} videos",
        report.rho_tot,
        report.converged().count(),
        report.per_example.len()
    );
    Ok(())
}

fn parse_grid(text: &str) -> Result<Vec<f32>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f32>()
                .map_err(|_| Error::Config(format!("bad grid value {v:?}")))
        })
        .collect()
}

fn cmd_sweep(ctx: &Context, a: &SweepArgs) -> Result<()> {
    let base = TrainConfig {
        regime: crate::losses::Regime::Art,
        ..TrainConfig::default()
    };
    let cfg = train_config(ctx, &a.flags, base)?;
    let (param, default_grid) = match a.param {
        SweepKind::Epsilon => (SweepParam::Epsilon, "0.1,0.5,1,2,4"),
        SweepKind::Alpha => (SweepParam::Alpha, "0.25,1,4"),
    };
    let grid = parse_grid(a.grid.as_deref().unwrap_or(default_grid))?;
    let ds = read_dataset(&a.data.data)?;
    let [tr, va, _] = split(&ds, SPLIT_FRACTIONS, a.data.split_seed.unwrap_or(cfg.seed))?;
    let rows = sweep(&cfg, param, &grid, &tr, &va)?;
    fs::write(ctx.output(Path::new("sweep.csv"))?, sweep_csv(param, &rows))?;
    let plot = LinePlot {
        title: format!("Validation GAP vs {}", param.name()),
        x_label: param.name().into(),
        y_label: "validation GAP".into(),
        series: vec![Series {
            label: cfg.regime.name().into(),
            points: rows
                .iter()
                .map(|r| (f64::from(r.value), r.val_gap.unwrap_or(f64::NAN)))
                .collect(),
        }],
    };
    fs::write(ctx.output(Path::new("sweep.svg"))?, plot.to_svg())?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    println!("{} grid points, {failed} failed", rows.len());
    Ok(())
}

fn cmd_plot_attention(ctx: &Context, a: &PlotAttentionArgs) -> Result<()> {
    if a.epsilon < 0.0 || !a.epsilon.is_finite() {
        return Err(Error::Config(format!("--epsilon must be >= 0, got {}", a.epsilon)));
    }
    let (config, params) = load_model(&a.checkpoint)?;
    let ds = read_dataset(&a.data)?;
    let example = ds
        .examples
        .iter()
        .find(|e| e.id == a.video_id)
        .ok_or_else(|| Error::Config(format!("no video with id {:?}", a.video_id)))?;
    let m = match a.modality {
        ModalityName::Video => Modality::Video,
        ModalityName::Audio => Modality::Audio,
    };
    let profile = match a.profile {
        ProfileKind::ColumnMean => Profile::ColumnMean,
        ProfileKind::RowEntropy => Profile::RowEntropy,
    };
    let (clean, adv) = attention_pair(example, &params, &config, a.epsilon, m)?;
    let pc = profile.compute(&clean)?;
    let pa = profile.compute(&adv)?;
    let mut csv = String::from("frame,clean,adversarial\n");
    for (i, (c, v)) in pc.iter().zip(&pa).enumerate() {
        let _ = writeln!(csv, "{i},{c},{v}");
    }
    let stem = ctx.output(&a.out)?;
    let with_ext = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    fs::write(with_ext(".csv"), csv)?;
    let series = |label: String, p: &[f64]| Series {
        label,
        points: p.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect(),
    };
    let plot = LinePlot {
        title: format!("{} attention profile of {}", m.name(), a.video_id),
        x_label: "frame".into(),
        y_label: profile.name().replace('_', " "),
        series: vec![
            series("clean".into(), &pc),
            series(format!("perturbed (eps {})", a.epsilon), &pa),
        ],
    };
    fs::write(with_ext(".svg"), plot.to_svg())?;
    println!("wrote {} frames to {}", pc.len(), with_ext(".csv").display());
    Ok(())
}
