//! Command-line front end: synthetic data generation, training, evaluation,
//! the experiment harnesses, gradient checks and single-pair inference.
//!
//! Settings resolve as built-in defaults, then an optional TOML config file,
//! then explicit flags.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use mgaze_core::data::{
    crop_head_patch, load_dataset, load_image_tensor, synth_make_dataset, synthetic_records,
    write_annotations, write_patch_container, PairSample, SyntheticSceneConfig, PATCH_FILE,
};
use mgaze_core::eval::{
    ablation_run, average_precision, format_table, fov_csv, fov_sweep, limited_data_run,
    synthetic_experiment_config, to_jsonl, Experiment,
};
use mgaze_core::geometry::focal_from_fov;
use mgaze_core::model::{gradcheck_pair, gradcheck_params, infer_pair_with, predict_scores, train};
use mgaze_core::nn::gradcheck::layer_suite;
use mgaze_core::nn::{read_checkpoint, write_checkpoint, Checkpoint};
use mgaze_core::{HeadBox, ImageDims, ModelParams, TrainConfig};

pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "log.jsonl";
/// Relative error at or above which `gradcheck` fails.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(
    name = "mgaze",
    version,
    about = "Mutual-gaze detection with an auxiliary 3D gaze task"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (train/val/test annotation files plus patches).
    GenSynth(GenSynthArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Score a dataset with a checkpoint and report AP.
    Eval(EvalArgs),
    /// Train the four aux/3D ablation conditions over several seeds.
    Ablate(ExperimentArgs),
    /// Compare the full model with no-aux on fractions of the training set.
    LimitedData(LimitedDataArgs),
    /// Retrain with several assumed fields of view.
    SweepFov(SweepFovArgs),
    /// Finite-difference gradient checks for every layer and the full loss.
    Gradcheck(GradcheckArgs),
    /// Score one head pair in an image.
    Infer(InferArgs),
}

/// Training overrides shared by every command that trains.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    /// TOML file with training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub in_channels: Option<usize>,
    #[arg(long)]
    pub fov: Option<f64>,
    /// Disable the auxiliary gaze loss.
    #[arg(long)]
    pub no_aux: bool,
    /// Zero the 3D direction in the spatial encoding.
    #[arg(long)]
    pub no_3d: bool,
    /// Disable all augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

impl TrainOverrides {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self, defaults: TrainConfig) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => read_toml_over(p, &defaults)?,
            None => defaults,
        };
        macro_rules! set {
            ($($field:ident <- $flag:ident),*) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        set!(lambda <- lambda, batch_size <- batch_size, lr <- lr, lr_decay <- lr_decay,
             decay_every <- decay_every, epochs <- epochs, seed <- seed,
             in_channels <- in_channels, fov_deg <- fov);
        if self.no_aux {
            cfg.aux_gaze = false;
        }
        if self.no_3d {
            cfg.use_3d_encoding = false;
        }
        if self.no_augment {
            cfg.augment = mgaze_core::data::AugmentConfig::none();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse a TOML file on top of `base`: keys present in the file replace the
/// corresponding fields, unknown keys are rejected.
fn read_toml_over<T: Serialize + DeserializeOwned>(path: &Path, base: &T) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: toml::Table =
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut merged = toml::Table::try_from(base).context("serializing defaults")?;
    merge_tables(&mut merged, file);
    merged
        .try_into()
        .with_context(|| format!("invalid settings in {}", path.display()))
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with scene settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 4000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 500)]
    pub n_val: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0.27)]
    pub positive_fraction: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fov: Option<f64>,
    #[arg(long)]
    pub channels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training annotation file.
    #[arg(long)]
    pub train: PathBuf,
    /// Optional validation annotation file.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory (config snapshot and checkpoint).
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Assumed field of view; defaults to the one used in training.
    #[arg(long)]
    pub fov: Option<f64>,
    /// Also write the PR curve and AP as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Directory with train.jsonl, test.jsonl and patches.bin.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct LimitedDataArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.125, 0.25, 0.5, 1.0])]
    pub fractions: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct SweepFovArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![33.0, 43.0, 53.0, 63.0, 73.0])]
    pub fovs: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Random coordinates checked per convolution tensor.
    #[arg(long, default_value_t = 64)]
    pub conv_samples: usize,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// First head as cx,cy,w,h in pixels.
    #[arg(long, value_delimiter = ',', required = true)]
    pub box1: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub box2: Vec<f64>,
    #[arg(long)]
    pub fov: Option<f64>,
}

/// Parse `argv` (including the program name) and run the command.
pub fn run_command<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    run(cli.command)
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth(a) => gen_synth(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Ablate(a) => ablate_cmd(&a),
        Command::LimitedData(a) => limited_cmd(&a),
        Command::SweepFov(a) => sweep_cmd(&a),
        Command::Gradcheck(a) => gradcheck_cmd(&a),
        Command::Infer(a) => infer_cmd(&a),
    }
}

fn gen_synth(a: &GenSynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_toml_over(p, &SyntheticSceneConfig::default())?,
        None => SyntheticSceneConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(f) = a.fov {
        cfg.fov_deg = f;
    }
    if let Some(c) = a.channels {
        cfg.channels = c;
    }
    ensure!(
        (0.0..=1.0).contains(&a.positive_fraction),
        "positive fraction must lie in [0, 1]"
    );
    fs::create_dir_all(&a.out)?;
    // Independent scene streams per split.
    let mut all: Vec<PairSample> = Vec::new();
    let mut counts = Vec::new();
    for (k, (name, n)) in [("train", a.n_train), ("val", a.n_val), ("test", a.n_test)]
        .into_iter()
        .enumerate()
    {
        if n == 0 {
            continue;
        }
        let split_cfg = SyntheticSceneConfig {
            seed: cfg.seed.wrapping_mul(3).wrapping_add(k as u64),
            ..cfg.clone()
        };
        let samples = synth_make_dataset(&split_cfg, n, a.positive_fraction)?;
        write_annotations(
            &a.out.join(format!("{name}.jsonl")),
            &synthetic_records(&samples, all.len()),
        )?;
        counts.push(serde_json::json!({
            "split": name,
            "pairs": n,
            "positives": samples.iter().filter(|s| s.label == 1).count(),
        }));
        all.extend(samples);
    }
    let patches: Vec<_> = all.iter().flat_map(|s| [&s.patch1, &s.patch2]).collect();
    write_patch_container(&a.out.join(PATCH_FILE), &patches)?;
    let manifest = serde_json::json!({ "scene": cfg, "splits": counts });
    fs::write(
        a.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!("wrote {} pairs to {}", all.len(), a.out.display());
    Ok(())
}

fn load(path: &Path, cfg: &TrainConfig) -> Result<Vec<PairSample>> {
    load_dataset(path, cfg.in_channels).with_context(|| format!("loading {}", path.display()))
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = a.overrides.resolve(TrainConfig::default())?;
    let train_set = load(&a.train, &cfg)?;
    let val_set = match &a.val {
        Some(p) => load(p, &cfg)?,
        None => Vec::new(),
    };
    fs::create_dir_all(&a.out)?;
    fs::write(
        a.out.join(CONFIG_SNAPSHOT),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    let outcome = train(&train_set, &val_set, &cfg)?;
    save_checkpoint(
        &a.out.join(CHECKPOINT_FILE),
        &outcome.params.to_checkpoint(Some(&outcome.optimizer)),
    )?;
    fs::write(a.out.join(LOG_FILE), to_jsonl(&outcome.log)?)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} steps; final loss {:.4} (bce {:.4}, gaze {:.4}), lr {:e}",
            last.step, last.total, last.bce, last.gaze, last.lr
        );
    }
    Ok(())
}

fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_checkpoint(&mut f, ckpt)?;
    f.flush()?;
    Ok(())
}

/// Parameters and training settings of a run directory.
pub fn load_run(dir: &Path) -> Result<(ModelParams, TrainConfig)> {
    let cfg_path = dir.join(CONFIG_SNAPSHOT);
    let cfg: TrainConfig = serde_json::from_str(
        &fs::read_to_string(&cfg_path)
            .with_context(|| format!("reading {}", cfg_path.display()))?,
    )?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let mut f = std::io::BufReader::new(
        fs::File::open(&ckpt_path).with_context(|| format!("opening {}", ckpt_path.display()))?,
    );
    let params = ModelParams::from_checkpoint(&read_checkpoint(&mut f)?)?;
    ensure!(
        params.in_channels() == cfg.in_channels,
        "checkpoint expects {} channels, config says {}",
        params.in_channels(),
        cfg.in_channels
    );
    Ok((params, cfg))
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (params, mut cfg) = load_run(&a.run)?;
    if let Some(f) = a.fov {
        cfg.fov_deg = f;
    }
    let data = load(&a.data, &cfg)?;
    let scores = predict_scores(&params, &data, &cfg)?;
    let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
    let curve = average_precision(&scores, &labels)?;
    println!("AP {:.4} on {} pairs", curve.ap, data.len());
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&curve)?)?;
    }
    Ok(())
}

struct Splits {
    train: Vec<PairSample>,
    test: Vec<PairSample>,
}

fn load_splits(a: &ExperimentArgs) -> Result<(Splits, TrainConfig)> {
    let base = a.overrides.resolve(synthetic_experiment_config())?;
    let train_set = load(&a.data.join("train.jsonl"), &base)?;
    let test = load(&a.data.join("test.jsonl"), &base)?;
    fs::create_dir_all(&a.out)?;
    fs::write(
        a.out.join(CONFIG_SNAPSHOT),
        serde_json::to_string_pretty(&base)?,
    )?;
    Ok((
        Splits {
            train: train_set,
            test,
        },
        base,
    ))
}

fn ablate_cmd(a: &ExperimentArgs) -> Result<()> {
    let (s, base) = load_splits(a)?;
    let mut exp = Experiment::new(&s.train, &s.test)?;
    let reports = ablation_run(&mut exp, &base, &a.seeds)?;
    fs::write(a.out.join("ablation.jsonl"), to_jsonl(&reports)?)?;
    let table = format_table(&reports);
    fs::write(a.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn limited_cmd(a: &LimitedDataArgs) -> Result<()> {
    let (s, base) = load_splits(&a.common)?;
    let mut exp = Experiment::new(&s.train, &s.test)?;
    let reports = limited_data_run(&mut exp, &base, &a.fractions, &a.common.seeds)?;
    fs::write(a.common.out.join("limited_data.jsonl"), to_jsonl(&reports)?)?;
    let mut table = format!(
        "{:>8} {:>7} {:>9} {:>10} {:>10} {:>8}\n",
        "fraction", "pairs", "steps/ep", "full", "no_aux", "gap"
    );
    for r in &reports {
        table.push_str(&format!(
            "{:>8} {:>7} {:>9} {:>10.4} {:>10.4} {:>8.4}\n",
            r.fraction,
            r.train_pairs,
            r.steps_per_epoch,
            r.full.median_ap,
            r.no_aux.median_ap,
            r.gap
        ));
    }
    fs::write(a.common.out.join("limited_data.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn sweep_cmd(a: &SweepFovArgs) -> Result<()> {
    let (s, base) = load_splits(&a.common)?;
    let mut exp = Experiment::new(&s.train, &s.test)?;
    let reports = fov_sweep(&mut exp, &base, &a.fovs, &a.common.seeds)?;
    fs::write(a.common.out.join("fov_sweep.jsonl"), to_jsonl(&reports)?)?;
    fs::write(
        a.common.out.join("fov_sweep.csv"),
        fov_csv(&a.fovs, &reports),
    )?;
    print!("{}", format_table(&reports));
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<()> {
    ensure!(a.step > 0.0, "step must be positive");
    let mut worst: f64 = 0.0;
    for (name, r) in layer_suite(a.seed, a.step) {
        println!(
            "{name:<16} max rel error {:.3e} over {} coords",
            r.max_rel_error, r.checked
        );
        worst = worst.max(r.max_rel_error);
    }
    let params = gradcheck_params(1, a.seed);
    let scene = SyntheticSceneConfig {
        seed: a.seed,
        ..SyntheticSceneConfig::default()
    };
    let samples = synth_make_dataset(&scene, 2, 0.5)?;
    let cfg = synthetic_experiment_config();
    for s in &samples {
        let r = gradcheck_pair(&params, s, &cfg, a.conv_samples, a.step, a.seed)?;
        println!(
            "full_loss_l{}     max rel error {:.3e} over {} coords ({} skipped at kinks)",
            s.label, r.max_rel_error, r.checked, r.skipped
        );
        worst = worst.max(r.max_rel_error);
    }
    if worst >= GRADCHECK_TOLERANCE {
        bail!("gradient check failed: max relative error {worst:.3e} >= {GRADCHECK_TOLERANCE:e}");
    }
    println!("ok: max relative error {worst:.3e}");
    Ok(())
}

fn parse_box(v: &[f64]) -> Result<HeadBox> {
    ensure!(v.len() == 4, "a box is cx,cy,w,h");
    Ok(HeadBox::new(v[0], v[1], v[2], v[3])?)
}

fn infer_cmd(a: &InferArgs) -> Result<()> {
    let (params, cfg) = load_run(&a.run)?;
    let img = load_image_tensor(&a.image, cfg.in_channels)?;
    let dims = ImageDims::new(img.shape()[2] as u32, img.shape()[1] as u32)?;
    let (b1, b2) = (parse_box(&a.box1)?, parse_box(&a.box2)?);
    let cam = focal_from_fov(dims, a.fov.unwrap_or(cfg.fov_deg))?;
    let (p1, p2) = (crop_head_patch(&img, &b1), crop_head_patch(&img, &b2));
    let score = infer_pair_with(&params, &p1, &p2, &b1, &b2, dims, &cam, cfg.use_3d_encoding)?;
    println!("{score:.6}");
    Ok(())
}
