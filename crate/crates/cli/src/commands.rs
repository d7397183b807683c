//! Argument definitions and the five subcommands.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use npmca::checkpoint;
use npmca::dataset::{
    frame_file, generate_dataset, list_sequences, read_masks, read_predictions, read_sequence, validate_dataset,
    write_predictions,
};
use npmca::datagen::SceneSpec;
use npmca::metrics::{score_sequence, EvalReport};
use npmca::model::{Model, ModelConfig};
use npmca::propagation::{debug_maps, infer_sequence, mask_out_background, InferenceConfig};
use npmca::raster::{encode_pgm, to_byte, write_heatmap};
use npmca::train::{train, Stage, TrainConfig};
use npmca::Tensor;

use crate::verify::{run_all, VerifyOptions};

/// Environment variable that overrides every `--seed`.
pub const SEED_ENV: &str = "NPMCA_SEED";

#[derive(Debug, Parser)]
#[command(name = "npmca", version, about = "Video object segmentation by non-local pixel matching and channel attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic video dataset.
    Gen(GenArgs),
    /// Train a model (pretrain on warped still frames, or finetune on videos).
    Train(TrainArgs),
    /// Propagate first-frame masks through every sequence.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Run the built-in correctness checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 96)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 2)]
    pub max_objects: usize,
    /// Put two objects on crossing paths in every sequence.
    #[arg(long)]
    pub occlusion_heavy: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Pretrain,
    Finetune,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = StageArg::Pretrain)]
    pub stage: StageArg,
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Defaults to 1e-4 for pretraining and 1e-5 for finetuning.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Multiply the learning rate by `--lr-decay-factor` after this iteration.
    #[arg(long)]
    pub lr_decay_at: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub lr_decay_factor: f64,
    #[arg(long, default_value_t = 5)]
    pub max_skip: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub feature_channels: usize,
    #[arg(long)]
    pub disable_cm: bool,
    #[arg(long)]
    pub single_encoder: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.75, 1.0, 1.25])]
    pub scales: Vec<f64>,
    /// Also write per-object probability rasters and first-frame debug maps.
    #[arg(long)]
    pub dump_probs: bool,
    #[arg(long)]
    pub disable_cm: bool,
    /// Use frame 0 as the previous-frame reference too.
    #[arg(long)]
    pub first_frame_only: bool,
    /// Feed the hard previous mask instead of the aggregated probability.
    #[arg(long)]
    pub hard_prev: bool,
    /// Re-encode the first frame at every step instead of caching it.
    #[arg(long)]
    pub no_cache: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Softmax without max subtraction.
    UnstableSoftmax,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub inject_fault: Option<Fault>,
}

/// A failure carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<npmca::Error> for CliError {
    fn from(e: npmca::Error) -> Self {
        let code = if matches!(e, npmca::Error::Numeric(_)) { 3 } else { 2 };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// `--seed`, unless the environment overrides it.
pub fn resolve_seed(flag: u64) -> CliResult<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::usage(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

fn write_run_cfg(out: &Path, command: &str, entries: &[(&str, String)]) -> CliResult {
    fs::create_dir_all(out)?;
    let mut text = format!("command={command}\n");
    for (k, v) in entries {
        text.push_str(&format!("{k}={v}\n"));
    }
    fs::write(out.join("run.cfg"), text)?;
    Ok(())
}

fn show(v: impl Display) -> String {
    v.to_string()
}

fn path(p: &Path) -> String {
    p.display().to_string()
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => cmd_verify(a),
    }
}

pub fn cmd_gen(a: GenArgs) -> CliResult {
    if a.n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    if !a.width.is_multiple_of(4) || !a.height.is_multiple_of(4) || a.width == 0 || a.height == 0 {
        return Err(CliError::usage("--width and --height must be positive multiples of 4"));
    }
    if a.frames < 2 || a.max_objects == 0 || (a.occlusion_heavy && a.max_objects < 2) {
        return Err(CliError::usage("need --frames ≥ 2 and --max-objects ≥ 1 (≥ 2 with --occlusion-heavy)"));
    }
    let seed = resolve_seed(a.seed)?;
    let spec = SceneSpec {
        width: a.width,
        height: a.height,
        frames: a.frames,
        max_objects: a.max_objects,
        occlusion_heavy: a.occlusion_heavy,
    };
    let names = generate_dataset(&a.out, &spec, a.n, seed)?;
    write_run_cfg(
        &a.out,
        "gen",
        &[
            ("out", path(&a.out)),
            ("n", show(a.n)),
            ("seed", show(seed)),
            ("width", show(a.width)),
            ("height", show(a.height)),
            ("frames", show(a.frames)),
            ("max_objects", show(a.max_objects)),
            ("occlusion_heavy", show(a.occlusion_heavy)),
        ],
    )?;
    println!("wrote {} sequences to {}", names.len(), a.out.display());
    Ok(())
}

pub fn cmd_train(a: TrainArgs) -> CliResult {
    let stage = match a.stage {
        StageArg::Pretrain => Stage::Pretrain,
        StageArg::Finetune => Stage::Finetune,
    };
    if stage == Stage::Finetune && a.init_checkpoint.is_none() {
        return Err(CliError::usage("--stage finetune requires --init-checkpoint"));
    }
    let seed = resolve_seed(a.seed)?;
    let names = list_sequences(&a.data).map_err(|e| CliError::usage(format!("training data: {e}")))?;
    if names.is_empty() {
        return Err(CliError::usage(format!("no sequences under {}", a.data.display())));
    }
    let data = names.iter().map(|n| read_sequence(&a.data, n)).collect::<Result<Vec<_>, _>>()?;
    let mut model = match &a.init_checkpoint {
        Some(p) => {
            let m = checkpoint::load::<f64>(p, a.disable_cm)?;
            if a.single_encoder && !m.config.single_encoder {
                return Err(CliError::usage("--single-encoder given but the checkpoint has two encoders"));
            }
            m
        }
        None => Model::new(
            ModelConfig {
                feature_channels: a.feature_channels,
                disable_cm: a.disable_cm,
                single_encoder: a.single_encoder,
                ..ModelConfig::default()
            },
            seed,
        )?,
    };
    let mut cfg = TrainConfig::new(stage);
    cfg.iterations = a.iterations;
    cfg.batch_size = a.batch_size;
    cfg.max_skip = a.max_skip;
    cfg.seed = seed;
    cfg.lr_decay_at = a.lr_decay_at;
    cfg.lr_decay_factor = a.lr_decay_factor;
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    write_run_cfg(
        &a.out,
        "train",
        &[
            ("data", path(&a.data)),
            ("out", path(&a.out)),
            ("stage", format!("{:?}", a.stage).to_lowercase()),
            ("init_checkpoint", a.init_checkpoint.as_deref().map(path).unwrap_or_default()),
            ("iterations", show(cfg.iterations)),
            ("batch_size", show(cfg.batch_size)),
            ("lr", format!("{:?}", cfg.lr)),
            ("lr_decay_at", cfg.lr_decay_at.map(show).unwrap_or_default()),
            ("lr_decay_factor", format!("{:?}", cfg.lr_decay_factor)),
            ("max_skip", show(cfg.max_skip)),
            ("seed", show(seed)),
            ("feature_channels", show(model.config.feature_channels)),
            ("disable_cm", show(model.config.disable_cm)),
            ("single_encoder", show(model.config.single_encoder)),
        ],
    )?;
    let start = Instant::now();
    let mut log = String::from("iter,loss\n");
    let result = train(&mut model, &data, &cfg, |it, loss| {
        log.push_str(&format!("{it},{loss:?}\n"));
        if it % 100 == 0 || it == cfg.iterations {
            eprintln!("iter {it:>6}  loss {loss:.4}  {:.0}s", start.elapsed().as_secs_f64());
        }
    });
    fs::write(a.out.join("loss.csv"), &log)?;
    result?;
    checkpoint::save(&a.out.join("model.ckpt"), &model)?;
    println!("saved {}", a.out.join("model.ckpt").display());
    Ok(())
}

fn write_prob(path: &Path, p: &Tensor) -> CliResult {
    let (h, w) = (p.shape()[0], p.shape()[1]);
    let bytes: Vec<u8> = p.data().iter().map(|&v| to_byte(v)).collect();
    fs::write(path, encode_pgm(w, h, &bytes))?;
    Ok(())
}

pub fn cmd_infer(a: InferArgs) -> CliResult {
    if a.scales.is_empty() || a.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(CliError::usage("--scales must list positive numbers"));
    }
    let model = checkpoint::load::<f64>(&a.checkpoint, a.disable_cm)?;
    let names = list_sequences(&a.data)?;
    if names.is_empty() {
        return Err(CliError::usage(format!("no sequences under {}", a.data.display())));
    }
    let cfg = InferenceConfig {
        scales: a.scales.clone(),
        cache_first_features: !a.no_cache,
        soft_prev: !a.hard_prev,
        first_frame_only: a.first_frame_only,
    };
    write_run_cfg(
        &a.out,
        "infer",
        &[
            ("data", path(&a.data)),
            ("checkpoint", path(&a.checkpoint)),
            ("out", path(&a.out)),
            ("scales", a.scales.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(",")),
            ("dump_probs", show(a.dump_probs)),
            ("disable_cm", show(a.disable_cm)),
            ("first_frame_only", show(a.first_frame_only)),
            ("hard_prev", show(a.hard_prev)),
            ("no_cache", show(a.no_cache)),
        ],
    )?;
    names.par_iter().try_for_each(|name| -> CliResult {
        let seq = read_sequence(&a.data, name)?;
        let first = seq
            .masks
            .first()
            .ok_or_else(|| CliError::usage(format!("{name}: missing first-frame mask")))?;
        let pred = infer_sequence(&model, &seq, first, &cfg)?;
        write_predictions(&a.out, name, &pred.masks)?;
        if a.dump_probs {
            let dir = a.out.join(name).join("probs");
            for m in 1..=pred.probs[0].num_objects() {
                let od = dir.join(format!("obj{m}"));
                fs::create_dir_all(&od)?;
                for (t, stack) in pred.probs.iter().enumerate() {
                    write_prob(&od.join(frame_file(t, "pgm")), stack.object(m))?;
                }
            }
            if seq.len() > 1 {
                let dd = a.out.join(name).join("debug");
                fs::create_dir_all(&dd)?;
                let masked = mask_out_background(&seq.frames[0], first, 1)?;
                let d = debug_maps(&model, &masked, &seq.frames[1], &pred.probs[0].object(1).clone())?;
                let sq = |t: &Tensor| t.clone().reshape(&[t.shape()[0], t.shape()[1], 1]);
                write_heatmap(&dd.join("similarity.pgm"), &sq(&d.similarity)?)?;
                write_heatmap(&dd.join("energy.pgm"), &d.energy)?;
                write_heatmap(&dd.join("attention.pgm"), &sq(&d.attention)?)?;
            }
        }
        Ok(())
    })?;
    println!("wrote predictions for {} sequences to {}", names.len(), a.out.display());
    Ok(())
}

pub fn cmd_eval(a: EvalArgs) -> CliResult {
    let names = list_sequences(&a.gt)?;
    if names.is_empty() {
        return Err(CliError::usage(format!("no ground-truth sequences under {}", a.gt.display())));
    }
    if !a.pred.is_dir() {
        return Err(CliError::usage(format!("{} is not a directory", a.pred.display())));
    }
    let mut problems = Vec::new();
    let mut scores = Vec::new();
    for name in &names {
        let gts = read_masks(&a.gt, name)?;
        match read_predictions(&a.pred, name, gts.len()) {
            Ok(preds) => scores.push(score_sequence(name, &preds, &gts)?),
            Err(e) => problems.push(e.to_string()),
        }
    }
    if !problems.is_empty() {
        return Err(CliError::usage(format!("predictions do not match ground truth:\n{}", problems.join("\n"))));
    }
    let report = EvalReport::from_sequences(scores);
    write_run_cfg(&a.out, "eval", &[("pred", path(&a.pred)), ("gt", path(&a.gt)), ("out", path(&a.out))])?;
    fs::write(a.out.join("report.txt"), report.to_table())?;
    fs::write(a.out.join("report.json"), report.to_json())?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn cmd_verify(a: VerifyArgs) -> CliResult {
    let opts = VerifyOptions { unstable_softmax: a.inject_fault == Some(Fault::UnstableSoftmax) };
    if let Some(out) = &a.out {
        let fault = a.inject_fault.map(|f| format!("{f:?}")).unwrap_or_default();
        write_run_cfg(out, "verify", &[("out", path(out)), ("inject_fault", fault)])?;
    }
    let checks = run_all(opts);
    let failed = checks.iter().filter(|c| !c.passed).count();
    let mut text = String::new();
    for c in &checks {
        text.push_str(&c.line());
        text.push('\n');
    }
    text.push_str(&format!("{} checks, {} failed\n", checks.len(), failed));
    print!("{text}");
    if let Some(out) = &a.out {
        fs::write(out.join("verify.txt"), &text)?;
    }
    if failed > 0 {
        return Err(CliError { code: 1, message: format!("{failed} verification checks failed") });
    }
    Ok(())
}

/// Runs validation of a generated tree; used by tests and scripts.
pub fn validate(root: &Path) -> CliResult<Vec<String>> {
    Ok(validate_dataset(root)?)
}
