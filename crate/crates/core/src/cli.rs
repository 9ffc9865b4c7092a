//! Command-line surface. Every command except `presets` writes one
//! `manifest.json`-style record of what it ran and produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand};
use ndarray::ArrayView3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, image_to_tensor, read_rgb, BoundaryOp, LoadOptions, Split};
use crate::error::{Error, Result};
use crate::inference::{export_masks, predict};
use crate::losses::CcmReduction;
use crate::metrics::{build_report_from_maps, Aggregation, CategoryMaps, EvalReport};
use crate::presets::{self, PresetKind, PRESETS};
use crate::report::{read_clinician_csv, write_report};
use crate::synthetic::write_synthetic_dataset;
use crate::training::{train_loop, Checkpoint, TrainConfig, TrainOptions, LOG_FILE};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "sdseg", version, about = "Decomposed teeth/plaque segmentation: train, evaluate, predict")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write boundary maps for every sample under <root>/<split>/boundaries.
    PrepareBoundaries {
        #[arg(long)]
        root: PathBuf,
        /// neighbor | canny
        #[arg(long, default_value = "neighbor")]
        boundary_op: BoundaryOp,
    },
    /// Train from a config file or a shipped preset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Evaluate(EvalArgs),
    /// Predict masks for one image or a directory of images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG file or directory of PNG files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write 16-bit probability maps.
        #[arg(long)]
        probs: bool,
    },
    /// List shipped presets, or print one.
    Presets {
        #[arg(long)]
        show: Option<String>,
    },
    /// Shuffle a flat `images/` + `masks/` pool into train/val/test (8:1:1).
    Split {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic dataset in the standard layout.
    Synth {
        #[arg(long)]
        root: PathBuf,
        /// Train, val and test sample counts.
        #[arg(long, value_delimiter = ',', default_values_t = [8, 2, 2])]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub deterministic: Option<bool>,
    /// neighbor | canny
    #[arg(long)]
    pub boundary_op: Option<BoundaryOp>,
    /// mean | sum
    #[arg(long)]
    pub ccm_reduction: Option<CcmReduction>,
    /// Run name; defaults to the config's `name`.
    #[arg(long)]
    pub name: Option<String>,
    /// Continue from a checkpoint directory of the same run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, env = "SDSEG_RUNS_DIR", default_value = "runs")]
    pub runs_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Threshold each branch on its own.
    Branch,
    /// Single 3-class label after fusion.
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AggregationArg {
    ImageMean,
    Micro,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, value_enum, default_value_t = EvalMode::Fused)]
    pub eval_mode: EvalMode,
    #[arg(long, value_enum, default_value_t = AggregationArg::ImageMean)]
    pub aggregation: AggregationArg,
    /// CSV with header `id,pr`.
    #[arg(long)]
    pub clinician_csv: Option<PathBuf>,
    /// neighbor | canny (only affects loading)
    #[arg(long)]
    pub boundary_op: Option<BoundaryOp>,
    /// Output directory; defaults to <checkpoint>/eval-<split>.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub preset: Option<String>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub started_at: String,
    pub finished_at: String,
    pub artifacts: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config_path: None,
            preset: None,
            config_hash: None,
            seed: None,
            started_at: now(),
            finished_at: String::new(),
            artifacts: BTreeMap::new(),
        }
    }

    fn finish(mut self, path: &Path) -> Result<Self> {
        self.finished_at = now();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(&self)?).map_err(|e| Error::io(path, e))?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Parse arguments and run. Returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<Option<RunManifest>> {
    match command {
        Command::PrepareBoundaries { root, boundary_op } => cmd_prepare_boundaries(&root, boundary_op).map(Some),
        Command::Train(args) => cmd_train(&args).map(Some),
        Command::Evaluate(args) => cmd_evaluate(&args).map(|(m, _)| Some(m)),
        Command::Predict {
            checkpoint,
            input,
            out,
            probs,
        } => cmd_predict(&checkpoint, &input, &out, probs).map(Some),
        Command::Presets { show } => cmd_presets(show.as_deref()).map(|_| None),
        Command::Split { source, root, seed } => cmd_split(&source, &root, seed).map(Some),
        Command::Synth {
            root,
            counts,
            size,
            seed,
        } => {
            let mut m = RunManifest::start("synth");
            let counts: [usize; 3] = counts
                .try_into()
                .map_err(|_| Error::Config("--counts takes three values".into()))?;
            let n = write_synthetic_dataset(&root, counts, size, seed)?;
            println!("wrote {n} synthetic samples to {}", root.display());
            m.seed = Some(seed);
            m.artifacts.insert("root".into(), root.clone());
            m.finish(&root.join("synth.manifest.json")).map(Some)
        }
    }
}

pub fn cmd_prepare_boundaries(root: &Path, op: BoundaryOp) -> Result<RunManifest> {
    let mut m = RunManifest::start("prepare-boundaries");
    let n = data::prepare_boundaries(root, op)?;
    println!("wrote boundary maps for {n} samples");
    for split in Split::ALL {
        let dir = data::split_dir(root, split).join("boundaries");
        if dir.exists() {
            m.artifacts.insert(format!("boundaries_{split}"), dir);
        }
    }
    m.finish(&root.join("prepare-boundaries.manifest.json"))
}

/// Config from `--config` or `--preset` with command-line overrides applied.
pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            TrainConfig::from_toml(&text)?
        }
        (None, Some(name)) => presets::load(name)?,
        (None, None) => return Err(Error::Config("either --config or --preset is required".into())),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = args.deterministic {
        cfg.deterministic = d;
    }
    if let Some(op) = args.boundary_op {
        cfg.boundary_op = op;
    }
    if let Some(r) = args.ccm_reduction {
        cfg.loss_weights.ccm_reduction = r;
    }
    if let Some(n) = &args.name {
        cfg.name = n.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest> {
    let mut m = RunManifest::start("train");
    let cfg = resolve_train_config(args)?;
    let run_dir = args.runs_dir.join(&cfg.name);
    m.config_path = args.config.clone();
    m.preset = args.preset.clone();
    m.config_hash = Some(cfg.hash());
    m.seed = Some(cfg.seed);
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let resolved = run_dir.join("config.toml");
    std::fs::write(&resolved, cfg.to_toml()).map_err(|e| Error::io(&resolved, e))?;
    let opts = TrainOptions {
        resume_from: args.resume.clone(),
        ..Default::default()
    };
    let outcome = train_loop(&cfg, &args.root, &run_dir, &opts)?;
    println!(
        "trained {} steps; best checkpoint {} (epoch {})",
        outcome.steps,
        outcome.best_dir.display(),
        outcome.best.meta.epoch
    );
    if let Some(v) = &outcome.best.meta.val_metrics {
        println!("val dice teeth {:.4} plaque {:.4}", v.dice_teeth, v.dice_plaque);
    }
    m.artifacts.insert("run_dir".into(), run_dir.clone());
    m.artifacts.insert("resolved_config".into(), resolved);
    m.artifacts.insert("log".into(), run_dir.join(LOG_FILE));
    m.artifacts.insert("best_checkpoint".into(), outcome.best_dir);
    m.artifacts.insert("last_checkpoint".into(), outcome.last_dir);
    m.finish(&run_dir.join(MANIFEST_FILE))
}

/// Predict every sample of a split and score it.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    root: &Path,
    split: Split,
    mode: EvalMode,
    aggregation: Aggregation,
    boundary_op: Option<BoundaryOp>,
    clinician: Option<&BTreeMap<String, f64>>,
) -> Result<EvalReport> {
    let meta = Checkpoint::load_meta(checkpoint)?;
    let (arch, weights) = Checkpoint::load_for_inference(checkpoint)?;
    let split_path = data::split_dir(root, split);
    if !split_path.join("images").is_dir() {
        return Err(Error::data(&split_path, "split directory not found"));
    }
    let opts = LoadOptions {
        input_size: arch.config.input_size,
        boundary_op: boundary_op.unwrap_or(meta.config.boundary_op),
    };
    let records = data::load_dataset(root, split, opts)?;
    if records.is_empty() {
        return Err(Error::data(&split_path, "split holds no samples"));
    }
    let preds: Vec<(String, CategoryMaps)> = records
        .par_iter()
        .map(|r| {
            let p = predict(&arch, &weights, r.image.view())?;
            let maps = match mode {
                EvalMode::Fused => p.fused_maps(),
                EvalMode::Branch => p.branch_maps(),
            };
            Ok((r.id.clone(), maps))
        })
        .collect::<Result<_>>()?;
    let gts = records.iter().map(|r| (r.id.clone(), r.supervision.label())).collect();
    let mode_name = match mode {
        EvalMode::Fused => "fused",
        EvalMode::Branch => "branch",
    };
    build_report_from_maps(&preds, &gts, clinician, aggregation, mode_name)
}

pub fn cmd_evaluate(args: &EvalArgs) -> Result<(RunManifest, EvalReport)> {
    let mut m = RunManifest::start("evaluate");
    let meta = Checkpoint::load_meta(&args.checkpoint)?;
    m.config_hash = Some(meta.config.hash());
    m.seed = Some(meta.seed);
    let clinician = args.clinician_csv.as_deref().map(read_clinician_csv).transpose()?;
    let aggregation = match args.aggregation {
        AggregationArg::ImageMean => Aggregation::ImageMean,
        AggregationArg::Micro => Aggregation::Micro,
    };
    let report = evaluate_checkpoint(
        &args.checkpoint,
        &args.root,
        args.split,
        args.eval_mode,
        aggregation,
        args.boundary_op,
        clinician.as_ref(),
    )?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.checkpoint.join(format!("eval-{}", args.split)));
    let files = write_report(&report, &out)?;
    let a = &report.aggregate;
    println!(
        "{} images: mIoU teeth {:.4} plaque {:.4} | Dice teeth {:.4} plaque {:.4} | PR% {:.2}",
        report.per_image.len(),
        a.miou_teeth,
        a.miou_plaque,
        a.dice_teeth,
        a.dice_plaque,
        100.0 * a.pr_percent
    );
    if let Some(c) = a.clinician_pr_percent {
        println!("clinician PR% {:.2}", 100.0 * c);
    }
    m.artifacts.insert("checkpoint".into(), args.checkpoint.clone());
    m.artifacts.insert("report_json".into(), files.json);
    m.artifacts.insert("per_image_csv".into(), files.per_image_csv);
    m.artifacts.insert("summary_csv".into(), files.summary_csv);
    for p in files.plots {
        let key = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        m.artifacts.insert(key, p);
    }
    Ok((m.finish(&out.join(MANIFEST_FILE))?, report))
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::data(input, "no such file or directory"));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    files.sort();
    Ok(files)
}

/// Masks are written at the network input size. Unreadable images are reported
/// and skipped; the command then fails with a data error after the batch.
pub fn cmd_predict(checkpoint: &Path, input: &Path, out: &Path, probs: bool) -> Result<RunManifest> {
    let mut m = RunManifest::start("predict");
    let meta = Checkpoint::load_meta(checkpoint)?;
    m.config_hash = Some(meta.config.hash());
    m.seed = Some(meta.seed);
    let (arch, weights) = Checkpoint::load_for_inference(checkpoint)?;
    let files = png_inputs(input)?;
    let results: Vec<(PathBuf, Result<PathBuf>)> = files
        .par_iter()
        .map(|path| {
            let res = (|| {
                let id = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::data(path, "file name is not valid UTF-8"))?;
                let img = image_to_tensor(&read_rgb(path)?, arch.config.input_size);
                let pred = predict(&arch, &weights, ArrayView3::from(&img))?;
                Ok(export_masks(&pred, out, id, probs)?.label)
            })();
            (path.clone(), res)
        })
        .collect();
    let mut failed = 0;
    for (path, res) in results {
        match res {
            Ok(label) => {
                let key = label.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                m.artifacts.insert(key, label);
            }
            Err(e) => {
                eprintln!("skipping {}: {e}", path.display());
                failed += 1;
            }
        }
    }
    println!("wrote {} masks to {}", m.artifacts.len(), out.display());
    m.artifacts.insert("checkpoint".into(), checkpoint.to_path_buf());
    let manifest = m.finish(&out.join(MANIFEST_FILE))?;
    if failed > 0 {
        return Err(Error::data(input, format!("{failed} of {} images failed", files.len())));
    }
    Ok(manifest)
}

pub fn cmd_presets(show: Option<&str>) -> Result<()> {
    match show {
        Some(name) => {
            let p = presets::find(name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
            print!("{}", p.toml);
        }
        None => {
            for p in &PRESETS {
                let kind = match p.kind {
                    PresetKind::Ablation => "ablation",
                    PresetKind::AlphaSweep => "alpha-sweep",
                };
                let cfg = presets::load(p.name)?;
                println!("{:<14} {:<12} ablation={} alpha={}", p.name, kind, cfg.ablation, cfg.loss_weights.alpha);
            }
        }
    }
    Ok(())
}

/// Copy a flat pool into the split layout and record the assignment in `split.json`.
pub fn cmd_split(source: &Path, root: &Path, seed: u64) -> Result<RunManifest> {
    let mut m = RunManifest::start("split");
    m.seed = Some(seed);
    let images = source.join("images");
    if !images.is_dir() {
        return Err(Error::data(&images, "directory not found"));
    }
    let ids: Vec<String> = png_inputs(&images)?
        .iter()
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(String::from))
        .collect();
    let split = data::make_split(&ids, seed);
    for (name, list) in [(Split::Train, &split.train), (Split::Val, &split.val), (Split::Test, &split.test)] {
        let dir = data::split_dir(root, name);
        for sub in ["images", "masks"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            for id in list.iter() {
                let from = source.join(sub).join(format!("{id}.png"));
                if sub == "masks" && !from.exists() {
                    return Err(Error::MissingMask {
                        stem: id.clone(),
                        expected: from,
                    });
                }
                let to = d.join(format!("{id}.png"));
                std::fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
            }
        }
        m.artifacts.insert(name.to_string(), dir);
    }
    let listing = root.join("split.json");
    let json = serde_json::json!({ "seed": seed, "train": split.train, "val": split.val, "test": split.test });
    std::fs::write(&listing, serde_json::to_string_pretty(&json)?).map_err(|e| Error::io(&listing, e))?;
    println!(
        "train {} / val {} / test {}",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    m.artifacts.insert("listing".into(), listing);
    m.finish(&root.join("split.manifest.json"))
}
