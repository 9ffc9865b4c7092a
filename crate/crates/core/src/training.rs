//! Optimization: configuration, learning-rate schedule, Adam, the training step,
//! and the epoch loop with checkpointing, resume and best-validation selection.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::ArrayView3;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_dataset, random_flip, BoundaryOp, LoadOptions, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::inference::predict;
use crate::losses::{joint_loss_with_grads, total_loss_with_grads, LossBreakdown, LossWeights};
use crate::metrics::{build_report, EvalReport};
use crate::model::{backward, forward_train, init_weights, Ablation, Architecture, Component, ModelConfig, NetworkOutput, OutputGrads};
use crate::ops::Scalar;
use crate::weights::{derive_rng, Weights};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetProfile {
    SdpsegS,
    SdpsegC,
    Custom,
}

impl DatasetProfile {
    /// `(epochs, lr_step_epochs)` of the fixed dataset schedules.
    pub fn schedule(self) -> Option<(usize, usize)> {
        match self {
            DatasetProfile::SdpsegS => Some((120, 40)),
            DatasetProfile::SdpsegC => Some((300, 100)),
            DatasetProfile::Custom => None,
        }
    }
}

/// Fully resolved training configuration. Field names are the keys of the
/// config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub name: String,
    pub dataset_profile: DatasetProfile,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_step_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub deterministic: bool,
    pub ablation: Ablation,
    pub augment: bool,
    /// Stop after this many optimizer steps (desk-scale runs).
    pub max_steps: Option<usize>,
    pub boundary_op: BoundaryOp,
    pub model: ModelConfig,
}

/// Config file contents before profile defaults are applied.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfigFile {
    pub name: Option<String>,
    pub dataset_profile: Option<DatasetProfile>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr0: Option<f64>,
    pub lr_decay_factor: Option<f64>,
    pub lr_step_epochs: Option<usize>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub loss_weights: Option<LossWeights>,
    pub seed: Option<u64>,
    pub deterministic: Option<bool>,
    pub ablation: Option<Vec<String>>,
    pub augment: Option<bool>,
    pub max_steps: Option<usize>,
    pub boundary_op: Option<BoundaryOp>,
    pub model: Option<ModelConfig>,
}

impl TrainConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn resolve(self) -> Result<TrainConfig> {
        let profile = self.dataset_profile.unwrap_or(DatasetProfile::SdpsegS);
        let (epochs, step) = match (profile.schedule(), self.epochs, self.lr_step_epochs) {
            (_, Some(e), Some(s)) => (e, s),
            (Some((e, s)), epochs, step) => (epochs.unwrap_or(e), step.unwrap_or(s)),
            (None, _, _) => {
                return Err(Error::Config(
                    "dataset_profile `custom` needs explicit `epochs` and `lr_step_epochs`".into(),
                ))
            }
        };
        let ablation = match self.ablation {
            Some(list) => Ablation(
                list.iter()
                    .map(|s| s.parse::<Component>())
                    .collect::<Result<_>>()?,
            ),
            None => Ablation::full(),
        };
        let cfg = TrainConfig {
            name: self.name.unwrap_or_else(|| "run".into()),
            dataset_profile: profile,
            epochs,
            batch_size: self.batch_size.unwrap_or(16),
            lr0: self.lr0.unwrap_or(1e-4),
            lr_decay_factor: self.lr_decay_factor.unwrap_or(0.1),
            lr_step_epochs: step,
            adam_beta1: self.adam_beta1.unwrap_or(0.9),
            adam_beta2: self.adam_beta2.unwrap_or(0.99),
            adam_eps: self.adam_eps.unwrap_or(1e-8),
            loss_weights: self.loss_weights.unwrap_or_default(),
            seed: self.seed.unwrap_or(0),
            deterministic: self.deterministic.unwrap_or(true),
            ablation,
            augment: self.augment.unwrap_or(true),
            max_steps: self.max_steps,
            boundary_op: self.boundary_op.unwrap_or_default(),
            model: self.model.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainConfig {
    pub fn for_profile(profile: DatasetProfile) -> Result<Self> {
        TrainConfigFile {
            dataset_profile: Some(profile),
            ..Default::default()
        }
        .resolve()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        TrainConfigFile::parse(text)?.resolve()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config("lr_decay_factor must lie in (0, 1]".into()));
        }
        if self.lr_step_epochs == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and lr_step_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        self.loss_weights.validate()?;
        self.architecture().map(|_| ())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(self.model.clone(), self.ablation.clone())
    }

    /// Serialized form used for hashing and checkpoint sidecars.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `lr0 * decay^floor(epoch / lr_step_epochs)`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::Invalid(format!(
            "epoch {epoch} out of range for a {}-epoch schedule",
            config.epochs
        )));
    }
    let k = (epoch / config.lr_step_epochs) as i32;
    let inv = config.lr_decay_factor.recip();
    if inv.fract() == 0.0 && inv.powi(k) < 2f64.powi(53) {
        Ok(config.lr0 / inv.powi(k))
    } else {
        Ok(config.lr0 * config.lr_decay_factor.powi(k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Weights<T>,
    pub v: Weights<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(weights: &Weights<T>) -> Self {
        Self {
            step: 0,
            m: weights.zeros_like(),
            v: weights.zeros_like(),
        }
    }

    /// One bias-corrected Adam update:
    /// `w -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, weights: &mut Weights<T>, grads: &Weights<T>, lr: f64, hyper: AdamHyper) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(hyper.beta1);
        let b2 = T::from_f64_lossy(hyper.beta2);
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 - hyper.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - hyper.beta2.powi(t));
        let eps = T::from_f64_lossy(hyper.eps);
        let lr = T::from_f64_lossy(lr);
        for (name, g) in grads.iter() {
            let m = self.m.get_mut(name).ok_or_else(|| Error::MissingWeight(format!("adam m {name}")))?;
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (one - b1) * g);
            let v = self.v.get_mut(name).ok_or_else(|| Error::MissingWeight(format!("adam v {name}")))?;
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (one - b2) * g * g);
            let (m, v) = (self.m.get(name)?, self.v.get(name)?);
            let w = weights.get_mut(name).ok_or_else(|| Error::MissingWeight(name.to_string()))?;
            ndarray::Zip::from(w).and(&m).and(&v).for_each(|w, &m, &v| {
                let m_hat = m / c1;
                let v_hat = v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
        Ok(())
    }
}

fn cast_image<T: Scalar>(img: &ndarray::Array3<f32>) -> ndarray::Array3<T> {
    img.mapv(|v| T::from_f64_lossy(v as f64))
}

/// Loss terms and parameter gradients of one sample.
pub fn sample_gradients<T: Scalar>(
    arch: &Architecture,
    weights: &Weights<T>,
    record: &SampleRecord,
    loss_weights: &LossWeights,
) -> Result<(LossBreakdown, Weights<T>)> {
    let image = cast_image::<T>(&record.image);
    let (out, trace) = forward_train(arch, weights, image.view())?;
    let (breakdown, grads_out) = match out {
        NetworkOutput::Decomposed(r) => {
            let l = total_loss_with_grads(
                &r,
                &record.supervision,
                loss_weights,
                arch.has_boundary(),
                arch.has_projection(),
            )?;
            (
                l.breakdown,
                OutputGrads::Decomposed {
                    teeth: l.teeth,
                    plaque: l.plaque,
                },
            )
        }
        NetworkOutput::Joint(logits) => {
            let (b, g) = joint_loss_with_grads(logits.view(), &record.supervision.label())?;
            (b, OutputGrads::Joint(g))
        }
    };
    let grads = backward(arch, weights, &trace, &grads_out)?;
    Ok((breakdown, grads))
}

/// Mean loss and mean gradient over a batch. With `ordered` the per-sample
/// gradients are summed in batch order, which makes the result independent of
/// the worker count.
pub fn batch_gradients<T: Scalar>(
    arch: &Architecture,
    weights: &Weights<T>,
    batch: &[SampleRecord],
    loss_weights: &LossWeights,
    ordered: bool,
) -> Result<(LossBreakdown, Weights<T>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let scale_t = T::from_f64_lossy(scale);
    let zero = || (LossBreakdown::default(), weights.zeros_like());
    let (loss, grads) = if ordered {
        let parts: Vec<_> = batch
            .par_iter()
            .map(|r| sample_gradients(arch, weights, r, loss_weights))
            .collect::<Result<_>>()?;
        let mut acc = zero();
        for (l, g) in parts {
            acc.0 = acc.0.add(&l);
            acc.1.add_scaled(&g, scale_t);
        }
        acc
    } else {
        batch
            .par_iter()
            .map(|r| sample_gradients(arch, weights, r, loss_weights))
            .try_fold(zero, |mut acc, item| {
                let (l, g) = item?;
                acc.0 = acc.0.add(&l);
                acc.1.add_scaled(&g, scale_t);
                Ok::<_, Error>(acc)
            })
            .try_reduce(zero, |mut a, b| {
                a.0 = a.0.add(&b.0);
                a.1.add_scaled(&b.1, T::one());
                Ok(a)
            })?
    };
    let loss = loss.scaled(scale);
    loss.check_finite()?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite {
            term: format!("gradient of {name}"),
        });
    }
    Ok((loss, grads))
}

/// One Adam step on the batch-mean objective.
pub fn train_step<T: Scalar>(
    arch: &Architecture,
    weights: &mut Weights<T>,
    state: &mut AdamState<T>,
    batch: &[SampleRecord],
    config: &TrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    let (loss, grads) = batch_gradients(arch, weights, batch, &config.loss_weights, config.deterministic)?;
    state.update(weights, &grads, lr, AdamHyper::from(config))?;
    Ok(loss)
}

/// Fused predictions for `records`, evaluated against their own labels.
pub fn evaluate_records<T: Scalar>(arch: &Architecture, weights: &Weights<T>, records: &[SampleRecord]) -> Result<EvalReport> {
    let preds: Vec<(String, crate::data::LabelMask)> = records
        .par_iter()
        .map(|r| {
            let img = cast_image::<T>(&r.image);
            predict(arch, weights, ArrayView3::from(&img)).map(|p| (r.id.clone(), p.label))
        })
        .collect::<Result<_>>()?;
    let gts: BTreeMap<String, crate::data::LabelMask> = records.iter().map(|r| (r.id.clone(), r.supervision.label())).collect();
    build_report(&preds, &gts, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub miou_teeth: f64,
    pub miou_plaque: f64,
    pub dice_teeth: f64,
    pub dice_plaque: f64,
    pub pr_percent: f64,
}

impl From<&EvalReport> for ValMetrics {
    fn from(r: &EvalReport) -> Self {
        let a = &r.aggregate;
        Self {
            miou_teeth: a.miou_teeth,
            miou_plaque: a.miou_plaque,
            dice_teeth: a.dice_teeth,
            dice_plaque: a.dice_plaque,
            pr_percent: a.pr_percent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: TrainConfig,
    pub architecture: Architecture,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub weights_file: String,
    pub optimizer_files: [String; 2],
    pub val_metrics: Option<ValMetrics>,
    pub best_val_dice_plaque: Option<f64>,
    pub last_train_loss: Option<LossBreakdown>,
    /// Length of the training log when this checkpoint was written.
    pub log_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub weights: Weights<f32>,
    pub optimizer: AdamState<f32>,
}

const WEIGHTS_FILE: &str = "weights.sdw";
const ADAM_M_FILE: &str = "adam_m.sdw";
const ADAM_V_FILE: &str = "adam_v.sdw";
const META_FILE: &str = "checkpoint.json";

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.weights.save(&dir.join(WEIGHTS_FILE))?;
        self.optimizer.m.save(&dir.join(ADAM_M_FILE))?;
        self.optimizer.v.save(&dir.join(ADAM_V_FILE))?;
        let path = dir.join(META_FILE);
        let json = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = Self::load_meta(dir)?;
        let weights = Weights::load(&dir.join(&meta.weights_file))?;
        let m = Weights::load(&dir.join(&meta.optimizer_files[0]))?;
        let v = Weights::load(&dir.join(&meta.optimizer_files[1]))?;
        Ok(Self {
            optimizer: AdamState { step: meta.step, m, v },
            meta,
            weights,
        })
    }

    pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", meta.format_version)));
        }
        Ok(meta)
    }

    /// Weights and architecture only, for inference.
    pub fn load_for_inference(dir: &Path) -> Result<(Architecture, Weights<f32>)> {
        let meta = Self::load_meta(dir)?;
        let w = Weights::load(&dir.join(&meta.weights_file))?;
        Ok((meta.architecture, w))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint directory.
    pub resume_from: Option<PathBuf>,
    /// Return after this many completed epochs (simulates an interrupted run).
    pub stop_after_epochs: Option<usize>,
    /// Keep every `ckpt-<epoch>` directory instead of only the latest.
    pub keep_all_checkpoints: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_dir: PathBuf,
    pub last_dir: PathBuf,
    pub steps: u64,
    pub last_loss: Option<LossBreakdown>,
}

#[derive(Serialize)]
struct StepLine<'a> {
    kind: &'a str,
    step: u64,
    epoch: usize,
    lr: f64,
    #[serde(flatten)]
    loss: &'a LossBreakdown,
}

#[derive(Serialize)]
struct EpochLine<'a> {
    kind: &'a str,
    epoch: usize,
    step: u64,
    #[serde(flatten)]
    val: Option<&'a ValMetrics>,
}

/// Load train/val splits from `root` and run [`train_on_records`].
pub fn train_loop(config: &TrainConfig, root: &Path, run_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    let load = LoadOptions {
        input_size: config.model.input_size,
        boundary_op: config.boundary_op,
    };
    let train = load_dataset(root, Split::Train, load)?;
    let val = load_dataset(root, Split::Val, load)?;
    if train.is_empty() {
        return Err(Error::data(root.join("train"), "training split is empty"));
    }
    train_on_records(config, &train, &val, run_dir, opts)
}

/// Epoch loop: shuffled mini-batches with optional flips, an Adam step per batch,
/// per-step log lines, per-epoch validation, `ckpt-<epoch>` after every epoch and
/// `best` whenever validation plaque Dice improves (or every epoch without a
/// validation set).
pub fn train_on_records(
    config: &TrainConfig,
    train: &[SampleRecord],
    val: &[SampleRecord],
    run_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("no training samples".into()));
    }
    let arch = config.architecture()?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let log_path = run_dir.join(LOG_FILE);

    let (mut weights, mut adam, start_epoch, mut best_score, mut last_loss) = match &opts.resume_from {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            if ck.meta.config.hash() != config.hash() {
                return Err(Error::Config("resume checkpoint was trained with a different config".into()));
            }
            truncate_log(&log_path, ck.meta.log_bytes)?;
            (ck.weights, ck.optimizer, ck.meta.epoch, ck.meta.best_val_dice_plaque, ck.meta.last_train_loss)
        }
        None => {
            let w = init_weights::<f32>(&arch, config.seed);
            let a = AdamState::new(&w);
            File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            (w, a, 0, None, None)
        }
    };
    let mut log = BufWriter::new(
        OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?,
    );
    let hyper = AdamHyper::from(config);
    let mut best_dir = run_dir.join("best");
    let mut last_dir = run_dir.join(format!("ckpt-{start_epoch}"));
    let mut prev_ckpt: Option<PathBuf> = opts.resume_from.clone();

    for epoch in start_epoch..config.epochs {
        if config.max_steps.is_some_and(|m| adam.step >= m as u64) {
            break;
        }
        let lr = lr_at_epoch(config, epoch)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(config.seed, &format!("order/{epoch}")));
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| adam.step >= m as u64) {
                break;
            }
            let batch: Vec<SampleRecord> = chunk
                .iter()
                .map(|&i| {
                    if config.augment {
                        random_flip(&train[i], config.seed, epoch)
                    } else {
                        train[i].clone()
                    }
                })
                .collect();
            let (loss, grads) = batch_gradients(&arch, &weights, &batch, &config.loss_weights, config.deterministic)?;
            adam.update(&mut weights, &grads, lr, hyper)?;
            let line = StepLine {
                kind: "step",
                step: adam.step,
                epoch,
                lr,
                loss: &loss,
            };
            writeln!(log, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(&log_path, e))?;
            last_loss = Some(loss);
        }

        let val_metrics = if val.is_empty() {
            None
        } else {
            Some(ValMetrics::from(&evaluate_records(&arch, &weights, val)?))
        };
        let line = EpochLine {
            kind: "epoch",
            epoch,
            step: adam.step,
            val: val_metrics.as_ref(),
        };
        writeln!(log, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;

        let improved = match (&val_metrics, best_score) {
            (None, _) => true,
            (Some(m), None) => {
                best_score = Some(m.dice_plaque);
                true
            }
            (Some(m), Some(b)) if m.dice_plaque > b => {
                best_score = Some(m.dice_plaque);
                true
            }
            _ => false,
        };
        let log_bytes = std::fs::metadata(&log_path).map_err(|e| Error::io(&log_path, e))?.len();
        let ck = Checkpoint {
            meta: CheckpointMeta {
                format_version: CHECKPOINT_FORMAT_VERSION,
                config: config.clone(),
                architecture: arch.clone(),
                seed: config.seed,
                epoch: epoch + 1,
                step: adam.step,
                weights_file: WEIGHTS_FILE.into(),
                optimizer_files: [ADAM_M_FILE.into(), ADAM_V_FILE.into()],
                val_metrics,
                best_val_dice_plaque: best_score,
                last_train_loss: last_loss,
                log_bytes,
            },
            weights: weights.clone(),
            optimizer: adam.clone(),
        };
        last_dir = run_dir.join(format!("ckpt-{}", epoch + 1));
        ck.save(&last_dir)?;
        if improved {
            best_dir = run_dir.join("best");
            ck.save(&best_dir)?;
        }
        if !opts.keep_all_checkpoints {
            if let Some(prev) = prev_ckpt.take() {
                if prev != last_dir && prev.starts_with(run_dir) && prev.file_name().is_some_and(|n| n.to_string_lossy().starts_with("ckpt-")) {
                    std::fs::remove_dir_all(&prev).map_err(|e| Error::io(&prev, e))?;
                }
            }
        }
        prev_ckpt = Some(last_dir.clone());
        if opts.stop_after_epochs.is_some_and(|n| epoch + 1 >= n) {
            break;
        }
    }
    let best = if best_dir.join(META_FILE).exists() {
        Checkpoint::load(&best_dir)?
    } else {
        Checkpoint::load(&last_dir)?
    };
    Ok(TrainOutcome {
        best,
        best_dir,
        last_dir,
        steps: adam.step,
        last_loss,
    })
}

fn truncate_log(path: &Path, len: u64) -> Result<()> {
    let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
    f.set_len(len).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_schedules() {
        let s = TrainConfig::for_profile(DatasetProfile::SdpsegS).unwrap();
        assert_eq!((s.epochs, s.lr_step_epochs, s.batch_size), (120, 40, 16));
        assert_eq!(lr_at_epoch(&s, 0).unwrap(), 1e-4);
        assert_eq!(lr_at_epoch(&s, 40).unwrap(), 1e-5);
        assert_eq!(lr_at_epoch(&s, 80).unwrap(), 1e-6);
        assert!(lr_at_epoch(&s, 120).is_err());
        let c = TrainConfig::for_profile(DatasetProfile::SdpsegC).unwrap();
        assert_eq!(lr_at_epoch(&c, 99).unwrap(), 1e-4);
        assert_eq!(lr_at_epoch(&c, 100).unwrap(), 1e-5);
        let mut odd = s.clone();
        odd.lr_decay_factor = 0.3;
        assert_eq!(lr_at_epoch(&odd, 80).unwrap(), 1e-4 * 0.3f64.powi(2));
        assert!(TrainConfig::for_profile(DatasetProfile::Custom).is_err());
    }

    #[test]
    fn lr_is_non_increasing() {
        let c = TrainConfig::for_profile(DatasetProfile::SdpsegC).unwrap();
        let lrs: Vec<f64> = (0..c.epochs).map(|e| lr_at_epoch(&c, e).unwrap()).collect();
        assert!(lrs.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_toml("epochz = 3").unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
        let err = TrainConfig::from_toml("[loss_weights]\ngamma = 1.0").unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = TrainConfig::from_toml("ablation = [\"SD\"]\nseed = 4\n[loss_weights]\nalpha = 0.4").unwrap();
        assert_eq!(c.loss_weights.alpha, 0.4);
        assert_eq!(c.ablation, Ablation::of(&[Component::SD]));
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml("lr_decay_factor = 1.5").is_err());
        assert!(TrainConfig::from_toml("ablation = [\"CCM\"]").is_err());
        assert!(TrainConfig::from_toml("ablation = [\"XYZ\"]").is_err());
    }

    /// Scalar Adam reference for f(w) = 0.5 * a * (w - c)^2.
    #[test]
    fn adam_matches_scalar_reference() {
        let (a, c) = (3.0, 0.25);
        let hyper = AdamHyper { beta1: 0.9, beta2: 0.99, eps: 1e-8 };
        let lr = 0.01;
        let mut w = Weights::<f64>::new();
        w.insert("w", ndarray::arr1(&[1.5]).into_dyn());
        let mut state = AdamState::new(&w);
        let (mut ws, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = a * (w.get1("w").unwrap()[0] - c);
            let mut gw = Weights::<f64>::new();
            gw.insert("w", ndarray::arr1(&[g]).into_dyn());
            state.update(&mut w, &gw, lr, hyper).unwrap();

            let gs = a * (ws - c);
            m = 0.9 * m + 0.1 * gs;
            v = 0.99 * v + 0.01 * gs * gs;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.99f64.powi(t));
            ws -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((w.get1("w").unwrap()[0] - ws).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_lr_leaves_weights_bit_identical() {
        let mut w = Weights::<f32>::new();
        w.insert("w", ndarray::arr1(&[1.5f32, -0.0, 3.25]).into_dyn());
        let before = w.clone();
        let mut g = w.zeros_like();
        g.get_mut("w").unwrap().fill(0.7);
        let mut s = AdamState::new(&w);
        s.update(&mut w, &g, 0.0, AdamHyper { beta1: 0.9, beta2: 0.99, eps: 1e-8 }).unwrap();
        let bits = |w: &Weights<f32>| w.get1("w").unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&w), bits(&before));
    }
}
