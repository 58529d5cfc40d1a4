//! Training, evaluation and ablation runs.
//!
//! A run directory holds `config.json`, `log.csv` (one row per epoch),
//! `steps.csv` (one row per optimizer step), `ckpt_best.json`,
//! `ckpt_last.json`, `training_curves.svg` and, after evaluation,
//! `report.json` plus a per-sample metrics CSV.

mod ablate;
mod config;
mod optim;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablate::{ablate, AblationRow, AblationRun, AblationTable};
pub use config::{Coefficients, OptimizerConfig, TrainConfig};
pub use optim::Adam;

use crate::autograd::{Tape, Tensor};
use crate::backbone::update_running_stats;
use crate::data::{load_split, parallel_map, Manifest, Sample, Split};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::{dice_score, evaluate_labels, summarize, write_csv, HdConvention, MetricsReport, MetricsSummary};
use crate::model::{term_mask, DsdModel};
use crate::plot;
use crate::volume::argmax_channels;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CKPT_BEST: &str = "ckpt_best.json";
pub const CKPT_LAST: &str = "ckpt_last.json";
pub const LOG_FILE: &str = "log.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

/// Epoch means of the step losses plus validation Dice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Mean foreground Dice over validation samples.
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_dice: Option<f64>,
    pub best_epoch: Option<usize>,
    pub params: crate::params::ParamStore,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint {} has version {}, expected {CHECKPOINT_VERSION}",
                path.display(),
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds the model and installs the stored parameters.
    pub fn model(&self) -> Result<DsdModel> {
        let mut model = DsdModel::new(self.config.arch.clone(), self.config.seed, true)?;
        if model.store.names() != self.params.names() {
            return Err(Error::Config("checkpoint parameters do not match its architecture".into()));
        }
        for id in model.store.ids() {
            if model.store.get(id).shape() != self.params.get(id).shape() {
                return Err(Error::ShapeMismatch {
                    expected: model.store.get(id).shape().to_vec(),
                    actual: self.params.get(id).shape().to_vec(),
                });
            }
        }
        model.store = self.params.clone();
        Ok(model)
    }
}

/// Outcome of [`train`] or [`resume`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub epochs_completed: usize,
    pub best_val_dice: Option<f64>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub stopped_early: bool,
}

/// In-memory training split: images as f64, labels one-hot.
struct Batches {
    ids: Vec<String>,
    images: Vec<Array4<f64>>,
    labels: Vec<Array3<u8>>,
    num_classes: usize,
}

impl Batches {
    fn new(samples: &[Sample], num_classes: usize) -> Self {
        Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images: samples.iter().map(|s| s.pair.image.mapv(f64::from)).collect(),
            labels: samples.iter().map(|s| s.pair.label.clone()).collect(),
            num_classes,
        }
    }

    /// Stacks `idx` into `(B, C, ...)` images and `(B, K, ...)` one-hot
    /// labels, flipping each sample's axes as drawn from `rng`.
    fn assemble(&self, idx: &[usize], flips: bool, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
        let [c, h, w, d] = self.images[idx[0]].shape().try_into().expect("4-d image");
        let b = idx.len();
        let k = self.num_classes;
        let mut x = Tensor::zeros(IxDyn(&[b, c, h, w, d]));
        let mut t = Tensor::zeros(IxDyn(&[b, k, h, w, d]));
        for (bi, &i) in idx.iter().enumerate() {
            let mut img = self.images[i].view();
            let mut lab = self.labels[i].view();
            if flips {
                for axis in 0..3 {
                    if rng.random::<bool>() {
                        img.invert_axis(Axis(axis + 1));
                        lab.invert_axis(Axis(axis));
                    }
                }
            }
            x.slice_mut(s![bi, .., .., .., ..]).assign(&img);
            let mut tb = t.slice_mut(s![bi, .., .., .., ..]);
            for ((p, q, r), &l) in lab.indexed_iter() {
                tb[[l as usize, p, q, r]] = 1.0;
            }
        }
        (x, t)
    }
}

fn check_against_manifest(cfg: &TrainConfig, manifest: &Manifest) -> Result<()> {
    if cfg.arch.num_classes != manifest.num_classes {
        return Err(Error::Config(format!(
            "model has {} classes but manifest declares {}",
            cfg.arch.num_classes, manifest.num_classes
        )));
    }
    if cfg.arch.in_channels != manifest.in_channels {
        return Err(Error::Config(format!(
            "model has {} input channels but manifest declares {}",
            cfg.arch.in_channels, manifest.in_channels
        )));
    }
    Ok(())
}

/// Mean foreground Dice of the inference path over `samples`.
pub fn validation_dice(model: &DsdModel, samples: &[Sample]) -> Result<Option<f64>> {
    let k = model.arch().num_classes;
    let per_sample = parallel_map(samples.len(), |i| -> Result<Option<f64>> {
        let probs = model.predict(&samples[i].pair.image.mapv(f64::from))?;
        let pred = argmax_channels(probs.view());
        let truth = &samples[i].pair.label;
        let mut dices = Vec::new();
        for c in 1..k {
            let p = pred.mapv(|v| v as usize == c);
            let t = truth.mapv(|v| v as usize == c);
            dices.extend(dice_score(p.view(), t.view())?);
        }
        Ok((!dices.is_empty()).then(|| dices.iter().sum::<f64>() / dices.len() as f64))
    });
    let values: Vec<f64> = per_sample.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    Ok((!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64))
}

struct RunState {
    cfg: TrainConfig,
    model: DsdModel,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    best_val_dice: Option<f64>,
    best_epoch: Option<usize>,
    history: Vec<EpochRecord>,
    steps: Vec<StepRecord>,
}

impl RunState {
    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            epoch: self.epoch,
            best_val_dice: self.best_val_dice,
            best_epoch: self.best_epoch,
            params: self.model.store.clone(),
            optimizer: self.adam.clone(),
            rng: self.rng.clone(),
            history: self.history.clone(),
            steps: self.steps.clone(),
        }
    }
}

/// Trains from scratch into `cfg.output_dir`.
pub fn train(cfg: &TrainConfig) -> Result<RunSummary> {
    train_with(cfg, &mut |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(cfg: &TrainConfig, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<RunSummary> {
    cfg.validate()?;
    let model = DsdModel::new(cfg.arch.clone(), cfg.seed, true)?;
    let state = RunState {
        adam: Adam::new(cfg.optimizer.clone(), model.store.len()),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        cfg: cfg.clone(),
        model,
        epoch: 0,
        best_val_dice: None,
        best_epoch: None,
        history: Vec::new(),
        steps: Vec::new(),
    };
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.save(&dir.join("config.json"))?;
    run_epochs(state, on_epoch)
}

/// Continues the run in `run_dir` from its last checkpoint, up to
/// `epochs` total (default: the stored configuration's value).
pub fn resume(run_dir: &Path, epochs: Option<usize>, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<RunSummary> {
    let ckpt = Checkpoint::load(&run_dir.join(CKPT_LAST))?;
    let model = ckpt.model()?;
    let mut cfg = ckpt.config;
    cfg.output_dir = run_dir.to_path_buf();
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let state = RunState {
        cfg,
        model,
        adam: ckpt.optimizer,
        rng: ckpt.rng,
        epoch: ckpt.epoch,
        best_val_dice: ckpt.best_val_dice,
        best_epoch: ckpt.best_epoch,
        history: ckpt.history,
        steps: ckpt.steps,
    };
    run_epochs(state, on_epoch)
}

fn run_epochs(mut st: RunState, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<RunSummary> {
    let cfg = st.cfg.clone();
    let dsd = cfg.effective_dsd()?;
    let mask = term_mask(cfg.ablation_mode);
    let manifest = Manifest::load(&cfg.manifest_path)?;
    check_against_manifest(&cfg, &manifest)?;
    let train_samples = load_split(&cfg.manifest_path, &manifest, Split::Train)?;
    if train_samples.is_empty() {
        return Err(Error::Config("manifest has no training samples".into()));
    }
    for s in &train_samples {
        cfg.arch.check_input_shape(s.pair.label.shape().try_into().expect("3-d label"))?;
    }
    let val_samples = load_split(&cfg.manifest_path, &manifest, Split::Val)?;
    let batches = Batches::new(&train_samples, manifest.num_classes);
    let dir = cfg.output_dir.clone();
    let mut stopped_early = false;

    while st.epoch < cfg.epochs {
        let epoch = st.epoch + 1;
        let mut order: Vec<usize> = (0..batches.ids.len()).collect();
        order.shuffle(&mut st.rng);
        let mut sums = LossBreakdown::default();
        let mut n_steps = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, truth) = batches.assemble(idx, cfg.augment_flips, &mut st.rng);
            let (loss, grads, norm_stats) = {
                let tape = Tape::new();
                let params = st.model.store.bind(&tape, true);
                let out = st.model.forward_train(tape.constant(x), &params, &truth, &dsd, mask)?;
                let loss = out.loss.breakdown;
                if !loss.is_finite() {
                    let ids: Vec<&str> = idx.iter().map(|&i| batches.ids[i].as_str()).collect();
                    let dump = format!("samples {ids:?}, terms {loss:?}");
                    let path = dir.join("nan_dump.json");
                    let body = serde_json::json!({
                        "epoch": epoch, "step": step + 1, "samples": ids,
                        "main": loss.main.to_string(), "deep_supervision": loss.deep_supervision.to_string(),
                        "kl_encoder": loss.kl_encoder.to_string(), "kl_decoder": loss.kl_decoder.to_string(),
                        "total": loss.total.to_string(),
                    });
                    fs::write(&path, serde_json::to_string_pretty(&body).expect("json")).map_err(|e| Error::io(&path, e))?;
                    return Err(Error::NonFiniteLoss { epoch, step: step + 1, dump });
                }
                let g = tape.backward(out.loss.total);
                (loss, params.gradients(&g), out.norm_stats)
            };
            st.adam.step(&mut st.model.store, &grads);
            update_running_stats(&mut st.model.store, &norm_stats);
            st.steps.push(StepRecord { epoch, step: step + 1, loss });
            sums.main += loss.main;
            sums.deep_supervision += loss.deep_supervision;
            sums.kl_encoder += loss.kl_encoder;
            sums.kl_decoder += loss.kl_decoder;
            sums.total += loss.total;
            n_steps += 1;
        }
        let n = n_steps as f64;
        let mean = LossBreakdown {
            main: sums.main / n,
            deep_supervision: sums.deep_supervision / n,
            kl_encoder: sums.kl_encoder / n,
            kl_decoder: sums.kl_decoder / n,
            total: sums.total / n,
        };
        let val_dice = validation_dice(&st.model, &val_samples)?;
        let record = EpochRecord { epoch, loss: mean, val_dice };
        st.history.push(record);
        st.epoch = epoch;
        let improved = match (val_dice, st.best_val_dice) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            // Without validation data the latest epoch is kept.
            (None, _) => st.best_val_dice.is_none(),
        };
        if improved {
            st.best_val_dice = val_dice;
            st.best_epoch = Some(epoch);
        }
        let ckpt = st.checkpoint();
        if improved {
            ckpt.save(&dir.join(CKPT_BEST))?;
        }
        ckpt.save(&dir.join(CKPT_LAST))?;
        write_logs(&dir, &st.history, &st.steps)?;
        on_epoch(&record);
        if let (Some(target), Some(v)) = (cfg.target_val_dice, val_dice) {
            if v >= target {
                stopped_early = st.epoch < cfg.epochs;
                break;
            }
        }
    }
    plot::write_training_curves(&dir.join("training_curves.svg"), &st.history)?;
    Ok(RunSummary {
        run_dir: dir,
        epochs_completed: st.epoch,
        best_val_dice: st.best_val_dice,
        best_epoch: st.best_epoch,
        history: st.history,
        steps: st.steps,
        stopped_early,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_logs(dir: &Path, history: &[EpochRecord], steps: &[StepRecord]) -> Result<()> {
    let header = ["main", "deep_supervision", "kl_encoder", "kl_decoder", "total"];
    let terms = |l: &LossBreakdown| {
        [l.main, l.deep_supervision, l.kl_encoder, l.kl_decoder, l.total].map(|v| v.to_string())
    };
    let path = dir.join(LOG_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["epoch"].iter().chain(&header).chain(&["val_dice"]))?;
    for r in history {
        let mut row = vec![r.epoch.to_string()];
        row.extend(terms(&r.loss));
        row.push(fmt_opt(r.val_dice));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join(STEPS_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["epoch", "step"].iter().chain(&header))?;
    for r in steps {
        let mut row = vec![r.epoch.to_string(), r.step.to_string()];
        row.extend(terms(&r.loss));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub foreground_only: bool,
    pub convention: HdConvention,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            foreground_only: true,
            convention: HdConvention::MaxOfDirected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub id: String,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub split: Split,
    pub summary: MetricsSummary,
    pub samples: Vec<SampleReport>,
}

impl EvaluationReport {
    /// Writes `report.json` and `metrics_<split>.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(REPORT_FILE);
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        let path = dir.join(format!("metrics_{}.csv", self.split.as_str()));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_csv(file, &self.pairs())
    }

    fn pairs(&self) -> Vec<(String, MetricsReport)> {
        self.samples.iter().map(|s| (s.id.clone(), s.metrics.clone())).collect()
    }
}

/// Inference-path metrics for every sample of a loaded split.
pub fn evaluate_model(model: &DsdModel, samples: &[Sample], split: Split, opts: EvalOptions) -> Result<EvaluationReport> {
    let k = model.arch().num_classes;
    let reports = parallel_map(samples.len(), |i| -> Result<SampleReport> {
        let s = &samples[i];
        let probs = model.predict(&s.pair.image.mapv(f64::from))?;
        let pred = argmax_channels(probs.view());
        let metrics = evaluate_labels(&pred, &s.pair.label, k, s.pair.spacing_f64(), opts.foreground_only, opts.convention)?;
        Ok(SampleReport { id: s.id.clone(), metrics })
    });
    let samples = reports.into_iter().collect::<Result<Vec<_>>>()?;
    let pairs: Vec<_> = samples.iter().map(|s| (s.id.clone(), s.metrics.clone())).collect();
    Ok(EvaluationReport {
        split,
        summary: summarize(&pairs),
        samples,
    })
}

/// Loads `checkpoint` and evaluates it on `split` of the manifest.
pub fn evaluate(checkpoint: &Path, manifest_path: &Path, split: Split, opts: EvalOptions) -> Result<EvaluationReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let manifest = Manifest::load(manifest_path)?;
    check_against_manifest(&ckpt.config, &manifest)?;
    let model = ckpt.model()?;
    let samples = load_split(manifest_path, &manifest, split)?;
    evaluate_model(&model, &samples, split, opts)
}
