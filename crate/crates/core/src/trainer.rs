//! The pretraining loop: augment a batch into view bundles, embed them with
//! the query and momentum encoders, compute the weighted multi-stage loss,
//! step the query parameters, EMA the key parameters and refresh the queues.
//!
//! All randomness is derived counter-style from the config seed (per step,
//! per sample, per epoch), so resuming from a checkpoint reproduces the
//! exact continuation of an uninterrupted run.

use crate::augment::{make_bundle, GlobalView, PatchSet};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::contrast::{detco_loss_and_grads, DetcoLossReport, LossWeights};
use crate::data::LabeledDataset;
use crate::error::{DetcoError, Result};
use crate::memory::QueueBank;
use crate::model::{momentum_update, DetcoModel, ParameterSet, PATCHES_PER_SET};
use crate::rng::{derive_seed, derive_seed2, stream};
use ndarray::{Array4, ArrayD};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

const STREAM_MODEL_INIT: u64 = 1;
const STREAM_QUEUE_INIT: u64 = 2;
const STREAM_EPOCH: u64 = 3;
const STREAM_BUNDLE: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

/// Loop hyperparameters. The desk defaults keep a ~300-step CPU run under
/// a few minutes; the learning rate follows the `0.03 * batch/256` scaling
/// of the momentum-contrast baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    /// SGD momentum for the query optimizer.
    pub sgd_momentum: f64,
    /// EMA coefficient of the key encoder.
    pub momentum: f64,
    pub seed: u64,
    pub mls_enabled: bool,
    pub glc_enabled: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            total_steps: 300,
            learning_rate: 0.03 * 32.0 / 256.0,
            lr_schedule: LrSchedule::Cosine,
            weight_decay: 1e-4,
            sgd_momentum: 0.9,
            momentum: 0.999,
            seed: 0,
            mls_enabled: true,
            glc_enabled: true,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(DetcoError::Config(format!(
                "trainer.batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(DetcoError::Config(format!(
                "trainer.momentum must lie in [0, 1], got {}",
                self.momentum
            )));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(DetcoError::Config(format!(
                "trainer.learning_rate must be a non-negative finite number, got {}",
                self.learning_rate
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(DetcoError::Config(
                "trainer.checkpoint_every must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = if total == 0 {
                    0.0
                } else {
                    step as f64 / total as f64
                };
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// SGD with momentum and coupled weight decay. Parameters whose gradient
/// buffers were untouched this step are skipped entirely, so disabled
/// branches stay bit-identical.
pub struct SgdMomentum {
    velocities: BTreeMap<String, ArrayD<f64>>,
    momentum: f64,
    weight_decay: f64,
}

impl SgdMomentum {
    pub fn new(model: &DetcoModel, momentum: f64, weight_decay: f64) -> Self {
        let mut velocities = BTreeMap::new();
        model.visit_params(&mut |name, view| {
            velocities.insert(name, ArrayD::zeros(view.raw_dim()));
        });
        SgdMomentum {
            velocities,
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, model: &mut DetcoModel, lr: f64) {
        model.visit_train(&mut |name, mut param, grad, touched| {
            if !touched {
                return;
            }
            let v = self
                .velocities
                .get_mut(&name)
                .expect("velocity allocated at init");
            ndarray::Zip::from(v.view_mut())
                .and(&param)
                .and(&grad)
                .for_each(|vel, &p, &g| {
                    *vel = self.momentum * *vel + g + self.weight_decay * p;
                });
            ndarray::Zip::from(&mut param).and(v.view()).for_each(|p, &vel| {
                *p -= lr * vel;
            });
        });
    }

    pub fn export(&self) -> ParameterSet {
        let mut set = ParameterSet::new();
        for (name, v) in &self.velocities {
            set.insert(name.clone(), v.clone());
        }
        set
    }

    pub fn import(&mut self, set: &ParameterSet) -> Result<()> {
        let current = self.export();
        current.check_aligned(set)?;
        for (name, v) in self.velocities.iter_mut() {
            v.assign(set.get(name).expect("aligned"));
        }
        Ok(())
    }
}

/// Everything the loop mutates.
pub struct TrainState {
    pub step: u64,
    pub model_q: DetcoModel,
    pub model_k: DetcoModel,
    pub optimizer: SgdMomentum,
    pub bank: QueueBank,
    pub base_seed: u64,
}

impl TrainState {
    /// Fresh state: key parameters start as a copy of the query parameters
    /// and every queue is warm-started with random unit vectors.
    pub fn init(cfg: &ExperimentConfig) -> Result<TrainState> {
        cfg.validate()?;
        let seed = cfg.trainer.seed;
        let model_q = DetcoModel::new(&cfg.model, derive_seed(seed, STREAM_MODEL_INIT))?;
        let mut model_k = DetcoModel::new(&cfg.model, derive_seed(seed, STREAM_MODEL_INIT))?;
        model_k.import_params(&model_q.export_params())?;
        let optimizer = SgdMomentum::new(&model_q, cfg.trainer.sgd_momentum, cfg.trainer.weight_decay);
        let bank = QueueBank::warm_start(
            cfg.memory.queue_capacity,
            cfg.model.embed_dim,
            derive_seed(seed, STREAM_QUEUE_INIT),
        )?;
        Ok(TrainState {
            step: 0,
            model_q,
            model_k,
            optimizer,
            bank,
            base_seed: seed,
        })
    }

    /// Rebuild state from a checkpoint, verifying the config snapshot.
    pub fn from_checkpoint(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<TrainState> {
        cfg.validate()?;
        let snapshot = serde_json::to_value(cfg)
            .map_err(|e| DetcoError::Structure(format!("config encode failed: {e}")))?;
        if snapshot != ckpt.config {
            return Err(DetcoError::Structure(
                "checkpoint was written under a different effective config; refusing to resume"
                    .into(),
            ));
        }
        let mut model_q = DetcoModel::new(&cfg.model, 0)?;
        model_q.import_params(&ckpt.query_params)?;
        let mut model_k = DetcoModel::new(&cfg.model, 0)?;
        model_k.import_params(&ckpt.key_params)?;
        let mut optimizer =
            SgdMomentum::new(&model_q, cfg.trainer.sgd_momentum, cfg.trainer.weight_decay);
        optimizer.import(&ckpt.optimizer)?;
        Ok(TrainState {
            step: ckpt.step,
            model_q,
            model_k,
            optimizer,
            bank: ckpt.bank.clone(),
            base_seed: cfg.trainer.seed,
        })
    }

    pub fn to_checkpoint(&self, cfg: &ExperimentConfig) -> Result<Checkpoint> {
        Ok(Checkpoint {
            step: self.step,
            config: serde_json::to_value(cfg)
                .map_err(|e| DetcoError::Structure(format!("config encode failed: {e}")))?,
            query_params: self.model_q.export_params(),
            key_params: self.model_k.export_params(),
            optimizer: self.optimizer.export(),
            bank: self.bank.clone(),
        })
    }
}

/// NCHW batch from whole-image views.
pub fn views_to_batch(views: &[&GlobalView]) -> Array4<f64> {
    let b = views.len();
    let (h, w, _) = views[0].pixels.dim();
    let mut out = Array4::zeros((b, 3, h, w));
    for (bi, v) in views.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[bi, c, y, x]] = v.pixels[[y, x, c]];
                }
            }
        }
    }
    out
}

/// `(B*9)` NCHW batch from patch sets, sample-major, shuffled patch order
/// preserved within each sample.
pub fn patches_to_batch(sets: &[&PatchSet]) -> Array4<f64> {
    let b = sets.len();
    let (h, w, _) = sets[0].patches[0].dim();
    let mut out = Array4::zeros((b * PATCHES_PER_SET, 3, h, w));
    for (bi, set) in sets.iter().enumerate() {
        for (j, patch) in set.patches.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        out[[bi * PATCHES_PER_SET + j, c, y, x]] = patch[[y, x, c]];
                    }
                }
            }
        }
    }
    out
}

/// One metrics-log record, one JSON line per step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub l_gg: [f64; 4],
    pub l_ll: [f64; 4],
    pub l_gl: [f64; 4],
    pub total: f64,
    pub lr: f64,
}

impl MetricsRecord {
    pub fn from_report(step: u64, report: &DetcoLossReport, lr: f64) -> Self {
        let pick = |f: fn(&crate::contrast::StageLosses) -> f64| {
            [
                f(&report.per_stage[0]),
                f(&report.per_stage[1]),
                f(&report.per_stage[2]),
                f(&report.per_stage[3]),
            ]
        };
        MetricsRecord {
            step,
            l_gg: pick(|s| s.l_gg),
            l_ll: pick(|s| s.l_ll),
            l_gl: pick(|s| s.l_gl),
            total: report.total,
            lr,
        }
    }
}

/// Run one optimization step on `batch` (images in dataset order).
pub fn train_step(
    state: &mut TrainState,
    batch: &[&crate::image_ops::SourceImage],
    cfg: &ExperimentConfig,
) -> Result<DetcoLossReport> {
    if batch.len() != cfg.trainer.batch_size {
        return Err(DetcoError::Input(format!(
            "batch has {} samples, config expects {}",
            batch.len(),
            cfg.trainer.batch_size
        )));
    }
    let glc = cfg.trainer.glc_enabled;
    let step = state.step;
    let seed = state.base_seed;

    // 1. bundles (parallel across samples; outputs are pure in the seeds)
    let bundles: Vec<_> = batch
        .par_iter()
        .enumerate()
        .map(|(j, img)| {
            let bundle_seed = derive_seed2(derive_seed(seed, STREAM_BUNDLE), step, j as u64);
            make_bundle(img, bundle_seed, &cfg.augment)
        })
        .collect();

    let iq: Vec<&GlobalView> = bundles.iter().map(|b| &b.i_q).collect();
    let ik: Vec<&GlobalView> = bundles.iter().map(|b| &b.i_k).collect();
    let iq_batch = views_to_batch(&iq);
    let ik_batch = views_to_batch(&ik);

    // 2. query embeds with caches, key embeds without gradients
    let (q_global, g_cache) = state.model_q.forward_global_train(&iq_batch)?;
    let k_global = state.model_k.embed_global(&ik_batch)?;

    let (q_local, l_cache, k_local) = if glc {
        let pq: Vec<&PatchSet> = bundles.iter().map(|b| &b.p_q).collect();
        let pk: Vec<&PatchSet> = bundles.iter().map(|b| &b.p_k).collect();
        let pq_batch = patches_to_batch(&pq);
        let pk_batch = patches_to_batch(&pk);
        let (ql, lc) = state
            .model_q
            .forward_local_train(&pq_batch, batch.len())?;
        let kl = state.model_k.embed_local(&pk_batch, batch.len())?;
        (Some(ql), Some(lc), Some(kl))
    } else {
        (None, None, None)
    };

    // 3. loss and embedding gradients under the ablation flags
    let weights = if cfg.trainer.mls_enabled {
        cfg.contrast.loss_weights
    } else {
        LossWeights::last_stage_only()
    };
    let (report, grads) = detco_loss_and_grads(
        &q_global,
        &k_global,
        q_local.as_ref(),
        k_local.as_ref(),
        &state.bank,
        &cfg.contrast.temperatures(),
        &weights,
        true,
    )?;
    if let Some(which) = report.first_non_finite() {
        return Err(DetcoError::Validation(format!(
            "non-finite loss at step {step}: {which}; aborting before the parameter update"
        )));
    }

    // 4. backprop into the query model
    state.model_q.zero_grads();
    let mut d_global: [Option<ndarray::Array2<f64>>; 4] = [None, None, None, None];
    let mut d_local: [Option<ndarray::Array2<f64>>; 4] = [None, None, None, None];
    for (i, g) in grads.into_iter().enumerate() {
        d_global[i] = g.d_q_global;
        d_local[i] = g.d_q_local;
    }
    state.model_q.backward_global(&g_cache, d_global);
    if let (Some(lc), true) = (l_cache.as_ref(), glc) {
        state.model_q.backward_local(lc, d_local);
    }

    // 5. optimizer step on the query parameters
    let lr = cfg.trainer.lr_at(step, cfg.trainer.total_steps as u64);
    state.optimizer.step(&mut state.model_q, lr);

    // 6. EMA update of the key parameters
    let updated = momentum_update(
        &state.model_k.export_params(),
        &state.model_q.export_params(),
        cfg.trainer.momentum,
    )?;
    state.model_k.import_params(&updated)?;

    // 7. enqueue this step's key embeddings
    state.bank.push_keys(&k_global, k_local.as_ref())?;

    state.step += 1;
    Ok(report)
}

/// Artifacts of a completed run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps_run: u64,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub final_report: Option<DetcoLossReport>,
}

/// Dataset index for a global sample position, reshuffling each epoch.
fn sample_index(seed: u64, position: u64, n: usize, cache: &mut (u64, Vec<usize>)) -> usize {
    let epoch = position / n as u64;
    if cache.1.is_empty() || cache.0 != epoch {
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = stream(derive_seed(seed, STREAM_EPOCH), epoch);
        perm.shuffle(&mut rng);
        *cache = (epoch, perm);
    }
    cache.1[(position % n as u64) as usize]
}

/// Execute the loop from `state.step` to `total_steps`, writing periodic
/// checkpoints and one metrics line per step under `out_dir`.
pub fn run(
    cfg: &ExperimentConfig,
    dataset: &LabeledDataset,
    out_dir: &Path,
    state: &mut TrainState,
) -> Result<RunSummary> {
    if dataset.is_empty() {
        return Err(DetcoError::Input("dataset is empty".into()));
    }
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)
        .map_err(|e| DetcoError::io(ckpt_dir.display().to_string(), e))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| DetcoError::io(metrics_path.display().to_string(), e))?;
    let mut metrics = std::io::BufWriter::new(metrics_file);

    let total = cfg.trainer.total_steps as u64;
    let n = dataset.len();
    let b = cfg.trainer.batch_size;
    let mut epoch_cache = (u64::MAX, Vec::new());
    let mut final_report = None;

    while state.step < total {
        let step = state.step;
        let mut batch = Vec::with_capacity(b);
        for j in 0..b {
            let pos = step * b as u64 + j as u64;
            let idx = sample_index(state.base_seed, pos, n, &mut epoch_cache);
            batch.push(&dataset.items[idx].0);
        }
        let report = train_step(state, &batch, cfg)?;
        let lr = cfg.trainer.lr_at(step, total);
        let record = MetricsRecord::from_report(step, &report, lr);
        serde_json::to_writer(&mut metrics, &record)
            .map_err(|e| DetcoError::io(metrics_path.display().to_string(), std::io::Error::new(std::io::ErrorKind::Other, e)))?;
        metrics
            .write_all(b"\n")
            .map_err(|e| DetcoError::io(metrics_path.display().to_string(), e))?;
        if state.step % cfg.trainer.checkpoint_every as u64 == 0 || state.step == total {
            let path = ckpt_dir.join(format!("step_{:06}.detco", state.step));
            state.to_checkpoint(cfg)?.save(&path)?;
        }
        final_report = Some(report);
        if step % 20 == 0 {
            log::info!(
                "step {step}/{total} total_loss {:.4} lr {:.5}",
                final_report.as_ref().unwrap().total,
                lr
            );
        }
    }
    metrics
        .flush()
        .map_err(|e| DetcoError::io(metrics_path.display().to_string(), e))?;

    let final_path = out_dir.join("final.detco");
    state.to_checkpoint(cfg)?.save(&final_path)?;
    Ok(RunSummary {
        steps_run: state.step,
        final_checkpoint: final_path,
        metrics_path,
        final_report,
    })
}
