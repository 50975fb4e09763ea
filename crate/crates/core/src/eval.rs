//! Feature-quality harness: per-stage linear probes over frozen,
//! global-average-pooled backbone features (pre-head, the standard linear
//! evaluation convention) and the 2x2 ablation grid over the multi-level
//! and global/local flags.

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::LabeledDataset;
use crate::error::{DetcoError, Result};
use crate::image_ops::resize_bilinear;
use crate::model::DetcoModel;
use crate::trainer::{run, TrainState};
use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeType {
    #[serde(rename = "linear-softmax")]
    LinearSoftmax,
    /// One-shared-margin multiclass hinge, the SVM-style stand-in.
    #[serde(rename = "linear-hinge")]
    LinearHinge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub probe_type: ProbeType,
    /// Train fraction of the (stratified, order-preserving) split.
    pub split: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Stages to probe, numbered 2..=5 shallow to deep.
    pub stages: Vec<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            probe_type: ProbeType::LinearSoftmax,
            split: 0.8,
            epochs: 100,
            learning_rate: 0.5,
            stages: vec![2, 3, 4, 5],
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(DetcoError::Config(format!(
                "eval.split must lie in (0, 1), got {}",
                self.split
            )));
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| !(2..=5).contains(s)) {
            return Err(DetcoError::Config(format!(
                "eval.stages must be a non-empty subset of [2, 3, 4, 5], got {:?}",
                self.stages
            )));
        }
        if self.epochs == 0 {
            return Err(DetcoError::Config("eval.epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(DetcoError::Config(format!(
                "eval.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Per-stage probe accuracies plus the chance level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub stage_accuracy: Vec<(usize, f64)>,
    pub chance: f64,
    pub config: ProbeConfig,
}

/// Rebuild the (frozen) query-side model recorded in a checkpoint.
pub fn load_query_model(ckpt: &Checkpoint) -> Result<(DetcoModel, ExperimentConfig)> {
    let cfg: ExperimentConfig = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| DetcoError::Checkpoint(format!("config snapshot decode failed: {e}")))?;
    let mut model = DetcoModel::new(&cfg.model, 0)?;
    model.import_params(&ckpt.query_params)?;
    Ok((model, cfg))
}

/// Pooled stage features of every dataset item, in dataset order, with no
/// augmentation: each image is bilinearly resized to `eval_side` and passed
/// through the frozen encoder; stage `2..=5` selects the tap.
pub fn extract_features(
    model: &DetcoModel,
    dataset: &LabeledDataset,
    stage: usize,
    eval_side: usize,
) -> Result<(Array2<f64>, Vec<usize>)> {
    if !(2..=5).contains(&stage) {
        return Err(DetcoError::Input(format!(
            "stage must lie in 2..=5, got {stage}"
        )));
    }
    let stage_idx = stage - 2;
    let n = dataset.len();
    let c = model.config.stage_channels[stage_idx];
    let mut features = Array2::zeros((n, c));
    let labels: Vec<usize> = dataset.items.iter().map(|(_, l)| *l).collect();

    let chunk = 64usize;
    let mut row = 0usize;
    while row < n {
        let end = (row + chunk).min(n);
        let b = end - row;
        let mut batch = Array4::zeros((b, 3, eval_side, eval_side));
        for (bi, (img, _)) in dataset.items[row..end].iter().enumerate() {
            let resized = resize_bilinear(&img.pixels, eval_side, eval_side);
            for y in 0..eval_side {
                for x in 0..eval_side {
                    for ch in 0..3 {
                        batch[[bi, ch, y, x]] = resized[[y, x, ch]];
                    }
                }
            }
        }
        let feats = model.encode_stages(&batch)?;
        let pooled = crate::model::nn::global_avg_pool(feats.stage(stage_idx));
        features
            .slice_mut(ndarray::s![row..end, ..])
            .assign(&pooled);
        row = end;
    }
    Ok((features, labels))
}

/// Deterministic stratified split preserving within-class order: the first
/// `split` fraction of each class's rows trains, the rest validates.
fn stratified_split(labels: &[usize], num_classes: usize, split: f64) -> (Vec<usize>, Vec<usize>) {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for rows in per_class {
        let n = rows.len();
        if n == 0 {
            continue;
        }
        let cut = ((split * n as f64).floor() as usize).clamp(1, n.saturating_sub(1).max(1));
        train.extend_from_slice(&rows[..cut.min(n)]);
        val.extend_from_slice(&rows[cut.min(n)..]);
    }
    (train, val)
}

fn standardize(features: &Array2<f64>, train_rows: &[usize]) -> (Array1<f64>, Array1<f64>) {
    let d = features.dim().1;
    let mut mean = Array1::zeros(d);
    for &r in train_rows {
        mean += &features.row(r);
    }
    mean /= train_rows.len() as f64;
    let mut var = Array1::zeros(d);
    for &r in train_rows {
        let diff = &features.row(r) - &mean;
        var += &(&diff * &diff);
    }
    var /= train_rows.len() as f64;
    let std = var.mapv(|v| v.sqrt().max(1e-8));
    (mean, std)
}

/// Train a linear classifier on the train split of frozen features and
/// report validation accuracy.
pub fn linear_probe(
    features: &Array2<f64>,
    labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    cfg.validate()?;
    let n = features.dim().0;
    if n != labels.len() {
        return Err(DetcoError::Input(format!(
            "{n} feature rows but {} labels",
            labels.len()
        )));
    }
    let num_classes = labels.iter().copied().max().map(|m| m + 1).unwrap_or(0);
    if num_classes < 2 || n < 2 * num_classes {
        return Err(DetcoError::Input(format!(
            "need at least two classes and 2 x num_classes samples, got {n} samples over {num_classes} classes"
        )));
    }
    let (train, val) = stratified_split(labels, num_classes, cfg.split);
    if train.is_empty() || val.is_empty() {
        return Err(DetcoError::Input(
            "degenerate split: a partition is empty".into(),
        ));
    }

    let (mean, std) = standardize(features, &train);
    let d = features.dim().1;
    let norm_row = |r: usize| -> Array1<f64> { (&features.row(r) - &mean) / &std };

    let mut w = Array2::<f64>::zeros((num_classes, d));
    let mut b = Array1::<f64>::zeros(num_classes);
    let mut vw = Array2::<f64>::zeros((num_classes, d));
    let mut vb = Array1::<f64>::zeros(num_classes);
    // momentum GD for the smooth softmax objective; plain subgradient with
    // a diminishing step for the piecewise-linear hinge
    let momentum = match cfg.probe_type {
        ProbeType::LinearSoftmax => 0.9,
        ProbeType::LinearHinge => 0.0,
    };
    let inv_n = 1.0 / train.len() as f64;

    for epoch in 0..cfg.epochs {
        let mut gw = Array2::<f64>::zeros((num_classes, d));
        let mut gb = Array1::<f64>::zeros(num_classes);
        for &r in &train {
            let x = norm_row(r);
            let y = labels[r];
            let scores = w.dot(&x) + &b;
            match cfg.probe_type {
                ProbeType::LinearSoftmax => {
                    let m = scores.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                    let exps = scores.mapv(|v| (v - m).exp());
                    let sum: f64 = exps.sum();
                    for c in 0..num_classes {
                        let p = exps[c] / sum;
                        let coeff = p - if c == y { 1.0 } else { 0.0 };
                        gb[c] += coeff;
                        gw.row_mut(c).scaled_add(coeff, &x);
                    }
                }
                ProbeType::LinearHinge => {
                    // Crammer-Singer: penalize the most-violating class
                    let mut best = f64::NEG_INFINITY;
                    let mut best_c = 0;
                    for c in 0..num_classes {
                        if c != y && scores[c] > best {
                            best = scores[c];
                            best_c = c;
                        }
                    }
                    if best + 1.0 - scores[y] > 0.0 {
                        gb[best_c] += 1.0;
                        gb[y] -= 1.0;
                        gw.row_mut(best_c).scaled_add(1.0, &x);
                        gw.row_mut(y).scaled_add(-1.0, &x);
                    }
                }
            }
        }
        gw *= inv_n;
        gb *= inv_n;
        vw = vw * momentum + &gw;
        vb = vb * momentum + &gb;
        let lr = match cfg.probe_type {
            ProbeType::LinearSoftmax => cfg.learning_rate,
            ProbeType::LinearHinge => cfg.learning_rate / (1.0 + 0.05 * epoch as f64),
        };
        w.scaled_add(-lr, &vw);
        b.scaled_add(-lr, &vb);
    }

    let mut correct = 0usize;
    for &r in &val {
        let x = norm_row(r);
        let scores = w.dot(&x) + &b;
        let mut best = 0usize;
        for c in 1..num_classes {
            if scores[c] > scores[best] {
                best = c;
            }
        }
        if best == labels[r] {
            correct += 1;
        }
    }
    Ok(correct as f64 / val.len() as f64)
}

/// Probe the requested stages of a frozen model.
pub fn probe_stages(
    model: &DetcoModel,
    dataset: &LabeledDataset,
    cfg: &ProbeConfig,
    eval_side: usize,
) -> Result<ProbeReport> {
    cfg.validate()?;
    let mut stage_accuracy = Vec::with_capacity(cfg.stages.len());
    for &stage in &cfg.stages {
        let (features, labels) = extract_features(model, dataset, stage, eval_side)?;
        let acc = linear_probe(&features, &labels, cfg)?;
        stage_accuracy.push((stage, acc));
    }
    Ok(ProbeReport {
        stage_accuracy,
        chance: 1.0 / dataset.num_classes as f64,
        config: cfg.clone(),
    })
}

/// One row of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mls: bool,
    pub glc: bool,
    pub final_total_loss: f64,
    pub stage_accuracy: Vec<(usize, f64)>,
}

/// Run the four flag combinations (rows (a)..(d): neither, MLS only,
/// GLC only, both) with otherwise identical configs, probing every
/// requested stage of each run's final query encoder.
pub fn ablation_grid(
    base: &ExperimentConfig,
    dataset: &LabeledDataset,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    let combos = [(false, false), (true, false), (false, true), (true, true)];
    let mut rows = Vec::with_capacity(4);
    for (mls, glc) in combos {
        let mut cfg = base.clone();
        cfg.trainer.mls_enabled = mls;
        cfg.trainer.glc_enabled = glc;
        cfg.validate()?;
        let run_dir = out_dir.join(format!(
            "mls_{}_glc_{}",
            if mls { "on" } else { "off" },
            if glc { "on" } else { "off" }
        ));
        std::fs::create_dir_all(&run_dir)
            .map_err(|e| DetcoError::io(run_dir.display().to_string(), e))?;
        let mut state = TrainState::init(&cfg)?;
        let summary = run(&cfg, dataset, &run_dir, &mut state)?;
        let report = probe_stages(
            &state.model_q,
            dataset,
            &cfg.eval,
            cfg.augment.global_side,
        )?;
        rows.push(AblationRow {
            mls,
            glc,
            final_total_loss: summary.final_report.map(|r| r.total).unwrap_or(f64::NAN),
            stage_accuracy: report.stage_accuracy,
        });
    }
    Ok(rows)
}

/// Aligned plain-text table of the grid, one row per flag combination.
pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str("row  mls  glc  final_loss");
    if let Some(first) = rows.first() {
        for (stage, _) in &first.stage_accuracy {
            out.push_str(&format!("  acc_s{stage}"));
        }
    }
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        let tag = (b'a' + i as u8) as char;
        out.push_str(&format!(
            "({tag})  {:>3}  {:>3}  {:>10.4}",
            if row.mls { "y" } else { "n" },
            if row.glc { "y" } else { "n" },
            row.final_total_loss
        ));
        for (_, acc) in &row.stage_accuracy {
            out.push_str(&format!("  {acc:>6.3}"));
        }
        out.push('\n');
    }
    out
}
