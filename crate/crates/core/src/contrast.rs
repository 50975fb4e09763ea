//! The contrastive objective: InfoNCE over one positive and a bank of
//! negatives, the three per-stage branch losses (global<->global,
//! local<->local, global<->local) and their stage-weighted total.
//!
//! Losses are computed in f64 with max-shifted logits. Gradients flow to
//! the query embeddings only; positives and negatives are constants.

use crate::error::{DetcoError, Result};
use crate::memory::QueueBank;
use crate::model::EmbeddingSet;
use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Input rows are sanity-checked to this (loose) tolerance; embeddings are
/// produced exactly unit-norm, and finite-difference probes at step 1e-4
/// must stay inside the net.
pub const INFO_NCE_NORM_TOL: f64 = 1e-3;

/// Per-branch softmax temperatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Temperatures {
    pub tau_gg: f64,
    pub tau_ll: f64,
    pub tau_gl: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Temperatures {
            tau_gg: 0.2,
            tau_ll: 0.15,
            tau_gl: 0.5,
        }
    }
}

impl Temperatures {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("contrast.tau_gg", self.tau_gg),
            ("contrast.tau_ll", self.tau_ll),
            ("contrast.tau_gl", self.tau_gl),
        ] {
            if !(t > 0.0) {
                return Err(DetcoError::Config(format!(
                    "{name} must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-stage loss weights, shallow to deep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossWeights(pub [f64; 4]);

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights([0.1, 0.4, 0.7, 1.0])
    }
}

impl LossWeights {
    /// Deepest stage only; the single-level ablation.
    pub fn last_stage_only() -> Self {
        LossWeights([0.0, 0.0, 0.0, 1.0])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(DetcoError::Config(format!(
                "contrast.loss_weights must be non-negative and finite, got {:?}",
                self.0
            )));
        }
        Ok(())
    }
}

/// The three branch losses of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageLosses {
    pub l_gg: f64,
    pub l_ll: f64,
    pub l_gl: f64,
}

impl StageLosses {
    pub fn sum(&self) -> f64 {
        self.l_gg + self.l_ll + self.l_gl
    }
}

/// Twelve sub-losses plus the weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetcoLossReport {
    pub per_stage: [StageLosses; 4],
    pub total: f64,
}

impl DetcoLossReport {
    /// Recompute the weighted total from the reported sub-losses.
    pub fn recombined(&self, weights: &LossWeights) -> f64 {
        self.per_stage
            .iter()
            .zip(weights.0)
            .map(|(s, w)| w * s.sum())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.per_stage.iter().all(|s| s.sum().is_finite())
    }

    /// Name the first non-finite sub-loss, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        for (i, s) in self.per_stage.iter().enumerate() {
            for (name, v) in [("l_gg", s.l_gg), ("l_ll", s.l_ll), ("l_gl", s.l_gl)] {
                if !v.is_finite() {
                    return Some(format!("stage{} {name} = {v}", i + 2));
                }
            }
        }
        None
    }
}

fn check_rows(name: &str, rows: ArrayView2<'_, f64>) -> Result<()> {
    for (i, row) in rows.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if (n - 1.0).abs() > INFO_NCE_NORM_TOL {
            return Err(DetcoError::Validation(format!(
                "{name} row {i} has norm {n:.6}, expected 1 +- {INFO_NCE_NORM_TOL:e}"
            )));
        }
    }
    Ok(())
}

fn check_inputs(
    q: ArrayView2<'_, f64>,
    k_pos: ArrayView2<'_, f64>,
    negs: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<()> {
    if !(tau > 0.0) {
        return Err(DetcoError::Input(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if q.dim() != k_pos.dim() {
        return Err(DetcoError::Input(format!(
            "q {:?} and k_pos {:?} must have matching shapes",
            q.dim(),
            k_pos.dim()
        )));
    }
    if negs.dim().0 > 0 && negs.dim().1 != q.dim().1 {
        return Err(DetcoError::Input(format!(
            "negatives dim {} does not match embedding dim {}",
            negs.dim().1,
            q.dim().1
        )));
    }
    check_rows("q", q)?;
    check_rows("k_pos", k_pos)?;
    check_rows("negs", negs)
}

/// Core computation shared by the loss-only and loss+grad paths.
/// Returns per-batch mean loss and, when `want_grad`, d(loss)/dq.
fn info_nce_impl(
    q: ArrayView2<'_, f64>,
    k_pos: ArrayView2<'_, f64>,
    negs: ArrayView2<'_, f64>,
    tau: f64,
    want_grad: bool,
) -> (f64, Option<Array2<f64>>) {
    let (b, _) = q.dim();
    let k = negs.dim().0;
    let inv_tau = 1.0 / tau;

    // positive logits: rowwise dot
    let mut l_pos = Vec::with_capacity(b);
    for (qr, kr) in q.rows().into_iter().zip(k_pos.rows()) {
        l_pos.push(qr.dot(&kr) * inv_tau);
    }
    // negative logits: (B, K)
    let l_neg = if k > 0 {
        q.dot(&negs.t()) * inv_tau
    } else {
        Array2::zeros((b, 0))
    };

    let mut loss_sum = 0.0;
    let mut pos_coeff = Vec::with_capacity(b); // (p0 - 1) per row
    let mut neg_probs = if want_grad && k > 0 {
        Some(Array2::<f64>::zeros((b, k)))
    } else {
        None
    };
    for bi in 0..b {
        let z0 = l_pos[bi];
        let mut m = z0;
        for i in 0..k {
            m = m.max(l_neg[[bi, i]]);
        }
        let e0 = (z0 - m).exp();
        let mut s = e0;
        for i in 0..k {
            s += (l_neg[[bi, i]] - m).exp();
        }
        loss_sum += m + s.ln() - z0;
        if want_grad {
            pos_coeff.push(e0 / s - 1.0);
            if let Some(p) = neg_probs.as_mut() {
                for i in 0..k {
                    p[[bi, i]] = (l_neg[[bi, i]] - m).exp() / s;
                }
            }
        }
    }
    let loss = loss_sum / b as f64;
    if !want_grad {
        return (loss, None);
    }

    // dq_b = ((p0 - 1) * k_pos_b + sum_i p_i * neg_i) / (tau * B)
    let scale = inv_tau / b as f64;
    let mut grad = Array2::zeros(q.raw_dim());
    for bi in 0..b {
        let c = pos_coeff[bi] * scale;
        grad.row_mut(bi).zip_mut_with(&k_pos.row(bi), |g, &kv| {
            *g = c * kv;
        });
    }
    if let Some(p) = neg_probs {
        grad += &(p.dot(&negs) * scale);
    }
    (loss, Some(grad))
}

/// Mean InfoNCE loss over the batch:
/// `-log(exp(q.k+ / tau) / (exp(q.k+ / tau) + sum_i exp(q.k_i / tau)))`.
/// With no negatives the softmax has a single term and the loss is exactly
/// zero.
pub fn info_nce(
    q: ArrayView2<'_, f64>,
    k_pos: ArrayView2<'_, f64>,
    negs: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<f64> {
    check_inputs(q, k_pos, negs, tau)?;
    Ok(info_nce_impl(q, k_pos, negs, tau, false).0)
}

/// InfoNCE loss plus its gradient with respect to `q`.
pub fn info_nce_with_grad(
    q: ArrayView2<'_, f64>,
    k_pos: ArrayView2<'_, f64>,
    negs: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    check_inputs(q, k_pos, negs, tau)?;
    let (loss, grad) = info_nce_impl(q, k_pos, negs, tau, true);
    Ok((loss, grad.expect("grad requested")))
}

/// The three branch losses of one stage: global<->global, local<->local and
/// global<->local (patch queries against global keys and the global queue).
pub fn stage_losses(
    q_g: ArrayView2<'_, f64>,
    k_g: ArrayView2<'_, f64>,
    q_l: ArrayView2<'_, f64>,
    k_l: ArrayView2<'_, f64>,
    global_negs: ArrayView2<'_, f64>,
    local_negs: ArrayView2<'_, f64>,
    taus: &Temperatures,
) -> Result<StageLosses> {
    Ok(StageLosses {
        l_gg: info_nce(q_g, k_g, global_negs, taus.tau_gg)?,
        l_ll: info_nce(q_l, k_l, local_negs, taus.tau_ll)?,
        l_gl: info_nce(q_l, k_g, global_negs, taus.tau_gl)?,
    })
}

/// Gradients of the weighted total with respect to one stage's query
/// embeddings. `None` marks a branch that received no gradient (disabled or
/// zero-weighted), so downstream parameters stay untouched.
pub struct StageGrads {
    pub d_q_global: Option<Array2<f64>>,
    pub d_q_local: Option<Array2<f64>>,
}

/// Weighted multi-stage objective over full embedding sets.
pub fn detco_loss(
    embeds_q: &EmbeddingSet,
    embeds_k: &EmbeddingSet,
    bank: &QueueBank,
    taus: &Temperatures,
    weights: &LossWeights,
) -> Result<DetcoLossReport> {
    let (report, _) = detco_loss_and_grads(
        &embeds_q.global,
        &embeds_k.global,
        Some(&embeds_q.local),
        Some(&embeds_k.local),
        bank,
        taus,
        weights,
        false,
    )?;
    Ok(report)
}

/// Work item shared by the forward-only and training paths. Local
/// embeddings are optional: without them the patch branches report zero and
/// contribute no gradient. Zero-weight stages keep their reported losses
/// but are skipped on the gradient side.
#[allow(clippy::too_many_arguments)]
pub fn detco_loss_and_grads(
    q_global: &[Array2<f64>; 4],
    k_global: &[Array2<f64>; 4],
    q_local: Option<&[Array2<f64>; 4]>,
    k_local: Option<&[Array2<f64>; 4]>,
    bank: &QueueBank,
    taus: &Temperatures,
    weights: &LossWeights,
    want_grads: bool,
) -> Result<(DetcoLossReport, Vec<StageGrads>)> {
    taus.validate()?;
    weights.validate()?;
    if q_local.is_some() != k_local.is_some() {
        return Err(DetcoError::Input(
            "query and key local embeddings must be supplied together".into(),
        ));
    }

    // The four stages are independent; compute them in parallel.
    let results: Vec<Result<(StageLosses, StageGrads)>> = (0..4usize)
        .into_par_iter()
        .map(|i| {
            let w = weights.0[i];
            let g_negs = bank.global[i].negatives()?;
            let grad_wanted = want_grads && w > 0.0;

            let (l_gg, d_qg) = if grad_wanted {
                let (l, g) = info_nce_with_grad(
                    q_global[i].view(),
                    k_global[i].view(),
                    g_negs.view(),
                    taus.tau_gg,
                )?;
                (l, Some(g * w))
            } else {
                (
                    info_nce(
                        q_global[i].view(),
                        k_global[i].view(),
                        g_negs.view(),
                        taus.tau_gg,
                    )?,
                    None,
                )
            };

            let (l_ll, l_gl, d_ql) = match (q_local, k_local) {
                (Some(ql), Some(kl)) => {
                    let l_negs = bank.local[i].negatives()?;
                    if grad_wanted {
                        let (ll, g_ll) = info_nce_with_grad(
                            ql[i].view(),
                            kl[i].view(),
                            l_negs.view(),
                            taus.tau_ll,
                        )?;
                        let (lg, g_gl) = info_nce_with_grad(
                            ql[i].view(),
                            k_global[i].view(),
                            g_negs.view(),
                            taus.tau_gl,
                        )?;
                        (ll, lg, Some((g_ll + g_gl) * w))
                    } else {
                        let ll =
                            info_nce(ql[i].view(), kl[i].view(), l_negs.view(), taus.tau_ll)?;
                        let lg = info_nce(
                            ql[i].view(),
                            k_global[i].view(),
                            g_negs.view(),
                            taus.tau_gl,
                        )?;
                        (ll, lg, None)
                    }
                }
                _ => (0.0, 0.0, None),
            };

            Ok((
                StageLosses { l_gg, l_ll, l_gl },
                StageGrads {
                    d_q_global: d_qg,
                    d_q_local: d_ql,
                },
            ))
        })
        .collect();

    let mut per_stage = Vec::with_capacity(4);
    let mut grads = Vec::with_capacity(4);
    for r in results {
        let (losses, g) = r?;
        per_stage.push(losses);
        grads.push(g);
    }
    let per_stage: [StageLosses; 4] = [per_stage[0], per_stage[1], per_stage[2], per_stage[3]];
    let total = per_stage
        .iter()
        .zip(weights.0)
        .map(|(s, w)| w * s.sum())
        .sum();
    Ok((DetcoLossReport { per_stage, total }, grads))
}

/// Concatenate queue snapshots per stage for reporting-style consumers.
pub fn bank_snapshots(bank: &QueueBank) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
    (0..4)
        .map(|i| Ok((bank.global[i].negatives()?, bank.local[i].negatives()?)))
        .collect()
}

/// Stack per-row embeddings into one matrix (test/bench helper).
pub fn stack_rows(rows: &[Vec<f64>]) -> Array2<f64> {
    let b = rows.len();
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut out = Array2::zeros((b, d));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&r[..]));
    }
    out
}

/// Mean row of a matrix (used by attention-style diagnostics).
pub fn mean_row(m: &Array2<f64>) -> ndarray::Array1<f64> {
    m.mean_axis(Axis(0)).expect("non-empty")
}
