//! Staged encoder, per-stage projection heads and the momentum parameter
//! machinery.
//!
//! A [`DetcoModel`] owns one encoder plus four global and four local heads.
//! Training keeps two instances: the query model (gradient updates) and the
//! key model, whose parameters only ever move through [`momentum_update`].

pub mod encoder;
pub mod heads;
pub mod nn;

use crate::error::{DetcoError, Result};
use crate::rng::stream;
use encoder::{EncoderCache, StagedEncoder};
use heads::{HeadCache, ProjectionHead};
use ndarray::{Array2, Array4, ArrayD, ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const NUM_STAGES: usize = 4;
pub const PATCHES_PER_SET: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderArch {
    #[serde(rename = "resnet50-like")]
    Resnet50Like,
    #[serde(rename = "toy-cnn")]
    ToyCnn,
}

/// Encoder and head geometry.
///
/// The default is the desk profile: a toy conv-net with strides 2/4/8/16 so
/// the 16-pixel jigsaw patches still satisfy the divisibility contract.
/// `toy()` restores the full-scale stride layout 4/8/16/32 and
/// `resnet50_like()` the bottleneck trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub arch: EncoderArch,
    pub stage_channels: [usize; 4],
    pub stage_strides: [usize; 4],
    pub embed_dim: usize,
    /// Hidden width of the projection heads; `None` means "same as the
    /// pooled input dimension" per head.
    pub head_hidden_dim: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy_desk()
    }
}

impl EncoderConfig {
    /// Toy conv-net at the full-scale stride layout.
    pub fn toy() -> Self {
        EncoderConfig {
            arch: EncoderArch::ToyCnn,
            stage_channels: [8, 16, 32, 64],
            stage_strides: [4, 8, 16, 32],
            embed_dim: 128,
            head_hidden_dim: None,
        }
    }

    /// Toy conv-net with halved strides, compatible with 16px patches.
    pub fn toy_desk() -> Self {
        EncoderConfig {
            stage_strides: [2, 4, 8, 16],
            ..Self::toy()
        }
    }

    pub fn resnet50_like() -> Self {
        EncoderConfig {
            arch: EncoderArch::Resnet50Like,
            stage_channels: [256, 512, 1024, 2048],
            stage_strides: [4, 8, 16, 32],
            embed_dim: 128,
            head_hidden_dim: None,
        }
    }

    pub fn max_stride(&self) -> usize {
        self.stage_strides[3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(DetcoError::Config(format!(
                "model.embed_dim must be at least 2, got {}",
                self.embed_dim
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(DetcoError::Config(
                "model.stage_channels must all be positive".into(),
            ));
        }
        if let Some(h) = self.head_hidden_dim {
            if h == 0 {
                return Err(DetcoError::Config(
                    "model.head_hidden_dim must be positive when set".into(),
                ));
            }
        }
        let s = &self.stage_strides;
        if !(s[0] < s[1] && s[1] < s[2] && s[2] < s[3]) {
            return Err(DetcoError::Config(format!(
                "model.stage_strides must be strictly increasing, got {s:?}"
            )));
        }
        match self.arch {
            EncoderArch::ToyCnn => {
                let mut prev = 1usize;
                for (i, &st) in s.iter().enumerate() {
                    if st % prev != 0 {
                        return Err(DetcoError::Config(format!(
                            "model.stage_strides[{i}] = {st} is not a multiple of the previous stride {prev}"
                        )));
                    }
                    let ratio = st / prev;
                    if ratio < 2 || !ratio.is_power_of_two() {
                        return Err(DetcoError::Config(format!(
                            "toy-cnn stage downsampling ratios must be powers of two >= 2, stage {i} has {ratio}"
                        )));
                    }
                    prev = st;
                }
            }
            EncoderArch::Resnet50Like => {
                if self.stage_strides != [4, 8, 16, 32] {
                    return Err(DetcoError::Config(
                        "model.stage_strides must be [4, 8, 16, 32] for resnet50-like".into(),
                    ));
                }
                if self.stage_channels != [256, 512, 1024, 2048] {
                    return Err(DetcoError::Config(
                        "model.stage_channels must be [256, 512, 1024, 2048] for resnet50-like"
                            .into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The four tapped feature maps, shallow to deep (the Res2..Res5 analogs).
#[derive(Debug, Clone, PartialEq)]
pub struct StageFeatures {
    maps: [Array4<f64>; 4],
}

impl StageFeatures {
    pub fn from_vec(maps: Vec<Array4<f64>>) -> Result<Self> {
        if maps.len() != NUM_STAGES {
            return Err(DetcoError::Input(format!(
                "expected {NUM_STAGES} stage maps, got {}",
                maps.len()
            )));
        }
        let b = maps[0].dim().0;
        if maps.iter().any(|m| m.dim().0 != b) {
            return Err(DetcoError::Input(
                "stage maps disagree on batch size".into(),
            ));
        }
        let mut it = maps.into_iter();
        Ok(StageFeatures {
            maps: [
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
            ],
        })
    }

    /// Stage by index 0..4 (stage 0 is the stride-4 tap / Res2 analog).
    pub fn stage(&self, i: usize) -> &Array4<f64> {
        &self.maps[i]
    }

    pub fn batch(&self) -> usize {
        self.maps[0].dim().0
    }
}

/// Per-stage unit-norm embeddings for one branch pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub global: [Array2<f64>; 4],
    pub local: [Array2<f64>; 4],
}

// ---------------------------------------------------------------------------
// ParameterSet and momentum update
// ---------------------------------------------------------------------------

/// Named flat map of parameter arrays; iteration order is the sorted name
/// order, which keeps every consumer deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Check name-for-name shape alignment, listing every mismatch.
    pub fn check_aligned(&self, other: &ParameterSet) -> Result<()> {
        let mut problems = Vec::new();
        for (name, a) in &self.map {
            match other.map.get(name) {
                None => problems.push(format!("missing in other: {name}")),
                Some(b) if a.shape() != b.shape() => problems.push(format!(
                    "shape mismatch at {name}: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )),
                _ => {}
            }
        }
        for name in other.map.keys() {
            if !self.map.contains_key(name) {
                problems.push(format!("missing in self: {name}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DetcoError::Structure(problems.join("; ")))
        }
    }

    /// Largest elementwise absolute difference across all arrays.
    pub fn max_abs_diff(&self, other: &ParameterSet) -> Result<f64> {
        self.check_aligned(other)?;
        let mut worst = 0.0f64;
        for (name, a) in &self.map {
            let b = &other.map[name];
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
        Ok(worst)
    }
}

/// One EMA step: `key' = m * key + (1 - m) * query`, elementwise.
pub fn momentum_update(key: &ParameterSet, query: &ParameterSet, m: f64) -> Result<ParameterSet> {
    if !(0.0..=1.0).contains(&m) {
        return Err(DetcoError::Input(format!(
            "momentum m must lie in [0, 1], got {m}"
        )));
    }
    key.check_aligned(query)?;
    let mut out = ParameterSet::new();
    for (name, k) in key.iter() {
        let q = &query.map[name];
        let mut merged = k.clone();
        merged.zip_mut_with(q, |kv, &qv| *kv = m * *kv + (1.0 - m) * qv);
        out.insert(name.clone(), merged);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// The full model
// ---------------------------------------------------------------------------

pub struct DetcoModel {
    pub config: EncoderConfig,
    encoder: StagedEncoder,
    global_heads: Vec<ProjectionHead>,
    local_heads: Vec<ProjectionHead>,
}

pub struct GlobalTrainCache {
    enc: EncoderCache,
    spatial: [(usize, usize); 4],
    heads: Vec<HeadCache>,
    batch: usize,
}

pub struct LocalTrainCache {
    enc: EncoderCache,
    spatial: [(usize, usize); 4],
    heads: Vec<HeadCache>,
    batch: usize,
}

impl DetcoModel {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, 0xD7C0);
        let encoder = StagedEncoder::new(config, &mut rng)?;
        let d = config.embed_dim;
        let mut global_heads = Vec::with_capacity(4);
        let mut local_heads = Vec::with_capacity(4);
        for i in 0..4 {
            let c = config.stage_channels[i];
            global_heads.push(ProjectionHead::new(
                c,
                config.head_hidden_dim.unwrap_or(c),
                d,
                &mut rng,
            ));
        }
        for i in 0..4 {
            let c = config.stage_channels[i] * PATCHES_PER_SET;
            local_heads.push(ProjectionHead::new(
                c,
                config.head_hidden_dim.unwrap_or(c),
                d,
                &mut rng,
            ));
        }
        Ok(DetcoModel {
            config: config.clone(),
            encoder,
            global_heads,
            local_heads,
        })
    }

    /// Forward the backbone only (no gradient bookkeeping).
    pub fn encode_stages(&self, images: &Array4<f64>) -> Result<StageFeatures> {
        self.encoder.infer(images)
    }

    /// Pool each stage map and run the per-stage global heads.
    pub fn project_global(&self, feats: &StageFeatures) -> Result<[Array2<f64>; 4]> {
        let mut out = Vec::with_capacity(4);
        for i in 0..4 {
            let pooled = nn::global_avg_pool(feats.stage(i));
            out.push(self.global_heads[i].infer(&pooled)?);
        }
        Ok(to_array4x(out))
    }

    /// Pool each of the nine per-patch feature sets, concatenate in the
    /// shuffled patch order and run the per-stage local heads.
    pub fn project_local(&self, patch_feats: &[StageFeatures]) -> Result<[Array2<f64>; 4]> {
        let concat = pooled_patch_concat(patch_feats)?;
        let mut out = Vec::with_capacity(4);
        for (i, c) in concat.into_iter().enumerate() {
            out.push(self.local_heads[i].infer(&c)?);
        }
        Ok(to_array4x(out))
    }

    pub fn embed_global(&self, images: &Array4<f64>) -> Result<[Array2<f64>; 4]> {
        let feats = self.encode_stages(images)?;
        self.project_global(&feats)
    }

    /// No-grad local embeddings from a `(B*9, 3, s, s)` patch batch laid out
    /// sample-major (sample b's patches at rows `b*9 .. b*9+9`, in shuffled
    /// order).
    pub fn embed_local(&self, patch_batch: &Array4<f64>, batch: usize) -> Result<[Array2<f64>; 4]> {
        check_patch_batch(patch_batch, batch)?;
        let feats = self.encode_stages(patch_batch)?;
        let mut out = Vec::with_capacity(4);
        for i in 0..4 {
            let pooled = nn::global_avg_pool(feats.stage(i)); // (B*9, C)
            let concat = regroup_patches(&pooled, batch);
            out.push(self.local_heads[i].infer(&concat)?);
        }
        Ok(to_array4x(out))
    }

    pub fn forward_global_train(
        &self,
        images: &Array4<f64>,
    ) -> Result<([Array2<f64>; 4], GlobalTrainCache)> {
        let (feats, enc) = self.encoder.forward_t(images)?;
        let batch = feats.batch();
        let mut heads = Vec::with_capacity(4);
        let mut out = Vec::with_capacity(4);
        let mut spatial = [(0usize, 0usize); 4];
        for i in 0..4 {
            let m = feats.stage(i);
            spatial[i] = (m.dim().2, m.dim().3);
            let pooled = nn::global_avg_pool(m);
            let (y, hc) = self.global_heads[i].forward(&pooled)?;
            heads.push(hc);
            out.push(y);
        }
        Ok((
            to_array4x(out),
            GlobalTrainCache {
                enc,
                spatial,
                heads,
                batch,
            },
        ))
    }

    pub fn backward_global(&mut self, cache: &GlobalTrainCache, d_embeds: [Option<Array2<f64>>; 4]) {
        let mut taps = Vec::with_capacity(4);
        for (i, d) in d_embeds.into_iter().enumerate() {
            let (h, w) = cache.spatial[i];
            match d {
                Some(d) => {
                    let d_pooled = self.global_heads[i].backward(&cache.heads[i], &d);
                    taps.push(nn::global_avg_pool_backward(&d_pooled, h, w));
                }
                None => {
                    let c = self.config.stage_channels[i];
                    taps.push(Array4::zeros((cache.batch, c, h, w)));
                }
            }
        }
        let mut it = taps.into_iter();
        self.encoder.backward(
            &cache.enc,
            [
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
            ],
        );
    }

    pub fn forward_local_train(
        &self,
        patch_batch: &Array4<f64>,
        batch: usize,
    ) -> Result<([Array2<f64>; 4], LocalTrainCache)> {
        check_patch_batch(patch_batch, batch)?;
        let (feats, enc) = self.encoder.forward_t(patch_batch)?;
        let mut heads = Vec::with_capacity(4);
        let mut out = Vec::with_capacity(4);
        let mut spatial = [(0usize, 0usize); 4];
        for i in 0..4 {
            let m = feats.stage(i);
            spatial[i] = (m.dim().2, m.dim().3);
            let pooled = nn::global_avg_pool(m);
            let concat = regroup_patches(&pooled, batch);
            let (y, hc) = self.local_heads[i].forward(&concat)?;
            heads.push(hc);
            out.push(y);
        }
        Ok((
            to_array4x(out),
            LocalTrainCache {
                enc,
                spatial,
                heads,
                batch,
            },
        ))
    }

    pub fn backward_local(&mut self, cache: &LocalTrainCache, d_embeds: [Option<Array2<f64>>; 4]) {
        let mut taps = Vec::with_capacity(4);
        for (i, d) in d_embeds.into_iter().enumerate() {
            let (h, w) = cache.spatial[i];
            let c = self.config.stage_channels[i];
            match d {
                Some(d) => {
                    let d_concat = self.local_heads[i].backward(&cache.heads[i], &d);
                    let d_pooled = split_patches(&d_concat, cache.batch, c);
                    taps.push(nn::global_avg_pool_backward(&d_pooled, h, w));
                }
                None => taps.push(Array4::zeros((cache.batch * PATCHES_PER_SET, c, h, w))),
            }
        }
        let mut it = taps.into_iter();
        self.encoder.backward(
            &cache.enc,
            [
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
            ],
        );
    }

    pub fn export_params(&self) -> ParameterSet {
        let mut set = ParameterSet::new();
        self.visit_params(&mut |name, view| {
            set.insert(name, view.to_owned());
        });
        set
    }

    pub fn import_params(&mut self, params: &ParameterSet) -> Result<()> {
        // Validate against the current structure first, then assign.
        let current = self.export_params();
        current.check_aligned(params)?;
        self.visit_params_mut(&mut |name, mut view| {
            let src = params.get(&name).expect("alignment checked");
            view.assign(src);
        });
        Ok(())
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, ArrayViewD<'_, f64>)) {
        self.encoder.visit_params(f);
        for (i, head) in self.global_heads.iter().enumerate() {
            head.visit_params(&format!("head.global{}", i + 2), f);
        }
        for (i, head) in self.local_heads.iter().enumerate() {
            head.visit_params(&format!("head.local{}", i + 2), f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        self.encoder.visit_params_mut(f);
        for (i, head) in self.global_heads.iter_mut().enumerate() {
            head.visit_params_mut(&format!("head.global{}", i + 2), f);
        }
        for (i, head) in self.local_heads.iter_mut().enumerate() {
            head.visit_params_mut(&format!("head.local{}", i + 2), f);
        }
    }

    /// Visit `(name, param, grad, touched_this_step)` for the optimizer.
    pub fn visit_train(
        &mut self,
        f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>, bool),
    ) {
        self.encoder.visit_train(f);
        for (i, head) in self.global_heads.iter_mut().enumerate() {
            head.visit_train(&format!("head.global{}", i + 2), f);
        }
        for (i, head) in self.local_heads.iter_mut().enumerate() {
            head.visit_train(&format!("head.local{}", i + 2), f);
        }
    }

    pub fn zero_grads(&mut self) {
        self.encoder.zero_grads();
        for head in &mut self.global_heads {
            head.zero_grads();
        }
        for head in &mut self.local_heads {
            head.zero_grads();
        }
    }
}

fn to_array4x(mut v: Vec<Array2<f64>>) -> [Array2<f64>; 4] {
    assert_eq!(v.len(), 4);
    let d = v.pop().unwrap();
    let c = v.pop().unwrap();
    let b = v.pop().unwrap();
    let a = v.pop().unwrap();
    [a, b, c, d]
}

fn check_patch_batch(patch_batch: &Array4<f64>, batch: usize) -> Result<()> {
    let rows = patch_batch.dim().0;
    if rows != batch * PATCHES_PER_SET {
        return Err(DetcoError::Input(format!(
            "patch batch has {rows} rows, expected {batch} x {PATCHES_PER_SET}"
        )));
    }
    Ok(())
}

/// `(B*9, C)` pooled patch rows -> `(B, 9*C)` concatenated in patch order.
fn regroup_patches(pooled: &Array2<f64>, batch: usize) -> Array2<f64> {
    let c = pooled.dim().1;
    pooled
        .to_owned()
        .into_shape((batch, PATCHES_PER_SET * c))
        .expect("contiguous regroup")
}

/// Inverse of [`regroup_patches`] for gradients.
fn split_patches(d_concat: &Array2<f64>, batch: usize, c: usize) -> Array2<f64> {
    d_concat
        .to_owned()
        .into_shape((batch * PATCHES_PER_SET, c))
        .expect("contiguous split")
}

/// Pool each patch's stage maps and concatenate the nine pooled vectors per
/// stage, preserving the shuffled patch order. `patch_feats[j]` holds the
/// batched features of patch position `j`.
pub fn pooled_patch_concat(patch_feats: &[StageFeatures]) -> Result<[Array2<f64>; 4]> {
    if patch_feats.len() != PATCHES_PER_SET {
        return Err(DetcoError::Input(format!(
            "expected {PATCHES_PER_SET} patch feature sets, got {}",
            patch_feats.len()
        )));
    }
    let b = patch_feats[0].batch();
    if patch_feats.iter().any(|f| f.batch() != b) {
        return Err(DetcoError::Input(
            "patch feature sets disagree on batch size".into(),
        ));
    }
    let mut out = Vec::with_capacity(4);
    for stage in 0..4 {
        let pooled: Vec<Array2<f64>> = patch_feats
            .iter()
            .map(|f| nn::global_avg_pool(f.stage(stage)))
            .collect();
        let views: Vec<_> = pooled.iter().map(|p| p.view()).collect();
        let concat = ndarray::concatenate(ndarray::Axis(1), &views)
            .map_err(|e| DetcoError::Input(format!("concat failed: {e}")))?;
        out.push(concat);
    }
    Ok(to_array4x(out))
}
