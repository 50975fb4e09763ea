//! Staged backbones with four feature taps at strides 4/8/16/32 (or as
//! configured): a small conv-net for desk runs and a resnet-50-like
//! bottleneck trunk. Both run under group normalization so key-encoder
//! statistics stay batch-independent on a single device.

use super::nn::{
    relu, relu_backward, Conv2d, ConvCache, GroupNorm, GroupNormCache, MaxPool2d, MaxPoolCache,
};
use super::{EncoderArch, EncoderConfig, StageFeatures};
use crate::error::{DetcoError, Result};
use ndarray::{Array4, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;

// conv -> group norm -> relu
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

pub struct ConvUnitCache {
    conv: ConvCache,
    norm: GroupNormCache,
    out: Array4<f64>, // post-relu, for the relu mask
}

impl ConvUnit {
    fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvUnit {
            conv: Conv2d::new(c_in, c_out, kernel, stride, pad, rng),
            norm: GroupNorm::new(c_out, groups),
        }
    }

    fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvUnitCache) {
        let (c, conv_cache) = self.conv.forward(x);
        let (n, norm_cache) = self.norm.forward(&c);
        let out = relu(&n);
        (
            out.clone(),
            ConvUnitCache {
                conv: conv_cache,
                norm: norm_cache,
                out,
            },
        )
    }

    fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        relu(&self.norm.infer(&self.conv.infer(x)))
    }

    fn backward(&mut self, cache: &ConvUnitCache, dy: &Array4<f64>) -> Array4<f64> {
        let d = relu_backward(&cache.out, dy);
        let d = self.norm.backward(&cache.norm, &d);
        self.conv.backward(&cache.conv, &d)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, f64>)) {
        f(format!("{prefix}.conv.w"), self.conv.w.view().into_dyn());
        f(format!("{prefix}.conv.b"), self.conv.b.view().into_dyn());
        f(format!("{prefix}.norm.gamma"), self.norm.gamma.view().into_dyn());
        f(format!("{prefix}.norm.beta"), self.norm.beta.view().into_dyn());
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        f(format!("{prefix}.conv.w"), self.conv.w.view_mut().into_dyn());
        f(format!("{prefix}.conv.b"), self.conv.b.view_mut().into_dyn());
        f(
            format!("{prefix}.norm.gamma"),
            self.norm.gamma.view_mut().into_dyn(),
        );
        f(
            format!("{prefix}.norm.beta"),
            self.norm.beta.view_mut().into_dyn(),
        );
    }

    fn visit_train(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>, bool),
    ) {
        f(
            format!("{prefix}.conv.w"),
            self.conv.w.view_mut().into_dyn(),
            self.conv.gw.view().into_dyn(),
            self.conv.touched,
        );
        f(
            format!("{prefix}.conv.b"),
            self.conv.b.view_mut().into_dyn(),
            self.conv.gb.view().into_dyn(),
            self.conv.touched,
        );
        f(
            format!("{prefix}.norm.gamma"),
            self.norm.gamma.view_mut().into_dyn(),
            self.norm.ggamma.view().into_dyn(),
            self.norm.touched,
        );
        f(
            format!("{prefix}.norm.beta"),
            self.norm.beta.view_mut().into_dyn(),
            self.norm.gbeta.view().into_dyn(),
            self.norm.touched,
        );
    }

    fn zero_grads(&mut self) {
        self.conv.zero_grads();
        self.norm.zero_grads();
    }
}

// ---------------------------------------------------------------------------
// Toy conv stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ToyStage {
    units: Vec<ConvUnit>,
}

impl ToyStage {
    /// `ratio` stride-2 halvings (as `log2(ratio)` downsampling convs)
    /// followed by one refining conv.
    fn new(c_in: usize, c_out: usize, ratio: usize, rng: &mut ChaCha8Rng) -> Self {
        let groups = super::nn::default_groups(c_out);
        let halvings = ratio.trailing_zeros() as usize;
        let mut units = Vec::new();
        let mut prev = c_in;
        for _ in 0..halvings {
            units.push(ConvUnit::new(prev, c_out, 3, 2, 1, groups, rng));
            prev = c_out;
        }
        units.push(ConvUnit::new(prev, c_out, 3, 1, 1, groups, rng));
        ToyStage { units }
    }
}

// ---------------------------------------------------------------------------
// Resnet bottleneck stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: ConvUnit,          // 1x1 reduce
    conv2: ConvUnit,          // 3x3 (carries the stride)
    conv3: Conv2d,            // 1x1 expand
    norm3: GroupNorm,
    down: Option<(Conv2d, GroupNorm)>,
}

struct BottleneckCache {
    c1: ConvUnitCache,
    c2: ConvUnitCache,
    c3: ConvCache,
    n3: GroupNormCache,
    down: Option<(ConvCache, GroupNormCache)>,
    out: Array4<f64>,
}

impl Bottleneck {
    fn new(c_in: usize, c_mid: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let gm = super::nn::default_groups(c_mid);
        let go = super::nn::default_groups(c_out);
        let down = if stride != 1 || c_in != c_out {
            Some((
                Conv2d::new(c_in, c_out, 1, stride, 0, rng),
                GroupNorm::new(c_out, go),
            ))
        } else {
            None
        };
        Bottleneck {
            conv1: ConvUnit::new(c_in, c_mid, 1, 1, 0, gm, rng),
            conv2: ConvUnit::new(c_mid, c_mid, 3, stride, 1, gm, rng),
            conv3: Conv2d::new(c_mid, c_out, 1, 1, 0, rng),
            norm3: GroupNorm::new(c_out, go),
            down,
        }
    }

    fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, BottleneckCache) {
        let (h1, c1) = self.conv1.forward(x);
        let (h2, c2) = self.conv2.forward(&h1);
        let (h3, c3) = self.conv3.forward(&h2);
        let (h3n, n3) = self.norm3.forward(&h3);
        let (shortcut, down_cache) = match &self.down {
            Some((conv, norm)) => {
                let (s, cc) = conv.forward(x);
                let (sn, nc) = norm.forward(&s);
                (sn, Some((cc, nc)))
            }
            None => (x.clone(), None),
        };
        let out = relu(&(h3n + &shortcut));
        (
            out.clone(),
            BottleneckCache {
                c1,
                c2,
                c3,
                n3,
                down: down_cache,
                out,
            },
        )
    }

    fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let h = self.conv2.infer(&self.conv1.infer(x));
        let main = self.norm3.infer(&self.conv3.infer(&h));
        let shortcut = match &self.down {
            Some((conv, norm)) => norm.infer(&conv.infer(x)),
            None => x.clone(),
        };
        relu(&(main + &shortcut))
    }

    fn backward(&mut self, cache: &BottleneckCache, dy: &Array4<f64>) -> Array4<f64> {
        let g = relu_backward(&cache.out, dy);
        let d3 = self.norm3.backward(&cache.n3, &g);
        let d2 = self.conv3.backward(&cache.c3, &d3);
        let d1 = self.conv2.backward(&cache.c2, &d2);
        let mut dx = self.conv1.backward(&cache.c1, &d1);
        match (&mut self.down, &cache.down) {
            (Some((conv, norm)), Some((cc, nc))) => {
                let ds = norm.backward(nc, &g);
                dx += &conv.backward(cc, &ds);
            }
            (None, None) => dx += &g,
            _ => unreachable!("cache shape mismatch"),
        }
        dx
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, f64>)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        f(format!("{prefix}.conv3.w"), self.conv3.w.view().into_dyn());
        f(format!("{prefix}.conv3.b"), self.conv3.b.view().into_dyn());
        f(format!("{prefix}.norm3.gamma"), self.norm3.gamma.view().into_dyn());
        f(format!("{prefix}.norm3.beta"), self.norm3.beta.view().into_dyn());
        if let Some((conv, norm)) = &self.down {
            f(format!("{prefix}.down.conv.w"), conv.w.view().into_dyn());
            f(format!("{prefix}.down.conv.b"), conv.b.view().into_dyn());
            f(format!("{prefix}.down.norm.gamma"), norm.gamma.view().into_dyn());
            f(format!("{prefix}.down.norm.beta"), norm.beta.view().into_dyn());
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        self.conv1.visit_params_mut(&format!("{prefix}.conv1"), f);
        self.conv2.visit_params_mut(&format!("{prefix}.conv2"), f);
        f(format!("{prefix}.conv3.w"), self.conv3.w.view_mut().into_dyn());
        f(format!("{prefix}.conv3.b"), self.conv3.b.view_mut().into_dyn());
        f(
            format!("{prefix}.norm3.gamma"),
            self.norm3.gamma.view_mut().into_dyn(),
        );
        f(
            format!("{prefix}.norm3.beta"),
            self.norm3.beta.view_mut().into_dyn(),
        );
        if let Some((conv, norm)) = &mut self.down {
            f(format!("{prefix}.down.conv.w"), conv.w.view_mut().into_dyn());
            f(format!("{prefix}.down.conv.b"), conv.b.view_mut().into_dyn());
            f(
                format!("{prefix}.down.norm.gamma"),
                norm.gamma.view_mut().into_dyn(),
            );
            f(
                format!("{prefix}.down.norm.beta"),
                norm.beta.view_mut().into_dyn(),
            );
        }
    }

    fn visit_train(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>, bool),
    ) {
        self.conv1.visit_train(&format!("{prefix}.conv1"), f);
        self.conv2.visit_train(&format!("{prefix}.conv2"), f);
        f(
            format!("{prefix}.conv3.w"),
            self.conv3.w.view_mut().into_dyn(),
            self.conv3.gw.view().into_dyn(),
            self.conv3.touched,
        );
        f(
            format!("{prefix}.conv3.b"),
            self.conv3.b.view_mut().into_dyn(),
            self.conv3.gb.view().into_dyn(),
            self.conv3.touched,
        );
        f(
            format!("{prefix}.norm3.gamma"),
            self.norm3.gamma.view_mut().into_dyn(),
            self.norm3.ggamma.view().into_dyn(),
            self.norm3.touched,
        );
        f(
            format!("{prefix}.norm3.beta"),
            self.norm3.beta.view_mut().into_dyn(),
            self.norm3.gbeta.view().into_dyn(),
            self.norm3.touched,
        );
        if let Some((conv, norm)) = &mut self.down {
            f(
                format!("{prefix}.down.conv.w"),
                conv.w.view_mut().into_dyn(),
                conv.gw.view().into_dyn(),
                conv.touched,
            );
            f(
                format!("{prefix}.down.conv.b"),
                conv.b.view_mut().into_dyn(),
                conv.gb.view().into_dyn(),
                conv.touched,
            );
            f(
                format!("{prefix}.down.norm.gamma"),
                norm.gamma.view_mut().into_dyn(),
                norm.ggamma.view().into_dyn(),
                norm.touched,
            );
            f(
                format!("{prefix}.down.norm.beta"),
                norm.beta.view_mut().into_dyn(),
                norm.gbeta.view().into_dyn(),
                norm.touched,
            );
        }
    }

    fn zero_grads(&mut self) {
        self.conv1.zero_grads();
        self.conv2.zero_grads();
        self.conv3.zero_grads();
        self.norm3.zero_grads();
        if let Some((conv, norm)) = &mut self.down {
            conv.zero_grads();
            norm.zero_grads();
        }
    }
}

// ---------------------------------------------------------------------------
// The staged encoder
// ---------------------------------------------------------------------------

#[allow(clippy::large_enum_variant)]
enum Body {
    Toy(Vec<ToyStage>),
    Resnet {
        stem: ConvUnit,
        pool: MaxPool2d,
        stages: Vec<Vec<Bottleneck>>,
    },
}

pub struct StagedEncoder {
    body: Body,
    max_stride: usize,
}

/// Opaque forward-pass activations handed back to [`StagedEncoder::backward`].
pub struct EncoderCache(CacheBody);

enum CacheBody {
    Toy(Vec<Vec<ConvUnitCache>>),
    Resnet {
        stem: ConvUnitCache,
        pool: MaxPoolCache,
        stages: Vec<Vec<BottleneckCache>>,
    },
}

impl StagedEncoder {
    pub fn new(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let body = match cfg.arch {
            EncoderArch::ToyCnn => {
                let mut stages = Vec::with_capacity(4);
                let mut prev_c = 3;
                let mut prev_s = 1;
                for i in 0..4 {
                    let ratio = cfg.stage_strides[i] / prev_s;
                    stages.push(ToyStage::new(prev_c, cfg.stage_channels[i], ratio, rng));
                    prev_c = cfg.stage_channels[i];
                    prev_s = cfg.stage_strides[i];
                }
                Body::Toy(stages)
            }
            EncoderArch::Resnet50Like => {
                let mids = [64usize, 128, 256, 512];
                let blocks = [3usize, 4, 6, 3];
                let first_strides = [1usize, 2, 2, 2];
                let stem = ConvUnit::new(3, 64, 7, 2, 3, super::nn::default_groups(64), rng);
                let mut stages = Vec::with_capacity(4);
                let mut prev_c = 64;
                for i in 0..4 {
                    let mut stage = Vec::with_capacity(blocks[i]);
                    for b in 0..blocks[i] {
                        let stride = if b == 0 { first_strides[i] } else { 1 };
                        let c_in = if b == 0 { prev_c } else { cfg.stage_channels[i] };
                        stage.push(Bottleneck::new(
                            c_in,
                            mids[i],
                            cfg.stage_channels[i],
                            stride,
                            rng,
                        ));
                    }
                    prev_c = cfg.stage_channels[i];
                    stages.push(stage);
                }
                Body::Resnet {
                    stem,
                    pool: MaxPool2d::new(3, 2, 1),
                    stages,
                }
            }
        };
        Ok(StagedEncoder {
            body,
            max_stride: cfg.stage_strides[3],
        })
    }

    pub fn check_input(&self, images: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        if c != 3 {
            return Err(DetcoError::Input(format!(
                "encoder expects 3 input channels, got {c}"
            )));
        }
        if h != w {
            return Err(DetcoError::Input(format!(
                "encoder expects square inputs, got {h}x{w}"
            )));
        }
        if h % self.max_stride != 0 {
            return Err(DetcoError::Config(format!(
                "input side {h} is not divisible by the maximum stage stride {}",
                self.max_stride
            )));
        }
        Ok(())
    }

    pub fn infer(&self, images: &Array4<f64>) -> Result<StageFeatures> {
        self.check_input(images)?;
        let maps = match &self.body {
            Body::Toy(stages) => {
                let mut x = images.clone();
                let mut maps = Vec::with_capacity(4);
                for stage in stages {
                    for unit in &stage.units {
                        x = unit.infer(&x);
                    }
                    maps.push(x.clone());
                }
                maps
            }
            Body::Resnet { stem, pool, stages } => {
                let mut x = pool.infer(&stem.infer(images));
                let mut maps = Vec::with_capacity(4);
                for stage in stages {
                    for block in stage {
                        x = block.infer(&x);
                    }
                    maps.push(x.clone());
                }
                maps
            }
        };
        StageFeatures::from_vec(maps)
    }

    pub fn forward_t(&self, images: &Array4<f64>) -> Result<(StageFeatures, EncoderCache)> {
        self.check_input(images)?;
        match &self.body {
            Body::Toy(stages) => {
                let mut x = images.clone();
                let mut maps = Vec::with_capacity(4);
                let mut caches = Vec::with_capacity(4);
                for stage in stages {
                    let mut stage_caches = Vec::with_capacity(stage.units.len());
                    for unit in &stage.units {
                        let (y, c) = unit.forward(&x);
                        x = y;
                        stage_caches.push(c);
                    }
                    maps.push(x.clone());
                    caches.push(stage_caches);
                }
                Ok((
                    StageFeatures::from_vec(maps)?,
                    EncoderCache(CacheBody::Toy(caches)),
                ))
            }
            Body::Resnet { stem, pool, stages } => {
                let (s, stem_cache) = stem.forward(images);
                let (mut x, pool_cache) = pool.forward(&s);
                let mut maps = Vec::with_capacity(4);
                let mut caches = Vec::with_capacity(4);
                for stage in stages {
                    let mut stage_caches = Vec::with_capacity(stage.len());
                    for block in stage {
                        let (y, c) = block.forward(&x);
                        x = y;
                        stage_caches.push(c);
                    }
                    maps.push(x.clone());
                    caches.push(stage_caches);
                }
                Ok((
                    StageFeatures::from_vec(maps)?,
                    EncoderCache(CacheBody::Resnet {
                        stem: stem_cache,
                        pool: pool_cache,
                        stages: caches,
                    }),
                ))
            }
        }
    }

    /// Backpropagate the four tap gradients. Deeper-stage gradients flow
    /// through shallower stages and accumulate with their tap gradients.
    pub fn backward(&mut self, cache: &EncoderCache, tap_grads: [Array4<f64>; 4]) {
        match (&mut self.body, &cache.0) {
            (Body::Toy(stages), CacheBody::Toy(caches)) => {
                let mut upstream: Option<Array4<f64>> = None;
                let [g2, g3, g4, g5] = tap_grads;
                let mut taps = [Some(g2), Some(g3), Some(g4), Some(g5)];
                for i in (0..4).rev() {
                    let mut d = taps[i].take().expect("tap grad");
                    if let Some(u) = upstream.take() {
                        d += &u;
                    }
                    for (unit, ucache) in stages[i].units.iter_mut().zip(&caches[i]).rev() {
                        d = unit.backward(ucache, &d);
                    }
                    upstream = Some(d);
                }
            }
            (
                Body::Resnet { stem, pool, stages },
                CacheBody::Resnet {
                    stem: stem_cache,
                    pool: pool_cache,
                    stages: caches,
                },
            ) => {
                let mut upstream: Option<Array4<f64>> = None;
                let [g2, g3, g4, g5] = tap_grads;
                let mut taps = [Some(g2), Some(g3), Some(g4), Some(g5)];
                for i in (0..4).rev() {
                    let mut d = taps[i].take().expect("tap grad");
                    if let Some(u) = upstream.take() {
                        d += &u;
                    }
                    for (block, bcache) in stages[i].iter_mut().zip(&caches[i]).rev() {
                        d = block.backward(bcache, &d);
                    }
                    upstream = Some(d);
                }
                let d = pool.backward(pool_cache, &upstream.expect("stage grad"));
                stem.backward(stem_cache, &d);
            }
            _ => unreachable!("encoder cache kind mismatch"),
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, ArrayViewD<'_, f64>)) {
        match &self.body {
            Body::Toy(stages) => {
                for (i, stage) in stages.iter().enumerate() {
                    for (u, unit) in stage.units.iter().enumerate() {
                        unit.visit_params(&format!("encoder.stage{}.{u}", i + 2), f);
                    }
                }
            }
            Body::Resnet { stem, stages, .. } => {
                stem.visit_params("encoder.stem", f);
                for (i, stage) in stages.iter().enumerate() {
                    for (b, block) in stage.iter().enumerate() {
                        block.visit_params(&format!("encoder.stage{}.{b}", i + 2), f);
                    }
                }
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        match &mut self.body {
            Body::Toy(stages) => {
                for (i, stage) in stages.iter_mut().enumerate() {
                    for (u, unit) in stage.units.iter_mut().enumerate() {
                        unit.visit_params_mut(&format!("encoder.stage{}.{u}", i + 2), f);
                    }
                }
            }
            Body::Resnet { stem, stages, .. } => {
                stem.visit_params_mut("encoder.stem", f);
                for (i, stage) in stages.iter_mut().enumerate() {
                    for (b, block) in stage.iter_mut().enumerate() {
                        block.visit_params_mut(&format!("encoder.stage{}.{b}", i + 2), f);
                    }
                }
            }
        }
    }

    pub fn visit_train(
        &mut self,
        f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>, bool),
    ) {
        match &mut self.body {
            Body::Toy(stages) => {
                for (i, stage) in stages.iter_mut().enumerate() {
                    for (u, unit) in stage.units.iter_mut().enumerate() {
                        unit.visit_train(&format!("encoder.stage{}.{u}", i + 2), f);
                    }
                }
            }
            Body::Resnet { stem, stages, .. } => {
                stem.visit_train("encoder.stem", f);
                for (i, stage) in stages.iter_mut().enumerate() {
                    for (b, block) in stage.iter_mut().enumerate() {
                        block.visit_train(&format!("encoder.stage{}.{b}", i + 2), f);
                    }
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        match &mut self.body {
            Body::Toy(stages) => {
                for stage in stages {
                    for unit in &mut stage.units {
                        unit.zero_grads();
                    }
                }
            }
            Body::Resnet { stem, stages, .. } => {
                stem.zero_grads();
                for stage in stages {
                    for block in stage {
                        block.zero_grads();
                    }
                }
            }
        }
    }
}

/// Expected spatial side of stage `i` (0-based) for a given input side.
pub fn expected_side(cfg: &EncoderConfig, input_side: usize, stage: usize) -> usize {
    input_side / cfg.stage_strides[stage]
}
