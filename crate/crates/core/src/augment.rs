//! Seeded construction of the two global views and two jigsaw patch sets of a
//! source image.
//!
//! Every function here is a pure function of `(image, seed, config)`: the
//! same inputs produce bit-identical outputs, independent of call order or
//! thread. The global pipeline is random-resized-crop -> resize -> flip ->
//! color jitter -> grayscale -> blur -> rand-augment; the jigsaw pipeline is
//! area-bounded crop -> resize to the intermediate square -> flip/jitter/blur
//! -> 3x3 grid split -> uniform shuffle -> per-cell patch crop.

use crate::error::{DetcoError, Result};
use crate::image_ops::{self, SourceImage};
use crate::rng::{derive_seed, stream};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Sub-stream indices for the four views of a bundle.
const STREAM_GLOBAL_Q: u64 = 0;
const STREAM_GLOBAL_K: u64 = 1;
const STREAM_JIGSAW_Q: u64 = 2;
const STREAM_JIGSAW_K: u64 = 3;

/// Within a jigsaw view: pipeline draws vs. the shuffle draw. Keeping the
/// shuffle on its own stream makes the permutation of a seed predictable
/// without running the full pixel pipeline.
const STREAM_PIPELINE: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;

/// Geometry and distribution knobs of the augmentation pipelines.
///
/// `paper()` is the full-scale geometry (224 global side, 255 jigsaw
/// intermediate, 85 cells, 64 patches); `desk()` scales it down
/// proportionally (64 / 72 / 24 / 16) for CPU-sized runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub global_side: usize,
    pub jigsaw_intermediate_side: usize,
    pub jigsaw_cell_side: usize,
    pub patch_side: usize,
    /// Lower bound on the jigsaw crop as a fraction of source area.
    pub crop_area_min: f64,
    /// Area-fraction range of the global random resized crop.
    pub global_crop_scale: [f64; 2],
    /// Aspect-ratio range shared by both crop samplers.
    pub crop_aspect: [f64; 2],
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub jitter_saturation: f64,
    pub jitter_hue: f64,
    pub p_jitter: f64,
    pub p_grayscale: f64,
    pub p_blur: f64,
    pub p_flip: f64,
    pub blur_sigma: [f64; 2],
    /// Number of rand-augment ops applied to each global view.
    pub randaug_ops: usize,
    /// Rand-augment magnitude on the 0..=10 scale.
    pub randaug_magnitude: u8,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl AugmentConfig {
    pub fn paper() -> Self {
        AugmentConfig {
            global_side: 224,
            jigsaw_intermediate_side: 255,
            jigsaw_cell_side: 85,
            patch_side: 64,
            crop_area_min: 0.6,
            global_crop_scale: [0.2, 1.0],
            crop_aspect: [0.75, 4.0 / 3.0],
            jitter_brightness: 0.4,
            jitter_contrast: 0.4,
            jitter_saturation: 0.4,
            jitter_hue: 0.1,
            p_jitter: 0.8,
            p_grayscale: 0.2,
            p_blur: 0.5,
            p_flip: 0.5,
            blur_sigma: [0.1, 2.0],
            randaug_ops: 2,
            randaug_magnitude: 9,
        }
    }

    /// Proportionally scaled-down geometry for CPU runs.
    pub fn desk() -> Self {
        AugmentConfig {
            global_side: 64,
            jigsaw_intermediate_side: 72,
            jigsaw_cell_side: 24,
            patch_side: 16,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(DetcoError::Config(msg));
        if self.global_side == 0 || self.patch_side == 0 {
            return err("augment: view sides must be positive".into());
        }
        if self.jigsaw_intermediate_side != 3 * self.jigsaw_cell_side {
            return err(format!(
                "augment.jigsaw_intermediate_side ({}) must equal 3 * jigsaw_cell_side ({})",
                self.jigsaw_intermediate_side, self.jigsaw_cell_side
            ));
        }
        if self.patch_side > self.jigsaw_cell_side {
            return err(format!(
                "augment.patch_side ({}) must fit inside a grid cell ({})",
                self.patch_side, self.jigsaw_cell_side
            ));
        }
        if !(0.0 < self.crop_area_min && self.crop_area_min <= 1.0) {
            return err(format!(
                "augment.crop_area_min must be in (0, 1], got {}",
                self.crop_area_min
            ));
        }
        let [lo, hi] = self.global_crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return err(format!(
                "augment.global_crop_scale must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
            ));
        }
        let [alo, ahi] = self.crop_aspect;
        if !(0.0 < alo && alo <= ahi) {
            return err(format!(
                "augment.crop_aspect must satisfy 0 < lo <= hi, got [{alo}, {ahi}]"
            ));
        }
        for (name, p) in [
            ("p_jitter", self.p_jitter),
            ("p_grayscale", self.p_grayscale),
            ("p_blur", self.p_blur),
            ("p_flip", self.p_flip),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("augment.{name} must be a probability, got {p}"));
            }
        }
        if self.blur_sigma[0] <= 0.0 || self.blur_sigma[0] > self.blur_sigma[1] {
            return err(format!(
                "augment.blur_sigma must satisfy 0 < lo <= hi, got {:?}",
                self.blur_sigma
            ));
        }
        if self.randaug_magnitude > 10 {
            return err(format!(
                "augment.randaug_magnitude must be in 0..=10, got {}",
                self.randaug_magnitude
            ));
        }
        Ok(())
    }
}

/// One augmented whole-image view, `global_side` square.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalView {
    pub pixels: Array3<f64>,
}

/// Rectangle in intermediate-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridRect {
    pub y0: usize,
    pub x0: usize,
    pub side: usize,
}

impl GridRect {
    pub fn contains(&self, other: &GridRect) -> bool {
        other.y0 >= self.y0
            && other.x0 >= self.x0
            && other.y0 + other.side <= self.y0 + self.side
            && other.x0 + other.side <= self.x0 + self.side
    }
}

/// Nine shuffled patches plus the geometry that produced them.
///
/// `permutation[j]` is the source-grid cell shown at output position `j`;
/// `cells[i]` is cell `i`'s rectangle (row-major over the 3x3 grid) and
/// `crops[j]` the patch crop taken for position `j`, both in intermediate
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Array3<f64>>,
    pub permutation: Vec<usize>,
    pub cells: Vec<GridRect>,
    pub crops: Vec<GridRect>,
}

/// The four views of one sample. Regenerating with the same seed yields
/// bit-identical arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBundle {
    pub i_q: GlobalView,
    pub i_k: GlobalView,
    pub p_q: PatchSet,
    pub p_k: PatchSet,
    pub seed: u64,
}

/// Sample a random resized crop: area fraction in `scale`, aspect in
/// `aspect` (log-uniform), ten attempts then the full image as fallback.
/// Sides are rounded up so the realized area never falls below the target.
fn sample_crop(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    scale: [f64; 2],
    aspect: [f64; 2],
) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    for _ in 0..10 {
        let frac = rng.gen_range(scale[0]..=scale[1]);
        let log_ar = rng.gen_range(aspect[0].ln()..=aspect[1].ln());
        let ar = log_ar.exp();
        let target = area * frac;
        let cw = (target * ar).sqrt().ceil() as usize;
        let ch = (target / ar).sqrt().ceil() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let y0 = rng.gen_range(0..=h - ch);
            let x0 = rng.gen_range(0..=w - cw);
            return (y0, x0, ch, cw);
        }
    }
    (0, 0, h, w)
}

/// Brightness/contrast/saturation/hue jitter in a random order with
/// independent factor draws, torchvision-style.
fn color_jitter(img: &mut Array3<f64>, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) {
    let mut order = [0usize, 1, 2, 3];
    for i in (1..4).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    for op in order {
        match op {
            0 => {
                let b = cfg.jitter_brightness;
                if b > 0.0 {
                    let f = rng.gen_range((1.0 - b).max(0.0)..=1.0 + b);
                    image_ops::adjust_brightness(img, f);
                }
            }
            1 => {
                let c = cfg.jitter_contrast;
                if c > 0.0 {
                    let f = rng.gen_range((1.0 - c).max(0.0)..=1.0 + c);
                    image_ops::adjust_contrast(img, f);
                }
            }
            2 => {
                let s = cfg.jitter_saturation;
                if s > 0.0 {
                    let f = rng.gen_range((1.0 - s).max(0.0)..=1.0 + s);
                    image_ops::adjust_saturation(img, f);
                }
            }
            _ => {
                let hch = cfg.jitter_hue;
                if hch > 0.0 {
                    let d = rng.gen_range(-hch..=hch);
                    image_ops::adjust_hue(img, d);
                }
            }
        }
    }
}

fn maybe_blur(img: &mut Array3<f64>, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) {
    if rng.gen_range(0.0..1.0) < cfg.p_blur {
        let sigma = rng.gen_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
        *img = image_ops::gaussian_blur(img, sigma);
    }
}

/// The rand-augment op list. Magnitude `m` is mapped to each op's range as
/// `m/10` of its maximum strength:
/// rotate +-30deg, shear +-0.3, translate +-side/3, posterize down to
/// 4 bits, solarize threshold `1 - m/10`, photometric factors `1 +- 0.9*m/10`.
/// Geometric ops edge-clamp when sampling outside the frame.
const RANDAUG_OPS: usize = 14;

fn apply_randaug_op(img: &mut Array3<f64>, op: usize, m: f64, rng: &mut ChaCha8Rng) {
    let sign = if rng.gen_range(0.0..1.0) < 0.5 { 1.0 } else { -1.0 };
    match op {
        0 => {} // identity
        1 => image_ops::autocontrast(img),
        2 => image_ops::equalize(img),
        3 => {
            let angle = sign * 30.0_f64.to_radians() * m;
            let (s, c) = angle.sin_cos();
            // inverse rotation
            *img = image_ops::warp_affine(img, [c, s, 0.0, -s, c, 0.0]);
        }
        4 => image_ops::posterize(img, 8 - (4.0 * m).round() as u8),
        5 => image_ops::solarize(img, 1.0 - m),
        6 => image_ops::adjust_saturation(img, 1.0 + sign * 0.9 * m),
        7 => image_ops::adjust_contrast(img, 1.0 + sign * 0.9 * m),
        8 => image_ops::adjust_brightness(img, 1.0 + sign * 0.9 * m),
        9 => image_ops::sharpness(img, 1.0 + sign * 0.9 * m),
        10 => {
            let sh = sign * 0.3 * m;
            *img = image_ops::warp_affine(img, [1.0, sh, 0.0, 0.0, 1.0, 0.0]);
        }
        11 => {
            let sh = sign * 0.3 * m;
            *img = image_ops::warp_affine(img, [1.0, 0.0, 0.0, sh, 1.0, 0.0]);
        }
        12 => {
            let t = sign * img.dim().1 as f64 / 3.0 * m;
            *img = image_ops::warp_affine(img, [1.0, 0.0, t, 0.0, 1.0, 0.0]);
        }
        _ => {
            let t = sign * img.dim().0 as f64 / 3.0 * m;
            *img = image_ops::warp_affine(img, [1.0, 0.0, 0.0, 0.0, 1.0, t]);
        }
    }
    image_ops::clamp01(img);
}

fn rand_augment(img: &mut Array3<f64>, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) {
    let m = cfg.randaug_magnitude as f64 / 10.0;
    for _ in 0..cfg.randaug_ops {
        let op = rng.gen_range(0..RANDAUG_OPS);
        apply_randaug_op(img, op, m, rng);
    }
}

/// Build one augmented global view; deterministic in `(img, seed, cfg)`.
pub fn global_view(img: &SourceImage, seed: u64, cfg: &AugmentConfig) -> GlobalView {
    let mut rng = stream(seed, STREAM_PIPELINE);
    let (h, w) = (img.height(), img.width());
    let (y0, x0, ch, cw) = sample_crop(&mut rng, h, w, cfg.global_crop_scale, cfg.crop_aspect);
    let cropped = image_ops::crop(&img.pixels, y0, x0, ch, cw);
    let mut view = image_ops::resize_bilinear(&cropped, cfg.global_side, cfg.global_side);
    if rng.gen_range(0.0..1.0) < cfg.p_flip {
        view = image_ops::hflip(&view);
    }
    if rng.gen_range(0.0..1.0) < cfg.p_jitter {
        color_jitter(&mut view, &mut rng, cfg);
    }
    if rng.gen_range(0.0..1.0) < cfg.p_grayscale {
        view = image_ops::to_grayscale(&view);
    }
    maybe_blur(&mut view, &mut rng, cfg);
    rand_augment(&mut view, &mut rng, cfg);
    image_ops::clamp01(&mut view);
    GlobalView { pixels: view }
}

/// The shuffle a given jigsaw seed will produce, without running the pixel
/// pipeline. Used by tests that search for specific permutations.
pub fn jigsaw_permutation_for_seed(seed: u64) -> Vec<usize> {
    let mut rng = stream(seed, STREAM_SHUFFLE);
    let mut perm: Vec<usize> = (0..9).collect();
    for i in (1..9).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Build one jigsaw patch set; deterministic in `(img, seed, cfg)`.
pub fn jigsaw_views(img: &SourceImage, seed: u64, cfg: &AugmentConfig) -> PatchSet {
    let mut rng = stream(seed, STREAM_PIPELINE);
    let (h, w) = (img.height(), img.width());
    let (y0, x0, ch, cw) = sample_crop(&mut rng, h, w, [cfg.crop_area_min, 1.0], cfg.crop_aspect);
    let cropped = image_ops::crop(&img.pixels, y0, x0, ch, cw);
    let side = cfg.jigsaw_intermediate_side;
    let mut inter = image_ops::resize_bilinear(&cropped, side, side);
    if rng.gen_range(0.0..1.0) < cfg.p_flip {
        inter = image_ops::hflip(&inter);
    }
    if rng.gen_range(0.0..1.0) < cfg.p_jitter {
        color_jitter(&mut inter, &mut rng, cfg);
    }
    maybe_blur(&mut inter, &mut rng, cfg);
    image_ops::clamp01(&mut inter);

    let cell = cfg.jigsaw_cell_side;
    let cells: Vec<GridRect> = (0..9)
        .map(|i| GridRect {
            y0: (i / 3) * cell,
            x0: (i % 3) * cell,
            side: cell,
        })
        .collect();
    let permutation = jigsaw_permutation_for_seed(seed);

    let ps = cfg.patch_side;
    let slack = cell - ps;
    let mut patches = Vec::with_capacity(9);
    let mut crops = Vec::with_capacity(9);
    for &cell_idx in &permutation {
        let c = cells[cell_idx];
        let oy = if slack > 0 { rng.gen_range(0..=slack) } else { 0 };
        let ox = if slack > 0 { rng.gen_range(0..=slack) } else { 0 };
        let rect = GridRect {
            y0: c.y0 + oy,
            x0: c.x0 + ox,
            side: ps,
        };
        patches.push(image_ops::crop(&inter, rect.y0, rect.x0, ps, ps));
        crops.push(rect);
    }
    PatchSet {
        patches,
        permutation,
        cells,
        crops,
    }
}

/// Derive four independent sub-seeds and build the full view bundle.
pub fn make_bundle(img: &SourceImage, seed: u64, cfg: &AugmentConfig) -> ViewBundle {
    ViewBundle {
        i_q: global_view(img, derive_seed(seed, STREAM_GLOBAL_Q), cfg),
        i_k: global_view(img, derive_seed(seed, STREAM_GLOBAL_K), cfg),
        p_q: jigsaw_views(img, derive_seed(seed, STREAM_JIGSAW_Q), cfg),
        p_k: jigsaw_views(img, derive_seed(seed, STREAM_JIGSAW_K), cfg),
        seed,
    }
}
