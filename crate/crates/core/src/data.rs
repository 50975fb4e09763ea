//! Dataset ingestion and the synthetic toy-image generator.
//!
//! Toy classes are shape/color-family pairs rendered on textured
//! backgrounds: the color family alone gives better-than-chance linear
//! separation of raw pixel statistics, but distinguishing shapes within a
//! family needs spatial structure, which is what the pretext task is
//! supposed to learn.

use crate::error::{DetcoError, Result};
use crate::image_ops::{hsv_to_rgb, SourceImage};
use crate::rng::{derive_seed, stream};
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Images with integer class labels in `[0, num_classes)`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub items: Vec<(SourceImage, usize)>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Skip bookkeeping from a folder load.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    pub skipped: usize,
}

/// Load a `root/<class_name>/*.png|jpg` tree. Classes are the subdirectory
/// names in lexicographic order; unreadable files are skipped with a
/// warning and counted in the report.
pub fn load_image_folder(root: &Path) -> Result<(LabeledDataset, LoadReport)> {
    let mut class_dirs: Vec<(String, std::path::PathBuf)> = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|e| DetcoError::io(root.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| DetcoError::io(root.display().to_string(), e))?;
        let path = entry.path();
        if path.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            class_dirs.push((name, path));
        }
    }
    class_dirs.sort_by(|a, b| a.0.cmp(&b.0));

    let mut items = Vec::new();
    let mut report = LoadReport::default();
    let mut class_names = Vec::new();
    for (label, (name, dir)) in class_dirs.iter().enumerate() {
        class_names.push(name.clone());
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| DetcoError::io(dir.display().to_string(), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                    Some(ref ext) if ext == "png" || ext == "jpg" || ext == "jpeg"
                )
            })
            .collect();
        files.sort();
        for file in files {
            match SourceImage::load(&file) {
                Ok(img) => {
                    items.push((img, label));
                    report.loaded += 1;
                }
                Err(e) => {
                    log::warn!("skipping unreadable image {}: {e}", file.display());
                    report.skipped += 1;
                }
            }
        }
    }
    if items.is_empty() {
        return Err(DetcoError::Input(format!(
            "no readable images under {}",
            root.display()
        )));
    }
    Ok((
        LabeledDataset {
            items,
            num_classes: class_names.len(),
            class_names,
        },
        report,
    ))
}

/// Write a dataset out as an image folder (one subdirectory per class).
pub fn write_image_folder(dataset: &LabeledDataset, root: &Path) -> Result<()> {
    for name in &dataset.class_names {
        std::fs::create_dir_all(root.join(name))
            .map_err(|e| DetcoError::io(root.display().to_string(), e))?;
    }
    let mut counters = vec![0usize; dataset.num_classes];
    for (img, label) in &dataset.items {
        let name = &dataset.class_names[*label];
        let path = root.join(name).join(format!("{:05}.png", counters[*label]));
        counters[*label] += 1;
        img.save_png(&path)?;
    }
    Ok(())
}

/// Parameters of the synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_side: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            num_classes: 8,
            samples_per_class: 100,
            image_side: 96,
            seed: 1,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(DetcoError::Config(format!(
                "data.num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.image_side < 64 {
            return Err(DetcoError::Config(format!(
                "data.image_side must be at least 64, got {}",
                self.image_side
            )));
        }
        if self.samples_per_class == 0 {
            return Err(DetcoError::Config(
                "data.samples_per_class must be positive".into(),
            ));
        }
        Ok(())
    }
}

const SHAPES_PER_FAMILY: usize = 4;

fn shape_distance(shape: usize, x: f64, y: f64, r: f64) -> f64 {
    match shape {
        // disk
        0 => (x * x + y * y).sqrt() - r,
        // square
        1 => x.abs().max(y.abs()) - r * 0.85,
        // equilateral triangle (pointing up), via three half-planes
        2 => {
            let k = 3.0_f64.sqrt();
            let d1 = y - r * 0.5;
            let d2 = -y * 0.5 - k * x * 0.5 - r * 0.5;
            let d3 = -y * 0.5 + k * x * 0.5 - r * 0.5;
            d1.max(d2).max(d3) + r * 0.2
        }
        // ring
        _ => ((x * x + y * y).sqrt() - r * 0.78).abs() - r * 0.3,
    }
}

/// Render one toy sample.
fn render_sample(class: usize, side: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Array3<f64> {
    let shape = class % SHAPES_PER_FAMILY;
    let family = class / SHAPES_PER_FAMILY;

    // color family: warm hues near 0.04, cool near 0.58, further families
    // spaced around the wheel
    let hue_center = match family {
        0 => 0.04,
        1 => 0.58,
        f => (0.04 + 0.27 * f as f64).rem_euclid(1.0),
    };
    let hue = (hue_center + rng.gen_range(-0.05..0.05)).rem_euclid(1.0);
    let sat = rng.gen_range(0.55..0.95);
    let val = rng.gen_range(0.65..0.95);
    let (fr, fg, fb) = hsv_to_rgb(hue, sat, val);

    // textured background: low-frequency gradient plus noise
    let bg_base = rng.gen_range(0.25..0.55);
    let gx = rng.gen_range(-0.2..0.2);
    let gy = rng.gen_range(-0.2..0.2);
    let noise_amp = 0.22;

    // shape placement
    let r = side as f64 * rng.gen_range(0.16..0.30);
    let margin = r + 2.0;
    let cx = rng.gen_range(margin..side as f64 - margin);
    let cy = rng.gen_range(margin..side as f64 - margin);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let (st, ct) = theta.sin_cos();

    let mut img = Array3::zeros((side, side, 3));
    for py in 0..side {
        for px in 0..side {
            let u = px as f64 / side as f64 - 0.5;
            let v = py as f64 / side as f64 - 0.5;
            let base = bg_base + gx * u + gy * v;
            let n0 = rng.gen_range(-noise_amp..noise_amp);
            let n1 = rng.gen_range(-noise_amp..noise_amp);
            let n2 = rng.gen_range(-noise_amp..noise_amp);
            let bg = [base + n0, base + n1, base + n2];

            // rotate into shape coordinates
            let dx = px as f64 - cx;
            let dy = py as f64 - cy;
            let sx = ct * dx + st * dy;
            let sy = -st * dx + ct * dy;
            let d = shape_distance(shape, sx, sy, r);
            // soft 1px edge
            let alpha = (0.5 - d).clamp(0.0, 1.0);
            let fill = [fr, fg, fb];
            for c in 0..3 {
                let speckle = rng.gen_range(-0.06..0.06);
                img[[py, px, c]] =
                    (bg[c] * (1.0 - alpha) + (fill[c] + speckle) * alpha).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Deterministically generate the toy dataset: `samples_per_class` images
/// per class, interleaved class-major then index-major.
pub fn generate_toy(spec: &ToySpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut items = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for class in 0..spec.num_classes {
        for idx in 0..spec.samples_per_class {
            let sample_seed = derive_seed(spec.seed, (class * spec.samples_per_class + idx) as u64);
            let mut rng = stream(sample_seed, 0x707);
            let pixels = render_sample(class, spec.image_side, &mut rng);
            items.push((SourceImage::new(pixels)?, class));
        }
    }
    let class_names = (0..spec.num_classes)
        .map(|c| format!("class{c}"))
        .collect();
    Ok(LabeledDataset {
        items,
        num_classes: spec.num_classes,
        class_names,
    })
}
