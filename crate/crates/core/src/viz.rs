//! Attention-map extraction from a final-stage feature map, heat overlays,
//! and metric-curve chart emission (PNG plus CSV series for headless
//! verification).

use crate::error::{DetcoError, Result};
use crate::image_ops::{resize_bilinear, save_png, SourceImage};
use crate::trainer::MetricsRecord;
use ndarray::{Array2, Array3};
use std::path::{Path, PathBuf};

/// How to collapse the channel axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChannelReduction {
    /// Mean of absolute activations (the default).
    #[default]
    MeanAbs,
    /// Maximum of absolute activations, for qualitative comparison.
    MaxAbs,
}

/// Min-max normalized spatial attention in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub values: Array2<f64>,
    /// (channels, height, width) of the source feature map.
    pub source_dims: (usize, usize, usize),
    /// Pre-normalization extrema.
    pub norm_min: f64,
    pub norm_max: f64,
    /// Set when the reduced map was constant; `values` is then all zeros.
    pub constant_input: bool,
}

/// Collapse `(C, h, w)` activations to an `(h, w)` map.
pub fn channel_reduce(f5: &Array3<f64>, reduction: ChannelReduction) -> Array2<f64> {
    let (c, h, w) = f5.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = match reduction {
                ChannelReduction::MeanAbs => 0.0,
                ChannelReduction::MaxAbs => f64::NEG_INFINITY,
            };
            for ch in 0..c {
                let v = f5[[ch, y, x]].abs();
                match reduction {
                    ChannelReduction::MeanAbs => acc += v,
                    ChannelReduction::MaxAbs => acc = acc.max(v),
                }
            }
            out[[y, x]] = match reduction {
                ChannelReduction::MeanAbs => acc / c as f64,
                ChannelReduction::MaxAbs => acc,
            };
        }
    }
    out
}

pub fn attention_map(f5: &Array3<f64>) -> Result<AttentionMap> {
    attention_map_with(f5, ChannelReduction::MeanAbs)
}

/// Reduce across channels, then min-max normalize to `[0, 1]`. A constant
/// reduced map yields all zeros with `constant_input` set.
pub fn attention_map_with(f5: &Array3<f64>, reduction: ChannelReduction) -> Result<AttentionMap> {
    let (c, h, w) = f5.dim();
    if c < 1 || h < 1 || w < 1 {
        return Err(DetcoError::Input(format!(
            "attention input must be non-empty, got {c}x{h}x{w}"
        )));
    }
    let reduced = channel_reduce(f5, reduction);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in reduced.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo <= 0.0 {
        return Ok(AttentionMap {
            values: Array2::zeros((h, w)),
            source_dims: (c, h, w),
            norm_min: lo,
            norm_max: hi,
            constant_input: true,
        });
    }
    let span = hi - lo;
    Ok(AttentionMap {
        values: reduced.mapv(|v| (v - lo) / span),
        source_dims: (c, h, w),
        norm_min: lo,
        norm_max: hi,
        constant_input: false,
    })
}

/// Jet-style heat color for a value in `[0, 1]`.
fn heat_color(v: f64) -> [f64; 3] {
    [
        (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0),
        (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0),
        (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0),
    ]
}

/// Upsample the map to the image size and blend it as a heat overlay with
/// strength proportional to the attention value (an all-zero map leaves
/// the image untouched). Writes a PNG.
pub fn overlay(img: &SourceImage, amap: &AttentionMap, out: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let (mh, mw) = amap.values.dim();
    let mut map3 = Array3::zeros((mh, mw, 1));
    for y in 0..mh {
        for x in 0..mw {
            map3[[y, x, 0]] = amap.values[[y, x]];
        }
    }
    let upsampled = resize_bilinear(&map3, h, w);
    let mut blended = img.pixels.clone();
    for y in 0..h {
        for x in 0..w {
            let v = upsampled[[y, x, 0]].clamp(0.0, 1.0);
            let heat = heat_color(v);
            let a = 0.5 * v;
            for c in 0..3 {
                blended[[y, x, c]] =
                    (blended[[y, x, c]] * (1.0 - a) + heat[c] * a).clamp(0.0, 1.0);
            }
        }
    }
    save_png(&blended, out)
}

// ---------------------------------------------------------------------------
// Metric charts
// ---------------------------------------------------------------------------

/// Parse a metrics JSONL file; malformed lines surface their line number.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DetcoError::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(line).map_err(|e| {
            DetcoError::Input(format!(
                "malformed metrics record at {}:{}: {e}",
                path.display(),
                i + 1
            ))
        })?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(DetcoError::Input(format!(
            "no records in metrics log {}",
            path.display()
        )));
    }
    Ok(records)
}

const CHART_W: usize = 640;
const CHART_H: usize = 400;
const MARGIN: usize = 40;

const SERIES_COLORS: [[f64; 3]; 4] = [
    [0.85, 0.2, 0.2],
    [0.2, 0.55, 0.2],
    [0.2, 0.3, 0.85],
    [0.75, 0.55, 0.1],
];

/// 3x5 digit glyphs for axis extrema (digits, '.', '-', 'e').
fn glyph(ch: char) -> [u8; 5] {
    // each row is 3 bits, msb = left pixel
    match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        'e' => [0b000, 0b111, 0b111, 0b100, 0b111],
        _ => [0b000; 5],
    }
}

fn draw_text(canvas: &mut Array3<f64>, text: &str, y0: usize, x0: usize) {
    let (h, w, _) = canvas.dim();
    for (i, ch) in text.chars().enumerate() {
        let g = glyph(ch);
        for (dy, row) in g.iter().enumerate() {
            for dx in 0..3 {
                if row & (0b100 >> dx) != 0 {
                    let y = y0 + dy;
                    let x = x0 + i * 4 + dx;
                    if y < h && x < w {
                        for c in 0..3 {
                            canvas[[y, x, c]] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

fn draw_line(canvas: &mut Array3<f64>, x0: f64, y0: f64, x1: f64, y1: f64, color: [f64; 3]) {
    let (h, w, _) = canvas.dim();
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (x0 + (x1 - x0) * t).round() as isize;
        let y = (y0 + (y1 - y0) * t).round() as isize;
        if x >= 0 && (x as usize) < w && y >= 0 && (y as usize) < h {
            for c in 0..3 {
                canvas[[y as usize, x as usize, c]] = color[c];
            }
        }
    }
}

/// Render one chart of named series as a PNG, with the y extrema printed
/// in a tiny bitmap font. X is the record index.
fn render_chart(series: &[(String, Vec<f64>)], out: &Path) -> Result<()> {
    let mut canvas = Array3::from_elem((CHART_H, CHART_W, 3), 1.0);
    let plot_w = (CHART_W - 2 * MARGIN) as f64;
    let plot_h = (CHART_H - 2 * MARGIN) as f64;

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut max_len = 0usize;
    for (_, values) in series {
        max_len = max_len.max(values.len());
        for &v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }

    // axes
    let black = [0.0, 0.0, 0.0];
    draw_line(
        &mut canvas,
        MARGIN as f64,
        (CHART_H - MARGIN) as f64,
        (CHART_W - MARGIN) as f64,
        (CHART_H - MARGIN) as f64,
        black,
    );
    draw_line(
        &mut canvas,
        MARGIN as f64,
        MARGIN as f64,
        MARGIN as f64,
        (CHART_H - MARGIN) as f64,
        black,
    );
    draw_text(&mut canvas, &format!("{hi:.3}"), MARGIN - 6, 2);
    draw_text(&mut canvas, &format!("{lo:.3}"), CHART_H - MARGIN, 2);

    for (si, (_, values)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        if values.len() == 1 {
            let y = (CHART_H - MARGIN) as f64 - (values[0] - lo) / (hi - lo) * plot_h;
            draw_line(&mut canvas, MARGIN as f64, y, (CHART_W - MARGIN) as f64, y, color);
            continue;
        }
        for i in 1..values.len() {
            let x0 = MARGIN as f64 + (i - 1) as f64 / (max_len - 1).max(1) as f64 * plot_w;
            let x1 = MARGIN as f64 + i as f64 / (max_len - 1).max(1) as f64 * plot_w;
            let y0 = (CHART_H - MARGIN) as f64 - (values[i - 1] - lo) / (hi - lo) * plot_h;
            let y1 = (CHART_H - MARGIN) as f64 - (values[i] - lo) / (hi - lo) * plot_h;
            draw_line(&mut canvas, x0, y0, x1, y1, color);
        }
    }
    save_png(&canvas, out)
}

fn write_csv(series: &[(String, Vec<f64>)], steps: &[u64], out: &Path) -> Result<()> {
    let mut text = String::from("step");
    for (name, _) in series {
        text.push(',');
        text.push_str(name);
    }
    text.push('\n');
    for (i, step) in steps.iter().enumerate() {
        text.push_str(&step.to_string());
        for (_, values) in series {
            text.push(',');
            text.push_str(&format!("{}", values[i]));
        }
        text.push('\n');
    }
    std::fs::write(out, text).map_err(|e| DetcoError::io(out.display().to_string(), e))
}

/// Emit one chart (PNG + CSV) per metric family: the three branch-loss
/// families with four stage series each, the weighted total, and the
/// learning rate. Returns the written file paths.
pub fn plot_metrics(log_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let records = read_metrics(log_path)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| DetcoError::io(out_dir.display().to_string(), e))?;
    let steps: Vec<u64> = records.iter().map(|r| r.step).collect();

    let stage_series = |pick: fn(&MetricsRecord) -> [f64; 4]| -> Vec<(String, Vec<f64>)> {
        (0..4)
            .map(|i| {
                (
                    format!("stage{}", i + 2),
                    records.iter().map(|r| pick(r)[i]).collect(),
                )
            })
            .collect()
    };

    let families: Vec<(&str, Vec<(String, Vec<f64>)>)> = vec![
        ("l_gg", stage_series(|r| r.l_gg)),
        ("l_ll", stage_series(|r| r.l_ll)),
        ("l_gl", stage_series(|r| r.l_gl)),
        (
            "total",
            vec![("total".into(), records.iter().map(|r| r.total).collect())],
        ),
        (
            "lr",
            vec![("lr".into(), records.iter().map(|r| r.lr).collect())],
        ),
    ];

    let mut written = Vec::new();
    for (name, series) in families {
        let png = out_dir.join(format!("{name}.png"));
        let csv = out_dir.join(format!("{name}.csv"));
        render_chart(&series, &png)?;
        write_csv(&series, &steps, &csv)?;
        written.push(png);
        written.push(csv);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::Array3;
    use rand::Rng;

    #[test]
    fn rebuttal_shape_reduces_2048_maps_to_14x14() {
        let mut rng = stream(31, 0);
        let f5 = Array3::from_shape_fn((2048, 14, 14), |_| rng.gen_range(-1.0..1.0));
        let amap = attention_map(&f5).unwrap();
        assert_eq!(amap.values.dim(), (14, 14));
        assert!(!amap.constant_input);
    }

    #[test]
    fn nonconstant_maps_hit_exact_extrema() {
        let mut rng = stream(32, 0);
        for _ in 0..20 {
            let f5 = Array3::from_shape_fn((5, 6, 7), |_| rng.gen_range(-2.0..2.0));
            let amap = attention_map(&f5).unwrap();
            let lo = amap.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = amap
                .values
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(lo, 0.0);
            assert_eq!(hi, 1.0);
        }
    }

    #[test]
    fn unit_range_single_channel_map_is_identity() {
        let mut f5 = Array3::zeros((1, 2, 2));
        f5[[0, 0, 0]] = 0.0;
        f5[[0, 0, 1]] = 0.25;
        f5[[0, 1, 0]] = 0.75;
        f5[[0, 1, 1]] = 1.0;
        let amap = attention_map(&f5).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(amap.values[[y, x]], f5[[0, y, x]]);
            }
        }
    }

    #[test]
    fn plus_minus_stack_reduces_to_absolute_value() {
        let mut rng = stream(33, 0);
        let v = ndarray::Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let mut f5 = Array3::zeros((2, 3, 4));
        for y in 0..3 {
            for x in 0..4 {
                f5[[0, y, x]] = v[[y, x]];
                f5[[1, y, x]] = -v[[y, x]];
            }
        }
        let reduced = channel_reduce(&f5, ChannelReduction::MeanAbs);
        for y in 0..3 {
            for x in 0..4 {
                assert!((reduced[[y, x]] - v[[y, x]].abs()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn channel_permutation_leaves_attention_unchanged() {
        let mut rng = stream(34, 0);
        let c = 16;
        let f5 = Array3::from_shape_fn((c, 5, 5), |_| rng.gen_range(-1.0..1.0));
        let base = attention_map(&f5).unwrap();
        let mut perm: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let mut shuffled = Array3::zeros((c, 5, 5));
        for (dst, &src) in perm.iter().enumerate() {
            shuffled
                .index_axis_mut(ndarray::Axis(0), dst)
                .assign(&f5.index_axis(ndarray::Axis(0), src));
        }
        let other = attention_map(&shuffled).unwrap();
        let diff = (&base.values - &other.values)
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-9);
    }

    #[test]
    fn constant_input_flags_and_zeroes() {
        let f5 = Array3::from_elem((4, 3, 3), 0.7);
        let amap = attention_map(&f5).unwrap();
        assert!(amap.constant_input);
        assert!(amap.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_reduction_differs_from_mean_generically() {
        let mut rng = stream(35, 0);
        let f5 = Array3::from_shape_fn((8, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let mean = channel_reduce(&f5, ChannelReduction::MeanAbs);
        let max = channel_reduce(&f5, ChannelReduction::MaxAbs);
        assert_ne!(mean, max);
    }

    #[test]
    fn zero_map_overlay_reproduces_the_source_png() {
        let mut rng = stream(36, 0);
        let px = Array3::from_shape_fn((64, 64, 3), |_| rng.gen_range(0.0..1.0));
        let img = crate::image_ops::SourceImage::new(px).unwrap();
        let amap = AttentionMap {
            values: ndarray::Array2::zeros((7, 7)),
            source_dims: (4, 7, 7),
            norm_min: 0.0,
            norm_max: 0.0,
            constant_input: true,
        };
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("overlay.png");
        let b = dir.path().join("source.png");
        overlay(&img, &amap, &a).unwrap();
        img.save_png(&b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn overlay_is_deterministic() {
        let mut rng = stream(37, 0);
        let px = Array3::from_shape_fn((64, 64, 3), |_| rng.gen_range(0.0..1.0));
        let img = crate::image_ops::SourceImage::new(px).unwrap();
        let f5 = Array3::from_shape_fn((8, 7, 7), |_| rng.gen_range(-1.0..1.0));
        let amap = attention_map(&f5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        overlay(&img, &amap, &a).unwrap();
        overlay(&img, &amap, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        // 224x224 source with a 7x7 map stays 224x224
        let loaded = crate::image_ops::SourceImage::load(&a).unwrap();
        assert_eq!(loaded.pixels.dim(), (64, 64, 3));
    }

    fn write_log(dir: &Path, lines: &[&str]) -> PathBuf {
        let path = dir.join("metrics.jsonl");
        std::fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    fn record_line(step: u64, total: f64) -> String {
        serde_json::to_string(&MetricsRecord {
            step,
            l_gg: [1.0, 1.0, 1.0, total],
            l_ll: [0.5; 4],
            l_gl: [0.25; 4],
            total,
            lr: 0.01,
        })
        .unwrap()
    }

    #[test]
    fn plot_metrics_writes_charts_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let lines: Vec<String> = (0..3).map(|i| record_line(i, 5.0 - i as f64)).collect();
        let refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
        let log = write_log(dir.path(), &refs);
        let out = dir.path().join("plots");
        let written = plot_metrics(&log, &out).unwrap();
        assert_eq!(written.len(), 10);
        let csv = std::fs::read_to_string(out.join("total.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4); // header + 3 rows
        assert!(csv.starts_with("step,total"));
        assert!(out.join("l_gg.png").exists());
        // identical series produce byte-identical csv exports
        let csv_ll = std::fs::read_to_string(out.join("l_ll.csv")).unwrap();
        let repeat = plot_metrics(&log, &dir.path().join("plots2")).unwrap();
        let csv_ll2 =
            std::fs::read_to_string(dir.path().join("plots2/l_ll.csv")).unwrap();
        assert_eq!(csv_ll, csv_ll2);
        assert_eq!(repeat.len(), 10);
    }

    #[test]
    fn malformed_log_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let good = record_line(0, 3.0);
        let log = write_log(dir.path(), &[&good, "{not json"]);
        let err = plot_metrics(&log, &dir.path().join("plots")).unwrap_err();
        assert!(err.to_string().contains(":2"), "{err}");
    }

    #[test]
    fn empty_log_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let log = write_log(dir.path(), &[]);
        let err = plot_metrics(&log, &dir.path().join("plots")).unwrap_err();
        assert!(err.to_string().contains("no records"), "{err}");
    }
}
