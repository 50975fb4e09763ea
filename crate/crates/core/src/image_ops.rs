//! Pixel-level primitives shared by the augmentation pipeline, the toy
//! dataset generator and the visualization code.
//!
//! Images are `Array3<f64>` in `(H, W, 3)` layout with intensities in
//! `[0, 1]`. Resampling is bilinear with half-pixel centers
//! (`src = (dst + 0.5) * scale - 0.5`, edge-clamped), the convention used
//! consistently across the crate.

use crate::error::{DetcoError, Result};
use ndarray::Array3;
use std::path::Path;

/// Minimum side enforced at ingestion; smaller inputs are upscaled.
pub const MIN_SOURCE_SIDE: usize = 64;

/// One decoded image with intensities in `[0, 1]`, `(H, W, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceImage {
    pub pixels: Array3<f64>,
}

impl SourceImage {
    /// Wrap a pixel array, clamping values into `[0, 1]` and upscaling so
    /// both sides are at least [`MIN_SOURCE_SIDE`].
    pub fn new(mut pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(DetcoError::Input(format!(
                "source image must have 3 channels, got {c}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(DetcoError::Input("source image has an empty side".into()));
        }
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        if h < MIN_SOURCE_SIDE || w < MIN_SOURCE_SIDE {
            let scale = (MIN_SOURCE_SIDE as f64 / h as f64).max(MIN_SOURCE_SIDE as f64 / w as f64);
            let nh = (h as f64 * scale).ceil() as usize;
            let nw = (w as f64 * scale).ceil() as usize;
            pixels = resize_bilinear(&pixels, nh.max(MIN_SOURCE_SIDE), nw.max(MIN_SOURCE_SIDE));
        }
        Ok(SourceImage { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Decode a PNG/JPEG file into a source image.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| DetcoError::Input(format!("cannot decode {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let mut pixels = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[[y as usize, x as usize, c]] = p.0[c] as f64 / 255.0;
            }
        }
        SourceImage::new(pixels)
    }

    /// Encode to an 8-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_png(&self.pixels, path)
    }
}

/// Write an `(H, W, 3)` array in `[0,1]` as a PNG file.
pub fn save_png(pixels: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                to_u8(pixels[[y, x, 0]]),
                to_u8(pixels[[y, x, 1]]),
                to_u8(pixels[[y, x, 2]]),
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DetcoError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
        })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = src.dim();
    assert!(out_h > 0 && out_w > 0, "resize target must be non-empty");
    if out_h == h && out_w == w {
        return src.clone();
    }
    let mut out = Array3::zeros((out_h, out_w, c));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let top = src[[y0, x0, ch]] * (1.0 - wx) + src[[y0, x1, ch]] * wx;
                let bot = src[[y1, x0, ch]] * (1.0 - wx) + src[[y1, x1, ch]] * wx;
                out[[oy, ox, ch]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Axis-aligned crop. Panics if the rectangle leaves the image; callers
/// construct rectangles from validated geometry.
pub fn crop(src: &Array3<f64>, y0: usize, x0: usize, h: usize, w: usize) -> Array3<f64> {
    let (sh, sw, _) = src.dim();
    assert!(y0 + h <= sh && x0 + w <= sw, "crop out of bounds");
    src.slice(ndarray::s![y0..y0 + h, x0..x0 + w, ..]).to_owned()
}

pub fn hflip(src: &Array3<f64>) -> Array3<f64> {
    let mut out = src.clone();
    out.invert_axis(ndarray::Axis(1));
    out
}

pub fn clamp01(img: &mut Array3<f64>) {
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

/// ITU-R 601 luma.
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn to_grayscale(src: &Array3<f64>) -> Array3<f64> {
    let (h, w, _) = src.dim();
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let l = luma(src[[y, x, 0]], src[[y, x, 1]], src[[y, x, 2]]);
            for c in 0..3 {
                out[[y, x, c]] = l;
            }
        }
    }
    out
}

pub fn adjust_brightness(img: &mut Array3<f64>, factor: f64) {
    img.mapv_inplace(|v| (v * factor).clamp(0.0, 1.0));
}

pub fn adjust_contrast(img: &mut Array3<f64>, factor: f64) {
    // Blend toward the mean luma of the whole image.
    let (h, w, _) = img.dim();
    let mut mean = 0.0;
    for y in 0..h {
        for x in 0..w {
            mean += luma(img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]);
        }
    }
    mean /= (h * w) as f64;
    img.mapv_inplace(|v| (mean + (v - mean) * factor).clamp(0.0, 1.0));
}

pub fn adjust_saturation(img: &mut Array3<f64>, factor: f64) {
    let (h, w, _) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let l = luma(img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]);
            for c in 0..3 {
                let v = img[[y, x, c]];
                img[[y, x, c]] = (l + (v - l) * factor).clamp(0.0, 1.0);
            }
        }
    }
}

/// Shift hue by `delta` turns (delta in [-0.5, 0.5]) via HSV round trip.
pub fn adjust_hue(img: &mut Array3<f64>, delta: f64) {
    let (h, w, _) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let (hh, s, v) = rgb_to_hsv(img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]);
            let nh = (hh + delta).rem_euclid(1.0);
            let (r, g, b) = hsv_to_rgb(nh, s, v);
            img[[y, x, 0]] = r;
            img[[y, x, 1]] = g;
            img[[y, x, 2]] = b;
        }
    }
}

/// Hue in turns [0,1), saturation and value in [0,1].
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Separable Gaussian blur; kernel radius is `ceil(3*sigma)` capped at the
/// image side.
pub fn gaussian_blur(src: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return src.clone();
    }
    let (h, w, c) = src.dim();
    let radius = ((3.0 * sigma).ceil() as usize).clamp(1, h.min(w).saturating_sub(1).max(1));
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let denom = 2.0 * sigma * sigma;
    let mut sum = 0.0;
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        let v = (-d * d / denom).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }

    // Horizontal pass then vertical pass, edge-clamped.
    let mut tmp = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sx = (x as isize + i as isize - radius as isize).clamp(0, w as isize - 1);
                    acc += k * src[[y, sx as usize, ch]];
                }
                tmp[[y, x, ch]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sy = (y as isize + i as isize - radius as isize).clamp(0, h as isize - 1);
                    acc += k * tmp[[sy as usize, x, ch]];
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    out
}

/// Inverse-affine warp with bilinear sampling around the image center.
/// `inv` maps output coordinates (x, y, centered) to source coordinates.
/// Out-of-bounds samples clamp to the edge.
pub fn warp_affine(src: &Array3<f64>, inv: [f64; 6]) -> Array3<f64> {
    let (h, w, c) = src.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array3::zeros((h, w, c));
    for oy in 0..h {
        for ox in 0..w {
            let dx = ox as f64 - cx;
            let dy = oy as f64 - cy;
            let sx = (inv[0] * dx + inv[1] * dy + inv[2] + cx).clamp(0.0, (w - 1) as f64);
            let sy = (inv[3] * dx + inv[4] * dy + inv[5] + cy).clamp(0.0, (h - 1) as f64);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let wx = sx - x0 as f64;
            let wy = sy - y0 as f64;
            for ch in 0..c {
                let top = src[[y0, x0, ch]] * (1.0 - wx) + src[[y0, x1, ch]] * wx;
                let bot = src[[y1, x0, ch]] * (1.0 - wx) + src[[y1, x1, ch]] * wx;
                out[[oy, ox, ch]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Remap intensities so each channel spans [0,1] (no-op on constant channels).
pub fn autocontrast(img: &mut Array3<f64>) {
    let (h, w, _) = img.dim();
    for ch in 0..3 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for y in 0..h {
            for x in 0..w {
                let v = img[[y, x, ch]];
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if hi - lo > 1e-12 {
            let scale = 1.0 / (hi - lo);
            for y in 0..h {
                for x in 0..w {
                    img[[y, x, ch]] = (img[[y, x, ch]] - lo) * scale;
                }
            }
        }
    }
}

/// Per-channel histogram equalization over 256 bins.
pub fn equalize(img: &mut Array3<f64>) {
    let (h, w, _) = img.dim();
    let n = (h * w) as f64;
    for ch in 0..3 {
        let mut hist = [0usize; 256];
        for y in 0..h {
            for x in 0..w {
                hist[(img[[y, x, ch]] * 255.0).round().clamp(0.0, 255.0) as usize] += 1;
            }
        }
        let mut cdf = [0.0f64; 256];
        let mut acc = 0usize;
        for (i, c) in hist.iter().enumerate() {
            acc += c;
            cdf[i] = acc as f64 / n;
        }
        for y in 0..h {
            for x in 0..w {
                let bin = (img[[y, x, ch]] * 255.0).round().clamp(0.0, 255.0) as usize;
                img[[y, x, ch]] = cdf[bin];
            }
        }
    }
}

/// Keep only the top `bits` bits of each 8-bit intensity.
pub fn posterize(img: &mut Array3<f64>, bits: u8) {
    let keep = bits.clamp(1, 8);
    let mask = 0xffu8 << (8 - keep);
    img.mapv_inplace(|v| {
        let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8 & mask;
        q as f64 / 255.0
    });
}

/// Invert intensities above `threshold`.
pub fn solarize(img: &mut Array3<f64>, threshold: f64) {
    img.mapv_inplace(|v| if v >= threshold { 1.0 - v } else { v });
}

/// Blend between a 3x3 box-smoothed copy (factor 0) and the original
/// (factor 1); factors above 1 over-sharpen.
pub fn sharpness(img: &mut Array3<f64>, factor: f64) {
    let (h, w, c) = img.dim();
    let src = img.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += src[[sy, sx, ch]];
                    }
                }
                let smooth = acc / 9.0;
                let v = smooth + (src[[y, x, ch]] - smooth) * factor;
                img[[y, x, ch]] = v.clamp(0.0, 1.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn ramp(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            ((y * w + x) as f64 / (h * w) as f64 + c as f64 * 0.01).min(1.0)
        })
    }

    #[test]
    fn ingestion_upscales_small_images() {
        let img = SourceImage::new(Array3::zeros((10, 200, 3))).unwrap();
        assert!(img.height() >= MIN_SOURCE_SIDE);
        assert!(img.width() >= 200);
    }

    #[test]
    fn ingestion_clamps_range() {
        let mut px = Array3::zeros((64, 64, 3));
        px[[0, 0, 0]] = 2.5;
        px[[1, 1, 1]] = -1.0;
        let img = SourceImage::new(px).unwrap();
        assert_eq!(img.pixels[[0, 0, 0]], 1.0);
        assert_eq!(img.pixels[[1, 1, 1]], 0.0);
    }

    #[test]
    fn resize_identity_when_same_size() {
        let a = ramp(8, 8);
        assert_eq!(resize_bilinear(&a, 8, 8), a);
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let a = Array3::from_elem((16, 12, 3), 0.37);
        let b = resize_bilinear(&a, 7, 23);
        for v in b.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn hflip_is_involution() {
        let a = ramp(9, 13);
        assert_eq!(hflip(&hflip(&a)), a);
    }

    #[test]
    fn hsv_roundtrip() {
        for &(r, g, b) in &[(0.2, 0.5, 0.9), (0.0, 0.0, 0.0), (1.0, 0.3, 0.3), (0.6, 0.6, 0.6)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-9, "{r} vs {r2}");
            assert!((g - g2).abs() < 1e-9);
            assert!((b - b2).abs() < 1e-9);
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let a = Array3::from_elem((16, 16, 3), 0.5);
        let b = gaussian_blur(&a, 1.3);
        for v in b.iter() {
            assert!((v - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn equalize_and_posterize_stay_in_range() {
        let mut a = ramp(16, 16);
        equalize(&mut a);
        posterize(&mut a, 4);
        for v in a.iter() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn solarize_inverts_above_threshold() {
        let mut a = Array3::from_elem((4, 4, 3), 0.8);
        solarize(&mut a, 0.5);
        for v in a.iter() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_identity_matrix_is_identity() {
        let a = ramp(11, 7);
        let b = warp_affine(&a, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
