//! Minimal deterministic layer zoo: convolution (im2col + GEMM), group
//! normalization, linear, max pooling, global average pooling, relu and row
//! L2-normalization, each with an explicit forward cache and a hand-written
//! backward.
//!
//! Forward passes are `&self` and return their cache so the same layer can
//! run several passes (global views, patch batch) before the backwards
//! accumulate gradients. `infer` variants skip the cache for no-grad paths
//! (the momentum encoder, evaluation).

use crate::error::{DetcoError, Result};
use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Round-trip safe unit-norm floor: rows with a pre-norm magnitude below
/// this are treated as degenerate.
pub const NORM_FLOOR: f64 = 1e-12;

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Array2<f64>, // (c_out, c_in * k * k)
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub touched: bool,
}

#[derive(Debug)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

pub fn conv_out_side(side: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (side + 2 * pad - kernel) / stride + 1
}

fn im2col(
    x: &Array4<f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * kernel * kernel, b * oh * ow));
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = ci * kernel * kernel + ky * kernel + kx;
                for bi in 0..b {
                    let base = bi * oh * ow;
                    for oy in 0..oh {
                        let sy = (oy * stride + ky) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let sx = (ox * stride + kx) as isize - pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            cols[[row, base + oy * ow + ox]] =
                                x[[bi, ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    dim: (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<f64> {
    let (b, c, h, w) = dim;
    let mut dx = Array4::zeros(dim);
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = ci * kernel * kernel + ky * kernel + kx;
                for bi in 0..b {
                    let base = bi * oh * ow;
                    for oy in 0..oh {
                        let sy = (oy * stride + ky) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let sx = (ox * stride + kx) as isize - pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dx[[bi, ci, sy as usize, sx as usize]] +=
                                dcols[[row, base + oy * ow + ox]];
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let w = Array2::from_shape_vec((c_out, fan_in), he_normal(rng, fan_in, c_out * fan_in))
            .expect("conv weight shape");
        Conv2d {
            w,
            b: Array1::zeros(c_out),
            gw: Array2::zeros((c_out, fan_in)),
            gb: Array1::zeros(c_out),
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            touched: false,
        }
    }

    fn run(&self, x: &Array4<f64>) -> (Array4<f64>, Array2<f64>, (usize, usize)) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.c_in, "conv input channels");
        let oh = conv_out_side(h, self.kernel, self.stride, self.pad);
        let ow = conv_out_side(w, self.kernel, self.stride, self.pad);
        let cols = im2col(x, self.kernel, self.stride, self.pad, oh, ow);
        let y_mat = self.w.dot(&cols);
        let mut y = Array4::zeros((b, self.c_out, oh, ow));
        for bi in 0..b {
            for co in 0..self.c_out {
                let bias = self.b[co];
                for oy in 0..oh {
                    for ox in 0..ow {
                        y[[bi, co, oy, ox]] = y_mat[[co, bi * oh * ow + oy * ow + ox]] + bias;
                    }
                }
            }
        }
        (y, cols, (oh, ow))
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (y, cols, out_hw) = self.run(x);
        (
            y,
            ConvCache {
                cols,
                in_dim: x.dim(),
                out_hw,
            },
        )
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        self.run(x).0
    }

    pub fn backward(&mut self, cache: &ConvCache, dy: &Array4<f64>) -> Array4<f64> {
        let (b, co, oh, ow) = dy.dim();
        assert_eq!((oh, ow), cache.out_hw, "conv backward spatial dims");
        let mut dy_mat = Array2::zeros((co, b * oh * ow));
        for bi in 0..b {
            for c in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dy_mat[[c, bi * oh * ow + oy * ow + ox]] = dy[[bi, c, oy, ox]];
                    }
                }
            }
        }
        self.gw += &dy_mat.dot(&cache.cols.t());
        self.gb += &dy_mat.sum_axis(Axis(1));
        self.touched = true;
        let dcols = self.w.t().dot(&dy_mat);
        col2im(
            &dcols,
            cache.in_dim,
            self.kernel,
            self.stride,
            self.pad,
            oh,
            ow,
        )
    }

    pub fn zero_grads(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
        self.touched = false;
    }
}

// ---------------------------------------------------------------------------
// Group normalization
// ---------------------------------------------------------------------------

/// Batch-independent normalization over channel groups. Keeps query/key
/// statistics decoupled on a single device, where the distributed batch
/// shuffling the momentum-contrast baseline uses is unavailable.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub ggamma: Array1<f64>,
    pub gbeta: Array1<f64>,
    pub groups: usize,
    pub eps: f64,
    pub touched: bool,
}

#[derive(Debug)]
pub struct GroupNormCache {
    xhat: Array4<f64>,
    inv_std: Array2<f64>, // (B, groups)
}

/// Largest divisor of `c` not exceeding `min(32, c/2)` (1 for tiny widths).
pub fn default_groups(c: usize) -> usize {
    let cap = (c / 2).clamp(1, 32);
    (1..=cap).rev().find(|g| c % g == 0).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(groups >= 1 && channels % groups == 0, "channels % groups");
        GroupNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            ggamma: Array1::zeros(channels),
            gbeta: Array1::zeros(channels),
            groups,
            eps: 1e-5,
            touched: false,
        }
    }

    fn normalize(&self, x: &Array4<f64>) -> (Array4<f64>, Array4<f64>, Array2<f64>) {
        let (b, c, h, w) = x.dim();
        let per = c / self.groups;
        let m = (per * h * w) as f64;
        let mut xhat = Array4::zeros((b, c, h, w));
        let mut inv_std = Array2::zeros((b, self.groups));
        for bi in 0..b {
            for g in 0..self.groups {
                let c0 = g * per;
                let mut mean = 0.0;
                for ci in c0..c0 + per {
                    for y in 0..h {
                        for xx in 0..w {
                            mean += x[[bi, ci, y, xx]];
                        }
                    }
                }
                mean /= m;
                let mut var = 0.0;
                for ci in c0..c0 + per {
                    for y in 0..h {
                        for xx in 0..w {
                            let d = x[[bi, ci, y, xx]] - mean;
                            var += d * d;
                        }
                    }
                }
                var /= m;
                let istd = 1.0 / (var + self.eps).sqrt();
                inv_std[[bi, g]] = istd;
                for ci in c0..c0 + per {
                    for y in 0..h {
                        for xx in 0..w {
                            xhat[[bi, ci, y, xx]] = (x[[bi, ci, y, xx]] - mean) * istd;
                        }
                    }
                }
            }
        }
        let mut out = xhat.clone();
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        out[[bi, ci, y, xx]] = xhat[[bi, ci, y, xx]] * self.gamma[ci] + self.beta[ci];
                    }
                }
            }
        }
        (out, xhat, inv_std)
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, GroupNormCache) {
        let (y, xhat, inv_std) = self.normalize(x);
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        self.normalize(x).0
    }

    pub fn backward(&mut self, cache: &GroupNormCache, dy: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = dy.dim();
        let per = c / self.groups;
        let m = (per * h * w) as f64;
        for ci in 0..c {
            let mut gg = 0.0;
            let mut gb = 0.0;
            for bi in 0..b {
                for y in 0..h {
                    for xx in 0..w {
                        gg += dy[[bi, ci, y, xx]] * cache.xhat[[bi, ci, y, xx]];
                        gb += dy[[bi, ci, y, xx]];
                    }
                }
            }
            self.ggamma[ci] += gg;
            self.gbeta[ci] += gb;
        }
        self.touched = true;

        // dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)),
        // means taken per (sample, group).
        let mut dx = Array4::zeros((b, c, h, w));
        for bi in 0..b {
            for g in 0..self.groups {
                let c0 = g * per;
                let istd = cache.inv_std[[bi, g]];
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for ci in c0..c0 + per {
                    for y in 0..h {
                        for xx in 0..w {
                            let dxh = dy[[bi, ci, y, xx]] * self.gamma[ci];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * cache.xhat[[bi, ci, y, xx]];
                        }
                    }
                }
                mean_dxhat /= m;
                mean_dxhat_xhat /= m;
                for ci in c0..c0 + per {
                    for y in 0..h {
                        for xx in 0..w {
                            let dxh = dy[[bi, ci, y, xx]] * self.gamma[ci];
                            dx[[bi, ci, y, xx]] = istd
                                * (dxh
                                    - mean_dxhat
                                    - cache.xhat[[bi, ci, y, xx]] * mean_dxhat_xhat);
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn zero_grads(&mut self) {
        self.ggamma.fill(0.0);
        self.gbeta.fill(0.0);
        self.touched = false;
    }
}

// ---------------------------------------------------------------------------
// Stateless pieces
// ---------------------------------------------------------------------------

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through relu given the forward *output*.
pub fn relu_backward(y: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn relu2(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu2_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut y = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = 0.0;
            for yy in 0..h {
                for xx in 0..w {
                    acc += x[[bi, ci, yy, xx]];
                }
            }
            y[[bi, ci]] = acc * scale;
        }
    }
    y
}

pub fn global_avg_pool_backward(dy: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (b, c) = dy.dim();
    let scale = 1.0 / (h * w) as f64;
    Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| dy[[bi, ci]] * scale)
}

// ---------------------------------------------------------------------------
// Max pooling (resnet stem)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
pub struct MaxPoolCache {
    argmax: Vec<usize>, // source linear index per output element
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            pad,
        }
    }

    fn run(&self, x: &Array4<f64>) -> (Array4<f64>, Vec<usize>, (usize, usize)) {
        let (b, c, h, w) = x.dim();
        let oh = conv_out_side(h, self.kernel, self.stride, self.pad);
        let ow = conv_out_side(w, self.kernel, self.stride, self.pad);
        let mut y = Array4::zeros((b, c, oh, ow));
        let mut argmax = vec![0usize; b * c * oh * ow];
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..self.kernel {
                            let sy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let sx = (ox * self.stride + kx) as isize - self.pad as isize;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let v = x[[bi, ci, sy as usize, sx as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = sy as usize * w + sx as usize;
                                }
                            }
                        }
                        y[[bi, ci, oy, ox]] = best;
                        argmax[((bi * c + ci) * oh + oy) * ow + ox] = best_idx;
                    }
                }
            }
        }
        (y, argmax, (oh, ow))
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, MaxPoolCache) {
        let (y, argmax, out_hw) = self.run(x);
        (
            y,
            MaxPoolCache {
                argmax,
                in_dim: x.dim(),
                out_hw,
            },
        )
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        self.run(x).0
    }

    pub fn backward(&self, cache: &MaxPoolCache, dy: &Array4<f64>) -> Array4<f64> {
        let (b, c, oh, ow) = dy.dim();
        assert_eq!((oh, ow), cache.out_hw);
        let (_, _, _, w) = cache.in_dim;
        let mut dx = Array4::zeros(cache.in_dim);
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let idx = cache.argmax[((bi * c + ci) * oh + oy) * ow + ox];
                        dx[[bi, ci, idx / w, idx % w]] += dy[[bi, ci, oy, ox]];
                    }
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>, // (out, in)
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
    pub touched: bool,
}

#[derive(Debug)]
pub struct LinearCache {
    x: Array2<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = Array2::from_shape_vec(
            (out_dim, in_dim),
            he_normal(rng, in_dim, out_dim * in_dim),
        )
        .expect("linear weight shape");
        // nonzero bias init keeps narrow relu heads away from the exact-zero
        // embedding even when every hidden unit is dead for some input
        let bound = 1.0 / (in_dim as f64).sqrt();
        let b = Array1::from_shape_fn(out_dim, |_| rng.gen_range(-bound..bound));
        Linear {
            w,
            b,
            gw: Array2::zeros((out_dim, in_dim)),
            gb: Array1::zeros(out_dim),
            touched: false,
        }
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        (self.infer(x), LinearCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache, dy: &Array2<f64>) -> Array2<f64> {
        self.gw += &dy.t().dot(&cache.x);
        self.gb += &dy.sum_axis(Axis(0));
        self.touched = true;
        dy.dot(&self.w)
    }

    pub fn zero_grads(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
        self.touched = false;
    }
}

// ---------------------------------------------------------------------------
// Row L2 normalization
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct L2NormCache {
    y: Array2<f64>,
    norms: Array1<f64>,
}

/// Normalize each row to unit length. A pre-norm row below [`NORM_FLOOR`]
/// is a degenerate embedding and surfaces as an error instead of a silent
/// divide.
pub fn l2_normalize_rows(x: &Array2<f64>) -> Result<(Array2<f64>, L2NormCache)> {
    let (b, _) = x.dim();
    let mut y = x.clone();
    let mut norms = Array1::zeros(b);
    for (i, mut row) in y.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n < NORM_FLOOR {
            return Err(DetcoError::DegenerateEmbedding(format!(
                "row {i} has pre-normalization norm {n:.3e}"
            )));
        }
        norms[i] = n;
        row.mapv_inplace(|v| v / n);
    }
    Ok((
        y.clone(),
        L2NormCache { y, norms },
    ))
}

pub fn l2_normalize_backward(cache: &L2NormCache, dy: &Array2<f64>) -> Array2<f64> {
    let (b, d) = dy.dim();
    let mut dx = Array2::zeros((b, d));
    for i in 0..b {
        let y = cache.y.row(i);
        let g = dy.row(i);
        let dot = y.dot(&g);
        let n = cache.norms[i];
        for j in 0..d {
            dx[[i, j]] = (g[j] - y[j] * dot) / n;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::{Array2, Array4};

    fn rand4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
    }

    fn rand2(rng: &mut ChaCha8Rng, dim: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
    }

    /// Scalar objective `sum(forward(x) * r)` for finite-difference checks.
    fn conv_obj(layer: &Conv2d, x: &Array4<f64>, r: &Array4<f64>) -> f64 {
        (layer.infer(x) * r).sum()
    }

    #[test]
    fn conv_matches_naive_convolution() {
        let mut rng = stream(0, 0);
        let conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let x = rand4(&mut rng, (2, 2, 7, 6));
        let y = conv.infer(&x);
        let (b, _, h, w) = x.dim();
        let oh = conv_out_side(h, 3, 2, 1);
        let ow = conv_out_side(w, 3, 2, 1);
        assert_eq!(y.dim(), (b, 3, oh, ow));
        // naive direct convolution
        for bi in 0..b {
            for co in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.b[co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = (oy * 2 + ky) as isize - 1;
                                    let sx = (ox * 2 + kx) as isize - 1;
                                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    acc += conv.w[[co, ci * 9 + ky * 3 + kx]]
                                        * x[[bi, ci, sy as usize, sx as usize]];
                                }
                            }
                        }
                        assert!((acc - y[[bi, co, oy, ox]]).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = stream(1, 0);
        let mut conv = Conv2d::new(2, 3, 3, 1, 1, &mut rng);
        let x = rand4(&mut rng, (2, 2, 5, 5));
        let r = rand4(&mut rng, (2, 3, 5, 5));
        let (_, cache) = conv.forward(&x);
        let dx = conv.backward(&cache, &r);
        let eps = 1e-6;

        // input gradient
        for &idx in &[(0usize, 0usize, 0usize, 0usize), (1, 1, 2, 3), (0, 1, 4, 4)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (conv_obj(&conv, &xp, &r) - conv_obj(&conv, &xm, &r)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-6, "dx {fd} vs {}", dx[idx]);
        }
        // weight gradient
        for &idx in &[(0usize, 0usize), (2, 17), (1, 5)] {
            let orig = conv.w[idx];
            conv.w[idx] = orig + eps;
            let fp = conv_obj(&conv, &x, &r);
            conv.w[idx] = orig - eps;
            let fm = conv_obj(&conv, &x, &r);
            conv.w[idx] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - conv.gw[idx]).abs() < 1e-6, "gw {fd} vs {}", conv.gw[idx]);
        }
        assert!(conv.touched);
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let mut rng = stream(2, 0);
        let gn = GroupNorm::new(4, 2);
        let x = rand4(&mut rng, (2, 4, 3, 3));
        let (y, _) = gn.forward(&x);
        // gamma=1, beta=0: each (sample, group) slab has ~zero mean, ~unit var
        for bi in 0..2 {
            for g in 0..2 {
                let mut vals = Vec::new();
                for ci in (g * 2)..(g * 2 + 2) {
                    for yy in 0..3 {
                        for xx in 0..3 {
                            vals.push(y[[bi, ci, yy, xx]]);
                        }
                    }
                }
                let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
                let var: f64 =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-3); // eps shifts variance slightly
            }
        }
    }

    #[test]
    fn group_norm_gradients_match_finite_differences() {
        let mut rng = stream(3, 0);
        let mut gn = GroupNorm::new(4, 2);
        gn.gamma = Array1::from_shape_fn(4, |_| rng.gen_range(0.5..1.5));
        gn.beta = Array1::from_shape_fn(4, |_| rng.gen_range(-0.5..0.5));
        let x = rand4(&mut rng, (2, 4, 3, 2));
        let r = rand4(&mut rng, (2, 4, 3, 2));
        let (_, cache) = gn.forward(&x);
        let dx = gn.backward(&cache, &r);
        let eps = 1e-6;
        let obj = |gn: &GroupNorm, x: &Array4<f64>| (gn.infer(x) * &r).sum();

        for &idx in &[(0usize, 0usize, 0usize, 0usize), (1, 3, 2, 1), (0, 2, 1, 0)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (obj(&gn, &xp) - obj(&gn, &xm)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-5, "dx {fd} vs {}", dx[idx]);
        }
        for ci in 0..4 {
            let orig = gn.gamma[ci];
            gn.gamma[ci] = orig + eps;
            let fp = obj(&gn, &x);
            gn.gamma[ci] = orig - eps;
            let fm = obj(&gn, &x);
            gn.gamma[ci] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - gn.ggamma[ci]).abs() < 1e-5);
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = stream(4, 0);
        let mut lin = Linear::new(5, 3, &mut rng);
        let x = rand2(&mut rng, (4, 5));
        let r = rand2(&mut rng, (4, 3));
        let (_, cache) = lin.forward(&x);
        let dx = lin.backward(&cache, &r);
        let eps = 1e-6;
        let obj = |l: &Linear, x: &Array2<f64>| (l.infer(x) * &r).sum();
        for &idx in &[(0usize, 0usize), (3, 4)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (obj(&lin, &xp) - obj(&lin, &xm)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-7);
        }
        for &idx in &[(0usize, 0usize), (2, 3)] {
            let orig = lin.w[idx];
            lin.w[idx] = orig + eps;
            let fp = obj(&lin, &x);
            lin.w[idx] = orig - eps;
            let fm = obj(&lin, &x);
            lin.w[idx] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - lin.gw[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let pool = MaxPool2d::new(3, 2, 1);
        let mut x = Array4::zeros((1, 1, 4, 4));
        x[[0, 0, 1, 1]] = 5.0;
        x[[0, 0, 3, 3]] = 7.0;
        let (y, cache) = pool.forward(&x);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        let dy = Array4::ones((1, 1, 2, 2));
        let dx = pool.backward(&cache, &dy);
        // (1,1) is the max of three overlapping windows
        assert_eq!(dx[[0, 0, 1, 1]], 3.0);
        assert_eq!(dx[[0, 0, 3, 3]], 1.0);
    }

    #[test]
    fn l2_normalize_unit_rows_and_gradient() {
        let mut rng = stream(5, 0);
        let x = rand2(&mut rng, (3, 6));
        let (y, cache) = l2_normalize_rows(&x).unwrap();
        for row in y.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
        let r = rand2(&mut rng, (3, 6));
        let dx = l2_normalize_backward(&cache, &r);
        let eps = 1e-6;
        let obj = |x: &Array2<f64>| {
            let (y, _) = l2_normalize_rows(x).unwrap();
            (y * &r).sum()
        };
        for &idx in &[(0usize, 0usize), (2, 5), (1, 3)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (obj(&xp) - obj(&xm)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn l2_normalize_rejects_zero_rows() {
        let x = Array2::zeros((2, 4));
        assert!(matches!(
            l2_normalize_rows(&x),
            Err(DetcoError::DegenerateEmbedding(_))
        ));
    }

    #[test]
    fn default_groups_divides_channels() {
        for c in [3, 8, 16, 32, 64, 256, 2048] {
            let g = default_groups(c);
            assert_eq!(c % g, 0);
            assert!(g <= 32);
        }
    }

    #[test]
    fn gap_pools_and_backprops() {
        let mut rng = stream(6, 0);
        let x = rand4(&mut rng, (2, 3, 4, 4));
        let y = global_avg_pool(&x);
        assert_eq!(y.dim(), (2, 3));
        let manual: f64 = x
            .slice(ndarray::s![0, 0, .., ..])
            .iter()
            .sum::<f64>()
            / 16.0;
        assert!((y[[0, 0]] - manual).abs() < 1e-12);
        let dy = rand2(&mut rng, (2, 3));
        let dx = global_avg_pool_backward(&dy, 4, 4);
        assert!((dx[[1, 2, 0, 0]] - dy[[1, 2]] / 16.0).abs() < 1e-15);
    }
}
