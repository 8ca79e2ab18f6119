//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the crate's kernels: convolution is a nested-loop sum,
//! upsampling evaluates the bilinear formula pointwise, and least squares goes
//! through a dense matrix factorization.

#![allow(dead_code)]

use frtm::tensor::{ConvKernel, FeatureMap, ScoreMap};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, stride: usize) -> FeatureMap {
    FeatureMap::new(h, w, c, stride, random_vec(rng, h * w * c)).unwrap()
}

pub fn random_kernel(rng: &mut ChaCha8Rng, out: usize, inp: usize, size: usize) -> ConvKernel {
    ConvKernel::new(out, inp, size, random_vec(rng, out * inp * size * size)).unwrap()
}

/// Direct summation `out[o][y][x] = sum k[o][i][ky][kx] * x[i][y+ky-p][x+kx-p]`.
pub fn brute_conv(x: &FeatureMap, k: &ConvKernel) -> Vec<f64> {
    let planes: Vec<f64> = x.data().iter().map(|&v| f64::from(v)).collect();
    brute_conv_f64(&planes, x.height(), x.width(), k)
}

/// [`brute_conv`] on planar `f64` input of `k.in_channels()` channels.
pub fn brute_conv_f64(x: &[f64], h: usize, w: usize, k: &ConvKernel) -> Vec<f64> {
    let p = (k.k_h() / 2) as isize;
    let mut out = vec![0.0; k.out_channels() * h * w];
    for o in 0..k.out_channels() {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0f64;
                for i in 0..k.in_channels() {
                    for ky in 0..k.k_h() {
                        for kx in 0..k.k_w() {
                            let sy = y as isize + ky as isize - p;
                            let sx = xx as isize + kx as isize - p;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += f64::from(k.at(o, i, ky, kx)) * x[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

/// Bilinear interpolation of a `h x w` grid at input coordinate `(sy, sx)` with edge clamping.
pub fn bilinear_at(data: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
    let v = |y: usize, x: usize| data[y * w + x];
    (1.0 - ty) * ((1.0 - tx) * v(y0, x0) + tx * v(y0, x1)) + ty * ((1.0 - tx) * v(y1, x0) + tx * v(y1, x1))
}

/// Pointwise upsampling oracle with half-pixel-centre alignment, cropped to `out_h x out_w`.
pub fn brute_upsample(data: &[f64], h: usize, w: usize, factor: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let f = factor as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        for x in 0..out_w {
            let sy = (y as f64 + 0.5) / f - 0.5;
            let sx = (x as f64 + 0.5) / f - 0.5;
            out.push(bilinear_at(data, h, w, sy, sx));
        }
    }
    out
}

pub fn score_to_f64(s: &ScoreMap) -> Vec<f64> {
    s.data().iter().map(|&v| f64::from(v)).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Dot-test error `|<Ax, y> - <x, A^T y>| / (||Ax|| ||y||)`, immune to cancellation in the inner product.
pub fn dot_test_err(lhs: f64, rhs: f64, ax_norm: f64, y_norm: f64) -> f64 {
    (lhs - rhs).abs() / (ax_norm * y_norm).max(1e-300)
}

pub fn norm_f32(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    num / den
}

/// Dense symmetric positive-definite solve via Cholesky.
pub fn dense_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    a.clone().cholesky().expect("matrix is SPD").solve(b)
}

/// Dense weighted ridge regression: argmin sum_i c_i (t_i - (A w)_i)^2 + lambda ||w||^2.
pub fn dense_ridge(design: &DMatrix<f64>, targets: &[f64], weights: &[f64], lambda: f64) -> DVector<f64> {
    let n = design.ncols();
    let c = DMatrix::from_diagonal(&DVector::from_column_slice(weights));
    let normal = design.transpose() * &c * design + DMatrix::identity(n, n) * lambda;
    let rhs = design.transpose() * &c * DVector::from_column_slice(targets);
    dense_solve(&normal, &rhs)
}

use std::sync::Arc;

use frtm::frame::LabelMask;
use frtm::memory::{InitialWeighting, Sample, SampleMemory};
use frtm::model::TargetWeights;

/// Random rectangle mask that is neither empty nor full.
pub fn random_rect_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMask {
    loop {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0 + 1..=h), rng.random_range(x0 + 1..=w));
        let m = LabelMask::from_fn(h, w, |y, x| u8::from(y >= y0 && y < y1 && x >= x0 && x < x1));
        let n = m.count_nonzero();
        if n > 0 && n < h * w {
            return m;
        }
    }
}

/// Memory of `k` random samples on an `fh x fw x c` grid at `stride`, image size `ih x iw`.
#[allow(clippy::too_many_arguments)]
pub fn random_memory(
    rng: &mut ChaCha8Rng,
    fh: usize,
    fw: usize,
    c: usize,
    stride: usize,
    ih: usize,
    iw: usize,
    k: usize,
) -> SampleMemory {
    let samples = (0..k)
        .map(|_| Sample { features: Arc::new(random_map(rng, fh, fw, c, stride)), mask: random_rect_mask(rng, ih, iw) })
        .collect();
    SampleMemory::init(samples, InitialWeighting::OriginalDouble, 0.1, 80, 1).unwrap()
}

pub fn random_weights(rng: &mut ChaCha8Rng, c_in: usize, c: usize, scale: f32) -> TargetWeights {
    let mut w1 = random_kernel(rng, c, c_in, 1);
    let mut w2 = random_kernel(rng, 1, c, 3);
    w1.data_mut().iter_mut().for_each(|v| *v *= scale);
    w2.data_mut().iter_mut().for_each(|v| *v *= scale);
    TargetWeights::new(w1, w2).unwrap()
}

/// Per-pixel weights `kappa / kappa_hat` or `(1 - kappa) / (1 - kappa_hat)`, computed by counting.
pub fn oracle_pixel_weights(labels: &LabelMask, kappa_min: f64) -> Vec<f64> {
    let n = labels.data().len() as f64;
    let t = labels.data().iter().filter(|&&v| v != 0).count() as f64;
    let kh = t / n;
    let k = kappa_min.max(kh);
    labels.data().iter().map(|&v| if v != 0 { k / kh } else { (1.0 - k) / (1.0 - kh) }).collect()
}

/// Upsampled scores of every sample, computed with the brute-force kernels.
pub fn oracle_predictions(w: &TargetWeights, mem: &SampleMemory) -> Vec<Vec<f64>> {
    mem.entries()
        .iter()
        .map(|e| {
            let x = e.features();
            let h = brute_conv(x, &w.w1);
            let s = brute_conv_f64(&h, x.height(), x.width(), &w.w2);
            let l = e.labels();
            brute_upsample(&s, x.height(), x.width(), x.stride(), l.height(), l.width())
        })
        .collect()
}

/// Scalar-loop evaluation of the weighted, regularized loss.
pub fn oracle_loss(w: &TargetWeights, mem: &SampleMemory, kappa_min: f64, l1: f64, l2: f64) -> f64 {
    let gammas = mem.normalized_weights();
    let preds = oracle_predictions(w, mem);
    let mut total = 0.0;
    for ((e, g), u) in mem.entries().iter().zip(&gammas).zip(&preds) {
        let v = oracle_pixel_weights(e.labels(), kappa_min);
        for ((&y, &ui), &vi) in e.labels().data().iter().zip(u).zip(&v) {
            let r = vi * (f64::from(y) - ui);
            total += g * r * r;
        }
    }
    let sq = |k: &ConvKernel| k.data().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>();
    total + l1 * sq(&w.w1) + l2 * sq(&w.w2)
}

/// Dense design matrix of the w2-only problem: rows are label pixels of all samples,
/// columns are w2 entries; also returns targets and per-row weights `gamma * v^2`.
pub fn w2_design(w: &TargetWeights, mem: &SampleMemory, kappa_min: f64) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let n_params = w.w2.len();
    let c = w.w2.in_channels();
    let gammas = mem.normalized_weights();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for (e, g) in mem.entries().iter().zip(&gammas) {
        let x = e.features();
        let h = brute_conv(x, &w.w1);
        let l = e.labels();
        let mut cols = Vec::with_capacity(n_params);
        for j in 0..n_params {
            let mut basis = ConvKernel::zeros(1, c, 3);
            basis.data_mut()[j] = 1.0;
            let s = brute_conv_f64(&h, x.height(), x.width(), &basis);
            cols.push(brute_upsample(&s, x.height(), x.width(), x.stride(), l.height(), l.width()));
        }
        let v = oracle_pixel_weights(l, kappa_min);
        for p in 0..l.data().len() {
            rows.push(cols.iter().map(|col| col[p]).collect());
            targets.push(f64::from(l.data()[p]));
            weights.push(g * v[p] * v[p]);
        }
    }
    let design = DMatrix::from_fn(rows.len(), n_params, |i, j| rows[i][j]);
    (design, targets, weights)
}

use frtm::frame::RgbImage;

/// Smooth pseudo-random texture: a sum of seeded sinusoids per channel, values in `[lo, hi]`.
pub fn texture(seed: u64, h: usize, w: usize, lo: f32, hi: f32) -> RgbImage {
    let mut r = rng(seed);
    let waves: Vec<[f32; 4]> = (0..12)
        .map(|_| {
            [
                r.random_range(0.1f32..0.9),
                r.random_range(0.1f32..0.9),
                r.random_range(0.0f32..std::f32::consts::TAU),
                r.random_range(0.0f32..1.0),
            ]
        })
        .collect();
    let mut img = RgbImage::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0.0f32; 3];
            for (k, [fy, fx, ph, amp]) in waves.iter().enumerate() {
                let v = amp * (fy * y as f32 + fx * x as f32 + ph).sin();
                px[k % 3] += v;
            }
            img.set_pixel(y, x, px.map(|v| lo + (hi - lo) * (0.5 + 0.25 * v).clamp(0.0, 1.0)));
        }
    }
    img
}

pub struct SquareTrack {
    pub side: usize,
    pub start: (isize, isize),
    /// Pixels per frame, `(dy, dx)`.
    pub velocity: (isize, isize),
    pub texture: RgbImage,
}

/// Frames and ground-truth masks of squares translating over a textured background.
/// Later tracks are drawn on top; their ids are `1..=tracks.len()`.
pub fn square_sequence(
    n_frames: usize,
    h: usize,
    w: usize,
    background: &RgbImage,
    tracks: &[SquareTrack],
) -> (Vec<RgbImage>, Vec<LabelMask>) {
    let mut frames = Vec::with_capacity(n_frames);
    let mut masks = Vec::with_capacity(n_frames);
    for i in 0..n_frames as isize {
        let mut img = background.clone();
        let mut mask = LabelMask::empty(h, w);
        for (k, t) in tracks.iter().enumerate() {
            let (y0, x0) = (t.start.0 + t.velocity.0 * i, t.start.1 + t.velocity.1 * i);
            for dy in 0..t.side as isize {
                for dx in 0..t.side as isize {
                    let (y, x) = (y0 + dy, x0 + dx);
                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        continue;
                    }
                    // The texture moves with the square.
                    img.set_pixel(y as usize, x as usize, t.texture.pixel(dy as usize, dx as usize));
                    mask.set(y as usize, x as usize, k as u8 + 1);
                }
            }
        }
        frames.push(img);
        masks.push(mask);
    }
    (frames, masks)
}

pub fn single_square_sequence() -> (Vec<RgbImage>, Vec<LabelMask>) {
    let (h, w) = (96, 160);
    let bg = texture(100, h, w, 0.0, 120.0);
    let track =
        SquareTrack { side: 40, start: (28, 10), velocity: (0, 3), texture: texture(101, 40, 40, 140.0, 255.0) };
    square_sequence(24, h, w, &bg, &[track])
}

pub fn two_square_sequence() -> (Vec<RgbImage>, Vec<LabelMask>) {
    let (h, w) = (128, 192);
    let bg = texture(200, h, w, 0.0, 110.0);
    let a = SquareTrack { side: 40, start: (8, 10), velocity: (0, 3), texture: texture(201, 40, 40, 150.0, 255.0) };
    let mut b_tex = texture(202, 40, 40, 0.0, 255.0);
    // A saturated blue-dominant texture to separate it from the first square.
    for y in 0..40 {
        for x in 0..40 {
            let p = b_tex.pixel(y, x);
            b_tex.set_pixel(y, x, [p[0] * 0.2, p[1] * 0.3, 180.0 + p[2] * 0.29]);
        }
    }
    let b = SquareTrack { side: 40, start: (80, 140), velocity: (0, -3), texture: b_tex };
    square_sequence(24, h, w, &bg, &[a, b])
}

pub fn brute_jaccard(a: &LabelMask, b: &LabelMask) -> f64 {
    let (mut i, mut u) = (0.0, 0.0);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, g) = (a.get(y, x) != 0, b.get(y, x) != 0);
            if p && g {
                i += 1.0;
            }
            if p || g {
                u += 1.0;
            }
        }
    }
    if u == 0.0 {
        1.0
    } else {
        i / u
    }
}

/// Boundary pixel coordinates; outside the image counts as background.
pub fn brute_boundary(m: &LabelMask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let fg = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize) != 0;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if fg(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !fg(y + dy, x + dx)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Pairwise matching: a boundary pixel counts when any opposite boundary pixel lies within `tol`.
pub fn brute_boundary_f(a: &LabelMask, b: &LabelMask, tol: usize) -> f64 {
    let (pa, pb) = (brute_boundary(a), brute_boundary(b));
    if pa.is_empty() && pb.is_empty() {
        return 1.0;
    }
    if pa.is_empty() || pb.is_empty() {
        return 0.0;
    }
    let t = (tol * tol) as i64;
    let near = |p: &(i64, i64), set: &[(i64, i64)]| set.iter().any(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2) <= t);
    let prec = pa.iter().filter(|p| near(p, &pb)).count() as f64 / pa.len() as f64;
    let rec = pb.iter().filter(|p| near(p, &pa)).count() as f64 / pb.len() as f64;
    if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    }
}

pub fn random_spd(r: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
    m.transpose() * &m + DMatrix::identity(n, n) * (n as f64 * 0.1)
}

/// Bernoulli noise, an empty mask or a rectangle.
pub fn random_blob_mask(r: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMask {
    match r.random_range(0..4) {
        0 => {
            let p = r.random_range(0.0..1.0);
            LabelMask::new(h, w, (0..h * w).map(|_| u8::from(r.random_bool(p))).collect()).unwrap()
        }
        1 => LabelMask::empty(h, w),
        _ if h * w < 2 => LabelMask::from_fn(h, w, |_, _| 1),
        _ => random_rect_mask(r, h, w),
    }
}
