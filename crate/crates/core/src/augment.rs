//! First-frame sample generation: cut out the target, fill the hole, then paste a
//! randomly warped and blurred copy of the target back onto the filled background.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};
use crate::frame::{LabelMask, RgbImage};

const INPAINT_MAX_ITERS: usize = 64;
const INPAINT_TOLERANCE: f32 = 0.5;
/// Draws per sample before falling back to the identity when warps keep pushing the target out of frame.
const MAX_WARP_ATTEMPTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub n_augmented: usize,
    /// Degrees; rotation is drawn from `[-max_rotation, max_rotation]`.
    pub max_rotation: f64,
    pub scale_range: [f64; 2],
    /// Fraction of the image side, per axis.
    pub max_translation: f64,
    /// Gaussian blur standard deviation in pixels.
    pub blur_sigma_range: [f64; 2],
    pub rng_seed: u64,
}

impl Default for AugmentationParams {
    fn default() -> Self {
        Self {
            n_augmented: 4,
            max_rotation: 20.0,
            scale_range: [0.8, 1.25],
            max_translation: 0.1,
            blur_sigma_range: [0.0, 2.0],
            rng_seed: 0,
        }
    }
}

impl AugmentationParams {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(arg_err(format!("invalid scale range [{lo}, {hi}]")));
        }
        let [s0, s1] = self.blur_sigma_range;
        if !(s0 >= 0.0 && s1 >= s0) {
            return Err(arg_err(format!("invalid blur sigma range [{s0}, {s1}]")));
        }
        if !(self.max_rotation >= 0.0 && self.max_translation >= 0.0) {
            return Err(arg_err("rotation and translation limits must be >= 0"));
        }
        Ok(())
    }
}

/// A similarity transform about the target centroid followed by a blur.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub rotation_deg: f64,
    pub scale: f64,
    /// `(dy, dx)` in pixels.
    pub translation: (f64, f64),
    pub blur_sigma: f64,
}

impl Transform {
    pub fn identity() -> Self {
        Self { rotation_deg: 0.0, scale: 1.0, translation: (0.0, 0.0), blur_sigma: 0.0 }
    }

    pub fn sample(params: &AugmentationParams, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let uniform =
            |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let rotation_deg = uniform(rng, -params.max_rotation, params.max_rotation);
        // Log-uniform so that [0.8, 1.25] is symmetric around no scaling.
        let [lo, hi] = params.scale_range;
        let scale = uniform(rng, lo.ln(), hi.ln()).exp();
        let ty = params.max_translation * height as f64;
        let tx = params.max_translation * width as f64;
        let translation = (uniform(rng, -ty, ty), uniform(rng, -tx, tx));
        let [s0, s1] = params.blur_sigma_range;
        let blur_sigma = uniform(rng, s0, s1);
        Self { rotation_deg, scale, translation, blur_sigma }
    }
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub image: RgbImage,
    pub mask: LabelMask,
    /// Set when the input mask was empty and nothing could be warped.
    pub degenerate: bool,
}

fn check_pair(image: &RgbImage, mask: &LabelMask) -> Result<()> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(dim_err(format!(
            "image is {}x{}, mask is {}x{}",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    if !mask.is_binary() {
        return Err(arg_err("augmentation mask must be binary"));
    }
    Ok(())
}

/// Replaces masked pixels by a diffusion fill seeded from the nearest unmasked pixel.
pub fn inpaint_background(image: &RgbImage, mask: &LabelMask) -> Result<RgbImage> {
    check_pair(image, mask)?;
    let (h, w) = (image.height(), image.width());
    let hole: Vec<bool> = mask.data().iter().map(|&v| v != 0).collect();
    let holes = hole.iter().filter(|&&b| b).count();
    if holes == 0 {
        return Ok(image.clone());
    }
    if holes == h * w {
        return Err(arg_err("mask covers the whole image; nothing to inpaint from"));
    }

    let mut data = image.data().to_vec();
    // Breadth-first pass from the known region copies the nearest boundary colour inward.
    let mut filled = hole.iter().map(|&b| !b).collect::<Vec<_>>();
    let mut queue: VecDeque<usize> = (0..h * w).filter(|&i| filled[i]).collect();
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / w, i % w);
        for j in neighbours(y, x, h, w) {
            if !filled[j] {
                filled[j] = true;
                data.copy_within(3 * i..3 * i + 3, 3 * j);
                queue.push_back(j);
            }
        }
    }

    let hole_idx: Vec<usize> = (0..h * w).filter(|&i| hole[i]).collect();
    for _ in 0..INPAINT_MAX_ITERS {
        let updates: Vec<[f32; 3]> = hole_idx
            .par_iter()
            .map(|&i| {
                let (y, x) = (i / w, i % w);
                let mut acc = [0.0f32; 3];
                let mut n = 0.0f32;
                for j in neighbours(y, x, h, w) {
                    for c in 0..3 {
                        acc[c] += data[3 * j + c];
                    }
                    n += 1.0;
                }
                acc.map(|v| v / n)
            })
            .collect();
        let mut max_change = 0.0f32;
        for (&i, new) in hole_idx.iter().zip(&updates) {
            for c in 0..3 {
                max_change = max_change.max((data[3 * i + c] - new[c]).abs());
                data[3 * i + c] = new[c];
            }
        }
        if max_change < INPAINT_TOLERANCE {
            break;
        }
    }
    RgbImage::new(h, w, data)
}

fn neighbours(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let up = (y > 0).then(|| (y - 1) * w + x);
    let down = (y + 1 < h).then(|| (y + 1) * w + x);
    let left = (x > 0).then(|| y * w + x - 1);
    let right = (x + 1 < w).then(|| y * w + x + 1);
    [up, down, left, right].into_iter().flatten()
}

/// Holds the filled background and target centroid of one frame so repeated warps reuse them.
#[derive(Debug, Clone)]
pub struct Augmenter {
    image: RgbImage,
    mask: LabelMask,
    background: RgbImage,
    centroid: Option<(f64, f64)>,
}

impl Augmenter {
    pub fn new(image: &RgbImage, mask: &LabelMask) -> Result<Self> {
        check_pair(image, mask)?;
        let background = inpaint_background(image, mask)?;
        Ok(Self { image: image.clone(), mask: mask.clone(), background, centroid: centroid(mask) })
    }

    pub fn background(&self) -> &RgbImage {
        &self.background
    }

    /// Warps and blurs the target with `t` and pastes it onto the filled background.
    pub fn apply(&self, t: &Transform) -> Augmented {
        let Some((cy, cx)) = self.centroid else {
            return Augmented { image: self.image.clone(), mask: self.mask.clone(), degenerate: true };
        };
        let (h, w) = (self.image.height(), self.image.width());
        let theta = t.rotation_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let inv = 1.0 / t.scale;
        let (ty, tx) = t.translation;

        // Inverse map from output pixel to source location.
        let source = |y: usize, x: usize| {
            let dy = y as f64 - cy - ty;
            let dx = x as f64 - cx - tx;
            let sy = cy + inv * (cos * dy - sin * dx);
            let sx = cx + inv * (sin * dy + cos * dx);
            (sy, sx)
        };

        let mut warped_mask = LabelMask::empty(h, w);
        let mut target = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = source(y, x);
                let (ny, nx) = (sy.round(), sx.round());
                if ny < 0.0 || nx < 0.0 || ny >= h as f64 || nx >= w as f64 {
                    continue;
                }
                if self.mask.get(ny as usize, nx as usize) == 0 {
                    continue;
                }
                warped_mask.set(y, x, 1);
                let rgb = bilinear_rgb(&self.image, sy, sx);
                target[3 * (y * w + x)..3 * (y * w + x) + 3].copy_from_slice(&rgb);
            }
        }

        let target = if t.blur_sigma > 0.0 { masked_blur(&target, &warped_mask, t.blur_sigma) } else { target };
        let mut out = self.background.data().to_vec();
        for (i, &m) in warped_mask.data().iter().enumerate() {
            if m != 0 {
                out[3 * i..3 * i + 3].copy_from_slice(&target[3 * i..3 * i + 3]);
            }
        }
        let image = RgbImage::new(h, w, out).expect("geometry preserved");
        Augmented { image, mask: warped_mask, degenerate: false }
    }

    /// Draws a transform from `params`; redraws while the warped target leaves the frame.
    pub fn random(&self, params: &AugmentationParams, rng: &mut impl Rng) -> Augmented {
        let (h, w) = (self.image.height(), self.image.width());
        for _ in 0..MAX_WARP_ATTEMPTS {
            let out = self.apply(&Transform::sample(params, h, w, rng));
            if out.degenerate || out.mask.count_nonzero() > 0 {
                return out;
            }
        }
        log::warn!("augmentation kept losing the target; using the identity warp");
        self.apply(&Transform::identity())
    }
}

fn centroid(mask: &LabelMask) -> Option<(f64, f64)> {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) != 0 {
                sy += y as f64;
                sx += x as f64;
                n += 1;
            }
        }
    }
    (n > 0).then(|| (sy / n as f64, sx / n as f64))
}

fn bilinear_rgb(img: &RgbImage, sy: f64, sx: f64) -> [f32; 3] {
    let (h, w) = (img.height(), img.width());
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
    let (a, b, c, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
    std::array::from_fn(|k| (1.0 - fy) * ((1.0 - fx) * a[k] + fx * b[k]) + fy * ((1.0 - fx) * c[k] + fx * d[k]))
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable zero-padded convolution of `channels` interleaved planes.
pub(crate) fn separable_blur(data: &[f64], h: usize, w: usize, channels: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = x as isize + ki as isize - r;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                for c in 0..channels {
                    tmp[(y * w + x) * channels + c] += kv * data[(y * w + sx as usize) * channels + c];
                }
            }
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for (ki, &kv) in kernel.iter().enumerate() {
            let sy = y as isize + ki as isize - r;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let src = &tmp[sy as usize * w * channels..(sy as usize + 1) * w * channels];
            let dst = &mut out[y * w * channels..(y + 1) * w * channels];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    out
}

/// Blur restricted to the target: `G * (T M) / G * M` on pixels where `M` is set.
fn masked_blur(target: &[f32], mask: &LabelMask, sigma: f64) -> Vec<f32> {
    let (h, w) = (mask.height(), mask.width());
    let kernel = gaussian_kernel(sigma);
    let mut stacked = vec![0.0f64; 4 * h * w];
    for (i, &m) in mask.data().iter().enumerate() {
        if m != 0 {
            for c in 0..3 {
                stacked[4 * i + c] = f64::from(target[3 * i + c]);
            }
            stacked[4 * i + 3] = 1.0;
        }
    }
    let blurred = separable_blur(&stacked, h, w, 4, &kernel);
    let mut out = target.to_vec();
    for (i, &m) in mask.data().iter().enumerate() {
        let norm = blurred[4 * i + 3];
        if m != 0 && norm > 0.0 {
            for c in 0..3 {
                out[3 * i + c] = (blurred[4 * i + c] / norm) as f32;
            }
        }
    }
    out
}

/// One random warp-and-blur of the target; see [`Augmenter`] for repeated use.
pub fn random_affine_blur(
    image: &RgbImage,
    mask: &LabelMask,
    params: &AugmentationParams,
    rng: &mut impl Rng,
) -> Result<Augmented> {
    params.validate()?;
    Ok(Augmenter::new(image, mask)?.random(params, rng))
}

/// The unmodified pair followed by `n_augmented` augmented pairs.
///
/// Sample `k` draws from its own ChaCha stream, so the set is identical whatever the
/// thread count.
pub fn generate_initial_set(
    image: &RgbImage,
    mask: &LabelMask,
    params: &AugmentationParams,
) -> Result<Vec<(RgbImage, LabelMask)>> {
    params.validate()?;
    check_pair(image, mask)?;
    let mut out = vec![(image.clone(), mask.clone())];
    if params.n_augmented == 0 {
        return Ok(out);
    }
    let aug = Augmenter::new(image, mask)?;
    let extra: Vec<(RgbImage, LabelMask)> = (1..=params.n_augmented)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
            rng.set_stream(k as u64);
            let a = aug.random(params, &mut rng);
            (a.image, a.mask)
        })
        .collect();
    out.extend(extra);
    Ok(out)
}
