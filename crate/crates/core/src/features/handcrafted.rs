//! Built-in per-cell descriptors so sequences can be processed without an external backbone.
//!
//! Channel layout per `stride x stride` cell:
//!
//! | channels | content                                                   |
//! |----------|-----------------------------------------------------------|
//! | 0..3     | mean RGB                                                  |
//! | 3..6     | mean RGB smoothed over the cell grid, sigma = 1 cell      |
//! | 6..9     | mean RGB smoothed over the cell grid, sigma = 2 cells     |
//! | 9..17    | magnitude-weighted gradient orientation histogram, 8 bins |
//! | 17       | standard deviation of luma                                |
//!
//! Every channel is then standardized over the frame.

use std::f64::consts::TAU;

use rayon::prelude::*;

use crate::augment::{gaussian_kernel, separable_blur};
use crate::error::{arg_err, Result};
use crate::frame::RgbImage;
use crate::tensor::FeatureMap;

pub const HANDCRAFTED_CHANNELS: usize = 18;

const ORIENTATION_BINS: usize = 8;
const VARIANCE_FLOOR: f64 = 1e-6;

pub fn extract_handcrafted_features(image: &RgbImage, stride: usize) -> Result<FeatureMap> {
    let (gh, gw, planes) = raw_planes(image, stride)?;
    let data = planes.par_chunks(gh * gw).flat_map_iter(standardize).collect();
    FeatureMap::new(gh, gw, HANDCRAFTED_CHANNELS, stride, data)
}

/// Unstandardized planar channels and the grid size.
fn raw_planes(image: &RgbImage, stride: usize) -> Result<(usize, usize, Vec<f64>)> {
    if stride == 0 {
        return Err(arg_err("feature stride must be >= 1"));
    }
    let (h, w) = (image.height(), image.width());
    if h < stride || w < stride {
        return Err(arg_err(format!("{h}x{w} image is smaller than stride {stride}")));
    }
    let (gh, gw) = (h.div_ceil(stride), w.div_ceil(stride));
    let cells = gh * gw;
    let gray: Vec<f64> = image.gray().into_iter().map(f64::from).collect();
    let (magnitude, bin) = gradients(&gray, h, w);

    // Per cell: [r, g, b, hist.., luma std].
    let per_cell: Vec<[f64; 3 + ORIENTATION_BINS + 1]> = (0..cells)
        .into_par_iter()
        .map(|cell| {
            let (cy, cx) = (cell / gw, cell % gw);
            let (y0, y1) = (cy * stride, ((cy + 1) * stride).min(h));
            let (x0, x1) = (cx * stride, ((cx + 1) * stride).min(w));
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let mut out = [0.0; 3 + ORIENTATION_BINS + 1];
            let mut lsum = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = image.pixel(y, x);
                    for c in 0..3 {
                        out[c] += f64::from(p[c]);
                    }
                    let i = y * w + x;
                    out[3 + bin[i]] += magnitude[i];
                    lsum += gray[i];
                }
            }
            for v in &mut out[..3 + ORIENTATION_BINS] {
                *v /= n;
            }
            let mean = lsum / n;
            let mut var = 0.0;
            for y in y0..y1 {
                var += gray[y * w + x0..y * w + x1].iter().map(|g| (g - mean).powi(2)).sum::<f64>();
            }
            out[3 + ORIENTATION_BINS] = (var / n).sqrt();
            out
        })
        .collect();

    let mut planes = vec![0.0f64; HANDCRAFTED_CHANNELS * cells];
    let mut mean_rgb = vec![0.0f64; 3 * cells];
    for (i, v) in per_cell.iter().enumerate() {
        for c in 0..3 {
            planes[c * cells + i] = v[c];
            mean_rgb[3 * i + c] = v[c];
        }
        for b in 0..ORIENTATION_BINS {
            planes[(9 + b) * cells + i] = v[3 + b];
        }
        planes[17 * cells + i] = v[3 + ORIENTATION_BINS];
    }
    for (k, sigma) in [1.0, 2.0].into_iter().enumerate() {
        let smoothed = normalized_blur(&mean_rgb, gh, gw, sigma);
        for i in 0..cells {
            for c in 0..3 {
                planes[(3 + 3 * k + c) * cells + i] = smoothed[3 * i + c];
            }
        }
    }
    Ok((gh, gw, planes))
}

/// Central-difference gradient magnitude and orientation bin per pixel.
fn gradients(gray: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let at = |y: usize, x: usize| gray[y * w + x];
    let mut mag = vec![0.0; h * w];
    let mut bin = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let gx = at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1));
            let gy = at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x);
            let m = (gx * gx + gy * gy).sqrt();
            if m > 0.0 {
                let angle = gy.atan2(gx).rem_euclid(TAU);
                mag[y * w + x] = m;
                bin[y * w + x] = ((angle / TAU * ORIENTATION_BINS as f64) as usize).min(ORIENTATION_BINS - 1);
            }
        }
    }
    (mag, bin)
}

/// Gaussian smoothing of interleaved RGB cells, renormalized at the grid border.
fn normalized_blur(rgb: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let blurred = separable_blur(rgb, h, w, 3, &kernel);
    let weight = separable_blur(&vec![1.0; h * w], h, w, 1, &kernel);
    blurred.iter().enumerate().map(|(i, v)| v / weight[i / 3]).collect()
}

fn standardize(plane: &[f64]) -> Vec<f32> {
    let n = plane.len() as f64;
    let mean = plane.iter().sum::<f64>() / n;
    let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.max(VARIANCE_FLOOR).sqrt();
    plane.iter().map(|v| ((v - mean) / std) as f32).collect()
}
