//! Dense single-frame tensors and the linear kernels the target model is built on.
//!
//! Conventions used throughout the crate:
//! - "Convolution" is cross-correlation: the kernel is not flipped.
//! - Kernels are square with odd size and zero padding of `(size - 1) / 2` cells,
//!   so spatial size is preserved.
//! - Bilinear upsampling maps output pixel `i` to input coordinate
//!   `(i + 0.5) / factor - 0.5`, clamped to the valid range.
//!
//! Values are stored as `f32`; every reduction accumulates in `f64`.

use rayon::prelude::*;

use crate::error::{arg_err, dim_err, Result};

/// Dense `height x width x channels` grid stored as channel planes (planar, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    stride: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, stride: usize, data: Vec<f32>) -> Result<Self> {
        if stride == 0 {
            return Err(arg_err("feature map stride must be >= 1"));
        }
        if data.len() != height * width * channels {
            return Err(dim_err(format!(
                "feature map data has {} values, expected {}x{}x{} = {}",
                data.len(),
                height,
                width,
                channels,
                height * width * channels
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(arg_err(format!("feature map value at index {pos} is not finite")));
        }
        Ok(Self { height, width, channels, stride, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, stride: usize) -> Self {
        Self { height, width, channels, stride: stride.max(1), data: vec![0.0; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Inner product over all values.
    pub fn dot(&self, other: &FeatureMap) -> f64 {
        dot_f32(&self.data, &other.data)
    }
}

/// Convolution kernel `[out_channels][in_channels][size][size]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    out_channels: usize,
    in_channels: usize,
    size: usize,
    data: Vec<f32>,
}

impl ConvKernel {
    pub fn new(out_channels: usize, in_channels: usize, size: usize, data: Vec<f32>) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(arg_err(format!("kernel size must be odd, got {size}")));
        }
        if out_channels == 0 || in_channels == 0 {
            return Err(arg_err("kernel channel counts must be >= 1"));
        }
        let expected = out_channels * in_channels * size * size;
        if data.len() != expected {
            return Err(dim_err(format!("kernel data has {} values, expected {expected}", data.len())));
        }
        Ok(Self { out_channels, in_channels, size, data })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, size: usize) -> Self {
        assert!(size % 2 == 1, "kernel size must be odd");
        Self { out_channels, in_channels, size, data: vec![0.0; out_channels * in_channels * size * size] }
    }

    /// Kernel that copies input channel `c` to output channel `c` (square, `channels` in and out).
    pub fn identity(channels: usize, size: usize) -> Self {
        let mut k = Self::zeros(channels, channels, size);
        let p = size / 2;
        for c in 0..channels {
            let idx = k.index(c, c, p, p);
            k.data[idx] = 1.0;
        }
        k
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn k_h(&self) -> usize {
        self.size
    }

    pub fn k_w(&self) -> usize {
        self.size
    }

    pub fn padding(&self) -> usize {
        (self.size - 1) / 2
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &ConvKernel) -> bool {
        self.out_channels == other.out_channels && self.in_channels == other.in_channels && self.size == other.size
    }

    #[inline]
    pub fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.size + ky) * self.size + kx
    }

    pub fn at(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        self.data[self.index(o, i, ky, kx)]
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    pub fn dot(&self, other: &ConvKernel) -> f64 {
        dot_f32(&self.data, &other.data)
    }
}

/// Single-channel score grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    stride: usize,
    data: Vec<f32>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, stride: usize, data: Vec<f32>) -> Result<Self> {
        if stride == 0 {
            return Err(arg_err("score map stride must be >= 1"));
        }
        if data.len() != height * width {
            return Err(dim_err(format!("score map data has {} values, expected {}", data.len(), height * width)));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(arg_err("score map contains non-finite values"));
        }
        Ok(Self { height, width, stride, data })
    }

    pub fn filled(height: usize, width: usize, stride: usize, value: f32) -> Self {
        Self { height, width, stride: stride.max(1), data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dot(&self, other: &ScoreMap) -> f64 {
        dot_f32(&self.data, &other.data)
    }

    pub fn into_feature_map(self) -> FeatureMap {
        FeatureMap { height: self.height, width: self.width, channels: 1, stride: self.stride, data: self.data }
    }

    pub fn from_feature_map(fm: FeatureMap) -> Result<Self> {
        if fm.channels != 1 {
            return Err(dim_err(format!("score map needs a single channel, got {}", fm.channels)));
        }
        Ok(Self { height: fm.height, width: fm.width, stride: fm.stride, data: fm.data })
    }
}

pub(crate) fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Scalar types the planar kernels read; all arithmetic happens in `f64`.
pub(crate) trait Real: Copy + Send + Sync {
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// `acc[y][x] += weight * src[y + oy][x + ox]` wherever the source index is in bounds.
#[allow(clippy::too_many_arguments)]
fn add_shifted<T: Real>(acc: &mut [f64], src: &[T], h: usize, w: usize, oy: isize, ox: isize, weight: f64) {
    let (y0, y1) = valid_range(h, oy);
    let (x0, x1) = valid_range(w, ox);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + oy) as usize;
        let dst = &mut acc[y * w + x0..y * w + x1];
        let s0 = (x0 as isize + ox) as usize;
        let row = &src[sy * w + s0..sy * w + s0 + (x1 - x0)];
        for (d, &s) in dst.iter_mut().zip(row) {
            *d += weight * s.to_f64();
        }
    }
}

/// `sum_{y,x} a[y][x] * src[y + oy][x + ox]` over in-bounds source indices.
fn dot_shifted<A: Real, B: Real>(a: &[A], src: &[B], h: usize, w: usize, oy: isize, ox: isize) -> f64 {
    let (y0, y1) = valid_range(h, oy);
    let (x0, x1) = valid_range(w, ox);
    if x0 >= x1 {
        return 0.0;
    }
    let mut sum = 0.0;
    for y in y0..y1 {
        let sy = (y as isize + oy) as usize;
        let s0 = (x0 as isize + ox) as usize;
        let ra = &a[y * w + x0..y * w + x1];
        let rs = &src[sy * w + s0..sy * w + s0 + (x1 - x0)];
        sum += ra.iter().zip(rs).map(|(&p, &q)| p.to_f64() * q.to_f64()).sum::<f64>();
    }
    sum
}

/// Destination indices `d` in `[lo, hi)` with `d + offset` inside `[0, n)`.
fn valid_range(n: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (n as isize - offset).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// Spatial extent plus the `[out][in][size][size]` kernel layout shared by the planar kernels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub h: usize,
    pub w: usize,
    pub shape: KernelShape,
}

impl Geometry {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn offset(&self, k: usize) -> isize {
        k as isize - (self.shape.size / 2) as isize
    }

    fn kidx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        let s = self.shape.size;
        ((o * self.shape.in_channels + i) * s + ky) * s + kx
    }
}

/// Planar cross-correlation; `src` holds `in_channels` planes, output has `out_channels`.
pub(crate) fn conv_planes<T: Real, K: Real>(src: &[T], kernel: &[K], g: Geometry) -> Vec<f64> {
    let n = g.plane();
    let s = g.shape.size;
    let planes: Vec<Vec<f64>> = (0..g.shape.out_channels)
        .into_par_iter()
        .map(|o| {
            let mut acc = vec![0.0f64; n];
            for i in 0..g.shape.in_channels {
                let plane = &src[i * n..(i + 1) * n];
                for ky in 0..s {
                    for kx in 0..s {
                        let wt = kernel[g.kidx(o, i, ky, kx)].to_f64();
                        if wt != 0.0 {
                            add_shifted(&mut acc, plane, g.h, g.w, g.offset(ky), g.offset(kx), wt);
                        }
                    }
                }
            }
            acc
        })
        .collect();
    planes.concat()
}

/// Adjoint of [`conv_planes`] with respect to `src`.
pub(crate) fn conv_adjoint_planes<T: Real, K: Real>(grad: &[T], kernel: &[K], g: Geometry) -> Vec<f64> {
    let n = g.plane();
    let s = g.shape.size;
    let planes: Vec<Vec<f64>> = (0..g.shape.in_channels)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![0.0f64; n];
            for o in 0..g.shape.out_channels {
                let plane = &grad[o * n..(o + 1) * n];
                for ky in 0..s {
                    for kx in 0..s {
                        let wt = kernel[g.kidx(o, i, ky, kx)].to_f64();
                        if wt != 0.0 {
                            add_shifted(&mut acc, plane, g.h, g.w, -g.offset(ky), -g.offset(kx), wt);
                        }
                    }
                }
            }
            acc
        })
        .collect();
    planes.concat()
}

/// Gradient of `<conv_planes(src, k), grad>` with respect to `k`.
pub(crate) fn kernel_grad_planes<T: Real, G: Real>(src: &[T], grad: &[G], g: Geometry) -> Vec<f64> {
    let n = g.plane();
    let s = g.shape.size;
    let per_out: Vec<Vec<f64>> = (0..g.shape.out_channels)
        .into_par_iter()
        .map(|o| {
            let go = &grad[o * n..(o + 1) * n];
            let mut out = Vec::with_capacity(g.shape.in_channels * s * s);
            for i in 0..g.shape.in_channels {
                let xi = &src[i * n..(i + 1) * n];
                for ky in 0..s {
                    for kx in 0..s {
                        out.push(dot_shifted(go, xi, g.h, g.w, g.offset(ky), g.offset(kx)));
                    }
                }
            }
            out
        })
        .collect();
    per_out.concat()
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

/// Zero-padded cross-correlation preserving spatial size.
pub fn conv2d(x: &FeatureMap, k: &ConvKernel) -> Result<FeatureMap> {
    if k.in_channels != x.channels {
        return Err(dim_err(format!(
            "conv2d: kernel expects {} input channels, feature map has {}",
            k.in_channels, x.channels
        )));
    }
    let g = Geometry { h: x.height, w: x.width, shape: KernelShape::of(k) };
    Ok(FeatureMap {
        height: x.height,
        width: x.width,
        channels: k.out_channels,
        stride: x.stride,
        data: to_f32(conv_planes(&x.data, &k.data, g)),
    })
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_adjoint(g: &FeatureMap, k: &ConvKernel) -> Result<FeatureMap> {
    if g.channels != k.out_channels {
        return Err(dim_err(format!(
            "conv2d_adjoint: kernel has {} output channels, gradient has {}",
            k.out_channels, g.channels
        )));
    }
    let geo = Geometry { h: g.height, w: g.width, shape: KernelShape::of(k) };
    Ok(FeatureMap {
        height: g.height,
        width: g.width,
        channels: k.in_channels,
        stride: g.stride,
        data: to_f32(conv_adjoint_planes(&g.data, &k.data, geo)),
    })
}

/// Shape of a square convolution kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelShape {
    pub out_channels: usize,
    pub in_channels: usize,
    pub size: usize,
}

impl KernelShape {
    pub fn of(k: &ConvKernel) -> Self {
        Self { out_channels: k.out_channels, in_channels: k.in_channels, size: k.size }
    }
}

/// Gradient of `<conv2d(x, k), g>` with respect to `k`.
pub fn kernel_grad_adjoint(x: &FeatureMap, g: &FeatureMap, shape: KernelShape) -> Result<ConvKernel> {
    if shape.size.is_multiple_of(2) {
        return Err(arg_err(format!("kernel size must be odd, got {}", shape.size)));
    }
    if x.channels != shape.in_channels || g.channels != shape.out_channels || x.height != g.height || x.width != g.width
    {
        return Err(dim_err(format!(
            "kernel_grad_adjoint: x is {}x{}x{}, g is {}x{}x{}, kernel {}->{}",
            x.height, x.width, x.channels, g.height, g.width, g.channels, shape.in_channels, shape.out_channels
        )));
    }
    let geo = Geometry { h: x.height, w: x.width, shape };
    ConvKernel::new(
        shape.out_channels,
        shape.in_channels,
        shape.size,
        to_f32(kernel_grad_planes(&x.data, &g.data, geo)),
    )
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    t: f64,
}

fn axis_taps(n_in: usize, factor: usize, n_out: usize) -> Vec<Tap> {
    let f = factor as f64;
    let max = (n_in - 1) as f64;
    (0..n_out)
        .map(|j| {
            let src = ((j as f64 + 0.5) / f - 0.5).clamp(0.0, max);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            Tap { i0, i1, t: src - i0 as f64 }
        })
        .collect()
}

/// Bilinear upsampling by an integer factor followed by a top-left crop.
///
/// This is the operator that maps a coarse score grid onto label resolution;
/// with `out = in * factor` it is plain upsampling.
#[derive(Debug, Clone)]
pub struct BilinearUpsampler {
    in_h: usize,
    in_w: usize,
    taps_y: Vec<Tap>,
    taps_x: Vec<Tap>,
}

impl BilinearUpsampler {
    pub fn new(in_h: usize, in_w: usize, factor: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if factor == 0 {
            return Err(arg_err("upsampling factor must be >= 1"));
        }
        if in_h == 0 || in_w == 0 {
            return Err(arg_err("cannot upsample an empty map"));
        }
        if out_h > in_h * factor || out_w > in_w * factor {
            return Err(dim_err(format!("{in_h}x{in_w} map at factor {factor} does not cover {out_h}x{out_w}")));
        }
        Ok(Self { in_h, in_w, taps_y: axis_taps(in_h, factor, out_h), taps_x: axis_taps(in_w, factor, out_w) })
    }

    pub fn in_shape(&self) -> (usize, usize) {
        (self.in_h, self.in_w)
    }

    pub fn out_shape(&self) -> (usize, usize) {
        (self.taps_y.len(), self.taps_x.len())
    }

    pub fn apply(&self, src: &[f32]) -> Vec<f32> {
        to_f32(self.apply_f64(src))
    }

    pub fn apply_adjoint(&self, g: &[f32]) -> Vec<f32> {
        to_f32(self.apply_adjoint_f64(g))
    }

    pub(crate) fn apply_f64<T: Real>(&self, src: &[T]) -> Vec<f64> {
        debug_assert_eq!(src.len(), self.in_h * self.in_w);
        let out_w = self.taps_x.len();
        // Horizontal pass on every input row.
        let mut rows = vec![0.0f64; self.in_h * out_w];
        for y in 0..self.in_h {
            let s = &src[y * self.in_w..(y + 1) * self.in_w];
            let r = &mut rows[y * out_w..(y + 1) * out_w];
            for (dst, tap) in r.iter_mut().zip(&self.taps_x) {
                *dst = (1.0 - tap.t) * s[tap.i0].to_f64() + tap.t * s[tap.i1].to_f64();
            }
        }
        let mut out = Vec::with_capacity(self.taps_y.len() * out_w);
        for tap in &self.taps_y {
            let r0 = &rows[tap.i0 * out_w..(tap.i0 + 1) * out_w];
            let r1 = &rows[tap.i1 * out_w..(tap.i1 + 1) * out_w];
            out.extend(r0.iter().zip(r1).map(|(&a, &b)| (1.0 - tap.t) * a + tap.t * b));
        }
        out
    }

    pub(crate) fn apply_adjoint_f64<T: Real>(&self, g: &[T]) -> Vec<f64> {
        let out_w = self.taps_x.len();
        debug_assert_eq!(g.len(), self.taps_y.len() * out_w);
        let mut rows = vec![0.0f64; self.in_h * out_w];
        for (oy, tap) in self.taps_y.iter().enumerate() {
            let gr = &g[oy * out_w..(oy + 1) * out_w];
            for (ox, &v) in gr.iter().enumerate() {
                let v = v.to_f64();
                rows[tap.i0 * out_w + ox] += (1.0 - tap.t) * v;
                rows[tap.i1 * out_w + ox] += tap.t * v;
            }
        }
        let mut out = vec![0.0f64; self.in_h * self.in_w];
        for y in 0..self.in_h {
            let r = &rows[y * out_w..(y + 1) * out_w];
            let o = &mut out[y * self.in_w..(y + 1) * self.in_w];
            for (&v, tap) in r.iter().zip(&self.taps_x) {
                o[tap.i0] += (1.0 - tap.t) * v;
                o[tap.i1] += tap.t * v;
            }
        }
        out
    }
}

fn check_factor(stride: usize, factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(arg_err("upsampling factor must be >= 1"));
    }
    if !stride.is_multiple_of(factor) {
        return Err(arg_err(format!("upsampling factor {factor} does not divide map stride {stride}")));
    }
    Ok(())
}

/// Bilinear upsampling by an integer factor; the output stride is `stride / factor`.
pub fn bilinear_upsample(s: &ScoreMap, factor: usize) -> Result<ScoreMap> {
    check_factor(s.stride, factor)?;
    let up = BilinearUpsampler::new(s.height, s.width, factor, s.height * factor, s.width * factor)?;
    Ok(ScoreMap {
        height: s.height * factor,
        width: s.width * factor,
        stride: s.stride / factor,
        data: up.apply(&s.data),
    })
}

/// Adjoint of [`bilinear_upsample`]; `g` must be an exact multiple of `factor` per side.
pub fn bilinear_upsample_adjoint(g: &ScoreMap, factor: usize) -> Result<ScoreMap> {
    if factor == 0 {
        return Err(arg_err("upsampling factor must be >= 1"));
    }
    if !g.height.is_multiple_of(factor) || !g.width.is_multiple_of(factor) || g.height == 0 || g.width == 0 {
        return Err(dim_err(format!("{}x{} map is not an upsampled grid at factor {factor}", g.height, g.width)));
    }
    let (h, w) = (g.height / factor, g.width / factor);
    let up = BilinearUpsampler::new(h, w, factor, g.height, g.width)?;
    Ok(ScoreMap { height: h, width: w, stride: g.stride * factor, data: up.apply_adjoint(&g.data) })
}
