//! The two-layer linear target model: a 1x1 channel-compression layer followed by a
//! 3x3 single-output scoring layer, with no nonlinearity in between.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, dim_err, Result};
use crate::frame::LabelMask;
use crate::tensor::{conv2d, BilinearUpsampler, ConvKernel, FeatureMap, ScoreMap};

/// Compressed channel count used unless configured otherwise.
pub const DEFAULT_COMPRESSED_CHANNELS: usize = 96;
/// Standard deviation of the random initialization.
pub const INIT_STD: f32 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetWeights {
    pub w1: ConvKernel,
    pub w2: ConvKernel,
}

impl TargetWeights {
    pub fn new(w1: ConvKernel, w2: ConvKernel) -> Result<Self> {
        if w1.k_h() != 1 {
            return Err(arg_err(format!("w1 must be 1x1, got {}x{}", w1.k_h(), w1.k_w())));
        }
        if w2.k_h() != 3 || w2.out_channels() != 1 {
            return Err(arg_err("w2 must be a 3x3 kernel with one output channel"));
        }
        if w2.in_channels() != w1.out_channels() {
            return Err(dim_err(format!(
                "w2 takes {} channels but w1 produces {}",
                w2.in_channels(),
                w1.out_channels()
            )));
        }
        Ok(Self { w1, w2 })
    }

    pub fn zeros(feature_channels: usize, compressed: usize) -> Self {
        Self { w1: ConvKernel::zeros(compressed, feature_channels, 1), w2: ConvKernel::zeros(1, compressed, 3) }
    }

    pub fn feature_channels(&self) -> usize {
        self.w1.in_channels()
    }

    pub fn compressed_channels(&self) -> usize {
        self.w1.out_channels()
    }
}

/// Gaussian(0, 0.01) initialization from a seeded ChaCha stream (w1 first, then w2).
pub fn init_weights(feature_channels: usize, compressed: usize, seed: u64) -> Result<TargetWeights> {
    if feature_channels == 0 || compressed == 0 {
        return Err(arg_err("channel counts must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, INIT_STD).expect("positive std");
    let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
    let w1 = ConvKernel::new(compressed, feature_channels, 1, draw(compressed * feature_channels))?;
    let w2 = ConvKernel::new(1, compressed, 3, draw(compressed * 9))?;
    TargetWeights::new(w1, w2)
}

/// Compressed features `w1 * x`.
pub fn compress(x: &FeatureMap, w: &TargetWeights) -> Result<FeatureMap> {
    conv2d(x, &w.w1)
}

/// Scores `w2 * (w1 * x)`.
pub fn forward(x: &FeatureMap, w: &TargetWeights) -> Result<ScoreMap> {
    let h = compress(x, w)?;
    ScoreMap::from_feature_map(conv2d(&h, &w.w2)?)
}

/// Bilinearly upsample `s` to full resolution and crop to the image size.
pub fn upsample_to_image(s: &ScoreMap, image_h: usize, image_w: usize) -> Result<Vec<f32>> {
    if s.is_empty() {
        return Err(arg_err("empty score map"));
    }
    let up = BilinearUpsampler::new(s.height(), s.width(), s.stride(), image_h, image_w)?;
    Ok(up.apply(s.data()))
}

/// Full-resolution 0/1 mask of pixels whose interpolated score exceeds `threshold`.
pub fn predict_mask(s: &ScoreMap, image_h: usize, image_w: usize, threshold: f32) -> Result<LabelMask> {
    let up = upsample_to_image(s, image_h, image_w)?;
    LabelMask::new(image_h, image_w, up.into_iter().map(|v| u8::from(v > threshold)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d;

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_weights(512, 96, 7).unwrap();
        let b = init_weights(512, 96, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.w1.len(), 512 * 96);
        assert_eq!(a.w2.len(), 96 * 9);
        assert_ne!(a, init_weights(512, 96, 8).unwrap());
    }

    #[test]
    fn init_mean_within_three_sigma() {
        let w = init_weights(1000, 100, 3).unwrap();
        let n = w.w1.len() as f64;
        assert_eq!(n, 1e5);
        let mean = w.w1.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * 0.01 / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn zero_weights_give_zero_scores() {
        let x = FeatureMap::new(3, 3, 2, 4, (0..18).map(|v| v as f32).collect()).unwrap();
        let s = forward(&x, &TargetWeights::zeros(2, 5)).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        assert_eq!((s.height(), s.width(), s.stride()), (3, 3, 4));
    }

    #[test]
    fn identity_composition() {
        let x = FeatureMap::new(3, 4, 1, 1, (0..12).map(|v| v as f32 - 5.0).collect()).unwrap();
        let w = TargetWeights::new(ConvKernel::new(1, 1, 1, vec![1.0]).unwrap(), ConvKernel::identity(1, 3)).unwrap();
        assert_eq!(forward(&x, &w).unwrap().data(), x.data());
    }

    #[test]
    fn forward_is_two_convolutions() {
        let x = FeatureMap::new(4, 5, 3, 8, (0..60).map(|v| ((v * 7) % 11) as f32 - 5.0).collect()).unwrap();
        let w = init_weights(3, 4, 11).unwrap();
        let direct = conv2d(&conv2d(&x, &w.w1).unwrap(), &w.w2).unwrap();
        assert_eq!(forward(&x, &w).unwrap().data(), direct.data());
    }

    #[test]
    fn channel_mismatch() {
        let x = FeatureMap::zeros(2, 2, 3, 1);
        assert!(forward(&x, &TargetWeights::zeros(2, 4)).is_err());
    }

    #[test]
    fn constant_scores_decode_to_full_or_empty() {
        let one = ScoreMap::filled(2, 3, 8, 1.0);
        assert_eq!(predict_mask(&one, 13, 20, 0.5).unwrap().count_nonzero(), 13 * 20);
        let zero = ScoreMap::filled(2, 3, 8, 0.0);
        assert_eq!(predict_mask(&zero, 13, 20, 0.5).unwrap().count_nonzero(), 0);
    }

    #[test]
    fn mask_must_be_covered() {
        let s = ScoreMap::filled(2, 2, 4, 1.0);
        assert!(predict_mask(&s, 9, 8, 0.5).is_err());
        let empty = ScoreMap::new(0, 0, 4, vec![]).unwrap();
        assert!(predict_mask(&empty, 0, 0, 0.5).is_err());
    }
}
