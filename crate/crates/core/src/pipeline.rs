//! Sequence processing: fit one target model per object on the first frame, then
//! predict, decode, extend memory and periodically refit on every following frame.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{generate_initial_set, AugmentationParams};
use crate::error::{arg_err, dim_err, FrtmError, Result};
use crate::features::{extract_handcrafted_features, feature_file_name, read_feature_map};
use crate::frame::{LabelMask, RgbImage};
use crate::memory::{InitialWeighting, Sample, SampleMemory};
use crate::model::{forward, init_weights, upsample_to_image, TargetWeights, DEFAULT_COMPRESSED_CHANNELS};
use crate::optim::{optimize, FreeSet, OptimizerSchedule, Phase, Preset};
use crate::tensor::{FeatureMap, ScoreMap};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSource {
    /// Hand-crafted features computed from each frame.
    Builtin { stride: usize },
    /// Precomputed `.frtm` files named by frame index.
    Files { dir: PathBuf },
}

impl Default for FeatureSource {
    fn default() -> Self {
        FeatureSource::Builtin { stride: 16 }
    }
}

impl FeatureSource {
    pub fn load(&self, index: usize, frames: &dyn FrameSource) -> Result<FeatureMap> {
        match self {
            FeatureSource::Builtin { stride } => extract_handcrafted_features(&frames.image(index)?, *stride),
            FeatureSource::Files { dir } => read_feature_map(&dir.join(feature_file_name(index))),
        }
    }

    /// Whether features can be computed for synthesized images.
    pub fn supports_augmentation(&self) -> bool {
        matches!(self, FeatureSource::Builtin { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Frames between online updates.
    pub update_interval: usize,
    pub eta: f64,
    pub k_max: usize,
    /// First-frame samples including the unmodified frame.
    pub n_initial_samples: usize,
    pub preset: Preset,
    pub schedule: OptimizerSchedule,
    pub compressed_channels: usize,
    pub feature_source: FeatureSource,
    /// Score threshold of the decoded mask.
    pub threshold: f32,
    pub seed: u64,
    /// Stride of stored training labels; 1 keeps full resolution.
    pub label_stride: usize,
    pub update_free_set: FreeSet,
    pub augmentation: AugmentationParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::from_preset(Preset::Default)
    }
}

impl PipelineConfig {
    pub fn from_preset(preset: Preset) -> Self {
        Self {
            update_interval: 8,
            eta: 0.1,
            k_max: 80,
            n_initial_samples: 5,
            preset,
            schedule: preset.schedule(),
            compressed_channels: DEFAULT_COMPRESSED_CHANNELS,
            feature_source: FeatureSource::default(),
            threshold: 0.5,
            seed: 0,
            label_stride: 1,
            update_free_set: FreeSet::W2Only,
            augmentation: AugmentationParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.augmentation.validate()?;
        if self.update_interval == 0 {
            return Err(arg_err("update interval must be >= 1"));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(arg_err(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        if self.n_initial_samples == 0 || self.n_initial_samples > self.k_max {
            return Err(arg_err(format!(
                "initial sample count {} must lie in 1..={}",
                self.n_initial_samples, self.k_max
            )));
        }
        if self.compressed_channels == 0 || self.label_stride == 0 {
            return Err(arg_err("compressed channels and label stride must be >= 1"));
        }
        if !self.threshold.is_finite() {
            return Err(arg_err("threshold must be finite"));
        }
        if let FeatureSource::Builtin { stride } = self.feature_source {
            if stride == 0 || stride % self.label_stride != 0 {
                return Err(arg_err(format!("label stride {} must divide feature stride {stride}", self.label_stride)));
            }
        }
        Ok(())
    }
}

/// Random-access frames of one sequence.
pub trait FrameSource: Sync {
    fn len(&self) -> usize;

    fn image(&self, index: usize) -> Result<RgbImage>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FrameSource for [RgbImage] {
    fn len(&self) -> usize {
        <[RgbImage]>::len(self)
    }

    fn image(&self, index: usize) -> Result<RgbImage> {
        self.get(index).cloned().ok_or_else(|| arg_err(format!("frame {index} out of range")))
    }
}

impl FrameSource for Vec<RgbImage> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn image(&self, index: usize) -> Result<RgbImage> {
        self.as_slice().image(index)
    }
}

/// Image files of a directory in lexicographic order, decoded on demand.
#[derive(Debug, Clone)]
pub struct DirFrames {
    paths: Vec<PathBuf>,
}

impl DirFrames {
    pub fn open(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(FrtmError::MissingInput(dir.to_path_buf()));
        }
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        paths.sort();
        Ok(Self { paths })
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }
}

impl FrameSource for DirFrames {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn image(&self, index: usize) -> Result<RgbImage> {
        let path = self.paths.get(index).ok_or_else(|| arg_err(format!("frame {index} out of range")))?;
        RgbImage::load(path)
    }
}

/// Background logit followed by one logit per object, upsampled to the image.
fn logits(score_maps: &[ScoreMap], height: usize, width: usize) -> Result<Vec<Vec<f32>>> {
    if score_maps.is_empty() {
        return Err(arg_err("no score maps to aggregate"));
    }
    let (h0, w0, s0) = (score_maps[0].height(), score_maps[0].width(), score_maps[0].stride());
    if score_maps.iter().any(|s| s.height() != h0 || s.width() != w0 || s.stride() != s0) {
        return Err(dim_err("score maps differ in geometry"));
    }
    score_maps.par_iter().map(|s| upsample_to_image(s, height, width)).collect()
}

/// Per-pixel softmax over `[threshold, s_1, ..., s_N]`; label `k` is the argmax, lowest index on ties.
///
/// With one object this reproduces `predict_mask(s, threshold)` exactly.
pub fn aggregate_multi_object(
    score_maps: &[ScoreMap],
    height: usize,
    width: usize,
    threshold: f32,
) -> Result<LabelMask> {
    if score_maps.len() > usize::from(u8::MAX) {
        return Err(arg_err("at most 255 objects are supported"));
    }
    let up = logits(score_maps, height, width)?;
    let labels = (0..height * width)
        .into_par_iter()
        .map(|p| {
            let mut best = (0u8, threshold);
            for (k, u) in up.iter().enumerate() {
                if u[p] > best.1 {
                    best = (k as u8 + 1, u[p]);
                }
            }
            best.0
        })
        .collect();
    LabelMask::new(height, width, labels)
}

/// Softmax probabilities behind [`aggregate_multi_object`], `N + 1` values per pixel, pixel-major.
pub fn aggregate_probabilities(
    score_maps: &[ScoreMap],
    height: usize,
    width: usize,
    threshold: f32,
) -> Result<Vec<f64>> {
    let up = logits(score_maps, height, width)?;
    let n = up.len() + 1;
    let mut out = vec![0.0; n * height * width];
    out.par_chunks_mut(n).enumerate().for_each(|(p, probs)| {
        probs[0] = f64::from(threshold);
        for (k, u) in up.iter().enumerate() {
            probs[k + 1] = f64::from(u[p]);
        }
        let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        probs.iter_mut().for_each(|v| *v = (*v - max).exp());
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|v| *v /= sum);
    });
    Ok(out)
}

/// Wall-clock milliseconds per phase, summed over the sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub init: f64,
    pub feature: f64,
    pub predict: f64,
    pub decode: f64,
    pub memory: f64,
    pub update: f64,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

#[derive(Debug, Clone)]
pub struct ObjectModel {
    pub id: u8,
    pub weights: TargetWeights,
    pub memory: SampleMemory,
}

fn object_seed(seed: u64, id: u8) -> u64 {
    seed ^ u64::from(id).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// First-frame fit for one object: build the initial sample set, then run the full GN schedule.
pub fn initialize_object(
    id: u8,
    image: Option<&RgbImage>,
    features: Arc<FeatureMap>,
    mask: &LabelMask,
    config: &PipelineConfig,
) -> Result<ObjectModel> {
    let seed = object_seed(config.seed, id);
    let mut samples = vec![Sample { features: features.clone(), mask: mask.clone() }];
    if let (Some(image), FeatureSource::Builtin { stride }) = (image, &config.feature_source) {
        let params =
            AugmentationParams { n_augmented: config.n_initial_samples - 1, rng_seed: seed, ..config.augmentation };
        let set = generate_initial_set(image, mask, &params)?;
        let extra: Vec<Sample> = set
            .into_par_iter()
            .skip(1)
            .map(|(img, m)| Ok(Sample { features: Arc::new(extract_handcrafted_features(&img, *stride)?), mask: m }))
            .collect::<Result<_>>()?;
        samples.extend(extra);
    }
    let memory =
        SampleMemory::init(samples, InitialWeighting::OriginalDouble, config.eta, config.k_max, config.label_stride)?;
    let w0 = init_weights(features.channels(), config.compressed_channels, seed)?;
    let weights = optimize(&w0, &memory, &config.schedule, Phase::Initial)?.weights;
    Ok(ObjectModel { id, weights, memory })
}

/// Online state of all objects of one sequence.
#[derive(Debug, Clone)]
pub struct Tracker {
    config: PipelineConfig,
    height: usize,
    width: usize,
    objects: Vec<ObjectModel>,
    next_frame: usize,
    timing: Timing,
    update_frames: Vec<usize>,
}

impl Tracker {
    /// Fits one model per object id of `first_mask` (frame 0).
    ///
    /// `image` is needed for first-frame augmentation; without it only the unmodified
    /// frame enters the memory.
    pub fn new(
        image: Option<&RgbImage>,
        features: Arc<FeatureMap>,
        first_mask: &LabelMask,
        config: &PipelineConfig,
    ) -> Result<Self> {
        config.validate()?;
        let (height, width) = (first_mask.height(), first_mask.width());
        if let Some(img) = image {
            if img.height() != height || img.width() != width {
                return Err(dim_err(format!(
                    "first mask is {height}x{width}, frame 0 is {}x{}",
                    img.height(),
                    img.width()
                )));
            }
        }
        let start = Instant::now();
        let ids = first_mask.object_ids();
        let objects = ids
            .par_iter()
            .map(|&id| initialize_object(id, image, features.clone(), &first_mask.object_mask(id), config))
            .collect::<Result<Vec<_>>>()?;
        let timing = Timing { init: elapsed_ms(start), ..Timing::default() };
        Ok(Self { config: config.clone(), height, width, objects, next_frame: 1, timing, update_frames: vec![] })
    }

    pub fn objects(&self) -> &[ObjectModel] {
        &self.objects
    }

    pub fn timing(&self) -> Timing {
        self.timing
    }

    /// Frames at which the online update ran.
    pub fn update_frames(&self) -> &[usize] {
        &self.update_frames
    }

    pub fn next_frame(&self) -> usize {
        self.next_frame
    }

    /// Segments the next frame, then extends every memory and updates on schedule.
    pub fn step(&mut self, features: Arc<FeatureMap>) -> Result<LabelMask> {
        let i = self.next_frame;
        if self.objects.is_empty() {
            self.next_frame += 1;
            return Ok(LabelMask::empty(self.height, self.width));
        }

        let t = Instant::now();
        let scores = self.objects.par_iter().map(|o| forward(&features, &o.weights)).collect::<Result<Vec<_>>>()?;
        self.timing.predict += elapsed_ms(t);

        let t = Instant::now();
        let labels = aggregate_multi_object(&scores, self.height, self.width, self.config.threshold)?;
        // Aggregation numbers objects by position; map back to their ids.
        let mut decoded = labels.clone();
        for (p, &k) in labels.data().iter().enumerate() {
            decoded.data_mut()[p] = if k == 0 { 0 } else { self.objects[usize::from(k) - 1].id };
        }
        self.timing.decode += elapsed_ms(t);

        let t = Instant::now();
        self.objects.par_iter_mut().try_for_each(|o| o.memory.extend(features.clone(), &decoded.object_mask(o.id)))?;
        self.timing.memory += elapsed_ms(t);

        if i.is_multiple_of(self.config.update_interval) {
            let t = Instant::now();
            let phase = Phase::Update { free_set: self.config.update_free_set };
            let schedule = self.config.schedule;
            self.objects.par_iter_mut().try_for_each(|o| -> Result<()> {
                o.weights = optimize(&o.weights, &o.memory, &schedule, phase)?.weights;
                Ok(())
            })?;
            self.timing.update += elapsed_ms(t);
            self.update_frames.push(i);
        }
        self.next_frame += 1;
        Ok(decoded)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub masks: Vec<LabelMask>,
    pub timing: Timing,
    pub update_frames: Vec<usize>,
    /// Memory size of every object after each frame.
    pub memory_sizes: Vec<Vec<usize>>,
}

/// Processes a whole sequence; `on_frame` sees each output mask as soon as it is decoded.
pub fn run_sequence_with(
    frames: &dyn FrameSource,
    first_mask: &LabelMask,
    config: &PipelineConfig,
    mut on_frame: impl FnMut(usize, &LabelMask) -> Result<()>,
) -> Result<RunOutput> {
    config.validate()?;
    if frames.is_empty() {
        return Err(arg_err("sequence has no frames"));
    }
    let source = &config.feature_source;
    let t = Instant::now();
    let image0 = frames.image(0)?;
    let x0 = Arc::new(source.load(0, frames)?);
    let feature0 = elapsed_ms(t);

    let augment_from = source.supports_augmentation().then_some(&image0);
    if augment_from.is_none() && config.n_initial_samples > 1 {
        log::info!("feature files cannot describe augmented frames; the first frame is the only initial sample");
    }
    if image0.height() != first_mask.height() || image0.width() != first_mask.width() {
        return Err(dim_err(format!(
            "first mask is {}x{}, frame 0 is {}x{}",
            first_mask.height(),
            first_mask.width(),
            image0.height(),
            image0.width()
        )));
    }
    let mut tracker = Tracker::new(augment_from, x0, first_mask, config)?;
    tracker.timing.feature += feature0;
    on_frame(0, first_mask)?;

    let mut masks = vec![first_mask.clone()];
    let mut memory_sizes = vec![tracker.objects.iter().map(|o| o.memory.len()).collect()];
    for i in 1..frames.len() {
        let t = Instant::now();
        let x = Arc::new(source.load(i, frames)?);
        tracker.timing.feature += elapsed_ms(t);
        let mask = tracker.step(x)?;
        on_frame(i, &mask)?;
        masks.push(mask);
        memory_sizes.push(tracker.objects.iter().map(|o| o.memory.len()).collect());
    }
    Ok(RunOutput { masks, timing: tracker.timing, update_frames: tracker.update_frames, memory_sizes })
}

pub fn run_sequence(frames: &dyn FrameSource, first_mask: &LabelMask, config: &PipelineConfig) -> Result<RunOutput> {
    run_sequence_with(frames, first_mask, config, |_, _| Ok(()))
}
