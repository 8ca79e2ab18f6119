//! Bounded training-sample memory with exponential recency weighting.
//!
//! Raw weights are stored unnormalized and divided by their sum on read. Each new
//! frame gets `previous / (1 - eta)` where the recursion is anchored at `eta` by the
//! initial set. At capacity the smallest raw weight is evicted (oldest on ties).

use std::sync::Arc;

use crate::error::{arg_err, dim_err, Result};
use crate::frame::LabelMask;
use crate::tensor::FeatureMap;

/// Raw weights are rebased once the largest one exceeds this.
const REBASE_LIMIT: f64 = 1e12;

/// How raw weights are assigned to the initial sample set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialWeighting {
    /// Sample 0 (the unmodified frame) weighs twice as much as each augmented sample.
    #[default]
    OriginalDouble,
    Uniform,
}

/// A feature map paired with its full-resolution binary target mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub features: Arc<FeatureMap>,
    pub mask: LabelMask,
}

#[derive(Debug, Clone)]
pub struct MemoryEntry {
    features: Arc<FeatureMap>,
    labels: LabelMask,
    raw_weight: f64,
    insertion_index: u64,
}

impl MemoryEntry {
    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    /// Binary labels at label resolution.
    pub fn labels(&self) -> &LabelMask {
        &self.labels
    }

    pub fn raw_weight(&self) -> f64 {
        self.raw_weight
    }

    pub fn insertion_index(&self) -> u64 {
        self.insertion_index
    }
}

#[derive(Debug, Clone)]
pub struct SampleMemory {
    entries: Vec<MemoryEntry>,
    eta: f64,
    k_max: usize,
    label_stride: usize,
    newest_raw: f64,
    next_index: u64,
}

impl SampleMemory {
    /// Builds the memory from an initial sample set; sample 0 is the unmodified frame.
    ///
    /// Raw weights are scaled so the largest initial weight equals `eta`, which also
    /// anchors the recency recursion for later frames.
    pub fn init(
        samples: Vec<Sample>,
        weighting: InitialWeighting,
        eta: f64,
        k_max: usize,
        label_stride: usize,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(arg_err("initial sample set is empty"));
        }
        if !(eta > 0.0 && eta < 1.0) {
            return Err(arg_err(format!("eta must lie in (0, 1), got {eta}")));
        }
        if k_max == 0 || samples.len() > k_max {
            return Err(arg_err(format!("{} initial samples do not fit capacity {k_max}", samples.len())));
        }
        if label_stride == 0 {
            return Err(arg_err("label stride must be >= 1"));
        }
        let mut mem =
            Self { entries: Vec::with_capacity(k_max), eta, k_max, label_stride, newest_raw: eta, next_index: 0 };
        for (k, sample) in samples.into_iter().enumerate() {
            let raw = match weighting {
                InitialWeighting::OriginalDouble if k > 0 => eta / 2.0,
                _ => eta,
            };
            let labels = mem.check_and_downsample(&sample)?;
            mem.push(sample.features, labels, raw);
        }
        Ok(mem)
    }

    /// Adds a frame sample, evicting the minimum-weight entry first when full.
    pub fn extend(&mut self, features: Arc<FeatureMap>, mask: &LabelMask) -> Result<()> {
        let sample = Sample { features, mask: mask.clone() };
        let labels = self.check_and_downsample(&sample)?;
        if self.entries.len() >= self.k_max {
            let victim = self.min_weight_position();
            self.entries.remove(victim);
        }
        let raw = self.newest_raw / (1.0 - self.eta);
        self.newest_raw = raw;
        self.push(sample.features, labels, raw);
        self.rebase_if_needed();
        Ok(())
    }

    fn push(&mut self, features: Arc<FeatureMap>, labels: LabelMask, raw_weight: f64) {
        self.entries.push(MemoryEntry { features, labels, raw_weight, insertion_index: self.next_index });
        self.next_index += 1;
    }

    fn rebase_if_needed(&mut self) {
        let max = self.entries.iter().map(|e| e.raw_weight).fold(0.0, f64::max);
        if max > REBASE_LIMIT {
            let sum: f64 = self.entries.iter().map(|e| e.raw_weight).sum();
            for e in &mut self.entries {
                e.raw_weight /= sum;
            }
            self.newest_raw /= sum;
        }
    }

    /// Index of the entry with the smallest raw weight; the oldest wins ties.
    pub fn min_weight_position(&self) -> usize {
        let mut best = 0;
        for (i, e) in self.entries.iter().enumerate().skip(1) {
            let b = &self.entries[best];
            if e.raw_weight < b.raw_weight || (e.raw_weight == b.raw_weight && e.insertion_index < b.insertion_index) {
                best = i;
            }
        }
        best
    }

    fn check_and_downsample(&self, sample: &Sample) -> Result<LabelMask> {
        let x = &sample.features;
        let m = &sample.mask;
        if !m.is_binary() {
            return Err(arg_err("sample mask must be binary"));
        }
        if !x.stride().is_multiple_of(self.label_stride) {
            return Err(dim_err(format!(
                "label stride {} does not divide feature stride {}",
                self.label_stride,
                x.stride()
            )));
        }
        if x.height() * x.stride() < m.height() || x.width() * x.stride() < m.width() {
            return Err(dim_err(format!(
                "{}x{} features at stride {} do not cover a {}x{} mask",
                x.height(),
                x.width(),
                x.stride(),
                m.height(),
                m.width()
            )));
        }
        let labels = m.downsample_binary(self.label_stride)?;
        if let Some(first) = self.entries.first() {
            let f = &first.features;
            if f.height() != x.height()
                || f.width() != x.width()
                || f.channels() != x.channels()
                || f.stride() != x.stride()
                || !first.labels.same_geometry(&labels)
            {
                return Err(dim_err("sample geometry differs from the memory's existing entries"));
            }
        }
        Ok(labels)
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn label_stride(&self) -> usize {
        self.label_stride
    }

    /// Raw weight the most recent frame received (the recursion anchor).
    pub fn newest_raw_weight(&self) -> f64 {
        self.newest_raw
    }

    pub fn raw_weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.raw_weight).collect()
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let sum: f64 = self.entries.iter().map(|e| e.raw_weight).sum();
        self.entries.iter().map(|e| e.raw_weight / sum).collect()
    }

    /// Multiplies every raw weight by `factor`; normalized weights are unaffected.
    pub fn scale_raw_weights(&mut self, factor: f64) {
        assert!(factor > 0.0 && factor.is_finite());
        for e in &mut self.entries {
            e.raw_weight *= factor;
        }
        self.newest_raw *= factor;
    }
}
