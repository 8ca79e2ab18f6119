//! Gauss-Newton / Conjugate-Gradient fitting of the target model.
//!
//! The objective is the weighted, ridge-regularized squared error between the
//! sample labels and the bilinearly upsampled model scores,
//!
//! ```text
//! L(w) = sum_k gamma_k * || v_k . (y_k - U(D(x_k; w))) ||^2 + l1 ||w1||^2 + l2 ||w2||^2
//! ```
//!
//! Each Gauss-Newton step linearizes `D` at the current weights and solves
//! `(J^T J + lambda) dw = J^T r - lambda w` with conjugate gradient. Everything is
//! matrix-free: `J` and `J^T` are applied through [`crate::tensor`] kernels and
//! their adjoints.
//!
//! Parameter vectors are flat `f64` slices laid out as `[w1, w2]` when both layers
//! are free and `[w2]` when only the scoring layer is.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, FrtmError, Result};
use crate::frame::LabelMask;
use crate::memory::SampleMemory;
use crate::model::TargetWeights;
use crate::tensor::{
    conv_adjoint_planes, conv_planes, kernel_grad_planes, BilinearUpsampler, FeatureMap, Geometry, KernelShape,
};

/// Which target-model layers an optimization step may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeSet {
    Both,
    W2Only,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Default,
    Fast,
}

impl Preset {
    pub fn schedule(self) -> OptimizerSchedule {
        match self {
            Preset::Default => OptimizerSchedule::default_preset(),
            Preset::Fast => OptimizerSchedule::fast_preset(),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = FrtmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Preset::Default),
            "fast" => Ok(Preset::Fast),
            other => Err(arg_err(format!("unknown preset `{other}`"))),
        }
    }
}

/// Iteration budgets and loss constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSchedule {
    /// Gauss-Newton steps of the first-frame fit.
    pub n_gn: usize,
    /// CG iterations in the first GN step.
    pub n_cg_first: usize,
    /// CG iterations in the remaining GN steps.
    pub n_cg: usize,
    /// CG iterations of an online update.
    pub n_cg_update: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// CG stops once `||b - A x|| / ||b||` falls below this.
    pub cg_residual_tol: f64,
    /// Floor on the target influence used by the pixel weight mask.
    pub kappa_min: f64,
}

impl OptimizerSchedule {
    pub fn default_preset() -> Self {
        Self {
            n_gn: 5,
            n_cg_first: 5,
            n_cg: 10,
            n_cg_update: 10,
            lambda1: 1e-3,
            lambda2: 1e-3,
            cg_residual_tol: 1e-6,
            kappa_min: 0.1,
        }
    }

    pub fn fast_preset() -> Self {
        Self { n_gn: 4, n_cg_update: 5, ..Self::default_preset() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_gn == 0 || self.n_cg_first == 0 || self.n_cg == 0 || self.n_cg_update == 0 {
            return Err(arg_err("iteration counts must be >= 1"));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(arg_err("regularization factors must be >= 0"));
        }
        if self.cg_residual_tol.is_nan() || self.cg_residual_tol <= 0.0 {
            return Err(arg_err("CG residual tolerance must be > 0"));
        }
        if !(self.kappa_min > 0.0 && self.kappa_min < 1.0) {
            return Err(arg_err(format!("kappa_min must lie in (0, 1), got {}", self.kappa_min)));
        }
        Ok(())
    }

    /// CG iteration budget of each GN step for a phase.
    pub fn cg_budget(&self, phase: Phase) -> Vec<usize> {
        match phase {
            Phase::Initial => {
                let mut v = vec![self.n_cg_first];
                v.extend(std::iter::repeat_n(self.n_cg, self.n_gn.saturating_sub(1)));
                v
            }
            Phase::Update { .. } => vec![self.n_cg_update],
        }
    }
}

impl Default for OptimizerSchedule {
    fn default() -> Self {
        Self::default_preset()
    }
}

/// First-frame fit (all layers, full GN schedule) or an online update (one GN step).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Initial,
    Update { free_set: FreeSet },
}

impl Phase {
    pub fn free_set(self) -> FreeSet {
        match self {
            Phase::Initial => FreeSet::Both,
            Phase::Update { free_set } => free_set,
        }
    }
}

/// Per-pixel loss weights balancing target and background influence.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelWeightMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
    kappa: f64,
    kappa_hat: f64,
}

impl PixelWeightMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Desired target influence `max(kappa_min, kappa_hat)`.
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Actual fraction of target pixels.
    pub fn kappa_hat(&self) -> f64 {
        self.kappa_hat
    }

    /// `(target, background)` pixel weights.
    pub fn class_weights(&self) -> (f64, f64) {
        class_weights(self.kappa, self.kappa_hat)
    }
}

fn class_weights(kappa: f64, kappa_hat: f64) -> (f64, f64) {
    let t = if kappa_hat > 0.0 { kappa / kappa_hat } else { 0.0 };
    let b = if kappa_hat < 1.0 { (1.0 - kappa) / (1.0 - kappa_hat) } else { 0.0 };
    (t, b)
}

/// Target pixels get `kappa / kappa_hat`, background pixels `(1 - kappa) / (1 - kappa_hat)`.
pub fn pixel_weight_mask(y: &LabelMask, kappa_min: f64) -> Result<PixelWeightMask> {
    if !(kappa_min > 0.0 && kappa_min < 1.0) {
        return Err(arg_err(format!("kappa_min must lie in (0, 1), got {kappa_min}")));
    }
    let n = y.data().len();
    if n == 0 {
        return Err(arg_err("empty label map"));
    }
    let target = y.count_nonzero();
    let kappa_hat = target as f64 / n as f64;
    let kappa = kappa_min.max(kappa_hat);
    let (w_target, w_background) = class_weights(kappa, kappa_hat);
    let data = y.data().iter().map(|&v| if v != 0 { w_target } else { w_background }).collect();
    Ok(PixelWeightMask { height: y.height(), width: y.width(), data, kappa, kappa_hat })
}

struct PreparedSample<'a> {
    x: &'a FeatureMap,
    labels: &'a LabelMask,
    /// `gamma_k * v^2` for target and background pixels.
    c_target: f64,
    c_background: f64,
    up: BilinearUpsampler,
}

impl PreparedSample<'_> {
    fn weight(&self, label: u8) -> f64 {
        if label != 0 {
            self.c_target
        } else {
            self.c_background
        }
    }

    fn geometry(&self, shape: KernelShape) -> Geometry {
        Geometry { h: self.x.height(), w: self.x.width(), shape }
    }
}

/// The loss of a sample memory, ready for evaluation and linearization.
pub struct Objective<'a> {
    samples: Vec<PreparedSample<'a>>,
    lambda1: f64,
    lambda2: f64,
    feature_channels: usize,
}

impl<'a> Objective<'a> {
    pub fn new(mem: &'a SampleMemory, sched: &OptimizerSchedule) -> Result<Self> {
        sched.validate()?;
        if mem.is_empty() {
            return Err(arg_err("sample memory is empty"));
        }
        let gammas = mem.normalized_weights();
        let mut samples = Vec::with_capacity(mem.len());
        for (entry, gamma) in mem.entries().iter().zip(gammas) {
            let x = entry.features();
            let y = entry.labels();
            let v = pixel_weight_mask(y, sched.kappa_min)?;
            let (vt, vb) = v.class_weights();
            let factor = x.stride() / mem.label_stride();
            let up = BilinearUpsampler::new(x.height(), x.width(), factor, y.height(), y.width())?;
            samples.push(PreparedSample { x, labels: y, c_target: gamma * vt * vt, c_background: gamma * vb * vb, up });
        }
        let feature_channels = samples[0].x.channels();
        Ok(Self { samples, lambda1: sched.lambda1, lambda2: sched.lambda2, feature_channels })
    }

    fn check_weights(&self, w: &TargetWeights) -> Result<()> {
        if w.feature_channels() != self.feature_channels {
            return Err(dim_err(format!(
                "weights expect {} feature channels, memory holds {}",
                w.feature_channels(),
                self.feature_channels
            )));
        }
        Ok(())
    }

    pub fn loss(&self, w: &TargetWeights) -> Result<f64> {
        self.check_weights(w)?;
        let data_terms: Vec<f64> = self
            .samples
            .par_iter()
            .map(|s| {
                let h = conv_planes(s.x.data(), w.w1.data(), s.geometry(KernelShape::of(&w.w1)));
                let scores = conv_planes(&h, w.w2.data(), s.geometry(KernelShape::of(&w.w2)));
                let u = s.up.apply_f64(&scores);
                s.labels
                    .data()
                    .iter()
                    .zip(&u)
                    .map(|(&y, &ui)| {
                        let r = f64::from(y) - ui;
                        s.weight(y) * r * r
                    })
                    .sum()
            })
            .collect();
        Ok(data_terms.iter().sum::<f64>() + self.regularization(w))
    }

    fn regularization(&self, w: &TargetWeights) -> f64 {
        self.lambda1 * w.w1.squared_norm() + self.lambda2 * w.w2.squared_norm()
    }

    /// Caches the compressed features at `w` for repeated operator applications.
    pub fn linearize<'w>(&'w self, w: &'w TargetWeights, free_set: FreeSet) -> Result<Linearization<'w>> {
        self.check_weights(w)?;
        let compressed = self
            .samples
            .par_iter()
            .map(|s| conv_planes(s.x.data(), w.w1.data(), s.geometry(KernelShape::of(&w.w1))))
            .collect();
        Ok(Linearization { objective: self, w, free_set, compressed })
    }
}

/// The Gauss-Newton model of the loss around fixed weights.
pub struct Linearization<'w> {
    objective: &'w Objective<'w>,
    w: &'w TargetWeights,
    free_set: FreeSet,
    /// `w1 * x_k` per sample, planar.
    compressed: Vec<Vec<f64>>,
}

impl Linearization<'_> {
    pub fn num_params(&self) -> usize {
        param_count(self.w, self.free_set)
    }

    fn w1_shape(&self) -> KernelShape {
        KernelShape::of(&self.w.w1)
    }

    fn w2_shape(&self) -> KernelShape {
        KernelShape::of(&self.w.w2)
    }

    /// `J^T` applied to per-pixel label-resolution values, summed over samples.
    fn back_project(&self, weighted: &[Vec<f64>]) -> Vec<f64> {
        let parts: Vec<Vec<f64>> = self
            .objective
            .samples
            .par_iter()
            .enumerate()
            .map(|(k, s)| {
                let g = s.up.apply_adjoint_f64(&weighted[k]);
                let mut out = Vec::with_capacity(self.num_params());
                if self.free_set == FreeSet::Both {
                    let gc = conv_adjoint_planes(&g, self.w.w2.data(), s.geometry(self.w2_shape()));
                    out.extend(kernel_grad_planes(s.x.data(), &gc, s.geometry(self.w1_shape())));
                }
                out.extend(kernel_grad_planes(&self.compressed[k], &g, s.geometry(self.w2_shape())));
                out
            })
            .collect();
        let mut total = vec![0.0f64; self.num_params()];
        for part in parts {
            for (t, p) in total.iter_mut().zip(part) {
                *t += p;
            }
        }
        total
    }

    /// Right-hand side `J^T r - lambda w` (negative loss gradient up to a factor 2).
    pub fn gradient(&self) -> Result<Vec<f64>> {
        let residuals: Vec<Vec<f64>> = self
            .objective
            .samples
            .par_iter()
            .zip(&self.compressed)
            .map(|(s, h)| {
                let scores = conv_planes(h, self.w.w2.data(), s.geometry(self.w2_shape()));
                let u = s.up.apply_f64(&scores);
                s.labels.data().iter().zip(&u).map(|(&y, &ui)| s.weight(y) * (f64::from(y) - ui)).collect()
            })
            .collect();
        let mut b = self.back_project(&residuals);
        let reg = self.regularizer_times(&pack(self.w, self.free_set));
        for (bi, ri) in b.iter_mut().zip(reg) {
            *bi -= ri;
        }
        Ok(b)
    }

    fn regularizer_times(&self, v: &[f64]) -> Vec<f64> {
        let n1 = if self.free_set == FreeSet::Both { self.w.w1.len() } else { 0 };
        v.iter()
            .enumerate()
            .map(|(i, &x)| if i < n1 { self.objective.lambda1 * x } else { self.objective.lambda2 * x })
            .collect()
    }

    /// `(J^T J + lambda) dw`.
    pub fn apply(&self, dw: &[f64]) -> Result<Vec<f64>> {
        if dw.len() != self.num_params() {
            return Err(dim_err(format!("parameter vector has {} entries, expected {}", dw.len(), self.num_params())));
        }
        let (dw1, dw2) = match self.free_set {
            FreeSet::Both => {
                let (a, b) = dw.split_at(self.w.w1.len());
                (Some(a), b)
            }
            FreeSet::W2Only => (None, dw),
        };
        let projected: Vec<Vec<f64>> = self
            .objective
            .samples
            .par_iter()
            .zip(&self.compressed)
            .map(|(s, h)| {
                let g2 = s.geometry(self.w2_shape());
                let mut t = conv_planes(h, dw2, g2);
                if let Some(dw1) = dw1 {
                    let dh = conv_planes(s.x.data(), dw1, s.geometry(self.w1_shape()));
                    for (a, b) in t.iter_mut().zip(conv_planes(&dh, self.w.w2.data(), g2)) {
                        *a += b;
                    }
                }
                let u = s.up.apply_f64(&t);
                s.labels.data().iter().zip(&u).map(|(&y, &ui)| s.weight(y) * ui).collect()
            })
            .collect();
        let mut out = self.back_project(&projected);
        for (o, r) in out.iter_mut().zip(self.regularizer_times(dw)) {
            *o += r;
        }
        Ok(out)
    }
}

pub fn param_count(w: &TargetWeights, free_set: FreeSet) -> usize {
    match free_set {
        FreeSet::Both => w.w1.len() + w.w2.len(),
        FreeSet::W2Only => w.w2.len(),
    }
}

/// Flattens the free layers of `w` into the optimizer's parameter layout.
pub fn pack(w: &TargetWeights, free_set: FreeSet) -> Vec<f64> {
    let mut v = Vec::with_capacity(param_count(w, free_set));
    if free_set == FreeSet::Both {
        v.extend(w.w1.data().iter().map(|&x| f64::from(x)));
    }
    v.extend(w.w2.data().iter().map(|&x| f64::from(x)));
    v
}

/// `w + dw` over the free layers.
pub fn apply_delta(w: &TargetWeights, dw: &[f64], free_set: FreeSet) -> Result<TargetWeights> {
    if dw.len() != param_count(w, free_set) {
        return Err(dim_err("parameter update has the wrong length"));
    }
    let mut out = w.clone();
    let mut offset = 0;
    if free_set == FreeSet::Both {
        for (p, d) in out.w1.data_mut().iter_mut().zip(dw) {
            *p = (f64::from(*p) + d) as f32;
        }
        offset = w.w1.len();
    }
    for (p, d) in out.w2.data_mut().iter_mut().zip(&dw[offset..]) {
        *p = (f64::from(*p) + d) as f32;
    }
    Ok(out)
}

pub fn compute_loss(w: &TargetWeights, mem: &SampleMemory, sched: &OptimizerSchedule) -> Result<f64> {
    Objective::new(mem, sched)?.loss(w)
}

/// Applies `(J^T J + lambda)` at `w` to a flat parameter vector.
pub fn normal_operator_apply(
    dw: &[f64],
    w: &TargetWeights,
    mem: &SampleMemory,
    sched: &OptimizerSchedule,
    free_set: FreeSet,
) -> Result<Vec<f64>> {
    let objective = Objective::new(mem, sched)?;
    objective.linearize(w, free_set)?.apply(dw)
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradient from a zero initial guess.
pub fn cg_solve(
    mut apply_a: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<CgOutcome> {
    if b.iter().any(|v| !v.is_finite()) {
        return Err(FrtmError::Numerical { context: "cg right-hand side", iteration: 0 });
    }
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let b_norm = rs.sqrt();
    if b_norm == 0.0 {
        return Ok(CgOutcome { solution: x, iterations: 0, relative_residual: 0.0 });
    }
    let mut rel = 1.0;
    let mut iterations = 0;
    for it in 1..=max_iters {
        let ap = apply_a(&p)?;
        if ap.len() != p.len() {
            return Err(dim_err("operator output length differs from its input"));
        }
        let p_ap = dot(&p, &ap);
        if !p_ap.is_finite() {
            return Err(FrtmError::Numerical { context: "cg curvature", iteration: it });
        }
        if p_ap <= 0.0 {
            break;
        }
        let alpha = rs / p_ap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        if !rs_new.is_finite() {
            return Err(FrtmError::Numerical { context: "cg residual", iteration: it });
        }
        iterations = it;
        rel = rs_new.sqrt() / b_norm;
        if rel < tol {
            break;
        }
        let beta = rs_new / rs;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
    }
    Ok(CgOutcome { solution: x, iterations, relative_residual: rel })
}

/// Halvings tried when a full GN step would increase the loss.
const MAX_STEP_HALVINGS: usize = 12;

#[derive(Debug, Clone)]
pub struct GnStepReport {
    pub weights: TargetWeights,
    /// Loss at the weights the step started from.
    pub loss_before: f64,
    /// Loss at the returned weights; never above `loss_before`.
    pub loss_after: f64,
    /// Fraction of the GN increment that was applied (0 when the step was rejected).
    pub step_scale: f64,
    pub cg: CgOutcome,
}

fn gn_step_with(
    objective: &Objective<'_>,
    w: &TargetWeights,
    loss_before: f64,
    n_cg: usize,
    tol: f64,
    free_set: FreeSet,
) -> Result<GnStepReport> {
    let lin = objective.linearize(w, free_set)?;
    let b = lin.gradient()?;
    let cg = cg_solve(|v| lin.apply(v), &b, n_cg, tol)?;
    // Halve the increment until the loss does not grow.
    let mut scale = 1.0;
    for _ in 0..=MAX_STEP_HALVINGS {
        let delta: Vec<f64> = cg.solution.iter().map(|d| d * scale).collect();
        let candidate = apply_delta(w, &delta, free_set)?;
        let loss = objective.loss(&candidate)?;
        if !loss.is_finite() {
            return Err(FrtmError::Numerical { context: "gn step loss", iteration: cg.iterations });
        }
        if loss <= loss_before {
            return Ok(GnStepReport { weights: candidate, loss_before, loss_after: loss, step_scale: scale, cg });
        }
        scale *= 0.5;
    }
    Ok(GnStepReport { weights: w.clone(), loss_before, loss_after: loss_before, step_scale: 0.0, cg })
}

/// One Gauss-Newton step with `n_cg` CG iterations over `free_set`.
pub fn gn_step(
    w: &TargetWeights,
    mem: &SampleMemory,
    sched: &OptimizerSchedule,
    n_cg: usize,
    free_set: FreeSet,
) -> Result<TargetWeights> {
    Ok(gn_step_report(w, mem, sched, n_cg, free_set)?.weights)
}

pub fn gn_step_report(
    w: &TargetWeights,
    mem: &SampleMemory,
    sched: &OptimizerSchedule,
    n_cg: usize,
    free_set: FreeSet,
) -> Result<GnStepReport> {
    let objective = Objective::new(mem, sched)?;
    let loss = objective.loss(w)?;
    gn_step_with(&objective, w, loss, n_cg, sched.cg_residual_tol, free_set)
}

#[derive(Debug, Clone)]
pub struct OptimizeReport {
    pub weights: TargetWeights,
    /// Loss before the first step and after every step.
    pub losses: Vec<f64>,
    /// CG iterations actually run per GN step.
    pub cg_iterations: Vec<usize>,
    pub step_scales: Vec<f64>,
}

/// Runs the GN schedule of `phase`.
pub fn optimize(
    w: &TargetWeights,
    mem: &SampleMemory,
    sched: &OptimizerSchedule,
    phase: Phase,
) -> Result<OptimizeReport> {
    let objective = Objective::new(mem, sched)?;
    let free_set = phase.free_set();
    let mut weights = w.clone();
    let mut losses = vec![objective.loss(&weights)?];
    let mut cg_iterations = Vec::new();
    let mut step_scales = Vec::new();
    for n_cg in sched.cg_budget(phase) {
        let before = *losses.last().expect("seeded with the initial loss");
        let step = gn_step_with(&objective, &weights, before, n_cg, sched.cg_residual_tol, free_set)?;
        losses.push(step.loss_after);
        cg_iterations.push(step.cg.iterations);
        step_scales.push(step.step_scale);
        weights = step.weights;
    }
    Ok(OptimizeReport { weights, losses, cg_iterations, step_scales })
}
