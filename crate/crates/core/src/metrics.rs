//! Region similarity (Jaccard) and boundary F-measure, with DAVIS-style sequence reports.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};
use crate::frame::LabelMask;

fn check_geometry(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if !a.same_geometry(b) {
        return Err(dim_err(format!("masks are {}x{} and {}x{}", a.height(), a.width(), b.height(), b.width())));
    }
    Ok(())
}

/// Intersection over union of the nonzero pixels; 1 when both are empty.
pub fn jaccard(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    check_geometry(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p != 0, g != 0);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with a background 4-neighbour or lying on the image edge.
pub fn boundary_pixels(mask: &LabelMask) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let fg = |y: usize, x: usize| mask.get(y, x) != 0;
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !fg(y, x) {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            out[y * w + x] = edge || !fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1);
        }
    }
    out
}

/// Marks every pixel within Euclidean distance `radius` of a set pixel.
fn dilate_disk(bits: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = vec![false; h * w];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for (dy, dx) in &offsets {
            let (yy, xx) = (y + dy, x + dx);
            if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                out[yy as usize * w + xx as usize] = true;
            }
        }
    }
    out
}

/// Boundary F-measure with matching tolerance `tolerance_px`.
///
/// Empty boundaries follow the DAVIS toolkit: both empty scores 1, and a missing
/// boundary on one side gives precision or recall 1 with the other 0.
pub fn boundary_f(pred: &LabelMask, gt: &LabelMask, tolerance_px: usize) -> Result<f64> {
    check_geometry(pred, gt)?;
    let (h, w) = (pred.height(), pred.width());
    let pb = boundary_pixels(pred);
    let gb = boundary_pixels(gt);
    let n_pred = pb.iter().filter(|&&b| b).count();
    let n_gt = gb.iter().filter(|&&b| b).count();
    if n_pred == 0 && n_gt == 0 {
        return Ok(1.0);
    }
    let (precision, recall) = if n_pred == 0 {
        (1.0, 0.0)
    } else if n_gt == 0 {
        (0.0, 1.0)
    } else {
        let gd = dilate_disk(&gb, h, w, tolerance_px);
        let pd = dilate_disk(&pb, h, w, tolerance_px);
        let matched_pred = pb.iter().zip(&gd).filter(|(&b, &d)| b && d).count();
        let matched_gt = gb.iter().zip(&pd).filter(|(&b, &d)| b && d).count();
        (matched_pred as f64 / n_pred as f64, matched_gt as f64 / n_gt as f64)
    };
    Ok(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

/// `ceil(0.008 * diagonal)` pixels.
pub fn default_tolerance(height: usize, width: usize) -> usize {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub exclude_first: bool,
    pub exclude_last: bool,
    /// Boundary tolerance; `None` uses [`default_tolerance`].
    pub tolerance: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { exclude_first: true, exclude_last: false, tolerance: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectReport {
    pub sequence: String,
    pub object_id: u8,
    pub frames: Vec<usize>,
    pub j: Vec<f64>,
    pub f: Vec<f64>,
    pub j_mean: f64,
    pub f_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub sequence: String,
    pub n_objects: usize,
    pub n_frames: usize,
    pub tolerance_px: usize,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
}

impl Means {
    fn of(objects: &[&ObjectReport]) -> Self {
        let n = objects.len().max(1) as f64;
        let j_mean = objects.iter().map(|o| o.j_mean).sum::<f64>() / n;
        let f_mean = objects.iter().map(|o| o.f_mean).sum::<f64>() / n;
        Self { j_mean, f_mean, jf_mean: 0.5 * (j_mean + f_mean) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sequence: Vec<SequenceReport>,
    pub per_object: Vec<ObjectReport>,
    /// Averages over all objects of all sequences.
    pub means: Means,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores every object id present in the ground truth over the evaluated frames.
pub fn evaluate_sequence(name: &str, preds: &[LabelMask], gts: &[LabelMask], opts: &EvalOptions) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(arg_err(format!("{name}: {} predicted frames, {} ground-truth frames", preds.len(), gts.len())));
    }
    if gts.is_empty() {
        return Err(arg_err(format!("{name}: no frames")));
    }
    for (p, g) in preds.iter().zip(gts) {
        check_geometry(p, g)?;
    }
    let first = usize::from(opts.exclude_first);
    let end = gts.len() - usize::from(opts.exclude_last && gts.len() > 1);
    let frames: Vec<usize> = (first..end).collect();
    let tolerance = opts.tolerance.unwrap_or_else(|| default_tolerance(gts[0].height(), gts[0].width()));

    let mut ids: Vec<u8> = gts.iter().flat_map(|g| g.object_ids()).collect();
    ids.sort_unstable();
    ids.dedup();

    let mut per_object = Vec::with_capacity(ids.len());
    for &id in &ids {
        let mut j = Vec::with_capacity(frames.len());
        let mut f = Vec::with_capacity(frames.len());
        for &i in &frames {
            let p = preds[i].object_mask(id);
            let g = gts[i].object_mask(id);
            j.push(jaccard(&p, &g)?);
            f.push(boundary_f(&p, &g, tolerance)?);
        }
        per_object.push(ObjectReport {
            sequence: name.to_string(),
            object_id: id,
            j_mean: mean(&j),
            f_mean: mean(&f),
            frames: frames.clone(),
            j,
            f,
        });
    }
    let refs: Vec<&ObjectReport> = per_object.iter().collect();
    let m = Means::of(&refs);
    Ok(EvalReport {
        per_sequence: vec![SequenceReport {
            sequence: name.to_string(),
            n_objects: ids.len(),
            n_frames: frames.len(),
            tolerance_px: tolerance,
            j_mean: m.j_mean,
            f_mean: m.f_mean,
            jf_mean: m.jf_mean,
        }],
        per_object,
        means: m,
    })
}

impl EvalReport {
    pub fn merge(reports: Vec<EvalReport>) -> EvalReport {
        let mut per_sequence = Vec::new();
        let mut per_object = Vec::new();
        for r in reports {
            per_sequence.extend(r.per_sequence);
            per_object.extend(r.per_object);
        }
        let refs: Vec<&ObjectReport> = per_object.iter().collect();
        let means = Means::of(&refs);
        EvalReport { per_sequence, per_object, means }
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<24} {:>4} {:>7} {:>7} {:>7}\n", "sequence", "objs", "J", "F", "J&F");
        for s in &self.per_sequence {
            out += &format!(
                "{:<24} {:>4} {:>7.4} {:>7.4} {:>7.4}\n",
                s.sequence, s.n_objects, s.j_mean, s.f_mean, s.jf_mean
            );
        }
        out += &format!(
            "{:<24} {:>4} {:>7.4} {:>7.4} {:>7.4}\n",
            "mean",
            self.per_object.len(),
            self.means.j_mean,
            self.means.f_mean,
            self.means.jf_mean
        );
        out
    }
}
