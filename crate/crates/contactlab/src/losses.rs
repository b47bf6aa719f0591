//! Training objectives: positive class-balance weights, weighted per-vertex
//! BCE, semantic and segmentation cross-entropies, a point-splat
//! pixel-anchoring loss, and the weighted composite of the four branch terms.
//!
//! The pixel-anchoring term replaces mesh rasterization with a weak
//! perspective point splat: each vertex's contact probability lands in the
//! pixel cell containing its projection, cells aggregate by max, and the
//! splatted map is scored against the 2D annotation over occupied cells.

use std::io::Write;
use std::path::Path;

use ndcore::{Pointwise, Reduce, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ContactError, Result};
use crate::heads::SegmentationMap;
use crate::warnings;

const PROB_FLOOR: f64 = 1e-12;

/// Per-vertex positive weights with their provenance counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassBalanceWeights {
    pub counts: Vec<u64>,
    pub beta: f64,
    pub epsilon: f64,
    /// Raw weights straight from the effective-number formula.
    pub raw: Vec<f64>,
    /// Rescaled and clipped weights actually applied to the loss.
    pub phi: Vec<f64>,
    pub target_mean: f64,
    pub clip_max: f64,
}

pub const DEFAULT_BETA: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_TARGET_MEAN: f64 = 6.451;
/// Default clip threshold as a multiple of the target mean.
pub const DEFAULT_CLIP_FACTOR: f64 = 50.0;

/// phi_i = 1 / ((1 - beta^{n_i}) / (1 - beta) + epsilon), rescaled so the
/// clipped weights have the requested mean. Rescale and clip alternate until
/// the mean settles within 1e-6 or 100 rounds pass.
pub fn class_balance_weights(
    counts: &[u64],
    beta: f64,
    epsilon: f64,
    target_mean: f64,
    clip_max: Option<f64>,
) -> Result<ClassBalanceWeights> {
    if counts.is_empty() {
        return Err(ContactError::Config("no vertices to weight".into()));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(ContactError::Config(format!("beta must be in (0,1), got {beta}")));
    }
    if epsilon <= 0.0 {
        return Err(ContactError::Config(format!("epsilon must be > 0, got {epsilon}")));
    }
    if target_mean <= 0.0 {
        return Err(ContactError::Config(format!(
            "target mean must be > 0, got {target_mean}"
        )));
    }
    if counts.iter().all(|&n| n == 0) {
        return Err(ContactError::Data(
            "every vertex has zero positive occurrences".into(),
        ));
    }
    let clip_max = clip_max.unwrap_or(DEFAULT_CLIP_FACTOR * target_mean);
    if clip_max <= 0.0 {
        return Err(ContactError::Config(format!("clip_max must be > 0, got {clip_max}")));
    }

    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| {
            let effective = if n <= i32::MAX as u64 {
                (1.0 - beta.powi(n as i32)) / (1.0 - beta)
            } else {
                (1.0 - beta.powf(n as f64)) / (1.0 - beta)
            };
            1.0 / (effective + epsilon)
        })
        .collect();

    // Fixed point of rescale-then-clip.
    let v = raw.len() as f64;
    let mut scale = target_mean / (raw.iter().sum::<f64>() / v);
    let mut phi: Vec<f64> = Vec::new();
    for _ in 0..100 {
        phi = raw.iter().map(|r| (r * scale).min(clip_max)).collect();
        let mean = phi.iter().sum::<f64>() / v;
        if (mean - target_mean).abs() <= 1e-6 {
            break;
        }
        scale *= target_mean / mean;
    }

    Ok(ClassBalanceWeights {
        counts: counts.to_vec(),
        beta,
        epsilon,
        raw,
        phi,
        target_mean,
        clip_max,
    })
}

impl ClassBalanceWeights {
    pub fn mean_phi(&self) -> f64 {
        self.phi.iter().sum::<f64>() / self.phi.len() as f64
    }

    /// CSV with columns vertex_id, n_i, phi_raw, phi_final.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "vertex_id,n_i,phi_raw,phi_final").unwrap();
        for (i, ((n, raw), phi)) in self
            .counts
            .iter()
            .zip(&self.raw)
            .zip(&self.phi)
            .enumerate()
        {
            writeln!(out, "{i},{n},{raw},{phi}").unwrap();
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Recompute the target mean from label statistics: total negatives over
/// total positives across the training split.
pub fn negative_positive_ratio(counts: &[u64], images: usize) -> Result<f64> {
    let positives: u64 = counts.iter().sum();
    if positives == 0 {
        return Err(ContactError::Data("no positive vertices in split".into()));
    }
    let total = counts.len() as u64 * images as u64;
    Ok((total - positives) as f64 / positives as f64)
}

fn clamp_probs(tape: &mut Tape, p: Var, context: &str) -> Result<Var> {
    let vals = tape.value(p).values();
    let outside = vals.iter().filter(|v| **v <= 0.0 || **v >= 1.0).count();
    if outside > 0 {
        warnings::record(format!(
            "{context}: {outside} probabilities outside (0,1) clamped to [{PROB_FLOOR}, 1-{PROB_FLOOR}]"
        ));
    }
    Ok(tape.pointwise(
        p,
        Pointwise::Clamp {
            lo: PROB_FLOOR,
            hi: 1.0 - PROB_FLOOR,
        },
    )?)
}

/// Per-vertex binary cross-entropy with the class-balance weight applied to
/// the positive term only:
/// -(1/V) sum_i [ phi_i y_i log p_i + (1 - y_i) log(1 - p_i) ].
pub fn weighted_bce(tape: &mut Tape, pred: Var, labels: &[f64], phi: &[f64]) -> Result<Var> {
    let v = tape.value(pred).numel();
    if labels.len() != v || phi.len() != v {
        return Err(ContactError::Config(format!(
            "BCE sizes disagree: pred {v}, labels {}, phi {}",
            labels.len(),
            phi.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|y| **y != 0.0 && **y != 1.0) {
        return Err(ContactError::Data(format!("labels must be 0 or 1, got {bad}")));
    }
    let p = clamp_probs(tape, pred, "weighted_bce")?;

    let pos_coef: Vec<f64> = labels.iter().zip(phi).map(|(y, w)| y * w).collect();
    let neg_coef: Vec<f64> = labels.iter().map(|y| 1.0 - y).collect();
    let shape = vec![v];

    let log_p = tape.pointwise(p, Pointwise::Log)?;
    let pos_c = tape.constant(pos_coef, shape.clone())?;
    let pos_term = tape.hadamard(pos_c, log_p)?;

    let ones = tape.constant(vec![1.0; v], shape.clone())?;
    let neg_p = tape.pointwise(p, Pointwise::Negate)?;
    let one_minus = tape.add(ones, neg_p)?;
    let log_1p = tape.pointwise(one_minus, Pointwise::Log)?;
    let neg_c = tape.constant(neg_coef, shape)?;
    let neg_term = tape.hadamard(neg_c, log_1p)?;

    let sum_terms = tape.add(pos_term, neg_term)?;
    let mean = tape.reduce(sum_terms, Reduce::Mean, None)?;
    Ok(tape.pointwise(mean, Pointwise::Negate)?)
}

/// Mean cross-entropy of per-vertex class logits over the masked vertices.
pub fn semantic_ce(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    active_mask: &[bool],
) -> Result<Var> {
    let (v, s) = tape.value(logits).dims2()?;
    if targets.len() != v || active_mask.len() != v {
        return Err(ContactError::Config(format!(
            "semantic CE sizes disagree: logits {v} rows, targets {}, mask {}",
            targets.len(),
            active_mask.len()
        )));
    }
    let active = active_mask.iter().filter(|m| **m).count();
    if active == 0 {
        warnings::record("semantic_ce: empty active mask, loss is 0");
        return Ok(tape.scalar(0.0));
    }
    for (i, (&t, &m)) in targets.iter().zip(active_mask).enumerate() {
        if m && t >= s {
            return Err(ContactError::Data(format!(
                "vertex {i}: class id {t} out of range for {s} classes"
            )));
        }
    }
    let lsm = tape.log_softmax_rows(logits)?;
    let mut picks = vec![0.0; v * s];
    for i in 0..v {
        if active_mask[i] {
            picks[i * s + targets[i]] = 1.0 / active as f64;
        }
    }
    let picks = tape.constant(picks, vec![v, s])?;
    let selected = tape.hadamard(lsm, picks)?;
    let total = tape.reduce(selected, Reduce::Sum, None)?;
    Ok(tape.pointwise(total, Pointwise::Negate)?)
}

/// Mean per-patch cross-entropy for a segmentation map.
pub fn seg_ce(tape: &mut Tape, map: &SegmentationMap, target: &[usize]) -> Result<Var> {
    let (n, c) = tape.value(map.logits).dims2()?;
    if target.len() != n {
        return Err(ContactError::Config(format!(
            "segmentation target has {} entries for {n} patches",
            target.len()
        )));
    }
    if let Some((i, &t)) = target.iter().enumerate().find(|(_, t)| **t >= c) {
        return Err(ContactError::Data(format!(
            "patch {i}: class id {t} out of range for {c} classes"
        )));
    }
    let lsm = tape.log_softmax_rows(map.logits)?;
    let mut picks = vec![0.0; n * c];
    for (i, &t) in target.iter().enumerate() {
        picks[i * c + t] = 1.0 / n as f64;
    }
    let picks = tape.constant(picks, vec![n, c])?;
    let selected = tape.hadamard(lsm, picks)?;
    let total = tape.reduce(selected, Reduce::Sum, None)?;
    Ok(tape.pointwise(total, Pointwise::Negate)?)
}

/// Weak perspective camera: u = s x + t_x, v = s y + t_y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub scale: f64,
    pub t_x: f64,
    pub t_y: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.scale <= 0.0 {
            return Err(ContactError::Config(format!(
                "camera scale must be > 0, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    pub fn project(&self, vertex: [f64; 3]) -> (f64, f64) {
        (
            self.scale * vertex[0] + self.t_x,
            self.scale * vertex[1] + self.t_y,
        )
    }
}

/// Binary 2D contact annotation at splat resolution, row-major `[H',W']`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gt2d {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Gt2d {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(ContactError::Config(format!(
                "2D map has {} values for {height}x{width}",
                values.len()
            )));
        }
        if values.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(ContactError::Data("2D map entries must be 0 or 1".into()));
        }
        Ok(Gt2d { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Gt2d {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }
}

/// Cell assignment of each vertex under the camera; `None` when the vertex
/// projects outside the map.
pub fn splat_cells(
    vertices: &[[f64; 3]],
    cam: &Camera,
    height: usize,
    width: usize,
) -> Vec<Option<(usize, usize)>> {
    vertices
        .iter()
        .map(|v| {
            let (u, w) = cam.project(*v);
            let col = u.floor();
            let row = w.floor();
            if col >= 0.0 && (col as usize) < width && row >= 0.0 && (row as usize) < height {
                Some((row as usize, col as usize))
            } else {
                None
            }
        })
        .collect()
}

/// Project vertices with the weak perspective camera, splat contact
/// probabilities into pixel cells with max aggregation, then score the
/// occupied cells against the 2D annotation with BCE.
pub fn pixel_anchor_loss(
    tape: &mut Tape,
    contact_prob: Var,
    vertices: &[[f64; 3]],
    cam: &Camera,
    gt: &Gt2d,
) -> Result<Var> {
    cam.validate()?;
    let v = tape.value(contact_prob).numel();
    if vertices.len() != v {
        return Err(ContactError::Config(format!(
            "{} vertices for {v} probabilities",
            vertices.len()
        )));
    }
    let cells = splat_cells(vertices, cam, gt.height, gt.width);
    let mut segments: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (i, cell) in cells.iter().enumerate() {
        if let Some(rc) = cell {
            segments.entry(*rc).or_default().push(i);
        }
    }
    if segments.is_empty() {
        return Err(ContactError::Data(
            "every vertex projects outside the 2D map".into(),
        ));
    }
    let order: Vec<(usize, usize)> = segments.keys().cloned().collect();
    let segs: Vec<Vec<usize>> = order.iter().map(|rc| segments[rc].clone()).collect();
    let splatted = tape.segment_max(contact_prob, &segs)?;
    let p = clamp_probs(tape, splatted, "pixel_anchor_loss")?;

    let m = order.len();
    let gt_cells: Vec<f64> = order
        .iter()
        .map(|(r, c)| gt.values[r * gt.width + c])
        .collect();
    let neg_coef: Vec<f64> = gt_cells.iter().map(|g| 1.0 - g).collect();

    let log_p = tape.pointwise(p, Pointwise::Log)?;
    let g_const = tape.constant(gt_cells, vec![m])?;
    let pos = tape.hadamard(g_const, log_p)?;

    let ones = tape.constant(vec![1.0; m], vec![m])?;
    let neg_p = tape.pointwise(p, Pointwise::Negate)?;
    let one_minus = tape.add(ones, neg_p)?;
    let log_1p = tape.pointwise(one_minus, Pointwise::Log)?;
    let negc = tape.constant(neg_coef, vec![m])?;
    let neg = tape.hadamard(negc, log_1p)?;

    let sum_terms = tape.add(pos, neg)?;
    let mean = tape.reduce(sum_terms, Reduce::Mean, None)?;
    Ok(tape.pointwise(mean, Pointwise::Negate)?)
}

/// Weights of the four composite terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_c: f64,
    pub w_pal: f64,
    pub w_s: f64,
    pub w_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_c: 1.0,
            w_pal: 0.5,
            w_s: 0.1,
            w_p: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_c, self.w_pal, self.w_s, self.w_p];
        if let Some(w) = all.iter().find(|w| **w < 0.0) {
            return Err(ContactError::Config(format!("negative loss weight {w}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(ContactError::Config(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Scalar loss terms entering the composite.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub contact: Var,
    pub pixel_anchor: Var,
    pub scene_seg: Var,
    pub part_seg: Var,
}

/// w_c L_c + w_pal L_pal + w_s L_s + w_p L_p.
pub fn composite_loss(tape: &mut Tape, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    for (name, term) in [
        ("contact", parts.contact),
        ("pixel_anchor", parts.pixel_anchor),
        ("scene_seg", parts.scene_seg),
        ("part_seg", parts.part_seg),
    ] {
        if tape.value(term).numel() != 1 {
            return Err(ContactError::Config(format!(
                "{name} loss term is not a scalar"
            )));
        }
    }
    let c = tape.pointwise(parts.contact, Pointwise::Scale(w.w_c))?;
    let pal = tape.pointwise(parts.pixel_anchor, Pointwise::Scale(w.w_pal))?;
    let s = tape.pointwise(parts.scene_seg, Pointwise::Scale(w.w_s))?;
    let p = tape.pointwise(parts.part_seg, Pointwise::Scale(w.w_p))?;
    let cp = tape.add(c, pal)?;
    let sp = tape.add(s, p)?;
    Ok(tape.add(cp, sp)?)
}
