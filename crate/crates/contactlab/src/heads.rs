//! Output heads: per-vertex binary contact, per-vertex semantic
//! classification, and the two auxiliary per-patch segmentation decoders.

use ndcore::{Pointwise, Tape, Var};

use crate::encoder::{lora_linear, Branch, FeatureMap, LinearVars};
use crate::error::{ContactError, Result};

/// Part segmentation channel count: 24 body parts plus background.
pub const PART_SEG_CLASSES: usize = 25;

/// Per-vertex predictions as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct ContactPrediction {
    /// `[V]`, each entry in (0,1).
    pub contact_prob: Var,
    /// `[V,S]` raw scores.
    pub semantic_logits: Var,
    /// `[V,S]` rows summing to 1.
    pub semantic_prob: Var,
}

/// Plain-data snapshot of a [`ContactPrediction`], for metrics and dumps.
#[derive(Debug, Clone)]
pub struct ContactOutput {
    pub contact_prob: Vec<f64>,
    pub semantic_prob: Vec<f64>,
    pub semantic_argmax: Vec<usize>,
    pub classes: usize,
}

impl ContactPrediction {
    pub fn extract(&self, tape: &Tape) -> ContactOutput {
        let contact_prob = tape.value(self.contact_prob).values().to_vec();
        let probs = tape.value(self.semantic_prob).values().to_vec();
        let (v, s) = tape
            .value(self.semantic_prob)
            .dims2()
            .expect("semantic probs are [V,S]");
        debug_assert_eq!(contact_prob.len(), v);
        let semantic_argmax = (0..v)
            .map(|i| {
                let row = &probs[i * s..(i + 1) * s];
                let mut best = 0;
                for (j, val) in row.iter().enumerate() {
                    if *val > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        ContactOutput {
            contact_prob,
            semantic_prob: probs,
            semantic_argmax,
            classes: s,
        }
    }
}

/// Per-patch class scores from one branch decoder.
#[derive(Debug, Clone, Copy)]
pub struct SegmentationMap {
    pub logits: Var,
    pub kind: Branch,
}

/// Two-layer MLP from the pooled fusion vector to per-vertex contact
/// probabilities: `[1,D] -> hidden -> V`, then sigmoid, flattened to `[V]`.
pub fn contact_head(
    tape: &mut Tape,
    pooled: Var,
    fc1: &LinearVars,
    fc2: &LinearVars,
) -> Result<Var> {
    let hidden = lora_linear(tape, pooled, fc1)?;
    let hidden = tape.pointwise(hidden, Pointwise::Gelu)?;
    let logits = lora_linear(tape, hidden, fc2)?;
    let probs = tape.pointwise(logits, Pointwise::Sigmoid)?;
    let v = tape.value(probs).numel();
    Ok(tape.reshape(probs, vec![v])?)
}

/// One feature row per mesh vertex: a learned projection of the pooled
/// fusion vector broadcast to all vertices, plus a learned per-vertex
/// embedding table `[V,D']`.
pub fn vertex_feature_expand(
    tape: &mut Tape,
    pooled: Var,
    proj: &LinearVars,
    table: Var,
) -> Result<Var> {
    let projected = lora_linear(tape, pooled, proj)?;
    let (v, dp) = tape.value(table).dims2()?;
    let (_, dout) = tape.value(projected).dims2()?;
    if dout != dp {
        return Err(ContactError::Config(format!(
            "vertex projection width {dout} does not match table width {dp}"
        )));
    }
    let ones = tape.constant(vec![1.0; v], vec![v, 1])?;
    let broadcast = tape.matmul(ones, projected)?;
    Ok(tape.add(broadcast, table)?)
}

/// Per-vertex class scores: MLP then row softmax. Returns (logits, probs).
pub fn semantic_head(
    tape: &mut Tape,
    vertex_features: Var,
    fc1: &LinearVars,
    fc2: &LinearVars,
) -> Result<(Var, Var)> {
    let (s_out, _) = tape.value(fc2.weight).dims2()?;
    if s_out < 2 {
        return Err(ContactError::Config(format!(
            "semantic head needs at least 2 classes, got {s_out}"
        )));
    }
    let hidden = lora_linear(tape, vertex_features, fc1)?;
    let hidden = tape.pointwise(hidden, Pointwise::Gelu)?;
    let logits = lora_linear(tape, hidden, fc2)?;
    let probs = tape.softmax_rows(logits)?;
    Ok((logits, probs))
}

/// Per-patch linear classifier over the branch's segmentation classes.
pub fn seg_decoder(
    tape: &mut Tape,
    features: &FeatureMap,
    kind: Branch,
    layer: &LinearVars,
) -> Result<SegmentationMap> {
    if features.branch != kind {
        return Err(ContactError::Config(format!(
            "{} decoder fed {} features",
            kind.label(),
            features.branch.label()
        )));
    }
    let (c_seg, _) = tape.value(layer.weight).dims2()?;
    if kind == Branch::Part && c_seg != PART_SEG_CLASSES {
        return Err(ContactError::Config(format!(
            "part decoder must output {PART_SEG_CLASSES} classes, got {c_seg}"
        )));
    }
    let logits = lora_linear(tape, features.tokens, layer)?;
    Ok(SegmentationMap { logits, kind })
}
