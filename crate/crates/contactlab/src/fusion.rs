//! Contact-branch feature fusion: cross-attention between the scene and part
//! token sets (single-vector or full patch-level), layer-normalized Hadamard
//! fusion, learned-query attention pooling, and the channel-zeroing probe.

use ndcore::{DiffArray, Reduce, Rng, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::attention::{merge_heads, scaled_dot_attention_with_weights, split_heads};
use crate::encoder::FeatureMap;
use crate::error::{ContactError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Queries are mean-pooled to a single vector before attending.
    Global,
    /// Every patch token attends.
    Patch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    /// Scaling factor inside the softmax; `None` picks the token dimension
    /// (per-head dimension when `heads > 1`).
    pub scale: Option<f64>,
    pub heads: usize,
    pub mode: FusionMode,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            scale: None,
            heads: 1,
            mode: FusionMode::Patch,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.scale {
            if s <= 0.0 {
                return Err(ContactError::Config(format!(
                    "attention scale must be > 0, got {s}"
                )));
            }
        }
        if self.heads == 0 {
            return Err(ContactError::Config("attention heads must be >= 1".into()));
        }
        Ok(())
    }

    fn resolve_scale(&self, d: usize) -> f64 {
        self.scale.unwrap_or((d / self.heads) as f64)
    }
}

/// Learned pooling query.
#[derive(Debug, Clone)]
pub struct PoolQuery {
    pub q: DiffArray,
}

impl PoolQuery {
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        let mut q = vec![0.0; dim];
        rng.fill_normal(&mut q, 0.0, 0.02);
        PoolQuery {
            q: DiffArray::new(q, vec![dim]).expect("dim > 0"),
        }
    }
}

/// Cross-attention with Q from the first map and K, V from the second.
/// The output token count equals the (possibly pooled) query count and the
/// output carries the key/value branch tag.
pub fn cross_attend(
    tape: &mut Tape,
    queries_from: &FeatureMap,
    keys_values_from: &FeatureMap,
    cfg: &AttentionConfig,
) -> Result<FeatureMap> {
    cfg.validate()?;
    let (_, dq) = tape.value(queries_from.tokens).dims2()?;
    let (_, dk) = tape.value(keys_values_from.tokens).dims2()?;
    if dq != dk {
        return Err(ContactError::Config(format!(
            "token dimensions differ between branches: {dq} vs {dk}"
        )));
    }
    if dq % cfg.heads != 0 {
        return Err(ContactError::Config(format!(
            "token dimension {dq} not divisible by {} heads",
            cfg.heads
        )));
    }
    let q = match cfg.mode {
        FusionMode::Patch => queries_from.tokens,
        FusionMode::Global => {
            let pooled = tape.reduce(queries_from.tokens, Reduce::Mean, Some(0))?;
            tape.reshape(pooled, vec![1, dq])?
        }
    };
    let kv = keys_values_from.tokens;
    let scale = cfg.resolve_scale(dq);
    let tokens = if cfg.heads == 1 {
        let (out, _w) = scaled_dot_attention_with_weights(tape, q, kv, kv, scale)?;
        out
    } else {
        let qs = split_heads(tape, q, cfg.heads)?;
        let ks = split_heads(tape, kv, cfg.heads)?;
        let mut outs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let (o, _w) = scaled_dot_attention_with_weights(tape, qs[h], ks[h], ks[h], scale)?;
            outs.push(o);
        }
        merge_heads(tape, &outs)?
    };
    Ok(FeatureMap {
        tokens,
        branch: keys_values_from.branch,
    })
}

/// Same as [`cross_attend`] with `heads == 1`, exposing the attention rows.
pub fn cross_attend_with_weights(
    tape: &mut Tape,
    queries_from: &FeatureMap,
    keys_values_from: &FeatureMap,
    cfg: &AttentionConfig,
) -> Result<(FeatureMap, Var)> {
    if cfg.heads != 1 {
        return Err(ContactError::Config(
            "attention weight readout supports a single head".into(),
        ));
    }
    cfg.validate()?;
    let (_, d) = tape.value(queries_from.tokens).dims2()?;
    let q = match cfg.mode {
        FusionMode::Patch => queries_from.tokens,
        FusionMode::Global => {
            let pooled = tape.reduce(queries_from.tokens, Reduce::Mean, Some(0))?;
            tape.reshape(pooled, vec![1, d])?
        }
    };
    let kv = keys_values_from.tokens;
    let (out, weights) =
        scaled_dot_attention_with_weights(tape, q, kv, kv, cfg.resolve_scale(d))?;
    Ok((
        FeatureMap {
            tokens: out,
            branch: keys_values_from.branch,
        },
        weights,
    ))
}

/// Layer-normalized Hadamard product of the two attended maps.
pub fn fuse(
    tape: &mut Tape,
    scene_attended: &FeatureMap,
    part_attended: &FeatureMap,
    ln_gain: Var,
    ln_bias: Var,
    eps: f64,
) -> Result<FeatureMap> {
    let a = tape.value(scene_attended.tokens).shape().to_vec();
    let b = tape.value(part_attended.tokens).shape().to_vec();
    if a != b {
        return Err(ContactError::Config(format!(
            "fused maps must share shape, got {a:?} and {b:?}"
        )));
    }
    let product = tape.hadamard(scene_attended.tokens, part_attended.tokens)?;
    let tokens = tape.layer_norm(product, ln_gain, ln_bias, eps)?;
    Ok(FeatureMap {
        tokens,
        branch: scene_attended.branch,
    })
}

/// Learned-query attention pooling: weights softmax(q . F_i) over tokens,
/// output their weighted sum `[1,D]`. Also returns the weight row `[1,N]`.
pub fn attention_pool(tape: &mut Tape, map: &FeatureMap, query: Var) -> Result<(Var, Var)> {
    let (n, d) = tape.value(map.tokens).dims2()?;
    if n == 0 {
        return Err(ContactError::Config("attention_pool over an empty token set".into()));
    }
    if tape.value(query).shape() != [d] {
        return Err(ContactError::Config(format!(
            "pool query has shape {:?}, tokens have dimension {d}",
            tape.value(query).shape()
        )));
    }
    let q_col = tape.reshape(query, vec![d, 1])?;
    let scores = tape.matmul(map.tokens, q_col)?;
    let scores_row = tape.transpose(scores)?;
    let weights = tape.softmax_rows(scores_row)?;
    let pooled = tape.matmul(weights, map.tokens)?;
    Ok((pooled, weights))
}

/// Mean pooling over tokens, the non-learned alternative.
pub fn mean_pool(tape: &mut Tape, map: &FeatureMap) -> Result<Var> {
    let (_, d) = tape.value(map.tokens).dims2()?;
    let m = tape.reduce(map.tokens, Reduce::Mean, Some(0))?;
    Ok(tape.reshape(m, vec![1, d])?)
}

/// Keep `keep` channels of every token and zero the rest. With no permutation
/// seed the trailing channels are zeroed; with a seed, the kept set is the
/// first `keep` entries of a seeded channel shuffle.
pub fn zero_out_channels(
    tape: &mut Tape,
    map: &FeatureMap,
    keep: usize,
    permutation_seed: Option<u64>,
) -> Result<FeatureMap> {
    let (n, c) = tape.value(map.tokens).dims2()?;
    if keep > c {
        return Err(ContactError::Config(format!(
            "cannot keep {keep} channels of {c}"
        )));
    }
    let mut kept = vec![false; c];
    match permutation_seed {
        None => kept[..keep].iter_mut().for_each(|k| *k = true),
        Some(seed) => {
            let mut order: Vec<usize> = (0..c).collect();
            let mut rng = Rng::new(seed);
            for i in (1..c).rev() {
                order.swap(i, rng.below(i + 1));
            }
            for &ch in order.iter().take(keep) {
                kept[ch] = true;
            }
        }
    }
    let mask: Vec<f64> = (0..n * c)
        .map(|idx| if kept[idx % c] { 1.0 } else { 0.0 })
        .collect();
    let mask = tape.constant(mask, vec![n, c])?;
    let tokens = tape.hadamard(map.tokens, mask)?;
    Ok(FeatureMap {
        tokens,
        branch: map.branch,
    })
}
