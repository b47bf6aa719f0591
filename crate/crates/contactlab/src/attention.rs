//! Scaled dot-product attention building blocks shared by the patch encoders
//! and the fusion stage.

use ndcore::{Pointwise, Tape, Var};

use crate::error::Result;

/// softmax(q k^T / sqrt(scale)) v for a single head.
/// `q: [nq,d]`, `k: [nk,d]`, `v: [nk,dv]` -> `[nq,dv]`.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.pointwise(logits, Pointwise::Scale(1.0 / scale.sqrt()))?;
    let weights = tape.softmax_rows(scaled)?;
    Ok(tape.matmul(weights, v)?)
}

/// Like [`scaled_dot_attention`] but also returns the attention weights.
pub fn scaled_dot_attention_with_weights(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    scale: f64,
) -> Result<(Var, Var)> {
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.pointwise(logits, Pointwise::Scale(1.0 / scale.sqrt()))?;
    let weights = tape.softmax_rows(scaled)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Slice `x: [n,d]` into `heads` column blocks of width `d/heads`.
pub fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Vec<Var>> {
    let (n, d) = tape.value(x).dims2()?;
    debug_assert_eq!(d % heads, 0);
    let dh = d / heads;
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut map = Vec::with_capacity(n * dh);
        for i in 0..n {
            for t in 0..dh {
                map.push(i * d + h * dh + t);
            }
        }
        parts.push(tape.reindex(x, map, vec![n, dh])?);
    }
    Ok(parts)
}

/// Inverse of [`split_heads`]: reassemble column blocks into `[n,d]`.
pub fn merge_heads(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let heads = parts.len();
    let (n, dh) = tape.value(parts[0]).dims2()?;
    let d = dh * heads;
    let mut merged: Option<Var> = None;
    for (h, part) in parts.iter().enumerate() {
        let mut map = vec![ndcore::tape::REINDEX_ZERO; n * d];
        for i in 0..n {
            for t in 0..dh {
                map[i * d + h * dh + t] = i * dh + t;
            }
        }
        let embedded = tape.reindex(*part, map, vec![n, d])?;
        merged = Some(match merged {
            None => embedded,
            Some(m) => tape.add(m, embedded)?,
        });
    }
    Ok(merged.expect("at least one head"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndcore::Rng;

    #[test]
    fn split_merge_roundtrip() {
        let mut rng = Rng::new(3);
        let vals: Vec<f64> = (0..24).map(|_| rng.normal(0.0, 1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(vals.clone(), vec![3, 8]).unwrap();
        let parts = split_heads(&mut tape, x, 4).unwrap();
        let back = merge_heads(&mut tape, &parts).unwrap();
        assert_eq!(tape.value(back).values(), vals.as_slice());
    }

    #[test]
    fn singleton_attention_returns_v() {
        let mut tape = Tape::new();
        let q = tape.constant(vec![0.3, -1.0], vec![1, 2]).unwrap();
        let k = tape.constant(vec![5.0, 2.0], vec![1, 2]).unwrap();
        let v = tape.constant(vec![7.25, -3.5], vec![1, 2]).unwrap();
        let out = scaled_dot_attention(&mut tape, q, k, v, 2.0).unwrap();
        assert_eq!(tape.value(out).values(), &[7.25, -3.5]);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut tape = Tape::new();
        let q = tape.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let k = tape.constant(vec![0.5, 0.5, 0.5, 0.5], vec![2, 2]).unwrap();
        let v = tape.constant(vec![1.0, 3.0, 5.0, 7.0], vec![2, 2]).unwrap();
        let out = scaled_dot_attention(&mut tape, q, k, v, 2.0).unwrap();
        let got = tape.value(out).values();
        assert!((got[0] - 3.0).abs() < 1e-12);
        assert!((got[1] - 5.0).abs() < 1e-12);
    }
}
