//! Micro patch encoders: two small pre-norm vision transformers standing in
//! for the scene and body-part branches, with optional weight sharing and
//! low-rank adapters on every attention and MLP projection.

use ndcore::{DiffArray, Pointwise, Rng, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::attention::{merge_heads, scaled_dot_attention, split_heads};
use crate::error::{ContactError, Result};

/// Std used for adapter down-projection init.
pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub shared_branches: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 56,
            patch_size: 14,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            shared_branches: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(ContactError::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(ContactError::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patches per side of the grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count N.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened patch length fed to the embedding layer.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.embed_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Scene,
    Part,
}

impl Branch {
    pub fn label(self) -> &'static str {
        match self {
            Branch::Scene => "scene",
            Branch::Part => "part",
        }
    }
}

/// Patch-token sequence from one branch. `tokens` is an `[N,D]` node on the
/// tape that produced it.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub tokens: Var,
    pub branch: Branch,
}

/// Low-rank adapter. `down: [rank,d_in]` initialized with a small Gaussian,
/// `up: [d_out,rank]` initialized to zero so the adapted layer starts as an
/// exact no-op.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub enabled: bool,
    pub down: DiffArray,
    pub up: DiffArray,
}

impl LoraAdapter {
    pub fn new(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 {
            return Err(ContactError::Config("adapter rank must be >= 1".into()));
        }
        if rank > d_in.min(d_out) {
            return Err(ContactError::Config(format!(
                "adapter rank {rank} exceeds min(d_in={d_in}, d_out={d_out})"
            )));
        }
        if alpha <= 0.0 {
            return Err(ContactError::Config(format!("adapter alpha must be > 0, got {alpha}")));
        }
        let mut down = vec![0.0; rank * d_in];
        rng.fill_normal(&mut down, 0.0, LORA_INIT_STD);
        Ok(LoraAdapter {
            rank,
            alpha,
            enabled: true,
            down: DiffArray::new(down, vec![rank, d_in]).map_err(ContactError::Engine)?,
            up: DiffArray::zeros(vec![d_out, rank]),
        })
    }

    /// Trainable parameters: rank * (d_in + d_out).
    pub fn param_count(&self) -> usize {
        self.down.numel() + self.up.numel()
    }

    /// Bind the factors onto a tape as gradient leaves. A disabled adapter
    /// binds to nothing, so the layer runs as a plain linear map.
    pub fn bind(&self, tape: &mut Tape) -> Option<LoraVars> {
        if !self.enabled {
            return None;
        }
        Some(LoraVars {
            down: tape.leaf(self.down.clone().with_grad()),
            up: tape.leaf(self.up.clone().with_grad()),
            rank: self.rank,
            alpha: self.alpha,
        })
    }
}

/// Adapter factors bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LoraVars {
    pub down: Var,
    pub up: Var,
    pub rank: usize,
    pub alpha: f64,
}

/// Linear layer vars: `weight: [d_out,d_in]`, `bias: [d_out]`, plus an
/// optional enabled adapter. When an adapter is attached, the caller is
/// expected to have bound `weight` and `bias` as frozen leaves.
#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
    pub lora: Option<LoraVars>,
}

/// y = x W^T + b, plus (alpha/rank) x A^T B^T when an adapter is attached.
pub fn lora_linear(tape: &mut Tape, x: Var, layer: &LinearVars) -> Result<Var> {
    let (d_out, d_in) = tape.value(layer.weight).dims2()?;
    if let Some(lora) = &layer.lora {
        let (r, a_in) = tape.value(lora.down).dims2()?;
        let (b_out, b_r) = tape.value(lora.up).dims2()?;
        if r != lora.rank || b_r != lora.rank || a_in != d_in || b_out != d_out {
            return Err(ContactError::Config(format!(
                "adapter shapes ({r}x{a_in}, {b_out}x{b_r}) do not fit layer {d_out}x{d_in} rank {}",
                lora.rank
            )));
        }
        if lora.rank > d_in.min(d_out) {
            return Err(ContactError::Config(format!(
                "adapter rank {} exceeds min(d_in={d_in}, d_out={d_out})",
                lora.rank
            )));
        }
    }
    let wt = tape.transpose(layer.weight)?;
    let base = tape.matmul(x, wt)?;
    let base = tape.add_row(base, layer.bias)?;
    match &layer.lora {
        None => Ok(base),
        Some(lora) => {
            let at = tape.transpose(lora.down)?;
            let xa = tape.matmul(x, at)?;
            let bt = tape.transpose(lora.up)?;
            let xab = tape.matmul(xa, bt)?;
            let delta = tape.pointwise(xab, Pointwise::Scale(lora.alpha / lora.rank as f64))?;
            Ok(tape.add(base, delta)?)
        }
    }
}

/// Split an `[H,W,3]` image into non-overlapping patches, flattened row-major
/// in raster order of the patch grid: `[N, 3*patch^2]`.
pub fn patchify(tape: &mut Tape, image: Var, cfg: &EncoderConfig) -> Result<Var> {
    let shape = tape.value(image).shape().to_vec();
    let (h, w) = match shape.as_slice() {
        &[h, w, 3] => (h, w),
        _ => {
            return Err(ContactError::Config(format!(
                "expected [H,W,3] image, got shape {shape:?}"
            )))
        }
    };
    if h != cfg.image_size || w != cfg.image_size {
        return Err(ContactError::Config(format!(
            "image is {h}x{w}, config expects {0}x{0}",
            cfg.image_size
        )));
    }
    let p = cfg.patch_size;
    let g = cfg.grid();
    let n = cfg.num_patches();
    let pd = cfg.patch_dim();
    let mut map = Vec::with_capacity(n * pd);
    for py in 0..g {
        for px in 0..g {
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..3 {
                        map.push(((py * p + dy) * w + (px * p + dx)) * 3 + c);
                    }
                }
            }
        }
    }
    Ok(tape.reindex(image, map, vec![n, pd])?)
}

/// Per-block parameter vars.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub out: LinearVars,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub mlp_in: LinearVars,
    pub mlp_out: LinearVars,
}

/// Full encoder parameter vars for one branch. The final normalization
/// closes the pre-norm stack and is skipped when there are no blocks.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub patch_embed: LinearVars,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub ln_out_gain: Var,
    pub ln_out_bias: Var,
}

const LN_EPS: f64 = 1e-5;

/// Patch embedding plus position embeddings, before any transformer block.
/// A `mask` entry of true replaces that patch's embedding with `mask_token`
/// (used by the masked-distillation path); position embeddings are added
/// afterwards either way.
pub fn embed_patches(
    tape: &mut Tape,
    image: Var,
    cfg: &EncoderConfig,
    vars: &EncoderVars,
    mask: Option<(&[bool], Var)>,
) -> Result<Var> {
    let patches = patchify(tape, image, cfg)?;
    let mut embedded = lora_linear(tape, patches, &vars.patch_embed)?;
    if let Some((mask, mask_token)) = mask {
        let (n, d) = tape.value(embedded).dims2()?;
        if mask.len() != n {
            return Err(ContactError::Config(format!(
                "mask has {} entries for {n} patches",
                mask.len()
            )));
        }
        // Keep unmasked rows, swap masked rows for the mask token.
        let mut keep_map = Vec::with_capacity(n * d);
        let mut token_map = Vec::with_capacity(n * d);
        for (i, &masked) in mask.iter().enumerate() {
            for j in 0..d {
                keep_map.push(if masked { ndcore::tape::REINDEX_ZERO } else { i * d + j });
                token_map.push(if masked { j } else { ndcore::tape::REINDEX_ZERO });
            }
        }
        let kept = tape.reindex(embedded, keep_map, vec![n, d])?;
        let tokens = tape.reindex(mask_token, token_map, vec![n, d])?;
        embedded = tape.add(kept, tokens)?;
    }
    Ok(tape.add(embedded, vars.pos_embed)?)
}

fn transformer_block(
    tape: &mut Tape,
    x: Var,
    cfg: &EncoderConfig,
    block: &BlockVars,
) -> Result<Var> {
    let d = cfg.embed_dim;
    let dh = d / cfg.heads;

    let normed = tape.layer_norm(x, block.ln1_gain, block.ln1_bias, LN_EPS)?;
    let q = lora_linear(tape, normed, &block.q)?;
    let k = lora_linear(tape, normed, &block.k)?;
    let v = lora_linear(tape, normed, &block.v)?;
    let qs = split_heads(tape, q, cfg.heads)?;
    let ks = split_heads(tape, k, cfg.heads)?;
    let vs = split_heads(tape, v, cfg.heads)?;
    let mut head_outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        head_outs.push(scaled_dot_attention(tape, qs[h], ks[h], vs[h], dh as f64)?);
    }
    let attn = merge_heads(tape, &head_outs)?;
    let attn = lora_linear(tape, attn, &block.out)?;
    let x = tape.add(x, attn)?;

    let normed = tape.layer_norm(x, block.ln2_gain, block.ln2_bias, LN_EPS)?;
    let hidden = lora_linear(tape, normed, &block.mlp_in)?;
    let hidden = tape.pointwise(hidden, Pointwise::Gelu)?;
    let mlp = lora_linear(tape, hidden, &block.mlp_out)?;
    Ok(tape.add(x, mlp)?)
}

/// Full branch forward: patchify, embed, `depth` pre-norm blocks.
pub fn encode(
    tape: &mut Tape,
    image: Var,
    branch: Branch,
    cfg: &EncoderConfig,
    vars: &EncoderVars,
) -> Result<FeatureMap> {
    cfg.validate()?;
    let mut x = embed_patches(tape, image, cfg, vars, None)?;
    for block in &vars.blocks {
        x = transformer_block(tape, x, cfg, block)?;
    }
    if !vars.blocks.is_empty() {
        x = tape.layer_norm(x, vars.ln_out_gain, vars.ln_out_bias, LN_EPS)?;
    }
    Ok(FeatureMap { tokens: x, branch })
}

/// Masked variant used by the distillation pretraining path.
pub fn encode_masked(
    tape: &mut Tape,
    image: Var,
    branch: Branch,
    cfg: &EncoderConfig,
    vars: &EncoderVars,
    mask: &[bool],
    mask_token: Var,
) -> Result<FeatureMap> {
    cfg.validate()?;
    let mut x = embed_patches(tape, image, cfg, vars, Some((mask, mask_token)))?;
    for block in &vars.blocks {
        x = transformer_block(tape, x, cfg, block)?;
    }
    if !vars.blocks.is_empty() {
        x = tape.layer_norm(x, vars.ln_out_gain, vars.ln_out_bias, LN_EPS)?;
    }
    Ok(FeatureMap { tokens: x, branch })
}
