//! Full model assembly: parameter registration, tape binding, the forward
//! pass through both encoder branches, fusion, and every head, plus the
//! per-sample loss terms.
//!
//! Encoder base weights (including patch and position embeddings) stay
//! frozen during supervised training, mirroring fine-tuning on top of a
//! pretrained backbone; adapters and everything downstream of the encoders
//! train. The distillation pretraining path flips the base weights to
//! trainable explicitly.

use std::collections::BTreeMap;

use ndcore::{Rng, Tape, Var};

use super::config::{ExperimentConfig, PoolingMode};
use super::synth::SyntheticSample;
use crate::encoder::{
    encode, Branch, EncoderVars, FeatureMap, LinearVars, LoraVars, BlockVars,
};
use crate::error::{ContactError, Result};
use crate::fusion::{
    attention_pool, cross_attend, fuse, mean_pool, zero_out_channels, AttentionConfig,
};
use crate::heads::{
    contact_head, seg_decoder, semantic_head, vertex_feature_expand, ContactPrediction,
    SegmentationMap, PART_SEG_CLASSES,
};
use crate::losses::{
    composite_loss, pixel_anchor_loss, seg_ce, semantic_ce, weighted_bce, LossParts,
};
use crate::meshmetrics::MeshTopology;
use crate::params::ParamStore;

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
pub struct ContactModel {
    pub cfg: ExperimentConfig,
    pub store: ParamStore,
}

/// Parameter vars bound onto one tape, plus the name map for gradient pulls.
pub struct BoundModel {
    pub vars: BTreeMap<String, Var>,
    scene: EncoderVars,
    part: EncoderVars,
    fusion_ln_gain: Var,
    fusion_ln_bias: Var,
    pool_query: Var,
    contact_fc1: LinearVars,
    contact_fc2: LinearVars,
    vertex_proj: LinearVars,
    vertex_table: Var,
    semantic_fc1: LinearVars,
    semantic_fc2: LinearVars,
    seg_scene: LinearVars,
    seg_part: LinearVars,
}

/// Everything the forward pass produces for one image.
pub struct ModelOutput {
    pub scene_features: FeatureMap,
    pub part_features: FeatureMap,
    pub fused: FeatureMap,
    pub pooled: Var,
    pub pool_weights: Option<Var>,
    pub prediction: ContactPrediction,
    pub seg_scene: SegmentationMap,
    pub seg_part: SegmentationMap,
}

/// Scalar loss terms for one sample.
pub struct SampleLosses {
    pub contact: Var,
    pub pixel_anchor: Var,
    pub scene_seg: Var,
    pub part_seg: Var,
    pub semantic: Var,
}

struct Binder<'a> {
    store: &'a ParamStore,
    vars: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let v = self.store.bind(tape, name)?;
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn linear(
        &mut self,
        tape: &mut Tape,
        base: &str,
        lora: Option<(usize, f64)>,
    ) -> Result<LinearVars> {
        let weight = self.var(tape, &format!("{base}.weight"))?;
        let bias = self.var(tape, &format!("{base}.bias"))?;
        let lora = match lora {
            None => None,
            Some((rank, alpha)) => Some(LoraVars {
                down: self.var(tape, &format!("lora.{base}.down"))?,
                up: self.var(tape, &format!("lora.{base}.up"))?,
                rank,
                alpha,
            }),
        };
        Ok(LinearVars { weight, bias, lora })
    }
}

fn linear_init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng, trainable: bool) {
    let std = 1.0 / (d_in as f64).sqrt();
    store.insert_normal(&format!("{name}.weight"), vec![d_out, d_in], std, rng, trainable);
    store.insert_const(&format!("{name}.bias"), vec![d_out], 0.0, trainable);
}

fn lora_init(store: &mut ParamStore, base: &str, d_in: usize, d_out: usize, rank: usize, rng: &mut Rng) {
    store.insert_normal(&format!("lora.{base}.down"), vec![rank, d_in], 0.02, rng, true);
    store.insert_const(&format!("lora.{base}.up"), vec![d_out, rank], 0.0, true);
}

impl ContactModel {
    pub fn init(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.lora.enabled {
            let min_dim = cfg.encoder.embed_dim.min(cfg.encoder.mlp_dim());
            if cfg.lora.rank > min_dim {
                return Err(ContactError::Config(format!(
                    "lora.rank {} exceeds the smallest adapted dimension {min_dim}",
                    cfg.lora.rank
                )));
            }
        }
        let mut rng = Rng::new(cfg.optimizer.seed);
        // Adapters draw from their own stream so toggling them does not
        // shift the base and head initializations.
        let mut lora_rng = Rng::new(cfg.optimizer.seed).derive(0x10FA);
        let mut store = ParamStore::new();
        let d = cfg.encoder.embed_dim;
        let n = cfg.encoder.num_patches();

        for prefix in Self::branch_prefixes(&cfg) {
            linear_init(&mut store, &format!("{prefix}.patch_embed"), cfg.encoder.patch_dim(), d, &mut rng, false);
            store.insert_normal(&format!("{prefix}.pos_embed"), vec![n, d], 0.02, &mut rng, false);
            store.insert_const(&format!("{prefix}.ln_out.gain"), vec![d], 1.0, false);
            store.insert_const(&format!("{prefix}.ln_out.bias"), vec![d], 0.0, false);
            for b in 0..cfg.encoder.depth {
                let blk = format!("{prefix}.block{b}");
                store.insert_const(&format!("{blk}.ln1.gain"), vec![d], 1.0, false);
                store.insert_const(&format!("{blk}.ln1.bias"), vec![d], 0.0, false);
                store.insert_const(&format!("{blk}.ln2.gain"), vec![d], 1.0, false);
                store.insert_const(&format!("{blk}.ln2.bias"), vec![d], 0.0, false);
                for proj in ["attn.q", "attn.k", "attn.v", "attn.out"] {
                    linear_init(&mut store, &format!("{blk}.{proj}"), d, d, &mut rng, false);
                    if cfg.lora.enabled {
                        lora_init(&mut store, &format!("{blk}.{proj}"), d, d, cfg.lora.rank, &mut lora_rng);
                    }
                }
                linear_init(&mut store, &format!("{blk}.mlp.fc1"), d, cfg.encoder.mlp_dim(), &mut rng, false);
                linear_init(&mut store, &format!("{blk}.mlp.fc2"), cfg.encoder.mlp_dim(), d, &mut rng, false);
                if cfg.lora.enabled {
                    lora_init(&mut store, &format!("{blk}.mlp.fc1"), d, cfg.encoder.mlp_dim(), cfg.lora.rank, &mut lora_rng);
                    lora_init(&mut store, &format!("{blk}.mlp.fc2"), cfg.encoder.mlp_dim(), d, cfg.lora.rank, &mut lora_rng);
                }
            }
        }

        store.insert_const("fusion.ln.gain", vec![d], 1.0, true);
        store.insert_const("fusion.ln.bias", vec![d], 0.0, true);
        store.insert_normal("fusion.pool.query", vec![d], 0.02, &mut rng, true);

        let hidden = cfg.contact_hidden_width();
        linear_init(&mut store, "heads.contact.fc1", d, hidden, &mut rng, true);
        linear_init(&mut store, "heads.contact.fc2", hidden, cfg.vertices, &mut rng, true);
        // Start the contact logits negative: most vertices are contact-free.
        store.insert_const("heads.contact.fc2.bias", vec![cfg.vertices], -2.0, true);
        linear_init(&mut store, "heads.vertex.proj", d, cfg.vertex_feature_dim, &mut rng, true);
        store.insert_normal("heads.vertex.table", vec![cfg.vertices, cfg.vertex_feature_dim], 0.02, &mut rng, true);
        linear_init(&mut store, "heads.semantic.fc1", cfg.vertex_feature_dim, cfg.semantic_hidden, &mut rng, true);
        linear_init(&mut store, "heads.semantic.fc2", cfg.semantic_hidden, cfg.semantic_classes, &mut rng, true);
        linear_init(&mut store, "seg.scene", d, cfg.scene_classes, &mut rng, true);
        linear_init(&mut store, "seg.part", d, PART_SEG_CLASSES, &mut rng, true);

        if let Some(ssl) = &cfg.ssl_pretrain {
            store.insert_normal("ssl.mask_token", vec![d], 0.02, &mut rng, true);
            linear_init(&mut store, "ssl.head.fc1", d, 64, &mut rng, true);
            linear_init(&mut store, "ssl.head.fc2", 64, ssl.prototypes, &mut rng, true);
        }

        Ok(ContactModel { cfg, store })
    }

    fn branch_prefixes(cfg: &ExperimentConfig) -> Vec<String> {
        if cfg.encoder.shared_branches {
            vec!["encoder.shared".to_string()]
        } else {
            vec!["encoder.scene".to_string(), "encoder.part".to_string()]
        }
    }

    /// Parameter-name prefix of a branch, honoring weight sharing.
    pub fn branch_prefix(&self, branch: Branch) -> String {
        if self.cfg.encoder.shared_branches {
            "encoder.shared".to_string()
        } else {
            match branch {
                Branch::Scene => "encoder.scene".to_string(),
                Branch::Part => "encoder.part".to_string(),
            }
        }
    }

    /// Flip the trainability of every encoder base parameter (used by the
    /// distillation pretraining mode, which trains the backbone directly).
    pub fn set_base_encoder_trainable(&mut self, trainable: bool) -> Result<()> {
        let names: Vec<String> = self
            .store
            .names()
            .filter(|n| n.starts_with("encoder."))
            .map(|n| n.to_string())
            .collect();
        for name in names {
            self.store.set_trainable(&name, trainable)?;
        }
        Ok(())
    }

    fn encoder_vars(&self, tape: &mut Tape, binder: &mut Binder, branch: Branch) -> Result<EncoderVars> {
        let prefix = self.branch_prefix(branch);
        let lora = if self.cfg.lora.enabled {
            Some((self.cfg.lora.rank, self.cfg.lora.alpha))
        } else {
            None
        };
        let patch_embed = binder.linear(tape, &format!("{prefix}.patch_embed"), None)?;
        let pos_embed = binder.var(tape, &format!("{prefix}.pos_embed"))?;
        let mut blocks = Vec::with_capacity(self.cfg.encoder.depth);
        for b in 0..self.cfg.encoder.depth {
            let blk = format!("{prefix}.block{b}");
            blocks.push(BlockVars {
                ln1_gain: binder.var(tape, &format!("{blk}.ln1.gain"))?,
                ln1_bias: binder.var(tape, &format!("{blk}.ln1.bias"))?,
                q: binder.linear(tape, &format!("{blk}.attn.q"), lora)?,
                k: binder.linear(tape, &format!("{blk}.attn.k"), lora)?,
                v: binder.linear(tape, &format!("{blk}.attn.v"), lora)?,
                out: binder.linear(tape, &format!("{blk}.attn.out"), lora)?,
                ln2_gain: binder.var(tape, &format!("{blk}.ln2.gain"))?,
                ln2_bias: binder.var(tape, &format!("{blk}.ln2.bias"))?,
                mlp_in: binder.linear(tape, &format!("{blk}.mlp.fc1"), lora)?,
                mlp_out: binder.linear(tape, &format!("{blk}.mlp.fc2"), lora)?,
            });
        }
        Ok(EncoderVars {
            patch_embed,
            pos_embed,
            blocks,
            ln_out_gain: binder.var(tape, &format!("{prefix}.ln_out.gain"))?,
            ln_out_bias: binder.var(tape, &format!("{prefix}.ln_out.bias"))?,
        })
    }

    /// Bind every supervised-path parameter onto a tape.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        let mut binder = Binder {
            store: &self.store,
            vars: BTreeMap::new(),
        };
        let scene = self.encoder_vars(tape, &mut binder, Branch::Scene)?;
        let part = self.encoder_vars(tape, &mut binder, Branch::Part)?;
        let fusion_ln_gain = binder.var(tape, "fusion.ln.gain")?;
        let fusion_ln_bias = binder.var(tape, "fusion.ln.bias")?;
        let pool_query = binder.var(tape, "fusion.pool.query")?;
        let contact_fc1 = binder.linear(tape, "heads.contact.fc1", None)?;
        let contact_fc2 = binder.linear(tape, "heads.contact.fc2", None)?;
        let vertex_proj = binder.linear(tape, "heads.vertex.proj", None)?;
        let vertex_table = binder.var(tape, "heads.vertex.table")?;
        let semantic_fc1 = binder.linear(tape, "heads.semantic.fc1", None)?;
        let semantic_fc2 = binder.linear(tape, "heads.semantic.fc2", None)?;
        let seg_scene = binder.linear(tape, "seg.scene", None)?;
        let seg_part = binder.linear(tape, "seg.part", None)?;
        Ok(BoundModel {
            vars: binder.vars,
            scene,
            part,
            fusion_ln_gain,
            fusion_ln_bias,
            pool_query,
            contact_fc1,
            contact_fc2,
            vertex_proj,
            vertex_table,
            semantic_fc1,
            semantic_fc2,
            seg_scene,
            seg_part,
        })
    }

    fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            scale: self.cfg.attention.scale,
            heads: self.cfg.attention.heads,
            mode: self.cfg.fusion_mode,
        }
    }

    /// Forward pass for one image. `keep_override` replaces the configured
    /// channel-zeroing probe for ablation sweeps.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        image: &[f64],
        keep_override: Option<Option<usize>>,
    ) -> Result<ModelOutput> {
        let hw = self.cfg.encoder.image_size;
        if image.len() != hw * hw * 3 {
            return Err(ContactError::Config(format!(
                "image has {} values, config expects {}x{}x3",
                image.len(),
                hw,
                hw
            )));
        }
        let image = tape.constant(image.to_vec(), vec![hw, hw, 3])?;
        let scene_features = encode(tape, image, Branch::Scene, &self.cfg.encoder, &bound.scene)?;
        let part_features = encode(tape, image, Branch::Part, &self.cfg.encoder, &bound.part)?;

        let keep = keep_override.unwrap_or(self.cfg.zero_out_keep);
        let scene_for_fusion = match keep {
            Some(k) => zero_out_channels(tape, &scene_features, k, None)?,
            None => scene_features,
        };

        let att = self.attention_config();
        let scene_attended = cross_attend(tape, &part_features, &scene_for_fusion, &att)?;
        let part_attended = cross_attend(tape, &scene_for_fusion, &part_features, &att)?;
        let fused = fuse(
            tape,
            &scene_attended,
            &part_attended,
            bound.fusion_ln_gain,
            bound.fusion_ln_bias,
            LN_EPS,
        )?;

        let (pooled, pool_weights) = match self.cfg.pooling {
            PoolingMode::Attention => {
                let (p, w) = attention_pool(tape, &fused, bound.pool_query)?;
                (p, Some(w))
            }
            PoolingMode::Mean => (mean_pool(tape, &fused)?, None),
        };

        let contact_prob = contact_head(tape, pooled, &bound.contact_fc1, &bound.contact_fc2)?;
        let vertex_features =
            vertex_feature_expand(tape, pooled, &bound.vertex_proj, bound.vertex_table)?;
        let (semantic_logits, semantic_prob) =
            semantic_head(tape, vertex_features, &bound.semantic_fc1, &bound.semantic_fc2)?;

        let seg_scene = seg_decoder(tape, &scene_features, Branch::Scene, &bound.seg_scene)?;
        let seg_part = seg_decoder(tape, &part_features, Branch::Part, &bound.seg_part)?;

        Ok(ModelOutput {
            scene_features,
            part_features,
            fused,
            pooled,
            pool_weights,
            prediction: ContactPrediction {
                contact_prob,
                semantic_logits,
                semantic_prob,
            },
            seg_scene,
            seg_part,
        })
    }

    /// The five per-sample loss terms.
    pub fn sample_losses(
        &self,
        tape: &mut Tape,
        output: &ModelOutput,
        sample: &SyntheticSample,
        mesh: &MeshTopology,
        phi: &[f64],
    ) -> Result<SampleLosses> {
        let v = self.cfg.vertices;
        let mut labels = vec![0.0; v];
        for &p in &sample.labels.positives {
            labels[p] = 1.0;
        }
        let contact = weighted_bce(tape, output.prediction.contact_prob, &labels, phi)?;
        let pixel_anchor = pixel_anchor_loss(
            tape,
            output.prediction.contact_prob,
            &mesh.vertices,
            &sample.camera,
            &sample.gt2d,
        )?;
        let scene_seg = seg_ce(tape, &output.seg_scene, &sample.scene_mask)?;
        let part_seg = seg_ce(tape, &output.seg_part, &sample.part_mask)?;

        let mut targets = vec![0usize; v];
        let mut mask = vec![false; v];
        for &p in &sample.labels.positives {
            targets[p] = sample.labels.semantic.get(&p).copied().unwrap_or(0);
            mask[p] = true;
        }
        let semantic = semantic_ce(tape, output.prediction.semantic_logits, &targets, &mask)?;

        Ok(SampleLosses {
            contact,
            pixel_anchor,
            scene_seg,
            part_seg,
            semantic,
        })
    }

    /// Composite objective plus the weighted semantic term.
    pub fn total_objective(&self, tape: &mut Tape, losses: &SampleLosses) -> Result<Var> {
        let parts = LossParts {
            contact: losses.contact,
            pixel_anchor: losses.pixel_anchor,
            scene_seg: losses.scene_seg,
            part_seg: losses.part_seg,
        };
        let composite = composite_loss(tape, &parts, &self.cfg.loss.weights)?;
        let sem = tape.pointwise(
            losses.semantic,
            ndcore::Pointwise::Scale(self.cfg.loss.w_semantic),
        )?;
        Ok(tape.add(composite, sem)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{DatasetConfig, PlanConfig};
    use crate::harness::synth::generate_synthetic;
    use crate::meshmetrics::icosphere;

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.encoder.image_size = 28;
        cfg.encoder.embed_dim = 16;
        cfg.encoder.depth = 1;
        cfg.encoder.heads = 2;
        cfg.vertices = 162;
        cfg.vertex_feature_dim = 8;
        cfg.semantic_hidden = 16;
        cfg.dataset = DatasetConfig::Synthetic {
            n: 4,
            subdivisions: 2,
            plan: PlanConfig::FeetDominant,
        };
        cfg
    }

    #[test]
    fn init_registers_expected_parameter_groups() {
        let model = ContactModel::init(small_cfg()).unwrap();
        assert!(model.store.contains("encoder.scene.patch_embed.weight"));
        assert!(model.store.contains("encoder.part.block0.attn.q.weight"));
        assert!(model.store.contains("lora.encoder.scene.block0.mlp.fc2.up"));
        assert!(model.store.contains("fusion.pool.query"));
        assert!(model.store.contains("heads.contact.fc2.bias"));
        assert!(model.store.contains("seg.part.weight"));
        // Base encoder frozen, adapters and heads trainable.
        assert!(!model.store.get("encoder.scene.patch_embed.weight").unwrap().trainable);
        assert!(model.store.get("lora.encoder.scene.block0.attn.q.down").unwrap().trainable);
        assert!(model.store.get("heads.contact.fc1.weight").unwrap().trainable);
    }

    #[test]
    fn shared_branches_register_single_encoder() {
        let mut cfg = small_cfg();
        cfg.encoder.shared_branches = true;
        let model = ContactModel::init(cfg).unwrap();
        assert!(model.store.contains("encoder.shared.patch_embed.weight"));
        assert!(!model.store.contains("encoder.scene.patch_embed.weight"));
        assert_eq!(model.branch_prefix(Branch::Scene), "encoder.shared");
        assert_eq!(model.branch_prefix(Branch::Part), "encoder.shared");
    }

    #[test]
    fn forward_shapes_and_losses_finite() {
        let cfg = small_cfg();
        let mesh = icosphere(2);
        let data = generate_synthetic(
            2,
            &PlanConfig::FeetDominant,
            &mesh,
            &cfg.encoder,
            cfg.semantic_classes,
            cfg.gt2d_size,
            &Rng::new(1),
        )
        .unwrap();
        let model = ContactModel::init(cfg).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let out = model
            .forward(&mut tape, &bound, &data.samples[0].image, None)
            .unwrap();
        assert_eq!(tape.value(out.prediction.contact_prob).shape(), &[162]);
        assert_eq!(
            tape.value(out.prediction.semantic_prob).shape(),
            &[162, 4]
        );
        assert_eq!(tape.value(out.pooled).shape(), &[1, 16]);
        let phi = vec![1.0; 162];
        let losses = model
            .sample_losses(&mut tape, &out, &data.samples[0], &mesh, &phi)
            .unwrap();
        let total = model.total_objective(&mut tape, &losses).unwrap();
        let val = tape.value(total).item().unwrap();
        assert!(val.is_finite() && val > 0.0);
        tape.backward(total).unwrap();
        // Gradient reached a trainable head and an adapter but no base weight.
        let head = bound.vars.get("heads.contact.fc2.weight").unwrap();
        assert!(tape.value(*head).grad().is_some());
        let adapter = bound.vars.get("lora.encoder.scene.block0.attn.q.down").unwrap();
        assert!(tape.value(*adapter).grad().is_some());
        let base = bound.vars.get("encoder.scene.block0.attn.q.weight").unwrap();
        assert!(tape.value(*base).grad().is_none());
    }

    #[test]
    fn global_mode_and_mean_pooling_run() {
        let mut cfg = small_cfg();
        cfg.fusion_mode = crate::fusion::FusionMode::Global;
        cfg.pooling = PoolingMode::Mean;
        let mesh = icosphere(2);
        let data = generate_synthetic(
            1,
            &PlanConfig::FeetDominant,
            &mesh,
            &cfg.encoder,
            cfg.semantic_classes,
            cfg.gt2d_size,
            &Rng::new(2),
        )
        .unwrap();
        let model = ContactModel::init(cfg).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let out = model
            .forward(&mut tape, &bound, &data.samples[0].image, None)
            .unwrap();
        assert_eq!(tape.value(out.fused.tokens).shape(), &[1, 16]);
        assert!(out.pool_weights.is_none());
    }

    #[test]
    fn zero_keep_probe_constant_across_images() {
        let cfg = small_cfg();
        let mesh = icosphere(2);
        let data = generate_synthetic(
            3,
            &PlanConfig::FeetDominant,
            &mesh,
            &cfg.encoder,
            cfg.semantic_classes,
            cfg.gt2d_size,
            &Rng::new(3),
        )
        .unwrap();
        let model = ContactModel::init(cfg).unwrap();
        let mut probe_outputs = Vec::new();
        for s in &data.samples {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape).unwrap();
            let out = model
                .forward(&mut tape, &bound, &s.image, Some(Some(0)))
                .unwrap();
            probe_outputs.push(tape.value(out.prediction.contact_prob).values().to_vec());
        }
        assert_eq!(probe_outputs[0], probe_outputs[1]);
        assert_eq!(probe_outputs[0], probe_outputs[2]);

        // Keeping every channel equals no probe at all.
        let d = model.cfg.encoder.embed_dim;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let full = model
            .forward(&mut tape, &bound, &data.samples[0].image, Some(Some(d)))
            .unwrap();
        let plain = model
            .forward(&mut tape, &bound, &data.samples[0].image, Some(None))
            .unwrap();
        assert_eq!(
            tape.value(full.prediction.contact_prob).values(),
            tape.value(plain.prediction.contact_prob).values()
        );
    }
}
