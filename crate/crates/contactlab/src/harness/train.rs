//! Training loop: mini-batch SGD with momentum over the composite objective,
//! per-step loss records, and the optional masked-distillation pretraining
//! mode that trains the backbone against an EMA teacher.

use std::io::Write as _;
use std::path::Path;

use ndcore::{Pointwise, Reduce, Rng, Tape, Var};

use super::config::ExperimentConfig;
use super::model::{ContactModel, SampleLosses};
use super::synth::Dataset;
use crate::encoder::{encode, encode_masked, Branch, EncoderVars, LinearVars, BlockVars};
use crate::error::{ContactError, Result};
use crate::heads::PART_SEG_CLASSES;
use crate::losses::{class_balance_weights, negative_positive_ratio, ClassBalanceWeights};
use crate::params::collect_grads;
use crate::ssl::{center, dino_loss, ema_update, ibot_loss, TeacherState};
use crate::warnings;

/// Per-step averaged loss components.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub l_c: f64,
    pub l_pal: f64,
    pub l_s: f64,
    pub l_p: f64,
    pub l_sem: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub loss_curve: Vec<LossRow>,
    pub phi: Option<ClassBalanceWeights>,
    pub warnings: Vec<String>,
}

/// Loss curve CSV: step, L_c, L_pal, L_s, L_p, total. The total also carries
/// the semantic term the model optimizes.
pub fn write_loss_curve(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,L_c,L_pal,L_s,L_p,total").unwrap();
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.step, r.l_c, r.l_pal, r.l_s, r.l_p, r.total).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Class-balance weights for a dataset under the configured settings, or
/// unit weights when disabled.
pub fn resolve_phi(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Vec<f64>, Option<ClassBalanceWeights>)> {
    if !cfg.loss.phi.enabled {
        return Ok((vec![1.0; cfg.vertices], None));
    }
    let counts = data.positive_counts();
    let target = match cfg.loss.phi.target_mean {
        Some(t) => t,
        None => negative_positive_ratio(&counts, data.samples.len())?,
    };
    let weights = class_balance_weights(
        &counts,
        cfg.loss.phi.beta,
        cfg.loss.phi.epsilon,
        target,
        Some(cfg.loss.phi.clip_factor * target),
    )?;
    Ok((weights.phi.clone(), Some(weights)))
}

/// Scale all gradients so their joint Euclidean norm is at most `max_norm`.
fn clip_global_norm(grads: &mut std::collections::BTreeMap<String, Vec<f64>>, max_norm: f64) {
    let total: f64 = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let scale = max_norm / total;
        for g in grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
}

/// Warmup ramp followed by linear decay toward
/// `final_lr_fraction * learning_rate` at the last step.
pub fn schedule(opt: &super::config::OptimizerConfig, step: usize) -> f64 {
    let base = opt.learning_rate;
    if opt.warmup_steps > 0 && step < opt.warmup_steps {
        return base * (step + 1) as f64 / opt.warmup_steps as f64;
    }
    let decay_span = opt.steps.saturating_sub(opt.warmup_steps);
    if decay_span == 0 || opt.final_lr_fraction >= 1.0 {
        return base;
    }
    let progress = (step - opt.warmup_steps) as f64 / decay_span as f64;
    base * (1.0 - (1.0 - opt.final_lr_fraction) * progress)
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = tape.add(acc, *t)?;
    }
    Ok(tape.pointwise(acc, Pointwise::Scale(1.0 / terms.len() as f64))?)
}

pub fn train(model: &mut ContactModel, data: &Dataset) -> Result<TrainOutcome> {
    let cfg = model.cfg.clone();
    if data.mesh.num_vertices() != cfg.vertices {
        return Err(ContactError::Structure(format!(
            "dataset mesh has {} vertices, config expects {}",
            data.mesh.num_vertices(),
            cfg.vertices
        )));
    }
    if data.samples.is_empty() {
        return Err(ContactError::Data("training dataset is empty".into()));
    }
    let (phi, phi_record) = resolve_phi(&cfg, data)?;

    let mut batch_rng = Rng::new(cfg.optimizer.seed).derive(0xBA7C);
    let mut loss_curve = Vec::with_capacity(cfg.optimizer.steps);
    let mut all_warnings = Vec::new();
    warnings::take();

    for step in 0..cfg.optimizer.steps {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let mut contact = Vec::with_capacity(cfg.optimizer.batch_size);
        let mut pal = Vec::with_capacity(cfg.optimizer.batch_size);
        let mut scene = Vec::with_capacity(cfg.optimizer.batch_size);
        let mut part = Vec::with_capacity(cfg.optimizer.batch_size);
        let mut semantic = Vec::with_capacity(cfg.optimizer.batch_size);
        let mut batch = Vec::with_capacity(cfg.optimizer.batch_size);
        for _ in 0..cfg.optimizer.batch_size {
            let idx = batch_rng.below(data.samples.len());
            batch.push(idx);
            let sample = &data.samples[idx];
            let out = model.forward(&mut tape, &bound, &sample.image, None)?;
            let losses = model.sample_losses(&mut tape, &out, sample, &data.mesh, &phi)?;
            contact.push(losses.contact);
            pal.push(losses.pixel_anchor);
            scene.push(losses.scene_seg);
            part.push(losses.part_seg);
            semantic.push(losses.semantic);
        }
        let averaged = SampleLosses {
            contact: mean_of(&mut tape, &contact)?,
            pixel_anchor: mean_of(&mut tape, &pal)?,
            scene_seg: mean_of(&mut tape, &scene)?,
            part_seg: mean_of(&mut tape, &part)?,
            semantic: mean_of(&mut tape, &semantic)?,
        };
        let total = model.total_objective(&mut tape, &averaged)?;

        let row = LossRow {
            step,
            l_c: tape.value(averaged.contact).item()?,
            l_pal: tape.value(averaged.pixel_anchor).item()?,
            l_s: tape.value(averaged.scene_seg).item()?,
            l_p: tape.value(averaged.part_seg).item()?,
            l_sem: tape.value(averaged.semantic).item()?,
            total: tape.value(total).item()?,
        };
        if !row.total.is_finite() {
            return Err(ContactError::Numeric(format!(
                "non-finite loss at step {step}: components C={} PAL={} S={} P={} SEM={} on batch {batch:?}",
                row.l_c, row.l_pal, row.l_s, row.l_p, row.l_sem
            )));
        }
        tape.backward(total)?;
        let mut grads = collect_grads(&tape, &bound.vars, &model.store)?;
        if let Some(max_norm) = cfg.optimizer.grad_clip {
            clip_global_norm(&mut grads, max_norm);
        }
        if std::env::var("CONTACTLAB_DEBUG_GRADS").is_ok() && step % 20 == 0 {
            let mut worst = ("", 0.0f64);
            for (name, g) in &grads {
                let m = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
                if m > worst.1 {
                    worst = (name, m);
                }
            }
            eprintln!("step {step}: max grad {} at {}", worst.1, worst.0);
        }
        let lr = schedule(&cfg.optimizer, step);
        model.store.sgd_step(&grads, lr, cfg.optimizer.momentum)?;
        for w in warnings::take() {
            all_warnings.push(format!("step {step}: {w}"));
        }
        loss_curve.push(row);
    }

    Ok(TrainOutcome {
        loss_curve,
        phi: phi_record,
        warnings: all_warnings,
    })
}

// ---- masked distillation pretraining --------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainRow {
    pub step: usize,
    pub dino: f64,
    pub ibot: f64,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub rows: Vec<PretrainRow>,
}

struct SslHead {
    fc1: LinearVars,
    fc2: LinearVars,
}

type NameMap = std::collections::BTreeMap<String, Var>;

fn bind_named(
    store: &crate::params::ParamStore,
    tape: &mut Tape,
    vars: &mut NameMap,
    name: String,
) -> Result<Var> {
    let v = store.bind(tape, &name)?;
    vars.insert(name, v);
    Ok(v)
}

fn bind_named_linear(
    store: &crate::params::ParamStore,
    tape: &mut Tape,
    vars: &mut NameMap,
    base: &str,
) -> Result<LinearVars> {
    let weight = bind_named(store, tape, vars, format!("{base}.weight"))?;
    let bias = bind_named(store, tape, vars, format!("{base}.bias"))?;
    Ok(LinearVars { weight, bias, lora: None })
}

fn bind_student_encoder(
    model: &ContactModel,
    tape: &mut Tape,
    prefix: &str,
) -> Result<(EncoderVars, NameMap)> {
    let mut vars = NameMap::new();
    let store = &model.store;
    let patch_embed = bind_named_linear(store, tape, &mut vars, &format!("{prefix}.patch_embed"))?;
    let pos_embed = bind_named(store, tape, &mut vars, format!("{prefix}.pos_embed"))?;
    let mut blocks = Vec::with_capacity(model.cfg.encoder.depth);
    for b in 0..model.cfg.encoder.depth {
        let blk = format!("{prefix}.block{b}");
        blocks.push(BlockVars {
            ln1_gain: bind_named(store, tape, &mut vars, format!("{blk}.ln1.gain"))?,
            ln1_bias: bind_named(store, tape, &mut vars, format!("{blk}.ln1.bias"))?,
            q: bind_named_linear(store, tape, &mut vars, &format!("{blk}.attn.q"))?,
            k: bind_named_linear(store, tape, &mut vars, &format!("{blk}.attn.k"))?,
            v: bind_named_linear(store, tape, &mut vars, &format!("{blk}.attn.v"))?,
            out: bind_named_linear(store, tape, &mut vars, &format!("{blk}.attn.out"))?,
            ln2_gain: bind_named(store, tape, &mut vars, format!("{blk}.ln2.gain"))?,
            ln2_bias: bind_named(store, tape, &mut vars, format!("{blk}.ln2.bias"))?,
            mlp_in: bind_named_linear(store, tape, &mut vars, &format!("{blk}.mlp.fc1"))?,
            mlp_out: bind_named_linear(store, tape, &mut vars, &format!("{blk}.mlp.fc2"))?,
        });
    }
    let ln_out_gain = bind_named(store, tape, &mut vars, format!("{prefix}.ln_out.gain"))?;
    let ln_out_bias = bind_named(store, tape, &mut vars, format!("{prefix}.ln_out.bias"))?;
    Ok((
        EncoderVars {
            patch_embed,
            pos_embed,
            blocks,
            ln_out_gain,
            ln_out_bias,
        },
        vars,
    ))
}

fn teacher_constant(teacher: &TeacherState, tape: &mut Tape, name: String) -> Result<Var> {
    let (shape, values) = teacher
        .params
        .get(&name)
        .ok_or_else(|| ContactError::Structure(format!("teacher missing '{name}'")))?;
    Ok(tape.constant(values.clone(), shape.clone())?)
}

fn teacher_linear(teacher: &TeacherState, tape: &mut Tape, base: &str) -> Result<LinearVars> {
    let weight = teacher_constant(teacher, tape, format!("{base}.weight"))?;
    let bias = teacher_constant(teacher, tape, format!("{base}.bias"))?;
    Ok(LinearVars { weight, bias, lora: None })
}

fn teacher_encoder_vars(
    teacher: &TeacherState,
    tape: &mut Tape,
    cfg: &ExperimentConfig,
    prefix: &str,
) -> Result<EncoderVars> {
    let patch_embed = teacher_linear(teacher, tape, &format!("{prefix}.patch_embed"))?;
    let pos_embed = teacher_constant(teacher, tape, format!("{prefix}.pos_embed"))?;
    let mut blocks = Vec::with_capacity(cfg.encoder.depth);
    for b in 0..cfg.encoder.depth {
        let blk = format!("{prefix}.block{b}");
        blocks.push(BlockVars {
            ln1_gain: teacher_constant(teacher, tape, format!("{blk}.ln1.gain"))?,
            ln1_bias: teacher_constant(teacher, tape, format!("{blk}.ln1.bias"))?,
            q: teacher_linear(teacher, tape, &format!("{blk}.attn.q"))?,
            k: teacher_linear(teacher, tape, &format!("{blk}.attn.k"))?,
            v: teacher_linear(teacher, tape, &format!("{blk}.attn.v"))?,
            out: teacher_linear(teacher, tape, &format!("{blk}.attn.out"))?,
            ln2_gain: teacher_constant(teacher, tape, format!("{blk}.ln2.gain"))?,
            ln2_bias: teacher_constant(teacher, tape, format!("{blk}.ln2.bias"))?,
            mlp_in: teacher_linear(teacher, tape, &format!("{blk}.mlp.fc1"))?,
            mlp_out: teacher_linear(teacher, tape, &format!("{blk}.mlp.fc2"))?,
        });
    }
    Ok(EncoderVars {
        patch_embed,
        pos_embed,
        blocks,
        ln_out_gain: teacher_constant(teacher, tape, format!("{prefix}.ln_out.gain"))?,
        ln_out_bias: teacher_constant(teacher, tape, format!("{prefix}.ln_out.bias"))?,
    })
}

fn prototype_logits(tape: &mut Tape, tokens: Var, head: &SslHead) -> Result<Var> {
    let h = crate::encoder::lora_linear(tape, tokens, &head.fc1)?;
    let h = tape.pointwise(h, Pointwise::Gelu)?;
    Ok(crate::encoder::lora_linear(tape, h, &head.fc2)?)
}

/// Train the backbone of the scene branch (or the shared branch) with
/// image-level and masked-patch distillation against an EMA teacher.
pub fn ssl_pretrain(model: &mut ContactModel, data: &Dataset) -> Result<PretrainOutcome> {
    let cfg = model.cfg.clone();
    let ssl = cfg
        .ssl_pretrain
        .clone()
        .ok_or_else(|| ContactError::Config("ssl_pretrain section missing".into()))?;
    let prefix = model.branch_prefix(Branch::Scene);
    let k = ssl.prototypes;
    let n_patches = cfg.encoder.num_patches();

    model.set_base_encoder_trainable(true)?;
    let scope_prefix = prefix.clone();
    let teacher_scope = move |name: &str| name.starts_with(&scope_prefix) || name.starts_with("ssl.head");
    let mut teacher = TeacherState::mirroring(
        &model.store,
        teacher_scope,
        k,
        ssl.momentum,
        ssl.center_momentum,
    )?;

    let mut rng = Rng::new(cfg.optimizer.seed).derive(0x55E1);
    let mut rows = Vec::with_capacity(ssl.steps);

    let result = (|| -> Result<()> {
        for step in 0..ssl.steps {
            let sample = &data.samples[rng.below(data.samples.len())];

            // Exact-count uniform patch mask.
            let masked_count = ((n_patches as f64) * ssl.mask_ratio).round() as usize;
            let mut order: Vec<usize> = (0..n_patches).collect();
            for i in (1..n_patches).rev() {
                order.swap(i, rng.below(i + 1));
            }
            let mut mask = vec![false; n_patches];
            for &p in order.iter().take(masked_count) {
                mask[p] = true;
            }

            let mut tape = Tape::new();
            let (student_vars, mut bound) = bind_student_encoder(model, &mut tape, &prefix)?;
            let mask_token = bind_named(&model.store, &mut tape, &mut bound, "ssl.mask_token".into())?;
            let student_head = SslHead {
                fc1: bind_named_linear(&model.store, &mut tape, &mut bound, "ssl.head.fc1")?,
                fc2: bind_named_linear(&model.store, &mut tape, &mut bound, "ssl.head.fc2")?,
            };

            let hw = cfg.encoder.image_size;
            let image = tape.constant(sample.image.clone(), vec![hw, hw, 3])?;
            let student_tokens = encode_masked(
                &mut tape,
                image,
                Branch::Scene,
                &cfg.encoder,
                &student_vars,
                &mask,
                mask_token,
            )?;

            let patch_logits = prototype_logits(&mut tape, student_tokens.tokens, &student_head)?;
            let scaled_patch = tape.pointwise(patch_logits, Pointwise::Scale(1.0 / ssl.student_temp))?;
            let p_s_patch = tape.softmax_rows(scaled_patch)?;

            let pooled = tape.reduce(student_tokens.tokens, Reduce::Mean, Some(0))?;
            let pooled = tape.reshape(pooled, vec![1, cfg.encoder.embed_dim])?;
            let img_logits = prototype_logits(&mut tape, pooled, &student_head)?;
            let scaled_img = tape.pointwise(img_logits, Pointwise::Scale(1.0 / ssl.student_temp))?;
            let p_s_img = tape.softmax_rows(scaled_img)?;

            // Teacher pass over the unmasked image, entirely constants.
            let teacher_vars = teacher_encoder_vars(&teacher, &mut tape, &cfg, &prefix)?;
            let teacher_head = SslHead {
                fc1: teacher_linear(&teacher, &mut tape, "ssl.head.fc1")?,
                fc2: teacher_linear(&teacher, &mut tape, "ssl.head.fc2")?,
            };
            let teacher_tokens = encode(&mut tape, image, Branch::Scene, &cfg.encoder, &teacher_vars)?;
            let t_patch_logits = prototype_logits(&mut tape, teacher_tokens.tokens, &teacher_head)?;
            let t_pooled = tape.reduce(teacher_tokens.tokens, Reduce::Mean, Some(0))?;
            let t_pooled = tape.reshape(t_pooled, vec![1, cfg.encoder.embed_dim])?;
            let t_img_logits = prototype_logits(&mut tape, t_pooled, &teacher_head)?;

            let t_img_vals = tape.value(t_img_logits).values().to_vec();
            let t_patch_vals = tape.value(t_patch_logits).values().to_vec();
            let p_t_img = center(
                &t_img_vals,
                1,
                k,
                &mut teacher,
                ssl.center_mode,
                ssl.teacher_temp,
                ssl.sinkhorn_iters,
            )?;
            let p_t_patch = center(
                &t_patch_vals,
                n_patches,
                k,
                &mut teacher,
                ssl.center_mode,
                ssl.teacher_temp,
                ssl.sinkhorn_iters,
            )?;

            let dino = dino_loss(&mut tape, &p_t_img, p_s_img)?;
            let ibot = ibot_loss(&mut tape, &p_t_patch, p_s_patch, &mask)?;
            let total = tape.add(dino, ibot)?;

            let row = PretrainRow {
                step,
                dino: tape.value(dino).item()?,
                ibot: tape.value(ibot).item()?,
            };
            if !(row.dino.is_finite() && row.ibot.is_finite()) {
                return Err(ContactError::Numeric(format!(
                    "non-finite distillation loss at step {step}"
                )));
            }
            tape.backward(total)?;
            let grads = collect_grads(&tape, &bound, &model.store)?;
            model
                .store
                .sgd_step(&grads, ssl.learning_rate, cfg.optimizer.momentum)?;
            ema_update(&mut teacher, &model.store, ssl.momentum)?;
            rows.push(row);
        }
        Ok(())
    })();

    model.set_base_encoder_trainable(false)?;
    model.store.reset_momentum();
    result?;
    Ok(PretrainOutcome { rows })
}

/// Guard used by tests and the ablation suite: true when no base encoder
/// value differs from the given snapshot.
pub fn encoder_bases_equal(model: &ContactModel, snapshot: &std::collections::BTreeMap<String, Vec<f64>>) -> bool {
    model
        .store
        .iter()
        .filter(|(name, _)| name.starts_with("encoder."))
        .all(|(name, e)| snapshot.get(name).map(|v| v == &e.values).unwrap_or(false))
}

/// The part-segmentation decoder width, re-exported for report writers.
pub const PART_CLASSES: usize = PART_SEG_CLASSES;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{DatasetConfig, PlanConfig, SslPretrainConfig};
    use crate::harness::synth::generate_synthetic;
    use crate::meshmetrics::icosphere;

    fn tiny_cfg(steps: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.encoder.image_size = 28;
        cfg.encoder.embed_dim = 16;
        cfg.encoder.depth = 1;
        cfg.encoder.heads = 2;
        cfg.vertices = 162;
        cfg.vertex_feature_dim = 8;
        cfg.semantic_hidden = 16;
        cfg.optimizer.steps = steps;
        cfg.optimizer.batch_size = 2;
        cfg.optimizer.learning_rate = 0.05;
        cfg.dataset = DatasetConfig::Synthetic {
            n: 6,
            subdivisions: 2,
            plan: PlanConfig::FeetDominant,
        };
        cfg
    }

    fn tiny_data(cfg: &ExperimentConfig, seed: u64) -> Dataset {
        let mesh = icosphere(2);
        generate_synthetic(
            6,
            &PlanConfig::FeetDominant,
            &mesh,
            &cfg.encoder,
            cfg.semantic_classes,
            cfg.gt2d_size,
            &Rng::new(seed),
        )
        .unwrap()
    }

    #[test]
    fn loss_decreases_and_base_weights_frozen() {
        let cfg = tiny_cfg(30);
        let data = tiny_data(&cfg, 3);
        let mut model = ContactModel::init(cfg).unwrap();
        let before = model.store.snapshot();
        let outcome = train(&mut model, &data).unwrap();
        assert_eq!(outcome.loss_curve.len(), 30);
        let first = outcome.loss_curve.first().unwrap().total;
        let last = outcome.loss_curve.last().unwrap().total;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        assert!(encoder_bases_equal(&model, &before));
        // Adapters moved.
        let moved = model
            .store
            .iter()
            .filter(|(n, _)| n.starts_with("lora."))
            .any(|(n, e)| before[n] != e.values);
        assert!(moved, "no adapter changed");
    }

    #[test]
    fn zero_learning_rate_keeps_every_parameter() {
        let mut cfg = tiny_cfg(5);
        cfg.optimizer.learning_rate = 0.0;
        let data = tiny_data(&cfg, 4);
        let mut model = ContactModel::init(cfg).unwrap();
        let before = model.store.snapshot();
        train(&mut model, &data).unwrap();
        assert_eq!(model.store.snapshot(), before);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let cfg = tiny_cfg(10);
        let data = tiny_data(&cfg, 5);
        let run = |cfg: ExperimentConfig, data: &Dataset| {
            let mut model = ContactModel::init(cfg).unwrap();
            let out = train(&mut model, data).unwrap();
            (out.loss_curve, model.store.snapshot())
        };
        let (curve_a, snap_a) = run(cfg.clone(), &data);
        let (curve_b, snap_b) = run(cfg, &data);
        assert_eq!(curve_a, curve_b);
        assert_eq!(snap_a, snap_b);
    }

    #[test]
    fn phi_resolution_modes() {
        let cfg = tiny_cfg(1);
        let data = tiny_data(&cfg, 6);
        let (phi, record) = resolve_phi(&cfg, &data).unwrap();
        assert_eq!(phi.len(), 162);
        assert!(record.is_some());

        let mut no_phi = tiny_cfg(1);
        no_phi.loss.phi.enabled = false;
        let (phi, record) = resolve_phi(&no_phi, &data).unwrap();
        assert!(phi.iter().all(|p| *p == 1.0));
        assert!(record.is_none());

        let mut fixed = tiny_cfg(1);
        fixed.loss.phi.target_mean = Some(6.451);
        let (_, record) = resolve_phi(&fixed, &data).unwrap();
        assert_eq!(record.unwrap().target_mean, 6.451);
    }

    #[test]
    fn pretrain_trains_backbone_then_refreezes() {
        let mut cfg = tiny_cfg(1);
        cfg.ssl_pretrain = Some(SslPretrainConfig {
            steps: 4,
            prototypes: 8,
            ..Default::default()
        });
        let data = tiny_data(&cfg, 7);
        let mut model = ContactModel::init(cfg).unwrap();
        let before = model.store.snapshot();
        let out = ssl_pretrain(&mut model, &data).unwrap();
        assert_eq!(out.rows.len(), 4);
        assert!(out.rows.iter().all(|r| r.dino.is_finite() && r.ibot > 0.0));
        // The scene backbone changed during pretraining.
        let scene_moved = model
            .store
            .iter()
            .filter(|(n, _)| n.starts_with("encoder.scene."))
            .any(|(n, e)| before[n] != e.values);
        assert!(scene_moved, "pretraining did not move the backbone");
        // And is frozen again afterwards.
        assert!(!model.store.get("encoder.scene.patch_embed.weight").unwrap().trainable);

        // Deterministic repeat.
        let mut cfg2 = tiny_cfg(1);
        cfg2.ssl_pretrain = Some(SslPretrainConfig {
            steps: 4,
            prototypes: 8,
            ..Default::default()
        });
        let mut model2 = ContactModel::init(cfg2).unwrap();
        let out2 = ssl_pretrain(&mut model2, &data).unwrap();
        assert_eq!(out.rows, out2.rows);
    }

    #[test]
    fn single_sample_overfits_contact_bce() {
        let mut cfg = tiny_cfg(500);
        cfg.optimizer.batch_size = 1;
        cfg.dataset = DatasetConfig::Synthetic {
            n: 1,
            subdivisions: 2,
            plan: PlanConfig::FeetDominant,
        };
        let data = crate::harness::build_dataset(&cfg).unwrap();
        assert_eq!(data.samples.len(), 1);
        let mut model = ContactModel::init(cfg).unwrap();
        let outcome = train(&mut model, &data).unwrap();
        let final_bce = outcome.loss_curve.last().unwrap().l_c;
        assert!(final_bce < 0.05, "final contact BCE {final_bce}");
    }

    #[test]
    fn loss_curve_csv_columns() {
        let dir = std::env::temp_dir().join("contactlab_train_test");
        std::fs::create_dir_all(&dir).unwrap();
        let rows = vec![LossRow {
            step: 0,
            l_c: 1.0,
            l_pal: 0.5,
            l_s: 0.25,
            l_p: 0.125,
            l_sem: 2.0,
            total: 3.0,
        }];
        let path = dir.join("curve.csv");
        write_loss_curve(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,L_c,L_pal,L_s,L_p,total\n"));
        assert!(text.contains("0,1,0.5,0.25,0.125,3"));
    }
}
