//! Ablation suite: trains or probes model variants along one axis with a
//! shared seed and emits a comparison table.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PoolingMode};
use super::eval::{evaluate, EvalSummary};
use super::model::ContactModel;
use super::synth::Dataset;
use super::train::train;
use crate::error::Result;
use crate::meshmetrics::{format_geo, PartCounts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    ZeroOutKSweep,
    LoraOnOff,
    EncoderSize,
    SharedVsDual,
    PoolingMode,
    PhiOnOff,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        AblationAxis::ZeroOutKSweep,
        AblationAxis::LoraOnOff,
        AblationAxis::EncoderSize,
        AblationAxis::SharedVsDual,
        AblationAxis::PoolingMode,
        AblationAxis::PhiOnOff,
    ];

    pub fn parse(name: &str) -> Option<AblationAxis> {
        match name {
            "zero_out_k_sweep" => Some(AblationAxis::ZeroOutKSweep),
            "lora_on_off" => Some(AblationAxis::LoraOnOff),
            "encoder_size" => Some(AblationAxis::EncoderSize),
            "shared_vs_dual" => Some(AblationAxis::SharedVsDual),
            "pooling_mode" => Some(AblationAxis::PoolingMode),
            "phi_on_off" => Some(AblationAxis::PhiOnOff),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::ZeroOutKSweep => "zero_out_k_sweep",
            AblationAxis::LoraOnOff => "lora_on_off",
            AblationAxis::EncoderSize => "encoder_size",
            AblationAxis::SharedVsDual => "shared_vs_dual",
            AblationAxis::PoolingMode => "pooling_mode",
            AblationAxis::PhiOnOff => "phi_on_off",
        }
    }
}

/// One table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateRow {
    pub variant: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(with = "crate::meshmetrics::geo_serde")]
    pub geodesic_error_cm: f64,
    pub semantic_precision: f64,
    pub semantic_recall: f64,
    pub semantic_f1: f64,
    pub per_part: Vec<PartCounts>,
}

impl AblateRow {
    fn from_summary(variant: String, s: &EvalSummary) -> AblateRow {
        AblateRow {
            variant,
            precision: s.aggregate.precision,
            recall: s.aggregate.recall,
            f1: s.aggregate.f1,
            geodesic_error_cm: s.aggregate.geodesic_error_cm,
            semantic_precision: s.semantic_precision,
            semantic_recall: s.semantic_recall,
            semantic_f1: s.semantic_f1,
            per_part: s.aggregate.per_part.clone(),
        }
    }
}

/// Variant configurations for a training axis.
fn variants(base: &ExperimentConfig, axis: AblationAxis) -> Vec<(String, ExperimentConfig)> {
    match axis {
        AblationAxis::ZeroOutKSweep => Vec::new(),
        AblationAxis::LoraOnOff => ["off", "on"]
            .into_iter()
            .map(|state| {
                let mut cfg = base.clone();
                cfg.lora.enabled = state == "on";
                (format!("lora={state}"), cfg)
            })
            .collect(),
        AblationAxis::EncoderSize => {
            let small = base.clone();
            let mut large = base.clone();
            large.encoder.embed_dim = base.encoder.embed_dim * 2;
            vec![
                (format!("embed_dim={}", small.encoder.embed_dim), small),
                (format!("embed_dim={}", large.encoder.embed_dim), large),
            ]
        }
        AblationAxis::SharedVsDual => ["shared", "dual"]
            .into_iter()
            .map(|state| {
                let mut cfg = base.clone();
                cfg.encoder.shared_branches = state == "shared";
                (format!("encoders={state}"), cfg)
            })
            .collect(),
        AblationAxis::PoolingMode => [
            ("pooling=attention", PoolingMode::Attention),
            ("pooling=mean", PoolingMode::Mean),
        ]
        .into_iter()
        .map(|(label, mode)| {
            let mut cfg = base.clone();
            cfg.pooling = mode;
            (label.to_string(), cfg)
        })
        .collect(),
        AblationAxis::PhiOnOff => ["off", "on"]
            .into_iter()
            .map(|state| {
                let mut cfg = base.clone();
                cfg.loss.phi.enabled = state == "on";
                (format!("phi={state}"), cfg)
            })
            .collect(),
    }
}

/// Train and evaluate one configuration from scratch.
pub fn run_variant(cfg: &ExperimentConfig, data: &Dataset) -> Result<EvalSummary> {
    let mut model = ContactModel::init(cfg.clone())?;
    train(&mut model, data)?;
    let (summary, _) = evaluate(&model, data, None)?;
    Ok(summary)
}

/// Run an ablation axis. Every variant shares the base seed and the dataset.
/// The channel sweep trains once and probes at evaluation time; the other
/// axes train each variant.
pub fn ablate(base: &ExperimentConfig, axis: AblationAxis, data: &Dataset) -> Result<Vec<AblateRow>> {
    let mut rows = Vec::new();
    match axis {
        AblationAxis::ZeroOutKSweep => {
            let mut model = ContactModel::init(base.clone())?;
            train(&mut model, data)?;
            let (unablated, _) = evaluate(&model, data, Some(None))?;
            rows.push(AblateRow::from_summary("keep=none".into(), &unablated));
            let c = base.encoder.embed_dim;
            for keep in [0, c / 4, c / 2, 3 * c / 4, c] {
                let (summary, _) = evaluate(&model, data, Some(Some(keep)))?;
                rows.push(AblateRow::from_summary(format!("keep={keep}"), &summary));
            }
        }
        _ => {
            for (label, cfg) in variants(base, axis) {
                cfg.validate()?;
                let summary = run_variant(&cfg, data)?;
                rows.push(AblateRow::from_summary(label, &summary));
            }
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblateRow], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(
        out,
        "variant,precision,recall,f1,geodesic_error_cm,semantic_precision,semantic_recall,semantic_f1"
    )
    .unwrap();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.variant,
            r.precision,
            r.recall,
            r.f1,
            format_geo(r.geodesic_error_cm),
            r.semantic_precision,
            r.semantic_recall,
            r.semantic_f1
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_ablation_json(rows: &[AblateRow], path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(rows)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{DatasetConfig, PlanConfig};
    use crate::harness::synth::generate_synthetic;
    use crate::meshmetrics::icosphere;
    use ndcore::Rng;

    fn tiny() -> (ExperimentConfig, Dataset) {
        let mut cfg = ExperimentConfig::default();
        cfg.encoder.image_size = 28;
        cfg.encoder.embed_dim = 16;
        cfg.encoder.depth = 1;
        cfg.encoder.heads = 2;
        cfg.vertices = 162;
        cfg.vertex_feature_dim = 8;
        cfg.semantic_hidden = 16;
        cfg.optimizer.steps = 5;
        cfg.optimizer.batch_size = 2;
        cfg.dataset = DatasetConfig::Synthetic {
            n: 4,
            subdivisions: 2,
            plan: PlanConfig::FeetDominant,
        };
        let data = generate_synthetic(
            4,
            &PlanConfig::FeetDominant,
            &icosphere(2),
            &cfg.encoder,
            cfg.semantic_classes,
            cfg.gt2d_size,
            &Rng::new(20),
        )
        .unwrap();
        (cfg, data)
    }

    #[test]
    fn axis_names_roundtrip() {
        for axis in AblationAxis::ALL {
            assert_eq!(AblationAxis::parse(axis.name()), Some(axis));
        }
        assert_eq!(AblationAxis::parse("bogus"), None);
    }

    #[test]
    fn zero_sweep_keep_all_equals_unablated() {
        let (cfg, data) = tiny();
        let rows = ablate(&cfg, AblationAxis::ZeroOutKSweep, &data).unwrap();
        assert_eq!(rows.len(), 6);
        let unablated = &rows[0];
        let keep_all = rows.iter().find(|r| r.variant == "keep=16").unwrap();
        assert_eq!(unablated.f1, keep_all.f1);
        assert_eq!(unablated.precision, keep_all.precision);
        assert_eq!(unablated.geodesic_error_cm, keep_all.geodesic_error_cm);
    }

    #[test]
    fn lora_axis_with_zero_init_adapters_matches_before_training() {
        // Before any optimizer step, zero-init adapters are a no-op, so
        // evaluating untrained variants gives identical metrics.
        let (mut cfg, data) = tiny();
        cfg.optimizer.steps = 0;
        let rows = ablate(&cfg, AblationAxis::LoraOnOff, &data).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].f1, rows[1].f1);
        assert_eq!(rows[0].precision, rows[1].precision);
        assert_eq!(rows[0].geodesic_error_cm, rows[1].geodesic_error_cm);
    }

    #[test]
    fn ablate_rows_match_independent_runs() {
        let (cfg, data) = tiny();
        let rows = ablate(&cfg, AblationAxis::PoolingMode, &data).unwrap();
        let mut direct_cfg = cfg.clone();
        direct_cfg.pooling = PoolingMode::Mean;
        let direct = run_variant(&direct_cfg, &data).unwrap();
        let row = rows.iter().find(|r| r.variant == "pooling=mean").unwrap();
        assert_eq!(row.f1, direct.aggregate.f1);
        assert_eq!(row.recall, direct.aggregate.recall);
    }

    #[test]
    fn table_writers_emit_rows() {
        let (cfg, data) = tiny();
        let rows = ablate(&cfg, AblationAxis::SharedVsDual, &data).unwrap();
        assert_eq!(rows.len(), 2);
        let dir = std::env::temp_dir().join("contactlab_ablate_test");
        std::fs::create_dir_all(&dir).unwrap();
        let csv = dir.join("t.csv");
        let json = dir.join("t.json");
        write_ablation_csv(&rows, &csv).unwrap();
        write_ablation_json(&rows, &json).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 3);
        let parsed: Vec<AblateRow> =
            serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(parsed, rows);
    }
}
