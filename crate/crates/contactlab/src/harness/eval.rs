//! Evaluation: per-image and aggregate metric reports, prediction dumps, and
//! the report writers. Images are scored independently; the environment
//! variable `CONTACTLAB_THREADS` caps worker threads, and results are merged
//! in image order so reports are byte-stable regardless of parallelism.

use std::io::Write as _;
use std::path::Path;

use ndcore::Tape;
use serde::{Deserialize, Serialize};

use super::model::ContactModel;
use super::synth::Dataset;
use crate::error::{ContactError, Result};
use crate::meshmetrics::{
    confusion, format_geo, geodesic_error, imbalance_report, metric_report, prf1,
    semantic_counts, Confusion, ImbalanceReport, MetricReport, PartCounts, NUM_PARTS,
};

pub const THREADS_ENV: &str = "CONTACTLAB_THREADS";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEval {
    pub image_id: String,
    pub report: MetricReport,
    pub semantic_precision: f64,
    pub semantic_recall: f64,
    pub semantic_f1: f64,
}

/// Per-image prediction dump record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub contact: Vec<f64>,
    pub semantic: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub threshold: f64,
    pub per_image: Vec<ImageEval>,
    pub aggregate: MetricReport,
    pub semantic_precision: f64,
    pub semantic_recall: f64,
    pub semantic_f1: f64,
    /// Images whose geodesic error hit the +infinity sentinel.
    pub geodesic_inf_images: usize,
    pub warnings: usize,
}

fn worker_threads(n_images: usize) -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|t| *t >= 1)
        .unwrap_or(1)
        .min(n_images.max(1))
}

fn eval_one(
    model: &ContactModel,
    data: &Dataset,
    idx: usize,
    keep_override: Option<Option<usize>>,
    threshold: f64,
) -> Result<(ImageEval, PredictionRecord, Confusion, (u64, u64, u64))> {
    let sample = &data.samples[idx];
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let out = model.forward(&mut tape, &bound, &sample.image, keep_override)?;
    let snapshot = out.prediction.extract(&tape);

    let report = metric_report(&snapshot.contact_prob, &sample.labels, &data.mesh, threshold)?;
    let conf = confusion(&snapshot.contact_prob, &sample.labels, threshold);
    let sem = semantic_counts(&snapshot.semantic_argmax, &sample.labels);
    let (sp, sr, sf) = prf1(sem.0, sem.1, sem.2);
    Ok((
        ImageEval {
            image_id: sample.labels.image_id.clone(),
            report,
            semantic_precision: sp,
            semantic_recall: sr,
            semantic_f1: sf,
        },
        PredictionRecord {
            image_id: sample.labels.image_id.clone(),
            contact: snapshot.contact_prob,
            semantic: snapshot.semantic_argmax,
        },
        conf,
        sem,
    ))
}

/// Evaluate every sample, in parallel when configured, reducing in a fixed
/// order. `keep_override` applies the channel-zeroing probe.
pub fn evaluate(
    model: &ContactModel,
    data: &Dataset,
    keep_override: Option<Option<usize>>,
) -> Result<(EvalSummary, Vec<PredictionRecord>)> {
    if data.samples.is_empty() {
        return Err(ContactError::Data("evaluation dataset is empty".into()));
    }
    if data.mesh.num_vertices() != model.cfg.vertices {
        return Err(ContactError::Structure(format!(
            "dataset mesh has {} vertices, model expects {}",
            data.mesh.num_vertices(),
            model.cfg.vertices
        )));
    }
    let threshold = model.cfg.eval_threshold;
    let n = data.samples.len();
    let threads = worker_threads(n);

    let mut results: Vec<Option<(ImageEval, PredictionRecord, Confusion, (u64, u64, u64))>> =
        (0..n).map(|_| None).collect();
    if threads <= 1 {
        for (idx, slot) in results.iter_mut().enumerate() {
            *slot = Some(eval_one(model, data, idx, keep_override, threshold)?);
        }
    } else {
        let chunk = n.div_ceil(threads);
        let mut errors: Vec<Option<ContactError>> = (0..threads).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (t, slots) in results.chunks_mut(chunk).enumerate() {
                let start = t * chunk;
                handles.push((
                    t,
                    scope.spawn(move || -> std::result::Result<(), ContactError> {
                        for (off, slot) in slots.iter_mut().enumerate() {
                            *slot =
                                Some(eval_one(model, data, start + off, keep_override, threshold)?);
                        }
                        Ok(())
                    }),
                ));
            }
            for (t, h) in handles {
                if let Err(e) = h.join().expect("worker panicked") {
                    errors[t] = Some(e);
                }
            }
        });
        if let Some(e) = errors.into_iter().flatten().next() {
            return Err(e);
        }
    }

    let mut per_image = Vec::with_capacity(n);
    let mut predictions = Vec::with_capacity(n);
    let mut total_conf = Confusion::default();
    let mut sem_total = (0u64, 0u64, 0u64);
    let mut per_part = vec![PartCounts::default(); NUM_PARTS];
    let mut geo_sum = 0.0;
    let mut geo_count = 0usize;
    let mut geo_inf = 0usize;
    for slot in results {
        let (image, pred, conf, sem) = slot.expect("every image evaluated");
        total_conf.add(&conf);
        sem_total.0 += sem.0;
        sem_total.1 += sem.1;
        sem_total.2 += sem.2;
        for (acc, part) in per_part.iter_mut().zip(&image.report.per_part) {
            acc.tp += part.tp;
            acc.fp += part.fp;
            acc.fn_ += part.fn_;
            acc.gt_positives += part.gt_positives;
        }
        if image.report.geodesic_error_cm.is_finite() {
            geo_sum += image.report.geodesic_error_cm;
            geo_count += 1;
        } else {
            geo_inf += 1;
        }
        per_image.push(image);
        predictions.push(pred);
    }
    let (precision, recall, f1) = prf1(total_conf.tp, total_conf.fp, total_conf.fn_);
    let (sp, sr, sf) = prf1(sem_total.0, sem_total.1, sem_total.2);
    let aggregate = MetricReport {
        precision,
        recall,
        f1,
        geodesic_error_cm: if geo_count > 0 {
            geo_sum / geo_count as f64
        } else if geo_inf > 0 {
            f64::INFINITY
        } else {
            0.0
        },
        per_part,
    };
    let summary = EvalSummary {
        threshold,
        per_image,
        aggregate,
        semantic_precision: sp,
        semantic_recall: sr,
        semantic_f1: sf,
        geodesic_inf_images: geo_inf,
        warnings: crate::warnings::take().len(),
    };
    Ok((summary, predictions))
}

/// Recall over the vertices of the listed parts, from aggregate counts.
pub fn part_recall(report: &MetricReport, parts: &[usize]) -> f64 {
    let mut tp = 0u64;
    let mut fn_ = 0u64;
    for &p in parts {
        tp += report.per_part[p].tp;
        fn_ += report.per_part[p].fn_;
    }
    if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    }
}

// ---- report writers --------------------------------------------------------

/// report.csv: one row per image plus an aggregate row.
pub fn write_report_csv(summary: &EvalSummary, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(
        out,
        "image_id,precision,recall,f1,geodesic_error_cm,semantic_precision,semantic_recall,semantic_f1"
    )
    .unwrap();
    for img in &summary.per_image {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            img.image_id,
            img.report.precision,
            img.report.recall,
            img.report.f1,
            format_geo(img.report.geodesic_error_cm),
            img.semantic_precision,
            img.semantic_recall,
            img.semantic_f1
        )
        .unwrap();
    }
    writeln!(
        out,
        "AGGREGATE,{},{},{},{},{},{},{}",
        summary.aggregate.precision,
        summary.aggregate.recall,
        summary.aggregate.f1,
        format_geo(summary.aggregate.geodesic_error_cm),
        summary.semantic_precision,
        summary.semantic_recall,
        summary.semantic_f1
    )
    .unwrap();
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_report_json(summary: &EvalSummary, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

/// predictions.jsonl plus an optional compact binary variant.
pub fn write_predictions(
    predictions: &[PredictionRecord],
    dir: &Path,
    binary: bool,
) -> Result<()> {
    super::ingest::write_jsonl(&dir.join("predictions.jsonl"), predictions)?;
    if binary {
        write_predictions_binary(predictions, &dir.join("predictions.bin"))?;
    }
    Ok(())
}

const PRED_MAGIC: &[u8; 8] = b"CLPRED01";

/// Binary dump: magic, record count, then per record the id, V contact
/// probabilities as f64 LE, and V semantic class ids as u32 LE.
pub fn write_predictions_binary(predictions: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(PRED_MAGIC);
    out.extend_from_slice(&(predictions.len() as u64).to_le_bytes());
    for p in predictions {
        let id = p.image_id.as_bytes();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&(p.contact.len() as u32).to_le_bytes());
        for v in &p.contact {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in &p.semantic {
            out.extend_from_slice(&(*s as u32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_predictions_binary(path: &Path) -> Result<Vec<PredictionRecord>> {
    let bytes = std::fs::read(path)?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if at + n > bytes.len() {
            return Err(ContactError::Data("truncated prediction dump".into()));
        }
        let s = &bytes[at..at + n];
        at += n;
        Ok(s)
    };
    if take(8)? != PRED_MAGIC {
        return Err(ContactError::Data("bad prediction dump magic".into()));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let image_id = String::from_utf8(take(id_len)?.to_vec())
            .map_err(|_| ContactError::Data("bad id bytes in prediction dump".into()))?;
        let v = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut contact = Vec::with_capacity(v);
        for _ in 0..v {
            contact.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        let mut semantic = Vec::with_capacity(v);
        for _ in 0..v {
            semantic.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        out.push(PredictionRecord {
            image_id,
            contact,
            semantic,
        });
    }
    Ok(out)
}

/// Everything `eval` emits: reports in both formats, the per-part histogram,
/// and the prediction dump.
pub fn write_eval_outputs(
    summary: &EvalSummary,
    predictions: &[PredictionRecord],
    imbalance: &ImbalanceReport,
    dir: &Path,
    binary_dump: bool,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_report_csv(summary, &dir.join("report.csv"))?;
    write_report_json(summary, &dir.join("report.json"))?;
    imbalance.write_csv(&dir.join("part_histogram.csv"))?;
    write_predictions(predictions, dir, binary_dump)?;
    Ok(())
}

/// Convenience: evaluate and write everything.
pub fn evaluate_to_dir(
    model: &ContactModel,
    data: &Dataset,
    dir: &Path,
    binary_dump: bool,
) -> Result<EvalSummary> {
    let (summary, predictions) = evaluate(model, data, None)?;
    let imbalance = imbalance_report(&data.labels(), &data.mesh)?;
    write_eval_outputs(&summary, &predictions, &imbalance, dir, binary_dump)?;
    Ok(summary)
}

/// Evaluating the ground truth as predictions must be perfect; used as a
/// self-check in tests and the acceptance suite.
pub fn ground_truth_summary(data: &Dataset, threshold: f64) -> Result<EvalSummary> {
    let mut per_image = Vec::new();
    let mut total = Confusion::default();
    let mut sem = (0u64, 0u64, 0u64);
    let mut per_part = vec![PartCounts::default(); NUM_PARTS];
    let mut geo_sum = 0.0;
    for sample in &data.samples {
        let v = data.mesh.num_vertices();
        let mut probs = vec![0.0; v];
        let mut classes = vec![0usize; v];
        for &p in &sample.labels.positives {
            probs[p] = 1.0;
            classes[p] = sample.labels.semantic.get(&p).copied().unwrap_or(0);
        }
        let report = metric_report(&probs, &sample.labels, &data.mesh, threshold)?;
        let geo = geodesic_error(&probs, &sample.labels, &data.mesh, threshold)?;
        debug_assert_eq!(geo.cm, report.geodesic_error_cm);
        let c = confusion(&probs, &sample.labels, threshold);
        total.add(&c);
        let s = semantic_counts(&classes, &sample.labels);
        sem.0 += s.0;
        sem.1 += s.1;
        sem.2 += s.2;
        for (acc, part) in per_part.iter_mut().zip(&report.per_part) {
            acc.tp += part.tp;
            acc.fp += part.fp;
            acc.fn_ += part.fn_;
            acc.gt_positives += part.gt_positives;
        }
        geo_sum += report.geodesic_error_cm;
        let (sp, sr, sf) = prf1(s.0, s.1, s.2);
        per_image.push(ImageEval {
            image_id: sample.labels.image_id.clone(),
            report,
            semantic_precision: sp,
            semantic_recall: sr,
            semantic_f1: sf,
        });
    }
    let (precision, recall, f1) = prf1(total.tp, total.fp, total.fn_);
    let (sp, sr, sf) = prf1(sem.0, sem.1, sem.2);
    let n = data.samples.len().max(1);
    Ok(EvalSummary {
        threshold,
        per_image,
        aggregate: MetricReport {
            precision,
            recall,
            f1,
            geodesic_error_cm: geo_sum / n as f64,
            per_part,
        },
        semantic_precision: sp,
        semantic_recall: sr,
        semantic_f1: sf,
        geodesic_inf_images: 0,
        warnings: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{DatasetConfig, ExperimentConfig, PlanConfig};
    use crate::harness::synth::generate_synthetic;
    use crate::meshmetrics::icosphere;
    use ndcore::Rng;

    fn cfg_and_data() -> (ExperimentConfig, Dataset) {
        let mut cfg = ExperimentConfig::default();
        cfg.encoder.image_size = 28;
        cfg.encoder.embed_dim = 16;
        cfg.encoder.depth = 1;
        cfg.encoder.heads = 2;
        cfg.vertices = 162;
        cfg.vertex_feature_dim = 8;
        cfg.semantic_hidden = 16;
        cfg.dataset = DatasetConfig::Synthetic {
            n: 5,
            subdivisions: 2,
            plan: PlanConfig::FeetDominant,
        };
        let mesh = icosphere(2);
        let data = generate_synthetic(
            5,
            &PlanConfig::FeetDominant,
            &mesh,
            &cfg.encoder,
            cfg.semantic_classes,
            cfg.gt2d_size,
            &Rng::new(10),
        )
        .unwrap();
        (cfg, data)
    }

    #[test]
    fn evaluation_runs_and_aggregates() {
        let (cfg, data) = cfg_and_data();
        let model = ContactModel::init(cfg).unwrap();
        let (summary, preds) = evaluate(&model, &data, None).unwrap();
        assert_eq!(summary.per_image.len(), 5);
        assert_eq!(preds.len(), 5);
        assert_eq!(preds[0].contact.len(), 162);

        // Aggregate equals recomputation from summed confusion counts.
        let mut total = Confusion::default();
        for (img, sample) in summary.per_image.iter().zip(&data.samples) {
            let _ = img;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape).unwrap();
            let out = model.forward(&mut tape, &bound, &sample.image, None).unwrap();
            let snap = out.prediction.extract(&tape);
            total.add(&confusion(&snap.contact_prob, &sample.labels, 0.5));
        }
        let (p, r, f1) = prf1(total.tp, total.fp, total.fn_);
        assert_eq!(summary.aggregate.precision, p);
        assert_eq!(summary.aggregate.recall, r);
        assert_eq!(summary.aggregate.f1, f1);
    }

    #[test]
    fn parallel_evaluation_matches_serial() {
        let (cfg, data) = cfg_and_data();
        let model = ContactModel::init(cfg).unwrap();
        std::env::remove_var(THREADS_ENV);
        let (serial, serial_preds) = evaluate(&model, &data, None).unwrap();
        std::env::set_var(THREADS_ENV, "3");
        let (parallel, parallel_preds) = evaluate(&model, &data, None).unwrap();
        std::env::remove_var(THREADS_ENV);
        assert_eq!(serial_preds, parallel_preds);
        assert_eq!(
            serde_json::to_string(&serial).unwrap(),
            serde_json::to_string(&parallel).unwrap()
        );
    }

    #[test]
    fn ground_truth_is_perfect() {
        let (_, data) = cfg_and_data();
        let summary = ground_truth_summary(&data, 0.5).unwrap();
        assert_eq!(summary.aggregate.f1, 1.0);
        assert_eq!(summary.aggregate.geodesic_error_cm, 0.0);
        assert_eq!(summary.semantic_f1, 1.0);
    }

    #[test]
    fn constant_half_predictor_has_full_recall() {
        // Probability exactly at the threshold counts as positive.
        let (_, data) = cfg_and_data();
        let v = data.mesh.num_vertices();
        let probs = vec![0.5; v];
        let mut total = Confusion::default();
        for s in &data.samples {
            total.add(&confusion(&probs, &s.labels, 0.5));
        }
        let (_, recall, _) = prf1(total.tp, total.fp, total.fn_);
        assert_eq!(recall, 1.0);
    }

    #[test]
    fn binary_dump_roundtrip() {
        let dir = std::env::temp_dir().join("contactlab_eval_bin");
        std::fs::create_dir_all(&dir).unwrap();
        let preds = vec![
            PredictionRecord {
                image_id: "a".into(),
                contact: vec![0.25, 0.75],
                semantic: vec![0, 3],
            },
            PredictionRecord {
                image_id: "bb".into(),
                contact: vec![1.0, 0.0],
                semantic: vec![2, 1],
            },
        ];
        let path = dir.join("p.bin");
        write_predictions_binary(&preds, &path).unwrap();
        let back = read_predictions_binary(&path).unwrap();
        assert_eq!(preds, back);
    }

    #[test]
    fn report_files_written_and_stable() {
        let (cfg, data) = cfg_and_data();
        let model = ContactModel::init(cfg).unwrap();
        let dir1 = std::env::temp_dir().join("contactlab_eval_out1");
        let dir2 = std::env::temp_dir().join("contactlab_eval_out2");
        let _ = std::fs::remove_dir_all(&dir1);
        let _ = std::fs::remove_dir_all(&dir2);
        evaluate_to_dir(&model, &data, &dir1, true).unwrap();
        evaluate_to_dir(&model, &data, &dir2, true).unwrap();
        for f in [
            "report.csv",
            "report.json",
            "part_histogram.csv",
            "predictions.jsonl",
            "predictions.bin",
        ] {
            let a = std::fs::read(dir1.join(f)).unwrap();
            let b = std::fs::read(dir2.join(f)).unwrap();
            assert_eq!(a, b, "{f} not byte-stable");
            assert!(!a.is_empty());
        }
        let csv = std::fs::read_to_string(dir1.join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 5 + 1);
        assert!(csv.lines().last().unwrap().starts_with("AGGREGATE,"));
    }
}
