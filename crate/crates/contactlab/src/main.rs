//! Command-line interface: train, eval, analyze, ablate, gen-data, geodesic.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use contactlab::error::{ContactError, Result};
use contactlab::harness::ablate::{ablate, write_ablation_csv, write_ablation_json, AblationAxis};
use contactlab::harness::eval::{evaluate, write_eval_outputs};
use contactlab::harness::ingest::{ingest_labels, save_dataset};
use contactlab::harness::train::{ssl_pretrain, train, write_loss_curve};
use contactlab::harness::{build_dataset, ContactModel, DatasetConfig, ExperimentConfig};
use contactlab::losses::ClassBalanceWeights;
use contactlab::meshmetrics::{format_geo, geodesic_distances, imbalance_report, MeshTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Parser, Debug)]
#[command(
    name = "contactlab",
    about = "Contact prediction experiments: training, evaluation, analysis, ablations",
    disable_help_subcommand = true
)]
struct Cli {
    /// Experiment configuration file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Table format for single-table commands.
    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write the checkpoint, loss curve, and weight table.
    Train,
    /// Evaluate a model (optionally from a checkpoint) and write reports.
    Eval {
        /// Checkpoint to load before evaluating.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the compact binary prediction dump.
        #[arg(long)]
        binary_dump: bool,
    },
    /// Dataset imbalance analysis: per-part contact histogram.
    Analyze {
        /// Label file (JSON-lines); defaults to the configured dataset.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Mesh file; required with --labels.
        #[arg(long)]
        mesh: Option<PathBuf>,
    },
    /// Train/evaluate variants along one ablation axis.
    Ablate {
        /// One of: zero_out_k_sweep, lora_on_off, encoder_size,
        /// shared_vs_dual, pooling_mode, phi_on_off.
        #[arg(long)]
        axis: String,
    },
    /// Generate a synthetic dataset directory.
    #[command(name = "gen-data")]
    GenData {
        /// Override the configured sample count.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Multi-source shortest-path distances over a mesh.
    Geodesic {
        #[arg(long)]
        mesh: PathBuf,
        /// Comma-separated source vertex ids.
        #[arg(long)]
        sources: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli_config: &Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let path = cli_config
        .as_ref()
        .ok_or_else(|| ContactError::Config("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.optimizer.seed = s;
    }
    Ok(cfg)
}

fn write_phi(out: &Path, phi: &Option<ClassBalanceWeights>) -> Result<()> {
    if let Some(w) = phi {
        w.write_csv(&out.join("phi.csv"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train => {
            let cfg = load_config(&cli.config, cli.seed)?;
            std::fs::create_dir_all(&cli.out)?;
            let data = build_dataset(&cfg)?;
            let mut model = ContactModel::init(cfg.clone())?;
            if cfg.ssl_pretrain.is_some() {
                let pre = ssl_pretrain(&mut model, &data)?;
                let mut text = String::from("step,dino,ibot\n");
                for r in &pre.rows {
                    text.push_str(&format!("{},{},{}\n", r.step, r.dino, r.ibot));
                }
                std::fs::write(cli.out.join("pretrain_curve.csv"), text)?;
            }
            let outcome = train(&mut model, &data)?;
            model.store.save(&cli.out.join("checkpoint.json"))?;
            write_loss_curve(&cli.out.join("loss_curve.csv"), &outcome.loss_curve)?;
            write_phi(&cli.out, &outcome.phi)?;
            cfg.save(&cli.out.join("config.json"))?;
            if !outcome.warnings.is_empty() {
                std::fs::write(
                    cli.out.join("warnings.log"),
                    outcome.warnings.join("\n") + "\n",
                )?;
            }
            let last = outcome.loss_curve.last();
            println!(
                "trained {} steps, final loss {}",
                outcome.loss_curve.len(),
                last.map(|r| r.total).unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Eval { checkpoint, binary_dump } => {
            let cfg = load_config(&cli.config, cli.seed)?;
            let data = build_dataset(&cfg)?;
            let mut model = ContactModel::init(cfg)?;
            if let Some(ck) = checkpoint {
                model.store.load_from(ck)?;
            }
            let (summary, predictions) = evaluate(&model, &data, None)?;
            let imbalance = imbalance_report(&data.labels(), &data.mesh)?;
            write_eval_outputs(&summary, &predictions, &imbalance, &cli.out, *binary_dump)?;
            println!(
                "evaluated {} images: precision {:.4} recall {:.4} f1 {:.4} geodesic {} cm",
                summary.per_image.len(),
                summary.aggregate.precision,
                summary.aggregate.recall,
                summary.aggregate.f1,
                format_geo(summary.aggregate.geodesic_error_cm)
            );
            Ok(())
        }
        Command::Analyze { labels, mesh } => {
            std::fs::create_dir_all(&cli.out)?;
            let (label_list, mesh) = match (labels, mesh) {
                (Some(labels_path), Some(mesh_path)) => {
                    let mesh = MeshTopology::load(mesh_path)?;
                    (ingest_labels(labels_path, &mesh)?, mesh)
                }
                (Some(_), None) | (None, Some(_)) => {
                    return Err(ContactError::Config(
                        "--labels and --mesh must be given together".into(),
                    ))
                }
                (None, None) => {
                    let cfg = load_config(&cli.config, cli.seed)?;
                    let data = build_dataset(&cfg)?;
                    (data.labels(), data.mesh)
                }
            };
            let report = imbalance_report(&label_list, &mesh)?;
            match cli.format {
                Format::Csv => report.write_csv(&cli.out.join("imbalance.csv"))?,
                Format::Json => std::fs::write(
                    cli.out.join("imbalance.json"),
                    serde_json::to_string_pretty(&report)?,
                )?,
            }
            println!(
                "analyzed {} images, contact-free fraction {:.4}",
                report.images, report.contact_free_fraction
            );
            Ok(())
        }
        Command::Ablate { axis } => {
            let cfg = load_config(&cli.config, cli.seed)?;
            let axis = AblationAxis::parse(axis).ok_or_else(|| {
                ContactError::Config(format!(
                    "unknown ablation axis '{axis}'; valid: {}",
                    AblationAxis::ALL
                        .iter()
                        .map(|a| a.name())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })?;
            std::fs::create_dir_all(&cli.out)?;
            let data = build_dataset(&cfg)?;
            let rows = ablate(&cfg, axis, &data)?;
            match cli.format {
                Format::Csv => write_ablation_csv(&rows, &cli.out.join("ablation.csv"))?,
                Format::Json => write_ablation_json(&rows, &cli.out.join("ablation.json"))?,
            }
            for r in &rows {
                println!(
                    "{}: f1 {:.4} precision {:.4} recall {:.4} geodesic {}",
                    r.variant,
                    r.f1,
                    r.precision,
                    r.recall,
                    format_geo(r.geodesic_error_cm)
                );
            }
            Ok(())
        }
        Command::GenData { n } => {
            let mut cfg = match &cli.config {
                Some(_) => load_config(&cli.config, cli.seed)?,
                None => {
                    let mut cfg = ExperimentConfig::default();
                    if let Some(s) = cli.seed {
                        cfg.optimizer.seed = s;
                    }
                    cfg
                }
            };
            if let Some(n) = n {
                match &mut cfg.dataset {
                    DatasetConfig::Synthetic { n: slot, .. } => *slot = *n,
                    DatasetConfig::Files { .. } => {
                        return Err(ContactError::Config(
                            "--n applies to synthetic dataset configs only".into(),
                        ))
                    }
                }
                cfg.validate()?;
            }
            let data = build_dataset(&cfg)?;
            save_dataset(&data, &cli.out)?;
            println!(
                "wrote {} samples to {}",
                data.samples.len(),
                cli.out.display()
            );
            Ok(())
        }
        Command::Geodesic { mesh, sources } => {
            let mesh = MeshTopology::load(mesh)?;
            let mut source_set = BTreeSet::new();
            for tok in sources.split(',') {
                let tok = tok.trim();
                if tok.is_empty() {
                    continue;
                }
                let id: usize = tok
                    .parse()
                    .map_err(|_| ContactError::Data(format!("bad source vertex id '{tok}'")))?;
                source_set.insert(id);
            }
            let distances = geodesic_distances(&mesh, &source_set)?;
            std::fs::create_dir_all(&cli.out)?;
            match cli.format {
                Format::Csv => {
                    let mut out = Vec::new();
                    writeln!(out, "vertex_id,distance_m").unwrap();
                    for (v, d) in distances.iter().enumerate() {
                        writeln!(out, "{v},{}", format_geo(*d)).unwrap();
                    }
                    std::fs::write(cli.out.join("geodesic.csv"), out)?;
                }
                Format::Json => {
                    let rows: Vec<serde_json::Value> = distances
                        .iter()
                        .enumerate()
                        .map(|(v, d)| {
                            serde_json::json!({
                                "vertex_id": v,
                                "distance_m": if d.is_finite() {
                                    serde_json::json!(d)
                                } else {
                                    serde_json::json!("inf")
                                },
                            })
                        })
                        .collect();
                    std::fs::write(
                        cli.out.join("geodesic.json"),
                        serde_json::to_string_pretty(&rows)?,
                    )?;
                }
            }
            let reachable = distances.iter().filter(|d| d.is_finite()).count();
            println!(
                "{} vertices, {} reachable from {} sources",
                distances.len(),
                reachable,
                source_set.len()
            );
            Ok(())
        }
    }
}
