//! File ingestion and dataset persistence. Label files are JSON-lines, one
//! record per image; meshes are a single JSON document; full synthetic
//! datasets are a directory of mesh.json, labels.jsonl, and samples.jsonl.

use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::synth::{Dataset, SyntheticSample};
use crate::error::{ContactError, Result};
use crate::meshmetrics::{ContactLabels, MeshTopology};

/// Parse a JSON-lines label file and validate every record against the mesh.
/// Parse failures and out-of-range ids report the 1-based line number.
pub fn ingest_labels(path: &Path, mesh: &MeshTopology) -> Result<Vec<ContactLabels>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let labels: ContactLabels = serde_json::from_str(line).map_err(|e| {
            ContactError::Data(format!(
                "{}:{}: malformed label record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        labels.validate(mesh.num_vertices()).map_err(|e| {
            ContactError::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(labels);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| {
            ContactError::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?);
    }
    Ok(out)
}

/// Write mesh.json, labels.jsonl (interface format), and samples.jsonl.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    data.mesh.save(&dir.join("mesh.json"))?;
    write_jsonl(&dir.join("labels.jsonl"), &data.labels())?;
    write_jsonl(&dir.join("samples.jsonl"), &data.samples)?;
    let mut manifest = Vec::new();
    writeln!(manifest, "{{\"samples\": {}}}", data.samples.len()).unwrap();
    std::fs::write(dir.join("manifest.json"), manifest)?;
    Ok(())
}

pub fn load_dataset(samples_path: &Path, mesh_path: &Path) -> Result<Dataset> {
    let mesh = MeshTopology::load(mesh_path)?;
    let samples: Vec<SyntheticSample> = read_jsonl(samples_path)?;
    for (i, s) in samples.iter().enumerate() {
        s.labels.validate(mesh.num_vertices()).map_err(|e| {
            ContactError::Data(format!("sample {i}: {e}"))
        })?;
    }
    Ok(Dataset { samples, mesh })
}
