//! Synthetic dataset generator. Each image is a grid of colored blobs: the
//! grid cell (and sub-position within it) encodes which body part is in
//! contact, the blob color encodes the semantic class. Labels, per-patch
//! masks, the camera, and the 2D anchoring map all derive from the same plan,
//! so a small model can learn the mapping and every quantity has a known
//! ground truth.

use ndcore::Rng;
use serde::{Deserialize, Serialize};

use super::config::PlanConfig;
use crate::encoder::EncoderConfig;
use crate::error::{ContactError, Result};
use crate::losses::{splat_cells, Camera, Gt2d};
use crate::meshmetrics::{part_members, ContactLabels, MeshTopology, NUM_PARTS};

/// One generated training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSample {
    /// Row-major `[H,W,3]` values in [0,1].
    pub image: Vec<f64>,
    pub labels: ContactLabels,
    /// Per-patch part target: 0 = background, otherwise part id + 1.
    pub part_mask: Vec<usize>,
    /// Per-patch semantic class target: 0 = background.
    pub scene_mask: Vec<usize>,
    pub camera: Camera,
    pub gt2d: Gt2d,
}

/// Samples plus the mesh they annotate.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<SyntheticSample>,
    pub mesh: MeshTopology,
}

impl Dataset {
    /// Per-vertex positive occurrence counts across the split.
    pub fn positive_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.mesh.num_vertices()];
        for s in &self.samples {
            for &v in &s.labels.positives {
                counts[v] += 1;
            }
        }
        counts
    }

    pub fn labels(&self) -> Vec<ContactLabels> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }
}

/// Distinct bright colors for semantic classes 1..S.
fn class_color(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [1.0, 0.15, 0.15],
        [0.15, 1.0, 0.15],
        [0.15, 0.15, 1.0],
        [1.0, 1.0, 0.1],
        [1.0, 0.1, 1.0],
        [0.1, 1.0, 1.0],
        [1.0, 0.55, 0.1],
        [0.55, 0.1, 1.0],
    ];
    PALETTE[(class - 1) % PALETTE.len()]
}

/// Deterministic camera placing the unit sphere inside a `size`-cell map.
pub fn synthetic_camera(size: usize) -> Camera {
    Camera {
        scale: size as f64 / 2.0 - 1.0,
        t_x: size as f64 / 2.0,
        t_y: size as f64 / 2.0,
    }
}

/// Pixel block a part paints inside its grid cell. Parts beyond the cell
/// count reuse cells at a second sub-position.
fn paint_region(part: usize, cells: usize, patch: usize) -> (usize, std::ops::Range<usize>, std::ops::Range<usize>) {
    let cell = part % cells;
    let sub = part / cells;
    let half = patch / 2;
    let range = if sub == 0 {
        (1..half.saturating_sub(1), 1..half.saturating_sub(1))
    } else {
        (half + 1..patch - 1, half + 1..patch - 1)
    };
    (cell, range.0, range.1)
}

pub fn generate_synthetic(
    n: usize,
    plan: &PlanConfig,
    mesh: &MeshTopology,
    encoder: &EncoderConfig,
    semantic_classes: usize,
    gt2d_size: usize,
    rng: &Rng,
) -> Result<Dataset> {
    let rates = plan.rates()?;
    if semantic_classes < 2 {
        return Err(ContactError::Config("semantic_classes must be >= 2".into()));
    }
    encoder.validate()?;
    mesh.validate()?;
    let members = part_members(mesh);
    let grid = encoder.grid();
    let cells = grid * grid;
    let patch = encoder.patch_size;
    let hw = encoder.image_size;
    let camera = synthetic_camera(gt2d_size);

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut srng = rng.derive(i as u64);
        let mut labels = ContactLabels {
            image_id: format!("synth-{i:05}"),
            ..Default::default()
        };
        let mut image = vec![0.0; hw * hw * 3];
        let mut part_mask = vec![0usize; cells];
        let mut scene_mask = vec![0usize; cells];

        // One contacted object per body half: lower-body parts share one
        // semantic class, upper-body parts another. Drawn before the part
        // loop so the stream layout is stable.
        let lower_class = 1 + srng.below(semantic_classes - 1);
        let upper_class = 1 + srng.below(semantic_classes - 1);
        for part in 0..NUM_PARTS {
            // Draw in fixed part order so the stream is stable.
            let hit = srng.bernoulli(rates[part]);
            if !hit || members[part].is_empty() {
                continue;
            }
            let class = if part < NUM_PARTS / 2 { lower_class } else { upper_class };
            for &v in &members[part] {
                labels.positives.insert(v);
                labels.semantic.insert(v, class);
            }
            let (cell, rows, cols) = paint_region(part, cells, patch);
            let (cy, cx) = (cell / grid, cell % grid);
            let color = class_color(class);
            for dy in rows.clone() {
                for dx in cols.clone() {
                    let y = cy * patch + dy;
                    let x = cx * patch + dx;
                    let base = (y * hw + x) * 3;
                    image[base] = color[0];
                    image[base + 1] = color[1];
                    image[base + 2] = color[2];
                }
            }
            if part_mask[cell] == 0 {
                part_mask[cell] = part + 1;
                scene_mask[cell] = class;
            }
        }

        // 2D anchoring target: cells containing any positive vertex.
        let mut gt_values = vec![0.0; gt2d_size * gt2d_size];
        let cells2d = splat_cells(&mesh.vertices, &camera, gt2d_size, gt2d_size);
        for &v in &labels.positives {
            if let Some((r, c)) = cells2d[v] {
                gt_values[r * gt2d_size + c] = 1.0;
            }
        }

        samples.push(SyntheticSample {
            image,
            labels,
            part_mask,
            scene_mask,
            camera,
            gt2d: Gt2d::new(gt2d_size, gt2d_size, gt_values)?,
        });
    }
    Ok(Dataset {
        samples,
        mesh: mesh.clone(),
    })
}
