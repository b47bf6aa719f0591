//! Evaluation metrics and dataset analytics over triangle meshes: confusion
//! counts, precision/recall/F1, multi-source shortest-path geodesic error,
//! per-part imbalance reporting, and semantic contact metrics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ContactError, Result};
use crate::warnings;

/// Body part names, index = part id.
pub const PART_NAMES: [&str; 24] = [
    "hips",
    "leftUpLeg",
    "rightUpLeg",
    "spine",
    "leftLeg",
    "rightLeg",
    "spine1",
    "leftFoot",
    "rightFoot",
    "spine2",
    "leftToeBase",
    "rightToeBase",
    "neck",
    "leftShoulder",
    "rightShoulder",
    "head",
    "leftArm",
    "rightArm",
    "leftForeArm",
    "rightForeArm",
    "leftHand",
    "rightHand",
    "leftHandIndex1",
    "rightHandIndex1",
];

pub const NUM_PARTS: usize = 24;

/// Triangle mesh with a per-vertex body-part partition. Positions in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshTopology {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub part_id: Vec<usize>,
}

impl MeshTopology {
    pub fn validate(&self) -> Result<()> {
        let v = self.vertices.len();
        if self.part_id.len() != v {
            return Err(ContactError::Structure(format!(
                "{} part ids for {v} vertices",
                self.part_id.len()
            )));
        }
        for (fi, face) in self.faces.iter().enumerate() {
            for &idx in face {
                if idx >= v {
                    return Err(ContactError::Structure(format!(
                        "face {fi} references vertex {idx}, mesh has {v}"
                    )));
                }
            }
        }
        if let Some((i, &p)) = self
            .part_id
            .iter()
            .enumerate()
            .find(|(_, p)| **p >= NUM_PARTS)
        {
            return Err(ContactError::Structure(format!(
                "vertex {i} has part id {p}, valid ids are 0..{NUM_PARTS}"
            )));
        }
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Undirected edge list with Euclidean lengths, deduplicated.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut seen = BTreeSet::new();
        let mut edges = Vec::new();
        for face in &self.faces {
            for (a, b) in [(face[0], face[1]), (face[1], face[2]), (face[2], face[0])] {
                if a == b {
                    continue;
                }
                let key = (a.min(b), a.max(b));
                if seen.insert(key) {
                    let pa = self.vertices[key.0];
                    let pb = self.vertices[key.1];
                    let d = ((pa[0] - pb[0]).powi(2)
                        + (pa[1] - pb[1]).powi(2)
                        + (pa[2] - pb[2]).powi(2))
                    .sqrt();
                    edges.push((key.0, key.1, d));
                }
            }
        }
        edges
    }

    fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for (a, b, d) in self.edges() {
            adj[a].push((b, d));
            adj[b].push((a, d));
        }
        adj
    }

    /// Number of connected components of the edge graph.
    pub fn connected_components(&self) -> usize {
        let adj = self.adjacency();
        let n = self.vertices.len();
        let mut seen = vec![false; n];
        let mut components = 0;
        for start in 0..n {
            if seen[start] {
                continue;
            }
            components += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(u) = stack.pop() {
                for &(v, _) in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        components
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mesh: MeshTopology = serde_json::from_str(&text)?;
        mesh.validate()?;
        Ok(mesh)
    }
}

/// Ground-truth contact for one image. The JSON form is one record per
/// image: `{"image_id": str, "positives": [int], "semantic": {"vid": class}}`
/// with 0-based vertex ids.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactLabels {
    pub image_id: String,
    pub positives: BTreeSet<usize>,
    #[serde(default)]
    pub semantic: BTreeMap<usize, usize>,
}

impl ContactLabels {
    pub fn validate(&self, num_vertices: usize) -> Result<()> {
        if let Some(&v) = self.positives.iter().find(|v| **v >= num_vertices) {
            return Err(ContactError::Data(format!(
                "image '{}': vertex id {v} out of range for {num_vertices} vertices (ids are 0-based)",
                self.image_id
            )));
        }
        for (&v, &c) in &self.semantic {
            if !self.positives.contains(&v) {
                return Err(ContactError::Data(format!(
                    "image '{}': semantic label on non-positive vertex {v}",
                    self.image_id
                )));
            }
            let _ = c;
        }
        Ok(())
    }

    /// Ground-truth class of a vertex; positives without an explicit entry
    /// fall back to class 0 (unlabeled/supporting).
    pub fn class_of(&self, vertex: usize) -> Option<usize> {
        if self.positives.contains(&vertex) {
            Some(self.semantic.get(&vertex).copied().unwrap_or(0))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Vertex-level confusion counts at a probability threshold; a prediction is
/// positive when its probability is >= the threshold.
pub fn confusion(pred_prob: &[f64], gt: &ContactLabels, threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (v, p) in pred_prob.iter().enumerate() {
        let predicted = *p >= threshold;
        let actual = gt.positives.contains(&v);
        match (predicted, actual) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Precision, recall, F1 with the zero-denominator convention of 0.
pub fn prf1(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

#[derive(Debug, Clone, Copy)]
struct HeapEntry {
    dist: f64,
    vertex: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.dist == other.dist && self.vertex == other.vertex
    }
}
impl Eq for HeapEntry {}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed for a min-heap.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Multi-source Dijkstra over the edge graph, edge weight = Euclidean length.
/// Unreachable vertices get +infinity.
pub fn geodesic_distances(mesh: &MeshTopology, sources: &BTreeSet<usize>) -> Result<Vec<f64>> {
    if sources.is_empty() {
        return Err(ContactError::Data("geodesic distances need at least one source".into()));
    }
    let n = mesh.num_vertices();
    if let Some(&s) = sources.iter().find(|s| **s >= n) {
        return Err(ContactError::Data(format!(
            "source vertex {s} out of range for {n} vertices"
        )));
    }
    let adj = mesh.adjacency();
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    for &s in sources {
        dist[s] = 0.0;
        heap.push(HeapEntry { dist: 0.0, vertex: s });
    }
    while let Some(HeapEntry { dist: d, vertex: u }) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(HeapEntry { dist: nd, vertex: v });
            }
        }
    }
    Ok(dist)
}

/// Geodesic error in centimeters plus bookkeeping about degenerate cases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeodesicError {
    pub cm: f64,
    /// Predicted positives skipped because no ground-truth vertex is reachable.
    pub excluded_unreachable: usize,
    /// Predicted positives counted against an empty ground-truth set.
    pub predicted_without_gt: usize,
}

/// Mean shortest-path distance from each predicted-positive vertex to the
/// nearest ground-truth positive, in centimeters.
///
/// Conventions: no predicted positives gives 0; predictions against an empty
/// ground truth give the +infinity sentinel with a count; unreachable
/// predictions are excluded with a recorded warning.
pub fn geodesic_error(
    pred_prob: &[f64],
    gt: &ContactLabels,
    mesh: &MeshTopology,
    threshold: f64,
) -> Result<GeodesicError> {
    if pred_prob.len() != mesh.num_vertices() {
        return Err(ContactError::Structure(format!(
            "{} probabilities for {} vertices",
            pred_prob.len(),
            mesh.num_vertices()
        )));
    }
    let predicted: Vec<usize> = pred_prob
        .iter()
        .enumerate()
        .filter(|(_, p)| **p >= threshold)
        .map(|(v, _)| v)
        .collect();
    if predicted.is_empty() {
        return Ok(GeodesicError {
            cm: 0.0,
            excluded_unreachable: 0,
            predicted_without_gt: 0,
        });
    }
    if gt.positives.is_empty() {
        return Ok(GeodesicError {
            cm: f64::INFINITY,
            excluded_unreachable: 0,
            predicted_without_gt: predicted.len(),
        });
    }
    let dist = geodesic_distances(mesh, &gt.positives)?;
    let mut sum = 0.0;
    let mut counted = 0usize;
    let mut unreachable = 0usize;
    for &v in &predicted {
        if dist[v].is_finite() {
            sum += dist[v];
            counted += 1;
        } else {
            unreachable += 1;
        }
    }
    if unreachable > 0 {
        warnings::record(format!(
            "geodesic_error: {unreachable} predicted vertices unreachable from ground truth, excluded"
        ));
    }
    let cm = if counted > 0 {
        100.0 * sum / counted as f64
    } else {
        f64::INFINITY
    };
    Ok(GeodesicError {
        cm,
        excluded_unreachable: unreachable,
        predicted_without_gt: 0,
    })
}

/// Per-part confusion bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PartCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub gt_positives: u64,
}

/// Metric bundle for one image or an aggregate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(with = "geo_serde")]
    pub geodesic_error_cm: f64,
    pub per_part: Vec<PartCounts>,
}

/// Serializes +infinity as the string "inf".
pub mod geo_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str("inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad geodesic value '{t}'"))),
        }
    }
}

/// Formats a geodesic value the way reports expect.
pub fn format_geo(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "inf".to_string()
    }
}

/// Full per-image evaluation against ground truth.
pub fn metric_report(
    pred_prob: &[f64],
    gt: &ContactLabels,
    mesh: &MeshTopology,
    threshold: f64,
) -> Result<MetricReport> {
    let c = confusion(pred_prob, gt, threshold);
    let (precision, recall, f1) = prf1(c.tp, c.fp, c.fn_);
    let geo = geodesic_error(pred_prob, gt, mesh, threshold)?;
    let mut per_part = vec![PartCounts::default(); NUM_PARTS];
    for (v, p) in pred_prob.iter().enumerate() {
        let part = mesh.part_id[v];
        let predicted = *p >= threshold;
        let actual = gt.positives.contains(&v);
        let bucket = &mut per_part[part];
        if actual {
            bucket.gt_positives += 1;
        }
        match (predicted, actual) {
            (true, true) => bucket.tp += 1,
            (true, false) => bucket.fp += 1,
            (false, true) => bucket.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(MetricReport {
        precision,
        recall,
        f1,
        geodesic_error_cm: geo.cm,
        per_part,
    })
}

/// Dataset imbalance: per part, the number of images with at least one
/// positive vertex in that part, plus the fraction of images with no
/// positives at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub images: usize,
    pub per_part_images: Vec<u64>,
    pub contact_free_fraction: f64,
}

pub fn imbalance_report(dataset: &[ContactLabels], mesh: &MeshTopology) -> Result<ImbalanceReport> {
    let mut per_part = vec![0u64; NUM_PARTS];
    let mut contact_free = 0usize;
    for labels in dataset {
        labels.validate(mesh.num_vertices())?;
        if labels.positives.is_empty() {
            contact_free += 1;
            continue;
        }
        let mut touched = [false; NUM_PARTS];
        for &v in &labels.positives {
            touched[mesh.part_id[v]] = true;
        }
        for (p, hit) in touched.iter().enumerate() {
            if *hit {
                per_part[p] += 1;
            }
        }
    }
    let fraction = if dataset.is_empty() {
        0.0
    } else {
        contact_free as f64 / dataset.len() as f64
    };
    Ok(ImbalanceReport {
        images: dataset.len(),
        per_part_images: per_part,
        contact_free_fraction: fraction,
    })
}

impl ImbalanceReport {
    /// Histogram CSV with one row per part, in part-id order.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "part_id,part_name,images_with_contact").unwrap();
        for (i, count) in self.per_part_images.iter().enumerate() {
            writeln!(out, "{i},{},{count}", PART_NAMES[i]).unwrap();
        }
        writeln!(out, "# images,{},contact_free_fraction,{}", self.images, self.contact_free_fraction).unwrap();
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Micro-averaged semantic contact metrics.
///
/// A vertex prediction is asserted when its class is nonzero. A true positive
/// is a ground-truth contact vertex whose predicted class matches its label;
/// unmatched ground truth counts as a false negative and every asserted
/// non-match as a false positive.
pub fn semantic_metrics(pred_class: &[usize], gt: &ContactLabels) -> (f64, f64, f64) {
    let (tp, fp, fn_) = semantic_counts(pred_class, gt);
    prf1(tp, fp, fn_)
}

/// Raw (tp, fp, fn) counts behind [`semantic_metrics`], for micro-averaging
/// across images.
pub fn semantic_counts(pred_class: &[usize], gt: &ContactLabels) -> (u64, u64, u64) {
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (v, &pred) in pred_class.iter().enumerate() {
        match gt.class_of(v) {
            Some(actual) => {
                if pred == actual {
                    tp += 1;
                } else {
                    fn_ += 1;
                    if pred != 0 {
                        fp += 1;
                    }
                }
            }
            None => {
                if pred != 0 {
                    fp += 1;
                }
            }
        }
    }
    (tp, fp, fn_)
}

/// Icosphere with `subdivisions` refinement rounds: 12, 42, 162, 642, 2562
/// vertices. Vertices are partitioned into the 24 parts by latitude band and
/// longitude sector, giving a deterministic part map for synthetic runs.
pub fn icosphere(subdivisions: usize) -> MeshTopology {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    for v in vertices.iter_mut() {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        *v = [v[0] / n, v[1] / n, v[2] / n];
    }
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<[f64; 3]>| -> usize {
            let key = (a.min(b), a.max(b));
            if let Some(&idx) = midpoints.get(&key) {
                return idx;
            }
            let pa = vertices[a];
            let pb = vertices[b];
            let mut m = [
                (pa[0] + pb[0]) / 2.0,
                (pa[1] + pb[1]) / 2.0,
                (pa[2] + pb[2]) / 2.0,
            ];
            let n = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
            m = [m[0] / n, m[1] / n, m[2] / n];
            vertices.push(m);
            let idx = vertices.len() - 1;
            midpoints.insert(key, idx);
            idx
        };
        for f in &faces {
            let ab = midpoint(f[0], f[1], &mut vertices);
            let bc = midpoint(f[1], f[2], &mut vertices);
            let ca = midpoint(f[2], f[0], &mut vertices);
            new_faces.push([f[0], ab, ca]);
            new_faces.push([f[1], bc, ab]);
            new_faces.push([f[2], ca, bc]);
            new_faces.push([ab, bc, ca]);
        }
        faces = new_faces;
    }
    let part_id = vertices.iter().map(|v| part_of_unit_point(*v)).collect();
    MeshTopology {
        vertices,
        faces,
        part_id,
    }
}

/// 6 latitude bands x 4 longitude sectors = 24 parts.
fn part_of_unit_point(p: [f64; 3]) -> usize {
    let theta = p[2].clamp(-1.0, 1.0).acos();
    let band = ((theta / std::f64::consts::PI) * 6.0).floor().min(5.0) as usize;
    let phi = p[1].atan2(p[0]);
    let sector = (((phi + std::f64::consts::PI) / (2.0 * std::f64::consts::PI)) * 4.0)
        .floor()
        .min(3.0) as usize;
    band * 4 + sector
}

/// Vertices belonging to each part, in part-id order.
pub fn part_members(mesh: &MeshTopology) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); NUM_PARTS];
    for (v, &p) in mesh.part_id.iter().enumerate() {
        members[p].push(v);
    }
    members
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndcore::Rng;

    fn labels(positives: &[usize]) -> ContactLabels {
        ContactLabels {
            image_id: "t".into(),
            positives: positives.iter().cloned().collect(),
            semantic: BTreeMap::new(),
        }
    }

    /// Path mesh 0-1-2 with collinear positions so the direct 0-2 edge has
    /// the same length as the two-hop path.
    fn path_mesh() -> MeshTopology {
        MeshTopology {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]],
            faces: vec![[0, 1, 2]],
            part_id: vec![0, 1, 2],
        }
    }

    #[test]
    fn confusion_exact_and_boundary() {
        let gt = labels(&[0, 2]);
        let pred = [0.9, 0.1, 0.5, 0.49];
        let c = confusion(&pred, &gt, 0.5);
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 0, 0, 2));

        // Prediction equals ground truth exactly.
        let c = confusion(&[1.0, 0.0, 1.0, 0.0], &gt, 0.5);
        assert_eq!((c.fp, c.fn_), (0, 0));

        // All positive against empty ground truth.
        let c = confusion(&[1.0; 4], &labels(&[]), 0.5);
        assert_eq!(c.fp, 4);
    }

    #[test]
    fn confusion_matches_brute_force_oracle() {
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let v = 20;
            let pred: Vec<f64> = (0..v).map(|_| rng.uniform()).collect();
            let pos: Vec<usize> = (0..v).filter(|_| rng.bernoulli(0.3)).collect();
            let gt = labels(&pos);
            let c = confusion(&pred, &gt, 0.5);
            let mut oracle = Confusion::default();
            for i in 0..v {
                let p = pred[i] >= 0.5;
                let a = pos.contains(&i);
                if p && a {
                    oracle.tp += 1;
                } else if p {
                    oracle.fp += 1;
                } else if a {
                    oracle.fn_ += 1;
                } else {
                    oracle.tn += 1;
                }
            }
            assert_eq!(c, oracle);
        }
    }

    #[test]
    fn prf1_cases() {
        assert_eq!(prf1(1, 1, 1), (0.5, 0.5, 0.5));
        assert_eq!(prf1(7, 0, 0), (1.0, 1.0, 1.0));
        assert_eq!(prf1(0, 3, 2), (0.0, 0.0, 0.0));
        assert_eq!(prf1(0, 0, 0), (0.0, 0.0, 0.0));
    }

    #[test]
    fn geodesic_path_graph() {
        let mesh = path_mesh();
        let d = geodesic_distances(&mesh, &[0].into_iter().collect()).unwrap();
        assert_eq!(d, vec![0.0, 1.0, 3.0]);
        assert!(geodesic_distances(&mesh, &BTreeSet::new()).is_err());
    }

    #[test]
    fn geodesic_source_distance_zero_and_triangle_inequality() {
        let mesh = icosphere(2);
        let sources: BTreeSet<usize> = [0, 17, 60].into_iter().collect();
        let d = geodesic_distances(&mesh, &sources).unwrap();
        for &s in &sources {
            assert_eq!(d[s], 0.0);
        }
        for (a, b, w) in mesh.edges() {
            assert!(d[a] <= d[b] + w + 1e-12);
            assert!(d[b] <= d[a] + w + 1e-12);
        }
    }

    #[test]
    fn geodesic_scales_with_positions() {
        let mesh = icosphere(1);
        let sources: BTreeSet<usize> = [3].into_iter().collect();
        let d1 = geodesic_distances(&mesh, &sources).unwrap();
        let mut scaled = mesh.clone();
        for v in scaled.vertices.iter_mut() {
            *v = [v[0] * 2.5, v[1] * 2.5, v[2] * 2.5];
        }
        let d2 = geodesic_distances(&scaled, &sources).unwrap();
        for (a, b) in d1.iter().zip(&d2) {
            assert!((b - 2.5 * a).abs() < 1e-9);
        }
    }

    #[test]
    fn geodesic_error_cases() {
        let mesh = path_mesh();

        // Perfect prediction: zero error.
        let gt = labels(&[1]);
        let g = geodesic_error(&[0.0, 1.0, 0.0], &gt, &mesh, 0.5).unwrap();
        assert_eq!(g.cm, 0.0);

        // One predicted vertex one edge of 0.1 m away: 10 cm.
        let mut mesh10 = mesh.clone();
        mesh10.vertices = vec![[0.0; 3], [0.1, 0.0, 0.0], [0.3, 0.0, 0.0]];
        let g = geodesic_error(&[1.0, 0.0, 0.0], &labels(&[1]), &mesh10, 0.5).unwrap();
        assert!((g.cm - 10.0).abs() < 1e-9);

        // No predictions: zero.
        let g = geodesic_error(&[0.0; 3], &labels(&[1]), &mesh, 0.5).unwrap();
        assert_eq!(g.cm, 0.0);

        // Predictions without ground truth: infinity sentinel with count.
        let g = geodesic_error(&[1.0, 1.0, 0.0], &labels(&[]), &mesh, 0.5).unwrap();
        assert!(g.cm.is_infinite());
        assert_eq!(g.predicted_without_gt, 2);

        // Adding a predicted vertex that is itself ground truth cannot raise
        // the mean.
        let gt = labels(&[0]);
        let before = geodesic_error(&[0.0, 1.0, 0.0], &gt, &mesh, 0.5).unwrap();
        let after = geodesic_error(&[1.0, 1.0, 0.0], &gt, &mesh, 0.5).unwrap();
        assert!(after.cm <= before.cm + 1e-12);
    }

    #[test]
    fn geodesic_error_excludes_unreachable() {
        crate::warnings::take();
        // Two disconnected components: 0-1 and 2-3.
        let mesh = MeshTopology {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0], [6.0, 0.0, 0.0]],
            faces: vec![[0, 1, 1], [2, 3, 3]],
            part_id: vec![0, 0, 1, 1],
        };
        let gt = labels(&[0]);
        let g = geodesic_error(&[0.0, 1.0, 1.0, 0.0], &gt, &mesh, 0.5).unwrap();
        assert_eq!(g.excluded_unreachable, 1);
        assert!((g.cm - 100.0).abs() < 1e-9);
        assert_eq!(crate::warnings::count(), 1);
        crate::warnings::take();
        assert_eq!(mesh.connected_components(), 2);
    }

    #[test]
    fn imbalance_report_cases() {
        let mesh = icosphere(2);
        let members = part_members(&mesh);

        let empty = imbalance_report(&[], &mesh).unwrap();
        assert!(empty.per_part_images.iter().all(|c| *c == 0));
        assert_eq!(empty.contact_free_fraction, 0.0);

        // One image with a single positive vertex in part 7.
        let v7 = members[7][0];
        let one = imbalance_report(&[labels(&[v7])], &mesh).unwrap();
        assert_eq!(one.per_part_images[7], 1);
        assert_eq!(one.per_part_images.iter().sum::<u64>(), 1);
        assert_eq!(one.contact_free_fraction, 0.0);

        // Planted plan across 100 images.
        let mut rng = Rng::new(9);
        let mut dataset = Vec::new();
        let mut plan_counts = [0u64; NUM_PARTS];
        let mut free = 0usize;
        for _ in 0..100 {
            let mut pos = Vec::new();
            let mut touched = [false; NUM_PARTS];
            for p in 0..NUM_PARTS {
                if !members[p].is_empty() && rng.bernoulli(0.2) {
                    pos.push(members[p][rng.below(members[p].len())]);
                    touched[p] = true;
                }
            }
            for (p, t) in touched.iter().enumerate() {
                if *t {
                    plan_counts[p] += 1;
                }
            }
            if pos.is_empty() {
                free += 1;
            }
            dataset.push(labels(&pos));
        }
        let rep = imbalance_report(&dataset, &mesh).unwrap();
        assert_eq!(rep.per_part_images, plan_counts.to_vec());
        assert!((rep.contact_free_fraction - free as f64 / 100.0).abs() < 1e-12);
        assert!(rep.per_part_images.iter().all(|c| *c <= 100));
    }

    #[test]
    fn semantic_metrics_cases() {
        // Perfect predictions.
        let mut gt = labels(&[1, 3]);
        gt.semantic.insert(1, 2);
        gt.semantic.insert(3, 1);
        let (p, r, f1) = semantic_metrics(&[0, 2, 0, 1], &gt);
        assert_eq!((p, r, f1), (1.0, 1.0, 1.0));

        // All class-0 predictions against nonzero labels: precision 0.
        let (p, r, _) = semantic_metrics(&[0, 0, 0, 0], &gt);
        assert_eq!((p, r), (0.0, 0.0));
    }

    #[test]
    fn semantic_metrics_match_counting_oracle() {
        let mut rng = Rng::new(31);
        for _ in 0..50 {
            let v = 10;
            let mut gt = ContactLabels {
                image_id: "o".into(),
                positives: BTreeSet::new(),
                semantic: BTreeMap::new(),
            };
            for i in 0..v {
                if rng.bernoulli(0.5) {
                    gt.positives.insert(i);
                    gt.semantic.insert(i, rng.below(4));
                }
            }
            let pred: Vec<usize> = (0..v).map(|_| rng.below(4)).collect();
            let got = semantic_metrics(&pred, &gt);

            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for i in 0..v {
                if gt.positives.contains(&i) {
                    let c = gt.semantic[&i];
                    if pred[i] == c {
                        tp += 1;
                    } else {
                        fn_ += 1;
                        if pred[i] != 0 {
                            fp += 1;
                        }
                    }
                } else if pred[i] != 0 {
                    fp += 1;
                }
            }
            assert_eq!(got, prf1(tp, fp, fn_));
        }
    }

    #[test]
    fn prf1_permutation_invariance() {
        let mut rng = Rng::new(77);
        let v = 30;
        let pred: Vec<f64> = (0..v).map(|_| rng.uniform()).collect();
        let pos: Vec<usize> = (0..v).filter(|_| rng.bernoulli(0.4)).collect();
        let gt = labels(&pos);
        let c = confusion(&pred, &gt, 0.5);
        let base = prf1(c.tp, c.fp, c.fn_);

        // Apply a permutation to vertices.
        let mut perm: Vec<usize> = (0..v).collect();
        for i in (1..v).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let pred_p: Vec<f64> = (0..v).map(|i| pred[perm[i]]).collect();
        let pos_p: Vec<usize> = pos
            .iter()
            .map(|&orig| perm.iter().position(|&x| x == orig).unwrap())
            .collect();
        let c2 = confusion(&pred_p, &labels(&pos_p), 0.5);
        assert_eq!(base, prf1(c2.tp, c2.fp, c2.fn_));
    }

    #[test]
    fn icosphere_sizes_parts_and_connectivity() {
        for (sub, expect) in [(0, 12), (1, 42), (2, 162), (3, 642)] {
            let mesh = icosphere(sub);
            assert_eq!(mesh.num_vertices(), expect);
            mesh.validate().unwrap();
            assert_eq!(mesh.connected_components(), 1);
        }
        // All 24 parts populated at evaluation scales.
        for sub in [2, 3] {
            let mesh = icosphere(sub);
            let members = part_members(&mesh);
            assert!(members.iter().all(|m| !m.is_empty()), "subdiv {sub}");
        }
    }

    #[test]
    fn mesh_json_roundtrip() {
        let dir = std::env::temp_dir().join("contactlab_mesh_test");
        std::fs::create_dir_all(&dir).unwrap();
        let mesh = icosphere(1);
        let path = dir.join("mesh.json");
        mesh.save(&path).unwrap();
        let loaded = MeshTopology::load(&path).unwrap();
        assert_eq!(mesh, loaded);
    }

    #[test]
    fn geo_sentinel_serialization() {
        let report = MetricReport {
            precision: 0.5,
            recall: 0.5,
            f1: 0.5,
            geodesic_error_cm: f64::INFINITY,
            per_part: vec![PartCounts::default(); NUM_PARTS],
        };
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"inf\""), "{json}");
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert!(back.geodesic_error_cm.is_infinite());
        assert_eq!(format_geo(f64::INFINITY), "inf");
        assert_eq!(format_geo(12.5), "12.5");
    }

    #[test]
    fn dijkstra_matches_floyd_warshall_oracle() {
        let mut rng = Rng::new(99);
        for trial in 0..20 {
            // Random connected mesh: a vertex chain plus random triangles.
            let n = 8 + rng.below(40);
            let mut vertices = Vec::with_capacity(n);
            for _ in 0..n {
                vertices.push([
                    rng.range(-1.0, 1.0),
                    rng.range(-1.0, 1.0),
                    rng.range(-1.0, 1.0),
                ]);
            }
            let mut faces = Vec::new();
            for i in 0..n.saturating_sub(2) {
                faces.push([i, i + 1, i + 2]);
            }
            for _ in 0..n {
                let a = rng.below(n);
                let b = rng.below(n);
                let c = rng.below(n);
                faces.push([a, b, c]);
            }
            let mesh = MeshTopology {
                vertices,
                faces,
                part_id: vec![0; n],
            };
            let mut sources = BTreeSet::new();
            sources.insert(rng.below(n));
            sources.insert(rng.below(n));
            let d = geodesic_distances(&mesh, &sources).unwrap();

            // Floyd-Warshall all-pairs oracle.
            let mut fw = vec![vec![f64::INFINITY; n]; n];
            for (i, row) in fw.iter_mut().enumerate() {
                row[i] = 0.0;
            }
            for (a, b, w) in mesh.edges() {
                if w < fw[a][b] {
                    fw[a][b] = w;
                    fw[b][a] = w;
                }
            }
            for k in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        let via = fw[i][k] + fw[k][j];
                        if via < fw[i][j] {
                            fw[i][j] = via;
                        }
                    }
                }
            }
            for v in 0..n {
                let best = sources.iter().map(|&s| fw[s][v]).fold(f64::INFINITY, f64::min);
                if best.is_finite() {
                    assert!((d[v] - best).abs() < 1e-9, "trial {trial} vertex {v}");
                } else {
                    assert!(d[v].is_infinite());
                }
            }
        }
    }
}
