//! Self-distillation objectives and teacher maintenance: image-level and
//! masked-patch cross-entropy against an EMA teacher, with moving-average or
//! Sinkhorn centering of the teacher logits.
//!
//! Teacher quantities are plain value buffers and never enter the gradient
//! tape; only the student side is differentiable.

use std::collections::BTreeMap;

use ndcore::{Pointwise, Reduce, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ContactError, Result};
use crate::params::ParamStore;
use crate::warnings;

pub const DEFAULT_STUDENT_TEMP: f64 = 0.1;
pub const DEFAULT_TEACHER_TEMP: f64 = 0.04;
pub const DEFAULT_SINKHORN_ITERS: usize = 3;

const PROB_FLOOR: f64 = 1e-12;

/// Validated prototype probability rows, `[rows, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeScores {
    values: Vec<f64>,
    rows: usize,
    k: usize,
}

impl PrototypeScores {
    pub fn new(values: Vec<f64>, rows: usize, k: usize) -> Result<Self> {
        if values.len() != rows * k {
            return Err(ContactError::Config(format!(
                "{} values for {rows}x{k} prototype scores",
                values.len()
            )));
        }
        for (i, row) in values.chunks(k).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ContactError::Numeric(format!(
                    "prototype row {i} sums to {sum}, expected 1"
                )));
            }
            if row.iter().any(|p| *p < 0.0 || *p > 1.0) {
                return Err(ContactError::Numeric(format!(
                    "prototype row {i} has entries outside [0,1]"
                )));
            }
        }
        Ok(PrototypeScores { values, rows, k })
    }

    pub fn uniform(rows: usize, k: usize) -> Self {
        PrototypeScores {
            values: vec![1.0 / k as f64; rows * k],
            rows,
            k,
        }
    }

    pub fn one_hot(rows: usize, k: usize, hot: &[usize]) -> Result<Self> {
        if hot.len() != rows {
            return Err(ContactError::Config("one hot index per row required".into()));
        }
        let mut values = vec![0.0; rows * k];
        for (i, &h) in hot.iter().enumerate() {
            if h >= k {
                return Err(ContactError::Config(format!("hot index {h} out of range")));
            }
            values[i * k + h] = 1.0;
        }
        Ok(PrototypeScores { values, rows, k })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn entropy(&self) -> f64 {
        -self
            .values
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

fn check_student_rows(tape: &Tape, student: Var, rows: usize, k: usize) -> Result<()> {
    let arr = tape.value(student);
    let shape = arr.shape();
    let ok = shape == [rows, k] || (rows == 1 && shape == [k]);
    if !ok {
        return Err(ContactError::Config(format!(
            "student scores have shape {shape:?}, expected [{rows},{k}]"
        )));
    }
    for (i, row) in arr.values().chunks(k).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ContactError::Numeric(format!(
                "student row {i} sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}

fn clamped_log(tape: &mut Tape, student: Var, teacher: &[f64], context: &str) -> Result<Var> {
    let zeros_under_teacher = tape
        .value(student)
        .values()
        .iter()
        .zip(teacher)
        .filter(|(p, t)| **p <= 0.0 && **t > 0.0)
        .count();
    if zeros_under_teacher > 0 {
        warnings::record(format!(
            "{context}: {zeros_under_teacher} student probabilities at 0 under positive teacher mass, log floored at {PROB_FLOOR}"
        ));
    }
    let clamped = tape.pointwise(
        student,
        Pointwise::Clamp {
            lo: PROB_FLOOR,
            hi: f64::INFINITY,
        },
    )?;
    Ok(tape.pointwise(clamped, Pointwise::Log)?)
}

/// Image-level distillation loss: -sum_k p_t[k] log p_s[k]. The teacher row
/// is a constant; gradient reaches the student only.
pub fn dino_loss(tape: &mut Tape, teacher: &PrototypeScores, student: Var) -> Result<Var> {
    if teacher.rows != 1 {
        return Err(ContactError::Config(format!(
            "image-level loss expects one teacher row, got {}",
            teacher.rows
        )));
    }
    check_student_rows(tape, student, 1, teacher.k)?;
    let shape = tape.value(student).shape().to_vec();
    let log_p = clamped_log(tape, student, &teacher.values, "dino_loss")?;
    let t = tape.constant(teacher.values.clone(), shape)?;
    let weighted = tape.hadamard(t, log_p)?;
    let sum = tape.reduce(weighted, Reduce::Sum, None)?;
    Ok(tape.pointwise(sum, Pointwise::Negate)?)
}

/// Masked-patch distillation loss: sum over masked patches of the per-patch
/// cross-entropy -sum_k p_ti[k] log p_si[k].
pub fn ibot_loss(
    tape: &mut Tape,
    teacher: &PrototypeScores,
    student: Var,
    mask: &[bool],
) -> Result<Var> {
    if mask.len() != teacher.rows {
        return Err(ContactError::Config(format!(
            "mask has {} entries for {} patches",
            mask.len(),
            teacher.rows
        )));
    }
    check_student_rows(tape, student, teacher.rows, teacher.k)?;
    if !mask.iter().any(|m| *m) {
        warnings::record("ibot_loss: no masked patches, loss is 0");
        return Ok(tape.scalar(0.0));
    }
    let k = teacher.k;
    let coef: Vec<f64> = teacher
        .values
        .iter()
        .enumerate()
        .map(|(idx, t)| if mask[idx / k] { *t } else { 0.0 })
        .collect();
    let shape = tape.value(student).shape().to_vec();
    let log_p = clamped_log(tape, student, &coef, "ibot_loss")?;
    let c = tape.constant(coef, shape)?;
    let weighted = tape.hadamard(c, log_p)?;
    let sum = tape.reduce(weighted, Reduce::Sum, None)?;
    Ok(tape.pointwise(sum, Pointwise::Negate)?)
}

/// Teacher parameters, running center, and update momenta. Parameter names
/// and shapes mirror the student subset the teacher was built from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherState {
    pub params: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub center: Vec<f64>,
    pub momentum: f64,
    pub center_momentum: f64,
}

impl TeacherState {
    /// Teacher initialized as a copy of the student parameters selected by
    /// `scope`.
    pub fn mirroring(
        student: &ParamStore,
        scope: impl Fn(&str) -> bool,
        prototypes: usize,
        momentum: f64,
        center_momentum: f64,
    ) -> Result<Self> {
        for (name, m) in [("momentum", momentum), ("center_momentum", center_momentum)] {
            if !(0.0..1.0).contains(&m) {
                return Err(ContactError::Config(format!("{name} must be in [0,1), got {m}")));
            }
        }
        let params: BTreeMap<String, (Vec<usize>, Vec<f64>)> = student
            .iter()
            .filter(|(name, _)| scope(name))
            .map(|(name, e)| (name.to_string(), (e.shape.clone(), e.values.clone())))
            .collect();
        if params.is_empty() {
            return Err(ContactError::Config("teacher scope selects no parameters".into()));
        }
        Ok(TeacherState {
            params,
            center: vec![0.0; prototypes],
            momentum,
            center_momentum,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Vec<f64>> {
        self.params
            .get(name)
            .map(|(_, v)| v)
            .ok_or_else(|| ContactError::Structure(format!("teacher has no parameter '{name}'")))
    }
}

/// theta_t <- m theta_t + (1 - m) theta_s for every mirrored parameter.
pub fn ema_update(teacher: &mut TeacherState, student: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(ContactError::Config(format!("momentum must be in [0,1], got {m}")));
    }
    let mut offending = Vec::new();
    for (name, (shape, _)) in &teacher.params {
        match student.get(name) {
            Err(_) => offending.push(format!("{name} (missing from student)")),
            Ok(e) if &e.shape != shape => offending.push(format!(
                "{name} (student shape {:?}, teacher shape {shape:?})",
                e.shape
            )),
            Ok(_) => {}
        }
    }
    if !offending.is_empty() {
        return Err(ContactError::Structure(format!(
            "teacher/student mirror mismatch: {}",
            offending.join(", ")
        )));
    }
    for (name, (_, values)) in teacher.params.iter_mut() {
        let student_values = &student.get(name).expect("checked above").values;
        for (t, s) in values.iter_mut().zip(student_values) {
            *t = m * *t + (1.0 - m) * s;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    MovingAverage,
    Sinkhorn,
}

/// Center raw teacher logits `[rows,k]` and convert them to probability rows
/// at the teacher temperature.
///
/// Moving-average mode subtracts the running center before the softmax, then
/// folds the batch mean of the logits into the center. Sinkhorn mode
/// alternates column and row normalization of exp(logits / temperature); with
/// a single row the column step is degenerate and the result is the plain
/// softmax row.
pub fn center(
    logits: &[f64],
    rows: usize,
    k: usize,
    state: &mut TeacherState,
    mode: CenterMode,
    temperature: f64,
    sinkhorn_iters: usize,
) -> Result<PrototypeScores> {
    if logits.len() != rows * k {
        return Err(ContactError::Config(format!(
            "{} logits for {rows}x{k}",
            logits.len()
        )));
    }
    if state.center.len() != k {
        return Err(ContactError::Structure(format!(
            "center has {} entries for {k} prototypes",
            state.center.len()
        )));
    }
    if temperature <= 0.0 {
        return Err(ContactError::Config(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(ContactError::Numeric("non-finite teacher logits".into()));
    }

    let probs = match mode {
        CenterMode::MovingAverage => {
            let mut out = vec![0.0; rows * k];
            for r in 0..rows {
                let row = &logits[r * k..(r + 1) * k];
                let shifted: Vec<f64> = row
                    .iter()
                    .zip(&state.center)
                    .map(|(l, c)| (l - c) / temperature)
                    .collect();
                let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = shifted.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for j in 0..k {
                    out[r * k + j] = exps[j] / sum;
                }
            }
            // Fold this batch into the running center.
            let cm = state.center_momentum;
            for j in 0..k {
                let mean_j = (0..rows).map(|r| logits[r * k + j]).sum::<f64>() / rows as f64;
                state.center[j] = cm * state.center[j] + (1.0 - cm) * mean_j;
            }
            out
        }
        CenterMode::Sinkhorn => {
            // A single global shift scales the whole matrix by one factor,
            // which the first normalization cancels exactly; it only guards
            // against overflow.
            let global_max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut m: Vec<f64> = logits
                .iter()
                .map(|l| ((l - global_max) / temperature).exp())
                .collect();
            // With one row the column step is degenerate; skip straight to
            // row normalization, which reduces to the plain softmax row.
            let iters = if rows == 1 { 0 } else { sinkhorn_iters };
            sinkhorn_normalize(&mut m, rows, k, iters)?;
            m
        }
    };
    PrototypeScores::new(probs, rows, k)
}

/// Alternating column/row normalization on a nonnegative matrix, finishing
/// with a row normalization so every row sums to 1. The all-zero matrix and
/// any zero column or row sum are numeric errors.
pub fn sinkhorn_normalize(m: &mut [f64], rows: usize, k: usize, iters: usize) -> Result<()> {
    if m.len() != rows * k {
        return Err(ContactError::Config(format!(
            "{} entries for {rows}x{k} matrix",
            m.len()
        )));
    }
    if m.iter().all(|v| *v == 0.0) {
        return Err(ContactError::Numeric("sinkhorn over the all-zero matrix".into()));
    }
    for _ in 0..iters {
        for j in 0..k {
            let s: f64 = (0..rows).map(|r| m[r * k + j]).sum();
            if s == 0.0 {
                return Err(ContactError::Numeric(format!("sinkhorn column {j} sums to zero")));
            }
            for r in 0..rows {
                m[r * k + j] /= s;
            }
        }
        normalize_rows(m, rows, k)?;
    }
    if iters == 0 {
        normalize_rows(m, rows, k)?;
    }
    Ok(())
}

fn normalize_rows(m: &mut [f64], rows: usize, k: usize) -> Result<()> {
    for r in 0..rows {
        let s: f64 = m[r * k..(r + 1) * k].iter().sum();
        if s == 0.0 {
            return Err(ContactError::Numeric(format!("row {r} sums to zero")));
        }
        for j in 0..k {
            m[r * k + j] /= s;
        }
    }
    Ok(())
}
