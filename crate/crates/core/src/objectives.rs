//! Pre-training and fine-tuning losses on tape variables.

use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};
use vabs_autodiff::{Tape, Tensor, Var};

use crate::error::Result;
use crate::geometry::TorsionSet;
use crate::structures::Vec3;

/// Weight of the |‖p‖ − 1| penalty in the torsion loss.
pub const TORSION_NORM_WEIGHT: f64 = 0.02;
/// Keeps the torsion normalization finite at a zero prediction.
const NORM_FLOOR: f64 = 1e-12;

fn zero(tape: &mut Tape, what: &str) -> Var {
    warn!("{what}: no contributing nodes, loss defined as 0");
    tape.constant(Tensor::scalar(0.0))
}

/// Mean cross-entropy of `logits` (`[m, 20]`, one row per masked residue)
/// against the true classes.
pub fn residue_type_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Ok(zero(tape, "residue_type_loss"));
    }
    let t: Arc<[usize]> = targets.into();
    Ok(tape.cross_entropy_with_logits(logits, &t)?)
}

/// `pred` is `[7m, 2]` (row 7r + k = raw (sin, cos) of angle k of residue r).
/// Per valid angle: ‖p̂ − (sin θ, cos θ)‖₁ + 0.02·|‖p‖ − 1| with p̂ = p/‖p‖,
/// averaged over valid angles.
pub fn torsion_loss(tape: &mut Tape, pred: Var, targets: &[TorsionSet]) -> Result<Var> {
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for (r, t) in targets.iter().enumerate() {
        for k in 0..7 {
            if t.valid[k] {
                rows.push(7 * r + k);
                truth.extend([t.angles[k].sin(), t.angles[k].cos()]);
            }
        }
    }
    if rows.is_empty() {
        return Ok(zero(tape, "torsion_loss"));
    }
    let v = rows.len();
    let rows: Arc<[usize]> = rows.into();
    let p = tape.gather_rows(pred, &rows)?;
    let norm = tape.l2_norm(p);
    let safe = tape.add_scalar(norm, NORM_FLOOR);
    let unit = tape.div_col(p, safe)?;
    let target = tape.constant(Tensor::new(v, 2, truth)?);
    // l1_loss averages over both components; per-angle L1 sums them
    let l1 = tape.l1_loss(unit, target)?;
    let l1 = tape.scale(l1, 2.0);
    let dev = tape.add_scalar(norm, -1.0);
    let dev = tape.abs(dev);
    let pen = tape.mean(dev)?;
    let pen = tape.scale(pen, TORSION_NORM_WEIGHT);
    Ok(tape.add(l1, pen)?)
}

fn coords_tensor(points: &[Vec3]) -> Result<Tensor> {
    Ok(Tensor::new(points.len(), 3, points.iter().flat_map(|p| [p.x, p.y, p.z]).collect())?)
}

/// (1/n) Σ ‖r^P_i − r^R_i‖ over the rows `omega` of `pred` (`[nodes, 3]`).
pub fn position_loss(tape: &mut Tape, pred: Var, omega: &[usize], real: &[Vec3]) -> Result<Var> {
    if omega.is_empty() {
        return Ok(zero(tape, "position_loss"));
    }
    let rows: Arc<[usize]> = omega.into();
    let p = tape.gather_rows(pred, &rows)?;
    let r = tape.constant(coords_tensor(real)?);
    let d = tape.sub(p, r)?;
    let n = tape.l2_norm(d);
    Ok(tape.mean(n)?)
}

/// (1/n²) Σ_{i,j∈Ω} | ‖r^P_i − r^P_j‖ − ‖r^R_i − r^R_j‖ |. Diagonal terms
/// are zero and skipped (the norm has no derivative at zero).
pub fn distance_loss(tape: &mut Tape, pred: Var, omega: &[usize], real: &[Vec3]) -> Result<Var> {
    let n = omega.len();
    if n < 2 {
        return Ok(zero(tape, "distance_loss"));
    }
    let mut a = Vec::with_capacity(n * (n - 1));
    let mut b = Vec::with_capacity(n * (n - 1));
    let mut target = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                a.push(omega[i]);
                b.push(omega[j]);
                target.push((real[i] - real[j]).norm());
            }
        }
    }
    let (a, b): (Arc<[usize]>, Arc<[usize]>) = (a.into(), b.into());
    let pa = tape.gather_rows(pred, &a)?;
    let pb = tape.gather_rows(pred, &b)?;
    let diff = tape.sub(pa, pb)?;
    let dp = tape.l2_norm(diff);
    let dr = tape.constant(Tensor::column(target));
    let gap = tape.sub(dp, dr)?;
    let gap = tape.abs(gap);
    let total = tape.sum(gap);
    Ok(tape.scale(total, 1.0 / (n * n) as f64))
}

/// Mean absolute error of `pred` (`[m, 1]`) against `labels`.
pub fn sasa_loss(tape: &mut Tape, pred: Var, labels: &[f64]) -> Result<Var> {
    if labels.is_empty() {
        return Ok(zero(tape, "sasa_loss"));
    }
    let t = tape.constant(Tensor::column(labels.to_vec()));
    Ok(tape.l1_loss(pred, t)?)
}

/// Mean binary cross-entropy of `logits` (`[m, 1]`) against 0/1 labels.
pub fn node_class_loss(tape: &mut Tape, logits: Var, labels: &[f64]) -> Result<Var> {
    if labels.is_empty() {
        return Ok(zero(tape, "node_class_loss"));
    }
    Ok(tape.bce_with_logits(logits, labels)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub res_type: f64,
    pub torsion: f64,
    pub pos: f64,
    pub dist: f64,
    pub sasa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            res_type: 1.0,
            torsion: 1.0,
            pos: 1.0,
            dist: 1.0,
            sasa: 1.0,
        }
    }
}

/// The five pre-training loss variables of one sample.
#[derive(Debug, Clone, Copy)]
pub struct LossComponents {
    pub res_type: Var,
    pub torsion: Var,
    pub pos: Var,
    pub dist: Var,
    pub sasa: Var,
}

/// Unweighted component values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub res_type: f64,
    pub torsion: f64,
    pub pos: f64,
    pub dist: f64,
    pub sasa: f64,
}

impl LossReport {
    /// Component-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.total += r.total / n;
            m.res_type += r.res_type / n;
            m.torsion += r.torsion / n;
            m.pos += r.pos / n;
            m.dist += r.dist / n;
            m.sasa += r.sasa / n;
        }
        m
    }
}

/// Weighted sum of the components.
pub fn total_pretrain_loss(tape: &mut Tape, c: &LossComponents, w: &LossWeights) -> Result<(Var, LossReport)> {
    let parts = [
        (c.res_type, w.res_type),
        (c.torsion, w.torsion),
        (c.pos, w.pos),
        (c.dist, w.dist),
        (c.sasa, w.sasa),
    ];
    let mut total = tape.scale(parts[0].0, parts[0].1);
    for &(v, weight) in &parts[1..] {
        let s = tape.scale(v, weight);
        total = tape.add(total, s)?;
    }
    let val = |v: Var| tape.value(v).item();
    let report = LossReport {
        total: val(total),
        res_type: val(c.res_type),
        torsion: val(c.torsion),
        pos: val(c.pos),
        dist: val(c.dist),
        sasa: val(c.sasa),
    };
    Ok((total, report))
}
