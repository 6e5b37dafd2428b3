//! Shrake–Rupley solvent accessible surface area.

use std::collections::HashMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structures::{ProteinChain, Vec3};

pub const DEFAULT_PROBE_RADIUS: f64 = 1.4;
pub const DEFAULT_SPHERE_POINTS: usize = 960;
pub const MIN_SPHERE_POINTS: usize = 16;

/// Elements accepted besides C, N, O and S; all take the generic 1.8 Å.
const OTHER_ELEMENTS: [&str; 16] = [
    "P", "SE", "FE", "ZN", "MG", "CA", "NA", "K", "CL", "MN", "CU", "CO", "NI", "BR", "I", "F",
];

/// Van der Waals radius, Å.
pub fn vdw_radius(element: &str) -> Option<f64> {
    match element.trim().to_ascii_uppercase().as_str() {
        "C" => Some(1.7),
        "N" => Some(1.55),
        "O" => Some(1.52),
        "S" => Some(1.8),
        e if OTHER_ELEMENTS.contains(&e) => Some(1.8),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SasaResult {
    /// Å² per atom.
    pub per_atom: Vec<f64>,
    pub probe_radius: f64,
    pub n_points: usize,
}

impl SasaResult {
    pub fn total(&self) -> f64 {
        self.per_atom.iter().sum()
    }
}

/// Unit-sphere sample points: a Fibonacci spiral over the upper hemisphere
/// plus the antipode of every point, so the set is symmetric under u → −u.
/// For odd `n` the last antipode is dropped.
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5.0_f64.sqrt());
    let half = n.div_ceil(2);
    let upper: Vec<Vec3> = (0..half)
        .map(|k| {
            let y = 1.0 - (k as f64 + 0.5) / half as f64;
            let r = (1.0 - y * y).max(0.0).sqrt();
            let phi = golden * k as f64;
            Vec3::new(phi.cos() * r, y, phi.sin() * r)
        })
        .collect();
    let mut points = upper.clone();
    points.extend(upper.iter().map(|u| -u));
    points.truncate(n);
    points
}

fn cell_of(p: &Vec3, size: f64) -> (i64, i64, i64) {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

/// SASA for explicit centers and radii.
pub fn shrake_rupley_radii(centers: &[Vec3], radii: &[f64], probe_radius: f64, n_points: usize) -> Result<SasaResult> {
    if n_points < MIN_SPHERE_POINTS {
        return Err(Error::Argument(format!("n_points must be at least {MIN_SPHERE_POINTS}, got {n_points}")));
    }
    if centers.len() != radii.len() {
        return Err(Error::DimensionMismatch {
            what: "radii".into(),
            expected: centers.len(),
            found: radii.len(),
        });
    }
    let sphere = fibonacci_sphere(n_points);
    let expanded: Vec<f64> = radii.iter().map(|r| r + probe_radius).collect();
    let max_r = expanded.iter().cloned().fold(0.0, f64::max);
    let cell = (2.0 * max_r).max(1e-6);
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, c) in centers.iter().enumerate() {
        grid.entry(cell_of(c, cell)).or_default().push(i);
    }

    let per_atom = (0..centers.len())
        .into_par_iter()
        .map(|i| {
            let ci = centers[i];
            let ri = expanded[i];
            let (gx, gy, gz) = cell_of(&ci, cell);
            let mut neighbors: Vec<usize> = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(bucket) = grid.get(&(gx + dx, gy + dy, gz + dz)) {
                            for &j in bucket {
                                if j != i && (centers[j] - ci).norm() < ri + expanded[j] {
                                    neighbors.push(j);
                                }
                            }
                        }
                    }
                }
            }
            // nearest first, so occluded points are rejected early
            neighbors.sort_by(|&a, &b| {
                (centers[a] - ci)
                    .norm_squared()
                    .total_cmp(&(centers[b] - ci).norm_squared())
                    .then(a.cmp(&b))
            });
            let accessible = sphere
                .iter()
                .filter(|u| {
                    let p = ci + *u * ri;
                    neighbors
                        .iter()
                        .all(|&j| (p - centers[j]).norm_squared() >= expanded[j] * expanded[j])
                })
                .count();
            accessible as f64 / n_points as f64 * 4.0 * PI * ri * ri
        })
        .collect();
    Ok(SasaResult {
        per_atom,
        probe_radius,
        n_points,
    })
}

/// Per-atom SASA of a chain using the element radius table.
pub fn shrake_rupley(chain: &ProteinChain, probe_radius: f64, n_points: usize) -> Result<SasaResult> {
    let radii = chain
        .atoms
        .iter()
        .map(|a| vdw_radius(&a.element).ok_or_else(|| Error::UnknownElement(a.element.clone())))
        .collect::<Result<Vec<_>>>()?;
    let centers: Vec<Vec3> = chain.atoms.iter().map(|a| a.position).collect();
    shrake_rupley_radii(&centers, &radii, probe_radius, n_points)
}

/// Copy of `chain` with every atom's `sasa_label` filled in.
pub fn annotate_sasa(chain: &ProteinChain, probe_radius: f64, n_points: usize) -> Result<ProteinChain> {
    let result = shrake_rupley(chain, probe_radius, n_points)?;
    let mut out = chain.clone();
    for (a, s) in out.atoms.iter_mut().zip(result.per_atom) {
        a.sasa_label = Some(s);
    }
    Ok(out)
}
