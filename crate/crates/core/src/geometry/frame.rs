use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::structures::Vec3;

/// Residue-local orthonormal frame anchored at the alpha carbon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    /// Columns are the local x, y, z axes (u, v, w) in global coordinates.
    pub rotation: Matrix3<f64>,
    pub origin: Vec3,
}

impl LocalFrame {
    pub fn identity_at(origin: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            origin,
        }
    }

    /// Local coordinates of a global direction: Rᵀg.
    pub fn to_local(&self, g: &Vec3) -> Vec3 {
        self.rotation.transpose() * g
    }
}

/// Frame from the N, CA, C positions of one residue.
///
/// With v_N = N − CA and v_C = C − CA: u ∥ v_N − v_C, v ∥ v_N × v_C, and
/// w = u × v.
pub fn local_frame(r_n: Vec3, r_ca: Vec3, r_c: Vec3) -> Result<LocalFrame> {
    let v_n = r_n - r_ca;
    let v_c = r_c - r_ca;
    let cross = v_n.cross(&v_c);
    let diff = v_n - v_c;
    if cross.norm() < 1e-8 || diff.norm() < 1e-8 {
        return Err(Error::Degenerate(
            "N, CA, C are collinear or coincident; local frame undefined".into(),
        ));
    }
    let u = diff / diff.norm();
    let v = cross / cross.norm();
    let w = u.cross(&v);
    Ok(LocalFrame {
        rotation: Matrix3::from_columns(&[u, v, w]),
        origin: r_ca,
    })
}
