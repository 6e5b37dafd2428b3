use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::structures::Vec3;

/// Signed dihedral angle about the p2–p3 axis, in (−π, π].
///
/// IUPAC sign convention: positive when, looking from p2 towards p3, the
/// near bond p1–p2 turns clockwise onto the far bond p3–p4.
pub fn dihedral(p1: Vec3, p2: Vec3, p3: Vec3, p4: Vec3) -> Result<f64> {
    let b1 = p2 - p1;
    let b2 = p3 - p2;
    let b3 = p4 - p3;
    if b1.norm() < 1e-12 || b2.norm() < 1e-12 || b3.norm() < 1e-12 {
        return Err(Error::Degenerate("dihedral with coincident consecutive points".into()));
    }
    let n1 = b1.cross(&b2);
    let n2 = b2.cross(&b3);
    if n1.norm() < 1e-12 * b1.norm() * b2.norm() || n2.norm() < 1e-12 * b2.norm() * b3.norm() {
        return Err(Error::Degenerate("dihedral with collinear points".into()));
    }
    let x = n1.dot(&n2);
    let y = b2.normalize().dot(&n1.cross(&n2));
    let angle = y.atan2(x);
    Ok(if angle <= -PI { PI } else { angle })
}
