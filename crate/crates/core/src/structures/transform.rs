use nalgebra::{Matrix3, UnitQuaternion, Vector4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use super::ProteinChain;
use crate::error::{Error, Result};

pub type Rotation = Matrix3<f64>;

/// Uniformly distributed rotation (normalized Gaussian quaternion).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let q = Vector4::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if q.norm() > 1e-6 {
            let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from_vector(q));
            return *uq.to_rotation_matrix().matrix();
        }
    }
}

fn check_rotation(r: &Rotation) -> Result<()> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if !(err <= 1e-6) || !((r.determinant() - 1.0).abs() <= 1e-6) {
        return Err(Error::Argument(format!(
            "rotation is not proper orthonormal (|RᵀR − I|∞ = {err:e}, det = {})",
            r.determinant()
        )));
    }
    Ok(())
}

/// Moves the atom centroid to the origin, then rotates.
///
/// With `seed` set the rotation argument is ignored and a uniformly random
/// rotation is drawn from that seed.
pub fn center_and_rotate(chain: &ProteinChain, rotation: &Rotation, seed: Option<u64>) -> Result<ProteinChain> {
    let r = match seed {
        Some(s) => random_rotation(&mut ChaCha8Rng::seed_from_u64(s)),
        None => {
            check_rotation(rotation)?;
            *rotation
        }
    };
    let c = chain.centroid();
    let mut out = chain.clone();
    for a in &mut out.atoms {
        a.position = r * (a.position - c);
    }
    Ok(out)
}
