//! Residue frames, dihedral angles, and solvent accessibility.

mod dihedral;
mod frame;
pub mod sasa;
mod torsion;

pub use dihedral::dihedral;
pub use frame::{local_frame, LocalFrame};
pub use sasa::{annotate_sasa, shrake_rupley, shrake_rupley_radii, vdw_radius, SasaResult};
pub use torsion::{compute_torsions, TorsionSet, TORSION_NAMES};

use crate::structures::ProteinChain;

/// Frame of every residue that still has N, CA and C; `None` otherwise.
pub fn residue_frames(chain: &ProteinChain) -> Vec<Option<LocalFrame>> {
    (0..chain.n_residues())
        .map(|r| {
            let n = chain.atom_position(r, "N")?;
            let c = chain.atom_position(r, "C")?;
            local_frame(n, chain.ca_position(r), c).ok()
        })
        .collect()
}
