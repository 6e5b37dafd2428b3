use serde::{Deserialize, Serialize};

use super::dihedral;
use crate::structures::residue_constants::chi_atoms;
use crate::structures::{ProteinChain, Vec3};

/// Longest C(i−1)–N(i) distance still treated as a peptide bond, Å.
const MAX_PEPTIDE_BOND: f64 = 2.0;

/// Names of the seven torsion slots.
pub const TORSION_NAMES: [&str; 7] = ["phi", "psi", "omega", "chi1", "chi2", "chi3", "chi4"];

/// (φ, ψ, ω, χ1..χ4) in radians; invalid slots hold 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TorsionSet {
    pub angles: [f64; 7],
    pub valid: [bool; 7],
}

impl TorsionSet {
    fn set(&mut self, slot: usize, angle: Option<f64>) {
        if let Some(a) = angle {
            self.angles[slot] = a;
            self.valid[slot] = true;
        }
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

fn quad(points: [Option<Vec3>; 4]) -> Option<f64> {
    let [a, b, c, d] = points;
    dihedral(a?, b?, c?, d?).ok()
}

/// Backbone and side-chain torsions of every residue. Any angle whose
/// defining atoms are missing (or degenerate) is marked invalid.
pub fn compute_torsions(chain: &ProteinChain) -> Vec<TorsionSet> {
    let n = chain.n_residues();
    let pos = |r: usize, name: &str| chain.atom_position(r, name);
    let linked = |r: usize| -> bool {
        // residue r is peptide-bonded to r − 1
        r > 0
            && match (pos(r - 1, "C"), pos(r, "N")) {
                (Some(c), Some(nn)) => (c - nn).norm() <= MAX_PEPTIDE_BOND,
                _ => false,
            }
    };
    (0..n)
        .map(|i| {
            let mut t = TorsionSet::default();
            let (n_i, ca_i, c_i) = (pos(i, "N"), pos(i, "CA"), pos(i, "C"));
            if linked(i) {
                t.set(0, quad([pos(i - 1, "C"), n_i, ca_i, c_i]));
                t.set(2, quad([pos(i - 1, "CA"), pos(i - 1, "C"), n_i, ca_i]));
            }
            if i + 1 < n && linked(i + 1) {
                t.set(1, quad([n_i, ca_i, c_i, pos(i + 1, "N")]));
            }
            let aa = chain.residues[i].amino_acid;
            for (k, names) in chi_atoms(aa).iter().enumerate() {
                t.set(3 + k, quad(names.map(|nm| pos(i, nm))));
            }
            t
        })
        .collect()
}
