//! Protein chain domain model and ingestion.

pub mod chain_file;
pub mod pdb;
pub mod residue_constants;
pub mod synthetic;
mod transform;

use std::collections::HashSet;
use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use pdb::{parse_pdb, ParseOutput};
pub use synthetic::generate_synthetic_chain;
pub use transform::{center_and_rotate, random_rotation, Rotation};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AminoAcidType {
    Ala,
    Arg,
    Asn,
    Asp,
    Cys,
    Gln,
    Glu,
    Gly,
    His,
    Ile,
    Leu,
    Lys,
    Met,
    Phe,
    Pro,
    Ser,
    Thr,
    Trp,
    Tyr,
    Val,
    /// Unrecognized residue.
    Unk,
    /// Placeholder written by span masking.
    Mask,
}

/// Residue-type token reserved for the virtual origin node.
pub const RESIDUE_TYPE_ORIGIN: usize = 22;
pub const N_RESIDUE_TOKENS: usize = 23;

impl AminoAcidType {
    pub const STANDARD: [AminoAcidType; 20] = [
        Self::Ala,
        Self::Arg,
        Self::Asn,
        Self::Asp,
        Self::Cys,
        Self::Gln,
        Self::Glu,
        Self::Gly,
        Self::His,
        Self::Ile,
        Self::Leu,
        Self::Lys,
        Self::Met,
        Self::Phe,
        Self::Pro,
        Self::Ser,
        Self::Thr,
        Self::Trp,
        Self::Tyr,
        Self::Val,
    ];

    pub const ALL: [AminoAcidType; 22] = [
        Self::Ala,
        Self::Arg,
        Self::Asn,
        Self::Asp,
        Self::Cys,
        Self::Gln,
        Self::Glu,
        Self::Gly,
        Self::His,
        Self::Ile,
        Self::Leu,
        Self::Lys,
        Self::Met,
        Self::Phe,
        Self::Pro,
        Self::Ser,
        Self::Thr,
        Self::Trp,
        Self::Tyr,
        Self::Val,
        Self::Unk,
        Self::Mask,
    ];

    /// Token id: 0..20 for the standard types, 20 for UNK, 21 for MASK.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&a| a == self).expect("listed")
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_standard(self) -> bool {
        self.index() < 20
    }

    pub fn three_letter(self) -> &'static str {
        use AminoAcidType::*;
        match self {
            Ala => "ALA",
            Arg => "ARG",
            Asn => "ASN",
            Asp => "ASP",
            Cys => "CYS",
            Gln => "GLN",
            Glu => "GLU",
            Gly => "GLY",
            His => "HIS",
            Ile => "ILE",
            Leu => "LEU",
            Lys => "LYS",
            Met => "MET",
            Phe => "PHE",
            Pro => "PRO",
            Ser => "SER",
            Thr => "THR",
            Trp => "TRP",
            Tyr => "TYR",
            Val => "VAL",
            Unk => "UNK",
            Mask => "MASK",
        }
    }

    pub fn from_three_letter(code: &str) -> Option<Self> {
        let code = code.trim().to_ascii_uppercase();
        Self::ALL.iter().copied().find(|a| a.three_letter() == code)
    }
}

impl fmt::Display for AminoAcidType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.three_letter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub element: String,
    pub atom_name: String,
    /// Å
    pub position: Vec3,
    pub residue_index: usize,
    /// Solvent accessible area of the clean structure, Å².
    pub sasa_label: Option<f64>,
    /// Optional per-atom binary label for fine-tuning.
    pub label: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residue {
    pub amino_acid: AminoAcidType,
    pub seq_position: i32,
    pub insertion_code: Option<char>,
    pub atom_indices: Vec<usize>,
    pub ca_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProteinChain {
    pub chain_id: String,
    pub residues: Vec<Residue>,
    pub atoms: Vec<Atom>,
}

impl ProteinChain {
    pub fn n_residues(&self) -> usize {
        self.residues.len()
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    /// Index of the atom called `name` in residue `residue`.
    pub fn find_atom(&self, residue: usize, name: &str) -> Option<usize> {
        self.residues[residue]
            .atom_indices
            .iter()
            .copied()
            .find(|&i| self.atoms[i].atom_name == name)
    }

    pub fn atom_position(&self, residue: usize, name: &str) -> Option<Vec3> {
        self.find_atom(residue, name).map(|i| self.atoms[i].position)
    }

    pub fn ca_position(&self, residue: usize) -> Vec3 {
        self.atoms[self.residues[residue].ca_index].position
    }

    pub fn centroid(&self) -> Vec3 {
        let sum = self.atoms.iter().fold(Vec3::zeros(), |acc, a| acc + a.position);
        sum / self.atoms.len().max(1) as f64
    }

    /// Checks every structural invariant of the chain.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invariant(format!("chain {}: {m}", self.chain_id)));
        let mut owner = vec![None; self.atoms.len()];
        for (ri, res) in self.residues.iter().enumerate() {
            if ri > 0 {
                let prev = &self.residues[ri - 1];
                let a = (prev.seq_position, prev.insertion_code.unwrap_or(' '));
                let b = (res.seq_position, res.insertion_code.unwrap_or(' '));
                if a >= b {
                    return fail(format!("residue {ri} out of order"));
                }
            }
            if !res.atom_indices.contains(&res.ca_index) {
                return fail(format!("residue {ri}: CA index not among its atoms"));
            }
            let mut names = HashSet::new();
            for &ai in &res.atom_indices {
                let Some(atom) = self.atoms.get(ai) else {
                    return fail(format!("residue {ri}: atom index {ai} out of range"));
                };
                if atom.residue_index != ri {
                    return fail(format!("atom {ai} claims residue {} but is listed in {ri}", atom.residue_index));
                }
                if owner[ai].replace(ri).is_some() {
                    return fail(format!("atom {ai} listed twice"));
                }
                if !names.insert(atom.atom_name.as_str()) {
                    return fail(format!("residue {ri}: duplicate atom {}", atom.atom_name));
                }
            }
            if self.atoms[res.ca_index].atom_name != "CA" {
                return fail(format!("residue {ri}: ca_index does not point at a CA"));
            }
        }
        for (ai, atom) in self.atoms.iter().enumerate() {
            if owner[ai].is_none() {
                return fail(format!("atom {ai} belongs to no residue"));
            }
            if !atom.position.iter().all(|v| v.is_finite()) {
                return fail(format!("atom {ai} has a non-finite position"));
            }
            if atom.sasa_label.is_some_and(|s| !(s >= 0.0)) {
                return fail(format!("atom {ai} has a negative SASA label"));
            }
        }
        Ok(())
    }
}

/// One atom handed to [`ChainBuilder::push_atom`].
#[derive(Debug, Clone)]
pub struct AtomRecord {
    pub name: String,
    pub element: String,
    pub position: Vec3,
    pub sasa: Option<f64>,
    pub label: Option<bool>,
}

impl AtomRecord {
    pub fn new(name: &str, element: &str, position: Vec3) -> Self {
        Self {
            name: name.to_string(),
            element: element.to_string(),
            position,
            sasa: None,
            label: None,
        }
    }
}

/// Assembles a [`ProteinChain`] residue by residue.
#[derive(Debug, Default)]
pub struct ChainBuilder {
    chain_id: String,
    residues: Vec<(AminoAcidType, i32, Option<char>, Vec<AtomRecord>)>,
}

impl ChainBuilder {
    pub fn new(chain_id: &str) -> Self {
        Self {
            chain_id: chain_id.to_string(),
            residues: Vec::new(),
        }
    }

    pub fn push_residue(&mut self, aa: AminoAcidType, seq: i32, icode: Option<char>) {
        self.residues.push((aa, seq, icode, Vec::new()));
    }

    /// Adds an atom to the most recent residue; duplicate names are ignored.
    pub fn push_atom(&mut self, atom: AtomRecord) {
        let res = self.residues.last_mut().expect("push_residue first");
        if res.3.iter().all(|a| a.name != atom.name) {
            res.3.push(atom);
        }
    }

    /// Builds the chain, dropping residues without a CA. Returns the chain
    /// and the number of dropped residues.
    pub fn build(self) -> (ProteinChain, usize) {
        let mut chain = ProteinChain {
            chain_id: self.chain_id,
            residues: Vec::new(),
            atoms: Vec::new(),
        };
        let mut dropped = 0;
        for (aa, seq, icode, atoms) in self.residues {
            if !atoms.iter().any(|a| a.name == "CA") {
                dropped += 1;
                continue;
            }
            let ri = chain.residues.len();
            let mut indices = Vec::with_capacity(atoms.len());
            let mut ca_index = 0;
            for a in atoms {
                let ai = chain.atoms.len();
                if a.name == "CA" {
                    ca_index = ai;
                }
                indices.push(ai);
                chain.atoms.push(Atom {
                    element: a.element,
                    atom_name: a.name,
                    position: a.position,
                    residue_index: ri,
                    sasa_label: a.sasa,
                    label: a.label,
                });
            }
            chain.residues.push(Residue {
                amino_acid: aa,
                seq_position: seq,
                insertion_code: icode,
                atom_indices: indices,
                ca_index,
            });
        }
        (chain, dropped)
    }
}
