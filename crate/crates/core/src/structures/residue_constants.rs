//! Per-amino-acid atom tables.

use super::AminoAcidType;

/// Heavy-atom names seen in the standard amino acids, in a fixed order.
/// The position in this list is the atom-type token.
pub const ATOM_NAMES: [&str; 37] = [
    "N", "CA", "C", "CB", "O", "CG", "CG1", "CG2", "OG", "OG1", "SG", "CD", "CD1", "CD2", "ND1", "ND2",
    "OD1", "OD2", "SD", "CE", "CE1", "CE2", "CE3", "NE", "NE1", "NE2", "OE1", "OE2", "CH2", "NH1", "NH2",
    "OH", "CZ", "CZ2", "CZ3", "NZ", "OXT",
];

/// Token for atom names outside [`ATOM_NAMES`].
pub const ATOM_TYPE_UNKNOWN: usize = ATOM_NAMES.len();
/// Token for the virtual origin node.
pub const ATOM_TYPE_ORIGIN: usize = ATOM_NAMES.len() + 1;
pub const N_ATOM_TYPES: usize = ATOM_NAMES.len() + 2;

pub const BACKBONE: [&str; 4] = ["N", "CA", "C", "O"];

pub fn atom_type_id(name: &str) -> usize {
    ATOM_NAMES.iter().position(|n| *n == name).unwrap_or(ATOM_TYPE_UNKNOWN)
}

pub fn is_backbone(name: &str) -> bool {
    BACKBONE.contains(&name) || name == "OXT"
}

/// The four atoms defining each χ angle, standard rotamer-library order.
pub fn chi_atoms(aa: AminoAcidType) -> &'static [[&'static str; 4]] {
    use AminoAcidType::*;
    const CHI1_CG: [&str; 4] = ["N", "CA", "CB", "CG"];
    match aa {
        Arg => &[
            CHI1_CG,
            ["CA", "CB", "CG", "CD"],
            ["CB", "CG", "CD", "NE"],
            ["CG", "CD", "NE", "CZ"],
        ],
        Asn => &[CHI1_CG, ["CA", "CB", "CG", "OD1"]],
        Asp => &[CHI1_CG, ["CA", "CB", "CG", "OD1"]],
        Cys => &[["N", "CA", "CB", "SG"]],
        Gln => &[CHI1_CG, ["CA", "CB", "CG", "CD"], ["CB", "CG", "CD", "OE1"]],
        Glu => &[CHI1_CG, ["CA", "CB", "CG", "CD"], ["CB", "CG", "CD", "OE1"]],
        His => &[CHI1_CG, ["CA", "CB", "CG", "ND1"]],
        Ile => &[["N", "CA", "CB", "CG1"], ["CA", "CB", "CG1", "CD1"]],
        Leu => &[CHI1_CG, ["CA", "CB", "CG", "CD1"]],
        Lys => &[
            CHI1_CG,
            ["CA", "CB", "CG", "CD"],
            ["CB", "CG", "CD", "CE"],
            ["CG", "CD", "CE", "NZ"],
        ],
        Met => &[CHI1_CG, ["CA", "CB", "CG", "SD"], ["CB", "CG", "SD", "CE"]],
        Phe => &[CHI1_CG, ["CA", "CB", "CG", "CD1"]],
        Pro => &[CHI1_CG, ["CA", "CB", "CG", "CD"]],
        Ser => &[["N", "CA", "CB", "OG"]],
        Thr => &[["N", "CA", "CB", "OG1"]],
        Trp => &[CHI1_CG, ["CA", "CB", "CG", "CD1"]],
        Tyr => &[CHI1_CG, ["CA", "CB", "CG", "CD1"]],
        Val => &[["N", "CA", "CB", "CG1"]],
        Ala | Gly | Unk | Mask => &[],
    }
}

pub fn chi_count(aa: AminoAcidType) -> usize {
    chi_atoms(aa).len()
}

/// First (up to four) side-chain heavy atoms in topological order.
pub fn sidechain_atoms(aa: AminoAcidType) -> &'static [&'static str] {
    use AminoAcidType::*;
    match aa {
        Ala => &["CB"],
        Arg => &["CB", "CG", "CD", "NE"],
        Asn => &["CB", "CG", "OD1", "ND2"],
        Asp => &["CB", "CG", "OD1", "OD2"],
        Cys => &["CB", "SG"],
        Gln => &["CB", "CG", "CD", "OE1"],
        Glu => &["CB", "CG", "CD", "OE1"],
        His => &["CB", "CG", "ND1", "CD2"],
        Ile => &["CB", "CG1", "CG2", "CD1"],
        Leu => &["CB", "CG", "CD1", "CD2"],
        Lys => &["CB", "CG", "CD", "CE"],
        Met => &["CB", "CG", "SD", "CE"],
        Phe => &["CB", "CG", "CD1", "CD2"],
        Pro => &["CB", "CG", "CD"],
        Ser => &["CB", "OG"],
        Thr => &["CB", "OG1", "CG2"],
        Trp => &["CB", "CG", "CD1", "CD2"],
        Tyr => &["CB", "CG", "CD1", "CD2"],
        Val => &["CB", "CG1", "CG2"],
        Gly | Unk | Mask => &[],
    }
}

/// Element symbol implied by a heavy-atom name.
pub fn element_of(name: &str) -> &'static str {
    match name.chars().next() {
        Some('N') => "N",
        Some('O') => "O",
        Some('S') => "S",
        _ => "C",
    }
}
