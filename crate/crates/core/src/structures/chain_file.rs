//! Canonical chain JSON, the interchange format between every stage.
//!
//! ```json
//! {"chain_id": "A",
//!  "residues": [{"aa": "MET", "seq": 1,
//!                "atoms": [{"name": "N", "element": "N", "xyz": [38.198, 19.582, 28.998]}]}]}
//! ```
//!
//! Atoms may carry an optional `"sasa"` label (Å²) and an optional binary
//! `"label"` used by node-classification fine-tuning.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AminoAcidType, AtomRecord, ChainBuilder, ProteinChain, Vec3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainFile {
    pub chain_id: String,
    pub residues: Vec<ResidueEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidueEntry {
    pub aa: String,
    pub seq: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icode: Option<char>,
    pub atoms: Vec<AtomEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomEntry {
    pub name: String,
    pub element: String,
    pub xyz: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sasa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

impl From<&ProteinChain> for ChainFile {
    fn from(chain: &ProteinChain) -> Self {
        let residues = chain
            .residues
            .iter()
            .map(|r| ResidueEntry {
                aa: r.amino_acid.three_letter().to_string(),
                seq: r.seq_position,
                icode: r.insertion_code,
                atoms: r
                    .atom_indices
                    .iter()
                    .map(|&i| {
                        let a = &chain.atoms[i];
                        AtomEntry {
                            name: a.atom_name.clone(),
                            element: a.element.clone(),
                            xyz: [a.position.x, a.position.y, a.position.z],
                            sasa: a.sasa_label,
                            label: a.label.map(u8::from),
                        }
                    })
                    .collect(),
            })
            .collect();
        ChainFile {
            chain_id: chain.chain_id.clone(),
            residues,
        }
    }
}

impl TryFrom<ChainFile> for ProteinChain {
    type Error = Error;

    fn try_from(file: ChainFile) -> Result<Self> {
        let mut b = ChainBuilder::new(&file.chain_id);
        for (i, r) in file.residues.into_iter().enumerate() {
            let aa = AminoAcidType::from_three_letter(&r.aa)
                .ok_or_else(|| Error::Dataset(format!("residue {i}: unknown amino acid '{}'", r.aa)))?;
            b.push_residue(aa, r.seq, r.icode);
            for a in r.atoms {
                if !a.xyz.iter().all(|v| v.is_finite()) {
                    return Err(Error::Dataset(format!("residue {i}: non-finite coordinate")));
                }
                let label = match a.label {
                    None => None,
                    Some(0) => Some(false),
                    Some(1) => Some(true),
                    Some(v) => return Err(Error::Dataset(format!("residue {i}: label {v} is not 0/1"))),
                };
                b.push_atom(AtomRecord {
                    name: a.name,
                    element: a.element,
                    position: Vec3::from(a.xyz),
                    sasa: a.sasa,
                    label,
                });
            }
        }
        let (chain, dropped) = b.build();
        if dropped > 0 {
            log::warn!("chain {}: dropped {dropped} residue(s) without CA", chain.chain_id);
        }
        chain.validate()?;
        Ok(chain)
    }
}

pub fn to_json(chain: &ProteinChain) -> Result<String> {
    Ok(serde_json::to_string(&ChainFile::from(chain))?)
}

pub fn from_json(text: &str) -> Result<ProteinChain> {
    let file: ChainFile = serde_json::from_str(text)?;
    ProteinChain::try_from(file)
}

pub fn read_chain(path: &Path) -> Result<ProteinChain> {
    from_json(&fs::read_to_string(path)?)
}

pub fn write_chain(path: &Path, chain: &ProteinChain) -> Result<()> {
    fs::write(path, to_json(chain)?)?;
    Ok(())
}
