//! Fixed-column PDB reader (ATOM records of the first model only).

use std::collections::BTreeMap;

use super::{AminoAcidType, AtomRecord, ChainBuilder, ProteinChain, Vec3};
use crate::error::{Error, Result};

/// Parsed chains plus counts of what was skipped.
#[derive(Debug, Clone, Default)]
pub struct ParseOutput {
    pub chains: Vec<ProteinChain>,
    /// Residues dropped because they had no alpha carbon.
    pub dropped_no_ca: usize,
    pub skipped_hydrogens: usize,
    pub skipped_altloc: usize,
    pub skipped_nonstandard: usize,
}

fn column(line: &str, start: usize, end: usize) -> &str {
    // 1-based inclusive columns; short lines yield the available prefix.
    let bytes = line.as_bytes();
    let s = (start - 1).min(bytes.len());
    let e = end.min(bytes.len());
    line.get(s..e).unwrap_or("")
}

fn infer_element(name: &str) -> String {
    name.chars()
        .find(|c| c.is_ascii_alphabetic())
        .map(|c| c.to_ascii_uppercase().to_string())
        .unwrap_or_default()
}

type ResidueKey = (i32, char);

#[derive(Default)]
struct ChainAccum {
    residues: BTreeMap<ResidueKey, (AminoAcidType, Vec<AtomRecord>)>,
}

/// Parses PDB text into one chain per chain identifier (in order of first
/// appearance), optionally keeping only `chain_filter`.
pub fn parse_pdb(text: &str, chain_filter: Option<&str>) -> Result<ParseOutput> {
    let mut out = ParseOutput::default();
    let mut order: Vec<String> = Vec::new();
    let mut chains: BTreeMap<String, ChainAccum> = BTreeMap::new();
    let mut saw_atom = false;
    let mut model_seen = false;

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let record = column(line, 1, 6);
        if record.starts_with("MODEL") {
            if model_seen {
                break;
            }
            model_seen = true;
            continue;
        }
        if record.starts_with("ENDMDL") {
            break;
        }
        if record != "ATOM  " && record.trim_end() != "ATOM" {
            continue;
        }
        saw_atom = true;

        let chain_id = column(line, 22, 22).trim().to_string();
        if chain_filter.is_some_and(|f| f != chain_id) {
            continue;
        }
        let coord = |s: usize, e: usize, axis: &str| -> Result<f64> {
            let raw = column(line, s, e).trim();
            raw.parse::<f64>().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("malformed {axis} coordinate '{raw}'"),
            })
        };
        let position = Vec3::new(coord(31, 38, "x")?, coord(39, 46, "y")?, coord(47, 54, "z")?);

        let altloc = column(line, 17, 17);
        if !(altloc.trim().is_empty() || altloc == "A") {
            out.skipped_altloc += 1;
            continue;
        }
        let name = column(line, 13, 16).trim().to_string();
        let mut element = column(line, 77, 78).trim().to_ascii_uppercase();
        if element.is_empty() {
            element = infer_element(&name);
        }
        if element == "H" || element == "D" {
            out.skipped_hydrogens += 1;
            continue;
        }
        let resname = column(line, 18, 20).trim();
        let Some(aa) = AminoAcidType::from_three_letter(resname).filter(|a| a.is_standard()) else {
            out.skipped_nonstandard += 1;
            continue;
        };
        let seq_raw = column(line, 23, 26).trim();
        let seq: i32 = seq_raw.parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("malformed residue number '{seq_raw}'"),
        })?;
        let icode = column(line, 27, 27).chars().next().unwrap_or(' ');

        if !chains.contains_key(&chain_id) {
            order.push(chain_id.clone());
        }
        let acc = chains.entry(chain_id).or_default();
        let entry = acc.residues.entry((seq, icode)).or_insert_with(|| (aa, Vec::new()));
        if entry.1.iter().all(|a| a.name != name) {
            entry.1.push(AtomRecord::new(&name, &element, position));
        }
    }

    for id in order {
        let acc = chains.remove(&id).expect("recorded");
        let mut builder = ChainBuilder::new(&id);
        for ((seq, icode), (aa, atoms)) in acc.residues {
            builder.push_residue(aa, seq, (icode != ' ').then_some(icode));
            for a in atoms {
                builder.push_atom(a);
            }
        }
        let (chain, dropped) = builder.build();
        out.dropped_no_ca += dropped;
        if chain.n_residues() > 0 {
            out.chains.push(chain);
        }
    }
    if dropped_everything(saw_atom, &out) {
        return Err(Error::EmptyResult(match chain_filter {
            Some(c) => format!("no usable ATOM records for chain '{c}'"),
            None => "ATOM records present but no residue survived filtering".into(),
        }));
    }
    if out.dropped_no_ca > 0 {
        log::warn!("dropped {} residue(s) without an alpha carbon", out.dropped_no_ca);
    }
    Ok(out)
}

fn dropped_everything(saw_atom: bool, out: &ParseOutput) -> bool {
    saw_atom && out.chains.is_empty()
}
