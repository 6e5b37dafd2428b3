//! Deterministic synthetic chains with ideal backbone geometry.
//!
//! Backbone atoms are grown with the natural-extension reference frame from
//! ideal bond lengths and angles and trans peptide bonds, so consecutive
//! CA–CA distances are all ≈3.80 Å. Backbone (φ, ψ) pairs are drawn from
//! residue-type dependent basins, and side-chain atoms (up to four) are
//! placed from drawn χ rotamers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::residue_constants::{chi_atoms, element_of, sidechain_atoms};
use super::{AminoAcidType, AtomRecord, ChainBuilder, ProteinChain, Vec3};
use crate::error::{Error, Result};

const N_CA: f64 = 1.458;
const CA_C: f64 = 1.525;
const C_N: f64 = 1.329;
const C_O: f64 = 1.231;
const ANGLE_N_CA_C: f64 = 111.2;
const ANGLE_CA_C_N: f64 = 116.2;
const ANGLE_C_N_CA: f64 = 121.7;
const ANGLE_CA_C_O: f64 = 120.5;
/// Minimum separation between non-adjacent CA atoms.
const MIN_CA_SEPARATION: f64 = 4.0;

/// Places `d` so that |cd| = `bond`, ∠bcd = `angle`, and dihedral abcd =
/// `torsion` (degrees).
pub fn place_atom(a: Vec3, b: Vec3, c: Vec3, bond: f64, angle: f64, torsion: f64) -> Vec3 {
    let (angle, torsion) = (angle.to_radians(), torsion.to_radians());
    let bc = (c - b).normalize();
    let n = (b - a).cross(&bc).normalize();
    let m = n.cross(&bc);
    let d2 = Vec3::new(
        -bond * angle.cos(),
        bond * angle.sin() * torsion.cos(),
        bond * angle.sin() * torsion.sin(),
    );
    c + bc * d2.x + m * d2.y + n * d2.z
}

fn backbone_basin(aa: AminoAcidType, rng: &mut ChaCha8Rng) -> (f64, f64) {
    use AminoAcidType::*;
    const HELIX: (f64, f64) = (-63.0, -42.0);
    const SHEET: (f64, f64) = (-120.0, 130.0);
    const LEFT: (f64, f64) = (75.0, 20.0);
    let u: f64 = rng.random();
    match aa {
        Ala | Leu | Glu | Met | Gln | Lys | Arg => {
            if u < 0.8 {
                HELIX
            } else {
                SHEET
            }
        }
        Val | Ile | Tyr | Phe | Trp | Thr => {
            if u < 0.8 {
                SHEET
            } else {
                HELIX
            }
        }
        Gly => {
            if u < 0.4 {
                LEFT
            } else if u < 0.7 {
                HELIX
            } else {
                SHEET
            }
        }
        Pro => {
            if u < 0.5 {
                (-65.0, -40.0)
            } else {
                (-65.0, 140.0)
            }
        }
        _ => {
            if u < 0.5 {
                HELIX
            } else {
                SHEET
            }
        }
    }
}

fn draw_chis(rng: &mut ChaCha8Rng, jitter: &Normal<f64>) -> [f64; 4] {
    let mut chis = [0.0; 4];
    for c in &mut chis {
        let base = [-60.0, 180.0, 60.0][rng.random_range(0..3)];
        *c = base + jitter.sample(rng);
    }
    chis
}

struct BackboneResidue {
    n: Vec3,
    ca: Vec3,
    c: Vec3,
}

/// Side-chain atom placement: reference atoms and the dihedral that fixes it.
fn sidechain_geometry(aa: AminoAcidType, name: &str, chis: &[f64; 4]) -> ([&'static str; 3], f64) {
    if name == "CB" {
        return (["C", "N", "CA"], -122.6);
    }
    // The atom closing a χ quadruple takes χ exactly; siblings are offset.
    for (k, quad) in chi_atoms(aa).iter().enumerate() {
        if quad[3] == name {
            return ([quad[0], quad[1], quad[2]], chis[k]);
        }
    }
    let branch = name.as_bytes().get(1).copied();
    match branch {
        Some(b'G') => (["N", "CA", "CB"], chis[0] - 120.0),
        Some(b'D') => {
            let parent = if aa == AminoAcidType::Ile { "CG1" } else { "CG" };
            (["CA", "CB", parent], chis[1] + 180.0)
        }
        _ => (["CB", "CG", "CD"], chis[2] + 180.0),
    }
}

fn bond_length(a: &str, b: &str) -> f64 {
    let (ea, eb) = (element_of(a), element_of(b));
    if ea == "S" || eb == "S" {
        1.81
    } else if ea == "O" || eb == "O" {
        1.43
    } else if ea == "N" || eb == "N" {
        1.47
    } else {
        1.52
    }
}

/// Deterministic chain of `n_residues` residues from `seed`.
pub fn generate_synthetic_chain(n_residues: usize, seed: u64) -> Result<ProteinChain> {
    if n_residues < 2 {
        return Err(Error::Argument(format!("synthetic chain needs at least 2 residues, got {n_residues}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 8.0).expect("valid");
    let chi_jitter = Normal::new(0.0, 10.0).expect("valid");

    let types: Vec<AminoAcidType> = (0..n_residues)
        .map(|_| AminoAcidType::STANDARD[rng.random_range(0..20)])
        .collect();

    let mut bb: Vec<BackboneResidue> = Vec::with_capacity(n_residues);
    let n0 = Vec3::zeros();
    let ca0 = Vec3::new(N_CA, 0.0, 0.0);
    let t = ANGLE_N_CA_C.to_radians();
    let c0 = ca0 + Vec3::new(-t.cos(), t.sin(), 0.0) * CA_C;
    bb.push(BackboneResidue { n: n0, ca: ca0, c: c0 });
    let mut psis = Vec::with_capacity(n_residues);

    // Grow one residue at a time; when a residue cannot be placed without a
    // clash, back up a few residues and regrow.
    let mut failures = 0usize;
    while bb.len() < n_residues {
        let i = bb.len();
        let prev = bb.last().expect("seeded");
        let mut placed = None;
        for _ in 0..60 {
            let (_, psi0) = backbone_basin(types[i - 1], &mut rng);
            let (phi0, _) = backbone_basin(types[i], &mut rng);
            let psi = psi0 + jitter.sample(&mut rng);
            let phi = phi0 + jitter.sample(&mut rng);
            let n = place_atom(prev.n, prev.ca, prev.c, C_N, ANGLE_CA_C_N, psi);
            let ca = place_atom(prev.ca, prev.c, n, N_CA, ANGLE_C_N_CA, 180.0);
            let c = place_atom(prev.c, n, ca, CA_C, ANGLE_N_CA_C, phi);
            let clash = bb[..bb.len() - 1]
                .iter()
                .any(|r| (r.ca - ca).norm() < MIN_CA_SEPARATION);
            if !clash {
                placed = Some((psi, BackboneResidue { n, ca, c }));
                break;
            }
        }
        match placed {
            Some((psi, res)) => {
                psis.push(psi);
                bb.push(res);
            }
            None => {
                failures += 1;
                if failures > 2000 {
                    return Err(Error::Argument(format!(
                        "could not grow a self-avoiding backbone (seed {seed})"
                    )));
                }
                let back = (1 + failures % 6).min(bb.len() - 1);
                bb.truncate(bb.len() - back);
                psis.truncate(bb.len() - 1);
            }
        }
    }
    let last_psi = backbone_basin(types[n_residues - 1], &mut rng).1 + jitter.sample(&mut rng);
    psis.push(last_psi);

    let mut builder = ChainBuilder::new("A");
    for (i, (aa, res)) in types.iter().zip(&bb).enumerate() {
        builder.push_residue(*aa, i as i32 + 1, None);
        let o = match bb.get(i + 1) {
            Some(next) => place_atom(next.n, res.ca, res.c, C_O, ANGLE_CA_C_O, 180.0),
            None => place_atom(res.n, res.ca, res.c, C_O, ANGLE_CA_C_O, psis[i] + 180.0),
        };
        let mut placed: Vec<(&str, Vec3)> = vec![("N", res.n), ("CA", res.ca), ("C", res.c), ("O", o)];
        let chis = draw_chis(&mut rng, &chi_jitter);
        for &name in sidechain_atoms(*aa) {
            let (refs, torsion) = sidechain_geometry(*aa, name, &chis);
            let find = |n: &str| placed.iter().find(|(m, _)| *m == n).map(|(_, p)| *p).expect("reference placed");
            let (a, b, c) = (find(refs[0]), find(refs[1]), find(refs[2]));
            let pos = place_atom(a, b, c, bond_length(refs[2], name), 111.0, torsion);
            placed.push((name, pos));
        }
        for (name, pos) in placed {
            builder.push_atom(AtomRecord::new(name, element_of(name), pos));
        }
    }
    let (chain, dropped) = builder.build();
    debug_assert_eq!(dropped, 0);
    Ok(chain)
}
