//! Span masking of residues and consecutive-residue coordinate noise.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structures::residue_constants::is_backbone;
use crate::structures::{AminoAcidType, ProteinChain, Vec3};

/// Which atoms of a masked residue survive, and how residues are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Poisson-length spans; only the CA of a masked residue is kept.
    #[default]
    Smpc,
    /// Poisson-length spans; backbone N, CA, C, O are kept, side chains dropped.
    Sidechain,
    /// Independent per-residue Bernoulli draws; only the CA is kept.
    Random,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smpc" => Ok(Self::Smpc),
            "sidechain" => Ok(Self::Sidechain),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown mask mode '{other}' (expected smpc, sidechain or random)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub mask_fraction: f64,
    pub span_lambda: f64,
    pub noise_fraction: f64,
    pub noise_span_lambda: f64,
    /// Per-component standard deviation, Å.
    pub noise_sigma: f64,
    pub mode: MaskMode,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mask_fraction: 0.30,
            span_lambda: 6.0,
            noise_fraction: 0.30,
            noise_span_lambda: 6.0,
            noise_sigma: 0.5,
            mode: MaskMode::Smpc,
            seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("mask_fraction", self.mask_fraction), ("noise_fraction", self.noise_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {f}")));
            }
        }
        for (name, l) in [("span_lambda", self.span_lambda), ("noise_span_lambda", self.noise_span_lambda)] {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {l}")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be non-negative, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Everything needed to reproduce one perturbed sample exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub mode: MaskMode,
    pub smpc_spans: Vec<Range<usize>>,
    pub noise_spans: Vec<Range<usize>>,
    /// One displacement per noised atom, in atom order of the masked chain, Å.
    pub noise_displacements: Vec<[f64; 3]>,
}

/// Companion of a masked chain: what was hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    /// Residue indices (shared by the clean and masked chain) that were masked.
    pub masked_residues: Vec<usize>,
    /// True amino acid of each entry of `masked_residues`.
    pub original_types: Vec<AminoAcidType>,
    /// Clean-chain atom index → masked-chain atom index, `None` if removed.
    pub atom_map: Vec<Option<usize>>,
}

/// A noised atom: its index in the perturbed chain plus the true and noisy position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisedAtom {
    pub atom: usize,
    pub real: Vec3,
    pub noisy: Vec3,
}

#[derive(Debug, Clone)]
pub struct MaskedSample {
    pub chain: ProteinChain,
    pub record: MaskRecord,
    pub noised: Vec<NoisedAtom>,
}

fn draw_length<R: Rng + ?Sized>(poisson: &Poisson<f64>, rng: &mut R) -> usize {
    loop {
        let l = poisson.sample(rng) as usize;
        if l >= 1 {
            return l;
        }
    }
}

/// Free gaps between the (sorted) accepted spans.
fn free_gaps(n: usize, taken: &[Range<usize>]) -> Vec<Range<usize>> {
    let mut gaps = Vec::new();
    let mut cursor = 0;
    for s in taken {
        if s.start > cursor {
            gaps.push(cursor..s.start);
        }
        cursor = cursor.max(s.end);
    }
    if cursor < n {
        gaps.push(cursor..n);
    }
    gaps
}

/// Disjoint residue spans covering exactly `⌊target_fraction·n⌋` residues,
/// returned sorted by start.
///
/// Lengths are Poisson(`lambda`) with zero draws redrawn. Each span starts
/// uniformly among the positions that do not overlap earlier spans; the last
/// span is cut short to hit the target. If a drawn length fits nowhere it is
/// shrunk to the largest free gap.
pub fn sample_spans<R: Rng + ?Sized>(n_residues: usize, target_fraction: f64, lambda: f64, rng: &mut R) -> Result<Vec<Range<usize>>> {
    if n_residues == 0 {
        return Err(Error::Argument("cannot sample spans over zero residues".into()));
    }
    let poisson = Poisson::new(lambda).map_err(|e| Error::Argument(format!("span lambda {lambda}: {e}")))?;
    let target = ((target_fraction * n_residues as f64) + 1e-9).floor() as usize;
    let target = target.min(n_residues);
    let mut spans: Vec<Range<usize>> = Vec::new();
    let mut covered = 0;
    while covered < target {
        let mut len = draw_length(&poisson, rng).min(target - covered);
        let gaps = free_gaps(n_residues, &spans);
        let widest = gaps.iter().map(|g| g.len()).max().unwrap_or(0);
        len = len.min(widest);
        let n_starts: usize = gaps.iter().map(|g| g.len().saturating_sub(len - 1)).sum();
        let mut pick = rng.random_range(0..n_starts);
        let mut start = 0;
        for g in &gaps {
            let here = g.len().saturating_sub(len - 1);
            if pick < here {
                start = g.start + pick;
                break;
            }
            pick -= here;
        }
        let pos = spans.partition_point(|s| s.start < start);
        spans.insert(pos, start..start + len);
        covered += len;
    }
    Ok(spans)
}

/// Each residue independently with probability `p`, as single-residue spans.
pub fn sample_random_residues<R: Rng + ?Sized>(n_residues: usize, p: f64, rng: &mut R) -> Vec<Range<usize>> {
    (0..n_residues).filter(|_| rng.random_bool(p.clamp(0.0, 1.0))).map(|i| i..i + 1).collect()
}

fn check_spans(chain: &ProteinChain, spans: &[Range<usize>]) -> Result<()> {
    for s in spans {
        if s.start >= s.end || s.end > chain.n_residues() {
            return Err(Error::Argument(format!(
                "span {}..{} outside chain of {} residues",
                s.start,
                s.end,
                chain.n_residues()
            )));
        }
    }
    Ok(())
}

/// Removes atoms of the residues in `spans` that `keep` rejects and sets
/// their type to MASK.
fn mask_residues(chain: &ProteinChain, spans: &[Range<usize>], keep: impl Fn(&str) -> bool) -> Result<(ProteinChain, MaskRecord)> {
    check_spans(chain, spans)?;
    let mut masked = vec![false; chain.n_residues()];
    for s in spans {
        masked[s.clone()].iter_mut().for_each(|m| *m = true);
    }
    let mut out = ProteinChain {
        chain_id: chain.chain_id.clone(),
        residues: Vec::with_capacity(chain.n_residues()),
        atoms: Vec::with_capacity(chain.n_atoms()),
    };
    let mut atom_map = vec![None; chain.n_atoms()];
    let mut record_res = Vec::new();
    let mut record_types = Vec::new();
    for (ri, res) in chain.residues.iter().enumerate() {
        if masked[ri] && chain.atoms.get(res.ca_index).is_none_or(|a| a.atom_name != "CA") {
            return Err(Error::Invariant(format!("masked residue {ri} has no CA atom")));
        }
        let mut new_res = res.clone();
        new_res.atom_indices.clear();
        for &ai in &res.atom_indices {
            let atom = &chain.atoms[ai];
            if masked[ri] && atom.atom_name != "CA" && !keep(&atom.atom_name) {
                continue;
            }
            let ni = out.atoms.len();
            atom_map[ai] = Some(ni);
            new_res.atom_indices.push(ni);
            out.atoms.push(atom.clone());
        }
        new_res.ca_index = atom_map[res.ca_index].expect("CA is always retained");
        if masked[ri] {
            record_res.push(ri);
            record_types.push(res.amino_acid);
            new_res.amino_acid = AminoAcidType::Mask;
        }
        out.residues.push(new_res);
    }
    Ok((
        out,
        MaskRecord {
            masked_residues: record_res,
            original_types: record_types,
            atom_map,
        },
    ))
}

/// Keeps only the CA of each residue in `spans` and marks it MASK.
pub fn apply_smpc(chain: &ProteinChain, spans: &[Range<usize>]) -> Result<(ProteinChain, MaskRecord)> {
    mask_residues(chain, spans, |_| false)
}

/// Keeps the backbone of each residue in `spans` and marks it MASK.
pub fn apply_sidechain_mask(chain: &ProteinChain, spans: &[Range<usize>]) -> Result<(ProteinChain, MaskRecord)> {
    mask_residues(chain, spans, is_backbone)
}

fn span_atoms(chain: &ProteinChain, spans: &[Range<usize>]) -> Vec<usize> {
    let mut hit = vec![false; chain.n_residues()];
    for s in spans {
        hit[s.clone()].iter_mut().for_each(|h| *h = true);
    }
    let mut atoms: Vec<usize> = chain
        .residues
        .iter()
        .enumerate()
        .filter(|(ri, _)| hit[*ri])
        .flat_map(|(_, r)| r.atom_indices.iter().copied())
        .collect();
    atoms.sort_unstable();
    atoms
}

/// Adds the given displacements to the atoms of the residues in `spans`
/// (atom order). `displacements` must hold one entry per such atom.
pub fn displace(chain: &ProteinChain, spans: &[Range<usize>], displacements: &[[f64; 3]]) -> Result<(ProteinChain, Vec<NoisedAtom>)> {
    check_spans(chain, spans)?;
    let atoms = span_atoms(chain, spans);
    if atoms.len() != displacements.len() {
        return Err(Error::DimensionMismatch {
            what: "noise displacements".into(),
            expected: atoms.len(),
            found: displacements.len(),
        });
    }
    let mut out = chain.clone();
    let mut noised = Vec::with_capacity(atoms.len());
    for (&ai, d) in atoms.iter().zip(displacements) {
        let real = out.atoms[ai].position;
        let noisy = real + Vec3::new(d[0], d[1], d[2]);
        out.atoms[ai].position = noisy;
        noised.push(NoisedAtom { atom: ai, real, noisy });
    }
    Ok((out, noised))
}

fn draw_displacements<R: Rng + ?Sized>(n: usize, sigma: f64, rng: &mut R) -> Result<Vec<[f64; 3]>> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Argument(format!("noise sigma {sigma}: {e}")))?;
    Ok((0..n).map(|_| [normal.sample(rng), normal.sample(rng), normal.sample(rng)]).collect())
}

/// Isotropic Gaussian noise (per-component std `sigma`) on every atom of
/// the residues in `spans`.
pub fn apply_noise<R: Rng + ?Sized>(
    chain: &ProteinChain,
    spans: &[Range<usize>],
    sigma: f64,
    rng: &mut R,
) -> Result<(ProteinChain, Vec<NoisedAtom>)> {
    check_spans(chain, spans)?;
    let d = draw_displacements(span_atoms(chain, spans).len(), sigma, rng)?;
    displace(chain, spans, &d)
}

fn mask_by_mode(chain: &ProteinChain, mode: MaskMode, spans: &[Range<usize>]) -> Result<(ProteinChain, MaskRecord)> {
    match mode {
        MaskMode::Smpc | MaskMode::Random => apply_smpc(chain, spans),
        MaskMode::Sidechain => apply_sidechain_mask(chain, spans),
    }
}

/// Draws a fresh plan for `chain`: masked residues, noise spans (chosen
/// independently, so they may overlap the masked ones) and displacements.
pub fn sample_plan<R: Rng + ?Sized>(chain: &ProteinChain, cfg: &MaskConfig, rng: &mut R) -> Result<MaskPlan> {
    cfg.validate()?;
    let n = chain.n_residues();
    let smpc_spans = match cfg.mode {
        MaskMode::Random => sample_random_residues(n, cfg.mask_fraction, rng),
        _ => sample_spans(n, cfg.mask_fraction, cfg.span_lambda, rng)?,
    };
    let noise_spans = sample_spans(n, cfg.noise_fraction, cfg.noise_span_lambda, rng)?;
    let (masked, _) = mask_by_mode(chain, cfg.mode, &smpc_spans)?;
    let noise_displacements = draw_displacements(span_atoms(&masked, &noise_spans).len(), cfg.noise_sigma, rng)?;
    Ok(MaskPlan {
        mode: cfg.mode,
        smpc_spans,
        noise_spans,
        noise_displacements,
    })
}

/// Applies a plan: masking first, then noise on whatever atoms remain.
pub fn apply_plan(chain: &ProteinChain, plan: &MaskPlan) -> Result<MaskedSample> {
    let (masked, record) = mask_by_mode(chain, plan.mode, &plan.smpc_spans)?;
    let (noisy, noised) = displace(&masked, &plan.noise_spans, &plan.noise_displacements)?;
    Ok(MaskedSample {
        chain: noisy,
        record,
        noised,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structures::generate_synthetic_chain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn total(spans: &[Range<usize>]) -> usize {
        spans.iter().map(|s| s.len()).sum()
    }

    #[test]
    fn zero_fraction_gives_no_spans() {
        assert!(sample_spans(50, 0.0, 6.0, &mut rng(1)).unwrap().is_empty());
    }

    #[test]
    fn exact_target_and_disjoint() {
        for seed in 0..50 {
            let spans = sample_spans(300, 0.3, 6.0, &mut rng(seed)).unwrap();
            assert_eq!(total(&spans), 90);
            for w in spans.windows(2) {
                assert!(w[0].end <= w[1].start);
            }
            assert!(spans.iter().all(|s| s.end <= 300 && !s.is_empty()));
        }
    }

    #[test]
    fn full_coverage_and_tiny_chains() {
        let spans = sample_spans(7, 1.0, 6.0, &mut rng(3)).unwrap();
        assert_eq!(total(&spans), 7);
        assert!(sample_spans(1, 0.3, 6.0, &mut rng(3)).unwrap().is_empty());
        assert!(sample_spans(0, 0.3, 6.0, &mut rng(3)).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let a = sample_spans(20, 0.3, 6.0, &mut rng(9)).unwrap();
        let b = sample_spans(20, 0.3, 6.0, &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn smpc_keeps_only_ca() {
        let chain = generate_synthetic_chain(12, 2).unwrap();
        let (masked, rec) = apply_smpc(&chain, &[2..5]).unwrap();
        masked.validate().unwrap();
        for ri in 2..5 {
            let r = &masked.residues[ri];
            assert_eq!(r.atom_indices.len(), 1);
            assert_eq!(masked.atoms[r.ca_index].atom_name, "CA");
            assert_eq!(r.amino_acid, AminoAcidType::Mask);
        }
        assert_eq!(rec.masked_residues, vec![2, 3, 4]);
        assert_eq!(rec.original_types, (2..5).map(|i| chain.residues[i].amino_acid).collect::<Vec<_>>());
        for ri in [0, 1, 5, 11] {
            let a: Vec<_> = chain.residues[ri].atom_indices.iter().map(|&i| &chain.atoms[i]).collect();
            let b: Vec<_> = masked.residues[ri].atom_indices.iter().map(|&i| &masked.atoms[i]).collect();
            assert_eq!(a, b);
            assert_eq!(chain.residues[ri].amino_acid, masked.residues[ri].amino_acid);
        }
        let (same, _) = apply_smpc(&chain, &[]).unwrap();
        assert_eq!(same, chain);
    }

    #[test]
    fn sidechain_mode_keeps_backbone() {
        let chain = generate_synthetic_chain(8, 5).unwrap();
        let (masked, _) = apply_sidechain_mask(&chain, &[1..3]).unwrap();
        for ri in 1..3 {
            let names: Vec<&str> = masked.residues[ri]
                .atom_indices
                .iter()
                .map(|&i| masked.atoms[i].atom_name.as_str())
                .collect();
            assert_eq!(names, ["N", "CA", "C", "O"]);
        }
    }

    #[test]
    fn out_of_range_span_rejected() {
        let chain = generate_synthetic_chain(5, 2).unwrap();
        assert!(apply_smpc(&chain, &[3..9]).is_err());
    }

    #[test]
    fn zero_sigma_is_identity() {
        let chain = generate_synthetic_chain(10, 2).unwrap();
        let (noisy, rec) = apply_noise(&chain, &[1..4], 0.0, &mut rng(1)).unwrap();
        assert_eq!(noisy, chain);
        assert!(rec.iter().all(|n| n.real == n.noisy));
        assert!(!rec.is_empty());
    }

    #[test]
    fn noise_touches_only_span_atoms() {
        let chain = generate_synthetic_chain(10, 2).unwrap();
        let (noisy, rec) = apply_noise(&chain, &[3..5], 0.5, &mut rng(4)).unwrap();
        let touched: Vec<usize> = rec.iter().map(|n| n.atom).collect();
        for (i, (a, b)) in chain.atoms.iter().zip(&noisy.atoms).enumerate() {
            let in_span = (3..5).contains(&a.residue_index);
            assert_eq!(in_span, touched.contains(&i));
            assert_eq!(in_span, a.position != b.position);
        }
    }

    #[test]
    fn plan_round_trips_through_json() {
        let chain = generate_synthetic_chain(40, 6).unwrap();
        let cfg = MaskConfig::default();
        let plan = sample_plan(&chain, &cfg, &mut rng(8)).unwrap();
        let text = serde_json::to_string(&plan).unwrap();
        let back: MaskPlan = serde_json::from_str(&text).unwrap();
        assert_eq!(back, plan);
        let a = apply_plan(&chain, &plan).unwrap();
        let b = apply_plan(&chain, &back).unwrap();
        assert_eq!(a.chain, b.chain);
        assert_eq!(a.record.masked_residues.len(), 12);
    }

    #[test]
    fn overlapping_noise_moves_retained_ca() {
        let chain = generate_synthetic_chain(10, 2).unwrap();
        let plan = MaskPlan {
            mode: MaskMode::Smpc,
            smpc_spans: vec![4..6],
            noise_spans: vec![5..6],
            noise_displacements: vec![[0.1, 0.0, 0.0]],
        };
        let s = apply_plan(&chain, &plan).unwrap();
        let ca = s.chain.residues[5].ca_index;
        assert_eq!(s.noised[0].atom, ca);
        assert!((s.chain.atoms[ca].position - chain.ca_position(5) - Vec3::new(0.1, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn random_mode_masks_singletons() {
        let chain = generate_synthetic_chain(60, 1).unwrap();
        let cfg = MaskConfig {
            mode: MaskMode::Random,
            ..Default::default()
        };
        let plan = sample_plan(&chain, &cfg, &mut rng(2)).unwrap();
        assert!(plan.smpc_spans.iter().all(|s| s.len() == 1));
        assert!(!plan.smpc_spans.is_empty());
    }

    #[test]
    fn config_validation() {
        let mut cfg = MaskConfig::default();
        cfg.validate().unwrap();
        cfg.mask_fraction = 1.5;
        assert!(cfg.validate().is_err());
        cfg = MaskConfig {
            noise_sigma: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!("sidechain".parse::<MaskMode>().unwrap(), MaskMode::Sidechain);
        assert!("bogus".parse::<MaskMode>().is_err());
    }
}
