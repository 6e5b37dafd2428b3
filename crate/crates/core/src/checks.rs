//! Self-checks of the numerical and statistical invariants, individually
//! selectable and shared by the CLI `check` command and the test suites.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use vabs_autodiff::{relative_error, Tape};

use crate::encodings::featurize;
use crate::error::{Error, Result};
use crate::geometry::local_frame;
use crate::geometry::sasa::shrake_rupley_radii;
use crate::graph::{build_bilevel_graph, knn_all, KnnIndex};
use crate::masking::{apply_noise, apply_plan, sample_plan, MaskConfig};
use crate::model::{ForwardTrace, VabsNet, VabsNetConfig};
use crate::structures::{generate_synthetic_chain, random_rotation, AminoAcidType, ProteinChain, Vec3};
use crate::training::{derive_seed, prepare_pretrain_sample, pretrain_sample_loss, Example};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Gradients,
    Frames,
    Rotation,
    Mask,
    Noise,
    Knn,
    Sasa,
    Attention,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Gradients,
        Suite::Frames,
        Suite::Rotation,
        Suite::Mask,
        Suite::Noise,
        Suite::Knn,
        Suite::Sasa,
        Suite::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradients => "gradients",
            Suite::Frames => "frames",
            Suite::Rotation => "rotation",
            Suite::Mask => "mask",
            Suite::Noise => "noise",
            Suite::Knn => "knn",
            Suite::Sasa => "sasa",
            Suite::Attention => "attention",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Suite::ALL.iter().map(|x| x.name()).collect();
                Error::Argument(format!("unknown suite '{s}' (expected one of: {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub suite: Suite,
    pub passed: bool,
    pub summary: String,
}

/// Runs one suite at its full size.
pub fn run_suite(suite: Suite, seed: u64) -> Result<CheckOutcome> {
    let (passed, summary) = match suite {
        Suite::Gradients => {
            let r = model_gradient_check(10, 2, 32, seed)?;
            (r.max_rel_error < 1e-4, format!("{} coordinates, max relative error {:.3e}", r.n_checked, r.max_rel_error))
        }
        Suite::Frames => {
            let r = frame_check(1000, seed)?;
            (
                r.max_orthogonality_error < 1e-6 && r.max_det_error < 1e-6,
                format!(
                    "{} frames, |RᵀR − I|∞ ≤ {:.2e}, |det − 1| ≤ {:.2e}",
                    r.n_frames, r.max_orthogonality_error, r.max_det_error
                ),
            )
        }
        Suite::Rotation => {
            let r = rotation_check(20, seed)?;
            (
                r.invariant_max_diff < 1e-4 && r.default_max_diff > 1e-2,
                format!(
                    "{} motions, invariant config max diff {:.2e}, default config max diff {:.2e}",
                    r.n_motions, r.invariant_max_diff, r.default_max_diff
                ),
            )
        }
        Suite::Mask => {
            let s = mask_statistics(1000, 300, seed)?;
            let leak = leak_check(1000, 40, seed)?;
            (
                s.passed() && leak.violations == 0,
                format!(
                    "{} chains, fraction range [{:.4}, {:.4}], mean span {:.3}; {} leak violations over {} masked residues",
                    s.n_chains, s.min_fraction, s.max_fraction, s.mean_span, leak.violations, leak.n_masked
                ),
            )
        }
        Suite::Noise => {
            let r = noise_calibration(12_000, 0.5, seed)?;
            (
                r.std.iter().all(|s| (0.49..=0.51).contains(s)),
                format!("{} atoms, per-axis std {:.4} {:.4} {:.4}", r.n_atoms, r.std[0], r.std[1], r.std[2]),
            )
        }
        Suite::Knn => {
            let r = knn_oracle(200, seed)?;
            (r.mismatches == 0, format!("{} queries over {} instances, {} mismatches", r.n_queries, r.n_instances, r.mismatches))
        }
        Suite::Sasa => {
            let r = sasa_oracle()?;
            (r.passed(), format!(
                "isolated {:.4} Å², buried {:.3e} Å², dimer difference {:.2e}",
                r.isolated, r.buried, r.dimer_difference
            ))
        }
        Suite::Attention => {
            let r = attention_check(seed)?;
            (r.max_deviation < 1e-6, format!("{} segments, max |Σ − 1| {:.2e}", r.n_segments, r.max_deviation))
        }
    };
    Ok(CheckOutcome { suite, passed, summary })
}

/// Adds U(−scale, scale) noise to every parameter so zero-initialized
/// projections stop masking gradients and outputs.
pub fn perturb_params(model: &mut VabsNet, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// A synthetic chain with small Gaussian jitter on every atom, which
/// removes the exact distance ties of ideal geometry.
pub fn jittered_chain(n_residues: usize, seed: u64) -> Result<ProteinChain> {
    let clean = generate_synthetic_chain(n_residues, seed)?;
    let all = [0..n_residues];
    Ok(apply_noise(&clean, &all, 0.05, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[9])))?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientReport {
    pub n_checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
}

/// Central differences against reverse-mode gradients of the full
/// pre-training loss with respect to the model parameters.
///
/// Per parameter tensor the four largest-gradient coordinates and six random
/// coordinates with |∂L/∂w| ≥ 1e-4 are checked; below that magnitude the
/// finite-difference roundoff alone exceeds the tolerance.
pub fn model_gradient_check(n_residues: usize, n_layers: usize, dim: usize, seed: u64) -> Result<GradientReport> {
    const EPS: f64 = 1e-6;
    let cfg = VabsNetConfig {
        n_heads: 4,
        init_seed: seed,
        ..VabsNetConfig::small(n_layers, dim)
    };
    let mut model = VabsNet::new(cfg)?;
    perturb_params(&mut model, derive_seed(seed, &[1]), 0.1);
    let ex = Example::new("grad", jittered_chain(n_residues, seed)?)?;
    let sample = prepare_pretrain_sample(&ex, &model.config, &MaskConfig::default(), derive_seed(seed, &[2]))?;
    let weights = Default::default();

    let loss_at = |m: &VabsNet| -> Result<f64> {
        let mut tape = Tape::new();
        let pv = m.record(&mut tape, false);
        let (l, _) = pretrain_sample_loss(m, &mut tape, &pv, &sample, &weights)?;
        Ok(tape.value(l).item())
    };
    let mut tape = Tape::new();
    let pv = model.record(&mut tape, true);
    let (loss, parts) = pretrain_sample_loss(&model, &mut tape, &pv, &sample, &weights)?;
    let r = parts.report;
    if [r.res_type, r.torsion, r.pos, r.dist, r.sasa].contains(&0.0) {
        return Err(Error::Invariant(format!("a loss component is identically zero: {r:?}")));
    }
    let grads = pv.collect_grads(&tape.backward(loss)?, &model.params);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3]));
    let ids: Vec<_> = model.params.iter().map(|(id, name, _)| (id, name.to_string())).collect();
    let mut report = GradientReport {
        n_checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
    };
    for ((id, name), g) in ids.into_iter().zip(&grads) {
        let gd = g.data();
        let mut by_mag: Vec<usize> = (0..gd.len()).collect();
        by_mag.sort_by(|&a, &b| gd[b].abs().total_cmp(&gd[a].abs()).then(a.cmp(&b)));
        let mut coords: Vec<usize> = by_mag.iter().copied().take(4).collect();
        let eligible: Vec<usize> = by_mag.iter().copied().filter(|&j| gd[j].abs() >= 1e-4).collect();
        for _ in 0..6 {
            if !eligible.is_empty() {
                coords.push(eligible[rng.random_range(0..eligible.len())]);
            }
        }
        coords.sort_unstable();
        coords.dedup();
        for j in coords {
            let orig = model.params.get(id).data()[j];
            model.params.get_mut(id).data_mut()[j] = orig + EPS;
            let up = loss_at(&model)?;
            model.params.get_mut(id).data_mut()[j] = orig - EPS;
            let down = loss_at(&model)?;
            model.params.get_mut(id).data_mut()[j] = orig;
            let err = relative_error(gd[j], (up - down) / (2.0 * EPS));
            report.n_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{name}[{j}]");
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameReport {
    pub n_frames: usize,
    pub max_orthogonality_error: f64,
    pub max_det_error: f64,
}

/// Frames of random backbones: CA anywhere, N and C at backbone bond
/// lengths with an N–CA–C angle drawn from [100°, 125°].
pub fn frame_check(n: usize, seed: u64) -> Result<FrameReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FrameReport {
        n_frames: n,
        max_orthogonality_error: 0.0,
        max_det_error: 0.0,
    };
    for _ in 0..n {
        let ca = Vec3::from_fn(|_, _| rng.random_range(-50.0..50.0));
        let rot = random_rotation(&mut rng);
        let angle = rng.random_range(100.0f64..125.0).to_radians();
        let n_pos = ca + rot * Vec3::new(1.458, 0.0, 0.0);
        let c_pos = ca + rot * Vec3::new(1.525 * angle.cos(), 1.525 * angle.sin(), 0.0);
        let f = local_frame(n_pos, ca, c_pos)?;
        let r = f.rotation;
        let orth = (r.transpose() * r - nalgebra::Matrix3::identity()).abs().max();
        report.max_orthogonality_error = report.max_orthogonality_error.max(orth);
        report.max_det_error = report.max_det_error.max((r.determinant() - 1.0).abs());
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RotationReport {
    pub n_motions: usize,
    pub invariant_max_diff: f64,
    pub default_max_diff: f64,
}

fn node_outputs(model: &VabsNet, chain: &ProteinChain) -> Result<vabs_autodiff::Tensor> {
    let c = &model.config;
    let g = build_bilevel_graph(chain, c.k_atom, c.k_res, c.use_virtual_origin)?;
    let f = featurize(&g, chain, None, c.external_dim, &c.feature_config())?;
    let mut tape = Tape::new();
    let pv = model.record(&mut tape, false);
    let out = model.forward(&mut tape, &pv, &f, &mut ForwardTrace::default())?;
    Ok(tape.value(out.nodes).clone())
}

/// Forward outputs under random rigid motions, for the rotation-invariant
/// and the default configuration.
pub fn rotation_check(n_motions: usize, seed: u64) -> Result<RotationReport> {
    let chain = jittered_chain(12, seed)?;
    let base = VabsNetConfig {
        n_heads: 4,
        init_seed: seed,
        ..VabsNetConfig::small(2, 32)
    };
    let mut inv = VabsNet::new(base.clone().so3_invariant())?;
    let mut dflt = VabsNet::new(base)?;
    perturb_params(&mut inv, derive_seed(seed, &[1]), 0.1);
    perturb_params(&mut dflt, derive_seed(seed, &[1]), 0.1);
    let inv0 = node_outputs(&inv, &chain)?;
    let dflt0 = node_outputs(&dflt, &chain)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    let mut report = RotationReport {
        n_motions,
        invariant_max_diff: 0.0,
        default_max_diff: 0.0,
    };
    for _ in 0..n_motions {
        let r = random_rotation(&mut rng);
        let t = Vec3::from_fn(|_, _| rng.random_range(-20.0..20.0));
        let mut moved = chain.clone();
        moved.atoms.iter_mut().for_each(|a| a.position = r * a.position + t);
        report.invariant_max_diff = report.invariant_max_diff.max(inv0.max_abs_diff(&node_outputs(&inv, &moved)?));
        report.default_max_diff = report.default_max_diff.max(dflt0.max_abs_diff(&node_outputs(&dflt, &moved)?));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskStatistics {
    pub n_chains: usize,
    pub target_fraction: f64,
    pub min_fraction: f64,
    pub max_fraction: f64,
    pub n_spans: usize,
    pub mean_span: f64,
}

impl MaskStatistics {
    pub fn passed(&self) -> bool {
        self.min_fraction == self.target_fraction
            && self.max_fraction == self.target_fraction
            && (5.2..=6.8).contains(&self.mean_span)
    }
}

/// Masked fraction and span lengths over `n_chains` masked chains of
/// `n_residues` residues, with the default (λ = 6, 30 %) configuration.
pub fn mask_statistics(n_chains: usize, n_residues: usize, seed: u64) -> Result<MaskStatistics> {
    let cfg = MaskConfig::default();
    let bases: Vec<ProteinChain> = (0..4)
        .map(|i| generate_synthetic_chain(n_residues, derive_seed(seed, &[i])))
        .collect::<Result<_>>()?;
    let mut stats = MaskStatistics {
        n_chains,
        target_fraction: (cfg.mask_fraction * n_residues as f64).round() / n_residues as f64,
        min_fraction: f64::INFINITY,
        max_fraction: f64::NEG_INFINITY,
        n_spans: 0,
        mean_span: 0.0,
    };
    let mut span_total = 0;
    for i in 0..n_chains {
        let chain = &bases[i % bases.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[10, i as u64]));
        let plan = sample_plan(chain, &cfg, &mut rng)?;
        let sample = apply_plan(chain, &plan)?;
        let frac = sample.record.masked_residues.len() as f64 / n_residues as f64;
        stats.min_fraction = stats.min_fraction.min(frac);
        stats.max_fraction = stats.max_fraction.max(frac);
        stats.n_spans += plan.smpc_spans.len();
        span_total += plan.smpc_spans.iter().map(|s| s.len()).sum::<usize>();
    }
    stats.mean_span = span_total as f64 / stats.n_spans.max(1) as f64;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakReport {
    pub n_samples: usize,
    pub n_masked: usize,
    pub violations: usize,
}

/// Every masked residue must reach the graph as its CA node alone, typed
/// MASK, present in both tracks.
pub fn leak_check(n_samples: usize, n_residues: usize, seed: u64) -> Result<LeakReport> {
    let cfg = VabsNetConfig::small(1, 8);
    let chains: Vec<ProteinChain> = (0..4)
        .map(|i| generate_synthetic_chain(n_residues, derive_seed(seed, &[20, i])))
        .collect::<Result<_>>()?;
    let mask_id = AminoAcidType::Mask.index();
    let mut report = LeakReport {
        n_samples,
        n_masked: 0,
        violations: 0,
    };
    for i in 0..n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[21, i as u64]));
        let chain = &chains[i % chains.len()];
        let plan = sample_plan(chain, &MaskConfig::default(), &mut rng)?;
        let s = apply_plan(chain, &plan)?;
        let g = build_bilevel_graph(&s.chain, cfg.k_atom, cfg.k_res, true)?;
        let f = featurize(&g, &s.chain, None, cfg.external_dim, &cfg.feature_config())?;
        let mut in_atom = vec![false; g.n_nodes()];
        let mut in_res = vec![false; g.n_nodes()];
        for (a, b) in g.atom_edges.iter() {
            in_atom[a] = true;
            in_atom[b] = true;
        }
        for (a, b) in g.res_edges.iter() {
            in_res[a] = true;
            in_res[b] = true;
        }
        for &r in &s.record.masked_residues {
            report.n_masked += 1;
            let res = &s.chain.residues[r];
            let ca = res.ca_index;
            let ok = res.atom_indices == [ca]
                && s.chain.atoms[ca].atom_name == "CA"
                && g.ca_of_residue[r] == ca
                && f.nodes.residue_type[ca] == mask_id
                && in_atom[ca]
                && in_res[ca];
            if !ok {
                report.violations += 1;
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseReport {
    pub n_atoms: usize,
    pub std: [f64; 3],
}

/// Per-axis sample standard deviation of the applied displacements over at
/// least `min_atoms` noised atoms.
pub fn noise_calibration(min_atoms: usize, sigma: f64, seed: u64) -> Result<NoiseReport> {
    let chain = generate_synthetic_chain(60, seed)?;
    let mut d: Vec<[f64; 3]> = Vec::new();
    let mut i = 0u64;
    while d.len() < min_atoms {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[30, i]));
        let (_, noised) = apply_noise(&chain, &[0..chain.n_residues()], sigma, &mut rng)?;
        d.extend(noised.iter().map(|n| {
            let v = n.noisy - n.real;
            [v.x, v.y, v.z]
        }));
        i += 1;
    }
    let n = d.len() as f64;
    let std = [0, 1, 2].map(|a| {
        let mean = d.iter().map(|v| v[a]).sum::<f64>() / n;
        (d.iter().map(|v| (v[a] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    Ok(NoiseReport { n_atoms: d.len(), std })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnnReport {
    pub n_instances: usize,
    pub n_queries: usize,
    pub mismatches: usize,
}

/// Brute-force neighbors sorted by (squared distance, index).
pub fn brute_force_knn(points: &[Vec3], query: usize, k: usize) -> Vec<usize> {
    let mut c: Vec<(f64, usize)> = (0..points.len())
        .filter(|&j| j != query)
        .map(|j| ((points[j] - points[query]).norm_squared(), j))
        .collect();
    c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    c.into_iter().take(k).map(|x| x.1).collect()
}

/// Grid KNN against brute force on random clouds of up to 500 points. Every
/// third instance sits on an integer lattice, where distance ties abound.
pub fn knn_oracle(n_instances: usize, seed: u64) -> Result<KnnReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = KnnReport {
        n_instances,
        n_queries: 0,
        mismatches: 0,
    };
    for inst in 0..n_instances {
        let n = rng.random_range(1..=500);
        let k = [1, 5, 30][inst % 3];
        let lattice = inst % 3 == 2;
        let side = rng.random_range(5.0..40.0f64);
        let points: Vec<Vec3> = (0..n)
            .map(|_| {
                if lattice {
                    Vec3::from_fn(|_, _| rng.random_range(0..6) as f64)
                } else {
                    Vec3::from_fn(|_, _| rng.random::<f64>() * side)
                }
            })
            .collect();
        let cell = if inst % 2 == 0 { KnnIndex::auto_cell(&points) } else { rng.random_range(0.7..6.0) };
        let got = knn_all(&points, k, cell);
        for (q, g) in got.iter().enumerate() {
            report.n_queries += 1;
            if *g != brute_force_knn(&points, q, k) {
                report.mismatches += 1;
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SasaReport {
    pub isolated: f64,
    pub buried: f64,
    pub dimer_difference: f64,
}

impl SasaReport {
    pub fn passed(&self) -> bool {
        (self.isolated - 113.097).abs() <= 0.01 * 113.097 && self.buried == 0.0 && self.dimer_difference < 1e-9
    }
}

pub fn sasa_oracle() -> Result<SasaReport> {
    let isolated = shrake_rupley_radii(&[Vec3::zeros()], &[1.6], 1.4, 960)?.per_atom[0];
    // a small atom inside a large one has no exposed point
    let buried = shrake_rupley_radii(&[Vec3::zeros(), Vec3::new(0.3, 0.0, 0.0)], &[1.0, 6.0], 1.4, 960)?.per_atom[0];
    let mut dimer_difference: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let axis = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
        let half = axis * rng.random_range(0.5..3.0);
        let r = shrake_rupley_radii(&[half, -half], &[1.7, 1.7], 1.4, 960)?;
        dimer_difference = dimer_difference.max((r.per_atom[0] - r.per_atom[1]).abs());
    }
    Ok(SasaReport {
        isolated,
        buried,
        dimer_difference,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionReport {
    pub n_segments: usize,
    pub max_deviation: f64,
}

/// Row sums of every attention weight table (both tracks of every layer
/// and the movement head) on a randomized model.
pub fn attention_check(seed: u64) -> Result<AttentionReport> {
    let mut model = VabsNet::new(VabsNetConfig {
        n_heads: 4,
        init_seed: seed,
        ..VabsNetConfig::small(2, 32)
    })?;
    perturb_params(&mut model, derive_seed(seed, &[1]), 0.5);
    let chain = jittered_chain(15, seed)?;
    let c = &model.config;
    let g = build_bilevel_graph(&chain, c.k_atom, c.k_res, c.use_virtual_origin)?;
    let f = featurize(&g, &chain, None, c.external_dim, &c.feature_config())?;
    let mut tape = Tape::new();
    let pv = model.record(&mut tape, false);
    let mut trace = ForwardTrace::default();
    let out = model.forward(&mut tape, &pv, &f, &mut trace)?;
    model.movement_head(&mut tape, &pv, &f, &out, &mut trace)?;
    let mut report = AttentionReport {
        n_segments: 0,
        max_deviation: 0.0,
    };
    for rec in &trace.attention {
        let w = tape.value(rec.weights);
        let h = w.cols();
        let mut sums = vec![0.0; rec.n_nodes * h];
        let mut seen = vec![false; rec.n_nodes];
        for (e, &d) in rec.dst.iter().enumerate() {
            seen[d] = true;
            for k in 0..h {
                sums[d * h + k] += w.get(e, k);
            }
        }
        for d in (0..rec.n_nodes).filter(|&d| seen[d]) {
            for k in 0..h {
                report.n_segments += 1;
                report.max_deviation = report.max_deviation.max((sums[d * h + k] - 1.0).abs());
            }
        }
    }
    Ok(report)
}
