//! Node and edge featurization of a bilevel graph.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{residue_frames, LocalFrame};
use crate::graph::{BilevelGraph, EdgeList};
use crate::structures::residue_constants::{atom_type_id, ATOM_TYPE_ORIGIN, N_ATOM_TYPES};
use crate::structures::{AminoAcidType, ProteinChain, Vec3, RESIDUE_TYPE_ORIGIN};

/// Largest |Δseq| with its own bucket; larger offsets are clipped.
pub const MAX_SEQ_OFFSET: i32 = 32;
/// Bucket for edges touching the origin node.
pub const ORIGIN_BUCKET: usize = 2 * MAX_SEQ_OFFSET as usize + 1;
pub const N_SEQ_BUCKETS: usize = ORIGIN_BUCKET + 1;
/// Ordered (node type, node type) pairs indexing the α/β tables.
pub const N_PAIR_TYPES: usize = N_ATOM_TYPES * N_ATOM_TYPES;
/// Six plane angles per edge.
pub const N_DIRECTION_ANGLES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Number of Gaussian kernels K.
    pub n_kernels: usize,
    /// Kernel width w, Å.
    pub kernel_width: f64,
    /// Fourier frequencies L per angle.
    pub n_freqs: usize,
    /// When false the three global-frame angles are zeroed, as are the local
    /// angles of edges into nodes without a residue frame.
    pub use_global_frame: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_kernels: 16,
            kernel_width: 16.0,
            n_freqs: 4,
            use_global_frame: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_kernels == 0 || self.n_freqs == 0 || !(self.kernel_width > 0.0) {
            return Err(Error::Config(format!(
                "need n_kernels ≥ 1, n_freqs ≥ 1 and kernel_width > 0 (got {}, {}, {})",
                self.n_kernels, self.n_freqs, self.kernel_width
            )));
        }
        Ok(())
    }

    pub fn direction_dim(&self) -> usize {
        N_DIRECTION_ANGLES * 2 * self.n_freqs
    }

    /// Kernel means μ_k = w(k−1)/K, k = 1..K.
    pub fn kernel_means(&self) -> Vec<f64> {
        let k = self.n_kernels as f64;
        (0..self.n_kernels).map(|i| self.kernel_width * i as f64 / k).collect()
    }

    /// Shared kernel standard deviation σ = w/K.
    pub fn kernel_sigma(&self) -> f64 {
        self.kernel_width / self.n_kernels as f64
    }
}

/// g_k = N(α·d + β; μ_k, σ) for k = 1..K.
pub fn gaussian_kernel_encode(distance: f64, alpha: f64, beta: f64, cfg: &FeatureConfig) -> Vec<f64> {
    let x = alpha * distance + beta;
    let sigma = cfg.kernel_sigma();
    let norm = 1.0 / (sigma * (2.0 * PI).sqrt());
    cfg.kernel_means()
        .into_iter()
        .map(|mu| {
            let z = (x - mu) / sigma;
            norm * (-0.5 * z * z).exp()
        })
        .collect()
}

/// [sin 2⁰θ, cos 2⁰θ, …, sin 2^{L−1}θ, cos 2^{L−1}θ].
pub fn fourier_encode(theta: f64, n_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * n_freqs);
    let mut f = 1.0;
    for _ in 0..n_freqs {
        out.push((f * theta).sin());
        out.push((f * theta).cos());
        f *= 2.0;
    }
    out
}

/// Angles of a unit vector against the xy, yz and xz planes.
pub fn plane_angles(v: &Vec3) -> [f64; 3] {
    [v.z.clamp(-1.0, 1.0).asin(), v.x.clamp(-1.0, 1.0).asin(), v.y.clamp(-1.0, 1.0).asin()]
}

/// Fourier-encoded plane angles of the edge `src → dst`: three in the global
/// frame, then three in `frame` (the destination residue's). Either half is
/// zeroed when its flag is false.
pub fn edge_direction_features(
    src: &Vec3,
    dst: &Vec3,
    frame: Option<&LocalFrame>,
    cfg: &FeatureConfig,
    use_global: bool,
    use_local: bool,
) -> Result<Vec<f64>> {
    let d = dst - src;
    let len = d.norm();
    if !(len > 1e-12) {
        return Err(Error::Degenerate("zero-length edge vector".into()));
    }
    let vg = d / len;
    let vl = frame.map_or(vg, |f| f.to_local(&vg));
    let width = 2 * cfg.n_freqs;
    let mut out = vec![0.0; N_DIRECTION_ANGLES * width];
    for (half, (v, on)) in [(vg, use_global), (vl, use_local)].into_iter().enumerate() {
        if !on {
            continue;
        }
        for (a, theta) in plane_angles(&v).into_iter().enumerate() {
            let at = (3 * half + a) * width;
            out[at..at + width].copy_from_slice(&fourier_encode(theta, cfg.n_freqs));
        }
    }
    Ok(out)
}

/// Bucket of the sequence offset `seq_dst − seq_src`; `None` marks the origin.
pub fn relative_position_bucket(seq_dst: Option<i32>, seq_src: Option<i32>) -> usize {
    match (seq_dst, seq_src) {
        (Some(i), Some(j)) => (i.saturating_sub(j).clamp(-MAX_SEQ_OFFSET, MAX_SEQ_OFFSET) + MAX_SEQ_OFFSET) as usize,
        _ => ORIGIN_BUCKET,
    }
}

/// Per-residue external embeddings (e.g. language-model features).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalEmbeddings {
    pub dim: usize,
    pub residue_embeddings: Vec<Vec<f64>>,
}

impl ExternalEmbeddings {
    pub fn from_json(text: &str) -> Result<Self> {
        let e: Self = serde_json::from_str(text)?;
        for row in &e.residue_embeddings {
            if row.len() != e.dim {
                return Err(Error::DimensionMismatch {
                    what: "external embedding width".into(),
                    expected: e.dim,
                    found: row.len(),
                });
            }
        }
        Ok(e)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Node-level inputs, one entry per graph node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeInputs {
    pub atom_type: Vec<usize>,
    pub residue_type: Vec<usize>,
    /// Row-major `[n_nodes, external_dim]`.
    pub external: Vec<f64>,
    pub external_dim: usize,
}

/// Edge inputs of one track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackFeatures {
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    /// Å
    pub distance: Vec<f64>,
    /// `type(src)·N_ATOM_TYPES + type(dst)`.
    pub pair_type: Vec<usize>,
    /// Row-major `[n_edges, 6·2L]`.
    pub direction: Vec<f64>,
    pub seq_bucket: Vec<usize>,
}

impl TrackFeatures {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Gaussian kernels of every edge at α = 1, β = 0, row-major `[n_edges, K]`.
    pub fn dist_kernels(&self, cfg: &FeatureConfig) -> Vec<f64> {
        self.distance.iter().flat_map(|&d| gaussian_kernel_encode(d, 1.0, 0.0, cfg)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub nodes: NodeInputs,
    pub atom: TrackFeatures,
    pub res: TrackFeatures,
    /// Node coordinates, Å (copied from the graph).
    pub coords: Vec<Vec3>,
    pub ca_of_residue: Vec<usize>,
    pub origin: Option<usize>,
    pub cfg: FeatureConfig,
}

impl Features {
    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }
}

fn track(
    edges: &EdgeList,
    graph: &BilevelGraph,
    chain: &ProteinChain,
    node_type: &[usize],
    frames: &[Option<LocalFrame>],
    cfg: &FeatureConfig,
) -> Result<TrackFeatures> {
    let residue_of = |node: usize| (node < graph.n_atoms).then(|| chain.atoms[node].residue_index);
    let seq_of = |node: usize| residue_of(node).map(|r| chain.residues[r].seq_position);
    let rows: Vec<(f64, usize, Vec<f64>, usize)> = edges
        .src
        .par_iter()
        .zip(edges.dst.par_iter())
        .map(|(&s, &d)| {
            let (ps, pd) = (graph.coords[s], graph.coords[d]);
            let frame = residue_of(d).and_then(|r| frames[r].as_ref());
            let use_local = cfg.use_global_frame || frame.is_some();
            let dir = edge_direction_features(&ps, &pd, frame, cfg, cfg.use_global_frame, use_local)?;
            Ok((
                (pd - ps).norm(),
                node_type[s] * N_ATOM_TYPES + node_type[d],
                dir,
                relative_position_bucket(seq_of(d), seq_of(s)),
            ))
        })
        .collect::<Result<_>>()?;
    let mut out = TrackFeatures {
        src: edges.src.clone().into(),
        dst: edges.dst.clone().into(),
        distance: Vec::with_capacity(rows.len()),
        pair_type: Vec::with_capacity(rows.len()),
        direction: Vec::with_capacity(rows.len() * cfg.direction_dim()),
        seq_bucket: Vec::with_capacity(rows.len()),
    };
    for (dist, pair, dir, bucket) in rows {
        out.distance.push(dist);
        out.pair_type.push(pair);
        out.direction.extend(dir);
        out.seq_bucket.push(bucket);
    }
    Ok(out)
}

/// Featurizes both tracks of `graph`, which must have been built from `chain`.
///
/// Masked residues carry the MASK type and a zero external embedding; the
/// origin gets dedicated type tokens and a zero embedding. Without `esm` all
/// external embeddings are zero with width `default_external_dim`.
pub fn featurize(
    graph: &BilevelGraph,
    chain: &ProteinChain,
    esm: Option<&ExternalEmbeddings>,
    default_external_dim: usize,
    cfg: &FeatureConfig,
) -> Result<Features> {
    cfg.validate()?;
    if graph.n_atoms != chain.n_atoms() || graph.ca_of_residue.len() != chain.n_residues() {
        return Err(Error::DimensionMismatch {
            what: "graph nodes vs chain atoms".into(),
            expected: chain.n_atoms(),
            found: graph.n_atoms,
        });
    }
    if let Some(e) = esm {
        if e.residue_embeddings.len() != chain.n_residues() {
            return Err(Error::DimensionMismatch {
                what: "external embeddings per residue".into(),
                expected: chain.n_residues(),
                found: e.residue_embeddings.len(),
            });
        }
    }
    let dim = esm.map_or(default_external_dim, |e| e.dim);
    let n = graph.n_nodes();
    let mut nodes = NodeInputs {
        atom_type: Vec::with_capacity(n),
        residue_type: Vec::with_capacity(n),
        external: vec![0.0; n * dim],
        external_dim: dim,
    };
    for (i, atom) in chain.atoms.iter().enumerate() {
        let res = &chain.residues[atom.residue_index];
        nodes.atom_type.push(atom_type_id(&atom.atom_name));
        nodes.residue_type.push(res.amino_acid.index());
        if let (Some(e), false) = (esm, res.amino_acid == AminoAcidType::Mask) {
            nodes.external[i * dim..(i + 1) * dim].copy_from_slice(&e.residue_embeddings[atom.residue_index]);
        }
    }
    if graph.origin.is_some() {
        nodes.atom_type.push(ATOM_TYPE_ORIGIN);
        nodes.residue_type.push(RESIDUE_TYPE_ORIGIN);
    }
    let frames = residue_frames(chain);
    let atom = track(&graph.atom_edges, graph, chain, &nodes.atom_type, &frames, cfg)?;
    let res = track(&graph.res_edges, graph, chain, &nodes.atom_type, &frames, cfg)?;
    Ok(Features {
        nodes,
        atom,
        res,
        coords: graph.coords.clone(),
        ca_of_residue: graph.ca_of_residue.clone(),
        origin: graph.origin,
        cfg: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_bilevel_graph;
    use crate::masking::apply_smpc;
    use crate::structures::{center_and_rotate, generate_synthetic_chain, Rotation};
    use rand::SeedableRng;
    use std::f64::consts::FRAC_PI_2;

    fn pdf(x: f64, mu: f64, s: f64) -> f64 {
        (-(x - mu).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt())
    }

    #[test]
    fn kernels_match_normal_pdf() {
        let cfg = FeatureConfig {
            n_kernels: 2,
            kernel_width: 2.0,
            ..Default::default()
        };
        let g = gaussian_kernel_encode(1.0, 1.0, 0.0, &cfg);
        assert!((g[0] - 0.24197).abs() < 1e-5 && (g[1] - 0.39894).abs() < 1e-5);
        let cfg = FeatureConfig::default();
        assert_eq!(cfg.kernel_means()[0], 0.0);
        assert_eq!(cfg.kernel_sigma(), 1.0);
        let mu = cfg.kernel_means();
        for k in 0..16 {
            let g = gaussian_kernel_encode(mu[k], 1.0, 0.0, &cfg);
            assert!((g[k] - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
        }
        let g = gaussian_kernel_encode(3.3, 0.7, 1.2, &cfg);
        for k in 0..16 {
            assert!((g[k] - pdf(0.7 * 3.3 + 1.2, mu[k], 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn fourier_values() {
        assert_eq!(fourier_encode(0.0, 2), vec![0.0, 1.0, 0.0, 1.0]);
        let v = fourier_encode(FRAC_PI_2, 1);
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1].abs() < 1e-15);
        let v = fourier_encode(0.3, 3);
        let expect = [0.3f64.sin(), 0.3f64.cos(), 0.6f64.sin(), 0.6f64.cos(), 1.2f64.sin(), 1.2f64.cos()];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn plane_angle_cases() {
        assert!((plane_angles(&Vec3::z())[0] - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(plane_angles(&Vec3::new(0.6, 0.8, 0.0))[0], 0.0);
    }

    #[test]
    fn identity_frame_copies_global_angles() {
        let cfg = FeatureConfig::default();
        let f = LocalFrame::identity_at(Vec3::zeros());
        let d = edge_direction_features(&Vec3::new(0.3, -1.0, 2.0), &Vec3::new(1.1, 0.4, -0.7), Some(&f), &cfg, true, true)
            .unwrap();
        let half = d.len() / 2;
        for i in 0..half {
            assert!((d[i] - d[half + i]).abs() < 1e-12);
        }
        assert!(edge_direction_features(&Vec3::zeros(), &Vec3::zeros(), None, &cfg, true, true).is_err());
    }

    #[test]
    fn buckets() {
        assert_eq!(relative_position_bucket(Some(10), Some(10)), 32);
        assert_eq!(relative_position_bucket(Some(100), Some(1)), 64);
        assert_eq!(relative_position_bucket(Some(1), Some(100)), 0);
        assert_eq!(relative_position_bucket(Some(4), None), ORIGIN_BUCKET);
        assert_eq!(ORIGIN_BUCKET, 65);
    }

    fn featurized(chain: &ProteinChain, global: bool, origin: bool) -> Features {
        let g = build_bilevel_graph(chain, 12, 8, origin).unwrap();
        let cfg = FeatureConfig {
            use_global_frame: global,
            ..Default::default()
        };
        featurize(&g, chain, None, 4, &cfg).unwrap()
    }

    #[test]
    fn fifty_residue_chain_is_finite_and_bounded() {
        let chain = generate_synthetic_chain(50, 4).unwrap();
        let f = featurized(&chain, true, true);
        assert!(f.atom.direction.iter().chain(&f.res.direction).all(|v| v.abs() <= 1.0));
        assert!(f.atom.dist_kernels(&f.cfg).iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(f.nodes.external.iter().all(|v| *v == 0.0));
        let o = f.origin.unwrap();
        assert_eq!(f.nodes.atom_type[o], ATOM_TYPE_ORIGIN);
        assert_eq!(f.nodes.residue_type[o], RESIDUE_TYPE_ORIGIN);
        for (i, &d) in f.atom.dst.iter().enumerate() {
            if d == o || f.atom.src[i] == o {
                assert_eq!(f.atom.seq_bucket[i], ORIGIN_BUCKET);
            }
        }
    }

    #[test]
    fn masked_nodes_carry_mask_type_and_zero_embedding() {
        let clean = generate_synthetic_chain(10, 4).unwrap();
        let (chain, _) = apply_smpc(&clean, &[3..5]).unwrap();
        let g = build_bilevel_graph(&chain, 8, 4, true).unwrap();
        let esm = ExternalEmbeddings {
            dim: 3,
            residue_embeddings: (0..10).map(|r| vec![r as f64 + 1.0; 3]).collect(),
        };
        let f = featurize(&g, &chain, Some(&esm), 99, &FeatureConfig::default()).unwrap();
        for r in 0..10 {
            let ca = chain.residues[r].ca_index;
            let row = &f.nodes.external[ca * 3..ca * 3 + 3];
            if (3..5).contains(&r) {
                assert_eq!(f.nodes.residue_type[ca], AminoAcidType::Mask.index());
                assert_eq!(row, [0.0; 3]);
            } else {
                assert_eq!(row, [r as f64 + 1.0; 3]);
            }
        }
        let short = ExternalEmbeddings {
            dim: 3,
            residue_embeddings: vec![vec![0.0; 3]; 9],
        };
        assert!(matches!(
            featurize(&g, &chain, Some(&short), 3, &FeatureConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn local_features_are_rigid_invariant() {
        let clean = generate_synthetic_chain(30, 6).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let (chain, _) = crate::masking::apply_noise(&clean, &[0..30], 0.05, &mut rng).unwrap();
        let moved = center_and_rotate(&chain, &Rotation::identity(), Some(3)).unwrap();
        let a = featurized(&chain, true, true);
        let b = featurized(&moved, true, true);
        assert_eq!(a.atom.src, b.atom.src);
        let w = a.cfg.direction_dim();
        let mut global_diff: f64 = 0.0;
        for e in 0..a.atom.len() {
            assert!((a.atom.distance[e] - b.atom.distance[e]).abs() < 1e-9);
            let (ra, rb) = (&a.atom.direction[e * w..(e + 1) * w], &b.atom.direction[e * w..(e + 1) * w]);
            let d = a.atom.dst[e];
            let framed = d < chain.n_atoms();
            for i in w / 2..w {
                if framed {
                    assert!((ra[i] - rb[i]).abs() < 1e-6);
                }
            }
            for i in 0..w / 2 {
                global_diff = global_diff.max((ra[i] - rb[i]).abs());
            }
        }
        assert!(global_diff > 1e-2);

        let a = featurized(&chain, false, false);
        let b = featurized(&moved, false, false);
        for (x, y) in a.atom.direction.iter().zip(&b.atom.direction).chain(a.res.direction.iter().zip(&b.res.direction)) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_types_give_symmetric_kernels() {
        let chain = generate_synthetic_chain(12, 1).unwrap();
        let f = featurized(&chain, true, false);
        let cfg = &f.cfg;
        for e in 0..f.res.len() {
            let (s, d) = (f.res.src[e], f.res.dst[e]);
            if let Some(r) = (0..f.res.len()).find(|&r| f.res.src[r] == d && f.res.dst[r] == s) {
                assert_eq!(f.res.pair_type[e], f.res.pair_type[r]);
                let (ge, gr) = (
                    gaussian_kernel_encode(f.res.distance[e], 1.0, 0.0, cfg),
                    gaussian_kernel_encode(f.res.distance[r], 1.0, 0.0, cfg),
                );
                assert_eq!(ge, gr);
            }
        }
    }
}
