//! Bilevel KNN graph: an atom track over all atoms and a residue track over
//! alpha carbons, sharing node storage, plus an optional virtual origin node.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structures::{ProteinChain, Vec3};

pub const DEFAULT_K: usize = 30;

/// Directed edges stored as parallel `src`/`dst` arrays. Messages flow
/// `src → dst`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeList {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl EdgeList {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn push(&mut self, src: usize, dst: usize) {
        self.src.push(src);
        self.dst.push(dst);
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.src.iter().copied().zip(self.dst.iter().copied())
    }

    /// Sources of every edge into `node`, in edge order.
    pub fn in_neighbors(&self, node: usize) -> Vec<usize> {
        self.iter().filter(|&(_, d)| d == node).map(|(s, _)| s).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilevelGraph {
    /// Node coordinates, Å: the chain's atoms in order, then the origin (if any).
    pub coords: Vec<Vec3>,
    pub n_atoms: usize,
    /// Node index of the virtual origin.
    pub origin: Option<usize>,
    /// Node index of each residue's CA.
    pub ca_of_residue: Vec<usize>,
    pub atom_edges: EdgeList,
    pub res_edges: EdgeList,
    pub k_atom: usize,
    pub k_res: usize,
}

impl BilevelGraph {
    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn cell_key(p: &Vec3, h: f64) -> [i64; 3] {
    [(p.x / h).floor() as i64, (p.y / h).floor() as i64, (p.z / h).floor() as i64]
}

/// Exact k-nearest-neighbor search backed by a uniform grid.
pub struct KnnIndex<'a> {
    points: &'a [Vec3],
    cell: f64,
    grid: HashMap<[i64; 3], Vec<usize>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> KnnIndex<'a> {
    /// `cell` is the grid spacing; it affects speed only.
    pub fn new(points: &'a [Vec3], cell: f64) -> Self {
        let cell = if cell.is_finite() && cell > 1e-6 { cell } else { 1.0 };
        let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let key = cell_key(p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(key[a]);
                hi[a] = hi[a].max(key[a]);
            }
            grid.entry(key).or_default().push(i);
        }
        Self {
            points,
            cell,
            grid,
            lo,
            hi,
        }
    }

    /// Spacing guess for an arbitrary point cloud: edge of the cube holding
    /// about four points on average.
    pub fn auto_cell(points: &[Vec3]) -> f64 {
        if points.len() < 2 {
            return 1.0;
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let ext = (hi - lo).map(|e| e.max(1e-3));
        (4.0 * ext.x * ext.y * ext.z / points.len() as f64).cbrt()
    }

    fn visit_ring(&self, center: [i64; 3], r: i64, out: &mut Vec<usize>) {
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                        continue;
                    }
                    if let Some(b) = self.grid.get(&[center[0] + dx, center[1] + dy, center[2] + dz]) {
                        out.extend_from_slice(b);
                    }
                }
            }
        }
    }

    /// The `k` points nearest to point `query` (itself excluded), sorted by
    /// distance with ties broken by lower index.
    pub fn query(&self, query: usize, k: usize) -> Vec<usize> {
        let q = self.points[query];
        let center = cell_key(&q, self.cell);
        let max_ring = (0..3)
            .map(|a| (center[a] - self.lo[a]).abs().max((self.hi[a] - center[a]).abs()))
            .max()
            .unwrap_or(0);
        let mut cand: Vec<(f64, usize)> = Vec::new();
        let mut ring_buf = Vec::new();
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        for r in 0..=max_ring {
            ring_buf.clear();
            self.visit_ring(center, r, &mut ring_buf);
            cand.extend(
                ring_buf
                    .iter()
                    .filter(|&&j| j != query)
                    .map(|&j| ((self.points[j] - q).norm_squared(), j)),
            );
            if cand.len() >= k {
                cand.sort_by(by_dist);
                cand.truncate(k);
                // anything in ring r+1 or beyond lies at least r cells away
                let reach = r as f64 * self.cell;
                if cand.last().is_some_and(|c| c.0 < reach * reach) {
                    break;
                }
            }
        }
        cand.sort_by(by_dist);
        cand.truncate(k);
        cand.into_iter().map(|c| c.1).collect()
    }
}

/// KNN lists for every point, in parallel.
pub fn knn_all(points: &[Vec3], k: usize, cell: f64) -> Vec<Vec<usize>> {
    let index = KnnIndex::new(points, cell);
    (0..points.len()).into_par_iter().map(|i| index.query(i, k)).collect()
}

fn median_ca_spacing(chain: &ProteinChain) -> f64 {
    let mut d: Vec<f64> = (1..chain.n_residues())
        .map(|r| (chain.ca_position(r) - chain.ca_position(r - 1)).norm())
        .collect();
    if d.is_empty() {
        return 3.8;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Builds both KNN tracks over the (masked, noised) chain. With
/// `include_origin` a node at the atom centroid is appended and linked in
/// both directions to every atom (atom track) and every CA (residue track).
pub fn build_bilevel_graph(chain: &ProteinChain, k_atom: usize, k_res: usize, include_origin: bool) -> Result<BilevelGraph> {
    if chain.n_atoms() == 0 {
        return Err(Error::EmptyGraph);
    }
    if k_atom == 0 || k_res == 0 {
        return Err(Error::Argument(format!("k must be at least 1 (k_atom {k_atom}, k_res {k_res})")));
    }
    let n = chain.n_atoms();
    let mut coords: Vec<Vec3> = chain.atoms.iter().map(|a| a.position).collect();
    let cell = median_ca_spacing(chain);
    let ca_of_residue: Vec<usize> = chain.residues.iter().map(|r| r.ca_index).collect();
    let ca_coords: Vec<Vec3> = ca_of_residue.iter().map(|&i| coords[i]).collect();

    let atom_knn = knn_all(&coords, k_atom, cell);
    let res_knn = knn_all(&ca_coords, k_res, cell);

    let origin = include_origin.then_some(n);
    if include_origin {
        coords.push(chain.centroid());
    }
    let mut atom_edges = EdgeList::default();
    for (dst, nbrs) in atom_knn.iter().enumerate() {
        for &src in nbrs {
            atom_edges.push(src, dst);
        }
        if let Some(o) = origin {
            atom_edges.push(o, dst);
        }
    }
    let mut res_edges = EdgeList::default();
    for (r, nbrs) in res_knn.iter().enumerate() {
        for &s in nbrs {
            res_edges.push(ca_of_residue[s], ca_of_residue[r]);
        }
        if let Some(o) = origin {
            res_edges.push(o, ca_of_residue[r]);
        }
    }
    if let Some(o) = origin {
        for a in 0..n {
            atom_edges.push(a, o);
        }
        for &ca in &ca_of_residue {
            res_edges.push(ca, o);
        }
    }
    Ok(BilevelGraph {
        coords,
        n_atoms: n,
        origin,
        ca_of_residue,
        atom_edges,
        res_edges,
        k_atom,
        k_res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structures::{center_and_rotate, generate_synthetic_chain, Rotation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[Vec3], q: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = (0..points.len())
            .filter(|&j| j != q)
            .map(|j| ((points[j] - points[q]).norm_squared(), j))
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|x| x.1).collect()
    }

    #[test]
    fn matches_brute_force_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> = (0..200)
            .map(|_| Vec3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-5.0..5.0)))
            .collect();
        for cell in [1.5, 3.8, KnnIndex::auto_cell(&pts), 100.0] {
            let lists = knn_all(&pts, 12, cell);
            for q in 0..pts.len() {
                assert_eq!(lists[q], brute(&pts, q, 12));
            }
        }
    }

    #[test]
    fn ties_break_by_index() {
        // integer lattice: many exactly equal distances
        let pts: Vec<Vec3> = (0..64)
            .map(|i| Vec3::new((i % 4) as f64, ((i / 4) % 4) as f64, (i / 16) as f64))
            .collect();
        let lists = knn_all(&pts, 7, 1.0);
        for q in 0..pts.len() {
            assert_eq!(lists[q], brute(&pts, q, 7));
        }
    }

    #[test]
    fn small_chain_connects_everything() {
        let chain = generate_synthetic_chain(1, 0);
        assert!(chain.is_err());
        let chain = generate_synthetic_chain(2, 0).unwrap();
        let g = build_bilevel_graph(&chain, 100, 100, true).unwrap();
        let o = g.origin.unwrap();
        for a in 0..g.n_atoms {
            let nb = g.atom_edges.in_neighbors(a);
            assert_eq!(nb.len(), g.n_atoms);
            assert_eq!(*nb.last().unwrap(), o);
            assert!(!nb.contains(&a));
        }
        assert_eq!(g.atom_edges.in_neighbors(o).len(), g.n_atoms);
        assert_eq!(g.res_edges.in_neighbors(o), g.ca_of_residue);
        assert!((g.coords[o] - chain.centroid()).norm() < 1e-12);
    }

    #[test]
    fn residue_track_uses_ca_nodes_only() {
        let chain = generate_synthetic_chain(25, 3).unwrap();
        let g = build_bilevel_graph(&chain, 10, 6, true).unwrap();
        let o = g.origin.unwrap();
        for (s, d) in g.res_edges.iter() {
            assert!(s == o || g.ca_of_residue.contains(&s));
            assert!(d == o || g.ca_of_residue.contains(&d));
            assert_ne!(s, d);
        }
        for &ca in &g.ca_of_residue {
            assert_eq!(g.res_edges.in_neighbors(ca).len(), 7);
        }
    }

    #[test]
    fn no_origin_variant() {
        let chain = generate_synthetic_chain(6, 3).unwrap();
        let g = build_bilevel_graph(&chain, 5, 3, false).unwrap();
        assert_eq!(g.n_nodes(), chain.n_atoms());
        assert!(g.atom_edges.iter().all(|(s, d)| s < g.n_atoms && d < g.n_atoms));
    }

    #[test]
    fn topology_invariant_under_rigid_motion() {
        // ideal synthetic geometry repeats bond lengths exactly; rounding in
        // the rotation would reorder such ties, so jitter them apart first
        let clean = generate_synthetic_chain(30, 8).unwrap();
        let (chain, _) = crate::masking::apply_noise(&clean, &[0..30], 0.05, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let moved = center_and_rotate(&chain, &Rotation::identity(), Some(77)).unwrap();
        let a = build_bilevel_graph(&chain, 12, 8, true).unwrap();
        let b = build_bilevel_graph(&moved, 12, 8, true).unwrap();
        assert_eq!(a.atom_edges, b.atom_edges);
        assert_eq!(a.res_edges, b.res_edges);
    }

    #[test]
    fn empty_chain_and_zero_k() {
        let empty = ProteinChain {
            chain_id: "A".into(),
            residues: vec![],
            atoms: vec![],
        };
        assert!(matches!(build_bilevel_graph(&empty, 3, 3, true), Err(Error::EmptyGraph)));
        let chain = generate_synthetic_chain(4, 1).unwrap();
        assert!(build_bilevel_graph(&chain, 0, 3, true).is_err());
    }

    #[test]
    fn dump_is_json() {
        let chain = generate_synthetic_chain(4, 1).unwrap();
        let g = build_bilevel_graph(&chain, 3, 3, true).unwrap();
        let v: serde_json::Value = serde_json::from_str(&g.to_json().unwrap()).unwrap();
        assert_eq!(v["coords"].as_array().unwrap().len(), g.n_nodes());
        let back: BilevelGraph = serde_json::from_str(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
