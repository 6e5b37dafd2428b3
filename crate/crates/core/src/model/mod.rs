//! The two-track sparse attention network, its movement head and task heads.

pub mod checkpoint;
mod params;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vabs_autodiff::{Tape, Tensor, Var};

use crate::encodings::{FeatureConfig, Features, TrackFeatures, N_PAIR_TYPES, N_SEQ_BUCKETS};
use crate::error::{Error, Result};
use crate::structures::residue_constants::N_ATOM_TYPES;
use crate::structures::N_RESIDUE_TOKENS;

pub use params::{Init, ParamId, ParamStore, ParamVars};

/// Standard amino-acid classes predicted by the residue-type head.
pub const N_RESIDUE_CLASSES: usize = 20;
/// Fixed output scale of the SASA head, Å²; the head regresses label/scale.
pub const SASA_SCALE: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VabsNetConfig {
    pub n_layers: usize,
    pub node_dim: usize,
    pub edge_dim: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    pub k_atom: usize,
    pub k_res: usize,
    /// Fourier direction features enter the edge encoder.
    pub use_vector_encoder: bool,
    /// Global-frame angles are featurized (off for the rotation-invariant variant).
    pub use_global_frame: bool,
    pub use_virtual_origin: bool,
    pub use_external_embeddings: bool,
    pub external_dim: usize,
    pub n_kernels: usize,
    pub kernel_width: f64,
    pub n_freqs: usize,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
}

impl Default for VabsNetConfig {
    fn default() -> Self {
        Self {
            n_layers: 12,
            node_dim: 768,
            edge_dim: 128,
            ffn_dim: 768,
            n_heads: 8,
            k_atom: 30,
            k_res: 30,
            use_vector_encoder: true,
            use_global_frame: true,
            use_virtual_origin: true,
            use_external_embeddings: false,
            external_dim: 1280,
            n_kernels: 16,
            kernel_width: 16.0,
            n_freqs: 4,
            init_seed: 0,
        }
    }
}

impl VabsNetConfig {
    /// A compact configuration: `n_layers` layers of width `dim`.
    pub fn small(n_layers: usize, dim: usize) -> Self {
        Self {
            n_layers,
            node_dim: dim,
            edge_dim: dim.min(128),
            ffn_dim: dim,
            ..Default::default()
        }
    }

    /// Drops the global-frame features and the origin node so the whole
    /// network is invariant under rigid motions.
    pub fn so3_invariant(mut self) -> Self {
        self.use_global_frame = false;
        self.use_virtual_origin = false;
        self
    }

    pub fn is_so3_invariant(&self) -> bool {
        !self.use_global_frame && !self.use_virtual_origin
    }

    pub fn head_dim(&self) -> usize {
        self.node_dim / self.n_heads.max(1)
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            n_kernels: self.n_kernels,
            kernel_width: self.kernel_width,
            n_freqs: self.n_freqs,
            use_global_frame: self.use_global_frame,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.node_dim == 0 || self.node_dim % self.n_heads != 0 {
            return bad(format!("node_dim {} must be a positive multiple of n_heads {}", self.node_dim, self.n_heads));
        }
        if self.edge_dim == 0 || self.ffn_dim == 0 {
            return bad("edge_dim and ffn_dim must be positive".into());
        }
        if self.k_atom == 0 || self.k_res == 0 {
            return bad("k_atom and k_res must be at least 1".into());
        }
        if self.use_external_embeddings && self.external_dim == 0 {
            return bad("external_dim must be positive when external embeddings are used".into());
        }
        self.feature_config().validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct EdgeEncoder {
    alpha: ParamId,
    beta: ParamId,
    wg: ParamId,
    wf: Option<ParamId>,
    pos: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Attention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wb: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SamLayer {
    ln1: (ParamId, ParamId),
    attn: Attention,
    wo: ParamId,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Block {
    atom: SamLayer,
    res: SamLayer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct MovementHead {
    attn: Attention,
    wp: [ParamId; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Handles {
    emb_atom: ParamId,
    emb_res: ParamId,
    w_ext: Option<ParamId>,
    edge_atom: EdgeEncoder,
    edge_res: EdgeEncoder,
    final_ln: (ParamId, ParamId),
    movement: MovementHead,
    res_type: Linear,
    torsion_hidden: Linear,
    torsion_out: Linear,
    sasa: Linear,
    node_class: Linear,
    blocks: Vec<Block>,
}

/// One attention distribution recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub label: String,
    /// `[n_edges, n_heads]` weights.
    pub weights: Var,
    pub dst: Arc<[usize]>,
    pub n_nodes: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub attention: Vec<AttentionRecord>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[n_nodes, node_dim]` final node representations (origin last, if present).
    pub nodes: Var,
    pub atom_edges: Var,
    pub res_edges: Var,
}

/// A residue track expressed over its own compact node set.
struct CompactTrack {
    /// Compact index → graph node.
    members: Arc<[usize]>,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VabsNet {
    pub config: VabsNetConfig,
    pub params: ParamStore,
    handles: Handles,
}

impl VabsNet {
    /// Fresh parameters drawn from `config.init_seed`.
    pub fn new(config: VabsNetConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let handles = build_params(&config, &mut params, &mut ChaCha8Rng::seed_from_u64(config.init_seed));
        Ok(Self { config, params, handles })
    }

    pub fn record(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        self.params.record(tape, trainable)
    }

    fn check_features(&self, f: &Features) -> Result<()> {
        let c = &self.config;
        if f.cfg != c.feature_config() {
            return Err(Error::Config(format!(
                "features were built with {:?}, model expects {:?}",
                f.cfg,
                c.feature_config()
            )));
        }
        if f.origin.is_some() != c.use_virtual_origin {
            return Err(Error::Config(format!(
                "graph origin node present = {}, but use_virtual_origin = {}",
                f.origin.is_some(),
                c.use_virtual_origin
            )));
        }
        if c.use_external_embeddings && f.nodes.external_dim != c.external_dim {
            return Err(Error::DimensionMismatch {
                what: "external embedding width".into(),
                expected: c.external_dim,
                found: f.nodes.external_dim,
            });
        }
        Ok(())
    }

    /// Node and edge representations.
    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, f: &Features, trace: &mut ForwardTrace) -> Result<ForwardOutput> {
        self.check_features(f)?;
        let h = &self.handles;
        let c = &self.config;
        let n = f.n_nodes();

        let atom_ids: Arc<[usize]> = f.nodes.atom_type.clone().into();
        let res_ids: Arc<[usize]> = f.nodes.residue_type.clone().into();
        let ea = tape.embedding_lookup(pv.var(h.emb_atom), &atom_ids)?;
        let er = tape.embedding_lookup(pv.var(h.emb_res), &res_ids)?;
        let mut x = tape.add(ea, er)?;
        if let Some(w) = h.w_ext {
            let ext = tape.constant(Tensor::new(n, f.nodes.external_dim, f.nodes.external.clone())?);
            let proj = tape.matmul(ext, pv.var(w))?;
            x = tape.add(x, proj)?;
        }

        let atom_edges = self.encode_edges(tape, pv, &h.edge_atom, &f.atom)?;
        let res_edges = self.encode_edges(tape, pv, &h.edge_res, &f.res)?;
        let compact = compact_track(f);

        for (i, block) in h.blocks.iter().enumerate() {
            x = sam_layer(tape, pv, &block.atom, c, x, atom_edges, &f.atom.src, &f.atom.dst, n, trace, format!("block.{i}.atom"))?;
            x = residue_sublayer(tape, pv, &block.res, c, x, res_edges, &compact, n, trace, format!("block.{i}.res"))?;
        }
        let nodes = affine_norm(tape, pv, h.final_ln, x)?;
        Ok(ForwardOutput {
            nodes,
            atom_edges,
            res_edges,
        })
    }

    fn encode_edges(&self, tape: &mut Tape, pv: &ParamVars, enc: &EdgeEncoder, t: &TrackFeatures) -> Result<Var> {
        let fc = self.config.feature_config();
        let e = t.len();
        let pairs: Arc<[usize]> = t.pair_type.clone().into();
        let alpha = tape.embedding_lookup(pv.var(enc.alpha), &pairs)?;
        let beta = tape.embedding_lookup(pv.var(enc.beta), &pairs)?;
        let dist = tape.constant(Tensor::column(t.distance.clone()));
        let scaled = tape.mul(alpha, dist)?;
        let arg = tape.add(scaled, beta)?;
        let g = gaussian_kernels(tape, arg, &fc)?;
        let mut out = tape.matmul(g, pv.var(enc.wg))?;
        if let Some(wf) = enc.wf {
            let dir = tape.constant(Tensor::new(e, fc.direction_dim(), t.direction.clone())?);
            let p = tape.matmul(dir, pv.var(wf))?;
            out = tape.add(out, p)?;
        }
        let buckets: Arc<[usize]> = t.seq_bucket.clone().into();
        let pos = tape.embedding_lookup(pv.var(enc.pos), &buckets)?;
        Ok(tape.add(out, pos)?)
    }

    /// Predicted coordinates r^P for every node, `[n_nodes, 3]`.
    pub fn movement_head(&self, tape: &mut Tape, pv: &ParamVars, f: &Features, out: &ForwardOutput, trace: &mut ForwardTrace) -> Result<Var> {
        let h = &self.handles;
        let n = f.n_nodes();
        let m = &h.movement;
        let (a, vs) = attention_weights(tape, pv, &m.attn, &self.config, out.nodes, out.atom_edges, &f.atom.src, &f.atom.dst, n)?;
        trace.attention.push(AttentionRecord {
            label: "movement".into(),
            weights: a,
            dst: Arc::clone(&f.atom.dst),
            n_nodes: n,
        });
        let ar = tape.repeat_cols(a, self.config.head_dim())?;
        let msg = tape.mul(ar, vs)?;
        let mut cols = Vec::with_capacity(3);
        for axis in 0..3 {
            let rel: Vec<f64> = f
                .atom
                .src
                .iter()
                .zip(f.atom.dst.iter())
                .map(|(&s, &d)| f.coords[d][axis] - f.coords[s][axis])
                .collect();
            let rel = tape.constant(Tensor::column(rel));
            let weighted = tape.mul_col(msg, rel)?;
            let b = tape.segment_sum(weighted, &f.atom.dst, n)?;
            cols.push(tape.matmul(b, pv.var(m.wp[axis]))?);
        }
        let disp = tape.concat(&cols)?;
        let noisy: Vec<f64> = f.coords.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let r_n = tape.constant(Tensor::new(n, 3, noisy)?);
        Ok(tape.add(r_n, disp)?)
    }

    fn linear(&self, tape: &mut Tape, pv: &ParamVars, l: Linear, x: Var) -> Result<Var> {
        let y = tape.matmul(x, pv.var(l.w))?;
        Ok(tape.add_row(y, pv.var(l.b))?)
    }

    /// Residue-type logits `[rows, 20]` for the given node rows (CA nodes).
    pub fn residue_type_head(&self, tape: &mut Tape, pv: &ParamVars, nodes: Var, rows: &Arc<[usize]>) -> Result<Var> {
        let x = tape.gather_rows(nodes, rows)?;
        self.linear(tape, pv, self.handles.res_type, x)
    }

    /// Raw torsion predictions `[7·rows, 2]`: row 7r + k holds (sin, cos) of
    /// angle k of the r-th requested node.
    pub fn torsion_head(&self, tape: &mut Tape, pv: &ParamVars, nodes: Var, rows: &Arc<[usize]>) -> Result<Var> {
        let h = &self.handles;
        let x = tape.gather_rows(nodes, rows)?;
        let hid = self.linear(tape, pv, h.torsion_hidden, x)?;
        let hid = tape.gelu(hid);
        let out = self.linear(tape, pv, h.torsion_out, hid)?;
        Ok(tape.reshape(out, rows.len() * 7, 2)?)
    }

    /// SASA predictions, Å², `[rows, 1]`.
    pub fn sasa_head(&self, tape: &mut Tape, pv: &ParamVars, nodes: Var, rows: &Arc<[usize]>) -> Result<Var> {
        let x = tape.gather_rows(nodes, rows)?;
        let y = self.linear(tape, pv, self.handles.sasa, x)?;
        Ok(tape.scale(y, SASA_SCALE))
    }

    /// Binary logits `[rows, 1]`.
    pub fn node_class_head(&self, tape: &mut Tape, pv: &ParamVars, nodes: Var, rows: &Arc<[usize]>) -> Result<Var> {
        let x = tape.gather_rows(nodes, rows)?;
        self.linear(tape, pv, self.handles.node_class, x)
    }
}

fn build_params(c: &VabsNetConfig, s: &mut ParamStore, rng: &mut ChaCha8Rng) -> Handles {
    let (d, e, f) = (c.node_dim, c.edge_dim, c.ffn_dim);
    let emb_atom = s.add("embed.atom".into(), N_ATOM_TYPES, d, Init::Glorot, rng);
    let emb_res = s.add("embed.residue".into(), N_RESIDUE_TOKENS, d, Init::Glorot, rng);
    let w_ext = c
        .use_external_embeddings
        .then(|| s.add("embed.external".into(), c.external_dim, d, Init::Glorot, rng));
    let dir_dim = c.feature_config().direction_dim();
    let edge = |s: &mut ParamStore, t: &str, rng: &mut ChaCha8Rng| EdgeEncoder {
        alpha: s.add(format!("edge.{t}.alpha"), N_PAIR_TYPES, 1, Init::Ones, rng),
        beta: s.add(format!("edge.{t}.beta"), N_PAIR_TYPES, 1, Init::Zeros, rng),
        wg: s.add(format!("edge.{t}.wg"), c.n_kernels, e, Init::Glorot, rng),
        wf: c
            .use_vector_encoder
            .then(|| s.add(format!("edge.{t}.wf"), dir_dim, e, Init::Glorot, rng)),
        pos: s.add(format!("edge.{t}.pos"), N_SEQ_BUCKETS, e, Init::Glorot, rng),
    };
    let edge_atom = edge(s, "atom", rng);
    let edge_res = edge(s, "res", rng);
    let attention = |s: &mut ParamStore, p: &str, rng: &mut ChaCha8Rng| Attention {
        wq: s.add(format!("{p}.wq"), d, d, Init::Glorot, rng),
        wk: s.add(format!("{p}.wk"), d, d, Init::Glorot, rng),
        wv: s.add(format!("{p}.wv"), d, d, Init::Glorot, rng),
        wb: s.add(format!("{p}.wb"), e, c.n_heads, Init::Glorot, rng),
    };
    let layer = |s: &mut ParamStore, p: &str, rng: &mut ChaCha8Rng| SamLayer {
        ln1: (
            s.add(format!("{p}.ln1.gamma"), 1, d, Init::Ones, rng),
            s.add(format!("{p}.ln1.beta"), 1, d, Init::Zeros, rng),
        ),
        attn: attention(s, &format!("{p}.sam"), rng),
        wo: s.add(format!("{p}.sam.wo"), d, d, Init::Glorot, rng),
        ln2: (
            s.add(format!("{p}.ln2.gamma"), 1, d, Init::Ones, rng),
            s.add(format!("{p}.ln2.beta"), 1, d, Init::Zeros, rng),
        ),
        w1: s.add(format!("{p}.ffn.w1"), d, f, Init::Glorot, rng),
        b1: s.add(format!("{p}.ffn.b1"), 1, f, Init::Zeros, rng),
        w2: s.add(format!("{p}.ffn.w2"), f, d, Init::Glorot, rng),
        b2: s.add(format!("{p}.ffn.b2"), 1, d, Init::Zeros, rng),
    };
    let blocks: Vec<Block> = (0..c.n_layers)
        .map(|i| Block {
            atom: layer(s, &format!("block.{i}.atom"), rng),
            res: layer(s, &format!("block.{i}.res"), rng),
        })
        .collect();
    let final_ln = (
        s.add("final_ln.gamma".into(), 1, d, Init::Ones, rng),
        s.add("final_ln.beta".into(), 1, d, Init::Zeros, rng),
    );
    let movement = MovementHead {
        attn: attention(s, "movement", rng),
        wp: ["x", "y", "z"].map(|a| s.add(format!("movement.wp{a}"), d, 1, Init::Zeros, rng)),
    };
    let linear = |s: &mut ParamStore, p: &str, rows: usize, cols: usize, init: Init, rng: &mut ChaCha8Rng| Linear {
        w: s.add(format!("{p}.w"), rows, cols, init, rng),
        b: s.add(format!("{p}.b"), 1, cols, Init::Zeros, rng),
    };
    let res_type = linear(s, "head.res_type", d, N_RESIDUE_CLASSES, Init::Zeros, rng);
    let torsion_hidden = linear(s, "head.torsion.hidden", d, d, Init::Glorot, rng);
    // not zero: the torsion loss normalizes this output
    let torsion_out = linear(s, "head.torsion.out", d, 14, Init::Glorot, rng);
    let sasa = linear(s, "head.sasa", d, 1, Init::Zeros, rng);
    let node_class = linear(s, "head.node_class", d, 1, Init::Zeros, rng);
    Handles {
        emb_atom,
        emb_res,
        w_ext,
        edge_atom,
        edge_res,
        final_ln,
        movement,
        res_type,
        torsion_hidden,
        torsion_out,
        sasa,
        node_class,
        blocks,
    }
}

fn gaussian_kernels(tape: &mut Tape, arg: Var, fc: &FeatureConfig) -> Result<Var> {
    let sigma = fc.kernel_sigma();
    let rep = tape.repeat_cols(arg, fc.n_kernels)?;
    let neg_mu = tape.constant(Tensor::row(fc.kernel_means().iter().map(|m| -m).collect()));
    let centered = tape.add_row(rep, neg_mu)?;
    let z = tape.scale(centered, 1.0 / sigma);
    let z2 = tape.mul(z, z)?;
    let e = tape.scale(z2, -0.5);
    let g = tape.exp(e);
    Ok(tape.scale(g, 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt())))
}

fn affine_norm(tape: &mut Tape, pv: &ParamVars, (g, b): (ParamId, ParamId), x: Var) -> Result<Var> {
    let n = tape.layer_norm(x);
    let s = tape.mul_row(n, pv.var(g))?;
    Ok(tape.add_row(s, pv.var(b))?)
}

fn check_in_degree(dst: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &d in dst {
        seen[d] = true;
    }
    if let Some(lonely) = seen.iter().position(|s| !s) {
        return Err(Error::Autodiff(vabs_autodiff::AutodiffError::Contract(format!(
            "node {lonely} has no incoming edges"
        ))));
    }
    Ok(())
}

/// Per-edge attention weights `[E, heads]` and gathered values `[E, d]`.
#[allow(clippy::too_many_arguments)]
fn attention_weights(
    tape: &mut Tape,
    pv: &ParamVars,
    a: &Attention,
    c: &VabsNetConfig,
    x: Var,
    e: Var,
    src: &Arc<[usize]>,
    dst: &Arc<[usize]>,
    n: usize,
) -> Result<(Var, Var)> {
    check_in_degree(dst, n)?;
    let dh = c.head_dim();
    let q = tape.matmul(x, pv.var(a.wq))?;
    let k = tape.matmul(x, pv.var(a.wk))?;
    let v = tape.matmul(x, pv.var(a.wv))?;
    let qd = tape.gather_rows(q, dst)?;
    let ks = tape.gather_rows(k, src)?;
    let prod = tape.mul(qd, ks)?;
    let dots = tape.sum_col_groups(prod, dh)?;
    let dots = tape.scale(dots, 1.0 / (dh as f64).sqrt());
    let bias = tape.matmul(e, pv.var(a.wb))?;
    let logits = tape.add(dots, bias)?;
    let w = tape.segment_softmax(logits, dst, n)?;
    let vs = tape.gather_rows(v, src)?;
    Ok((w, vs))
}

/// Multi-head sparse attention over `n` nodes; returns the projected update.
#[allow(clippy::too_many_arguments)]
fn sparse_attention(
    tape: &mut Tape,
    pv: &ParamVars,
    l: &SamLayer,
    c: &VabsNetConfig,
    x: Var,
    e: Var,
    src: &Arc<[usize]>,
    dst: &Arc<[usize]>,
    n: usize,
    trace: &mut ForwardTrace,
    label: String,
) -> Result<Var> {
    let (w, vs) = attention_weights(tape, pv, &l.attn, c, x, e, src, dst, n)?;
    trace.attention.push(AttentionRecord {
        label,
        weights: w,
        dst: Arc::clone(dst),
        n_nodes: n,
    });
    let wr = tape.repeat_cols(w, c.head_dim())?;
    let msg = tape.mul(wr, vs)?;
    let agg = tape.segment_sum(msg, dst, n)?;
    Ok(tape.matmul(agg, pv.var(l.wo))?)
}

fn ffn(tape: &mut Tape, pv: &ParamVars, l: &SamLayer, x: Var) -> Result<Var> {
    let h = tape.matmul(x, pv.var(l.w1))?;
    let h = tape.add_row(h, pv.var(l.b1))?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, pv.var(l.w2))?;
    Ok(tape.add_row(o, pv.var(l.b2))?)
}

/// Pre-LN attention then pre-LN FFN, each with a residual connection.
#[allow(clippy::too_many_arguments)]
fn sam_layer(
    tape: &mut Tape,
    pv: &ParamVars,
    l: &SamLayer,
    c: &VabsNetConfig,
    x: Var,
    e: Var,
    src: &Arc<[usize]>,
    dst: &Arc<[usize]>,
    n: usize,
    trace: &mut ForwardTrace,
    label: String,
) -> Result<Var> {
    let xn = affine_norm(tape, pv, l.ln1, x)?;
    let upd = sparse_attention(tape, pv, l, c, xn, e, src, dst, n, trace, label)?;
    let x = tape.add(x, upd)?;
    let xn = affine_norm(tape, pv, l.ln2, x)?;
    let upd = ffn(tape, pv, l, xn)?;
    Ok(tape.add(x, upd)?)
}

fn compact_track(f: &Features) -> CompactTrack {
    let mut members: Vec<usize> = f.ca_of_residue.clone();
    if let Some(o) = f.origin {
        members.push(o);
    }
    let mut pos = vec![usize::MAX; f.n_nodes()];
    for (i, &m) in members.iter().enumerate() {
        pos[m] = i;
    }
    CompactTrack {
        src: f.res.src.iter().map(|&s| pos[s]).collect(),
        dst: f.res.dst.iter().map(|&d| pos[d]).collect(),
        members: members.into(),
    }
}

/// Residue-track layer: runs on the CA (and origin) rows only and adds its
/// update back into those rows of the shared storage.
#[allow(clippy::too_many_arguments)]
fn residue_sublayer(
    tape: &mut Tape,
    pv: &ParamVars,
    l: &SamLayer,
    c: &VabsNetConfig,
    x: Var,
    e: Var,
    t: &CompactTrack,
    n: usize,
    trace: &mut ForwardTrace,
    label: String,
) -> Result<Var> {
    let m = t.members.len();
    let xr = tape.gather_rows(x, &t.members)?;
    let out = sam_layer(tape, pv, l, c, xr, e, &t.src, &t.dst, m, trace, label)?;
    let delta = tape.sub(out, xr)?;
    let scattered = tape.segment_sum(delta, &t.members, n)?;
    Ok(tape.add(x, scattered)?)
}

#[cfg(test)]
mod tests;
