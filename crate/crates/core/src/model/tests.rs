use super::*;
use crate::encodings::featurize;
use crate::graph::build_bilevel_graph;
use crate::masking::apply_noise;
use crate::structures::{center_and_rotate, generate_synthetic_chain, ProteinChain, Rotation};
use rand::Rng;

fn tiny() -> VabsNetConfig {
    VabsNetConfig {
        n_layers: 1,
        node_dim: 4,
        edge_dim: 3,
        ffn_dim: 5,
        n_heads: 2,
        k_atom: 4,
        k_res: 3,
        init_seed: 7,
        ..Default::default()
    }
}

fn features(chain: &ProteinChain, c: &VabsNetConfig) -> Features {
    let g = build_bilevel_graph(chain, c.k_atom, c.k_res, c.use_virtual_origin).unwrap();
    featurize(&g, chain, None, c.external_dim, &c.feature_config()).unwrap()
}

fn jittered(n: usize, seed: u64) -> ProteinChain {
    let clean = generate_synthetic_chain(n, seed).unwrap();
    apply_noise(&clean, &[0..n], 0.05, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().0
}

fn randomize(model: &mut VabsNet, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

fn run(model: &VabsNet, f: &Features) -> Tensor {
    let mut tape = Tape::new();
    let pv = model.record(&mut tape, false);
    let out = model.forward(&mut tape, &pv, f, &mut ForwardTrace::default()).unwrap();
    tape.value(out.nodes).clone()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + vabs_autodiff::LAYER_NORM_EPS).sqrt() * g[i] + b[i])
        .collect()
}

fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    (0..w.cols()).map(|j| (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum()).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Dense evaluation of one pre-LN SAM layer.
fn dense_sam(model: &VabsNet, l: &SamLayer, x: &[Vec<f64>], e: &[Vec<f64>], src: &[usize], dst: &[usize]) -> Vec<Vec<f64>> {
    let p = |id: ParamId| model.params.get(id);
    let row = |id: ParamId| p(id).data().to_vec();
    let (h, dh) = (model.config.n_heads, model.config.head_dim());
    let xn: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &row(l.ln1.0), &row(l.ln1.1))).collect();
    let q: Vec<Vec<f64>> = xn.iter().map(|r| vecmat(r, p(l.attn.wq))).collect();
    let k: Vec<Vec<f64>> = xn.iter().map(|r| vecmat(r, p(l.attn.wk))).collect();
    let v: Vec<Vec<f64>> = xn.iter().map(|r| vecmat(r, p(l.attn.wv))).collect();
    let mut out = Vec::new();
    for i in 0..x.len() {
        let edges: Vec<usize> = (0..dst.len()).filter(|&m| dst[m] == i).collect();
        let mut agg = vec![0.0; model.config.node_dim];
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            let logits: Vec<f64> = edges
                .iter()
                .map(|&m| {
                    let dot: f64 = cols.clone().map(|c| q[i][c] * k[src[m]][c]).sum();
                    dot / (dh as f64).sqrt() + vecmat(&e[m], p(l.attn.wb))[head]
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
            for (t, &m) in edges.iter().enumerate() {
                let a = (logits[t] - mx).exp() / z;
                for c in cols.clone() {
                    agg[c] += a * v[src[m]][c];
                }
            }
        }
        let upd = vecmat(&agg, p(l.wo));
        let x1: Vec<f64> = x[i].iter().zip(&upd).map(|(a, b)| a + b).collect();
        let xn2 = layer_norm(&x1, &row(l.ln2.0), &row(l.ln2.1));
        let hid: Vec<f64> = vecmat(&xn2, p(l.w1)).iter().zip(&row(l.b1)).map(|(a, b)| gelu(a + b)).collect();
        let f: Vec<f64> = vecmat(&hid, p(l.w2)).iter().zip(&row(l.b2)).map(|(a, b)| a + b).collect();
        out.push(x1.iter().zip(&f).map(|(a, b)| a + b).collect());
    }
    out
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

#[test]
fn sam_layer_matches_dense_oracle() {
    let mut model = VabsNet::new(tiny()).unwrap();
    randomize(&mut model, 1, 0.3);
    let l = model.handles.blocks[0].atom;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let src = [1usize, 2, 0, 2, 0];
    let dst = [0usize, 0, 1, 1, 2];
    let e: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();

    let mut tape = Tape::new();
    let pv = model.record(&mut tape, false);
    let xv = tape.constant(Tensor::from_rows(&x).unwrap());
    let ev = tape.constant(Tensor::from_rows(&e).unwrap());
    let (s, d): (Arc<[usize]>, Arc<[usize]>) = (src.to_vec().into(), dst.to_vec().into());
    let mut trace = ForwardTrace::default();
    let y = sam_layer(&mut tape, &pv, &l, &model.config, xv, ev, &s, &d, 3, &mut trace, "t".into()).unwrap();
    let got = tensor_rows(tape.value(y));
    let want = dense_sam(&model, &l, &x, &e, &src, &dst);
    for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    // node 2 has one in-neighbor: its weights are exactly 1
    let w = tape.value(trace.attention[0].weights);
    assert_eq!(w.row_slice(4), [1.0, 1.0]);
}

#[test]
fn zero_bias_and_equal_keys_give_uniform_attention() {
    let mut model = VabsNet::new(tiny()).unwrap();
    let l = model.handles.blocks[0].atom;
    *model.params.get_mut(l.attn.wb) = Tensor::zeros(3, 2);
    let mut tape = Tape::new();
    let pv = model.record(&mut tape, false);
    let xv = tape.constant(Tensor::from_rows(&vec![vec![0.3, -0.2, 1.0, 0.5]; 4]).unwrap());
    let ev = tape.constant(Tensor::filled(3, 3, 0.7));
    let (s, d): (Arc<[usize]>, Arc<[usize]>) = (vec![1, 2, 3].into(), vec![0, 0, 0].into());
    let mut trace = ForwardTrace::default();
    let (w, _) = attention_weights(&mut tape, &pv, &l.attn, &model.config, xv, ev, &s, &d, 1).unwrap();
    trace.attention.clear();
    for v in tape.value(w).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn node_without_in_edges_is_a_contract_error() {
    let model = VabsNet::new(tiny()).unwrap();
    let l = model.handles.blocks[0].atom;
    let mut tape = Tape::new();
    let pv = model.record(&mut tape, false);
    let xv = tape.constant(Tensor::zeros(2, 4));
    let ev = tape.constant(Tensor::zeros(1, 3));
    let (s, d): (Arc<[usize]>, Arc<[usize]>) = (vec![0].into(), vec![1].into());
    let r = sam_layer(&mut tape, &pv, &l, &model.config, xv, ev, &s, &d, 2, &mut ForwardTrace::default(), "t".into());
    assert!(r.is_err());
}

#[test]
fn output_shape_includes_origin() {
    let chain = jittered(6, 2);
    let model = VabsNet::new(tiny()).unwrap();
    let out = run(&model, &features(&chain, &model.config));
    assert_eq!(out.shape(), [chain.n_atoms() + 1, 4]);
    assert!(out.all_finite());
}

#[test]
fn zero_output_projections_make_blocks_identity() {
    let chain = jittered(5, 3);
    let mut c = tiny();
    c.n_layers = 2;
    let mut model = VabsNet::new(c).unwrap();
    randomize(&mut model, 2, 0.2);
    for b in model.handles.blocks.clone() {
        for l in [b.atom, b.res] {
            for id in [l.wo, l.w2, l.b2] {
                let t = model.params.get_mut(id);
                t.data_mut().fill(0.0);
            }
        }
    }
    let f = features(&chain, &model.config);
    let out = run(&model, &f);
    // identity blocks: output is the final norm of the input embedding
    let emb = |id: ParamId, r: usize| model.params.get(id).row_slice(r).to_vec();
    let h = &model.handles;
    for i in 0..f.n_nodes() {
        let x: Vec<f64> = emb(h.emb_atom, f.nodes.atom_type[i])
            .iter()
            .zip(emb(h.emb_res, f.nodes.residue_type[i]))
            .map(|(a, b)| a + b)
            .collect();
        let want = layer_norm(
            &x,
            model.params.get(h.final_ln.0).data(),
            model.params.get(h.final_ln.1).data(),
        );
        for (a, b) in out.row_slice(i).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn residue_track_writes_only_ca_slots() {
    let chain = jittered(7, 5);
    let mut model = VabsNet::new(tiny()).unwrap();
    randomize(&mut model, 3, 0.2);
    let f = features(&chain, &model.config);
    let l = model.handles.blocks[0].res;
    let compact = compact_track(&f);
    let n = f.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();

    let eval = |x: &[Vec<f64>]| {
        let mut tape = Tape::new();
        let pv = model.record(&mut tape, false);
        let xv = tape.constant(Tensor::from_rows(x).unwrap());
        let e = model.encode_edges(&mut tape, &pv, &model.handles.edge_res, &f.res).unwrap();
        let y = residue_sublayer(&mut tape, &pv, &l, &model.config, xv, e, &compact, n, &mut ForwardTrace::default(), "r".into())
            .unwrap();
        (tensor_rows(tape.value(y)), tensor_rows(tape.value(e)))
    };
    let (y, e) = eval(&x);
    let members: Vec<usize> = compact.members.to_vec();
    for i in 0..n {
        if !members.contains(&i) {
            assert_eq!(y[i], x[i]);
        }
    }
    // CA rows equal a dense SAM over the compact residue graph
    let xc: Vec<Vec<f64>> = members.iter().map(|&m| x[m].clone()).collect();
    let want = dense_sam(&model, &l, &xc, &e, &compact.src, &compact.dst);
    for (ci, &m) in members.iter().enumerate() {
        for (a, b) in y[m].iter().zip(&want[ci]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    // perturbing one CA slot changes another CA's output
    let mut x2 = x.clone();
    x2[members[0]][0] += 0.5;
    let (y2, _) = eval(&x2);
    assert!(members[1..].iter().any(|&m| y2[m] != y[m]));
}

#[test]
fn movement_head_fixed_points_and_oracle() {
    let chain = jittered(4, 6);
    let mut model = VabsNet::new(tiny()).unwrap();
    randomize(&mut model, 4, 0.3);
    let f = features(&chain, &model.config);
    let noisy: Vec<f64> = f.coords.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    let predict = |model: &VabsNet, f: &Features| {
        let mut tape = Tape::new();
        let pv = model.record(&mut tape, false);
        let mut trace = ForwardTrace::default();
        let out = model.forward(&mut tape, &pv, f, &mut trace).unwrap();
        let rp = model.movement_head(&mut tape, &pv, f, &out, &mut trace).unwrap();
        (tape.value(rp).clone(), tensor_rows(tape.value(out.nodes)), tensor_rows(tape.value(out.atom_edges)))
    };
    let (rp, nodes, edges) = predict(&model, &f);

    // dense oracle
    let m = &model.handles.movement;
    let p = |id: ParamId| model.params.get(id);
    let (h, dh) = (model.config.n_heads, model.config.head_dim());
    let q: Vec<Vec<f64>> = nodes.iter().map(|r| vecmat(r, p(m.attn.wq))).collect();
    let k: Vec<Vec<f64>> = nodes.iter().map(|r| vecmat(r, p(m.attn.wk))).collect();
    let v: Vec<Vec<f64>> = nodes.iter().map(|r| vecmat(r, p(m.attn.wv))).collect();
    for i in 0..f.n_nodes() {
        let es: Vec<usize> = (0..f.atom.len()).filter(|&e| f.atom.dst[e] == i).collect();
        let mut b = vec![vec![0.0; 4]; 3];
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            let logits: Vec<f64> = es
                .iter()
                .map(|&e| {
                    let j = f.atom.src[e];
                    cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                        + vecmat(&edges[e], p(m.attn.wb))[head]
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (t, &e) in es.iter().enumerate() {
                let j = f.atom.src[e];
                let a = logits[t].exp() / z;
                for axis in 0..3 {
                    let rel = f.coords[i][axis] - f.coords[j][axis];
                    for c in cols.clone() {
                        b[axis][c] += a * rel * v[j][c];
                    }
                }
            }
        }
        for axis in 0..3 {
            let want = f.coords[i][axis] + vecmat(&b[axis], p(m.wp[axis]))[0];
            assert!((rp.get(i, axis) - want).abs() < 1e-10);
        }
    }

    // zero per-axis projections leave coordinates unchanged
    for axis in 0..3 {
        model.params.get_mut(m.wp[axis]).data_mut().fill(0.0);
    }
    let (rp, _, _) = predict(&model, &f);
    assert_eq!(rp.data(), noisy.as_slice());

    // coincident nodes give zero relative coordinates
    randomize(&mut model, 5, 0.3);
    let mut same = f.clone();
    same.coords.iter_mut().for_each(|c| *c = Vec3::new(1.0, 2.0, 3.0));
    let (rp, _, _) = predict(&model, &same);
    for i in 0..same.n_nodes() {
        assert_eq!(rp.row_slice(i), [1.0, 2.0, 3.0]);
    }
}

use crate::structures::Vec3;

#[test]
fn heads_shapes_and_uniform_logits() {
    let chain = jittered(5, 1);
    let model = VabsNet::new(tiny()).unwrap();
    let f = features(&chain, &model.config);
    let mut tape = Tape::new();
    let pv = model.record(&mut tape, false);
    let out = model.forward(&mut tape, &pv, &f, &mut ForwardTrace::default()).unwrap();
    let cas: Arc<[usize]> = f.ca_of_residue.clone().into();
    let logits = model.residue_type_head(&mut tape, &pv, out.nodes, &cas).unwrap();
    assert_eq!(tape.value(logits).shape(), [5, 20]);
    assert!(tape.value(logits).data().iter().all(|v| *v == 0.0));
    let t = model.torsion_head(&mut tape, &pv, out.nodes, &cas).unwrap();
    assert_eq!(tape.value(t).shape(), [35, 2]);
    let atoms: Arc<[usize]> = (0..chain.n_atoms()).collect::<Vec<_>>().into();
    let s = model.sasa_head(&mut tape, &pv, out.nodes, &atoms).unwrap();
    assert_eq!(tape.value(s).shape(), [chain.n_atoms(), 1]);
    let c = model.node_class_head(&mut tape, &pv, out.nodes, &atoms).unwrap();
    assert_eq!(tape.value(c).shape(), [chain.n_atoms(), 1]);
}

#[test]
fn vector_encoder_flag_changes_output() {
    let chain = jittered(6, 2);
    let a = VabsNet::new(tiny()).unwrap();
    let b = VabsNet::new(VabsNetConfig {
        use_vector_encoder: false,
        ..tiny()
    })
    .unwrap();
    assert!(b.params.id("edge.atom.wf").is_none());
    assert!(a.params.id("edge.atom.wf").is_some());
    let fa = features(&chain, &a.config);
    let ya = run(&a, &fa);
    let yb = run(&b, &fa);
    assert!(ya.max_abs_diff(&yb) > 1e-6);
}

#[test]
fn feature_flag_mismatch_is_config_error() {
    let chain = jittered(6, 2);
    let model = VabsNet::new(tiny()).unwrap();
    let so3 = tiny().so3_invariant();
    let f = features(&chain, &so3);
    let mut tape = Tape::new();
    let pv = model.record(&mut tape, false);
    assert!(matches!(
        model.forward(&mut tape, &pv, &f, &mut ForwardTrace::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn rotation_invariance_split() {
    let chain = jittered(10, 8);
    let mut so3 = VabsNet::new(VabsNetConfig {
        n_layers: 2,
        node_dim: 16,
        edge_dim: 8,
        ffn_dim: 16,
        ..tiny().so3_invariant()
    })
    .unwrap();
    randomize(&mut so3, 6, 0.1);
    let mut dflt = VabsNet::new(VabsNetConfig {
        n_layers: 2,
        node_dim: 16,
        edge_dim: 8,
        ffn_dim: 16,
        ..tiny()
    })
    .unwrap();
    randomize(&mut dflt, 6, 0.1);
    let base_so3 = run(&so3, &features(&chain, &so3.config));
    let base_def = run(&dflt, &features(&chain, &dflt.config));
    let moved = center_and_rotate(&chain, &Rotation::identity(), Some(11)).unwrap();
    let so3_moved = run(&so3, &features(&moved, &so3.config));
    let def_moved = run(&dflt, &features(&moved, &dflt.config));
    assert!(base_so3.max_abs_diff(&so3_moved) < 1e-4);
    assert!(base_def.max_abs_diff(&def_moved) > 1e-2);
}

#[test]
fn attention_rows_sum_to_one() {
    let chain = jittered(8, 3);
    let mut model = VabsNet::new(VabsNetConfig { n_layers: 2, ..tiny() }).unwrap();
    randomize(&mut model, 8, 0.5);
    let f = features(&chain, &model.config);
    let mut tape = Tape::new();
    let pv = model.record(&mut tape, false);
    let mut trace = ForwardTrace::default();
    let out = model.forward(&mut tape, &pv, &f, &mut trace).unwrap();
    model.movement_head(&mut tape, &pv, &f, &out, &mut trace).unwrap();
    assert_eq!(trace.attention.len(), 5);
    for rec in &trace.attention {
        let w = tape.value(rec.weights);
        let mut sums = vec![0.0; rec.n_nodes * w.cols()];
        for (e, &d) in rec.dst.iter().enumerate() {
            for h in 0..w.cols() {
                sums[d * w.cols() + h] += w.get(e, h);
            }
        }
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12), "{}", rec.label);
    }
}

#[test]
fn checkpoint_round_trip() {
    let chain = jittered(6, 4);
    let mut model = VabsNet::new(tiny()).unwrap();
    randomize(&mut model, 9, 0.2);
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&model, dir.path(), 3).unwrap();
    let back = checkpoint::load(dir.path()).unwrap();
    assert_eq!(back, model);
    let f = features(&chain, &model.config);
    assert!(run(&model, &f).max_abs_diff(&run(&back, &f)) <= 1e-12);
    let m = checkpoint::read_manifest(dir.path()).unwrap();
    assert_eq!(m.step, 3);
    assert_eq!(m.n_scalars(), model.params.n_scalars());
    assert!(m.params.iter().any(|p| p.name == "block.0.atom.sam.wq"));

    let mut wider = VabsNet::new(VabsNetConfig { node_dim: 8, ..tiny() }).unwrap();
    match checkpoint::load_into(&mut wider, dir.path(), |_| false) {
        Err(Error::ParamShape { name, .. }) => assert_eq!(name, "embed.atom"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn param_names_are_stable() {
    let model = VabsNet::new(tiny()).unwrap();
    let names = model.params.names();
    assert_eq!(names[0], "embed.atom");
    for want in [
        "edge.atom.alpha",
        "edge.res.pos",
        "block.0.atom.sam.wq",
        "block.0.res.ffn.w2",
        "movement.wpz",
        "head.res_type.w",
        "head.torsion.out.w",
        "head.sasa.b",
        "head.node_class.w",
    ] {
        assert!(model.params.id(want).is_some(), "{want}");
    }
    assert!(VabsNet::new(VabsNetConfig { node_dim: 5, ..tiny() }).is_err());
}
