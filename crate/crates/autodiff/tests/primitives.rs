use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vabs_autodiff::{grad_check, AutodiffError, Result, Tape, Tensor, Var};

const EPS: f64 = 1e-5;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Contracts a non-scalar output with fixed random weights so the check
/// exercises every output component.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(shape[0], shape[1], &mut rng));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(name: &str, point: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let err = grad_check(f, point, EPS).unwrap();
    assert!(err < 1e-6, "{name}: max relative error {err:e}");
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(3, 4, &mut rng);
    let b = random(4, 2, &mut rng);
    let b2 = b.clone();
    let err = grad_check(
        move |t, x| {
            let bv = t.constant(b2.clone());
            let y = t.matmul(x, bv)?;
            weighted_sum(t, y, 9)
        },
        &a,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-7, "{err:e}");
    let err = grad_check(
        move |t, x| {
            let av = t.constant(a.clone());
            let y = t.matmul(av, x)?;
            weighted_sum(t, y, 9)
        },
        &b,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-7, "{err:e}");
}

#[test]
fn linear_and_quadratic_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(1, 6, &mut rng);
    let w = random(6, 1, &mut rng);
    let err = grad_check(
        move |t, v| {
            let wv = t.constant(w.clone());
            t.matmul(v, wv)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-9, "{err:e}");
    let err = grad_check(
        |t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-9, "{err:e}");
}

#[test]
fn non_scalar_output_is_a_contract_error() {
    let x = Tensor::row(vec![1.0, 2.0]);
    let r = grad_check(|t, v| Ok(t.scale(v, 2.0)), &x, EPS);
    assert!(matches!(r, Err(AutodiffError::Contract(_))));
}

#[test]
fn shape_errors_name_the_op() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(2, 3));
    let b = t.constant(Tensor::zeros(2, 3));
    let err = t.matmul(a, b).unwrap_err();
    assert!(err.to_string().contains("matmul"));
    assert!(err.to_string().contains("[2, 3]"));
    let c = t.constant(Tensor::zeros(3, 2));
    assert!(t.add(a, c).unwrap_err().to_string().contains("add"));
}

#[test]
fn singleton_segment_softmax_is_one() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::column(vec![3.7]));
    let seg: Arc<[usize]> = vec![0].into();
    let y = t.segment_softmax(x, &seg, 1).unwrap();
    assert_eq!(t.value(y).data(), &[1.0]);
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::row(vec![4.2; 8]));
    let y = t.layer_norm(x);
    assert!(t.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn constant_subgraph_allocates_no_gradient() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::row(vec![1.0, 2.0]));
    let d = t.mul(c, c).unwrap();
    let s = t.sum(d);
    let grads = t.backward(s).unwrap();
    assert_eq!(grads.allocated(), 0);

    let p = t.param(Tensor::row(vec![1.0, 2.0]));
    let e = t.mul(p, c).unwrap();
    let s2 = t.sum(e);
    let grads = t.backward(s2).unwrap();
    assert!(grads.get(c).is_none());
    assert!(grads.get(d).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn elementwise_and_broadcast_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(4, 5, &mut rng);
    let other = random(4, 5, &mut rng);
    let row = random(1, 5, &mut rng);
    let col = random(4, 1, &mut rng);

    let o = other.clone();
    check("add", &x, move |t, v| {
        let c = t.constant(o.clone());
        let y = t.add(v, c)?;
        weighted_sum(t, y, 1)
    });
    let o = other.clone();
    check("sub", &x, move |t, v| {
        let c = t.constant(o.clone());
        let y = t.sub(c, v)?;
        weighted_sum(t, y, 1)
    });
    let o = other.clone();
    check("mul", &x, move |t, v| {
        let c = t.constant(o.clone());
        let y = t.mul(v, c)?;
        weighted_sum(t, y, 1)
    });
    let r = row.clone();
    check("add_row/x", &x, move |t, v| {
        let c = t.constant(r.clone());
        let y = t.add_row(v, c)?;
        weighted_sum(t, y, 2)
    });
    let xx = x.clone();
    check("add_row/row", &row, move |t, v| {
        let c = t.constant(xx.clone());
        let y = t.add_row(c, v)?;
        weighted_sum(t, y, 2)
    });
    let xx = x.clone();
    check("mul_row/row", &row, move |t, v| {
        let c = t.constant(xx.clone());
        let y = t.mul_row(c, v)?;
        weighted_sum(t, y, 2)
    });
    let r = row.clone();
    check("mul_row/x", &x, move |t, v| {
        let c = t.constant(r.clone());
        let y = t.mul_row(v, c)?;
        weighted_sum(t, y, 2)
    });
    let xx = x.clone();
    check("mul_col/col", &col, move |t, v| {
        let c = t.constant(xx.clone());
        let y = t.mul_col(c, v)?;
        weighted_sum(t, y, 3)
    });
    let cc = col.clone();
    check("mul_col/x", &x, move |t, v| {
        let c = t.constant(cc.clone());
        let y = t.mul_col(v, c)?;
        weighted_sum(t, y, 3)
    });
    // keep the divisor away from zero
    let shifted = Tensor::column(col.data().iter().map(|v| v.abs() + 0.5).collect());
    let xx = x.clone();
    check("div_col/col", &shifted, move |t, v| {
        let c = t.constant(xx.clone());
        let y = t.div_col(c, v)?;
        weighted_sum(t, y, 4)
    });
    let sc = shifted.clone();
    check("div_col/x", &x, move |t, v| {
        let c = t.constant(sc.clone());
        let y = t.div_col(v, c)?;
        weighted_sum(t, y, 4)
    });
    check("scale", &x, |t, v| {
        let y = t.scale(v, -1.7);
        weighted_sum(t, y, 5)
    });
    check("add_scalar", &x, |t, v| {
        let y = t.add_scalar(v, 0.3);
        let y = t.mul(y, y)?;
        weighted_sum(t, y, 5)
    });
    check("gelu", &x, |t, v| {
        let y = t.scale(v, 3.0);
        let y = t.gelu(y);
        weighted_sum(t, y, 6)
    });
    check("exp", &x, |t, v| {
        let y = t.exp(v);
        weighted_sum(t, y, 6)
    });
    let positive = Tensor::new(4, 5, x.data().iter().map(|v| v.abs() + 0.2).collect()).unwrap();
    check("sqrt", &positive, |t, v| {
        let y = t.sqrt(v);
        weighted_sum(t, y, 7)
    });
    // relu and abs away from their kinks
    let away = Tensor::new(4, 5, x.data().iter().map(|v| v + 0.05 * v.signum()).collect()).unwrap();
    check("relu", &away, |t, v| {
        let y = t.relu(v);
        weighted_sum(t, y, 8)
    });
    check("abs", &away, |t, v| {
        let y = t.abs(v);
        weighted_sum(t, y, 8)
    });
    check("l2_norm", &x, |t, v| {
        let y = t.l2_norm(v);
        weighted_sum(t, y, 9)
    });
    check("mean", &x, |t, v| {
        let y = t.mul(v, v)?;
        t.mean(y)
    });
}

#[test]
fn structural_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(6, 4, &mut rng);
    let other = random(6, 3, &mut rng);

    let o = other.clone();
    check("concat", &x, move |t, v| {
        let c = t.constant(o.clone());
        let y = t.concat(&[c, v, c])?;
        weighted_sum(t, y, 1)
    });
    check("slice_cols", &x, |t, v| {
        let y = t.slice_cols(v, 1, 3)?;
        weighted_sum(t, y, 2)
    });
    check("reshape", &x, |t, v| {
        let y = t.reshape(v, 12, 2)?;
        weighted_sum(t, y, 3)
    });
    let idx: Arc<[usize]> = vec![5, 0, 0, 3, 2].into();
    let i2 = Arc::clone(&idx);
    check("gather_rows", &x, move |t, v| {
        let y = t.gather_rows(v, &i2)?;
        weighted_sum(t, y, 4)
    });
    let seg: Arc<[usize]> = vec![2, 0, 2, 1, 0, 2].into();
    let s2 = Arc::clone(&seg);
    check("segment_sum", &x, move |t, v| {
        let y = t.segment_sum(v, &s2, 4)?;
        weighted_sum(t, y, 5)
    });
    let s2 = Arc::clone(&seg);
    check("segment_softmax", &x, move |t, v| {
        let y = t.segment_softmax(v, &s2, 3)?;
        weighted_sum(t, y, 6)
    });
    check("sum_col_groups", &x, |t, v| {
        let y = t.sum_col_groups(v, 2)?;
        weighted_sum(t, y, 7)
    });
    check("repeat_cols", &x, |t, v| {
        let y = t.repeat_cols(v, 3)?;
        weighted_sum(t, y, 8)
    });
    check("layer_norm", &x, |t, v| {
        let y = t.layer_norm(v);
        weighted_sum(t, y, 9)
    });
    check("embedding_lookup", &x, move |t, v| {
        let y = t.embedding_lookup(v, &idx)?;
        weighted_sum(t, y, 10)
    });
}

#[test]
fn loss_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random(5, 7, &mut rng);
    let targets: Arc<[usize]> = vec![0, 6, 3, 3, 1].into();
    check("cross_entropy", &logits, move |t, v| {
        t.cross_entropy_with_logits(v, &targets)
    });
    let labels = vec![1.0, 0.0, 1.0, 1.0, 0.0];
    let z = random(5, 1, &mut rng);
    check("bce_with_logits", &z, move |t, v| t.bce_with_logits(v, &labels));

    let pred = random(4, 3, &mut rng);
    let target = random(4, 3, &mut rng);
    let tg = target.clone();
    check("l1_loss", &pred, move |t, v| {
        let c = t.constant(tg.clone());
        t.l1_loss(v, c)
    });
    let tg = target.clone();
    check("l2_loss", &pred, move |t, v| {
        let c = t.constant(tg.clone());
        t.l2_loss(v, c)
    });
    check("l1_loss/target", &target, move |t, v| {
        let c = t.constant(pred.clone());
        t.l1_loss(c, v)
    });
}

#[test]
fn composed_attention_like_graph() {
    // logits -> segment softmax -> weighted messages -> segment sum
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(4, 6, &mut rng);
    let wq = random(6, 6, &mut rng);
    let src: Arc<[usize]> = vec![1, 2, 3, 0, 2, 0, 1].into();
    let dst: Arc<[usize]> = vec![0, 0, 0, 1, 1, 2, 3].into();
    check("attention", &x, move |t, v| {
        let w = t.constant(wq.clone());
        let q = t.matmul(v, w)?;
        let qd = t.gather_rows(q, &dst)?;
        let ks = t.gather_rows(v, &src)?;
        let prod = t.mul(qd, ks)?;
        let logits = t.sum_col_groups(prod, 3)?;
        let a = t.segment_softmax(logits, &dst, 4)?;
        let ar = t.repeat_cols(a, 3)?;
        let msg = t.mul(ar, ks)?;
        let agg = t.segment_sum(msg, &dst, 4)?;
        let y = t.layer_norm(agg);
        weighted_sum(t, y, 11)
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn segment_softmax_rows_sum_to_one(
        seed in any::<u64>(),
        rows in 1usize..40,
        cols in 1usize..5,
        n_seg in 1usize..8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-20.0..20.0)).collect()).unwrap();
        let seg: Arc<[usize]> = (0..rows).map(|_| rng.random_range(0..n_seg)).collect::<Vec<_>>().into();
        let mut t = Tape::new();
        let v = t.constant(x);
        let y = t.segment_softmax(v, &seg, n_seg).unwrap();
        let y = t.value(y);
        let mut sums = vec![0.0; n_seg * cols];
        for (r, &s) in seg.iter().enumerate() {
            for j in 0..cols {
                sums[s * cols + j] += y.get(r, j);
            }
        }
        for s in 0..n_seg {
            if seg.contains(&s) {
                for j in 0..cols {
                    prop_assert!((sums[s * cols + j] - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_gradient_on_random_shapes(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(m, k, &mut rng);
        let b = random(k, n, &mut rng);
        let err = grad_check(move |t, v| {
            let bv = t.constant(b.clone());
            let y = t.matmul(v, bv)?;
            let y = t.gelu(y);
            weighted_sum(t, y, seed)
        }, &a, EPS).unwrap();
        prop_assert!(err < 1e-6, "{}", err);
    }
}
