use diffnet::gradcheck::{check_input, check_params};
use diffnet::{
    key_mask, Activation, DecoderBlock, Embedding, EncoderBlock, Error, Graph, LayerNorm, Linear,
    Mlp, MultiHeadAttention, ParamStore, Tensor, Var,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduces any output to a scalar with fixed random weights so that every
/// entry of the output contributes a distinct gradient.
fn probe_loss(g: &mut Graph, y: Var, seed: u64) -> diffnet::Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::randn(&shape, &mut rng(seed)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_with_identity_is_identity() {
    let x = Tensor::randn(&[3, 4], &mut rng(1));
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let i = g.constant(Tensor::identity(4));
    let y = g.matmul(a, i).unwrap();
    assert!(g.value(y).max_abs_diff(&x) < 1e-15);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::randn(&[5, 7], &mut rng(2)));
    let s = g.softmax(a).unwrap();
    for r in 0..5 {
        let total: f64 = g.value(s).row_slice(r).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn tanh_sum_gradient_at_zero_is_ones() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 3]));
    let t = g.tanh(x);
    let s = g.sum(t);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[1.0; 6]);
}

#[test]
fn unused_parameter_gets_exact_zero() {
    let mut store = ParamStore::new("m");
    let used = store.add("used", Tensor::row(vec![0.5, 1.5]));
    let unused = store.add("unused", Tensor::row(vec![3.0]));
    let mut g = Graph::new();
    let u = g.param(&store, used);
    let l = g.sum_squares(u);
    let grads = g.backward(l).unwrap().for_store(&store);
    assert_eq!(grads.get(unused), &[0.0]);
    assert_eq!(grads.get(used), &[1.0, 3.0]);
}

#[test]
fn second_backward_is_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::row(vec![1.0, 2.0]));
    let l = g.sum_squares(x);
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(Error::TapeConsumed)));
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::new();
    let x = g.input(Tensor::row(vec![1.0, 2.0]));
    let y = g.square(x);
    assert!(matches!(g.backward(y), Err(Error::NonScalarLoss { .. })));
}

#[test]
fn frozen_store_contributes_no_gradient() {
    let mut store = ParamStore::new("frozen");
    let w = store.add("w", Tensor::row(vec![2.0]));
    store.set_frozen(true);
    let mut g = Graph::new();
    let v = g.param(&store, w);
    let l = g.sum_squares(v);
    let grads = g.backward(l).unwrap().for_store(&store);
    assert!(grads.is_zero());
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut r = rng(3);
    let mut store = ParamStore::new("mlp");
    let l1 = Linear::new(&mut store, "l1", 5, 8, &mut r);
    let l2 = Linear::new(&mut store, "l2", 8, 8, &mut r);
    let l3 = Linear::new(&mut store, "l3", 8, 3, &mut r);
    let x = Tensor::randn(&[4, 5], &mut r);
    let target = Tensor::randn(&[4, 3], &mut r);
    let report = check_params(&store, 1e-3, |g, s| {
        let xi = g.constant(x.clone());
        let h = l1.forward(g, s, xi)?;
        let h = g.tanh(h);
        let h = l2.forward(g, s, h)?;
        let h = g.gelu(h);
        let y = l3.forward(g, s, h)?;
        let t = g.constant(target.clone());
        g.mse(y, t)
    })
    .unwrap();
    assert!(report.passes(TOL), "{:?}", report.worst());
}

type UnaryCase = (&'static str, fn(&mut Graph, Var) -> diffnet::Result<Var>);

#[test]
fn elementwise_ops_match_finite_differences() {
    let cases: Vec<UnaryCase> = vec![
        ("neg", |g, x| Ok(g.neg(x))),
        ("tanh", |g, x| Ok(g.tanh(x))),
        ("sigmoid", |g, x| Ok(g.sigmoid(x))),
        ("softplus", |g, x| Ok(g.softplus(x))),
        ("exp", |g, x| Ok(g.exp(x))),
        ("gelu", |g, x| Ok(g.gelu(x))),
        ("silu", |g, x| Ok(g.silu(x))),
        ("square", |g, x| Ok(g.square(x))),
        ("scale", |g, x| Ok(g.scale(x, -2.5))),
        ("add_scalar", |g, x| Ok(g.add_scalar(x, 0.7))),
        ("sqrt", |g, x| {
            let s = g.square(x);
            let s = g.add_scalar(s, 0.1);
            Ok(g.sqrt(s))
        }),
        ("ln", |g, x| {
            let s = g.square(x);
            let s = g.add_scalar(s, 0.5);
            Ok(g.ln(s))
        }),
        ("relu", |g, x| Ok(g.relu(x))),
        ("clamp", |g, x| Ok(g.clamp(x, -0.5, 0.5))),
        ("dead_zone", |g, x| g.dead_zone(x, &[0.05, 0.1, 0.15, 0.2])),
        ("softmax", |g, x| g.softmax(x)),
        ("transpose", |g, x| g.transpose(x)),
        ("reshape", |g, x| g.reshape(x, &[4, 3])),
        ("sum_axis0", |g, x| g.sum_axis(x, 0)),
        ("sum_axis1", |g, x| g.sum_axis(x, 1)),
        ("mean_axis0", |g, x| g.mean_axis(x, 0)),
        ("mean_axis1", |g, x| g.mean_axis(x, 1)),
        ("mean", |g, x| Ok(g.mean(x))),
        ("slice0", |g, x| g.slice(x, 0, 1, 3)),
        ("slice1", |g, x| g.slice(x, 1, 1, 3)),
        ("select_cols", |g, x| g.select_cols(x, &[3, 0, 0])),
        ("diff_rows", |g, x| g.diff_rows(x, 20.0)),
        ("gather", |g, x| g.gather(x, &[2, 0, 2, 1])),
        ("self_matmul", |g, x| {
            let t = g.transpose(x)?;
            g.matmul(x, t)
        }),
        ("concat0", |g, x| {
            let y = g.tanh(x);
            g.concat(&[x, y], 0)
        }),
        ("concat1", |g, x| {
            let y = g.square(x);
            g.concat(&[y, x], 1)
        }),
    ];
    // Keep entries away from the kinks of relu / clamp / dead_zone.
    let mut x = Tensor::randn(&[3, 4], &mut rng(4));
    for v in x.data_mut() {
        if v.abs() < 0.3 {
            *v += 0.35f64.copysign(*v);
        }
        if (v.abs() - 0.5).abs() < 0.05 {
            *v *= 1.2;
        }
    }
    for (i, (name, op)) in cases.into_iter().enumerate() {
        let check = check_input(&x, STEP, |g, xv| {
            let y = op(g, xv)?;
            probe_loss(g, y, 100 + i as u64)
        })
        .unwrap();
        assert!(check.rel_error <= TOL, "{name}: {check:?}");
        assert!(check.analytic_norm > 0.0, "{name}: zero gradient");
    }
}

#[test]
fn broadcast_binary_ops_match_finite_differences() {
    let mut r = rng(5);
    let a = Tensor::randn(&[3, 4], &mut r);
    let others = [
        Tensor::randn(&[3, 4], &mut r),
        Tensor::randn(&[4], &mut r),
        Tensor::randn(&[3, 1], &mut r),
        Tensor::scalar(1.7),
    ];
    for (k, b) in others.iter().enumerate() {
        let b = b.map(|v| v.abs() + 0.5);
        for op in 0..4 {
            let lhs = check_input(&a, STEP, |g, x| {
                let bv = g.constant(b.clone());
                let y = apply_binary(g, op, x, bv)?;
                probe_loss(g, y, 7)
            })
            .unwrap();
            assert!(lhs.rel_error <= TOL, "op {op} rhs {k} lhs grad {lhs:?}");
            let rhs = check_input(&b, STEP, |g, bv| {
                let x = g.constant(a.clone());
                let y = apply_binary(g, op, x, bv)?;
                probe_loss(g, y, 7)
            })
            .unwrap();
            assert!(rhs.rel_error <= TOL, "op {op} rhs {k} rhs grad {rhs:?}");
        }
    }
}

fn apply_binary(g: &mut Graph, op: usize, a: Var, b: Var) -> diffnet::Result<Var> {
    match op {
        0 => g.add(a, b),
        1 => g.sub(a, b),
        2 => g.mul(a, b),
        _ => g.div(a, b),
    }
}

#[test]
fn masked_attention_matches_finite_differences() {
    let mut r = rng(6);
    let mut store = ParamStore::new("attn");
    let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, &mut r).unwrap();
    let q = Tensor::randn(&[3, 8], &mut r);
    let ctx = Tensor::randn(&[5, 8], &mut r);
    let mask = key_mask(3, &[true, true, false, true, false]);
    let report = check_params(&store, STEP, |g, s| {
        let qv = g.constant(q.clone());
        let cv = g.constant(ctx.clone());
        let y = mha.forward(g, s, qv, cv, Some(&mask))?;
        probe_loss(g, y, 8)
    })
    .unwrap();
    assert!(report.passes(TOL), "{:?}", report.worst());
    let input = check_input(&ctx, STEP, |g, cv| {
        let qv = g.constant(q.clone());
        let y = mha.forward(g, &store, qv, cv, Some(&mask))?;
        probe_loss(g, y, 8)
    })
    .unwrap();
    assert!(input.rel_error <= TOL, "{input:?}");
}

fn layer_report(which: usize, rows: usize, dim: usize, hidden: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new("layer");
    let x = Tensor::randn(&[rows, dim], &mut r);
    let mem = Tensor::randn(&[rows + 1, dim], &mut r);
    let heads = if dim % 2 == 0 { 2 } else { 1 };
    let report = match which {
        0 => {
            let l = Linear::new(&mut store, "lin", dim, hidden, &mut r);
            check_params(&store, STEP, |g, s| {
                let xv = g.constant(x.clone());
                let y = l.forward(g, s, xv)?;
                probe_loss(g, y, seed)
            })
        }
        1 => {
            let ln = LayerNorm::new(&mut store, "ln", dim);
            // Move gamma/beta off their initial values so both matter.
            for id in store.ids().collect::<Vec<_>>() {
                for v in store.value_mut(id).data_mut() {
                    *v += 0.3;
                }
            }
            check_params(&store, STEP, |g, s| {
                let xv = g.constant(x.clone());
                let y = ln.forward(g, s, xv)?;
                probe_loss(g, y, seed)
            })
        }
        2 => {
            let m = Mlp::new(&mut store, "mlp", dim, hidden, dim, Activation::Silu, &mut r);
            check_params(&store, STEP, |g, s| {
                let xv = g.constant(x.clone());
                let y = m.forward(g, s, xv)?;
                probe_loss(g, y, seed)
            })
        }
        3 => {
            let e = Embedding::new(&mut store, "emb", 6, dim, 1.0, &mut r);
            let ids: Vec<usize> = (0..rows).map(|i| (i * 5 + 1) % 6).collect();
            check_params(&store, STEP, |g, s| {
                let y = e.forward(g, s, &ids)?;
                probe_loss(g, y, seed)
            })
        }
        4 => {
            let b = EncoderBlock::new(&mut store, "enc", dim, heads, hidden, &mut r).unwrap();
            check_params(&store, STEP, |g, s| {
                let xv = g.constant(x.clone());
                let y = b.forward(g, s, xv, None)?;
                probe_loss(g, y, seed)
            })
        }
        _ => {
            let b = DecoderBlock::new(&mut store, "dec", dim, heads, hidden, &mut r).unwrap();
            let mut valid = vec![true; rows + 1];
            valid[0] = false;
            let mask = key_mask(rows, &valid);
            check_params(&store, STEP, |g, s| {
                let xv = g.constant(x.clone());
                let mv = g.constant(mem.clone());
                let y = b.forward(g, s, xv, mv, Some(&mask))?;
                probe_loss(g, y, seed)
            })
        }
    };
    report.unwrap().max_rel_error()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_layer_matches_finite_differences(
        which in 0usize..6,
        rows in 1usize..=4,
        dim in 2usize..=8,
        hidden in 1usize..=16,
        seed in 0u64..1000,
    ) {
        let err = layer_report(which, rows, dim, hidden, seed);
        prop_assert!(err <= TOL, "layer {} rows {} dim {} hidden {}: {}", which, rows, dim, hidden, err);
    }
}
