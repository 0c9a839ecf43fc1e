use crome_autodiff::{grad_check, AutodiffError, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Reference values below were evaluated with mpmath at 30 digits.
const SILU_1: f64 = 0.731_058_578_630_004_9;
const SILU_20: f64 = 19.999_999_958_776_928;
const LN_64: f64 = 4.158_883_083_359_672;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sum(y ⊙ w)` with a fixed random `w`, so every output element carries
/// an O(1) weight in the gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> crome_autodiff::Result<Var> {
    let w = Tensor::randn(g.shape(y), 1.0, &mut rng(seed));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::eye(2));
    let out = g.matmul(i2, i2).unwrap();
    assert_eq!(g.value(out), &Tensor::eye(2));

    let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = g.constant(Tensor::from_rows(&[&[0.0], &[1.0]]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &Tensor::from_rows(&[&[2.0], &[4.0]]));
}

#[test]
fn matmul_by_zeros_gives_zero_output_and_grad() {
    let mut g = Graph::new();
    let a = g.param(Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]));
    let z = g.constant(Tensor::zeros(&[2, 3]));
    let c = g.matmul(a, z).unwrap();
    assert!(g.value(c).data().iter().all(|v| *v == 0.0));
    let s = g.sum(c);
    g.backward(s).unwrap();
    assert!(g.grad(a).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        AutodiffError::Shape { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 2] }
    );
    assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[2, 2]"));
}

#[test]
fn matmul_folds_leading_axes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap());
    let b = g.constant(Tensor::eye(2));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 2, 2]);
    assert_eq!(g.value(c).data(), g.value(a).data());
}

#[test]
fn silu_reference_points() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3], vec![0.0, 1.0, 20.0]).unwrap());
    let y = g.silu(x);
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - SILU_1).abs() < 1e-15);
    assert!((v[2] - SILU_20).abs() < 1e-12);
    assert!((v[2] - 20.0).abs() < 1e-6);
}

#[test]
fn softmax_symmetry_and_stabilization() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[&[0.0, 0.0, 0.0]]));
    let y = g.softmax_rows(x).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::from_rows(&[&[1000.0, 0.0]]));
    let y = g.softmax_rows(x).unwrap();
    let v = g.value(y).data();
    assert!(v.iter().all(|p| p.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-12);
}

#[test]
fn cross_entropy_uniform_logits_is_ln_vocab() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[5, 64]));
    let loss = g
        .cross_entropy_next_token(logits, &[0, 5, 63, 7, 1], &[true, false, true, true, false])
        .unwrap();
    assert!((g.value(loss).item() - LN_64).abs() < 1e-6);
}

#[test]
fn cross_entropy_confident_correct_is_near_zero() {
    let mut g = Graph::new();
    let mut t = Tensor::zeros(&[2, 8]);
    t.data_mut()[3] = 100.0;
    t.data_mut()[8 + 6] = 100.0;
    let logits = g.constant(t);
    let loss = g.cross_entropy_next_token(logits, &[3, 6], &[true, true]).unwrap();
    assert!(g.value(loss).item() < 1e-30);
}

#[test]
fn cross_entropy_error_paths() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(
        g.cross_entropy_next_token(logits, &[0, 1], &[false, false]),
        Err(AutodiffError::Contract(_))
    ));
    assert_eq!(
        g.cross_entropy_next_token(logits, &[0, 4], &[true, true]).unwrap_err(),
        AutodiffError::Vocabulary { id: 4, vocab: 4 }
    );
}

#[test]
fn cross_entropy_masked_rows_get_zero_grad() {
    let mut g = Graph::new();
    let logits = g.param(Tensor::randn(&[3, 5], 1.0, &mut rng(3)));
    let loss = g.cross_entropy_next_token(logits, &[1, 2, 3], &[false, true, false]).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(logits).unwrap();
    assert!(grad.row(0).iter().chain(grad.row(2)).all(|v| *v == 0.0));
    assert!(grad.row(1).iter().any(|v| *v != 0.0));
}

#[test]
fn backward_of_weighted_sum_gives_x() {
    let mut g = Graph::new();
    let x_val = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let w = g.param(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
    let x = g.constant(x_val.clone());
    let p = g.mul(w, x).unwrap();
    let loss = g.sum(p);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &x_val);
    assert!(g.grad(x).is_none(), "detached leaf must not receive a grad");
}

#[test]
fn backward_accumulates_until_cleared() {
    let mut g = Graph::new();
    let w = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let loss = g.sum(w);
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[2.0, 2.0]);
    g.zero_grad();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let w = g.param(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(w), Err(AutodiffError::Contract(_))));
}

#[test]
fn every_requires_grad_leaf_reachable_from_loss_gets_a_grad() {
    let mut g = Graph::new();
    let a = g.param(Tensor::randn(&[3, 4], 1.0, &mut rng(1)));
    let b = g.param(Tensor::randn(&[4, 2], 1.0, &mut rng(2)));
    let unused = g.param(Tensor::zeros(&[2]));
    let c = g.matmul(a, b).unwrap();
    let s = g.silu(c);
    let loss = g.sum(s);
    g.backward(loss).unwrap();
    assert!(g.grad(a).is_some() && g.grad(b).is_some());
    assert!(g.grad(unused).is_none());
}

#[test]
fn embedding_out_of_range_is_vocabulary_error() {
    let mut g = Graph::new();
    let table = g.param(Tensor::zeros(&[4, 3]));
    assert_eq!(
        g.embedding(table, &[0, 9]).unwrap_err(),
        AutodiffError::Vocabulary { id: 9, vocab: 4 }
    );
}

#[test]
fn linear_function_checks_exactly() {
    let w = Tensor::randn(&[3, 2], 1.0, &mut rng(11));
    let err = grad_check(
        |g, x| {
            let w = g.constant(w.clone());
            let y = g.matmul(x, w)?;
            Ok(g.sum(y))
        },
        &Tensor::randn(&[4, 3], 1.0, &mut rng(12)),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn silu_after_matmul_matches_finite_differences() {
    let w = Tensor::randn(&[5, 3], 0.7, &mut rng(21));
    let err = grad_check(
        |g, x| {
            let w = g.constant(w.clone());
            let h = g.matmul(x, w)?;
            let y = g.silu(h);
            weighted_sum(g, y, 22)
        },
        &Tensor::randn(&[4, 5], 1.0, &mut rng(23)),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

type UnaryOp = fn(&mut Graph, Var) -> crome_autodiff::Result<Var>;

#[test]
fn every_primitive_passes_grad_check() {
    let gamma = Tensor::randn(&[6], 1.0, &mut rng(31));
    let beta = Tensor::randn(&[6], 1.0, &mut rng(32));
    let cases: Vec<(&str, UnaryOp)> = vec![
        ("add", |g, x| {
            let y = g.silu(x);
            g.add(x, y)
        }),
        ("mul", |g, x| g.mul(x, x)),
        ("scale", |g, x| Ok(g.scale(x, -1.7))),
        ("matmul", |g, x| {
            let t = g.transpose(x)?;
            g.matmul(x, t)
        }),
        ("sigmoid", |g, x| Ok(g.sigmoid(x))),
        ("silu", |g, x| Ok(g.silu(x))),
        ("gelu", |g, x| Ok(g.gelu(x))),
        ("softmax_rows", |g, x| g.softmax_rows(x)),
        ("concat_seq", |g, x| {
            let y = g.scale(x, 2.0);
            g.concat_rows(&[x, y])
        }),
        ("slice_rows", |g, x| g.slice_rows(x, 1, 2)),
        ("slice_cols", |g, x| g.slice_cols(x, 2, 3)),
        ("concat_cols", |g, x| {
            let a = g.slice_cols(x, 0, 2)?;
            let b = g.slice_cols(x, 3, 3)?;
            g.concat_cols(&[b, a])
        }),
        ("transpose", |g, x| g.transpose(x)),
        ("causal_mask", |g, x| {
            let s = g.slice_cols(x, 0, 4)?;
            let m = g.causal_mask(s)?;
            g.softmax_rows(m)
        }),
        ("embedding_lookup", |g, x| g.embedding(x, &[3, 0, 3, 1])),
    ];
    for (name, op) in cases {
        let input = Tensor::randn(&[4, 6], 1.0, &mut rng(40));
        let err = grad_check(
            |g, x| {
                let y = op(g, x)?;
                weighted_sum(g, y, 41)
            },
            &input,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }

    // relu away from its kink
    let input = Tensor::new(vec![6], vec![-1.0, -0.3, 0.2, 0.8, 1.5, -2.0]).unwrap();
    let err = grad_check(|g, x| {
        let y = g.relu(x);
        weighted_sum(g, y, 42)
    }, &input, 1e-5)
    .unwrap();
    assert!(err < 1e-4, "relu: {err}");

    // layernorm with respect to input, gain and shift
    let x0 = Tensor::randn(&[4, 6], 1.0, &mut rng(43));
    let (gm, bt) = (gamma.clone(), beta.clone());
    let err = grad_check(
        |g, x| {
            let gm = g.constant(gm.clone());
            let bt = g.constant(bt.clone());
            let y = g.layernorm(x, gm, bt, 1e-5)?;
            weighted_sum(g, y, 44)
        },
        &x0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "layernorm/x: {err}");
    let xc = x0.clone();
    let err = grad_check(
        |g, gm| {
            let x = g.constant(xc.clone());
            let bt = g.constant(beta.clone());
            let y = g.layernorm(x, gm, bt, 1e-5)?;
            weighted_sum(g, y, 44)
        },
        &gamma,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "layernorm/gamma: {err}");

    let targets = [2usize, 0, 5, 1];
    let err = grad_check(
        |g, x| g.cross_entropy_next_token(x, &targets, &[true, true, false, true]),
        &Tensor::randn(&[4, 6], 1.0, &mut rng(45)),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "cross_entropy: {err}");
}

#[test]
fn deterministic_across_runs() {
    let run = || {
        let mut g = Graph::new();
        let a = g.param(Tensor::randn(&[8, 16], 1.0, &mut rng(5)));
        let b = g.param(Tensor::randn(&[16, 8], 1.0, &mut rng(6)));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax_rows(c).unwrap();
        let loss = weighted_sum(&mut g, s, 7).unwrap();
        g.backward(loss).unwrap();
        (g.value(loss).clone(), g.grad(a).unwrap().clone(), g.grad(b).unwrap().clone())
    };
    let (l1, a1, b1) = run();
    let (l2, a2, b2) = run();
    assert_eq!(l1.data()[0].to_bits(), l2.data()[0].to_bits());
    assert!(a1.data().iter().zip(a2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(b1.data().iter().zip(b2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
