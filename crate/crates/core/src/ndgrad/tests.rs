use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Central-difference check of `build` w.r.t. every input; returns the worst
/// relative error |a-n| / max(|a|, |n|, 1e-8).
fn fd_check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();

    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
        let l = build(&mut g, &vars);
        g.value(l).item().unwrap()
    };
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(&g, *v)
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Fixed random weighting turns any tensor into a scalar with non-trivial gradient.
fn weigh(g: &mut Graph, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let p = g.mul(x, w).unwrap();
    g.sum(p).unwrap()
}

#[test]
fn matmul_identity_and_hand_example() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::identity(2));
    let a = g.constant(Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap());
    let ia = g.matmul(i2, a).unwrap();
    assert_eq!(g.value(ia), g.value(a));

    let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let y = g.constant(Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap());
    let xy = g.matmul(x, y).unwrap();
    assert_eq!(g.value(xy).data(), &[17.0, 39.0]);
    assert_eq!(g.value(xy).shape(), &[2, 1]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[4, 5]);
    let b = rand_tensor(&mut rng, &[5, 3]);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..5 {
                s += a.at(i, k) * b.at(k, j);
            }
            assert!((g.value(c).at(i, j) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch_is_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(crate::Error::Dimension(_))));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
    let s = g.softmax(a, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let b = g.constant(Tensor::vector(vec![1f64.ln(), 3f64.ln()]).unwrap());
    let s = g.softmax(b, 0).unwrap();
    assert!((g.value(s).data()[0] - 0.25).abs() < 1e-15);
    assert!((g.value(s).data()[1] - 0.75).abs() < 1e-15);

    let c = g.constant(Tensor::vector(vec![1000.0, 0.0]).unwrap());
    let s = g.softmax(c, 0).unwrap();
    assert!((g.value(s).data()[0] - 1.0).abs() < 1e-12);
    assert!(g.value(s).data()[1].abs() < 1e-12);
    assert!(g.value(s).all_finite());
}

#[test]
fn softmax_axes_on_matrices() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, -1.0, 5.0]]).unwrap());
    let cols = g.softmax(a, 0).unwrap();
    let rows = g.softmax(a, 1).unwrap();
    for j in 0..3 {
        let s = g.value(cols).at(0, j) + g.value(cols).at(1, j);
        assert!((s - 1.0).abs() < 1e-12);
    }
    for i in 0..2 {
        let s: f64 = g.value(rows).row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert!(g.softmax(a, 2).is_err());
}

#[test]
fn softmax_masked_lane_is_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let m = g.masked_fill(a, &[true, true], f64::NEG_INFINITY).unwrap();
    assert!(g.softmax(m, 0).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let u = g.constant(Tensor::matrix(1, 4, vec![0.3; 4]).unwrap());
    let l = g.cross_entropy(u, &[2]).unwrap();
    assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);

    let z = g.constant(Tensor::matrix(1, 2, vec![0.0, 3f64.ln()]).unwrap());
    let l = g.cross_entropy(z, &[1]).unwrap();
    assert!((g.value(l).item().unwrap() - 0.28768207245178085).abs() < 1e-12);

    assert!(g.cross_entropy(z, &[2]).is_err());
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let logits = rand_tensor(&mut rng, &[3, 5]).data().iter().map(|v| v * 4.0).collect::<Vec<_>>();
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
        let mut want = 0.0;
        for i in 0..3 {
            let row = &logits[i * 5..(i + 1) * 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want += -(row[labels[i]].exp() / z).ln();
        }
        want /= 3.0;
        let mut g = Graph::new();
        let v = g.constant(Tensor::matrix(3, 5, logits).unwrap());
        let l = g.cross_entropy(v, &labels).unwrap();
        assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(&g, x).unwrap().data(), &[6.0]);
}

#[test]
fn max_gradient_goes_to_argmax() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::matrix(3, 1, vec![1.0, 5.0, 2.0]).unwrap());
    let m = g.pool_rows(x, &[vec![0, 1, 2]], PoolKind::Max).unwrap();
    let s = g.sum(m).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(&g, x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn max_ties_route_to_first_index() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::matrix(3, 1, vec![4.0, 4.0, 1.0]).unwrap());
    let m = g.pool_rows(x, &[vec![0, 1, 2]], PoolKind::Max).unwrap();
    let s = g.sum(m).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(&g, x).unwrap().data(), &[1.0, 0.0, 0.0]);

    let mut g = Graph::new();
    let a = g.variable(Tensor::vector(vec![2.0]).unwrap());
    let b = g.variable(Tensor::vector(vec![2.0]).unwrap());
    let m = g.maximum(a, b).unwrap();
    let s = g.sum(m).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(&g, a).unwrap().data(), &[1.0]);
    assert!(grads.get(&g, b).map_or(true, |t| t.data() == [0.0]));
}

#[test]
fn unreached_parameters_get_zero_gradient() {
    let mut store = ParamStore::new();
    let used = store.add("used", Tensor::scalar(2.0)).unwrap();
    let unused = store.add("unused", Tensor::scalar(5.0)).unwrap();
    let mut g = Graph::new();
    let u = g.param(&store, used);
    let _ = g.param(&store, unused);
    let y = g.mul(u, u).unwrap();
    let grads = g.backward(y).unwrap().param_grads(&g, &store);
    assert_eq!(grads[0].data(), &[4.0]);
    assert_eq!(grads[1].data(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar_and_nan() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let y = g.tanh(x).unwrap();
    assert!(matches!(g.backward(y), Err(crate::Error::Dimension(_))));

    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![f64::NAN, 2.0]).unwrap());
    let y = g.sum(x).unwrap();
    assert!(matches!(g.backward(y), Err(crate::Error::Numerical(_))));

    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let inf = g.constant(Tensor::vector(vec![f64::INFINITY, 1.0]).unwrap());
    let p = g.mul(x, inf).unwrap();
    let z = g.constant(Tensor::vector(vec![0.0, 1.0]).unwrap());
    let q = g.mul(p, z).unwrap();
    let s = g.sum(q).unwrap();
    // 0 * inf in the forward pass is NaN
    assert!(matches!(g.backward(s), Err(crate::Error::Numerical(_))));
}

#[test]
fn shared_subexpressions_accumulate() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xv = rand_tensor(&mut rng, &[2, 3]);
    let wv = rand_tensor(&mut rng, &[3, 3]);

    // f = sum(tanh(xW) * tanh(xW)) reusing one node
    let mut g = Graph::new();
    let (x, w) = (g.variable(xv.clone()), g.variable(wv.clone()));
    let h = g.matmul(x, w).unwrap();
    let t = g.tanh(h).unwrap();
    let p = g.mul(t, t).unwrap();
    let s = g.sum(p).unwrap();
    let shared = g.backward(s).unwrap();

    // same function with the subgraph duplicated
    let mut g2 = Graph::new();
    let (x2, w2) = (g2.variable(xv), g2.variable(wv));
    let h1 = g2.matmul(x2, w2).unwrap();
    let t1 = g2.tanh(h1).unwrap();
    let h2 = g2.matmul(x2, w2).unwrap();
    let t2 = g2.tanh(h2).unwrap();
    let p2 = g2.mul(t1, t2).unwrap();
    let s2 = g2.sum(p2).unwrap();
    let dup = g2.backward(s2).unwrap();

    let a = shared.get(&g, w).unwrap();
    let b = dup.get(&g2, w2).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-14);
    let a = shared.get(&g, x).unwrap();
    let b = dup.get(&g2, x2).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-14);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.variable(rand_tensor(&mut rng, &[3, 4]));
        let w = g.variable(rand_tensor(&mut rng, &[4, 2]));
        let h = g.matmul(x, w).unwrap();
        let l = g.cross_entropy(h, &[0, 1, 1]).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(l).clone(), grads.get(&g, w).unwrap())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.data()[0].to_bits(), l2.data()[0].to_bits());
    assert!(g1.data().iter().zip(g2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn grad_reverse_flips_and_scales() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![1.0, -2.0]).unwrap());
    let r = g.grad_reverse(x, 0.5).unwrap();
    assert_eq!(g.value(r), g.value(x));
    let s = weigh(&mut g, r, 11);
    let grads = g.backward(s).unwrap();
    let gr = grads.get(&g, r).unwrap();
    let gx = grads.get(&g, x).unwrap();
    for i in 0..2 {
        assert_eq!(gx.data()[i], -0.5 * gr.data()[i]);
    }
}

// ---- finite-difference checks, one per differentiable op ------------------

const TOL: f64 = 1e-4;

#[test]
fn fd_matmul_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let bt = rand_tensor(&mut rng, &[2, 4]);
    let at = rand_tensor(&mut rng, &[3, 2]);
    assert!(fd_check(&[a.clone(), b], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        weigh(g, y, 1)
    }) < TOL);
    assert!(fd_check(&[a.clone(), bt], |g, v| {
        let y = g.matmul_nt(v[0], v[1]).unwrap();
        weigh(g, y, 2)
    }) < TOL);
    assert!(fd_check(&[a.clone(), at], |g, v| {
        let y = g.matmul_tn(v[0], v[1]).unwrap();
        weigh(g, y, 3)
    }) < TOL);
    assert!(fd_check(&[a], |g, v| {
        let y = g.transpose(v[0]).unwrap();
        weigh(g, y, 4)
    }) < TOL);
}

#[test]
fn fd_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let a = rand_tensor(&mut rng, &[2, 3]);
    let b = rand_tensor(&mut rng, &[2, 3]);
    let row = rand_tensor(&mut rng, &[3]);
    let ins = [a.clone(), b.clone()];
    assert!(fd_check(&ins, |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        weigh(g, y, 5)
    }) < TOL);
    assert!(fd_check(&ins, |g, v| {
        let y = g.sub(v[0], v[1]).unwrap();
        weigh(g, y, 6)
    }) < TOL);
    assert!(fd_check(&ins, |g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        weigh(g, y, 7)
    }) < TOL);
    assert!(fd_check(&ins, |g, v| {
        let y = g.maximum(v[0], v[1]).unwrap();
        weigh(g, y, 8)
    }) < TOL);
    assert!(fd_check(&[a.clone(), row], |g, v| {
        let y = g.add_row(v[0], v[1]).unwrap();
        weigh(g, y, 9)
    }) < TOL);
    assert!(fd_check(&[a.clone()], |g, v| {
        let y = g.scale(v[0], -1.7).unwrap();
        weigh(g, y, 10)
    }) < TOL);
    assert!(fd_check(&[a.clone()], |g, v| {
        let y = g.sigmoid(v[0]).unwrap();
        weigh(g, y, 11)
    }) < TOL);
    assert!(fd_check(&[a.clone()], |g, v| {
        let y = g.tanh(v[0]).unwrap();
        weigh(g, y, 12)
    }) < TOL);
    assert!(fd_check(&[a.clone()], |g, v| {
        // λ = -1 makes the reversal an honest identity
        let y = g.grad_reverse(v[0], -1.0).unwrap();
        let z = g.mul(y, v[0]).unwrap();
        weigh(g, z, 13)
    }) < TOL);
    assert!(fd_check(&[a], |g, v| {
        let y = g.reshape(v[0], vec![3, 2]).unwrap();
        weigh(g, y, 14)
    }) < TOL);
}

#[test]
fn fd_structural() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let a = rand_tensor(&mut rng, &[4, 3]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let c = rand_tensor(&mut rng, &[2, 3]);
    assert!(fd_check(&[a.clone(), b.clone()], |g, v| {
        let y = g.concat_cols(&[v[0], v[1], v[0]]).unwrap();
        weigh(g, y, 15)
    }) < TOL);
    assert!(fd_check(&[a.clone(), c], |g, v| {
        let y = g.concat_rows(&[v[0], v[1]]).unwrap();
        weigh(g, y, 16)
    }) < TOL);
    assert!(fd_check(&[a.clone()], |g, v| {
        let y = g.slice_cols(v[0], 1, 3).unwrap();
        weigh(g, y, 17)
    }) < TOL);
    assert!(fd_check(&[a.clone()], |g, v| {
        let y = g.gather_rows(v[0], &[3, 0, 3]).unwrap();
        weigh(g, y, 18)
    }) < TOL);
    let a2 = rand_tensor(&mut rng, &[4, 3]);
    assert!(fd_check(&[a.clone(), a2], |g, v| {
        let y = g.select_rows(&[true, false, false, true], v[0], v[1]).unwrap();
        weigh(g, y, 19)
    }) < TOL);
    assert!(fd_check(&[a], |g, v| {
        let mask = vec![false, true, false, false, false, true, false, false, false, false, true, false];
        let y = g.masked_fill(v[0], &mask, 3.0).unwrap();
        weigh(g, y, 20)
    }) < TOL);
}

#[test]
fn fd_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let a = rand_tensor(&mut rng, &[5, 3]);
    let groups = vec![vec![0, 2, 4], vec![1, 3], vec![2]];
    for (seed, kind) in [(21, PoolKind::Max), (22, PoolKind::Mean), (23, PoolKind::Min)] {
        let gr = groups.clone();
        assert!(
            fd_check(&[a.clone()], move |g, v| {
                let y = g.pool_rows(v[0], &gr, kind).unwrap();
                weigh(g, y, seed)
            }) < TOL,
            "{kind:?}"
        );
    }
    assert!(fd_check(&[a.clone()], |g, v| g.sum(v[0]).unwrap()) < TOL);
    assert!(fd_check(&[a.clone()], |g, v| g.mean(v[0]).unwrap()) < TOL);
    assert!(fd_check(&[a.clone()], |g, v| g.sum_squares(v[0]).unwrap()) < TOL);
    assert!(fd_check(&[a.clone()], |g, v| {
        let y = g.normalize_rows(v[0]).unwrap();
        weigh(g, y, 25)
    }) < TOL);
    for axis in [0, 1] {
        assert!(fd_check(&[a.clone()], |g, v| {
            let y = g.softmax(v[0], axis).unwrap();
            weigh(g, y, 26)
        }) < TOL);
    }
    assert!(fd_check(&[a.clone()], |g, v| {
        let mask = vec![true, false, false, false, false, false, false, true, false, false, false, false, false, false, false];
        let m = g.masked_fill(v[0], &mask, f64::NEG_INFINITY).unwrap();
        let y = g.softmax(m, 0).unwrap();
        let y = g.masked_fill(y, &mask, 0.0).unwrap();
        weigh(g, y, 27)
    }) < TOL);
    assert!(fd_check(&[a], |g, v| g.cross_entropy(v[0], &[2, 0, 1, 1, 2]).unwrap()) < TOL);
}

proptest! {
    #[test]
    fn softmax_sums_to_one(xs in proptest::collection::vec(-500.0f64..500.0, 1..12)) {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(xs).unwrap());
        let s = g.softmax(v, 0).unwrap();
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(g.value(s).data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn random_elementwise_chains_pass_fd(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[3, 2]);
        let err = fd_check(&[a, b], |g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let s = g.sigmoid(h).unwrap();
            let t = g.tanh(h).unwrap();
            let m = g.mul(s, t).unwrap();
            g.cross_entropy(m, &[0, 1]).unwrap()
        });
        prop_assert!(err < TOL, "err {err}");
    }
}
