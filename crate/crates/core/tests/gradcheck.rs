//! Finite-difference verification of every differentiable tape primitive:
//! central differences with h = 1e-5 against the analytic backward pass, on
//! 100 random inputs per primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqdrive_core::tape::{Tape, Var};
use vqdrive_core::tensor::Tensor;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: usize = 100;

/// Scalar function of a flat input slice: rebuilds the graph per evaluation.
fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + H;
        let fp = f(&xp);
        xp[i] = x[i] - H;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * H);
    }
    g
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

/// Verifies d(loss)/d(input_0) where `build` maps leaf vars to a scalar root.
/// Remaining leaves are held fixed.
fn check(
    name: &str,
    rng: &mut ChaCha8Rng,
    shapes: &[&[usize]],
    sample: &dyn Fn(&mut ChaCha8Rng, usize) -> Tensor,
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
) {
    for inst in 0..INSTANCES {
        let tensors: Vec<Tensor> = (0..shapes.len()).map(|i| sample(rng, i)).collect();
        // Analytic gradients for every input.
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root).expect("backward");
        for (k, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var);
            let others: Vec<Tensor> = tensors.clone();
            let shape = tensors[k].shape().to_vec();
            let eval = |x: &[f64]| -> f64 {
                let mut t2 = Tape::new();
                let vs: Vec<Var> = others
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            t2.leaf(Tensor::from_vec(&shape, x.to_vec()))
                        } else {
                            t2.leaf(t.clone())
                        }
                    })
                    .collect();
                let r = build(&mut t2, &vs);
                t2.value(r).item()
            };
            let numeric = fd_grad(&eval, tensors[k].data());
            for i in 0..numeric.len() {
                let e = rel_err(analytic.data()[i], numeric[i]);
                assert!(
                    e <= TOL,
                    "{name}: instance {inst} input {k} component {i}: analytic {} vs fd {} (rel {e:.2e})",
                    analytic.data()[i],
                    numeric[i]
                );
            }
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, rng)
}

/// Standard normal, resampled so no entry sits within `margin` of `kinks`.
fn randn_away(rng: &mut ChaCha8Rng, shape: &[usize], kinks: &[f64], margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let v: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, rng).map(|v| v.abs() + 0.5)
}

/// Fixed random weights folded in so the root is a scalar sensitive to every
/// output entry.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Var {
    let w = tape.leaf(weights.clone());
    let prod = tape.mul(out, w);
    tape.sum(prod)
}

#[test]
fn elementwise_unary_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = Tensor::randn(&[2, 3], &mut rng);

    let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Var>)> = vec![
        ("tanh", Box::new(|t: &mut Tape, x| t.tanh(x))),
        ("sigmoid", Box::new(|t: &mut Tape, x| t.sigmoid(x))),
        ("exp", Box::new(|t: &mut Tape, x| t.exp(x))),
        ("sin", Box::new(|t: &mut Tape, x| t.sin(x))),
        ("cos", Box::new(|t: &mut Tape, x| t.cos(x))),
        ("affine", Box::new(|t: &mut Tape, x| t.affine(x, 2.5, -1.0))),
        ("square", Box::new(|t: &mut Tape, x| t.square(x))),
    ];
    for (name, op) in &cases {
        let wc = w.clone();
        check(name, &mut rng, &[&[2, 3]], &|r, _| randn(r, &[2, 3]), &|t, vs| {
            let y = op(t, vs[0]);
            weighted_sum(t, y, &wc)
        });
    }

    // Positive-domain ops.
    let wc = w.clone();
    check("ln", &mut rng, &[&[2, 3]], &|r, _| positive(r, &[2, 3]), &|t, vs| {
        let y = t.ln(vs[0]);
        weighted_sum(t, y, &wc)
    });
    let wc = w.clone();
    check("sqrt", &mut rng, &[&[2, 3]], &|r, _| positive(r, &[2, 3]), &|t, vs| {
        let y = t.sqrt(vs[0]);
        weighted_sum(t, y, &wc)
    });
    let wc = w.clone();
    check("recip", &mut rng, &[&[2, 3]], &|r, _| positive(r, &[2, 3]), &|t, vs| {
        let y = t.recip(vs[0]);
        weighted_sum(t, y, &wc)
    });
    // Kinked ops, sampled away from the kink.
    let wc = w.clone();
    check(
        "relu",
        &mut rng,
        &[&[2, 3]],
        &|r, _| randn_away(r, &[2, 3], &[0.0], 1e-3),
        &|t, vs| {
            let y = t.relu(vs[0]);
            weighted_sum(t, y, &wc)
        },
    );
}

#[test]
fn elementwise_binary_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w = Tensor::randn(&[2, 3], &mut rng);

    for (name, op) in [
        ("add", (|t: &mut Tape, a: Var, b: Var| t.add(a, b)) as fn(&mut Tape, Var, Var) -> Var),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
    ] {
        let wc = w.clone();
        check(name, &mut rng, &[&[2, 3], &[2, 3]], &|r, _| randn(r, &[2, 3]), &|t, vs| {
            let y = op(t, vs[0], vs[1]);
            weighted_sum(t, y, &wc)
        });
    }

    // atan2 away from the guarded origin.
    let wc = w.clone();
    check(
        "atan2",
        &mut rng,
        &[&[2, 3], &[2, 3]],
        &|r, _| randn_away(r, &[2, 3], &[0.0], 0.2),
        &|t, vs| {
            let y = t.atan2(vs[0], vs[1]);
            weighted_sum(t, y, &wc)
        },
    );
}

#[test]
fn structural_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);

    let w43 = Tensor::randn(&[4, 3], &mut rng);
    let wc = w43.clone();
    check("matmul", &mut rng, &[&[4, 2], &[2, 3]], &|r, i| randn(r, [&[4, 2][..], &[2, 3][..]][i]), &|t, vs| {
        let y = t.matmul(vs[0], vs[1]);
        weighted_sum(t, y, &wc)
    });

    let w24 = Tensor::randn(&[2, 4], &mut rng);
    let wc = w24.clone();
    check("transpose", &mut rng, &[&[4, 2]], &|r, _| randn(r, &[4, 2]), &|t, vs| {
        let y = t.transpose(vs[0]);
        weighted_sum(t, y, &wc)
    });

    check("sum", &mut rng, &[&[3, 3]], &|r, _| randn(r, &[3, 3]), &|t, vs| t.sum(vs[0]));

    let w33 = Tensor::randn(&[3, 3], &mut rng);
    let wc = w33.clone();
    check("add_row", &mut rng, &[&[3, 3], &[3]], &|r, i| randn(r, [&[3, 3][..], &[3][..]][i]), &|t, vs| {
        let y = t.add_row(vs[0], vs[1]);
        weighted_sum(t, y, &wc)
    });

    let wc = w33.clone();
    check(
        "mul_scalar",
        &mut rng,
        &[&[3, 3], &[]],
        &|r, i| if i == 0 { randn(r, &[3, 3]) } else { Tensor::scalar(r.gen_range(0.5..2.0)) },
        &|t, vs| {
            let y = t.mul_scalar(vs[0], vs[1]);
            weighted_sum(t, y, &wc)
        },
    );

    let w1 = Tensor::randn(&[4, 2], &mut rng);
    let wc = w1.clone();
    check("gather_rows", &mut rng, &[&[3, 2]], &|r, _| randn(r, &[3, 2]), &|t, vs| {
        let y = t.gather_rows(vs[0], &[2, 0, 0, 1]);
        weighted_sum(t, y, &wc)
    });

    let w62 = Tensor::randn(&[6, 2], &mut rng);
    let wc = w62.clone();
    check("shift_rows", &mut rng, &[&[6, 2]], &|r, _| randn(r, &[6, 2]), &|t, vs| {
        let y = t.shift_rows(vs[0], 3, 1);
        weighted_sum(t, y, &wc)
    });

    let wc = w62.clone();
    check("repeat_rows", &mut rng, &[&[2, 2]], &|r, _| randn(r, &[2, 2]), &|t, vs| {
        let y = t.repeat_rows(vs[0], 3);
        weighted_sum(t, y, &wc)
    });

    let w22 = Tensor::randn(&[2, 2], &mut rng);
    let wc = w22.clone();
    check("slice_rows", &mut rng, &[&[4, 2]], &|r, _| randn(r, &[4, 2]), &|t, vs| {
        let y = t.slice_rows(vs[0], 1, 2);
        weighted_sum(t, y, &wc)
    });
    let wc = w22.clone();
    check("slice_cols", &mut rng, &[&[2, 4]], &|r, _| randn(r, &[2, 4]), &|t, vs| {
        let y = t.slice_cols(vs[0], 1, 2);
        weighted_sum(t, y, &wc)
    });

    let w52 = Tensor::randn(&[5, 2], &mut rng);
    let wc = w52.clone();
    check("concat_rows", &mut rng, &[&[2, 2], &[3, 2]], &|r, i| randn(r, [&[2, 2][..], &[3, 2][..]][i]), &|t, vs| {
        let y = t.concat_rows(vs[0], vs[1]);
        weighted_sum(t, y, &wc)
    });
    let w25 = Tensor::randn(&[2, 5], &mut rng);
    let wc = w25.clone();
    check("concat_cols", &mut rng, &[&[2, 2], &[2, 3]], &|r, i| randn(r, [&[2, 2][..], &[2, 3][..]][i]), &|t, vs| {
        let y = t.concat_cols(vs[0], vs[1]);
        weighted_sum(t, y, &wc)
    });

    let w6 = Tensor::randn(&[6], &mut rng);
    let wc = w6.clone();
    check("reshape", &mut rng, &[&[2, 3]], &|r, _| randn(r, &[2, 3]), &|t, vs| {
        let y = t.reshape(vs[0], &[6]);
        weighted_sum(t, y, &wc)
    });
}

#[test]
fn clip_with_variable_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let w = Tensor::randn(&[6], &mut rng);
    // x sampled in three bands so all branches occur, margins keep FD valid.
    let wc = w.clone();
    check(
        "clip",
        &mut rng,
        &[&[6], &[6], &[6]],
        &|r, i| match i {
            0 => Tensor::from_vec(
                &[6],
                (0..6).map(|_| r.gen_range(-3.0..3.0)).collect::<Vec<f64>>(),
            ),
            1 => Tensor::from_vec(
                &[6],
                (0..6).map(|_| r.gen_range(-1.0..-0.9)).collect::<Vec<f64>>(),
            ),
            _ => Tensor::from_vec(
                &[6],
                (0..6).map(|_| r.gen_range(0.9..1.0)).collect::<Vec<f64>>(),
            ),
        },
        &|t, vs| {
            let y = t.clip(vs[0], vs[1], vs[2]);
            weighted_sum(t, y, &wc)
        },
    );
}

#[test]
fn solve_gradients_in_matrix_and_rhs() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let w = Tensor::randn(&[4], &mut rng);
    let wc = w.clone();
    check(
        "solve",
        &mut rng,
        &[&[4, 4], &[4]],
        &|r, i| {
            if i == 0 {
                // Diagonally dominant for a safe condition number.
                let mut a = Tensor::randn(&[4, 4], r);
                for d in 0..4 {
                    let v = a.at(d, d) + 6.0;
                    a.set(d, d, v);
                }
                a
            } else {
                randn(r, &[4])
            }
        },
        &|t, vs| {
            let y = t.solve(vs[0], vs[1]).expect("solvable");
            weighted_sum(t, y, &wc)
        },
    );
}

#[test]
fn solve_rhs_jacobian_is_transpose_solve() {
    // For fixed A, d(wᵀ solve(A, b))/db = solve(Aᵀ, w); also cross-check FD.
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..20 {
        let mut a = Tensor::randn(&[5, 5], &mut rng);
        for d in 0..5 {
            let v = a.at(d, d) + 6.0;
            a.set(d, d, v);
        }
        let b = Tensor::randn(&[5], &mut rng);
        let w = Tensor::randn(&[5], &mut rng);

        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let bv = tape.leaf(b.clone());
        let x = tape.solve(av, bv).unwrap();
        let root = weighted_sum(&mut tape, x, &w);
        let grads = tape.backward(root).unwrap();
        let analytic = grads.get(bv);

        let expected = vqdrive_core::linalg::solve(&a.transpose(), &w).unwrap();
        let af = a.clone();
        let wf = w.clone();
        let eval = move |xb: &[f64]| -> f64 {
            let x = vqdrive_core::linalg::solve(&af, &Tensor::from_vec(&[5], xb.to_vec())).unwrap();
            x.dot(&wf)
        };
        let numeric = fd_grad(&eval, b.data());
        for i in 0..5 {
            assert!(rel_err(analytic.data()[i], expected.data()[i]) <= 1e-9);
            assert!(rel_err(analytic.data()[i], numeric[i]) <= 1e-5);
        }
    }
}

#[test]
fn softmax_sum_gradient_vanishes() {
    // f(x) = sum(softmax(x)) == 1, so the gradient must be ~0 for any x.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let x = Tensor::randn(&[5], &mut rng);
        let build = |t: &mut Tape, xv: Var| -> Var {
            let e = t.exp(xv);
            let s = t.sum(e);
            let inv = t.recip(s);
            let sm = t.mul_scalar(e, inv);
            t.sum(sm)
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let root = build(&mut tape, xv);
        let grads = tape.backward(root).unwrap();
        let analytic = grads.get(xv);
        let eval = |xs: &[f64]| -> f64 {
            let mut t2 = Tape::new();
            let v = t2.leaf(Tensor::from_vec(&[5], xs.to_vec()));
            let r = build(&mut t2, v);
            t2.value(r).item()
        };
        let numeric = fd_grad(&eval, x.data());
        for i in 0..5 {
            assert!(rel_err(analytic.data()[i], numeric[i]) <= 1e-8);
            assert!(analytic.data()[i].abs() <= 1e-12);
        }
    }
}

#[test]
fn straight_through_composite_matches_surrogate_fd() {
    // Downstream linear map M: grad wrt z_e must equal Mᵀ·upstream, i.e. the
    // FD gradient of the surrogate loss with z_q replaced by z_e.
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for _ in 0..20 {
        let m = Tensor::randn(&[3, 4], &mut rng);
        let zq = Tensor::randn(&[4], &mut rng);
        let ze = Tensor::randn(&[4], &mut rng);
        let w = Tensor::randn(&[3], &mut rng);

        let mut tape = Tape::new();
        let mv = tape.leaf(m.clone());
        let zqv = tape.leaf(zq.clone());
        let zev = tape.leaf(ze.clone());
        let st = tape.st_passthrough(zqv, zev).unwrap();
        let out = tape.matmul(mv, st);
        let root = weighted_sum(&mut tape, out, &w);
        let grads = tape.backward(root).unwrap();
        let analytic = grads.get(zev);
        assert_eq!(grads.get(zqv), Tensor::zeros(&[4]));

        let (mf, wf) = (m.clone(), w.clone());
        let surrogate = move |x: &[f64]| -> f64 {
            mf.matmul(&Tensor::from_vec(&[4], x.to_vec())).dot(&wf)
        };
        let numeric = fd_grad(&surrogate, ze.data());
        for i in 0..4 {
            assert!(rel_err(analytic.data()[i], numeric[i]) <= 1e-6);
        }
    }
}
