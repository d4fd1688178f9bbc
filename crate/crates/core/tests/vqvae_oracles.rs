//! Oracles for the autoencoder: exhaustive nearest-neighbour search,
//! finite-difference checks of the loss terms, straight-through gradient
//! consistency and the small training behaviours.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqdrive_core::tape::Tape;
use vqdrive_core::tensor::Tensor;
use vqdrive_core::trajgen::{build_basis, BoundaryConditions, QpGains, SetpointSolver, Setpoints};
use vqdrive_core::nn::OptKind;
use vqdrive_core::vqvae::{
    quantize, train_vqvae, vqvae_loss, VqVae, VqVaeConfig, VqVaeSample,
};

fn tiny_solver() -> SetpointSolver {
    let basis = build_basis(10, 4, 0.2).unwrap();
    let bc = BoundaryConditions::at_rest((0.0, 0.0));
    SetpointSolver::new(&basis, QpGains::default(), &bc.terminal).unwrap()
}

#[test]
fn quantize_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..20 {
        let e = Tensor::randn(&[16, 4], &mut rng);
        let z = Tensor::randn(&[8, 4], &mut rng);
        let (h, zq) = quantize(&z, &e);
        for i in 0..8 {
            // Oracle: scan all distances, smallest index wins ties.
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for j in 0..16 {
                let mut dist = 0.0;
                for c in 0..4 {
                    let diff = z.at(i, c) - e.at(j, c);
                    dist += diff * diff;
                }
                if dist < best_d {
                    best_d = dist;
                    best = j;
                }
            }
            assert_eq!(h[i], best);
            assert_eq!(zq.row(i), e.row(best));
        }
    }
}

#[test]
fn end_to_end_jacobian_matches_qp_sensitivity() {
    // d xi*/dp through the full autoencoder forward must agree with the QP
    // layer's own sensitivity measured by finite differences.
    let solver = tiny_solver();
    let cfg = VqVaeConfig { k: 8, l: 2, d: 4, hidden: 8, ..VqVaeConfig::default() };
    let model = VqVae::init(cfg, 22);
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let bc = BoundaryConditions::at_rest((0.0, 0.0));
    let b = solver.b_vector(&bc).reshaped(&[solver.equality_row_count(), 1]);

    for _ in 0..5 {
        let tau = Tensor::randn(&[1, 22], &mut rng).scale(4.0);
        let mut tape = Tape::new();
        let fwd = model.forward_batch(&mut tape, &tau, &b, &solver).unwrap();
        let weights = Tensor::randn(&[solver.coeff_dim(), 1], &mut rng);
        let wv = tape.leaf(weights.clone());
        let prod = tape.mul(fwd.xi, wv);
        let root = tape.sum(prod);
        let grads = tape.backward(root).unwrap();
        let grad_p = grads.get(fwd.p);

        // FD through the plain QP solver at the decoded setpoints.
        let p_val = tape.value(fwd.p).clone();
        let h = 1e-2;
        for c in 0..2 {
            let mut plus = Setpoints { v_d: p_val.at(0, 0), y_d: p_val.at(0, 1) };
            let mut minus = plus;
            if c == 0 {
                plus.v_d += h;
                minus.v_d -= h;
            } else {
                plus.y_d += h;
                minus.y_d -= h;
            }
            let xp = solver.solve(&plus, &bc).unwrap().trajectory.xi;
            let xm = solver.solve(&minus, &bc).unwrap().trajectory.xi;
            let fd = xp
                .sub(&xm)
                .scale(1.0 / (2.0 * h))
                .dot(&weights.reshaped(&[solver.coeff_dim()]));
            let err = (grad_p.at(0, c) - fd).abs() / (1.0 + fd.abs());
            assert!(err <= 1e-5, "jacobian col {c}: {} vs {}", grad_p.at(0, c), fd);
        }
    }
}

#[test]
fn straight_through_consistency() {
    // dL/dZ_e from the reconstruction term equals dL/dZ_q computed with Z_q
    // as an independent leaf.
    let solver = tiny_solver();
    let cfg = VqVaeConfig { k: 8, l: 2, d: 4, hidden: 8, ..VqVaeConfig::default() };
    let model = VqVae::init(cfg.clone(), 22);
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let tau = Tensor::randn(&[1, 22], &mut rng).scale(4.0);
    let bc = BoundaryConditions::at_rest((0.0, 0.0));
    let b = solver.b_vector(&bc).reshaped(&[solver.equality_row_count(), 1]);
    let w_stacked = solver.basis().w_stacked();

    let mut tape = Tape::new();
    let fwd = model.forward_batch(&mut tape, &tau, &b, &solver).unwrap();
    let loss = vqvae_loss(&mut tape, &fwd, &tau, &w_stacked, cfg.beta);
    let grads = tape.backward(loss.recon).unwrap();
    let g_ze = grads.get(fwd.z_e);

    // Replay the decoder with Z_q as a leaf.
    let zq_val = tape.value(fwd.z_q).clone();
    let mut t2 = Tape::new();
    let dec_vars = model.decoder.lift(&mut t2);
    let zq_leaf = t2.leaf(zq_val);
    let dec_in = t2.reshape(zq_leaf, &[1, cfg.l * cfg.d]);
    let raw = dec_vars.forward(&mut t2, dec_in);
    let v_col = t2.slice_cols(raw, 0, 1);
    let y_col = t2.slice_cols(raw, 1, 1);
    let v_phys = t2.affine(v_col, cfg.v_scale, cfg.v_off);
    let y_phys = t2.affine(y_col, cfg.y_scale, 0.0);
    let p = t2.concat_cols(v_phys, y_phys);
    let xi = solver.solve_on_tape(&mut t2, p, &b).unwrap();
    let wl = t2.leaf(w_stacked.clone());
    let recon = t2.matmul(wl, xi);
    let tau_cols = t2.leaf(tau.transpose());
    let diff = t2.sub(recon, tau_cols);
    let l2 = t2.sum_sq(diff);
    let g2 = t2.backward(l2).unwrap();
    let g_zq_leaf = g2.get(zq_leaf);

    assert!(g_ze.sub(&g_zq_leaf).norm_inf() <= 1e-12 * (1.0 + g_zq_leaf.norm_inf()));
}

#[test]
fn codebook_row_gradient_formula_and_fd() {
    // Dictionary term: d/de_j = 2·count_j·(e_j − mean of assigned z_e rows),
    // cross-checked against central finite differences on a 3-row toy.
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.5], vec![0.0, 2.0]]);
    let z = Tensor::from_rows(&[vec![0.9, 0.1], vec![1.2, -0.1], vec![0.1, 1.8]]);
    let (h, _) = quantize(&z, &e);

    let mut tape = Tape::new();
    let e_var = tape.leaf(e.clone());
    let z_var = tape.leaf(z.clone());
    let zq = tape.gather_rows(e_var, &h);
    let sg_z = tape.stop_grad(z_var);
    let diff = tape.sub(sg_z, zq);
    let loss = tape.sum_sq(diff);
    let grads = tape.backward(loss).unwrap();
    let g_e = grads.get(e_var);

    for j in 0..3 {
        let assigned: Vec<usize> = (0..3).filter(|&i| h[i] == j).collect();
        let count = assigned.len() as f64;
        for c in 0..2 {
            let mean = if assigned.is_empty() {
                0.0
            } else {
                assigned.iter().map(|&i| z.at(i, c)).sum::<f64>() / count
            };
            let expect = if assigned.is_empty() { 0.0 } else { 2.0 * count * (e.at(j, c) - mean) };
            assert!((g_e.at(j, c) - expect).abs() <= 1e-12, "row {j} col {c}");
        }
    }

    // FD with assignments frozen (they are stable under the 1e-5 step here).
    let hstep = 1e-5;
    for j in 0..3 {
        for c in 0..2 {
            let mut ep = e.clone();
            ep.set(j, c, e.at(j, c) + hstep);
            let mut em = e.clone();
            em.set(j, c, e.at(j, c) - hstep);
            let f = |et: &Tensor| -> f64 {
                let mut s = 0.0;
                for i in 0..3 {
                    for cc in 0..2 {
                        let d = z.at(i, cc) - et.at(h[i], cc);
                        s += d * d;
                    }
                }
                s
            };
            let fd = (f(&ep) - f(&em)) / (2.0 * hstep);
            let err = (g_e.at(j, c) - fd).abs() / (1.0 + fd.abs());
            assert!(err <= 1e-7, "fd mismatch at ({j},{c}): {} vs {}", g_e.at(j, c), fd);
        }
    }
    let _ = &mut rng;
}

#[test]
fn memorizes_single_trajectory() {
    // One trajectory, tiny codebook: loss decreases monotonically over the
    // first 50 steps.
    let solver = tiny_solver();
    let bc = BoundaryConditions::new((0.0, 0.0), (3.0, 0.0), (0.0, 0.0));
    let target = solver.solve(&Setpoints { v_d: 4.0, y_d: 1.0 }, &bc).unwrap();
    let sample = VqVaeSample { tau: target.trajectory.flat_waypoints(), bc: bc.clone() };
    let cfg = VqVaeConfig {
        k: 2,
        l: 2,
        d: 4,
        hidden: 16,
        // n·dt·v_max for the 2 s test horizon.
        pos_scale: 60.0,
        // Plain gradient descent: small-step descent is monotone, which is
        // what this contract asserts.
        optimizer: OptKind::Sgd,
        lr: 1e-6,
        epochs: 50,
        batch: 1,
        seed: 11,
        ..VqVaeConfig::default()
    };
    let (_, log) = train_vqvae(&[sample], cfg, &solver).unwrap();
    assert!(log.step_losses.len() >= 50);
    for w in log.step_losses[..50].windows(2) {
        assert!(w[1] <= w[0], "loss increased: {} -> {}", w[0], w[1]);
    }
    assert!(log.step_losses[49] < log.step_losses[0], "no progress over 50 steps");
}

#[test]
fn two_clusters_map_to_distinct_codes() {
    // Two well-separated trajectory clusters with K=2, L=1: after training,
    // cluster members quantize to different codebook indices.
    let solver = tiny_solver();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut samples = Vec::new();
    for i in 0..16 {
        let (v, y) = if i % 2 == 0 { (2.0, 1.5) } else { (8.0, -1.5) };
        let bc = BoundaryConditions::new((0.0, 0.0), (rng.gen_range(2.0..4.0), 0.0), (0.0, 0.0));
        let sol = solver
            .solve(&Setpoints { v_d: v + rng.gen_range(-0.2..0.2), y_d: y }, &bc)
            .unwrap();
        samples.push(VqVaeSample { tau: sol.trajectory.flat_waypoints(), bc });
    }
    let cfg = VqVaeConfig {
        k: 2,
        l: 1,
        d: 4,
        hidden: 16,
        pos_scale: 60.0,
        lr: 3e-3,
        epochs: 120,
        batch: 8,
        seed: 17,
        ..VqVaeConfig::default()
    };
    let (model, _) = train_vqvae(&samples, cfg, &solver).unwrap();
    let idx_a = model.encode_indices(&samples[0].tau)[0];
    let idx_b = model.encode_indices(&samples[1].tau)[0];
    assert_ne!(idx_a, idx_b, "clusters collapsed to one code");
    // And assignments are consistent within clusters.
    for (i, s) in samples.iter().enumerate() {
        let idx = model.encode_indices(&s.tau)[0];
        assert_eq!(idx, if i % 2 == 0 { idx_a } else { idx_b });
    }
}
