//! Vector-quantized autoencoder over expert trajectories with a
//! differentiable QP decoder: encoder → nearest-neighbour quantization
//! against a learned codebook → decoder producing setpoints → setpoint QP →
//! reconstructed trajectory. Trained with the three-term loss
//! (reconstruction, dictionary, commitment) using straight-through
//! gradients across the quantization.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::nn::{Activation, Mlp, OptKind, Optimizer};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trajgen::{BoundaryConditions, SetpointSolver, Setpoints, Trajectory};

/// Learned embedding table with usage tracking for dead-code reseeding.
#[derive(Debug, Clone)]
pub struct Codebook {
    /// K×D embedding rows.
    pub e: Tensor,
    usage: Vec<u64>,
    unused_steps: Vec<u32>,
}

impl Codebook {
    pub fn init(k: usize, d: usize, rng: &mut impl Rng) -> Self {
        assert!(k >= 2, "codebook needs at least two rows");
        Self {
            e: Tensor::randn(&[k, d], rng).scale(0.5),
            usage: vec![0; k],
            unused_steps: vec![0; k],
        }
    }

    pub fn rows(&self) -> usize {
        self.e.rows()
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }
}

/// Nearest-neighbour assignment of each row of `z_e` to a codebook row.
/// Ties break toward the lowest index.
pub fn quantize(z_e: &Tensor, e: &Tensor) -> (Vec<usize>, Tensor) {
    let (l, d) = (z_e.rows(), z_e.cols());
    assert_eq!(d, e.cols(), "quantize: dimension mismatch");
    let k = e.rows();
    let mut h = Vec::with_capacity(l);
    let mut zq = Tensor::zeros(&[l, d]);
    for i in 0..l {
        let zi = z_e.row(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for j in 0..k {
            let ej = e.row(j);
            let mut dist = 0.0;
            for c in 0..d {
                let diff = zi[c] - ej[c];
                dist += diff * diff;
            }
            if dist < best_d {
                best_d = dist;
                best = j;
            }
        }
        h.push(best);
        for c in 0..d {
            zq.set(i, c, e.at(best, c));
        }
    }
    (h, zq)
}

/// Continuous and quantized latents for one trajectory.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    pub z_e: Tensor,
    pub z_q: Tensor,
    pub h_q: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqVaeConfig {
    /// Codebook rows.
    pub k: usize,
    /// Latent vectors per trajectory.
    pub l: usize,
    /// Latent vector dimension.
    pub d: usize,
    /// Hidden width of encoder/decoder.
    pub hidden: usize,
    /// Commitment weight β.
    pub beta: f64,
    /// Encoder input scale: positions divided by n·dt·v_max.
    pub pos_scale: f64,
    /// Decoder output affine map: v_d = v_scale·r₀ + v_off, y_d = y_scale·r₁.
    pub v_scale: f64,
    pub v_off: f64,
    pub y_scale: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Reseed a codebook row unused for this many consecutive steps.
    pub dead_code_patience: u32,
    pub optimizer: OptKind,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        Self {
            k: 64,
            l: 4,
            d: 8,
            hidden: 64,
            beta: 0.25,
            pos_scale: 297.0,
            v_scale: 15.0,
            v_off: 15.0,
            y_scale: 8.0,
            lr: 1e-3,
            epochs: 200,
            batch: 64,
            seed: 7,
            dead_code_patience: 200,
            optimizer: OptKind::Adam,
        }
    }
}

/// One training sample: flat expert waypoints (x-block then y-block, physical
/// units) plus the boundary state that generated them.
#[derive(Debug, Clone)]
pub struct VqVaeSample {
    pub tau: Tensor,
    pub bc: BoundaryConditions,
}

/// Encoder/decoder pair with an embedded codebook.
#[derive(Debug, Clone)]
pub struct VqVae {
    pub cfg: VqVaeConfig,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebook: Codebook,
}

/// Tape handles produced by one batched forward pass.
pub struct VqVaeForward {
    /// (B·L)×D continuous latents.
    pub z_e: Var,
    /// (B·L)×D quantized latents (codebook rows).
    pub z_q: Var,
    /// Per-sample codebook indices.
    pub h_q: Vec<Vec<usize>>,
    /// B×2 setpoints in physical units.
    pub p: Var,
    /// 2(m+1)×B stacked coefficients.
    pub xi: Var,
    /// Codebook leaf used by the loss terms.
    pub e_var: Var,
    /// Parameter leaves in optimizer order: encoder, decoder, codebook.
    pub param_vars: Vec<Var>,
}

impl VqVae {
    pub fn init(cfg: VqVaeConfig, input_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoder = Mlp::init(
            &[input_dim, cfg.hidden, cfg.hidden, cfg.l * cfg.d],
            Activation::Tanh,
            &mut rng,
        );
        let decoder =
            Mlp::init(&[cfg.l * cfg.d, cfg.hidden, cfg.hidden, 2], Activation::Tanh, &mut rng);
        let codebook = Codebook::init(cfg.k, cfg.d, &mut rng);
        Self { cfg, encoder, decoder, codebook }
    }

    /// Batched forward: `tau_batch` is B×2(n+1) (one flat trajectory per
    /// row), `b_mat` the matching equality right-hand sides (rows×B).
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        tau_batch: &Tensor,
        b_mat: &Tensor,
        solver: &SetpointSolver,
    ) -> Result<VqVaeForward> {
        let batch = tau_batch.rows();
        let enc = self.encoder.lift(tape);
        let dec = self.decoder.lift(tape);
        let e_var = tape.leaf(self.codebook.e.clone());
        let mut param_vars = enc.vars();
        param_vars.extend(dec.vars());
        param_vars.push(e_var);

        let tau_in = tape.leaf(tau_batch.scale(1.0 / self.cfg.pos_scale));
        let z_flat = enc.forward(tape, tau_in);
        // Rows become individual latent vectors: (B·L)×D.
        let z_e = tape.reshape(z_flat, &[batch * self.cfg.l, self.cfg.d]);

        let (h_all, _) = quantize(tape.value(z_e), &self.codebook.e);
        let z_q = tape.gather_rows(e_var, &h_all);
        let st = tape.st_passthrough(z_q, z_e)?;
        let dec_in = tape.reshape(st, &[batch, self.cfg.l * self.cfg.d]);
        let raw = dec.forward(tape, dec_in);

        // Fixed affine map into physical setpoint ranges keeps the
        // trajectory affine in the decoder's final-layer output.
        let v_col = tape.slice_cols(raw, 0, 1);
        let y_col = tape.slice_cols(raw, 1, 1);
        let v_phys = tape.affine(v_col, self.cfg.v_scale, self.cfg.v_off);
        let y_phys = tape.affine(y_col, self.cfg.y_scale, 0.0);
        let p = tape.concat_cols(v_phys, y_phys);

        let xi = solver.solve_on_tape(tape, p, b_mat)?;
        let h_q = h_all.chunks(self.cfg.l).map(|c| c.to_vec()).collect();
        Ok(VqVaeForward { z_e, z_q, h_q, p, xi, e_var, param_vars })
    }

    /// Single-sample forward returning plain values.
    pub fn forward(
        &self,
        tau: &Tensor,
        bc: &BoundaryConditions,
        solver: &SetpointSolver,
    ) -> Result<(Trajectory, LatentGrid, Setpoints)> {
        let mut tape = Tape::new();
        let tau_b = tau.reshaped(&[1, tau.len()]);
        let b = solver.b_vector(bc).reshaped(&[solver.equality_row_count(), 1]);
        let fwd = self.forward_batch(&mut tape, &tau_b, &b, solver)?;
        let xi = tape.value(fwd.xi).reshaped(&[solver.coeff_dim()]);
        let p = tape.value(fwd.p);
        let sp = Setpoints { v_d: p.at(0, 0), y_d: p.at(0, 1) };
        let grid = LatentGrid {
            z_e: tape.value(fwd.z_e).clone(),
            z_q: tape.value(fwd.z_q).clone(),
            h_q: fwd.h_q[0].clone(),
        };
        Ok((Trajectory::from_xi(solver.basis(), xi), grid, sp))
    }

    /// Ground-truth codebook indices for one flat trajectory.
    pub fn encode_indices(&self, tau: &Tensor) -> Vec<usize> {
        let x = tau.reshaped(&[1, tau.len()]).scale(1.0 / self.cfg.pos_scale);
        let z = self.encoder.forward_plain(&x).reshaped(&[self.cfg.l, self.cfg.d]);
        quantize(&z, &self.codebook.e).0
    }

    /// Decode a latent index sequence to setpoints without a tape.
    pub fn decode_indices(&self, h_q: &[usize]) -> Setpoints {
        debug_assert_eq!(h_q.len(), self.cfg.l);
        let mut zq = Vec::with_capacity(self.cfg.l * self.cfg.d);
        for &j in h_q {
            zq.extend_from_slice(self.codebook.e.row(j));
        }
        let raw = self
            .decoder
            .forward_plain(&Tensor::from_vec(&[1, self.cfg.l * self.cfg.d], zq));
        Setpoints {
            v_d: self.cfg.v_scale * raw.at(0, 0) + self.cfg.v_off,
            y_d: self.cfg.y_scale * raw.at(0, 1),
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.encoder.named_params("encoder", &mut out);
        self.decoder.named_params("decoder", &mut out);
        out.push((String::from("codebook.e"), self.codebook.e.clone()));
        let c = &self.cfg;
        for (name, v) in [
            ("meta.k", c.k as f64),
            ("meta.l", c.l as f64),
            ("meta.d", c.d as f64),
            ("meta.hidden", c.hidden as f64),
            ("meta.beta", c.beta),
            ("meta.pos_scale", c.pos_scale),
            ("meta.v_scale", c.v_scale),
            ("meta.v_off", c.v_off),
            ("meta.y_scale", c.y_scale),
        ] {
            out.push((String::from(name), Tensor::scalar(v)));
        }
        out
    }

    /// Rebuild a model from checkpoint tensors.
    pub fn from_named_params(params: &[(String, Tensor)]) -> Result<Self> {
        let get = |name: &str| -> Result<&Tensor> {
            params
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| CoreError::Contract(format!("checkpoint missing tensor {name}")))
        };
        let mut cfg = VqVaeConfig {
            k: get("meta.k")?.item() as usize,
            l: get("meta.l")?.item() as usize,
            d: get("meta.d")?.item() as usize,
            hidden: get("meta.hidden")?.item() as usize,
            beta: get("meta.beta")?.item(),
            pos_scale: get("meta.pos_scale")?.item(),
            v_scale: get("meta.v_scale")?.item(),
            v_off: get("meta.v_off")?.item(),
            y_scale: get("meta.y_scale")?.item(),
            ..VqVaeConfig::default()
        };
        cfg.seed = 0;
        let input_dim = get("encoder.0.w")?.rows();
        let mut model = Self::init(cfg, input_dim);
        for (i, layer) in model.encoder.layers.iter_mut().enumerate() {
            layer.w = get(&format!("encoder.{i}.w"))?.clone();
            layer.b = get(&format!("encoder.{i}.b"))?.clone();
        }
        for (i, layer) in model.decoder.layers.iter_mut().enumerate() {
            layer.w = get(&format!("decoder.{i}.w"))?.clone();
            layer.b = get(&format!("decoder.{i}.b"))?.clone();
        }
        model.codebook.e = get("codebook.e")?.clone();
        model.codebook.usage = vec![0; model.codebook.e.rows()];
        model.codebook.unused_steps = vec![0; model.codebook.e.rows()];
        Ok(model)
    }
}

/// The three loss terms on the tape. `w_stacked` must be the block-diagonal
/// basis map so that `w_stacked · ξ` reproduces the flat waypoints.
pub struct VqVaeLoss {
    pub total: Var,
    pub recon: Var,
    pub dictionary: Var,
    pub commitment: Var,
}

/// L = ‖W̄ξ − τ‖² + ‖sg[Z_e] − E_used‖² + β‖Z_e − sg[E_used]‖², averaged
/// over the batch. The dictionary term updates only the codebook, the
/// commitment term only the encoder.
pub fn vqvae_loss(
    tape: &mut Tape,
    fwd: &VqVaeForward,
    tau_batch: &Tensor,
    w_stacked: &Tensor,
    beta: f64,
) -> VqVaeLoss {
    let batch = tau_batch.rows() as f64;
    let w = tape.leaf(w_stacked.clone());
    let recon_cols = tape.matmul(w, fwd.xi);
    let tau_cols = tape.leaf(tau_batch.transpose());
    let rdiff = tape.sub(recon_cols, tau_cols);
    let recon_sum = tape.sum_sq(rdiff);
    let recon = tape.scale(recon_sum, 1.0 / batch);

    let sg_ze = tape.stop_grad(fwd.z_e);
    let ddiff = tape.sub(sg_ze, fwd.z_q);
    let dict_sum = tape.sum_sq(ddiff);
    let dictionary = tape.scale(dict_sum, 1.0 / batch);

    let sg_zq = tape.stop_grad(fwd.z_q);
    let cdiff = tape.sub(fwd.z_e, sg_zq);
    let commit_sum = tape.sum_sq(cdiff);
    let commitment = tape.scale(commit_sum, beta / batch);

    let t1 = tape.add(recon, dictionary);
    let total = tape.add(t1, commitment);
    VqVaeLoss { total, recon, dictionary, commitment }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone)]
pub struct VqVaeEpoch {
    pub loss: f64,
    pub recon: f64,
    pub dictionary: f64,
    pub commitment: f64,
    /// Root-mean-square waypoint position error in meters.
    pub rmse: f64,
}

#[derive(Debug, Clone, Default)]
pub struct VqVaeTrainLog {
    pub epochs: Vec<VqVaeEpoch>,
    /// Loss after every optimizer step (used by the smoke tests).
    pub step_losses: Vec<f64>,
}

/// Minibatch training of the full model.
pub fn train_vqvae(
    samples: &[VqVaeSample],
    cfg: VqVaeConfig,
    solver: &SetpointSolver,
) -> Result<(VqVae, VqVaeTrainLog)> {
    if samples.is_empty() {
        return Err(CoreError::Contract(String::from("empty training set")));
    }
    let input_dim = samples[0].tau.len();
    let mut model = VqVae::init(cfg.clone(), input_dim);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut log = VqVaeTrainLog::default();
    let w_stacked = solver.basis().w_stacked();
    let n1 = solver.basis().n + 1;
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_sums = [0.0f64; 4];
        let mut epoch_batches = 0usize;

        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch = chunk.len();
            let mut tau_rows = Vec::with_capacity(batch);
            let mut b_cols = Vec::with_capacity(batch);
            for &idx in chunk {
                tau_rows.push(samples[idx].tau.data().to_vec());
                b_cols.push(
                    solver
                        .b_vector(&samples[idx].bc)
                        .reshaped(&[solver.equality_row_count(), 1]),
                );
            }
            let tau_batch = Tensor::from_rows(&tau_rows);
            let b_refs: Vec<&Tensor> = b_cols.iter().collect();
            let b_mat = Tensor::hstack(&b_refs);

            let mut tape = Tape::new();
            let fwd = model.forward_batch(&mut tape, &tau_batch, &b_mat, solver)?;
            let loss = vqvae_loss(&mut tape, &fwd, &tau_batch, &w_stacked, cfg.beta);
            let loss_val = tape.value(loss.total).item();
            if !loss_val.is_finite() {
                return Err(CoreError::Divergence { step });
            }
            let grads = tape.backward(loss.total)?;

            // Parameter order: encoder, decoder, codebook — fixed.
            let grad_list: Vec<Tensor> = fwd.param_vars.iter().map(|v| grads.get(*v)).collect();
            let mut params: Vec<&mut Tensor> = Vec::new();
            for l in &mut model.encoder.layers {
                params.push(&mut l.w);
                params.push(&mut l.b);
            }
            for l in &mut model.decoder.layers {
                params.push(&mut l.w);
                params.push(&mut l.b);
            }
            params.push(&mut model.codebook.e);
            opt.step(&mut params, &grad_list);

            // Usage bookkeeping and dead-code reseeding.
            let mut used = vec![false; model.codebook.rows()];
            for h in &fwd.h_q {
                for &j in h {
                    used[j] = true;
                    model.codebook.usage[j] += 1;
                }
            }
            let z_e_val = tape.value(fwd.z_e).clone();
            for j in 0..model.codebook.rows() {
                if used[j] {
                    model.codebook.unused_steps[j] = 0;
                } else {
                    model.codebook.unused_steps[j] += 1;
                    if model.codebook.unused_steps[j] >= cfg.dead_code_patience {
                        let src = rng.gen_range(0..z_e_val.rows());
                        for c in 0..model.codebook.e.cols() {
                            let noise: f64 = rand_distr::Distribution::sample(
                                &rand_distr::StandardNormal,
                                &mut rng,
                            );
                            model.codebook.e.set(j, c, z_e_val.at(src, c) + 0.01 * noise);
                        }
                        model.codebook.unused_steps[j] = 0;
                    }
                }
            }

            let recon_val = tape.value(loss.recon).item();
            epoch_sums[0] += loss_val;
            epoch_sums[1] += recon_val;
            epoch_sums[2] += tape.value(loss.dictionary).item();
            epoch_sums[3] += tape.value(loss.commitment).item();
            epoch_batches += 1;
            log.step_losses.push(loss_val);
            step += 1;
        }

        let nb = epoch_batches as f64;
        let recon_mean = epoch_sums[1] / nb;
        log.epochs.push(VqVaeEpoch {
            loss: epoch_sums[0] / nb,
            recon: recon_mean,
            dictionary: epoch_sums[2] / nb,
            commitment: epoch_sums[3] / nb,
            rmse: crate::math::sqrt(recon_mean / n1 as f64),
        });
    }
    Ok((model, log))
}
