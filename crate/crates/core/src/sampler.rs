//! Conditional autoregressive model over codebook-index sequences: masked
//! causal 1-D convolutions (kernel 3 with the future tap always masked, so
//! taps are previous-position and, from the second layer on, the current
//! position) with a per-layer conditioning bias derived from the
//! observation. Trains with cross-entropy against ground-truth index
//! sequences and samples new sequences position by position.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::math;
use crate::nn::{Activation, Linear, Mlp, OptKind, Optimizer};
use crate::obs::{Observation, OBS_DIM};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Codebook size (logit count per position).
    pub k: usize,
    /// Sequence length.
    pub l: usize,
    pub channels: usize,
    pub layers: usize,
    pub cond_dim: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Fraction of the dataset held out for perplexity reporting.
    pub holdout_frac: f64,
    pub optimizer: OptKind,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: 64,
            l: 4,
            channels: 64,
            layers: 4,
            cond_dim: 32,
            lr: 1e-3,
            epochs: 60,
            batch: 64,
            seed: 23,
            holdout_frac: 0.1,
            optimizer: OptKind::Adam,
        }
    }
}

/// One masked convolution layer. `w_center` is absent on the first layer
/// (type-A mask: the current position must not see itself).
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w_prev: Tensor,
    pub w_center: Option<Tensor>,
    pub bias: Tensor,
    pub cond: Linear,
}

/// Masked causal convolution stack with observation conditioning.
#[derive(Debug, Clone)]
pub struct LatentSampler {
    pub cfg: SamplerConfig,
    pub conditioner: Mlp,
    /// K×C index embedding.
    pub embed: Tensor,
    pub convs: Vec<ConvLayer>,
    pub head: Linear,
}

struct LayerVars {
    w_prev: Var,
    w_center: Option<Var>,
    bias: Var,
    cond_w: Var,
    cond_b: Var,
}

impl LatentSampler {
    pub fn init(cfg: SamplerConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.channels;
        let conditioner =
            Mlp::init(&[OBS_DIM, cfg.cond_dim, cfg.cond_dim], Activation::Relu, &mut rng);
        let embed = Tensor::randn(&[cfg.k, c], &mut rng).scale(math::sqrt(1.0 / c as f64));
        let mut convs = Vec::with_capacity(cfg.layers);
        for layer in 0..cfg.layers {
            let scale = math::sqrt(1.0 / c as f64);
            convs.push(ConvLayer {
                w_prev: Tensor::randn(&[c, c], &mut rng).scale(scale),
                w_center: if layer == 0 {
                    None
                } else {
                    Some(Tensor::randn(&[c, c], &mut rng).scale(scale))
                },
                bias: Tensor::zeros(&[c]),
                cond: Linear::init(cfg.cond_dim, c, &mut rng),
            });
        }
        // Zero head: an untrained model emits exactly uniform logits.
        let head = Linear { w: Tensor::zeros(&[c, cfg.k]), b: Tensor::zeros(&[cfg.k]) };
        Self { cfg, conditioner, embed, convs, head }
    }

    fn check_indices(&self, h_q: &[usize]) -> Result<()> {
        if h_q.len() != self.cfg.l {
            return Err(CoreError::Contract(format!(
                "index sequence length {} != L={}",
                h_q.len(),
                self.cfg.l
            )));
        }
        if let Some(&bad) = h_q.iter().find(|&&j| j >= self.cfg.k) {
            return Err(CoreError::Contract(format!(
                "codebook index {bad} out of range (K={})",
                self.cfg.k
            )));
        }
        Ok(())
    }

    fn lift(&self, tape: &mut Tape) -> (crate::nn::MlpVars, Var, Vec<LayerVars>, Var, Var, Vec<Var>) {
        let cond_vars = self.conditioner.lift(tape);
        let embed = tape.leaf(self.embed.clone());
        let mut layer_vars = Vec::with_capacity(self.convs.len());
        for layer in &self.convs {
            layer_vars.push(LayerVars {
                w_prev: tape.leaf(layer.w_prev.clone()),
                w_center: layer.w_center.as_ref().map(|w| tape.leaf(w.clone())),
                bias: tape.leaf(layer.bias.clone()),
                cond_w: tape.leaf(layer.cond.w.clone()),
                cond_b: tape.leaf(layer.cond.b.clone()),
            });
        }
        let head_w = tape.leaf(self.head.w.clone());
        let head_b = tape.leaf(self.head.b.clone());
        let mut params = cond_vars.vars();
        params.push(embed);
        for lv in &layer_vars {
            params.push(lv.w_prev);
            if let Some(wc) = lv.w_center {
                params.push(wc);
            }
            params.push(lv.bias);
            params.push(lv.cond_w);
            params.push(lv.cond_b);
        }
        params.push(head_w);
        params.push(head_b);
        (cond_vars, embed, layer_vars, head_w, head_b, params)
    }

    /// Batched logits on the tape: `idx` holds B sequences, `obs_batch` is
    /// B×55. Returns (B·L)×K logits plus the parameter leaves.
    pub fn logits_batch(
        &self,
        tape: &mut Tape,
        idx: &[Vec<usize>],
        obs_batch: &Tensor,
    ) -> Result<(Var, Vec<Var>)> {
        let batch = idx.len();
        if obs_batch.rows() != batch || obs_batch.cols() != OBS_DIM {
            return Err(CoreError::Contract(format!(
                "observation batch shape {:?} for {} sequences",
                obs_batch.shape(),
                batch
            )));
        }
        for h in idx {
            self.check_indices(h)?;
        }
        let l = self.cfg.l;
        let (cond_vars, embed, layer_vars, head_w, head_b, params) = self.lift(tape);

        let obs_in = tape.leaf(obs_batch.clone());
        let cond_feat = cond_vars.forward(tape, obs_in);

        // One-hot rows (B·L)×K feed the embedding.
        let mut onehot = Tensor::zeros(&[batch * l, self.cfg.k]);
        for (b, h) in idx.iter().enumerate() {
            for (i, &j) in h.iter().enumerate() {
                onehot.set(b * l + i, j, 1.0);
            }
        }
        let onehot = tape.leaf(onehot);
        let mut x = tape.matmul(onehot, embed);

        for lv in &layer_vars {
            let shifted = tape.shift_rows(x, l, 1);
            let mut pre = tape.matmul(shifted, lv.w_prev);
            if let Some(wc) = lv.w_center {
                let center = tape.matmul(x, wc);
                pre = tape.add(pre, center);
            }
            let cond_bias = {
                let cw = tape.matmul(cond_feat, lv.cond_w);
                let cb = tape.add_row(cw, lv.cond_b);
                tape.repeat_rows(cb, l)
            };
            let with_cond = tape.add(pre, cond_bias);
            let with_bias = tape.add_row(with_cond, lv.bias);
            x = tape.relu(with_bias);
        }
        let hw = tape.matmul(x, head_w);
        let logits = tape.add_row(hw, head_b);
        Ok((logits, params))
    }

    /// L×K logits for one sequence; row i depends only on `h_q[0..i]`
    /// (exclusive) and the observation.
    pub fn logits(&self, h_q: &[usize], obs: &Observation) -> Result<Tensor> {
        let mut tape = Tape::new();
        let obs_b = Tensor::from_vec(&[1, OBS_DIM], obs.to_vec());
        let (logits, _) = self.logits_batch(&mut tape, &[h_q.to_vec()], &obs_b)?;
        Ok(tape.value(logits).clone())
    }

    /// Plain batched forward used by the sampling loop; bitwise identical to
    /// the tape path (asserted in tests).
    fn logits_plain(&self, idx: &[Vec<usize>], cond_feat: &Tensor) -> Tensor {
        let batch = idx.len();
        let l = self.cfg.l;
        let c = self.cfg.channels;
        let mut x = Tensor::zeros(&[batch * l, c]);
        for (b, h) in idx.iter().enumerate() {
            for (i, &j) in h.iter().enumerate() {
                for ch in 0..c {
                    x.set(b * l + i, ch, self.embed.at(j, ch));
                }
            }
        }
        for layer in &self.convs {
            let mut shifted = Tensor::zeros(&[batch * l, c]);
            for b in 0..batch {
                for i in 1..l {
                    for ch in 0..c {
                        shifted.set(b * l + i, ch, x.at(b * l + i - 1, ch));
                    }
                }
            }
            let mut pre = shifted.matmul(&layer.w_prev);
            if let Some(wc) = &layer.w_center {
                pre = pre.add(&x.matmul(wc));
            }
            let cond_rows = cond_feat.matmul(&layer.cond.w);
            for b in 0..batch {
                for i in 0..l {
                    for ch in 0..c {
                        let v = pre.at(b * l + i, ch)
                            + cond_rows.at(b, ch)
                            + layer.cond.b.data()[ch]
                            + layer.bias.data()[ch];
                        pre.set(b * l + i, ch, math::max(v, 0.0));
                    }
                }
            }
            x = pre;
        }
        let mut logits = x.matmul(&self.head.w);
        for r in 0..logits.rows() {
            for kk in 0..self.cfg.k {
                let v = logits.at(r, kk) + self.head.b.data()[kk];
                logits.set(r, kk, v);
            }
        }
        logits
    }

    fn cond_plain(&self, obs_batch: &Tensor) -> Tensor {
        self.conditioner.forward_plain(obs_batch)
    }

    /// Draw `count` index sequences conditioned on one observation. Each
    /// batch entry owns an independent random stream derived from
    /// (seed, entry index); a temperature below 1e-9 selects the argmax.
    pub fn sample(
        &self,
        obs: &Observation,
        count: usize,
        temperature: f64,
        seed: u64,
    ) -> Vec<Vec<usize>> {
        let l = self.cfg.l;
        let obs_b = Tensor::from_vec(&[1, OBS_DIM], obs.to_vec());
        let cond_single = self.cond_plain(&obs_b);
        // Broadcast the conditioner feature over the batch.
        let mut cond_rows = Vec::with_capacity(count);
        for _ in 0..count {
            cond_rows.push(cond_single.data().to_vec());
        }
        let cond_feat = Tensor::from_rows(&cond_rows);

        let mut rngs: Vec<ChaCha8Rng> = (0..count)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(i as u64);
                r
            })
            .collect();
        let mut seqs = vec![vec![0usize; l]; count];
        for pos in 0..l {
            let logits = self.logits_plain(&seqs, &cond_feat);
            for (b, seq) in seqs.iter_mut().enumerate() {
                let row = logits.row(b * l + pos);
                seq[pos] = if temperature < 1e-9 {
                    argmax(row)
                } else {
                    let p = softmax_scaled(row, temperature);
                    multinomial(&p, rngs[b].gen::<f64>())
                };
            }
        }
        seqs
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.conditioner.named_params("conditioner", &mut out);
        out.push((String::from("embed"), self.embed.clone()));
        for (i, layer) in self.convs.iter().enumerate() {
            out.push((format!("conv.{i}.w_prev"), layer.w_prev.clone()));
            if let Some(wc) = &layer.w_center {
                out.push((format!("conv.{i}.w_center"), wc.clone()));
            }
            out.push((format!("conv.{i}.bias"), layer.bias.clone()));
            out.push((format!("conv.{i}.cond.w"), layer.cond.w.clone()));
            out.push((format!("conv.{i}.cond.b"), layer.cond.b.clone()));
        }
        out.push((String::from("head.w"), self.head.w.clone()));
        out.push((String::from("head.b"), self.head.b.clone()));
        for (name, v) in [
            ("meta.k", self.cfg.k as f64),
            ("meta.l", self.cfg.l as f64),
            ("meta.channels", self.cfg.channels as f64),
            ("meta.layers", self.cfg.layers as f64),
            ("meta.cond_dim", self.cfg.cond_dim as f64),
        ] {
            out.push((String::from(name), Tensor::scalar(v)));
        }
        out
    }

    pub fn from_named_params(params: &[(String, Tensor)]) -> Result<Self> {
        let get = |name: &str| -> Result<&Tensor> {
            params
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| CoreError::Contract(format!("checkpoint missing tensor {name}")))
        };
        let cfg = SamplerConfig {
            k: get("meta.k")?.item() as usize,
            l: get("meta.l")?.item() as usize,
            channels: get("meta.channels")?.item() as usize,
            layers: get("meta.layers")?.item() as usize,
            cond_dim: get("meta.cond_dim")?.item() as usize,
            ..SamplerConfig::default()
        };
        let mut model = Self::init(cfg);
        for (i, layer) in model.conditioner.layers.iter_mut().enumerate() {
            layer.w = get(&format!("conditioner.{i}.w"))?.clone();
            layer.b = get(&format!("conditioner.{i}.b"))?.clone();
        }
        model.embed = get("embed")?.clone();
        for (i, layer) in model.convs.iter_mut().enumerate() {
            layer.w_prev = get(&format!("conv.{i}.w_prev"))?.clone();
            if layer.w_center.is_some() {
                layer.w_center = Some(get(&format!("conv.{i}.w_center"))?.clone());
            }
            layer.bias = get(&format!("conv.{i}.bias"))?.clone();
            layer.cond.w = get(&format!("conv.{i}.cond.w"))?.clone();
            layer.cond.b = get(&format!("conv.{i}.cond.b"))?.clone();
        }
        model.head.w = get("head.w")?.clone();
        model.head.b = get("head.b")?.clone();
        Ok(model)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax; sums to one up to round-off.
fn softmax_scaled(row: &[f64], temperature: f64) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| math::max(a, b));
    let exps: Vec<f64> = row.iter().map(|&v| math::exp((v - m) / temperature)).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / s).collect()
}

fn multinomial(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Mean per-position cross-entropy of a batch on the tape.
fn cross_entropy(
    tape: &mut Tape,
    logits: Var,
    targets: &[Vec<usize>],
    k: usize,
    l: usize,
) -> Var {
    let rows = targets.len() * l;
    let vals = tape.value(logits).clone();
    // Row maxima as constants: the gradient of logsumexp is unchanged.
    let mut maxes = Tensor::zeros(&[rows, k]);
    let mut onehot = Tensor::zeros(&[rows, k]);
    let mut max_sum = 0.0;
    for (b, h) in targets.iter().enumerate() {
        for (i, &j) in h.iter().enumerate() {
            let r = b * l + i;
            let m = vals.row(r).iter().fold(f64::NEG_INFINITY, |a, &v| math::max(a, v));
            max_sum += m;
            for c in 0..k {
                maxes.set(r, c, m);
            }
            onehot.set(r, j, 1.0);
        }
    }
    let maxes = tape.leaf(maxes);
    let shifted = tape.sub(logits, maxes);
    let e = tape.exp(shifted);
    let ones = tape.leaf(Tensor::ones(&[k, 1]));
    let rowsum = tape.matmul(e, ones);
    let lse = tape.ln(rowsum);
    let lse_sum = tape.sum(lse);
    let lse_tot = tape.affine(lse_sum, 1.0, max_sum);
    let oh = tape.leaf(onehot);
    let picked = tape.mul(logits, oh);
    let picked_sum = tape.sum(picked);
    let diff = tape.sub(lse_tot, picked_sum);
    tape.scale(diff, 1.0 / rows as f64)
}

/// Per-epoch sampler statistics.
#[derive(Debug, Clone)]
pub struct SamplerEpoch {
    pub train_ce: f64,
    pub holdout_perplexity: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SamplerTrainLog {
    pub epochs: Vec<SamplerEpoch>,
    pub step_losses: Vec<f64>,
}

/// Train on (observation, ground-truth index sequence) pairs.
pub fn train_sampler(
    dataset: &[(Observation, Vec<usize>)],
    cfg: SamplerConfig,
) -> Result<(LatentSampler, SamplerTrainLog)> {
    if dataset.is_empty() {
        return Err(CoreError::Contract(String::from("empty sampler dataset")));
    }
    for (_, h) in dataset {
        if h.len() != cfg.l {
            return Err(CoreError::Contract(format!(
                "dataset sequence length {} != L={}",
                h.len(),
                cfg.l
            )));
        }
        if let Some(&bad) = h.iter().find(|&&j| j >= cfg.k) {
            return Err(CoreError::Contract(format!(
                "dataset index {bad} out of range (K={})",
                cfg.k
            )));
        }
    }
    let mut model = LatentSampler::init(cfg.clone());
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5bf0_3635);
    let mut log = SamplerTrainLog::default();

    // Deterministic holdout split from the tail.
    let holdout = ((dataset.len() as f64 * cfg.holdout_frac) as usize).min(dataset.len() - 1);
    let train = &dataset[..dataset.len() - holdout];
    let held = &dataset[dataset.len() - holdout..];
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut ce_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let obs_rows: Vec<Vec<f64>> = chunk.iter().map(|&i| train[i].0.to_vec()).collect();
            let obs_batch = Tensor::from_rows(&obs_rows);
            let idx: Vec<Vec<usize>> = chunk.iter().map(|&i| train[i].1.clone()).collect();
            let mut tape = Tape::new();
            let (logits, params) = model.logits_batch(&mut tape, &idx, &obs_batch)?;
            let loss = cross_entropy(&mut tape, logits, &idx, cfg.k, cfg.l);
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(CoreError::Divergence { step });
            }
            let grads = tape.backward(loss)?;
            let grad_list: Vec<Tensor> = params.iter().map(|v| grads.get(*v)).collect();
            apply_sampler_step(&mut model, &mut opt, &grad_list);
            ce_sum += loss_val;
            batches += 1;
            log.step_losses.push(loss_val);
            step += 1;
        }
        let ppl = if held.is_empty() { f64::NAN } else { holdout_perplexity(&model, held)? };
        log.epochs.push(SamplerEpoch { train_ce: ce_sum / batches as f64, holdout_perplexity: ppl });
    }
    Ok((model, log))
}

fn apply_sampler_step(model: &mut LatentSampler, opt: &mut Optimizer, grads: &[Tensor]) {
    let mut params: Vec<&mut Tensor> = Vec::new();
    for l in &mut model.conditioner.layers {
        params.push(&mut l.w);
        params.push(&mut l.b);
    }
    params.push(&mut model.embed);
    for layer in &mut model.convs {
        params.push(&mut layer.w_prev);
        if let Some(wc) = &mut layer.w_center {
            params.push(wc);
        }
        params.push(&mut layer.bias);
        params.push(&mut layer.cond.w);
        params.push(&mut layer.cond.b);
    }
    params.push(&mut model.head.w);
    params.push(&mut model.head.b);
    debug_assert_eq!(params.len(), grads.len());
    opt.step(&mut params, grads);
}

/// exp(mean cross-entropy) over a held-out set.
pub fn holdout_perplexity(
    model: &LatentSampler,
    held: &[(Observation, Vec<usize>)],
) -> Result<f64> {
    let mut ce_sum = 0.0;
    let mut count = 0usize;
    for (obs, h) in held {
        let logits = model.logits(h, obs)?;
        for (i, &j) in h.iter().enumerate() {
            let row = logits.row(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| math::max(a, v));
            let lse: f64 = row.iter().map(|&v| math::exp(v - m)).sum::<f64>();
            ce_sum += m + math::ln(lse) - row[j];
            count += 1;
        }
    }
    Ok(math::exp(ce_sum / count as f64))
}
