//! The objective family: HuBERT's two-step cross entropy, Masked-VPC,
//! Future-VPC and Masked-NCE, with their expectation estimators.
//!
//! Every per-frame term is averaged over the predicted frames of its
//! utterance and then over the utterances of the batch.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::codebook::{gaussian_log_norm, Codebook};
use crate::encoder::{encode, predictor_logits_var, EncodeInput, EncoderConfig};
use crate::error::{ensure, Error, Result};
use crate::numerics::{argmax, argmin, log_softmax, logsumexp, Graph, ParameterStore, Segment, Tensor, Var};
use crate::partition::{future_partition, sample_mask, FuturePartition, FutureSpec, MaskSpec, Partition};

/// Parameter name of the jointly trained codebook.
pub const CODEBOOK: &str = "codebook";
/// Parameter name of the NCE context projection.
pub const NCE_PROJ: &str = "nce.proj";

/// Utterances packed row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub frames: Tensor,
    pub segments: Vec<Segment>,
    pub ids: Vec<String>,
    /// Quantization targets aligned with `frames`; the frames themselves
    /// when absent.
    pub targets: Option<Tensor>,
}

impl Batch {
    pub fn from_sequences(seqs: &[(&str, &Tensor)]) -> Result<Batch> {
        ensure!(!seqs.is_empty(), InvalidArgument, "empty batch");
        let mut segments = Vec::with_capacity(seqs.len());
        let mut start = 0;
        for (_, t) in seqs {
            segments.push(Segment {
                start,
                len: t.rows(),
            });
            start += t.rows();
        }
        let parts: Vec<&Tensor> = seqs.iter().map(|(_, t)| *t).collect();
        Ok(Batch {
            frames: Tensor::vstack(&parts)?,
            segments,
            ids: seqs.iter().map(|(id, _)| id.to_string()).collect(),
            targets: None,
        })
    }

    pub fn with_targets(mut self, targets: Tensor) -> Result<Batch> {
        ensure!(
            targets.rows() == self.frames.rows(),
            Shape,
            "{} target rows for {} frames",
            targets.rows(),
            self.frames.rows()
        );
        self.targets = Some(targets);
        Ok(self)
    }

    pub fn target_rows(&self, idx: &[usize]) -> Tensor {
        self.targets.as_ref().unwrap_or(&self.frames).select_rows(idx)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn utterance(&self, u: usize) -> Tensor {
        let s = self.segments[u];
        let idx: Vec<usize> = (s.start..s.start + s.len).collect();
        self.frames.select_rows(&idx)
    }
}

/// One mask per utterance of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMask {
    pub partitions: Vec<Partition>,
}

impl BatchMask {
    pub fn sample(batch: &Batch, spec: &MaskSpec, rng: &mut impl Rng) -> Result<BatchMask> {
        let partitions = batch
            .segments
            .iter()
            .map(|s| sample_mask(s.len, spec, rng))
            .collect::<Result<_>>()?;
        Ok(BatchMask { partitions })
    }

    pub fn check(&self, batch: &Batch) -> Result<()> {
        ensure!(
            self.partitions.len() == batch.len(),
            Shape,
            "{} masks for {} utterances",
            self.partitions.len(),
            batch.len()
        );
        for (p, s) in self.partitions.iter().zip(&batch.segments) {
            ensure!(p.len == s.len, Shape, "mask length {} vs utterance length {}", p.len, s.len);
            ensure!(!p.masked.is_empty(), InvalidArgument, "empty mask");
        }
        Ok(())
    }

    /// Packed row indices of all masked frames, utterance by utterance.
    pub fn packed(&self, batch: &Batch) -> Vec<usize> {
        self.partitions
            .iter()
            .zip(&batch.segments)
            .flat_map(|(p, s)| p.masked.iter().map(move |&i| s.start + i))
            .collect()
    }

    pub fn frame_weights(&self) -> Vec<f64> {
        let b = self.partitions.len() as f64;
        self.partitions
            .iter()
            .flat_map(|p| std::iter::repeat_n(1.0 / (p.masked.len() as f64 * b), p.masked.len()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    /// Value at the mode of `q`.
    SinglePoint,
    /// Exact expectation under `q`.
    Marginal,
    /// Hard Gumbel-max samples with straight-through gradients through the
    /// relaxation at `temperature`.
    Gumbel { temperature: f64, n_samples: usize },
}

impl Estimator {
    pub fn gumbel(temperature: f64) -> Estimator {
        Estimator::Gumbel {
            temperature,
            n_samples: 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::SinglePoint => "single_point",
            Estimator::Marginal => "marginal",
            Estimator::Gumbel { .. } => "gumbel",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Estimator::Gumbel {
            temperature,
            n_samples,
        } = *self
        {
            ensure!(
                temperature > 0.0 && temperature.is_finite(),
                InvalidArgument,
                "gumbel estimator needs a positive temperature, got {temperature}"
            );
            ensure!(n_samples >= 1, InvalidArgument, "gumbel estimator needs at least one sample");
        }
        Ok(())
    }

    /// Parses `single_point`, `marginal` or `gumbel`; the Gumbel temperature
    /// must come separately.
    pub fn parse(name: &str, gumbel_temperature: Option<f64>) -> Result<Estimator> {
        let e = match name {
            "single_point" => Estimator::SinglePoint,
            "marginal" => Estimator::Marginal,
            "gumbel" => Estimator::gumbel(gumbel_temperature.ok_or_else(|| {
                Error::InvalidArgument("gumbel estimator needs a temperature".into())
            })?),
            _ => return Err(Error::InvalidArgument(format!("unknown estimator {name:?}"))),
        };
        e.validate()?;
        Ok(e)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub neg_entropy: f64,
    pub cross_entropy: f64,
    pub reconstruction: f64,
    pub total: f64,
    pub frames_counted: usize,
    /// Entropy (nats) of the nearest-codeword histogram of the predicted
    /// frames.
    pub codeword_usage_entropy: f64,
}

impl LossBreakdown {
    pub fn kl(&self) -> f64 {
        self.cross_entropy + self.neg_entropy
    }
}

pub struct LossOutput {
    /// Scalar that training differentiates.
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

/// Parameters plus the generator for dropout and sampling.
pub struct LossCtx<'a> {
    pub store: &'a ParameterStore,
    pub encoder: &'a EncoderConfig,
    pub rng: &'a mut ChaCha8Rng,
    /// Enables dropout.
    pub train: bool,
}

/// `k` independent standard Gumbel draws.
pub fn gumbel_noise(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let g = Gumbel::new(0.0, 1.0).expect("unit gumbel");
    (0..k).map(|_| g.sample(rng)).collect()
}

/// Pure expectation of per-code `values` under the row `q`.
pub fn estimate_expectation(q: &[f64], values: &[f64], est: &Estimator, rng: &mut impl Rng) -> Result<f64> {
    est.validate()?;
    ensure!(q.len() == values.len() && !q.is_empty(), Shape, "q and values differ in length");
    Ok(match *est {
        Estimator::SinglePoint => values[argmax(q)],
        Estimator::Marginal => q.iter().zip(values).map(|(p, v)| p * v).sum(),
        Estimator::Gumbel { n_samples, .. } => {
            let mut acc = 0.0;
            for _ in 0..n_samples {
                let noise = gumbel_noise(q.len(), rng);
                let perturbed: Vec<f64> = q.iter().zip(&noise).map(|(p, g)| p.ln() + g).collect();
                acc += values[argmax(&perturbed)];
            }
            acc / n_samples as f64
        }
    })
}

fn histogram_entropy(ids: impl Iterator<Item = usize>, k: usize) -> f64 {
    let mut counts = vec![0usize; k];
    let mut n = 0;
    for i in ids {
        counts[i] += 1;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            p * p.ln()
        })
        .sum::<f64>()
}

fn weighted_mean(g: &mut Graph, per_frame: Var, weights: Var) -> Result<Var> {
    let w = g.mul_col(per_frame, weights)?;
    Ok(g.sum_all(w))
}

/// Expectation weights over codes for each target row.
fn estimator_weights(
    g: &mut Graph,
    logq: Var,
    q: Var,
    dist: Var,
    est: &Estimator,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    match *est {
        Estimator::Marginal => Ok(q),
        Estimator::SinglePoint => {
            let neg = g.scale(dist, -1.0);
            Ok(g.onehot_argmax(neg))
        }
        Estimator::Gumbel {
            temperature,
            n_samples,
        } => {
            let (n, k) = (g.value(logq).rows(), g.value(logq).cols());
            let mut acc: Option<Var> = None;
            for _ in 0..n_samples {
                let noise = Tensor::matrix(n, k, gumbel_noise(n * k, rng));
                let nv = g.constant(noise);
                let pert = g.add(logq, nv)?;
                let mut hard = vec![0.0; n * k];
                let pv = g.value(pert);
                for i in 0..n {
                    hard[i * k + argmax(pv.row(i))] = 1.0;
                }
                let scaled = g.scale(pert, 1.0 / temperature);
                let soft = g.softmax(scaled);
                let st = g.straight_through(soft, Tensor::matrix(n, k, hard))?;
                acc = Some(match acc {
                    None => st,
                    Some(a) => g.add(a, st)?,
                });
            }
            let sum = acc.expect("n_samples >= 1");
            Ok(if n_samples == 1 {
                sum
            } else {
                g.scale(sum, 1.0 / n_samples as f64)
            })
        }
    }
}

/// Shared ELBO assembly from predictor log-probabilities for the target
/// frames, the target frames themselves and the codebook.
#[allow(clippy::too_many_arguments)]
pub fn elbo_terms(
    g: &mut Graph,
    logp: Var,
    targets: Var,
    codebook: Var,
    weights: &[f64],
    tau: f64,
    est: &Estimator,
    rng: &mut ChaCha8Rng,
) -> Result<LossOutput> {
    ensure!(tau > 0.0 && tau.is_finite(), InvalidArgument, "soft-min temperature must be positive");
    est.validate()?;
    let (n, k) = (g.value(logp).rows(), g.value(logp).cols());
    let kc = g.value(codebook).rows();
    if k != kc {
        return Err(Error::Shape(format!("predictor has {k} codes, codebook {kc}")));
    }
    let d = g.value(targets).cols();
    let dist = g.sq_dist(targets, codebook)?;
    let logits = g.scale(dist, -1.0 / tau);
    let logq = g.log_softmax(logits);
    let q = g.exp(logq);
    let w = estimator_weights(g, logq, q, dist, est, rng)?;
    let fw = g.constant(Tensor::matrix(n, 1, weights.to_vec()));

    let qlogq = g.mul(q, logq)?;
    let ne_rows = g.row_sum(qlogq);
    let ne = weighted_mean(g, ne_rows, fw)?;

    let wlogp = g.mul(w, logp)?;
    let ce_rows = g.row_sum(wlogp);
    let ce_rows = g.scale(ce_rows, -1.0);
    let ce = weighted_mean(g, ce_rows, fw)?;

    let half = g.scale(dist, 0.5);
    let wd = g.mul(w, half)?;
    let rec_rows = g.row_sum(wd);
    let rec_rows = g.add_scalar(rec_rows, gaussian_log_norm(d));
    let rec = weighted_mean(g, rec_rows, fw)?;

    let s = g.add(ne, ce)?;
    let total = g.add(s, rec)?;
    let dv = g.value(dist);
    let usage = histogram_entropy((0..n).map(|i| argmin(dv.row(i))), k);
    let breakdown = LossBreakdown {
        neg_entropy: g.value(ne).item(),
        cross_entropy: g.value(ce).item(),
        reconstruction: g.value(rec).item(),
        total: g.value(total).item(),
        frames_counted: n,
        codeword_usage_entropy: usage,
    };
    Ok(LossOutput {
        loss: total,
        breakdown,
    })
}

fn masked_logp(g: &mut Graph, ctx: &mut LossCtx<'_>, batch: &Batch, masked: &[usize]) -> Result<Var> {
    let out = encode(
        g,
        ctx.store,
        ctx.encoder,
        EncodeInput {
            frames: &batch.frames,
            segments: &batch.segments,
            masked,
            key_valid: None,
            dropout_rng: if ctx.train { Some(&mut *ctx.rng) } else { None },
        },
    )?;
    let hm = g.select_rows(out.last(), masked)?;
    let logits = predictor_logits_var(g, ctx.store, hm)?;
    Ok(g.log_softmax(logits))
}

/// Masked-VPC: soft-min posterior over the jointly trained codebook,
/// predictor cross entropy and Gaussian reconstruction on masked frames.
pub fn masked_vpc_loss(
    g: &mut Graph,
    ctx: &mut LossCtx<'_>,
    batch: &Batch,
    mask: &BatchMask,
    tau: f64,
    est: &Estimator,
) -> Result<LossOutput> {
    mask.check(batch)?;
    est.validate()?;
    let masked = mask.packed(batch);
    let logp = masked_logp(g, ctx, batch, &masked)?;
    let targets = g.constant(batch.target_rows(&masked));
    let cb = g.param(ctx.store, CODEBOOK)?;
    elbo_terms(g, logp, targets, cb, &mask.frame_weights(), tau, est, ctx.rng)
}

/// HuBERT's objective: cross entropy against fixed k-means labels. The
/// reconstruction of the assigned centroid is reported but not trained.
pub fn hubert_obj_loss(
    g: &mut Graph,
    ctx: &mut LossCtx<'_>,
    batch: &Batch,
    mask: &BatchMask,
    codebook: &Codebook,
) -> Result<LossOutput> {
    if !codebook.frozen {
        return Err(Error::Contract("hubert objective needs a frozen codebook".into()));
    }
    mask.check(batch)?;
    let masked = mask.packed(batch);
    let logp = masked_logp(g, ctx, batch, &masked)?;
    let (n, k) = (g.value(logp).rows(), g.value(logp).cols());
    if k != codebook.k() {
        return Err(Error::Shape(format!("predictor has {k} codes, codebook {}", codebook.k())));
    }
    let x = batch.target_rows(&masked);
    let dist = codebook.sq_distances(&x)?;
    let ids: Vec<usize> = (0..n).map(|i| argmin(dist.row(i))).collect();
    let fw = g.constant(Tensor::matrix(n, 1, mask.frame_weights()));

    let picked = g.gather_cols(logp, &ids)?;
    let ce_rows = g.scale(picked, -1.0);
    let ce = weighted_mean(g, ce_rows, fw)?;

    let c = gaussian_log_norm(codebook.dim());
    let weights = mask.frame_weights();
    let reconstruction: f64 = ids
        .iter()
        .enumerate()
        .map(|(i, &z)| weights[i] * (0.5 * dist.row(i)[z] + c))
        .sum();
    let cross_entropy = g.value(ce).item();
    Ok(LossOutput {
        loss: ce,
        breakdown: LossBreakdown {
            neg_entropy: 0.0,
            cross_entropy,
            reconstruction,
            total: cross_entropy + reconstruction,
            frames_counted: n,
            codeword_usage_entropy: histogram_entropy(ids.into_iter(), k),
        },
    })
}

/// Future-VPC: target `i` is predicted from the causal hidden state at
/// `i - shift`.
pub fn future_vpc_loss(
    g: &mut Graph,
    ctx: &mut LossCtx<'_>,
    batch: &Batch,
    spec: &FutureSpec,
    tau: f64,
    est: &Estimator,
) -> Result<LossOutput> {
    if !ctx.encoder.causal {
        return Err(Error::Contract("future prediction needs a causal encoder".into()));
    }
    est.validate()?;
    let parts: Vec<FuturePartition> = batch
        .segments
        .iter()
        .map(|s| future_partition(s.len, spec))
        .collect::<Result<_>>()?;
    let (mut ctx_rows, mut tgt_rows, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    let b = batch.len() as f64;
    for (p, s) in parts.iter().zip(&batch.segments) {
        for &t in &p.targets {
            ctx_rows.push(s.start + p.context_end(t));
            tgt_rows.push(s.start + t);
            weights.push(1.0 / (p.targets.len() as f64 * b));
        }
    }
    let out = encode(
        g,
        ctx.store,
        ctx.encoder,
        EncodeInput {
            frames: &batch.frames,
            segments: &batch.segments,
            masked: &[],
            key_valid: None,
            dropout_rng: if ctx.train { Some(&mut *ctx.rng) } else { None },
        },
    )?;
    let h = g.select_rows(out.last(), &ctx_rows)?;
    let logits = predictor_logits_var(g, ctx.store, h)?;
    let logp = g.log_softmax(logits);
    let targets = g.constant(batch.target_rows(&tgt_rows));
    let cb = g.param(ctx.store, CODEBOOK)?;
    elbo_terms(g, logp, targets, cb, &weights, tau, est, ctx.rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NceConfig {
    pub n_negatives: usize,
    /// Multiplier on cosine similarities.
    pub scale: f64,
    pub gumbel_start: f64,
    pub gumbel_min: f64,
    pub gumbel_decay: f64,
}

impl Default for NceConfig {
    fn default() -> Self {
        NceConfig {
            n_negatives: 100,
            scale: 10.0,
            gumbel_start: 2.0,
            gumbel_min: 0.5,
            gumbel_decay: 0.999995,
        }
    }
}

impl NceConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_negatives >= 1, InvalidArgument, "need at least one negative");
        ensure!(self.scale > 0.0, InvalidArgument, "similarity scale must be positive");
        ensure!(
            self.gumbel_min > 0.0 && self.gumbel_start >= self.gumbel_min,
            InvalidArgument,
            "bad gumbel temperature range"
        );
        ensure!(
            self.gumbel_decay > 0.0 && self.gumbel_decay <= 1.0,
            InvalidArgument,
            "gumbel decay must be in (0, 1]"
        );
        Ok(())
    }

    pub fn gumbel_temperature(&self, step: u64) -> f64 {
        (self.gumbel_start * self.gumbel_decay.powf(step as f64)).max(self.gumbel_min)
    }
}

/// `-log softmax` of the positive among `[pos, negs...]` after scaling.
pub fn nce_frame_loss(pos: f64, negs: &[f64], scale: f64) -> f64 {
    let mut logits = vec![scale * pos];
    logits.extend(negs.iter().map(|s| scale * s));
    -log_softmax(&logits)[0]
}

/// Masked-NCE: contrast the projected context of each masked frame against
/// its Gumbel-quantized target and quantized targets of other masked frames
/// in the batch. The cross-entropy field carries the contrastive loss.
pub fn nce_loss(
    g: &mut Graph,
    ctx: &mut LossCtx<'_>,
    batch: &Batch,
    mask: &BatchMask,
    cfg: &NceConfig,
    step: u64,
) -> Result<LossOutput> {
    cfg.validate()?;
    mask.check(batch)?;
    let masked = mask.packed(batch);
    let n = masked.len();
    if n < cfg.n_negatives + 1 {
        return Err(Error::InvalidArgument(format!(
            "{n} masked frames cannot supply {} negatives per frame",
            cfg.n_negatives
        )));
    }
    let out = encode(
        g,
        ctx.store,
        ctx.encoder,
        EncodeInput {
            frames: &batch.frames,
            segments: &batch.segments,
            masked: &masked,
            key_valid: None,
            dropout_rng: if ctx.train { Some(&mut *ctx.rng) } else { None },
        },
    )?;
    let hm = g.select_rows(out.last(), &masked)?;
    let proj = g.param(ctx.store, NCE_PROJ)?;
    let c = g.matmul(hm, proj)?;

    let targets = g.constant(batch.target_rows(&masked));
    let cb = g.param(ctx.store, CODEBOOK)?;
    let dist = g.sq_dist(targets, cb)?;
    let logits = g.scale(dist, -1.0);
    let logq = g.log_softmax(logits);
    let q = g.exp(logq);
    let est = Estimator::gumbel(cfg.gumbel_temperature(step));
    let z = estimator_weights(g, logq, q, dist, &est, ctx.rng)?;
    let k = g.value(z).cols();
    let usage = histogram_entropy((0..n).map(|i| argmax(g.value(z).row(i))), k);
    let quant = g.matmul(z, cb)?;

    let cn = g.row_l2_normalize(c);
    let qn = g.row_l2_normalize(quant);
    let sims = g.matmul_t(cn, qn, false, true)?;
    let sims = g.scale(sims, cfg.scale);
    let mut bias = vec![-1e30; n * n];
    for i in 0..n {
        bias[i * n + i] = 0.0;
        let picks = sample(ctx.rng, n - 1, cfg.n_negatives);
        for j in picks.iter() {
            let j = if j >= i { j + 1 } else { j };
            bias[i * n + j] = 0.0;
        }
    }
    let bias = g.constant(Tensor::matrix(n, n, bias));
    let restricted = g.add(sims, bias)?;
    let lp = g.log_softmax(restricted);
    let diag: Vec<usize> = (0..n).collect();
    let pos = g.gather_cols(lp, &diag)?;
    let rows = g.scale(pos, -1.0);
    let fw = g.constant(Tensor::matrix(n, 1, mask.frame_weights()));
    let loss = weighted_mean(g, rows, fw)?;
    let v = g.value(loss).item();
    Ok(LossOutput {
        loss,
        breakdown: LossBreakdown {
            neg_entropy: 0.0,
            cross_entropy: v,
            reconstruction: 0.0,
            total: v,
            frames_counted: n,
            codeword_usage_entropy: usage,
        },
    })
}

/// Per-frame ELBO terms from plain rows: predictor log-probabilities and
/// squared distances to each code.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameTerms {
    pub neg_entropy: f64,
    pub cross_entropy: f64,
    pub reconstruction: f64,
}

impl FrameTerms {
    pub fn total(&self) -> f64 {
        self.neg_entropy + self.cross_entropy + self.reconstruction
    }
}

/// ELBO terms of one frame under an explicit `q` row, computed exactly.
pub fn frame_terms_with_q(q: &[f64], logp: &[f64], dist: &[f64], d: usize) -> FrameTerms {
    let c = gaussian_log_norm(d);
    let mut t = FrameTerms {
        neg_entropy: 0.0,
        cross_entropy: 0.0,
        reconstruction: 0.0,
    };
    for k in 0..q.len() {
        if q[k] > 0.0 {
            t.neg_entropy += q[k] * q[k].ln();
            t.cross_entropy -= q[k] * logp[k];
            t.reconstruction += q[k] * (0.5 * dist[k] + c);
        }
    }
    t
}

/// `-log Σ_k p(k) N(x; v_k, I)` for one frame.
pub fn frame_exact_nll(logp: &[f64], dist: &[f64], d: usize) -> f64 {
    let c = gaussian_log_norm(d);
    let joint: Vec<f64> = logp.iter().zip(dist).map(|(lp, dv)| lp - 0.5 * dv - c).collect();
    -logsumexp(&joint)
}

/// Exact posterior `p(z | context, x)` of one frame.
pub fn frame_exact_posterior(logp: &[f64], dist: &[f64]) -> Vec<f64> {
    let joint: Vec<f64> = logp.iter().zip(dist).map(|(lp, dv)| lp - 0.5 * dv).collect();
    log_softmax(&joint).into_iter().map(f64::exp).collect()
}

/// Per-frame predictor log-probabilities, codeword distances and loss
/// weights of the masked frames, with dropout off.
fn exact_frame_quantities(
    store: &ParameterStore,
    encoder: &EncoderConfig,
    batch: &Batch,
    mask: &BatchMask,
) -> Result<(Tensor, Tensor, Vec<f64>, usize)> {
    mask.check(batch)?;
    let masked = mask.packed(batch);
    let mut g = Graph::new();
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut ctx = LossCtx {
        store,
        encoder,
        rng: &mut rng,
        train: false,
    };
    let logp = masked_logp(&mut g, &mut ctx, batch, &masked)?;
    let cb = Codebook::new(store.get(CODEBOOK)?.clone(), crate::codebook::InitKind::Random)?;
    let x = batch.target_rows(&masked);
    let dist = cb.sq_distances(&x)?;
    Ok((g.value(logp).clone(), dist, mask.frame_weights(), cb.dim()))
}

/// Exact `-log p(x_M | x_\M)` under the predictor and Gaussian decoder,
/// averaged like the training losses. Dropout is off.
pub fn exact_neg_log_likelihood(
    store: &ParameterStore,
    encoder: &EncoderConfig,
    batch: &Batch,
    mask: &BatchMask,
) -> Result<f64> {
    let (lp, dist, w, d) = exact_frame_quantities(store, encoder, batch, mask)?;
    Ok((0..w.len())
        .map(|i| w[i] * frame_exact_nll(lp.row(i), dist.row(i), d))
        .sum())
}

/// `-ELBO` with `q` set to the exact posterior of every masked frame; equals
/// [`exact_neg_log_likelihood`] up to rounding.
pub fn exact_posterior_neg_elbo(
    store: &ParameterStore,
    encoder: &EncoderConfig,
    batch: &Batch,
    mask: &BatchMask,
) -> Result<f64> {
    let (lp, dist, w, d) = exact_frame_quantities(store, encoder, batch, mask)?;
    Ok((0..w.len())
        .map(|i| {
            let q = frame_exact_posterior(lp.row(i), dist.row(i));
            w[i] * frame_terms_with_q(&q, lp.row(i), dist.row(i), d).total()
        })
        .sum())
}
