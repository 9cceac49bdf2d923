//! Self-checks on small random models: the variational bound against the
//! exact likelihood, and finite-difference gradients of every objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codebook::{fit_kmeans, kmeans_pp_init, KMeansConfig};
use crate::encoder::{init_encoder, init_head, EncoderConfig, HEAD_U, MASK_EMB};
use crate::error::Result;
use crate::numerics::{grad_check, GradCheckConfig, GradCheckReport, Graph, ParamCheckStatus, ParameterStore, Tensor};
use crate::objectives::*;
use crate::partition::{FutureSpec, MaskSpec};
use crate::trainer::Objective;

pub fn toy_encoder(input_dim: usize, causal: bool) -> EncoderConfig {
    EncoderConfig {
        input_dim,
        layers: 2,
        model_dim: 8,
        heads: 2,
        ffn_dim: 12,
        dropout: 0.0,
        causal,
    }
}

fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// Randomly initialized encoder, predictor head, codebook and NCE projection.
pub fn toy_model(input_dim: usize, k: usize, causal: bool, seed: u64) -> Result<(EncoderConfig, ParameterStore)> {
    let cfg = toy_encoder(input_dim, causal);
    let mut store = ParameterStore::new();
    init_encoder(&mut store, &cfg, seed)?;
    init_head(&mut store, k, cfg.model_dim, seed.wrapping_add(1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    store.insert(CODEBOOK, uniform_matrix(&mut rng, k, input_dim, 1.5), true)?;
    store.insert(NCE_PROJ, uniform_matrix(&mut rng, cfg.model_dim, input_dim, 0.5), true)?;
    Ok((cfg, store))
}

pub fn toy_batch(rng: &mut impl Rng, input_dim: usize, lens: &[usize]) -> Result<Batch> {
    let seqs: Vec<Tensor> = lens.iter().map(|&l| uniform_matrix(rng, l, input_dim, 1.5)).collect();
    let ids: Vec<String> = (0..lens.len()).map(|i| format!("u{i}")).collect();
    let parts: Vec<(&str, &Tensor)> = ids.iter().map(String::as_str).zip(&seqs).collect();
    Batch::from_sequences(&parts)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundSample {
    pub neg_elbo: f64,
    pub exact_nll: f64,
    /// `-ELBO` with `q` at the exact posterior.
    pub posterior_neg_elbo: f64,
}

impl BoundSample {
    pub fn gap(&self) -> f64 {
        self.neg_elbo - self.exact_nll
    }

    pub fn posterior_gap(&self) -> f64 {
        (self.posterior_neg_elbo - self.exact_nll).abs()
    }
}

/// Masked-VPC `-ELBO` under the marginal estimator next to the exact
/// negative log-likelihood of the same masked frames.
pub fn bound_sample(
    store: &ParameterStore,
    enc: &EncoderConfig,
    batch: &Batch,
    mask: &BatchMask,
    tau: f64,
) -> Result<BoundSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = LossCtx {
        store,
        encoder: enc,
        rng: &mut rng,
        train: false,
    };
    let out = masked_vpc_loss(&mut Graph::new(), &mut ctx, batch, mask, tau, &Estimator::Marginal)?;
    Ok(BoundSample {
        neg_elbo: out.breakdown.total,
        exact_nll: exact_neg_log_likelihood(store, enc, batch, mask)?,
        posterior_neg_elbo: exact_posterior_neg_elbo(store, enc, batch, mask)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub samples: usize,
    pub min_gap: f64,
    pub mean_gap: f64,
    pub max_posterior_gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn summarize_bound(samples: &[BoundSample], tolerance: f64) -> BoundReport {
    let n = samples.len();
    let min_gap = samples.iter().map(BoundSample::gap).fold(f64::INFINITY, f64::min);
    let mean_gap = samples.iter().map(BoundSample::gap).sum::<f64>() / n.max(1) as f64;
    let max_posterior_gap = samples.iter().map(BoundSample::posterior_gap).fold(0.0, f64::max);
    BoundReport {
        samples: n,
        min_gap,
        mean_gap,
        max_posterior_gap,
        tolerance,
        pass: n > 0 && min_gap >= -tolerance,
    }
}

/// Bound samples on `n` random models and batches with `K ≤ max_k` codes
/// and sequences of at most `max_t` frames; τ is drawn log-uniformly.
pub fn random_bound_samples(n: usize, max_k: usize, max_t: usize, seed: u64) -> Result<Vec<BoundSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = MaskSpec::default();
    (0..n)
        .map(|i| {
            let k = rng.gen_range(2..=max_k.max(2));
            let d = rng.gen_range(1..=4);
            let (enc, store) = toy_model(d, k, false, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?;
            let n_seq = rng.gen_range(1..=3);
            let lens: Vec<usize> = (0..n_seq)
                .map(|_| rng.gen_range(spec.span_frames..=max_t.max(spec.span_frames)))
                .collect();
            let batch = toy_batch(&mut rng, d, &lens)?;
            let mask = BatchMask::sample(&batch, &spec, &mut rng)?;
            let tau = 10f64.powf(rng.gen_range(-2.0..1.0));
            bound_sample(&store, &enc, &batch, &mask, tau)
        })
        .collect()
}

/// Trainable parameters the objective's loss depends on.
fn checked_names(objective: Objective, store: &ParameterStore) -> Vec<String> {
    store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .filter(|n| match objective {
            Objective::MaskedNce => n != HEAD_U,
            Objective::FutureVpc => n != NCE_PROJ && n != MASK_EMB,
            _ => n != NCE_PROJ,
        })
        .collect()
}

/// Finite-difference check of every trainable parameter group of
/// `objective` on a toy model and batch.
pub fn objective_grad_check(
    objective: Objective,
    estimator: &Estimator,
    seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let d = 2;
    let k = 3;
    let causal = objective == Objective::FutureVpc;
    let (enc, mut store) = toy_model(d, k, causal, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let batch = toy_batch(&mut rng, d, &[6, 5])?;
    let mask = BatchMask::sample(&batch, &MaskSpec::default(), &mut rng)?;
    let frozen = if objective == Objective::HubertObj {
        let init = kmeans_pp_init(&batch.frames, k, seed)?;
        let cb = fit_kmeans(&batch.frames, &init, &KMeansConfig::default())?.codebook.freeze();
        store.get_mut(CODEBOOK)?.data_mut().copy_from_slice(cb.centroids.data());
        store.set_trainable(CODEBOOK, false)?;
        Some(cb)
    } else {
        None
    };
    let nce = NceConfig {
        n_negatives: 1,
        ..NceConfig::default()
    };
    let future = FutureSpec {
        shift: 1,
        min_context: 0,
    };
    let names = checked_names(objective, &store);
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut report = grad_check(
        |g, s| {
            let mut lrng = ChaCha8Rng::seed_from_u64(seed);
            let mut ctx = LossCtx {
                store: s,
                encoder: &enc,
                rng: &mut lrng,
                train: false,
            };
            let out = match objective {
                Objective::HubertObj => {
                    hubert_obj_loss(g, &mut ctx, &batch, &mask, frozen.as_ref().expect("hubert codebook"))?
                }
                Objective::MaskedVpc => masked_vpc_loss(g, &mut ctx, &batch, &mask, 1.0, estimator)?,
                Objective::FutureVpc => future_vpc_loss(g, &mut ctx, &batch, &future, 1.0, estimator)?,
                Objective::MaskedNce => nce_loss(g, &mut ctx, &batch, &mask, &nce, 0)?,
            };
            Ok(out.loss)
        },
        &store,
        &refs,
        cfg,
    )?;
    report.pass = report.pass && report.params.iter().all(|p| p.status == ParamCheckStatus::Checked);
    Ok(report)
}

/// Objective and estimator pairs covered by the gradient suite.
pub fn grad_suite_cases() -> Vec<(Objective, Estimator)> {
    let ests = [Estimator::Marginal, Estimator::SinglePoint, Estimator::gumbel(1.0)];
    let mut cases = vec![(Objective::HubertObj, Estimator::SinglePoint)];
    for obj in [Objective::MaskedVpc, Objective::FutureVpc] {
        cases.extend(ests.iter().map(|e| (obj, *e)));
    }
    cases.push((Objective::MaskedNce, Estimator::gumbel(1.0)));
    cases
}
