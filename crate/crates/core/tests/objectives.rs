mod common;

use common::{random_batch, random_matrix, toy_model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpc_core::codebook::{fit_kmeans, kmeans_pp_init, Codebook, InitKind, KMeansConfig};
use vpc_core::encoder::{encode_sequence, HEAD_U, MASK_EMB};
use vpc_core::numerics::{grad_check, GradCheckConfig, Graph, ParamCheckStatus, ParameterStore, Tensor};
use vpc_core::objectives::*;
use vpc_core::partition::{FutureSpec, MaskSpec, Partition};

fn ln2pi() -> f64 {
    (2.0 * std::f64::consts::PI).ln()
}

/// Hand-rolled log-softmax, independent of the crate helpers.
fn oracle_log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = v.iter().map(|x| (x - m).exp()).sum();
    v.iter().map(|x| x - m - z.ln()).collect()
}

fn graph_terms(logp: &[Vec<f64>], x: &[Vec<f64>], cb: &[Vec<f64>], tau: f64, est: Estimator) -> LossBreakdown {
    let mut g = Graph::new();
    let lp = g.constant(Tensor::from_rows(logp).unwrap());
    let xv = g.constant(Tensor::from_rows(x).unwrap());
    let cv = g.constant(Tensor::from_rows(cb).unwrap());
    let w = vec![1.0 / x.len() as f64; x.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    elbo_terms(&mut g, lp, xv, cv, &w, tau, &est, &mut rng).unwrap().breakdown
}

#[test]
fn two_code_toy_matches_enumeration() {
    // distances (0, 2) at τ = 1, predictor (0.7, 0.3), d = 2
    let b = graph_terms(
        &[vec![0.7f64.ln(), 0.3f64.ln()]],
        &[vec![0.0, 0.0]],
        &[vec![0.0, 0.0], vec![1.0, 1.0]],
        1.0,
        Estimator::Marginal,
    );
    let q = [1.0 / (1.0 + (-2.0f64).exp()), (-2.0f64).exp() / (1.0 + (-2.0f64).exp())];
    let ne = q[0] * q[0].ln() + q[1] * q[1].ln();
    let ce = -(q[0] * 0.7f64.ln() + q[1] * 0.3f64.ln());
    let rec = q[0] * (0.0 + ln2pi()) + q[1] * (1.0 + ln2pi());
    assert!((b.neg_entropy - ne).abs() < 1e-12);
    assert!((b.cross_entropy - ce).abs() < 1e-12);
    assert!((b.reconstruction - rec).abs() < 1e-12);
    assert!((b.total - (ne + ce + rec)).abs() < 1e-12);
}

#[test]
fn point_mass_posterior_has_no_entropy() {
    let b = graph_terms(
        &[vec![0.2f64.ln(), 0.8f64.ln()]],
        &[vec![0.1, 0.3]],
        &[vec![0.0, 0.0], vec![1.0, 1.0]],
        1e-8,
        Estimator::Marginal,
    );
    assert!(b.neg_entropy.abs() < 1e-6);
}

#[test]
fn equidistant_frame_with_uniform_predictor() {
    let k = 4;
    let lp = vec![-(k as f64).ln(); k];
    let cb = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
    let b = graph_terms(&[lp], &[vec![0.0, 0.0]], &cb, 1.0, Estimator::Marginal);
    assert!((b.neg_entropy + (k as f64).ln()).abs() < 1e-12);
    assert!((b.cross_entropy - (k as f64).ln()).abs() < 1e-12);
    assert!(b.kl().abs() < 1e-12);
}

#[test]
fn entropy_term_is_bounded_by_log_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let k = rng.gen_range(2..8);
        let lp = oracle_log_softmax(&(0..k).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>());
        let x = vec![(0..3).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>()];
        let cb: Vec<Vec<f64>> = (0..k).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let tau = rng.gen_range(0.05..5.0);
        let b = graph_terms(&[lp], &x, &cb, tau, Estimator::Marginal);
        assert!(b.neg_entropy <= 1e-15 && b.neg_entropy >= -(k as f64).ln() - 1e-12);
        assert!(b.kl() >= -1e-12);
        assert!(b.reconstruction >= 1.5 * ln2pi() - 1e-12);
        assert!((b.total - (b.neg_entropy + b.cross_entropy + b.reconstruction)).abs() < 1e-9);
    }
}

#[test]
fn marginal_expectation_matches_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let k = rng.gen_range(1..10);
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|r| r / s).collect();
        let v: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut dot = 0.0;
        for i in 0..k {
            dot += q[i] * v[i];
        }
        let e = estimate_expectation(&q, &v, &Estimator::Marginal, &mut rng).unwrap();
        assert!((e - dot).abs() < 1e-12);
    }
}

#[test]
fn gumbel_sampling_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = [0.1, 0.25, 0.05, 0.6];
    let v = [3.0, -1.0, 7.0, 0.5];
    let mean: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
    let var: f64 = q.iter().zip(&v).map(|(a, b)| a * (b - mean) * (b - mean)).sum();
    let n = 100_000;
    let est = Estimator::gumbel(1.0);
    let avg: f64 = (0..n)
        .map(|_| estimate_expectation(&q, &v, &est, &mut rng).unwrap())
        .sum::<f64>()
        / n as f64;
    let se = (var / n as f64).sqrt();
    assert!((avg - mean).abs() < 3.0 * se, "{avg} vs {mean} (se {se})");
}

/// Masked-VPC against a per-utterance reference built from
/// `encode_sequence` and explicit loops.
#[test]
fn masked_vpc_matches_reference_per_utterance() {
    let (d, k) = (3, 5);
    let (cfg, store) = toy_model(d, k, false, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let batch = random_batch(&mut rng, d, &[7, 5, 9]);
    let mask = BatchMask::sample(&batch, &MaskSpec { span_frames: 2, start_prob: 0.3 }, &mut rng).unwrap();
    let tau = 0.8;

    let mut g = Graph::new();
    let mut lrng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = LossCtx { store: &store, encoder: &cfg, rng: &mut lrng, train: false };
    let out = masked_vpc_loss(&mut g, &mut ctx, &batch, &mask, tau, &Estimator::Marginal).unwrap();

    let u = store.get(HEAD_U).unwrap();
    let cb = store.get(CODEBOOK).unwrap();
    let (mut ne, mut ce, mut rec) = (0.0, 0.0, 0.0);
    for (ui, p) in mask.partitions.iter().enumerate() {
        let x = batch.utterance(ui);
        let hidden = encode_sequence(&store, &cfg, &x, &p.masked).unwrap().pop().unwrap();
        let w = 1.0 / (p.masked.len() * batch.len()) as f64;
        for &i in &p.masked {
            let logits: Vec<f64> = (0..k)
                .map(|kk| (0..cfg.model_dim).map(|j| hidden.row(i)[j] * u.row(kk)[j]).sum())
                .collect();
            let lp = oracle_log_softmax(&logits);
            let dist: Vec<f64> = (0..k)
                .map(|kk| (0..d).map(|j| (x.row(i)[j] - cb.row(kk)[j]).powi(2)).sum())
                .collect();
            let lq = oracle_log_softmax(&dist.iter().map(|v| -v / tau).collect::<Vec<_>>());
            for kk in 0..k {
                let q = lq[kk].exp();
                ne += w * q * lq[kk];
                ce -= w * q * lp[kk];
                rec += w * q * (0.5 * dist[kk] + 0.5 * d as f64 * ln2pi());
            }
        }
    }
    let b = out.breakdown;
    assert!((b.neg_entropy - ne).abs() < 1e-10, "{} vs {ne}", b.neg_entropy);
    assert!((b.cross_entropy - ce).abs() < 1e-10);
    assert!((b.reconstruction - rec).abs() < 1e-10);
}

#[test]
fn elbo_upper_bounds_exact_nll_on_random_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let k = rng.gen_range(1..7);
        let d = rng.gen_range(1..5);
        let lp = oracle_log_softmax(&(0..k).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>());
        let dist: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..6.0)).collect();
        let tau = rng.gen_range(0.01..10.0);
        let q: Vec<f64> = oracle_log_softmax(&dist.iter().map(|v| -v / tau).collect::<Vec<_>>())
            .into_iter()
            .map(f64::exp)
            .collect();
        let elbo = frame_terms_with_q(&q, &lp, &dist, d).total();
        // -log Σ p(k) N(x; v_k, I), enumerated directly
        let lik: f64 = (0..k)
            .map(|kk| lp[kk].exp() * (-0.5 * dist[kk]).exp() / (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0))
            .sum();
        let nll = -lik.ln();
        assert!(elbo >= nll - 1e-10, "{elbo} < {nll}");
        assert!((frame_exact_nll(&lp, &dist, d) - nll).abs() < 1e-10);
        let post = frame_exact_posterior(&lp, &dist);
        assert!((frame_terms_with_q(&post, &lp, &dist, d).total() - nll).abs() < 1e-10);
    }
}

#[test]
fn masked_vpc_bounds_exact_nll_on_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for seed in 0..20 {
        let (cfg, store) = toy_model(3, 4, false, 100 + seed);
        let batch = random_batch(&mut rng, 3, &[6, 8]);
        let mask = BatchMask::sample(&batch, &MaskSpec::default(), &mut rng).unwrap();
        let nll = exact_neg_log_likelihood(&store, &cfg, &batch, &mask).unwrap();
        for tau in [0.01, 0.3, 1.0, 4.0] {
            let mut g = Graph::new();
            let mut lrng = ChaCha8Rng::seed_from_u64(seed);
            let mut ctx = LossCtx { store: &store, encoder: &cfg, rng: &mut lrng, train: false };
            let out = masked_vpc_loss(&mut g, &mut ctx, &batch, &mask, tau, &Estimator::Marginal).unwrap();
            assert!(out.breakdown.total >= nll - 1e-10, "τ {tau}: {} < {nll}", out.breakdown.total);
        }
    }
}

fn frozen_kmeans(batch: &Batch, k: usize, seed: u64) -> Codebook {
    let init = kmeans_pp_init(&batch.frames, k, seed).unwrap();
    fit_kmeans(&batch.frames, &init, &KMeansConfig::default()).unwrap().codebook.freeze()
}

#[test]
fn hubert_cross_entropy_equals_single_point_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for seed in 0..10 {
        let (cfg, mut store) = toy_model(3, 4, false, 200 + seed);
        let batch = random_batch(&mut rng, 3, &[9, 6, 7]);
        let mask = BatchMask::sample(&batch, &MaskSpec::default(), &mut rng).unwrap();
        let cb = frozen_kmeans(&batch, 4, seed);
        store.get_mut(CODEBOOK).unwrap().data_mut().copy_from_slice(cb.centroids.data());
        store.set_trainable(CODEBOOK, false).unwrap();

        let run = |f: &dyn Fn(&mut Graph, &mut LossCtx<'_>) -> LossOutput| {
            let mut g = Graph::new();
            let mut lrng = ChaCha8Rng::seed_from_u64(seed);
            let mut ctx = LossCtx { store: &store, encoder: &cfg, rng: &mut lrng, train: false };
            f(&mut g, &mut ctx).breakdown
        };
        let h = run(&|g, ctx| hubert_obj_loss(g, ctx, &batch, &mask, &cb).unwrap());
        let v = run(&|g, ctx| masked_vpc_loss(g, ctx, &batch, &mask, 1e-8, &Estimator::SinglePoint).unwrap());
        assert_eq!(h.cross_entropy.to_bits(), v.cross_entropy.to_bits());
        assert!((h.reconstruction - v.reconstruction).abs() < 1e-9);
    }
}

#[test]
fn hubert_needs_frozen_codebook_and_reports_centroid_floor() {
    let (cfg, store) = toy_model(2, 2, false, 1);
    let frames = Tensor::matrix(4, 2, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    let batch = Batch::from_sequences(&[("a", &frames)]).unwrap();
    let mask = BatchMask { partitions: vec![Partition::from_masked(4, &[0, 1]).unwrap()] };
    let cb = Codebook::new(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]), InitKind::Random).unwrap();
    let mut lrng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = LossCtx { store: &store, encoder: &cfg, rng: &mut lrng, train: false };
    assert!(hubert_obj_loss(&mut Graph::new(), &mut ctx, &batch, &mask, &cb).is_err());
    let out = hubert_obj_loss(&mut Graph::new(), &mut ctx, &batch, &mask, &cb.freeze()).unwrap();
    assert!((out.breakdown.reconstruction - ln2pi()).abs() < 1e-12);
    assert_eq!(out.breakdown.neg_entropy, 0.0);
}

#[test]
fn perfect_predictor_has_zero_cross_entropy() {
    let b = graph_terms(
        &[vec![0.0, -800.0]],
        &[vec![0.0, 0.0]],
        &[vec![0.0, 0.0], vec![1.0, 1.0]],
        1.0,
        Estimator::SinglePoint,
    );
    assert_eq!(b.cross_entropy, 0.0);
}

fn check_grads(store: &ParameterStore, names: &[&str], forward: impl FnMut(&mut Graph, &ParameterStore) -> vpc_core::Result<vpc_core::numerics::Var>) {
    let report = grad_check(forward, store, names, &GradCheckConfig::default()).unwrap();
    for p in &report.params {
        assert_eq!(p.status, ParamCheckStatus::Checked, "{}", p.name);
    }
    assert!(report.pass, "max rel error {} in {:?}", report.max_rel_error, report.params);
}

#[test]
fn masked_vpc_gradients_pass_grad_check_for_every_estimator() {
    let (cfg, store) = toy_model(2, 3, false, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let batch = random_batch(&mut rng, 2, &[4, 3]);
    let mask = BatchMask {
        partitions: vec![Partition::from_masked(4, &[1, 2]).unwrap(), Partition::from_masked(3, &[0]).unwrap()],
    };
    let names: Vec<&str> = store.names().filter(|n| *n != NCE_PROJ).collect();
    for est in [Estimator::Marginal, Estimator::SinglePoint, Estimator::gumbel(1.0)] {
        check_grads(&store, &names, |g, s| {
            let mut lrng = ChaCha8Rng::seed_from_u64(7);
            let mut ctx = LossCtx { store: s, encoder: &cfg, rng: &mut lrng, train: false };
            Ok(masked_vpc_loss(g, &mut ctx, &batch, &mask, 1.0, &est)?.loss)
        });
    }
}

#[test]
fn two_frame_masked_vpc_grad_check() {
    let (cfg, store) = toy_model(2, 2, false, 40);
    let frames = Tensor::matrix(2, 2, vec![0.3, -0.2, 1.1, 0.4]);
    let batch = Batch::from_sequences(&[("t", &frames)]).unwrap();
    let mask = BatchMask { partitions: vec![Partition::from_masked(2, &[1]).unwrap()] };
    let names = [CODEBOOK, HEAD_U, MASK_EMB, "input_proj.weight", "layers.0.attn.wq"];
    check_grads(&store, &names, |g, s| {
        let mut lrng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = LossCtx { store: s, encoder: &cfg, rng: &mut lrng, train: false };
        Ok(masked_vpc_loss(g, &mut ctx, &batch, &mask, 1.0, &Estimator::Marginal)?.loss)
    });
}

#[test]
fn future_vpc_matches_reference_and_grad_check() {
    let (d, k) = (2, 3);
    let (cfg, store) = toy_model(d, k, true, 50);
    let frames = Tensor::matrix(3, d, vec![0.2, -0.4, 1.0, 0.5, -0.7, 0.9]);
    let batch = Batch::from_sequences(&[("t", &frames)]).unwrap();
    let spec = FutureSpec { shift: 1, min_context: 0 };
    let tau = 1.0;
    let mut g = Graph::new();
    let mut lrng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = LossCtx { store: &store, encoder: &cfg, rng: &mut lrng, train: false };
    let out = future_vpc_loss(&mut g, &mut ctx, &batch, &spec, tau, &Estimator::Marginal).unwrap();

    let hidden = encode_sequence(&store, &cfg, &frames, &[]).unwrap().pop().unwrap();
    let u = store.get(HEAD_U).unwrap();
    let cb = store.get(CODEBOOK).unwrap();
    let mut total = 0.0;
    for i in 1..3 {
        let logits: Vec<f64> = (0..k)
            .map(|kk| (0..cfg.model_dim).map(|j| hidden.row(i - 1)[j] * u.row(kk)[j]).sum())
            .collect();
        let lp = oracle_log_softmax(&logits);
        let dist: Vec<f64> = (0..k)
            .map(|kk| (0..d).map(|j| (frames.row(i)[j] - cb.row(kk)[j]).powi(2)).sum())
            .collect();
        let lq = oracle_log_softmax(&dist.iter().map(|v| -v / tau).collect::<Vec<_>>());
        for kk in 0..k {
            let q = lq[kk].exp();
            total += 0.5 * q * (lq[kk] - lp[kk] + 0.5 * dist[kk] + ln2pi());
        }
    }
    assert!((out.breakdown.total - total).abs() < 1e-10, "{} vs {total}", out.breakdown.total);

    let names: Vec<&str> = store.names().filter(|n| *n != MASK_EMB && *n != NCE_PROJ).collect();
    check_grads(&store, &names, |g, s| {
        let mut lrng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = LossCtx { store: s, encoder: &cfg, rng: &mut lrng, train: false };
        Ok(future_vpc_loss(g, &mut ctx, &batch, &spec, tau, &Estimator::gumbel(1.0))?.loss)
    });
}

#[test]
fn future_vpc_ignores_frames_inside_the_shift() {
    let (cfg, store) = toy_model(2, 3, true, 60);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let x = random_matrix(&mut rng, 6, 2, 1.0);
    // shift 3 and min_context 2 leave the single target 5, conditioned on 0..=2
    let spec = FutureSpec { shift: 3, min_context: 2 };
    let run = |x: &Tensor| {
        let batch = Batch::from_sequences(&[("t", x)]).unwrap();
        let mut lrng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = LossCtx { store: &store, encoder: &cfg, rng: &mut lrng, train: false };
        future_vpc_loss(&mut Graph::new(), &mut ctx, &batch, &spec, 1.0, &Estimator::Marginal)
            .unwrap()
            .breakdown
    };
    let base = run(&x);
    let mut y = x.clone();
    y.row_mut(3)[0] += 2.0;
    y.row_mut(4)[1] -= 1.0;
    assert_eq!(run(&y), base);
    let mut z = x.clone();
    z.row_mut(2)[0] += 2.0;
    assert_ne!(run(&z).cross_entropy, base.cross_entropy);
}

#[test]
fn future_vpc_rejects_bidirectional_encoders() {
    let (cfg, store) = toy_model(2, 3, false, 1);
    let x = Tensor::zeros(&[5, 2]);
    let batch = Batch::from_sequences(&[("t", &x)]).unwrap();
    let mut lrng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = LossCtx { store: &store, encoder: &cfg, rng: &mut lrng, train: false };
    let r = future_vpc_loss(&mut Graph::new(), &mut ctx, &batch, &FutureSpec::default(), 1.0, &Estimator::Marginal);
    assert!(matches!(r, Err(vpc_core::Error::Contract(_))));
}

#[test]
fn nce_loss_runs_checks_gradients_and_needs_candidates() {
    let (cfg, store) = toy_model(2, 3, false, 70);
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let batch = random_batch(&mut rng, 2, &[6, 5]);
    let mask = BatchMask {
        partitions: vec![
            Partition::from_masked(6, &[0, 1, 2, 4]).unwrap(),
            Partition::from_masked(5, &[1, 3]).unwrap(),
        ],
    };
    let cfg_nce = NceConfig { n_negatives: 3, ..NceConfig::default() };
    let names: Vec<&str> = store.names().filter(|n| *n != HEAD_U).collect();
    check_grads(&store, &names, |g, s| {
        let mut lrng = ChaCha8Rng::seed_from_u64(5);
        let mut ctx = LossCtx { store: s, encoder: &cfg, rng: &mut lrng, train: false };
        Ok(nce_loss(g, &mut ctx, &batch, &mask, &cfg_nce, 0)?.loss)
    });

    let mut lrng = ChaCha8Rng::seed_from_u64(5);
    let mut ctx = LossCtx { store: &store, encoder: &cfg, rng: &mut lrng, train: false };
    let out = nce_loss(&mut Graph::new(), &mut ctx, &batch, &mask, &cfg_nce, 0).unwrap();
    assert!(out.breakdown.total > 0.0 && out.breakdown.total.is_finite());
    let too_many = NceConfig { n_negatives: 6, ..NceConfig::default() };
    assert!(nce_loss(&mut Graph::new(), &mut ctx, &batch, &mask, &too_many, 0).is_err());
}
