mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vpc_core::codebook::*;
use vpc_core::encoder::encode_sequence;
use vpc_core::numerics::{argmax, log_softmax, Graph, Tensor};
use vpc_core::objectives::*;
use vpc_core::partition::*;
use vpc_core::synthdata::{sample_corpus, write_corpus, HmmSpec};

fn matrix(seed: u64, rows: usize, cols: usize, scale: f64) -> Tensor {
    common::random_matrix(&mut ChaCha8Rng::seed_from_u64(seed), rows, cols, scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lloyd_distortion_never_increases(seed in 0u64..10_000, n in 8usize..80, k in 1usize..6, d in 1usize..5) {
        let data = matrix(seed, n, d, 2.0);
        let kind = if seed % 2 == 0 { InitKind::KMeansPlusPlus } else { InitKind::Random };
        let start = init_codebook(&data, k, kind, seed).unwrap();
        let fit = fit_kmeans(&data, &start, &KMeansConfig::default()).unwrap();
        for w in fit.distortions.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.distortions);
        }
    }

    #[test]
    fn soft_argmax_matches_hard_assignment(seed in 0u64..10_000, k in 2usize..7, tau in 0.01f64..50.0) {
        let frames = matrix(seed, 20, 3, 2.0);
        let cb = Codebook::new(matrix(seed + 1, k, 3, 2.0), InitKind::Random).unwrap();
        let hard = hard_assign(&frames, &cb).unwrap();
        let q = soft_posterior(&frames, &cb, tau).unwrap();
        for i in 0..frames.rows() {
            prop_assert_eq!(argmax(q.probs.row(i)), hard.ids[i]);
            let s: f64 = q.probs.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(q.entropy(i) <= (k as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn equidistant_codes_give_maximal_entropy(k in 1usize..8, r in 0.1f64..3.0) {
        let centroids: Vec<f64> = (0..k).flat_map(|j| {
            let mut row = vec![0.0; k];
            row[j] = r;
            row
        }).collect();
        let cb = Codebook::new(Tensor::matrix(k, k, centroids), InitKind::Random).unwrap();
        let q = soft_posterior(&Tensor::zeros(&[1, k]), &cb, 1.0).unwrap();
        prop_assert!((q.entropy(0) - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn permuting_codewords_permutes_posteriors(seed in 0u64..10_000, k in 2usize..6) {
        let frames = matrix(seed, 10, 2, 2.0);
        let cents = matrix(seed + 7, k, 2, 2.0);
        let perm: Vec<usize> = (0..k).rev().collect();
        let cb = Codebook::new(cents.clone(), InitKind::Random).unwrap();
        let pb = Codebook::new(cents.select_rows(&perm), InitKind::Random).unwrap();
        let q = soft_posterior(&frames, &cb, 0.7).unwrap();
        let qp = soft_posterior(&frames, &pb, 0.7).unwrap();
        for i in 0..frames.rows() {
            for (j, &p) in perm.iter().enumerate() {
                prop_assert!((qp.probs.row(i)[j] - q.probs.row(i)[p]).abs() < 1e-14);
            }
        }
        let a = distortion_terms(&frames, &cb, &q).unwrap();
        let b = distortion_terms(&frames, &pb, &qp).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn masks_partition_the_sequence(seed in 0u64..100_000, len in 4usize..200, span in 1usize..5, p in 0.01f64..1.0) {
        let spec = MaskSpec { span_frames: span, start_prob: p };
        let m = sample_mask_seeded(len, &spec, seed).unwrap();
        prop_assert!(!m.masked.is_empty());
        let mut all: Vec<usize> = m.masked.iter().chain(&m.unmasked).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
    }

    #[test]
    fn future_context_never_reaches_the_gap(len in 2usize..100, shift in 1usize..6, min_context in 0usize..4) {
        let spec = FutureSpec { shift, min_context };
        match future_partition(len, &spec) {
            Ok(f) => {
                prop_assert!(!f.targets.is_empty());
                for &i in &f.targets {
                    prop_assert!(*f.context(i).end() + shift == i);
                    prop_assert!(f.context(i).end() + 1 > min_context);
                }
            }
            Err(_) => prop_assert!(len <= shift + min_context),
        }
    }

    #[test]
    fn causal_jacobian_has_no_upper_triangle(seed in 0u64..1000, len in 2usize..12, j in 0usize..12) {
        let j = j % len;
        let (cfg, store) = common::toy_model(3, 4, true, seed);
        let x = matrix(seed + 3, len, 3, 1.0);
        let mut y = x.clone();
        for v in y.row_mut(j) {
            *v += 0.5;
        }
        let a = encode_sequence(&store, &cfg, &x, &[]).unwrap();
        let b = encode_sequence(&store, &cfg, &y, &[]).unwrap();
        for (la, lb) in a.iter().zip(&b) {
            prop_assert_eq!(la.rows(), len);
            for i in 0..j {
                prop_assert_eq!(la.row(i), lb.row(i));
            }
            prop_assert!(la.row(j) != lb.row(j));
        }
    }

    #[test]
    fn loss_terms_decompose_and_kl_is_nonnegative(seed in 0u64..1000, tau in 0.1f64..10.0, est in 0usize..3) {
        let (cfg, store) = common::toy_model(3, 4, false, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = common::random_batch(&mut rng, 3, &[9, 6]);
        let mask = BatchMask::sample(&batch, &MaskSpec::default(), &mut rng).unwrap();
        let estimator = [Estimator::Marginal, Estimator::SinglePoint, Estimator::gumbel(1.0)][est];
        let mut g = Graph::new();
        let mut ctx = LossCtx { store: &store, encoder: &cfg, rng: &mut rng, train: false };
        let out = masked_vpc_loss(&mut g, &mut ctx, &batch, &mask, tau, &estimator).unwrap();
        let b = &out.breakdown;
        prop_assert!((b.total - (b.neg_entropy + b.cross_entropy + b.reconstruction)).abs() < 1e-12 * b.total.abs().max(1.0));
        prop_assert_eq!(g.value(out.loss).item(), b.total);
        if matches!(estimator, Estimator::Marginal) {
            prop_assert!(b.kl() >= -1e-12);
        }
    }

    #[test]
    fn log_softmax_stays_finite_for_large_inputs(v in prop::collection::vec(-1e6f64..1e6, 1..20)) {
        let out = log_softmax(&v);
        prop_assert!(out.iter().all(|x| x.is_finite() || *x == f64::NEG_INFINITY));
        let s: f64 = out.iter().map(|x| x.exp()).sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn same_seed_gives_byte_identical_corpora(seed in 0u64..1000) {
        let spec = HmmSpec::desk_default(seed);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_corpus(a.path(), Some(&spec), &sample_corpus(&spec, 3, (10, 20)).unwrap()).unwrap();
        let spec2 = HmmSpec::desk_default(seed);
        write_corpus(b.path(), Some(&spec2), &sample_corpus(&spec2, 3, (10, 20)).unwrap()).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        prop_assert_eq!(names.len(), 13);
        for n in names {
            prop_assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap());
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic(seed in 0u64..1000) {
        let (cfg, store) = common::toy_model(4, 3, false, seed);
        let x = matrix(seed, 11, 4, 1.0);
        prop_assert_eq!(
            encode_sequence(&store, &cfg, &x, &[2, 3]).unwrap(),
            encode_sequence(&store, &cfg, &x, &[2, 3]).unwrap()
        );
    }
}
