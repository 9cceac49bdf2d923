//! Synthetic corpora drawn from a Gaussian-emission HMM with explicit state
//! durations, so downstream probes have ground-truth frame labels.

use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::cache::{read_frames, read_json, write_frames, write_json};
use crate::error::{ensure, Error, Result};
use crate::features::FrameSequence;
use crate::numerics::{logsumexp, Tensor};

/// Frame period of synthetic sequences, matching stacked log-Mel frames.
pub const SYNTH_FRAME_RATE_MS: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmmSpec {
    pub n_states: usize,
    /// Row-stochastic state-to-state matrix, applied at segment boundaries.
    pub transition: Vec<Vec<f64>>,
    pub emission_means: Vec<Vec<f64>>,
    pub emission_std: Vec<f64>,
    pub min_duration: usize,
    pub max_duration: usize,
    /// Per-state level of the continuous auxiliary target.
    pub aux_levels: Vec<f64>,
    /// Exponential smoothing factor of the auxiliary track, in `[0, 1)`.
    pub aux_smoothing: f64,
    pub aux_noise: f64,
    pub seed: u64,
}

/// Frame-wise Bayes error the default corpus is tuned to.
pub const DEFAULT_BAYES_ERROR: f64 = 0.12;

impl HmmSpec {
    /// The desk-scale default: 5 states in 8 dimensions, a mostly cyclic
    /// state order, 3 to 8 frames per visit.
    pub fn desk_default(seed: u64) -> HmmSpec {
        let n = 5;
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let emission_means = (0..n)
            .map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect())
            .collect::<Vec<Vec<f64>>>();
        let std = calibrate_emission_std(&emission_means, DEFAULT_BAYES_ERROR, &mut rng);
        let transition = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if j == (i + 1) % n {
                            0.7
                        } else if j == i {
                            0.0
                        } else {
                            0.1
                        }
                    })
                    .collect()
            })
            .collect();
        HmmSpec {
            n_states: n,
            transition,
            emission_means,
            emission_std: vec![std; n],
            min_duration: 3,
            max_duration: 8,
            aux_levels: (0..n).map(|k| k as f64 / (n - 1) as f64).collect(),
            aux_smoothing: 0.6,
            aux_noise: 0.05,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.emission_means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_states;
        ensure!(n >= 1, InvalidArgument, "need at least one state");
        ensure!(
            self.transition.len() == n && self.transition.iter().all(|r| r.len() == n),
            Shape,
            "transition must be {n}x{n}"
        );
        for (i, row) in self.transition.iter().enumerate() {
            let s: f64 = row.iter().sum();
            ensure!(
                row.iter().all(|&p| p >= 0.0) && (s - 1.0).abs() <= 1e-12,
                InvalidArgument,
                "transition row {i} is not a distribution (sum {s})"
            );
        }
        let d = self.dim();
        ensure!(d >= 1, Shape, "emission means need at least one dimension");
        ensure!(
            self.emission_means.len() == n && self.emission_means.iter().all(|m| m.len() == d),
            Shape,
            "emission means must be {n}x{d}"
        );
        ensure!(
            self.emission_std.len() == n && self.emission_std.iter().all(|&s| s > 0.0),
            InvalidArgument,
            "emission_std must be positive for each of the {n} states"
        );
        ensure!(
            self.aux_levels.len() == n,
            Shape,
            "aux_levels must have {n} entries"
        );
        ensure!(
            (0.0..1.0).contains(&self.aux_smoothing) && self.aux_noise >= 0.0,
            InvalidArgument,
            "aux smoothing must lie in [0, 1) and noise must be non-negative"
        );
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return Err(Error::InvalidArgument(format!(
                "infeasible durations [{}, {}]",
                self.min_duration, self.max_duration
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub frames: FrameSequence,
    pub states: Vec<usize>,
    pub aux: Vec<f64>,
}

/// Walks the chain for `n` segments from a uniform initial state.
pub fn sample_segments(spec: &HmmSpec, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    spec.validate()?;
    let rows = transition_samplers(spec)?;
    let mut out = Vec::with_capacity(n);
    let mut s = rng.gen_range(0..spec.n_states);
    for _ in 0..n {
        out.push(s);
        s = rows[s].sample(rng);
    }
    Ok(out)
}

fn transition_samplers(spec: &HmmSpec) -> Result<Vec<WeightedIndex<f64>>> {
    spec.transition
        .iter()
        .map(|r| WeightedIndex::new(r).map_err(|e| Error::InvalidArgument(e.to_string())))
        .collect()
}

pub fn sample_sequence(spec: &HmmSpec, len: usize, rng: &mut impl Rng, id: &str) -> Result<LabeledSequence> {
    spec.validate()?;
    ensure!(len >= 1, InvalidArgument, "sequence length must be positive");
    let rows = transition_samplers(spec)?;
    let d = spec.dim();
    let mut states = Vec::with_capacity(len);
    let mut s = rng.gen_range(0..spec.n_states);
    while states.len() < len {
        let dur = rng.gen_range(spec.min_duration..=spec.max_duration);
        for _ in 0..dur.min(len - states.len()) {
            states.push(s);
        }
        s = rows[s].sample(rng);
    }
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut frames = Vec::with_capacity(len * d);
    for &st in &states {
        let std = spec.emission_std[st];
        for &m in &spec.emission_means[st] {
            frames.push(m + std * unit.sample(rng));
        }
    }
    let mut aux = Vec::with_capacity(len);
    let mut level = spec.aux_levels[states[0]];
    for &st in &states {
        level = spec.aux_smoothing * level + (1.0 - spec.aux_smoothing) * spec.aux_levels[st];
        aux.push(level + spec.aux_noise * unit.sample(rng));
    }
    Ok(LabeledSequence {
        frames: FrameSequence::new(Tensor::matrix(len, d, frames), SYNTH_FRAME_RATE_MS, id)?,
        states,
        aux,
    })
}

/// Deterministic in `spec.seed`; sequence `i` uses its own ChaCha stream.
pub fn sample_corpus(
    spec: &HmmSpec,
    n_sequences: usize,
    length_range: (usize, usize),
) -> Result<Vec<LabeledSequence>> {
    spec.validate()?;
    let (lo, hi) = length_range;
    ensure!(lo >= 1 && lo <= hi, InvalidArgument, "bad length range [{lo}, {hi}]");
    (0..n_sequences)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            let len = rng.gen_range(lo..=hi);
            sample_sequence(spec, len, &mut rng, &format!("seq{i:05}"))
        })
        .collect()
}

/// Shared isotropic emission std whose frame-wise Bayes error under a uniform
/// state prior is `target`, found by bisection on a fixed Monte Carlo sample.
pub fn calibrate_emission_std(means: &[Vec<f64>], target: f64, rng: &mut impl Rng) -> f64 {
    const PER_STATE: usize = 4000;
    let n = means.len();
    let d = means.first().map_or(0, Vec::len);
    let noise: Vec<f64> = rand_distr::StandardNormal
        .sample_iter(&mut *rng)
        .take(n * PER_STATE * d)
        .collect();
    let error_at = |s: f64| {
        let mut err = 0.0;
        let mut x = vec![0.0; d];
        let mut logits = vec![0.0; n];
        for k in 0..n {
            for r in 0..PER_STATE {
                let eps = &noise[(k * PER_STATE + r) * d..][..d];
                for ((xi, m), e) in x.iter_mut().zip(&means[k]).zip(eps) {
                    *xi = m + s * e;
                }
                for (l, mu) in logits.iter_mut().zip(means) {
                    let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                    *l = -0.5 * sq / (s * s);
                }
                let best = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                err += 1.0 - (best - logsumexp(&logits)).exp();
            }
        }
        err / (n * PER_STATE) as f64
    };
    let (mut lo, mut hi) = (1e-3, 10.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if error_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Per-state log posterior of one frame under the emission model and
/// `log_prior`.
pub fn frame_log_posterior(spec: &HmmSpec, x: &[f64], log_prior: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let joint: Vec<f64> = (0..spec.n_states)
        .map(|k| {
            let s = spec.emission_std[k];
            let sq: f64 = x
                .iter()
                .zip(&spec.emission_means[k])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            log_prior[k] - 0.5 * sq / (s * s) - d * s.ln()
        })
        .collect();
    let z = logsumexp(&joint);
    joint.iter().map(|j| j - z).collect()
}

/// Expected error of the frame-by-frame Bayes classifier, estimated over the
/// corpus frames with the empirical state prior.
pub fn frame_bayes_error(spec: &HmmSpec, corpus: &[LabeledSequence]) -> f64 {
    let mut counts = vec![0usize; spec.n_states];
    for s in corpus {
        for &st in &s.states {
            counts[st] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let log_prior: Vec<f64> = counts
        .iter()
        .map(|&c| ((c.max(1)) as f64 / total as f64).ln())
        .collect();
    let mut err = 0.0;
    for s in corpus {
        for t in 0..s.frames.len() {
            let lp = frame_log_posterior(spec, s.frames.frames.row(t), &log_prior);
            err += 1.0 - lp.iter().copied().fold(f64::NEG_INFINITY, f64::max).exp();
        }
    }
    err / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub ids: Vec<String>,
    pub hmm: Option<HmmSpec>,
    pub frame_rate_ms: f64,
}

pub fn labels_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.labels.json"))
}

pub fn aux_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.aux.json"))
}

/// Writes `corpus.json`, then the feature cache, label and auxiliary
/// sidecars of every sequence.
pub fn write_corpus(dir: &Path, spec: Option<&HmmSpec>, seqs: &[LabeledSequence]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index = CorpusIndex {
        ids: seqs.iter().map(|s| s.frames.source_id.clone()).collect(),
        hmm: spec.cloned(),
        frame_rate_ms: seqs.first().map_or(SYNTH_FRAME_RATE_MS, |s| s.frames.frame_rate_ms),
    };
    write_json(&dir.join("corpus.json"), &index)?;
    for s in seqs {
        write_frames(dir, &s.frames)?;
        write_json(&labels_path(dir, &s.frames.source_id), &s.states)?;
        write_json(&aux_path(dir, &s.frames.source_id), &s.aux)?;
    }
    Ok(())
}

/// A corpus on disk. Label sidecars are optional (real audio has none).
#[derive(Clone, Debug)]
pub struct LoadedCorpus {
    pub index: CorpusIndex,
    pub frames: Vec<FrameSequence>,
    pub states: Option<Vec<Vec<usize>>>,
    pub aux: Option<Vec<Vec<f64>>>,
}

impl LoadedCorpus {
    pub fn labeled(&self) -> Option<Vec<LabeledSequence>> {
        let states = self.states.as_ref()?;
        let aux = self.aux.as_ref()?;
        Some(
            self.frames
                .iter()
                .zip(states)
                .zip(aux)
                .map(|((f, s), a)| LabeledSequence {
                    frames: f.clone(),
                    states: s.clone(),
                    aux: a.clone(),
                })
                .collect(),
        )
    }
}

pub fn read_corpus(dir: &Path) -> Result<LoadedCorpus> {
    let index: CorpusIndex = read_json(&dir.join("corpus.json"))?;
    let mut frames = Vec::with_capacity(index.ids.len());
    for id in &index.ids {
        frames.push(read_frames(dir, id)?);
    }
    let has_labels = index.ids.iter().all(|id| labels_path(dir, id).exists());
    let (states, aux) = if has_labels && !index.ids.is_empty() {
        let mut st = Vec::new();
        let mut ax = Vec::new();
        for (id, f) in index.ids.iter().zip(&frames) {
            let s: Vec<usize> = read_json(&labels_path(dir, id))?;
            let a: Vec<f64> = read_json(&aux_path(dir, id))?;
            if s.len() != f.len() || a.len() != f.len() {
                return Err(Error::format(labels_path(dir, id), "label length differs from frame count"));
            }
            st.push(s);
            ax.push(a);
        }
        (Some(st), Some(ax))
    } else {
        (None, None)
    };
    Ok(LoadedCorpus {
        index,
        frames,
        states,
        aux,
    })
}
