//! Pre-training loops, the second iteration, run comparison, checkpoints and
//! loss curves.

pub mod checkpoint;
pub mod compare;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::write_json;
use crate::codebook::{fit_kmeans, init_codebook, soft_posterior, Codebook, InitKind, KMeansConfig, PosteriorQ};
use crate::encoder::{encode_sequence, init_encoder, init_head, EncoderConfig};
use crate::error::{ensure, Error, Result};
use crate::features::FrameSequence;
use crate::numerics::{Adam, AdamConfig, Graph, ParameterStore, Tensor};
use crate::objectives::{
    future_vpc_loss, hubert_obj_loss, masked_vpc_loss, nce_loss, Batch, BatchMask, Estimator, LossBreakdown, LossCtx,
    NceConfig, CODEBOOK, NCE_PROJ,
};
use crate::partition::{FutureSpec, MaskSpec};

use checkpoint::{load_checkpoint, save_checkpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    HubertObj,
    MaskedVpc,
    FutureVpc,
    MaskedNce,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::HubertObj => "hubert_obj",
            Objective::MaskedVpc => "masked_vpc",
            Objective::FutureVpc => "future_vpc",
            Objective::MaskedNce => "masked_nce",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hubert_obj" => Ok(Objective::HubertObj),
            "masked_vpc" => Ok(Objective::MaskedVpc),
            "future_vpc" => Ok(Objective::FutureVpc),
            "masked_nce" => Ok(Objective::MaskedNce),
            _ => Err(Error::InvalidArgument(format!("unknown objective {s:?}"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondIterConfig {
    pub teacher: PathBuf,
    /// Teacher layer whose hidden states become the quantization targets.
    pub layer: usize,
    pub tau: f64,
    pub codebook_init: InitKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub estimator: Estimator,
    pub codebook_init: InitKind,
    pub codebook_size: usize,
    /// Soft-min temperature.
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_frames_per_utterance: usize,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub mask: MaskSpec,
    pub future: FutureSpec,
    pub nce: NceConfig,
    pub kmeans: KMeansConfig,
    /// Also checkpoint after every this many epochs.
    pub checkpoint_every: Option<usize>,
    /// Steps averaged into the final loss.
    pub smoothing_window: usize,
    pub second_iteration: Option<SecondIterConfig>,
}

impl TrainConfig {
    /// Desk-scale defaults for `objective` on `input_dim`-dimensional frames.
    pub fn desk(objective: Objective, input_dim: usize, seed: u64) -> TrainConfig {
        let mut encoder = EncoderConfig::desk(input_dim);
        encoder.causal = objective == Objective::FutureVpc;
        TrainConfig {
            objective,
            estimator: match objective {
                Objective::HubertObj => Estimator::SinglePoint,
                _ => Estimator::gumbel(1.0),
            },
            codebook_init: InitKind::Random,
            codebook_size: 100,
            tau: 1.0,
            lr: 1e-4,
            batch_size: 1,
            epochs: 30,
            max_frames_per_utterance: 1400,
            seed,
            encoder,
            mask: MaskSpec::default(),
            future: FutureSpec::default(),
            nce: NceConfig::default(),
            kmeans: KMeansConfig::default(),
            checkpoint_every: None,
            smoothing_window: 50,
            second_iteration: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.estimator.validate()?;
        self.mask.validate()?;
        self.nce.validate()?;
        ensure!(self.lr > 0.0, InvalidArgument, "lr must be positive");
        ensure!(self.tau > 0.0, InvalidArgument, "tau must be positive");
        ensure!(self.batch_size >= 1, InvalidArgument, "batch_size must be positive");
        ensure!(self.codebook_size >= 1, InvalidArgument, "codebook_size must be positive");
        ensure!(self.max_frames_per_utterance >= 1, InvalidArgument, "max_frames_per_utterance must be positive");
        ensure!(self.smoothing_window >= 1, InvalidArgument, "smoothing_window must be positive");
        ensure!(
            (self.objective == Objective::FutureVpc) == self.encoder.causal,
            InvalidArgument,
            "future_vpc needs a causal encoder and the other objectives a bidirectional one"
        );
        if let Some(s) = &self.second_iteration {
            ensure!(s.tau > 0.0, InvalidArgument, "second-iteration tau must be positive");
            ensure!(
                self.objective == Objective::MaskedVpc,
                InvalidArgument,
                "the second iteration trains a masked_vpc student"
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub step: u64,
    pub objective: String,
    pub estimator: String,
    pub neg_entropy: f64,
    pub cross_entropy: f64,
    pub reconstruction: f64,
    pub total: f64,
    pub codeword_usage_entropy: f64,
}

impl CurveRecord {
    fn new(step: u64, cfg: &TrainConfig, b: &LossBreakdown) -> Self {
        CurveRecord {
            step,
            objective: cfg.objective.name().into(),
            estimator: cfg.estimator.name().into(),
            neg_entropy: b.neg_entropy,
            cross_entropy: b.cross_entropy,
            reconstruction: b.reconstruction,
            total: b.total,
            codeword_usage_entropy: b.codeword_usage_entropy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub config: TrainConfig,
    pub corpus_digest: String,
    pub steps: u64,
    /// Total loss logged at step 0, before any update.
    pub step0_neg_elbo: Option<f64>,
    /// Mean total over the last `smoothing_window` logged steps.
    pub final_neg_elbo: Option<f64>,
    pub curve_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub wall_clock_secs: f64,
}

pub struct TrainedModel {
    pub record: RunRecord,
    pub store: ParameterStore,
    pub curve: Vec<CurveRecord>,
    /// The offline k-means codebook of a HuBERT run.
    pub frozen_codebook: Option<Codebook>,
}

/// Hex SHA-256 over ids, shapes and frame values.
pub fn corpus_digest(corpus: &[FrameSequence]) -> String {
    let mut h = Sha256::new();
    for s in corpus {
        h.update(s.source_id.as_bytes());
        h.update((s.len() as u64).to_le_bytes());
        h.update((s.dim() as u64).to_le_bytes());
        for v in s.frames.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Mean of the last `window` totals.
pub fn smoothed_final(curve: &[CurveRecord], window: usize) -> Option<f64> {
    if curve.is_empty() {
        return None;
    }
    let tail = &curve[curve.len().saturating_sub(window)..];
    Some(tail.iter().map(|c| c.total).sum::<f64>() / tail.len() as f64)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn stacked(frames: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = frames.iter().collect();
    Tensor::vstack(&refs)
}

fn prepared(corpus: &[FrameSequence], cfg: &TrainConfig) -> Result<Vec<(String, Tensor)>> {
    ensure!(!corpus.is_empty(), InvalidArgument, "empty corpus");
    let dim = corpus[0].dim();
    ensure!(
        corpus.iter().all(|s| s.dim() == dim),
        Shape,
        "corpus sequences differ in dimension"
    );
    ensure!(
        dim == cfg.encoder.input_dim,
        Shape,
        "corpus has {dim}-dimensional frames, encoder expects {}",
        cfg.encoder.input_dim
    );
    Ok(corpus
        .iter()
        .map(|s| {
            let s = s.truncated(cfg.max_frames_per_utterance);
            (s.source_id, s.frames)
        })
        .collect())
}

/// Initial parameters and, for the HuBERT objective, the frozen offline
/// k-means codebook.
fn initial_store(
    cfg: &TrainConfig,
    quant_targets: &Tensor,
) -> Result<(ParameterStore, Option<Codebook>)> {
    let mut init = stream(cfg.seed, 4);
    let mut store = ParameterStore::new();
    init_encoder(&mut store, &cfg.encoder, init.next_u64())?;
    let k = cfg.codebook_size;
    let head_seed = init.next_u64();
    let cb_seed = init.next_u64();
    let d = quant_targets.cols();
    let mut frozen = None;
    match cfg.objective {
        Objective::HubertObj => {
            let start = init_codebook(quant_targets, k, InitKind::KMeansPlusPlus, cb_seed)?;
            let fit = fit_kmeans(quant_targets, &start, &cfg.kmeans)?;
            let cb = fit.codebook.freeze();
            store.insert(CODEBOOK, cb.centroids.clone(), false)?;
            frozen = Some(cb);
        }
        _ => {
            let cb = init_codebook(quant_targets, k, cfg.codebook_init, cb_seed)?;
            store.insert(CODEBOOK, cb.centroids, true)?;
        }
    }
    if cfg.objective == Objective::MaskedNce {
        let n = rand_distr::Normal::new(0.0, (1.0 / cfg.encoder.model_dim as f64).sqrt()).expect("positive std");
        let h = cfg.encoder.model_dim;
        let data = (0..h * d).map(|_| rand_distr::Distribution::sample(&n, &mut init)).collect();
        store.insert(NCE_PROJ, Tensor::matrix(h, d, data), true)?;
    } else {
        init_head(&mut store, k, cfg.encoder.model_dim, head_seed)?;
    }
    Ok((store, frozen))
}

fn config_json(cfg: &TrainConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn curve_writer(out: Option<&Path>) -> Result<Option<BufWriter<File>>> {
    match out {
        None => Ok(None),
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("curve.jsonl");
            Ok(Some(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?)))
        }
    }
}

struct LoopInput<'a> {
    seqs: &'a [(String, Tensor)],
    targets: Option<&'a [Tensor]>,
    cfg: &'a TrainConfig,
    digest: String,
    label: String,
    out: Option<&'a Path>,
    resume: Option<(ResumeState, Adam, u64)>,
}

/// Loop state saved with every checkpoint: the next epoch, the three RNG
/// streams and the current utterance order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub epoch: usize,
    pub shuffle: ChaCha8Rng,
    pub mask: ChaCha8Rng,
    pub loss: ChaCha8Rng,
    pub order: Vec<usize>,
}

impl ResumeState {
    fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("resume state serializes")
    }
}

fn train_loop(
    input: LoopInput<'_>,
    mut store: ParameterStore,
    frozen: Option<Codebook>,
) -> Result<TrainedModel> {
    let started = Instant::now();
    let cfg = input.cfg;
    let (first_epoch, mut adam, mut shuffle, mut mask_rng, mut loss_rng, mut order, mut step) = match input.resume {
        Some((r, adam, step)) => {
            ensure!(
                r.order.len() == input.seqs.len(),
                Mismatch,
                "checkpoint was trained on {} utterances, corpus has {}",
                r.order.len(),
                input.seqs.len()
            );
            (r.epoch, adam, r.shuffle, r.mask, r.loss, r.order, step)
        }
        None => (
            0,
            Adam::new(AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            })?,
            stream(cfg.seed, 1),
            stream(cfg.seed, 2),
            stream(cfg.seed, 3),
            (0..input.seqs.len()).collect(),
            0,
        ),
    };
    let mut writer = curve_writer(input.out)?;
    let mut curve = Vec::new();
    let snapshot = |epoch: usize, shuffle: &ChaCha8Rng, mask: &ChaCha8Rng, loss: &ChaCha8Rng, order: &[usize]| {
        ResumeState {
            epoch,
            shuffle: shuffle.clone(),
            mask: mask.clone(),
            loss: loss.clone(),
            order: order.to_vec(),
        }
        .to_json()
    };

    for epoch in first_epoch..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let parts: Vec<(&str, &Tensor)> = chunk
                .iter()
                .map(|&i| (input.seqs[i].0.as_str(), &input.seqs[i].1))
                .collect();
            let mut batch = Batch::from_sequences(&parts)?;
            if let Some(t) = input.targets {
                let rows: Vec<Tensor> = chunk.iter().map(|&i| t[i].clone()).collect();
                batch = batch.with_targets(stacked(&rows)?)?;
            }
            let mut g = Graph::new();
            let out = {
                let mut ctx = LossCtx {
                    store: &store,
                    encoder: &cfg.encoder,
                    rng: &mut loss_rng,
                    train: true,
                };
                match cfg.objective {
                    Objective::FutureVpc => {
                        future_vpc_loss(&mut g, &mut ctx, &batch, &cfg.future, cfg.tau, &cfg.estimator)?
                    }
                    obj => {
                        let mask = BatchMask::sample(&batch, &cfg.mask, &mut mask_rng)?;
                        match obj {
                            Objective::HubertObj => hubert_obj_loss(
                                &mut g,
                                &mut ctx,
                                &batch,
                                &mask,
                                frozen.as_ref().expect("hubert runs carry a frozen codebook"),
                            )?,
                            Objective::MaskedNce => nce_loss(&mut g, &mut ctx, &batch, &mask, &cfg.nce, step)?,
                            _ => {
                                let tau = cfg.second_iteration.as_ref().map_or(cfg.tau, |s| s.tau);
                                masked_vpc_loss(&mut g, &mut ctx, &batch, &mask, tau, &cfg.estimator)?
                            }
                        }
                    }
                }
            };
            let rec = CurveRecord::new(step, cfg, &out.breakdown);
            if !out.breakdown.total.is_finite() {
                if let Some(dir) = input.out {
                    let diag = serde_json::json!({
                        "step": step,
                        "epoch": epoch,
                        "breakdown": out.breakdown,
                        "batch": batch.ids,
                    });
                    write_json(&dir.join("divergence.json"), &diag)?;
                }
                return Err(Error::NonFinite(format!(
                    "loss diverged at step {step} (epoch {epoch}): {:?}",
                    out.breakdown
                )));
            }
            let grads = g.backward(out.loss)?;
            adam.update(&mut store, &grads)?;
            if let Some(w) = writer.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n").map_err(|e| Error::io(Path::new("curve.jsonl"), e))?;
            }
            curve.push(rec);
            step += 1;
        }
        if let (Some(dir), Some(every)) = (input.out, cfg.checkpoint_every) {
            if every > 0 && (epoch + 1) % every == 0 {
                let p = dir.join("checkpoints").join(format!("epoch_{:04}", epoch + 1));
                let state = snapshot(epoch + 1, &shuffle, &mask_rng, &loss_rng, &order);
                save_checkpoint(&p, &store, Some(&adam), cfg.seed, step, config_json(cfg), Some(state))?;
            }
        }
    }
    if let Some(mut w) = writer {
        w.flush().map_err(|e| Error::io(Path::new("curve.jsonl"), e))?;
    }
    let checkpoint_path = match input.out {
        Some(dir) => {
            let p = dir.join("checkpoint");
            let state = snapshot(cfg.epochs.max(first_epoch), &shuffle, &mask_rng, &loss_rng, &order);
            save_checkpoint(&p, &store, Some(&adam), cfg.seed, step, config_json(cfg), Some(state))?;
            Some(p)
        }
        None => None,
    };
    let record = RunRecord {
        label: input.label,
        config: cfg.clone(),
        corpus_digest: input.digest,
        steps: step,
        step0_neg_elbo: curve.first().map(|c| c.total),
        final_neg_elbo: smoothed_final(&curve, cfg.smoothing_window),
        curve_path: input.out.map(|d| d.join("curve.jsonl")),
        checkpoint_path,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = input.out {
        write_json(&dir.join("run.json"), &record)?;
    }
    Ok(TrainedModel {
        record,
        store,
        curve,
        frozen_codebook: frozen,
    })
}

/// Short human label: objective, estimator, codebook init and seed.
pub fn run_label(cfg: &TrainConfig) -> String {
    let init = match cfg.objective {
        Objective::HubertObj => "kmeans".to_string(),
        _ => cfg.codebook_init.to_string(),
    };
    format!("{}/{}/{}/seed{}", cfg.objective, cfg.estimator.name(), init, cfg.seed)
}

/// Pre-trains a model on `corpus`. Writes the curve, run record and
/// checkpoints under `out` when given.
pub fn pretrain(corpus: &[FrameSequence], cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainedModel> {
    cfg.validate()?;
    if cfg.second_iteration.is_some() {
        return Err(Error::InvalidArgument("use second_iteration for a second-iteration config".into()));
    }
    let seqs = prepared(corpus, cfg)?;
    let all = stacked(&seqs.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>())?;
    let (store, frozen) = initial_store(cfg, &all)?;
    train_loop(
        LoopInput {
            seqs: &seqs,
            targets: None,
            cfg,
            digest: corpus_digest(corpus),
            label: run_label(cfg),
            out,
            resume: None,
        },
        store,
        frozen,
    )
}

/// Parameters and training configuration stored in a checkpoint.
pub fn load_model(dir: &Path) -> Result<(ParameterStore, TrainConfig)> {
    let ck = load_checkpoint(dir)?;
    let cfg: TrainConfig = serde_json::from_value(ck.manifest.config.clone())
        .map_err(|e| Error::format(dir.join(checkpoint::MANIFEST), e.to_string()))?;
    Ok((ck.store, cfg))
}

/// Teacher hidden states of `layer` for one sequence, without masking or
/// dropout.
pub fn teacher_features(store: &ParameterStore, enc: &EncoderConfig, layer: usize, frames: &Tensor) -> Result<Tensor> {
    ensure!(
        layer <= enc.layers,
        InvalidArgument,
        "layer {layer} out of range for a {}-layer encoder",
        enc.layers
    );
    Ok(encode_sequence(store, enc, frames, &[])?.swap_remove(layer))
}

/// Soft targets over a codebook in teacher-feature space.
pub fn soft_targets(features: &Tensor, codebook: &Codebook, tau: f64) -> Result<PosteriorQ> {
    soft_posterior(features, codebook, tau)
}

/// Trains a fresh Masked-VPC student whose quantization targets are the
/// frozen teacher's layer-`ℓ` hidden states, soft-assigned at `τ₂`.
pub fn second_iteration(
    corpus: &[FrameSequence],
    teacher_store: &ParameterStore,
    teacher_cfg: &TrainConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let sic = cfg
        .second_iteration
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("config has no second_iteration section".into()))?;
    ensure!(
        teacher_cfg.encoder.input_dim == cfg.encoder.input_dim,
        Shape,
        "teacher and student disagree on input dimension"
    );
    let seqs = prepared(corpus, cfg)?;
    let targets = teacher_targets(&seqs, teacher_store, teacher_cfg, sic.layer)?;
    let all = stacked(&targets)?;
    let mut store = ParameterStore::new();
    let mut init = stream(cfg.seed, 4);
    init_encoder(&mut store, &cfg.encoder, init.next_u64())?;
    init_head(&mut store, cfg.codebook_size, cfg.encoder.model_dim, init.next_u64())?;
    let start = init_codebook(&all, cfg.codebook_size, sic.codebook_init, init.next_u64())?;
    let cb = match sic.codebook_init {
        InitKind::KMeansPlusPlus => fit_kmeans(&all, &start, &cfg.kmeans)?.codebook,
        InitKind::Random => start,
    };
    store.insert(CODEBOOK, cb.centroids, true)?;
    let mut label = run_label(cfg);
    label.push_str("/iter2");
    train_loop(
        LoopInput {
            seqs: &seqs,
            targets: Some(&targets),
            cfg,
            digest: corpus_digest(corpus),
            label,
            out,
            resume: None,
        },
        store,
        None,
    )
}

fn teacher_targets(
    seqs: &[(String, Tensor)],
    teacher_store: &ParameterStore,
    teacher_cfg: &TrainConfig,
    layer: usize,
) -> Result<Vec<Tensor>> {
    seqs.iter()
        .map(|(_, x)| teacher_features(teacher_store, &teacher_cfg.encoder, layer, x))
        .collect()
}

/// Continues a run from one of its checkpoints up to the configured number
/// of epochs. The curve written under `out` starts at the checkpoint step.
pub fn resume(corpus: &[FrameSequence], checkpoint_dir: &Path, out: Option<&Path>) -> Result<TrainedModel> {
    let ck = load_checkpoint(checkpoint_dir)?;
    let mpath = checkpoint_dir.join(checkpoint::MANIFEST);
    let cfg: TrainConfig =
        serde_json::from_value(ck.manifest.config.clone()).map_err(|e| Error::format(&mpath, e.to_string()))?;
    cfg.validate()?;
    let state: ResumeState = ck
        .manifest
        .resume
        .clone()
        .ok_or_else(|| Error::format(&mpath, "checkpoint carries no resume state"))
        .and_then(|v| serde_json::from_value(v).map_err(|e| Error::format(&mpath, e.to_string())))?;
    let adam = ck
        .adam
        .ok_or_else(|| Error::format(&mpath, "checkpoint carries no optimizer state"))?;
    let seqs = prepared(corpus, &cfg)?;
    let mut label = run_label(&cfg);
    let (targets, frozen) = match (&cfg.second_iteration, cfg.objective) {
        (Some(sic), _) => {
            let (ts, tc) = load_model(&sic.teacher)?;
            label.push_str("/iter2");
            (Some(teacher_targets(&seqs, &ts, &tc, sic.layer)?), None)
        }
        (None, Objective::HubertObj) => {
            let cb = Codebook::new(ck.store.get(CODEBOOK)?.clone(), InitKind::KMeansPlusPlus)?.freeze();
            (None, Some(cb))
        }
        _ => (None, None),
    };
    train_loop(
        LoopInput {
            seqs: &seqs,
            targets: targets.as_deref(),
            cfg: &cfg,
            digest: corpus_digest(corpus),
            label,
            out,
            resume: Some((state, adam, ck.manifest.step)),
        },
        ck.store,
        frozen,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objective_names_round_trip() {
        for o in [Objective::HubertObj, Objective::MaskedVpc, Objective::FutureVpc, Objective::MaskedNce] {
            assert_eq!(o.name().parse::<Objective>().unwrap(), o);
        }
        assert!("vq".parse::<Objective>().is_err());
    }

    #[test]
    fn smoothing_uses_the_tail() {
        let cfg = TrainConfig::desk(Objective::MaskedVpc, 2, 0);
        let curve: Vec<CurveRecord> = (0..10)
            .map(|i| CurveRecord::new(i, &cfg, &LossBreakdown { total: i as f64, ..Default::default() }))
            .collect();
        assert_eq!(smoothed_final(&curve, 4), Some(7.5));
        assert_eq!(smoothed_final(&curve, 100), Some(4.5));
        assert_eq!(smoothed_final(&[], 4), None);
    }

    #[test]
    fn causal_flag_must_match_objective() {
        let mut cfg = TrainConfig::desk(Objective::MaskedVpc, 2, 0);
        assert!(cfg.validate().is_ok());
        cfg.encoder.causal = true;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::desk(Objective::FutureVpc, 2, 0).validate().is_ok());
    }
}
