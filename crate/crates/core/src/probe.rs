//! Linear probes on frozen representations: frame classification against
//! oracle state labels and frame regression against the auxiliary track.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{write_frames, write_json};
use crate::encoder::{encode_sequence, EncoderConfig};
use crate::error::{ensure, Error, Result};
use crate::features::FrameSequence;
use crate::numerics::{argmax, Adam, AdamConfig, Graph, ParameterStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    FrameClassify,
    FrameRegress,
}

impl std::str::FromStr for ProbeTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame_classify" | "classify" => Ok(ProbeTask::FrameClassify),
            "frame_regress" | "regress" => Ok(ProbeTask::FrameRegress),
            _ => Err(Error::InvalidArgument(format!("unknown probe task {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    Index(usize),
    All,
}

impl std::str::FromStr for LayerSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(LayerSelection::All);
        }
        s.parse()
            .map(LayerSelection::Index)
            .map_err(|_| Error::InvalidArgument(format!("layer must be an index or \"all\", got {s:?}")))
    }
}

impl LayerSelection {
    pub fn layers(&self, enc: &EncoderConfig) -> Result<Vec<usize>> {
        match *self {
            LayerSelection::All => Ok((0..=enc.layers).collect()),
            LayerSelection::Index(l) => {
                check_layer(l, enc)?;
                Ok(vec![l])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub task: ProbeTask,
    pub layer: LayerSelection,
    pub lr: f64,
    pub epochs: usize,
    pub batch_frames: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(task: ProbeTask, seed: u64) -> ProbeConfig {
        ProbeConfig {
            task,
            layer: LayerSelection::All,
            lr: 1e-3,
            epochs: 10,
            batch_frames: 64,
            holdout_fraction: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), InvalidArgument, "probe lr must be positive");
        ensure!(self.batch_frames > 0, InvalidArgument, "batch_frames must be positive");
        ensure!(
            self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0,
            InvalidArgument,
            "holdout_fraction must be in (0, 1)"
        );
        Ok(())
    }
}

/// Per-frame targets, one vector per sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeTargets {
    Classes { labels: Vec<Vec<usize>>, n_classes: usize },
    Values(Vec<Vec<f64>>),
}

impl ProbeTargets {
    pub fn classes(labels: Vec<Vec<usize>>) -> ProbeTargets {
        let n_classes = labels.iter().flatten().max().map_or(1, |m| m + 1);
        ProbeTargets::Classes { labels, n_classes }
    }

    pub fn task(&self) -> ProbeTask {
        match self {
            ProbeTargets::Classes { .. } => ProbeTask::FrameClassify,
            ProbeTargets::Values(_) => ProbeTask::FrameRegress,
        }
    }

    fn lens(&self) -> Vec<usize> {
        match self {
            ProbeTargets::Classes { labels, .. } => labels.iter().map(Vec::len).collect(),
            ProbeTargets::Values(v) => v.iter().map(Vec::len).collect(),
        }
    }
}

/// Majority label within each group of `factor` frames (ties to the
/// smallest label); a trailing partial group is dropped, as in stacking.
pub fn majority_downsample(labels: &[usize], factor: usize) -> Vec<usize> {
    labels
        .chunks_exact(factor.max(1))
        .map(|c| {
            let mut best = (0, usize::MAX);
            for &l in c {
                let n = c.iter().filter(|&&x| x == l).count();
                if n > best.0 || (n == best.0 && l < best.1) {
                    best = (n, l);
                }
            }
            best.1
        })
        .collect()
}

pub fn mean_downsample(values: &[f64], factor: usize) -> Vec<f64> {
    values
        .chunks_exact(factor.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

fn check_layer(layer: usize, enc: &EncoderConfig) -> Result<()> {
    ensure!(
        layer <= enc.layers,
        InvalidArgument,
        "layer {layer} out of range for a {}-layer encoder",
        enc.layers
    );
    Ok(())
}

/// Hidden states of every requested layer, one `T×h` matrix per sequence,
/// without masking or dropout. Returned in the order of `layers`.
pub fn extract_layers(
    store: &ParameterStore,
    enc: &EncoderConfig,
    corpus: &[FrameSequence],
    layers: &[usize],
) -> Result<Vec<Vec<Tensor>>> {
    for &l in layers {
        check_layer(l, enc)?;
    }
    let mut out = vec![Vec::with_capacity(corpus.len()); layers.len()];
    for seq in corpus {
        let hidden = encode_sequence(store, enc, &seq.frames, &[])?;
        for (slot, &l) in out.iter_mut().zip(layers) {
            slot.push(hidden[l].clone());
        }
    }
    Ok(out)
}

pub fn extract_features(
    store: &ParameterStore,
    enc: &EncoderConfig,
    corpus: &[FrameSequence],
    layer: usize,
) -> Result<Vec<FrameSequence>> {
    let mut layers = extract_layers(store, enc, corpus, &[layer])?;
    layers
        .pop()
        .unwrap_or_default()
        .into_iter()
        .zip(corpus)
        .map(|(t, seq)| FrameSequence::new(t, seq.frame_rate_ms, seq.source_id.clone()))
        .collect()
}

/// Writes extracted features to `dir` in the feature-cache format.
pub fn write_features(dir: &Path, feats: &[FrameSequence]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in feats {
        write_frames(dir, f)?;
    }
    Ok(())
}

/// Train and held-out sequence indices, split by sequence.
pub fn split_sequences(n: usize, holdout_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    ensure!(n >= 2, InvalidArgument, "a probe needs at least two sequences, got {n}");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 1);
    let mut test = idx[..held].to_vec();
    let mut train = idx[held..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[&[f64]]) -> Standardizer {
        let d = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(*r) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(*r).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let inv_std = var.iter().map(|v| 1.0 / v.sqrt().max(1e-8)).collect();
        Standardizer { mean, inv_std }
    }

    fn apply(&self, rows: &[&[f64]]) -> Tensor {
        let d = self.mean.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            data.extend(r.iter().zip(&self.mean).zip(&self.inv_std).map(|((x, m), s)| (x - m) * s));
        }
        Tensor::matrix(rows.len(), d, data)
    }
}

fn gather_rows<'a>(features: &'a [Tensor], seqs: &[usize]) -> Vec<&'a [f64]> {
    seqs.iter()
        .flat_map(|&s| (0..features[s].rows()).map(move |i| features[s].row(i)))
        .collect()
}

/// Trains a linear probe on the training split of `features` and returns
/// its held-out error: frame error rate for classes, RMSE for values.
pub fn probe_error(features: &[Tensor], targets: &ProbeTargets, cfg: &ProbeConfig) -> Result<f64> {
    cfg.validate()?;
    ensure!(
        targets.task() == cfg.task,
        InvalidArgument,
        "probe task {:?} does not match the targets",
        cfg.task
    );
    let lens = targets.lens();
    ensure!(
        features.len() == lens.len(),
        Mismatch,
        "{} feature sequences but {} label sequences",
        features.len(),
        lens.len()
    );
    for (i, (f, &n)) in features.iter().zip(&lens).enumerate() {
        ensure!(
            f.rows() == n,
            Mismatch,
            "sequence {i}: {} feature frames but {n} labels",
            f.rows()
        );
    }
    let (train, test) = split_sequences(features.len(), cfg.holdout_fraction, cfg.seed)?;
    let train_rows = gather_rows(features, &train);
    let test_rows = gather_rows(features, &test);
    ensure!(!train_rows.is_empty() && !test_rows.is_empty(), TooShort, "probe split has no frames");
    let norm = Standardizer::fit(&train_rows);
    let x_train = norm.apply(&train_rows);
    let x_test = norm.apply(&test_rows);
    let dim = x_train.cols();

    let (out_dim, y_train_cls, y_test_cls, y_train_val, y_test_val) = match targets {
        ProbeTargets::Classes { labels, n_classes } => {
            let pick = |s: &[usize]| s.iter().flat_map(|&i| labels[i].iter().copied()).collect::<Vec<_>>();
            (*n_classes, pick(&train), pick(&test), vec![], vec![])
        }
        ProbeTargets::Values(v) => {
            let pick = |s: &[usize]| s.iter().flat_map(|&i| v[i].iter().copied()).collect::<Vec<_>>();
            (1, vec![], vec![], pick(&train), pick(&test))
        }
    };
    let (y_mean, y_scale) = if y_train_val.is_empty() {
        (0.0, 1.0)
    } else {
        let n = y_train_val.len() as f64;
        let m = y_train_val.iter().sum::<f64>() / n;
        let sd = (y_train_val.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / n).sqrt();
        (m, sd.max(1e-8))
    };

    let mut store = ParameterStore::new();
    store.insert("probe.w", Tensor::zeros(&[dim, out_dim]), true)?;
    store.insert("probe.b", Tensor::zeros(&[1, out_dim]), true)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..x_train.rows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_frames) {
            let mut g = Graph::new();
            let x = g.constant(x_train.select_rows(chunk));
            let w = g.param(&store, "probe.w")?;
            let b = g.param(&store, "probe.b")?;
            let xw = g.matmul(x, w)?;
            let out = g.add_row(xw, b)?;
            let per_frame = match cfg.task {
                ProbeTask::FrameClassify => {
                    let lp = g.log_softmax(out);
                    let idx: Vec<usize> = chunk.iter().map(|&i| y_train_cls[i]).collect();
                    let picked = g.gather_cols(lp, &idx)?;
                    g.scale(picked, -1.0)
                }
                ProbeTask::FrameRegress => {
                    let y = g.constant(Tensor::matrix(
                        chunk.len(),
                        1,
                        chunk.iter().map(|&i| (y_train_val[i] - y_mean) / y_scale).collect(),
                    ));
                    let r = g.sub(out, y)?;
                    let sq = g.mul(r, r)?;
                    g.scale(sq, 0.5)
                }
            };
            let total = g.sum_all(per_frame);
            let loss = g.scale(total, 1.0 / chunk.len() as f64);
            let grads = g.backward(loss)?;
            adam.update(&mut store, &grads)?;
        }
    }

    let mut g = Graph::new();
    let x = g.constant(x_test);
    let w = g.param(&store, "probe.w")?;
    let b = g.param(&store, "probe.b")?;
    let xw = g.matmul(x, w)?;
    let out = g.add_row(xw, b)?;
    let pred = g.value(out);
    let err = match cfg.task {
        ProbeTask::FrameClassify => {
            let wrong = (0..pred.rows())
                .filter(|&i| argmax(pred.row(i)) != y_test_cls[i])
                .count();
            wrong as f64 / pred.rows() as f64
        }
        ProbeTask::FrameRegress => {
            let se: f64 = (0..pred.rows())
                .map(|i| (pred.row(i)[0] * y_scale + y_mean - y_test_val[i]).powi(2))
                .sum();
            (se / pred.rows() as f64).sqrt()
        }
    };
    ensure!(err.is_finite(), NonFinite, "probe error is not finite");
    Ok(err)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerError {
    pub layer: usize,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: ProbeTask,
    pub per_layer: Vec<LayerError>,
    pub best_layer: usize,
    pub best_error: f64,
    /// Same probe on the raw input features.
    pub baseline_error: Option<f64>,
    pub config: ProbeConfig,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,error\n");
        if let Some(b) = self.baseline_error {
            s.push_str(&format!("raw,{b}\n"));
        }
        for l in &self.per_layer {
            s.push_str(&format!("{},{}\n", l.layer, l.error));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("probe_report.json"), self)?;
        let csv = dir.join("probe_report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// Probes each layer's features in turn, plus the raw features when given.
pub fn run_probe(
    layers: &[(usize, Vec<Tensor>)],
    raw: Option<&[Tensor]>,
    targets: &ProbeTargets,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    ensure!(!layers.is_empty(), InvalidArgument, "no layers to probe");
    let mut per_layer = Vec::with_capacity(layers.len());
    for (layer, feats) in layers {
        per_layer.push(LayerError {
            layer: *layer,
            error: probe_error(feats, targets, cfg)?,
        });
    }
    let best = per_layer
        .iter()
        .min_by(|a, b| a.error.total_cmp(&b.error))
        .cloned()
        .unwrap_or(LayerError { layer: 0, error: f64::NAN });
    let baseline_error = raw.map(|r| probe_error(r, targets, cfg)).transpose()?;
    Ok(ProbeReport {
        task: cfg.task,
        per_layer,
        best_layer: best.layer,
        best_error: best.error,
        baseline_error,
        config: cfg.clone(),
    })
}

/// Extracts the configured layers from a frozen model and probes them
/// against `targets`, with the raw-feature baseline.
pub fn probe_model(
    store: &ParameterStore,
    enc: &EncoderConfig,
    corpus: &[FrameSequence],
    targets: &ProbeTargets,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let layers = cfg.layer.layers(enc)?;
    let feats = extract_layers(store, enc, corpus, &layers)?;
    let raw: Vec<Tensor> = corpus.iter().map(|s| s.frames.clone()).collect();
    let paired: Vec<(usize, Vec<Tensor>)> = layers.into_iter().zip(feats).collect();
    run_probe(&paired, Some(&raw), targets, cfg)
}
