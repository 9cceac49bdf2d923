//! Codebooks: k-means++ seeding, Lloyd iterations, hard (point-mass) and
//! soft-min posteriors, and the Gaussian reconstruction term.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{argmin, log_softmax_into, sq_dist_matrix, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    #[serde(rename = "kmeans++")]
    KMeansPlusPlus,
    /// `K` distinct data points chosen uniformly.
    Random,
}

impl std::str::FromStr for InitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans++" | "kmeanspp" => Ok(InitKind::KMeansPlusPlus),
            "random" => Ok(InitKind::Random),
            _ => Err(Error::InvalidArgument(format!("unknown codebook init {s:?}"))),
        }
    }
}

impl std::fmt::Display for InitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitKind::KMeansPlusPlus => "kmeans++",
            InitKind::Random => "random",
        })
    }
}

/// `K x d` centroids, one per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub centroids: Tensor,
    pub init_kind: InitKind,
    pub frozen: bool,
}

impl Codebook {
    pub fn new(centroids: Tensor, init_kind: InitKind) -> Result<Self> {
        ensure!(centroids.shape().len() == 2, Shape, "centroids must be a matrix");
        ensure!(centroids.is_finite(), NonFinite, "centroids contain NaN or Inf");
        Ok(Codebook {
            centroids,
            init_kind,
            frozen: false,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    fn check_dim(&self, frames: &Tensor) -> Result<()> {
        if frames.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "frames have {} dims, codebook has {}",
                frames.cols(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `[T, K]` squared Euclidean distances.
    pub fn sq_distances(&self, frames: &Tensor) -> Result<Tensor> {
        self.check_dim(frames)?;
        let (n, k, d) = (frames.rows(), self.k(), self.dim());
        Ok(Tensor::matrix(
            n,
            k,
            sq_dist_matrix(frames.data(), self.centroids.data(), n, k, d),
        ))
    }
}

/// `(d/2) log 2π`, the normalizer of a unit-variance Gaussian in `d` dims.
pub fn gaussian_log_norm(d: usize) -> f64 {
    0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
}

fn check_data(data: &Tensor, k: usize) -> Result<()> {
    ensure!(data.shape().len() == 2, Shape, "data must be a matrix");
    ensure!(k >= 1, InvalidArgument, "K must be positive");
    ensure!(
        data.rows() >= k,
        InvalidArgument,
        "{} points cannot seed {k} centroids",
        data.rows()
    );
    Ok(())
}

/// k-means++ seeding: the first center uniformly, each further one with
/// probability proportional to the squared distance to its nearest center.
pub fn kmeans_pp_init(data: &Tensor, k: usize, seed: u64) -> Result<Codebook> {
    check_data(data, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kmeans_pp_init_with(data, k, &mut rng)
}

pub fn kmeans_pp_init_with(data: &Tensor, k: usize, rng: &mut impl Rng) -> Result<Codebook> {
    check_data(data, k)?;
    let (n, d) = (data.rows(), data.cols());
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq(data.row(i), data.row(chosen[0]))).collect();
    while chosen.len() < k {
        if nearest.iter().all(|&w| w == 0.0) {
            return Err(Error::Degenerate(format!(
                "data has only {} distinct points, {k} centroids requested",
                chosen.len()
            )));
        }
        let dist = WeightedIndex::new(&nearest).map_err(|e| Error::Degenerate(e.to_string()))?;
        let next = dist.sample(rng);
        chosen.push(next);
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(sq(data.row(i), data.row(next)));
        }
    }
    let mut c = Vec::with_capacity(k * d);
    for &i in &chosen {
        c.extend_from_slice(data.row(i));
    }
    Codebook::new(Tensor::matrix(k, d, c), InitKind::KMeansPlusPlus)
}

/// `K` distinct rows drawn uniformly.
pub fn random_init(data: &Tensor, k: usize, seed: u64) -> Result<Codebook> {
    check_data(data, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = sample(&mut rng, data.rows(), k).into_vec();
    Codebook::new(data.select_rows(&idx), InitKind::Random)
}

pub fn init_codebook(data: &Tensor, k: usize, kind: InitKind, seed: u64) -> Result<Codebook> {
    match kind {
        InitKind::KMeansPlusPlus => kmeans_pp_init(data, k, seed),
        InitKind::Random => random_init(data, k, seed),
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_iters: 100,
            rel_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Mean squared distance to the nearest centroid after each assignment
    /// step; the last entry is the final distortion.
    pub distortions: Vec<f64>,
    pub iterations: usize,
}

impl KMeansFit {
    pub fn distortion(&self) -> f64 {
        *self.distortions.last().expect("at least one assignment step")
    }
}

/// Lloyd iterations from `init`.
///
/// An emptied cluster takes over the point that is currently worst served.
pub fn fit_kmeans(data: &Tensor, init: &Codebook, cfg: &KMeansConfig) -> Result<KMeansFit> {
    ensure!(data.shape().len() == 2 && data.numel() > 0, InvalidArgument, "empty input");
    if init.frozen {
        return Err(Error::Contract("cannot refit a frozen codebook".into()));
    }
    init.check_dim(data)?;
    let (n, d, k) = (data.rows(), data.cols(), init.k());
    let mut centroids = init.centroids.clone();
    let mut distortions = Vec::new();
    let mut ids = vec![0usize; n];
    let mut best = vec![0.0; n];
    let mut iterations = 0;
    loop {
        let dist = sq_dist_matrix(data.data(), centroids.data(), n, k, d);
        for i in 0..n {
            let row = &dist[i * k..(i + 1) * k];
            ids[i] = argmin(row);
            best[i] = row[ids[i]];
        }
        let cur = best.iter().sum::<f64>() / n as f64;
        let converged = match distortions.last() {
            Some(&prev) if prev > 0.0 => (prev - cur) / prev < cfg.rel_tol,
            Some(_) => true,
            None => false,
        };
        distortions.push(cur);
        if converged || iterations >= cfg.max_iters || cur == 0.0 {
            break;
        }
        iterations += 1;

        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[ids[i]] += 1;
            for (s, x) in sums[ids[i] * d..(ids[i] + 1) * d].iter_mut().zip(data.row(i)) {
                *s += x;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let row = centroids.row_mut(c);
                for (v, s) in row.iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *v = s / counts[c] as f64;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| best[a].total_cmp(&best[b]).then(b.cmp(&a)))
                    .ok_or_else(|| Error::Degenerate("no point left to reseed an empty cluster".into()))?;
                taken[far] = true;
                best[far] = 0.0;
                centroids.row_mut(c).copy_from_slice(data.row(far));
            }
        }
    }
    Ok(KMeansFit {
        codebook: Codebook::new(centroids, init.init_kind)?,
        distortions,
        iterations,
    })
}

/// Point-mass posterior: one code id per frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub ids: Vec<usize>,
}

/// Nearest centroid per frame, ties to the lowest index.
pub fn hard_assign(frames: &Tensor, cb: &Codebook) -> Result<Assignment> {
    let dist = cb.sq_distances(frames)?;
    Ok(Assignment {
        ids: (0..dist.rows()).map(|i| argmin(dist.row(i))).collect(),
    })
}

/// Soft-min posterior rows over `K` codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorQ {
    pub probs: Tensor,
    pub temperature: f64,
}

impl PosteriorQ {
    pub fn entropy(&self, row: usize) -> f64 {
        -self
            .probs
            .row(row)
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// `q[i, k] ∝ exp(-||x_i - v_k||² / τ)`, evaluated as a log-softmax.
pub fn soft_posterior(frames: &Tensor, cb: &Codebook, tau: f64) -> Result<PosteriorQ> {
    ensure!(tau > 0.0, InvalidArgument, "temperature must be positive, got {tau}");
    let dist = cb.sq_distances(frames)?;
    let k = cb.k();
    let mut probs = vec![0.0; dist.numel()];
    let mut logits = vec![0.0; k];
    for (out, row) in probs.chunks_exact_mut(k).zip(dist.data().chunks_exact(k)) {
        for (l, dv) in logits.iter_mut().zip(row) {
            *l = -dv / tau;
        }
        log_softmax_into(&logits, out);
        out.iter_mut().for_each(|v| *v = v.exp());
    }
    Ok(PosteriorQ {
        probs: Tensor::matrix(dist.rows(), k, probs),
        temperature: tau,
    })
}

/// Per-frame `E_q[-log N(x_i; v_z, I)]`.
pub fn distortion_terms(frames: &Tensor, cb: &Codebook, q: &PosteriorQ) -> Result<Vec<f64>> {
    let dist = cb.sq_distances(frames)?;
    if q.probs.shape() != dist.shape() {
        return Err(Error::Shape(format!(
            "posterior {:?} vs distances {:?}",
            q.probs.shape(),
            dist.shape()
        )));
    }
    let c = gaussian_log_norm(cb.dim());
    Ok((0..dist.rows())
        .map(|i| {
            q.probs
                .row(i)
                .iter()
                .zip(dist.row(i))
                .map(|(p, dv)| p * (0.5 * dv + c))
                .sum()
        })
        .collect())
}
