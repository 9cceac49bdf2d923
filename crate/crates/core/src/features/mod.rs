//! Audio ingestion and log-Mel frame sequences.

mod mel;
mod wav;

pub use mel::{
    hann_window, hz_to_mel, log_mel, mel_center_frequencies, mel_filterbank, mel_to_hz, num_frames,
    MelConfig,
};
pub use wav::{load_wav, write_wav_f32, write_wav_pcm16, Waveform};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;

/// `T x d` acoustic frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSequence {
    pub frames: Tensor,
    pub frame_rate_ms: f64,
    pub source_id: String,
}

impl FrameSequence {
    pub fn new(frames: Tensor, frame_rate_ms: f64, source_id: impl Into<String>) -> Result<Self> {
        ensure!(frames.shape().len() == 2, Shape, "frames must be a matrix");
        ensure!(frames.is_finite(), NonFinite, "frames contain NaN or Inf");
        Ok(FrameSequence {
            frames,
            frame_rate_ms,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    /// Keeps at most `max` leading frames.
    pub fn truncated(&self, max: usize) -> FrameSequence {
        if self.len() <= max {
            return self.clone();
        }
        let d = self.dim();
        FrameSequence {
            frames: Tensor::matrix(max, d, self.frames.data()[..max * d].to_vec()),
            frame_rate_ms: self.frame_rate_ms,
            source_id: self.source_id.clone(),
        }
    }
}

/// Concatenates every `factor` consecutive frames; a trailing remainder is
/// dropped.
pub fn stack_frames(f: &FrameSequence, factor: usize) -> Result<FrameSequence> {
    ensure!(factor >= 1, InvalidArgument, "stack factor must be at least 1");
    ensure!(
        f.len() >= factor,
        TooShort,
        "{} frames cannot be stacked by {factor}",
        f.len()
    );
    let t = f.len() / factor;
    let d = f.dim();
    // Row-major layout makes stacking a reinterpretation of the prefix.
    let data = f.frames.data()[..t * factor * d].to_vec();
    Ok(FrameSequence {
        frames: Tensor::matrix(t, d * factor, data),
        frame_rate_ms: f.frame_rate_ms * factor as f64,
        source_id: f.source_id.clone(),
    })
}

pub fn unstack_frames(f: &FrameSequence, factor: usize) -> Result<FrameSequence> {
    ensure!(factor >= 1, InvalidArgument, "stack factor must be at least 1");
    ensure!(
        f.dim().is_multiple_of(factor),
        Shape,
        "width {} is not a multiple of {factor}",
        f.dim()
    );
    Ok(FrameSequence {
        frames: Tensor::matrix(f.len() * factor, f.dim() / factor, f.frames.data().to_vec()),
        frame_rate_ms: f.frame_rate_ms / factor as f64,
        source_id: f.source_id.clone(),
    })
}

/// Log-Mel followed by stacking, the model's input features.
pub fn extract_features(w: &Waveform, cfg: &MelConfig, source_id: &str) -> Result<FrameSequence> {
    let mut f = stack_frames(&log_mel(w, cfg)?, cfg.stack_factor)?;
    f.source_id = source_id.to_string();
    Ok(f)
}

/// Per-dimension mean and standard deviation over a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn compute<'a>(seqs: impl IntoIterator<Item = &'a FrameSequence>) -> Result<NormStats> {
        let seqs: Vec<&FrameSequence> = seqs.into_iter().collect();
        ensure!(!seqs.is_empty(), InvalidArgument, "no sequences for statistics");
        let d = seqs[0].dim();
        ensure!(
            seqs.iter().all(|s| s.dim() == d),
            Shape,
            "sequences disagree on dimensionality"
        );
        let n: usize = seqs.iter().map(|s| s.len()).sum();
        ensure!(n > 0, InvalidArgument, "no frames for statistics");
        let mut mean = vec![0.0; d];
        for s in &seqs {
            for r in s.frames.data().chunks_exact(d) {
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for s in &seqs {
            for r in s.frames.data().chunks_exact(d) {
                for ((acc, v), m) in var.iter_mut().zip(r).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        Ok(NormStats { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Dimensions whose spread is indistinguishable from rounding noise are
    /// left untouched.
    fn passes_through(&self, j: usize) -> bool {
        self.std[j] <= 1e-12 * self.mean[j].abs().max(1.0)
    }
}

pub fn normalize(f: &FrameSequence, stats: &NormStats) -> Result<FrameSequence> {
    if f.dim() != stats.dim() {
        return Err(Error::Shape(format!(
            "stats have {} dims, frames have {}",
            stats.dim(),
            f.dim()
        )));
    }
    let d = f.dim();
    let mut data = f.frames.data().to_vec();
    for row in data.chunks_exact_mut(d) {
        for (j, x) in row.iter_mut().enumerate() {
            if !stats.passes_through(j) {
                *x = (*x - stats.mean[j]) / stats.std[j];
            }
        }
    }
    Ok(FrameSequence {
        frames: Tensor::matrix(f.len(), d, data),
        frame_rate_ms: f.frame_rate_ms,
        source_id: f.source_id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(t: usize, d: usize, f: impl Fn(usize, usize) -> f64) -> FrameSequence {
        let data = (0..t * d).map(|i| f(i / d, i % d)).collect();
        FrameSequence::new(Tensor::matrix(t, d, data), 10.0, "s").unwrap()
    }

    #[test]
    fn stacking_identity_and_floor() {
        let s = seq(5, 40, |t, j| (t * 40 + j) as f64);
        assert_eq!(stack_frames(&s, 1).unwrap(), s);
        let st = stack_frames(&s, 2).unwrap();
        assert_eq!((st.len(), st.dim(), st.frame_rate_ms), (2, 80, 20.0));
        assert_eq!(&st.frames.row(1)[..40], s.frames.row(2));
        assert_eq!(&st.frames.row(1)[40..], s.frames.row(3));
        assert!(stack_frames(&seq(1, 4, |_, _| 0.0), 2).is_err());
    }

    #[test]
    fn self_normalization_gives_zero_mean_unit_std() {
        let s = seq(50, 3, |t, j| (t as f64 * 0.3 + j as f64).sin() * (j + 1) as f64);
        let stats = NormStats::compute([&s]).unwrap();
        let n = normalize(&s, &stats).unwrap();
        let again = NormStats::compute([&n]).unwrap();
        for j in 0..3 {
            assert!(again.mean[j].abs() < 1e-12);
            assert!((again.std[j] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_dimension_passes_through() {
        let s = seq(20, 2, |t, j| if j == 0 { 0.7 } else { t as f64 });
        let stats = NormStats::compute([&s]).unwrap();
        let n = normalize(&s, &stats).unwrap();
        for t in 0..20 {
            assert_eq!(n.frames.row(t)[0], 0.7);
        }
    }

    #[test]
    fn stats_dimension_mismatch() {
        let s = seq(4, 2, |_, _| 1.0);
        let stats = NormStats {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        };
        assert!(matches!(normalize(&s, &stats), Err(Error::Shape(_))));
    }

    #[test]
    fn persisted_stats_reproduce() {
        let train = seq(30, 4, |t, j| ((t * 7 + j * 3) % 11) as f64);
        let held = seq(9, 4, |t, j| ((t * 5 + j) % 7) as f64 * 0.5);
        let stats = NormStats::compute([&train]).unwrap();
        let json = serde_json::to_string(&stats).unwrap();
        let back: NormStats = serde_json::from_str(&json).unwrap();
        assert_eq!(back, stats);
        assert_eq!(normalize(&held, &back).unwrap(), normalize(&held, &stats).unwrap());
    }

    proptest! {
        #[test]
        fn frame_count_matches_formula(len in 400usize..20000) {
            let w = Waveform::new(vec![0.01; len], 16000).unwrap();
            let f = log_mel(&w, &MelConfig::default()).unwrap();
            prop_assert_eq!(f.len(), 1 + (len - 400) / 160);
        }

        #[test]
        fn unstack_recovers_prefix(t in 1usize..40, d in 1usize..6, factor in 1usize..5) {
            prop_assume!(t >= factor);
            let s = seq(t, d, |a, b| (a * 31 + b) as f64 * 0.25);
            let back = unstack_frames(&stack_frames(&s, factor).unwrap(), factor).unwrap();
            let keep = (t / factor) * factor;
            prop_assert_eq!(back.frames.data(), &s.frames.data()[..keep * d]);
        }
    }
}
