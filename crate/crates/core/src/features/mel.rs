use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{FrameSequence, Waveform};
use crate::error::{ensure, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub stack_factor: usize,
    pub fmin: f64,
    /// `None` means the Nyquist frequency.
    pub fmax: Option<f64>,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_mels: 40,
            window_ms: 25.0,
            hop_ms: 10.0,
            stack_factor: 2,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_mels >= 1, InvalidArgument, "n_mels must be at least 1");
        ensure!(self.stack_factor >= 1, InvalidArgument, "stack_factor must be at least 1");
        ensure!(
            self.hop_ms > 0.0 && self.window_ms >= self.hop_ms,
            InvalidArgument,
            "need window >= hop > 0 (got {} / {})",
            self.window_ms,
            self.hop_ms
        );
        ensure!(self.log_floor > 0.0, InvalidArgument, "log_floor must be positive");
        Ok(())
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn n_fft(&self, sample_rate: u32) -> usize {
        self.window_samples(sample_rate).next_power_of_two()
    }

    fn fmax_for(&self, sample_rate: u32) -> f64 {
        self.fmax.unwrap_or(sample_rate as f64 / 2.0)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the `n_mels` triangular filters.
pub fn mel_center_frequencies(cfg: &MelConfig, sample_rate: u32) -> Vec<f64> {
    mel_edges(cfg, sample_rate)[1..=cfg.n_mels].to_vec()
}

fn mel_edges(cfg: &MelConfig, sample_rate: u32) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax_for(sample_rate));
    let n = cfg.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Triangular filters with unit peaks, `n_mels x (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &MelConfig, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_fft = cfg.n_fft(sample_rate);
    let n_bins = n_fft / 2 + 1;
    let edges = mel_edges(cfg, sample_rate);
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|b| b as f64 * sample_rate as f64 / n_fft as f64)
        .collect();
    (0..cfg.n_mels)
        .map(|m| {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            bin_hz
                .iter()
                .map(|&f| {
                    let up = (f - lo) / (c - lo);
                    let down = (hi - f) / (hi - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn num_frames(len: usize, window: usize, hop: usize) -> usize {
    if len < window {
        0
    } else {
        1 + (len - window) / hop
    }
}

/// Log-Mel energies, one row per hop, before stacking.
pub fn log_mel(w: &Waveform, cfg: &MelConfig) -> Result<FrameSequence> {
    cfg.validate()?;
    let win = cfg.window_samples(w.sample_rate);
    let hop = cfg.hop_samples(w.sample_rate);
    ensure!(win > 0 && hop > 0, InvalidArgument, "window or hop rounds to zero samples");
    ensure!(
        w.samples.len() >= win,
        TooShort,
        "{} samples is shorter than one {win}-sample window",
        w.samples.len()
    );
    let n_fft = cfg.n_fft(w.sample_rate);
    let n_bins = n_fft / 2 + 1;
    let fb = mel_filterbank(cfg, w.sample_rate);
    let window = hann_window(win);
    let t = num_frames(w.samples.len(), win, hop);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_bins];
    let mut out = Vec::with_capacity(t * cfg.n_mels);
    for f in 0..t {
        let frame = &w.samples[f * hop..f * hop + win];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win {
                Complex::new(frame[i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for filt in &fb {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            out.push((e + cfg.log_floor).ln());
        }
    }
    Ok(FrameSequence {
        frames: Tensor::matrix(t, cfg.n_mels, out),
        frame_rate_ms: cfg.hop_ms,
        source_id: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64, sr: u32) -> Waveform {
        let n = (secs * sr as f64) as usize;
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / sr as f64).sin())
            .collect();
        Waveform::new(s, sr).unwrap()
    }

    #[test]
    fn default_config_is_40_bins_at_10ms() {
        let cfg = MelConfig::default();
        let f = log_mel(&tone(440.0, 0.2, 16000), &cfg).unwrap();
        assert_eq!(f.frames.cols(), 40);
        assert_eq!(f.frame_rate_ms, 10.0);
        assert_eq!(cfg.window_samples(16000), 400);
        assert_eq!(cfg.hop_samples(16000), 160);
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = MelConfig::default();
        let f = log_mel(&Waveform::new(vec![0.0; 4000], 16000).unwrap(), &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        assert!(f.frames.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn frame_count_formula() {
        let cfg = MelConfig::default();
        for len in [400, 401, 559, 560, 561, 16000] {
            let f = log_mel(&Waveform::new(vec![0.1; len], 16000).unwrap(), &cfg).unwrap();
            assert_eq!(f.frames.rows(), 1 + (len - 400) / 160, "len {len}");
        }
    }

    #[test]
    fn too_short_is_an_error() {
        let cfg = MelConfig::default();
        assert!(log_mel(&Waveform::new(vec![0.0; 399], 16000).unwrap(), &cfg).is_err());
    }

    /// Direct O(N²) DFT plus the same filterbank, as an independent route.
    fn reference_log_mel_frame(frame: &[f64], cfg: &MelConfig, sr: u32) -> Vec<f64> {
        let n_fft = cfg.n_fft(sr);
        let win = hann_window(frame.len());
        let power: Vec<f64> = (0..n_fft / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, (&x, &wv)) in frame.iter().zip(&win).enumerate() {
                    let ang = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                    re += x * wv * ang.cos();
                    im += x * wv * ang.sin();
                }
                re * re + im * im
            })
            .collect();
        mel_filterbank(cfg, sr)
            .iter()
            .map(|f| (f.iter().zip(&power).map(|(a, b)| a * b).sum::<f64>() + cfg.log_floor).ln())
            .collect()
    }

    #[test]
    fn one_khz_tone_peaks_at_nearest_bin() {
        let cfg = MelConfig::default();
        let w = tone(1000.0, 0.1, 16000);
        let f = log_mel(&w, &cfg).unwrap();
        let centers = mel_center_frequencies(&cfg, 16000);
        let nearest = crate::numerics::argmin(
            &centers.iter().map(|c| (c - 1000.0).abs()).collect::<Vec<_>>(),
        );
        for t in 0..f.frames.rows() {
            assert_eq!(crate::numerics::argmax(f.frames.row(t)), nearest);
            let reference = reference_log_mel_frame(&w.samples[t * 160..t * 160 + 400], &cfg, 16000);
            assert_eq!(crate::numerics::argmax(&reference), nearest);
            for (a, b) in f.frames.row(t).iter().zip(&reference) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn shift_by_one_hop_shifts_frames() {
        let cfg = MelConfig::default();
        let base: Vec<f64> = (0..6000).map(|i| ((i as f64) * 0.013).sin() * ((i as f64) * 0.0007).cos()).collect();
        let a = log_mel(&Waveform::new(base.clone(), 16000).unwrap(), &cfg).unwrap();
        let b = log_mel(&Waveform::new(base[160..].to_vec(), 16000).unwrap(), &cfg).unwrap();
        for t in 0..b.frames.rows() {
            for (x, y) in a.frames.row(t + 1).iter().zip(b.frames.row(t)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
