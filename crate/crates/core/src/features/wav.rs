use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        ensure!(!samples.is_empty(), InvalidArgument, "empty waveform");
        ensure!(sample_rate > 0, InvalidArgument, "sample rate must be positive");
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a mono 16-bit PCM or 32-bit float WAV file.
///
/// PCM samples are scaled by 1/32768. Multi-channel files are rejected.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedAudio(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::UnsupportedAudio(format!(
                "{}: {bits}-bit {fmt:?} samples",
                path.display()
            )))
        }
    };
    if samples.is_empty() {
        return Err(Error::UnsupportedAudio(format!("{}: no samples", path.display())));
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM; samples are clamped to [-1, 1) and scaled by 32768.
pub fn write_wav_pcm16(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut out = WavWriter::create(path, spec)?;
    for &s in &w.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.write_sample(v)?;
    }
    out.finalize()?;
    Ok(())
}

pub fn write_wav_f32(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut out = WavWriter::create(path, spec)?;
    for &s in &w.samples {
        out.write_sample(s as f32)?;
    }
    out.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_wav_pcm16(&p, &Waveform::new(vec![0.0; 16000], 16000).unwrap()).unwrap();
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples.len(), 16000);
        assert!(w.samples.iter().all(|&s| s == 0.0));
        assert_eq!(w.sample_rate, 16000);
    }

    #[test]
    fn full_scale_pcm_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut wr = WavWriter::create(&p, spec).unwrap();
        wr.write_sample(32767i16).unwrap();
        wr.write_sample(-32768i16).unwrap();
        wr.finalize().unwrap();
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples, vec![32767.0 / 32768.0, -1.0]);
    }

    #[test]
    fn float_wav_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f32.wav");
        let samples: Vec<f64> = (0..1000)
            .map(|i| f64::from(((i as f32) * 0.37).sin() * 0.8))
            .collect();
        let w = Waveform::new(samples, 8000).unwrap();
        write_wav_f32(&p, &w).unwrap();
        assert_eq!(load_wav(&p).unwrap(), w);
    }

    #[test]
    fn stereo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut wr = WavWriter::create(&p, spec).unwrap();
        for _ in 0..8 {
            wr.write_sample(0i16).unwrap();
        }
        wr.finalize().unwrap();
        assert!(matches!(load_wav(&p), Err(Error::UnsupportedAudio(_))));
    }

    #[test]
    fn unsupported_depth_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("24.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 24,
            sample_format: SampleFormat::Int,
        };
        let mut wr = WavWriter::create(&p, spec).unwrap();
        wr.write_sample(5i32).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(load_wav(&p), Err(Error::UnsupportedAudio(_))));
    }
}
