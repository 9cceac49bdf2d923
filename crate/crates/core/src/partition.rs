//! Partitions of a sequence: span masks for masked prediction and the
//! shifted past/future split for future prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub span_frames: usize,
    pub start_prob: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            span_frames: 4,
            start_prob: 0.2,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.span_frames >= 1, InvalidArgument, "span_frames must be at least 1");
        ensure!(
            self.start_prob > 0.0 && self.start_prob <= 1.0,
            InvalidArgument,
            "start_prob must be in (0, 1], got {}",
            self.start_prob
        );
        Ok(())
    }

    /// Probability that frame `i` ends up masked, ignoring the empty-mask
    /// resampling.
    pub fn frame_mask_prob(&self, i: usize) -> f64 {
        let covering = (i + 1).min(self.span_frames) as i32;
        1.0 - (1.0 - self.start_prob).powi(covering)
    }
}

/// Masked indices `M` and their complement, both sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub len: usize,
    pub masked: Vec<usize>,
    pub unmasked: Vec<usize>,
    /// How many all-unmasked draws were rejected before this one.
    pub resamples: usize,
}

impl Partition {
    pub fn from_flags(flags: &[bool]) -> Partition {
        let (mut masked, mut unmasked) = (Vec::new(), Vec::new());
        for (i, &m) in flags.iter().enumerate() {
            if m {
                masked.push(i)
            } else {
                unmasked.push(i)
            }
        }
        Partition {
            len: flags.len(),
            masked,
            unmasked,
            resamples: 0,
        }
    }

    pub fn from_masked(len: usize, masked: &[usize]) -> Result<Partition> {
        let mut flags = vec![false; len];
        for &i in masked {
            ensure!(i < len, InvalidArgument, "masked index {i} out of range for length {len}");
            flags[i] = true;
        }
        Ok(Partition::from_flags(&flags))
    }

    pub fn all_masked(len: usize) -> Partition {
        Partition::from_flags(&vec![true; len])
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.len];
        for &i in &self.masked {
            f[i] = true;
        }
        f
    }
}

/// Draws a span mask: every frame starts a span with `start_prob`, spans
/// may overlap and are cut at the sequence end. Empty draws are redrawn.
pub fn sample_mask(len: usize, spec: &MaskSpec, rng: &mut impl Rng) -> Result<Partition> {
    spec.validate()?;
    if len < spec.span_frames {
        return Err(Error::TooShort(format!(
            "sequence of {len} frames is shorter than the {}-frame mask span",
            spec.span_frames
        )));
    }
    let mut flags = vec![false; len];
    let mut resamples = 0;
    loop {
        let mut any = false;
        for i in 0..len {
            if rng.gen_bool(spec.start_prob) {
                flags[i..(i + spec.span_frames).min(len)].fill(true);
                any = true;
            }
        }
        if any {
            break;
        }
        resamples += 1;
    }
    let mut p = Partition::from_flags(&flags);
    p.resamples = resamples;
    Ok(p)
}

pub fn sample_mask_seeded(len: usize, spec: &MaskSpec, seed: u64) -> Result<Partition> {
    sample_mask(len, spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FutureSpec {
    pub shift: usize,
    pub min_context: usize,
}

impl Default for FutureSpec {
    fn default() -> Self {
        FutureSpec {
            shift: 2,
            min_context: 0,
        }
    }
}

/// Targets `[shift + min_context, len)`; target `i` is predicted from
/// inputs `0..=i - shift`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuturePartition {
    pub len: usize,
    pub shift: usize,
    pub targets: Vec<usize>,
}

impl FuturePartition {
    /// Last input index visible to target `i`.
    pub fn context_end(&self, target: usize) -> usize {
        target - self.shift
    }

    pub fn context(&self, target: usize) -> std::ops::RangeInclusive<usize> {
        0..=self.context_end(target)
    }
}

pub fn future_partition(len: usize, spec: &FutureSpec) -> Result<FuturePartition> {
    ensure!(spec.shift >= 1, InvalidArgument, "shift must be at least 1");
    let first = spec.shift + spec.min_context;
    if len <= first {
        return Err(Error::TooShort(format!(
            "sequence of {len} frames leaves no target for shift {} and min_context {}",
            spec.shift, spec.min_context
        )));
    }
    Ok(FuturePartition {
        len,
        shift: spec.shift,
        targets: (first..len).collect(),
    })
}
