//! Frequency and time masking of frame-major matrices.
//!
//! Mask coordinates come from a `ChaCha8Rng` seeded with the call seed, drawn
//! in this order: for each frequency mask a width in `[0, min(F, dims)]` then a
//! start in `[0, dims - width]`; then the same for each time mask over frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Mat, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecAugPolicy {
    /// Maximum frequency (feature-axis) mask width F.
    pub freq_mask_width: usize,
    /// Maximum time (frame-axis) mask width T.
    pub time_mask_width: usize,
    pub num_freq_masks: usize,
    pub num_time_masks: usize,
    pub mask_value: f64,
}

impl Default for SpecAugPolicy {
    fn default() -> Self {
        SpecAugPolicy {
            freq_mask_width: 0,
            time_mask_width: 0,
            num_freq_masks: 2,
            num_time_masks: 2,
            mask_value: 0.0,
        }
    }
}

impl SpecAugPolicy {
    pub fn new(freq_mask_width: usize, time_mask_width: usize) -> Self {
        SpecAugPolicy {
            freq_mask_width,
            time_mask_width,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        (self.freq_mask_width == 0 || self.num_freq_masks == 0) && (self.time_mask_width == 0 || self.num_time_masks == 0)
    }

    /// Parses `FxT`, e.g. `20x10`.
    pub fn parse_widths(s: &str) -> Option<Self> {
        let (f, t) = s.split_once(['x', 'X'])?;
        Some(Self::new(f.trim().parse().ok()?, t.trim().parse().ok()?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAxis {
    Freq,
    Time,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskRect {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

pub fn mask_rects(frames: usize, dims: usize, policy: &SpecAugPolicy, seed: u64) -> Vec<MaskRect> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rects = Vec::with_capacity(policy.num_freq_masks + policy.num_time_masks);
    let mut draw = |axis, max_width: usize, extent: usize, count: usize, rng: &mut ChaCha8Rng| {
        for _ in 0..count {
            let width = rng.random_range(0..=max_width.min(extent));
            let start = rng.random_range(0..=extent - width);
            rects.push(MaskRect { axis, start, width });
        }
    };
    draw(MaskAxis::Freq, policy.freq_mask_width, dims, policy.num_freq_masks, &mut rng);
    draw(MaskAxis::Time, policy.time_mask_width, frames, policy.num_time_masks, &mut rng);
    rects
}

/// `1` for cells left untouched, `0` inside any mask rectangle.
pub fn keep_mask<T: Scalar>(frames: usize, dims: usize, policy: &SpecAugPolicy, seed: u64) -> Mat<T> {
    let mut keep = Mat::filled(frames, dims, T::one());
    for rect in mask_rects(frames, dims, policy, seed) {
        for i in rect.start..rect.start + rect.width {
            match rect.axis {
                MaskAxis::Freq => (0..frames).for_each(|t| keep.set(t, i, T::zero())),
                MaskAxis::Time => keep.row_mut(i).iter_mut().for_each(|v| *v = T::zero()),
            }
        }
    }
    keep
}

/// Sets every masked cell to `policy.mask_value`; all other cells are copied bit-for-bit.
pub fn apply_specaug<T: Scalar>(features: &Mat<T>, policy: &SpecAugPolicy, seed: u64) -> Mat<T> {
    if policy.is_identity() {
        return features.clone();
    }
    let keep = keep_mask::<T>(features.rows(), features.cols(), policy, seed);
    let fill = T::lit(policy.mask_value);
    Mat::from_vec(
        features.rows(),
        features.cols(),
        features
            .data()
            .iter()
            .zip(keep.data())
            .map(|(&x, &k)| if k == T::zero() { fill } else { x })
            .collect(),
    )
}
