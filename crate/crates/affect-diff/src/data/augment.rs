//! Train-time augmentation on collated batches.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::StreamRng;

/// A collated mini-batch: `[B, L, D_m]` per modality plus labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub text: Array3<f64>,
    pub audio: Array3<f64>,
    pub video: Array3<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn modality(&self, m: usize) -> &Array3<f64> {
        match m {
            0 => &self.text,
            1 => &self.audio,
            2 => &self.video,
            _ => panic!("modality index {m} out of range"),
        }
    }

    pub fn modality_mut(&mut self, m: usize) -> &mut Array3<f64> {
        match m {
            0 => &mut self.text,
            1 => &mut self.audio,
            2 => &mut self.video,
            _ => panic!("modality index {m} out of range"),
        }
    }
}

/// Train-only stochastic input corruption.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    /// Probability of zeroing a time frame across all modalities.
    pub frame_mask_p: f64,
    /// Gaussian noise std added to audio and video features only.
    pub noise_sigma: f64,
    /// Probability of zeroing an entire modality for a sample.
    pub modality_drop_p: f64,
    /// Master switch; augmentation is always off at evaluation time.
    pub enabled: bool,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            frame_mask_p: 0.1,
            noise_sigma: 0.01,
            modality_drop_p: 0.1,
            enabled: true,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> crate::error::Result<()> {
        for (name, p) in [("frame_mask_p", self.frame_mask_p), ("modality_drop_p", self.modality_drop_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(crate::error::Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(crate::error::Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        !self.enabled
            || (self.frame_mask_p == 0.0 && self.noise_sigma == 0.0 && self.modality_drop_p == 0.0)
    }
}

/// Apply the policy in order: frame masking, then Gaussian noise on audio and
/// video, then whole-modality dropout. Each phase is skipped entirely when
/// its parameter is zero, so an identity policy is a bit-exact no-op.
///
/// The caller supplies the stream keyed by (seed, epoch, batch index).
pub fn augment_batch(batch: &mut Batch, policy: &AugmentationPolicy, rng: &mut StreamRng) {
    if policy.is_identity() {
        return;
    }
    let b = batch.len();
    let l = batch.text.dim().1;

    if policy.frame_mask_p > 0.0 {
        for bi in 0..b {
            for li in 0..l {
                if rng.gen::<f64>() < policy.frame_mask_p {
                    for m in 0..3 {
                        batch
                            .modality_mut(m)
                            .slice_mut(ndarray::s![bi, li, ..])
                            .fill(0.0);
                    }
                }
            }
        }
    }

    if policy.noise_sigma > 0.0 {
        for m in 1..3 {
            for v in batch.modality_mut(m).iter_mut() {
                *v += policy.noise_sigma * crate::rng::normal(rng);
            }
        }
    }

    if policy.modality_drop_p > 0.0 {
        for bi in 0..b {
            for m in 0..3 {
                if rng.gen::<f64>() < policy.modality_drop_p {
                    batch.modality_mut(m).slice_mut(ndarray::s![bi, .., ..]).fill(0.0);
                }
            }
        }
    }
}
