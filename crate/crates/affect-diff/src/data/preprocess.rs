//! Normalization statistics, z-scoring with clamping, and length fixing.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DatasetConfig, ModalitySample, NUM_MODALITIES};
use crate::error::{Error, Result};

/// Guard against zero-variance features.
pub const STD_EPS: f64 = 1e-6;
/// Post-normalization clamp range.
pub const CLAMP: f64 = 10.0;

/// Per-modality, per-feature mean and standard deviation, computed on the
/// training split only and frozen for val/test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [Vec<f64>; NUM_MODALITIES],
    pub std: [Vec<f64>; NUM_MODALITIES],
}

/// Population mean/std per feature over all frames of the given samples.
pub fn compute_stats(samples: &[ModalitySample], indices: &[usize], cfg: &DatasetConfig) -> NormalizationStats {
    let mut mean: [Vec<f64>; 3] = [
        vec![0.0; cfg.text_dim],
        vec![0.0; cfg.audio_dim],
        vec![0.0; cfg.video_dim],
    ];
    let mut std = mean.clone();
    for m in 0..NUM_MODALITIES {
        let d = cfg.dim(m);
        let mut sum = vec![0.0f64; d];
        let mut sumsq = vec![0.0f64; d];
        let mut count = 0usize;
        for &i in indices {
            let t = samples[i].modality(m);
            for row in t.rows() {
                for (j, &v) in row.iter().enumerate() {
                    let v = v as f64;
                    sum[j] += v;
                    sumsq[j] += v * v;
                }
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        for j in 0..d {
            let mu = sum[j] / n;
            mean[m][j] = mu;
            std[m][j] = (sumsq[j] / n - mu * mu).max(0.0).sqrt();
        }
    }
    NormalizationStats { mean, std }
}

/// `x -> clamp((x - mean) / max(std, 1e-6), -10, 10)` per modality and
/// feature. Fails on a dimension mismatch between stats and sample.
pub fn normalize_sample(sample: &mut ModalitySample, stats: &NormalizationStats) -> Result<()> {
    for m in 0..NUM_MODALITIES {
        let d = sample.modality(m).ncols();
        if stats.mean[m].len() != d || stats.std[m].len() != d {
            return Err(Error::Shape(format!(
                "normalization stats for {} have {} features, sample has {d}",
                super::format::MODALITIES[m],
                stats.mean[m].len()
            )));
        }
        let mean = &stats.mean[m];
        let std = &stats.std[m];
        let t = sample.modality_mut(m);
        for mut row in t.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let z = (*v as f64 - mean[j]) / std[j].max(STD_EPS);
                *v = z.clamp(-CLAMP, CLAMP) as f32;
            }
        }
    }
    Ok(())
}

/// Fix every modality to exactly `l` rows: zero rows appended when short,
/// first `l` rows kept when long, untouched when already `l`.
pub fn pad_or_truncate(sample: &ModalitySample, l: usize) -> ModalitySample {
    let fix = |t: &Array2<f32>| -> Array2<f32> {
        let rows = t.nrows();
        if rows == l {
            return t.clone();
        }
        let d = t.ncols();
        let mut out = Array2::<f32>::zeros((l, d));
        let keep = rows.min(l);
        out.slice_mut(ndarray::s![0..keep, ..])
            .assign(&t.slice(ndarray::s![0..keep, ..]));
        out
    };
    ModalitySample {
        id: sample.id.clone(),
        text: fix(&sample.text),
        audio: fix(&sample.audio),
        video: fix(&sample.video),
        label: sample.label,
        intensities: sample.intensities.clone(),
    }
}
