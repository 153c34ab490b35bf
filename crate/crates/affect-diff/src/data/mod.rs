//! Data pipeline: loading, validation, normalization, padding, augmentation,
//! and synthesis of tri-modal sequence datasets.

pub mod augment;
pub mod format;
pub mod ingest;
pub mod preprocess;
pub mod synthetic;

pub use augment::{augment_batch, AugmentationPolicy, Batch};
pub use ingest::{ingest, DropRecord, IngestReport};
pub use preprocess::{compute_stats, normalize_sample, pad_or_truncate, NormalizationStats};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::fnv1a64;

/// Number of modalities (text, audio, video).
pub const NUM_MODALITIES: usize = 3;

/// One aligned tri-modal sequence with its class label.
#[derive(Debug, Clone)]
pub struct ModalitySample {
    pub id: String,
    pub text: Array2<f32>,
    pub audio: Array2<f32>,
    pub video: Array2<f32>,
    pub label: usize,
    pub intensities: Option<Vec<f32>>,
}

impl ModalitySample {
    pub fn modality(&self, m: usize) -> &Array2<f32> {
        match m {
            0 => &self.text,
            1 => &self.audio,
            2 => &self.video,
            _ => panic!("modality index {m} out of range"),
        }
    }

    pub fn modality_mut(&mut self, m: usize) -> &mut Array2<f32> {
        match m {
            0 => &mut self.text,
            1 => &mut self.audio,
            2 => &mut self.video,
            _ => panic!("modality index {m} out of range"),
        }
    }

    /// True when no tensor holds a NaN/Inf, all modalities are non-empty,
    /// and the label is consistent with the intensity vector if present.
    pub fn check_invariants(&self, classes: usize) -> std::result::Result<(), String> {
        for m in 0..NUM_MODALITIES {
            let t = self.modality(m);
            if t.nrows() == 0 {
                return Err(format!("empty {} modality", format::MODALITIES[m]));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(format!("non-finite value in {}", format::MODALITIES[m]));
            }
        }
        if self.label >= classes {
            return Err(format!("label {} out of range [0, {classes})", self.label));
        }
        if let Some(ints) = &self.intensities {
            if ints.len() != classes {
                return Err(format!("intensity vector length {} != {classes}", ints.len()));
            }
            let argmax = ints
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if argmax != self.label {
                return Err(format!("label {} != argmax(intensities) {argmax}", self.label));
            }
        }
        Ok(())
    }
}

/// Dataset geometry and split configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Feature width per modality (D_T, D_A, D_V).
    pub text_dim: usize,
    pub audio_dim: usize,
    pub video_dim: usize,
    /// Padded sequence length L.
    pub seq_len: usize,
    /// Class count C.
    pub classes: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub split_seed: u64,
    /// Optional stratified split (per-class proportional assignment).
    pub stratified: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            text_dim: 300,
            audio_dim: 74,
            video_dim: 35,
            seq_len: 50,
            classes: 6,
            train_frac: 0.70,
            val_frac: 0.15,
            test_frac: 0.15,
            split_seed: 42,
            stratified: false,
        }
    }
}

impl DatasetConfig {
    pub fn dim(&self, m: usize) -> usize {
        match m {
            0 => self.text_dim,
            1 => self.audio_dim,
            2 => self.video_dim,
            _ => panic!("modality index {m} out of range"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.train_frac + self.val_frac + self.test_frac;
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {s}, expected 1")));
        }
        if self.seq_len < 1 {
            return Err(Error::Config("seq_len must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be >= 2".into()));
        }
        for m in 0..NUM_MODALITIES {
            if self.dim(m) == 0 {
                return Err(Error::Config(format!(
                    "{} feature dim must be positive",
                    format::MODALITIES[m]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Split membership as a pure function of (id, split seed): re-running the
/// assignment always yields the same partition.
pub fn split_of(id: &str, cfg: &DatasetConfig) -> Split {
    let h = crate::rng::stream(cfg.split_seed, "split", &[fnv1a64(id.as_bytes())])
        .next_u64();
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    if u < cfg.train_frac {
        Split::Train
    } else if u < cfg.train_frac + cfg.val_frac {
        Split::Val
    } else {
        Split::Test
    }
}

use rand::RngCore;

/// Index sets for the three partitions.
#[derive(Debug, Clone, Default)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partition samples. Unstratified by default; the stratified option splits
/// each class proportionally (ordered by id hash so it stays deterministic).
pub fn split_dataset(samples: &[ModalitySample], cfg: &DatasetConfig) -> SplitIndices {
    let mut out = SplitIndices::default();
    if !cfg.stratified {
        for (i, s) in samples.iter().enumerate() {
            match split_of(&s.id, cfg) {
                Split::Train => out.train.push(i),
                Split::Val => out.val.push(i),
                Split::Test => out.test.push(i),
            }
        }
        return out;
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); cfg.classes];
    for (i, s) in samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    for members in by_class.iter_mut() {
        members.sort_by_key(|&i| {
            crate::rng::stream(cfg.split_seed, "split-strat", &[fnv1a64(samples[i].id.as_bytes())])
                .next_u64()
        });
        let n = members.len();
        let n_train = (n as f64 * cfg.train_frac).round() as usize;
        let n_val = (n as f64 * cfg.val_frac).round() as usize;
        for (k, &i) in members.iter().enumerate() {
            if k < n_train {
                out.train.push(i);
            } else if k < n_train + n_val {
                out.val.push(i);
            } else {
                out.test.push(i);
            }
        }
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    out
}

/// A dataset ready for training: ingested, split, normalized with
/// training-split statistics, and padded to fixed length.
#[derive(Debug)]
pub struct PreparedDataset {
    pub samples: Vec<ModalitySample>,
    pub splits: SplitIndices,
    pub stats: NormalizationStats,
    pub config: DatasetConfig,
    pub dropped: Vec<DropRecord>,
}

/// Ingest a dataset directory and run the full preprocessing pipeline.
/// Statistics come from the training split only and are frozen for val/test.
pub fn load_and_prepare(path: &std::path::Path, cfg: &DatasetConfig) -> Result<PreparedDataset> {
    let report = ingest(path, cfg)?;
    if report.samples.is_empty() {
        return Err(Error::Format("dataset has no valid samples".into()));
    }
    let splits = split_dataset(&report.samples, cfg);
    let stats = compute_stats(&report.samples, &splits.train, cfg);
    let mut samples = report.samples;
    for s in samples.iter_mut() {
        normalize_sample(s, &stats)?;
    }
    let samples: Vec<ModalitySample> = samples
        .iter()
        .map(|s| pad_or_truncate(s, cfg.seq_len))
        .collect();
    Ok(PreparedDataset {
        samples,
        splits,
        stats,
        config: cfg.clone(),
        dropped: report.dropped,
    })
}

impl PreparedDataset {
    pub fn split_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }
}

/// Stack padded samples into `[B, L, D]` batch tensors (f64 at the model
/// boundary).
pub fn collate(samples: &[ModalitySample], indices: &[usize]) -> Batch {
    assert!(!indices.is_empty(), "empty batch");
    let l = samples[indices[0]].text.nrows();
    let dims = [
        samples[indices[0]].text.ncols(),
        samples[indices[0]].audio.ncols(),
        samples[indices[0]].video.ncols(),
    ];
    let b = indices.len();
    let mut text = ndarray::Array3::<f64>::zeros((b, l, dims[0]));
    let mut audio = ndarray::Array3::<f64>::zeros((b, l, dims[1]));
    let mut video = ndarray::Array3::<f64>::zeros((b, l, dims[2]));
    let mut ids = Vec::with_capacity(b);
    let mut labels = Vec::with_capacity(b);
    for (bi, &i) in indices.iter().enumerate() {
        let s = &samples[i];
        for (dst, src) in [
            (&mut text, &s.text),
            (&mut audio, &s.audio),
            (&mut video, &s.video),
        ] {
            for (r, row) in src.rows().into_iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    dst[[bi, r, c]] = v as f64;
                }
            }
        }
        ids.push(s.id.clone());
        labels.push(s.label);
    }
    Batch {
        ids,
        text,
        audio,
        video,
        labels,
    }
}
