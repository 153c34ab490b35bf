//! Dataset loading with validation and per-sample drop accounting.

use std::path::Path;

use super::format::DatasetReader;
use super::{DatasetConfig, ModalitySample, NUM_MODALITIES};
use crate::error::Result;

/// Why a manifest record did not become a sample.
#[derive(Debug, Clone)]
pub struct DropRecord {
    pub id: String,
    pub reason: String,
}

/// Result of [`ingest`]: valid samples plus drop records.
#[derive(Debug, Default)]
pub struct IngestReport {
    pub samples: Vec<ModalitySample>,
    pub dropped: Vec<DropRecord>,
}

/// Load a dataset directory in the portable format.
///
/// Samples whose stored feature-row count disagrees with the manifest are
/// dropped (with a reason), as are samples with an empty modality or an
/// inconsistent label. NaN/Inf feature values are replaced by zero on read,
/// so returned samples never carry non-finite values. A missing manifest or
/// modality file is fatal.
pub fn ingest(path: &Path, config: &DatasetConfig) -> Result<IngestReport> {
    config.validate()?;
    let mut reader = DatasetReader::open(path)?;
    let mut report = IngestReport::default();

    // Pre-compute stored block lengths so row-count mismatches are caught
    // before reading.
    let n = reader.records.len();
    let mut stored: Vec<[u64; NUM_MODALITIES]> = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = [0u64; NUM_MODALITIES];
        for (m, sm) in s.iter_mut().enumerate() {
            *sm = reader.stored_block_len(i, m);
        }
        stored.push(s);
    }

    'records: for i in 0..n {
        let rec = reader.records[i].clone();
        for m in 0..NUM_MODALITIES {
            let rows = rec.rows.get(m);
            if rows == 0 {
                report.dropped.push(DropRecord {
                    id: rec.id.clone(),
                    reason: format!("empty {} modality", super::format::MODALITIES[m]),
                });
                continue 'records;
            }
            let expect = (rows * config.dim(m) * 4) as u64;
            if stored[i][m] != expect {
                report.dropped.push(DropRecord {
                    id: rec.id.clone(),
                    reason: format!(
                        "{} row count mismatch: manifest says {rows} rows ({expect} bytes), file stores {} bytes",
                        super::format::MODALITIES[m],
                        stored[i][m]
                    ),
                });
                continue 'records;
            }
        }
        let text = reader.read_block(i, 0, config.text_dim)?;
        let audio = reader.read_block(i, 1, config.audio_dim)?;
        let video = reader.read_block(i, 2, config.video_dim)?;
        let intensities = rec.intensities.clone().map(|v| {
            v.into_iter()
                .map(|x| if x.is_finite() { x } else { 0.0 })
                .collect::<Vec<f32>>()
        });
        let sample = ModalitySample {
            id: rec.id.clone(),
            text,
            audio,
            video,
            label: rec.label,
            intensities,
        };
        match sample.check_invariants(config.classes) {
            Ok(()) => report.samples.push(sample),
            Err(reason) => report.dropped.push(DropRecord { id: rec.id, reason }),
        }
    }
    Ok(report)
}
