//! Portable on-disk dataset format.
//!
//! A dataset is a directory holding `manifest.jsonl` plus one flat binary
//! file per modality (`text.affd`, `audio.affd`, `video.affd`). Each binary
//! file starts with the magic bytes `AFFD` and a little-endian `u32` version
//! (1), followed by little-endian 32-bit floats in row-major order. Every
//! manifest line describes one sample: id, label, optional intensities, and
//! per-modality row counts and byte offsets into the binaries.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AFFD";
pub const VERSION_DATASET: u32 = 1;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

pub const MODALITIES: [&str; 3] = ["text", "audio", "video"];

/// Per-modality numbers in a manifest record, in fixed (text, audio, video)
/// order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerModality<T> {
    pub text: T,
    pub audio: T,
    pub video: T,
}

impl<T: Copy> PerModality<T> {
    pub fn get(&self, m: usize) -> T {
        match m {
            0 => self.text,
            1 => self.audio,
            2 => self.video,
            _ => panic!("modality index {m} out of range"),
        }
    }
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intensities: Option<Vec<f32>>,
    pub rows: PerModality<usize>,
    pub offsets: PerModality<u64>,
}

fn modality_path(dir: &Path, m: usize) -> PathBuf {
    dir.join(format!("{}.affd", MODALITIES[m]))
}

/// Streaming writer for a dataset directory.
pub struct DatasetWriter {
    dir: PathBuf,
    manifest: BufWriter<File>,
    files: Vec<BufWriter<File>>,
    cursors: Vec<u64>,
}

impl DatasetWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let manifest = BufWriter::new(File::create(dir.join(MANIFEST_NAME))?);
        let mut files = Vec::new();
        let mut cursors = Vec::new();
        for m in 0..3 {
            let mut f = BufWriter::new(File::create(modality_path(dir, m))?);
            f.write_all(MAGIC)?;
            f.write_all(&VERSION_DATASET.to_le_bytes())?;
            files.push(f);
            cursors.push(8u64);
        }
        Ok(DatasetWriter {
            dir: dir.to_path_buf(),
            manifest,
            files,
            cursors,
        })
    }

    /// Append one sample; matrices are `[rows, dim]`, row-major.
    pub fn append(
        &mut self,
        id: &str,
        label: usize,
        intensities: Option<&[f32]>,
        mats: [&Array2<f32>; 3],
    ) -> Result<()> {
        let mut rows = [0usize; 3];
        let mut offsets = [0u64; 3];
        for m in 0..3 {
            rows[m] = mats[m].nrows();
            offsets[m] = self.cursors[m];
            for &v in mats[m].iter() {
                self.files[m].write_all(&v.to_le_bytes())?;
            }
            self.cursors[m] += (mats[m].len() * 4) as u64;
        }
        let rec = ManifestRecord {
            id: id.to_string(),
            label,
            intensities: intensities.map(|v| v.to_vec()),
            rows: PerModality {
                text: rows[0],
                audio: rows[1],
                video: rows[2],
            },
            offsets: PerModality {
                text: offsets[0],
                audio: offsets[1],
                video: offsets[2],
            },
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
        self.manifest.write_all(line.as_bytes())?;
        self.manifest.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.flush()?;
        for f in &mut self.files {
            f.flush()?;
        }
        Ok(self.dir)
    }
}

/// Raw reader: manifest records plus access to each sample's float block.
pub struct DatasetReader {
    pub records: Vec<ManifestRecord>,
    files: Vec<BufReader<File>>,
    file_lens: Vec<u64>,
}

impl DatasetReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_NAME);
        if !manifest_path.is_file() {
            return Err(Error::Format(format!(
                "missing manifest {}",
                manifest_path.display()
            )));
        }
        let text = std::fs::read_to_string(&manifest_path)?;
        let mut records = Vec::new();
        for (li, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("manifest line {}: {e}", li + 1)))?;
            records.push(rec);
        }
        let mut files = Vec::new();
        let mut file_lens = Vec::new();
        for m in 0..3 {
            let path = modality_path(dir, m);
            let mut f = File::open(&path)
                .map_err(|e| Error::Format(format!("missing modality file {}: {e}", path.display())))?;
            let mut header = [0u8; 8];
            f.read_exact(&mut header)
                .map_err(|_| Error::Format(format!("truncated header in {}", path.display())))?;
            if &header[0..4] != MAGIC {
                return Err(Error::Format(format!("bad magic in {}", path.display())));
            }
            let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
            if version != VERSION_DATASET {
                return Err(Error::Format(format!(
                    "unsupported dataset version {version} in {}",
                    path.display()
                )));
            }
            let len = f.metadata()?.len();
            files.push(BufReader::new(f));
            file_lens.push(len);
        }
        Ok(DatasetReader {
            records,
            files,
            file_lens,
        })
    }

    /// Byte length actually stored for record `i`, modality `m`: the gap to
    /// the next block (or to end-of-file). Detects row-count lies.
    pub fn stored_block_len(&self, i: usize, m: usize) -> u64 {
        let off = self.records[i].offsets.get(m);
        let mut next = self.file_lens[m];
        for r in &self.records {
            let o = r.offsets.get(m);
            if o > off && o < next {
                next = o;
            }
        }
        next - off
    }

    /// Read the float block of record `i`, modality `m`, as `[rows, dim]`.
    /// NaN and Inf values are replaced by zero on read.
    pub fn read_block(&mut self, i: usize, m: usize, dim: usize) -> Result<Array2<f32>> {
        let rows = self.records[i].rows.get(m);
        let off = self.records[i].offsets.get(m);
        let nbytes = rows * dim * 4;
        let mut buf = vec![0u8; nbytes];
        self.files[m].seek(SeekFrom::Start(off))?;
        self.files[m]
            .read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("short read for sample {i} modality {m}")))?;
        let mut floats = Vec::with_capacity(rows * dim);
        for chunk in buf.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            floats.push(if v.is_finite() { v } else { 0.0 });
        }
        Array2::from_shape_vec((rows, dim), floats)
            .map_err(|e| Error::Format(format!("block shape: {e}")))
    }
}

/// Versioned flat tensor container used for checkpoints and latent dumps.
///
/// Same header convention as the dataset binaries but version 2 and a dtype
/// tag (1 = f32, 2 = f64) so parameter tensors round-trip exactly.
pub mod tensors {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    pub const VERSION_TENSORS: u32 = 2;

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct TensorMeta {
        pub name: String,
        pub shape: Vec<usize>,
        pub offset: u64,
        pub dtype: u32,
    }

    pub fn write_tensors(path: &Path, named: &[(String, &ArrayD<f64>)]) -> Result<Vec<TensorMeta>> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION_TENSORS.to_le_bytes())?;
        let mut metas = Vec::new();
        let mut cursor = 8u64;
        for (name, arr) in named {
            metas.push(TensorMeta {
                name: name.clone(),
                shape: arr.shape().to_vec(),
                offset: cursor,
                dtype: 2,
            });
            for &v in arr.iter() {
                f.write_all(&v.to_le_bytes())?;
            }
            cursor += (arr.len() * 8) as u64;
        }
        f.flush()?;
        Ok(metas)
    }

    pub fn read_tensors(path: &Path, metas: &[TensorMeta]) -> Result<Vec<(String, ArrayD<f64>)>> {
        let mut f = BufReader::new(File::open(path)?);
        let mut header = [0u8; 8];
        f.read_exact(&mut header)?;
        if &header[0..4] != MAGIC {
            return Err(Error::Format(format!("bad magic in {}", path.display())));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != VERSION_TENSORS {
            return Err(Error::Format(format!("unsupported tensor container version {version}")));
        }
        let mut out = Vec::with_capacity(metas.len());
        for meta in metas {
            if meta.dtype != 2 {
                return Err(Error::Format(format!("unsupported dtype {}", meta.dtype)));
            }
            let n: usize = meta.shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            f.seek(SeekFrom::Start(meta.offset))?;
            f.read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("short read for tensor {}", meta.name)))?;
            let vals: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&meta.shape), vals)
                .map_err(|e| Error::Format(format!("tensor shape: {e}")))?;
            out.push((meta.name.clone(), arr));
        }
        Ok(out)
    }
}
