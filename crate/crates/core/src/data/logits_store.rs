//! Teacher logits cached on disk, one row per dataset index.
//!
//! ```text
//! magic    8 bytes  "KDGANLGT"
//! version  u32 LE   1
//! N        u32 LE   rows
//! C        u32 LE   classes
//! payload  N * C    f32 LE, row-major
//! crc32    u32 LE   IEEE CRC-32 of the payload bytes
//! ```
//!
//! Provenance (which teacher produced the rows) is kept in a text sidecar
//! next to the store, `<store>.provenance`.

use std::path::{Path, PathBuf};

use super::{sequential_batches, Dataset};
use crate::architectures::Predictor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"KDGANLGT";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherLogitsStore {
    num_classes: usize,
    rows: Vec<f32>,
    pub provenance: Option<String>,
}

impl TeacherLogitsStore {
    pub fn new(num_classes: usize, rows: Vec<f32>) -> Result<Self> {
        if num_classes == 0 || rows.is_empty() || rows.len() % num_classes != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form rows of {num_classes} logits",
                rows.len()
            )));
        }
        Ok(Self {
            num_classes,
            rows,
            provenance: None,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// `(B, C)` rows for the given dataset indices.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(indices.len() * self.num_classes);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("index {i} out of {} stored rows", self.len())));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(&[indices.len(), self.num_classes], data)
    }

    /// Rejects a store that does not cover `ds` row for row.
    pub fn check_aligned(&self, ds: &Dataset) -> Result<()> {
        if self.len() != ds.len() || self.num_classes != ds.num_classes() {
            return Err(Error::StoreMismatch {
                store: self.len(),
                store_classes: self.num_classes,
                dataset: ds.len(),
                dataset_classes: ds.num_classes(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.rows.len() * 4 + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[HEADER_LEN..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + 4 {
            return Err(Error::Truncated {
                offset: bytes.len(),
                reason: format!("logits store needs at least {} bytes", HEADER_LEN + 4),
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("not a teacher-logits store (bad magic)".into()));
        }
        let word = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
        let version = word(8);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported logits-store version {version}")));
        }
        let (n, c) = (word(12) as usize, word(16) as usize);
        let expected = HEADER_LEN + n * c * 4 + 4;
        if bytes.len() != expected {
            return Err(Error::Truncated {
                offset: bytes.len().min(expected),
                reason: format!("header promises {n} x {c} logits ({expected} bytes), file has {}", bytes.len()),
            });
        }
        let payload = &bytes[HEADER_LEN..expected - 4];
        let stored = word(expected - 4);
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        let rows = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::new(c, rows)
    }

    pub fn provenance_path(path: &Path) -> PathBuf {
        let mut name = path.as_os_str().to_owned();
        name.push(".provenance");
        PathBuf::from(name)
    }

    /// Writes the store and, when known, its provenance sidecar.
    pub fn save(&self, path: &Path) -> Result<Vec<PathBuf>> {
        std::fs::write(path, self.to_bytes())?;
        let mut written = vec![path.to_path_buf()];
        if let Some(p) = &self.provenance {
            let side = Self::provenance_path(path);
            std::fs::write(&side, format!("{p}\n"))?;
            written.push(side);
        }
        Ok(written)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut store = Self::from_bytes(&std::fs::read(path)?)?;
        let side = Self::provenance_path(path);
        if side.exists() {
            store.provenance = Some(std::fs::read_to_string(side)?.trim_end().to_string());
        }
        Ok(store)
    }
}

/// Runs every image of `ds`, un-augmented and in index order, through the
/// teacher's eval-mode forward.
pub fn export_teacher_logits(
    teacher: &mut dyn Predictor,
    ds: &Dataset,
    batch_size: usize,
) -> Result<TeacherLogitsStore> {
    if teacher.num_classes() != ds.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "teacher predicts {} classes, dataset has {}",
            teacher.num_classes(),
            ds.num_classes()
        )));
    }
    let order: Vec<usize> = (0..ds.len()).collect();
    let mut rows = Vec::with_capacity(ds.len() * ds.num_classes());
    for idx in sequential_batches(&order, batch_size) {
        let batch = ds.batch(&idx, None)?;
        let logits = teacher.predict(&batch.images, &batch.labels, &batch.indices)?;
        if !logits.is_finite() {
            return Err(Error::NonFinite("teacher logits".into()));
        }
        rows.extend_from_slice(logits.data());
    }
    TeacherLogitsStore::new(ds.num_classes(), rows)
}
