//! The CIFAR binary distribution: fixed-size records, one label byte
//! (CIFAR-10) or coarse and fine label bytes (CIFAR-100), then 3072
//! channel-major pixel bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, IMAGE_LEN};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + IMAGE_LEN
    }

    fn train_files(self) -> Vec<&'static str> {
        match self {
            CifarVariant::Cifar10 => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            CifarVariant::Cifar100 => vec!["train.bin"],
        }
    }

    fn test_file(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "test_batch.bin",
            CifarVariant::Cifar100 => "test.bin",
        }
    }
}

/// Parses concatenated records. Fine labels become the dataset labels.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Dataset> {
    let (mut pixels, mut labels, mut coarse) = (Vec::new(), Vec::new(), Vec::new());
    append_records(bytes, variant, 0, &mut pixels, &mut labels, &mut coarse)?;
    build(variant, pixels, labels, coarse)
}

fn append_records(
    bytes: &[u8],
    variant: CifarVariant,
    base_offset: usize,
    pixels: &mut Vec<u8>,
    labels: &mut Vec<usize>,
    coarse: &mut Vec<u8>,
) -> Result<()> {
    let rec = variant.record_len();
    if bytes.is_empty() {
        return Err(Error::Truncated {
            offset: base_offset,
            reason: "file holds no records".into(),
        });
    }
    if bytes.len() % rec != 0 {
        let offset = bytes.len() / rec * rec;
        return Err(Error::Truncated {
            offset: base_offset + offset,
            reason: format!("partial record of {} bytes, expected {rec}", bytes.len() - offset),
        });
    }
    let classes = variant.num_classes();
    for record in bytes.chunks_exact(rec) {
        let fine = record[variant.label_bytes() - 1] as usize;
        if fine >= classes {
            return Err(Error::LabelOutOfRange { label: fine, classes });
        }
        if variant == CifarVariant::Cifar100 {
            coarse.push(record[0]);
        }
        labels.push(fine);
        pixels.extend_from_slice(&record[variant.label_bytes()..]);
    }
    Ok(())
}

fn build(variant: CifarVariant, pixels: Vec<u8>, labels: Vec<usize>, coarse: Vec<u8>) -> Result<Dataset> {
    let ds = Dataset::new(variant.num_classes(), pixels, labels)?;
    match variant {
        CifarVariant::Cifar10 => Ok(ds),
        CifarVariant::Cifar100 => ds.with_coarse_labels(coarse),
    }
}

/// Serializes back to the record layout; inverse of [`parse_cifar`].
pub fn cifar_to_bytes(ds: &Dataset, variant: CifarVariant) -> Result<Vec<u8>> {
    if ds.num_classes() != variant.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, {variant:?} has {}",
            ds.num_classes(),
            variant.num_classes()
        )));
    }
    let coarse = match variant {
        CifarVariant::Cifar10 => None,
        CifarVariant::Cifar100 => Some(
            ds.coarse_labels()
                .ok_or_else(|| Error::InvalidArgument("CIFAR-100 records need coarse labels".into()))?,
        ),
    };
    let mut out = Vec::with_capacity(ds.len() * variant.record_len());
    for i in 0..ds.len() {
        if let Some(c) = coarse {
            out.push(c[i]);
        }
        out.push(ds.labels()[i] as u8);
        out.extend_from_slice(ds.raw_image(i));
    }
    Ok(out)
}

fn read_files(paths: &[PathBuf], variant: CifarVariant) -> Result<Dataset> {
    let (mut pixels, mut labels, mut coarse) = (Vec::new(), Vec::new(), Vec::new());
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        append_records(&bytes, variant, 0, &mut pixels, &mut labels, &mut coarse).map_err(|e| match e {
            Error::Truncated { offset, reason } => Error::Truncated {
                offset,
                reason: format!("{}: {reason}", path.display()),
            },
            other => other,
        })?;
    }
    build(variant, pixels, labels, coarse)
}

/// A single record file, or the training split when `path` is the
/// directory of the standard distribution.
pub fn load_cifar(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    if path.is_dir() {
        let files: Vec<PathBuf> = variant.train_files().iter().map(|f| path.join(f)).collect();
        read_files(&files, variant)
    } else {
        read_files(&[path.to_path_buf()], variant)
    }
}

/// `(train, test)` from a distribution directory; the test split is
/// normalized with training statistics.
pub fn load_cifar_splits(dir: &Path, variant: CifarVariant) -> Result<(Dataset, Dataset)> {
    let train = load_cifar(dir, variant)?;
    let test = read_files(&[dir.join(variant.test_file())], variant)?.with_normalization(train.normalization());
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(variant: CifarVariant) -> Vec<u8> {
        let mut bytes = Vec::new();
        for r in 0..2u8 {
            if variant == CifarVariant::Cifar100 {
                bytes.push(19 - r);
            }
            bytes.push(7 + r);
            bytes.extend((0..IMAGE_LEN).map(|i| (i as u8).wrapping_mul(3).wrapping_add(r)));
        }
        bytes
    }

    #[test]
    fn two_record_fixture_round_trips() {
        for variant in [CifarVariant::Cifar10, CifarVariant::Cifar100] {
            let bytes = fixture(variant);
            let ds = parse_cifar(&bytes, variant).unwrap();
            assert_eq!(ds.len(), 2);
            assert_eq!(ds.labels(), &[7, 8]);
            assert_eq!(ds.raw_image(1)[1], 4);
            assert_eq!(cifar_to_bytes(&ds, variant).unwrap(), bytes);
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = fixture(CifarVariant::Cifar10);
        let err = parse_cifar(&bytes[..3073 + 100], CifarVariant::Cifar10).unwrap_err();
        assert!(matches!(err, Error::Truncated { offset: 3073, .. }), "{err}");
    }

    #[test]
    fn label_range_enforced() {
        let mut bytes = fixture(CifarVariant::Cifar10);
        bytes[3073] = 10;
        assert!(matches!(
            parse_cifar(&bytes, CifarVariant::Cifar10),
            Err(Error::LabelOutOfRange { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn directory_splits_load() {
        let dir = tempfile::tempdir().unwrap();
        let variant = CifarVariant::Cifar100;
        std::fs::write(dir.path().join("train.bin"), fixture(variant)).unwrap();
        std::fs::write(dir.path().join("test.bin"), &fixture(variant)[..variant.record_len()]).unwrap();
        let (train, test) = load_cifar_splits(dir.path(), variant).unwrap();
        assert_eq!((train.len(), test.len(), train.num_classes()), (2, 1, 100));
        assert_eq!(test.normalization(), train.normalization());
        assert_eq!(train.coarse_labels(), Some(&[19u8, 18][..]));
    }
}
