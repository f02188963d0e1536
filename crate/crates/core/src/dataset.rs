//! Labeled embedding datasets and the SCPB container.
//!
//! Layout (little-endian, no padding):
//!
//! ```text
//! "SCPB" | version u32 = 1 | D u32 | C u32 | flags u32 | N u64
//! N x ( label u32 | group u32 | D x f32 )
//! ```
//!
//! Flag bit 0 marks group annotations as present; all other bits are reserved
//! and must be zero. An absent group is stored as `0xFFFF_FFFF`.

use std::fs;
use std::path::Path;

use crate::codec::{section_len, Reader};
use crate::error::{Error, FormatError, Result};

pub const MAGIC: &str = "SCPB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4 + 8;
pub const GROUP_ABSENT: u32 = u32::MAX;
const FLAG_GROUPS: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub embedding: Vec<f64>,
    pub label: usize,
    pub group: Option<u32>,
}

/// Immutable collection of `N` records with `D`-dimensional embeddings.
///
/// Embedding values are kept as `f64` but must be representable as finite
/// `f32`, since that is the on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    num_classes: usize,
    records: Vec<EmbeddingRecord>,
    has_groups: bool,
}

impl EmbeddingDataset {
    pub fn new(
        dim: usize,
        num_classes: usize,
        records: Vec<EmbeddingRecord>,
        has_groups: bool,
    ) -> Result<Self> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::InvalidDataset(format!("dimension {dim} out of range")));
        }
        if num_classes < 2 || num_classes > u32::MAX as usize {
            return Err(Error::InvalidDataset(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        for (i, rec) in records.iter().enumerate() {
            if rec.embedding.len() != dim {
                return Err(Error::InvalidDataset(format!(
                    "record {i} has {} components, expected {dim}",
                    rec.embedding.len()
                )));
            }
            if rec
                .embedding
                .iter()
                .any(|x| !x.is_finite() || !(*x as f32).is_finite())
            {
                return Err(Error::InvalidDataset(format!(
                    "record {i} has a non-finite component"
                )));
            }
            if rec.label >= num_classes {
                return Err(Error::InvalidDataset(format!(
                    "record {i} label {} >= {num_classes}",
                    rec.label
                )));
            }
            match rec.group {
                None if has_groups => {
                    return Err(Error::InvalidDataset(format!("record {i} is missing its group")))
                }
                Some(_) if !has_groups => {
                    return Err(Error::InvalidDataset(format!(
                        "record {i} has a group but the dataset has none"
                    )))
                }
                Some(GROUP_ABSENT) => {
                    return Err(Error::InvalidDataset(format!(
                        "record {i} uses the reserved group value"
                    )))
                }
                _ => {}
            }
        }
        Ok(EmbeddingDataset {
            dim,
            num_classes,
            records,
            has_groups,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_groups(&self) -> bool {
        self.has_groups
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &EmbeddingRecord {
        &self.records[index]
    }

    pub fn embedding(&self, index: usize) -> &[f64] {
        &self.records[index].embedding
    }

    pub fn label(&self, index: usize) -> usize {
        self.records[index].label
    }

    /// Record indices grouped by label.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, rec) in self.records.iter().enumerate() {
            out[rec.label].push(i);
        }
        out
    }

    /// Keeps the records at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        EmbeddingDataset {
            dim: self.dim,
            num_classes: self.num_classes,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            has_groups: self.has_groups,
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.records.len() * (8 + 4 * self.dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC.as_bytes());
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        let flags = if self.has_groups { FLAG_GROUPS } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for rec in &self.records {
            out.extend_from_slice(&(rec.label as u32).to_le_bytes());
            out.extend_from_slice(&rec.group.unwrap_or(GROUP_ABSENT).to_le_bytes());
            for &x in &rec.embedding {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let dim_offset = r.offset();
        let dim = r.u32()?;
        if dim == 0 {
            return Err(FormatError::InvalidHeader {
                offset: dim_offset,
                field: "D",
                value: 0,
            });
        }
        let classes_offset = r.offset();
        let num_classes = r.u32()?;
        if num_classes < 2 {
            return Err(FormatError::InvalidHeader {
                offset: classes_offset,
                field: "C",
                value: num_classes as u64,
            });
        }
        let flags_offset = r.offset();
        let flags = r.u32()?;
        if flags & !FLAG_GROUPS != 0 {
            return Err(FormatError::ReservedFlags {
                offset: flags_offset,
                flags,
            });
        }
        let has_groups = flags & FLAG_GROUPS != 0;
        let n = r.u64()?;

        let record_len = 8 + 4 * dim as u64;
        r.require(section_len(n, record_len))?;

        let mut records = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let label_offset = r.offset();
            let label = r.u32()?;
            if label >= num_classes {
                return Err(FormatError::LabelOutOfRange {
                    offset: label_offset,
                    label,
                    num_classes,
                });
            }
            let group_offset = r.offset();
            let raw_group = r.u32()?;
            let group = match (has_groups, raw_group) {
                (false, GROUP_ABSENT) => None,
                (true, g) if g != GROUP_ABSENT => Some(g),
                _ => {
                    return Err(FormatError::GroupMismatch {
                        offset: group_offset,
                        group: raw_group,
                    })
                }
            };
            let embedding = (0..dim)
                .map(|_| r.finite_f32().map(f64::from))
                .collect::<Result<Vec<_>, _>>()?;
            records.push(EmbeddingRecord {
                embedding,
                label: label as usize,
                group,
            });
        }
        r.finish()?;
        Ok(EmbeddingDataset {
            dim: dim as usize,
            num_classes: num_classes as usize,
            records,
            has_groups,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|source| Error::Format {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
