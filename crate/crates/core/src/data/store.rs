//! `CIPE` embedding files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CIPE" | version u32 (=1) | N u64 | d u32 | flags u8
//! N·d f32, row-major
//! if flags & 1: N u32 labels
//! if flags & 2: N × (u32 byte length, UTF-8 bytes) ids
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const STORE_MAGIC: [u8; 4] = *b"CIPE";
pub const STORE_VERSION: u32 = 1;

const FLAG_LABELS: u8 = 1;
const FLAG_IDS: u8 = 2;

/// `N × d` embedding matrix with optional labels and ids.
///
/// Values are held as `f64` but are always representable as `f32`, so
/// saving and loading reproduces them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    vectors: Matrix,
    labels: Option<Vec<u32>>,
    ids: Option<Vec<String>>,
}

impl EmbeddingStore {
    /// Builds a store, rounding every value through `f32`.
    pub fn new(vectors: Matrix, labels: Option<Vec<u32>>, ids: Option<Vec<String>>) -> Result<Self> {
        if vectors.rows() == 0 || vectors.cols() == 0 {
            return Err(Error::EmptyDataset);
        }
        if let Some(l) = &labels {
            if l.len() != vectors.rows() {
                return Err(Error::LabelLengthMismatch {
                    labels: l.len(),
                    rows: vectors.rows(),
                });
            }
        }
        if let Some(ids) = &ids {
            if ids.len() != vectors.rows() {
                return Err(Error::LengthMismatch {
                    left: ids.len(),
                    right: vectors.rows(),
                });
            }
            let mut seen = HashSet::with_capacity(ids.len());
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(Error::DuplicateId(id.clone()));
                }
            }
        }
        let narrowed = vectors.map(|x| x as f32 as f64);
        if !narrowed.is_finite() {
            return Err(Error::NonFinite("embedding values (f32 overflow)"));
        }
        Ok(Self {
            vectors: narrowed,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    /// Labels as class indices, or `ConfigInvalid` when the store has none.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .as_ref()
            .map(|l| l.iter().map(|&y| y as usize).collect())
            .ok_or_else(|| Error::ConfigInvalid("embedding store has no labels".into()))
    }

    /// Sub-store made of rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            self.vectors.select_rows(idx),
            self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            self.ids.as_ref().map(|v| idx.iter().map(|&i| v[i].clone()).collect()),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = self.vectors.shape();
        let mut out = Vec::with_capacity(21 + n * d * 4);
        out.extend_from_slice(&STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        let mut flags = 0u8;
        if self.labels.is_some() {
            flags |= FLAG_LABELS;
        }
        if self.ids.is_some() {
            flags |= FLAG_IDS;
        }
        out.push(flags);
        for &x in self.vectors.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for &y in labels {
                out.extend_from_slice(&y.to_le_bytes());
            }
        }
        if let Some(ids) = &self.ids {
            for id in ids {
                out.extend_from_slice(&(id.len() as u32).to_le_bytes());
                out.extend_from_slice(id.as_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != STORE_MAGIC {
            return Err(Error::BadMagic {
                expected: STORE_MAGIC,
                found: magic,
            });
        }
        let version = r.u32("version")?;
        if version != STORE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = r.u64("count")? as usize;
        let d = r.u32("dimension")? as usize;
        let flags = r.take(1, "flags")?[0];
        if flags & !(FLAG_LABELS | FLAG_IDS) != 0 {
            return Err(Error::ConfigInvalid(format!("unknown flag bits {flags:#04x}")));
        }
        let total = n
            .checked_mul(d)
            .filter(|&t| t.checked_mul(4).is_some_and(|b| b <= r.remaining()))
            .ok_or(Error::TruncatedFile("vectors"))?;
        let raw = r.take(total * 4, "vectors")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let vectors = Matrix::new(n, d, data)?;
        let labels = if flags & FLAG_LABELS != 0 {
            let raw = r.take(n * 4, "labels")?;
            Some(
                raw.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        } else {
            None
        };
        let ids = if flags & FLAG_IDS != 0 {
            let mut ids = Vec::with_capacity(n);
            for _ in 0..n {
                let len = r.u32("id length")? as usize;
                let s = r.take(len, "id bytes")?;
                let s = std::str::from_utf8(s)
                    .map_err(|e| Error::ConfigInvalid(format!("id is not UTF-8: {e}")))?;
                ids.push(s.to_owned());
            }
            Some(ids)
        } else {
            None
        };
        if r.remaining() != 0 {
            return Err(Error::ConfigInvalid(format!(
                "{} trailing bytes after embedding store",
                r.remaining()
            )));
        }
        Self::new(vectors, labels, ids)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::TruncatedFile(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
