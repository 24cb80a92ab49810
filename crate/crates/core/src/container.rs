//! Binary container for named float matrices.
//!
//! One format serves both effect caches and model checkpoints:
//!
//! ```text
//! [0..4)    magic "CESC"
//! [4..8)    format version, u32 little-endian
//! [8]       float width in bytes (8)
//! [9..12)   reserved, zero
//! [12..20)  meta length, u64 little-endian
//! ...       meta JSON (arbitrary document: config, dims, relation order)
//! ...       matrix payloads, f64 little-endian, in index order
//! ...       index JSON: [{"name", "rows", "cols", "offset"}, ...]
//! [-8..]    index length, u64 little-endian
//! ```
//!
//! Reads and writes are bit-exact round trips: payloads are raw IEEE f64
//! little-endian bytes, so a value survives unchanged to the last bit.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"CESC";
pub const FORMAT_VERSION: u32 = 1;
pub const FLOAT_WIDTH: u8 = 8;

/// A named dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if data.len() != rows * cols {
            return Err(Error::Usage(format!(
                "matrix '{name}': {} values do not fill {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix {
            name,
            rows,
            cols,
            data,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

/// A fully loaded container.
#[derive(Debug, Clone)]
pub struct Container {
    pub meta: serde_json::Value,
    matrices: Vec<Matrix>,
}

impl Container {
    pub fn matrices(&self) -> &[Matrix] {
        &self.matrices
    }

    pub fn matrix(&self, name: &str) -> Option<&Matrix> {
        self.matrices.iter().find(|m| m.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.matrix(name)
            .ok_or_else(|| Error::Format(format!("container is missing matrix '{name}'")))
    }
}

/// Serialize matrices plus a metadata document to `path`.
pub fn write_container(
    path: &Path,
    meta: &serde_json::Value,
    matrices: &[Matrix],
) -> Result<()> {
    for (i, m) in matrices.iter().enumerate() {
        if matrices[..i].iter().any(|o| o.name == m.name) {
            return Err(Error::Usage(format!(
                "duplicate matrix name '{}' in container",
                m.name
            )));
        }
    }
    let meta_bytes = serde_json::to_vec(meta)?;
    let mut header = Vec::with_capacity(20 + meta_bytes.len());
    header.extend_from_slice(&MAGIC);
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    header.push(FLOAT_WIDTH);
    header.extend_from_slice(&[0u8; 3]);
    header.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    header.extend_from_slice(&meta_bytes);

    let mut index = Vec::with_capacity(matrices.len());
    let mut offset = header.len() as u64;
    for m in matrices {
        index.push(IndexEntry {
            name: m.name.clone(),
            rows: m.rows,
            cols: m.cols,
            offset,
        });
        offset += (m.data.len() * 8) as u64;
    }
    let index_bytes = serde_json::to_vec(&index)?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(&header)?;
    for m in matrices {
        let mut buf = Vec::with_capacity(m.data.len() * 8);
        for v in &m.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf)?;
    }
    file.write_all(&index_bytes)?;
    file.write_all(&(index_bytes.len() as u64).to_le_bytes())?;
    Ok(())
}

/// Load a container, validating magic, version, width, and length fields.
pub fn read_container(path: &Path) -> Result<Container> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let truncated = || Error::Format(format!("truncated container: {}", path.display()));

    if bytes.len() < 20 {
        return Err(truncated());
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic in {}: expected \"CESC\"",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "container version mismatch: file has {version}, reader supports {FORMAT_VERSION}"
        )));
    }
    if bytes[8] != FLOAT_WIDTH {
        return Err(Error::Format(format!(
            "unsupported float width {}: expected {FLOAT_WIDTH}",
            bytes[8]
        )));
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let meta_end = 20usize.checked_add(meta_len).ok_or_else(truncated)?;
    if bytes.len() < meta_end + 8 {
        return Err(truncated());
    }
    let meta: serde_json::Value = serde_json::from_slice(&bytes[20..meta_end])
        .map_err(|e| Error::Format(format!("container meta is not valid JSON: {e}")))?;

    let index_len =
        u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()) as usize;
    let index_start = bytes
        .len()
        .checked_sub(8 + index_len)
        .ok_or_else(truncated)?;
    if index_start < meta_end {
        return Err(truncated());
    }
    let index: Vec<IndexEntry> = serde_json::from_slice(&bytes[index_start..bytes.len() - 8])
        .map_err(|e| Error::Format(format!("container index is not valid JSON: {e}")))?;

    let mut matrices = Vec::with_capacity(index.len());
    for e in index {
        let n = e.rows * e.cols;
        let start = e.offset as usize;
        let end = start
            .checked_add(n * 8)
            .filter(|end| *end <= index_start)
            .ok_or_else(truncated)?;
        let mut data = Vec::with_capacity(n);
        for chunk in bytes[start..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        matrices.push(Matrix {
            name: e.name,
            rows: e.rows,
            cols: e.cols,
            data,
        });
    }
    Ok(Container {
        meta,
        matrices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (serde_json::Value, Vec<Matrix>) {
        let meta = serde_json::json!({"kind": "test", "dim": 3});
        let ms = vec![
            Matrix::new("a", 2, 3, vec![1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 1e300])
                .unwrap(),
            Matrix::new("b/nested.name", 1, 1, vec![-0.0]).unwrap(),
        ];
        (meta, ms)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cesc");
        let (meta, ms) = sample();
        write_container(&path, &meta, &ms).unwrap();
        let c = read_container(&path).unwrap();
        assert_eq!(c.meta, meta);
        assert_eq!(c.matrices().len(), 2);
        for (orig, got) in ms.iter().zip(c.matrices()) {
            assert_eq!(orig.name, got.name);
            assert_eq!((orig.rows, orig.cols), (got.rows, got.cols));
            for (x, y) in orig.data.iter().zip(&got.data) {
                assert_eq!(x.to_bits(), y.to_bits(), "payload must be bit-exact");
            }
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cesc");
        let (meta, ms) = sample();
        write_container(&path, &meta, &ms).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.cesc");
        std::fs::write(&cut, &bytes[..bytes.len() - 13]).unwrap();
        let err = read_container(&cut).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cesc");
        let (meta, ms) = sample();
        write_container(&path, &meta, &ms).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9; // bump the version field
        std::fs::write(&path, &bytes).unwrap();
        let err = read_container(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('9') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cesc");
        std::fs::write(&path, b"NOPEnope_and_more_padding_bytes_here").unwrap();
        let err = read_container(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn duplicate_names_are_rejected_at_write_time() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cesc");
        let m1 = Matrix::new("same", 1, 1, vec![1.0]).unwrap();
        let m2 = Matrix::new("same", 1, 1, vec![2.0]).unwrap();
        let err = write_container(&path, &serde_json::json!({}), &[m1, m2]).unwrap_err();
        assert!(err.to_string().contains("same"), "{err}");
    }
}
