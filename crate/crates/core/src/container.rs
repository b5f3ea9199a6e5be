//! On-disk container: one UTF-8 JSON header line followed by a contiguous
//! little-endian 64-bit float payload (row-major for matrices).
//!
//! The header declares the artifact kind, arbitrary kind-specific metadata,
//! the named payload sections in order, and a SHA-256 checksum of the raw
//! payload bytes. Load verifies the checksum, so round-trips are bit-exact
//! or loudly broken.

use crate::error::{ForgeError, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &str = "FORGE1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    sections: Vec<SectionDesc>,
    payload_sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SectionDesc {
    name: String,
    len: usize,
}

/// A loaded or to-be-written container.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    sections: Vec<(String, Vec<f64>)>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.to_string(),
            meta,
            sections: Vec::new(),
        }
    }

    pub fn push_section(&mut self, name: &str, data: Vec<f64>) {
        self.sections.push((name.to_string(), data));
    }

    pub fn section(&self, name: &str) -> Result<&[f64]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
            .ok_or_else(|| ForgeError::FormatError(format!("missing section '{name}'")))
    }

    pub fn meta_typed<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.meta.clone())
            .map_err(|e| ForgeError::FormatError(format!("bad container metadata: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut descs = Vec::new();
        for (name, data) in &self.sections {
            descs.push(SectionDesc {
                name: name.clone(),
                len: data.len(),
            });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut hasher = Sha256::new();
        hasher.update(&payload);
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            sections: descs,
            payload_sha256: hex(&hasher.finalize()),
        };
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(
            serde_json::to_string(&header)
                .expect("header serializes")
                .as_bytes(),
        );
        out.push(b'\n');
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let first_nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ForgeError::FormatError("missing magic line".into()))?;
        if &bytes[..first_nl] != MAGIC.as_bytes() {
            return Err(ForgeError::FormatError("bad magic".into()));
        }
        let rest = &bytes[first_nl + 1..];
        let second_nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ForgeError::FormatError("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&rest[..second_nl])
            .map_err(|e| ForgeError::FormatError(format!("bad header: {e}")))?;
        let payload = &rest[second_nl + 1..];
        let mut hasher = Sha256::new();
        hasher.update(payload);
        if hex(&hasher.finalize()) != header.payload_sha256 {
            return Err(ForgeError::FormatError("payload checksum mismatch".into()));
        }
        let expect: usize = header.sections.iter().map(|s| s.len).sum();
        if payload.len() != expect * 8 {
            return Err(ForgeError::FormatError(format!(
                "payload length {} != declared {}",
                payload.len(),
                expect * 8
            )));
        }
        let mut sections = Vec::new();
        let mut off = 0usize;
        for desc in &header.sections {
            let mut data = Vec::with_capacity(desc.len);
            for _ in 0..desc.len {
                let mut buf = [0u8; 8];
                buf.copy_from_slice(&payload[off..off + 8]);
                data.push(f64::from_le_bytes(buf));
                off += 8;
            }
            sections.push((desc.name.clone(), data));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn matrix_to_rowmajor(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn rowmajor_to_matrix(rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(ForgeError::ShapeError(format!(
            "expected {}x{}={} values, got {}",
            rows,
            cols,
            rows * cols,
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = crate::rng::stream(11, "container", 0);
        let data: Vec<f64> = (0..257).map(|_| rng.gen::<f64>() * 1e6 - 5e5).collect();
        let mut c = Container::new("matrix", serde_json::json!({"rows": 1, "cols": 257}));
        c.push_section("values", data.clone());
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.kind, "matrix");
        let loaded = back.section("values").unwrap();
        for (a, b) in data.iter().zip(loaded) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // serialization is itself deterministic
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let mut c = Container::new("matrix", serde_json::json!({}));
        c.push_section("values", vec![1.0, 2.0, 3.0]);
        let mut bytes = c.to_bytes();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        assert!(Container::from_bytes(&bytes).is_err());
    }
}
