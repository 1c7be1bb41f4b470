//! Bit-exact binary container for matrices, label vectors, and metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "BCLG"
//! version    u32      1
//! count      u32      number of sections
//! table      count * (name: 8 bytes zero-padded, offset: u64, length: u64)
//! payloads   concatenated section bytes, in table order
//! ```
//!
//! Section payloads:
//! - matrix: rows u32, cols u32, then rows*cols f64 row-major
//! - labels: count u64, then count u32
//! - meta:   UTF-8 `key=value` lines
//!
//! Saving the same sections twice produces byte-identical files; loading
//! preserves unknown sections as opaque bytes, so save . load . save is
//! byte-idempotent.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use std::fs;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"BCLG";
pub const FORMAT_VERSION: u32 = 1;
const NAME_LEN: usize = 8;

/// Ordered collection of named byte sections with typed accessors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    sections: Vec<(String, Vec<u8>)>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn raw(&self, name: &str) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
    }

    pub fn put_raw(&mut self, name: &str, bytes: Vec<u8>) {
        assert!(name.len() <= NAME_LEN, "section name limited to 8 bytes");
        self.sections.push((name.to_string(), bytes));
    }

    pub fn put_matrix(&mut self, name: &str, m: &Matrix) {
        let mut bytes = Vec::with_capacity(8 + m.as_slice().len() * 8);
        bytes.extend_from_slice(&(m.n_rows() as u32).to_le_bytes());
        bytes.extend_from_slice(&(m.n_cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.put_raw(name, bytes);
    }

    pub fn put_labels(&mut self, name: &str, labels: &[u32]) {
        let mut bytes = Vec::with_capacity(8 + labels.len() * 4);
        bytes.extend_from_slice(&(labels.len() as u64).to_le_bytes());
        for l in labels {
            bytes.extend_from_slice(&l.to_le_bytes());
        }
        self.put_raw(name, bytes);
    }

    pub fn put_meta(&mut self, name: &str, text: &str) {
        self.put_raw(name, text.as_bytes().to_vec());
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let bytes = self
            .raw(name)
            .ok_or_else(|| Error::MissingSection(name.to_string()))?;
        if bytes.len() < 8 {
            return Err(Error::Truncated(format!("matrix header of {name}")));
        }
        let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let need = 8 + rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::BadSection(name.to_string(), "dims overflow".into()))?;
        if bytes.len() != need {
            return Err(Error::Truncated(format!(
                "matrix {name}: {} bytes, expected {need}",
                bytes.len()
            )));
        }
        let data: Vec<f64> = bytes[8..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(rows, cols, data)
            .map_err(|e| Error::BadSection(name.to_string(), e.to_string()))
    }

    pub fn labels(&self, name: &str) -> Result<Vec<u32>> {
        let bytes = self
            .raw(name)
            .ok_or_else(|| Error::MissingSection(name.to_string()))?;
        if bytes.len() < 8 {
            return Err(Error::Truncated(format!("labels header of {name}")));
        }
        let count = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let need = 8 + count
            .checked_mul(4)
            .ok_or_else(|| Error::BadSection(name.to_string(), "count overflow".into()))?;
        if bytes.len() != need {
            return Err(Error::Truncated(format!(
                "labels {name}: {} bytes, expected {need}",
                bytes.len()
            )));
        }
        Ok(bytes[8..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn meta(&self, name: &str) -> Result<String> {
        let bytes = self
            .raw(name)
            .ok_or_else(|| Error::MissingSection(name.to_string()))?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| Error::BadSection(name.to_string(), e.to_string()))
    }

    /// Parse a meta section's `key=value` lines.
    pub fn meta_map(&self, name: &str) -> Result<std::collections::BTreeMap<String, String>> {
        let text = self.meta(name)?;
        let mut map = std::collections::BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.to_string(), v.to_string());
            }
        }
        Ok(map)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        let table_start = out.len();
        let payload_start = table_start + self.sections.len() * (NAME_LEN + 16);

        let mut offset = payload_start as u64;
        for (name, bytes) in &self.sections {
            let mut name_bytes = [0u8; NAME_LEN];
            name_bytes[..name.len()].copy_from_slice(name.as_bytes());
            out.extend_from_slice(&name_bytes);
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            offset += bytes.len() as u64;
        }
        for (_, bytes) in &self.sections {
            out.extend_from_slice(bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
        if bytes.len() < 12 {
            return Err(Error::Truncated("header".into()));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::BadVersion(version));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let table_end = 12usize
            .checked_add(count.checked_mul(NAME_LEN + 16).ok_or_else(|| {
                Error::Truncated("section count overflow".into())
            })?)
            .ok_or_else(|| Error::Truncated("section table overflow".into()))?;
        if bytes.len() < table_end {
            return Err(Error::Truncated("section table".into()));
        }

        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let base = 12 + i * (NAME_LEN + 16);
            let raw_name = &bytes[base..base + NAME_LEN];
            let name_end = raw_name
                .iter()
                .position(|&b| b == 0)
                .unwrap_or(NAME_LEN);
            let name = String::from_utf8(raw_name[..name_end].to_vec())
                .map_err(|e| Error::BadSection(format!("#{i}"), e.to_string()))?;
            let offset =
                u64::from_le_bytes(bytes[base + NAME_LEN..base + NAME_LEN + 8].try_into().unwrap());
            let length = u64::from_le_bytes(
                bytes[base + NAME_LEN + 8..base + NAME_LEN + 16]
                    .try_into()
                    .unwrap(),
            );
            let end = offset
                .checked_add(length)
                .ok_or_else(|| Error::Truncated(format!("section {name} range overflow")))?;
            if end > bytes.len() as u64 {
                return Err(Error::Truncated(format!(
                    "section {name} runs past end of file"
                )));
            }
            entries.push((name, offset, length));
        }

        // Reject overlapping byte ranges.
        let mut sorted: Vec<(usize, u64, u64)> = entries
            .iter()
            .enumerate()
            .map(|(i, &(_, off, len))| (i, off, len))
            .collect();
        sorted.sort_by_key(|&(_, off, _)| off);
        for w in sorted.windows(2) {
            let (i, off_a, len_a) = w[0];
            let (j, off_b, _) = w[1];
            if off_a + len_a > off_b {
                return Err(Error::Overlap(
                    entries[i].0.clone(),
                    entries[j].0.clone(),
                ));
            }
        }

        let sections = entries
            .into_iter()
            .map(|(name, off, len)| {
                let payload = bytes[off as usize..(off + len) as usize].to_vec();
                (name, payload)
            })
            .collect();
        Ok(Container { sections })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Container> {
        let bytes = fs::read(path)?;
        Container::from_bytes(&bytes)
    }
}
