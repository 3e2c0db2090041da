//! `CPLE` feature archives: a 20-byte header then fixed-size records, all
//! little-endian.
//!
//! ```text
//! magic "CPLE" | version u32 | dim u32 | count u64
//! count x { id u64 | label u32 | feature f32[dim] }
//! ```

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use cpl_core::encoder::FeatureSet;
use cpl_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"CPLE";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: u64,
    pub label: u32,
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum ArchiveFormat {
    #[default]
    Binary,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub dim: u32,
    pub records: Vec<Record>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonHeader {
    magic: String,
    version: u32,
    dim: u32,
    count: u64,
}

/// Byte length of a binary archive.
pub fn expected_len(count: u64, dim: u32) -> u64 {
    HEADER_LEN + count * (12 + 4 * dim as u64)
}

fn format_err(offset: u64, detail: impl Into<String>) -> HarnessError {
    HarnessError::Core {
        context: "archive".into(),
        source: CoreError::Format {
            offset,
            detail: detail.into(),
        },
    }
}

impl Archive {
    pub fn new(dim: u32, records: Vec<Record>) -> Result<Self> {
        let a = Self { dim, records };
        a.validate()?;
        Ok(a)
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(HarnessError::Data("archive dim must be positive".into()));
        }
        let mut ids = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if r.feature.len() != self.dim as usize {
                return Err(HarnessError::Data(format!(
                    "record {} has {} values, archive dim {}",
                    r.id,
                    r.feature.len(),
                    self.dim
                )));
            }
            if !ids.insert(r.id) {
                return Err(HarnessError::Data(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(expected_len(self.records.len() as u64, self.dim) as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.id.to_le_bytes());
            out.extend_from_slice(&r.label.to_le_bytes());
            for x in &r.feature {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_LEN as usize {
            return Err(format_err(
                buf.len() as u64,
                format!("truncated header: expected {HEADER_LEN} bytes, found {}", buf.len()),
            ));
        }
        if &buf[0..4] != MAGIC {
            return Err(format_err(0, "bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let dim = u32_at(8);
        if dim == 0 {
            return Err(format_err(8, "dim is zero"));
        }
        let count = u64::from_le_bytes(buf[12..20].try_into().unwrap());
        let want = count
            .checked_mul(12 + 4 * dim as u64)
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| format_err(12, format!("count {count} overflows")))?;
        if want != buf.len() as u64 {
            return Err(format_err(
                buf.len().min(want as usize) as u64,
                format!("expected length {want} bytes for {count} records of dim {dim}, found {}", buf.len()),
            ));
        }
        let stride = 12 + 4 * dim as usize;
        let mut records = Vec::with_capacity(count as usize);
        let mut ids = HashSet::with_capacity(count as usize);
        for (n, chunk) in buf[HEADER_LEN as usize..].chunks_exact(stride).enumerate() {
            let id = u64::from_le_bytes(chunk[0..8].try_into().unwrap());
            if !ids.insert(id) {
                return Err(format_err(
                    HEADER_LEN + (n * stride) as u64,
                    format!("duplicate record id {id}"),
                ));
            }
            let label = u32::from_le_bytes(chunk[8..12].try_into().unwrap());
            let feature = chunk[12..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            records.push(Record { id, label, feature });
        }
        Ok(Self { dim, records })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&JsonHeader {
            magic: "CPLE".into(),
            version: VERSION,
            dim: self.dim,
            count: self.records.len() as u64,
        })
        .expect("header json");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record json"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let bad = |n: usize, e: String| HarnessError::Data(format!("archive line {}: {e}", n + 1));
        let (_, head) = lines
            .next()
            .ok_or_else(|| HarnessError::Data("empty jsonl archive".into()))?;
        let head: JsonHeader = serde_json::from_str(&head.map_err(|e| bad(0, e.to_string()))?)
            .map_err(|e| bad(0, e.to_string()))?;
        if head.magic != "CPLE" || head.version != VERSION {
            return Err(bad(0, "bad magic or version".into()));
        }
        let mut records = Vec::new();
        for (n, line) in lines {
            let line = line.map_err(|e| bad(n, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| bad(n, e.to_string()))?);
        }
        if records.len() as u64 != head.count {
            return Err(HarnessError::Data(format!(
                "header count {} but {} records",
                head.count,
                records.len()
            )));
        }
        Self::new(head.dim, records)
    }

    pub fn write(&self, path: &Path, format: ArchiveFormat) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
        let bytes = match format {
            ArchiveFormat::Binary => self.to_bytes(),
            ArchiveFormat::Jsonl => self.to_jsonl().into_bytes(),
        };
        f.write_all(&bytes).map_err(|e| io_err(path, e))
    }

    /// Reads either format, detected from the first bytes.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        if bytes.first() == Some(&b'{') {
            Self::from_jsonl(BufReader::new(&bytes[..]))
        } else {
            Self::from_bytes(&bytes)
        }
    }

    /// Validated features; fails if `expected_dim` is given and differs.
    pub fn features(&self, expected_dim: Option<usize>) -> Result<FeatureSet<f32>> {
        if let Some(d) = expected_dim {
            if d != self.dim as usize {
                return Err(HarnessError::Data(format!(
                    "archive dim {} does not match configured d_v {d}",
                    self.dim
                )));
            }
        }
        let ids = self.records.iter().map(|r| r.id).collect();
        let labels = self.records.iter().map(|r| r.label).collect();
        let data = self.records.iter().flat_map(|r| r.feature.iter().copied()).collect();
        FeatureSet::new(ids, labels, self.dim as usize, data).map_err(HarnessError::core("archive"))
    }
}
