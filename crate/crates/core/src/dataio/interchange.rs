//! `BMOE` container: 4-byte magic, `u32` LE version, `u32` LE header length,
//! a UTF-8 JSON header, then the row-major `f32` LE payload of every block in
//! index order. Block offsets are byte offsets into the payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Block, DataError, Dataset, DatasetMeta, TrialRecord};

pub const MAGIC: &[u8; 4] = b"BMOE";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BlockIndex {
    group: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct TrialIndex {
    subject: u32,
    trial: u32,
    ratings: Vec<f64>,
    blocks: Vec<BlockIndex>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    meta: DatasetMeta,
    subjects: Vec<u32>,
    trials: Vec<TrialIndex>,
}

pub fn encode(ds: &Dataset) -> Result<Vec<u8>, DataError> {
    ds.validate()?;
    let mut offset = 0u64;
    let mut trials = Vec::with_capacity(ds.trials.len());
    for t in &ds.trials {
        let blocks = t
            .blocks
            .iter()
            .map(|b| {
                let idx = BlockIndex {
                    group: b.group.clone(),
                    rows: b.rows,
                    cols: b.cols,
                    offset,
                };
                offset += 4 * b.data.len() as u64;
                idx
            })
            .collect();
        trials.push(TrialIndex {
            subject: t.subject,
            trial: t.trial,
            ratings: t.ratings.clone(),
            blocks,
        });
    }
    let header = Header {
        meta: ds.meta.clone(),
        subjects: ds.subjects(),
        trials,
    };
    let mut out = frame(&header, offset as usize)?;
    for t in &ds.trials {
        for b in &t.blocks {
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    let raw = bytes.get(at..at + 4).ok_or(DataError::Truncated {
        expected: (at + 4) as u64,
        actual: bytes.len() as u64,
    })?;
    Ok(u32::from_le_bytes(raw.try_into().expect("4 bytes")))
}

/// Magic, version and JSON header; the caller appends `payload_len` bytes.
pub(crate) fn frame<H: Serialize>(header: &H, payload_len: usize) -> Result<Vec<u8>, DataError> {
    let json = serde_json::to_vec(header).map_err(|e| DataError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

/// Checks magic and version, parses the header, and returns it with the
/// payload and the payload's start offset.
pub(crate) fn unframe<H: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<(H, &[u8], usize), DataError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = u32_at(bytes, 4)?;
    if version != VERSION {
        return Err(DataError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = u32_at(bytes, 8)? as usize;
    let header_end = 12 + header_len;
    let json = bytes.get(12..header_end).ok_or(DataError::Truncated {
        expected: header_end as u64,
        actual: bytes.len() as u64,
    })?;
    let header = serde_json::from_slice(json).map_err(|e| DataError::Header(e.to_string()))?;
    Ok((header, &bytes[header_end..], header_end))
}

pub fn decode(bytes: &[u8]) -> Result<Dataset, DataError> {
    let (header, payload, header_end): (Header, _, _) = unframe(bytes)?;

    let mut expected = 0u64;
    let mut trials = Vec::with_capacity(header.trials.len());
    for t in header.trials {
        let mut blocks = Vec::with_capacity(t.blocks.len());
        for b in t.blocks {
            if b.offset != expected {
                return Err(DataError::IndexMismatch(format!(
                    "block of trial {}/{} starts at byte {}, expected {}",
                    t.subject, t.trial, b.offset, expected
                )));
            }
            let len = (b.rows as u64)
                .checked_mul(b.cols as u64)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| DataError::IndexMismatch("block size overflows".into()))?;
            expected += len;
            if expected > payload.len() as u64 {
                return Err(DataError::Truncated {
                    expected: header_end as u64 + expected,
                    actual: bytes.len() as u64,
                });
            }
            let raw = &payload[b.offset as usize..expected as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            blocks.push(Block {
                group: b.group,
                rows: b.rows,
                cols: b.cols,
                data,
            });
        }
        trials.push(TrialRecord {
            subject: t.subject,
            trial: t.trial,
            ratings: t.ratings,
            blocks,
        });
    }
    if expected != payload.len() as u64 {
        return Err(DataError::IndexMismatch(format!(
            "index describes {expected} payload bytes but {} are present",
            payload.len()
        )));
    }
    let ds = Dataset {
        meta: header.meta,
        trials,
    };
    if ds.subjects() != header.subjects {
        return Err(DataError::IndexMismatch(
            "subject list disagrees with the trial index".into(),
        ));
    }
    ds.validate()?;
    Ok(ds)
}

pub fn write_interchange(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let bytes = encode(ds)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_interchange(path: &Path) -> Result<Dataset, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
