//! Per-position training records and the `ADKT` trace file.
//!
//! Layout (little-endian): magic `ADKT`, `u32` record count, `u32` d_model,
//! `u32` vocabulary size, then per record `u32` sequence id, `u32` position,
//! `u32` target, `u8` greedy-match flag, `f32[d_model]` hidden state and
//! `f32[V]` logits. A zero-byte file is an empty dataset.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::container::Reader;
use crate::numerics::{argmax, Tensor};

use super::{toy_transformer_forward, BackboneParams};

pub const TRACE_MAGIC: &[u8; 4] = b"ADKT";

/// One training position: the backbone's state after reading
/// `tokens[..position]` and the token that actually came next.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub hidden: Tensor,
    pub logits: Tensor,
    pub target: u32,
    /// `argmax(logits) == target`, ties resolved toward the lower index.
    pub greedy_match: bool,
    /// Index of `target` within its sequence.
    pub position: u32,
    pub sequence_id: u32,
}

impl TraceRecord {
    /// Builds a record, deriving `greedy_match` from the logits.
    pub fn new(
        hidden: Tensor,
        logits: Tensor,
        target: u32,
        position: u32,
        sequence_id: u32,
    ) -> Self {
        let greedy_match = argmax(logits.data()) == target as usize;
        Self {
            hidden,
            logits,
            target,
            greedy_match,
            position,
            sequence_id,
        }
    }

    pub fn greedy_is_consistent(&self) -> bool {
        self.greedy_match == (argmax(self.logits.data()) == self.target as usize)
    }
}

/// A record whose stored greedy flag disagrees with its logits.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceIssue {
    pub record: usize,
    /// Byte offset of the record's flag within the file.
    pub offset: u64,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceDataset {
    pub records: Vec<TraceRecord>,
    pub issues: Vec<TraceIssue>,
}

/// Encodes records into the trace format. All records must share shapes.
pub fn encode_traces(records: &[TraceRecord]) -> Result<Vec<u8>> {
    let (d, v) = records
        .first()
        .map_or((0, 0), |r| (r.hidden.len(), r.logits.len()));
    let per = 13 + 4 * (d + v);
    let mut buf = Vec::with_capacity(16 + per * records.len());
    buf.extend_from_slice(TRACE_MAGIC);
    for x in [records.len(), d, v] {
        let x = u32::try_from(x).map_err(|_| Error::usage("trace dimension exceeds u32"))?;
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for (i, r) in records.iter().enumerate() {
        if r.hidden.len() != d || r.logits.len() != v {
            return Err(Error::usage(format!(
                "record {i} has shapes ({}, {}), expected ({d}, {v})",
                r.hidden.len(),
                r.logits.len()
            )));
        }
        buf.extend_from_slice(&r.sequence_id.to_le_bytes());
        buf.extend_from_slice(&r.position.to_le_bytes());
        buf.extend_from_slice(&r.target.to_le_bytes());
        buf.push(r.greedy_match as u8);
        for &x in r.hidden.data().iter().chain(r.logits.data()) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_trace_dataset(path: &Path, records: &[TraceRecord]) -> Result<()> {
    fs::write(path, encode_traces(records)?)?;
    Ok(())
}

/// Decodes a trace file. Structural damage (bad magic, truncation,
/// out-of-range targets, non-finite values) is an error; a greedy flag that
/// disagrees with the stored logits is reported in `issues` and the record
/// is kept as stored.
pub fn decode_traces(bytes: &[u8]) -> Result<TraceDataset> {
    if bytes.is_empty() {
        return Ok(TraceDataset::default());
    }
    let mut r = Reader::new(bytes);
    r.magic(TRACE_MAGIC)?;
    let count = r.u32("record count")? as usize;
    let d = r.u32("d_model")? as usize;
    let v = r.u32("vocabulary size")? as usize;
    let per = 13u64 + 4 * (d as u64 + v as u64);
    let remaining = bytes.len() as u64 - r.offset();
    if per * count as u64 > remaining {
        return Err(Error::format(
            r.offset(),
            format!(
                "header promises {count} records of {per} bytes, only {remaining} bytes remain"
            ),
        ));
    }
    let mut out = TraceDataset {
        records: Vec::with_capacity(count),
        issues: Vec::new(),
    };
    for i in 0..count {
        let sequence_id = r.u32("sequence id")?;
        let position = r.u32("position")?;
        let target_at = r.offset();
        let target = r.u32("target")?;
        if target as usize >= v {
            return Err(Error::format(
                target_at,
                format!("record {i}: target {target} out of range for vocabulary {v}"),
            ));
        }
        let flag_at = r.offset();
        let flag = r.u8("greedy flag")?;
        if flag > 1 {
            return Err(Error::format(
                flag_at,
                format!("record {i}: greedy flag {flag}"),
            ));
        }
        let values_at = r.offset();
        let hidden = r.f32s(d, "hidden state")?;
        let logits = r.f32s(v, "logits")?;
        if let Some(k) = hidden.iter().chain(&logits).position(|x| !x.is_finite()) {
            return Err(Error::format(
                values_at + 4 * k as u64,
                format!("record {i}: non-finite value"),
            ));
        }
        let rec = TraceRecord {
            hidden: Tensor::from_vec(hidden),
            logits: Tensor::from_vec(logits),
            target,
            greedy_match: flag == 1,
            position,
            sequence_id,
        };
        if !rec.greedy_is_consistent() {
            out.issues.push(TraceIssue {
                record: i,
                offset: flag_at,
                message: format!(
                    "record {i}: stored greedy flag {} but argmax(logits) is {} and target is {target}",
                    rec.greedy_match,
                    argmax(rec.logits.data())
                ),
            });
        }
        out.records.push(rec);
    }
    if !r.is_done() {
        return Err(Error::format(
            r.offset(),
            "trailing bytes after the last record",
        ));
    }
    Ok(out)
}

pub fn load_trace_dataset(path: &Path) -> Result<TraceDataset> {
    decode_traces(&fs::read(path)?)
}

/// Like [`load_trace_dataset`] but any greedy-flag disagreement is a format
/// error at the flag's byte offset.
pub fn load_trace_dataset_strict(path: &Path) -> Result<Vec<TraceRecord>> {
    let ds = load_trace_dataset(path)?;
    match ds.issues.first() {
        Some(issue) => Err(Error::format(issue.offset, issue.message.clone())),
        None => Ok(ds.records),
    }
}

/// Runs the backbone over each sequence and records every next-token
/// position `1..len`. Sequence ids are `first_id + index`.
pub fn build_traces(
    params: &BackboneParams,
    sequences: &[Vec<u32>],
    first_id: u32,
) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        let (h, l) = toy_transformer_forward(seq, params)?;
        for t in 0..seq.len().saturating_sub(1) {
            out.push(TraceRecord::new(
                Tensor::from_vec(h.row(t).to_vec()),
                Tensor::from_vec(l.row(t).to_vec()),
                seq[t + 1],
                (t + 1) as u32,
                first_id + i as u32,
            ));
        }
    }
    Ok(out)
}
