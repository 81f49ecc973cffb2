//! Multiscale representation encoding and the append-only store file.
//!
//! # File layout (version 1, little-endian)
//!
//! Header, 76 bytes:
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 8  | magic `MSRSTORE` |
//! | 8  | 4  | format version (`u32`, currently 1) |
//! | 12 | 4  | representation width `K` (`u32`) |
//! | 16 | 4  | scale count `S`, 1..=4 (`u32`) |
//! | 20 | 4  | encoder fingerprint (`u32`): CRC-32 of the encoder parameters that produced the records, 0 when unspecified |
//! | 24 | 48 | 4 scale slots of (`u32` scale code, `u64` backcast length); unused slots are (`0xFFFF_FFFF`, 0) |
//! | 72 | 4  | CRC-32 (IEEE) of bytes 0..72 |
//!
//! Scale codes: 0 daily, 1 weekly, 2 monthly, 3 quarterly.
//!
//! Records follow back to back:
//!
//! | size | field |
//! |-----:|-------|
//! | 4 | body length `B` in bytes (`u32`), counting everything below including the CRC |
//! | 2 | series-id length `n` (`u16`) |
//! | n | series id, UTF-8 |
//! | 8 | anchor timestamp (`i64`, epoch seconds) |
//! | 1 | presence mask; bit `i` set when scale slot `i` has a vector |
//! | 8·K per present scale | `f64` payload, slot order |
//! | 4 | CRC-32 of the body bytes preceding it |
//!
//! A later record with the same `(series id, anchor)` supersedes earlier ones.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::TimeSeries;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, Tensor};

pub const MAGIC: &[u8; 8] = b"MSRSTORE";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 76;
pub const MAX_SCALES: usize = 4;
const UNUSED_SLOT: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleName {
    Daily,
    Weekly,
    Monthly,
    Quarterly,
}

impl ScaleName {
    pub const ALL: [ScaleName; 4] = [ScaleName::Daily, ScaleName::Weekly, ScaleName::Monthly, ScaleName::Quarterly];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Calendar span in seconds (months are 30 days, quarters 90).
    pub fn seconds(self) -> i64 {
        const DAY: i64 = 86_400;
        match self {
            ScaleName::Daily => DAY,
            ScaleName::Weekly => 7 * DAY,
            ScaleName::Monthly => 30 * DAY,
            ScaleName::Quarterly => 90 * DAY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSpec {
    pub name: ScaleName,
    /// Backcast window length in rows.
    pub length: usize,
}

/// The four calendar scales expressed in rows of a series sampled every
/// `stride_seconds`.
pub fn scales_for_stride(stride_seconds: i64) -> Result<Vec<ScaleSpec>> {
    if stride_seconds <= 0 {
        return Err(Error::Config(format!("stride must be positive, got {stride_seconds}")));
    }
    ScaleName::ALL
        .iter()
        .map(|&name| {
            let len = name.seconds() / stride_seconds;
            if len < 4 {
                Err(Error::Config(format!(
                    "{name:?} scale spans only {len} rows at stride {stride_seconds}s; at least 4 are needed"
                )))
            } else {
                Ok(ScaleSpec { name, length: len as usize })
            }
        })
        .collect()
}

pub fn validate_scales(scales: &[ScaleSpec]) -> Result<()> {
    if scales.is_empty() || scales.len() > MAX_SCALES {
        return Err(Error::Config(format!("scale table needs 1..={MAX_SCALES} entries, has {}", scales.len())));
    }
    for s in scales {
        if s.length < 4 {
            return Err(Error::Config(format!("{:?} scale length {} is below 4", s.name, s.length)));
        }
    }
    for w in scales.windows(2) {
        if w[1].length < w[0].length || w[1].name <= w[0].name {
            return Err(Error::Config("scale table must list scales in order with non-decreasing lengths".into()));
        }
    }
    Ok(())
}

/// Representations of one `(series, anchor)` at each scale of the table;
/// `None` marks a scale whose window was not covered by history.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiscaleRepresentation {
    pub series_id: String,
    pub anchor: i64,
    pub vectors: Vec<Option<Vec<f64>>>,
}

impl MultiscaleRepresentation {
    pub fn present(&self) -> usize {
        self.vectors.iter().filter(|v| v.is_some()).count()
    }
}

/// Encodes the windows ending at row `anchor_index` for every scale.
///
/// Fails if the longest scale is not covered, naming the first anchor that
/// would be.
pub fn encode_multiscale(
    enc: &Encoder,
    params: &ParameterSet,
    series: &TimeSeries,
    anchor_index: usize,
    scales: &[ScaleSpec],
) -> Result<MultiscaleRepresentation> {
    let longest = scales.iter().map(|s| s.length).max().unwrap_or(0);
    if anchor_index + 1 < longest {
        return Err(insufficient(series, anchor_index, longest));
    }
    encode_available(enc, params, series, anchor_index, scales)
}

/// As [`encode_multiscale`], dropping scales whose window is not covered.
/// Fails only when not even the shortest scale is.
pub fn encode_available(
    enc: &Encoder,
    params: &ParameterSet,
    series: &TimeSeries,
    anchor_index: usize,
    scales: &[ScaleSpec],
) -> Result<MultiscaleRepresentation> {
    if anchor_index >= series.len() {
        return Err(Error::Contract(format!(
            "anchor row {anchor_index} beyond series `{}` of length {}",
            series.series_id,
            series.len()
        )));
    }
    let shortest = scales.iter().map(|s| s.length).min().unwrap_or(0);
    if anchor_index + 1 < shortest {
        return Err(insufficient(series, anchor_index, shortest));
    }
    let mut vectors = Vec::with_capacity(scales.len());
    for s in scales {
        if anchor_index + 1 < s.length {
            vectors.push(None);
            continue;
        }
        let start = anchor_index + 1 - s.length;
        let c = series.channels;
        let window = Tensor::matrix(s.length, c, series.values[start * c..(anchor_index + 1) * c].to_vec())?;
        vectors.push(Some(enc.encode_last(params, &window)?));
    }
    Ok(MultiscaleRepresentation {
        series_id: series.series_id.clone(),
        anchor: series.timestamps[anchor_index],
        vectors,
    })
}

fn insufficient(series: &TimeSeries, anchor_index: usize, needed: usize) -> Error {
    let first = series
        .timestamps
        .get(needed - 1)
        .copied()
        .unwrap_or_else(|| series.timestamps[0] + (needed as i64 - 1) * series.stride().unwrap_or(1));
    Error::InsufficientHistory {
        series: series.series_id.clone(),
        anchor: series.timestamps[anchor_index.min(series.len() - 1)],
        first_anchor: first,
    }
}

/// Append-only file of multiscale representations with an in-memory index.
#[derive(Debug)]
pub struct Store {
    path: PathBuf,
    repr_dim: usize,
    scales: Vec<ScaleSpec>,
    fingerprint: u32,
    bytes: Vec<u8>,
    /// series id → anchor → byte offset of the record's length field
    index: HashMap<String, BTreeMap<i64, usize>>,
    file: Option<File>,
}

fn crc(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

fn encode_header(repr_dim: usize, scales: &[ScaleSpec], fingerprint: u32) -> Vec<u8> {
    let mut h = Vec::with_capacity(HEADER_LEN);
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    h.extend_from_slice(&(repr_dim as u32).to_le_bytes());
    h.extend_from_slice(&(scales.len() as u32).to_le_bytes());
    h.extend_from_slice(&fingerprint.to_le_bytes());
    for slot in 0..MAX_SCALES {
        let (code, len) = scales.get(slot).map_or((UNUSED_SLOT, 0), |s| (s.name.code(), s.length as u64));
        h.extend_from_slice(&code.to_le_bytes());
        h.extend_from_slice(&len.to_le_bytes());
    }
    let c = crc(&h);
    h.extend_from_slice(&c.to_le_bytes());
    h
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

fn decode_header(b: &[u8], path: &Path) -> Result<(usize, Vec<ScaleSpec>, u32)> {
    if b.len() < HEADER_LEN || &b[..8] != MAGIC {
        return Err(Error::Schema(format!("{} is not a representation store", path.display())));
    }
    if crc(&b[..72]) != u32_at(b, 72) {
        return Err(Error::Integrity(format!("{}: header checksum mismatch", path.display())));
    }
    let version = u32_at(b, 8);
    if version != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "{}: store format version {version}, expected {FORMAT_VERSION}",
            path.display()
        )));
    }
    let k = u32_at(b, 12) as usize;
    let count = u32_at(b, 16) as usize;
    if count == 0 || count > MAX_SCALES {
        return Err(Error::Schema(format!("{}: invalid scale count {count}", path.display())));
    }
    let mut scales = Vec::with_capacity(count);
    for slot in 0..count {
        let at = 24 + slot * 12;
        let name = ScaleName::from_code(u32_at(b, at))
            .ok_or_else(|| Error::Schema(format!("{}: unknown scale code in slot {slot}", path.display())))?;
        scales.push(ScaleSpec {
            name,
            length: u64_at(b, at + 4) as usize,
        });
    }
    Ok((k, scales, u32_at(b, 20)))
}

impl Store {
    /// Creates (or truncates) a store file without an encoder fingerprint.
    pub fn create(path: impl AsRef<Path>, repr_dim: usize, scales: &[ScaleSpec]) -> Result<Self> {
        Self::create_with_fingerprint(path, repr_dim, scales, 0)
    }

    /// Creates (or truncates) a store file tagged with the fingerprint of the
    /// encoder that will fill it.
    pub fn create_with_fingerprint(
        path: impl AsRef<Path>,
        repr_dim: usize,
        scales: &[ScaleSpec],
        fingerprint: u32,
    ) -> Result<Self> {
        validate_scales(scales)?;
        if repr_dim == 0 {
            return Err(Error::Config("representation width must be ≥ 1".into()));
        }
        let path = path.as_ref().to_path_buf();
        let bytes = encode_header(repr_dim, scales, fingerprint);
        let mut file = OpenOptions::new().create(true).write(true).truncate(true).open(&path)?;
        file.write_all(&bytes)?;
        file.flush()?;
        Ok(Self {
            path,
            repr_dim,
            scales: scales.to_vec(),
            fingerprint,
            bytes,
            index: HashMap::new(),
            file: Some(file),
        })
    }

    /// Opens an existing store for reading and appending. Record framing
    /// is checked here; payload checksums are checked on every `get`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.clone(),
                hint: "run `encode` to build the representation store".into(),
            });
        }
        let bytes = std::fs::read(&path)?;
        let (repr_dim, scales, fingerprint) = decode_header(&bytes, &path)?;
        let mut index: HashMap<String, BTreeMap<i64, usize>> = HashMap::new();
        let mut at = HEADER_LEN;
        while at < bytes.len() {
            let (id, anchor, end) = Self::frame(&bytes, at)
                .ok_or_else(|| Error::Integrity(format!("{}: truncated record at byte {at}", path.display())))?;
            index.entry(id).or_default().insert(anchor, at);
            at = end;
        }
        let file = OpenOptions::new().append(true).open(&path)?;
        Ok(Self {
            path,
            repr_dim,
            scales,
            fingerprint,
            bytes,
            index,
            file: Some(file),
        })
    }

    /// `(series id, anchor, end offset)` of the record starting at `at`.
    fn frame(b: &[u8], at: usize) -> Option<(String, i64, usize)> {
        let body = u32::from_le_bytes(b.get(at..at + 4)?.try_into().ok()?) as usize;
        let end = at + 4 + body;
        if end > b.len() || body < 2 + 8 + 1 + 4 {
            return None;
        }
        let n = u16::from_le_bytes(b[at + 4..at + 6].try_into().ok()?) as usize;
        if 2 + n + 8 + 1 + 4 > body {
            return None;
        }
        let id = String::from_utf8_lossy(&b[at + 6..at + 6 + n]).into_owned();
        let anchor = i64::from_le_bytes(b[at + 6 + n..at + 14 + n].try_into().ok()?);
        Some((id, anchor, end))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn fingerprint(&self) -> u32 {
        self.fingerprint
    }

    pub fn repr_dim(&self) -> usize {
        self.repr_dim
    }

    pub fn scales(&self) -> &[ScaleSpec] {
        &self.scales
    }

    /// Number of distinct keys.
    pub fn len(&self) -> usize {
        self.index.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn put(&mut self, repr: &MultiscaleRepresentation) -> Result<()> {
        if repr.vectors.len() != self.scales.len() {
            return Err(Error::Schema(format!(
                "record has {} scale slots, store has {}",
                repr.vectors.len(),
                self.scales.len()
            )));
        }
        if let Some(v) = repr.vectors.iter().flatten().find(|v| v.len() != self.repr_dim) {
            return Err(Error::Schema(format!(
                "record vector has width {}, store expects {}",
                v.len(),
                self.repr_dim
            )));
        }
        let id = repr.series_id.as_bytes();
        if id.len() > u16::MAX as usize {
            return Err(Error::Contract("series id longer than 65535 bytes".into()));
        }
        let mut body = Vec::new();
        body.extend_from_slice(&(id.len() as u16).to_le_bytes());
        body.extend_from_slice(id);
        body.extend_from_slice(&repr.anchor.to_le_bytes());
        let mask = repr
            .vectors
            .iter()
            .enumerate()
            .fold(0u8, |m, (i, v)| if v.is_some() { m | (1 << i) } else { m });
        body.push(mask);
        for v in repr.vectors.iter().flatten() {
            for x in v {
                body.extend_from_slice(&x.to_le_bytes());
            }
        }
        let c = crc(&body);
        body.extend_from_slice(&c.to_le_bytes());
        let mut rec = Vec::with_capacity(body.len() + 4);
        rec.extend_from_slice(&(body.len() as u32).to_le_bytes());
        rec.extend_from_slice(&body);
        if let Some(f) = self.file.as_mut() {
            f.write_all(&rec)?;
        }
        let at = self.bytes.len();
        self.bytes.extend_from_slice(&rec);
        self.index.entry(repr.series_id.clone()).or_default().insert(repr.anchor, at);
        Ok(())
    }

    /// Flushes appended records to disk.
    pub fn sync(&mut self) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            f.flush()?;
            f.sync_data()?;
        }
        Ok(())
    }

    pub fn get(&self, series_id: &str, anchor: i64) -> Result<Option<MultiscaleRepresentation>> {
        let Some(&at) = self.index.get(series_id).and_then(|m| m.get(&anchor)) else {
            return Ok(None);
        };
        self.decode_record(at).map(Some)
    }

    fn decode_record(&self, at: usize) -> Result<MultiscaleRepresentation> {
        let b = &self.bytes;
        let corrupt = |what: &str| Error::Integrity(format!("{}: record at byte {at}: {what}", self.path.display()));
        let body_len = u32_at(b, at) as usize;
        let body = &b[at + 4..at + 4 + body_len];
        let (payload, stored) = body.split_at(body_len - 4);
        if crc(payload) != u32::from_le_bytes(stored.try_into().expect("4 bytes")) {
            return Err(corrupt("checksum mismatch"));
        }
        let n = u16::from_le_bytes(payload[0..2].try_into().expect("2 bytes")) as usize;
        let series_id = std::str::from_utf8(&payload[2..2 + n])
            .map_err(|_| corrupt("series id is not UTF-8"))?
            .to_string();
        let anchor = i64::from_le_bytes(payload[2 + n..10 + n].try_into().expect("8 bytes"));
        let mask = payload[10 + n];
        let mut at_v = 11 + n;
        let mut vectors = Vec::with_capacity(self.scales.len());
        for slot in 0..self.scales.len() {
            if mask & (1 << slot) == 0 {
                vectors.push(None);
                continue;
            }
            let end = at_v + 8 * self.repr_dim;
            if end > payload.len() {
                return Err(corrupt("payload shorter than its presence mask"));
            }
            let v = payload[at_v..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            vectors.push(Some(v));
            at_v = end;
        }
        if at_v != payload.len() {
            return Err(corrupt("trailing payload bytes"));
        }
        Ok(MultiscaleRepresentation {
            series_id,
            anchor,
            vectors,
        })
    }

    /// Greatest stored anchor `≤ t` for the series.
    pub fn nearest_anchor(&self, series_id: &str, t: i64) -> Option<i64> {
        self.index.get(series_id)?.range(..=t).next_back().map(|(&a, _)| a)
    }

    /// Stored anchors of a series in increasing order.
    pub fn anchors(&self, series_id: &str) -> Vec<i64> {
        self.index.get(series_id).map(|m| m.keys().copied().collect()).unwrap_or_default()
    }

    /// Verifies every stored record's checksum.
    pub fn verify(&self) -> Result<usize> {
        let mut n = 0;
        let mut offsets: Vec<usize> = self.index.values().flat_map(|m| m.values().copied()).collect();
        offsets.sort_unstable();
        for at in offsets {
            self.decode_record(at)?;
            n += 1;
        }
        Ok(n)
    }
}
