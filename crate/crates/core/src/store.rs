//! Embedding store: a flat little-endian binary payload of per-segment
//! frame sequences plus a JSON manifest sidecar with the same file stem.
//!
//! Binary layout:
//!
//! ```text
//! header  "EMBS" | u32 version=1 | u32 dim | u32 dtype (0 = f32 LE) | u64 record count
//! record  u64 segment_id | u32 frames | frames*dim f32
//! ```

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

pub const MAGIC: &[u8; 4] = b"EMBS";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
pub const HEADER_LEN: u64 = 24;
pub const STORE_EXTENSION: &str = "embs";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("dimension mismatch: expected {expected}, found {found} (segment {segment_id})")]
    DimMismatch {
        expected: usize,
        found: usize,
        segment_id: u64,
    },
    #[error("non-finite value in segment {segment_id} at flat index {index}")]
    NonFiniteValue { segment_id: u64, index: usize },
    #[error("sequence has no frames")]
    EmptySequence,
    #[error("manifest inconsistent with payload: {0}")]
    Manifest(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Frame-major `frames x dim` embedding matrix for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub segment_id: u64,
    frames: usize,
    dim: usize,
    values: Vec<f32>,
}

impl EmbeddingSequence {
    pub fn new(segment_id: u64, frames: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if frames == 0 {
            return Err(StoreError::EmptySequence);
        }
        if values.len() != frames * dim {
            return Err(StoreError::DimMismatch {
                expected: frames * dim,
                found: values.len(),
                segment_id,
            });
        }
        Ok(Self {
            segment_id,
            frames,
            dim,
            values,
        })
    }

    /// Converts `f64` rows to storage precision.
    pub fn from_rows_f64<R: AsRef<[f64]>>(segment_id: u64, rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(StoreError::DimMismatch {
                    expected: dim,
                    found: r.len(),
                    segment_id,
                });
            }
            values.extend(r.iter().map(|&v| v as f32));
        }
        Self::new(segment_id, rows.len(), dim, values)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Rows widened to `f64`, flattened frame-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }
}

/// `time x spec x dim` grid as produced by patch-based encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrid {
    pub segment_id: u64,
    time: usize,
    spec: usize,
    dim: usize,
    values: Vec<f32>,
}

impl EmbeddingGrid {
    pub fn new(segment_id: u64, time: usize, spec: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if time == 0 || spec == 0 {
            return Err(StoreError::EmptySequence);
        }
        if values.len() != time * spec * dim {
            return Err(StoreError::DimMismatch {
                expected: time * spec * dim,
                found: values.len(),
                segment_id,
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFiniteValue { segment_id, index });
        }
        Ok(Self {
            segment_id,
            time,
            spec,
            dim,
            values,
        })
    }

    /// Reinterprets a flattened (time outer, spec inner) sequence.
    pub fn from_flattened(seq: &EmbeddingSequence, spec: usize) -> Result<Self> {
        if spec == 0 || seq.frames() % spec != 0 {
            return Err(StoreError::Manifest(format!(
                "segment {} has {} rows, not a multiple of {spec} spectral patches",
                seq.segment_id,
                seq.frames()
            )));
        }
        Self::new(seq.segment_id, seq.frames() / spec, spec, seq.dim(), seq.values.clone())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.time, self.spec, self.dim)
    }

    fn cell(&self, t: usize, f: usize) -> &[f32] {
        let start = (t * self.spec + f) * self.dim;
        &self.values[start..start + self.dim]
    }
}

/// How a grid collapses into a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridAggregation {
    /// Flatten, time outer and spectral patch inner.
    #[serde(rename = "time+spec")]
    TimeSpec,
    /// Average over spectral patches: one row per time step.
    #[serde(rename = "time")]
    Time,
    /// Average over time: one row per spectral patch, no temporal order.
    #[serde(rename = "spec")]
    Spec,
}

impl GridAggregation {
    pub fn is_temporal(self) -> bool {
        !matches!(self, GridAggregation::Spec)
    }
}

impl std::str::FromStr for GridAggregation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "time+spec" => Ok(Self::TimeSpec),
            "time" => Ok(Self::Time),
            "spec" => Ok(Self::Spec),
            other => Err(format!("unknown grid aggregation '{other}'")),
        }
    }
}

/// Collapses a grid into `rows x dim` frames. Averages are formed in `f64`
/// and kept there, so the pooled grand mean is the same for every mode.
pub fn grid_aggregate(g: &EmbeddingGrid, mode: GridAggregation) -> Matrix {
    let (t, f, d) = g.shape();
    match mode {
        GridAggregation::TimeSpec => Matrix::from_vec(t * f, d, g.values.iter().map(|&v| v as f64).collect()),
        GridAggregation::Time => {
            let mut out = Matrix::zeros(t, d);
            for ti in 0..t {
                let row = out.row_mut(ti);
                for fi in 0..f {
                    row.iter_mut().zip(g.cell(ti, fi)).for_each(|(a, &v)| *a += v as f64);
                }
                row.iter_mut().for_each(|a| *a /= f as f64);
            }
            out
        }
        GridAggregation::Spec => {
            let mut out = Matrix::zeros(f, d);
            for fi in 0..f {
                let row = out.row_mut(fi);
                for ti in 0..t {
                    row.iter_mut().zip(g.cell(ti, fi)).for_each(|(a, &v)| *a += v as f64);
                }
                row.iter_mut().for_each(|a| *a /= t as f64);
            }
            out
        }
    }
}

/// Arithmetic mean over frames, accumulated in `f64`.
pub fn mean_pool(seq: &EmbeddingSequence) -> Result<Vec<f64>> {
    if seq.frames == 0 {
        return Err(StoreError::EmptySequence);
    }
    let mut acc = vec![0f64; seq.dim];
    for t in 0..seq.frames {
        acc.iter_mut().zip(seq.row(t)).for_each(|(a, &v)| *a += v as f64);
    }
    let n = seq.frames as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub id: u64,
    pub label: usize,
    #[serde(default)]
    pub fold: Option<usize>,
    pub recording_id: String,
    pub start: f64,
    pub end: f64,
    pub frames: usize,
    /// Every class annotated inside the segment, used for any-overlap accuracy.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overlapping: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub version: u32,
    pub dim: usize,
    pub dtype: String,
    pub layer_tag: String,
    /// False when row order carries no temporal meaning.
    pub temporal: bool,
    pub classes: Vec<String>,
    pub segments: Vec<SegmentEntry>,
    /// Set when each record is a flattened grid with this many spectral
    /// patches per time step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_patches: Option<usize>,
}

impl StoreManifest {
    pub fn new(dim: usize, layer_tag: impl Into<String>, temporal: bool, classes: Vec<String>) -> Self {
        Self {
            version: FORMAT_VERSION,
            dim,
            dtype: "f32".into(),
            layer_tag: layer_tag.into(),
            temporal,
            classes,
            segments: Vec::new(),
            grid_patches: None,
        }
    }

    fn check_header(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(StoreError::Manifest(format!("unsupported version {}", self.version)));
        }
        if self.dtype != "f32" {
            return Err(StoreError::Manifest(format!("unsupported dtype '{}'", self.dtype)));
        }
        let mut ids = BTreeSet::new();
        for s in &self.segments {
            if !ids.insert(s.id) {
                return Err(StoreError::Manifest(format!("duplicate segment id {}", s.id)));
            }
        }
        Ok(())
    }
}

/// Sidecar manifest path: same stem, `.json` extension.
pub fn manifest_path(store: &Path) -> PathBuf {
    store.with_extension("json")
}

/// Writes the payload and its manifest. The manifest's segment table must
/// list the sequences in payload order.
pub fn write_store(path: impl AsRef<Path>, sequences: &[EmbeddingSequence], manifest: &StoreManifest) -> Result<()> {
    let path = path.as_ref();
    manifest.check_header()?;
    if manifest.segments.len() != sequences.len() {
        return Err(StoreError::Manifest(format!(
            "{} manifest entries for {} sequences",
            manifest.segments.len(),
            sequences.len()
        )));
    }
    for (seq, entry) in sequences.iter().zip(&manifest.segments) {
        if seq.dim != manifest.dim {
            return Err(StoreError::DimMismatch {
                expected: manifest.dim,
                found: seq.dim,
                segment_id: seq.segment_id,
            });
        }
        if seq.segment_id != entry.id || seq.frames != entry.frames {
            return Err(StoreError::Manifest(format!(
                "sequence {} ({} frames) does not match entry {} ({} frames)",
                seq.segment_id, seq.frames, entry.id, entry.frames
            )));
        }
        if let Some(index) = seq.first_non_finite() {
            return Err(StoreError::NonFiniteValue {
                segment_id: seq.segment_id,
                index,
            });
        }
    }

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(manifest.dim as u32).to_le_bytes())?;
    w.write_all(&DTYPE_F32.to_le_bytes())?;
    w.write_all(&(sequences.len() as u64).to_le_bytes())?;
    for seq in sequences {
        w.write_all(&seq.segment_id.to_le_bytes())?;
        w.write_all(&(seq.frames as u32).to_le_bytes())?;
        for v in &seq.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    std::fs::write(manifest_path(path), serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

/// Streaming reader over a store's records, validated against its manifest.
pub struct StoreReader {
    inner: BufReader<File>,
    manifest: StoreManifest,
    offset: u64,
    count: u64,
    next: u64,
}

impl StoreReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest: StoreManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path(path))?)?;
        manifest.check_header()?;
        let mut reader = Self {
            inner: BufReader::new(File::open(path)?),
            manifest,
            offset: 0,
            count: 0,
            next: 0,
        };
        let mut magic = [0u8; 4];
        reader.fill(&mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(StoreError::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}"),
            });
        }
        let version = reader.read_u32("version")?;
        if version != FORMAT_VERSION {
            return Err(StoreError::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let dim = reader.read_u32("dim")? as usize;
        let dtype = reader.read_u32("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(StoreError::Format {
                offset: 12,
                msg: format!("unsupported dtype code {dtype}"),
            });
        }
        reader.count = reader.read_u64("record count")?;
        if dim != reader.manifest.dim {
            return Err(StoreError::DimMismatch {
                expected: reader.manifest.dim,
                found: dim,
                segment_id: 0,
            });
        }
        if reader.count != reader.manifest.segments.len() as u64 {
            return Err(StoreError::Manifest(format!(
                "payload holds {} records, manifest lists {}",
                reader.count,
                reader.manifest.segments.len()
            )));
        }
        Ok(reader)
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn record_count(&self) -> u64 {
        self.count
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => Err(StoreError::Format {
                offset: self.offset,
                msg: format!("truncated while reading {what}"),
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn read_record(&mut self) -> Result<EmbeddingSequence> {
        let record_start = self.offset;
        let segment_id = self.read_u64("segment id")?;
        let frames = self.read_u32("frame count")? as usize;
        let entry = &self.manifest.segments[self.next as usize];
        if entry.id != segment_id || entry.frames != frames {
            return Err(StoreError::Format {
                offset: record_start,
                msg: format!(
                    "record {} is segment {segment_id} with {frames} frames, manifest expects {} with {}",
                    self.next, entry.id, entry.frames
                ),
            });
        }
        if frames == 0 {
            return Err(StoreError::Format {
                offset: record_start,
                msg: format!("segment {segment_id} has zero frames"),
            });
        }
        let dim = self.manifest.dim;
        let mut bytes = vec![0u8; frames * dim * 4];
        self.fill(&mut bytes, "frame values")?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let seq = EmbeddingSequence {
            segment_id,
            frames,
            dim,
            values,
        };
        if let Some(index) = seq.first_non_finite() {
            return Err(StoreError::NonFiniteValue { segment_id, index });
        }
        self.next += 1;
        Ok(seq)
    }

    fn check_trailing(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(StoreError::Format {
                offset: self.offset,
                msg: "trailing bytes after last record".into(),
            }),
        }
    }
}

impl Iterator for StoreReader {
    type Item = Result<EmbeddingSequence>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.count {
            if self.next == self.count {
                // report trailing garbage once
                self.next += 1;
                return self.check_trailing().err().map(Err);
            }
            return None;
        }
        let rec = self.read_record();
        if rec.is_err() {
            self.next = self.count + 1;
        }
        Some(rec)
    }
}

/// Loads a whole store.
pub fn read_store(path: impl AsRef<Path>) -> Result<(Vec<EmbeddingSequence>, StoreManifest)> {
    let mut reader = StoreReader::open(path)?;
    let manifest = reader.manifest.clone();
    let sequences = reader.by_ref().collect::<Result<Vec<_>>>()?;
    Ok((sequences, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(id: u64, frames: usize) -> SegmentEntry {
        SegmentEntry {
            id,
            label: (id % 2) as usize,
            fold: Some(0),
            recording_id: format!("r{id}"),
            start: 0.0,
            end: 1.0,
            frames,
            overlapping: vec![],
        }
    }

    fn fixture() -> (Vec<EmbeddingSequence>, StoreManifest) {
        let mut manifest = StoreManifest::new(4, "final", true, vec!["a".into(), "b".into()]);
        let mut seqs = Vec::new();
        for (id, t) in [(3u64, 1usize), (7, 5), (11, 9)] {
            let values = (0..t * 4).map(|i| i as f32 * 0.25 - id as f32).collect();
            seqs.push(EmbeddingSequence::new(id, t, 4, values).unwrap());
            manifest.segments.push(entry(id, t));
        }
        (seqs, manifest)
    }

    #[test]
    fn roundtrip_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.embs");
        let (seqs, manifest) = fixture();
        write_store(&p, &seqs, &manifest).unwrap();
        assert!(dir.path().join("s.json").exists());
        let (back, m) = read_store(&p).unwrap();
        assert_eq!(back, seqs);
        assert_eq!(m, manifest);
    }

    #[test]
    fn mixed_dims_rejected_at_write() {
        let dir = tempfile::tempdir().unwrap();
        let (mut seqs, manifest) = fixture();
        seqs[1] = EmbeddingSequence::new(7, 5, 3, vec![0.0; 15]).unwrap();
        let err = write_store(dir.path().join("s.embs"), &seqs, &manifest).unwrap_err();
        assert!(matches!(err, StoreError::DimMismatch { expected: 4, found: 3, segment_id: 7 }));
    }

    #[test]
    fn non_finite_rejected_at_write_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.embs");
        let (mut seqs, manifest) = fixture();
        seqs[2].values[5] = f32::NAN;
        assert!(matches!(
            write_store(&p, &seqs, &manifest),
            Err(StoreError::NonFiniteValue { segment_id: 11, index: 5 })
        ));

        // corrupt a valid file in place: first value of the second record
        let (seqs, manifest) = fixture();
        write_store(&p, &seqs, &manifest).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let off = (HEADER_LEN + 12 + 16 + 12) as usize;
        bytes[off..off + 4].copy_from_slice(&f32::INFINITY.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_store(&p), Err(StoreError::NonFiniteValue { segment_id: 7, index: 0 })));
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.embs");
        let (seqs, manifest) = fixture();
        write_store(&p, &seqs, &manifest).unwrap();
        let full = std::fs::read(&p).unwrap();
        // header 24 + (12 + 16) + (12 + 80) + (12 + 144)
        assert_eq!(full.len(), 24 + 28 + 92 + 156);
        std::fs::write(&p, &full[..full.len() - 10]).unwrap();
        match read_store(&p) {
            Err(StoreError::Format { offset, msg }) => {
                assert_eq!(offset, 24 + 28 + 92 + 12);
                assert!(msg.contains("truncated"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
        std::fs::write(&p, &full[..10]).unwrap();
        assert!(matches!(read_store(&p), Err(StoreError::Format { offset: 8, .. })));
    }

    #[test]
    fn bad_magic_version_and_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.embs");
        let (seqs, manifest) = fixture();
        write_store(&p, &seqs, &manifest).unwrap();
        let full = std::fs::read(&p).unwrap();

        let mut b = full.clone();
        b[0] = b'X';
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(read_store(&p), Err(StoreError::Format { offset: 0, .. })));

        let mut b = full.clone();
        b[4] = 9;
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(read_store(&p), Err(StoreError::Format { offset: 4, .. })));

        let mut b = full.clone();
        b.extend_from_slice(&[0, 0]);
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(read_store(&p), Err(StoreError::Format { .. })));
    }

    #[test]
    fn manifest_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.embs");
        let (seqs, mut manifest) = fixture();
        write_store(&p, &seqs, &manifest).unwrap();
        manifest.segments.pop();
        std::fs::write(manifest_path(&p), serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(matches!(read_store(&p), Err(StoreError::Manifest(_))));
    }

    #[test]
    fn streaming_reader_yields_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.embs");
        let (seqs, manifest) = fixture();
        write_store(&p, &seqs, &manifest).unwrap();
        let mut r = StoreReader::open(&p).unwrap();
        assert_eq!(r.record_count(), 3);
        assert_eq!(r.next().unwrap().unwrap().segment_id, 3);
        assert_eq!(r.next().unwrap().unwrap().segment_id, 7);
        assert_eq!(r.next().unwrap().unwrap().segment_id, 11);
        assert!(r.next().is_none());
    }

    #[test]
    fn manifest_field_names() {
        let (_, manifest) = fixture();
        let v: serde_json::Value = serde_json::to_value(&manifest).unwrap();
        for key in ["version", "dim", "dtype", "layer_tag", "temporal", "classes", "segments"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn mean_pool_cases() {
        let one = EmbeddingSequence::new(0, 1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(mean_pool(&one).unwrap(), vec![1.0, -2.0, 0.5]);
        let two = EmbeddingSequence::new(0, 2, 2, vec![1.0, 3.0, 3.0, 1.0]).unwrap();
        assert_eq!(mean_pool(&two).unwrap(), vec![2.0, 2.0]);
        assert!(matches!(EmbeddingSequence::new(0, 0, 2, vec![]), Err(StoreError::EmptySequence)));
    }

    #[test]
    fn grid_modes() {
        let g = EmbeddingGrid::new(1, 2, 3, 1, (1..=6).map(|v| v as f32).collect()).unwrap();
        let ts = grid_aggregate(&g, GridAggregation::TimeSpec);
        assert_eq!(ts.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(grid_aggregate(&g, GridAggregation::Time).as_slice(), &[2.0, 5.0]);
        assert_eq!(grid_aggregate(&g, GridAggregation::Spec).as_slice(), &[2.5, 3.5, 4.5]);
        assert!(!GridAggregation::Spec.is_temporal());

        let flat = EmbeddingGrid::new(2, 4, 1, 2, (0..8).map(|v| v as f32 * 0.3).collect()).unwrap();
        assert_eq!(
            grid_aggregate(&flat, GridAggregation::Time),
            grid_aggregate(&flat, GridAggregation::TimeSpec)
        );
        let stored = EmbeddingSequence::new(1, 6, 1, (1..=6).map(|v| v as f32).collect()).unwrap();
        assert_eq!(EmbeddingGrid::from_flattened(&stored, 3).unwrap(), g);
        assert!(EmbeddingGrid::from_flattened(&stored, 4).is_err());
    }

    fn arb_store() -> impl Strategy<Value = (usize, Vec<Vec<f32>>)> {
        (1usize..6).prop_flat_map(|dim| {
            let seq = (1usize..8).prop_flat_map(move |t| {
                proptest::collection::vec(proptest::num::f32::NORMAL | proptest::num::f32::ZERO | proptest::num::f32::SUBNORMAL, t * dim)
            });
            (Just(dim), proptest::collection::vec(seq, 1..6))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn roundtrip_bit_exact((dim, records) in arb_store()) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("p.embs");
            let mut manifest = StoreManifest::new(dim, "layer01", true, vec!["x".into()]);
            let seqs: Vec<EmbeddingSequence> = records
                .into_iter()
                .enumerate()
                .map(|(i, v)| EmbeddingSequence::new(i as u64 * 3, v.len() / dim, dim, v).unwrap())
                .collect();
            manifest.segments = seqs.iter().map(|s| entry(s.segment_id, s.frames())).collect();
            write_store(&p, &seqs, &manifest).unwrap();
            let (back, _) = read_store(&p).unwrap();
            prop_assert_eq!(back.len(), seqs.len());
            for (a, b) in back.iter().zip(&seqs) {
                let bits_a: Vec<u32> = a.values().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = b.values().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }

        #[test]
        fn grand_mean_identity(t in 1usize..6, f in 1usize..6, d in 1usize..4, seed in proptest::collection::vec(-1e4f32..1e4, 150)) {
            let values: Vec<f32> = seed.iter().cycle().take(t * f * d).copied().collect();
            let g = EmbeddingGrid::new(0, t, f, d, values).unwrap();
            let a = grid_aggregate(&g, GridAggregation::Time).column_means().unwrap();
            let b = grid_aggregate(&g, GridAggregation::TimeSpec).column_means().unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
            }
        }
    }
}
