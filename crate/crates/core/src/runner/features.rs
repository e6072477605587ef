use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{Result, RunnerError};
use crate::dataset::AnnotationSet;
use crate::dsp::{beans_embedding, mfcc_sequence, read_wav, SpectralConfig, Waveform};
use crate::store::{write_store, EmbeddingSequence, SegmentEntry, StoreManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Mfcc,
    Beans20,
    Beans40,
}

impl FeatureKind {
    pub fn tag(self) -> &'static str {
        match self {
            FeatureKind::Mfcc => "mfcc",
            FeatureKind::Beans20 => "beans20",
            FeatureKind::Beans40 => "beans40",
        }
    }

    fn config(self, sample_rate: u32) -> SpectralConfig {
        match self {
            FeatureKind::Mfcc => SpectralConfig::mfcc().fitted_to(sample_rate),
            FeatureKind::Beans20 => SpectralConfig::beans(20, sample_rate),
            FeatureKind::Beans40 => SpectralConfig::beans(40, sample_rate),
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mfcc" => Ok(Self::Mfcc),
            "beans20" => Ok(Self::Beans20),
            "beans40" => Ok(Self::Beans40),
            other => Err(format!("unknown feature kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRequest {
    pub annotations: PathBuf,
    /// Holds `<recording_id>.wav` for every annotated recording.
    pub audio_dir: PathBuf,
    pub kind: FeatureKind,
    pub collar: f64,
    pub output: PathBuf,
}

/// Segments every annotation, computes MFCC sequences (or one BEANS vector
/// per segment) and writes a store. Segments shorter than one frame are
/// zero-padded to a single frame.
pub fn build_feature_store(req: &FeatureRequest) -> Result<StoreManifest> {
    if !(req.collar >= 0.0) {
        return Err(RunnerError::InvalidSpec(format!("collar {} must be >= 0", req.collar)));
    }
    let set = AnnotationSet::load(&req.annotations)?;
    let mut audio: BTreeMap<String, Waveform> = BTreeMap::new();
    for a in &set.annotations {
        if !audio.contains_key(&a.recording_id) {
            let w = read_wav(req.audio_dir.join(format!("{}.wav", a.recording_id)))?;
            audio.insert(a.recording_id.clone(), w);
        }
    }
    let lengths: BTreeMap<String, f64> = audio.iter().map(|(k, w)| (k.clone(), w.duration())).collect();
    let segments = set.segments(req.collar, &lengths)?;

    let temporal = req.kind == FeatureKind::Mfcc;
    let mut seqs = Vec::with_capacity(segments.len());
    let mut entries = Vec::with_capacity(segments.len());
    let mut dim = 0;
    for seg in &segments {
        let w = &audio[&seg.recording_id];
        let cfg = req.kind.config(w.sample_rate());
        let mut clip = w.slice_seconds(seg.start, seg.end);
        let need = cfg.frame_samples(w.sample_rate());
        if clip.samples().len() < need {
            log::warn!("segment {} shorter than one frame, zero-padded", seg.segment_id);
            clip = clip.padded_to(need);
        }
        let feats = mfcc_sequence(&clip, &cfg)?;
        let seq = if temporal {
            let rows: Vec<&[f64]> = feats.frames.iter_rows().collect();
            EmbeddingSequence::from_rows_f64(seg.segment_id, &rows)?
        } else {
            EmbeddingSequence::from_rows_f64(seg.segment_id, &[beans_embedding(&feats)?])?
        };
        dim = seq.dim();
        entries.push(SegmentEntry {
            id: seg.segment_id,
            label: seg.primary_label,
            fold: None,
            recording_id: seg.recording_id.clone(),
            start: seg.start,
            end: seg.end,
            frames: seq.frames(),
            overlapping: seg.overlapping_labels.iter().copied().collect(),
        });
        seqs.push(seq);
    }
    let mut manifest = StoreManifest::new(dim, req.kind.tag(), temporal, set.classes.clone());
    manifest.segments = entries;
    write_store(&req.output, &seqs, &manifest)?;
    Ok(manifest)
}
