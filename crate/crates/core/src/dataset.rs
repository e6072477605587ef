//! Recordings, annotations, segments and nested cross-validation folds.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("no annotation overlaps segment [{start}, {end}] of recording {recording_id}")]
    NoOverlappingCall {
        recording_id: String,
        start: f64,
        end: f64,
    },
    #[error("fold count must be at least 3, got {0}")]
    InvalidFoldCount(usize),
    #[error("{recordings} recordings cannot fill {k} folds")]
    TooFewRecordings { recordings: usize, k: usize },
    #[error("class {0} has no segments")]
    MissingClass(usize),
    #[error("invalid fold plan: {0}")]
    InvalidPlan(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub recording_id: String,
    pub call_type: usize,
    pub start: f64,
    pub end: f64,
}

impl Annotation {
    /// Length of the intersection with `[start, end]`, zero when disjoint.
    pub fn overlap(&self, start: f64, end: f64) -> f64 {
        (self.end.min(end) - self.start.max(start)).max(0.0)
    }

    pub fn covers(&self, t: f64) -> bool {
        self.start <= t && t <= self.end
    }
}

/// Parsed annotation file with its class-name table.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub classes: Vec<String>,
    pub annotations: Vec<Annotation>,
}

impl AnnotationSet {
    /// Parses `recording_id \t start \t end \t class_name` records. Blank
    /// lines and lines starting with `#` are skipped. Class indices follow
    /// the sorted order of distinct class names.
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 4 {
                return Err(DatasetError::Parse {
                    line: line_no,
                    msg: format!("expected 4 tab-separated fields, found {}", fields.len()),
                });
            }
            let num = |s: &str, what: &str| {
                s.trim().parse::<f64>().map_err(|e| DatasetError::Parse {
                    line: line_no,
                    msg: format!("bad {what} '{s}': {e}"),
                })
            };
            let start = num(fields[1], "start")?;
            let end = num(fields[2], "end")?;
            if !(start >= 0.0 && start < end && end.is_finite()) {
                return Err(DatasetError::Parse {
                    line: line_no,
                    msg: format!("need 0 <= start < end, got {start} and {end}"),
                });
            }
            let class = fields[3].trim();
            if class.is_empty() || fields[0].trim().is_empty() {
                return Err(DatasetError::Parse {
                    line: line_no,
                    msg: "empty recording id or class name".into(),
                });
            }
            raw.push((fields[0].trim().to_string(), start, end, class.to_string()));
        }
        let classes: Vec<String> = raw
            .iter()
            .map(|r| r.3.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let annotations = raw
            .into_iter()
            .map(|(recording_id, start, end, class)| Annotation {
                call_type: classes.binary_search(&class).expect("class collected above"),
                recording_id,
                start,
                end,
            })
            .collect();
        Ok(Self {
            classes,
            annotations,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn for_recording<'a>(&'a self, recording_id: &'a str) -> impl Iterator<Item = &'a Annotation> + 'a {
        self.annotations
            .iter()
            .filter(move |a| a.recording_id == recording_id)
    }

    /// One segment per annotation, ids following file order. Recordings
    /// missing from `recording_lengths` are not clamped at the end.
    pub fn segments(
        &self,
        collar: f64,
        recording_lengths: &BTreeMap<String, f64>,
    ) -> Result<Vec<Segment>> {
        let mut out = Vec::with_capacity(self.annotations.len());
        for (id, a) in self.annotations.iter().enumerate() {
            let len = recording_lengths
                .get(&a.recording_id)
                .copied()
                .unwrap_or(f64::INFINITY);
            let (start, end) = segment_from_annotation(a, collar, len);
            let siblings: Vec<&Annotation> = self.for_recording(&a.recording_id).collect();
            let primary = assign_primary_label(start, end, siblings.iter().copied())
                .map_err(|_| DatasetError::NoOverlappingCall {
                    recording_id: a.recording_id.clone(),
                    start,
                    end,
                })?;
            if let PrimaryLabel::Fallback(c) = primary {
                log::warn!(
                    "segment {id} ({} {start:.3}-{end:.3}): no call at centre, using class {c}",
                    a.recording_id
                );
            }
            let mut overlapping: BTreeSet<usize> = siblings
                .iter()
                .filter(|s| s.overlap(start, end) > 0.0)
                .map(|s| s.call_type)
                .collect();
            overlapping.insert(primary.class());
            out.push(Segment {
                segment_id: id as u64,
                recording_id: a.recording_id.clone(),
                start,
                end,
                primary_label: primary.class(),
                overlapping_labels: overlapping,
                fold: None,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: u64,
    pub recording_id: String,
    pub start: f64,
    pub end: f64,
    pub primary_label: usize,
    pub overlapping_labels: BTreeSet<usize>,
    pub fold: Option<usize>,
}

/// Widens the annotated call by `collar` on both sides, clamped to the
/// recording.
pub fn segment_from_annotation(a: &Annotation, collar: f64, recording_len: f64) -> (f64, f64) {
    ((a.start - collar).max(0.0), (a.end + collar).min(recording_len))
}

/// Outcome of the centre-label rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimaryLabel {
    /// An annotation covers the segment centre.
    Centre(usize),
    /// Nothing covers the centre; the largest-overlap annotation was used.
    Fallback(usize),
}

impl PrimaryLabel {
    pub fn class(self) -> usize {
        match self {
            PrimaryLabel::Centre(c) | PrimaryLabel::Fallback(c) => c,
        }
    }

    pub fn is_fallback(self) -> bool {
        matches!(self, PrimaryLabel::Fallback(_))
    }
}

/// Picks the call at the temporal centre of `[start, end]`. Several
/// candidates are ranked by overlap with the segment (longest first), then
/// by class index (lowest first).
pub fn assign_primary_label<'a>(
    start: f64,
    end: f64,
    annotations: impl IntoIterator<Item = &'a Annotation>,
) -> Result<PrimaryLabel> {
    let centre = 0.5 * (start + end);
    let mut best_centre: Option<(f64, usize)> = None;
    let mut best_any: Option<(f64, usize)> = None;
    let better = |cand: (f64, usize), cur: Option<(f64, usize)>| match cur {
        None => true,
        Some((o, c)) => cand.0 > o || (cand.0 == o && cand.1 < c),
    };
    for a in annotations {
        let ov = a.overlap(start, end);
        if ov <= 0.0 {
            continue;
        }
        let cand = (ov, a.call_type);
        if a.covers(centre) && better(cand, best_centre) {
            best_centre = Some(cand);
        }
        if better(cand, best_any) {
            best_any = Some(cand);
        }
    }
    match (best_centre, best_any) {
        (Some((_, c)), _) => Ok(PrimaryLabel::Centre(c)),
        (None, Some((_, c))) => Ok(PrimaryLabel::Fallback(c)),
        (None, None) => Err(DatasetError::NoOverlappingCall {
            recording_id: String::new(),
            start,
            end,
        }),
    }
}

/// A prediction counts as correct when it matches any call in the segment.
pub fn is_correct(predicted: usize, seg: &Segment) -> bool {
    seg.overlapping_labels.contains(&predicted)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnerTurn {
    pub dev: usize,
    pub train: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OuterTurn {
    pub test: usize,
    pub inner: Vec<InnerTurn>,
}

/// Nested K-fold assignment. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<u64, usize>,
    pub outer_turns: Vec<OuterTurn>,
}

impl FoldPlan {
    /// Builds the turn structure for an existing segment → fold assignment.
    pub fn from_assignment(k: usize, seed: u64, assignment: BTreeMap<u64, usize>) -> Result<Self> {
        if k < 3 {
            return Err(DatasetError::InvalidFoldCount(k));
        }
        let outer_turns = (0..k)
            .map(|test| {
                let rest: Vec<usize> = (0..k).filter(|&f| f != test).collect();
                let inner = rest
                    .iter()
                    .map(|&dev| InnerTurn {
                        dev,
                        train: rest.iter().copied().filter(|&f| f != dev).collect(),
                    })
                    .collect();
                OuterTurn { test, inner }
            })
            .collect();
        let plan = Self {
            k,
            seed,
            assignment,
            outer_turns,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn fold_of(&self, segment_id: u64) -> Option<usize> {
        self.assignment.get(&segment_id).copied()
    }

    pub fn segments_in(&self, fold: usize) -> impl Iterator<Item = u64> + '_ {
        self.assignment
            .iter()
            .filter(move |(_, &f)| f == fold)
            .map(|(&id, _)| id)
    }

    /// Checks the structural invariants of the turn table.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DatasetError::InvalidPlan(m));
        if self.k < 3 {
            return Err(DatasetError::InvalidFoldCount(self.k));
        }
        if let Some((id, f)) = self.assignment.iter().find(|(_, &f)| f >= self.k) {
            return bad(format!("segment {id} assigned to fold {f} >= k={}", self.k));
        }
        if self.outer_turns.len() != self.k {
            return bad(format!("{} outer turns for k={}", self.outer_turns.len(), self.k));
        }
        for turn in &self.outer_turns {
            if turn.inner.len() != self.k - 1 {
                return bad(format!("outer turn {} has {} inner turns", turn.test, turn.inner.len()));
            }
            for inner in &turn.inner {
                let mut seen: BTreeSet<usize> = inner.train.iter().copied().collect();
                if seen.len() != inner.train.len() || !seen.insert(inner.dev) || !seen.insert(turn.test) {
                    return bad(format!("outer turn {} reuses a fold", turn.test));
                }
                if seen.len() != self.k || seen.iter().any(|&f| f >= self.k) {
                    return bad(format!("outer turn {} does not partition the folds", turn.test));
                }
            }
        }
        Ok(())
    }

    /// Copies fold indices onto `segments`.
    pub fn apply(&self, segments: &mut [Segment]) -> Result<()> {
        for s in segments.iter_mut() {
            s.fold = Some(self.fold_of(s.segment_id).ok_or_else(|| {
                DatasetError::InvalidPlan(format!("segment {} has no fold", s.segment_id))
            })?);
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let plan: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Assigns whole recordings to `k` folds, greedily keeping per-class
/// counts and fold sizes level. Deterministic given `seed`.
pub fn make_fold_plan(segments: &[Segment], k: usize, num_classes: usize, seed: u64) -> Result<FoldPlan> {
    if k < 3 {
        return Err(DatasetError::InvalidFoldCount(k));
    }
    let mut per_class = vec![0usize; num_classes];
    let mut recordings: BTreeMap<&str, (Vec<usize>, Vec<u64>)> = BTreeMap::new();
    for s in segments {
        if s.primary_label >= num_classes {
            return Err(DatasetError::InvalidPlan(format!(
                "segment {} has label {} >= {num_classes}",
                s.segment_id, s.primary_label
            )));
        }
        per_class[s.primary_label] += 1;
        let entry = recordings
            .entry(s.recording_id.as_str())
            .or_insert_with(|| (vec![0; num_classes], Vec::new()));
        entry.0[s.primary_label] += 1;
        entry.1.push(s.segment_id);
    }
    if let Some(c) = per_class.iter().position(|&n| n == 0) {
        return Err(DatasetError::MissingClass(c));
    }
    if recordings.len() < k {
        return Err(DatasetError::TooFewRecordings {
            recordings: recordings.len(),
            k,
        });
    }

    let mut order: Vec<(Vec<usize>, Vec<u64>)> = recordings.into_values().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by_key(|(_, ids)| std::cmp::Reverse(ids.len()));

    let mut class_counts = vec![vec![0usize; num_classes]; k];
    let mut totals = vec![0usize; k];
    let mut assignment = BTreeMap::new();
    for (counts, ids) in &order {
        let n = ids.len();
        // Adding to fold g raises the summed squared counts by
        // 2*(x_g . n) + |n|^2; only the first term depends on g.
        let fold = (0..k)
            .min_by_key(|&g| {
                let shared: usize = class_counts[g].iter().zip(counts).map(|(x, c)| x * c).sum();
                (shared + totals[g] * n, totals[g], g)
            })
            .expect("k >= 3");
        for (x, c) in class_counts[fold].iter_mut().zip(counts) {
            *x += c;
        }
        totals[fold] += n;
        for &id in ids {
            assignment.insert(id, fold);
        }
    }
    if let Some(f) = totals.iter().position(|&t| t == 0) {
        return Err(DatasetError::InvalidPlan(format!("fold {f} is empty")));
    }
    FoldPlan::from_assignment(k, seed, assignment)
}
