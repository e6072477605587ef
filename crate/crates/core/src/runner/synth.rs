use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{derive_seed, Result, RunnerError};
use crate::dataset::{make_fold_plan, Segment};
use crate::store::{write_store, EmbeddingSequence, SegmentEntry, StoreManifest, STORE_EXTENSION};

/// Class-conditional Gaussian sequences: each class has mean
/// `separation * u_c` for a random unit vector `u_c`, every frame adds
/// N(0, I) noise. Each segment is its own recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub separation: f64,
    pub k: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 125,
            dim: 16,
            min_frames: 5,
            max_frames: 20,
            separation: 5.0,
            k: 5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(RunnerError::InvalidSpec(format!("separation {} must be >= 0", self.separation)));
        }
        if self.classes < 2 || self.per_class == 0 || self.dim == 0 {
            return Err(RunnerError::InvalidSpec("need >= 2 classes, >= 1 segment per class, dim >= 1".into()));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(RunnerError::InvalidSpec("frame range must satisfy 1 <= min <= max".into()));
        }
        Ok(())
    }

    pub fn segment_count(&self) -> usize {
        self.classes * self.per_class
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub stores: Vec<PathBuf>,
    pub fold_plan: PathBuf,
}

/// Layer tags of a base transformer sweep: input features then layers.
pub fn layer_tag(index: usize) -> String {
    if index == 0 {
        "feat".into()
    } else {
        format!("layer{index:02}")
    }
}

struct Layout {
    labels: Vec<usize>,
    frames: Vec<usize>,
}

fn layout(spec: &SynthSpec) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0]));
    let n = spec.segment_count();
    Layout {
        labels: (0..n).map(|i| i % spec.classes).collect(),
        frames: (0..n).map(|_| rng.gen_range(spec.min_frames..=spec.max_frames)).collect(),
    }
}

fn write_layer(spec: &SynthSpec, lay: &Layout, separation: f64, stream: u64, tag: &str, path: &Path) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[1, stream]));
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| separation * x / norm).collect()
        })
        .collect();
    let classes = (0..spec.classes).map(|c| format!("call{c}")).collect();
    let mut manifest = StoreManifest::new(spec.dim, tag, true, classes);
    let mut seqs = Vec::with_capacity(lay.labels.len());
    for (i, (&label, &t)) in lay.labels.iter().zip(&lay.frames).enumerate() {
        let values: Vec<f32> = (0..t * spec.dim)
            .map(|j| (means[label][j % spec.dim] + rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        seqs.push(EmbeddingSequence::new(i as u64, t, spec.dim, values)?);
        manifest.segments.push(SegmentEntry {
            id: i as u64,
            label,
            fold: None,
            recording_id: format!("rec{i:05}"),
            start: 0.0,
            end: t as f64 * 0.02,
            frames: t,
            overlapping: Vec::new(),
        });
    }
    write_store(path, &seqs, &manifest)?;
    Ok(())
}

fn write_plan(spec: &SynthSpec, lay: &Layout, dir: &Path) -> Result<PathBuf> {
    let segments: Vec<Segment> = lay
        .labels
        .iter()
        .zip(&lay.frames)
        .enumerate()
        .map(|(i, (&label, &t))| Segment {
            segment_id: i as u64,
            recording_id: format!("rec{i:05}"),
            start: 0.0,
            end: t as f64 * 0.02,
            primary_label: label,
            overlapping_labels: BTreeSet::from([label]),
            fold: None,
        })
        .collect();
    let plan = make_fold_plan(&segments, spec.k, spec.classes, spec.seed)?;
    let path = dir.join("folds.json");
    plan.save(&path)?;
    Ok(path)
}

/// One store (`synthetic.embs` plus manifest) and `folds.json` in `dir`.
pub fn generate_synthetic_store(spec: &SynthSpec, dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    let lay = layout(spec);
    let store = dir.join(format!("synthetic.{STORE_EXTENSION}"));
    write_layer(spec, &lay, spec.separation, 0, "synthetic", &store)?;
    Ok(SynthOutput {
        stores: vec![store],
        fold_plan: write_plan(spec, &lay, dir)?,
    })
}

/// `layers` stores sharing one segment table; only `separable` carries
/// class structure (at `spec.separation`), the others are pure noise.
pub fn generate_layer_stores(spec: &SynthSpec, layers: usize, separable: usize, dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    if separable >= layers {
        return Err(RunnerError::InvalidSpec(format!("separable layer {separable} >= {layers} layers")));
    }
    std::fs::create_dir_all(dir)?;
    let lay = layout(spec);
    let mut stores = Vec::with_capacity(layers);
    for l in 0..layers {
        let tag = layer_tag(l);
        let path = dir.join(format!("{tag}.{STORE_EXTENSION}"));
        let sep = if l == separable { spec.separation } else { 0.0 };
        write_layer(spec, &lay, sep, l as u64, &tag, &path)?;
        stores.push(path);
    }
    Ok(SynthOutput {
        stores,
        fold_plan: write_plan(spec, &lay, dir)?,
    })
}
