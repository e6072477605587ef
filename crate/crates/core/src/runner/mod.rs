//! Nested cross-validation driver: grid search by mean inner-dev loss,
//! final fit and test evaluation per outer turn, layerwise sweeps,
//! synthetic fixtures and report output.

mod experiment;
mod features;
mod layerwise;
mod report;
mod synth;

pub use experiment::{run_experiment, run_outer_turn, ExperimentResults, FamilyResults, GridRow, RunResult};
pub use features::{build_feature_store, FeatureKind, FeatureRequest};
pub use layerwise::{layerwise_sweep, LayerRow, LayerwiseTable};
pub use report::{summary_table, write_report, AERD_AUC_ELEV, AERD_AUC_LDC};
pub use synth::{generate_layer_stores, generate_synthetic_store, SynthOutput, SynthSpec};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifiers::{ClassifierError, Example, ProbeConfig, ProbeFamily, ProbeInput};
use crate::dataset::{DatasetError, FoldPlan};
use crate::eval::EvalError;
use crate::store::{grid_aggregate, read_store, EmbeddingGrid, GridAggregation, StoreError};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("missing layer store: {0}")]
    MissingLayerStore(String),
    #[error("segment {segment_id} from test fold {fold} reached training")]
    Leakage { segment_id: u64, fold: usize },
    #[error("outer turn {outer}: every grid point diverged")]
    AllDiverged { outer: usize },
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("classifier: {0}")]
    Classifier(#[from] ClassifierError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("dsp: {0}")]
    Dsp(#[from] crate::dsp::DspError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, RunnerError>;

/// Hyperparameter values searched exhaustively. Pooled families only use
/// the learning-rate axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub learning_rate: Vec<f64>,
    pub hidden: Vec<usize>,
    pub num_layers: Vec<usize>,
    pub dropout: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            learning_rate: vec![1e-3, 1e-4, 1e-5, 1e-6],
            hidden: vec![32, 64, 128, 256],
            num_layers: vec![1, 2],
            dropout: vec![0.0, 0.2, 0.4, 0.8],
        }
    }
}

/// Fixed training settings shared by every grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSpec {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub tolerance: f64,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 100,
            patience: 3,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// One store for `train`; one per layer for `layerwise`.
    pub stores: Vec<PathBuf>,
    pub fold_plan: PathBuf,
    #[serde(default = "default_families")]
    pub families: Vec<ProbeFamily>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub training: TrainingSpec,
    pub output_dir: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub seed: u64,
    /// How grid stores are turned into sequences.
    #[serde(default)]
    pub aggregation: Option<GridAggregation>,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default)]
    pub layerwise_outer_turn: usize,
    #[serde(default = "default_true")]
    pub write_checkpoints: bool,
    #[serde(default = "default_curve_points")]
    pub curve_points: usize,
}

fn default_families() -> Vec<ProbeFamily> {
    ProbeFamily::ALL.to_vec()
}
fn default_parallelism() -> usize {
    1
}
fn default_holdout() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_curve_points() -> usize {
    101
}

impl ExperimentSpec {
    pub fn new(stores: Vec<PathBuf>, fold_plan: PathBuf, output_dir: PathBuf) -> Self {
        Self {
            stores,
            fold_plan,
            families: default_families(),
            grid: GridSpec::default(),
            training: TrainingSpec::default(),
            output_dir,
            parallelism: 1,
            seed: 0,
            aggregation: None,
            holdout_fraction: 0.1,
            layerwise_outer_turn: 0,
            write_checkpoints: true,
            curve_points: 101,
        }
    }

    /// Parses a spec file, resolving relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut spec: Self =
            serde_json::from_str(&text).map_err(|e| RunnerError::InvalidSpec(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        spec.stores.iter_mut().for_each(fix);
        fix(&mut spec.fold_plan);
        fix(&mut spec.output_dir);
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RunnerError::InvalidSpec(m.into()));
        if self.stores.is_empty() {
            return bad("no stores given");
        }
        if self.families.is_empty() {
            return bad("no classifier families");
        }
        let g = &self.grid;
        if g.learning_rate.is_empty() {
            return bad("learning-rate grid is empty");
        }
        if self.families.iter().any(|f| f.is_recurrent())
            && (g.hidden.is_empty() || g.num_layers.is_empty() || g.dropout.is_empty())
        {
            return bad("recurrent grids need hidden, num_layers and dropout values");
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1");
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad("holdout fraction must lie in (0, 1)");
        }
        if self.curve_points < 2 {
            return bad("curve_points must be at least 2");
        }
        for p in self.stores.iter().chain(std::iter::once(&self.fold_plan)) {
            if !p.exists() {
                return Err(RunnerError::InvalidSpec(format!("{} does not exist", p.display())));
            }
        }
        for cfg in self.families.iter().flat_map(|&f| expand_grid(f, &self.grid, &self.training)) {
            cfg.validate()
                .map_err(|e| RunnerError::InvalidSpec(format!("grid point: {e}")))?;
        }
        Ok(())
    }
}

/// Grid points for one family, sorted so that the first minimum wins ties:
/// lower learning rate, then smaller hidden size, fewer layers, lower
/// dropout. One-layer recurrent points keep only dropout 0, since dropout
/// acts between stacked layers.
pub fn expand_grid(family: ProbeFamily, grid: &GridSpec, training: &TrainingSpec) -> Vec<ProbeConfig> {
    let base = |lr: f64| ProbeConfig {
        learning_rate: lr,
        batch_size: training.batch_size,
        max_epochs: training.max_epochs,
        patience: training.patience,
        tolerance: training.tolerance,
        ..ProbeConfig::new(family)
    };
    let mut out = Vec::new();
    for &lr in &grid.learning_rate {
        if !family.is_recurrent() {
            out.push(base(lr));
            continue;
        }
        for &hidden in &grid.hidden {
            for &layers in &grid.num_layers {
                let drops: Vec<f64> = if layers == 1 {
                    vec![0.0]
                } else {
                    grid.dropout.clone()
                };
                for d in drops {
                    out.push(ProbeConfig {
                        hidden,
                        num_layers: layers,
                        dropout: d,
                        ..base(lr)
                    });
                }
            }
        }
    }
    out.sort_by(|a, b| {
        a.learning_rate
            .total_cmp(&b.learning_rate)
            .then(a.hidden.cmp(&b.hidden))
            .then(a.num_layers.cmp(&b.num_layers))
            .then(a.dropout.total_cmp(&b.dropout))
    });
    out.dedup();
    out
}

/// Index of the lowest mean dev loss; `None` entries are aborted points.
/// Ties go to the earliest index, i.e. the tie-break order of `expand_grid`.
pub fn select_grid_point(mean_dev_losses: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, l) in mean_dev_losses.iter().enumerate() {
        if let Some(l) = *l {
            if best.map_or(true, |(_, b)| l < b) {
                best = Some((i, l));
            }
        }
    }
    best.map(|b| b.0)
}

/// Mixes a base seed with a job key (SplitMix64 finaliser per word), so a
/// job's random streams depend only on its key.
pub fn derive_seed(base: u64, key: &[u64]) -> u64 {
    let mut z = base;
    for &k in key {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// A store joined with its fold plan, sorted by segment id.
#[derive(Debug, Clone)]
pub struct ProbeDataset {
    pub layer_tag: String,
    pub classes: Vec<String>,
    pub dim: usize,
    pub temporal: bool,
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub folds: Vec<usize>,
    pub overlaps: Vec<BTreeSet<usize>>,
    pub sequences: Vec<ProbeInput>,
    pub pooled: Vec<ProbeInput>,
}

impl ProbeDataset {
    pub fn load(store: &Path, plan: &FoldPlan, aggregation: Option<GridAggregation>) -> Result<Self> {
        if !store.exists() {
            return Err(RunnerError::MissingLayerStore(store.display().to_string()));
        }
        let (seqs, manifest) = read_store(store)?;
        let entries: BTreeMap<u64, _> = manifest.segments.iter().map(|s| (s.id, s)).collect();
        let store_ids: BTreeSet<u64> = entries.keys().copied().collect();
        let plan_ids: BTreeSet<u64> = plan.assignment.keys().copied().collect();
        if store_ids != plan_ids {
            let missing = plan_ids.symmetric_difference(&store_ids).next().copied();
            return Err(RunnerError::InvalidSpec(format!(
                "{} and the fold plan disagree on segment ids (e.g. {missing:?})",
                store.display()
            )));
        }
        let mut temporal = manifest.temporal;
        let mut dim = manifest.dim;
        let mut recs: Vec<(u64, ProbeInput)> = Vec::with_capacity(seqs.len());
        for s in seqs {
            let (rows, values) = match (manifest.grid_patches, aggregation) {
                (Some(f), Some(mode)) => {
                    temporal = mode.is_temporal();
                    let m = grid_aggregate(&EmbeddingGrid::from_flattened(&s, f)?, mode);
                    (m.rows(), m.into_vec())
                }
                _ => (s.frames(), s.to_f64()),
            };
            dim = s.dim();
            recs.push((s.segment_id, ProbeInput::sequence(rows, dim, values, temporal)));
        }
        recs.sort_by_key(|r| r.0);
        let mut ds = Self {
            layer_tag: manifest.layer_tag.clone(),
            classes: manifest.classes.clone(),
            dim,
            temporal,
            ids: Vec::new(),
            labels: Vec::new(),
            folds: Vec::new(),
            overlaps: Vec::new(),
            sequences: Vec::new(),
            pooled: Vec::new(),
        };
        for (id, input) in recs {
            let e = entries[&id];
            if e.label >= ds.classes.len() {
                return Err(RunnerError::InvalidSpec(format!("segment {id} label {} out of range", e.label)));
            }
            let mut ov: BTreeSet<usize> = e.overlapping.iter().copied().collect();
            ov.insert(e.label);
            ds.ids.push(id);
            ds.labels.push(e.label);
            ds.folds.push(plan.fold_of(id).expect("plan covers store"));
            ds.overlaps.push(ov);
            ds.pooled.push(ProbeInput::Vector(input.pooled().into_owned()));
            ds.sequences.push(input);
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn indices_in(&self, folds: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| folds.contains(&self.folds[i])).collect()
    }

    fn input(&self, i: usize, family: ProbeFamily) -> &ProbeInput {
        if family.is_recurrent() {
            &self.sequences[i]
        } else {
            &self.pooled[i]
        }
    }

    pub fn examples(&self, idx: &[usize], family: ProbeFamily) -> Vec<Example> {
        idx.iter()
            .map(|&i| Example {
                input: self.input(i, family).clone(),
                label: self.labels[i],
            })
            .collect()
    }
}

/// Counts every set of examples handed to training during selection and
/// rejects any that contains the outer test fold.
#[derive(Debug, Default)]
pub struct LeakageGuard {
    checked: std::sync::atomic::AtomicUsize,
}

impl LeakageGuard {
    pub fn check(&self, ds: &ProbeDataset, idx: &[usize], test_fold: usize) -> Result<()> {
        self.checked.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        match idx.iter().find(|&&i| ds.folds[i] == test_fold) {
            Some(&i) => Err(RunnerError::Leakage {
                segment_id: ds.ids[i],
                fold: test_fold,
            }),
            None => Ok(()),
        }
    }

    pub fn checks(&self) -> usize {
        self.checked.load(std::sync::atomic::Ordering::Relaxed)
    }
}
