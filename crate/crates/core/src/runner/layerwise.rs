use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiment::{evaluate, train_job, JobOutcome};
use super::{derive_seed, expand_grid, select_grid_point, ExperimentSpec, LeakageGuard, ProbeDataset, Result, RunnerError};
use crate::classifiers::{ProbeConfig, ProbeFamily};
use crate::dataset::FoldPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer_index: usize,
    pub layer_tag: String,
    pub learning_rate: f64,
    pub mean_dev_loss: f64,
    /// Mean over inner turns of the dev-fold macro AP.
    pub dev_map: f64,
    pub dev_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseTable {
    pub outer_turn: usize,
    pub rows: Vec<LayerRow>,
}

impl LayerwiseTable {
    /// Layer with the highest dev mAP (first on ties).
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<&LayerRow> = None;
        for r in &self.rows {
            if r.dev_map.is_finite() && best.map_or(true, |b| r.dev_map > b.dev_map) {
                best = Some(r);
            }
        }
        best.map(|r| r.layer_index)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,tag,map,auc,learning_rate,mean_dev_loss\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.layer_index, r.layer_tag, r.dev_map, r.dev_auc, r.learning_rate, r.mean_dev_loss
            );
        }
        s
    }
}

fn mean_finite(v: &[f64]) -> f64 {
    let ok: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().sum::<f64>() / ok.len() as f64
    }
}

/// Linear probe per layer store on the inner turns of one outer turn. The
/// learning rate is chosen per layer by mean inner-dev loss; the table
/// reports dev-fold mAP at that rate. Writes `layerwise.csv` and
/// `layerwise.json` to the output directory.
pub fn layerwise_sweep(spec: &ExperimentSpec) -> Result<LayerwiseTable> {
    spec.validate().map_err(|e| match e {
        RunnerError::InvalidSpec(m) if m.ends_with("does not exist") => RunnerError::MissingLayerStore(m),
        other => other,
    })?;
    let plan = FoldPlan::load(&spec.fold_plan)?;
    let outer = spec.layerwise_outer_turn;
    if outer >= plan.outer_turns.len() {
        return Err(RunnerError::InvalidSpec(format!("outer turn {outer} out of range")));
    }
    let layers: Vec<ProbeDataset> = spec
        .stores
        .iter()
        .map(|p| ProbeDataset::load(p, &plan, spec.aggregation))
        .collect::<Result<_>>()?;
    if let Some(l) = layers.iter().find(|l| l.labels != layers[0].labels || l.ids != layers[0].ids) {
        return Err(RunnerError::InvalidSpec(format!(
            "layer '{}' does not share the segment table of '{}'",
            l.layer_tag, layers[0].layer_tag
        )));
    }

    let family = ProbeFamily::Lr;
    let grid = expand_grid(family, &spec.grid, &spec.training);
    let n_inner = plan.outer_turns[outer].inner.len();
    let guard = LeakageGuard::default();
    let jobs: Vec<(usize, usize, usize)> = (0..layers.len())
        .flat_map(|l| (0..grid.len()).flat_map(move |g| (0..n_inner).map(move |i| (l, g, i))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.parallelism)
        .build()
        .map_err(|e| RunnerError::Pool(e.to_string()))?;
    // (dev loss, dev mAP, dev AUC)
    let outcomes: Vec<(Option<f64>, f64, f64)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(l, g, i)| {
                let cfg = ProbeConfig {
                    seed: derive_seed(spec.seed, &[family as u64, outer as u64, g as u64, i as u64]),
                    ..grid[g].clone()
                };
                let ds = &layers[l];
                let (outcome, params) = train_job(ds, &plan, outer, i, &cfg, &guard)?;
                let dev_fold = plan.outer_turns[outer].inner[i].dev;
                let dev_idx = ds.indices_in(&[dev_fold]);
                let rep = evaluate(ds, &dev_idx, &params, family, dev_fold)?;
                let (map, auc) = rep.map_or((f64::NAN, f64::NAN), |r| (r.macro_ap, r.macro_auc));
                Ok(match outcome {
                    JobOutcome::Loss(v) => (Some(v), map, auc),
                    JobOutcome::Diverged => (None, f64::NAN, f64::NAN),
                })
            })
            .collect::<Result<_>>()
    })?;

    let per_layer = grid.len() * n_inner;
    let mut rows = Vec::with_capacity(layers.len());
    for (l, ds) in layers.iter().enumerate() {
        let block = &outcomes[l * per_layer..(l + 1) * per_layer];
        let means: Vec<Option<f64>> = block
            .chunks(n_inner)
            .map(|c| {
                c.iter()
                    .map(|o| o.0)
                    .collect::<Option<Vec<f64>>>()
                    .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        let g = select_grid_point(&means).ok_or(RunnerError::AllDiverged { outer })?;
        let chosen = &block[g * n_inner..(g + 1) * n_inner];
        rows.push(LayerRow {
            layer_index: l,
            layer_tag: ds.layer_tag.clone(),
            learning_rate: grid[g].learning_rate,
            mean_dev_loss: means[g].expect("selected point has a mean"),
            dev_map: mean_finite(&chosen.iter().map(|o| o.1).collect::<Vec<_>>()),
            dev_auc: mean_finite(&chosen.iter().map(|o| o.2).collect::<Vec<_>>()),
        });
    }
    let table = LayerwiseTable { outer_turn: outer, rows };
    std::fs::create_dir_all(&spec.output_dir)?;
    std::fs::write(spec.output_dir.join("layerwise.csv"), table.to_csv())?;
    std::fs::write(
        spec.output_dir.join("layerwise.json"),
        serde_json::to_string_pretty(&table)? + "\n",
    )?;
    Ok(table)
}
