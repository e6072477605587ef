use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    derive_seed, expand_grid, select_grid_point, write_report, ExperimentSpec, LeakageGuard, ProbeDataset, Result,
    RunnerError,
};
use crate::classifiers::{predict_scores, train_probe, ModelParams, ProbeConfig, ProbeFamily, TrainTrace};
use crate::dataset::FoldPlan;
use crate::eval::{fold_average, macro_metrics, EvalError, EvalReport, FoldMetrics, FoldSummary, ScoreMatrix};

/// Dev losses of one grid point over the inner turns of an outer turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub index: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub num_layers: usize,
    pub dropout: f64,
    /// Best dev loss per inner turn; `None` where training diverged.
    pub inner_dev_loss: Vec<Option<f64>>,
    /// `None` when any inner run diverged, which aborts the point.
    pub mean_dev_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub outer: usize,
    pub family: ProbeFamily,
    pub grid: Vec<GridRow>,
    pub selected: usize,
    pub config: ProbeConfig,
    /// Trainings spent on selection (grid points x inner turns).
    pub selection_trainings: usize,
    pub test_segments: usize,
    /// Final fit on all non-test folds; `None` if the test fold is degenerate.
    pub test: Option<EvalReport>,
    pub final_trace: TrainTrace,
    /// Inner turn whose model is evaluated in no-retrain mode.
    pub best_inner_turn: usize,
    pub best_inner_test: Option<EvalReport>,
    #[serde(skip)]
    pub params: Option<ModelParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnFailure {
    pub family: ProbeFamily,
    pub outer: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyResults {
    pub family: ProbeFamily,
    pub runs: Vec<RunResult>,
    pub retrain: FoldSummary,
    pub best_inner: FoldSummary,
}

/// Everything `results.json` holds. Contains no paths, timings or
/// scheduling details, so reruns produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub layer_tag: String,
    pub dim: usize,
    pub classes: Vec<String>,
    pub k: usize,
    pub seed: u64,
    pub segments: usize,
    pub families: Vec<FamilyResults>,
    pub failures: Vec<TurnFailure>,
    pub leakage_checks: usize,
}

impl ExperimentResults {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

pub(super) enum JobOutcome {
    Loss(f64),
    Diverged,
}

fn family_key(f: ProbeFamily) -> u64 {
    f as u64
}

pub(super) fn train_job(
    ds: &ProbeDataset,
    plan: &FoldPlan,
    outer: usize,
    inner: usize,
    cfg: &ProbeConfig,
    guard: &LeakageGuard,
) -> Result<(JobOutcome, ModelParams)> {
    let turn = &plan.outer_turns[outer];
    let it = &turn.inner[inner];
    let tr = ds.indices_in(&it.train);
    let dv = ds.indices_in(&[it.dev]);
    guard.check(ds, &tr, turn.test)?;
    guard.check(ds, &dv, turn.test)?;
    let trained = train_probe(
        &ds.examples(&tr, cfg.family),
        &ds.examples(&dv, cfg.family),
        ds.classes.len(),
        cfg,
    )?;
    let outcome = if trained.trace.non_finite || !trained.trace.best_dev_loss.is_finite() {
        JobOutcome::Diverged
    } else {
        JobOutcome::Loss(trained.trace.best_dev_loss)
    };
    Ok((outcome, trained.params))
}

pub(super) fn evaluate(ds: &ProbeDataset, idx: &[usize], params: &ModelParams, family: ProbeFamily, fold: usize) -> Result<Option<EvalReport>> {
    let inputs: Vec<_> = idx
        .iter()
        .map(|&i| if family.is_recurrent() { ds.sequences[i].clone() } else { ds.pooled[i].clone() })
        .collect();
    let scores = predict_scores(params, &inputs)?;
    let m = ScoreMatrix {
        classes: ds.classes.len(),
        scores,
        labels: idx.iter().map(|&i| ds.labels[i]).collect(),
        overlap_sets: idx.iter().map(|&i| ds.overlaps[i].clone()).collect(),
    };
    match macro_metrics(&m) {
        Ok(mut r) => {
            r.fold = Some(fold);
            Ok(Some(r))
        }
        Err(EvalError::AllClassesDegenerate) => {
            log::warn!("fold {fold}: every class degenerate, fold excluded");
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

/// Grid search over the inner turns of `outer`, final fit on all non-test
/// folds (early-stopped on a held-out share), and a single evaluation on
/// the test fold.
pub fn run_outer_turn(
    spec: &ExperimentSpec,
    ds: &ProbeDataset,
    plan: &FoldPlan,
    family: ProbeFamily,
    outer: usize,
    guard: &LeakageGuard,
) -> Result<RunResult> {
    let turn = &plan.outer_turns[outer];
    let grid = expand_grid(family, &spec.grid, &spec.training);
    let fk = family_key(family);
    let job_cfg = |g: usize, inner: usize| ProbeConfig {
        seed: derive_seed(spec.seed, &[fk, outer as u64, g as u64, inner as u64]),
        ..grid[g].clone()
    };
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..turn.inner.len()).map(move |i| (g, i)))
        .collect();
    let outcomes: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(g, i)| {
            train_job(ds, plan, outer, i, &job_cfg(g, i), guard).map(|(o, _)| match o {
                JobOutcome::Loss(l) => Some(l),
                JobOutcome::Diverged => None,
            })
        })
        .collect::<Result<_>>()?;

    let n_inner = turn.inner.len();
    let rows: Vec<GridRow> = grid
        .iter()
        .enumerate()
        .map(|(g, c)| {
            let losses = outcomes[g * n_inner..(g + 1) * n_inner].to_vec();
            let mean = losses
                .iter()
                .copied()
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64);
            GridRow {
                index: g,
                learning_rate: c.learning_rate,
                hidden: c.hidden,
                num_layers: c.num_layers,
                dropout: c.dropout,
                inner_dev_loss: losses,
                mean_dev_loss: mean,
            }
        })
        .collect();
    let means: Vec<Option<f64>> = rows.iter().map(|r| r.mean_dev_loss).collect();
    let selected = select_grid_point(&means).ok_or(RunnerError::AllDiverged { outer })?;

    let test_idx = ds.indices_in(&[turn.test]);
    let mut rest: Vec<usize> = (0..ds.len()).filter(|&i| ds.folds[i] != turn.test).collect();
    guard.check(ds, &rest, turn.test)?;
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[fk, outer as u64, u64::MAX])));
    let n_hold = ((rest.len() as f64 * spec.holdout_fraction).round() as usize).clamp(1, rest.len() - 1);
    let (hold, fit) = rest.split_at(n_hold);
    let final_cfg = ProbeConfig {
        seed: derive_seed(spec.seed, &[fk, outer as u64, selected as u64, u64::MAX - 1]),
        ..grid[selected].clone()
    };
    let final_probe = train_probe(
        &ds.examples(fit, family),
        &ds.examples(hold, family),
        ds.classes.len(),
        &final_cfg,
    )?;
    let test = evaluate(ds, &test_idx, &final_probe.params, family, turn.test)?;

    let sel_losses = &rows[selected].inner_dev_loss;
    let best_inner_turn = (0..n_inner)
        .min_by(|&a, &b| sel_losses[a].unwrap().total_cmp(&sel_losses[b].unwrap()))
        .unwrap_or(0);
    let (_, inner_params) = train_job(ds, plan, outer, best_inner_turn, &job_cfg(selected, best_inner_turn), guard)?;
    let best_inner_test = evaluate(ds, &test_idx, &inner_params, family, turn.test)?;

    Ok(RunResult {
        outer,
        family,
        grid: rows,
        selected,
        config: final_cfg,
        selection_trainings: jobs.len(),
        test_segments: test_idx.len(),
        test,
        final_trace: final_probe.trace,
        best_inner_turn,
        best_inner_test,
        params: Some(final_probe.params),
    })
}

fn summarize(runs: &[RunResult], pick: fn(&RunResult) -> Option<&EvalReport>) -> FoldSummary {
    let folds: Vec<FoldMetrics> = runs
        .iter()
        .map(|r| {
            let (auc, ap) = pick(r).map_or((f64::NAN, f64::NAN), |e| (e.macro_auc, e.macro_ap));
            FoldMetrics {
                fold: r.outer,
                macro_auc: auc,
                macro_ap: ap,
            }
        })
        .collect();
    fold_average(&folds)
}

/// All outer turns for every family, then `results.json`, summary tables,
/// curves and checkpoints under the output directory. Turns in which every
/// grid point diverged are reported as failures rather than aborting.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResults> {
    spec.validate()?;
    let plan = FoldPlan::load(&spec.fold_plan)?;
    let ds = ProbeDataset::load(&spec.stores[0], &plan, spec.aggregation)?;
    if spec.families.iter().any(|f| f.is_recurrent()) && !ds.temporal {
        return Err(RunnerError::InvalidSpec(format!(
            "store '{}' is not temporal; recurrent probes are not applicable",
            ds.layer_tag
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.parallelism)
        .build()
        .map_err(|e| RunnerError::Pool(e.to_string()))?;
    let guard = LeakageGuard::default();
    let turns: Vec<(ProbeFamily, usize)> = spec
        .families
        .iter()
        .flat_map(|&f| (0..plan.outer_turns.len()).map(move |o| (f, o)))
        .collect();
    let outcomes: Vec<Result<RunResult>> = pool.install(|| {
        turns
            .par_iter()
            .map(|&(f, o)| {
                log::info!("{} outer turn {o}", f.label());
                run_outer_turn(spec, &ds, &plan, f, o, &guard)
            })
            .collect()
    });

    let mut families: Vec<FamilyResults> = Vec::new();
    let mut failures = Vec::new();
    for (&(family, outer), res) in turns.iter().zip(outcomes) {
        if families.last().map_or(true, |f| f.family != family) {
            families.push(FamilyResults {
                family,
                runs: Vec::new(),
                retrain: fold_average(&[]),
                best_inner: fold_average(&[]),
            });
        }
        match res {
            Ok(r) => families.last_mut().expect("pushed above").runs.push(r),
            Err(e @ RunnerError::AllDiverged { .. }) => {
                log::error!("{} outer turn {outer}: {e}", family.label());
                failures.push(TurnFailure {
                    family,
                    outer,
                    error: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    for f in &mut families {
        f.retrain = summarize(&f.runs, |r| r.test.as_ref());
        f.best_inner = summarize(&f.runs, |r| r.best_inner_test.as_ref());
    }

    let results = ExperimentResults {
        layer_tag: ds.layer_tag.clone(),
        dim: ds.dim,
        classes: ds.classes.clone(),
        k: plan.k,
        seed: spec.seed,
        segments: ds.len(),
        families,
        failures,
        leakage_checks: guard.checks(),
    };
    std::fs::create_dir_all(&spec.output_dir)?;
    std::fs::write(
        spec.output_dir.join("results.json"),
        serde_json::to_string_pretty(&results)? + "\n",
    )?;
    write_report(&results, &spec.output_dir, spec.curve_points)?;
    if spec.write_checkpoints {
        let dir = spec.output_dir.join("checkpoints");
        std::fs::create_dir_all(&dir)?;
        for f in &results.families {
            for r in &f.runs {
                if let Some(p) = &r.params {
                    let path = dir.join(format!("{}_outer{}.ckpt", f.family, r.outer));
                    crate::classifiers::write_checkpoint(path, p, &r.config, Some(&r.final_trace))?;
                }
            }
        }
    }
    Ok(results)
}
