use std::fmt::Write as _;
use std::path::Path;

use super::{ExperimentResults, FamilyResults, Result};
use crate::eval::{
    vertical_average_pr, vertical_average_roc, write_pr_csv, write_roc_csv, write_vertical_pr_csv,
    write_vertical_roc_csv, FoldSummary,
};

/// End-to-end supervised reference (AST-seq) macro AUC on the two
/// elephant corpora; mAP was not reported.
pub const AERD_AUC_ELEV: f64 = 0.8710;
pub const AERD_AUC_LDC: f64 = 0.9570;

fn fmt_metric(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "---".into()
    }
}

/// Plain-text table, one row per classifier family.
pub fn summary_table(results: &ExperimentResults) -> String {
    let mut s = String::new();
    let header = format!("{:<16} {:>6}  {:<8} {:>8} {:>8}", "Embedding", "Dim.", "Class.", "AUC", "mAP");
    let rule = "-".repeat(header.len());
    let row = |s: &mut String, name: &str, dim: &str, class: &str, auc: String, map: String| {
        let _ = writeln!(s, "{name:<16} {dim:>6}  {class:<8} {auc:>8} {map:>8}");
    };
    let retrain: fn(&FamilyResults) -> &FoldSummary = |f| &f.retrain;
    let best_inner: fn(&FamilyResults) -> &FoldSummary = |f| &f.best_inner;
    for (title, pick) in [
        ("final fit on all non-test folds", retrain),
        ("best inner model, no retrain", best_inner),
    ] {
        let _ = writeln!(s, "{title}");
        let _ = writeln!(s, "{header}");
        let _ = writeln!(s, "{rule}");
        for (i, f) in results.families.iter().enumerate() {
            let sum = pick(f);
            let (name, dim) = if i == 0 {
                (results.layer_tag.clone(), results.dim.to_string())
            } else {
                (String::new(), String::new())
            };
            row(&mut s, &name, &dim, f.family.label(), fmt_metric(sum.mean_auc), fmt_metric(sum.mean_ap));
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(
        s,
        "reference: AERD (AST-seq, end-to-end) AUC {AERD_AUC_ELEV:.4} (ELEV) / {AERD_AUC_LDC:.4} (LDC), mAP ---"
    );
    for f in &results.families {
        if !f.retrain.excluded_folds.is_empty() {
            let _ = writeln!(s, "{}: folds excluded as degenerate: {:?}", f.family.label(), f.retrain.excluded_folds);
        }
    }
    for fail in &results.failures {
        let _ = writeln!(s, "{} outer turn {} failed: {}", fail.family.label(), fail.outer, fail.error);
    }
    s
}

/// Writes `summary.csv`, `summary.txt` and per-fold plus vertically
/// averaged curves under `dir/curves/<family>/`.
pub fn write_report(results: &ExperimentResults, dir: &Path, curve_points: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("summary.txt"), summary_table(results))?;

    let mut csv = String::from("embedding,dim,classifier,mode,auc,map,folds\n");
    for f in &results.families {
        for (mode, sum) in [("retrain", &f.retrain), ("best_inner", &f.best_inner)] {
            let _ = writeln!(
                csv,
                "{},{},{},{mode},{},{},{}",
                results.layer_tag,
                results.dim,
                f.family.label(),
                sum.mean_auc,
                sum.mean_ap,
                sum.per_fold.len() - sum.excluded_folds.len()
            );
        }
    }
    std::fs::write(dir.join("summary.csv"), csv)?;

    for f in &results.families {
        let base = dir.join("curves").join(f.family.to_string());
        for c in 0..results.classes.len() {
            let mut rocs = Vec::new();
            let mut prs = Vec::new();
            for r in &f.runs {
                let Some(cm) = r.test.as_ref().and_then(|t| t.per_class.get(c)) else {
                    continue;
                };
                if cm.auc.is_none() {
                    continue;
                }
                let fold_dir = base.join(format!("fold{}", r.outer));
                write_roc_csv(fold_dir.join(format!("class{c}_roc.csv")), &cm.roc)?;
                write_pr_csv(fold_dir.join(format!("class{c}_pr.csv")), &cm.pr)?;
                rocs.push(cm.roc.as_slice());
                prs.push(cm.pr.as_slice());
            }
            if !rocs.is_empty() {
                let mean_dir = base.join("mean");
                write_vertical_roc_csv(
                    mean_dir.join(format!("class{c}_roc.csv")),
                    &vertical_average_roc(&rocs, curve_points),
                )?;
                write_vertical_pr_csv(
                    mean_dir.join(format!("class{c}_pr.csv")),
                    &vertical_average_pr(&prs, curve_points),
                )?;
            }
        }
    }
    Ok(())
}
