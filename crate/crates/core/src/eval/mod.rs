//! Threshold-free ranking metrics: one-vs-rest ROC-AUC and average
//! precision per class, their unweighted macro means, curve samples, and
//! averaging over outer folds.

mod export;

pub use export::{write_pr_csv, write_roc_csv, write_vertical_pr_csv, write_vertical_roc_csv};

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate class: {positives} positives, {negatives} negatives")]
    DegenerateClass { positives: usize, negatives: usize },
    #[error("every class is degenerate")]
    AllClassesDegenerate,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite score")]
    NonFinite,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Indices sorted by descending score, grouped into blocks of equal score.
fn tied_blocks(scores: &[f64]) -> Result<Vec<std::ops::Range<usize>>> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let mut blocks = Vec::new();
    let mut start = 0;
    for i in 1..=scores.len() {
        if i == scores.len() || scores[i] != scores[start] {
            blocks.push(start..i);
            start = i;
        }
    }
    Ok(blocks)
}

fn sorted_desc(scores: &[f64], positives: &[bool]) -> Result<(Vec<f64>, Vec<bool>)> {
    if scores.len() != positives.len() {
        return Err(EvalError::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            positives.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    Ok((idx.iter().map(|&i| scores[i]).collect(), idx.iter().map(|&i| positives[i]).collect()))
}

fn class_counts(positives: &[bool]) -> (usize, usize) {
    let p = positives.iter().filter(|&&b| b).count();
    (p, positives.len() - p)
}

/// Area under the ROC curve as the normalised Mann-Whitney statistic: the
/// fraction of positive/negative pairs ranked correctly, ties counting one
/// half.
pub fn roc_auc_binary(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let (p, n) = class_counts(positives);
    if p == 0 || n == 0 {
        return Err(EvalError::DegenerateClass { positives: p, negatives: n });
    }
    let (s, y) = sorted_desc(scores, positives)?;
    let blocks = tied_blocks(&s)?;
    // walk from the lowest scores upwards
    let mut neg_below = 0.0;
    let mut pairs = 0.0;
    for b in blocks.into_iter().rev() {
        let bp = y[b.clone()].iter().filter(|&&v| v).count() as f64;
        let bn = b.len() as f64 - bp;
        pairs += bp * (neg_below + 0.5 * bn);
        neg_below += bn;
    }
    Ok(pairs / (p as f64 * n as f64))
}

/// Step-wise average precision, `sum_k (R_k - R_{k-1}) P_k` over descending
/// thresholds with tied scores taken as one block.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let (p, n) = class_counts(positives);
    if p == 0 {
        return Err(EvalError::DegenerateClass { positives: p, negatives: n });
    }
    Ok(pr_curve(scores, positives)?
        .windows(2)
        .map(|w| (w[1].recall - w[0].recall) * w[1].precision)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
}

/// JSON has no infinity; the curve's starting threshold is written as "inf".
mod threshold_serde {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(D::Error::custom(format!("bad threshold {s:?}"))),
        }
    }
}

/// ROC samples at every distinct threshold, from (0,0) at `+inf` to (1,1).
pub fn roc_curve(scores: &[f64], positives: &[bool]) -> Result<Vec<RocPoint>> {
    let (p, n) = class_counts(positives);
    if p == 0 || n == 0 {
        return Err(EvalError::DegenerateClass { positives: p, negatives: n });
    }
    let (s, y) = sorted_desc(scores, positives)?;
    let mut out = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for b in tied_blocks(&s)? {
        let bp = y[b.clone()].iter().filter(|&&v| v).count();
        tp += bp;
        fp += b.len() - bp;
        out.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
            threshold: s[b.start],
        });
    }
    Ok(out)
}

/// Precision/recall at every distinct threshold, preceded by a recall-0
/// anchor whose precision is that of the first block.
pub fn pr_curve(scores: &[f64], positives: &[bool]) -> Result<Vec<PrPoint>> {
    let (p, n) = class_counts(positives);
    if p == 0 {
        return Err(EvalError::DegenerateClass { positives: p, negatives: n });
    }
    let (s, y) = sorted_desc(scores, positives)?;
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for b in tied_blocks(&s)? {
        let bp = y[b.clone()].iter().filter(|&&v| v).count();
        tp += bp;
        fp += b.len() - bp;
        out.push(PrPoint {
            recall: tp as f64 / p as f64,
            precision: tp as f64 / (tp + fp) as f64,
            threshold: s[b.start],
        });
    }
    let first = out[0].precision;
    out.insert(
        0,
        PrPoint {
            recall: 0.0,
            precision: first,
            threshold: f64::INFINITY,
        },
    );
    Ok(out)
}

/// Trapezoidal area under sampled ROC points.
pub fn trapezoid_area(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Classifier outputs for one evaluation set. `scores` rows are per
/// example, columns per class; any per-class monotone score works.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub classes: usize,
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Every class annotated in each example; empty means `{label}`.
    #[serde(default)]
    pub overlap_sets: Vec<BTreeSet<usize>>,
}

impl ScoreMatrix {
    pub fn new(classes: usize, scores: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        let m = Self {
            classes,
            scores,
            labels,
            overlap_sets: Vec::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.labels.len() {
            return Err(EvalError::Shape(format!(
                "{} score rows vs {} labels",
                self.scores.len(),
                self.labels.len()
            )));
        }
        if !self.overlap_sets.is_empty() && self.overlap_sets.len() != self.labels.len() {
            return Err(EvalError::Shape("overlap sets do not match labels".into()));
        }
        for (row, &l) in self.scores.iter().zip(&self.labels) {
            if row.len() != self.classes || l >= self.classes {
                return Err(EvalError::Shape(format!(
                    "row of {} scores / label {l} for {} classes",
                    row.len(),
                    self.classes
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(EvalError::NonFinite);
            }
        }
        Ok(())
    }

    fn column(&self, c: usize) -> Vec<f64> {
        self.scores.iter().map(|r| r[c]).collect()
    }

    fn argmax(row: &[f64]) -> usize {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub positives: usize,
    pub negatives: usize,
    /// `None` for degenerate classes.
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub roc: Vec<RocPoint>,
    pub pr: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold: Option<usize>,
    pub per_class: Vec<ClassMetrics>,
    pub macro_auc: f64,
    pub macro_ap: f64,
    /// Classes without positives or negatives, left out of both means.
    pub excluded: Vec<usize>,
    /// Top-1 accuracy against the primary label.
    pub accuracy: f64,
    /// Top-1 accuracy counting any annotated class in the example as correct.
    pub accuracy_any_overlap: f64,
}

/// Per-class one-vs-rest metrics and their unweighted means.
pub fn macro_metrics(m: &ScoreMatrix) -> Result<EvalReport> {
    m.validate()?;
    let mut per_class = Vec::with_capacity(m.classes);
    let mut excluded = Vec::new();
    for c in 0..m.classes {
        let pos: Vec<bool> = m.labels.iter().map(|&l| l == c).collect();
        let (p, n) = class_counts(&pos);
        let col = m.column(c);
        let mut cm = ClassMetrics {
            class: c,
            positives: p,
            negatives: n,
            auc: None,
            ap: None,
            roc: Vec::new(),
            pr: Vec::new(),
        };
        if p == 0 || n == 0 {
            excluded.push(c);
        } else {
            cm.auc = Some(roc_auc_binary(&col, &pos)?);
            cm.ap = Some(average_precision(&col, &pos)?);
            cm.roc = roc_curve(&col, &pos)?;
            cm.pr = pr_curve(&col, &pos)?;
        }
        per_class.push(cm);
    }
    let included: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.auc.is_some()).collect();
    if included.is_empty() {
        return Err(EvalError::AllClassesDegenerate);
    }
    let k = included.len() as f64;
    let macro_auc = included.iter().filter_map(|c| c.auc).sum::<f64>() / k;
    let macro_ap = included.iter().filter_map(|c| c.ap).sum::<f64>() / k;

    let n = m.labels.len() as f64;
    let mut hits = 0usize;
    let mut hits_any = 0usize;
    for (i, row) in m.scores.iter().enumerate() {
        let pred = ScoreMatrix::argmax(row);
        hits += usize::from(pred == m.labels[i]);
        let any = match m.overlap_sets.get(i) {
            Some(set) if !set.is_empty() => set.contains(&pred),
            _ => pred == m.labels[i],
        };
        hits_any += usize::from(any);
    }
    Ok(EvalReport {
        fold: None,
        per_class,
        macro_auc,
        macro_ap,
        excluded,
        accuracy: hits as f64 / n,
        accuracy_any_overlap: hits_any as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    /// NaN marks a degenerate fold.
    pub macro_auc: f64,
    pub macro_ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub per_fold: Vec<FoldMetrics>,
    pub mean_auc: f64,
    pub mean_ap: f64,
    pub excluded_folds: Vec<usize>,
}

/// Unweighted mean over folds; folds with a non-finite metric are skipped
/// and listed.
pub fn fold_average(folds: &[FoldMetrics]) -> FoldSummary {
    let (ok, bad): (Vec<&FoldMetrics>, Vec<&FoldMetrics>) = folds
        .iter()
        .partition(|f| f.macro_auc.is_finite() && f.macro_ap.is_finite());
    let k = ok.len() as f64;
    let mean = |get: fn(&FoldMetrics) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|f| get(f)).sum::<f64>() / k
        }
    };
    FoldSummary {
        per_fold: folds.to_vec(),
        mean_auc: mean(|f| f.macro_auc),
        mean_ap: mean(|f| f.macro_ap),
        excluded_folds: bad.iter().map(|f| f.fold).collect(),
    }
}

/// Mean TPR of several ROC curves at `points` equally spaced FPR values,
/// interpolating linearly and taking the upper end of vertical runs.
pub fn vertical_average_roc(curves: &[&[RocPoint]], points: usize) -> Vec<(f64, f64)> {
    let grid: Vec<f64> = (0..points).map(|i| i as f64 / (points - 1).max(1) as f64).collect();
    grid.iter()
        .map(|&x| {
            let tprs: Vec<f64> = curves.iter().map(|c| tpr_at(c, x)).collect();
            (x, tprs.iter().sum::<f64>() / tprs.len().max(1) as f64)
        })
        .collect()
}

fn tpr_at(curve: &[RocPoint], x: f64) -> f64 {
    let mut best: Option<f64> = None;
    for w in curve.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a.fpr..=b.fpr).contains(&x) {
            let y = if b.fpr == a.fpr {
                b.tpr
            } else {
                a.tpr + (b.tpr - a.tpr) * (x - a.fpr) / (b.fpr - a.fpr)
            };
            best = Some(best.map_or(y, |v: f64| v.max(y)));
        }
    }
    best.unwrap_or(1.0)
}

/// Mean precision at `points` recall levels; each curve contributes the
/// precision of its first sample reaching that recall.
pub fn vertical_average_pr(curves: &[&[PrPoint]], points: usize) -> Vec<(f64, f64)> {
    let grid: Vec<f64> = (0..points).map(|i| i as f64 / (points - 1).max(1) as f64).collect();
    grid.iter()
        .map(|&r| {
            let precs: Vec<f64> = curves
                .iter()
                .map(|c| c.iter().find(|p| p.recall >= r - 1e-12).map_or(0.0, |p| p.precision))
                .collect();
            (r, precs.iter().sum::<f64>() / precs.len().max(1) as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc_binary(&[0.9, 0.8, 0.7, 0.6], &b(&[1, 0, 1, 0])).unwrap(), 0.75);
        assert_eq!(roc_auc_binary(&[0.9, 0.8, 0.2, 0.1], &b(&[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(roc_auc_binary(&[0.5; 6], &b(&[1, 0, 1, 0, 0, 1])).unwrap(), 0.5);
        assert!(matches!(
            roc_auc_binary(&[0.1, 0.2], &b(&[1, 1])),
            Err(EvalError::DegenerateClass { positives: 2, negatives: 0 })
        ));
        assert!(matches!(roc_auc_binary(&[f64::NAN, 0.2], &b(&[1, 0])), Err(EvalError::NonFinite)));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[3.0, 2.0, 1.0], &b(&[1, 0, 1])).unwrap(), (1.0 + 2.0 / 3.0) / 2.0);
        assert_eq!(average_precision(&[3.0, 2.0, 1.0, 0.0], &b(&[1, 1, 0, 0])).unwrap(), 1.0);
        for n in [1usize, 2, 5, 17] {
            let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
            let mut pos = vec![false; n];
            pos[n - 1] = true;
            assert!((average_precision(&scores, &pos).unwrap() - 1.0 / n as f64).abs() < 1e-15);
        }
        // a tied block counts once: precision 1/2 at full recall
        assert_eq!(average_precision(&[1.0, 1.0], &b(&[1, 0])).unwrap(), 0.5);
        assert!(average_precision(&[1.0], &b(&[0])).is_err());
    }

    #[test]
    fn curves_shape() {
        let scores = [0.9, 0.8, 0.8, 0.4, 0.3];
        let pos = b(&[1, 0, 1, 0, 1]);
        let roc = roc_curve(&scores, &pos).unwrap();
        assert_eq!(roc.len(), 5);
        assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
        assert_eq!((roc[4].fpr, roc[4].tpr), (1.0, 1.0));
        assert!((trapezoid_area(&roc) - roc_auc_binary(&scores, &pos).unwrap()).abs() < 1e-12);
        let pr = pr_curve(&scores, &pos).unwrap();
        assert_eq!(pr.len(), 5);
        assert!(pr.windows(2).all(|w| w[1].recall >= w[0].recall));
    }

    #[test]
    fn macro_symmetric_two_class() {
        let scores = vec![vec![0.9, 0.1], vec![0.6, 0.4], vec![0.3, 0.7], vec![0.45, 0.55]];
        let m = ScoreMatrix::new(2, scores, vec![0, 1, 1, 0]).unwrap();
        let r = macro_metrics(&m).unwrap();
        assert_eq!(r.per_class[0].auc, r.per_class[1].auc);
        assert_eq!(r.macro_auc, r.per_class[0].auc.unwrap());
    }

    #[test]
    fn macro_excludes_empty_class() {
        let scores = vec![vec![0.7, 0.2, 0.1], vec![0.2, 0.7, 0.1], vec![0.6, 0.3, 0.1]];
        let m = ScoreMatrix::new(3, scores, vec![0, 1, 0]).unwrap();
        let r = macro_metrics(&m).unwrap();
        assert_eq!(r.excluded, vec![2]);
        assert_eq!(r.macro_auc, 1.0);
        assert_eq!(r.accuracy, 1.0);

        let single = ScoreMatrix::new(2, vec![vec![0.3, 0.7]], vec![1]).unwrap();
        assert!(matches!(macro_metrics(&single), Err(EvalError::AllClassesDegenerate)));
    }

    #[test]
    fn any_overlap_accuracy() {
        let mut m = ScoreMatrix::new(3, vec![vec![0.1, 0.8, 0.1], vec![0.8, 0.1, 0.1]], vec![0, 1]).unwrap();
        m.overlap_sets = vec![[0, 1].into(), [0, 1].into()];
        let r = macro_metrics(&m).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(r.accuracy_any_overlap, 1.0);
    }

    #[test]
    fn fold_average_cases() {
        let f = |fold, v| FoldMetrics { fold, macro_auc: v, macro_ap: v };
        let s = fold_average(&[f(0, 0.8), f(1, 0.9)]);
        assert!((s.mean_auc - 0.85).abs() < 1e-15);
        assert_eq!(fold_average(&[f(0, 0.7)]).mean_auc, 0.7);
        let s = fold_average(&[f(0, 0.8), f(1, f64::NAN), f(2, 0.6)]);
        assert_eq!(s.excluded_folds, vec![1]);
        assert!((s.mean_ap - 0.7).abs() < 1e-15);
        assert_eq!(s.per_fold.len(), 3);
    }

    #[test]
    fn vertical_average_of_identical_curves() {
        let roc = roc_curve(&[0.9, 0.5, 0.4, 0.1], &b(&[1, 0, 1, 0])).unwrap();
        let avg = vertical_average_roc(&[&roc, &roc], 5);
        assert_eq!(avg.first().unwrap(), &(0.0, 0.5));
        assert_eq!(avg.last().unwrap(), &(1.0, 1.0));
        assert_eq!(avg[2], (0.5, 1.0));
        let pr = pr_curve(&[0.9, 0.5, 0.4, 0.1], &b(&[1, 0, 1, 0])).unwrap();
        let pavg = vertical_average_pr(&[&pr], 3);
        assert_eq!(pavg, vec![(0.0, 1.0), (0.5, 1.0), (1.0, 2.0 / 3.0)]);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_maps(raw in proptest::collection::vec((0u8..20, any::<bool>()), 2..80)) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 4.0).collect();
            let pos: Vec<bool> = raw.iter().map(|r| r.1).collect();
            prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
            let base = roc_auc_binary(&scores, &pos).unwrap();
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let aff: Vec<f64> = scores.iter().map(|s| 3.0 * s - 7.0).collect();
            prop_assert_eq!(roc_auc_binary(&exp, &pos).unwrap(), base);
            prop_assert_eq!(roc_auc_binary(&aff, &pos).unwrap(), base);
        }

        #[test]
        fn roc_curve_properties(raw in proptest::collection::vec((0u8..10, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
            let pos: Vec<bool> = raw.iter().map(|r| r.1).collect();
            prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
            let roc = roc_curve(&scores, &pos).unwrap();
            prop_assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
            let last = roc.last().unwrap();
            prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
            prop_assert!(roc.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
            prop_assert!((trapezoid_area(&roc) - roc_auc_binary(&scores, &pos).unwrap()).abs() < 1e-9);
            let pr = pr_curve(&scores, &pos).unwrap();
            prop_assert!(pr.windows(2).all(|w| w[1].recall >= w[0].recall));
        }
    }
}
