//! Confusion counts, rates, ROC and precision-recall curves, threshold selection.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.fp + self.tn
    }

    pub fn rates(&self) -> Rates {
        rates(self)
    }
}

pub fn confusion(labels: &[bool], predictions: &[bool]) -> Result<ConfusionCounts> {
    if labels.len() != predictions.len() {
        return Err(Error::Data(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y, p) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Counts for the rule `score >= threshold`.
pub fn confusion_at(labels: &[bool], scores: &[f64], threshold: f64) -> Result<ConfusionCounts> {
    let predictions: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    confusion(labels, &predictions)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub tpr: f64,
    pub fpr: f64,
    pub precision: f64,
    pub recall: f64,
    pub g_mean: f64,
    pub f1: f64,
    /// False when nothing was predicted positive; precision is then reported as 0.
    pub precision_defined: bool,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn rates(c: &ConfusionCounts) -> Rates {
    let tpr = ratio(c.tp, c.positives());
    let fpr = ratio(c.fp, c.negatives());
    let precision = ratio(c.tp, c.tp + c.fp);
    let f1 = if precision + tpr > 0.0 {
        2.0 * precision * tpr / (precision + tpr)
    } else {
        0.0
    };
    Rates {
        tpr,
        fpr,
        precision,
        recall: tpr,
        g_mean: (tpr * (1.0 - fpr)).sqrt(),
        f1,
        precision_defined: c.tp + c.fp > 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveKind {
    /// x = FPR, y = TPR.
    Roc,
    /// x = recall, y = precision.
    Pr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
    /// The open end of a curve uses `+inf`, stored as `null` in JSON.
    #[serde(with = "infinite_as_null")]
    pub threshold: f64,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub kind: CurveKind,
    pub points: Vec<CurvePoint>,
    pub auc: f64,
}

impl Curve {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "threshold"])?;
        for p in &self.points {
            w.write_record([p.x.to_string(), p.y.to_string(), p.threshold.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("curve csv", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

fn check_inputs(labels: &[bool], scores: &[f64]) -> Result<(u64, u64)> {
    if labels.len() != scores.len() {
        return Err(Error::Data(format!(
            "{} labels but {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let p = labels.iter().filter(|&&y| y).count() as u64;
    let n = labels.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(Error::Data("curves need both positive and negative labels".into()));
    }
    Ok((p, n))
}

/// Counts for `score >= t` at every distinct score `t`, highest first. Tied
/// scores collapse into a single entry.
pub fn score_sweep(labels: &[bool], scores: &[f64]) -> Result<Vec<(f64, ConfusionCounts)>> {
    let (p, n) = check_inputs(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((
            t,
            ConfusionCounts {
                tp,
                fp,
                tn: n - fp,
                fn_: p - tp,
            },
        ));
    }
    Ok(out)
}

/// Trapezoid area under ROC points given as cumulative (fp, tp) counts,
/// starting implicitly at (0, 0). Accumulated in integers so it equals the
/// concordance statistic up to one rounding.
pub fn roc_auc_from_counts(counts: &[ConfusionCounts]) -> f64 {
    let Some(last) = counts.last() else {
        return f64::NAN;
    };
    let (p, n) = (last.positives() as u128, last.negatives() as u128);
    let (mut prev_fp, mut prev_tp) = (0u128, 0u128);
    let mut twice_area = 0u128;
    for c in counts {
        let (fp, tp) = (c.fp as u128, c.tp as u128);
        twice_area += (fp - prev_fp) * (tp + prev_tp);
        prev_fp = fp;
        prev_tp = tp;
    }
    twice_area as f64 / (2 * p * n) as f64
}

pub fn roc_curve(labels: &[bool], scores: &[f64]) -> Result<Curve> {
    let sweep = score_sweep(labels, scores)?;
    let counts: Vec<ConfusionCounts> = sweep.iter().map(|(_, c)| *c).collect();
    let mut points = vec![CurvePoint {
        x: 0.0,
        y: 0.0,
        threshold: f64::INFINITY,
    }];
    points.extend(sweep.iter().map(|(t, c)| {
        let r = c.rates();
        CurvePoint {
            x: r.fpr,
            y: r.tpr,
            threshold: *t,
        }
    }));
    Ok(Curve {
        kind: CurveKind::Roc,
        points,
        auc: roc_auc_from_counts(&counts),
    })
}

/// Step-wise average precision: `sum (R_i - R_{i-1}) P_i`.
pub fn average_precision(counts: &[ConfusionCounts]) -> f64 {
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for c in counts {
        let r = c.rates();
        ap += (r.recall - prev_recall) * r.precision;
        prev_recall = r.recall;
    }
    ap
}

pub fn pr_curve(labels: &[bool], scores: &[f64]) -> Result<Curve> {
    let sweep = score_sweep(labels, scores)?;
    let counts: Vec<ConfusionCounts> = sweep.iter().map(|(_, c)| *c).collect();
    let mut points = vec![CurvePoint {
        x: 0.0,
        y: 1.0,
        threshold: f64::INFINITY,
    }];
    points.extend(sweep.iter().map(|(t, c)| {
        let r = c.rates();
        CurvePoint {
            x: r.recall,
            y: r.precision,
            threshold: *t,
        }
    }));
    Ok(Curve {
        kind: CurveKind::Pr,
        points,
        auc: average_precision(&counts),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    GMean,
    F1,
}

impl Objective {
    pub fn value(self, c: &ConfusionCounts) -> f64 {
        let r = c.rates();
        match self {
            Objective::GMean => r.g_mean,
            Objective::F1 => r.f1,
        }
    }
}

/// Threshold maximizing `objective`; ties go to the smaller threshold.
pub fn select_best(candidates: &[(f64, ConfusionCounts)], objective: Objective) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for (t, c) in candidates {
        let v = objective.value(c);
        best = match best {
            Some((bt, bv)) if bv > v || (bv == v && bt <= *t) => Some((bt, bv)),
            _ => Some((*t, v)),
        };
    }
    best
}

/// Best cut for the rule `score >= threshold`, searched over distinct scores.
pub fn best_threshold(labels: &[bool], scores: &[f64], objective: Objective) -> Result<(f64, f64)> {
    let sweep = score_sweep(labels, scores)?;
    Ok(select_best(&sweep, objective).expect("non-empty sweep"))
}
