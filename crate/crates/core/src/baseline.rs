//! Minimum-connection-time baseline: a connection is predicted missed when
//! its connection time is below a threshold swept over 0..=500 minutes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Feature, RawTable};
use crate::error::{Error, Result};
use crate::metrics::{
    roc_auc_from_counts, select_best, ConfusionCounts, Curve, CurveKind, CurvePoint, Objective, Rates,
};

pub const SWEEP_MAX: u32 = 500;
pub const SWEEP_STEP: u32 = 10;
/// Reference minimum connection time.
pub const MCT_MINUTES: u32 = 60;

pub fn sweep_thresholds() -> Vec<u32> {
    (0..=SWEEP_MAX).step_by(SWEEP_STEP as usize).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub threshold: u32,
    pub counts: ConfusionCounts,
    pub rates: Rates,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestThreshold {
    pub threshold: u32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub time_feature: String,
    pub rows: Vec<BaselineRow>,
    pub roc: Curve,
    pub pr: Curve,
    pub best_g_mean: BestThreshold,
    pub best_f1: BestThreshold,
    pub mct: BaselineRow,
}

/// Counts for the rule `time < threshold`.
pub fn confusion_below(times: &[f64], labels: &[bool], threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&t, &y) in times.iter().zip(labels) {
        match (y, t < threshold) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    c
}

fn row(times: &[f64], labels: &[bool], threshold: u32) -> BaselineRow {
    let counts = confusion_below(times, labels, threshold as f64);
    BaselineRow {
        threshold,
        counts,
        rates: counts.rates(),
    }
}

/// Sweeps the baseline over raw connection times in minutes.
pub fn evaluate_times(times: &[f64], labels: &[bool], time_feature: &str) -> Result<BaselineReport> {
    if times.len() != labels.len() {
        return Err(Error::Data(format!("{} times but {} labels", times.len(), labels.len())));
    }
    if times.iter().any(|t| t.is_nan()) {
        return Err(Error::Data(format!("missing value in `{time_feature}`")));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Data("baseline needs both classes".into()));
    }
    let rows: Vec<BaselineRow> = sweep_thresholds().into_iter().map(|t| row(times, labels, t)).collect();

    let mut roc_counts: Vec<ConfusionCounts> = rows.iter().map(|r| r.counts).collect();
    let all = ConfusionCounts {
        tp: positives as u64,
        fp: (labels.len() - positives) as u64,
        tn: 0,
        fn_: 0,
    };
    roc_counts.push(all);
    let mut roc_points = vec![CurvePoint { x: 0.0, y: 0.0, threshold: 0.0 }];
    roc_points.extend(rows.iter().map(|r| CurvePoint {
        x: r.rates.fpr,
        y: r.rates.tpr,
        threshold: r.threshold as f64,
    }));
    roc_points.push(CurvePoint { x: 1.0, y: 1.0, threshold: f64::INFINITY });
    let roc = Curve {
        kind: CurveKind::Roc,
        points: roc_points,
        auc: roc_auc_from_counts(&roc_counts),
    };

    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut pr_points = Vec::with_capacity(rows.len());
    for r in &rows {
        ap += (r.rates.recall - prev_recall) * r.rates.precision;
        prev_recall = r.rates.recall;
        pr_points.push(CurvePoint {
            x: r.rates.recall,
            y: r.rates.precision,
            threshold: r.threshold as f64,
        });
    }
    let pr = Curve {
        kind: CurveKind::Pr,
        points: pr_points,
        auc: ap,
    };

    let candidates: Vec<(f64, ConfusionCounts)> = rows.iter().map(|r| (r.threshold as f64, r.counts)).collect();
    let best = |objective| {
        let (t, v) = select_best(&candidates, objective).expect("non-empty sweep");
        BestThreshold {
            threshold: t as u32,
            value: v,
        }
    };
    let mct = *rows
        .iter()
        .find(|r| r.threshold == MCT_MINUTES)
        .expect("sweep contains the reference threshold");
    Ok(BaselineReport {
        time_feature: time_feature.to_string(),
        best_g_mean: best(Objective::GMean),
        best_f1: best(Objective::F1),
        rows,
        roc,
        pr,
        mct,
    })
}

/// Evaluates the baseline on the raw (unscaled) `time_feature` column.
pub fn evaluate_baseline(table: &RawTable, time_feature: Feature) -> Result<BaselineReport> {
    if !time_feature.is_connection_time() {
        return Err(Error::Schema(format!(
            "`{}` is not a connection-time feature",
            time_feature.name()
        )));
    }
    let col = table.column_index(time_feature).ok_or_else(|| {
        Error::Schema(format!("`{}` is not part of this stage's features", time_feature.name()))
    })?;
    let times: Vec<f64> = table
        .rows
        .iter()
        .map(|r| r.values[col].as_num().unwrap_or(f64::NAN))
        .collect();
    evaluate_times(&times, &table.labels(), time_feature.name())
}

impl BaselineReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "threshold", "TP", "FP", "TN", "FN", "tpr", "fpr", "precision", "recall", "g_mean", "f1",
        ])?;
        for r in &self.rows {
            let c = r.counts;
            let q = r.rates;
            w.write_record([
                r.threshold.to_string(),
                c.tp.to_string(),
                c.fp.to_string(),
                c.tn.to_string(),
                c.fn_.to_string(),
                q.tpr.to_string(),
                q.fpr.to_string(),
                q.precision.to_string(),
                q.recall.to_string(),
                q.g_mean.to_string(),
                q.f1.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("baseline csv", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}
