//! One decision-support run per stage: clean, split, preprocess, oversample,
//! train, evaluate against the threshold baseline, explain, cost, persist.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{evaluate_baseline, BaselineReport};
use crate::cost::{cost_report, CostParameters, StageCost};
use crate::domain::{stage_features, stage_time_feature, ConnectionRecord, DsmStage, RawTable};
use crate::error::{Error, Result};
use crate::gbdt::{self, BoostConfig, TrainOutcome, TreeEnsemble};
use crate::gmm::{GmmModel, OversampleConfig, OversampleReport};
use crate::metrics::{pr_curve, roc_curve, score_sweep, select_best, ConfusionCounts, Curve, Objective, Rates};
use crate::preprocess::{stratified_split, Preprocessor, Split, DEFAULT_SMOOTHING};
use crate::shap::{summarize, ShapSummary};
use crate::synthgen::{generate, ingest_csv, SynthConfig};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(SynthConfig),
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub stage: DsmStage,
    pub data: DataSource,
    /// Seed of the train/test split.
    pub seed: u64,
    pub test_fraction: f64,
    pub smoothing: f64,
    pub oversample: OversampleConfig,
    pub boost: BoostConfig,
    pub c_prev: f64,
    pub cost_ratio: f64,
    /// Test rows explained by TreeSHAP; `None` explains the whole test split.
    pub shap_rows: Option<usize>,
}

impl RunConfig {
    /// Defaults for `stage` with every seed set to `seed`.
    pub fn new(stage: DsmStage, data: DataSource, seed: u64) -> Self {
        RunConfig {
            stage,
            data,
            seed,
            test_fraction: 0.10,
            smoothing: DEFAULT_SMOOTHING,
            oversample: OversampleConfig {
                seed,
                ..OversampleConfig::default()
            },
            boost: BoostConfig {
                seed,
                ..BoostConfig::default()
            },
            c_prev: 1.0,
            cost_ratio: 2.0,
            shap_rows: None,
        }
    }

    pub fn synthetic(stage: DsmStage, seed: u64) -> Self {
        Self::new(
            stage,
            DataSource::Synthetic(SynthConfig {
                seed,
                ..SynthConfig::default()
            }),
            seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction {} outside (0, 1)", self.test_fraction)));
        }
        if self.shap_rows == Some(0) {
            return Err(Error::Config("shap_rows must be positive".into()));
        }
        self.boost.validate()?;
        CostParameters::new(self.c_prev, self.cost_ratio)?;
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loads records for `stage`; returns them with the number of rejected CSV lines.
pub fn load_records(source: &DataSource, stage: DsmStage) -> Result<(Vec<ConnectionRecord>, usize)> {
    match source {
        DataSource::Synthetic(cfg) => Ok((generate(cfg)?, 0)),
        DataSource::Csv { path } => {
            let report = ingest_csv(path, Some(stage))?;
            if !report.rejects.is_empty() {
                report.write_rejects(path)?;
            }
            Ok((report.records, report.rejects.len()))
        }
    }
}

/// Listwise-deletes records incomplete for `stage` and builds the stage
/// table. Row ids are positions in `records`.
pub fn stage_table(records: &[ConnectionRecord], stage: DsmStage) -> Result<(RawTable, usize)> {
    let features = stage_features(stage);
    let kept: Vec<usize> = (0..records.len())
        .filter(|&i| features.iter().all(|&f| records[i].feature_value(f).is_some()))
        .collect();
    let subset: Vec<ConnectionRecord> = kept.iter().map(|&i| records[i].clone()).collect();
    let mut table = RawTable::from_records(&subset, features)?;
    for (row, &i) in table.rows.iter_mut().zip(&kept) {
        row.id = i as u64;
    }
    Ok((table, records.len() - kept.len()))
}

/// Everything fitted on the training rows of one split.
#[derive(Debug, Clone)]
pub struct FittedModels {
    pub preprocessor: Preprocessor,
    pub oversample: OversampleReport,
    pub outcome: TrainOutcome,
}

impl FittedModels {
    pub fn ensemble(&self) -> &TreeEnsemble {
        &self.outcome.ensemble
    }

    pub fn gmm(&self) -> Option<&GmmModel> {
        self.oversample.gmm.as_ref()
    }

    pub fn hashes(&self) -> Result<ArtifactHashes> {
        Ok(ArtifactHashes {
            model: sha256_hex(self.ensemble().to_json()?.as_bytes()),
            preprocess: sha256_hex(self.preprocessor.to_json()?.as_bytes()),
            gmm: match self.gmm() {
                Some(g) => Some(sha256_hex(g.to_json()?.as_bytes())),
                None => None,
            },
        })
    }
}

/// Fits preprocessing, the oversampling mixture and the ensemble on
/// `split.train` only; test rows are never read.
pub fn fit_models(table: &RawTable, split: &Split, config: &RunConfig) -> Result<FittedModels> {
    let train_table = table.subset(&split.train);
    let preprocessor = Preprocessor::fit(&train_table, config.smoothing).map_err(|e| e.in_step("preprocess"))?;
    let train = preprocessor.transform(&train_table).map_err(|e| e.in_step("preprocess"))?;
    let (augmented, oversample) =
        crate::gmm::oversample_minority(&train, &config.oversample).map_err(|e| e.in_step("oversample"))?;
    let outcome = gbdt::train(&augmented, &config.boost).map_err(|e| e.in_step("train"))?;
    Ok(FittedModels {
        preprocessor,
        oversample,
        outcome,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHashes {
    pub model: String,
    pub preprocess: String,
    pub gmm: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub n_records: usize,
    pub n_rejected: usize,
    pub n_dropped: usize,
    pub n_rows: usize,
    pub minority_fraction: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_synthetic: usize,
    pub gmm_components: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub rates: Rates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub best_g_mean: OperatingPoint,
    pub best_f1: OperatingPoint,
    pub n_trees: usize,
    /// Mean training log-loss at the base score and after each round.
    pub train_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub mean_abs_shap: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapReport {
    pub n_rows: usize,
    pub base_value: f64,
    pub importance: Vec<FeatureImportance>,
    pub max_local_accuracy_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub split: u64,
    pub oversample: u64,
    pub boost: u64,
    pub data: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub steps: Vec<(String, f64)>,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub version: u32,
    pub stage: DsmStage,
    pub config: RunConfig,
    pub config_hash: String,
    pub seeds: Seeds,
    pub data: DataSummary,
    pub model: ModelEvaluation,
    pub baseline: BaselineReport,
    pub shap: ShapReport,
    pub cost: StageCost,
    pub artifacts: ArtifactHashes,
    pub timings: Timings,
}

impl EvaluationReport {
    /// The report with timings cleared, for determinism comparisons.
    pub fn without_timings(&self) -> EvaluationReport {
        EvaluationReport {
            timings: Timings::default(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<EvaluationReport> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: EvaluationReport = serde_json::from_str(&text)?;
        if report.version != REPORT_VERSION {
            return Err(Error::Version {
                found: report.version,
                expected: REPORT_VERSION,
            });
        }
        Ok(report)
    }
}

/// A finished run: the report plus the in-memory artifacts behind it.
#[derive(Debug, Clone)]
pub struct StageRun {
    pub report: EvaluationReport,
    pub models: FittedModels,
    pub model_roc: Curve,
    pub model_pr: Curve,
    pub shap: ShapSummary,
    pub test_ids: Vec<u64>,
}

struct Clock {
    start: Instant,
    last: Instant,
    steps: Vec<(String, f64)>,
}

impl Clock {
    fn new() -> Clock {
        let now = Instant::now();
        Clock {
            start: now,
            last: now,
            steps: Vec::new(),
        }
    }

    fn lap(&mut self, step: &str) {
        let now = Instant::now();
        let secs = (now - self.last).as_secs_f64();
        info!("{step}: {secs:.2}s");
        self.steps.push((step.to_string(), secs));
        self.last = now;
    }

    fn finish(self) -> Timings {
        Timings {
            total_seconds: self.start.elapsed().as_secs_f64(),
            steps: self.steps,
        }
    }
}

fn operating_point(sweep: &[(f64, ConfusionCounts)], objective: Objective) -> OperatingPoint {
    let (threshold, _) = select_best(sweep, objective).expect("non-empty sweep");
    let counts = sweep.iter().find(|(t, _)| *t == threshold).expect("threshold from sweep").1;
    OperatingPoint {
        threshold,
        counts,
        rates: counts.rates(),
    }
}

/// Runs every step for `config.stage` in memory.
pub fn run_stage(config: &RunConfig) -> Result<StageRun> {
    config.validate()?;
    let stage = config.stage;
    let mut clock = Clock::new();

    let (records, n_rejected) = load_records(&config.data, stage).map_err(|e| e.in_step("load"))?;
    clock.lap("load");
    let (table, n_dropped) = stage_table(&records, stage).map_err(|e| e.in_step("clean"))?;
    let n_records = records.len();
    drop(records);
    clock.lap("clean");
    let labels = table.labels();
    let split = stratified_split(&labels, config.test_fraction, config.seed).map_err(|e| e.in_step("split"))?;
    clock.lap("split");
    let models = fit_models(&table, &split, config)?;
    clock.lap("fit");

    let test_table = table.subset(&split.test);
    let test = models.preprocessor.transform(&test_table).map_err(|e| e.in_step("score"))?;
    let scores = models.ensemble().predict_proba(&test).map_err(|e| e.in_step("score"))?;
    let model_roc = roc_curve(&test.labels, &scores).map_err(|e| e.in_step("evaluate"))?;
    let model_pr = pr_curve(&test.labels, &scores).map_err(|e| e.in_step("evaluate"))?;
    let sweep = score_sweep(&test.labels, &scores).map_err(|e| e.in_step("evaluate"))?;
    let best_g_mean = operating_point(&sweep, Objective::GMean);
    let best_f1 = operating_point(&sweep, Objective::F1);
    clock.lap("evaluate");

    let baseline = evaluate_baseline(&test_table, stage_time_feature(stage)).map_err(|e| e.in_step("baseline"))?;
    clock.lap("baseline");

    let explained = match config.shap_rows {
        Some(k) if k < test.n_rows() => {
            let mut idx: Vec<usize> = (0..test.n_rows()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
            idx.truncate(k);
            idx.sort_unstable();
            test.subset(&idx)
        }
        _ => test.clone(),
    };
    let shap = summarize(models.ensemble(), &explained).map_err(|e| e.in_step("explain"))?;
    clock.lap("explain");

    let cost = if stage == DsmStage::PostOperations {
        StageCost::NotApplicable {
            reason: "post-operations predictions arrive after the connection; nothing can be prevented".into(),
        }
    } else {
        let params = CostParameters::new(config.c_prev, config.cost_ratio)?;
        StageCost::Applicable(cost_report(&best_f1.counts, &params))
    };

    let data_seed = match &config.data {
        DataSource::Synthetic(s) => Some(s.seed),
        DataSource::Csv { .. } => None,
    };
    let report = EvaluationReport {
        version: REPORT_VERSION,
        stage,
        config: config.clone(),
        config_hash: config.hash()?,
        seeds: Seeds {
            split: config.seed,
            oversample: config.oversample.seed,
            boost: config.boost.seed,
            data: data_seed,
        },
        data: DataSummary {
            n_records,
            n_rejected,
            n_dropped,
            n_rows: table.len(),
            minority_fraction: labels.iter().filter(|&&y| y).count() as f64 / labels.len() as f64,
            n_train: split.train.len(),
            n_test: split.test.len(),
            n_synthetic: models.oversample.n_synthetic,
            gmm_components: models.oversample.n_components_used,
            warnings: models.oversample.warnings.clone(),
        },
        model: ModelEvaluation {
            roc_auc: model_roc.auc,
            pr_auc: model_pr.auc,
            best_g_mean,
            best_f1,
            n_trees: models.ensemble().trees.len(),
            train_loss: models.outcome.train_loss.clone(),
        },
        baseline,
        shap: ShapReport {
            n_rows: shap.n_rows(),
            base_value: shap.base_value,
            importance: shap
                .ranking
                .iter()
                .enumerate()
                .map(|(r, &j)| FeatureImportance {
                    feature: shap.features[j].clone(),
                    mean_abs_shap: shap.importance[j],
                    rank: r + 1,
                })
                .collect(),
            max_local_accuracy_error: shap.max_local_accuracy_error,
        },
        cost,
        artifacts: models.hashes()?,
        timings: Timings::default(),
    };
    let mut run = StageRun {
        report,
        models,
        model_roc,
        model_pr,
        shap,
        test_ids: test_table.rows.iter().map(|r| r.id).collect(),
    };
    run.report.timings = clock.finish();
    Ok(run)
}

/// Runs the stage and writes its bundle into `out_dir`.
pub fn run_stage_to(config: &RunConfig, out_dir: &Path) -> Result<StageRun> {
    let run = run_stage(config)?;
    write_bundle(&run, out_dir).map_err(|e| e.in_step("write"))?;
    Ok(run)
}

pub mod files {
    pub const REPORT: &str = "report.json";
    pub const MODEL: &str = "model.json";
    pub const PREPROCESS: &str = "preprocess.json";
    pub const GMM: &str = "gmm.json";
    pub const BASELINE: &str = "baseline.csv";
    pub const SHAP_SUMMARY: &str = "shap_summary.csv";
    pub const CURVES: &str = "curves";
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_bundle_into(run: &StageRun, dir: &Path) -> Result<()> {
    let curves = dir.join(files::CURVES);
    fs::create_dir_all(&curves).map_err(|e| Error::io(&curves, e))?;
    write_file(&dir.join(files::REPORT), run.report.to_json()?.as_bytes())?;
    write_file(&dir.join(files::MODEL), run.models.ensemble().to_json()?.as_bytes())?;
    write_file(&dir.join(files::PREPROCESS), run.models.preprocessor.to_json()?.as_bytes())?;
    if let Some(g) = run.models.gmm() {
        write_file(&dir.join(files::GMM), g.to_json()?.as_bytes())?;
    }
    run.report.baseline.save_csv(&dir.join(files::BASELINE))?;
    run.model_roc.save_csv(&curves.join("model_roc.csv"))?;
    run.model_pr.save_csv(&curves.join("model_pr.csv"))?;
    run.report.baseline.roc.save_csv(&curves.join("baseline_roc.csv"))?;
    run.report.baseline.pr.save_csv(&curves.join("baseline_pr.csv"))?;
    run.shap.save_csv(&dir.join(files::SHAP_SUMMARY))?;
    Ok(())
}

/// Writes the bundle to a sibling temporary directory and renames it into
/// place; on failure nothing is left behind.
pub fn write_bundle(run: &StageRun, out_dir: &Path) -> Result<()> {
    let parent = match out_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let name = out_dir
        .file_name()
        .ok_or_else(|| Error::Config(format!("invalid output directory {}", out_dir.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    if let Err(e) = write_bundle_into(run, &tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    let old = parent.join(format!(".{name}.old-{}", std::process::id()));
    if out_dir.exists() {
        fs::rename(out_dir, &old).map_err(|e| Error::io(out_dir, e))?;
    }
    if let Err(e) = fs::rename(&tmp, out_dir) {
        if old.exists() {
            let _ = fs::rename(&old, out_dir);
        }
        let _ = fs::remove_dir_all(&tmp);
        return Err(Error::io(out_dir, e));
    }
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

/// The artifacts needed to serve predictions from a bundle directory.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub dir: PathBuf,
    pub report: EvaluationReport,
    pub ensemble: TreeEnsemble,
    pub preprocessor: Preprocessor,
    pub model_sha256: String,
}

impl ModelBundle {
    pub fn load(dir: &Path) -> Result<ModelBundle> {
        let report = EvaluationReport::load(&dir.join(files::REPORT))?;
        let model_path = dir.join(files::MODEL);
        let model_text = fs::read_to_string(&model_path).map_err(|e| Error::io(&model_path, e))?;
        let ensemble = TreeEnsemble::from_json(&model_text)?;
        let preprocessor = Preprocessor::load(&dir.join(files::PREPROCESS))?;
        if preprocessor.features != stage_features(report.stage) {
            return Err(Error::Schema("preprocessing manifest does not match the report's stage".into()));
        }
        if ensemble.n_features() != preprocessor.features.len() {
            return Err(Error::Schema("model and preprocessing manifest disagree on feature count".into()));
        }
        Ok(ModelBundle {
            dir: dir.to_path_buf(),
            report,
            ensemble,
            preprocessor,
            model_sha256: sha256_hex(model_text.as_bytes()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub stage: DsmStage,
    pub model_roc_auc: f64,
    pub baseline_roc_auc: f64,
    pub model_pr_auc: f64,
    pub baseline_pr_auc: f64,
    pub g_mean: f64,
    pub f1: f64,
    pub precision: f64,
    pub r_min: Option<f64>,
}

/// One slot per stage in canonical order; `None` marks a stage without a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageComparison {
    pub rows: Vec<(DsmStage, Option<ComparisonRow>)>,
}

pub fn compare_stages(reports: &[EvaluationReport]) -> StageComparison {
    let rows = DsmStage::ALL
        .iter()
        .map(|&stage| {
            let row = reports.iter().find(|r| r.stage == stage).map(|r| ComparisonRow {
                stage,
                model_roc_auc: r.model.roc_auc,
                baseline_roc_auc: r.baseline.roc.auc,
                model_pr_auc: r.model.pr_auc,
                baseline_pr_auc: r.baseline.pr.auc,
                g_mean: r.model.best_g_mean.rates.g_mean,
                f1: r.model.best_f1.rates.f1,
                precision: r.model.best_f1.rates.precision,
                r_min: match &r.cost {
                    StageCost::Applicable(c) => c.r_min,
                    StageCost::NotApplicable { .. } => None,
                },
            });
            (stage, row)
        })
        .collect();
    StageComparison { rows }
}

impl StageComparison {
    /// Fixed-width text table; missing stages show `-`.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<16} {:>9} {:>9} {:>9} {:>9} {:>7} {:>7} {:>9} {:>6}\n",
            "stage", "roc_auc", "base_roc", "pr_auc", "base_pr", "g_mean", "f1", "precision", "r_min"
        );
        for (stage, row) in &self.rows {
            match row {
                Some(r) => out.push_str(&format!(
                    "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>7.4} {:>7.4} {:>9.4} {:>6}\n",
                    stage.as_str(),
                    r.model_roc_auc,
                    r.baseline_roc_auc,
                    r.model_pr_auc,
                    r.baseline_pr_auc,
                    r.g_mean,
                    r.f1,
                    r.precision,
                    r.r_min.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()),
                )),
                None => out.push_str(&format!(
                    "{:<16} {:>9} {:>9} {:>9} {:>9} {:>7} {:>7} {:>9} {:>6}\n",
                    stage.as_str(),
                    "-",
                    "-",
                    "-",
                    "-",
                    "-",
                    "-",
                    "-",
                    "-"
                )),
            }
        }
        out
    }
}
