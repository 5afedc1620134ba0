//! Command line front end. Settings resolve as flags, then `CONNEX_*`
//! environment variables, then the `--config` TOML file, then defaults.

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use connex::cost::{cost_report, CostParameters, StageCost};
use connex::domain::{stage_time_feature, DsmStage};
use connex::pipeline::{
    compare_stages, files, load_records, run_stage_to, stage_table, DataSource, EvaluationReport, ModelBundle,
    RunConfig,
};
use connex::preprocess::stratified_split;
use connex::shap::summarize;
use connex::synthgen::{self, SynthConfig};

use crate::api::Snapshot;
use crate::server::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "connex", version, about = "Missed-connection prediction models")]
pub struct Cli {
    /// TOML file with default settings.
    #[arg(long, global = true, env = "CONNEX_CONFIG")]
    pub config: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic connection dataset as CSV.
    Synth(SynthArgs),
    /// Run the full pipeline for one stage (or `all`) and write model bundles.
    Run(RunArgs),
    /// Evaluate the connection-time threshold baseline on the test split.
    Baseline(BaselineArgs),
    /// Explain a bundle's test rows, or a single request, with TreeSHAP.
    Explain(ExplainArgs),
    /// Cost of prevention at a bundle's operating point for a cost ratio.
    Cost(CostArgs),
    /// Side-by-side table of stage reports.
    Compare(CompareArgs),
    /// Serve predictions over HTTP.
    Serve(ServeArgs),
}

/// Keys accepted in the `--config` file.
#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub rows: Option<usize>,
    pub minority: Option<f64>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub shap_rows: Option<usize>,
    pub rounds: Option<usize>,
    pub learning_rate: Option<f64>,
    pub max_depth: Option<usize>,
    pub components: Option<usize>,
    pub test_fraction: Option<f64>,
    pub c_prev: Option<f64>,
    pub r: Option<f64>,
    pub host: Option<String>,
    pub port: Option<u16>,
    pub model_dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Read connections from this CSV instead of generating them.
    #[arg(long, env = "CONNEX_DATA")]
    pub data: Option<PathBuf>,
    /// Synthetic rows to generate.
    #[arg(long, env = "CONNEX_ROWS")]
    pub rows: Option<usize>,
    /// Seed for data generation and the pipeline.
    #[arg(long, env = "CONNEX_SEED")]
    pub seed: Option<u64>,
    /// Target missed-connection fraction of synthetic data.
    #[arg(long, env = "CONNEX_MINORITY")]
    pub minority: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output CSV path.
    #[arg(long, env = "CONNEX_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelection {
    One(DsmStage),
    All,
}

impl StageSelection {
    fn stages(self) -> Vec<DsmStage> {
        match self {
            StageSelection::One(s) => vec![s],
            StageSelection::All => DsmStage::ALL.to_vec(),
        }
    }
}

fn parse_stage(s: &str) -> Result<DsmStage, String> {
    s.parse::<DsmStage>()
        .map_err(|_| "expected one of strategic, pre-tactical, tactical, post-operations".to_string())
}

fn parse_stage_selection(s: &str) -> Result<StageSelection, String> {
    if s.eq_ignore_ascii_case("all") {
        Ok(StageSelection::All)
    } else {
        parse_stage(s).map(StageSelection::One).map_err(|e| format!("{e}, all"))
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Test rows explained per stage; all when unset.
    #[arg(long, env = "CONNEX_SHAP_ROWS")]
    pub shap_rows: Option<usize>,
    #[arg(long, env = "CONNEX_ROUNDS")]
    pub rounds: Option<usize>,
    #[arg(long, env = "CONNEX_LEARNING_RATE")]
    pub learning_rate: Option<f64>,
    #[arg(long, env = "CONNEX_MAX_DEPTH")]
    pub max_depth: Option<usize>,
    /// GMM components for oversampling.
    #[arg(long, env = "CONNEX_COMPONENTS")]
    pub components: Option<usize>,
    #[arg(long, env = "CONNEX_TEST_FRACTION")]
    pub test_fraction: Option<f64>,
    /// Average cost of one prevention.
    #[arg(long, env = "CONNEX_C_PREV")]
    pub c_prev: Option<f64>,
    /// Reaction-to-prevention cost ratio.
    #[arg(long, env = "CONNEX_R")]
    pub r: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, env = "CONNEX_STAGE", value_parser = parse_stage_selection)]
    pub stage: StageSelection,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory receiving one bundle per stage.
    #[arg(long, env = "CONNEX_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BaselineArgs {
    #[arg(long, env = "CONNEX_STAGE", value_parser = parse_stage)]
    pub stage: DsmStage,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, env = "CONNEX_TEST_FRACTION")]
    pub test_fraction: Option<f64>,
    /// Also write the sweep as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    /// Bundle directory written by `run`.
    #[arg(long, env = "CONNEX_MODEL_DIR")]
    pub model_dir: Option<PathBuf>,
    /// A `/v1/predict` request body to explain instead of the test split.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Test rows to explain; all when unset.
    #[arg(long, env = "CONNEX_SHAP_ROWS")]
    pub shap_rows: Option<usize>,
    /// Write the per-row summary CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CostArgs {
    /// Reaction-to-prevention cost ratio.
    #[arg(long, env = "CONNEX_R")]
    pub r: Option<f64>,
    #[arg(long, env = "CONNEX_C_PREV")]
    pub c_prev: Option<f64>,
    /// Bundle directory or report.json path.
    pub report: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    /// Bundle directories, report files, or directories of bundles.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, env = "CONNEX_HOST")]
    pub host: Option<String>,
    #[arg(long, env = "CONNEX_PORT")]
    pub port: Option<u16>,
    /// Bundle to load at startup; without one the service answers 503 until reloaded.
    #[arg(long, env = "CONNEX_MODEL_DIR")]
    pub model_dir: Option<PathBuf>,
}

type CliResult<T = ()> = Result<T, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Parses arguments, runs the command and maps failures to exit codes:
/// 2 for usage errors (from clap), 1 for everything else.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::default().default_filter_or("info");
    let _ = env_logger::Builder::from_env(env)
        .format(|buf, record| {
            writeln!(
                buf,
                "ts={} level={} target={} msg={:?}",
                buf.timestamp_millis(),
                record.level(),
                record.target(),
                record.args().to_string()
            )
        })
        .target(env_logger::Target::Stderr)
        .try_init();
}

pub fn run(cli: Cli) -> CliResult {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let json = cli.json;
    match cli.command {
        Command::Synth(a) => synth(&a, &file, json),
        Command::Run(a) => run_cmd(&a, &file, json),
        Command::Baseline(a) => baseline(&a, &file, json),
        Command::Explain(a) => explain(&a, &file, json),
        Command::Cost(a) => cost(&a, &file, json),
        Command::Compare(a) => compare(&a, json),
        Command::Serve(a) => serve(&a, &file),
    }
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) -> CliResult {
    let mut out = std::io::stdout().lock();
    if json {
        serde_json::to_writer_pretty(&mut out, value).map_err(err)?;
        writeln!(out).map_err(err)
    } else {
        write!(out, "{}", text()).map_err(err)
    }
}

fn synth_config(a: &DataArgs, file: &FileConfig) -> SynthConfig {
    let d = SynthConfig::default();
    SynthConfig {
        seed: a.seed.or(file.seed).unwrap_or(d.seed),
        n_rows: a.rows.or(file.rows).unwrap_or(d.n_rows),
        target_minority_fraction: a.minority.or(file.minority).unwrap_or(d.target_minority_fraction),
        ..d
    }
}

fn data_source(a: &DataArgs, file: &FileConfig) -> DataSource {
    match a.data.clone().or_else(|| file.data.clone()) {
        Some(path) => DataSource::Csv { path },
        None => DataSource::Synthetic(synth_config(a, file)),
    }
}

fn seed(a: &DataArgs, file: &FileConfig) -> u64 {
    a.seed.or(file.seed).unwrap_or(SynthConfig::default().seed)
}

fn synth(a: &SynthArgs, file: &FileConfig, json: bool) -> CliResult {
    let cfg = synth_config(&a.data, file);
    let out = a.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| "connections.csv".into());
    let records = synthgen::generate(&cfg).map_err(err)?;
    synthgen::write_csv(&records, &out).map_err(err)?;
    let missed = records.iter().filter(|r| r.missed).count();
    let summary = json!({
        "path": out,
        "rows": records.len(),
        "missed": missed,
        "seed": cfg.seed,
    });
    emit(json, &summary, || {
        format!("wrote {} rows ({missed} missed) to {}\n", records.len(), out.display())
    })
}

fn run_config(stage: DsmStage, a: &RunArgs, file: &FileConfig) -> RunConfig {
    let m = &a.model;
    let mut cfg = RunConfig::new(stage, data_source(&a.data, file), seed(&a.data, file));
    if let Some(v) = m.shap_rows.or(file.shap_rows) {
        cfg.shap_rows = Some(v);
    }
    if let Some(v) = m.rounds.or(file.rounds) {
        cfg.boost.n_rounds = v;
    }
    if let Some(v) = m.learning_rate.or(file.learning_rate) {
        cfg.boost.learning_rate = v;
    }
    if let Some(v) = m.max_depth.or(file.max_depth) {
        cfg.boost.max_depth = v;
    }
    if let Some(v) = m.components.or(file.components) {
        cfg.oversample.n_components = v;
    }
    if let Some(v) = m.test_fraction.or(file.test_fraction) {
        cfg.test_fraction = v;
    }
    if let Some(v) = m.c_prev.or(file.c_prev) {
        cfg.c_prev = v;
    }
    if let Some(v) = m.r.or(file.r) {
        cfg.cost_ratio = v;
    }
    cfg
}

fn run_cmd(a: &RunArgs, file: &FileConfig, json: bool) -> CliResult {
    let out = a.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| "runs".into());
    let mut reports = Vec::new();
    for stage in a.stage.stages() {
        let cfg = run_config(stage, a, file);
        let dir = out.join(stage.as_str());
        info!("running {stage} into {}", dir.display());
        let run = run_stage_to(&cfg, &dir).map_err(err)?;
        reports.push((dir, run.report));
    }
    let summary: Vec<_> = reports
        .iter()
        .map(|(dir, r)| {
            json!({
                "stage": r.stage,
                "bundle": dir,
                "model_roc_auc": r.model.roc_auc,
                "baseline_roc_auc": r.baseline.roc.auc,
                "model_pr_auc": r.model.pr_auc,
                "top_feature": r.shap.importance.first().map(|f| f.feature.clone()),
                "model_sha256": r.artifacts.model,
                "seconds": r.timings.total_seconds,
            })
        })
        .collect();
    emit(json, &summary, || {
        reports
            .iter()
            .map(|(dir, r)| {
                format!(
                    "{}: roc_auc {:.4} (baseline {:.4}), pr_auc {:.4}, bundle {}\n",
                    r.stage,
                    r.model.roc_auc,
                    r.baseline.roc.auc,
                    r.model.pr_auc,
                    dir.display()
                )
            })
            .collect()
    })
}

fn baseline(a: &BaselineArgs, file: &FileConfig, json: bool) -> CliResult {
    let source = data_source(&a.data, file);
    let (records, _) = load_records(&source, a.stage).map_err(err)?;
    let (table, _) = stage_table(&records, a.stage).map_err(err)?;
    let fraction = a.test_fraction.or(file.test_fraction).unwrap_or(0.10);
    let split = stratified_split(&table.labels(), fraction, seed(&a.data, file)).map_err(err)?;
    let report = connex::baseline::evaluate_baseline(&table.subset(&split.test), stage_time_feature(a.stage))
        .map_err(err)?;
    if let Some(out) = &a.out {
        report.save_csv(out).map_err(err)?;
    }
    emit(json, &report, || {
        let mut s = format!(
            "{} baseline on {} test rows: roc_auc {:.4}, pr_auc {:.4}\n",
            report.time_feature,
            split.test.len(),
            report.roc.auc,
            report.pr.auc
        );
        s.push_str(&format!(
            "best g_mean {:.4} at < {} min; best f1 {:.4} at < {} min\n",
            report.best_g_mean.value, report.best_g_mean.threshold, report.best_f1.value, report.best_f1.threshold
        ));
        let m = &report.mct;
        s.push_str(&format!(
            "60-minute MCT: tpr {:.4}, fpr {:.4}, precision {:.4}, f1 {:.4}\n",
            m.rates.tpr, m.rates.fpr, m.rates.precision, m.rates.f1
        ));
        s
    })
}

fn explain(a: &ExplainArgs, file: &FileConfig, json: bool) -> CliResult {
    let dir = a
        .model_dir
        .clone()
        .or_else(|| file.model_dir.clone())
        .ok_or("explain needs --model-dir")?;
    if let Some(input) = &a.input {
        let snapshot = Snapshot::load(&dir).map_err(err)?;
        let text = fs::read_to_string(input).map_err(|e| format!("cannot read {}: {e}", input.display()))?;
        let body: serde_json::Value = serde_json::from_str(&text).map_err(err)?;
        let response = snapshot
            .handle_predict(&body)
            .map_err(|e| format!("{}{}", e.error, e.field.map(|f| format!(" (field {f})")).unwrap_or_default()))?;
        return emit(json, &response, || {
            let mut s = format!(
                "probability {:.4} (label {}), margin {:.4}, base {:.4}\n",
                response.probability, response.label, response.margin, response.base_value
            );
            for at in &response.shap {
                s.push_str(&format!("{:<22} {:>10.4}\n", at.feature, at.shap));
            }
            s
        });
    }

    let bundle = ModelBundle::load(&dir).map_err(err)?;
    let cfg = &bundle.report.config;
    let (records, _) = load_records(&cfg.data, cfg.stage).map_err(err)?;
    let (table, _) = stage_table(&records, cfg.stage).map_err(err)?;
    let split = stratified_split(&table.labels(), cfg.test_fraction, cfg.seed).map_err(err)?;
    let mut test = bundle.preprocessor.transform(&table.subset(&split.test)).map_err(err)?;
    if let Some(k) = a.shap_rows.or(file.shap_rows).filter(|&k| k < test.n_rows()) {
        let idx: Vec<usize> = (0..k).collect();
        test = test.subset(&idx);
    }
    let summary = summarize(&bundle.ensemble, &test).map_err(err)?;
    if let Some(out) = &a.out {
        summary.save_csv(out).map_err(err)?;
    }
    let ranking: Vec<_> = summary
        .ranking
        .iter()
        .enumerate()
        .map(|(r, &j)| json!({"rank": r + 1, "feature": summary.features[j], "mean_abs_shap": summary.importance[j]}))
        .collect();
    let value = json!({
        "stage": cfg.stage,
        "rows": summary.n_rows(),
        "base_value": summary.base_value,
        "max_local_accuracy_error": summary.max_local_accuracy_error,
        "importance": ranking,
    });
    emit(json, &value, || {
        let mut s = format!(
            "{} rows explained, base value {:.4}, max local accuracy error {:.2e}\n",
            summary.n_rows(),
            summary.base_value,
            summary.max_local_accuracy_error
        );
        for (r, &j) in summary.ranking.iter().enumerate() {
            s.push_str(&format!("{:>2}. {:<22} {:.4}\n", r + 1, summary.features[j], summary.importance[j]));
        }
        s
    })
}

fn report_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(files::REPORT)
    } else {
        path.to_path_buf()
    }
}

fn cost(a: &CostArgs, file: &FileConfig, json: bool) -> CliResult {
    let report = EvaluationReport::load(&report_path(&a.report)).map_err(err)?;
    let r = a.r.or(file.r).unwrap_or(report.config.cost_ratio);
    let c_prev = a.c_prev.or(file.c_prev).unwrap_or(report.config.c_prev);
    let params = CostParameters::new(c_prev, r).map_err(err)?;
    let result = if report.stage == DsmStage::PostOperations {
        StageCost::NotApplicable {
            reason: "post-operations predictions arrive after the connection; nothing can be prevented".into(),
        }
    } else {
        StageCost::Applicable(cost_report(&report.model.best_f1.counts, &params))
    };
    let value = json!({
        "stage": report.stage,
        "threshold": report.model.best_f1.threshold,
        "precision": report.model.best_f1.rates.precision,
        "cost": result,
    });
    emit(json, &value, || match &result {
        StageCost::NotApplicable { reason } => format!("{}: cost analysis not applicable ({reason})\n", report.stage),
        StageCost::Applicable(c) => format!(
            "{}: precision {:.4}, r_min {}, r {r}: delta_c {:.2} ({})\n",
            report.stage,
            report.model.best_f1.rates.precision,
            c.r_min.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            c.delta_c,
            if c.prevention_pays { "prevention pays" } else { "prevention does not pay" }
        ),
    })
}

fn collect_reports(paths: &[PathBuf]) -> CliResult<Vec<EvaluationReport>> {
    let mut reports = Vec::new();
    for p in paths {
        let direct = report_path(p);
        if direct.is_file() {
            reports.push(EvaluationReport::load(&direct).map_err(err)?);
            continue;
        }
        let mut found = false;
        let mut entries: Vec<_> = fs::read_dir(p)
            .map_err(|e| format!("cannot read {}: {e}", p.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for child in entries {
            let candidate = child.join(files::REPORT);
            if candidate.is_file() {
                reports.push(EvaluationReport::load(&candidate).map_err(err)?);
                found = true;
            }
        }
        if !found {
            return Err(format!("no report found under {}", p.display()));
        }
    }
    Ok(reports)
}

fn compare(a: &CompareArgs, json: bool) -> CliResult {
    let reports = collect_reports(&a.paths)?;
    let table = compare_stages(&reports);
    emit(json, &table, || table.render())
}

fn serve(a: &ServeArgs, file: &FileConfig) -> CliResult {
    let host = a.host.clone().or_else(|| file.host.clone()).unwrap_or_else(|| "127.0.0.1".into());
    let port = a.port.or(file.port).unwrap_or(8080);
    let addr: SocketAddr = format!("{host}:{port}").parse().map_err(|e| format!("bad address {host}:{port}: {e}"))?;
    let model_dir = a.model_dir.clone().or_else(|| file.model_dir.clone());
    let state = match &model_dir {
        Some(dir) => {
            let snapshot = Snapshot::load(dir).map_err(|e| format!("cannot load {}: {e}", dir.display()))?;
            info!("loaded model {} ({})", snapshot.info.model_id, snapshot.info.stage);
            AppState::with_snapshot(snapshot, model_dir.clone())
        }
        None => AppState::empty(),
    };
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(err)?;
    runtime.block_on(server::serve(addr, state)).map_err(err)
}
