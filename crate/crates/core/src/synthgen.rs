//! Seeded synthetic hub-and-spoke connection data, CSV ingestion and
//! listwise deletion.
//!
//! The generator draws a fixed flight table (arrival times of day, chronic
//! arrival delays, Schengen sides, stand types), then one passenger connection
//! per row. The missed label comes from a logistic ground truth whose dominant
//! term is the perceived connection time; see [`GROUND_TRUTH`].

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    stage_features, traffic_network, ConnectionRecord, DsmStage, Feature, Minutes, Sex,
    TrafficNetwork,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_rows: usize,
    pub target_minority_fraction: f64,
    pub n_arrival_flights: usize,
    pub n_departure_flights: usize,
    /// Fraction of records (rounded to a whole count) that get one optional field blanked.
    pub missingness_rate: f64,
    /// Scales the day-to-day arrival delay noise around each flight's chronic delay.
    pub noise_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_rows: 200_000,
            target_minority_fraction: 0.0585,
            n_arrival_flights: 240,
            n_departure_flights: 180,
            missingness_rate: 0.02,
            noise_scale: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.n_rows == 0 {
            return bad("n_rows must be at least 1");
        }
        if !(self.target_minority_fraction > 0.0 && self.target_minority_fraction < 1.0) {
            return bad("target_minority_fraction must lie in (0, 1)");
        }
        if self.n_arrival_flights == 0 || self.n_departure_flights == 0 {
            return bad("flight counts must be positive");
        }
        if !(0.0..=0.04).contains(&self.missingness_rate) {
            return bad("missingness_rate must lie in [0, 0.04]");
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be positive");
        }
        Ok(())
    }
}

/// Coefficients of the generator's logistic ground truth. The log-odds of a
/// missed connection is `scale * (raw terms) + intercept`, where the
/// intercept is solved for the requested minority fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub scale: f64,
    /// Raw log-odds per minute of perceived connection time, centred at `pivot_minutes`.
    pub perceived_per_minute: f64,
    pub pivot_minutes: f64,
    /// Indexed by `TrafficNetwork::ALL` order (SS, SN, NS, NN).
    pub traffic_network: [f64; 4],
    pub age_per_year: f64,
    pub age_pivot: f64,
    pub group: f64,
    pub bus: f64,
    pub business_class: f64,
    pub arrival_flight_sd: f64,
    pub departure_flight_sd: f64,
}

pub const GROUND_TRUTH: GroundTruth = GroundTruth {
    scale: 2.5,
    perceived_per_minute: -1.0 / 16.0,
    pivot_minutes: 45.0,
    traffic_network: [-1.2, 0.3, 2.0, 0.9],
    age_per_year: 0.05,
    age_pivot: 42.0,
    group: -1.0,
    bus: 0.6,
    business_class: -0.4,
    arrival_flight_sd: 0.25,
    departure_flight_sd: 0.35,
};

struct ArrivalFlight {
    designator: String,
    time_of_day: i64,
    chronic_delay: f64,
    delay_sd: f64,
    schengen: bool,
    effect: f64,
}

struct DepartureFlight {
    designator: String,
    schengen: bool,
    remote_stand_share: f64,
    effect: f64,
}

const DAY: i64 = 1440;
/// 2019-01-01T00:00Z in minutes since the epoch.
const YEAR_START: Minutes = 1_546_300_800 / 60;

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("finite normal parameters")
}

/// Generates `config.n_rows` labelled connection records.
pub fn generate(config: &SynthConfig) -> Result<Vec<ConnectionRecord>> {
    config.validate()?;
    let gt = GROUND_TRUTH;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let chronic = Gamma::new(3.0, 12.0).expect("gamma parameters");
    let arrivals: Vec<ArrivalFlight> = (0..config.n_arrival_flights)
        .map(|i| {
            let chronic_delay = if rng.random::<f64>() < 0.25 {
                chronic.sample(&mut rng)
            } else {
                normal(2.0, 6.0).sample(&mut rng)
            };
            ArrivalFlight {
                designator: format!("TP{}", 1000 + i),
                time_of_day: rng.random_range(300..1380),
                chronic_delay,
                delay_sd: rng.random_range(3.0..10.0),
                schengen: rng.random::<f64>() < 0.55,
                effect: normal(0.0, gt.arrival_flight_sd).sample(&mut rng),
            }
        })
        .collect();
    let n_dep = config.n_departure_flights as i64;
    let departures: Vec<DepartureFlight> = (0..n_dep)
        .map(|j| DepartureFlight {
            designator: format!("TP{}", 5000 + j),
            schengen: rng.random::<f64>() < 0.55,
            remote_stand_share: rng.random::<f64>(),
            effect: normal(0.0, gt.departure_flight_sd).sample(&mut rng),
        })
        .collect();

    let booking = Gamma::<f64>::new(1.6, 55.0).expect("gamma parameters");
    let daily_noise = normal(0.0, 1.0);
    let age_dist = normal(42.0, 16.0);
    let late_departure = Exp::new(1.0 / 15.0).expect("exp parameter");
    let mut records = Vec::with_capacity(config.n_rows);
    let mut raw_logits = Vec::with_capacity(config.n_rows);

    for _ in 0..config.n_rows {
        let arr = &arrivals[rng.random_range(0..arrivals.len())];
        let day = rng.random_range(0..365i64);
        let sched_on = YEAR_START + day * DAY + arr.time_of_day;

        // First departure slot at least the booked connection time after arrival.
        let wanted = arr.time_of_day + 35 + booking.sample(&mut rng).round() as i64;
        let mut slot = (wanted * n_dep).div_euclid(DAY);
        while slot_time(slot, n_dep) < wanted {
            slot += 1;
        }
        let dep = &departures[slot.rem_euclid(n_dep) as usize];
        let sched_off = YEAR_START + day * DAY + slot_time(slot, n_dep);

        let season = 5.0 * 0.15 * (2.0 * std::f64::consts::PI * day as f64 / 365.0).sin();
        let arrival_delay = arr.chronic_delay
            + arr.delay_sd * config.noise_scale * daily_noise.sample(&mut rng)
            + season;
        let actual_on = sched_on + arrival_delay.round() as i64;
        let departure_delay = if rng.random::<f64>() < 0.7 {
            normal(0.0, 3.0).sample(&mut rng).max(0.0)
        } else {
            late_departure.sample(&mut rng)
        };
        let actual_off = sched_off + departure_delay.round() as i64;

        let sex = match rng.random::<f64>() {
            u if u < 0.48 => Sex::F,
            u if u < 0.96 => Sex::M,
            _ => Sex::Unknown,
        };
        let age = age_dist.sample(&mut rng).clamp(0.0, 100.0).round() as u32;
        let is_group = rng.random::<f64>() < 0.25;
        let class_from = if rng.random::<f64>() < 0.12 { "C" } else { "Y" };
        let class_to = if rng.random::<f64>() < 0.85 {
            class_from
        } else if class_from == "C" {
            "Y"
        } else {
            "C"
        };
        let n_bus = if rng.random::<f64>() < dep.remote_stand_share {
            rng.random_range(1..=4u32)
        } else {
            0
        };
        let boarding_delta = (20.0
            + if n_bus > 0 { 8.0 } else { 0.0 }
            + normal(0.0, 5.0).sample(&mut rng))
        .max(5.0)
        .round() as u32;

        let departure_date = DateTime::from_timestamp(sched_off * 60, 0)
            .expect("timestamp in range")
            .date_naive();
        let network = traffic_network(arr.schengen, dep.schengen);
        let perceived = (sched_off - actual_on) as f64;
        let tn_index = TrafficNetwork::ALL
            .iter()
            .position(|&t| t == network)
            .expect("all networks listed");
        let raw = gt.perceived_per_minute * (perceived - gt.pivot_minutes)
            + gt.traffic_network[tn_index]
            + gt.age_per_year * (age as f64 - gt.age_pivot)
            + if is_group { gt.group } else { 0.0 }
            + if n_bus > 0 { gt.bus } else { 0.0 }
            + if class_from == "C" { gt.business_class } else { 0.0 }
            + arr.effect
            + dep.effect;
        raw_logits.push(gt.scale * raw);

        records.push(ConnectionRecord {
            arrival_flight_designator: Some(arr.designator.clone()),
            departure_flight_designator: Some(dep.designator.clone()),
            origin_schengen: Some(arr.schengen),
            destination_schengen: Some(dep.schengen),
            departure_weekday: Some(departure_date.weekday().num_days_from_monday() as u8),
            departure_month_day: Some(departure_date.day() as u8),
            scheduled_on_blocks: Some(sched_on),
            actual_on_blocks: Some(actual_on),
            scheduled_off_blocks: Some(sched_off),
            actual_off_blocks: Some(actual_off),
            sex: Some(sex),
            age: Some(age),
            is_group: Some(is_group),
            class_from: Some(class_from.to_string()),
            class_to: Some(class_to.to_string()),
            boarding_delta: Some(boarding_delta),
            n_bus: Some(n_bus),
            missed: false,
        });
    }

    let intercept = calibrate_intercept(&raw_logits, config.target_minority_fraction);
    for (record, logit) in records.iter_mut().zip(&raw_logits) {
        let p = sigmoid(logit + intercept);
        record.missed = rng.random::<f64>() < p;
    }
    let n_blank = (config.missingness_rate * config.n_rows as f64).round() as usize;
    for i in rand::seq::index::sample(&mut rng, config.n_rows, n_blank) {
        blank_one_field(&mut records[i], rng.random_range(0..9));
    }
    Ok(records)
}

fn slot_time(slot: i64, n_dep: i64) -> i64 {
    slot.div_euclid(n_dep) * DAY + slot.rem_euclid(n_dep) * DAY / n_dep
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Intercept at which the mean ground-truth probability equals `target`.
fn calibrate_intercept(logits: &[f64], target: f64) -> f64 {
    let mean_p = |b: f64| logits.iter().map(|&l| sigmoid(l + b)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-200.0, 200.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn blank_one_field(record: &mut ConnectionRecord, which: u32) {
    match which {
        0 => record.age = None,
        1 => record.sex = None,
        2 => record.class_from = None,
        3 => record.class_to = None,
        4 => record.actual_on_blocks = None,
        5 => record.actual_off_blocks = None,
        6 => record.boarding_delta = None,
        7 => record.is_group = None,
        _ => record.departure_month_day = None,
    }
}

/// Drops every record missing a value for any of `required`; order is preserved.
pub fn listwise_delete(
    records: Vec<ConnectionRecord>,
    required: &[Feature],
) -> (Vec<ConnectionRecord>, usize) {
    let before = records.len();
    let kept: Vec<_> = records
        .into_iter()
        .filter(|r| required.iter().all(|&f| r.feature_value(f).is_some()))
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// CSV column names, in file order.
pub mod columns {
    pub const TP_FROM: &str = "TP From";
    pub const TP_TO: &str = "TP To";
    pub const ORIGIN_SCHENGEN: &str = "Origin Schengen";
    pub const DESTINATION_SCHENGEN: &str = "Destination Schengen";
    pub const TRAFFIC_NETWORK: &str = "Traffic Network";
    pub const DEP_DAY: &str = "Dep. Day";
    pub const DEP_MONTH_DAY: &str = "Dep. Month Day";
    pub const SCHEDULED_ON_BLOCKS: &str = "Scheduled On Blocks";
    pub const ACTUAL_ON_BLOCKS: &str = "Actual On Blocks";
    pub const SCHEDULED_OFF_BLOCKS: &str = "Scheduled Off Blocks";
    pub const ACTUAL_OFF_BLOCKS: &str = "Actual Off Blocks";
    pub const SEX: &str = "Sex";
    pub const AGE: &str = "Age";
    pub const IS_GROUP: &str = "Is Group";
    pub const CLASS_FROM: &str = "Class From";
    pub const CLASS_TO: &str = "Class To";
    pub const BOARDING_DELTA: &str = "Boarding Delta";
    pub const N_BUS: &str = "N Bus";
    pub const SCH_CONN_TIME: &str = "Sch. Conn. Time";
    pub const PERCEIVED_CONN_TIME: &str = "Perceived Conn. Time";
    pub const ACTUAL_CONN_TIME: &str = "Actual Conn. Time";
    pub const MISSED: &str = "Missed";

    pub const ALL: [&str; 22] = [
        TP_FROM,
        TP_TO,
        ORIGIN_SCHENGEN,
        DESTINATION_SCHENGEN,
        TRAFFIC_NETWORK,
        DEP_DAY,
        DEP_MONTH_DAY,
        SCHEDULED_ON_BLOCKS,
        ACTUAL_ON_BLOCKS,
        SCHEDULED_OFF_BLOCKS,
        ACTUAL_OFF_BLOCKS,
        SEX,
        AGE,
        IS_GROUP,
        CLASS_FROM,
        CLASS_TO,
        BOARDING_DELTA,
        N_BUS,
        SCH_CONN_TIME,
        PERCEIVED_CONN_TIME,
        ACTUAL_CONN_TIME,
        MISSED,
    ];
}

/// Source columns a feature is computed from.
pub fn feature_columns(feature: Feature) -> &'static [&'static str] {
    use columns::*;
    match feature {
        Feature::TpFrom => &[TP_FROM],
        Feature::TpTo => &[TP_TO],
        Feature::TrafficNetwork => &[ORIGIN_SCHENGEN, DESTINATION_SCHENGEN],
        Feature::DepDay => &[DEP_DAY],
        Feature::DepMonthDay => &[DEP_MONTH_DAY],
        Feature::BoardingDelta => &[BOARDING_DELTA],
        Feature::NBus => &[N_BUS],
        Feature::Sex => &[SEX],
        Feature::Age => &[AGE],
        Feature::IsGroup => &[IS_GROUP],
        Feature::ClassFrom => &[CLASS_FROM],
        Feature::ClassTo => &[CLASS_TO],
        Feature::SchConnTime => &[SCHEDULED_ON_BLOCKS, SCHEDULED_OFF_BLOCKS],
        Feature::PerceivedConnTime => &[ACTUAL_ON_BLOCKS, SCHEDULED_OFF_BLOCKS],
        Feature::ActualConnTime => &[ACTUAL_ON_BLOCKS, ACTUAL_OFF_BLOCKS],
    }
}

/// Columns a file must carry to feed `stage` (always including the label).
pub fn required_columns(stage: Option<DsmStage>) -> Vec<&'static str> {
    let mut required = vec![columns::MISSED];
    if let Some(stage) = stage {
        for &f in stage_features(stage) {
            for &c in feature_columns(f) {
                if !required.contains(&c) {
                    required.push(c);
                }
            }
        }
    }
    required
}

fn fmt_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

/// Writes records with the canonical header. Connection-time columns are
/// derived from the timestamps and ignored on ingestion.
pub fn write_csv(records: &[ConnectionRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(columns::ALL)?;
    for r in records {
        let times = r.connection_times();
        w.write_record([
            fmt_opt(&r.arrival_flight_designator),
            fmt_opt(&r.departure_flight_designator),
            fmt_opt(&r.origin_schengen),
            fmt_opt(&r.destination_schengen),
            fmt_opt(&r.traffic_network()),
            fmt_opt(&r.departure_weekday),
            fmt_opt(&r.departure_month_day),
            fmt_opt(&r.scheduled_on_blocks),
            fmt_opt(&r.actual_on_blocks),
            fmt_opt(&r.scheduled_off_blocks),
            fmt_opt(&r.actual_off_blocks),
            r.sex.map(|s| s.as_str().to_string()).unwrap_or_default(),
            fmt_opt(&r.age),
            fmt_opt(&r.is_group),
            fmt_opt(&r.class_from),
            fmt_opt(&r.class_to),
            fmt_opt(&r.boarding_delta),
            fmt_opt(&r.n_bus),
            fmt_opt(&times.scheduled),
            fmt_opt(&times.perceived),
            fmt_opt(&times.actual),
            r.missed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    /// 1-based line number in the source file (header is line 1).
    pub line: u64,
    pub reason: String,
    pub raw: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub records: Vec<ConnectionRecord>,
    pub rejects: Vec<Reject>,
}

impl IngestReport {
    /// Sidecar path for rejected rows: `data.csv` -> `data.rejects.csv`.
    pub fn sidecar_path(source: &Path) -> PathBuf {
        let stem = source
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "input".into());
        source.with_file_name(format!("{stem}.rejects.csv"))
    }

    /// Writes the rejects sidecar when there is anything to report.
    pub fn write_rejects(&self, source: &Path) -> Result<Option<PathBuf>> {
        if self.rejects.is_empty() {
            return Ok(None);
        }
        let path = Self::sidecar_path(source);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["line", "reason", "raw"])?;
        for r in &self.rejects {
            w.write_record([r.line.to_string(), r.reason.clone(), r.raw.clone()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(Some(path))
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "y" | "t" => Some(true),
        "false" | "0" | "no" | "n" | "f" => Some(false),
        _ => None,
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Option<T> {
    s.trim().parse().ok()
}

fn parse_text(s: &str) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_string())
}

/// Reads a pre-joined connection table. Header names must include every
/// column the `stage` schema needs; unparseable cells become missing values;
/// structurally broken or out-of-range rows go to `rejects`.
pub fn ingest_csv(path: &Path, stage: Option<DsmStage>) -> Result<IngestReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, stage)
}

pub fn ingest_reader<R: std::io::Read>(reader: R, stage: Option<DsmStage>) -> Result<IngestReport> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let index: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    for column in required_columns(stage) {
        if !index.contains_key(column) {
            return Err(Error::MissingColumn {
                column: column.to_string(),
            });
        }
    }

    let mut report = IngestReport::default();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = match row {
            Ok(row) => row,
            Err(e) => {
                report.rejects.push(Reject {
                    line,
                    reason: e.to_string(),
                    raw: String::new(),
                });
                continue;
            }
        };
        let raw = || row.iter().collect::<Vec<_>>().join(",");
        if row.len() != header.len() {
            report.rejects.push(Reject {
                line,
                reason: format!("expected {} fields, found {}", header.len(), row.len()),
                raw: raw(),
            });
            continue;
        }
        let cell = |name: &str| index.get(name).and_then(|&j| row.get(j)).unwrap_or("");
        match parse_row(&cell) {
            Ok(record) => report.records.push(record),
            Err(e) => report.rejects.push(Reject {
                line,
                reason: e.to_string(),
                raw: raw(),
            }),
        }
    }
    Ok(report)
}

fn parse_row<'a>(cell: &impl Fn(&str) -> &'a str) -> Result<ConnectionRecord> {
    use columns::*;
    let missed = parse_bool(cell(MISSED))
        .ok_or_else(|| Error::Data(format!("unparseable label `{}`", cell(MISSED))))?;
    let record = ConnectionRecord {
        arrival_flight_designator: parse_text(cell(TP_FROM)),
        departure_flight_designator: parse_text(cell(TP_TO)),
        origin_schengen: parse_bool(cell(ORIGIN_SCHENGEN)),
        destination_schengen: parse_bool(cell(DESTINATION_SCHENGEN)),
        departure_weekday: parse_num(cell(DEP_DAY)),
        departure_month_day: parse_num(cell(DEP_MONTH_DAY)),
        scheduled_on_blocks: parse_num(cell(SCHEDULED_ON_BLOCKS)),
        actual_on_blocks: parse_num(cell(ACTUAL_ON_BLOCKS)),
        scheduled_off_blocks: parse_num(cell(SCHEDULED_OFF_BLOCKS)),
        actual_off_blocks: parse_num(cell(ACTUAL_OFF_BLOCKS)),
        sex: cell(SEX).parse().ok(),
        age: parse_num(cell(AGE)),
        is_group: parse_bool(cell(IS_GROUP)),
        class_from: parse_text(cell(CLASS_FROM)),
        class_to: parse_text(cell(CLASS_TO)),
        boarding_delta: parse_num(cell(BOARDING_DELTA)),
        n_bus: parse_num(cell(N_BUS)),
        missed,
    };
    if let (Some(declared), Some(derived)) = (
        cell(TRAFFIC_NETWORK).parse::<TrafficNetwork>().ok(),
        record.traffic_network(),
    ) {
        if declared != derived {
            return Err(Error::Data(format!(
                "traffic network {declared} contradicts Schengen flags ({derived})"
            )));
        }
    }
    record.validate()?;
    Ok(record)
}
