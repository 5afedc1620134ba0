//! Connection records, per-stage feature schemas and the feature transforms
//! derived from raw flight timestamps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Timestamps are whole minutes since the Unix epoch.
pub type Minutes = i64;

/// Schengen classification of an (origin, destination) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrafficNetwork {
    SS,
    SN,
    NS,
    NN,
}

impl TrafficNetwork {
    pub const ALL: [TrafficNetwork; 4] = [Self::SS, Self::SN, Self::NS, Self::NN];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SS => "SS",
            Self::SN => "SN",
            Self::NS => "NS",
            Self::NN => "NN",
        }
    }
}

impl fmt::Display for TrafficNetwork {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrafficNetwork {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "SS" => Ok(Self::SS),
            "SN" => Ok(Self::SN),
            "NS" => Ok(Self::NS),
            "NN" => Ok(Self::NN),
            other => Err(Error::Data(format!("unknown traffic network `{other}`"))),
        }
    }
}

/// First letter is the origin side, second the destination side
/// (S = inside Schengen, N = outside).
pub fn traffic_network(origin_schengen: bool, destination_schengen: bool) -> TrafficNetwork {
    match (origin_schengen, destination_schengen) {
        (true, true) => TrafficNetwork::SS,
        (true, false) => TrafficNetwork::SN,
        (false, true) => TrafficNetwork::NS,
        (false, false) => TrafficNetwork::NN,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
    Unknown,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::F => "F",
            Sex::M => "M",
            Sex::Unknown => "U",
        }
    }
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "F" | "f" => Ok(Sex::F),
            "M" | "m" => Ok(Sex::M),
            "U" | "u" | "unknown" | "Unknown" => Ok(Sex::Unknown),
            other => Err(Error::Data(format!("unknown sex `{other}`"))),
        }
    }
}

/// One passenger connection at the hub. `None` marks a missing value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionRecord {
    pub arrival_flight_designator: Option<String>,
    pub departure_flight_designator: Option<String>,
    pub origin_schengen: Option<bool>,
    pub destination_schengen: Option<bool>,
    /// 0 = Monday.
    pub departure_weekday: Option<u8>,
    pub departure_month_day: Option<u8>,
    pub scheduled_on_blocks: Option<Minutes>,
    pub actual_on_blocks: Option<Minutes>,
    pub scheduled_off_blocks: Option<Minutes>,
    pub actual_off_blocks: Option<Minutes>,
    pub sex: Option<Sex>,
    pub age: Option<u32>,
    pub is_group: Option<bool>,
    pub class_from: Option<String>,
    pub class_to: Option<String>,
    pub boarding_delta: Option<u32>,
    pub n_bus: Option<u32>,
    /// `true` for a missed connection (the positive, minority class).
    pub missed: bool,
}

impl ConnectionRecord {
    pub fn traffic_network(&self) -> Option<TrafficNetwork> {
        Some(traffic_network(
            self.origin_schengen?,
            self.destination_schengen?,
        ))
    }

    pub fn connection_times(&self) -> ConnectionTimes {
        connection_times(self)
    }

    /// Checks the value-range invariants a record must satisfy to survive cleaning.
    pub fn validate(&self) -> Result<()> {
        if let Some(age) = self.age {
            if age > 120 {
                return Err(Error::Data(format!("age {age} outside [0, 120]")));
            }
        }
        if let Some(day) = self.departure_weekday {
            if day > 6 {
                return Err(Error::Data(format!("weekday {day} outside [0, 6]")));
            }
        }
        if let Some(day) = self.departure_month_day {
            if !(1..=31).contains(&day) {
                return Err(Error::Data(format!("month day {day} outside [1, 31]")));
            }
        }
        if let (Some(on), Some(off)) = (self.scheduled_on_blocks, self.scheduled_off_blocks) {
            if off < on {
                return Err(Error::Data(
                    "scheduled off-blocks precedes scheduled on-blocks".into(),
                ));
            }
        }
        Ok(())
    }

    /// Raw (unencoded) value of one schema feature, `None` when missing.
    pub fn feature_value(&self, feature: Feature) -> Option<FeatureValue> {
        use FeatureValue::{Cat, Num};
        let times = || self.connection_times();
        match feature {
            Feature::TpFrom => self.arrival_flight_designator.clone().map(Cat),
            Feature::TpTo => self.departure_flight_designator.clone().map(Cat),
            Feature::TrafficNetwork => self.traffic_network().map(|t| Cat(t.to_string())),
            Feature::DepDay => self.departure_weekday.map(|v| Num(v as f64)),
            Feature::DepMonthDay => self.departure_month_day.map(|v| Num(v as f64)),
            Feature::BoardingDelta => self.boarding_delta.map(|v| Num(v as f64)),
            Feature::NBus => self.n_bus.map(|v| Num(v as f64)),
            Feature::Sex => self.sex.map(|s| Cat(s.as_str().to_string())),
            Feature::Age => self.age.map(|v| Num(v as f64)),
            Feature::IsGroup => self.is_group.map(|g| Num(if g { 1.0 } else { 0.0 })),
            Feature::ClassFrom => self.class_from.clone().map(Cat),
            Feature::ClassTo => self.class_to.clone().map(Cat),
            Feature::SchConnTime => times().scheduled.map(|v| Num(v as f64)),
            Feature::PerceivedConnTime => times().perceived.map(|v| Num(v as f64)),
            Feature::ActualConnTime => times().actual.map(|v| Num(v as f64)),
        }
    }
}

/// Connection intervals in minutes. Perceived and actual may be negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionTimes {
    pub scheduled: Option<Minutes>,
    pub perceived: Option<Minutes>,
    pub actual: Option<Minutes>,
}

pub fn connection_times(record: &ConnectionRecord) -> ConnectionTimes {
    let diff = |off: Option<Minutes>, on: Option<Minutes>| Some(off? - on?);
    ConnectionTimes {
        scheduled: diff(record.scheduled_off_blocks, record.scheduled_on_blocks),
        perceived: diff(record.scheduled_off_blocks, record.actual_on_blocks),
        actual: diff(record.actual_off_blocks, record.actual_on_blocks),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DsmStage {
    Strategic,
    PreTactical,
    Tactical,
    PostOperations,
}

impl DsmStage {
    pub const ALL: [DsmStage; 4] = [
        Self::Strategic,
        Self::PreTactical,
        Self::Tactical,
        Self::PostOperations,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Strategic => "strategic",
            Self::PreTactical => "pre-tactical",
            Self::Tactical => "tactical",
            Self::PostOperations => "post-operations",
        }
    }

    pub fn features(self) -> &'static [Feature] {
        stage_features(self)
    }
}

impl fmt::Display for DsmStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DsmStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "strategic" => Ok(Self::Strategic),
            "pre-tactical" | "pretactical" => Ok(Self::PreTactical),
            "tactical" => Ok(Self::Tactical),
            "post-operations" | "postoperations" | "post-ops" => Ok(Self::PostOperations),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

/// Model input features, in the canonical schema order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Feature {
    TpFrom,
    TpTo,
    TrafficNetwork,
    DepDay,
    DepMonthDay,
    BoardingDelta,
    NBus,
    Sex,
    Age,
    IsGroup,
    ClassFrom,
    ClassTo,
    SchConnTime,
    PerceivedConnTime,
    ActualConnTime,
}

impl Feature {
    pub const ALL: [Feature; 15] = [
        Self::TpFrom,
        Self::TpTo,
        Self::TrafficNetwork,
        Self::DepDay,
        Self::DepMonthDay,
        Self::BoardingDelta,
        Self::NBus,
        Self::Sex,
        Self::Age,
        Self::IsGroup,
        Self::ClassFrom,
        Self::ClassTo,
        Self::SchConnTime,
        Self::PerceivedConnTime,
        Self::ActualConnTime,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::TpFrom => "TP From",
            Self::TpTo => "TP To",
            Self::TrafficNetwork => "Traffic Network",
            Self::DepDay => "Dep. Day",
            Self::DepMonthDay => "Dep. Month Day",
            Self::BoardingDelta => "Boarding Delta",
            Self::NBus => "N Bus",
            Self::Sex => "Sex",
            Self::Age => "Age",
            Self::IsGroup => "Is Group",
            Self::ClassFrom => "Class From",
            Self::ClassTo => "Class To",
            Self::SchConnTime => "Sch. Conn. Time",
            Self::PerceivedConnTime => "Perceived Conn. Time",
            Self::ActualConnTime => "Actual Conn. Time",
        }
    }

    pub fn from_name(name: &str) -> Option<Feature> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn kind(self) -> FeatureKind {
        match self {
            Self::TpFrom
            | Self::TpTo
            | Self::TrafficNetwork
            | Self::Sex
            | Self::ClassFrom
            | Self::ClassTo => FeatureKind::Categorical,
            _ => FeatureKind::Numeric,
        }
    }

    pub fn is_connection_time(self) -> bool {
        matches!(
            self,
            Self::SchConnTime | Self::PerceivedConnTime | Self::ActualConnTime
        )
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const STRATEGIC: &[Feature] = &[
    Feature::TpFrom,
    Feature::TpTo,
    Feature::TrafficNetwork,
    Feature::DepDay,
    Feature::DepMonthDay,
    Feature::SchConnTime,
];

const PRE_TACTICAL: &[Feature] = &[
    Feature::TpFrom,
    Feature::TpTo,
    Feature::TrafficNetwork,
    Feature::DepDay,
    Feature::DepMonthDay,
    Feature::Sex,
    Feature::Age,
    Feature::IsGroup,
    Feature::ClassFrom,
    Feature::ClassTo,
    Feature::SchConnTime,
];

const TACTICAL: &[Feature] = &[
    Feature::TpFrom,
    Feature::TpTo,
    Feature::TrafficNetwork,
    Feature::DepDay,
    Feature::DepMonthDay,
    Feature::Sex,
    Feature::Age,
    Feature::IsGroup,
    Feature::ClassFrom,
    Feature::ClassTo,
    Feature::PerceivedConnTime,
];

const POST_OPERATIONS: &[Feature] = &[
    Feature::TpFrom,
    Feature::TpTo,
    Feature::TrafficNetwork,
    Feature::DepDay,
    Feature::DepMonthDay,
    Feature::BoardingDelta,
    Feature::NBus,
    Feature::Sex,
    Feature::Age,
    Feature::IsGroup,
    Feature::ClassFrom,
    Feature::ClassTo,
    Feature::ActualConnTime,
];

/// Features available to each decision stage, in schema order.
pub fn stage_features(stage: DsmStage) -> &'static [Feature] {
    match stage {
        DsmStage::Strategic => STRATEGIC,
        DsmStage::PreTactical => PRE_TACTICAL,
        DsmStage::Tactical => TACTICAL,
        DsmStage::PostOperations => POST_OPERATIONS,
    }
}

/// The connection-time feature a stage uses.
pub fn stage_time_feature(stage: DsmStage) -> Feature {
    match stage {
        DsmStage::Strategic | DsmStage::PreTactical => Feature::SchConnTime,
        DsmStage::Tactical => Feature::PerceivedConnTime,
        DsmStage::PostOperations => Feature::ActualConnTime,
    }
}

/// A raw feature value before encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Num(f64),
    Cat(String),
}

impl FeatureValue {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            FeatureValue::Num(v) => Some(*v),
            FeatureValue::Cat(_) => None,
        }
    }

    pub fn as_cat(&self) -> Option<&str> {
        match self {
            FeatureValue::Cat(s) => Some(s),
            FeatureValue::Num(_) => None,
        }
    }
}

/// Where a dataset row came from: a source record id or GMM oversampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowOrigin {
    Source(u64),
    Synthetic,
}

/// Raw stage-selected rows, complete in every feature, ready for fitting transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub features: Vec<Feature>,
    pub rows: Vec<RawRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub id: u64,
    pub values: Vec<FeatureValue>,
    pub label: bool,
}

impl RawTable {
    /// Builds the table for `features`; record ids are positions in `records`.
    /// Fails on the first record missing a requested feature.
    pub fn from_records(records: &[ConnectionRecord], features: &[Feature]) -> Result<Self> {
        let rows = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let values = features
                    .iter()
                    .map(|&f| {
                        r.feature_value(f).ok_or_else(|| {
                            Error::Data(format!("record {i} is missing `{}`", f.name()))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(RawRow {
                    id: i as u64,
                    values,
                    label: r.missed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RawTable {
            features: features.to_vec(),
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn column_index(&self, feature: Feature) -> Option<usize> {
        self.features.iter().position(|&f| f == feature)
    }

    pub fn subset(&self, indices: &[usize]) -> RawTable {
        RawTable {
            features: self.features.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: FeatureKind,
}

/// Encoded real-valued feature matrix (row-major, columns in schema order)
/// with labels and row provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub columns: Vec<ColumnMeta>,
    values: Vec<f64>,
    pub labels: Vec<bool>,
    pub origins: Vec<RowOrigin>,
}

impl Dataset {
    pub fn new(
        columns: Vec<ColumnMeta>,
        values: Vec<f64>,
        labels: Vec<bool>,
        origins: Vec<RowOrigin>,
    ) -> Result<Self> {
        let d = columns.len();
        let n = labels.len();
        if values.len() != n * d {
            return Err(Error::Data(format!(
                "matrix has {} values, expected {n} rows x {d} columns",
                values.len()
            )));
        }
        if origins.len() != n {
            return Err(Error::Data("origin count differs from row count".into()));
        }
        Ok(Dataset {
            columns,
            values,
            labels,
            origins,
        })
    }

    /// Convenience constructor for unnamed numeric columns.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<bool>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Data("ragged rows".into()));
        }
        let columns = (0..d)
            .map(|j| ColumnMeta {
                name: format!("f{j}"),
                kind: FeatureKind::Numeric,
            })
            .collect();
        let origins = (0..rows.len() as u64).map(RowOrigin::Source).collect();
        Dataset::new(columns, rows.concat(), labels, origins)
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_cols();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        let d = self.n_cols().max(1);
        self.values.chunks_exact(d).take(self.n_rows())
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows().map(move |r| r[j])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn positive_count(&self) -> usize {
        self.labels.iter().filter(|&&y| y).count()
    }

    pub fn minority_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            0.0
        } else {
            self.positive_count() as f64 / self.n_rows() as f64
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut values = Vec::with_capacity(indices.len() * self.n_cols());
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Dataset {
            columns: self.columns.clone(),
            values,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            origins: indices.iter().map(|&i| self.origins[i]).collect(),
        }
    }

    /// Appends rows (flat, row-major) with a common label and origin.
    pub fn append_rows(&mut self, values: &[f64], label: bool, origin: RowOrigin) {
        let d = self.n_cols();
        assert_eq!(values.len() % d.max(1), 0, "row width mismatch");
        let n = values.len().checked_div(d).unwrap_or(0);
        self.values.extend_from_slice(values);
        self.labels.extend(std::iter::repeat_n(label, n));
        self.origins.extend(std::iter::repeat_n(origin, n));
    }
}
