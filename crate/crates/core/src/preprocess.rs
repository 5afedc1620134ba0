//! Transforms fitted on training rows only: stratified split, smoothed target
//! encoding for categoricals and standardization for numerics.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ColumnMeta, Dataset, Feature, FeatureKind, FeatureValue, RawTable, RowOrigin};
use crate::error::{Error, Result};

pub const DEFAULT_SMOOTHING: f64 = 20.0;
pub const MANIFEST_VERSION: u32 = 1;

/// Row indices of a train/test partition, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles each class with `seed` and sends `round(n_class * test_fraction)`
/// of it to the test side.
pub fn stratified_split(labels: &[bool], test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i]);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Data(
            "stratified split needs both classes present".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(labels.len());
    let mut test = Vec::new();
    for class in [&mut pos, &mut neg] {
        class.shuffle(&mut rng);
        let n_test = ((class.len() as f64 * test_fraction).round() as usize).min(class.len());
        test.extend_from_slice(&class[..n_test]);
        train.extend_from_slice(&class[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// `lambda * positive_rate + (1 - lambda) * prior` with `lambda = n / (n + m)`.
pub fn smoothed_encoding(count: usize, positive_rate: f64, prior: f64, m: f64) -> f64 {
    let n = count as f64;
    let lambda = n / (n + m);
    lambda * positive_rate + (1.0 - lambda) * prior
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub count: usize,
    pub positive_rate: f64,
    pub encoded: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEncoder {
    pub smoothing: f64,
    pub prior: Option<f64>,
    pub columns: BTreeMap<String, BTreeMap<String, CategoryStats>>,
}

impl TargetEncoder {
    pub fn new(smoothing: f64) -> Result<Self> {
        if !(smoothing > 0.0 && smoothing.is_finite()) {
            return Err(Error::Config("target-encoding smoothing must be > 0".into()));
        }
        Ok(TargetEncoder {
            smoothing,
            prior: None,
            columns: BTreeMap::new(),
        })
    }

    /// Fits every named column against the same training labels.
    pub fn fit(&mut self, columns: &[(&str, Vec<&str>)], labels: &[bool]) -> Result<()> {
        if labels.is_empty() {
            return Err(Error::Data("cannot fit target encoder on zero rows".into()));
        }
        let prior = labels.iter().filter(|&&y| y).count() as f64 / labels.len() as f64;
        let mut fitted = BTreeMap::new();
        for (name, values) in columns {
            if values.len() != labels.len() {
                return Err(Error::Data(format!("column `{name}` length mismatch")));
            }
            let mut tallies: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
            for (&v, &y) in values.iter().zip(labels) {
                let t = tallies.entry(v).or_default();
                t.0 += 1;
                t.1 += y as usize;
            }
            let stats = tallies
                .into_iter()
                .map(|(cat, (n, pos))| {
                    let rate = pos as f64 / n as f64;
                    let stats = CategoryStats {
                        count: n,
                        positive_rate: rate,
                        encoded: smoothed_encoding(n, rate, prior, self.smoothing),
                    };
                    (cat.to_string(), stats)
                })
                .collect();
            fitted.insert(name.to_string(), stats);
        }
        self.prior = Some(prior);
        self.columns = fitted;
        Ok(())
    }

    pub fn is_fitted(&self) -> bool {
        self.prior.is_some()
    }

    /// Encoded value; categories unseen in training map to the prior.
    pub fn encode(&self, column: &str, category: &str) -> Result<f64> {
        let prior = self
            .prior
            .ok_or_else(|| Error::State("target encoder used before fit".into()))?;
        let stats = self
            .columns
            .get(column)
            .ok_or_else(|| Error::State(format!("target encoder was not fitted on `{column}`")))?;
        Ok(stats.get(category).map_or(prior, |s| s.encoded))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    /// Constant on the training rows; transformed to 0.
    pub constant: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub columns: Vec<ColumnScale>,
}

impl Standardizer {
    /// Population mean and standard deviation of each training column.
    pub fn fit(columns: &[(&str, Vec<f64>)]) -> Result<Self> {
        let columns = columns
            .iter()
            .map(|(name, values)| {
                if values.is_empty() {
                    return Err(Error::Data(format!("cannot standardize empty `{name}`")));
                }
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let std = var.sqrt();
                let constant = !(std > 1e-12 * mean.abs().max(1.0));
                Ok(ColumnScale {
                    name: name.to_string(),
                    mean,
                    std: if constant { 0.0 } else { std },
                    constant,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Standardizer { columns })
    }

    pub fn scale(&self, column: &str) -> Result<&ColumnScale> {
        self.columns
            .iter()
            .find(|c| c.name == column)
            .ok_or_else(|| Error::State(format!("standardizer was not fitted on `{column}`")))
    }

    pub fn transform(&self, column: &str, x: f64) -> Result<f64> {
        Ok(self.scale(column)?.apply(x))
    }
}

impl ColumnScale {
    pub fn apply(&self, x: f64) -> f64 {
        if self.constant {
            0.0
        } else {
            (x - self.mean) / self.std
        }
    }
}

/// The persisted preprocessing state for one stage: schema, encoder, scaler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub version: u32,
    pub features: Vec<Feature>,
    pub encoder: TargetEncoder,
    pub standardizer: Standardizer,
}

impl Preprocessor {
    pub fn fit(train: &RawTable, smoothing: f64) -> Result<Self> {
        let labels = train.labels();
        let mut encoder = TargetEncoder::new(smoothing)?;
        let mut categorical = Vec::new();
        let mut numeric = Vec::new();
        for (j, &f) in train.features.iter().enumerate() {
            match f.kind() {
                FeatureKind::Categorical => {
                    let values = train
                        .rows
                        .iter()
                        .map(|r| {
                            r.values[j].as_cat().ok_or_else(|| {
                                Error::Data(format!("`{}` expects a category", f.name()))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    categorical.push((f.name(), values));
                }
                FeatureKind::Numeric => {
                    let values = train
                        .rows
                        .iter()
                        .map(|r| {
                            r.values[j].as_num().ok_or_else(|| {
                                Error::Data(format!("`{}` expects a number", f.name()))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    numeric.push((f.name(), values));
                }
            }
        }
        encoder.fit(&categorical, &labels)?;
        let standardizer = Standardizer::fit(&numeric)?;
        Ok(Preprocessor {
            version: MANIFEST_VERSION,
            features: train.features.clone(),
            encoder,
            standardizer,
        })
    }

    pub fn columns(&self) -> Vec<ColumnMeta> {
        self.features
            .iter()
            .map(|f| ColumnMeta {
                name: f.name().to_string(),
                kind: f.kind(),
            })
            .collect()
    }

    /// Encodes one row of raw values given in schema order.
    pub fn transform_values(&self, values: &[FeatureValue]) -> Result<Vec<f64>> {
        if values.len() != self.features.len() {
            return Err(Error::Schema(format!(
                "expected {} features, got {}",
                self.features.len(),
                values.len()
            )));
        }
        self.features
            .iter()
            .zip(values)
            .map(|(&f, v)| self.transform_one(f, v))
            .collect()
    }

    pub fn transform_one(&self, feature: Feature, value: &FeatureValue) -> Result<f64> {
        match (feature.kind(), value) {
            (FeatureKind::Categorical, FeatureValue::Cat(c)) => self.encoder.encode(feature.name(), c),
            (FeatureKind::Numeric, FeatureValue::Num(x)) => {
                self.standardizer.transform(feature.name(), *x)
            }
            (FeatureKind::Categorical, _) => Err(Error::Data(format!(
                "`{}` expects a category",
                feature.name()
            ))),
            (FeatureKind::Numeric, _) => Err(Error::Data(format!(
                "`{}` expects a number",
                feature.name()
            ))),
        }
    }

    pub fn transform(&self, table: &RawTable) -> Result<Dataset> {
        if table.features != self.features {
            return Err(Error::Schema("table schema differs from fitted schema".into()));
        }
        let mut values = Vec::with_capacity(table.len() * self.features.len());
        for row in &table.rows {
            values.extend(self.transform_values(&row.values)?);
        }
        Dataset::new(
            self.columns(),
            values,
            table.labels(),
            table.rows.iter().map(|r| RowOrigin::Source(r.id)).collect(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: Preprocessor = serde_json::from_str(text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: manifest.version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::RawRow;
    use proptest::prelude::*;

    fn labels(n: usize, positives: usize) -> Vec<bool> {
        (0..n).map(|i| i < positives).collect()
    }

    #[test]
    fn split_stratifies_counts() {
        let y = labels(1000, 60);
        let split = stratified_split(&y, 0.10, 42).unwrap();
        let test_pos = split.test.iter().filter(|&&i| y[i]).count();
        assert!((5..=7).contains(&test_pos));
        assert!((99..=101).contains(&split.test.len()));
        assert_eq!(split.train.len() + split.test.len(), 1000);
    }

    #[test]
    fn split_keeps_lone_positive_in_train() {
        let y = labels(10, 1);
        let split = stratified_split(&y, 0.10, 3).unwrap();
        assert_eq!(split.test.len(), 1);
        assert!(!y[split.test[0]]);
        assert!(split.train.contains(&0));
    }

    #[test]
    fn split_is_seeded() {
        let y = labels(500, 40);
        assert_eq!(
            stratified_split(&y, 0.1, 9).unwrap(),
            stratified_split(&y, 0.1, 9).unwrap()
        );
        assert_ne!(
            stratified_split(&y, 0.1, 9).unwrap(),
            stratified_split(&y, 0.1, 10).unwrap()
        );
    }

    #[test]
    fn split_requires_two_classes() {
        assert!(stratified_split(&[false; 20], 0.1, 1).is_err());
        assert!(stratified_split(&labels(20, 3), 0.0, 1).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 2usize..400, pos_frac in 0.01f64..0.99, seed in any::<u64>()) {
            let pos = ((n as f64 * pos_frac) as usize).clamp(1, n - 1);
            let y = labels(n, pos);
            let split = stratified_split(&y, 0.1, seed).unwrap();
            let mut all: Vec<usize> = split.train.iter().chain(&split.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let test_pos = split.test.iter().filter(|&&i| y[i]).count() as f64;
            prop_assert!((test_pos - pos as f64 * 0.1).abs() <= 1.0);
        }

        #[test]
        fn encoding_is_monotone(n in 1usize..10_000, r1 in 0.0f64..1.0, r2 in 0.0f64..1.0, prior in 0.0f64..1.0) {
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let m = DEFAULT_SMOOTHING;
            prop_assert!(smoothed_encoding(n, lo, prior, m) <= smoothed_encoding(n, hi, prior, m) + 1e-15);
            // More support moves the encoding from the prior toward the rate.
            let near = (smoothed_encoding(n + 1, hi, prior, m) - hi).abs();
            let far = (smoothed_encoding(n, hi, prior, m) - hi).abs();
            prop_assert!(near <= far + 1e-15);
            let e = smoothed_encoding(n, hi, prior, m);
            prop_assert!((0.0..=1.0).contains(&e));
        }
    }

    #[test]
    fn encoding_examples() {
        assert!((smoothed_encoding(20, 1.0, 0.06, 20.0) - 0.53).abs() < 1e-12);
        assert_eq!(smoothed_encoding(0, 0.0, 0.06, 20.0), 0.06);
        let n = 1_000_000;
        let e = smoothed_encoding(n, 0.0, 0.06, 20.0);
        assert!(e <= 1.0 / (1.0 + n as f64 / 20.0));
    }

    #[test]
    fn encoder_state_and_fallback() {
        let mut enc = TargetEncoder::new(20.0).unwrap();
        assert!(matches!(enc.encode("TP From", "TP1"), Err(Error::State(_))));
        let values = vec!["a", "a", "b", "b"];
        enc.fit(&[("TP From", values)], &[true, false, false, false]).unwrap();
        assert_eq!(enc.prior, Some(0.25));
        assert_eq!(enc.encode("TP From", "zzz").unwrap(), 0.25);
        let a = enc.encode("TP From", "a").unwrap();
        assert!((a - smoothed_encoding(2, 0.5, 0.25, 20.0)).abs() < 1e-15);
        assert!(matches!(enc.encode("TP To", "a"), Err(Error::State(_))));
        assert!(TargetEncoder::new(0.0).is_err());
    }

    #[test]
    fn standardizer_examples() {
        let s = Standardizer::fit(&[("x", vec![0.0, 2.0]), ("c", vec![5.0, 5.0])]).unwrap();
        let x = s.scale("x").unwrap();
        assert_eq!((x.mean, x.std), (1.0, 1.0));
        assert_eq!(s.transform("x", 0.0).unwrap(), -1.0);
        assert_eq!(s.transform("x", 2.0).unwrap(), 1.0);
        assert_eq!(s.transform("x", 1.0).unwrap(), 0.0);
        let c = s.scale("c").unwrap();
        assert!(c.constant);
        assert_eq!(s.transform("c", 5.0).unwrap(), 0.0);
        let three = Standardizer::fit(&[("c", vec![5.0, 5.0, 5.0])]).unwrap();
        assert!(three.columns[0].constant);
    }

    fn toy_table(rows: &[(&str, f64, bool)]) -> RawTable {
        RawTable {
            features: vec![Feature::TpFrom, Feature::Age],
            rows: rows
                .iter()
                .enumerate()
                .map(|(i, &(c, x, y))| RawRow {
                    id: i as u64,
                    values: vec![FeatureValue::Cat(c.into()), FeatureValue::Num(x)],
                    label: y,
                })
                .collect(),
        }
    }

    #[test]
    fn transformed_train_columns_are_standard() {
        let rows: Vec<(&str, f64, bool)> = (0..200)
            .map(|i| (if i % 3 == 0 { "a" } else { "b" }, (i * i % 97) as f64, i % 7 == 0))
            .collect();
        let table = toy_table(&rows);
        let pre = Preprocessor::fit(&table, 20.0).unwrap();
        let ds = pre.transform(&table).unwrap();
        let age: Vec<f64> = ds.column(1).collect();
        let mean = age.iter().sum::<f64>() / age.len() as f64;
        let sd = (age.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / age.len() as f64).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((sd - 1.0).abs() < 1e-9);
        assert!(ds.column(0).all(|v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn statistics_come_from_train_only() {
        let train = toy_table(&[("a", 1.0, true), ("b", 3.0, false), ("a", 5.0, false)]);
        let test = toy_table(&[("a", 100.0, true), ("c", 200.0, true)]);
        let pre = Preprocessor::fit(&train, 20.0).unwrap();
        let mut union = train.clone();
        union.rows.extend(test.rows.iter().cloned());
        let leaky = Preprocessor::fit(&union, 20.0).unwrap();
        assert_ne!(pre, leaky);
        assert_eq!(pre.standardizer.scale("Age").unwrap().mean, 3.0);
        let encoded = pre.transform(&test).unwrap();
        assert_eq!(encoded.row(1)[0], pre.encoder.prior.unwrap());
    }

    #[test]
    fn manifest_round_trips() {
        let train = toy_table(&[("a", 1.0, true), ("b", 3.0, false)]);
        let pre = Preprocessor::fit(&train, 20.0).unwrap();
        let back = Preprocessor::from_json(&pre.to_json().unwrap()).unwrap();
        assert_eq!(back, pre);
        let mut bumped: serde_json::Value = serde_json::from_str(&pre.to_json().unwrap()).unwrap();
        bumped["version"] = 99.into();
        assert!(matches!(
            Preprocessor::from_json(&bumped.to_string()),
            Err(Error::Version { found: 99, .. })
        ));
    }
}
