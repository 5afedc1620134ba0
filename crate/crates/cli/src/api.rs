//! Wire types and request handling for the prediction service.

use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use connex::cost::r_min;
use connex::domain::{DsmStage, Feature, FeatureKind, FeatureValue};
use connex::gbdt::{sigmoid, MODEL_VERSION};
use connex::pipeline::ModelBundle;
use connex::preprocess::Preprocessor;
use connex::shap::TreeExplainer;

/// Largest tolerated `|base + sum(shap) - margin|` in a served response.
pub const LOCAL_ACCURACY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    BadRequest,
    Conflict,
    Unavailable,
    Internal,
}

impl ErrorKind {
    pub fn status(self) -> u16 {
        match self {
            ErrorKind::BadRequest => 400,
            ErrorKind::Conflict => 409,
            ErrorKind::Unavailable => 503,
            ErrorKind::Internal => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub kind: ErrorKind,
    pub error: String,
    /// The request field at fault, when there is one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    /// Index into `perturbations` for what-if errors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<usize>,
}

impl ApiError {
    pub fn new(kind: ErrorKind, error: impl Into<String>) -> Self {
        ApiError {
            kind,
            error: error.into(),
            field: None,
            perturbation: None,
        }
    }

    pub fn field(field: &str, error: impl Into<String>) -> Self {
        ApiError {
            field: Some(field.to_string()),
            ..ApiError::new(ErrorKind::BadRequest, error)
        }
    }

    pub fn unavailable() -> Self {
        ApiError::new(ErrorKind::Unavailable, "no model is loaded")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Attribution {
    pub feature: String,
    pub value: FeatureValue,
    pub shap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictResponse {
    pub model_id: String,
    pub model_version: u32,
    pub stage: DsmStage,
    pub probability: f64,
    /// `probability >= threshold`.
    pub label: bool,
    pub threshold: f64,
    pub margin: f64,
    pub base_value: f64,
    /// Margin-space attributions in the stage's feature order.
    pub shap: Vec<Attribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureInfo {
    pub name: String,
    pub kind: FeatureKind,
    pub connection_time: bool,
}

/// Held-out performance of the served model at its decision threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestMetrics {
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub g_mean: f64,
    /// Break-even cost ratio `1 / precision`; absent when nothing was caught.
    pub r_min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub model_version: u32,
    pub stage: DsmStage,
    pub features: Vec<FeatureInfo>,
    pub threshold: f64,
    pub base_value: f64,
    pub n_trees: usize,
    pub config_hash: String,
    pub test: TestMetrics,
}

/// Everything needed to answer requests for one loaded bundle. Never mutated.
pub struct Snapshot {
    pub info: ModelInfo,
    preprocessor: Preprocessor,
    explainer: TreeExplainer<'static>,
}

impl Snapshot {
    pub fn load(dir: &Path) -> connex::Result<Snapshot> {
        Snapshot::from_bundle(ModelBundle::load(dir)?)
    }

    pub fn from_bundle(bundle: ModelBundle) -> connex::Result<Snapshot> {
        let report = bundle.report;
        let explainer = TreeExplainer::owned(bundle.ensemble)?;
        let op = &report.model.best_f1;
        let r = r_min(&op.counts);
        let info = ModelInfo {
            model_id: bundle.model_sha256,
            model_version: MODEL_VERSION,
            stage: report.stage,
            features: bundle
                .preprocessor
                .features
                .iter()
                .map(|f| FeatureInfo {
                    name: f.name().to_string(),
                    kind: f.kind(),
                    connection_time: f.is_connection_time(),
                })
                .collect(),
            threshold: op.threshold,
            base_value: explainer.base_value(),
            n_trees: explainer.ensemble().trees.len(),
            config_hash: report.config_hash.clone(),
            test: TestMetrics {
                roc_auc: report.model.roc_auc,
                pr_auc: report.model.pr_auc,
                precision: op.rates.precision,
                recall: op.rates.recall,
                f1: op.rates.f1,
                g_mean: op.rates.g_mean,
                r_min: r.is_finite().then_some(r),
            },
        };
        Ok(Snapshot {
            info,
            preprocessor: bundle.preprocessor,
            explainer,
        })
    }

    pub fn stage(&self) -> DsmStage {
        self.info.stage
    }

    /// Checks the request stage against the loaded model.
    pub fn check_stage(&self, request: &Map<String, Value>) -> Result<(), ApiError> {
        let stage = match request.get("stage") {
            None | Some(Value::Null) => return Err(ApiError::field("stage", "missing field `stage`")),
            Some(Value::String(s)) => s
                .parse::<DsmStage>()
                .map_err(|_| ApiError::field("stage", format!("unknown stage `{s}`")))?,
            Some(_) => return Err(ApiError::field("stage", "`stage` must be a string")),
        };
        if stage != self.stage() {
            return Err(ApiError {
                field: Some("stage".into()),
                ..ApiError::new(
                    ErrorKind::Conflict,
                    format!("request is for stage `{stage}` but the loaded model serves `{}`", self.stage()),
                )
            });
        }
        Ok(())
    }

    /// Raw values in schema order. Features of other stages are ignored;
    /// names outside the schema are rejected.
    pub fn parse_features(&self, features: &Map<String, Value>) -> Result<Vec<FeatureValue>, ApiError> {
        if let Some(name) = features.keys().find(|k| Feature::from_name(k).is_none()) {
            return Err(ApiError::field(name, format!("unknown feature `{name}`")));
        }
        self.preprocessor
            .features
            .iter()
            .map(|&f| parse_value(f, features.get(f.name())))
            .collect()
    }

    pub fn predict(&self, values: &[FeatureValue]) -> Result<PredictResponse, ApiError> {
        let mut x = Vec::with_capacity(values.len());
        for (&f, v) in self.preprocessor.features.iter().zip(values) {
            x.push(
                self.preprocessor
                    .transform_one(f, v)
                    .map_err(|e| ApiError::field(f.name(), e.to_string()))?,
            );
        }
        let explanation = self
            .explainer
            .explain(&x)
            .map_err(|e| ApiError::new(ErrorKind::Internal, e.to_string()))?;
        let error = explanation.local_accuracy_error();
        if !(error <= LOCAL_ACCURACY_TOLERANCE) {
            return Err(ApiError::new(
                ErrorKind::Internal,
                format!("explanation failed local accuracy ({error:e})"),
            ));
        }
        let probability = sigmoid(explanation.margin);
        Ok(PredictResponse {
            model_id: self.info.model_id.clone(),
            model_version: self.info.model_version,
            stage: self.stage(),
            probability,
            label: probability >= self.info.threshold,
            threshold: self.info.threshold,
            margin: explanation.margin,
            base_value: explanation.base_value,
            shap: self
                .preprocessor
                .features
                .iter()
                .zip(values)
                .zip(&explanation.phi)
                .map(|((f, v), &phi)| Attribution {
                    feature: f.name().to_string(),
                    value: v.clone(),
                    shap: phi,
                })
                .collect(),
        })
    }

    /// Handles a `/v1/predict` body.
    pub fn handle_predict(&self, body: &Value) -> Result<PredictResponse, ApiError> {
        let request = as_object(body, "request body")?;
        self.check_stage(request)?;
        let features = object_field(request, "features")?;
        let values = self.parse_features(features)?;
        self.predict(&values)
    }

    /// Handles a `/v1/whatif` body: the base request with each perturbation
    /// applied on top, answered in order.
    pub fn handle_whatif(&self, body: &Value) -> Result<Vec<PredictResponse>, ApiError> {
        let request = as_object(body, "request body")?;
        self.check_stage(request)?;
        let base = object_field(request, "base")?;
        self.parse_features(base)?;
        let perturbations = match request.get("perturbations") {
            None | Some(Value::Null) => return Err(ApiError::field("perturbations", "missing field `perturbations`")),
            Some(Value::Array(items)) => items,
            Some(_) => return Err(ApiError::field("perturbations", "`perturbations` must be an array")),
        };
        perturbations
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let at = |e: ApiError| ApiError {
                    perturbation: Some(i),
                    ..e
                };
                let Value::Object(changes) = p else {
                    return Err(at(ApiError::field("perturbations", "each perturbation must be an object")));
                };
                let mut merged = base.clone();
                for (k, v) in changes {
                    merged.insert(k.clone(), v.clone());
                }
                let values = self.parse_features(&merged).map_err(at)?;
                self.predict(&values).map_err(at)
            })
            .collect()
    }
}

fn as_object<'a>(value: &'a Value, what: &str) -> Result<&'a Map<String, Value>, ApiError> {
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(ApiError::new(ErrorKind::BadRequest, format!("{what} must be a JSON object"))),
    }
}

fn object_field<'a>(request: &'a Map<String, Value>, name: &str) -> Result<&'a Map<String, Value>, ApiError> {
    match request.get(name) {
        None | Some(Value::Null) => Err(ApiError::field(name, format!("missing field `{name}`"))),
        Some(Value::Object(m)) => Ok(m),
        Some(_) => Err(ApiError::field(name, format!("`{name}` must be an object"))),
    }
}

fn parse_value(feature: Feature, value: Option<&Value>) -> Result<FeatureValue, ApiError> {
    let name = feature.name();
    let value = match value {
        None | Some(Value::Null) => return Err(ApiError::field(name, format!("missing feature `{name}`"))),
        Some(v) => v,
    };
    match (feature.kind(), value) {
        (FeatureKind::Categorical, Value::String(s)) => Ok(FeatureValue::Cat(s.clone())),
        (FeatureKind::Categorical, _) => Err(ApiError::field(name, format!("`{name}` expects a string category"))),
        (FeatureKind::Numeric, Value::Number(n)) => n
            .as_f64()
            .map(FeatureValue::Num)
            .ok_or_else(|| ApiError::field(name, format!("`{name}` is out of range"))),
        (FeatureKind::Numeric, Value::Bool(b)) if feature == Feature::IsGroup => {
            Ok(FeatureValue::Num(if *b { 1.0 } else { 0.0 }))
        }
        (FeatureKind::Numeric, _) => Err(ApiError::field(name, format!("`{name}` expects a number"))),
    }
}
