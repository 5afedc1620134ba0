use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use serde_json::{json, Map, Value};
use tower::ServiceExt;

use connex::domain::{stage_features, DsmStage, FeatureValue};
use connex::pipeline::{load_records, run_stage_to, DataSource, RunConfig};
use connex::synthgen::SynthConfig;
use connex_cli::api::Snapshot;
use connex_cli::server::{router, AppState};

fn small_config(stage: DsmStage) -> RunConfig {
    let synth = SynthConfig {
        n_rows: 20_000,
        seed: 7,
        ..SynthConfig::default()
    };
    let mut cfg = RunConfig::new(stage, DataSource::Synthetic(synth), 7);
    cfg.boost.n_rounds = 60;
    cfg.oversample.n_components = 20;
    cfg.shap_rows = Some(50);
    cfg
}

fn bundle(stage: DsmStage) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("http-{stage}"));
    run_stage_to(&small_config(stage), &dir).unwrap();
    dir
}

fn tactical_dir() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| bundle(DsmStage::Tactical))
}

fn strategic_dir() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| bundle(DsmStage::Strategic))
}

fn loaded_state() -> Arc<AppState> {
    AppState::with_snapshot(Snapshot::load(tactical_dir()).unwrap(), Some(tactical_dir().to_path_buf()))
}

/// Tactical feature maps of the first `n` complete synthetic records.
fn sample_features(n: usize) -> Vec<Map<String, Value>> {
    let cfg = small_config(DsmStage::Tactical);
    let (records, _) = load_records(&cfg.data, cfg.stage).unwrap();
    records
        .iter()
        .filter_map(|r| {
            let mut m = Map::new();
            for &f in stage_features(DsmStage::Tactical) {
                let v = match r.feature_value(f)? {
                    FeatureValue::Num(x) => json!(x),
                    FeatureValue::Cat(s) => json!(s),
                };
                m.insert(f.name().to_string(), v);
            }
            Some(m)
        })
        .take(n)
        .collect()
}

fn base_request() -> Value {
    json!({"stage": "tactical", "features": sample_features(1)[0]})
}

async fn call(state: &Arc<AppState>, method: Method, uri: &str, body: Option<&Value>) -> (StatusCode, Vec<u8>) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(v) => Body::from(serde_json::to_vec(v).unwrap()),
            None => Body::empty(),
        })
        .unwrap();
    let response = router(state.clone()).oneshot(request).await.unwrap();
    let status = response.status();
    (status, to_bytes(response.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn call_json(state: &Arc<AppState>, method: Method, uri: &str, body: Option<&Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(state, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn shap_sum(response: &Value) -> f64 {
    response["shap"].as_array().unwrap().iter().map(|a| a["shap"].as_f64().unwrap()).sum()
}

#[tokio::test]
async fn predict_returns_locally_accurate_explanation() {
    let state = loaded_state();
    let (status, body) = call_json(&state, Method::POST, "/v1/predict", Some(&base_request())).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let margin = body["margin"].as_f64().unwrap();
    let base = body["base_value"].as_f64().unwrap();
    assert!((base + shap_sum(&body) - margin).abs() <= 1e-6);
    let p = body["probability"].as_f64().unwrap();
    assert!((p - 1.0 / (1.0 + (-margin).exp())).abs() < 1e-12);
    assert_eq!(body["label"].as_bool().unwrap(), p >= body["threshold"].as_f64().unwrap());
    assert_eq!(body["stage"], "tactical");
    assert_eq!(body["model_version"], 1);
    assert_eq!(body["model_id"].as_str().unwrap().len(), 64);
    let names: Vec<&str> = body["shap"].as_array().unwrap().iter().map(|a| a["feature"].as_str().unwrap()).collect();
    let expected: Vec<&str> = stage_features(DsmStage::Tactical).iter().map(|f| f.name()).collect();
    assert_eq!(names, expected);
}

#[tokio::test]
async fn short_perceived_connection_is_riskier() {
    let state = loaded_state();
    for features in sample_features(5) {
        let mut probs = Vec::new();
        for minutes in [30, 180] {
            let mut f = features.clone();
            f.insert("Perceived Conn. Time".into(), json!(minutes));
            let (status, body) =
                call_json(&state, Method::POST, "/v1/predict", Some(&json!({"stage": "tactical", "features": f}))).await;
            assert_eq!(status, StatusCode::OK);
            probs.push(body["probability"].as_f64().unwrap());
        }
        assert!(probs[0] > probs[1], "p(30) = {} vs p(180) = {}", probs[0], probs[1]);
    }
}

#[tokio::test]
async fn identical_requests_get_identical_bodies() {
    let state = loaded_state();
    let (_, a) = call(&state, Method::POST, "/v1/predict", Some(&base_request())).await;
    let (_, b) = call(&state, Method::POST, "/v1/predict", Some(&base_request())).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn missing_feature_is_400_naming_it() {
    let state = loaded_state();
    let mut request = base_request();
    request["features"].as_object_mut().unwrap().remove("Age");
    let (status, body) = call_json(&state, Method::POST, "/v1/predict", Some(&request)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "Age");
    assert!(body["error"].as_str().unwrap().contains("Age"));
}

#[tokio::test]
async fn malformed_requests_are_400() {
    let state = loaded_state();
    let mut wrong_type = base_request();
    wrong_type["features"]["Age"] = json!("old");
    let mut unknown = base_request();
    unknown["features"]["Shoe Size"] = json!(44);
    let mut no_stage = base_request();
    no_stage.as_object_mut().unwrap().remove("stage");
    let mut bad_stage = base_request();
    bad_stage["stage"] = json!("lunar");
    for (request, field) in [
        (wrong_type, Some("Age")),
        (unknown, Some("Shoe Size")),
        (no_stage, Some("stage")),
        (bad_stage, Some("stage")),
        (json!([1, 2]), None),
        (json!({"stage": "tactical"}), Some("features")),
    ] {
        let (status, body) = call_json(&state, Method::POST, "/v1/predict", Some(&request)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{request}");
        assert_eq!(body["field"].as_str(), field);
    }
    let raw = Request::builder()
        .method(Method::POST)
        .uri("/v1/predict")
        .body(Body::from("{not json"))
        .unwrap();
    let response = router(state.clone()).oneshot(raw).await.unwrap();
    assert_eq!(response.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn unknown_category_uses_prior() {
    let state = loaded_state();
    let mut request = base_request();
    request["features"]["TP From"] = json!("ZZ9999");
    let (status, body) = call_json(&state, Method::POST, "/v1/predict", Some(&request)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
}

#[tokio::test]
async fn group_flag_accepts_booleans() {
    let state = loaded_state();
    let mut a = base_request();
    a["features"]["Is Group"] = json!(true);
    let mut b = base_request();
    b["features"]["Is Group"] = json!(1);
    let (sa, ba) = call(&state, Method::POST, "/v1/predict", Some(&a)).await;
    let (sb, bb) = call(&state, Method::POST, "/v1/predict", Some(&b)).await;
    assert_eq!((sa, sb), (StatusCode::OK, StatusCode::OK));
    let (ba, bb): (Value, Value) = (serde_json::from_slice(&ba).unwrap(), serde_json::from_slice(&bb).unwrap());
    assert_eq!(ba["probability"], bb["probability"]);
}

#[tokio::test]
async fn stage_mismatch_is_409() {
    let state = loaded_state();
    let mut request = base_request();
    request["stage"] = json!("strategic");
    let (status, body) = call_json(&state, Method::POST, "/v1/predict", Some(&request)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["field"], "stage");
    let whatif = json!({"stage": "post-operations", "base": request["features"], "perturbations": []});
    let (status, _) = call_json(&state, Method::POST, "/v1/whatif", Some(&whatif)).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn no_model_is_503() {
    let state = AppState::empty();
    for (method, uri, body) in [
        (Method::POST, "/v1/predict", Some(base_request())),
        (Method::POST, "/v1/whatif", Some(json!({"stage": "tactical", "base": {}, "perturbations": []}))),
        (Method::GET, "/v1/model", None),
    ] {
        let (status, _) = call(&state, method, uri, body.as_ref()).await;
        assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE, "{uri}");
    }
    let (status, health) = call_json(&state, Method::GET, "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["model_loaded"], false);
}

#[tokio::test]
async fn whatif_with_no_perturbations_is_empty() {
    let state = loaded_state();
    let request = json!({"stage": "tactical", "base": base_request()["features"], "perturbations": []});
    let (status, body) = call_json(&state, Method::POST, "/v1/whatif", Some(&request)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!([]));
}

#[tokio::test]
async fn whatif_answers_in_order_like_predict() {
    let state = loaded_state();
    let base = base_request()["features"].clone();
    let minutes = [15, 60, 240, 45];
    let perturbations: Vec<Value> = minutes.iter().map(|m| json!({"Perceived Conn. Time": m})).collect();
    let request = json!({"stage": "tactical", "base": base, "perturbations": perturbations});
    let (status, body) = call_json(&state, Method::POST, "/v1/whatif", Some(&request)).await;
    assert_eq!(status, StatusCode::OK);
    let responses = body.as_array().unwrap();
    assert_eq!(responses.len(), minutes.len());
    for (m, response) in minutes.iter().zip(responses) {
        let mut features = base.clone();
        features["Perceived Conn. Time"] = json!(m);
        let (_, single) =
            call_json(&state, Method::POST, "/v1/predict", Some(&json!({"stage": "tactical", "features": features}))).await;
        assert_eq!(response, &single);
        let margin = response["margin"].as_f64().unwrap();
        assert!((response["base_value"].as_f64().unwrap() + shap_sum(response) - margin).abs() <= 1e-6);
    }
}

#[tokio::test]
async fn whatif_errors_name_field_and_perturbation() {
    let state = loaded_state();
    let request = json!({
        "stage": "tactical",
        "base": base_request()["features"],
        "perturbations": [{"Age": 40}, {"Age": null}],
    });
    let (status, body) = call_json(&state, Method::POST, "/v1/whatif", Some(&request)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "Age");
    assert_eq!(body["perturbation"], 1);
}

#[tokio::test]
async fn model_endpoint_describes_schema() {
    let state = loaded_state();
    let (status, body) = call_json(&state, Method::GET, "/v1/model", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["stage"], "tactical");
    let features = body["features"].as_array().unwrap();
    assert_eq!(features.len(), stage_features(DsmStage::Tactical).len());
    assert!(features.iter().any(|f| f["name"] == "Perceived Conn. Time" && f["connection_time"] == true));
    let precision = body["test"]["precision"].as_f64().unwrap();
    let r_min = body["test"]["r_min"].as_f64().unwrap();
    assert!((r_min - 1.0 / precision).abs() < 1e-9);
    let (_, health) = call_json(&state, Method::GET, "/healthz", None).await;
    assert_eq!(health["model_id"], body["model_id"]);
}

#[tokio::test]
async fn reload_swaps_the_snapshot() {
    let state = AppState::empty();
    let (status, body) =
        call_json(&state, Method::POST, "/admin/reload", Some(&json!({"model_dir": "/nonexistent/bundle"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "model_dir");
    assert!(state.current().is_none());

    let (status, _) = call(&state, Method::POST, "/admin/reload", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let request = json!({"model_dir": strategic_dir()});
    let (status, body) = call_json(&state, Method::POST, "/admin/reload", Some(&request)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["stage"], "strategic");
    let (status, _) = call(&state, Method::POST, "/v1/predict", Some(&base_request())).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let request = json!({"model_dir": tactical_dir()});
    let (status, _) = call(&state, Method::POST, "/admin/reload", Some(&request)).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = call(&state, Method::POST, "/v1/predict", Some(&base_request())).await;
    assert_eq!(status, StatusCode::OK);

    // An empty body reloads the last directory.
    let (status, body) = call_json(&state, Method::POST, "/admin/reload", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["stage"], "tactical");
}
