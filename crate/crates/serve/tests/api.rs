use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use eqcbm::config::RunConfig;
use eqcbm::datagen::{generate, DataBundle, Split};
use eqcbm::eval::{evaluate, intervention_sweep, Strategy};
use eqcbm::qcav::Overrides;
use eqcbm::trainer::fit;
use eqcbm::Model;
use eqcbm_serve::{router, AppState};

struct Fixture {
    state: Arc<AppState>,
    model: Model,
    data: DataBundle,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = RunConfig::default();
        let data = generate(&cfg.data).unwrap();
        let (model, _) = fit::<f32>(&data.train, &cfg.train).unwrap();
        let state = Arc::new(AppState::new(model.clone(), data.clone(), Split::Test).unwrap());
        Fixture { state, model, data }
    })
}

fn app() -> Router {
    router(Arc::clone(&fixture().state), "*").unwrap()
}

async fn call(app: Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let res = app.oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn json_call(method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let (status, bytes) = call(app(), method, uri, body).await;
    (status, serde_json::from_slice(&bytes).expect("every response is JSON"))
}

fn assert_api_error(status: StatusCode, body: &Value, expect: StatusCode, code: &str) {
    assert_eq!(status, expect, "{body}");
    assert_eq!(body["code"], code, "{body}");
    assert!(body["message"].as_str().is_some_and(|m| !m.is_empty()), "{body}");
    assert_eq!(body.as_object().unwrap().len(), 2, "{body}");
}

#[tokio::test]
async fn model_summary_has_every_documented_key() {
    let (status, body) = json_call("GET", "/api/model", None).await;
    assert_eq!(status, StatusCode::OK);
    for key in [
        "num_concepts",
        "num_classes",
        "d",
        "input_dim",
        "parameter_counts",
        "parameter_total",
        "dataset_sizes",
        "served_split",
        "concept_names",
        "class_names",
    ] {
        assert!(body.get(key).is_some(), "missing {key}: {body}");
    }
    let f = fixture();
    assert_eq!(body["num_concepts"], f.model.num_concepts());
    assert_eq!(body["d"], f.model.concept_dim());
    assert_eq!(body["parameter_total"], f.model.model_info(1).unwrap().total);
    assert_eq!(body["dataset_sizes"]["test"], f.data.test.len());
    assert_eq!(body["concept_names"].as_array().unwrap().len(), f.model.num_concepts());
}

#[tokio::test]
async fn unknown_sample_is_not_found_and_echoes_the_id() {
    for id in ["500", "99999", "abc"] {
        let (status, body) = json_call("GET", &format!("/api/predict/{id}"), None).await;
        assert_api_error(status, &body, StatusCode::NOT_FOUND, "not_found");
        assert!(body["message"].as_str().unwrap().contains(id));
        let (status, body) = json_call("POST", &format!("/api/predict/{id}"), Some(r#"{"overrides": {"0": 9}}"#)).await;
        assert_api_error(status, &body, StatusCode::NOT_FOUND, "not_found");
    }
}

#[tokio::test]
async fn prediction_is_repeatable_and_matches_the_model() {
    let (s1, a) = call(app(), "GET", "/api/predict/17", None).await;
    let (s2, b) = call(app(), "GET", "/api/predict/17", None).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a, b);
    let f = fixture();
    let direct = f.model.predict(f.data.test.features(17)).unwrap();
    assert_eq!(a, serde_json::to_vec(&direct).unwrap());
    let body: Value = serde_json::from_slice(&a).unwrap();
    for u in body["uncertainties"].as_array().unwrap() {
        let u = u.as_f64().unwrap();
        assert!(u > 0.0 && u <= 1.0, "{u}");
    }
}

#[tokio::test]
async fn empty_overrides_equal_plain_prediction() {
    let (_, plain) = call(app(), "GET", "/api/predict/3", None).await;
    for body in [None, Some("{}"), Some(r#"{"overrides": {}}"#), Some("  ")] {
        let (status, got) = call(app(), "POST", "/api/predict/3", body).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(got, plain, "{body:?}");
    }
}

#[tokio::test]
async fn intervention_matches_intervene_predict_byte_for_byte() {
    let f = fixture();
    let mut ov = Overrides::new();
    ov.insert(1, true);
    ov.insert(6, false);
    let (status, got) = call(app(), "POST", "/api/predict/42", Some(r#"{"overrides": {"1": 1, "6": 0}}"#)).await;
    assert_eq!(status, StatusCode::OK);
    let direct = f.model.intervene_predict(f.data.test.features(42), &ov).unwrap();
    assert_eq!(got, serde_json::to_vec(&direct).unwrap());
    let body: Value = serde_json::from_slice(&got).unwrap();
    assert_eq!(body["overrides_applied"], json!({"1": 1, "6": 0}));
}

#[tokio::test]
async fn bad_overrides_are_rejected_with_the_key_named() {
    let cases = [
        (r#"{"overrides": {"2": 2}}"#, "`2`"),
        (r#"{"overrides": {"8": 1}}"#, "`8`"),
        (r#"{"overrides": {"x": 1}}"#, "`x`"),
        (r#"{"overrides": {"3": true}}"#, "`3`"),
        (r#"{"overrides": [1]}"#, "object"),
        (r#"{"override": {}}"#, "`override`"),
        ("[1, 2]", "object"),
        ("{nope", "JSON"),
    ];
    for (body, needle) in cases {
        let (status, v) = json_call("POST", "/api/predict/0", Some(body)).await;
        assert_api_error(status, &v, StatusCode::BAD_REQUEST, "bad_request");
        assert!(v["message"].as_str().unwrap().contains(needle), "{body}: {v}");
    }
}

#[tokio::test]
async fn full_ground_truth_intervention_recovers_prototype_classes() {
    // oracle: a sample whose concept vector is exactly a class prototype
    // belongs, after full correction, to that class
    let f = fixture();
    let ds = &f.data.test;
    let k = ds.num_concepts;
    let mut checked = 0;
    let mut agree = 0;
    for i in 0..ds.len() {
        let c = ds.concepts(i);
        let Some(y) = (0..ds.num_classes).find(|&y| ds.prototype(y) == c) else {
            continue;
        };
        let map: serde_json::Map<String, Value> = (0..k).map(|j| (j.to_string(), json!(c[j]))).collect();
        let body = json!({ "overrides": map }).to_string();
        let (status, v) = json_call("POST", &format!("/api/predict/{i}"), Some(&body)).await;
        assert_eq!(status, StatusCode::OK);
        checked += 1;
        agree += (v["predicted_class"] == y) as usize;
    }
    assert!(checked > ds.len() / 2, "only {checked} prototype-exact samples");
    assert_eq!(agree, checked, "{agree} of {checked} prototype-exact samples map to their prototype class");
}

#[tokio::test]
async fn sweep_at_zero_equals_plain_accuracy() {
    let f = fixture();
    let (status, v) = json_call("POST", "/api/sweep", Some(r#"{"ratios": [0], "seeds": [0, 1]}"#)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let plain = evaluate(&f.model, &f.data.test).unwrap().task_accuracy;
    assert_eq!(v["ratios"].as_array().unwrap().len(), 1);
    for a in v["accuracy"][0].as_array().unwrap() {
        assert_eq!(a.as_f64().unwrap(), plain);
    }
}

#[tokio::test]
async fn sweep_equals_the_library_call() {
    let f = fixture();
    let req = r#"{"ratios": [0.0, 0.25, 0.5, 1.0], "strategy": "uncertainty_desc", "seeds": [4]}"#;
    let (status, got) = call(app(), "POST", "/api/sweep", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    let direct = intervention_sweep(&f.model, &f.data.test, &[0.0, 0.25, 0.5, 1.0], Strategy::UncertaintyDesc, &[4]).unwrap();
    assert_eq!(got, serde_json::to_vec(&direct).unwrap());
    let v: Value = serde_json::from_slice(&got).unwrap();
    assert_eq!(v["accuracy"].as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn bad_sweeps_are_rejected() {
    for body in [
        r#"{"strategy": "sideways"}"#,
        r#"{"ratios": [1.5]}"#,
        r#"{"ratios": []}"#,
        r#"{"seeds": []}"#,
        r#"{"ratio": [0.5]}"#,
        r#"{"ratios": "all"}"#,
    ] {
        let (status, v) = json_call("POST", "/api/sweep", Some(body)).await;
        assert_api_error(status, &v, StatusCode::BAD_REQUEST, "bad_request");
    }
}

#[tokio::test]
async fn samples_page_through_a_split() {
    let f = fixture();
    let (status, v) = json_call("GET", "/api/samples?offset=495&limit=10", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["split"], "test");
    assert_eq!(v["total"], f.data.test.len());
    let rows = v["samples"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0]["id"], 495);
    assert_eq!(rows[0]["label"], f.data.test.label(495));

    let (_, v) = json_call("GET", "/api/samples?split=train&limit=3", None).await;
    assert_eq!(v["split"], "train");
    assert_eq!(v["total"], f.data.train.len());
    assert_eq!(v["samples"][2]["concepts"], json!(f.data.train.concepts(2)));

    for q in ["split=val", "limit=0", "limit=100000", "offset=-1", "page=2"] {
        let (status, v) = json_call("GET", &format!("/api/samples?{q}"), None).await;
        assert_api_error(status, &v, StatusCode::BAD_REQUEST, "bad_request");
    }
}

#[tokio::test]
async fn unknown_routes_and_methods_carry_api_errors() {
    let (status, v) = json_call("GET", "/api/nothing", None).await;
    assert_api_error(status, &v, StatusCode::NOT_FOUND, "not_found");
    let (status, v) = json_call("DELETE", "/api/predict/1", None).await;
    assert_api_error(status, &v, StatusCode::METHOD_NOT_ALLOWED, "bad_request");
    let (status, v) = json_call("GET", "/api/sweep", None).await;
    assert_api_error(status, &v, StatusCode::METHOD_NOT_ALLOWED, "bad_request");
}

#[tokio::test]
async fn cors_allows_the_configured_origin() {
    let req = Request::builder()
        .uri("/api/model")
        .header(header::ORIGIN, "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let res = app().oneshot(req).await.unwrap();
    assert_eq!(res.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");

    let strict = router(Arc::clone(&fixture().state), "http://ui.local").unwrap();
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/api/predict/0")
        .header(header::ORIGIN, "http://ui.local")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let res = strict.oneshot(req).await.unwrap();
    assert_eq!(res.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://ui.local");
    assert!(router(Arc::clone(&fixture().state), "bad\norigin").is_err());
}

#[test]
fn mismatched_dataset_is_refused() {
    let f = fixture();
    let mut cfg = RunConfig::default();
    cfg.data.num_classes = 4;
    cfg.data.train_size = 10;
    cfg.data.test_size = 10;
    let other = generate(&cfg.data).unwrap();
    assert!(AppState::new(f.model.clone(), other, Split::Test).is_err());
}
