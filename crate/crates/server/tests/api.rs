use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use nextact::checkpoint::{save_checkpoint, ModelBundle};
use nextact::features::{ContextMask, SampleCache};
use nextact::harness::run_experiment;
use nextact::service::{DecisionService, PredictionFrame, SessionInfo};
use nextact::synth::{generate_dataset, Corpus, ScenarioConfig};
use nextact::training::TrainConfig;
use nextact_server::{router, CatalogBody, ErrorBody, ModelRef};

struct Fixture {
    corpus: Corpus,
    bundle: ModelBundle,
}

fn fixture() -> &'static Fixture {
    static FX: OnceLock<Fixture> = OnceLock::new();
    FX.get_or_init(|| {
        let corpus = generate_dataset(&ScenarioConfig::default_scenario(), 20, 8).unwrap();
        let cache = SampleCache::build(&corpus.manifest, &corpus.cases, (6, 1, 1), 5, 8, ContextMask::FULL).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 5,
            hidden: vec![16],
            embed_dim: 4,
            seed: 8,
            ..TrainConfig::default()
        };
        let bundle = run_experiment(&cache, &cfg, |_| {}).unwrap().bundle;
        Fixture { corpus, bundle }
    })
}

fn app() -> (Router, Arc<DecisionService>) {
    let fx = fixture();
    let svc = Arc::new(DecisionService::new());
    svc.insert_model(Some("m".into()), fx.bundle.clone());
    svc.add_cases(fx.corpus.cases.clone());
    (router(svc.clone()), svc)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

async fn replay_session(app: &Router, case_id: &str) -> String {
    let (status, body) = call(
        app,
        Method::POST,
        "/sessions",
        Some(json!({"model_id": "m", "mode": "replay", "case_id": case_id})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    let info: SessionInfo = serde_json::from_value(body).unwrap();
    assert_eq!(info.minute, 0);
    info.session_id
}

#[tokio::test]
async fn replay_session_round_trip() {
    let (app, _) = app();
    let case = &fixture().corpus.cases[0];
    let id = replay_session(&app, &case.case_id).await;

    for minute in 0..case.minutes() {
        let (status, body) = call(&app, Method::POST, &format!("/sessions/{id}/tick"), None).await;
        assert_eq!(status, StatusCode::OK);
        let frame: PredictionFrame = serde_json::from_value(body).unwrap();
        assert_eq!(frame.minute, minute);
        assert!(frame.is_consistent());
        assert!(frame.truth.is_some());
    }
    let (status, body) = call(&app, Method::POST, &format!("/sessions/{id}/tick"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let err: ErrorBody = serde_json::from_value(body).unwrap();
    assert_eq!(err.error, "end_of_case");
    assert_eq!(err.minute, Some(case.minutes()));

    let (_, body) = call(&app, Method::GET, &format!("/sessions/{id}/frames"), None).await;
    assert_eq!(body.as_array().unwrap().len() as u32, case.minutes());
    let (_, body) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(body["minute"], json!(case.minutes()));

    let (status, _) = call(&app, Method::DELETE, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn unknown_ids_are_404() {
    let (app, _) = app();
    let (status, body) = call(
        &app,
        Method::POST,
        "/sessions",
        Some(json!({"model_id": "x", "mode": "replay", "case_id": "case-0000"})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "not_found");
    let (status, _) = call(&app, Method::POST, "/sessions/session-99/tick", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Method::GET, "/reports/timeline/case-9999?model_id=m", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Method::GET, "/sessions/nope/stream", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn live_session_accepts_events_and_vitals() {
    let (app, _) = app();
    let (status, body) = call(
        &app,
        Method::POST,
        "/sessions",
        Some(json!({"model_id": "m", "mode": "live", "static": {"age": 40, "injury_type": "blunt"}})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    let id = body["session_id"].as_str().unwrap().to_string();

    let (status, body) = call(
        &app,
        Method::POST,
        &format!("/sessions/{id}/events"),
        Some(json!({"activity": "Intubation", "start_s": 10, "end_s": 50})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    let (status, body) = call(
        &app,
        Method::POST,
        &format!("/sessions/{id}/events"),
        Some(json!({"activity": "Juggling", "start_s": 10, "end_s": 50})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "unknown_activity");
    let (status, _) = call(
        &app,
        Method::POST,
        &format!("/sessions/{id}/vitals"),
        Some(json!({"t_s": 20, "systolic_bp": 80.0, "fio2": "room_air"})),
    )
    .await;
    assert_eq!(status, StatusCode::NO_CONTENT);

    call(&app, Method::POST, &format!("/sessions/{id}/tick"), None).await;
    let (_, body) = call(&app, Method::POST, &format!("/sessions/{id}/tick"), None).await;
    let frame: PredictionFrame = serde_json::from_value(body).unwrap();
    assert!(frame.truth.is_none() && frame.outcomes.is_none());
    assert_ne!(frame.context.last_k_ids[0], 0);
}

#[tokio::test]
async fn replay_rejects_live_inputs() {
    let (app, _) = app();
    let id = replay_session(&app, &fixture().corpus.cases[1].case_id).await;
    let (status, body) = call(
        &app,
        Method::POST,
        &format!("/sessions/{id}/events"),
        Some(json!({"activity": "Intubation", "start_s": 10, "end_s": 50})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "mode");
}

#[tokio::test]
async fn overrides_apply_and_remove() {
    let (app, _) = app();
    let id = replay_session(&app, &fixture().corpus.cases[2].case_id).await;
    let (status, body) = call(
        &app,
        Method::POST,
        &format!("/sessions/{id}/overrides"),
        Some(json!({"kind": "vitals", "t_s": 0, "patch": {"systolic_bp": 70.0}})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    let oid = body["override_id"].as_u64().unwrap();
    let (status, body) = call(
        &app,
        Method::POST,
        &format!("/sessions/{id}/overrides"),
        Some(json!({"kind": "inject_event", "activity": "Juggling", "start_s": 0, "end_s": 5})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");

    let (_, info) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(info["overrides"].as_array().unwrap().len(), 1);
    let (status, _) = call(&app, Method::DELETE, &format!("/sessions/{id}/overrides/{oid}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _) = call(&app, Method::DELETE, &format!("/sessions/{id}/overrides/{oid}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn stream_delivers_frames_until_close() {
    let (app, svc) = app();
    let id = replay_session(&app, &fixture().corpus.cases[3].case_id).await;
    let req = Request::get(format!("/sessions/{id}/stream")).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()[header::CONTENT_TYPE], "text/event-stream");
    for _ in 0..3 {
        call(&app, Method::POST, &format!("/sessions/{id}/tick"), None).await;
    }
    svc.close_session(&id).unwrap();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    let frames: Vec<PredictionFrame> = text
        .lines()
        .filter_map(|l| l.strip_prefix("data: "))
        .map(|d| serde_json::from_str(d).unwrap())
        .collect();
    assert_eq!(frames.iter().map(|f| f.minute).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert_eq!(text.matches("event: frame").count(), 3);
    assert!(text.contains("id: 2"));
}

#[tokio::test]
async fn models_catalog_cases_and_timeline() {
    let (app, _) = app();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&fixture().bundle, &path).unwrap();

    let (status, body) = call(
        &app,
        Method::POST,
        "/models",
        Some(json!({"path": path.to_str().unwrap(), "model_id": "disk"})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    let r: ModelRef = serde_json::from_value(body).unwrap();
    assert_eq!(r.model_id, "disk");
    let (_, body) = call(&app, Method::GET, "/models", None).await;
    assert_eq!(body, json!(["disk", "m"]));

    std::fs::write(dir.path().join("bad.ckpt"), b"garbage").unwrap();
    let (status, body) = call(
        &app,
        Method::POST,
        "/models",
        Some(json!({"path": dir.path().join("bad.ckpt").to_str().unwrap()})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");

    let (status, body) = call(&app, Method::GET, "/catalog?model_id=disk", None).await;
    assert_eq!(status, StatusCode::OK);
    let catalog: CatalogBody = serde_json::from_value(body).unwrap();
    assert_eq!(catalog.activities, fixture().bundle.catalog().labels());
    assert_eq!(catalog.hash, fixture().bundle.catalog().hash());

    let (_, body) = call(&app, Method::GET, "/cases", None).await;
    assert_eq!(body.as_array().unwrap().len(), fixture().corpus.cases.len());

    let case = &fixture().corpus.cases[0];
    let (status, body) = call(
        &app,
        Method::GET,
        &format!("/reports/timeline/{}?model_id=m&cutoff=1.1", case.case_id),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["activities"], json!([]));
    assert_eq!(body["minutes"].as_array().unwrap().len() as u32, case.minutes());
}
