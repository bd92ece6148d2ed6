mod common;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use common::*;
use fedcampus_core::model::ModelSpec;
use fedcampus_orchestrator::http::router;
use fedcampus_orchestrator::Orchestrator;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(
    o: &Orchestrator,
    method: Method,
    uri: &str,
    body: Option<Vec<u8>>,
) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = router(o.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(Value::Null),
    )
}

fn model_bytes(id: &str, w: f64) -> Vec<u8> {
    serde_json::to_vec(&ModelSpec::linear(id, 2).with_params(vec![w, 0.0, 0.0])).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn models_endpoints() {
    let o = orchestrator(2);
    let (s, v) = call(
        &o,
        Method::POST,
        "/api/models",
        Some(model_bytes("sleep_eff", 0.0)),
    )
    .await;
    assert_eq!(
        (s, v.clone()),
        (
            StatusCode::CREATED,
            json!({"model_id": "sleep_eff", "version": 1, "duplicate": false})
        )
    );
    let (s, v) = call(
        &o,
        Method::POST,
        "/api/models",
        Some(model_bytes("sleep_eff", 1.0)),
    )
    .await;
    assert_eq!((s, &v["version"]), (StatusCode::CREATED, &json!(2)));
    let (s, v) = call(
        &o,
        Method::POST,
        "/api/models",
        Some(model_bytes("sleep_eff", 1.0)),
    )
    .await;
    assert_eq!(
        (s, v),
        (
            StatusCode::OK,
            json!({"model_id": "sleep_eff", "version": 2, "duplicate": true})
        )
    );

    let (s, v) = call(
        &o,
        Method::POST,
        "/api/models",
        Some(b"{\"model_id\":\"x\"}".to_vec()),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "InvalidModel");
    assert!(v["detail"].as_str().unwrap().contains("missing field"));

    let (s, v) = call(&o, Method::GET, "/api/models", None).await;
    assert_eq!(s, StatusCode::OK);
    let listed: Vec<(String, u64)> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|e| {
            (
                e["model_id"].as_str().unwrap().into(),
                e["version"].as_u64().unwrap(),
            )
        })
        .collect();
    assert_eq!(
        listed,
        vec![("sleep_eff".into(), 1), ("sleep_eff".into(), 2)]
    );
    assert_eq!(v[0]["status"], "Active");
    assert_eq!(v[1]["document"]["params"], json!([1.0, 0.0, 0.0]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn session_endpoints() {
    let o = orchestrator(2);
    let base = o.config().fl_port_pool.base;
    call(&o, Method::POST, "/api/models", Some(model_bytes("m", 0.0))).await;
    let body = json!({
        "session_id": "s1", "kind": "FL", "model_id": "m", "rounds": 2, "min_clients": 5,
        "hyperparams": {"learning_rate": 0.1, "epochs": 1, "batch_size": 8, "seed": 3}
    });
    let (s, v) = call(
        &o,
        Method::POST,
        "/api/sessions",
        Some(serde_json::to_vec(&body).unwrap()),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["port"], base);
    assert_eq!(v["state"], "WaitingForClients");
    assert_eq!(v["config"]["model_version"], 1);
    assert_eq!(v["n_clients_joined"], 0);

    let (s, v) = call(&o, Method::GET, "/api/sessions", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 1);
    let (s, v) = call(&o, Method::GET, "/api/sessions/s1", None).await;
    assert_eq!((s, &v["session_id"]), (StatusCode::OK, &json!("s1")));
    let (s, v) = call(&o, Method::GET, "/api/sessions/s1/rounds", None).await;
    assert_eq!((s, v), (StatusCode::OK, json!([])));

    let (s, v) = call(
        &o,
        Method::POST,
        "/api/tasks",
        Some(br#"{"platform":"IndexKeyed","app_version":"2.1"}"#.to_vec()),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["tasks"][0]["task_id"], "s1");
    assert_eq!(v["tasks"][0]["port"], base);

    let (s, v) = call(&o, Method::GET, "/api/health", None).await;
    assert_eq!(
        (s, v),
        (StatusCode::OK, json!({"status": "ok", "live_sessions": 1}))
    );

    let (s, v) = call(&o, Method::POST, "/api/sessions/s1/stop", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["state"], json!({"Failed": {"reason": "Stopped"}}));
    let (_, v) = call(&o, Method::GET, "/api/health", None).await;
    assert_eq!(v["live_sessions"], 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn error_mapping() {
    let o = orchestrator(1);
    call(&o, Method::POST, "/api/models", Some(model_bytes("m", 0.0))).await;
    let fl = |id: &str| {
        serde_json::to_vec(&json!({
            "session_id": id, "kind": "FL", "model_id": "m", "min_clients": 1,
            "hyperparams": {"learning_rate": 0.1, "epochs": 1, "batch_size": "Full", "seed": 0}
        }))
        .unwrap()
    };
    let cases = [
        (Method::GET, "/api/sessions/nope", None, StatusCode::NOT_FOUND, "UnknownSession"),
        (Method::GET, "/api/sessions/nope/rounds", None, StatusCode::NOT_FOUND, "UnknownSession"),
        (Method::POST, "/api/sessions/nope/stop", None, StatusCode::NOT_FOUND, "UnknownSession"),
        (Method::GET, "/api/queries/nope/result", None, StatusCode::NOT_FOUND, "UnknownQuery"),
        (Method::POST, "/api/sessions", Some(b"{".to_vec()), StatusCode::BAD_REQUEST, "BadRequest"),
        (Method::POST, "/api/sessions", Some(br#"{"kind":"FL","min_clients":1,"port":9001}"#.to_vec()), StatusCode::BAD_REQUEST, "BadRequest"),
        (
            Method::POST,
            "/api/sessions",
            Some(br#"{"kind":"FL","model_id":"zzz","min_clients":1,"hyperparams":{"learning_rate":0.1,"epochs":1,"batch_size":"Full","seed":0}}"#.to_vec()),
            StatusCode::NOT_FOUND,
            "UnknownModel",
        ),
        (Method::POST, "/api/sessions", Some(br#"{"kind":"FA","min_clients":1}"#.to_vec()), StatusCode::BAD_REQUEST, "InvalidConfig"),
        (Method::POST, "/api/sessions", Some(fl("a")), StatusCode::CREATED, ""),
        (Method::POST, "/api/sessions", Some(fl("a")), StatusCode::CONFLICT, "DuplicateSession"),
        (Method::POST, "/api/sessions", Some(fl("b")), StatusCode::SERVICE_UNAVAILABLE, "PortPoolExhausted"),
        (Method::POST, "/api/tasks", Some(b"{}".to_vec()), StatusCode::BAD_REQUEST, "BadRequest"),
    ];
    for (method, uri, body, status, error) in cases {
        let (s, v) = call(&o, method, uri, body).await;
        assert_eq!(s, status, "{uri}: {v}");
        if !error.is_empty() {
            assert_eq!(v["error"], error, "{uri}: {v}");
            assert!(v["detail"].is_string());
        }
    }
    o.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn fa_result_endpoint_serves_completed_query() {
    use fedcampus_core::analytics::{
        BucketSpec, FAQuery, FAQueryKind, HeavyHittersQuery, ReportPayload,
    };
    use fedcampus_orchestrator::SessionRequest;
    let o = orchestrator(1);
    let q = FAQuery {
        query_id: "steps-hh".into(),
        kind: FAQueryKind::HeavyHitters(HeavyHittersQuery {
            buckets: BucketSpec::default_steps(),
            k: 1,
            epsilon: 50.0,
            cluster_by: "cluster".into(),
        }),
    };
    let v = o
        .create_session(SessionRequest::fa(q, 2).with_id("fa"))
        .unwrap();
    for k in 0..2 {
        spawn_client(
            v.port,
            "fa",
            &format!("c{k}"),
            Behaviour::Report(ReportPayload::Bucket(4)),
        );
    }
    o.wait_session("fa").await.unwrap();
    let (s, v) = call(&o, Method::GET, "/api/queries/steps-hh/result", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["kind"], "HeavyHitters");
    assert_eq!(v["query_id"], "steps-hh");
    assert_eq!(v["per_cluster"][0]["cluster"], Value::Null);
    assert_eq!(v["per_cluster"][0]["top"][0]["bucket"], 4);
    let (_, rounds) = call(&o, Method::GET, "/api/sessions/fa/rounds", None).await;
    assert_eq!(rounds[0]["n_completed"], 2);
    assert_eq!(rounds[0]["global_loss"], Value::Null);
}
