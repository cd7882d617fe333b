mod common;

use axum::body::Body;
use axum::http::{header, Method as HttpMethod, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use albf_core::session::{Session, SimulatedSource};
use albf_server::api::{router, AppState};

use common::{tiny_config, tiny_source};

fn app(seed: u64, limit: Option<u64>) -> Router {
    let session = Session::new(tiny_config(seed)).unwrap();
    let source = SimulatedSource::new(tiny_source(seed, limit));
    router(AppState::new(session, Box::new(source)))
}

async fn call(app: &Router, method: HttpMethod, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>, Option<String>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let ctype = resp.headers().get(header::CONTENT_TYPE).map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, ctype)
}

async fn json_call(app: &Router, method: HttpMethod, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes, _) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{uri}: {e}: {bytes:?}")))
}

fn ids(round: &Value) -> Vec<String> {
    round["candidates"].as_array().unwrap().iter().map(|c| c["id"].as_str().unwrap().to_string()).collect()
}

#[tokio::test]
async fn round_select_stats_round_trip() {
    let app = app(1, None);
    for round in 1..=6u64 {
        let (status, first) = json_call(&app, HttpMethod::GET, "/api/session/round", None).await;
        assert_eq!(status, StatusCode::OK);
        let (_, again) = json_call(&app, HttpMethod::GET, "/api/session/round", None).await;
        assert_eq!(first, again, "round GET must be idempotent");
        assert_eq!(first["round_id"], round.to_string());
        assert_eq!(first["criteria"].as_array().unwrap().len(), 3);

        let text = first.to_string();
        for name in ["DAS", "FDMAS", "MVDR", "GCF", "MODEL", "method", "permutation"] {
            assert!(!text.contains(name), "round {round} leaks {name}: {text}");
        }
        let expected = if round <= 5 { 4 } else { 5 };
        let candidate_ids = ids(&first);
        assert_eq!(candidate_ids.len(), expected);

        for c in first["candidates"].as_array().unwrap() {
            let (status, png, ctype) = call(&app, HttpMethod::GET, c["image_url"].as_str().unwrap(), None).await;
            assert_eq!(status, StatusCode::OK);
            assert_eq!(ctype.as_deref(), Some("image/png"));
            let raster = albf_core::postprocess::decode_png(&png).unwrap();
            assert_eq!((raster.height, raster.width), (16, 8));
        }

        let body = json!({ "round_id": round.to_string(), "candidate_id": candidate_ids[0] });
        let (status, out) = json_call(&app, HttpMethod::POST, "/api/session/select", Some(body)).await;
        assert_eq!(status, StatusCode::OK, "{out}");
        assert_eq!(out["round_id"], round.to_string());
        let loss: f64 = out["loss"].as_str().unwrap().parse().unwrap();
        assert!(loss >= 0.0 && loss.is_finite());
        let revealed = out["revealed"].as_array().unwrap();
        assert_eq!(revealed.len(), expected);
        assert!(revealed.iter().any(|r| r["id"] == candidate_ids[0] && r["method"] == out["method"]));
        assert_eq!(out["stats"]["rounds"], round.to_string());

        let (status, stats) = json_call(&app, HttpMethod::GET, "/api/session/stats", None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(stats, out["stats"]);
        assert_eq!(stats["losses"].as_array().unwrap().len() as u64, round);
        let total: u64 =
            stats["shares"].as_array().unwrap().iter().map(|s| s["count"].as_str().unwrap().parse::<u64>().unwrap()).sum();
        assert_eq!(total, round);
    }
}

#[tokio::test]
async fn integer_round_ids_are_accepted() {
    let app = app(2, None);
    let (_, round) = json_call(&app, HttpMethod::GET, "/api/session/round", None).await;
    let body = json!({ "round_id": 1, "candidate_id": ids(&round)[1] });
    let (status, _) = json_call(&app, HttpMethod::POST, "/api/session/select", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn images_of_closed_rounds_are_gone() {
    let app = app(3, None);
    let (_, round) = json_call(&app, HttpMethod::GET, "/api/session/round", None).await;
    let old = ids(&round);
    let body = json!({ "round_id": "1", "candidate_id": old[0] });
    json_call(&app, HttpMethod::POST, "/api/session/select", Some(body)).await;
    json_call(&app, HttpMethod::GET, "/api/session/round", None).await;
    let (status, err) = json_call(&app, HttpMethod::GET, &format!("/api/image/{}", old[0]), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["code"], "UNKNOWN_CANDIDATE");
}

#[tokio::test]
async fn error_codes() {
    let app = app(4, Some(1));

    let (status, err) =
        json_call(&app, HttpMethod::POST, "/api/session/select", Some(json!({"round_id": "1", "candidate_id": "x"}))).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::CONFLICT, Some("BAD_ROUND")));

    let (_, round) = json_call(&app, HttpMethod::GET, "/api/session/round", None).await;
    let id = ids(&round)[0].clone();

    let (status, err) =
        json_call(&app, HttpMethod::POST, "/api/session/select", Some(json!({"round_id": "1", "candidate_id": "bogus"})))
            .await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::NOT_FOUND, Some("UNKNOWN_CANDIDATE")));

    let (status, err) =
        json_call(&app, HttpMethod::POST, "/api/session/select", Some(json!({"round_id": "7", "candidate_id": id}))).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::CONFLICT, Some("BAD_ROUND")));

    let (status, err) =
        json_call(&app, HttpMethod::POST, "/api/session/select", Some(json!({"round_id": "one", "candidate_id": id}))).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::BAD_REQUEST, Some("BAD_ROUND")));

    let (status, err) = json_call(&app, HttpMethod::POST, "/api/session/select", Some(json!({"round_id": "1"}))).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::BAD_REQUEST, Some("UNKNOWN_CANDIDATE")));

    let (status, err) = json_call(&app, HttpMethod::GET, "/api/image/bogus", None).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::NOT_FOUND, Some("UNKNOWN_CANDIDATE")));

    let body = json!({"round_id": "1", "candidate_id": id});
    let (status, _) = json_call(&app, HttpMethod::POST, "/api/session/select", Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK);
    let (status, err) = json_call(&app, HttpMethod::POST, "/api/session/select", Some(body)).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::CONFLICT, Some("SEQUENCING")));

    let (status, err) = json_call(&app, HttpMethod::GET, "/api/session/round", None).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::CONFLICT, Some("SEQUENCING")));

    let (status, err) = json_call(&app, HttpMethod::GET, "/api/nothing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(err["message"].is_string());

    let (status, err) = json_call(&app, HttpMethod::DELETE, "/api/session/stats", None).await;
    assert_eq!(status, StatusCode::METHOD_NOT_ALLOWED);
    assert!(err["code"].is_string());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_round_requests_open_one_round() {
    let app = app(5, None);
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let app = app.clone();
            tokio::spawn(async move { json_call(&app, HttpMethod::GET, "/api/session/round", None).await })
        })
        .collect();
    let mut bodies = Vec::new();
    for h in handles {
        let (status, body) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        bodies.push(body);
    }
    assert!(bodies.iter().all(|b| b == &bodies[0]));
    assert_eq!(bodies[0]["round_id"], "1");
}
