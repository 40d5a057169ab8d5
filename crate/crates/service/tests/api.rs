use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use candle_core::DType;
use covidscreen_core::cam::encode_png;
use covidscreen_core::nn::{Checkpoint, CheckpointMeta, Model, ModelSpec, Task};
use covidscreen_service::{router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use image::{Rgb, RgbImage};
use serde_json::{json, Value};
use tower::ServiceExt;

const BOUNDARY: &str = "XxBoundaryxX";

fn write_ckpt(dir: &Path, task: Task, seed: u64) -> PathBuf {
    let model = Model::new(&ModelSpec::tiny(task, 64), DType::F32, seed).unwrap();
    let path = dir.join(format!("{}.ckpt", task.as_str()));
    Checkpoint::from_model(&model, CheckpointMeta { seed, ..Default::default() }).unwrap().save(&path).unwrap();
    path
}

fn test_png(w: u32, h: u32, seed: u32) -> Vec<u8> {
    let img = RgbImage::from_fn(w, h, |x, y| {
        let v = ((x * 7 + y * 13 + seed * 31) % 256) as u8;
        Rgb([v, v.wrapping_add(40), 255 - v])
    });
    encode_png(&img).unwrap()
}

struct Harness {
    dir: tempfile::TempDir,
    config: ServiceConfig,
}

impl Harness {
    fn new(ct: bool, cxr: bool) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = ServiceConfig {
            ct_checkpoint: ct.then(|| write_ckpt(dir.path(), Task::Ct, 1)),
            cxr_checkpoint: cxr.then(|| write_ckpt(dir.path(), Task::Cxr, 2)),
            store_path: dir.path().join("cases.db"),
            ..Default::default()
        };
        Self { dir, config }
    }

    fn app(&self) -> Router {
        router(AppState::open(self.config.clone()).unwrap())
    }
}

fn multipart(parts: &[(&str, Option<&str>, &[u8])]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, filename, data) in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        match filename {
            Some(f) => body.extend_from_slice(
                format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{f}\"\r\nContent-Type: application/octet-stream\r\n\r\n")
                    .as_bytes(),
            ),
            None => body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes()),
        }
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

fn predict_request(modality: &str, bytes: &[u8]) -> Request<Body> {
    let body = multipart(&[("modality", None, modality.as_bytes()), ("file", Some("scan.png"), bytes)]);
    Request::post("/v1/predict")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, axum::http::HeaderMap) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec(), headers)
}

async fn send_json(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let (s, b, _) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post_json(uri: &str, v: Value) -> Request<Body> {
    Request::post(uri).header(header::CONTENT_TYPE, "application/json").body(Body::from(v.to_string())).unwrap()
}

async fn predict_ok(app: &Router, modality: &str, bytes: &[u8]) -> Value {
    let (s, v) = send_json(app, predict_request(modality, bytes)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v
}

#[tokio::test]
async fn health_reports_loaded_models() {
    let none = Harness::new(false, false);
    let (s, v) = send_json(&none.app(), get("/v1/health")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "degraded");
    assert_eq!(v["models"]["ct"]["loaded"], false);

    let both = Harness::new(true, true);
    let (_, v) = send_json(&both.app(), get("/v1/health")).await;
    assert_eq!(v["status"], "ok");
    assert!(v["models"]["cxr"]["version"].as_str().unwrap().starts_with("cxr-"));
    assert_eq!(v["max_upload_bytes"], 16 * 1024 * 1024);
}

#[tokio::test]
async fn predict_returns_a_stored_case() {
    let h = Harness::new(true, true);
    let app = h.app();
    let png = test_png(80, 60, 1);
    let ct = predict_ok(&app, "ct", &png).await;
    let probs = ct["probabilities"].as_object().unwrap();
    assert_eq!(probs.keys().collect::<Vec<_>>(), ["covid19", "normal", "other_pneumonia"]);
    assert!(probs.values().all(|p| (0.0..=1.0).contains(&p.as_f64().unwrap())));
    let best = probs.iter().max_by(|a, b| a.1.as_f64().partial_cmp(&b.1.as_f64()).unwrap()).unwrap().0;
    assert_eq!(ct["predicted_label"], best.as_str());
    assert_eq!(ct["triage"], "UNREVIEWED");
    assert_eq!(ct["revision"], 0);
    assert!(ct["model_version"].as_str().unwrap().starts_with("ct-"));
    assert!(ct["inference_ms"].as_f64().unwrap() >= 0.0);

    let id = ct["case_id"].as_str().unwrap();
    let (s, fetched) = send_json(&app, get(&format!("/v1/cases/{id}"))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(fetched["probabilities"], ct["probabilities"]);
    assert_eq!(fetched["filename"], "scan.png");

    let (s, raw, headers) = send(&app, get(&format!("/v1/cases/{id}/image"))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(headers[header::CONTENT_TYPE], "image/png");
    assert_eq!(raw, png);

    let cxr = predict_ok(&app, "cxr", &png).await;
    let p = cxr["probabilities"]["covid19"].as_f64().unwrap();
    assert_eq!(cxr["probabilities"].as_object().unwrap().len(), 1);
    assert_eq!(cxr["predicted_label"], if p >= 0.5 { "covid19" } else { "non_covid19" });
}

#[tokio::test]
async fn same_image_gives_same_prediction_and_one_stored_copy() {
    let h = Harness::new(true, false);
    let state = AppState::open(h.config.clone()).unwrap();
    let app = router(state.clone());
    let png = test_png(70, 70, 2);
    let a = predict_ok(&app, "ct", &png).await;
    let b = predict_ok(&app, "ct", &png).await;
    assert_ne!(a["case_id"], b["case_id"]);
    assert_eq!(a["probabilities"], b["probabilities"]);
    assert_eq!(state.store.image_count().unwrap(), 1);
}

#[tokio::test]
async fn predict_rejects_bad_requests() {
    let h = Harness::new(true, false);
    let app = h.app();
    let png = test_png(40, 40, 3);

    let no_file = multipart(&[("modality", None, b"ct")]);
    let req = Request::post("/v1/predict")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(no_file))
        .unwrap();
    let (s, v) = send_json(&app, req).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "missing_file");

    let (s, v) = send_json(&app, predict_request("ct", b"definitely not an image")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "undecodable_image");

    let (s, v) = send_json(&app, predict_request("mri", &png)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["code"], "unsupported_modality");

    let (s, v) = send_json(&app, predict_request("cxr", &png)).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE, "{v}");

    let (_, list) = send_json(&app, get("/v1/cases")).await;
    assert_eq!(list["total"], 0);
}

#[tokio::test]
async fn oversized_uploads_get_413() {
    let mut h = Harness::new(true, false);
    h.config.max_upload_bytes = 2000;
    let app = h.app();
    // over the image limit but inside the multipart allowance
    let (s, v) = send_json(&app, predict_request("ct", &vec![7u8; 2001])).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(v["error"]["code"], "payload_too_large");
    // beyond the body limit altogether
    let (s, _) = send_json(&app, predict_request("ct", &vec![7u8; 200_000])).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    // exactly at the limit is accepted as far as size goes
    let small = test_png(8, 8, 1);
    assert!(small.len() <= 2000);
    predict_ok(&app, "ct", &small).await;
}

#[tokio::test]
async fn cam_overlays_are_cached_and_validated() {
    let h = Harness::new(true, true);
    let app = h.app();
    let png = test_png(90, 70, 4);
    let case = predict_ok(&app, "ct", &png).await;
    let id = case["case_id"].as_str().unwrap();

    let (s, first, headers) = send(&app, get(&format!("/v1/cases/{id}/cam?class=0&alpha=0.4"))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(headers[header::CONTENT_TYPE], "image/png");
    assert_eq!(headers["x-cam-class"], "covid19");
    let decoded = image::load_from_memory(&first).unwrap();
    assert_eq!((decoded.width(), decoded.height()), (90, 70));
    let (_, second, _) = send(&app, get(&format!("/v1/cases/{id}/cam?class=covid19&alpha=0.40"))).await;
    assert_eq!(first, second);

    // alpha 0 reproduces the source pixels
    let (_, plain, _) = send(&app, get(&format!("/v1/cases/{id}/cam?class=1&alpha=0"))).await;
    let src = image::load_from_memory(&png).unwrap().to_rgb8();
    assert_eq!(image::load_from_memory(&plain).unwrap().to_rgb8(), src);

    // default class is the predicted one
    let (s, _, headers) = send(&app, get(&format!("/v1/cases/{id}/cam"))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(headers["x-cam-class"], case["predicted_label"].as_str().unwrap());

    for bad in ["class=3", "class=bogus", "alpha=1.5", "alpha=-0.1", "alpha=nan"] {
        let (s, v) = send_json(&app, get(&format!("/v1/cases/{id}/cam?{bad}"))).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{bad}: {v}");
    }
    let (s, _) = send_json(&app, get("/v1/cases/no-such-case/cam")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    // binary model: positive and negative class maps
    let cxr = predict_ok(&app, "cxr", &png).await;
    let cid = cxr["case_id"].as_str().unwrap();
    for class in ["covid19", "non_covid19"] {
        let (s, _, headers) = send(&app, get(&format!("/v1/cases/{cid}/cam?class={class}"))).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(headers["x-cam-class"], class);
    }
    let (s, _) = send_json(&app, get(&format!("/v1/cases/{cid}/cam?class=2"))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn triage_round_trip_and_stale_revision_conflict() {
    let h = Harness::new(true, false);
    let app = h.app();
    let case = predict_ok(&app, "ct", &test_png(50, 50, 5)).await;
    let id = case["case_id"].as_str().unwrap();
    let uri = format!("/v1/cases/{id}/triage");

    let (s, v) = send_json(
        &app,
        post_json(&uri, json!({"decision": "NEEDS_REVIEW", "note": "ground glass?", "reviewer": "r1", "expected_revision": 0})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["triage"], "NEEDS_REVIEW");
    assert_eq!(v["revision"], 1);
    assert_eq!(v["note"], "ground glass?");
    assert!(v["triaged_at"].is_string());
    assert_eq!(v["probabilities"], case["probabilities"]);

    // a second client still holding revision 0
    let (s, v) = send_json(&app, post_json(&uri, json!({"decision": "CONFIRM_NEGATIVE", "expected_revision": 0}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "revision_conflict");
    assert_eq!(v["case"]["triage"], "NEEDS_REVIEW");
    assert_eq!(v["case"]["revision"], 1);

    let (s, v) = send_json(&app, post_json(&uri, json!({"decision": "CONFIRM_POSITIVE", "expected_revision": 1}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["revision"], 2);
    let (_, fetched) = send_json(&app, get(&format!("/v1/cases/{id}"))).await;
    assert_eq!(fetched["triage"], "CONFIRM_POSITIVE");
    assert_eq!(fetched["history"].as_array().unwrap().len(), 2);

    for bad in [json!({"decision": "UNREVIEWED"}), json!({"decision": "MAYBE"})] {
        let (s, _) = send_json(&app, post_json(&uri, bad)).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    }
    let (s, _) = send_json(&app, Request::post(&uri).body(Body::from("{not json")).unwrap()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = send_json(&app, post_json("/v1/cases/nope/triage", json!({"decision": "NEEDS_REVIEW"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = send_json(&app, get("/v1/cases/nope")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = send_json(&app, get("/v1/cases/nope/image")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn listing_filters_and_paginates() {
    let h = Harness::new(true, true);
    let app = h.app();
    let mut ids = Vec::new();
    for i in 0..5 {
        let modality = if i < 3 { "ct" } else { "cxr" };
        ids.push(predict_ok(&app, modality, &test_png(32, 32, i)).await["case_id"].as_str().unwrap().to_string());
    }
    send_json(&app, post_json(&format!("/v1/cases/{}/triage", ids[1]), json!({"decision": "NEEDS_REVIEW"}))).await;

    let (_, all) = send_json(&app, get("/v1/cases")).await;
    assert_eq!(all["total"], 5);
    let order: Vec<&str> = all["cases"].as_array().unwrap().iter().map(|c| c["case_id"].as_str().unwrap()).collect();
    let newest_first: Vec<&str> = ids.iter().rev().map(String::as_str).collect();
    assert_eq!(order, newest_first);

    let (_, page) = send_json(&app, get("/v1/cases?limit=2&offset=2")).await;
    assert_eq!(page["cases"][0]["case_id"], ids[2].as_str());
    assert_eq!(page["cases"].as_array().unwrap().len(), 2);

    let (_, queue) = send_json(&app, get("/v1/cases?triage=NEEDS_REVIEW")).await;
    assert_eq!(queue["total"], 1);
    assert_eq!(queue["cases"][0]["case_id"], ids[1].as_str());
    let (_, open) = send_json(&app, get("/v1/cases?triage=UNREVIEWED&modality=ct")).await;
    assert_eq!(open["total"], 2);

    for bad in ["triage=LATER", "modality=mri", "limit=0", "limit=501", "offset=-1"] {
        let (s, _) = send_json(&app, get(&format!("/v1/cases?{bad}"))).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{bad}");
    }
}

#[tokio::test]
async fn bearer_token_guards_everything_but_health() {
    let mut h = Harness::new(true, false);
    h.config.api_token = Some("t0ken".into());
    let app = h.app();
    assert_eq!(send_json(&app, get("/v1/health")).await.0, StatusCode::OK);
    let (s, v) = send_json(&app, get("/v1/cases")).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert_eq!(v["error"]["code"], "unauthorized");
    let wrong = Request::get("/v1/cases").header(header::AUTHORIZATION, "Bearer nope").body(Body::empty()).unwrap();
    assert_eq!(send_json(&app, wrong).await.0, StatusCode::UNAUTHORIZED);
    let right = Request::get("/v1/cases").header(header::AUTHORIZATION, "Bearer t0ken").body(Body::empty()).unwrap();
    assert_eq!(send_json(&app, right).await.0, StatusCode::OK);
}

#[tokio::test]
async fn reload_picks_up_new_weights_without_touching_old_cases() {
    let h = Harness::new(true, false);
    let app = h.app();
    let case = predict_ok(&app, "ct", &test_png(40, 40, 6)).await;
    let v1 = case["model_version"].as_str().unwrap().to_string();

    // overwrite the checkpoint with different weights
    let model = Model::new(&ModelSpec::tiny(Task::Ct, 64), DType::F32, 77).unwrap();
    Checkpoint::from_model(&model, CheckpointMeta::default()).unwrap().save(h.config.ct_checkpoint.as_ref().unwrap()).unwrap();
    let (s, health) = send_json(&app, Request::post("/v1/admin/reload").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let v2 = health["models"]["ct"]["version"].as_str().unwrap();
    assert_ne!(v1, v2);

    let id = case["case_id"].as_str().unwrap();
    let (_, old) = send_json(&app, get(&format!("/v1/cases/{id}"))).await;
    assert_eq!(old["model_version"], v1.as_str());
    assert_eq!(old["probabilities"], case["probabilities"]);
    let (_, _, headers) = send(&app, get(&format!("/v1/cases/{id}/cam?class=0"))).await;
    assert_eq!(headers["x-model-version"], v2);

    // a broken checkpoint leaves the slot empty and reported
    std::fs::write(h.config.ct_checkpoint.as_ref().unwrap(), b"garbage").unwrap();
    let (_, health) = send_json(&app, Request::post("/v1/admin/reload").body(Body::empty()).unwrap()).await;
    assert_eq!(health["models"]["ct"]["loaded"], false);
    assert!(health["models"]["ct"]["error"].is_string());
    assert_eq!(send_json(&app, predict_request("ct", &test_png(40, 40, 6))).await.0, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn cases_survive_a_restart() {
    let h = Harness::new(true, false);
    let id = {
        let app = h.app();
        let case = predict_ok(&app, "ct", &test_png(40, 40, 7)).await;
        let id = case["case_id"].as_str().unwrap().to_string();
        let (s, _) =
            send_json(&app, post_json(&format!("/v1/cases/{id}/triage"), json!({"decision": "CONFIRM_NEGATIVE", "note": "clear"})))
                .await;
        assert_eq!(s, StatusCode::OK);
        id
    };
    let app = h.app();
    let (s, v) = send_json(&app, get(&format!("/v1/cases/{id}"))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["triage"], "CONFIRM_NEGATIVE");
    assert_eq!(v["note"], "clear");
    assert_eq!(v["revision"], 1);
    assert!(h.dir.path().join("cases.db").exists());
}
