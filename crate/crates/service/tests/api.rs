use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use maskfit_core::api::{self, AnnotationDoc, ErrorBody, LandmarkSource, Prediction, SizeResponse};
use maskfit_core::dataset::LandmarkPair;
use maskfit_core::imaging::{save_pgm, Point};
use maskfit_core::synth::{self, SynthParams, SyntheticCorpus};
use maskfit_core::trainer::{self, TrainConfig};
use maskfit_core::{Model, SizeChart};
use maskfit_service::{router, AppState, Store};
use serde_json::{json, Value};
use tower::ServiceExt;

fn corpus(count: usize) -> SyntheticCorpus {
    let params = SynthParams {
        seed: 3,
        count,
        image_w: 320,
        image_h: 320,
        px_per_mm: (1.5, 2.5),
        ..SynthParams::default()
    };
    synth::generate(&params, &SizeChart::eson()).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        n_hidden: 6,
        crop_w: 20,
        crop_h: 15,
        max_epochs: 5,
        patience: 3,
        repetitions: 2,
        ..TrainConfig::default()
    }
}

fn tiny_model(corpus: &SyntheticCorpus) -> Model {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus.write_to(dir.path()).unwrap();
    let records = maskfit_core::dataset::load_manifest(&manifest, &SizeChart::eson()).unwrap();
    trainer::train_model(&records, &tiny_config()).unwrap().0
}

fn app(dir: &Path, model: Option<Model>) -> Router {
    router(AppState::new(Store::open(dir).unwrap(), model, SizeChart::eson()))
}

async fn send(app: &Router, method: &str, uri: &str, content_type: Option<&str>, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(ct) = content_type {
        req = req.header(header::CONTENT_TYPE, ct);
    }
    let resp = app.clone().oneshot(req.body(Body::from(body)).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn send_json(app: &Router, method: &str, uri: &str, body: Value) -> (StatusCode, Value) {
    let (status, bytes) = send(app, method, uri, Some("application/json"), serde_json::to_vec(&body).unwrap()).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, "GET", uri, None, Vec::new()).await
}

async fn upload(app: &Router, pgm: Vec<u8>) -> String {
    let (status, body) = send(app, "POST", "/samples", Some("image/x-portable-graymap"), pgm).await;
    assert!(status == StatusCode::CREATED || status == StatusCode::OK, "{status}");
    serde_json::from_slice::<Value>(&body).unwrap()["id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn upload_is_content_addressed_and_image_is_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let c = corpus(1);
    let pgm = save_pgm(&c.samples[0].image);

    let (s1, b1) = send(&app, "POST", "/samples", Some("image/x-portable-graymap"), pgm.clone()).await;
    let (s2, b2) = send(&app, "POST", "/samples", Some("image/x-portable-graymap"), pgm.clone()).await;
    assert_eq!((s1, s2), (StatusCode::CREATED, StatusCode::OK));
    assert_eq!(b1, b2);
    let id = serde_json::from_slice::<Value>(&b1).unwrap()["id"].as_str().unwrap().to_string();

    let (status, bytes) = get(&app, &format!("/samples/{id}/image")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(bytes, pgm);
}

#[tokio::test]
async fn rejects_bad_uploads() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let (status, _) = send(&app, "POST", "/samples", Some("image/x-portable-graymap"), b"P5\n2 2\n255\n".to_vec()).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = send(&app, "POST", "/samples", Some("text/plain"), b"hello".to_vec()).await;
    assert_eq!(status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
}

#[tokio::test]
async fn unknown_ids_are_404() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    for (method, uri) in [
        ("GET", "/samples/deadbeef"),
        ("GET", "/samples/deadbeef/image"),
        ("GET", "/samples/deadbeef/annotation"),
        ("PUT", "/samples/deadbeef/annotation"),
        ("POST", "/samples/deadbeef/predict"),
        ("POST", "/samples/deadbeef/size"),
        ("GET", "/samples/..%2F..%2Fetc/image"),
        ("GET", "/runs/nope"),
        ("GET", "/runs/nope/report"),
    ] {
        let (status, _) = send_json(&app, method, uri, json!({})).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{method} {uri}");
    }
}

#[tokio::test]
async fn coincident_landmarks_are_422_naming_the_rule() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let id = upload(&app, save_pgm(&corpus(1).samples[0].image)).await;
    let (status, body) = send_json(
        &app,
        "PUT",
        &format!("/samples/{id}/annotation"),
        json!({ "landmarks": { "left": [50.0, 60.0], "right": [50.0, 60.0] } }),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let err: ErrorBody = serde_json::from_value(body).unwrap();
    assert_eq!(err.field.as_deref(), Some("landmarks"));
    assert!(err.rule.unwrap().contains("distinct"));

    let (status, body) = send_json(
        &app,
        "PUT",
        &format!("/samples/{id}/annotation"),
        json!({ "coin": { "p1": [0.0, 0.0], "p2": [10.0, 0.0], "px_per_mm": 3.0 } }),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["field"], "coin");
}

#[tokio::test]
async fn size_before_landmarks_is_409() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let id = upload(&app, save_pgm(&corpus(1).samples[0].image)).await;
    let (status, _) = send_json(&app, "POST", &format!("/samples/{id}/size"), json!({})).await;
    assert_eq!(status, StatusCode::CONFLICT);

    // landmarks without a coin still cannot be sized
    let (status, _) = send_json(
        &app,
        "PUT",
        &format!("/samples/{id}/annotation"),
        json!({ "landmarks": { "left": [50.0, 60.0], "right": [150.0, 60.0] } }),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = send_json(&app, "POST", &format!("/samples/{id}/size"), json!({})).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn size_matches_library_result() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let c = corpus(4);
    let chart = SizeChart::eson();
    for s in &c.samples {
        let id = upload(&app, save_pgm(&s.image)).await;
        let doc = AnnotationDoc::from(&s.record.annotation);
        let (status, _) = send_json(&app, "PUT", &format!("/samples/{id}/annotation"), serde_json::to_value(&doc).unwrap()).await;
        assert_eq!(status, StatusCode::OK);
        let (status, body) = send_json(&app, "POST", &format!("/samples/{id}/size"), Value::Null).await;
        assert_eq!(status, StatusCode::OK);
        let got: SizeResponse = serde_json::from_value(body).unwrap();

        let a = &s.record.annotation;
        let mut want = api::size_landmarks(a.left_nasal_wall, a.right_nasal_wall, a.scale_px_per_mm(), &chart).unwrap();
        want.source = Some(LandmarkSource::Annotation);
        assert_eq!(got, want);
        assert_eq!(got.size, s.record.ground_truth_size.clone().unwrap());
    }
}

#[tokio::test]
async fn annotations_are_versioned() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let id = upload(&app, save_pgm(&corpus(1).samples[0].image)).await;
    let uri = format!("/samples/{id}/annotation");
    let first = json!({ "coin": { "px_per_mm": 3.0 } });
    let second = json!({ "coin": { "px_per_mm": 4.0 }, "nose_box": [10, 10, 100, 75] });
    assert_eq!(send_json(&app, "PUT", &uri, first.clone()).await.1["version"], 1);
    assert_eq!(send_json(&app, "PUT", &uri, second.clone()).await.1["version"], 2);

    let (_, latest) = send_json(&app, "GET", &uri, Value::Null).await;
    assert_eq!(latest["annotation"], second);
    let (_, old) = send_json(&app, "GET", &format!("{uri}?version=1"), Value::Null).await;
    assert_eq!(old["annotation"], first);
    let (_, history) = send_json(&app, "GET", &format!("/samples/{id}/annotations"), Value::Null).await;
    assert_eq!(history.as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn predict_returns_original_coordinates_from_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(12);
    let model = tiny_model(&c);
    let app = app(dir.path(), Some(model.clone()));
    let s = &c.samples[0];
    let id = upload(&app, save_pgm(&s.image)).await;

    let (status, _) = send_json(&app, "POST", &format!("/samples/{id}/predict"), Value::Null).await;
    assert_eq!(status, StatusCode::CONFLICT, "no nose box yet");

    let nose_box = s.record.annotation.nose_box;
    let doc = AnnotationDoc {
        coin: Some(s.record.annotation.scale.into()),
        nose_box: Some(nose_box),
        ..AnnotationDoc::default()
    };
    send_json(&app, "PUT", &format!("/samples/{id}/annotation"), serde_json::to_value(&doc).unwrap()).await;

    let (status, body) = send_json(&app, "POST", &format!("/samples/{id}/predict"), Value::Null).await;
    assert_eq!(status, StatusCode::OK);
    let got: Prediction = serde_json::from_value(body).unwrap();
    let want = api::predict(&model, &s.image, nose_box, None).unwrap();
    assert_eq!(got, want);

    // only a prediction exists, so sizing uses it
    let (status, body) = send_json(&app, "POST", &format!("/samples/{id}/size"), Value::Null).await;
    assert_eq!(status, StatusCode::OK);
    let sized: SizeResponse = serde_json::from_value(body).unwrap();
    assert_eq!(sized.source, Some(LandmarkSource::Prediction));
    assert_eq!(sized.landmarks, want.landmarks);

    // an explicit annotation request with no annotated landmarks conflicts
    let (status, _) = send_json(&app, "POST", &format!("/samples/{id}/size"), json!({ "source": "annotation" })).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn predict_with_mismatched_crop_is_422() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(12);
    let app = app(dir.path(), Some(tiny_model(&c)));
    let s = &c.samples[1];
    let id = upload(&app, save_pgm(&s.image)).await;
    let doc = AnnotationDoc {
        nose_box: Some(s.record.annotation.nose_box),
        ..AnnotationDoc::default()
    };
    send_json(&app, "PUT", &format!("/samples/{id}/annotation"), serde_json::to_value(&doc).unwrap()).await;
    let (status, body) = send_json(&app, "POST", &format!("/samples/{id}/predict"), json!({ "crop": [30, 15] })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("shape"), "{body}");
}

#[tokio::test]
async fn predict_without_model_is_503() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let id = upload(&app, save_pgm(&corpus(1).samples[0].image)).await;
    let (status, _) = send_json(&app, "POST", &format!("/samples/{id}/predict"), Value::Null).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

async fn wait_for_run(app: &Router, id: &str) -> Value {
    for _ in 0..600 {
        let (status, body) = send_json(app, "GET", &format!("/runs/{id}"), Value::Null).await;
        assert_eq!(status, StatusCode::OK);
        if body["state"] != "running" {
            return body;
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
    panic!("run {id} did not finish");
}

#[tokio::test]
async fn background_run_and_restart_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let store_dir = dir.path().join("store");
    let data_dir = dir.path().join("data");
    let c = corpus(6);
    let manifest = c.write_to(&data_dir).unwrap();

    let first = app(&store_dir, None);
    let req = json!({ "manifest": manifest.to_str().unwrap(), "config": tiny_config() });
    let (status, body) = send_json(&first, "POST", "/runs", req.clone()).await;
    assert!(status == StatusCode::ACCEPTED || status == StatusCode::OK, "{status} {body}");
    let run_id = body["run_id"].as_str().unwrap().to_string();
    let done = wait_for_run(&first, &run_id).await;
    assert_eq!(done["state"], "done", "{done}");

    // resubmitting the same manifest and config returns the finished run
    let (status, again) = send_json(&first, "POST", "/runs", req).await;
    assert_eq!((status, &again["run_id"]), (StatusCode::OK, &json!(run_id)));

    let (status, report) = get(&first, &format!("/runs/{run_id}/report")).await;
    assert_eq!(status, StatusCode::OK);
    let on_disk: Value = serde_json::from_slice(&std::fs::read(store_dir.join("runs").join(&run_id).join("report.json")).unwrap()).unwrap();
    assert_eq!(serde_json::from_slice::<Value>(&report).unwrap(), on_disk);

    // a sample with two annotation versions and a size
    let s = &c.samples[0];
    let id = upload(&first, save_pgm(&s.image)).await;
    let doc = AnnotationDoc::from(&s.record.annotation);
    send_json(&first, "PUT", &format!("/samples/{id}/annotation"), json!({ "coin": { "px_per_mm": 2.0 } })).await;
    send_json(&first, "PUT", &format!("/samples/{id}/annotation"), serde_json::to_value(&doc).unwrap()).await;

    let uris = [
        "/samples".to_string(),
        format!("/samples/{id}"),
        format!("/samples/{id}/image"),
        format!("/samples/{id}/annotation"),
        format!("/samples/{id}/annotation?version=1"),
        format!("/samples/{id}/annotations"),
        "/runs".to_string(),
        format!("/runs/{run_id}"),
        format!("/runs/{run_id}/report"),
    ];
    let mut before = Vec::new();
    for uri in &uris {
        before.push(get(&first, uri).await);
    }
    let (_, size_before) = send_json(&first, "POST", &format!("/samples/{id}/size"), Value::Null).await;
    drop(first);

    let second = app(&store_dir, None);
    for (uri, want) in uris.iter().zip(&before) {
        assert_eq!(&get(&second, uri).await, want, "{uri}");
    }
    let (_, size_after) = send_json(&second, "POST", &format!("/samples/{id}/size"), Value::Null).await;
    assert_eq!(size_before, size_after);
}

#[tokio::test]
async fn concurrent_annotation_writes_keep_every_version() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let id = upload(&app, save_pgm(&corpus(1).samples[0].image)).await;
    let uri = format!("/samples/{id}/annotation");
    let mut handles = Vec::new();
    for i in 0..16 {
        let app = app.clone();
        let uri = uri.clone();
        handles.push(tokio::spawn(async move {
            let left = Point::new(10.0 + i as f64, 20.0);
            let doc = AnnotationDoc {
                landmarks: Some(LandmarkPair {
                    left,
                    right: Point::new(200.0, 20.0),
                }),
                ..AnnotationDoc::default()
            };
            send_json(&app, "PUT", &uri, serde_json::to_value(&doc).unwrap()).await.0
        }));
    }
    for h in handles {
        assert_eq!(h.await.unwrap(), StatusCode::OK);
    }
    let (_, history) = send_json(&app, "GET", &format!("/samples/{id}/annotations"), Value::Null).await;
    let versions: Vec<u64> = history.as_array().unwrap().iter().map(|a| a["version"].as_u64().unwrap()).collect();
    assert_eq!(versions, (1..=16).collect::<Vec<_>>());
}

#[test]
fn app_state_is_shareable() {
    fn assert_send_sync<T: Send + Sync>() {}
    assert_send_sync::<Arc<AppState>>();
}
