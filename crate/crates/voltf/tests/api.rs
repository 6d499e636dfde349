use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use voltf::service::{router, AppState, VOLUME_HEADER};
use voltf::store::Store;
use voltf_core::neural::{save_model, MlpNetwork, DEFAULT_LAYERS};
use voltf_core::volume::{make_phantom, PhantomSpec, Volume};

fn app(dir: &std::path::Path, max_voxels: usize) -> Router {
    router(Arc::new(AppState::new(Store::open(dir).unwrap(), max_voxels)))
}

fn phantom() -> Volume {
    let spec = PhantomSpec::new([16, 16, 16], 0.1)
        .with_shell([7.5, 7.5, 7.5], 6.0, 0.5)
        .with_shell([7.5, 7.5, 7.5], 3.0, 0.9);
    make_phantom(&spec).unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

fn json_req(method: &str, uri: &str, body: Value) -> Request<Body> {
    Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

async fn upload(app: &Router, v: &Volume) -> String {
    let header = serde_json::to_string(&v.header()).unwrap();
    let req = Request::builder()
        .method("POST")
        .uri("/volumes")
        .header(VOLUME_HEADER, header)
        .body(Body::from(v.to_bytes()))
        .unwrap();
    let (status, body) = send(app, req).await;
    assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
    let v: Value = serde_json::from_slice(&body).unwrap();
    v["volume_id"].as_str().unwrap().to_owned()
}

async fn upload_model(app: &Router, net: &MlpNetwork) -> String {
    let req = Request::builder()
        .method("POST")
        .uri("/models")
        .body(Body::from(save_model(net)))
        .unwrap();
    let (status, body) = send(app, req).await;
    assert_eq!(status, StatusCode::CREATED);
    let v: Value = serde_json::from_slice(&body).unwrap();
    v["model_id"].as_str().unwrap().to_owned()
}

async fn session(app: &Router, volume: &str, model: Option<&str>) -> String {
    let (status, body) = send(
        app,
        json_req("POST", "/sessions", json!({ "volume_id": volume, "model_id": model })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
    let v: Value = serde_json::from_slice(&body).unwrap();
    v["session_id"].as_str().unwrap().to_owned()
}

fn filter(opacity: f64) -> Value {
    json!({
        "center": [0.4, 0.2],
        "size": [0.2, 0.1],
        "kernel": "gauss",
        "color": [1.0, 0.0, 0.0],
        "opacity": opacity,
    })
}

#[tokio::test]
async fn histogram_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 1 << 20);
    let id = upload(&app, &phantom()).await;

    let (status, body) = send(&app, Request::get(format!("/volumes/{id}/histogram")).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let h = voltf_core::JointHistogram::from_json(std::str::from_utf8(&body).unwrap()).unwrap();
    assert_eq!(h.total(), 16 * 16 * 16);

    let (status, body) = send(
        &app,
        Request::get(format!("/volumes/{id}/histogram.png")).body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let img = image::load_from_memory(&body).unwrap();
    assert_eq!((img.width(), img.height()), (256, 256));
    assert!(matches!(img, image::DynamicImage::ImageLuma8(_)));

    let (status, body) = send(&app, Request::get("/volumes").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let list: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(list["volumes"], json!([id]));
}

#[tokio::test]
async fn put_filters_validates_and_keeps_state_on_error() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 1 << 20);
    let vid = upload(&app, &phantom()).await;
    let sid = session(&app, &vid, None).await;
    let uri = format!("/sessions/{sid}/filters");

    let (status, body) = send(&app, Request::get(&uri).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap(), json!([]));

    let (status, _) = send(&app, json_req("PUT", &uri, json!([filter(0.5)]))).await;
    assert_eq!(status, StatusCode::OK);

    let (status, body) = send(&app, json_req("PUT", &uri, json!([filter(0.5), filter(1.5)]))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let err: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(err["field"], "filters[1].opacity");
    assert!(err["error"].as_str().unwrap().contains("opacity"));

    let (_, body) = send(&app, Request::get(&uri).body(Body::empty()).unwrap()).await;
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap(), json!([filter(0.5)]));

    let (status, _) = send(&app, json_req("PUT", &uri, json!([{"center": [0.5]}]))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (_, body) = send(&app, Request::get(&uri).body(Body::empty()).unwrap()).await;
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap(), json!([filter(0.5)]));
}

#[tokio::test]
async fn autoplace_with_zero_model_centers_filters() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 1 << 20);
    let vid = upload(&app, &phantom()).await;
    let mid = upload_model(&app, &MlpNetwork::zeros(&DEFAULT_LAYERS).unwrap()).await;
    let sid = session(&app, &vid, Some(&mid)).await;

    let (status, body) = send(&app, json_req("POST", &format!("/sessions/{sid}/autoplace"), json!({}))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let filters: Value = serde_json::from_slice(&body).unwrap();
    let filters = filters.as_array().unwrap();
    assert_eq!(filters.len(), 2);
    for f in filters {
        assert_eq!(f["center"], json!([0.5, 0.5]));
        assert_eq!(f["size"], json!([0.5, 0.5]));
    }
    assert_eq!(filters[0]["color"], json!([1.0, 1.0, 0.0]));
    assert_eq!(filters[1]["color"], json!([1.0, 0.0, 0.0]));

    let (_, stored) = send(&app, Request::get(format!("/sessions/{sid}/filters")).body(Body::empty()).unwrap()).await;
    assert_eq!(stored, body);
}

#[tokio::test]
async fn autoplace_without_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 1 << 20);
    let vid = upload(&app, &phantom()).await;
    let sid = session(&app, &vid, None).await;
    let (status, _) = send(&app, json_req("POST", &format!("/sessions/{sid}/autoplace"), json!({}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn render_without_filters_is_background() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 1 << 20);
    let vid = upload(&app, &phantom()).await;
    let sid = session(&app, &vid, None).await;
    let camera = voltf_core::Camera::orthographic_front([16, 16, 16], 10.0, 24, 20);
    let body = json!({
        "camera": camera,
        "settings": { "background": [0.2, 0.4, 0.6, 1.0] },
    });
    let (status, png) = send(&app, json_req("POST", &format!("/sessions/{sid}/render"), body)).await;
    assert_eq!(status, StatusCode::OK);
    let img = image::load_from_memory(&png).unwrap().into_rgba8();
    assert_eq!(img.dimensions(), (24, 20));
    let bg = image::Rgba([51, 102, 153, 255]);
    assert!(img.pixels().all(|p| *p == bg));
}

#[tokio::test]
async fn unknown_ids_are_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 1 << 20);
    let missing = "0123456789abcdef0123456789abcdef";
    for uri in [
        format!("/volumes/{missing}/histogram"),
        format!("/volumes/{missing}/histogram.png"),
        format!("/sessions/{missing}/filters"),
        "/volumes/not-an-id/histogram".to_owned(),
    ] {
        let (status, _) = send(&app, Request::get(&uri).body(Body::empty()).unwrap()).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
    }
    let (status, _) = send(&app, json_req("POST", "/sessions", json!({ "volume_id": missing }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let vid = upload(&app, &phantom()).await;
    let (status, _) = send(
        &app,
        json_req("POST", "/sessions", json!({ "volume_id": vid, "model_id": missing })),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send(&app, json_req("POST", &format!("/sessions/{missing}/render"), json!({}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn oversized_volume_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 1000);
    let req = Request::builder()
        .method("POST")
        .uri("/volumes")
        .header(VOLUME_HEADER, r#"{"dims":[16,16,16],"dtype":"u8"}"#)
        .body(Body::from(vec![0u8; 4096]))
        .unwrap();
    let (status, _) = send(&app, req).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn bad_uploads_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 1 << 20);
    let req = Request::builder()
        .method("POST")
        .uri("/volumes")
        .header(VOLUME_HEADER, r#"{"dims":[4,4,4],"dtype":"u8"}"#)
        .body(Body::from(vec![0u8; 10]))
        .unwrap();
    let (status, _) = send(&app, req).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let req = Request::builder().method("POST").uri("/volumes").body(Body::from(vec![0u8; 64])).unwrap();
    let (status, _) = send(&app, req).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let req = Request::builder().method("POST").uri("/models").body(Body::from("{}")).unwrap();
    let (status, _) = send(&app, req).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn restart_restores_volumes_and_models() {
    let dir = tempfile::tempdir().unwrap();
    let (vid, mid) = {
        let app = app(dir.path(), 1 << 20);
        let vid = upload(&app, &phantom()).await;
        let mid = upload_model(&app, &MlpNetwork::zeros(&DEFAULT_LAYERS).unwrap()).await;
        session(&app, &vid, Some(&mid)).await;
        (vid, mid)
    };
    let app = app(dir.path(), 1 << 20);
    let (_, body) = send(&app, Request::get("/models").body(Body::empty()).unwrap()).await;
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["models"], json!([mid]));
    let (_, body) = send(&app, Request::get("/volumes").body(Body::empty()).unwrap()).await;
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["volumes"], json!([vid]));
    let sid = session(&app, &vid, Some(&mid)).await;
    let (status, _) = send(&app, json_req("POST", &format!("/sessions/{sid}/autoplace"), json!({}))).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn uploads_are_content_addressed() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 1 << 20);
    let a = upload(&app, &phantom()).await;
    let b = upload(&app, &phantom()).await;
    assert_eq!(a, b);
    assert_eq!(a.len(), 32);
}

#[tokio::test]
async fn concurrent_puts_leave_one_consistent_list() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 1 << 20);
    let vid = upload(&app, &phantom()).await;
    let sid = session(&app, &vid, None).await;
    let uri = format!("/sessions/{sid}/filters");
    let mut tasks = Vec::new();
    for i in 0..16 {
        let app = app.clone();
        let uri = uri.clone();
        tasks.push(tokio::spawn(async move {
            let body = json!([filter(i as f64 / 16.0), filter(i as f64 / 16.0)]);
            send(&app, json_req("PUT", &uri, body)).await.0
        }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    let (_, body) = send(&app, Request::get(&uri).body(Body::empty()).unwrap()).await;
    let list: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(list[0], list[1]);
}
