use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use editgan::checkpoint::Checkpoint;
use editgan::editing::EditingVector;
use editgan::embedding::Encoder;
use editgan::library::{save_vector, VectorRecord};
use editgan::segmentation::SegmentationHead;
use editgan::tensor::Tensor;
use editgan::{Generator, GeneratorConfig, Mask};
use editgan_service::{palette_for, router, AppState, Models, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const B64: base64::engine::GeneralPurpose = base64::engine::general_purpose::STANDARD;

struct Fixture {
    app: axum::Router,
    dir: tempfile::TempDir,
    gen: Generator,
    config: ServiceConfig,
}

fn tiny_checkpoint() -> Checkpoint {
    let mut gen = Generator::new(GeneratorConfig::tiny16()).unwrap();
    let f = gen.config().feature_channels();
    let c = gen.config().num_labels;
    gen.set_head(SegmentationHead::new(f, [16, 8], c, 7)).unwrap();
    let enc = Encoder::new(&gen, 1).unwrap();
    Checkpoint { generator: gen, encoder: Some(enc) }
}

fn probe_vector(gen: &Generator, name: &str, value: f64) -> EditingVector {
    let shape = [gen.num_style_layers(), gen.config().latent_dim];
    EditingVector::new(name, Tensor::full(&shape, value), [1].into(), "test").unwrap()
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint();
    let config = ServiceConfig {
        vectors_dir: dir.path().join("vectors"),
        sessions_dir: dir.path().join("sessions"),
        embed_steps: 3,
        edit_steps: 4,
        progress_every: 1,
        ..ServiceConfig::default()
    };
    std::fs::create_dir_all(&config.vectors_dir).unwrap();
    let hash = ck.generator_hash();
    save_vector(&config.vectors_dir, &VectorRecord::new(probe_vector(&ck.generator, "probe", 0.1), hash)).unwrap();
    save_vector(&config.vectors_dir, &VectorRecord::new(probe_vector(&ck.generator, "stranger", 0.1), "0".repeat(64))).unwrap();
    let gen = ck.generator.clone();
    let app = router(AppState::with_models(config.clone(), Models::from_checkpoint(ck).unwrap()));
    Fixture { app, dir, gen, config }
}

async fn send(app: &axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get(app: &axum::Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post_json(app: &axum::Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
    let (s, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn get_json(app: &axum::Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = get(app, uri).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn scene_png(gen: &Generator, seed: u64) -> Vec<u8> {
    gen.render(&gen.map_to_w_plus(&gen.sample_latent(seed)).unwrap()).unwrap().to_png().unwrap()
}

async fn create(f: &Fixture, key: Option<&str>) -> Value {
    let mut req = Request::post("/sessions").header("content-type", "image/png");
    if let Some(k) = key {
        req = req.header("idempotency-key", k);
    }
    let (s, b) = send(&f.app, req.body(Body::from(scene_png(&f.gen, 5))).unwrap()).await;
    assert_eq!(s, StatusCode::CREATED, "{}", String::from_utf8_lossy(&b));
    serde_json::from_slice(&b).unwrap()
}

async fn wait_for_job(app: &axum::Router, job: &str) -> Value {
    for _ in 0..1000 {
        let (_, v) = get_json(app, &format!("/jobs/{job}")).await;
        if v["status"] != "running" {
            return v;
        }
        tokio::time::sleep(std::time::Duration::from_millis(10)).await;
    }
    panic!("job {job} did not finish");
}

/// A mask one label-1 block bigger than the session's predicted mask.
fn grown_mask(f: &Fixture, predicted_png: &[u8]) -> Vec<u8> {
    let mut m = Mask::from_png(predicted_png).unwrap();
    for px in 0..48 {
        m.labels_mut()[px] = 1;
    }
    m.to_png(&palette_for(f.gen.config().num_labels)).unwrap()
}

#[tokio::test]
async fn health_reports_loading_then_ready() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig { sessions_dir: dir.path().join("s"), vectors_dir: dir.path().join("v"), ..ServiceConfig::default() };
    let state = AppState::loading(config);
    let app = router(state.clone());
    assert_eq!(get(&app, "/healthz").await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(get(&app, "/vectors").await.0, StatusCode::SERVICE_UNAVAILABLE);
    state.set_models(Models::from_checkpoint(tiny_checkpoint()).unwrap());
    let (s, v) = get_json(&app, "/healthz").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    state.set_load_failure("boom".into());
    let (s, v) = get_json(&app, "/healthz").await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["error"], "boom");
}

#[tokio::test]
async fn catalog_flags_vectors_from_other_generators() {
    let f = fixture();
    let (s, v) = get_json(&f.app, "/vectors").await;
    assert_eq!(s, StatusCode::OK);
    let entries = v["entries"].as_array().unwrap();
    let flag = |name: &str| entries.iter().find(|e| e["name"] == name).unwrap()["compatible"].clone();
    assert_eq!(flag("probe"), json!(true));
    assert_eq!(flag("stranger"), json!(false));
}

#[tokio::test]
async fn bad_inputs_map_to_client_errors() {
    let f = fixture();
    let req = Request::post("/sessions").body(Body::from(b"not a png".to_vec())).unwrap();
    assert_eq!(send(&f.app, req).await.0, StatusCode::BAD_REQUEST);

    let big = Generator::new(GeneratorConfig::toy32()).unwrap();
    let req = Request::post("/sessions").body(Body::from(scene_png(&big, 1))).unwrap();
    assert_eq!(send(&f.app, req).await.0, StatusCode::CONFLICT);

    assert_eq!(get(&f.app, "/sessions/0123abcd").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&f.app, "/sessions/..%2Fetc").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&f.app, "/jobs/nope").await.0, StatusCode::NOT_FOUND);

    let id = create(&f, None).await["session_id"].as_str().unwrap().to_string();
    let (_, predicted) = get(&f.app, &format!("/sessions/{id}/mask")).await;
    let mask = B64.encode(&predicted);
    // no label requested
    let (s, _) = post_json(&f.app, &format!("/sessions/{id}/edit"), json!({ "mask": mask, "labels": [] })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    // unchanged mask and a label nowhere in it leaves nothing to edit
    let absent = (0..f.gen.config().num_labels as u8).find(|l| !Mask::from_png(&predicted).unwrap().labels().contains(l));
    if let Some(l) = absent {
        let (s, _) = post_json(&f.app, &format!("/sessions/{id}/edit"), json!({ "mask": mask, "labels": [l] })).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    }
    let (s, _) = post_json(&f.app, &format!("/sessions/{id}/edit"), json!({ "mask": mask, "labels": [200] })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    // no mask anywhere
    let (s, _) = post_json(&f.app, &format!("/sessions/{id}/edit"), json!({ "labels": [1] })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let put = Request::put(format!("/sessions/{id}/mask")).body(Body::from(b"junk".to_vec())).unwrap();
    assert_eq!(send(&f.app, put).await.0, StatusCode::BAD_REQUEST);

    let (s, _) = post_json(&f.app, &format!("/sessions/{id}/apply"), json!({ "vector": "missing" })).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = post_json(&f.app, &format!("/sessions/{id}/apply"), json!({ "vector": "stranger" })).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = post_json(&f.app, &format!("/sessions/{id}/apply"), json!({})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn idempotency_key_replays_the_first_reply() {
    let f = fixture();
    let a = create(&f, Some("k1")).await;
    let b = create(&f, Some("k1")).await;
    let c = create(&f, None).await;
    assert_eq!(a, b);
    assert_ne!(a["session_id"], c["session_id"]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn edit_job_streams_progress_and_updates_the_session() {
    let f = fixture();
    let id = create(&f, None).await["session_id"].as_str().unwrap().to_string();
    let (_, predicted) = get(&f.app, &format!("/sessions/{id}/mask")).await;
    let edited = grown_mask(&f, &predicted);
    let put = Request::put(format!("/sessions/{id}/mask")).body(Body::from(edited.clone())).unwrap();
    assert_eq!(send(&f.app, put).await.0, StatusCode::NO_CONTENT);
    let (_, before) = get_json(&f.app, &format!("/sessions/{id}")).await;
    assert_eq!(before["has_user_mask"], true);

    let (s, job) = post_json(&f.app, &format!("/sessions/{id}/edit"), json!({ "labels": [1], "name": "grow", "save_vector": true })).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job = job["job_id"].as_str().unwrap().to_string();
    let (s, events) = get(&f.app, &format!("/jobs/{job}/events")).await;
    assert_eq!(s, StatusCode::OK);
    let text = String::from_utf8(events).unwrap();
    // the starting point and every step
    assert_eq!(text.matches("event: progress").count(), f.config.edit_steps + 1);
    assert!(text.contains("loss_total") && text.contains("loss_ce"));
    assert!(text.trim_end().rsplit("event: ").next().unwrap().starts_with("end"));

    let status = wait_for_job(&f.app, &job).await;
    assert_eq!(status["status"], "completed", "{status}");
    assert_eq!(B64.decode(status["result"]["target_mask"].as_str().unwrap()).unwrap(), edited);
    let (_, after) = get_json(&f.app, &format!("/sessions/{id}")).await;
    assert_ne!(after["latent_hash"], before["latent_hash"]);
    assert_eq!(after["history"].as_array().unwrap().len(), 2);
    assert_eq!(after["has_user_mask"], false);
    assert!(f.config.vectors_dir.join(editgan::library::vector_file_name("grow")).exists());
    let (_, v) = get_json(&f.app, "/vectors").await;
    assert!(v["entries"].as_array().unwrap().iter().any(|e| e["name"] == "grow"));
}

#[tokio::test]
async fn apply_is_pure_and_commit_records_history() {
    let f = fixture();
    let id = create(&f, None).await["session_id"].as_str().unwrap().to_string();
    let (_, before) = get_json(&f.app, &format!("/sessions/{id}")).await;
    let (s, a) = post_json(&f.app, &format!("/sessions/{id}/apply"), json!({ "vector": "probe", "scale": 1.5 })).await;
    assert_eq!(s, StatusCode::OK);
    // composition: scales of the same vector add
    let (_, b) = post_json(&f.app, &format!("/sessions/{id}/apply"), json!({ "edits": [{ "vector": "probe", "scale": 1.0 }, { "vector": "probe", "scale": 0.5 }] })).await;
    assert_eq!(a["latent_hash"], b["latent_hash"]);
    let (s, r) = post_json(&f.app, &format!("/sessions/{id}/apply"), json!({ "vector": "probe", "refine_steps": 2 })).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["trace"].as_array().unwrap().len(), 3);
    assert_eq!(get_json(&f.app, &format!("/sessions/{id}")).await.1, before);

    let (s, c) = post_json(&f.app, &format!("/sessions/{id}/commit"), json!({ "vector": "probe", "scale": 1.5 })).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(c["latent_hash"], a["latent_hash"]);
    let (_, after) = get_json(&f.app, &format!("/sessions/{id}")).await;
    assert_eq!(after["latent_hash"], a["latent_hash"]);
    assert_eq!(after["applied"], json!([{ "name": "probe", "scale": 1.5 }]));
    assert_eq!(after["history"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let f = fixture();
    let id = create(&f, None).await["session_id"].as_str().unwrap().to_string();
    post_json(&f.app, &format!("/sessions/{id}/commit"), json!({ "vector": "probe", "scale": 1.0 })).await;
    let (_, before) = get_json(&f.app, &format!("/sessions/{id}")).await;
    let dir = f.config.sessions_dir.join(&id);
    for file in ["source.png", "latent.egl", "predicted_mask.png", "session.json"] {
        assert!(dir.join(file).exists(), "{file}");
    }
    let app = router(AppState::with_models(f.config.clone(), Models::from_checkpoint(tiny_checkpoint()).unwrap()));
    let (s, after) = get_json(&app, &format!("/sessions/{id}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(after, before);
    drop(f.dir);
}

#[test]
fn config_file_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("service.toml");
    std::fs::write(&path, "port = 9001\nembed_steps = 7\nvectors_dir = \"/tmp/v\"\n").unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let from_file: ServiceConfig = toml::from_str(&text).unwrap();
    assert_eq!(from_file.port, 9001);
    assert_eq!(from_file.embed_steps, 7);
    assert_eq!(from_file.edit_steps, ServiceConfig::default().edit_steps);
    let vars = [("EDITGAN_PORT", "9002"), ("EDITGAN_EDIT_STEPS", "11"), ("UNRELATED", "x")].map(|(k, v)| (k.to_string(), v.to_string()));
    let c = from_file.with_overrides(vars).unwrap();
    assert_eq!((c.port, c.edit_steps, c.embed_steps), (9002, 11, 7));
    assert_eq!(c.vectors_dir, Path::new("/tmp/v"));

    let bad = ServiceConfig::default().with_overrides([("EDITGAN_PORT".to_string(), "eighty".to_string())]);
    assert!(bad.is_err());
    std::fs::write(&path, "prot = 1\n").unwrap();
    assert!(ServiceConfig::load(Some(&path)).is_err());
    assert!(ServiceConfig::load(Some(&dir.path().join("missing.toml"))).is_err());
}
