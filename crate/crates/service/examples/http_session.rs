//! Walks through the HTTP API in-process: create a session from a PNG,
//! upload an edited mask, learn the edit as a job while following its
//! progress events, then preview and commit a library vector.
//!
//! ```text
//! cargo run --release -p editgan-service --example http_session
//! ```

use axum::body::Body;
use axum::http::Request;
use base64::Engine;
use editgan::scenes::{edit_enlarge_wheels, LabelSchema, SceneSample};
use editgan::Mask;
use editgan_service::{load_models, router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &axum::Router, req: Request<Body>) -> (u16, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.expect("router is infallible");
    let status = resp.status().as_u16();
    (status, resp.into_body().collect().await.expect("body").to_bytes().to_vec())
}

async fn json_call(app: &axum::Router, method: &str, uri: &str, body: Value) -> Value {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
    let (status, bytes) = call(app, req).await;
    let v: Value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    println!("{method} {uri} -> {status}");
    v
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let config = ServiceConfig { vectors_dir: dir.path().join("vectors"), sessions_dir: dir.path().join("sessions"), edit_steps: 60, progress_every: 10, ..ServiceConfig::default() };
    let models = load_models(&config.checkpoint)?;
    let app = router(AppState::with_models(config, models));
    let b64 = base64::engine::general_purpose::STANDARD;

    let scene = SceneSample::generate(32, 7000);
    let (status, body) = call(&app, Request::post("/sessions?steps=200").body(Body::from(scene.image.to_png()?))?).await;
    let created: Value = serde_json::from_slice(&body)?;
    let id = created["session_id"].as_str().unwrap_or_default().to_string();
    println!("POST /sessions -> {status}: session {id}, embedding loss {:.4}", created["loss"].as_f64().unwrap_or(f64::NAN));

    // edit the predicted mask client-side and upload it
    let predicted = Mask::from_png(&b64.decode(created["mask"].as_str().unwrap_or_default())?)?;
    let edited = edit_enlarge_wheels(&predicted, &scene.params, 2.0);
    let put = Request::put(format!("/sessions/{id}/mask")).body(Body::from(edited.to_png(&LabelSchema::vehicle().palette)?))?;
    println!("PUT mask -> {}", call(&app, put).await.0);

    let job = json_call(&app, "POST", &format!("/sessions/{id}/edit"), json!({ "labels": [4, 5], "name": "bigger-wheels", "save_vector": true })).await;
    let job_id = job["job_id"].as_str().unwrap_or_default().to_string();
    let (_, events) = call(&app, Request::get(format!("/jobs/{job_id}/events")).body(Body::empty())?).await;
    let text = String::from_utf8_lossy(&events);
    let lines: Vec<&str> = text.lines().collect();
    for pair in lines.windows(2).filter(|p| p[0] == "event: progress") {
        println!("  {}", pair[1]);
    }
    let status = json_call(&app, "GET", &format!("/jobs/{job_id}"), Value::Null).await;
    println!("job {}: best step {}, saved {}", status["status"], status["result"]["best_step"], status["result"]["vector_file"]);

    println!("{}", json_call(&app, "GET", "/vectors", Value::Null).await);
    let preview = json_call(&app, "POST", &format!("/sessions/{id}/apply"), json!({ "vector": "bigger-wheels", "scale": -1.0 })).await;
    let committed = json_call(&app, "POST", &format!("/sessions/{id}/commit"), json!({ "vector": "bigger-wheels", "scale": -1.0 })).await;
    assert_eq!(preview["latent_hash"], committed["latent_hash"]);
    let session = json_call(&app, "GET", &format!("/sessions/{id}"), Value::Null).await;
    println!("history: {}", session["history"]);
    Ok(())
}
