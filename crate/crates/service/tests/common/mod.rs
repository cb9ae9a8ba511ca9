#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use compositor::agents::{AgentBackend, Gate, ScenarioScript, ScriptedBackend};
use compositor::catalogue::{Actor, Catalogue, CatalogueOptions, DocumentId, NewMetadata, VisibilityLevel};
use compositor::events::LogicalClock;
use compositor::workflow::{Engine, EngineSettings};
use compositor_service::{AppState, BackendFactory, ScriptedBackends, StartRequest};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub const SOURCE_TEXT: &str = "Search transcript: titles, authors and snippets only. SECRET-SOURCE-CONTENT";

pub fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

pub fn engine(seed: u64) -> Arc<Engine> {
    let catalogue = Catalogue::in_memory(CatalogueOptions {
        clock: Arc::new(LogicalClock::default()),
        seed: Some(seed),
    });
    let settings = EngineSettings {
        seed: Some(seed),
        ..EngineSettings::default()
    };
    Arc::new(Engine::new(Arc::new(catalogue), settings).unwrap())
}

pub fn source(engine: &Engine) -> DocumentId {
    engine
        .catalogue()
        .create_document("transcript", SOURCE_TEXT, NewMetadata::default(), VisibilityLevel::Candidate, Actor::User)
        .unwrap()
}

/// Scripted backends held shut until the gate is released.
pub struct GatedBackends(pub Gate);

impl BackendFactory for GatedBackends {
    fn backend(&self, request: &StartRequest) -> Result<Box<dyn AgentBackend>, String> {
        let script = request.script.clone().ok_or("script required")?;
        Ok(Box::new(ScriptedBackend::new(script).with_gate(self.0.clone())))
    }
}

pub fn app(engine: Arc<Engine>) -> Router {
    compositor_service::router(AppState::new(engine, Arc::new(ScriptedBackends::default())))
}

pub fn gated_app(engine: Arc<Engine>, gate: Gate) -> Router {
    compositor_service::router(AppState::new(engine, Arc::new(GatedBackends(gate))))
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => builder
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

pub fn script_json(script: &ScenarioScript) -> Value {
    serde_json::to_value(script).unwrap()
}

pub fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap()
}
