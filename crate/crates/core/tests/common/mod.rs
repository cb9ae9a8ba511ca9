#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use compositor::agents::{ObservationLog, ScenarioScript, ScriptedBackend};
use compositor::catalogue::{Actor, Catalogue, CatalogueOptions, DocumentId, NewMetadata, VisibilityLevel};
use compositor::events::LogicalClock;
use compositor::workflow::{Engine, EngineSettings};

pub const SOURCE_TEXT: &str = "Search transcript: titles, authors and snippets only. SECRET-SOURCE-CONTENT";

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

pub fn source(engine: &Engine, title: &str) -> DocumentId {
    engine
        .catalogue()
        .create_document(
            title,
            SOURCE_TEXT,
            NewMetadata {
                source_type: "upload".into(),
                ..NewMetadata::default()
            },
            VisibilityLevel::Candidate,
            Actor::User,
        )
        .unwrap()
}

pub fn scripted(script: ScenarioScript) -> (Box<ScriptedBackend>, ObservationLog) {
    let backend = ScriptedBackend::new(script);
    let seen = backend.observations();
    (Box::new(backend), seen)
}

pub const WAIT: Duration = Duration::from_secs(10);
