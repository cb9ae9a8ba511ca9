//! Runs a scripted scenario start to finish on the calling thread.

use std::path::Path;
use std::sync::Arc;

use compositor::agents::{ScenarioParseError, ScenarioScript, ScriptedBackend};
use compositor::catalogue::{Actor, Catalogue, CatalogueError, CatalogueOptions, NewMetadata};
use compositor::events::LogicalClock;
use compositor::workflow::{Engine, EngineSettings, ProjectStatus, ProjectTrace, WorkflowConfig, WorkflowError};

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    Parse(#[from] ScenarioParseError),
    #[error(transparent)]
    Catalogue(#[from] CatalogueError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
}

#[derive(Debug, Clone)]
pub struct ReplayOutput {
    pub trace: ProjectTrace,
    /// Pretty trace JSON with a trailing newline.
    pub trace_json: String,
    /// The whole event log as JSON lines.
    pub events_jsonl: String,
}

impl ReplayOutput {
    pub fn status(&self) -> ProjectStatus {
        self.trace.status
    }
}

/// Fresh in-memory catalogue on a logical clock, seeded ids, the script's
/// sources ingested as user documents. Same script and seed give the same
/// bytes.
pub fn replay(script: &ScenarioScript, config: WorkflowConfig, seed: u64) -> Result<ReplayOutput, ReplayError> {
    let catalogue = Catalogue::in_memory(CatalogueOptions {
        clock: Arc::new(LogicalClock::default()),
        seed: Some(seed),
    });
    let settings = EngineSettings {
        seed: Some(seed),
        ..EngineSettings::default()
    };
    let engine = Engine::new(Arc::new(catalogue), settings)?;
    let mut sources = Vec::with_capacity(script.sources.len());
    for s in &script.sources {
        sources.push(
            engine
                .catalogue()
                .create_document(&s.title, &s.content, NewMetadata::default(), s.visibility, Actor::User)?,
        );
    }
    let remit = script
        .remit
        .clone()
        .unwrap_or_else(|| format!("Replay of scenario {}", script.name));
    let backend = ScriptedBackend::new(script.clone());
    let id = engine.create_project(&remit, &sources, config, Box::new(backend))?;
    engine.run_project(&id)?;
    let trace = engine.status(&id)?;
    let mut trace_json = serde_json::to_string_pretty(&trace).expect("trace serialises");
    trace_json.push('\n');
    Ok(ReplayOutput {
        trace,
        trace_json,
        events_jsonl: engine.catalogue().events().to_jsonl(),
    })
}

pub fn replay_file(path: impl AsRef<Path>, config: WorkflowConfig, seed: u64) -> Result<ReplayOutput, ReplayError> {
    replay(&ScenarioScript::from_file(path)?, config, seed)
}
