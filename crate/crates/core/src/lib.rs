//! Compartmentalised multi-agent composition engine.
//!
//! A [`catalogue::Catalogue`] holds documents at six visibility levels. Agents
//! reach it only through a [`provisioning::ToolGateway`] that enforces the
//! per-role grant table. The [`workflow::Engine`] runs projects through
//! triage, composition, corroboration and criticism until the Critic's score
//! meets the threshold, and every step lands in the append-only event log
//! that [`metrics`] reads.

pub mod agents;
pub mod catalogue;
pub mod compression;
pub mod events;
pub mod metrics;
pub mod provisioning;
pub mod workflow;

pub use agents::{AgentAction, AgentBackend, ScenarioScript, ScriptedBackend, Verdict};
pub use catalogue::{Catalogue, CatalogueOptions, DocumentId, VisibilityLevel};
pub use events::{EventKind, EventLog, EventRecord};
pub use provisioning::{AgentRole, GrantTable, Tool, ToolGateway};
pub use workflow::{Engine, EngineSettings, ProjectId, ProjectStatus, ProjectTrace, WorkflowConfig};
