//! REST service, CLI client and scenario replay for the compositor engine.

pub mod api;
pub mod client;
pub mod config;
pub mod replay;

pub use api::{router, AppState, BackendFactory, HttpBackends, ScriptedBackends, StartRequest};
pub use config::{BackendConfig, ServiceConfig};
pub use replay::{replay, replay_file, ReplayError, ReplayOutput};
