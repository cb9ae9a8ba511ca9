//! Directed workflow: intake, triage, optional curation, then the
//! compose → corroborate → criticise loop until the Critic's score meets the
//! threshold, the iteration cap is hit, the budget runs out or the user
//! aborts.
//!
//! Each project's [`GraphState`] is owned by exactly one [`Executor`]; other
//! threads only see the published [`ProjectTrace`] snapshot.

mod engine;
mod executor;
mod words;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::json;

use crate::agents::{AgentAction, AgentBackend, AgentError, AnsweredClarification, Message, Observation, Verdict};
use crate::catalogue::{CatalogueError, DocumentId};
use crate::compression::{BudgetWarning, CompressionError, TokenLedger};
use crate::events::{EventKind, EventLog};
use crate::provisioning::{AgentRole, ToolError};

pub use engine::{Engine, EngineSettings};
pub use executor::Executor;
pub use words::word_list;

/// Four lowercase dictionary words joined by hyphens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct ProjectId(String);

impl ProjectId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for ProjectId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('-').collect();
        if parts.len() == 4 && parts.iter().all(|p| !p.is_empty() && p.bytes().all(|b| b.is_ascii_lowercase())) {
            Ok(ProjectId(s.to_string()))
        } else {
            Err(format!("'{s}' is not a word-word-word-word project id"))
        }
    }
}

impl<'de> Deserialize<'de> for ProjectId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for ProjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Curate,
    Compose,
    VerifyOnly,
}

/// How a Critic score is compared against `tau`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    /// `score >= tau`
    #[default]
    AtLeast,
    /// `score > tau`
    Above,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkflowConfig {
    pub tau: u8,
    pub max_iterations: u32,
    pub token_budget: u64,
    pub context_limit: u64,
    pub comparator: Comparator,
    /// Consult the Concierge for clarification before triage.
    pub concierge_intake: bool,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self {
            tau: 85,
            max_iterations: 10,
            token_budget: 5_000_000,
            context_limit: 200_000,
            comparator: Comparator::AtLeast,
            concierge_intake: false,
        }
    }
}

impl WorkflowConfig {
    pub fn with_tau(mut self, tau: u8) -> Self {
        self.tau = tau;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.tau > 100 {
            return Err(format!("tau {} outside 0..=100", self.tau));
        }
        if self.max_iterations == 0 {
            return Err("max_iterations must be positive".into());
        }
        if self.token_budget == 0 || self.context_limit == 0 {
            return Err("token_budget and context_limit must be positive".into());
        }
        Ok(())
    }

    pub fn accepts(&self, score: u8) -> bool {
        match self.comparator {
            Comparator::AtLeast => score >= self.tau,
            Comparator::Above => score > self.tau,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectStatus {
    Active,
    Completed,
    Failed,
    Aborted,
}

impl ProjectStatus {
    pub fn is_terminal(self) -> bool {
        self != ProjectStatus::Active
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProjectStatus::Active => "active",
            ProjectStatus::Completed => "completed",
            ProjectStatus::Failed => "failed",
            ProjectStatus::Aborted => "aborted",
        }
    }
}

impl fmt::Display for ProjectStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationOutcome {
    Converged,
    Revise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub iteration: u32,
    pub source: AgentRole,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub iteration: u32,
    pub score: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictEntry {
    pub iteration: u32,
    pub verdict: Verdict,
}

/// Per-project workflow state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphState {
    pub project_id: ProjectId,
    pub remit: String,
    pub sources: Vec<DocumentId>,
    /// Number of drafts accepted so far; the first draft is iteration 1.
    pub iteration: u32,
    pub histories: BTreeMap<AgentRole, Vec<Message>>,
    pub feedback_log: Vec<FeedbackEntry>,
    pub score_trace: Vec<ScoreEntry>,
    pub verdict_trace: Vec<VerdictEntry>,
    pub config: WorkflowConfig,
    pub ledger: TokenLedger,
    pub clarifications: Vec<AnsweredClarification>,
    pub budget_warning: Option<BudgetWarning>,
    pub drafts: Vec<DocumentId>,
    pub route: Option<Route>,
}

impl GraphState {
    pub fn new(project_id: ProjectId, remit: String, sources: Vec<DocumentId>, config: WorkflowConfig) -> Self {
        Self {
            project_id,
            remit,
            sources,
            iteration: 0,
            histories: BTreeMap::new(),
            feedback_log: Vec::new(),
            score_trace: Vec::new(),
            verdict_trace: Vec::new(),
            config,
            ledger: TokenLedger::default(),
            clarifications: Vec::new(),
            budget_warning: None,
            drafts: Vec::new(),
            route: None,
        }
    }

    pub fn history(&self, role: AgentRole) -> &[Message] {
        self.histories.get(&role).map_or(&[], Vec::as_slice)
    }
}

/// Published view of a project: the status endpoint body and the trace
/// export `{project_id, status, config, verdict_trace, score_trace,
/// feedback_log, ledger}` plus bookkeeping fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectTrace {
    pub project_id: ProjectId,
    pub status: ProjectStatus,
    pub config: WorkflowConfig,
    pub verdict_trace: Vec<VerdictEntry>,
    pub score_trace: Vec<ScoreEntry>,
    pub feedback_log: Vec<FeedbackEntry>,
    pub ledger: TokenLedger,
    pub iteration: u32,
    #[serde(default)]
    pub paused: bool,
    #[serde(default)]
    pub cause: Option<String>,
    #[serde(default)]
    pub latest_draft: Option<DocumentId>,
}

impl ProjectTrace {
    pub fn from_state(state: &GraphState, status: ProjectStatus) -> Self {
        Self {
            project_id: state.project_id.clone(),
            status,
            config: state.config,
            verdict_trace: state.verdict_trace.clone(),
            score_trace: state.score_trace.clone(),
            feedback_log: state.feedback_log.clone(),
            ledger: state.ledger,
            iteration: state.iteration,
            paused: false,
            cause: None,
            latest_draft: state.drafts.last().cloned(),
        }
    }

    /// `(verdict, score)` per iteration; score is `None` when the Critic was
    /// not consulted.
    pub fn rows(&self) -> Vec<(u32, Verdict, Option<u8>)> {
        self.verdict_trace
            .iter()
            .map(|v| {
                let score = self
                    .score_trace
                    .iter()
                    .find(|s| s.iteration == v.iteration)
                    .map(|s| s.score);
                (v.iteration, v.verdict, score)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketState {
    Open,
    Answered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClarificationTicket {
    pub id: String,
    pub project_id: ProjectId,
    pub question: String,
    pub answer: Option<String>,
    pub state: TicketState,
}

#[derive(Debug, thiserror::Error)]
pub enum WorkflowError {
    #[error("remit is empty")]
    EmptyRemit,
    #[error("unknown or ineligible source document {0}")]
    UnknownDocument(String),
    #[error("unknown project {0}")]
    UnknownProject(String),
    #[error("unknown clarification ticket {0}")]
    UnknownTicket(String),
    #[error("project {project} is already {status}")]
    AlreadyTerminal { project: ProjectId, status: ProjectStatus },
    #[error("ticket {0} is already answered")]
    TicketAlreadyAnswered(String),
    #[error("invalid workflow config: {0}")]
    InvalidConfig(String),
    #[error("project {0} is already running")]
    AlreadyRunning(ProjectId),
    #[error("downstream clarification requested by {0}")]
    DownstreamClarification(AgentRole),
    #[error("protocol violation by {role}: {detail}")]
    ProtocolViolation { role: AgentRole, detail: String },
    #[error("verify-only route without an existing draft")]
    MissingDraft,
    #[error("iteration cap of {0} reached")]
    MaxIterations(u32),
    #[error("token budget exhausted ({spent} of {budget})")]
    BudgetExhausted { spent: u64, budget: u64 },
    #[error("aborted: {0}")]
    Aborted(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Catalogue(#[from] CatalogueError),
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error("event log: {0}")]
    Log(#[from] std::io::Error),
}

/// Failure while consulting an agent.
#[derive(Debug, thiserror::Error)]
pub enum ConsultError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("event log: {0}")]
    Log(#[from] std::io::Error),
}

impl From<ConsultError> for WorkflowError {
    fn from(e: ConsultError) -> Self {
        match e {
            ConsultError::Agent(a) => WorkflowError::Agent(a),
            ConsultError::Log(io) => WorkflowError::Log(io),
        }
    }
}

/// Asks `backend` for `role`'s next action, recording the observation, the
/// token usage and the action in the event log and charging the ledger.
pub fn consult_recorded(
    backend: &mut dyn AgentBackend,
    events: &Arc<EventLog>,
    ledger: &mut TokenLedger,
    role: AgentRole,
    observation: &Observation,
) -> Result<AgentAction, ConsultError> {
    let project = observation.project_id.as_str();
    events.append(
        EventKind::Observation,
        role.as_str(),
        None,
        json!({ "project": project, "role": role, "iteration": observation.iteration, "observation": observation }),
    )?;
    let reply = backend.next_action(role, observation)?;
    ledger.record(reply.usage, &backend.pricing());
    events.append(
        EventKind::TokenUsage,
        role.as_str(),
        None,
        json!({ "project": project, "role": role, "usage": reply.usage, "ledger": ledger }),
    )?;
    events.append(
        EventKind::AgentAction,
        role.as_str(),
        None,
        json!({ "project": project, "role": role, "iteration": observation.iteration, "action": reply.action }),
    )?;
    Ok(reply.action)
}
