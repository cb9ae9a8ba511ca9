//! Capability layer.
//!
//! Each [`AgentRole`] is provisioned with an exact set of tools. The
//! [`ToolGateway`] is the only path from an agent to the catalogue, and it
//! refuses any tool outside the caller's grant before touching catalogue
//! state. A role that lacks `candidate_document_list` has no way to see
//! CANDIDATE documents: listing needs the tool, and `read_document` checks the
//! listing tool for the target's visibility level.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::catalogue::{
    Actor, Catalogue, CatalogueError, Document, DocumentId, DocumentSummary, MetadataFilter,
    MetadataUpdate, VisibilityLevel,
};
use crate::events::EventKind;
use crate::workflow::ProjectId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Concierge,
    Commutator,
    Curator,
    Composer,
    Corroborator,
    Critic,
    Compressor,
}

impl AgentRole {
    pub const ALL: [AgentRole; 7] = [
        AgentRole::Concierge,
        AgentRole::Commutator,
        AgentRole::Curator,
        AgentRole::Composer,
        AgentRole::Corroborator,
        AgentRole::Critic,
        AgentRole::Compressor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Concierge => "concierge",
            AgentRole::Commutator => "commutator",
            AgentRole::Curator => "curator",
            AgentRole::Composer => "composer",
            AgentRole::Corroborator => "corroborator",
            AgentRole::Critic => "critic",
            AgentRole::Compressor => "compressor",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentRole::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown agent role '{s}'"))
    }
}

/// Global tool registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tool {
    PublicDocumentList,
    CandidateDocumentList,
    DraftDocumentList,
    FeedbackDocumentList,
    CriticDocumentList,
    ArchiveDocumentList,
    ReadDocument,
    QueryMetadata,
    RequestClarification,
    RouteProject,
    UpdateMetadata,
    SubmitDraft,
    SubmitVerdict,
    SubmitScore,
    ReadHistory,
    WriteHistory,
}

impl Tool {
    pub const ALL: [Tool; 16] = [
        Tool::PublicDocumentList,
        Tool::CandidateDocumentList,
        Tool::DraftDocumentList,
        Tool::FeedbackDocumentList,
        Tool::CriticDocumentList,
        Tool::ArchiveDocumentList,
        Tool::ReadDocument,
        Tool::QueryMetadata,
        Tool::RequestClarification,
        Tool::RouteProject,
        Tool::UpdateMetadata,
        Tool::SubmitDraft,
        Tool::SubmitVerdict,
        Tool::SubmitScore,
        Tool::ReadHistory,
        Tool::WriteHistory,
    ];

    pub const LISTINGS: [Tool; 6] = [
        Tool::PublicDocumentList,
        Tool::CandidateDocumentList,
        Tool::DraftDocumentList,
        Tool::FeedbackDocumentList,
        Tool::CriticDocumentList,
        Tool::ArchiveDocumentList,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tool::PublicDocumentList => "public_document_list",
            Tool::CandidateDocumentList => "candidate_document_list",
            Tool::DraftDocumentList => "draft_document_list",
            Tool::FeedbackDocumentList => "feedback_document_list",
            Tool::CriticDocumentList => "critic_document_list",
            Tool::ArchiveDocumentList => "archive_document_list",
            Tool::ReadDocument => "read_document",
            Tool::QueryMetadata => "query_metadata",
            Tool::RequestClarification => "request_clarification",
            Tool::RouteProject => "route_project",
            Tool::UpdateMetadata => "update_metadata",
            Tool::SubmitDraft => "submit_draft",
            Tool::SubmitVerdict => "submit_verdict",
            Tool::SubmitScore => "submit_score",
            Tool::ReadHistory => "read_history",
            Tool::WriteHistory => "write_history",
        }
    }

    pub fn from_name(name: &str) -> Option<Tool> {
        Tool::ALL.into_iter().find(|t| t.name() == name)
    }

    /// The listing tool that exposes documents at `level`.
    pub fn listing_for(level: VisibilityLevel) -> Tool {
        match level {
            VisibilityLevel::Public => Tool::PublicDocumentList,
            VisibilityLevel::Candidate => Tool::CandidateDocumentList,
            VisibilityLevel::Draft => Tool::DraftDocumentList,
            VisibilityLevel::Feedback => Tool::FeedbackDocumentList,
            VisibilityLevel::Critic => Tool::CriticDocumentList,
            VisibilityLevel::Archive => Tool::ArchiveDocumentList,
        }
    }

    pub fn listed_level(self) -> Option<VisibilityLevel> {
        VisibilityLevel::ALL
            .into_iter()
            .find(|&v| Tool::listing_for(v) == self)
    }

    pub fn description(self) -> &'static str {
        match self {
            Tool::PublicDocumentList => "List PUBLIC documents.",
            Tool::CandidateDocumentList => "List CANDIDATE source documents.",
            Tool::DraftDocumentList => "List DRAFT documents, optionally scoped to a project.",
            Tool::FeedbackDocumentList => "List FEEDBACK documents, optionally scoped to a project.",
            Tool::CriticDocumentList => "List CRITIC specification documents.",
            Tool::ArchiveDocumentList => "List ARCHIVE documents.",
            Tool::ReadDocument => "Read one document whose visibility level you may list.",
            Tool::QueryMetadata => "Query document metadata without loading content.",
            Tool::RequestClarification => "Ask the user a clarifying question.",
            Tool::RouteProject => "Choose the route for a project: curate, compose or verify_only.",
            Tool::UpdateMetadata => "Enrich a document's metadata.",
            Tool::SubmitDraft => "Submit a draft with a title and content.",
            Tool::SubmitVerdict => "Submit SUBSTANTIATED or FABRICATED with a rationale.",
            Tool::SubmitScore => "Submit an integer score 0-100 with feedback.",
            Tool::ReadHistory => "Read the message history to be compressed.",
            Tool::WriteHistory => "Replace a message history with a summary.",
        }
    }

    /// JSON schema of the tool's arguments.
    pub fn parameters(self) -> Value {
        let scoped = json!({
            "type": "object",
            "properties": { "project": { "type": "string" } }
        });
        match self {
            t if t.listed_level().is_some() => scoped,
            Tool::ReadDocument => json!({
                "type": "object",
                "properties": { "id": { "type": "string" } },
                "required": ["id"]
            }),
            Tool::QueryMetadata => json!({
                "type": "object",
                "properties": {
                    "source_type": { "type": "string" },
                    "classification": { "type": "string" },
                    "authorship": { "type": "string" },
                    "group": { "type": "string" },
                    "project_id": { "type": "string" },
                    "iteration": { "type": "integer" },
                    "keywords": { "type": "array", "items": { "type": "string" } }
                }
            }),
            Tool::RequestClarification => json!({
                "type": "object",
                "properties": { "question": { "type": "string" } },
                "required": ["question"]
            }),
            Tool::RouteProject => json!({
                "type": "object",
                "properties": {
                    "route": { "type": "string", "enum": ["curate", "compose", "verify_only"] },
                    "draft": { "type": "string" }
                },
                "required": ["route"]
            }),
            Tool::UpdateMetadata => json!({
                "type": "object",
                "properties": {
                    "doc_id": { "type": "string" },
                    "updates": { "type": "object" }
                },
                "required": ["doc_id", "updates"]
            }),
            Tool::SubmitDraft => json!({
                "type": "object",
                "properties": {
                    "title": { "type": "string" },
                    "content": { "type": "string" }
                },
                "required": ["title", "content"]
            }),
            Tool::SubmitVerdict => json!({
                "type": "object",
                "properties": {
                    "verdict": { "type": "string", "enum": ["SUBSTANTIATED", "FABRICATED"] },
                    "rationale": { "type": "string" }
                },
                "required": ["verdict", "rationale"]
            }),
            Tool::SubmitScore => json!({
                "type": "object",
                "properties": {
                    "score": { "type": "integer", "minimum": 0, "maximum": 100 },
                    "feedback": { "type": "string" }
                },
                "required": ["score", "feedback"]
            }),
            Tool::ReadHistory => json!({ "type": "object", "properties": {} }),
            Tool::WriteHistory => json!({
                "type": "object",
                "properties": { "summary": { "type": "string" } },
                "required": ["summary"]
            }),
            _ => scoped,
        }
    }
}

impl fmt::Display for Tool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Tool {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Tool {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Tool::from_name(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown tool '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

impl From<Tool> for ToolSchema {
    fn from(t: Tool) -> Self {
        ToolSchema {
            name: t.name().to_string(),
            description: t.description().to_string(),
            parameters: t.parameters(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CapabilitySet {
    pub role: AgentRole,
    pub tools: BTreeSet<Tool>,
}

impl CapabilitySet {
    pub fn allows(&self, tool: Tool) -> bool {
        self.tools.contains(&tool)
    }

    pub fn names(&self) -> Vec<String> {
        self.tools.iter().map(|t| t.name().to_string()).collect()
    }

    pub fn schemas(&self) -> Vec<ToolSchema> {
        self.tools.iter().copied().map(ToolSchema::from).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GrantTableError {
    #[error("grant table is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("grant table has no entry for {0}")]
    MissingRole(AgentRole),
    #[error("grant table violates an access invariant: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Role → tool grants. Static after load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrantTable {
    grants: BTreeMap<AgentRole, BTreeSet<Tool>>,
}

impl Default for GrantTable {
    fn default() -> Self {
        use Tool::*;
        let listings = Tool::LISTINGS.to_vec();
        let with = |base: &[Tool], extra: &[Tool]| -> BTreeSet<Tool> {
            base.iter().chain(extra).copied().collect()
        };
        let mut grants = BTreeMap::new();
        grants.insert(
            AgentRole::Concierge,
            with(&listings, &[ReadDocument, QueryMetadata, RequestClarification]),
        );
        grants.insert(
            AgentRole::Commutator,
            with(&listings, &[ReadDocument, QueryMetadata, RouteProject]),
        );
        grants.insert(
            AgentRole::Curator,
            with(&listings, &[ReadDocument, QueryMetadata, UpdateMetadata]),
        );
        grants.insert(
            AgentRole::Composer,
            with(
                &[PublicDocumentList, CandidateDocumentList, DraftDocumentList, FeedbackDocumentList],
                &[ReadDocument, SubmitDraft],
            ),
        );
        grants.insert(
            AgentRole::Corroborator,
            with(
                &[PublicDocumentList, CandidateDocumentList, DraftDocumentList],
                &[ReadDocument, SubmitVerdict],
            ),
        );
        grants.insert(
            AgentRole::Critic,
            with(
                &[PublicDocumentList, DraftDocumentList, FeedbackDocumentList, CriticDocumentList],
                &[ReadDocument, SubmitScore],
            ),
        );
        grants.insert(AgentRole::Compressor, with(&[ReadHistory, WriteHistory], &[]));
        let table = GrantTable { grants };
        table.validate().expect("default grant table is valid");
        table
    }
}

impl GrantTable {
    pub fn from_json(text: &str) -> Result<Self, GrantTableError> {
        let raw: BTreeMap<AgentRole, Vec<Tool>> = serde_json::from_str(text)?;
        let mut grants = BTreeMap::new();
        for role in AgentRole::ALL {
            let tools = raw.get(&role).ok_or(GrantTableError::MissingRole(role))?;
            grants.insert(role, tools.iter().copied().collect());
        }
        let table = GrantTable { grants };
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GrantTableError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), GrantTableError> {
        let tools = |r| &self.grants[&r];
        if tools(AgentRole::Critic).contains(&Tool::CandidateDocumentList) {
            return Err(GrantTableError::Invariant(
                "critic must not hold candidate_document_list".into(),
            ));
        }
        let corroborator = tools(AgentRole::Corroborator);
        if !corroborator.contains(&Tool::CandidateDocumentList)
            || !corroborator.contains(&Tool::DraftDocumentList)
        {
            return Err(GrantTableError::Invariant(
                "corroborator needs candidate_document_list and draft_document_list".into(),
            ));
        }
        if tools(AgentRole::Compressor)
            .iter()
            .any(|t| !matches!(t, Tool::ReadHistory | Tool::WriteHistory))
        {
            return Err(GrantTableError::Invariant(
                "compressor may only hold history tools".into(),
            ));
        }
        Ok(())
    }

    pub fn grants_for(&self, role: AgentRole) -> CapabilitySet {
        CapabilitySet {
            role,
            tools: self.grants[&role].clone(),
        }
    }

    pub fn allows(&self, role: AgentRole, tool: Tool) -> bool {
        self.grants[&role].contains(&tool)
    }

    /// Canonical JSON form: roles in declaration order, tools sorted.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, Vec<&str>> = self
            .grants
            .iter()
            .map(|(r, t)| (r.as_str(), t.iter().map(|t| t.name()).collect()))
            .collect();
        serde_json::to_string(&map).expect("grant table serialises")
    }

    /// SHA-256 of [`GrantTable::to_json`], hex encoded.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Structured refusal returned to an agent that invoked an ungranted tool.
/// Wire shape: `{denied: true, role, tool}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refusal {
    pub denied: bool,
    pub role: AgentRole,
    pub tool: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error("unknown tool '{0}'")]
    UnknownTool(String),
    #[error("{} is not provisioned with {}", .0.role, .0.tool)]
    CapabilityDenied(Refusal),
    #[error("invalid arguments for {tool}: {reason}")]
    InvalidArguments { tool: Tool, reason: String },
    #[error(transparent)]
    Catalogue(#[from] CatalogueError),
}

impl From<std::io::Error> for ToolError {
    fn from(e: std::io::Error) -> Self {
        ToolError::Catalogue(CatalogueError::Io(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum ToolResult {
    Documents { documents: Vec<DocumentSummary> },
    Document { document: Document },
    Updated { document: DocumentSummary },
    /// Submission and history tools are carried out by the workflow; the
    /// gateway only authorises and records them.
    Accepted { tool: Tool },
}

#[derive(Deserialize)]
struct ScopeArgs {
    #[serde(default)]
    project: Option<ProjectId>,
}

#[derive(Deserialize)]
struct ReadArgs {
    id: DocumentId,
}

#[derive(Deserialize)]
struct UpdateArgs {
    doc_id: DocumentId,
    #[serde(default)]
    updates: MetadataUpdate,
}

/// Dispatches agent tool calls after checking grants.
pub struct ToolGateway {
    grants: GrantTable,
    catalogue: Arc<Catalogue>,
}

impl ToolGateway {
    pub fn new(grants: GrantTable, catalogue: Arc<Catalogue>) -> Self {
        Self { grants, catalogue }
    }

    pub fn grants(&self) -> &GrantTable {
        &self.grants
    }

    pub fn grants_for(&self, role: AgentRole) -> CapabilitySet {
        self.grants.grants_for(role)
    }

    pub fn catalogue(&self) -> &Arc<Catalogue> {
        &self.catalogue
    }

    /// Tool schemas presented to an agent backend for `role`: exactly the
    /// granted tools.
    pub fn tool_schemas(&self, role: AgentRole) -> Vec<ToolSchema> {
        self.grants.grants_for(role).schemas()
    }

    /// Records the grant table checksum in the event log.
    pub fn record_grant_table(&self) -> Result<(), ToolError> {
        self.catalogue.events().append(
            EventKind::GrantTableLoaded,
            "engine",
            None,
            json!({ "checksum": self.grants.checksum(), "table": serde_json::from_str::<Value>(&self.grants.to_json()).unwrap_or(Value::Null) }),
        )?;
        Ok(())
    }

    pub fn invoke_tool(&self, role: AgentRole, tool: &str, args: &Value) -> Result<ToolResult, ToolError> {
        let tool = Tool::from_name(tool).ok_or_else(|| ToolError::UnknownTool(tool.to_string()))?;
        let project = args.get("project").and_then(Value::as_str).map(str::to_string);
        if !self.grants.allows(role, tool) {
            return Err(self.deny(role, tool, project.as_deref()));
        }
        let invalid = |e: serde_json::Error| ToolError::InvalidArguments {
            tool,
            reason: e.to_string(),
        };

        let (result, doc_id) = if let Some(level) = tool.listed_level() {
            let scope: ScopeArgs = serde_json::from_value(args.clone()).map_err(invalid)?;
            let documents = self.catalogue.list_for(level, scope.project.as_ref());
            (ToolResult::Documents { documents }, None)
        } else {
            match tool {
                Tool::ReadDocument => {
                    let read: ReadArgs = serde_json::from_value(args.clone()).map_err(invalid)?;
                    let summary = self.catalogue.summary(&read.id)?;
                    let needed = Tool::listing_for(summary.visibility);
                    if !self.grants.allows(role, needed) {
                        return Err(self.deny(role, needed, project.as_deref()));
                    }
                    let document = self.catalogue.get(&read.id)?;
                    (ToolResult::Document { document }, Some(read.id.to_string()))
                }
                Tool::QueryMetadata => {
                    let filter: MetadataFilter = serde_json::from_value(strip_project(args)).map_err(invalid)?;
                    let documents = self.catalogue.query_metadata(&filter);
                    (ToolResult::Documents { documents }, None)
                }
                Tool::UpdateMetadata => {
                    let update: UpdateArgs = serde_json::from_value(args.clone()).map_err(invalid)?;
                    let doc = self
                        .catalogue
                        .enrich_metadata(&update.doc_id, &update.updates, Actor::Agent(role))?;
                    let document = DocumentSummary::from(&doc);
                    (ToolResult::Updated { document }, Some(update.doc_id.to_string()))
                }
                _ => (ToolResult::Accepted { tool }, None),
            }
        };

        let mut detail = json!({ "role": role, "tool": tool });
        if let Some(p) = project {
            detail["project"] = json!(p);
        }
        if let ToolResult::Documents { documents } = &result {
            detail["count"] = json!(documents.len());
        }
        self.catalogue
            .events()
            .append(EventKind::ToolInvoked, role.as_str(), doc_id, detail)?;
        Ok(result)
    }

    fn deny(&self, role: AgentRole, tool: Tool, project: Option<&str>) -> ToolError {
        let refusal = Refusal {
            denied: true,
            role,
            tool: tool.name().to_string(),
        };
        let mut detail = json!(refusal);
        if let Some(p) = project {
            detail["project"] = json!(p);
        }
        if let Err(e) = self
            .catalogue
            .events()
            .append(EventKind::CapabilityDenied, role.as_str(), None, detail)
        {
            tracing::warn!("failed to record capability denial: {e}");
        }
        ToolError::CapabilityDenied(refusal)
    }
}

fn strip_project(args: &Value) -> Value {
    let mut args = args.clone();
    if let Some(obj) = args.as_object_mut() {
        obj.remove("project");
    }
    args
}
