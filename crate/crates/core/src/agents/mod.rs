//! Agent behaviour behind a uniform interface.
//!
//! The engine never talks to a model directly. It assembles an
//! [`Observation`] for a role, hands it to an [`AgentBackend`] and receives a
//! single [`AgentAction`]. [`ScriptedBackend`] replays fixed per-role queues
//! for tests and replays; [`HttpBackend`] speaks a chat-completion-shaped
//! protocol to a live model.

mod http;
mod scripted;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::catalogue::{DocumentId, DocumentSummary, MetadataUpdate, VisibilityLevel};
use crate::compression::{BudgetWarning, Pricing};
use crate::provisioning::{AgentRole, Refusal, Tool};
use crate::workflow::{ProjectId, Route};

pub use http::{HttpBackend, HttpBackendConfig};
pub use scripted::{Gate, ObservationLog, ScenarioParseError, ScenarioScript, ScenarioSource, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Substantiated,
    Fabricated,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Substantiated => "SUBSTANTIATED",
            Verdict::Fabricated => "FABRICATED",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Critic score, an integer in `0..=100`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct Score(u8);

impl Score {
    pub fn new(value: u8) -> Option<Score> {
        (value <= 100).then_some(Score(value))
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<i64> for Score {
    type Error = String;

    fn try_from(v: i64) -> Result<Self, Self::Error> {
        u8::try_from(v)
            .ok()
            .and_then(Score::new)
            .ok_or_else(|| format!("score {v} outside 0..=100"))
    }
}

impl From<Score> for u8 {
    fn from(s: Score) -> u8 {
        s.0
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AgentAction {
    DraftSubmission {
        title: String,
        content: String,
    },
    VerdictReport {
        verdict: Verdict,
        rationale: String,
    },
    ScoreReport {
        score: Score,
        feedback: String,
    },
    ClarificationRequest {
        question: String,
    },
    CurationUpdate {
        doc_id: DocumentId,
        #[serde(default)]
        updates: MetadataUpdate,
    },
    CompressionSummary {
        summary: String,
    },
    RouteChoice {
        route: Route,
        /// Existing document to verify when `route` is `verify_only`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        draft: Option<DocumentId>,
    },
}

impl AgentAction {
    /// The tool an agent must hold to emit this action.
    pub fn tool(&self) -> Tool {
        match self {
            AgentAction::DraftSubmission { .. } => Tool::SubmitDraft,
            AgentAction::VerdictReport { .. } => Tool::SubmitVerdict,
            AgentAction::ScoreReport { .. } => Tool::SubmitScore,
            AgentAction::ClarificationRequest { .. } => Tool::RequestClarification,
            AgentAction::CurationUpdate { .. } => Tool::UpdateMetadata,
            AgentAction::CompressionSummary { .. } => Tool::WriteHistory,
            AgentAction::RouteChoice { .. } => Tool::RouteProject,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AgentAction::DraftSubmission { .. } => "draft_submission",
            AgentAction::VerdictReport { .. } => "verdict_report",
            AgentAction::ScoreReport { .. } => "score_report",
            AgentAction::ClarificationRequest { .. } => "clarification_request",
            AgentAction::CurationUpdate { .. } => "curation_update",
            AgentAction::CompressionSummary { .. } => "compression_summary",
            AgentAction::RouteChoice { .. } => "route_choice",
        }
    }

    /// Convenience constructor for scripts and tests.
    pub fn score(value: u8, feedback: impl Into<String>) -> AgentAction {
        AgentAction::ScoreReport {
            score: Score::new(value).expect("score within 0..=100"),
            feedback: feedback.into(),
        }
    }

    pub fn verdict(verdict: Verdict, rationale: impl Into<String>) -> AgentAction {
        AgentAction::VerdictReport {
            verdict,
            rationale: rationale.into(),
        }
    }

    pub fn draft(title: impl Into<String>, content: impl Into<String>) -> AgentAction {
        AgentAction::DraftSubmission {
            title: title.into(),
            content: content.into(),
        }
    }

    pub fn route(route: Route) -> AgentAction {
        AgentAction::RouteChoice { route, draft: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Draft,
    Verdict,
    Score,
    Feedback,
    Summary,
    Note,
}

/// One entry of a role's message history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub kind: MessageKind,
    pub iteration: u32,
    pub text: String,
}

impl Message {
    pub fn new(kind: MessageKind, iteration: u32, text: impl Into<String>) -> Self {
        Self {
            kind,
            iteration,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedDocument {
    pub id: DocumentId,
    pub title: String,
    pub visibility: VisibilityLevel,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnsweredClarification {
    pub question: String,
    pub answer: String,
}

/// Everything an agent is shown for one decision. Built by the workflow
/// strictly through the role's granted tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub project_id: ProjectId,
    pub role: AgentRole,
    pub iteration: u32,
    pub remit: String,
    pub tools: Vec<String>,
    #[serde(default)]
    pub clarifications: Vec<AnsweredClarification>,
    #[serde(default)]
    pub documents: Vec<ObservedDocument>,
    #[serde(default)]
    pub listings: Vec<DocumentSummary>,
    #[serde(default)]
    pub history: Vec<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_warning: Option<BudgetWarning>,
    #[serde(default)]
    pub refusals: Vec<Refusal>,
}

impl Observation {
    /// Every piece of text the agent can see, concatenated. Used by tests to
    /// check for leaked or missing content.
    pub fn visible_text(&self) -> String {
        let mut out = self.remit.clone();
        for c in &self.clarifications {
            out.push('\n');
            out.push_str(&c.question);
            out.push('\n');
            out.push_str(&c.answer);
        }
        for d in &self.documents {
            out.push('\n');
            out.push_str(&d.title);
            out.push('\n');
            out.push_str(&d.content);
        }
        for s in &self.listings {
            out.push('\n');
            out.push_str(&s.title);
        }
        for m in &self.history {
            out.push('\n');
            out.push_str(&m.text);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input: u64,
    pub output: u64,
    pub cached: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentReply {
    pub action: AgentAction,
    pub usage: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("script exhausted for {0}")]
    ScriptExhausted(AgentRole),
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("malformed reply: {0}")]
    MalformedReply(String),
}

/// A source of agent decisions. One instance serves one project.
pub trait AgentBackend: Send {
    fn next_action(&mut self, role: AgentRole, observation: &Observation) -> Result<AgentReply, AgentError>;

    /// Prices used to cost this backend's token usage.
    fn pricing(&self) -> Pricing;
}

impl AgentBackend for Box<dyn AgentBackend> {
    fn next_action(&mut self, role: AgentRole, observation: &Observation) -> Result<AgentReply, AgentError> {
        (**self).next_action(role, observation)
    }

    fn pricing(&self) -> Pricing {
        (**self).pricing()
    }
}

/// Word limit applied to Corroborator rationales and Critic feedback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackPolicy {
    pub max_words: usize,
}

impl Default for FeedbackPolicy {
    fn default() -> Self {
        Self { max_words: 1000 }
    }
}

pub const TRUNCATION_MARKER: &str = "[truncated]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clamped {
    pub text: String,
    pub truncated: bool,
    pub original_words: usize,
}

/// Keeps `text` when it has at most `max_words` whitespace-delimited words;
/// otherwise returns the first `max_words` words followed by
/// [`TRUNCATION_MARKER`].
pub fn clamp_feedback(text: &str, policy: &FeedbackPolicy) -> Clamped {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= policy.max_words {
        return Clamped {
            text: text.to_string(),
            truncated: false,
            original_words: words.len(),
        };
    }
    let mut out = words[..policy.max_words].join(" ");
    if !out.is_empty() {
        out.push(' ');
    }
    out.push_str(TRUNCATION_MARKER);
    Clamped {
        text: out,
        truncated: true,
        original_words: words.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn clamp_under_limit_is_identity() {
        let text = words(999);
        let c = clamp_feedback(&text, &FeedbackPolicy::default());
        assert_eq!(c.text, text);
        assert!(!c.truncated);
    }

    #[test]
    fn clamp_over_limit_keeps_first_thousand_words() {
        let text = words(1001);
        let c = clamp_feedback(&text, &FeedbackPolicy::default());
        assert!(c.truncated);
        let kept: Vec<&str> = c.text.split_whitespace().collect();
        assert_eq!(kept.len(), 1001);
        assert_eq!(kept[999], "w999");
        assert_eq!(kept[1000], TRUNCATION_MARKER);
    }

    #[test]
    fn clamp_empty() {
        let c = clamp_feedback("", &FeedbackPolicy::default());
        assert_eq!(c.text, "");
        assert!(!c.truncated);
    }

    #[test]
    fn score_bounds() {
        assert!(Score::new(100).is_some());
        assert!(Score::new(101).is_none());
        assert!(serde_json::from_str::<Score>("101").is_err());
        assert!(serde_json::from_str::<Score>("-1").is_err());
        assert_eq!(serde_json::from_str::<Score>("85").unwrap().get(), 85);
    }

    #[test]
    fn action_wire_format() {
        let a = AgentAction::verdict(Verdict::Fabricated, "unsupported claim");
        let v = serde_json::to_value(&a).unwrap();
        assert_eq!(v["type"], "verdict_report");
        assert_eq!(v["verdict"], "FABRICATED");
        let back: AgentAction = serde_json::from_value(v).unwrap();
        assert_eq!(back, a);
        assert!(serde_json::from_str::<AgentAction>(r#"{"type":"verdict_report","verdict":"MAYBE","rationale":""}"#).is_err());
        assert!(serde_json::from_str::<AgentAction>(r#"{"type":"dance"}"#).is_err());
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent(text in "[a-z \n\t]{0,400}", max in 1usize..40) {
            let policy = FeedbackPolicy { max_words: max };
            let once = clamp_feedback(&text, &policy).text;
            let twice = clamp_feedback(&once, &policy).text;
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn clamp_never_exceeds_limit(text in "[a-z ]{0,400}", max in 1usize..40) {
            let policy = FeedbackPolicy { max_words: max };
            let c = clamp_feedback(&text, &policy);
            let n = c.text.split_whitespace().filter(|w| *w != TRUNCATION_MARKER).count();
            prop_assert!(n <= max);
        }
    }
}
