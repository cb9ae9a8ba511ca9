use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};

use super::{AgentAction, AgentBackend, AgentError, AgentReply, Observation, TokenUsage, Verdict};
use crate::catalogue::VisibilityLevel;
use crate::compression::{CharEstimator, Pricing, TokenEstimator};
use crate::provisioning::AgentRole;
use crate::workflow::Route;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioParseError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario is not valid: {0}")]
    Json(#[from] serde_json::Error),
}

/// A source document ingested before a replayed project starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSource {
    pub title: String,
    pub content: String,
    #[serde(default = "candidate")]
    pub visibility: VisibilityLevel,
}

fn candidate() -> VisibilityLevel {
    VisibilityLevel::Candidate
}

/// Scenario file: `{name, queues: {role: [action, ...]}}`, optionally with
/// the remit and source documents the replay should set up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remit: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<ScenarioSource>,
    pub queues: BTreeMap<AgentRole, Vec<AgentAction>>,
}

impl ScenarioScript {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            remit: None,
            sources: Vec::new(),
            queues: BTreeMap::new(),
        }
    }

    pub fn with_queue(mut self, role: AgentRole, actions: impl IntoIterator<Item = AgentAction>) -> Self {
        self.queues.entry(role).or_default().extend(actions);
        self
    }

    /// A compose-route run with one draft per row. Each row is the
    /// Corroborator's verdict and, for substantiated drafts, the Critic's
    /// score. Every rationale and feedback text carries a `note-<n>` marker.
    pub fn assessment_run(name: impl Into<String>, rows: &[(Verdict, Option<u8>)]) -> Self {
        let mut script = Self::new(name).with_queue(AgentRole::Commutator, [AgentAction::route(Route::Compose)]);
        for (i, (verdict, score)) in rows.iter().enumerate() {
            let n = i + 1;
            script = script
                .with_queue(
                    AgentRole::Composer,
                    [AgentAction::draft(format!("draft {n}"), format!("Draft number {n} of the deliverable."))],
                )
                .with_queue(
                    AgentRole::Corroborator,
                    [AgentAction::verdict(*verdict, format!("note-{n}-verdict rationale for draft {n}"))],
                );
            if let Some(score) = score {
                script = script.with_queue(
                    AgentRole::Critic,
                    [AgentAction::score(*score, format!("note-{n}-critic feedback for draft {n}"))],
                );
            }
        }
        script
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioParseError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ScenarioParseError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// A latch that holds a scripted backend until released.
#[derive(Debug, Clone, Default)]
pub struct Gate(Arc<(Mutex<bool>, Condvar)>);

impl Gate {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn release(&self) {
        let (lock, cv) = &*self.0;
        *lock.lock().expect("gate poisoned") = true;
        cv.notify_all();
    }

    pub fn is_released(&self) -> bool {
        *self.0 .0.lock().expect("gate poisoned")
    }

    pub fn wait(&self) {
        let (lock, cv) = &*self.0;
        let mut open = lock.lock().expect("gate poisoned");
        while !*open {
            open = cv.wait(open).expect("gate poisoned");
        }
    }
}

/// Shared record of every observation a scripted backend was shown.
pub type ObservationLog = Arc<Mutex<Vec<(AgentRole, Observation)>>>;

/// Replays per-role action queues in order.
pub struct ScriptedBackend {
    name: String,
    queues: BTreeMap<AgentRole, VecDeque<AgentAction>>,
    seen: ObservationLog,
    previous: BTreeMap<AgentRole, String>,
    gate: Option<Gate>,
    estimator: Arc<dyn TokenEstimator>,
    pricing: Pricing,
}

impl ScriptedBackend {
    pub fn new(script: ScenarioScript) -> Self {
        Self {
            name: script.name,
            queues: script.queues.into_iter().map(|(r, q)| (r, q.into())).collect(),
            seen: ObservationLog::default(),
            previous: BTreeMap::new(),
            gate: None,
            estimator: Arc::new(CharEstimator::default()),
            pricing: Pricing::default(),
        }
    }

    /// Blocks every `next_action` call until `gate` is released.
    pub fn with_gate(mut self, gate: Gate) -> Self {
        self.gate = Some(gate);
        self
    }

    pub fn with_pricing(mut self, pricing: Pricing) -> Self {
        self.pricing = pricing;
        self
    }

    pub fn with_estimator(mut self, estimator: Arc<dyn TokenEstimator>) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn observations(&self) -> ObservationLog {
        self.seen.clone()
    }

    pub fn remaining(&self, role: AgentRole) -> usize {
        self.queues.get(&role).map_or(0, VecDeque::len)
    }
}

impl AgentBackend for ScriptedBackend {
    fn next_action(&mut self, role: AgentRole, observation: &Observation) -> Result<AgentReply, AgentError> {
        if let Some(gate) = &self.gate {
            gate.wait();
        }
        self.seen
            .lock()
            .expect("observation log poisoned")
            .push((role, observation.clone()));
        let action = self
            .queues
            .get_mut(&role)
            .and_then(VecDeque::pop_front)
            .ok_or(AgentError::ScriptExhausted(role))?;

        // Prompt caching is prefix based: whatever this role was shown last
        // time and is shown again verbatim counts as cached input.
        let prompt = serde_json::to_string(observation).expect("observations serialise");
        let shared = self
            .previous
            .get(&role)
            .map_or(0, |prev| common_prefix_len(prev, &prompt));
        let usage = TokenUsage {
            input: self.estimator.estimate(&prompt),
            output: self
                .estimator
                .estimate(&serde_json::to_string(&action).expect("actions serialise")),
            cached: self.estimator.estimate(&prompt[..shared]),
        };
        self.previous.insert(role, prompt);
        Ok(AgentReply { action, usage })
    }

    fn pricing(&self) -> Pricing {
        self.pricing
    }
}

/// Length in bytes of the longest common prefix, on a char boundary.
fn common_prefix_len(a: &str, b: &str) -> usize {
    a.char_indices()
        .zip(b.chars())
        .find(|((_, ca), cb)| ca != cb)
        .map_or(a.len().min(b.len()), |((i, _), _)| i)
}
