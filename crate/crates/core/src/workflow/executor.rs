use std::sync::Arc;

use serde_json::json;

use super::engine::{Engine, ProjectHandle};
use super::{
    consult_recorded, FeedbackEntry, GraphState, IterationOutcome, ProjectStatus, ProjectTrace, Route, ScoreEntry,
    VerdictEntry, WorkflowError,
};
use crate::agents::{
    clamp_feedback, AgentAction, AgentBackend, AgentError, Message, MessageKind, Observation, ObservedDocument,
    Verdict,
};
use crate::catalogue::{Actor, DocumentId, NewMetadata, VisibilityLevel};
use crate::compression::{budget_signal, feedback_tag, maybe_compress, CompressionContext, CompressionError};
use crate::events::{EventKind, EventLog};
use crate::provisioning::{AgentRole, Refusal, Tool, ToolError, ToolResult};

/// Consecutive refused actions tolerated from one role before the step is
/// treated as a protocol violation.
const MAX_REFUSALS: usize = 3;

/// Drives one project from intake to a terminal status. Owns the project's
/// [`GraphState`] and backend for the duration of the run.
pub struct Executor<'e> {
    engine: &'e Engine,
    handle: Arc<ProjectHandle>,
    state: GraphState,
    backend: Box<dyn AgentBackend>,
    refusals: Vec<Refusal>,
    /// Draft currently under assessment.
    current: Option<DocumentId>,
}

impl<'e> Executor<'e> {
    pub(crate) fn new(
        engine: &'e Engine,
        handle: Arc<ProjectHandle>,
        state: GraphState,
        backend: Box<dyn AgentBackend>,
    ) -> Self {
        Self {
            engine,
            handle,
            state,
            backend,
            refusals: Vec::new(),
            current: None,
        }
    }

    pub fn state(&self) -> &GraphState {
        &self.state
    }

    fn events(&self) -> &Arc<EventLog> {
        self.engine.catalogue().events()
    }

    fn project(&self) -> String {
        self.state.project_id.to_string()
    }

    /// Runs to completion and records the final trace.
    pub fn run(mut self) -> ProjectStatus {
        let result = self.drive();
        let (mut status, mut cause) = match result {
            Ok(()) => (ProjectStatus::Completed, None),
            Err(WorkflowError::Aborted(reason)) => (ProjectStatus::Aborted, Some(reason)),
            Err(e) => (ProjectStatus::Failed, Some(e.to_string())),
        };
        {
            let mut control = self.handle.control.lock().expect("control poisoned");
            if control.status == ProjectStatus::Aborted {
                status = ProjectStatus::Aborted;
                cause = control.abort_reason.clone().or(cause);
            } else {
                control.status = status;
            }
            control.paused = false;
            control.violation = None;
        }
        let mut trace = ProjectTrace::from_state(&self.state, status);
        trace.cause = cause;
        self.handle.publish(trace.clone());
        if let Err(e) = self.engine.record_finished(&trace) {
            tracing::error!(project = %self.state.project_id, "could not record project end: {e}");
        }
        self.handle.wake.notify_all();
        status
    }

    fn drive(&mut self) -> Result<(), WorkflowError> {
        if self.state.config.concierge_intake {
            self.intake()?;
        }
        let route = self.triage()?;
        match route {
            (Route::Compose, _) => {}
            (Route::Curate, _) => self.curate()?,
            (Route::VerifyOnly, draft) => {
                if self.verify_existing(draft)? == IterationOutcome::Converged {
                    return Ok(());
                }
            }
        }
        loop {
            if self.state.iteration >= self.state.config.max_iterations {
                return Err(WorkflowError::MaxIterations(self.state.config.max_iterations));
            }
            if self.run_iteration()? == IterationOutcome::Converged {
                return Ok(());
            }
        }
    }

    /// Blocks while the project is paused; fails fast on abort or a recorded
    /// protocol violation.
    fn checkpoint(&self) -> Result<(), WorkflowError> {
        let mut control = self.handle.control.lock().expect("control poisoned");
        loop {
            if control.status == ProjectStatus::Aborted {
                return Err(WorkflowError::Aborted(control.abort_reason.clone().unwrap_or_default()));
            }
            if let Some(v) = control.violation.take() {
                return Err(v);
            }
            if !control.paused {
                return Ok(());
            }
            control = self.handle.wake.wait(control).expect("control poisoned");
        }
    }

    fn check_budget(&self) -> Result<(), WorkflowError> {
        let spent = self.state.ledger.spent();
        let budget = self.state.config.token_budget;
        if spent >= budget {
            return Err(WorkflowError::BudgetExhausted { spent, budget });
        }
        Ok(())
    }

    fn publish(&self) {
        self.handle.publish(ProjectTrace::from_state(&self.state, ProjectStatus::Active));
    }

    fn after_call(&mut self) -> Result<(), WorkflowError> {
        let warning = budget_signal(&self.state.ledger, &self.state.config, &self.engine.settings().compression);
        if let (Some(w), None) = (warning, self.state.budget_warning) {
            self.state.budget_warning = Some(w);
            self.events().append(
                EventKind::BudgetWarning,
                "engine",
                None,
                json!({ "project": self.project(), "spent": w.spent, "budget": w.budget }),
            )?;
        }
        self.publish();
        Ok(())
    }

    fn violation(&self, role: AgentRole, kind: &str, detail: String) -> Result<WorkflowError, WorkflowError> {
        self.events().append(
            EventKind::ProtocolViolation,
            role.as_str(),
            None,
            json!({
                "project": self.project(),
                "role": role,
                "iteration": self.state.iteration + 1,
                "violation": kind,
                "detail": detail,
            }),
        )?;
        Ok(WorkflowError::ProtocolViolation { role, detail })
    }

    fn fail_iteration(&self, role: AgentRole, reason: &str) -> Result<(), WorkflowError> {
        self.events().append(
            EventKind::IterationOutcome,
            "engine",
            None,
            json!({
                "project": self.project(),
                "iteration": self.state.iteration + 1,
                "outcome": "failed",
                "role": role,
                "reason": reason,
            }),
        )?;
        Ok(())
    }

    /// Consults `role` until it emits an action it is provisioned for and that
    /// `accept` recognises. Refused actions are fed back as structured
    /// refusals on the next observation.
    fn consult(
        &mut self,
        role: AgentRole,
        accept: impl Fn(&AgentAction) -> bool,
    ) -> Result<AgentAction, WorkflowError> {
        loop {
            self.checkpoint()?;
            self.check_budget()?;
            let observation = self.observe(role)?;
            let events = Arc::clone(self.events());
            let action = consult_recorded(
                self.backend.as_mut(),
                &events,
                &mut self.state.ledger,
                role,
                &observation,
            )?;
            self.after_call()?;

            if let AgentAction::ClarificationRequest { question } = &action {
                if role == AgentRole::Concierge {
                    self.engine
                        .gateway()
                        .invoke_tool(role, Tool::RequestClarification.name(), &json!({ "project": self.project() }))?;
                }
                if let Err(e) = self.engine.clarify(&self.state.project_id, role, question) {
                    self.handle.control.lock().expect("control poisoned").violation = None;
                    if matches!(
                        e,
                        WorkflowError::DownstreamClarification(_) | WorkflowError::ProtocolViolation { .. }
                    ) {
                        self.fail_iteration(role, "clarification request")?;
                    }
                    return Err(e);
                }
                if accept(&action) {
                    return Ok(action);
                }
                return Err(self.violation(role, "unexpected_action", format!("{} at this step", action.kind()))?);
            }

            let mut args = match &action {
                AgentAction::CurationUpdate { doc_id, updates } => json!({ "doc_id": doc_id, "updates": updates }),
                _ => json!({}),
            };
            args["project"] = json!(self.project());
            match self.engine.gateway().invoke_tool(role, action.tool().name(), &args) {
                Ok(_) => self.refusals.clear(),
                Err(ToolError::CapabilityDenied(refusal)) => {
                    self.refusals.push(refusal);
                    if self.refusals.len() >= MAX_REFUSALS {
                        return Err(self.violation(
                            role,
                            "repeated_refusal",
                            format!("{} refused actions in a row", self.refusals.len()),
                        )?);
                    }
                    continue;
                }
                Err(e) => return Err(e.into()),
            }
            if !accept(&action) {
                return Err(self.violation(role, "unexpected_action", format!("{} at this step", action.kind()))?);
            }
            return Ok(action);
        }
    }

    fn list(&self, role: AgentRole, tool: Tool) -> Result<Vec<crate::catalogue::DocumentSummary>, WorkflowError> {
        match self
            .engine
            .gateway()
            .invoke_tool(role, tool.name(), &json!({ "project": self.project() }))?
        {
            ToolResult::Documents { documents } => Ok(documents),
            _ => Ok(Vec::new()),
        }
    }

    fn read(&self, role: AgentRole, id: &DocumentId) -> Result<ObservedDocument, WorkflowError> {
        match self
            .engine
            .gateway()
            .invoke_tool(role, Tool::ReadDocument.name(), &json!({ "project": self.project(), "id": id }))?
        {
            ToolResult::Document { document } => Ok(ObservedDocument {
                id: document.id,
                title: document.title,
                visibility: document.visibility,
                content: document.content,
            }),
            other => Err(WorkflowError::Tool(ToolError::InvalidArguments {
                tool: Tool::ReadDocument,
                reason: format!("unexpected result {other:?}"),
            })),
        }
    }

    /// Builds what `role` sees, fetching every document through the role's
    /// own tools.
    fn observe(&self, role: AgentRole) -> Result<Observation, WorkflowError> {
        let grants = self.engine.gateway().grants_for(role);
        let mut listings = Vec::new();
        for tool in Tool::LISTINGS {
            if grants.allows(tool) {
                listings.extend(self.list(role, tool)?);
            }
        }

        let mut wanted: Vec<DocumentId> = Vec::new();
        match role {
            AgentRole::Concierge | AgentRole::Commutator | AgentRole::Curator | AgentRole::Composer => {
                wanted.extend(self.state.sources.iter().cloned());
            }
            AgentRole::Corroborator => {
                wanted.extend(self.current.iter().cloned());
                wanted.extend(self.state.sources.iter().cloned());
            }
            AgentRole::Critic => wanted.extend(self.current.iter().cloned()),
            AgentRole::Compressor => {}
        }
        if role == AgentRole::Composer {
            // Feedback documents from the latest iteration; older feedback
            // reaches the Composer through its history.
            wanted.extend(
                listings
                    .iter()
                    .filter(|d| d.visibility == VisibilityLevel::Feedback)
                    .filter(|d| d.metadata.iteration == Some(self.state.iteration))
                    .map(|d| d.id.clone()),
            );
        }
        let mut documents = Vec::new();
        for id in &wanted {
            match self.read(role, id) {
                Ok(doc) => documents.push(doc),
                // An ungranted document is simply not shown.
                Err(WorkflowError::Tool(ToolError::CapabilityDenied(_))) => {}
                Err(e) => return Err(e),
            }
        }

        Ok(Observation {
            project_id: self.state.project_id.clone(),
            role,
            iteration: self.state.iteration,
            remit: self.state.remit.clone(),
            tools: grants.names(),
            clarifications: self.state.clarifications.clone(),
            documents,
            listings,
            history: self.state.history(role).to_vec(),
            budget_warning: self.state.budget_warning,
            refusals: self.refusals.clone(),
        })
    }

    fn remember(&mut self, role: AgentRole, kind: MessageKind, text: String) {
        let iteration = self.state.iteration;
        self.state
            .histories
            .entry(role)
            .or_default()
            .push(Message::new(kind, iteration, text));
    }

    fn intake(&mut self) -> Result<(), WorkflowError> {
        self.consult(AgentRole::Concierge, |a| matches!(a, AgentAction::ClarificationRequest { .. }))?;
        // Waits here until the user answers.
        self.checkpoint()?;
        self.state.clarifications = self.engine.answered_clarifications(&self.state.project_id);
        self.publish();
        Ok(())
    }

    fn triage(&mut self) -> Result<(Route, Option<DocumentId>), WorkflowError> {
        let action = self.consult(AgentRole::Commutator, |_| true)?;
        let AgentAction::RouteChoice { route, draft } = action else {
            return Err(AgentError::MalformedReply(format!("expected route_choice, got {}", action.kind())).into());
        };
        self.handle.control.lock().expect("control poisoned").triaged = true;
        self.state.route = Some(route);
        self.remember(AgentRole::Commutator, MessageKind::Note, format!("route: {route:?}"));
        self.events().append(
            EventKind::Triage,
            AgentRole::Commutator.as_str(),
            None,
            json!({ "project": self.project(), "route": route, "draft": draft }),
        )?;
        self.publish();
        Ok((route, draft))
    }

    fn curate(&mut self) -> Result<(), WorkflowError> {
        let action = self.consult(AgentRole::Curator, |a| matches!(a, AgentAction::CurationUpdate { .. }))?;
        if let AgentAction::CurationUpdate { doc_id, updates } = &action {
            self.remember(AgentRole::Curator, MessageKind::Note, format!("curated {doc_id}"));
            self.events().append(
                EventKind::Curation,
                AgentRole::Curator.as_str(),
                Some(doc_id.to_string()),
                json!({ "project": self.project(), "updates": updates }),
            )?;
        }
        Ok(())
    }

    /// Verify-only route: the named existing draft becomes iteration 1.
    fn verify_existing(&mut self, draft: Option<DocumentId>) -> Result<IterationOutcome, WorkflowError> {
        let existing = draft.and_then(|id| self.engine.catalogue().get(&id).ok());
        let Some(doc) = existing.filter(|d| d.visibility == VisibilityLevel::Draft) else {
            self.events().append(
                EventKind::MissingDraft,
                "engine",
                None,
                json!({ "project": self.project() }),
            )?;
            return Err(WorkflowError::MissingDraft);
        };
        self.accept_draft(&doc.title, &doc.content, Some(&doc.id))?;
        self.assess()
    }

    /// One compose → corroborate → criticise cycle.
    pub fn run_iteration(&mut self) -> Result<IterationOutcome, WorkflowError> {
        self.compress()?;
        let action = self.consult(AgentRole::Composer, |a| matches!(a, AgentAction::DraftSubmission { .. }))?;
        let AgentAction::DraftSubmission { title, content } = action else {
            unreachable!("consult only accepts draft submissions here");
        };
        self.accept_draft(&title, &content, None)?;
        self.remember(AgentRole::Composer, MessageKind::Draft, content);
        self.assess()
    }

    fn compress(&mut self) -> Result<(), WorkflowError> {
        self.checkpoint()?;
        self.check_budget()?;
        let settings = self.engine.settings();
        let ctx = CompressionContext {
            gateway: self.engine.gateway(),
            estimator: settings.estimator.as_ref(),
            policy: &settings.compression,
        };
        match maybe_compress(&mut self.state, self.backend.as_mut(), &ctx) {
            Ok(_) => {}
            Err(CompressionError::Ineffective { role, before, after }) => {
                tracing::warn!(project = %self.state.project_id, %role, before, after, "compression ineffective");
            }
            Err(e) => return Err(e.into()),
        }
        self.after_call()
    }

    fn accept_draft(&mut self, title: &str, content: &str, copied_from: Option<&DocumentId>) -> Result<(), WorkflowError> {
        let iteration = self.state.iteration + 1;
        let meta = NewMetadata {
            source_type: "draft".into(),
            classification: "draft".into(),
            authorship: AgentRole::Composer.as_str().into(),
            project_id: Some(self.state.project_id.clone()),
            iteration: Some(iteration),
            ..NewMetadata::default()
        };
        let id = self
            .engine
            .catalogue()
            .create_document(title, content, meta, VisibilityLevel::Draft, Actor::Engine)?;
        self.state.iteration = iteration;
        self.state.drafts.push(id.clone());
        self.current = Some(id.clone());
        let mut detail = json!({ "project": self.project(), "iteration": iteration, "title": title });
        if let Some(src) = copied_from {
            detail["copied_from"] = json!(src);
        }
        self.events()
            .append(EventKind::DraftSubmitted, AgentRole::Composer.as_str(), Some(id.to_string()), detail)?;
        self.publish();
        Ok(())
    }

    fn clamp(&self, role: AgentRole, text: &str) -> Result<String, WorkflowError> {
        let clamped = clamp_feedback(text, &self.engine.settings().feedback);
        if clamped.truncated {
            self.events().append(
                EventKind::FeedbackTruncated,
                role.as_str(),
                None,
                json!({
                    "project": self.project(),
                    "iteration": self.state.iteration,
                    "original_words": clamped.original_words,
                    "max_words": self.engine.settings().feedback.max_words,
                }),
            )?;
        }
        Ok(clamped.text)
    }

    /// Corroborator gate, then the Critic for substantiated drafts.
    fn assess(&mut self) -> Result<IterationOutcome, WorkflowError> {
        let iteration = self.state.iteration;
        let draft = self.current.clone().expect("a draft is under assessment");
        let action = self.consult(AgentRole::Corroborator, |a| matches!(a, AgentAction::VerdictReport { .. }))?;
        let AgentAction::VerdictReport { verdict, rationale } = action else {
            unreachable!("consult only accepts verdicts here");
        };
        let rationale = self.clamp(AgentRole::Corroborator, &rationale)?;
        self.state.verdict_trace.push(VerdictEntry { iteration, verdict });
        self.remember(AgentRole::Corroborator, MessageKind::Verdict, format!("{verdict}: {rationale}"));
        self.engine.catalogue().record_assessment(&draft, Some(verdict), None)?;
        self.events().append(
            EventKind::Verdict,
            AgentRole::Corroborator.as_str(),
            Some(draft.to_string()),
            json!({ "project": self.project(), "iteration": iteration, "verdict": verdict, "rationale": rationale }),
        )?;
        self.publish();

        if verdict == Verdict::Fabricated {
            self.deliver_feedback(AgentRole::Corroborator, rationale)?;
            return self.outcome(IterationOutcome::Revise);
        }

        let action = self.consult(AgentRole::Critic, |a| matches!(a, AgentAction::ScoreReport { .. }))?;
        let AgentAction::ScoreReport { score, feedback } = action else {
            unreachable!("consult only accepts scores here");
        };
        let score = score.get();
        let feedback = self.clamp(AgentRole::Critic, &feedback)?;
        self.state.score_trace.push(ScoreEntry { iteration, score });
        self.remember(AgentRole::Critic, MessageKind::Score, format!("{score}: {feedback}"));
        self.engine.catalogue().record_assessment(&draft, None, Some(score))?;
        self.events().append(
            EventKind::Score,
            AgentRole::Critic.as_str(),
            Some(draft.to_string()),
            json!({ "project": self.project(), "iteration": iteration, "score": score, "tau": self.state.config.tau }),
        )?;
        self.publish();

        if self.state.config.accepts(score) {
            return self.outcome(IterationOutcome::Converged);
        }
        // The Composer also hears the evidential side of a substantiated
        // draft, but the feedback log keeps one entry per revision.
        if !rationale.trim().is_empty() {
            self.store_feedback(AgentRole::Corroborator, &rationale)?;
            self.remember(
                AgentRole::Composer,
                MessageKind::Note,
                format!("corroborator (iteration {iteration}): {rationale}"),
            );
        }
        self.deliver_feedback(AgentRole::Critic, feedback)?;
        self.outcome(IterationOutcome::Revise)
    }

    fn store_feedback(&self, source: AgentRole, text: &str) -> Result<DocumentId, WorkflowError> {
        let iteration = self.state.iteration;
        let meta = NewMetadata {
            source_type: "feedback".into(),
            classification: source.as_str().into(),
            authorship: source.as_str().into(),
            project_id: Some(self.state.project_id.clone()),
            iteration: Some(iteration),
            ..NewMetadata::default()
        };
        let body = if text.trim().is_empty() { "(no feedback given)" } else { text };
        Ok(self.engine.catalogue().create_document(
            &format!("{source} feedback, iteration {iteration}"),
            body,
            meta,
            VisibilityLevel::Feedback,
            Actor::Engine,
        )?)
    }

    /// Appends gating feedback to the log, the Composer's history and a
    /// FEEDBACK document.
    fn deliver_feedback(&mut self, source: AgentRole, text: String) -> Result<(), WorkflowError> {
        let iteration = self.state.iteration;
        let doc = self.store_feedback(source, &text)?;
        self.state.feedback_log.push(FeedbackEntry {
            iteration,
            source,
            text: text.clone(),
        });
        let tag = feedback_tag(self.state.feedback_log.len());
        self.remember(
            AgentRole::Composer,
            MessageKind::Feedback,
            format!("{tag} {source} (iteration {iteration}): {text}"),
        );
        self.events().append(
            EventKind::Feedback,
            source.as_str(),
            Some(doc.to_string()),
            json!({ "project": self.project(), "iteration": iteration, "source": source, "tag": tag }),
        )?;
        Ok(())
    }

    fn outcome(&mut self, outcome: IterationOutcome) -> Result<IterationOutcome, WorkflowError> {
        self.events().append(
            EventKind::IterationOutcome,
            "engine",
            None,
            json!({ "project": self.project(), "iteration": self.state.iteration, "outcome": outcome }),
        )?;
        self.publish();
        Ok(outcome)
    }
}
