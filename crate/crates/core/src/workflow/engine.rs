use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::executor::Executor;
use super::{
    ClarificationTicket, GraphState, ProjectId, ProjectStatus, ProjectTrace, TicketState, WorkflowConfig,
    WorkflowError,
};
use crate::agents::{AgentBackend, AnsweredClarification, FeedbackPolicy};
use crate::catalogue::{Catalogue, DocumentId, VisibilityLevel};
use crate::compression::{CharEstimator, CompressionPolicy, TokenEstimator};
use crate::events::{EventKind, EventRecord};
use crate::provisioning::{AgentRole, GrantTable, ToolGateway};

pub struct EngineSettings {
    /// Seed for project ids and ticket ids; `None` draws from the OS.
    pub seed: Option<u64>,
    pub grants: GrantTable,
    pub compression: CompressionPolicy,
    pub feedback: FeedbackPolicy,
    pub estimator: Arc<dyn TokenEstimator>,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            seed: None,
            grants: GrantTable::default(),
            compression: CompressionPolicy::default(),
            feedback: FeedbackPolicy::default(),
            estimator: Arc::new(CharEstimator::default()),
        }
    }
}

pub(crate) struct Control {
    pub status: ProjectStatus,
    pub paused: bool,
    pub triaged: bool,
    pub abort_reason: Option<String>,
    pub violation: Option<WorkflowError>,
}

pub(crate) struct ProjectHandle {
    pub control: Mutex<Control>,
    pub wake: Condvar,
    pub trace: RwLock<ProjectTrace>,
    pub runner: Mutex<Option<(GraphState, Box<dyn AgentBackend>)>>,
}

impl ProjectHandle {
    pub fn publish(&self, trace: ProjectTrace) {
        *self.trace.write().expect("trace poisoned") = trace;
    }

    pub fn snapshot(&self) -> ProjectTrace {
        let control = self.control.lock().expect("control poisoned");
        let mut trace = self.trace.read().expect("trace poisoned").clone();
        trace.status = control.status;
        trace.paused = control.paused;
        if trace.cause.is_none() {
            trace.cause = control.abort_reason.clone();
        }
        trace
    }
}

/// Owns the catalogue, the tool gateway and every project.
pub struct Engine {
    catalogue: Arc<Catalogue>,
    gateway: ToolGateway,
    settings: EngineSettings,
    projects: RwLock<BTreeMap<ProjectId, Arc<ProjectHandle>>>,
    tickets: Mutex<Vec<ClarificationTicket>>,
    rng: Mutex<ChaCha8Rng>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("catalogue", &self.catalogue)
            .field("projects", &self.projects.read().map(|p| p.len()).unwrap_or(0))
            .finish()
    }
}

impl Engine {
    /// Builds an engine over `catalogue`, records the grant table checksum and
    /// restores finished projects found in the event log.
    pub fn new(catalogue: Arc<Catalogue>, settings: EngineSettings) -> Result<Self, WorkflowError> {
        settings.compression.validate().map_err(WorkflowError::InvalidConfig)?;
        let gateway = ToolGateway::new(settings.grants.clone(), catalogue.clone());
        gateway.record_grant_table()?;
        let rng = match settings.seed {
            Some(s) => ChaCha8Rng::seed_from_u64(s),
            None => ChaCha8Rng::from_rng(&mut rand::rng()),
        };
        let engine = Self {
            catalogue,
            gateway,
            settings,
            projects: RwLock::new(BTreeMap::new()),
            tickets: Mutex::new(Vec::new()),
            rng: Mutex::new(rng),
        };
        engine.restore_finished();
        Ok(engine)
    }

    fn restore_finished(&self) {
        let mut projects = self.projects.write().expect("registry poisoned");
        for record in self.catalogue.events().records() {
            if record.kind != EventKind::ProjectFinished {
                continue;
            }
            let Some(trace) = record
                .detail
                .get("trace")
                .and_then(|t| serde_json::from_value::<ProjectTrace>(t.clone()).ok())
            else {
                continue;
            };
            let handle = ProjectHandle {
                control: Mutex::new(Control {
                    status: trace.status,
                    paused: false,
                    triaged: true,
                    abort_reason: None,
                    violation: None,
                }),
                wake: Condvar::new(),
                trace: RwLock::new(trace.clone()),
                runner: Mutex::new(None),
            };
            projects.insert(trace.project_id.clone(), Arc::new(handle));
        }
    }

    pub fn catalogue(&self) -> &Arc<Catalogue> {
        &self.catalogue
    }

    pub fn gateway(&self) -> &ToolGateway {
        &self.gateway
    }

    pub fn settings(&self) -> &EngineSettings {
        &self.settings
    }

    pub(crate) fn handle(&self, id: &ProjectId) -> Result<Arc<ProjectHandle>, WorkflowError> {
        self.projects
            .read()
            .expect("registry poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| WorkflowError::UnknownProject(id.to_string()))
    }

    /// Validates and registers a project without running it.
    pub fn create_project(
        &self,
        remit: &str,
        source_ids: &[DocumentId],
        config: WorkflowConfig,
        backend: Box<dyn AgentBackend>,
    ) -> Result<ProjectId, WorkflowError> {
        if remit.trim().is_empty() {
            return Err(WorkflowError::EmptyRemit);
        }
        config.validate().map_err(WorkflowError::InvalidConfig)?;
        for id in source_ids {
            let summary = self
                .catalogue
                .summary(id)
                .map_err(|_| WorkflowError::UnknownDocument(id.to_string()))?;
            if !matches!(summary.visibility, VisibilityLevel::Candidate | VisibilityLevel::Public) {
                return Err(WorkflowError::UnknownDocument(id.to_string()));
            }
        }

        let mut projects = self.projects.write().expect("registry poisoned");
        let id = {
            let mut rng = self.rng.lock().expect("rng poisoned");
            loop {
                let id = ProjectId::generate(&mut *rng);
                if !projects.contains_key(&id) {
                    break id;
                }
            }
        };
        let state = GraphState::new(id.clone(), remit.to_string(), source_ids.to_vec(), config);
        let trace = ProjectTrace::from_state(&state, ProjectStatus::Active);
        self.catalogue.events().append(
            EventKind::ProjectStarted,
            "user",
            None,
            json!({ "project": id, "remit": remit, "sources": source_ids, "config": config }),
        )?;
        let handle = ProjectHandle {
            control: Mutex::new(Control {
                status: ProjectStatus::Active,
                paused: false,
                triaged: false,
                abort_reason: None,
                violation: None,
            }),
            wake: Condvar::new(),
            trace: RwLock::new(trace),
            runner: Mutex::new(Some((state, backend))),
        };
        projects.insert(id.clone(), Arc::new(handle));
        Ok(id)
    }

    /// Registers a project and runs it on its own thread. Returns before any
    /// agent is consulted.
    pub fn start_project(
        self: &Arc<Self>,
        remit: &str,
        source_ids: &[DocumentId],
        config: WorkflowConfig,
        backend: Box<dyn AgentBackend>,
    ) -> Result<ProjectId, WorkflowError> {
        let id = self.create_project(remit, source_ids, config, backend)?;
        let engine = Arc::clone(self);
        let run_id = id.clone();
        std::thread::Builder::new()
            .name(format!("project-{id}"))
            .spawn(move || {
                if let Err(e) = engine.run_project(&run_id) {
                    tracing::warn!(project = %run_id, "project did not run: {e}");
                }
            })
            .map_err(WorkflowError::Log)?;
        Ok(id)
    }

    /// Takes ownership of a registered project's state and backend.
    pub fn executor(&self, id: &ProjectId) -> Result<Executor<'_>, WorkflowError> {
        let handle = self.handle(id)?;
        let (state, backend) = handle
            .runner
            .lock()
            .expect("runner poisoned")
            .take()
            .ok_or_else(|| WorkflowError::AlreadyRunning(id.clone()))?;
        Ok(Executor::new(self, handle, state, backend))
    }

    /// Runs a registered project to a terminal status on the calling thread.
    pub fn run_project(&self, id: &ProjectId) -> Result<ProjectStatus, WorkflowError> {
        Ok(self.executor(id)?.run())
    }

    pub fn status(&self, id: &ProjectId) -> Result<ProjectTrace, WorkflowError> {
        Ok(self.handle(id)?.snapshot())
    }

    pub fn projects(&self) -> Vec<ProjectTrace> {
        let handles: Vec<Arc<ProjectHandle>> =
            self.projects.read().expect("registry poisoned").values().cloned().collect();
        handles.iter().map(|h| h.snapshot()).collect()
    }

    pub fn project_events(&self, id: &ProjectId) -> Result<Vec<EventRecord>, WorkflowError> {
        self.handle(id)?;
        Ok(self.catalogue.events().for_project(id.as_str()))
    }

    /// Polls until the project is terminal or `timeout` elapses.
    pub fn wait(&self, id: &ProjectId, timeout: Duration) -> Result<ProjectTrace, WorkflowError> {
        let deadline = Instant::now() + timeout;
        loop {
            let snap = self.status(id)?;
            if snap.status.is_terminal() || Instant::now() >= deadline {
                return Ok(snap);
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    pub fn abort_project(&self, id: &ProjectId, reason: &str) -> Result<ProjectTrace, WorkflowError> {
        let handle = self.handle(id)?;
        {
            let mut control = handle.control.lock().expect("control poisoned");
            if control.status.is_terminal() {
                return Err(WorkflowError::AlreadyTerminal {
                    project: id.clone(),
                    status: control.status,
                });
            }
            control.status = ProjectStatus::Aborted;
            control.paused = false;
            control.abort_reason = Some(reason.to_string());
        }
        handle.wake.notify_all();
        self.catalogue.events().append(
            EventKind::AbortRequested,
            "user",
            None,
            json!({ "project": id, "reason": reason }),
        )?;
        // A project that never started has no executor to finalise it.
        let idle = handle.runner.lock().expect("runner poisoned").take();
        if let Some((state, _backend)) = idle {
            let mut trace = ProjectTrace::from_state(&state, ProjectStatus::Aborted);
            trace.cause = Some(reason.to_string());
            handle.publish(trace.clone());
            self.record_finished(&trace)?;
        }
        Ok(handle.snapshot())
    }

    pub(crate) fn record_finished(&self, trace: &ProjectTrace) -> Result<(), WorkflowError> {
        self.catalogue.events().append(
            EventKind::ProjectFinished,
            "engine",
            None,
            json!({
                "project": trace.project_id,
                "status": trace.status,
                "cause": trace.cause,
                "trace": trace,
            }),
        )?;
        Ok(())
    }

    /// Requests user clarification on behalf of `role`.
    ///
    /// Only the Concierge may ask, and only before triage; the project pauses
    /// until every open ticket is answered. Any other request is recorded as a
    /// protocol violation that fails the current iteration.
    pub fn clarify(
        &self,
        id: &ProjectId,
        role: AgentRole,
        question: &str,
    ) -> Result<ClarificationTicket, WorkflowError> {
        let handle = self.handle(id)?;
        let mut control = handle.control.lock().expect("control poisoned");
        if control.status.is_terminal() {
            return Err(WorkflowError::AlreadyTerminal {
                project: id.clone(),
                status: control.status,
            });
        }
        if role != AgentRole::Concierge || control.triaged {
            let (kind, err) = if role != AgentRole::Concierge {
                ("downstream_clarification", WorkflowError::DownstreamClarification(role))
            } else {
                (
                    "clarification_after_triage",
                    WorkflowError::ProtocolViolation {
                        role,
                        detail: "clarification requested after triage".into(),
                    },
                )
            };
            self.catalogue.events().append(
                EventKind::ProtocolViolation,
                role.as_str(),
                None,
                json!({ "project": id, "role": role, "violation": kind, "question": question }),
            )?;
            control.violation = Some(match &err {
                WorkflowError::DownstreamClarification(r) => WorkflowError::DownstreamClarification(*r),
                _ => WorkflowError::ProtocolViolation {
                    role,
                    detail: "clarification requested after triage".into(),
                },
            });
            drop(control);
            handle.wake.notify_all();
            return Err(err);
        }

        let ticket = ClarificationTicket {
            id: {
                let bytes: [u8; 8] = self.rng.lock().expect("rng poisoned").random();
                hex::encode(bytes)
            },
            project_id: id.clone(),
            question: question.to_string(),
            answer: None,
            state: TicketState::Open,
        };
        self.tickets.lock().expect("tickets poisoned").push(ticket.clone());
        control.paused = true;
        let events = self.catalogue.events();
        events.append(
            EventKind::ClarificationRequested,
            role.as_str(),
            None,
            json!({ "project": id, "ticket": ticket.id, "question": question }),
        )?;
        events.append(EventKind::ProjectPaused, "engine", None, json!({ "project": id }))?;
        Ok(ticket)
    }

    pub fn tickets(&self, open_only: bool) -> Vec<ClarificationTicket> {
        self.tickets
            .lock()
            .expect("tickets poisoned")
            .iter()
            .filter(|t| !open_only || t.state == TicketState::Open)
            .cloned()
            .collect()
    }

    pub fn answer_ticket(&self, ticket_id: &str, answer: &str) -> Result<ClarificationTicket, WorkflowError> {
        let (ticket, still_open) = {
            let mut tickets = self.tickets.lock().expect("tickets poisoned");
            let ticket = tickets
                .iter_mut()
                .find(|t| t.id == ticket_id)
                .ok_or_else(|| WorkflowError::UnknownTicket(ticket_id.to_string()))?;
            if ticket.state == TicketState::Answered {
                return Err(WorkflowError::TicketAlreadyAnswered(ticket_id.to_string()));
            }
            ticket.answer = Some(answer.to_string());
            ticket.state = TicketState::Answered;
            let ticket = ticket.clone();
            let still_open = tickets
                .iter()
                .any(|t| t.project_id == ticket.project_id && t.state == TicketState::Open);
            (ticket, still_open)
        };
        let events = self.catalogue.events();
        events.append(
            EventKind::ClarificationAnswered,
            "user",
            None,
            json!({ "project": ticket.project_id, "ticket": ticket.id, "answer": answer }),
        )?;
        if !still_open {
            let handle = self.handle(&ticket.project_id)?;
            let resumed = {
                let mut control = handle.control.lock().expect("control poisoned");
                let was = control.paused;
                control.paused = false;
                was
            };
            handle.wake.notify_all();
            if resumed {
                events.append(
                    EventKind::ProjectResumed,
                    "engine",
                    None,
                    json!({ "project": ticket.project_id }),
                )?;
            }
        }
        Ok(ticket)
    }

    pub(crate) fn answered_clarifications(&self, id: &ProjectId) -> Vec<AnsweredClarification> {
        self.tickets
            .lock()
            .expect("tickets poisoned")
            .iter()
            .filter(|t| &t.project_id == id)
            .filter_map(|t| {
                t.answer.as_ref().map(|a| AnsweredClarification {
                    question: t.question.clone(),
                    answer: a.clone(),
                })
            })
            .collect()
    }
}
