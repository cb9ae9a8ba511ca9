//! Document catalogue: persistent store with visibility levels, metadata and
//! provenance.
//!
//! On disk a catalogue is a directory:
//!
//! ```text
//! <root>/
//!   documents/<id>     UTF-8 content, one file per document
//!   index.json         metadata index, one JSON object per document
//!   events.jsonl       append-only event log
//! ```
//!
//! Reads take a shared lock; every write goes through the single write lock so
//! the index file and the event log are updated by one writer at a time.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::json;

use crate::agents::Verdict;
use crate::events::{Clock, EventKind, EventLog, SystemClock};
use crate::provisioning::AgentRole;
use crate::workflow::ProjectId;

const INDEX_FILE: &str = "index.json";
const EVENTS_FILE: &str = "events.jsonl";
const CONTENT_DIR: &str = "documents";

#[derive(Debug, thiserror::Error)]
pub enum CatalogueError {
    #[error("document content is empty")]
    EmptyDocument,
    #[error("unknown document {0}")]
    UnknownDocument(String),
    #[error("{actor} may not {action}")]
    NotPermitted { actor: Actor, action: String },
    #[error("invalid metadata: {0}")]
    InvalidMetadata(String),
    #[error("corrupt catalogue: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = CatalogueError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum VisibilityLevel {
    Public,
    Candidate,
    Draft,
    Feedback,
    Critic,
    Archive,
}

impl VisibilityLevel {
    pub const ALL: [VisibilityLevel; 6] = [
        VisibilityLevel::Public,
        VisibilityLevel::Candidate,
        VisibilityLevel::Draft,
        VisibilityLevel::Feedback,
        VisibilityLevel::Critic,
        VisibilityLevel::Archive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VisibilityLevel::Public => "PUBLIC",
            VisibilityLevel::Candidate => "CANDIDATE",
            VisibilityLevel::Draft => "DRAFT",
            VisibilityLevel::Feedback => "FEEDBACK",
            VisibilityLevel::Critic => "CRITIC",
            VisibilityLevel::Archive => "ARCHIVE",
        }
    }

    /// DRAFT and FEEDBACK listings honour a project scope.
    pub fn is_project_scoped(self) -> bool {
        matches!(self, VisibilityLevel::Draft | VisibilityLevel::Feedback)
    }
}

impl fmt::Display for VisibilityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VisibilityLevel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        VisibilityLevel::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown visibility level '{s}'"))
    }
}

/// 128-bit identifier rendered as 32 lowercase hex characters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct DocumentId(String);

impl DocumentId {
    pub fn random(rng: &mut impl Rng) -> Self {
        let bytes: [u8; 16] = rng.random();
        DocumentId(hex::encode(bytes))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for DocumentId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.len() == 32 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            Ok(DocumentId(s.to_string()))
        } else {
            Err(format!("'{s}' is not a 32-character lowercase hex id"))
        }
    }
}

impl<'de> Deserialize<'de> for DocumentId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for DocumentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Who performs a catalogue operation. The human operator is `User`; the
/// orchestrator itself acts as `Engine`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Actor {
    User,
    Engine,
    Agent(AgentRole),
}

impl Actor {
    pub fn as_str(&self) -> &'static str {
        match self {
            Actor::User => "user",
            Actor::Engine => "engine",
            Actor::Agent(role) => role.as_str(),
        }
    }
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Actor {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "user" => Ok(Actor::User),
            "engine" => Ok(Actor::Engine),
            other => other.parse::<AgentRole>().map(Actor::Agent),
        }
    }
}

impl Serialize for Actor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Actor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentMetadata {
    pub source_type: String,
    pub classification: String,
    pub authorship: String,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub group: String,
    #[serde(default)]
    pub project_id: Option<ProjectId>,
    #[serde(default)]
    pub iteration: Option<u32>,
    #[serde(default)]
    pub verdict: Option<Verdict>,
    #[serde(default)]
    pub critic_score: Option<u8>,
}

/// Caller-supplied metadata for a new document; timestamps are assigned by the
/// catalogue.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewMetadata {
    pub source_type: String,
    pub classification: String,
    pub authorship: String,
    pub keywords: Vec<String>,
    pub group: String,
    pub project_id: Option<ProjectId>,
    pub iteration: Option<u32>,
}

/// Partial update merged by [`Catalogue::enrich_metadata`]. Keywords are
/// unioned with the existing set; every other present field replaces.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetadataUpdate {
    pub source_type: Option<String>,
    pub classification: Option<String>,
    pub authorship: Option<String>,
    pub keywords: Vec<String>,
    pub group: Option<String>,
}

impl MetadataUpdate {
    pub fn is_empty(&self) -> bool {
        self == &MetadataUpdate::default()
    }
}

/// Conjunctive filter: equality on each present scalar, containment for
/// every listed keyword.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetadataFilter {
    pub source_type: Option<String>,
    pub classification: Option<String>,
    pub authorship: Option<String>,
    pub group: Option<String>,
    pub project_id: Option<ProjectId>,
    pub iteration: Option<u32>,
    pub verdict: Option<Verdict>,
    pub critic_score: Option<u8>,
    pub keywords: Vec<String>,
}

impl MetadataFilter {
    pub fn matches(&self, m: &DocumentMetadata) -> bool {
        fn eq<T: PartialEq>(want: &Option<T>, have: &T) -> bool {
            want.as_ref().is_none_or(|w| w == have)
        }
        fn eq_opt<T: PartialEq>(want: &Option<T>, have: &Option<T>) -> bool {
            want.is_none() || want == have
        }
        eq(&self.source_type, &m.source_type)
            && eq(&self.classification, &m.classification)
            && eq(&self.authorship, &m.authorship)
            && eq(&self.group, &m.group)
            && eq_opt(&self.project_id, &m.project_id)
            && eq_opt(&self.iteration, &m.iteration)
            && eq_opt(&self.verdict, &m.verdict)
            && eq_opt(&self.critic_score, &m.critic_score)
            && self.keywords.iter().all(|k| m.keywords.contains(k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: DocumentId,
    pub title: String,
    pub content: String,
    pub visibility: VisibilityLevel,
    pub metadata: DocumentMetadata,
}

/// A document without its content body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentSummary {
    pub id: DocumentId,
    pub title: String,
    pub visibility: VisibilityLevel,
    pub metadata: DocumentMetadata,
}

impl From<&Document> for DocumentSummary {
    fn from(d: &Document) -> Self {
        DocumentSummary {
            id: d.id.clone(),
            title: d.title.clone(),
            visibility: d.visibility,
            metadata: d.metadata.clone(),
        }
    }
}

pub struct CatalogueOptions {
    pub clock: Arc<dyn Clock>,
    /// Seed for document ids; `None` draws from the OS.
    pub seed: Option<u64>,
}

impl Default for CatalogueOptions {
    fn default() -> Self {
        Self {
            clock: Arc::new(SystemClock),
            seed: None,
        }
    }
}

#[derive(Default)]
struct Store {
    docs: Vec<Document>,
    index: HashMap<DocumentId, usize>,
}

impl Store {
    fn get(&self, id: &DocumentId) -> Option<&Document> {
        self.index.get(id).map(|&i| &self.docs[i])
    }

    fn get_mut(&mut self, id: &DocumentId) -> Option<&mut Document> {
        self.index.get(id).map(|&i| &mut self.docs[i])
    }

    fn insert(&mut self, doc: Document) {
        self.index.insert(doc.id.clone(), self.docs.len());
        self.docs.push(doc);
    }
}

pub struct Catalogue {
    root: Option<PathBuf>,
    store: RwLock<Store>,
    events: Arc<EventLog>,
    clock: Arc<dyn Clock>,
    rng: Mutex<ChaCha8Rng>,
}

impl fmt::Debug for Catalogue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Catalogue")
            .field("root", &self.root)
            .field("documents", &self.len())
            .finish()
    }
}

fn seeded(seed: Option<u64>) -> ChaCha8Rng {
    match seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s),
        None => ChaCha8Rng::from_rng(&mut rand::rng()),
    }
}

impl Catalogue {
    pub fn in_memory(options: CatalogueOptions) -> Self {
        Self {
            root: None,
            store: RwLock::new(Store::default()),
            events: Arc::new(EventLog::in_memory(options.clock.clone())),
            clock: options.clock,
            rng: Mutex::new(seeded(options.seed)),
        }
    }

    /// Opens the catalogue directory at `root`, creating it if absent.
    pub fn open(root: impl AsRef<Path>, options: CatalogueOptions) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join(CONTENT_DIR))?;
        let mut store = Store::default();
        let index_path = root.join(INDEX_FILE);
        if index_path.exists() {
            let raw = fs::read_to_string(&index_path)?;
            let entries: Vec<DocumentSummary> = serde_json::from_str(&raw)
                .map_err(|e| CatalogueError::Corrupt(format!("{}: {e}", index_path.display())))?;
            for entry in entries {
                let content = fs::read_to_string(root.join(CONTENT_DIR).join(entry.id.as_str()))
                    .map_err(|e| CatalogueError::Corrupt(format!("content of {}: {e}", entry.id)))?;
                store.insert(Document {
                    id: entry.id,
                    title: entry.title,
                    content,
                    visibility: entry.visibility,
                    metadata: entry.metadata,
                });
            }
        }
        let events = EventLog::open(root.join(EVENTS_FILE), options.clock.clone())?;
        Ok(Self {
            root: Some(root),
            store: RwLock::new(store),
            events: Arc::new(events),
            clock: options.clock,
            rng: Mutex::new(seeded(options.seed)),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn events(&self) -> &Arc<EventLog> {
        &self.events
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn len(&self) -> usize {
        self.store.read().expect("catalogue poisoned").docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn create_document(
        &self,
        title: &str,
        content: &str,
        meta: NewMetadata,
        visibility: VisibilityLevel,
        actor: Actor,
    ) -> Result<DocumentId> {
        if content.trim().is_empty() {
            return Err(CatalogueError::EmptyDocument);
        }
        if meta.project_id.is_some() != meta.iteration.is_some() {
            return Err(CatalogueError::InvalidMetadata(
                "iteration must be present exactly when project_id is".into(),
            ));
        }
        if visibility == VisibilityLevel::Critic && !may_write_critic(actor) {
            return Err(CatalogueError::NotPermitted {
                actor,
                action: "create CRITIC documents".into(),
            });
        }

        let mut store = self.store.write().expect("catalogue poisoned");
        let id = {
            let mut rng = self.rng.lock().expect("rng poisoned");
            loop {
                let id = DocumentId::random(&mut *rng);
                if store.get(&id).is_none() {
                    break id;
                }
            }
        };
        let now = self.clock.now();
        let project = meta.project_id.clone();
        let doc = Document {
            id: id.clone(),
            title: title.to_string(),
            content: content.to_string(),
            visibility,
            metadata: DocumentMetadata {
                source_type: meta.source_type,
                classification: meta.classification,
                authorship: meta.authorship,
                created_at: now,
                updated_at: now,
                keywords: dedup(meta.keywords),
                group: meta.group,
                project_id: meta.project_id,
                iteration: meta.iteration,
                verdict: None,
                critic_score: None,
            },
        };
        if let Some(root) = &self.root {
            write_atomic(&root.join(CONTENT_DIR).join(id.as_str()), doc.content.as_bytes())?;
        }
        store.insert(doc);
        self.persist_index(&store)?;
        let mut detail = json!({ "title": title, "visibility": visibility });
        if let Some(p) = project {
            detail["project"] = json!(p);
        }
        self.events
            .append(EventKind::DocumentCreated, actor.as_str(), Some(id.to_string()), detail)?;
        Ok(id)
    }

    /// Summaries of every document at `visibility`. DRAFT and FEEDBACK
    /// listings are narrowed to `scope` when one is given.
    pub fn list_for(
        &self,
        visibility: VisibilityLevel,
        scope: Option<&ProjectId>,
    ) -> Vec<DocumentSummary> {
        let store = self.store.read().expect("catalogue poisoned");
        store
            .docs
            .iter()
            .filter(|d| d.visibility == visibility)
            .filter(|d| match scope {
                Some(p) if visibility.is_project_scoped() => d.metadata.project_id.as_ref() == Some(p),
                _ => true,
            })
            .map(DocumentSummary::from)
            .collect()
    }

    pub fn get(&self, id: &DocumentId) -> Result<Document> {
        let store = self.store.read().expect("catalogue poisoned");
        store
            .get(id)
            .cloned()
            .ok_or_else(|| CatalogueError::UnknownDocument(id.to_string()))
    }

    pub fn summary(&self, id: &DocumentId) -> Result<DocumentSummary> {
        let store = self.store.read().expect("catalogue poisoned");
        store
            .get(id)
            .map(DocumentSummary::from)
            .ok_or_else(|| CatalogueError::UnknownDocument(id.to_string()))
    }

    pub fn all(&self) -> Vec<DocumentSummary> {
        let store = self.store.read().expect("catalogue poisoned");
        store.docs.iter().map(DocumentSummary::from).collect()
    }

    /// Moves a document to another visibility level.
    ///
    /// Promotions to CANDIDATE or PUBLIC are reserved for the user; archival is
    /// open to the user and the Curator. Re-promoting to the current level
    /// returns the document untouched and records nothing.
    pub fn promote(&self, id: &DocumentId, to: VisibilityLevel, actor: Actor) -> Result<Document> {
        let mut store = self.store.write().expect("catalogue poisoned");
        let current = store
            .get(id)
            .ok_or_else(|| CatalogueError::UnknownDocument(id.to_string()))?
            .visibility;
        if !may_promote(actor, to) {
            return Err(CatalogueError::NotPermitted {
                actor,
                action: format!("promote documents to {to}"),
            });
        }
        if current == to {
            return Ok(store.get(id).cloned().expect("checked above"));
        }
        let now = self.clock.now();
        let doc = store.get_mut(id).expect("checked above");
        doc.visibility = to;
        doc.metadata.updated_at = now;
        let doc = doc.clone();
        self.persist_index(&store)?;
        let mut detail = json!({ "from": current, "to": to });
        if let Some(p) = &doc.metadata.project_id {
            detail["project"] = json!(p);
        }
        self.events
            .append(EventKind::DocumentPromoted, actor.as_str(), Some(id.to_string()), detail)?;
        Ok(doc)
    }

    /// Metadata records matching `filter`. Content bodies are never touched.
    pub fn query_metadata(&self, filter: &MetadataFilter) -> Vec<DocumentSummary> {
        let store = self.store.read().expect("catalogue poisoned");
        store
            .docs
            .iter()
            .filter(|d| filter.matches(&d.metadata))
            .map(DocumentSummary::from)
            .collect()
    }

    pub fn enrich_metadata(
        &self,
        id: &DocumentId,
        updates: &MetadataUpdate,
        actor: Actor,
    ) -> Result<Document> {
        let mut store = self.store.write().expect("catalogue poisoned");
        if store.get(id).is_none() {
            return Err(CatalogueError::UnknownDocument(id.to_string()));
        }
        if !matches!(actor, Actor::User | Actor::Agent(AgentRole::Curator)) {
            return Err(CatalogueError::NotPermitted {
                actor,
                action: "enrich metadata".into(),
            });
        }
        let now = self.clock.now();
        let doc = store.get_mut(id).expect("checked above");
        let m = &mut doc.metadata;
        if let Some(v) = &updates.source_type {
            m.source_type = v.clone();
        }
        if let Some(v) = &updates.classification {
            m.classification = v.clone();
        }
        if let Some(v) = &updates.authorship {
            m.authorship = v.clone();
        }
        if let Some(v) = &updates.group {
            m.group = v.clone();
        }
        for k in &updates.keywords {
            if !m.keywords.contains(k) {
                m.keywords.push(k.clone());
            }
        }
        m.updated_at = now;
        let doc = doc.clone();
        self.persist_index(&store)?;
        let mut detail = json!({ "updates": updates });
        if let Some(p) = &doc.metadata.project_id {
            detail["project"] = json!(p);
        }
        self.events
            .append(EventKind::MetadataEnriched, actor.as_str(), Some(id.to_string()), detail)?;
        Ok(doc)
    }

    /// Stamps a workflow draft with its verdict and, once scored, its Critic
    /// score.
    pub fn record_assessment(
        &self,
        id: &DocumentId,
        verdict: Option<Verdict>,
        critic_score: Option<u8>,
    ) -> Result<()> {
        let mut store = self.store.write().expect("catalogue poisoned");
        let now = self.clock.now();
        let doc = store
            .get_mut(id)
            .ok_or_else(|| CatalogueError::UnknownDocument(id.to_string()))?;
        if verdict.is_some() {
            doc.metadata.verdict = verdict;
        }
        if critic_score.is_some() {
            doc.metadata.critic_score = critic_score;
        }
        doc.metadata.updated_at = now;
        let project = doc.metadata.project_id.clone();
        self.persist_index(&store)?;
        let mut detail = json!({ "verdict": verdict, "critic_score": critic_score });
        if let Some(p) = project {
            detail["project"] = json!(p);
        }
        self.events.append(
            EventKind::AssessmentRecorded,
            Actor::Engine.as_str(),
            Some(id.to_string()),
            detail,
        )?;
        Ok(())
    }

    fn persist_index(&self, store: &Store) -> Result<()> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        let mut out = String::from("[\n");
        for (i, d) in store.docs.iter().enumerate() {
            if i > 0 {
                out.push_str(",\n");
            }
            let line = serde_json::to_string(&DocumentSummary::from(d))
                .map_err(|e| CatalogueError::Corrupt(e.to_string()))?;
            out.push_str(&line);
        }
        out.push_str("\n]\n");
        write_atomic(&root.join(INDEX_FILE), out.as_bytes())?;
        Ok(())
    }
}

fn may_promote(actor: Actor, to: VisibilityLevel) -> bool {
    match actor {
        Actor::User => true,
        Actor::Agent(AgentRole::Curator) => to == VisibilityLevel::Archive,
        _ => false,
    }
}

fn may_write_critic(actor: Actor) -> bool {
    matches!(
        actor,
        Actor::User | Actor::Engine | Actor::Agent(AgentRole::Concierge | AgentRole::Commutator)
    )
}

fn dedup(keywords: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    keywords.into_iter().filter(|k| seen.insert(k.clone())).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
