use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};
use compositor::agents::ScenarioScript;
use compositor::metrics::MetricsReport;
use compositor::workflow::{Comparator, ProjectStatus, WorkflowConfig};
use compositor_service::client::{Client, DEFAULT_URL, URL_ENV};
use compositor_service::{router, AppState, BackendConfig, BackendFactory, HttpBackends, ScriptedBackends, ServiceConfig};
use serde_json::{json, Value};

const EXIT_FAILED: u8 = 10;
const EXIT_ABORTED: u8 = 11;
const EXIT_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "compositor", version, about = "Multi-agent document composition service")]
struct Cli {
    /// Service base URL for the client verbs.
    #[arg(long, global = true, env = URL_ENV, default_value = DEFAULT_URL)]
    url: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Copy)]
struct WorkflowArgs {
    #[arg(long)]
    tau: Option<u8>,
    #[arg(long)]
    max_iterations: Option<u32>,
    #[arg(long)]
    token_budget: Option<u64>,
    #[arg(long)]
    context_limit: Option<u64>,
    /// `at_least` (score >= tau) or `above` (score > tau).
    #[arg(long, value_parser = parse_comparator)]
    comparator: Option<Comparator>,
    /// Ask the Concierge for clarification before triage.
    #[arg(long)]
    intake: bool,
}

fn parse_comparator(s: &str) -> Result<Comparator, String> {
    match s {
        "at_least" | ">=" => Ok(Comparator::AtLeast),
        "above" | ">" => Ok(Comparator::Above),
        _ => Err(format!("unknown comparator {s}; use at_least or above")),
    }
}

impl WorkflowArgs {
    fn apply(self, mut c: WorkflowConfig) -> WorkflowConfig {
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if let Some(v) = self.max_iterations {
            c.max_iterations = v;
        }
        if let Some(v) = self.token_budget {
            c.token_budget = v;
        }
        if let Some(v) = self.context_limit {
            c.context_limit = v;
        }
        if let Some(v) = self.comparator {
            c.comparator = v;
        }
        c.concierge_intake |= self.intake;
        c
    }

    fn any(self) -> bool {
        self.tau.is_some()
            || self.max_iterations.is_some()
            || self.token_budget.is_some()
            || self.context_limit.is_some()
            || self.comparator.is_some()
            || self.intake
    }
}

#[derive(Subcommand)]
enum Command {
    /// Add a source document to the catalogue.
    Ingest {
        #[arg(long)]
        title: String,
        /// Read the content from this file ("-" for stdin).
        #[arg(long, conflicts_with = "content")]
        file: Option<PathBuf>,
        #[arg(long)]
        content: Option<String>,
        /// Visibility level, CANDIDATE by default.
        #[arg(long)]
        visibility: Option<String>,
    },
    /// Create a project; returns its id at once.
    Start {
        #[arg(long)]
        remit: String,
        #[arg(long = "source")]
        sources: Vec<String>,
        /// Inline scenario for a scripted service.
        #[arg(long)]
        script: Option<PathBuf>,
        #[command(flatten)]
        workflow: WorkflowArgs,
        /// Poll until the project is terminal and exit with its status.
        #[arg(long)]
        wait: bool,
    },
    /// One project's trace, or every project.
    Status { id: Option<String> },
    /// A project's event records as JSON lines.
    Events { id: String },
    Abort {
        id: String,
        #[arg(long, default_value = "aborted by user")]
        reason: String,
    },
    Promote {
        doc: String,
        #[arg(long)]
        to: String,
    },
    /// Clarification tickets, open ones unless --all.
    ClarifyList {
        #[arg(long)]
        all: bool,
    },
    ClarifyAnswer { ticket: String, answer: String },
    Metrics {
        #[arg(long)]
        json: bool,
    },
    /// Run the REST service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a scenario file locally and print the trace JSON.
    Replay {
        scenario: PathBuf,
        #[command(flatten)]
        workflow: WorkflowArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the event log here.
        #[arg(long)]
        events: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn exit_for(status: ProjectStatus) -> ExitCode {
    match status {
        ProjectStatus::Completed => ExitCode::SUCCESS,
        ProjectStatus::Aborted => ExitCode::from(EXIT_ABORTED),
        ProjectStatus::Failed => ExitCode::from(EXIT_FAILED),
        ProjectStatus::Active => ExitCode::from(EXIT_ERROR),
    }
}

fn print(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let client = Client::new(&cli.url);
    match cli.command {
        Command::Ingest {
            title,
            file,
            content,
            visibility,
        } => {
            let content = match (file, content) {
                (Some(p), _) if p.as_os_str() == "-" => std::io::read_to_string(std::io::stdin())?,
                (Some(p), _) => std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
                (None, Some(c)) => c,
                (None, None) => anyhow::bail!("give --file or --content"),
            };
            print(&client.ingest(&title, &content, visibility.as_deref())?);
        }
        Command::Start {
            remit,
            sources,
            script,
            workflow,
            wait,
        } => {
            let mut body = json!({ "remit": remit, "sources": sources });
            if workflow.any() {
                body["config"] = serde_json::to_value(workflow.apply(WorkflowConfig::default()))?;
            }
            if let Some(p) = script {
                body["script"] = serde_json::to_value(ScenarioScript::from_file(&p)?)?;
            }
            let created = client.start(body)?;
            print(&created);
            if wait {
                let id = created["project_id"].as_str().context("no project_id in reply")?;
                loop {
                    let trace = client.status(Some(id))?;
                    let status: ProjectStatus = serde_json::from_value(trace["status"].clone())?;
                    if status.is_terminal() {
                        print(&trace);
                        return Ok(exit_for(status));
                    }
                    std::thread::sleep(std::time::Duration::from_millis(250));
                }
            }
        }
        Command::Status { id } => print(&client.status(id.as_deref())?),
        Command::Events { id } => {
            for record in client.events(&id)?.as_array().into_iter().flatten() {
                println!("{record}");
            }
        }
        Command::Abort { id, reason } => print(&client.abort(&id, &reason)?),
        Command::Promote { doc, to } => print(&client.promote(&doc, &to.to_uppercase())?),
        Command::ClarifyList { all } => print(&client.clarifications(!all)?),
        Command::ClarifyAnswer { ticket, answer } => print(&client.answer(&ticket, &answer)?),
        Command::Metrics { json } => {
            let value = client.metrics()?;
            if json {
                print(&value);
            } else {
                let report: MetricsReport = serde_json::from_value(value)?;
                print!("{}", report.to_table());
            }
        }
        Command::Serve { config } => serve(ServiceConfig::load(config.as_deref())?)?,
        Command::Replay {
            scenario,
            workflow,
            seed,
            events,
        } => {
            let config = workflow.apply(WorkflowConfig::default());
            let out = compositor_service::replay_file(&scenario, config, seed)?;
            if let Some(p) = events {
                std::fs::write(&p, &out.events_jsonl).with_context(|| format!("writing {}", p.display()))?;
            }
            print!("{}", out.trace_json);
            return Ok(exit_for(out.status()));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let engine = config.build_engine()?;
    let backends: Arc<dyn BackendFactory> = match &config.backend {
        BackendConfig::Scripted { scenario } => Arc::new(ScriptedBackends {
            default: scenario.as_ref().map(ScenarioScript::from_file).transpose()?,
        }),
        BackendConfig::Http(h) => Arc::new(HttpBackends(h.clone())),
    };
    let mut state = AppState::new(engine, backends);
    state.defaults = config.workflow;
    state.metrics_seed = config.metrics_seed;
    let app = router(state);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&config.listen)
            .await
            .with_context(|| format!("binding {}", config.listen))?;
        tracing::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
