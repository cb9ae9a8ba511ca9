//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{call, engine, gated_app, runtime, scenario, script_json, source};
use compositor::agents::{AgentAction, Gate, Message, MessageKind, ScenarioScript, ScriptedBackend, Verdict};
use compositor::compression::{
    estimate_tokens, feedback_tag, maybe_compress, CharEstimator, CompressionContext, CompressionOutcome,
    CompressionPolicy,
};
use compositor::events::{parse_jsonl, EventKind};
use compositor::metrics::{improvement_stats, verdict_distribution, ScoreTrajectory};
use compositor::provisioning::{AgentRole, Tool, ToolError};
use compositor::workflow::{FeedbackEntry, GraphState, ProjectStatus, Route, WorkflowConfig};
use compositor_service::replay_file;
use rand::{Rng, SeedableRng};
use serde_json::json;

use Verdict::{Fabricated as F, Substantiated as S};

type Outcome = Result<(), String>;
type Criterion = (&'static str, Box<dyn FnOnce() -> Outcome>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(start: Instant, limit: Duration) -> Outcome {
    let took = start.elapsed();
    ensure!(took < limit, "took {took:?}, limit {limit:?}");
    Ok(())
}

// ---- compartmentalisation ----

/// The role/access matrix, written out independently of the grant table.
fn granted(role: AgentRole, tool: Tool) -> bool {
    use Tool::*;
    let listings = [
        PublicDocumentList,
        CandidateDocumentList,
        DraftDocumentList,
        FeedbackDocumentList,
        CriticDocumentList,
        ArchiveDocumentList,
    ];
    let set: Vec<Tool> = match role {
        AgentRole::Concierge => [&listings[..], &[ReadDocument, QueryMetadata, RequestClarification]].concat(),
        AgentRole::Commutator => [&listings[..], &[ReadDocument, QueryMetadata, RouteProject]].concat(),
        AgentRole::Curator => [&listings[..], &[ReadDocument, QueryMetadata, UpdateMetadata]].concat(),
        AgentRole::Composer => vec![
            PublicDocumentList,
            CandidateDocumentList,
            DraftDocumentList,
            FeedbackDocumentList,
            ReadDocument,
            SubmitDraft,
        ],
        AgentRole::Corroborator => vec![
            PublicDocumentList,
            CandidateDocumentList,
            DraftDocumentList,
            ReadDocument,
            SubmitVerdict,
        ],
        AgentRole::Critic => vec![
            PublicDocumentList,
            DraftDocumentList,
            FeedbackDocumentList,
            CriticDocumentList,
            ReadDocument,
            SubmitScore,
        ],
        AgentRole::Compressor => vec![ReadHistory, WriteHistory],
    };
    set.contains(&tool)
}

fn compartmentalisation() -> Outcome {
    let start = Instant::now();
    let engine = engine(1);
    // A PUBLIC document, so every role holding read_document may read it.
    let doc = source(&engine);
    engine
        .catalogue()
        .promote(&doc, compositor::VisibilityLevel::Public, compositor::catalogue::Actor::User)
        .map_err(|e| e.to_string())?;
    source(&engine);
    let gateway = engine.gateway();
    let events = engine.catalogue().events();
    let mut checked = 0;
    for role in AgentRole::ALL {
        for tool in Tool::ALL {
            let args = match tool {
                Tool::ReadDocument => json!({ "id": doc }),
                Tool::UpdateMetadata => json!({ "doc_id": doc, "updates": { "keywords": ["k"] } }),
                _ => json!({}),
            };
            let before = events.len();
            let result = gateway.invoke_tool(role, tool.name(), &args);
            let new = &events.records()[before..];
            match (granted(role, tool), result) {
                (true, Ok(_)) => {}
                (false, Err(ToolError::CapabilityDenied(r))) => {
                    ensure!(r.role == role && r.tool == tool.name(), "{role} {tool}: wrong refusal {r:?}");
                    ensure!(
                        new.iter().all(|e| !e.kind.touches_catalogue()),
                        "{role} {tool}: denied call produced catalogue events"
                    );
                }
                (want, got) => return Err(format!("{role} {tool}: expected granted={want}, got {got:?}")),
            }
            checked += 1;
        }
    }
    ensure!(checked == 7 * 16, "checked {checked} pairs");

    let before = events.len();
    let denied = gateway.invoke_tool(AgentRole::Critic, "candidate_document_list", &json!({}));
    ensure!(
        matches!(denied, Err(ToolError::CapabilityDenied(_))),
        "critic candidate listing: {denied:?}"
    );
    let catalogue_events = events.records()[before..].iter().filter(|e| e.kind.touches_catalogue()).count();
    ensure!(catalogue_events == 0, "{catalogue_events} catalogue events after denial");
    within(start, Duration::from_secs(1))
}

// ---- refusal scenario ----

fn table1(tau: u8, iterations: u32, final_score: u8) -> Outcome {
    let start = Instant::now();
    let config = WorkflowConfig::default().with_tau(tau);
    let out = replay_file(scenario("table1.json"), config, 42).map_err(|e| e.to_string())?;
    let trace = &out.trace;
    ensure!(trace.status == ProjectStatus::Completed, "status {:?}", trace.status);
    ensure!(trace.iteration == iterations, "completed at iteration {}", trace.iteration);
    let full = [
        (1, F, None),
        (2, F, None),
        (3, S, Some(28)),
        (4, S, Some(85)),
        (5, S, Some(92)),
    ];
    let want = &full[..iterations as usize];
    ensure!(trace.rows() == want, "rows {:?}", trace.rows());
    ensure!(
        trace.score_trace.last().map(|s| s.score) == Some(final_score),
        "final score {:?}",
        trace.score_trace.last()
    );
    let events = parse_jsonl(&out.events_jsonl).map_err(|e| e.to_string())?;
    let early_critic = events
        .iter()
        .filter(|e| e.kind == EventKind::Observation && e.actor == "critic")
        .any(|e| e.detail["iteration"].as_u64().unwrap_or(0) <= 2);
    ensure!(!early_critic, "critic consulted on iteration 1 or 2");
    within(start, Duration::from_secs(1))
}

// ---- convergence ----

fn convergence() -> Outcome {
    let start = Instant::now();
    let grid: [(u8, u8, u8); 20] = [
        (40, 15, 85),
        (28, 19, 85),
        (50, 10, 90),
        (84, 1, 85),
        (85, 5, 85),
        (0, 10, 100),
        (10, 25, 60),
        (60, 5, 80),
        (30, 20, 85),
        (70, 3, 85),
        (45, 9, 90),
        (20, 8, 75),
        (99, 1, 100),
        (5, 12, 65),
        (33, 11, 88),
        (50, 0, 50),
        (12, 7, 54),
        (64, 6, 94),
        (0, 17, 85),
        (79, 2, 85),
    ];
    let mut ties = 0;
    for (i, &(s0, d, tau)) in grid.iter().enumerate() {
        // Oracle: walk the sequence until the first score >= tau.
        let (s0w, dw, tauw) = (u32::from(s0), u32::from(d), u32::from(tau));
        let mut k = 0u32;
        while s0w + k * dw < tauw {
            k += 1;
        }
        if s0w + k * dw == tauw {
            ties += 1;
        }
        let rows: Vec<(Verdict, Option<u8>)> =
            (0..=k).map(|j| (S, Some((s0w + j * dw).min(100) as u8))).collect();
        let engine = engine(100 + i as u64);
        let src = source(&engine);
        let config = WorkflowConfig {
            max_iterations: 20,
            ..WorkflowConfig::default().with_tau(tau)
        };
        let backend = ScriptedBackend::new(ScenarioScript::assessment_run(format!("grid-{i}"), &rows));
        let id = engine
            .create_project("review", &[src], config, Box::new(backend))
            .map_err(|e| e.to_string())?;
        let status = engine.run_project(&id).map_err(|e| e.to_string())?;
        let trace = engine.status(&id).map_err(|e| e.to_string())?;
        ensure!(status == ProjectStatus::Completed, "({s0},{d},{tau}): {status:?}");
        ensure!(
            trace.iteration == k + 1,
            "({s0},{d},{tau}): completed at {} not {}",
            trace.iteration,
            k + 1
        );
    }
    ensure!(ties >= 5, "grid has only {ties} ties");
    within(start, Duration::from_secs(5))
}

// ---- compression ----

fn padded_state(tokens: u64, limit: u64) -> GraphState {
    let config = WorkflowConfig {
        context_limit: limit,
        ..WorkflowConfig::default()
    };
    let mut state = GraphState::new(
        "until-pants-trunks-unsolved".parse().unwrap(),
        "remit".into(),
        vec![],
        config,
    );
    state.feedback_log = vec![
        FeedbackEntry {
            iteration: 1,
            source: AgentRole::Corroborator,
            text: "unsupported claim".into(),
        },
        FeedbackEntry {
            iteration: 2,
            source: AgentRole::Critic,
            text: "extraction, not curation".into(),
        },
    ];
    let mut history = vec![
        Message::new(MessageKind::Feedback, 1, format!("{} unsupported claim", feedback_tag(1))),
        Message::new(MessageKind::Feedback, 2, format!("{} extraction, not curation", feedback_tag(2))),
    ];
    let est = CharEstimator::default();
    let used = estimate_tokens(&history, &est);
    history.push(Message::new(MessageKind::Draft, 2, "x".repeat(((tokens - used) * 4) as usize)));
    state.histories.insert(AgentRole::Composer, history);
    state
}

fn compression() -> Outcome {
    let limit = 10_000;
    let engine = engine(3);
    let est = CharEstimator::default();
    let policy = CompressionPolicy::default();
    let ctx = CompressionContext {
        gateway: engine.gateway(),
        estimator: &est,
        policy: &policy,
    };
    for (tokens, pct) in [(7_490u64, "74.9"), (7_500, "75.0"), (7_510, "75.1")] {
        let mut state = padded_state(tokens, limit);
        let history = state.history(AgentRole::Composer).to_vec();
        ensure!(estimate_tokens(&history, &est) == tokens, "padding missed {tokens}");
        let should = tokens as f64 / limit as f64 >= 0.75;
        let mut backend = ScriptedBackend::new(ScenarioScript::new("c").with_queue(
            AgentRole::Compressor,
            [AgentAction::CompressionSummary {
                summary: "Bibliography drafts so far.".into(),
            }],
        ));
        match maybe_compress(&mut state, &mut backend, &ctx).map_err(|e| e.to_string())? {
            CompressionOutcome::Below { .. } => {
                ensure!(!should, "{pct}% did not compress");
                ensure!(state.history(AgentRole::Composer) == history, "{pct}% changed history");
            }
            CompressionOutcome::Compressed { before, after, .. } => {
                ensure!(should, "{pct}% compressed");
                ensure!(after < before, "{pct}%: {after} not below {before}");
                let text: String = state.history(AgentRole::Composer).iter().map(|m| m.text.as_str()).collect();
                for n in 1..=2 {
                    ensure!(text.contains(&feedback_tag(n)), "{pct}%: lost {}", feedback_tag(n));
                }
            }
        }
    }
    Ok(())
}

// ---- metrics ----

fn brute_force(trajectories: &[ScoreTrajectory]) -> Option<(f64, Option<f64>, f64, f64)> {
    let (mut n, mut abs, mut per, mut its, mut rel, mut rel_n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for t in trajectories {
        if t.scores.len() < 2 {
            continue;
        }
        let first = t.scores[0] as f64;
        let last = *t.scores.last().unwrap() as f64;
        n += 1.0;
        abs += last - first;
        per += (last - first) / (t.scores.len() - 1) as f64;
        its += t.drafts as f64;
        if first > 0.0 {
            rel += 100.0 * (last - first) / first;
            rel_n += 1.0;
        }
    }
    (n > 0.0).then(|| (abs / n, (rel_n > 0.0).then(|| rel / rel_n), per / n, its / n))
}

fn metrics_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    for case in 0..100 {
        let corpus: Vec<ScoreTrajectory> = (0..rng.random_range(1..=20))
            .map(|_| {
                let scores: Vec<u8> = (0..rng.random_range(0..=8)).map(|_| rng.random_range(0..=100)).collect();
                let drafts = scores.len() as u32 + rng.random_range(0..3);
                ScoreTrajectory::new(scores, drafts)
            })
            .collect();
        let seed = rng.random::<u64>();
        match (improvement_stats(&corpus, seed), brute_force(&corpus)) {
            (Err(_), None) => {}
            (Ok(stats), Some((abs, rel, per, its))) => {
                ensure!(close(stats.mean_absolute, abs), "case {case}: absolute");
                ensure!(close(stats.mean_per_iteration, per), "case {case}: per-iteration");
                ensure!(close(stats.mean_iterations, its), "case {case}: iterations");
                match (stats.mean_relative, rel) {
                    (Some(a), Some(b)) => ensure!(close(a, b), "case {case}: relative"),
                    (None, None) => {}
                    other => return Err(format!("case {case}: relative {other:?}")),
                }
                for (ci, point) in [
                    (stats.ci95_absolute, stats.mean_absolute),
                    (stats.ci95_per_iteration, stats.mean_per_iteration),
                    (stats.ci95_iterations, stats.mean_iterations),
                ] {
                    ensure!(ci[0] <= point && point <= ci[1], "case {case}: CI {ci:?} misses {point}");
                }
                let again = improvement_stats(&corpus, seed).map_err(|e| e.to_string())?;
                ensure!(again == stats, "case {case}: bootstrap not reproducible");
            }
            (got, want) => return Err(format!("case {case}: library {got:?} vs oracle {want:?}")),
        }
    }

    let log: String = (0..733)
        .map(|i| {
            let verdict = if i < 352 { "SUBSTANTIATED" } else { "FABRICATED" };
            format!(
                "{}\n",
                json!({
                    "seq": i + 1,
                    "timestamp": "2025-01-01T00:00:00Z",
                    "kind": "verdict",
                    "actor": "corroborator",
                    "doc_id": null,
                    "detail": { "verdict": verdict },
                })
            )
        })
        .collect();
    let records = parse_jsonl(&log).map_err(|e| e.to_string())?;
    let d = verdict_distribution(&records).map_err(|e| e.to_string())?;
    ensure!(
        d.substantiated_pct == 48.0 && d.fabricated_pct == 52.0,
        "split {}/{}",
        d.substantiated_pct,
        d.fabricated_pct
    );
    within(start, Duration::from_secs(30))
}

// ---- determinism ----

fn determinism() -> Outcome {
    for name in ["table1.json", "improving.json"] {
        let config = WorkflowConfig::default().with_tau(90);
        let a = replay_file(scenario(name), config, 7).map_err(|e| e.to_string())?;
        let b = replay_file(scenario(name), config, 7).map_err(|e| e.to_string())?;
        ensure!(a.events_jsonl == b.events_jsonl, "{name}: event logs differ");
        ensure!(a.trace_json == b.trace_json, "{name}: traces differ");
        ensure!(!a.events_jsonl.is_empty(), "{name}: empty log");
    }
    Ok(())
}

// ---- feedback ----

fn feedback_discipline() -> Outcome {
    let long: Vec<String> = (0..1001).map(|i| format!("w{i}")).collect();
    let engine = common::engine(5);
    let src = source(&engine);
    let script = ScenarioScript::new("long")
        .with_queue(AgentRole::Commutator, [AgentAction::route(Route::Compose)])
        .with_queue(
            AgentRole::Composer,
            [AgentAction::draft("d1", "first"), AgentAction::draft("d2", "second")],
        )
        .with_queue(AgentRole::Corroborator, [AgentAction::verdict(S, ""), AgentAction::verdict(S, "")])
        .with_queue(
            AgentRole::Critic,
            [AgentAction::score(40, long.join(" ")), AgentAction::score(90, "fine")],
        );
    let id = engine
        .create_project("review", &[src], WorkflowConfig::default(), Box::new(ScriptedBackend::new(script)))
        .map_err(|e| e.to_string())?;
    engine.run_project(&id).map_err(|e| e.to_string())?;
    let trace = engine.status(&id).map_err(|e| e.to_string())?;
    let stored = &trace.feedback_log.first().ok_or("no feedback stored")?.text;
    let words: Vec<&str> = stored.split_whitespace().collect();
    ensure!(words.len() == 1001, "{} tokens stored", words.len());
    ensure!(words[..1000] == long[..1000], "kept words differ");
    ensure!(words[1000] == "[truncated]", "marker {}", words[1000]);
    let docs = engine.catalogue().list_for(compositor::VisibilityLevel::Feedback, Some(&id));
    let doc = engine.catalogue().get(&docs[0].id).map_err(|e| e.to_string())?;
    ensure!(doc.content == *stored, "FEEDBACK document holds unclamped text");

    // Composer sees every earlier marker, with and without compression.
    let rows = [(F, None), (F, None), (S, Some(30)), (S, Some(50)), (S, Some(90))];
    for context_limit in [200_000, 40] {
        let engine = common::engine(6);
        let src = source(&engine);
        let script = ScenarioScript::assessment_run("markers", &rows).with_queue(
            AgentRole::Compressor,
            (0..10).map(|i| AgentAction::CompressionSummary {
                summary: format!("summary {i}"),
            }),
        );
        let backend = ScriptedBackend::new(script);
        let seen = backend.observations();
        let config = WorkflowConfig {
            context_limit,
            ..WorkflowConfig::default()
        };
        let id = engine
            .create_project("review", &[src], config, Box::new(backend))
            .map_err(|e| e.to_string())?;
        engine.run_project(&id).map_err(|e| e.to_string())?;
        let seen = seen.lock().unwrap();
        let composer: Vec<_> = seen.iter().filter(|(r, _)| *r == AgentRole::Composer).collect();
        ensure!(composer.len() == 5, "{} composer turns", composer.len());
        for (k, (_, obs)) in composer.iter().enumerate() {
            let text = obs.visible_text();
            for n in 1..=k {
                let marker = if n <= 2 { format!("note-{n}-verdict") } else { format!("note-{n}-critic") };
                ensure!(
                    text.contains(&marker) || text.contains(&feedback_tag(n)),
                    "limit {context_limit}: iteration {} missing feedback {n}",
                    k + 1
                );
            }
        }
    }
    Ok(())
}

// ---- protocol ----

fn protocol() -> Outcome {
    let engine = engine(9);
    let src = source(&engine);
    let script = ScenarioScript::new("ask")
        .with_queue(AgentRole::Commutator, [AgentAction::route(Route::Compose)])
        .with_queue(
            AgentRole::Composer,
            [AgentAction::ClarificationRequest {
                question: "what is wanted?".into(),
            }],
        );
    let id = engine
        .create_project("review", &[src], WorkflowConfig::default(), Box::new(ScriptedBackend::new(script)))
        .map_err(|e| e.to_string())?;
    let status = engine.run_project(&id).map_err(|e| e.to_string())?;
    ensure!(status == ProjectStatus::Failed, "status {status:?}");
    let events = engine.project_events(&id).map_err(|e| e.to_string())?;
    ensure!(
        events
            .iter()
            .any(|e| e.kind == EventKind::ProtocolViolation && e.detail["violation"] == "downstream_clarification"),
        "no downstream_clarification violation"
    );
    ensure!(
        events
            .iter()
            .any(|e| e.kind == EventKind::IterationOutcome && e.detail["outcome"] == "failed"),
        "iteration not failed"
    );
    ensure!(engine.tickets(false).is_empty(), "a ticket was opened");

    // POST /projects answers while the backend is still held shut.
    let engine = common::engine(10);
    let src = source(&engine);
    let gate = Gate::new();
    let app = gated_app(engine.clone(), gate.clone());
    let script = ScenarioScript::assessment_run("gated", &[(S, Some(90))]);
    let rt = runtime();
    let (code, body) = rt.block_on(call(
        &app,
        "POST",
        "/projects",
        Some(json!({ "remit": "review", "sources": [src], "script": script_json(&script) })),
    ));
    ensure!(code.as_u16() == 202, "POST /projects gave {code}");
    ensure!(!gate.is_released(), "gate released before the reply");
    let id: compositor::ProjectId = serde_json::from_value(body["project_id"].clone()).map_err(|e| e.to_string())?;
    let trace = engine.status(&id).map_err(|e| e.to_string())?;
    ensure!(trace.status == ProjectStatus::Active, "status {:?} before release", trace.status);
    ensure!(trace.verdict_trace.is_empty(), "work done before release");
    gate.release();
    let done = engine.wait(&id, Duration::from_secs(10)).map_err(|e| e.to_string())?;
    ensure!(done.status == ProjectStatus::Completed, "after release {:?}", done.status);
    Ok(())
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("compartmentalisation matrix", Box::new(compartmentalisation)),
        ("refusal scenario replay, tau 90", Box::new(|| table1(90, 5, 92))),
        ("refusal scenario replay, tau 85", Box::new(|| table1(85, 4, 85))),
        ("convergence grid", Box::new(convergence)),
        ("compression trigger", Box::new(compression)),
        ("metrics oracle", Box::new(metrics_oracle)),
        ("replay determinism", Box::new(determinism)),
        ("feedback discipline", Box::new(feedback_discipline)),
        ("clarification protocol and non-blocking start", Box::new(protocol)),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let ms = start.elapsed().as_millis();
        match outcome {
            Ok(()) => println!("PASS {name} ({ms} ms)"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({ms} ms): {why}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
