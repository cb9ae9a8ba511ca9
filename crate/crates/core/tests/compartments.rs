mod common;

use std::collections::BTreeSet;

use common::{engine, source};
use compositor::catalogue::{Actor, NewMetadata, VisibilityLevel};
use compositor::events::EventKind;
use compositor::provisioning::{AgentRole, GrantTable, Tool, ToolError, ToolResult};
use serde_json::json;

fn expected(role: AgentRole) -> BTreeSet<&'static str> {
    let listings = [
        "public_document_list",
        "candidate_document_list",
        "draft_document_list",
        "feedback_document_list",
        "critic_document_list",
        "archive_document_list",
    ];
    let mut set: BTreeSet<&str> = BTreeSet::new();
    match role {
        AgentRole::Concierge => {
            set.extend(listings);
            set.extend(["read_document", "query_metadata", "request_clarification"]);
        }
        AgentRole::Commutator => {
            set.extend(listings);
            set.extend(["read_document", "query_metadata", "route_project"]);
        }
        AgentRole::Curator => {
            set.extend(listings);
            set.extend(["read_document", "query_metadata", "update_metadata"]);
        }
        AgentRole::Composer => set.extend([
            "public_document_list",
            "candidate_document_list",
            "draft_document_list",
            "feedback_document_list",
            "read_document",
            "submit_draft",
        ]),
        AgentRole::Corroborator => set.extend([
            "public_document_list",
            "candidate_document_list",
            "draft_document_list",
            "read_document",
            "submit_verdict",
        ]),
        AgentRole::Critic => set.extend([
            "public_document_list",
            "draft_document_list",
            "feedback_document_list",
            "critic_document_list",
            "read_document",
            "submit_score",
        ]),
        AgentRole::Compressor => set.extend(["read_history", "write_history"]),
    }
    set
}

fn args_for(tool: Tool, doc: &str) -> serde_json::Value {
    match tool {
        Tool::ReadDocument => json!({ "id": doc }),
        Tool::UpdateMetadata => json!({ "doc_id": doc, "updates": { "keywords": ["k"] } }),
        _ => json!({}),
    }
}

#[test]
fn every_role_gets_exactly_its_grants() {
    let engine = engine(1);
    let doc = source(&engine, "public notes");
    engine
        .catalogue()
        .promote(&doc, VisibilityLevel::Public, Actor::User)
        .unwrap();
    let gateway = engine.gateway();
    let events = engine.catalogue().events();

    for role in AgentRole::ALL {
        let schemas: BTreeSet<String> = gateway.tool_schemas(role).into_iter().map(|s| s.name).collect();
        let want: BTreeSet<String> = expected(role).into_iter().map(String::from).collect();
        assert_eq!(schemas, want, "{role}");

        for tool in Tool::ALL {
            let before = events.len();
            let result = gateway.invoke_tool(role, tool.name(), &args_for(tool, doc.as_str()));
            let new = &events.records()[before..];
            if want.contains(tool.name()) {
                assert!(result.is_ok(), "{role} {tool}: {result:?}");
                assert!(new.iter().any(|e| e.kind == EventKind::ToolInvoked));
            } else {
                match result {
                    Err(ToolError::CapabilityDenied(r)) => {
                        assert!(r.denied);
                        assert_eq!(r.role, role);
                        assert_eq!(r.tool, tool.name());
                    }
                    other => panic!("{role} {tool} should be denied, got {other:?}"),
                }
                assert_eq!(new.len(), 1);
                assert_eq!(new[0].kind, EventKind::CapabilityDenied);
                assert!(!new.iter().any(|e| e.kind.touches_catalogue()));
            }
        }
    }
}

#[test]
fn critic_candidate_listing_is_refused_without_catalogue_events() {
    let engine = engine(2);
    source(&engine, "candidate");
    let before = engine.catalogue().events().len();
    let err = engine
        .gateway()
        .invoke_tool(AgentRole::Critic, "candidate_document_list", &json!({}))
        .unwrap_err();
    assert!(matches!(err, ToolError::CapabilityDenied(_)));
    let new = &engine.catalogue().events().records()[before..];
    assert!(new.iter().all(|e| !e.kind.touches_catalogue()));
    assert_eq!(
        serde_json::to_value(match err {
            ToolError::CapabilityDenied(r) => r,
            _ => unreachable!(),
        })
        .unwrap(),
        json!({ "denied": true, "role": "critic", "tool": "candidate_document_list" })
    );
}

#[test]
fn reading_a_document_needs_the_matching_listing() {
    let engine = engine(3);
    let doc = source(&engine, "candidate");
    let gateway = engine.gateway();
    assert!(gateway
        .invoke_tool(AgentRole::Corroborator, "read_document", &json!({ "id": doc }))
        .is_ok());
    match gateway.invoke_tool(AgentRole::Critic, "read_document", &json!({ "id": doc })) {
        Err(ToolError::CapabilityDenied(r)) => assert_eq!(r.tool, "candidate_document_list"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unknown_tools_are_rejected() {
    let engine = engine(4);
    assert!(matches!(
        engine.gateway().invoke_tool(AgentRole::Critic, "no_such_tool", &json!({})),
        Err(ToolError::UnknownTool(_))
    ));
}

#[test]
fn corroborator_lists_candidates() {
    let engine = engine(5);
    let doc = source(&engine, "candidate");
    match engine
        .gateway()
        .invoke_tool(AgentRole::Corroborator, "candidate_document_list", &json!({}))
        .unwrap()
    {
        ToolResult::Documents { documents } => {
            assert_eq!(documents.len(), 1);
            assert_eq!(documents[0].id, doc);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn listings_never_carry_content() {
    let engine = engine(6);
    source(&engine, "candidate");
    engine
        .catalogue()
        .create_document(
            "spec",
            "CRITIC-ONLY-SPEC",
            NewMetadata::default(),
            VisibilityLevel::Critic,
            Actor::User,
        )
        .unwrap();
    for tool in Tool::LISTINGS {
        let result = engine.gateway().invoke_tool(AgentRole::Concierge, tool.name(), &json!({})).unwrap();
        let value = serde_json::to_value(&result).unwrap();
        for doc in value["documents"].as_array().unwrap() {
            assert!(doc.get("content").is_none());
        }
    }
    let value = serde_json::to_value(
        engine
            .gateway()
            .invoke_tool(AgentRole::Curator, "query_metadata", &json!({}))
            .unwrap(),
    )
    .unwrap();
    assert_eq!(value["documents"].as_array().unwrap().len(), 2);
    assert!(!value.to_string().contains("CRITIC-ONLY-SPEC"));
}

#[test]
fn grant_table_checksum_is_logged_at_startup() {
    let engine = engine(7);
    let first = &engine.catalogue().events().records()[0];
    assert_eq!(first.kind, EventKind::GrantTableLoaded);
    assert_eq!(first.detail["checksum"], GrantTable::default().checksum());
}
