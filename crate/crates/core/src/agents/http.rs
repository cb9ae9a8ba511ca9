use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{AgentAction, AgentBackend, AgentError, AgentReply, Observation, TokenUsage};
use crate::compression::{CharEstimator, Pricing, TokenEstimator};
use crate::provisioning::{AgentRole, Tool, ToolSchema};

/// `{base_url, model, price_per_input_token, price_per_output_token,
/// cached_input_multiplier}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model: String,
    pub price_per_input_token: f64,
    pub price_per_output_token: f64,
    #[serde(default = "default_cache_multiplier")]
    pub cached_input_multiplier: f64,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_cache_multiplier() -> f64 {
    0.1
}

fn default_timeout() -> u64 {
    120
}

/// Generic chat-completion client. The observation goes out as the user
/// message, the role's granted tools as the tool list, and the reply must be
/// a tool call or a JSON object carrying one [`AgentAction`].
pub struct HttpBackend {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
    estimator: CharEstimator,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, AgentError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| AgentError::BackendUnreachable(e.to_string()))?;
        Ok(Self {
            config,
            client,
            estimator: CharEstimator::default(),
        })
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.config
    }

    /// Request body for one decision. Public so the wire format can be
    /// inspected without a server.
    pub fn request_body(&self, role: AgentRole, observation: &Observation) -> Value {
        let tools: Vec<Value> = observation
            .tools
            .iter()
            .filter_map(|name| Tool::from_name(name))
            .map(ToolSchema::from)
            .map(|s| {
                json!({
                    "type": "function",
                    "function": {
                        "name": s.name,
                        "description": s.description,
                        "parameters": s.parameters,
                    }
                })
            })
            .collect();
        json!({
            "model": self.config.model,
            "messages": [
                { "role": "system", "content": role_brief(role) },
                {
                    "role": "user",
                    "content": serde_json::to_string(observation).expect("observations serialise"),
                },
            ],
            "tools": tools,
        })
    }
}

fn role_brief(role: AgentRole) -> &'static str {
    match role {
        AgentRole::Concierge => "You are the Concierge. Clarify the user's request before work begins. Reply with one action.",
        AgentRole::Commutator => "You are the Commutator. Triage the remit and choose a route: curate, compose or verify_only.",
        AgentRole::Curator => "You are the Curator. Enrich the metadata of the supplied source documents.",
        AgentRole::Composer => "You are the Composer. Draft from the sources and revise against all feedback received.",
        AgentRole::Corroborator => "You are the Corroborator. Check every claim in the draft against the sources. Reply SUBSTANTIATED only if all claims are supported, otherwise FABRICATED, with a rationale of at most 1000 words.",
        AgentRole::Critic => "You are the Critic. Score the draft 0-100 as its likelihood of acceptance and give blunt feedback of at most 1000 words.",
        AgentRole::Compressor => "You are the Compressor. Summarise the history, keeping every feedback point.",
    }
}

fn action_type_for_tool(tool: &str) -> Option<&'static str> {
    Some(match Tool::from_name(tool)? {
        Tool::SubmitDraft => "draft_submission",
        Tool::SubmitVerdict => "verdict_report",
        Tool::SubmitScore => "score_report",
        Tool::RequestClarification => "clarification_request",
        Tool::UpdateMetadata => "curation_update",
        Tool::WriteHistory => "compression_summary",
        Tool::RouteProject => "route_choice",
        _ => return None,
    })
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let t = t.strip_prefix("```json").or_else(|| t.strip_prefix("```")).unwrap_or(t);
    t.strip_suffix("```").unwrap_or(t).trim()
}

/// Parses a chat-completion response body into an action.
pub(crate) fn parse_reply(body: &Value) -> Result<AgentAction, AgentError> {
    let message = body
        .pointer("/choices/0/message")
        .ok_or_else(|| AgentError::MalformedReply("no choices[0].message".into()))?;

    if let Some(call) = message.pointer("/tool_calls/0/function") {
        let name = call
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| AgentError::MalformedReply("tool call without a name".into()))?;
        let kind = action_type_for_tool(name)
            .ok_or_else(|| AgentError::MalformedReply(format!("tool '{name}' is not an action")))?;
        let mut args: Value = match call.get("arguments") {
            Some(Value::String(s)) => serde_json::from_str(s)
                .map_err(|e| AgentError::MalformedReply(format!("tool arguments: {e}")))?,
            Some(v @ Value::Object(_)) => v.clone(),
            _ => json!({}),
        };
        let obj = args
            .as_object_mut()
            .ok_or_else(|| AgentError::MalformedReply("tool arguments are not an object".into()))?;
        obj.insert("type".into(), json!(kind));
        return serde_json::from_value(args).map_err(|e| AgentError::MalformedReply(e.to_string()));
    }

    let content = message
        .get("content")
        .and_then(Value::as_str)
        .ok_or_else(|| AgentError::MalformedReply("reply has neither tool call nor content".into()))?;
    serde_json::from_str(strip_fences(content)).map_err(|e| AgentError::MalformedReply(e.to_string()))
}

impl AgentBackend for HttpBackend {
    fn next_action(&mut self, role: AgentRole, observation: &Observation) -> Result<AgentReply, AgentError> {
        let body = self.request_body(role, observation);
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut request = self.client.post(&url).json(&body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| AgentError::BackendUnreachable(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(AgentError::BackendUnreachable(format!("{url} returned {status}")));
        }
        let reply: Value = response
            .json()
            .map_err(|e| AgentError::MalformedReply(e.to_string()))?;
        let action = parse_reply(&reply)?;

        let count = |ptr: &str| reply.pointer(ptr).and_then(Value::as_u64);
        let input = count("/usage/prompt_tokens").unwrap_or_else(|| {
            self.estimator
                .estimate(&body["messages"].to_string())
        });
        let output = count("/usage/completion_tokens").unwrap_or_else(|| {
            self.estimator
                .estimate(&serde_json::to_string(&action).expect("actions serialise"))
        });
        let cached = count("/usage/prompt_tokens_details/cached_tokens")
            .unwrap_or(0)
            .min(input);
        Ok(AgentReply {
            action,
            usage: TokenUsage { input, output, cached },
        })
    }

    fn pricing(&self) -> Pricing {
        Pricing {
            price_per_input_token: self.config.price_per_input_token,
            price_per_output_token: self.config.price_per_output_token,
            cached_input_multiplier: self.config.cached_input_multiplier,
        }
    }
}
