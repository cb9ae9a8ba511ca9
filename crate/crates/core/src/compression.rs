//! Token accounting and history compression.
//!
//! Histories are measured with a pluggable [`TokenEstimator`]. When the
//! largest role history reaches `trigger_ratio` of the context limit the
//! Compressor is asked for a summary that replaces the verbatim messages.
//! Feedback messages carry a `[feedback #n]` tag; any tag the summary drops is
//! re-attached as a one-line digest so no feedback entry disappears.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agents::{AgentAction, AgentBackend, AgentError, Message, MessageKind, Observation, TokenUsage};
use crate::events::EventKind;
use crate::provisioning::{AgentRole, ToolError, ToolGateway};
use crate::workflow::{consult_recorded, ConsultError, GraphState, WorkflowConfig};

/// Pure text → token count. Must be monotone in text length.
pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> u64;
}

impl<F> TokenEstimator for F
where
    F: Fn(&str) -> u64 + Send + Sync,
{
    fn estimate(&self, text: &str) -> u64 {
        self(text)
    }
}

/// `ceil(chars / chars_per_token)`, 4 characters per token by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CharEstimator {
    pub chars_per_token: u64,
}

impl Default for CharEstimator {
    fn default() -> Self {
        Self { chars_per_token: 4 }
    }
}

impl TokenEstimator for CharEstimator {
    fn estimate(&self, text: &str) -> u64 {
        (text.chars().count() as u64).div_ceil(self.chars_per_token)
    }
}

pub fn estimate_tokens(history: &[Message], estimator: &dyn TokenEstimator) -> u64 {
    history.iter().map(|m| estimator.estimate(&m.text)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pricing {
    pub price_per_input_token: f64,
    pub price_per_output_token: f64,
    pub cached_input_multiplier: f64,
}

impl Default for Pricing {
    fn default() -> Self {
        Self {
            price_per_input_token: 3e-6,
            price_per_output_token: 15e-6,
            cached_input_multiplier: 0.1,
        }
    }
}

impl Pricing {
    pub fn cost(&self, input: u64, cached: u64, output: u64) -> f64 {
        let uncached = input.saturating_sub(cached) as f64;
        uncached * self.price_per_input_token
            + cached as f64 * self.price_per_input_token * self.cached_input_multiplier
            + output as f64 * self.price_per_output_token
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cached_input_tokens: u64,
    pub cost_usd: f64,
}

impl TokenLedger {
    pub fn record(&mut self, usage: TokenUsage, pricing: &Pricing) {
        let cached = usage.cached.min(usage.input);
        self.input_tokens += usage.input;
        self.output_tokens += usage.output;
        self.cached_input_tokens += cached;
        self.cost_usd += pricing.cost(usage.input, cached, usage.output);
    }

    /// Input plus output tokens.
    pub fn spent(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionPolicy {
    pub trigger_ratio: f64,
    pub budget_signal_ratio: f64,
}

impl Default for CompressionPolicy {
    fn default() -> Self {
        Self {
            trigger_ratio: 0.75,
            budget_signal_ratio: 0.90,
        }
    }
}

impl CompressionPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.trigger_ratio > 0.0 && self.trigger_ratio < 1.0) {
            return Err(format!("trigger_ratio {} must lie in (0, 1)", self.trigger_ratio));
        }
        if !(self.budget_signal_ratio > 0.0 && self.budget_signal_ratio <= 1.0) {
            return Err(format!(
                "budget_signal_ratio {} must lie in (0, 1]",
                self.budget_signal_ratio
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetWarning {
    pub spent: u64,
    pub budget: u64,
}

pub fn budget_signal(
    ledger: &TokenLedger,
    config: &WorkflowConfig,
    policy: &CompressionPolicy,
) -> Option<BudgetWarning> {
    let spent = ledger.spent();
    (spent as f64 >= policy.budget_signal_ratio * config.token_budget as f64).then_some(BudgetWarning {
        spent,
        budget: config.token_budget,
    })
}

pub fn feedback_tag(n: usize) -> String {
    format!("[feedback #{n}]")
}

#[derive(Debug, thiserror::Error)]
pub enum CompressionError {
    #[error("compression of {role} history did not shrink it ({before} -> {after} tokens)")]
    Ineffective { role: AgentRole, before: u64, after: u64 },
    #[error("compressor replied with {0} instead of a summary")]
    UnexpectedAction(&'static str),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error("event log: {0}")]
    Log(#[from] std::io::Error),
}

impl From<ConsultError> for CompressionError {
    fn from(e: ConsultError) -> Self {
        match e {
            ConsultError::Agent(a) => CompressionError::Agent(a),
            ConsultError::Log(io) => CompressionError::Log(io),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CompressionOutcome {
    Below { usage: u64, threshold: f64 },
    Compressed { role: AgentRole, before: u64, after: u64 },
}

pub struct CompressionContext<'a> {
    pub gateway: &'a ToolGateway,
    pub estimator: &'a dyn TokenEstimator,
    pub policy: &'a CompressionPolicy,
}

/// The role whose history is largest, with its estimate. Ties go to the role
/// declared first.
pub fn largest_history(state: &GraphState, estimator: &dyn TokenEstimator) -> Option<(AgentRole, u64)> {
    state
        .histories
        .iter()
        .map(|(role, h)| (*role, estimate_tokens(h, estimator)))
        .fold(None, |best, (role, est)| match best {
            Some((_, b)) if b >= est => best,
            _ => Some((role, est)),
        })
}

pub fn maybe_compress(
    state: &mut GraphState,
    backend: &mut dyn AgentBackend,
    ctx: &CompressionContext<'_>,
) -> Result<CompressionOutcome, CompressionError> {
    let threshold = ctx.policy.trigger_ratio * state.config.context_limit as f64;
    let Some((role, before)) = largest_history(state, ctx.estimator) else {
        return Ok(CompressionOutcome::Below { usage: 0, threshold });
    };
    if (before as f64) < threshold {
        return Ok(CompressionOutcome::Below { usage: before, threshold });
    }

    let project = state.project_id.to_string();
    let compressor = AgentRole::Compressor;
    ctx.gateway
        .invoke_tool(compressor, "read_history", &json!({ "project": project }))?;
    let history = state.histories[&role].clone();
    let observation = Observation {
        project_id: state.project_id.clone(),
        role: compressor,
        iteration: state.iteration,
        remit: String::new(),
        tools: ctx.gateway.grants_for(compressor).names(),
        clarifications: Vec::new(),
        documents: Vec::new(),
        listings: Vec::new(),
        history: history.clone(),
        budget_warning: None,
        refusals: Vec::new(),
    };
    let events = ctx.gateway.catalogue().events();
    let action = consult_recorded(backend, events, &mut state.ledger, compressor, &observation)?;
    let AgentAction::CompressionSummary { summary } = action else {
        return Err(CompressionError::UnexpectedAction(action.kind()));
    };

    let joined: String = history.iter().map(|m| m.text.as_str()).collect::<Vec<_>>().join("\n");
    let mut compressed = vec![Message::new(MessageKind::Summary, state.iteration, summary.clone())];
    for (i, entry) in state.feedback_log.iter().enumerate() {
        let tag = feedback_tag(i + 1);
        if joined.contains(&tag) && !summary.contains(&tag) {
            let gist: Vec<&str> = entry.text.split_whitespace().take(12).collect();
            compressed.push(Message::new(
                MessageKind::Summary,
                entry.iteration,
                format!("{tag} {} (iteration {}): {}", entry.source, entry.iteration, gist.join(" ")),
            ));
        }
    }
    let after = estimate_tokens(&compressed, ctx.estimator);
    if after >= before {
        events.append(
            EventKind::CompressionFailed,
            compressor.as_str(),
            None,
            json!({ "project": project, "role": role, "before": before, "after": after }),
        )?;
        return Err(CompressionError::Ineffective { role, before, after });
    }

    ctx.gateway
        .invoke_tool(compressor, "write_history", &json!({ "project": project }))?;
    state.histories.insert(role, compressed);
    events.append(
        EventKind::Compression,
        compressor.as_str(),
        None,
        json!({ "project": project, "role": role, "before": before, "after": after }),
    )?;
    Ok(CompressionOutcome::Compressed { role, before, after })
}
