//! Operational statistics derived from the event log.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agents::Verdict;
use crate::compression::TokenLedger;
use crate::events::{EventKind, EventRecord};
use crate::workflow::ProjectStatus;

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("the log contains no verdicts")]
    NoVerdicts,
    #[error("verdict trace is empty")]
    EmptyTrace,
    #[error("no project has two or more scores")]
    InsufficientData,
}

fn round_to(x: f64, places: i32) -> f64 {
    let f = 10f64.powi(places);
    (x * f).round() / f
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerdictDistribution {
    pub substantiated: u64,
    pub fabricated: u64,
    pub substantiated_pct: f64,
    pub fabricated_pct: f64,
}

fn verdict_of(record: &EventRecord) -> Option<Verdict> {
    if record.kind != EventKind::Verdict {
        return None;
    }
    serde_json::from_value(record.detail.get("verdict")?.clone()).ok()
}

/// Counts every verdict event; percentages rounded to one decimal.
pub fn verdict_distribution(events: &[EventRecord]) -> Result<VerdictDistribution, MetricsError> {
    let (mut s, mut f) = (0u64, 0u64);
    for v in events.iter().filter_map(verdict_of) {
        match v {
            Verdict::Substantiated => s += 1,
            Verdict::Fabricated => f += 1,
        }
    }
    let total = s + f;
    if total == 0 {
        return Err(MetricsError::NoVerdicts);
    }
    Ok(VerdictDistribution {
        substantiated: s,
        fabricated: f,
        substantiated_pct: round_to(s as f64 * 100.0 / total as f64, 1),
        fabricated_pct: round_to(f as f64 * 100.0 / total as f64, 1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictCategory {
    Passed,
    Failed,
    Mixed,
}

pub fn project_verdict_category(verdicts: &[Verdict]) -> Result<VerdictCategory, MetricsError> {
    if verdicts.is_empty() {
        return Err(MetricsError::EmptyTrace);
    }
    let any_s = verdicts.contains(&Verdict::Substantiated);
    let any_f = verdicts.contains(&Verdict::Fabricated);
    Ok(match (any_s, any_f) {
        (true, false) => VerdictCategory::Passed,
        (false, true) => VerdictCategory::Failed,
        _ => VerdictCategory::Mixed,
    })
}

/// Scores of one project in iteration order, plus the number of drafts it
/// produced (scored or not).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrajectory {
    pub scores: Vec<u8>,
    pub drafts: u32,
}

impl ScoreTrajectory {
    pub fn new(scores: Vec<u8>, drafts: u32) -> Self {
        Self { scores, drafts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementStats {
    pub mean_absolute: f64,
    /// Absent when every qualifying project started at zero.
    pub mean_relative: Option<f64>,
    pub mean_per_iteration: f64,
    pub mean_iterations: f64,
    pub ci95_absolute: [f64; 2],
    pub ci95_relative: Option<[f64; 2]>,
    pub ci95_per_iteration: [f64; 2],
    pub ci95_iterations: [f64; 2],
    pub n_projects: usize,
    /// Projects with fewer than two scores.
    pub excluded_single_score: usize,
    /// Qualifying projects left out of the relative statistic.
    pub excluded_zero_initial: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap 95% interval of the mean. The interval is widened to
/// contain the point estimate if rounding would otherwise exclude it.
pub fn bootstrap_ci(values: &[f64], seed: u64, stream: u64) -> [f64; 2] {
    let point = mean(values);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let n = values.len();
    let mut means: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            let total: f64 = (0..n).map(|_| values[rng.random_range(0..n)]).sum();
            total / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let low = quantile(&means, 0.025).min(point);
    let high = quantile(&means, 0.975).max(point);
    [low, high]
}

/// Improvement statistics over projects with at least two scores.
pub fn improvement_stats(trajectories: &[ScoreTrajectory], seed: u64) -> Result<ImprovementStats, MetricsError> {
    let qualifying: Vec<&ScoreTrajectory> = trajectories.iter().filter(|t| t.scores.len() >= 2).collect();
    if qualifying.is_empty() {
        return Err(MetricsError::InsufficientData);
    }
    let mut absolute = Vec::new();
    let mut relative = Vec::new();
    let mut per_iteration = Vec::new();
    let mut iterations = Vec::new();
    for t in &qualifying {
        let first = f64::from(t.scores[0]);
        let last = f64::from(*t.scores.last().expect("at least two scores"));
        let abs = last - first;
        absolute.push(abs);
        if t.scores[0] > 0 {
            relative.push(abs / first * 100.0);
        }
        per_iteration.push(abs / (t.scores.len() - 1) as f64);
        iterations.push(f64::from(t.drafts));
    }
    let (mean_relative, ci95_relative) = if relative.is_empty() {
        (None, None)
    } else {
        (Some(mean(&relative)), Some(bootstrap_ci(&relative, seed, 1)))
    };
    Ok(ImprovementStats {
        mean_absolute: mean(&absolute),
        mean_relative,
        mean_per_iteration: mean(&per_iteration),
        mean_iterations: mean(&iterations),
        ci95_absolute: bootstrap_ci(&absolute, seed, 0),
        ci95_relative,
        ci95_per_iteration: bootstrap_ci(&per_iteration, seed, 2),
        ci95_iterations: bootstrap_ci(&iterations, seed, 3),
        n_projects: qualifying.len(),
        excluded_single_score: trajectories.len() - qualifying.len(),
        excluded_zero_initial: qualifying.len() - relative.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_usd: f64,
    /// Mean cost per project keyed by status; statuses with no projects are
    /// absent.
    pub mean_usd_by_status: BTreeMap<String, f64>,
    pub total_tokens: u64,
    pub cache_share_pct: f64,
}

pub fn cost_report<'a>(ledgers: impl IntoIterator<Item = (&'a TokenLedger, ProjectStatus)>) -> CostReport {
    let mut total_usd = 0.0;
    let (mut input, mut output, mut cached) = (0u64, 0u64, 0u64);
    let mut by_status: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (ledger, status) in ledgers {
        total_usd += ledger.cost_usd;
        input += ledger.input_tokens;
        output += ledger.output_tokens;
        cached += ledger.cached_input_tokens;
        let slot = by_status.entry(status.as_str().to_string()).or_default();
        slot.0 += ledger.cost_usd;
        slot.1 += 1;
    }
    let total_tokens = input + output;
    let cache_share_pct = if total_tokens == 0 {
        0.0
    } else {
        round_to(cached as f64 * 100.0 / total_tokens as f64, 1)
    };
    CostReport {
        total_usd,
        mean_usd_by_status: by_status
            .into_iter()
            .map(|(k, (sum, n))| (k, sum / n as f64))
            .collect(),
        total_tokens,
        cache_share_pct,
    }
}

/// Per-project facts reconstructed from the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectRecord {
    pub project_id: String,
    pub status: ProjectStatus,
    pub verdicts: Vec<Verdict>,
    pub scores: Vec<u8>,
    pub drafts: u32,
    pub ledger: TokenLedger,
}

/// Groups the log by project. Projects without a finish event are Active.
pub fn project_records(events: &[EventRecord]) -> Vec<ProjectRecord> {
    let mut projects: BTreeMap<String, ProjectRecord> = BTreeMap::new();
    for e in events {
        let Some(project) = e.project() else { continue };
        if e.kind == EventKind::ProjectStarted {
            projects.insert(
                project.to_string(),
                ProjectRecord {
                    project_id: project.to_string(),
                    status: ProjectStatus::Active,
                    verdicts: Vec::new(),
                    scores: Vec::new(),
                    drafts: 0,
                    ledger: TokenLedger::default(),
                },
            );
            continue;
        }
        let Some(rec) = projects.get_mut(project) else { continue };
        match e.kind {
            EventKind::Verdict => rec.verdicts.extend(verdict_of(e)),
            EventKind::Score => {
                if let Some(s) = e.detail.get("score").and_then(Value::as_u64) {
                    rec.scores.push(s as u8);
                }
            }
            EventKind::DraftSubmitted => rec.drafts += 1,
            EventKind::TokenUsage => {
                if let Some(l) = e.detail.get("ledger").and_then(|l| serde_json::from_value(l.clone()).ok()) {
                    rec.ledger = l;
                }
            }
            EventKind::ProjectFinished => {
                if let Some(s) = e.detail.get("status").and_then(|s| serde_json::from_value(s.clone()).ok()) {
                    rec.status = s;
                }
                if let Some(l) = e
                    .detail
                    .pointer("/trace/ledger")
                    .and_then(|l| serde_json::from_value(l.clone()).ok())
                {
                    rec.ledger = l;
                }
            }
            _ => {}
        }
    }
    projects.into_values().collect()
}

pub const DEFINITIONS: [&str; 4] = [
    "iterations: accepted drafts per project, including drafts rejected before scoring",
    "per-iteration improvement: (final - initial score) / (scored drafts - 1)",
    "relative improvement excludes projects whose initial score is 0",
    "improvement statistics include only projects with two or more scores",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub projects: usize,
    pub status_breakdown: BTreeMap<String, usize>,
    pub verdicts: Option<VerdictDistribution>,
    pub categories: BTreeMap<VerdictCategory, usize>,
    pub projects_with_verdicts: usize,
    pub improvement: Option<ImprovementStats>,
    pub cost: CostReport,
    pub definitions: Vec<String>,
}

impl MetricsReport {
    pub fn from_events(events: &[EventRecord], seed: u64) -> Self {
        let records = project_records(events);
        let mut status_breakdown = BTreeMap::new();
        for r in &records {
            *status_breakdown.entry(r.status.as_str().to_string()).or_insert(0) += 1;
        }
        let mut categories = BTreeMap::new();
        for r in &records {
            if let Ok(c) = project_verdict_category(&r.verdicts) {
                *categories.entry(c).or_insert(0) += 1;
            }
        }
        let trajectories: Vec<ScoreTrajectory> = records
            .iter()
            .map(|r| ScoreTrajectory::new(r.scores.clone(), r.drafts))
            .collect();
        Self {
            projects: records.len(),
            status_breakdown,
            verdicts: verdict_distribution(events).ok(),
            projects_with_verdicts: categories.values().sum(),
            categories,
            improvement: improvement_stats(&trajectories, seed).ok(),
            cost: cost_report(records.iter().map(|r| (&r.ledger, r.status))),
            definitions: DEFINITIONS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialise")
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let pct = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 * 100.0 / d as f64 };
        let _ = writeln!(out, "Projects: {}", self.projects);
        for (status, n) in &self.status_breakdown {
            let _ = writeln!(out, "  {:<12} {:>6} {:>6.1}%", status, n, pct(*n, self.projects));
        }
        let _ = writeln!(out);
        match &self.verdicts {
            Some(v) => {
                let _ = writeln!(out, "Verdicts");
                let _ = writeln!(out, "  {:<14} {:>6} {:>6.1}%", "substantiated", v.substantiated, v.substantiated_pct);
                let _ = writeln!(out, "  {:<14} {:>6} {:>6.1}%", "fabricated", v.fabricated, v.fabricated_pct);
            }
            None => {
                let _ = writeln!(out, "Verdicts: none recorded");
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "Project verdict categories ({} projects)", self.projects_with_verdicts);
        for (label, cat) in [
            ("passed", VerdictCategory::Passed),
            ("failed", VerdictCategory::Failed),
            ("mixed", VerdictCategory::Mixed),
        ] {
            let n = self.categories.get(&cat).copied().unwrap_or(0);
            let _ = writeln!(out, "  {:<12} {:>6} {:>6.1}%", label, n, pct(n, self.projects_with_verdicts));
        }
        let _ = writeln!(out);
        match &self.improvement {
            Some(s) => {
                let _ = writeln!(out, "Improvement ({} projects)", s.n_projects);
                let _ = writeln!(out, "  {:<22} {:>8} {:>20}", "metric", "mean", "95% CI");
                let row = |out: &mut String, name: &str, m: f64, ci: [f64; 2]| {
                    let _ = writeln!(out, "  {:<22} {:>8.2} {:>20}", name, m, format!("[{:.2}, {:.2}]", ci[0], ci[1]));
                };
                row(&mut out, "absolute (points)", s.mean_absolute, s.ci95_absolute);
                if let (Some(m), Some(ci)) = (s.mean_relative, s.ci95_relative) {
                    row(&mut out, "relative (%)", m, ci);
                }
                row(&mut out, "per iteration (points)", s.mean_per_iteration, s.ci95_per_iteration);
                row(&mut out, "iterations", s.mean_iterations, s.ci95_iterations);
                let _ = writeln!(
                    out,
                    "  excluded: {} single-score, {} zero initial score (relative only)",
                    s.excluded_single_score, s.excluded_zero_initial
                );
            }
            None => {
                let _ = writeln!(out, "Improvement: insufficient data");
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "Cost");
        let _ = writeln!(out, "  total ${:.2}, {} tokens, cache share {:.1}%", self.cost.total_usd, self.cost.total_tokens, self.cost.cache_share_pct);
        for (status, m) in &self.cost.mean_usd_by_status {
            let _ = writeln!(out, "  mean {:<10} ${:.2}", status, m);
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "Definitions");
        for d in &self.definitions {
            let _ = writeln!(out, "  - {d}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::TokenUsage;
    use crate::compression::Pricing;
    use serde_json::json;

    fn verdict_event(seq: u64, v: Verdict) -> EventRecord {
        EventRecord {
            seq,
            timestamp: chrono::DateTime::UNIX_EPOCH,
            kind: EventKind::Verdict,
            actor: "corroborator".into(),
            doc_id: None,
            detail: json!({ "verdict": v }),
        }
    }

    #[test]
    fn distribution_rounding() {
        use Verdict::*;
        let log: Vec<EventRecord> = [Substantiated, Fabricated, Fabricated]
            .into_iter()
            .enumerate()
            .map(|(i, v)| verdict_event(i as u64 + 1, v))
            .collect();
        let d = verdict_distribution(&log).unwrap();
        assert_eq!((d.substantiated_pct, d.fabricated_pct), (33.3, 66.7));
        assert_eq!(verdict_distribution(&[]), Err(MetricsError::NoVerdicts));
    }

    #[test]
    fn categories() {
        use Verdict::*;
        assert_eq!(project_verdict_category(&[Substantiated, Substantiated]), Ok(VerdictCategory::Passed));
        assert_eq!(project_verdict_category(&[Fabricated]), Ok(VerdictCategory::Failed));
        assert_eq!(
            project_verdict_category(&[Fabricated, Fabricated, Substantiated, Substantiated, Substantiated]),
            Ok(VerdictCategory::Mixed)
        );
        assert_eq!(project_verdict_category(&[]), Err(MetricsError::EmptyTrace));
    }

    #[test]
    fn single_trace_arithmetic() {
        let s = improvement_stats(&[ScoreTrajectory::new(vec![28, 85, 92], 5)], 1).unwrap();
        assert_eq!(s.mean_absolute, 64.0);
        assert!((s.mean_relative.unwrap() - 228.571_428_571_428_58).abs() < 1e-9);
        assert_eq!(s.mean_per_iteration, 32.0);
        assert_eq!(s.mean_iterations, 5.0);
    }

    #[test]
    fn identical_traces_give_degenerate_ci() {
        let t = ScoreTrajectory::new(vec![40, 70], 2);
        let s = improvement_stats(&[t.clone(), t], 9).unwrap();
        assert_eq!(s.ci95_absolute, [30.0, 30.0]);
    }

    #[test]
    fn lone_single_score_is_insufficient() {
        assert_eq!(
            improvement_stats(&[ScoreTrajectory::new(vec![50], 1)], 0),
            Err(MetricsError::InsufficientData)
        );
    }

    #[test]
    fn zero_initial_excluded_from_relative_only() {
        let s = improvement_stats(
            &[ScoreTrajectory::new(vec![0, 50], 2), ScoreTrajectory::new(vec![50, 75], 2)],
            3,
        )
        .unwrap();
        assert_eq!(s.excluded_zero_initial, 1);
        assert_eq!(s.mean_relative, Some(50.0));
        assert_eq!(s.mean_absolute, 37.5);
    }

    #[test]
    fn cost_examples() {
        let pricing = Pricing::default();
        let mut plain = TokenLedger::default();
        plain.record(TokenUsage { input: 100, output: 0, cached: 0 }, &pricing);
        let r = cost_report([(&plain, ProjectStatus::Completed)]);
        assert!((r.total_usd - 0.0003).abs() < 1e-12);
        assert!((r.mean_usd_by_status["completed"] - 0.0003).abs() < 1e-12);

        let mut cached = TokenLedger::default();
        cached.record(TokenUsage { input: 100, output: 0, cached: 100 }, &pricing);
        let c = cost_report([(&cached, ProjectStatus::Failed)]);
        assert!((c.total_usd * 10.0 - r.total_usd).abs() < 1e-12);
        assert_eq!(c.cache_share_pct, 100.0);

        let empty = cost_report(std::iter::empty());
        assert_eq!(empty.total_usd, 0.0);
        assert!(empty.mean_usd_by_status.is_empty());
    }
}
