//! Task recognition, anatomical routing and query normalization.
//!
//! The planner is a small state machine: each episode starts `Received`,
//! and every action moves it strictly forward through
//! `Classified → Normalized → Dispatched → (Aggregating →) Done`. The trace
//! of applied actions is what the service returns and the history log keeps.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatMessage, ChatRequest, LlmClient};
use crate::memory::QueryHub;
use crate::region::{canonicalize_region, RegionId, UnknownRegion};
use crate::templates::{TemplateKind, TemplateSet};

/// System message sent when retrying a classification whose reply had no
/// usable JSON.
pub const JSON_ONLY_NUDGE: &str =
    "Output JSON only: a single object with the keys \"task_type\" and \"target_region\", and nothing else.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("malformed task decision: {0}")]
    MalformedDecision(String),
    #[error(transparent)]
    UnknownRegion(#[from] UnknownRegion),
    #[error("query is empty")]
    EmptyQuery,
    #[error("query hub has no entry for {0}")]
    HubMissingRegion(RegionId),
    #[error("action {action} is not legal in phase {phase}")]
    IllegalTransition { phase: Phase, action: &'static str },
}

pub type Result<T> = std::result::Result<T, PlannerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskType {
    #[serde(rename = "QA")]
    Qa,
    #[serde(rename = "Report")]
    Report,
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskType::Qa => "QA",
            TaskType::Report => "Report",
        })
    }
}

/// Routing outcome. Report decisions never carry regions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDecision {
    pub task_type: TaskType,
    pub target_regions: Vec<RegionId>,
}

impl TaskDecision {
    pub fn report() -> Self {
        Self { task_type: TaskType::Report, target_regions: Vec::new() }
    }

    pub fn qa(mut regions: Vec<RegionId>) -> Self {
        regions.sort();
        regions.dedup();
        Self { task_type: TaskType::Qa, target_regions: regions }
    }
}

/// First balanced `{...}` block in `text`, honoring JSON string escapes.
pub fn extract_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parses a classification reply. Syntax problems are `MalformedDecision`;
/// a well-formed reply naming a region outside the taxonomy is `UnknownRegion`.
pub fn parse_decision(reply: &str) -> Result<TaskDecision> {
    let json = extract_json_object(reply)
        .ok_or_else(|| PlannerError::MalformedDecision("no JSON object in reply".into()))?;
    let value: serde_json::Value =
        serde_json::from_str(json).map_err(|e| PlannerError::MalformedDecision(e.to_string()))?;
    let task = value
        .get("task_type")
        .and_then(|v| v.as_str())
        .ok_or_else(|| PlannerError::MalformedDecision("missing task_type".into()))?;
    let task_type = match task.trim().to_ascii_lowercase().as_str() {
        "qa" => TaskType::Qa,
        "report" => TaskType::Report,
        other => return Err(PlannerError::MalformedDecision(format!("task_type {other:?}"))),
    };
    if task_type == TaskType::Report {
        return Ok(TaskDecision::report());
    }
    let raw = value.get("target_region").or_else(|| value.get("target_regions"));
    let names: Vec<&str> = match raw {
        None | Some(serde_json::Value::Null) => Vec::new(),
        Some(serde_json::Value::String(s)) => vec![s.as_str()],
        Some(serde_json::Value::Array(items)) => items
            .iter()
            .map(|v| v.as_str().ok_or_else(|| PlannerError::MalformedDecision("non-string region".into())))
            .collect::<Result<_>>()?,
        Some(other) => return Err(PlannerError::MalformedDecision(format!("target_region {other}"))),
    };
    let regions = names.into_iter().map(canonicalize_region).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(TaskDecision::qa(regions))
}

/// Classifies `query` with the task classification prompt, retrying once
/// with a JSON-only system message when the reply cannot be parsed.
pub fn classify_task(query: &str, llm: &dyn LlmClient, templates: &TemplateSet) -> Result<TaskDecision> {
    if query.trim().is_empty() {
        return Err(PlannerError::EmptyQuery);
    }
    let prompt = templates.render(TemplateKind::TaskClassification, &[("user_question", query)]);
    let first = llm.complete(&ChatRequest::user(prompt.clone()))?;
    match parse_decision(&first.text) {
        Err(PlannerError::MalformedDecision(reason)) => {
            tracing::warn!(%reason, "classification reply unparseable; retrying");
            let retry = ChatRequest::new(vec![ChatMessage::system(JSON_ONLY_NUDGE), ChatMessage::user(prompt)]);
            let second = llm.complete(&retry)?;
            parse_decision(&second.text)
        }
        other => other,
    }
}

/// The four predefined clinical question forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionTemplate {
    /// "What are the abnormalities in the {region}?"
    Abnormalities,
    /// "What is the approximate size of the {abnormality} in the {region}?"
    Size,
    /// "Where is the {abnormality} located in the image?"
    Location,
    /// "Can {abnormality} be identified in the {region}?"
    Presence,
}

/// Placeholder used when the question names no specific abnormality.
pub const GENERIC_ABNORMALITY: &str = "abnormality";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedQuestion {
    pub template: QuestionTemplate,
    pub abnormality: Option<String>,
    pub region: Option<RegionId>,
}

impl QuestionTemplate {
    pub const ALL: [QuestionTemplate; 4] =
        [QuestionTemplate::Abnormalities, QuestionTemplate::Size, QuestionTemplate::Location, QuestionTemplate::Presence];

    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn render(self, region: RegionId, abnormality: &str) -> String {
        let region = region.phrase();
        match self {
            QuestionTemplate::Abnormalities => format!("What are the abnormalities in the {region}?"),
            QuestionTemplate::Size => format!("What is the approximate size of the {abnormality} in the {region}?"),
            QuestionTemplate::Location => format!("Where is the {abnormality} located in the image?"),
            QuestionTemplate::Presence => format!("Can {abnormality} be identified in the {region}?"),
        }
    }

    /// Recognizes a question written in one of the four forms
    /// (case-insensitive, surrounding whitespace ignored).
    pub fn parse(text: &str) -> Option<ParsedQuestion> {
        let t = text.trim().to_lowercase();
        let t = t.strip_suffix('?')?.trim_end();
        let region = |s: &str| canonicalize_region(s).ok();
        let abnormality = |s: &str| {
            let s = s.trim();
            (!s.is_empty()).then(|| s.to_string())
        };
        if let Some(r) = t.strip_prefix("what are the abnormalities in the ") {
            return Some(ParsedQuestion { template: QuestionTemplate::Abnormalities, abnormality: None, region: Some(region(r)?) });
        }
        if let Some(rest) = t.strip_prefix("what is the approximate size of the ") {
            let (a, r) = rest.rsplit_once(" in the ")?;
            return Some(ParsedQuestion { template: QuestionTemplate::Size, abnormality: Some(abnormality(a)?), region: Some(region(r)?) });
        }
        if let Some(rest) = t.strip_prefix("where is the ") {
            let a = rest.strip_suffix(" located in the image")?;
            return Some(ParsedQuestion { template: QuestionTemplate::Location, abnormality: Some(abnormality(a)?), region: None });
        }
        if let Some(rest) = t.strip_prefix("can ") {
            let (a, r) = rest.rsplit_once(" be identified in the ")?;
            return Some(ParsedQuestion { template: QuestionTemplate::Presence, abnormality: Some(abnormality(a)?), region: Some(region(r)?) });
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewrittenQuery {
    pub text: String,
    pub template: QuestionTemplate,
    pub abnormality: Option<String>,
    /// True when the backend reply matched no template.
    pub fallback: bool,
}

/// Text after the "Rewritten Clinical Query:" label, or the first nonempty line.
fn rewritten_text(reply: &str) -> &str {
    const LABEL: &str = "Rewritten Clinical Query:";
    let body = match reply.find(LABEL) {
        Some(i) => &reply[i + LABEL.len()..],
        None => reply,
    };
    let line = body.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    line.trim_matches(|c| c == '"' || c == '\'' || c == '`' || c == '*').trim()
}

/// Rewrites a free-form question into one of the predefined forms for
/// `region`. The result is always re-rendered from the parsed template with
/// the planner's region; unrecognized replies fall back to template 1.
pub fn rewrite_query(query: &str, region: RegionId, llm: &dyn LlmClient, templates: &TemplateSet) -> Result<RewrittenQuery> {
    let prompt = templates.render(
        TemplateKind::QueryRewriting,
        &[("user_question", query), ("region", region.display_name())],
    );
    let reply = llm.complete(&ChatRequest::user(prompt))?;
    Ok(match QuestionTemplate::parse(rewritten_text(&reply.text)) {
        Some(parsed) => {
            let abnormality = parsed.abnormality.unwrap_or_else(|| GENERIC_ABNORMALITY.to_string());
            RewrittenQuery {
                text: parsed.template.render(region, &abnormality),
                template: parsed.template,
                abnormality: (parsed.template != QuestionTemplate::Abnormalities).then_some(abnormality),
                fallback: false,
            }
        }
        None => {
            tracing::info!(reply = %reply.text, "rewrite matched no template; using template 1");
            RewrittenQuery {
                text: QuestionTemplate::Abnormalities.render(region, GENERIC_ABNORMALITY),
                template: QuestionTemplate::Abnormalities,
                abnormality: None,
                fallback: true,
            }
        }
    })
}

/// The hub's fixed question for `region`.
pub fn select_query(region: RegionId, hub: &QueryHub) -> Result<String> {
    hub.canonical(region).map(str::to_string).ok_or(PlannerError::HubMissingRegion(region))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Received,
    Classified,
    Normalized,
    Dispatched,
    Aggregating,
    Done,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Classify { decision: TaskDecision },
    /// Region questions after rewriting (QA) or hub selection (report).
    Normalize { queries: Vec<String> },
    Dispatch { regions: Vec<RegionId> },
    Aggregate { exemplars: usize },
    Answer { text: String },
    Report { text: String },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Classify { .. } => "classify",
            Action::Normalize { .. } => "normalize",
            Action::Dispatch { .. } => "dispatch",
            Action::Aggregate { .. } => "aggregate",
            Action::Answer { .. } => "answer",
            Action::Report { .. } => "report",
        }
    }
}

/// What the engine observed when the action was taken.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study_id: Option<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub backend: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl Environment {
    pub fn new(study_id: Option<&str>, backend: impl Into<String>, note: impl Into<String>) -> Self {
        Self { study_id: study_id.map(str::to_string), backend: backend.into(), note: note.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    /// Phase after the action.
    pub phase: Phase,
    #[serde(flatten)]
    pub action: Action,
    pub env: Environment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerState {
    pub phase: Phase,
    pub task_type: Option<TaskType>,
    pub target_regions: Vec<RegionId>,
    pub trace: Vec<TraceEntry>,
}

impl Default for PlannerState {
    fn default() -> Self {
        Self::new()
    }
}

impl PlannerState {
    pub fn new() -> Self {
        Self { phase: Phase::Received, task_type: None, target_regions: Vec::new(), trace: Vec::new() }
    }

    /// Action names in trace order.
    pub fn action_names(&self) -> Vec<&'static str> {
        self.trace.iter().map(|e| e.action.name()).collect()
    }

    /// Successor state after `action`; the action is appended to the trace.
    pub fn step(mut self, action: Action, env: Environment) -> Result<PlannerState> {
        let illegal = |phase: Phase, action: &Action| PlannerError::IllegalTransition { phase, action: action.name() };
        let next = match (&action, self.phase, self.task_type) {
            (Action::Classify { decision }, Phase::Received, None) => {
                if decision.task_type == TaskType::Report && !decision.target_regions.is_empty() {
                    return Err(illegal(self.phase, &action));
                }
                self.task_type = Some(decision.task_type);
                self.target_regions = decision.target_regions.clone();
                Phase::Classified
            }
            (Action::Normalize { queries }, Phase::Classified, Some(_)) if !queries.is_empty() => Phase::Normalized,
            (Action::Dispatch { regions }, Phase::Normalized, Some(task)) => {
                let expected: &[RegionId] = match task {
                    TaskType::Qa => &self.target_regions,
                    TaskType::Report => &RegionId::ALL,
                };
                if regions.is_empty() || regions.as_slice() != expected {
                    return Err(illegal(self.phase, &action));
                }
                Phase::Dispatched
            }
            (Action::Answer { .. }, Phase::Dispatched, Some(TaskType::Qa)) => Phase::Done,
            (Action::Aggregate { .. }, Phase::Dispatched, Some(TaskType::Report)) => Phase::Aggregating,
            (Action::Report { .. }, Phase::Aggregating, Some(TaskType::Report)) => Phase::Done,
            _ => return Err(illegal(self.phase, &action)),
        };
        self.phase = next;
        let step = self.trace.len();
        self.trace.push(TraceEntry { step, phase: next, action, env });
        Ok(self)
    }
}
