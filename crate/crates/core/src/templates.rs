//! Prompt templates with `{{placeholder}}` slots.
//!
//! The four planner prompts ship as text assets under `templates/` and are
//! compiled in; a directory with files of the same names overrides them.
//! Rendering substitutes only the keys it is given, in a single pass, so
//! output-format markers such as `{{generated_question}}` survive and
//! user text containing braces is never re-expanded.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    TaskClassification,
    QueryRewriting,
    AnswerGeneration,
    ReportGeneration,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 4] = [
        TemplateKind::TaskClassification,
        TemplateKind::QueryRewriting,
        TemplateKind::AnswerGeneration,
        TemplateKind::ReportGeneration,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateKind::TaskClassification => "task_classification.txt",
            TemplateKind::QueryRewriting => "query_rewriting.txt",
            TemplateKind::AnswerGeneration => "answer_generation.txt",
            TemplateKind::ReportGeneration => "report_generation.txt",
        }
    }

    /// Slots each template must contain.
    pub fn required_slots(self) -> &'static [&'static str] {
        match self {
            TemplateKind::TaskClassification => &["user_question"],
            TemplateKind::QueryRewriting => &["user_question", "region"],
            TemplateKind::AnswerGeneration => &["user_question", "reference_question", "reference_answer"],
            TemplateKind::ReportGeneration => &["inputs", "examples"],
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            TemplateKind::TaskClassification => include_str!("../templates/task_classification.txt"),
            TemplateKind::QueryRewriting => include_str!("../templates/query_rewriting.txt"),
            TemplateKind::AnswerGeneration => include_str!("../templates/answer_generation.txt"),
            TemplateKind::ReportGeneration => include_str!("../templates/report_generation.txt"),
        }
    }
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {template} lacks the {{{{{slot}}}}} slot")]
    MissingSlot { template: &'static str, slot: &'static str },
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    texts: [String; 4],
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self { texts: TemplateKind::ALL.map(|k| k.builtin().to_string()) }
    }

    /// Loads templates from `dir`; files that are absent keep the built-in text.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        for (i, kind) in TemplateKind::ALL.into_iter().enumerate() {
            let path = dir.as_ref().join(kind.file_name());
            if path.exists() {
                set.texts[i] = fs::read_to_string(&path)
                    .map_err(|source| TemplateError::Io { path: path.display().to_string(), source })?;
            }
        }
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        for kind in TemplateKind::ALL {
            let slots = slots(self.get(kind));
            for &slot in kind.required_slots() {
                if !slots.iter().any(|s| s == slot) {
                    return Err(TemplateError::MissingSlot { template: kind.file_name(), slot });
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, kind: TemplateKind) -> &str {
        &self.texts[kind as usize]
    }

    pub fn render(&self, kind: TemplateKind, vars: &[(&str, &str)]) -> String {
        render(self.get(kind), vars)
    }
}

/// Names of all `{{...}}` slots in order of appearance.
pub fn slots(template: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                out.push(after[..end].trim().to_string());
                rest = &after[end + 2..];
            }
            None => break,
        }
    }
    out
}

/// Replaces `{{key}}` for each provided key; unknown slots are left intact.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            out.push_str(&rest[start..]);
            return out;
        };
        let key = after[..end].trim();
        match vars.iter().find(|(k, _)| *k == key) {
            Some((_, v)) => out.push_str(v),
            None => out.push_str(&rest[start..start + 2 + end + 2]),
        }
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    out
}
