//! Deterministic offline backends.
//!
//! [`MockLlm`] recognizes which prompt it was sent by the section markers of
//! the prompt templates and answers from fixed rule tables, so every reply
//! is a pure function of the request. [`ScriptedLlm`] replays a queue of
//! canned replies. [`MockEmbedder`] is a hashed bag-of-words with a seeded
//! sparse random projection.

use std::collections::VecDeque;
use std::sync::Mutex;

use super::{BackendError, ChatRequest, ChatResponse, EmbeddingClient, LlmClient};
use crate::planner::QuestionTemplate;
use crate::region::{mentioned_regions, normalize_words, RegionId};
use crate::rng::{fnv1a64, SplitMix64};

pub const MOCK_EMBEDDING_DIM: usize = 256;

/// Marker separating the task text from the vision payload in tool requests.
pub const IMAGE_START: &str = "<im_start>";
pub const IMAGE_END: &str = "<im_end>";

// Word prefix, abnormality name used in rewritten questions.
const ABNORMALITY_CUES: &[(&str, &str)] = &[
    ("ground glass", "ground-glass opacity"),
    ("nodul", "nodule"),
    ("mass", "mass"),
    ("effusion", "effusion"),
    ("fluid", "fluid"),
    ("opacit", "opacity"),
    ("consolidation", "consolidation"),
    ("atelecta", "atelectasis"),
    ("emphysema", "emphysema"),
    ("calcif", "calcification"),
    ("lymphadenopathy", "lymphadenopathy"),
    ("enlarged lymph", "lymphadenopathy"),
    ("fracture", "fracture"),
    ("lesion", "lesion"),
    ("thickening", "thickening"),
    ("hernia", "hernia"),
    ("cyst", "cyst"),
    ("calcul", "calculus"),
    ("stone", "stone"),
    ("bronchiectasis", "bronchiectasis"),
    ("cardiomegaly", "cardiomegaly"),
    ("pneumothorax", "pneumothorax"),
    ("goiter", "goiter"),
];

const SIZE_CUES: &[&str] = &["how big", "how large", "size", "measur", "dimension", "diameter"];
const LOCATION_CUES: &[&str] = &["where", "locat", "which part", "which side"];
const PRESENCE_OPENERS: &[&str] = &["is", "are", "can", "does", "do", "any", "has", "have"];

fn abnormal_findings(region: RegionId) -> &'static [&'static str] {
    match region {
        RegionId::TracheaBronchi => &["Peribronchial thickening is noted in the lower lobe bronchi."],
        RegionId::Thyroid => &["The right thyroid lobe contains a hypodense nodule measuring 8 mm."],
        RegionId::Lung => &[
            "Ground-glass opacities are observed in the right lung, especially in the peripheral areas.",
            "Millimetric nodules are observed in both lungs, the largest measuring 5 mm in the left upper lobe.",
            "Subsegmental atelectasis areas are noted in the lower lobes.",
        ],
        RegionId::Heart => &[
            "Cardiomegaly is observed.",
            "Coronary artery wall calcifications are observed.",
        ],
        RegionId::Mediastinum => &["Lymphadenopathy measuring up to 14 mm is observed in the mediastinum."],
        RegionId::Pleura => &["There is a pleural effusion with loculation measuring 2 cm at its thickest point."],
        RegionId::Esophagus => &["A hiatal hernia is observed."],
        RegionId::Abdomen => &["A 7 mm diameter calculus was observed in the gallbladder lumen."],
        RegionId::Bone => &["Diffuse degenerative changes and osteophytic taperings are noted in the thoracic vertebrae."],
        RegionId::Breast => &["A well-circumscribed soft tissue density is observed in the left breast."],
    }
}

/// Words of `text` (normalized) with a leading space, for word-prefix tests.
fn padded(text: &str) -> String {
    format!(" {}", normalize_words(text))
}

fn has_word_prefix(padded: &str, cue: &str) -> bool {
    padded.contains(&format!(" {cue}"))
}

/// Regions mentioned in a question, in reporting order.
pub fn mock_regions(query: &str) -> Vec<RegionId> {
    mentioned_regions(query)
}

pub fn mock_abnormality(query: &str) -> Option<&'static str> {
    let p = padded(query);
    ABNORMALITY_CUES.iter().find(|(cue, _)| has_word_prefix(&p, cue)).map(|(_, name)| *name)
}

/// Template choice for a free-form question.
pub fn mock_rewrite(query: &str, region: RegionId) -> String {
    let p = padded(query);
    let abnormality = mock_abnormality(query);
    let named = abnormality.unwrap_or("abnormality");
    let template = if SIZE_CUES.iter().any(|c| has_word_prefix(&p, c)) {
        QuestionTemplate::Size
    } else if LOCATION_CUES.iter().any(|c| has_word_prefix(&p, c)) {
        QuestionTemplate::Location
    } else if abnormality.is_some()
        && p.split_whitespace().next().is_some_and(|w| PRESENCE_OPENERS.contains(&w))
    {
        QuestionTemplate::Presence
    } else {
        QuestionTemplate::Abnormalities
    };
    template.render(region, named)
}

/// Value of a `Label: value` line.
fn line_value<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    text.lines().rev().find_map(|l| l.trim_start().strip_prefix(label)).map(str::trim)
}

/// Text between `start` and the next `end` marker (or end of text).
fn section<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.rfind(start)? + start.len();
    let rest = &text[from..];
    Some(rest[..rest.find(end).unwrap_or(rest.len())].trim())
}

/// Strips the `Region: ` input label and the bracketed echo from a finding line.
fn finding_body(line: &str) -> &str {
    let line = line.trim().trim_start_matches("- ");
    let body = line.split_once(": ").map_or(line, |(_, b)| b);
    body.split(" [").next().unwrap_or(body).trim()
}

fn pseudo_logprobs(text: &str) -> Vec<f64> {
    text.split_whitespace().map(|w| -((fnv1a64(w.as_bytes()) % 1000) as f64) / 2000.0).collect()
}

/// A historical-style report for fixtures: every region gets its normal
/// sentence, or with probability 1/3 one of its abnormal findings.
pub fn synthetic_report(seed: u64) -> String {
    let mut rng = SplitMix64::with_stream(seed, 0x5245504F5254);
    RegionId::ALL
        .iter()
        .map(|r| {
            let pool = abnormal_findings(*r);
            if rng.below(3) == 0 {
                pool[rng.below(pool.len() as u64) as usize]
            } else {
                r.normal_sentence()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Rule-based LLM that records every request it receives.
#[derive(Debug, Default)]
pub struct MockLlm {
    requests: Mutex<Vec<ChatRequest>>,
}

impl MockLlm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    /// The reply for `req`, without recording it.
    pub fn reply(req: &ChatRequest) -> String {
        let text = req.user_text();
        if let Some(adapter) = &req.adapter_id {
            return Self::tool_reply(adapter, req.vision_ref.as_deref(), &text);
        }
        if text.contains("Input structured finding:") {
            let inputs = section(&text, "Input structured finding:", "\nExamples:").unwrap_or("");
            let body: Vec<&str> = inputs.lines().filter(|l| !l.trim().is_empty()).map(finding_body).collect();
            return body.join(" ");
        }
        if text.contains("Reference Answer:") {
            let answer = section(&text, "Reference Answer:", "\n\nOutput Format:").unwrap_or("");
            return format!("Answer: {answer}");
        }
        if text.contains("Rewritten Clinical Query:") {
            let question = line_value(&text, "User Question:").unwrap_or("");
            let region = line_value(&text, "Target Anatomical Region:")
                .and_then(|r| r.parse::<RegionId>().ok())
                .unwrap_or(RegionId::Lung);
            return format!("Rewritten Clinical Query: {}", mock_rewrite(question, region));
        }
        if text.contains("task_type") {
            let query = line_value(&text, "User Query:").unwrap_or("");
            let p = padded(query);
            let (task, regions) = if has_word_prefix(&p, "report") {
                ("Report", Vec::new())
            } else {
                ("QA", mock_regions(query))
            };
            let names: Vec<String> = regions.iter().map(|r| format!("\"{}\"", r.display_name())).collect();
            return format!(
                "```json\n{{\n  \"task_type\": \"{task}\",\n  \"target_region\": [{}]\n}}\n```",
                names.join(", ")
            );
        }
        format!("Acknowledged: {}", text.lines().next().unwrap_or(""))
    }

    fn tool_reply(adapter_id: &str, vision_ref: Option<&str>, text: &str) -> String {
        let region = adapter_id
            .strip_prefix("lora-")
            .and_then(|r| r.parse::<RegionId>().ok())
            .unwrap_or(RegionId::Lung);
        let question = text.split(IMAGE_START).next().unwrap_or("").trim();
        // A study's findings depend only on the study and region.
        let finding = match vision_ref {
            Some(v) => {
                let h = fnv1a64(format!("{v}/{region}").as_bytes());
                let pool = abnormal_findings(region);
                if h.is_multiple_of(3) {
                    pool[(h / 3) as usize % pool.len()]
                } else {
                    region.normal_sentence()
                }
            }
            None => region.normal_sentence(),
        };
        format!("{finding} [{}: {question}]", region.display_name())
    }
}

impl LlmClient for MockLlm {
    fn backend_id(&self) -> String {
        "mock-llm".into()
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.requests.lock().unwrap_or_else(|e| e.into_inner()).push(req.clone());
        let text = Self::reply(req);
        let logprobs = Some(pseudo_logprobs(&text));
        Ok(ChatResponse { text, logprobs })
    }
}

/// Replays queued replies in order; errors once the queue is empty.
#[derive(Debug, Default)]
pub struct ScriptedLlm {
    replies: Mutex<VecDeque<Result<String, BackendError>>>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedLlm {
    pub fn new(replies: impl IntoIterator<Item = Result<String, BackendError>>) -> Self {
        Self { replies: Mutex::new(replies.into_iter().collect()), requests: Mutex::default() }
    }

    pub fn texts<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::new(replies.into_iter().map(|s| Ok(s.into())))
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl LlmClient for ScriptedLlm {
    fn backend_id(&self) -> String {
        "scripted-llm".into()
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.requests.lock().unwrap_or_else(|e| e.into_inner()).push(req.clone());
        let next = self.replies.lock().unwrap_or_else(|e| e.into_inner()).pop_front();
        match next {
            Some(Ok(text)) => Ok(ChatResponse { text, logprobs: None }),
            Some(Err(e)) => Err(e),
            None => Err(BackendError::Unavailable("script exhausted".into())),
        }
    }
}

/// Hashed bag of words with a seeded sparse random projection.
///
/// Each word contributes twice: once on its own and once salted with the
/// index of the `;`-separated segment it appears in, so reordering segments
/// changes the vector. Output is L2-normalized; text without words maps to
/// the zero vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
}

const NONZEROS_PER_FEATURE: usize = 8;

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(MOCK_EMBEDDING_DIM, 0)
    }
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn add_feature(&self, acc: &mut [f64], feature: &str) {
        let mut rng = SplitMix64::new(self.seed ^ fnv1a64(feature.as_bytes()));
        for _ in 0..NONZEROS_PER_FEATURE {
            let idx = rng.below(self.dim as u64) as usize;
            acc[idx] += if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
        }
    }

    pub fn embed_text(&self, text: &str) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.dim];
        for (seg, part) in text.split(';').enumerate() {
            for word in normalize_words(part).split_whitespace() {
                self.add_feature(&mut acc, word);
                self.add_feature(&mut acc, &format!("{seg}\u{1f}{word}"));
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        acc.into_iter().map(|v| v as f32).collect()
    }
}

impl EmbeddingClient for MockEmbedder {
    fn backend_id(&self) -> String {
        format!("mock-embedder-{}", self.dim)
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        Ok(self.embed_text(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routes_heart_question() {
        assert_eq!(mock_regions("Is there fluid around the heart?"), vec![RegionId::Heart]);
        assert_eq!(mock_regions("Describe the heart and pleura"), vec![RegionId::Heart, RegionId::Pleura]);
        assert!(mock_regions("How are you?").is_empty());
    }

    #[test]
    fn rewrite_rules() {
        assert_eq!(mock_rewrite("anything wrong with the lungs?", RegionId::Lung), "What are the abnormalities in the lung?");
        assert_eq!(
            mock_rewrite("how big is the nodule in the lung?", RegionId::Lung),
            "What is the approximate size of the nodule in the lung?"
        );
        assert_eq!(
            mock_rewrite("how large is it?", RegionId::Pleura),
            "What is the approximate size of the abnormality in the pleura?"
        );
        assert_eq!(mock_rewrite("Is there fluid around the heart?", RegionId::Heart), "Can fluid be identified in the heart?");
        assert_eq!(mock_rewrite("where is the mass?", RegionId::Lung), "Where is the mass located in the image?");
    }

    #[test]
    fn tool_reply_echoes_region_and_question() {
        let mut req = ChatRequest::user(format!("Is there any abnormality in the heart?\n{IMAGE_START}<vision/>{IMAGE_END}"));
        req.adapter_id = Some("lora-heart".into());
        req.vision_ref = Some("s1".into());
        let out = MockLlm::reply(&req);
        assert!(out.ends_with("[Heart: Is there any abnormality in the heart?]"), "{out}");
        assert_eq!(out, MockLlm::reply(&req));
    }

    #[test]
    fn scripted_replays_then_fails() {
        let llm = ScriptedLlm::texts(["a"]);
        assert_eq!(llm.complete(&ChatRequest::user("x")).unwrap().text, "a");
        assert!(matches!(llm.complete(&ChatRequest::user("x")), Err(BackendError::Unavailable(_))));
        assert_eq!(llm.requests().len(), 2);
    }

    #[test]
    fn embedder_is_unit_norm_and_order_sensitive() {
        let e = MockEmbedder::default();
        let a = e.embed_text("heart normal; lung nodule");
        let b = e.embed_text("lung nodule; heart normal");
        let norm: f64 = a.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_ne!(a, b);
        assert_eq!(a, e.embed_text("heart normal; lung nodule"));
        assert!(e.embed_text(" ;; ").iter().all(|v| *v == 0.0));
    }
}
