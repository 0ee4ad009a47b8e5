//! The two episode pipelines and the engine that holds their shared state.
//!
//! * QA: classify, rewrite per region, compress the study (cached), invoke
//!   each region's tool, and render the final answer with the planner model.
//! * Report: query all ten regions in reporting order with the hub's fixed
//!   questions, retrieve the most similar historical reports using the
//!   concatenated findings, and have the planner model write the report.
//!
//! Every completed episode is appended to the history log under a fresh
//! trace id.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{AdapterError, AdapterRegistry, DEFAULT_ALPHA, DEFAULT_RANK};
use crate::backend::{
    BackendError, ChatRequest, EmbeddingClient, LlmClient, MockEmbedder, MockLlm, IMAGE_END, IMAGE_START,
};
use crate::compression::{
    compress_volume, CompressedVision, CompressionConfig, CompressionError, MoeParams, Projection,
};
use crate::container::FormatError;
use crate::feature_io::{VolumeDims, VolumeFeatures};
use crate::memory::{
    encode_findings, retrieve_topk, EpisodeKind, HistoryLog, HistoryRecord, MemoryError, ExemplarStore, QueryHub,
    DEFAULT_TOP_K,
};
use crate::planner::{
    classify_task, rewrite_query, select_query, Action, Environment, PlannerError, PlannerState, RewrittenQuery,
    TaskDecision, TaskType, TraceEntry,
};
use crate::region::RegionId;
use crate::templates::{TemplateKind, TemplateSet};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("study {0:?} not found")]
    StudyNotFound(String),
    #[error("invalid study: {0}")]
    InvalidStudy(String),
    #[error("expected a {expected} request, the planner classified it as {found}")]
    TaskMismatch { expected: TaskType, found: TaskType },
    #[error("could not route {query:?} to an anatomical region: {detail}")]
    UnknownRegion { query: String, detail: String },
    #[error("adapter {adapter} does not belong to region {region}")]
    AdapterMismatch { adapter: String, region: RegionId },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Planner(PlannerError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl From<PlannerError> for EngineError {
    fn from(e: PlannerError) -> Self {
        match e {
            PlannerError::Backend(b) => EngineError::Backend(b),
            other => EngineError::Planner(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// One piece of the tool model's input, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSegment {
    Text { text: String },
    ImageStart,
    Vision { vision_ref: String, tokens: usize, dim: usize },
    ImageEnd,
}

/// Input to a region tool: task text plus the study's projected vision tokens.
#[derive(Debug, Clone)]
pub struct ReasoningRequest {
    pub task_text: String,
    pub vision: Arc<CompressedVision>,
    /// Key under which the backend finds the vision tokens.
    pub vision_ref: String,
    pub region: RegionId,
    pub adapter_id: String,
}

impl ReasoningRequest {
    pub fn new(task_text: impl Into<String>, vision: Arc<CompressedVision>, vision_ref: impl Into<String>, region: RegionId) -> Self {
        Self {
            task_text: task_text.into(),
            vision,
            vision_ref: vision_ref.into(),
            region,
            adapter_id: format!("lora-{}", region.canonical_name()),
        }
    }

    /// `[task text, image start, vision tokens, image end]`.
    pub fn input_sequence(&self) -> Vec<InputSegment> {
        vec![
            InputSegment::Text { text: self.task_text.clone() },
            InputSegment::ImageStart,
            InputSegment::Vision {
                vision_ref: self.vision_ref.clone(),
                tokens: self.vision.len(),
                dim: self.vision.projected_dim(),
            },
            InputSegment::ImageEnd,
        ]
    }

    /// The input sequence as message text; the vision tokens themselves
    /// travel by reference.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for seg in self.input_sequence() {
            match seg {
                InputSegment::Text { text } => {
                    out.push_str(&text);
                    out.push('\n');
                }
                InputSegment::ImageStart => out.push_str(IMAGE_START),
                InputSegment::Vision { vision_ref, tokens, dim } => {
                    out.push_str(&format!("<vision ref=\"{vision_ref}\" tokens=\"{tokens}\" dim=\"{dim}\"/>"))
                }
                InputSegment::ImageEnd => out.push_str(IMAGE_END),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    pub backend_id: String,
}

impl GenerationResult {
    /// Negative log-likelihood of the generated sequence, when the backend
    /// reports token log-probabilities.
    pub fn sequence_score(&self) -> Option<f64> {
        self.token_logprobs.as_ref().map(|lp| -lp.iter().sum::<f64>())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionFinding {
    pub region: RegionId,
    pub question: String,
    pub statement: String,
}

/// Sends `req` to the region tool tagged with its adapter and records the
/// adapter activation.
pub fn invoke_region_tool(req: &ReasoningRequest, llm: &dyn LlmClient, registry: &AdapterRegistry) -> Result<GenerationResult> {
    let adapter = registry.select_adapter(req.region)?;
    if adapter.adapter_id() != req.adapter_id {
        return Err(EngineError::AdapterMismatch { adapter: req.adapter_id.clone(), region: req.region });
    }
    let mut chat = ChatRequest::user(req.render());
    chat.adapter_id = Some(req.adapter_id.clone());
    chat.vision_ref = Some(req.vision_ref.clone());
    let resp = llm.complete(&chat)?;
    if resp.text.trim().is_empty() {
        return Err(BackendError::Protocol(format!("empty statement from {} tool", req.region)).into());
    }
    Ok(GenerationResult { text: resp.text.trim().to_string(), token_logprobs: resp.logprobs, backend_id: llm.backend_id() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSettings {
    pub compression: CompressionConfig,
    /// Exemplars per report prompt.
    pub top_k: usize,
    /// Width of the projected vision tokens.
    pub projected_dim: usize,
    /// Seed for parameters that are not loaded from files.
    pub seed: u64,
    pub moe_experts: usize,
    pub moe_top_k: usize,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            compression: CompressionConfig::default(),
            top_k: DEFAULT_TOP_K,
            projected_dim: 64,
            seed: 0,
            moe_experts: 4,
            moe_top_k: 2,
        }
    }
}

/// Model endpoints used by the engine.
#[derive(Clone)]
pub struct Backends {
    pub planner: Arc<dyn LlmClient>,
    pub region: Arc<dyn LlmClient>,
    pub embedder: Arc<dyn EmbeddingClient>,
}

impl Backends {
    pub fn mock() -> Self {
        let llm = Arc::new(MockLlm::new());
        Self { planner: llm.clone(), region: llm, embedder: Arc::new(MockEmbedder::default()) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudySummary {
    pub study_id: String,
    pub dims: VolumeDims,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaOutcome {
    pub trace_id: String,
    pub answer: String,
    pub regions: Vec<RegionId>,
    pub rewritten: Vec<RewrittenQuery>,
    pub findings: Vec<RegionFinding>,
    /// Adapters activated in this episode, in order.
    pub activations: Vec<RegionId>,
    pub vision_tokens: usize,
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarUsed {
    pub index: usize,
    pub similarity: f64,
    pub report: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOutcome {
    pub trace_id: String,
    pub report: String,
    pub findings: Vec<RegionFinding>,
    pub exemplars: Vec<ExemplarUsed>,
    pub activations: Vec<RegionId>,
    pub vision_tokens: usize,
    pub trace: Vec<TraceEntry>,
}

type ParamPair = Arc<(MoeParams, Projection)>;

/// Shared engine state. All methods take `&self`; the engine is safe to use
/// from many threads.
/// Per-study slot; the inner lock makes concurrent callers share one
/// compression run.
type VisionSlot = Arc<Mutex<Option<Arc<CompressedVision>>>>;

pub struct Engine {
    settings: EngineSettings,
    backends: Backends,
    templates: TemplateSet,
    registry: AdapterRegistry,
    hub: QueryHub,
    store: RwLock<Arc<ExemplarStore>>,
    history: HistoryLog,
    fixed_params: Option<ParamPair>,
    seeded_params: Mutex<HashMap<usize, ParamPair>>,
    studies: RwLock<BTreeMap<String, Arc<VolumeFeatures>>>,
    vision_cache: Mutex<HashMap<String, VisionSlot>>,
    compressions: AtomicUsize,
}

impl Engine {
    pub fn new(
        settings: EngineSettings,
        backends: Backends,
        templates: TemplateSet,
        registry: AdapterRegistry,
        hub: QueryHub,
        store: ExemplarStore,
        history: HistoryLog,
    ) -> Self {
        Self {
            settings,
            backends,
            templates,
            registry,
            hub,
            store: RwLock::new(Arc::new(store)),
            history,
            fixed_params: None,
            seeded_params: Mutex::new(HashMap::new()),
            studies: RwLock::new(BTreeMap::new()),
            vision_cache: Mutex::new(HashMap::new()),
            compressions: AtomicUsize::new(0),
        }
    }

    /// Mock backends, seeded adapters, the default hub, an empty exemplar
    /// store and an in-memory history.
    pub fn mock(settings: EngineSettings) -> Result<Self> {
        let registry = AdapterRegistry::seeded(settings.seed, settings.projected_dim, settings.projected_dim, DEFAULT_RANK.min(settings.projected_dim), DEFAULT_ALPHA)?;
        Ok(Self::new(
            settings,
            Backends::mock(),
            TemplateSet::builtin(),
            registry,
            QueryHub::default(),
            ExemplarStore::new(crate::backend::MOCK_EMBEDDING_DIM),
            HistoryLog::in_memory(),
        ))
    }

    /// Uses the given MoE and projection for every study instead of seeded ones.
    pub fn with_params(mut self, moe: MoeParams, proj: Projection) -> Result<Self> {
        moe.validate()?;
        proj.validate()?;
        if moe.dim() != proj.input_dim() {
            return Err(CompressionError::DimMismatch(format!(
                "MoE width {} vs projection input {}",
                moe.dim(),
                proj.input_dim()
            ))
            .into());
        }
        self.fixed_params = Some(Arc::new((moe, proj)));
        Ok(self)
    }

    pub fn settings(&self) -> &EngineSettings {
        &self.settings
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn registry(&self) -> &AdapterRegistry {
        &self.registry
    }

    pub fn hub(&self) -> &QueryHub {
        &self.hub
    }

    pub fn history(&self) -> &HistoryLog {
        &self.history
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn store(&self) -> Arc<ExemplarStore> {
        self.store.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Swaps in a new exemplar store; episodes in flight keep the old one.
    pub fn replace_store(&self, store: ExemplarStore) {
        *self.store.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(store);
    }

    /// Registers a study, replacing one with the same id.
    pub fn add_study(&self, vf: VolumeFeatures) -> Result<StudySummary> {
        vf.validate()?;
        let dims = vf.dims();
        self.settings.compression.validate_for(dims.tokens).map_err(|e| {
            EngineError::InvalidStudy(format!("{}: {e}", vf.study_id))
        })?;
        if let Some(p) = &self.fixed_params {
            if p.0.dim() != dims.dim {
                return Err(EngineError::InvalidStudy(format!(
                    "{}: token width {} but loaded parameters expect {}",
                    vf.study_id,
                    dims.dim,
                    p.0.dim()
                )));
            }
        }
        let id = vf.study_id.clone();
        self.studies.write().unwrap_or_else(|e| e.into_inner()).insert(id.clone(), Arc::new(vf));
        self.vision_cache.lock().unwrap_or_else(|e| e.into_inner()).remove(&id);
        Ok(StudySummary { study_id: id, dims })
    }

    pub fn studies(&self) -> Vec<StudySummary> {
        self.studies
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .map(|vf| StudySummary { study_id: vf.study_id.clone(), dims: vf.dims() })
            .collect()
    }

    pub fn study(&self, id: &str) -> Result<Arc<VolumeFeatures>> {
        self.studies
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| EngineError::StudyNotFound(id.to_string()))
    }

    fn params_for(&self, d: usize) -> ParamPair {
        if let Some(p) = &self.fixed_params {
            return p.clone();
        }
        let s = &self.settings;
        self.seeded_params
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .entry(d)
            .or_insert_with(|| {
                Arc::new((
                    MoeParams::seeded(s.seed, d, s.moe_experts, s.moe_top_k.min(s.moe_experts), d),
                    Projection::seeded(s.seed, d, s.projected_dim),
                ))
            })
            .clone()
    }

    /// The study's compressed vision, computed on first use only.
    pub fn compressed(&self, study_id: &str) -> Result<Arc<CompressedVision>> {
        let vf = self.study(study_id)?;
        let slot = self
            .vision_cache
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .entry(study_id.to_string())
            .or_default()
            .clone();
        let mut slot = slot.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(v) = slot.as_ref() {
            return Ok(v.clone());
        }
        let params = self.params_for(vf.dims().dim);
        let cv = Arc::new(compress_volume(&vf, &params.0, &self.settings.compression, &params.1)?);
        self.compressions.fetch_add(1, Ordering::SeqCst);
        *slot = Some(cv.clone());
        Ok(cv)
    }

    /// Number of times any study has been compressed.
    pub fn compression_runs(&self) -> usize {
        self.compressions.load(Ordering::SeqCst)
    }

    fn env(&self, study_id: &str, backend: &dyn LlmClient, note: &str) -> Environment {
        Environment::new(Some(study_id), backend.backend_id(), note)
    }

    fn run_tools(&self, study_id: &str, vision: &Arc<CompressedVision>, questions: &[(RegionId, String)]) -> Result<Vec<RegionFinding>> {
        questions
            .iter()
            .map(|(region, question)| {
                let req = ReasoningRequest::new(question.clone(), vision.clone(), study_id, *region);
                let out = invoke_region_tool(&req, self.backends.region.as_ref(), &self.registry)?;
                Ok(RegionFinding { region: *region, question: question.clone(), statement: out.text })
            })
            .collect()
    }

    /// Region-guided question answering on one study.
    pub fn run_qa(&self, query: &str, study_id: &str, session: &str) -> Result<QaOutcome> {
        self.study(study_id)?;
        let planner = self.backends.planner.as_ref();
        let decision = match classify_task(query, planner, &self.templates) {
            Ok(d) => d,
            Err(PlannerError::UnknownRegion(e)) => {
                return Err(EngineError::UnknownRegion { query: query.to_string(), detail: e.to_string() })
            }
            Err(e) => return Err(e.into()),
        };
        if decision.task_type != TaskType::Qa {
            return Err(EngineError::TaskMismatch { expected: TaskType::Qa, found: decision.task_type });
        }
        if decision.target_regions.is_empty() {
            return Err(EngineError::UnknownRegion {
                query: query.to_string(),
                detail: "the question names no anatomical region".into(),
            });
        }
        let regions = decision.target_regions.clone();
        let mut state = PlannerState::new().step(
            Action::Classify { decision },
            self.env(study_id, planner, "task classification"),
        )?;

        let rewritten = regions
            .iter()
            .map(|r| rewrite_query(query, *r, planner, &self.templates))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        state = state.step(
            Action::Normalize { queries: rewritten.iter().map(|r| r.text.clone()).collect() },
            self.env(study_id, planner, "query rewriting"),
        )?;

        let vision = self.compressed(study_id)?;
        let questions: Vec<_> = regions.iter().copied().zip(rewritten.iter().map(|r| r.text.clone())).collect();
        let findings = self.run_tools(study_id, &vision, &questions)?;
        state = state.step(
            Action::Dispatch { regions: regions.clone() },
            self.env(study_id, self.backends.region.as_ref(), "region tools, one per target region"),
        )?;

        let mut answers = Vec::with_capacity(findings.len());
        for f in &findings {
            let prompt = self.templates.render(
                TemplateKind::AnswerGeneration,
                &[("user_question", query), ("reference_question", &f.question), ("reference_answer", &f.statement)],
            );
            let reply = planner.complete(&ChatRequest::user(prompt))?;
            answers.push(strip_answer_label(&reply.text).to_string());
        }
        let answer = answers.join("\n");
        state = state.step(
            Action::Answer { text: answer.clone() },
            self.env(study_id, planner, "answer rendered by the planner model"),
        )?;

        let trace_id = uuid::Uuid::new_v4().to_string();
        self.history.append(HistoryRecord::new(
            session,
            EpisodeKind::Qa,
            state.trace.clone(),
            &[study_id, query],
            answer.clone(),
            trace_id.clone(),
        ))?;
        Ok(QaOutcome {
            trace_id,
            answer,
            regions: regions.clone(),
            rewritten,
            activations: findings.iter().map(|f| f.region).collect(),
            findings,
            vision_tokens: vision.len(),
            trace: state.trace,
        })
    }

    /// Full report for one study.
    pub fn run_report(&self, study_id: &str, session: &str) -> Result<ReportOutcome> {
        self.study(study_id)?;
        let planner = self.backends.planner.as_ref();
        let mut state = PlannerState::new().step(
            Action::Classify { decision: TaskDecision::report() },
            self.env(study_id, planner, "report requested directly; no classification call"),
        )?;

        let questions = RegionId::ALL
            .iter()
            .map(|r| Ok((*r, select_query(*r, &self.hub)?)))
            .collect::<Result<Vec<_>>>()?;
        state = state.step(
            Action::Normalize { queries: questions.iter().map(|(_, q)| q.clone()).collect() },
            self.env(study_id, planner, "query hub selection"),
        )?;

        let vision = self.compressed(study_id)?;
        let findings = self.run_tools(study_id, &vision, &questions)?;
        state = state.step(
            Action::Dispatch { regions: RegionId::ALL.to_vec() },
            self.env(study_id, self.backends.region.as_ref(), "region tools, all ten regions"),
        )?;

        let store = self.store();
        let exemplars = if store.is_empty() || self.settings.top_k == 0 {
            if self.settings.top_k > 0 {
                tracing::warn!(study_id, "exemplar corpus is empty; generating the report zero-shot");
            }
            Vec::new()
        } else {
            let statements: Vec<&str> = findings.iter().map(|f| f.statement.as_str()).collect();
            let key = encode_findings(&statements, self.backends.embedder.as_ref())?;
            retrieve_topk(&key, &store, self.settings.top_k)?
                .into_iter()
                .map(|r| ExemplarUsed {
                    index: r.index,
                    similarity: r.similarity,
                    report: store.records()[r.index].report.clone(),
                })
                .collect()
        };
        state = state.step(
            Action::Aggregate { exemplars: exemplars.len() },
            Environment::new(Some(study_id), self.backends.embedder.backend_id(), "exemplar retrieval"),
        )?;

        let inputs = findings
            .iter()
            .map(|f| format!("- {}: {}", f.region.display_name(), f.statement))
            .collect::<Vec<_>>()
            .join("\n");
        let examples = if exemplars.is_empty() {
            "None".to_string()
        } else {
            exemplars
                .iter()
                .enumerate()
                .map(|(i, e)| format!("Example {}:\n{}", i + 1, e.report))
                .collect::<Vec<_>>()
                .join("\n\n")
        };
        let prompt = self
            .templates
            .render(TemplateKind::ReportGeneration, &[("inputs", &format!("\n{inputs}\n")), ("examples", &examples)]);
        let reply = planner.complete(&ChatRequest::user(prompt))?;
        let report = reply.text.trim().to_string();
        state = state.step(
            Action::Report { text: report.clone() },
            self.env(study_id, planner, "report written by the planner model"),
        )?;

        let trace_id = uuid::Uuid::new_v4().to_string();
        self.history.append(HistoryRecord::new(
            session,
            EpisodeKind::Report,
            state.trace.clone(),
            &[study_id],
            report.clone(),
            trace_id.clone(),
        ))?;
        Ok(ReportOutcome {
            trace_id,
            report,
            activations: findings.iter().map(|f| f.region).collect(),
            findings,
            exemplars,
            vision_tokens: vision.len(),
            trace: state.trace,
        })
    }
}

fn strip_answer_label(text: &str) -> &str {
    let t = text.trim();
    t.strip_prefix("Answer:").map(str::trim).unwrap_or(t)
}
