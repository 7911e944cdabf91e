//! Benchmark harness: dataset ingestion, pipeline execution, accuracy and
//! per-category reporting, skill-selection histograms, and the
//! router-by-aggregator ablation grid.
//!
//! Dataset manifests are JSON Lines: one object per line with `id`,
//! `task_context`, `question`, `options`, `gold_index`, `assets`
//! (`{modality, uri}` pairs), and free-form `categories`. Reports serialize
//! to a single JSON document and render as plain-text tables for terminals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aggregator::{aggregate, direct_answer, AggregationInput, FinalAnswer};
use crate::cache::ExpertCache;
use crate::experts::{run_selected, RunOptions};
use crate::gateway::{Gateway, MediaRef};
use crate::registry::{Modality, SkillId, TaxonomyRegistry, UnknownBackend};
use crate::router::{route, Query, QueryError, RoutingDecision};

/// One multiple-choice benchmark item.
#[derive(Debug, Clone)]
pub struct BenchmarkItem {
    pub id: String,
    pub task_context: String,
    pub question: String,
    pub options: Vec<String>,
    pub gold_index: usize,
    pub assets: Vec<MediaRef>,
    pub categories: BTreeMap<String, String>,
}

impl BenchmarkItem {
    pub fn new(
        id: impl Into<String>,
        task_context: impl Into<String>,
        question: impl Into<String>,
        options: Vec<String>,
        gold_index: usize,
        assets: Vec<MediaRef>,
        categories: BTreeMap<String, String>,
    ) -> Result<Self, DatasetError> {
        let item = BenchmarkItem {
            id: id.into(),
            task_context: task_context.into(),
            question: question.into(),
            options,
            gold_index,
            assets,
            categories,
        };
        item.validate()?;
        Ok(item)
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.id.trim().is_empty() {
            return Err(DatasetError::invalid(self.id.clone(), "empty id"));
        }
        if self.question.trim().is_empty() {
            return Err(DatasetError::invalid(self.id.clone(), "empty question"));
        }
        if self.options.len() < 2 {
            return Err(DatasetError::invalid(
                self.id.clone(),
                format!("needs at least 2 options, got {}", self.options.len()),
            ));
        }
        if self.gold_index >= self.options.len() {
            return Err(DatasetError::invalid(
                self.id.clone(),
                format!(
                    "gold_index {} out of range for {} options",
                    self.gold_index,
                    self.options.len()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read dataset {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Line { line: usize, message: String },

    #[error("item {id}: {message}")]
    Invalid { id: String, message: String },
}

impl DatasetError {
    fn invalid(id: String, message: impl Into<String>) -> Self {
        DatasetError::Invalid {
            id,
            message: message.into(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemDoc {
    id: String,
    #[serde(default)]
    task_context: String,
    question: String,
    options: Vec<String>,
    gold_index: usize,
    #[serde(default)]
    assets: Vec<AssetDoc>,
    #[serde(default)]
    categories: BTreeMap<String, String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssetDoc {
    modality: Modality,
    uri: String,
}

/// Loads a JSONL manifest. Asset digests are computed lazily on first use,
/// not at load time.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<BenchmarkItem>, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text)
}

/// Parses manifest text; one JSON object per non-empty line.
pub fn parse_dataset(text: &str) -> Result<Vec<BenchmarkItem>, DatasetError> {
    let mut items = Vec::new();
    let mut seen_ids = BTreeMap::new();
    for (index, line) in text.lines().enumerate() {
        let line_no = index + 1;
        if line.trim().is_empty() {
            continue;
        }
        let doc: ItemDoc = serde_json::from_str(line).map_err(|e| DatasetError::Line {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(previous) = seen_ids.insert(doc.id.clone(), line_no) {
            return Err(DatasetError::Line {
                line: line_no,
                message: format!("duplicate id {:?} (first seen on line {previous})", doc.id),
            });
        }
        let assets = doc
            .assets
            .into_iter()
            .map(|a| MediaRef::new(a.modality, a.uri))
            .collect();
        let item = BenchmarkItem::new(
            doc.id,
            doc.task_context,
            doc.question,
            doc.options,
            doc.gold_index,
            assets,
            doc.categories,
        )
        .map_err(|e| DatasetError::Line {
            line: line_no,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Exact ratio kept as integers; formatting derives from the raw counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Self {
        Fraction { num, den }
    }

    pub fn as_f64(&self) -> f64 {
        if self.den == 0 {
            0.0
        } else {
            self.num as f64 / self.den as f64
        }
    }

    /// Percent with one decimal place, matching the report tables.
    pub fn percent(&self) -> String {
        format!("{:.1}", self.as_f64() * 100.0)
    }

    /// Exact equality via cross-multiplication.
    pub fn exact_eq(&self, other: &Fraction) -> bool {
        (self.num as u128) * (other.den as u128) == (other.num as u128) * (self.den as u128)
    }
}

impl Serialize for Fraction {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("Fraction", 3)?;
        s.serialize_field("num", &self.num)?;
        s.serialize_field("den", &self.den)?;
        s.serialize_field("percent", &self.percent())?;
        s.end()
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Doc {
            num: u64,
            den: u64,
            #[serde(default)]
            #[allow(dead_code)]
            percent: Option<String>,
        }
        let doc = Doc::deserialize(deserializer)?;
        Ok(Fraction::new(doc.num, doc.den))
    }
}

/// Pipeline mode: the full route-caption-aggregate pipeline, or the
/// single-backend direct baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    #[serde(rename = "pipeline")]
    Pipeline,
    #[serde(rename = "direct-baseline")]
    DirectBaseline,
}

/// Everything needed to run items: registry, gateway, cache, backend
/// bindings, and limits.
#[derive(Clone)]
pub struct PipelineConfig {
    pub registry: Arc<TaxonomyRegistry>,
    pub gateway: Gateway,
    pub cache: Option<Arc<ExpertCache>>,
    /// Router backend id; falls back to the registry's router section.
    pub router_backend: Option<String>,
    /// Aggregator backend id; falls back to the registry's aggregator section.
    pub aggregator_backend: Option<String>,
    /// Backend id for the direct baseline; defaults to the aggregator binding.
    pub direct_backend: Option<String>,
    pub expert_overrides: BTreeMap<SkillId, String>,
    pub mode: RunMode,
    /// Strict mode fails an item on any expert failure; lenient substitutes
    /// placeholders.
    pub strict: bool,
    /// Items processed concurrently.
    pub item_concurrency: usize,
    /// Expert calls in flight per item.
    pub expert_fan_out: usize,
}

impl PipelineConfig {
    pub fn new(registry: Arc<TaxonomyRegistry>, gateway: Gateway) -> Self {
        PipelineConfig {
            registry,
            gateway,
            cache: None,
            router_backend: None,
            aggregator_backend: None,
            direct_backend: None,
            expert_overrides: BTreeMap::new(),
            mode: RunMode::Pipeline,
            strict: true,
            item_concurrency: 4,
            expert_fan_out: 4,
        }
    }

    pub fn with_bindings(mut self, router: &str, aggregator: &str) -> Self {
        self.router_backend = Some(router.to_string());
        self.aggregator_backend = Some(aggregator.to_string());
        self
    }

    fn router_backend_id(&self) -> Result<String, EvalError> {
        self.router_backend
            .clone()
            .or_else(|| self.registry.router_settings().backend.clone())
            .ok_or(EvalError::NoRouterBackend)
    }

    fn aggregator_backend_id(&self) -> Result<String, EvalError> {
        self.aggregator_backend
            .clone()
            .or_else(|| self.registry.aggregator_settings().backend.clone())
            .ok_or(EvalError::NoAggregatorBackend)
    }

    fn direct_backend_id(&self) -> Result<String, EvalError> {
        match &self.direct_backend {
            Some(id) => Ok(id.clone()),
            None => self.aggregator_backend_id(),
        }
    }

    /// Checks that every referenced backend resolves.
    fn validate_bindings(&self) -> Result<(), EvalError> {
        match self.mode {
            RunMode::Pipeline => {
                self.registry.backend(&self.router_backend_id()?)?;
                self.registry.backend(&self.aggregator_backend_id()?)?;
            }
            RunMode::DirectBaseline => {
                self.registry.backend(&self.direct_backend_id()?)?;
            }
        }
        for (skill, backend) in &self.expert_overrides {
            self.registry.backend(backend).map_err(|_| {
                EvalError::UnknownBackend(UnknownBackend(format!(
                    "{backend} (override for {skill})"
                )))
            })?;
        }
        Ok(())
    }

    /// Stable digest over the registry fingerprint, bindings, and run knobs.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.registry.fingerprint().as_bytes());
        hasher.update(format!(
            "|router={:?}|aggregator={:?}|direct={:?}|mode={:?}|strict={}|",
            self.router_backend, self.aggregator_backend, self.direct_backend, self.mode,
            self.strict,
        ));
        for (skill, backend) in &self.expert_overrides {
            hasher.update(format!("{skill}->{backend};"));
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    EmptyDataset,

    #[error("no router backend configured")]
    NoRouterBackend,

    #[error("no aggregator backend configured")]
    NoAggregatorBackend,

    #[error(transparent)]
    UnknownBackend(#[from] UnknownBackend),

    #[error("ablation requires at least one router and one aggregator backend")]
    EmptyAblationAxis,
}

/// Compact expert output provenance kept in run records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertOutputRecord {
    pub skill_id: SkillId,
    pub backend_id: String,
    pub from_cache: bool,
    pub latency_ms: u64,
    pub text_digest: String,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct TokenCount {
    pub prompt: u64,
    pub completion: u64,
}

/// Full provenance for one evaluated item.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub gold_index: usize,
    pub categories: BTreeMap<String, String>,
    pub decision: Option<RoutingDecision>,
    pub expert_outputs: Vec<ExpertOutputRecord>,
    pub answer: Option<FinalAnswer>,
    pub correct: bool,
    pub failed: bool,
    pub error: Option<String>,
    pub stage_latency_ms: BTreeMap<String, u64>,
    pub stage_tokens: BTreeMap<String, TokenCount>,
    pub warnings: Vec<String>,
}

impl ItemRecord {
    fn empty(item: &BenchmarkItem) -> Self {
        ItemRecord {
            item_id: item.id.clone(),
            gold_index: item.gold_index,
            categories: item.categories.clone(),
            decision: None,
            expert_outputs: Vec::new(),
            answer: None,
            correct: false,
            failed: false,
            error: None,
            stage_latency_ms: BTreeMap::new(),
            stage_tokens: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }
}

/// Aggregated results of one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    /// Wall-clock timestamp; excluded from determinism comparisons.
    pub generated_at_ms: u64,
    pub config_fingerprint: String,
    pub mode: RunMode,
    pub items: u64,
    pub failed: u64,
    pub overall_accuracy: Fraction,
    /// Accuracy per category tag name, then per tag value.
    pub per_category: BTreeMap<String, BTreeMap<String, Fraction>>,
    pub selection_histogram: BTreeMap<SkillId, u64>,
    pub fallback_rate: Fraction,
    pub records: Vec<ItemRecord>,
}

impl RunReport {
    /// JSON without the timestamp field: the determinism-comparable form.
    pub fn canonical_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("report serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("generated_at_ms");
        }
        serde_json::to_string(&value).expect("value serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text summary table for terminals.
    pub fn render_summary(&self) -> String {
        let mut out = String::new();
        let correct = self.overall_accuracy.num;
        writeln!(out, "items:    {}", self.items).unwrap();
        writeln!(out, "failed:   {}", self.failed).unwrap();
        writeln!(out, "correct:  {correct}").unwrap();
        writeln!(out, "accuracy: {}%", self.overall_accuracy.percent()).unwrap();
        writeln!(out, "fallback: {}%", self.fallback_rate.percent()).unwrap();
        for (tag, values) in &self.per_category {
            writeln!(out, "by {tag}:").unwrap();
            for (value, acc) in values {
                writeln!(
                    out,
                    "  {value:<24} {}/{}  {}%",
                    acc.num,
                    acc.den,
                    acc.percent()
                )
                .unwrap();
            }
        }
        let mean = |stage: &str| -> u64 {
            let total: u64 = self
                .records
                .iter()
                .map(|r| r.stage_latency_ms.get(stage).copied().unwrap_or(0))
                .sum();
            total / self.items.max(1)
        };
        writeln!(
            out,
            "mean stage latency ms: router {} / experts {} / aggregator {}",
            mean("router"),
            mean("experts"),
            mean("aggregator")
        )
        .unwrap();
        out
    }
}

/// Counts each selected skill across records.
pub fn selection_histogram(records: &[ItemRecord]) -> BTreeMap<SkillId, u64> {
    let mut histogram = BTreeMap::new();
    for record in records {
        if let Some(decision) = &record.decision {
            for skill in &decision.selected {
                *histogram.entry(*skill).or_insert(0) += 1;
            }
        }
    }
    histogram
}

/// Runs one item through the configured pipeline, capturing every failure in
/// the record instead of propagating it.
pub async fn run_item(config: &PipelineConfig, item: &BenchmarkItem) -> ItemRecord {
    let mut record = ItemRecord::empty(item);

    let query = match Query::new(
        item.task_context.clone(),
        item.question.clone(),
        item.options.clone(),
        item.assets.clone(),
    ) {
        Ok(q) => q,
        Err(e @ QueryError::EmptyQuestion) | Err(e @ QueryError::TooFewOptions(_)) => {
            record.failed = true;
            record.error = Some(format!("query: {e}"));
            return record;
        }
    };

    match config.mode {
        RunMode::Pipeline => run_pipeline_item(config, item, &query, &mut record).await,
        RunMode::DirectBaseline => run_direct_item(config, item, &query, &mut record).await,
    }
    record
}

async fn run_pipeline_item(
    config: &PipelineConfig,
    item: &BenchmarkItem,
    query: &Query,
    record: &mut ItemRecord,
) {
    let registry = &config.registry;
    let router_id = match config.router_backend_id() {
        Ok(id) => id,
        Err(e) => return fail(record, e.to_string()),
    };
    let router_backend = match registry.backend(&router_id) {
        Ok(b) => b,
        Err(e) => return fail(record, e.to_string()),
    };
    let (decision, router_response) =
        match route(registry, &config.gateway, router_backend, query).await {
            Ok(r) => r,
            Err(e) => return fail(record, e.to_string()),
        };
    record
        .stage_latency_ms
        .insert("router".to_string(), router_response.latency_ms);
    record.stage_tokens.insert(
        "router".to_string(),
        TokenCount {
            prompt: router_response.prompt_tokens,
            completion: router_response.completion_tokens,
        },
    );
    record.decision = Some(decision.clone());

    let options = RunOptions {
        fan_out: config.expert_fan_out,
        lenient: !config.strict,
        overrides: config.expert_overrides.clone(),
    };
    let run = match run_selected(
        &decision,
        query,
        registry,
        &config.gateway,
        config.cache.as_deref(),
        &options,
    )
    .await
    {
        Ok(run) => run,
        Err(e) => return fail(record, e.to_string()),
    };
    record.warnings.extend(run.warnings.clone());
    record.expert_outputs = run
        .bundle
        .outputs
        .iter()
        .map(|o| ExpertOutputRecord {
            skill_id: o.skill_id,
            backend_id: o.backend_id.clone(),
            from_cache: o.from_cache,
            latency_ms: o.latency_ms,
            text_digest: hex::encode(Sha256::digest(o.text.as_bytes())),
        })
        .collect();
    let expert_latency: u64 = run.usages.values().map(|u| u.latency_ms).sum();
    let expert_tokens = run.usages.values().fold(TokenCount::default(), |acc, u| {
        TokenCount {
            prompt: acc.prompt + u.prompt_tokens,
            completion: acc.completion + u.completion_tokens,
        }
    });
    record
        .stage_latency_ms
        .insert("experts".to_string(), expert_latency);
    record
        .stage_tokens
        .insert("experts".to_string(), expert_tokens);

    let aggregator_id = match config.aggregator_backend_id() {
        Ok(id) => id,
        Err(e) => return fail(record, e.to_string()),
    };
    let aggregator_backend = match registry.backend(&aggregator_id) {
        Ok(b) => b,
        Err(e) => return fail(record, e.to_string()),
    };
    let settings = registry.aggregator_settings();
    let input = AggregationInput {
        bundle: run.bundle,
        task_description: settings.task_description.clone(),
        task_context: settings
            .include_task_context
            .then(|| query.task_context.clone()),
        question: query.question.clone(),
        options: query.options.clone(),
    };
    let aggregated = match aggregate(
        &config.gateway,
        aggregator_backend,
        &input,
        registry.aggregation_template(),
    )
    .await
    {
        Ok(a) => a,
        Err(e) => return fail(record, e.to_string()),
    };
    record
        .stage_latency_ms
        .insert("aggregator".to_string(), aggregated.usage.latency_ms);
    record.stage_tokens.insert(
        "aggregator".to_string(),
        TokenCount {
            prompt: aggregated.usage.prompt_tokens,
            completion: aggregated.usage.completion_tokens,
        },
    );
    record.warnings.extend(aggregated.warnings);
    record.correct = aggregated.answer.choice_index == item.gold_index;
    record.answer = Some(aggregated.answer);
}

async fn run_direct_item(
    config: &PipelineConfig,
    item: &BenchmarkItem,
    query: &Query,
    record: &mut ItemRecord,
) {
    let backend_id = match config.direct_backend_id() {
        Ok(id) => id,
        Err(e) => return fail(record, e.to_string()),
    };
    let backend = match config.registry.backend(&backend_id) {
        Ok(b) => b,
        Err(e) => return fail(record, e.to_string()),
    };
    let aggregated = match direct_answer(&config.gateway, backend, query).await {
        Ok(a) => a,
        Err(e) => return fail(record, e.to_string()),
    };
    record
        .stage_latency_ms
        .insert("direct".to_string(), aggregated.usage.latency_ms);
    record.stage_tokens.insert(
        "direct".to_string(),
        TokenCount {
            prompt: aggregated.usage.prompt_tokens,
            completion: aggregated.usage.completion_tokens,
        },
    );
    record.warnings.extend(aggregated.warnings);
    record.correct = aggregated.answer.choice_index == item.gold_index;
    record.answer = Some(aggregated.answer);
}

fn fail(record: &mut ItemRecord, message: String) {
    record.failed = true;
    record.correct = false;
    record.error = Some(message);
}

/// Evaluates every item and assembles the report. Items run concurrently up
/// to the configured limit; the report is deterministic under scripted
/// backends (records sorted by item id, timestamp excluded from the
/// canonical form).
pub async fn evaluate(
    config: &PipelineConfig,
    items: &[BenchmarkItem],
) -> Result<RunReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    config.validate_bindings()?;

    let mut records: Vec<ItemRecord> = stream::iter(items.iter())
        .map(|item| run_item(config, item))
        .buffer_unordered(config.item_concurrency.max(1))
        .collect()
        .await;
    records.sort_by(|a, b| a.item_id.cmp(&b.item_id));

    let total = records.len() as u64;
    let correct = records.iter().filter(|r| r.correct).count() as u64;
    let failed = records.iter().filter(|r| r.failed).count() as u64;
    let fallbacks = records
        .iter()
        .filter(|r| r.decision.as_ref().is_some_and(|d| d.fallback_used))
        .count() as u64;

    let mut per_category: BTreeMap<String, BTreeMap<String, (u64, u64)>> = BTreeMap::new();
    for record in &records {
        for (tag, value) in &record.categories {
            let bucket = per_category
                .entry(tag.clone())
                .or_default()
                .entry(value.clone())
                .or_insert((0, 0));
            bucket.1 += 1;
            if record.correct {
                bucket.0 += 1;
            }
        }
    }
    let per_category = per_category
        .into_iter()
        .map(|(tag, values)| {
            (
                tag,
                values
                    .into_iter()
                    .map(|(value, (num, den))| (value, Fraction::new(num, den)))
                    .collect(),
            )
        })
        .collect();

    let selection_histogram = selection_histogram(&records);

    Ok(RunReport {
        generated_at_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
        config_fingerprint: config.fingerprint(),
        mode: config.mode,
        items: total,
        failed,
        overall_accuracy: Fraction::new(correct, total),
        per_category,
        selection_histogram,
        fallback_rate: Fraction::new(fallbacks, total),
        records,
    })
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub router: String,
    pub aggregator: String,
    pub report: RunReport,
}

/// Reports for every (router, aggregator) pair over identical items.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationGrid {
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    pub fn cell(&self, router: &str, aggregator: &str) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.router == router && c.aggregator == aggregator)
    }

    /// Plain-text grid table, one row per (router, aggregator) pair.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let router_width = self
            .cells
            .iter()
            .map(|c| c.router.len())
            .chain(["Router".len()])
            .max()
            .unwrap_or(6);
        let aggregator_width = self
            .cells
            .iter()
            .map(|c| c.aggregator.len())
            .chain(["Aggregator".len()])
            .max()
            .unwrap_or(10);
        writeln!(
            out,
            "{:<router_width$}  {:<aggregator_width$}  {:>8}  {:>6}",
            "Router", "Aggregator", "Accuracy", "Failed"
        )
        .unwrap();
        for cell in &self.cells {
            writeln!(
                out,
                "{:<router_width$}  {:<aggregator_width$}  {:>7}%  {:>6}",
                cell.router,
                cell.aggregator,
                cell.report.overall_accuracy.percent(),
                cell.report.failed
            )
            .unwrap();
        }
        out
    }
}

/// Evaluates every (router, aggregator) pair with identical items. All cells
/// share the config's cache and gateway, so identical expert calls are
/// reused across the whole grid.
pub async fn run_ablation(
    config: &PipelineConfig,
    router_backends: &[String],
    aggregator_backends: &[String],
    items: &[BenchmarkItem],
) -> Result<AblationGrid, EvalError> {
    if router_backends.is_empty() || aggregator_backends.is_empty() {
        return Err(EvalError::EmptyAblationAxis);
    }
    let mut cells = Vec::with_capacity(router_backends.len() * aggregator_backends.len());
    for router in router_backends {
        for aggregator in aggregator_backends {
            let cell_config = config.clone().with_bindings(router, aggregator);
            let report = evaluate(&cell_config, items).await?;
            cells.push(AblationCell {
                router: router.clone(),
                aggregator: aggregator.clone(),
                report,
            });
        }
    }
    Ok(AblationGrid { cells })
}
