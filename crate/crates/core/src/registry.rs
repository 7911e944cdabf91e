//! Skill taxonomy, expert bindings, prompt templates, and backend declarations.
//!
//! A [`TaxonomyRegistry`] is loaded from a single TOML document (see the
//! config reference in the README) and is immutable afterwards, so it can be
//! shared freely across concurrent pipeline executions.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{BackendKind, BackendSpec, ScriptEntry, ScriptMatcher};

/// The TOML document for the default shipped registry.
pub const DEFAULT_CONFIG: &str = include_str!("default_config.toml");

/// Input modality of a media asset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "image")]
    Image,
    #[serde(rename = "video")]
    Video,
    #[serde(rename = "audio")]
    Audio,
    #[serde(rename = "point-cloud-3d")]
    PointCloud3D,
    #[serde(rename = "medical-volume")]
    MedicalVolume,
    #[serde(rename = "document")]
    Document,
    #[serde(rename = "text")]
    Text,
}

impl Modality {
    /// All modalities, in declaration order.
    pub const ALL: [Modality; 7] = [
        Modality::Image,
        Modality::Video,
        Modality::Audio,
        Modality::PointCloud3D,
        Modality::MedicalVolume,
        Modality::Document,
        Modality::Text,
    ];

    /// The canonical config/manifest spelling.
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Video => "video",
            Modality::Audio => "audio",
            Modality::PointCloud3D => "point-cloud-3d",
            Modality::MedicalVolume => "medical-volume",
            Modality::Document => "document",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown modality {s:?}"))
    }
}

/// Which asset modalities satisfy a skill.
///
/// Most skills require a single modality; the OCR, structured-data, and math
/// skills accept either an image or a document, with image preferred when
/// both are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityRequirement {
    Single(Modality),
    ImageOrDocument,
}

impl ModalityRequirement {
    /// True when an asset of modality `m` satisfies this requirement.
    pub fn accepts(&self, m: Modality) -> bool {
        match self {
            ModalityRequirement::Single(required) => *required == m,
            ModalityRequirement::ImageOrDocument => {
                m == Modality::Image || m == Modality::Document
            }
        }
    }

    /// True when any modality in `available` satisfies this requirement.
    pub fn satisfied_by(&self, available: &BTreeSet<Modality>) -> bool {
        available.iter().any(|m| self.accepts(*m))
    }

    /// Acceptable modalities in preference order.
    pub fn candidates(&self) -> &'static [Modality] {
        match self {
            ModalityRequirement::Single(Modality::Image) => &[Modality::Image],
            ModalityRequirement::Single(Modality::Video) => &[Modality::Video],
            ModalityRequirement::Single(Modality::Audio) => &[Modality::Audio],
            ModalityRequirement::Single(Modality::PointCloud3D) => &[Modality::PointCloud3D],
            ModalityRequirement::Single(Modality::MedicalVolume) => &[Modality::MedicalVolume],
            ModalityRequirement::Single(Modality::Document) => &[Modality::Document],
            ModalityRequirement::Single(Modality::Text) => &[Modality::Text],
            ModalityRequirement::ImageOrDocument => &[Modality::Image, Modality::Document],
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ModalityRequirement::Single(m) => m.as_str(),
            ModalityRequirement::ImageOrDocument => "image-or-document",
        }
    }
}

impl fmt::Display for ModalityRequirement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityRequirement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "image-or-document" {
            return Ok(ModalityRequirement::ImageOrDocument);
        }
        Modality::from_str(s)
            .map(ModalityRequirement::Single)
            .map_err(|_| format!("unknown modality requirement {s:?}"))
    }
}

impl Serialize for ModalityRequirement {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ModalityRequirement {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// A taxonomy identifier: a category letter `A`–`G` plus a positive index.
///
/// Canonical form is the uppercase letter immediately followed by the index
/// (`"C2"`). Parsing is case-insensitive. Ordering is lexicographic over the
/// canonical form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SkillId {
    category: u8,
    index: u32,
}

impl SkillId {
    pub fn new(category: char, index: u32) -> Result<Self, String> {
        let upper = category.to_ascii_uppercase();
        if !('A'..='G').contains(&upper) {
            return Err(format!("skill category must be A-G, got {category:?}"));
        }
        if index == 0 {
            return Err("skill index must be positive".to_string());
        }
        Ok(SkillId {
            category: upper as u8,
            index,
        })
    }

    pub fn category(&self) -> char {
        self.category as char
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    /// Canonical textual form, e.g. `"C2"`.
    pub fn canonical(&self) -> String {
        format!("{}{}", self.category as char, self.index)
    }
}

impl fmt::Display for SkillId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.category as char, self.index)
    }
}

impl FromStr for SkillId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.chars();
        let letter = chars.next().ok_or_else(|| "empty skill id".to_string())?;
        let rest = chars.as_str();
        if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("invalid skill id {s:?}"));
        }
        let index: u32 = rest.parse().map_err(|_| format!("invalid skill id {s:?}"))?;
        SkillId::new(letter, index)
    }
}

impl Ord for SkillId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.canonical().cmp(&other.canonical())
    }
}

impl PartialOrd for SkillId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Serialize for SkillId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.canonical())
    }
}

impl<'de> Deserialize<'de> for SkillId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Joins skill IDs in canonical form, e.g. `"C1, C2"`.
pub fn render_skill_ids<'a>(ids: impl IntoIterator<Item = &'a SkillId>) -> String {
    ids.into_iter()
        .map(SkillId::canonical)
        .collect::<Vec<_>>()
        .join(", ")
}

/// One entry of the skill taxonomy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkillSpec {
    pub id: SkillId,
    pub display_name: String,
    pub category_name: String,
    pub requirement: ModalityRequirement,
    pub prompt_template_id: String,
}

/// The expert bound to one skill: backend binding plus the resolved prompt
/// template (which contains exactly one `{input-context}` placeholder).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertSpec {
    pub skill_id: SkillId,
    pub backend_id: String,
    pub prompt_template: String,
    pub template_version: u32,
}

/// Router-section settings from the config document.
#[derive(Debug, Clone)]
pub struct RouterSettings {
    /// Default backend id for expert selection, if declared.
    pub backend: Option<String>,
}

/// Aggregator-section settings from the config document.
#[derive(Debug, Clone)]
pub struct AggregatorSettings {
    /// Default backend id for aggregation, if declared.
    pub backend: Option<String>,
    /// The aggregation task description prepended to the aggregator prompt.
    pub task_description: String,
    /// Whether the per-item task context is also passed to the aggregator.
    pub include_task_context: bool,
}

/// Immutable registry of skills, experts, templates, and backends.
#[derive(Debug, Clone)]
pub struct TaxonomyRegistry {
    skills: BTreeMap<SkillId, SkillSpec>,
    experts: BTreeMap<SkillId, ExpertSpec>,
    templates: BTreeMap<String, String>,
    selection_template: String,
    aggregation_template: String,
    backends: BTreeMap<String, BackendSpec>,
    router: RouterSettings,
    aggregator: AggregatorSettings,
    fingerprint: String,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("failed to read config: {path}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config document: {0}")]
    Parse(toml::de::Error),

    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

impl From<toml::de::Error> for LoadError {
    fn from(e: toml::de::Error) -> Self {
        LoadError::Parse(e)
    }
}

impl LoadError {
    fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        LoadError::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// Errors from prompt rendering.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("empty question")]
    EmptyQuestion,

    #[error("options required for multiple-choice rendering")]
    NoOptions,

    #[error("template placeholder mismatch: missing {{{0}}}")]
    MissingPlaceholder(String),
}

// ---------------------------------------------------------------------------
// Config document shapes (strict: unknown keys are rejected)
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    #[serde(default)]
    skills: Vec<SkillDoc>,
    #[serde(default)]
    experts: Vec<ExpertDoc>,
    #[serde(default)]
    templates: BTreeMap<String, String>,
    router: RouterDoc,
    aggregator: AggregatorDoc,
    #[serde(default)]
    backends: Vec<BackendDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkillDoc {
    id: String,
    display_name: String,
    category: String,
    modality: String,
    template: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpertDoc {
    skill: String,
    backend: String,
    /// Template id; defaults to the skill's template when omitted.
    template: Option<String>,
    version: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RouterDoc {
    template: String,
    backend: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AggregatorDoc {
    template: String,
    backend: Option<String>,
    task_description: Option<String>,
    include_task_context: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackendDoc {
    id: String,
    kind: String,
    base_uri: Option<String>,
    model: Option<String>,
    auth_env: Option<String>,
    timeout_secs: Option<u64>,
    max_retries: Option<u32>,
    temperature: Option<f64>,
    max_tokens: Option<u32>,
    max_concurrency: Option<usize>,
    modalities: Option<Vec<String>>,
    context_budget_chars: Option<usize>,
    #[serde(default)]
    script: Vec<ScriptDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptDoc {
    substring: Option<String>,
    digest: Option<String>,
    response: String,
    latency_ms: Option<u64>,
}

const SELECTION_PLACEHOLDERS: [&str; 4] = ["task-type", "question", "options", "skill-listing"];
const AGGREGATION_PLACEHOLDERS: [&str; 4] =
    ["task-description", "expert-blocks", "question", "options"];
const EXPERT_PLACEHOLDER: &str = "{input-context}";

/// Default aggregation task description used when the config omits one.
const DEFAULT_TASK_DESCRIPTION: &str = "You are an answerer for a video question answering, \
audio question answering, 3D situated question answering, or medical visual question answering.";

/// Loads and validates a registry from a TOML config document.
pub fn load_registry(document: &str) -> Result<TaxonomyRegistry, LoadError> {
    let doc: ConfigDoc = toml::from_str(document)?;
    let fingerprint = hex::encode(Sha256::digest(document.as_bytes()));

    if doc.skills.is_empty() {
        return Err(LoadError::invalid("skills", "no skills declared"));
    }

    let mut skills = BTreeMap::new();
    for (i, s) in doc.skills.iter().enumerate() {
        let path = format!("skills[{i}]");
        let id: SkillId = s
            .id
            .parse()
            .map_err(|e| LoadError::invalid(format!("{path}.id"), e))?;
        if s.display_name.trim().is_empty() {
            return Err(LoadError::invalid(
                format!("{path}.display_name"),
                "must be non-empty",
            ));
        }
        if s.category.trim().is_empty() {
            return Err(LoadError::invalid(
                format!("{path}.category"),
                "must be non-empty",
            ));
        }
        let requirement: ModalityRequirement = s
            .modality
            .parse()
            .map_err(|e| LoadError::invalid(format!("{path}.modality"), e))?;
        if !doc.templates.contains_key(&s.template) {
            return Err(LoadError::invalid(
                format!("{path}.template"),
                format!("unresolved template reference {:?}", s.template),
            ));
        }
        let spec = SkillSpec {
            id,
            display_name: s.display_name.clone(),
            category_name: s.category.clone(),
            requirement,
            prompt_template_id: s.template.clone(),
        };
        if skills.insert(id, spec).is_some() {
            return Err(LoadError::invalid(
                format!("{path}.id"),
                format!("duplicate skill {id}"),
            ));
        }
    }

    let mut backends = BTreeMap::new();
    for (i, b) in doc.backends.iter().enumerate() {
        let path = format!("backends[{i}]");
        let spec = parse_backend(b, &path)?;
        if backends.insert(spec.id.clone(), spec).is_some() {
            return Err(LoadError::invalid(
                format!("{path}.id"),
                format!("duplicate backend {:?}", b.id),
            ));
        }
    }

    let mut experts = BTreeMap::new();
    for (i, e) in doc.experts.iter().enumerate() {
        let path = format!("experts[{i}]");
        let skill_id: SkillId = e
            .skill
            .parse()
            .map_err(|err| LoadError::invalid(format!("{path}.skill"), err))?;
        let skill = skills.get(&skill_id).ok_or_else(|| {
            LoadError::invalid(
                format!("{path}.skill"),
                format!("expert declared for unknown skill {skill_id}"),
            )
        })?;
        if !backends.contains_key(&e.backend) {
            return Err(LoadError::invalid(
                format!("{path}.backend"),
                format!("unresolved backend reference {:?}", e.backend),
            ));
        }
        let template_id = e.template.as_ref().unwrap_or(&skill.prompt_template_id);
        let template = doc.templates.get(template_id).ok_or_else(|| {
            LoadError::invalid(
                format!("{path}.template"),
                format!("unresolved template reference {template_id:?}"),
            )
        })?;
        let placeholder_count = template.matches(EXPERT_PLACEHOLDER).count();
        if placeholder_count != 1 {
            return Err(LoadError::invalid(
                format!("{path}.template"),
                format!(
                    "template {template_id:?} must contain exactly one {EXPERT_PLACEHOLDER} \
                     placeholder, found {placeholder_count}"
                ),
            ));
        }
        let spec = ExpertSpec {
            skill_id,
            backend_id: e.backend.clone(),
            prompt_template: template.clone(),
            template_version: e.version,
        };
        if experts.insert(skill_id, spec).is_some() {
            return Err(LoadError::invalid(
                path,
                format!("duplicate expert for skill {skill_id}"),
            ));
        }
    }
    for id in skills.keys() {
        if !experts.contains_key(id) {
            return Err(LoadError::invalid(
                "experts",
                format!("no expert declared for skill {id}"),
            ));
        }
    }

    let selection_template = doc
        .templates
        .get(&doc.router.template)
        .ok_or_else(|| {
            LoadError::invalid(
                "router.template",
                format!("unresolved template reference {:?}", doc.router.template),
            )
        })?
        .clone();
    for name in SELECTION_PLACEHOLDERS {
        if !selection_template.contains(&format!("{{{name}}}")) {
            return Err(LoadError::invalid(
                "router.template",
                format!("selection template is missing the {{{name}}} placeholder"),
            ));
        }
    }
    if let Some(b) = &doc.router.backend {
        if !backends.contains_key(b) {
            return Err(LoadError::invalid(
                "router.backend",
                format!("unresolved backend reference {b:?}"),
            ));
        }
    }

    let aggregation_template = doc
        .templates
        .get(&doc.aggregator.template)
        .ok_or_else(|| {
            LoadError::invalid(
                "aggregator.template",
                format!(
                    "unresolved template reference {:?}",
                    doc.aggregator.template
                ),
            )
        })?
        .clone();
    for name in AGGREGATION_PLACEHOLDERS {
        if !aggregation_template.contains(&format!("{{{name}}}")) {
            return Err(LoadError::invalid(
                "aggregator.template",
                format!("aggregation template is missing the {{{name}}} placeholder"),
            ));
        }
    }
    if let Some(b) = &doc.aggregator.backend {
        if !backends.contains_key(b) {
            return Err(LoadError::invalid(
                "aggregator.backend",
                format!("unresolved backend reference {b:?}"),
            ));
        }
    }

    Ok(TaxonomyRegistry {
        skills,
        experts,
        templates: doc.templates,
        selection_template,
        aggregation_template,
        backends,
        router: RouterSettings {
            backend: doc.router.backend,
        },
        aggregator: AggregatorSettings {
            backend: doc.aggregator.backend,
            task_description: doc
                .aggregator
                .task_description
                .unwrap_or_else(|| DEFAULT_TASK_DESCRIPTION.to_string()),
            include_task_context: doc.aggregator.include_task_context.unwrap_or(false),
        },
        fingerprint,
    })
}

/// Loads a registry from a file path.
pub fn load_registry_file(path: impl AsRef<Path>) -> Result<TaxonomyRegistry, LoadError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Read {
        path: path.display().to_string(),
        source,
    })?;
    load_registry(&text)
}

fn parse_backend(doc: &BackendDoc, path: &str) -> Result<BackendSpec, LoadError> {
    if doc.id.trim().is_empty() {
        return Err(LoadError::invalid(format!("{path}.id"), "must be non-empty"));
    }
    let kind = match doc.kind.as_str() {
        "remote-chat" => BackendKind::RemoteChat,
        "scripted" => BackendKind::Scripted,
        other => {
            return Err(LoadError::invalid(
                format!("{path}.kind"),
                format!("unknown backend kind {other:?} (expected remote-chat or scripted)"),
            ))
        }
    };
    match kind {
        BackendKind::RemoteChat => {
            if doc.base_uri.is_none() || doc.model.is_none() {
                return Err(LoadError::invalid(
                    path,
                    "remote-chat backends require base_uri and model",
                ));
            }
            if !doc.script.is_empty() {
                return Err(LoadError::invalid(
                    format!("{path}.script"),
                    "script entries are only valid on scripted backends",
                ));
            }
        }
        BackendKind::Scripted => {
            if doc.script.is_empty() {
                return Err(LoadError::invalid(
                    format!("{path}.script"),
                    "scripted backends require at least one script entry",
                ));
            }
        }
    }
    if let Some(t) = doc.temperature {
        if !(0.0..=2.0).contains(&t) {
            return Err(LoadError::invalid(
                format!("{path}.temperature"),
                format!("temperature must be in [0, 2], got {t}"),
            ));
        }
    }
    let mut modalities = None;
    if let Some(list) = &doc.modalities {
        let mut set = BTreeSet::new();
        for (j, m) in list.iter().enumerate() {
            let parsed: Modality = m
                .parse()
                .map_err(|e| LoadError::invalid(format!("{path}.modalities[{j}]"), e))?;
            set.insert(parsed);
        }
        modalities = Some(set);
    }
    let mut script = Vec::new();
    for (j, entry) in doc.script.iter().enumerate() {
        let epath = format!("{path}.script[{j}]");
        let matcher = match (&entry.substring, &entry.digest) {
            (Some(s), None) => ScriptMatcher::Substring(s.clone()),
            (None, Some(d)) => ScriptMatcher::Digest(d.to_ascii_lowercase()),
            _ => {
                return Err(LoadError::invalid(
                    epath,
                    "script entries need exactly one of `substring` or `digest`",
                ))
            }
        };
        script.push(ScriptEntry {
            matcher,
            response: entry.response.clone(),
            latency_ms: entry.latency_ms,
        });
    }
    Ok(BackendSpec {
        id: doc.id.clone(),
        kind,
        base_uri: doc.base_uri.clone(),
        model: doc.model.clone(),
        auth_env: doc.auth_env.clone(),
        timeout_secs: doc.timeout_secs.unwrap_or(60),
        max_retries: doc.max_retries.unwrap_or(2),
        temperature: doc.temperature.unwrap_or(0.0),
        max_tokens: doc.max_tokens.unwrap_or(1024),
        max_concurrency: doc.max_concurrency.unwrap_or(4).max(1),
        modalities,
        context_budget_chars: doc.context_budget_chars,
        script,
    })
}

impl TaxonomyRegistry {
    /// The registry shipped with the crate: 17 skills in 7 categories.
    pub fn default_shipped() -> Self {
        load_registry(DEFAULT_CONFIG).expect("embedded default config is valid")
    }

    pub fn skills(&self) -> &BTreeMap<SkillId, SkillSpec> {
        &self.skills
    }

    pub fn skill(&self, id: &SkillId) -> Option<&SkillSpec> {
        self.skills.get(id)
    }

    pub fn skill_ids(&self) -> BTreeSet<SkillId> {
        self.skills.keys().copied().collect()
    }

    /// The unique expert bound to a skill.
    pub fn expert_for_skill(&self, id: &SkillId) -> Result<&ExpertSpec, UnknownSkill> {
        self.experts.get(id).ok_or(UnknownSkill(*id))
    }

    pub fn experts(&self) -> &BTreeMap<SkillId, ExpertSpec> {
        &self.experts
    }

    pub fn template(&self, id: &str) -> Option<&str> {
        self.templates.get(id).map(String::as_str)
    }

    pub fn selection_template(&self) -> &str {
        &self.selection_template
    }

    pub fn aggregation_template(&self) -> &str {
        &self.aggregation_template
    }

    pub fn backends(&self) -> &BTreeMap<String, BackendSpec> {
        &self.backends
    }

    pub fn backend(&self, id: &str) -> Result<&BackendSpec, UnknownBackend> {
        self.backends.get(id).ok_or_else(|| UnknownBackend(id.to_string()))
    }

    pub fn router_settings(&self) -> &RouterSettings {
        &self.router
    }

    pub fn aggregator_settings(&self) -> &AggregatorSettings {
        &self.aggregator
    }

    /// Hex digest of the config document this registry was loaded from.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Skills whose modality requirement is satisfied by `available`.
    pub fn skills_for_modalities(&self, available: &BTreeSet<Modality>) -> BTreeSet<SkillId> {
        self.skills
            .values()
            .filter(|s| s.requirement.satisfied_by(available))
            .map(|s| s.id)
            .collect()
    }

    /// Renders the expert-selection prompt over the skills available under
    /// `available`. The rendered text ends with the literal cue
    /// `"Selected IDs:"`.
    pub fn render_selection_prompt(
        &self,
        task_context: &str,
        question: &str,
        options: &[String],
        available: &BTreeSet<Modality>,
    ) -> Result<String, RenderError> {
        if question.trim().is_empty() {
            return Err(RenderError::EmptyQuestion);
        }
        if options.is_empty() {
            return Err(RenderError::NoOptions);
        }
        for name in SELECTION_PLACEHOLDERS {
            if !self.selection_template.contains(&format!("{{{name}}}")) {
                return Err(RenderError::MissingPlaceholder(name.to_string()));
            }
        }
        let listing = self.render_skill_listing(available);
        let options_text = format!(
            "[{}]",
            options
                .iter()
                .map(|o| format!("{o:?}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        let rendered = self
            .selection_template
            .replace("{task-type}", task_context)
            .replace("{question}", question)
            .replace("{options}", &options_text)
            .replace("{skill-listing}", &listing);
        Ok(rendered.trim_end().to_string())
    }

    /// Groups the available skills under their category headings.
    fn render_skill_listing(&self, available: &BTreeSet<Modality>) -> String {
        let eligible = self.skills_for_modalities(available);
        // skills is ordered by id, so categories appear in A..G order and
        // skills in index order within each category.
        let mut blocks: Vec<(String, Vec<String>)> = Vec::new();
        for id in &eligible {
            let spec = &self.skills[id];
            let line = format!("- {}. {}", spec.id, spec.display_name);
            match blocks.last_mut() {
                Some((category, lines)) if *category == spec.category_name => lines.push(line),
                _ => blocks.push((spec.category_name.clone(), vec![line])),
            }
        }
        blocks
            .into_iter()
            .map(|(category, lines)| format!("{category}\n{}", lines.join("\n")))
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown skill {0}")]
pub struct UnknownSkill(pub SkillId);

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown backend {0:?}")]
pub struct UnknownBackend(pub String);

#[cfg(test)]
mod tests {
    use super::*;

    fn default_registry() -> TaxonomyRegistry {
        TaxonomyRegistry::default_shipped()
    }

    fn all_modalities() -> BTreeSet<Modality> {
        Modality::ALL.iter().copied().collect()
    }

    #[test]
    fn skill_id_parses_case_insensitively_and_renders_uppercase() {
        let id: SkillId = "c2".parse().unwrap();
        assert_eq!(id.canonical(), "C2");
        assert_eq!(id, "C2".parse().unwrap());
        assert!("Z9".parse::<SkillId>().is_err());
        assert!("C".parse::<SkillId>().is_err());
        assert!("C0".parse::<SkillId>().is_err());
        assert!("".parse::<SkillId>().is_err());
    }

    #[test]
    fn skill_id_order_is_lexicographic_over_canonical_form() {
        let a10 = SkillId::new('A', 10).unwrap();
        let a2 = SkillId::new('A', 2).unwrap();
        assert!(a10 < a2);
        let b1 = SkillId::new('B', 1).unwrap();
        assert!(a2 < b1);
    }

    #[test]
    fn default_registry_has_seventeen_skills_in_seven_categories() {
        let registry = default_registry();
        let ids: Vec<String> = registry.skills().keys().map(SkillId::canonical).collect();
        assert_eq!(
            ids,
            vec![
                "A1", "A2", "A3", "B1", "B2", "B3", "C1", "C2", "D1", "D2", "E1", "E2", "E3",
                "F1", "F2", "G1", "G2"
            ]
        );
        let categories: BTreeSet<&str> = registry
            .skills()
            .values()
            .map(|s| s.category_name.as_str())
            .collect();
        assert_eq!(categories.len(), 7);
    }

    #[test]
    fn default_registry_binds_one_expert_per_skill() {
        let registry = default_registry();
        for id in registry.skills().keys() {
            let expert = registry.expert_for_skill(id).unwrap();
            assert_eq!(expert.skill_id, *id);
            assert_eq!(
                expert.prompt_template.matches("{input-context}").count(),
                1
            );
            assert!(registry.backend(&expert.backend_id).is_ok());
        }
    }

    #[test]
    fn load_is_deterministic() {
        let a = load_registry(DEFAULT_CONFIG).unwrap();
        let b = load_registry(DEFAULT_CONFIG).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.skills(), b.skills());
        assert_eq!(a.experts(), b.experts());
    }

    #[test]
    fn empty_skill_list_is_rejected() {
        let doc = r#"
            [router]
            template = "selection"
            [aggregator]
            template = "aggregation"
            [templates]
            selection = "{task-type}{question}{options}{skill-listing}"
            aggregation = "{task-description}{expert-blocks}{question}{options}"
        "#;
        let err = load_registry(doc).unwrap_err();
        assert!(err.to_string().contains("no skills declared"), "{err}");
    }

    #[test]
    fn duplicate_expert_is_rejected_naming_the_skill() {
        let doc = r#"
            [[skills]]
            id = "C1"
            display_name = "3D Scene Description"
            category = "3D Visual Understanding"
            modality = "point-cloud-3d"
            template = "cap"

            [[experts]]
            skill = "C1"
            backend = "b"
            version = 1

            [[experts]]
            skill = "C1"
            backend = "b"
            version = 2

            [[backends]]
            id = "b"
            kind = "scripted"
            [[backends.script]]
            substring = ""
            response = "x"

            [router]
            template = "selection"
            [aggregator]
            template = "aggregation"

            [templates]
            cap = "Describe {input-context}."
            selection = "{task-type}{question}{options}{skill-listing}"
            aggregation = "{task-description}{expert-blocks}{question}{options}"
        "#;
        let err = load_registry(doc).unwrap_err();
        assert!(err.to_string().contains("duplicate expert for skill C1"), "{err}");
    }

    #[test]
    fn unresolved_template_reference_is_rejected_with_key_path() {
        let doc = r#"
            [[skills]]
            id = "A1"
            display_name = "Detailed Image Description"
            category = "General Visual Perception"
            modality = "image"
            template = "missing"

            [router]
            template = "selection"
            [aggregator]
            template = "aggregation"

            [templates]
            selection = "{task-type}{question}{options}{skill-listing}"
            aggregation = "{task-description}{expert-blocks}{question}{options}"
        "#;
        let err = load_registry(doc).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("skills[0].template"), "{msg}");
        assert!(msg.contains("unresolved template reference"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let doc = r#"
            surprise = true
            [router]
            template = "selection"
            [aggregator]
            template = "aggregation"
            [templates]
            selection = "{task-type}{question}{options}{skill-listing}"
            aggregation = "{task-description}{expert-blocks}{question}{options}"
        "#;
        assert!(load_registry(doc).is_err());
    }

    #[test]
    fn point_cloud_modality_selects_exactly_the_3d_skills() {
        let registry = default_registry();
        let available = BTreeSet::from([Modality::PointCloud3D]);
        let ids: Vec<String> = registry
            .skills_for_modalities(&available)
            .iter()
            .map(SkillId::canonical)
            .collect();
        assert_eq!(ids, vec!["C1", "C2"]);
    }

    #[test]
    fn empty_modality_set_selects_nothing() {
        let registry = default_registry();
        assert!(registry.skills_for_modalities(&BTreeSet::new()).is_empty());
    }

    #[test]
    fn full_modality_set_selects_all_skills() {
        let registry = default_registry();
        // Brute-force oracle: a skill is eligible iff some modality in the
        // full set satisfies its requirement, checked per modality.
        let mut expected = BTreeSet::new();
        for skill in registry.skills().values() {
            for m in Modality::ALL {
                if skill.requirement.accepts(m) {
                    expected.insert(skill.id);
                    break;
                }
            }
        }
        let got = registry.skills_for_modalities(&all_modalities());
        assert_eq!(got, expected);
        assert_eq!(got.len(), 17);
    }

    #[test]
    fn expert_for_skill_resolves_c2_to_point_cloud() {
        let registry = default_registry();
        let c2: SkillId = "C2".parse().unwrap();
        let expert = registry.expert_for_skill(&c2).unwrap();
        let skill = registry.skill(&c2).unwrap();
        assert_eq!(
            skill.requirement,
            ModalityRequirement::Single(Modality::PointCloud3D)
        );
        assert_eq!(skill.display_name, "3D Situated Context Description");
        assert!(!expert.backend_id.is_empty());
    }

    #[test]
    fn expert_for_unknown_skill_errors() {
        let registry = default_registry();
        let a9 = SkillId::new('A', 9).unwrap();
        let err = registry.expert_for_skill(&a9).unwrap_err();
        assert_eq!(err.to_string(), "unknown skill A9");
    }

    #[test]
    fn a1_template_requests_a_comprehensive_caption() {
        let registry = default_registry();
        let a1: SkillId = "A1".parse().unwrap();
        let expert = registry.expert_for_skill(&a1).unwrap();
        assert!(expert.prompt_template.contains("comprehensive caption"));
    }

    #[test]
    fn selection_prompt_lists_only_available_skills() {
        let registry = default_registry();
        let available = BTreeSet::from([Modality::PointCloud3D]);
        let prompt = registry
            .render_selection_prompt(
                "3D situated QA",
                "What is behind me?",
                &[
                    "a door".to_string(),
                    "a shelf".to_string(),
                    "a sofa".to_string(),
                    "a lamp".to_string(),
                ],
                &available,
            )
            .unwrap();
        assert!(prompt.contains("3D Visual Understanding"));
        assert!(prompt.contains("C1. 3D Scene Description"));
        assert!(prompt.contains("C2. 3D Situated Context Description"));
        assert!(!prompt.contains("A1."));
        assert!(!prompt.contains("General Visual Perception"));
        assert!(prompt.contains("What is behind me?"));
        assert!(prompt.contains("3D situated QA"));
        assert!(prompt.ends_with("Selected IDs:"));
    }

    #[test]
    fn selection_prompt_with_all_modalities_contains_all_category_headings() {
        let registry = default_registry();
        let prompt = registry
            .render_selection_prompt(
                "video QA",
                "What happens?",
                &["a".to_string(), "b".to_string()],
                &all_modalities(),
            )
            .unwrap();
        for heading in [
            "General Visual Perception",
            "Audio Perception",
            "3D Visual Understanding",
            "Medical Visual Understanding",
            "OCR/Text Extraction",
            "Structured Visual Data Interpretation",
            "Mathematics and Geometry Extraction",
        ] {
            assert!(prompt.contains(heading), "missing heading {heading:?}");
        }
    }

    #[test]
    fn selection_prompt_rejects_empty_question() {
        let registry = default_registry();
        let err = registry
            .render_selection_prompt(
                "t",
                "  ",
                &["a".to_string(), "b".to_string()],
                &all_modalities(),
            )
            .unwrap_err();
        assert_eq!(err, RenderError::EmptyQuestion);
    }

    #[test]
    fn selection_prompt_contains_id_iff_modality_available() {
        let registry = default_registry();
        let options = vec!["yes".to_string(), "no".to_string()];
        for modality in Modality::ALL {
            let available = BTreeSet::from([modality]);
            if registry.skills_for_modalities(&available).is_empty() {
                continue;
            }
            let prompt = registry
                .render_selection_prompt("task", "question?", &options, &available)
                .unwrap();
            for skill in registry.skills().values() {
                let marker = format!("{}. ", skill.id);
                let eligible = skill.requirement.accepts(modality);
                assert_eq!(
                    prompt.contains(&marker),
                    eligible,
                    "skill {} under {modality}",
                    skill.id
                );
            }
        }
    }
}
