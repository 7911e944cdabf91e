//! Expert selection: prompts a routing backend, parses the returned skill
//! IDs, enforces the modality constraint, and applies fallbacks.
//!
//! Whatever the backend returns — including adversarial text — the resulting
//! decision always satisfies two invariants: every selected skill's required
//! modality is present in the query's assets, and the selection is non-empty.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{AssetError, BackendSpec, ChatRequest, Gateway, GatewayError, MediaRef};
use crate::registry::{render_skill_ids, Modality, RenderError, SkillId, TaxonomyRegistry};

/// One question with its task context, answer options, and media assets. The
/// available modality set is derived from the assets.
#[derive(Debug, Clone)]
pub struct Query {
    pub task_context: String,
    pub question: String,
    pub options: Vec<String>,
    pub assets: Vec<MediaRef>,
}

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("empty question")]
    EmptyQuestion,

    #[error("multiple-choice queries need at least 2 options, got {0}")]
    TooFewOptions(usize),
}

impl Query {
    pub fn new(
        task_context: impl Into<String>,
        question: impl Into<String>,
        options: Vec<String>,
        assets: Vec<MediaRef>,
    ) -> Result<Self, QueryError> {
        let question = question.into();
        if question.trim().is_empty() {
            return Err(QueryError::EmptyQuestion);
        }
        if options.len() == 1 {
            return Err(QueryError::TooFewOptions(1));
        }
        Ok(Query {
            task_context: task_context.into(),
            question,
            options,
            assets,
        })
    }

    /// Modalities present among the query's assets.
    pub fn available_modalities(&self) -> BTreeSet<Modality> {
        self.assets.iter().map(|a| a.modality).collect()
    }

    /// Digest binding downstream artifacts to this query. Resolving it reads
    /// asset bytes where digests are not yet known and rejects duplicate
    /// assets.
    pub fn digest(&self) -> Result<String, AssetError> {
        let mut hasher = Sha256::new();
        hasher.update((self.task_context.len() as u64).to_be_bytes());
        hasher.update(self.task_context.as_bytes());
        hasher.update((self.question.len() as u64).to_be_bytes());
        hasher.update(self.question.as_bytes());
        for option in &self.options {
            hasher.update((option.len() as u64).to_be_bytes());
            hasher.update(option.as_bytes());
        }
        let mut seen = BTreeSet::new();
        for asset in &self.assets {
            let digest = asset.content_digest()?;
            if !seen.insert(digest.to_string()) {
                return Err(AssetError::DuplicateDigest {
                    digest: digest.to_string(),
                });
            }
            hasher.update(digest.as_bytes());
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

/// Outcome of expert selection, with full provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Selected skills, lexicographic by canonical form. Non-empty, and every
    /// skill's required modality is available in the query's assets.
    pub selected: Vec<SkillId>,
    /// The router backend's raw response text.
    pub raw_response: String,
    /// Response tokens that did not parse as registered skill IDs.
    pub dropped_tokens: Vec<String>,
    /// True when the modality-default fallback replaced an empty or fully
    /// filtered-out selection.
    pub fallback_used: bool,
}

#[derive(Debug, Error)]
pub enum RouteError {
    #[error("router: {0}")]
    Render(RenderError),

    #[error("router: {0}")]
    Backend(GatewayError),

    #[error("router: no skills are available for modalities {0:?}")]
    NoEligibleSkills(Vec<String>),
}

impl From<RenderError> for RouteError {
    fn from(e: RenderError) -> Self {
        RouteError::Render(e)
    }
}

impl From<GatewayError> for RouteError {
    fn from(e: GatewayError) -> Self {
        RouteError::Backend(e)
    }
}

impl RouteError {
    /// True when the underlying failure is a credential/auth problem.
    pub fn is_auth(&self) -> bool {
        matches!(self, RouteError::Backend(g) if g.is_auth())
    }
}

/// Splits router output into registered skill IDs and everything else.
///
/// Tokens are split on commas, semicolons, whitespace, and newlines; list
/// bullets and surrounding punctuation are stripped; a leading
/// `"Selected IDs:"` label is ignored. IDs parse case-insensitively, are
/// deduplicated keeping the first occurrence, and are returned sorted
/// lexicographically. Unrecognized tokens are returned in order of appearance
/// with their original spelling. Unparseable input yields an empty kept set —
/// never an error.
pub fn parse_skill_ids(text: &str, valid: &BTreeSet<SkillId>) -> (Vec<SkillId>, Vec<String>) {
    let mut body = text.trim();
    // Tolerate a bolded or plain label, in any case.
    for label in ["selected ids:", "selected ids :"] {
        let lowered = body.to_ascii_lowercase();
        if let Some(rest) = lowered
            .trim_start_matches(['*', '#', ' '])
            .strip_prefix(label)
        {
            let offset = body.len() - rest.len();
            body = &body[offset..];
            break;
        }
    }

    let mut kept: Vec<SkillId> = Vec::new();
    let mut seen: BTreeSet<SkillId> = BTreeSet::new();
    let mut dropped: Vec<String> = Vec::new();

    for raw in body.split([',', ';', '\n', '\r', '\t', ' ']) {
        let token = raw.trim_start_matches(['-', '*', '•']);
        if token.is_empty() {
            continue;
        }
        let trimmed = token.trim_matches(|c: char| c.is_ascii_punctuation());
        if trimmed.is_empty() {
            continue;
        }
        match trimmed.parse::<SkillId>() {
            Ok(id) if valid.contains(&id) => {
                if seen.insert(id) {
                    kept.push(id);
                }
            }
            _ => dropped.push(token.to_string()),
        }
    }
    kept.sort();
    (kept, dropped)
}

/// Modality-default skills substituted when the router yields nothing usable.
/// The defaults mirror the dominant per-modality selections; entries that are
/// not registered (custom registries) are filtered out, and if nothing
/// survives the entire eligible set is used so the selection stays non-empty.
pub fn fallback_skills(
    available: &BTreeSet<Modality>,
    eligible: &BTreeSet<SkillId>,
) -> Vec<SkillId> {
    let defaults: BTreeMap<Modality, &[&str]> = BTreeMap::from([
        (Modality::Image, &["A1"][..]),
        (Modality::Video, &["B1"][..]),
        (Modality::Audio, &["B2"][..]),
        (Modality::PointCloud3D, &["C1", "C2"][..]),
        (Modality::MedicalVolume, &["D1"][..]),
        (Modality::Document, &["E1"][..]),
    ]);
    let mut picked: BTreeSet<SkillId> = BTreeSet::new();
    for modality in available {
        if let Some(ids) = defaults.get(modality) {
            for raw in *ids {
                let id: SkillId = raw.parse().expect("default table ids are valid");
                if eligible.contains(&id) {
                    picked.insert(id);
                }
            }
        }
    }
    if picked.is_empty() {
        picked = eligible.clone();
    }
    picked.into_iter().collect()
}

/// Runs expert selection for a query.
///
/// Renders the selection prompt over the skills eligible under the query's
/// asset modalities, calls the routing backend, parses the returned IDs, and
/// intersects them with the eligible set — the backend is never trusted to
/// respect the listing. An empty result falls back to the modality-default
/// skills. Returns the decision together with the router call usage.
pub async fn route(
    registry: &TaxonomyRegistry,
    gateway: &Gateway,
    router_backend: &BackendSpec,
    query: &Query,
) -> Result<(RoutingDecision, crate::gateway::ChatResponse), RouteError> {
    let available = query.available_modalities();
    let eligible = registry.skills_for_modalities(&available);
    if eligible.is_empty() {
        return Err(RouteError::NoEligibleSkills(
            available.iter().map(|m| m.to_string()).collect(),
        ));
    }

    let prompt = registry.render_selection_prompt(
        &query.task_context,
        &query.question,
        &query.options,
        &available,
    )?;
    let request = ChatRequest::user(prompt);
    let response = gateway.complete(router_backend, &request).await?;

    let all_ids = registry.skill_ids();
    let (kept, dropped) = parse_skill_ids(&response.text, &all_ids);
    let mut selected: Vec<SkillId> = kept
        .into_iter()
        .filter(|id| eligible.contains(id))
        .collect();

    let fallback_used = selected.is_empty();
    if fallback_used {
        selected = fallback_skills(&available, &eligible);
    }

    let decision = RoutingDecision {
        selected,
        raw_response: response.text.clone(),
        dropped_tokens: dropped,
        fallback_used,
    };
    debug_assert!(!decision.selected.is_empty());
    Ok((decision, response))
}

impl RoutingDecision {
    /// Canonical comma-separated rendering of the selection.
    pub fn render_selected(&self) -> String {
        render_skill_ids(self.selected.iter())
    }
}
