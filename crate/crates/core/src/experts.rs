//! Expert invocation: binds each selected skill to its modality asset,
//! renders the skill-specific prompt, and produces the bundle of textual
//! expert outputs with content-addressed caching and bounded concurrent
//! fan-out.

use std::collections::BTreeMap;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheKey, ExpertCache};
use crate::gateway::{
    AssetError, BackendSpec, ChatMessage, ChatRequest, Gateway, GatewayError, MediaRef,
};
use crate::registry::{ExpertSpec, Modality, SkillId, TaxonomyRegistry, UnknownBackend, UnknownSkill};
use crate::router::{Query, RoutingDecision};

/// One expert's unified textual output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertOutput {
    pub skill_id: SkillId,
    pub text: String,
    pub backend_id: String,
    pub from_cache: bool,
    pub latency_ms: u64,
}

/// The ordered set of expert outputs for one query, lexicographic by skill.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertBundle {
    pub outputs: Vec<ExpertOutput>,
    /// Digest binding the bundle to the query it answers.
    pub query_digest: String,
}

impl ExpertBundle {
    pub fn skill_ids(&self) -> Vec<SkillId> {
        self.outputs.iter().map(|o| o.skill_id).collect()
    }
}

/// Token usage for one pipeline stage call.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CallUsage {
    pub latency_ms: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl From<&crate::gateway::ChatResponse> for CallUsage {
    fn from(r: &crate::gateway::ChatResponse) -> Self {
        CallUsage {
            latency_ms: r.latency_ms,
            prompt_tokens: r.prompt_tokens,
            completion_tokens: r.completion_tokens,
        }
    }
}

/// Result of one expert invocation.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub output: ExpertOutput,
    /// Call usage; zero tokens on cache hits.
    pub usage: CallUsage,
    pub warnings: Vec<String>,
}

/// Result of running the selected experts.
#[derive(Debug, Clone)]
pub struct ExpertRun {
    pub bundle: ExpertBundle,
    /// Per-skill call usage (zeroed tokens on cache hits).
    pub usages: BTreeMap<SkillId, CallUsage>,
    pub warnings: Vec<String>,
}

/// Knobs for [`run_selected`].
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Maximum expert calls in flight for one query.
    pub fan_out: usize,
    /// In lenient mode a failing expert is replaced by a placeholder output
    /// instead of failing the whole item.
    pub lenient: bool,
    /// Per-skill backend overrides (skill id -> backend id).
    pub overrides: BTreeMap<SkillId, String>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            fan_out: 4,
            lenient: false,
            overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("expert:{skill}: {error}")]
    Backend { skill: SkillId, error: GatewayError },

    #[error("expert:{skill}: invariant breach: no {requirement} asset in query")]
    NoMatchingAsset { skill: SkillId, requirement: String },

    #[error(transparent)]
    UnknownSkill(#[from] UnknownSkill),

    #[error(transparent)]
    UnknownBackend(#[from] UnknownBackend),

    #[error(transparent)]
    Asset(#[from] AssetError),
}

impl ExpertError {
    /// True when the underlying failure is a credential/auth problem.
    pub fn is_auth(&self) -> bool {
        matches!(self, ExpertError::Backend { error, .. } if error.is_auth())
    }
}

/// Picks the asset an expert operates on: the first asset in query order
/// whose modality satisfies the skill's requirement. For image-or-document
/// skills, image assets are preferred over documents regardless of query
/// order.
pub fn select_asset<'q>(query: &'q Query, spec: &ExpertSpec, registry: &TaxonomyRegistry)
    -> Result<&'q MediaRef, ExpertError>
{
    let skill = registry
        .skill(&spec.skill_id)
        .ok_or(UnknownSkill(spec.skill_id))?;
    for candidate in skill.requirement.candidates() {
        if let Some(asset) = query.assets.iter().find(|a| a.modality == *candidate) {
            return Ok(asset);
        }
    }
    Err(ExpertError::NoMatchingAsset {
        skill: spec.skill_id,
        requirement: skill.requirement.to_string(),
    })
}

/// Phrase substituted for the prompt's `{input-context}` placeholder.
fn input_context_phrase(modality: Modality) -> &'static str {
    match modality {
        Modality::Image => "the attached image",
        Modality::Video => "the attached video",
        Modality::Audio => "the attached audio clip",
        Modality::PointCloud3D => "the attached 3D point cloud",
        Modality::MedicalVolume => "the attached medical volume",
        Modality::Document => "the attached document",
        Modality::Text => "the attached text",
    }
}

/// Renders the expert's prompt for an asset.
pub fn render_expert_prompt(spec: &ExpertSpec, asset: &MediaRef) -> String {
    spec.prompt_template
        .replace("{input-context}", input_context_phrase(asset.modality))
}

/// Invokes one expert on one asset, going through the cache when present.
///
/// On a hit the cached text is returned verbatim with `from_cache = true` and
/// no backend call. Concurrent misses for the same key coalesce into a single
/// backend call. Cache I/O failures degrade to uncached operation and are
/// reported as warnings.
pub async fn invoke_expert(
    spec: &ExpertSpec,
    backend: &BackendSpec,
    asset: &MediaRef,
    gateway: &Gateway,
    cache: Option<&ExpertCache>,
) -> Result<Invocation, ExpertError> {
    let mut warnings = Vec::new();

    let key = CacheKey {
        skill_id: spec.skill_id,
        template_version: spec.template_version,
        asset_digest: asset.content_digest()?.to_string(),
        backend_id: backend.id.clone(),
    };

    let _guard = match cache {
        Some(cache) => Some(cache.lock_key(&key).await),
        None => None,
    };

    if let Some(cache) = cache {
        match cache.get(&key) {
            Ok(Some(text)) => {
                // Hits report zero latency so replayed runs are
                // byte-identical.
                return Ok(Invocation {
                    output: ExpertOutput {
                        skill_id: spec.skill_id,
                        text,
                        backend_id: backend.id.clone(),
                        from_cache: true,
                        latency_ms: 0,
                    },
                    usage: CallUsage::default(),
                    warnings,
                });
            }
            Ok(None) => {}
            Err(e) => {
                let warning = format!("expert:{}: cache read failed, bypassing: {e}", spec.skill_id);
                tracing::warn!("{warning}");
                warnings.push(warning);
            }
        }
    }

    let prompt = render_expert_prompt(spec, asset);
    let request = ChatRequest::new(vec![ChatMessage::user_with_attachments(
        prompt,
        vec![asset.clone()],
    )])
    .map_err(|error| ExpertError::Backend {
        skill: spec.skill_id,
        error,
    })?;
    let response = gateway
        .complete(backend, &request)
        .await
        .map_err(|error| ExpertError::Backend {
            skill: spec.skill_id,
            error,
        })?;

    if response.text.is_empty() {
        warnings.push(format!(
            "expert:{}: backend {} returned empty content",
            spec.skill_id, backend.id
        ));
    }
    if let Some(cache) = cache {
        if let Err(e) = cache.put(&key, &response.text) {
            let warning = format!("expert:{}: cache write failed: {e}", spec.skill_id);
            tracing::warn!("{warning}");
            warnings.push(warning);
        }
    }

    Ok(Invocation {
        usage: CallUsage::from(&response),
        output: ExpertOutput {
            skill_id: spec.skill_id,
            text: response.text,
            backend_id: backend.id.clone(),
            from_cache: false,
            latency_ms: response.latency_ms,
        },
        warnings,
    })
}

/// Runs every selected expert concurrently (bounded by `options.fan_out`) and
/// assembles the bundle in lexicographic skill order regardless of completion
/// order.
///
/// In strict mode (the default) a single expert failure fails the whole item
/// with the failing stage identified. In lenient mode the failing expert's
/// output is replaced with a placeholder and a warning is recorded.
pub async fn run_selected(
    decision: &RoutingDecision,
    query: &Query,
    registry: &TaxonomyRegistry,
    gateway: &Gateway,
    cache: Option<&ExpertCache>,
    options: &RunOptions,
) -> Result<ExpertRun, ExpertError> {
    let mut skills = decision.selected.clone();
    skills.sort();
    skills.dedup();

    let fan_out = options.fan_out.max(1);
    let results: Vec<(SkillId, Result<Invocation, ExpertError>)> =
        stream::iter(skills.iter().copied())
            .map(|skill| async move {
                let outcome = async {
                    let spec = registry.expert_for_skill(&skill)?;
                    let backend_id = options
                        .overrides
                        .get(&skill)
                        .unwrap_or(&spec.backend_id);
                    let backend = registry.backend(backend_id)?;
                    let asset = select_asset(query, spec, registry)?;
                    invoke_expert(spec, backend, asset, gateway, cache).await
                }
                .await;
                (skill, outcome)
            })
            .buffer_unordered(fan_out)
            .collect()
            .await;

    let mut by_skill: BTreeMap<SkillId, Result<Invocation, ExpertError>> =
        results.into_iter().collect();

    let mut outputs = Vec::with_capacity(skills.len());
    let mut usages = BTreeMap::new();
    let mut warnings = Vec::new();
    for skill in &skills {
        match by_skill.remove(skill).expect("every skill produced a result") {
            Ok(mut invocation) => {
                usages.insert(*skill, invocation.usage);
                warnings.append(&mut invocation.warnings);
                outputs.push(invocation.output);
            }
            Err(e) if options.lenient => {
                warnings.push(format!("expert:{skill}: unavailable, substituted: {e}"));
                let spec = registry.expert_for_skill(skill)?;
                outputs.push(ExpertOutput {
                    skill_id: *skill,
                    text: format!("[expert {skill} unavailable]"),
                    backend_id: spec.backend_id.clone(),
                    from_cache: false,
                    latency_ms: 0,
                });
            }
            Err(e) => return Err(e),
        }
    }

    Ok(ExpertRun {
        bundle: ExpertBundle {
            outputs,
            query_digest: query.digest()?,
        },
        usages,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{scripted_backend, ScriptEntry};
    use crate::registry::TaxonomyRegistry;
    use tempfile::TempDir;

    fn registry() -> TaxonomyRegistry {
        TaxonomyRegistry::default_shipped()
    }

    fn id(s: &str) -> SkillId {
        s.parse().unwrap()
    }

    fn audio_query() -> Query {
        Query::new(
            "audio QA",
            "what sound is this?",
            vec!["rain".to_string(), "wind".to_string()],
            vec![MediaRef::from_bytes(Modality::Audio, "mem:a1", b"audio-1")],
        )
        .unwrap()
    }

    #[test]
    fn select_asset_single_match() {
        let registry = registry();
        let query = audio_query();
        let spec = registry.expert_for_skill(&id("B2")).unwrap();
        let asset = select_asset(&query, spec, &registry).unwrap();
        assert_eq!(asset.uri, "mem:a1");
    }

    #[test]
    fn select_asset_prefers_image_over_document() {
        let registry = registry();
        // Document listed first; the preference rule still picks the image.
        let query = Query::new(
            "doc QA",
            "what does it say?",
            vec!["a".to_string(), "b".to_string()],
            vec![
                MediaRef::from_bytes(Modality::Document, "mem:d1", b"doc"),
                MediaRef::from_bytes(Modality::Image, "mem:i1", b"img"),
            ],
        )
        .unwrap();
        let spec = registry.expert_for_skill(&id("E1")).unwrap();
        // Oracle: the documented candidate order for image-or-document.
        let skill = registry.skill(&id("E1")).unwrap();
        assert_eq!(
            skill.requirement.candidates(),
            &[Modality::Image, Modality::Document]
        );
        let asset = select_asset(&query, spec, &registry).unwrap();
        assert_eq!(asset.uri, "mem:i1");
    }

    #[test]
    fn select_asset_hard_errors_without_matching_modality() {
        let registry = registry();
        let query = Query::new(
            "video QA",
            "q?",
            vec!["a".to_string(), "b".to_string()],
            vec![MediaRef::from_bytes(Modality::Video, "mem:v", b"vid")],
        )
        .unwrap();
        let spec = registry.expert_for_skill(&id("C1")).unwrap();
        let err = select_asset(&query, spec, &registry).unwrap_err();
        assert!(
            err.to_string().contains("invariant breach"),
            "unexpected error: {err}"
        );
        assert!(err.to_string().contains("point-cloud-3d"), "{err}");
    }

    #[tokio::test]
    async fn invoke_expert_caches_and_replays() {
        let registry = registry();
        let gateway = Gateway::new();
        let dir = TempDir::new().unwrap();
        let cache = ExpertCache::new(dir.path()).unwrap();
        let asset = MediaRef::from_bytes(Modality::Audio, "mem:a", b"audio");
        let digest = asset.content_digest().unwrap().to_string();
        let backend = scripted_backend(
            "audio-sim",
            vec![ScriptEntry::digest(digest, "a calm rain recording")],
        )
        .unwrap();
        let spec = registry.expert_for_skill(&id("B2")).unwrap();

        let Invocation { output: first, .. } = invoke_expert(spec, &backend, &asset, &gateway, Some(&cache))
            .await
            .unwrap();
        assert!(!first.from_cache);
        assert_eq!(first.text, "a calm rain recording");

        let Invocation { output: second, .. } = invoke_expert(spec, &backend, &asset, &gateway, Some(&cache))
            .await
            .unwrap();
        assert!(second.from_cache);
        assert_eq!(second.text, first.text);
        assert_eq!(gateway.stats_for("audio-sim").completions, 1);
    }

    #[tokio::test]
    async fn template_version_bump_misses_the_cache() {
        let registry = registry();
        let gateway = Gateway::new();
        let dir = TempDir::new().unwrap();
        let cache = ExpertCache::new(dir.path()).unwrap();
        let asset = MediaRef::from_bytes(Modality::Audio, "mem:a", b"audio");
        let backend =
            scripted_backend("audio-sim", vec![ScriptEntry::substring("", "caption")]).unwrap();
        let spec = registry.expert_for_skill(&id("B2")).unwrap().clone();

        let Invocation { output: first, .. } = invoke_expert(&spec, &backend, &asset, &gateway, Some(&cache))
            .await
            .unwrap();
        assert!(!first.from_cache);

        let mut bumped = spec.clone();
        bumped.template_version += 1;
        let Invocation { output: second, .. } = invoke_expert(&bumped, &backend, &asset, &gateway, Some(&cache))
            .await
            .unwrap();
        assert!(!second.from_cache);
        assert_eq!(gateway.stats_for("audio-sim").completions, 2);
    }

    #[tokio::test]
    async fn concurrent_misses_for_one_key_coalesce() {
        let registry = registry();
        let gateway = Gateway::new();
        let dir = TempDir::new().unwrap();
        let cache = ExpertCache::new(dir.path()).unwrap();
        let asset = MediaRef::from_bytes(Modality::Audio, "mem:a", b"audio");
        let backend = scripted_backend(
            "audio-sim",
            vec![ScriptEntry::substring("", "caption").with_latency_ms(20)],
        )
        .unwrap();
        let spec = registry.expert_for_skill(&id("B2")).unwrap();

        let results = futures::future::join_all((0..8).map(|_| {
            invoke_expert(spec, &backend, &asset, &gateway, Some(&cache))
        }))
        .await;
        for r in results {
            assert_eq!(r.unwrap().output.text, "caption");
        }
        assert_eq!(gateway.stats_for("audio-sim").completions, 1);
    }

    #[tokio::test]
    async fn run_selected_orders_bundle_lexicographically() {
        let registry = registry();
        let gateway = Gateway::new();
        let query = Query::new(
            "3D QA",
            "what is around?",
            vec!["a".to_string(), "b".to_string()],
            vec![MediaRef::from_bytes(
                Modality::PointCloud3D,
                "mem:pc",
                b"pc",
            )],
        )
        .unwrap();
        // C2's backend responds faster than C1's; bundle order must not care.
        let scene = scripted_backend(
            "scene-sim",
            vec![ScriptEntry::substring("", "scene: a small room").with_latency_ms(30)],
        )
        .unwrap();
        let situated = scripted_backend(
            "situated-sim",
            vec![ScriptEntry::substring("", "situated: a shelf behind you")],
        )
        .unwrap();
        let mut test_registry = test_registry_with_backends(vec![scene, situated]);
        test_registry
            .1
            .insert(id("C1"), "scene-sim".to_string());
        test_registry
            .1
            .insert(id("C2"), "situated-sim".to_string());
        let decision = RoutingDecision {
            selected: vec![id("C2"), id("C1")],
            raw_response: "C2, C1".to_string(),
            dropped_tokens: vec![],
            fallback_used: false,
        };
        let options = RunOptions {
            overrides: test_registry.1,
            ..RunOptions::default()
        };
        let run = run_selected(&decision, &query, &test_registry.0, &gateway, None, &options)
            .await
            .unwrap();
        assert_eq!(run.bundle.skill_ids(), vec![id("C1"), id("C2")]);
        assert_eq!(run.bundle.outputs[0].text, "scene: a small room");
        assert_eq!(run.bundle.outputs[1].text, "situated: a shelf behind you");
        let _ = registry;
    }

    // Default registry plus extra scripted backends reachable via overrides.
    fn test_registry_with_backends(
        backends: Vec<BackendSpec>,
    ) -> (TaxonomyRegistry, BTreeMap<SkillId, String>) {
        let mut doc = crate::registry::DEFAULT_CONFIG.to_string();
        for b in &backends {
            doc.push_str(&format!(
                "\n[[backends]]\nid = \"{}\"\nkind = \"scripted\"\n",
                b.id
            ));
            for entry in &b.script {
                let (key, value) = match &entry.matcher {
                    crate::gateway::ScriptMatcher::Substring(s) => ("substring", s.clone()),
                    crate::gateway::ScriptMatcher::Digest(d) => ("digest", d.clone()),
                };
                doc.push_str(&format!(
                    "[[backends.script]]\n{key} = {value:?}\nresponse = {:?}\n",
                    entry.response
                ));
                if let Some(ms) = entry.latency_ms {
                    doc.push_str(&format!("latency_ms = {ms}\n"));
                }
            }
        }
        (
            crate::registry::load_registry(&doc).unwrap(),
            BTreeMap::new(),
        )
    }

    #[tokio::test]
    async fn strict_mode_fails_the_item_when_an_expert_fails() {
        let registry = registry();
        let gateway = Gateway::new();
        let query = audio_query();
        // No entry matches the expert prompt, so the scripted backend errors.
        let backend = scripted_backend(
            "audio-sim",
            vec![ScriptEntry::substring("never-matching-sentinel", "x")],
        )
        .unwrap();
        let (test_registry, mut overrides) = test_registry_with_backends(vec![backend]);
        overrides.insert(id("B2"), "audio-sim".to_string());
        let decision = RoutingDecision {
            selected: vec![id("B2")],
            raw_response: "B2".to_string(),
            dropped_tokens: vec![],
            fallback_used: false,
        };
        let options = RunOptions {
            overrides,
            ..RunOptions::default()
        };
        let err = run_selected(&decision, &query, &test_registry, &gateway, None, &options)
            .await
            .unwrap_err();
        assert!(err.to_string().starts_with("expert:B2:"), "{err}");
        let _ = registry;
    }

    #[tokio::test]
    async fn lenient_mode_substitutes_placeholder() {
        let gateway = Gateway::new();
        let query = audio_query();
        let backend = scripted_backend(
            "audio-sim",
            vec![ScriptEntry::substring("never-matching-sentinel", "x")],
        )
        .unwrap();
        let (test_registry, mut overrides) = test_registry_with_backends(vec![backend]);
        overrides.insert(id("B2"), "audio-sim".to_string());
        let decision = RoutingDecision {
            selected: vec![id("B2")],
            raw_response: "B2".to_string(),
            dropped_tokens: vec![],
            fallback_used: false,
        };
        let options = RunOptions {
            lenient: true,
            overrides,
            ..RunOptions::default()
        };
        let run = run_selected(&decision, &query, &test_registry, &gateway, None, &options)
            .await
            .unwrap();
        assert_eq!(run.bundle.outputs[0].text, "[expert B2 unavailable]");
        assert!(!run.warnings.is_empty());
    }
}
