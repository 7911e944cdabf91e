//! Expert-orchestrated multimodal question answering.
//!
//! The pipeline routes a question to skill-specialized captioning experts,
//! converts their modality-specific evidence into a textual bundle, and has a
//! reasoning backend pick the final multiple-choice answer. A benchmark
//! harness runs the pipeline over datasets and reports accuracy, per-category
//! breakdowns, and skill-selection histograms.
//!
//! Modules follow the pipeline stages:
//!
//! - [`registry`] — skill taxonomy, prompt templates, backend declarations
//! - [`gateway`] — uniform chat-completion client (remote + scripted doubles)
//! - [`router`] — expert selection and skill-ID parsing
//! - [`experts`] — expert invocation, content-addressed caching, fan-out
//! - [`aggregator`] — answer aggregation, choice extraction, direct baseline
//! - [`harness`] — dataset loading, evaluation, reports, ablation grids

pub mod aggregator;
pub mod cache;
pub mod experts;
pub mod gateway;
pub mod harness;
pub mod registry;
pub mod router;

pub use aggregator::{aggregate, direct_answer, extract_choice, lettering, FinalAnswer};
pub use cache::{CacheKey, ExpertCache};
pub use experts::{run_selected, select_asset, ExpertBundle, ExpertOutput};
pub use gateway::{BackendSpec, ChatRequest, ChatResponse, Gateway, MediaRef};
pub use harness::{evaluate, load_dataset, run_ablation, BenchmarkItem, PipelineConfig, RunReport};
pub use registry::{load_registry, Modality, SkillId, TaxonomyRegistry};
pub use router::{parse_skill_ids, route, Query, RoutingDecision};
