//! `chorus` — operator entry points for single queries, benchmark runs,
//! ablation grids, and report statistics.
//!
//! Exit codes: 0 success, 1 pipeline/model failure, 2 usage or configuration
//! error. Flags override environment variables, which override config-file
//! defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use chorus_core::aggregator::direct_answer;
use chorus_core::cache::ExpertCache;
use chorus_core::experts::{run_selected, RunOptions};
use chorus_core::gateway::{Gateway, MediaRef};
use chorus_core::harness::{
    evaluate, load_dataset, run_ablation, BenchmarkItem, PipelineConfig, RunMode, RunReport,
};
use chorus_core::registry::{load_registry_file, Modality, TaxonomyRegistry};
use chorus_core::router::{route, Query};

#[derive(Parser)]
#[command(name = "chorus", version, about = "Expert-orchestrated multimodal question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Registry config file (TOML). Defaults to the built-in registry.
    #[arg(long, global = true, env = "CHORUS_CONFIG")]
    config: Option<PathBuf>,

    /// Pipeline mode.
    #[arg(long, global = true, env = "CHORUS_MODE", value_enum, default_value_t = Mode::Pipeline)]
    mode: Mode,

    /// Fail an item on any expert failure (default).
    #[arg(long, global = true, conflicts_with = "lenient")]
    strict: bool,

    /// Substitute placeholders for failing experts instead of failing items.
    #[arg(long, global = true)]
    lenient: bool,

    /// Expert-output cache directory.
    #[arg(long, global = true, env = "CHORUS_CACHE_DIR")]
    cache_dir: Option<PathBuf>,

    /// Items processed concurrently during benchmark runs.
    #[arg(long, global = true, env = "CHORUS_MAX_CONCURRENCY", default_value_t = 4)]
    max_concurrency: usize,

    /// Trace verbosity for `ask`: 0 answer only, 1 adds the routing
    /// decision, 2 adds expert outputs and the rationale.
    #[arg(long, global = true, env = "CHORUS_VERBOSITY", default_value_t = 2)]
    verbosity: u8,

    /// Router backend id (overrides the config default).
    #[arg(long, global = true)]
    router_backend: Option<String>,

    /// Aggregator backend id (overrides the config default).
    #[arg(long, global = true)]
    aggregator_backend: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Pipeline,
    #[value(name = "direct-baseline")]
    DirectBaseline,
}

#[derive(Subcommand)]
enum Command {
    /// Answer a single question over local media assets.
    Ask(AskArgs),
    /// Evaluate a JSONL benchmark manifest and report accuracy.
    Bench(BenchArgs),
    /// Evaluate every router x aggregator pair over one dataset.
    Ablate(AblateArgs),
    /// Render the skill-selection histogram of a report file.
    Stats(StatsArgs),
}

#[derive(Args)]
struct AskArgs {
    /// The question to answer.
    #[arg(long)]
    question: String,

    /// Answer options (repeat; at least two).
    #[arg(long = "option")]
    options: Vec<String>,

    /// Media assets as modality=path (repeat). Modalities: image, video,
    /// audio, point-cloud-3d, medical-volume, document, text.
    #[arg(long = "asset")]
    assets: Vec<String>,

    /// Task-type context shown to the router.
    #[arg(long, default_value = "multimodal QA")]
    task_context: String,
}

#[derive(Args)]
struct BenchArgs {
    /// Dataset manifest (JSON Lines).
    #[arg(long)]
    data: PathBuf,

    /// Keep only items whose categories contain key=value (repeat).
    #[arg(long = "filter")]
    filters: Vec<String>,

    /// Write the full JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset manifest (JSON Lines).
    #[arg(long)]
    data: PathBuf,

    /// Router backend ids (comma separated).
    #[arg(long, value_delimiter = ',', required = true)]
    routers: Vec<String>,

    /// Aggregator backend ids (comma separated).
    #[arg(long, value_delimiter = ',', required = true)]
    aggregators: Vec<String>,

    /// Write the full JSON grid here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Report file produced by `bench`.
    report: PathBuf,

    /// Emit machine-readable JSON instead of the table.
    #[arg(long)]
    json: bool,
}

type CmdResult = Result<(), CmdError>;

/// Usage/configuration problems exit 2; pipeline failures exit 1.
enum CmdError {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

fn usage(e: impl Into<anyhow::Error>) -> CmdError {
    CmdError::Usage(e.into())
}

/// Pipeline failures exit 1, except credential/auth problems, which are
/// configuration errors (exit 2) wherever in the pipeline they surface.
fn run_failure(e: impl Into<anyhow::Error>) -> CmdError {
    let e = e.into();
    let is_auth = e
        .downcast_ref::<chorus_core::gateway::GatewayError>()
        .is_some_and(|g| g.is_auth())
        || e.downcast_ref::<chorus_core::router::RouteError>()
            .is_some_and(|r| r.is_auth())
        || e.downcast_ref::<chorus_core::experts::ExpertError>()
            .is_some_and(|x| x.is_auth())
        || e.downcast_ref::<chorus_core::aggregator::AggregateError>()
            .is_some_and(|a| a.is_auth());
    if is_auth {
        CmdError::Usage(e)
    } else {
        CmdError::Run(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    match runtime.block_on(dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(CmdError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

async fn dispatch(cli: Cli) -> CmdResult {
    let registry = load_configured_registry(cli.config.as_deref())?;
    let pipeline = build_pipeline(&cli, registry)?;
    match &cli.command {
        Command::Ask(args) => cmd_ask(&cli, &pipeline, args).await,
        Command::Bench(args) => cmd_bench(&pipeline, args).await,
        Command::Ablate(args) => cmd_ablate(&pipeline, args).await,
        Command::Stats(args) => cmd_stats(args),
    }
}

fn load_configured_registry(path: Option<&Path>) -> Result<Arc<TaxonomyRegistry>, CmdError> {
    match path {
        Some(path) => Ok(Arc::new(load_registry_file(path).map_err(usage)?)),
        None => Ok(Arc::new(TaxonomyRegistry::default_shipped())),
    }
}

fn build_pipeline(cli: &Cli, registry: Arc<TaxonomyRegistry>) -> Result<PipelineConfig, CmdError> {
    let cache = match &cli.cache_dir {
        Some(dir) => Some(Arc::new(
            ExpertCache::new(dir)
                .with_context(|| format!("cannot open cache directory {}", dir.display()))
                .map_err(usage)?,
        )),
        None => None,
    };
    Ok(PipelineConfig {
        cache,
        router_backend: cli.router_backend.clone(),
        aggregator_backend: cli.aggregator_backend.clone(),
        mode: match cli.mode {
            Mode::Pipeline => RunMode::Pipeline,
            Mode::DirectBaseline => RunMode::DirectBaseline,
        },
        strict: !cli.lenient,
        item_concurrency: cli.max_concurrency.max(1),
        ..PipelineConfig::new(registry, Gateway::new())
    })
}

fn parse_asset(raw: &str) -> Result<MediaRef, CmdError> {
    let (modality, path) = raw
        .split_once('=')
        .ok_or_else(|| usage(anyhow!("asset {raw:?} must be modality=path")))?;
    let modality: Modality = modality
        .parse()
        .map_err(|e: String| usage(anyhow!("asset {raw:?}: {e}")))?;
    if !Path::new(path).is_file() {
        return Err(usage(anyhow!("asset file not found: {path}")));
    }
    Ok(MediaRef::new(modality, path))
}

async fn cmd_ask(cli: &Cli, pipeline: &PipelineConfig, args: &AskArgs) -> CmdResult {
    if args.options.len() < 2 {
        return Err(usage(anyhow!(
            "ask needs at least two --option values, got {}",
            args.options.len()
        )));
    }
    let assets = args
        .assets
        .iter()
        .map(|raw| parse_asset(raw))
        .collect::<Result<Vec<_>, _>>()?;
    let query = Query::new(
        args.task_context.clone(),
        args.question.clone(),
        args.options.clone(),
        assets,
    )
    .map_err(usage)?;

    let registry = &pipeline.registry;
    let verbosity = cli.verbosity;
    let mut warnings: Vec<String> = Vec::new();

    let answer = match pipeline.mode {
        RunMode::DirectBaseline => {
            let backend_id = pipeline
                .aggregator_backend
                .clone()
                .or_else(|| registry.aggregator_settings().backend.clone())
                .ok_or_else(|| usage(anyhow!("no aggregator backend configured")))?;
            let backend = registry.backend(&backend_id).map_err(usage)?;
            let aggregated = direct_answer(&pipeline.gateway, backend, &query)
                .await
                .map_err(run_failure)?;
            warnings.extend(aggregated.warnings);
            aggregated.answer
        }
        RunMode::Pipeline => {
            let router_id = pipeline
                .router_backend
                .clone()
                .or_else(|| registry.router_settings().backend.clone())
                .ok_or_else(|| usage(anyhow!("no router backend configured")))?;
            let router = registry.backend(&router_id).map_err(usage)?;
            let (decision, _) = route(registry, &pipeline.gateway, router, &query)
                .await
                .map_err(run_failure)?;

            if verbosity >= 1 {
                println!("Routing decision: {}", decision.render_selected());
                println!(
                    "Fallback used: {}",
                    if decision.fallback_used { "yes" } else { "no" }
                );
                let dropped = if decision.dropped_tokens.is_empty() {
                    "(none)".to_string()
                } else {
                    decision.dropped_tokens.join(", ")
                };
                println!("Dropped tokens: {dropped}");
                println!();
            }

            let options = RunOptions {
                fan_out: pipeline.expert_fan_out,
                lenient: !pipeline.strict,
                overrides: pipeline.expert_overrides.clone(),
            };
            let run = run_selected(
                &decision,
                &query,
                registry,
                &pipeline.gateway,
                pipeline.cache.as_deref(),
                &options,
            )
            .await
            .map_err(run_failure)?;
            warnings.extend(run.warnings.clone());

            if verbosity >= 2 {
                for output in &run.bundle.outputs {
                    println!("Expert {} [{}]:", output.skill_id, output.backend_id);
                    println!("{}", output.text);
                    println!();
                }
            }

            let aggregator_id = pipeline
                .aggregator_backend
                .clone()
                .or_else(|| registry.aggregator_settings().backend.clone())
                .ok_or_else(|| usage(anyhow!("no aggregator backend configured")))?;
            let aggregator = registry.backend(&aggregator_id).map_err(usage)?;
            let settings = registry.aggregator_settings();
            let input = chorus_core::aggregator::AggregationInput {
                bundle: run.bundle,
                task_description: settings.task_description.clone(),
                task_context: settings
                    .include_task_context
                    .then(|| query.task_context.clone()),
                question: query.question.clone(),
                options: query.options.clone(),
            };
            let aggregated = chorus_core::aggregator::aggregate(
                &pipeline.gateway,
                aggregator,
                &input,
                registry.aggregation_template(),
            )
            .await
            .map_err(run_failure)?;
            warnings.extend(aggregated.warnings);
            aggregated.answer
        }
    };

    println!(
        "Answer: {}. {}",
        answer.choice_letter, args.options[answer.choice_index]
    );
    if verbosity >= 2 {
        println!("Extraction: {}", method_name(answer.extraction_method));
        if !answer.rationale.is_empty() {
            println!("Rationale: {}", answer.rationale);
        }
    }
    for warning in warnings {
        eprintln!("warning: {warning}");
    }
    Ok(())
}

fn method_name(method: chorus_core::aggregator::ExtractionMethod) -> &'static str {
    use chorus_core::aggregator::ExtractionMethod::*;
    match method {
        LetterPattern => "letter-pattern",
        OptionTextMatch => "option-text-match",
        FallbackFirst => "fallback-first",
    }
}

fn parse_filters(raw: &[String]) -> Result<Vec<(String, String)>, CmdError> {
    raw.iter()
        .map(|f| {
            f.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| usage(anyhow!("filter {f:?} must be key=value")))
        })
        .collect()
}

fn apply_filters(items: Vec<BenchmarkItem>, filters: &[(String, String)]) -> Vec<BenchmarkItem> {
    items
        .into_iter()
        .filter(|item| {
            filters
                .iter()
                .all(|(k, v)| item.categories.get(k) == Some(v))
        })
        .collect()
}

async fn cmd_bench(pipeline: &PipelineConfig, args: &BenchArgs) -> CmdResult {
    let items = load_dataset(&args.data).map_err(usage)?;
    let filters = parse_filters(&args.filters)?;
    let items = apply_filters(items, &filters);
    if items.is_empty() {
        return Err(usage(anyhow!("empty dataset (after filters)")));
    }
    let report = evaluate(pipeline, &items).await.map_err(run_failure)?;
    if let Some(out) = &args.out {
        std::fs::write(out, report.to_json_pretty())
            .with_context(|| format!("cannot write report to {}", out.display()))
            .map_err(run_failure)?;
        println!("report written to {}", out.display());
    }
    print!("{}", report.render_summary());
    Ok(())
}

async fn cmd_ablate(pipeline: &PipelineConfig, args: &AblateArgs) -> CmdResult {
    let routers: Vec<String> = args.routers.iter().filter(|r| !r.is_empty()).cloned().collect();
    let aggregators: Vec<String> = args
        .aggregators
        .iter()
        .filter(|a| !a.is_empty())
        .cloned()
        .collect();
    if routers.is_empty() || aggregators.is_empty() {
        return Err(usage(anyhow!("ablate needs at least one router and one aggregator id")));
    }
    let items = load_dataset(&args.data).map_err(usage)?;
    if items.is_empty() {
        return Err(usage(anyhow!("empty dataset")));
    }
    let grid = run_ablation(pipeline, &routers, &aggregators, &items)
        .await
        .map_err(run_failure)?;
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&grid).expect("grid serializes"))
            .with_context(|| format!("cannot write grid to {}", out.display()))
            .map_err(run_failure)?;
        println!("grid written to {}", out.display());
    }
    print!("{}", grid.render_table());
    Ok(())
}

fn cmd_stats(args: &StatsArgs) -> CmdResult {
    let text = std::fs::read_to_string(&args.report)
        .with_context(|| format!("cannot read report {}", args.report.display()))
        .map_err(usage)?;
    let report: RunReport = serde_json::from_str(&text)
        .context("malformed report file")
        .map_err(usage)?;

    let total: u64 = report.selection_histogram.values().sum();
    if total == 0 {
        println!("no selections recorded");
        return Ok(());
    }
    // Sort by count descending, then by skill id.
    let mut rows: Vec<(String, u64)> = report
        .selection_histogram
        .iter()
        .map(|(skill, count)| (skill.canonical(), *count))
        .collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    if args.json {
        let selections: BTreeMap<String, serde_json::Value> = rows
            .iter()
            .map(|(skill, count)| {
                (
                    skill.clone(),
                    serde_json::json!({
                        "count": count,
                        "percent": format!("{:.1}", *count as f64 / total as f64 * 100.0),
                    }),
                )
            })
            .collect();
        let doc = serde_json::json!({ "total_selections": total, "selections": selections });
        println!("{}", serde_json::to_string_pretty(&doc).expect("stats serialize"));
        return Ok(());
    }

    println!("{:<6} {:>8} {:>8}", "Skill", "Count", "Share");
    for (skill, count) in &rows {
        println!(
            "{:<6} {:>8} {:>7}%",
            skill,
            count,
            format!("{:.1}", *count as f64 / total as f64 * 100.0)
        );
    }
    println!("total selections: {total}");
    Ok(())
}
