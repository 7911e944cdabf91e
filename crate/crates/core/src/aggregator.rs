//! Answer aggregation: assembles the expert bundle into the aggregation
//! prompt, calls the reasoning backend, and extracts a discrete answer
//! choice. Also provides the direct single-backend baseline used in
//! ablations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experts::{CallUsage, ExpertBundle};
use crate::gateway::{
    AssetError, BackendSpec, ChatMessage, ChatRequest, Gateway, GatewayError,
};
use crate::registry::Modality;
use crate::router::Query;

/// Everything the aggregator needs for one item.
#[derive(Debug, Clone)]
pub struct AggregationInput {
    pub bundle: ExpertBundle,
    /// The aggregation task description prepended to the prompt.
    pub task_description: String,
    /// Per-item task context, included only when configured.
    pub task_context: Option<String>,
    pub question: String,
    pub options: Vec<String>,
}

/// How the final choice was extracted from the raw response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtractionMethod {
    #[serde(rename = "letter-pattern")]
    LetterPattern,
    #[serde(rename = "option-text-match")]
    OptionTextMatch,
    #[serde(rename = "fallback-first")]
    FallbackFirst,
}

/// The aggregator's answer with full provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub choice_index: usize,
    pub choice_letter: String,
    pub rationale: String,
    pub raw_response: String,
    pub extraction_method: ExtractionMethod,
}

/// An answer together with call usage and truncation provenance.
#[derive(Debug, Clone)]
pub struct Aggregated {
    pub answer: FinalAnswer,
    pub usage: CallUsage,
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("aggregator: empty bundle")]
    EmptyBundle,

    #[error("aggregator: multiple-choice aggregation needs at least 2 options, got {0}")]
    TooFewOptions(usize),

    #[error("aggregator: template placeholder mismatch: missing {{{0}}}")]
    MissingPlaceholder(String),

    #[error("aggregator: {0}")]
    Backend(GatewayError),

    #[error("aggregator: backend {backend} does not accept {modality} assets")]
    UnsupportedModality { backend: String, modality: Modality },

    #[error("aggregator: {0}")]
    Asset(AssetError),
}

impl From<GatewayError> for AggregateError {
    fn from(e: GatewayError) -> Self {
        AggregateError::Backend(e)
    }
}

impl From<AssetError> for AggregateError {
    fn from(e: AssetError) -> Self {
        AggregateError::Asset(e)
    }
}

impl AggregateError {
    /// True when the underlying failure is a credential/auth problem.
    pub fn is_auth(&self) -> bool {
        matches!(self, AggregateError::Backend(g) if g.is_auth())
    }
}

/// Option letter for a 0-based index: `A`..`Z`, then `AA`, `AB`, ... (the
/// bijective base-26 scheme spreadsheets use for columns).
pub fn lettering(index: usize) -> String {
    let mut letters = Vec::new();
    let mut n = index;
    loop {
        letters.push(b'A' + (n % 26) as u8);
        n /= 26;
        if n == 0 {
            break;
        }
        n -= 1;
    }
    letters.reverse();
    String::from_utf8(letters).expect("ascii letters")
}

/// Inverse of [`lettering`]; `None` for anything that is not a pure A-Z
/// string.
pub fn letter_index(letters: &str) -> Option<usize> {
    if letters.is_empty() {
        return None;
    }
    let mut n: usize = 0;
    for c in letters.chars() {
        let c = c.to_ascii_uppercase();
        if !c.is_ascii_uppercase() {
            return None;
        }
        n = n.checked_mul(26)?.checked_add((c as u8 - b'A') as usize + 1)?;
    }
    Some(n - 1)
}

/// Lettered option lines, `A. first\nB. second`.
fn render_options(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{}. {}", lettering(i), o))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Renders the aggregation prompt: the task description, one
/// `Expert i: <text>` block per bundle output in bundle order, then the
/// instruction sentence with the question and lettered options. Pure function
/// of its inputs.
pub fn render_aggregator_prompt(
    input: &AggregationInput,
    template: &str,
) -> Result<String, AggregateError> {
    render_with_texts(input, template, None)
}

/// As [`render_aggregator_prompt`], but with expert texts overridden (used by
/// the truncation path).
fn render_with_texts(
    input: &AggregationInput,
    template: &str,
    texts: Option<&[String]>,
) -> Result<String, AggregateError> {
    if input.bundle.outputs.is_empty() {
        return Err(AggregateError::EmptyBundle);
    }
    if input.options.len() < 2 {
        return Err(AggregateError::TooFewOptions(input.options.len()));
    }
    for name in ["task-description", "expert-blocks", "question", "options"] {
        if !template.contains(&format!("{{{name}}}")) {
            return Err(AggregateError::MissingPlaceholder(name.to_string()));
        }
    }
    let blocks = input
        .bundle
        .outputs
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let text = texts.map(|t| t[i].as_str()).unwrap_or(o.text.as_str());
            format!("Expert {}: {}", i + 1, text)
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    let task_description = match &input.task_context {
        Some(context) if !context.trim().is_empty() => {
            format!("{}\nTask Context: {:?}", input.task_description, context)
        }
        _ => input.task_description.clone(),
    };
    let rendered = template
        .replace("{task-description}", &task_description)
        .replace("{expert-blocks}", &blocks)
        .replace("{question}", &input.question)
        .replace("{options}", &render_options(&input.options));
    Ok(rendered.trim().to_string())
}

/// Extracts a choice from raw model output. Total: always returns a valid
/// index.
///
/// Rules apply in order:
/// 1. letter-pattern — the last standalone occurrence of a valid option
///    letter (`(B)`, `B.`, `B)`, `Answer: B`, or a bare `B`), case-insensitive;
/// 2. option-text-match — the longest option whose full text appears
///    case-insensitively in the response;
/// 3. fallback-first — index 0, flagged via the extraction method.
pub fn extract_choice(raw: &str, options: &[String]) -> (usize, ExtractionMethod) {
    if let Some((index, _)) = last_standalone_letter(raw, options.len()) {
        return (index, ExtractionMethod::LetterPattern);
    }
    if let Some((index, _)) = longest_option_text_match(raw, options) {
        return (index, ExtractionMethod::OptionTextMatch);
    }
    (0, ExtractionMethod::FallbackFirst)
}

/// Finds the last standalone occurrence of any valid option letter. Returns
/// the option index and the byte offset of the match.
fn last_standalone_letter(raw: &str, option_count: usize) -> Option<(usize, usize)> {
    // Longest letter strings first, so AA is never read as two A matches.
    let mut letters: Vec<(String, usize)> = (0..option_count)
        .map(|i| (lettering(i), i))
        .collect();
    letters.sort_by_key(|(l, _)| std::cmp::Reverse(l.len()));

    let mut best: Option<(usize, usize)> = None; // (start, index)
    for (start, _) in raw.char_indices() {
        for (letter, index) in &letters {
            let end = start + letter.len();
            if end > raw.len() || !raw.is_char_boundary(end) {
                continue;
            }
            if !raw[start..end].eq_ignore_ascii_case(letter) {
                continue;
            }
            let before_ok = start == 0
                || !raw[..start]
                    .chars()
                    .next_back()
                    .is_some_and(|c| c.is_alphanumeric());
            let after_ok = end == raw.len()
                || !raw[end..].chars().next().is_some_and(|c| c.is_alphanumeric());
            if before_ok && after_ok {
                if best.is_none_or(|(s, _)| start > s) {
                    best = Some((start, *index));
                }
                break;
            }
        }
    }
    best.map(|(start, index)| (index, start))
}

/// Finds the longest option whose full text appears (ASCII case-insensitive)
/// in `raw`. Ties break toward the lower index. Returns the option index and
/// the byte offset of its first occurrence.
fn longest_option_text_match(raw: &str, options: &[String]) -> Option<(usize, usize)> {
    let haystack = raw.to_ascii_lowercase();
    let mut ranked: Vec<(usize, &String)> = options.iter().enumerate().collect();
    ranked.sort_by(|(ia, a), (ib, b)| b.len().cmp(&a.len()).then(ia.cmp(ib)));
    for (index, option) in ranked {
        if option.trim().is_empty() {
            continue;
        }
        if let Some(pos) = haystack.find(&option.to_ascii_lowercase()) {
            return Some((index, pos));
        }
    }
    None
}

/// Builds a [`FinalAnswer`] from raw output: extraction plus the rationale
/// (the text preceding the detected answer; the whole response for
/// fallback-first).
pub fn answer_from_raw(raw: &str, options: &[String]) -> FinalAnswer {
    let (choice_index, extraction_method) = extract_choice(raw, options);
    let before = |start: usize| {
        raw[..start]
            .trim_end_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
            .trim_start()
            .to_string()
    };
    let rationale = match extraction_method {
        ExtractionMethod::LetterPattern => {
            let (_, start) = last_standalone_letter(raw, options.len()).expect("method fired");
            before(start)
        }
        ExtractionMethod::OptionTextMatch => {
            let (_, start) = longest_option_text_match(raw, options).expect("method fired");
            before(start)
        }
        ExtractionMethod::FallbackFirst => raw.trim().to_string(),
    };
    FinalAnswer {
        choice_index,
        choice_letter: lettering(choice_index),
        rationale,
        raw_response: raw.to_string(),
        extraction_method,
    }
}

/// Truncates expert texts tail-first and proportionally so the rendered
/// prompt fits the budget. The question and options are never touched.
fn truncate_expert_texts(
    input: &AggregationInput,
    template: &str,
    budget: usize,
) -> Result<(String, String), AggregateError> {
    let full = render_with_texts(input, template, None)?;
    let total_expert: usize = input.bundle.outputs.iter().map(|o| o.text.len()).sum();
    let skeleton = full.len() - total_expert;
    let available = budget.saturating_sub(skeleton);
    let keep_ratio = if total_expert == 0 {
        0.0
    } else {
        (available as f64 / total_expert as f64).min(1.0)
    };
    let texts: Vec<String> = input
        .bundle
        .outputs
        .iter()
        .map(|o| {
            let mut keep = (o.text.len() as f64 * keep_ratio).floor() as usize;
            while keep > 0 && !o.text.is_char_boundary(keep) {
                keep -= 1;
            }
            o.text[..keep].to_string()
        })
        .collect();
    let rendered = render_with_texts(input, template, Some(&texts))?;
    let warning = format!(
        "aggregator: prompt exceeded context budget ({} > {budget} bytes); \
         expert outputs truncated tail-first to {} bytes total",
        full.len(),
        texts.iter().map(String::len).sum::<usize>(),
    );
    Ok((rendered, warning))
}

/// Renders the aggregation prompt, calls the reasoning backend, and extracts
/// the answer. Extraction failure is not an error: the first option is used
/// and flagged via the extraction method.
pub async fn aggregate(
    gateway: &Gateway,
    backend: &BackendSpec,
    input: &AggregationInput,
    template: &str,
) -> Result<Aggregated, AggregateError> {
    let mut warnings = Vec::new();
    let mut prompt = render_aggregator_prompt(input, template)?;
    if let Some(budget) = backend.context_budget_chars {
        if prompt.len() > budget {
            let (truncated, warning) = truncate_expert_texts(input, template, budget)?;
            prompt = truncated;
            warnings.push(warning);
        }
    }
    let request = ChatRequest::user(prompt);
    let response = gateway.complete(backend, &request).await?;
    Ok(Aggregated {
        answer: answer_from_raw(&response.text, &input.options),
        usage: CallUsage::from(&response),
        warnings,
    })
}

/// The monolithic baseline: question, options, and raw assets go to a single
/// backend with no router and no experts.
pub async fn direct_answer(
    gateway: &Gateway,
    backend: &BackendSpec,
    query: &Query,
) -> Result<Aggregated, AggregateError> {
    if query.options.len() < 2 {
        return Err(AggregateError::TooFewOptions(query.options.len()));
    }
    for asset in &query.assets {
        if !backend.accepts_modality(asset.modality) {
            return Err(AggregateError::UnsupportedModality {
                backend: backend.id.clone(),
                modality: asset.modality,
            });
        }
    }
    let mut prompt = String::new();
    if !query.task_context.trim().is_empty() {
        prompt.push_str(&format!("Task Type: {:?}\n", query.task_context));
    }
    prompt.push_str(&format!(
        "Question: {:?}\nOptions:\n{}\n\nSelect the best answer and reply with its letter.",
        query.question,
        render_options(&query.options)
    ));
    let request = ChatRequest::new(vec![ChatMessage::user_with_attachments(
        prompt,
        query.assets.clone(),
    )])
    .map_err(AggregateError::Backend)?;
    let response = gateway.complete(backend, &request).await?;
    Ok(Aggregated {
        answer: answer_from_raw(&response.text, &query.options),
        usage: CallUsage::from(&response),
        warnings: Vec::new(),
    })
}
