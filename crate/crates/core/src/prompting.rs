//! Prompt templates for the encoder (profile summarization) and the task
//! decoders, with `{slot}` substitution.
//!
//! Templates can be overridden from a directory of `<name>.txt` files; any
//! template missing from the directory falls back to the built-in text.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{MovieCatalog, MovieId, RatingEvent};
use crate::sampler::{TaskInstance, TaskKind};

/// Version tag of the built-in preference follow-up wording.
pub const FOLLOWUP_TEMPLATE_VERSION: &str = "followup-v1";

pub const DEFAULT_WORD_LIMITS: [usize; 3] = [50, 100, 200];

const SUMMARIZE: &str = "{history_block}\n\nBased on this rating history, summarize the reasons why I like or dislike certain movies in under {word_limit} words. Do not quote movie titles.";
const LFM_RATING: &str = "{profile} What score out of 5 would you give {target_title}?";
const DIRECT_RATING: &str = "{history_block}\n\nWhat score out of 5 would you give {target_title}?";
const LFM_PREFERENCE: &str = "{profile} Based on this user preference summary, guess which movie does the user prefer, A: {title_a} or B: {title_b}. Answer with 'A' or 'B'.";
const DIRECT_PREFERENCE: &str = "{history_block}\n\nBased on this user rating history, guess which movie does the user prefer, A: {title_a} or B: {title_b}. Answer with 'A' or 'B'.";
const LFM_CHOICE: &str = "{profile} Based on the above user preference summary, guess which movie the user is more likely to have also consumed and reviewed, A: {title_a} or B: {title_b}. Answer with 'A' or 'B'.";
const DIRECT_CHOICE: &str = "{history_block}\n\nBased on the above user rating history, guess which movie the user is more likely to have also consumed and reviewed, A: {title_a} or B: {title_b}. Answer with 'A' or 'B'.";
const PREFERENCE_FOLLOWUP: &str = "The following response describes which of two movies, A: {title_a} or B: {title_b}, a user prefers.\n\nResponse: \"{first_output}\"\n\nWhich movie does the response say the user prefers? Answer with 'A' or 'B'.";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("movie {0} is not in the catalog")]
    UnknownMovie(MovieId),
    #[error("template {template} references unfilled slot {{{slot}}}")]
    UnfilledSlot { template: String, slot: String },
    #[error("template {template} has an unterminated slot")]
    Unterminated { template: String },
    #[error("rendered prompt is empty")]
    Empty,
    #[error("first output is empty")]
    EmptyFirstOutput,
    #[error("task kind {expected} does not match instance kind {found}")]
    KindMismatch { expected: TaskKind, found: TaskKind },
    #[error("cannot read template directory {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Text wrapped around every prompt before it is sent to a model, e.g. the
/// `[INST] ... [/INST]` instruction delimiters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatWrapper {
    pub prefix: String,
    pub suffix: String,
}

impl Default for ChatWrapper {
    fn default() -> Self {
        ChatWrapper { prefix: "[INST] ".to_string(), suffix: " [/INST]".to_string() }
    }
}

impl ChatWrapper {
    pub fn none() -> Self {
        ChatWrapper { prefix: String::new(), suffix: String::new() }
    }

    pub fn wrap(&self, prompt: &str) -> String {
        format!("{}{}{}", self.prefix, prompt, self.suffix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Lfm,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplateSet {
    pub summarize: String,
    pub lfm_rating: String,
    pub lfm_preference: String,
    pub lfm_choice: String,
    pub direct_rating: String,
    pub direct_preference: String,
    pub direct_choice: String,
    pub preference_extract_followup: String,
}

impl Default for PromptTemplateSet {
    fn default() -> Self {
        PromptTemplateSet {
            summarize: SUMMARIZE.into(),
            lfm_rating: LFM_RATING.into(),
            lfm_preference: LFM_PREFERENCE.into(),
            lfm_choice: LFM_CHOICE.into(),
            direct_rating: DIRECT_RATING.into(),
            direct_preference: DIRECT_PREFERENCE.into(),
            direct_choice: DIRECT_CHOICE.into(),
            preference_extract_followup: PREFERENCE_FOLLOWUP.into(),
        }
    }
}

impl PromptTemplateSet {
    const NAMES: [&'static str; 8] = [
        "summarize",
        "lfm_rating",
        "lfm_preference",
        "lfm_choice",
        "direct_rating",
        "direct_preference",
        "direct_choice",
        "preference_extract_followup",
    ];

    fn slot_mut(&mut self, name: &str) -> &mut String {
        match name {
            "summarize" => &mut self.summarize,
            "lfm_rating" => &mut self.lfm_rating,
            "lfm_preference" => &mut self.lfm_preference,
            "lfm_choice" => &mut self.lfm_choice,
            "direct_rating" => &mut self.direct_rating,
            "direct_preference" => &mut self.direct_preference,
            "direct_choice" => &mut self.direct_choice,
            "preference_extract_followup" => &mut self.preference_extract_followup,
            _ => unreachable!("unknown template name {name}"),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &str)> {
        vec![
            ("summarize", &self.summarize),
            ("lfm_rating", &self.lfm_rating),
            ("lfm_preference", &self.lfm_preference),
            ("lfm_choice", &self.lfm_choice),
            ("direct_rating", &self.direct_rating),
            ("direct_preference", &self.direct_preference),
            ("direct_choice", &self.direct_choice),
            ("preference_extract_followup", &self.preference_extract_followup),
        ]
    }

    /// Reads `<name>.txt` overrides; a single trailing newline is dropped.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = PromptTemplateSet::default();
        for name in Self::NAMES {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                continue;
            }
            let text = fs::read_to_string(&path)
                .map_err(|e| PromptError::Io { path: path.display().to_string(), reason: e.to_string() })?;
            let text = text.strip_suffix('\n').unwrap_or(&text).to_string();
            *set.slot_mut(name) = text;
        }
        Ok(set)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), PromptError> {
        let io = |e: std::io::Error| PromptError::Io { path: dir.display().to_string(), reason: e.to_string() };
        fs::create_dir_all(dir).map_err(io)?;
        for (name, text) in self.named() {
            fs::write(dir.join(format!("{name}.txt")), format!("{text}\n")).map_err(io)?;
        }
        Ok(())
    }

    fn task_template(&self, kind: TaskKind, variant: Variant) -> (&'static str, &str) {
        match (kind, variant) {
            (TaskKind::Rating, Variant::Lfm) => ("lfm_rating", &self.lfm_rating),
            (TaskKind::Preference, Variant::Lfm) => ("lfm_preference", &self.lfm_preference),
            (TaskKind::Choice, Variant::Lfm) => ("lfm_choice", &self.lfm_choice),
            (TaskKind::Rating, Variant::Direct) => ("direct_rating", &self.direct_rating),
            (TaskKind::Preference, Variant::Direct) => ("direct_preference", &self.direct_preference),
            (TaskKind::Choice, Variant::Direct) => ("direct_choice", &self.direct_choice),
        }
    }
}

/// Substitutes `{slot}` occurrences. Every referenced slot must be provided.
pub fn fill(name: &str, template: &str, slots: &BTreeMap<&str, String>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| PromptError::Unterminated { template: name.to_string() })?;
        let slot = &after[..close];
        let value = slots
            .get(slot)
            .ok_or_else(|| PromptError::UnfilledSlot { template: name.to_string(), slot: slot.to_string() })?;
        out.push_str(value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    if out.trim().is_empty() {
        return Err(PromptError::Empty);
    }
    Ok(out)
}

/// A natural-language user profile produced by the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileText {
    pub text: String,
    pub word_limit: usize,
    pub actual_word_count: usize,
    pub source_sample: String,
}

impl ProfileText {
    pub fn new(text: impl Into<String>, word_limit: usize, source_sample: impl Into<String>) -> Self {
        let text = text.into();
        let actual_word_count = word_count(&text);
        ProfileText { text, word_limit, actual_word_count, source_sample: source_sample.into() }
    }

    pub fn within_limit(&self) -> bool {
        self.actual_word_count <= self.word_limit
    }
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn title(catalog: &MovieCatalog, id: MovieId) -> Result<&str, PromptError> {
    catalog.get(id).map(|m| m.display.as_str()).ok_or(PromptError::UnknownMovie(id))
}

/// One `I gave <title> a rating of <r> out of 5.` line per event, separated
/// by blank lines.
pub fn render_history_block(history: &[RatingEvent], catalog: &MovieCatalog) -> Result<String, PromptError> {
    let lines = history
        .iter()
        .map(|e| Ok(format!("I gave {} a rating of {} out of 5.", title(catalog, e.movie)?, e.rating)))
        .collect::<Result<Vec<_>, PromptError>>()?;
    Ok(lines.join("\n\n"))
}

pub fn render_summarize_prompt(
    templates: &PromptTemplateSet,
    history: &[RatingEvent],
    word_limit: usize,
    catalog: &MovieCatalog,
) -> Result<String, PromptError> {
    let mut slots = BTreeMap::new();
    slots.insert("history_block", render_history_block(history, catalog)?);
    slots.insert("word_limit", word_limit.to_string());
    fill("summarize", &templates.summarize, &slots)
}

/// What a decoder sees about the user: a profile (LFM) or the raw history
/// (Direct).
#[derive(Debug, Clone, Copy)]
pub enum TaskContext<'a> {
    Profile(&'a ProfileText),
    History(&'a [RatingEvent]),
}

impl TaskContext<'_> {
    pub fn variant(&self) -> Variant {
        match self {
            TaskContext::Profile(_) => Variant::Lfm,
            TaskContext::History(_) => Variant::Direct,
        }
    }
}

fn pair_slots(instance: &TaskInstance, catalog: &MovieCatalog, slots: &mut BTreeMap<&str, String>) -> Result<(), PromptError> {
    match instance.pair() {
        Some((a, b)) => {
            slots.insert("title_a", title(catalog, a)?.to_string());
            slots.insert("title_b", title(catalog, b)?.to_string());
        }
        None => {
            let target = instance.target_movies()[0];
            slots.insert("target_title", title(catalog, target)?.to_string());
        }
    }
    Ok(())
}

pub fn render_task_prompt(
    templates: &PromptTemplateSet,
    kind: TaskKind,
    context: TaskContext<'_>,
    instance: &TaskInstance,
    catalog: &MovieCatalog,
) -> Result<String, PromptError> {
    if instance.kind() != kind {
        return Err(PromptError::KindMismatch { expected: kind, found: instance.kind() });
    }
    let (name, template) = templates.task_template(kind, context.variant());
    let mut slots = BTreeMap::new();
    match context {
        TaskContext::Profile(p) => {
            slots.insert("profile", p.text.trim().to_string());
            slots.insert("word_limit", p.word_limit.to_string());
        }
        TaskContext::History(h) => {
            slots.insert("history_block", render_history_block(h, catalog)?);
        }
    }
    pair_slots(instance, catalog, &mut slots)?;
    fill(name, template, &slots)
}

/// Second-call prompt that asks a model to reduce a verbose preference
/// answer to a bare `A` or `B`.
pub fn render_preference_followup(
    templates: &PromptTemplateSet,
    first_output: &str,
    instance: &TaskInstance,
    catalog: &MovieCatalog,
) -> Result<String, PromptError> {
    if first_output.trim().is_empty() {
        return Err(PromptError::EmptyFirstOutput);
    }
    let mut slots = BTreeMap::new();
    slots.insert("first_output", first_output.trim().to_string());
    pair_slots(instance, catalog, &mut slots)?;
    fill("preference_extract_followup", &templates.preference_extract_followup, &slots)
}
