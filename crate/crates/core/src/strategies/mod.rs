//! Prompt chains as data: the no-CoT baseline, the contrastive chain and its
//! two ablations, sub-question decomposition, and scene-graph prompting.
//!
//! A [`Strategy`] is an ordered list of [`Stage`]s. Each stage renders one
//! user message (image parts first, then text) from its template and the
//! outputs of earlier stages.

mod parse;
mod template;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chat::{ChatMessage, ImageRef, MessagePart};
use crate::choices::ChoiceSet;

pub use parse::{extract_json, parse_subquestions, render_subquestions, MAX_SUBQUESTIONS};
pub use template::{has_placeholder_token, placeholders, Placeholder, TemplateSet};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StrategyError {
    #[error("stage {stage} of {strategy}: placeholder {{{placeholder}}} has no value at this stage")]
    UnboundPlaceholder { strategy: String, stage: usize, placeholder: String },
    #[error("template {name}: unknown placeholder {{{placeholder}}}")]
    UnknownPlaceholder { name: String, placeholder: String },
    #[error("task requires answer options but none were given")]
    MissingChoices,
    #[error("stage {stage} produced no usable output")]
    UnusableStageOutput { stage: String },
    #[error("per-candidate stage rendered without a candidate index")]
    MissingCandidate,
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("template {name} missing")]
    MissingTemplate { name: String },
    #[error("template I/O: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyId {
    Standard,
    Cocot,
    CocotSim,
    CocotDiff,
    Ddcot,
    Ccot,
}

impl StrategyId {
    pub const ALL: [StrategyId; 6] = [
        StrategyId::Standard,
        StrategyId::Cocot,
        StrategyId::CocotSim,
        StrategyId::CocotDiff,
        StrategyId::Ddcot,
        StrategyId::Ccot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyId::Standard => "standard",
            StrategyId::Cocot => "cocot",
            StrategyId::CocotSim => "cocot_sim",
            StrategyId::CocotDiff => "cocot_diff",
            StrategyId::Ddcot => "ddcot",
            StrategyId::Ccot => "ccot",
        }
    }

    pub fn is_contrastive(self) -> bool {
        matches!(self, StrategyId::Cocot | StrategyId::CocotSim | StrategyId::CocotDiff)
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyId {
    type Err = StrategyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyId::ALL
            .into_iter()
            .find(|id| id.as_str() == s.trim())
            .ok_or_else(|| StrategyError::UnknownStrategy(s.to_string()))
    }
}

/// Whether a contrastive strategy asks for comparison and answer in one call or two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CocotMode {
    #[default]
    SingleCall,
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachImages {
    All,
    None,
    /// Context images plus exactly one candidate; used when candidates are scored one at a time.
    PerCandidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expects {
    FreeText,
    StructuredJson,
    Choice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub template: String,
    pub attach_images: AttachImages,
    pub expects: Expects,
    /// Append a sentence naming each attached image ("Image 1", "Image 2", ...).
    #[serde(default)]
    pub label_images: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub id: StrategyId,
    pub mode: Option<CocotMode>,
    pub stages: Vec<Stage>,
    pub template_version: String,
}

/// Everything a chain needs to know about one task instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrompt {
    /// Context images, attached in order.
    pub images: Vec<ImageRef>,
    /// Candidate answer images, attached after the context images.
    pub candidates: Vec<ImageRef>,
    pub question: String,
    pub choices: Option<ChoiceSet>,
    pub requires_choices: bool,
}

impl TaskPrompt {
    pub fn all_images(&self) -> impl Iterator<Item = &ImageRef> {
        self.images.iter().chain(&self.candidates)
    }
}

/// Values available to a stage beyond the task itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageInputs<'a> {
    pub prior_output: Option<&'a str>,
    pub subquestions: Option<&'a [String]>,
    pub candidate: Option<usize>,
}

struct StageSpec {
    name: &'static str,
    attach: AttachImages,
    expects: Expects,
    label_images: bool,
}

const fn spec(name: &'static str, attach: AttachImages, expects: Expects) -> StageSpec {
    StageSpec { name, attach, expects, label_images: false }
}

fn stage_specs(id: StrategyId, mode: CocotMode) -> Vec<StageSpec> {
    use AttachImages as A;
    use Expects as E;
    match (id, mode) {
        (StrategyId::Standard, _) => vec![spec("answer", A::All, E::Choice)],
        (c, CocotMode::SingleCall) if c.is_contrastive() => vec![spec("contrast_answer", A::All, E::Choice)],
        (c, CocotMode::TwoStage) if c.is_contrastive() => {
            vec![spec("contrast", A::All, E::FreeText), spec("answer", A::All, E::Choice)]
        }
        (StrategyId::Ddcot, _) => vec![
            spec("decompose", A::None, E::FreeText),
            spec("subanswer", A::All, E::FreeText),
            spec("answer", A::All, E::Choice),
        ],
        (StrategyId::Ccot, _) => vec![
            StageSpec { label_images: true, ..spec("scene_graph", A::All, E::StructuredJson) },
            spec("answer", A::All, E::Choice),
        ],
        _ => unreachable!("contrastive ids handled above"),
    }
}

impl Strategy {
    /// Template key: the strategy id, suffixed `_two_stage` for two-call contrastive chains.
    pub fn template_key(id: StrategyId, mode: CocotMode) -> String {
        match (id.is_contrastive(), mode) {
            (true, CocotMode::TwoStage) => format!("{}_two_stage", id.as_str()),
            _ => id.as_str().to_string(),
        }
    }

    pub fn load(id: StrategyId, mode: CocotMode, templates: &TemplateSet) -> Result<Self, StrategyError> {
        let key = Self::template_key(id, mode);
        let stages = stage_specs(id, mode)
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let template = templates.get(&key, i + 1)?;
                Ok(Stage {
                    name: s.name.to_string(),
                    template,
                    attach_images: s.attach,
                    expects: s.expects,
                    label_images: s.label_images,
                })
            })
            .collect::<Result<Vec<_>, StrategyError>>()?;
        let strategy = Strategy {
            id,
            mode: id.is_contrastive().then_some(mode),
            template_version: version_hash(&key, &stages),
            stages,
        };
        strategy.check_bindings()?;
        Ok(strategy)
    }

    /// Loads with the shipped templates.
    pub fn builtin(id: StrategyId, mode: CocotMode) -> Self {
        Self::load(id, mode, &TemplateSet::builtin()).expect("shipped templates are valid")
    }

    pub fn key(&self) -> String {
        Self::template_key(self.id, self.mode.unwrap_or_default())
    }

    fn check_bindings(&self) -> Result<(), StrategyError> {
        for (i, stage) in self.stages.iter().enumerate() {
            for p in template::placeholders(&stage.template) {
                let p = p.map_err(|placeholder| StrategyError::UnknownPlaceholder {
                    name: format!("{}.{}", self.key(), i + 1),
                    placeholder,
                })?;
                let bound = match p {
                    Placeholder::Question | Placeholder::Choices => true,
                    Placeholder::PriorOutput => i > 0,
                    // sub-questions come from the decomposition stage
                    Placeholder::Subquestions => self.id == StrategyId::Ddcot && i > 0,
                };
                if !bound {
                    return Err(StrategyError::UnboundPlaceholder {
                        strategy: self.key(),
                        stage: i + 1,
                        placeholder: p.name().to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Copy whose final stage attaches one candidate at a time, for likelihood scoring.
    pub fn for_candidate_scoring(&self) -> Self {
        let mut s = self.clone();
        if let Some(last) = s.stages.last_mut() {
            last.attach_images = AttachImages::PerCandidate;
        }
        s
    }

    /// Renders stage `index` (0-based) into the messages sent to the backend.
    pub fn render_stage(
        &self,
        index: usize,
        prompt: &TaskPrompt,
        inputs: StageInputs<'_>,
    ) -> Result<Vec<ChatMessage>, StrategyError> {
        let stage = &self.stages[index];
        if prompt.requires_choices && prompt.choices.is_none() {
            return Err(StrategyError::MissingChoices);
        }
        let choices = prompt.choices.as_ref().map(ChoiceSet::render).unwrap_or_default();
        let subq = inputs.subquestions.map(render_subquestions);
        let unbound = |p: Placeholder| StrategyError::UnboundPlaceholder {
            strategy: self.key(),
            stage: index + 1,
            placeholder: p.name().to_string(),
        };
        let body = template::substitute(&stage.template, |p| match p {
            Placeholder::Question => Ok(prompt.question.as_str()),
            Placeholder::Choices => Ok(choices.as_str()),
            Placeholder::PriorOutput => inputs.prior_output.ok_or_else(|| unbound(p)),
            Placeholder::Subquestions => subq.as_deref().ok_or_else(|| unbound(p)),
        })?;

        let images: Vec<&ImageRef> = match stage.attach_images {
            AttachImages::None => Vec::new(),
            AttachImages::All => prompt.all_images().collect(),
            AttachImages::PerCandidate => {
                let k = inputs.candidate.ok_or(StrategyError::MissingCandidate)?;
                let cand = prompt.candidates.get(k).ok_or(StrategyError::MissingCandidate)?;
                prompt.images.iter().chain(std::iter::once(cand)).collect()
            }
        };

        let mut text = String::new();
        if !images.is_empty() && !prompt.candidates.is_empty() {
            text.push_str(&candidate_layout(prompt.images.len(), prompt.candidates.len(), stage.attach_images, inputs.candidate));
            text.push('\n');
        }
        text.push_str(body.trim_end());
        if stage.label_images && !images.is_empty() {
            text.push('\n');
            text.push_str(&image_labels(images.len()));
        }

        let mut parts: Vec<MessagePart> = images.into_iter().cloned().map(MessagePart::image).collect();
        parts.push(MessagePart::text(text));
        Ok(vec![ChatMessage::user(parts)])
    }
}

fn candidate_layout(n_context: usize, n_candidates: usize, attach: AttachImages, candidate: Option<usize>) -> String {
    let ctx = if n_context == 1 { "Image 1 is".to_string() } else { format!("Images 1-{n_context} are") };
    match (attach, candidate) {
        (AttachImages::PerCandidate, Some(k)) => format!(
            "{ctx} the puzzle context; image {} is candidate {} of {n_candidates}.",
            n_context + 1,
            k + 1
        ),
        _ => format!(
            "{ctx} the puzzle context; images {}-{} are candidates 1-{n_candidates}, in order.",
            n_context + 1,
            n_context + n_candidates
        ),
    }
}

fn image_labels(n: usize) -> String {
    let labels: Vec<String> = (1..=n).map(|i| format!("\"Image {i}\"")).collect();
    let noun = if n == 1 { "scene graph" } else { "scene graphs" };
    format!(
        "There {} {n} input image{}. Return exactly {n} {noun} as one JSON object keyed by {}.",
        if n == 1 { "is" } else { "are" },
        if n == 1 { "" } else { "s" },
        labels.join(", ")
    )
}

fn version_hash(key: &str, stages: &[Stage]) -> String {
    let mut h = Sha256::new();
    h.update(key.as_bytes());
    for s in stages {
        h.update([0]);
        h.update(s.name.as_bytes());
        h.update([0]);
        h.update(s.template.as_bytes());
    }
    hex::encode(h.finalize())[..16].to_string()
}

/// A chain rendered end to end: one entry per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedStage {
    pub stage: Stage,
    pub messages: Vec<ChatMessage>,
    pub output: String,
}

/// Renders every stage, obtaining each stage's output from `respond`.
pub fn build_chain<E>(
    strategy: &Strategy,
    prompt: &TaskPrompt,
    mut respond: impl FnMut(&Stage, &[ChatMessage]) -> Result<String, E>,
) -> Result<Vec<RenderedStage>, ChainError<E>> {
    let mut out: Vec<RenderedStage> = Vec::with_capacity(strategy.stages.len());
    let mut subquestions: Option<Vec<String>> = None;
    for (i, stage) in strategy.stages.iter().enumerate() {
        let inputs = StageInputs {
            prior_output: out.last().map(|r| r.output.as_str()),
            subquestions: subquestions.as_deref(),
            candidate: None,
        };
        let messages = strategy.render_stage(i, prompt, inputs).map_err(ChainError::Strategy)?;
        let output = respond(stage, &messages).map_err(ChainError::Backend)?;
        if strategy.id == StrategyId::Ddcot && i == 0 {
            subquestions = Some(parse_subquestions(&output).map_err(ChainError::Strategy)?);
        }
        out.push(RenderedStage { stage: stage.clone(), messages, output });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChainError<E> {
    #[error(transparent)]
    Strategy(StrategyError),
    #[error("backend call failed: {0}")]
    Backend(E),
}

/// Loads all strategies requested, keyed by template key.
pub fn load_strategies(
    ids: &[StrategyId],
    mode: CocotMode,
    template_dir: Option<&Path>,
) -> Result<BTreeMap<String, Strategy>, StrategyError> {
    let templates = match template_dir {
        Some(dir) => TemplateSet::with_overrides(dir)?,
        None => TemplateSet::builtin(),
    };
    ids.iter()
        .map(|&id| Strategy::load(id, mode, &templates).map(|s| (s.key(), s)))
        .collect()
}

#[cfg(test)]
mod tests;
