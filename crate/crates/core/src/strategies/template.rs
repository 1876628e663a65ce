use std::collections::BTreeMap;
use std::path::Path;

use super::StrategyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placeholder {
    Question,
    Choices,
    PriorOutput,
    Subquestions,
}

impl Placeholder {
    pub fn name(self) -> &'static str {
        match self {
            Placeholder::Question => "QUESTION",
            Placeholder::Choices => "CHOICES",
            Placeholder::PriorOutput => "PRIOR_OUTPUT",
            Placeholder::Subquestions => "SUBQUESTIONS",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "QUESTION" => Placeholder::Question,
            "CHOICES" => Placeholder::Choices,
            "PRIOR_OUTPUT" => Placeholder::PriorOutput,
            "SUBQUESTIONS" => Placeholder::Subquestions,
            _ => return None,
        })
    }
}

/// Finds `{NAME}` tokens (NAME in upper snake case) and their byte spans.
fn tokens(template: &str) -> Vec<(usize, usize, &str)> {
    let bytes = template.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let start = i + 1;
            let mut j = start;
            while j < bytes.len() && (bytes[j].is_ascii_uppercase() || bytes[j] == b'_') {
                j += 1;
            }
            if j > start && j < bytes.len() && bytes[j] == b'}' {
                out.push((i, j + 1, &template[start..j]));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Every placeholder token in the template; unknown names come back as `Err(name)`.
pub fn placeholders(template: &str) -> Vec<Result<Placeholder, String>> {
    tokens(template)
        .into_iter()
        .map(|(_, _, name)| Placeholder::from_name(name).ok_or_else(|| name.to_string()))
        .collect()
}

/// True if any placeholder-shaped token remains in `text`.
pub fn has_placeholder_token(text: &str) -> bool {
    !tokens(text).is_empty()
}

/// Single-pass substitution: substituted values are never rescanned.
pub fn substitute<'a, E>(
    template: &str,
    mut value: impl FnMut(Placeholder) -> Result<&'a str, E>,
) -> Result<String, E>
where
    E: From<StrategyError>,
{
    let mut out = String::with_capacity(template.len() + 256);
    let mut last = 0;
    for (start, end, name) in tokens(template) {
        out.push_str(&template[last..start]);
        match Placeholder::from_name(name) {
            Some(p) => out.push_str(value(p)?),
            None => {
                return Err(StrategyError::UnknownPlaceholder {
                    name: "<inline>".into(),
                    placeholder: name.to_string(),
                }
                .into())
            }
        }
        last = end;
    }
    out.push_str(&template[last..]);
    Ok(out)
}

const BUILTIN: &[(&str, &str)] = &[
    ("standard.1", include_str!("../../templates/standard.1.txt")),
    ("cocot.1", include_str!("../../templates/cocot.1.txt")),
    ("cocot_sim.1", include_str!("../../templates/cocot_sim.1.txt")),
    ("cocot_diff.1", include_str!("../../templates/cocot_diff.1.txt")),
    ("cocot_two_stage.1", include_str!("../../templates/cocot_two_stage.1.txt")),
    ("cocot_two_stage.2", include_str!("../../templates/cocot_two_stage.2.txt")),
    ("cocot_sim_two_stage.1", include_str!("../../templates/cocot_sim_two_stage.1.txt")),
    ("cocot_sim_two_stage.2", include_str!("../../templates/cocot_sim_two_stage.2.txt")),
    ("cocot_diff_two_stage.1", include_str!("../../templates/cocot_diff_two_stage.1.txt")),
    ("cocot_diff_two_stage.2", include_str!("../../templates/cocot_diff_two_stage.2.txt")),
    ("ddcot.1", include_str!("../../templates/ddcot.1.txt")),
    ("ddcot.2", include_str!("../../templates/ddcot.2.txt")),
    ("ddcot.3", include_str!("../../templates/ddcot.3.txt")),
    ("ccot.1", include_str!("../../templates/ccot.1.txt")),
    ("ccot.2", include_str!("../../templates/ccot.2.txt")),
];

/// Stage templates keyed `<strategy>.<stage_index>` (1-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, String>,
}

fn normalize(text: &str) -> String {
    text.trim_end_matches(['\n', '\r']).to_string()
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self {
            templates: BUILTIN.iter().map(|(k, v)| (k.to_string(), normalize(v))).collect(),
        }
    }

    /// Shipped templates, replaced by any `<strategy>.<stage>.txt` found in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, StrategyError> {
        let mut set = Self::builtin();
        let rd = std::fs::read_dir(dir).map_err(|e| StrategyError::Io(format!("{}: {e}", dir.display())))?;
        for entry in rd.flatten() {
            let path = entry.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            let Some(key) = name.strip_suffix(".txt") else { continue };
            if !set.templates.contains_key(key) {
                tracing::warn!(file = %path.display(), "ignoring template that matches no strategy stage");
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| StrategyError::Io(format!("{}: {e}", path.display())))?;
            set.templates.insert(key.to_string(), normalize(&text));
        }
        Ok(set)
    }

    pub fn get(&self, strategy_key: &str, stage: usize) -> Result<String, StrategyError> {
        let name = format!("{strategy_key}.{stage}");
        self.templates.get(&name).cloned().ok_or(StrategyError::MissingTemplate { name })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.templates.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}
