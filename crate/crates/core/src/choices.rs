//! Labeled answer options and their rendered text form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChoiceError {
    #[error("a choice set needs at least two options, got {0}")]
    TooFew(usize),
    #[error("labels and texts differ in length ({labels} vs {texts})")]
    LengthMismatch { labels: usize, texts: usize },
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("empty label")]
    EmptyLabel,
}

/// Ordered option labels with parallel option texts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceSet {
    labels: Vec<String>,
    texts: Vec<String>,
}

const HEADER: &str = "Options:";
const FOOTER: &str = "Answer with the label of the correct option.";

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl ChoiceSet {
    pub fn new(labels: Vec<String>, texts: Vec<String>) -> Result<Self, ChoiceError> {
        if labels.len() != texts.len() {
            return Err(ChoiceError::LengthMismatch { labels: labels.len(), texts: texts.len() });
        }
        if labels.len() < 2 {
            return Err(ChoiceError::TooFew(labels.len()));
        }
        for (i, l) in labels.iter().enumerate() {
            if l.trim().is_empty() {
                return Err(ChoiceError::EmptyLabel);
            }
            if labels[..i].contains(l) {
                return Err(ChoiceError::DuplicateLabel(l.clone()));
            }
        }
        let texts = texts.iter().map(|t| one_line(t)).collect();
        Ok(Self { labels, texts })
    }

    /// Labels `A`, `B`, ... in order.
    pub fn letters<S: AsRef<str>>(texts: &[S]) -> Result<Self, ChoiceError> {
        let labels = (0..texts.len()).map(|i| ((b'A' + i as u8) as char).to_string()).collect();
        Self::new(labels, texts.iter().map(|t| t.as_ref().to_string()).collect())
    }

    /// Labels `1`, `2`, ... in order.
    pub fn numbered<S: AsRef<str>>(texts: &[S]) -> Result<Self, ChoiceError> {
        let labels = (1..=texts.len()).map(|i| i.to_string()).collect();
        Self::new(labels, texts.iter().map(|t| t.as_ref().to_string()).collect())
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Text substituted for `{CHOICES}`.
    pub fn render(&self) -> String {
        let mut out = String::from(HEADER);
        for (l, t) in self.labels.iter().zip(&self.texts) {
            out.push('\n');
            out.push_str(&format!("({l}) {t}"));
        }
        out.push('\n');
        out.push_str(FOOTER);
        out
    }

    /// Recovers the last rendered option block found in `text`.
    pub fn parse_rendered(text: &str) -> Option<Self> {
        let start = text.rfind(HEADER)? + HEADER.len();
        let mut labels = Vec::new();
        let mut texts = Vec::new();
        for line in text[start..].lines().skip(1) {
            let Some(rest) = line.strip_prefix('(') else { break };
            let Some(close) = rest.find(") ") else { break };
            labels.push(rest[..close].to_string());
            texts.push(rest[close + 2..].to_string());
        }
        Self::new(labels, texts).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants() {
        assert_eq!(ChoiceSet::letters(&["x"]), Err(ChoiceError::TooFew(1)));
        assert!(matches!(
            ChoiceSet::new(vec!["A".into(), "A".into()], vec!["x".into(), "y".into()]),
            Err(ChoiceError::DuplicateLabel(_))
        ));
        assert!(matches!(
            ChoiceSet::new(vec!["A".into(), "B".into()], vec!["x".into()]),
            Err(ChoiceError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn render_and_recover() {
        let c = ChoiceSet::letters(&["a dog\nbites a man", "a man bites a dog"]).unwrap();
        let rendered = c.render();
        assert_eq!(
            rendered,
            "Options:\n(A) a dog bites a man\n(B) a man bites a dog\nAnswer with the label of the correct option."
        );
        let prompt = format!("Earlier Options: none\nWhich caption? {rendered}");
        assert_eq!(ChoiceSet::parse_rendered(&prompt), Some(c));
        let n = ChoiceSet::numbered(&["Candidate 1", "Candidate 2", "Candidate 3"]).unwrap();
        assert_eq!(n.labels(), ["1", "2", "3"]);
        assert_eq!(ChoiceSet::parse_rendered(&n.render()), Some(n));
    }
}
