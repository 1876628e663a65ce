use serde_json::Value;

use super::StrategyError;

pub const MAX_SUBQUESTIONS: usize = 8;

/// Strips a list marker (`1.`, `1)`, `-`, `*`, `•`) from the start of a line.
fn list_item(line: &str) -> Option<&str> {
    let t = line.trim_start();
    let rest = if let Some(r) = t.strip_prefix(['-', '*', '•']) {
        r
    } else {
        let digits = t.bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 || digits > 2 {
            return None;
        }
        t[digits..].strip_prefix(['.', ')'])?
    };
    if !rest.starts_with(char::is_whitespace) {
        return None;
    }
    let item = rest.trim();
    (!item.is_empty()).then_some(item)
}

/// Parses a decomposition into at most [`MAX_SUBQUESTIONS`] sub-questions.
///
/// Text without a recognizable list becomes a single sub-question.
pub fn parse_subquestions(output: &str) -> Result<Vec<String>, StrategyError> {
    let trimmed = output.trim();
    if trimmed.is_empty() {
        return Err(StrategyError::UnusableStageOutput { stage: "decompose".into() });
    }
    let items: Vec<String> = trimmed
        .lines()
        .filter_map(list_item)
        .take(MAX_SUBQUESTIONS)
        .map(str::to_string)
        .collect();
    if items.is_empty() {
        Ok(vec![trimmed.split_whitespace().collect::<Vec<_>>().join(" ")])
    } else {
        Ok(items)
    }
}

pub fn render_subquestions(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, q)| format!("{}. {q}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Best-effort JSON recovery from model output: whole text, fenced block, or outermost braces.
pub fn extract_json(output: &str) -> Option<Value> {
    let t = output.trim();
    if let Ok(v) = serde_json::from_str::<Value>(t) {
        if v.is_object() || v.is_array() {
            return Some(v);
        }
    }
    if let Some(start) = t.find("```") {
        let after = &t[start + 3..];
        let after = after.strip_prefix("json").unwrap_or(after);
        if let Some(end) = after.find("```") {
            if let Ok(v) = serde_json::from_str::<Value>(after[..end].trim()) {
                return Some(v);
            }
        }
    }
    let (a, b) = (t.find('{')?, t.rfind('}')?);
    if b > a {
        serde_json::from_str::<Value>(&t[a..=b]).ok()
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbered_list() {
        let qs = parse_subquestions("1. What is the boy doing?\n2. Is there a ball?\n").unwrap();
        assert_eq!(qs, vec!["What is the boy doing?", "Is there a ball?"]);
        let qs = parse_subquestions("Sub-questions:\n1) Who holds the ball?\n- Where is the dog?\n* Is it raining?").unwrap();
        assert_eq!(qs.len(), 3);
    }

    #[test]
    fn capped_at_eight() {
        let text: String = (1..=12).map(|i| format!("{i}. question {i}?\n")).collect();
        let qs = parse_subquestions(&text).unwrap();
        assert_eq!(qs.len(), MAX_SUBQUESTIONS);
        assert_eq!(qs[7], "question 8?");
    }

    // Hand-collected malformed decompositions: none has a usable list, so
    // each degrades to one sub-question holding the whole text.
    #[test]
    fn malformed_decompositions_degrade() {
        let corpus = [
            "What is the boy doing in each image?",
            "I think we should ask whether the ball is thrown.",
            "1.What is missing a space?",
            "123. Not a plausible list index",
            "(A)",
            "Sub-questions: is the dog left of the cat? is the cat black?",
            "-no space after dash",
        ];
        for text in corpus {
            let qs = parse_subquestions(text).unwrap();
            assert_eq!(qs.len(), 1, "{text:?}");
            assert_eq!(qs[0], text.trim());
        }
    }

    #[test]
    fn empty_output_is_unusable() {
        assert!(matches!(parse_subquestions("  \n "), Err(StrategyError::UnusableStageOutput { .. })));
    }

    #[test]
    fn canonical_list_renders_verbatim() {
        let text = "1. What is the boy doing?\n2. Is the ball a basketball?";
        assert_eq!(render_subquestions(&parse_subquestions(text).unwrap()), text);
    }

    #[test]
    fn json_recovery() {
        assert!(extract_json(r#"{"Image 1": {"objects": []}}"#).is_some());
        assert!(extract_json("Here you go:\n```json\n{\"Image 1\": {}}\n```").is_some());
        assert!(extract_json("Scene: {\"objects\": [\"boy\"]} done").is_some());
        assert!(extract_json("objects: boy, ball; relation: boy throws ball").is_none());
        assert!(extract_json("{broken: json").is_none());
    }
}
