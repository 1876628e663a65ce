//! Maps a free-form model response onto one option of a [`ChoiceSet`].

use crate::choices::ChoiceSet;

const KEYWORDS: [&str; 4] = ["option", "choice", "candidate", "answer"];
const SUFFIXES: [&str; 5] = ["", "s", "es", "d", "ed"];

fn is_word(c: char) -> bool {
    c.is_alphanumeric()
}

fn boundary_before(s: &str, at: usize) -> bool {
    !s[..at].chars().next_back().is_some_and(is_word)
}

fn boundary_after(s: &str, at: usize) -> bool {
    !s[at..].chars().next().is_some_and(is_word)
}

/// Byte offsets of every occurrence of `needle` in `hay`.
fn find_all<'a>(hay: &'a str, needle: &'a str) -> impl Iterator<Item = usize> + 'a {
    hay.match_indices(needle).map(|(i, _)| i)
}

/// ASCII-lowercased copy; byte offsets stay aligned with the original.
fn lower(s: &str) -> String {
    s.to_ascii_lowercase()
}

fn strip_decoration(s: &str) -> &str {
    s.trim_matches(|c: char| c.is_whitespace() || matches!(c, '.' | '(' | ')' | '[' | ']' | '*' | '"' | '\'' | '`' | ':' | '!'))
}

/// Short labels (`A`, `4`) only count in explicit label positions, matched case-sensitively.
fn short_label_mentioned(resp: &str, resp_lower: &str, label: &str) -> bool {
    for (open, close) in [("(", ")"), ("[", "]"), ("**", "**")] {
        if resp.contains(&format!("{open}{label}{close}")) {
            return true;
        }
    }
    if strip_decoration(resp) == label {
        return true;
    }
    let head = resp.trim_start();
    if let Some(rest) = head.strip_prefix(label) {
        if rest.starts_with(['.', ')', ':', ',']) {
            return true;
        }
    }
    for kw in KEYWORDS {
        for at in find_all(resp_lower, kw) {
            if !boundary_before(resp_lower, at) {
                continue;
            }
            // "Answers:", "options are" etc. are not single-label declarations.
            let filler = |c: char| c.is_whitespace() || matches!(c, ':' | '*');
            let mut rest = resp[at + kw.len()..].trim_start_matches(filler);
            if let Some(r) = rest.strip_prefix("is") {
                if r.starts_with(filler) {
                    rest = r.trim_start_matches(filler);
                }
            }
            rest = rest.strip_prefix(['(', '[']).unwrap_or(rest);
            rest = rest.trim_start_matches('*');
            if let Some(after) = rest.strip_prefix(label) {
                if !after.starts_with(is_word) {
                    return true;
                }
            }
        }
    }
    false
}

/// Multi-character labels (`Image 1`) count anywhere as a whole phrase, ignoring case.
fn long_label_mentioned(resp_lower: &str, label: &str) -> bool {
    let l = lower(label);
    let found = find_all(resp_lower, &l).any(|at| boundary_before(resp_lower, at) && boundary_after(resp_lower, at + l.len()));
    found
}

fn negated(resp_lower: &str, at: usize) -> bool {
    let before = resp_lower[..at].trim_end();
    before.ends_with(" not") || before == "not" || before.ends_with("n't") || before.ends_with(" no")
}

/// Byte spans where `text` occurs as a word (allowing simple inflections) and is not negated.
fn text_spans(resp_lower: &str, text: &str) -> Vec<(usize, usize)> {
    let t = lower(text);
    if t.trim().is_empty() {
        return Vec::new();
    }
    let mut spans = Vec::new();
    for at in find_all(resp_lower, &t) {
        if !boundary_before(resp_lower, at) || negated(resp_lower, at) {
            continue;
        }
        let end = at + t.len();
        let rest = &resp_lower[end..];
        if let Some(sfx) = SUFFIXES.iter().find(|s| rest.starts_with(**s) && boundary_after(resp_lower, end + s.len())) {
            spans.push((at, end + sfx.len()));
        }
    }
    spans
}

/// Returns the chosen label, or `None` when the response is unparseable or names
/// more than one option.
pub fn parse_choice(response: &str, choices: &ChoiceSet) -> Option<String> {
    let resp_lower = lower(response);
    let labelled: Vec<&String> = choices
        .labels()
        .iter()
        .filter(|l| {
            if l.chars().count() == 1 {
                short_label_mentioned(response, &resp_lower, l)
            } else {
                long_label_mentioned(&resp_lower, l)
            }
        })
        .collect();
    match labelled.as_slice() {
        [one] => return Some((*one).clone()),
        [] => {}
        _ => return None,
    }

    let spans: Vec<(usize, Vec<(usize, usize)>)> = choices
        .texts()
        .iter()
        .enumerate()
        .map(|(i, t)| (i, text_spans(&resp_lower, t)))
        .filter(|(_, s)| !s.is_empty())
        .collect();
    // An option whose every occurrence lies inside another option's match is not a separate mention.
    let standalone: Vec<usize> = spans
        .iter()
        .filter(|(i, own)| {
            own.iter().any(|&(a, b)| {
                !spans
                    .iter()
                    .any(|(j, other)| j != i && other.iter().any(|&(c, d)| c <= a && b <= d && (d - c) > (b - a)))
            })
        })
        .map(|(i, _)| *i)
        .collect();
    match standalone.as_slice() {
        [one] => Some(choices.labels()[*one].clone()),
        _ => None,
    }
}
