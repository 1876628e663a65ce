//! Aggregation of run records into accuracy and Winoground scores, and report rendering.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{Dataset, RunRecord, Subtrial};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no scorable records")]
    EmptyRecordSet,
    #[error("incomplete Winoground groups (need T0, T1, I0, I1 each): {}", .0.join(", "))]
    IncompleteGroup(Vec<String>),
    #[error("records mix datasets, strategies or backends")]
    MixedRecords,
    #[error("report parse: {0}")]
    Parse(String),
}

/// A percentage rounded to two decimals at construction, so every rendering agrees.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Percent(f64);

impl Percent {
    pub fn new(value: f64) -> Self {
        Self((value * 100.0).round() / 100.0)
    }

    pub fn of(count: usize, total: usize) -> Self {
        Self::new(100.0 * count as f64 / total as f64)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: Percent,
    pub hi: Percent,
}

/// Wilson score interval at 95% confidence, in percent.
pub fn wilson95(successes: usize, n: usize) -> Interval {
    if n == 0 {
        return Interval { lo: Percent::new(0.0), hi: Percent::new(100.0) };
    }
    const Z: f64 = 1.959_963_984_540_054;
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = Z * Z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = Z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    Interval { lo: Percent::new(100.0 * (center - half).max(0.0)), hi: Percent::new(100.0 * (center + half).min(1.0)) }
}

/// Group counts behind the three Winoground scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WinogroundTally {
    pub groups: usize,
    pub text: usize,
    pub image: usize,
    pub group: usize,
}

impl WinogroundTally {
    /// Adds one group given correctness of `[T0, T1, I0, I1]`.
    pub fn add(&mut self, pattern: [bool; 4]) {
        let text = pattern[0] && pattern[1];
        let image = pattern[2] && pattern[3];
        self.groups += 1;
        self.text += usize::from(text);
        self.image += usize::from(image);
        self.group += usize::from(text && image);
    }

    pub fn scores(&self) -> Result<WinogroundScores, MetricsError> {
        if self.groups == 0 {
            return Err(MetricsError::EmptyRecordSet);
        }
        Ok(WinogroundScores {
            text: Percent::of(self.text, self.groups),
            image: Percent::of(self.image, self.groups),
            group: Percent::of(self.group, self.groups),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinogroundScores {
    pub text: Percent,
    pub image: Percent,
    pub group: Percent,
}

/// Per-group correctness patterns; a sub-trial counts only when `correct == Some(true)`.
pub fn winoground_patterns(records: &[&RunRecord]) -> Result<Vec<(String, [bool; 4])>, MetricsError> {
    let mut groups: BTreeMap<&str, [Option<bool>; 4]> = BTreeMap::new();
    let mut bad = Vec::new();
    let mut order = Vec::new();
    for r in records {
        let slot = match r.subtrial {
            Some(Subtrial::T0) => 0,
            Some(Subtrial::T1) => 1,
            Some(Subtrial::I0) => 2,
            Some(Subtrial::I1) => 3,
            None => {
                bad.push(r.instance_id.clone());
                continue;
            }
        };
        let entry = groups.entry(&r.instance_id).or_insert_with(|| {
            order.push(r.instance_id.as_str());
            [None; 4]
        });
        if entry[slot].replace(r.correct == Some(true)).is_some() {
            bad.push(r.instance_id.clone());
        }
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let g = groups[id];
        if g.iter().any(Option::is_none) {
            bad.push(id.to_string());
        } else {
            out.push((id.to_string(), g.map(|c| c.unwrap_or(false))));
        }
    }
    if !bad.is_empty() {
        bad.sort();
        bad.dedup();
        return Err(MetricsError::IncompleteGroup(bad));
    }
    Ok(out)
}

pub fn winoground_tally(records: &[&RunRecord]) -> Result<WinogroundTally, MetricsError> {
    let mut t = WinogroundTally::default();
    for (_, p) in winoground_patterns(records)? {
        t.add(p);
    }
    debug_assert!(t.group <= t.text.min(t.image));
    Ok(t)
}

pub fn winoground_scores(records: &[&RunRecord]) -> Result<WinogroundScores, MetricsError> {
    winoground_tally(records)?.scores()
}

/// (correct, scored) where unparsed counts as incorrect and gold-less records are skipped.
pub fn accuracy_counts(records: &[&RunRecord]) -> (usize, usize) {
    let scored = records.iter().filter(|r| r.gold.is_some());
    let (mut correct, mut total) = (0, 0);
    for r in scored {
        total += 1;
        correct += usize::from(r.correct == Some(true));
    }
    (correct, total)
}

pub fn accuracy(records: &[&RunRecord]) -> Result<Percent, MetricsError> {
    match accuracy_counts(records) {
        (_, 0) => Err(MetricsError::EmptyRecordSet),
        (c, n) => Ok(Percent::of(c, n)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub dataset: Dataset,
    pub strategy: String,
    pub backend: String,
    pub n_instances: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<Percent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub winoground: Option<WinogroundScores>,
    pub n_unparsed: usize,
    #[serde(default)]
    pub n_failed: usize,
    pub ci95: BTreeMap<String, Interval>,
}

impl MetricsSummary {
    /// The figure used to rank strategies: accuracy, or the group score.
    pub fn headline(&self) -> Option<Percent> {
        self.accuracy.or(self.winoground.map(|w| w.group))
    }
}

/// Summarizes records sharing one (dataset, strategy, backend).
pub fn summarize_one(records: &[&RunRecord]) -> Result<MetricsSummary, MetricsError> {
    let first = records.first().ok_or(MetricsError::EmptyRecordSet)?;
    if records.iter().any(|r| r.dataset != first.dataset || r.strategy != first.strategy || r.backend != first.backend) {
        return Err(MetricsError::MixedRecords);
    }
    let mut ids: Vec<&str> = records.iter().map(|r| r.instance_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let n_unparsed = records.iter().filter(|r| r.parsed_answer.is_none()).count();
    let n_failed = records.iter().filter(|r| r.error.is_some()).count();
    let mut ci95 = BTreeMap::new();
    let (accuracy, winoground) = if first.dataset == Dataset::Winoground {
        let t = winoground_tally(records)?;
        ci95.insert("text".to_string(), wilson95(t.text, t.groups));
        ci95.insert("image".to_string(), wilson95(t.image, t.groups));
        ci95.insert("group".to_string(), wilson95(t.group, t.groups));
        (None, Some(t.scores()?))
    } else {
        let (c, n) = accuracy_counts(records);
        if n == 0 {
            return Err(MetricsError::EmptyRecordSet);
        }
        ci95.insert("accuracy".to_string(), wilson95(c, n));
        (Some(Percent::of(c, n)), None)
    };
    Ok(MetricsSummary {
        dataset: first.dataset,
        strategy: first.strategy.clone(),
        backend: first.backend.clone(),
        n_instances: ids.len(),
        accuracy,
        winoground,
        n_unparsed,
        n_failed,
        ci95,
    })
}

/// One summary per (dataset, backend, strategy), in first-seen order.
/// Buckets with nothing scorable (every record excluded) are left out.
pub fn summarize(records: &[RunRecord]) -> Result<Vec<MetricsSummary>, MetricsError> {
    let mut keys: Vec<(Dataset, &str, &str)> = Vec::new();
    let mut buckets: BTreeMap<(Dataset, &str, &str), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let k = (r.dataset, r.backend.as_str(), r.strategy.as_str());
        buckets
            .entry(k)
            .or_insert_with(|| {
                keys.push(k);
                Vec::new()
            })
            .push(r);
    }
    let mut out = Vec::with_capacity(keys.len());
    for k in &keys {
        match summarize_one(&buckets[k]) {
            Ok(s) => out.push(s),
            Err(MetricsError::EmptyRecordSet) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Json,
    Csv,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Markdown => "md",
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(format!("unknown report format {s:?} (expected markdown, json, csv)")),
        }
    }
}

/// For each summary, whether it has the best headline among its (dataset, backend) peers.
fn best_flags(summaries: &[MetricsSummary]) -> Vec<bool> {
    let mut best: BTreeMap<(Dataset, &str), Percent> = BTreeMap::new();
    for s in summaries {
        if let Some(h) = s.headline() {
            let e = best.entry((s.dataset, s.backend.as_str())).or_insert(h);
            if h > *e {
                *e = h;
            }
        }
    }
    summaries
        .iter()
        .map(|s| s.headline().is_some() && s.headline() == best.get(&(s.dataset, s.backend.as_str())).copied())
        .collect()
}

pub const NO_RUNS: &str = "No runs to report.";

fn ci_text(s: &MetricsSummary, key: &str) -> String {
    s.ci95.get(key).map(|i| format!("[{}, {}]", i.lo, i.hi)).unwrap_or_default()
}

fn render_markdown(summaries: &[MetricsSummary]) -> String {
    if summaries.is_empty() {
        return format!("# Results\n\n{NO_RUNS}\n");
    }
    let best = best_flags(summaries);
    let mut out = String::from("# Results\n");
    let mut datasets: Vec<Dataset> = summaries.iter().map(|s| s.dataset).collect();
    datasets.sort();
    datasets.dedup();
    for d in datasets {
        out.push_str(&format!("\n## {d}\n\n"));
        let wino = d == Dataset::Winoground;
        if wino {
            out.push_str("| Backend | Strategy | N | Text | Image | Group | Group 95% CI | Unparsed |\n");
            out.push_str("|---|---|---:|---:|---:|---:|---|---:|\n");
        } else {
            out.push_str("| Backend | Strategy | N | Accuracy | 95% CI | Unparsed |\n");
            out.push_str("|---|---|---:|---:|---|---:|\n");
        }
        for (s, &is_best) in summaries.iter().zip(&best).filter(|(s, _)| s.dataset == d) {
            let bold = |p: Percent| if is_best { format!("**{p}**") } else { p.to_string() };
            match (&s.winoground, s.accuracy) {
                (Some(w), _) => out.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
                    s.backend,
                    s.strategy,
                    s.n_instances,
                    w.text,
                    w.image,
                    bold(w.group),
                    ci_text(s, "group"),
                    s.n_unparsed
                )),
                (None, Some(a)) => out.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} |\n",
                    s.backend,
                    s.strategy,
                    s.n_instances,
                    bold(a),
                    ci_text(s, "accuracy"),
                    s.n_unparsed
                )),
                (None, None) => {}
            }
        }
    }
    out
}

const CSV_HEADER: [&str; 14] = [
    "dataset", "backend", "strategy", "n_instances", "accuracy", "text", "image", "group", "ci_metric", "ci_lo", "ci_hi",
    "n_unparsed", "n_failed", "best",
];

fn render_csv(summaries: &[MetricsSummary]) -> String {
    let best = best_flags(summaries);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    let opt = |p: Option<Percent>| p.map(|p| p.to_string()).unwrap_or_default();
    for (s, b) in summaries.iter().zip(best) {
        let metric = if s.winoground.is_some() { "group" } else { "accuracy" };
        let ci = s.ci95.get(metric);
        w.write_record([
            s.dataset.to_string(),
            s.backend.clone(),
            s.strategy.clone(),
            s.n_instances.to_string(),
            opt(s.accuracy),
            opt(s.winoground.map(|x| x.text)),
            opt(s.winoground.map(|x| x.image)),
            opt(s.winoground.map(|x| x.group)),
            metric.to_string(),
            opt(ci.map(|i| i.lo)),
            opt(ci.map(|i| i.hi)),
            s.n_unparsed.to_string(),
            s.n_failed.to_string(),
            b.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn render_report(summaries: &[MetricsSummary], format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => render_markdown(summaries),
        ReportFormat::Json => serde_json::to_string_pretty(summaries).expect("summaries serialize") + "\n",
        ReportFormat::Csv => render_csv(summaries),
    }
}

/// Inverse of the JSON report.
pub fn parse_json_report(text: &str) -> Result<Vec<MetricsSummary>, MetricsError> {
    serde_json::from_str(text).map_err(|e| MetricsError::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{Protocol, Timing};

    pub(crate) fn rec(id: &str, sub: Option<Subtrial>, correct: Option<bool>, strategy: &str) -> RunRecord {
        RunRecord {
            dataset: if sub.is_some() { Dataset::Winoground } else { Dataset::Raven50 },
            instance_id: id.into(),
            subtrial: sub,
            strategy: strategy.into(),
            backend: "m".into(),
            protocol: Protocol::Choice,
            transcript: vec![],
            parsed_answer: correct.map(|c| if c { "1".into() } else { "2".into() }),
            gold: Some("1".into()),
            correct,
            presentation: None,
            tie: false,
            flags: vec![],
            error: None,
            usage: Default::default(),
            template_version: "v".into(),
            seed: 0,
            timing: Timing::default(),
        }
    }

    fn group(id: &str, p: [bool; 4]) -> Vec<RunRecord> {
        Subtrial::ALL.iter().zip(p).map(|(&s, c)| rec(id, Some(s), Some(c), "standard")).collect()
    }

    fn refs(r: &[RunRecord]) -> Vec<&RunRecord> {
        r.iter().collect()
    }

    #[test]
    fn winoground_definitions() {
        let mut rs = group("a", [true; 4]);
        rs.extend(group("b", [true, true, false, true]));
        let s = winoground_scores(&refs(&rs)).unwrap();
        assert_eq!((s.text.value(), s.image.value(), s.group.value()), (100.0, 50.0, 50.0));
    }

    #[test]
    fn all_correct_groups() {
        let rs: Vec<RunRecord> = (0..400).flat_map(|i| group(&i.to_string(), [true; 4])).collect();
        let s = winoground_scores(&refs(&rs)).unwrap();
        assert_eq!((s.text.value(), s.image.value(), s.group.value()), (100.0, 100.0, 100.0));
    }

    #[test]
    fn incomplete_groups_are_named() {
        let mut rs = group("a", [true; 4]);
        rs.extend(group("b", [true; 4]).into_iter().take(3));
        rs.push(rec("a", Some(Subtrial::T0), Some(true), "standard"));
        assert_eq!(winoground_scores(&refs(&rs)), Err(MetricsError::IncompleteGroup(vec!["a".into(), "b".into()])));
    }

    #[test]
    fn unparsed_subtrial_fails_the_group() {
        let mut rs = group("a", [true; 4]);
        rs[2].correct = None;
        rs[2].parsed_answer = None;
        let s = winoground_scores(&refs(&rs)).unwrap();
        assert_eq!((s.text.value(), s.image.value(), s.group.value()), (100.0, 0.0, 0.0));
    }

    #[test]
    fn accuracy_rules() {
        let mut rs: Vec<RunRecord> = (0..50).map(|i| rec(&i.to_string(), None, Some(i < 13), "cocot")).collect();
        assert_eq!(accuracy(&refs(&rs)).unwrap().value(), 26.0);
        rs[0].correct = None;
        rs[0].parsed_answer = None;
        assert_eq!(accuracy(&refs(&rs)).unwrap().value(), 24.0);
        rs[1].gold = None;
        rs[1].correct = None;
        assert_eq!(accuracy(&refs(&rs)).unwrap(), Percent::of(11, 49));
        assert_eq!(accuracy(&[]), Err(MetricsError::EmptyRecordSet));
        let zero: Vec<RunRecord> = (0..7).map(|i| rec(&i.to_string(), None, Some(false), "s")).collect();
        assert_eq!(accuracy(&refs(&zero)).unwrap().value(), 0.0);
    }

    #[test]
    fn wilson_reference_values() {
        // Reference values from an independent evaluation of the closed form.
        let i = wilson95(50, 100);
        assert_eq!((i.lo.value(), i.hi.value()), (40.38, 59.62));
        let i = wilson95(0, 10);
        assert_eq!(i.lo.value(), 0.0);
        assert_eq!(i.hi.value(), 27.75);
    }

    fn two_strategies() -> Vec<MetricsSummary> {
        let mut rs: Vec<RunRecord> = (0..50).map(|i| rec(&i.to_string(), None, Some(i < 13), "cocot")).collect();
        rs.extend((0..50).map(|i| rec(&i.to_string(), None, Some(i < 9), "standard")));
        summarize(&rs).unwrap()
    }

    #[test]
    fn markdown_flags_best() {
        let md = render_report(&two_strategies(), ReportFormat::Markdown);
        let rows: Vec<&str> = md.lines().filter(|l| l.starts_with("| m |")).collect();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].contains("**26.00**"));
        assert!(rows[1].contains("| 18.00 |"));
    }

    #[test]
    fn empty_report() {
        assert!(render_report(&[], ReportFormat::Markdown).contains(NO_RUNS));
        assert_eq!(parse_json_report(&render_report(&[], ReportFormat::Json)).unwrap(), vec![]);
    }

    #[test]
    fn json_and_csv() {
        let s = two_strategies();
        assert_eq!(parse_json_report(&render_report(&s, ReportFormat::Json)).unwrap(), s);
        let csv = render_report(&s, ReportFormat::Csv);
        let mut r = csv::Reader::from_reader(csv.as_bytes());
        let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[0][4], "26.00");
        assert_eq!(&rows[0][13], "true");
    }
}
