//! JSONL manifest loaders for the three benchmarks and Factify-V sampling.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::chat::{media_type_for_path, ImageRef};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DatasetError {
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow { path: String, line: usize, reason: String },
    #[error("{path}:{line}: duplicate id {id:?}")]
    DuplicateId { path: String, line: usize, id: String },
    #[error("{path}:{line}: missing image {image}")]
    MissingImage { path: String, line: usize, image: String },
    #[error("category {category} has {count} rows, need {needed}")]
    InsufficientCategory { category: String, count: usize, needed: usize },
    #[error("invalid merge map: {0}")]
    InvalidMergeMap(String),
}

impl DatasetError {
    pub fn line(&self) -> Option<usize> {
        match self {
            DatasetError::MalformedRow { line, .. }
            | DatasetError::DuplicateId { line, .. }
            | DatasetError::MissingImage { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinogroundGroup {
    pub id: String,
    pub caption_0: String,
    pub caption_1: String,
    pub image_0: ImageRef,
    pub image_1: ImageRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RavenPuzzle {
    pub id: String,
    pub context_images: Vec<ImageRef>,
    pub candidate_images: Vec<ImageRef>,
    pub answer_index: usize,
}

pub const RAVEN_CANDIDATES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactifyCategory {
    SupportMultimodal,
    SupportText,
    InsufficientMultimodal,
    InsufficientText,
    Refute,
}

impl FactifyCategory {
    pub const ALL: [FactifyCategory; 5] = [
        FactifyCategory::SupportMultimodal,
        FactifyCategory::SupportText,
        FactifyCategory::InsufficientMultimodal,
        FactifyCategory::InsufficientText,
        FactifyCategory::Refute,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FactifyCategory::SupportMultimodal => "support_multimodal",
            FactifyCategory::SupportText => "support_text",
            FactifyCategory::InsufficientMultimodal => "insufficient_multimodal",
            FactifyCategory::InsufficientText => "insufficient_text",
            FactifyCategory::Refute => "refute",
        }
    }
}

impl fmt::Display for FactifyCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FactifyCategory {
    type Err = String;

    /// Accepts any casing and `_`, `-` or space as separators (`Support_Multimodal`, `support multimodal`).
    fn from_str(s: &str) -> Result<Self, String> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| if c == '-' || c.is_whitespace() { '_' } else { c.to_ascii_lowercase() })
            .collect();
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == norm)
            .ok_or_else(|| format!("unknown Factify category {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactifyLabel {
    Support,
    Refute,
}

impl FactifyLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            FactifyLabel::Support => "support",
            FactifyLabel::Refute => "refute",
        }
    }
}

impl FromStr for FactifyLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "support" => Ok(FactifyLabel::Support),
            "refute" => Ok(FactifyLabel::Refute),
            _ => Err(format!("unknown label {s:?}")),
        }
    }
}

/// Maps each original category to a binary label, or `None` for excluded-from-scoring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MergeMap(BTreeMap<FactifyCategory, Option<FactifyLabel>>);

impl Default for MergeMap {
    fn default() -> Self {
        use FactifyCategory::*;
        Self(BTreeMap::from([
            (SupportMultimodal, Some(FactifyLabel::Support)),
            (SupportText, Some(FactifyLabel::Support)),
            (InsufficientMultimodal, None),
            (InsufficientText, None),
            (Refute, Some(FactifyLabel::Refute)),
        ]))
    }
}

impl MergeMap {
    pub fn label(&self, category: FactifyCategory) -> Option<FactifyLabel> {
        self.0.get(&category).copied().flatten()
    }

    /// Parses a JSON object `{category: "support" | "refute" | "excluded" | null}`.
    /// All five categories must be present.
    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let bad = |m: String| DatasetError::InvalidMergeMap(m);
        let obj: BTreeMap<String, Value> = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let mut map = BTreeMap::new();
        for (k, v) in obj {
            let cat: FactifyCategory = k.parse().map_err(bad)?;
            let label = match &v {
                Value::Null => None,
                Value::String(s) if s.eq_ignore_ascii_case("excluded") => None,
                Value::String(s) => Some(s.parse().map_err(bad)?),
                other => return Err(bad(format!("{k}: expected a label string, got {other}"))),
            };
            if map.insert(cat, label).is_some() {
                return Err(bad(format!("category {cat} listed twice")));
            }
        }
        for c in FactifyCategory::ALL {
            if !map.contains_key(&c) {
                return Err(bad(format!("category {c} is not mapped")));
            }
        }
        Ok(Self(map))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactifyPair {
    pub id: String,
    pub claim_image: ImageRef,
    pub document_image: ImageRef,
    /// `None` when the category is excluded from scoring.
    pub label: Option<FactifyLabel>,
    pub original_category: FactifyCategory,
}

/// Rows that loaded cleanly plus every error found, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport<T> {
    pub rows: Vec<T>,
    pub errors: Vec<DatasetError>,
}

impl<T> LoadReport<T> {
    pub fn into_result(self) -> Result<Vec<T>, DatasetError> {
        match self.errors.into_iter().next() {
            Some(e) => Err(e),
            None => Ok(self.rows),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), reason: e.to_string() }
}

struct RowCtx<'a> {
    path: &'a str,
    dir: &'a Path,
    line: usize,
    obj: &'a serde_json::Map<String, Value>,
}

impl RowCtx<'_> {
    fn malformed(&self, reason: impl Into<String>) -> DatasetError {
        DatasetError::MalformedRow { path: self.path.into(), line: self.line, reason: reason.into() }
    }

    fn field(&self, name: &str) -> Result<&Value, DatasetError> {
        self.obj.get(name).ok_or_else(|| self.malformed(format!("missing field {name:?}")))
    }

    fn string(&self, name: &str) -> Result<String, DatasetError> {
        match self.field(name)? {
            Value::String(s) => Ok(s.clone()),
            _ => Err(self.malformed(format!("field {name:?} must be a string"))),
        }
    }

    fn id(&self) -> Result<String, DatasetError> {
        match self.field("id")? {
            Value::String(s) if !s.trim().is_empty() => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            _ => Err(self.malformed("field \"id\" must be a non-empty string or integer")),
        }
    }

    fn image(&self, name: &str) -> Result<ImageRef, DatasetError> {
        self.image_value(name, self.field(name)?)
    }

    /// A string is a path relative to the manifest directory, hashed now.
    /// An object `{uri, sha256, media_type?}` is trusted until first use.
    fn image_value(&self, name: &str, v: &Value) -> Result<ImageRef, DatasetError> {
        match v {
            Value::String(rel) => {
                let path = self.dir.join(rel);
                if !path.is_file() {
                    return Err(DatasetError::MissingImage {
                        path: self.path.into(),
                        line: self.line,
                        image: path.display().to_string(),
                    });
                }
                ImageRef::from_path(&path).map_err(|e| self.malformed(format!("{name}: {e}")))
            }
            Value::Object(o) => {
                let get = |k: &str| o.get(k).and_then(Value::as_str);
                let uri = get("uri").ok_or_else(|| self.malformed(format!("{name}: missing \"uri\"")))?;
                let sha = get("sha256").ok_or_else(|| self.malformed(format!("{name}: missing \"sha256\"")))?;
                let resolved = if uri.contains("://") { PathBuf::from(uri) } else { self.dir.join(uri) };
                let media_type = match get("media_type") {
                    Some(m) => m.to_string(),
                    None => media_type_for_path(&resolved)
                        .ok_or_else(|| self.malformed(format!("{name}: cannot infer media type of {uri:?}")))?
                        .to_string(),
                };
                let r = ImageRef {
                    uri: resolved.display().to_string(),
                    media_type,
                    sha256: sha.to_ascii_lowercase(),
                };
                r.validate().map_err(|e| self.malformed(format!("{name}: {e}")))?;
                Ok(r)
            }
            _ => Err(self.malformed(format!("{name}: expected a path string or image object"))),
        }
    }

    fn images(&self, name: &str) -> Result<Vec<ImageRef>, DatasetError> {
        match self.field(name)? {
            Value::Array(items) => items.iter().map(|v| self.image_value(name, v)).collect(),
            _ => Err(self.malformed(format!("field {name:?} must be an array"))),
        }
    }
}

fn load_rows<T>(
    path: &Path,
    parse: impl Fn(&RowCtx) -> Result<(String, T), DatasetError>,
) -> Result<LoadReport<T>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let shown = path.display().to_string();
    let mut report = LoadReport { rows: Vec::new(), errors: Vec::new() };
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line = i + 1;
        let value: Value = match serde_json::from_str(raw) {
            Ok(v) => v,
            Err(e) => {
                report.errors.push(DatasetError::MalformedRow { path: shown.clone(), line, reason: e.to_string() });
                continue;
            }
        };
        let Some(obj) = value.as_object() else {
            report.errors.push(DatasetError::MalformedRow {
                path: shown.clone(),
                line,
                reason: "row is not a JSON object".into(),
            });
            continue;
        };
        let ctx = RowCtx { path: &shown, dir, line, obj };
        match parse(&ctx) {
            Ok((id, row)) => {
                if seen.insert(id.clone()) {
                    report.rows.push(row);
                } else {
                    report.errors.push(DatasetError::DuplicateId { path: shown.clone(), line, id });
                }
            }
            Err(e) => report.errors.push(e),
        }
    }
    if report.rows.is_empty() && report.errors.is_empty() {
        tracing::warn!(manifest = %shown, "manifest has no rows");
    }
    Ok(report)
}

pub fn validate_winoground(path: &Path) -> Result<LoadReport<WinogroundGroup>, DatasetError> {
    load_rows(path, |r| {
        let g = WinogroundGroup {
            id: r.id()?,
            caption_0: r.string("caption_0")?,
            caption_1: r.string("caption_1")?,
            image_0: r.image("image_0")?,
            image_1: r.image("image_1")?,
        };
        if g.caption_0 == g.caption_1 {
            return Err(r.malformed("caption_0 and caption_1 are identical"));
        }
        Ok((g.id.clone(), g))
    })
}

pub fn validate_raven(path: &Path) -> Result<LoadReport<RavenPuzzle>, DatasetError> {
    load_rows(path, |r| {
        let answer_index = r
            .field("answer_index")?
            .as_u64()
            .ok_or_else(|| r.malformed("answer_index must be a non-negative integer"))?;
        let p = RavenPuzzle {
            id: r.id()?,
            context_images: r.images("context_images")?,
            candidate_images: r.images("candidate_images")?,
            answer_index: answer_index as usize,
        };
        if !matches!(p.context_images.len(), 3 | 8) {
            return Err(r.malformed(format!("expected 3 or 8 context images, got {}", p.context_images.len())));
        }
        if p.candidate_images.len() != RAVEN_CANDIDATES {
            return Err(r.malformed(format!("expected 6 candidate images, got {}", p.candidate_images.len())));
        }
        if p.answer_index >= RAVEN_CANDIDATES {
            return Err(r.malformed(format!("answer_index {} out of range 0-5", p.answer_index)));
        }
        Ok((p.id.clone(), p))
    })
}

pub fn validate_factify(path: &Path, merge: &MergeMap) -> Result<LoadReport<FactifyPair>, DatasetError> {
    load_rows(path, |r| {
        let category: FactifyCategory = r.string("original_category")?.parse().map_err(|e: String| r.malformed(e))?;
        let label = merge.label(category);
        if let Some(v) = r.obj.get("label").filter(|v| !v.is_null()) {
            let stated: FactifyLabel = v
                .as_str()
                .ok_or_else(|| r.malformed("label must be a string"))?
                .parse()
                .map_err(|e: String| r.malformed(e))?;
            if label != Some(stated) {
                return Err(r.malformed(format!(
                    "label {} is inconsistent with category {category} under the merge map",
                    stated.as_str()
                )));
            }
        }
        let p = FactifyPair {
            id: r.id()?,
            claim_image: r.image("claim_image")?,
            document_image: r.image("document_image")?,
            label,
            original_category: category,
        };
        Ok((p.id.clone(), p))
    })
}

pub fn load_winoground(path: &Path) -> Result<Vec<WinogroundGroup>, DatasetError> {
    validate_winoground(path)?.into_result()
}

pub fn load_raven(path: &Path) -> Result<Vec<RavenPuzzle>, DatasetError> {
    validate_raven(path)?.into_result()
}

pub fn load_factify(path: &Path, merge: &MergeMap) -> Result<Vec<FactifyPair>, DatasetError> {
    validate_factify(path, merge)?.into_result()
}

pub const FACTIFY_V_PER_CATEGORY: usize = 100;

/// Draws 100 pairs per category without replacement, then shuffles the 500.
pub fn sample_factify_v(pairs: &[FactifyPair], seed: u64) -> Result<Vec<FactifyPair>, DatasetError> {
    let mut by_cat: BTreeMap<FactifyCategory, Vec<&FactifyPair>> = BTreeMap::new();
    for p in pairs {
        by_cat.entry(p.original_category).or_default().push(p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(FACTIFY_V_PER_CATEGORY * FactifyCategory::ALL.len());
    for cat in FactifyCategory::ALL {
        let pool = by_cat.get(&cat).map(Vec::as_slice).unwrap_or(&[]);
        if pool.len() < FACTIFY_V_PER_CATEGORY {
            return Err(DatasetError::InsufficientCategory {
                category: cat.to_string(),
                count: pool.len(),
                needed: FACTIFY_V_PER_CATEGORY,
            });
        }
        let picked = rand::seq::index::sample(&mut rng, pool.len(), FACTIFY_V_PER_CATEGORY);
        out.extend(picked.into_iter().map(|i| pool[i].clone()));
    }
    out.shuffle(&mut rng);
    Ok(out)
}
