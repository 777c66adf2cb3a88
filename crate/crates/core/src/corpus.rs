//! Claim/report corpora: ingestion, sentence segmentation, splits, labels
//! and dataset statistics.
//!
//! The canonical on-disk format is one JSON object per line:
//!
//! ```text
//! {"id": "...", "text": "...", "label": "half-true", "split": "train",
//!  "reports": [{"id": "r1", "sentences": ["...", "..."]}, {"id": "r2", "text": "raw report"}]}
//! ```
//!
//! A report given as raw `text` is run through [`segment`]. Published
//! RAWFC and LIAR-RAW layouts are converted on the fly (see [`ingest`]).

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::error::{Error, Result};

const THREE_CLASS: [&str; 3] = ["false", "half-true", "true"];
const SIX_CLASS: [&str; 6] = [
    "pants-fire",
    "false",
    "barely-true",
    "half-true",
    "mostly-true",
    "true",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelScheme {
    ThreeClass,
    SixClass,
}

impl LabelScheme {
    /// Accepts `3`, `6`, `three-class`, `six-class`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "3" | "three-class" | "three" => Ok(LabelScheme::ThreeClass),
            "6" | "six-class" | "six" => Ok(LabelScheme::SixClass),
            other => Err(Error::InvalidArgument(format!(
                "unknown label scheme `{other}` (expected 3 or 6)"
            ))),
        }
    }

    /// Label names in the fixed scheme order used for tie-breaking.
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            LabelScheme::ThreeClass => &THREE_CLASS,
            LabelScheme::SixClass => &SIX_CLASS,
        }
    }

    pub fn class_count(self) -> usize {
        self.labels().len()
    }

    pub fn code(self) -> &'static str {
        match self {
            LabelScheme::ThreeClass => "3",
            LabelScheme::SixClass => "6",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelScheme::ThreeClass => "three-class",
            LabelScheme::SixClass => "six-class",
        }
    }

    /// Resolves a label name, normalizing case, separators and the
    /// RAWFC short form `half`.
    pub fn label(self, value: &str) -> Result<VeracityLabel> {
        let norm = value
            .trim()
            .to_ascii_lowercase()
            .replace(['_', ' '], "-");
        let norm = match (self, norm.as_str()) {
            (LabelScheme::ThreeClass, "half") => "half-true".to_string(),
            (_, "pants-on-fire") => "pants-fire".to_string(),
            _ => norm,
        };
        self.labels()
            .iter()
            .position(|l| *l == norm)
            .map(|index| VeracityLabel {
                scheme: self,
                index,
            })
            .ok_or_else(|| Error::UnknownLabel {
                scheme: self.name().to_string(),
                value: value.to_string(),
            })
    }

    pub fn label_at(self, index: usize) -> VeracityLabel {
        assert!(index < self.class_count(), "label index out of range");
        VeracityLabel {
            scheme: self,
            index,
        }
    }
}

impl fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A label value; always a member of its scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VeracityLabel {
    scheme: LabelScheme,
    index: usize,
}

impl VeracityLabel {
    pub fn scheme(&self) -> LabelScheme {
        self.scheme
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn value(&self) -> &'static str {
        self.scheme.labels()[self.index]
    }
}

impl fmt::Display for VeracityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.value())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::UnknownSplit(other.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Claim {
    pub id: String,
    pub text: String,
    pub label: VeracityLabel,
    pub split: Split,
    pub report_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub id: String,
    pub claim_id: String,
    pub sentences: Vec<EvidenceSentence>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceSentence {
    pub claim_id: String,
    pub report_id: String,
    pub position: usize,
    pub text: String,
}

impl EvidenceSentence {
    pub fn address(&self) -> SentenceAddr {
        SentenceAddr {
            claim_id: self.claim_id.clone(),
            report_id: self.report_id.clone(),
            position: self.position,
        }
    }
}

/// `(claim, report, position)`: the unique address of an evidence sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SentenceAddr {
    pub claim_id: String,
    pub report_id: String,
    pub position: usize,
}

const KEY_SEP: char = '\u{1f}';

impl SentenceAddr {
    /// Store key. Claim and report ids must not contain U+001F.
    pub fn key(&self) -> String {
        format!(
            "s{KEY_SEP}{}{KEY_SEP}{}{KEY_SEP}{}",
            self.claim_id, self.report_id, self.position
        )
    }

    pub fn from_key(key: &str) -> Option<Self> {
        let mut parts = key.split(KEY_SEP);
        if parts.next()? != "s" {
            return None;
        }
        let claim_id = parts.next()?.to_string();
        let report_id = parts.next()?.to_string();
        let position = parts.next()?.parse().ok()?;
        if parts.next().is_some() {
            return None;
        }
        Some(SentenceAddr {
            claim_id,
            report_id,
            position,
        })
    }
}

impl fmt::Display for SentenceAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}#{}", self.claim_id, self.report_id, self.position)
    }
}

/// Store key of a claim's own embedding.
pub fn claim_key(claim_id: &str) -> String {
    format!("c{KEY_SEP}{claim_id}")
}

/// An ingested corpus. Immutable once built.
#[derive(Debug, Clone)]
pub struct Dataset {
    scheme: LabelScheme,
    claims: Vec<Claim>,
    reports: Vec<Report>,
    spans: Vec<Range<usize>>,
    by_id: HashMap<String, usize>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.scheme == other.scheme
            && self.claims == other.claims
            && self.reports == other.reports
            && self.spans == other.spans
    }
}

impl Dataset {
    pub fn new(scheme: LabelScheme) -> Self {
        Dataset {
            scheme,
            claims: Vec::new(),
            reports: Vec::new(),
            spans: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    /// Appends a claim with its reports given as sentence lists. Sentences
    /// are cleaned of surrounding and interior line-break whitespace; blank
    /// sentences are skipped.
    pub fn push_claim(
        &mut self,
        id: &str,
        text: &str,
        label: VeracityLabel,
        split: Split,
        reports: Vec<(String, Vec<String>)>,
    ) -> Result<()> {
        if label.scheme() != self.scheme {
            return Err(Error::UnknownLabel {
                scheme: self.scheme.name().to_string(),
                value: label.value().to_string(),
            });
        }
        if self.by_id.contains_key(id) {
            return Err(Error::DuplicateClaim(id.to_string()));
        }
        let text = clean_sentence(text);
        if text.is_empty() {
            return Err(Error::InvalidArgument(format!("claim `{id}` has empty text")));
        }
        let start = self.reports.len();
        let mut report_ids = Vec::with_capacity(reports.len());
        for (report_id, sentences) in reports {
            if report_ids.contains(&report_id) {
                return Err(Error::InvalidArgument(format!(
                    "claim `{id}` lists report `{report_id}` twice"
                )));
            }
            let sentences = sentences
                .iter()
                .map(|s| clean_sentence(s))
                .filter(|s| !s.is_empty())
                .enumerate()
                .map(|(position, text)| EvidenceSentence {
                    claim_id: id.to_string(),
                    report_id: report_id.clone(),
                    position,
                    text,
                })
                .collect();
            report_ids.push(report_id.clone());
            self.reports.push(Report {
                id: report_id,
                claim_id: id.to_string(),
                sentences,
            });
        }
        self.spans.push(start..self.reports.len());
        self.by_id.insert(id.to_string(), self.claims.len());
        self.claims.push(Claim {
            id: id.to_string(),
            text,
            label,
            split,
            report_ids,
        });
        Ok(())
    }

    pub fn scheme(&self) -> LabelScheme {
        self.scheme
    }

    pub fn claims(&self) -> &[Claim] {
        &self.claims
    }

    pub fn len(&self) -> usize {
        self.claims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.claims.is_empty()
    }

    pub fn claim(&self, id: &str) -> Option<&Claim> {
        self.by_id.get(id).map(|&i| &self.claims[i])
    }

    pub fn claim_index(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn reports_of(&self, claim_idx: usize) -> &[Report] {
        &self.reports[self.spans[claim_idx].clone()]
    }

    pub fn sentences_of(&self, claim_idx: usize) -> impl Iterator<Item = &EvidenceSentence> {
        self.reports_of(claim_idx)
            .iter()
            .flat_map(|r| r.sentences.iter())
    }

    pub fn sentence_count(&self, claim_idx: usize) -> usize {
        self.reports_of(claim_idx)
            .iter()
            .map(|r| r.sentences.len())
            .sum()
    }

    /// All sentences in claim order, then report order, then position.
    pub fn all_sentences(&self) -> impl Iterator<Item = &EvidenceSentence> {
        self.reports.iter().flat_map(|r| r.sentences.iter())
    }

    pub fn sentence(&self, addr: &SentenceAddr) -> Option<&EvidenceSentence> {
        let idx = self.claim_index(&addr.claim_id)?;
        self.reports_of(idx)
            .iter()
            .find(|r| r.id == addr.report_id)?
            .sentences
            .get(addr.position)
    }

    /// Claims retained without any evidence sentence.
    pub fn evidence_free_claims(&self) -> Vec<&str> {
        (0..self.claims.len())
            .filter(|&i| self.sentence_count(i) == 0)
            .map(|i| self.claims[i].id.as_str())
            .collect()
    }

    pub fn splits_present(&self) -> Vec<Split> {
        let mut splits: Vec<Split> = self.claims.iter().map(|c| c.split).collect();
        splits.sort();
        splits.dedup();
        splits
    }

    /// Restricts to the claims of one split, keeping their reports.
    pub fn subset(&self, split: Split) -> Dataset {
        let mut out = Dataset::new(self.scheme);
        for (i, claim) in self.claims.iter().enumerate() {
            if claim.split != split {
                continue;
            }
            let start = out.reports.len();
            out.reports.extend_from_slice(self.reports_of(i));
            out.spans.push(start..out.reports.len());
            out.by_id.insert(claim.id.clone(), out.claims.len());
            out.claims.push(claim.clone());
        }
        out
    }
}

/// Collapses whitespace runs (including newlines) to single spaces and trims.
fn clean_sentence(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "vs", "etc", "e.g", "i.e", "u.s", "u.k",
    "u.n", "inc", "ltd", "co", "corp", "no", "gov", "sen", "rep", "gen", "lt", "col", "sgt",
    "capt", "rev", "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov",
    "dec", "fig", "approx", "dept", "est", "mt", "ft", "a.m", "p.m",
];

const CLOSERS: &[char] = &['"', '\'', ')', ']', '}', '\u{201d}', '\u{2019}', '\u{bb}'];
const OPENERS: &[char] = &['"', '\'', '(', '[', '{', '\u{201c}', '\u{2018}', '\u{ab}'];

fn ends_sentence(word: &str) -> bool {
    let core = word.trim_end_matches(CLOSERS);
    let Some(last) = core.chars().last() else {
        return false;
    };
    match last {
        '?' | '!' => true,
        '.' => {
            let stem = core.trim_start_matches(OPENERS).trim_end_matches('.');
            !ABBREVIATIONS.contains(&stem.to_lowercase().as_str())
        }
        _ => false,
    }
}

/// Splits raw report text into sentences.
///
/// A boundary is sentence-terminal punctuation (`.`, `?`, `!`, optionally
/// followed by closing quotes or brackets) followed by whitespace, unless
/// the word is a known abbreviation. A blank line is also a boundary.
/// Whitespace inside a sentence is collapsed to single spaces.
pub fn segment(report_text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut rest = report_text;
    loop {
        let trimmed = rest.trim_start();
        let gap = &rest[..rest.len() - trimmed.len()];
        if gap.matches('\n').count() >= 2 && !current.is_empty() {
            sentences.push(current.join(" "));
            current.clear();
        }
        if trimmed.is_empty() {
            break;
        }
        let end = trimmed
            .find(char::is_whitespace)
            .unwrap_or(trimmed.len());
        let word = &trimmed[..end];
        current.push(word);
        if ends_sentence(word) {
            sentences.push(current.join(" "));
            current.clear();
        }
        rest = &trimmed[end..];
    }
    if !current.is_empty() {
        sentences.push(current.join(" "));
    }
    sentences
}

fn field<'a>(obj: &'a Value, name: &str, line: usize) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| Error::Malformed {
        line,
        field: name.to_string(),
        message: "missing".to_string(),
    })
}

fn str_field<'a>(obj: &'a Value, name: &str, line: usize) -> Result<&'a str> {
    field(obj, name, line)?
        .as_str()
        .ok_or_else(|| Error::Malformed {
            line,
            field: name.to_string(),
            message: "expected a string".to_string(),
        })
}

fn id_field(obj: &Value, name: &str, line: usize) -> Result<String> {
    match field(obj, name, line)? {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(Error::Malformed {
            line,
            field: name.to_string(),
            message: "expected a string id".to_string(),
        }),
    }
}

fn parse_canonical_reports(obj: &Value, line: usize) -> Result<Vec<(String, Vec<String>)>> {
    let Some(reports) = obj.get("reports") else {
        return Ok(Vec::new());
    };
    let arr = reports.as_array().ok_or_else(|| Error::Malformed {
        line,
        field: "reports".to_string(),
        message: "expected an array".to_string(),
    })?;
    let mut out = Vec::with_capacity(arr.len());
    for report in arr {
        let id = id_field(report, "id", line).map_err(|e| rename_field(e, "reports[].id"))?;
        let sentences = if let Some(s) = report.get("sentences") {
            let list = s.as_array().ok_or_else(|| Error::Malformed {
                line,
                field: "reports[].sentences".to_string(),
                message: "expected an array of strings".to_string(),
            })?;
            list.iter()
                .map(|v| {
                    v.as_str().map(str::to_string).ok_or_else(|| Error::Malformed {
                        line,
                        field: "reports[].sentences".to_string(),
                        message: "expected an array of strings".to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else if let Some(t) = report.get("text") {
            let text = t.as_str().ok_or_else(|| Error::Malformed {
                line,
                field: "reports[].text".to_string(),
                message: "expected a string".to_string(),
            })?;
            segment(text)
        } else {
            return Err(Error::Malformed {
                line,
                field: "reports[].sentences".to_string(),
                message: "report needs `sentences` or `text`".to_string(),
            });
        };
        out.push((id, sentences));
    }
    Ok(out)
}

fn rename_field(e: Error, name: &str) -> Error {
    match e {
        Error::Malformed { line, message, .. } => Error::Malformed {
            line,
            field: name.to_string(),
            message,
        },
        e => e,
    }
}

fn ingest_canonical_file(path: &Path, dataset: &mut Dataset) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let obj: Value = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: line_no,
            field: "<record>".to_string(),
            message: e.to_string(),
        })?;
        let id = id_field(&obj, "id", line_no)?;
        let text = str_field(&obj, "text", line_no)?;
        if text.trim().is_empty() {
            return Err(Error::Malformed {
                line: line_no,
                field: "text".to_string(),
                message: "empty claim text".to_string(),
            });
        }
        let label = dataset
            .scheme
            .label(str_field(&obj, "label", line_no)?)?;
        let split = Split::parse(str_field(&obj, "split", line_no)?).map_err(|_| {
            Error::Malformed {
                line: line_no,
                field: "split".to_string(),
                message: "expected train, val or test".to_string(),
            }
        })?;
        let reports = parse_canonical_reports(&obj, line_no)?;
        dataset
            .push_claim(&id, text, label, split, reports)
            .map_err(|e| match e {
                Error::InvalidArgument(message) => Error::Malformed {
                    line: line_no,
                    field: "reports".to_string(),
                    message,
                },
                e => e,
            })?;
    }
    Ok(())
}

/// Sentences of a report in the published layouts: `tokenized` as a list of
/// strings or of `{"sent": ...}` objects, falling back to segmenting `content`.
fn published_report_sentences(report: &Value) -> Vec<String> {
    if let Some(tok) = report.get("tokenized").and_then(Value::as_array) {
        return tok
            .iter()
            .filter_map(|t| match t {
                Value::String(s) => Some(s.clone()),
                Value::Object(_) => t.get("sent").and_then(Value::as_str).map(str::to_string),
                _ => None,
            })
            .collect();
    }
    report
        .get("content")
        .and_then(Value::as_str)
        .map(segment)
        .unwrap_or_default()
}

fn ingest_published_record(
    obj: &Value,
    split: Split,
    origin: &str,
    dataset: &mut Dataset,
) -> Result<()> {
    let malformed = |field: &str, message: &str| Error::Malformed {
        line: 0,
        field: field.to_string(),
        message: format!("{message} ({origin})"),
    };
    let id = match obj.get("event_id").or_else(|| obj.get("id")) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err(malformed("event_id", "missing")),
    };
    let text = obj
        .get("claim")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("claim", "missing"))?;
    let label = obj
        .get("label")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("label", "missing"))?;
    let label = dataset.scheme.label(label)?;
    let mut reports = Vec::new();
    if let Some(arr) = obj.get("reports").and_then(Value::as_array) {
        for (i, report) in arr.iter().enumerate() {
            let mut rid = match report.get("report_id") {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Number(n)) => n.to_string(),
                _ => i.to_string(),
            };
            if reports.iter().any(|(r, _): &(String, Vec<String>)| *r == rid) {
                rid = format!("{rid}~{i}");
            }
            reports.push((rid, published_report_sentences(report)));
        }
    }
    dataset.push_claim(&id, text, label, split, reports)
}

fn read_json(path: &Path) -> Result<Value> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
        line: e.line(),
        field: "<document>".to_string(),
        message: format!("{e} ({})", path.display()),
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn has_ext(p: &Path, ext: &str) -> bool {
    p.extension().is_some_and(|e| e == ext)
}

/// RAWFC layout: `<dir>/{train,val,test}/*.json`, one claim per file.
fn ingest_rawfc_dir(dir: &Path, dataset: &mut Dataset) -> Result<()> {
    for split in Split::ALL {
        let sub = dir.join(split.as_str());
        if !sub.is_dir() {
            continue;
        }
        for path in sorted_entries(&sub)? {
            if has_ext(&path, "json") {
                let obj = read_json(&path)?;
                ingest_published_record(&obj, split, &path.display().to_string(), dataset)?;
            }
        }
    }
    Ok(())
}

/// LIAR-RAW layout: a JSON array per split file (`train.json`, ...).
fn ingest_liar_file(path: &Path, split: Split, dataset: &mut Dataset) -> Result<()> {
    let doc = read_json(path)?;
    let arr = doc.as_array().ok_or_else(|| Error::Malformed {
        line: 1,
        field: "<document>".to_string(),
        message: format!("expected a JSON array ({})", path.display()),
    })?;
    for obj in arr {
        ingest_published_record(obj, split, &path.display().to_string(), dataset)?;
    }
    Ok(())
}

fn split_from_stem(path: &Path) -> Option<Split> {
    let stem = path.file_stem()?.to_str()?;
    Split::parse(stem).ok()
}

/// Loads a dataset.
///
/// `path` may be a canonical `.jsonl` file, a directory of canonical
/// `.jsonl` files (read in name order), a RAWFC directory with
/// `train/ val/ test/` subdirectories of per-claim `.json` files, or a
/// LIAR-RAW directory / file (`train.json`, `val.json`, `test.json`).
pub fn ingest(path: &Path, scheme: LabelScheme) -> Result<Dataset> {
    let mut dataset = Dataset::new(scheme);
    if path.is_dir() {
        let entries = sorted_entries(path)?;
        let jsonl: Vec<_> = entries.iter().filter(|p| has_ext(p, "jsonl")).collect();
        if !jsonl.is_empty() {
            for p in jsonl {
                ingest_canonical_file(p, &mut dataset)?;
            }
        } else if Split::ALL.iter().any(|s| path.join(s.as_str()).is_dir()) {
            ingest_rawfc_dir(path, &mut dataset)?;
        } else {
            for p in entries.iter().filter(|p| has_ext(p, "json")) {
                if let Some(split) = split_from_stem(p) {
                    ingest_liar_file(p, split, &mut dataset)?;
                }
            }
        }
    } else if has_ext(path, "json") {
        let split = split_from_stem(path).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "cannot infer split from file name {}",
                path.display()
            ))
        })?;
        ingest_liar_file(path, split, &mut dataset)?;
    } else {
        ingest_canonical_file(path, &mut dataset)?;
    }
    Ok(dataset)
}

/// Canonical JSON record for one claim (sentence-list report form).
pub fn claim_record(dataset: &Dataset, claim_idx: usize) -> Value {
    let claim = &dataset.claims[claim_idx];
    let reports: Vec<Value> = dataset
        .reports_of(claim_idx)
        .iter()
        .map(|r| {
            json!({
                "id": r.id,
                "sentences": r.sentences.iter().map(|s| s.text.as_str()).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({
        "id": claim.id,
        "text": claim.text,
        "label": claim.label.value(),
        "split": claim.split.as_str(),
        "reports": reports,
    })
}

pub fn write_canonical(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for i in 0..dataset.len() {
        let line = serde_json::to_string(&claim_record(dataset, i)).expect("json");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub split: Split,
    pub n_claims: usize,
    pub n_reports: usize,
    pub n_sentences: usize,
    pub avg_sentences_per_claim: f64,
}

pub fn stats(dataset: &Dataset, split: Split) -> Result<DatasetStats> {
    if !dataset.claims.iter().any(|c| c.split == split) {
        return Err(Error::UnknownSplit(split.as_str().to_string()));
    }
    let mut s = DatasetStats {
        split,
        n_claims: 0,
        n_reports: 0,
        n_sentences: 0,
        avg_sentences_per_claim: 0.0,
    };
    for (i, claim) in dataset.claims.iter().enumerate() {
        if claim.split != split {
            continue;
        }
        s.n_claims += 1;
        s.n_reports += dataset.reports_of(i).len();
        s.n_sentences += dataset.sentence_count(i);
    }
    s.avg_sentences_per_claim = s.n_sentences as f64 / s.n_claims as f64;
    Ok(s)
}

/// Statistics table with one column per split present.
pub fn stats_table(dataset: &Dataset) -> Result<String> {
    let cols = dataset
        .splits_present()
        .into_iter()
        .map(|s| stats(dataset, s))
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<(String, Vec<String>)> = vec![
        ("Metric".to_string(), cols.iter().map(|c| title(c.split)).collect()),
        (
            "Number of Claims".to_string(),
            cols.iter().map(|c| thousands(c.n_claims)).collect(),
        ),
        (
            "Number of Reports".to_string(),
            cols.iter().map(|c| thousands(c.n_reports)).collect(),
        ),
        (
            "Total Sentences".to_string(),
            cols.iter().map(|c| thousands(c.n_sentences)).collect(),
        ),
        (
            "Avg Sentences/Claim".to_string(),
            cols.iter()
                .map(|c| format!("{:.2}", c.avg_sentences_per_claim))
                .collect(),
        ),
    ];
    let name_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let col_w = rows
        .iter()
        .flat_map(|r| r.1.iter().map(String::len))
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    for (i, (name, cells)) in rows.iter_mut().enumerate() {
        out.push_str(&format!("{name:<name_w$}"));
        for cell in cells.iter() {
            out.push_str(&format!(" | {cell:>col_w$}"));
        }
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(name_w + cells.len() * (col_w + 3)));
            out.push('\n');
        }
    }
    Ok(out)
}

fn title(split: Split) -> String {
    match split {
        Split::Train => "Train",
        Split::Val => "Val",
        Split::Test => "Test",
    }
    .to_string()
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Claim counts per label, in scheme order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    pub scheme: LabelScheme,
    pub counts: Vec<usize>,
}

impl LabelDistribution {
    pub fn get(&self, label: &str) -> Option<usize> {
        let label = self.scheme.label(label).ok()?;
        Some(self.counts[label.index()])
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, usize)> + '_ {
        self.scheme.labels().iter().copied().zip(self.counts.iter().copied())
    }
}

pub fn label_distribution(dataset: &Dataset) -> LabelDistribution {
    let mut counts = vec![0; dataset.scheme.class_count()];
    for claim in &dataset.claims {
        counts[claim.label.index()] += 1;
    }
    LabelDistribution {
        scheme: dataset.scheme,
        counts,
    }
}
