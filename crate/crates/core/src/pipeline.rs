//! Pipeline configuration and the staged runner that binds ingest, embed,
//! index, retrieve, train, predict and eval together over an output
//! directory of on-disk artifacts.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{self, claim_key, Dataset, LabelScheme, Split, VeracityLabel};
use crate::embed::{embed_corpus, EmbedOptions, EmbeddingProvider, EmbeddingStore, HashEmbedder, RemoteEmbedder};
use crate::error::{Error, Result};
use crate::eval::{profile_run, score, EvaluationReport, RuntimeReport, Stage};
use crate::index::{ClusterParams, IndexKind, VectorIndex};
use crate::retrieve::{read_evidence, sentence_index, write_evidence, EvidenceSet, Retriever, Scope};
use crate::verify::{
    build_input, pool_features, ClassifierInput, RemoteClassifier, SoftmaxHead, TrainConfig, TrainReport,
    VeracityPrediction, DEFAULT_MAX_LEN,
};

/// Prefix of environment variables that override config keys:
/// `DEREC_K=5`, `DEREC_EMBEDDER_DIM=128`, `DEREC_CLASSIFIER_EPOCHS=50`.
pub const ENV_PREFIX: &str = "DEREC_";

const SECTIONS: [&str; 3] = ["embedder", "index", "classifier"];

/// `DEREC_` variables that are not config keys.
const NON_CONFIG_VARS: [&str; 2] = ["DEREC_CONFIG", "DEREC_LOG"];

mod scheme_serde {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(i64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(s: &LabelScheme, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(s.code())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<LabelScheme, D::Error> {
        let raw = match Raw::deserialize(de)? {
            Raw::Int(i) => i.to_string(),
            Raw::Str(s) => s,
        };
        LabelScheme::parse(&raw).map_err(serde::de::Error::custom)
    }
}

mod split_serde {
    use super::*;

    pub fn serialize<S: Serializer>(s: &Split, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(s.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<Split, D::Error> {
        Split::parse(&String::deserialize(de)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    /// `hash` for the built-in embedder, or an `http(s)://` endpoint.
    pub provider: String,
    pub dim: usize,
    /// Hash-embedder seed; defaults to the pipeline seed.
    pub seed: Option<u64>,
    /// Model name sent to a remote provider.
    pub model: String,
    pub max_batch: usize,
    pub timeout_secs: f64,
    pub retries: usize,
    pub claim_prefix: String,
    pub evidence_prefix: String,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            provider: "hash".to_string(),
            dim: 256,
            seed: None,
            model: String::new(),
            max_batch: 64,
            timeout_secs: 30.0,
            retries: 3,
            claim_prefix: String::new(),
            evidence_prefix: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum IndexKindName {
    #[default]
    Flat,
    Clustered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexConfig {
    pub kind: IndexKindName,
    pub n_clusters: usize,
    pub n_probe: usize,
    pub iterations: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        let p = ClusterParams::default();
        IndexConfig {
            kind: IndexKindName::Flat,
            n_clusters: p.n_clusters,
            n_probe: p.n_probe,
            iterations: p.iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// `head` for the built-in softmax head, or an `http(s)://` endpoint.
    pub provider: String,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2: f64,
    /// Training seed; defaults to the pipeline seed.
    pub seed: Option<u64>,
    pub timeout_secs: f64,
    pub retries: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        ClassifierConfig {
            provider: "head".to_string(),
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            l2: t.l2,
            seed: None,
            timeout_secs: 60.0,
            retries: 3,
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("derec-out")
}

fn default_k() -> usize {
    crate::retrieve::DEFAULT_K
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

fn default_eval_split() -> Split {
    Split::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    #[serde(with = "scheme_serde")]
    pub scheme: LabelScheme,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub scope: Scope,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Split the classifier is evaluated on.
    #[serde(default = "default_eval_split", with = "split_serde")]
    pub eval_split: Split,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub index: IndexConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
}

fn is_url(s: &str) -> bool {
    s.starts_with("http://") || s.starts_with("https://")
}

/// Parses an override value as a TOML literal, falling back to a string.
fn env_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_env(table: &mut toml::Table, env: impl IntoIterator<Item = (String, String)>) {
    let mut vars: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && !NON_CONFIG_VARS.contains(&k.as_str()))
        .collect();
    vars.sort();
    for (name, raw) in vars {
        let key = name[ENV_PREFIX.len()..].to_ascii_lowercase();
        let value = env_value(&raw);
        let section = SECTIONS
            .iter()
            .find(|s| key.strip_prefix(*s).is_some_and(|rest| rest.starts_with('_')));
        match section {
            Some(section) => {
                let field = key[section.len() + 1..].to_string();
                let entry = table
                    .entry(section.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                if let toml::Value::Table(t) = entry {
                    t.insert(field, value);
                }
            }
            None => {
                table.insert(key, value);
            }
        }
        log::debug!("config override from {name}");
    }
}

impl PipelineConfig {
    /// Defaults for everything but the dataset and scheme.
    pub fn new(dataset: impl Into<PathBuf>, scheme: LabelScheme) -> Self {
        PipelineConfig {
            dataset: dataset.into(),
            scheme,
            seed: 0,
            out: default_out(),
            k: default_k(),
            scope: Scope::PerClaim,
            max_len: default_max_len(),
            eval_split: default_eval_split(),
            embedder: EmbedderConfig::default(),
            index: IndexConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }

    /// Parses TOML text with `DEREC_` overrides applied. Relative paths are
    /// resolved against `base_dir`. No validation beyond types and keys.
    pub fn from_toml_str(
        text: &str,
        base_dir: &Path,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        apply_env(&mut table, env);
        let mut cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if cfg.dataset.is_relative() {
            cfg.dataset = base_dir.join(&cfg.dataset);
        }
        if cfg.out.is_relative() {
            cfg.out = base_dir.join(&cfg.out);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = std::path::absolute(base).map_err(|e| Error::io(base, e))?;
        Self::from_toml_str(&text, &base, env)
    }

    /// Checks ranges and internal consistency and fills derived defaults.
    pub fn validated(mut self) -> Result<Self> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.max_len < 3 {
            return bad(format!("max_len {} cannot hold [CLS] claim [SEP]", self.max_len));
        }
        let e = &self.embedder;
        if e.provider != "hash" && !is_url(&e.provider) {
            return bad(format!(
                "embedder.provider `{}` must be `hash` or an http(s) URL",
                e.provider
            ));
        }
        if e.dim == 0 || e.max_batch == 0 {
            return bad("embedder.dim and embedder.max_batch must be positive".into());
        }
        if !(e.timeout_secs > 0.0 && e.timeout_secs.is_finite()) {
            return bad("embedder.timeout_secs must be positive".into());
        }
        let i = &self.index;
        if i.n_clusters == 0 || i.iterations == 0 {
            return bad("index.n_clusters and index.iterations must be positive".into());
        }
        if i.n_probe == 0 || i.n_probe > i.n_clusters {
            return bad(format!(
                "index.n_probe {} must lie in 1..={} (index.n_clusters)",
                i.n_probe, i.n_clusters
            ));
        }
        let c = &self.classifier;
        if c.provider != "head" && !is_url(&c.provider) {
            return bad(format!(
                "classifier.provider `{}` must be `head` or an http(s) URL",
                c.provider
            ));
        }
        if c.epochs == 0 || c.batch_size == 0 {
            return bad("classifier.epochs and classifier.batch_size must be positive".into());
        }
        if !(c.learning_rate > 0.0 && c.learning_rate.is_finite()) {
            return bad("classifier.learning_rate must be positive".into());
        }
        if !(c.l2 >= 0.0 && c.l2.is_finite()) {
            return bad("classifier.l2 must be non-negative".into());
        }
        if !(c.timeout_secs > 0.0 && c.timeout_secs.is_finite()) {
            return bad("classifier.timeout_secs must be positive".into());
        }
        self.embedder.seed.get_or_insert(self.seed);
        self.classifier.seed.get_or_insert(self.seed);
        Ok(self)
    }

    /// Ingests the dataset to reject a scheme that contradicts its labels.
    pub fn check_dataset(&self) -> Result<Dataset> {
        if !self.dataset.exists() {
            return Err(Error::Config(format!(
                "dataset {} does not exist",
                self.dataset.display()
            )));
        }
        match corpus::ingest(&self.dataset, self.scheme) {
            Err(Error::UnknownLabel { value, .. }) => {
                let other = match self.scheme {
                    LabelScheme::ThreeClass => LabelScheme::SixClass,
                    LabelScheme::SixClass => LabelScheme::ThreeClass,
                };
                let hint = if corpus::ingest(&self.dataset, other).is_ok() {
                    format!("; the dataset uses the {} scheme", other.name())
                } else {
                    String::new()
                };
                Err(Error::Config(format!(
                    "scheme {} contradicts dataset label `{value}`{hint}",
                    self.scheme.code()
                )))
            }
            other => other,
        }
    }

    pub fn index_kind(&self) -> IndexKind {
        match self.index.kind {
            IndexKindName::Flat => IndexKind::Flat,
            IndexKindName::Clustered => IndexKind::Clustered(ClusterParams {
                n_clusters: self.index.n_clusters,
                n_probe: self.index.n_probe,
                iterations: self.index.iterations,
                seed: self.seed,
                ..ClusterParams::default()
            }),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let c = &self.classifier;
        TrainConfig {
            epochs: c.epochs,
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            l2: c.l2,
            seed: c.seed.unwrap_or(self.seed),
        }
    }

    pub fn embed_options(&self) -> EmbedOptions {
        EmbedOptions {
            claim_prefix: self.embedder.claim_prefix.clone(),
            evidence_prefix: self.embedder.evidence_prefix.clone(),
        }
    }

    pub fn uses_head(&self) -> bool {
        self.classifier.provider == "head"
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Loads, overrides from the process environment, validates and checks the
/// dataset against the scheme.
pub fn validate_config(path: &Path) -> Result<PipelineConfig> {
    let cfg = PipelineConfig::load(path, std::env::vars())?.validated()?;
    cfg.check_dataset()?;
    Ok(cfg)
}

pub fn build_embedder(cfg: &EmbedderConfig, default_seed: u64) -> Result<Box<dyn EmbeddingProvider>> {
    if cfg.provider == "hash" {
        Ok(Box::new(
            HashEmbedder::new(cfg.dim, cfg.seed.unwrap_or(default_seed)).with_max_batch(cfg.max_batch),
        ))
    } else {
        Ok(Box::new(RemoteEmbedder::new(
            &cfg.provider,
            &cfg.model,
            cfg.dim,
            cfg.max_batch,
            Duration::from_secs_f64(cfg.timeout_secs),
            cfg.retries,
        )?))
    }
}

/// Ingests `path`, trying the three-class scheme first.
pub fn ingest_any(path: &Path) -> Result<Dataset> {
    match corpus::ingest(path, LabelScheme::ThreeClass) {
        Err(Error::UnknownLabel { .. }) => corpus::ingest(path, LabelScheme::SixClass),
        other => other,
    }
}

fn evidence_by_claim(sets: &[EvidenceSet]) -> HashMap<&str, &EvidenceSet> {
    sets.iter().map(|s| (s.claim_id.as_str(), s)).collect()
}

/// Classifier input plus pooled `3d` features for one claim. Only evidence
/// that survives truncation is pooled, so the head sees what the input holds.
pub fn claim_features(
    dataset: &Dataset,
    store: &EmbeddingStore,
    set: &EvidenceSet,
    max_len: usize,
) -> Result<(ClassifierInput, Vec<f64>)> {
    let claim = dataset
        .claim(&set.claim_id)
        .ok_or_else(|| Error::InvalidArgument(format!("evidence for unknown claim `{}`", set.claim_id)))?;
    let texts = set.texts();
    let input = build_input(&claim.id, &claim.text, &texts, max_len);
    let widen = |key: &str, what: &dyn std::fmt::Display| -> Result<Vec<f64>> {
        store
            .get(key)
            .map(|v| v.iter().map(|&x| f64::from(x)).collect())
            .ok_or_else(|| Error::MissingEmbedding(what.to_string()))
    };
    let claim_vec = widen(&claim_key(&claim.id), &format!("claim {}", claim.id))?;
    let evidence = set.items[..input.evidence.len()]
        .iter()
        .map(|item| Ok((widen(&item.addr.key(), &item.addr)?, item.score)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(&[f64], f64)> = evidence.iter().map(|(v, s)| (v.as_slice(), *s)).collect();
    Ok((input, pool_features(&claim_vec, &refs)?))
}

fn claims_in(dataset: &Dataset, split: Option<Split>) -> Vec<&corpus::Claim> {
    dataset
        .claims()
        .iter()
        .filter(|c| split.is_none_or(|s| c.split == s))
        .collect()
}

/// Inputs and features for the claims of `split` (all claims when `None`),
/// in dataset order.
pub fn features_for_split(
    dataset: &Dataset,
    store: &EmbeddingStore,
    evidence: &[EvidenceSet],
    max_len: usize,
    split: Option<Split>,
) -> Result<Vec<(ClassifierInput, Vec<f64>, VeracityLabel)>> {
    let by_claim = evidence_by_claim(evidence);
    claims_in(dataset, split)
        .par_iter()
        .map(|c| {
            let set = by_claim.get(c.id.as_str()).ok_or_else(|| {
                Error::InvalidArgument(format!("no evidence set for claim `{}`", c.id))
            })?;
            let (input, h) = claim_features(dataset, store, set, max_len)?;
            Ok((input, h, c.label))
        })
        .collect()
}

pub fn train_head(
    dataset: &Dataset,
    store: &EmbeddingStore,
    evidence: &[EvidenceSet],
    max_len: usize,
    config: &TrainConfig,
) -> Result<(SoftmaxHead<f64>, TrainReport)> {
    let rows = features_for_split(dataset, store, evidence, max_len, Some(Split::Train))?;
    let (xs, ys): (Vec<Vec<f64>>, Vec<VeracityLabel>) = rows.into_iter().map(|(_, h, y)| (h, y)).unzip();
    SoftmaxHead::train(dataset.scheme(), &xs, &ys, config)
}

pub fn predict_with_head(
    dataset: &Dataset,
    store: &EmbeddingStore,
    evidence: &[EvidenceSet],
    head: &SoftmaxHead<f64>,
    max_len: usize,
    split: Option<Split>,
) -> Result<Vec<VeracityPrediction>> {
    if head.scheme() != dataset.scheme() {
        return Err(Error::InvalidArgument(format!(
            "model scheme {} does not match dataset scheme {}",
            head.scheme().code(),
            dataset.scheme().code()
        )));
    }
    features_for_split(dataset, store, evidence, max_len, split)?
        .into_iter()
        .map(|(input, h, _)| head.predict(&input.claim_id, &h))
        .collect()
}

pub fn predict_with_remote(
    dataset: &Dataset,
    evidence: &[EvidenceSet],
    classifier: &RemoteClassifier,
    max_len: usize,
    split: Option<Split>,
) -> Result<Vec<VeracityPrediction>> {
    let by_claim = evidence_by_claim(evidence);
    let inputs = claims_in(dataset, split)
        .into_iter()
        .map(|c| {
            let set = by_claim.get(c.id.as_str()).ok_or_else(|| {
                Error::InvalidArgument(format!("no evidence set for claim `{}`", c.id))
            })?;
            Ok(build_input(&c.id, &c.text, &set.texts(), max_len))
        })
        .collect::<Result<Vec<_>>>()?;
    classifier.predict(&inputs)
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    claim_id: String,
    label: String,
    distribution: Vec<f64>,
}

pub fn write_predictions(path: &Path, predictions: &[VeracityPrediction]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in predictions {
        let record = PredictionRecord {
            claim_id: p.claim_id.clone(),
            label: p.predicted.value().to_string(),
            distribution: p.distribution.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&record).expect("json")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path, scheme: LabelScheme) -> Result<Vec<VeracityPrediction>> {
    read_jsonl(path, |line, v| {
        let r: PredictionRecord = serde_json::from_value(v).map_err(|e| Error::Malformed {
            line,
            field: "<prediction>".to_string(),
            message: e.to_string(),
        })?;
        if r.distribution.len() != scheme.class_count() {
            return Err(Error::DimensionMismatch {
                context: format!("prediction for `{}`", r.claim_id),
                expected: scheme.class_count(),
                found: r.distribution.len(),
            });
        }
        Ok(VeracityPrediction {
            predicted: scheme.label(&r.label)?,
            claim_id: r.claim_id,
            distribution: r.distribution,
        })
    })
}

fn read_jsonl<T>(path: &Path, mut f: impl FnMut(usize, Value) -> Result<T>) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: i + 1,
            field: "<record>".to_string(),
            message: e.to_string(),
        })?;
        out.push(f(i + 1, v)?);
    }
    Ok(out)
}

/// Gold labels from a JSONL file whose records carry `id` (or `claim_id`)
/// and `label` — a canonical dataset file qualifies.
pub fn read_gold(path: &Path, scheme: LabelScheme) -> Result<Vec<(String, VeracityLabel)>> {
    read_jsonl(path, |line, v| {
        let id = match v.get("claim_id").or_else(|| v.get("id")) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => {
                return Err(Error::Malformed {
                    line,
                    field: "id".to_string(),
                    message: "missing claim id".to_string(),
                })
            }
        };
        let label = v.get("label").and_then(Value::as_str).ok_or_else(|| Error::Malformed {
            line,
            field: "label".to_string(),
            message: "missing label".to_string(),
        })?;
        Ok((id, scheme.label(label)?))
    })
}

/// Scores predictions against gold labels matched by claim id.
pub fn evaluate_predictions(
    gold: &[(String, VeracityLabel)],
    predictions: &[VeracityPrediction],
    scheme: LabelScheme,
) -> Result<EvaluationReport> {
    let by_id: HashMap<&str, VeracityLabel> = gold.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    let mut g = Vec::with_capacity(predictions.len());
    let mut p = Vec::with_capacity(predictions.len());
    for pred in predictions {
        let label = by_id.get(pred.claim_id.as_str()).ok_or_else(|| {
            Error::InvalidArgument(format!("no gold label for claim `{}`", pred.claim_id))
        })?;
        g.push(*label);
        p.push(pred.predicted);
    }
    score(&g, &p, scheme)
}

/// Guards an output directory against concurrent runs. Removed on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".derec.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is in use by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Artifact file names inside an output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub const DATASET: &'static str = "dataset.jsonl";
    pub const EMBEDDINGS: &'static str = "embeddings.drec";
    pub const EMBEDDINGS_PARAMS: &'static str = "embeddings.params";
    pub const INDEX: &'static str = "index.drix";
    pub const EVIDENCE: &'static str = "evidence.jsonl";
    pub const MODEL: &'static str = "model.drhd";
    pub const PREDICTIONS: &'static str = "predictions.jsonl";
    pub const EVAL_JSON: &'static str = "eval.json";
    pub const EVAL_TXT: &'static str = "eval.txt";
    pub const RUNTIME_JSON: &'static str = "runtime.json";
    pub const RUNTIME_TXT: &'static str = "runtime.txt";
    pub const MANIFEST: &'static str = "manifest.json";
    pub const CONFIG: &'static str = "config.resolved.toml";

    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: dir.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

/// Pipeline steps; each maps onto one of the three timed stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Ingest,
    Embed,
    Index,
    Retrieve,
    Train,
    Predict,
    Eval,
}

impl Step {
    pub const ALL: [Step; 7] = [
        Step::Ingest,
        Step::Embed,
        Step::Index,
        Step::Retrieve,
        Step::Train,
        Step::Predict,
        Step::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::Ingest => "ingest",
            Step::Embed => "embed",
            Step::Index => "index",
            Step::Retrieve => "retrieve",
            Step::Train => "train",
            Step::Predict => "predict",
            Step::Eval => "eval",
        }
    }

    pub fn timed_stage(self) -> Option<Stage> {
        match self {
            Step::Ingest | Step::Embed => Some(Stage::EvidenceExtraction),
            Step::Index | Step::Retrieve => Some(Stage::EvidenceRetrieval),
            Step::Train | Step::Predict => Some(Stage::VeracityPrediction),
            Step::Eval => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct StepRecord {
    input: String,
    outputs: BTreeMap<String, String>,
}

type Manifest = BTreeMap<String, StepRecord>;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Whether a step ran or was skipped as up to date.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Ran,
    Fresh,
    /// Not applicable under this configuration (e.g. training with a
    /// remote classifier).
    Skipped,
}

/// Runs individual steps against an output directory, skipping steps
/// whose inputs (content digests plus parameters) are unchanged.
pub struct Runner {
    cfg: PipelineConfig,
    art: Artifacts,
    force: bool,
    manifest: Manifest,
    _lock: RunLock,
}

impl Runner {
    pub fn open(cfg: PipelineConfig, force: bool) -> Result<Self> {
        let art = Artifacts::new(&cfg.out);
        let lock = RunLock::acquire(&art.dir)?;
        let manifest_path = art.path(Artifacts::MANIFEST);
        let manifest = match fs::read(&manifest_path) {
            Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_else(|e| {
                log::warn!("ignoring unreadable manifest {}: {e}", manifest_path.display());
                Manifest::new()
            }),
            Err(_) => Manifest::new(),
        };
        write_atomic(&art.path(Artifacts::CONFIG), cfg.to_toml().as_bytes())?;
        Ok(Runner {
            cfg,
            art,
            force,
            manifest,
            _lock: lock,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn artifacts(&self) -> &Artifacts {
        &self.art
    }

    fn step(
        &mut self,
        step: Step,
        params: Value,
        inputs: &[&str],
        outputs: &[&str],
        body: impl FnOnce(&PipelineConfig, &Artifacts) -> Result<()>,
    ) -> Result<StepStatus> {
        let run = || -> Result<StepStatus> {
            let mut h = Sha256::new();
            h.update(step.name().as_bytes());
            h.update(params.to_string().as_bytes());
            for name in inputs {
                let path = self.art.path(name);
                if !path.exists() {
                    return Err(Error::InvalidArgument(format!(
                        "missing input artifact {} (run the earlier steps first)",
                        path.display()
                    )));
                }
                h.update(name.as_bytes());
                h.update(file_digest(&path)?.as_bytes());
            }
            let input = hex(&h.finalize());

            if !self.force {
                if let Some(rec) = self.manifest.get(step.name()) {
                    let fresh = rec.input == input
                        && outputs.iter().all(|o| {
                            let p = self.art.path(o);
                            rec.outputs.get(*o).is_some_and(|d| file_digest(&p).ok().as_ref() == Some(d))
                        });
                    if fresh {
                        log::info!("{}: up to date", step.name());
                        return Ok(StepStatus::Fresh);
                    }
                }
            }
            log::info!("{}: running", step.name());
            body(&self.cfg, &self.art)?;
            let mut rec = StepRecord {
                input,
                outputs: BTreeMap::new(),
            };
            for o in outputs {
                rec.outputs.insert(o.to_string(), file_digest(&self.art.path(o))?);
            }
            self.manifest.insert(step.name().to_string(), rec);
            let bytes = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
            write_atomic(&self.art.path(Artifacts::MANIFEST), &bytes)?;
            Ok(StepStatus::Ran)
        };
        run().map_err(|e| e.in_stage(step.name()))
    }

    fn load_dataset(cfg: &PipelineConfig, art: &Artifacts) -> Result<Dataset> {
        corpus::ingest(&art.path(Artifacts::DATASET), cfg.scheme)
    }

    pub fn ingest(&mut self) -> Result<StepStatus> {
        let source = self.cfg.dataset.clone();
        let params = json!({
            "dataset": source.display().to_string(),
            "source_digest": source_digest(&source).map_err(|e| e.in_stage("ingest"))?,
            "scheme": self.cfg.scheme.code(),
        });
        self.step(Step::Ingest, params, &[], &[Artifacts::DATASET], |cfg, art| {
            let ds = cfg.check_dataset()?;
            corpus::write_canonical(&ds, &art.path(Artifacts::DATASET))
        })
    }

    pub fn embed(&mut self) -> Result<StepStatus> {
        let e = &self.cfg.embedder;
        let params = json!({
            "provider": e.provider,
            "dim": e.dim,
            "seed": e.seed.unwrap_or(self.cfg.seed),
            "model": e.model,
            "claim_prefix": e.claim_prefix,
            "evidence_prefix": e.evidence_prefix,
        });
        let force = self.force;
        let params_text = params.to_string();
        self.step(
            Step::Embed,
            params,
            &[Artifacts::DATASET],
            &[Artifacts::EMBEDDINGS],
            |cfg, art| {
                let ds = Self::load_dataset(cfg, art)?;
                let cache = art.path(Artifacts::EMBEDDINGS);
                let sidecar = art.path(Artifacts::EMBEDDINGS_PARAMS);
                let matches = fs::read_to_string(&sidecar).is_ok_and(|s| s == params_text);
                if cache.exists() && (force || !matches) {
                    log::info!("embed: discarding cache built with other parameters");
                    fs::remove_file(&cache).map_err(|e| Error::io(&cache, e))?;
                }
                fs::write(&sidecar, &params_text).map_err(|e| Error::io(&sidecar, e))?;
                let provider = build_embedder(&cfg.embedder, cfg.seed)?;
                let (_, report) = embed_corpus(&provider, &ds, &cache, &cfg.embed_options())?;
                log::info!(
                    "embed: {} computed, {} reused, {} corrupt recomputed",
                    report.computed,
                    report.reused,
                    report.corrupt_recomputed
                );
                Ok(())
            },
        )
    }

    pub fn index(&mut self) -> Result<StepStatus> {
        let params = json!({ "kind": format!("{:?}", self.cfg.index_kind()) });
        self.step(
            Step::Index,
            params,
            &[Artifacts::DATASET, Artifacts::EMBEDDINGS],
            &[Artifacts::INDEX],
            |cfg, art| {
                let ds = Self::load_dataset(cfg, art)?;
                let store = EmbeddingStore::load(&art.path(Artifacts::EMBEDDINGS))?;
                sentence_index(&ds, &store, cfg.index_kind())?.persist(&art.path(Artifacts::INDEX))
            },
        )
    }

    pub fn retrieve(&mut self) -> Result<StepStatus> {
        let params = json!({ "k": self.cfg.k, "scope": self.cfg.scope.as_str() });
        let inputs: &[&str] = match self.cfg.scope {
            Scope::PerClaim => &[Artifacts::DATASET, Artifacts::EMBEDDINGS],
            Scope::Global => &[Artifacts::DATASET, Artifacts::EMBEDDINGS, Artifacts::INDEX],
        };
        self.step(Step::Retrieve, params, inputs, &[Artifacts::EVIDENCE], |cfg, art| {
            let ds = Self::load_dataset(cfg, art)?;
            let store = EmbeddingStore::load(&art.path(Artifacts::EMBEDDINGS))?;
            let retriever = match cfg.scope {
                Scope::PerClaim => Retriever::new(&ds, &store, Scope::PerClaim)?,
                Scope::Global => {
                    let index = VectorIndex::load(&art.path(Artifacts::INDEX))?;
                    Retriever::with_index(&ds, &store, index)?
                }
            };
            let sets = retriever.retrieve_all(cfg.k)?;
            let short = sets.iter().filter(|s| s.shortfall()).count();
            if short > 0 {
                log::info!("retrieve: {short} claims have fewer than {} sentences", cfg.k);
            }
            write_evidence(&art.path(Artifacts::EVIDENCE), &sets)
        })
    }

    pub fn train(&mut self) -> Result<StepStatus> {
        if !self.cfg.uses_head() {
            log::info!("train: remote classifier configured, nothing to train");
            return Ok(StepStatus::Skipped);
        }
        let params = json!({
            "train": self.cfg.train_config(),
            "max_len": self.cfg.max_len,
            "features": crate::verify::FEATURE_SPEC,
        });
        self.step(
            Step::Train,
            params,
            &[Artifacts::DATASET, Artifacts::EMBEDDINGS, Artifacts::EVIDENCE],
            &[Artifacts::MODEL],
            |cfg, art| {
                let ds = Self::load_dataset(cfg, art)?;
                let store = EmbeddingStore::load(&art.path(Artifacts::EMBEDDINGS))?;
                let evidence = read_evidence(&art.path(Artifacts::EVIDENCE))?;
                let (head, report) = train_head(&ds, &store, &evidence, cfg.max_len, &cfg.train_config())?;
                log::info!(
                    "train: loss {:.4} -> {:.4} (best epoch {})",
                    report.initial_loss,
                    report.final_loss,
                    report.best_epoch
                );
                head.save(&art.path(Artifacts::MODEL))
            },
        )
    }

    pub fn predict(&mut self) -> Result<StepStatus> {
        let c = &self.cfg.classifier;
        let params = json!({
            "provider": c.provider,
            "split": self.cfg.eval_split.as_str(),
            "max_len": self.cfg.max_len,
        });
        let inputs: &[&str] = if self.cfg.uses_head() {
            &[Artifacts::DATASET, Artifacts::EMBEDDINGS, Artifacts::EVIDENCE, Artifacts::MODEL]
        } else {
            &[Artifacts::DATASET, Artifacts::EVIDENCE]
        };
        self.step(Step::Predict, params, inputs, &[Artifacts::PREDICTIONS], |cfg, art| {
            let ds = Self::load_dataset(cfg, art)?;
            let evidence = read_evidence(&art.path(Artifacts::EVIDENCE))?;
            let split = Some(cfg.eval_split);
            let preds = if cfg.uses_head() {
                let store = EmbeddingStore::load(&art.path(Artifacts::EMBEDDINGS))?;
                let head = SoftmaxHead::<f64>::load(&art.path(Artifacts::MODEL))?;
                predict_with_head(&ds, &store, &evidence, &head, cfg.max_len, split)?
            } else {
                let client = RemoteClassifier::new(
                    &cfg.classifier.provider,
                    cfg.scheme,
                    Duration::from_secs_f64(cfg.classifier.timeout_secs),
                    cfg.classifier.retries,
                )?;
                predict_with_remote(&ds, &evidence, &client, cfg.max_len, split)?
            };
            if preds.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "dataset has no `{}` claims to predict",
                    cfg.eval_split
                )));
            }
            write_predictions(&art.path(Artifacts::PREDICTIONS), &preds)
        })
    }

    pub fn eval(&mut self) -> Result<(StepStatus, EvaluationReport)> {
        let status = self.step(
            Step::Eval,
            json!({}),
            &[Artifacts::DATASET, Artifacts::PREDICTIONS],
            &[Artifacts::EVAL_JSON, Artifacts::EVAL_TXT],
            |cfg, art| {
                let report = evaluate_artifacts(art, cfg.scheme)?;
                let json = serde_json::to_vec_pretty(&report).expect("report serializes");
                write_atomic(&art.path(Artifacts::EVAL_JSON), &json)?;
                write_atomic(&art.path(Artifacts::EVAL_TXT), report.table().as_bytes())
            },
        )?;
        let report = evaluate_artifacts(&self.art, self.cfg.scheme).map_err(|e| e.in_stage("eval"))?;
        Ok((status, report))
    }

    pub fn run_step(&mut self, step: Step) -> Result<StepStatus> {
        match step {
            Step::Ingest => self.ingest(),
            Step::Embed => self.embed(),
            Step::Index => self.index(),
            Step::Retrieve => self.retrieve(),
            Step::Train => self.train(),
            Step::Predict => self.predict(),
            Step::Eval => self.eval().map(|(status, _)| status),
        }
    }
}

fn evaluate_artifacts(art: &Artifacts, scheme: LabelScheme) -> Result<EvaluationReport> {
    let gold = read_gold(&art.path(Artifacts::DATASET), scheme)?;
    let preds = read_predictions(&art.path(Artifacts::PREDICTIONS), scheme)?;
    evaluate_predictions(&gold, &preds, scheme)
}

/// Content digest of a dataset source, a file or a directory tree.
fn source_digest(path: &Path) -> Result<String> {
    if path.is_file() {
        return file_digest(path);
    }
    let mut files = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(path).unwrap_or(&f).to_string_lossy().as_bytes());
        h.update(file_digest(&f)?.as_bytes());
    }
    Ok(hex(&h.finalize()))
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub evaluation: EvaluationReport,
    pub runtime: RuntimeReport,
    pub steps: Vec<(Step, StepStatus)>,
}

/// Runs every step in order, timing the three stages. The runtime report
/// is written even when a step fails (marked incomplete).
pub fn run_pipeline(cfg: &PipelineConfig, force: bool) -> Result<PipelineOutcome> {
    let mut runner = Runner::open(cfg.clone(), force)?;
    let mut steps = Vec::new();
    let (runtime, result) = profile_run(|p| {
        for stage in Stage::ALL {
            p.stage(stage, || {
                for step in Step::ALL.iter().filter(|s| s.timed_stage() == Some(stage)) {
                    steps.push((*step, runner.run_step(*step)?));
                }
                Ok(())
            })?;
        }
        runner.eval()
    });
    let art = runner.artifacts().clone();
    let json = serde_json::to_vec_pretty(&runtime).expect("report serializes");
    write_atomic(&art.path(Artifacts::RUNTIME_JSON), &json)?;
    write_atomic(&art.path(Artifacts::RUNTIME_TXT), runtime.table().as_bytes())?;
    let (status, evaluation) = result?;
    steps.push((Step::Eval, status));
    Ok(PipelineOutcome {
        evaluation,
        runtime,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = PipelineConfig::from_toml_str("dataset = \"d.jsonl\"\nscheme = \"3\"\n", Path::new("/base"), env(&[]))
            .unwrap()
            .validated()
            .unwrap();
        assert_eq!(cfg.k, 10);
        assert_eq!(cfg.scope, Scope::PerClaim);
        assert_eq!(cfg.index_kind(), IndexKind::Flat);
        assert_eq!(cfg.max_len, 512);
        assert_eq!(cfg.dataset, PathBuf::from("/base/d.jsonl"));
        assert_eq!(cfg.embedder.seed, Some(0));
        assert!(cfg.uses_head());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = PipelineConfig::from_toml_str("dataset = \"d\"\nscheme = 3\nfoo = 1\n", Path::new("."), env(&[]))
            .unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
        let err = PipelineConfig::from_toml_str(
            "dataset = \"d\"\nscheme = 3\n[index]\nnprobe = 2\n",
            Path::new("."),
            env(&[]),
        )
        .unwrap_err();
        assert!(err.to_string().contains("nprobe"), "{err}");
    }

    #[test]
    fn env_overrides_apply() {
        let cfg = PipelineConfig::from_toml_str(
            "dataset = \"d\"\nscheme = 3\nk = 4\n",
            Path::new("."),
            env(&[
                ("DEREC_K", "7"),
                ("DEREC_SCOPE", "global"),
                ("DEREC_EMBEDDER_PROVIDER", "http://127.0.0.1:9/embed"),
                ("DEREC_CLASSIFIER_LEARNING_RATE", "0.5"),
                ("OTHER_K", "1"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.k, 7);
        assert_eq!(cfg.scope, Scope::Global);
        assert_eq!(cfg.embedder.provider, "http://127.0.0.1:9/embed");
        assert_eq!(cfg.classifier.learning_rate, 0.5);
        let err = PipelineConfig::from_toml_str("dataset = \"d\"\nscheme = 3\n", Path::new("."), env(&[("DEREC_BOGUS", "1")]))
            .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn validation_rejects_bad_values() {
        let base = || PipelineConfig::new("d", LabelScheme::ThreeClass);
        let cases: Vec<(PipelineConfig, &str)> = vec![
            (PipelineConfig { k: 0, ..base() }, "k must"),
            (PipelineConfig { max_len: 2, ..base() }, "max_len"),
            (
                PipelineConfig {
                    index: IndexConfig {
                        n_probe: 40,
                        ..IndexConfig::default()
                    },
                    ..base()
                },
                "n_probe",
            ),
            (
                PipelineConfig {
                    classifier: ClassifierConfig {
                        provider: "bert".into(),
                        ..ClassifierConfig::default()
                    },
                    ..base()
                },
                "classifier.provider",
            ),
        ];
        for (cfg, needle) in cases {
            let err = cfg.validated().unwrap_err();
            assert!(matches!(err, Error::Config(_)));
            assert!(err.to_string().contains(needle), "{err}");
            assert_eq!(err.exit_code(), 1);
        }
    }

    #[test]
    fn resolved_config_roundtrips() {
        let cfg = PipelineConfig {
            out: PathBuf::from("/data/out"),
            ..PipelineConfig::new("/data/d.jsonl", LabelScheme::SixClass)
        }
        .validated()
        .unwrap();
        let back = PipelineConfig::from_toml_str(&cfg.to_toml(), Path::new("/"), env(&[])).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }
}
