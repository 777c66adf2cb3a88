//! Top-k evidence retrieval per claim.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{claim_key, Dataset, SentenceAddr};
use crate::embed::{EmbeddingStore, EmbeddingVector};
use crate::error::{Error, Result};
use crate::index::{IndexKind, VectorIndex};

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// Only sentences from the claim's own reports.
    #[default]
    PerClaim,
    /// Every sentence in the dataset.
    Global,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per-claim" => Ok(Scope::PerClaim),
            "global" => Ok(Scope::Global),
            other => Err(Error::InvalidArgument(format!(
                "unknown scope `{other}` (expected per-claim or global)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::PerClaim => "per-claim",
            Scope::Global => "global",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceItem {
    pub addr: SentenceAddr,
    pub score: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceSet {
    pub claim_id: String,
    pub items: Vec<EvidenceItem>,
    pub k_requested: usize,
    pub scope: Scope,
}

impl EvidenceSet {
    /// Fewer than `k` sentences were available.
    pub fn shortfall(&self) -> bool {
        self.items.len() < self.k_requested
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.text.as_str()).collect()
    }
}

fn lookup<'s>(store: &'s EmbeddingStore, key: &str, what: &dyn fmt::Display) -> Result<&'s [f32]> {
    store
        .get(key)
        .ok_or_else(|| Error::MissingEmbedding(what.to_string()))
}

fn entries_for(
    store: &EmbeddingStore,
    addrs: impl Iterator<Item = SentenceAddr>,
) -> Result<Vec<(String, EmbeddingVector<f32>)>> {
    addrs
        .map(|addr| {
            let key = addr.key();
            let v = lookup(store, &key, &addr)?;
            Ok((key, EmbeddingVector::assume_normalized(v.to_vec())))
        })
        .collect()
}

/// Index over every sentence of the dataset, keyed by sentence address.
pub fn sentence_index(dataset: &Dataset, store: &EmbeddingStore, kind: IndexKind) -> Result<VectorIndex<f32>> {
    let entries = entries_for(store, dataset.all_sentences().map(|s| s.address()))?;
    VectorIndex::build(store.dim(), &entries, kind)
}

/// Retrieval over one dataset and embedding store. Under global scope the
/// corpus-wide index is built once at construction.
pub struct Retriever<'a> {
    dataset: &'a Dataset,
    store: &'a EmbeddingStore,
    scope: Scope,
    global: Option<VectorIndex<f32>>,
}

impl<'a> Retriever<'a> {
    pub fn new(dataset: &'a Dataset, store: &'a EmbeddingStore, scope: Scope) -> Result<Self> {
        let global = match scope {
            Scope::PerClaim => None,
            Scope::Global => Some(sentence_index(dataset, store, IndexKind::Flat)?),
        };
        Ok(Retriever {
            dataset,
            store,
            scope,
            global,
        })
    }

    /// Global-scope retrieval through a prebuilt sentence index (for
    /// example a clustered one built by [`sentence_index`]).
    pub fn with_index(dataset: &'a Dataset, store: &'a EmbeddingStore, index: VectorIndex<f32>) -> Result<Self> {
        if index.dim() != store.dim() {
            return Err(Error::DimensionMismatch {
                context: "sentence index".to_string(),
                expected: store.dim(),
                found: index.dim(),
            });
        }
        Ok(Retriever {
            dataset,
            store,
            scope: Scope::Global,
            global: Some(index),
        })
    }

    pub fn retrieve(&self, claim_id: &str, k: usize) -> Result<EvidenceSet> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".to_string()));
        }
        let idx = self
            .dataset
            .claim_index(claim_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown claim `{claim_id}`")))?;
        let query = lookup(self.store, &claim_key(claim_id), &format!("claim {claim_id}"))?;

        let hits = match &self.global {
            Some(index) if index.is_empty() => Vec::new(),
            Some(index) => index.search(query, k)?,
            None => {
                let entries = entries_for(self.store, self.dataset.sentences_of(idx).map(|s| s.address()))?;
                if entries.is_empty() {
                    Vec::new()
                } else {
                    VectorIndex::build(self.store.dim(), &entries, IndexKind::Flat)?.search(query, k)?
                }
            }
        };

        let items = hits
            .into_iter()
            .map(|hit| {
                let addr = SentenceAddr::from_key(&hit.key).ok_or_else(|| Error::Format {
                    what: "index",
                    message: format!("key `{}` is not a sentence address", hit.key),
                })?;
                let text = self
                    .dataset
                    .sentence(&addr)
                    .map(|s| s.text.clone())
                    .ok_or_else(|| Error::InvalidArgument(format!("index entry {addr} is not in the dataset")))?;
                Ok(EvidenceItem {
                    addr,
                    score: hit.score,
                    text,
                })
            })
            .collect::<Result<_>>()?;
        Ok(EvidenceSet {
            claim_id: claim_id.to_string(),
            items,
            k_requested: k,
            scope: self.scope,
        })
    }

    /// One evidence set per claim, in dataset order.
    pub fn retrieve_all(&self, k: usize) -> Result<Vec<EvidenceSet>> {
        self.dataset
            .claims()
            .par_iter()
            .map(|c| {
                self.retrieve(&c.id, k).map_err(|e| match e {
                    Error::MissingEmbedding(what) => {
                        Error::MissingEmbedding(format!("{what} (claim {})", c.id))
                    }
                    e => e,
                })
            })
            .collect()
    }
}

pub fn retrieve_evidence(
    dataset: &Dataset,
    store: &EmbeddingStore,
    claim_id: &str,
    k: usize,
    scope: Scope,
) -> Result<EvidenceSet> {
    Retriever::new(dataset, store, scope)?.retrieve(claim_id, k)
}

/// Retrieves for every claim and reports the wall-clock time spent.
pub fn retrieve_all(
    dataset: &Dataset,
    store: &EmbeddingStore,
    k: usize,
    scope: Scope,
) -> Result<(Vec<EvidenceSet>, Duration)> {
    let t0 = Instant::now();
    let sets = Retriever::new(dataset, store, scope)?.retrieve_all(k)?;
    Ok((sets, t0.elapsed()))
}

#[derive(Serialize, Deserialize)]
struct EvidenceRecordItem {
    report_id: String,
    position: usize,
    score: f64,
    text: String,
    /// Present only when the sentence belongs to another claim (global scope).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_claim_id: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct EvidenceRecord {
    claim_id: String,
    evidence: Vec<EvidenceRecordItem>,
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default)]
    scope: Scope,
}

fn default_k() -> usize {
    DEFAULT_K
}

pub fn write_evidence(path: &Path, sets: &[EvidenceSet]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for set in sets {
        let record = EvidenceRecord {
            claim_id: set.claim_id.clone(),
            evidence: set
                .items
                .iter()
                .map(|i| EvidenceRecordItem {
                    report_id: i.addr.report_id.clone(),
                    position: i.addr.position,
                    score: i.score,
                    text: i.text.clone(),
                    source_claim_id: (i.addr.claim_id != set.claim_id)
                        .then(|| i.addr.claim_id.clone()),
                })
                .collect(),
            k: set.k_requested,
            scope: set.scope,
        };
        let line = serde_json::to_string(&record).expect("json");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_evidence(path: &Path) -> Result<Vec<EvidenceSet>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EvidenceRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: i + 1,
            field: "<evidence>".to_string(),
            message: e.to_string(),
        })?;
        out.push(EvidenceSet {
            items: r
                .evidence
                .into_iter()
                .map(|e| EvidenceItem {
                    addr: SentenceAddr {
                        claim_id: e.source_claim_id.unwrap_or_else(|| r.claim_id.clone()),
                        report_id: e.report_id,
                        position: e.position,
                    },
                    score: e.score,
                    text: e.text,
                })
                .collect(),
            claim_id: r.claim_id,
            k_requested: r.k,
            scope: r.scope,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabelScheme, Split};
    use crate::embed::{embed_corpus, EmbedOptions, HashEmbedder};

    fn dataset(claims: &[(&str, &str, Vec<&str>)]) -> Dataset {
        let mut ds = Dataset::new(LabelScheme::ThreeClass);
        for (i, (id, text, sents)) in claims.iter().enumerate() {
            ds.push_claim(
                id,
                text,
                LabelScheme::ThreeClass.label_at(i % 3),
                Split::Train,
                vec![("r0".into(), sents.iter().map(|s| s.to_string()).collect())],
            )
            .unwrap();
        }
        ds
    }

    fn store_for(ds: &Dataset) -> EmbeddingStore {
        let dir = tempfile::tempdir().unwrap();
        embed_corpus(
            &HashEmbedder::new(64, 42),
            ds,
            &dir.path().join("e.drec"),
            &EmbedOptions::default(),
        )
        .unwrap()
        .0
    }

    #[test]
    fn verbatim_copy_ranks_first() {
        let ds = dataset(&[(
            "c",
            "the moon is made of cheese",
            vec![
                "unrelated sentence about taxes.",
                "the moon is made of cheese",
                "cheese prices rose.",
            ],
        )]);
        let store = store_for(&ds);
        let set = retrieve_evidence(&ds, &store, "c", 10, Scope::PerClaim).unwrap();
        assert_eq!(set.items[0].addr.position, 1);
        assert!((set.items[0].score - 1.0).abs() < 1e-5);
        assert_eq!(set.items.len(), 3);
        assert!(set.shortfall());
    }

    #[test]
    fn empty_claim_yields_empty_set() {
        let ds = dataset(&[("c", "lonely claim", vec![])]);
        let store = store_for(&ds);
        let set = retrieve_evidence(&ds, &store, "c", 10, Scope::PerClaim).unwrap();
        assert!(set.is_empty());
        assert!(set.shortfall());
        let set = retrieve_evidence(&ds, &store, "c", 10, Scope::Global).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn missing_embedding_names_address() {
        let ds = dataset(&[("c", "claim text", vec!["a sentence."])]);
        let other = dataset(&[("c", "claim text", vec![])]);
        let store = store_for(&other);
        match retrieve_evidence(&ds, &store, "c", 10, Scope::PerClaim) {
            Err(Error::MissingEmbedding(what)) => assert!(what.contains("c/r0#0"), "{what}"),
            other => panic!("{other:?}"),
        }
        assert!(retrieve_evidence(&ds, &store, "c", 0, Scope::PerClaim).is_err());
    }

    #[test]
    fn evidence_file_roundtrip() {
        let ds = dataset(&[
            ("a", "vaccines cause autism", vec!["first.", "second."]),
            ("b", "the earth is flat", vec!["vaccines cause autism claims."]),
        ]);
        let store = store_for(&ds);
        let (sets, _) = retrieve_all(&ds, &store, 2, Scope::Global).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ev.jsonl");
        write_evidence(&p, &sets).unwrap();
        assert_eq!(read_evidence(&p).unwrap(), sets);
    }
}
