//! Dense text embeddings: providers, normalization, and the on-disk
//! embedding store that doubles as a resumable cache.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::hash::Hasher;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use fnv::FnvHasher;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{claim_key, Dataset};
use crate::error::{Error, Result};
use crate::scalar::{l2_norm, Scalar};

/// A dense vector, flagged once it has been scaled to unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T: Scalar = f32> {
    values: Vec<T>,
    normalized: bool,
}

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        EmbeddingVector {
            values,
            normalized: false,
        }
    }

    /// Wraps values already known to be unit-norm (e.g. read back from a store).
    pub fn assume_normalized(values: Vec<T>) -> Self {
        EmbeddingVector {
            values,
            normalized: true,
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    /// Scales to unit norm. `item` names the vector in the zero-norm error.
    pub fn normalized(&self, item: &str) -> Result<Self> {
        normalize_values(&self.values, item).map(EmbeddingVector::assume_normalized)
    }
}

/// Unit-normalizes `values`, returning them unchanged when the norm is
/// already 1 to within a few ulps of `T`.
pub fn normalize_values<T: Scalar>(values: &[T], item: &str) -> Result<Vec<T>> {
    let norm = l2_norm(values);
    if !norm.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "vector `{item}` has non-finite components"
        )));
    }
    if norm == 0.0 {
        return Err(Error::ZeroNorm {
            item: item.to_string(),
        });
    }
    let eps = T::epsilon().to_f64_lossless();
    if (norm - 1.0).abs() <= 4.0 * eps {
        return Ok(values.to_vec());
    }
    Ok(values
        .iter()
        .map(|v| T::from_f64_rounded(v.to_f64_lossless() / norm))
        .collect())
}

pub fn normalize<T: Scalar>(v: &EmbeddingVector<T>) -> Result<EmbeddingVector<T>> {
    v.normalized("<vector>")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    pub name: String,
    pub dimension: usize,
    pub endpoint: Option<String>,
    pub max_batch: usize,
}

pub trait EmbeddingProvider: Send + Sync {
    fn descriptor(&self) -> &ProviderDescriptor;

    /// One provider request. Callers keep `texts.len() <= max_batch`.
    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<P> {
    fn descriptor(&self) -> &ProviderDescriptor {
        (**self).descriptor()
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        (**self).request(texts)
    }
}

/// Embeds `texts` in order, splitting into requests of at most `max_batch`.
/// Output vectors are not normalized.
pub fn embed_batch<P: EmbeddingProvider + ?Sized>(
    provider: &P,
    texts: &[&str],
) -> Result<Vec<EmbeddingVector<f32>>> {
    if texts.is_empty() {
        return Err(Error::InvalidArgument("empty text batch".to_string()));
    }
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(Error::InvalidArgument(format!("text {i} in batch is empty")));
    }
    let desc = provider.descriptor();
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(desc.max_batch.max(1)) {
        let vectors = provider.request(chunk)?;
        if vectors.len() != chunk.len() {
            return Err(Error::Provider(format!(
                "{} returned {} vectors for {} texts",
                desc.name,
                vectors.len(),
                chunk.len()
            )));
        }
        for v in vectors {
            if v.len() != desc.dimension {
                return Err(Error::DimensionMismatch {
                    context: format!("provider {}", desc.name),
                    expected: desc.dimension,
                    found: v.len(),
                });
            }
            out.push(EmbeddingVector::new(v));
        }
    }
    Ok(out)
}

/// Deterministic feature-hashing embedder.
///
/// Text is lowercased and split on non-alphanumeric characters. Every
/// unigram and adjacent-pair bigram is hashed with FNV-1a 64 over
/// `seed (u64 LE) || feature bytes`; the bucket is `hash % d` and the sign
/// is `-1` when the top bit is set.
pub struct HashEmbedder {
    descriptor: ProviderDescriptor,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension >= 1, "dimension must be at least 1");
        HashEmbedder {
            descriptor: ProviderDescriptor {
                name: "hash".to_string(),
                dimension,
                endpoint: None,
                max_batch: 256,
            },
            seed,
        }
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.descriptor.max_batch = max_batch.max(1);
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn add_feature(&self, out: &mut [f32], feature: &str) {
        let mut h = FnvHasher::default();
        h.write(&self.seed.to_le_bytes());
        h.write(feature.as_bytes());
        let h = h.finish();
        let bucket = (h % out.len() as u64) as usize;
        out[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut out = vec![0.0f32; self.descriptor.dimension];
        let lower = text.to_lowercase();
        let tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        for t in &tokens {
            self.add_feature(&mut out, t);
        }
        for pair in tokens.windows(2) {
            self.add_feature(&mut out, &format!("{} {}", pair[0], pair[1]));
        }
        out
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Wraps a provider and counts the requests it serves.
pub struct Counted<P> {
    inner: P,
    requests: AtomicUsize,
}

impl<P> Counted<P> {
    pub fn new(inner: P) -> Self {
        Counted {
            inner,
            requests: AtomicUsize::new(0),
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for Counted<P> {
    fn descriptor(&self) -> &ProviderDescriptor {
        self.inner.descriptor()
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        self.inner.request(texts)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
    model: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f32>>,
}

/// HTTP embedding service client:
/// POST `{"texts": [...], "model": "..."}` -> `{"embeddings": [[...]]}`.
pub struct RemoteEmbedder {
    descriptor: ProviderDescriptor,
    model: String,
    client: reqwest::blocking::Client,
    retries: usize,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: &str,
        model: &str,
        dimension: usize,
        max_batch: usize,
        timeout: Duration,
        retries: usize,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Provider(e.to_string()))?;
        Ok(RemoteEmbedder {
            descriptor: ProviderDescriptor {
                name: model.to_string(),
                dimension,
                endpoint: Some(endpoint.to_string()),
                max_batch: max_batch.max(1),
            },
            model: model.to_string(),
            client,
            retries,
        })
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let endpoint = self.descriptor.endpoint.as_deref().unwrap_or_default();
        let body = EmbedRequest {
            texts,
            model: &self.model,
        };
        let resp: EmbedResponse =
            crate::http::post_json(&self.client, endpoint, &body, self.retries)?;
        Ok(resp.embeddings)
    }
}

const STORE_MAGIC: &[u8; 4] = b"DREC";
const STORE_VERSION: u32 = 1;
const STORE_HEADER: usize = 4 + 4 + 4 + 8;

/// Unit-normalized vectors keyed by sentence or claim address, in
/// insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    keys: Vec<String>,
    vectors: Vec<Vec<f32>>,
    by_key: HashMap<String, usize>,
}

/// What [`EmbeddingStore::load`] had to skip.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: usize,
    pub corrupt: Vec<String>,
    pub truncated: bool,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Adds a vector, checking dimension and unit norm (1e-5). Replaces an
    /// existing entry with the same key in place.
    pub fn insert(&mut self, key: String, vector: EmbeddingVector<f32>) -> Result<()> {
        if vector.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                context: format!("store entry `{key}`"),
                expected: self.dim,
                found: vector.dim(),
            });
        }
        let norm = vector.norm();
        if !vector.is_normalized() || (norm - 1.0).abs() > 1e-5 {
            return Err(Error::NotNormalized { key, norm });
        }
        match self.by_key.get(&key) {
            Some(&i) => self.vectors[i] = vector.into_values(),
            None => {
                self.by_key.insert(key.clone(), self.keys.len());
                self.keys.push(key);
                self.vectors.push(vector.into_values());
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.by_key.get(key).map(|&i| self.vectors[i].as_slice())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.by_key.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.keys
            .iter()
            .map(String::as_str)
            .zip(self.vectors.iter().map(Vec::as_slice))
    }

    fn header(dim: usize, count: u64) -> Vec<u8> {
        let mut buf = Vec::with_capacity(STORE_HEADER);
        buf.extend_from_slice(STORE_MAGIC);
        buf.extend_from_slice(&STORE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
        buf.extend_from_slice(&count.to_le_bytes());
        buf
    }

    fn encode_record(key: &str, values: &[f32], out: &mut Vec<u8>) {
        out.extend_from_slice(&(key.len() as u32).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        for v in values {
            v.write_le(out);
        }
    }

    /// Writes the whole store atomically (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Self::header(self.dim, self.len() as u64);
        for (k, v) in self.iter() {
            Self::encode_record(k, v, &mut buf);
        }
        let tmp = tmp_path(path);
        fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Strict load: any damaged record is an error.
    pub fn load(path: &Path) -> Result<Self> {
        let (store, report) = Self::load_lenient(path)?;
        if report.truncated {
            return Err(Error::Truncated("embedding store"));
        }
        if let Some(key) = report.corrupt.first() {
            return Err(Error::Format {
                what: "embedding store",
                message: format!("corrupt entry `{key}`"),
            });
        }
        Ok(store)
    }

    /// Cache load: keeps every intact record, reports damaged ones (bad
    /// UTF-8 key, non-finite or non-unit vector) and a truncated tail.
    pub fn load_lenient(path: &Path) -> Result<(Self, LoadReport)> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < STORE_HEADER {
            return Err(Error::Truncated("embedding store"));
        }
        if &bytes[..4] != STORE_MAGIC {
            return Err(Error::Format {
                what: "embedding store",
                message: "bad magic".to_string(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != STORE_VERSION {
            return Err(Error::Format {
                what: "embedding store",
                message: format!("unsupported version {version}"),
            });
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let mut store = EmbeddingStore::new(dim);
        let mut report = LoadReport::default();
        let mut pos = STORE_HEADER;
        for _ in 0..count {
            if pos + 4 > bytes.len() {
                report.truncated = true;
                break;
            }
            let klen = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            let end = pos + 4 + klen + dim * 4;
            if end > bytes.len() {
                report.truncated = true;
                break;
            }
            let key_bytes = &bytes[pos + 4..pos + 4 + klen];
            let values: Vec<f32> = bytes[pos + 4 + klen..end]
                .chunks_exact(4)
                .map(f32::read_le)
                .collect();
            pos = end;
            let Ok(key) = std::str::from_utf8(key_bytes) else {
                report.corrupt.push(String::from_utf8_lossy(key_bytes).into_owned());
                continue;
            };
            let norm = l2_norm(&values);
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-5 || store.contains(key) {
                report.corrupt.push(key.to_string());
                continue;
            }
            store.insert(key.to_string(), EmbeddingVector::assume_normalized(values))?;
            report.loaded += 1;
        }
        Ok((store, report))
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Append-only writer used while a store is being filled. The header count
/// is rewritten after every flushed batch so an interrupted run leaves a
/// loadable partial cache.
struct StoreAppender {
    path: PathBuf,
    file: BufWriter<fs::File>,
    count: u64,
}

impl StoreAppender {
    fn create(path: &Path, dim: usize) -> Result<Self> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut file = BufWriter::new(file);
        file.write_all(&EmbeddingStore::header(dim, 0))
            .map_err(|e| Error::io(path, e))?;
        Ok(StoreAppender {
            path: path.to_path_buf(),
            file,
            count: 0,
        })
    }

    fn append(&mut self, entries: &[(String, Vec<f32>)]) -> Result<()> {
        let mut buf = Vec::new();
        for (k, v) in entries {
            EmbeddingStore::encode_record(k, v, &mut buf);
        }
        self.count += entries.len() as u64;
        let io = |e| Error::io(&self.path, e);
        self.file.write_all(&buf).map_err(io)?;
        self.file.flush().map_err(io)?;
        let f = self.file.get_mut();
        f.seek(SeekFrom::Start(12)).map_err(io)?;
        f.write_all(&self.count.to_le_bytes()).map_err(io)?;
        f.seek(SeekFrom::End(0)).map_err(io)?;
        f.flush().map_err(io)
    }
}

/// Optional per-role text prefixes (for instruction-tuned embedders).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbedOptions {
    pub claim_prefix: String,
    pub evidence_prefix: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbedCorpusReport {
    pub reused: usize,
    pub computed: usize,
    pub corrupt_recomputed: usize,
}

type Keyed = (String, Vec<f32>);

/// Embeds every claim and evidence sentence of `dataset`, reusing whatever
/// intact entries `cache_path` already holds. The finished store is written
/// back to `cache_path` in dataset order and returned.
pub fn embed_corpus<P: EmbeddingProvider + ?Sized>(
    provider: &P,
    dataset: &Dataset,
    cache_path: &Path,
    options: &EmbedOptions,
) -> Result<(EmbeddingStore, EmbedCorpusReport)> {
    let dim = provider.descriptor().dimension;
    let mut report = EmbedCorpusReport::default();
    let mut cached = EmbeddingStore::new(dim);
    if cache_path.exists() {
        let (store, load) = EmbeddingStore::load_lenient(cache_path)?;
        if store.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: format!("cache {}", cache_path.display()),
                expected: dim,
                found: store.dim(),
            });
        }
        if !load.corrupt.is_empty() || load.truncated {
            log::warn!(
                "cache {}: {} corrupt entries, truncated={}",
                cache_path.display(),
                load.corrupt.len(),
                load.truncated
            );
        }
        report.corrupt_recomputed = load.corrupt.len();
        cached = store;
    }

    let mut wanted: Vec<(String, String)> = Vec::new();
    let mut seen = HashSet::new();
    for claim in dataset.claims() {
        wanted.push((
            claim_key(&claim.id),
            format!("{}{}", options.claim_prefix, claim.text),
        ));
    }
    for s in dataset.all_sentences() {
        wanted.push((
            s.address().key(),
            format!("{}{}", options.evidence_prefix, s.text),
        ));
    }
    wanted.retain(|(k, _)| seen.insert(k.clone()));

    let missing: Vec<&(String, String)> =
        wanted.iter().filter(|(k, _)| !cached.contains(k)).collect();
    report.reused = wanted.len() - missing.len();

    if !missing.is_empty() {
        // Rewrite the cache with the intact entries, then append as we go.
        let mut appender = StoreAppender::create(cache_path, dim)?;
        let existing: Vec<(String, Vec<f32>)> = cached
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_vec()))
            .collect();
        appender.append(&existing)?;

        let batch = provider.descriptor().max_batch.max(1);
        let window = batch * rayon::current_num_threads().max(1);
        for group in missing.chunks(window) {
            let results: Vec<Result<Vec<Keyed>>> = group
                .par_chunks(batch)
                .map(|chunk| {
                    let texts: Vec<&str> = chunk.iter().map(|(_, t)| t.as_str()).collect();
                    let vectors = embed_batch(provider, &texts)?;
                    chunk
                        .iter()
                        .zip(vectors)
                        .map(|((key, _), v)| Ok((key.clone(), v.normalized(key)?.into_values())))
                        .collect()
                })
                .collect();
            for r in results {
                let entries = r?;
                appender.append(&entries)?;
                for (k, v) in entries {
                    cached.insert(k, EmbeddingVector::assume_normalized(v))?;
                    report.computed += 1;
                }
            }
        }
    }

    let mut store = EmbeddingStore::new(dim);
    for (key, _) in &wanted {
        let v = cached.get(key).expect("every wanted key embedded").to_vec();
        store.insert(key.clone(), EmbeddingVector::assume_normalized(v))?;
    }
    if report.computed > 0 || cached.len() != store.len() || !cache_path.exists() {
        store.save(cache_path)?;
    }
    Ok((store, report))
}
