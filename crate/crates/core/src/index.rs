//! Inner-product similarity search over unit vectors.
//!
//! [`VectorIndex`] comes in two kinds: an exact flat index that scores every
//! entry, and a clustered (inverted-list) index that scores only the
//! members of the `n_probe` clusters whose centroids are closest to the
//! query. [`brute_force_topk`] is the full-sort reference both are checked
//! against.
//!
//! Ranking is by score descending, ties broken by ascending insertion order.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::embed::EmbeddingVector;
use crate::error::{Error, Result};
use crate::scalar::{dot, l2_norm, Scalar};

/// Tolerance on `|‖v‖ - 1|` for vectors entering or querying an index.
pub const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterParams {
    pub n_clusters: usize,
    pub n_probe: usize,
    pub iterations: usize,
    pub seed: u64,
    /// k-means trains on at most `train_per_cluster * n_clusters` sampled points.
    pub train_per_cluster: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            n_clusters: 32,
            n_probe: 8,
            iterations: 20,
            seed: 0,
            train_per_cluster: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexKind {
    Flat,
    Clustered(ClusterParams),
}

impl IndexKind {
    pub fn name(&self) -> &'static str {
        match self {
            IndexKind::Flat => "flat",
            IndexKind::Clustered(_) => "clustered",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub key: String,
    /// Cosine similarity (inner product of unit vectors).
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Clustering<T: Scalar> {
    n_probe: usize,
    /// `n_clusters * dim`, row-major, unit rows.
    centroids: Vec<T>,
    /// Entry ids per cluster, ascending.
    lists: Vec<Vec<u32>>,
    /// Copies of member vectors laid out cluster by cluster, so a probe
    /// scans contiguous memory. Derived from `lists`; never serialized.
    packed: Vec<T>,
    /// Start of each cluster in `packed`, in vectors; `n_clusters + 1` long.
    offsets: Vec<usize>,
}

impl<T: Scalar> Clustering<T> {
    fn new(n_probe: usize, centroids: Vec<T>, lists: Vec<Vec<u32>>, data: &[T], dim: usize) -> Self {
        let mut packed = Vec::with_capacity(data.len());
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        for list in &lists {
            for &id in list {
                let id = id as usize;
                packed.extend_from_slice(&data[id * dim..(id + 1) * dim]);
            }
            offsets.push(offsets.last().unwrap() + list.len());
        }
        Clustering {
            n_probe,
            centroids,
            lists,
            packed,
            offsets,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex<T: Scalar = f32> {
    dim: usize,
    keys: Vec<String>,
    data: Vec<T>,
    clustering: Option<Clustering<T>>,
}

/// Candidate ordering: greater is better (higher score, then lower id).
#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    id: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(&self.id))
    }
}

/// Bounded selection of the `k` best candidates.
struct TopK {
    k: usize,
    heap: BinaryHeap<Reverse<Candidate>>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn push(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(Reverse(c));
        } else if let Some(worst) = self.heap.peek() {
            if c > worst.0 {
                self.heap.pop();
                self.heap.push(Reverse(c));
            }
        }
    }

    fn into_sorted(self) -> Vec<Candidate> {
        let mut v: Vec<Candidate> = self.heap.into_iter().map(|r| r.0).collect();
        v.sort_by(|a, b| b.cmp(a));
        v
    }
}

fn check_unit<T: Scalar>(key: &str, v: &[T]) -> Result<()> {
    let norm = l2_norm(v);
    if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::NotNormalized {
            key: key.to_string(),
            norm,
        });
    }
    Ok(())
}

fn check_query<T: Scalar>(dim: usize, query: &[T], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".to_string()));
    }
    if query.len() != dim {
        return Err(Error::DimensionMismatch {
            context: "query".to_string(),
            expected: dim,
            found: query.len(),
        });
    }
    check_unit("<query>", query)
}

impl<T: Scalar> VectorIndex<T> {
    /// Empty flat index.
    pub fn new(dim: usize) -> Self {
        VectorIndex {
            dim,
            keys: Vec::new(),
            data: Vec::new(),
            clustering: None,
        }
    }

    /// Builds an index from `(key, unit vector)` pairs in the given order.
    pub fn build(dim: usize, entries: &[(String, EmbeddingVector<T>)], kind: IndexKind) -> Result<Self> {
        let mut index = VectorIndex::new(dim);
        index.keys.reserve(entries.len());
        index.data.reserve(entries.len() * dim);
        let mut seen = HashSet::with_capacity(entries.len());
        for (key, v) in entries {
            if !seen.insert(key.as_str()) {
                return Err(Error::DuplicateKey(key.clone()));
            }
            index.push_unchecked_dup(key, v.values())?;
        }
        if let IndexKind::Clustered(params) = kind {
            index.clustering = Some(index.train_clusters(params)?);
        }
        Ok(index)
    }

    /// Appends one entry to a flat index.
    pub fn add(&mut self, key: &str, v: &EmbeddingVector<T>) -> Result<()> {
        if self.clustering.is_some() {
            return Err(Error::InvalidArgument(
                "entries cannot be added to a built clustered index".to_string(),
            ));
        }
        if self.keys.iter().any(|k| k == key) {
            return Err(Error::DuplicateKey(key.to_string()));
        }
        self.push_unchecked_dup(key, v.values())
    }

    fn push_unchecked_dup(&mut self, key: &str, v: &[T]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: format!("index entry `{key}`"),
                expected: self.dim,
                found: v.len(),
            });
        }
        check_unit(key, v)?;
        self.keys.push(key.to_string());
        self.data.extend_from_slice(v);
        Ok(())
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

    pub fn kind_name(&self) -> &'static str {
        if self.clustering.is_some() {
            "clustered"
        } else {
            "flat"
        }
    }

    pub fn key(&self, id: usize) -> &str {
        &self.keys[id]
    }

    pub fn vector(&self, id: usize) -> &[T] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.keys
            .iter()
            .map(String::as_str)
            .zip(self.data.chunks_exact(self.dim.max(1)))
    }

    pub fn n_clusters(&self) -> usize {
        self.clustering.as_ref().map_or(0, |c| c.lists.len())
    }

    /// Entry ids of one cluster (clustered kind only).
    pub fn cluster_members(&self, cluster: usize) -> &[u32] {
        self.clustering
            .as_ref()
            .map_or(&[][..], |c| c.lists[cluster].as_slice())
    }

    pub fn set_n_probe(&mut self, n_probe: usize) {
        if let Some(c) = self.clustering.as_mut() {
            c.n_probe = n_probe.max(1);
        }
    }

    fn to_results(&self, picked: Vec<Candidate>) -> Vec<SearchResult> {
        picked
            .into_iter()
            .enumerate()
            .map(|(i, c)| SearchResult {
                key: self.keys[c.id].clone(),
                score: c.score,
                rank: i + 1,
            })
            .collect()
    }

    /// Top-`k` entries by inner product with `query`; `min(k, len)` results.
    pub fn search(&self, query: &[T], k: usize) -> Result<Vec<SearchResult>> {
        check_query(self.dim, query, k)?;
        let mut top = TopK::new(k);
        match &self.clustering {
            None => {
                for (id, v) in self.data.chunks_exact(self.dim).enumerate() {
                    top.push(Candidate {
                        score: dot(v, query),
                        id,
                    });
                }
            }
            Some(cl) => {
                let n_clusters = cl.lists.len();
                let mut probe = TopK::new(cl.n_probe.min(n_clusters));
                for (id, c) in cl.centroids.chunks_exact(self.dim).enumerate() {
                    probe.push(Candidate {
                        score: dot(c, query),
                        id,
                    });
                }
                for cluster in probe.into_sorted() {
                    let c = cluster.id;
                    let block = &cl.packed[cl.offsets[c] * self.dim..cl.offsets[c + 1] * self.dim];
                    for (&id, v) in cl.lists[c].iter().zip(block.chunks_exact(self.dim)) {
                        top.push(Candidate {
                            score: dot(v, query),
                            id: id as usize,
                        });
                    }
                }
            }
        }
        Ok(self.to_results(top.into_sorted()))
    }

    pub fn search_vector(&self, query: &EmbeddingVector<T>, k: usize) -> Result<Vec<SearchResult>> {
        self.search(query.values(), k)
    }

    /// Spherical k-means over a seeded sample, then assignment of every entry.
    fn train_clusters(&self, params: ClusterParams) -> Result<Clustering<T>> {
        let n = self.len();
        let dim = self.dim;
        if params.n_clusters == 0 {
            return Err(Error::InvalidArgument("n_clusters must be at least 1".to_string()));
        }
        let n_clusters = params.n_clusters.min(n.max(1));
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_train = n.min(params.train_per_cluster.max(1) * n_clusters);
        let train: Vec<usize> = order[..n_train].to_vec();

        if n == 0 {
            return Ok(Clustering::new(params.n_probe.max(1), Vec::new(), Vec::new(), &[], dim));
        }

        let mut centroids: Vec<f64> = train[..n_clusters]
            .iter()
            .flat_map(|&id| self.vector(id).iter().map(|x| x.to_f64_lossless()))
            .collect();

        let nearest = |centroids: &[f64], v: &[T]| -> (usize, f64) {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (c, row) in centroids.chunks_exact(dim).enumerate() {
                let s: f64 = row
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b.to_f64_lossless())
                    .sum();
                if s > best.1 {
                    best = (c, s);
                }
            }
            best
        };

        for _ in 0..params.iterations {
            let assign: Vec<(usize, f64)> = train
                .par_iter()
                .map(|&id| nearest(&centroids, self.vector(id)))
                .collect();
            let mut sums = vec![0.0f64; n_clusters * dim];
            let mut counts = vec![0usize; n_clusters];
            for (&id, &(c, _)) in train.iter().zip(&assign) {
                counts[c] += 1;
                for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(self.vector(id)) {
                    *s += x.to_f64_lossless();
                }
            }
            for c in 0..n_clusters {
                let row = &mut sums[c * dim..(c + 1) * dim];
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if counts[c] == 0 || norm == 0.0 {
                    counts[c] = 0;
                    continue;
                }
                row.iter_mut().for_each(|x| *x /= norm);
            }
            // Re-seed empty clusters from the largest cluster's farthest member.
            let mut taken = HashSet::new();
            for c in 0..n_clusters {
                if counts[c] != 0 {
                    continue;
                }
                let largest = (0..n_clusters)
                    .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                    .expect("at least one cluster");
                let farthest = train
                    .iter()
                    .zip(&assign)
                    .filter(|(id, (a, _))| *a == largest && !taken.contains(*id))
                    .min_by(|x, y| x.1 .1.total_cmp(&y.1 .1).then(x.0.cmp(y.0)))
                    .map(|(&id, _)| id);
                if let Some(id) = farthest {
                    taken.insert(id);
                    counts[largest] -= 1;
                    counts[c] = 1;
                    for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(self.vector(id)) {
                        *s = x.to_f64_lossless();
                    }
                }
            }
            centroids = sums;
        }

        let assign: Vec<usize> = (0..n)
            .into_par_iter()
            .map(|id| nearest(&centroids, self.vector(id)).0)
            .collect();
        let mut lists = vec![Vec::new(); n_clusters];
        for (id, c) in assign.into_iter().enumerate() {
            lists[c].push(id as u32);
        }
        Ok(Clustering::new(
            params.n_probe.max(1),
            centroids.into_iter().map(T::from_f64_rounded).collect(),
            lists,
            &self.data,
            dim,
        ))
    }
}

/// Exact top-`k` by scoring every vector and fully sorting.
pub fn brute_force_topk<T: Scalar>(
    vectors: &[(String, Vec<T>)],
    query: &[T],
    k: usize,
) -> Result<Vec<SearchResult>> {
    let dim = query.len();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".to_string()));
    }
    if let Some((key, v)) = vectors.iter().find(|(_, v)| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            context: format!("entry `{key}`"),
            expected: dim,
            found: v.len(),
        });
    }
    check_query(dim, query, k)?;
    let mut scored: Vec<(usize, f64)> = vectors
        .iter()
        .enumerate()
        .map(|(i, (_, v))| (i, dot(v, query)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(r, (i, score))| SearchResult {
            key: vectors[i].0.clone(),
            score,
            rank: r + 1,
        })
        .collect())
}

const INDEX_MAGIC: &[u8; 4] = b"DRIX";
const INDEX_VERSION: u32 = 1;
const KIND_FLAT: u8 = 0;
const KIND_CLUSTERED: u8 = 1;

fn checksum(body: &[u8]) -> u64 {
    let digest = Sha256::digest(body);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(Error::Truncated("index"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn scalars<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(T::BYTES).ok_or(Error::Truncated("index"))?)?;
        Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
    }
}

impl<T: Scalar> VectorIndex<T> {
    /// Serialized form: `DRIX`, version (u32), kind (u8), scalar width (u8),
    /// dim (u32), count (u64), entries (key len u32, key, dim scalars),
    /// optional centroid block, then a u64 checksum of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(24 + self.data.len() * T::BYTES + self.len() * 16);
        b.extend_from_slice(INDEX_MAGIC);
        b.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        b.push(if self.clustering.is_some() {
            KIND_CLUSTERED
        } else {
            KIND_FLAT
        });
        b.push(T::BYTES as u8);
        b.extend_from_slice(&(self.dim as u32).to_le_bytes());
        b.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (key, v) in self.entries() {
            b.extend_from_slice(&(key.len() as u32).to_le_bytes());
            b.extend_from_slice(key.as_bytes());
            v.iter().for_each(|x| x.write_le(&mut b));
        }
        if let Some(cl) = &self.clustering {
            b.extend_from_slice(&(cl.lists.len() as u32).to_le_bytes());
            b.extend_from_slice(&(cl.n_probe as u32).to_le_bytes());
            cl.centroids.iter().for_each(|x| x.write_le(&mut b));
            for list in &cl.lists {
                b.extend_from_slice(&(list.len() as u32).to_le_bytes());
                for id in list {
                    b.extend_from_slice(&id.to_le_bytes());
                }
            }
        }
        let sum = checksum(&b);
        b.extend_from_slice(&sum.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != INDEX_MAGIC {
            return Err(if bytes.len() < 4 {
                Error::Truncated("index")
            } else {
                Error::Format {
                    what: "index",
                    message: "bad magic".to_string(),
                }
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(Error::Format {
                what: "index",
                message: format!("version mismatch: file {version}, supported {INDEX_VERSION}"),
            });
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated("index"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(trailer.try_into().unwrap());
        let parsed = Self::parse_body(body);
        match parsed {
            Err(Error::Truncated(_)) => Err(Error::Truncated("index")),
            _ if checksum(body) != stored => Err(Error::Checksum("index")),
            other => other,
        }
    }

    fn parse_body(body: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes: body, pos: 8 };
        let kind = r.u8()?;
        let width = r.u8()? as usize;
        if width != T::BYTES {
            return Err(Error::Format {
                what: "index",
                message: format!("scalar width {width}, expected {}", T::BYTES),
            });
        }
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let mut index = VectorIndex::new(dim);
        for _ in 0..count {
            let klen = r.u32()? as usize;
            let key = std::str::from_utf8(r.take(klen)?)
                .map_err(|_| Error::Format {
                    what: "index",
                    message: "key is not UTF-8".to_string(),
                })?
                .to_string();
            let v = r.scalars::<T>(dim)?;
            index.keys.push(key);
            index.data.extend(v);
        }
        match kind {
            KIND_FLAT => {}
            KIND_CLUSTERED => {
                let n_clusters = r.u32()? as usize;
                let n_probe = r.u32()? as usize;
                let centroids = r.scalars::<T>(n_clusters * dim)?;
                let mut lists = Vec::with_capacity(n_clusters);
                for _ in 0..n_clusters {
                    let len = r.u32()? as usize;
                    let mut list = Vec::with_capacity(len.min(count));
                    for _ in 0..len {
                        let id = r.u32()?;
                        if id as usize >= count {
                            return Err(Error::Format {
                                what: "index",
                                message: format!("cluster member {id} out of range"),
                            });
                        }
                        list.push(id);
                    }
                    lists.push(list);
                }
                index.clustering = Some(Clustering::new(n_probe, centroids, lists, &index.data, dim));
            }
            other => {
                return Err(Error::Format {
                    what: "index",
                    message: format!("unknown kind byte {other}"),
                })
            }
        }
        if r.pos != body.len() {
            return Err(Error::Format {
                what: "index",
                message: "trailing bytes before checksum".to_string(),
            });
        }
        Ok(index)
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
