//! Veracity prediction: classifier input construction, pooled evidence
//! features, a trainable softmax head, and the remote classifier client.

use std::fs;
use std::path::Path;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{LabelScheme, VeracityLabel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// Default length budget in units (whitespace tokens plus markers).
pub const DEFAULT_MAX_LEN: usize = 512;

/// Claim followed by ranked evidence:
/// `[CLS] claim [SEP] e1 [SEP] ... ek [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifierInput {
    pub claim_id: String,
    pub claim: String,
    /// Evidence texts in retrieval rank order, after truncation.
    pub evidence: Vec<String>,
    pub truncated: bool,
    /// Set when the claim had no evidence to begin with.
    pub evidence_absent: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment<'a> {
    Cls,
    Sep,
    Text(&'a str),
}

impl ClassifierInput {
    pub fn segments(&self) -> Vec<Segment<'_>> {
        let mut out = vec![Segment::Cls, Segment::Text(&self.claim), Segment::Sep];
        for e in &self.evidence {
            out.push(Segment::Text(e));
            out.push(Segment::Sep);
        }
        out
    }

    pub fn render(&self) -> String {
        self.segments()
            .iter()
            .map(|s| match s {
                Segment::Cls => CLS,
                Segment::Sep => SEP,
                Segment::Text(t) => t,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Length in units: one per marker plus one per whitespace token.
    pub fn len_units(&self) -> usize {
        2 + units(&self.claim) + self.evidence.iter().map(|e| units(e) + 1).sum::<usize>()
    }
}

fn units(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Lays out claim and evidence, dropping whole evidence items from the tail
/// until the sequence fits `max_len` units. The claim itself is never cut.
pub fn build_input(
    claim_id: &str,
    claim: &str,
    evidence: &[&str],
    max_len: usize,
) -> ClassifierInput {
    let mut used = 2 + units(claim);
    let mut kept = Vec::with_capacity(evidence.len());
    for e in evidence {
        let cost = units(e) + 1;
        if used + cost > max_len {
            break;
        }
        used += cost;
        kept.push(e.to_string());
    }
    ClassifierInput {
        claim_id: claim_id.to_string(),
        claim: claim.to_string(),
        truncated: kept.len() < evidence.len(),
        evidence: kept,
        evidence_absent: evidence.is_empty(),
    }
}

/// Describes [`pool_features`] in model files.
pub const FEATURE_SPEC: &str = "concat(claim, score-weighted evidence mean, claim*mean); \
weights = max(score, 0) normalized, uniform if all zero; zero mean if no evidence";

/// Pools a claim vector and its retrieved evidence into one `3d` feature
/// vector: `[claim, mean, claim ⊙ mean]`, where `mean` is the evidence
/// average weighted by non-negative retrieval scores.
pub fn pool_features<T: Scalar>(claim: &[T], evidence: &[(&[T], f64)]) -> Result<Vec<T>> {
    let d = claim.len();
    if let Some((v, _)) = evidence.iter().find(|(v, _)| v.len() != d) {
        return Err(Error::DimensionMismatch {
            context: "evidence vector".to_string(),
            expected: d,
            found: v.len(),
        });
    }
    let mut mean = vec![0.0f64; d];
    if !evidence.is_empty() {
        let clamped: Vec<f64> = evidence.iter().map(|(_, s)| s.max(0.0)).collect();
        let total: f64 = clamped.iter().sum();
        let weights: Vec<f64> = if total > 0.0 {
            clamped.iter().map(|w| w / total).collect()
        } else {
            vec![1.0 / evidence.len() as f64; evidence.len()]
        };
        for ((v, _), w) in evidence.iter().zip(&weights) {
            for (m, x) in mean.iter_mut().zip(v.iter()) {
                *m += w * x.to_f64_lossless();
            }
        }
    }
    let mut out = Vec::with_capacity(3 * d);
    out.extend_from_slice(claim);
    out.extend(mean.iter().map(|&m| T::from_f64_rounded(m)));
    out.extend(
        claim
            .iter()
            .zip(&mean)
            .map(|(c, m)| T::from_f64_rounded(c.to_f64_lossless() * m)),
    );
    Ok(out)
}

/// Numerically stable softmax (max-shifted).
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// First index of the maximum; earlier (scheme-order) labels win ties.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct VeracityPrediction {
    pub claim_id: String,
    pub distribution: Vec<f64>,
    pub predicted: VeracityLabel,
}

impl VeracityPrediction {
    pub fn from_distribution(claim_id: &str, scheme: LabelScheme, distribution: Vec<f64>) -> Self {
        let predicted = scheme.label_at(argmax(&distribution));
        VeracityPrediction {
            claim_id: claim_id.to_string(),
            distribution,
            predicted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 0.1,
            batch_size: 32,
            l2: 0.0,
            seed: 5,
        }
    }
}

impl TrainConfig {
    pub fn digest(&self, feature_spec: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.update(feature_spec.as_bytes());
        h.finalize().into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Full-data loss after each epoch.
    pub epoch_losses: Vec<f64>,
    pub best_epoch: usize,
}

/// Linear softmax classifier `y = softmax(W h + b)` with `W: c × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead<T: Scalar = f64> {
    scheme: LabelScheme,
    dim: usize,
    /// Row-major `c × d`.
    weights: Vec<T>,
    bias: Vec<T>,
    pub feature_spec: String,
    pub seed: u64,
    pub config_digest: [u8; 32],
}

/// Gradient of the mean cross-entropy (plus L2 term) over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T: Scalar> {
    pub loss: f64,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> SoftmaxHead<T> {
    pub fn zeros(scheme: LabelScheme, dim: usize) -> Self {
        let c = scheme.class_count();
        SoftmaxHead {
            scheme,
            dim,
            weights: vec![T::zero(); c * dim],
            bias: vec![T::zero(); c],
            feature_spec: FEATURE_SPEC.to_string(),
            seed: 0,
            config_digest: [0; 32],
        }
    }

    pub fn from_parts(scheme: LabelScheme, dim: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        let c = scheme.class_count();
        if weights.len() != c * dim || bias.len() != c {
            return Err(Error::DimensionMismatch {
                context: "softmax head parameters".to_string(),
                expected: c * dim + c,
                found: weights.len() + bias.len(),
            });
        }
        Ok(SoftmaxHead {
            weights,
            bias,
            ..SoftmaxHead::zeros(scheme, dim)
        })
    }

    pub fn scheme(&self) -> LabelScheme {
        self.scheme
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    fn check_dim(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "classifier features".to_string(),
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_dim(x)?;
        Ok(self
            .weights
            .chunks_exact(self.dim.max(1))
            .take(self.classes())
            .zip(&self.bias)
            .map(|(row, &b)| {
                let z: f64 = row
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w.to_f64_lossless() * v.to_f64_lossless())
                    .sum();
                T::from_f64_rounded(z) + b
            })
            .collect())
    }

    pub fn predict_proba(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(softmax(&self.logits(x)?))
    }

    pub fn predict(&self, claim_id: &str, x: &[T]) -> Result<VeracityPrediction> {
        let dist = self
            .predict_proba(x)?
            .into_iter()
            .map(|p| p.to_f64_lossless())
            .collect();
        Ok(VeracityPrediction::from_distribution(claim_id, self.scheme, dist))
    }

    /// Mean cross-entropy `-(1/B) Σ log p[y]` plus `l2/2 ‖W‖²`.
    pub fn loss(&self, xs: &[Vec<T>], ys: &[usize], l2: f64) -> Result<f64> {
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let p = self.predict_proba(x)?;
            total -= p[y].to_f64_lossless().ln();
        }
        Ok(total / xs.len().max(1) as f64 + 0.5 * l2 * self.weight_norm_sq())
    }

    fn weight_norm_sq(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| w.to_f64_lossless().powi(2))
            .sum()
    }

    /// Analytic gradient: `∂L/∂W = (1/B) Σ (p - onehot(y)) xᵀ + l2 W`,
    /// `∂L/∂b = (1/B) Σ (p - onehot(y))`.
    pub fn gradient(&self, xs: &[Vec<T>], ys: &[usize], l2: f64) -> Result<Gradient<T>> {
        let c = self.classes();
        let d = self.dim;
        let n = xs.len().max(1) as f64;
        let mut gw = vec![0.0f64; c * d];
        let mut gb = vec![0.0f64; c];
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            if y >= c {
                return Err(Error::InvalidArgument(format!("class index {y} out of range")));
            }
            let p = self.predict_proba(x)?;
            loss -= p[y].to_f64_lossless().ln();
            for k in 0..c {
                let delta = p[k].to_f64_lossless() - if k == y { 1.0 } else { 0.0 };
                gb[k] += delta;
                for (g, v) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                    *g += delta * v.to_f64_lossless();
                }
            }
        }
        let weights = gw
            .iter()
            .zip(&self.weights)
            .map(|(g, w)| T::from_f64_rounded(g / n + l2 * w.to_f64_lossless()))
            .collect();
        let bias = gb.iter().map(|g| T::from_f64_rounded(g / n)).collect();
        Ok(Gradient {
            loss: loss / n + 0.5 * l2 * self.weight_norm_sq(),
            weights,
            bias,
        })
    }

    fn step(&mut self, g: &Gradient<T>, lr: T) {
        for (w, gw) in self.weights.iter_mut().zip(&g.weights) {
            *w = *w - lr * *gw;
        }
        for (b, gb) in self.bias.iter_mut().zip(&g.bias) {
            *b = *b - lr * *gb;
        }
    }

    /// Mini-batch gradient descent from zero-initialized parameters.
    ///
    /// Batches follow a per-epoch shuffle drawn from `config.seed`, so the
    /// result is bit-identical across runs. The parameters of the epoch with
    /// the lowest full-data loss are returned (never worse than the start).
    pub fn train(
        scheme: LabelScheme,
        xs: &[Vec<T>],
        labels: &[VeracityLabel],
        config: &TrainConfig,
    ) -> Result<(Self, TrainReport)> {
        if xs.len() != labels.len() {
            return Err(Error::LengthMismatch {
                left: labels.len(),
                right: xs.len(),
            });
        }
        let Some(first) = xs.first() else {
            return Err(Error::MissingClass(scheme.labels()[0].to_string()));
        };
        let dim = first.len();
        let ys: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        for (i, name) in scheme.labels().iter().enumerate() {
            if !ys.contains(&i) {
                return Err(Error::MissingClass(name.to_string()));
            }
        }
        if config.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".to_string()));
        }

        let mut model = SoftmaxHead::zeros(scheme, dim);
        model.seed = config.seed;
        model.config_digest = config.digest(FEATURE_SPEC);
        let initial_loss = model.loss(xs, &ys, config.l2)?;
        let mut best = (initial_loss, model.clone(), 0usize);
        let mut epoch_losses = Vec::with_capacity(config.epochs);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let lr = T::from_f64_rounded(config.learning_rate);
        let mut step = 0;
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            for (batch, ids) in order.chunks(config.batch_size).enumerate() {
                let bx: Vec<Vec<T>> = ids.iter().map(|&i| xs[i].clone()).collect();
                let by: Vec<usize> = ids.iter().map(|&i| ys[i]).collect();
                let g = model.gradient(&bx, &by, config.l2)?;
                if !g.loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch, step });
                }
                model.step(&g, lr);
                step += 1;
            }
            let loss = model.loss(xs, &ys, config.l2)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: order.len().div_ceil(config.batch_size),
                    step,
                });
            }
            epoch_losses.push(loss);
            if loss < best.0 {
                best = (loss, model.clone(), epoch + 1);
            }
        }
        let (final_loss, model, best_epoch) = best;
        Ok((
            model,
            TrainReport {
                initial_loss,
                final_loss,
                epoch_losses,
                best_epoch,
            },
        ))
    }
}

const HEAD_MAGIC: &[u8; 4] = b"DRHD";
const HEAD_VERSION: u32 = 1;

impl<T: Scalar> SoftmaxHead<T> {
    /// `DRHD`, version u32, scheme u8 (3|6), d u32, W row-major f64, b f64,
    /// seed u64, 32-byte training-config digest, feature spec (u32 len + UTF-8).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(HEAD_MAGIC);
        b.extend_from_slice(&HEAD_VERSION.to_le_bytes());
        b.push(self.classes() as u8);
        b.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for w in self.weights.iter().chain(&self.bias) {
            w.to_f64_lossless().write_le(&mut b);
        }
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&self.config_digest);
        b.extend_from_slice(&(self.feature_spec.len() as u32).to_le_bytes());
        b.extend_from_slice(self.feature_spec.as_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format {
            what: "model",
            message: m.to_string(),
        };
        if bytes.len() < 13 {
            return Err(Error::Truncated("model"));
        }
        if &bytes[..4] != HEAD_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != HEAD_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let scheme = match bytes[8] {
            3 => LabelScheme::ThreeClass,
            6 => LabelScheme::SixClass,
            other => return Err(bad(&format!("unknown scheme {other}"))),
        };
        let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let c = scheme.class_count();
        let params = (c * dim + c) * 8;
        let mut pos = 13;
        let need = pos + params + 8 + 32 + 4;
        if bytes.len() < need {
            return Err(Error::Truncated("model"));
        }
        let values: Vec<T> = bytes[pos..pos + params]
            .chunks_exact(8)
            .map(|ch| T::from_f64_rounded(f64::read_le(ch)))
            .collect();
        pos += params;
        let seed = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        pos += 8;
        let config_digest: [u8; 32] = bytes[pos..pos + 32].try_into().unwrap();
        pos += 32;
        let slen = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if bytes.len() != pos + slen {
            return Err(if bytes.len() < pos + slen {
                Error::Truncated("model")
            } else {
                bad("trailing bytes")
            });
        }
        let feature_spec = std::str::from_utf8(&bytes[pos..])
            .map_err(|_| bad("feature spec is not UTF-8"))?
            .to_string();
        let (weights, bias) = values.split_at(c * dim);
        Ok(SoftmaxHead {
            scheme,
            dim,
            weights: weights.to_vec(),
            bias: bias.to_vec(),
            feature_spec,
            seed,
            config_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Serialize)]
struct ClassifyRequest<'a> {
    claim: &'a str,
    evidence: &'a [String],
    scheme: &'a str,
}

#[derive(Deserialize)]
struct ClassifyResponse {
    #[serde(default)]
    distribution: Option<Vec<f64>>,
    #[serde(default)]
    logits: Option<Vec<f64>>,
    #[serde(default)]
    label: Option<String>,
}

/// Client for a fine-tuned encoder service:
/// POST `{"claim", "evidence": [...], "scheme": "3"|"6"}` ->
/// `{"distribution": [...], "label": "..."}`. A response carrying `logits`
/// instead of `distribution` is softmaxed locally.
pub struct RemoteClassifier {
    endpoint: String,
    scheme: LabelScheme,
    client: reqwest::blocking::Client,
    retries: usize,
}

impl RemoteClassifier {
    pub fn new(endpoint: &str, scheme: LabelScheme, timeout: Duration, retries: usize) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Provider(e.to_string()))?;
        Ok(RemoteClassifier {
            endpoint: endpoint.to_string(),
            scheme,
            client,
            retries,
        })
    }

    pub fn predict_one(&self, input: &ClassifierInput) -> Result<VeracityPrediction> {
        let req = ClassifyRequest {
            claim: &input.claim,
            evidence: &input.evidence,
            scheme: self.scheme.code(),
        };
        let resp: ClassifyResponse =
            crate::http::post_json(&self.client, &self.endpoint, &req, self.retries)?;
        let c = self.scheme.class_count();
        let dist = match (resp.distribution, resp.logits) {
            (Some(d), _) => {
                let sum: f64 = d.iter().sum();
                if d.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-3 {
                    return Err(Error::Provider(format!(
                        "distribution is not a probability vector (sum {sum})"
                    )));
                }
                d.iter().map(|p| p / sum).collect::<Vec<_>>()
            }
            (None, Some(z)) => softmax(&z),
            (None, None) => {
                return Err(Error::Provider("response has neither distribution nor logits".into()))
            }
        };
        if dist.len() != c {
            return Err(Error::DimensionMismatch {
                context: "remote classifier distribution".to_string(),
                expected: c,
                found: dist.len(),
            });
        }
        let pred = VeracityPrediction::from_distribution(&input.claim_id, self.scheme, dist);
        if let Some(label) = resp.label {
            if self.scheme.label(&label).ok() != Some(pred.predicted) {
                log::debug!(
                    "remote label `{label}` differs from argmax `{}` for {}",
                    pred.predicted,
                    input.claim_id
                );
            }
        }
        Ok(pred)
    }

    pub fn predict(&self, inputs: &[ClassifierInput]) -> Result<Vec<VeracityPrediction>> {
        use rayon::prelude::*;
        inputs.par_iter().map(|i| self.predict_one(i)).collect()
    }
}
