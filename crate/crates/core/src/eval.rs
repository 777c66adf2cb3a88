//! Classification metrics, stage runtime profiling and index scaling
//! benchmarks.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::corpus::{LabelScheme, VeracityLabel};
use crate::embed::EmbeddingVector;
use crate::error::{Error, Result};
use crate::index::{brute_force_topk, ClusterParams, IndexKind, SearchResult, VectorIndex};
use crate::scalar::l2_norm;

/// Rows are gold labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    #[serde(skip)]
    pub scheme: LabelScheme,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(scheme: LabelScheme) -> Self {
        let c = scheme.class_count();
        ConfusionMatrix {
            scheme,
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn from_pairs(
        scheme: LabelScheme,
        gold: &[VeracityLabel],
        predicted: &[VeracityLabel],
    ) -> Result<Self> {
        if gold.len() != predicted.len() {
            return Err(Error::LengthMismatch {
                left: gold.len(),
                right: predicted.len(),
            });
        }
        let mut m = ConfusionMatrix::new(scheme);
        for (g, p) in gold.iter().zip(predicted) {
            for l in [g, p] {
                if l.scheme() != scheme {
                    return Err(Error::UnknownLabel {
                        scheme: scheme.name().to_string(),
                        value: l.value().to_string(),
                    });
                }
            }
            m.counts[g.index()][p.index()] += 1;
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub scheme: String,
    pub n: usize,
    pub accuracy: f64,
    pub macro_p: f64,
    pub macro_r: f64,
    pub macro_f1: f64,
    pub per_label: Vec<LabelMetrics>,
    pub confusion: ConfusionMatrix,
}

/// Per-label and macro-averaged precision, recall and F1.
///
/// A label never predicted has precision 0; a label with no gold examples
/// has recall 0; F1 is 0 whenever P + R = 0. Macro values are unweighted
/// means over all labels of the scheme.
pub fn score(
    gold: &[VeracityLabel],
    predicted: &[VeracityLabel],
    scheme: LabelScheme,
) -> Result<EvaluationReport> {
    if gold.is_empty() {
        return Err(Error::InvalidArgument("nothing to score".to_string()));
    }
    Ok(report_from_confusion(ConfusionMatrix::from_pairs(
        scheme, gold, predicted,
    )?))
}

pub fn report_from_confusion(confusion: ConfusionMatrix) -> EvaluationReport {
    let c = confusion.scheme.class_count();
    let m = &confusion.counts;
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let per_label: Vec<LabelMetrics> = (0..c)
        .map(|k| {
            let tp = m[k][k];
            let predicted: usize = (0..c).map(|g| m[g][k]).sum();
            let support: usize = m[k].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            LabelMetrics {
                label: confusion.scheme.labels()[k].to_string(),
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let mean = |f: fn(&LabelMetrics) -> f64| per_label.iter().map(f).sum::<f64>() / c as f64;
    let n = confusion.total();
    EvaluationReport {
        scheme: confusion.scheme.name().to_string(),
        n,
        accuracy: ratio((0..c).map(|k| m[k][k]).sum(), n),
        macro_p: mean(|l| l.precision),
        macro_r: mean(|l| l.recall),
        macro_f1: mean(|l| l.f1),
        per_label,
        confusion,
    }
}

impl EvaluationReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8} {:>8}", "label", "P", "R", "F1", "support");
        for l in &self.per_label {
            let _ = writeln!(
                out,
                "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>8}",
                l.label,
                100.0 * l.precision,
                100.0 * l.recall,
                100.0 * l.f1,
                l.support
            );
        }
        let _ = writeln!(
            out,
            "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>8}",
            "macro",
            100.0 * self.macro_p,
            100.0 * self.macro_r,
            100.0 * self.macro_f1,
            self.n
        );
        out
    }
}

/// The three timed pipeline stages, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    EvidenceExtraction,
    EvidenceRetrieval,
    VeracityPrediction,
}

impl Stage {
    pub const ALL: [Stage; 3] = [
        Stage::EvidenceExtraction,
        Stage::EvidenceRetrieval,
        Stage::VeracityPrediction,
    ];

    pub fn title(self) -> &'static str {
        match self {
            Stage::EvidenceExtraction => "Evidence Extraction",
            Stage::EvidenceRetrieval => "Evidence Retrieval",
            Stage::VeracityPrediction => "Veracity Prediction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub name: &'static str,
    /// `None` if the stage never ran.
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuntimeReport {
    pub stages: Vec<StageTiming>,
    pub total_seconds: f64,
    pub complete: bool,
    pub failed_stage: Option<String>,
}

impl RuntimeReport {
    pub fn stage_seconds(&self, stage: Stage) -> Option<f64> {
        self.stages.iter().find(|s| s.stage == stage)?.seconds
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} | {:>10} | {:>12}", "Step", "Time", "Seconds");
        let _ = writeln!(out, "{}", "-".repeat(50));
        for s in &self.stages {
            let (t, secs) = match s.seconds {
                Some(x) => (minutes_seconds(x), format!("{x:.3}")),
                None => ("-".to_string(), "-".to_string()),
            };
            let _ = writeln!(out, "{:<22} | {:>10} | {:>12}", s.name, t, secs);
        }
        let _ = writeln!(out, "{}", "-".repeat(50));
        let _ = writeln!(
            out,
            "{:<22} | {:>10} | {:>12.3}",
            "Total Runtime",
            minutes_seconds(self.total_seconds),
            self.total_seconds
        );
        if !self.complete {
            let _ = writeln!(
                out,
                "INCOMPLETE: stage `{}` failed",
                self.failed_stage.as_deref().unwrap_or("?")
            );
        }
        out
    }
}

/// `"3m 50s"` style, rounding to whole seconds.
pub fn minutes_seconds(seconds: f64) -> String {
    let total = seconds.round() as u64;
    format!("{}m {}s", total / 60, total % 60)
}

/// Collects monotonic wall-clock timings for the three stages.
pub struct Profiler {
    started: Instant,
    timings: Vec<(Stage, Duration)>,
    failed: Option<Stage>,
}

impl Profiler {
    fn new() -> Self {
        Profiler {
            started: Instant::now(),
            timings: Vec::new(),
            failed: None,
        }
    }

    /// Runs and times one stage. A failure marks the run incomplete.
    pub fn stage<T>(&mut self, stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f();
        let elapsed = t0.elapsed();
        match out {
            Ok(v) => {
                self.timings.push((stage, elapsed));
                Ok(v)
            }
            Err(e) => {
                self.failed = Some(stage);
                Err(e.in_stage(stage.title()))
            }
        }
    }

    fn finish(self) -> RuntimeReport {
        let total = self.started.elapsed().as_secs_f64();
        let stages = Stage::ALL
            .iter()
            .map(|&stage| StageTiming {
                stage,
                name: stage.title(),
                seconds: self
                    .timings
                    .iter()
                    .filter(|(s, _)| *s == stage)
                    .map(|(_, d)| d.as_secs_f64())
                    .reduce(|a, b| a + b),
            })
            .collect();
        let complete = self.failed.is_none()
            && Stage::ALL
                .iter()
                .all(|s| self.timings.iter().any(|(t, _)| t == s));
        RuntimeReport {
            stages,
            total_seconds: total,
            complete,
            failed_stage: self.failed.map(|s| s.title().to_string()),
        }
    }
}

/// Runs `pipeline`, which times its stages through the given [`Profiler`].
/// The report is returned even when the pipeline fails.
pub fn profile_run<T>(
    pipeline: impl FnOnce(&mut Profiler) -> Result<T>,
) -> (RuntimeReport, Result<T>) {
    let mut profiler = Profiler::new();
    let out = pipeline(&mut profiler);
    (profiler.finish(), out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub n: usize,
    pub kind: String,
    pub build_seconds: f64,
    pub mean_latency_us: f64,
    pub queries: usize,
    /// Recall@k of this kind against exhaustive search (1.0 for flat).
    pub recall_at_k: f64,
    /// Clusters probed per query (clustered only).
    pub n_probe: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingTable {
    pub dim: usize,
    pub k: usize,
    pub rows: Vec<ScalingRow>,
}

impl ScalingTable {
    pub fn row(&self, n: usize, kind: &str) -> Option<&ScalingRow> {
        self.rows.iter().find(|r| r.n == n && r.kind == kind)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>9} | {:<9} | {:>10} | {:>14} | {:>9} | {:>6}",
            "n", "kind", "build (s)", "latency (us)", "recall@k", "probe"
        );
        let _ = writeln!(out, "{}", "-".repeat(72));
        for r in &self.rows {
            let probe = r.n_probe.map_or_else(|| "-".to_string(), |p| p.to_string());
            let _ = writeln!(
                out,
                "{:>9} | {:<9} | {:>10.3} | {:>14.1} | {:>9.3} | {:>6}",
                r.n, r.kind, r.build_seconds, r.mean_latency_us, r.recall_at_k, probe
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub dim: usize,
    pub k: usize,
    pub queries: usize,
    pub seed: u64,
    pub flat: bool,
    pub clustered: Option<ClusterParams>,
    /// When set, the clustered index's probe count is raised to the smallest
    /// value reaching this recall plus [`CALIBRATION_MARGIN`] on a separate
    /// set of calibration queries; the reported row is then measured on the
    /// main queries.
    pub target_recall: Option<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dim: 64,
            k: 10,
            queries: 100,
            seed: 0,
            flat: true,
            clustered: Some(ClusterParams::default()),
            target_recall: Some(0.9),
        }
    }
}

/// Headroom added to the recall target during probe calibration, absorbing
/// sampling noise between calibration and measurement queries.
pub const CALIBRATION_MARGIN: f64 = 0.02;

/// Uniform random unit vector (normalized Gaussian draw).
pub fn random_unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        if l2_norm(&v) > 1e-6 {
            return EmbeddingVector::new(v)
                .normalized("random")
                .expect("non-zero")
                .into_values();
        }
    }
}

fn exact_topk(raw: &[(String, Vec<f32>)], queries: &[Vec<f32>], k: usize) -> Result<Vec<Vec<String>>> {
    queries
        .iter()
        .map(|q| brute_force_topk(raw, q, k).map(|r| r.into_iter().map(|x| x.key).collect()))
        .collect()
}

fn recall(results: &[Vec<SearchResult>], truth: &[Vec<String>]) -> f64 {
    let hits: usize = results
        .iter()
        .zip(truth)
        .map(|(got, want)| got.iter().filter(|r| want.contains(&r.key)).count())
        .sum();
    hits as f64 / truth.iter().map(Vec::len).sum::<usize>().max(1) as f64
}

/// Smallest probe count (at least `floor`) whose recall on the calibration
/// queries reaches `target`. Recall is monotone in the probe count since a
/// larger probe scans a superset of candidates, so bisection suffices.
fn calibrate_probe(
    index: &mut VectorIndex<f32>,
    queries: &[Vec<f32>],
    truth: &[Vec<String>],
    k: usize,
    target: f64,
    floor: usize,
) -> Result<usize> {
    let clusters = index.n_clusters().max(1);
    let mut measure = |probe: usize| -> Result<f64> {
        index.set_n_probe(probe);
        let results = queries
            .iter()
            .map(|q| index.search(q, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(recall(&results, truth))
    };
    let (mut lo, mut hi) = (floor.clamp(1, clusters), clusters);
    if measure(lo)? >= target {
        return Ok(lo);
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if measure(mid)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Measures mean single-query search latency per corpus size and index kind
/// on random unit vectors. Recall is measured against [`brute_force_topk`].
pub fn bench_scaling(sizes: &[usize], config: &BenchConfig) -> Result<ScalingTable> {
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("sizes must be ascending".to_string()));
    }
    if config.queries == 0 || config.k == 0 {
        return Err(Error::InvalidArgument("queries and k must be positive".to_string()));
    }
    let mut rows = Vec::new();
    for &n in sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ n as u64);
        let corpus: Vec<(String, EmbeddingVector<f32>)> = (0..n)
            .map(|i| {
                (
                    format!("v{i}"),
                    EmbeddingVector::assume_normalized(random_unit_vector(&mut rng, config.dim)),
                )
            })
            .collect();
        let queries: Vec<Vec<f32>> = (0..config.queries)
            .map(|_| random_unit_vector(&mut rng, config.dim))
            .collect();
        let raw: Vec<(String, Vec<f32>)> = corpus
            .iter()
            .map(|(k, v)| (k.clone(), v.values().to_vec()))
            .collect();
        let truth = exact_topk(&raw, &queries, config.k)?;

        let mut kinds = Vec::new();
        if config.flat {
            kinds.push(IndexKind::Flat);
        }
        if let Some(p) = config.clustered {
            kinds.push(IndexKind::Clustered(ClusterParams {
                seed: config.seed,
                ..p
            }));
        }
        for kind in kinds {
            let t0 = Instant::now();
            let mut index = VectorIndex::build(config.dim, &corpus, kind)?;
            let build_seconds = t0.elapsed().as_secs_f64();
            let mut n_probe = None;
            if let IndexKind::Clustered(p) = kind {
                let probe = match config.target_recall {
                    Some(target) => {
                        let calib: Vec<Vec<f32>> = (0..config.queries)
                            .map(|_| random_unit_vector(&mut rng, config.dim))
                            .collect();
                        let calib_truth = exact_topk(&raw, &calib, config.k)?;
                        calibrate_probe(
                            &mut index,
                            &calib,
                            &calib_truth,
                            config.k,
                            (target + CALIBRATION_MARGIN).min(1.0),
                            p.n_probe,
                        )?
                    }
                    None => p.n_probe.min(index.n_clusters()),
                };
                index.set_n_probe(probe);
                n_probe = Some(probe);
            }
            let mut elapsed = Duration::ZERO;
            let mut results = Vec::with_capacity(queries.len());
            for q in &queries {
                let t = Instant::now();
                let got = index.search(q, config.k)?;
                elapsed += t.elapsed();
                results.push(got);
            }
            rows.push(ScalingRow {
                n,
                kind: kind.name().to_string(),
                build_seconds,
                mean_latency_us: elapsed.as_secs_f64() * 1e6 / config.queries as f64,
                queries: config.queries,
                recall_at_k: recall(&results, &truth),
                n_probe,
            });
        }
    }
    Ok(ScalingTable {
        dim: config.dim,
        k: config.k,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(s: LabelScheme, idx: &[usize]) -> Vec<VeracityLabel> {
        idx.iter().map(|&i| s.label_at(i)).collect()
    }

    #[test]
    fn perfect_predictions() {
        let s = LabelScheme::SixClass;
        let g = labels(s, &[0, 1, 2, 3, 4, 5, 5, 0]);
        let r = score(&g, &g, s).unwrap();
        assert_eq!((r.macro_p, r.macro_r, r.macro_f1), (1.0, 1.0, 1.0));
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn single_class_predictions() {
        let s = LabelScheme::ThreeClass;
        let g = labels(s, &[0, 1, 2]);
        let p = labels(s, &[1, 1, 1]);
        let r = score(&g, &p, s).unwrap();
        assert_eq!(r.per_label[1].precision, 1.0 / 3.0);
        assert_eq!(r.per_label[1].recall, 1.0);
        assert_eq!(r.per_label[1].f1, 0.5);
        assert_eq!(r.per_label[0].precision, 0.0);
        assert_eq!(r.per_label[0].f1, 0.0);
        assert_eq!(r.macro_p, 1.0 / 9.0);
        assert_eq!(r.macro_r, 1.0 / 3.0);
        assert_eq!(r.macro_f1, 0.5 / 3.0);
    }

    #[test]
    fn score_errors() {
        let s = LabelScheme::ThreeClass;
        assert!(matches!(
            score(&labels(s, &[0, 1]), &labels(s, &[0]), s),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(score(&[], &[], s).is_err());
        let six = labels(LabelScheme::SixClass, &[0]);
        assert!(matches!(
            score(&six, &six, s),
            Err(Error::UnknownLabel { .. })
        ));
    }

    #[test]
    fn minutes_seconds_format() {
        assert_eq!(minutes_seconds(230.2), "3m 50s");
        assert_eq!(minutes_seconds(0.4), "0m 0s");
    }

    #[test]
    fn profile_structure_and_failure() {
        let (report, out) = profile_run(|p| {
            p.stage(Stage::EvidenceExtraction, || Ok(()))?;
            p.stage(Stage::EvidenceRetrieval, || Ok(()))?;
            p.stage(Stage::VeracityPrediction, || Ok(7))
        });
        assert_eq!(out.unwrap(), 7);
        assert!(report.complete);
        assert_eq!(report.stages.len(), 3);
        let names: Vec<_> = report.stages.iter().map(|s| s.name).collect();
        assert_eq!(
            names,
            ["Evidence Extraction", "Evidence Retrieval", "Veracity Prediction"]
        );
        assert!(report.table().contains("Total Runtime"));

        let (report, out) = profile_run(|p| {
            p.stage(Stage::EvidenceExtraction, || Ok(()))?;
            p.stage(Stage::EvidenceRetrieval, || -> Result<()> {
                Err(Error::InvalidArgument("boom".into()))
            })?;
            p.stage(Stage::VeracityPrediction, || Ok(()))
        });
        assert!(matches!(out, Err(Error::Stage { stage, .. }) if stage == "Evidence Retrieval"));
        assert!(!report.complete);
        assert_eq!(report.failed_stage.as_deref(), Some("Evidence Retrieval"));
        assert_eq!(report.stages.len(), 3);
        assert!(report.stage_seconds(Stage::VeracityPrediction).is_none());
        assert!(report.table().contains("INCOMPLETE"));
    }

    #[test]
    fn single_size_bench() {
        let cfg = BenchConfig {
            dim: 8,
            queries: 5,
            clustered: None,
            ..Default::default()
        };
        let t = bench_scaling(&[200], &cfg).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].recall_at_k, 1.0);
        assert!(bench_scaling(&[10, 5], &cfg).is_err());
    }
}
