#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use derec::corpus::{self, LabelScheme, Split};
use serde_json::Value;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// Split counts (claims, reports, sentences) and label totals.
#[derive(Debug, PartialEq)]
pub struct CorpusCounts {
    pub splits: BTreeMap<&'static str, (usize, usize, usize)>,
    pub labels: BTreeMap<String, usize>,
}

pub fn counts_of(path: &Path, scheme: LabelScheme) -> derec::Result<CorpusCounts> {
    let ds = corpus::ingest(path, scheme)?;
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let s = corpus::stats(&ds, split)?;
        splits.insert(split.as_str(), (s.n_claims, s.n_reports, s.n_sentences));
    }
    let labels = corpus::label_distribution(&ds)
        .iter()
        .map(|(l, n)| (l.to_string(), n))
        .collect();
    Ok(CorpusCounts { splits, labels })
}

pub fn expected_counts(json: &Value) -> CorpusCounts {
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let s = &json["splits"][split.as_str()];
        let n = |k: &str| s[k].as_u64().unwrap() as usize;
        splits.insert(split.as_str(), (n("claims"), n("reports"), n("sentences")));
    }
    let labels = json["labels"]
        .as_object()
        .unwrap()
        .iter()
        .map(|(k, v)| (k.clone(), v.as_u64().unwrap() as usize))
        .collect();
    CorpusCounts { splits, labels }
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Published corpus statistics (claims, reports, sentences per split; label totals).
pub fn published_rawfc() -> CorpusCounts {
    CorpusCounts {
        splits: BTreeMap::from([
            ("train", (1612, 33862, 248343)),
            ("val", (200, 4127, 31191)),
            ("test", (200, 4278, 31453)),
        ]),
        labels: BTreeMap::from([
            ("false".to_string(), 646),
            ("half-true".to_string(), 671),
            ("true".to_string(), 695),
        ]),
    }
}

pub fn published_liar_raw() -> CorpusCounts {
    CorpusCounts {
        splits: BTreeMap::from([
            ("train", (10065, 114721, 626573)),
            ("val", (1274, 18243, 102147)),
            ("test", (1251, 21408, 118449)),
        ]),
        labels: BTreeMap::from([
            ("pants-fire".to_string(), 1013),
            ("false".to_string(), 2466),
            ("barely-true".to_string(), 2057),
            ("half-true".to_string(), 2594),
            ("mostly-true".to_string(), 2439),
            ("true".to_string(), 2021),
        ]),
    }
}

/// Corpora to check: the real ones when their directories are given through
/// `RAWFC_DIR` / `LIAR_RAW_DIR`, otherwise the bundled miniatures.
pub fn corpus_cases() -> Vec<(String, PathBuf, LabelScheme, CorpusCounts)> {
    let mut cases = Vec::new();
    match std::env::var_os("RAWFC_DIR") {
        Some(dir) => cases.push(("RAWFC".into(), dir.into(), LabelScheme::ThreeClass, published_rawfc())),
        None => {
            let dir = fixture("mini_rawfc");
            let want = expected_counts(&read_json(&dir.join("expected.json")));
            cases.push(("mini RAWFC".into(), dir, LabelScheme::ThreeClass, want));
        }
    }
    match std::env::var_os("LIAR_RAW_DIR") {
        Some(dir) => cases.push(("LIAR-RAW".into(), dir.into(), LabelScheme::SixClass, published_liar_raw())),
        None => {
            let dir = fixture("mini_liar");
            let want = expected_counts(&read_json(&dir.join("expected.json")));
            cases.push(("mini LIAR-RAW".into(), dir, LabelScheme::SixClass, want));
        }
    }
    cases
}

/// One-thread-per-connection HTTP stub answering every POST with
/// `handler(request_body) -> (status, json_body)`.
pub struct Stub {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
}

impl Stub {
    pub fn spawn<F>(handler: F) -> Stub
    where
        F: Fn(&Value) -> (u16, String) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let handler = Arc::new(handler);
        let counter = hits.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let handler = handler.clone();
                let counter = counter.clone();
                thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut len = 0usize;
                    let mut line = String::new();
                    loop {
                        line.clear();
                        if reader.read_line(&mut line).unwrap_or(0) == 0 {
                            return;
                        }
                        let l = line.trim_end();
                        if l.is_empty() {
                            break;
                        }
                        if let Some((k, v)) = l.split_once(':') {
                            if k.eq_ignore_ascii_case("content-length") {
                                len = v.trim().parse().unwrap_or(0);
                            }
                        }
                    }
                    let mut body = vec![0u8; len];
                    if reader.read_exact(&mut body).is_err() {
                        return;
                    }
                    let n = counter.fetch_add(1, Ordering::SeqCst);
                    let req: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
                    let (status, resp) = handler(&serde_json::json!({"n": n, "body": req}));
                    let _ = write!(
                        stream,
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{resp}",
                        resp.len()
                    );
                });
            }
        });
        Stub { url, hits }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

/// An address on which nothing listens.
pub fn dead_endpoint() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}/")
}

/// Linearly separable three-class set: labels are the argmax of three fixed
/// linear scores, and points within `margin` of a decision boundary are
/// rejected.
pub fn separable_fixture(
    n: usize,
    dim: usize,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<derec::corpus::VeracityLabel>) {
    use rand::{Rng, SeedableRng};
    let scheme = LabelScheme::ThreeClass;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    while xs.len() < n {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut s: Vec<(f64, usize)> = dirs
            .iter()
            .enumerate()
            .map(|(k, d)| (d.iter().zip(&x).map(|(a, b)| a * b).sum(), k))
            .collect();
        s.sort_by(|a, b| b.0.total_cmp(&a.0));
        if s[0].0 - s[1].0 < 0.3 {
            continue;
        }
        // Keep classes balanced so every label is present.
        if ys.iter().filter(|l: &&derec::corpus::VeracityLabel| l.index() == s[0].1).count() >= n.div_ceil(3) {
            continue;
        }
        xs.push(x);
        ys.push(scheme.label_at(s[0].1));
    }
    (xs, ys)
}

/// Config running the full pipeline on a generated three-class corpus with
/// the built-in hash embedder and softmax head.
pub fn synthetic_pipeline(dir: &Path, claims: usize, seed: u64) -> derec::pipeline::PipelineConfig {
    let ds = derec::synth::generate(&derec::synth::SynthConfig {
        claims,
        ..Default::default()
    })
    .unwrap();
    let data = dir.join("synthetic.jsonl");
    corpus::write_canonical(&ds, &data).unwrap();
    let mut cfg = derec::pipeline::PipelineConfig::new(&data, LabelScheme::ThreeClass);
    cfg.seed = seed;
    cfg.out = dir.join("out");
    cfg.validated().unwrap()
}
