use std::path::Path;

use derec::corpus::{claim_key, Dataset, LabelScheme, Split};
use derec::embed::{embed_corpus, EmbedOptions, EmbeddingStore, HashEmbedder};
use derec::index::{brute_force_topk, ClusterParams, IndexKind};
use derec::retrieve::{self, read_evidence, write_evidence, Retriever, Scope};
use derec::synth::{self, SynthConfig};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn embed(ds: &Dataset, dir: &Path) -> EmbeddingStore {
    embed_dim(ds, dir, 128)
}

fn embed_dim(ds: &Dataset, dir: &Path, dim: usize) -> EmbeddingStore {
    let e = HashEmbedder::new(dim, 0);
    embed_corpus(&e, ds, &dir.join("e.drec"), &EmbedOptions::default()).unwrap().0
}

const WORDS: &[&str] = &[
    "river", "orchard", "copper", "lantern", "meadow", "harbor", "violet", "granite", "tundra",
    "canyon", "ember", "saddle", "quartz", "willow", "falcon", "marble", "prairie", "glacier",
];

/// One claim with 30 sentences: 10 share words with the claim, 20 do not.
fn planted_fixture() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let claim = "minimum wage increase cut jobs in the restaurant sector";
    let claim_words: Vec<&str> = claim.split(' ').collect();
    let mut sentences = Vec::new();
    for i in 0..30 {
        let mut words: Vec<&str> = WORDS.choose_multiple(&mut rng, 6).copied().collect();
        if i % 3 == 0 {
            words.extend(claim_words.choose_multiple(&mut rng, 3));
        }
        words.shuffle(&mut rng);
        sentences.push(words.join(" "));
    }
    let mut ds = Dataset::new(LabelScheme::ThreeClass);
    let reports = vec![("r0".to_string(), sentences[..15].to_vec()), ("r1".to_string(), sentences[15..].to_vec())];
    ds.push_claim("c0", claim, LabelScheme::ThreeClass.label_at(0), Split::Test, reports)
        .unwrap();
    ds
}

#[test]
fn planted_fixture_matches_exhaustive_scan() {
    let ds = planted_fixture();
    let dir = tempfile::tempdir().unwrap();
    // Wide enough that bucket collisions stay below the planted overlap.
    let store = embed_dim(&ds, dir.path(), 1024);
    let set = retrieve::retrieve_evidence(&ds, &store, "c0", 10, Scope::PerClaim).unwrap();
    let raw: Vec<(String, Vec<f32>)> = ds
        .all_sentences()
        .map(|s| (s.address().key(), store.get(&s.address().key()).unwrap().to_vec()))
        .collect();
    let query = store.get(&claim_key("c0")).unwrap();
    let oracle = brute_force_topk(&raw, query, 10).unwrap();
    let got: Vec<String> = set.items.iter().map(|i| i.addr.key()).collect();
    let want: Vec<String> = oracle.iter().map(|r| r.key.clone()).collect();
    assert_eq!(got, want);
    // The planted sentences (every third) dominate the ranking.
    let claim_words: Vec<&str> = ds.claims()[0].text.split(' ').collect();
    let planted = |t: &str| t.split(' ').any(|w| claim_words.contains(&w));
    let top: Vec<bool> = set.items.iter().map(|i| planted(&i.text)).collect();
    assert_eq!(top, [vec![true; 10]].concat(), "{:?}", set.texts());
}

#[test]
fn one_evidence_set_per_claim() {
    let ds = synth::generate(&SynthConfig { claims: 200, ..SynthConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = embed(&ds, dir.path());
    let (sets, _) = retrieve::retrieve_all(&ds, &store, 10, Scope::PerClaim).unwrap();
    assert_eq!(sets.len(), 200);
    for (set, claim) in sets.iter().zip(ds.claims()) {
        assert_eq!(set.claim_id, claim.id);
        let idx = ds.claim_index(&claim.id).unwrap();
        assert_eq!(set.items.len(), ds.sentence_count(idx).min(10));
        assert!(set.items.iter().all(|i| i.addr.claim_id == claim.id));
        assert!(set.items.windows(2).all(|w| w[0].score >= w[1].score));
    }
    let path = dir.path().join("ev.jsonl");
    write_evidence(&path, &sets).unwrap();
    assert_eq!(read_evidence(&path).unwrap(), sets);
}

#[test]
fn global_scope_crosses_claims_per_claim_does_not() {
    let mut ds = Dataset::new(LabelScheme::ThreeClass);
    let label = LabelScheme::ThreeClass.label_at(2);
    ds.push_claim(
        "a",
        "solar panels doubled farm income",
        label,
        Split::Test,
        vec![("ra".to_string(), vec!["The weather was mild on tuesday.".to_string()])],
    )
    .unwrap();
    ds.push_claim(
        "b",
        "the bridge was closed for repairs",
        label,
        Split::Test,
        vec![(
            "rb".to_string(),
            vec!["Solar panels doubled farm income last year.".to_string(), "The bridge reopened.".to_string()],
        )],
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = embed(&ds, dir.path());
    let global = retrieve::retrieve_evidence(&ds, &store, "a", 1, Scope::Global).unwrap();
    assert_eq!(global.items[0].addr.claim_id, "b");
    assert_eq!(global.items[0].text, "Solar panels doubled farm income last year.");
    let local = retrieve::retrieve_evidence(&ds, &store, "a", 10, Scope::PerClaim).unwrap();
    assert!(local.items.iter().all(|i| i.addr.claim_id == "a"));
    assert!(local.shortfall());

    let path = dir.path().join("ev.jsonl");
    write_evidence(&path, std::slice::from_ref(&global)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"source_claim_id\":\"b\""), "{text}");
    assert_eq!(read_evidence(&path).unwrap(), vec![global]);
}

#[test]
fn clustered_global_index_with_full_probe_equals_flat() {
    let ds = synth::generate(&SynthConfig { claims: 40, ..SynthConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = embed(&ds, dir.path());
    let params = ClusterParams { n_clusters: 8, n_probe: 8, ..ClusterParams::default() };
    let index = retrieve::sentence_index(&ds, &store, IndexKind::Clustered(params)).unwrap();
    let clustered = Retriever::with_index(&ds, &store, index).unwrap().retrieve_all(5).unwrap();
    let flat = Retriever::new(&ds, &store, Scope::Global).unwrap().retrieve_all(5).unwrap();
    assert_eq!(clustered, flat);
}

#[test]
fn zero_k_is_rejected() {
    let ds = planted_fixture();
    let dir = tempfile::tempdir().unwrap();
    let store = embed(&ds, dir.path());
    let err = retrieve::retrieve_evidence(&ds, &store, "c0", 0, Scope::PerClaim).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}
