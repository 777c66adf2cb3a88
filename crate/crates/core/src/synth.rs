//! Seeded synthetic claim corpora whose evidence carries class-specific
//! vocabulary, for smoke runs and end-to-end checks.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dataset, LabelScheme, Split};
use crate::error::{Error, Result};

const SUBJECTS: &[&str] = &[
    "The senator", "A governor", "The mayor", "A viral post", "The campaign",
    "An activist", "The president", "A blogger", "The ministry", "A lawmaker",
];

const VERBS: &[&str] = &["claimed", "said", "stated", "tweeted", "argued", "announced"];

const TOPICS: &[&str] = &[
    "tax", "budget", "border", "vaccine", "wages", "tariffs", "pension", "climate",
    "crime", "housing", "election", "ballots", "hospital", "school", "tuition",
    "pipeline", "wildfire", "drought", "inflation", "refinery", "factory", "bridge",
    "subway", "airport", "harbor", "farmers", "veterans", "nurses", "teachers",
    "police", "prison", "water", "lottery", "stadium", "railway", "mining", "fishing",
    "rent", "medicaid", "broadband",
];

const FILLER: &[&str] = &[
    "according", "to", "reports", "officials", "said", "on", "monday", "in", "the",
    "statement", "records", "show", "analysts", "noted", "last", "year", "data",
    "from", "agency", "review", "local", "news", "coverage", "sources", "added",
];

/// Cue words per six-class label, in scheme order.
const CUES_SIX: [&[&str]; 6] = [
    &["outlandish", "absurd", "preposterous", "invented", "ridiculous", "nonsense"],
    &["fabricated", "hoax", "debunked", "bogus", "falsehood", "baseless"],
    &["dubious", "shaky", "thin", "unsupported", "misleading", "overstated"],
    &["partially", "mixed", "exaggerated", "selective", "nuance", "incomplete"],
    &["largely", "mostly", "broadly", "substantially", "generally", "sound"],
    &["confirmed", "verified", "accurate", "documented", "corroborated", "correct"],
];

/// Cue words per three-class label (false, half-true, true).
const CUES_THREE: [&[&str]; 3] = [CUES_SIX[1], CUES_SIX[3], CUES_SIX[5]];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub claims: usize,
    pub scheme: LabelScheme,
    pub seed: u64,
    /// Inclusive range of reports per claim.
    pub reports: (usize, usize),
    /// Inclusive range of sentences per report.
    pub sentences: (usize, usize),
    /// Probability that an evidence sentence echoes the claim's topic and
    /// carries its label's cue words.
    pub signal: f64,
    /// Probability that a background sentence carries another label's cue.
    pub noise: f64,
    /// Train and validation fractions; the rest is test.
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            claims: 300,
            scheme: LabelScheme::ThreeClass,
            seed: 7,
            reports: (2, 3),
            sentences: (3, 6),
            signal: 0.5,
            noise: 0.15,
            train_fraction: 0.6,
            val_fraction: 0.1,
        }
    }
}

fn cues(scheme: LabelScheme, label: usize) -> &'static [&'static str] {
    match scheme {
        LabelScheme::ThreeClass => CUES_THREE[label],
        LabelScheme::SixClass => CUES_SIX[label],
    }
}

fn sentence(rng: &mut ChaCha8Rng, words: Vec<&str>) -> String {
    let mut words = words;
    words.shuffle(rng);
    let mut s = words.join(" ");
    if let Some(first) = s.get_mut(0..1) {
        first.make_ascii_uppercase();
    }
    s.push('.');
    s
}

/// Generates a balanced corpus: labels cycle through the scheme and splits
/// are assigned over a seeded permutation.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    let (rlo, rhi) = config.reports;
    let (slo, shi) = config.sentences;
    if rlo > rhi || slo > shi || shi == 0 {
        return Err(Error::InvalidArgument("empty report or sentence range".to_string()));
    }
    if !(0.0..=1.0).contains(&config.signal) || !(0.0..=1.0).contains(&config.noise) {
        return Err(Error::InvalidArgument("signal and noise must lie in [0, 1]".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.scheme.class_count();
    let n = config.claims;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (n as f64 * config.train_fraction).round() as usize;
    let n_val = (n as f64 * config.val_fraction).round() as usize;
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut ds = Dataset::new(config.scheme);
    for (i, &split) in splits.iter().enumerate() {
        let label = i % c;
        let topics: Vec<&str> = TOPICS.choose_multiple(&mut rng, 3).copied().collect();
        let claim = format!(
            "{} {} that {} {} and {} changed",
            SUBJECTS.choose(&mut rng).expect("non-empty"),
            VERBS.choose(&mut rng).expect("non-empty"),
            topics[0],
            topics[1],
            topics[2],
        );
        let mut reports = Vec::new();
        for r in 0..rng.random_range(rlo..=rhi) {
            let mut sentences = Vec::new();
            for _ in 0..rng.random_range(slo..=shi) {
                let mut words: Vec<&str> = FILLER.choose_multiple(&mut rng, 4).copied().collect();
                if rng.random_bool(config.signal) {
                    words.extend(topics.choose_multiple(&mut rng, 2));
                    words.extend(cues(config.scheme, label).choose_multiple(&mut rng, 2));
                } else {
                    words.push(TOPICS.choose(&mut rng).expect("non-empty"));
                    if rng.random_bool(config.noise) {
                        let other = rng.random_range(0..c);
                        words.push(cues(config.scheme, other).choose(&mut rng).expect("non-empty"));
                    }
                }
                sentences.push(sentence(&mut rng, words));
            }
            reports.push((format!("r{r}"), sentences));
        }
        ds.push_claim(
            &format!("syn-{i:04}"),
            &claim,
            config.scheme.label_at(label),
            split,
            reports,
        )?;
    }
    Ok(ds)
}
