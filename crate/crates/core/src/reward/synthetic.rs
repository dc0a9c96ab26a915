//! Programmatic preference oracles for exercising reward training.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Origin, PreferenceRecord};

/// Four letters each, so word count and character count order answers
/// the same way.
const WORDS: &[&str] = &[
    "rest", "pain", "take", "mild", "test", "diet", "salt", "warm", "cold", "heat",
    "walk", "cure", "dose", "drug", "skin", "lung", "bone", "care", "calm", "nose",
];

/// Equal character length, so an answer's length fixes its final position.
const PROMPTS: &[&str] = &[
    "I have a headache now",
    "My throat is so sore.",
    "I cannot sleep at all",
    "My lower back aches!!",
    "I feel tired all day.",
    "I have an itchy rash.",
    "My stomach aches now.",
    "I cough all the night",
];

pub fn prompts() -> &'static [&'static str] {
    PROMPTS
}

/// Characters appearing in generated records, for building a vocabulary.
pub fn alphabet() -> String {
    let mut s: String = WORDS.join(" ");
    s.push_str(&PROMPTS.concat());
    s
}

pub fn random_answer(rng: &mut impl Rng, words: usize) -> String {
    (0..words)
        .map(|_| *WORDS.choose(rng).expect("non-empty word list"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `n` records whose chosen answer has strictly more words than the
/// rejected one; both lengths are drawn from `2..=max_words` (a single
/// word would be counted by characters).
pub fn length_preferences(n: usize, max_words: usize, seed: u64) -> Vec<PreferenceRecord> {
    assert!(max_words >= 3, "need at least two distinct lengths");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let a = rng.random_range(2..=max_words);
        let b = rng.random_range(2..=max_words);
        if a == b {
            continue;
        }
        let (long, short) = (a.max(b), a.min(b));
        let prompt = PROMPTS.choose(&mut rng).expect("non-empty prompt list").to_string();
        let chosen = random_answer(&mut rng, long);
        let rejected = random_answer(&mut rng, short);
        if chosen == rejected {
            continue;
        }
        out.push(PreferenceRecord {
            prompt,
            chosen,
            rejected,
            annotator: "length-oracle".into(),
            ts: 0,
            origin: Origin::Synthetic,
        });
    }
    out
}

/// Swaps chosen and rejected in every record.
pub fn flipped(records: &[PreferenceRecord]) -> Vec<PreferenceRecord> {
    records
        .iter()
        .map(|r| PreferenceRecord {
            chosen: r.rejected.clone(),
            rejected: r.chosen.clone(),
            ..r.clone()
        })
        .collect()
}

/// Length records with the label swapped on a seeded half, so the longer
/// answer wins exactly half the time.
pub fn balanced_random_labels(records: &[PreferenceRecord], seed: u64) -> Vec<PreferenceRecord> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    rand::seq::SliceRandom::shuffle(&mut idx[..], &mut ChaCha8Rng::seed_from_u64(seed));
    let swap: std::collections::HashSet<usize> = idx[..records.len() / 2].iter().copied().collect();
    records
        .iter()
        .enumerate()
        .map(|(i, r)| if swap.contains(&i) { flipped(std::slice::from_ref(r)).remove(0) } else { r.clone() })
        .collect()
}
