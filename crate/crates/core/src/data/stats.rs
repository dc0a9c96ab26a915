use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::corpus::{Dialogue, Role};

/// Whitespace-separated tokens when the text contains whitespace, otherwise
/// characters (so unsegmented scripts such as Chinese split per character).
pub fn word_tokens(text: &str) -> Vec<&str> {
    let trimmed = text.trim();
    if trimmed.chars().any(char::is_whitespace) {
        trimmed.split_whitespace().collect()
    } else {
        trimmed.char_indices().map(|(i, c)| &trimmed[i..i + c.len_utf8()]).collect()
    }
}

/// Number of [`word_tokens`].
pub fn word_count(text: &str) -> usize {
    word_tokens(text).len()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dialogues: usize,
    pub turns: usize,
    /// Doctor turns, i.e. question/answer exchanges.
    pub qa_pairs: usize,
    /// Mean word count over all doctor turns; absent for an empty corpus.
    pub mean_doctor_words: Option<f64>,
    /// Word count → number of doctor turns with that count.
    pub histogram: BTreeMap<usize, usize>,
}

pub fn corpus_stats(dialogues: &[Dialogue]) -> CorpusStats {
    let mut s = CorpusStats {
        dialogues: dialogues.len(),
        ..CorpusStats::default()
    };
    let mut total = 0usize;
    for d in dialogues {
        s.turns += d.turns.len();
        for t in d.turns.iter().filter(|t| t.role == Role::Doctor) {
            let w = word_count(&t.text);
            s.qa_pairs += 1;
            total += w;
            *s.histogram.entry(w).or_default() += 1;
        }
    }
    if s.qa_pairs > 0 {
        s.mean_doctor_words = Some(total as f64 / s.qa_pairs as f64);
    }
    s
}

/// Mean word count of a list of responses; `None` when empty.
pub fn mean_word_count<S: AsRef<str>>(responses: &[S]) -> Option<f64> {
    if responses.is_empty() {
        return None;
    }
    let total: usize = responses.iter().map(|r| word_count(r.as_ref())).sum();
    Some(total as f64 / responses.len() as f64)
}
