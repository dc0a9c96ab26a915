use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::vocab::SPECIAL_MARKERS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Patient,
    Doctor,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Patient => "patient",
            Role::Doctor => "doctor",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub source: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// Checks the turn structure: alternating roles starting with the
    /// patient, non-empty text, ending on a doctor turn.
    pub fn validate(&self) -> std::result::Result<(), RejectReason> {
        if self.turns.iter().any(|t| t.text.trim().is_empty()) {
            return Err(RejectReason::EmptyText);
        }
        for (i, t) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::Patient } else { Role::Doctor };
            if t.role != expected {
                return Err(RejectReason::RoleOrder);
            }
        }
        match self.turns.last() {
            Some(t) if t.role == Role::Doctor => Ok(()),
            _ => Err(RejectReason::MissingFinalDoctor),
        }
    }

    /// History before the final doctor turn, rendered with role markers.
    pub fn prompt_text(&self) -> String {
        let n = self.turns.len().saturating_sub(1);
        turns_text(&self.turns[..n])
    }

    /// Text of the final doctor turn.
    pub fn response_text(&self) -> &str {
        self.turns.last().map_or("", |t| t.text.as_str())
    }

    /// Whitespace-collapsed rendering of every turn, used for duplicate
    /// detection.
    pub fn normalized(&self) -> String {
        self.turns
            .iter()
            .map(|t| format!("{}:{}", t.role.as_str(), t.text.split_whitespace().collect::<Vec<_>>().join(" ")))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Role-marked text of `turns`, each doctor turn closed by the EOS marker.
pub fn turns_text(turns: &[Turn]) -> String {
    let mut s = String::new();
    for t in turns {
        match t.role {
            Role::Patient => s.push_str(SPECIAL_MARKERS[crate::model::vocab::PATIENT]),
            Role::Doctor => s.push_str(SPECIAL_MARKERS[crate::model::vocab::DOCTOR]),
        }
        s.push_str(&t.text);
        if t.role == Role::Doctor {
            s.push_str(SPECIAL_MARKERS[crate::model::vocab::EOS]);
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RejectReason {
    MalformedJson,
    RoleOrder,
    EmptyText,
    MissingFinalDoctor,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::MalformedJson => "malformed-json",
            RejectReason::RoleOrder => "role-order",
            RejectReason::EmptyText => "empty-text",
            RejectReason::MissingFinalDoctor => "missing-final-doctor",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reject {
    /// 1-based line number in the source file.
    pub line: usize,
    pub reason: RejectReason,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadedCorpus {
    pub dialogues: Vec<Dialogue>,
    pub rejects: Vec<Reject>,
}

impl LoadedCorpus {
    /// `<line>\t<reason>` per reject.
    pub fn rejects_report(&self) -> String {
        self.rejects
            .iter()
            .map(|r| format!("{}\t{}\n", r.line, r.reason))
            .collect()
    }
}

/// Parses a dialogue corpus from line-delimited JSON text. Blank lines are
/// ignored; every other line either yields a dialogue or a reject.
pub fn parse_corpus(text: &str) -> Result<LoadedCorpus> {
    let mut out = LoadedCorpus::default();
    let mut records = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records += 1;
        let parsed = serde_json::from_str::<Dialogue>(line)
            .map_err(|_| RejectReason::MalformedJson)
            .and_then(|d| d.validate().map(|_| d));
        match parsed {
            Ok(d) => out.dialogues.push(d),
            Err(reason) => out.rejects.push(Reject { line: i + 1, reason }),
        }
    }
    if 2 * out.rejects.len() > records {
        return Err(Error::Corpus(format!(
            "{} of {records} records rejected (more than half)",
            out.rejects.len()
        )));
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<LoadedCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text).map_err(|e| match e {
        Error::Corpus(m) => Error::Corpus(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_corpus(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    crate::jsonl::write(path, dialogues)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub kept: usize,
    /// Count per rejection reason (`too-short`, `too-long`, `duplicate`).
    pub removed: BTreeMap<String, usize>,
}

/// Drops dialogues with a doctor turn shorter than `min_len` characters
/// (`too-short`), whose turns total more than `max_len` characters
/// (`too-long`), and repeats of an earlier dialogue (`duplicate`). Order of
/// the survivors is preserved.
pub fn filter_clean(dialogues: &[Dialogue], min_len: usize, max_len: usize) -> (Vec<Dialogue>, FilterReport) {
    let mut seen = HashSet::new();
    let mut report = FilterReport::default();
    let mut kept = Vec::new();
    for d in dialogues {
        let reason = if d
            .turns
            .iter()
            .any(|t| t.role == Role::Doctor && t.text.trim().chars().count() < min_len)
        {
            Some("too-short")
        } else if d.turns.iter().map(|t| t.text.chars().count()).sum::<usize>() > max_len {
            Some("too-long")
        } else if !seen.insert(d.normalized()) {
            Some("duplicate")
        } else {
            None
        };
        match reason {
            Some(r) => *report.removed.entry(r.to_string()).or_default() += 1,
            None => kept.push(d.clone()),
        }
    }
    report.kept = kept.len();
    (kept, report)
}

/// Seeded shuffle, then the first `round(n·val_fraction)` (at least one,
/// at most `n − 1`) become validation.
pub fn split_train_val<T: Clone>(items: &[T], val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {val_fraction} must lie in (0, 1)")));
    }
    let n = items.len();
    if n < 2 {
        return Err(Error::Split(format!("cannot split {n} item(s) into train and validation")));
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = idx[..n_val].iter().map(|&i| items[i].clone()).collect();
    let train = idx[n_val..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, val))
}
