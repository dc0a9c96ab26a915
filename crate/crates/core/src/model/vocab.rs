use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const PATIENT: usize = 4;
pub const DOCTOR: usize = 5;

/// Marker strings of the reserved ids, in id order.
pub const SPECIAL_MARKERS: [&str; 6] = [
    "<|pad|>",
    "<|bos|>",
    "<|eos|>",
    "<|unk|>",
    "<|patient|>",
    "<|doctor|>",
];

/// Character-level vocabulary. Ids `0..6` are the reserved markers; every
/// further id is one Unicode scalar value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    units: Vec<String>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    /// Builds the vocabulary from every character appearing in `texts`,
    /// ordered by code point so the result does not depend on text order.
    pub fn from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let chars: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        let units = SPECIAL_MARKERS
            .iter()
            .map(|s| s.to_string())
            .chain(chars.into_iter().map(String::from))
            .collect();
        Self::from_units(units).expect("constructed vocabulary is valid")
    }

    /// Restores a vocabulary from its unit list (as stored in checkpoints).
    pub fn from_units(units: Vec<String>) -> Result<Self> {
        if units.len() < SPECIAL_MARKERS.len()
            || units.iter().zip(SPECIAL_MARKERS).any(|(u, m)| u != m)
        {
            return Err(Error::Corruption(
                "vocabulary does not start with the reserved markers".into(),
            ));
        }
        let mut index = HashMap::new();
        for (id, unit) in units.iter().enumerate().skip(SPECIAL_MARKERS.len()) {
            let mut it = unit.chars();
            let (Some(c), None) = (it.next(), it.next()) else {
                return Err(Error::Corruption(format!(
                    "vocabulary unit {id} `{unit}` is not a single character"
                )));
            };
            if index.insert(c, id).is_some() {
                return Err(Error::Corruption(format!("duplicate vocabulary unit `{unit}`")));
            }
        }
        Ok(Vocabulary { units, index })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn unit(&self, id: usize) -> Option<&str> {
        self.units.get(id).map(String::as_str)
    }

    /// Maps each character to its id, or to [`UNK`]. Marker strings are
    /// treated as ordinary characters.
    pub fn encode_plain(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id_of(c).unwrap_or(UNK)).collect()
    }

    /// Like [`encode_plain`](Self::encode_plain) but recognises the reserved
    /// marker strings, so rendered prompts round-trip through text.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::with_capacity(text.len());
        let mut rest = text;
        'outer: while let Some(c) = rest.chars().next() {
            if rest.starts_with("<|") {
                for (id, m) in SPECIAL_MARKERS.iter().enumerate() {
                    if let Some(tail) = rest.strip_prefix(m) {
                        out.push(id);
                        rest = tail;
                        continue 'outer;
                    }
                }
            }
            out.push(self.id_of(c).unwrap_or(UNK));
            rest = &rest[c.len_utf8()..];
        }
        out
    }

    /// Concatenates the units of `ids`; out-of-range ids render as the
    /// unknown marker.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.unit(id).unwrap_or(SPECIAL_MARKERS[UNK]))
            .collect()
    }

    /// Decodes a generated response: stops at the first EOS and drops
    /// padding and structural markers.
    pub fn decode_response(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| !matches!(id, PAD | BOS | PATIENT | DOCTOR))
            .map(|&id| self.unit(id).unwrap_or(SPECIAL_MARKERS[UNK]))
            .collect()
    }

    /// Token ids of a prompt: `BOS`, the history, then a trailing doctor
    /// marker that cues the response. Text without role markers is taken as
    /// a single patient turn.
    pub fn encode_prompt(&self, text: &str) -> Vec<usize> {
        let mut ids = self.encode(text);
        while ids.first() == Some(&BOS) {
            ids.remove(0);
        }
        let mut out = vec![BOS];
        if !matches!(ids.first(), Some(&PATIENT) | Some(&DOCTOR)) {
            out.push(PATIENT);
        }
        out.extend(ids);
        if out.last() != Some(&DOCTOR) {
            out.push(DOCTOR);
        }
        out
    }

    /// Response text followed by EOS.
    pub fn encode_response(&self, text: &str) -> Vec<usize> {
        let mut ids = self.encode_plain(text);
        ids.push(EOS);
        ids
    }
}
