//! Line-delimited JSON helpers.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Parses every non-blank line of `path`; the first bad line is an error
/// naming its 1-based line number.
pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Error::Corpus(format!("{}:{}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

pub fn to_string<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(to_string(records)?.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
