//! Keyword files (`{"id": .., "keywords": [..]}` per line) and plain word
//! lists for the lexicon heuristic.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use super::dataset::id_field;
use crate::error::{Error, Result};
use crate::representation::KeywordSet;

pub fn parse_keywords(path: &Path, content: &str) -> Result<Vec<KeywordSet>> {
    let mut sets = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = (|| -> std::result::Result<KeywordSet, String> {
            let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
            let id = v
                .get("id")
                .and_then(id_field)
                .ok_or("missing or invalid id")?;
            let words = v
                .get("keywords")
                .and_then(Value::as_array)
                .ok_or("missing keywords array")?
                .iter()
                .map(|k| {
                    k.as_str()
                        .map(str::to_string)
                        .ok_or("keyword is not a string")
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(KeywordSet::new(id, words))
        })();
        sets.push(parsed.map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?);
    }
    Ok(sets)
}

pub fn load_keywords(path: &Path) -> Result<Vec<KeywordSet>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_keywords(path, &content)
}

pub fn write_keywords(path: &Path, sets: &[KeywordSet]) -> Result<()> {
    let mut out = Vec::new();
    for s in sets {
        let words: Vec<&String> = s.keywords.iter().collect();
        writeln!(out, "{}", json!({ "id": s.id, "keywords": words })).expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One word per line, lowercased; blank lines and `#` comments skipped.
pub fn load_word_list(path: &Path) -> Result<Vec<String>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(content
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect())
}
