use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};

/// One `<image, text>` pair. `label` is absent for unlabeled splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetRecord {
    pub id: String,
    pub text: String,
    pub label: Option<u8>,
    pub img: Option<String>,
}

/// Ids may be JSON strings or integers; both become strings.
pub(crate) fn id_field(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_record(line: &str) -> std::result::Result<DatasetRecord, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = v.as_object().ok_or("record is not a JSON object")?;
    let id = obj
        .get("id")
        .and_then(id_field)
        .ok_or("missing or invalid id")?;
    let text = match obj.get("text") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("text is not a string".into()),
        None => return Err("missing text".into()),
    };
    let label = match obj.get("label") {
        None | Some(Value::Null) => None,
        Some(Value::Number(n)) => match n.as_u64() {
            Some(l @ (0 | 1)) => Some(l as u8),
            _ => return Err(format!("label {n} is not 0 or 1")),
        },
        Some(other) => return Err(format!("label {other} is not 0 or 1")),
    };
    let img = obj.get("img").and_then(Value::as_str).map(str::to_string);
    Ok(DatasetRecord {
        id,
        text,
        label,
        img,
    })
}

pub fn parse_dataset(path: &Path, content: &str) -> Result<Vec<DatasetRecord>> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_record(line).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate id {} in {}",
                rec.id,
                path.display()
            )));
        }
        records.push(rec);
    }
    Ok(records)
}

/// Reads a JSON-lines dataset (`id`, `text`, optional `label` and `img`).
pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(path, &content)
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        let mut v = json!({ "id": r.id, "text": r.text });
        if let Some(img) = &r.img {
            v["img"] = json!(img);
        }
        if let Some(l) = r.label {
            v["label"] = json!(l);
        }
        writeln!(out, "{v}").expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
