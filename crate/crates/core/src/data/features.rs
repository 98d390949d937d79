//! Precomputed region features.
//!
//! Binary container (integers and floats little-endian):
//!
//! ```text
//! magic       8 bytes  "CVLFEAT\0"
//! version     u32      1
//! visual_dim  u32      D
//! max_rois    u32      R_max
//! count       u64      number of records
//! record*     u64 body length in bytes, then the body:
//!               u32 id length, id bytes (UTF-8)
//!               u32 R (<= R_max)
//!               R x 4 f64   boxes (x1, y1, x2, y2), normalized to [0, 1]
//!               R x D f64   region features, row-major
//!               D f64       contextual feature
//! ```
//!
//! A JSON-lines variant is accepted for hand-written fixtures: one object per
//! line with `id`, `boxes`, `roi_features`, `contextual`, and optionally
//! `image_width`/`image_height` when boxes are in pixels.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde_json::Value;

use super::binio::{read_f64s, read_u32, read_u64, write_f64s, write_string};
use super::dataset::id_field;
use crate::error::{Error, Result};
use crate::representation::VisualFeatures;

pub const FEATURE_MAGIC: &[u8; 8] = b"CVLFEAT\0";
pub const FEATURE_VERSION: u32 = 1;

/// Default region count per image.
pub const DEFAULT_MAX_ROIS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub boxes: Vec<[f64; 4]>,
    /// `R x D`, row-major.
    pub roi_features: Vec<f64>,
    pub contextual: Vec<f64>,
}

impl FeatureRecord {
    pub fn num_rois(&self) -> usize {
        self.boxes.len()
    }

    /// Pads or truncates to `max_rois` rows.
    pub fn to_visual(&self, max_rois: usize) -> Result<VisualFeatures> {
        let dim = self.contextual.len();
        let rows: Vec<Vec<f64>> = self
            .roi_features
            .chunks(dim.max(1))
            .map(<[f64]>::to_vec)
            .collect();
        VisualFeatures::new(&rows, &self.boxes, self.contextual.clone(), max_rois)
    }

    fn check(&self, visual_dim: usize, max_rois: usize) -> Result<()> {
        let bad = |what: String| {
            Err(Error::Validation(format!(
                "feature record {}: {what}",
                self.id
            )))
        };
        if self.contextual.len() != visual_dim {
            return bad(format!(
                "contextual has {} values, expected {visual_dim}",
                self.contextual.len()
            ));
        }
        if self.num_rois() > max_rois {
            return bad(format!(
                "{} regions exceed the maximum {max_rois}",
                self.num_rois()
            ));
        }
        if self.roi_features.len() != self.num_rois() * visual_dim {
            return bad(format!(
                "{} region values for {} regions of dim {visual_dim}",
                self.roi_features.len(),
                self.num_rois()
            ));
        }
        for b in &self.boxes {
            let ok = b.iter().all(|v| (0.0..=1.0).contains(v)) && b[0] <= b[2] && b[1] <= b[3];
            if !ok {
                return bad(format!("box {b:?} is not normalized"));
            }
        }
        let finite = self
            .roi_features
            .iter()
            .chain(&self.contextual)
            .chain(self.boxes.iter().flatten());
        if finite.clone().any(|v| !v.is_finite()) {
            return bad("non-finite value".into());
        }
        Ok(())
    }
}

/// Feature records keyed by id, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub visual_dim: usize,
    pub max_rois: usize,
    pub records: IndexMap<String, FeatureRecord>,
}

impl FeatureFile {
    pub fn new(visual_dim: usize, max_rois: usize) -> Self {
        FeatureFile {
            visual_dim,
            max_rois,
            records: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, record: FeatureRecord) -> Result<()> {
        record.check(self.visual_dim, self.max_rois)?;
        if self.records.contains_key(&record.id) {
            return Err(Error::Validation(format!(
                "duplicate feature id {}",
                record.id
            )));
        }
        self.records.insert(record.id.clone(), record);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&FeatureRecord> {
        self.records.get(id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn write_features<W: Write>(w: &mut W, file: &FeatureFile) -> std::io::Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(file.visual_dim as u32).to_le_bytes())?;
    w.write_all(&(file.max_rois as u32).to_le_bytes())?;
    w.write_all(&(file.records.len() as u64).to_le_bytes())?;
    for rec in file.records.values() {
        let mut body = Vec::new();
        write_string(&mut body, &rec.id)?;
        body.extend_from_slice(&(rec.num_rois() as u32).to_le_bytes());
        let boxes: Vec<f64> = rec.boxes.iter().flatten().copied().collect();
        write_f64s(&mut body, &boxes)?;
        write_f64s(&mut body, &rec.roi_features)?;
        write_f64s(&mut body, &rec.contextual)?;
        w.write_all(&(body.len() as u64).to_le_bytes())?;
        w.write_all(&body)?;
    }
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    Error::Format(format!("truncated feature container: {e}"))
}

pub fn read_features<R: Read>(r: &mut R) -> Result<FeatureFile> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format("feature container magic mismatch".into()));
    }
    let version = read_u32(r).map_err(truncated)?;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!(
            "feature container version {version} is not supported (expected {FEATURE_VERSION})"
        )));
    }
    let visual_dim = read_u32(r).map_err(truncated)? as usize;
    let max_rois = read_u32(r).map_err(truncated)? as usize;
    let count = read_u64(r).map_err(truncated)?;
    let mut file = FeatureFile::new(visual_dim, max_rois);
    for index in 0..count {
        let len = read_u64(r).map_err(truncated)? as usize;
        let mut body = vec![0u8; len];
        r.read_exact(&mut body).map_err(truncated)?;
        let mut c = Cursor::new(body.as_slice());
        let rec = read_record_body(&mut c, visual_dim, max_rois)
            .map_err(|m| Error::Format(format!("record {index}: {m}")))?;
        if c.position() as usize != len {
            return Err(Error::Validation(format!(
                "feature record {}: body is {len} bytes but its dimensions account for {}",
                rec.id,
                c.position()
            )));
        }
        file.insert(rec)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(truncated)? != 0 {
        return Err(Error::Format(
            "trailing bytes after the last feature record".into(),
        ));
    }
    Ok(file)
}

fn read_record_body(
    c: &mut Cursor<&[u8]>,
    visual_dim: usize,
    max_rois: usize,
) -> std::result::Result<FeatureRecord, String> {
    let id = super::binio::read_string(c).map_err(|e| format!("id: {e}"))?;
    let rois = read_u32(c).map_err(|e| format!("{id}: region count: {e}"))? as usize;
    if rois > max_rois {
        return Err(format!(
            "{id}: {rois} regions exceed the maximum {max_rois}"
        ));
    }
    let remaining = c.get_ref().len() as u64 - c.position();
    let needed = ((rois * 4 + rois * visual_dim + visual_dim) * 8) as u64;
    if needed > remaining {
        return Err(format!(
            "{id}: shape {rois}x{visual_dim} needs {needed} bytes, record holds {remaining}"
        ));
    }
    let boxes = read_f64s(c, rois * 4).map_err(|e| e.to_string())?;
    let roi_features = read_f64s(c, rois * visual_dim).map_err(|e| e.to_string())?;
    let contextual = read_f64s(c, visual_dim).map_err(|e| e.to_string())?;
    Ok(FeatureRecord {
        id,
        boxes: boxes
            .chunks_exact(4)
            .map(|b| [b[0], b[1], b[2], b[3]])
            .collect(),
        roi_features,
        contextual,
    })
}

fn json_floats(v: &Value, what: &str) -> std::result::Result<Vec<f64>, String> {
    v.as_array()
        .ok_or(format!("{what} is not an array"))?
        .iter()
        .map(|x| x.as_f64().ok_or(format!("{what} holds a non-number")))
        .collect()
}

fn parse_text_record(line: &str) -> std::result::Result<FeatureRecord, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let id = v
        .get("id")
        .and_then(id_field)
        .ok_or("missing or invalid id")?;
    let contextual = json_floats(
        v.get("contextual").ok_or("missing contextual")?,
        "contextual",
    )?;
    let (sx, sy) = match (v.get("image_width"), v.get("image_height")) {
        (Some(w), Some(h)) => (
            w.as_f64()
                .filter(|x| *x > 0.0)
                .ok_or("image_width must be positive")?,
            h.as_f64()
                .filter(|x| *x > 0.0)
                .ok_or("image_height must be positive")?,
        ),
        (None, None) => (1.0, 1.0),
        _ => return Err("image_width and image_height must appear together".into()),
    };
    let boxes = v
        .get("boxes")
        .and_then(Value::as_array)
        .ok_or("missing boxes")?
        .iter()
        .map(|b| {
            let b = json_floats(b, "box")?;
            match b.as_slice() {
                [x1, y1, x2, y2] => Ok([x1 / sx, y1 / sy, x2 / sx, y2 / sy]),
                _ => Err("box must have 4 values".to_string()),
            }
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut roi_features = Vec::new();
    for row in v
        .get("roi_features")
        .and_then(Value::as_array)
        .ok_or("missing roi_features")?
    {
        roi_features.extend(json_floats(row, "roi_features row")?);
    }
    Ok(FeatureRecord {
        id,
        boxes,
        roi_features,
        contextual,
    })
}

pub fn parse_text_features(
    path: &Path,
    content: &str,
    max_rois: Option<usize>,
) -> Result<FeatureFile> {
    let mut records = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_text_record(line).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?);
    }
    let visual_dim = records.first().map_or(0, |r| r.contextual.len());
    let max_rois = max_rois.unwrap_or_else(|| {
        records
            .iter()
            .map(FeatureRecord::num_rois)
            .max()
            .unwrap_or(0)
    });
    let mut file = FeatureFile::new(visual_dim, max_rois);
    for r in records {
        file.insert(r)?;
    }
    Ok(file)
}

/// Reads either container flavour, sniffing the magic.
pub fn load_features(path: &Path) -> Result<FeatureFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(FEATURE_MAGIC) {
        return read_features(&mut bytes.as_slice());
    }
    if bytes.starts_with(b"CVL") {
        return Err(Error::Format(format!(
            "{}: feature container magic mismatch",
            path.display()
        )));
    }
    let text = String::from_utf8(bytes).map_err(|_| {
        Error::Format(format!(
            "{}: neither a feature container nor UTF-8 text",
            path.display()
        ))
    })?;
    parse_text_features(path, &text, None)
}

pub fn save_features(path: &Path, file: &FeatureFile) -> Result<()> {
    let mut buf = Vec::new();
    write_features(&mut buf, file).expect("write to vec");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
