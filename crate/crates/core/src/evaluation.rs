//! Accuracy, AUROC and average-decision ensembling over prediction sets.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::data::id_field;
use crate::engine::EngineError;
use crate::error::{Error, Result};

/// Decision threshold; a score equal to it predicts positive.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub score: f64,
    pub label: Option<u8>,
}

/// Scored samples with unique ids and scores in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    items: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(items: Vec<Prediction>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &items {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate prediction id {}",
                    p.id
                )));
            }
            if !p.score.is_finite() || !(0.0..=1.0).contains(&p.score) {
                return Err(Error::Validation(format!(
                    "score {} for id {} is not in [0, 1]",
                    p.score, p.id
                )));
            }
            if matches!(p.label, Some(l) if l > 1) {
                return Err(Error::Validation(format!(
                    "label for id {} is not 0 or 1",
                    p.id
                )));
            }
        }
        Ok(PredictionSet { items })
    }

    pub fn items(&self) -> &[Prediction] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.items.iter().map(|p| p.score).collect()
    }

    /// All labels, or a contract error naming the first unlabeled id.
    pub fn labels(&self) -> Result<Vec<u8>> {
        self.items
            .iter()
            .map(|p| {
                p.label.ok_or_else(|| {
                    EngineError::Contract(format!("prediction {} has no label", p.id)).into()
                })
            })
            .collect()
    }
}

/// Fraction of samples whose thresholded score matches the label.
pub fn accuracy(preds: &PredictionSet, threshold: f64) -> Result<f64> {
    let labels = preds.labels()?;
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let correct = preds
        .items
        .iter()
        .zip(&labels)
        .filter(|(p, &l)| u8::from(p.score >= threshold) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

fn class_counts(labels: &[u8]) -> (u64, u64) {
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    (pos, labels.len() as u64 - pos)
}

fn check_both_classes(pos: u64, neg: u64) -> Result<()> {
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    Ok(())
}

/// Area under the ROC curve from midranks, in `O(n log n)`.
///
/// The rank sum is kept in doubled integer form, so the result is the exact
/// quotient `(2U) / (2 n_pos n_neg)` and matches pairwise counting bit for bit.
pub fn auroc_scores(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("NaN score".into()));
    }
    let (pos, neg) = class_counts(labels);
    check_both_classes(pos, neg)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut doubled_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1..=end share the midrank (start + 1 + end) / 2
        let doubled_midrank = (start + 1 + end) as u128;
        let positives = order[start..end]
            .iter()
            .filter(|&&i| labels[i] == 1)
            .count() as u128;
        doubled_rank_sum += doubled_midrank * positives;
        start = end;
    }
    let doubled_u = doubled_rank_sum - u128::from(pos) * u128::from(pos + 1);
    Ok(doubled_u as f64 / (2 * u128::from(pos) * u128::from(neg)) as f64)
}

/// Reference AUROC by counting every (positive, negative) pair, ties worth
/// one half.
pub fn auroc_pairwise(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let (pos, neg) = class_counts(labels);
    check_both_classes(pos, neg)?;
    let mut credit = 0.0;
    let of_class = |c: u8| {
        scores
            .iter()
            .zip(labels)
            .filter(move |(_, &l)| l == c)
            .map(|(&s, _)| s)
    };
    for sp in of_class(1) {
        for sn in of_class(0) {
            if sp > sn {
                credit += 1.0;
            } else if sp == sn {
                credit += 0.5;
            }
        }
    }
    Ok(credit / (pos * neg) as f64)
}

pub fn auroc(preds: &PredictionSet) -> Result<f64> {
    auroc_scores(&preds.scores(), &preds.labels()?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// `None` when one class is absent.
    pub auroc: Option<f64>,
    pub n: usize,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n {} n_pos {} n_neg {} accuracy {:.6} auroc ",
            self.n, self.n_pos, self.n_neg, self.accuracy
        )?;
        match self.auroc {
            Some(a) => write!(f, "{a:.6}"),
            None => f.write_str("undefined"),
        }
    }
}

/// Accuracy and, when both classes are present, AUROC.
pub fn evaluate(preds: &PredictionSet, threshold: f64) -> Result<MetricsReport> {
    let labels = preds.labels()?;
    let (pos, neg) = class_counts(&labels);
    let auroc = match auroc_scores(&preds.scores(), &labels) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        accuracy: accuracy(preds, threshold)?,
        auroc,
        n: labels.len(),
        n_pos: pos as usize,
        n_neg: neg as usize,
    })
}

/// Unweighted per-id mean of the member scores, in the first set's order.
///
/// Scores for an id are summed in ascending order, so the result does not
/// depend on the order of `sets`, and clamped to the members' range, so
/// identical members reproduce their score exactly.
pub fn ensemble_average(sets: &[PredictionSet]) -> Result<PredictionSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Validation("ensemble needs at least one prediction set".into()))?;
    let lookups: Vec<HashMap<&str, &Prediction>> = sets
        .iter()
        .map(|s| s.items.iter().map(|p| (p.id.as_str(), p)).collect())
        .collect();

    let all_ids: BTreeSet<&str> = lookups.iter().flat_map(|m| m.keys().copied()).collect();
    let offending: Vec<String> = all_ids
        .iter()
        .filter(|id| lookups.iter().any(|m| !m.contains_key(**id)))
        .map(|id| id.to_string())
        .collect();
    if !offending.is_empty() {
        return Err(Error::Alignment { ids: offending });
    }

    let n = sets.len() as f64;
    let mut items = Vec::with_capacity(first.len());
    for p in &first.items {
        let members: Vec<&Prediction> = lookups.iter().map(|m| m[p.id.as_str()]).collect();
        let mut scores: Vec<f64> = members.iter().map(|m| m.score).collect();
        scores.sort_by(f64::total_cmp);
        let mean = (scores.iter().sum::<f64>() / n).clamp(scores[0], scores[scores.len() - 1]);
        let mut label = None;
        for m in &members {
            match (label, m.label) {
                (Some(a), Some(b)) if a != b => {
                    return Err(Error::Validation(format!(
                        "conflicting labels for id {}",
                        p.id
                    )))
                }
                (None, Some(b)) => label = Some(b),
                _ => {}
            }
        }
        items.push(Prediction {
            id: p.id.clone(),
            score: mean,
            label,
        });
    }
    PredictionSet::new(items)
}

pub fn parse_predictions(path: &Path, content: &str) -> Result<PredictionSet> {
    let mut items = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = (|| -> std::result::Result<Prediction, String> {
            let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
            let id = v
                .get("id")
                .and_then(id_field)
                .ok_or("missing or invalid id")?;
            let score = v
                .get("proba")
                .and_then(Value::as_f64)
                .ok_or("missing or invalid proba")?;
            let label = match v.get("label") {
                None | Some(Value::Null) => None,
                Some(l) => match l.as_u64() {
                    Some(l @ (0 | 1)) => Some(l as u8),
                    _ => return Err(format!("label {l} is not 0 or 1")),
                },
            };
            Ok(Prediction { id, score, label })
        })();
        items.push(parsed.map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?);
    }
    PredictionSet::new(items)
}

/// Reads a prediction file: one `{"id", "proba", "label"?}` object per line.
pub fn load_predictions(path: &Path) -> Result<PredictionSet> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(path, &content)
}

pub fn format_predictions(preds: &PredictionSet) -> String {
    let mut out = Vec::new();
    for p in &preds.items {
        let mut v = json!({ "id": p.id, "proba": p.score });
        if let Some(l) = p.label {
            v["label"] = json!(l);
        }
        writeln!(out, "{v}").expect("write to vec");
    }
    String::from_utf8(out).expect("json is utf-8")
}

pub fn save_predictions(path: &Path, preds: &PredictionSet) -> Result<()> {
    fs::write(path, format_predictions(preds)).map_err(|e| Error::io(path, e))
}
