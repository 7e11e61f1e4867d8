//! Text formats: JSON-lines records, trial lists and score files.
//!
//! - Records: one JSON object per line, blank lines ignored.
//! - Trial list: `label id_a id_b` per line, label `1` for same speaker
//!   and `0` otherwise.
//! - Score file: `id_a id_b score` per line.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::Trial;
use crate::predictor::AccuracyRecord;

/// Proof that batch norm was recalibrated before a record was measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecalibrationEvent {
    pub utterances: usize,
    pub batch_size: usize,
    /// Batch norms on the active path whose statistics were rewritten.
    pub bn_layers: usize,
}

/// Accuracy record as written by record collection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectedRecord {
    #[serde(flatten)]
    pub record: AccuracyRecord,
    pub recalibration: Option<RecalibrationEvent>,
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Encoding(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn format_trials(trials: &[Trial]) -> String {
    trials
        .iter()
        .map(|t| format!("{} {} {}\n", u8::from(t.target), t.a, t.b))
        .collect()
}

fn fields(line: &str, n: usize, lineno: usize) -> Result<Vec<&str>> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != n {
        return Err(Error::Encoding(format!("line {lineno}: expected {n} fields, found {}", f.len())));
    }
    Ok(f)
}

pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f = fields(line, 3, i + 1)?;
        let target = match f[0] {
            "1" => true,
            "0" => false,
            other => return Err(Error::Encoding(format!("line {}: label `{other}` is not 0 or 1", i + 1))),
        };
        out.push(Trial {
            target,
            a: f[1].to_string(),
            b: f[2].to_string(),
        });
    }
    Ok(out)
}

pub fn format_scores(scores: &[(String, String, f64)]) -> String {
    scores.iter().map(|(a, b, s)| format!("{a} {b} {s:?}\n")).collect()
}

pub fn parse_scores(text: &str) -> Result<Vec<(String, String, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f = fields(line, 3, i + 1)?;
        let s: f64 = f[2]
            .parse()
            .map_err(|e| Error::Encoding(format!("line {}: score `{}`: {e}", i + 1, f[2])))?;
        out.push((f[0].to_string(), f[1].to_string(), s));
    }
    Ok(out)
}
