//! Evaluation metrics: classification accuracy, entity-level micro-F1, and
//! ANLS (average normalized Levenshtein similarity).

use crate::error::{Error, Result};
use std::collections::BTreeMap;

pub const ANLS_TAU: f64 = 0.5;

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "accuracy: {} predictions vs {} golds",
            preds.len(),
            golds.len()
        )));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unit-cost edit distance, O(|a|·|b|) with a rolling row.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Thresholded similarity of one prediction against its gold answer set:
/// max over golds of (1 − NL) where NL = dist/max(|p|,|g|,1), cut to 0 when
/// NL exceeds `tau`.
pub fn anls_score(pred: &str, golds: &[String], tau: f64) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::Contract("anls: empty gold set".into()));
    }
    let p = normalize(pred);
    let mut best = 0.0f64;
    for g in golds {
        let g = normalize(g);
        let nl = levenshtein(&p, &g) as f64 / p.chars().count().max(g.chars().count()).max(1) as f64;
        let s = if nl <= tau { 1.0 - nl } else { 0.0 };
        best = best.max(s);
    }
    Ok(best)
}

pub fn anls(preds: &[String], golds: &[Vec<String>], tau: f64) -> Result<f64> {
    if preds.is_empty() || preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "anls: {} predictions vs {} gold sets",
            preds.len(),
            golds.len()
        )));
    }
    let mut sum = 0.0;
    for (p, g) in preds.iter().zip(golds) {
        sum += anls_score(p, g, tau)?;
    }
    Ok(sum / preds.len() as f64)
}

/// Micro-averaged entity F1 over per-document key→value maps. A gold entity
/// is a true positive iff the predicted map has the key with an exactly
/// matching value after trim+lowercase; predicted keys absent from gold
/// count as false positives.
pub fn entity_f1(
    preds: &[BTreeMap<String, String>],
    golds: &[BTreeMap<String, String>],
) -> Result<f64> {
    if golds.is_empty() || preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "entity_f1: {} predictions vs {} golds",
            preds.len(),
            golds.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (pred, gold) in preds.iter().zip(golds) {
        for (k, gv) in gold {
            match pred.get(k) {
                Some(pv) if normalize(pv) == normalize(gv) => tp += 1,
                _ => fn_ += 1,
            }
        }
        for (k, pv) in pred {
            match gold.get(k) {
                Some(gv) if normalize(pv) == normalize(gv) => {}
                _ => fp += 1,
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / denom as f64)
}
