//! Ranking metrics: AUC and per-group weighted GAUC.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Area under the ROC curve via the Mann–Whitney rank statistic. Tied
/// scores share their average rank, which credits tied pairs with 0.5.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Argument("labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Argument("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative labels",
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 1-based ranks of positives, ties averaged.
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_block = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        pos_rank_sum += avg_rank * pos_in_block as f64;
        i = j;
    }
    let p = n_pos as f64;
    let u = pos_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n_neg as f64))
}

/// Sample-weighted mean of per-group AUC. Groups with a single class are
/// skipped.
pub fn gauc(scores: &[f64], labels: &[u8], groups: &[u64]) -> Result<f64> {
    if scores.len() != labels.len() || scores.len() != groups.len() {
        return Err(Error::Argument(
            "scores, labels and groups differ in length".into(),
        ));
    }
    let mut by_group: BTreeMap<u64, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((&s, &y), &g) in scores.iter().zip(labels).zip(groups) {
        let entry = by_group.entry(g).or_default();
        entry.0.push(s);
        entry.1.push(y);
    }
    let mut weighted = 0.0;
    let mut total = 0.0;
    for (s, y) in by_group.values() {
        match auc(s, y) {
            Ok(a) => {
                let w = s.len() as f64;
                weighted += w * a;
                total += w;
            }
            Err(Error::UndefinedMetric(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if total == 0.0 {
        return Err(Error::UndefinedMetric(
            "GAUC needs a group with both classes",
        ));
    }
    Ok(weighted / total)
}
