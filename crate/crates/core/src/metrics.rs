//! Evaluation metrics: particle error rate (PER), coherent number error
//! (CNE), Rand index, best-matching accuracy and cluster purity.

use std::collections::BTreeMap;

use crate::assignment::max_weight_assignment;
use crate::error::{Error, Result};

fn contingency(a: &[u32], b: &[u32]) -> (Vec<u32>, Vec<u32>, Vec<Vec<f64>>) {
    let ids = |v: &[u32]| {
        let mut s: Vec<u32> = v.to_vec();
        s.sort_unstable();
        s.dedup();
        s
    };
    let ia = ids(a);
    let ib = ids(b);
    let pos_a: BTreeMap<u32, usize> = ia.iter().enumerate().map(|(k, &v)| (v, k)).collect();
    let pos_b: BTreeMap<u32, usize> = ib.iter().enumerate().map(|(k, &v)| (v, k)).collect();
    let mut table = vec![vec![0.0; ib.len()]; ia.len()];
    for (&x, &y) in a.iter().zip(b) {
        table[pos_a[&x]][pos_b[&y]] += 1.0;
    }
    (ia, ib, table)
}

/// Fraction of particles whose detected label does not correspond to their
/// true label under the maximum-overlap one-to-one matching of labels.
/// Background (label 0) takes part in the matching like any other label.
pub fn per(detected: &[u32], truth: &[u32]) -> Result<f64> {
    if detected.len() != truth.len() {
        return Err(Error::validation("label maps differ in size"));
    }
    if detected.is_empty() {
        return Ok(0.0);
    }
    let (_, _, table) = contingency(detected, truth);
    let assign = max_weight_assignment(&table);
    let correct: f64 = assign
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| table[r][c]))
        .sum();
    Ok(1.0 - correct / detected.len() as f64)
}

/// Mean absolute difference between detected and true region counts.
pub fn cne(detected: &[usize], truth: &[usize]) -> Result<f64> {
    if detected.len() != truth.len() {
        return Err(Error::validation(format!(
            "count lists differ in length: {} vs {}",
            detected.len(),
            truth.len()
        )));
    }
    if detected.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = detected
        .iter()
        .zip(truth)
        .map(|(&d, &t)| (d as f64 - t as f64).abs())
        .sum();
    Ok(total / detected.len() as f64)
}

/// Rand index between two partitions of the same items.
pub fn rand_index(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::validation("partitions differ in size"));
    }
    let n = a.len() as f64;
    if a.len() < 2 {
        return Ok(1.0);
    }
    let (_, _, table) = contingency(a, b);
    let pairs = |x: f64| x * (x - 1.0) / 2.0;
    let sum_cells: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let sum_rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let sum_cols: f64 = (0..table[0].len())
        .map(|c| pairs(table.iter().map(|r| r[c]).sum()))
        .sum();
    let total = pairs(n);
    // agreements = same-same + different-different
    let agree = total + 2.0 * sum_cells - sum_rows - sum_cols;
    Ok(agree / total)
}

/// Accuracy of a clustering under the best one-to-one matching between
/// predicted and true labels.
pub fn matched_accuracy(pred: &[u32], truth: &[u32]) -> Result<f64> {
    Ok(1.0 - per(pred, truth)?)
}

/// Purity of every predicted cluster: the share of its members carrying its
/// most common true label. Keyed by predicted label.
pub fn cluster_purities(pred: &[u32], truth: &[u32]) -> Result<BTreeMap<u32, f64>> {
    if pred.len() != truth.len() {
        return Err(Error::validation("label lists differ in size"));
    }
    let mut counts: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *counts.entry(p).or_default().entry(t).or_default() += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(p, m)| {
            let total: usize = m.values().sum();
            let best = m.values().copied().max().unwrap_or(0);
            (p, best as f64 / total as f64)
        })
        .collect())
}
