//! Locality metrics: edited tokens, edit clusters, edit span fraction.

use serde::{Deserialize, Serialize};

use crate::diffusion::TokenId;
use crate::engine::Insertion;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    pub edited: usize,
    pub clusters: usize,
    pub span_fraction: f64,
}

/// Number of maximal runs of consecutive positions in an ascending list.
pub fn clusters(positions: &[usize]) -> usize {
    positions
        .iter()
        .enumerate()
        .filter(|&(i, &p)| i == 0 || positions[i - 1] + 1 != p)
        .count()
}

/// Edited positions of `after` relative to `before`, in `after` coordinates.
///
/// With recorded insertions the alignment is exact. Without them, equal
/// lengths compare position by position and unequal lengths anchor on the
/// longest common prefix and suffix, counting the middle of `after` as edited.
pub fn edited_positions(before: &[TokenId], after: &[TokenId], insertions: Option<&[Insertion]>) -> Vec<usize> {
    if let Some(ins) = insertions.filter(|i| !i.is_empty()) {
        let mut inserted = vec![false; after.len()];
        for i in ins {
            for p in i.at..(i.at + i.count).min(after.len()) {
                inserted[p] = true;
            }
        }
        let mut src = 0;
        let mut out = Vec::new();
        for (p, &tok) in after.iter().enumerate() {
            if inserted[p] {
                out.push(p);
            } else {
                if before.get(src) != Some(&tok) {
                    out.push(p);
                }
                src += 1;
            }
        }
        return out;
    }
    if before.len() == after.len() {
        return (0..after.len()).filter(|&i| before[i] != after[i]).collect();
    }
    let m = before.len().min(after.len());
    let prefix = (0..m).take_while(|&i| before[i] == after[i]).count();
    let suffix = (0..m - prefix)
        .take_while(|&i| before[before.len() - 1 - i] == after[after.len() - 1 - i])
        .count();
    (prefix..after.len() - suffix).collect()
}

pub fn edit_metrics(before: &[TokenId], after: &[TokenId], insertions: Option<&[Insertion]>) -> EditMetrics {
    let pos = edited_positions(before, after, insertions);
    EditMetrics {
        edited: pos.len(),
        clusters: clusters(&pos),
        span_fraction: if after.is_empty() { 0.0 } else { pos.len() as f64 / after.len() as f64 },
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let a = [0, 1, 2, 3, 4];
        let m = edit_metrics(&a, &a, None);
        assert_eq!((m.edited, m.clusters, m.span_fraction), (0, 0, 0.0));
        let m = edit_metrics(&a, &[0, 9, 2, 8, 4], None);
        assert_eq!((m.edited, m.clusters, m.span_fraction), (2, 2, 0.4));
        let after = [0, 1, 7, 7, 2, 3, 4];
        let ins = [Insertion { at: 2, count: 2 }];
        let m = edit_metrics(&a, &after, Some(&ins));
        assert_eq!((m.edited, m.clusters), (2, 1));
        let m = edit_metrics(&a, &after, None);
        assert_eq!((m.edited, m.clusters), (2, 1));
        let after = [0, 7, 7, 1, 9, 3, 4];
        let m = edit_metrics(&a, &after, Some(&[Insertion { at: 1, count: 2 }]));
        assert_eq!(edited_positions(&a, &after, Some(&[Insertion { at: 1, count: 2 }])), [1, 2, 4]);
        assert_eq!((m.edited, m.clusters), (3, 2));
    }

    #[test]
    fn aggregates() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(mean(&[1.0, 2.0]), Some(1.5));
        assert_eq!(clusters(&[1, 2, 3, 7, 9, 10]), 3);
    }
}
