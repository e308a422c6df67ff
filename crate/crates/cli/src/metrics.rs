//! Held-out performance measures.

use serde::Serialize;

/// Area under the ROC curve as the Mann–Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
/// `None` when one of the classes is absent.
pub fn auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // mid-ranks
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l > 0.5).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return None;
    }
    let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(&l, _)| l > 0.5).map(|(_, r)| r).sum();
    Some((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Harrell's concordance for right-censored data; a higher risk score
/// should mean an earlier event. `None` without comparable pairs.
pub fn concordance(time: &[f64], status: &[f64], risk: &[f64]) -> Option<f64> {
    let n = time.len();
    let (mut conc, mut total) = (0.0, 0.0);
    for i in 0..n {
        if status[i] <= 0.0 {
            continue;
        }
        for j in 0..n {
            if time[j] > time[i] {
                total += 1.0;
                if risk[i] > risk[j] {
                    conc += 1.0;
                } else if risk[i] == risk[j] {
                    conc += 0.5;
                }
            }
        }
    }
    (total > 0.0).then(|| conc / total)
}

pub fn mse(pred: &[f64], y: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub method: String,
    /// Fold, replicate or subsample index.
    pub id: usize,
    pub metric: String,
    pub value: f64,
    pub selected: Option<usize>,
}
