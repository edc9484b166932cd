//! Evaluation metrics: thresholded dice, accuracy and rank-based AUC.

use crate::error::TrainError;

/// Dice of the thresholded prediction against a binary truth mask, with the
/// usual smoothing constant 1.
pub fn metric_dice(pred_prob: &[f64], truth: &[f64], threshold: f64) -> f64 {
    let mut inter = 0.0;
    let mut p_sum = 0.0;
    let mut t_sum = 0.0;
    for (&p, &t) in pred_prob.iter().zip(truth.iter()) {
        let pb = (p >= threshold) as u8 as f64;
        inter += pb * t;
        p_sum += pb;
        t_sum += t;
    }
    (2.0 * inter + 1.0) / (p_sum + t_sum + 1.0)
}

pub fn metric_accuracy(probs: &[f64], labels: &[u8], threshold: f64) -> f64 {
    let correct = probs
        .iter()
        .zip(labels.iter())
        .filter(|(&p, &y)| (p >= threshold) as u8 == y)
        .count();
    correct as f64 / probs.len() as f64
}

/// Area under the ROC curve via the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counted one half.
/// Computed from average ranks, O(n log n).
pub fn metric_auc(scores: &[f64], labels: &[u8]) -> Result<f64, TrainError> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TrainError::SingleClassAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // average ranks over tie groups (ranks are 1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}
