//! Plain-number evaluation statistics: the pairwise ranking loss over cosine
//! scores, and Spearman correlation with average ranks for ties.

use crate::error::{Error, Result};

/// Ranking loss over one group: `ln(1 + Σ exp(λ·(cos_j − cos_i)))` summed
/// over ordered pairs with `target_i > target_j`. No ordered pairs (all
/// targets equal) gives exactly zero.
pub fn cosent_loss_value(cosines: &[f64], targets: &[f64], lambda: f64) -> Result<f64> {
    if cosines.len() != targets.len() {
        return Err(Error::config(format!(
            "cosines and targets differ in length: {} vs {}",
            cosines.len(),
            targets.len()
        )));
    }
    if cosines.len() < 2 {
        return Err(Error::config("ranking loss needs at least two items"));
    }
    if cosines.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite value in ranking loss input"));
    }
    let mut sum = 0.0f64;
    for i in 0..cosines.len() {
        for j in 0..cosines.len() {
            if targets[i] > targets[j] {
                sum += (lambda * (cosines[j] - cosines[i])).exp();
            }
        }
    }
    Ok(sum.ln_1p())
}

/// Average ranks (1-based); tied values share the mean of their positions.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for t in i..=j {
            ranks[idx[t]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average-ranked values.
/// Zero rank variance on either side is an undefined-correlation error.
pub fn spearman(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::config(format!(
            "pred and target differ in length: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::config("correlation needs at least two items"));
    }
    if pred.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite value in correlation input"));
    }
    let rp = average_ranks(pred);
    let rt = average_ranks(target);
    let n = pred.len() as f64;
    let mean_p = rp.iter().sum::<f64>() / n;
    let mean_t = rt.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_t = 0.0;
    for (p, t) in rp.iter().zip(&rt) {
        cov += (p - mean_p) * (t - mean_t);
        var_p += (p - mean_p) * (p - mean_p);
        var_t += (t - mean_t) * (t - mean_t);
    }
    if var_p == 0.0 || var_t == 0.0 {
        return Err(Error::numeric(
            "correlation undefined: one side has zero rank variance (all values tied)",
        ));
    }
    Ok(cov / (var_p.sqrt() * var_t.sqrt()))
}
