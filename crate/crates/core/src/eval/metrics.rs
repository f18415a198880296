use thiserror::Error;

pub const DEFAULT_BINS: usize = 10;
pub const ACCURACY_CUTOFF: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("no scores to evaluate")]
    EmptyInput,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("bin count must be at least 1")]
    NoBins,
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    Ok(())
}

/// Area under the ROC curve via the Mann-Whitney statistic with average ranks for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += avg * tied_pos as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Bin of `score` among `bins` right-closed equal-width bins; 0 falls in the first.
pub fn bin_index(score: f64, bins: usize) -> usize {
    let s = score.clamp(0.0, 1.0);
    let b = bins as f64;
    let mut idx = ((s * b).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    if idx > 0 && s <= idx as f64 / b {
        idx -= 1;
    }
    if idx + 1 < bins && s > (idx + 1) as f64 / b {
        idx += 1;
    }
    idx
}

/// Expected calibration error over equal-width bins.
pub fn ece(scores: &[f64], labels: &[bool], bins: usize) -> Result<f64, MetricError> {
    check_lengths(scores, labels)?;
    if scores.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if bins == 0 {
        return Err(MetricError::NoBins);
    }
    let mut sum_score = vec![0.0; bins];
    let mut sum_label = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (&s, &l) in scores.iter().zip(labels) {
        let b = bin_index(s, bins);
        sum_score[b] += s;
        sum_label[b] += if l { 1.0 } else { 0.0 };
        count[b] += 1;
    }
    let n = scores.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (sum_score[b] / c - sum_label[b] / c).abs()
        })
        .sum())
}

/// Fraction of positives scored at or above `cutoff`, and of negatives below it.
/// `None` for a class with no rows.
pub fn accuracy_splits(scores: &[f64], labels: &[bool], cutoff: f64) -> Result<(Option<f64>, Option<f64>), MetricError> {
    check_lengths(scores, labels)?;
    let (mut pos, mut pos_hit, mut neg, mut neg_hit) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            pos += 1;
            pos_hit += (s >= cutoff) as usize;
        } else {
            neg += 1;
            neg_hit += (s < cutoff) as usize;
        }
    }
    let frac = |hit: usize, n: usize| (n > 0).then(|| hit as f64 / n as f64);
    Ok((frac(pos_hit, pos), frac(neg_hit, neg)))
}
