//! Discrimination metrics, validation-split thresholds, percentile bootstrap
//! intervals and the site/macro summaries used in reports.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};

pub const DEFAULT_BOOTSTRAP: usize = 1000;
pub const CI_METHOD: &str = "percentile bootstrap (B=1000, 2.5/97.5)";
const MAX_REDRAWS: usize = 1000;

fn class_counts(labels: &[u8]) -> Result<(u64, u64)> {
    let mut pos = 0;
    let mut neg = 0;
    for &y in labels {
        match y {
            1 => pos += 1,
            0 => neg += 1,
            other => return Err(Error::InvalidInput(format!("label {other} is not binary"))),
        }
    }
    Ok((pos, neg))
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::InvalidInput(format!("score {s} is not comparable")));
    }
    Ok(())
}

/// Area under the ROC curve in the Mann-Whitney form; tied scores count half.
///
/// Pairs are counted in integers (twice the concordant count plus ties), so the
/// result equals the pairwise definition exactly.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("ROC-AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut twice_concordant: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos_here, mut neg_here) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 { pos_here += 1 } else { neg_here += 1 }
            j += 1;
        }
        twice_concordant += 2 * pos_here * neg_below + pos_here * neg_here;
        neg_below += neg_here;
        i = j;
    }
    Ok((twice_concordant as f64 / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// Mean of sensitivity and specificity with `score >= threshold` predicted positive.
pub fn balanced_accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("balanced accuracy needs both classes".into()));
    }
    let (mut tp, mut tn) = (0u64, 0u64);
    for (&s, &y) in scores.iter().zip(labels) {
        let predicted = s >= threshold;
        match (predicted, y) {
            (true, 1) => tp += 1,
            (false, 0) => tn += 1,
            _ => {}
        }
    }
    Ok(0.5 * (tp as f64 / n_pos as f64 + tn as f64 / n_neg as f64))
}

fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo / 2.0 + hi / 2.0;
    if m > lo { m } else { hi }
}

/// Threshold maximising balanced accuracy on validation data.
///
/// Candidates are midpoints between adjacent distinct scores; with a single
/// distinct score that score is the only candidate. Ties go to the lowest
/// threshold.
pub fn select_threshold(val_scores: &[f64], val_labels: &[u8]) -> Result<f64> {
    check_lengths(val_scores, val_labels)?;
    let (n_pos, n_neg) = class_counts(val_labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("threshold selection needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..val_scores.len()).collect();
    order.sort_by(|&a, &b| val_scores[a].total_cmp(&val_scores[b]));
    // groups of equal scores in ascending order: (score, positives, negatives)
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for &i in &order {
        let s = val_scores[i];
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if val_labels[i] == 1 { g.1 += 1 } else { g.2 += 1 }
            }
            _ => groups.push((s, u64::from(val_labels[i] == 1), u64::from(val_labels[i] == 0))),
        }
    }
    if groups.len() == 1 {
        return Ok(groups[0].0);
    }
    // threshold between groups k-1 and k predicts groups k.. positive.
    // balanced accuracy * 2 * n_pos * n_neg = tp * n_neg + tn * n_pos, compared exactly.
    let (mut tn, mut fn_) = (0u64, 0u64);
    let mut best: Option<(u128, f64)> = None;
    for k in 1..groups.len() {
        tn += groups[k - 1].2;
        fn_ += groups[k - 1].1;
        let tp = n_pos - fn_;
        let score = tp as u128 * n_neg as u128 + tn as u128 * n_pos as u128;
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, midpoint(groups[k - 1].0, groups[k].0)));
        }
    }
    Ok(best.expect("at least two groups").1)
}

/// Percentile bootstrap interval `[q_0.025, q_0.975]` of `metric` over `b`
/// resamples with replacement.
///
/// Resample `i` draws from its own seed derived from `(seed, i)`, so the result
/// does not depend on evaluation order. Single-class resamples are redrawn.
pub fn bootstrap_ci<F>(scores: &[f64], labels: &[u8], metric: F, b: usize, seed: u64) -> Result<(f64, f64)>
where
    F: Fn(&[f64], &[u8]) -> Result<f64>,
{
    check_lengths(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("bootstrap needs both classes".into()));
    }
    if b == 0 {
        return Err(Error::InvalidInput("bootstrap needs at least one resample".into()));
    }
    let n = scores.len();
    let mut stats = Vec::with_capacity(b);
    let mut s_buf = vec![0.0; n];
    let mut y_buf = vec![0u8; n];
    for i in 0..b {
        let mut rng = rng_from(derive_seed(seed, &format!("bootstrap/{i}")));
        let mut attempt = 0;
        loop {
            let mut pos = 0;
            for k in 0..n {
                let j = rng.random_range(0..n);
                s_buf[k] = scores[j];
                y_buf[k] = labels[j];
                pos += usize::from(labels[j]);
            }
            if pos > 0 && pos < n {
                break;
            }
            attempt += 1;
            if attempt >= MAX_REDRAWS {
                return Err(Error::InvalidInput("bootstrap kept drawing single-class resamples".into()));
            }
        }
        stats.push(metric(&s_buf, &y_buf)?);
    }
    stats.sort_by(f64::total_cmp);
    Ok((quantile_sorted(&stats, 0.025), quantile_sorted(&stats, 0.975)))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    /// Widens the interval to contain `point` if resampling missed it.
    fn covering(low: f64, high: f64, point: f64) -> Self {
        if point < low || point > high {
            log::warn!("bootstrap interval [{low}, {high}] excludes the point estimate {point}; widening");
        }
        Self { low: low.min(point), high: high.max(point) }
    }
}

/// Test-set summary for one site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteMetrics {
    pub roc_auc: f64,
    pub roc_auc_ci: Interval,
    pub balanced_accuracy: f64,
    pub balanced_accuracy_ci: Interval,
    pub threshold: f64,
}

impl SiteMetrics {
    /// Selects the threshold on validation, then scores the test split with
    /// bootstrap intervals.
    pub fn evaluate(
        val_scores: &[f64],
        val_labels: &[u8],
        test_scores: &[f64],
        test_labels: &[u8],
        resamples: usize,
        seed: u64,
    ) -> Result<Self> {
        let threshold = select_threshold(val_scores, val_labels)?;
        let auc = roc_auc(test_scores, test_labels)?;
        let bal = balanced_accuracy(test_scores, test_labels, threshold)?;
        let (al, ah) = bootstrap_ci(test_scores, test_labels, roc_auc, resamples, derive_seed(seed, "auc"))?;
        let (bl, bh) = bootstrap_ci(
            test_scores,
            test_labels,
            |s, y| balanced_accuracy(s, y, threshold),
            resamples,
            derive_seed(seed, "balacc"),
        )?;
        Ok(Self {
            roc_auc: auc,
            roc_auc_ci: Interval::covering(al, ah, auc),
            balanced_accuracy: bal,
            balanced_accuracy_ci: Interval::covering(bl, bh, bal),
            threshold,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub macro_roc_auc: f64,
    pub macro_balanced_accuracy: f64,
}

/// Unweighted mean of two per-site summaries.
pub fn macro_average(a: &SiteMetrics, b: &SiteMetrics) -> MacroMetrics {
    MacroMetrics {
        macro_roc_auc: (a.roc_auc + b.roc_auc) / 2.0,
        macro_balanced_accuracy: (a.balanced_accuracy + b.balanced_accuracy) / 2.0,
    }
}

/// Unweighted mean over any number of sites.
pub fn macro_over(sites: &[SiteMetrics]) -> Option<MacroMetrics> {
    if sites.is_empty() {
        return None;
    }
    let n = sites.len() as f64;
    Some(MacroMetrics {
        macro_roc_auc: sites.iter().map(|s| s.roc_auc).sum::<f64>() / n,
        macro_balanced_accuracy: sites.iter().map(|s| s.balanced_accuracy).sum::<f64>() / n,
    })
}

/// Half-away-from-zero rounding to `digits` decimals, as printed in reports.
pub fn round_to(x: f64, digits: i32) -> f64 {
    let scale = 10f64.powi(digits);
    (x * scale).round() / scale
}
