use super::CohortDataset;
use crate::error::{Error, Result};

/// `|mean(z | y=1) - mean(z | y=0)|` per embedding dimension, over all rows.
pub fn class_mean_gaps(dataset: &CohortDataset) -> Result<Vec<f64>> {
    let width = dataset.width();
    let mut sums = [vec![0.0f64; width], vec![0.0f64; width]];
    let mut counts = [0usize; 2];
    for (row, &y) in dataset.embeddings().rows().into_iter().zip(dataset.labels()) {
        let class = usize::from(y);
        counts[class] += 1;
        for (acc, &v) in sums[class].iter_mut().zip(row.iter()) {
            *acc += f64::from(v);
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::InvalidInput("class-mean gaps need both classes".into()));
    }
    Ok((0..width)
        .map(|d| (sums[1][d] / counts[1] as f64 - sums[0][d] / counts[0] as f64).abs())
        .collect())
}

/// The `k` dimensions with the largest class-mean gap, largest first; ties
/// resolve to the lower index.
///
/// Row sums are order dependent in floating point, so gaps are compared after
/// rounding to 12 significant digits to keep the ranking stable under row
/// permutation.
pub fn top_discriminative_dims(dataset: &CohortDataset, k: usize) -> Result<Vec<usize>> {
    if k > dataset.width() {
        return Err(Error::InvalidInput(format!("k = {k} exceeds embedding width {}", dataset.width())));
    }
    let gaps: Vec<f64> = class_mean_gaps(dataset)?
        .into_iter()
        .map(|g| if g == 0.0 { 0.0 } else { format!("{g:.11e}").parse().expect("formatted float") })
        .collect();
    let mut dims: Vec<usize> = (0..gaps.len()).collect();
    dims.sort_by(|&a, &b| gaps[b].total_cmp(&gaps[a]).then(a.cmp(&b)));
    dims.truncate(k);
    Ok(dims)
}
