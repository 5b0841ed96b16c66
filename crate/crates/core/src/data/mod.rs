//! Site datasets: embedding matrices with binary labels and split tags, the
//! ferritin labelling rule, CSV ingestion, the synthetic cohort generator and
//! the class-mean heterogeneity analysis.

mod analysis;
mod csv_io;
mod synth;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use analysis::{class_mean_gaps, top_discriminative_dims};
pub use csv_io::{load_embeddings_csv, write_embeddings_csv};
pub use synth::{generate_cohort, preset, preset_names, CohortSpec, FerritinModel, SplitSpec};

pub const EMBEDDING_DIM: usize = 256;

/// WHO iron-deficiency cut-off in µg/L.
pub const FERRITIN_THRESHOLD: f64 = 15.0;

/// `1` iff ferritin is strictly below 15 µg/L.
pub fn label_from_ferritin(ferritin: f64) -> Result<u8> {
    if !ferritin.is_finite() || ferritin < 0.0 {
        return Err(Error::InvalidInput(format!("ferritin must be a non-negative concentration, got {ferritin}")));
    }
    Ok(u8::from(ferritin < FERRITIN_THRESHOLD))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split tag {other:?}"))),
        }
    }
}

/// One site's rows: `N x width` embeddings, binary labels and split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortDataset {
    site_id: String,
    embeddings: Array2<f32>,
    labels: Vec<u8>,
    splits: Vec<Split>,
    ferritin: Option<Vec<f64>>,
}

/// Rows of one split gathered into a contiguous matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub x: Array2<f32>,
    pub labels: Vec<u8>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl CohortDataset {
    pub fn new(
        site_id: impl Into<String>,
        embeddings: Array2<f32>,
        labels: Vec<u8>,
        splits: Vec<Split>,
        ferritin: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = embeddings.nrows();
        if labels.len() != n || splits.len() != n {
            return Err(Error::Shape(format!(
                "{n} embedding rows, {} labels, {} split tags",
                labels.len(),
                splits.len()
            )));
        }
        if let Some(f) = &ferritin {
            if f.len() != n {
                return Err(Error::Shape(format!("{n} rows but {} ferritin values", f.len())));
            }
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::InvalidInput(format!("label {bad} is not binary")));
        }
        Ok(Self { site_id: site_id.into(), embeddings, labels, splits, ferritin })
    }

    pub fn site_id(&self) -> &str {
        &self.site_id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> &Array2<f32> {
        &self.embeddings
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn ferritin(&self) -> Option<&[f64]> {
        self.ferritin.as_deref()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    pub fn split_rows(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn split_data(&self, split: Split) -> SplitData {
        let rows = self.split_rows(split);
        let x = Array2::from_shape_fn((rows.len(), self.width()), |(i, j)| self.embeddings[[rows[i], j]]);
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        SplitData { x, labels }
    }

    /// Checks the structure a federated site needs: every split present and
    /// both classes in train.
    pub fn validate_for_federation(&self) -> Result<()> {
        for split in Split::ALL {
            if self.split_len(split) == 0 {
                return Err(Error::data(None, format!("site {} has an empty {split} split", self.site_id)));
            }
        }
        let train = self.split_data(Split::Train);
        let pos = train.labels.iter().filter(|&&y| y == 1).count();
        if pos == 0 || pos == train.len() {
            return Err(Error::data(None, format!("site {} train split needs both classes", self.site_id)));
        }
        Ok(())
    }

    /// Row-permuted copy; used to check permutation invariance of analyses.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::Shape("permutation length differs from row count".into()));
        }
        let x = Array2::from_shape_fn(self.embeddings.raw_dim(), |(i, j)| self.embeddings[[order[i], j]]);
        Self::new(
            self.site_id.clone(),
            x,
            order.iter().map(|&i| self.labels[i]).collect(),
            order.iter().map(|&i| self.splits[i]).collect(),
            self.ferritin.as_ref().map(|f| order.iter().map(|&i| f[i]).collect()),
        )
    }
}

/// Positive fraction of a split.
pub fn prevalence(dataset: &CohortDataset, split: Split) -> Result<f64> {
    let rows = dataset.split_rows(split);
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!("split {split} is empty")));
    }
    let pos = rows.iter().filter(|&&i| dataset.labels[i] == 1).count();
    Ok(pos as f64 / rows.len() as f64)
}
