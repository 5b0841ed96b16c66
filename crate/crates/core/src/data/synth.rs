use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CohortDataset, Split, EMBEDDING_DIM, FERRITIN_THRESHOLD};
use crate::error::{Error, Result};
use crate::seed::derived_rng;

/// Quartile-to-sigma factor for a normal distribution: `IQR = 2 * 0.6745 * sigma`.
const IQR_Z: f64 = 0.674_489_750_196_081_7;
const MAX_FERRITIN_DRAWS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub size: usize,
    pub prevalence: f64,
}

/// Per-class log-normal ferritin model in µg/L. Draws are resampled until they
/// fall on the side of the threshold their label demands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FerritinModel {
    pub replete_median: f64,
    pub replete_log_sigma: f64,
    pub deficient_median: f64,
    pub deficient_log_sigma: f64,
}

impl FerritinModel {
    /// Log-normal fitted to a median and interquartile range.
    pub fn replete_from_quartiles(median: f64, q1: f64, q3: f64, deficient_median: f64, deficient_log_sigma: f64) -> Self {
        Self {
            replete_median: median,
            replete_log_sigma: (q3 / q1).ln() / (2.0 * IQR_Z),
            deficient_median,
            deficient_log_sigma,
        }
    }
}

/// Class-conditional Gaussian cohort.
///
/// Embeddings are standard normal; positives are shifted by `effect_size` on
/// `signal_dims` and by `shared_effect` on `shared_dims`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub site_id: String,
    pub width: usize,
    pub train: SplitSpec,
    pub val: SplitSpec,
    pub test: SplitSpec,
    pub signal_dims: Vec<usize>,
    pub effect_size: f64,
    #[serde(default)]
    pub shared_dims: Vec<usize>,
    #[serde(default)]
    pub shared_effect: f64,
    pub ferritin: FerritinModel,
}

impl CohortSpec {
    pub fn split(&self, split: Split) -> SplitSpec {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn positives(&self, split: Split) -> usize {
        let s = self.split(split);
        (s.prevalence * s.size as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        for dims in [&self.signal_dims, &self.shared_dims] {
            if let Some(d) = dims.iter().find(|&&d| d >= self.width) {
                return Err(Error::Config(format!("signal dim {d} outside width {}", self.width)));
            }
        }
        if self.signal_dims.iter().any(|d| self.shared_dims.contains(d)) {
            return Err(Error::Config("site-specific and shared signal dims overlap".into()));
        }
        for split in Split::ALL {
            let s = self.split(split);
            if !(s.prevalence > 0.0 && s.prevalence < 1.0) {
                return Err(Error::Config(format!("{split} prevalence must lie strictly inside (0, 1)")));
            }
            let pos = self.positives(split);
            if s.size == 0 || pos == 0 || pos == s.size {
                return Err(Error::Config(format!(
                    "{split} split of {} rows at prevalence {} cannot hold both classes",
                    s.size, s.prevalence
                )));
            }
        }
        let f = &self.ferritin;
        if !(f.replete_median >= FERRITIN_THRESHOLD && f.deficient_median > 0.0 && f.deficient_median < FERRITIN_THRESHOLD) {
            return Err(Error::Config("ferritin medians must sit on the correct side of 15 µg/L".into()));
        }
        if !(f.replete_log_sigma > 0.0 && f.deficient_log_sigma > 0.0) {
            return Err(Error::Config("ferritin log-sigmas must be positive".into()));
        }
        Ok(())
    }
}

// Reference cohort counts per split (N, N+).
const AUMC_COUNTS: [(usize, usize); 3] = [(44_032, 1_219), (73_344, 1_592), (100_096, 1_650)];
const NHSBT_COUNTS: [(usize, usize); 3] = [(30_997, 6_033), (7_278, 1_316), (9_041, 1_744)];

const AUMC_SIGNAL: [usize; 8] = [3, 17, 42, 77, 101, 150, 199, 230];
const NHSBT_SIGNAL: [usize; 8] = [8, 25, 60, 90, 128, 170, 210, 245];
const SHARED_SIGNAL: [usize; 4] = [11, 55, 140, 222];

pub fn preset_names() -> &'static [&'static str] {
    &["aumc_like", "nhsbt_like"]
}

/// Named cohort presets. `scale` multiplies the reference split sizes; `0.1`
/// is the desk-scale default.
pub fn preset(name: &str, scale: f64) -> Result<CohortSpec> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("scale must be positive, got {scale}")));
    }
    let (counts, signal, effect, ferritin) = match name {
        "aumc_like" => (
            AUMC_COUNTS,
            AUMC_SIGNAL,
            AUMC_EFFECT,
            FerritinModel::replete_from_quartiles(602.0, 144.0, 1505.0, 8.0, 0.4),
        ),
        "nhsbt_like" => (
            NHSBT_COUNTS,
            NHSBT_SIGNAL,
            NHSBT_EFFECT,
            FerritinModel::replete_from_quartiles(39.0, 25.0, 63.0, 9.0, 0.35),
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {:?}",
                preset_names()
            )))
        }
    };
    let split = |(n, pos): (usize, usize)| SplitSpec {
        size: ((n as f64) * scale).round().max(1.0) as usize,
        prevalence: pos as f64 / n as f64,
    };
    let spec = CohortSpec {
        site_id: name.trim_end_matches("_like").to_string(),
        width: EMBEDDING_DIM,
        train: split(counts[0]),
        val: split(counts[1]),
        test: split(counts[2]),
        signal_dims: signal.to_vec(),
        effect_size: effect,
        shared_dims: SHARED_SIGNAL.to_vec(),
        shared_effect: SHARED_EFFECT,
        ferritin,
    };
    spec.validate()?;
    Ok(spec)
}

pub(crate) const AUMC_EFFECT: f64 = 0.8;
pub(crate) const NHSBT_EFFECT: f64 = 0.5;
pub(crate) const SHARED_EFFECT: f64 = 0.5;

fn draw_ferritin(rng: &mut impl Rng, positive: bool, model: &FerritinModel) -> Result<f64> {
    let (median, sigma) = if positive {
        (model.deficient_median, model.deficient_log_sigma)
    } else {
        (model.replete_median, model.replete_log_sigma)
    };
    let dist = LogNormal::new(median.ln(), sigma).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 0..MAX_FERRITIN_DRAWS {
        let f: f64 = dist.sample(rng);
        if (f < FERRITIN_THRESHOLD) == positive {
            return Ok(f);
        }
    }
    Err(Error::Config("ferritin model cannot produce values on the required side of the threshold".into()))
}

/// Deterministic cohort draw. Each split holds exactly `round(prevalence * size)`
/// positives in shuffled positions; ferritin values agree with the labels.
pub fn generate_cohort(spec: &CohortSpec, seed: u64) -> Result<CohortDataset> {
    spec.validate()?;
    let total: usize = Split::ALL.iter().map(|&s| spec.split(s).size).sum();
    let mut emb = Array2::<f32>::zeros((total, spec.width));
    let mut labels = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    let mut ferritin = Vec::with_capacity(total);
    let mut row = 0;
    for split in Split::ALL {
        let s = spec.split(split);
        let pos = spec.positives(split);
        let mut split_labels: Vec<u8> = (0..s.size).map(|i| u8::from(i < pos)).collect();
        let mut rng = derived_rng(seed, &format!("{}/{split}", spec.site_id));
        split_labels.shuffle(&mut rng);
        for &y in &split_labels {
            let mut r = emb.row_mut(row);
            for v in r.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = z as f32;
            }
            if y == 1 {
                for &d in &spec.signal_dims {
                    r[d] = (f64::from(r[d]) + spec.effect_size) as f32;
                }
                for &d in &spec.shared_dims {
                    r[d] = (f64::from(r[d]) + spec.shared_effect) as f32;
                }
            }
            ferritin.push(draw_ferritin(&mut rng, y == 1, &spec.ferritin)?);
            labels.push(y);
            splits.push(split);
            row += 1;
        }
    }
    CohortDataset::new(spec.site_id.clone(), emb, labels, splits, Some(ferritin))
}
