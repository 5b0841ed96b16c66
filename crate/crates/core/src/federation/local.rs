use serde::Serialize;

use super::site::{bootstrap_seed, scores};
use super::study::{RoundState, StudyConfig};
use super::init_seed;
use crate::data::{CohortDataset, Split};
use crate::error::Result;
use crate::metrics::{roc_auc, SiteMetrics};
use crate::nn::{build_mlp, train_epochs, AdamState, LocalObjective};
use crate::seed::derived_rng;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalReport {
    pub site_id: String,
    /// Chunks of `local_epochs` epochs that were run.
    pub chunks_run: u32,
    pub best_chunk: u32,
    pub val_roc_auc: Vec<f64>,
    pub metrics: SiteMetrics,
}

/// Non-federated baseline: the site trains alone in chunks of `local_epochs`,
/// at most `rounds` chunks, with the same early stopping as a federated run
/// applied to its own validation ROC-AUC.
pub fn local_baseline(dataset: &CohortDataset, study: &StudyConfig) -> Result<LocalReport> {
    dataset.validate_for_federation()?;
    study.validate()?;
    let site = dataset.site_id();
    let train = dataset.split_data(Split::Train);
    let val = dataset.split_data(Split::Val);
    let test = dataset.split_data(Split::Test);
    let mut model = build_mlp(&study.model.layer_dims, study.model.dropout, init_seed(study.seed))?;
    let mut adam = AdamState::new();
    let mut state = RoundState::new(study.rounds, study.patience);
    let mut best = model.to_param_vector();
    let mut history = Vec::new();
    loop {
        let chunk = state.begin_round();
        let mut rng = derived_rng(study.train.seed, &format!("local/{site}/chunk/{chunk}"));
        let cfg = &study.train;
        train_epochs(&mut model, train.x.view(), &train.labels, cfg, cfg.local_epochs, &LocalObjective::Plain, &mut adam, &mut rng)?;
        let current = model.to_param_vector();
        let auc = roc_auc(&scores(&mut model, &current, &val)?, &val.labels)?;
        history.push(auc);
        let progress = state.observe(auc);
        if progress.improved {
            best = current;
        }
        log::info!("Local-only {site} chunk {chunk}: val ROC-AUC {auc:.4}{}", if progress.improved { " *" } else { "" });
        if progress.stop {
            break;
        }
    }
    let val_scores = scores(&mut model, &best, &val)?;
    let test_scores = scores(&mut model, &best, &test)?;
    let metrics = SiteMetrics::evaluate(
        &val_scores,
        &val.labels,
        &test_scores,
        &test.labels,
        study.bootstrap_resamples,
        bootstrap_seed(study.seed, site),
    )?;
    Ok(LocalReport {
        site_id: site.to_string(),
        chunks_run: state.round(),
        best_chunk: state.best_round().expect("one chunk observed"),
        val_roc_auc: history,
        metrics,
    })
}
