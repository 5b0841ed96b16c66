use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::aggregation::{ClientUpdate, StrategyConfig};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_BOOTSTRAP;
use crate::nn::{TrainConfig, DEFAULT_DROPOUT, DEFAULT_LAYER_DIMS};

pub const DEFAULT_ROUNDS: u32 = 50;
pub const DEFAULT_PATIENCE: u32 = 3;
pub const MIN_IMPROVEMENT: f64 = 1e-4;
pub const TCP_WINDOW: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layer_dims: Vec<usize>,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { layer_dims: DEFAULT_LAYER_DIMS.to_vec(), dropout: DEFAULT_DROPOUT }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub study_id: String,
    pub rounds: u32,
    pub patience: u32,
    pub strategy: StrategyConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// Site ids in the order updates are collected and aggregated.
    pub roster: Vec<String>,
    /// How long the coordinator waits for each round's replies; `None` waits forever.
    pub window: Option<Duration>,
    pub seed: u64,
    pub bootstrap_resamples: usize,
}

impl StudyConfig {
    pub fn new(study_id: impl Into<String>, strategy: StrategyConfig, roster: Vec<String>, seed: u64) -> Self {
        Self {
            study_id: study_id.into(),
            rounds: DEFAULT_ROUNDS,
            patience: DEFAULT_PATIENCE,
            strategy,
            train: TrainConfig { seed, ..TrainConfig::default() },
            model: ModelConfig::default(),
            roster,
            window: None,
            seed,
            bootstrap_resamples: DEFAULT_BOOTSTRAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.study_id.is_empty() {
            return Err(Error::Config("study_id must not be empty".into()));
        }
        if self.roster.is_empty() {
            return Err(Error::Config("participant roster is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.roster.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(Error::Config(format!("site {dup:?} appears twice in the roster")));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.bootstrap_resamples == 0 {
            return Err(Error::Config("bootstrap_resamples must be positive".into()));
        }
        if self.model.layer_dims.len() < 2 || self.model.layer_dims.last() != Some(&1) {
            return Err(Error::Config("layer_dims must end in a single output unit".into()));
        }
        self.train.validate()?;
        self.strategy.validate()
    }
}

/// Outcome of feeding one round's validation metric to early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub improved: bool,
    pub stop: bool,
}

/// Per-round barrier and global early-stopping state.
#[derive(Debug, Clone)]
pub struct RoundState {
    round: u32,
    received: BTreeMap<String, ClientUpdate>,
    best_metric: Option<f64>,
    best_round: Option<u32>,
    stale_rounds: u32,
    patience: u32,
    rounds: u32,
    aggregated: bool,
}

impl RoundState {
    pub fn new(rounds: u32, patience: u32) -> Self {
        Self {
            round: 0,
            received: BTreeMap::new(),
            best_metric: None,
            best_round: None,
            stale_rounds: 0,
            patience,
            rounds,
            aggregated: false,
        }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn best_metric(&self) -> Option<f64> {
        self.best_metric
    }

    pub fn best_round(&self) -> Option<u32> {
        self.best_round
    }

    pub fn stale_rounds(&self) -> u32 {
        self.stale_rounds
    }

    pub fn begin_round(&mut self) -> u32 {
        self.round += 1;
        self.received.clear();
        self.aggregated = false;
        self.round
    }

    pub fn accept_update(&mut self, roster: &[String], update: ClientUpdate) -> Result<()> {
        if !roster.contains(&update.site_id) {
            return Err(Error::InvalidInput(format!("update from {:?}, which is not on the roster", update.site_id)));
        }
        if self.received.contains_key(&update.site_id) {
            return Err(Error::InvalidInput(format!("second update from {:?} in round {}", update.site_id, self.round)));
        }
        self.received.insert(update.site_id.clone(), update);
        Ok(())
    }

    pub fn missing<'a>(&self, roster: &'a [String]) -> Vec<&'a str> {
        roster.iter().filter(|s| !self.received.contains_key(*s)).map(String::as_str).collect()
    }

    /// Exactly one update per roster site, in roster order. Callable once per round.
    pub fn take_updates(&mut self, roster: &[String]) -> Result<Vec<ClientUpdate>> {
        if self.aggregated {
            return Err(Error::InvalidInput(format!("round {} was already aggregated", self.round)));
        }
        let missing = self.missing(roster);
        if !missing.is_empty() {
            return Err(Error::InvalidInput(format!("round {} is missing updates from {missing:?}", self.round)));
        }
        self.aggregated = true;
        Ok(roster.iter().map(|s| self.received.remove(s).expect("checked")).collect())
    }

    /// Improvement means exceeding the best so far by more than [`MIN_IMPROVEMENT`].
    pub fn observe(&mut self, metric: f64) -> Progress {
        let improved = match self.best_metric {
            None => true,
            Some(best) => metric > best + MIN_IMPROVEMENT,
        };
        if improved {
            self.best_metric = Some(metric);
            self.best_round = Some(self.round);
            self.stale_rounds = 0;
        } else {
            self.stale_rounds += 1;
        }
        Progress { improved, stop: self.stale_rounds >= self.patience || self.round >= self.rounds }
    }
}
