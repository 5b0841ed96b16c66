use std::collections::BTreeMap;

use super::protocol::{decode, Message, ModelPurpose, SiteReport};
use super::{init_seed, read_psi, send_governed, SharedPsi, StudyConfig, Transport};
use crate::aggregation::{ClientUpdate, EvaluationTarget, StrategyKind};
use crate::data::{CohortDataset, Split, SplitData};
use crate::error::{Error, Result};
use crate::governance::{Decision, GateOutcome, Governance};
use crate::icnn::{eval_regulariser, IcnnRegulariser, MapPrior};
use crate::metrics::{roc_auc, SiteMetrics};
use crate::nn::{bce_loss, build_mlp, predict_rows, train_epochs, AdamState, LocalObjective, MlpClassifier};
use crate::params::ParamVector;
use crate::seed::{derive_seed, derived_rng};

/// What a site did during a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SiteSummary {
    pub updates_sent: u32,
    /// Decisions that blocked one of this site's messages.
    pub denials: Vec<Decision>,
    pub stop_reason: Option<String>,
}

pub(crate) fn scores(model: &mut MlpClassifier, params: &ParamVector, split: &SplitData) -> Result<Vec<f64>> {
    model.load_param_vector(params)?;
    predict_rows(model, split.x.view())
}

pub(crate) fn bootstrap_seed(master: u64, site_id: &str) -> u64 {
    derive_seed(master, &format!("bootstrap/{site_id}"))
}

struct Site<'a> {
    id: &'a str,
    study: &'a StudyConfig,
    psi: Option<&'a SharedPsi>,
    model: MlpClassifier,
    train: SplitData,
    val: SplitData,
    test: SplitData,
    personalised: BTreeMap<u32, ParamVector>,
}

impl Site<'_> {
    fn train_round(&mut self, round: u32, theta_g: &ParamVector, psi_digest: &[u8; 32]) -> Result<ClientUpdate> {
        let strategy = &self.study.strategy;
        self.model.load_param_vector(theta_g)?;
        let mut rng = derived_rng(self.study.train.seed, &format!("site/{}/round/{round}", self.id));
        let mut adam = AdamState::new();
        let cfg = &self.study.train;
        let x = self.train.x.view();
        let n = self.train.len() as u64;
        let mut reg_value = 0.0;
        match strategy.kind {
            StrategyKind::FedAvg => {
                train_epochs(&mut self.model, x, &self.train.labels, cfg, cfg.local_epochs, &LocalObjective::Plain, &mut adam, &mut rng)?;
            }
            StrategyKind::FedProx => {
                let anchor = theta_g.to_f64();
                let objective = LocalObjective::Proximal { anchor: &anchor, mu: strategy.mu_p };
                train_epochs(&mut self.model, x, &self.train.labels, cfg, cfg.local_epochs, &objective, &mut adam, &mut rng)?;
            }
            StrategyKind::FedMap => {
                let guard;
                let fallback;
                let psi: &IcnnRegulariser = match self.psi {
                    Some(shared) => {
                        guard = read_psi(shared)?;
                        if &guard.digest() != psi_digest {
                            return Err(Error::InvalidInput(format!(
                                "round {round}: regulariser digest differs from the one announced by the coordinator"
                            )));
                        }
                        &guard
                    }
                    None => {
                        // Without the network only the quadratic terms reach the gradient.
                        fallback = IcnnRegulariser::zeros(self.model.trainable_count(), &strategy.regulariser.hidden_dims)?;
                        &fallback
                    }
                };
                let prior = MapPrior { psi, anchor: theta_g.trainable_f64(), cfg: &strategy.regulariser };
                // Per-sample form of sum_nll + R.
                let objective = LocalObjective::Map { prior: &prior, scale: 1.0 / n as f64 };
                train_epochs(&mut self.model, x, &self.train.labels, cfg, cfg.local_epochs, &objective, &mut adam, &mut rng)?;
                reg_value = eval_regulariser(&self.model.to_param_vector(), theta_g, psi, &strategy.regulariser)?;
            }
        }
        let theta_k = self.model.to_param_vector();
        let probs = predict_rows(&self.model, x)?;
        let (_, sum_nll) = bce_loss(&probs, &self.train.labels)?;
        if strategy.evaluation_target() == EvaluationTarget::Personalised {
            self.personalised.insert(round, theta_k.clone());
        }
        ClientUpdate::new(self.id, theta_k, n, sum_nll, reg_value)
    }

    fn eval_params<'p>(&'p self, round: u32, received: &'p ParamVector) -> &'p ParamVector {
        self.personalised.get(&round).unwrap_or(received)
    }

    fn report(&mut self, round: u32, purpose: ModelPurpose, received: &ParamVector) -> Result<SiteReport> {
        let params = self.eval_params(round, received).clone();
        let val_scores = scores(&mut self.model, &params, &self.val)?;
        let val_roc_auc = roc_auc(&val_scores, &self.val.labels)?;
        let test = if purpose == ModelPurpose::Final {
            let test_scores = scores(&mut self.model, &params, &self.test)?;
            Some(SiteMetrics::evaluate(
                &val_scores,
                &self.val.labels,
                &test_scores,
                &self.test.labels,
                self.study.bootstrap_resamples,
                bootstrap_seed(self.study.seed, self.id),
            )?)
        } else {
            None
        };
        Ok(SiteReport { site_id: self.id.to_string(), val_roc_auc, test })
    }
}

/// Site node loop: join, then answer every global model until `Stop`.
///
/// A denied update is logged and the site waits for the next message.
pub fn site_run(
    site_id: &str,
    dataset: &CohortDataset,
    transport: &mut dyn Transport,
    gov: &mut Governance,
    study: &StudyConfig,
    psi: Option<&SharedPsi>,
) -> Result<SiteSummary> {
    dataset.validate_for_federation()?;
    let mut site = Site {
        id: site_id,
        study,
        psi,
        model: build_mlp(&study.model.layer_dims, study.model.dropout, init_seed(study.seed))?,
        train: dataset.split_data(Split::Train),
        val: dataset.split_data(Split::Val),
        test: dataset.split_data(Split::Test),
        personalised: BTreeMap::new(),
    };
    if dataset.width() != site.model.input_dim() {
        return Err(Error::Shape(format!("site {site_id} has width {} but the model expects {}", dataset.width(), site.model.input_dim())));
    }
    let mut summary = SiteSummary::default();
    let send = |gov: &mut Governance, transport: &mut dyn Transport, msg: &Message, summary: &mut SiteSummary| -> Result<bool> {
        match send_governed(gov, transport, msg, site_id)? {
            GateOutcome::Sent { .. } => Ok(true),
            GateOutcome::Denied(d) => {
                log::warn!("site {site_id}: {} denied: {d}", msg.kind_name());
                summary.denials.push(d);
                Ok(false)
            }
        }
    };

    let join = Message::Join { study_id: study.study_id.clone(), site_id: site_id.to_string() };
    if !send(gov, transport, &join, &mut summary)? {
        let decision = summary.denials.last().cloned().expect("denial recorded");
        return Err(Error::PolicyDenied {
            subject: site_id.to_string(),
            action: "join_study".into(),
            resource: study.study_id.clone(),
            decision: Box::new(decision),
        });
    }

    let mut last_round = 0;
    loop {
        let frame = transport.recv(None)?.ok_or_else(|| Error::Transport("receive timed out".into()))?;
        let msg = decode(&frame)?;
        if msg.study_id() != study.study_id {
            return Err(Error::InvalidInput(format!("message for study {:?} at site {site_id}", msg.study_id())));
        }
        match msg {
            Message::GlobalModel { round, purpose, psi_digest, params, .. } => {
                if purpose != ModelPurpose::Final && round < last_round {
                    return Err(Error::InvalidInput(format!("round went backwards from {last_round} to {round}")));
                }
                last_round = last_round.max(round);
                let reply = match purpose {
                    ModelPurpose::Train => {
                        let update = site.train_round(round, &params, &psi_digest)?;
                        Message::Update { study_id: study.study_id.clone(), round, update }
                    }
                    ModelPurpose::Evaluate | ModelPurpose::Final => {
                        let report = site.report(round, purpose, &params)?;
                        Message::Metrics { study_id: study.study_id.clone(), round, report }
                    }
                };
                if send(gov, transport, &reply, &mut summary)? && matches!(reply, Message::Update { .. }) {
                    summary.updates_sent += 1;
                }
            }
            Message::Stop { reason, .. } => {
                log::info!("site {site_id}: stopping ({reason})");
                summary.stop_reason = Some(reason);
                return Ok(summary);
            }
            other => {
                return Err(Error::InvalidInput(format!("site {site_id} received unexpected {}", other.kind_name())));
            }
        }
    }
}
