use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use super::protocol::{decode, Message, ModelPurpose, SiteReport};
use super::study::{RoundState, StudyConfig};
use super::{init_seed, send_governed, SharedPsi, Transport};
use crate::aggregation::{fedavg_aggregate, fedmap_weights, weighted_average, ClientUpdate, StrategyKind};
use crate::error::{Error, Result};
use crate::governance::{Action, EventKind, GateOutcome, Governance};
use crate::icnn::{eval_regulariser, server_psi_step, IcnnRegulariser};
use crate::metrics::{macro_over, MacroMetrics, SiteMetrics};
use crate::nn::build_mlp;
use crate::params::ParamVector;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    RoundCap,
    Patience,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::RoundCap => "round cap reached",
            StopReason::Patience => "early stopping: patience exhausted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: u32,
    /// Aggregation weights in roster order.
    pub weights: Vec<f64>,
    pub val_roc_auc: Vec<f64>,
    pub macro_val_roc_auc: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiteResult {
    pub site_id: String,
    pub metrics: SiteMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalReport {
    pub study_id: String,
    pub strategy: StrategyKind,
    pub rounds_run: u32,
    pub best_round: u32,
    pub stop_reason: StopReason,
    pub history: Vec<RoundRecord>,
    pub sites: Vec<SiteResult>,
    pub macro_metrics: MacroMetrics,
}

struct Session {
    site_id: String,
    transport: Box<dyn Transport>,
}

struct Coordinator<'a> {
    study: &'a StudyConfig,
    gov: &'a mut Governance,
    sessions: Vec<Session>,
}

fn dropout(site: &str, reason: impl Into<String>) -> Error {
    Error::SiteDropout { site: site.to_string(), reason: reason.into() }
}

impl Coordinator<'_> {
    fn deadline(&self) -> Option<Instant> {
        self.study.window.map(|w| Instant::now() + w)
    }

    fn recv_from(session: &mut Session, deadline: Option<Instant>) -> Result<Message> {
        let timeout = deadline.map(|d| d.saturating_duration_since(Instant::now()));
        match session.transport.recv(timeout) {
            Ok(Some(frame)) => decode(&frame).map_err(|e| dropout(&session.site_id, format!("undecodable message: {e}"))),
            Ok(None) => Err(dropout(&session.site_id, "aggregation window closed")),
            Err(e) => Err(dropout(&session.site_id, e.to_string())),
        }
    }

    fn broadcast(&mut self, round: u32, purpose: ModelPurpose, params: &ParamVector, psi_digest: [u8; 32]) -> Result<()> {
        let msg = Message::GlobalModel { study_id: self.study.study_id.clone(), round, purpose, psi_digest, params: params.clone() };
        let frame_len = super::encode(&msg).len();
        for i in 0..self.sessions.len() {
            let site = self.sessions[i].site_id.clone();
            match send_governed(self.gov, &mut self.sessions[i].transport, &msg, &site)? {
                GateOutcome::Sent { .. } => {
                    let detail = format!("round={round} purpose={purpose:?} bytes={frame_len}");
                    self.gov.record(EventKind::Broadcast, &site, Action::PullModel.as_str(), &self.study.study_id, detail)?;
                }
                GateOutcome::Denied(decision) => {
                    self.stop_all(&format!("broadcast to {site} denied"));
                    return Err(Error::PolicyDenied {
                        subject: site,
                        action: Action::PullModel.as_str().into(),
                        resource: self.study.study_id.clone(),
                        decision: Box::new(decision),
                    });
                }
            }
        }
        Ok(())
    }

    /// Best-effort `Stop` to every session, still through the gate.
    fn stop_all(&mut self, reason: &str) {
        let msg = Message::Stop { study_id: self.study.study_id.clone(), reason: reason.to_string() };
        for i in 0..self.sessions.len() {
            let site = self.sessions[i].site_id.clone();
            if let Err(e) = send_governed(self.gov, &mut self.sessions[i].transport, &msg, &site) {
                log::warn!("could not send stop to {site}: {e}");
            }
        }
    }

    fn abort_round(&mut self, round: u32, err: Error) -> Error {
        log::error!("round {round} aborted: {err}");
        let site = match &err {
            Error::SiteDropout { site, .. } => site.clone(),
            _ => String::new(),
        };
        if let Err(e) = self.gov.record(EventKind::RoundAborted, &site, "", &self.study.study_id, format!("round={round}; {err}")) {
            log::error!("could not record aborted round: {e}");
        }
        self.stop_all(&format!("round {round} aborted"));
        err
    }

    fn collect_updates(&mut self, state: &mut RoundState, round: u32) -> Result<Vec<ClientUpdate>> {
        let deadline = self.deadline();
        for i in 0..self.sessions.len() {
            let msg = Self::recv_from(&mut self.sessions[i], deadline)?;
            let session = &self.sessions[i];
            let update = match msg {
                Message::Update { round: r, update, .. } if r == round && update.site_id == session.site_id => update,
                other => {
                    return Err(dropout(&session.site_id, format!("expected round {round} update, got {} for round {:?}", other.kind_name(), other.round())))
                }
            };
            let detail = format!("round={round} n={} sum_nll={} reg_value={}", update.n_samples, update.sum_nll, update.reg_value);
            let site = session.site_id.clone();
            self.gov.record(EventKind::Update, &site, Action::PushUpdate.as_str(), &self.study.study_id, detail)?;
            state.accept_update(&self.study.roster, update)?;
        }
        state.take_updates(&self.study.roster)
    }

    fn collect_reports(&mut self, round: u32) -> Result<Vec<SiteReport>> {
        let deadline = self.deadline();
        let mut out = Vec::with_capacity(self.sessions.len());
        for session in &mut self.sessions {
            match Self::recv_from(session, deadline)? {
                Message::Metrics { round: r, report, .. } if r == round && report.site_id == session.site_id => out.push(report),
                other => {
                    return Err(dropout(&session.site_id, format!("expected round {round} metrics, got {}", other.kind_name())));
                }
            }
        }
        Ok(out)
    }
}

/// Runs one study to completion over already-connected site sessions.
///
/// Sessions may arrive in any order; each is bound to a site by its `Join`.
/// Updates are aggregated in roster order.
pub fn coordinator_run(
    study: &StudyConfig,
    transports: Vec<Box<dyn Transport>>,
    gov: &mut Governance,
    psi: Option<SharedPsi>,
) -> Result<FinalReport> {
    study.validate()?;
    if transports.len() != study.roster.len() {
        return Err(Error::Config(format!("{} sessions for a roster of {}", transports.len(), study.roster.len())));
    }
    let join_deadline = study.window.map(|w| Instant::now() + w);
    let mut joined: Vec<Option<Session>> = (0..study.roster.len()).map(|_| None).collect();
    for mut transport in transports {
        let timeout = join_deadline.map(|d| d.saturating_duration_since(Instant::now()));
        let frame = transport.recv(timeout)?.ok_or_else(|| dropout("?", "no join before the window closed"))?;
        let (study_id, site_id) = match decode(&frame)? {
            Message::Join { study_id, site_id } => (study_id, site_id),
            other => return Err(Error::InvalidInput(format!("expected join, got {}", other.kind_name()))),
        };
        if study_id != study.study_id {
            return Err(Error::InvalidInput(format!("site {site_id} joined study {study_id:?}")));
        }
        let slot = study
            .roster
            .iter()
            .position(|s| *s == site_id)
            .ok_or_else(|| Error::InvalidInput(format!("site {site_id:?} is not on the roster")))?;
        if joined[slot].is_some() {
            return Err(Error::InvalidInput(format!("site {site_id:?} joined twice")));
        }
        gov.record(EventKind::Join, &site_id, Action::JoinStudy.as_str(), &study.study_id, "")?;
        joined[slot] = Some(Session { site_id, transport });
    }
    let sessions = joined.into_iter().map(|s| s.expect("every slot filled")).collect();
    let mut c = Coordinator { study, gov, sessions };

    let kind = study.strategy.kind;
    let model = build_mlp(&study.model.layer_dims, study.model.dropout, init_seed(study.seed))?;
    let psi = match (kind, psi) {
        (StrategyKind::FedMap, Some(p)) => Some(p),
        (StrategyKind::FedMap, None) => {
            let p = IcnnRegulariser::new(model.trainable_count(), &study.strategy.regulariser.hidden_dims, derive_seed(study.seed, "icnn"))?;
            Some(Arc::new(std::sync::RwLock::new(p)))
        }
        _ => None,
    };
    let digest = |psi: &Option<SharedPsi>| -> Result<[u8; 32]> {
        match psi {
            Some(p) => Ok(super::read_psi(p)?.digest()),
            None => Ok([0; 32]),
        }
    };

    let mut theta_g = model.to_param_vector();
    let mut best = theta_g.clone();
    let mut state = RoundState::new(study.rounds, study.patience);
    let mut history = Vec::new();
    let stop_reason = loop {
        let round = state.begin_round();
        c.broadcast(round, ModelPurpose::Train, &theta_g, digest(&psi)?)?;
        let mut updates = match c.collect_updates(&mut state, round) {
            Ok(u) => u,
            Err(e) => return Err(c.abort_round(round, e)),
        };
        let weights = match (&psi, kind) {
            (Some(shared), StrategyKind::FedMap) => {
                let cfg = &study.strategy.regulariser;
                {
                    let guard = super::read_psi(shared)?;
                    for u in &mut updates {
                        u.reg_value = eval_regulariser(&u.params, &theta_g, &guard, cfg)?;
                    }
                }
                let w = fedmap_weights(&updates, &study.strategy)?;
                let next = weighted_average(&updates, &w)?;
                let mut guard = shared.write().map_err(|_| Error::Training("regulariser lock poisoned".into()))?;
                server_psi_step(&mut guard, &updates, &theta_g, &w, cfg)?;
                theta_g = next;
                w
            }
            _ => {
                let total: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
                let w = updates.iter().map(|u| u.n_samples as f64 / total).collect();
                theta_g = fedavg_aggregate(&updates)?;
                w
            }
        };
        let detail = format!("round={round} strategy={} weights={weights:?}", kind.name());
        c.gov.record(EventKind::Aggregation, "coordinator", "", &study.study_id, detail)?;

        c.broadcast(round, ModelPurpose::Evaluate, &theta_g, digest(&psi)?)?;
        let reports = match c.collect_reports(round) {
            Ok(r) => r,
            Err(e) => return Err(c.abort_round(round, e)),
        };
        let val: Vec<f64> = reports.iter().map(|r| r.val_roc_auc).collect();
        let macro_val = val.iter().sum::<f64>() / val.len() as f64;
        let progress = state.observe(macro_val);
        if progress.improved {
            best = theta_g.clone();
        }
        log::info!("{} round {round}: macro val ROC-AUC {macro_val:.4}{}", kind.display_name(), if progress.improved { " *" } else { "" });
        history.push(RoundRecord { round, weights, val_roc_auc: val, macro_val_roc_auc: macro_val, improved: progress.improved });
        if progress.stop {
            break if state.stale_rounds() >= study.patience { StopReason::Patience } else { StopReason::RoundCap };
        }
    };

    let best_round = state.best_round().expect("at least one round observed");
    c.broadcast(best_round, ModelPurpose::Final, &best, digest(&psi)?)?;
    let reports = match c.collect_reports(best_round) {
        Ok(r) => r,
        Err(e) => return Err(c.abort_round(best_round, e)),
    };
    let mut sites = Vec::with_capacity(reports.len());
    for r in reports {
        let metrics = r.test.ok_or_else(|| dropout(&r.site_id, "final report without test metrics"))?;
        sites.push(SiteResult { site_id: r.site_id, metrics });
    }
    let all: Vec<SiteMetrics> = sites.iter().map(|s| s.metrics).collect();
    let macro_metrics = macro_over(&all).expect("non-empty roster");
    c.stop_all(stop_reason.as_str());
    let detail = format!("strategy={} rounds_run={} best_round={best_round} stop={}", kind.name(), state.round(), stop_reason.as_str());
    c.gov.record(EventKind::RunComplete, "coordinator", "", &study.study_id, detail)?;
    Ok(FinalReport {
        study_id: study.study_id.clone(),
        strategy: kind,
        rounds_run: state.round(),
        best_round,
        stop_reason,
        history,
        sites,
        macro_metrics,
    })
}
