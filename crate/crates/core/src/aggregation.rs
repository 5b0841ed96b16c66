//! Server-side aggregation rules as pure functions over client updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icnn::RegulariserConfig;
use crate::params::{Gradient, ParamVector};

/// One site's contribution to a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub site_id: String,
    pub params: ParamVector,
    pub n_samples: u64,
    /// Negative log-likelihood summed over the site's training rows.
    pub sum_nll: f64,
    /// `R(theta_k; theta_g, psi)`; zero for strategies without a learned prior.
    pub reg_value: f64,
}

impl ClientUpdate {
    pub fn new(site_id: impl Into<String>, params: ParamVector, n_samples: u64, sum_nll: f64, reg_value: f64) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::InvalidInput("client update needs at least one sample".into()));
        }
        if !(sum_nll.is_finite() && sum_nll >= 0.0) {
            return Err(Error::InvalidInput(format!("sum_nll must be finite and non-negative, got {sum_nll}")));
        }
        Ok(Self { site_id: site_id.into(), params, n_samples, sum_nll, reg_value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    FedAvg,
    FedProx,
    FedMap,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::FedProx => "fedprox",
            StrategyKind::FedMap => "fedmap",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            StrategyKind::FedAvg => "FedAvg",
            StrategyKind::FedProx => "FedProx",
            StrategyKind::FedMap => "FedMAP",
        }
    }
}

/// How the data-fit term enters the FedMAP log-weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LikelihoodScale {
    /// Summed NLL: the literal likelihood, dominated by dataset size.
    Sum,
    /// Per-sample mean NLL.
    #[default]
    Mean,
}

/// Which parameters a site evaluates after each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluationTarget {
    /// The aggregated global model.
    Global,
    /// The site's own post-training parameters for that round.
    Personalised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default = "default_mu")]
    pub mu_p: f64,
    #[serde(default)]
    pub regulariser: RegulariserConfig,
    #[serde(default)]
    pub likelihood_scale: LikelihoodScale,
    /// Defaults to personalised for FedMAP and global otherwise.
    #[serde(default)]
    pub evaluation: Option<EvaluationTarget>,
}

fn default_mu() -> f64 {
    0.05
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            mu_p: default_mu(),
            regulariser: RegulariserConfig::default(),
            likelihood_scale: LikelihoodScale::default(),
            evaluation: None,
        }
    }

    pub fn evaluation_target(&self) -> EvaluationTarget {
        self.evaluation.unwrap_or(match self.kind {
            StrategyKind::FedMap => EvaluationTarget::Personalised,
            StrategyKind::FedAvg | StrategyKind::FedProx => EvaluationTarget::Global,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu_p >= 0.0 && self.mu_p.is_finite()) {
            return Err(Error::Config(format!("mu_p must be non-negative, got {}", self.mu_p)));
        }
        self.regulariser.validate()
    }
}

fn check_updates(updates: &[ClientUpdate]) -> Result<()> {
    let first = updates
        .first()
        .ok_or_else(|| Error::InvalidInput("aggregation needs at least one client update".into()))?;
    for u in &updates[1..] {
        first.params.ensure_same_layout(&u.params)?;
    }
    Ok(())
}

/// `sum_k w_k theta_k` accumulated in `f64`, for weights that sum to one.
pub fn weighted_average(updates: &[ClientUpdate], weights: &[f64]) -> Result<ParamVector> {
    check_updates(updates)?;
    if weights.len() != updates.len() {
        return Err(Error::Shape(format!("{} weights for {} updates", weights.len(), updates.len())));
    }
    let layout = updates[0].params.layout().clone();
    let mut acc = vec![0.0f64; layout.len()];
    for (u, &w) in updates.iter().zip(weights) {
        for (a, &v) in acc.iter_mut().zip(u.params.values()) {
            *a += w * f64::from(v);
        }
    }
    ParamVector::from_f64(layout, &acc)
}

/// Sample-size weighted mean `sum_k (N_k / N) theta_k`.
///
/// The numerator is accumulated with integer weights and divided once, so equal
/// sample counts reproduce the unweighted mean.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ParamVector> {
    check_updates(updates)?;
    let layout = updates[0].params.layout().clone();
    let total: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
    let mut acc = vec![0.0f64; layout.len()];
    for u in updates {
        let n = u.n_samples as f64;
        for (a, &v) in acc.iter_mut().zip(u.params.values()) {
            *a += n * f64::from(v);
        }
    }
    for a in &mut acc {
        *a /= total;
    }
    ParamVector::from_f64(layout, &acc)
}

/// `mu * (theta - theta_g)` on trainable coordinates.
pub fn fedprox_gradient_term(theta: &ParamVector, theta_g: &ParamVector, mu_p: f64) -> Result<Gradient> {
    theta.ensure_same_layout(theta_g)?;
    let layout = theta.layout().clone();
    let mut g = Gradient::zeros(layout.clone());
    for r in layout.trainable_ranges() {
        for i in r {
            g.values_mut()[i] = mu_p * (f64::from(theta.values()[i]) - f64::from(theta_g.values()[i]));
        }
    }
    Ok(g)
}

/// Unnormalised FedMAP log-weights `-(likelihood term) - R`.
pub fn fedmap_log_weights(updates: &[ClientUpdate], scale: LikelihoodScale) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::InvalidInput("aggregation needs at least one client update".into()));
    }
    updates
        .iter()
        .map(|u| {
            if !u.sum_nll.is_finite() || !u.reg_value.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite likelihood or regulariser from {}", u.site_id)));
            }
            let fit = match scale {
                LikelihoodScale::Sum => u.sum_nll,
                LikelihoodScale::Mean => u.sum_nll / u.n_samples as f64,
            };
            Ok(-fit - u.reg_value)
        })
        .collect()
}

/// Softmax via log-sum-exp.
pub fn normalise_log_weights(log_w: &[f64]) -> Vec<f64> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = shifted.iter().sum();
    shifted.into_iter().map(|s| s / total).collect()
}

/// Posterior-informed weights `w_k ∝ P(D_k | theta_k) exp(-R_k)`.
pub fn fedmap_weights(updates: &[ClientUpdate], cfg: &StrategyConfig) -> Result<Vec<f64>> {
    Ok(normalise_log_weights(&fedmap_log_weights(updates, cfg.likelihood_scale)?))
}

pub fn fedmap_aggregate(updates: &[ClientUpdate], cfg: &StrategyConfig) -> Result<ParamVector> {
    let w = fedmap_weights(updates, cfg)?;
    weighted_average(updates, &w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upd(site: &str, params: Vec<f32>, n: u64, nll: f64, reg: f64) -> ClientUpdate {
        ClientUpdate::new(site, ParamVector::flat(params), n, nll, reg).unwrap()
    }

    #[test]
    fn fedavg_weighted_mean() {
        let out = fedavg_aggregate(&[upd("a", vec![1.0, 1.0], 1, 0.0, 0.0), upd("b", vec![3.0, 3.0], 3, 0.0, 0.0)]).unwrap();
        assert_eq!(out.values(), &[2.5, 2.5]);
        let single = upd("a", vec![0.1, -7.25], 9, 0.0, 0.0);
        assert_eq!(fedavg_aggregate(std::slice::from_ref(&single)).unwrap(), single.params);
    }

    #[test]
    fn empty_and_mismatched_sets_fail() {
        assert!(fedavg_aggregate(&[]).is_err());
        assert!(fedmap_weights(&[], &StrategyConfig::new(StrategyKind::FedMap)).is_err());
        let a = upd("a", vec![1.0], 1, 0.0, 0.0);
        let b = upd("b", vec![1.0, 2.0], 1, 0.0, 0.0);
        assert!(fedavg_aggregate(&[a, b]).is_err());
    }

    #[test]
    fn fedprox_term() {
        let t = ParamVector::flat(vec![2.0]);
        let g = ParamVector::flat(vec![0.0]);
        assert!((fedprox_gradient_term(&t, &g, 0.05).unwrap().values()[0] - 0.1).abs() < 1e-12);
        assert_eq!(fedprox_gradient_term(&t, &t, 0.05).unwrap().values(), &[0.0]);
    }

    #[test]
    fn fedmap_weight_examples() {
        let cfg = StrategyConfig::new(StrategyKind::FedMap);
        let w = fedmap_weights(&[upd("a", vec![0.0], 10, 3.0, 0.5), upd("b", vec![1.0], 10, 3.0, 0.5)], &cfg).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        let w = fedmap_weights(&[upd("a", vec![0.0], 10, 3.0, 0.5)], &cfg).unwrap();
        assert_eq!(w, vec![1.0]);
        let ln2 = std::f64::consts::LN_2;
        let w = fedmap_weights(&[upd("a", vec![0.0], 10, 3.0, 0.0), upd("b", vec![1.0], 10, 3.0, ln2)], &cfg).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12 && (w[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn likelihood_scale_changes_weights() {
        let sum_cfg = StrategyConfig { likelihood_scale: LikelihoodScale::Sum, ..StrategyConfig::new(StrategyKind::FedMap) };
        let mean_cfg = StrategyConfig::new(StrategyKind::FedMap);
        // same per-sample fit, different sizes
        let ups = [upd("big", vec![0.0], 400, 40.0, 0.0), upd("small", vec![1.0], 100, 10.0, 0.0)];
        let mean_w = fedmap_weights(&ups, &mean_cfg).unwrap();
        assert!((mean_w[0] - 0.5).abs() < 1e-12);
        let sum_w = fedmap_weights(&ups, &sum_cfg).unwrap();
        assert!(sum_w[1] > 0.999_999, "summed NLL favours the smaller total loss");
    }

    #[test]
    fn fedmap_limits() {
        let cfg = StrategyConfig::new(StrategyKind::FedMap);
        let sym = fedmap_aggregate(&[upd("a", vec![1.0, 4.0], 5, 2.0, 0.1), upd("b", vec![3.0, 0.0], 5, 2.0, 0.1)], &cfg).unwrap();
        assert_eq!(sym.values(), &[2.0, 2.0]);
        let dom = fedmap_aggregate(&[upd("a", vec![1.0, 4.0], 5, 2.0, 0.0), upd("b", vec![3.0, 0.0], 5, 2.0, 1e6)], &cfg).unwrap();
        assert_eq!(dom.values(), &[1.0, 4.0]);
        let bad = ClientUpdate { reg_value: f64::NAN, ..upd("a", vec![1.0], 1, 0.0, 0.0) };
        assert!(fedmap_weights(&[bad], &cfg).is_err());
    }

    #[test]
    fn huge_likelihoods_do_not_overflow() {
        let cfg = StrategyConfig { likelihood_scale: LikelihoodScale::Sum, ..StrategyConfig::new(StrategyKind::FedMap) };
        let w = fedmap_weights(&[upd("a", vec![0.0], 10, 1e6, 0.0), upd("b", vec![0.0], 10, 1e6 + 1.0, 0.0)], &cfg).unwrap();
        assert!(w.iter().all(|v| v.is_finite()));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_evaluation_targets() {
        assert_eq!(StrategyConfig::new(StrategyKind::FedMap).evaluation_target(), EvaluationTarget::Personalised);
        assert_eq!(StrategyConfig::new(StrategyKind::FedAvg).evaluation_target(), EvaluationTarget::Global);
    }
}
