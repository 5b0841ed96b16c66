//! Config-driven runs: local baselines and federated strategies over a set of
//! sites, with results, report and audit logs written to a run directory.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::aggregation::{EvaluationTarget, LikelihoodScale, StrategyConfig, StrategyKind};
use crate::data::{generate_cohort, load_embeddings_csv, preset, CohortDataset};
use crate::error::{Error, Result};
use crate::federation::{
    coordinator_run, local_baseline, memory_pair, new_shared_psi, site_run, FinalReport, ModelConfig, SiteSummary, StudyConfig, TcpHub,
    TcpTransport, Transport, TCP_WINDOW,
};
use crate::governance::{signing_key_for, write_public_key, Action, AuditLog, Clock, Governance, LogicalClock, PolicyRule, PolicySet, SystemClock};
use crate::icnn::RegulariserConfig;
use crate::metrics::{round_to, SiteMetrics};
use crate::seed::derive_seed;

pub const COORDINATOR: &str = "coordinator";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const REPORT_FILE: &str = "report.txt";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const POLICY_SNAPSHOT: &str = "policy.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Local,
    FedAvg,
    FedProx,
    FedMap,
}

impl Method {
    pub fn display_name(self) -> &'static str {
        match self {
            Method::Local => "Local-only",
            Method::FedAvg => "FedAvg",
            Method::FedProx => "FedProx",
            Method::FedMap => "FedMAP",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Method::Local => "local",
            Method::FedAvg => "fedavg",
            Method::FedProx => "fedprox",
            Method::FedMap => "fedmap",
        }
    }

    pub fn strategy(self) -> Option<StrategyKind> {
        match self {
            Method::Local => None,
            Method::FedAvg => Some(StrategyKind::FedAvg),
            Method::FedProx => Some(StrategyKind::FedProx),
            Method::FedMap => Some(StrategyKind::FedMap),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub study_id: String,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "default_patience")]
    pub patience: u32,
    /// Per-phase reply window in seconds. Defaults to 300 for both transports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_secs: Option<f64>,
}

fn default_rounds() -> u32 {
    crate::federation::DEFAULT_ROUNDS
}

fn default_patience() -> u32 {
    crate::federation::DEFAULT_PATIENCE
}

/// Local optimiser settings. The training seed is always derived from the
/// master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = crate::nn::TrainConfig::default();
        Self { learning_rate: t.learning_rate, batch_size: t.batch_size, local_epochs: t.local_epochs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategySection {
    pub mu_p: f64,
    pub regulariser: RegulariserConfig,
    pub likelihood_scale: LikelihoodScale,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fedmap_evaluation: Option<EvaluationTarget>,
}

impl Default for StrategySection {
    fn default() -> Self {
        let s = StrategyConfig::new(StrategyKind::FedMap);
        Self { mu_p: s.mu_p, regulariser: s.regulariser, likelihood_scale: s.likelihood_scale, fedmap_evaluation: None }
    }
}

/// A site is either a named synthetic preset or a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
}

pub const DEFAULT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub strategies: Vec<Method>,
    pub output_dir: PathBuf,
    #[serde(default = "default_bootstrap")]
    pub bootstrap_resamples: usize,
    /// Policy file; when absent every roster site is granted its actions for rounds `1..=rounds`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
    #[serde(default = "default_listen")]
    pub tcp_listen: String,
    pub study: StudySection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub strategy: StrategySection,
    pub sites: Vec<SiteEntry>,
}

fn default_bootstrap() -> usize {
    crate::metrics::DEFAULT_BOOTSTRAP
}

fn default_listen() -> String {
    "127.0.0.1:0".to_string()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate_shape()?;
        Ok(cfg)
    }

    /// Loads a config file. Relative paths inside it resolve against the
    /// file's directory, and referenced files must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.policy.as_mut() {
            resolve(p);
        }
        for s in &mut cfg.sites {
            if let Some(p) = s.csv.as_mut() {
                resolve(p);
            }
        }
        resolve(&mut cfg.output_dir);
        cfg.check_files()?;
        Ok(cfg)
    }

    fn validate_shape(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        let mut seen = HashSet::new();
        if let Some(m) = self.strategies.iter().find(|m| !seen.insert(**m)) {
            return Err(Error::Config(format!("strategy {} listed twice", m.key())));
        }
        if self.sites.is_empty() {
            return Err(Error::Config("at least one site is required".into()));
        }
        for (i, s) in self.sites.iter().enumerate() {
            match (&s.preset, &s.csv) {
                (Some(_), None) => {}
                (None, Some(_)) if s.scale.is_none() => {}
                (None, Some(_)) => return Err(Error::Config(format!("site {i}: scale applies only to presets"))),
                _ => return Err(Error::Config(format!("site {i}: give exactly one of preset or csv"))),
            }
        }
        if let Some(w) = self.study.window_secs {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("window_secs must be positive, got {w}")));
            }
        }
        Ok(())
    }

    pub fn check_files(&self) -> Result<()> {
        let paths = self.policy.iter().chain(self.sites.iter().filter_map(|s| s.csv.as_ref()));
        for p in paths {
            if !p.is_file() {
                return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load_sites(&self) -> Result<Vec<CohortDataset>> {
        let mut out = Vec::with_capacity(self.sites.len());
        for s in &self.sites {
            let ds = match (&s.preset, &s.csv) {
                (Some(name), _) => {
                    let spec = preset(name, s.scale.unwrap_or(DEFAULT_SCALE))?;
                    generate_cohort(&spec, derive_seed(self.master_seed, &format!("data/{name}")))?
                }
                (None, Some(path)) => load_embeddings_csv(path)?,
                (None, None) => unreachable!("validated"),
            };
            out.push(ds);
        }
        let mut ids = HashSet::new();
        if let Some(d) = out.iter().find(|d| !ids.insert(d.site_id().to_string())) {
            return Err(Error::Config(format!("two sites share the id {:?}", d.site_id())));
        }
        Ok(out)
    }

    /// Study settings for one method. Local baselines reuse the FedAvg settings
    /// for training and early stopping.
    pub fn study_config(&self, method: Method, roster: Vec<String>, mode: TransportMode) -> StudyConfig {
        let kind = method.strategy().unwrap_or(StrategyKind::FedAvg);
        let mut strategy = StrategyConfig::new(kind);
        strategy.mu_p = self.strategy.mu_p;
        strategy.regulariser = self.strategy.regulariser.clone();
        strategy.likelihood_scale = self.strategy.likelihood_scale;
        if kind == StrategyKind::FedMap {
            strategy.evaluation = self.strategy.fedmap_evaluation;
        }
        let mut study = StudyConfig::new(self.study.study_id.clone(), strategy, roster, self.master_seed);
        study.rounds = self.study.rounds;
        study.patience = self.study.patience;
        study.train.learning_rate = self.train.learning_rate;
        study.train.batch_size = self.train.batch_size;
        study.train.local_epochs = self.train.local_epochs;
        study.train.seed = derive_seed(self.master_seed, "train");
        study.model = self.model.clone();
        study.bootstrap_resamples = self.bootstrap_resamples;
        study.window = Some(self.study.window_secs.map(Duration::from_secs_f64).unwrap_or(match mode {
            TransportMode::Memory | TransportMode::Tcp => TCP_WINDOW,
        }));
        study
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportMode {
    Memory,
    Tcp,
}

/// Grants each roster site join, pull, push and metrics on the study, with
/// the round-scoped actions limited to rounds `1..=rounds`.
pub fn default_policy(study_id: &str, roster: &[String], rounds: u32) -> PolicySet {
    let mut rules = Vec::new();
    for site in roster {
        rules.push(PolicyRule::permit(format!("{site}-join"), site.clone(), Action::JoinStudy, study_id));
        for (action, tag) in [(Action::PullModel, "pull"), (Action::PushUpdate, "push"), (Action::ReadMetrics, "metrics")] {
            rules.push(PolicyRule::permit(format!("{site}-{tag}"), site.clone(), action, study_id).with_rounds(1, rounds));
        }
    }
    PolicySet::new(rules).expect("generated rule ids are unique")
}

/// Everything a federated run produced, including each node's audit log.
#[derive(Debug)]
pub struct FederatedRun {
    pub report: FinalReport,
    pub sites: Vec<SiteSummary>,
    pub coordinator_audit: AuditLog,
    pub site_audits: Vec<AuditLog>,
}

/// Where a run's audit logs go: a directory of `<node>.log` / `<node>.pub`
/// files, or memory only.
#[derive(Debug, Clone)]
pub enum AuditSink {
    Memory,
    Dir(PathBuf),
}

fn open_log(node: &str, master_seed: u64, sink: &AuditSink) -> Result<AuditLog> {
    let key = signing_key_for(master_seed, node);
    match sink {
        AuditSink::Memory => Ok(AuditLog::in_memory(node, key)),
        AuditSink::Dir(dir) => {
            write_public_key(dir.join(format!("{node}.pub")), &key.verifying_key())?;
            AuditLog::create(node, key, dir.join(format!("{node}.log")))
        }
    }
}

fn clock_for(mode: TransportMode) -> Arc<dyn Clock> {
    match mode {
        TransportMode::Memory => Arc::new(LogicalClock::default()),
        TransportMode::Tcp => Arc::new(SystemClock),
    }
}

/// Runs one federated strategy with the coordinator and every site in this
/// process, connected by in-memory channels or loopback TCP.
pub fn run_federated(
    study: &StudyConfig,
    datasets: &[CohortDataset],
    policy: Arc<PolicySet>,
    mode: TransportMode,
    listen: &str,
    audit: &AuditSink,
) -> Result<FederatedRun> {
    study.validate()?;
    let roster: Vec<String> = datasets.iter().map(|d| d.site_id().to_string()).collect();
    if roster != study.roster {
        return Err(Error::Config(format!("datasets {roster:?} do not match roster {:?}", study.roster)));
    }
    if let AuditSink::Dir(d) = audit {
        fs::create_dir_all(d)?;
    }
    let mut coord_gov = Governance::new(COORDINATOR, policy.clone(), open_log(COORDINATOR, study.seed, audit)?, clock_for(mode));
    let mut site_govs = Vec::with_capacity(datasets.len());
    for site in &roster {
        site_govs.push(Governance::new(site.clone(), policy.clone(), open_log(site, study.seed, audit)?, clock_for(mode)));
    }
    let psi = match study.strategy.kind {
        StrategyKind::FedMap => Some(new_shared_psi(study)?),
        _ => None,
    };

    let mut site_ends: Vec<Box<dyn Transport>> = Vec::new();
    let mut coord_ends: Vec<Box<dyn Transport>> = Vec::new();
    let hub = match mode {
        TransportMode::Memory => {
            for _ in &roster {
                let (c, s) = memory_pair();
                coord_ends.push(Box::new(c));
                site_ends.push(Box::new(s));
            }
            None
        }
        TransportMode::Tcp => Some(TcpHub::bind(listen)?),
    };
    let addr = hub.as_ref().map(|h| h.local_addr()).transpose()?;

    let (coord_result, site_results) = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        let mut site_ends = site_ends.into_iter();
        for ((ds, gov), site) in datasets.iter().zip(site_govs).zip(&roster) {
            let psi = psi.clone();
            let end = site_ends.next();
            handles.push(scope.spawn(move || {
                let mut gov = gov;
                let mut transport: Box<dyn Transport> = match (end, addr) {
                    (Some(t), _) => t,
                    (None, Some(a)) => match TcpTransport::connect(a) {
                        Ok(t) => Box::new(t),
                        Err(e) => return (Err(e), gov),
                    },
                    (None, None) => unreachable!("either memory ends or a listen address"),
                };
                let r = site_run(site, ds, &mut transport, &mut gov, study, psi.as_ref());
                (r, gov)
            }));
        }
        let coord = (|| {
            if let Some(hub) = &hub {
                for _ in &roster {
                    coord_ends.push(Box::new(hub.accept()?));
                }
            }
            coordinator_run(study, std::mem::take(&mut coord_ends), &mut coord_gov, psi.clone())
        })();
        let sites: Vec<_> = handles.into_iter().map(|h| h.join().expect("site thread panicked")).collect();
        (coord, sites)
    });

    let mut summaries = Vec::new();
    let mut site_audits = Vec::new();
    let mut site_error = None;
    for ((r, gov), site) in site_results.into_iter().zip(&roster) {
        site_audits.push(gov.into_audit());
        match r {
            Ok(s) => summaries.push(s),
            Err(e) => {
                log::error!("site {site} failed: {e}");
                if site_error.is_none() && !matches!(e, Error::Transport(_)) {
                    site_error = Some(e);
                }
            }
        }
    }
    let report = match coord_result {
        Ok(r) => r,
        Err(coord_err) => {
            if let Some(e) = site_error {
                return Err(e);
            }
            let denied = summaries.iter().zip(&roster).find_map(|(s, site)| s.denials.first().map(|d| (site, d.clone())));
            if let Some((site, decision)) = denied {
                log::error!("coordinator stopped: {coord_err}");
                return Err(Error::PolicyDenied {
                    subject: site.clone(),
                    action: Action::PushUpdate.as_str().into(),
                    resource: study.study_id.clone(),
                    decision: Box::new(decision),
                });
            }
            return Err(coord_err);
        }
    };
    if let Some(e) = site_error {
        return Err(e);
    }
    Ok(FederatedRun { report, sites: summaries, coordinator_audit: coord_gov.into_audit(), site_audits })
}

/// One line of the results file: a method's test metrics at one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub method: Method,
    pub site: String,
    pub roc_auc: f64,
    pub roc_auc_ci: [f64; 2],
    pub balanced_accuracy: f64,
    pub balanced_accuracy_ci: [f64; 2],
    pub threshold: f64,
    pub best_round: u32,
    pub rounds_run: u32,
}

impl ResultRecord {
    pub fn new(method: Method, site: &str, m: &SiteMetrics, best_round: u32, rounds_run: u32) -> Self {
        Self {
            method,
            site: site.to_string(),
            roc_auc: m.roc_auc,
            roc_auc_ci: [m.roc_auc_ci.low, m.roc_auc_ci.high],
            balanced_accuracy: m.balanced_accuracy,
            balanced_accuracy_ci: [m.balanced_accuracy_ci.low, m.balanced_accuracy_ci.high],
            threshold: m.threshold,
            best_round,
            rounds_run,
        }
    }
}

pub fn write_results(path: impl AsRef<Path>, records: &[ResultRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::InvalidInput(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(Some(i + 1), e.to_string())))
        .collect()
}

struct Row {
    method: Method,
    site: String,
    auc: f64,
    auc_ci: Option<[f64; 2]>,
    bal: f64,
    bal_ci: Option<[f64; 2]>,
}

fn fmt_ci(ci: Option<[f64; 2]>) -> String {
    match ci {
        Some([lo, hi]) => format!("[{:.4}, {:.4}]", round_to(lo, 4), round_to(hi, 4)),
        None => "--".to_string(),
    }
}

/// Per-site rows grouped by method, then one macro row per method. Within
/// each site group the best ROC-AUC and balanced accuracy are starred.
pub fn render_report(records: &[ResultRecord]) -> String {
    let mut methods: Vec<Method> = Vec::new();
    let mut sites: Vec<String> = Vec::new();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
        if !sites.contains(&r.site) {
            sites.push(r.site.clone());
        }
    }
    let mut rows = Vec::new();
    for &m in &methods {
        for s in &sites {
            if let Some(r) = records.iter().find(|r| r.method == m && &r.site == s) {
                rows.push(Row {
                    method: m,
                    site: s.to_uppercase(),
                    auc: r.roc_auc,
                    auc_ci: Some(r.roc_auc_ci),
                    bal: r.balanced_accuracy,
                    bal_ci: Some(r.balanced_accuracy_ci),
                });
            }
        }
    }
    for &m in &methods {
        let mine: Vec<&ResultRecord> = records.iter().filter(|r| r.method == m).collect();
        if mine.len() == sites.len() && sites.len() > 1 {
            let n = mine.len() as f64;
            rows.push(Row {
                method: m,
                site: "Macro".to_string(),
                auc: mine.iter().map(|r| r.roc_auc).sum::<f64>() / n,
                auc_ci: None,
                bal: mine.iter().map(|r| r.balanced_accuracy).sum::<f64>() / n,
                bal_ci: None,
            });
        }
    }
    let best = |site: &str, f: fn(&Row) -> f64| -> f64 {
        rows.iter().filter(|r| r.site == site).map(|r| round_to(f(r), 4)).fold(f64::NEG_INFINITY, f64::max)
    };
    let mut out = String::new();
    let header = ["Method", "Site", "ROC-AUC", "95% CI", "Bal.Acc", "95% CI"];
    let _ = writeln!(out, "{:<11} {:<6} {:<8} {:<18} {:<8} {}", header[0], header[1], header[2], header[3], header[4], header[5]);
    let _ = writeln!(out, "{}", "-".repeat(11 + 6 + 8 + 18 + 8 + 18 + 5));
    let mut macro_started = false;
    for r in &rows {
        if r.site == "Macro" && !macro_started {
            let _ = writeln!(out, "{}", "-".repeat(11 + 6 + 8 + 18 + 8 + 18 + 5));
            macro_started = true;
        }
        let star = |v: f64, b: f64| if round_to(v, 4) == b && methods.len() > 1 { "*" } else { " " };
        let auc = format!("{:.4}{}", round_to(r.auc, 4), star(r.auc, best(&r.site, |x| x.auc)));
        let bal = format!("{:.4}{}", round_to(r.bal, 4), star(r.bal, best(&r.site, |x| x.bal)));
        let _ = writeln!(
            out,
            "{:<11} {:<6} {:<8} {:<18} {:<8} {}",
            r.method.display_name(),
            r.site,
            auc,
            fmt_ci(r.auc_ci),
            bal,
            fmt_ci(r.bal_ci)
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "* best value in the column for that site. CI: percentile bootstrap over the test split.");
    out
}

/// Files written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub results: Vec<ResultRecord>,
    pub report: String,
}

/// Runs every requested method and writes the run directory:
/// `config.toml`, `policy.toml`, `results.jsonl`, `report.txt`,
/// `history/<method>.json` and `audit/<method>/<node>.{log,pub}`.
pub fn run_experiment(cfg: &ExperimentConfig, mode: TransportMode) -> Result<RunOutput> {
    cfg.validate_shape()?;
    cfg.check_files()?;
    let dir = cfg.output_dir.clone();
    if dir.join(RESULTS_FILE).exists() {
        return Err(Error::Config(format!("{} already holds a run; choose a fresh output_dir", dir.display())));
    }
    fs::create_dir_all(dir.join("history"))?;
    fs::write(dir.join(CONFIG_SNAPSHOT), cfg.to_toml_string()?)?;

    let datasets = cfg.load_sites()?;
    let roster: Vec<String> = datasets.iter().map(|d| d.site_id().to_string()).collect();
    let policy = match &cfg.policy {
        Some(p) => PolicySet::load(p)?,
        None => default_policy(&cfg.study.study_id, &roster, cfg.study.rounds),
    };
    fs::write(dir.join(POLICY_SNAPSHOT), policy.to_toml_string()?)?;
    let policy = Arc::new(policy);

    let mut results = Vec::new();
    for &method in &cfg.strategies {
        let study = cfg.study_config(method, roster.clone(), mode);
        log::info!("running {}", method.display_name());
        let history = match method.strategy() {
            None => {
                let mut reports = Vec::new();
                for ds in &datasets {
                    let rep = local_baseline(ds, &study)?;
                    results.push(ResultRecord::new(method, ds.site_id(), &rep.metrics, rep.best_chunk, rep.chunks_run));
                    reports.push(rep);
                }
                serde_json::to_string_pretty(&reports)
            }
            Some(_) => {
                let audit = AuditSink::Dir(dir.join("audit").join(method.key()));
                let run = run_federated(&study, &datasets, policy.clone(), mode, &cfg.tcp_listen, &audit)?;
                for s in &run.report.sites {
                    results.push(ResultRecord::new(method, &s.site_id, &s.metrics, run.report.best_round, run.report.rounds_run));
                }
                serde_json::to_string_pretty(&run.report)
            }
        }
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
        fs::write(dir.join("history").join(format!("{}.json", method.key())), history + "\n")?;
    }
    write_results(dir.join(RESULTS_FILE), &results)?;
    let report = render_report(&results);
    fs::write(dir.join(REPORT_FILE), &report)?;
    Ok(RunOutput { dir, results, report })
}
