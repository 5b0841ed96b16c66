mod common;

use std::sync::Arc;

use common::{tiny_sites, tiny_study};
use fedgov::aggregation::{fedavg_aggregate, ClientUpdate, StrategyKind};
use fedgov::data::Split;
use fedgov::experiment::{default_policy, run_federated, AuditSink, TransportMode};
use fedgov::federation::{decode, encode, memory_pair, site_run, Message, ModelPurpose, Transport};
use fedgov::governance::{signing_key_for, AuditLog, EventKind, Governance, LogicalClock};
use fedgov::nn::{build_mlp, train_epochs, AdamState, LocalObjective};
use fedgov::seed::derived_rng;

fn run(kind: StrategyKind, seed: u64, mode: TransportMode) -> fedgov::experiment::FederatedRun {
    let sites = tiny_sites(seed);
    let study = tiny_study(kind, &["a", "b"], seed);
    let policy = Arc::new(default_policy("tiny", &study.roster, study.rounds));
    run_federated(&study, &sites, policy, mode, "127.0.0.1:0", &AuditSink::Memory).unwrap()
}

#[test]
fn fedprox_without_proximal_term_retraces_fedavg() {
    let seed = 5;
    let sites = tiny_sites(seed);
    let cfg = tiny_study(StrategyKind::FedAvg, &["a", "b"], seed).train;
    let mut global = build_mlp(&[common::TINY_WIDTH, 6, 1], 0.3, seed).unwrap().to_param_vector();
    let mut prox_global = global.clone();
    for round in 1..=3 {
        let mut plain = Vec::new();
        let mut prox = Vec::new();
        for ds in &sites {
            let train = ds.split_data(Split::Train);
            let label = format!("site/{}/round/{round}", ds.site_id());
            let mut m = build_mlp(&[common::TINY_WIDTH, 6, 1], 0.3, 0).unwrap();
            m.load_param_vector(&global).unwrap();
            train_epochs(&mut m, train.x.view(), &train.labels, &cfg, 2, &LocalObjective::Plain, &mut AdamState::new(), &mut derived_rng(cfg.seed, &label)).unwrap();
            plain.push(ClientUpdate::new(ds.site_id(), m.to_param_vector(), train.len() as u64, 0.0, 0.0).unwrap());

            let anchor = prox_global.to_f64();
            m.load_param_vector(&prox_global).unwrap();
            let objective = LocalObjective::Proximal { anchor: &anchor, mu: 0.0 };
            train_epochs(&mut m, train.x.view(), &train.labels, &cfg, 2, &objective, &mut AdamState::new(), &mut derived_rng(cfg.seed, &label)).unwrap();
            prox.push(ClientUpdate::new(ds.site_id(), m.to_param_vector(), train.len() as u64, 0.0, 0.0).unwrap());
        }
        global = fedavg_aggregate(&plain).unwrap();
        prox_global = fedavg_aggregate(&prox).unwrap();
        assert_eq!(global.values(), prox_global.values(), "round {round}");
    }

    let avg = run(StrategyKind::FedAvg, seed, TransportMode::Memory);
    let mut study = tiny_study(StrategyKind::FedProx, &["a", "b"], seed);
    study.strategy.mu_p = 0.0;
    let policy = Arc::new(default_policy("tiny", &study.roster, study.rounds));
    let prox = run_federated(&study, &sites, policy, TransportMode::Memory, "", &AuditSink::Memory).unwrap();
    assert_eq!(avg.report.history, prox.report.history);
    assert_eq!(avg.report.sites, prox.report.sites);
}

#[test]
fn memory_runs_are_deterministic_and_match_tcp() {
    for kind in [StrategyKind::FedAvg, StrategyKind::FedMap] {
        let a = run(kind, 9, TransportMode::Memory);
        let b = run(kind, 9, TransportMode::Memory);
        assert_eq!(a.report, b.report);
        assert_eq!(a.coordinator_audit.records(), b.coordinator_audit.records());
        for (x, y) in a.site_audits.iter().zip(&b.site_audits) {
            assert_eq!(x.records(), y.records());
        }
        let tcp = run(kind, 9, TransportMode::Tcp);
        assert_eq!(a.report, tcp.report, "{kind:?} over tcp");
    }
}

#[test]
fn audit_logs_cover_every_round() {
    let r = run(StrategyKind::FedMap, 3, TransportMode::Memory);
    let rounds = r.report.rounds_run as usize;
    let events = |log: &AuditLog, kind: EventKind| log.records().iter().filter(|rec| rec.event().unwrap().kind == kind).count();
    assert_eq!(events(&r.coordinator_audit, EventKind::Aggregation), rounds);
    assert_eq!(events(&r.coordinator_audit, EventKind::Update), 2 * rounds);
    assert_eq!(events(&r.coordinator_audit, EventKind::RunComplete), 1);
    for (log, summary) in r.site_audits.iter().zip(&r.sites) {
        assert_eq!(summary.updates_sent as usize, rounds);
        let permits = log.records().iter().filter(|rec| rec.event().unwrap().decision == "permit").count();
        // Join, then one update and two metric replies per round, then the final report.
        assert_eq!(permits, 1 + 2 * rounds + 1);
    }
}

#[test]
fn symmetric_sites_get_equal_weights() {
    let spec_a = common::tiny_spec("a", &[0, 1], 1.0, 0.25);
    let d = fedgov::data::generate_cohort(&spec_a, 4).unwrap();
    let e = fedgov::data::CohortDataset::new("b", d.embeddings().clone(), d.labels().to_vec(), d.splits().to_vec(), None).unwrap();
    let mut study = tiny_study(StrategyKind::FedMap, &["a", "b"], 4);
    study.model.dropout = 0.0;
    study.train.batch_size = 1000;
    let policy = Arc::new(default_policy("tiny", &study.roster, study.rounds));
    let r = run_federated(&study, &[d, e], policy, TransportMode::Memory, "", &AuditSink::Memory).unwrap();
    for rec in &r.report.history {
        assert!((rec.weights[0] - 0.5).abs() < 1e-6, "round {}: {:?}", rec.round, rec.weights);
    }
}

#[test]
fn zero_local_epochs_returns_the_received_model() {
    let sites = tiny_sites(2);
    let mut study = tiny_study(StrategyKind::FedAvg, &["a"], 2);
    study.train.local_epochs = 0;
    let policy = Arc::new(default_policy("tiny", &study.roster, study.rounds));
    let (mut coord, mut site_end) = memory_pair();
    let mut gov = Governance::new("a", policy, AuditLog::in_memory("a", signing_key_for(2, "a")), Arc::new(LogicalClock::default()));
    let params = build_mlp(&study.model.layer_dims, 0.3, 77).unwrap().to_param_vector();
    std::thread::scope(|s| {
        let h = s.spawn(|| site_run("a", &sites[0], &mut site_end, &mut gov, &study, None));
        assert!(matches!(decode(&coord.recv(None).unwrap().unwrap()).unwrap(), Message::Join { .. }));
        let msg = Message::GlobalModel { study_id: "tiny".into(), round: 1, purpose: ModelPurpose::Train, psi_digest: [0; 32], params: params.clone() };
        coord.send(&encode(&msg)).unwrap();
        match decode(&coord.recv(None).unwrap().unwrap()).unwrap() {
            Message::Update { update, .. } => assert_eq!(update.params, params),
            other => panic!("expected an update, got {other:?}"),
        }
        coord.send(&encode(&Message::Stop { study_id: "tiny".into(), reason: "done".into() })).unwrap();
        h.join().unwrap().unwrap();
    });
}

#[test]
fn dropout_of_a_site_aborts_the_round() {
    let sites = tiny_sites(1);
    let mut study = tiny_study(StrategyKind::FedAvg, &["a", "b"], 1);
    study.window = Some(std::time::Duration::from_millis(300));
    let (c0, mut s0) = memory_pair();
    let (c1, mut silent) = memory_pair();
    silent.send(&encode(&Message::Join { study_id: "tiny".into(), site_id: "b".into() })).unwrap();
    let policy = Arc::new(default_policy("tiny", &study.roster, study.rounds));
    let mut coord_gov = Governance::new("coordinator", policy.clone(), AuditLog::in_memory("coordinator", signing_key_for(1, "coordinator")), Arc::new(LogicalClock::default()));
    let mut site_gov = Governance::new("a", policy, AuditLog::in_memory("a", signing_key_for(1, "a")), Arc::new(LogicalClock::default()));
    let err = std::thread::scope(|s| {
        s.spawn(|| {
            let _ = site_run("a", &sites[0], &mut s0, &mut site_gov, &study, None);
        });
        fedgov::federation::coordinator_run(&study, vec![Box::new(c0), Box::new(c1)], &mut coord_gov, None).unwrap_err()
    });
    assert!(matches!(err, fedgov::Error::SiteDropout { ref site, .. } if site == "b"), "{err}");
    let events: Vec<_> = coord_gov.audit().records().iter().map(|r| r.event().unwrap()).collect();
    let aborted = events.iter().position(|e| e.kind == EventKind::RoundAborted).expect("round_aborted recorded");
    assert!(events[aborted].detail.starts_with("round=1"));
    assert_eq!(events[aborted].subject, "b");
    assert!(events[aborted + 1..].iter().all(|e| e.kind == EventKind::Decision && e.action == "join_study"));
}
