//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedgov::aggregation::ClientUpdate;
use fedgov::icnn::{IcnnLayer, IcnnRegulariser, RegulariserConfig};
use fedgov::nn::build_mlp;
use fedgov::params::ParamVector;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn mean_bce(probs: &[f64], labels: &[u8]) -> f64 {
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| if y == 1 { -p.ln() } else { -(1.0 - p).ln() })
        .sum::<f64>()
        / n
}

/// Largest relative error between the analytic MLP gradient and central
/// differences of the training-mode loss, over every trainable coordinate.
pub fn mlp_fd_error(dims: &[usize], dropout: f64, batch: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut model = build_mlp(dims, dropout, seed).unwrap();
    let x = Array2::from_shape_fn((batch, dims[0]), |_| r.random_range(-2.0..2.0));
    let mut labels: Vec<u8> = (0..batch).map(|_| r.random_range(0..2u8)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let mask_seed = r.next_u64();
    let loss_at = |m: &mut fedgov::nn::MlpClassifier| {
        let probs = m.forward_train(x.view(), &mut rng(mask_seed)).unwrap();
        mean_bce(probs.as_slice().unwrap(), &labels)
    };
    loss_at(&mut model);
    let grad = model.backward(&labels).unwrap();
    let layout = model.layout().clone();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for range in layout.trainable_ranges() {
        for i in range {
            let orig = model.params()[i];
            model.params_mut()[i] = orig + h;
            let up = loss_at(&mut model);
            model.params_mut()[i] = orig - h;
            let down = loss_at(&mut model);
            model.params_mut()[i] = orig;
            worst = worst.max(rel_err(grad.values()[i], (up - down) / (2.0 * h)));
        }
    }
    worst
}

/// ICNN with O(1) weights so that every term is exercised.
pub fn random_icnn(d: usize, hidden: &[usize], seed: u64) -> IcnnRegulariser {
    let mut r = rng(seed);
    let mut widths = hidden.to_vec();
    widths.push(1);
    let mut prev: Option<usize> = None;
    let mut layers = Vec::new();
    for &w in &widths {
        layers.push(IcnnLayer {
            wx: Array2::from_shape_fn((w, d), |_| r.random_range(-1.0..1.0)),
            wz: prev.map(|p| Array2::from_shape_fn((w, p), |_| r.random_range(0.0..1.0))),
            bias: Array1::from_shape_fn(w, |_| r.random_range(-0.5..0.5)),
        });
        prev = Some(w);
    }
    IcnnRegulariser::from_layers(d, layers).unwrap()
}

/// Plain-loop softplus ICNN evaluation.
pub fn icnn_reference(psi: &IcnnRegulariser, x: &[f64]) -> f64 {
    let mut z: Vec<f64> = Vec::new();
    for layer in psi.layers() {
        let mut out = Vec::new();
        for o in 0..layer.bias.len() {
            let mut s = layer.bias[o];
            for (j, xj) in x.iter().enumerate() {
                s += layer.wx[[o, j]] * xj;
            }
            if let Some(wz) = &layer.wz {
                for (j, zj) in z.iter().enumerate() {
                    s += wz[[o, j]] * zj;
                }
            }
            out.push(if s > 30.0 { s } else { s.exp().ln_1p() });
        }
        z = out;
    }
    z[0]
}

pub fn regulariser_reference(theta: &[f64], theta_g: &[f64], psi: &IcnnRegulariser, cfg: &RegulariserConfig) -> f64 {
    let diff: Vec<f64> = theta.iter().zip(theta_g).map(|(a, b)| a - b).collect();
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    icnn_reference(psi, &diff) + cfg.alpha * sq(&diff) + cfg.epsilon * (sq(theta) + sq(theta_g))
}

/// Largest relative error of `regulariser_grad` against central differences.
pub fn regulariser_fd_error(d: usize, hidden: &[usize], seed: u64) -> f64 {
    let mut r = rng(seed ^ 0x5eed);
    let psi = random_icnn(d, hidden, seed);
    let cfg = RegulariserConfig { alpha: r.random_range(0.0..1.0), epsilon: r.random_range(0.0..0.1), ..Default::default() };
    let theta: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let theta_g: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let grad = fedgov::icnn::regulariser_grad(&theta, &theta_g, &psi, &cfg).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..d {
        let mut up = theta.clone();
        up[i] += h;
        let mut down = theta.clone();
        down[i] -= h;
        let fd = (regulariser_reference(&up, &theta_g, &psi, &cfg) - regulariser_reference(&down, &theta_g, &psi, &cfg)) / (2.0 * h);
        worst = worst.max(rel_err(grad[i], fd));
    }
    worst
}

/// Worst Jensen gap `f(l a + (1-l) b) - (l f(a) + (1-l) f(b))` over sampled triples.
pub fn jensen_worst(psi: &IcnnRegulariser, triples: usize, scale: f64, seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = psi.input_dim();
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..triples {
        let a: Vec<f64> = (0..d).map(|_| r.random_range(-scale..scale)).collect();
        let b: Vec<f64> = (0..d).map(|_| r.random_range(-scale..scale)).collect();
        let l: f64 = r.random_range(0.0..1.0);
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| l * x + (1.0 - l) * y).collect();
        let gap = psi.eval(&mid).unwrap() - (l * psi.eval(&a).unwrap() + (1.0 - l) * psi.eval(&b).unwrap());
        worst = worst.max(gap);
    }
    worst
}

pub fn random_updates(r: &mut impl Rng, clients: usize, dim: usize) -> Vec<ClientUpdate> {
    (0..clients)
        .map(|k| {
            let params: Vec<f32> = (0..dim).map(|_| r.random_range(-3.0f32..3.0)).collect();
            let n = r.random_range(1..50_000u64);
            let nll = r.random_range(0.0..2.0) * n as f64;
            ClientUpdate::new(format!("c{k}"), ParamVector::flat(params), n, nll, r.random_range(-5.0..5.0)).unwrap()
        })
        .collect()
}

pub fn weighted_reference(updates: &[ClientUpdate], weights: &[f64]) -> Vec<f64> {
    let dim = updates[0].params.len();
    let mut out = vec![0.0; dim];
    for (u, w) in updates.iter().zip(weights) {
        for (o, &v) in out.iter_mut().zip(u.params.values()) {
            *o += w * f64::from(v);
        }
    }
    out
}

pub fn fedavg_reference(updates: &[ClientUpdate]) -> Vec<f64> {
    let total: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
    let w: Vec<f64> = updates.iter().map(|u| u.n_samples as f64 / total).collect();
    weighted_reference(updates, &w)
}

/// Softmax over `-nll/n - reg`, computed with the maximum subtracted.
pub fn fedmap_weights_reference(updates: &[ClientUpdate]) -> Vec<f64> {
    let logs: Vec<f64> = updates.iter().map(|u| -u.sum_nll / u.n_samples as f64 - u.reg_value).collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// O(n^2) pairwise ROC-AUC with half credit for ties.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

pub const TINY_WIDTH: usize = 12;

/// Small two-class cohort over `TINY_WIDTH` dims with the signal on `dims`.
pub fn tiny_spec(site: &str, dims: &[usize], effect: f64, prevalence: f64) -> fedgov::data::CohortSpec {
    use fedgov::data::{CohortSpec, FerritinModel, SplitSpec};
    CohortSpec {
        site_id: site.to_string(),
        width: TINY_WIDTH,
        train: SplitSpec { size: 160, prevalence },
        val: SplitSpec { size: 80, prevalence },
        test: SplitSpec { size: 80, prevalence },
        signal_dims: dims.to_vec(),
        effect_size: effect,
        shared_dims: vec![],
        shared_effect: 0.0,
        ferritin: FerritinModel::replete_from_quartiles(60.0, 30.0, 120.0, 8.0, 0.4),
    }
}

pub fn tiny_sites(seed: u64) -> Vec<fedgov::data::CohortDataset> {
    vec![
        fedgov::data::generate_cohort(&tiny_spec("a", &[0, 1, 2], 1.2, 0.2), seed).unwrap(),
        fedgov::data::generate_cohort(&tiny_spec("b", &[5, 6, 7], 0.9, 0.3), seed + 1).unwrap(),
    ]
}

pub fn tiny_study(kind: fedgov::aggregation::StrategyKind, roster: &[&str], seed: u64) -> fedgov::federation::StudyConfig {
    use fedgov::aggregation::StrategyConfig;
    let mut s = fedgov::federation::StudyConfig::new("tiny", StrategyConfig::new(kind), roster.iter().map(|r| r.to_string()).collect(), seed);
    s.model.layer_dims = vec![TINY_WIDTH, 6, 1];
    s.rounds = 4;
    s.train.batch_size = 32;
    s.train.local_epochs = 2;
    s.train.learning_rate = 0.01;
    s.bootstrap_resamples = 50;
    s.window = Some(std::time::Duration::from_secs(60));
    s
}
