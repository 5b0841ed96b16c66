//! Input-convex regulariser for MAP-style local training.
//!
//! The learned prior is
//!
//! ```text
//! R(theta; theta_g, psi) = f_psi(theta - theta_g) + alpha * |theta - theta_g|^2
//!                          + epsilon * (|theta|^2 + |theta_g|^2)
//! ```
//!
//! where `f_psi` is an input-convex network: every layer applies softplus to
//! `W_z z_prev + W_x x + b`, and the propagation weights `W_z` are kept
//! elementwise non-negative. Softplus is convex and non-decreasing, so the
//! composition stays convex in `x`, and convexity in `theta` follows because
//! `theta - theta_g` is affine. Only trainable coordinates enter `R`; batch-norm
//! running statistics are ignored.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::ClientUpdate;
use crate::error::{Error, Result};
use crate::nn::PriorGradient;
use crate::params::{Gradient, ParamVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegulariserConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub icnn_lr: f64,
    pub icnn_steps: usize,
    pub hidden_dims: Vec<usize>,
}

impl Default for RegulariserConfig {
    fn default() -> Self {
        Self { alpha: 0.1, epsilon: 1e-4, icnn_lr: 1e-5, icnn_steps: 3, hidden_dims: vec![16] }
    }
}

impl RegulariserConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if !(self.icnn_lr >= 0.0 && self.icnn_lr.is_finite()) {
            return Err(Error::Config(format!("icnn_lr must be non-negative, got {}", self.icnn_lr)));
        }
        if self.icnn_steps == 0 {
            return Err(Error::Config("icnn_steps must be positive".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("icnn hidden sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One ICNN layer. `wz` is absent on the first layer, which sees only the input.
#[derive(Debug, Clone, PartialEq)]
pub struct IcnnLayer {
    /// Passthrough weights, `out x input_dim`, unconstrained.
    pub wx: Array2<f64>,
    /// Propagation weights, `out x previous_width`, kept non-negative.
    pub wz: Option<Array2<f64>>,
    pub bias: Array1<f64>,
}

/// The convex network `f_psi`. Also used as the container for its own gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct IcnnRegulariser {
    input_dim: usize,
    hidden_dims: Vec<usize>,
    layers: Vec<IcnnLayer>,
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Trace {
    pre: Vec<Array1<f64>>,
    out: Vec<Array1<f64>>,
}

impl IcnnRegulariser {
    fn shaped(input_dim: usize, hidden_dims: &[usize], mut fill: impl FnMut(bool, usize) -> f64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("icnn input_dim must be positive".into()));
        }
        if hidden_dims.contains(&0) {
            return Err(Error::Config("icnn hidden sizes must be positive".into()));
        }
        let mut widths = hidden_dims.to_vec();
        widths.push(1);
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev: Option<usize> = None;
        for &w in &widths {
            let wx = Array2::from_shape_simple_fn((w, input_dim), || fill(false, input_dim));
            let wz = prev.map(|p| Array2::from_shape_simple_fn((w, p), || fill(true, p)));
            layers.push(IcnnLayer { wx, wz, bias: Array1::zeros(w) });
            prev = Some(w);
        }
        Ok(Self { input_dim, hidden_dims: hidden_dims.to_vec(), layers })
    }

    /// Seeded initialisation: `W_x ~ U(-1/d, 1/d)`, `W_z ~ U(0, 1/width)`, zero
    /// biases. The input gradient starts small, so early MAP steps are driven
    /// by the quadratic terms.
    pub fn new(input_dim: usize, hidden_dims: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::shaped(input_dim, hidden_dims, |propagation, fan_in| {
            if propagation {
                rng.random_range(0.0..1.0 / fan_in as f64)
            } else {
                let s = 1.0 / fan_in as f64;
                rng.random_range(-s..s)
            }
        })
    }

    /// All weights and biases zero: `f_psi` is the constant `ln 2`.
    pub fn zeros(input_dim: usize, hidden_dims: &[usize]) -> Result<Self> {
        Self::shaped(input_dim, hidden_dims, |_, _| 0.0)
    }

    pub fn from_layers(input_dim: usize, layers: Vec<IcnnLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("icnn needs at least an output layer".into()));
        }
        let mut prev: Option<usize> = None;
        for (i, l) in layers.iter().enumerate() {
            let w = l.bias.len();
            if l.wx.dim() != (w, input_dim) {
                return Err(Error::Shape(format!("layer {i}: W_x must be {w}x{input_dim}")));
            }
            match (prev, &l.wz) {
                (None, None) => {}
                (Some(p), Some(wz)) if wz.dim() == (w, p) => {}
                _ => return Err(Error::Shape(format!("layer {i}: W_z shape does not chain"))),
            }
            prev = Some(w);
        }
        if prev != Some(1) {
            return Err(Error::Shape("icnn output layer must have width 1".into()));
        }
        let hidden_dims = layers[..layers.len() - 1].iter().map(|l| l.bias.len()).collect();
        Ok(Self { input_dim, hidden_dims, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.hidden_dims
    }

    pub fn layers(&self) -> &[IcnnLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [IcnnLayer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.wx.len() + l.wz.as_ref().map_or(0, |w| w.len()) + l.bias.len())
            .sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!("icnn expects {} inputs, got {}", self.input_dim, x.len())));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let xv = ndarray::ArrayView1::from(x);
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut out: Vec<Array1<f64>> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut a = l.wx.dot(&xv) + &l.bias;
            if let (Some(wz), Some(prev)) = (&l.wz, out.last()) {
                a += &wz.dot(prev);
            }
            out.push(a.mapv(softplus));
            pre.push(a);
        }
        Trace { pre, out }
    }

    /// `f_psi(x)`.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(self.trace(x).out.last().expect("output layer")[0])
    }

    /// Walks the layers backwards, calling `visit(layer, delta, layer_input_z)`
    /// with `delta = df/d(pre-activation)` of that layer.
    fn backprop(&self, trace: &Trace, mut visit: impl FnMut(usize, &Array1<f64>, Option<&Array1<f64>>)) {
        let last = self.layers.len() - 1;
        let mut delta = trace.pre[last].mapv(logistic);
        for li in (0..=last).rev() {
            let z_prev = (li > 0).then(|| &trace.out[li - 1]);
            visit(li, &delta, z_prev);
            if li == 0 {
                break;
            }
            let wz = self.layers[li].wz.as_ref().expect("inner layers propagate");
            let dz = wz.t().dot(&delta);
            delta = dz * trace.pre[li - 1].mapv(logistic);
        }
    }

    /// `(f_psi(x), df/dx)`.
    pub fn eval_with_input_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let value = trace.out.last().expect("output layer")[0];
        let mut dx = Array1::<f64>::zeros(self.input_dim);
        self.backprop(&trace, |li, delta, _| {
            dx += &self.layers[li].wx.t().dot(delta);
        });
        Ok((value, dx.to_vec()))
    }

    /// `(f_psi(x), df/dpsi)`, the gradient laid out like `self`.
    pub fn eval_with_param_grad(&self, x: &[f64]) -> Result<(f64, IcnnRegulariser)> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let value = trace.out.last().expect("output layer")[0];
        let mut grad = IcnnRegulariser::zeros(self.input_dim, &self.hidden_dims)?;
        let xv = ndarray::ArrayView1::from(x);
        self.backprop(&trace, |li, delta, z_prev| {
            let g = &mut grad.layers[li];
            g.bias.assign(delta);
            for (mut row, &d) in g.wx.rows_mut().into_iter().zip(delta.iter()) {
                row.scaled_add(d, &xv);
            }
            if let (Some(wz), Some(z)) = (g.wz.as_mut(), z_prev) {
                for (mut row, &d) in wz.rows_mut().into_iter().zip(delta.iter()) {
                    row.scaled_add(d, z);
                }
            }
        });
        Ok((value, grad))
    }

    /// `self += scale * other`, for equal shapes.
    pub fn scaled_add(&mut self, scale: f64, other: &IcnnRegulariser) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.wx.scaled_add(scale, &b.wx);
            a.bias.scaled_add(scale, &b.bias);
            if let (Some(wa), Some(wb)) = (a.wz.as_mut(), b.wz.as_ref()) {
                wa.scaled_add(scale, wb);
            }
        }
    }

    /// Clamps every propagation weight to `max(0, w)`.
    pub fn project_convexity(&mut self) {
        for l in &mut self.layers {
            if let Some(wz) = l.wz.as_mut() {
                wz.mapv_inplace(|w| w.max(0.0));
            }
        }
    }

    pub fn min_propagation_weight(&self) -> Option<f64> {
        self.layers
            .iter()
            .filter_map(|l| l.wz.as_ref())
            .flat_map(|w| w.iter().copied())
            .reduce(f64::min)
    }

    /// SHA-256 over shapes and big-endian parameter bytes; identifies a version of `psi`.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.input_dim as u64).to_be_bytes());
        for l in &self.layers {
            h.update((l.bias.len() as u64).to_be_bytes());
            for v in l.wx.iter().chain(l.wz.iter().flat_map(|w| w.iter())).chain(l.bias.iter()) {
                h.update(v.to_be_bytes());
            }
        }
        h.finalize().into()
    }
}

/// By-value projection onto the convexity constraint set.
pub fn project_convexity(mut psi: IcnnRegulariser) -> IcnnRegulariser {
    psi.project_convexity();
    psi
}

pub fn icnn_eval(psi: &IcnnRegulariser, input: &[f64]) -> Result<f64> {
    psi.eval(input)
}

fn check_pair(theta: &ParamVector, theta_g: &ParamVector, psi: &IcnnRegulariser) -> Result<()> {
    theta.ensure_same_layout(theta_g)?;
    if psi.input_dim() != theta.layout().trainable_count() {
        return Err(Error::Layout(format!(
            "regulariser expects {} trainable coordinates, layout has {}",
            psi.input_dim(),
            theta.layout().trainable_count()
        )));
    }
    Ok(())
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// `R` over dense trainable vectors.
pub fn regulariser_value(theta: &[f64], theta_g: &[f64], psi: &IcnnRegulariser, cfg: &RegulariserConfig) -> Result<f64> {
    if theta.len() != theta_g.len() {
        return Err(Error::Layout("theta and theta_g differ in length".into()));
    }
    let diff: Vec<f64> = theta.iter().zip(theta_g).map(|(a, b)| a - b).collect();
    let f = psi.eval(&diff)?;
    Ok(f + cfg.alpha * sq_norm(&diff) + cfg.epsilon * (sq_norm(theta) + sq_norm(theta_g)))
}

/// `dR/dtheta` over dense trainable vectors.
pub fn regulariser_grad(theta: &[f64], theta_g: &[f64], psi: &IcnnRegulariser, cfg: &RegulariserConfig) -> Result<Vec<f64>> {
    if theta.len() != theta_g.len() {
        return Err(Error::Layout("theta and theta_g differ in length".into()));
    }
    let diff: Vec<f64> = theta.iter().zip(theta_g).map(|(a, b)| a - b).collect();
    let (_, mut g) = psi.eval_with_input_grad(&diff)?;
    for ((gi, d), t) in g.iter_mut().zip(&diff).zip(theta) {
        *gi += 2.0 * cfg.alpha * d + 2.0 * cfg.epsilon * t;
    }
    Ok(g)
}

pub fn eval_regulariser(
    theta: &ParamVector,
    theta_g: &ParamVector,
    psi: &IcnnRegulariser,
    cfg: &RegulariserConfig,
) -> Result<f64> {
    check_pair(theta, theta_g, psi)?;
    regulariser_value(&theta.trainable_f64(), &theta_g.trainable_f64(), psi, cfg)
}

/// Gradient of [`eval_regulariser`] with respect to `theta`; zero on buffers.
pub fn grad_regulariser_theta(
    theta: &ParamVector,
    theta_g: &ParamVector,
    psi: &IcnnRegulariser,
    cfg: &RegulariserConfig,
) -> Result<Gradient> {
    check_pair(theta, theta_g, psi)?;
    let dense = regulariser_grad(&theta.trainable_f64(), &theta_g.trainable_f64(), psi, cfg)?;
    let mut full = Gradient::zeros(theta.layout().clone());
    theta.layout().scatter_add_trainable(&dense, full.values_mut());
    Ok(full)
}

/// Runs `cfg.icnn_steps` projected gradient steps on `sum_k w_k R(theta_k; theta_g, psi)`.
///
/// Only `f_psi` depends on `psi`, so the quadratic terms drop out of the gradient.
pub fn server_psi_step(
    psi: &mut IcnnRegulariser,
    updates: &[ClientUpdate],
    theta_g: &ParamVector,
    weights: &[f64],
    cfg: &RegulariserConfig,
) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::InvalidInput("server psi step needs at least one client update".into()));
    }
    if weights.len() != updates.len() {
        return Err(Error::Shape(format!("{} weights for {} updates", weights.len(), updates.len())));
    }
    let anchor = theta_g.trainable_f64();
    let mut diffs = Vec::with_capacity(updates.len());
    for u in updates {
        check_pair(&u.params, theta_g, psi)?;
        let theta = u.params.trainable_f64();
        diffs.push(theta.iter().zip(&anchor).map(|(a, b)| a - b).collect::<Vec<f64>>());
    }
    for _ in 0..cfg.icnn_steps {
        let mut total = IcnnRegulariser::zeros(psi.input_dim, &psi.hidden_dims)?;
        for (diff, &w) in diffs.iter().zip(weights) {
            let (_, g) = psi.eval_with_param_grad(diff)?;
            total.scaled_add(w, &g);
        }
        psi.scaled_add(-cfg.icnn_lr, &total);
        psi.project_convexity();
    }
    Ok(())
}

/// Prior used by sites during MAP training, anchored at the received global model.
pub struct MapPrior<'a> {
    pub psi: &'a IcnnRegulariser,
    pub anchor: Vec<f64>,
    pub cfg: &'a RegulariserConfig,
}

impl PriorGradient for MapPrior<'_> {
    fn grad_trainable(&self, theta: &[f64]) -> Result<Vec<f64>> {
        regulariser_grad(theta, &self.anchor, self.psi, self.cfg)
    }
}
