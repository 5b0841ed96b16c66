use std::ops::Range;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Gradient, Layout, ParamVector, TensorKind};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_LAYER_DIMS: [usize; 4] = [256, 128, 64, 1];
pub const DEFAULT_DROPOUT: f64 = 0.3;

#[derive(Debug, Clone)]
struct BatchNormSlots {
    gamma: Range<usize>,
    beta: Range<usize>,
    mean: Range<usize>,
    var: Range<usize>,
}

#[derive(Debug, Clone)]
struct DenseSlots {
    fan_in: usize,
    fan_out: usize,
    weight: Range<usize>,
    bias: Range<usize>,
    bn: Option<BatchNormSlots>,
}

#[derive(Debug, Clone)]
struct HiddenCache {
    input: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    normalized: Array2<f64>,
    dropout: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
struct TrainCache {
    hidden: Vec<HiddenCache>,
    last_input: Array2<f64>,
    probs: Array1<f64>,
}

/// Forward-pass mode. Training mode uses batch statistics, updates the running
/// statistics and samples a dropout mask from the supplied generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

/// Dense binary classifier: `[affine -> batch-norm -> ReLU -> dropout]*` then
/// `affine -> sigmoid`.
///
/// All parameters, including the batch-norm running statistics, live in one
/// flat `f64` buffer laid out by [`Layout`], so packing to a [`ParamVector`] is
/// a single pass.
#[derive(Debug, Clone)]
pub struct MlpClassifier {
    layer_dims: Vec<usize>,
    dropout_p: f64,
    layout: Arc<Layout>,
    params: Vec<f64>,
    slots: Vec<DenseSlots>,
    cache: Option<TrainCache>,
}

fn layout_for(layer_dims: &[usize]) -> Result<(Layout, usize)> {
    let mut tensors = Vec::new();
    let n_affine = layer_dims.len() - 1;
    for i in 0..n_affine {
        let (d_in, d_out) = (layer_dims[i], layer_dims[i + 1]);
        tensors.push((format!("dense{i}.weight"), vec![d_in, d_out], TensorKind::Trainable));
        tensors.push((format!("dense{i}.bias"), vec![d_out], TensorKind::Trainable));
        if i + 1 < n_affine {
            tensors.push((format!("bn{i}.gamma"), vec![d_out], TensorKind::Trainable));
            tensors.push((format!("bn{i}.beta"), vec![d_out], TensorKind::Trainable));
            tensors.push((format!("bn{i}.running_mean"), vec![d_out], TensorKind::Buffer));
            tensors.push((format!("bn{i}.running_var"), vec![d_out], TensorKind::Buffer));
        }
    }
    Ok((Layout::new(tensors)?, n_affine))
}

/// Builds a classifier with He-uniform weights, zero biases, unit batch-norm
/// scale and zero shift, drawn deterministically from `seed`.
pub fn build_mlp(layer_dims: &[usize], dropout_p: f64, seed: u64) -> Result<MlpClassifier> {
    if layer_dims.len() < 2 {
        return Err(Error::Config("layer_dims needs at least an input and an output size".into()));
    }
    if layer_dims.contains(&0) {
        return Err(Error::Config(format!("layer_dims must be positive, got {layer_dims:?}")));
    }
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(Error::Config(format!("dropout_p must lie in [0, 1), got {dropout_p}")));
    }
    let (layout, n_affine) = layout_for(layer_dims)?;
    let slot = |name: String| layout.get(&name).expect("tensor present").range();
    let slots: Vec<DenseSlots> = (0..n_affine)
        .map(|i| DenseSlots {
            fan_in: layer_dims[i],
            fan_out: layer_dims[i + 1],
            weight: slot(format!("dense{i}.weight")),
            bias: slot(format!("dense{i}.bias")),
            bn: (i + 1 < n_affine).then(|| BatchNormSlots {
                gamma: slot(format!("bn{i}.gamma")),
                beta: slot(format!("bn{i}.beta")),
                mean: slot(format!("bn{i}.running_mean")),
                var: slot(format!("bn{i}.running_var")),
            }),
        })
        .collect();

    let mut params = vec![0.0; layout.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in &slots {
        let limit = (6.0 / s.fan_in as f64).sqrt();
        for w in &mut params[s.weight.clone()] {
            *w = rng.random_range(-limit..limit);
        }
        if let Some(bn) = &s.bn {
            params[bn.gamma.clone()].fill(1.0);
            params[bn.var.clone()].fill(1.0);
        }
    }
    Ok(MlpClassifier {
        layer_dims: layer_dims.to_vec(),
        dropout_p,
        layout: Arc::new(layout),
        params,
        slots,
        cache: None,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl MlpClassifier {
    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn dropout_p(&self) -> f64 {
        self.dropout_p
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn trainable_count(&self) -> usize {
        self.layout.trainable_count()
    }

    /// Flat parameter buffer in layout order.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access for optimizers. Invalidates any cached forward state.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.cache = None;
        &mut self.params
    }

    pub fn to_param_vector(&self) -> ParamVector {
        ParamVector::from_f64(self.layout.clone(), &self.params).expect("own layout")
    }

    pub fn load_param_vector(&mut self, pv: &ParamVector) -> Result<()> {
        if **pv.layout() != *self.layout {
            return Err(Error::Layout("parameter vector does not match the model layout".into()));
        }
        for (dst, &src) in self.params.iter_mut().zip(pv.values()) {
            *dst = f64::from(src);
        }
        self.cache = None;
        Ok(())
    }

    fn matrix(&self, range: &Range<usize>, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.params[range.clone()]).expect("slot shape")
    }

    fn vector(&self, range: &Range<usize>) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[range.clone()])
    }

    fn affine(&self, s: &DenseSlots, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.dot(&self.matrix(&s.weight, s.fan_in, s.fan_out));
        h += &self.vector(&s.bias);
        h
    }

    fn check_input(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "expected {} input features, got {}",
                self.input_dim(),
                batch.ncols()
            )));
        }
        Ok(())
    }

    /// Entry point dispatching on [`Mode`].
    pub fn forward(&mut self, batch: ArrayView2<f64>, mode: Mode<'_>) -> Result<Array1<f64>> {
        match mode {
            Mode::Eval => self.predict(batch),
            Mode::Train(rng) => self.forward_train(batch, rng),
        }
    }

    /// Eval-mode probabilities: running statistics, no dropout, no mutation.
    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_input(&batch)?;
        let mut x = batch.to_owned();
        for s in &self.slots {
            let mut h = self.affine(s, &x.view());
            match &s.bn {
                Some(bn) => {
                    let gamma = self.vector(&bn.gamma);
                    let beta = self.vector(&bn.beta);
                    let mean = self.vector(&bn.mean);
                    let var = self.vector(&bn.var);
                    let scale = Array1::from_iter(
                        gamma.iter().zip(var.iter()).map(|(g, v)| g / (v + BN_EPS).sqrt()),
                    );
                    h -= &mean;
                    h *= &scale;
                    h += &beta;
                    h.mapv_inplace(|v| v.max(0.0));
                    x = h;
                }
                None => return Ok(h.column(0).mapv(sigmoid)),
            }
        }
        unreachable!("final layer has no batch norm")
    }

    /// Training-mode forward pass. Caches everything [`MlpClassifier::backward`] needs.
    pub fn forward_train(&mut self, batch: ArrayView2<f64>, rng: &mut dyn RngCore) -> Result<Array1<f64>> {
        self.check_input(&batch)?;
        let n = batch.nrows();
        if n < 2 {
            return Err(Error::Training("batch norm needs at least two rows in training mode".into()));
        }
        let keep_scale = 1.0 / (1.0 - self.dropout_p);
        let mut hidden = Vec::with_capacity(self.slots.len() - 1);
        let mut x = batch.to_owned();
        let slots = self.slots.clone();
        for s in &slots {
            let h = self.affine(s, &x.view());
            let Some(bn) = &s.bn else {
                let probs = h.column(0).mapv(sigmoid);
                self.cache = Some(TrainCache { hidden, last_input: x, probs: probs.clone() });
                return Ok(probs);
            };
            let mean = h.mean_axis(Axis(0)).expect("non-empty batch");
            let centered = &h - &mean;
            let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
            let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let xhat = &centered * &inv_std;
            let mut normalized = &xhat * &self.vector(&bn.gamma);
            normalized += &self.vector(&bn.beta);

            let unbias = n as f64 / (n as f64 - 1.0);
            for (j, slot) in bn.mean.clone().enumerate() {
                self.params[slot] = (1.0 - BN_MOMENTUM) * self.params[slot] + BN_MOMENTUM * mean[j];
            }
            for (j, slot) in bn.var.clone().enumerate() {
                self.params[slot] =
                    (1.0 - BN_MOMENTUM) * self.params[slot] + BN_MOMENTUM * var[j] * unbias;
            }

            let mut out = normalized.mapv(|v| v.max(0.0));
            let dropout = if self.dropout_p > 0.0 {
                let p = self.dropout_p;
                let mask = Array2::from_shape_fn(out.raw_dim(), |_| {
                    if rng.random::<f64>() < p { 0.0 } else { keep_scale }
                });
                out *= &mask;
                Some(mask)
            } else {
                None
            };
            hidden.push(HiddenCache { input: x, xhat, inv_std, normalized, dropout });
            x = out;
        }
        unreachable!("final layer has no batch norm")
    }

    /// Gradient of the mean binary cross-entropy of the cached training batch.
    /// Running-statistic coordinates are zero.
    pub fn backward(&self, labels: &[u8]) -> Result<Gradient> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Training("backward called without a cached training forward pass".into()))?;
        let n = cache.probs.len();
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for a batch of {n}", labels.len())));
        }
        let mut grad = vec![0.0; self.layout.len()];

        let mut upstream = Array2::from_shape_fn((n, 1), |(i, _)| {
            (cache.probs[i] - f64::from(labels[i])) / n as f64
        });
        let last = self.slots.last().expect("at least one layer");
        let mut input = &cache.last_input;
        let mut slot = last;
        for layer in (0..self.slots.len()).rev() {
            let dw = input.t().dot(&upstream);
            let db = upstream.sum_axis(Axis(0));
            for (g, v) in grad[slot.weight.clone()].iter_mut().zip(dw.iter()) {
                *g = *v;
            }
            for (g, v) in grad[slot.bias.clone()].iter_mut().zip(db.iter()) {
                *g = *v;
            }
            if layer == 0 {
                break;
            }
            let mut d_out = upstream.dot(&self.matrix(&slot.weight, slot.fan_in, slot.fan_out).t());
            let hc = &cache.hidden[layer - 1];
            slot = &self.slots[layer - 1];
            let bn = slot.bn.as_ref().expect("hidden layer has batch norm");
            if let Some(mask) = &hc.dropout {
                d_out *= mask;
            }
            ndarray::Zip::from(&mut d_out)
                .and(&hc.normalized)
                .for_each(|d, &z| if z <= 0.0 { *d = 0.0 });

            let dgamma = (&d_out * &hc.xhat).sum_axis(Axis(0));
            let dbeta = d_out.sum_axis(Axis(0));
            for (g, v) in grad[bn.gamma.clone()].iter_mut().zip(dgamma.iter()) {
                *g = *v;
            }
            for (g, v) in grad[bn.beta.clone()].iter_mut().zip(dbeta.iter()) {
                *g = *v;
            }
            let dxhat = &d_out * &self.vector(&bn.gamma);
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * &hc.xhat).sum_axis(Axis(0));
            let nf = n as f64;
            let mut dh = dxhat * nf;
            dh -= &sum_dxhat;
            dh -= &(&hc.xhat * &sum_dxhat_xhat);
            dh *= &(&hc.inv_std / nf);
            upstream = dh;
            input = &hc.input;
        }
        Gradient::new(self.layout.clone(), grad)
    }

    /// Drops cached training state.
    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Mean and summed binary cross-entropy with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(probs: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!("{} probabilities vs {} labels", probs.len(), labels.len())));
    }
    if probs.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    const CLAMP: f64 = 1e-7;
    let mut sum = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let p = p.clamp(CLAMP, 1.0 - CLAMP);
        sum -= match y {
            1 => p.ln(),
            0 => (1.0 - p).ln(),
            other => return Err(Error::InvalidInput(format!("label {other} is not binary"))),
        };
    }
    Ok((sum / probs.len() as f64, sum))
}
