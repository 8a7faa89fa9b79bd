//! Small dense-network engine: ReLU MLPs in f64 with hand-written
//! reverse-mode gradients and an Adam optimizer.
//!
//! Layer `l` maps `d_in -> d_out` with weights stored row-major as
//! `d_out x d_in`. Batches are row-major `batch x features`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    Logits,
    Scalar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layer_dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    activation: Activation,
    head: OutputHead,
}

/// Activations kept by [`DenseNet::forward_train`] for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// Input of every layer (the first is the network input).
    inputs: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self
            .weights
            .iter()
            .map(|w| w.iter().map(|x| x * x).sum::<f64>())
            .chain(self.biases.iter().map(|b| b.iter().map(|x| x * x).sum::<f64>()))
            .sum();
        sq.sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|x| x * factor);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|x| x * factor);
        }
    }

    /// Rescale so the global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

impl DenseNet {
    /// He-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases.
    pub fn new(layer_dims: &[usize], head: OutputHead, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, head)?;
        let mut rng = seed::stream(seed, 3);
        for w in &mut net.weights {
            let bound = (6.0 / w.ncols() as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Ok(net)
    }

    pub fn zeros(layer_dims: &[usize], head: OutputHead) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Shape(format!(
                "layer dims must list at least input and output, all positive: {layer_dims:?}"
            )));
        }
        if head == OutputHead::Scalar && *layer_dims.last().unwrap() != 1 {
            return Err(Error::Shape("scalar head needs output width 1".into()));
        }
        let weights = layer_dims
            .windows(2)
            .map(|w| Array2::zeros((w[1], w[0])))
            .collect();
        let biases = layer_dims[1..].iter().map(|&d| Array1::zeros(d)).collect();
        Ok(DenseNet {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation: Activation::Relu,
            head,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Multiply the last layer's weights by `factor` and zero its bias.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.weights.len() - 1;
        self.weights[last].mapv_inplace(|x| x * factor);
        self.biases[last].fill(0.0);
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|x| *x = it.next().unwrap());
            b.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        Ok(())
    }

    pub fn param_digest(&self) -> String {
        let bytes: Vec<u8> = self
            .flat_params()
            .iter()
            .flat_map(|x| x.to_le_bytes())
            .collect();
        crate::digest_bytes(&bytes)
    }

    fn check_batch(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} does not match network input {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn layer(&self, l: usize, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights[l].t());
        z += &self.biases[l];
        if l + 1 < self.weights.len() {
            match self.activation {
                Activation::Relu => z.mapv_inplace(relu),
            }
        }
        z
    }

    /// Inference on one input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        crate::error::shape_check("network input", self.input_dim(), input.len())?;
        // Matrix-vector products: a 1-row gemm allocates large packing
        // buffers on every call.
        let mut h = Array1::from(input.to_vec());
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w.dot(&h);
            z += b;
            if l < last {
                match self.activation {
                    Activation::Relu => z.mapv_inplace(relu),
                }
            }
            h = z;
        }
        Ok(h.to_vec())
    }

    /// Inference on a batch (one row per sample).
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(&x)?;
        let mut h = self.layer(0, &x);
        for l in 1..self.weights.len() {
            h = self.layer(l, &h.view());
        }
        Ok(h)
    }

    /// Forward pass that keeps what [`Self::backward`] needs.
    pub fn forward_train(&self, x: Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_batch(&x.view())?;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut h = x;
        for l in 0..self.weights.len() {
            let next = self.layer(l, &h.view());
            inputs.push(h);
            h = next;
        }
        Ok((h, ForwardCache { inputs }))
    }

    /// Gradients of a scalar loss given `grad_out = dLoss/dOutput` for the
    /// batch cached by [`Self::forward_train`].
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>) -> Result<Gradients> {
        if cache.inputs.len() != self.weights.len() {
            return Err(Error::State(
                "backward needs the cache of a training-mode forward pass".into(),
            ));
        }
        let batch = cache.inputs[0].nrows();
        if grad_out.dim() != (batch, self.output_dim()) {
            return Err(Error::Shape(format!(
                "output gradient has shape {:?}, expected ({batch}, {})",
                grad_out.dim(),
                self.output_dim()
            )));
        }
        let n = self.weights.len();
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        let mut delta = grad_out.to_owned();
        for l in (0..n).rev() {
            let input = &cache.inputs[l];
            if input.ncols() != self.layer_dims[l] {
                return Err(Error::State("cache does not belong to this network".into()));
            }
            gw.push(delta.t().dot(input));
            gb.push(delta.sum_axis(Axis(0)));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l]);
                // `input` is the ReLU output of layer l-1; its derivative is 1 where positive.
                ndarray::Zip::from(&mut back)
                    .and(input)
                    .for_each(|g, &a| {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    });
                delta = back;
            }
        }
        gw.reverse();
        gb.reverse();
        Ok(Gradients {
            weights: gw,
            biases: gb,
        })
    }

    pub fn to_checkpoint(&self, mut meta: Map<String, Value>) -> NetCheckpoint {
        meta.insert("digest".into(), Value::String(self.param_digest()));
        NetCheckpoint {
            layer_dims: self.layer_dims.clone(),
            hidden_activation: self.activation,
            output_head: self.head,
            weights: self.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: self.biases.iter().map(|b| b.to_vec()).collect(),
            meta,
        }
    }

    pub fn from_checkpoint(ckpt: &NetCheckpoint) -> Result<Self> {
        let mut net = Self::zeros(&ckpt.layer_dims, ckpt.output_head)?;
        if ckpt.weights.len() != net.weights.len() || ckpt.biases.len() != net.biases.len() {
            return Err(Error::Shape("checkpoint layer count mismatch".into()));
        }
        for (l, (w, b)) in ckpt.weights.iter().zip(&ckpt.biases).enumerate() {
            let (rows, cols) = net.weights[l].dim();
            if w.len() != rows * cols || b.len() != rows {
                return Err(Error::Shape(format!(
                    "checkpoint layer {l} does not match dims {} -> {}",
                    cols, rows
                )));
            }
            net.weights[l] = Array2::from_shape_vec((rows, cols), w.clone())
                .map_err(|e| Error::Shape(e.to_string()))?;
            net.biases[l] = Array1::from_vec(b.clone());
        }
        if let Some(Value::String(d)) = ckpt.meta.get("digest") {
            let actual = net.param_digest();
            if *d != actual {
                return Err(Error::digest(d, &actual));
            }
        }
        Ok(net)
    }
}

/// On-disk network: `{"layer_dims","hidden_activation","output_head","weights","biases","meta"}`.
/// `weights[l]` is the flattened row-major `d_out x d_in` matrix of layer `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub layer_dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_head: OutputHead,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub meta: Map<String, Value>,
}

impl NetCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(net: &DenseNet, config: AdamConfig) -> Self {
        AdamState {
            config,
            t: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    /// One bias-corrected Adam update of `net` in place.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        let congruent = grads.weights.len() == net.weights.len()
            && grads.weights.iter().zip(&net.weights).all(|(g, w)| g.dim() == w.dim())
            && grads.biases.iter().zip(&net.biases).all(|(g, b)| g.dim() == b.dim())
            && self.m.weights.iter().zip(&net.weights).all(|(m, w)| m.dim() == w.dim());
        if !congruent {
            return Err(Error::Shape("gradients do not match network parameters".into()));
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for l in 0..net.weights.len() {
            ndarray::Zip::from(&mut net.weights[l])
                .and(&grads.weights[l])
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut net.biases[l])
                .and(&grads.biases[l])
                .and(&mut self.m.biases[l])
                .and(&mut self.v.biases[l])
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Softmax and losses
// ---------------------------------------------------------------------------

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Softmax restricted to entries where `mask` is true; masked entries are 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::Shape(format!(
            "mask length {} does not match {} logits",
            mask.len(),
            logits.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::NoLegalAction);
    }
    if logits.iter().zip(mask).any(|(x, &m)| m && !x.is_finite()) {
        return Err(Error::NonFinite("masked softmax input".into()));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(x, &m)| if m { (x - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `-ln probs[label]`.
pub fn cross_entropy(label: usize, probs: &[f64]) -> Result<f64> {
    let p = *probs.get(label).ok_or(Error::Index {
        index: label,
        len: probs.len(),
    })?;
    if !p.is_finite() {
        return Err(Error::NonFinite("cross-entropy probability".into()));
    }
    Ok(-p.max(f64::MIN_POSITIVE).ln())
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// `0.5 * ||out - target||^2`
    SquaredError(Vec<f64>),
    /// `-ln softmax(out)[label]`
    CrossEntropy(usize),
}

impl LossSpec {
    /// Loss value and its gradient with respect to the network output.
    pub fn evaluate(&self, output: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self {
            LossSpec::SquaredError(target) => {
                crate::error::shape_check("squared-error target", output.len(), target.len())?;
                let diff: Vec<f64> = output.iter().zip(target).map(|(o, t)| o - t).collect();
                let loss = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
                Ok((loss, diff))
            }
            LossSpec::CrossEntropy(label) => {
                let probs = softmax(output)?;
                let loss = cross_entropy(*label, &probs)?;
                let mut grad = probs;
                grad[*label] -= 1.0;
                Ok((loss, grad))
            }
        }
    }
}

/// Largest relative difference between backprop and central-difference
/// gradients, with denominator `max(|a|, |b|, 1e-8)`.
pub fn finite_diff_check(net: &DenseNet, input: &[f64], loss: &LossSpec, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let x = Array2::from_shape_vec((1, input.len()), input.to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let (out, cache) = net.forward_train(x)?;
    let (_, g) = loss.evaluate(out.as_slice().expect("contiguous"))?;
    let grad_out = Array2::from_shape_vec((1, g.len()), g).expect("shape");
    let analytic = net.backward(&cache, grad_out.view())?.flatten();

    let base = net.flat_params();
    let mut probe = net.clone();
    let mut params = base.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        params[i] = base[i] + eps;
        probe.set_flat_params(&params)?;
        let plus = loss.evaluate(&probe.forward(input)?)?.0;
        params[i] = base[i] - eps;
        probe.set_flat_params(&params)?;
        let minus = loss.evaluate(&probe.forward(input)?)?.0;
        params[i] = base[i];
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seed::stream(seed, 99);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Straight-line matrix-multiply chain used as an independent forward oracle.
    fn reference_forward(net: &DenseNet, input: &[f64]) -> Vec<f64> {
        let mut h = input.to_vec();
        let n = net.weights().len();
        for l in 0..n {
            let w = &net.weights()[l];
            let b = &net.biases()[l];
            let mut next = vec![0.0; w.nrows()];
            for (r, slot) in next.iter_mut().enumerate() {
                let mut acc = b[r];
                for c in 0..w.ncols() {
                    acc += w[(r, c)] * h[c];
                }
                *slot = if l + 1 < n { acc.max(0.0) } else { acc };
            }
            h = next;
        }
        h
    }

    #[test]
    fn zero_net_gives_zero_output() {
        let net = DenseNet::zeros(&[4, 8, 8, 3], OutputHead::Logits).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
        assert_eq!(net.n_params(), 4 * 8 + 8 + 8 * 8 + 8 + 8 * 3 + 3);
    }

    #[test]
    fn identity_layers_pass_nonnegative_inputs() {
        let mut net = DenseNet::zeros(&[3, 3, 3], OutputHead::Logits).unwrap();
        for w in net.weights_mut() {
            *w = Array2::eye(3);
        }
        let x = [0.5, 0.0, 2.0];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_matches_reference_chain() {
        for s in 0..5 {
            let net = DenseNet::new(&[6, 10, 7, 4], OutputHead::Logits, s).unwrap();
            let x = random_input(6, s);
            let got = net.forward(&x).unwrap();
            let want = reference_forward(&net, &x);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_rejects_bad_width() {
        let net = DenseNet::new(&[3, 4, 2], OutputHead::Logits, 0).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Shape(_))));
        assert!(DenseNet::zeros(&[3, 2], OutputHead::Scalar).is_err());
    }

    #[test]
    fn zero_output_gradient_gives_zero_grads() {
        let net = DenseNet::new(&[3, 5, 5, 2], OutputHead::Logits, 1).unwrap();
        let x = Array2::from_shape_vec((2, 3), random_input(6, 1)).unwrap();
        let (_, cache) = net.forward_train(x).unwrap();
        let g = net.backward(&cache, Array2::zeros((2, 2)).view()).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_without_cache_is_state_error() {
        let net = DenseNet::new(&[3, 5, 2], OutputHead::Logits, 1).unwrap();
        let err = net
            .backward(&ForwardCache::default(), Array2::zeros((1, 2)).view())
            .unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn single_linear_layer_gradient_closed_form() {
        let net = DenseNet::new(&[3, 2], OutputHead::Logits, 4).unwrap();
        let x = vec![0.3, -1.2, 2.0];
        let y = vec![1.0, -1.0];
        let out = net.forward(&x).unwrap();
        let (_, cache) = net
            .forward_train(Array2::from_shape_vec((1, 3), x.clone()).unwrap())
            .unwrap();
        let resid: Vec<f64> = out.iter().zip(&y).map(|(o, t)| o - t).collect();
        let g = net
            .backward(&cache, Array2::from_shape_vec((1, 2), resid.clone()).unwrap().view())
            .unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((g.weights[0][(r, c)] - resid[r] * x[c]).abs() < 1e-14);
            }
            assert!((g.biases[0][r] - resid[r]).abs() < 1e-14);
        }
    }

    #[test]
    fn finite_differences_agree() {
        let linear = DenseNet::new(&[4, 3], OutputHead::Logits, 2).unwrap();
        let err = finite_diff_check(
            &linear,
            &random_input(4, 2),
            &LossSpec::SquaredError(vec![0.1, 0.2, 0.3]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");

        let net = DenseNet::new(&[5, 8, 8, 4], OutputHead::Logits, 3).unwrap();
        let err = finite_diff_check(&net, &random_input(5, 3), &LossSpec::CrossEntropy(2), 1e-5)
            .unwrap();
        assert!(err < 1e-4, "{err}");

        assert!(matches!(
            finite_diff_check(&net, &random_input(5, 3), &LossSpec::CrossEntropy(2), 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut net = DenseNet::new(&[3, 4, 2], OutputHead::Logits, 5).unwrap();
        let before = net.clone();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        adam.step(&mut net, &Gradients::zeros_like(&before)).unwrap();
        assert_eq!(net, before);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut net = DenseNet::new(&[2, 2], OutputHead::Logits, 6).unwrap();
        let before = net.flat_params();
        let mut grads = Gradients::zeros_like(&net);
        grads.weights[0].fill(3.0);
        grads.biases[0].fill(-0.25);
        let mut adam = AdamState::new(&net, AdamConfig::default());
        adam.step(&mut net, &grads).unwrap();
        let g = grads.flatten();
        for ((a, b), g) in net.flat_params().iter().zip(&before).zip(&g) {
            let step = a - b;
            assert!((step + 1e-3 * g.signum()).abs() < 1e-8, "{step}");
        }
    }

    #[test]
    fn adam_decreases_convex_quadratic() {
        // f(w) = 0.5 * ((w0 - 1)^2 + 4 (w1 + 2)^2) on the weights of a 1x2 layer.
        let f = |w: &[f64]| 0.5 * ((w[0] - 1.0).powi(2) + 4.0 * (w[1] + 2.0).powi(2));
        let mut net = DenseNet::zeros(&[2, 1], OutputHead::Scalar).unwrap();
        let mut adam = AdamState::new(&net, AdamConfig { lr: 0.05, ..AdamConfig::default() });
        let start = f(net.weights()[0].as_slice().unwrap());
        for _ in 0..50 {
            let w = net.weights()[0].as_slice().unwrap().to_vec();
            let mut g = Gradients::zeros_like(&net);
            g.weights[0][(0, 0)] = w[0] - 1.0;
            g.weights[0][(0, 1)] = 4.0 * (w[1] + 2.0);
            adam.step(&mut net, &g).unwrap();
        }
        assert!(f(net.weights()[0].as_slice().unwrap()) < start);
    }

    #[test]
    fn adam_rejects_mismatched_grads() {
        let mut net = DenseNet::new(&[3, 4, 2], OutputHead::Logits, 5).unwrap();
        let other = DenseNet::new(&[3, 5, 2], OutputHead::Logits, 5).unwrap();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        assert!(matches!(
            adam.step(&mut net, &Gradients::zeros_like(&other)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn softmax_and_cross_entropy() {
        let p = softmax(&[0.0; 4]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!((cross_entropy(1, &p).unwrap() - 4f64.ln()).abs() < 1e-12);
        let a = softmax(&[1.0, 2.0, -3.0]).unwrap();
        let b = softmax(&[101.0, 102.0, 97.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(cross_entropy(0, &[1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(softmax(&[f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn masked_softmax_zeroes_illegal_entries() {
        let p = masked_softmax(&[5.0, 1.0, 3.0], &[false, true, false]).unwrap();
        assert_eq!(p, vec![0.0, 1.0, 0.0]);
        assert!(matches!(
            masked_softmax(&[1.0, 2.0], &[false, false]),
            Err(Error::NoLegalAction)
        ));
    }

    #[test]
    fn checkpoint_roundtrip_and_dim_mismatch() {
        let net = DenseNet::new(&[3, 4, 2], OutputHead::Logits, 8).unwrap();
        let mut meta = Map::new();
        meta.insert("seed".into(), Value::from(8));
        let ckpt = net.to_checkpoint(meta);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        ckpt.save(&path).unwrap();
        let back = DenseNet::from_checkpoint(&NetCheckpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back, net);

        let mut bad = ckpt.clone();
        bad.layer_dims = vec![3, 5, 2];
        assert!(matches!(DenseNet::from_checkpoint(&bad), Err(Error::Shape(_))));
        let mut tampered = ckpt;
        tampered.biases[0][0] += 1.0;
        assert!(matches!(
            DenseNet::from_checkpoint(&tampered),
            Err(Error::DigestMismatch { .. })
        ));
    }
}
