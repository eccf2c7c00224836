//! Fixed-topology feedforward networks in f64 with exact reverse-mode
//! gradients, Adam and Polyak averaging.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }

    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
        }
    }

    /// Multiplies `grad` by the derivative, given the layer output.
    fn backprop(self, output: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => Zip::from(grad).and(output).for_each(|g, &o| {
                if o <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Tanh => Zip::from(grad).and(output).for_each(|g, &o| *g *= 1.0 - o * o),
        }
    }
}

/// Affine layer `y = act(x W + b)` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero biases.
    HeUniform,
    /// Orthogonal weights with unit gain, zero biases.
    Orthogonal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Network input and per-layer outputs from a forward pass. Buffers are
/// reused across calls of matching batch size.
#[derive(Clone, Debug, Default)]
pub struct ForwardCache {
    pub input: Array2<f64>,
    pub outputs: Vec<Array2<f64>>,
    sparse: Option<Vec<Vec<(usize, f64)>>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("network has at least one layer")
    }

    pub fn layer_input(&self, l: usize) -> &Array2<f64> {
        if l == 0 {
            &self.input
        } else {
            &self.outputs[l - 1]
        }
    }
}

/// Scratch space for `backward_into`.
#[derive(Clone, Debug, Default)]
pub struct BackwardScratch {
    deltas: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|(w, b)| w.iter().chain(b.iter()).map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            *w *= factor;
            *b *= factor;
        }
    }

    /// Rescales to at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Rows with at most this fraction of nonzeros take the sparse path in the
/// first layer.
const SPARSE_DENSITY: f64 = 0.125;

fn sparse_rows(x: &ArrayView2<f64>) -> Option<Vec<Vec<(usize, f64)>>> {
    let budget = ((x.ncols() as f64) * SPARSE_DENSITY).ceil() as usize;
    let mut rows = Vec::with_capacity(x.nrows());
    for row in x.rows() {
        let nz: Vec<(usize, f64)> = row.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, &v)| (i, v)).collect();
        if nz.len() > budget {
            return None;
        }
        rows.push(nz);
    }
    Some(rows)
}

fn reshape(a: &mut Array2<f64>, rows: usize, cols: usize) {
    if a.dim() != (rows, cols) {
        *a = Array2::zeros((rows, cols));
    }
}

impl Mlp {
    /// Layer widths `sizes[0] -> sizes[1] -> ...` with one activation per layer.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activations: &[Activation], init: Init, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(Error::Shape(format!(
                "{} sizes need {} activations, got {}",
                sizes.len(),
                sizes.len().saturating_sub(1),
                activations.len()
            )));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weight = match init {
                    Init::HeUniform => {
                        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                        Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
                    }
                    Init::Orthogonal => orthogonal(fan_in, fan_out, 1.0, rng),
                };
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation: act,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Dense::fan_out).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if !l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFiniteParameter { layer: i });
            }
        }
        Ok(())
    }

    /// `out <- act(x W + b)`, with an optional sparse view of `x`.
    fn layer_into(&self, l: usize, x: &ArrayView2<f64>, sparse: Option<&[Vec<(usize, f64)>]>, out: &mut Array2<f64>) {
        let layer = &self.layers[l];
        reshape(out, x.nrows(), layer.fan_out());
        match sparse {
            Some(rows) => {
                out.fill(0.0);
                for (i, nz) in rows.iter().enumerate() {
                    let mut o = out.row_mut(i);
                    for &(j, v) in nz {
                        o.scaled_add(v, &layer.weight.row(j));
                    }
                }
            }
            None => general_mat_mul(1.0, x, &layer.weight, 0.0, out),
        }
        *out += &layer.bias;
        layer.activation.apply(out);
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Output of the first `depth` layers (`depth = 0` returns the input).
    pub fn forward_to(&self, x: ArrayView2<f64>, depth: usize) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let depth = depth.min(self.layers.len());
        if depth == 0 {
            return Ok(x.to_owned());
        }
        let sparse = sparse_rows(&x);
        let mut h = Array2::zeros((0, 0));
        self.layer_into(0, &x, sparse.as_deref(), &mut h);
        for l in 1..depth {
            let mut next = Array2::zeros((0, 0));
            self.layer_into(l, &h.view(), None, &mut next);
            h = next;
        }
        Ok(h)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward_to(x, self.layers.len())
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        let mut cache = ForwardCache::default();
        self.forward_into(x, &mut cache)?;
        Ok(cache)
    }

    /// Forward pass keeping every layer output, reusing `cache` buffers.
    pub fn forward_into(&self, x: ArrayView2<f64>, cache: &mut ForwardCache) -> Result<()> {
        self.check_input(&x)?;
        reshape(&mut cache.input, x.nrows(), x.ncols());
        cache.input.assign(&x);
        cache.sparse = sparse_rows(&x);
        cache.outputs.resize_with(self.layers.len(), || Array2::zeros((0, 0)));
        for l in 0..self.layers.len() {
            let (done, rest) = cache.outputs.split_at_mut(l);
            let input = if l == 0 { cache.input.view() } else { done[l - 1].view() };
            let sparse = if l == 0 { cache.sparse.as_deref() } else { None };
            self.layer_into(l, &input, sparse, &mut rest[0]);
        }
        Ok(())
    }

    /// Gradients of a scalar loss given `d loss / d output`.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Array2<f64>) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        let mut delta = grad_output.clone();
        self.backward_into(cache, &mut delta, &mut grads, &mut BackwardScratch::default())?;
        Ok(grads)
    }

    /// Like `backward`, overwriting `grads`. `delta` holds `d loss / d
    /// output` on entry and is used as scratch.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        delta: &mut Array2<f64>,
        grads: &mut Gradients,
        scratch: &mut BackwardScratch,
    ) -> Result<()> {
        if delta.dim() != cache.output().dim() {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                delta.dim(),
                cache.output().dim()
            )));
        }
        if grads.layers.len() != self.layers.len() {
            *grads = Gradients::zeros_like(self);
        }
        let n_layers = self.layers.len();
        scratch.deltas.resize_with(n_layers, || Array2::zeros((0, 0)));
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            // the top layer's delta lives in `delta`, the rest in scratch
            let (lower, upper) = scratch.deltas.split_at_mut(l);
            let d: &mut Array2<f64> = if l + 1 == n_layers { &mut *delta } else { &mut upper[0] };
            layer.activation.backprop(&cache.outputs[l], d);
            let (gw, gb) = &mut grads.layers[l];
            let input = cache.layer_input(l);
            match (l, cache.sparse.as_deref()) {
                (0, Some(rows)) => {
                    gw.fill(0.0);
                    for (i, nz) in rows.iter().enumerate() {
                        for &(j, v) in nz {
                            gw.row_mut(j).scaled_add(v, &d.row(i));
                        }
                    }
                }
                _ => general_mat_mul(1.0, &input.t(), &*d, 0.0, gw),
            }
            gb.fill(0.0);
            for row in d.rows() {
                *gb += &row;
            }
            if l > 0 {
                let below = &mut lower[l - 1];
                reshape(below, d.nrows(), layer.fan_in());
                general_mat_mul(1.0, &*d, &layer.weight.t(), 0.0, below);
            }
        }
        Ok(())
    }

    /// `self <- tau * self + (1 - tau) * online`.
    pub fn polyak_update(&mut self, online: &Mlp, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Precondition(format!("tau {tau} outside [0, 1]")));
        }
        self.check_same_shape(online)?;
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            Zip::from(&mut t.weight).and(&o.weight).for_each(|t, &o| *t = tau * *t + (1.0 - tau) * o);
            Zip::from(&mut t.bias).and(&o.bias).for_each(|t, &o| *t = tau * *t + (1.0 - tau) * o);
        }
        Ok(())
    }

    pub fn check_same_shape(&self, other: &Mlp) -> Result<()> {
        let same = self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.activation == b.activation);
        if same {
            Ok(())
        } else {
            Err(Error::Shape("networks differ in shape".into()))
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.param_count())));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    /// SHA-256 over layer shapes, activation tags and parameter bits.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.layers.len() as u64).to_le_bytes());
        for l in &self.layers {
            h.update((l.fan_in() as u64).to_le_bytes());
            h.update((l.fan_out() as u64).to_le_bytes());
            h.update([l.activation.tag()]);
            for v in l.weight.iter().chain(l.bias.iter()) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Product of layer spectral norms: a Lipschitz bound for the network
    /// when every activation is 1-Lipschitz.
    pub fn lipschitz_bound(&self) -> Result<f64> {
        let mut bound = 1.0;
        for l in &self.layers {
            let gram = l.weight.t().dot(&l.weight);
            let eig = linalg::symmetric_eigen(&gram)?;
            bound *= eig.values.iter().fold(0.0f64, |m, &v| m.max(v)).sqrt();
        }
        Ok(bound)
    }
}

/// `rows x cols` matrix with orthonormal rows or columns (whichever is
/// shorter), scaled by `gain`.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    if short == 0 {
        return Array2::zeros((rows, cols));
    }
    let mut q;
    loop {
        let g = Array2::from_shape_fn((tall, short), |_| StandardNormal.sample(rng));
        q = linalg::orthonormal_basis(g.view(), 1e-10);
        if q.ncols() == short {
            break;
        }
    }
    let q = if rows >= cols { q } else { q.t().to_owned() };
    q * gain
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1.5e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Gradients,
    pub second: Gradients,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
        }
    }

    /// One bias-corrected Adam step. Non-finite gradients are rejected
    /// before anything is modified.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers.len() {
            return Err(Error::Shape("gradient layer count differs from network".into()));
        }
        for (i, ((gw, gb), l)) in grads.layers.iter().zip(&net.layers).enumerate() {
            if gw.dim() != l.weight.dim() || gb.len() != l.bias.len() {
                return Err(Error::Shape(format!("gradient shape mismatch in layer {i}")));
            }
            if !gw.iter().chain(gb.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient { layer: i });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[i];
            let (mw, mb) = &mut self.first.layers[i];
            let (vw, vb) = &mut self.second.layers[i];
            Zip::from(&mut layer.weight)
                .and(mw)
                .and(vw)
                .and(gw)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.bias)
                .and(mb)
                .and(vb)
                .and(gb)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        net.check_finite()
    }
}

/// Shared trunk plus `heads x actions` affine outputs. The feature layer is
/// the penultimate layer; with no hidden layers the features are the raw
/// observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub net: Mlp,
    pub n_heads: usize,
    pub n_actions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub width_mult: usize,
    pub feature_dim: usize,
    pub feature_activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 2,
            hidden_width: 128,
            width_mult: 1,
            feature_dim: 16,
            feature_activation: Activation::Relu,
        }
    }
}

impl EncoderConfig {
    /// Identity features: a single affine head on the observation.
    pub fn linear() -> Self {
        Self {
            hidden_layers: 0,
            ..Self::default()
        }
    }
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        config: &EncoderConfig,
        obs_dim: usize,
        n_heads: usize,
        n_actions: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if config.hidden_layers > 0 && (config.feature_dim == 0 || config.hidden_width * config.width_mult == 0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        let mut sizes = vec![obs_dim];
        let mut acts = Vec::new();
        if config.hidden_layers > 0 {
            for _ in 0..config.hidden_layers {
                sizes.push(config.hidden_width * config.width_mult);
                acts.push(Activation::Relu);
            }
            sizes.push(config.feature_dim);
            acts.push(config.feature_activation);
        }
        sizes.push(n_heads * n_actions);
        acts.push(Activation::Identity);
        let net = Mlp::new(&sizes, &acts, Init::HeUniform, rng)?;
        Ok(Self { net, n_heads, n_actions })
    }

    pub fn feature_depth(&self) -> usize {
        self.net.layers.len() - 1
    }

    pub fn feature_dim(&self) -> usize {
        if self.feature_depth() == 0 {
            self.net.input_dim()
        } else {
            self.net.layers[self.feature_depth() - 1].fan_out()
        }
    }

    pub fn features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.net.forward_to(x, self.feature_depth())
    }

    /// `batch x (heads * actions)`; head `j`, action `a` sits at column `j * actions + a`.
    pub fn head_values(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.net.forward(x)
    }

    /// Head values from features alone (the final affine layer).
    pub fn heads_from_features(&self, phi: &Array2<f64>) -> Array2<f64> {
        let head = self.net.layers.last().unwrap();
        phi.dot(&head.weight) + &head.bias
    }

    pub fn head_block(values: &Array2<f64>, head: usize, n_actions: usize) -> Array2<f64> {
        values.slice(s![.., head * n_actions..(head + 1) * n_actions]).to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randomize_biases(net: &mut Mlp, r: &mut ChaCha8Rng) {
        for l in &mut net.layers {
            l.bias.mapv_inplace(|_| r.random_range(-0.5..0.5));
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp {
            layers: vec![Dense::zeros(3, 4, Activation::Tanh), Dense::zeros(4, 2, Activation::Identity)],
        };
        let y = net.forward(array![[1.0, -2.0, 3.0]].view()).unwrap();
        assert_eq!(y, Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn identity_layer_passes_input() {
        let net = Mlp {
            layers: vec![Dense {
                weight: Array2::<f64>::eye(3),
                bias: Array1::zeros(3),
                activation: Activation::Identity,
            }],
        };
        let x = array![[0.5, -1.0, 2.0], [0.0, 0.0, 1.0]];
        assert_eq!(net.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn heads_are_affine_in_features() {
        let mut r = rng(1);
        let enc = Encoder::new(&EncoderConfig::default(), 5, 3, 4, &mut r).unwrap();
        let x = Array2::from_shape_fn((7, 5), |_| r.random_range(-1.0..1.0));
        let phi = enc.features(x.view()).unwrap();
        let head = enc.net.layers.last().unwrap();
        let mut manual = Array2::<f64>::zeros((7, 12));
        for i in 0..7 {
            for o in 0..12 {
                let mut acc = head.bias[o];
                for k in 0..phi.ncols() {
                    acc += phi[[i, k]] * head.weight[[k, o]];
                }
                manual[[i, o]] = acc;
            }
        }
        let heads = enc.head_values(x.view()).unwrap();
        assert!(linalg::max_abs(&(heads - &manual)) < 1e-12);
        assert_eq!(enc.heads_from_features(&phi), enc.head_values(x.view()).unwrap());
    }

    #[test]
    fn linear_encoder_features_are_observations() {
        let enc = Encoder::new(&EncoderConfig::linear(), 6, 2, 4, &mut rng(0)).unwrap();
        assert_eq!(enc.feature_dim(), 6);
        let x = Array2::<f64>::eye(6);
        assert_eq!(enc.features(x.view()).unwrap(), x);
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let mut r = rng(2);
        let net = Mlp::new(&[4, 5, 3], &[Activation::Tanh, Activation::Identity], Init::HeUniform, &mut r).unwrap();
        let x = Array2::from_shape_fn((3, 4), |_| r.random_range(-1.0..1.0));
        let cache = net.forward_cached(x.view()).unwrap();
        let g = net.backward(&cache, &Array2::zeros((3, 3))).unwrap();
        assert_eq!(g, Gradients::zeros_like(&net));
    }

    #[test]
    fn one_layer_quadratic_matches_closed_form() {
        // loss = 0.5 * ||x W + b - y||^2, dW = x^T (xW + b - y), db = sum rows
        let mut r = rng(3);
        let net = Mlp::new(&[3, 2], &[Activation::Identity], Init::HeUniform, &mut r).unwrap();
        let x = Array2::from_shape_fn((4, 3), |_| r.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((4, 2), |_| r.random_range(-1.0..1.0));
        let cache = net.forward_cached(x.view()).unwrap();
        let resid = cache.output() - &y;
        let g = net.backward(&cache, &resid).unwrap();
        let dw = x.t().dot(&resid);
        let db = resid.sum_axis(ndarray::Axis(0));
        assert!(linalg::max_abs(&(&g.layers[0].0 - &dw)) < 1e-10);
        assert!((&g.layers[0].1 - &db).iter().all(|v| v.abs() < 1e-10));
    }

    fn finite_difference_check(net: &Mlp, x: &Array2<f64>, seed: u64) {
        // loss = sum(c * output) for a fixed random c
        let mut r = rng(seed);
        let out_dim = net.output_dim();
        let c = Array2::from_shape_fn((x.nrows(), out_dim), |_| r.random_range(-1.0..1.0));
        let loss = |n: &Mlp| (n.forward(x.view()).unwrap() * &c).sum();
        let cache = net.forward_cached(x.view()).unwrap();
        let g = net.backward(&cache, &c).unwrap();
        let analytic: Vec<f64> = g.layers.iter().flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>()).collect();
        let flat = net.flatten();
        let h = 1e-5;
        let mut checked = 0;
        for _ in 0..150 {
            let i = r.random_range(0..flat.len());
            let mut plus = net.clone();
            let mut minus = net.clone();
            let mut fp = flat.clone();
            fp[i] += h;
            plus.assign_flat(&fp).unwrap();
            fp[i] -= 2.0 * h;
            minus.assign_flat(&fp).unwrap();
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                (numeric - analytic[i]).abs() / denom <= 1e-4,
                "coordinate {i}: numeric {numeric}, analytic {}",
                analytic[i]
            );
            checked += 1;
        }
        assert!(checked >= 100);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut r = rng(4);
        for (acts, sizes) in [
            (vec![Activation::Tanh, Activation::Identity], vec![5, 8, 3]),
            (vec![Activation::Relu, Activation::Relu, Activation::Identity], vec![4, 9, 6, 5]),
            (vec![Activation::Tanh, Activation::Tanh, Activation::Tanh], vec![3, 7, 7, 2]),
        ] {
            let mut net = Mlp::new(&sizes, &acts, Init::HeUniform, &mut r).unwrap();
            randomize_biases(&mut net, &mut r);
            let x = Array2::from_shape_fn((6, sizes[0]), |_| r.random_range(-1.0..1.0));
            finite_difference_check(&net, &x, 11);
        }
    }

    #[test]
    fn sparse_path_matches_dense() {
        let mut r = rng(5);
        let mut net = Mlp::new(&[40, 6, 3], &[Activation::Relu, Activation::Identity], Init::HeUniform, &mut r).unwrap();
        randomize_biases(&mut net, &mut r);
        let mut x = Array2::<f64>::zeros((5, 40));
        for i in 0..5 {
            x[[i, (7 * i) % 40]] = 1.0;
        }
        let cache = net.forward_cached(x.view()).unwrap();
        let dense_out = x.dot(&net.layers[0].weight) + &net.layers[0].bias;
        let dense_out = dense_out.mapv(|v| v.max(0.0));
        assert!(linalg::max_abs(&(&cache.outputs[0] - &dense_out)) < 1e-14);
        finite_difference_check(&net, &x, 6);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut r = rng(6);
        let mut net = Mlp::new(&[3, 2], &[Activation::Identity], Init::HeUniform, &mut r).unwrap();
        let before = net.clone();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let zero = Gradients::zeros_like(&net);
        adam.step(&mut net, &zero).unwrap();
        assert_eq!(net, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut net = Mlp {
            layers: vec![Dense::zeros(1, 1, Activation::Identity)],
        };
        let cfg = AdamConfig::default();
        let mut adam = AdamState::new(&net, cfg);
        let g = 0.3;
        let grads = Gradients {
            layers: vec![(array![[g]], array![g])],
        };
        adam.step(&mut net, &grads).unwrap();
        // m_hat = g, v_hat = g^2
        let expected = -cfg.lr * g / (g.abs() + cfg.eps);
        assert!((net.layers[0].weight[[0, 0]] - expected).abs() < 1e-18);
        assert!((net.layers[0].bias[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut net = Mlp::new(&[2, 2, 1], &[Activation::Relu, Activation::Identity], Init::HeUniform, &mut rng(0)).unwrap();
        let before = net.clone();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let mut g = Gradients::zeros_like(&net);
        g.layers[1].1[0] = f64::NAN;
        assert!(matches!(adam.step(&mut net, &g), Err(Error::NonFiniteGradient { layer: 1 })));
        assert_eq!(net, before);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn adam_minimises_convex_quadratic() {
        // fit y = x W* by least squares
        let mut r = rng(7);
        let mut net = Mlp::new(&[3, 2], &[Activation::Identity], Init::HeUniform, &mut r).unwrap();
        let x = Array2::from_shape_fn((16, 3), |_| r.random_range(-1.0..1.0));
        let w_star = Array2::from_shape_fn((3, 2), |_| r.random_range(-1.0..1.0));
        let y = x.dot(&w_star) + 0.25;
        let mut adam = AdamState::new(
            &net,
            AdamConfig {
                lr: 0.02,
                eps: 1e-8,
                ..AdamConfig::default()
            },
        );
        let mut losses = Vec::new();
        for _ in 0..1000 {
            let cache = net.forward_cached(x.view()).unwrap();
            let resid = (cache.output() - &y) / 16.0;
            losses.push(0.5 * 16.0 * resid.iter().map(|v| v * v).sum::<f64>());
            let g = net.backward(&cache, &resid).unwrap();
            adam.step(&mut net, &g).unwrap();
        }
        assert!(losses[10] < losses[0]);
        assert!(*losses.last().unwrap() <= 1e-6, "final loss {}", losses.last().unwrap());
    }

    #[test]
    fn polyak_extremes_and_decay() {
        let mut r = rng(8);
        let online = Mlp::new(&[3, 4, 2], &[Activation::Tanh, Activation::Identity], Init::HeUniform, &mut r).unwrap();
        let start = Mlp::new(&[3, 4, 2], &[Activation::Tanh, Activation::Identity], Init::HeUniform, &mut r).unwrap();

        let mut t = start.clone();
        t.polyak_update(&online, 1.0).unwrap();
        assert_eq!(t, start);
        t.polyak_update(&online, 0.0).unwrap();
        assert_eq!(t, online);

        let gap = |a: &Mlp| {
            a.flatten()
                .iter()
                .zip(online.flatten())
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        };
        let mut t = start.clone();
        let initial = gap(&t);
        let mut prev = initial;
        for _ in 0..500 {
            t.polyak_update(&online, 0.99).unwrap();
            let g = gap(&t);
            assert!(g <= prev);
            prev = g;
        }
        assert!(prev <= 0.99f64.powi(500) * initial * (1.0 + 1e-9));
        assert!(t.polyak_update(&online, 1.5).is_err());
    }

    #[test]
    fn orthogonal_init_is_orthonormal() {
        let mut r = rng(9);
        let w = orthogonal(64, 8, 1.0, &mut r);
        assert!(linalg::max_abs(&(w.t().dot(&w) - Array2::<f64>::eye(8))) < 1e-10);
        let w = orthogonal(3, 64, 1.0, &mut r);
        assert!(linalg::max_abs(&(w.dot(&w.t()) - Array2::<f64>::eye(3))) < 1e-10);
    }

    #[test]
    fn checksum_and_flat_round_trip() {
        let mut r = rng(10);
        let net = Mlp::new(&[3, 4, 2], &[Activation::Tanh, Activation::Identity], Init::Orthogonal, &mut r).unwrap();
        let mut copy = net.clone();
        copy.assign_flat(&net.flatten()).unwrap();
        assert_eq!(copy.checksum(), net.checksum());
        let mut flat = net.flatten();
        flat[0] += 1e-12;
        copy.assign_flat(&flat).unwrap();
        assert_ne!(copy.checksum(), net.checksum());
    }

    #[test]
    fn lipschitz_bound_holds() {
        let mut r = rng(11);
        let net = Mlp::new(&[4, 16, 16, 1], &[Activation::Tanh, Activation::Tanh, Activation::Identity], Init::Orthogonal, &mut r).unwrap();
        let bound = net.lipschitz_bound().unwrap();
        for _ in 0..200 {
            let a = Array2::from_shape_fn((1, 4), |_| r.random_range(0.0..1.0));
            let b = Array2::from_shape_fn((1, 4), |_| r.random_range(0.0..1.0));
            let fa = net.forward(a.view()).unwrap()[[0, 0]];
            let fb = net.forward(b.view()).unwrap()[[0, 0]];
            let dist = (&a - &b).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((fa - fb).abs() <= bound * dist + 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Mlp::new(&[3, 2], &[Activation::Identity], Init::HeUniform, &mut rng(0)).unwrap();
        assert!(matches!(net.forward(Array2::<f64>::zeros((1, 4)).view()), Err(Error::Shape(_))));
    }
}
