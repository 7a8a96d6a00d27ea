//! From-scratch multilayer perceptron with ELU hidden units, a diagonal
//! Gaussian policy head, a scalar value head, exact backpropagation, and
//! flattened-parameter access for natural-gradient algebra.
//!
//! Parameters live in a single flat [`ParamVector`] so that gradient, Fisher,
//! and update arithmetic are plain vector operations. The layout is layer
//! after layer: row-major weights `(out × in)`, then biases. Hidden layers
//! apply ELU; the output layer is linear. The policy's output splits into a
//! mean and a clamped log-standard-deviation per action dimension; the value
//! network maps a state/action encoding to one scalar.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Layer widths `[input, hidden..., output]` of a fully-connected net.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetShape {
    sizes: Vec<usize>,
}

impl NetShape {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config(format!(
                "a network needs at least input and output widths, got {:?}",
                sizes
            )));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("zero-width layer in {:?}", sizes)));
        }
        Ok(NetShape { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Number of affine layers.
    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        (0..self.num_layers())
            .map(|l| (self.sizes[l] + 1) * self.sizes[l + 1])
            .sum()
    }

    /// Offset of layer `l`'s weight block in the flat parameter vector.
    fn weight_offset(&self, l: usize) -> usize {
        (0..l)
            .map(|j| (self.sizes[j] + 1) * self.sizes[j + 1])
            .sum()
    }

    /// Offset of layer `l`'s bias block.
    fn bias_offset(&self, l: usize) -> usize {
        self.weight_offset(l) + self.sizes[l] * self.sizes[l + 1]
    }
}

/// Weights and biases of one layer in matrix form, used for structured access
/// and the flatten/unflatten round trip.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `weights[o][i]` maps input `i` to output `o`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

/// Flat parameter vector of one network, together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    shape: NetShape,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(shape: NetShape) -> Self {
        let n = shape.param_count();
        ParamVector {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(shape: NetShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.param_count() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} parameters, got {}",
                shape.sizes(),
                shape.param_count(),
                values.len()
            )));
        }
        Ok(ParamVector { shape, values })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Returns `self + c·other`.
    pub fn add_scaled(&self, other: &ParamVector, c: f64) -> ParamVector {
        debug_assert_eq!(self.len(), other.len());
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + c * b)
            .collect();
        ParamVector {
            shape: self.shape.clone(),
            values,
        }
    }

    /// Unflattens into per-layer weight matrices and bias vectors.
    pub fn to_layers(&self) -> Vec<LayerParams> {
        let s = &self.shape;
        (0..s.num_layers())
            .map(|l| {
                let (n_in, n_out) = (s.sizes[l], s.sizes[l + 1]);
                let w0 = s.weight_offset(l);
                let weights = (0..n_out)
                    .map(|o| self.values[w0 + o * n_in..w0 + (o + 1) * n_in].to_vec())
                    .collect();
                let b0 = s.bias_offset(l);
                let biases = self.values[b0..b0 + n_out].to_vec();
                LayerParams { weights, biases }
            })
            .collect()
    }

    /// Flattens per-layer matrices back into a vector; inverse of
    /// [`ParamVector::to_layers`].
    pub fn from_layers(shape: NetShape, layers: &[LayerParams]) -> Result<Self> {
        if layers.len() != shape.num_layers() {
            return Err(Error::Shape(format!(
                "shape {:?} has {} layers, got {}",
                shape.sizes(),
                shape.num_layers(),
                layers.len()
            )));
        }
        let mut values = Vec::with_capacity(shape.param_count());
        for (l, layer) in layers.iter().enumerate() {
            let (n_in, n_out) = (shape.sizes[l], shape.sizes[l + 1]);
            if layer.weights.len() != n_out
                || layer.weights.iter().any(|r| r.len() != n_in)
                || layer.biases.len() != n_out
            {
                return Err(Error::Shape(format!(
                    "layer {l} does not match shape {:?}",
                    shape.sizes()
                )));
            }
            for row in &layer.weights {
                values.extend_from_slice(row);
            }
            values.extend_from_slice(&layer.biases);
        }
        Self::from_values(shape, values)
    }
}

/// Exponential linear unit: `z` for positive `z`, else `exp(z) − 1`.
pub fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp() - 1.0
    }
}

/// Derivative of [`elu`] from its pre-activation.
fn elu_deriv(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

/// Draws weights from `N(0, 1/fan_in)` with zero biases.
pub fn init_network(shape: &NetShape, rng: &mut impl Rng) -> ParamVector {
    let mut p = ParamVector::zeros(shape.clone());
    for l in 0..shape.num_layers() {
        let (n_in, n_out) = (shape.sizes[l], shape.sizes[l + 1]);
        let std = 1.0 / (n_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let w0 = shape.weight_offset(l);
        for i in 0..n_in * n_out {
            p.values[w0 + i] = dist.sample(rng);
        }
    }
    p
}

/// Cached activations of one forward pass, consumed by [`backward`].
pub(crate) struct ForwardTrace {
    /// `act[0]` is the input; `act[l+1]` the post-activation output of layer `l`.
    act: Vec<Vec<f64>>,
    /// `pre[l]` is the pre-activation of layer `l`.
    pre: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.act.last().unwrap()
    }
}

fn affine_into(shape: &NetShape, params: &[f64], l: usize, input: &[f64], out: &mut Vec<f64>) {
    let (n_in, n_out) = (shape.sizes[l], shape.sizes[l + 1]);
    let w0 = shape.weight_offset(l);
    let b0 = shape.bias_offset(l);
    out.clear();
    out.reserve(n_out);
    for o in 0..n_out {
        let row = &params[w0 + o * n_in..w0 + (o + 1) * n_in];
        let mut acc = params[b0 + o];
        for (w, x) in row.iter().zip(input) {
            acc += w * x;
        }
        out.push(acc);
    }
}

/// Forward pass keeping per-layer activations for backpropagation.
pub(crate) fn forward_trace(shape: &NetShape, params: &[f64], input: &[f64]) -> ForwardTrace {
    debug_assert_eq!(input.len(), shape.input_dim());
    let num_layers = shape.num_layers();
    let mut act = Vec::with_capacity(num_layers + 1);
    let mut pre = Vec::with_capacity(num_layers);
    act.push(input.to_vec());
    for l in 0..num_layers {
        let mut z = Vec::new();
        affine_into(shape, params, l, act.last().unwrap(), &mut z);
        let a = if l < num_layers - 1 {
            z.iter().copied().map(elu).collect()
        } else {
            z.clone()
        };
        pre.push(z);
        act.push(a);
    }
    ForwardTrace { act, pre }
}

/// Forward pass returning only the output vector (no trace allocation beyond
/// two ping-pong buffers) — the per-decision hot path.
pub(crate) fn forward_out(shape: &NetShape, params: &[f64], input: &[f64]) -> Vec<f64> {
    debug_assert_eq!(input.len(), shape.input_dim());
    let num_layers = shape.num_layers();
    let mut cur = input.to_vec();
    let mut next = Vec::new();
    for l in 0..num_layers {
        affine_into(shape, params, l, &cur, &mut next);
        if l < num_layers - 1 {
            for v in &mut next {
                *v = elu(*v);
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Backpropagates `dout` (gradient of a scalar objective with respect to the
/// network output) through the traced pass, accumulating parameter gradients
/// into `grad` (which the caller zeroes when accumulation is not wanted).
pub(crate) fn backward(
    shape: &NetShape,
    params: &[f64],
    trace: &ForwardTrace,
    dout: &[f64],
    grad: &mut [f64],
) {
    debug_assert_eq!(dout.len(), shape.output_dim());
    debug_assert_eq!(grad.len(), shape.param_count());
    let num_layers = shape.num_layers();
    let mut delta = dout.to_vec();
    for l in (0..num_layers).rev() {
        let (n_in, n_out) = (shape.sizes[l], shape.sizes[l + 1]);
        let w0 = shape.weight_offset(l);
        let b0 = shape.bias_offset(l);
        let input = &trace.act[l];
        for o in 0..n_out {
            let d = delta[o];
            grad[b0 + o] += d;
            let row = &mut grad[w0 + o * n_in..w0 + (o + 1) * n_in];
            for (g, x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
        }
        if l > 0 {
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                let row = &params[w0 + o * n_in..w0 + (o + 1) * n_in];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            // Through the previous layer's ELU.
            for (p, z) in prev.iter_mut().zip(&trace.pre[l - 1]) {
                *p *= elu_deriv(*z);
            }
            delta = prev;
        }
    }
}

/// Mean and log-standard deviation of a diagonal Gaussian over actions, in
/// watts / log-watts. `log_std` is already clamped to the policy's range.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianHead {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log-density of a pre-clamp sample under this head.
    pub fn log_prob(&self, raw: &[f64]) -> f64 {
        debug_assert_eq!(raw.len(), self.dim());
        let mut lp = 0.0;
        for j in 0..self.dim() {
            let sigma = self.log_std[j].exp();
            let zsc = (raw[j] - self.mean[j]) / sigma;
            lp += -self.log_std[j] - 0.5 * LN_2PI - 0.5 * zsc * zsc;
        }
        lp
    }
}

/// One sampled action: the feasible power vector handed to the environment,
/// the pre-clamp Gaussian draw the density refers to, and its log-density.
#[derive(Debug, Clone)]
pub struct SampledAction {
    pub power: Vec<f64>,
    pub raw: Vec<f64>,
    pub log_prob: f64,
}

/// Draws `a_j ~ N(μ_j, σ_j²)`, clamps to `[0, Pmax]` for the environment, and
/// reports the log-density of the pre-clamp draw (the clamp is treated as an
/// environment projection, not part of the distribution).
pub fn sample_action(head: &GaussianHead, rng: &mut impl Rng, pmax_watts: f64) -> SampledAction {
    let mut raw = Vec::with_capacity(head.dim());
    for j in 0..head.dim() {
        let n: f64 = rng.sample(StandardNormal);
        raw.push(head.mean[j] + head.log_std[j].exp() * n);
    }
    let power = raw.iter().map(|&a| a.clamp(0.0, pmax_watts)).collect();
    let log_prob = head.log_prob(&raw);
    SampledAction {
        power,
        raw,
        log_prob,
    }
}

/// `D_KL(π_new ‖ π_old)` between diagonal Gaussians:
/// `Σ_j [ log(σ_old/σ_new) + (σ_new² + (μ_new−μ_old)²)/(2σ_old²) − ½ ]`.
pub fn kl_diag_gaussian(head_new: &GaussianHead, head_old: &GaussianHead) -> f64 {
    debug_assert_eq!(head_new.dim(), head_old.dim());
    let mut kl = 0.0;
    for j in 0..head_new.dim() {
        let (ln_sn, ln_so) = (head_new.log_std[j], head_old.log_std[j]);
        let (sn, so) = (ln_sn.exp(), ln_so.exp());
        let dmu = head_new.mean[j] - head_old.mean[j];
        kl += ln_so - ln_sn + (sn * sn + dmu * dmu) / (2.0 * so * so) - 0.5;
    }
    kl
}

/// Policy network descriptor: a fully-connected net whose output splits into
/// `action_dim` means and `action_dim` clamped log-standard deviations.
#[derive(Debug, Clone)]
pub struct PolicyNetwork {
    shape: NetShape,
    action_dim: usize,
    log_std_min: f64,
    log_std_max: f64,
    pmax_watts: f64,
}

impl PolicyNetwork {
    /// Builds the descriptor for a `state_dim → hidden… → 2·action_dim` net.
    /// The log-std clamp range is `[log(10⁻³·Pmax), log(Pmax)]`.
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        pmax_watts: f64,
    ) -> Result<Self> {
        if action_dim == 0 {
            return Err(Error::Config("action dimension must be positive".into()));
        }
        if !(pmax_watts > 0.0) {
            return Err(Error::Config(format!(
                "Pmax must be positive, got {pmax_watts}"
            )));
        }
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * action_dim);
        Ok(PolicyNetwork {
            shape: NetShape::new(sizes)?,
            action_dim,
            log_std_min: (1e-3 * pmax_watts).ln(),
            log_std_max: pmax_watts.ln(),
            pmax_watts,
        })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.shape.input_dim()
    }

    pub fn log_std_min(&self) -> f64 {
        self.log_std_min
    }

    pub fn log_std_max(&self) -> f64 {
        self.log_std_max
    }

    pub fn pmax_watts(&self) -> f64 {
        self.pmax_watts
    }

    /// Initializes parameters: fan-in-scaled weights and zero biases, except
    /// that the log-std output rows are zeroed with bias `log(0.25·Pmax)`, so
    /// the initial σ is exactly `0.25·Pmax` at every state.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamVector {
        let mut p = init_network(&self.shape, rng);
        let l = self.shape.num_layers() - 1;
        let (n_in, _) = (self.shape.sizes[l], self.shape.sizes[l + 1]);
        let w0 = self.shape.weight_offset(l);
        let b0 = self.shape.bias_offset(l);
        let bias0 = (0.25 * self.pmax_watts).ln();
        for j in self.action_dim..2 * self.action_dim {
            for v in &mut p.values_mut()[w0 + j * n_in..w0 + (j + 1) * n_in] {
                *v = 0.0;
            }
            p.values_mut()[b0 + j] = bias0;
        }
        p
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.shape.input_dim() {
            return Err(Error::Shape(format!(
                "policy expects state length {}, got {}",
                self.shape.input_dim(),
                state.len()
            )));
        }
        Ok(())
    }

    /// Deterministic forward pass producing the action distribution.
    pub fn forward_policy(&self, theta: &ParamVector, state: &[f64]) -> Result<GaussianHead> {
        self.check_state(state)?;
        let out = forward_out(&self.shape, theta.values(), state);
        Ok(self.split_head(&out))
    }

    fn split_head(&self, out: &[f64]) -> GaussianHead {
        let mean = out[..self.action_dim].to_vec();
        let log_std = out[self.action_dim..]
            .iter()
            .map(|&v| v.clamp(self.log_std_min, self.log_std_max))
            .collect();
        GaussianHead { mean, log_std }
    }

    /// Log-density of the pre-clamp `action` under `forward_policy(θ, state)`
    /// and its exact parameter gradient via backpropagation. Gradients do not
    /// flow through saturated log-std clamps.
    pub fn log_prob_and_grad(
        &self,
        theta: &ParamVector,
        state: &[f64],
        action: &[f64],
    ) -> Result<(f64, ParamVector)> {
        let mut grad = ParamVector::zeros(self.shape.clone());
        let logp = self.log_prob_grad_into(theta, state, action, grad.values_mut())?;
        Ok((logp, grad))
    }

    /// As [`PolicyNetwork::log_prob_and_grad`] but accumulating into a caller
    /// buffer of length `param_count`.
    pub fn log_prob_grad_into(
        &self,
        theta: &ParamVector,
        state: &[f64],
        action: &[f64],
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_state(state)?;
        if action.len() != self.action_dim {
            return Err(Error::Shape(format!(
                "policy expects action length {}, got {}",
                self.action_dim,
                action.len()
            )));
        }
        let trace = forward_trace(&self.shape, theta.values(), state);
        let out = trace.output();
        let mut dout = vec![0.0; self.shape.output_dim()];
        let mut logp = 0.0;
        for j in 0..self.action_dim {
            let mu = out[j];
            let raw_ls = out[self.action_dim + j];
            let ls = raw_ls.clamp(self.log_std_min, self.log_std_max);
            let sigma = ls.exp();
            let zsc = (action[j] - mu) / sigma;
            logp += -ls - 0.5 * LN_2PI - 0.5 * zsc * zsc;
            dout[j] = zsc / sigma;
            // d logp / d logσ = z² − 1, zero where the clamp saturates.
            dout[self.action_dim + j] = if raw_ls < self.log_std_min || raw_ls > self.log_std_max {
                0.0
            } else {
                zsc * zsc - 1.0
            };
        }
        backward(&self.shape, theta.values(), &trace, &dout, grad);
        Ok(logp)
    }
}

/// Value network descriptor: a fully-connected net from a state/action
/// encoding to one scalar estimate of discounted return.
#[derive(Debug, Clone)]
pub struct ValueNetwork {
    shape: NetShape,
}

impl ValueNetwork {
    pub fn new(input_dim: usize, hidden: &[usize]) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(ValueNetwork {
            shape: NetShape::new(sizes)?,
        })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn input_dim(&self) -> usize {
        self.shape.input_dim()
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> ParamVector {
        init_network(&self.shape, rng)
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.shape.input_dim() {
            return Err(Error::Shape(format!(
                "value network expects input length {}, got {}",
                self.shape.input_dim(),
                len
            )));
        }
        Ok(())
    }

    /// Scalar value of the concatenated `(state, action)` input.
    pub fn forward_value(&self, phi: &ParamVector, state: &[f64], action: &[f64]) -> Result<f64> {
        self.check_input(state.len() + action.len())?;
        let mut input = Vec::with_capacity(state.len() + action.len());
        input.extend_from_slice(state);
        input.extend_from_slice(action);
        Ok(forward_out(&self.shape, phi.values(), &input)[0])
    }

    /// Value of a pre-concatenated input.
    pub fn forward_concat(&self, phi: &ParamVector, input: &[f64]) -> Result<f64> {
        self.check_input(input.len())?;
        Ok(forward_out(&self.shape, phi.values(), input)[0])
    }

    /// Computes the value of `input` and accumulates `dout · ∂value/∂φ` into
    /// `grad`; the workhorse of quadratic-loss critic fitting.
    pub fn value_grad_into(
        &self,
        phi: &ParamVector,
        input: &[f64],
        dout: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_input(input.len())?;
        let trace = forward_trace(&self.shape, phi.values(), input);
        let v = trace.output()[0];
        backward(&self.shape, phi.values(), &trace, &[dout], grad);
        Ok(v)
    }

    /// Accumulates `weight · ∂(v − target)²/∂φ` into `grad` and returns the
    /// squared error `(v − target)²` for this input.
    pub fn squared_error_grad_into(
        &self,
        phi: &ParamVector,
        input: &[f64],
        target: f64,
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_input(input.len())?;
        let trace = forward_trace(&self.shape, phi.values(), input);
        let err = trace.output()[0] - target;
        backward(
            &self.shape,
            phi.values(),
            &trace,
            &[weight * 2.0 * err],
            grad,
        );
        Ok(err * err)
    }
}
