//! Finite-width network evaluation: forward passes, exact reverse-mode
//! Jacobians, loss gradients, and input-output Jacobian diagnostics.
//!
//! Layer equations, per parameterization (weights `W`, biases `b` as stored
//! in a [`ParamSet`]):
//!
//! * NTK: `h^l = (sigma_w / sqrt(fan_l)) W^l x^{l-1} + sigma_b b^l`, where
//!   `fan_l` is `n_{l-1}` for dense layers, `(2k+1) n_{l-1}` for
//!   convolutional ones, and `n_{L-1}` (channels only) for the dense readout
//!   of a convolutional network.
//! * Standard: `h^1 = W^1 x + b^1` and `h^l = (1/sqrt(s)) W^l x^{l-1} + b^l`
//!   for `l >= 2`, `s` the width-expansion factor; the scale lives in the
//!   sampled weights.
//!
//! Convolutions are 1D with circular (periodic) boundary; the readout of a
//! convolutional network is fully connected over the flattened
//! (channel, site) axis, site-minor. Outputs are the readout
//! pre-activations: `f = h^L`, no output nonlinearity.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::config::{NetworkConfig, Parameterization};
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg;
use crate::sampler::{LayerParams, ParamSet};

/// Default ceiling for materialized Jacobians (bytes).
pub const DEFAULT_JACOBIAN_LIMIT_BYTES: usize = 2 << 30;

/// A batch of network inputs. `Flat` rows are single inputs of a
/// fully-connected network; `Spatial` entries are `(channels, sites)` inputs
/// of a convolutional one.
#[derive(Debug, Clone, PartialEq)]
pub enum InputBatch {
    Flat(Array2<f64>),
    Spatial(Array3<f64>),
}

impl InputBatch {
    pub fn num_inputs(&self) -> usize {
        match self {
            InputBatch::Flat(x) => x.nrows(),
            InputBatch::Spatial(x) => x.dim().0,
        }
    }

    pub fn flat(&self) -> Option<&Array2<f64>> {
        match self {
            InputBatch::Flat(x) => Some(x),
            InputBatch::Spatial(_) => None,
        }
    }

    pub fn spatial(&self) -> Option<&Array3<f64>> {
        match self {
            InputBatch::Spatial(x) => Some(x),
            InputBatch::Flat(_) => None,
        }
    }

    /// Subset of the batch by row indices.
    pub fn select(&self, idx: &[usize]) -> InputBatch {
        match self {
            InputBatch::Flat(x) => InputBatch::Flat(x.select(Axis(0), idx)),
            InputBatch::Spatial(x) => InputBatch::Spatial(x.select(Axis(0), idx)),
        }
    }

    fn check(&self, config: &NetworkConfig) -> Result<()> {
        match self {
            InputBatch::Flat(x) => {
                if config.arch.is_conv() {
                    return Err(Error::shape(
                        "convolutional network needs spatial inputs (channels, sites)",
                    ));
                }
                if x.ncols() != config.input_dim() {
                    return Err(Error::shape(format!(
                        "input dimension {} does not match config n_0 = {}",
                        x.ncols(),
                        config.input_dim()
                    )));
                }
            }
            InputBatch::Spatial(x) => {
                if !config.arch.is_conv() {
                    return Err(Error::shape(
                        "fully-connected network needs flat inputs",
                    ));
                }
                let (_, c, m) = x.dim();
                if c != config.input_dim() || m != config.spatial_size() {
                    return Err(Error::shape(format!(
                        "input shape ({c}, {m}) does not match config ({}, {})",
                        config.input_dim(),
                        config.spatial_size()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Pre- and post-activations of one layer over a batch; convolutional layers
/// keep the site axis.
#[derive(Debug, Clone)]
pub enum LayerState {
    Dense {
        /// `(batch, n_l)` pre-activations.
        h: Array2<f64>,
        /// `phi(h)`, elementwise.
        x: Array2<f64>,
    },
    Conv {
        /// `(batch, n_l, m)` pre-activations.
        h: Array3<f64>,
        x: Array3<f64>,
    },
}

/// A full forward evaluation over a batch: per-layer states for layers
/// `1..=L` plus the output `f = h^L` (no activation on the readout).
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layers: Vec<LayerState>,
    /// `(batch, n_L)` network outputs.
    pub output: Array2<f64>,
}

/// Scalar applied to the stored weight matrix at `layer` in the forward
/// pass; see the module docs for the conventions.
pub fn weight_premultiplier(config: &NetworkConfig, layer: usize) -> f64 {
    match config.param {
        Parameterization::Ntk => {
            let fan = if config.is_conv_layer(layer) {
                config.filter_len() * config.widths[layer - 1]
            } else {
                // The readout of a convolutional network divides by channels
                // only; its site sum is untraced.
                config.widths[layer - 1]
            };
            config.sigma_w_sq.sqrt() / (fan as f64).sqrt()
        }
        Parameterization::Standard { expansion } => {
            if layer == 1 {
                1.0
            } else {
                1.0 / (expansion as f64).sqrt()
            }
        }
    }
}

/// Scalar applied to stored biases in the forward pass.
pub fn bias_premultiplier(config: &NetworkConfig) -> f64 {
    match config.param {
        Parameterization::Ntk => config.sigma_b_sq.sqrt(),
        Parameterization::Standard { .. } => 1.0,
    }
}

/// Single-datum layer states; `x` is `phi(h)`.
enum DatumState {
    Dense { h: Array1<f64>, x: Array1<f64> },
    Conv { h: Array2<f64>, x: Array2<f64> },
}

/// Columns rolled circularly: `out[j, c] = a[j, (c - shift) mod m]`.
fn roll_cols(a: &ArrayView2<f64>, shift: isize) -> Array2<f64> {
    let (rows, m) = a.dim();
    let mut out = Array2::zeros((rows, m));
    for c in 0..m {
        let src = (c as isize - shift).rem_euclid(m as isize) as usize;
        out.slice_mut(s![.., c]).assign(&a.slice(s![.., src]));
    }
    out
}

fn forward_datum(params: &ParamSet, input: DatumInput<'_>) -> Vec<DatumState> {
    let config = &params.config;
    let depth = config.depth();
    let act = config.activation;
    let bias_mul = bias_premultiplier(config);
    let mut states: Vec<DatumState> = Vec::with_capacity(depth);

    for layer in 1..=depth {
        let a = weight_premultiplier(config, layer);
        let state = match &params.layers[layer - 1] {
            LayerParams::Dense { w, b } => {
                let prev: Array1<f64> = if layer == 1 {
                    match input {
                        DatumInput::Flat(v) => v.to_owned(),
                        DatumInput::Spatial(_) => unreachable!("validated: dense layer 1"),
                    }
                } else {
                    match &states[layer - 2] {
                        DatumState::Dense { x, .. } => x.clone(),
                        // Readout of a convolutional net: flatten
                        // channel-major, site-minor (row-major layout).
                        DatumState::Conv { x, .. } => Array1::from_iter(x.iter().copied()),
                    }
                };
                let h = w.dot(&prev) * a + &(b * bias_mul);
                let x = h.mapv(|v| act.phi(v));
                DatumState::Dense { h, x }
            }
            LayerParams::Conv { slices, b } => {
                let prev: Array2<f64> = if layer == 1 {
                    match input {
                        DatumInput::Spatial(v) => v.to_owned(),
                        DatumInput::Flat(_) => unreachable!("validated: conv layer 1"),
                    }
                } else {
                    match &states[layer - 2] {
                        DatumState::Conv { x, .. } => x.clone(),
                        DatumState::Dense { .. } => unreachable!("conv follows conv"),
                    }
                };
                let m = prev.ncols();
                let n_out = slices[0].nrows();
                let half = (slices.len() / 2) as isize;
                let mut h = Array2::<f64>::zeros((n_out, m));
                for (t, w) in slices.iter().enumerate() {
                    // Tap offset beta = t - k reads x[., alpha + beta]:
                    // shifted[., alpha] = x[., alpha + beta] = roll_cols(x, -beta).
                    let beta = t as isize - half;
                    h = h + w.dot(&roll_cols(&prev.view(), -beta));
                }
                h *= a;
                for (mut row, &bv) in h.outer_iter_mut().zip(b.iter()) {
                    row += bias_mul * bv;
                }
                let x = h.mapv(|v| act.phi(v));
                DatumState::Conv { h, x }
            }
        };
        states.push(state);
    }
    states
}

#[derive(Clone, Copy)]
enum DatumInput<'a> {
    Flat(ArrayView1<'a, f64>),
    Spatial(ArrayView2<'a, f64>),
}

fn datum_input<'a>(batch: &'a InputBatch, d: usize) -> DatumInput<'a> {
    match batch {
        InputBatch::Flat(x) => DatumInput::Flat(x.row(d)),
        InputBatch::Spatial(x) => DatumInput::Spatial(x.index_axis(Axis(0), d)),
    }
}

/// Evaluates the network on every input in the batch.
pub fn forward(params: &ParamSet, inputs: &InputBatch) -> Result<ForwardTrace> {
    let config = &params.config;
    config.validate()?;
    inputs.check(config)?;
    let d = inputs.num_inputs();
    let depth = config.depth();

    let per_datum = exec::map_indexed(d, |i| forward_datum(params, datum_input(inputs, i)));

    let m = config.spatial_size();
    let mut layers: Vec<LayerState> = (1..=depth)
        .map(|layer| {
            if config.is_conv_layer(layer) {
                LayerState::Conv {
                    h: Array3::zeros((d, config.widths[layer], m)),
                    x: Array3::zeros((d, config.widths[layer], m)),
                }
            } else {
                LayerState::Dense {
                    h: Array2::zeros((d, config.widths[layer])),
                    x: Array2::zeros((d, config.widths[layer])),
                }
            }
        })
        .collect();
    for (i, states) in per_datum.iter().enumerate() {
        for (layer_state, datum_state) in layers.iter_mut().zip(states) {
            match (layer_state, datum_state) {
                (LayerState::Dense { h, x }, DatumState::Dense { h: dh, x: dx }) => {
                    h.row_mut(i).assign(dh);
                    x.row_mut(i).assign(dx);
                }
                (LayerState::Conv { h, x }, DatumState::Conv { h: dh, x: dx }) => {
                    h.index_axis_mut(Axis(0), i).assign(dh);
                    x.index_axis_mut(Axis(0), i).assign(dx);
                }
                _ => unreachable!("layer kinds agree across data"),
            }
        }
    }
    let output = match layers.last().expect("depth >= 1") {
        LayerState::Dense { h, .. } => h.clone(),
        LayerState::Conv { .. } => unreachable!("readout is dense"),
    };
    Ok(ForwardTrace { layers, output })
}

/// Network outputs only, `(batch, n_L)`.
pub fn predict(params: &ParamSet, inputs: &InputBatch) -> Result<Array2<f64>> {
    let config = &params.config;
    if !config.arch.is_conv() {
        if let InputBatch::Flat(x0) = inputs {
            config.validate()?;
            inputs.check(config)?;
            return Ok(dense_batched_states(params, x0).0.pop().expect("depth >= 1"));
        }
    }
    Ok(forward(params, inputs)?.output)
}

/// Whole-batch forward pass for dense networks: one matrix product per
/// layer instead of one matrix-vector product per datum. Returns the
/// pre-activations `H_l` (`batch x n_l`) and post-activations `X_l` for
/// layers `1 ..= L`; the readout's post-activation slot is left as the
/// pre-activation since nothing downstream applies `phi` to the output.
fn dense_batched_states(
    params: &ParamSet,
    x0: &Array2<f64>,
) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let config = &params.config;
    let depth = config.depth();
    let act = config.activation;
    let bias_mul = bias_premultiplier(config);
    let mut hs: Vec<Array2<f64>> = Vec::with_capacity(depth);
    let mut xs: Vec<Array2<f64>> = Vec::with_capacity(depth);
    for layer in 1..=depth {
        let (w, b) = match &params.layers[layer - 1] {
            LayerParams::Dense { w, b } => (w, b),
            LayerParams::Conv { .. } => unreachable!("dense-only path"),
        };
        let prev = if layer == 1 { x0 } else { &xs[layer - 2] };
        let a = weight_premultiplier(config, layer);
        let h = prev.dot(&w.t()) * a + &(b * bias_mul);
        let x = if layer < depth {
            h.mapv(|v| act.phi(v))
        } else {
            h.clone()
        };
        hs.push(h);
        xs.push(x);
    }
    (hs, xs)
}

/// Whole-batch loss gradient for dense networks; the exact counterpart of
/// the per-datum accumulation, restated as layer-size matrix products.
fn grad_dense_batched(
    params: &ParamSet,
    x0: &Array2<f64>,
    y: &Array2<f64>,
    loss: Loss,
) -> Result<(ParamSet, f64, Array2<f64>)> {
    let config = &params.config;
    let depth = config.depth();
    let act = config.activation;
    let bias_mul = bias_premultiplier(config);

    let (hs, xs) = dense_batched_states(params, x0);
    let f = hs[depth - 1].clone();
    let value = loss_value(&f, y, loss)?;
    let gout = loss_grad_outputs(&f, y, loss)?;

    let mut grad = params.zeros_like();
    // delta holds dL/dH_l for the current layer, (batch x n_l).
    let mut delta = gout;
    for layer in (1..=depth).rev() {
        let a = weight_premultiplier(config, layer);
        let prev = if layer == 1 { x0 } else { &xs[layer - 2] };
        match &mut grad.layers[layer - 1] {
            LayerParams::Dense { w, b } => {
                w.assign(&(delta.t().dot(prev) * a));
                b.assign(&(&delta.sum_axis(Axis(0)) * bias_mul));
            }
            LayerParams::Conv { .. } => unreachable!("dense-only path"),
        }
        if layer > 1 {
            let w = match &params.layers[layer - 1] {
                LayerParams::Dense { w, .. } => w,
                LayerParams::Conv { .. } => unreachable!("dense-only path"),
            };
            let mut back = delta.dot(w) * a;
            back.zip_mut_with(&hs[layer - 2], |v, &h| *v *= act.dphi(h));
            delta = back;
        }
    }
    Ok((grad, value, f))
}

// ---------------------------------------------------------------------------
// Reverse-mode differentiation
// ---------------------------------------------------------------------------

/// Exact derivative of every output coordinate with respect to every
/// parameter. Rows are (datum-major, output-minor); columns follow
/// [`ParamSet::flatten`] order: layer-major, weights before biases,
/// convolutional slices in tap order, each tensor row-major.
#[derive(Debug, Clone)]
pub struct JacobianMatrix {
    pub values: Array2<f64>,
}

impl JacobianMatrix {
    pub fn num_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.values.ncols()
    }
}

/// Per-datum sensitivities of the outputs with respect to a layer's
/// pre-activations.
enum Delta {
    /// `(n_l, n_L)`.
    Dense(Array2<f64>),
    /// `(n_l, m, n_L)`.
    Conv(Array3<f64>),
}

/// Flat offsets of each layer's weight and bias blocks, plus total count.
fn param_offsets(params: &ParamSet) -> (Vec<(usize, usize)>, usize) {
    let mut offsets = Vec::with_capacity(params.layers.len());
    let mut at = 0;
    for layer in &params.layers {
        let (w_len, b_len) = match layer {
            LayerParams::Dense { w, b } => (w.len(), b.len()),
            LayerParams::Conv { slices, b } => (slices.len() * slices[0].len(), b.len()),
        };
        offsets.push((at, at + w_len));
        at += w_len + b_len;
    }
    (offsets, at)
}

/// Post-activations feeding `layer` for one datum, flattened when the
/// consumer is dense.
fn layer_input_dense(
    states: &[DatumState],
    input: DatumInput<'_>,
    layer: usize,
) -> Array1<f64> {
    if layer == 1 {
        match input {
            DatumInput::Flat(v) => v.to_owned(),
            DatumInput::Spatial(_) => unreachable!("validated"),
        }
    } else {
        match &states[layer - 2] {
            DatumState::Dense { x, .. } => x.clone(),
            DatumState::Conv { x, .. } => Array1::from_iter(x.iter().copied()),
        }
    }
}

fn layer_input_conv(
    states: &[DatumState],
    input: DatumInput<'_>,
    layer: usize,
) -> Array2<f64> {
    if layer == 1 {
        match input {
            DatumInput::Spatial(v) => v.to_owned(),
            DatumInput::Flat(_) => unreachable!("validated"),
        }
    } else {
        match &states[layer - 2] {
            DatumState::Conv { x, .. } => x.clone(),
            DatumState::Dense { .. } => unreachable!("conv follows conv"),
        }
    }
}

/// Backward pass for one datum. `seed_rows` is the `(n_L, n_L)` or
/// `(n_L, r)` sensitivity of the quantities being differentiated with
/// respect to the outputs; for the full Jacobian it is the identity, for a
/// loss gradient it is the `(n_L, 1)` loss derivative. `sink` receives
/// `(flat_column, row, value)` contributions where `row` indexes the seed
/// columns.
fn backward_datum(
    params: &ParamSet,
    states: &[DatumState],
    input: DatumInput<'_>,
    seed: &Array2<f64>,
    mut sink: impl FnMut(usize, usize, f64),
) {
    let config = &params.config;
    let depth = config.depth();
    let act = config.activation;
    let bias_mul = bias_premultiplier(config);
    let (offsets, _) = param_offsets(params);
    let r = seed.ncols();

    // delta holds d(outputs)/d(h^l) as we walk layers from the readout down.
    let mut delta = Delta::Dense(seed.clone());

    for layer in (1..=depth).rev() {
        let a = weight_premultiplier(config, layer);
        let (w_off, b_off) = offsets[layer - 1];
        match (&params.layers[layer - 1], &delta) {
            (LayerParams::Dense { w, b: _ }, Delta::Dense(dd)) => {
                let prev = layer_input_dense(states, input, layer);
                let cols = w.ncols();
                // d f_o / d W[i, j] = a * delta[i, o] * prev[j].
                for o in 0..r {
                    for i in 0..w.nrows() {
                        let di = a * dd[[i, o]];
                        if di != 0.0 {
                            for j in 0..cols {
                                sink(w_off + i * cols + j, o, di * prev[j]);
                            }
                        }
                    }
                    for i in 0..w.nrows() {
                        sink(b_off + i, o, bias_mul * dd[[i, o]]);
                    }
                }
                if layer > 1 {
                    // Pull the sensitivity through W and the previous
                    // activation derivative.
                    let pulled = w.t().dot(dd) * a;
                    delta = match &states[layer - 2] {
                        DatumState::Dense { h, .. } => {
                            let mut next = pulled;
                            for (mut row, &hv) in next.outer_iter_mut().zip(h.iter()) {
                                row *= act.dphi(hv);
                            }
                            Delta::Dense(next)
                        }
                        DatumState::Conv { h, .. } => {
                            // Unflatten (channel, site) and apply phi'.
                            let (nc, m) = h.dim();
                            let mut next = Array3::<f64>::zeros((nc, m, r));
                            for j in 0..nc {
                                for alpha in 0..m {
                                    let g = act.dphi(h[[j, alpha]]);
                                    for o in 0..r {
                                        next[[j, alpha, o]] = g * pulled[[j * m + alpha, o]];
                                    }
                                }
                            }
                            Delta::Conv(next)
                        }
                    };
                }
            }
            (LayerParams::Conv { slices, b: _ }, Delta::Conv(dc)) => {
                let prev = layer_input_conv(states, input, layer);
                let (n_out, m, _) = dc.dim();
                let n_in = prev.nrows();
                let half = (slices.len() / 2) as isize;
                let slice_len = n_out * n_in;
                for o in 0..r {
                    let d_o = dc.index_axis(Axis(2), o);
                    // d f_o / d W_beta[i, j] = a * sum_alpha delta[i, alpha]
                    //                            * prev[j, alpha + beta].
                    for (t, _) in slices.iter().enumerate() {
                        let beta = t as isize - half;
                        let shifted = roll_cols(&prev.view(), -beta);
                        let grad = d_o.dot(&shifted.t()) * a;
                        let base = w_off + t * slice_len;
                        for i in 0..n_out {
                            for j in 0..n_in {
                                sink(base + i * n_in + j, o, grad[[i, j]]);
                            }
                        }
                    }
                    for i in 0..n_out {
                        let sum: f64 = (0..m).map(|alpha| d_o[[i, alpha]]).sum();
                        sink(b_off + i, o, bias_mul * sum);
                    }
                }
                if layer > 1 {
                    // delta^{l-1}[j, g] = phi'(h^{l-1}[j, g]) * a
                    //   * sum_beta sum_i W_beta[i, j] delta^l[i, g - beta].
                    let prev_h = match &states[layer - 2] {
                        DatumState::Conv { h, .. } => h,
                        DatumState::Dense { .. } => unreachable!("conv follows conv"),
                    };
                    let mut next = Array3::<f64>::zeros((n_in, m, r));
                    for o in 0..r {
                        let d_o = dc.index_axis(Axis(2), o);
                        let mut acc = Array2::<f64>::zeros((n_in, m));
                        for (t, w) in slices.iter().enumerate() {
                            let beta = t as isize - half;
                            // rolled[i, g] = delta[i, g - beta].
                            let rolled = roll_cols(&d_o, beta);
                            acc = acc + w.t().dot(&rolled);
                        }
                        for j in 0..n_in {
                            for g in 0..m {
                                next[[j, g, o]] = a * act.dphi(prev_h[[j, g]]) * acc[[j, g]];
                            }
                        }
                    }
                    delta = Delta::Conv(next);
                }
            }
            _ => unreachable!("layer kind matches delta kind"),
        }
    }
}

/// Materialized Jacobian with the default memory ceiling.
pub fn jacobian(params: &ParamSet, inputs: &InputBatch) -> Result<JacobianMatrix> {
    jacobian_with_limit(params, inputs, DEFAULT_JACOBIAN_LIMIT_BYTES)
}

/// Materialized Jacobian; rejects jobs whose matrix would exceed
/// `max_bytes` (`D * n_L * P * 8`).
pub fn jacobian_with_limit(
    params: &ParamSet,
    inputs: &InputBatch,
    max_bytes: usize,
) -> Result<JacobianMatrix> {
    let config = &params.config;
    config.validate()?;
    inputs.check(config)?;
    let d = inputs.num_inputs();
    let n_l = config.output_dim();
    let p = params.num_params();
    let bytes = d
        .checked_mul(n_l)
        .and_then(|r| r.checked_mul(p))
        .and_then(|r| r.checked_mul(8))
        .ok_or_else(|| Error::Memory("Jacobian size overflows".into()))?;
    if bytes > max_bytes {
        return Err(Error::Memory(format!(
            "Jacobian needs {bytes} bytes, above the {max_bytes}-byte ceiling"
        )));
    }

    let seed = Array2::<f64>::eye(n_l);
    let rows = exec::map_indexed(d, |i| {
        let input = datum_input(inputs, i);
        let states = forward_datum(params, input);
        let mut block = Array2::<f64>::zeros((n_l, p));
        backward_datum(params, &states, input, &seed, |col, o, v| {
            block[[o, col]] = v;
        });
        block
    });
    let mut values = Array2::<f64>::zeros((d * n_l, p));
    for (i, block) in rows.into_iter().enumerate() {
        values.slice_mut(s![i * n_l..(i + 1) * n_l, ..]).assign(&block);
    }
    Ok(JacobianMatrix { values })
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Training losses. `Mse` is the half sum of squares over all data and
/// output coordinates (no 1/D averaging); `CrossEntropy` is softmax plus
/// negative log-likelihood, summed over data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Mse,
    CrossEntropy,
}

impl std::str::FromStr for Loss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Loss::Mse),
            "cross-entropy" | "xent" => Ok(Loss::CrossEntropy),
            other => Err(Error::config(format!("unknown loss '{other}'"))),
        }
    }
}

impl std::fmt::Display for Loss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Loss::Mse => write!(f, "mse"),
            Loss::CrossEntropy => write!(f, "cross-entropy"),
        }
    }
}

fn check_targets(f: &Array2<f64>, y: &Array2<f64>, loss: Loss) -> Result<()> {
    if f.dim() != y.dim() {
        return Err(Error::shape(format!(
            "targets {:?} do not match outputs {:?}",
            y.dim(),
            f.dim()
        )));
    }
    if loss == Loss::CrossEntropy && f.ncols() < 2 {
        return Err(Error::config(
            "cross-entropy needs at least 2 output coordinates",
        ));
    }
    Ok(())
}

/// Row-stable softmax.
fn softmax_rows(f: &Array2<f64>) -> Array2<f64> {
    let mut out = f.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Loss of outputs `f` against targets `y` (one row per datum; one-hot rows
/// for cross-entropy).
pub fn loss_value(f: &Array2<f64>, y: &Array2<f64>, loss: Loss) -> Result<f64> {
    check_targets(f, y, loss)?;
    match loss {
        Loss::Mse => Ok(0.5 * (f - y).iter().map(|v| v * v).sum::<f64>()),
        Loss::CrossEntropy => {
            let mut total = 0.0;
            for (frow, yrow) in f.outer_iter().zip(y.outer_iter()) {
                let max = frow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + frow.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += yrow
                    .iter()
                    .zip(frow.iter())
                    .map(|(&yv, &fv)| yv * (lse - fv))
                    .sum::<f64>();
            }
            Ok(total)
        }
    }
}

/// Derivative of the loss with respect to the outputs, `(D, n_L)`.
pub fn loss_grad_outputs(f: &Array2<f64>, y: &Array2<f64>, loss: Loss) -> Result<Array2<f64>> {
    check_targets(f, y, loss)?;
    match loss {
        Loss::Mse => Ok(f - y),
        Loss::CrossEntropy => Ok(softmax_rows(f) - y),
    }
}

/// Exact parameter gradient of the loss over the batch, shaped like
/// `params`. Accumulates one backward pass per datum.
pub fn grad_loss(
    params: &ParamSet,
    inputs: &InputBatch,
    y: &Array2<f64>,
    loss: Loss,
) -> Result<ParamSet> {
    Ok(grad_loss_detailed(params, inputs, y, loss)?.0)
}

/// As [`grad_loss`], also returning the loss value and the outputs the
/// gradient was taken at (training loops want all three per step).
pub fn grad_loss_detailed(
    params: &ParamSet,
    inputs: &InputBatch,
    y: &Array2<f64>,
    loss: Loss,
) -> Result<(ParamSet, f64, Array2<f64>)> {
    let config = &params.config;
    if !config.arch.is_conv() {
        if let InputBatch::Flat(x0) = inputs {
            config.validate()?;
            inputs.check(config)?;
            return grad_dense_batched(params, x0, y, loss);
        }
    }
    let trace_out = predict(params, inputs)?;
    let value = loss_value(&trace_out, y, loss)?;
    let gout = loss_grad_outputs(&trace_out, y, loss)?;
    let d = inputs.num_inputs();
    let p = params.num_params();
    let mut flat = vec![0.0; p];
    for i in 0..d {
        let input = datum_input(inputs, i);
        let states = forward_datum(params, input);
        let seed = gout.row(i).to_owned().insert_axis(Axis(1));
        backward_datum(params, &states, input, &seed, |col, _, v| {
            flat[col] += v;
        });
    }
    let mut grad = params.zeros_like();
    let mut at = 0;
    for layer in &mut grad.layers {
        match layer {
            LayerParams::Dense { w, b } => {
                for v in w.iter_mut() {
                    *v = flat[at];
                    at += 1;
                }
                for v in b.iter_mut() {
                    *v = flat[at];
                    at += 1;
                }
            }
            LayerParams::Conv { slices, b } => {
                for s in slices {
                    for v in s.iter_mut() {
                        *v = flat[at];
                        at += 1;
                    }
                }
                for v in b.iter_mut() {
                    *v = flat[at];
                    at += 1;
                }
            }
        }
    }
    debug_assert_eq!(at, p);
    Ok((grad, value, trace_out))
}

/// Classification accuracy. With two or more outputs: argmax of `f` against
/// argmax of `y`, ties resolved to the lowest index. With a single output:
/// sign agreement against `+/-1` targets, zero counting as positive.
pub fn accuracy(f: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    if f.dim() != y.dim() {
        return Err(Error::shape("accuracy needs matching output/target shapes"));
    }
    if f.nrows() == 0 {
        return Err(Error::shape("accuracy over an empty batch"));
    }
    let argmax = |row: ArrayView1<f64>| -> usize {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    };
    let mut hits = 0usize;
    for (frow, yrow) in f.outer_iter().zip(y.outer_iter()) {
        let ok = if f.ncols() == 1 {
            let pred = if frow[0] >= 0.0 { 1.0 } else { -1.0 };
            pred == yrow[0].signum()
        } else {
            argmax(frow) == argmax(yrow)
        };
        if ok {
            hits += 1;
        }
    }
    Ok(hits as f64 / f.nrows() as f64)
}

// ---------------------------------------------------------------------------
// Input-output Jacobian diagnostics
// ---------------------------------------------------------------------------

/// Singular values (descending) of `d h^L / d x^0` at a single input of a
/// fully-connected network, weight scaling included.
pub fn io_jacobian_singvals(params: &ParamSet, x: &Array1<f64>) -> Result<Vec<f64>> {
    let config = &params.config;
    config.validate()?;
    if config.arch.is_conv() {
        return Err(Error::Unsupported(
            "input-output Jacobian diagnostic covers fully-connected networks only".into(),
        ));
    }
    if x.len() != config.input_dim() {
        return Err(Error::shape("input dimension mismatch"));
    }
    let batch = InputBatch::Flat(x.clone().insert_axis(Axis(0)));
    let trace = forward(params, &batch)?;
    let act = config.activation;

    let mut j: Option<Array2<f64>> = None;
    for layer in 1..=config.depth() {
        let a = weight_premultiplier(config, layer);
        let w = match &params.layers[layer - 1] {
            LayerParams::Dense { w, .. } => w,
            LayerParams::Conv { .. } => unreachable!("validated fully-connected"),
        };
        let mut step = w * a;
        if layer > 1 {
            // Scale columns by phi'(h^{l-1}).
            let h_prev = match &trace.layers[layer - 2] {
                LayerState::Dense { h, .. } => h.row(0),
                LayerState::Conv { .. } => unreachable!(),
            };
            for (mut col, &hv) in step.axis_iter_mut(Axis(1)).zip(h_prev.iter()) {
                col *= act.dphi(hv);
            }
        }
        j = Some(match j {
            None => step,
            Some(prev) => step.dot(&prev),
        });
    }
    Ok(linalg::singular_values(&j.expect("depth >= 1"))?.to_vec())
}
