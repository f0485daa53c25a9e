//! Parameter sampling for Gaussian and Haar-orthogonal initialization.
//!
//! The two init families are calibrated to share per-entry second moments,
//! layer by layer, in both parameterizations:
//!
//! * NTK parameterization: weight entries have unit second moment (Gaussian
//!   `N(0,1)`; orthogonal frames scaled so the short-side gram is
//!   `fan_in * I`, or `max(n_0, n_1) * I` for the input layer); biases are
//!   standard normal, with `sigma_w`, `sigma_b` applied in the forward pass.
//! * Standard parameterization: Gaussian weights have variance
//!   `sigma_w^2 * expansion / fan_in` for layers past the first and
//!   `sigma_w^2 / fan_in` for the input layer (the input width does not
//!   scale); orthogonal frames are scaled so the short-side gram is that
//!   per-entry variance times fan-in (times `max(n_0, n_1)` on the input
//!   layer, which realizes the input-layer scale condition
//!   `W^T W = sigma_w^2 (n_1/n_0) I` exactly). Biases are `N(0, sigma_b^2)`.
//!
//! Convolutional layers apply these rules per filter slice with the slice's
//! fan-in `(2k+1) * n_{l-1}` shared across taps; the slices are mutually
//! independent. The dense readout of a convolutional network is sampled over
//! the flattened (channel, site) axis with per-entry variance matching
//! `sigma_w^2 * expansion / n_{L-1}` (channels only; the site sum enters the
//! output kernel untraced).

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{InitFamily, NetworkConfig, Parameterization};
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg;
use crate::rng;

/// Parameters of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Dense {
        /// `(n_out, n_in)`; for the readout of a convolutional network the
        /// input axis is the flattened (channel, site) pair, site-minor.
        w: Array2<f64>,
        b: Array1<f64>,
    },
    Conv {
        /// One `(n_out, n_in)` matrix per filter tap, in offset order
        /// `-k ..= k`.
        slices: Vec<Array2<f64>>,
        b: Array1<f64>,
    },
}

impl LayerParams {
    /// Weight tensors as flat row-major slices, in layout order.
    fn weight_views(&self) -> Vec<&[f64]> {
        match self {
            LayerParams::Dense { w, .. } => vec![w.as_slice().expect("standard layout")],
            LayerParams::Conv { slices, .. } => slices
                .iter()
                .map(|s| s.as_slice().expect("standard layout"))
                .collect(),
        }
    }

    fn bias_view(&self) -> &[f64] {
        match self {
            LayerParams::Dense { b, .. } | LayerParams::Conv { b, .. } => {
                b.as_slice().expect("standard layout")
            }
        }
    }

    /// All tensors of this layer (weights first, then bias) as flat slices.
    fn views(&self) -> Vec<&[f64]> {
        let mut v = self.weight_views();
        v.push(self.bias_view());
        v
    }

    fn views_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            LayerParams::Dense { w, b } => vec![
                w.as_slice_mut().expect("standard layout"),
                b.as_slice_mut().expect("standard layout"),
            ],
            LayerParams::Conv { slices, b } => {
                let mut v: Vec<&mut [f64]> = slices
                    .iter_mut()
                    .map(|s| s.as_slice_mut().expect("standard layout"))
                    .collect();
                v.push(b.as_slice_mut().expect("standard layout"));
                v
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.views().iter().map(|v| v.len()).sum()
    }
}

/// A full network's sampled parameters together with the config that shaped
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub config: NetworkConfig,
    pub layers: Vec<LayerParams>,
}

/// Haar-distributed orthonormal frame of shape `(n_out, n_in)`.
///
/// Square matrices are Haar orthogonal; tall outputs have orthonormal
/// columns, wide outputs orthonormal rows. Construction: QR of an i.i.d.
/// standard Gaussian matrix (of the tall orientation), sign-corrected by
/// `sign(diag R)` to make the factorization unique and the law exactly Haar.
pub fn haar_orthogonal(n_out: usize, n_in: usize, seed: u64) -> Result<Array2<f64>> {
    haar_orthogonal_from(n_out, n_in, &mut rng::stream(seed, 0))
}

/// As [`haar_orthogonal`], drawing from a caller-managed stream.
pub fn haar_orthogonal_from(
    n_out: usize,
    n_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    if n_out == 0 || n_in == 0 {
        return Err(Error::shape("orthogonal frame needs positive dimensions"));
    }
    if n_out < n_in {
        let tall = haar_orthogonal_from(n_in, n_out, rng)?;
        // Materialize in row-major order; a bare transpose view would not be.
        return Ok(tall.t().as_standard_layout().into_owned());
    }
    let g = gaussian_matrix(n_out, n_in, 1.0, rng);
    let (mut q, r) = linalg::qr_thin(&g)?;
    for j in 0..n_in {
        if r[[j, j]] < 0.0 {
            q.column_mut(j).mapv_inplace(|x| -x);
        }
    }
    Ok(q)
}

/// Deviation of `W` from a scaled orthonormal frame: the Frobenius norm of
/// `G - target_scale * I`, where `G` is the gram matrix on the shorter side
/// (`W^T W` for square or tall `W`, `W W^T` for wide).
pub fn orthogonality_defect(w: &Array2<f64>, target_scale: f64) -> f64 {
    let gram = if w.nrows() >= w.ncols() {
        w.t().dot(w)
    } else {
        w.dot(&w.t())
    };
    let mut sum = 0.0;
    for ((i, j), &g) in gram.indexed_iter() {
        let target = if i == j { target_scale } else { 0.0 };
        sum += (g - target) * (g - target);
    }
    sum.sqrt()
}

/// Shape of layer `layer`'s weight tensor: `(n_out, n_in)` for dense layers
/// and per slice for convolutional ones; the readout of a convolutional
/// network reports its flattened input axis.
pub fn layer_shape(config: &NetworkConfig, layer: usize) -> (usize, usize) {
    debug_assert!(layer >= 1 && layer <= config.depth());
    let rows = config.widths[layer];
    let cols = if config.arch.is_conv() && layer == config.depth() {
        config.widths[layer - 1] * config.spatial_size()
    } else {
        config.widths[layer - 1]
    };
    (rows, cols)
}

/// Per-entry variance of Gaussian weights at `layer` under `config`'s
/// parameterization. Orthogonal sampling is calibrated to the same value.
pub fn gaussian_weight_variance(config: &NetworkConfig, layer: usize) -> f64 {
    match config.param {
        Parameterization::Ntk => 1.0,
        Parameterization::Standard { expansion } => {
            let taps = if config.is_conv_layer(layer) {
                config.filter_len() as f64
            } else {
                1.0
            };
            // The readout of a convolutional network divides by channels
            // only; the spatial sum enters the output kernel untraced.
            let fan = config.widths[layer - 1] as f64;
            if layer == 1 {
                config.sigma_w_sq / (taps * fan)
            } else {
                config.sigma_w_sq * expansion as f64 / (taps * fan)
            }
        }
    }
}

/// Gram-diagonal target for orthogonal weights at `layer`: sampled frames
/// satisfy `G = layer_target_scale * I` on their short side (per slice for
/// convolutions). Equals the Gaussian per-entry variance times fan-in, with
/// the input layer using `max(n_0, n_1)` so the scale condition holds under
/// both parameterizations.
pub fn layer_target_scale(config: &NetworkConfig, layer: usize) -> f64 {
    let (rows, cols) = if config.is_conv_layer(layer) {
        (config.widths[layer], config.widths[layer - 1])
    } else {
        layer_shape(config, layer)
    };
    let frame = if layer == 1 { rows.max(cols) } else { cols };
    gaussian_weight_variance(config, layer) * frame as f64
}

/// Standard deviation of sampled biases at any layer.
pub fn bias_sd(config: &NetworkConfig) -> f64 {
    match config.param {
        Parameterization::Ntk => 1.0,
        Parameterization::Standard { .. } => config.sigma_b_sq.sqrt(),
    }
}

/// Draws a full parameter set. Deterministic in `(config, seed)`: layer `l`
/// consumes only its own weight and bias streams (see [`crate::rng`]), so
/// networks sharing a seed share layers where shapes agree.
pub fn sample_params(config: &NetworkConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let depth = config.depth();
    let mut layers = Vec::with_capacity(depth);
    for layer in 1..=depth {
        let mut w_rng = rng::weight_stream(seed, layer);
        let mut b_rng = rng::bias_stream(seed, layer);
        let b = bias_vector(config, layer, &mut b_rng);
        let params = if config.is_conv_layer(layer) {
            let (rows, cols) = (config.widths[layer], config.widths[layer - 1]);
            let slices = (0..config.filter_len())
                .map(|_| sample_weight(config, layer, rows, cols, &mut w_rng))
                .collect::<Result<Vec<_>>>()?;
            LayerParams::Conv { slices, b }
        } else {
            let (rows, cols) = layer_shape(config, layer);
            let w = sample_weight(config, layer, rows, cols, &mut w_rng)?;
            LayerParams::Dense { w, b }
        };
        layers.push(params);
    }
    Ok(ParamSet {
        config: config.clone(),
        layers,
    })
}

fn sample_weight(
    config: &NetworkConfig,
    layer: usize,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    match config.init {
        InitFamily::Gaussian => {
            let sd = gaussian_weight_variance(config, layer).sqrt();
            Ok(gaussian_matrix(rows, cols, sd, rng))
        }
        InitFamily::Orthogonal => {
            let scale = layer_target_scale(config, layer).sqrt();
            let q = haar_orthogonal_from(rows, cols, rng)?;
            Ok(q * scale)
        }
    }
}

fn bias_vector(config: &NetworkConfig, layer: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let sd = bias_sd(config);
    let n = config.widths[layer];
    Array1::from_iter((0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)))
}

fn gaussian_matrix(rows: usize, cols: usize, sd: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data length")
}

/// A monomial in the entries of an orthogonal matrix: the product of the
/// named `(row, col)` entries (repetition allowed). Only degree-2 and
/// degree-4 monomials are supported; odd degrees vanish identically under
/// Haar symmetry and are rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MomentSpec(Vec<(usize, usize)>);

impl MomentSpec {
    pub fn new(factors: Vec<(usize, usize)>) -> Result<Self> {
        match factors.len() {
            2 | 4 => Ok(MomentSpec(factors)),
            n if n % 2 == 1 => Err(Error::config(format!(
                "odd-order moment (degree {n}) is identically zero under Haar symmetry; not estimated"
            ))),
            n => Err(Error::config(format!(
                "only degree-2 and degree-4 moments are supported, got degree {n}"
            ))),
        }
    }

    pub fn factors(&self) -> &[(usize, usize)] {
        &self.0
    }

    fn max_index(&self) -> usize {
        self.0
            .iter()
            .map(|&(i, j)| i.max(j))
            .max()
            .expect("spec is non-empty")
    }
}

/// Monte-Carlo estimate of `E[prod W_{ij}]` over `num_samples` independent
/// `n x n` Haar draws. Returns the sample mean and its standard error. Each
/// draw uses its own derived stream, so the estimate is independent of
/// execution order.
pub fn moment_estimate(
    n: usize,
    num_samples: usize,
    indices: &MomentSpec,
    seed: u64,
) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::config("matrix dimension must be positive"));
    }
    if num_samples < 2 {
        return Err(Error::config("need at least 2 samples for a standard error"));
    }
    if indices.max_index() >= n {
        return Err(Error::config(format!(
            "moment index out of range for a {n}x{n} matrix"
        )));
    }
    let values = exec::map_indexed(num_samples, |draw| {
        let mut rng = rng::mc_stream(seed, draw);
        let q = haar_orthogonal_from(n, n, &mut rng).expect("positive dims");
        indices.factors().iter().map(|&(i, j)| q[[i, j]]).product::<f64>()
    });
    let count = num_samples as f64;
    let mean = values.iter().sum::<f64>() / count;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1.0);
    Ok((mean, (var / count).sqrt()))
}

impl ParamSet {
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }

    /// All parameters as one vector: layer-major; within a layer, weights
    /// precede biases; convolutional slices iterate in tap order, each
    /// row-major. This layout is the column order of Jacobians.
    pub fn flatten(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            for view in layer.views() {
                out.extend_from_slice(view);
            }
        }
        Array1::from_vec(out)
    }

    /// Copy with the parameter at flat `index` shifted by `delta`.
    pub fn perturbed(&self, index: usize, delta: f64) -> Result<ParamSet> {
        let mut out = self.clone();
        let mut remaining = index;
        for layer in &mut out.layers {
            for view in layer.views_mut() {
                if remaining < view.len() {
                    view[remaining] += delta;
                    return Ok(out);
                }
                remaining -= view.len();
            }
        }
        Err(Error::shape(format!(
            "parameter index {index} out of range for {} parameters",
            self.num_params()
        )))
    }

    /// In-place `self += alpha * other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) {
        assert_eq!(
            self.layers.len(),
            other.layers.len(),
            "parameter sets must share structure"
        );
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            let bs = b.views();
            for (av, bv) in a.views_mut().into_iter().zip(bs) {
                assert_eq!(av.len(), bv.len(), "parameter sets must share structure");
                for (x, y) in av.iter_mut().zip(bv) {
                    *x += alpha * y;
                }
            }
        }
    }

    /// Same structure, all entries zero. Gradient accumulators start here.
    pub fn zeros_like(&self) -> ParamSet {
        let mut out = self.clone();
        for layer in &mut out.layers {
            for view in layer.views_mut() {
                view.fill(0.0);
            }
        }
        out
    }

    pub fn l2_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.views())
            .map(|v| v.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Euclidean distance in parameter space; structures must match.
    pub fn l2_distance(&self, other: &ParamSet) -> f64 {
        let mut sum = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for (av, bv) in a.views().into_iter().zip(b.views()) {
                assert_eq!(av.len(), bv.len(), "parameter sets must share structure");
                sum += av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>();
            }
        }
        sum.sqrt()
    }

    /// Per-layer relative weight change `|W_l - W_l^init|_F / |W_l^init|_F`
    /// (weights only; biases excluded).
    pub fn relative_weight_change(&self, init: &ParamSet) -> Vec<f64> {
        self.layers
            .iter()
            .zip(&init.layers)
            .map(|(a, b)| {
                let mut num = 0.0;
                let mut den = 0.0;
                for (av, bv) in a.weight_views().into_iter().zip(b.weight_views()) {
                    for (x, y) in av.iter().zip(bv) {
                        num += (x - y) * (x - y);
                        den += y * y;
                    }
                }
                (num / den).sqrt()
            })
            .collect()
    }

    /// Reinterprets NTK-parameterized parameters as standard-parameterized
    /// ones computing the identical function: weights absorb
    /// `sigma_w / sqrt(fan_in)` and biases `sigma_b`.
    pub fn to_standard(&self) -> Result<ParamSet> {
        if self.config.param != Parameterization::Ntk {
            return Err(Error::Unsupported(
                "to_standard converts NTK-parameterized sets only".into(),
            ));
        }
        let mut out = self.clone();
        out.config.param = Parameterization::Standard { expansion: 1 };
        let sigma_w = self.config.sigma_w_sq.sqrt();
        let sigma_b = self.config.sigma_b_sq.sqrt();
        for (idx, layer) in out.layers.iter_mut().enumerate() {
            let l = idx + 1;
            // Dense fan-in is the previous width; for the readout of a
            // convolutional network that is channels only, matching the
            // untraced site sum in the forward pass.
            let fan = if self.config.is_conv_layer(l) {
                (self.config.filter_len() * self.config.widths[l - 1]) as f64
            } else {
                self.config.widths[l - 1] as f64
            };
            let wf = sigma_w / fan.sqrt();
            match layer {
                LayerParams::Dense { w, b } => {
                    w.mapv_inplace(|x| wf * x);
                    b.mapv_inplace(|x| sigma_b * x);
                }
                LayerParams::Conv { slices, b } => {
                    for s in slices {
                        s.mapv_inplace(|x| wf * x);
                    }
                    b.mapv_inplace(|x| sigma_b * x);
                }
            }
        }
        Ok(out)
    }
}
