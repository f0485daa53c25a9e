//! Infinite-width limiting kernels by layer recursion.
//!
//! The covariance (NNGP) kernel and the tangent kernel of a network at
//! initialization converge, as hidden widths grow, to deterministic limits
//! that depend on the architecture, activation, and `(sigma_w^2, sigma_b^2)`
//! but not on the init family: Gaussian and orthogonal weights share the
//! same limits. These functions evaluate the limits exactly (up to dual
//! quadrature accuracy for tanh) by propagating a dataset's Gram matrix
//! through the layers.
//!
//! Fully-connected recursion over a `D x D` kernel `S`:
//!
//! ```text
//! S^1 = (sigma_w^2 / n_0) X X^T + sigma_b^2
//! S^l = sigma_w^2 * E[phi(u) phi(v)] + sigma_b^2      (u, v) ~ N(0, S^{l-1} pair block)
//! T^1 = S^1
//! T^l = sigma_w^2 * E[phi'(u) phi'(v)] * T^{l-1} + S^l
//! ```
//!
//! The 1D circular convolutional recursion carries a `D x D x m x m` tensor
//! indexed by input pair and site pair; hidden layers average the dual means
//! over the filter window, and the dense readout traces the site diagonal
//! without normalization:
//!
//! ```text
//! S^1_{a,a'} = sigma_w^2 / ((2k+1) n_0) * sum_b <x_{:,a+b}, x'_{:,a'+b}> + sigma_b^2
//! S^l_{a,a'} = sigma_w^2 / (2k+1) * sum_b E[phi phi]_{a+b,a'+b} + sigma_b^2
//! T^l_{a,a'} = S^l_{a,a'} + sigma_w^2 / (2k+1) * sum_b E[phi' phi']_{a+b,a'+b} T^{l-1}_{a+b,a'+b}
//! S^L = sigma_w^2 * sum_a E[phi phi]_{a,a} + sigma_b^2
//! T^L = S^L + sigma_w^2 * sum_a E[phi' phi']_{a,a} T^{L-1}_{a,a}
//! ```
//!
//! At `k = 0, m = 1` the convolutional recursion collapses to the
//! fully-connected one term by term.

use ndarray::{Array2, Array3, Array4};

use crate::activations::{dual_mean, dual_mean_deriv, Cov2};
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg;

/// Which limiting kernel a matrix holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// Covariance of pre-activations (the NNGP kernel).
    Nngp,
    /// Neural tangent kernel.
    Ntk,
}

/// A `D x D` kernel over a dataset, tagged with the layer it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub values: Array2<f64>,
    pub layer: usize,
    pub kind: KernelKind,
}

impl KernelMatrix {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// Largest absolute entry of `A - A^T`.
    pub fn symmetry_defect(&self) -> f64 {
        let v = &self.values;
        let mut worst = 0.0_f64;
        for i in 0..v.nrows() {
            for j in (i + 1)..v.ncols() {
                worst = worst.max((v[[i, j]] - v[[j, i]]).abs());
            }
        }
        worst
    }

    pub fn trace(&self) -> f64 {
        self.values.diag().sum()
    }

    pub fn fro_norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        let eig = linalg::sym_eigvals(&self.values)?;
        Ok(eig[0])
    }

    /// Checks symmetry to 1e-12 and min eigenvalue >= -1e-10 * trace.
    pub fn check_valid(&self) -> Result<()> {
        if self.values.nrows() != self.values.ncols() {
            return Err(Error::shape("kernel matrix must be square"));
        }
        if self.symmetry_defect() > 1e-12 {
            return Err(Error::Numerical(format!(
                "kernel asymmetry {} exceeds 1e-12",
                self.symmetry_defect()
            )));
        }
        let min = self.min_eigenvalue()?;
        let floor = -1e-10 * self.trace().abs();
        if min < floor {
            return Err(Error::Numerical(format!(
                "kernel min eigenvalue {min} below PSD floor {floor}"
            )));
        }
        Ok(())
    }
}

/// Site-resolved covariance tensor of a convolutional layer: indexed
/// `(d, d', a, a')` over input pairs and spatial site pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnKernelTensor {
    pub values: Array4<f64>,
    pub layer: usize,
    pub kind: KernelKind,
}

impl CnnKernelTensor {
    pub fn num_inputs(&self) -> usize {
        self.values.dim().0
    }

    pub fn num_sites(&self) -> usize {
        self.values.dim().2
    }

    /// Largest violation of the simultaneous-swap symmetry
    /// `K[d,d',a,a'] = K[d',d,a',a]`.
    pub fn symmetry_defect(&self) -> f64 {
        let v = &self.values;
        let (d, _, m, _) = v.dim();
        let mut worst = 0.0_f64;
        for i in 0..d {
            for j in i..d {
                for a in 0..m {
                    for b in 0..m {
                        worst = worst.max((v[[i, j, a, b]] - v[[j, i, b, a]]).abs());
                    }
                }
            }
        }
        worst
    }
}

/// Bivariate restriction of a kernel, with the off-diagonal clamped into the
/// Cauchy-Schwarz interval. The limits satisfy the bound exactly; quadrature
/// and accumulated roundoff can overshoot it by tiny amounts that would
/// otherwise poison downstream arcsin/arccos evaluations.
fn pair_cov(sxx: f64, sxy: f64, syy: f64) -> Cov2 {
    let vxx = sxx.max(0.0);
    let vyy = syy.max(0.0);
    let bound = (vxx * vyy).sqrt();
    Cov2::new(vxx, sxy.clamp(-bound, bound), vyy).expect("clamped within Cauchy-Schwarz")
}

fn upper_pairs(d: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            v.push((i, j));
        }
    }
    v
}

fn expect_fcn(config: &NetworkConfig) -> Result<()> {
    if config.arch.is_conv() {
        return Err(Error::config(
            "fully-connected kernel requested for a convolutional config",
        ));
    }
    Ok(())
}

fn expect_cnn(config: &NetworkConfig) -> Result<()> {
    if !config.arch.is_conv() {
        return Err(Error::config(
            "convolutional kernel requested for a fully-connected config",
        ));
    }
    Ok(())
}

fn check_fcn_data(config: &NetworkConfig, x: &Array2<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::shape("dataset must contain at least one input"));
    }
    if x.ncols() != config.input_dim() {
        return Err(Error::shape(format!(
            "input dimension {} does not match config n_0 = {}",
            x.ncols(),
            config.input_dim()
        )));
    }
    Ok(())
}

fn check_cnn_data(config: &NetworkConfig, x: &Array3<f64>) -> Result<()> {
    let (d, c, m) = x.dim();
    if d == 0 {
        return Err(Error::shape("dataset must contain at least one input"));
    }
    if c != config.input_dim() || m != config.spatial_size() {
        return Err(Error::shape(format!(
            "input shape ({c}, {m}) does not match config ({}, {})",
            config.input_dim(),
            config.spatial_size()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Fully-connected recursion
// ---------------------------------------------------------------------------

struct FcnKernels {
    /// Covariance kernels for layers 1..=L.
    nngp: Vec<Array2<f64>>,
    /// Tangent kernel at layer L; populated only when requested.
    ntk: Option<Array2<f64>>,
}

fn fcn_kernels(config: &NetworkConfig, x: &Array2<f64>, with_ntk: bool) -> Result<FcnKernels> {
    config.validate()?;
    expect_fcn(config)?;
    check_fcn_data(config, x)?;

    let d = x.nrows();
    let sw2 = config.sigma_w_sq;
    let sb2 = config.sigma_b_sq;
    let n0 = config.input_dim() as f64;

    let mut sigma = x.dot(&x.t()) * (sw2 / n0) + sb2;
    let mut theta = with_ntk.then(|| sigma.clone());
    let mut nngp = vec![sigma.clone()];

    let pairs = upper_pairs(d);
    for _layer in 2..=config.depth() {
        let act = config.activation;
        let prev = &sigma;
        let entries = exec::map_indexed(pairs.len(), |t| {
            let (i, j) = pairs[t];
            let c = pair_cov(prev[[i, i]], prev[[i, j]], prev[[j, j]]);
            let mean = dual_mean(&c, act);
            let deriv = with_ntk.then(|| dual_mean_deriv(&c, act));
            (mean, deriv)
        });
        let mut next = Array2::zeros((d, d));
        let mut dot = with_ntk.then(|| Array2::<f64>::zeros((d, d)));
        for (t, &(i, j)) in pairs.iter().enumerate() {
            let v = sw2 * entries[t].0 + sb2;
            next[[i, j]] = v;
            next[[j, i]] = v;
            if let (Some(dm), Some(der)) = (dot.as_mut(), entries[t].1) {
                dm[[i, j]] = der;
                dm[[j, i]] = der;
            }
        }
        if let (Some(th), Some(dm)) = (theta.as_mut(), dot.as_ref()) {
            // T^l = sigma_w^2 * Sdot^l . T^{l-1} + S^l, elementwise.
            *th = dm * &*th * sw2 + &next;
        }
        sigma = next;
        nngp.push(sigma.clone());
    }

    Ok(FcnKernels { nngp, ntk: theta })
}

/// Limiting covariance kernels of every layer, 1..=L, for a fully-connected
/// network over the `D x n_0` dataset `x` (rows are inputs).
pub fn nngp_fcn(config: &NetworkConfig, x: &Array2<f64>) -> Result<Vec<KernelMatrix>> {
    let kernels = fcn_kernels(config, x, false)?;
    Ok(kernels
        .nngp
        .into_iter()
        .enumerate()
        .map(|(idx, values)| KernelMatrix {
            values,
            layer: idx + 1,
            kind: KernelKind::Nngp,
        })
        .collect())
}

/// Limiting tangent kernel of the network output (layer L). The output
/// carries an implicit identity factor over output indices; this is the
/// scalar kernel.
pub fn ntk_fcn(config: &NetworkConfig, x: &Array2<f64>) -> Result<KernelMatrix> {
    let kernels = fcn_kernels(config, x, true)?;
    Ok(KernelMatrix {
        values: kernels.ntk.expect("requested"),
        layer: config.depth(),
        kind: KernelKind::Ntk,
    })
}

// ---------------------------------------------------------------------------
// 1D circular convolutional recursion
// ---------------------------------------------------------------------------

struct CnnKernels {
    /// Site-resolved covariance tensors for layers 1..=L-1.
    nngp_layers: Vec<Array4<f64>>,
    /// Readout covariance kernel (layer L).
    nngp_out: Array2<f64>,
    /// Readout tangent kernel; populated only when requested.
    ntk_out: Option<Array2<f64>>,
}

fn cnn_kernels(config: &NetworkConfig, x: &Array3<f64>, with_ntk: bool) -> Result<CnnKernels> {
    config.validate()?;
    expect_cnn(config)?;
    check_cnn_data(config, x)?;

    let (d, _, m) = x.dim();
    let sw2 = config.sigma_w_sq;
    let sb2 = config.sigma_b_sq;
    let n0 = config.input_dim() as f64;
    let taps = config.filter_len();
    let half = (taps / 2) as isize;
    let act = config.activation;
    let depth = config.depth();
    let pairs = upper_pairs(d);

    let site = |a: usize, off: isize| -> usize {
        (a as isize + off).rem_euclid(m as isize) as usize
    };

    // Layer 1: windowed cross-correlation of raw patches.
    let mut sigma = Array4::<f64>::zeros((d, d, m, m));
    {
        let blocks = exec::map_indexed(pairs.len(), |t| {
            let (i, j) = pairs[t];
            let mut blk = Array2::<f64>::zeros((m, m));
            for a in 0..m {
                for ap in 0..m {
                    let mut acc = 0.0;
                    for off in -half..=half {
                        let (sa, sap) = (site(a, off), site(ap, off));
                        for c in 0..config.input_dim() {
                            acc += x[[i, c, sa]] * x[[j, c, sap]];
                        }
                    }
                    blk[[a, ap]] = sw2 / (taps as f64 * n0) * acc + sb2;
                }
            }
            blk
        });
        scatter_blocks(&mut sigma, &pairs, &blocks);
    }
    let mut theta = with_ntk.then(|| sigma.clone());
    let mut nngp_layers = vec![sigma.clone()];

    // Hidden convolutional layers 2..=L-1: window-averaged dual means.
    for _layer in 2..depth {
        let prev = &sigma;
        let blocks = exec::map_indexed(pairs.len(), |t| {
            let (i, j) = pairs[t];
            let mut mean = Array2::<f64>::zeros((m, m));
            let mut deriv = with_ntk.then(|| Array2::<f64>::zeros((m, m)));
            for a in 0..m {
                for ap in 0..m {
                    let c = pair_cov(
                        prev[[i, i, a, a]],
                        prev[[i, j, a, ap]],
                        prev[[j, j, ap, ap]],
                    );
                    mean[[a, ap]] = dual_mean(&c, act);
                    if let Some(dv) = deriv.as_mut() {
                        dv[[a, ap]] = dual_mean_deriv(&c, act);
                    }
                }
            }
            let mut sig = Array2::<f64>::zeros((m, m));
            let mut th = deriv.as_ref().map(|_| Array2::<f64>::zeros((m, m)));
            for a in 0..m {
                for ap in 0..m {
                    let mut s_acc = 0.0;
                    let mut t_acc = 0.0;
                    for off in -half..=half {
                        let (sa, sap) = (site(a, off), site(ap, off));
                        s_acc += mean[[sa, sap]];
                        if with_ntk {
                            t_acc += deriv.as_ref().expect("requested")[[sa, sap]]
                                * theta.as_ref().expect("requested")[[i, j, sa, sap]];
                        }
                    }
                    sig[[a, ap]] = sw2 / taps as f64 * s_acc + sb2;
                    if let Some(tm) = th.as_mut() {
                        tm[[a, ap]] = sig[[a, ap]] + sw2 / taps as f64 * t_acc;
                    }
                }
            }
            (sig, th)
        });
        let mut next = Array4::<f64>::zeros((d, d, m, m));
        scatter_blocks(&mut next, &pairs, &blocks.iter().map(|b| b.0.clone()).collect::<Vec<_>>());
        if let Some(t4) = theta.as_mut() {
            let tb: Vec<Array2<f64>> = blocks
                .iter()
                .map(|b| b.1.clone().expect("requested"))
                .collect();
            scatter_blocks(t4, &pairs, &tb);
        }
        sigma = next;
        nngp_layers.push(sigma.clone());
    }

    // Readout: dense over (channel, site); unnormalized trace over the site
    // diagonal.
    let prev = &sigma;
    let out = exec::map_indexed(pairs.len(), |t| {
        let (i, j) = pairs[t];
        let mut s_acc = 0.0;
        let mut t_acc = 0.0;
        for a in 0..m {
            let c = pair_cov(prev[[i, i, a, a]], prev[[i, j, a, a]], prev[[j, j, a, a]]);
            s_acc += dual_mean(&c, act);
            if with_ntk {
                t_acc += dual_mean_deriv(&c, act) * theta.as_ref().expect("requested")[[i, j, a, a]];
            }
        }
        (sw2 * s_acc + sb2, t_acc)
    });
    let mut nngp_out = Array2::<f64>::zeros((d, d));
    let mut ntk_out = with_ntk.then(|| Array2::<f64>::zeros((d, d)));
    for (t, &(i, j)) in pairs.iter().enumerate() {
        nngp_out[[i, j]] = out[t].0;
        nngp_out[[j, i]] = out[t].0;
        if let Some(th) = ntk_out.as_mut() {
            let v = out[t].0 + sw2 * out[t].1;
            th[[i, j]] = v;
            th[[j, i]] = v;
        }
    }

    Ok(CnnKernels {
        nngp_layers,
        nngp_out,
        ntk_out,
    })
}

/// Mirrors per-pair `m x m` blocks into the full swap-symmetric tensor:
/// `K[d',d,a',a] = K[d,d',a,a']`.
fn scatter_blocks(tensor: &mut Array4<f64>, pairs: &[(usize, usize)], blocks: &[Array2<f64>]) {
    let m = tensor.dim().2;
    for (t, &(i, j)) in pairs.iter().enumerate() {
        for a in 0..m {
            for ap in 0..m {
                let v = blocks[t][[a, ap]];
                tensor[[i, j, a, ap]] = v;
                tensor[[j, i, ap, a]] = v;
            }
        }
    }
}

/// Limiting covariance of a 1D circular convolutional network over a
/// `D x n_0 x m` dataset: site-resolved tensors for the convolutional layers
/// plus the readout kernel.
pub fn nngp_cnn(
    config: &NetworkConfig,
    x: &Array3<f64>,
) -> Result<(Vec<CnnKernelTensor>, KernelMatrix)> {
    let kernels = cnn_kernels(config, x, false)?;
    let tensors = kernels
        .nngp_layers
        .into_iter()
        .enumerate()
        .map(|(idx, values)| CnnKernelTensor {
            values,
            layer: idx + 1,
            kind: KernelKind::Nngp,
        })
        .collect();
    let out = KernelMatrix {
        values: kernels.nngp_out,
        layer: config.depth(),
        kind: KernelKind::Nngp,
    };
    Ok((tensors, out))
}

/// Limiting tangent kernel of a 1D circular convolutional network's readout.
pub fn ntk_cnn(config: &NetworkConfig, x: &Array3<f64>) -> Result<KernelMatrix> {
    let kernels = cnn_kernels(config, x, true)?;
    Ok(KernelMatrix {
        values: kernels.ntk_out.expect("requested"),
        layer: config.depth(),
        kind: KernelKind::Ntk,
    })
}
