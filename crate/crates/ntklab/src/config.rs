//! Network architecture and initialization configuration.
//!
//! A [`NetworkConfig`] fully determines the deterministic part of a network:
//! layer widths, architecture, activation, weight/bias variances,
//! initialization family, and parameterization. Together with a seed it also
//! determines the sampled parameters (see [`crate::sampler`]) and, on its
//! own, the infinite-width kernels (see [`crate::analytic`]).

use crate::activations::Activation;
use crate::error::{Error, Result};

/// Distribution family the weight tensors are drawn from.
///
/// `Orthogonal` means Haar-distributed orthogonal matrices (orthonormal
/// frames when a layer is not square), rescaled per layer so that each weight
/// entry keeps the same second moment as in the Gaussian family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitFamily {
    Gaussian,
    Orthogonal,
}

/// How weight variance is split between the sampled tensors and the forward
/// pass.
///
/// * `Ntk`: layer `l` computes `h = (sigma_w / sqrt(fan_in)) * W x + sigma_b * b`
///   with `W` entries of unit second moment and `b` standard normal.
/// * `Standard { expansion }`: layer `l >= 2` computes `h = W x / sqrt(expansion) + b`
///   where Gaussian weights have variance `sigma_w^2 * expansion / fan_in` and
///   biases variance `sigma_b^2`; the input layer computes `h = W x + b` with
///   weight variance `sigma_w^2 / fan_in` (the input width is a data constant
///   and does not scale with `expansion`). At `expansion = 1` this is the
///   textbook standard parameterization. Orthogonal weights in this mode
///   satisfy `W^T W = sigma_w^2 I` per layer, which matches the Gaussian
///   entry variance at `expansion = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    Ntk,
    Standard { expansion: usize },
}

/// Network architecture.
///
/// `Cnn1d` is a stack of 1-D convolutions with circular padding over
/// `spatial_size` sites and filters covering `2 * filter_half_width + 1`
/// taps, finished by a dense readout over all (channel, site) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Fcn,
    Cnn1d {
        filter_half_width: usize,
        spatial_size: usize,
    },
}

impl ArchKind {
    pub fn is_conv(&self) -> bool {
        matches!(self, ArchKind::Cnn1d { .. })
    }
}

/// Complete description of a network family at a given width.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Layer widths `n_0 ..= n_L`; for `Cnn1d` these are channel counts,
    /// except the last entry which is the dense output dimension.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub sigma_w_sq: f64,
    pub sigma_b_sq: f64,
    pub init: InitFamily,
    pub param: Parameterization,
    pub arch: ArchKind,
}

impl NetworkConfig {
    pub fn fcn(
        widths: Vec<usize>,
        activation: Activation,
        sigma_w_sq: f64,
        sigma_b_sq: f64,
        init: InitFamily,
        param: Parameterization,
    ) -> Result<Self> {
        let cfg = NetworkConfig {
            widths,
            activation,
            sigma_w_sq,
            sigma_b_sq,
            init,
            param,
            arch: ArchKind::Fcn,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn cnn1d(
        widths: Vec<usize>,
        spatial_size: usize,
        filter_half_width: usize,
        activation: Activation,
        sigma_w_sq: f64,
        sigma_b_sq: f64,
        init: InitFamily,
        param: Parameterization,
    ) -> Result<Self> {
        let cfg = NetworkConfig {
            widths,
            activation,
            sigma_w_sq,
            sigma_b_sq,
            init,
            param,
            arch: ArchKind::Cnn1d {
                filter_half_width,
                spatial_size,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of affine layers `L` (the input counts as layer 0).
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.depth()]
    }

    /// Whether layer `l` (1-based) is convolutional. In `Cnn1d` every layer
    /// except the final dense readout is.
    pub fn is_conv_layer(&self, layer: usize) -> bool {
        self.arch.is_conv() && layer >= 1 && layer < self.depth()
    }

    /// Number of filter taps of a convolutional layer.
    pub fn filter_len(&self) -> usize {
        match self.arch {
            ArchKind::Fcn => 1,
            ArchKind::Cnn1d {
                filter_half_width, ..
            } => 2 * filter_half_width + 1,
        }
    }

    /// Spatial extent `m` (1 for dense networks).
    pub fn spatial_size(&self) -> usize {
        match self.arch {
            ArchKind::Fcn => 1,
            ArchKind::Cnn1d { spatial_size, .. } => spatial_size,
        }
    }

    /// Copy of this config with every hidden width replaced by `n`.
    pub fn with_hidden_width(&self, n: usize) -> Result<Self> {
        let mut cfg = self.clone();
        let depth = cfg.depth();
        for w in &mut cfg.widths[1..depth] {
            *w = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::config(
                "a network needs at least an input and an output layer",
            ));
        }
        if let Some(l) = self.widths.iter().position(|&w| w == 0) {
            return Err(Error::config(format!("layer {l} has zero width")));
        }
        if !(self.sigma_w_sq.is_finite() && self.sigma_w_sq > 0.0) {
            return Err(Error::config(format!(
                "sigma_w_sq must be positive and finite, got {}",
                self.sigma_w_sq
            )));
        }
        if !(self.sigma_b_sq.is_finite() && self.sigma_b_sq >= 0.0) {
            return Err(Error::config(format!(
                "sigma_b_sq must be non-negative and finite, got {}",
                self.sigma_b_sq
            )));
        }
        if let Parameterization::Standard { expansion } = self.param {
            if expansion == 0 {
                return Err(Error::config("expansion factor must be at least 1"));
            }
            for (l, &w) in self.widths.iter().enumerate().skip(1) {
                // Hidden widths must be multiples of the expansion factor so
                // the base widths are integers; the output layer is exempt.
                if l < self.depth() && w % expansion != 0 {
                    return Err(Error::config(format!(
                        "hidden layer {l} width {w} is not a multiple of the expansion factor {expansion}"
                    )));
                }
            }
        }
        if let ArchKind::Cnn1d {
            filter_half_width,
            spatial_size,
        } = self.arch
        {
            if self.depth() < 2 {
                return Err(Error::config(
                    "a convolutional network needs at least one convolution below the dense readout",
                ));
            }
            if spatial_size == 0 {
                return Err(Error::config("spatial size must be at least 1"));
            }
            if 2 * filter_half_width + 1 > spatial_size {
                return Err(Error::config(format!(
                    "filter of {} taps does not fit in {} spatial sites",
                    2 * filter_half_width + 1,
                    spatial_size
                )));
            }
        }
        Ok(())
    }
}
