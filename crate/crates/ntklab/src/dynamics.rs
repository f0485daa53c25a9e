//! Gradient-descent training and its infinite-width linearization.
//!
//! [`train`] runs full-batch or minibatch gradient descent on a sampled
//! network and records a metric trace. [`LinearizedSolution`] holds the
//! eigendecomposition of a fixed kernel and evaluates the closed-form
//! mean-squared-error flow
//!
//! ```text
//! f_t = Y + exp(-eta * Theta * t) (f_0 - Y)
//! ```
//!
//! so finite-width trajectories can be compared against the kernel
//! prediction at matching step counts.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;

use crate::analytic::KernelMatrix;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::network::{self, Loss};
use crate::rng;
use crate::sampler::ParamSet;

/// Update rule for [`train`]. Minibatches are drawn without replacement:
/// each epoch reshuffles the dataset and walks it in consecutive batches,
/// with a final short batch when the sizes do not divide evenly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// Full-batch gradient descent.
    Gd,
    /// Minibatch stochastic gradient descent with the given batch size.
    Sgd { batch: usize },
}

/// Everything [`train`] needs besides the network and the data.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub optimizer: Optimizer,
    /// Learning rate. Zero is allowed and leaves the parameters untouched.
    pub eta: f64,
    /// Number of gradient updates to apply.
    pub steps: usize,
    pub loss: Loss,
    /// Seed for the epoch shuffles. Full-batch runs never draw from it, so
    /// they are seed-independent.
    pub seed: u64,
    /// Metric logging cadence in steps. `None` picks `ceil(steps / 200)`,
    /// keeping traces near two hundred points regardless of run length.
    pub log_every: Option<usize>,
    /// Record `||theta_t - theta_0||_2` at each logged step.
    pub track_param_distance: bool,
    /// Record the full training-set outputs at each logged step.
    pub snapshot_outputs: bool,
}

impl TrainOptions {
    pub fn new(optimizer: Optimizer, eta: f64, steps: usize, loss: Loss, seed: u64) -> Self {
        TrainOptions {
            optimizer,
            eta,
            steps,
            loss,
            seed,
            log_every: None,
            track_param_distance: false,
            snapshot_outputs: false,
        }
    }

    fn cadence(&self) -> usize {
        self.log_every.unwrap_or(self.steps.div_ceil(200)).max(1)
    }
}

/// Metrics measured at one logged step. Losses and accuracies are always
/// evaluated on the full training set, independent of the batching.
#[derive(Debug, Clone)]
pub struct LogPoint {
    pub step: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub param_distance: Option<f64>,
    pub outputs: Option<Array2<f64>>,
}

/// Trace of a training run. `points` is ordered by strictly increasing
/// step; a run that hit a non-finite loss or gradient is truncated at the
/// last finite point and flagged.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub points: Vec<LogPoint>,
    pub diverged: bool,
    pub eta: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl TrainTrace {
    pub fn final_point(&self) -> Option<&LogPoint> {
        self.points.last()
    }
}

/// Hands out without-replacement minibatch index sets, reshuffling at each
/// epoch boundary from its own deterministic stream.
struct EpochSampler {
    seed: u64,
    order: Vec<usize>,
    epoch: usize,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = EpochSampler {
            seed,
            order: (0..n).collect(),
            epoch: 0,
            pos: 0,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        // Each epoch's order is a function of (seed, epoch) alone, so a
        // trace can be reproduced from any point without replaying history.
        for (i, v) in self.order.iter_mut().enumerate() {
            *v = i;
        }
        let mut r = rng::shuffle_stream(self.seed, self.epoch);
        self.order.shuffle(&mut r);
    }

    fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.shuffle();
        }
        let end = (self.pos + batch).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        idx
    }
}

/// Runs gradient descent from `params` and returns the metric trace along
/// with the final parameters. The starting parameters are logged as step 0
/// and the final parameters as step `steps`, with intermediate points at
/// the configured cadence.
pub fn train(
    params: &ParamSet,
    data: &Dataset,
    test: Option<&Dataset>,
    opts: &TrainOptions,
) -> Result<(TrainTrace, ParamSet)> {
    if !opts.eta.is_finite() || opts.eta < 0.0 {
        return Err(Error::config("learning rate must be finite and non-negative"));
    }
    if let Optimizer::Sgd { batch } = opts.optimizer {
        if batch == 0 || batch > data.len() {
            return Err(Error::config(format!(
                "batch size {batch} outside 1..={}",
                data.len()
            )));
        }
    }
    let n_out = params.config.output_dim();
    let y_train = data.targets(n_out)?;
    let y_test = test.map(|d| d.targets(n_out)).transpose()?;
    let cadence = opts.cadence();

    let start = params.clone();
    let mut cur = params.clone();
    let mut trace = TrainTrace {
        points: Vec::with_capacity(opts.steps / cadence + 2),
        diverged: false,
        eta: opts.eta,
        optimizer: opts.optimizer,
        seed: opts.seed,
    };
    let mut sampler = match opts.optimizer {
        Optimizer::Gd => None,
        Optimizer::Sgd { .. } => Some(EpochSampler::new(data.len(), opts.seed)),
    };

    let log_point = |p: &ParamSet, step: usize| -> Result<Option<LogPoint>> {
        let f = network::predict(p, &data.inputs)?;
        let train_loss = network::loss_value(&f, &y_train, opts.loss)?;
        if !train_loss.is_finite() {
            return Ok(None);
        }
        let train_accuracy = network::accuracy(&f, &y_train)?;
        let (test_loss, test_accuracy) = match (test, &y_test) {
            (Some(td), Some(yt)) => {
                let ft = network::predict(p, &td.inputs)?;
                (
                    Some(network::loss_value(&ft, yt, opts.loss)?),
                    Some(network::accuracy(&ft, yt)?),
                )
            }
            _ => (None, None),
        };
        Ok(Some(LogPoint {
            step,
            train_loss,
            train_accuracy,
            test_loss,
            test_accuracy,
            param_distance: opts.track_param_distance.then(|| p.l2_distance(&start)),
            outputs: opts.snapshot_outputs.then(|| f.clone()),
        }))
    };

    'run: {
        for step in 0..opts.steps {
            if step % cadence == 0 {
                match log_point(&cur, step)? {
                    Some(pt) => trace.points.push(pt),
                    None => {
                        trace.diverged = true;
                        break 'run;
                    }
                }
            }
            let (grad, batch_loss) = match (opts.optimizer, &mut sampler) {
                (Optimizer::Gd, _) => {
                    let (g, l, _) =
                        network::grad_loss_detailed(&cur, &data.inputs, &y_train, opts.loss)?;
                    (g, l)
                }
                (Optimizer::Sgd { batch }, Some(sampler)) => {
                    let idx = sampler.next_batch(batch);
                    let subset = data.select(&idx)?;
                    let yb = y_train.select(Axis(0), &idx);
                    let (g, l, _) =
                        network::grad_loss_detailed(&cur, &subset.inputs, &yb, opts.loss)?;
                    (g, l)
                }
                (Optimizer::Sgd { .. }, None) => unreachable!(),
            };
            if !batch_loss.is_finite() || !grad.l2_norm().is_finite() {
                trace.diverged = true;
                break 'run;
            }
            cur.axpy(-opts.eta, &grad);
        }
        match log_point(&cur, opts.steps)? {
            Some(pt) => trace.points.push(pt),
            None => trace.diverged = true,
        }
    }
    Ok((trace, cur))
}

/// Closed-form mean-squared-error gradient flow under a fixed kernel.
///
/// Construction eigendecomposes the kernel once; evaluation at any time is
/// then a pair of small matrix products. Time is continuous: a discrete
/// run with learning rate `eta` is compared at `t = step`, since one
/// update of size `eta` advances the flow `df/dt = -eta K (f - Y)` by unit
/// time to first order.
#[derive(Debug, Clone)]
pub struct LinearizedSolution {
    eigvals: Array1<f64>,
    eigvecs: Array2<f64>,
    f0: Array2<f64>,
    y: Array2<f64>,
    eta: f64,
}

impl LinearizedSolution {
    /// Requires a positive semi-definite kernel: an eigenvalue below
    /// `-1e-10 * trace` is rejected, and small negative eigenvalues inside
    /// that tolerance are clamped to zero.
    pub fn new(kernel: &KernelMatrix, f0: Array2<f64>, y: Array2<f64>, eta: f64) -> Result<Self> {
        let d = kernel.dim();
        if f0.nrows() != d || y.nrows() != d || f0.ncols() != y.ncols() {
            return Err(Error::shape(format!(
                "kernel dim {d} with outputs {:?} and targets {:?}",
                f0.dim(),
                y.dim()
            )));
        }
        if !eta.is_finite() || eta < 0.0 {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        let (mut eigvals, eigvecs) = linalg::sym_eig(&kernel.values)?;
        let floor = -1e-10 * kernel.trace().abs();
        if eigvals[0] < floor {
            return Err(Error::Numerical(format!(
                "kernel is not positive semi-definite: min eigenvalue {:.3e}",
                eigvals[0]
            )));
        }
        eigvals.mapv_inplace(|v| v.max(0.0));
        Ok(LinearizedSolution {
            eigvals,
            eigvecs,
            f0,
            y,
            eta,
        })
    }

    /// Kernel eigenvalues in ascending order, after clamping.
    pub fn eigenvalues(&self) -> &Array1<f64> {
        &self.eigvals
    }

    /// Training-set outputs of the flow at time `t >= 0`. `t = 0` returns
    /// the initial outputs exactly; `t -> inf` converges to the targets on
    /// the span of the kernel.
    pub fn predict(&self, t: f64) -> Result<Array2<f64>> {
        if !t.is_finite() || t < 0.0 {
            return Err(Error::config("time must be finite and non-negative"));
        }
        // Q exp(-eta L t) Q^T (f0 - Y) + Y, scaling rows in the eigenbasis.
        let mut resid = self.eigvecs.t().dot(&(&self.f0 - &self.y));
        for (i, mut row) in resid.outer_iter_mut().enumerate() {
            row *= (-self.eta * self.eigvals[i] * t).exp();
        }
        Ok(&self.eigvecs.dot(&resid) + &self.y)
    }
}

/// Outputs of the linearized flow at time `t`.
pub fn linearized_predict(sol: &LinearizedSolution, t: f64) -> Result<Array2<f64>> {
    sol.predict(t)
}

/// The two learning-rate scales set by a kernel's extreme eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalLr {
    /// Midpoint `(lambda_min + lambda_max) / 2` of the spectrum's extremes,
    /// the scale used to normalize sweep grids.
    pub eigenvalue_midpoint: f64,
    /// Largest stable step size `2 / (lambda_min + lambda_max)` for the
    /// linearized dynamics.
    pub stability_bound: f64,
}

/// Computes both critical learning-rate quantities from a kernel. A kernel
/// with `lambda_min + lambda_max = 0` (in particular the zero matrix)
/// leaves both undefined and is rejected.
pub fn critical_lr(kernel: &KernelMatrix) -> Result<CriticalLr> {
    let eig = linalg::sym_eigvals(&kernel.values)?;
    let lo = eig[0];
    let hi = eig[eig.len() - 1];
    let sum = lo + hi;
    if !sum.is_finite() || sum <= 0.0 {
        return Err(Error::Numerical(format!(
            "extreme eigenvalues sum to {sum:.3e}; critical learning rate undefined"
        )));
    }
    Ok(CriticalLr {
        eigenvalue_midpoint: sum / 2.0,
        stability_bound: 2.0 / sum,
    })
}

/// Smallest logged step whose training accuracy reaches `p`, or `None`
/// when the trace never gets there. Requires `0 < p < 1`.
pub fn tau_measure(trace: &TrainTrace, p: f64) -> Result<Option<usize>> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::config("threshold accuracy must lie strictly in (0, 1)"));
    }
    Ok(trace
        .points
        .iter()
        .find(|pt| pt.train_accuracy >= p)
        .map(|pt| pt.step))
}
