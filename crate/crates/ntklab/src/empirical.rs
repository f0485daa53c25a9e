//! Finite-width tangent kernels and the width-scaling experiment.
//!
//! The empirical tangent kernel of a sampled network is the Gram matrix of
//! its output Jacobian, `J J^T`, indexed by (datum, output) pairs in
//! datum-major order. As widths grow it concentrates around the analytic
//! kernel, and [`width_scaling_study`] measures the rates: how far weights,
//! parameters, and the kernel itself move during training, as log-log
//! slopes against width.

use ndarray::Array2;

use crate::analytic::{KernelKind, KernelMatrix};
use crate::config::{ArchKind, InitFamily, NetworkConfig};
use crate::data::Dataset;
use crate::dynamics::{self, TrainOptions};
use crate::error::{Error, Result};
use crate::network::{self, InputBatch, DEFAULT_JACOBIAN_LIMIT_BYTES};
use crate::sampler::{sample_params, ParamSet};

/// Tangent kernel of a finite network at its current parameters: the
/// `(D * n_L)` square Gram matrix of the output Jacobian.
pub fn empirical_ntk(params: &ParamSet, inputs: &InputBatch) -> Result<KernelMatrix> {
    empirical_ntk_with_limit(params, inputs, DEFAULT_JACOBIAN_LIMIT_BYTES)
}

/// As [`empirical_ntk`] with an explicit Jacobian memory ceiling.
pub fn empirical_ntk_with_limit(
    params: &ParamSet,
    inputs: &InputBatch,
    max_bytes: usize,
) -> Result<KernelMatrix> {
    let j = network::jacobian_with_limit(params, inputs, max_bytes)?;
    let values = j.values.dot(&j.values.t());
    Ok(KernelMatrix {
        values,
        layer: params.config.depth(),
        kind: KernelKind::Ntk,
    })
}

/// Frobenius gap between two kernels. `relative` divides by the norm of
/// the second argument and is `None` when that norm vanishes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelDistance {
    pub absolute: f64,
    pub relative: Option<f64>,
}

pub fn kernel_distance(a: &KernelMatrix, b: &KernelMatrix) -> Result<KernelDistance> {
    if a.values.dim() != b.values.dim() {
        return Err(Error::shape(format!(
            "kernel dims {:?} vs {:?}",
            a.values.dim(),
            b.values.dim()
        )));
    }
    let absolute = (&a.values - &b.values).mapv(|v| v * v).sum().sqrt();
    let scale = b.fro_norm();
    let relative = (scale > 0.0).then(|| absolute / scale);
    Ok(KernelDistance { absolute, relative })
}

/// Collapses a `(D * n_outputs)` square kernel to `D` square by averaging
/// the diagonal output blocks: `out[i, j] = mean_o K[(i, o), (j, o)]`.
/// For kernels close to `K_base (x) I` this recovers `K_base` while
/// discarding the off-diagonal output blocks.
pub fn block_trace_average(k: &KernelMatrix, n_outputs: usize) -> Result<KernelMatrix> {
    let dim = k.dim();
    if n_outputs == 0 || dim % n_outputs != 0 {
        return Err(Error::shape(format!(
            "kernel dim {dim} is not a multiple of {n_outputs} outputs"
        )));
    }
    let d = dim / n_outputs;
    let values = Array2::from_shape_fn((d, d), |(i, j)| {
        (0..n_outputs)
            .map(|o| k.values[[i * n_outputs + o, j * n_outputs + o]])
            .sum::<f64>()
            / n_outputs as f64
    });
    Ok(KernelMatrix {
        values,
        layer: k.layer,
        kind: k.kind,
    })
}

/// Ordinary least squares in log-log coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; zero for a two-point fit, where the
    /// residual degrees of freedom vanish.
    pub std_error: f64,
}

/// Fits `ln y = intercept + slope * ln x` by least squares. Needs at least
/// two points and strictly positive, finite coordinates.
pub fn fit_loglog_slope(x: &[f64], y: &[f64]) -> Result<LogLogFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::config(
            "log-log fit needs matching x and y with at least two points",
        ));
    }
    if x.iter().chain(y).any(|&v| !(v.is_finite() && v > 0.0)) {
        return Err(Error::Numerical(
            "log-log fit needs strictly positive finite values".into(),
        ));
    }
    let m = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxx: f64 = lx.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Numerical("log-log fit needs distinct x values".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let std_error = if x.len() == 2 {
        0.0
    } else {
        let rss: f64 = lx
            .iter()
            .zip(&ly)
            .map(|(a, b)| {
                let r = b - (intercept + slope * a);
                r * r
            })
            .sum();
        (rss / (m - 2.0) / sxx).sqrt()
    };
    Ok(LogLogFit {
        slope,
        intercept,
        std_error,
    })
}

/// One (width, seed) cell of the scaling experiment.
#[derive(Debug, Clone)]
pub struct ScalingRecord {
    pub width: usize,
    pub seed: u64,
    pub init: InitFamily,
    /// Relative Frobenius weight change per layer, `1 ..= L`.
    pub weight_change: Vec<f64>,
    /// Relative Frobenius change of the empirical tangent kernel over
    /// training.
    pub ntk_change: f64,
    /// `||theta_T - theta_0||_2 / sqrt(width)`.
    pub param_distance: f64,
    /// Training hit a non-finite loss; the movement fields are from the
    /// truncated run and the record is excluded from the fits.
    pub diverged: bool,
}

/// Per-quantity log-log slopes against width, fitted to seed means.
#[derive(Debug, Clone)]
pub struct ScalingSlopes {
    pub weight_change: Vec<LogLogFit>,
    pub ntk_change: LogLogFit,
    pub param_distance: LogLogFit,
}

#[derive(Debug, Clone)]
pub struct ScalingStudy {
    pub records: Vec<ScalingRecord>,
    pub slopes: ScalingSlopes,
}

/// Trains one fresh network per (width, seed) pair and fits how far the
/// weights, the parameters, and the tangent kernel move, as power laws in
/// width. The hidden widths of `base` are replaced by each entry of
/// `widths`; `opts.seed` is overridden by the per-record seed so batch
/// order and initialization vary together.
pub fn width_scaling_study(
    base: &NetworkConfig,
    widths: &[usize],
    seeds: &[u64],
    data: &Dataset,
    opts: &TrainOptions,
) -> Result<ScalingStudy> {
    let records = scaling_records(base, widths, seeds, data, opts)?;
    let slopes = fit_scaling_slopes(&records, base.depth())?;
    Ok(ScalingStudy { records, slopes })
}

/// The measurement half of [`width_scaling_study`]: every (width, seed)
/// cell is trained and recorded, divergent cells flagged rather than
/// dropped, so callers can report partial results before fitting.
pub fn scaling_records(
    base: &NetworkConfig,
    widths: &[usize],
    seeds: &[u64],
    data: &Dataset,
    opts: &TrainOptions,
) -> Result<Vec<ScalingRecord>> {
    if widths.len() < 2 || widths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(
            "need at least two strictly increasing widths",
        ));
    }
    if seeds.is_empty() {
        return Err(Error::config("need at least one seed"));
    }
    let mut records = Vec::with_capacity(widths.len() * seeds.len());
    for &width in widths {
        let cfg = base.with_hidden_width(width)?;
        for &seed in seeds {
            let params = sample_params(&cfg, seed)?;
            let theta0 = empirical_ntk(&params, &data.inputs)?;
            let mut run_opts = opts.clone();
            run_opts.seed = seed;
            let (trace, finals) = dynamics::train(&params, data, None, &run_opts)?;
            let theta1 = empirical_ntk(&finals, &data.inputs)?;
            let ntk_change = kernel_distance(&theta1, &theta0)?
                .relative
                .unwrap_or(f64::NAN);
            records.push(ScalingRecord {
                width,
                seed,
                init: cfg.init,
                weight_change: finals.relative_weight_change(&params),
                ntk_change,
                param_distance: params.l2_distance(&finals) / (width as f64).sqrt(),
                diverged: trace.diverged,
            });
        }
    }
    Ok(records)
}

/// The fitting half of [`width_scaling_study`]: one point per width (the
/// mean over converged seeds), fitted as a power law per quantity. Errors
/// when fewer than two widths have any converged cell.
pub fn fit_scaling_slopes(records: &[ScalingRecord], depth: usize) -> Result<ScalingSlopes> {
    let mut widths: Vec<usize> = records.iter().map(|r| r.width).collect();
    widths.sort_unstable();
    widths.dedup();

    let mut xs = Vec::new();
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); depth];
    let mut ntk_means = Vec::new();
    let mut dist_means = Vec::new();
    for &width in &widths {
        let cell: Vec<&ScalingRecord> = records
            .iter()
            .filter(|r| r.width == width && !r.diverged)
            .collect();
        if cell.is_empty() {
            continue;
        }
        let m = cell.len() as f64;
        xs.push(width as f64);
        for l in 0..depth {
            per_layer[l].push(cell.iter().map(|r| r.weight_change[l]).sum::<f64>() / m);
        }
        ntk_means.push(cell.iter().map(|r| r.ntk_change).sum::<f64>() / m);
        dist_means.push(cell.iter().map(|r| r.param_distance).sum::<f64>() / m);
    }
    if xs.len() < 2 {
        return Err(Error::Numerical(
            "fewer than two widths finished training without divergence".into(),
        ));
    }
    Ok(ScalingSlopes {
        weight_change: per_layer
            .iter()
            .map(|ys| fit_loglog_slope(&xs, ys))
            .collect::<Result<_>>()?,
        ntk_change: fit_loglog_slope(&xs, &ntk_means)?,
        param_distance: fit_loglog_slope(&xs, &dist_means)?,
    })
}

/// Mean relative distance from the empirical to the analytic tangent
/// kernel at one width.
#[derive(Debug, Clone)]
pub struct ConvergencePoint {
    pub width: usize,
    /// Per-seed relative Frobenius distances.
    pub values: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
}

/// Measures `||hat Theta - Theta||_F / ||Theta||_F` at initialization for
/// each width over fresh seeds. Multi-output kernels are collapsed with
/// [`block_trace_average`] before comparing against the single-output
/// analytic kernel.
pub fn width_convergence(
    base: &NetworkConfig,
    widths: &[usize],
    seeds: &[u64],
    inputs: &InputBatch,
) -> Result<Vec<ConvergencePoint>> {
    if widths.is_empty() || seeds.is_empty() {
        return Err(Error::config("need at least one width and one seed"));
    }
    let n_l = base.output_dim();
    let analytic = match base.arch {
        ArchKind::Fcn => {
            let x = inputs
                .flat()
                .ok_or_else(|| Error::shape("dense network needs flat inputs"))?;
            crate::analytic::ntk_fcn(base, x)?
        }
        ArchKind::Cnn1d { .. } => {
            let x = inputs
                .spatial()
                .ok_or_else(|| Error::shape("convolutional network needs spatial inputs"))?;
            crate::analytic::ntk_cnn(base, x)?
        }
    };
    let mut out = Vec::with_capacity(widths.len());
    for &width in widths {
        let cfg = base.with_hidden_width(width)?;
        let mut values = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let params = sample_params(&cfg, seed)?;
            let hat = empirical_ntk(&params, inputs)?;
            let hat = block_trace_average(&hat, n_l)?;
            let d = kernel_distance(&hat, &analytic)?;
            values.push(d.relative.ok_or_else(|| {
                Error::Numerical("analytic kernel has zero norm".into())
            })?);
        }
        let m = values.len() as f64;
        let mean = values.iter().sum::<f64>() / m;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (m - 1.0).max(1.0);
        out.push(ConvergencePoint {
            width,
            values,
            mean,
            std_error: (var / m).sqrt(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::Activation;
    use crate::config::Parameterization;
    use crate::data::{self, SyntheticKind};
    use ndarray::array;

    fn blobs(d: usize, n0: usize, seed: u64) -> Dataset {
        data::synthetic(d, n0, 2, seed, SyntheticKind::GaussianBlobs { separation: 2.0 })
            .unwrap()
    }

    fn fcn(widths: &[usize], act: Activation, init: InitFamily) -> NetworkConfig {
        NetworkConfig::fcn(
            widths.to_vec(),
            act,
            1.0,
            0.1,
            init,
            Parameterization::Ntk,
        )
        .unwrap()
    }

    // A single affine layer has a parameter-independent tangent kernel:
    // Theta[i, j] = (sigma_w^2 / n_0) <x_i, x_j> + sigma_b^2 exactly.
    #[test]
    fn single_layer_kernel_is_exact_and_seed_independent() {
        let cfg = fcn(&[3, 1], Activation::Identity, InitFamily::Gaussian);
        let data = blobs(5, 3, 7);
        let x = data.inputs.flat().unwrap().to_owned();
        let expect = &x.dot(&x.t()) * (1.0 / 3.0) + 0.1;
        for seed in [1, 2] {
            let params = sample_params(&cfg, seed).unwrap();
            let k = empirical_ntk(&params, &data.inputs).unwrap();
            let gap = (&k.values - &expect).mapv(f64::abs).sum();
            assert!(gap < 1e-12, "seed {seed}: gap {gap}");
        }
        let analytic = crate::analytic::ntk_fcn(&cfg, &x).unwrap();
        let params = sample_params(&cfg, 3).unwrap();
        let k = empirical_ntk(&params, &data.inputs).unwrap();
        assert!(kernel_distance(&k, &analytic).unwrap().absolute < 1e-12);
    }

    #[test]
    fn empirical_kernel_is_symmetric_positive_and_deterministic() {
        let cfg = fcn(&[4, 24, 24, 3], Activation::Tanh, InitFamily::Orthogonal);
        let data = blobs(6, 4, 11);
        let params = sample_params(&cfg, 5).unwrap();
        let a = empirical_ntk(&params, &data.inputs).unwrap();
        assert_eq!(a.dim(), 18);
        a.check_valid().unwrap();
        let b = empirical_ntk(&params, &data.inputs).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn kernel_memory_ceiling_is_enforced() {
        let cfg = fcn(&[4, 24, 2], Activation::Relu, InitFamily::Gaussian);
        let data = blobs(5, 4, 13);
        let params = sample_params(&cfg, 1).unwrap();
        let err = empirical_ntk_with_limit(&params, &data.inputs, 64).unwrap_err();
        assert!(matches!(err, Error::Memory(_)));
    }

    fn plain(values: Array2<f64>) -> KernelMatrix {
        KernelMatrix {
            values,
            layer: 1,
            kind: KernelKind::Ntk,
        }
    }

    #[test]
    fn kernel_distance_examples() {
        let b = plain(array![[3.0, 0.0], [0.0, 0.0]]);
        let a = plain(&b.values * 2.0);
        let d = kernel_distance(&a, &b).unwrap();
        assert!((d.absolute - 3.0).abs() < 1e-15);
        assert!((d.relative.unwrap() - 1.0).abs() < 1e-15);

        let same = kernel_distance(&b, &b).unwrap();
        assert_eq!(same.absolute, 0.0);
        assert_eq!(same.relative, Some(0.0));

        let zero = plain(Array2::zeros((2, 2)));
        let dz = kernel_distance(&a, &zero).unwrap();
        assert_eq!(dz.relative, None);
        assert!(dz.absolute > 0.0);

        let wide = plain(Array2::zeros((3, 3)));
        assert!(kernel_distance(&a, &wide).is_err());
    }

    #[test]
    fn block_trace_average_recovers_the_base_kernel() {
        // K = base (x) I_2 in datum-major (datum, output) indexing.
        let base = array![[2.0, 0.5], [0.5, 1.0]];
        let n_out = 2;
        let mut k = Array2::zeros((4, 4));
        for i in 0..2 {
            for j in 0..2 {
                for o in 0..n_out {
                    k[[i * n_out + o, j * n_out + o]] = base[[i, j]];
                }
            }
        }
        let avg = block_trace_average(&plain(k), n_out).unwrap();
        assert!((&avg.values - &base).mapv(f64::abs).sum() < 1e-15);
        assert!(block_trace_average(&avg, 3).is_err());
    }

    #[test]
    fn loglog_fit_recovers_exact_power_laws() {
        let x = [16.0, 64.0, 256.0, 1024.0];
        let y: Vec<f64> = x.iter().map(|&v| 3.0 * f64::powf(v, -0.5)).collect();
        let fit = fit_loglog_slope(&x, &y).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!((fit.intercept - 3.0f64.ln()).abs() < 1e-12);
        assert!(fit.std_error < 1e-12);

        let two = fit_loglog_slope(&x[..2], &y[..2]).unwrap();
        assert!((two.slope + 0.5).abs() < 1e-12);
        assert_eq!(two.std_error, 0.0);

        assert!(fit_loglog_slope(&[1.0], &[1.0]).is_err());
        assert!(fit_loglog_slope(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(fit_loglog_slope(&[1.0, 2.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn empirical_kernel_concentrates_with_width() {
        let base = fcn(&[4, 8, 8, 1], Activation::Erf, InitFamily::Gaussian);
        let data = blobs(6, 4, 17);
        let pts =
            width_convergence(&base, &[32, 256], &[1, 2, 3], &data.inputs).unwrap();
        assert!(pts[1].mean < pts[0].mean * 0.6, "{} vs {}", pts[1].mean, pts[0].mean);
    }

    #[test]
    fn scaling_study_shapes_and_movement() {
        let base = fcn(&[4, 8, 8, 1], Activation::Tanh, InitFamily::Gaussian);
        let data = blobs(6, 4, 19);
        let opts = TrainOptions::new(
            dynamics::Optimizer::Gd,
            0.05,
            20,
            network::Loss::Mse,
            0,
        );
        let study =
            width_scaling_study(&base, &[16, 64, 256], &[0, 1], &data, &opts).unwrap();
        assert_eq!(study.records.len(), 6);
        assert_eq!(study.slopes.weight_change.len(), 3);
        for r in &study.records {
            assert!(!r.diverged);
            assert_eq!(r.weight_change.len(), 3);
            assert!(r.weight_change.iter().all(|&v| v > 0.0));
            assert!(r.ntk_change > 0.0);
            assert!(r.param_distance > 0.0);
        }
        // Wider networks move relatively less in every tracked quantity.
        assert!(study.slopes.ntk_change.slope < 0.0);
        assert!(study.slopes.param_distance.slope < 0.0);
        for f in &study.slopes.weight_change {
            assert!(f.slope < 0.0);
        }
    }

    #[test]
    fn scaling_study_rejects_bad_grids_and_all_divergent_runs() {
        let base = fcn(&[4, 8, 8, 1], Activation::Tanh, InitFamily::Gaussian);
        let data = blobs(6, 4, 23);
        let opts = TrainOptions::new(
            dynamics::Optimizer::Gd,
            0.05,
            5,
            network::Loss::Mse,
            0,
        );
        assert!(width_scaling_study(&base, &[32], &[0], &data, &opts).is_err());
        assert!(width_scaling_study(&base, &[32, 16], &[0], &data, &opts).is_err());
        assert!(width_scaling_study(&base, &[16, 32], &[], &data, &opts).is_err());

        let mut hot = opts.clone();
        hot.eta = 1e9;
        hot.steps = 50;
        let err = width_scaling_study(&base, &[16, 32], &[0], &data, &hot).unwrap_err();
        assert!(err.to_string().contains("divergence"));
    }
}
