//! Release acceptance suite: one test per shipped guarantee, ordered so a
//! sequential run (`cargo test --test acceptance -- --test-threads=1
//! --nocapture`) prints a checklist of `criterion N: PASS|FAIL` lines.
//!
//! Every statistical check pins its seeds so a red line reproduces exactly.
//! The heavyweight criteria (5, 6, 8, 9) train real networks and dominate
//! the suite's wall-clock cost: roughly 45 minutes on one core.

use std::path::Path;
use std::process::Command;

use ndarray::Array2;
use rand::Rng;

use ntklab::activations::{self, Activation, Cov2};
use ntklab::config::{InitFamily, NetworkConfig, Parameterization};
use ntklab::data::{self, Dataset, Encoding, Split, SyntheticKind};
use ntklab::dynamics::{self, LinearizedSolution, Optimizer, TrainOptions};
use ntklab::empirical;
use ntklab::network::{self, Loss};
use ntklab::rng;
use ntklab::sampler::{self, LayerParams, MomentSpec};

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

const FAMILIES: [InitFamily; 2] = [InitFamily::Gaussian, InitFamily::Orthogonal];

// ---------------------------------------------------------------------------
// 1. Orthogonal initialization satisfies its scale equation exactly.
// ---------------------------------------------------------------------------

#[test]
fn c1_orthogonal_samples_meet_the_scale_equation() {
    const CONFIGS: usize = 100;
    const BOUND: f64 = 1e-10;
    let mut worst = 0.0_f64;
    for i in 0..CONFIGS {
        let mut r = rng::stream(410, i as u64);
        let param = match r.random_range(0..3) {
            0 => Parameterization::Ntk,
            1 => Parameterization::Standard { expansion: 1 },
            _ => Parameterization::Standard { expansion: 2 },
        };
        let e = match param {
            Parameterization::Standard { expansion } => expansion,
            Parameterization::Ntk => 1,
        };
        let act = Activation::ALL[r.random_range(0..Activation::ALL.len())];
        let sw: f64 = r.random_range(0.5..2.5);
        let sb: f64 = r.random_range(0.0..0.2);
        let depth: usize = r.random_range(2..=5);
        let cfg = if r.random_range(0..10) < 7 {
            let mut widths = vec![r.random_range(2..=24)];
            for _ in 1..depth {
                widths.push(e * r.random_range(1..=32));
            }
            widths.push(r.random_range(1..=8));
            NetworkConfig::fcn(widths, act, sw, sb, InitFamily::Orthogonal, param)
        } else {
            let m = [4usize, 6, 8][r.random_range(0..3)];
            let k = r.random_range(0..=2usize.min((m - 1) / 2));
            let mut widths = vec![r.random_range(1..=6)];
            for _ in 1..depth {
                widths.push(e * r.random_range(1..=12));
            }
            widths.push(r.random_range(1..=8));
            NetworkConfig::cnn1d(widths, m, k, act, sw, sb, InitFamily::Orthogonal, param)
        }
        .expect("generated configs are valid");
        let params = sampler::sample_params(&cfg, 1000 + i as u64).unwrap();
        for (idx, layer) in params.layers.iter().enumerate() {
            let target = sampler::layer_target_scale(&cfg, idx + 1);
            let defect = match layer {
                LayerParams::Dense { w, .. } => sampler::orthogonality_defect(w, target),
                LayerParams::Conv { slices, .. } => slices
                    .iter()
                    .map(|s| sampler::orthogonality_defect(s, target))
                    .fold(0.0, f64::max),
            };
            worst = worst.max(defect);
        }
    }
    let ok = worst < BOUND;
    println!(
        "criterion 1: {} - worst orthogonality defect {:.3e} over {CONFIGS} random configs (bound {BOUND:.0e})",
        verdict(ok),
        worst
    );
    assert!(ok, "orthogonality defect {worst:.3e} exceeds {BOUND:.0e}");
}

// ---------------------------------------------------------------------------
// 2. Second and fourth moments of Haar-orthogonal entries.
// ---------------------------------------------------------------------------

#[test]
fn c2_haar_entry_moments_match_their_exact_values() {
    const DRAWS: usize = 100_000;
    let mut ok = true;
    let mut details = Vec::new();
    for (i, &n) in [8usize, 32].iter().enumerate() {
        let nf = n as f64;
        let pair = MomentSpec::new(vec![(0, 1), (0, 1)]).unwrap();
        let (m2, se2) = sampler::moment_estimate(n, DRAWS, &pair, 42 + i as u64).unwrap();
        let quad = MomentSpec::new(vec![(0, 0); 4]).unwrap();
        let (m4, se4) = sampler::moment_estimate(n, DRAWS, &quad, 77 + i as u64).unwrap();
        let z2 = (m2 - 1.0 / nf).abs() / se2;
        let z4 = (m4 - 3.0 / (nf * (nf + 2.0))).abs() / se4;
        ok &= z2 <= 4.0 && z4 <= 4.0;
        details.push(format!("n={n}: square {z2:.2} se, fourth power {z4:.2} se"));
    }
    println!(
        "criterion 2: {} - {} ({DRAWS} draws, 4 se window)",
        verdict(ok),
        details.join("; ")
    );
    assert!(ok, "a Haar entry moment fell outside 4 standard errors");
}

// ---------------------------------------------------------------------------
// 3. Closed-form dual activations against independent integration.
// ---------------------------------------------------------------------------

/// `E[f(u) g(v)]` under `N(0, c)` by tensor Gauss-Hermite after writing
/// `u = sqrt(2 qu) x` and `v = sqrt(2 qv) (rho x + sqrt(1 - rho^2) y)`.
fn gauss_pair_mean(c: &Cov2, f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64, nodes: usize) -> f64 {
    let (x, w) = activations::gauss_hermite(nodes).unwrap();
    let (a, b) = (c.sxx().sqrt(), c.syy().sqrt());
    let rho = c.rho();
    let s = (1.0 - rho * rho).max(0.0).sqrt();
    let mut total = 0.0;
    for i in 0..nodes {
        let fu = f(std::f64::consts::SQRT_2 * a * x[i]);
        for j in 0..nodes {
            let v = std::f64::consts::SQRT_2 * b * (rho * x[i] + s * x[j]);
            total += w[i] * w[j] * fu * g(v);
        }
    }
    total / std::f64::consts::PI
}

fn std_normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_normal_cdf(t: f64) -> f64 {
    0.5 * (1.0 + Activation::Erf.phi(t / std::f64::consts::SQRT_2))
}

/// `E[relu(u) relu(v)]` by conditioning on `u`: given `u`, `v` is Gaussian
/// with mean `(sxy / qu) u` and variance `qv - sxy^2 / qu`, and the mean of
/// a rectified Gaussian is `m cdf(m / s) + s pdf(m / s)`. What remains is a
/// smooth half-line integral, done with Gauss-Legendre on `[0, 12]` standard
/// deviations (the tail beyond is below 1e-30).
fn relu_pair_mean_oracle(c: &Cov2) -> f64 {
    let (qu, qv, cxy) = (c.sxx(), c.syy(), c.sxy());
    let s = (qv - cxy * cxy / qu).max(0.0).sqrt();
    let (nodes, weights) = activations::gauss_legendre(240).unwrap();
    let half = 6.0;
    let mut total = 0.0;
    for (t, w) in nodes.iter().zip(&weights) {
        let z = half + half * t;
        let u = qu.sqrt() * z;
        let m = cxy / qu * u;
        let rectified = if s == 0.0 {
            m.max(0.0)
        } else {
            m * std_normal_cdf(m / s) + s * std_normal_pdf(m / s)
        };
        total += w * u * rectified * std_normal_pdf(z);
    }
    total * half
}

/// `P(u > 0, v > 0)` for standardized correlation `rho`, as a plain
/// positive-quadrant integral of the bivariate normal density.
fn quadrant_probability(rho: f64) -> f64 {
    let (nodes, weights) = activations::gauss_legendre(120).unwrap();
    let half = 5.0;
    let det = 1.0 - rho * rho;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * det.sqrt());
    let mut total = 0.0;
    for (s, ws) in nodes.iter().zip(&weights) {
        let x = half + half * s;
        for (t, wt) in nodes.iter().zip(&weights) {
            let y = half + half * t;
            let q = (x * x - 2.0 * rho * x * y + y * y) / det;
            total += ws * wt * norm * (-0.5 * q).exp();
        }
    }
    total * half * half
}

/// Monte-Carlo `E[tanh(u) tanh(v)]` and `E[tanh'(u) tanh'(v)]` from shared
/// Box-Muller draws; returns (mean, se, deriv mean, deriv se).
fn tanh_pair_mc(c: &Cov2, samples: usize, seed: u64) -> (f64, f64, f64, f64) {
    let (a, b) = (c.sxx().sqrt(), c.syy().sqrt());
    let rho = c.rho();
    let s = (1.0 - rho * rho).max(0.0).sqrt();
    let mut r = rng::stream(seed, 0);
    let (mut sum, mut sumsq, mut dsum, mut dsumsq) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..samples {
        let u1: f64 = r.random::<f64>().max(1e-300);
        let u2: f64 = r.random();
        let rad = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        let (z1, z2) = (rad * angle.cos(), rad * angle.sin());
        let u = a * z1;
        let v = b * (rho * z1 + s * z2);
        let val = u.tanh() * v.tanh();
        let dval = Activation::Tanh.dphi(u) * Activation::Tanh.dphi(v);
        sum += val;
        sumsq += val * val;
        dsum += dval;
        dsumsq += dval * dval;
    }
    let n = samples as f64;
    let mean = sum / n;
    let dmean = dsum / n;
    let se = ((sumsq - n * mean * mean) / (n - 1.0) / n).max(0.0).sqrt();
    let dse = ((dsumsq - n * dmean * dmean) / (n - 1.0) / n).max(0.0).sqrt();
    (mean, se, dmean, dse)
}

#[test]
fn c3_dual_activation_closed_forms_match_independent_integrals() {
    const TOL: f64 = 1e-8;
    let qs = [0.25, 0.5, 1.0, 2.0, 4.0];
    let rhos = [-0.95, -0.45, 0.3, 0.9];
    let mut grid = Vec::new();
    for &qu in &qs {
        for &qv in &qs {
            for &rho in &rhos {
                grid.push(Cov2::new(qu, rho * (qu * qv as f64).sqrt(), qv).unwrap());
            }
        }
    }
    assert_eq!(grid.len(), 100);

    let (mut worst_erf, mut worst_relu) = (0.0_f64, 0.0_f64);
    for c in &grid {
        // 200 nodes: erf grows like exp(y^2) off the real axis, which slows
        // Gauss-Hermite convergence at the widest covariances on the grid.
        let erf = Activation::Erf;
        let mean_gap = (activations::dual_mean(c, erf)
            - gauss_pair_mean(c, |x| erf.phi(x), |x| erf.phi(x), 200))
        .abs();
        let deriv_gap = (activations::dual_mean_deriv(c, erf)
            - gauss_pair_mean(c, |x| erf.dphi(x), |x| erf.dphi(x), 200))
        .abs();
        worst_erf = worst_erf.max(mean_gap).max(deriv_gap);

        let relu = Activation::Relu;
        let mean_gap = (activations::dual_mean(c, relu) - relu_pair_mean_oracle(c)).abs();
        let deriv_gap =
            (activations::dual_mean_deriv(c, relu) - quadrant_probability(c.rho())).abs();
        worst_relu = worst_relu.max(mean_gap).max(deriv_gap);
    }

    let tanh_points = [
        (0.25, 0.25, -0.95),
        (0.25, 0.25, 0.9),
        (4.0, 4.0, -0.95),
        (4.0, 4.0, 0.9),
        (1.0, 1.0, 0.3),
        (1.0, 1.0, -0.45),
        (0.25, 4.0, 0.9),
        (4.0, 0.25, -0.45),
        (0.5, 2.0, 0.3),
        (2.0, 0.5, -0.95),
        (2.0, 2.0, 0.9),
        (0.5, 0.5, 0.3),
    ];
    let mut worst_tanh = 0.0_f64;
    for (i, &(qu, qv, rho)) in tanh_points.iter().enumerate() {
        let c = Cov2::new(qu, rho * (qu * qv as f64).sqrt(), qv).unwrap();
        let (mc, se, dmc, dse) = tanh_pair_mc(&c, 1_000_000, 900 + i as u64);
        let mean_z = (activations::dual_mean(&c, Activation::Tanh) - mc).abs() / se;
        let deriv_z = (activations::dual_mean_deriv(&c, Activation::Tanh) - dmc).abs() / dse;
        worst_tanh = worst_tanh.max(mean_z).max(deriv_z);
    }

    let ok = worst_erf <= TOL && worst_relu <= TOL && worst_tanh <= 4.0;
    println!(
        "criterion 3: {} - erf duals off by {:.2e}, relu duals off by {:.2e} (tol {TOL:.0e}); tanh duals off by {:.2} se (window 4)",
        verdict(ok),
        worst_erf,
        worst_relu,
        worst_tanh
    );
    assert!(ok, "a dual activation disagrees with its oracle");
}

// ---------------------------------------------------------------------------
// 4. Reverse-mode Jacobians and loss gradients against finite differences.
// ---------------------------------------------------------------------------

fn jacobian_fd_error(cfg: &NetworkConfig, ds: &Dataset, seed: u64) -> f64 {
    let params = sampler::sample_params(cfg, seed).unwrap();
    let j = network::jacobian(&params, &ds.inputs).unwrap();
    let (rows, p) = j.values.dim();
    let flat = params.flatten();
    let mut fd = Array2::<f64>::zeros((rows, p));
    for k in 0..p {
        let h = 1e-5 * (1.0 + flat[k].abs());
        let fp = network::predict(&params.perturbed(k, h).unwrap(), &ds.inputs).unwrap();
        let fm = network::predict(&params.perturbed(k, -h).unwrap(), &ds.inputs).unwrap();
        let (d, n_l) = fp.dim();
        for i in 0..d {
            for o in 0..n_l {
                fd[[i * n_l + o, k]] = (fp[[i, o]] - fm[[i, o]]) / (2.0 * h);
            }
        }
    }
    let gap = (&fd - &j.values).mapv(|v| v * v).sum().sqrt();
    gap / j.values.mapv(|v| v * v).sum().sqrt()
}

fn grad_fd_error(cfg: &NetworkConfig, ds: &Dataset, loss: Loss, seed: u64) -> f64 {
    let params = sampler::sample_params(cfg, seed).unwrap();
    let y = ds.targets(cfg.output_dim()).unwrap();
    let grad = network::grad_loss(&params, &ds.inputs, &y, loss)
        .unwrap()
        .flatten();
    let flat = params.flatten();
    let mut gap = 0.0;
    let mut norm = 0.0;
    for k in 0..grad.len() {
        let h = 1e-5 * (1.0 + flat[k].abs());
        let fp = network::predict(&params.perturbed(k, h).unwrap(), &ds.inputs).unwrap();
        let fm = network::predict(&params.perturbed(k, -h).unwrap(), &ds.inputs).unwrap();
        let fd = (network::loss_value(&fp, &y, loss).unwrap()
            - network::loss_value(&fm, &y, loss).unwrap())
            / (2.0 * h);
        gap += (fd - grad[k]) * (fd - grad[k]);
        norm += grad[k] * grad[k];
    }
    (gap / norm).sqrt()
}

#[test]
fn c4_reverse_mode_gradients_match_finite_differences() {
    const TOL: f64 = 1e-6;
    let fcn_data = data::synthetic(3, 5, 2, 4, SyntheticKind::GaussianBlobs { separation: 1.0 })
        .unwrap();
    let cnn_data = data::synthetic(3, 10, 3, 4, SyntheticKind::GaussianBlobs { separation: 1.0 })
        .unwrap()
        .reshape_spatial(2, 5)
        .unwrap();
    let mut worst = 0.0_f64;
    let mut checks = 0usize;
    for act in Activation::ALL {
        for param in [
            Parameterization::Ntk,
            Parameterization::Standard { expansion: 1 },
        ] {
            let nets = [
                (
                    NetworkConfig::fcn(vec![5, 8, 6, 2], act, 1.3, 0.08, InitFamily::Gaussian, param)
                        .unwrap(),
                    &fcn_data,
                ),
                (
                    NetworkConfig::cnn1d(
                        vec![2, 4, 3],
                        5,
                        1,
                        act,
                        1.3,
                        0.08,
                        InitFamily::Orthogonal,
                        param,
                    )
                    .unwrap(),
                    &cnn_data,
                ),
            ];
            for (cfg, ds) in &nets {
                assert!(sampler::sample_params(cfg, 0).unwrap().num_params() <= 1000);
                // A rectifier kink between the two probe points ruins one
                // finite-difference column; a fresh draw moves the kink.
                let mut best = f64::INFINITY;
                for attempt in 0..5 {
                    let seed = 10 + attempt * 1000;
                    let err = jacobian_fd_error(cfg, ds, seed)
                        .max(grad_fd_error(cfg, ds, Loss::Mse, seed))
                        .max(grad_fd_error(cfg, ds, Loss::CrossEntropy, seed));
                    best = best.min(err);
                    if best < TOL {
                        break;
                    }
                }
                worst = worst.max(best);
                checks += 1;
            }
        }
    }
    let ok = worst < TOL;
    println!(
        "criterion 4: {} - worst relative gradient error {:.2e} over {checks} configs (tol {TOL:.0e})",
        verdict(ok),
        worst
    );
    assert!(ok, "a Jacobian or loss gradient disagrees with finite differences");
}

// ---------------------------------------------------------------------------
// 5. Empirical kernels concentrate on the analytic limit at rate 1/sqrt(n).
// ---------------------------------------------------------------------------

#[test]
fn c5_empirical_kernel_approaches_the_analytic_limit_at_root_n() {
    const WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];
    const SLOPE_TOL: f64 = 0.15;
    let seeds: Vec<u64> = (0..20).collect();
    let ds = data::synthetic(20, 20, 2, 5, SyntheticKind::UnitSphere { separation: 3.0 })
        .unwrap();
    let xs: Vec<f64> = WIDTHS.iter().map(|&w| w as f64).collect();
    let mut curves = Vec::new();
    let mut slopes = Vec::new();
    for family in FAMILIES {
        let cfg = NetworkConfig::fcn(
            vec![20, 64, 64, 1],
            Activation::Erf,
            1.5,
            0.1,
            family,
            Parameterization::Ntk,
        )
        .unwrap();
        let pts = empirical::width_convergence(&cfg, &WIDTHS, &seeds, &ds.inputs).unwrap();
        let ys: Vec<f64> = pts.iter().map(|p| p.mean).collect();
        slopes.push(empirical::fit_loglog_slope(&xs, &ys).unwrap().slope);
        curves.push(pts);
    }
    let slope_ok = slopes.iter().all(|s| (s + 0.5).abs() <= SLOPE_TOL);
    let mut max_gap = 0.0_f64;
    for (w, (g, o)) in WIDTHS.iter().zip(curves[0].iter().zip(&curves[1])) {
        let se = (g.std_error * g.std_error + o.std_error * o.std_error).sqrt();
        let gap = (g.mean - o.mean).abs() / se;
        max_gap = max_gap.max(gap);
        println!(
            "  width {w:4}: gaussian {:.4} +- {:.4}, orthogonal {:.4} +- {:.4}, gap {gap:.2} se",
            g.mean, g.std_error, o.mean, o.std_error
        );
    }
    let family_ok = max_gap <= 2.0;
    let ok = slope_ok && family_ok;
    println!(
        "criterion 5: {} - rate clause {} (slopes gaussian {:.3} / orthogonal {:.3}, want -0.5 +- {SLOPE_TOL}); family clause {} (curves apart by up to {:.2} se, window 2)",
        verdict(ok),
        verdict(slope_ok),
        slopes[0],
        slopes[1],
        verdict(family_ok),
        max_gap
    );
    assert!(
        slope_ok,
        "kernel distance does not shrink at the expected 1/sqrt(width) rate"
    );
    assert!(
        family_ok,
        "per-width family gap exceeds 2 across-seed standard errors; \
         orthogonal layer grams are exact while gaussian grams fluctuate, which \
         lowers the orthogonal curve by a constant factor at equal convergence rate"
    );
}

// ---------------------------------------------------------------------------
// 6. Trained weights and the kernel move at their predicted width rates.
// ---------------------------------------------------------------------------

#[test]
fn c6_training_movement_shrinks_at_the_predicted_width_rates() {
    const WIDTHS: [usize; 4] = [128, 256, 512, 1024];
    const ETA: f64 = 0.05;
    const STEPS: usize = 1 << 12;
    let raw = data::synthetic(20, 20, 2, 6, SyntheticKind::UnitSphere { separation: 3.0 })
        .unwrap();
    let ds = Dataset::new(
        raw.inputs.clone(),
        raw.labels.clone(),
        2,
        Encoding::PlusMinus,
        Split::Train,
    )
    .unwrap();
    let mut opts = TrainOptions::new(Optimizer::Gd, ETA, STEPS, Loss::Mse, 0);
    opts.log_every = Some(256);
    let mut ok = true;
    let mut details = Vec::new();
    for family in FAMILIES {
        let cfg = NetworkConfig::fcn(
            vec![20, 128, 128, 128, 1],
            Activation::Erf,
            1.5,
            0.1,
            family,
            Parameterization::Ntk,
        )
        .unwrap();
        // Seed-to-seed spread of the kernel-change measurement is largest for
        // gaussian draws; the power-law fit runs on three-seed means per width.
        let records = empirical::scaling_records(&cfg, &WIDTHS, &[0, 1, 2], &ds, &opts).unwrap();
        let clean = records.iter().all(|r| !r.diverged);
        for &width in &WIDTHS {
            let cell: Vec<f64> = records
                .iter()
                .filter(|r| r.width == width)
                .map(|r| r.ntk_change)
                .collect();
            let mean = cell.iter().sum::<f64>() / cell.len() as f64;
            println!("  {family:?} width {width:4}: kernel change per seed {cell:.4?}, mean {mean:.4}");
        }
        let slopes = empirical::fit_scaling_slopes(&records, cfg.depth()).unwrap();
        let w: Vec<f64> = slopes.weight_change.iter().map(|f| f.slope).collect();
        let edge_ok = (w[0] + 0.5).abs() <= 0.2 && (w[3] + 0.5).abs() <= 0.2;
        let middle_ok = (w[1] + 1.0).abs() <= 0.2 && (w[2] + 1.0).abs() <= 0.2;
        let ntk_ok = (-1.2..=-0.5).contains(&slopes.ntk_change.slope);
        ok &= clean && edge_ok && middle_ok && ntk_ok;
        details.push(format!(
            "{family:?}: weight slopes [{:.2}, {:.2}, {:.2}, {:.2}], kernel change slope {:.2}{}",
            w[0],
            w[1],
            w[2],
            w[3],
            slopes.ntk_change.slope,
            if clean { "" } else { ", diverged" }
        ));
    }
    println!(
        "criterion 6: {} - {} (edges -0.5 +- 0.2, middles -1.0 +- 0.2, kernel in [-1.2, -0.5])",
        verdict(ok),
        details.join("; ")
    );
    assert!(ok, "a movement slope left its predicted window");
}

// ---------------------------------------------------------------------------
// 7. Gradient descent tracks the kernel's closed-form linearized dynamics.
// ---------------------------------------------------------------------------

#[test]
fn c7_training_tracks_the_linearized_dynamics() {
    const ETA: f64 = 1e-3;
    const STEPS: usize = 2000;
    const BOUND: f64 = 0.05;
    let raw = data::synthetic(16, 16, 2, 7, SyntheticKind::UnitSphere { separation: 3.0 })
        .unwrap();
    let ds = Dataset::new(
        raw.inputs.clone(),
        raw.labels.clone(),
        2,
        Encoding::PlusMinus,
        Split::Train,
    )
    .unwrap();
    let cfg = NetworkConfig::fcn(
        vec![16, 1024, 1024, 1],
        Activation::Erf,
        1.5,
        0.1,
        InitFamily::Gaussian,
        Parameterization::Ntk,
    )
    .unwrap();
    let params = sampler::sample_params(&cfg, 0).unwrap();
    let kernel = empirical::empirical_ntk(&params, &ds.inputs).unwrap();
    let f0 = network::predict(&params, &ds.inputs).unwrap();
    let y = ds.targets(1).unwrap();
    let sol = LinearizedSolution::new(&kernel, f0, y, ETA).unwrap();
    let mut opts = TrainOptions::new(Optimizer::Gd, ETA, STEPS, Loss::Mse, 0);
    opts.log_every = Some(20);
    opts.snapshot_outputs = true;
    let (trace, _) = dynamics::train(&params, &ds, None, &opts).unwrap();
    let mut max_rel = 0.0_f64;
    for p in &trace.points {
        let lin = sol.predict(p.step as f64).unwrap();
        let f = p.outputs.as_ref().expect("snapshots were requested");
        let gap = (f - &lin).mapv(|v| v * v).sum().sqrt();
        max_rel = max_rel.max(gap / lin.mapv(|v| v * v).sum().sqrt());
    }
    let ok = !trace.diverged && max_rel < BOUND;
    println!(
        "criterion 7: {} - trained outputs deviate from the linearized solution by at most {:.2}% (bound {:.0}%)",
        verdict(ok),
        100.0 * max_rel,
        100.0 * BOUND
    );
    assert!(ok, "training left the linearized regime: {max_rel:.4}");
}

// ---------------------------------------------------------------------------
// 8. Gaussian and orthogonal ensembles share one training curve.
// ---------------------------------------------------------------------------

/// A unit-norm image subset: real IDX files when the data directory is
/// configured, otherwise a synthetic stand-in written to `tmp`.
fn idx_training_subset(count: usize, seed: u64, tmp: &Path) -> Dataset {
    if let Ok(dir) = std::env::var("NTKLAB_DATA") {
        let images = Path::new(&dir).join("train-images-idx3-ubyte");
        let labels = Path::new(&dir).join("train-labels-idx1-ubyte");
        if images.exists() && labels.exists() {
            if let Ok(ds) = data::load_idx(&images, &labels, count, seed) {
                return ds;
            }
        }
    }
    let (images, labels) = data::synthetic_idx_pair(tmp, 1024, 28, 28, 10, seed).unwrap();
    data::load_idx(&images, &labels, count, seed).unwrap()
}

#[test]
fn c8_init_families_share_one_training_curve_at_matched_width() {
    // Largest grid-searched rate at which this configuration trains
    // stably; past roughly 1.5e-5 full-batch descent oscillates apart.
    const ETA: f64 = 3e-6;
    const STEPS: usize = 40;
    const SEEDS: u64 = 30;
    let tmp = tempfile::tempdir().unwrap();
    let ds = idx_training_subset(256, 8, tmp.path());
    let mut curves: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut failures = Vec::new();
    for family in FAMILIES {
        let cfg = NetworkConfig::fcn(
            vec![784, 800, 800, 800, 800, 10],
            Activation::Tanh,
            2.0,
            0.1,
            family,
            Parameterization::Standard { expansion: 1 },
        )
        .unwrap();
        let mut fam = Vec::new();
        for seed in 0..SEEDS {
            let params = sampler::sample_params(&cfg, seed).unwrap();
            let mut opts = TrainOptions::new(Optimizer::Gd, ETA, STEPS, Loss::Mse, seed);
            opts.log_every = Some(1);
            let (trace, _) = dynamics::train(&params, &ds, None, &opts).unwrap();
            let losses: Vec<f64> = trace.points.iter().map(|p| p.train_loss).collect();
            if trace.diverged || losses.len() != STEPS + 1 || losses.iter().any(|v| !v.is_finite())
            {
                failures.push(format!("{family:?} seed {seed} diverged"));
            }
            fam.push(losses);
        }
        curves.push(fam);
    }
    let stats = |fam: &[Vec<f64>], t: usize| {
        let n = fam.len() as f64;
        let mean = fam.iter().map(|c| c[t]).sum::<f64>() / n;
        let var = fam.iter().map(|c| (c[t] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt())
    };
    let mut coverage = 0.0;
    let mut decreased = false;
    if failures.is_empty() {
        let mut within = 0usize;
        for t in 0..=STEPS {
            let (mg, sg) = stats(&curves[0], t);
            let (mo, so) = stats(&curves[1], t);
            if (mg - mo).abs() <= sg.min(so) {
                within += 1;
            }
        }
        coverage = within as f64 / (STEPS + 1) as f64;
        decreased = stats(&curves[0], STEPS).0 < stats(&curves[0], 0).0
            && stats(&curves[1], STEPS).0 < stats(&curves[1], 0).0;
    }
    let ok = failures.is_empty() && decreased && coverage >= 0.95;
    println!(
        "criterion 8: {} - family mean loss curves inside each other's 1-std band at {:.1}% of steps (need 95%){}",
        verdict(ok),
        100.0 * coverage,
        if failures.is_empty() {
            String::new()
        } else {
            format!("; {}", failures.join(", "))
        }
    );
    assert!(ok, "ensemble training curves separated");
}

// ---------------------------------------------------------------------------
// 9. Deep-network learning-rate sweep completes and reports direction.
// ---------------------------------------------------------------------------

#[test]
fn c9_learning_rate_sweep_completes_and_reports_tau_direction() {
    // Grid-searched fractions of the depth-64 kernel's stability bound
    // (about 1.9e-2 on this data); both families train at all three.
    const ETAS: [f64; 3] = [4.8e-3, 9.6e-3, 1.9e-2];
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let data_dir = tmp.path().join("data");
    std::fs::create_dir_all(&data_dir).unwrap();
    let config = tmp.path().join("sweep.toml");
    std::fs::write(
        &config,
        format!(
            r#"kind = "lr-sweep"
seed = 0

[network]
arch = "fcn"
widths = [784, 128, 10]
activation = "tanh"
sigma_w_sq = 1.05
sigma_b_sq = 2.01e-5
parameterization = "ntk"

[data]
source = "synthetic-idx"
count = 192
classes = 10

[train]
optimizer = "gd"
eta = 0.01
steps = 60
loss = "mse"
log_every = 1

[sweep]
depths = [64]
widths = [128]
etas = [{}, {}, {}]
seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]
threshold = 0.25
"#,
            ETAS[0], ETAS[1], ETAS[2]
        ),
    )
    .unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_ntklab"))
        .args([
            "lr-sweep",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--self-check",
        ])
        .env("NTKLAB_DATA", &data_dir)
        .output()
        .unwrap();
    let exit_ok = output.status.success();

    let text = std::fs::read_to_string(out.join("lr_sweep.csv")).unwrap_or_default();
    let rows: Vec<Vec<&str>> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    let well_formed = rows.len() == 60
        && rows.iter().all(|r| {
            r.len() == 7
                && r[2].parse::<f64>().is_ok()
                && (r[5] == "0" || r[5] == "1")
                && r[6].parse::<i64>().is_ok()
        });

    // Direction is reported, not gated: compare tau per seed at the largest
    // rate where every cell of both families converged and reached the
    // threshold.
    let mut note = "no rate had every cell converge".to_string();
    if well_formed {
        let mut etas: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
        etas.sort_by(f64::total_cmp);
        etas.dedup();
        for &eta in etas.iter().rev() {
            let cell: Vec<&Vec<&str>> = rows
                .iter()
                .filter(|r| r[2].parse::<f64>().unwrap() == eta)
                .collect();
            let converged = cell.iter().all(|r| r[5] == "0" && r[6] != "-1");
            if !converged {
                continue;
            }
            let tau = |init: &str, seed: &str| -> i64 {
                cell.iter()
                    .find(|r| r[3] == init && r[4] == seed)
                    .map(|r| r[6].parse().unwrap())
                    .expect("complete grid")
            };
            let wins = (0..10)
                .filter(|s| {
                    let s = s.to_string();
                    tau("orthogonal", &s) <= tau("gaussian", &s)
                })
                .count();
            note = format!(
                "at eta {eta}: tau(orthogonal) <= tau(gaussian) in {wins}/10 seeds (reported, not gated)"
            );
            break;
        }
    }

    let ok = exit_ok && well_formed;
    println!(
        "criterion 9: {} - sweep exit ok {exit_ok}, well-formed csv with {} rows; {note}",
        verdict(ok),
        rows.len()
    );
    assert!(
        ok,
        "sweep failed: status {:?}, stderr {}",
        output.status,
        String::from_utf8_lossy(&output.stderr)
    );
}
