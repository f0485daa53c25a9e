//! The five experiment commands.
//!
//! Each command is a pure function of its description file and seed: cell
//! loops run in a fixed order, statistics use fixed reductions, and floats
//! are formatted deterministically, so rerunning a command reproduces its
//! artifacts byte for byte. Commands that train networks run BOTH weight
//! initialization families side by side regardless of `network.init`, which
//! only seeds the single-family commands.

use std::path::PathBuf;

use anyhow::{bail, Result};

use ntklab::analytic::{self, KernelMatrix};
use ntklab::config::{InitFamily, NetworkConfig};
use ntklab::dynamics::{self, LinearizedSolution};
use ntklab::empirical;
use ntklab::network::{self, InputBatch, Loss};
use ntklab::sampler::sample_params;

use crate::config::{init_name, ExperimentFile};
use crate::output::{fmt_f64, Csv};

pub struct Ctx {
    pub file: ExperimentFile,
}

/// What a command produced: the artifact paths plus a tally of training
/// cells, so the caller can distinguish "nothing diverged" from "everything
/// diverged" when picking the exit code.
pub struct CommandReport {
    pub files: Vec<PathBuf>,
    pub cells: usize,
    pub diverged: usize,
}

impl CommandReport {
    fn untrained(files: Vec<PathBuf>) -> Self {
        CommandReport {
            files,
            cells: 0,
            diverged: 0,
        }
    }
}

const FAMILIES: [InitFamily; 2] = [InitFamily::Gaussian, InitFamily::Orthogonal];

/// Analytic kernels on the configured inputs: the layerwise limiting
/// covariance and the depth-L tangent kernel. Initialization does not enter
/// the infinite-width limit, so flipping `network.init` leaves the artifact
/// byte-identical.
pub fn kernel(ctx: &Ctx) -> Result<CommandReport> {
    let file = &ctx.file;
    let cfg = file.network_config()?;
    let data = file.dataset()?;
    let mut csv = Csv::new("kernels", "i,j,layer,quantity,value").comment(
        "upper triangle of each kernel; nngp = layer covariance, ntk = tangent kernel at the output",
    );
    match &data.inputs {
        InputBatch::Flat(x) => {
            for layer in analytic::nngp_fcn(&cfg, x)? {
                push_matrix(&mut csv, &layer, "nngp");
            }
            push_matrix(&mut csv, &analytic::ntk_fcn(&cfg, x)?, "ntk");
        }
        InputBatch::Spatial(x) => {
            let (_, readout) = analytic::nngp_cnn(&cfg, x)?;
            push_matrix(&mut csv, &readout, "nngp");
            push_matrix(&mut csv, &analytic::ntk_cnn(&cfg, x)?, "ntk");
        }
    }
    let rows = csv.rows();
    let path = csv.write(&file.out_dir)?;
    println!("wrote {} ({rows} rows)", path.display());
    Ok(CommandReport::untrained(vec![path]))
}

fn push_matrix(csv: &mut Csv, kernel: &KernelMatrix, quantity: &str) {
    let d = kernel.dim();
    for i in 0..d {
        for j in i..d {
            csv.row(&[
                i.to_string(),
                j.to_string(),
                kernel.layer.to_string(),
                quantity.to_string(),
                fmt_f64(kernel.values[[i, j]]),
            ]);
        }
    }
}

/// How fast the finite-width tangent kernel closes in on its limit: the
/// relative Frobenius distance at initialization per width and seed, for
/// both initialization families, with a fitted decay exponent.
pub fn empirical(ctx: &Ctx) -> Result<CommandReport> {
    let file = &ctx.file;
    let base = file.network_config()?;
    let data = file.dataset()?;
    let widths = &file.sweep.widths;
    let seeds = &file.sweep.seeds;
    if widths.is_empty() || seeds.is_empty() {
        bail!("empirical-convergence needs non-empty sweep.widths and sweep.seeds");
    }
    let mut curve = Csv::new("convergence", "width,seed,init,distance").comment(
        "relative Frobenius distance of the finite-width tangent kernel from its limit at initialization",
    );
    let mut summary = Csv::new("convergence_summary", "width,init,mean,std_error");
    for family in FAMILIES {
        let mut cfg = base.clone();
        cfg.init = family;
        let points = empirical::width_convergence(&cfg, widths, seeds, &data.inputs)?;
        for point in &points {
            for (seed, value) in seeds.iter().zip(&point.values) {
                curve.row(&[
                    point.width.to_string(),
                    seed.to_string(),
                    init_name(family).to_string(),
                    fmt_f64(*value),
                ]);
            }
            summary.row(&[
                point.width.to_string(),
                init_name(family).to_string(),
                fmt_f64(point.mean),
                fmt_f64(point.std_error),
            ]);
        }
        if points.len() >= 2 {
            let xs: Vec<f64> = points.iter().map(|p| p.width as f64).collect();
            let ys: Vec<f64> = points.iter().map(|p| p.mean).collect();
            let fit = empirical::fit_loglog_slope(&xs, &ys)?;
            println!(
                "{}: distance ~ width^{} (std error {})",
                init_name(family),
                fmt_f64(fit.slope),
                fmt_f64(fit.std_error)
            );
        }
    }
    let curve_path = curve.write(&file.out_dir)?;
    let summary_path = summary.write(&file.out_dir)?;
    println!("wrote {}", curve_path.display());
    println!("wrote {}", summary_path.display());
    Ok(CommandReport::untrained(vec![curve_path, summary_path]))
}

/// Trains one network per (width, seed, family) cell and records how far
/// weights, parameters, and the tangent kernel moved, then fits power laws
/// in width. Divergent cells are flagged in the records and skipped by the
/// fits; the run itself continues.
pub fn scaling(ctx: &Ctx) -> Result<CommandReport> {
    let file = &ctx.file;
    let base = file.network_config()?;
    let data = file.dataset()?;
    let opts = file.train_section()?.to_options(file.seed)?;
    if file.sweep.widths.is_empty() || file.sweep.seeds.is_empty() {
        bail!("scaling needs non-empty sweep.widths and sweep.seeds");
    }
    let mut records_csv = Csv::new("scaling", "width,seed,init,layer,quantity,value")
        .comment("layer 0 rows describe the whole network")
        .comment("quantity diverged is 1 when training was cut short by a non-finite loss, else 0");
    let mut slopes_csv = Csv::new("scaling_slopes", "init,quantity,layer,slope,std_error");
    let depth = base.depth();
    let mut cells = 0;
    let mut diverged = 0;
    for family in FAMILIES {
        let mut cfg = base.clone();
        cfg.init = family;
        let records =
            empirical::scaling_records(&cfg, &file.sweep.widths, &file.sweep.seeds, &data, &opts)?;
        cells += records.len();
        diverged += records.iter().filter(|r| r.diverged).count();
        let name = init_name(family);
        for r in &records {
            let tag = |layer: usize, quantity: &str, value: f64| {
                [
                    r.width.to_string(),
                    r.seed.to_string(),
                    name.to_string(),
                    layer.to_string(),
                    quantity.to_string(),
                    fmt_f64(value),
                ]
            };
            for (l, change) in r.weight_change.iter().enumerate() {
                records_csv.row(&tag(l + 1, "weight_change", *change));
            }
            records_csv.row(&tag(depth, "ntk_change", r.ntk_change));
            records_csv.row(&tag(0, "param_distance", r.param_distance));
            records_csv.row(&tag(0, "diverged", f64::from(r.diverged)));
        }
        match empirical::fit_scaling_slopes(&records, depth) {
            Ok(slopes) => {
                let mut put = |quantity: &str, layer: usize, fit: &empirical::LogLogFit| {
                    slopes_csv.row(&[
                        name.to_string(),
                        quantity.to_string(),
                        layer.to_string(),
                        fmt_f64(fit.slope),
                        fmt_f64(fit.std_error),
                    ]);
                };
                for (l, fit) in slopes.weight_change.iter().enumerate() {
                    put("weight_change", l + 1, fit);
                }
                put("ntk_change", depth, &slopes.ntk_change);
                put("param_distance", 0, &slopes.param_distance);
                let layer_slopes: Vec<String> = slopes
                    .weight_change
                    .iter()
                    .map(|f| fmt_f64(f.slope))
                    .collect();
                println!(
                    "{name}: weight_change slopes [{}], ntk_change slope {}",
                    layer_slopes.join(", "),
                    fmt_f64(slopes.ntk_change.slope)
                );
            }
            Err(err) => println!("{name}: no slope fit ({err})"),
        }
    }
    let records_path = records_csv.write(&file.out_dir)?;
    println!("wrote {}", records_path.display());
    let mut files = vec![records_path];
    if slopes_csv.rows() > 0 {
        let slopes_path = slopes_csv.write(&file.out_dir)?;
        println!("wrote {}", slopes_path.display());
        files.push(slopes_path);
    }
    Ok(CommandReport {
        files,
        cells,
        diverged,
    })
}

/// Trains an ensemble per initialization family at a fixed architecture and
/// logs across-seed mean and deviation of the metrics per step. Under
/// square loss the same rows are emitted for the infinite-width linearized
/// flow started from each seed's initial outputs.
pub fn dynamics(ctx: &Ctx) -> Result<CommandReport> {
    let file = &ctx.file;
    let base = file.network_config()?;
    let data = file.dataset()?;
    let train = file.train_section()?;
    let opts_base = train.to_options(file.seed)?;
    let seeds = &file.sweep.seeds;
    if seeds.is_empty() {
        bail!("dynamics-compare needs non-empty sweep.seeds");
    }
    let y = data.targets(base.output_dim())?;
    let limit_kernel = match train.loss() {
        Loss::Mse => Some(match &data.inputs {
            InputBatch::Flat(x) => analytic::ntk_fcn(&base, x)?,
            InputBatch::Spatial(x) => analytic::ntk_cnn(&base, x)?,
        }),
        Loss::CrossEntropy => None,
    };
    let mut csv = Csv::new("dynamics", "step,init,quantity,mean,std,count")
        .comment("across-seed ensemble statistics per init family; std is the sample deviation")
        .comment("count is the number of runs still alive at that step; divergence truncates a run")
        .comment(
            "linearized_train_loss rows follow the infinite-width kernel flow from each seed's initial outputs",
        );
    let mut cells = 0;
    let mut diverged = 0;
    for family in FAMILIES {
        let mut cfg = base.clone();
        cfg.init = family;
        let mut traces = Vec::with_capacity(seeds.len());
        let mut initial_outputs = Vec::new();
        for &seed in seeds {
            let params = sample_params(&cfg, seed)?;
            if limit_kernel.is_some() {
                initial_outputs.push(network::predict(&params, &data.inputs)?);
            }
            let mut opts = opts_base.clone();
            opts.seed = seed;
            let (trace, _) = dynamics::train(&params, &data, None, &opts)?;
            cells += 1;
            if trace.diverged {
                diverged += 1;
            }
            traces.push(trace);
        }
        // All runs share one logging grid; divergence only shortens it, so
        // aligning by index is exact.
        let grid: Vec<usize> = traces
            .iter()
            .max_by_key(|t| t.points.len())
            .map(|t| t.points.iter().map(|p| p.step).collect())
            .unwrap_or_default();
        let mut linearized: Vec<Vec<f64>> = Vec::new();
        if let Some(kernel) = &limit_kernel {
            for f0 in initial_outputs {
                let sol = LinearizedSolution::new(kernel, f0, y.clone(), opts_base.eta)?;
                let losses = grid
                    .iter()
                    .map(|&step| {
                        let f = sol.predict(step as f64)?;
                        network::loss_value(&f, &y, Loss::Mse)
                    })
                    .collect::<ntklab::error::Result<Vec<f64>>>()?;
                linearized.push(losses);
            }
        }
        for (k, &step) in grid.iter().enumerate() {
            let alive: Vec<&dynamics::TrainTrace> =
                traces.iter().filter(|t| t.points.len() > k).collect();
            let losses: Vec<f64> = alive.iter().map(|t| t.points[k].train_loss).collect();
            let accs: Vec<f64> = alive.iter().map(|t| t.points[k].train_accuracy).collect();
            push_stat(&mut csv, step, family, "train_loss", &losses);
            push_stat(&mut csv, step, family, "train_accuracy", &accs);
            if !linearized.is_empty() {
                let lin: Vec<f64> = linearized.iter().map(|l| l[k]).collect();
                push_stat(&mut csv, step, family, "linearized_train_loss", &lin);
            }
        }
        let name = init_name(family);
        let family_div = traces.iter().filter(|t| t.diverged).count();
        match traces
            .iter()
            .filter(|t| !t.diverged)
            .filter_map(|t| t.final_point())
            .map(|p| p.train_loss)
            .collect::<Vec<f64>>()
        {
            finals if finals.is_empty() => {
                println!("{name}: every run diverged ({family_div}/{})", seeds.len())
            }
            finals => println!(
                "{name}: final train loss {} over {} runs ({family_div} diverged)",
                fmt_f64(finals.iter().sum::<f64>() / finals.len() as f64),
                finals.len()
            ),
        }
    }
    let path = csv.write(&file.out_dir)?;
    println!("wrote {}", path.display());
    Ok(CommandReport {
        files: vec![path],
        cells,
        diverged,
    })
}

fn push_stat(csv: &mut Csv, step: usize, family: InitFamily, quantity: &str, values: &[f64]) {
    if values.is_empty() {
        return;
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    csv.row(&[
        step.to_string(),
        init_name(family).to_string(),
        quantity.to_string(),
        fmt_f64(mean),
        fmt_f64(std),
        values.len().to_string(),
    ]);
}

/// Time-to-threshold across learning rates: trains every (depth, width,
/// eta, family, seed) cell and records the first logged step whose training
/// accuracy clears `sweep.threshold`, with `-1` marking runs that never got
/// there. Divergent cells are flagged and the sweep keeps going.
pub fn lr_sweep(ctx: &Ctx) -> Result<CommandReport> {
    let file = &ctx.file;
    let base = file.network_config()?;
    let data = file.dataset()?;
    let train = file.train_section()?;
    let threshold = file.sweep.threshold;
    let seeds = &file.sweep.seeds;
    let etas = &file.sweep.etas;
    if etas.is_empty() || seeds.is_empty() {
        bail!("lr-sweep needs non-empty sweep.etas and sweep.seeds");
    }
    let depths = if file.sweep.depths.is_empty() {
        vec![base.depth()]
    } else {
        file.sweep.depths.clone()
    };
    let widths: Vec<Option<usize>> = if file.sweep.widths.is_empty() {
        vec![None]
    } else {
        file.sweep.widths.iter().map(|&w| Some(w)).collect()
    };
    let mut csv = Csv::new("lr_sweep", "depth,width,eta,init,seed,diverged,tau")
        .comment(format!(
            "tau = first logged step with train accuracy >= {}; -1 when never reached (diverged runs included)",
            fmt_f64(threshold)
        ).as_str())
        .comment("width 0 marks a network with no hidden layers");
    let mut cells = 0;
    let mut diverged = 0;
    for &depth in &depths {
        for &width in &widths {
            let cfg_cell = cell_config(&base, depth, width)?;
            let shown_width = if depth > 1 { cfg_cell.widths[1] } else { 0 };
            for &eta in etas {
                let mut reached: Vec<(InitFamily, usize, Vec<usize>)> = Vec::new();
                for family in FAMILIES {
                    let mut cfg = cfg_cell.clone();
                    cfg.init = family;
                    let mut taus = Vec::new();
                    for &seed in seeds {
                        let params = sample_params(&cfg, seed)?;
                        let mut opts = train.to_options(seed)?;
                        opts.eta = eta;
                        let (trace, _) = dynamics::train(&params, &data, None, &opts)?;
                        cells += 1;
                        if trace.diverged {
                            diverged += 1;
                        }
                        let tau = if trace.diverged {
                            None
                        } else {
                            dynamics::tau_measure(&trace, threshold)?
                        };
                        if let Some(t) = tau {
                            taus.push(t);
                        }
                        csv.row(&[
                            depth.to_string(),
                            shown_width.to_string(),
                            fmt_f64(eta),
                            init_name(family).to_string(),
                            seed.to_string(),
                            f64::from(trace.diverged).to_string(),
                            tau.map_or("-1".to_string(), |t| t.to_string()),
                        ]);
                    }
                    reached.push((family, taus.len(), taus));
                }
                let cell: Vec<String> = reached
                    .iter()
                    .map(|(family, hit, taus)| {
                        format!(
                            "{} {hit}/{} median tau {}",
                            init_name(*family),
                            seeds.len(),
                            median(taus).map_or("-1".to_string(), fmt_f64)
                        )
                    })
                    .collect();
                println!(
                    "depth {depth} width {shown_width} eta {}: {}",
                    fmt_f64(eta),
                    cell.join("; ")
                );
            }
        }
    }
    let path = csv.write(&file.out_dir)?;
    println!("wrote {}", path.display());
    Ok(CommandReport {
        files: vec![path],
        cells,
        diverged,
    })
}

/// Sorted-middle median; even lengths average the two middles.
fn median(values: &[usize]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 1 {
        sorted[mid] as f64
    } else {
        (sorted[mid - 1] + sorted[mid]) as f64 / 2.0
    })
}

/// The sweep-cell variant of `base`: `depth` affine layers with every
/// hidden width set to `width` (keeping the base hidden width when `None`).
fn cell_config(base: &NetworkConfig, depth: usize, width: Option<usize>) -> Result<NetworkConfig> {
    if depth == 0 {
        bail!("sweep.depths entries must be at least 1");
    }
    if depth == base.depth() && width.is_none() {
        return Ok(base.clone());
    }
    let n_in = *base.widths.first().expect("validated config");
    let n_out = *base.widths.last().expect("validated config");
    let hidden = match width {
        Some(w) => w,
        None if base.depth() > 1 => base.widths[1],
        None => bail!("sweep.depths needs sweep.widths when the base network has no hidden layer"),
    };
    let mut widths = Vec::with_capacity(depth + 1);
    widths.push(n_in);
    widths.extend(std::iter::repeat(hidden).take(depth.saturating_sub(1)));
    widths.push(n_out);
    let mut cfg = base.clone();
    cfg.widths = widths;
    cfg.validate()?;
    Ok(cfg)
}
