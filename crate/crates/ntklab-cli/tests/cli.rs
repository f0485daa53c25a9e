//! End-to-end runs of the `ntklab` binary: artifact schemas, determinism,
//! exit codes, and the documented command invariants.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(dir: &Path, config: &str, args: &[&str], envs: &[(&str, &str)]) -> Output {
    let cfg_path = dir.join("exp.toml");
    std::fs::write(&cfg_path, config).unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ntklab"));
    cmd.arg(args[0]).arg("--config").arg(&cfg_path);
    cmd.args(&args[1..]);
    for (key, value) in envs {
        cmd.env(key, value);
    }
    cmd.output().unwrap()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Data rows of a written artifact, comments and header stripped.
fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .filter(|line| !line.starts_with('#'))
        .skip(1)
        .map(|line| line.split(',').map(str::to_string).collect())
        .collect()
}

fn out_arg(dir: &Path, name: &str) -> (PathBuf, String) {
    let out = dir.join(name);
    let flag = out.to_str().unwrap().to_string();
    (out, flag)
}

const KERNEL_IDENTITY: &str = r#"
kind = "kernel"
seed = 3

[network]
arch = "fcn"
widths = [3, 7, 7, 7, 1]
activation = "identity"
sigma_w_sq = 1.5
sigma_b_sq = 0.0

[data]
source = "synthetic-sphere"
count = 2
classes = 2
input_dim = 3
"#;

#[test]
fn kernel_identity_network_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let (out, flag) = out_arg(dir.path(), "out");
    let res = run(dir.path(), KERNEL_IDENTITY, &["kernel", "--out", &flag], &[]);
    assert!(res.status.success(), "{}", stderr_of(&res));

    let mut table: HashMap<(usize, usize, usize, String), f64> = HashMap::new();
    for row in csv_rows(&out.join("kernels.csv")) {
        assert_eq!(row.len(), 5);
        table.insert(
            (
                row[0].parse().unwrap(),
                row[1].parse().unwrap(),
                row[2].parse().unwrap(),
                row[3].clone(),
            ),
            row[4].parse().unwrap(),
        );
    }
    // Identity activation with zero bias keeps every layer proportional to
    // the first: covariance scales by sigma_w^2 per layer and the depth-L
    // tangent kernel is L * sigma_w^(2(L-1)) times the first covariance.
    let depth = 4usize;
    let sw2 = 1.5f64;
    for i in 0..2usize {
        for j in i..2usize {
            let first = table[&(i, j, 1, "nngp".into())];
            for layer in 2..=depth {
                let got = table[&(i, j, layer, "nngp".into())];
                let want = sw2.powi(layer as i32 - 1) * first;
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
            let got = table[&(i, j, depth, "ntk".into())];
            let want = depth as f64 * sw2.powi(depth as i32 - 1) * first;
            assert!(
                (got - want).abs() <= 1e-12 * want.abs().max(1.0),
                "tangent kernel entry ({i},{j}) = {got}, closed form {want}"
            );
        }
    }
}

#[test]
fn kernel_reruns_are_byte_identical_and_init_independent() {
    let dir = tempfile::tempdir().unwrap();
    let mut artifacts = Vec::new();
    for (name, extra) in [
        ("a", vec![]),
        ("b", vec![]),
        ("c", vec!["--override", "network.init=orthogonal"]),
        ("d", vec!["--workers", "2"]),
    ] {
        let (out, flag) = out_arg(dir.path(), name);
        let mut args = vec!["kernel", "--out", &flag];
        args.extend(extra);
        let res = run(dir.path(), KERNEL_IDENTITY, &args, &[]);
        assert!(res.status.success(), "{}", stderr_of(&res));
        artifacts.push(std::fs::read(out.join("kernels.csv")).unwrap());
    }
    assert_eq!(artifacts[0], artifacts[1], "rerun changed the artifact");
    assert_eq!(artifacts[0], artifacts[2], "init family leaked into the limit");
    assert_eq!(artifacts[0], artifacts[3], "worker count changed the artifact");

    let (_, flag) = out_arg(dir.path(), "e");
    let res = run(
        dir.path(),
        KERNEL_IDENTITY,
        &["kernel", "--out", &flag, "--seed", "9"],
        &[],
    );
    assert!(res.status.success());
    let reseeded = std::fs::read(dir.path().join("e/kernels.csv")).unwrap();
    assert_ne!(artifacts[0], reseeded, "seed does not reach the data draw");
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();

    let missing = Command::new(env!("CARGO_BIN_EXE_ntklab"))
        .args(["kernel", "--config", "/nonexistent/exp.toml"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr_of(&missing).contains("error"));

    let typo = KERNEL_IDENTITY.replace("sigma_w_sq", "sigma_w");
    let res = run(dir.path(), &typo, &["kernel"], &[]);
    assert_eq!(res.status.code(), Some(1), "unknown key was accepted");

    let res = run(dir.path(), KERNEL_IDENTITY, &["scaling"], &[]);
    assert_eq!(res.status.code(), Some(1), "kind mismatch was accepted");
    assert!(stderr_of(&res).contains("kind"));

    let res = run(
        dir.path(),
        KERNEL_IDENTITY,
        &["kernel", "--override", "network.widths=oops"],
        &[],
    );
    assert_eq!(res.status.code(), Some(1), "bad override type was accepted");
}

const DYNAMICS_FROZEN: &str = r#"
kind = "dynamics-compare"
seed = 0

[network]
arch = "fcn"
widths = [4, 8, 2]
activation = "erf"
sigma_w_sq = 1.0
sigma_b_sq = 0.1

[data]
source = "synthetic-blobs"
count = 6
classes = 2
input_dim = 4

[train]
eta = 0.0
steps = 10
loss = "mse"
log_every = 2

[sweep]
seeds = [0, 1, 2]
"#;

#[test]
fn zero_learning_rate_gives_flat_curves_matching_the_linearization() {
    let dir = tempfile::tempdir().unwrap();
    let (out, flag) = out_arg(dir.path(), "out");
    let res = run(
        dir.path(),
        DYNAMICS_FROZEN,
        &["dynamics", "--out", &flag, "--self-check"],
        &[],
    );
    assert!(res.status.success(), "{}", stderr_of(&res));
    assert!(stdout_of(&res).contains("self-check ok"));

    // (init, quantity) -> per-step means, in step order.
    let mut series: HashMap<(String, String), Vec<f64>> = HashMap::new();
    for row in csv_rows(&out.join("dynamics.csv")) {
        assert_eq!(row.len(), 6);
        assert_eq!(row[5], "3", "all three seeds should reach every step");
        series
            .entry((row[1].clone(), row[2].clone()))
            .or_default()
            .push(row[3].parse().unwrap());
    }
    for family in ["gaussian", "orthogonal"] {
        let trained = &series[&(family.to_string(), "train_loss".to_string())];
        let linear = &series[&(family.to_string(), "linearized_train_loss".to_string())];
        assert_eq!(trained.len(), 6, "steps 0,2,4,6,8,10");
        assert_eq!(trained.len(), linear.len());
        for (t, l) in trained.iter().zip(linear) {
            assert!((t - trained[0]).abs() <= 1e-12 * trained[0].max(1.0));
            assert!((t - l).abs() <= 1e-9 * trained[0].max(1.0));
        }
    }
    // The two families start from different draws, so the flat levels differ.
    let g = series[&("gaussian".to_string(), "train_loss".to_string())][0];
    let o = series[&("orthogonal".to_string(), "train_loss".to_string())][0];
    assert!((g - o).abs() > 1e-9);
}

const SCALING_SMALL: &str = r#"
kind = "scaling"
seed = 0

[network]
arch = "fcn"
widths = [4, 16, 1]
activation = "erf"
sigma_w_sq = 1.0
sigma_b_sq = 0.1

[data]
source = "synthetic-sphere"
count = 6
classes = 2
input_dim = 4

[train]
eta = 0.05
steps = 20
loss = "mse"

[sweep]
widths = [8, 32]
seeds = [0, 1]
"#;

#[test]
fn scaling_writes_records_and_slopes_and_flags_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let (out, flag) = out_arg(dir.path(), "ok");
    let res = run(
        dir.path(),
        SCALING_SMALL,
        &["scaling", "--out", &flag, "--self-check"],
        &[],
    );
    assert!(res.status.success(), "{}", stderr_of(&res));
    let rows = csv_rows(&out.join("scaling.csv"));
    // 2 families x 2 widths x 2 seeds, 5 rows each (2 layers + kernel +
    // distance + divergence flag).
    assert_eq!(rows.len(), 2 * 2 * 2 * 5);
    assert!(rows
        .iter()
        .filter(|r| r[4] == "diverged")
        .all(|r| r[5] == "0"));
    let slope_rows = csv_rows(&out.join("scaling_slopes.csv"));
    // Per family: one slope per layer plus kernel and distance slopes.
    assert_eq!(slope_rows.len(), 2 * 4);

    // A hopeless learning rate diverges every cell: the records must still
    // land on disk, flagged, with the whole run signalling exit code 2.
    let (out2, flag2) = out_arg(dir.path(), "div");
    let res = run(
        dir.path(),
        SCALING_SMALL,
        &["scaling", "--out", &flag2, "--override", "train.eta=1e9"],
        &[],
    );
    assert_eq!(res.status.code(), Some(2), "{}", stderr_of(&res));
    let rows = csv_rows(&out2.join("scaling.csv"));
    assert!(rows
        .iter()
        .filter(|r| r[4] == "diverged")
        .all(|r| r[5] == "1"));
    assert!(!out2.join("scaling_slopes.csv").exists());
}

const LR_SWEEP_SMALL: &str = r#"
kind = "lr-sweep"
seed = 0

[network]
arch = "fcn"
widths = [4, 16, 2]
activation = "erf"
sigma_w_sq = 1.0
sigma_b_sq = 0.05

[data]
source = "synthetic-blobs"
count = 8
classes = 2
input_dim = 4
separation = 4.0

[train]
eta = 0.05
steps = 60
loss = "mse"
log_every = 1

[sweep]
etas = [0.05, 1e9]
seeds = [0, 1]
threshold = 0.6
"#;

#[test]
fn lr_sweep_marks_unreached_thresholds_with_sentinel() {
    let dir = tempfile::tempdir().unwrap();
    let (out, flag) = out_arg(dir.path(), "out");
    let res = run(
        dir.path(),
        LR_SWEEP_SMALL,
        &["lr-sweep", "--out", &flag, "--self-check"],
        &[],
    );
    assert!(res.status.success(), "{}", stderr_of(&res));

    let text = std::fs::read_to_string(out.join("lr_sweep.csv")).unwrap();
    assert!(
        text.lines().next().unwrap().contains("-1"),
        "sentinel undocumented in the leading comment"
    );
    let rows = csv_rows(&out.join("lr_sweep.csv"));
    assert_eq!(rows.len(), 2 * 2 * 2, "etas x families x seeds");
    for row in &rows {
        assert_eq!(row.len(), 7);
        let tau: i64 = row[6].parse().unwrap();
        assert!(tau >= -1);
        if row[2] == "1000000000" {
            assert_eq!(row[5], "1", "the huge learning rate must diverge");
            assert_eq!(tau, -1);
        }
    }
    assert!(
        rows.iter().any(|r| r[2] == "0.05" && r[6] != "-1"),
        "the stable learning rate should reach the threshold"
    );
}

const EMPIRICAL_SMALL: &str = r#"
kind = "empirical-convergence"
seed = 0

[network]
arch = "fcn"
widths = [4, 8, 1]
activation = "erf"
sigma_w_sq = 1.0
sigma_b_sq = 0.1

[data]
source = "synthetic-sphere"
count = 4
classes = 2
input_dim = 4

[sweep]
widths = [8, 32]
seeds = [0, 1]
"#;

#[test]
fn empirical_convergence_writes_per_seed_and_summary_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (out, flag) = out_arg(dir.path(), "out");
    let res = run(
        dir.path(),
        EMPIRICAL_SMALL,
        &["empirical", "--out", &flag, "--self-check"],
        &[],
    );
    assert!(res.status.success(), "{}", stderr_of(&res));
    assert!(stdout_of(&res).contains("self-check ok: 2 files"));
    let rows = csv_rows(&out.join("convergence.csv"));
    assert_eq!(rows.len(), 2 * 2 * 2, "families x widths x seeds");
    assert!(rows.iter().all(|r| r[3].parse::<f64>().unwrap() > 0.0));
    let summary = csv_rows(&out.join("convergence_summary.csv"));
    assert_eq!(summary.len(), 2 * 2, "families x widths");
}

#[test]
fn synthetic_idx_source_lands_in_the_data_dir_env() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("idx-store");
    let config = r#"
kind = "kernel"
seed = 1

[network]
arch = "fcn"
widths = [784, 8, 1]
activation = "relu"
sigma_w_sq = 2.0
sigma_b_sq = 0.01

[data]
source = "synthetic-idx"
count = 5
classes = 3
"#;
    let (out, flag) = out_arg(dir.path(), "out");
    let res = run(
        dir.path(),
        config,
        &["kernel", "--out", &flag, "--self-check"],
        &[("NTKLAB_DATA", data_dir.to_str().unwrap())],
    );
    assert!(res.status.success(), "{}", stderr_of(&res));
    assert!(data_dir.join("synthetic-images-idx3-ubyte").exists());
    assert!(data_dir.join("synthetic-labels-idx1-ubyte").exists());
    assert!(out.join("kernels.csv").exists());
}

#[test]
fn kernel_handles_convolutional_networks_at_the_readout() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"
kind = "kernel"
seed = 2

[network]
arch = "cnn1d"
widths = [2, 4, 1]
activation = "relu"
sigma_w_sq = 1.1
sigma_b_sq = 0.05
spatial_size = 6
filter_half_width = 1

[data]
source = "synthetic-sphere"
count = 3
classes = 2
input_dim = 12
"#;
    let (out, flag) = out_arg(dir.path(), "out");
    let res = run(dir.path(), config, &["kernel", "--out", &flag, "--self-check"], &[]);
    assert!(res.status.success(), "{}", stderr_of(&res));
    let rows = csv_rows(&out.join("kernels.csv"));
    // Readout-layer covariance and tangent kernel, upper triangle of 3x3.
    assert_eq!(rows.len(), 2 * 6);
    assert!(rows.iter().all(|r| r[2] == "2"));
}
