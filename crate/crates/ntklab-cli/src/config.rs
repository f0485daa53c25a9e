//! Experiment descriptions: one TOML file, amended by `--override` flags.
//!
//! A description is a `kind` naming the experiment, a `[network]` section,
//! and, depending on the command, `[data]`, `[train]`, and `[sweep]`
//! sections. Unknown keys are rejected so typos fail loudly instead of
//! silently running the defaults.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use ntklab::activations::Activation;
use ntklab::config::{InitFamily, NetworkConfig, Parameterization};
use ntklab::data::{self, Dataset, Encoding, Normalization, Split, SyntheticKind};
use ntklab::dynamics::{Optimizer, TrainOptions};
use ntklab::network::Loss;

/// Environment variable naming the default directory for IDX data files.
pub const DATA_DIR_ENV: &str = "NTKLAB_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Kernel,
    EmpiricalConvergence,
    Scaling,
    DynamicsCompare,
    LrSweep,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ExperimentKind::Kernel => "kernel",
            ExperimentKind::EmpiricalConvergence => "empirical-convergence",
            ExperimentKind::Scaling => "scaling",
            ExperimentKind::DynamicsCompare => "dynamics-compare",
            ExperimentKind::LrSweep => "lr-sweep",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub kind: ExperimentKind,
    /// Base seed: selects the data subset and seeds single-run commands.
    /// Ensemble commands draw their member seeds from `[sweep] seeds`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub network: NetworkSection,
    pub data: Option<DataSection>,
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchName {
    Fcn,
    Cnn1d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationName {
    Identity,
    Relu,
    Erf,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitName {
    #[default]
    Gaussian,
    Orthogonal,
}

impl InitName {
    pub fn to_family(self) -> InitFamily {
        match self {
            InitName::Gaussian => InitFamily::Gaussian,
            InitName::Orthogonal => InitFamily::Orthogonal,
        }
    }
}

/// Lowercase family name used in CSV columns and summaries.
pub fn init_name(family: InitFamily) -> &'static str {
    match family {
        InitFamily::Gaussian => "gaussian",
        InitFamily::Orthogonal => "orthogonal",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamName {
    #[default]
    Ntk,
    Standard,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub arch: ArchName,
    /// Layer sizes `n_0 ..= n_L`; channel counts for `cnn1d` except the
    /// final dense output dimension.
    pub widths: Vec<usize>,
    pub activation: ActivationName,
    pub sigma_w_sq: f64,
    pub sigma_b_sq: f64,
    #[serde(default)]
    pub init: InitName,
    #[serde(default)]
    pub parameterization: ParamName,
    /// Width multiplier for `parameterization = "standard"`.
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    pub spatial_size: Option<usize>,
    pub filter_half_width: Option<usize>,
}

fn default_expansion() -> usize {
    1
}

impl NetworkSection {
    pub fn to_config(&self) -> Result<NetworkConfig> {
        let activation = match self.activation {
            ActivationName::Identity => Activation::Identity,
            ActivationName::Relu => Activation::Relu,
            ActivationName::Erf => Activation::Erf,
            ActivationName::Tanh => Activation::Tanh,
        };
        let param = match self.parameterization {
            ParamName::Ntk => Parameterization::Ntk,
            ParamName::Standard => Parameterization::Standard {
                expansion: self.expansion,
            },
        };
        let cfg = match self.arch {
            ArchName::Fcn => {
                if self.spatial_size.is_some() || self.filter_half_width.is_some() {
                    bail!("spatial_size and filter_half_width apply only to arch = \"cnn1d\"");
                }
                NetworkConfig::fcn(
                    self.widths.clone(),
                    activation,
                    self.sigma_w_sq,
                    self.sigma_b_sq,
                    self.init.to_family(),
                    param,
                )?
            }
            ArchName::Cnn1d => {
                let sites = self
                    .spatial_size
                    .ok_or_else(|| anyhow!("arch = \"cnn1d\" needs spatial_size"))?;
                let half = self
                    .filter_half_width
                    .ok_or_else(|| anyhow!("arch = \"cnn1d\" needs filter_half_width"))?;
                NetworkConfig::cnn1d(
                    self.widths.clone(),
                    sites,
                    half,
                    activation,
                    self.sigma_w_sq,
                    self.sigma_b_sq,
                    self.init.to_family(),
                    param,
                )?
            }
        };
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceName {
    /// Image/label pair in IDX format under `dir` (or `$NTKLAB_DATA`).
    Idx,
    /// Class-conditional Gaussians in `input_dim` dimensions.
    SyntheticBlobs,
    /// Blob samples projected onto the unit sphere.
    SyntheticSphere,
    /// A generated IDX pair, written next to the outputs and loaded back
    /// through the same reader as real files.
    SyntheticIdx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormName {
    #[default]
    UnitNorm,
    Raw01,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncodingName {
    #[default]
    ZeroOne,
    PlusMinus,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: SourceName,
    /// Directory holding (or receiving) IDX files; `$NTKLAB_DATA` when unset.
    pub dir: Option<PathBuf>,
    /// IDX image file name inside `dir`.
    #[serde(default = "default_images")]
    pub images: String,
    /// IDX label file name inside `dir`.
    #[serde(default = "default_labels")]
    pub labels: String,
    /// Number of examples to load or synthesize.
    pub count: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Input dimension for the synthetic vector sources.
    pub input_dim: Option<usize>,
    /// Class-center separation for the synthetic vector sources.
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default)]
    pub normalization: NormName,
    #[serde(default)]
    pub encoding: EncodingName,
}

fn default_images() -> String {
    "train-images-idx3-ubyte".into()
}

fn default_labels() -> String {
    "train-labels-idx1-ubyte".into()
}

fn default_classes() -> usize {
    2
}

fn default_separation() -> f64 {
    3.0
}

impl DataSection {
    fn resolve_dir(&self) -> Result<PathBuf> {
        if let Some(dir) = &self.dir {
            return Ok(dir.clone());
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) => Ok(PathBuf::from(dir)),
            None => bail!("IDX data needs data.dir or the {DATA_DIR_ENV} environment variable"),
        }
    }

    fn load_raw(&self, seed: u64, out_dir: &Path) -> Result<Dataset> {
        let norm = match self.normalization {
            NormName::UnitNorm => Normalization::UnitNorm,
            NormName::Raw01 => Normalization::Raw01,
        };
        let ds = match self.source {
            SourceName::SyntheticBlobs | SourceName::SyntheticSphere => {
                let dim = self
                    .input_dim
                    .ok_or_else(|| anyhow!("synthetic vector sources need data.input_dim"))?;
                let kind = match self.source {
                    SourceName::SyntheticBlobs => SyntheticKind::GaussianBlobs {
                        separation: self.separation,
                    },
                    _ => SyntheticKind::UnitSphere {
                        separation: self.separation,
                    },
                };
                data::synthetic(self.count, dim, self.classes, seed, kind)?
            }
            SourceName::Idx => {
                let dir = self.resolve_dir()?;
                data::load_idx_with(
                    &dir.join(&self.images),
                    &dir.join(&self.labels),
                    self.count,
                    seed,
                    norm,
                )?
            }
            SourceName::SyntheticIdx => {
                let dir = self
                    .resolve_dir()
                    .unwrap_or_else(|_| out_dir.join("data"));
                std::fs::create_dir_all(&dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
                let (images, labels) =
                    data::synthetic_idx_pair(&dir, self.count, 28, 28, self.classes, seed)?;
                data::load_idx_with(&images, &labels, self.count, seed, norm)?
            }
        };
        match self.encoding {
            EncodingName::ZeroOne => Ok(ds),
            EncodingName::PlusMinus => Ok(Dataset::new(
                ds.inputs,
                ds.labels,
                ds.num_classes,
                Encoding::PlusMinus,
                Split::Train,
            )?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerName {
    #[default]
    Gd,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossName {
    #[default]
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub optimizer: OptimizerName,
    /// Minibatch size; `optimizer = "sgd"` only.
    pub batch: Option<usize>,
    pub eta: f64,
    pub steps: usize,
    #[serde(default)]
    pub loss: LossName,
    /// Metric logging cadence in steps; unset keeps traces near 200 points.
    pub log_every: Option<usize>,
}

impl TrainSection {
    pub fn loss(&self) -> Loss {
        match self.loss {
            LossName::Mse => Loss::Mse,
            LossName::CrossEntropy => Loss::CrossEntropy,
        }
    }

    pub fn to_options(&self, seed: u64) -> Result<TrainOptions> {
        let optimizer = match (self.optimizer, self.batch) {
            (OptimizerName::Gd, None) => Optimizer::Gd,
            (OptimizerName::Gd, Some(_)) => {
                bail!("train.batch applies only to optimizer = \"sgd\"")
            }
            (OptimizerName::Sgd, Some(batch)) => Optimizer::Sgd { batch },
            (OptimizerName::Sgd, None) => bail!("optimizer = \"sgd\" needs train.batch"),
        };
        let mut opts = TrainOptions::new(optimizer, self.eta, self.steps, self.loss(), seed);
        opts.log_every = self.log_every;
        Ok(opts)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Hidden widths for the ensemble commands.
    #[serde(default)]
    pub widths: Vec<usize>,
    /// Affine-layer counts for `lr-sweep`; unset keeps the network's depth.
    #[serde(default)]
    pub depths: Vec<usize>,
    /// Sampling seeds, one network per entry.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Learning rates for `lr-sweep`.
    #[serde(default)]
    pub etas: Vec<f64>,
    /// Training accuracy that stops the clock in `lr-sweep`.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.25
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            widths: Vec::new(),
            depths: Vec::new(),
            seeds: Vec::new(),
            etas: Vec::new(),
            threshold: default_threshold(),
        }
    }
}

impl ExperimentFile {
    pub fn network_config(&self) -> Result<NetworkConfig> {
        self.network.to_config()
    }

    /// Loads the configured dataset, shaped for the configured architecture.
    pub fn dataset(&self) -> Result<Dataset> {
        let section = self
            .data
            .as_ref()
            .ok_or_else(|| anyhow!("this command needs a [data] section"))?;
        let ds = section.load_raw(self.seed, &self.out_dir)?;
        match self.network.arch {
            ArchName::Fcn => Ok(ds),
            ArchName::Cnn1d => {
                let channels = *self
                    .network
                    .widths
                    .first()
                    .ok_or_else(|| anyhow!("network.widths is empty"))?;
                let sites = self
                    .network
                    .spatial_size
                    .ok_or_else(|| anyhow!("arch = \"cnn1d\" needs spatial_size"))?;
                Ok(ds.reshape_spatial(channels, sites)?)
            }
        }
    }

    pub fn train_section(&self) -> Result<&TrainSection> {
        self.train
            .as_ref()
            .ok_or_else(|| anyhow!("this command needs a [train] section"))
    }
}

/// Reads and parses the description at `path`, then applies `KEY=VALUE`
/// overrides on dotted paths (`train.eta=0.01`, `network.init=orthogonal`,
/// `sweep.widths=[64, 128]`). Values parse as TOML; bare words fall back
/// to strings.
pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentFile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut table: toml::Table = text
        .parse()
        .with_context(|| format!("parsing config {}", path.display()))?;
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    let file: ExperimentFile = table
        .try_into()
        .map_err(|err| anyhow!("config {}: {err}", path.display()))?;
    Ok(file)
}

pub fn expect_kind(file: &ExperimentFile, want: ExperimentKind) -> Result<()> {
    if file.kind != want {
        bail!(
            "config kind \"{}\" does not match this subcommand (expected \"{want}\")",
            file.kind
        );
    }
    Ok(())
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override \"{spec}\" is not KEY=VALUE"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if key.is_empty() || parts.iter().any(|p| p.is_empty()) {
        bail!("override \"{spec}\" has an empty key segment");
    }
    let (last, path) = parts.split_last().expect("parts checked non-empty");
    let mut node = table;
    for part in path {
        node = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override \"{key}\": \"{part}\" is not a table"))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
