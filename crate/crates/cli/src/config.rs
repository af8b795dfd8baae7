//! Experiment configuration: a sectioned TOML file (or a previously dumped
//! JSON resolution of one), command line overrides, and conversion into the
//! library's types.

use std::path::{Path, PathBuf};

use feded::data::SyntheticSpec;
use feded::engine::{AggregationWeights, FedConfig, Method};
use feded::metrics::ReportFormat;
use feded::partition::{PartitionKind, PartitionSpec};
use feded::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable that replaces `report.dir` (a `--report-dir` flag
/// still wins).
pub const REPORT_DIR_ENV: &str = "FEDED_REPORT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub report: ReportConfig,
    /// One run per master seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep this fraction of every training class.
        #[serde(default)]
        subset_fraction: Option<f64>,
        #[serde(default)]
        subset_seed: u64,
    },
    Synthetic {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "one")]
        spread: f64,
        #[serde(default = "one")]
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_classes() -> usize {
    10
}
fn default_dim() -> usize {
    32
}
fn default_per_class() -> usize {
    200
}
fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Dirichlet,
    QuantityShards,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub kind: PartitionMode,
    /// Dirichlet concentration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Shards per client for the quantity-based split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shards_per_client: Option<usize>,
    pub clients: usize,
    /// Fixed partition seed. When absent each run partitions with its own
    /// master seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            kind: PartitionMode::Dirichlet,
            beta: Some(0.5),
            shards_per_client: None,
            clients: 10,
            seed: None,
        }
    }
}

impl PartitionConfig {
    pub fn spec(&self, master_seed: u64) -> Result<PartitionSpec> {
        let kind = match self.kind {
            PartitionMode::Dirichlet => {
                let beta = self.beta.ok_or_else(|| {
                    Error::Config("partition.beta is required for kind = \"dirichlet\"".into())
                })?;
                if !(beta > 0.0 && beta.is_finite()) {
                    return Err(Error::Config(format!(
                        "partition.beta must be positive, got {beta}"
                    )));
                }
                PartitionKind::Dirichlet { beta }
            }
            PartitionMode::QuantityShards => {
                let s = self.shards_per_client.ok_or_else(|| {
                    Error::Config(
                        "partition.shards_per_client is required for kind = \"quantity_shards\"".into(),
                    )
                })?;
                if s == 0 {
                    return Err(Error::Config(
                        "partition.shards_per_client must be at least 1".into(),
                    ));
                }
                PartitionKind::QuantityShards { shards_per_client: s }
            }
        };
        Ok(PartitionSpec {
            kind,
            num_clients: self.clients,
            seed: self.seed.unwrap_or(master_seed),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum MethodName {
    Fedavg,
    Fedprox,
    Calibrated,
    Feded,
    FededNoDis,
    FededNoLogit,
}

/// Every FedConfig field except the client count (taken from the
/// partition) and the master seed (taken from `seeds`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub participation_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub method: MethodName,
    /// Distillation weight for the FedED variants.
    pub lambda: f64,
    /// Proximal weight for FedProx.
    pub mu: f64,
    /// Extension; 1 gives the standard objective.
    pub logit_weight: f64,
    pub hidden_widths: Vec<usize>,
    pub aggregation: AggregationWeights,
    pub parallel: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let fed = FedConfig::default();
        Self {
            rounds: fed.rounds,
            participation_rate: fed.participation_rate,
            local_epochs: fed.local_epochs,
            batch_size: fed.batch_size,
            learning_rate: fed.learning_rate,
            momentum: fed.momentum,
            weight_decay: fed.weight_decay,
            method: MethodName::Feded,
            lambda: 0.1,
            mu: 0.01,
            logit_weight: fed.logit_weight,
            hidden_widths: fed.hidden_widths,
            aggregation: fed.aggregation,
            parallel: true,
        }
    }
}

impl TrainingConfig {
    pub fn method(&self) -> Method {
        match self.method {
            MethodName::Fedavg => Method::FedAvg,
            MethodName::Fedprox => Method::FedProx { mu: self.mu },
            MethodName::Calibrated => Method::Calibrated,
            MethodName::Feded => Method::FedEd { lambda: self.lambda },
            MethodName::FededNoDis => Method::FedEdNoDis,
            MethodName::FededNoLogit => Method::FedEdNoLogit { lambda: self.lambda },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub dir: PathBuf,
    pub format: FormatName,
    /// Record every participant's post-update class-wise accuracy.
    pub diagnostics: bool,
    /// Write each run's partition as JSON next to its report.
    pub export_partition: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("reports"),
            format: FormatName::Csv,
            diagnostics: false,
            export_partition: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FormatName {
    Csv,
    Json,
}

impl From<FormatName> for ReportFormat {
    fn from(f: FormatName) -> Self {
        match f {
            FormatName::Csv => ReportFormat::Csv,
            FormatName::Json => ReportFormat::Json,
        }
    }
}

/// Flag values that replace file values when present.
#[derive(Debug, Clone, Default, PartialEq, clap::Args)]
pub struct Overrides {
    /// Single master seed (replaces the `seeds` list).
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated master seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub method: Option<MethodName>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub local_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub participation_rate: Option<f64>,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub shards_per_client: Option<usize>,
    #[arg(long)]
    pub partition_seed: Option<u64>,
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<FormatName>,
    #[arg(long)]
    pub diagnostics: bool,
    /// Train the clients of a round one after another.
    #[arg(long)]
    pub sequential: bool,
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the file name ends in `.json`.
    pub fn from_str_with_format(text: &str, json: bool) -> Result<Self> {
        if json {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let json = path.extension().is_some_and(|e| e == "json");
        Self::from_str_with_format(&text, json).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies flag overrides, then the report-directory environment
    /// variable unless a flag already set it, then validates.
    pub fn resolve(mut self, o: &Overrides, env_report_dir: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        let t = &mut self.training;
        if let Some(m) = o.method {
            t.method = m;
        }
        macro_rules! take {
            ($($src:ident => $dst:expr),* $(,)?) => {$(
                if let Some(v) = o.$src.clone() {
                    $dst = v;
                }
            )*};
        }
        take! {
            lambda => t.lambda,
            mu => t.mu,
            rounds => t.rounds,
            local_epochs => t.local_epochs,
            batch_size => t.batch_size,
            learning_rate => t.learning_rate,
            participation_rate => t.participation_rate,
            clients => self.partition.clients,
            format => self.report.format,
        }
        if o.beta.is_some() {
            self.partition.beta = o.beta;
        }
        if o.shards_per_client.is_some() {
            self.partition.shards_per_client = o.shards_per_client;
        }
        if o.partition_seed.is_some() {
            self.partition.seed = o.partition_seed;
        }
        if o.diagnostics {
            self.report.diagnostics = true;
        }
        if o.sequential {
            self.training.parallel = false;
        }
        match (&o.report_dir, env_report_dir) {
            (Some(dir), _) => self.report.dir = dir.clone(),
            (None, Some(dir)) => self.report.dir = dir,
            (None, None) => {}
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one master seed".into()));
        }
        if self.partition.clients == 0 {
            return Err(Error::Config("partition.clients must be at least 1".into()));
        }
        self.partition.spec(0)?;
        if let DatasetConfig::Mnist {
            subset_fraction: Some(f),
            ..
        } = self.dataset
        {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!(
                    "dataset.subset_fraction must lie in (0, 1], got {f}"
                )));
            }
        }
        if let DatasetConfig::Synthetic {
            classes,
            dim,
            per_class,
            spread,
            separation,
            ..
        } = self.dataset
        {
            if classes < 2 || dim == 0 || per_class < 2 {
                return Err(Error::Config(
                    "dataset needs classes >= 2, dim >= 1 and per_class >= 2".into(),
                ));
            }
            if !(spread > 0.0 && separation >= 0.0) {
                return Err(Error::Config(
                    "dataset.spread must be positive, separation non-negative".into(),
                ));
            }
        }
        self.fed_config(self.seeds[0]).validate().map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("training: {msg}")),
            other => other,
        })
    }

    pub fn fed_config(&self, master_seed: u64) -> FedConfig {
        let t = &self.training;
        FedConfig {
            rounds: t.rounds,
            clients: self.partition.clients,
            participation_rate: t.participation_rate,
            local_epochs: t.local_epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            method: t.method(),
            logit_weight: t.logit_weight,
            master_seed,
            hidden_widths: t.hidden_widths.clone(),
            aggregation: t.aggregation,
            parallel: t.parallel,
            diagnostics: self.report.diagnostics,
            record_timing: false,
        }
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match self.dataset {
            DatasetConfig::Synthetic {
                classes,
                dim,
                per_class,
                spread,
                separation,
                seed,
            } => Some(SyntheticSpec {
                classes,
                dim,
                per_class,
                spread,
                separation,
                seed,
            }),
            DatasetConfig::Mnist { .. } => None,
        }
    }

    /// Canonical JSON of every effective value; loading it back yields the
    /// same configuration.
    pub fn to_resolved_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }
}
