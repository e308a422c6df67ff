//! Run configuration from flags and an optional JSON document.

use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use ecpc_core::selection::{RefitMode, SelectionMethod};
use ecpc_core::{Family, HyperKind};
use serde::{Deserialize, Serialize};

use crate::data::CoDataSpec;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Fit,
    Predict,
    Cv,
    Simulate,
    Stability,
}

/// `method:count:mode`, e.g. `l1:25:dense`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectSpec {
    pub method: SelectionMethod,
    pub count: usize,
    pub mode: RefitMode,
}

impl std::str::FromStr for SelectSpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || CliError::Config(format!("selection '{s}': expected method:count[:dense|recalibrated]"));
        if parts.len() < 2 || parts.len() > 3 {
            return Err(bad());
        }
        let method = parts[0].parse().map_err(|_| bad())?;
        let count = parts[1].parse().map_err(|_| bad())?;
        let mode = match parts.get(2) {
            Some(m) => m.parse().map_err(|_| bad())?,
            None => RefitMode::Dense,
        };
        Ok(Self { method, count, mode })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub replicates: usize,
    pub n: usize,
    pub n_test: usize,
    pub p: usize,
    pub tau2: f64,
    pub sigma2: f64,
    pub groups: Vec<usize>,
    pub random: bool,
    pub informative: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            replicates: 30,
            n: 100,
            n_test: 100,
            p: 300,
            tau2: 0.1,
            sigma2: 1.0,
            groups: vec![1, 5, 10, 20, 30],
            random: true,
            informative: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilityConfig {
    pub subsamples: usize,
    /// Fraction of samples in each training subsample.
    pub fraction: f64,
    /// Reuse the base seed for every subsample.
    pub same_seed: bool,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self { subsamples: 50, fraction: 2.0 / 3.0, same_seed: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub x: Option<PathBuf>,
    pub y: Option<PathBuf>,
    pub family: Family,
    pub codata: Vec<String>,
    pub hyper: Vec<HyperKind>,
    pub folds: usize,
    pub splits: usize,
    pub seed: Option<u64>,
    pub select: Option<String>,
    pub out: PathBuf,
    pub model: Option<PathBuf>,
    /// Append an unpenalised intercept column.
    pub intercept: bool,
    /// Names of covariates left unpenalised.
    pub unpenalized: Vec<String>,
    /// Also write a gnuplot script next to the tables.
    pub plot: bool,
    pub simulate: SimulateConfig,
    pub stability: StabilityConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            x: None,
            y: None,
            family: Family::Gaussian,
            codata: Vec::new(),
            hyper: Vec::new(),
            folds: 10,
            splits: 10,
            seed: None,
            select: None,
            out: PathBuf::from("ecpc-out"),
            model: None,
            intercept: false,
            unpenalized: Vec::new(),
            plot: false,
            simulate: SimulateConfig::default(),
            stability: StabilityConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Parser)]
#[command(name = "ecpc", version, about = "Group-adaptive ridge GLMs with co-data")]
pub struct Cli {
    #[arg(long, value_enum)]
    pub command: Option<Command>,
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub x: Option<PathBuf>,
    #[arg(long)]
    pub y: Option<PathBuf>,
    /// gaussian, binomial or cox.
    #[arg(long)]
    pub family: Option<String>,
    /// Co-data: groups.json or values.csv[:min_size[:threshold]]; repeatable.
    #[arg(long)]
    pub codata: Vec<String>,
    /// Hypershrinkage per co-data source, in the same order.
    #[arg(long)]
    pub hyper: Vec<String>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub splits: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// method:count[:mode], method in l1|dss|credible, mode dense|recalibrated.
    #[arg(long)]
    pub select: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model JSON for predict.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub intercept: bool,
    /// Comma-separated covariate names left unpenalised.
    #[arg(long, value_delimiter = ',')]
    pub unpenalized: Vec<String>,
    #[arg(long)]
    pub plot: bool,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub subsamples: Option<usize>,
}

impl RunConfig {
    pub fn from_cli(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))?
            }
            None => RunConfig::default(),
        };
        if cli.command.is_some() {
            cfg.command = cli.command;
        }
        if cli.x.is_some() {
            cfg.x = cli.x.clone();
        }
        if cli.y.is_some() {
            cfg.y = cli.y.clone();
        }
        if let Some(f) = &cli.family {
            cfg.family = f.parse().map_err(|e: ecpc_core::EcpcError| CliError::Config(e.to_string()))?;
        }
        if !cli.codata.is_empty() {
            cfg.codata = cli.codata.clone();
        }
        if !cli.hyper.is_empty() {
            cfg.hyper = cli
                .hyper
                .iter()
                .map(|h| h.parse().map_err(|e: ecpc_core::EcpcError| CliError::Config(e.to_string())))
                .collect::<Result<_>>()?;
        }
        if let Some(v) = cli.folds {
            cfg.folds = v;
        }
        if let Some(v) = cli.splits {
            cfg.splits = v;
        }
        if cli.seed.is_some() {
            cfg.seed = cli.seed;
        }
        if cli.select.is_some() {
            cfg.select = cli.select.clone();
        }
        if let Some(o) = &cli.out {
            cfg.out = o.clone();
        }
        if cli.model.is_some() {
            cfg.model = cli.model.clone();
        }
        cfg.intercept |= cli.intercept;
        cfg.plot |= cli.plot;
        if !cli.unpenalized.is_empty() {
            cfg.unpenalized = cli.unpenalized.clone();
        }
        if let Some(r) = cli.replicates {
            cfg.simulate.replicates = r;
        }
        if let Some(s) = cli.subsamples {
            cfg.stability.subsamples = s;
        }
        Ok(cfg)
    }

    pub fn command(&self) -> Result<Command> {
        self.command.ok_or_else(|| CliError::Config("no command given (--command)".into()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| CliError::Config("a seed is required (--seed)".into()))
    }

    pub fn selection(&self) -> Result<Option<SelectSpec>> {
        self.select.as_deref().map(str::parse).transpose()
    }

    pub fn codata_specs(&self) -> Result<Vec<CoDataSpec>> {
        self.codata.iter().map(|s| s.parse()).collect()
    }

    /// Hypershrinkage per source; missing entries default to ridge.
    pub fn hyper_kinds(&self) -> Result<Vec<HyperKind>> {
        let n = self.codata.len();
        if self.hyper.len() > n {
            return Err(CliError::Config(format!("{} hypershrinkage kinds for {n} co-data sources", self.hyper.len())));
        }
        Ok((0..n).map(|i| self.hyper.get(i).copied().unwrap_or(HyperKind::Ridge)).collect())
    }

    /// Check that everything the command needs is present and every input
    /// path exists.
    pub fn validate(&self) -> Result<Command> {
        let cmd = self.command()?;
        let need = |p: &Option<PathBuf>, flag: &str| -> Result<()> {
            match p {
                None => Err(CliError::Config(format!("{cmd:?} needs --{flag}").to_lowercase())),
                Some(path) => exists(path),
            }
        };
        match cmd {
            Command::Fit | Command::Cv | Command::Stability => {
                need(&self.x, "x")?;
                need(&self.y, "y")?;
                if self.codata.is_empty() {
                    return Err(CliError::Config("at least one --codata source is required".into()));
                }
                for spec in self.codata_specs()? {
                    exists(spec.path())?;
                }
                self.hyper_kinds()?;
                self.seed()?;
            }
            Command::Predict => {
                need(&self.x, "x")?;
                need(&self.model, "model")?;
            }
            Command::Simulate => {
                self.seed()?;
                let s = &self.simulate;
                if s.replicates == 0 || s.groups.is_empty() || s.groups.iter().any(|&g| g == 0 || g > s.p) {
                    return Err(CliError::Config("simulation needs replicates ≥ 1 and group counts in 1..=p".into()));
                }
            }
        }
        if cmd == Command::Cv && self.folds < 2 {
            return Err(CliError::Config("cross-validation needs at least 2 folds".into()));
        }
        if cmd == Command::Stability && self.selection()?.is_none() {
            return Err(CliError::Config("stability analysis needs --select".into()));
        }
        self.selection()?;
        Ok(cmd)
    }
}

fn exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")))
    }
}
