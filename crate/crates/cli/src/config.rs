//! The run configuration: a versioned TOML document whose values can be
//! overridden from the command line.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use fedridge::experiment::RunOptions;
use fedridge::metrics::RetentionOrientation;
use fedridge::partition::PlanParams;
use fedridge::AggregationMode;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    InProcess,
    Serve,
    Join,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Simplified,
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Retention {
    #[default]
    FirstOverCurrent,
    CurrentOverFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub tasks: usize,
    pub clients: usize,
    pub alpha: f64,
    pub r_disjoint: f64,
    pub r_blurry: f64,
    pub equalize: bool,
}

impl Default for PartitionSection {
    fn default() -> Self {
        let p = PlanParams::default();
        Self {
            tasks: p.tasks,
            clients: p.clients_per_task,
            alpha: p.alpha,
            r_disjoint: p.r_disjoint,
            r_blurry: p.r_blurry,
            equalize: p.equalize,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub address: String,
    /// Rounds the server waits for. Defaults to the plan's non-empty clients.
    pub expected: Option<u64>,
    /// Embedding width for a server without training data.
    pub width: Option<usize>,
    pub attempts: usize,
    /// Only this plan client joins; all of them when unset.
    pub client: Option<String>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self { address: "127.0.0.1:7878".into(), expected: None, width: None, attempts: 5, client: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub gamma: f64,
    pub seed: u64,
    pub mode: Mode,
    pub aggregation: Aggregation,
    pub retention: Retention,
    pub eval_every_round: bool,
    pub partition: PartitionSection,
    pub paths: PathsSection,
    pub network: NetworkSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            gamma: 1.0,
            seed: 0,
            mode: Mode::default(),
            aggregation: Aggregation::default(),
            retention: Retention::default(),
            eval_every_round: true,
            partition: PartitionSection::default(),
            paths: PathsSection::default(),
            network: NetworkSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Ridge regularization strength.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Seed for the partition and synthetic data.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Server recursion form.
    #[arg(long, value_enum)]
    pub aggregation: Option<Aggregation>,
    /// Which way round the retention ratio is taken.
    #[arg(long, value_enum)]
    pub retention: Option<Retention>,
    /// Score only the final model.
    #[arg(long)]
    pub final_only: bool,
    /// Number of tasks.
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Clients per task.
    #[arg(long)]
    pub clients: Option<usize>,
    /// Dirichlet concentration.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Fraction of classes confined to a single task.
    #[arg(long)]
    pub r_disjoint: Option<f64>,
    /// Fraction of each shared class spread over other tasks.
    #[arg(long)]
    pub r_blurry: Option<f64>,
    /// Keep the raw Dirichlet client sizes.
    #[arg(long)]
    pub no_equalize: bool,
    /// Training feature bundle.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Test feature bundle.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Stream plan file.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Output directory, or the plan file for `partition`.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Server socket address.
    #[arg(long)]
    pub address: Option<String>,
    /// Clients the server waits for.
    #[arg(long)]
    pub expected: Option<u64>,
    /// Embedding width, for a server started without training data.
    #[arg(long)]
    pub width: Option<usize>,
    /// Connection attempts per client.
    #[arg(long)]
    pub attempts: Option<usize>,
    /// Join only this plan client, e.g. `t0-c1`.
    #[arg(long)]
    pub client: Option<String>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        if config.schema_version != SCHEMA_VERSION {
            bail!("unsupported config schema version {} (expected {SCHEMA_VERSION})", config.schema_version);
        }
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        fn set_opt<T: Clone>(slot: &mut Option<T>, v: &Option<T>) {
            if v.is_some() {
                *slot = v.clone();
            }
        }
        set(&mut self.gamma, &o.gamma);
        set(&mut self.seed, &o.seed);
        set(&mut self.aggregation, &o.aggregation);
        set(&mut self.retention, &o.retention);
        if o.final_only {
            self.eval_every_round = false;
        }
        let p = &mut self.partition;
        set(&mut p.tasks, &o.tasks);
        set(&mut p.clients, &o.clients);
        set(&mut p.alpha, &o.alpha);
        set(&mut p.r_disjoint, &o.r_disjoint);
        set(&mut p.r_blurry, &o.r_blurry);
        if o.no_equalize {
            p.equalize = false;
        }
        let paths = &mut self.paths;
        set_opt(&mut paths.train, &o.train);
        set_opt(&mut paths.test, &o.test);
        set_opt(&mut paths.plan, &o.plan);
        set_opt(&mut paths.output, &o.output);
        let n = &mut self.network;
        set(&mut n.address, &o.address);
        set_opt(&mut n.expected, &o.expected);
        set_opt(&mut n.width, &o.width);
        set(&mut n.attempts, &o.attempts);
        set_opt(&mut n.client, &o.client);
    }

    /// Checks the fields every mode needs plus those the chosen mode needs.
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            bail!("gamma must be a finite non-negative number, got {}", self.gamma);
        }
        if self.aggregation == Aggregation::Literal && self.gamma == 0.0 {
            bail!("literal aggregation needs gamma > 0");
        }
        let need = |field: &Option<PathBuf>, name: &str| -> Result<()> {
            if field.is_none() {
                bail!("mode {:?} needs paths.{name}", self.mode);
            }
            Ok(())
        };
        match self.mode {
            Mode::InProcess => {
                need(&self.paths.train, "train")?;
                need(&self.paths.test, "test")?;
                need(&self.paths.plan, "plan")?;
                need(&self.paths.output, "output")?;
            }
            Mode::Serve => {
                self.socket()?;
                need(&self.paths.output, "output")?;
                if self.network.width.is_none() && self.paths.train.is_none() {
                    bail!("serve needs network.width or paths.train to know the embedding width");
                }
                if self.network.expected.is_none() && (self.paths.train.is_none() || self.paths.plan.is_none()) {
                    bail!("serve needs network.expected, or paths.train and paths.plan to count clients");
                }
            }
            Mode::Join => {
                need(&self.paths.train, "train")?;
                if self.network.client.is_some() && self.paths.plan.is_none() {
                    bail!("network.client needs paths.plan");
                }
                if self.network.attempts == 0 {
                    bail!("network.attempts must be at least 1");
                }
            }
        }
        Ok(())
    }

    pub fn socket(&self) -> Result<SocketAddr> {
        self.network.address.parse().with_context(|| format!("bad network address {:?}", self.network.address))
    }

    pub fn plan_params(&self) -> PlanParams {
        let p = &self.partition;
        PlanParams {
            tasks: p.tasks,
            clients_per_task: p.clients,
            alpha: p.alpha,
            r_disjoint: p.r_disjoint,
            r_blurry: p.r_blurry,
            seed: self.seed,
            equalize: p.equalize,
        }
    }

    pub fn aggregation_mode(&self) -> AggregationMode {
        match self.aggregation {
            Aggregation::Simplified => AggregationMode::Simplified,
            Aggregation::Literal => AggregationMode::Literal,
        }
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            gamma: self.gamma,
            mode: self.aggregation_mode(),
            orientation: match self.retention {
                Retention::FirstOverCurrent => RetentionOrientation::FirstOverCurrent,
                Retention::CurrentOverFirst => RetentionOrientation::CurrentOverFirst,
            },
            eval_every_task: self.eval_every_round,
        }
    }
}
