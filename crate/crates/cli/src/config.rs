//! Experiment configuration: one TOML file reproduces a whole study.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use sortflow_core::delay::TimingParams;
use sortflow_core::network::{generate_standard_layout, parse_layout, Demand, Layout};
use sortflow_core::solver::SolverConfig;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub layout: LayoutSource,
    #[serde(default)]
    pub timing: TimingSection,
    #[serde(default)]
    pub demand: DemandSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub decompose: DecomposeSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSource {
    /// Path to a layout file, relative to the config file.
    pub path: Option<PathBuf>,
    pub generate: Option<GenerateSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSpec {
    pub rows: usize,
    pub cols: usize,
    pub workstations: usize,
    pub dropoffs: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSection {
    pub t1: f64,
    pub t2: f64,
    pub t_load: f64,
    pub t_drop: f64,
    /// Second moments; defaults make loading and dropping deterministic.
    pub t_load_sq: Option<f64>,
    pub t_drop_sq: Option<f64>,
}

impl Default for TimingSection {
    fn default() -> Self {
        TimingSection { t1: 1.0, t2: 4.0, t_load: 3.0, t_drop: 1.0, t_load_sq: None, t_drop_sq: None }
    }
}

impl TimingSection {
    pub fn to_params(&self) -> TimingParams {
        TimingParams {
            t1: self.t1,
            t2: self.t2,
            t_load_mean: self.t_load,
            t_load_sq: self.t_load_sq.unwrap_or(self.t_load * self.t_load),
            t_drop_mean: self.t_drop,
            t_drop_sq: self.t_drop_sq.unwrap_or(self.t_drop * self.t_drop),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSection {
    /// Total estimated throughput, split uniformly over drop-offs.
    pub lambda: Option<f64>,
    /// Or an explicit per-drop-off CSV (`dropoff_id,demand`).
    pub csv: Option<PathBuf>,
}

impl Default for DemandSection {
    fn default() -> Self {
        DemandSection { lambda: Some(0.1), csv: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub epsilon: f64,
    pub max_iters: usize,
    pub line_search_iters: usize,
    pub seed: u64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig::default();
        SolverSection {
            epsilon: d.epsilon,
            max_iters: d.max_iters,
            line_search_iters: d.line_search_iters,
            seed: d.seed,
        }
    }
}

impl SolverSection {
    pub fn to_config(&self) -> SolverConfig {
        SolverConfig {
            epsilon: self.epsilon,
            max_iters: self.max_iters,
            line_search_iters: self.line_search_iters,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecomposeSection {
    pub seed: u64,
}

impl Default for DecomposeSection {
    fn default() -> Self {
        DecomposeSection { seed: 1 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub policies: Vec<String>,
    pub robots: Vec<u32>,
    pub ticks: u64,
    pub trials: u32,
    pub assertions: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            policies: vec!["flow".into(), "random".into(), "zoning".into()],
            robots: vec![10, 15, 20, 25, 30, 35],
            ticks: 3000,
            trials: 50,
            assertions: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub seed_base: u64,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("out"), seed_base: 1000 }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // Paths are relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = &config.layout.path {
            if p.is_relative() {
                config.layout.path = Some(base.join(p));
            }
        }
        if let Some(p) = &config.demand.csv {
            if p.is_relative() {
                config.demand.csv = Some(base.join(p));
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.layout.path, &self.layout.generate) {
            (None, None) => bail!("layout needs either `path` or `generate`"),
            (Some(_), Some(_)) => bail!("layout takes `path` or `generate`, not both"),
            _ => {}
        }
        if self.demand.lambda.is_none() && self.demand.csv.is_none() {
            bail!("demand needs `lambda` or `csv`");
        }
        if self.sim.policies.is_empty() {
            bail!("sim.policies must be non-empty");
        }
        for p in &self.sim.policies {
            if !matches!(p.as_str(), "flow" | "random" | "zoning") {
                bail!("unknown policy `{p}` (expected flow, random, or zoning)");
            }
        }
        if self.sim.robots.is_empty() {
            bail!("sim.robots must be non-empty");
        }
        if self.sim.trials == 0 {
            bail!("sim.trials must be positive");
        }
        self.timing.to_params().validate().map_err(anyhow::Error::from)?;
        Ok(())
    }

    /// Load or generate the layout and return it with its canonical text.
    pub fn resolve_layout(&self) -> Result<(Layout, String)> {
        if let Some(path) = &self.layout.path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading layout {}", path.display()))?;
            let layout = parse_layout(&text)?;
            Ok((layout.clone(), layout.serialize()))
        } else {
            let spec = self.layout.generate.as_ref().expect("validated");
            let layout = generate_standard_layout(
                spec.rows,
                spec.cols,
                spec.workstations,
                spec.dropoffs,
                spec.seed,
            )?;
            let text = layout.serialize();
            Ok((layout, text))
        }
    }

    /// Demand vector for a layout. A `--lambda` override wins, then an
    /// explicit CSV, then the config's uniform lambda.
    pub fn resolve_demand(&self, layout: &Layout, lambda_override: Option<f64>) -> Result<Demand> {
        let n_d = layout.dropoff_count();
        if let Some(lambda) = lambda_override {
            return Ok(Demand::uniform(lambda, n_d));
        }
        if let Some(path) = &self.demand.csv {
            let file = std::fs::File::open(path)
                .with_context(|| format!("reading demand {}", path.display()))?;
            let demand = sortflow_core::files::read_demand_csv(file)?;
            if demand.per_dropoff.len() != n_d {
                bail!("demand file lists {} drop-offs, layout has {n_d}", demand.per_dropoff.len());
            }
            return Ok(demand);
        }
        Ok(Demand::uniform(self.demand.lambda.expect("validated"), n_d))
    }
}
