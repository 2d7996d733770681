use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pc_extrap::extrapolate::{Coefficients, ExtrapolationProblem};
use pc_extrap::increments::{BlockVector, CoefficientFunction, Horizon, IncrementParams};
use pc_extrap::minimax::DensityClassSpec;
use pc_extrap::spectral::{DensitySpec, QuadratureGrid, Scalar, SpectralDensityModel, DEFAULT_NODES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Estimate,
    EstimateFinite,
    Saddle,
    Minimax,
    Validate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Estimate => "estimate",
            Command::EstimateFinite => "estimate-finite",
            Command::Saddle => "saddle",
            Command::Minimax => "minimax",
            Command::Validate => "validate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    pub d: u32,
    #[serde(rename = "T")]
    pub period: f64,
    pub tau: u32,
    #[serde(rename = "K")]
    pub components: usize,
    #[serde(rename = "J")]
    pub lags: usize,
    /// Finite horizon `N`; absent means the infinite horizon.
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
}

fn default_spp() -> usize {
    64
}

fn one() -> f64 {
    1.0
}

/// Coefficient function of the functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ASpec {
    /// Block coefficients `a_j` in paired order, one row of K entries per block.
    Blocks { blocks: Vec<Vec<Scalar>> },
    /// `amplitude * e^{-rate t} cos(frequency t)` on `[0, n_blocks T]`.
    Exponential {
        rate: f64,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        frequency: f64,
        n_blocks: usize,
        #[serde(default = "default_spp")]
        samples_per_period: usize,
    },
    /// `sum_i coefficients[i] t^i` on `[0, n_blocks T]`.
    Polynomial {
        coefficients: Vec<f64>,
        n_blocks: usize,
        #[serde(default = "default_spp")]
        samples_per_period: usize,
    },
    /// Samples at spacing `dt` starting from `t = 0`.
    Tabulated { dt: f64, values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSettings {
    #[serde(default = "McSettings::default_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "McSettings::default_window")]
    pub window: usize,
}

impl McSettings {
    fn default_paths() -> usize {
        10_000
    }
    fn default_window() -> usize {
        400
    }
}

impl Default for McSettings {
    fn default() -> Self {
        Self {
            n_paths: Self::default_paths(),
            seed: 0,
            window: Self::default_window(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaddleSettings {
    #[serde(default = "one")]
    pub power: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub innovation_dim: Option<usize>,
    /// Monte Carlo replications of the error variance; 0 skips the check.
    #[serde(default)]
    pub mc_reps: usize,
}

impl Default for SaddleSettings {
    fn default() -> Self {
        Self {
            power: 1.0,
            innovation_dim: None,
            mc_reps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinimaxSettings {
    #[serde(default = "MinimaxSettings::default_probes")]
    pub n_probes: usize,
    #[serde(default = "MinimaxSettings::default_starts")]
    pub starts: usize,
    /// Also certify a deliberately corrupted density, which must fail.
    #[serde(default)]
    pub negative_control: bool,
}

impl MinimaxSettings {
    fn default_probes() -> usize {
        100
    }
    fn default_starts() -> usize {
        1
    }
}

impl Default for MinimaxSettings {
    fn default() -> Self {
        Self {
            n_probes: Self::default_probes(),
            starts: Self::default_starts(),
            negative_control: false,
        }
    }
}

fn default_nodes() -> usize {
    DEFAULT_NODES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    pub params: ParamsSpec,
    pub a: ASpec,
    /// Defaults to the white-increment-matched density.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<DensitySpec>,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<DensityClassSpec>,
    #[serde(default)]
    pub mc: McSettings,
    #[serde(default)]
    pub saddle: SaddleSettings,
    #[serde(default)]
    pub minimax: MinimaxSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("config field `{path}`: {}", e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn increment_params(&self) -> Result<IncrementParams> {
        let p = &self.params;
        IncrementParams::new(p.d, p.period, p.tau, p.components, p.lags).map_err(|e| anyhow::anyhow!("config field `params`: {e}"))
    }

    /// Checks the module preconditions that can be decided without solving.
    pub fn validate(&self) -> Result<()> {
        let params = self.increment_params()?;
        QuadratureGrid::new(self.nodes).map_err(|e| anyhow::anyhow!("config field `nodes`: {e}"))?;
        if let ASpec::Blocks { blocks } = &self.a {
            if blocks.is_empty() || blocks.iter().any(|b| b.len() != params.components) {
                bail!("config field `a.blocks`: need at least one block of K = {} entries", params.components);
            }
        }
        if let Some(d) = &self.density {
            let m = SpectralDensityModel::from_spec(d).map_err(|e| anyhow::anyhow!("config field `density`: {e}"))?;
            if m.dim() != params.components {
                bail!("config field `density`: dimension {} differs from K = {}", m.dim(), params.components);
            }
        }
        if !(self.saddle.power > 0.0) {
            bail!("config field `saddle.power`: must be positive");
        }
        if self.mc.window < 2 {
            bail!("config field `mc.window`: need at least 2 past blocks");
        }
        if let Some(out) = &self.output {
            if out.as_os_str().is_empty() {
                bail!("config field `output`: empty path");
            }
        }
        Ok(())
    }

    pub fn density_model(&self) -> Result<SpectralDensityModel> {
        Ok(match &self.density {
            Some(d) => SpectralDensityModel::from_spec(d)?,
            None => SpectralDensityModel::white_increment_matched(self.params.components)?,
        })
    }

    fn coefficients(&self) -> Result<Coefficients> {
        let t = self.params.period;
        let k = self.params.components;
        Ok(match &self.a {
            ASpec::Blocks { blocks } => Coefficients::Blocks(BlockVector::from_blocks(
                k,
                blocks.iter().map(|r| r.iter().map(|z| z.value()).collect()).collect(),
            )?),
            ASpec::Exponential {
                rate,
                amplitude,
                frequency,
                n_blocks,
                samples_per_period,
            } => {
                let (r, a, w) = (*rate, *amplitude, *frequency);
                Coefficients::Function(CoefficientFunction::from_fn(t, *samples_per_period, *n_blocks, move |x| {
                    a * (-r * x).exp() * (w * x).cos()
                })?)
            }
            ASpec::Polynomial {
                coefficients,
                n_blocks,
                samples_per_period,
            } => {
                let c = coefficients.clone();
                Coefficients::Function(CoefficientFunction::from_fn(t, *samples_per_period, *n_blocks, move |x| {
                    c.iter().rev().fold(0.0, |acc, ci| acc * x + ci)
                })?)
            }
            ASpec::Tabulated { dt, values } => Coefficients::Function(CoefficientFunction::from_samples(t, *dt, values)?),
        })
    }

    pub fn horizon(&self, command: Command) -> Result<Horizon> {
        match (command, self.params.horizon) {
            (Command::EstimateFinite | Command::Saddle, None) => {
                bail!("config field `params.N`: required by `{}`", command.name())
            }
            (Command::Estimate, _) => Ok(Horizon::Infinite),
            (_, Some(n)) => Ok(Horizon::Finite(n)),
            (_, None) => Ok(Horizon::Infinite),
        }
    }

    pub fn problem(&self, command: Command) -> Result<ExtrapolationProblem> {
        Ok(ExtrapolationProblem {
            params: self.increment_params()?,
            a: self.coefficients().context("config field `a`")?,
            horizon: self.horizon(command)?,
            density: self.density_model().context("config field `density`")?,
            grid: QuadratureGrid::new(self.nodes)?,
        })
    }
}
