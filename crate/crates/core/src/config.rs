//! TOML experiment configuration shared by the command-line tool and bindings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nrde::NrdeConfig;
use crate::problems::{PayoffKind, ProblemSpec};
use crate::rng::derive_seed;
use crate::sde::{Dynamics, GridSpec, InitSampler};
use crate::train::{EvalConfig, TrainConfig};

const TAG_EVAL_SEED: u64 = 0x6576_616c;

fn d_rate() -> f64 {
    0.05
}
fn d_vol() -> f64 {
    0.3
}
fn d_init_mu() -> f64 {
    0.08
}
fn d_init_tau() -> f64 {
    0.1
}
fn d_init_sigma() -> f64 {
    0.1
}
fn d_kappa() -> f64 {
    0.8
}
fn d_mean_var() -> f64 {
    0.3
}
fn d_vol_of_vol() -> f64 {
    0.05
}
fn d_heston_x0() -> Vec<f64> {
    vec![1.0, 0.3]
}

/// Problem selection with its constants; unset constants take the standard values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// Brownian motion from zero with payoff (∫ Σ_i X^i dt)².
    Heat { dim: usize },
    /// Geometric Brownian motions with the lookback payoff.
    BlackScholes {
        dim: usize,
        #[serde(default = "d_rate")]
        rate: f64,
        #[serde(default = "d_vol")]
        vol: f64,
        /// Row-major correlation matrix; identity when absent.
        #[serde(default)]
        correlation: Option<Vec<f64>>,
        #[serde(default = "d_init_mu")]
        init_mu: f64,
        #[serde(default = "d_init_tau")]
        init_tau: f64,
        #[serde(default = "d_init_sigma")]
        init_sigma: f64,
    },
    /// Heston (S, V) with an autocallable payoff.
    Heston {
        #[serde(default = "d_rate")]
        mu: f64,
        #[serde(default = "d_kappa")]
        kappa: f64,
        #[serde(default = "d_mean_var")]
        mean_var: f64,
        #[serde(default = "d_vol_of_vol")]
        vol_of_vol: f64,
        #[serde(default = "d_heston_x0")]
        x0: Vec<f64>,
        #[serde(default)]
        payoff: Option<PayoffKind>,
    },
}

impl ProblemConfig {
    pub fn dim(&self) -> usize {
        match self {
            Self::Heat { dim } | Self::BlackScholes { dim, .. } => *dim,
            Self::Heston { .. } => 2,
        }
    }

    /// Builds the problem, replacing the default grid when `grid` is given.
    pub fn build(&self, grid: Option<GridSpec>) -> Result<ProblemSpec> {
        let mut spec = match self {
            Self::Heat { dim } => ProblemSpec::heat(*dim)?,
            Self::BlackScholes {
                dim,
                rate,
                vol,
                correlation,
                init_mu,
                init_tau,
                init_sigma,
            } => {
                let dynamics = match correlation {
                    Some(c) => Dynamics::black_scholes(*rate, vec![*vol; *dim], c)?,
                    None => Dynamics::black_scholes_uncorrelated(*rate, *vol, *dim)?,
                };
                ProblemSpec::new(
                    dynamics,
                    InitSampler::lognormal(*init_mu, *init_tau, *init_sigma)?,
                    *rate,
                    PayoffKind::Lookback,
                    GridSpec::default(),
                )?
            }
            Self::Heston {
                mu,
                kappa,
                mean_var,
                vol_of_vol,
                x0,
                payoff,
            } => {
                let mut spec = ProblemSpec::heston_autocallable()?;
                spec.dynamics = Dynamics::heston(*mu, *kappa, *mean_var, *vol_of_vol)?;
                spec.rate = *mu;
                spec.init = InitSampler::Fixed { x0: x0.clone() };
                if let Some(p) = payoff {
                    spec.payoff = p.clone();
                }
                spec
            }
        };
        if let Some(g) = grid {
            spec.grid = g;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "EvalSection::d_n_test")]
    pub n_test: usize,
    #[serde(default = "EvalSection::d_n_batches")]
    pub n_batches: usize,
    #[serde(default = "EvalSection::d_n_sims")]
    pub n_sims: usize,
}

impl EvalSection {
    fn d_n_test() -> usize {
        50
    }
    fn d_n_batches() -> usize {
        10
    }
    fn d_n_sims() -> usize {
        2000
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_test: 50,
            n_batches: 10,
            n_sims: 2000,
        }
    }
}

/// A full experiment: problem, model, training and evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub problem: ProblemConfig,
    /// Overrides the problem's default solution grid.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    pub model: NrdeConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    /// Optional CSV file memoizing Monte-Carlo reference values.
    #[serde(default)]
    pub oracle_cache: Option<String>,
}

impl ExperimentConfig {
    /// Parses TOML. `model.input_dim` may be omitted and is then taken from the problem.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let dim = table.get("problem").and_then(|p| p.as_table()).and_then(|p| {
            match p.get("kind").and_then(|k| k.as_str()) {
                Some("heston") => Some(2),
                _ => p.get("dim").and_then(|d| d.as_integer()),
            }
        });
        if let (Some(dim), Some(model)) = (dim, table.get_mut("model").and_then(|m| m.as_table_mut())) {
            model.entry("input_dim").or_insert(toml::Value::Integer(dim));
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.resolve()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Propagates the top-level seed and checks cross-section consistency.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.input_dim != self.problem.dim() {
            return Err(Error::Config(format!(
                "model.input_dim = {} but problem dimension is {}",
                self.model.input_dim,
                self.problem.dim()
            )));
        }
        self.problem_spec()?;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.seed = seed;
        self.resolve()
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        self.problem.build(self.grid)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_test: self.eval.n_test,
            n_batches: self.eval.n_batches,
            n_sims: self.eval.n_sims,
            seed: derive_seed(self.seed, &[TAG_EVAL_SEED]),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
