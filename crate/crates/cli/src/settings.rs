//! Flag values and config-file values share one type; flags win.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use tetris_core::model::Hyperparams;
use tetris_core::sampler::{ChainConfig, IndicatorMove, SharingMode};
use tetris_core::sim::ScenarioConfig;

use crate::Usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Constrain {
    /// Any sharing pattern.
    Free,
    /// Only common and study-specific factors.
    CommonSpecific,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MoveArg {
    Conditional,
    Collapsed,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Settings {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total sweeps, burn-in included [default: 10000]
    #[arg(long)]
    pub iterations: Option<usize>,
    /// [default: 8000]
    #[arg(long)]
    #[serde(alias = "burn_in")]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub a1: Option<f64>,
    #[arg(long)]
    pub a2: Option<f64>,
    #[arg(long)]
    #[serde(alias = "a_psi")]
    pub a_psi: Option<f64>,
    #[arg(long)]
    #[serde(alias = "b_psi")]
    pub b_psi: Option<f64>,
    /// Worker threads for replicates
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, value_enum)]
    pub constrain: Option<Constrain>,
    /// Indicator matrix to hold fixed: estimate.json, a directory holding
    /// one, or a CSV of 0/1 rows
    #[arg(long)]
    #[serde(alias = "fixed_indicator")]
    pub fixed_indicator: Option<PathBuf>,
    /// Credible-ball level [default: 0.95]
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long, value_enum)]
    #[serde(alias = "indicator_move")]
    pub indicator_move: Option<MoveArg>,
    #[arg(long)]
    #[serde(alias = "max_free_factors")]
    pub max_free_factors: Option<usize>,
    /// Simulation scenario: 1, 2 or 3
    #[arg(long)]
    pub scenario: Option<u8>,
    /// Subjects per study
    #[arg(long)]
    pub n: Option<usize>,
    /// Features
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub sparsity: Option<f64>,
    /// Partially shared factors
    #[arg(long)]
    pub partial: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Thinning of the fixed-indicator rerun in `pipeline` [default: 4]
    #[arg(long)]
    #[serde(alias = "fixed_thin")]
    pub fixed_thin: Option<usize>,
}

macro_rules! overlay {
    ($top:expr, $base:expr, $($f:ident),+) => {
        Settings { $($f: $top.$f.or($base.$f)),+ }
    };
}

impl Settings {
    /// Values from `self`, falling back to `base`.
    pub fn over(self, base: Settings) -> Settings {
        overlay!(
            self,
            base,
            seed,
            iterations,
            burn_in,
            thin,
            alpha,
            beta,
            nu,
            a1,
            a2,
            a_psi,
            b_psi,
            jobs,
            constrain,
            fixed_indicator,
            level,
            indicator_move,
            max_free_factors,
            scenario,
            n,
            p,
            sparsity,
            partial,
            replicates,
            fixed_thin
        )
    }

    pub fn load(path: &Path) -> anyhow::Result<Settings> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            anyhow::Error::new(e).context(format!("cannot read config {}", path.display()))
        })?;
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        let parsed = match ext.as_str() {
            "toml" => toml::from_str(&text).map_err(|e| e.to_string()),
            "json" => serde_json::from_str(&text).map_err(|e| e.to_string()),
            _ => {
                return Err(Usage(format!(
                    "config {} must end in .toml or .json",
                    path.display()
                ))
                .into())
            }
        };
        parsed.map_err(|e| Usage(format!("invalid config {}: {e}", path.display())).into())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn hyperparams(&self) -> Hyperparams {
        let d = Hyperparams::default();
        Hyperparams {
            alpha: self.alpha.unwrap_or(d.alpha),
            beta: self.beta.unwrap_or(d.beta),
            nu: self.nu.unwrap_or(d.nu),
            a1: self.a1.unwrap_or(d.a1),
            a2: self.a2.unwrap_or(d.a2),
            a_psi: self.a_psi.unwrap_or(d.a_psi),
            b_psi: self.b_psi.unwrap_or(d.b_psi),
        }
    }

    pub fn sharing(&self) -> SharingMode {
        match self.constrain {
            Some(Constrain::CommonSpecific) => SharingMode::CommonAndSpecificOnly,
            _ => SharingMode::Free,
        }
    }

    pub fn indicator_move(&self) -> IndicatorMove {
        match self.indicator_move {
            Some(MoveArg::Collapsed) => IndicatorMove::Collapsed,
            _ => IndicatorMove::Conditional,
        }
    }

    pub fn chain(&self) -> ChainConfig {
        let d = ChainConfig::default();
        ChainConfig {
            n_iterations: self.iterations.unwrap_or(d.n_iterations),
            burn_in: self.burn_in.unwrap_or(d.burn_in),
            thin: self.thin.unwrap_or(d.thin),
            fixed_indicator: None,
            sharing: self.sharing(),
            indicator_move: self.indicator_move(),
            seed: self.seed(),
            max_free_factors: self.max_free_factors.unwrap_or(d.max_free_factors),
            log_every: d.log_every,
        }
    }

    pub fn level(&self) -> f64 {
        self.level.unwrap_or(0.95)
    }

    pub fn scenario_config(&self) -> Result<ScenarioConfig, Usage> {
        let sparsity = self.sparsity.unwrap_or(0.8);
        let n = self.n.unwrap_or(10);
        let p = self.p.unwrap_or(60);
        let partial = self.partial.unwrap_or(0);
        match self.scenario.unwrap_or(1) {
            1 => {
                if partial != 0 {
                    return Err(Usage(
                        "scenario 1 has a fixed factor layout; --partial does not apply".into(),
                    ));
                }
                Ok(ScenarioConfig::Scenario1 { sparsity, n, p })
            }
            2 => Ok(ScenarioConfig::Scenario2 {
                n,
                p,
                sparsity,
                n_partial: partial,
            }),
            3 => {
                if self.n.is_some_and(|v| v != 10) || self.p.is_some_and(|v| v != 60) {
                    return Err(Usage("scenario 3 is fixed at n = 10, p = 60".into()));
                }
                if partial > 1 {
                    return Err(Usage("scenario 3 takes --partial 0 or 1".into()));
                }
                Ok(ScenarioConfig::Scenario3 {
                    n_partial: partial,
                    sparsity,
                })
            }
            other => Err(Usage(format!(
                "unknown scenario {other}; expected 1, 2 or 3"
            ))),
        }
    }
}
