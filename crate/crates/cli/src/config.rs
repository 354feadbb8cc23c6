use std::path::{Path, PathBuf};

use merton_impact::corrector1d::ShootOptions;
use merton_impact::market_sim::SimConfig;
use merton_impact::merton::{InvestorImpactParams, MarketParams, MertonSolution};
use merton_impact::validator::StudyConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub mu: Vec<f64>,
    /// Volatility rows: `sigma[j]` belongs to asset `j`.
    pub sigma: Vec<Vec<f64>>,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidatorSection {
    pub eps_grid: Vec<f64>,
    pub ratio_tol: f64,
    pub slack_tol: f64,
}

impl Default for ValidatorSection {
    fn default() -> Self {
        let s = StudyConfig::default();
        Self { eps_grid: vec![0.2, 0.1, 0.05, 0.025], ratio_tol: s.ratio_tol, slack_tol: s.slack_tol }
    }
}

impl ValidatorSection {
    pub fn study(&self) -> StudyConfig {
        StudyConfig { ratio_tol: self.ratio_tol, slack_tol: self.slack_tol }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub seed: u64,
    /// Feynman–Kac paths; zero skips the Monte-Carlo check.
    pub fk_paths: usize,
    pub fk_steps: usize,
    /// Multiplies the solved ergodic constant before the checks.
    pub lambda_scale: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { seed: 1, fk_paths: 20_000, fk_steps: 200, lambda_scale: 1.0 }
    }
}

/// Derived constants; when present in a config file they are compared with
/// the recomputed values on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedConstants {
    pub m_star: f64,
    pub alpha: f64,
    pub pi: Vec<f64>,
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub market: MarketSection,
    pub investor: InvestorImpactParams,
    #[serde(default)]
    pub corrector: ShootOptions,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub validator: ValidatorSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived: Option<DerivedConstants>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}

const DERIVED_TOL: f64 = 1e-10;

impl RunConfig {
    /// d=2 benchmark: μ=(0.04,0.05), r=0.02, σ=[[0.30,0],[0.09,0.28]],
    /// R=0.5, T=1, κ=1, m=3.
    pub fn benchmark() -> Self {
        Self {
            market: MarketSection { mu: vec![0.04, 0.05], sigma: vec![vec![0.30, 0.0], vec![0.09, 0.28]], r: 0.02 },
            investor: InvestorImpactParams { risk_aversion: 0.5, horizon: 1.0, kappa: 1.0, m: 3.0 },
            corrector: ShootOptions::default(),
            sim: SimConfig::default(),
            validator: ValidatorSection::default(),
            verify: VerifySection::default(),
            derived: None,
            output_dir: default_output_dir(),
            cache_dir: default_cache_dir(),
        }
    }

    pub fn market(&self) -> Result<MarketParams, CliError> {
        MarketParams::new(self.market.mu.clone(), self.market.sigma.clone(), self.market.r).map_err(CliError::config)
    }

    pub fn merton(&self) -> Result<MertonSolution, CliError> {
        MertonSolution::new(&self.market()?, &self.investor).map_err(CliError::config)
    }

    pub fn derived(&self) -> Result<DerivedConstants, CliError> {
        let sol = self.merton()?;
        Ok(DerivedConstants {
            m_star: self.investor.m_star(),
            alpha: self.investor.alpha(),
            pi: sol.pi.iter().copied().collect(),
            nu: sol.nu,
        })
    }

    /// Schema-level checks plus recomputation of the derived constants.
    pub fn validate(&self) -> Result<DerivedConstants, CliError> {
        self.investor.validate().map_err(CliError::config)?;
        let d = self.derived()?;
        let sol = self.merton()?;
        // π must solve R Σ π = μ − r𝟙
        let resid = (sol.market.covariance() * &sol.pi * self.investor.risk_aversion - sol.market.excess_return()).amax();
        if resid > 1e-12 {
            return Err(CliError::Config(format!("Merton fractions fail their defining system by {resid:e}")));
        }
        if ((3.0 * self.investor.m - 2.0) * d.m_star - 1.0).abs() > 1e-14 {
            return Err(CliError::Config("inconsistent m*".into()));
        }
        if let Some(expected) = &self.derived {
            let close = |a: f64, b: f64| (a - b).abs() <= DERIVED_TOL * (1.0 + b.abs());
            let ok = close(expected.m_star, d.m_star)
                && close(expected.alpha, d.alpha)
                && close(expected.nu, d.nu)
                && expected.pi.len() == d.pi.len()
                && expected.pi.iter().zip(&d.pi).all(|(a, b)| close(*a, *b));
            if !ok {
                return Err(CliError::Config(format!("derived constants disagree: file {expected:?}, recomputed {d:?}")));
            }
        }
        let g = &self.validator.eps_grid;
        if g.is_empty() || g.iter().any(|e| !(*e > 0.0)) || g.windows(2).any(|p| p[1] >= p[0]) {
            return Err(CliError::Config(format!("eps_grid must be positive and strictly decreasing, got {g:?}")));
        }
        if self.sim.s0.len() != self.market.mu.len() {
            return Err(CliError::Config("sim.s0 must have one price per asset".into()));
        }
        if !(self.verify.lambda_scale > 0.0) {
            return Err(CliError::Config("verify.lambda_scale must be positive".into()));
        }
        Ok(d)
    }

    fn is_json(path: &Path) -> bool {
        path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
    }

    pub fn parse(text: &str, json: bool) -> Result<Self, CliError> {
        if json {
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
        }
    }

    pub fn render(&self, json: bool) -> Result<String, CliError> {
        if json {
            serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))
        } else {
            toml::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))
        }
    }

    /// TOML unless the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, Self::is_json(path))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = self.render(Self::is_json(path))?;
        std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}
