//! Experiment configuration, read from TOML. Unknown keys are rejected.

use std::path::PathBuf;

use isingfield::field::{LoopDiameter, TestFunction};
use isingfield::lattice::{Boundary, Region};
use isingfield::sampler::{Algorithm, ChainConfig, ModelParams};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    OracleCheck,
    TwoPoint,
    ThetaScaling,
    FieldDist,
    CutoffRemoval,
    Crossings,
    PottsField,
    NearCritical,
    FreeEnergy,
    LoopValidate,
}

impl Experiment {
    pub fn tag(self) -> &'static str {
        match self {
            Experiment::OracleCheck => "oracle-check",
            Experiment::TwoPoint => "two-point",
            Experiment::ThetaScaling => "theta-scaling",
            Experiment::FieldDist => "field-dist",
            Experiment::CutoffRemoval => "cutoff-removal",
            Experiment::Crossings => "crossings",
            Experiment::PottsField => "potts-field",
            Experiment::NearCritical => "near-critical",
            Experiment::FreeEnergy => "free-energy",
            Experiment::LoopValidate => "loop-validate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub output: PathBuf,
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub chain: ChainBlock,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub sides: Vec<usize>,
    #[serde(default)]
    pub boundary: Option<Boundary>,
    /// Torus side over box side for box experiments.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_q")]
    pub q: u32,
    /// Lattice field `H`.
    #[serde(default)]
    pub field: f64,
}

fn default_q() -> u32 {
    2
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { q: 2, field: 0.0 }
    }
}

impl ModelConfig {
    pub fn params(&self) -> ModelParams {
        ModelParams::critical(self.q).with_field(self.field)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainBlock {
    pub samples: usize,
    /// Defaults to `10 L` with `L` the torus side.
    #[serde(default)]
    pub thermalization: Option<usize>,
    #[serde(default = "default_decorrelation")]
    pub decorrelation: usize,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
}

fn default_decorrelation() -> usize {
    2
}

fn default_algorithm() -> Algorithm {
    Algorithm::SwendsenWang
}

impl ChainBlock {
    pub fn chain(&self, seed: u64, stream: u64, torus_side: usize, n_samples: usize) -> ChainConfig {
        ChainConfig {
            seed,
            stream,
            thermalization_sweeps: self.thermalization.unwrap_or(10 * torus_side),
            decorrelation_sweeps: self.decorrelation,
            n_samples,
            algorithm: self.algorithm,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub r_max: Option<usize>,
    pub fit_window: Option<(f64, f64)>,
    pub epsilons: Option<Vec<f64>>,
    pub loop_diameter: Option<LoopDiameter>,
    pub test_functions: Option<Vec<TestFunction>>,
    /// Known scale factor; estimated from a separate chain when absent.
    pub theta: Option<f64>,
    pub theta_samples: Option<usize>,
    pub h_grid: Option<Vec<f64>>,
    /// Free energy: the default grid is built from `h`.
    pub h: Option<f64>,
    pub t_grid: Option<Vec<f64>>,
    pub field_window: Option<Region>,
    pub center: Option<(f64, f64)>,
    pub r1: Option<f64>,
    pub r2: Option<f64>,
    pub potts_q: Option<Vec<u32>>,
    /// Loops of clusters at least this large are exported as polylines.
    pub export_min_size: Option<u32>,
}

/// A configuration error naming the offending key.
#[derive(Debug, thiserror::Error)]
#[error("{key}: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

fn bad(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { key: key.into(), message: message.into() }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let key = unknown_key(&message).unwrap_or_else(|| "config".into());
            let at = e.span().map(|s| line_of(text, s.start)).map_or(String::new(), |l| format!(" (line {l})"));
            bad(&key, format!("{message}{at}"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn boundary(&self) -> Boundary {
        self.geometry.boundary.unwrap_or(match self.experiment {
            Experiment::OracleCheck => Boundary::Free,
            _ => Boundary::Torus,
        })
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let e = self.experiment;
        let g = &self.geometry;
        if g.sides.is_empty() || g.sides.contains(&0) {
            return Err(bad("geometry.sides", "need at least one positive side"));
        }
        if self.boundary() == Boundary::Free && !matches!(e, Experiment::OracleCheck | Experiment::LoopValidate) {
            return Err(bad("geometry.boundary", format!("{} runs on a torus", e.tag())));
        }
        if !(g.margin >= 1.0) || !g.margin.is_finite() {
            return Err(bad("geometry.margin", "must be at least 1"));
        }
        if self.chain.samples == 0 {
            return Err(bad("chain.samples", "must be positive"));
        }
        if self.model.q < 2 {
            return Err(bad("model.q", "need q >= 2"));
        }
        if !self.model.field.is_finite() {
            return Err(bad("model.field", "must be finite"));
        }
        if self.model.field != 0.0 && !matches!(e, Experiment::OracleCheck | Experiment::TwoPoint) {
            return Err(bad("model.field", format!("{} sets its own field; use the analysis block", e.tag())));
        }
        if self.model.q != 2 && matches!(e, Experiment::FieldDist | Experiment::CutoffRemoval | Experiment::NearCritical | Experiment::FreeEnergy) {
            return Err(bad("model.q", format!("{} is an Ising experiment", e.tag())));
        }
        if self.chain.algorithm == Algorithm::Wolff && (self.model.q != 2 || self.model.field != 0.0 || matches!(e, Experiment::NearCritical | Experiment::FreeEnergy | Experiment::PottsField)) {
            return Err(bad("chain.algorithm", "wolff needs q = 2 and no field"));
        }
        if e == Experiment::OracleCheck && g.sides.iter().any(|&s| 2 * s * s.saturating_sub(1) > 24) {
            return Err(bad("geometry.sides", "oracle-check enumerates bonds; use free sides of at most 3"));
        }
        let a = &self.analysis;
        if a.theta.is_some_and(|t| !(t > 0.0) || !t.is_finite()) {
            return Err(bad("analysis.theta", "must be positive"));
        }
        if a.theta.is_some() && g.sides.len() > 1 {
            return Err(bad("analysis.theta", "a fixed scale factor needs a single side"));
        }
        if let Some((lo, hi)) = a.fit_window {
            if !(0.0 < lo && lo < hi) {
                return Err(bad("analysis.fit_window", "need 0 < lo < hi"));
            }
        }
        if let Some(eps) = &a.epsilons {
            if eps.is_empty() || eps.iter().any(|x| !(*x > 0.0)) {
                return Err(bad("analysis.epsilons", "need positive cutoffs"));
            }
        }
        match e {
            Experiment::NearCritical => match &a.h_grid {
                Some(h) if !h.is_empty() && h.iter().all(|x| *x >= 0.0 && x.is_finite()) => {}
                _ => return Err(bad("analysis.h_grid", "near-critical needs a nonempty grid of h >= 0")),
            },
            Experiment::FreeEnergy => {
                if a.h.is_none() == a.t_grid.is_none() {
                    return Err(bad("analysis.h", "free-energy needs exactly one of analysis.h and analysis.t_grid"));
                }
                if a.h.is_some_and(|h| !(h > 0.0)) {
                    return Err(bad("analysis.h", "must be positive"));
                }
            }
            _ => {}
        }
        if let Some(qs) = &a.potts_q {
            if qs.is_empty() || qs.iter().any(|&q| q < 2) {
                return Err(bad("analysis.potts_q", "need q >= 2"));
            }
        }
        if let (Some(r1), Some(r2)) = (a.r1, a.r2) {
            if !(0.0 < r1 && r1 < r2) {
                return Err(bad("analysis.r1", "need 0 < r1 < r2"));
            }
        }
        Ok(())
    }

    pub fn epsilons(&self, spacing: f64) -> Vec<f64> {
        let mut eps = self.analysis.epsilons.clone().unwrap_or_else(|| vec![4.0 * spacing, 8.0 * spacing, 16.0 * spacing, 0.125, 0.25]);
        eps.sort_by(f64::total_cmp);
        eps.dedup();
        eps
    }

    pub fn test_functions(&self, unit_box: Region) -> Vec<TestFunction> {
        self.analysis.test_functions.clone().unwrap_or_else(|| vec![TestFunction::indicator(unit_box)])
    }
}

fn unknown_key(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
experiment = "theta-scaling"
seed = 7
output = "out"

[geometry]
sides = [8, 16]

[chain]
samples = 100
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.experiment, Experiment::ThetaScaling);
        assert_eq!(c.geometry.margin, 2.0);
        assert_eq!(c.boundary(), Boundary::Torus);
        assert_eq!(c.chain.chain(7, 3, 16, 100).thermalization_sweeps, 160);
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = MINIMAL.replace("samples = 100", "samples = 100\nsweeps = 4");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert_eq!(err.key, "sweeps");
        assert!(err.to_string().contains("line 11"), "{err}");
    }

    #[test]
    fn invalid_values_are_named() {
        let err = ExperimentConfig::parse(&MINIMAL.replace("samples = 100", "samples = 0")).unwrap_err();
        assert_eq!(err.key, "chain.samples");
        let err = ExperimentConfig::parse(&format!("{MINIMAL}\n[analysis]\ntheta = 0.5\n")).unwrap_err();
        assert_eq!(err.key, "analysis.theta");
    }

    #[test]
    fn default_cutoffs_are_distinct() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.epsilons(1.0 / 128.0), vec![1.0 / 32.0, 1.0 / 16.0, 0.125, 0.25]);
    }

    #[test]
    fn shipped_configs_parse() {
        for text in [
            include_str!("../../../configs/oracle_check.toml"),
            include_str!("../../../configs/two_point.toml"),
            include_str!("../../../configs/theta_scaling.toml"),
            include_str!("../../../configs/field_dist.toml"),
            include_str!("../../../configs/cutoff_removal.toml"),
            include_str!("../../../configs/crossings.toml"),
            include_str!("../../../configs/potts_field.toml"),
            include_str!("../../../configs/near_critical.toml"),
            include_str!("../../../configs/free_energy.toml"),
            include_str!("../../../configs/loop_validate.toml"),
        ] {
            ExperimentConfig::parse(text).unwrap();
        }
    }
}
