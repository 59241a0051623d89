//! Run configuration (TOML) and the objects built from it.
//!
//! Every section has defaults; a missing file section keeps them. The hash is
//! the SHA-256 of the canonical re-serialisation after overrides, so it does
//! not depend on comments or key order in the source file.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::EnsembleSpec;
use crate::error::{Error, Result};
use crate::expansion::{ExpansionConfig, ExpansionContext};
use crate::grid::Grid;
use crate::model::{Interpretation, ModelSpec};
use crate::noise::{CovarianceKernel, KernelKind};
use crate::simulator::{Frame, SimConfig};
use crate::stochastic::{solve_instantaneous_wave, StochNewtonOptions, StochWaveResult};
use crate::wave::{fhn_wave, nagumo_wave, NewtonOptions, RelaxOptions, WavePair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    Nagumo,
    Fhn,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub name: ModelName,
    pub a: f64,
    /// Diffusion of `u`.
    pub rho: f64,
    /// Diffusion of `w` (FHN).
    pub rho_w: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub interpretation: Interpretation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            name: ModelName::Nagumo,
            a: 0.25,
            rho: 1.0,
            rho_w: 0.01,
            epsilon: 0.01,
            gamma: 5.0,
            interpretation: Interpretation::Ito,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub half_length: f64,
    pub points: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            half_length: 40.0,
            points: 2048,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub k_max: usize,
    pub dt_sg: f64,
    pub t_int: Option<f64>,
    pub krylov: usize,
    /// Paths for the cubic speed estimate in `expand`; 0 skips it.
    pub cubic_paths: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            newton_tol: 1e-10,
            newton_max_iter: 50,
            k_max: 150,
            dt_sg: 2e-2,
            t_int: None,
            krylov: 40,
            cubic_paths: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub dt: f64,
    pub t_end: f64,
    pub frame: Frame,
    pub record_every: usize,
    pub sigma: f64,
    pub k_up: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            dt: 1e-2,
            t_end: 20.0,
            frame: Frame::Wave,
            record_every: 10,
            sigma: 0.1,
            k_up: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub realizations: usize,
    pub sigmas: Vec<f64>,
    pub seed: u64,
    pub t_eval: Option<f64>,
    pub expansion_order: usize,
    pub stability_eps: f64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self {
            realizations: 500,
            sigmas: vec![0.1],
            seed: 1,
            t_eval: None,
            expansion_order: 2,
            stability_eps: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub kernel: KernelSection,
    pub grid: GridSection,
    pub solver: SolverSection,
    pub simulation: SimulationSection,
    pub ensemble: EnsembleSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KernelSection(pub KernelKind);

impl Default for KernelSection {
    fn default() -> Self {
        Self(KernelKind::Gaussian { zeta: 1.0 })
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Hex SHA-256 of the canonical TOML.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Range checks and the model hypotheses. Failures are `Hypothesis` or
    /// `InvalidParameter` errors.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.name == ModelName::Custom {
            return Err(Error::Config(
                "custom kinetics are only available through the library".into(),
            ));
        }
        if !(m.a > 0.0 && m.a < 1.0) {
            return Err(Error::Hypothesis(format!("bistability needs 0 < a < 1, got {}", m.a)));
        }
        let g = &self.grid;
        if !(g.half_length > 0.0) || g.points < 16 {
            return Err(Error::InvalidParameter(
                "grid needs L > 0 and at least 16 points".into(),
            ));
        }
        let s = &self.simulation;
        if !(s.dt > 0.0 && s.t_end >= 0.0 && s.sigma >= 0.0) || s.record_every == 0 {
            return Err(Error::InvalidParameter("simulation section".into()));
        }
        let e = &self.ensemble;
        if e.realizations < 2 {
            return Err(Error::InvalidParameter("ensemble needs R >= 2".into()));
        }
        if e.sigmas.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::InvalidParameter("sigma must be non-negative".into()));
        }
        let model = self.build_model()?;
        model.check_hypotheses()?;
        self.build_kernel()?;
        Ok(())
    }

    pub fn build_model(&self) -> Result<ModelSpec> {
        let m = &self.model;
        match m.name {
            ModelName::Nagumo => ModelSpec::nagumo(m.a, m.rho, m.interpretation),
            ModelName::Fhn => ModelSpec::fhn(m.a, m.rho_w, m.epsilon, m.gamma, m.interpretation),
            ModelName::Custom => Err(Error::Config(
                "custom kinetics are only available through the library".into(),
            )),
        }
    }

    pub fn build_grid(&self) -> Result<Grid> {
        Grid::dirichlet(self.grid.half_length, self.grid.points)
    }

    /// Kernel construction fails with `NotPositiveSemidefinite` for an
    /// indefinite `q`.
    pub fn build_kernel(&self) -> Result<Arc<CovarianceKernel>> {
        let kernel = CovarianceKernel::new(self.kernel.0.clone(), self.build_grid()?)
            .map_err(|e| Error::Hypothesis(e.to_string()))?;
        Ok(Arc::new(kernel))
    }

    pub fn newton(&self) -> NewtonOptions {
        NewtonOptions {
            tol: self.solver.newton_tol,
            max_iter: self.solver.newton_max_iter,
        }
    }

    /// Deterministic wave with its spectral data.
    pub fn build_wave(&self, model: &ModelSpec) -> Result<WavePair> {
        let grid = self.build_grid()?;
        let w = match self.model.name {
            ModelName::Fhn => fhn_wave(model, &grid, RelaxOptions::default(), self.newton())?,
            _ => nagumo_wave(model, &grid, self.newton())?,
        };
        w.with_spectrum(self.solver.krylov)
    }

    pub fn expansion_config(&self) -> ExpansionConfig {
        ExpansionConfig {
            k_max: self.solver.k_max,
            dt_sg: self.solver.dt_sg,
            t_int: self.solver.t_int,
            ..Default::default()
        }
    }

    pub fn stoch_options(&self) -> StochNewtonOptions {
        StochNewtonOptions {
            tol: self.solver.newton_tol,
            ..Default::default()
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.simulation;
        SimConfig {
            dt: s.dt,
            t_end: s.t_end,
            frame: s.frame,
            record_every: s.record_every,
            ..Default::default()
        }
    }

    pub fn ensemble_spec(&self) -> EnsembleSpec {
        let e = &self.ensemble;
        EnsembleSpec {
            realizations: e.realizations,
            base_seed: e.seed,
            sim: self.sim_config(),
            t_eval: e.t_eval,
            expansion_order: e.expansion_order,
            stability_eps: e.stability_eps,
            k_up: self.simulation.k_up,
            ..Default::default()
        }
    }
}

/// Model, kernel and deterministic wave, built once per run.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: RunConfig,
    pub model: ModelSpec,
    pub kernel: Arc<CovarianceKernel>,
    pub wave: WavePair,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = config.build_model()?;
        let kernel = config.build_kernel()?;
        let wave = config.build_wave(&model)?;
        Ok(Self {
            config,
            model,
            kernel,
            wave,
        })
    }

    pub fn stochastic_wave(&self, sigma: f64) -> Result<StochWaveResult> {
        solve_instantaneous_wave(
            &self.model,
            &self.kernel,
            &self.wave,
            sigma,
            &self.config.stoch_options(),
        )
    }

    /// Expansion context around `(Phi_0, c_0)`.
    pub fn expansion(&self) -> Result<ExpansionContext> {
        ExpansionContext::new(
            self.model.clone(),
            self.kernel.clone(),
            self.wave.clone(),
            self.config.expansion_config(),
        )
    }

    /// Expansion context around `(Phi_sigma, c_sigma)`.
    pub fn expansion_at(&self, sigma: f64) -> Result<(ExpansionContext, StochWaveResult)> {
        let sw = self.stochastic_wave(sigma)?;
        Ok((self.expansion()?.with_stochastic_wave(&sw)?, sw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_is_stable() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
        assert_eq!(c.hash().len(), 64);
        let mut d = c.clone();
        d.ensemble.seed = 2;
        assert_ne!(c.hash(), d.hash());
    }

    #[test]
    fn partial_file_and_comments() {
        let text = "# comment\n[model]\nname = \"fhn\"\na = 0.1\n\n[kernel]\nkind = \"gaussian\"\nzeta = 0.5\n";
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.model.name, ModelName::Fhn);
        assert_eq!(c.kernel.0, KernelKind::Gaussian { zeta: 0.5 });
        assert_eq!(c.grid, GridSection::default());
        let reordered = "[kernel]\nzeta = 0.5\nkind = \"gaussian\"\n[model]\na = 0.1\nname = \"fhn\"\n";
        assert_eq!(RunConfig::from_toml(reordered).unwrap().hash(), c.hash());
    }

    #[test]
    fn validation_failures() {
        let mut c = RunConfig::default();
        c.model.a = 1.2;
        assert!(matches!(c.validate(), Err(Error::Hypothesis(_))));
        let c = RunConfig {
            kernel: KernelSection(KernelKind::Tabulated {
                lags: vec![0.0, 1.0, 2.0],
                values: vec![1.0, -2.0, 0.0],
            }),
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Hypothesis(_))));
        assert!(RunConfig::from_toml("[model]\nbogus = 1\n").is_err());
    }
}
