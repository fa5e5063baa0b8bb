//! Experiment configuration: a JSON file overlaid by command-line flags and
//! resolved into a validated plan before any computation starts.

use std::path::{Path, PathBuf};

use riskeig_core::continuation::SweepOptions;
use riskeig_core::discretize::make_grid;
use riskeig_core::eigensolve::{EigenOptions, HjbOptions};
use riskeig_core::{Model, ModelSpec, SimConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// A model given by catalog name or as a full specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Name(String),
    Spec(ModelSpec),
}

impl ModelRef {
    pub fn spec(&self) -> ModelSpec {
        match self {
            ModelRef::Name(n) => ModelSpec::builtin(n),
            ModelRef::Spec(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub radii: Option<Vec<f64>>,
    pub spacing: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub tol: f64,
    pub max_iter: usize,
    pub lambda_tol: f64,
    pub max_sweeps: usize,
    pub saturation_tol: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let h = HjbOptions::default();
        Self {
            tol: h.eigen.tol,
            max_iter: h.eigen.max_iter,
            lambda_tol: h.lambda_tol,
            max_sweeps: h.max_sweeps,
            saturation_tol: SweepOptions::default().saturation_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
    /// Defaults to twice the largest radius.
    pub kill_radius: Option<f64>,
    pub burn_in: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 50.0,
            paths: 10_000,
            seed: 20_240_613,
            kill_radius: None,
            burn_in: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixingSection {
    pub paths: usize,
    pub horizon: f64,
    pub sample_every: usize,
    pub lags: usize,
}

impl Default for MixingSection {
    fn default() -> Self {
        Self {
            paths: 400,
            horizon: 30.0,
            sample_every: 100,
            lags: 30,
        }
    }
}

/// Probe settings shared by `certify` and `verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Start of the Feynman–Kac and ergodic-identity paths (origin if unset).
    pub x0: Option<Vec<f64>>,
    /// Start of the exit-time paths (`(2, 0, …)` if unset).
    pub exit_start: Option<Vec<f64>>,
    pub exit_radius: f64,
    pub moment_horizon: f64,
    /// Extra values of δ for the exponential-moment check, besides `δ̂/2`.
    pub deltas: Vec<f64>,
    pub gamma_horizon: f64,
    pub certificate_gamma: f64,
    pub r_cut: f64,
    pub bump_half_width: f64,
    pub bump_epsilon: f64,
    pub constant_shift: f64,
    pub mixing: MixingSection,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            x0: None,
            exit_start: None,
            exit_radius: 1.0,
            moment_horizon: 8.0,
            deltas: Vec::new(),
            gamma_horizon: 16.0,
            certificate_gamma: 0.1,
            r_cut: 1.0,
            bump_half_width: 1.0,
            bump_epsilon: 0.1,
            constant_shift: 0.3,
            mixing: MixingSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Option<ModelRef>,
    pub grid: GridSection,
    pub solver: SolverSection,
    pub sim: SimSection,
    pub probes: ProbeSection,
    pub suite: Option<String>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }
}

/// Flag values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub model: Option<String>,
    pub radii: Option<Vec<f64>>,
    pub r: Option<f64>,
    pub h: Option<f64>,
    pub tol: Option<f64>,
    pub paths: Option<usize>,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub suite: Option<String>,
}

impl ExperimentConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = &o.model {
            self.model = Some(ModelRef::Name(m.clone()));
        }
        if let Some(r) = &o.radii {
            self.grid.radii = Some(r.clone());
        }
        if let Some(r) = o.r {
            self.grid.radii = Some(vec![r]);
        }
        if let Some(h) = o.h {
            self.grid.spacing = Some(h);
        }
        if let Some(t) = o.tol {
            self.solver.tol = t;
        }
        if let Some(p) = o.paths {
            self.sim.paths = p;
        }
        if let Some(dt) = o.dt {
            self.sim.dt = dt;
        }
        if let Some(t) = o.horizon {
            self.sim.horizon = t;
        }
        if let Some(s) = o.seed {
            self.sim.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if let Some(s) = &o.suite {
            self.suite = Some(s.clone());
        }
    }
}

/// Fully resolved and validated experiment.
pub struct Plan {
    /// The resolved configuration (every default filled in); hashed into the
    /// manifest.
    pub config: ExperimentConfig,
    pub spec: ModelSpec,
    pub model: Model,
    pub radii: Vec<f64>,
    pub spacing: f64,
    pub sweep: SweepOptions,
    pub sim: SimConfig,
    pub out: PathBuf,
}

pub const DEFAULT_RADII: [f64; 4] = [2.0, 4.0, 6.0, 8.0];

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl Plan {
    pub fn resolve(mut config: ExperimentConfig) -> Result<Self, CliError> {
        let model_ref = config.model.clone().ok_or_else(|| invalid("no model given (use --model)"))?;
        let spec = model_ref.spec();
        let model = spec.build()?;

        let spacing = config
            .grid
            .spacing
            .unwrap_or(if model.dim == 1 { 0.01 } else { 0.05 });
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(invalid(format!("grid spacing must be positive, got {spacing}")));
        }
        let radii = config.grid.radii.clone().unwrap_or_else(|| DEFAULT_RADII.to_vec());
        if radii.is_empty() {
            return Err(invalid("empty radius list"));
        }
        if radii.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid(format!("radii must be strictly increasing, got {radii:?}")));
        }
        if radii.iter().any(|r| !(*r > spacing) || !r.is_finite()) {
            return Err(invalid(format!("every radius must exceed the spacing {spacing}")));
        }
        make_grid(model.dim, radii[radii.len() - 1], spacing)?;

        let s = &config.solver;
        if !(s.tol > 0.0) || !(s.lambda_tol > 0.0) || !(s.saturation_tol > 0.0) || s.max_iter == 0 || s.max_sweeps == 0 {
            return Err(invalid("solver tolerances and iteration caps must be positive"));
        }
        let sweep = SweepOptions {
            hjb: HjbOptions {
                eigen: EigenOptions {
                    tol: s.tol,
                    max_iter: s.max_iter,
                },
                lambda_tol: s.lambda_tol,
                max_sweeps: s.max_sweeps,
            },
            saturation_tol: s.saturation_tol,
        };

        let r_max = radii[radii.len() - 1];
        let kill = config.sim.kill_radius.unwrap_or(2.0 * r_max);
        config.sim.kill_radius = Some(kill);
        let sim = SimConfig {
            dt: config.sim.dt,
            horizon: config.sim.horizon,
            paths: config.sim.paths,
            seed: config.sim.seed,
            kill_radius: kill,
            burn_in: config.sim.burn_in,
            mirror_noise: false,
        };
        sim.validate()?;

        let p = &config.probes;
        for (name, v) in [("x0", &p.x0), ("exit_start", &p.exit_start)] {
            if let Some(v) = v {
                if v.len() != model.dim {
                    return Err(invalid(format!("probes.{name} must have {} coordinates", model.dim)));
                }
            }
        }
        if !(p.exit_radius > 0.0) || !(p.r_cut > 0.0) || !(p.bump_half_width > 0.0) {
            return Err(invalid("probe radii must be positive"));
        }
        if !(p.certificate_gamma > 0.0) {
            return Err(invalid("probes.certificate_gamma must be positive"));
        }

        config.grid.radii = Some(radii.clone());
        config.grid.spacing = Some(spacing);
        config.model = Some(ModelRef::Spec(spec.clone()));
        let out = config.out.clone().unwrap_or_else(|| PathBuf::from("riskeig-out"));
        Ok(Self {
            config,
            spec,
            model,
            radii,
            spacing,
            sweep,
            sim,
            out,
        })
    }

    pub fn x0(&self) -> Vec<f64> {
        self.config.probes.x0.clone().unwrap_or_else(|| vec![0.0; self.model.dim])
    }

    pub fn exit_start(&self) -> Vec<f64> {
        self.config.probes.exit_start.clone().unwrap_or_else(|| {
            let mut v = vec![0.0; self.model.dim];
            v[0] = 2.0 * self.config.probes.exit_radius;
            v
        })
    }
}
