//! JSON run configuration.

use serde::{Deserialize, Serialize};

use crate::coeffs::{
    safe_vhat, CoefficientField, CoefficientPreset, EnergyNormParams, Forcing, ForcingPreset, GaussianSpec,
    InitialData, Physics,
};
use crate::error::{Error, Result};
use crate::mesh::{build_space_mesh, SpaceMesh, TimeMesh, TransverseAxis};
use crate::stepper::BoundaryMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialRule {
    /// Nodal interpolant, zeroed outside `Ω₀`.
    #[default]
    Interpolant,
    L2Projection,
    EllipticProjection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub x0: f64,
    pub x1: f64,
    pub h1: f64,
    /// Explicit x1 nodes inside `(-X0, X0)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interior_nodes: Option<Vec<f64>>,
    /// Number of uniform core cells, used when no explicit nodes are given.
    /// Defaults to a core step of `h1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub core_cells: Option<usize>,
    #[serde(default)]
    pub transverse: Vec<TransverseAxis>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub final_time: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    /// Filled from the coefficients when absent.
    #[serde(default)]
    pub v_hat: Option<f64>,
    #[serde(default = "default_delta_hat")]
    pub delta_hat: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            v_hat: None,
            delta_hat: default_delta_hat(),
        }
    }
}

fn default_delta_hat() -> f64 {
    1.0
}

fn default_threshold() -> f64 {
    1e-14
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Steps at which snapshots are written; defaults to the first and last.
    #[serde(default)]
    pub snapshot_steps: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dimension: usize,
    pub mesh: MeshConfig,
    #[serde(default)]
    pub physics: Option<Physics>,
    #[serde(default)]
    pub coefficients: CoefficientPreset,
    pub initial: GaussianSpec,
    #[serde(default)]
    pub initial_rule: InitialRule,
    pub time: TimeConfig,
    #[serde(default)]
    pub forcing: ForcingPreset,
    #[serde(default)]
    pub energy: EnergyConfig,
    #[serde(default)]
    pub boundary: BoundaryMode,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub seed: u64,
    /// Largest `|ψ⁰|` on `|x1| >= X0` that may be silently cut to zero.
    #[serde(default = "default_threshold")]
    pub truncation_threshold: f64,
}

/// Everything needed for a run, after validation.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub mesh: SpaceMesh,
    pub field: CoefficientField,
    pub initial: InitialData,
    pub rule: InitialRule,
    pub time: TimeMesh,
    pub forcing: Forcing,
    pub energy: EnergyNormParams,
    pub mode: BoundaryMode,
    pub snapshot_steps: Vec<usize>,
    /// `∫_{|x1| >= X0} |ψ⁰|²` removed at ingestion.
    pub truncated_mass: f64,
}

fn field_error(field: &str, e: Error) -> Error {
    match e {
        Error::Validation { .. } => e,
        other => Error::validation(field, other.to_string()),
    }
}

/// `∫_{|x1| >= X0} |g|²` for the x1 profile of the Gaussian (transverse factor ignored).
fn gaussian_tail_mass(g: &GaussianSpec, x0: f64) -> f64 {
    let side = |d: f64| {
        // ∫_d^∞ exp(-s²/(2w²)) ds by midpoint rule over 40 widths
        let n = 4000;
        let len = 40.0 * g.width;
        let h = len / n as f64;
        (0..n)
            .map(|k| {
                let s = d + (k as f64 + 0.5) * h;
                (-s * s / (2.0 * g.width * g.width)).exp() * h
            })
            .sum::<f64>()
    };
    side(x0 - g.center) + side(x0 + g.center)
}

impl RunConfig {
    pub fn physics(&self) -> Physics {
        self.physics.clone().unwrap_or_else(|| Physics::unit(self.dimension))
    }

    pub fn space_mesh(&self) -> Result<SpaceMesh> {
        let m = &self.mesh;
        if !(1..=2).contains(&self.dimension) {
            return Err(Error::validation("dimension", format!("must be 1 or 2, got {}", self.dimension)));
        }
        if !(m.x0 > 0.0) {
            return Err(Error::validation("mesh.x0", format!("must be > 0, got {}", m.x0)));
        }
        if !(m.x1 > m.x0) {
            return Err(Error::validation("mesh.x1", format!("must exceed mesh.x0 = {}, got {}", m.x0, m.x1)));
        }
        if !(m.h1 > 0.0 && m.h1 < m.x1) {
            return Err(Error::validation("mesh.h1", format!("must lie in (0, X1), got {}", m.h1)));
        }
        if m.transverse.len() + 1 != self.dimension {
            return Err(Error::validation(
                "mesh.transverse",
                format!("dimension {} needs {} transverse axes", self.dimension, self.dimension - 1),
            ));
        }
        let interior = match (&m.interior_nodes, m.core_cells) {
            (Some(nodes), None) => nodes.clone(),
            (None, cells) => {
                let cells = match cells {
                    Some(c) if c >= 1 => c,
                    Some(_) => return Err(Error::validation("mesh.core_cells", "must be >= 1")),
                    None => {
                        let c = (2.0 * m.x0 / m.h1).round();
                        if (c * m.h1 - 2.0 * m.x0).abs() > 1e-9 * m.x0 {
                            return Err(Error::validation(
                                "mesh.core_cells",
                                "2 X0 is not a multiple of h1; give core_cells or interior_nodes",
                            ));
                        }
                        c as usize
                    }
                };
                (1..cells).map(|i| m.x0 * (2.0 * i as f64 / cells as f64 - 1.0)).collect()
            }
            (Some(_), Some(_)) => {
                return Err(Error::validation("mesh", "give either interior_nodes or core_cells, not both"))
            }
        };
        build_space_mesh(self.dimension, m.x0, m.x1, m.h1, &interior, &m.transverse).map_err(|e| field_error("mesh", e))
    }

    /// Validates every cross-field constraint and assembles the [`Scenario`].
    pub fn build(&self) -> Result<Scenario> {
        let mesh = self.space_mesh()?;
        let physics = self.physics();
        physics.validate(self.dimension)?;
        let field = CoefficientField::new(physics, self.coefficients.clone(), &mesh)?;

        let g = &self.initial;
        if !(g.width > 0.0) {
            return Err(Error::validation("initial.width", "must be > 0"));
        }
        if let Some(axis) = mesh.transverse().first() {
            if g.transverse_mode == 0 || g.transverse_mode >= axis.cells {
                return Err(Error::validation(
                    "initial.transverse_mode",
                    format!("must lie in 1..{}", axis.cells),
                ));
            }
        }
        if !(g.center.abs() < mesh.core_half_width()) {
            return Err(Error::validation("initial.center", "must lie inside (-X0, X0)"));
        }
        let initial = InitialData::gaussian(*g, &mesh);
        let tail = initial.tail_magnitude(mesh.core_half_width());
        if tail > self.truncation_threshold {
            return Err(Error::validation(
                "initial",
                format!(
                    "packet is {tail:e} at |x1| = X0, above the truncation threshold {:e}; narrow it or widen the core",
                    self.truncation_threshold
                ),
            ));
        }
        let truncated_mass = gaussian_tail_mass(g, mesh.core_half_width());
        if truncated_mass > f64::EPSILON {
            log::warn!("initial data cut to zero for |x1| >= X0, removed mass {truncated_mass:e}");
        } else if truncated_mass > 0.0 {
            log::debug!("initial data cut to zero for |x1| >= X0, removed mass {truncated_mass:e}");
        }

        if !(self.time.final_time > 0.0) {
            return Err(Error::validation("time.final_time", "must be > 0"));
        }
        let time = TimeMesh::uniform(self.time.final_time, self.time.steps).map_err(|e| field_error("time", e))?;

        if !(self.energy.delta_hat > 0.0) {
            return Err(Error::validation("energy.delta_hat", "must be > 0"));
        }
        let mut energy = safe_vhat(&field, &mesh, self.energy.delta_hat)?;
        if let Some(v) = self.energy.v_hat {
            if !crate::coeffs::vhat_admissible(&field, &mesh, &EnergyNormParams { v_hat: v, ..energy }) {
                return Err(Error::validation(
                    "energy.v_hat",
                    format!("{v} is below the admissible shift {}", energy.v_hat),
                ));
            }
            energy.v_hat = v;
        }
        if !(self.truncation_threshold >= 0.0) {
            return Err(Error::validation("truncation_threshold", "must be >= 0"));
        }
        if let ForcingPreset::Random { terms, .. } = &self.forcing {
            if *terms == 0 {
                return Err(Error::validation("forcing.terms", "must be >= 1"));
            }
        }
        let snapshot_steps = self
            .output
            .snapshot_steps
            .clone()
            .unwrap_or_else(|| vec![0, self.time.steps]);
        if let Some(&s) = snapshot_steps.iter().find(|&&s| s > self.time.steps) {
            return Err(Error::validation("output.snapshot_steps", format!("step {s} exceeds time.steps")));
        }
        Ok(Scenario {
            forcing: Forcing::from_preset(&self.forcing, &mesh),
            mesh,
            field,
            initial,
            rule: self.initial_rule,
            time,
            energy,
            mode: self.boundary,
            snapshot_steps,
            truncated_mass,
        })
    }

    /// Copy with derived defaults made explicit.
    pub fn filled(&self) -> Result<Self> {
        let sc = self.build()?;
        let mut out = self.clone();
        out.physics = Some(self.physics());
        out.energy.v_hat = Some(sc.energy.v_hat);
        out.output.snapshot_steps = Some(sc.snapshot_steps);
        Ok(out)
    }
}

/// Parses and validates a JSON config, filling derived defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let raw: RunConfig = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    raw.filled()
}
