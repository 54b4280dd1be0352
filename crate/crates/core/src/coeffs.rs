//! Physical data: `ħ`, `ρ(x)`, `B(x) = diag(B_1, .., B_n)`, `V(x)`, initial data and forcing.
//!
//! Coefficients are point samplers that return the far-field constants for
//! `|x1| >= X0`. Element integrals are formed by quadrature in [`crate::fem`].

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::mesh::SpaceMesh;

/// Margin added to the computed minimal shift.
const VHAT_MARGIN: f64 = 1e-12;

/// Far-field constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Physics {
    pub hbar: f64,
    pub rho_inf: f64,
    /// Diagonal of `B` for `|x1| >= X0`, one entry per space dimension.
    pub b_inf: Vec<f64>,
    pub v_inf: f64,
}

impl Physics {
    pub fn unit(n: usize) -> Self {
        Self {
            hbar: 1.0,
            rho_inf: 1.0,
            b_inf: vec![1.0; n],
            v_inf: 0.0,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.hbar > 0.0 && self.hbar.is_finite()) {
            return Err(Error::validation("physics.hbar", "must be > 0"));
        }
        if !(self.rho_inf > 0.0 && self.rho_inf.is_finite()) {
            return Err(Error::validation("physics.rho_inf", "must be > 0"));
        }
        if self.b_inf.len() != n {
            return Err(Error::validation(
                "physics.b_inf",
                format!("needs {n} entries, got {}", self.b_inf.len()),
            ));
        }
        if self.b_inf.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::validation("physics.b_inf", "entries must be > 0"));
        }
        if !self.v_inf.is_finite() {
            return Err(Error::validation("physics.v_inf", "must be finite"));
        }
        Ok(())
    }
}

/// Built-in coefficient profiles, all supported inside `(-X0, X0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum CoefficientPreset {
    #[default]
    Constant,
    /// `V = V_inf + height` on `[left, right]` (a well when `height < 0`).
    Barrier { left: f64, right: f64, height: f64 },
    /// `ρ = ρ_inf + amplitude cos²(π (x1 - center) / (2 half_width))` on the support.
    RhoBump {
        center: f64,
        half_width: f64,
        amplitude: f64,
    },
    /// Same taper applied to `B_axis` (axis is 1-based).
    BBump {
        axis: usize,
        center: f64,
        half_width: f64,
        amplitude: f64,
    },
}

fn taper(x: f64, center: f64, half_width: f64) -> f64 {
    let s = (x - center) / half_width;
    if s.abs() < 1.0 {
        (0.5 * PI * s).cos().powi(2)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    physics: Physics,
    preset: CoefficientPreset,
    core_half_width: f64,
}

impl CoefficientField {
    pub fn new(physics: Physics, preset: CoefficientPreset, mesh: &SpaceMesh) -> Result<Self> {
        let n = mesh.dim();
        physics.validate(n)?;
        let x0 = mesh.core_half_width();
        let inside = |a: f64, b: f64| a >= -x0 && b <= x0 && a < b;
        match &preset {
            CoefficientPreset::Constant => {}
            CoefficientPreset::Barrier { left, right, height } => {
                if !inside(*left, *right) || !height.is_finite() {
                    return Err(Error::validation(
                        "coefficients",
                        format!("barrier [{left}, {right}] must lie inside [-X0, X0] = [-{x0}, {x0}]"),
                    ));
                }
            }
            CoefficientPreset::RhoBump {
                center,
                half_width,
                amplitude,
            } => {
                if !inside(center - half_width, center + half_width) {
                    return Err(Error::validation("coefficients", "rho bump must lie inside [-X0, X0]"));
                }
                if !(physics.rho_inf + amplitude.min(0.0) > 0.0) {
                    return Err(Error::validation("coefficients.amplitude", "rho must stay positive"));
                }
            }
            CoefficientPreset::BBump {
                axis,
                center,
                half_width,
                amplitude,
            } => {
                if *axis == 0 || *axis > n {
                    return Err(Error::validation("coefficients.axis", format!("must be in 1..={n}")));
                }
                if !inside(center - half_width, center + half_width) {
                    return Err(Error::validation("coefficients", "B bump must lie inside [-X0, X0]"));
                }
                if !(physics.b_inf[axis - 1] + amplitude.min(0.0) > 0.0) {
                    return Err(Error::validation("coefficients.amplitude", "B must stay positive"));
                }
            }
        }
        Ok(Self {
            physics,
            preset,
            core_half_width: x0,
        })
    }

    pub fn constant(physics: Physics, mesh: &SpaceMesh) -> Result<Self> {
        Self::new(physics, CoefficientPreset::Constant, mesh)
    }

    pub fn physics(&self) -> &Physics {
        &self.physics
    }

    pub fn preset(&self) -> &CoefficientPreset {
        &self.preset
    }

    pub fn dim(&self) -> usize {
        self.physics.b_inf.len()
    }

    fn far(&self, x: [f64; 2]) -> bool {
        x[0].abs() >= self.core_half_width
    }

    pub fn rho(&self, x: [f64; 2]) -> f64 {
        let base = self.physics.rho_inf;
        if self.far(x) {
            return base;
        }
        match self.preset {
            CoefficientPreset::RhoBump {
                center,
                half_width,
                amplitude,
            } => base + amplitude * taper(x[0], center, half_width),
            _ => base,
        }
    }

    /// Diagonal entry `B_axis` (0-based axis).
    pub fn b(&self, x: [f64; 2], axis: usize) -> f64 {
        let base = self.physics.b_inf[axis];
        if self.far(x) {
            return base;
        }
        match self.preset {
            CoefficientPreset::BBump {
                axis: a,
                center,
                half_width,
                amplitude,
            } if a == axis + 1 => base + amplitude * taper(x[0], center, half_width),
            _ => base,
        }
    }

    pub fn v(&self, x: [f64; 2]) -> f64 {
        let base = self.physics.v_inf;
        if self.far(x) {
            return base;
        }
        match self.preset {
            CoefficientPreset::Barrier { left, right, height } if x[0] >= left && x[0] <= right => {
                base + height
            }
            _ => base,
        }
    }

    /// Declared lower bound `ρ̲`.
    pub fn rho_lower(&self) -> f64 {
        match self.preset {
            CoefficientPreset::RhoBump { amplitude, .. } => self.physics.rho_inf + amplitude.min(0.0),
            _ => self.physics.rho_inf,
        }
    }

    /// Declared lower bound `B̲` over all diagonal entries.
    pub fn b_lower(&self) -> f64 {
        (0..self.dim())
            .map(|k| match self.preset {
                CoefficientPreset::BBump { axis, amplitude, .. } if axis == k + 1 => {
                    self.physics.b_inf[k] + amplitude.min(0.0)
                }
                _ => self.physics.b_inf[k],
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// x1 positions where a smooth profile attains an extremum.
    fn critical_points(&self) -> Vec<f64> {
        match self.preset {
            CoefficientPreset::RhoBump { center, .. } | CoefficientPreset::BBump { center, .. } => {
                vec![center]
            }
            _ => Vec::new(),
        }
    }

    /// True when every coefficient is the far-field constant everywhere.
    pub fn is_constant(&self) -> bool {
        matches!(self.preset, CoefficientPreset::Constant)
    }
}

/// A complex function of space, with a gradient for energy-type integrals.
pub trait Sampler: Sync {
    fn value(&self, x: [f64; 2]) -> C64;

    /// Defaults to fourth-order central differences.
    fn gradient(&self, x: [f64; 2]) -> [C64; 2] {
        let h = 1e-4;
        let d = |axis: usize| {
            let at = |s: f64| {
                let mut y = x;
                y[axis] += s;
                self.value(y)
            };
            (at(-2.0 * h) - at(-h) * 8.0 + at(h) * 8.0 - at(2.0 * h)) / (12.0 * h)
        };
        [d(0), d(1)]
    }
}

impl<F: Fn([f64; 2]) -> C64 + Sync> Sampler for F {
    fn value(&self, x: [f64; 2]) -> C64 {
        self(x)
    }
}

/// Gaussian packet `exp(-(x1-c)²/(4w²) + i k0 (x1-c)) · sin(π m x2 / X2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub center: f64,
    pub wavenumber: f64,
    pub width: f64,
    /// Transverse sine mode `m >= 1`, used only for `n = 2`.
    #[serde(default = "one")]
    pub transverse_mode: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    pub gaussian: GaussianSpec,
    /// Transverse extent `X2` for `n = 2`.
    pub transverse_extent: Option<f64>,
    /// When set, the data is hard-zeroed for `|x1| >= X0`.
    pub support_half_width: Option<f64>,
}

impl InitialData {
    pub fn gaussian(gaussian: GaussianSpec, mesh: &SpaceMesh) -> Self {
        Self {
            gaussian,
            transverse_extent: mesh.transverse().first().map(|a| a.extent),
            support_half_width: Some(mesh.core_half_width()),
        }
    }

    fn raw(&self, x: [f64; 2]) -> C64 {
        let g = &self.gaussian;
        let s = x[0] - g.center;
        let base = C64::new(-s * s / (4.0 * g.width * g.width), g.wavenumber * s).exp();
        match self.transverse_extent {
            Some(ext) => base * (PI * g.transverse_mode as f64 * x[1] / ext).sin(),
            None => base,
        }
    }

    /// Largest `|ψ⁰|` on `|x1| >= X0` (attained at `x1 = ±X0`).
    pub fn tail_magnitude(&self, x0: f64) -> f64 {
        let g = &self.gaussian;
        let d = (x0 - g.center.abs()).max(0.0);
        (-d * d / (4.0 * g.width * g.width)).exp()
    }
}

impl Sampler for InitialData {
    fn value(&self, x: [f64; 2]) -> C64 {
        match self.support_half_width {
            Some(x0) if x[0].abs() >= x0 => C64::new(0.0, 0.0),
            _ => self.raw(x),
        }
    }

    fn gradient(&self, x: [f64; 2]) -> [C64; 2] {
        if let Some(x0) = self.support_half_width {
            if x[0].abs() >= x0 {
                return [C64::new(0.0, 0.0); 2];
            }
        }
        let g = &self.gaussian;
        let s = x[0] - g.center;
        let base = C64::new(-s * s / (4.0 * g.width * g.width), g.wavenumber * s).exp();
        let dbase = base * C64::new(-s / (2.0 * g.width * g.width), g.wavenumber);
        match self.transverse_extent {
            Some(ext) => {
                let k = PI * g.transverse_mode as f64 / ext;
                [dbase * (k * x[1]).sin(), base * k * (k * x[1]).cos()]
            }
            None => [dbase, C64::new(0.0, 0.0)],
        }
    }
}

/// One forcing pulse `amplitude · exp(-(x1-c)²/(4w²)) · exp(-i ω t) · sin(π m x2 / X2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForcingTerm {
    pub amplitude: C64,
    pub center: f64,
    pub width: f64,
    pub frequency: f64,
    #[serde(default = "one")]
    pub transverse_mode: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum ForcingPreset {
    #[default]
    None,
    Pulses { terms: Vec<ForcingTerm> },
    /// `terms` random pulses drawn from `seed`, negligible outside the core.
    Random { seed: u64, terms: usize, amplitude: f64 },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Forcing {
    terms: Vec<ForcingTerm>,
    transverse_extent: Option<f64>,
}

impl Forcing {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_preset(preset: &ForcingPreset, mesh: &SpaceMesh) -> Self {
        let terms = match preset {
            ForcingPreset::None => Vec::new(),
            ForcingPreset::Pulses { terms } => terms.clone(),
            ForcingPreset::Random {
                seed,
                terms,
                amplitude,
            } => Self::random_terms(*seed, *terms, *amplitude, mesh),
        };
        Self {
            terms,
            transverse_extent: mesh.transverse().first().map(|a| a.extent),
        }
    }

    fn random_terms(seed: u64, count: usize, amplitude: f64, mesh: &SpaceMesh) -> Vec<ForcingTerm> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = mesh.core_half_width();
        let modes = mesh.transverse().first().map(|a| a.cells - 1).unwrap_or(1).min(3);
        (0..count)
            .map(|_| {
                let center = rng.gen_range(-0.6 * x0..0.6 * x0);
                // tail at |x1| = X0 stays below exp(-36)
                let width = rng.gen_range(0.25..1.0) * (x0 - center.abs()) / 12.0;
                ForcingTerm {
                    amplitude: C64::from_polar(amplitude * rng.gen_range(0.2..1.0), rng.gen_range(0.0..2.0 * PI)),
                    center,
                    width,
                    frequency: rng.gen_range(-3.0..3.0),
                    transverse_mode: rng.gen_range(1..=modes),
                }
            })
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[ForcingTerm] {
        &self.terms
    }

    /// Bound on `|F|` over `|x1| >= x0`, all times.
    pub fn tail_magnitude(&self, x0: f64) -> f64 {
        self.terms
            .iter()
            .map(|f| {
                let d = (x0 - f.center.abs()).max(0.0);
                f.amplitude.norm() * (-d * d / (4.0 * f.width * f.width)).exp()
            })
            .sum()
    }

    pub fn value(&self, x: [f64; 2], t: f64) -> C64 {
        self.terms
            .iter()
            .map(|f| {
                let s = x[0] - f.center;
                let mut v = f.amplitude
                    * (-s * s / (4.0 * f.width * f.width)).exp()
                    * C64::from_polar(1.0, -f.frequency * t);
                if let Some(ext) = self.transverse_extent {
                    v *= (PI * f.transverse_mode as f64 * x[1] / ext).sin();
                }
                v
            })
            .sum()
    }

    /// The forcing frozen at time `t`.
    pub fn at(&self, t: f64) -> impl Sampler + '_ {
        move |x: [f64; 2]| self.value(x, t)
    }
}

/// Shift `v̂` and margin `δ̂` of the energy norm, plus `λ₀ = Σ_{k>=2} (π/X_k)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyNormParams {
    pub v_hat: f64,
    pub delta_hat: f64,
    pub lambda0: f64,
}

pub fn lambda0(mesh: &SpaceMesh) -> f64 {
    mesh.transverse().iter().map(|a| (PI / a.extent).powi(2)).sum()
}

/// Points where the coefficients are sampled: two-point Gauss nodes of every
/// x1 cell (transverse position is irrelevant for the built-in presets) plus
/// the extrema of smooth profiles.
fn sample_points(field: &CoefficientField, mesh: &SpaceMesh) -> Vec<[f64; 2]> {
    let g = 0.5 / 3f64.sqrt();
    let mid2 = mesh.transverse().first().map(|a| 0.5 * a.extent).unwrap_or(0.0);
    let mut pts: Vec<[f64; 2]> = mesh
        .x1_nodes()
        .windows(2)
        .flat_map(|w| {
            let (m, h) = (0.5 * (w[0] + w[1]), w[1] - w[0]);
            [[m - g * h, mid2], [m + g * h, mid2]]
        })
        .collect();
    pts.extend(field.critical_points().into_iter().map(|c| [c, mid2]));
    pts
}

/// Smallest shift `v̂` such that `(ħ²/2) B̲ λ₀ + V + (v̂ - δ̂) ρ >= 0` at all
/// samples, never below `-V_inf/ρ_inf`, and `0` when zero already works.
pub fn safe_vhat(field: &CoefficientField, mesh: &SpaceMesh, delta_hat: f64) -> Result<EnergyNormParams> {
    if !(delta_hat > 0.0) {
        return Err(Error::validation("energy.delta_hat", "must be > 0"));
    }
    let p = field.physics();
    let lam0 = lambda0(mesh);
    let transverse = 0.5 * p.hbar * p.hbar * field.b_lower() * lam0;
    let required = sample_points(field, mesh)
        .into_iter()
        .map(|x| delta_hat - (transverse + field.v(x)) / field.rho(x))
        .fold(f64::NEG_INFINITY, f64::max)
        .max(-p.v_inf / p.rho_inf);
    let v_hat = if required <= 0.0 { 0.0 } else { required + VHAT_MARGIN };
    Ok(EnergyNormParams {
        v_hat,
        delta_hat,
        lambda0: lam0,
    })
}

/// Checks the shift condition at the samples of `mesh`.
pub fn vhat_admissible(field: &CoefficientField, mesh: &SpaceMesh, params: &EnergyNormParams) -> bool {
    let p = field.physics();
    let transverse = 0.5 * p.hbar * p.hbar * field.b_lower() * params.lambda0;
    sample_points(field, mesh).into_iter().all(|x| {
        transverse + field.v(x) + (params.v_hat - params.delta_hat) * field.rho(x) >= 0.0
    })
}
