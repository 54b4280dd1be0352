//! Discrete transparent boundary conditions at `x1 = ±X1`.
//!
//! Per transverse sine mode `q` the boundary operator is a discrete time
//! convolution with a kernel `R_q` given by a three-term recurrence. Traces
//! are stored in mode space; the transform pair is applied when a trace is
//! pushed and when a boundary vector is returned.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::coeffs::Physics;
use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::mesh::{SpaceMesh, TransverseAxis};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Direct O(J²) sine transform pair on the `J - 1` interior nodes of a uniform axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SineTransform {
    cells: usize,
    /// `table[(q - 1) * (J - 1) + (j - 1)] = sin(π q j / J)`.
    table: Vec<f64>,
}

impl SineTransform {
    pub fn new(cells: usize) -> Result<Self> {
        if cells < 2 {
            return Err(Error::BadExtents(format!("sine transform needs J >= 2, got {cells}")));
        }
        let n = cells - 1;
        let mut table = Vec::with_capacity(n * n);
        for q in 1..cells {
            for j in 1..cells {
                // reduce q j mod 2J first so large arguments keep full accuracy
                let k = (q * j) % (2 * cells);
                table.push((PI * k as f64 / cells as f64).sin());
            }
        }
        Ok(Self { cells, table })
    }

    pub fn len(&self) -> usize {
        self.cells - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: &[C64]) -> Result<()> {
        if v.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: v.len(),
            });
        }
        Ok(())
    }

    /// `P^(q) = (2/J) Σ_j P_j sin(π q j / J)`.
    pub fn forward(&self, values: &[C64]) -> Result<Vec<C64>> {
        self.check(values)?;
        let n = self.len();
        let scale = 2.0 / self.cells as f64;
        Ok((0..n)
            .map(|q| {
                let row = &self.table[q * n..(q + 1) * n];
                values.iter().zip(row).map(|(p, s)| p * s).sum::<C64>() * scale
            })
            .collect())
    }

    /// `P_j = Σ_q P^(q) sin(π q j / J)`.
    pub fn inverse(&self, modes: &[C64]) -> Result<Vec<C64>> {
        self.check(modes)?;
        let n = self.len();
        Ok((0..n)
            .map(|j| (0..n).map(|q| modes[q] * self.table[q * n + j]).sum())
            .collect())
    }
}

pub fn dst_forward(values: &[C64], cells: usize) -> Result<Vec<C64>> {
    SineTransform::new(cells)?.forward(values)
}

pub fn dst_inverse(modes: &[C64], cells: usize) -> Result<Vec<C64>> {
    SineTransform::new(cells)?.inverse(modes)
}

/// Eigenvalues `(λ_q, σ_q)` of the linear FEM stiffness and mass pair on a
/// uniform transverse axis with Dirichlet ends.
pub fn transverse_eigenpairs(axis: &TransverseAxis, q: usize) -> Result<(f64, f64)> {
    if q == 0 || q >= axis.cells {
        return Err(Error::IndexOutOfRange {
            index: q,
            max: axis.cells - 1,
        });
    }
    let h = axis.step();
    let s = (PI * q as f64 * h / (2.0 * axis.extent)).sin();
    Ok(((2.0 / h * s).powi(2), 1.0 - 2.0 / 3.0 * s * s))
}

/// Seeds of the kernel recurrence for one transverse mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModeCoefficients {
    pub a: C64,
    pub alpha: C64,
    /// `arg α` taken in `(0, 2π)`.
    pub arg_alpha: f64,
    pub beta: f64,
    pub c1: C64,
    pub kappa: C64,
    pub mu: f64,
}

/// `transverse` holds `(λ, σ)` for every transverse axis of the mode (empty in 1D).
pub fn mode_coefficients(physics: &Physics, tau: f64, h1: f64, transverse: &[(f64, f64)]) -> ModeCoefficients {
    let (hbar, b1) = (physics.hbar, physics.b_inf[0]);
    let shift: f64 = transverse
        .iter()
        .zip(&physics.b_inf[1..])
        .map(|(&(lambda, sigma), bk)| bk * lambda / sigma)
        .sum();
    let a = C64::new(
        physics.v_inf / (b1 * hbar * hbar) + shift / (2.0 * b1),
        2.0 * physics.rho_inf / (tau * hbar * b1),
    );
    let h2 = h1 * h1 / 3.0;
    let alpha = a * 2.0 + a * a * h2;
    let beta = 2.0 * a.re + h2 * a.norm_sqr();
    let mut arg = alpha.im.atan2(alpha.re);
    if arg <= 0.0 {
        arg += 2.0 * PI;
    }
    if !(arg > 0.0 && arg < 2.0 * PI) {
        log::warn!("arg alpha = {arg} outside (0, 2pi)");
    }
    let modulus = alpha.norm();
    ModeCoefficients {
        a,
        alpha,
        arg_alpha: arg,
        beta,
        c1: C64::from_polar(-0.5 * modulus.sqrt(), -0.5 * arg),
        kappa: -C64::from_polar(1.0, arg),
        mu: beta / modulus,
    }
}

/// `R^0 .. R^steps` from the three-term recurrence.
pub fn kernel_sequence(mc: &ModeCoefficients, steps: usize) -> Vec<C64> {
    let km = mc.kappa * mc.mu;
    let k2 = mc.kappa * mc.kappa;
    let mut r = Vec::with_capacity(steps + 1);
    r.push(mc.c1);
    if steps >= 1 {
        r.push(-mc.c1 * km);
    }
    for m in 2..=steps {
        let mf = m as f64;
        let next = km * r[m - 1] * ((2.0 * mf - 3.0) / mf) - k2 * r[m - 2] * ((mf - 3.0) / mf);
        r.push(next);
    }
    r
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeKernel {
    /// Transverse mode index (1-based; 0 in 1D).
    pub q: usize,
    pub coefficients: ModeCoefficients,
    /// Product of transverse mass factors `σ` (1 in 1D).
    pub weight: f64,
    pub values: Vec<C64>,
}

/// Kernels for all transverse modes on one box mesh and time step.
#[derive(Debug, Clone)]
pub struct DtbcKernel {
    modes: Vec<ModeKernel>,
    transform: Option<SineTransform>,
    /// Weight `h2` of the boundary inner product (1 in 1D).
    face_weight: f64,
}

impl DtbcKernel {
    pub fn new(physics: &Physics, mesh: &SpaceMesh, tau: f64, steps: usize) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::BadExtents(format!("time step must be > 0, got {tau}")));
        }
        let h1 = mesh.h1();
        match mesh.transverse().first() {
            None => {
                let mc = mode_coefficients(physics, tau, h1, &[]);
                Ok(Self {
                    modes: vec![ModeKernel {
                        q: 0,
                        coefficients: mc,
                        weight: 1.0,
                        values: kernel_sequence(&mc, steps),
                    }],
                    transform: None,
                    face_weight: 1.0,
                })
            }
            Some(axis) => {
                let modes = (1..axis.cells)
                    .into_par_iter()
                    .map(|q| {
                        let (lambda, sigma) = transverse_eigenpairs(axis, q)?;
                        let mc = mode_coefficients(physics, tau, h1, &[(lambda, sigma)]);
                        Ok(ModeKernel {
                            q,
                            coefficients: mc,
                            weight: sigma,
                            values: kernel_sequence(&mc, steps),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Self {
                    modes,
                    transform: Some(SineTransform::new(axis.cells)?),
                    face_weight: axis.step(),
                })
            }
        }
    }

    pub fn modes(&self) -> &[ModeKernel] {
        &self.modes
    }

    pub fn face_weight(&self) -> f64 {
        self.face_weight
    }

    /// Number of kernel terms available (`M + 1`).
    pub fn len(&self) -> usize {
        self.modes[0].values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_modes(&self, trace: &[C64]) -> Result<Vec<C64>> {
        match &self.transform {
            Some(t) => t.forward(trace),
            None if trace.len() == 1 => Ok(trace.to_vec()),
            None => Err(Error::LengthMismatch {
                expected: 1,
                actual: trace.len(),
            }),
        }
    }

    pub fn from_modes(&self, modes: &[C64]) -> Result<Vec<C64>> {
        match &self.transform {
            Some(t) => t.inverse(modes),
            None => Ok(modes.to_vec()),
        }
    }

    /// Dense matrix of the current-level part `F⁻¹ diag(σ_q R_q⁰) F` on one face.
    pub fn current_block(&self) -> DMatrix<C64> {
        let n = self.modes.len();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut e = vec![ZERO; n];
            e[i] = C64::new(1.0, 0.0);
            let modes = self.to_modes(&e).expect("sized by construction");
            let scaled: Vec<C64> = modes
                .iter()
                .zip(&self.modes)
                .map(|(p, mk)| p * mk.values[0] * mk.weight)
                .collect();
            let col = self.from_modes(&scaled).expect("sized by construction");
            for (j, v) in col.into_iter().enumerate() {
                out[(j, i)] = v;
            }
        }
        out
    }
}

/// Face indices used by [`BoundaryHistory`].
pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

/// Mode-space traces `Φ^{q,0..m}` on both faces; `Φ^0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryHistory {
    faces: [Vec<Vec<C64>>; 2],
}

impl BoundaryHistory {
    pub fn new(modes: usize) -> Self {
        Self {
            faces: [vec![vec![ZERO; modes]], vec![vec![ZERO; modes]]],
        }
    }

    /// Number of stored levels (current step index + 1).
    pub fn levels(&self) -> usize {
        self.faces[0].len()
    }

    pub fn face(&self, face: usize) -> &[Vec<C64>] {
        &self.faces[face]
    }

    /// Appends the physical traces of a new level on both faces.
    pub fn push(&mut self, kernel: &DtbcKernel, traces: [&[C64]; 2]) -> Result<()> {
        for (f, t) in traces.iter().enumerate() {
            let modes = kernel.to_modes(t)?;
            self.faces[f].push(modes);
        }
        Ok(())
    }

    /// Mode-space history convolution `Σ_{p=1}^{m} R^p Φ^{m-p}` scaled by `σ_q`,
    /// returned in physical space; `m` is the level being computed.
    pub fn history_part(&self, kernel: &DtbcKernel, face: usize, m: usize) -> Result<Vec<C64>> {
        if self.levels() != m {
            return Err(Error::HistoryLengthMismatch {
                expected: m,
                actual: self.levels(),
            });
        }
        if m >= kernel.len() {
            return Err(Error::HistoryLengthMismatch {
                expected: kernel.len() - 1,
                actual: m,
            });
        }
        let hist = &self.faces[face];
        let modes: Vec<C64> = kernel
            .modes
            .iter()
            .enumerate()
            .map(|(q, mk)| {
                let s: C64 = (1..=m).map(|p| mk.values[p] * hist[m - p][q]).sum();
                s * mk.weight
            })
            .collect();
        kernel.from_modes(&modes)
    }
}

/// `F⁻¹[σ_q R_q⁰ Φ^{q,m}]` for a physical trace.
pub fn current_part(kernel: &DtbcKernel, trace: &[C64]) -> Result<Vec<C64>> {
    let modes = kernel.to_modes(trace)?;
    let scaled: Vec<C64> = modes
        .iter()
        .zip(&kernel.modes)
        .map(|(p, mk)| p * mk.values[0] * mk.weight)
        .collect();
    kernel.from_modes(&scaled)
}

/// `𝒮_ref^m` on both faces: history levels `0..m-1` plus the current traces.
pub fn apply_sref(
    kernel: &DtbcKernel,
    history: &BoundaryHistory,
    current: [&[C64]; 2],
    m: usize,
) -> Result<[Vec<C64>; 2]> {
    let mut out: [Vec<C64>; 2] = [Vec::new(), Vec::new()];
    for (face, slot) in out.iter_mut().enumerate() {
        let h = history.history_part(kernel, face, m)?;
        let c = current_part(kernel, current[face])?;
        *slot = h.iter().zip(&c).map(|(a, b)| a + b).collect();
    }
    Ok(out)
}

/// Running values of the two boundary quadratic forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PositivitySums {
    pub m: usize,
    pub s1: f64,
    pub s2: f64,
    /// `Σ_l ‖𝒮^l Φ^l‖ ‖Φ^l‖ τ`, the natural size of roundoff in `s1`, `s2`.
    pub scale: f64,
}

/// Evaluates `S1 = Im Σ (𝒮^l Φ^l, s̄_t Φ^l) τ` and
/// `S2 = Im Σ (𝒮^l Φ^l, (iħ ∂̄_t + v̂ s̄_t) Φ^l) τ` for `m = 1..M`.
///
/// `traces[l]` is the physical trace at level `l`; `traces[0]` must be zero.
pub fn positivity_check(kernel: &DtbcKernel, traces: &[Vec<C64>], tau: f64, hbar: f64, v_hat: f64) -> Result<Vec<PositivitySums>> {
    if traces.len() > kernel.len() {
        return Err(Error::HistoryLengthMismatch {
            expected: kernel.len(),
            actual: traces.len(),
        });
    }
    if traces.first().is_some_and(|t| t.iter().any(|z| *z != ZERO)) {
        return Err(Error::validation("traces", "the level-0 trace must vanish"));
    }
    let mut hist = BoundaryHistory::new(kernel.modes.len());
    let inner = |u: &[C64], w: &[C64]| -> C64 {
        u.iter().zip(w).map(|(a, b)| a * b.conj()).sum::<C64>() * kernel.face_weight
    };
    let norm = |u: &[C64]| inner(u, u).re.sqrt();
    let (mut s1, mut s2, mut scale) = (0.0, 0.0, 0.0);
    let mut out = Vec::with_capacity(traces.len().saturating_sub(1));
    for l in 1..traces.len() {
        let cur = &traces[l];
        let [s, _] = apply_sref(kernel, &hist, [cur, cur], l)?;
        let avg: Vec<C64> = cur.iter().zip(&traces[l - 1]).map(|(a, b)| (a + b) * 0.5).collect();
        let second: Vec<C64> = cur
            .iter()
            .zip(&traces[l - 1])
            .zip(&avg)
            .map(|((a, b), m)| C64::new(0.0, hbar) * (a - b) / tau + m * v_hat)
            .collect();
        s1 += inner(&s, &avg).im * tau;
        s2 += inner(&s, &second).im * tau;
        scale += norm(&s) * (norm(&avg) + norm(&second)) * tau;
        out.push(PositivitySums { m: l, s1, s2, scale });
        hist.push(kernel, [cur, cur])?;
    }
    Ok(out)
}
