//! Crank–Nicolson time stepping on the box with transparent boundaries, or
//! on a truncated domain with zero Dirichlet ends.
//!
//! One step solves
//! `((iħ/τ) M_ρ - K/2 + c S⁰) Ψ^m = ((iħ/τ) M_ρ + K/2) Ψ^{m-1} - c S_hist + f^m`
//! with `c = (ħ²/2) B_1∞ h2` acting on the rows of the planes `x1 = ±X1`.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::coeffs::{EnergyNormParams, Forcing, InitialData};
use crate::config::{InitialRule, Scenario};
use crate::dtbc::{BoundaryHistory, DtbcKernel, LEFT, RIGHT};
use crate::error::{Error, Result};
use crate::fem::{assemble, interpolate, AssembledForms, WaveField};
use crate::linalg::{BlockLu, BlockTridiag, C64};
use crate::mesh::{SpaceMesh, TimeMesh};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Discrete transparent boundary conditions at `±X1`.
    #[default]
    Dtbc,
    /// Zero values on the end planes of the mesh.
    DirichletTruncated,
}

#[derive(Debug, Clone)]
pub struct SteppingSystem {
    mode: BoundaryMode,
    hbar: f64,
    mass: BlockTridiag,
    stiffness: BlockTridiag,
    tau: f64,
    step_matrix: BlockTridiag,
    rhs_matrix: BlockTridiag,
    lu: BlockLu,
    boundary: Option<(DtbcKernel, BoundaryHistory, f64)>,
    step: usize,
    planes: usize,
    plane_size: usize,
}

fn operators(mass: &BlockTridiag, stiffness: &BlockTridiag, hbar: f64, tau: f64) -> (BlockTridiag, BlockTridiag) {
    let a = C64::new(0.0, hbar / tau);
    (
        mass.combine(a, stiffness, C64::new(-0.5, 0.0)),
        mass.combine(a, stiffness, C64::new(0.5, 0.0)),
    )
}

fn factor_step(m: &BlockTridiag) -> Result<BlockLu> {
    m.factor().map_err(|e| match e {
        Error::SolveFailure(msg) => {
            log::debug!("step matrix factorization failed: {msg}");
            Error::SingularStepMatrix
        }
        other => other,
    })
}

impl SteppingSystem {
    pub fn build(forms: &AssembledForms, time: &TimeMesh, mode: BoundaryMode) -> Result<Self> {
        let mesh = forms.mesh();
        let physics = forms.field().physics();
        let hbar = physics.hbar;
        if time.steps() == 0 {
            return Err(Error::BadExtents("time mesh has no steps".into()));
        }
        let tau = time.step(1);
        let (mut step_matrix, rhs_matrix) = operators(&forms.mass, &forms.stiffness, hbar, tau);
        let last = mesh.planes() - 1;
        let boundary = match mode {
            BoundaryMode::Dtbc => {
                if !time.is_uniform() {
                    return Err(Error::NonuniformTimeMesh);
                }
                let kernel = DtbcKernel::new(physics, mesh, time.tau(), time.steps())?;
                let coupling = 0.5 * hbar * hbar * physics.b_inf[0] * kernel.face_weight();
                let block = kernel.current_block() * C64::new(coupling, 0.0);
                step_matrix.add_to_diag_block(0, &block);
                step_matrix.add_to_diag_block(last, &block);
                let history = BoundaryHistory::new(kernel.modes().len());
                Some((kernel, history, coupling))
            }
            BoundaryMode::DirichletTruncated => {
                step_matrix.pin_planes(&[0, last]);
                None
            }
        };
        let lu = factor_step(&step_matrix)?;
        Ok(Self {
            mode,
            hbar,
            mass: forms.mass.clone(),
            stiffness: forms.stiffness.clone(),
            tau,
            step_matrix,
            rhs_matrix,
            lu,
            boundary,
            step: 0,
            planes: mesh.planes(),
            plane_size: mesh.plane_size(),
        })
    }

    pub fn mode(&self) -> BoundaryMode {
        self.mode
    }

    /// Matrix applied to the unknown level.
    pub fn step_matrix(&self) -> &BlockTridiag {
        &self.step_matrix
    }

    /// `(iħ/τ) M_ρ + K/2`.
    pub fn rhs_matrix(&self) -> &BlockTridiag {
        &self.rhs_matrix
    }

    pub fn kernel(&self) -> Option<&DtbcKernel> {
        self.boundary.as_ref().map(|b| &b.0)
    }

    /// Number of completed steps.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn face(&self, face: usize) -> std::ops::Range<usize> {
        let b = self.plane_size;
        let p = if face == LEFT { 0 } else { self.planes - 1 };
        p * b..(p + 1) * b
    }

    /// Advances one step of length `tau` from `prev`, adding `load` (`(F^m, φ_i)`) if given.
    pub fn step(&mut self, prev: &[C64], load: Option<&[C64]>, tau: f64) -> Result<WaveField> {
        if prev.len() != self.rhs_matrix.dim() {
            return Err(Error::LengthMismatch {
                expected: self.rhs_matrix.dim(),
                actual: prev.len(),
            });
        }
        if (tau - self.tau).abs() > 1e-12 * self.tau {
            if self.boundary.is_some() {
                return Err(Error::NonuniformTimeMesh);
            }
            let (mut lhs, rhs) = operators(&self.mass, &self.stiffness, self.hbar, tau);
            lhs.pin_planes(&[0, self.planes - 1]);
            self.lu = factor_step(&lhs)?;
            self.step_matrix = lhs;
            self.rhs_matrix = rhs;
            self.tau = tau;
        }
        let mut rhs = self.rhs_matrix.mul_vec(prev);
        if let Some(f) = load {
            for (r, v) in rhs.iter_mut().zip(f) {
                *r += v;
            }
        }
        let m = self.step + 1;
        match &self.boundary {
            Some((kernel, history, coupling)) => {
                for face in [LEFT, RIGHT] {
                    let hist = history.history_part(kernel, face, m)?;
                    for (r, h) in rhs[self.face(face)].iter_mut().zip(hist) {
                        *r -= h * *coupling;
                    }
                }
            }
            None => {
                for face in [LEFT, RIGHT] {
                    let range = self.face(face);
                    rhs[range].fill(ZERO);
                }
            }
        }
        let mut next = self.lu.solve(&rhs)?;
        flush_subnormals(&mut next);
        let (l, r) = (self.face(LEFT), self.face(RIGHT));
        if let Some((kernel, history, _)) = self.boundary.as_mut() {
            history.push(kernel, [&next[l], &next[r]])?;
        }
        self.step = m;
        Ok(next)
    }
}

// Fronts creeping into zero regions produce subnormals, which are very slow
// on most CPUs. Anything below f64::MIN_POSITIVE is far under every tolerance.
fn flush_subnormals(v: &mut [C64]) {
    for z in v {
        if z.re.is_subnormal() {
            z.re = 0.0;
        }
        if z.im.is_subnormal() {
            z.im = 0.0;
        }
    }
}

/// Drives a [`SteppingSystem`] through a time mesh with forcing.
#[derive(Debug, Clone)]
pub struct Integrator {
    system: SteppingSystem,
    forms: AssembledForms,
    forcing: Forcing,
    time: TimeMesh,
    current: WaveField,
}

impl Integrator {
    /// The initial field is first forced into the state space of the mode:
    /// `S_{0h}` for dtbc, zero end planes for the truncated run.
    pub fn new(forms: AssembledForms, forcing: Forcing, time: TimeMesh, mode: BoundaryMode, psi0: WaveField) -> Result<Self> {
        let mesh = forms.mesh();
        if psi0.len() != mesh.dofs() {
            return Err(Error::LengthMismatch {
                expected: mesh.dofs(),
                actual: psi0.len(),
            });
        }
        let system = SteppingSystem::build(&forms, &time, mode)?;
        let mut current = psi0;
        match mode {
            BoundaryMode::Dtbc => {
                let dropped = restrict_to_core_layer(mesh, &mut current);
                if dropped > 0.0 {
                    log::warn!("initial field had |value| up to {dropped:e} outside the S_0h support; zeroed");
                }
            }
            BoundaryMode::DirichletTruncated => {
                let b = mesh.plane_size();
                let last = mesh.planes() - 1;
                let mut dropped: f64 = 0.0;
                for p in [0, last] {
                    for v in &mut current[p * b..(p + 1) * b] {
                        dropped = dropped.max(v.norm());
                        *v = C64::new(0.0, 0.0);
                    }
                }
                if dropped > 0.0 {
                    log::warn!("initial field had |value| up to {dropped:e} on the Dirichlet ends; zeroed");
                }
            }
        }
        Ok(Self {
            system,
            forms,
            forcing,
            time,
            current,
        })
    }

    pub fn forms(&self) -> &AssembledForms {
        &self.forms
    }

    pub fn time(&self) -> &TimeMesh {
        &self.time
    }

    pub fn step_index(&self) -> usize {
        self.system.steps_taken()
    }

    pub fn current(&self) -> &WaveField {
        &self.current
    }

    pub fn system(&self) -> &SteppingSystem {
        &self.system
    }

    /// Load vector `(F(t_m), φ_i)`, or `None` without forcing.
    pub fn load(&self, m: usize) -> Option<Vec<C64>> {
        if self.forcing.is_zero() {
            return None;
        }
        let t = self.time.time(m);
        Some(self.forms.load_vector(&self.forcing.at(t)))
    }

    pub fn is_done(&self) -> bool {
        self.step_index() >= self.time.steps()
    }

    pub fn advance(&mut self) -> Result<&WaveField> {
        let m = self.step_index() + 1;
        if m > self.time.steps() {
            return Err(Error::BadExtents(format!("time mesh has only {} steps", self.time.steps())));
        }
        let load = self.load(m);
        self.current = self.system.step(&self.current, load.as_deref(), self.time.step(m))?;
        Ok(&self.current)
    }
}

/// Zeroes the planes `±X1` and `±(X1 - h1)`; returns the largest dropped magnitude.
pub fn restrict_to_core_layer(mesh: &SpaceMesh, field: &mut [C64]) -> f64 {
    let b = mesh.plane_size();
    let mut dropped: f64 = 0.0;
    for p in mesh.boundary_layer_planes() {
        for v in &mut field[p * b..(p + 1) * b] {
            dropped = dropped.max(v.norm());
            *v = ZERO;
        }
    }
    dropped
}

/// `Ψ⁰` by the configured rule, always in `S_{0h}`.
pub fn initial_field(forms: &AssembledForms, initial: &InitialData, rule: InitialRule, v_hat: f64) -> Result<WaveField> {
    let mesh = forms.mesh();
    let pinned = mesh.boundary_layer_planes();
    let mut psi = match rule {
        InitialRule::Interpolant => interpolate(initial, mesh),
        InitialRule::L2Projection => forms.l2_project(initial, &pinned)?,
        InitialRule::EllipticProjection => forms.elliptic_project(initial, v_hat, &pinned)?,
    };
    restrict_to_core_layer(mesh, &mut psi);
    Ok(psi)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub m: usize,
    pub t: f64,
    pub values: WaveField,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormRecord {
    pub m: usize,
    pub t: f64,
    pub l2rho: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub mesh: SpaceMesh,
    pub snapshots: Vec<Snapshot>,
    pub norms: Vec<NormRecord>,
    pub energy: EnergyNormParams,
    pub mode: BoundaryMode,
    pub steps: usize,
    pub elapsed_seconds: f64,
}

fn norm_record(forms: &AssembledForms, m: usize, t: f64, psi: &[C64], v_hat: f64) -> Result<NormRecord> {
    Ok(NormRecord {
        m,
        t,
        l2rho: forms.l2rho(psi),
        energy: forms.energy(psi, v_hat)?,
    })
}

/// Runs a fully built scenario and records norms and the requested snapshots.
pub fn run_scenario(sc: &Scenario) -> Result<RunResult> {
    let start = Instant::now();
    let forms = assemble(&sc.mesh, &sc.field)?;
    let psi0 = initial_field(&forms, &sc.initial, sc.rule, sc.energy.v_hat)?;
    let v_hat = sc.energy.v_hat;
    let mut norms = vec![norm_record(&forms, 0, 0.0, &psi0, v_hat)?];
    let wants = |m: usize| sc.snapshot_steps.contains(&m);
    let mut snapshots = Vec::new();
    if wants(0) {
        snapshots.push(Snapshot { m: 0, t: 0.0, values: psi0.clone() });
    }
    if sc.time.steps() > 0 {
        let mut it = Integrator::new(forms, sc.forcing.clone(), sc.time.clone(), sc.mode, psi0)?;
        while !it.is_done() {
            it.advance()?;
            let m = it.step_index();
            let t = sc.time.time(m);
            norms.push(norm_record(it.forms(), m, t, it.current(), v_hat)?);
            if wants(m) {
                snapshots.push(Snapshot { m, t, values: it.current().clone() });
            }
        }
    }
    Ok(RunResult {
        mesh: sc.mesh.clone(),
        snapshots,
        norms,
        energy: sc.energy,
        mode: sc.mode,
        steps: sc.time.steps(),
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Builds the scenario from a validated config and runs it.
pub fn run(config: &crate::config::RunConfig) -> Result<RunResult> {
    run_scenario(&config.build()?)
}

pub fn write_snapshots_csv(result: &RunResult, out: &mut impl Write) -> Result<()> {
    writeln!(out, "m,t,x1,x2,re,im,abs2")?;
    for s in &result.snapshots {
        for (d, v) in s.values.iter().enumerate() {
            let x = result.mesh.dof_point(d);
            writeln!(out, "{},{},{},{},{:e},{:e},{:e}", s.m, s.t, x[0], x[1], v.re, v.im, v.norm_sqr())?;
        }
    }
    Ok(())
}

pub fn write_norms_csv(result: &RunResult, out: &mut impl Write) -> Result<()> {
    writeln!(out, "m,t,l2rho,energy")?;
    for n in &result.norms {
        writeln!(out, "{},{},{:e},{:e}", n.m, n.t, n.l2rho, n.energy)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{CoefficientField, GaussianSpec, Physics};
    use crate::mesh::TransverseAxis;

    fn setup(mesh: &SpaceMesh) -> AssembledForms {
        let phys = Physics { hbar: 0.8, rho_inf: 1.3, b_inf: vec![1.1; mesh.dim()], v_inf: 0.2 };
        assemble(mesh, &CoefficientField::constant(phys, mesh).unwrap()).unwrap()
    }

    fn packet(mesh: &SpaceMesh) -> InitialData {
        InitialData::gaussian(GaussianSpec { center: 0.0, wavenumber: 3.0, width: 0.3, transverse_mode: 1 }, mesh)
    }

    #[test]
    fn truncated_three_dof_operators() {
        let mesh = SpaceMesh::uniform(1, 0.5, 1.0, 0.5, &[]).unwrap();
        let phys = Physics::unit(1);
        let forms = assemble(&mesh, &CoefficientField::constant(phys, &mesh).unwrap()).unwrap();
        let time = TimeMesh::uniform(1.0, 4).unwrap();
        let sys = SteppingSystem::build(&forms, &time, BoundaryMode::DirichletTruncated).unwrap();
        // interior row: mass h/6 [1 4 1], stiffness (1/2)/h [-1 2 -1]
        let (h, tau) = (0.5, 0.25);
        let i = C64::new(0.0, 1.0 / tau);
        let l = sys.rhs_matrix();
        assert!((l.get(2, 2) - (i * (4.0 * h / 6.0) + 0.5 * 2.0 * 0.5 / h)).norm() < 1e-15);
        assert!((l.get(2, 1) - (i * (h / 6.0) - 0.5 * 0.5 / h)).norm() < 1e-15);
        let s = sys.step_matrix();
        assert!((s.get(2, 2) - (i * (4.0 * h / 6.0) - 0.5 * 2.0 * 0.5 / h)).norm() < 1e-15);
        assert_eq!(s.get(0, 0), C64::new(1.0, 0.0));
        assert_eq!(s.get(1, 0), ZERO);
    }

    #[test]
    fn dtbc_changes_only_the_corners_in_1d() {
        let mesh = SpaceMesh::uniform(1, 1.0, 1.5, 0.25, &[]).unwrap();
        let forms = setup(&mesh);
        let time = TimeMesh::uniform(1.0, 10).unwrap();
        let sys = SteppingSystem::build(&forms, &time, BoundaryMode::Dtbc).unwrap();
        let kernel = sys.kernel().unwrap();
        let c1 = kernel.modes()[0].coefficients.c1;
        let phys = forms.field().physics();
        let coupling = c1 * (0.5 * phys.hbar * phys.hbar * phys.b_inf[0]);
        let diff = sys.step_matrix().to_dense() - (sys.rhs_matrix().to_dense() - forms.stiffness.to_dense());
        let n = mesh.dofs();
        for r in 0..n {
            for c in 0..n {
                let want = if (r, c) == (0, 0) || (r, c) == (n - 1, n - 1) { coupling } else { ZERO };
                assert!((diff[(r, c)] - want).norm() < 1e-14, "({r}, {c})");
            }
        }
    }

    #[test]
    fn zero_stays_zero() {
        let mesh = SpaceMesh::uniform(1, 1.0, 1.5, 0.25, &[]).unwrap();
        let time = TimeMesh::uniform(1.0, 10).unwrap();
        let mut it = Integrator::new(setup(&mesh), Forcing::zero(), time, BoundaryMode::Dtbc, vec![ZERO; mesh.dofs()]).unwrap();
        while !it.is_done() {
            assert!(it.advance().unwrap().iter().all(|z| *z == ZERO));
        }
    }

    #[test]
    fn truncated_conserves_norm_and_is_reversible() {
        for mesh in [
            SpaceMesh::uniform(1, 2.0, 3.0, 0.1, &[]).unwrap(),
            SpaceMesh::uniform(2, 2.0, 2.5, 0.25, &[TransverseAxis { extent: 1.0, cells: 6 }]).unwrap(),
        ] {
            let forms = setup(&mesh);
            let psi0 = interpolate(&packet(&mesh), &mesh);
            let n0 = forms.l2rho(&psi0);
            let time = TimeMesh::uniform(0.5, 100).unwrap();
            let mut it = Integrator::new(forms.clone(), Forcing::zero(), time.clone(), BoundaryMode::DirichletTruncated, psi0.clone()).unwrap();
            while !it.is_done() {
                it.advance().unwrap();
                assert!((forms.l2rho(it.current()) - n0).abs() < 1e-12 * n0);
            }
            let back: WaveField = it.current().iter().map(|z| z.conj()).collect();
            let mut rev = Integrator::new(forms.clone(), Forcing::zero(), time, BoundaryMode::DirichletTruncated, back).unwrap();
            while !rev.is_done() {
                rev.advance().unwrap();
            }
            let err = rev.current().iter().zip(&psi0).map(|(a, b)| (a.conj() - b).norm()).fold(0.0, f64::max);
            assert!(err < 1e-10, "{err}");
        }
    }

    #[test]
    fn dtbc_norm_does_not_grow() {
        for mesh in [
            SpaceMesh::uniform(1, 1.5, 2.0, 0.05, &[]).unwrap(),
            SpaceMesh::uniform(2, 1.5, 2.0, 0.1, &[TransverseAxis { extent: 1.0, cells: 8 }]).unwrap(),
        ] {
            let forms = setup(&mesh);
            let psi0 = interpolate(&packet(&mesh), &mesh);
            let time = TimeMesh::uniform(2.0, 200).unwrap();
            let mut it = Integrator::new(forms.clone(), Forcing::zero(), time, BoundaryMode::Dtbc, psi0.clone()).unwrap();
            let mut prev = forms.l2rho(&psi0);
            let first = prev;
            while !it.is_done() {
                it.advance().unwrap();
                let n = forms.l2rho(it.current());
                assert!(n <= prev * (1.0 + 1e-12));
                prev = n;
            }
            assert!(prev < 0.5 * first, "packet should leave: {prev} vs {first}");
        }
    }

    #[test]
    fn zero_steps_report_only_the_initial_level() {
        let text = r#"{
            "dimension": 1,
            "mesh": { "x0": 4.0, "x1": 5.0, "h1": 0.1 },
            "initial": { "center": 0.0, "wavenumber": 2.0, "width": 0.3 },
            "time": { "final_time": 1.0, "steps": 0 }
        }"#;
        let r = run(&crate::config::parse_config(text).unwrap()).unwrap();
        assert_eq!(r.snapshots.len(), 1);
        assert_eq!(r.norms.len(), 1);
    }

    #[test]
    fn nonuniform_time_mesh() {
        let mesh = SpaceMesh::uniform(1, 1.0, 1.5, 0.25, &[]).unwrap();
        let forms = setup(&mesh);
        let time = TimeMesh::from_nodes(vec![0.0, 0.1, 0.3, 0.35]).unwrap();
        assert!(matches!(SteppingSystem::build(&forms, &time, BoundaryMode::Dtbc), Err(Error::NonuniformTimeMesh)));
        let psi0 = interpolate(&packet(&mesh), &mesh);
        let n0 = forms.l2rho(&psi0);
        let mut it = Integrator::new(forms.clone(), Forcing::zero(), time, BoundaryMode::DirichletTruncated, psi0).unwrap();
        while !it.is_done() {
            it.advance().unwrap();
        }
        assert!((forms.l2rho(it.current()) - n0).abs() < 1e-12 * n0);
    }
}
