//! Linear (1D) and bilinear (2D) finite elements on the box mesh.
//!
//! Dofs are all x1 nodes including `±X1`, times the interior transverse
//! nodes; transverse walls are eliminated. Numbering is transverse-major
//! within x1 planes, so every form is block-tridiagonal.

use std::io::Write;

use crate::coeffs::{CoefficientField, Sampler};
use crate::error::{Error, Result};
use crate::linalg::{BlockLu, BlockTridiag, C64};
use crate::mesh::SpaceMesh;

/// Nodal values of a finite element function on a [`SpaceMesh`].
pub type WaveField = Vec<C64>;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Two-point Gauss rule on `[0, 1]`.
pub(crate) fn gauss2() -> [(f64, f64); 2] {
    let g = 0.5 / 3f64.sqrt();
    [(0.5 - g, 0.5), (0.5 + g, 0.5)]
}

/// Four-point Gauss rule on `[0, 1]`, used for error norms.
pub(crate) fn gauss4() -> [(f64, f64); 4] {
    let (a, b) = (0.3399810435848563, 0.8611363115940526);
    let (wa, wb) = (0.6521451548625461, 0.3478548451374538);
    [
        (0.5 - 0.5 * b, 0.5 * wb),
        (0.5 - 0.5 * a, 0.5 * wa),
        (0.5 + 0.5 * a, 0.5 * wa),
        (0.5 + 0.5 * b, 0.5 * wb),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementMatrices {
    pub mass: [[f64; 2]; 2],
    pub stiffness: [[f64; 2]; 2],
}

/// Mass-type matrix `∫ w φ_i φ_j` of a linear element under the two-point rule,
/// written in closed form so constant weights give exact values.
fn weighted_mass_1d(h: f64, w: [f64; 2]) -> [[f64; 2]; 2] {
    let c = 0.5 * (w[0] + w[1]) * h / 6.0;
    let e = 0.5 * (w[0] - w[1]) * h / (2.0 * 3f64.sqrt());
    [[2.0 * c + e, c], [c, 2.0 * c - e]]
}

/// Element mass and stiffness-plus-potential matrices of a linear element.
///
/// Samples are taken at the two Gauss nodes of the cell, left node first.
pub fn element_matrices_1d(h: f64, rho: [f64; 2], b: [f64; 2], v: [f64; 2], hbar: f64) -> ElementMatrices {
    let k = 0.5 * hbar * hbar * (0.5 * (b[0] + b[1])) / h;
    let pot = weighted_mass_1d(h, v);
    ElementMatrices {
        mass: weighted_mass_1d(h, rho),
        stiffness: [[k + pot[0][0], -k + pot[0][1]], [-k + pot[1][0], k + pot[1][1]]],
    }
}

/// One element with its (up to four) local dofs.
#[derive(Debug, Clone, Copy)]
struct Cell {
    origin: [f64; 2],
    size: [f64; 2],
    dofs: [Option<usize>; 4],
    local: usize,
}

#[derive(Debug, Clone, Copy)]
struct QuadPoint {
    x: [f64; 2],
    w: f64,
    phi: [f64; 4],
    grad: [[f64; 2]; 4],
}

fn cells(mesh: &SpaceMesh) -> Vec<Cell> {
    let xs = mesh.x1_nodes();
    let mut out = Vec::new();
    match mesh.transverse().first() {
        None => {
            for i in 0..xs.len() - 1 {
                out.push(Cell {
                    origin: [xs[i], 0.0],
                    size: [xs[i + 1] - xs[i], 1.0],
                    dofs: [Some(i), Some(i + 1), None, None],
                    local: 2,
                });
            }
        }
        Some(axis) => {
            let jn = axis.cells;
            let b = axis.interior();
            let dof = |plane: usize, j: usize| (j >= 1 && j < jn).then(|| plane * b + j - 1);
            for i in 0..xs.len() - 1 {
                for j in 0..jn {
                    let y0 = axis.node(j);
                    out.push(Cell {
                        origin: [xs[i], y0],
                        size: [xs[i + 1] - xs[i], axis.node(j + 1) - y0],
                        dofs: [dof(i, j), dof(i, j + 1), dof(i + 1, j), dof(i + 1, j + 1)],
                        local: 4,
                    });
                }
            }
        }
    }
    out
}

fn quad_points(cell: &Cell, rule: &[(f64, f64)]) -> Vec<QuadPoint> {
    let [hx, hy] = cell.size;
    let mut out = Vec::with_capacity(rule.len() * rule.len());
    if cell.local == 2 {
        for &(s, w) in rule {
            out.push(QuadPoint {
                x: [cell.origin[0] + s * hx, 0.0],
                w: w * hx,
                phi: [1.0 - s, s, 0.0, 0.0],
                grad: [[-1.0 / hx, 0.0], [1.0 / hx, 0.0], [0.0; 2], [0.0; 2]],
            });
        }
    } else {
        for &(s, ws) in rule {
            for &(t, wt) in rule {
                let (sx, sy) = ([1.0 - s, s], [1.0 - t, t]);
                let (dx, dy) = ([-1.0 / hx, 1.0 / hx], [-1.0 / hy, 1.0 / hy]);
                let mut phi = [0.0; 4];
                let mut grad = [[0.0; 2]; 4];
                for a in 0..2 {
                    for b in 0..2 {
                        phi[2 * a + b] = sx[a] * sy[b];
                        grad[2 * a + b] = [dx[a] * sy[b], sx[a] * dy[b]];
                    }
                }
                out.push(QuadPoint {
                    x: [cell.origin[0] + s * hx, cell.origin[1] + t * hy],
                    w: ws * wt * hx * hy,
                    phi,
                    grad,
                });
            }
        }
    }
    out
}

fn local_value(cell: &Cell, p: &QuadPoint, c: &[C64]) -> (C64, [C64; 2]) {
    let mut v = ZERO;
    let mut g = [ZERO; 2];
    for a in 0..cell.local {
        if let Some(d) = cell.dofs[a] {
            v += c[d] * p.phi[a];
            g[0] += c[d] * p.grad[a][0];
            g[1] += c[d] * p.grad[a][1];
        }
    }
    (v, g)
}

/// Mass, stiffness-plus-potential and `1/ρ`-mass matrices on a mesh.
#[derive(Debug, Clone)]
pub struct AssembledForms {
    pub mass: BlockTridiag,
    pub stiffness: BlockTridiag,
    pub mass_inv_rho: BlockTridiag,
    mesh: SpaceMesh,
    field: CoefficientField,
}

pub fn assemble(mesh: &SpaceMesh, field: &CoefficientField) -> Result<AssembledForms> {
    if field.dim() != mesh.dim() {
        return Err(Error::DimensionMismatch(format!(
            "coefficients are {}D, mesh is {}D",
            field.dim(),
            mesh.dim()
        )));
    }
    let hbar = field.physics().hbar;
    let (nb, bs) = (mesh.planes(), mesh.plane_size());
    let mut mass = BlockTridiag::zeros(nb, bs);
    let mut stiffness = BlockTridiag::zeros(nb, bs);
    let mut mass_inv_rho = BlockTridiag::zeros(nb, bs);
    let real = |x: f64| C64::new(x, 0.0);

    if mesh.dim() == 1 {
        let xs = mesh.x1_nodes();
        let rule = gauss2();
        for i in 0..xs.len() - 1 {
            let h = xs[i + 1] - xs[i];
            let pts = rule.map(|(s, _)| [xs[i] + s * h, 0.0]);
            let rho = pts.map(|x| field.rho(x));
            let el = element_matrices_1d(h, rho, pts.map(|x| field.b(x, 0)), pts.map(|x| field.v(x)), hbar);
            let inv = weighted_mass_1d(h, rho.map(|r| 1.0 / r));
            for a in 0..2 {
                for b in 0..2 {
                    mass.add(i + a, i + b, real(el.mass[a][b]));
                    stiffness.add(i + a, i + b, real(el.stiffness[a][b]));
                    mass_inv_rho.add(i + a, i + b, real(inv[a][b]));
                }
            }
        }
    } else {
        let half = 0.5 * hbar * hbar;
        let rule = gauss2();
        for cell in cells(mesh) {
            let mut me = [[0.0; 4]; 4];
            let mut ke = [[0.0; 4]; 4];
            let mut ie = [[0.0; 4]; 4];
            for p in quad_points(&cell, &rule) {
                let (rho, v) = (field.rho(p.x), field.v(p.x));
                let (b1, b2) = (field.b(p.x, 0), field.b(p.x, 1));
                for a in 0..4 {
                    for b in a..4 {
                        let pp = p.w * p.phi[a] * p.phi[b];
                        me[a][b] += rho * pp;
                        ie[a][b] += pp / rho;
                        ke[a][b] += half * p.w * (b1 * p.grad[a][0] * p.grad[b][0] + b2 * p.grad[a][1] * p.grad[b][1])
                            + v * pp;
                    }
                }
            }
            // mirror so the element matrices are exactly symmetric
            for a in 0..4 {
                for b in 0..a {
                    me[a][b] = me[b][a];
                    ke[a][b] = ke[b][a];
                    ie[a][b] = ie[b][a];
                }
            }
            for a in 0..4 {
                let Some(da) = cell.dofs[a] else { continue };
                for b in 0..4 {
                    let Some(db) = cell.dofs[b] else { continue };
                    mass.add(da, db, real(me[a][b]));
                    stiffness.add(da, db, real(ke[a][b]));
                    mass_inv_rho.add(da, db, real(ie[a][b]));
                }
            }
        }
    }
    Ok(AssembledForms {
        mass,
        stiffness,
        mass_inv_rho,
        mesh: mesh.clone(),
        field: field.clone(),
    })
}

fn quadratic(a: &BlockTridiag, c: &[C64]) -> f64 {
    a.form(c, c).re
}

impl AssembledForms {
    pub fn mesh(&self) -> &SpaceMesh {
        &self.mesh
    }

    pub fn field(&self) -> &CoefficientField {
        &self.field
    }

    pub fn hbar(&self) -> f64 {
        self.field.physics().hbar
    }

    /// `A(v̂) = K + v̂ M_ρ`.
    pub fn shifted(&self, v_hat: f64) -> BlockTridiag {
        self.stiffness
            .combine(C64::new(1.0, 0.0), &self.mass, C64::new(v_hat, 0.0))
    }

    pub fn l2rho(&self, c: &[C64]) -> f64 {
        quadratic(&self.mass, c).max(0.0).sqrt()
    }

    pub fn l2_inv_rho(&self, c: &[C64]) -> f64 {
        quadratic(&self.mass_inv_rho, c).max(0.0).sqrt()
    }

    /// `sqrt(𝓛(w, w) + v̂ ‖w‖²_ρ)`.
    pub fn energy(&self, c: &[C64], v_hat: f64) -> Result<f64> {
        let e = quadratic(&self.stiffness, c) + v_hat * quadratic(&self.mass, c);
        if e < 0.0 {
            return Err(Error::NegativeEnergyNorm(e));
        }
        Ok(e.sqrt())
    }

    /// Load vector `(F, φ_i)` by the two-point rule.
    pub fn load_vector(&self, f: &dyn Sampler) -> Vec<C64> {
        self.integrate_against_basis(&gauss2(), |p| (f.value(p.x), [ZERO; 2]))
    }

    /// `(ρ w, φ_i)`, the right side of the `L²_ρ` projection.
    pub fn rho_load(&self, w: &dyn Sampler) -> Vec<C64> {
        self.integrate_against_basis(&gauss2(), |p| (w.value(p.x) * self.field.rho(p.x), [ZERO; 2]))
    }

    /// `𝓛(w, φ_i) + v̂ (w, φ_i)_ρ`, the right side of the elliptic projection.
    pub fn elliptic_load(&self, w: &dyn Sampler, v_hat: f64) -> Vec<C64> {
        let half = 0.5 * self.hbar() * self.hbar();
        self.integrate_against_basis(&gauss2(), |p| {
            let g = w.gradient(p.x);
            let zero_order = w.value(p.x) * (self.field.v(p.x) + v_hat * self.field.rho(p.x));
            let first = [g[0] * (half * self.field.b(p.x, 0)), {
                if self.mesh.dim() == 2 {
                    g[1] * (half * self.field.b(p.x, 1))
                } else {
                    ZERO
                }
            }];
            (zero_order, first)
        })
    }

    /// `Σ_points w (f0 φ_i + f1 · ∇φ_i)` for every dof `i`.
    fn integrate_against_basis(&self, rule: &[(f64, f64)], f: impl Fn(&QuadPoint) -> (C64, [C64; 2])) -> Vec<C64> {
        let mut out = vec![ZERO; self.mesh.dofs()];
        for cell in cells(&self.mesh) {
            for p in quad_points(&cell, rule) {
                let (f0, f1) = f(&p);
                for a in 0..cell.local {
                    if let Some(d) = cell.dofs[a] {
                        out[d] += (f0 * p.phi[a] + f1[0] * p.grad[a][0] + f1[1] * p.grad[a][1]) * p.w;
                    }
                }
            }
        }
        out
    }

    /// `sqrt(∫ |f|² / ρ)` by the two-point rule, matching [`Self::load_vector`].
    pub fn sampled_l2_inv_rho(&self, f: &dyn Sampler) -> f64 {
        let mut s = 0.0;
        for cell in cells(&self.mesh) {
            for p in quad_points(&cell, &gauss2()) {
                s += p.w * f.value(p.x).norm_sqr() / self.field.rho(p.x);
            }
        }
        s.sqrt()
    }

    /// `max_t`-free error `‖ψ - Ψ‖_{L²,ρ}` by the four-point rule.
    pub fn l2rho_error(&self, c: &[C64], exact: &dyn Sampler) -> f64 {
        let mut s = 0.0;
        for cell in cells(&self.mesh) {
            for p in quad_points(&cell, &gauss4()) {
                let (v, _) = local_value(&cell, &p, c);
                s += p.w * self.field.rho(p.x) * (exact.value(p.x) - v).norm_sqr();
            }
        }
        s.sqrt()
    }

    /// Energy norm of `ψ - Ψ` by the four-point rule.
    pub fn energy_error(&self, c: &[C64], exact: &dyn Sampler, v_hat: f64) -> f64 {
        let half = 0.5 * self.hbar() * self.hbar();
        let mut s = 0.0;
        for cell in cells(&self.mesh) {
            for p in quad_points(&cell, &gauss4()) {
                let (v, g) = local_value(&cell, &p, c);
                let ge = exact.gradient(p.x);
                let mut grad = half * self.field.b(p.x, 0) * (ge[0] - g[0]).norm_sqr();
                if self.mesh.dim() == 2 {
                    grad += half * self.field.b(p.x, 1) * (ge[1] - g[1]).norm_sqr();
                }
                let mass = (self.field.v(p.x) + v_hat * self.field.rho(p.x)) * (exact.value(p.x) - v).norm_sqr();
                s += p.w * (grad + mass);
            }
        }
        s.max(0.0).sqrt()
    }

    /// Solves `matrix · c = rhs` with the given planes pinned to zero.
    fn constrained_solve(&self, matrix: &BlockTridiag, mut rhs: Vec<C64>, pinned: &[usize]) -> Result<WaveField> {
        let mut a = matrix.clone();
        a.pin_planes(pinned);
        let b = self.mesh.plane_size();
        for &p in pinned {
            rhs[p * b..(p + 1) * b].fill(ZERO);
        }
        a.factor()?.solve(&rhs)
    }

    /// `L²_ρ` projection onto the finite element space, with `pinned` planes set to zero.
    pub fn l2_project(&self, w: &dyn Sampler, pinned: &[usize]) -> Result<WaveField> {
        self.constrained_solve(&self.mass, self.rho_load(w), pinned)
    }

    /// Elliptic projection `σw`: `A(v̂) σw = 𝓛(w, ·) + v̂ (w, ·)_ρ`.
    pub fn elliptic_project(&self, w: &dyn Sampler, v_hat: f64, pinned: &[usize]) -> Result<WaveField> {
        self.constrained_solve(&self.shifted(v_hat), self.elliptic_load(w, v_hat), pinned)
    }

    /// Evaluates the finite element function with nodal values `c` at `x`.
    pub fn evaluate(&self, c: &[C64], x: [f64; 2]) -> C64 {
        evaluate(&self.mesh, c, x)
    }
}

/// Point evaluation of a finite element function; zero outside the box.
pub fn evaluate(mesh: &SpaceMesh, c: &[C64], x: [f64; 2]) -> C64 {
    let xs = mesh.x1_nodes();
    if x[0] < xs[0] || x[0] > xs[xs.len() - 1] {
        return ZERO;
    }
    let i = xs.partition_point(|&n| n <= x[0]).clamp(1, xs.len() - 1) - 1;
    let s = (x[0] - xs[i]) / (xs[i + 1] - xs[i]);
    match mesh.transverse().first() {
        None => c[i] * (1.0 - s) + c[i + 1] * s,
        Some(axis) => {
            if x[1] < 0.0 || x[1] > axis.extent {
                return ZERO;
            }
            let hy = axis.step();
            let j = ((x[1] / hy).floor() as usize).min(axis.cells - 1);
            let t = (x[1] - axis.node(j)) / (axis.node(j + 1) - axis.node(j));
            let b = axis.interior();
            let at = |plane: usize, jj: usize| {
                if jj == 0 || jj == axis.cells {
                    ZERO
                } else {
                    c[plane * b + jj - 1]
                }
            };
            (at(i, j) * (1.0 - t) + at(i, j + 1) * t) * (1.0 - s) + (at(i + 1, j) * (1.0 - t) + at(i + 1, j + 1) * t) * s
        }
    }
}

/// Nodal interpolant `sw`.
pub fn interpolate(w: &dyn Sampler, mesh: &SpaceMesh) -> WaveField {
    (0..mesh.dofs()).map(|d| w.value(mesh.dof_point(d))).collect()
}

/// Interpolates a coarse finite element function onto a nested finer mesh.
pub fn prolongate(coarse: &SpaceMesh, c: &[C64], fine: &SpaceMesh) -> WaveField {
    (0..fine.dofs()).map(|d| evaluate(coarse, c, fine.dof_point(d))).collect()
}

/// Dual norm `‖w‖_{H_h^{-1}} = sqrt(ℓ^H A(v̂)^{-1} ℓ)` with a reusable factorization.
#[derive(Debug, Clone)]
pub struct DualNorm {
    lu: BlockLu,
}

impl DualNorm {
    pub fn new(forms: &AssembledForms, v_hat: f64) -> Result<Self> {
        Ok(Self {
            lu: forms.shifted(v_hat).factor()?,
        })
    }

    pub fn eval(&self, load: &[C64]) -> Result<f64> {
        let x = self.lu.solve(load)?;
        let s: C64 = load.iter().zip(&x).map(|(l, y)| l.conj() * y).sum();
        Ok(s.re.max(0.0).sqrt())
    }
}

pub fn dual_h_norm(load: &[C64], forms: &AssembledForms, v_hat: f64) -> Result<f64> {
    DualNorm::new(forms, v_hat)?.eval(load)
}

/// Writes the nonzero entries as `row,col,re,im` lines.
pub fn write_coo_csv(matrix: &BlockTridiag, out: &mut impl Write) -> Result<()> {
    writeln!(out, "row,col,re,im")?;
    for (r, c, v) in matrix.triplets() {
        writeln!(out, "{r},{c},{:e},{:e}", v.re, v.im)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{CoefficientPreset, Physics};
    use crate::mesh::{build_space_mesh, TransverseAxis};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn random_field(rng: &mut ChaCha8Rng, n: usize) -> WaveField {
        (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    }

    fn mesh2d() -> SpaceMesh {
        let axis = TransverseAxis { extent: 1.2, cells: 5 };
        build_space_mesh(2, 1.0, 1.5, 0.25, &[-0.6, -0.1, 0.3, 0.7], &[axis]).unwrap()
    }

    fn variable(mesh: &SpaceMesh) -> CoefficientField {
        let mut phys = Physics::unit(mesh.dim());
        phys.v_inf = -0.3;
        phys.hbar = 0.8;
        let preset = CoefficientPreset::RhoBump { center: 0.1, half_width: 0.8, amplitude: 1.5 };
        CoefficientField::new(phys, preset, mesh).unwrap()
    }

    #[test]
    fn element_matrices_closed_forms() {
        let el = element_matrices_1d(1.0, [1.0; 2], [1.0; 2], [0.0; 2], 2f64.sqrt());
        let (d, o) = (2.0 * (1.0 / 6.0), 1.0 / 6.0);
        assert_eq!(el.mass, [[d, o], [o, d]]);
        for (a, b) in el.stiffness.iter().flatten().zip([1.0, -1.0, -1.0, 1.0]) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON);
        }
        let el = element_matrices_1d(0.5, [2.0; 2], [1.0; 2], [0.0; 2], 1.0);
        let (d, o) = (2.0 * (2.0 * 0.5 / 6.0), 2.0 * 0.5 / 6.0);
        assert_eq!(el.mass, [[d, o], [o, d]]);
    }

    #[test]
    fn element_mass_against_fine_quadrature() {
        // ∫ ρ φ_i φ_j with ρ linear is integrated exactly by the two-point rule
        let (h, r0, r1) = (0.7, 1.3, 2.9);
        let g = gauss2();
        let rho_at = |s: f64| r0 + (r1 - r0) * s;
        let el = element_matrices_1d(h, g.map(|(s, _)| rho_at(s)), [1.0; 2], [0.0; 2], 1.0);
        let n = 20000;
        let mut m = [[0.0; 2]; 2];
        for k in 0..n {
            let s = (k as f64 + 0.5) / n as f64;
            let phi = [1.0 - s, s];
            for a in 0..2 {
                for b in 0..2 {
                    m[a][b] += rho_at(s) * phi[a] * phi[b] * h / n as f64;
                }
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                assert!((m[a][b] - el.mass[a][b]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn uniform_1d_rows() {
        let m = SpaceMesh::uniform(1, 1.0, 2.0, 1.0, &[]).unwrap();
        let f = CoefficientField::constant(Physics::unit(1), &m).unwrap();
        let forms = assemble(&m, &f).unwrap();
        for i in 1..3 {
            assert_eq!(forms.mass.get(i, i - 1), c(1.0 / 6.0));
            assert_eq!(forms.mass.get(i, i), c(2.0 * (2.0 * (1.0 / 6.0))));
            assert_eq!(forms.mass.get(i, i + 1), c(1.0 / 6.0));
        }
    }

    #[test]
    fn forms_are_hermitian_and_definite() {
        let m = mesh2d();
        let f = variable(&m);
        let forms = assemble(&m, &f).unwrap();
        assert_eq!(forms.mass.hermitian_defect(), 0.0);
        assert_eq!(forms.stiffness.hermitian_defect(), 0.0);
        let eig = forms.mass.to_dense().map(|z| z.re).symmetric_eigen();
        assert!(eig.eigenvalues.min() > 0.0);
        let p = crate::coeffs::safe_vhat(&f, &m, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let w = random_field(&mut rng, m.dofs());
            let e = forms.energy(&w, p.v_hat).unwrap();
            assert!(e * e >= p.delta_hat * forms.l2rho(&w).powi(2) * (1.0 - 1e-12));
        }
    }

    #[test]
    fn two_dimensional_forms_are_tensor_products() {
        let axis = TransverseAxis { extent: 1.2, cells: 5 };
        let m = build_space_mesh(2, 1.0, 1.5, 0.25, &[-0.6, -0.1, 0.3, 0.7], &[axis]).unwrap();
        let phys = Physics { hbar: 0.9, rho_inf: 1.7, b_inf: vec![1.3, 0.6], v_inf: 0.4 };
        let forms = assemble(&m, &CoefficientField::constant(phys.clone(), &m).unwrap()).unwrap();

        let xs = m.x1_nodes();
        let p = xs.len();
        let (mut m1, mut k1) = (DMatrix::<f64>::zeros(p, p), DMatrix::<f64>::zeros(p, p));
        for i in 0..p - 1 {
            let h = xs[i + 1] - xs[i];
            let el = element_matrices_1d(h, [1.0; 2], [1.0; 2], [0.0; 2], 2f64.sqrt());
            for a in 0..2 {
                for b in 0..2 {
                    m1[(i + a, i + b)] += el.mass[a][b];
                    k1[(i + a, i + b)] += if a == b { 1.0 / h } else { -1.0 / h };
                }
            }
        }
        let hy = axis.step();
        let j = axis.interior();
        let m2 = DMatrix::from_fn(j, j, |r, s| match r.abs_diff(s) {
            0 => 4.0 * hy / 6.0,
            1 => hy / 6.0,
            _ => 0.0,
        });
        let k2 = DMatrix::from_fn(j, j, |r, s| match r.abs_diff(s) {
            0 => 2.0 / hy,
            1 => -1.0 / hy,
            _ => 0.0,
        });
        let half = 0.5 * phys.hbar * phys.hbar;
        let mass = m1.kronecker(&m2) * phys.rho_inf;
        let stiff = (k1.kronecker(&m2) * phys.b_inf[0] + m1.kronecker(&k2) * phys.b_inf[1]) * half
            + m1.kronecker(&m2) * phys.v_inf;
        let dm = forms.mass.to_dense().map(|z| z.re) - mass;
        let dk = forms.stiffness.to_dense().map(|z| z.re) - stiff;
        assert!(dm.amax() < 1e-12 && dk.amax() < 1e-12, "{} {}", dm.amax(), dk.amax());
    }

    #[test]
    fn interpolation_reproduces_polylinear_functions() {
        let m = mesh2d();
        let axis = m.transverse()[0];
        // bilinear in every cell and zero on the transverse walls
        let poly = |x: [f64; 2]| {
            let hy = axis.step();
            let tent = 1.0 - ((x[1] - 2.0 * hy) / hy).abs();
            C64::new(0.5 * x[0] - 0.2, x[0]) * tent.max(0.0)
        };
        let w = interpolate(&poly, &m);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let x = [rng.gen_range(-1.5..1.5), rng.gen_range(0.0..1.2)];
            assert!((evaluate(&m, &w, x) - poly(x)).norm() < 1e-13);
        }
        assert!(interpolate(&|_x: [f64; 2]| ZERO, &m).iter().all(|z| *z == ZERO));
    }

    #[test]
    fn elliptic_projection_properties() {
        let m = mesh2d();
        let f = variable(&m);
        let forms = assemble(&m, &f).unwrap();
        let v_hat = crate::coeffs::safe_vhat(&f, &m, 1.0).unwrap().v_hat;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_field(&mut rng, m.dofs());
        let sampler = |x: [f64; 2]| evaluate(&m, &w, x);
        let pw = forms.elliptic_project(&sampler, v_hat, &[]).unwrap();
        for (a, b) in pw.iter().zip(&w) {
            assert!((a - b).norm() < 1e-10);
        }

        // Galerkin orthogonality for a smooth non-discrete w
        let smooth = |x: [f64; 2]| C64::new((x[0] * 1.3).cos(), x[0]) * (std::f64::consts::PI * x[1] / 1.2).sin();
        let sw = forms.elliptic_project(&smooth, v_hat, &[]).unwrap();
        let a = forms.shifted(v_hat);
        let load = forms.elliptic_load(&smooth, v_hat);
        let asw = a.mul_vec(&sw);
        let phi = random_field(&mut rng, m.dofs());
        let res: C64 = phi.iter().zip(load.iter().zip(&asw)).map(|(p, (l, s))| p.conj() * (l - s)).sum();
        assert!(res.norm() < 1e-10);
    }

    #[test]
    fn elliptic_projection_contracts_on_nested_meshes() {
        let coarse = SpaceMesh::uniform(1, 1.0, 1.5, 0.25, &[]).unwrap();
        let fine = coarse.refine(2).unwrap();
        let f = variable(&coarse);
        let ff = CoefficientField::new(f.physics().clone(), f.preset().clone(), &fine).unwrap();
        let (fc, fa) = (assemble(&coarse, &f).unwrap(), assemble(&fine, &ff).unwrap());
        let v_hat = crate::coeffs::safe_vhat(&f, &fine, 1.0).unwrap().v_hat;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let w = random_field(&mut rng, fine.dofs());
            let sampler = |x: [f64; 2]| evaluate(&fine, &w, x);
            let pw = fc.elliptic_project(&sampler, v_hat, &[]).unwrap();
            let up = prolongate(&coarse, &pw, &fine);
            assert!(fa.energy(&up, v_hat).unwrap() <= fa.energy(&w, v_hat).unwrap() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn norms_scale_and_vanish() {
        let m = SpaceMesh::uniform(1, 1.0, 2.0, 0.25, &[]).unwrap();
        let mut phys = Physics::unit(1);
        let one = assemble(&m, &CoefficientField::constant(phys.clone(), &m).unwrap()).unwrap();
        phys.rho_inf = 4.0;
        let four = assemble(&m, &CoefficientField::constant(phys, &m).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_field(&mut rng, m.dofs());
        assert!((four.l2rho(&w) - 2.0 * one.l2rho(&w)).abs() < 1e-14 * one.l2rho(&w) * 4.0);
        assert!((four.l2_inv_rho(&w) - 0.5 * one.l2_inv_rho(&w)).abs() < 1e-14);
        let z = vec![ZERO; m.dofs()];
        assert_eq!(one.l2rho(&z), 0.0);
        assert_eq!(one.energy(&z, 1.0).unwrap(), 0.0);
        assert!(matches!(one.energy(&w, -100.0), Err(Error::NegativeEnergyNorm(_))));
    }

    #[test]
    fn dual_norm_closed_form_and_search() {
        let m = build_space_mesh(1, 1.0, 1.5, 0.5, &[-0.2, 0.5], &[]).unwrap();
        let f = variable(&m);
        let forms = assemble(&m, &f).unwrap();
        let v_hat = 2.0;
        let a = forms.shifted(v_hat);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let phi0 = random_field(&mut rng, m.dofs());
        let load = a.mul_vec(&phi0);
        let d = dual_h_norm(&load, &forms, v_hat).unwrap();
        assert!((d - forms.energy(&phi0, v_hat).unwrap()).abs() < 1e-12 * d);
        assert_eq!(dual_h_norm(&vec![ZERO; m.dofs()], &forms, v_hat).unwrap(), 0.0);

        // random search from below, then local polishing towards the maximiser
        let load = random_field(&mut rng, m.dofs());
        let d = dual_h_norm(&load, &forms, v_hat).unwrap();
        let ratio = |phi: &[C64]| {
            let num: C64 = load.iter().zip(phi).map(|(l, p)| l * p.conj()).sum();
            num.norm() / forms.energy(phi, v_hat).unwrap()
        };
        let mut best = random_field(&mut rng, m.dofs());
        let mut best_r = ratio(&best);
        let mut step = 1.0;
        for _ in 0..20000 {
            let trial: Vec<C64> = best
                .iter()
                .map(|z| z + C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * step)
                .collect();
            let r = ratio(&trial);
            assert!(r <= d * (1.0 + 1e-12));
            if r > best_r {
                best = trial;
                best_r = r;
            } else {
                step *= 0.999;
            }
        }
        assert!((best_r - d).abs() < 1e-6 * d, "{best_r} vs {d}");
    }

    #[test]
    fn interpolation_error_is_second_order() {
        let gauss = |x: [f64; 2]| C64::new(-x[0] * x[0], 2.0 * x[0]).exp();
        let mut errs = Vec::new();
        let mut m = SpaceMesh::uniform(1, 2.0, 3.0, 0.25, &[]).unwrap();
        for _ in 0..4 {
            let f = CoefficientField::constant(Physics::unit(1), &m).unwrap();
            let forms = assemble(&m, &f).unwrap();
            errs.push(forms.l2rho_error(&interpolate(&gauss, &m), &gauss));
            m = m.refine(2).unwrap();
        }
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 2.0).abs() < 0.1, "{order}");
        }
    }

    #[test]
    fn coo_export() {
        let m = SpaceMesh::uniform(1, 1.0, 2.0, 1.0, &[]).unwrap();
        let forms = assemble(&m, &CoefficientField::constant(Physics::unit(1), &m).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_coo_csv(&forms.mass, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 5 + 2 * 4);
    }
}
